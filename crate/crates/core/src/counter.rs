//! Per-thread multiply-accumulate counters for instrumented forward passes.
//!
//! Only the differentiable product primitives on [`crate::autodiff::Tape`]
//! report here (matrix products and convolutions), and only while a
//! [`count_macs`] scope is active on the current thread.

use std::cell::RefCell;

use serde::Serialize;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MacCounts {
    pub matmul: u64,
    pub conv: u64,
}

impl MacCounts {
    pub fn total(&self) -> u64 {
        self.matmul + self.conv
    }
}

thread_local! {
    static ACTIVE: RefCell<Option<MacCounts>> = const { RefCell::new(None) };
}

/// Runs `f` and returns the MACs its tape primitives executed. Scopes nest:
/// an inner scope's counts are also added to the enclosing one.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, MacCounts) {
    let outer = ACTIVE.with(|a| a.borrow_mut().replace(MacCounts::default()));
    let result = f();
    let counts = ACTIVE.with(|a| {
        let mut slot = a.borrow_mut();
        let inner = slot.take().unwrap_or_default();
        *slot = outer.map(|o| MacCounts {
            matmul: o.matmul + inner.matmul,
            conv: o.conv + inner.conv,
        });
        inner
    });
    (result, counts)
}

pub(crate) fn record_matmul(macs: u64) {
    ACTIVE.with(|a| {
        if let Some(c) = a.borrow_mut().as_mut() {
            c.matmul += macs;
        }
    });
}

pub(crate) fn record_conv(macs: u64) {
    ACTIVE.with(|a| {
        if let Some(c) = a.borrow_mut().as_mut() {
            c.conv += macs;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_scopes_accumulate() {
        let ((_, inner), outer) = count_macs(|| {
            record_matmul(3);
            count_macs(|| record_conv(5))
        });
        assert_eq!(inner, MacCounts { matmul: 0, conv: 5 });
        assert_eq!(outer, MacCounts { matmul: 3, conv: 5 });
    }

    #[test]
    fn nothing_recorded_outside_scope() {
        record_matmul(10);
        let (_, c) = count_macs(|| ());
        assert_eq!(c.total(), 0);
    }
}
