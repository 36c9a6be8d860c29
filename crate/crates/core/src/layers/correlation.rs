use serde::Serialize;

use crate::error::{Error, Result};
use crate::symmetry::FilterParity;
use crate::tensor::{Scalar, Tensor};

/// Arithmetic performed by a 1D correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CorrelationCounts {
    pub mults: u64,
    pub adds: u64,
}

/// Valid correlation `y[i] = Σⱼ w[j]·x[i+j]`, counting every product and sum.
pub fn naive_correlation_1d<T: Scalar>(
    signal: &Tensor<T>,
    filter: &Tensor<T>,
) -> Result<(Tensor<T>, CorrelationCounts)> {
    let (x, w) = (signal.data(), filter.data());
    if w.len() > x.len() {
        return Err(Error::Usage(format!(
            "filter of {} taps on {} samples",
            w.len(),
            x.len()
        )));
    }
    let n_out = x.len() - w.len() + 1;
    let out = (0..n_out)
        .map(|i| w.iter().zip(&x[i..]).map(|(&a, &b)| a * b).sum())
        .collect();
    let counts = CorrelationCounts {
        mults: (n_out * w.len()) as u64,
        adds: (n_out * (w.len() - 1)) as u64,
    };
    Ok((Tensor::new([n_out], out)?, counts))
}

/// Valid correlation with a mirror-constrained `k`-tap filter given by its
/// leading half. Mirrored signal taps are summed (symmetric) or differenced
/// (antisymmetric) before multiplying, so each output costs `⌈k/2⌉` or
/// `⌊k/2⌋` multiplications. For an antisymmetric filter of odd width the
/// middle tap is zero; a supplied middle coefficient is ignored.
pub fn reduced_symmetric_correlation_1d<T: Scalar>(
    signal: &Tensor<T>,
    filter_half: &Tensor<T>,
    k: usize,
    parity: FilterParity,
) -> Result<(Tensor<T>, CorrelationCounts)> {
    if k < 2 {
        return Err(Error::Usage(format!("filter width must be at least 2, got {k}")));
    }
    let used = match parity {
        FilterParity::Symmetric => k.div_ceil(2),
        FilterParity::Antisymmetric => k / 2,
    };
    if filter_half.len() != used && filter_half.len() != k.div_ceil(2) {
        return Err(Error::Usage(format!(
            "{parity:?} filter of width {k} needs {used} free taps, got {}",
            filter_half.len()
        )));
    }
    let x = signal.data();
    if k > x.len() {
        return Err(Error::Usage(format!("filter of {k} taps on {} samples", x.len())));
    }
    let w = &filter_half.data()[..used];
    let n_out = x.len() - k + 1;
    let mut out = Vec::with_capacity(n_out);
    let mut counts = CorrelationCounts { mults: 0, adds: 0 };
    for i in 0..n_out {
        let mut acc = T::zero();
        for (j, &wj) in w.iter().enumerate() {
            let (a, b) = (x[i + j], x[i + k - 1 - j]);
            let folded = if j == k - 1 - j {
                a
            } else {
                counts.adds += 1;
                match parity {
                    FilterParity::Symmetric => a + b,
                    FilterParity::Antisymmetric => a - b,
                }
            };
            acc = if j == 0 {
                wj * folded
            } else {
                counts.adds += 1;
                acc + wj * folded
            };
            counts.mults += 1;
        }
        out.push(acc);
    }
    Ok((Tensor::new([n_out], out)?, counts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_filter_hand_case() {
        let x = Tensor::<f64>::from_f64([3], &[1.0, 2.0, 4.0]).unwrap();
        let a = Tensor::<f64>::from_f64([1], &[3.0]).unwrap();
        let (y, c) = reduced_symmetric_correlation_1d(&x, &a, 2, FilterParity::Symmetric).unwrap();
        assert_eq!(y.to_f64_vec(), vec![3.0 * 3.0, 3.0 * 6.0]);
        assert_eq!(c, CorrelationCounts { mults: 2, adds: 2 });
        let (_, naive) = naive_correlation_1d(&x, &Tensor::from_f64([2], &[3.0, 3.0]).unwrap()).unwrap();
        assert_eq!(naive, CorrelationCounts { mults: 4, adds: 2 });
        let (y, _) = reduced_symmetric_correlation_1d(&x, &a, 2, FilterParity::Antisymmetric).unwrap();
        assert_eq!(y.to_f64_vec(), vec![3.0 * -1.0, 3.0 * -2.0]);
    }

    #[test]
    fn three_tap_examples() {
        let x = Tensor::<f64>::from_f64([5], &[0.0, 1.0, 2.0, 4.0, 0.0]).unwrap();
        let (y, _) = reduced_symmetric_correlation_1d(
            &x,
            &Tensor::from_f64([2], &[1.0, 2.0]).unwrap(),
            3,
            FilterParity::Symmetric,
        )
        .unwrap();
        assert_eq!(y.to_f64_vec(), vec![2.0 + 2.0, 1.0 + 4.0 + 4.0, 2.0 + 8.0]);
        let (y, _) = reduced_symmetric_correlation_1d(
            &x,
            &Tensor::from_f64([1], &[1.0]).unwrap(),
            3,
            FilterParity::Antisymmetric,
        )
        .unwrap();
        assert_eq!(y.to_f64_vec(), vec![-2.0, 1.0 - 4.0, 2.0]);
    }

    #[test]
    fn too_short_filter_rejected() {
        let x = Tensor::<f64>::from_f64([3], &[1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::<f64>::from_f64([1], &[1.0]).unwrap();
        assert!(matches!(
            reduced_symmetric_correlation_1d(&x, &w, 1, FilterParity::Symmetric),
            Err(Error::Usage(_))
        ));
    }
}
