use std::f64::consts::FRAC_1_SQRT_2;

use super::Module;
use crate::autodiff::{Activation, Param, Parameterized, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::symmetry::ParityLayout;
use crate::tensor::Scalar;

/// Elementwise nonlinearity. With a balanced layout, channel `i` is paired
/// with channel `i + d/2` and σ is applied in the rotated basis:
/// `s = σ((a+b)/√2)`, `t = σ((a−b)/√2)`, output `((s+t)/√2, (s−t)/√2)`.
#[derive(Debug, Clone, Copy)]
pub struct Pointwise {
    pub act: Activation,
    pub layout: Option<ParityLayout>,
}

impl Pointwise {
    pub fn new(act: Activation, layout: Option<ParityLayout>) -> Result<Self> {
        if let Some(l) = layout {
            if !l.is_balanced() {
                return Err(Error::Unsupported(format!(
                    "equivariant pointwise needs paired halves, got {}+{}",
                    l.n_inv, l.n_equi
                )));
            }
        }
        Ok(Self { act, layout })
    }
}

impl<T: Scalar> Parameterized<T> for Pointwise {
    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }
}

impl<T: Scalar> Module<T> for Pointwise {
    fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let Some(layout) = self.layout else {
            return Ok(tape.activation(x, self.act));
        };
        let shape = tape.shape(x);
        if shape.len() != 2 {
            return Err(shape_err!("pointwise input must be tokens×d, got {shape:?}"));
        }
        layout.expect_width(shape[1])?;
        let h = layout.n_inv;
        let a = tape.cols(x, 0, h)?;
        let b = tape.cols(x, h, 2 * h)?;
        let u = tape.scale(tape.add(a, b)?, FRAC_1_SQRT_2);
        let v = tape.scale(tape.sub(a, b)?, FRAC_1_SQRT_2);
        let s = tape.activation(u, self.act);
        let t = tape.activation(v, self.act);
        let y_inv = tape.scale(tape.add(s, t)?, FRAC_1_SQRT_2);
        let y_equi = tape.scale(tape.sub(s, t)?, FRAC_1_SQRT_2);
        tape.concat_cols(&[y_inv, y_equi])
    }
}
