use std::f64::consts::FRAC_1_SQRT_2;

use super::ParityLayout;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Token-feature map split by channel parity (first index) and patch-column
/// parity (second index). Each tensor is `(N·N/2) × d/2`; row `i·N/2 + j`
/// pairs grid columns `j` and `N − 1 − j` of grid row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchParityTensors<T: Scalar> {
    pub pp: Tensor<T>,
    pub pm: Tensor<T>,
    pub mp: Tensor<T>,
    pub mm: Tensor<T>,
    pub grid: usize,
}

fn validate(t: usize, d: usize, layout: &ParityLayout, grid: usize) -> Result<()> {
    if grid % 2 != 0 {
        return Err(Error::Unsupported(format!(
            "patch-parity transform needs an even grid width, got {grid}"
        )));
    }
    if t != grid * grid {
        return Err(shape_err!("{t} tokens do not form a {grid}×{grid} grid"));
    }
    layout.expect_width(d)?;
    if !layout.is_balanced() {
        return Err(Error::Unsupported(format!(
            "patch-parity transform needs a balanced layout, got {}+{}",
            layout.n_inv, layout.n_equi
        )));
    }
    Ok(())
}

/// Orthonormal column-pair butterfly: even part `(a + b)/√2`, odd part
/// `(a − b)/√2`.
pub fn patch_parity_forward<T: Scalar>(
    x: &Tensor<T>,
    layout: &ParityLayout,
    grid: usize,
) -> Result<PatchParityTensors<T>> {
    if x.rank() != 2 {
        return Err(shape_err!("expected tokens×d, got {:?}", x.shape()));
    }
    let (t, d) = (x.shape()[0], x.shape()[1]);
    validate(t, d, layout, grid)?;
    let h = d / 2;
    let half = grid / 2;
    let s = T::from_f64(FRAC_1_SQRT_2);
    let rows = t / 2;
    let mut parts: [Vec<T>; 4] = std::array::from_fn(|_| Vec::with_capacity(rows * h));
    let src = x.data();
    for i in 0..grid {
        for j in 0..half {
            let a = &src[(i * grid + j) * d..(i * grid + j + 1) * d];
            let b = &src[(i * grid + grid - 1 - j) * d..(i * grid + grid - j) * d];
            for c in 0..d {
                let even = (a[c] + b[c]) * s;
                let odd = (a[c] - b[c]) * s;
                let (pe, po) = if c < h { (0, 1) } else { (2, 3) };
                parts[pe].push(even);
                parts[po].push(odd);
            }
        }
    }
    let [pp, pm, mp, mm] = parts.map(|p| Tensor::new([rows, h], p).expect("sized above"));
    Ok(PatchParityTensors { pp, pm, mp, mm, grid })
}

/// Inverse of [`patch_parity_forward`] (the same butterfly).
pub fn patch_parity_inverse<T: Scalar>(p: &PatchParityTensors<T>) -> Result<Tensor<T>> {
    let grid = p.grid;
    let rows = p.pp.shape()[0];
    let h = p.pp.shape()[1];
    for t in [&p.pm, &p.mp, &p.mm] {
        p.pp.expect_same_shape(t)?;
    }
    validate(rows * 2, 2 * h, &ParityLayout::new(h, h), grid)?;
    let d = 2 * h;
    let half = grid / 2;
    let s = T::from_f64(FRAC_1_SQRT_2);
    let mut out = vec![T::zero(); rows * 2 * d];
    for i in 0..grid {
        for j in 0..half {
            let e = i * half + j;
            let (left, right) = (i * grid + j, i * grid + grid - 1 - j);
            for c in 0..d {
                let (even, odd) = if c < h {
                    (p.pp.data()[e * h + c], p.pm.data()[e * h + c])
                } else {
                    (p.mp.data()[e * h + c - h], p.mm.data()[e * h + c - h])
                };
                out[left * d + c] = (even + odd) * s;
                out[right * d + c] = (even - odd) * s;
            }
        }
    }
    Tensor::new([rows * 2, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_enumeration() {
        // 2×2 grid, d = 2: tokens (0,0) (0,1) (1,0) (1,1).
        let x = Tensor::<f64>::from_f64([4, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let p = patch_parity_forward(&x, &ParityLayout::new(1, 1), 2).unwrap();
        let r = FRAC_1_SQRT_2;
        let close = |t: &Tensor<f64>, v: [f64; 2]| {
            assert!((t.data()[0] - v[0]).abs() < 1e-12 && (t.data()[1] - v[1]).abs() < 1e-12);
        };
        close(&p.pp, [(1. + 3.) * r, (5. + 7.) * r]);
        close(&p.pm, [(1. - 3.) * r, (5. - 7.) * r]);
        close(&p.mp, [(2. + 4.) * r, (6. + 8.) * r]);
        close(&p.mm, [(2. - 4.) * r, (6. - 8.) * r]);
        assert!(patch_parity_inverse(&p).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn symmetric_map_has_no_odd_part() {
        let x = Tensor::<f64>::from_f64([4, 2], &[1., 2., 1., 2., 3., 4., 3., 4.]).unwrap();
        let p = patch_parity_forward(&x, &ParityLayout::new(1, 1), 2).unwrap();
        assert_eq!(p.pm.max_abs(), 0.0);
        assert_eq!(p.mm.max_abs(), 0.0);
    }

    #[test]
    fn odd_grid_rejected() {
        let x = Tensor::<f64>::zeros([9, 2]).unwrap();
        assert!(matches!(
            patch_parity_forward(&x, &ParityLayout::new(1, 1), 3),
            Err(Error::Unsupported(_))
        ));
    }
}
