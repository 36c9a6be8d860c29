use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

fn dims2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    t.expect_rank(2, what)?;
    Ok((t.shape()[0], t.shape()[1]))
}

/// `a · b` for `a: m×k`, `b: k×n`.
///
/// Row-major i-p-j loop order; every output element accumulates its `k`
/// products in increasing `p`, so results are deterministic.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(shape_err!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![T::zero(); m * n];
    for (i, row) in out.chunks_mut(n).enumerate() {
        matmul_row(&a.data()[i * k..(i + 1) * k], b.data(), n, row);
    }
    Tensor::new([m, n], out)
}

/// [`matmul`] with output rows distributed over the rayon pool. Each row is
/// computed exactly as in the serial kernel, so results are bit-identical.
pub fn matmul_par<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(shape_err!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![T::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        matmul_row(&a.data()[i * k..(i + 1) * k], b.data(), n, row);
    });
    Tensor::new([m, n], out)
}

#[inline]
fn matmul_row<T: Scalar>(a_row: &[T], b: &[T], n: usize, out: &mut [T]) {
    for (p, &av) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

/// `a · bᵀ` for `a: m×k`, `b: n×k` (the layout of a linear layer's weight).
pub fn matmul_t<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul_t")?;
    let (n, k2) = dims2(b, "matmul_t")?;
    if k != k2 {
        return Err(shape_err!(
            "matmul_t inner extents differ: {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &bd[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in ar.iter().zip(br) {
                acc += x * y;
            }
            out.push(acc);
        }
    }
    Tensor::new([m, n], out)
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = dims2(a, "matmul_tn")?;
    let (k2, n) = dims2(b, "matmul_tn")?;
    if k != k2 {
        return Err(shape_err!(
            "matmul_tn inner extents differ: {:?}ᵀ x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let b_row = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            let o = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in o.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor::new([m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = dims2(a, "transpose")?;
    let d = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new([n, m], out)
}

/// Geometry of a 2D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    /// One filter per input channel (`filters: C×1×kh×kw`).
    pub depthwise: bool,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, depthwise: bool) -> Self {
        Self {
            stride: (stride, stride),
            padding: (padding, padding),
            depthwise,
        }
    }
}

/// `(n + 2·pad − k) / stride + 1`, rejecting non-integral extents.
pub fn conv_output_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(shape_err!("convolution stride must be positive"));
    }
    let span = n + 2 * pad;
    if span < k {
        return Err(shape_err!("kernel {k} larger than padded input {span}"));
    }
    if (span - k) % stride != 0 {
        return Err(shape_err!(
            "non-integral output extent: ({n} + 2·{pad} − {k}) / {stride}"
        ));
    }
    Ok((span - k) / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    cg: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl ConvGeom {
    fn new(in_shape: &[usize], f_shape: &[usize], spec: Conv2dSpec) -> Result<Self> {
        if in_shape.len() != 3 || f_shape.len() != 4 {
            return Err(shape_err!(
                "conv2d expects input C×H×W and filters F×C×kh×kw, got {in_shape:?} and {f_shape:?}"
            ));
        }
        let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        let (f, cg, kh, kw) = (f_shape[0], f_shape[1], f_shape[2], f_shape[3]);
        if spec.depthwise {
            if f != c || cg != 1 {
                return Err(shape_err!("depthwise conv needs filters {c}×1×kh×kw, got {f_shape:?}"));
            }
        } else if cg != c {
            return Err(shape_err!("filters see {cg} channels but input has {c}"));
        }
        let oh = conv_output_extent(h, kh, spec.stride.0, spec.padding.0)?;
        let ow = conv_output_extent(w, kw, spec.stride.1, spec.padding.1)?;
        Ok(Self {
            c,
            h,
            w,
            f,
            cg,
            kh,
            kw,
            oh,
            ow,
            spec,
        })
    }

    /// Input channel read by filter `f` at its channel slot `cf`.
    #[inline]
    fn in_channel(&self, f: usize, cf: usize) -> usize {
        if self.spec.depthwise {
            f
        } else {
            cf
        }
    }

    /// Input coordinate for output `o` and kernel tap `k`, or `None` in padding.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < n).then_some(pos as usize)
    }

    /// Multiply-accumulates performed by the forward pass.
    fn macs(&self) -> u64 {
        (self.f * self.oh * self.ow * self.cg * self.kh * self.kw) as u64
    }
}

/// Cross-correlation (no kernel flip) with zero padding.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, filters: &Tensor<T>, spec: Conv2dSpec) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), filters.shape(), spec)?;
    let (x, wt) = (input.data(), filters.data());
    let mut out = vec![T::zero(); g.f * g.oh * g.ow];
    for f in 0..g.f {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = T::zero();
                for cf in 0..g.cg {
                    let c = g.in_channel(f, cf);
                    for ky in 0..g.kh {
                        let Some(iy) = ConvGeom::src(oy, ky, spec.stride.0, spec.padding.0, g.h) else {
                            continue;
                        };
                        let in_row = (c * g.h + iy) * g.w;
                        let w_row = ((f * g.cg + cf) * g.kh + ky) * g.kw;
                        for kx in 0..g.kw {
                            if let Some(ix) = ConvGeom::src(ox, kx, spec.stride.1, spec.padding.1, g.w) {
                                acc += x[in_row + ix] * wt[w_row + kx];
                            }
                        }
                    }
                }
                out[(f * g.oh + oy) * g.ow + ox] = acc;
            }
        }
    }
    Tensor::new([g.f, g.oh, g.ow], out)
}

pub(crate) fn conv2d_macs(in_shape: &[usize], f_shape: &[usize], spec: Conv2dSpec) -> Result<u64> {
    Ok(ConvGeom::new(in_shape, f_shape, spec)?.macs())
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    filters: &Tensor<T>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input_shape, filters.shape(), spec)?;
    if grad_out.shape() != [g.f, g.oh, g.ow] {
        return Err(shape_err!("conv2d output gradient has shape {:?}", grad_out.shape()));
    }
    let (go, wt) = (grad_out.data(), filters.data());
    let mut gi = vec![T::zero(); g.c * g.h * g.w];
    for f in 0..g.f {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let gv = go[(f * g.oh + oy) * g.ow + ox];
                for cf in 0..g.cg {
                    let c = g.in_channel(f, cf);
                    for ky in 0..g.kh {
                        let Some(iy) = ConvGeom::src(oy, ky, spec.stride.0, spec.padding.0, g.h) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            if let Some(ix) = ConvGeom::src(ox, kx, spec.stride.1, spec.padding.1, g.w) {
                                gi[(c * g.h + iy) * g.w + ix] += gv * wt[((f * g.cg + cf) * g.kh + ky) * g.kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gi)
}

/// Gradient of [`conv2d`] with respect to its filters.
pub fn conv2d_grad_filters<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    filter_shape: &[usize],
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), filter_shape, spec)?;
    if grad_out.shape() != [g.f, g.oh, g.ow] {
        return Err(shape_err!("conv2d output gradient has shape {:?}", grad_out.shape()));
    }
    let (go, x) = (grad_out.data(), input.data());
    let mut gw = vec![T::zero(); g.f * g.cg * g.kh * g.kw];
    for f in 0..g.f {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let gv = go[(f * g.oh + oy) * g.ow + ox];
                for cf in 0..g.cg {
                    let c = g.in_channel(f, cf);
                    for ky in 0..g.kh {
                        let Some(iy) = ConvGeom::src(oy, ky, spec.stride.0, spec.padding.0, g.h) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            if let Some(ix) = ConvGeom::src(ox, kx, spec.stride.1, spec.padding.1, g.w) {
                                gw[((f * g.cg + cf) * g.kh + ky) * g.kw + kx] += gv * x[(c * g.h + iy) * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(filter_shape.to_vec(), gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros([m, n]).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                out.set(&[i, j], s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&a, &Tensor::eye(2).unwrap()).unwrap(), a);
        let r = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = t(&[2, 3], &[0.; 6]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn matmul_variants_agree_with_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::randn([7, 5], &mut rng).unwrap();
        let b = Tensor::<f64>::randn([5, 3], &mut rng).unwrap();
        let oracle = naive_matmul(&a, &b);
        let scale = oracle.max_abs().max(1.0);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&oracle).unwrap() <= 1e-6 * scale);
        assert_eq!(matmul_par(&a, &b).unwrap(), matmul(&a, &b).unwrap());
        let bt = transpose(&b).unwrap();
        assert!(matmul_t(&a, &bt).unwrap().max_abs_diff(&oracle).unwrap() <= 1e-12);
        let at = transpose(&a).unwrap();
        assert!(matmul_tn(&at, &b).unwrap().max_abs_diff(&oracle).unwrap() <= 1e-12);
    }

    #[test]
    fn conv_symmetric_pair_filter() {
        // [a, a] over [x, y, z]
        let (a, x, y, z) = (0.5, 1.0, -2.0, 3.0);
        let input = t(&[1, 1, 3], &[x, y, z]);
        let filt = t(&[1, 1, 1, 2], &[a, a]);
        let out = conv2d(&input, &filt, Conv2dSpec::new(1, 0, false)).unwrap();
        assert_eq!(out.data(), &[a * x + a * y, a * y + a * z]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = Tensor::<f64>::randn([1, 4, 5], &mut rng).unwrap();
        let filt = t(&[1, 1, 1, 1], &[1.0]);
        assert_eq!(conv2d(&input, &filt, Conv2dSpec::new(1, 0, false)).unwrap(), input);
    }

    #[test]
    fn conv_rejects_non_integral_extent() {
        let input = Tensor::<f64>::zeros([1, 5, 5]).unwrap();
        let filt = Tensor::<f64>::zeros([1, 1, 2, 2]).unwrap();
        assert!(conv2d(&input, &filt, Conv2dSpec::new(2, 0, false)).is_err());
    }
}
