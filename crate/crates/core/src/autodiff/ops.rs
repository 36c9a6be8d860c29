use serde::{Deserialize, Serialize};

use super::{Tape, Var};
use crate::counter;
use crate::error::{shape_err, Error, Result};
use crate::symmetry::FilterParity;
use crate::tensor::{self, Conv2dSpec, Scalar, Tensor};

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    /// tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let half = T::from_f64(0.5);
                let u = T::from_f64(GELU_C) * (x + T::from_f64(GELU_A) * x * x * x);
                half * x * (T::one() + u.tanh())
            }
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let half = T::from_f64(0.5);
                let c = T::from_f64(GELU_C);
                let a = T::from_f64(GELU_A);
                let th = (c * (x + a * x * x * x)).tanh();
                let du = c * (T::one() + T::from_f64(3.0) * a * x * x);
                half * (T::one() + th) + half * x * (T::one() - th * th) * du
            }
        }
    }
}

fn rank2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(shape_err!("{what} expects a rank-2 tensor, got {shape:?}"));
    }
    Ok((shape[0], shape[1]))
}

impl<T: Scalar> Tape<T> {
    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, backward: super::BackwardFn<T>) -> Result<Var> {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            va.zip_map(&vb, f)?
        };
        Ok(self.push(value, &[a, b], backward))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| x + y,
            Box::new(|g, _, _| Ok(vec![Some(g.clone()), Some(g.clone())])),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| x - y,
            Box::new(|g, _, _| Ok(vec![Some(g.clone()), Some(g.map(|v| -v))])),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| x * y,
            Box::new(|g, inp, _| {
                Ok(vec![
                    Some(g.zip_map(inp[1], |g, y| g * y)?),
                    Some(g.zip_map(inp[0], |g, x| g * x)?),
                ])
            }),
        )
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let value = self.value(a).scale(s);
        self.push(value, &[a], Box::new(move |g, _, _| Ok(vec![Some(g.scale(s))])))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&self, x: Var, b: Var) -> Result<Var> {
        let value = {
            let (vx, vb) = (self.value(x), self.value(b));
            let (m, n) = rank2(vx.shape(), "add_row")?;
            if vb.len() != n {
                return Err(shape_err!("row vector of {} for {m}×{n}", vb.len()));
            }
            let mut out = vx.clone();
            for row in out.data_mut().chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(vb.data()) {
                    *o += bv;
                }
            }
            out
        };
        Ok(self.push(
            value,
            &[x, b],
            Box::new(|g, inp, _| {
                let n = g.shape()[1];
                let mut gb = vec![T::zero(); n];
                for row in g.data().chunks(n) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Ok(vec![Some(g.clone()), Some(Tensor::new(inp[1].shape().to_vec(), gb)?)])
            }),
        ))
    }

    /// Multiplies every row of an `m×n` matrix by a length-`n` vector.
    pub fn mul_row(&self, x: Var, s: Var) -> Result<Var> {
        let value = {
            let (vx, vs) = (self.value(x), self.value(s));
            let (m, n) = rank2(vx.shape(), "mul_row")?;
            if vs.len() != n {
                return Err(shape_err!("row vector of {} for {m}×{n}", vs.len()));
            }
            let mut out = vx.clone();
            for row in out.data_mut().chunks_mut(n) {
                for (o, &sv) in row.iter_mut().zip(vs.data()) {
                    *o *= sv;
                }
            }
            out
        };
        Ok(self.push(
            value,
            &[x, s],
            Box::new(|g, inp, _| {
                let n = g.shape()[1];
                let (x, s) = (inp[0], inp[1]);
                let mut gx = g.clone();
                let mut gs = vec![T::zero(); n];
                for (grow, xrow) in gx.data_mut().chunks_mut(n).zip(x.data().chunks(n)) {
                    for j in 0..n {
                        gs[j] += grow[j] * xrow[j];
                        grow[j] *= s.data()[j];
                    }
                }
                Ok(vec![Some(gx), Some(Tensor::new(s.shape().to_vec(), gs)?)])
            }),
        ))
    }

    /// Adds a length-`m` vector down the columns of an `m×n` matrix.
    pub fn add_col(&self, x: Var, b: Var) -> Result<Var> {
        let value = {
            let (vx, vb) = (self.value(x), self.value(b));
            let (m, n) = rank2(vx.shape(), "add_col")?;
            if vb.len() != m {
                return Err(shape_err!("column vector of {} for {m}×{n}", vb.len()));
            }
            let mut out = vx.clone();
            for (row, &bv) in out.data_mut().chunks_mut(n).zip(vb.data()) {
                for o in row {
                    *o += bv;
                }
            }
            out
        };
        Ok(self.push(
            value,
            &[x, b],
            Box::new(|g, inp, _| {
                let n = g.shape()[1];
                let gb: Vec<T> = g.data().chunks(n).map(|r| r.iter().copied().sum()).collect();
                Ok(vec![Some(g.clone()), Some(Tensor::new(inp[1].shape().to_vec(), gb)?)])
            }),
        ))
    }

    /// `a · b`; counted as `m·k·n` MACs.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(&self.value(a), &self.value(b))?;
        let sa = self.shape(a);
        counter::record_matmul((sa[0] * sa[1] * value.shape()[1]) as u64);
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|g, inp, _| {
                Ok(vec![
                    Some(tensor::matmul_t(g, inp[1])?),
                    Some(tensor::matmul_tn(inp[0], g)?),
                ])
            }),
        ))
    }

    /// `a · bᵀ`; counted as `m·k·n` MACs.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul_t(&self.value(a), &self.value(b))?;
        let sa = self.shape(a);
        counter::record_matmul((sa[0] * sa[1] * value.shape()[1]) as u64);
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|g, inp, _| {
                Ok(vec![
                    Some(tensor::matmul(g, inp[1])?),
                    Some(tensor::matmul_tn(g, inp[0])?),
                ])
            }),
        ))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = tensor::transpose(&self.value(a))?;
        Ok(self.push(value, &[a], Box::new(|g, _, _| Ok(vec![Some(tensor::transpose(g)?)]))))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push(
            value,
            &[a],
            Box::new(|g, inp, _| Ok(vec![Some(g.reshape(inp[0].shape().to_vec())?)])),
        ))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).cols(start, end)?;
        Ok(self.push(
            value,
            &[a],
            Box::new(move |g, inp, _| {
                let (m, n) = (inp[0].shape()[0], inp[0].shape()[1]);
                let w = end - start;
                let mut ga = vec![T::zero(); m * n];
                for r in 0..m {
                    ga[r * n + start..r * n + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                Ok(vec![Some(Tensor::new([m, n], ga)?)])
            }),
        ))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let refs: Vec<&Tensor<T>> = vals.iter().map(|r| &**r).collect();
            Tensor::concat_cols(&refs)?
        };
        Ok(self.push(
            value,
            parts,
            Box::new(|g, inp, _| {
                let mut start = 0;
                let mut out = Vec::with_capacity(inp.len());
                for t in inp {
                    let w = t.shape()[1];
                    out.push(Some(g.cols(start, start + w)?));
                    start += w;
                }
                Ok(out)
            }),
        ))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let n = rank2(
                vals.first().ok_or_else(|| shape_err!("concat of nothing"))?.shape(),
                "concat_rows",
            )?
            .1;
            let mut data = Vec::new();
            let mut m = 0;
            for v in &vals {
                let (r, c) = rank2(v.shape(), "concat_rows")?;
                if c != n {
                    return Err(shape_err!("concat_rows column mismatch {c} vs {n}"));
                }
                m += r;
                data.extend_from_slice(v.data());
            }
            Tensor::new([m, n], data)?
        };
        Ok(self.push(
            value,
            parts,
            Box::new(|g, inp, _| {
                let mut start = 0;
                let mut out = Vec::with_capacity(inp.len());
                for t in inp {
                    let r = t.shape()[0];
                    out.push(Some(g.rows(start, start + r)?));
                    start += r;
                }
                Ok(out)
            }),
        ))
    }

    /// Row `i` of the output is row `index[i]` of `a`.
    pub fn gather_rows(&self, a: Var, index: &[usize]) -> Result<Var> {
        let value = {
            let va = self.value(a);
            let (m, n) = rank2(va.shape(), "gather_rows")?;
            let mut data = Vec::with_capacity(index.len() * n);
            for &r in index {
                if r >= m {
                    return Err(shape_err!("row {r} out of range for {m} rows"));
                }
                data.extend_from_slice(&va.data()[r * n..(r + 1) * n]);
            }
            Tensor::new([index.len(), n], data)?
        };
        let index = index.to_vec();
        Ok(self.push(
            value,
            &[a],
            Box::new(move |g, inp, _| {
                let (m, n) = (inp[0].shape()[0], inp[0].shape()[1]);
                let mut ga = vec![T::zero(); m * n];
                for (i, &r) in index.iter().enumerate() {
                    for j in 0..n {
                        ga[r * n + j] += g.data()[i * n + j];
                    }
                }
                Ok(vec![Some(Tensor::new([m, n], ga)?)])
            }),
        ))
    }

    /// Column `j` of the output is column `index[j]` of `a`.
    pub fn gather_cols(&self, a: Var, index: &[usize]) -> Result<Var> {
        let value = {
            let va = self.value(a);
            let (m, n) = rank2(va.shape(), "gather_cols")?;
            if let Some(&bad) = index.iter().find(|&&c| c >= n) {
                return Err(shape_err!("column {bad} out of range for {n} columns"));
            }
            let mut data = Vec::with_capacity(m * index.len());
            for r in 0..m {
                data.extend(index.iter().map(|&c| va.data()[r * n + c]));
            }
            Tensor::new([m, index.len()], data)?
        };
        let index = index.to_vec();
        Ok(self.push(
            value,
            &[a],
            Box::new(move |g, inp, _| {
                let (m, n) = (inp[0].shape()[0], inp[0].shape()[1]);
                let k = index.len();
                let mut ga = vec![T::zero(); m * n];
                for r in 0..m {
                    for (j, &c) in index.iter().enumerate() {
                        ga[r * n + c] += g.data()[r * k + j];
                    }
                }
                Ok(vec![Some(Tensor::new([m, n], ga)?)])
            }),
        ))
    }

    pub fn activation(&self, a: Var, act: Activation) -> Var {
        let value = self.value(a).map(|v| act.apply(v));
        self.push(
            value,
            &[a],
            Box::new(move |g, inp, _| Ok(vec![Some(g.zip_map(inp[0], |g, x| g * act.derivative(x))?)])),
        )
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.activation(a, Activation::Gelu)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let value = {
            let va = self.value(a);
            let (_, n) = rank2(va.shape(), "softmax_rows")?;
            let mut out = va.clone();
            for row in out.data_mut().chunks_mut(n) {
                let max = row.iter().copied().fold(row[0], T::max);
                let mut z = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v = *v / z;
                }
            }
            out
        };
        Ok(self.push(
            value,
            &[a],
            Box::new(|g, _, y| {
                let n = y.shape()[1];
                let mut ga = g.clone();
                for (grow, yrow) in ga.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                Ok(vec![Some(ga)])
            }),
        ))
    }

    /// Normalises every row to zero mean and unit (biased) variance.
    pub fn normalize_rows(&self, a: Var, eps: f64) -> Result<Var> {
        let n = rank2(&self.shape(a), "normalize_rows")?.1;
        self.normalize_rows_centered(a, n, eps)
    }

    /// Subtracts from the leading `centered` columns of every row their own
    /// mean, leaves the rest as they are, then divides the row by its root
    /// mean square.
    pub fn normalize_rows_centered(&self, a: Var, centered: usize, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Usage(format!("layer-norm epsilon must be positive, got {eps}")));
        }
        let n = rank2(&self.shape(a), "normalize_rows")?.1;
        if centered > n {
            return Err(shape_err!("cannot centre {centered} of {n} columns"));
        }
        let eps_t = T::from_f64(eps);
        let nt = T::from_f64(n as f64);
        let mt = T::from_f64(centered.max(1) as f64);
        // Centred row and its inverse root mean square.
        let centre = move |row: &mut [T]| -> T {
            let mean = row[..centered].iter().copied().sum::<T>() / mt;
            row[..centered].iter_mut().for_each(|v| *v -= mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / nt;
            T::one() / (var + eps_t).sqrt()
        };
        let value = {
            let mut out = self.value(a).clone();
            for row in out.data_mut().chunks_mut(n) {
                let inv = centre(row);
                row.iter_mut().for_each(|v| *v *= inv);
            }
            out
        };
        Ok(self.push(
            value,
            &[a],
            Box::new(move |g, inp, y| {
                let mut ga = g.clone();
                let mut scratch = vec![T::zero(); n];
                let rows = ga
                    .data_mut()
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(inp[0].data().chunks(n));
                for ((grow, yrow), xrow) in rows {
                    scratch.copy_from_slice(xrow);
                    let inv = centre(&mut scratch);
                    let gymean = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum::<T>() / nt;
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = inv * (*gv - yv * gymean);
                    }
                    let gmean = grow[..centered].iter().copied().sum::<T>() / mt;
                    grow[..centered].iter_mut().for_each(|v| *v -= gmean);
                }
                Ok(vec![Some(ga)])
            }),
        ))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(
            value,
            &[a],
            Box::new(|g, inp, _| {
                let gv = g.data()[0];
                Ok(vec![Some(inp[0].map(|_| gv))])
            }),
        )
    }

    /// `Σ a ⊙ weights` for a constant weight tensor.
    pub fn weighted_sum(&self, a: Var, weights: &Tensor<T>) -> Result<Var> {
        let w = self.constant(weights.clone());
        let prod = self.mul(a, w)?;
        Ok(self.sum(prod))
    }

    /// Column means of an `m×n` matrix, as a length-`n` vector.
    pub fn mean_rows(&self, a: Var) -> Result<Var> {
        let value = {
            let va = self.value(a);
            let (m, n) = rank2(va.shape(), "mean_rows")?;
            let inv = T::one() / T::from_f64(m as f64);
            let mut out = vec![T::zero(); n];
            for row in va.data().chunks(n) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            Tensor::new([n], out.into_iter().map(|v| v * inv).collect())?
        };
        Ok(self.push(
            value,
            &[a],
            Box::new(|g, inp, _| {
                let (m, n) = (inp[0].shape()[0], inp[0].shape()[1]);
                let inv = T::one() / T::from_f64(m as f64);
                let mut ga = Vec::with_capacity(m * n);
                for _ in 0..m {
                    ga.extend(g.data().iter().map(|&v| v * inv));
                }
                Ok(vec![Some(Tensor::new([m, n], ga)?)])
            }),
        ))
    }

    /// Cross-correlation; counted as `F·H'·W'·C_f·kh·kw` MACs.
    pub fn conv2d(&self, input: Var, filters: Var, spec: Conv2dSpec) -> Result<Var> {
        let value = {
            let (vi, vf) = (self.value(input), self.value(filters));
            let out = tensor::conv2d(&vi, &vf, spec)?;
            counter::record_conv(tensor::conv2d_macs(vi.shape(), vf.shape(), spec)?);
            out
        };
        Ok(self.push(
            value,
            &[input, filters],
            Box::new(move |g, inp, _| {
                Ok(vec![
                    Some(tensor::conv2d_grad_input(g, inp[0].shape(), inp[1], spec)?),
                    Some(tensor::conv2d_grad_filters(g, inp[0], inp[1].shape(), spec)?),
                ])
            }),
        ))
    }

    /// Folds each width-`period` block of a `C×H×W` map onto its left half:
    /// `out[c, i, q·p/2 + j] = x[c, i, q·p + j] + sign·x[c, i, q·p + p − 1 − j]`.
    pub fn mirror_fold(&self, x: Var, period: usize, sign: f64) -> Result<Var> {
        let s = T::from_f64(sign);
        let (c, h, w) = {
            let sh = self.shape(x);
            if sh.len() != 3 {
                return Err(shape_err!("mirror_fold expects C×H×W, got {sh:?}"));
            }
            (sh[0], sh[1], sh[2])
        };
        if period == 0 || period % 2 != 0 || w % period != 0 {
            return Err(Error::Unsupported(format!(
                "mirror_fold needs an even period dividing the width, got period {period} for width {w}"
            )));
        }
        let half = period / 2;
        let ow = w / 2;
        let value = {
            let vx = self.value(x);
            let d = vx.data();
            let mut out = Vec::with_capacity(c * h * ow);
            for row in d.chunks(w) {
                for q in 0..w / period {
                    for j in 0..half {
                        out.push(row[q * period + j] + s * row[q * period + period - 1 - j]);
                    }
                }
            }
            Tensor::new([c, h, ow], out)?
        };
        Ok(self.push(
            value,
            &[x],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); c * h * w];
                for (grow, orow) in gx.chunks_mut(w).zip(g.data().chunks(ow)) {
                    for q in 0..w / period {
                        for j in 0..half {
                            let gv = orow[q * half + j];
                            grow[q * period + j] += gv;
                            grow[q * period + period - 1 - j] += s * gv;
                        }
                    }
                }
                Ok(vec![Some(Tensor::new([c, h, w], gx)?)])
            }),
        ))
    }

    /// Materialises mirror-constrained filters of width `k` from their free
    /// halves. `sym` holds `⌈k/2⌉` columns per filter, `anti` holds `⌊k/2⌋`
    /// (an antisymmetric filter of odd width has a zero middle column).
    /// Output filter `i` is built from `order[i]`.
    pub fn mirror_assemble(
        &self,
        sym: Option<Var>,
        anti: Option<Var>,
        order: &[(FilterParity, usize)],
        k: usize,
    ) -> Result<Var> {
        let sym_w = k.div_ceil(2);
        let anti_w = k / 2;
        let check = |v: Option<Var>, width: usize, what: &str| -> Result<Option<[usize; 3]>> {
            v.map(|v| {
                let s = self.shape(v);
                if s.len() != 4 || s[3] != width {
                    return Err(shape_err!("{what} halves must be N×C×kh×{width}, got {s:?}"));
                }
                Ok([s[0], s[1], s[2]])
            })
            .transpose()
        };
        let sym_dims = check(sym, sym_w, "symmetric")?;
        let anti_dims = check(anti, anti_w, "antisymmetric")?;
        let (c, kh) = match (sym_dims, anti_dims) {
            (Some(a), Some(b)) if a[1..] != b[1..] => {
                return Err(shape_err!("symmetric/antisymmetric halves disagree: {a:?} vs {b:?}"))
            }
            (Some(a), _) | (None, Some(a)) => (a[1], a[2]),
            (None, None) => return Err(shape_err!("mirror_assemble without filters")),
        };
        for &(parity, idx) in order {
            let n = match parity {
                FilterParity::Symmetric => sym_dims.map(|d| d[0]),
                FilterParity::Antisymmetric => anti_dims.map(|d| d[0]),
            };
            if n.is_none_or(|n| idx >= n) {
                return Err(shape_err!("filter {parity:?}#{idx} does not exist"));
            }
        }
        let plane = c * kh;
        let value = {
            let sv = sym.map(|v| self.value(v));
            let av = anti.map(|v| self.value(v));
            let mut out = vec![T::zero(); order.len() * plane * k];
            for (f, &(parity, idx)) in order.iter().enumerate() {
                for r in 0..plane {
                    let dst = &mut out[(f * plane + r) * k..(f * plane + r + 1) * k];
                    match parity {
                        FilterParity::Symmetric => {
                            let src = &sv.as_ref().expect("checked").data()
                                [(idx * plane + r) * sym_w..(idx * plane + r + 1) * sym_w];
                            for (j, &v) in src.iter().enumerate() {
                                dst[j] = v;
                                dst[k - 1 - j] = v;
                            }
                        }
                        FilterParity::Antisymmetric => {
                            let src = &av.as_ref().expect("checked").data()
                                [(idx * plane + r) * anti_w..(idx * plane + r + 1) * anti_w];
                            for (j, &v) in src.iter().enumerate() {
                                dst[j] = v;
                                dst[k - 1 - j] = -v;
                            }
                        }
                    }
                }
            }
            Tensor::new([order.len(), c, kh, k], out)?
        };
        let order = order.to_vec();
        let parents: Vec<Var> = sym.into_iter().chain(anti).collect();
        let has_sym = sym.is_some();
        Ok(self.push(
            value,
            &parents,
            Box::new(move |g, inp, _| {
                let mut gs = has_sym.then(|| inp[0].map(|_| T::zero()));
                let mut ga = (inp.len() > usize::from(has_sym)).then(|| inp[usize::from(has_sym)].map(|_| T::zero()));
                for (f, &(parity, idx)) in order.iter().enumerate() {
                    for r in 0..plane {
                        let src = &g.data()[(f * plane + r) * k..(f * plane + r + 1) * k];
                        match parity {
                            FilterParity::Symmetric => {
                                let dst = gs.as_mut().expect("parent present").data_mut();
                                for j in 0..sym_w {
                                    let mirrored = k - 1 - j;
                                    let v = if mirrored == j { src[j] } else { src[j] + src[mirrored] };
                                    dst[(idx * plane + r) * sym_w + j] += v;
                                }
                            }
                            FilterParity::Antisymmetric => {
                                let dst = ga.as_mut().expect("parent present").data_mut();
                                for j in 0..anti_w {
                                    dst[(idx * plane + r) * anti_w + j] += src[j] - src[k - 1 - j];
                                }
                            }
                        }
                    }
                }
                Ok(gs.into_iter().chain(ga).map(Some).collect())
            }),
        ))
    }

    /// `logsumexp(logits) − logits[label]` for a logit vector.
    pub fn cross_entropy(&self, logits: Var, label: usize) -> Result<Var> {
        let (value, n) = {
            let v = self.value(logits);
            let n = v.len();
            if label >= n {
                return Err(Error::Usage(format!("label {label} out of range for {n} classes")));
            }
            let max = v.data().iter().copied().fold(v.data()[0], T::max);
            let lse = v.data().iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            (Tensor::scalar(lse - v.data()[label]), n)
        };
        Ok(self.push(
            value,
            &[logits],
            Box::new(move |g, inp, _| {
                let z = inp[0];
                let max = z.data().iter().copied().fold(z.data()[0], T::max);
                let e: Vec<T> = z.data().iter().map(|&v| (v - max).exp()).collect();
                let sum: T = e.iter().copied().sum();
                let gv = g.data()[0];
                let mut out: Vec<T> = e.iter().map(|&v| gv * v / sum).collect();
                out[label] -= gv;
                debug_assert_eq!(out.len(), n);
                Ok(vec![Some(Tensor::new(z.shape().to_vec(), out)?)])
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Checks d/dx of `Σ w ⊙ op(x)` against central differences.
    fn fd_check(shape: &[usize], op: impl Fn(&Tape<f64>, Var) -> Result<Var>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(shape, &mut rng).unwrap();
        let out_shape = {
            let t = Tape::no_grad();
            let v = t.constant(x.clone());
            let y = op(&t, v).unwrap();
            t.shape(y)
        };
        let w = Tensor::<f64>::randn(out_shape, &mut rng).unwrap();
        let loss = |x: &Tensor<f64>| -> (f64, Option<Tensor<f64>>) {
            let t = Tape::new();
            let v = t.variable(x.clone());
            let y = op(&t, v).unwrap();
            let l = t.weighted_sum(y, &w).unwrap();
            let val = t.value(l).item().unwrap();
            let g = t.backward(l).unwrap().wrt(v).cloned();
            (val, g)
        };
        let (_, g) = loss(&x);
        let g = g.expect("input reached");
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (loss(&xp).0 - loss(&xm).0) / (2.0 * h);
            let err = (num - g.data()[i]).abs() / g.data()[i].abs().max(1.0);
            assert!(err < 1e-6, "coordinate {i}: analytic {} numeric {num}", g.data()[i]);
        }
    }

    fn consts(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn elementwise_and_row_ops() {
        let c = consts(&[3, 4], 1);
        let r = consts(&[4], 2);
        let col = consts(&[3], 3);
        fd_check(&[3, 4], |t, x| t.add(x, t.constant(c.clone())));
        fd_check(&[3, 4], |t, x| t.sub(t.constant(c.clone()), x));
        fd_check(&[3, 4], |t, x| t.mul(x, x));
        fd_check(&[3, 4], |t, x| Ok(t.scale(x, -1.7)));
        fd_check(&[3, 4], |t, x| t.add_row(x, t.constant(r.clone())));
        fd_check(&[4], |t, v| t.add_row(t.constant(c.clone()), v));
        fd_check(&[3, 4], |t, x| t.mul_row(x, t.constant(r.clone())));
        fd_check(&[4], |t, v| t.mul_row(t.constant(c.clone()), v));
        fd_check(&[3, 4], |t, x| t.add_col(x, t.constant(col.clone())));
        fd_check(&[3], |t, v| t.add_col(t.constant(c.clone()), v));
    }

    #[test]
    fn products_and_layout_ops() {
        let b = consts(&[4, 5], 4);
        let bt = consts(&[5, 4], 5);
        fd_check(&[3, 4], |t, x| t.matmul(x, t.constant(b.clone())));
        fd_check(&[4, 5], |t, w| t.matmul(t.constant(bt.clone()), w));
        fd_check(&[3, 4], |t, x| t.matmul_t(x, t.constant(bt.clone())));
        fd_check(&[5, 4], |t, w| {
            t.matmul_t(t.constant(tensor::transpose(&b).unwrap()), w)
        });
        fd_check(&[3, 4], |t, x| t.transpose(x));
        fd_check(&[3, 4], |t, x| t.reshape(x, &[2, 6]));
        fd_check(&[3, 4], |t, x| t.cols(x, 1, 3));
        fd_check(&[3, 4], |t, x| {
            let a = t.cols(x, 0, 1)?;
            t.concat_cols(&[x, a])
        });
        fd_check(&[3, 4], |t, x| t.concat_rows(&[x, x]));
        fd_check(&[3, 4], |t, x| t.gather_rows(x, &[2, 0, 2, 1]));
        fd_check(&[3, 4], |t, x| t.gather_cols(x, &[3, 3, 0]));
        fd_check(&[3, 4], |t, x| t.mean_rows(x));
        fd_check(&[3, 4], |t, x| Ok(t.sum(x)));
    }

    #[test]
    fn nonlinear_ops() {
        fd_check(&[3, 4], |t, x| Ok(t.gelu(x)));
        fd_check(&[3, 4], |t, x| t.softmax_rows(x));
        fd_check(&[3, 4], |t, x| t.normalize_rows(x, 1e-6));
        fd_check(&[3, 6], |t, x| t.normalize_rows_centered(x, 3, 1e-6));
        fd_check(&[2, 4], |t, x| t.normalize_rows_centered(x, 0, 1e-6));
        fd_check(&[5], |t, x| t.cross_entropy(x, 2));
    }

    #[test]
    fn convolution_and_mirror_ops() {
        let f = consts(&[2, 3, 3, 2], 6);
        let img = consts(&[3, 5, 4], 7);
        let spec = Conv2dSpec {
            stride: (2, 1),
            padding: (1, 0),
            depthwise: false,
        };
        fd_check(&[3, 5, 4], |t, x| t.conv2d(x, t.constant(f.clone()), spec));
        fd_check(&[2, 3, 3, 2], |t, w| t.conv2d(t.constant(img.clone()), w, spec));
        let dw = consts(&[3, 1, 3, 3], 8);
        fd_check(&[3, 5, 4], |t, x| {
            t.conv2d(x, t.constant(dw.clone()), Conv2dSpec::new(1, 1, true))
        });
        fd_check(&[2, 3, 4], |t, x| t.mirror_fold(x, 4, 1.0));
        fd_check(&[2, 3, 4], |t, x| t.mirror_fold(x, 2, -1.0));
        let anti = consts(&[2, 1, 2, 2], 9);
        let order = [
            (FilterParity::Symmetric, 1),
            (FilterParity::Antisymmetric, 0),
            (FilterParity::Symmetric, 0),
            (FilterParity::Antisymmetric, 1),
        ];
        fd_check(&[2, 1, 2, 3], |t, s| {
            t.mirror_assemble(Some(s), Some(t.constant(anti.clone())), &order, 5)
        });
        let sym = consts(&[2, 1, 2, 3], 10);
        fd_check(&[2, 1, 2, 2], |t, a| {
            t.mirror_assemble(Some(t.constant(sym.clone())), Some(a), &order, 5)
        });
    }

    #[test]
    fn gelu_matches_tanh_formula_and_is_close_to_erf() {
        let x = 0.7f64;
        let expected = 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh());
        assert_eq!(Activation::Gelu.apply(x), expected);
        // Φ(0.7) = 0.758036
        assert!((Activation::Gelu.apply(x) - x * 0.758_036).abs() < 1e-3);
    }

    #[test]
    fn mirror_assemble_builds_constrained_filters() {
        let tape = Tape::<f64>::no_grad();
        let s = tape.constant(Tensor::from_f64([1, 1, 1, 2], &[1.0, 2.0]).unwrap());
        let a = tape.constant(Tensor::from_f64([1, 1, 1, 1], &[5.0]).unwrap());
        let f = tape
            .mirror_assemble(
                Some(s),
                Some(a),
                &[(FilterParity::Symmetric, 0), (FilterParity::Antisymmetric, 0)],
                3,
            )
            .unwrap();
        assert_eq!(tape.value(f).to_f64_vec(), vec![1.0, 2.0, 1.0, 5.0, 0.0, -5.0]);
        assert!(tape
            .mirror_assemble(Some(s), None, &[(FilterParity::Antisymmetric, 0)], 3)
            .is_err());
    }

    #[test]
    fn scalar_loss_required_and_unused_params_zero() {
        use crate::autodiff::{Param, ParamKind};
        let tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::zeros([2]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
        let unused = Param::new("u", ParamKind::Bias, Tensor::<f64>::full([3], 2.0).unwrap());
        let w = Param::new(
            "w",
            ParamKind::Weight { fan_in: 2 },
            Tensor::<f64>::from_f64([2, 1], &[1.0, 2.0]).unwrap(),
        );
        let tape = Tape::<f64>::new();
        let _ = tape.param(&unused);
        let xs = tape.constant(Tensor::from_f64([1, 2], &[3.0, 4.0]).unwrap());
        let y = tape.matmul(xs, tape.param(&w)).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(&w).to_f64_vec(), vec![3.0, 4.0]);
        assert_eq!(g.get(&unused).to_f64_vec(), vec![0.0; 3]);
        let c = tape.constant(Tensor::scalar(1.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.get(&w).to_f64_vec(), vec![0.0; 2]);
    }
}
