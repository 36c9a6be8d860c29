use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_par, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub d: usize,
    pub batch: usize,
    pub iters: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Use the rayon-parallel matmul instead of a single thread.
    pub parallel: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            d: 2048,
            batch: 256,
            iters: 10,
            warmup: 10,
            seed: 0,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub options: BenchOptions,
    pub threads: usize,
    pub dense_median_s: f64,
    pub blockdiag_median_s: f64,
    pub time_ratio: f64,
    pub dense_macs: u64,
    pub blockdiag_macs: u64,
    pub flop_ratio: f64,
    /// Largest difference between the two paths on matched weights.
    pub max_abs_diff: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_runs(
    iters: usize,
    warmup: usize,
    mut f: impl FnMut() -> Result<Tensor<f32>>,
) -> Result<(Vec<f64>, Tensor<f32>)> {
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(iters);
    let mut last = None;
    for _ in 0..iters {
        let t = Instant::now();
        let y = f()?;
        times.push(t.elapsed().as_secs_f64());
        last = Some(y);
    }
    Ok((times, last.expect("at least one iteration")))
}

/// Times `x·W` for a dense `d×d` matrix whose off-diagonal blocks are zero
/// against the two `d/2×d/2` diagonal-block products on the same weights.
pub fn bench_blockdiag(opts: BenchOptions) -> Result<BenchReport> {
    let BenchOptions {
        d,
        batch,
        iters,
        warmup,
        seed,
        parallel,
    } = opts;
    if d == 0 || d % 2 != 0 || batch == 0 || iters == 0 {
        return Err(Error::Usage(format!(
            "bench needs an even positive dim, positive batch and iters ≥ 1 (dim {d}, batch {batch}, iters {iters})"
        )));
    }
    let h = d / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f32>::randn([batch, d], &mut rng)?;
    let w_inv = Tensor::<f32>::randn([h, h], &mut rng)?;
    let w_equi = Tensor::<f32>::randn([h, h], &mut rng)?;
    let mut dense = Tensor::<f32>::zeros([d, d])?;
    for i in 0..h {
        for j in 0..h {
            dense.set(&[i, j], w_inv.at(&[i, j]));
            dense.set(&[h + i, h + j], w_equi.at(&[i, j]));
        }
    }
    let mm = |a: &Tensor<f32>, b: &Tensor<f32>| if parallel { matmul_par(a, b) } else { matmul(a, b) };

    let (dense_times, y_dense) = time_runs(iters, warmup, || mm(&x, &dense))?;
    let (block_times, y_block) = time_runs(iters, warmup, || {
        let y1 = mm(&x.cols(0, h)?, &w_inv)?;
        let y2 = mm(&x.cols(h, d)?, &w_equi)?;
        Tensor::concat_cols(&[&y1, &y2])
    })?;
    let dense_macs = (batch * d * d) as u64;
    let blockdiag_macs = (2 * batch * h * h) as u64;
    let (dense_median_s, blockdiag_median_s) = (median(dense_times), median(block_times));
    Ok(BenchReport {
        options: opts,
        threads: if parallel { rayon::current_num_threads() } else { 1 },
        dense_median_s,
        blockdiag_median_s,
        time_ratio: blockdiag_median_s / dense_median_s,
        dense_macs,
        blockdiag_macs,
        flop_ratio: blockdiag_macs as f64 / dense_macs as f64,
        max_abs_diff: y_dense.max_abs_diff(&y_block)?,
    })
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        format!(
            "dim {} batch {} iters {} warmup {} threads {}\n\
             dense       median {:.6} s  ({} MACs)\n\
             block-diag  median {:.6} s  ({} MACs)\n\
             time ratio {:.3}  FLOP ratio {}  max |diff| {:.3e}\n",
            self.options.d,
            self.options.batch,
            self.options.iters,
            self.options.warmup,
            self.threads,
            self.dense_median_s,
            self.dense_macs,
            self.blockdiag_median_s,
            self.blockdiag_macs,
            self.time_ratio,
            self.flop_ratio,
            self.max_abs_diff
        )
    }
}
