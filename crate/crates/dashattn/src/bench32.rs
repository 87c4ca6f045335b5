//! Single-precision kernels for wall-time comparisons.
//!
//! The f64 modules are the reference; these f32 twins exist so that dense
//! and block-sparse paths can be timed against each other with identical
//! inner loops — the only difference between them is which key blocks the
//! outer walk visits. Results stay deterministic at any thread count: one
//! task per query row, fixed block order inside it.

use crate::attend::{AttendStats, SparsePlan};
use crate::summarize::AttnConfig;
use crate::{Error, Result};
use std::time::Instant;

/// Casts a reference matrix's storage to f32, row-major.
pub fn to_f32(data: &[f64]) -> Vec<f32> {
    data.iter().map(|&x| x as f32).collect()
}

/// Largest absolute difference between two equal-length f32 buffers.
pub fn max_abs_diff_f32(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} elements", a.len(), b.len())));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
        .fold(0.0, f64::max))
}

/// Streaming softmax state in f32 (running max, normalizer, accumulator).
struct F32Acc {
    m: f32,
    ell: f32,
    acc: Vec<f32>,
}

impl F32Acc {
    fn new(d: usize) -> Self {
        Self { m: f32::NEG_INFINITY, ell: 0.0, acc: vec![0.0; d] }
    }

    /// One key block: logits and the matching value rows, where
    /// `values[t*d..(t+1)*d]` belongs to `logits[t]`.
    fn absorb(&mut self, logits: &[f32], values: &[f32], d: usize) {
        let mut block_max = f32::NEG_INFINITY;
        for &z in logits {
            block_max = block_max.max(z);
        }
        if block_max > self.m {
            let corr = if self.m == f32::NEG_INFINITY { 0.0 } else { (self.m - block_max).exp() };
            self.ell *= corr;
            for a in self.acc.iter_mut() {
                *a *= corr;
            }
            self.m = block_max;
        }
        for (t, &z) in logits.iter().enumerate() {
            let e = (z - self.m).exp();
            self.ell += e;
            let row = &values[t * d..(t + 1) * d];
            for (a, &v) in self.acc.iter_mut().zip(row) {
                *a += e * v;
            }
        }
    }

    fn finish(mut self, out: &mut [f32]) {
        for a in self.acc.iter_mut() {
            *a /= self.ell;
        }
        out.copy_from_slice(&self.acc);
    }
}

/// Fills `logits`/`values` scratch for tokens `lo..hi` of kv-head `r` and
/// absorbs the block. `bias` is added to every logit in the block.
#[allow(clippy::too_many_arguments)]
#[inline]
fn absorb_token_range(
    acc: &mut F32Acc,
    qh: &[f32],
    k: &[f32],
    v: &[f32],
    kv_cols: usize,
    r: usize,
    d_h: usize,
    scale: f32,
    bias: f32,
    lo: usize,
    hi: usize,
    logits: &mut Vec<f32>,
    values: &mut Vec<f32>,
) {
    logits.clear();
    values.clear();
    for j in lo..hi {
        let kj = &k[j * kv_cols + r * d_h..j * kv_cols + (r + 1) * d_h];
        let mut z = 0.0f32;
        for (a, b) in qh.iter().zip(kj) {
            z += a * b;
        }
        logits.push(z * scale + bias);
        values.extend_from_slice(&v[j * kv_cols + r * d_h..j * kv_cols + (r + 1) * d_h]);
    }
    acc.absorb(logits, values, d_h);
}

fn check_dims(q: &[f32], k: &[f32], v: &[f32], cfg: &AttnConfig) -> Result<()> {
    cfg.validate()?;
    if q.len() != cfg.n * cfg.h_q * cfg.d_h
        || k.len() != cfg.n * cfg.h_kv * cfg.d_h
        || v.len() != cfg.n * cfg.h_kv * cfg.d_h
    {
        return Err(Error::Shape("f32 buffers do not match the config".into()));
    }
    Ok(())
}

/// Dense causal attention in f32, walking every causal key block with the
/// same streaming inner loop as the sparse path.
pub fn dense_attention_f32(q: &[f32], k: &[f32], v: &[f32], cfg: &AttnConfig) -> Result<Vec<f32>> {
    check_dims(q, k, v, cfg)?;
    let (n, d_h, h_q, h_kv, b) = (cfg.n, cfg.d_h, cfg.h_q, cfg.h_kv, cfg.chunk);
    let g_q = cfg.group_size();
    let q_cols = h_q * d_h;
    let kv_cols = h_kv * d_h;
    let scale = 1.0 / (d_h as f32).sqrt();
    let mut out = vec![0.0f32; n * q_cols];
    crate::parallel::for_each_row_mut(&mut out, q_cols, |i, out_row| {
        let mut logits = Vec::with_capacity(b);
        let mut values = Vec::with_capacity(b * d_h);
        for r in 0..h_kv {
            for h in r * g_q..(r + 1) * g_q {
                let qh = &q[i * q_cols + h * d_h..i * q_cols + (h + 1) * d_h];
                let mut acc = F32Acc::new(d_h);
                let mut c = 0;
                while c * b <= i {
                    let lo = c * b;
                    let hi = ((c + 1) * b).min(i + 1);
                    absorb_token_range(
                        &mut acc, qh, k, v, kv_cols, r, d_h, scale, 0.0, lo, hi, &mut logits,
                        &mut values,
                    );
                    c += 1;
                }
                acc.finish(&mut out_row[h * d_h..(h + 1) * d_h]);
            }
        }
    });
    Ok(out)
}

/// Block-sparse attention in f32 over a plan: routed blocks in ascending
/// chunk order with their biases, then the causal diagonal window.
pub fn sparse_attention_f32(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    plan: &SparsePlan,
    cfg: &AttnConfig,
) -> Result<(Vec<f32>, AttendStats)> {
    check_dims(q, k, v, cfg)?;
    if plan.mask.rows() != cfg.n * cfg.h_kv || plan.diag_start.len() != cfg.n * cfg.h_kv {
        return Err(Error::Shape("plan does not match the config".into()));
    }
    let (n, d_h, h_q, h_kv, b) = (cfg.n, cfg.d_h, cfg.h_q, cfg.h_kv, cfg.chunk);
    let g_q = cfg.group_size();
    let q_cols = h_q * d_h;
    let kv_cols = h_kv * d_h;
    let scale = 1.0 / (d_h as f32).sqrt();
    let mut out = vec![0.0f32; n * q_cols];
    let stats = crate::parallel::try_map_rows_mut(&mut out, q_cols, |i, out_row| {
        let mut row_stats = AttendStats::default();
        let mut logits = Vec::with_capacity(b);
        let mut values = Vec::with_capacity(b * d_h);
        for r in 0..h_kv {
            let row = i * h_kv + r;
            let active = plan.mask.active_chunks(row);
            let diag_start = plan.diag_start[row];
            if diag_start > i {
                return Err(Error::Shape(format!(
                    "row {row}: diagonal start {diag_start} past query {i}"
                )));
            }
            row_stats.routed_blocks += active.len() as u64;
            row_stats.diag_blocks += (i / b - diag_start / b + 1) as u64;
            for h in r * g_q..(r + 1) * g_q {
                let qh = &q[i * q_cols + h * d_h..i * q_cols + (h + 1) * d_h];
                let mut acc = F32Acc::new(d_h);
                for &c in &active {
                    let bias = plan.bias[row * plan.t_c + c] as f32;
                    absorb_token_range(
                        &mut acc, qh, k, v, kv_cols, r, d_h, scale, bias, c * b, (c + 1) * b,
                        &mut logits, &mut values,
                    );
                }
                // Diagonal window chunk by chunk, mirroring the dense
                // walk's block grouping (the window start is always
                // chunk-aligned).
                let mut c = diag_start / b;
                while c * b <= i {
                    absorb_token_range(
                        &mut acc, qh, k, v, kv_cols, r, d_h, scale, 0.0, c * b,
                        ((c + 1) * b).min(i + 1), &mut logits, &mut values,
                    );
                    c += 1;
                }
                acc.finish(&mut out_row[h * d_h..(h + 1) * d_h]);
            }
        }
        Ok(row_stats)
    })?;
    let mut total = AttendStats::default();
    for s in stats {
        total.routed_blocks += s.routed_blocks;
        total.diag_blocks += s.diag_blocks;
    }
    Ok((out, total))
}

/// Median wall time of `runs` executions after `warmups` unrecorded ones,
/// in milliseconds on the monotonic clock.
pub fn median_time_ms<F>(warmups: usize, runs: usize, mut f: F) -> Result<f64>
where
    F: FnMut() -> Result<()>,
{
    if runs == 0 {
        return Err(Error::Domain("timing needs at least one run".into()));
    }
    for _ in 0..warmups {
        f()?;
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(samples[runs / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attend::dense_attention;
    use crate::numkit::{DenseMatrix, Rng};

    fn config(n: usize, chunk: usize) -> AttnConfig {
        AttnConfig {
            n,
            d_h: 8,
            h_q: 4,
            h_kv: 2,
            chunk,
            alpha: 1.5,
            gamma: 1.0,
            sigma: 2.0,
            include_prev_chunk: true,
        }
    }

    #[test]
    fn f32_dense_tracks_f64_reference() {
        let cfg = config(40, 8);
        let mut rng = Rng::new(3);
        let q = DenseMatrix::standard_normal(cfg.n, cfg.h_q * cfg.d_h, &mut rng);
        let k = DenseMatrix::standard_normal(cfg.n, cfg.h_kv * cfg.d_h, &mut rng);
        let v = DenseMatrix::standard_normal(cfg.n, cfg.h_kv * cfg.d_h, &mut rng);
        let want = dense_attention(&q, &k, &v, &cfg, true).unwrap();
        let got = dense_attention_f32(&to_f32(q.data()), &to_f32(k.data()), &to_f32(v.data()), &cfg)
            .unwrap();
        let err = got
            .iter()
            .zip(want.data())
            .map(|(&a, &b)| (f64::from(a) - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-4, "f32 drifted {err} from the f64 reference");
    }

    #[test]
    fn f32_sparse_full_plan_matches_f32_dense() {
        let cfg = config(48, 8);
        let mut rng = Rng::new(5);
        let q = to_f32(DenseMatrix::standard_normal(cfg.n, cfg.h_q * cfg.d_h, &mut rng).data());
        let k = to_f32(DenseMatrix::standard_normal(cfg.n, cfg.h_kv * cfg.d_h, &mut rng).data());
        let v = to_f32(DenseMatrix::standard_normal(cfg.n, cfg.h_kv * cfg.d_h, &mut rng).data());
        let plan = SparsePlan::dense_reduction(&cfg).unwrap();
        let (sparse, stats) = sparse_attention_f32(&q, &k, &v, &plan, &cfg).unwrap();
        let dense = dense_attention_f32(&q, &k, &v, &cfg).unwrap();
        // Same blocks, same inner loop, same visit order: identical bits.
        for (a, b) in sparse.iter().zip(&dense) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(stats.routed_blocks, plan.mask.popcount_total());
    }

    #[test]
    fn f32_sparse_respects_random_mask_and_counts() {
        let cfg = config(64, 8);
        let mut rng = Rng::new(7);
        let q = to_f32(DenseMatrix::standard_normal(cfg.n, cfg.h_q * cfg.d_h, &mut rng).data());
        let k = to_f32(DenseMatrix::standard_normal(cfg.n, cfg.h_kv * cfg.d_h, &mut rng).data());
        let v = to_f32(DenseMatrix::standard_normal(cfg.n, cfg.h_kv * cfg.d_h, &mut rng).data());
        let mask = crate::route::random_mask(&cfg, 0.75, &mut rng).unwrap();
        let pop = mask.popcount_total();
        let plan = SparsePlan::from_mask(mask, &cfg).unwrap();
        let (out, stats) = sparse_attention_f32(&q, &k, &v, &plan, &cfg).unwrap();
        assert_eq!(stats.routed_blocks, pop);
        assert!(out.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn timing_helper_returns_a_positive_median() {
        let mut counter = 0u64;
        let ms = median_time_ms(2, 9, || {
            counter += 1;
            std::hint::black_box(&counter);
            Ok(())
        })
        .unwrap();
        assert_eq!(counter, 11, "2 warmups + 9 timed runs");
        assert!(ms >= 0.0);
        assert!(median_time_ms(0, 0, || Ok(())).is_err());
    }
}
