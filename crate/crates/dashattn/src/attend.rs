//! Stage 2: attention kernels and the full routed pipeline.
//!
//! `dense_attention` is the exact two-pass causal softmax reference.
//! `sparse_attention` walks a bit-packed active-chunk mask in ascending
//! order with a streaming softmax (running max, normalizer, accumulator):
//! routed chunks contribute scaled dot-product logits plus their routing
//! bias, the diagonal branch contributes unbiased logits with in-chunk
//! causal masking, and cleared blocks are never read, so their keys and
//! values may hold arbitrary garbage.
//!
//! `pipeline_forward` chains summarization, routing, and sparse attention,
//! returning a trace with everything the backward pass needs. With every
//! visible chunk routed and the bias forced to zero the pipeline collapses
//! to dense causal attention; with no full chunks before the diagonal
//! branch it is dense causal attention over the local window.

use crate::numkit::DenseMatrix;
use crate::route::{diagonal_branch, route_query, route_topk, BlockMask, RouteResult};
use crate::summarize::{summarize_all, AttnConfig, ChunkSummaries};
use crate::{Error, Result};

/// Streaming softmax state over one output vector: running max `m`,
/// normalizer `ell`, and the value accumulator. Blocks may be absorbed in
/// any order; the result is invariant to the order up to roundoff.
#[derive(Debug, Clone)]
pub struct OnlineAccumulator {
    m: f64,
    ell: f64,
    acc: Vec<f64>,
}

impl OnlineAccumulator {
    pub fn new(d: usize) -> Self {
        Self { m: f64::NEG_INFINITY, ell: 0.0, acc: vec![0.0; d] }
    }

    /// Absorbs one block of logits and their value rows (`rows[t]` has the
    /// accumulator's dimension).
    pub fn absorb(&mut self, logits: &[f64], rows: &[&[f64]]) {
        debug_assert_eq!(logits.len(), rows.len());
        let block_max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if block_max > self.m {
            let corr = if self.m == f64::NEG_INFINITY { 0.0 } else { (self.m - block_max).exp() };
            self.ell *= corr;
            for a in self.acc.iter_mut() {
                *a *= corr;
            }
            self.m = block_max;
        }
        for (&s, row) in logits.iter().zip(rows) {
            let e = (s - self.m).exp();
            self.ell += e;
            for (a, &v) in self.acc.iter_mut().zip(*row) {
                *a += e * v;
            }
        }
    }

    /// Normalizes into the output vector. Absorbing nothing is degenerate.
    pub fn finish(mut self) -> Result<Vec<f64>> {
        if self.ell == 0.0 {
            return Err(Error::Domain("online softmax over an empty set".into()));
        }
        for a in self.acc.iter_mut() {
            *a /= self.ell;
        }
        Ok(self.acc)
    }
}

/// Exact causal (or full) softmax attention in f64: per query row and head,
/// materialize logits over the visible prefix, softmax in two passes, mix
/// values. Query head `h` reads kv-head `h / (h_q / h_kv)`.
pub fn dense_attention(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    cfg: &AttnConfig,
    causal: bool,
) -> Result<DenseMatrix> {
    cfg.validate()?;
    cfg.check_qkv(q, k, v)?;
    let (n, d_h, h_q) = (cfg.n, cfg.d_h, cfg.h_q);
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut out = DenseMatrix::zeros(n, h_q * d_h);
    crate::parallel::try_map_rows_mut(out.data_mut(), h_q * d_h, |i, out_row| {
        let limit = if causal { i + 1 } else { n };
        let qr = q.row(i);
        for h in 0..h_q {
            let r = cfg.kv_head_of(h);
            let qh = cfg.q_head(qr, h);
            let mut logits = Vec::with_capacity(limit);
            for j in 0..limit {
                let kj = cfg.kv_head(k.row(j), r);
                logits.push(qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale);
            }
            let p = crate::numkit::softmax_vec(&logits)?;
            let o = &mut out_row[h * d_h..(h + 1) * d_h];
            for j in 0..limit {
                let vj = cfg.kv_head(v.row(j), r);
                for (acc, &val) in o.iter_mut().zip(vj) {
                    *acc += p[j] * val;
                }
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// Indices of the `k` largest entries, ascending; ties break toward the
/// lower index. Returns all indices when `k >= len`.
pub fn topk_route(scores: &[f64], k: usize) -> Vec<usize> {
    if k >= scores.len() {
        return (0..scores.len()).collect();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort by descending score keeps lower indices ahead on ties.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut picked: Vec<usize> = order[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// Sparse execution plan: the routed-chunk mask, a dense per-chunk bias
/// table, and the diagonal window start per (query, kv-head) row. Rows are
/// query-major, kv-head-minor.
#[derive(Debug, Clone)]
pub struct SparsePlan {
    pub t_c: usize,
    pub mask: BlockMask,
    /// Bias per (row, chunk), `rows * t_c`; only entries under set mask
    /// bits are ever read.
    pub bias: Vec<f64>,
    /// First diagonal token per row; the diagonal branch always covers
    /// `diag_start[row] ..= i`.
    pub diag_start: Vec<usize>,
}

impl SparsePlan {
    /// Plan equivalent to dense causal attention: every visible routed
    /// chunk active, zero bias, diagonal branch per config.
    pub fn dense_reduction(cfg: &AttnConfig) -> Result<Self> {
        cfg.validate()?;
        let t_c = cfg.chunk_count();
        let rows = cfg.n * cfg.h_kv;
        let mut mask = BlockMask::new(cfg.n, cfg.h_kv, t_c);
        let mut diag_start = vec![0; rows];
        for i in 0..cfg.n {
            let diag = diagonal_branch(i, cfg);
            let visible = crate::route::visible_chunks(i, cfg);
            for r in 0..cfg.h_kv {
                let row = mask.row_index(i, r);
                for c in 0..visible {
                    mask.set(row, c);
                }
                diag_start[row] = diag.first_token;
            }
        }
        Ok(Self { t_c, mask, bias: vec![0.0; rows * t_c], diag_start })
    }

    /// Plan carrying an externally built mask (e.g. a random benchmark
    /// mask), zero bias, diagonal branch per config.
    pub fn from_mask(mask: BlockMask, cfg: &AttnConfig) -> Result<Self> {
        let t_c = cfg.chunk_count();
        if mask.rows() != cfg.n * cfg.h_kv || mask.chunk_count() != t_c {
            return Err(Error::Shape(format!(
                "mask {}x{} vs config {}x{}",
                mask.rows(),
                mask.chunk_count(),
                cfg.n * cfg.h_kv,
                t_c
            )));
        }
        let rows = cfg.n * cfg.h_kv;
        let mut diag_start = vec![0; rows];
        for i in 0..cfg.n {
            let diag = diagonal_branch(i, cfg);
            for r in 0..cfg.h_kv {
                diag_start[i * cfg.h_kv + r] = diag.first_token;
            }
        }
        Ok(Self { t_c, mask, bias: vec![0.0; rows * t_c], diag_start })
    }

    /// Plan realized from per-row routing decisions.
    pub fn from_routes(routes: &[RouteResult], cfg: &AttnConfig) -> Result<Self> {
        let rows = cfg.n * cfg.h_kv;
        if routes.len() != rows {
            return Err(Error::Trace(format!(
                "{} route rows for a {}-row config",
                routes.len(),
                rows
            )));
        }
        let t_c = cfg.chunk_count();
        let mut plan = Self {
            t_c,
            mask: BlockMask::new(cfg.n, cfg.h_kv, t_c),
            bias: vec![0.0; rows * t_c],
            diag_start: vec![0; rows],
        };
        for route in routes {
            let row = route.query * cfg.h_kv + route.kv_head;
            plan.diag_start[row] = route.diag.first_token;
            for (s, &c) in route.support.iter().enumerate() {
                plan.mask.set(row, c);
                plan.bias[row * t_c + c] = route.bias[s];
            }
        }
        Ok(plan)
    }

    /// Zeroes the bias table, keeping mask and diagonal geometry.
    pub fn without_bias(mut self) -> Self {
        self.bias.iter_mut().for_each(|b| *b = 0.0);
        self
    }
}

/// Work counters for one sparse pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct AttendStats {
    /// Routed key-blocks read (mask popcount), summed over rows and heads.
    pub routed_blocks: u64,
    /// Diagonal-branch chunks read, summed over rows and heads.
    pub diag_blocks: u64,
}

impl AttendStats {
    /// Total key-blocks visited.
    pub fn blocks_visited(&self) -> u64 {
        self.routed_blocks + self.diag_blocks
    }
}

/// Block-sparse attention over a plan. Logits of routed chunk `c` carry
/// the plan's bias for that (row, chunk); the diagonal window is unbiased
/// and causally truncated at the query. Cleared blocks are never read.
pub fn sparse_attention(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    plan: &SparsePlan,
    cfg: &AttnConfig,
) -> Result<(DenseMatrix, AttendStats)> {
    cfg.validate()?;
    cfg.check_qkv(q, k, v)?;
    if plan.mask.rows() != cfg.n * cfg.h_kv
        || plan.bias.len() != cfg.n * cfg.h_kv * plan.t_c
        || plan.diag_start.len() != cfg.n * cfg.h_kv
    {
        return Err(Error::Shape("plan does not match config".into()));
    }
    let (n, d_h, h_q, b) = (cfg.n, cfg.d_h, cfg.h_q, cfg.chunk);
    let g_q = cfg.group_size();
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut out = DenseMatrix::zeros(n, h_q * d_h);
    let stats = crate::parallel::try_map_rows_mut(out.data_mut(), h_q * d_h, |i, out_row| {
        let mut row_stats = AttendStats::default();
        let qr = q.row(i);
        for r in 0..cfg.h_kv {
            let row = i * cfg.h_kv + r;
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
                let qh = cfg.q_head(qr, h);
                let mut acc = OnlineAccumulator::new(d_h);
                let mut logits = Vec::with_capacity(b);
                let mut rows: Vec<&[f64]> = Vec::with_capacity(b);
                for &c in &active {
                    let bias = plan.bias[row * plan.t_c + c];
                    logits.clear();
                    rows.clear();
                    for j in c * b..(c + 1) * b {
                        let kj = cfg.kv_head(k.row(j), r);
                        let z = qh.iter().zip(kj).map(|(a, v)| a * v).sum::<f64>() * scale;
                        logits.push(z + bias);
                        rows.push(cfg.kv_head(v.row(j), r));
                    }
                    acc.absorb(&logits, &rows);
                }
                logits.clear();
                rows.clear();
                for j in diag_start..=i {
                    let kj = cfg.kv_head(k.row(j), r);
                    let z = qh.iter().zip(kj).map(|(a, v)| a * v).sum::<f64>() * scale;
                    logits.push(z);
                    rows.push(cfg.kv_head(v.row(j), r));
                }
                acc.absorb(&logits, &rows);
                let o = acc.finish()?;
                out_row[h * d_h..(h + 1) * d_h].copy_from_slice(&o);
            }
        }
        Ok(row_stats)
    })?;
    let mut total = AttendStats::default();
    for s in stats {
        total.routed_blocks += s.routed_blocks;
        // Counting is per (query, kv-head) walk; query heads in a group
        // share the walk, so no further scaling here.
        total.diag_blocks += s.diag_blocks;
    }
    Ok((out, total))
}

/// Direct mixture-prior attention over one query row: `p_j` proportional
/// to `g_j * exp(z_j)` over the tokens with positive prior mass, mixing
/// the corresponding value rows. Non-streaming reference form.
pub fn prior_attention_reference(
    z: &[f64],
    g: &[f64],
    value_rows: &[&[f64]],
) -> Result<Vec<f64>> {
    if z.len() != g.len() || z.len() != value_rows.len() {
        return Err(Error::Shape(format!(
            "prior reference: z {}, g {}, values {}",
            z.len(),
            g.len(),
            value_rows.len()
        )));
    }
    if g.iter().any(|&v| v < 0.0) {
        return Err(Error::Domain("prior mass must be nonnegative".into()));
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = z.iter().zip(g).map(|(&zi, &gi)| gi * (zi - m).exp()).collect();
    let denom: f64 = weights.iter().sum();
    if denom == 0.0 {
        return Err(Error::DegenerateRow { row: 0 });
    }
    let d = value_rows.first().map_or(0, |r| r.len());
    let mut out = vec![0.0; d];
    for (wj, row) in weights.iter().zip(value_rows) {
        for (acc, &v) in out.iter_mut().zip(*row) {
            *acc += wj / denom * v;
        }
    }
    Ok(out)
}

/// Everything the backward pass needs to replay a forward run.
#[derive(Debug, Clone)]
pub struct PipelineTrace {
    pub cfg: AttnConfig,
    pub q: DenseMatrix,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
    pub q_bar: DenseMatrix,
    pub summaries: ChunkSummaries,
    /// One entry per (query, kv-head) row, query-major.
    pub routes: Vec<RouteResult>,
}

impl PipelineTrace {
    /// Smallest boundary gap across every routed entmax solve; gradient
    /// checks skip traces inside the non-differentiable band.
    pub fn min_boundary_gap(&self) -> f64 {
        let mut gap = f64::INFINITY;
        for route in &self.routes {
            for (e, z) in route.head_entmax.iter().zip(&route.head_logits) {
                gap = gap.min(e.boundary_gap(z));
            }
        }
        gap
    }
}

/// Full routed forward pass: summaries, per-row routing, block-sparse
/// biased attention. Returns the output and the trace.
pub fn pipeline_forward(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    q_bar: &DenseMatrix,
    cfg: &AttnConfig,
) -> Result<(DenseMatrix, PipelineTrace)> {
    cfg.validate()?;
    cfg.check_qkv(q, k, v)?;
    let summaries = summarize_all(k, q_bar, cfg)?;
    let routes_nested: Vec<Vec<RouteResult>> =
        crate::parallel::try_map_indexed(cfg.n, |i| {
            (0..cfg.h_kv)
                .map(|r| route_query(i, r, q, &summaries, cfg))
                .collect::<Result<Vec<_>>>()
        })?;
    let routes: Vec<RouteResult> = routes_nested.into_iter().flatten().collect();
    let plan = SparsePlan::from_routes(&routes, cfg)?;
    let (out, _) = sparse_attention(q, k, v, &plan, cfg)?;
    let trace = PipelineTrace {
        cfg: *cfg,
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        q_bar: q_bar.clone(),
        summaries,
        routes,
    };
    Ok((out, trace))
}

/// Top-k baseline forward: same summaries and logits, discrete top-k
/// selection, unbiased softmax over selected plus diagonal tokens. The
/// output depends on the summary query only through the selection.
pub fn pipeline_forward_topk(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    q_bar: &DenseMatrix,
    cfg: &AttnConfig,
    budget: usize,
) -> Result<(DenseMatrix, Vec<RouteResult>)> {
    cfg.validate()?;
    cfg.check_qkv(q, k, v)?;
    let summaries = summarize_all(k, q_bar, cfg)?;
    let routes_nested: Vec<Vec<RouteResult>> =
        crate::parallel::try_map_indexed(cfg.n, |i| {
            (0..cfg.h_kv)
                .map(|r| route_topk(i, r, q, &summaries, cfg, budget))
                .collect::<Result<Vec<_>>>()
        })?;
    let routes: Vec<RouteResult> = routes_nested.into_iter().flatten().collect();
    let plan = SparsePlan::from_routes(&routes, cfg)?;
    let (out, _) = sparse_attention(q, k, v, &plan, cfg)?;
    Ok((out, routes))
}
