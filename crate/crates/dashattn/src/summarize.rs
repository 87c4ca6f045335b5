//! Stage 0: per-chunk key summaries.
//!
//! The key sequence is cut into consecutive chunks of `chunk` tokens; the
//! trailing `n mod chunk` positions form a residual that is never
//! summarized and is always served by the diagonal branch downstream. Each
//! full chunk `c` and kv-head `r` is compressed to
//!
//! ```text
//! kbar[c, r] = sum_t softmax_t(<qbar[r], k[t, r]> / sqrt(d_h)) * k[t, r]
//! ```
//!
//! over the chunk's own tokens only, so a summary never changes when later
//! tokens arrive: the cache is append-only, and a freshly initialized
//! `qbar = 0` makes every summary the exact mean of its chunk's keys.

use crate::numkit::DenseMatrix;
use crate::{Error, Result};
use std::ops::Range;

/// Shape and routing knobs shared by the whole pipeline.
///
/// `Q` is `n x (h_q * d_h)`, `K`/`V` are `n x (h_kv * d_h)`, each row laid
/// out head-major. Query head `h` reads kv-head `h / (h_q / h_kv)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttnConfig {
    /// Sequence length.
    pub n: usize,
    /// Per-head feature dimension.
    pub d_h: usize,
    /// Query head count.
    pub h_q: usize,
    /// Key/value head count; must divide `h_q`.
    pub h_kv: usize,
    /// Chunk (block) size in tokens.
    pub chunk: usize,
    /// Entmax exponent for routing; must exceed 1.
    pub alpha: f64,
    /// Routing logit scale applied before entmax.
    pub gamma: f64,
    /// Prior temperature; large values flatten the routing prior.
    pub sigma: f64,
    /// Whether the chunk immediately before the query's own chunk joins the
    /// diagonal branch (and is excluded from routing).
    pub include_prev_chunk: bool,
}

impl AttnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        if self.d_h == 0 {
            return Err(Error::Config("d_h must be positive".into()));
        }
        if self.chunk == 0 {
            return Err(Error::Config("chunk must be positive".into()));
        }
        if self.h_q == 0 || self.h_kv == 0 || self.h_q % self.h_kv != 0 {
            return Err(Error::Config(format!(
                "head counts must be positive with h_kv | h_q, got h_q={} h_kv={}",
                self.h_q, self.h_kv
            )));
        }
        if !(self.alpha > 1.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be > 1, got {}", self.alpha)));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Query heads per kv-head.
    pub fn group_size(&self) -> usize {
        self.h_q / self.h_kv
    }

    /// Number of full chunks; the residual tail has no summary.
    pub fn chunk_count(&self) -> usize {
        self.n / self.chunk
    }

    /// kv-head serving query head `h`.
    pub fn kv_head_of(&self, h: usize) -> usize {
        h / self.group_size()
    }

    /// Head-`h` slice of a `(h_q * d_h)`-wide row.
    pub fn q_head<'a>(&self, row: &'a [f64], h: usize) -> &'a [f64] {
        &row[h * self.d_h..(h + 1) * self.d_h]
    }

    /// Head-`r` slice of a `(h_kv * d_h)`-wide row.
    pub fn kv_head<'a>(&self, row: &'a [f64], r: usize) -> &'a [f64] {
        &row[r * self.d_h..(r + 1) * self.d_h]
    }

    pub(crate) fn check_qkv(
        &self,
        q: &DenseMatrix,
        k: &DenseMatrix,
        v: &DenseMatrix,
    ) -> Result<()> {
        let qc = self.h_q * self.d_h;
        let kc = self.h_kv * self.d_h;
        if q.rows() != self.n || q.cols() != qc {
            return Err(Error::Shape(format!(
                "Q is {}x{}, config wants {}x{}",
                q.rows(),
                q.cols(),
                self.n,
                qc
            )));
        }
        for (name, m) in [("K", k), ("V", v)] {
            if m.rows() != self.n || m.cols() != kc {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, config wants {}x{}",
                    m.rows(),
                    m.cols(),
                    self.n,
                    kc
                )));
            }
        }
        Ok(())
    }
}

/// Token ranges of the full chunks plus the residual tail (possibly empty).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPartition {
    pub full: Vec<Range<usize>>,
    pub residual: Range<usize>,
}

/// Splits `0..n` into `n / chunk` full chunks and the residual tail.
pub fn chunk_partition(n: usize, chunk: usize) -> Result<ChunkPartition> {
    if chunk == 0 {
        return Err(Error::Config("chunk must be positive".into()));
    }
    let t_c = n / chunk;
    let full = (0..t_c).map(|c| c * chunk..(c + 1) * chunk).collect();
    Ok(ChunkPartition { full, residual: t_c * chunk..n })
}

/// Summary cache: one d_h-vector per (chunk, kv-head), stored chunk-major so
/// appending a chunk extends the buffer without moving existing entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkSummaries {
    t_c: usize,
    h_kv: usize,
    d_h: usize,
    data: Vec<f64>,
    /// The summary query the cache was built with, `h_kv x d_h`.
    pub q_bar: DenseMatrix,
}

impl ChunkSummaries {
    pub fn chunk_count(&self) -> usize {
        self.t_c
    }

    pub fn kv_heads(&self) -> usize {
        self.h_kv
    }

    pub fn dim(&self) -> usize {
        self.d_h
    }

    /// Summary vector for chunk `c`, kv-head `r`.
    pub fn summary(&self, c: usize, r: usize) -> &[f64] {
        let base = (c * self.h_kv + r) * self.d_h;
        &self.data[base..base + self.d_h]
    }

    /// Flat `(t_c, h_kv, d_h)` row-major view.
    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Softmax-pooled summary of one chunk for one kv-head. `keys` holds the
/// chunk's key rows back to back, `chunk_len x d_h`.
pub fn summarize_chunk(keys: &[f64], d_h: usize, q_bar_r: &[f64]) -> Result<Vec<f64>> {
    if d_h == 0 || keys.is_empty() || keys.len() % d_h != 0 {
        return Err(Error::Shape(format!(
            "chunk keys length {} not a positive multiple of d_h {}",
            keys.len(),
            d_h
        )));
    }
    if q_bar_r.len() != d_h {
        return Err(Error::Shape(format!(
            "summary query length {} vs d_h {}",
            q_bar_r.len(),
            d_h
        )));
    }
    let len = keys.len() / d_h;
    let scale = 1.0 / (d_h as f64).sqrt();
    // Single streaming pass: running max `m`, normalizer `ell`, accumulator.
    let mut m = f64::NEG_INFINITY;
    let mut ell = 0.0;
    let mut acc = vec![0.0; d_h];
    for t in 0..len {
        let kt = &keys[t * d_h..(t + 1) * d_h];
        let s: f64 = q_bar_r.iter().zip(kt).map(|(a, b)| a * b).sum::<f64>() * scale;
        if s > m {
            let corr = if m == f64::NEG_INFINITY { 0.0 } else { (m - s).exp() };
            ell *= corr;
            for a in acc.iter_mut() {
                *a *= corr;
            }
            m = s;
        }
        let e = (s - m).exp();
        ell += e;
        for (a, &kv) in acc.iter_mut().zip(kt) {
            *a += e * kv;
        }
    }
    for a in acc.iter_mut() {
        *a /= ell;
    }
    Ok(acc)
}

/// Builds the full summary cache for every full chunk and kv-head.
/// `k` is `n x (h_kv * d_h)`, `q_bar` is `h_kv x d_h`.
pub fn summarize_all(
    k: &DenseMatrix,
    q_bar: &DenseMatrix,
    cfg: &AttnConfig,
) -> Result<ChunkSummaries> {
    cfg.validate()?;
    if k.rows() != cfg.n || k.cols() != cfg.h_kv * cfg.d_h {
        return Err(Error::Shape(format!(
            "K is {}x{}, config wants {}x{}",
            k.rows(),
            k.cols(),
            cfg.n,
            cfg.h_kv * cfg.d_h
        )));
    }
    if q_bar.rows() != cfg.h_kv || q_bar.cols() != cfg.d_h {
        return Err(Error::Shape(format!(
            "q_bar is {}x{}, config wants {}x{}",
            q_bar.rows(),
            q_bar.cols(),
            cfg.h_kv,
            cfg.d_h
        )));
    }
    let t_c = cfg.chunk_count();
    let (h_kv, d_h, b) = (cfg.h_kv, cfg.d_h, cfg.chunk);
    let cells = crate::parallel::try_map_indexed(t_c * h_kv, |idx| {
        let (c, r) = (idx / h_kv, idx % h_kv);
        let mut keys = Vec::with_capacity(b * d_h);
        for t in c * b..(c + 1) * b {
            keys.extend_from_slice(cfg.kv_head(k.row(t), r));
        }
        summarize_chunk(&keys, d_h, q_bar.row(r))
    })?;
    let mut data = Vec::with_capacity(t_c * h_kv * d_h);
    for cell in cells {
        data.extend_from_slice(&cell);
    }
    Ok(ChunkSummaries { t_c, h_kv, d_h, data, q_bar: q_bar.clone() })
}
