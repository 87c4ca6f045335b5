//! Stage 1: entmax chunk routing, the mixture prior, and block masks.
//!
//! For query `i` and kv-head `r`, every full chunk strictly before the
//! diagonal branch is scored against the chunk summaries,
//!
//! ```text
//! zbar[c] = gamma * <q[i,h], kbar[c,r]> / sqrt(d_h)
//! ```
//!
//! pushed through alpha-entmax per query head, and averaged across the
//! head group, so the merged weight vector `w` is sparse with support equal
//! to the union of the head supports. The diagonal branch covers the
//! query's own (possibly partial) chunk and, by default, the chunk right
//! before it; those chunks are never routed.
//!
//! The routed weights induce a mixture prior over tokens. With the
//! strength-reduced per-token weights
//!
//! ```text
//! w'[j] = (1/B) * w[c(j)]^(1/sigma) / sum_c w[c]^(1/sigma)
//! ```
//!
//! the prior places `lambda` mass on routed tokens proportionally to `w'`
//! and spreads `1 - lambda` uniformly over the diagonal branch, where
//!
//! ```text
//! lambda = sigmoid( KL(u_R || w'_R) + log(|R| / |D|) )
//! ```
//!
//! Equivalently (and this is how the attention kernel consumes it), routed
//! tokens receive the additive logit bias
//!
//! ```text
//! d[j] = (log w[c(j)] - mu) / sigma,   mu = mean over routed tokens of log w[c(j)]
//! ```
//!
//! and diagonal tokens bias zero; softmax over biased logits reproduces the
//! prior form exactly. As sigma grows, `w'` flattens, the bias vanishes,
//! and `lambda` tends to `|R| / (|R| + |D|)`.

use crate::entmax::{entmax, EntmaxResult};
use crate::numkit::{DenseMatrix, Rng};
use crate::summarize::{AttnConfig, ChunkSummaries};
use crate::{Error, Result};
use std::ops::Range;

/// Logs are clamped at this floor so zero-adjacent routed weights cannot
/// produce infinities.
const LOG_FLOOR: f64 = 1e-300;

pub(crate) fn safe_ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Diagonal-branch geometry for query `i`: the chunk range serving the
/// local branch and the first token it covers. Tokens `first_token..=i`
/// are the diagonal set; chunks `0..chunks.start` are visible to routing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiagonalBranch {
    /// Chunk indices in the diagonal branch (own chunk, plus the previous
    /// one when configured).
    pub chunks: Range<usize>,
    /// First diagonal token; the branch always reaches the query itself.
    pub first_token: usize,
}

impl DiagonalBranch {
    /// Diagonal token count for query `i`.
    pub fn len(&self, i: usize) -> usize {
        i + 1 - self.first_token
    }
}

/// Computes the diagonal branch for query `i` under `cfg`.
pub fn diagonal_branch(i: usize, cfg: &AttnConfig) -> DiagonalBranch {
    let own = i / cfg.chunk;
    let start = if cfg.include_prev_chunk && own > 0 { own - 1 } else { own };
    DiagonalBranch { chunks: start..own + 1, first_token: start * cfg.chunk }
}

/// Number of chunks visible to routing for query `i`: full chunks strictly
/// before the diagonal branch.
pub fn visible_chunks(i: usize, cfg: &AttnConfig) -> usize {
    diagonal_branch(i, cfg).chunks.start.min(cfg.chunk_count())
}

/// Routing logits for one query head against the first `visible` chunk
/// summaries of kv-head `r`. `gamma` multiplies the scaled dot product.
pub fn chunk_logits(
    q_head: &[f64],
    summaries: &ChunkSummaries,
    r: usize,
    visible: usize,
    gamma: f64,
) -> Result<Vec<f64>> {
    if q_head.len() != summaries.dim() {
        return Err(Error::Shape(format!(
            "query head dim {} vs summary dim {}",
            q_head.len(),
            summaries.dim()
        )));
    }
    if visible > summaries.chunk_count() || r >= summaries.kv_heads() {
        return Err(Error::Shape(format!(
            "visible {} of {} chunks, kv-head {} of {}",
            visible,
            summaries.chunk_count(),
            r,
            summaries.kv_heads()
        )));
    }
    let scale = gamma / (summaries.dim() as f64).sqrt();
    Ok((0..visible)
        .map(|c| {
            let s = summaries.summary(c, r);
            q_head.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() * scale
        })
        .collect())
}

/// Outcome of routing one head: either there was nothing to route (no
/// visible chunks) or a solved entmax distribution.
#[derive(Debug, Clone)]
pub enum Routing {
    /// No chunks precede the diagonal branch; the query attends locally.
    DiagonalOnly,
    Routed(EntmaxResult),
}

/// Entmax routing over visible-chunk logits. Zero visible chunks signal the
/// diagonal-only case rather than an error.
pub fn route_entmax(logits: &[f64], alpha: f64) -> Result<Routing> {
    if logits.is_empty() {
        return Ok(Routing::DiagonalOnly);
    }
    Ok(Routing::Routed(entmax(logits, alpha)?))
}

/// Averages per-head routed distributions into the group weight vector.
/// The merged support is the union of the head supports.
pub fn gqa_merge(heads: &[&EntmaxResult]) -> Result<Vec<f64>> {
    let first = heads
        .first()
        .ok_or_else(|| Error::Shape("gqa_merge of zero heads".into()))?;
    let len = first.p.len();
    if heads.iter().any(|h| h.p.len() != len) {
        return Err(Error::Shape("gqa_merge over mismatched lengths".into()));
    }
    let inv = 1.0 / heads.len() as f64;
    let mut w = vec![0.0; len];
    for h in heads {
        for (wi, &pi) in w.iter_mut().zip(&h.p) {
            *wi += inv * pi;
        }
    }
    Ok(w)
}

/// Strength-reduced per-token prior weights for the support chunks:
/// `w'[c] = (1/B) * w[c]^(1/sigma) / sum_{c' in support} w[c']^(1/sigma)`.
/// Every token of chunk `c` carries the same value. Returned parallel to
/// `support`.
pub fn prior_weights(w: &[f64], support: &[usize], sigma: f64, b: usize) -> Result<Vec<f64>> {
    if support.iter().any(|&c| c >= w.len()) {
        return Err(Error::Shape("support index out of range".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be > 0, got {sigma}")));
    }
    if b == 0 {
        return Err(Error::Domain("chunk size must be positive".into()));
    }
    let inv_sigma = 1.0 / sigma;
    let powed: Vec<f64> = support
        .iter()
        .map(|&c| (safe_ln(w[c]) * inv_sigma).exp())
        .collect();
    let denom: f64 = powed.iter().sum();
    Ok(powed.iter().map(|&v| v / (b as f64 * denom)).collect())
}

/// Branch mixing weight `lambda = sigmoid(KL(u_R || w'_R) + log(|R|/|D|))`,
/// with the KL taken against the per-token `w'` entries as-is. `w_prime`
/// holds one value per support chunk, each covering `b` tokens; `d_size`
/// is the diagonal token count.
pub fn prior_lambda(w_prime: &[f64], b: usize, d_size: usize) -> Result<f64> {
    let r_size = b * w_prime.len();
    if r_size == 0 || d_size == 0 {
        return Err(Error::Domain(format!(
            "lambda needs nonempty branches, got |R|={r_size} |D|={d_size}"
        )));
    }
    let u = 1.0 / r_size as f64;
    // KL(u || w') = sum_{j in R} u * ln(u / w'_j), expanded chunk-wise.
    let kl: f64 = w_prime
        .iter()
        .map(|&wp| b as f64 * u * (u.ln() - safe_ln(wp)))
        .sum();
    Ok(sigmoid(kl + (r_size as f64 / d_size as f64).ln()))
}

/// Per-token prior over the routed and diagonal branches.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPrior {
    pub lambda: f64,
    /// Prior mass per token for each support chunk (parallel to the support
    /// list used to build it).
    pub routed: Vec<f64>,
    /// Prior mass per diagonal token.
    pub diag: f64,
}

/// Assembles the three-branch prior: `lambda * w'` on routed tokens,
/// `(1 - lambda)/|D|` on diagonal tokens, zero elsewhere.
pub fn prior_g(w: &[f64], support: &[usize], sigma: f64, b: usize, d_size: usize) -> Result<TokenPrior> {
    let w_prime = prior_weights(w, support, sigma, b)?;
    let lambda = prior_lambda(&w_prime, b, d_size)?;
    Ok(TokenPrior {
        lambda,
        routed: w_prime.iter().map(|&wp| lambda * wp).collect(),
        diag: (1.0 - lambda) / d_size as f64,
    })
}

/// Additive logit bias for the support chunks:
/// `d[c] = (log w[c] - mu) / sigma` with `mu` the mean of `log w[c(j)]`
/// over routed tokens. Each token of chunk `c` shares the value. Returns
/// `(mu, bias per support chunk)`.
pub fn routing_bias(w: &[f64], support: &[usize], sigma: f64) -> Result<(f64, Vec<f64>)> {
    if support.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    if support.iter().any(|&c| c >= w.len()) {
        return Err(Error::Shape("support index out of range".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be > 0, got {sigma}")));
    }
    // Chunks contribute equally many tokens, so the token mean equals the
    // chunk mean.
    let logs: Vec<f64> = support.iter().map(|&c| safe_ln(w[c])).collect();
    let mu = logs.iter().sum::<f64>() / logs.len() as f64;
    Ok((mu, logs.iter().map(|&l| (l - mu) / sigma).collect()))
}

/// Packs ascending support chunk indices into mask words: bit `c` of word
/// `c / 32`. Rejects out-of-range indices.
pub fn pack_mask(support: &[usize], t_c: usize) -> Result<Vec<u32>> {
    let words_len = t_c.div_ceil(32);
    let mut words = vec![0u32; words_len];
    for &c in support {
        if c >= t_c {
            return Err(Error::Shape(format!("chunk {c} out of range {t_c}")));
        }
        words[c / 32] |= 1 << (c % 32);
    }
    Ok(words)
}

/// Inverse of [`pack_mask`]: ascending set-bit indices below `t_c`.
pub fn unpack_mask(words: &[u32], t_c: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for (wi, &word) in words.iter().enumerate() {
        let mut bits = word;
        while bits != 0 {
            let b = bits.trailing_zeros() as usize;
            let c = wi * 32 + b;
            if c < t_c {
                out.push(c);
            }
            bits &= bits - 1;
        }
    }
    out
}

/// Bit-packed active-chunk mask for every (query, kv-head) row, stored
/// query-major, kv-head-minor. Holds routed chunks only; the diagonal
/// branch is tracked separately by the attention kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    n: usize,
    h_kv: usize,
    t_c: usize,
    words_per_row: usize,
    words: Vec<u32>,
}

impl BlockMask {
    pub fn new(n: usize, h_kv: usize, t_c: usize) -> Self {
        let words_per_row = t_c.div_ceil(32);
        Self { n, h_kv, t_c, words_per_row, words: vec![0; n * h_kv * words_per_row] }
    }

    pub fn rows(&self) -> usize {
        self.n * self.h_kv
    }

    pub fn chunk_count(&self) -> usize {
        self.t_c
    }

    pub fn row_index(&self, i: usize, r: usize) -> usize {
        i * self.h_kv + r
    }

    pub fn set(&mut self, row: usize, c: usize) {
        debug_assert!(c < self.t_c);
        self.words[row * self.words_per_row + c / 32] |= 1 << (c % 32);
    }

    pub fn get(&self, row: usize, c: usize) -> bool {
        self.words[row * self.words_per_row + c / 32] >> (c % 32) & 1 == 1
    }

    pub fn row_words(&self, row: usize) -> &[u32] {
        &self.words[row * self.words_per_row..(row + 1) * self.words_per_row]
    }

    pub fn set_row_words(&mut self, row: usize, words: &[u32]) -> Result<()> {
        if words.len() != self.words_per_row {
            return Err(Error::Shape(format!(
                "row has {} words, expected {}",
                words.len(),
                self.words_per_row
            )));
        }
        self.words[row * self.words_per_row..(row + 1) * self.words_per_row]
            .copy_from_slice(words);
        Ok(())
    }

    /// Active chunk count in a row.
    pub fn popcount_row(&self, row: usize) -> usize {
        self.row_words(row).iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Ascending active chunk indices of a row.
    pub fn active_chunks(&self, row: usize) -> Vec<usize> {
        unpack_mask(self.row_words(row), self.t_c)
    }

    /// Total active chunks across all rows.
    pub fn popcount_total(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// Serializes as a u32 tensor with dims `[n, h_kv, words_per_row]`.
    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        crate::numkit::tensor::write_u32(
            path,
            &[self.n, self.h_kv, self.words_per_row],
            &self.words,
        )
    }

    /// Reads a mask back; `t_c` is supplied by the caller (the file stores
    /// only the word count per row).
    pub fn read(path: &std::path::Path, t_c: usize) -> Result<Self> {
        let (dims, words) = crate::numkit::tensor::read_u32(path)?;
        if dims.len() != 3 {
            return Err(Error::Format(format!("mask tensor must be 3-d, got {}-d", dims.len())));
        }
        let (n, h_kv, words_per_row) = (dims[0], dims[1], dims[2]);
        if words_per_row != t_c.div_ceil(32) {
            return Err(Error::Format(format!(
                "mask has {words_per_row} words per row, t_c {t_c} wants {}",
                t_c.div_ceil(32)
            )));
        }
        Ok(Self { n, h_kv, t_c, words_per_row, words })
    }
}

/// Routing decision for one (query, kv-head) row, with per-head trace data
/// retained for the backward pass.
#[derive(Debug, Clone)]
pub struct RouteResult {
    pub query: usize,
    pub kv_head: usize,
    /// Chunks visible to routing (`0..visible` precede the diagonal branch).
    pub visible: usize,
    /// Merged routed weights over the visible chunks (zeros off support).
    pub weights: Vec<f64>,
    /// Ascending chunk indices with positive merged weight.
    pub support: Vec<usize>,
    /// Branch mixing weight; meaningless when the support is empty.
    pub lambda: f64,
    /// Mean routed log-weight backing the bias.
    pub mu: f64,
    /// Additive logit bias per support chunk (parallel to `support`).
    pub bias: Vec<f64>,
    pub diag: DiagonalBranch,
    /// Per-head routing logits over the visible chunks.
    pub head_logits: Vec<Vec<f64>>,
    /// Per-head entmax solutions.
    pub head_entmax: Vec<EntmaxResult>,
}

impl RouteResult {
    /// Routed token count `|R|`.
    pub fn routed_tokens(&self, b: usize) -> usize {
        self.support.len() * b
    }

    /// Diagonal token count `|D|`.
    pub fn diag_tokens(&self) -> usize {
        self.diag.len(self.query)
    }

    /// Packed mask row over the full chunk grid.
    pub fn mask_row(&self, t_c: usize) -> Result<Vec<u32>> {
        pack_mask(&self.support, t_c)
    }

    /// The per-token prior this routing induces.
    pub fn token_prior(&self, sigma: f64, b: usize) -> Result<TokenPrior> {
        prior_g(&self.weights, &self.support, sigma, b, self.diag_tokens())
    }
}

/// Full routing for query `i`, kv-head `r`: per-head logits and entmax,
/// the merged weights, and the prior bias.
pub fn route_query(
    i: usize,
    r: usize,
    q: &DenseMatrix,
    summaries: &ChunkSummaries,
    cfg: &AttnConfig,
) -> Result<RouteResult> {
    let diag = diagonal_branch(i, cfg);
    let visible = visible_chunks(i, cfg);
    let g_q = cfg.group_size();
    let mut head_logits = Vec::with_capacity(g_q);
    let mut head_entmax: Vec<EntmaxResult> = Vec::with_capacity(g_q);
    if visible > 0 {
        for h in r * g_q..(r + 1) * g_q {
            let logits = chunk_logits(cfg.q_head(q.row(i), h), summaries, r, visible, cfg.gamma)?;
            match route_entmax(&logits, cfg.alpha)? {
                Routing::Routed(e) => head_entmax.push(e),
                Routing::DiagonalOnly => unreachable!("visible > 0"),
            }
            head_logits.push(logits);
        }
    }
    let (weights, support, lambda, mu, bias) = if visible == 0 {
        (Vec::new(), Vec::new(), 0.0, 0.0, Vec::new())
    } else {
        let refs: Vec<&EntmaxResult> = head_entmax.iter().collect();
        let weights = gqa_merge(&refs)?;
        let support: Vec<usize> = (0..visible).filter(|&c| weights[c] > 0.0).collect();
        let w_prime = prior_weights(&weights, &support, cfg.sigma, cfg.chunk)?;
        let lambda = prior_lambda(&w_prime, cfg.chunk, diag.len(i))?;
        let (mu, bias) = routing_bias(&weights, &support, cfg.sigma)?;
        (weights, support, lambda, mu, bias)
    };
    Ok(RouteResult {
        query: i,
        kv_head: r,
        visible,
        weights,
        support,
        lambda,
        mu,
        bias,
        diag,
        head_logits,
        head_entmax,
    })
}

/// Top-k baseline routing: per-head softmax over the same chunk logits,
/// averaged across the group, keeping the `k` highest-scoring chunks (ties
/// broken toward the lower index). No prior bias is attached, so the
/// output depends on the summaries only through the discrete selection.
pub fn route_topk(
    i: usize,
    r: usize,
    q: &DenseMatrix,
    summaries: &ChunkSummaries,
    cfg: &AttnConfig,
    k: usize,
) -> Result<RouteResult> {
    if k == 0 {
        return Err(Error::Config("top-k budget must be positive".into()));
    }
    let diag = diagonal_branch(i, cfg);
    let visible = visible_chunks(i, cfg);
    let g_q = cfg.group_size();
    let mut head_logits = Vec::with_capacity(g_q);
    let mut weights = vec![0.0; visible];
    if visible > 0 {
        for h in r * g_q..(r + 1) * g_q {
            let logits = chunk_logits(cfg.q_head(q.row(i), h), summaries, r, visible, cfg.gamma)?;
            let p = crate::numkit::softmax_vec(&logits)?;
            for (wc, pc) in weights.iter_mut().zip(&p) {
                *wc += pc / g_q as f64;
            }
            head_logits.push(logits);
        }
    }
    let support = crate::attend::topk_route(&weights, k);
    Ok(RouteResult {
        query: i,
        kv_head: r,
        visible,
        weights,
        support,
        lambda: 0.0,
        mu: 0.0,
        bias: vec![0.0; k.min(visible)],
        diag,
        head_logits,
        head_entmax: Vec::new(),
    })
}

/// Builds a random mask hitting the target sparsity exactly: the visible
/// routed slots of every row form one pool, a fixed multiset with
/// `round((1 - sparsity) * pool)` ones is shuffled over it, so the total
/// active count is exact rather than sampled per block.
pub fn random_mask(cfg: &AttnConfig, sparsity: f64, rng: &mut Rng) -> Result<BlockMask> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::Domain(format!("sparsity must lie in [0,1], got {sparsity}")));
    }
    cfg.validate()?;
    let t_c = cfg.chunk_count();
    let mut slots: Vec<(usize, usize)> = Vec::new();
    for i in 0..cfg.n {
        let visible = visible_chunks(i, cfg);
        for r in 0..cfg.h_kv {
            let row = i * cfg.h_kv + r;
            for c in 0..visible {
                slots.push((row, c));
            }
        }
    }
    let active = ((1.0 - sparsity) * slots.len() as f64).round() as usize;
    rng.shuffle(&mut slots);
    let mut mask = BlockMask::new(cfg.n, cfg.h_kv, t_c);
    for &(row, c) in slots.iter().take(active) {
        mask.set(row, c);
    }
    Ok(mask)
}

/// Token-level sparsity of a mask under `cfg`: one minus the ratio of
/// attended tokens (routed chunks times chunk size, plus the diagonal
/// branch) to causally visible tokens, aggregated over every row.
pub fn mask_token_sparsity(mask: &BlockMask, cfg: &AttnConfig) -> f64 {
    let mut attended = 0u64;
    let mut visible_tokens = 0u64;
    for i in 0..cfg.n {
        let diag = diagonal_branch(i, cfg);
        for r in 0..cfg.h_kv {
            let row = mask.row_index(i, r);
            attended += (mask.popcount_row(row) * cfg.chunk + diag.len(i)) as u64;
            visible_tokens += (i + 1) as u64;
        }
    }
    1.0 - attended as f64 / visible_tokens as f64
}

/// Block-level sparsity of a mask: one minus the ratio of set bits to
/// visible routed slots.
pub fn mask_block_sparsity(mask: &BlockMask, cfg: &AttnConfig) -> f64 {
    let mut visible_slots = 0u64;
    for i in 0..cfg.n {
        visible_slots += (visible_chunks(i, cfg) * cfg.h_kv) as u64;
    }
    if visible_slots == 0 {
        return 0.0;
    }
    1.0 - mask.popcount_total() as f64 / visible_slots as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;
    use crate::summarize::summarize_all;
    use proptest::prelude::*;

    fn config(n: usize, chunk: usize) -> AttnConfig {
        AttnConfig {
            n,
            d_h: 4,
            h_q: 4,
            h_kv: 2,
            chunk,
            alpha: 1.5,
            gamma: 1.0,
            sigma: 1.0,
            include_prev_chunk: true,
        }
    }

    #[test]
    fn diagonal_branch_geometry() {
        let cfg = config(32, 4);
        // Query 0: own chunk only, no previous chunk exists.
        let d0 = diagonal_branch(0, &cfg);
        assert_eq!(d0.chunks, 0..1);
        assert_eq!(d0.first_token, 0);
        assert_eq!(d0.len(0), 1);
        // Query 9 sits in chunk 2; branch covers chunks 1..3, tokens 4..=9.
        let d9 = diagonal_branch(9, &cfg);
        assert_eq!(d9.chunks, 1..3);
        assert_eq!(d9.first_token, 4);
        assert_eq!(d9.len(9), 6);
        assert_eq!(visible_chunks(9, &cfg), 1);
        // Without the previous chunk the branch shrinks to the own chunk.
        let mut solo = cfg;
        solo.include_prev_chunk = false;
        let d9s = diagonal_branch(9, &solo);
        assert_eq!(d9s.chunks, 2..3);
        assert_eq!(visible_chunks(9, &solo), 2);
    }

    #[test]
    fn diagonal_branch_covers_residual_tail() {
        let cfg = config(10, 4);
        // Query 9 lives in the residual (chunk index 2, partial). Branch is
        // chunks 1..3, tokens 4..=9; chunk 0 is routable.
        let d = diagonal_branch(9, &cfg);
        assert_eq!(d.chunks, 1..3);
        assert_eq!(d.first_token, 4);
        assert_eq!(visible_chunks(9, &cfg), 1);
    }

    #[test]
    fn chunk_logits_zero_query_vanish_and_scale_linearly() {
        let mut rng = Rng::new(3);
        let cfg = config(16, 4);
        let k = DenseMatrix::standard_normal(16, 8, &mut rng);
        let q_bar = DenseMatrix::standard_normal(2, 4, &mut rng);
        let summaries = summarize_all(&k, &q_bar, &cfg).unwrap();
        let zeros = chunk_logits(&[0.0; 4], &summaries, 0, 3, 1.0).unwrap();
        assert!(zeros.iter().all(|&z| z == 0.0));
        let qh: Vec<f64> = (0..4).map(|_| rng.standard_normal()).collect();
        let z1 = chunk_logits(&qh, &summaries, 1, 3, 1.0).unwrap();
        let z2 = chunk_logits(&qh, &summaries, 1, 3, 2.0).unwrap();
        for (a, b) in z1.iter().zip(&z2) {
            assert!((2.0 * a - b).abs() < 1e-15, "gamma must scale logits linearly");
        }
    }

    #[test]
    fn chunk_logits_match_hand_dot_products() {
        let mut rng = Rng::new(5);
        let cfg = config(8, 4);
        let k = DenseMatrix::standard_normal(8, 8, &mut rng);
        let q_bar = DenseMatrix::standard_normal(2, 4, &mut rng);
        let summaries = summarize_all(&k, &q_bar, &cfg).unwrap();
        let qh: Vec<f64> = (0..4).map(|_| rng.standard_normal()).collect();
        let z = chunk_logits(&qh, &summaries, 0, 2, 1.7).unwrap();
        for c in 0..2 {
            let s = summaries.summary(c, 0);
            let dot: f64 = qh.iter().zip(s).map(|(a, b)| a * b).sum();
            let expect = 1.7 * dot / 2.0;
            assert!((z[c] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn route_entmax_flags_empty_visibility() {
        match route_entmax(&[], 1.5).unwrap() {
            Routing::DiagonalOnly => {}
            Routing::Routed(_) => panic!("expected the diagonal-only signal"),
        }
        match route_entmax(&[0.3, 0.1], 1.5).unwrap() {
            Routing::Routed(e) => assert!((e.p.iter().sum::<f64>() - 1.0).abs() < 1e-12),
            Routing::DiagonalOnly => panic!("nonempty logits must route"),
        }
    }

    #[test]
    fn gqa_merge_identity_and_union() {
        let a = crate::entmax::entmax(&[2.0, 0.0, -1.0], 2.0).unwrap();
        let single = gqa_merge(&[&a]).unwrap();
        assert_eq!(single, a.p);
        // Two one-hot heads on different chunks merge to a two-chunk union.
        let h1 = crate::entmax::entmax(&[5.0, 0.0, 0.0], 2.0).unwrap();
        let h2 = crate::entmax::entmax(&[0.0, 5.0, 0.0], 2.0).unwrap();
        assert_eq!(h1.support, vec![0]);
        assert_eq!(h2.support, vec![1]);
        let merged = gqa_merge(&[&h1, &h2]).unwrap();
        assert_eq!(merged, vec![0.5, 0.5, 0.0]);
        let support: Vec<usize> =
            (0..3).filter(|&c| merged[c] > 0.0).collect();
        assert_eq!(support, vec![0, 1], "support must be the union of head supports");
    }

    #[test]
    fn prior_weights_uniform_and_sigma_limit() {
        // Single support chunk: every token gets 1/B regardless of sigma.
        let wp = prior_weights(&[1.0], &[0], 1.0, 2).unwrap();
        assert_eq!(wp, vec![0.5]);
        // sigma = 1 keeps the routed weights as-is: w' = w / B.
        let wp1 = prior_weights(&[0.8, 0.2], &[0, 1], 1.0, 1).unwrap();
        assert!((wp1[0] - 0.8).abs() < 1e-15);
        assert!((wp1[1] - 0.2).abs() < 1e-15);
        // sigma -> infinity flattens to uniform over routed tokens.
        let wp_inf = prior_weights(&[0.9, 0.1], &[0, 1], 1e12, 4).unwrap();
        for &v in &wp_inf {
            assert!((v - 1.0 / 8.0).abs() < 1e-9);
        }
    }

    #[test]
    fn lambda_uniform_prior_hand_value() {
        // Uniform w' over |R| = 192 with |D| = 64: the KL term vanishes and
        // lambda = sigmoid(log 3) = 3/4.
        let w_prime = vec![1.0 / 192.0; 3];
        let l = prior_lambda(&w_prime, 64, 64).unwrap();
        assert!((l - 0.75).abs() < 1e-12);
        // Equal branch sizes with uniform prior: sigmoid(0) = 1/2.
        let l2 = prior_lambda(&[0.5], 2, 2).unwrap();
        assert!((l2 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lambda_skewed_prior_hand_value() {
        // w = [0.8, 0.2], B = 1, |D| = 2, sigma = 1: KL = ln(1.25), and the
        // size term vanishes, so lambda = 1/(1 + e^{-ln 1.25}) = 5/9.
        let w_prime = prior_weights(&[0.8, 0.2], &[0, 1], 1.0, 1).unwrap();
        let l = prior_lambda(&w_prime, 1, 2).unwrap();
        assert!((l - 5.0 / 9.0).abs() < 1e-12, "lambda {l}");
    }

    #[test]
    fn lambda_matches_geometric_mean_closed_form() {
        // lambda = 1 / (1 + |D| * eta) with eta the geometric mean of w'
        // over the routed tokens.
        let mut rng = Rng::new(11);
        for _ in 0..100 {
            let w: Vec<f64> = {
                let raw: Vec<f64> = (0..4).map(|_| rng.uniform() + 0.05).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            };
            let support = vec![0, 1, 2, 3];
            let b = 3;
            let d_size = 5;
            let wp = prior_weights(&w, &support, 2.0, b).unwrap();
            let l = prior_lambda(&wp, b, d_size).unwrap();
            let log_eta: f64 =
                wp.iter().map(|&v| b as f64 * v.ln()).sum::<f64>() / (b * wp.len()) as f64;
            let closed = 1.0 / (1.0 + d_size as f64 * log_eta.exp());
            assert!((l - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_g_symmetric_case_is_uniform() {
        // One routed chunk of two tokens against two diagonal tokens with a
        // flat prior: everything gets mass 1/4.
        let g = prior_g(&[1.0], &[0], 1.0, 2, 2).unwrap();
        assert!((g.lambda - 0.5).abs() < 1e-12);
        assert!((g.routed[0] - 0.25).abs() < 1e-12);
        assert!((g.diag - 0.25).abs() < 1e-12);
    }

    #[test]
    fn prior_g_total_mass_is_one() {
        let mut rng = Rng::new(19);
        for _ in 0..200 {
            let raw: Vec<f64> = (0..5).map(|_| rng.uniform() + 0.01).collect();
            let s: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let support = vec![0, 1, 2, 3, 4];
            let b = 2;
            let d_size = 3;
            let sigma = 0.5 + 3.0 * rng.uniform();
            let g = prior_g(&w, &support, sigma, b, d_size).unwrap();
            let total: f64 =
                g.routed.iter().map(|&v| v * b as f64).sum::<f64>() + g.diag * d_size as f64;
            assert!((total - 1.0).abs() < 1e-12, "prior mass {total}");
        }
    }

    #[test]
    fn routing_bias_hand_values() {
        // Equal weights: mu = log w and the bias vanishes.
        let (_, d) = routing_bias(&[0.5, 0.5], &[0, 1], 1.0).unwrap();
        assert!(d.iter().all(|&v| v.abs() < 1e-15));
        // w = [0.8, 0.2], sigma = 1: d = [log 2, -log 2].
        let (_, d) = routing_bias(&[0.8, 0.2], &[0, 1], 1.0).unwrap();
        assert!((d[0] - 2.0f64.ln()).abs() < 1e-12);
        assert!((d[1] + 2.0f64.ln()).abs() < 1e-12);
        // Large sigma flattens the bias below the log-range bound.
        let (_, d) = routing_bias(&[0.9, 0.1], &[0, 1], 1e12).unwrap();
        let range = (0.9f64.ln() - 0.1f64.ln()).abs();
        for &v in &d {
            assert!(v.abs() <= range / 1e12 + 1e-300);
        }
    }

    #[test]
    fn bias_is_zero_mean_over_support() {
        let mut rng = Rng::new(23);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..6).map(|_| rng.uniform() + 0.01).collect();
            let s: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let support = vec![0, 1, 2, 3, 4, 5];
            let (_, d) = routing_bias(&w, &support, 1.7).unwrap();
            let mean: f64 = d.iter().sum::<f64>() / d.len() as f64;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn pack_mask_hand_words() {
        // Chunks {0, 5} in one word: bits 0 and 5 -> 33.
        assert_eq!(pack_mask(&[0, 5], 8).unwrap(), vec![33]);
        // Chunk 33 lands in bit 1 of the second word.
        assert_eq!(pack_mask(&[33], 40).unwrap(), vec![0, 2]);
        assert!(pack_mask(&[8], 8).is_err());
    }

    #[test]
    fn mask_row_round_trip_hand() {
        let support = vec![0, 5, 33];
        let words = pack_mask(&support, 40).unwrap();
        assert_eq!(unpack_mask(&words, 40), support);
    }

    #[test]
    fn block_mask_popcount_and_bounds() {
        let mut mask = BlockMask::new(4, 2, 40);
        let row = mask.row_index(2, 1);
        mask.set(row, 0);
        mask.set(row, 5);
        mask.set(row, 33);
        assert_eq!(mask.popcount_row(row), 3);
        assert_eq!(mask.active_chunks(row), vec![0, 5, 33]);
        assert_eq!(mask.popcount_row(mask.row_index(0, 0)), 0);
        assert_eq!(mask.popcount_total(), 3);
    }

    #[test]
    fn route_query_small_case_properties() {
        let mut rng = Rng::new(31);
        let cfg = config(32, 4);
        let q = DenseMatrix::standard_normal(32, 16, &mut rng);
        let k = DenseMatrix::standard_normal(32, 8, &mut rng);
        let q_bar = DenseMatrix::standard_normal(2, 4, &mut rng);
        let summaries = summarize_all(&k, &q_bar, &cfg).unwrap();
        for i in 0..32 {
            for r in 0..2 {
                let route = route_query(i, r, &q, &summaries, &cfg).unwrap();
                let diag = diagonal_branch(i, &cfg);
                assert_eq!(route.visible, visible_chunks(i, &cfg));
                // Routed support never overlaps the diagonal branch.
                for &c in &route.support {
                    assert!(c < diag.chunks.start);
                }
                if route.visible == 0 {
                    assert!(route.support.is_empty());
                    continue;
                }
                // Merged support is the union of head supports.
                let mut union: Vec<usize> = route
                    .head_entmax
                    .iter()
                    .flat_map(|e| e.support.iter().copied())
                    .collect();
                union.sort_unstable();
                union.dedup();
                assert_eq!(route.support, union);
                // Weights sum to one and the bias is centered.
                let sum: f64 = route.weights.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                if !route.bias.is_empty() {
                    let mean: f64 = route.bias.iter().sum::<f64>() / route.bias.len() as f64;
                    assert!(mean.abs() < 1e-12);
                }
                assert!(route.lambda > 0.0 && route.lambda < 1.0);
            }
        }
    }

    #[test]
    fn random_mask_hits_exact_block_count() {
        let mut rng = Rng::new(7);
        let cfg = AttnConfig { h_q: 2, h_kv: 1, ..config(256, 16) };
        let mut visible_slots = 0usize;
        for i in 0..cfg.n {
            visible_slots += visible_chunks(i, &cfg) * cfg.h_kv;
        }
        for sparsity in [0.75, 0.875, 0.9375] {
            let mask = random_mask(&cfg, sparsity, &mut rng).unwrap();
            let expect = ((1.0 - sparsity) * visible_slots as f64).round() as u64;
            assert_eq!(mask.popcount_total(), expect, "exact multiset construction");
            let measured = mask_block_sparsity(&mask, &cfg);
            assert!((measured - sparsity).abs() < 1.0 / visible_slots as f64 + 1e-12);
        }
        // Zero sparsity sets every visible routed slot.
        let full = random_mask(&cfg, 0.0, &mut rng).unwrap();
        assert_eq!(full.popcount_total(), visible_slots as u64);
    }

    #[test]
    fn random_mask_never_touches_diagonal_or_future_chunks() {
        let mut rng = Rng::new(9);
        let cfg = config(64, 8);
        let mask = random_mask(&cfg, 0.5, &mut rng).unwrap();
        for i in 0..cfg.n {
            let limit = visible_chunks(i, &cfg);
            for r in 0..cfg.h_kv {
                for c in mask.active_chunks(mask.row_index(i, r)) {
                    assert!(c < limit, "query {i} chunk {c} beyond visible {limit}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn prop_mask_round_trip(seed in 0u64..5000, t_c in 1usize..120) {
            let mut rng = Rng::new(seed);
            let mut support: Vec<usize> = (0..t_c).filter(|_| rng.uniform() < 0.3).collect();
            support.sort_unstable();
            let words = pack_mask(&support, t_c).unwrap();
            prop_assert_eq!(words.len(), t_c.div_ceil(32));
            let back = unpack_mask(&words, t_c);
            prop_assert_eq!(back, support.clone());
            let pop: usize = words.iter().map(|w| w.count_ones() as usize).sum();
            prop_assert_eq!(pop, support.len());
        }

        #[test]
        fn prop_high_bits_beyond_t_c_stay_zero(seed in 0u64..2000) {
            let mut rng = Rng::new(seed);
            let t_c = 1 + rng.below(100);
            let support: Vec<usize> = (0..t_c).filter(|_| rng.uniform() < 0.5).collect();
            let words = pack_mask(&support, t_c).unwrap();
            for bit in t_c..words.len() * 32 {
                prop_assert_eq!(words[bit / 32] >> (bit % 32) & 1, 0);
            }
        }
    }
}
