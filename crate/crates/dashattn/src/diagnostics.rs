//! Dispersion and sparsity analytics.
//!
//! Dispersion of a distribution over `n` outcomes is its Shannon entropy
//! relative to the uniform maximum, `H(p) / ln n`. A mapping family is
//! dispersive when that ratio tends to 1 as `n` grows. Softmax over
//! bounded iid logits is dispersive; top-k softmax is capped at
//! `ln k / ln n`, and a convex mix of sparse-simplex heads is capped by
//! the size of the union of their supports. The sweep utilities measure
//! those curves empirically; `sparsity_stats` reports realized attention
//! sparsity per kv head from recorded routing decisions.

use crate::entmax::entmax;
use crate::numkit::Rng;
use crate::route::RouteResult;
use crate::summarize::AttnConfig;
use crate::{Error, Result};

/// Shannon entropy in nats, with `0 ln 0 = 0`. Inputs must be
/// nonnegative; callers pass probability vectors.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    let mut h = 0.0;
    for &x in p {
        if x < 0.0 {
            return Err(Error::Domain(format!("negative probability {x}")));
        }
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    Ok(h)
}

/// Entropy of `p` relative to the uniform maximum over `n` outcomes.
pub fn dispersion_ratio(p: &[f64], n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::Domain(format!(
            "dispersion needs at least 2 outcomes, got {n}"
        )));
    }
    Ok(shannon_entropy(p)? / (n as f64).ln())
}

/// Convex head mix `sum_h theta_h p_h`. `theta` must lie on the simplex;
/// all rows must share one length. With strictly positive `theta` the
/// result's support is exactly the union of the head supports.
pub fn head_aggregate(dists: &[Vec<f64>], theta: &[f64]) -> Result<Vec<f64>> {
    if dists.is_empty() || dists.len() != theta.len() {
        return Err(Error::Shape(format!(
            "{} distributions vs {} mixing weights",
            dists.len(),
            theta.len()
        )));
    }
    let m = dists[0].len();
    if dists.iter().any(|d| d.len() != m) {
        return Err(Error::Shape("head distributions differ in length".into()));
    }
    if theta.iter().any(|&t| t < 0.0) || (theta.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Domain("mixing weights must lie on the simplex".into()));
    }
    let mut out = vec![0.0; m];
    for (d, &t) in dists.iter().zip(theta) {
        for (o, &x) in out.iter_mut().zip(d) {
            *o += t * x;
        }
    }
    Ok(out)
}

/// Probability mapping applied to a logit vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mapping {
    Softmax,
    /// Sparse-simplex mapping with the given curvature exponent.
    Entmax(f64),
    /// Softmax restricted to the `k` largest logits, zero elsewhere.
    TopkSoftmax(usize),
}

impl Mapping {
    pub fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        match *self {
            Mapping::Softmax => crate::numkit::softmax_vec(z),
            Mapping::Entmax(alpha) => Ok(entmax(z, alpha)?.p),
            Mapping::TopkSoftmax(k) => {
                if k == 0 {
                    return Err(Error::Domain("top-k mapping needs k >= 1".into()));
                }
                let picked = crate::attend::topk_route(z, k);
                let sel: Vec<f64> = picked.iter().map(|&i| z[i]).collect();
                let p = crate::numkit::softmax_vec(&sel)?;
                let mut out = vec![0.0; z.len()];
                for (slot, &i) in picked.iter().enumerate() {
                    out[i] = p[slot];
                }
                Ok(out)
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Mapping::Softmax => "softmax",
            Mapping::Entmax(_) => "entmax",
            Mapping::TopkSoftmax(_) => "topk-softmax",
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match *self {
            Mapping::Entmax(a) => Some(a),
            _ => None,
        }
    }

    pub fn k(&self) -> Option<usize> {
        match *self {
            Mapping::TopkSoftmax(k) => Some(k),
            _ => None,
        }
    }
}

/// Convex mix of one mapping applied per head, `theta` over heads.
#[derive(Debug, Clone)]
pub struct AggregationSpec {
    pub heads: usize,
    pub theta: Vec<f64>,
    pub mapping: Mapping,
}

impl AggregationSpec {
    /// Uniform mix over `heads` heads.
    pub fn uniform(heads: usize, mapping: Mapping) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Domain("aggregation needs at least one head".into()));
        }
        Ok(Self { heads, theta: vec![1.0 / heads as f64; heads], mapping })
    }

    /// Applies the mapping to each head's logits and mixes by `theta`.
    pub fn aggregate(&self, head_logits: &[Vec<f64>]) -> Result<Vec<f64>> {
        if head_logits.len() != self.heads || self.theta.len() != self.heads {
            return Err(Error::Shape(format!(
                "{} logit rows for a {}-head aggregation",
                head_logits.len(),
                self.heads
            )));
        }
        let dists: Vec<Vec<f64>> =
            head_logits.iter().map(|z| self.mapping.apply(z)).collect::<Result<_>>()?;
        head_aggregate(&dists, &self.theta)
    }
}

/// Bounded iid logit generators for dispersion sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitFamily {
    /// iid Uniform[0,1).
    Uniform01,
    /// iid standard normal, clipped to [-3, 3].
    ClippedGaussian,
    /// One dominant logit at 8, the rest iid Uniform[0,1).
    Spike,
}

impl LogitFamily {
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<f64> {
        match self {
            LogitFamily::Uniform01 => (0..n).map(|_| rng.uniform()).collect(),
            LogitFamily::ClippedGaussian => {
                (0..n).map(|_| rng.standard_normal().clamp(-3.0, 3.0)).collect()
            }
            LogitFamily::Spike => {
                let mut z: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
                let hot = rng.below(n);
                z[hot] = 8.0;
                z
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            LogitFamily::Uniform01 => "uniform01",
            LogitFamily::ClippedGaussian => "clipped-gaussian",
            LogitFamily::Spike => "spike",
        }
    }

    /// Parses the labels accepted by [`label`](Self::label).
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform01" => Ok(LogitFamily::Uniform01),
            "clipped-gaussian" => Ok(LogitFamily::ClippedGaussian),
            "spike" => Ok(LogitFamily::Spike),
            other => Err(Error::Config(format!(
                "unknown logit family {other:?}; known: uniform01, clipped-gaussian, spike"
            ))),
        }
    }
}

/// One sweep grid point: dispersion-ratio statistics over the seeds.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepPoint {
    pub n: usize,
    pub family: String,
    pub mapping: String,
    pub alpha: Option<f64>,
    pub k: Option<usize>,
    pub mean_ratio: f64,
    pub std_ratio: f64,
    pub seeds: usize,
}

/// Measures the dispersion ratio of `mapping` over `family` logits at
/// each `n`, averaged over `seeds` independent draws. Cells run in
/// parallel; the draw for cell `(n, s)` depends only on `base_seed`, `n`,
/// and `s`, so results are identical at any thread count.
pub fn dispersion_sweep(
    family: LogitFamily,
    mapping: Mapping,
    ns: &[usize],
    seeds: usize,
    base_seed: u64,
) -> Result<Vec<SweepPoint>> {
    if seeds == 0 {
        return Err(Error::Domain("sweep needs at least one seed".into()));
    }
    for &n in ns {
        if n < 2 {
            return Err(Error::Domain(format!("sweep grid point n={n} below 2")));
        }
    }
    let cells = ns.len() * seeds;
    let ratios: Vec<f64> = crate::parallel::try_map_indexed(cells, |cell| {
        let n = ns[cell / seeds];
        let s = (cell % seeds) as u64;
        let mut rng = Rng::new(
            base_seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ s.wrapping_mul(0xA24B_AED4_963E_E407),
        );
        let z = family.sample(n, &mut rng);
        let p = mapping.apply(&z)?;
        dispersion_ratio(&p, n)
    })?;
    let mut points = Vec::with_capacity(ns.len());
    for (ix, &n) in ns.iter().enumerate() {
        let slice = &ratios[ix * seeds..(ix + 1) * seeds];
        let mean = slice.iter().sum::<f64>() / seeds as f64;
        let var = if seeds > 1 {
            slice.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (seeds - 1) as f64
        } else {
            0.0
        };
        points.push(SweepPoint {
            n,
            family: family.label().into(),
            mapping: mapping.label().into(),
            alpha: mapping.alpha(),
            k: mapping.k(),
            mean_ratio: mean,
            std_ratio: var.sqrt(),
            seeds,
        });
    }
    Ok(points)
}

/// Large-`n` dispersion ratio of softmax over iid Uniform[0,1) logits.
/// With `S = sum e^{z_j} ~ n (e-1)` and `sum p_j z_j -> 1/(e-1)`, the
/// entropy approaches `ln n + ln(e-1) - 1/(e-1)`.
pub fn softmax_uniform_dispersion_limit(n: usize) -> f64 {
    let e1 = std::f64::consts::E - 1.0;
    1.0 + (e1.ln() - 1.0 / e1) / (n as f64).ln()
}

/// Realized attention sparsity for one kv head: one minus the fraction of
/// causally visible tokens actually attended (routed chunks plus the
/// diagonal window).
#[derive(Debug, Clone, serde::Serialize)]
pub struct SparsityStats {
    pub kv_head: usize,
    pub attended_tokens: u64,
    pub visible_tokens: u64,
    pub sparsity: f64,
}

/// Per-head and overall sparsity table for one recorded forward pass.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SparsityTable {
    pub per_head: Vec<SparsityStats>,
    pub overall: f64,
}

/// Aggregates routing decisions into the realized-sparsity table. Routes
/// must cover `n x h_kv` rows of one forward pass.
pub fn sparsity_stats(routes: &[RouteResult], cfg: &AttnConfig) -> Result<SparsityTable> {
    cfg.validate()?;
    if routes.is_empty() {
        return Err(Error::Trace("sparsity from an empty route set".into()));
    }
    if routes.len() != cfg.n * cfg.h_kv {
        return Err(Error::Trace(format!(
            "{} route rows for an {}x{} forward",
            routes.len(),
            cfg.n,
            cfg.h_kv
        )));
    }
    let mut attended = vec![0u64; cfg.h_kv];
    let mut visible = vec![0u64; cfg.h_kv];
    for route in routes {
        let r = route.kv_head;
        if r >= cfg.h_kv || route.query >= cfg.n {
            return Err(Error::Trace("route row outside config bounds".into()));
        }
        attended[r] += (route.routed_tokens(cfg.chunk) + route.diag_tokens()) as u64;
        visible[r] += (route.query + 1) as u64;
    }
    let per_head: Vec<SparsityStats> = (0..cfg.h_kv)
        .map(|r| SparsityStats {
            kv_head: r,
            attended_tokens: attended[r],
            visible_tokens: visible[r],
            sparsity: 1.0 - attended[r] as f64 / visible[r] as f64,
        })
        .collect();
    let att: u64 = attended.iter().sum();
    let vis: u64 = visible.iter().sum();
    Ok(SparsityTable { per_head, overall: 1.0 - att as f64 / vis as f64 })
}
