//! Command-line driver for the dashattn library.
//!
//! Subcommands: `attend` (run one attention mode end to end), `bench`
//! (dense-vs-sparse wall-time sweep over random masks at exact sparsity),
//! `gradcheck` (finite-difference report), `dispersion` (entropy-ratio
//! sweep), `summarize` (dump the chunk-summary cache), and `route` (dump
//! the bit-packed block mask and routing biases).
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or config error,
//! 3 verification failure.

use clap::{Args, Parser, Subcommand};
use dashattn::attend::{
    dense_attention, pipeline_forward, pipeline_forward_topk, prior_attention_reference,
    sparse_attention, SparsePlan,
};
use dashattn::bench32::{dense_attention_f32, max_abs_diff_f32, median_time_ms, sparse_attention_f32, to_f32};
use dashattn::diagnostics::{dispersion_sweep, sparsity_stats, LogitFamily, Mapping};
use dashattn::grad::{gradcheck, GradcheckEntry, GRADCHECK_OPS};
use dashattn::numkit::tensor;
use dashattn::route::{
    diagonal_branch, mask_block_sparsity, random_mask, route_query, visible_chunks, RouteResult,
};
use dashattn::summarize::summarize_all;
use dashattn::{AttnConfig, DenseMatrix, Error, Rng};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dashattn", version, about = "Hierarchical sparse attention reference CLI")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one attention mode end to end; write the output tensor and a
    /// stats JSON.
    Attend(Common),
    /// Time the dense vs block-sparse f32 kernels over a sparsity grid.
    Bench(Common),
    /// Run the registered gradient checks and emit a JSON report.
    Gradcheck(GradcheckArgs),
    /// Measure dispersion ratios of a mapping over a logit family.
    Dispersion(Common),
    /// Dump the chunk-summary cache as a tensor file.
    Summarize(Common),
    /// Dump the bit-packed block mask and routing biases.
    Route(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Flat JSON config file; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base RNG seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// dense, dash, or topk.
    #[arg(long)]
    mode: Option<String>,
    /// Top-k chunk budget (topk mode).
    #[arg(long)]
    k: Option<usize>,
    /// Routing logit scale.
    #[arg(long)]
    gamma: Option<f64>,
    /// Entmax curvature exponent.
    #[arg(long)]
    alpha: Option<f64>,
    /// Prior strength divisor.
    #[arg(long)]
    sigma: Option<f64>,
    /// Comma-separated target sparsities for bench.
    #[arg(long, value_delimiter = ',')]
    sparsity: Option<Vec<f64>>,
    /// Cross-check outputs against an independent reference; mismatch
    /// beyond 1e-9 exits with code 3.
    #[arg(long)]
    verify: bool,
    /// Cap the worker thread pool.
    #[arg(long)]
    threads: Option<usize>,
    /// Primary output path (tensor or CSV, per subcommand).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Prior report JSON to compare statuses against (regression check).
    #[arg(long)]
    trace: Option<PathBuf>,
}

/// Flat JSON config schema; every field optional, flags override.
#[derive(serde::Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    n: Option<usize>,
    d_h: Option<usize>,
    h_q: Option<usize>,
    h_kv: Option<usize>,
    chunk: Option<usize>,
    alpha: Option<f64>,
    gamma: Option<f64>,
    sigma: Option<f64>,
    include_prev_chunk: Option<bool>,
    seed: Option<u64>,
    mode: Option<String>,
    k: Option<usize>,
    sparsity: Option<Vec<f64>>,
    family: Option<String>,
    ns: Option<Vec<usize>>,
    seeds: Option<usize>,
    out: Option<String>,
    stats_out: Option<String>,
    trace: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Dense,
    Dash,
    Topk,
}

impl Mode {
    fn parse(s: &str) -> Result<Self, Error> {
        match s {
            "dense" => Ok(Mode::Dense),
            "dash" => Ok(Mode::Dash),
            "topk" => Ok(Mode::Topk),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected dense, dash, or topk"
            ))),
        }
    }

    fn label(self) -> &'static str {
        match self {
            Mode::Dense => "dense",
            Mode::Dash => "dash",
            Mode::Topk => "topk",
        }
    }
}

/// Fully resolved run settings (defaults + config file + flags).
struct Run {
    attn: AttnConfig,
    seed: u64,
    mode: Mode,
    k: Option<usize>,
    sparsity: Vec<f64>,
    family: LogitFamily,
    ns: Vec<usize>,
    seeds: usize,
    out: Option<PathBuf>,
    stats_out: Option<PathBuf>,
    trace: Option<PathBuf>,
    verify: bool,
}

fn resolve(common: &Common) -> Result<Run, Error> {
    let file: FileConfig = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let attn = AttnConfig {
        n: file.n.unwrap_or(256),
        d_h: file.d_h.unwrap_or(32),
        h_q: file.h_q.unwrap_or(4),
        h_kv: file.h_kv.unwrap_or(2),
        chunk: file.chunk.unwrap_or(16),
        alpha: common.alpha.or(file.alpha).unwrap_or(1.5),
        gamma: common.gamma.or(file.gamma).unwrap_or(1.0),
        sigma: common.sigma.or(file.sigma).unwrap_or(2.0),
        include_prev_chunk: file.include_prev_chunk.unwrap_or(true),
    };
    let mode = Mode::parse(
        common
            .mode
            .clone()
            .or(file.mode)
            .unwrap_or_else(|| "dash".into())
            .as_str(),
    )?;
    let k = common.k.or(file.k);
    match mode {
        Mode::Topk => {
            if k.map_or(true, |k| k == 0) {
                return Err(Error::Config("mode=topk requires --k >= 1".into()));
            }
        }
        Mode::Dash => {
            if attn.alpha <= 1.0 {
                return Err(Error::Config(format!(
                    "mode=dash requires alpha > 1, got {}",
                    attn.alpha
                )));
            }
        }
        Mode::Dense => {}
    }
    let run = Run {
        attn,
        seed: common.seed.or(file.seed).unwrap_or(0),
        mode,
        k,
        sparsity: common
            .sparsity
            .clone()
            .or(file.sparsity)
            .unwrap_or_else(|| vec![0.75, 0.875, 0.9375]),
        family: LogitFamily::parse(file.family.as_deref().unwrap_or("uniform01"))?,
        ns: file.ns.unwrap_or_else(|| vec![256, 1024, 4096, 16384]),
        seeds: file.seeds.unwrap_or(4),
        out: common.out.clone().or(file.out.map(PathBuf::from)),
        stats_out: file.stats_out.map(PathBuf::from),
        trace: file.trace.map(PathBuf::from),
        verify: common.verify,
    };
    run.attn.validate()?;
    Ok(run)
}

fn apply_threads(threads: Option<usize>) {
    if let Some(t) = threads {
        if t > 0 {
            // Ignore the error if a pool already exists (tests).
            let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
        }
    }
}

fn seeded_inputs(cfg: &AttnConfig, seed: u64) -> (DenseMatrix, DenseMatrix, DenseMatrix, DenseMatrix) {
    let mut rng = Rng::new(seed);
    let q = DenseMatrix::standard_normal(cfg.n, cfg.h_q * cfg.d_h, &mut rng);
    let k = DenseMatrix::standard_normal(cfg.n, cfg.h_kv * cfg.d_h, &mut rng);
    let v = DenseMatrix::standard_normal(cfg.n, cfg.h_kv * cfg.d_h, &mut rng);
    let q_bar = DenseMatrix::standard_normal(cfg.h_kv, cfg.d_h, &mut rng);
    (q, k, v, q_bar)
}

fn emit(path: &Option<PathBuf>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => {
            let mut f = std::fs::File::create(p)?;
            f.write_all(text.as_bytes())?;
            Ok(())
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

#[derive(serde::Serialize)]
struct AttendStatsJson {
    mode: String,
    n: usize,
    chunk: usize,
    h_q: usize,
    h_kv: usize,
    seed: u64,
    blocks_visited: u64,
    routed_blocks: u64,
    diag_blocks: u64,
    measured_sparsity: f64,
    mean_support_chunks: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_abs_err: Option<f64>,
}

fn route_stats(routes: &[RouteResult], cfg: &AttnConfig) -> Result<(u64, u64, f64, f64, Option<f64>), Error> {
    let routed: u64 = routes.iter().map(|r| r.support.len() as u64).sum();
    let diag: u64 = routes.iter().map(|r| r.diag.chunks.len() as u64).sum();
    let table = sparsity_stats(routes, cfg)?;
    let mean_support = routed as f64 / routes.len() as f64;
    let lambdas: Vec<f64> = routes
        .iter()
        .filter(|r| !r.support.is_empty())
        .map(|r| r.lambda)
        .collect();
    let lambda_mean = if lambdas.is_empty() {
        None
    } else {
        Some(lambdas.iter().sum::<f64>() / lambdas.len() as f64)
    };
    Ok((routed, diag, table.overall, mean_support, lambda_mean))
}

/// Per-row mixture-prior reference for the routed pipeline: directly
/// evaluates `p_j ∝ g_j e^{z_j}` without the bias rewrite, token by token.
fn dash_reference_err(
    out: &DenseMatrix,
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    routes: &[RouteResult],
    cfg: &AttnConfig,
    uniform_over_selection: bool,
) -> Result<f64, Error> {
    let (d_h, b, g_q) = (cfg.d_h, cfg.chunk, cfg.group_size());
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut worst = 0.0f64;
    for route in routes {
        let (i, r) = (route.query, route.kv_head);
        let mut tokens: Vec<usize> = Vec::new();
        let mut g: Vec<f64> = Vec::new();
        if route.support.is_empty() || uniform_over_selection {
            for &c in &route.support {
                for j in c * b..(c + 1) * b {
                    tokens.push(j);
                    g.push(1.0);
                }
            }
            for j in route.diag.first_token..=i {
                tokens.push(j);
                g.push(1.0);
            }
        } else {
            let prior = route.token_prior(cfg.sigma, b)?;
            for (s, &c) in route.support.iter().enumerate() {
                for j in c * b..(c + 1) * b {
                    tokens.push(j);
                    g.push(prior.routed[s]);
                }
            }
            for j in route.diag.first_token..=i {
                tokens.push(j);
                g.push(prior.diag);
            }
        }
        let v_rows: Vec<&[f64]> = tokens.iter().map(|&j| cfg.kv_head(v.row(j), r)).collect();
        for h in r * g_q..(r + 1) * g_q {
            let qh = cfg.q_head(q.row(i), h);
            let z: Vec<f64> = tokens
                .iter()
                .map(|&j| {
                    let kj = cfg.kv_head(k.row(j), r);
                    qh.iter().zip(kj).map(|(a, x)| a * x).sum::<f64>() * scale
                })
                .collect();
            let want = prior_attention_reference(&z, &g, &v_rows)?;
            let got = &out.row(i)[h * d_h..(h + 1) * d_h];
            for (a, bb) in got.iter().zip(&want) {
                worst = worst.max((a - bb).abs());
            }
        }
    }
    Ok(worst)
}

fn cmd_attend(run: &Run) -> Result<ExitCode, Error> {
    let cfg = &run.attn;
    let (q, k, v, q_bar) = seeded_inputs(cfg, run.seed);
    let (out, stats) = match run.mode {
        Mode::Dense => {
            let out = dense_attention(&q, &k, &v, cfg, true)?;
            let mut routed = 0u64;
            let mut diag = 0u64;
            for i in 0..cfg.n {
                routed += (visible_chunks(i, cfg) * cfg.h_kv) as u64;
                diag += (diagonal_branch(i, cfg).chunks.len() * cfg.h_kv) as u64;
            }
            let rows = (cfg.n * cfg.h_kv) as f64;
            let max_abs_err = if run.verify {
                // Independent path: streaming block-sparse kernel over the
                // every-chunk plan.
                let plan = SparsePlan::dense_reduction(cfg)?;
                let (sparse, _) = sparse_attention(&q, &k, &v, &plan, cfg)?;
                Some(sparse.max_abs_diff(&out)?)
            } else {
                None
            };
            let stats = AttendStatsJson {
                mode: "dense".into(),
                n: cfg.n,
                chunk: cfg.chunk,
                h_q: cfg.h_q,
                h_kv: cfg.h_kv,
                seed: run.seed,
                blocks_visited: routed + diag,
                routed_blocks: routed,
                diag_blocks: diag,
                measured_sparsity: 0.0,
                mean_support_chunks: routed as f64 / rows,
                lambda_mean: None,
                max_abs_err,
            };
            (out, stats)
        }
        Mode::Dash => {
            let (out, trace) = pipeline_forward(&q, &k, &v, &q_bar, cfg)?;
            let (routed, diag, sparsity, mean_support, lambda_mean) =
                route_stats(&trace.routes, cfg)?;
            let max_abs_err = if run.verify {
                Some(dash_reference_err(&out, &q, &k, &v, &trace.routes, cfg, false)?)
            } else {
                None
            };
            let stats = AttendStatsJson {
                mode: "dash".into(),
                n: cfg.n,
                chunk: cfg.chunk,
                h_q: cfg.h_q,
                h_kv: cfg.h_kv,
                seed: run.seed,
                blocks_visited: routed + diag,
                routed_blocks: routed,
                diag_blocks: diag,
                measured_sparsity: sparsity,
                mean_support_chunks: mean_support,
                lambda_mean,
                max_abs_err,
            };
            (out, stats)
        }
        Mode::Topk => {
            let budget = run.k.expect("validated");
            let (out, routes) = pipeline_forward_topk(&q, &k, &v, &q_bar, cfg, budget)?;
            let (routed, diag, sparsity, mean_support, _) = route_stats(&routes, cfg)?;
            let max_abs_err = if run.verify {
                Some(dash_reference_err(&out, &q, &k, &v, &routes, cfg, true)?)
            } else {
                None
            };
            let stats = AttendStatsJson {
                mode: "topk".into(),
                n: cfg.n,
                chunk: cfg.chunk,
                h_q: cfg.h_q,
                h_kv: cfg.h_kv,
                seed: run.seed,
                blocks_visited: routed + diag,
                routed_blocks: routed,
                diag_blocks: diag,
                measured_sparsity: sparsity,
                mean_support_chunks: mean_support,
                lambda_mean: None,
                max_abs_err,
            };
            (out, stats)
        }
    };
    if let Some(path) = &run.out {
        tensor::write_matrix(path, &out)?;
    }
    let text = serde_json::to_string_pretty(&stats)
        .map_err(|e| Error::Format(format!("stats serialization: {e}")))?;
    emit(&run.stats_out, &text)?;
    if run.verify {
        if let Some(err) = stats.max_abs_err {
            if err > 1e-9 {
                eprintln!("verification failed: max abs err {err} > 1e-9");
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(run: &Run) -> Result<ExitCode, Error> {
    let cfg = &run.attn;
    for &s in &run.sparsity {
        if !(0.0..1.0).contains(&s) {
            return Err(Error::Config(format!("bench sparsity {s} outside [0, 1)")));
        }
    }
    let (q64, k64, v64, _) = seeded_inputs(cfg, run.seed);
    let q = to_f32(q64.data());
    let k = to_f32(k64.data());
    let v = to_f32(v64.data());
    let dense_out = dense_attention_f32(&q, &k, &v, cfg)?;
    let time_dense = median_time_ms(2, 9, || {
        std::hint::black_box(dense_attention_f32(&q, &k, &v, cfg)?);
        Ok(())
    })?;
    let mut csv = String::from(
        "n,B,alpha,gamma,sigma,mode,target_sparsity,measured_sparsity,blocks_visited,time_dense_ms,time_sparse_ms,max_abs_err\n",
    );
    for (ix, &s) in run.sparsity.iter().enumerate() {
        let mut rng = Rng::new(run.seed.wrapping_add(0xB0_0000 + ix as u64));
        let mask = random_mask(cfg, s, &mut rng)?;
        let measured = mask_block_sparsity(&mask, cfg);
        let plan = SparsePlan::from_mask(mask, cfg)?;
        let (sparse_out, stats) = sparse_attention_f32(&q, &k, &v, &plan, cfg)?;
        let time_sparse = median_time_ms(2, 9, || {
            std::hint::black_box(sparse_attention_f32(&q, &k, &v, &plan, cfg)?);
            Ok(())
        })?;
        let err = max_abs_diff_f32(&sparse_out, &dense_out)?;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            cfg.n,
            cfg.chunk,
            cfg.alpha,
            cfg.gamma,
            cfg.sigma,
            run.mode.label(),
            s,
            measured,
            stats.blocks_visited(),
            time_dense,
            time_sparse,
            err
        ));
    }
    emit(&run.out, csv.trim_end())?;
    Ok(ExitCode::SUCCESS)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct GradcheckReport {
    entries: Vec<GradcheckEntry>,
    failures: usize,
    skipped: usize,
}

fn cmd_gradcheck(run: &Run, trace_flag: &Option<PathBuf>) -> Result<ExitCode, Error> {
    let mut entries = Vec::new();
    for op in GRADCHECK_OPS {
        for s in 0..run.seeds as u64 {
            entries.extend(gradcheck(op, run.seed + s, 1e-3)?);
        }
    }
    let report = GradcheckReport {
        failures: entries.iter().filter(|e| e.status == "fail").count(),
        skipped: entries.iter().filter(|e| e.status == "skipped_boundary").count(),
        entries,
    };
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
    emit(&run.out, &text)?;

    let trace_path = trace_flag.clone().or(run.trace.clone());
    if let Some(path) = trace_path {
        let prior = load_trace(&path)?;
        if prior.entries.len() != report.entries.len() {
            eprintln!(
                "trace mismatch: {} prior entries vs {} fresh",
                prior.entries.len(),
                report.entries.len()
            );
            return Ok(ExitCode::from(1));
        }
        for (a, b) in prior.entries.iter().zip(&report.entries) {
            if a.op != b.op || a.seed != b.seed || a.param != b.param || a.status != b.status {
                eprintln!(
                    "trace mismatch at op={} seed={} param={}: {} vs {}",
                    b.op, b.seed, b.param, a.status, b.status
                );
                return Ok(ExitCode::from(1));
            }
        }
    }
    if report.failures > 0 {
        eprintln!("{} gradient checks failed", report.failures);
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn load_trace(path: &Path) -> Result<GradcheckReport, Error> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Trace(format!("trace {}: {e}", path.display())))
}

fn cmd_dispersion(run: &Run) -> Result<ExitCode, Error> {
    let mapping = match run.mode {
        Mode::Dense => Mapping::Softmax,
        Mode::Dash => Mapping::Entmax(run.attn.alpha),
        Mode::Topk => Mapping::TopkSoftmax(run.k.expect("validated")),
    };
    let points = dispersion_sweep(run.family, mapping, &run.ns, run.seeds, run.seed)?;
    let mut csv = String::from("n,family,mapping,alpha,k,mean_ratio,std_ratio,seeds\n");
    for p in &points {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            p.n,
            p.family,
            p.mapping,
            p.alpha.map_or(String::new(), |a| a.to_string()),
            p.k.map_or(String::new(), |k| k.to_string()),
            p.mean_ratio,
            p.std_ratio,
            p.seeds
        ));
    }
    emit(&run.out, csv.trim_end())?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_summarize(run: &Run) -> Result<ExitCode, Error> {
    let cfg = &run.attn;
    let (_, k, _, q_bar) = seeded_inputs(cfg, run.seed);
    let summaries = summarize_all(&k, &q_bar, cfg)?;
    let t_c = cfg.chunk_count();
    if let Some(path) = &run.out {
        let mut flat = Vec::with_capacity(t_c * cfg.h_kv * cfg.d_h);
        for c in 0..t_c {
            for r in 0..cfg.h_kv {
                flat.extend_from_slice(summaries.summary(c, r));
            }
        }
        tensor::write_f64(path, &[t_c, cfg.h_kv, cfg.d_h], &flat)?;
    }
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "chunks": t_c,
        "h_kv": cfg.h_kv,
        "d_h": cfg.d_h,
        "residual_tokens": cfg.n - t_c * cfg.chunk,
    }))
    .map_err(|e| Error::Format(format!("stats serialization: {e}")))?;
    emit(&run.stats_out, &text)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_route(run: &Run) -> Result<ExitCode, Error> {
    let cfg = &run.attn;
    let (q, k, _, q_bar) = seeded_inputs(cfg, run.seed);
    let summaries = summarize_all(&k, &q_bar, cfg)?;
    let mut routes = Vec::with_capacity(cfg.n * cfg.h_kv);
    for i in 0..cfg.n {
        for r in 0..cfg.h_kv {
            routes.push(route_query(i, r, &q, &summaries, cfg)?);
        }
    }
    let plan = SparsePlan::from_routes(&routes, cfg)?;
    if let Some(path) = &run.out {
        plan.mask.write(path)?;
        let bias_path = path.with_extension("bias");
        tensor::write_f64(&bias_path, &[cfg.n, cfg.h_kv, plan.t_c], &plan.bias)?;
    }
    let table = sparsity_stats(&routes, cfg)?;
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "rows": cfg.n * cfg.h_kv,
        "chunks": plan.t_c,
        "active_blocks": plan.mask.popcount_total(),
        "block_sparsity": mask_block_sparsity(&plan.mask, cfg),
        "token_sparsity": table.overall,
    }))
    .map_err(|e| Error::Format(format!("stats serialization: {e}")))?;
    emit(&run.stats_out, &text)?;
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cli: Cli) -> Result<ExitCode, Error> {
    match cli.cmd {
        Cmd::Attend(c) => {
            apply_threads(c.threads);
            cmd_attend(&resolve(&c)?)
        }
        Cmd::Bench(c) => {
            apply_threads(c.threads);
            cmd_bench(&resolve(&c)?)
        }
        Cmd::Gradcheck(g) => {
            apply_threads(g.common.threads);
            cmd_gradcheck(&resolve(&g.common)?, &g.trace)
        }
        Cmd::Dispersion(c) => {
            apply_threads(c.threads);
            cmd_dispersion(&resolve(&c)?)
        }
        Cmd::Summarize(c) => {
            apply_threads(c.threads);
            cmd_summarize(&resolve(&c)?)
        }
        Cmd::Route(c) => {
            apply_threads(c.threads);
            cmd_route(&resolve(&c)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            // Usage, config, shape, format, trace, and I/O problems are
            // all "bad invocation or inputs".
            ExitCode::from(2)
        }
    }
}
