mod checks;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use tracksplit::diagnostics::{fit_rate_above_floor, CheckReport, RateFit};
use tracksplit::operators::SymOperator;
use tracksplit::outer::{run_configured, Regime, RunConfig, RunOutput};
use tracksplit::trace::{Counters, IterateTrace, RunStatus};

const PRESETS: &[(&str, &str)] = &[
    ("bq1_single_loop", include_str!("../presets/bq1_single_loop.json")),
    ("bq1_baseline", include_str!("../presets/bq1_baseline.json")),
    ("bq1_bad_step", include_str!("../presets/bq1_bad_step.json")),
    ("pdps_saddle", include_str!("../presets/pdps_saddle.json")),
    ("pdps_mismatch_small", include_str!("../presets/pdps_mismatch_small.json")),
    ("poisson16_single_loop", include_str!("../presets/poisson16_single_loop.json")),
    ("poisson32_single_loop", include_str!("../presets/poisson32_single_loop.json")),
    ("poisson32_baseline", include_str!("../presets/poisson32_baseline.json")),
];

/// Squared-distance ratio below which iterates count as round-off for rate fits.
const RATE_FLOOR: f64 = 1e-24;

#[derive(Parser)]
#[command(name = "tracksplit", version, about = "Single-loop bilevel splitting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write trace, checks and summary.
    Run {
        /// Config file, or the name of a shipped preset.
        #[arg(long)]
        config: String,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Run two experiments on the same instance and compare cost and accuracy.
    Compare {
        config_a: String,
        config_b: String,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Print the check table and summary next to a trace file.
    Report { trace: PathBuf },
    /// List the shipped presets.
    ListPresets,
}

#[derive(clap::Args)]
struct RunOpts {
    #[arg(long, env = "TRACKSPLIT_OUT", default_value = "tracksplit-out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    budget: Option<usize>,
    /// Comma-separated subset of checks to enable.
    #[arg(long)]
    check: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunSummary {
    label: String,
    method: String,
    status: RunStatus,
    iterations: usize,
    final_residual: Option<f64>,
    p_est: Option<f64>,
    regime: Regime,
    certified_p: f64,
    /// Curvature bounds `L` and `γ_F` of the objective.
    l: f64,
    gamma_f: f64,
    counters: Counters,
    wall_time_s: f64,
    config_hash: String,
    checks: Vec<(String, bool)>,
    all_pass: bool,
}

#[derive(Debug, Serialize)]
struct Comparison {
    label_a: String,
    label_b: String,
    final_a: Vec<f64>,
    final_b: Vec<f64>,
    limit_distance: f64,
    limits_agree: bool,
    /// Inner, adjoint and direct solves.
    cost_a: usize,
    cost_b: usize,
    counters_a: Counters,
    counters_b: Counters,
    /// `flops_b / flops_a` of the algorithmic work.
    speedup_ratio: f64,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn config_error(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn load_config(spec: &str, opts: &RunOpts) -> Result<RunConfig, Failure> {
    let text = if Path::new(spec).exists() {
        fs::read_to_string(spec).with_context(|| format!("reading {spec}")).map_err(config_error)?
    } else if let Some((_, t)) = PRESETS.iter().find(|(n, _)| *n == spec) {
        t.to_string()
    } else {
        return Err(config_error(anyhow::anyhow!("no config file or preset named `{spec}`")));
    };
    let mut cfg: RunConfig =
        serde_json::from_str(&text).with_context(|| format!("malformed config `{spec}`")).map_err(config_error)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(budget) = opts.budget {
        cfg.budget = budget;
    }
    if cfg.label.is_empty() {
        cfg.label = Path::new(spec).file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    }
    Ok(cfg)
}

fn execute(cfg: &RunConfig) -> Result<(RunOutput, f64), Failure> {
    let start = Instant::now();
    let out = run_configured(cfg).map_err(|e| {
        use tracksplit::Error::*;
        let at_load = matches!(
            e,
            StepLength(_)
                | InvalidParameter { .. }
                | Unsupported(_)
                | Dimension { .. }
                | OutsideRegion
                | NotPositiveSemidefinite { .. }
        );
        let wrapped = anyhow::Error::new(e).context(format!("run `{}`", cfg.label));
        if at_load {
            Failure::Config(wrapped)
        } else {
            Failure::Runtime(wrapped)
        }
    })?;
    Ok((out, start.elapsed().as_secs_f64()))
}

fn p_estimate(trace: &IterateTrace) -> Option<f64> {
    let x_bar = trace.x_bar.as_ref()?;
    match fit_rate_above_floor(trace, x_bar, RATE_FLOOR).ok()? {
        RateFit::Rate(p) => Some(p),
        RateFit::ConvergedExactly => None,
    }
}

fn summarize(cfg: &RunConfig, out: &RunOutput, reports: &[CheckReport], wall: f64) -> RunSummary {
    let checks: Vec<(String, bool)> = reports.iter().map(|r| (r.name.clone(), r.pass)).collect();
    RunSummary {
        label: cfg.label.clone(),
        method: out.trace.method.clone(),
        status: out.trace.status,
        iterations: out.trace.len(),
        final_residual: out.trace.final_residual(),
        p_est: p_estimate(&out.trace),
        regime: out.certificate.regime,
        certified_p: out.certificate.p,
        l: out.l,
        gamma_f: out.gamma_f,
        counters: out.trace.counters,
        wall_time_s: wall,
        config_hash: format!("{:016x}", out.trace.config_hash),
        all_pass: checks.iter().all(|(_, p)| *p),
        checks,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_run(spec: &str, opts: &RunOpts) -> Result<u8, Failure> {
    let cfg = load_config(spec, opts)?;
    let selected = checks::parse_selection(opts.check.as_deref()).map_err(|m| config_error(anyhow::anyhow!(m)))?;
    let (out, wall) = execute(&cfg)?;
    let reports = checks::run_checks(&cfg, &out, &selected).context("evaluating checks")?;
    let summary = summarize(&cfg, &out, &reports, wall);

    let dir = opts.out.join(&cfg.label);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("trace.csv"), out.trace.to_csv()).context("writing trace")?;
    write_json(&dir.join("checks.json"), &reports)?;
    write_json(&dir.join("summary.json"), &summary)?;
    print_summary(&summary, &reports);
    println!("outputs in {}", dir.display());

    Ok(if out.trace.status == RunStatus::LeftRegion {
        4
    } else if summary.all_pass {
        0
    } else {
        2
    })
}

fn cost(c: &Counters) -> usize {
    c.inner_steps + c.adjoint_steps + c.direct_solves
}

fn cmd_compare(spec_a: &str, spec_b: &str, opts: &RunOpts) -> Result<u8, Failure> {
    let cfg_a = load_config(spec_a, opts)?;
    let cfg_b = load_config(spec_b, opts)?;
    if cfg_a.instance != cfg_b.instance {
        return Err(config_error(anyhow::anyhow!("compared configs must use the same instance")));
    }
    let (a, _) = execute(&cfg_a)?;
    let (b, _) = execute(&cfg_b)?;
    let (ta, tb) = (&a.trace, &b.trace);
    if ta.x0.len() != tb.x0.len() {
        return Err(config_error(anyhow::anyhow!("compared runs have different dimensions")));
    }
    let metric = SymOperator::new(ta.metric.clone()).context("step metric")?;
    let reference = ta.x_bar.clone().or_else(|| tb.x_bar.clone()).unwrap_or_else(|| tb.last_x().clone());
    let dist = |t: &IterateTrace| -> anyhow::Result<Vec<f64>> {
        t.iterates().iter().map(|x| Ok(metric.seminorm(&(x - &reference))?)).collect()
    };
    let (da, db) = (dist(ta)?, dist(tb)?);
    let mut csv = String::from("k,dist_a,dist_b\n");
    for k in 0..da.len().max(db.len()) {
        let cell = |d: &[f64]| d.get(k).map_or(String::new(), |v| tracksplit::trace::fmt_float(*v));
        csv.push_str(&format!("{k},{},{}\n", cell(&da), cell(&db)));
    }
    let limit_distance = (ta.last_x() - tb.last_x()).norm();
    let (ca, cb) = (cost(&ta.counters), cost(&tb.counters));
    let cmp = Comparison {
        label_a: cfg_a.label.clone(),
        label_b: cfg_b.label.clone(),
        final_a: ta.last_x().iter().copied().collect(),
        final_b: tb.last_x().iter().copied().collect(),
        limit_distance,
        limits_agree: limit_distance <= 1e-6,
        cost_a: ca,
        cost_b: cb,
        counters_a: ta.counters,
        counters_b: tb.counters,
        speedup_ratio: if ta.counters.flops == tb.counters.flops {
            1.0
        } else {
            tb.counters.flops as f64 / ta.counters.flops as f64
        },
    };
    let dir = opts.out.join(format!("{}__vs__{}", cfg_a.label, cfg_b.label));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("distances.csv"), csv).context("writing distances")?;
    write_json(&dir.join("comparison.json"), &cmp)?;
    println!("{} vs {}", cmp.label_a, cmp.label_b);
    println!("  limit distance  {:.3e} ({})", limit_distance, if cmp.limits_agree { "agree" } else { "differ" });
    println!("  solves          {} vs {}", ca, cb);
    println!("  speedup ratio   {:.3}", cmp.speedup_ratio);
    println!("outputs in {}", dir.display());
    Ok(0)
}

fn print_summary(s: &RunSummary, reports: &[CheckReport]) {
    println!("{} [{}]: {:?} after {} steps", s.label, s.method, s.status, s.iterations);
    if let Some(r) = s.final_residual {
        println!("  final residual  {r:.3e}");
    }
    if let Some(p) = s.p_est {
        println!("  p_est           {p:.6}");
    }
    println!("  regime          {:?} (certified p = {:.6})", s.regime, s.certified_p);
    println!("  curvature       L = {:.4e}, gamma_F = {:.4e}", s.l, s.gamma_f);
    println!(
        "  solves          inner {} / adjoint {} / direct {}",
        s.counters.inner_steps, s.counters.adjoint_steps, s.counters.direct_solves
    );
    println!("  {:<20} {:<6} {:>14}  inequality", "check", "result", "min scaled");
    for r in reports {
        let q = r.qualifier.as_deref().map_or(String::new(), |q| format!(" ({q})"));
        println!(
            "  {:<20} {:<6} {:>14.3e}  {}{}",
            r.name,
            if r.pass { "pass" } else { "FAIL" },
            r.min_scaled_slack,
            r.citation,
            q
        );
    }
}

fn cmd_report(trace: &Path) -> Result<u8, Failure> {
    let text = fs::read_to_string(trace).with_context(|| format!("reading {}", trace.display())).map_err(config_error)?;
    if text.lines().skip(1).all(|l| l.trim().is_empty()) {
        return Err(config_error(anyhow::anyhow!("trace {} has no rows", trace.display())));
    }
    let dir = trace.parent().unwrap_or(Path::new("."));
    let read = |name: &str| -> Result<String, Failure> {
        let p = dir.join(name);
        fs::read_to_string(&p).with_context(|| format!("reading {}", p.display())).map_err(config_error)
    };
    let summary: RunSummary = serde_json::from_str(&read("summary.json")?).context("parsing summary").map_err(config_error)?;
    let reports: Vec<CheckReport> =
        serde_json::from_str(&read("checks.json")?).context("parsing checks").map_err(config_error)?;
    print_summary(&summary, &reports);
    Ok(if summary.all_pass { 0 } else { 2 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, opts } => cmd_run(config, opts),
        Command::Compare { config_a, config_b, opts } => cmd_compare(config_a, config_b, opts),
        Command::Report { trace } => cmd_report(trace),
        Command::ListPresets => {
            for (name, _) in PRESETS {
                println!("{name}");
            }
            Ok(0)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(3)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
