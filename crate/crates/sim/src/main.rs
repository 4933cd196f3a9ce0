use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};
use sas_core::dataplane::QueuePolicy;
use sas_sim::report::{self, RESULTS_FILE};
use sas_sim::sweep::{self, summarize};
use sas_sim::{verify, SimConfig, Simulation};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    Edfq,
    Fifo,
    Spr,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scenario {
    Testbed,
    Large,
}

/// Simulate the two-tier fork-join data plane under EDFQ, FIFO and SPR
/// subtask queuing.
///
/// With `--rate`, runs each policy once at that overall arrival rate and
/// writes `results.csv` plus one `trace_<policy>.csv` per policy. Otherwise
/// searches for each policy's maximum sustainable rate and writes
/// `results.csv` and `summary.csv`.
#[derive(Debug, Parser)]
#[command(name = "sas-sim", version)]
struct Cli {
    /// JSON configuration; overrides --scenario.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "testbed")]
    scenario: Scenario,
    /// IADs for the large scenario.
    #[arg(long, default_value_t = 60)]
    iads: u32,
    /// Edge nodes per IAD for the large scenario.
    #[arg(long, default_value_t = 300)]
    nodes: u32,
    #[arg(long, value_enum, default_value = "all")]
    policy: PolicyArg,
    /// Single run at this overall arrival rate (queries/s).
    #[arg(long, conflicts_with = "sweep")]
    rate: Option<f64>,
    /// Rate search bounds and grid step, `min:max:step`.
    #[arg(long)]
    sweep: Option<String>,
    /// Post-warmup queries per rate point during a search.
    #[arg(long)]
    queries: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated seconds for a single run.
    #[arg(long)]
    duration: Option<f64>,
    /// Simulated seconds excluded from statistics.
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Run the randomized invariant checks instead of simulating.
    #[arg(long)]
    verify: bool,
    /// Cases per invariant check with --verify.
    #[arg(long, default_value_t = 1000)]
    cases: u32,
}

fn parse_sweep(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(':')
        .map(str::parse)
        .collect::<Result<_, _>>()
        .with_context(|| format!("bad --sweep {s:?}"))?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => bail!("--sweep takes min:max:step, got {s:?}"),
    }
}

fn build_config(cli: &Cli) -> Result<SimConfig> {
    let mut cfg = match (&cli.config, cli.scenario) {
        (Some(path), _) => SimConfig::load(path)?,
        (None, Scenario::Testbed) => sas_sim::testbed(),
        (None, Scenario::Large) => sas_sim::large(cli.iads, cli.nodes),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(d) = cli.duration {
        cfg.duration_s = d;
    }
    if let Some(w) = cli.warmup {
        cfg.warmup_s = w;
    }
    if let Some(r) = cli.rate {
        cfg.rate = r;
    }
    if let Some(q) = cli.queries {
        cfg.sweep.queries_per_point = q;
    }
    if let Some(s) = &cli.sweep {
        let (min, max, step) = parse_sweep(s)?;
        cfg.sweep.min_rate = min;
        cfg.sweep.max_rate = max;
        cfg.sweep.grid_step = step;
        cfg.sweep.resolution = cfg.sweep.resolution.min(step);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn policies(p: PolicyArg) -> Vec<QueuePolicy> {
    match p {
        PolicyArg::Edfq => vec![QueuePolicy::Edfq],
        PolicyArg::Fifo => vec![QueuePolicy::Fifo],
        PolicyArg::Spr => vec![QueuePolicy::Spr],
        PolicyArg::All => QueuePolicy::ALL.to_vec(),
    }
}

fn run_verify(cases: u32, seed: u64) -> Result<()> {
    let mut failed = 0;
    for r in verify::verify_all(cases, seed) {
        match &r.failure {
            None => println!("PASS {} ({} cases)", r.name, r.cases),
            Some(f) => {
                failed += 1;
                println!("FAIL {}: {f}", r.name);
            }
        }
    }
    if failed > 0 {
        bail!("{failed} invariant check(s) failed");
    }
    Ok(())
}

fn single_runs(cfg: &SimConfig, policies: &[QueuePolicy], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for &policy in policies {
        let mut run = Simulation::new(cfg, policy)?.with_trace().run()?;
        let point = summarize(cfg, &mut run);
        for r in &point.rows {
            println!(
                "{policy} class {} p99={} ms slo={} ms met={} miss={:.4}",
                r.class,
                r.p99_us.map_or("n/a".into(), |v| format!("{:.2}", v as f64 / 1e3)),
                r.slo_us as f64 / 1e3,
                r.met,
                r.deadline_miss_frac
            );
        }
        rows.extend(point.rows);
        let path = out.join(format!("trace_{policy}.csv"));
        report::write_trace(BufWriter::new(fs::File::create(&path)?), &run.trace)?;
        println!("wrote {}", path.display());
    }
    let path = out.join(RESULTS_FILE);
    report::write_results(BufWriter::new(fs::File::create(&path)?), &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn search(cfg: &SimConfig, policies: &[QueuePolicy], out: &Path) -> Result<()> {
    let mut sweeps = Vec::new();
    for &policy in policies {
        let s = sweep::max_sustainable_rate(cfg, policy)?;
        println!("{policy} max sustainable rate {:.2} q/s ({} points)", s.max_rate, s.points.len());
        sweeps.push(s);
    }
    for path in report::emit_report(out, &sweeps)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli)?;
    if cli.verify {
        return run_verify(cli.cases, cfg.seed);
    }
    let policies = policies(cli.policy);
    if cli.rate.is_some() {
        single_runs(&cfg, &policies, &cli.out)
    } else {
        search(&cfg, &policies, &cli.out)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
