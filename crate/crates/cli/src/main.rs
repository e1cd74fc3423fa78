use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use xmd_core::config::{parse_balance, RunConfig};
use xmd_core::experiment::{
    compare_jobs, gradcheck_instance, probe_model, results_csv, run_job, seed_list, sweep_jobs,
    GradcheckInstance, Job, JobResult,
};
use xmd_core::losses::Variant;
use xmd_core::matcore::io;
use xmd_core::synth::{self, generate_batch, NUSCENES_CLASSES};
use xmd_core::trainer::{self, checkpoint, load_checkpoint, MANIFEST_NAME};

#[derive(Parser)]
#[command(name = "xmd", version, about = "Semantically-tolerant, class-balanced contrastive distillation on synthetic scenes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `section.key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[arg(long = "k-percent", global = true)]
    k_percent: Option<f64>,
    #[arg(long = "alpha-min", global = true)]
    alpha_min: Option<f64>,
    #[arg(long, global = true)]
    balance: Option<Balance>,
    #[arg(long, global = true)]
    granularity: Option<GranularityArg>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Balance {
    On,
    Off,
    Paper,
    Conventional,
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Superpixel,
    Point,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    Alpha,
    K,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Check analytic gradients against central differences.
    Gradcheck {
        /// Random instances per variant and size.
        #[arg(long)]
        seeds: Option<usize>,
        /// Test hook: perturb one analytic gradient entry by this much.
        #[arg(long, hide = true)]
        corrupt: Option<f64>,
    },
    /// Write a synthetic batch and its diagnostics.
    Synth,
    /// Train one model; write the loss history, checkpoint and probe report.
    Train,
    /// Train the masking × balancing grid and probe every cell.
    Compare {
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Sweep α_min (similarity-weighted loss) and K (masked loss).
    Sweep {
        #[arg(long, value_enum, default_value = "both")]
        grid: Grid,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Probe a saved checkpoint.
    Probe {
        /// Directory holding `manifest.txt`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.set("run.seed", &s.to_string())?;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    if let Some(v) = c.variant {
        cfg.train.variant = v;
    }
    if let Some(k) = c.k_percent {
        cfg.train.similarity.k_percent = Some(k);
        cfg.compare_k_percent = k;
    }
    if let Some(a) = c.alpha_min {
        cfg.train.similarity.alpha_min = a;
    }
    if let Some(b) = c.balance {
        let name = match b {
            Balance::On => "on",
            Balance::Off => "off",
            Balance::Paper => "paper",
            Balance::Conventional => "conventional",
        };
        cfg.train.similarity.balance = parse_balance(name)?;
        if let Some(norm) = cfg.train.similarity.balance {
            cfg.compare_balance = norm;
        }
    }
    if let Some(g) = c.granularity {
        let name = match g {
            GranularityArg::Superpixel => "superpixel",
            GranularityArg::Point => "point",
        };
        cfg.set("scenario.granularity", name)?;
    }
    for kv in &c.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir, "config.txt", cfg.to_text())?;
    Ok(dir)
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("XMD_THREADS") {
        Ok(v) => v.trim().parse::<usize>().with_context(|| format!("XMD_THREADS={v:?}"))?,
        Err(_) => 0,
    };
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

fn class_names(cfg: &RunConfig) -> Option<&'static [&'static str]> {
    (cfg.scenario.num_classes == NUSCENES_CLASSES.len()).then_some(&NUSCENES_CLASSES[..])
}

fn gradcheck(cfg: &RunConfig, seeds: Option<usize>, corrupt: Option<f64>, restrict: bool) -> Result<bool> {
    let mut g = cfg.gradcheck.clone();
    if let Some(s) = seeds {
        g.seeds = s;
    }
    if let Some(c) = corrupt {
        g.corrupt = c;
    }
    if restrict {
        g.variants = vec![cfg.train.variant];
    }
    let mut tasks = Vec::new();
    for &v in &g.variants {
        for seed in 0..g.seeds as u64 {
            for &m in &g.sizes {
                tasks.push((v, seed, m));
            }
        }
    }
    let results: Vec<GradcheckInstance> = thread_pool()?.install(|| {
        tasks
            .par_iter()
            .map(|&(v, seed, m)| gradcheck_instance(&g, v, seed, m))
            .collect::<xmd_core::Result<_>>()
    })?;
    let mut ok = true;
    println!("variant,instances,max_loss_error,max_parameter_error,status");
    for &v in &g.variants {
        let mine: Vec<&GradcheckInstance> = results.iter().filter(|r| r.variant == v).collect();
        let le = mine.iter().map(|r| r.loss_error).fold(0.0, f64::max);
        let pe = mine.iter().map(|r| r.parameter_error).fold(0.0, f64::max);
        let pass = le < g.tolerance && pe < g.tolerance;
        ok &= pass;
        println!("{v},{},{le:.3e},{pe:.3e},{}", mine.len(), if pass { "ok" } else { "FAIL" });
    }
    for r in results.iter().filter(|r| r.max_error() >= g.tolerance) {
        eprintln!(
            "failed: variant={} seed={} m={} loss_error={:.3e} parameter_error={:.3e}",
            r.variant, r.seed, r.m, r.loss_error, r.parameter_error
        );
    }
    println!("checked {} instances", results.len());
    Ok(ok)
}

fn synth_cmd(cfg: &RunConfig) -> Result<()> {
    let dir = prepare_out(cfg)?;
    let batch = generate_batch(&cfg.scenario, 0)?;
    write(&dir, "features.xmd", io::to_bytes(&batch.data.features))?;
    write(&dir, "point_features.xmd", io::to_bytes(&batch.data.point_features))?;
    write(&dir, "labels.txt", synth::labels_to_text(&batch.class_labels))?;
    let groups: String = batch
        .data
        .pairs
        .point_groups()
        .iter()
        .map(|g| g.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ") + "\n")
        .collect();
    write(&dir, "point_groups.txt", groups)?;
    let d = synth::diagnostics(&batch, cfg.scenario.num_classes)?;
    let counts = d.class_counts.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
    let report = format!(
        "# schema=1 config_hash={}\ngroups = {}\npoints = {}\nfalse_negative_rate = {:.6}\nwithin_class_alpha = {:.6}\ncross_class_alpha = {:.6}\nclass_counts = {counts}\n",
        cfg.hash(),
        batch.class_labels.len(),
        batch.data.point_features.rows(),
        d.false_negative_rate,
        d.within_class_alpha,
        d.cross_class_alpha,
    );
    for w in cfg.scenario.warnings() {
        eprintln!("warning: {w}");
    }
    write(&dir, "diagnostics.txt", &report)?;
    print!("{report}");
    Ok(())
}

fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let dir = prepare_out(cfg)?;
    let outcome = trainer::train(&cfg.scenario, &cfg.train)?;
    write(&dir, "loss_history.csv", outcome.history_csv(cfg.train.variant, &cfg.hash()))?;
    let ck_dir = dir.join("checkpoint");
    fs::create_dir_all(&ck_dir)?;
    let ck = checkpoint(&outcome.model);
    write(&ck_dir, MANIFEST_NAME, &ck.manifest)?;
    for (name, bytes) in &ck.files {
        write(&ck_dir, name, bytes)?;
    }
    let (report, u, t) = probe_model(&outcome.model, &cfg.scenario, &cfg.eval)?;
    write(&dir, "probe.json", report.to_json(class_names(cfg)))?;
    let first = outcome.history.first().map_or(f64::NAN, |r| r.loss);
    let last = outcome.history.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "variant={} steps={} initial_loss={first:.6} final_loss={last:.6} probe_overall={:.4} uniformity={u:.4} tolerance={t:.4}",
        cfg.train.variant,
        outcome.history.len(),
        report.overall_accuracy
    );
    Ok(())
}

fn run_grid(cfg: &RunConfig, jobs: Vec<Job>, file: &str) -> Result<bool> {
    let dir = prepare_out(cfg)?;
    let results: Vec<JobResult> =
        thread_pool()?.install(|| jobs.par_iter().map(|j| run_job(j, &cfg.eval)).collect());
    let csv = results_csv(&cfg.hash(), &results);
    write(&dir, file, &csv)?;
    print!("{csv}");
    let failed = results.iter().filter(|r| r.metrics.is_err()).count();
    if failed > 0 {
        eprintln!("{failed} of {} runs failed", results.len());
    }
    Ok(failed == 0)
}

fn probe_cmd(cfg: &RunConfig, ck_dir: &Path) -> Result<()> {
    let manifest_path = ck_dir.join(MANIFEST_NAME);
    let manifest = fs::read_to_string(&manifest_path)
        .with_context(|| format!("reading {}", manifest_path.display()))?;
    let model = load_checkpoint(&manifest, |f| {
        fs::read(ck_dir.join(f)).map_err(|e| xmd_core::Error::Format(format!("{}: {e}", ck_dir.join(f).display())))
    })?;
    let (report, u, t) = probe_model(&model, &cfg.scenario, &cfg.eval)?;
    let json = report.to_json(class_names(cfg));
    fs::create_dir_all(&cfg.output_dir)?;
    write(&cfg.output_dir, "probe.json", &json)?;
    println!("{json}");
    println!("uniformity = {u:.6}\ntolerance = {t:.6}");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Gradcheck { seeds, corrupt } => gradcheck(&cfg, seeds, corrupt, cli.common.variant.is_some()),
        Command::Synth => synth_cmd(&cfg).map(|_| true),
        Command::Train => train_cmd(&cfg).map(|_| true),
        Command::Compare { seeds } => {
            let seeds = seed_list(cfg.seed, seeds.unwrap_or(cfg.seeds));
            let jobs = compare_jobs(&cfg.scenario, &cfg.train, &seeds, cfg.compare_k_percent, cfg.compare_balance);
            run_grid(&cfg, jobs, "compare.csv")
        }
        Command::Sweep { grid, seeds } => {
            let seeds = seed_list(cfg.seed, seeds.unwrap_or(cfg.seeds));
            let (a, k): (&[f64], &[f64]) = match grid {
                Grid::Alpha => (&cfg.sweep_alpha_min, &[]),
                Grid::K => (&[], &cfg.sweep_k_percent),
                Grid::Both => (&cfg.sweep_alpha_min, &cfg.sweep_k_percent),
            };
            if a.is_empty() && k.is_empty() {
                bail!("sweep grid is empty");
            }
            run_grid(&cfg, sweep_jobs(&cfg.scenario, &cfg.train, &seeds, a, k), "sweep.csv")
        }
        Command::Probe { checkpoint } => probe_cmd(&cfg, &checkpoint).map(|_| true),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
