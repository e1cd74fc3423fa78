//! Experiment drivers shared by the CLI and the tests: the gradient-check
//! suite, train-then-probe runs, and the compare/sweep grids.
//!
//! Grid runs are described as independent [`Job`]s so callers can execute
//! them in any order (or in parallel) and still emit rows in job order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::correspond::{GroupKind, PairSet};
use crate::error::{Error, Result};
use crate::evaluate::{linear_probe, tolerance, uniformity, ProbeReport, ProbeSettings};
use crate::losses::{self, LossConfig, LossKind, Variant};
use crate::matcore::{l2_normalize_rows, Matrix};
use crate::rng::substream;
use crate::similarity::{SimilaritySettings, VoteNormalization};
use crate::synth::{generate_with, Geometry, Scenario, SyntheticBatch, TrainingBatch};
use crate::trainer::{self, forward, Activation, Model, TrainConfig, TrainOutcome};

// ---------------------------------------------------------------- gradcheck

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub variants: Vec<Variant>,
    pub seeds: usize,
    pub sizes: Vec<usize>,
    pub embed_dim: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub temperature: f64,
    /// Added to one analytic gradient entry; nonzero only to prove the
    /// harness can fail.
    pub corrupt: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            seeds: 10,
            sizes: vec![4, 8, 16],
            embed_dim: 3,
            epsilon: 1e-5,
            tolerance: 1e-6,
            temperature: 0.1,
            corrupt: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckInstance {
    pub variant: Variant,
    pub seed: u64,
    pub m: usize,
    /// Error of ∂L/∂Q, ∂L/∂K (through row normalization).
    pub loss_error: f64,
    /// Error of the trainer's parameter gradients (through mean pooling).
    pub parameter_error: f64,
}

impl GradcheckInstance {
    pub fn max_error(&self) -> f64 {
        self.loss_error.max(self.parameter_error)
    }
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Loss for a random gradient-check instance: α from random features, a
/// 25% KNN mask and `Paper`-normalized balance weights.
fn instance_kind(features: &Matrix, variant: Variant) -> Result<LossKind> {
    let settings = SimilaritySettings {
        k_percent: Some(25.0),
        rescale_alpha: true,
        balance: Some(VoteNormalization::Paper),
        ..SimilaritySettings::default()
    };
    trainer::loss_kind(features, variant, &settings)
}

/// Random pooled batch: `m` groups of 1–3 points each.
fn instance_batch(m: usize, rng: &mut ChaCha8Rng) -> Result<TrainingBatch> {
    let mut groups = Vec::with_capacity(m);
    let mut next = 0;
    for _ in 0..m {
        let size = rng.random_range(1..=3);
        groups.push((next..next + size).collect());
        next += size;
    }
    Ok(TrainingBatch {
        features: uniform(m, 5, rng),
        point_features: uniform(next, 4, rng),
        pairs: PairSet::new(groups, (0..m).map(|i| vec![i]).collect(), GroupKind::Superpixel)?,
    })
}

pub fn gradcheck_instance(cfg: &GradcheckConfig, variant: Variant, seed: u64, m: usize) -> Result<GradcheckInstance> {
    let mut rng = substream(cfg.seed, "gradcheck", seed * 1000 + m as u64);
    let loss_cfg = LossConfig::with_temperature(cfg.temperature);
    let q = uniform(m, cfg.embed_dim, &mut rng);
    let k = uniform(m, cfg.embed_dim, &mut rng);
    let features = uniform(m, 5, &mut rng);
    let kind = instance_kind(&features, variant)?;
    let analytic = losses::compute(&q, &k, &kind, &loss_cfg)?;
    let mut grad_q = analytic.grad_q;
    grad_q.as_mut_slice()[0] += cfg.corrupt;
    let loss_error =
        losses::max_gradient_error(&q, &k, &kind, &loss_cfg, cfg.epsilon, &grad_q, &analytic.grad_k)?;

    let batch = instance_batch(m, &mut rng)?;
    let kind = instance_kind(&batch.features, variant)?;
    let mut model = Model::init(4, 3, 5, cfg.embed_dim, Activation::Tanh, rng.random());
    // head biases of magnitude 1–2 keep pooled rows away from zero norm,
    // where central differences lose accuracy to curvature
    for b in model.head_p.bias.iter_mut().chain(model.head_i.bias.iter_mut()) {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        *b = sign * rng.random_range(1.0..2.0);
    }
    let parameter_error =
        trainer::parameter_gradient_error(&model, &batch, &kind, &loss_cfg, cfg.epsilon, cfg.corrupt)?;
    Ok(GradcheckInstance {
        variant,
        seed,
        m,
        loss_error,
        parameter_error,
    })
}

/// Every `(variant, seed, size)` instance, in that nesting order.
pub fn gradcheck_suite(cfg: &GradcheckConfig) -> Result<Vec<GradcheckInstance>> {
    let mut out = Vec::new();
    for &variant in &cfg.variants {
        for seed in 0..cfg.seeds as u64 {
            for &m in &cfg.sizes {
                out.push(gradcheck_instance(cfg, variant, seed, m)?);
            }
        }
    }
    Ok(out)
}

// ------------------------------------------------------------ train + probe

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    /// Superpixels per class in the held-out evaluation batch.
    pub per_class: usize,
    pub probe: ProbeSettings,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            per_class: 60,
            probe: ProbeSettings::default(),
        }
    }
}

/// Class-balanced batch from the scenario's geometry, disjoint from the
/// training stream.
pub fn evaluation_batch(scenario: &Scenario, geometry: &Geometry, per_class: usize) -> Result<SyntheticBatch> {
    let mut s = scenario.clone();
    s.superpixels_per_batch = per_class * s.num_classes;
    let uniform = vec![1.0 / s.num_classes as f64; s.num_classes];
    generate_with(&s, geometry, &uniform, 0, "eval")
}

/// ℓ2-normalized pooled point embeddings.
pub fn embed(model: &Model, batch: &TrainingBatch) -> Result<Matrix> {
    let (q, _, _) = forward(batch, model)?;
    Ok(l2_normalize_rows(&q, 1e-12))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub overall: f64,
    pub minority: Option<f64>,
    pub majority: Option<f64>,
    pub uniformity: f64,
    pub tolerance: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub report: ProbeReport,
    pub metrics: Metrics,
}

/// Probes a trained model on the scenario's evaluation batch.
pub fn probe_model(model: &Model, scenario: &Scenario, eval: &EvalSettings) -> Result<(ProbeReport, f64, f64)> {
    let mut s = scenario.clone();
    // evaluation is always superpixel-level
    s.granularity = crate::synth::SynthGranularity::Superpixel;
    let geometry = Geometry::new(&s)?;
    let batch = evaluation_batch(&s, &geometry, eval.per_class)?;
    let emb = embed(model, &batch.data)?;
    let mut report = linear_probe(&emb, &batch.class_labels, &eval.probe)?;
    report.assign_groups(&s.class_proportions, eval.probe.minority_threshold);
    let u = uniformity(&emb)?;
    let t = tolerance(&emb, &batch.class_labels)?;
    Ok((report, u, t))
}

pub fn train_and_probe(scenario: &Scenario, train: &TrainConfig, eval: &EvalSettings) -> Result<RunResult> {
    let outcome = trainer::train(scenario, train)?;
    let (report, u, t) = probe_model(&outcome.model, scenario, eval)?;
    let loss_at = |i: usize| outcome.history.get(i).map_or(f64::NAN, |r| r.loss);
    let metrics = Metrics {
        overall: report.overall_accuracy,
        minority: report.minority_mean,
        majority: report.majority_mean,
        uniformity: u,
        tolerance: t,
        initial_loss: loss_at(0),
        final_loss: loss_at(outcome.history.len().wrapping_sub(1)),
    };
    Ok(RunResult {
        outcome,
        report,
        metrics,
    })
}

// ------------------------------------------------------------------- grids

/// One cell of the masking × balancing grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub masking: bool,
    pub balancing: bool,
}

impl Cell {
    pub const GRID: [Cell; 4] = [
        Cell { masking: false, balancing: false },
        Cell { masking: true, balancing: false },
        Cell { masking: false, balancing: true },
        Cell { masking: true, balancing: true },
    ];

    pub fn label(self) -> &'static str {
        match (self.masking, self.balancing) {
            (false, false) => "baseline",
            (true, false) => "masking",
            (false, true) => "balancing",
            (true, true) => "full",
        }
    }

    /// Loss variant and similarity settings for the cell.
    pub fn configure(self, base: &TrainConfig, k_percent: f64, balance: VoteNormalization) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.similarity.k_percent = self.masking.then_some(k_percent);
        cfg.similarity.balance = self.balancing.then_some(balance);
        cfg.variant = match (self.masking, self.balancing) {
            (false, false) => Variant::Slidr,
            (true, false) => Variant::Knn,
            _ => Variant::St,
        };
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum JobKind {
    Compare(Cell),
    AlphaMin(f64),
    KPercent(f64),
}

#[derive(Clone, Debug)]
pub struct Job {
    pub kind: JobKind,
    pub seed: u64,
    pub scenario: Scenario,
    pub train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct JobResult {
    pub job: Job,
    pub metrics: std::result::Result<Metrics, String>,
}

fn seeded(scenario: &Scenario, train: &TrainConfig, seed: u64) -> (Scenario, TrainConfig) {
    let mut s = scenario.clone();
    s.seed = seed;
    let mut t = train.clone();
    t.seed = seed;
    (s, t)
}

/// Seeds used by a multi-seed experiment starting at `base`.
pub fn seed_list(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

/// The four compare cells for each seed, grid-major.
pub fn compare_jobs(
    scenario: &Scenario,
    train: &TrainConfig,
    seeds: &[u64],
    k_percent: f64,
    balance: VoteNormalization,
) -> Vec<Job> {
    let mut jobs = Vec::new();
    for cell in Cell::GRID {
        for &seed in seeds {
            let (s, t) = seeded(scenario, &cell.configure(train, k_percent, balance), seed);
            jobs.push(Job { kind: JobKind::Compare(cell), seed, scenario: s, train: t });
        }
    }
    jobs
}

/// α_min grid with the similarity-weighted loss, then the K grid with the
/// KNN-masked loss.
pub fn sweep_jobs(
    scenario: &Scenario,
    train: &TrainConfig,
    seeds: &[u64],
    alpha_grid: &[f64],
    k_grid: &[f64],
) -> Vec<Job> {
    let mut jobs = Vec::new();
    for &a in alpha_grid {
        for &seed in seeds {
            let mut t = train.clone();
            t.variant = Variant::Alpha;
            t.similarity.alpha_min = a;
            let (s, t) = seeded(scenario, &t, seed);
            jobs.push(Job { kind: JobKind::AlphaMin(a), seed, scenario: s, train: t });
        }
    }
    for &k in k_grid {
        for &seed in seeds {
            let mut t = train.clone();
            t.variant = Variant::Knn;
            t.similarity.k_percent = Some(k);
            let (s, t) = seeded(scenario, &t, seed);
            jobs.push(Job { kind: JobKind::KPercent(k), seed, scenario: s, train: t });
        }
    }
    jobs
}

pub fn run_job(job: &Job, eval: &EvalSettings) -> JobResult {
    let mut eval = *eval;
    eval.probe.split_seed = job.seed;
    let metrics = train_and_probe(&job.scenario, &job.train, &eval)
        .map(|r| r.metrics)
        .map_err(|e| e.to_string());
    JobResult { job: job.clone(), metrics }
}

/// `max − min` of overall accuracy over `values` for one seed.
pub fn spread(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

// --------------------------------------------------------------------- CSV

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn metric_fields(r: &JobResult) -> (String, String) {
    match &r.metrics {
        Ok(m) => (
            "ok".into(),
            format!(
                "{:.6},{},{},{:.6},{:.6},{:.6},{:.6}",
                m.overall,
                opt(m.minority),
                opt(m.majority),
                m.uniformity,
                m.tolerance,
                m.initial_loss,
                m.final_loss
            ),
        ),
        Err(e) => (format!("error: {}", e.replace([',', '\n'], ";")), ",,,,,,".into()),
    }
}

pub const COMPARE_HEADER: &str =
    "cell,masking,balancing,seed,status,overall,minority,majority,uniformity,tolerance,initial_loss,final_loss";
pub const SWEEP_HEADER: &str =
    "sweep,value,seed,status,overall,minority,majority,uniformity,tolerance,initial_loss,final_loss";

/// Rows in job order under a `# config_hash=…` comment line.
pub fn results_csv(config_hash: &str, results: &[JobResult]) -> String {
    let compare = results.iter().all(|r| matches!(r.job.kind, JobKind::Compare(_)));
    let mut out = format!("# schema=1 config_hash={config_hash}\n");
    out.push_str(if compare { COMPARE_HEADER } else { SWEEP_HEADER });
    out.push('\n');
    for r in results {
        let (status, fields) = metric_fields(r);
        let prefix = match r.job.kind {
            JobKind::Compare(c) => format!("{},{},{}", c.label(), u8::from(c.masking), u8::from(c.balancing)),
            JobKind::AlphaMin(a) => format!("alpha_min,{a}"),
            JobKind::KPercent(k) => format!("k_percent,{k}"),
        };
        out.push_str(&format!("{prefix},{},{status},{fields}\n", r.job.seed));
    }
    out
}

/// Generic message for the first failed job, if any.
pub fn first_failure(results: &[JobResult]) -> Option<Error> {
    results.iter().find_map(|r| {
        r.metrics
            .as_ref()
            .err()
            .map(|e| Error::Format(format!("{:?} seed {}: {e}", r.job.kind, r.job.seed)))
    })
}
