//! Run configuration: flat `section.key = value` lines, `#` comments.
//!
//! ```text
//! # nuScenes-like imbalance, 5 seeds
//! run.seed = 3
//! run.seeds = 5
//! scenario.preset = nuscenes
//! train.variant = st
//! train.k_percent = 1
//! train.balance = paper
//! ```
//!
//! [`RunConfig::to_text`] writes every key in a fixed order; its hash tags
//! output files.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::experiment::{EvalSettings, GradcheckConfig};
use crate::rng::fnv1a;
use crate::similarity::VoteNormalization;
use crate::synth::{Scenario, SynthGranularity};
use crate::trainer::{Activation, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub experiment_id: String,
    pub output_dir: PathBuf,
    /// Seeds per compare/sweep cell, starting at `seed`.
    pub seeds: usize,
    pub scenario: Scenario,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    /// Masking strength of the compare grid's masked cells.
    pub compare_k_percent: f64,
    pub compare_balance: VoteNormalization,
    pub sweep_alpha_min: Vec<f64>,
    pub sweep_k_percent: Vec<f64>,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            experiment_id: "default".into(),
            output_dir: PathBuf::from("out"),
            seeds: 5,
            scenario: Scenario::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            compare_k_percent: 1.0,
            compare_balance: VoteNormalization::Paper,
            sweep_alpha_min: vec![0.0, 0.2, 0.5, 0.8],
            sweep_k_percent: vec![1.0, 5.0, 10.0],
            gradcheck: GradcheckConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::param(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::param(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

/// A number, or `none`/`off`.
fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value {
        "none" | "off" => Ok(None),
        v => parse_value(key, v).map(Some),
    }
}

/// `off`, `on` (paper), `paper` or `conventional`.
pub fn parse_balance(value: &str) -> Result<Option<VoteNormalization>> {
    match value {
        "off" | "none" => Ok(None),
        "on" | "paper" => Ok(Some(VoteNormalization::Paper)),
        "conventional" => Ok(Some(VoteNormalization::Conventional)),
        other => Err(Error::param(format!(
            "balance must be on, off, paper or conventional, got {other:?}"
        ))),
    }
}

fn balance_name(b: Option<VoteNormalization>) -> &'static str {
    match b {
        None => "off",
        Some(VoteNormalization::Paper) => "paper",
        Some(VoteNormalization::Conventional) => "conventional",
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "none".into(), |x| x.to_string())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            entries.push((n + 1, key.trim().to_string(), value.trim().to_string()));
        }
        let mut cfg = Self::default();
        // presets replace the whole scenario, so they go first
        let first = |k: &str| entries.iter().filter(|e| e.1 == k).cloned().collect::<Vec<_>>();
        let early = [first("scenario.num_classes"), first("scenario.preset")].concat();
        for (line, key, value) in early.iter().chain(entries.iter().filter(|e| {
            e.1 != "scenario.preset" && e.1 != "scenario.num_classes"
        })) {
            cfg.set(key, value).map_err(|e| Error::Parse {
                line: *line,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.scenario;
        let t = &mut self.train;
        match key {
            "run.seed" => {
                self.seed = parse_value(key, value)?;
                self.reseed();
            }
            "run.id" => self.experiment_id = value.to_string(),
            "run.output_dir" => self.output_dir = PathBuf::from(value),
            "run.seeds" => self.seeds = parse_value(key, value)?,

            "scenario.preset" => {
                let n = s.num_classes;
                *s = match value {
                    "nuscenes" => Scenario::nuscenes_like(self.seed),
                    "balanced" => Scenario::balanced(n, self.seed),
                    other => return Err(Error::param(format!("unknown preset {other:?}"))),
                };
            }
            "scenario.num_classes" => {
                s.num_classes = parse_value(key, value)?;
                if s.class_proportions.len() != s.num_classes {
                    s.class_proportions = vec![1.0 / s.num_classes as f64; s.num_classes];
                }
            }
            "scenario.proportions" => {
                s.class_proportions = parse_list(key, value)?;
                s.num_classes = s.class_proportions.len();
            }
            "scenario.feature_dim" => s.feature_dim = parse_value(key, value)?,
            "scenario.point_dim" => s.point_dim = parse_value(key, value)?,
            "scenario.separation" => s.cluster_separation = parse_value(key, value)?,
            "scenario.spread" => s.within_class_spread = parse_value(key, value)?,
            "scenario.shared" => s.shared_component = parse_value(key, value)?,
            "scenario.point_noise" => s.point_noise = parse_value(key, value)?,
            "scenario.superpixels" => s.superpixels_per_batch = parse_value(key, value)?,
            "scenario.points_min" => s.points_per_superpixel.0 = parse_value(key, value)?,
            "scenario.points_max" => s.points_per_superpixel.1 = parse_value(key, value)?,
            "scenario.granularity" => {
                s.granularity = match value {
                    "superpixel" => SynthGranularity::Superpixel,
                    "point" => match s.granularity {
                        SynthGranularity::Point { cap } => SynthGranularity::Point { cap },
                        SynthGranularity::Superpixel => SynthGranularity::Point { cap: None },
                    },
                    other => return Err(Error::param(format!("unknown granularity {other:?}"))),
                }
            }
            "scenario.pair_cap" => {
                let cap = parse_optional(key, value)?;
                s.granularity = SynthGranularity::Point { cap };
            }

            "train.epochs" => t.epochs = parse_value(key, value)?,
            "train.steps_per_epoch" => t.steps_per_epoch = parse_value(key, value)?,
            "train.batch_size" => t.batch_size = parse_value(key, value)?,
            "train.scenes" => t.scenes = parse_value(key, value)?,
            "train.lr0" => t.sgd.lr0 = parse_value(key, value)?,
            "train.momentum" => t.sgd.momentum = parse_value(key, value)?,
            "train.dampening" => t.sgd.dampening = parse_value(key, value)?,
            "train.weight_decay" => t.sgd.weight_decay = parse_value(key, value)?,
            "train.temperature" => t.temperature = parse_value(key, value)?,
            "train.variant" => t.variant = parse_value(key, value)?,
            "train.k_percent" => t.similarity.k_percent = parse_optional(key, value)?,
            "train.alpha_min" => t.similarity.alpha_min = parse_value(key, value)?,
            "train.rescale_alpha" => t.similarity.rescale_alpha = parse_bool(key, value)?,
            "train.balance" => t.similarity.balance = parse_balance(value)?,
            "train.rescale_votes" => t.similarity.rescale_votes = parse_bool(key, value)?,
            "train.hidden_dim" => t.hidden_dim = parse_value(key, value)?,
            "train.embed_dim" => t.embed_dim = parse_value(key, value)?,
            "train.activation" => t.activation = parse_value(key, value)?,

            "eval.per_class" => self.eval.per_class = parse_value(key, value)?,
            "eval.ridge_lambda" => self.eval.probe.ridge_lambda = parse_value(key, value)?,
            "eval.test_fraction" => self.eval.probe.test_fraction = parse_value(key, value)?,
            "eval.minority_threshold" => {
                self.eval.probe.minority_threshold = parse_value(key, value)?
            }

            "compare.k_percent" => self.compare_k_percent = parse_value(key, value)?,
            "compare.balance" => {
                self.compare_balance = parse_balance(value)?
                    .ok_or_else(|| Error::param("compare.balance must name a normalization"))?
            }
            "sweep.alpha_min" => self.sweep_alpha_min = parse_list(key, value)?,
            "sweep.k_percent" => self.sweep_k_percent = parse_list(key, value)?,

            "gradcheck.variants" => self.gradcheck.variants = parse_list(key, value)?,
            "gradcheck.seeds" => self.gradcheck.seeds = parse_value(key, value)?,
            "gradcheck.sizes" => self.gradcheck.sizes = parse_list(key, value)?,
            "gradcheck.embed_dim" => self.gradcheck.embed_dim = parse_value(key, value)?,
            "gradcheck.epsilon" => self.gradcheck.epsilon = parse_value(key, value)?,
            "gradcheck.tolerance" => self.gradcheck.tolerance = parse_value(key, value)?,
            "gradcheck.temperature" => self.gradcheck.temperature = parse_value(key, value)?,

            other => return Err(Error::param(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    fn reseed(&mut self) {
        self.scenario.seed = self.seed;
        self.train.seed = self.seed;
        self.eval.probe.split_seed = self.seed;
        self.gradcheck.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment_id.trim().is_empty() {
            return Err(Error::param("run.id must be nonempty"));
        }
        if self.seeds == 0 {
            return Err(Error::param("run.seeds must be at least 1"));
        }
        if self.sweep_alpha_min.is_empty() || self.sweep_k_percent.is_empty() {
            return Err(Error::param("sweep grids must be nonempty"));
        }
        self.scenario.validate()?;
        self.train.validate()
    }

    /// Every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let s = &self.scenario;
        let t = &self.train;
        let (g, cap) = match s.granularity {
            SynthGranularity::Superpixel => ("superpixel", None),
            SynthGranularity::Point { cap } => ("point", cap),
        };
        let act = match t.activation {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
        };
        let lines: Vec<(&str, String)> = vec![
            ("run.seed", self.seed.to_string()),
            ("run.id", self.experiment_id.clone()),
            ("run.output_dir", self.output_dir.display().to_string()),
            ("run.seeds", self.seeds.to_string()),
            ("scenario.proportions", join(&s.class_proportions)),
            ("scenario.feature_dim", s.feature_dim.to_string()),
            ("scenario.point_dim", s.point_dim.to_string()),
            ("scenario.separation", s.cluster_separation.to_string()),
            ("scenario.spread", s.within_class_spread.to_string()),
            ("scenario.shared", s.shared_component.to_string()),
            ("scenario.point_noise", s.point_noise.to_string()),
            ("scenario.superpixels", s.superpixels_per_batch.to_string()),
            ("scenario.points_min", s.points_per_superpixel.0.to_string()),
            ("scenario.points_max", s.points_per_superpixel.1.to_string()),
            ("scenario.granularity", g.to_string()),
            ("scenario.pair_cap", opt(cap)),
            ("train.epochs", t.epochs.to_string()),
            ("train.steps_per_epoch", t.steps_per_epoch.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.scenes", t.scenes.to_string()),
            ("train.lr0", t.sgd.lr0.to_string()),
            ("train.momentum", t.sgd.momentum.to_string()),
            ("train.dampening", t.sgd.dampening.to_string()),
            ("train.weight_decay", t.sgd.weight_decay.to_string()),
            ("train.temperature", t.temperature.to_string()),
            ("train.variant", t.variant.to_string()),
            ("train.k_percent", opt(t.similarity.k_percent)),
            ("train.alpha_min", t.similarity.alpha_min.to_string()),
            ("train.rescale_alpha", t.similarity.rescale_alpha.to_string()),
            ("train.balance", balance_name(t.similarity.balance).into()),
            ("train.rescale_votes", t.similarity.rescale_votes.to_string()),
            ("train.hidden_dim", t.hidden_dim.to_string()),
            ("train.embed_dim", t.embed_dim.to_string()),
            ("train.activation", act.into()),
            ("eval.per_class", self.eval.per_class.to_string()),
            ("eval.ridge_lambda", self.eval.probe.ridge_lambda.to_string()),
            ("eval.test_fraction", self.eval.probe.test_fraction.to_string()),
            ("eval.minority_threshold", self.eval.probe.minority_threshold.to_string()),
            ("compare.k_percent", self.compare_k_percent.to_string()),
            ("compare.balance", balance_name(Some(self.compare_balance)).into()),
            ("sweep.alpha_min", join(&self.sweep_alpha_min)),
            ("sweep.k_percent", join(&self.sweep_k_percent)),
            ("gradcheck.variants", join(&self.gradcheck.variants)),
            ("gradcheck.seeds", self.gradcheck.seeds.to_string()),
            ("gradcheck.sizes", join(&self.gradcheck.sizes)),
            ("gradcheck.embed_dim", self.gradcheck.embed_dim.to_string()),
            ("gradcheck.epsilon", self.gradcheck.epsilon.to_string()),
            ("gradcheck.tolerance", self.gradcheck.tolerance.to_string()),
            ("gradcheck.temperature", self.gradcheck.temperature.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in lines {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// 16 hex digits identifying the resolved configuration.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a(self.to_text().as_bytes()))
    }
}
