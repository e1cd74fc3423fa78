//! Desk-scale distillation: a point encoder and two projection heads are
//! trained so pooled point embeddings match projected frozen superpixel
//! features under one of the contrastive losses.

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::{self, LossConfig, LossKind, Variant};
use crate::matcore::{axpy, BinaryMatrix, Matrix};
use crate::rng::substream;
use crate::similarity::{
    knn_mask, percent_to_k, rescale_unit_interval, superpixel_similarity, threshold_alpha,
    BalanceWeights, SimilarityBundle, SimilaritySettings,
};
use crate::synth::{generate_with, Geometry, Scenario, TrainingBatch};

/// `y = x W + b` with `W` stored `in_dim × out_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::dim(format!(
                "bias of length {} for {} outputs",
                bias.len(),
                weight.cols()
            )));
        }
        Ok(Self { weight, bias })
    }

    /// Uniform in `±1/√in_dim`, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Matrix::from_fn(in_dim, out_dim, |_, _| rng.random_range(-bound..bound));
        Self {
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weight: Matrix::identity(n),
            bias: vec![0.0; n],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight)?;
        y.add_row_vector(&self.bias)?;
        Ok(y)
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Identity,
    Tanh,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" | "none" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::param(format!("unknown activation {other:?}"))),
        }
    }
}

/// Point encoder followed by the point projection head, plus the image
/// projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: LinearHead,
    pub activation: Activation,
    pub head_p: LinearHead,
    pub head_i: LinearHead,
}

pub const TENSOR_NAMES: [&str; 6] = [
    "encoder.weight",
    "encoder.bias",
    "head_p.weight",
    "head_p.bias",
    "head_i.weight",
    "head_i.bias",
];

impl Model {
    pub fn init(
        point_dim: usize,
        hidden_dim: usize,
        feature_dim: usize,
        embed_dim: usize,
        activation: Activation,
        seed: u64,
    ) -> Self {
        let mut rng = substream(seed, "init", 0);
        Self {
            encoder: LinearHead::init(point_dim, hidden_dim, &mut rng),
            activation,
            head_p: LinearHead::init(hidden_dim, embed_dim, &mut rng),
            head_i: LinearHead::init(feature_dim, embed_dim, &mut rng),
        }
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.encoder.weight.as_mut_slice(),
            &mut self.encoder.bias,
            self.head_p.weight.as_mut_slice(),
            &mut self.head_p.bias,
            self.head_i.weight.as_mut_slice(),
            &mut self.head_i.bias,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.head_p.is_finite() && self.head_i.is_finite()
    }

    pub fn num_parameters(&self) -> usize {
        [&self.encoder, &self.head_p, &self.head_i]
            .iter()
            .map(|h| h.weight.as_slice().len() + h.bias.len())
            .sum()
    }

    /// Named tensors in checkpoint order; biases are `1 × n`.
    pub fn tensors(&self) -> Vec<(&'static str, Matrix)> {
        let bias = |b: &[f64]| Matrix::new(1, b.len(), b.to_vec()).expect("row vector");
        vec![
            (TENSOR_NAMES[0], self.encoder.weight.clone()),
            (TENSOR_NAMES[1], bias(&self.encoder.bias)),
            (TENSOR_NAMES[2], self.head_p.weight.clone()),
            (TENSOR_NAMES[3], bias(&self.head_p.bias)),
            (TENSOR_NAMES[4], self.head_i.weight.clone()),
            (TENSOR_NAMES[5], bias(&self.head_i.bias)),
        ]
    }

    pub fn from_tensors(tensors: Vec<Matrix>, activation: Activation) -> Result<Self> {
        let [ew, eb, pw, pb, iw, ib]: [Matrix; 6] = tensors
            .try_into()
            .map_err(|v: Vec<Matrix>| Error::Format(format!("expected 6 tensors, got {}", v.len())))?;
        let model = Self {
            encoder: LinearHead::new(ew, eb.into_vec())?,
            activation,
            head_p: LinearHead::new(pw, pb.into_vec())?,
            head_i: LinearHead::new(iw, ib.into_vec())?,
        };
        if model.encoder.out_dim() != model.head_p.in_dim()
            || model.head_p.out_dim() != model.head_i.out_dim()
        {
            return Err(Error::dim("checkpoint tensors do not chain"));
        }
        Ok(model)
    }
}

/// Serialized model: a manifest plus one binary matrix file per tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: String,
    pub files: Vec<(String, Vec<u8>)>,
}

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Manifest lines are `name rows cols file`, after an `activation` line.
pub fn checkpoint(model: &Model) -> Checkpoint {
    let act = match model.activation {
        Activation::Identity => "identity",
        Activation::Tanh => "tanh",
    };
    let mut manifest = format!("# xmd checkpoint\nactivation {act}\n");
    let mut files = Vec::new();
    for (name, t) in model.tensors() {
        let file = format!("{name}.xmd");
        manifest.push_str(&format!("{name} {} {} {file}\n", t.rows(), t.cols()));
        files.push((file, crate::matcore::io::to_bytes(&t)));
    }
    Checkpoint { manifest, files }
}

/// Rebuilds a model from a manifest, fetching tensor files through `read`.
pub fn load_checkpoint(manifest: &str, mut read: impl FnMut(&str) -> Result<Vec<u8>>) -> Result<Model> {
    let mut activation = None;
    let mut tensors = Vec::new();
    for (n, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: String| Error::Parse { line: n + 1, msg };
        match parts.as_slice() {
            ["activation", a] => activation = Some(a.parse::<Activation>()?),
            [name, rows, cols, file] => {
                let expected = TENSOR_NAMES.get(tensors.len()).copied();
                if expected != Some(*name) {
                    return Err(bad(format!("expected tensor {expected:?}, found {name}")));
                }
                let t = crate::matcore::io::from_bytes(&read(file)?)?;
                let shape = (
                    rows.parse().map_err(|_| bad(format!("bad row count {rows}")))?,
                    cols.parse().map_err(|_| bad(format!("bad column count {cols}")))?,
                );
                if t.shape() != shape {
                    return Err(bad(format!("{name} is {:?}, manifest says {shape:?}", t.shape())));
                }
                tensors.push(t);
            }
            _ => return Err(bad(format!("unrecognized manifest line {line:?}"))),
        }
    }
    Model::from_tensors(tensors, activation.unwrap_or_default())
}

/// Intermediates kept for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    points: Matrix,
    hidden: Matrix,
    features: Matrix,
    point_groups: Vec<Vec<usize>>,
    pixel_groups: Vec<Vec<usize>>,
    num_points: usize,
    num_pixels: usize,
}

/// Computes pooled superpoint embeddings `Q` and superpixel embeddings `K`.
pub fn forward(batch: &TrainingBatch, model: &Model) -> Result<(Matrix, Matrix, ForwardCache)> {
    let mut hidden = model.encoder.forward(&batch.point_features)?;
    if model.activation == Activation::Tanh {
        hidden.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
    }
    let point_emb = model.head_p.forward(&hidden)?;
    let pixel_emb = model.head_i.forward(&batch.features)?;
    let (q, k) = crate::correspond::pool_pair_embeddings(&point_emb, &pixel_emb, &batch.pairs)?;
    let cache = ForwardCache {
        points: batch.point_features.clone(),
        hidden,
        features: batch.features.clone(),
        point_groups: batch.pairs.point_groups().to_vec(),
        pixel_groups: batch.pairs.pixel_groups().to_vec(),
        num_points: batch.point_features.rows(),
        num_pixels: batch.features.rows(),
    };
    Ok((q, k, cache))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub encoder: HeadGrad,
    pub head_p: HeadGrad,
    pub head_i: HeadGrad,
}

impl Gradients {
    fn slices(&self) -> [&[f64]; 6] {
        [
            self.encoder.weight.as_slice(),
            &self.encoder.bias,
            self.head_p.weight.as_slice(),
            &self.head_p.bias,
            self.head_i.weight.as_slice(),
            &self.head_i.bias,
        ]
    }

    /// All gradient entries in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

/// Spreads each group's gradient evenly over its members.
fn unpool(grad: &Matrix, groups: &[Vec<usize>], rows: usize) -> Matrix {
    let mut out = Matrix::zeros(rows, grad.cols());
    for (g, members) in groups.iter().enumerate() {
        let share = 1.0 / members.len() as f64;
        for &r in members {
            axpy(share, grad.row(g), out.row_mut(r));
        }
    }
    out
}

fn head_grad(input: &Matrix, grad_out: &Matrix) -> Result<HeadGrad> {
    Ok(HeadGrad {
        weight: input.t_matmul(grad_out)?,
        bias: grad_out.column_sums(),
    })
}

/// Chain rule from `∂L/∂Q`, `∂L/∂K` back to every parameter.
pub fn backward(
    model: &Model,
    cache: &ForwardCache,
    grad_q: &Matrix,
    grad_k: &Matrix,
) -> Result<Gradients> {
    let d_point_emb = unpool(grad_q, &cache.point_groups, cache.num_points);
    let d_pixel_emb = unpool(grad_k, &cache.pixel_groups, cache.num_pixels);
    let head_p = head_grad(&cache.hidden, &d_point_emb)?;
    let head_i = head_grad(&cache.features, &d_pixel_emb)?;
    let mut d_hidden = d_point_emb.matmul_t(&model.head_p.weight)?;
    if model.activation == Activation::Tanh {
        for (d, h) in d_hidden
            .as_mut_slice()
            .iter_mut()
            .zip(cache.hidden.as_slice())
        {
            *d *= 1.0 - h * h;
        }
    }
    let encoder = head_grad(&cache.points, &d_hidden)?;
    Ok(Gradients {
        encoder,
        head_p,
        head_i,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub dampening: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr0: 0.5,
            momentum: 0.9,
            dampening: 0.1,
            weight_decay: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0) {
            return Err(Error::param("lr0 must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.dampening) {
            return Err(Error::param("momentum and dampening must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::param("weight decay must be nonnegative"));
        }
        Ok(())
    }
}

/// `lr0 · ½ (1 + cos(π t / total))`.
pub fn cosine_lr(lr0: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

/// Momentum buffers, zero-initialized, one per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    buffers: Vec<Vec<f64>>,
}

impl SgdState {
    /// One update of a flat parameter slice `index`:
    /// `b ← μ b + (1 − d)(g + λ p)`, `p ← p − lr b`.
    pub fn update(&mut self, index: usize, params: &mut [f64], grads: &[f64], lr: f64, cfg: &SgdConfig) {
        if self.buffers.len() <= index {
            self.buffers.resize(index + 1, Vec::new());
        }
        let buf = &mut self.buffers[index];
        if buf.len() != params.len() {
            *buf = vec![0.0; params.len()];
        }
        for ((p, &g), b) in params.iter_mut().zip(grads).zip(buf.iter_mut()) {
            let d = g + cfg.weight_decay * *p;
            *b = cfg.momentum * *b + (1.0 - cfg.dampening) * d;
            *p -= lr * *b;
        }
    }
}

/// Applies one scheduled SGD step to every parameter; returns the rate used.
pub fn sgd_step(
    model: &mut Model,
    grads: &Gradients,
    state: &mut SgdState,
    step: usize,
    total_steps: usize,
    cfg: &SgdConfig,
) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::param(format!(
            "step {step} is past the schedule ({total_steps} steps)"
        )));
    }
    let lr = cosine_lr(cfg.lr0, step, total_steps);
    for (i, (p, g)) in model
        .slices_mut()
        .into_iter()
        .zip(grads.slices())
        .enumerate()
    {
        state.update(i, p, g, lr, cfg);
    }
    Ok(lr)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Superpixels per batch; overrides the scenario's value when nonzero.
    pub batch_size: usize,
    /// Distinct training scenes cycled through; 1 reuses one scene.
    pub scenes: usize,
    pub sgd: SgdConfig,
    pub temperature: f64,
    pub variant: Variant,
    pub similarity: SimilaritySettings,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            steps_per_epoch: 20,
            batch_size: 256,
            scenes: 1,
            sgd: SgdConfig::default(),
            temperature: LossConfig::SUPERPIXEL_TEMPERATURE,
            variant: Variant::Slidr,
            similarity: SimilaritySettings::default(),
            hidden_dim: 32,
            embed_dim: 16,
            activation: Activation::Identity,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if !(self.temperature > 0.0) {
            return Err(Error::param("temperature must be positive"));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::param("embedding and hidden widths must be positive"));
        }
        if self.scenes == 0 {
            return Err(Error::param("need at least one training scene"));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig::with_temperature(self.temperature)
    }

    /// The scenario actually sampled during training.
    pub fn training_scenario(&self, scenario: &Scenario) -> Scenario {
        let mut s = scenario.clone();
        if self.batch_size > 0 {
            s.superpixels_per_batch = self.batch_size;
        }
        s
    }
}

/// Builds the loss for one batch from its frozen features.
pub fn loss_kind(features: &Matrix, variant: Variant, settings: &SimilaritySettings) -> Result<LossKind> {
    let m = features.rows();
    Ok(match variant {
        Variant::Slidr => LossKind::Slidr,
        Variant::Alpha => {
            let mut alpha = superpixel_similarity(features)?;
            if settings.rescale_alpha {
                alpha = rescale_unit_interval(&alpha);
            }
            LossKind::Alpha(threshold_alpha(&alpha, settings.alpha_min))
        }
        Variant::Knn => {
            let alpha = superpixel_similarity(features)?;
            let k = percent_to_k(settings.k_percent.unwrap_or(0.0), m);
            LossKind::Knn(knn_mask(&alpha, k)?)
        }
        Variant::St => {
            let bundle = SimilarityBundle::compute(features, settings)?;
            let mask = bundle
                .knn_mask
                .unwrap_or_else(|| BinaryMatrix::off_diagonal(m));
            let BalanceWeights {
                weights,
                weight_sum,
                ..
            } = bundle.balance.unwrap_or(BalanceWeights {
                votes: vec![0.0; m],
                weights: vec![1.0; m],
                weight_sum: m as f64,
            });
            LossKind::St {
                mask,
                weights,
                weight_sum,
            }
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<StepRecord>,
}

impl TrainOutcome {
    /// CSV with columns `step,lr,loss,variant` under a config-hash comment.
    pub fn history_csv(&self, variant: Variant, config_hash: &str) -> String {
        let mut out = format!("# schema=1 config_hash={config_hash}\nstep,lr,loss,variant\n");
        for r in &self.history {
            out.push_str(&format!("{},{:?},{:?},{}\n", r.step, r.lr, r.loss, variant));
        }
        out
    }
}

/// Trains a freshly initialized model on scenes sampled from `scenario`.
pub fn train(scenario: &Scenario, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let scenario = cfg.training_scenario(scenario);
    let geometry = Geometry::new(&scenario)?;
    let model = Model::init(
        scenario.point_dim,
        cfg.hidden_dim,
        scenario.feature_dim,
        cfg.embed_dim,
        cfg.activation,
        cfg.seed,
    );
    let scenes = (0..cfg.scenes)
        .map(|i| {
            let b = generate_with(&scenario, &geometry, &scenario.class_proportions, i as u64, "batch")?;
            let kind = loss_kind(&b.data.features, cfg.variant, &cfg.similarity)?;
            Ok((b.data, kind))
        })
        .collect::<Result<Vec<_>>>()?;
    train_on(model, &scenes, cfg)
}

/// Runs the optimization loop over prepared `(batch, loss)` scenes.
pub fn train_on(
    mut model: Model,
    scenes: &[(TrainingBatch, LossKind)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if scenes.is_empty() {
        return Err(Error::param("need at least one training scene"));
    }
    let total = cfg.total_steps();
    let loss_cfg = cfg.loss_config();
    let mut state = SgdState::default();
    let mut history = Vec::with_capacity(total);
    for step in 0..total {
        let (batch, kind) = &scenes[step % scenes.len()];
        let (q, k, cache) = forward(batch, &model)?;
        let result = losses::compute(&q, &k, kind, &loss_cfg)?;
        if !result.value.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: result.value,
            });
        }
        let grads = backward(&model, &cache, &result.grad_q, &result.grad_k)?;
        let lr = sgd_step(&mut model, &grads, &mut state, step, total, &cfg.sgd)?;
        if !model.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: result.value,
            });
        }
        history.push(StepRecord {
            step,
            lr,
            loss: result.value,
        });
    }
    Ok(TrainOutcome { model, history })
}

/// Loss value as a function of the model, for finite-difference checks.
pub fn model_loss(
    model: &Model,
    batch: &TrainingBatch,
    kind: &LossKind,
    cfg: &LossConfig,
) -> Result<f64> {
    let (q, k, _) = forward(batch, model)?;
    losses::loss_value(&q, &k, kind, cfg)
}

/// Max relative error of [`backward`] against central differences on every
/// parameter. `corrupt` is added to the first analytic entry (negative
/// control for the checking harness).
pub fn parameter_gradient_error(
    model: &Model,
    batch: &TrainingBatch,
    kind: &LossKind,
    cfg: &LossConfig,
    epsilon: f64,
    corrupt: f64,
) -> Result<f64> {
    let (q, k, cache) = forward(batch, model)?;
    let result = losses::compute(&q, &k, kind, cfg)?;
    let mut analytic = backward(model, &cache, &result.grad_q, &result.grad_k)?.flatten();
    analytic[0] += corrupt;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut flat_index = 0usize;
    for t in 0..6 {
        let len = probe.slices_mut()[t].len();
        for i in 0..len {
            let orig = probe.slices_mut()[t][i];
            probe.slices_mut()[t][i] = orig + epsilon;
            let plus = model_loss(&probe, batch, kind, cfg)?;
            probe.slices_mut()[t][i] = orig - epsilon;
            let minus = model_loss(&probe, batch, kind, cfg)?;
            probe.slices_mut()[t][i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = (analytic[flat_index] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            flat_index += 1;
        }
    }
    Ok(worst)
}
