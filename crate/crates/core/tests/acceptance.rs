//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Loss values are checked against a scalar
//! double-loop oracle written here, not against the library.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xmd_core::correspond::{build_pairs, project_points, CameraModel, Granularity, SegmentMap};
use xmd_core::experiment::{
    compare_jobs, gradcheck_suite, run_job, seed_list, spread, sweep_jobs, Cell, EvalSettings, GradcheckConfig,
    JobKind, JobResult,
};
use xmd_core::losses::{self, LossConfig, LossKind, LossResult, Variant};
use xmd_core::similarity::{
    balance_weights, knn_mask, percent_to_k, rescale_unit_interval, superpixel_similarity, SimilarityBundle,
    SimilaritySettings, VoteNormalization,
};
use xmd_core::synth::{generate_batch, Scenario, SynthGranularity};
use xmd_core::trainer::{self, Model, TrainConfig};
use xmd_core::{BinaryMatrix, Matrix};

type Outcome = Result<String, String>;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

// ------------------------------------------------------------------ oracle

/// Scalar form of the four losses: `alpha` scales negatives in the
/// exponent, `mask` drops negatives, `weights` replace the 1/M average.
struct Oracle<'a> {
    alpha: Option<&'a Matrix>,
    mask: Option<&'a BinaryMatrix>,
    weights: Option<(&'a [f64], f64)>,
}

impl Oracle<'_> {
    fn value(&self, q: &Matrix, k: &Matrix, tau: f64) -> f64 {
        let m = q.rows();
        let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut total = 0.0;
        for i in 0..m {
            let mut s = vec![0.0; m];
            for (j, sij) in s.iter_mut().enumerate() {
                let mut d = 0.0;
                for e in 0..q.cols() {
                    d += q.get(i, e) * k.get(j, e);
                }
                *sij = d / (norm(q.row(i)) * norm(k.row(j)));
            }
            let positive = (s[i] / tau).exp();
            let mut denominator = positive;
            for j in 0..m {
                if j == i || self.mask.is_some_and(|c| !c.get(i, j)) {
                    continue;
                }
                let scale = self.alpha.map_or(1.0, |a| 1.0 - a.get(i, j));
                denominator += (scale * s[j] / tau).exp();
            }
            let term = -(positive / denominator).ln();
            let weight = match self.weights {
                Some((w, sum)) => w[i] / sum,
                None => 1.0 / m as f64,
            };
            total += weight * term;
        }
        total
    }
}

// --------------------------------------------------------------- criteria

fn same(a: &LossResult, b: &LossResult, what: &str) -> Result<(), String> {
    let dv = (a.value - b.value).abs();
    let dg = a.grad_q.max_abs_diff(&b.grad_q).max(a.grad_k.max_abs_diff(&b.grad_k));
    ensure(dv <= 1e-12 && dg <= 1e-10, || format!("{what}: value diff {dv:e}, gradient diff {dg:e}"))
}

fn reduction_identities() -> Outcome {
    let start = Instant::now();
    let cfg = LossConfig::with_temperature(0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut count = 0;
    for seed in 0..20u64 {
        let m = [4, 8, 16][seed as usize % 3];
        let e = [3, 8][(seed as usize / 3) % 2];
        let q = random(m, e, &mut rng);
        let k = random(m, e, &mut rng);
        let features = random(m, 5, &mut rng);
        let plain = losses::loss_slidr(&q, &k, &cfg).map_err(|e| e.to_string())?;
        let zero = Matrix::zeros(m, m);
        let alpha = losses::loss_alpha(&q, &k, &zero, &cfg).map_err(|e| e.to_string())?;
        same(&alpha, &plain, "zero alpha vs plain")?;
        let full = BinaryMatrix::off_diagonal(m);
        let knn_full = losses::loss_knn(&q, &k, &full, &cfg).map_err(|e| e.to_string())?;
        same(&knn_full, &plain, "full mask vs plain")?;
        let alpha_f = superpixel_similarity(&features).map_err(|e| e.to_string())?;
        let mask = knn_mask(&alpha_f, 1 + seed as usize % 2).map_err(|e| e.to_string())?;
        let knn = losses::loss_knn(&q, &k, &mask, &cfg).map_err(|e| e.to_string())?;
        let ones = vec![1.0; m];
        let st = losses::loss_st(&q, &k, &mask, &ones, m as f64, &cfg).map_err(|e| e.to_string())?;
        same(&st, &knn, "uniform weights vs masked")?;
        count += 1;
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("{count} instances in {:.2?}", start.elapsed()))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let cfg = GradcheckConfig::default();
    let instances = gradcheck_suite(&cfg).map_err(|e| e.to_string())?;
    let worst = instances.iter().map(|i| i.max_error()).fold(0.0, f64::max);
    let pooled = instances.iter().map(|i| i.parameter_error).fold(0.0, f64::max);
    for v in Variant::ALL {
        ensure(instances.iter().any(|i| i.variant == v), || format!("{v} not checked"))?;
    }
    ensure(worst < 1e-6, || format!("max relative error {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "{} instances, max error {worst:.1e} (through pooling {pooled:.1e}) in {:.2?}",
        instances.len(),
        start.elapsed()
    ))
}

fn alpha_gradient_formula() -> Outcome {
    let tau = 0.1;
    let eps = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let m = 6;
        let s = Matrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let alpha = Matrix::from_fn(m, m, |i, j| if i == j { 0.0 } else { rng.random_range(-1.0..1.0) });
        let kind = LossKind::Alpha(alpha.clone());
        let base = losses::loss_from_similarities(&s, &kind, tau).map_err(|e| e.to_string())?;
        for i in 0..m {
            for j in (0..m).filter(|&j| j != i) {
                let mut plus = s.clone();
                plus.set(i, j, s.get(i, j) + eps);
                let mut minus = s.clone();
                minus.set(i, j, s.get(i, j) - eps);
                let lp = losses::loss_from_similarities(&plus, &kind, tau).map_err(|e| e.to_string())?;
                let lm = losses::loss_from_similarities(&minus, &kind, tau).map_err(|e| e.to_string())?;
                // derivative of anchor i's own term
                let measured = (lp.per_anchor[i] - lm.per_anchor[i]) / (2.0 * eps);
                let formula = (1.0 - alpha.get(i, j)) / tau * base.probs.get(i, j);
                worst = worst.max((measured - formula).abs());
            }
        }
    }
    ensure(worst < 1e-8, || format!("max deviation {worst:e}"))?;
    Ok(format!("10 instances, max deviation {worst:.1e}"))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut count = 0;
    for m in [2usize, 3, 5, 8, 16, 33, 64] {
        for _ in 0..3 {
            let e = rng.random_range(2..=8);
            let tau = rng.random_range(0.05..1.0);
            let cfg = LossConfig::with_temperature(tau);
            let q = random(m, e, &mut rng);
            let k = random(m, e, &mut rng);
            let features = random(m, 6, &mut rng);
            let alpha = rescale_unit_interval(&superpixel_similarity(&features).map_err(|e| e.to_string())?);
            let mask = knn_mask(&alpha, percent_to_k(10.0, m)).map_err(|e| e.to_string())?;
            let bw = balance_weights(&alpha, VoteNormalization::Paper).map_err(|e| e.to_string())?;
            let cases = [
                (LossKind::Slidr, Oracle { alpha: None, mask: None, weights: None }),
                (LossKind::Alpha(alpha.clone()), Oracle { alpha: Some(&alpha), mask: None, weights: None }),
                (LossKind::Knn(mask.clone()), Oracle { alpha: None, mask: Some(&mask), weights: None }),
                (
                    LossKind::St {
                        mask: mask.clone(),
                        weights: bw.weights.clone(),
                        weight_sum: bw.weight_sum,
                    },
                    Oracle {
                        alpha: None,
                        mask: Some(&mask),
                        weights: Some((&bw.weights, bw.weights.iter().sum())),
                    },
                ),
            ];
            for (kind, oracle) in &cases {
                let got = losses::compute(&q, &k, kind, &cfg).map_err(|e| e.to_string())?.value;
                let want = oracle.value(&q, &k, tau);
                let err = (got - want).abs();
                ensure(err < 1e-10, || format!("{} at M={m}: {got} vs oracle {want}", kind.variant()))?;
                worst = worst.max(err);
                count += 1;
            }
        }
    }
    Ok(format!("{count} loss values up to M=64, max deviation {worst:.1e}"))
}

fn mask_cardinality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = Vec::new();
    for m in [16usize, 100, 4096] {
        let alpha = superpixel_similarity(&random(m, 8, &mut rng)).map_err(|e| e.to_string())?;
        for p in [1.0, 5.0, 10.0] {
            let k = percent_to_k(p, m);
            let mask = knn_mask(&alpha, k).map_err(|e| e.to_string())?;
            for i in 0..m {
                let kept: Vec<usize> = (0..m).filter(|&j| j != i && mask.get(i, j)).collect();
                ensure(kept.len() == m - 1 - k, || {
                    format!("M={m} p={p}: anchor {i} keeps {} negatives, expected {}", kept.len(), m - 1 - k)
                })?;
                // the removed negatives are the most similar ones
                let dropped_min = (0..m)
                    .filter(|&j| j != i && !mask.get(i, j))
                    .map(|j| alpha.get(i, j))
                    .fold(f64::INFINITY, f64::min);
                let kept_max = kept.iter().map(|&j| alpha.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
                ensure(k == 0 || dropped_min >= kept_max, || format!("M={m} p={p}: anchor {i} dropped a dissimilar negative"))?;
            }
            checked.push(format!("M={m}/{p}%→K={k}"));
        }
    }
    Ok(checked.join(" "))
}

fn balancing_direction() -> Outcome {
    let mut wins = 0;
    let settings = SimilaritySettings {
        balance: Some(VoteNormalization::Paper),
        ..SimilaritySettings::default()
    };
    for seed in 0..100u64 {
        let s = Scenario {
            superpixels_per_batch: 512,
            ..Scenario::nuscenes_like(seed)
        };
        let batch = generate_batch(&s, 0).map_err(|e| e.to_string())?;
        let bundle = SimilarityBundle::compute(&batch.data.features, &settings).map_err(|e| e.to_string())?;
        let weights = bundle.balance.expect("balance requested").weights;
        let labels = &batch.class_labels;
        let by_share = |a: &usize, b: &usize| s.class_proportions[*a].total_cmp(&s.class_proportions[*b]);
        let present: Vec<usize> = (0..s.num_classes).filter(|c| labels.contains(c)).collect();
        let most = present.iter().copied().max_by(by_share).expect("nonempty batch");
        let least = present.iter().copied().min_by(by_share).expect("nonempty batch");
        let mean = |c: usize| {
            let w: Vec<f64> = (0..labels.len()).filter(|&i| labels[i] == c).map(|i| weights[i]).collect();
            w.iter().sum::<f64>() / w.len() as f64
        };
        if mean(most) < mean(least) {
            wins += 1;
        }
    }
    ensure(wins >= 95, || format!("{wins}/100 batches"))?;
    Ok(format!("{wins}/100 batches"))
}

/// Imbalanced, self-similar scenario shared by the ablation and sweep runs.
fn desk_scenario() -> (Scenario, TrainConfig, EvalSettings) {
    let scenario = Scenario {
        point_noise: 0.4,
        points_per_superpixel: (2, 6),
        ..Scenario::nuscenes_like(0)
    };
    let train = TrainConfig {
        epochs: 1,
        steps_per_epoch: 300,
        batch_size: 512,
        scenes: 10,
        embed_dim: 16,
        ..TrainConfig::default()
    };
    let eval = EvalSettings {
        per_class: 300,
        ..EvalSettings::default()
    };
    (scenario, train, eval)
}

fn within_class_alpha(scenario: &Scenario) -> Result<f64, String> {
    let s = Scenario {
        superpixels_per_batch: 512,
        ..scenario.clone()
    };
    let d = xmd_core::synth::diagnostics(&generate_batch(&s, 0).map_err(|e| e.to_string())?, s.num_classes)
        .map_err(|e| e.to_string())?;
    Ok(d.within_class_alpha)
}

fn ablation() -> Outcome {
    let start = Instant::now();
    let (scenario, train, eval) = desk_scenario();
    let wca = within_class_alpha(&scenario)?;
    ensure((0.85..=0.95).contains(&wca), || format!("within-class alpha {wca:.3}"))?;
    let seeds = seed_list(0, 5);
    let jobs: Vec<_> = compare_jobs(&scenario, &train, &seeds, 1.0, VoteNormalization::Conventional)
        .into_iter()
        .filter(|j| matches!(j.kind, JobKind::Compare(c) if c == Cell::GRID[0] || c == Cell::GRID[3]))
        .collect();
    let results: Vec<JobResult> = jobs.iter().map(|j| run_job(j, &eval)).collect();
    let metric = |r: &JobResult| r.metrics.clone().map_err(|e| e.to_string());
    let (base, full) = results.split_at(seeds.len());
    let mut wins = 0;
    let mut worst_majority = 0.0f64;
    let mut deltas = Vec::new();
    for (b, f) in base.iter().zip(full) {
        let (b, f) = (metric(b)?, metric(f)?);
        let dmin = f.minority.ok_or("no minority classes")? - b.minority.ok_or("no minority classes")?;
        let dmaj = f.majority.ok_or("no majority classes")? - b.majority.ok_or("no majority classes")?;
        if dmin > 0.0 {
            wins += 1;
        }
        worst_majority = worst_majority.max(-dmaj);
        deltas.push(format!("{dmin:+.3}/{dmaj:+.3}"));
    }
    let summary = format!(
        "minority wins {wins}/5, minority/majority deltas [{}], within-class alpha {wca:.3}, {:.1?}",
        deltas.join(" "),
        start.elapsed()
    );
    ensure(wins >= 4, || summary.clone())?;
    ensure(worst_majority <= 0.03, || summary.clone())?;
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(summary)
}

fn sensitivity() -> Outcome {
    let start = Instant::now();
    let (scenario, train, eval) = desk_scenario();
    let seeds = seed_list(0, 5);
    let alpha_grid = [0.0, 0.2, 0.5, 0.8];
    let k_grid = [1.0, 5.0, 10.0];
    let jobs = sweep_jobs(&scenario, &train, &seeds, &alpha_grid, &k_grid);
    let results: Vec<JobResult> = jobs.iter().map(|j| run_job(j, &eval)).collect();
    let n = seeds.len();
    let accuracy = |r: &JobResult| r.metrics.as_ref().map(|m| m.overall).map_err(|e| e.clone());
    let mut wins = 0;
    let mut spreads = Vec::new();
    for si in 0..n {
        let a = (0..alpha_grid.len()).map(|g| accuracy(&results[g * n + si])).collect::<Result<Vec<_>, _>>()?;
        let k = (0..k_grid.len())
            .map(|g| accuracy(&results[(alpha_grid.len() + g) * n + si]))
            .collect::<Result<Vec<_>, _>>()?;
        let (sa, sk) = (spread(&a), spread(&k));
        if sa > sk {
            wins += 1;
        }
        spreads.push(format!("{sa:.3}/{sk:.3}"));
    }
    let summary = format!(
        "alpha spread above K spread in {wins}/5 seeds, spreads [{}], {:.1?}",
        spreads.join(" "),
        start.elapsed()
    );
    ensure(wins >= 4, || summary.clone())?;
    within(start.elapsed(), Duration::from_secs(600))?;
    Ok(summary)
}

fn training_sanity() -> Outcome {
    let scenario = Scenario::nuscenes_like(0);
    let cfg = TrainConfig::default();
    let a = trainer::train(&scenario, &cfg).map_err(|e| e.to_string())?;
    let (first, last) = (a.history[0].loss, a.history[a.history.len() - 1].loss);
    ensure(last < 0.5 * first, || format!("loss {first:.4} → {last:.4}"))?;

    let b = trainer::train(&scenario, &cfg).map_err(|e| e.to_string())?;
    let bits = |m: &Model| m.tensors().into_iter().flat_map(|(_, t)| t.into_vec()).map(f64::to_bits).collect::<Vec<_>>();
    ensure(bits(&a.model) == bits(&b.model), || "same-seed runs differ".into())?;
    ensure(
        a.history.iter().zip(&b.history).all(|(x, y)| x.loss.to_bits() == y.loss.to_bits()),
        || "same-seed loss histories differ".into(),
    )?;

    let mut frozen = cfg.clone();
    frozen.sgd.lr0 = 0.0;
    let z = trainer::train(&scenario, &frozen).map_err(|e| e.to_string())?;
    let s = frozen.training_scenario(&scenario);
    let init = Model::init(s.point_dim, cfg.hidden_dim, s.feature_dim, cfg.embed_dim, cfg.activation, cfg.seed);
    ensure(bits(&z.model) == bits(&init), || "lr0=0 changed parameters".into())?;
    Ok(format!("loss {first:.4} → {last:.4} (ratio {:.3}), reruns bit-identical, lr0=0 frozen", last / first))
}

fn point_granularity() -> Outcome {
    let start = Instant::now();
    let cfg = LossConfig::with_temperature(LossConfig::POINT_TEMPERATURE);
    let mut notes = Vec::new();
    for cap in [4096usize, 8192] {
        // pairing from a projected cloud honours the cap
        let mut rng = ChaCha8Rng::seed_from_u64(cap as u64);
        let cloud = Matrix::from_fn(3 * cap, 3, |_, c| {
            if c == 2 {
                rng.random_range(2.0..20.0)
            } else {
                rng.random_range(-5.0..5.0)
            }
        });
        let camera = CameraModel::simple(200.0, 200.0, 200.0, 150.0, 400, 300).map_err(|e| e.to_string())?;
        let projections = project_points(&cloud, &camera).map_err(|e| e.to_string())?;
        let ids = (0..400 * 300).map(|p| (p / 400 / 30) * 10 + (p % 400) / 40).collect();
        let segments = SegmentMap::new(400, 300, 100, ids).map_err(|e| e.to_string())?;
        let pairs = build_pairs(&projections, &segments, Granularity::Point { cap: Some(cap), seed: 0 })
            .map_err(|e| e.to_string())?;
        ensure(pairs.num_groups() == cap, || format!("{} pairs for cap {cap}", pairs.num_groups()))?;

        // synthetic point-level batch through the model
        let scenario = Scenario {
            superpixels_per_batch: cap / 4,
            points_per_superpixel: (6, 12),
            granularity: SynthGranularity::Point { cap: Some(cap) },
            ..Scenario::nuscenes_like(1)
        };
        let batch = generate_batch(&scenario, 0).map_err(|e| e.to_string())?;
        ensure(batch.data.pairs.num_groups() == cap, || format!("batch has {} pairs", batch.data.pairs.num_groups()))?;
        let model = Model::init(scenario.point_dim, 32, scenario.feature_dim, 16, Default::default(), 0);
        let (q, k, _) = trainer::forward(&batch.data, &model).map_err(|e| e.to_string())?;

        let plain = losses::loss_slidr(&q, &k, &cfg).map_err(|e| e.to_string())?;
        let alpha = losses::loss_alpha(&q, &k, &Matrix::zeros(cap, cap), &cfg).map_err(|e| e.to_string())?;
        same(&alpha, &plain, "zero alpha vs plain")?;
        drop(alpha);
        let full = losses::loss_knn(&q, &k, &BinaryMatrix::off_diagonal(cap), &cfg).map_err(|e| e.to_string())?;
        same(&full, &plain, "full mask vs plain")?;
        drop((full, plain));
        let settings = SimilaritySettings {
            k_percent: Some(1.0),
            ..SimilaritySettings::default()
        };
        let mask = SimilarityBundle::compute(&batch.data.features, &settings)
            .map_err(|e| e.to_string())?
            .knn_mask
            .expect("k_percent set");
        let knn = losses::loss_knn(&q, &k, &mask, &cfg).map_err(|e| e.to_string())?;
        let st = losses::loss_st(&q, &k, &mask, &vec![1.0; cap], cap as f64, &cfg).map_err(|e| e.to_string())?;
        same(&st, &knn, "uniform weights vs masked")?;
        drop((knn, st, mask));

        // two optimization steps of the full loss
        let train = TrainConfig {
            epochs: 1,
            steps_per_epoch: 2,
            batch_size: 0,
            temperature: LossConfig::POINT_TEMPERATURE,
            variant: Variant::St,
            similarity: SimilaritySettings {
                k_percent: Some(1.0),
                balance: Some(VoteNormalization::Paper),
                ..SimilaritySettings::default()
            },
            ..TrainConfig::default()
        };
        let out = trainer::train(&scenario, &train).map_err(|e| e.to_string())?;
        ensure(out.history.iter().all(|r| r.loss.is_finite()), || "non-finite loss".into())?;
        notes.push(format!("{cap} pairs"));
    }
    Ok(format!("{} with identities and training steps in {:.1?}", notes.join(", "), start.elapsed()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("reduction identities", reduction_identities),
        ("gradient check", gradient_correctness),
        ("alpha gradient formula", alpha_gradient_formula),
        ("scalar oracle equivalence", oracle_equivalence),
        ("mask cardinality", mask_cardinality),
        ("balancing direction", balancing_direction),
        ("masking and balancing ablation", ablation),
        ("alpha_min vs K sensitivity", sensitivity),
        ("training sanity", training_sanity),
        ("point granularity", point_granularity),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("[{:>2}] PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[{:>2}] FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
