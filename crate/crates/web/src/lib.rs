//! Browser demo bindings. Every export returns a JSON string (with an
//! `error` field on failure) so the page needs no glue beyond `JSON.parse`.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use xmd_core::losses::{loss_from_similarities, LossKind, Variant};
use xmd_core::matcore::Matrix;
use xmd_core::similarity::{SimilarityBundle, SimilaritySettings, VoteNormalization};
use xmd_core::synth::{generate_batch, Scenario, NUSCENES_CLASSES};
use xmd_core::trainer::{train, TrainConfig};

fn respond(result: xmd_core::Result<Value>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

fn balance_mode(name: &str) -> xmd_core::Result<Option<VoteNormalization>> {
    xmd_core::config::parse_balance(name)
}

/// Samples a nuScenes-like batch of `m` superpixels and reports, per class,
/// the count, the mean anchor weight and how many same-class negatives the
/// KNN mask removes.
#[wasm_bindgen]
pub fn similarity_explorer(m: usize, k_percent: f64, balance: &str, seed: u64) -> String {
    respond((|| {
        let scenario = Scenario {
            superpixels_per_batch: m,
            ..Scenario::nuscenes_like(seed)
        };
        let batch = generate_batch(&scenario, 0)?;
        let settings = SimilaritySettings {
            k_percent: Some(k_percent),
            balance: balance_mode(balance)?,
            ..SimilaritySettings::default()
        };
        let bundle = SimilarityBundle::compute(&batch.data.features, &settings)?;
        let labels = &batch.class_labels;
        let mask = bundle.knn_mask.as_ref().expect("k_percent is set");
        let classes: Vec<Value> = (0..scenario.num_classes)
            .filter_map(|c| {
                let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
                if members.is_empty() {
                    return None;
                }
                let weight = bundle.balance.as_ref().map(|b| {
                    members.iter().map(|&i| b.weights[i]).sum::<f64>() / members.len() as f64
                });
                let same_pairs = members.len() * (members.len() - 1);
                let masked_same = members
                    .iter()
                    .flat_map(|&i| members.iter().map(move |&j| (i, j)))
                    .filter(|&(i, j)| i != j && !mask.get(i, j))
                    .count();
                Some(json!({
                    "class": NUSCENES_CLASSES[c],
                    "count": members.len(),
                    "mean_weight": weight,
                    "same_class_negatives": same_pairs,
                    "masked_same_class": masked_same,
                }))
            })
            .collect();
        let d = xmd_core::synth::diagnostics(&batch, scenario.num_classes)?;
        Ok(json!({
            "m": m,
            "k": xmd_core::similarity::percent_to_k(k_percent, m),
            "false_negative_rate": d.false_negative_rate,
            "within_class_alpha": d.within_class_alpha,
            "cross_class_alpha": d.cross_class_alpha,
            "classes": classes,
        }))
    })())
}

/// Gradient of one anchor's loss with respect to a single negative's
/// similarity, as that negative's α runs over `[0, 1]`. The anchor has a
/// positive at similarity `s_pos` and `negatives` other negatives at `s_neg`.
#[wasm_bindgen]
pub fn gradient_profile(s_pos: f64, s_neg: f64, negatives: usize, temperature: f64, points: usize) -> String {
    respond((|| {
        let m = negatives + 2;
        let points = points.max(2);
        let mut alphas = Vec::with_capacity(points);
        let mut slidr = Vec::with_capacity(points);
        let mut weighted = Vec::with_capacity(points);
        for p in 0..points {
            let a = p as f64 / (points - 1) as f64;
            // anchor 0; column 1 is the probed negative, the rest are fillers
            let s = Matrix::from_fn(m, m, |i, j| if i == j { s_pos } else if i == 0 && j == 1 { 0.5 } else { s_neg });
            let alpha = Matrix::from_fn(m, m, |i, j| if i == 0 && j == 1 { a } else { 0.0 });
            let plain = loss_from_similarities(&s, &LossKind::Slidr, temperature)?;
            let alpha_loss = loss_from_similarities(&s, &LossKind::Alpha(alpha), temperature)?;
            alphas.push(a);
            // per-anchor derivative; the averaged loss carries an extra 1/M
            slidr.push(plain.grad.get(0, 1) * m as f64);
            weighted.push(alpha_loss.grad.get(0, 1) * m as f64);
        }
        Ok(json!({ "alpha": alphas, "slidr": slidr, "alpha_weighted": weighted }))
    })())
}

/// Trains a small model and returns its loss history.
#[wasm_bindgen]
pub fn train_curve(variant: &str, steps: usize, m: usize, seed: u64) -> String {
    respond((|| {
        let variant: Variant = variant.parse()?;
        let scenario = Scenario {
            superpixels_per_batch: m,
            ..Scenario::nuscenes_like(seed)
        };
        let mut cfg = TrainConfig {
            epochs: 1,
            steps_per_epoch: steps,
            batch_size: m,
            variant,
            seed,
            ..TrainConfig::default()
        };
        if matches!(variant, Variant::Knn | Variant::St) {
            cfg.similarity.k_percent = Some(5.0);
        }
        if variant == Variant::St {
            cfg.similarity.balance = Some(VoteNormalization::Paper);
        }
        if variant == Variant::Alpha {
            cfg.similarity.alpha_min = 0.5;
        }
        let out = train(&scenario, &cfg)?;
        let loss: Vec<f64> = out.history.iter().map(|r| r.loss).collect();
        let lr: Vec<f64> = out.history.iter().map(|r| r.lr).collect();
        Ok(json!({ "variant": variant.name(), "loss": loss, "lr": lr }))
    })())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn explorer_reports_classes() {
        let v = parse(&similarity_explorer(128, 5.0, "conventional", 1));
        assert_eq!(v["k"], 6);
        let classes = v["classes"].as_array().unwrap();
        let total: u64 = classes.iter().map(|c| c["count"].as_u64().unwrap()).sum();
        assert_eq!(total, 128);
        assert!(parse(&similarity_explorer(128, 5.0, "sometimes", 1))["error"].is_string());
    }

    #[test]
    fn gradient_profile_vanishes_at_alpha_one() {
        let v = parse(&gradient_profile(0.9, 0.1, 6, 0.07, 11));
        let w = v["alpha_weighted"].as_array().unwrap();
        let plain = v["slidr"].as_array().unwrap();
        assert_eq!(w.len(), 11);
        assert!((w[0].as_f64().unwrap() - plain[0].as_f64().unwrap()).abs() < 1e-12);
        assert_eq!(w[10].as_f64().unwrap(), 0.0);
    }

    #[test]
    fn curve_has_requested_length() {
        let v = parse(&train_curve("st", 5, 32, 0));
        assert_eq!(v["loss"].as_array().unwrap().len(), 5);
        assert!(parse(&train_curve("nope", 5, 32, 0))["error"].is_string());
    }
}
