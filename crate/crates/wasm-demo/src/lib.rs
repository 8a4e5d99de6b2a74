//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes plain numbers or strings and returns a JSON string; on
//! failure the JSON object carries a single `error` field.

use medmap_core::dataio::{generate_dataset, SyntheticSpec};
use medmap_core::evalrep::project_embeddings;
use medmap_core::latent_align::{
    alignment_loss, estimate_gap, simplex_weights, AnchorSpec, LatentBatch, NormalMode,
};
use medmap_core::theory::{run_probe, ProbeParams};
use medmap_core::{Error, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const NUM_MODALITIES: usize = 4;
const TOY_BATCH: usize = 64;
const TOY_DIM: usize = 8;

fn to_json(r: Result<Value>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

/// One synthetic 4-modality sample with its label map, row-major.
pub fn sample(gap_strength: f64, size: usize, seed: u64) -> Result<Value> {
    let spec = SyntheticSpec {
        height: size,
        width: size,
        gap_strength,
        n_samples: 1,
        ..SyntheticSpec::default()
    };
    let s = generate_dataset(&spec, seed)?.remove(0);
    let images: Vec<Vec<f32>> = s.modalities.iter().map(|m| m.iter().copied().collect()).collect();
    Ok(json!({
        "height": s.height(),
        "width": s.width(),
        "modalities": images,
        "label": s.label.iter().copied().collect::<Vec<u8>>(),
    }))
}

#[wasm_bindgen]
pub fn synthetic_sample(gap_strength: f64, size: usize, seed: u64) -> String {
    to_json(sample(gap_strength, size, seed))
}

pub fn parse_anchor(name: &str, k: usize) -> Result<AnchorSpec> {
    match name {
        "adaptive" => Ok(AnchorSpec::Adaptive {
            weights_raw: vec![0.0; NUM_MODALITIES],
        }),
        "fixed" => Ok(AnchorSpec::FixedK { k }),
        "normal" => Ok(AnchorSpec::Normal {
            mode: NormalMode::StandardKl,
        }),
        other => Err(Error::Config(format!("unknown anchor {other:?}"))),
    }
}

/// Toy latents: modality `j` is shifted along a random direction and rescaled
/// by an amount proportional to `gap`.
pub fn toy_latents(gap: f64, seed: u64) -> Result<Vec<Array2<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared = Array2::from_shape_fn((TOY_BATCH, TOY_DIM), |_| rng.sample::<f64, _>(StandardNormal));
    (0..NUM_MODALITIES)
        .map(|_| {
            let shift: Vec<f64> = (0..TOY_DIM).map(|_| gap * rng.sample::<f64, _>(StandardNormal)).collect();
            let scale = (gap * rng.random_range(-0.5..0.5)).exp();
            let noise = Array2::from_shape_fn((TOY_BATCH, TOY_DIM), |_| 0.3 * rng.sample::<f64, _>(StandardNormal));
            let mut x = (&shared + &noise) * scale;
            for mut row in x.rows_mut() {
                for (v, s) in row.iter_mut().zip(&shift) {
                    *v += s;
                }
            }
            Ok(x)
        })
        .collect()
}

fn projection_json(batch: &LatentBatch) -> Result<Value> {
    let p = project_embeddings(batch)?;
    let coords: Vec<Vec<[f64; 2]>> = p
        .coords
        .iter()
        .map(|c| {
            c.as_ref()
                .map(|c| c.rows().into_iter().map(|r| [r[0], r[1]]).collect())
                .unwrap_or_default()
        })
        .collect();
    Ok(json!(coords))
}

/// Gradient descent on the toy latents themselves under the chosen anchor:
/// loss trace, gap before and after, and both 2-D projections.
pub fn align(anchor: &str, k: usize, gap: f64, steps: usize, lr: f64, seed: u64) -> Result<Value> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::validation("lr", "must be positive"));
    }
    let mut anchor = parse_anchor(anchor, k)?;
    anchor.validate(NUM_MODALITIES)?;
    let mut feats = toy_latents(gap, seed)?;
    let initial = LatentBatch::full(feats.clone())?;
    let gap_before = estimate_gap(&initial, &anchor)?;
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let batch = LatentBatch::full(feats.clone())?;
        let loss = alignment_loss(&batch, &anchor)?;
        losses.push(loss.value);
        for (f, g) in feats.iter_mut().zip(&loss.grad) {
            if let Some(g) = g {
                f.scaled_add(-lr, g);
            }
        }
        if let (AnchorSpec::Adaptive { weights_raw }, Some(gw)) = (&mut anchor, &loss.grad_weights_raw) {
            for (w, g) in weights_raw.iter_mut().zip(gw) {
                *w -= lr * g;
            }
        }
    }
    let aligned = LatentBatch::full(feats)?;
    losses.push(alignment_loss(&aligned, &anchor)?.value);
    let gap_after = estimate_gap(&aligned, &anchor)?;
    let weights = match &anchor {
        AnchorSpec::Adaptive { weights_raw } => Some(simplex_weights(weights_raw)),
        _ => None,
    };
    Ok(json!({
        "losses": losses,
        "gap_before": gap_before.mean_off_diagonal_kl(),
        "gap_after": gap_after.mean_off_diagonal_kl(),
        "anchor_dist_after": gap_after.anchor_dist,
        "weights": weights,
        "before": projection_json(&initial)?,
        "after": projection_json(&aligned)?,
    }))
}

#[wasm_bindgen]
pub fn align_latents(anchor: &str, k: usize, gap: f64, steps: usize, lr: f64, seed: u64) -> String {
    to_json(align(anchor, k, gap, steps, lr, seed))
}

/// Per-σ summary of the information comparison over random discrete joints.
pub fn sweep(instances: usize, grid_points: usize, seed: u64) -> Result<Value> {
    if grid_points < 2 {
        return Err(Error::validation("grid_points", "need at least 2"));
    }
    let params = ProbeParams {
        sigmas: (0..grid_points).map(|i| i as f64 / (grid_points - 1) as f64).collect(),
        instances,
        seed,
        ..ProbeParams::default()
    };
    let report = run_probe(&params)?;
    Ok(json!({
        "rows": report.prop1_by_sigma,
        "counterexamples": report.counterexample_count,
        "elbo_holds": report.elbo_holds,
        "elbo_violations": report.elbo_violations,
    }))
}

#[wasm_bindgen]
pub fn prop1_sweep(instances: usize, grid_points: usize, seed: u64) -> String {
    to_json(sweep(instances, grid_points, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_shapes() {
        let v = sample(1.0, 16, 3).unwrap();
        assert_eq!(v["modalities"].as_array().unwrap().len(), 4);
        assert_eq!(v["label"].as_array().unwrap().len(), 256);
    }

    #[test]
    fn alignment_shrinks_gap() {
        for anchor in ["adaptive", "fixed", "normal"] {
            let v = align(anchor, 0, 1.5, 200, 0.05, 1).unwrap();
            let before = v["gap_before"].as_f64().unwrap();
            let after = v["gap_after"].as_f64().unwrap();
            assert!(after < before, "{anchor}: {after} !< {before}");
            assert_eq!(v["after"].as_array().unwrap().len(), 4);
        }
    }

    #[test]
    fn errors_become_json() {
        let s = align_latents("median", 0, 1.0, 1, 0.1, 0);
        assert!(s.contains("\"error\""));
        let s = align_latents("fixed", 9, 1.0, 1, 0.1, 0);
        assert!(s.contains("\"error\""));
    }

    #[test]
    fn sweep_rows_cover_grid() {
        let v = sweep(20, 3, 0).unwrap();
        let rows = v["rows"].as_array().unwrap();
        assert_eq!(rows.len(), 3);
        for r in rows {
            assert_eq!(r["holds"].as_u64().unwrap() + r["violations"].as_u64().unwrap(), 20);
        }
    }
}
