//! Anchor distributions, the per-modality alignment losses, and the
//! modality-gap estimator.
//!
//! Every loss returns its value together with analytic gradients for each
//! present modality's `B×D` feature array, so callers can chain them into a
//! backward pass. Absent modalities are dropped from every sum and from every
//! denominator.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataio::ScenarioMask;
use crate::error::{Error, Result};

/// Floor applied to every variance before it is inverted or logged.
pub const VAR_FLOOR: f64 = 1e-6;
/// Floor applied to standard deviations in the standard-normal anchor loss.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-modality latent features of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    features: Vec<Option<Array2<f64>>>,
    present: ScenarioMask,
}

impl LatentBatch {
    /// `None` entries mark absent modalities.
    pub fn new(features: Vec<Option<Array2<f64>>>) -> Result<Self> {
        let present = ScenarioMask::new(features.iter().map(Option::is_some).collect())?;
        let mut dims = features.iter().flatten().map(|f| f.dim());
        let first = dims.next().expect("mask guarantees one present modality");
        if dims.any(|d| d != first) {
            return Err(Error::validation("features", "present modalities disagree on B or D"));
        }
        if first.0 == 0 || first.1 == 0 {
            return Err(Error::validation("features", "empty feature array"));
        }
        Ok(Self { features, present })
    }

    pub fn full(features: Vec<Array2<f64>>) -> Result<Self> {
        Self::new(features.into_iter().map(Some).collect())
    }

    pub fn present(&self) -> &ScenarioMask {
        &self.present
    }

    pub fn num_modalities(&self) -> usize {
        self.features.len()
    }

    pub fn batch_size(&self) -> usize {
        self.first().nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.first().ncols()
    }

    pub fn feature(&self, j: usize) -> Option<&Array2<f64>> {
        self.features.get(j).and_then(Option::as_ref)
    }

    pub fn features(&self) -> &[Option<Array2<f64>>] {
        &self.features
    }

    fn first(&self) -> &Array2<f64> {
        self.features.iter().flatten().next().expect("one present modality")
    }

    fn present_features(&self) -> impl Iterator<Item = (usize, &Array2<f64>)> {
        self.features
            .iter()
            .enumerate()
            .filter_map(|(j, f)| f.as_ref().map(|f| (j, f)))
    }

    fn zero_grads(&self) -> Vec<Option<Array2<f64>>> {
        self.features
            .iter()
            .map(|f| f.as_ref().map(|f| Array2::zeros(f.dim())))
            .collect()
    }
}

/// Which form of the standard-normal anchor loss to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalMode {
    /// `2·ln(1/v) + (v² + m²)/2 − 1/2`; can go negative.
    #[default]
    Literal,
    /// `−ln v + (v² + m²)/2 − 1/2`, the KL divergence to N(0, 1).
    StandardKl,
}

/// The distribution every modality is pulled towards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum AnchorSpec {
    Normal {
        #[serde(default)]
        mode: NormalMode,
    },
    FixedK {
        k: usize,
    },
    Adaptive {
        weights_raw: Vec<f64>,
    },
}

impl AnchorSpec {
    pub fn validate(&self, num_modalities: usize) -> Result<()> {
        match self {
            AnchorSpec::Normal { .. } => Ok(()),
            AnchorSpec::FixedK { k } if *k < num_modalities => Ok(()),
            AnchorSpec::FixedK { k } => Err(Error::validation(
                "anchor.k",
                format!("index {k} out of range for {num_modalities} modalities"),
            )),
            AnchorSpec::Adaptive { weights_raw } => {
                if weights_raw.len() != num_modalities {
                    return Err(Error::validation(
                        "anchor.weights_raw",
                        format!("expected {num_modalities} entries, found {}", weights_raw.len()),
                    ));
                }
                if weights_raw.iter().any(|w| !w.is_finite()) {
                    return Err(Error::validation("anchor.weights_raw", "entries must be finite"));
                }
                Ok(())
            }
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            AnchorSpec::Normal { .. } => "normal",
            AnchorSpec::FixedK { .. } => "fixed",
            AnchorSpec::Adaptive { .. } => "adaptive",
        }
    }
}

/// A loss value with gradients for every present feature array.
#[derive(Clone, Debug)]
pub struct AlignLoss {
    pub value: f64,
    /// Same layout as the batch: `None` for absent modalities.
    pub grad: Vec<Option<Array2<f64>>>,
    /// Gradient with respect to the adaptive anchor's raw weights.
    pub grad_weights_raw: Option<Vec<f64>>,
    pub warning: Option<String>,
}

/// Softmax of the raw weights: nonnegative and summing to one.
pub fn simplex_weights(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|r| (r - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Mean squared distance of every present modality to modality `k`:
/// `(1/(B·J)) Σ_b Σ_j ‖z_j,b − z_k,b‖²` with `J` the number present.
pub fn loss_fixed_anchor(batch: &LatentBatch, k: usize) -> Result<AlignLoss> {
    let anchor = batch
        .feature(k)
        .ok_or_else(|| Error::Config(format!("fixed anchor modality {k} is absent")))?;
    let scale = 1.0 / (batch.batch_size() * batch.present().count()) as f64;
    let mut grad = batch.zero_grads();
    let mut value = 0.0;
    let mut anchor_grad = Array2::<f64>::zeros(anchor.dim());
    for (j, z) in batch.present_features() {
        let diff = z - anchor;
        value += diff.iter().map(|d| d * d).sum::<f64>();
        if j != k {
            let g = diff.mapv(|d| 2.0 * scale * d);
            anchor_grad -= &g;
            grad[j] = Some(g);
        }
    }
    grad[k] = Some(anchor_grad);
    Ok(AlignLoss {
        value: value * scale,
        grad,
        grad_weights_raw: None,
        warning: None,
    })
}

/// Adaptive anchor with learnable raw weights mapped to the simplex by a
/// softmax restricted to the present modalities.
pub fn loss_adaptive_anchor(batch: &LatentBatch, weights_raw: &[f64]) -> Result<AlignLoss> {
    check_weight_len(batch, weights_raw)?;
    let idx = batch.present().indices();
    let present_raw: Vec<f64> = idx.iter().map(|&j| weights_raw[j]).collect();
    let w = simplex_weights(&present_raw);
    let mut full_w = vec![0.0; batch.num_modalities()];
    for (&j, &wj) in idx.iter().zip(&w) {
        full_w[j] = wj;
    }
    let (mut loss, grad_w) = adaptive_core(batch, &full_w)?;
    if loss.warning.is_none() {
        let dot: f64 = idx.iter().map(|&j| full_w[j] * grad_w[j]).sum();
        let mut grad_raw = vec![0.0; batch.num_modalities()];
        for &j in &idx {
            grad_raw[j] = full_w[j] * (grad_w[j] - dot);
        }
        loss.grad_weights_raw = Some(grad_raw);
    } else {
        loss.grad_weights_raw = Some(vec![0.0; batch.num_modalities()]);
    }
    Ok(loss)
}

/// Adaptive anchor with explicit simplex weights, renormalized over the
/// present modalities. One-hot weights reproduce [`loss_fixed_anchor`]
/// exactly. Also returns the gradient with respect to the renormalized weights.
pub fn loss_adaptive_with_weights(batch: &LatentBatch, weights: &[f64]) -> Result<(AlignLoss, Vec<f64>)> {
    check_weight_len(batch, weights)?;
    if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
        return Err(Error::validation("weights", "weights must be nonnegative"));
    }
    let idx = batch.present().indices();
    let total: f64 = idx.iter().map(|&j| weights[j]).sum();
    if total <= 0.0 {
        return Err(Error::Config("adaptive weights vanish on every present modality".into()));
    }
    let mut w = vec![0.0; weights.len()];
    for &j in &idx {
        w[j] = weights[j] / total;
    }
    adaptive_core(batch, &w)
}

fn check_weight_len(batch: &LatentBatch, weights: &[f64]) -> Result<()> {
    if weights.len() != batch.num_modalities() {
        return Err(Error::validation(
            "weights",
            format!("expected {} entries, found {}", batch.num_modalities(), weights.len()),
        ));
    }
    Ok(())
}

/// `w` already sums to one over the present modalities and is zero elsewhere.
fn adaptive_core(batch: &LatentBatch, w: &[f64]) -> Result<(AlignLoss, Vec<f64>)> {
    let jp = batch.present().count();
    if jp < 2 {
        return Ok((
            AlignLoss {
                value: 0.0,
                grad: batch.zero_grads(),
                grad_weights_raw: None,
                warning: Some("single present modality: adaptive anchor equals its features".into()),
            },
            vec![0.0; w.len()],
        ));
    }
    let (b, d) = (batch.batch_size(), batch.latent_dim());
    let scale = 1.0 / (b * jp) as f64;

    let mut anchor = Array2::<f64>::zeros((b, d));
    for (j, z) in batch.present_features() {
        anchor.scaled_add(w[j], z);
    }

    let mut value = 0.0;
    let mut residuals = Vec::with_capacity(jp);
    let mut resid_sum = Array2::<f64>::zeros((b, d));
    for (j, z) in batch.present_features() {
        let r = z - &anchor;
        value += r.iter().map(|v| v * v).sum::<f64>();
        resid_sum += &r;
        residuals.push((j, r));
    }

    // dL/dz_j = (2/(BJ)) (r_j − w_j Σ_i r_i); dL/dw_j = −(2/(BJ)) Σ_b ⟨Σ_i r_i, z_j⟩
    let mut grad = batch.zero_grads();
    let mut grad_w = vec![0.0; w.len()];
    for (j, r) in residuals {
        let mut g = r;
        g.scaled_add(-w[j], &resid_sum);
        g.mapv_inplace(|v| 2.0 * scale * v);
        grad[j] = Some(g);
        let z = batch.feature(j).expect("present");
        grad_w[j] = -2.0 * scale * (&resid_sum * z).sum();
    }
    Ok((
        AlignLoss {
            value: value * scale,
            grad,
            grad_weights_raw: None,
            warning: None,
        },
        grad_w,
    ))
}

/// Standard-normal anchor: per present modality and latent coordinate, the
/// batch mean `m` and (population) standard deviation `v` enter
/// `c·ln(1/v) + (v² + m²)/2 − 1/2` with `c = 2` (literal) or `c = 1` (KL).
pub fn loss_normal_anchor(batch: &LatentBatch, mode: NormalMode) -> Result<AlignLoss> {
    let (b, d) = (batch.batch_size(), batch.latent_dim());
    if b < 2 {
        return Err(Error::validation("batch_size", "standard-normal anchor needs B >= 2"));
    }
    let c = match mode {
        NormalMode::Literal => 2.0,
        NormalMode::StandardKl => 1.0,
    };
    let jp = batch.present().count();
    let scale = 1.0 / (d * jp) as f64;
    let bf = b as f64;
    let mut grad = batch.zero_grads();
    let mut value = 0.0;
    for (j, z) in batch.present_features() {
        let mean = z.mean_axis(Axis(0)).expect("B >= 2");
        let var = z.var_axis(Axis(0), 0.0);
        let mut g = Array2::<f64>::zeros((b, d));
        for dd in 0..d {
            let m = mean[dd];
            let raw_sd = var[dd].sqrt();
            let v = raw_sd.max(STD_FLOOR);
            value += -c * v.ln() + 0.5 * (v * v + m * m) - 0.5;
            let dv = -c / v + v;
            for bb in 0..b {
                let mut gv = m / bf;
                if raw_sd > STD_FLOOR {
                    gv += dv * (z[[bb, dd]] - m) / (bf * v);
                }
                g[[bb, dd]] = scale * gv;
            }
        }
        grad[j] = Some(g);
    }
    Ok(AlignLoss {
        value: value * scale,
        grad,
        grad_weights_raw: None,
        warning: None,
    })
}

/// Dispatches to the loss matching `anchor`.
pub fn alignment_loss(batch: &LatentBatch, anchor: &AnchorSpec) -> Result<AlignLoss> {
    anchor.validate(batch.num_modalities())?;
    match anchor {
        AnchorSpec::Normal { mode } => loss_normal_anchor(batch, *mode),
        AnchorSpec::FixedK { k } => loss_fixed_anchor(batch, *k),
        AnchorSpec::Adaptive { weights_raw } => loss_adaptive_anchor(batch, weights_raw),
    }
}

/// Diagonal Gaussian fitted to batch moments.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl DiagGaussian {
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            var: Array1::ones(dim),
        }
    }

    /// Per-coordinate mean and population variance (floored).
    pub fn fit(features: &Array2<f64>) -> Self {
        let mean = features.mean_axis(Axis(0)).expect("non-empty batch");
        let var = features.var_axis(Axis(0), 0.0).mapv(|v| v.max(VAR_FLOOR));
        Self { mean, var }
    }

    /// Closed-form `KL(self ‖ other)`, summed over coordinates.
    pub fn kl(&self, other: &DiagGaussian) -> f64 {
        self.mean
            .iter()
            .zip(&self.var)
            .zip(other.mean.iter().zip(&other.var))
            .map(|((m1, v1), (m2, v2))| 0.5 * ((v2 / v1).ln() + (v1 + (m1 - m2).powi(2)) / v2 - 1.0))
            .sum()
    }

    pub fn symmetric_kl(&self, other: &DiagGaussian) -> f64 {
        0.5 * (self.kl(other) + other.kl(self))
    }
}

/// Moment-matched Gaussian of a weighted mixture of diagonal Gaussians.
fn moment_matched(components: &[(f64, &DiagGaussian)]) -> DiagGaussian {
    let dim = components[0].1.mean.len();
    let mut mean = Array1::<f64>::zeros(dim);
    let mut second = Array1::<f64>::zeros(dim);
    for (w, g) in components {
        mean.scaled_add(*w, &g.mean);
        second.scaled_add(*w, &(&g.var + &g.mean.mapv(|m| m * m)));
    }
    let var = (&second - &mean.mapv(|m| m * m)).mapv(|v| v.max(VAR_FLOOR));
    DiagGaussian { mean, var }
}

/// Symmetric diagonal-Gaussian KL between batch moments of `a` and `b`,
/// averaged over coordinates, with gradients for both inputs.
///
/// The log terms cancel in the symmetric form, leaving
/// `½[(va + Δ²)/(2vb) + (vb + Δ²)/(2va) − 1]` per coordinate.
pub fn symmetric_kl_loss(a: &Array2<f64>, b: &Array2<f64>) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    symmetric_kl_loss_floored(a, b, VAR_FLOOR)
}

/// [`symmetric_kl_loss`] with a caller-chosen variance floor.
pub fn symmetric_kl_loss_floored(
    a: &Array2<f64>,
    b: &Array2<f64>,
    var_floor: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if var_floor.is_nan() || var_floor <= 0.0 {
        return Err(Error::validation("var_floor", "must be positive"));
    }
    if a.dim() != b.dim() {
        return Err(Error::validation("features", "symmetric KL needs equal shapes"));
    }
    let (n, d) = a.dim();
    if n < 2 {
        return Err(Error::validation("batch_size", "symmetric KL needs B >= 2"));
    }
    let nf = n as f64;
    let mean_a = a.mean_axis(Axis(0)).expect("n >= 2");
    let mean_b = b.mean_axis(Axis(0)).expect("n >= 2");
    let raw_va = a.var_axis(Axis(0), 0.0);
    let raw_vb = b.var_axis(Axis(0), 0.0);
    let mut value = 0.0;
    let mut ga = Array2::<f64>::zeros((n, d));
    let mut gb = Array2::<f64>::zeros((n, d));
    let scale = 1.0 / d as f64;
    for k in 0..d {
        let va = raw_va[k].max(var_floor);
        let vb = raw_vb[k].max(var_floor);
        let delta = mean_a[k] - mean_b[k];
        let d2 = delta * delta;
        value += 0.5 * ((va + d2) / (2.0 * vb) + (vb + d2) / (2.0 * va) - 1.0);
        let d_delta = 0.5 * (delta / vb + delta / va);
        let d_va = if raw_va[k] > var_floor {
            0.5 * (1.0 / (2.0 * vb) - (vb + d2) / (2.0 * va * va))
        } else {
            0.0
        };
        let d_vb = if raw_vb[k] > var_floor {
            0.5 * (1.0 / (2.0 * va) - (va + d2) / (2.0 * vb * vb))
        } else {
            0.0
        };
        for i in 0..n {
            ga[[i, k]] = scale * (d_delta / nf + d_va * 2.0 * (a[[i, k]] - mean_a[k]) / nf);
            gb[[i, k]] = scale * (-d_delta / nf + d_vb * 2.0 * (b[[i, k]] - mean_b[k]) / nf);
        }
    }
    Ok((value * scale, ga, gb))
}

/// Pairwise modality discrepancies and distances to the active anchor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub pairwise_kl: Vec<Vec<f64>>,
    pub pairwise_mean_dist: Vec<Vec<f64>>,
    pub anchor_dist: Vec<f64>,
    /// Absent modalities have zero rows, columns and anchor distance.
    #[serde(default)]
    pub present: Vec<bool>,
}

impl GapReport {
    /// Mean of `pairwise_kl` over ordered pairs of distinct present modalities.
    pub fn mean_off_diagonal_kl(&self) -> f64 {
        mean_off_diagonal(&self.pairwise_kl, &self.present)
    }

    pub fn mean_off_diagonal_dist(&self) -> f64 {
        mean_off_diagonal(&self.pairwise_mean_dist, &self.present)
    }
}

fn mean_off_diagonal(m: &[Vec<f64>], present: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..m.len() {
        for j in 0..m.len() {
            let both = present.get(i).copied().unwrap_or(true) && present.get(j).copied().unwrap_or(true);
            if i != j && both {
                sum += m[i][j];
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Fits a diagonal Gaussian per present modality and reports symmetric KL
/// between every pair, latent-mean distances, and symmetric KL to the anchor.
pub fn estimate_gap(batch: &LatentBatch, anchor: &AnchorSpec) -> Result<GapReport> {
    if batch.batch_size() < 2 {
        return Err(Error::validation("batch_size", "gap estimation needs B >= 2"));
    }
    let j_all = batch.num_modalities();
    anchor.validate(j_all)?;
    let fits: Vec<Option<DiagGaussian>> = batch
        .features()
        .iter()
        .map(|f| f.as_ref().map(DiagGaussian::fit))
        .collect();

    let mut pairwise_kl = vec![vec![0.0; j_all]; j_all];
    let mut pairwise_mean_dist = vec![vec![0.0; j_all]; j_all];
    for i in 0..j_all {
        for j in (i + 1)..j_all {
            if let (Some(gi), Some(gj)) = (&fits[i], &fits[j]) {
                let kl = gi.symmetric_kl(gj).max(0.0);
                let dist = (&gi.mean - &gj.mean).mapv(|v| v * v).sum().sqrt();
                pairwise_kl[i][j] = kl;
                pairwise_kl[j][i] = kl;
                pairwise_mean_dist[i][j] = dist;
                pairwise_mean_dist[j][i] = dist;
            }
        }
    }

    let target = match anchor {
        AnchorSpec::Normal { .. } => DiagGaussian::standard(batch.latent_dim()),
        AnchorSpec::FixedK { k } => fits[*k]
            .clone()
            .ok_or_else(|| Error::Config(format!("fixed anchor modality {k} is absent")))?,
        AnchorSpec::Adaptive { weights_raw } => {
            let idx = batch.present().indices();
            let w = simplex_weights(&idx.iter().map(|&j| weights_raw[j]).collect::<Vec<_>>());
            let comps: Vec<(f64, &DiagGaussian)> = idx
                .iter()
                .zip(&w)
                .map(|(&j, &wj)| (wj, fits[j].as_ref().expect("present")))
                .collect();
            moment_matched(&comps)
        }
    };
    let anchor_dist = fits
        .iter()
        .map(|f| f.as_ref().map_or(0.0, |g| g.symmetric_kl(&target).max(0.0)))
        .collect();

    Ok(GapReport {
        pairwise_kl,
        pairwise_mean_dist,
        anchor_dist,
        present: batch.present().as_slice().to_vec(),
    })
}

/// Index of the best average score; ties go to the lowest index.
pub fn select_k(per_modality_scores: &[f64]) -> Result<usize> {
    if per_modality_scores.is_empty() {
        return Err(Error::validation("scores", "need at least one modality score"));
    }
    let mut best = 0;
    for (j, &s) in per_modality_scores.iter().enumerate().skip(1) {
        if s > per_modality_scores[best] {
            best = j;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn batch(features: Vec<Array2<f64>>) -> LatentBatch {
        LatentBatch::full(features).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, j: usize, b: usize, d: usize) -> LatentBatch {
        batch(
            (0..j)
                .map(|_| Array2::from_shape_fn((b, d), |_| rng.random_range(-2.0..2.0)))
                .collect(),
        )
    }

    #[test]
    fn fixed_anchor_examples() {
        let same = batch(vec![array![[1.0, 2.0]], array![[1.0, 2.0]], array![[1.0, 2.0]]]);
        assert_eq!(loss_fixed_anchor(&same, 0).unwrap().value, 0.0);

        let b = batch(vec![array![[1.0, 0.0]], array![[0.0, 0.0]]]);
        assert_abs_diff_eq!(loss_fixed_anchor(&b, 1).unwrap().value, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn fixed_anchor_is_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_batch(&mut rng, 3, 4, 5);
        let base = loss_fixed_anchor(&b, 1).unwrap().value;
        let scaled = LatentBatch::new(
            b.features().iter().map(|f| f.as_ref().map(|f| f * 3.0)).collect(),
        )
        .unwrap();
        assert_abs_diff_eq!(loss_fixed_anchor(&scaled, 1).unwrap().value, 9.0 * base, epsilon = 1e-10);
    }

    #[test]
    fn fixed_anchor_absent_k_is_config_error() {
        let b = LatentBatch::new(vec![Some(array![[1.0]]), None]).unwrap();
        assert!(matches!(loss_fixed_anchor(&b, 1), Err(Error::Config(_))));
    }

    #[test]
    fn absent_modalities_leave_denominator() {
        let full = batch(vec![array![[1.0, 0.0]], array![[0.0, 0.0]]]);
        let partial = LatentBatch::new(vec![Some(array![[1.0, 0.0]]), Some(array![[0.0, 0.0]]), None]).unwrap();
        assert_eq!(
            loss_fixed_anchor(&full, 1).unwrap().value,
            loss_fixed_anchor(&partial, 1).unwrap().value
        );
    }

    #[test]
    fn adaptive_anchor_examples() {
        let b = batch(vec![array![[1.0]], array![[-1.0]]]);
        let (loss, _) = loss_adaptive_with_weights(&b, &[0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(loss.value, 1.0, epsilon = 1e-15);
        let via_raw = loss_adaptive_anchor(&b, &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(via_raw.value, 1.0, epsilon = 1e-15);

        let same = batch(vec![array![[0.3, 0.1]]; 3]);
        assert_abs_diff_eq!(loss_adaptive_anchor(&same, &[0.2, -1.0, 3.0]).unwrap().value, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn adaptive_one_hot_equals_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = random_batch(&mut rng, 4, 3, 6);
        for k in 0..4 {
            let mut w = vec![0.0; 4];
            w[k] = 1.0;
            let (adaptive, _) = loss_adaptive_with_weights(&b, &w).unwrap();
            assert_eq!(adaptive.value, loss_fixed_anchor(&b, k).unwrap().value);
        }
    }

    #[test]
    fn adaptive_single_modality_warns() {
        let b = LatentBatch::new(vec![None, Some(array![[1.0, 2.0]])]).unwrap();
        let loss = loss_adaptive_anchor(&b, &[0.0, 0.0]).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.warning.is_some());
    }

    #[test]
    fn normal_anchor_examples() {
        // m = 0, v = 1: values ±1
        let standardized = batch(vec![array![[1.0], [-1.0]]]);
        for mode in [NormalMode::Literal, NormalMode::StandardKl] {
            assert_abs_diff_eq!(loss_normal_anchor(&standardized, mode).unwrap().value, 0.0, epsilon = 1e-15);
        }
        // m = 1, v = 1
        let shifted = batch(vec![array![[2.0], [0.0]]]);
        for mode in [NormalMode::Literal, NormalMode::StandardKl] {
            assert_abs_diff_eq!(loss_normal_anchor(&shifted, mode).unwrap().value, 0.5, epsilon = 1e-15);
        }
        // m = 0, v = 1.1
        let wide = batch(vec![array![[1.1], [-1.1]]]);
        let expected = 2.0 * (1.0f64 / 1.1).ln() + 1.21 / 2.0 - 0.5;
        let got = loss_normal_anchor(&wide, NormalMode::Literal).unwrap().value;
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
        assert!(got < 0.0 && (got + 0.0856).abs() < 1e-4);
    }

    #[test]
    fn normal_anchor_needs_two_rows() {
        let b = batch(vec![array![[1.0, 2.0]]]);
        assert!(matches!(loss_normal_anchor(&b, NormalMode::Literal), Err(Error::Validation { .. })));
    }

    #[test]
    fn gaussian_kl_matches_monte_carlo() {
        let g1 = DiagGaussian { mean: array![0.0], var: array![1.0] };
        let g2 = DiagGaussian { mean: array![1.0], var: array![1.0] };
        assert_abs_diff_eq!(g1.symmetric_kl(&g2), 0.5, epsilon = 1e-15);

        // E_{x~g1}[ln g1(x) − ln g2(x)] with unequal variances
        let g3 = DiagGaussian { mean: array![0.3], var: array![2.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 400_000;
        let sampler = Normal::new(0.0, 1.0).unwrap();
        let log_pdf = |g: &DiagGaussian, x: f64| {
            -0.5 * ((2.0 * std::f64::consts::PI * g.var[0]).ln() + (x - g.mean[0]).powi(2) / g.var[0])
        };
        let mc: f64 = (0..n)
            .map(|_| {
                let x: f64 = sampler.sample(&mut rng);
                log_pdf(&g1, x) - log_pdf(&g3, x)
            })
            .sum::<f64>()
            / n as f64;
        assert!((mc - g1.kl(&g3)).abs() < 5e-3, "mc {mc} vs {}", g1.kl(&g3));
    }

    #[test]
    fn gap_report_shape_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = random_batch(&mut rng, 4, 8, 3);
        let report = estimate_gap(&b, &AnchorSpec::Normal { mode: NormalMode::Literal }).unwrap();
        assert_eq!(report.pairwise_kl.len(), 4);
        for i in 0..4 {
            assert_eq!(report.pairwise_kl[i].len(), 4);
            assert_eq!(report.pairwise_kl[i][i], 0.0);
            for j in 0..4 {
                assert_eq!(report.pairwise_kl[i][j], report.pairwise_kl[j][i]);
                assert!(report.pairwise_mean_dist[i][j] >= 0.0);
            }
        }
        let f = Array2::from_shape_fn((6, 2), |(i, k)| (i * 3 + k) as f64);
        let twin = batch(vec![f.clone(), f]);
        let r = estimate_gap(&twin, &AnchorSpec::FixedK { k: 0 }).unwrap();
        assert_eq!(r.pairwise_kl[0][1], 0.0);
        assert_eq!(r.anchor_dist, vec![0.0, 0.0]);
    }

    #[test]
    fn gap_report_json_keys() {
        let f = Array2::from_shape_fn((4, 2), |(i, k)| (i + k) as f64);
        let r = estimate_gap(&batch(vec![f.clone(), f * 2.0]), &AnchorSpec::Adaptive { weights_raw: vec![0.0, 0.0] })
            .unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["pairwise_kl", "pairwise_mean_dist", "anchor_dist"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn select_k_examples() {
        assert_eq!(select_k(&[58.98, 65.34, 74.32, 62.56]).unwrap(), 2);
        assert_eq!(select_k(&[3.0, 3.0, 3.0]).unwrap(), 0);
        assert_eq!(select_k(&[1.0, 2.0]).unwrap(), 1);
        assert!(select_k(&[]).is_err());
    }

    #[test]
    fn symmetric_kl_loss_zero_for_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let (v, ga, gb) = symmetric_kl_loss(&a, &a).unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-15);
        assert!(ga.iter().chain(gb.iter()).all(|g| g.abs() < 1e-12));
    }
}
