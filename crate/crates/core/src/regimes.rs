//! Training procedures: the aligned base model, knowledge distillation,
//! shared latent space, and domain adaptation, each with or without the
//! alignment term.
//!
//! All randomness derives from `RegimeConfig::seed`: model initialization,
//! batch order, and scenario sampling draw from separate seeded streams, so
//! enabling alignment never perturbs the other streams.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{enumerate_scenarios, MultiModalSample, ScenarioMask};
use crate::error::{Error, Result};
use crate::latent_align::{
    alignment_loss, estimate_gap, simplex_weights, symmetric_kl_loss_floored, AnchorSpec, GapReport,
};
use crate::nets::{
    batch_inputs, segmentation_loss, softmax_backward, softmax_channels, DecodeTrace, EncodePass, EncoderConfig,
    EncoderGrads, EncoderStyle, FuseTrace, Model, ModelConfig, SegLoss, Tensor4,
};

/// Default weight of the alignment term.
pub const DEFAULT_ALPHA: f64 = 0.125;
/// Probability mass left on non-prior modalities by [`init_adaptive_weights`].
pub const PRIOR_SMOOTHING: f64 = 1e-3;
/// Variance floor of the KL terms used as training losses (distillation and
/// branch matching); small floors let dead channels produce huge gradients.
pub const TRAIN_VAR_FLOOR: f64 = 1e-2;
/// Number of training samples used for the per-epoch gap report.
const GAP_PROBE_SIZE: usize = 32;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const SCENARIO_STREAM: u64 = 0x5343_454e;
const STUDENT_STREAM: u64 = 0x5354_5544;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Base,
    Kd,
    Sls,
    Da,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Base => "base",
            Regime::Kd => "kd",
            Regime::Sls => "sls",
            Regime::Da => "da",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Regime::Base),
            "kd" => Ok(Regime::Kd),
            "sls" => Ok(Regime::Sls),
            "da" => Ok(Regime::Da),
            other => Err(Error::validation("regime", format!("unknown regime {other:?}"))),
        }
    }
}

/// How a KD student is initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    #[default]
    Fresh,
    FromTeacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegimeConfig {
    pub regime: Regime,
    pub anchor: AnchorSpec,
    pub alpha: f64,
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm clip per model; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Modalities the student / missing branch sees; `None` draws a uniformly
    /// random scenario every step.
    pub student_mask: Option<ScenarioMask>,
    pub medmap_enabled: bool,
    pub student_init: StudentInit,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Base,
            anchor: AnchorSpec::Adaptive {
                weights_raw: init_adaptive_weights(4, Some(0)).expect("prior in range"),
            },
            alpha: DEFAULT_ALPHA,
            encoder: EncoderConfig::default(),
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.006,
            momentum: 0.9,
            grad_clip: 5.0,
            seed: 0,
            student_mask: None,
            medmap_enabled: true,
            student_init: StudentInit::Fresh,
        }
    }
}

impl RegimeConfig {
    pub fn validate(&self, num_modalities: usize) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::validation("alpha", "must be finite and nonnegative"));
        }
        if self.batch_size < 2 {
            return Err(Error::validation("batch_size", "must be at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate", "must be positive"));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::validation("grad_clip", "must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum", "must lie in [0, 1)"));
        }
        self.encoder.validate()?;
        self.anchor.validate(num_modalities)?;
        if let Some(mask) = &self.student_mask {
            if mask.len() != num_modalities {
                return Err(Error::validation("student_mask", "length differs from the modality count"));
            }
        }
        Ok(())
    }

    fn model_config(&self, num_modalities: usize) -> ModelConfig {
        ModelConfig {
            num_modalities,
            encoder: self.encoder.clone(),
        }
    }

    /// Anchor logits carried as trainable parameters, if any.
    fn trainable_anchor(&self) -> Option<Vec<f64>> {
        match (&self.anchor, self.medmap_enabled) {
            (AnchorSpec::Adaptive { weights_raw }, true) => Some(weights_raw.clone()),
            _ => None,
        }
    }
}

/// Raw weights whose softmax puts `1 − (J−1)ε` on `prior` and `ε` elsewhere,
/// or uniform weights without a prior.
pub fn init_adaptive_weights(num_modalities: usize, prior: Option<usize>) -> Result<Vec<f64>> {
    if num_modalities == 0 {
        return Err(Error::validation("num_modalities", "must be at least 1"));
    }
    match prior {
        None => Ok(vec![0.0; num_modalities]),
        Some(p) if p >= num_modalities => Err(Error::validation(
            "prior",
            format!("index {p} out of range for {num_modalities} modalities"),
        )),
        Some(p) => {
            let eps = PRIOR_SMOOTHING;
            let main = 1.0 - (num_modalities - 1) as f64 * eps;
            Ok((0..num_modalities)
                .map(|j| if j == p { main.ln() } else { eps.ln() })
                .collect())
        }
    }
}

/// A frozen KD teacher and the modalities it was trained on.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub model: Model,
    pub trained_on: ScenarioMask,
}

/// Outcome of one training run.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub regime: Regime,
    /// Trained model: the base model, KD student, SLS model, or DA missing branch.
    pub model: Model,
    /// Full-modality branch of a DA run.
    pub full_branch: Option<Model>,
    /// Per-epoch mean of every named loss term, including `total`.
    pub traces: BTreeMap<String, Vec<f64>>,
    /// Gap report of the trained model on a fixed probe batch, per epoch.
    pub gap_traces: Vec<GapReport>,
    /// Gap report before the first update.
    pub initial_gap: GapReport,
    pub steps: u64,
    pub wall_clock_seconds: f64,
    /// Set when training stopped on a non-finite loss; `model` then holds
    /// the last finite parameters.
    pub diverged: Option<String>,
    pub warnings: Vec<String>,
}

struct MomentumSgd {
    lr: f64,
    momentum: f64,
    clip: f64,
    velocity: Vec<Vec<f64>>,
}

impl MomentumSgd {
    fn new(model: &Model, lr: f64, momentum: f64, clip: f64) -> Self {
        Self {
            lr,
            momentum,
            clip,
            velocity: model.params().iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
        }
    }

    fn step(&mut self, model: &mut Model, grads: &Model) {
        let grads = grads.params();
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let factor = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        for ((param, (_, grad)), vel) in model.params_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            for ((p, g), v) in param.iter_mut().zip(grad.iter()).zip(vel.iter_mut()) {
                *v = self.momentum * *v + factor * g;
                *p -= self.lr * *v;
            }
        }
    }
}

/// Forward state of one encoder → fusion → decoder pass.
struct BranchPass {
    enc: EncodePass,
    fused: FuseTrace,
    dec: DecodeTrace,
    seg: SegLoss,
}

fn branch_forward(model: &Model, batch: &[&MultiModalSample], mask: &ScenarioMask) -> Result<BranchPass> {
    let enc = model.encode_all(&batch_inputs(batch, mask)?)?;
    let fused = model.fuse(&enc.maps())?;
    let dec = model.decode(&fused.out)?;
    let labels: Vec<_> = batch.iter().map(|s| &s.label).collect();
    let seg = segmentation_loss(&dec.logits, &labels)?;
    Ok(BranchPass { enc, fused, dec, seg })
}

/// Backpropagates a logits gradient through decoder and fusion into `enc_grads`.
fn backward_head(
    model: &Model,
    fused: &FuseTrace,
    dec: &DecodeTrace,
    grad_logits: &Tensor4,
    enc_grads: &mut EncoderGrads,
    grads: &mut Model,
) {
    let g_fused = model.backward_decode(dec, grad_logits, grads);
    for (j, g) in model.backward_fuse(fused, &g_fused, grads) {
        enc_grads.add_map(j, g);
    }
}

/// Anchor with adaptive logits taken from the model when they are trained.
fn active_anchor(cfg: &RegimeConfig, model: &Model) -> AnchorSpec {
    match (&cfg.anchor, &model.anchor_logits) {
        (AnchorSpec::Adaptive { .. }, Some(w)) => AnchorSpec::Adaptive { weights_raw: w.clone() },
        (anchor, _) => anchor.clone(),
    }
}

/// Adds `α·L_A` on the pooled latents; returns the weighted value. A fixed
/// anchor contributes nothing on steps where its modality is absent.
fn add_alignment(
    cfg: &RegimeConfig,
    model: &Model,
    enc: &EncodePass,
    enc_grads: &mut EncoderGrads,
    grads: &mut Model,
    warnings: &mut Vec<String>,
) -> Result<f64> {
    let anchor = active_anchor(cfg, model);
    if let AnchorSpec::FixedK { k } = anchor {
        // the anchor modality was dropped from this step's scenario
        if !enc.present().contains(&k) {
            return Ok(0.0);
        }
    }
    let loss = alignment_loss(&enc.latents(), &anchor)?;
    if let Some(w) = &loss.warning {
        if warnings.len() < 8 && !warnings.contains(w) {
            warnings.push(w.clone());
        }
    }
    enc_grads.add_latents(&loss.grad, model.depth(), cfg.alpha);
    if let (Some(dst), Some(g)) = (grads.anchor_logits.as_mut(), loss.grad_weights_raw.as_ref()) {
        for (d, gi) in dst.iter_mut().zip(g) {
            *d += cfg.alpha * gi;
        }
    }
    Ok(cfg.alpha * loss.value)
}

/// Parameter arrays that no loss term can reach under this configuration.
pub fn dead_parameters(model: &Model, reachable: &[bool], uses_anchor: bool) -> Vec<String> {
    let mut dead = Vec::new();
    if model.config.encoder.style == EncoderStyle::NonShared {
        for (j, &r) in reachable.iter().enumerate() {
            if !r {
                dead.push(format!("encoder.{j}"));
            }
        }
    }
    if model.anchor_logits.is_some() && !uses_anchor {
        dead.push("anchor.weights_raw".into());
    }
    dead
}

fn dead_warning(model: &Model, reachable: &[bool], uses_anchor: bool) -> Option<String> {
    let dead = dead_parameters(model, reachable, uses_anchor);
    (!dead.is_empty()).then(|| format!("parameters receive no gradient: {}", dead.join(", ")))
}

/// Scenario source for the student / masked branch.
struct ScenarioSampler {
    fixed: Option<ScenarioMask>,
    all: Vec<ScenarioMask>,
    rng: ChaCha8Rng,
}

impl ScenarioSampler {
    fn new(cfg: &RegimeConfig, num_modalities: usize) -> Result<Self> {
        Ok(Self {
            fixed: cfg.student_mask.clone(),
            all: enumerate_scenarios(num_modalities)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ SCENARIO_STREAM),
        })
    }

    fn next(&mut self) -> ScenarioMask {
        match &self.fixed {
            Some(m) => m.clone(),
            None => self.all[self.rng.random_range(0..self.all.len())].clone(),
        }
    }

    fn reachable(&self, num_modalities: usize) -> Vec<bool> {
        match &self.fixed {
            Some(m) => m.as_slice().to_vec(),
            None => vec![true; num_modalities],
        }
    }
}

/// Shuffled mini-batches; a trailing batch of one sample joins its neighbour.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

fn check_dataset(dataset: &[MultiModalSample]) -> Result<usize> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::validation("dataset", "training set is empty"))?;
    if dataset.len() < 2 {
        return Err(Error::validation("dataset", "need at least two training samples"));
    }
    Ok(first.num_modalities())
}

/// Gap report of `model` on the probe batch with every modality present.
pub fn probe_gap(model: &Model, probe: &[&MultiModalSample], anchor: &AnchorSpec) -> Result<GapReport> {
    let mask = ScenarioMask::full(model.num_modalities());
    let latents = model.encode(probe, &mask)?;
    estimate_gap(&latents, anchor)
}

type StepTerms = Vec<(&'static str, f64)>;

/// Shared epoch/batch loop. `step` receives the current models, the batch,
/// and zeroed gradient buffers, and returns the named loss terms.
fn run_loop<F>(
    regime: Regime,
    dataset: &[MultiModalSample],
    cfg: &RegimeConfig,
    mut models: Vec<Model>,
    gap_model: usize,
    initial_warnings: Vec<String>,
    mut step: F,
) -> Result<(Vec<Model>, TrainResult)>
where
    F: FnMut(&[Model], &[&MultiModalSample], &mut [Model], &mut Vec<String>) -> Result<StepTerms>,
{
    let start = Instant::now();
    let probe: Vec<&MultiModalSample> = dataset.iter().take(GAP_PROBE_SIZE).collect();
    let initial_gap = probe_gap(&models[gap_model], &probe, &active_anchor(cfg, &models[gap_model]))?;
    let mut optimizers: Vec<MomentumSgd> = models
        .iter()
        .map(|m| MomentumSgd::new(m, cfg.learning_rate, cfg.momentum, cfg.grad_clip))
        .collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut traces: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut gap_traces = Vec::with_capacity(cfg.epochs);
    let mut warnings = initial_warnings;
    let mut steps = 0u64;
    let mut diverged = None;

    'epochs: for epoch in 0..cfg.epochs {
        let mut sums: BTreeMap<&'static str, f64> = BTreeMap::new();
        let mut count = 0usize;
        for batch_idx in epoch_batches(dataset.len(), cfg.batch_size, &mut shuffle_rng) {
            let batch: Vec<&MultiModalSample> = batch_idx.iter().map(|&i| &dataset[i]).collect();
            let mut grads: Vec<Model> = models.iter().map(Model::zeros_like).collect();
            let terms = match step(&models, &batch, &mut grads, &mut warnings) {
                Ok(t) => t,
                Err(Error::Numeric { layer }) => {
                    diverged = Some(format!("non-finite activation in {layer} at epoch {epoch}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let total: f64 = terms.iter().map(|(_, v)| v).sum();
            let grads_finite = grads
                .iter()
                .all(|g| g.params().iter().all(|(_, p)| p.iter().all(|v| v.is_finite())));
            if !total.is_finite() || !grads_finite {
                diverged = Some(format!("non-finite loss at epoch {epoch}, step {steps}"));
                break 'epochs;
            }
            for (name, v) in &terms {
                *sums.entry(name).or_default() += v;
            }
            *sums.entry("total").or_default() += total;
            for ((m, g), opt) in models.iter_mut().zip(&grads).zip(&mut optimizers) {
                opt.step(m, g);
            }
            count += 1;
            steps += 1;
        }
        for (name, sum) in sums {
            traces.entry(name.to_string()).or_default().push(sum / count as f64);
        }
        if let Some(w) = &models[gap_model].anchor_logits {
            let total: f64 = simplex_weights(w).iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Numeric {
                    layer: "anchor.weights_raw".into(),
                });
            }
        }
        gap_traces.push(probe_gap(&models[gap_model], &probe, &active_anchor(cfg, &models[gap_model]))?);
    }

    let result = TrainResult {
        regime,
        model: models[0].clone(),
        full_branch: None,
        traces,
        gap_traces,
        initial_gap,
        steps,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        diverged,
        warnings,
    };
    Ok((models, result))
}

/// Base model on full-modality inputs: `L_seg + α·L_A` with every modality's
/// pooled latent pulled individually towards the anchor.
pub fn train_base(dataset: &[MultiModalSample], cfg: &RegimeConfig) -> Result<TrainResult> {
    let j = check_dataset(dataset)?;
    cfg.validate(j)?;
    let model = Model::new(cfg.model_config(j), cfg.seed, cfg.trainable_anchor())?;
    let dead: Vec<String> = dead_warning(&model, &vec![true; j], cfg.medmap_enabled).into_iter().collect();
    let full = ScenarioMask::full(j);
    let (_, result) = run_loop(Regime::Base, dataset, cfg, vec![model], 0, dead, |models, batch, grads, warnings| {
        let model = &models[0];
        let grads = &mut grads[0];
        let pass = branch_forward(model, batch, &full)?;
        let mut enc_grads = EncoderGrads::new(j);
        backward_head(model, &pass.fused, &pass.dec, &pass.seg.grad, &mut enc_grads, grads);
        let mut terms = vec![("seg", pass.seg.total())];
        if cfg.medmap_enabled {
            terms.push(("align", add_alignment(cfg, model, &pass.enc, &mut enc_grads, grads, warnings)?));
        }
        model.backward_encoders(&pass.enc, &enc_grads, grads);
        Ok(terms)
    })?;
    Ok(result)
}

/// Distils a frozen teacher into a student that sees only the student
/// scenario: `L_seg + Σ_j symKL(student z_j, teacher z_j) / J_present`.
pub fn train_kd(dataset: &[MultiModalSample], teacher: &Teacher, cfg: &RegimeConfig) -> Result<TrainResult> {
    let j = check_dataset(dataset)?;
    cfg.validate(j)?;
    if teacher.model.num_modalities() != j || teacher.trained_on.len() != j {
        return Err(Error::Config("teacher modality count differs from the dataset".into()));
    }
    let sampler = ScenarioSampler::new(cfg, j)?;
    let reachable = sampler.reachable(j);
    if let Some(missing) = (0..j).find(|&m| reachable[m] && !teacher.trained_on.is_present(m)) {
        return Err(Error::Config(format!(
            "student may see modality {missing}, which the teacher never saw"
        )));
    }
    let checksum_before = teacher.model.checksum();
    let student = match cfg.student_init {
        StudentInit::Fresh => Model::new(cfg.model_config(j), cfg.seed ^ STUDENT_STREAM, None)?,
        StudentInit::FromTeacher => Model {
            anchor_logits: None,
            ..teacher.model.clone()
        },
    };
    let dead: Vec<String> = dead_warning(&student, &reachable, false).into_iter().collect();
    let mut sampler = sampler;
    let frozen = &teacher.model;
    let (_, result) = run_loop(Regime::Kd, dataset, cfg, vec![student], 0, dead, |models, batch, grads, _| {
        let student = &models[0];
        let grads = &mut grads[0];
        let mask = sampler.next();
        let pass = branch_forward(student, batch, &mask)?;
        let teacher_latents = frozen.encode(batch, &mask)?;
        let mut enc_grads = EncoderGrads::new(j);
        backward_head(student, &pass.fused, &pass.dec, &pass.seg.grad, &mut enc_grads, grads);

        let student_latents = pass.enc.latents();
        let present = mask.indices();
        let scale = 1.0 / present.len() as f64;
        let mut kd = 0.0;
        for &m in &present {
            let s = student_latents.feature(m).expect("present");
            let t = teacher_latents.feature(m).expect("present");
            let (v, gs, _) = symmetric_kl_loss_floored(s, t, TRAIN_VAR_FLOOR)?;
            kd += scale * v;
            enc_grads.add_pooled(m, student.depth() - 1, student.depth(), &(gs * scale));
        }
        student.backward_encoders(&pass.enc, &enc_grads, grads);
        Ok(vec![("seg", pass.seg.total()), ("kd", kd)])
    })?;
    if teacher.model.checksum() != checksum_before {
        return Err(Error::Config("teacher parameters changed during distillation".into()));
    }
    Ok(result)
}

/// Shared latent space with modality dropout:
/// `L_seg + L_f + α·L_A`, where `L_f` is the mean squared disagreement
/// between the fused softmax and each single-modality softmax.
pub fn train_sls(dataset: &[MultiModalSample], cfg: &RegimeConfig) -> Result<TrainResult> {
    let j = check_dataset(dataset)?;
    cfg.validate(j)?;
    let mut sampler = ScenarioSampler::new(cfg, j)?;
    let model = Model::new(cfg.model_config(j), cfg.seed, cfg.trainable_anchor())?;
    let dead: Vec<String> = dead_warning(&model, &sampler.reachable(j), cfg.medmap_enabled).into_iter().collect();
    let (_, result) = run_loop(Regime::Sls, dataset, cfg, vec![model], 0, dead, |models, batch, grads, warnings| {
        let model = &models[0];
        let grads = &mut grads[0];
        let mask = sampler.next();
        let pass = branch_forward(model, batch, &mask)?;
        let mut enc_grads = EncoderGrads::new(j);

        let (fusion, grad_fused_logits) = fusion_consistency(model, &pass, &mut enc_grads, grads)?;
        let mut g_logits = pass.seg.grad.clone();
        if let Some(g) = grad_fused_logits {
            g_logits.add_assign(&g);
        }
        backward_head(model, &pass.fused, &pass.dec, &g_logits, &mut enc_grads, grads);

        let mut terms = vec![("seg", pass.seg.total()), ("fusion", fusion)];
        if cfg.medmap_enabled {
            terms.push(("align", add_alignment(cfg, model, &pass.enc, &mut enc_grads, grads, warnings)?));
        }
        model.backward_encoders(&pass.enc, &enc_grads, grads);
        Ok(terms)
    })?;
    Ok(result)
}

/// Fusion-consistency loss and its gradient for the fused logits. Single
/// modality branches are backpropagated into `enc_grads` directly.
fn fusion_consistency(
    model: &Model,
    pass: &BranchPass,
    enc_grads: &mut EncoderGrads,
    grads: &mut Model,
) -> Result<(f64, Option<Tensor4>)> {
    let maps = pass.enc.maps();
    if maps.len() < 2 {
        return Ok((0.0, None));
    }
    let fused_probs = softmax_channels(&pass.dec.logits);
    let n_elems = fused_probs.data.len() as f64;
    let scale = 1.0 / (maps.len() as f64 * n_elems);
    let mut value = 0.0;
    let mut grad_fused_probs = fused_probs.zeros_like();
    for &(jm, map) in &maps {
        let fused_single = model.fuse(&[(jm, map)])?;
        let dec_single = model.decode(&fused_single.out)?;
        let probs = softmax_channels(&dec_single.logits);
        let mut grad_single = probs.zeros_like();
        for i in 0..probs.data.len() {
            let d = fused_probs.data[i] - probs.data[i];
            value += scale * d * d;
            grad_fused_probs.data[i] += 2.0 * scale * d;
            grad_single.data[i] = -2.0 * scale * d;
        }
        let g_logits = softmax_backward(&probs, &grad_single);
        backward_head(model, &fused_single, &dec_single, &g_logits, enc_grads, grads);
    }
    Ok((value, Some(softmax_backward(&fused_probs, &grad_fused_probs))))
}

/// Mean over present modalities of pooled stage features, per stage.
fn branch_stage_features(pass: &EncodePass, depth: usize) -> Vec<ndarray::Array2<f64>> {
    let present = pass.present();
    (0..depth)
        .map(|s| {
            let mut acc = pass.pooled[present[0]].as_ref().expect("present")[s].clone();
            for &m in &present[1..] {
                acc += &pass.pooled[m].as_ref().expect("present")[s];
            }
            acc / present.len() as f64
        })
        .collect()
}

/// Co-trains a full-modality branch and a masked branch:
/// `L_seg^F + L_seg^M + L_MI + α·L_A`, with `L_MI` the mean over encoder
/// stages of the symmetric Gaussian KL between branch-averaged features and
/// the alignment term applied inside the full branch.
pub fn train_da(dataset: &[MultiModalSample], cfg: &RegimeConfig) -> Result<TrainResult> {
    let j = check_dataset(dataset)?;
    cfg.validate(j)?;
    let mut sampler = ScenarioSampler::new(cfg, j)?;
    let full_model = Model::new(cfg.model_config(j), cfg.seed, cfg.trainable_anchor())?;
    let missing_model = Model {
        anchor_logits: None,
        ..full_model.clone()
    };
    let dead: Vec<String> = dead_warning(&full_model, &vec![true; j], cfg.medmap_enabled)
        .into_iter()
        .chain(dead_warning(&missing_model, &sampler.reachable(j), false))
        .collect();
    let full = ScenarioMask::full(j);
    let depth = cfg.encoder.depth;

    // models[0] = missing branch (the deployed model), models[1] = full branch
    let (models, mut result) = run_loop(
        Regime::Da,
        dataset,
        cfg,
        vec![missing_model, full_model],
        1,
        dead,
        |models, batch, grads, warnings| {
            let (missing, fullm) = (&models[0], &models[1]);
            let (g_missing, g_full) = grads.split_at_mut(1);
            let (g_missing, g_full) = (&mut g_missing[0], &mut g_full[0]);
            let mask = sampler.next();

            let pf = branch_forward(fullm, batch, &full)?;
            let pm = branch_forward(missing, batch, &mask)?;
            let mut enc_f = EncoderGrads::new(j);
            let mut enc_m = EncoderGrads::new(j);
            backward_head(fullm, &pf.fused, &pf.dec, &pf.seg.grad, &mut enc_f, g_full);
            backward_head(missing, &pm.fused, &pm.dec, &pm.seg.grad, &mut enc_m, g_missing);

            let feats_f = branch_stage_features(&pf.enc, depth);
            let feats_m = branch_stage_features(&pm.enc, depth);
            let stage_scale = 1.0 / depth as f64;
            let mut mi = 0.0;
            let present_f = pf.enc.present();
            let present_m = pm.enc.present();
            for s in 0..depth {
                let (v, gf, gm) = symmetric_kl_loss_floored(&feats_f[s], &feats_m[s], TRAIN_VAR_FLOOR)?;
                mi += stage_scale * v;
                let gf = gf * (stage_scale / present_f.len() as f64);
                let gm = gm * (stage_scale / present_m.len() as f64);
                for &m in &present_f {
                    enc_f.add_pooled(m, s, depth, &gf);
                }
                for &m in &present_m {
                    enc_m.add_pooled(m, s, depth, &gm);
                }
            }

            let mut terms = vec![
                ("seg_full", pf.seg.total()),
                ("seg_missing", pm.seg.total()),
                ("mi", mi),
            ];
            if cfg.medmap_enabled {
                terms.push(("align", add_alignment(cfg, fullm, &pf.enc, &mut enc_f, g_full, warnings)?));
            }
            fullm.backward_encoders(&pf.enc, &enc_f, g_full);
            missing.backward_encoders(&pm.enc, &enc_m, g_missing);
            Ok(terms)
        },
    )?;
    result.full_branch = Some(models[1].clone());
    Ok(result)
}

/// Runs the regime named in `cfg`; KD trains its own teacher with the
/// base regime (same seed and alignment settings) first.
pub fn train(dataset: &[MultiModalSample], cfg: &RegimeConfig) -> Result<(TrainResult, Option<TrainResult>)> {
    match cfg.regime {
        Regime::Base => Ok((train_base(dataset, cfg)?, None)),
        Regime::Sls => Ok((train_sls(dataset, cfg)?, None)),
        Regime::Da => Ok((train_da(dataset, cfg)?, None)),
        Regime::Kd => {
            let teacher_cfg = RegimeConfig {
                regime: Regime::Base,
                ..cfg.clone()
            };
            let teacher_run = train_base(dataset, &teacher_cfg)?;
            let j = teacher_run.model.num_modalities();
            let teacher = Teacher {
                model: teacher_run.model.clone(),
                trained_on: ScenarioMask::full(j),
            };
            Ok((train_kd(dataset, &teacher, cfg)?, Some(teacher_run)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_dataset, SyntheticSpec};

    fn tiny_data(n: usize) -> Vec<MultiModalSample> {
        let spec = SyntheticSpec {
            height: 16,
            width: 16,
            n_samples: n,
            gap_strength: 2.0,
            ..SyntheticSpec::default()
        };
        generate_dataset(&spec, 5).unwrap()
    }

    fn tiny_cfg(regime: Regime) -> RegimeConfig {
        RegimeConfig {
            regime,
            encoder: EncoderConfig {
                base_channels: 2,
                latent_dim: 8,
                depth: 2,
                decoder_channels: 8,
                ..EncoderConfig::default()
            },
            epochs: 2,
            batch_size: 4,
            ..RegimeConfig::default()
        }
    }

    fn assert_totals_consistent(r: &TrainResult) {
        let total = &r.traces["total"];
        for (e, t) in total.iter().enumerate() {
            let parts: f64 = r.traces.iter().filter(|(k, _)| *k != "total").map(|(_, v)| v[e]).sum();
            assert!((parts - t).abs() < 1e-6, "epoch {e}: {parts} vs {t}");
        }
        for v in r.traces.values() {
            assert_eq!(v.len(), r.gap_traces.len());
            assert!(v.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn default_alpha_is_one_eighth() {
        assert_eq!(RegimeConfig::default().alpha, 0.125);
        assert_eq!(DEFAULT_ALPHA, 0.125);
    }

    #[test]
    fn adaptive_weight_initialization() {
        let w = simplex_weights(&init_adaptive_weights(4, Some(3)).unwrap());
        for (got, want) in w.iter().zip([0.001, 0.001, 0.001, 0.997]) {
            assert!((got - want).abs() < 1e-12);
        }
        let w = simplex_weights(&init_adaptive_weights(4, Some(0)).unwrap());
        assert!((w[0] - 0.997).abs() < 1e-12);
        let uniform = simplex_weights(&init_adaptive_weights(3, None).unwrap());
        assert!(uniform.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(simplex_weights(&init_adaptive_weights(1, Some(0)).unwrap()), vec![1.0]);
        assert!(init_adaptive_weights(4, Some(4)).is_err());
    }

    #[test]
    fn base_traces_and_medmap_switch() {
        let data = tiny_data(12);
        let on = train_base(&data, &tiny_cfg(Regime::Base)).unwrap();
        assert!(on.traces.contains_key("align"));
        assert_eq!(on.traces["total"].len(), 2);
        assert_totals_consistent(&on);
        assert!(on.diverged.is_none());

        let off_cfg = RegimeConfig {
            medmap_enabled: false,
            ..tiny_cfg(Regime::Base)
        };
        let off = train_base(&data, &off_cfg).unwrap();
        assert_eq!(off.traces.keys().collect::<Vec<_>>(), vec!["seg", "total"]);
        assert!(off.model.anchor_logits.is_none());
    }

    #[test]
    fn zero_alpha_matches_disabled_alignment() {
        let data = tiny_data(10);
        let zero = RegimeConfig {
            alpha: 0.0,
            ..tiny_cfg(Regime::Base)
        };
        let off = RegimeConfig {
            medmap_enabled: false,
            ..tiny_cfg(Regime::Base)
        };
        let a = train_base(&data, &zero).unwrap();
        let b = train_base(&data, &off).unwrap();
        for (x, y) in a.traces["total"].iter().zip(&b.traces["total"]) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(a.traces["align"].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data(10);
        let cfg = tiny_cfg(Regime::Sls);
        let a = train_sls(&data, &cfg).unwrap();
        let b = train_sls(&data, &cfg).unwrap();
        assert_eq!(a.model.checksum(), b.model.checksum());
        assert_eq!(a.traces, b.traces);
        let c = train_sls(&data, &RegimeConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.model.checksum(), c.model.checksum());
    }

    #[test]
    fn adaptive_weights_are_learned_and_stay_on_simplex() {
        let data = tiny_data(10);
        let cfg = RegimeConfig {
            anchor: AnchorSpec::Adaptive {
                weights_raw: init_adaptive_weights(4, None).unwrap(),
            },
            ..tiny_cfg(Regime::Base)
        };
        let r = train_base(&data, &cfg).unwrap();
        let raw = r.model.anchor_logits.as_ref().unwrap();
        assert!(raw.iter().any(|&v| v != 0.0));
        assert!((simplex_weights(raw).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn teacher(data: &[MultiModalSample]) -> Teacher {
        let run = train_base(data, &tiny_cfg(Regime::Base)).unwrap();
        Teacher {
            model: run.model,
            trained_on: ScenarioMask::full(4),
        }
    }

    #[test]
    fn kd_keeps_teacher_frozen_and_matches_when_copied() {
        let data = tiny_data(10);
        let t = teacher(&data);
        let before = t.model.checksum();
        let cfg = RegimeConfig {
            student_mask: Some(ScenarioMask::parse("ooxx").unwrap()),
            student_init: StudentInit::FromTeacher,
            learning_rate: 1e-12,
            epochs: 1,
            ..tiny_cfg(Regime::Kd)
        };
        let r = train_kd(&data, &t, &cfg).unwrap();
        assert_eq!(t.model.checksum(), before);
        assert!(r.traces["kd"][0] < 1e-6, "kd = {}", r.traces["kd"][0]);
        assert!(!r.traces.contains_key("align"));

        let fresh = train_kd(&data, &t, &tiny_cfg(Regime::Kd)).unwrap();
        assert!(fresh.traces["kd"][0] > 1e-6);
        assert_totals_consistent(&fresh);
    }

    #[test]
    fn kd_rejects_modalities_unknown_to_teacher() {
        let data = tiny_data(6);
        let mut t = teacher(&data);
        t.trained_on = ScenarioMask::parse("ooox").unwrap();
        let cfg = RegimeConfig {
            student_mask: Some(ScenarioMask::parse("xxoo").unwrap()),
            ..tiny_cfg(Regime::Kd)
        };
        assert!(matches!(train_kd(&data, &t, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn sls_fusion_term_vanishes_for_single_modality() {
        let data = tiny_data(8);
        let cfg = RegimeConfig {
            student_mask: Some(ScenarioMask::parse("xxox").unwrap()),
            ..tiny_cfg(Regime::Sls)
        };
        let r = train_sls(&data, &cfg).unwrap();
        assert!(r.traces["fusion"].iter().all(|&v| v == 0.0));

        let random = train_sls(&data, &tiny_cfg(Regime::Sls)).unwrap();
        assert!(random.traces["fusion"].iter().any(|&v| v > 0.0));
        assert_totals_consistent(&random);
    }

    #[test]
    fn sls_fixed_anchor_tolerates_missing_anchor_modality() {
        let data = tiny_data(8);
        let cfg = RegimeConfig {
            anchor: AnchorSpec::FixedK { k: 0 },
            ..tiny_cfg(Regime::Sls)
        };
        let r = train_sls(&data, &cfg).unwrap();
        assert!(r.diverged.is_none());
        assert!(r.model.anchor_logits.is_none());
    }

    #[test]
    fn da_branches_start_equal_and_both_train() {
        let data = tiny_data(10);
        let still = RegimeConfig {
            student_mask: Some(ScenarioMask::full(4)),
            learning_rate: 1e-12,
            epochs: 1,
            ..tiny_cfg(Regime::Da)
        };
        let r = train_da(&data, &still).unwrap();
        assert!(r.traces["mi"][0] < 1e-9, "mi = {}", r.traces["mi"][0]);

        let cfg = tiny_cfg(Regime::Da);
        let init = Model::new(cfg.model_config(4), cfg.seed, None).unwrap();
        let r = train_da(&data, &cfg).unwrap();
        let full = r.full_branch.as_ref().unwrap();
        assert_ne!(r.model.checksum(), init.checksum());
        let init_full = Model::new(cfg.model_config(4), cfg.seed, cfg.trainable_anchor()).unwrap();
        assert_ne!(full.checksum(), init_full.checksum());
        assert_ne!(full.checksum(), r.model.checksum());
        assert_totals_consistent(&r);
    }

    #[test]
    fn divergence_keeps_last_finite_parameters() {
        let data = tiny_data(8);
        let cfg = RegimeConfig {
            learning_rate: 1e6,
            grad_clip: 0.0,
            momentum: 0.0,
            epochs: 5,
            ..tiny_cfg(Regime::Base)
        };
        let r = train_base(&data, &cfg).unwrap();
        assert!(r.diverged.is_some());
        assert!(r.model.params().iter().all(|(_, p)| p.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn rejects_bad_configs() {
        let data = tiny_data(4);
        for cfg in [
            RegimeConfig { alpha: -1.0, ..tiny_cfg(Regime::Base) },
            RegimeConfig { batch_size: 1, ..tiny_cfg(Regime::Base) },
            RegimeConfig { anchor: AnchorSpec::FixedK { k: 9 }, ..tiny_cfg(Regime::Base) },
        ] {
            assert!(train_base(&data, &cfg).is_err());
        }
        assert!(train_base(&data[..1], &tiny_cfg(Regime::Base)).is_err());
    }
}
