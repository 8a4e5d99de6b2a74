use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, upsample2, upsample2_backward, Conv2d, Tensor4,
};
use crate::dataio::{MultiModalSample, ScenarioMask, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::latent_align::LatentBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderStyle {
    /// One encoder of width `J·c` applied to every modality.
    SharedTstar,
    /// `J` independent encoders of width `c`.
    NonShared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub style: EncoderStyle,
    pub base_channels: usize,
    pub latent_dim: usize,
    /// Number of stride-2 stages; inputs must be divisible by `2^depth`.
    pub depth: usize,
    /// Width of the first decoder stage; later stages halve it (minimum 4).
    pub decoder_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            style: EncoderStyle::SharedTstar,
            base_channels: 4,
            latent_dim: 16,
            depth: 3,
            decoder_channels: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::validation("encoder.base_channels", "must be positive"));
        }
        if self.latent_dim == 0 {
            return Err(Error::validation("encoder.latent_dim", "must be positive"));
        }
        if !(1..=5).contains(&self.depth) {
            return Err(Error::validation("encoder.depth", "must be between 1 and 5"));
        }
        if self.decoder_channels < 4 {
            return Err(Error::validation("encoder.decoder_channels", "must be at least 4"));
        }
        Ok(())
    }

    fn decoder_width(&self, stage: usize) -> usize {
        (self.decoder_channels >> stage).max(4)
    }
}

/// Architecture description stored with every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_modalities: usize,
    pub encoder: EncoderConfig,
}

/// Strided convolution stack mapping one modality image to a latent map.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub stages: Vec<Conv2d>,
}

impl Encoder {
    /// Inner stages of the shared encoder use `groups` channel groups, which
    /// keeps its parameter count level with `J` separate narrow encoders.
    fn new(width: usize, latent_dim: usize, depth: usize, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        let stages = (0..depth)
            .map(|s| {
                let last = s + 1 == depth;
                let in_c = if s == 0 { 1 } else { width };
                let out_c = if last { latent_dim } else { width };
                let g = if s > 0 && !last { groups } else { 1 };
                Conv2d::new(in_c, out_c, 3, 2, g, rng)
            })
            .collect();
        Self { stages }
    }

    pub fn num_params(&self) -> usize {
        self.stages.iter().map(Conv2d::num_params).sum()
    }
}

/// Encoder(s), fusion mixer, decoder, predictor head, and the optional
/// adaptive-anchor logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoders: Vec<Encoder>,
    pub mixer: Conv2d,
    pub decoder: Vec<Conv2d>,
    pub head: Conv2d,
    pub anchor_logits: Option<Vec<f64>>,
}

/// Activations of one modality's encoder.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub input: Tensor4,
    /// Post-activation output of every stage; the last is the linear latent map.
    pub outputs: Vec<Tensor4>,
}

impl EncoderTrace {
    pub fn latent_map(&self) -> &Tensor4 {
        self.outputs.last().expect("depth >= 1")
    }
}

/// Encoder activations for every present modality of a batch.
#[derive(Clone, Debug)]
pub struct EncodePass {
    pub traces: Vec<Option<EncoderTrace>>,
    /// Spatially pooled `B×C` features per modality and stage.
    pub pooled: Vec<Option<Vec<Array2<f64>>>>,
}

impl EncodePass {
    pub fn present(&self) -> Vec<usize> {
        (0..self.traces.len()).filter(|&j| self.traces[j].is_some()).collect()
    }

    /// Pooled latent vectors (last stage) as a [`LatentBatch`].
    pub fn latents(&self) -> LatentBatch {
        self.stage_batch(usize::MAX)
    }

    /// Pooled features of encoder stage `stage` (`usize::MAX` = last).
    pub fn stage_batch(&self, stage: usize) -> LatentBatch {
        LatentBatch::new(
            self.pooled
                .iter()
                .map(|p| {
                    p.as_ref().map(|stages| {
                        let s = stage.min(stages.len() - 1);
                        stages[s].clone()
                    })
                })
                .collect(),
        )
        .expect("encode pass has a present modality")
    }

    pub fn maps(&self) -> Vec<(usize, &Tensor4)> {
        self.traces
            .iter()
            .enumerate()
            .filter_map(|(j, t)| t.as_ref().map(|t| (j, t.latent_map())))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct FuseTrace {
    pub present: Vec<usize>,
    pub mean: Tensor4,
    pub out: Tensor4,
}

#[derive(Clone, Debug)]
pub struct DecodeTrace {
    /// Input to each decoder convolution (already upsampled).
    pub inputs: Vec<Tensor4>,
    pub outputs: Vec<Tensor4>,
    pub logits: Tensor4,
}

/// Gradient flowing into the encoders from the losses.
#[derive(Clone, Debug, Default)]
pub struct EncoderGrads {
    /// Per modality: gradient with respect to the latent map.
    pub maps: Vec<Option<Tensor4>>,
    /// Per modality and stage: gradient with respect to pooled features.
    pub pooled: Vec<Option<Vec<Option<Array2<f64>>>>>,
}

impl EncoderGrads {
    pub fn new(num_modalities: usize) -> Self {
        Self {
            maps: vec![None; num_modalities],
            pooled: vec![None; num_modalities],
        }
    }

    pub fn add_map(&mut self, j: usize, g: Tensor4) {
        match &mut self.maps[j] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    pub fn add_pooled(&mut self, j: usize, stage: usize, depth: usize, g: &Array2<f64>) {
        let stages = self.pooled[j].get_or_insert_with(|| vec![None; depth]);
        match &mut stages[stage] {
            Some(existing) => *existing += g,
            slot => *slot = Some(g.clone()),
        }
    }

    /// Adds gradients of a loss on the pooled latents (last stage).
    pub fn add_latents(&mut self, grads: &[Option<Array2<f64>>], depth: usize, scale: f64) {
        for (j, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                self.add_pooled(j, depth - 1, depth, &(g * scale));
            }
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64, anchor_logits: Option<Vec<f64>>) -> Result<Self> {
        config.encoder.validate()?;
        let j = config.num_modalities;
        if j == 0 {
            return Err(Error::validation("num_modalities", "must be at least 1"));
        }
        if let Some(w) = &anchor_logits {
            if w.len() != j {
                return Err(Error::validation("anchor.weights_raw", "length must equal num_modalities"));
            }
        }
        let enc = &config.encoder;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoders = match enc.style {
            EncoderStyle::SharedTstar => {
                vec![Encoder::new(j * enc.base_channels, enc.latent_dim, enc.depth, j, &mut rng)]
            }
            EncoderStyle::NonShared => (0..j)
                .map(|_| Encoder::new(enc.base_channels, enc.latent_dim, enc.depth, 1, &mut rng))
                .collect(),
        };
        let mixer = Conv2d::new(enc.latent_dim, enc.latent_dim, 1, 1, 1, &mut rng);
        let decoder = (0..enc.depth)
            .map(|s| {
                let in_c = if s == 0 { enc.latent_dim } else { enc.decoder_width(s - 1) };
                Conv2d::new(in_c, enc.decoder_width(s), 3, 1, 1, &mut rng)
            })
            .collect();
        let head = Conv2d::new(enc.decoder_width(enc.depth - 1), NUM_CLASSES, 1, 1, 1, &mut rng);
        Ok(Self {
            config,
            encoders,
            mixer,
            decoder,
            head,
            anchor_logits,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.config.num_modalities
    }

    pub fn depth(&self) -> usize {
        self.config.encoder.depth
    }

    pub fn encoder_for(&self, j: usize) -> &Encoder {
        match self.config.encoder.style {
            EncoderStyle::SharedTstar => &self.encoders[0],
            EncoderStyle::NonShared => &self.encoders[j],
        }
    }

    fn encoder_for_mut(&mut self, j: usize) -> &mut Encoder {
        match self.config.encoder.style {
            EncoderStyle::SharedTstar => &mut self.encoders[0],
            EncoderStyle::NonShared => &mut self.encoders[j],
        }
    }

    /// Same structure with every parameter set to zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoders: self
                .encoders
                .iter()
                .map(|e| Encoder {
                    stages: e.stages.iter().map(Conv2d::zeros_like).collect(),
                })
                .collect(),
            mixer: self.mixer.zeros_like(),
            decoder: self.decoder.iter().map(Conv2d::zeros_like).collect(),
            head: self.head.zeros_like(),
            anchor_logits: self.anchor_logits.as_ref().map(|w| vec![0.0; w.len()]),
        }
    }

    /// Total encoder parameters (all encoders together).
    pub fn encoder_param_count(&self) -> usize {
        self.encoders.iter().map(Encoder::num_params).sum()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Every named parameter array in a fixed order.
    pub fn params(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (e, enc) in self.encoders.iter().enumerate() {
            for (s, conv) in enc.stages.iter().enumerate() {
                out.push((format!("encoder.{e}.stage.{s}.weight"), &conv.weight));
                out.push((format!("encoder.{e}.stage.{s}.bias"), &conv.bias));
            }
        }
        out.push(("mixer.weight".into(), &self.mixer.weight));
        out.push(("mixer.bias".into(), &self.mixer.bias));
        for (i, conv) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.{i}.weight"), &conv.weight));
            out.push((format!("decoder.{i}.bias"), &conv.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        if let Some(w) = &self.anchor_logits {
            out.push(("anchor.weights_raw".into(), w));
        }
        out
    }

    /// Mutable views in the same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for enc in &mut self.encoders {
            for conv in &mut enc.stages {
                out.push(&mut conv.weight);
                out.push(&mut conv.bias);
            }
        }
        out.push(&mut self.mixer.weight);
        out.push(&mut self.mixer.bias);
        for conv in &mut self.decoder {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        if let Some(w) = &mut self.anchor_logits {
            out.push(w);
        }
        out
    }

    /// SHA-256 over the little-endian bytes of every parameter.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::with_capacity(self.num_params() * 8);
        for (name, p) in self.params() {
            bytes.extend_from_slice(name.as_bytes());
            for v in p {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::dataio::hex_digest(&bytes)
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let m = 1usize << self.depth();
        if x.c != 1 || !x.h.is_multiple_of(m) || !x.w.is_multiple_of(m) || x.h == 0 || x.w == 0 {
            return Err(Error::validation(
                "input",
                format!("expected 1-channel images with sides divisible by {m}, got {:?}", x.shape()),
            ));
        }
        Ok(())
    }

    pub fn encode_modality(&self, j: usize, x: &Tensor4) -> Result<EncoderTrace> {
        self.check_input(x)?;
        let enc = self.encoder_for(j);
        let mut outputs: Vec<Tensor4> = Vec::with_capacity(enc.stages.len());
        for (s, conv) in enc.stages.iter().enumerate() {
            let input = if s == 0 { x } else { &outputs[s - 1] };
            let pre = conv.forward(input);
            let out = if s + 1 == enc.stages.len() { pre } else { relu(&pre) };
            out.check_finite(&format!("encoder.stage.{s}"))?;
            outputs.push(out);
        }
        Ok(EncoderTrace {
            input: x.clone(),
            outputs,
        })
    }

    /// Encodes every present modality; `None` inputs are absent.
    pub fn encode_all(&self, inputs: &[Option<Tensor4>]) -> Result<EncodePass> {
        if inputs.len() != self.num_modalities() {
            return Err(Error::validation(
                "mask",
                format!("expected {} modality slots, found {}", self.num_modalities(), inputs.len()),
            ));
        }
        if inputs.iter().all(Option::is_none) {
            return Err(Error::validation("mask", "all modalities are absent"));
        }
        let mut traces = Vec::with_capacity(inputs.len());
        let mut pooled = Vec::with_capacity(inputs.len());
        for (j, x) in inputs.iter().enumerate() {
            match x {
                Some(x) => {
                    let t = self.encode_modality(j, x)?;
                    pooled.push(Some(
                        t.outputs
                            .iter()
                            .map(|o| Array2::from_shape_vec((o.n, o.c), global_avg_pool(o)).expect("pool shape"))
                            .collect(),
                    ));
                    traces.push(Some(t));
                }
                None => {
                    traces.push(None);
                    pooled.push(None);
                }
            }
        }
        Ok(EncodePass { traces, pooled })
    }

    /// Backpropagates map and pooled-feature gradients through the encoders.
    pub fn backward_encoders(&self, pass: &EncodePass, grads_in: &EncoderGrads, grads: &mut Model) {
        let depth = self.depth();
        for (j, trace) in pass.traces.iter().enumerate() {
            let Some(trace) = trace else { continue };
            let pooled_g = grads_in.pooled.get(j).and_then(Option::as_ref);
            let mut g: Option<Tensor4> = grads_in.maps.get(j).cloned().flatten();
            let enc = self.encoder_for(j);
            for s in (0..depth).rev() {
                let out = &trace.outputs[s];
                if let Some(pg) = pooled_g.and_then(|p| p[s].as_ref()) {
                    let gm = global_avg_pool_backward(pg.as_slice().expect("standard layout"), out.n, out.c, out.h, out.w);
                    match &mut g {
                        Some(existing) => existing.add_assign(&gm),
                        None => g = Some(gm),
                    }
                }
                let Some(mut gs) = g.take() else { continue };
                if s + 1 != depth {
                    relu_backward(out, &mut gs);
                }
                let input = if s == 0 { &trace.input } else { &trace.outputs[s - 1] };
                let grad_conv = &mut grads.encoder_for_mut(j).stages[s];
                g = enc.stages[s].backward(input, &gs, grad_conv, s > 0);
            }
        }
    }

    /// Masked mean of the present latent maps followed by the mixing layer.
    pub fn fuse(&self, maps: &[(usize, &Tensor4)]) -> Result<FuseTrace> {
        let Some((_, first)) = maps.first() else {
            return Err(Error::validation("mask", "fusion needs at least one present modality"));
        };
        let mut mean = first.zeros_like();
        for (_, m) in maps {
            mean.add_assign(m);
        }
        mean.scale(1.0 / maps.len() as f64);
        let out = relu(&self.mixer.forward(&mean));
        out.check_finite("fusion.mixer")?;
        Ok(FuseTrace {
            present: maps.iter().map(|(j, _)| *j).collect(),
            mean,
            out,
        })
    }

    /// Returns the gradient for each fused map, `(modality, grad)`.
    pub fn backward_fuse(&self, trace: &FuseTrace, grad_out: &Tensor4, grads: &mut Model) -> Vec<(usize, Tensor4)> {
        let mut g = grad_out.clone();
        relu_backward(&trace.out, &mut g);
        let mut g_mean = self
            .mixer
            .backward(&trace.mean, &g, &mut grads.mixer, true)
            .expect("input grad requested");
        g_mean.scale(1.0 / trace.present.len() as f64);
        trace.present.iter().map(|&j| (j, g_mean.clone())).collect()
    }

    pub fn decode(&self, fused: &Tensor4) -> Result<DecodeTrace> {
        let mut inputs = Vec::with_capacity(self.decoder.len());
        let mut outputs: Vec<Tensor4> = Vec::with_capacity(self.decoder.len());
        for (i, conv) in self.decoder.iter().enumerate() {
            let prev = if i == 0 { fused } else { &outputs[i - 1] };
            let up = upsample2(prev);
            let out = relu(&conv.forward(&up));
            out.check_finite(&format!("decoder.{i}"))?;
            inputs.push(up);
            outputs.push(out);
        }
        let logits = self.head.forward(outputs.last().expect("depth >= 1"));
        logits.check_finite("head")?;
        Ok(DecodeTrace { inputs, outputs, logits })
    }

    pub fn backward_decode(&self, trace: &DecodeTrace, grad_logits: &Tensor4, grads: &mut Model) -> Tensor4 {
        let last = trace.outputs.last().expect("depth >= 1");
        let mut g = self
            .head
            .backward(last, grad_logits, &mut grads.head, true)
            .expect("input grad requested");
        for i in (0..self.decoder.len()).rev() {
            relu_backward(&trace.outputs[i], &mut g);
            let g_up = self.decoder[i]
                .backward(&trace.inputs[i], &g, &mut grads.decoder[i], true)
                .expect("input grad requested");
            g = upsample2_backward(&g_up);
        }
        g
    }

    /// Pooled latents of the present modalities.
    pub fn encode(&self, samples: &[&MultiModalSample], mask: &ScenarioMask) -> Result<LatentBatch> {
        Ok(self.encode_all(&batch_inputs(samples, mask)?)?.latents())
    }

    /// Per-pixel class logits (`B×4×H×W`) for the given scenario.
    pub fn predict(&self, samples: &[&MultiModalSample], mask: &ScenarioMask) -> Result<Tensor4> {
        let pass = self.encode_all(&batch_inputs(samples, mask)?)?;
        let fused = self.fuse(&pass.maps())?;
        Ok(self.decode(&fused.out)?.logits)
    }

    /// Arg-max label maps for the given scenario.
    pub fn predict_labels(&self, samples: &[&MultiModalSample], mask: &ScenarioMask) -> Result<Vec<Array2<u8>>> {
        let logits = self.predict(samples, mask)?;
        Ok(argmax_labels(&logits))
    }
}

pub fn argmax_labels(logits: &Tensor4) -> Vec<Array2<u8>> {
    let area = logits.h * logits.w;
    (0..logits.n)
        .map(|n| {
            Array2::from_shape_fn((logits.h, logits.w), |(y, x)| {
                let p = y * logits.w + x;
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for c in 0..logits.c {
                    let v = logits.data[(n * logits.c + c) * area + p];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                best as u8
            })
        })
        .collect()
}

/// Stacks modality `j` of every sample into a `B×1×H×W` tensor.
pub fn modality_tensor(samples: &[&MultiModalSample], j: usize) -> Result<Tensor4> {
    let first = samples
        .first()
        .ok_or_else(|| Error::validation("batch", "empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        let m = s
            .modalities
            .get(j)
            .ok_or_else(|| Error::validation("mask", format!("sample {} lacks modality {j}", s.sample_id)))?;
        if m.dim() != (h, w) {
            return Err(Error::validation("batch", "samples differ in spatial size"));
        }
        data.extend(m.iter().map(|&v| v as f64));
    }
    Ok(Tensor4::from_vec(samples.len(), 1, h, w, data))
}

/// Input slots for a batch under `mask`; absent modalities are never imputed.
pub fn batch_inputs(samples: &[&MultiModalSample], mask: &ScenarioMask) -> Result<Vec<Option<Tensor4>>> {
    let j_all = samples.first().map(|s| s.num_modalities()).unwrap_or(0);
    if mask.len() != j_all {
        return Err(Error::validation(
            "mask",
            format!("mask has {} entries, samples have {j_all} modalities", mask.len()),
        ));
    }
    (0..j_all)
        .map(|j| {
            if mask.is_present(j) {
                modality_tensor(samples, j).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}
