//! Run configuration files.
//!
//! Grammar of the key-value form, one entry per line:
//!
//! ```text
//! # comment
//! key = value
//! ```
//!
//! A value is read as a JSON literal when it parses as one (numbers, `true`,
//! `false`, `null`, quoted strings, arrays); `on`/`off` and `none` are
//! shorthands for `true`/`false` and `null`; anything else is a bare string.
//! Files whose first non-blank character is `{` are parsed as JSON objects.
//! Unknown keys are rejected in both forms.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dataio::{default_contrast_profile, ScenarioMask, SyntheticSpec};
use crate::error::{Error, Result};
use crate::latent_align::{AnchorSpec, NormalMode};
use crate::nets::{EncoderConfig, EncoderStyle};
use crate::regimes::{init_adaptive_weights, Regime, RegimeConfig, StudentInit};
use crate::theory::ProbeParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    Adaptive,
    Fixed,
    Normal,
}

/// Everything one command invocation needs, as a flat key set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // synthetic data
    pub num_modalities: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub gap_strength: f64,
    pub n_samples: usize,
    pub contrast_profile: Option<Vec<[f64; 4]>>,
    pub data_seed: u64,
    /// Existing dataset directory; when unset the dataset is generated in memory.
    pub data_dir: Option<PathBuf>,

    // training
    pub regime: Regime,
    pub anchor: AnchorKind,
    pub anchor_k: usize,
    /// Modality that starts with almost all adaptive weight; `null` = uniform.
    pub anchor_prior: Option<usize>,
    pub normal_mode: NormalMode,
    pub alpha: f64,
    pub medmap: bool,
    pub encoder_style: EncoderStyle,
    pub base_channels: usize,
    pub latent_dim: usize,
    pub depth: usize,
    pub decoder_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub grad_clip: f64,
    /// `o`/`x` string; unset draws a random scenario every step.
    pub student_mask: Option<String>,
    pub student_init: StudentInit,

    // output and seeds
    pub out_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,

    // theory probe
    pub sigmas: Vec<f64>,
    pub instances: usize,
    pub theory_y_size: usize,
    pub theory_z_size: usize,
    pub theory_modalities: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = SyntheticSpec::default();
        let regime = RegimeConfig::default();
        let probe = ProbeParams::default();
        Self {
            num_modalities: spec.num_modalities,
            height: spec.height,
            width: spec.width,
            noise_sigma: spec.noise_sigma,
            gap_strength: 2.0,
            n_samples: spec.n_samples,
            contrast_profile: None,
            data_seed: 0,
            data_dir: None,
            regime: Regime::Base,
            anchor: AnchorKind::Adaptive,
            anchor_k: 0,
            anchor_prior: Some(0),
            normal_mode: NormalMode::Literal,
            alpha: regime.alpha,
            medmap: true,
            encoder_style: regime.encoder.style,
            base_channels: regime.encoder.base_channels,
            latent_dim: regime.encoder.latent_dim,
            depth: regime.encoder.depth,
            decoder_channels: regime.encoder.decoder_channels,
            epochs: regime.epochs,
            batch_size: regime.batch_size,
            learning_rate: regime.learning_rate,
            momentum: regime.momentum,
            grad_clip: regime.grad_clip,
            student_mask: None,
            student_init: StudentInit::Fresh,
            out_dir: None,
            seeds: Vec::new(),
            sigmas: probe.sigmas,
            instances: probe.instances,
            theory_y_size: probe.y_size,
            theory_z_size: probe.z_size,
            theory_modalities: probe.num_modalities,
        }
    }
}

/// Interprets one key-value right-hand side.
pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    match raw {
        "on" => return Value::Bool(true),
        "off" => return Value::Bool(false),
        "none" => return Value::Null,
        _ => {}
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Parses the key-value grammar into a JSON object; duplicate keys are errors.
pub fn parse_key_values(text: &str) -> Result<Map<String, Value>> {
    let mut map = Map::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if map.insert(key.to_string(), parse_value(value)).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
        }
    }
    Ok(map)
}

fn parse_document(text: &str) -> Result<Map<String, Value>> {
    if text.trim_start().starts_with('{') {
        match serde_json::from_str::<Value>(text) {
            Ok(Value::Object(map)) => Ok(map),
            Ok(_) => Err(Error::Config("JSON config must be an object".into())),
            Err(e) => Err(Error::Config(format!("invalid JSON config: {e}"))),
        }
    } else {
        parse_key_values(text)
    }
}

impl RunConfig {
    /// Builds a config from an optional file plus `key=value` overrides that
    /// take precedence over the file.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut map = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                parse_document(&text)?
            }
            None => Map::new(),
        };
        for (k, v) in overrides {
            map.insert(k.clone(), parse_value(v));
        }
        Self::from_map(map)
    }

    pub fn from_map(map: Map<String, Value>) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_map(parse_document(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic_spec().validate()?;
        self.regime_config(0)?.validate(self.num_modalities)?;
        if self.sigmas.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::validation("sigmas", "every sigma must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Key-value rendering that [`RunConfig::parse`] reads back unchanged.
    pub fn to_key_values(&self) -> Result<String> {
        let Value::Object(map) = serde_json::to_value(self)? else {
            unreachable!("struct serializes to an object")
        };
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        Ok(out)
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_modalities: self.num_modalities,
            height: self.height,
            width: self.width,
            contrast_profile: self
                .contrast_profile
                .clone()
                .unwrap_or_else(|| default_contrast_profile(self.num_modalities)),
            noise_sigma: self.noise_sigma,
            gap_strength: self.gap_strength,
            n_samples: self.n_samples,
        }
    }

    pub fn anchor_spec(&self) -> Result<AnchorSpec> {
        Ok(match self.anchor {
            AnchorKind::Adaptive => AnchorSpec::Adaptive {
                weights_raw: init_adaptive_weights(self.num_modalities, self.anchor_prior)?,
            },
            AnchorKind::Fixed => AnchorSpec::FixedK { k: self.anchor_k },
            AnchorKind::Normal => AnchorSpec::Normal { mode: self.normal_mode },
        })
    }

    pub fn regime_config(&self, seed: u64) -> Result<RegimeConfig> {
        let student_mask = match &self.student_mask {
            Some(s) => Some(ScenarioMask::parse(s)?),
            None => None,
        };
        Ok(RegimeConfig {
            regime: self.regime,
            anchor: self.anchor_spec()?,
            alpha: self.alpha,
            encoder: EncoderConfig {
                style: self.encoder_style,
                base_channels: self.base_channels,
                latent_dim: self.latent_dim,
                depth: self.depth,
                decoder_channels: self.decoder_channels,
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            grad_clip: self.grad_clip,
            seed,
            student_mask,
            medmap_enabled: self.medmap,
            student_init: self.student_init,
        })
    }

    pub fn probe_params(&self, seed: u64) -> ProbeParams {
        ProbeParams {
            sigmas: self.sigmas.clone(),
            instances: self.instances,
            seed,
            y_size: self.theory_y_size,
            z_size: self.theory_z_size,
            num_modalities: self.theory_modalities,
        }
    }

    /// Seeds, which must be given explicitly.
    pub fn require_seeds(&self) -> Result<&[u64]> {
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds given; set `seeds` or pass --seed".into()));
        }
        Ok(&self.seeds)
    }

    pub fn require_out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory; set `out_dir` or pass --out".into()))
    }

    /// Directory name of the run for `seed`.
    pub fn run_name(&self, seed: u64) -> String {
        let anchor = match self.anchor {
            AnchorKind::Adaptive => "adaptive".to_string(),
            AnchorKind::Fixed => format!("fixed{}", self.anchor_k),
            AnchorKind::Normal => "normal".to_string(),
        };
        format!(
            "{}_{}_medmap-{}_seed{}",
            self.regime.as_str(),
            anchor,
            if self.medmap { "on" } else { "off" },
            seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_grammar() {
        let cfg = RunConfig::parse(
            "# sweep\nregime = sls\nmedmap = off\nalpha = 0.25\nseeds = [1, 2]\nstudent_mask = oxxo\nanchor_prior = none\n",
        )
        .unwrap();
        assert_eq!(cfg.regime, Regime::Sls);
        assert!(!cfg.medmap);
        assert_eq!(cfg.alpha, 0.25);
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.student_mask.as_deref(), Some("oxxo"));
        assert_eq!(cfg.anchor_prior, None);
    }

    #[test]
    fn defaults_and_alpha() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.alpha, 0.125);
        assert!(cfg.medmap);
        assert_eq!(cfg.regime_config(3).unwrap().seed, 3);
    }

    #[test]
    fn unknown_keys_rejected_in_both_forms() {
        assert!(matches!(RunConfig::parse("alhpa = 0.1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse(r#"{"alhpa": 0.1}"#), Err(Error::Config(_))));
        assert!(RunConfig::parse("alpha 0.1").is_err());
        assert!(RunConfig::parse("alpha = 1\nalpha = 2").is_err());
    }

    #[test]
    fn json_form_accepted() {
        let cfg = RunConfig::parse(r#"{"regime": "da", "epochs": 3, "anchor": "normal"}"#).unwrap();
        assert_eq!(cfg.regime, Regime::Da);
        assert_eq!(cfg.epochs, 3);
        assert!(matches!(cfg.anchor_spec().unwrap(), AnchorSpec::Normal { .. }));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("alpha = -1").is_err());
        assert!(RunConfig::parse("anchor = fixed\nanchor_k = 7").is_err());
        assert!(RunConfig::parse("student_mask = xxxx").is_err());
        assert!(RunConfig::parse("sigmas = [0.5, 2.0]").is_err());
    }

    #[test]
    fn key_value_echo_roundtrips() {
        let cfg = RunConfig::parse("regime = kd\nseeds = [4]\nout_dir = runs/x\nstudent_mask = ooxx").unwrap();
        let text = cfg.to_key_values().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_take_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "epochs = 5\nregime = base\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &[("epochs".into(), "7".into())]).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert!(RunConfig::load(Some(&dir.path().join("missing.cfg")), &[]).is_err());
    }
}
