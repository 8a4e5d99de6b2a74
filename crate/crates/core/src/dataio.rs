//! Synthetic multi-modal samples, the `MMS1` sample file format, and
//! missing-modality scenario enumeration.
//!
//! A sample is `J` co-registered float images plus one integer label map with
//! classes `0` (background), `1` (core analog), `2` (edema analog) and `3`
//! (enhancing analog). Class regions are nested ellipses, so the composite
//! regions `{3} ⊆ {1,3} ⊆ {1,2,3}` hold for every generated sample.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Modality names in table order, used for mask strings and reports.
pub const MODALITY_NAMES: [&str; 4] = ["Flair", "T1", "T1ce", "T2"];

/// Number of raw label classes including background.
pub const NUM_CLASSES: usize = 4;

const MAGIC: &[u8; 4] = b"MMS1";
const FORMAT_VERSION: u16 = 1;
/// Size of the fixed `MMS1` header in bytes.
pub const HEADER_LEN: usize = 24;

/// Per-modality additive offset pattern, scaled by `gap_strength`.
const GAP_OFFSETS: [f64; 4] = [0.6, -0.45, 0.25, -0.8];
/// Per-modality log-gain pattern, scaled by `gap_strength`.
const GAP_LOG_GAINS: [f64; 4] = [0.15, -0.2, 0.25, -0.1];

/// `J` modality images plus the shared label map.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalSample {
    pub sample_id: String,
    pub modalities: Vec<Array2<f32>>,
    pub label: Array2<u8>,
}

impl MultiModalSample {
    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn height(&self) -> usize {
        self.label.nrows()
    }

    pub fn width(&self) -> usize {
        self.label.ncols()
    }

    /// Checks shape agreement, label range, and region nesting.
    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::validation("modalities", "sample has no modalities"));
        }
        let shape = self.label.dim();
        for (j, m) in self.modalities.iter().enumerate() {
            if m.dim() != shape {
                return Err(Error::validation(
                    "modalities",
                    format!("modality {j} has shape {:?}, label has {:?}", m.dim(), shape),
                ));
            }
        }
        if let Some(bad) = self.label.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::validation("label", format!("label value {bad} out of range")));
        }
        if !self.is_nested() {
            return Err(Error::validation("label", "class regions are not nested"));
        }
        Ok(())
    }

    /// With a single integer map the composite regions are nested whenever
    /// every labelled pixel lies in the whole-tumor region, which holds by
    /// definition; this recounts the inclusions explicitly.
    pub fn is_nested(&self) -> bool {
        self.label.iter().all(|&v| {
            let et = v == 3;
            let tc = v == 1 || v == 3;
            let wt = v == 1 || v == 2 || v == 3;
            (!et || tc) && (!tc || wt)
        })
    }
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_modalities: usize,
    pub height: usize,
    pub width: usize,
    /// Mean intensity per (modality, class); `num_modalities` rows of 4.
    pub contrast_profile: Vec<[f64; 4]>,
    pub noise_sigma: f64,
    pub gap_strength: f64,
    pub n_samples: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_modalities: 4,
            height: 32,
            width: 32,
            contrast_profile: default_contrast_profile(4),
            noise_sigma: 0.1,
            gap_strength: 0.0,
            n_samples: 200,
        }
    }
}

/// Class contrast loosely following the usual MR appearance: Flair and T2
/// show the whole lesion, T1ce highlights the enhancing rim, T1 is weak.
pub fn default_contrast_profile(num_modalities: usize) -> Vec<[f64; 4]> {
    const ROWS: [[f64; 4]; 4] = [
        [0.0, 0.8, 1.0, 0.9],
        [0.0, -0.35, -0.2, -0.1],
        [0.0, 0.35, 0.1, 1.2],
        [0.0, 0.9, 0.8, 0.55],
    ];
    (0..num_modalities).map(|j| ROWS[j % 4]).collect()
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_modalities == 0 {
            return Err(Error::validation("num_modalities", "must be at least 1"));
        }
        if self.num_modalities > 8 {
            return Err(Error::validation("num_modalities", "at most 8 modalities are supported"));
        }
        if self.height < 8 {
            return Err(Error::validation("height", "must be at least 8"));
        }
        if self.width < 8 {
            return Err(Error::validation("width", "must be at least 8"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::validation("noise_sigma", "must be finite and nonnegative"));
        }
        if !(self.gap_strength >= 0.0 && self.gap_strength.is_finite()) {
            return Err(Error::validation("gap_strength", "must be finite and nonnegative"));
        }
        if self.contrast_profile.len() != self.num_modalities {
            return Err(Error::validation(
                "contrast_profile",
                format!(
                    "expected {} rows of 4 entries, found {}",
                    self.num_modalities,
                    self.contrast_profile.len()
                ),
            ));
        }
        if self.contrast_profile.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation("contrast_profile", "entries must be finite"));
        }
        Ok(())
    }

    /// Affine intensity transform `(gain, offset)` applied to modality `j`.
    pub fn modality_affine(&self, j: usize) -> (f64, f64) {
        let gain = (self.gap_strength * GAP_LOG_GAINS[j % 4]).exp();
        let offset = self.gap_strength * GAP_OFFSETS[j % 4];
        (gain, offset)
    }
}

/// Which modalities are available; at least one is always present.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<bool>", into = "Vec<bool>")]
pub struct ScenarioMask {
    present: Vec<bool>,
}

impl ScenarioMask {
    pub fn new(present: Vec<bool>) -> Result<Self> {
        if !present.iter().any(|&p| p) {
            return Err(Error::validation("mask", "at least one modality must be present"));
        }
        Ok(Self { present })
    }

    pub fn full(num_modalities: usize) -> Self {
        Self {
            present: vec![true; num_modalities],
        }
    }

    pub fn single(num_modalities: usize, j: usize) -> Self {
        let mut present = vec![false; num_modalities];
        present[j] = true;
        Self { present }
    }

    /// Parses the `o`/`x` string form (`o` = present).
    pub fn parse(s: &str) -> Result<Self> {
        let present = s
            .chars()
            .map(|c| match c {
                'o' => Ok(true),
                'x' => Ok(false),
                other => Err(Error::validation("mask", format!("unexpected character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(present)
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn is_present(&self, j: usize) -> bool {
        self.present.get(j).copied().unwrap_or(false)
    }

    pub fn count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.present.len()).filter(|&j| self.present[j]).collect()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.present
    }

    /// `o` for present, `x` for absent, in modality order.
    pub fn to_ox_string(&self) -> String {
        self.present.iter().map(|&p| if p { 'o' } else { 'x' }).collect()
    }

    /// Human-readable scenario name such as `Flair+T1ce`.
    pub fn name(&self) -> String {
        self.indices()
            .into_iter()
            .map(|j| MODALITY_NAMES.get(j).map(|s| s.to_string()).unwrap_or(format!("M{j}")))
            .collect::<Vec<_>>()
            .join("+")
    }
}

impl TryFrom<Vec<bool>> for ScenarioMask {
    type Error = Error;

    fn try_from(present: Vec<bool>) -> Result<Self> {
        Self::new(present)
    }
}

impl From<ScenarioMask> for Vec<bool> {
    fn from(mask: ScenarioMask) -> Self {
        mask.present
    }
}

/// All non-empty modality subsets, ordered by number of present modalities
/// and then lexicographically by the sorted list of present indices.
pub fn enumerate_scenarios(num_modalities: usize) -> Result<Vec<ScenarioMask>> {
    if num_modalities == 0 {
        return Err(Error::validation("num_modalities", "must be at least 1"));
    }
    if num_modalities > 16 {
        return Err(Error::validation("num_modalities", "too many modalities to enumerate"));
    }
    let mut subsets: Vec<Vec<usize>> = (1u32..(1 << num_modalities))
        .map(|bits| (0..num_modalities).filter(|&j| bits & (1 << j) != 0).collect())
        .collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    Ok(subsets
        .into_iter()
        .map(|idx| {
            let mut present = vec![false; num_modalities];
            for j in idx {
                present[j] = true;
            }
            ScenarioMask { present }
        })
        .collect())
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }

    /// A smaller ellipse whose center stays inside this one.
    fn nested(&self, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Ellipse {
        let scale_y = rng.random_range(lo..hi);
        let scale_x = rng.random_range(lo..hi);
        let shift = 0.5 * (1.0 - scale_y.max(scale_x));
        Ellipse {
            cy: self.cy + rng.random_range(-shift..=shift) * self.ry,
            cx: self.cx + rng.random_range(-shift..=shift) * self.rx,
            ry: self.ry * scale_y,
            rx: self.rx * scale_x,
            theta: self.theta + rng.random_range(-0.5..0.5),
        }
    }
}

/// Deterministic synthetic dataset for `(spec, seed)`.
pub fn generate_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Vec<MultiModalSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::validation("noise_sigma", e.to_string()))?;
    let (h, w) = (spec.height, spec.width);
    let side = h.min(w) as f64;

    let mut samples = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let whole = Ellipse {
            cy: h as f64 / 2.0 + rng.random_range(-0.12..0.12) * h as f64,
            cx: w as f64 / 2.0 + rng.random_range(-0.12..0.12) * w as f64,
            ry: rng.random_range(0.16..0.3) * side,
            rx: rng.random_range(0.16..0.3) * side,
            theta: rng.random_range(0.0..std::f64::consts::PI),
        };
        let core = whole.nested(&mut rng, 0.45, 0.7);
        let enhancing = core.nested(&mut rng, 0.35, 0.6);

        let label = Array2::from_shape_fn((h, w), |(y, x)| {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            if !whole.contains(py, px) {
                0u8
            } else if !core.contains(py, px) {
                2
            } else if !enhancing.contains(py, px) {
                1
            } else {
                3
            }
        });

        let modalities = (0..spec.num_modalities)
            .map(|j| {
                let (gain, offset) = spec.modality_affine(j);
                let row = spec.contrast_profile[j];
                let mut img = Array2::<f32>::zeros((h, w));
                for ((y, x), v) in img.indexed_iter_mut() {
                    let clean = gain * row[label[[y, x]] as usize] + offset;
                    let eps = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    *v = (clean + eps) as f32;
                }
                img
            })
            .collect();

        samples.push(MultiModalSample {
            sample_id: format!("sample_{i:05}"),
            modalities,
            label,
        });
    }
    Ok(samples)
}

/// Partition of a dataset by hashed sample id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Fixed 70/15/15 assignment from the first bytes of SHA-256(sample_id).
pub fn split_of(sample_id: &str) -> Split {
    let digest = Sha256::digest(sample_id.as_bytes());
    let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % 100;
    match bucket {
        0..=69 => Split::Train,
        70..=84 => Split::Val,
        _ => Split::Test,
    }
}

pub fn select_split(samples: &[MultiModalSample], split: Split) -> Vec<MultiModalSample> {
    samples
        .iter()
        .filter(|s| split_of(&s.sample_id) == split)
        .cloned()
        .collect()
}

/// Encodes a sample in the `MMS1` layout.
pub fn encode_sample(sample: &MultiModalSample) -> Result<Vec<u8>> {
    sample.validate()?;
    let (h, w) = sample.label.dim();
    let j = sample.num_modalities();
    if j > u8::MAX as usize {
        return Err(Error::validation("modalities", "more than 255 modalities"));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + j * h * w * 4 + h * w);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(j as u8);
    buf.push(NUM_CLASSES as u8);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&[0u8; 8]);
    for m in &sample.modalities {
        for v in m.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend(sample.label.iter().copied());
    Ok(buf)
}

/// Decodes an `MMS1` buffer; `sample_id` is supplied by the caller.
pub fn decode_sample(bytes: &[u8], sample_id: &str) -> Result<MultiModalSample> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"MMS1\""));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let j = bytes[6] as usize;
    if j == 0 {
        return Err(Error::format(6, "zero modalities"));
    }
    if bytes[7] as usize != NUM_CLASSES {
        return Err(Error::format(7, format!("unsupported class count {}", bytes[7])));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if let Some(pos) = bytes[16..24].iter().position(|&b| b != 0) {
        return Err(Error::format(16 + pos as u64, "reserved bytes must be zero"));
    }
    let plane = h
        .checked_mul(w)
        .ok_or_else(|| Error::format(8, "image size overflows"))?;
    let expected = HEADER_LEN + j * plane * 4 + plane;
    if bytes.len() < expected {
        return Err(Error::format(bytes.len() as u64, format!("truncated payload, expected {expected} bytes")));
    }
    if bytes.len() > expected {
        return Err(Error::format(expected as u64, "trailing bytes after label array"));
    }

    let mut offset = HEADER_LEN;
    let mut modalities = Vec::with_capacity(j);
    for _ in 0..j {
        let data: Vec<f32> = bytes[offset..offset + plane * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        modalities.push(Array2::from_shape_vec((h, w), data).expect("plane size"));
        offset += plane * 4;
    }
    let labels = &bytes[offset..offset + plane];
    if let Some(pos) = labels.iter().position(|&v| v as usize >= NUM_CLASSES) {
        return Err(Error::format((offset + pos) as u64, format!("label value {} out of range", labels[pos])));
    }
    let label = Array2::from_shape_vec((h, w), labels.to_vec()).expect("plane size");
    Ok(MultiModalSample {
        sample_id: sample_id.to_string(),
        modalities,
        label,
    })
}

/// Writes `sample` to `path`.
pub fn write_sample(sample: &MultiModalSample, path: &Path) -> Result<()> {
    let bytes = encode_sample(sample)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

/// Reads a sample; its id is the file stem.
pub fn read_sample(path: &Path) -> Result<MultiModalSample> {
    let bytes = fs::read(path)?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::validation("path", format!("{} has no file stem", path.display())))?;
    decode_sample(&bytes, id)
}

/// JSON manifest stored next to the sample files of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub sample_ids: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes every sample as `<id>.mms` plus `manifest.json`, creating `dir`.
pub fn write_dataset(
    dir: &Path,
    spec: &SyntheticSpec,
    seed: u64,
    samples: &[MultiModalSample],
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    for s in samples {
        write_sample(s, &sample_path(dir, &s.sample_id))?;
    }
    let manifest = DatasetManifest {
        format: "MMS1".to_string(),
        spec: spec.clone(),
        seed,
        sample_ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn sample_path(dir: &Path, sample_id: &str) -> PathBuf {
    dir.join(format!("{sample_id}.mms"))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let bytes = fs::read(dir.join(MANIFEST_FILE))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    if manifest.format != "MMS1" {
        return Err(Error::format(0, format!("unknown dataset format {:?}", manifest.format)));
    }
    Ok(manifest)
}

/// Loads every sample listed in the manifest, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<MultiModalSample>)> {
    let manifest = read_manifest(dir)?;
    let samples = manifest
        .sample_ids
        .iter()
        .map(|id| read_sample(&sample_path(dir, id)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

/// Hex SHA-256 of the manifest file contents.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    let bytes = fs::read(dir.join(MANIFEST_FILE))?;
    Ok(hex_digest(&bytes))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
