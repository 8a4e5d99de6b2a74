//! Exact-enumeration probes on small discrete models: per-modality versus
//! joint mutual information under an alignment channel, and per-modality
//! versus joint evidence lower bounds.
//!
//! The alignment channel keeps a symbol with probability `1 − σ` and
//! otherwise resamples it from the target distribution. Both probes report
//! violations instead of asserting an inequality.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ALPHABET: usize = 6;
pub const MAX_MODALITIES: usize = 3;
const MASS_TOL: f64 = 1e-12;
const HOLDS_TOL: f64 = 1e-9;

/// Joint distribution over `Y × Z_1 × … × Z_J`, last axis fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    /// `[|Y|, |Z_1|, …, |Z_J|]`.
    pub sizes: Vec<usize>,
    pub probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(sizes: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.len() > MAX_MODALITIES + 1 {
            return Err(Error::validation("sizes", format!("need |Y| and 1..={MAX_MODALITIES} Z alphabets")));
        }
        if sizes.iter().any(|&s| s == 0 || s > MAX_ALPHABET) {
            return Err(Error::validation("sizes", format!("alphabet sizes must lie in 1..={MAX_ALPHABET}")));
        }
        if probs.len() != sizes.iter().product::<usize>() {
            return Err(Error::validation("probs", "length differs from the product of alphabet sizes"));
        }
        check_distribution("probs", &probs)?;
        Ok(Self { sizes, probs })
    }

    /// Dirichlet(1, …, 1) draw.
    pub fn random(sizes: Vec<usize>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = sizes.iter().product();
        Self::new(sizes, random_simplex(n, rng))
    }

    pub fn num_modalities(&self) -> usize {
        self.sizes.len() - 1
    }

    fn z_sizes(&self) -> &[usize] {
        &self.sizes[1..]
    }

    /// Splits a flat index into `(y, flat z index)`.
    fn split(&self, idx: usize) -> (usize, usize) {
        let nz: usize = self.z_sizes().iter().product();
        (idx / nz, idx % nz)
    }

    /// Marginal `P(Z_1, …, Z_J)` over the flat `z` index.
    pub fn z_marginal(&self) -> Vec<f64> {
        let nz: usize = self.z_sizes().iter().product();
        let mut out = vec![0.0; nz];
        for (i, p) in self.probs.iter().enumerate() {
            out[self.split(i).1] += p;
        }
        out
    }

    /// Marginal `P(Z_j)`.
    pub fn modality_marginal(&self, j: usize) -> Vec<f64> {
        let zs = self.z_sizes();
        let mut out = vec![0.0; zs[j]];
        for (zi, p) in self.z_marginal().iter().enumerate() {
            out[digits(zi, zs)[j]] += p;
        }
        out
    }
}

/// Mixed-radix digits of `idx`, most significant first.
fn digits(mut idx: usize, radices: &[usize]) -> Vec<usize> {
    let mut out = vec![0; radices.len()];
    for k in (0..radices.len()).rev() {
        out[k] = idx % radices[k];
        idx /= radices[k];
    }
    out
}

fn check_distribution(field: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::validation(field, "entries must be finite and nonnegative"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > MASS_TOL {
        return Err(Error::validation(field, format!("total mass {total} differs from 1")));
    }
    Ok(())
}

fn random_simplex(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

/// Keep with probability `1 − σ`, resample from `target` with probability `σ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentChannel {
    pub sigma: f64,
    pub target: Vec<f64>,
}

impl AlignmentChannel {
    pub fn new(sigma: f64, target: Vec<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&sigma) {
            return Err(Error::validation("sigma", "must lie in [0, 1]"));
        }
        check_distribution("target", &target)?;
        Ok(Self { sigma, target })
    }

    /// `K[z][ẑ]`.
    pub fn kernel(&self) -> Array2<f64> {
        let n = self.target.len();
        Array2::from_shape_fn((n, n), |(z, zh)| {
            self.sigma * self.target[zh] + if z == zh { 1.0 - self.sigma } else { 0.0 }
        })
    }

    fn check_alphabets(&self, joint: &DiscreteJoint) -> Result<()> {
        if joint.z_sizes().iter().any(|&s| s != self.target.len()) {
            return Err(Error::validation(
                "channel.target",
                "target alphabet differs from a modality alphabet",
            ));
        }
        Ok(())
    }
}

fn xlnx_ratio(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / q).ln()
    }
}

/// Shannon entropy in nats, `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn check_pair_joint(p: &Array2<f64>) -> Result<()> {
    check_distribution("joint", &p.iter().copied().collect::<Vec<f64>>())
}

/// `Σ p(a,b) ln[p(a,b) / (p(a) p(b))]`.
pub fn mutual_information(p: &Array2<f64>) -> Result<f64> {
    check_pair_joint(p)?;
    let pa = p.sum_axis(ndarray::Axis(1));
    let pb = p.sum_axis(ndarray::Axis(0));
    let mut mi = 0.0;
    for ((a, b), &v) in p.indexed_iter() {
        mi += xlnx_ratio(v, pa[a] * pb[b]);
    }
    Ok(mi.max(0.0))
}

/// `H(A) + H(B) − H(A, B)`.
pub fn mutual_information_entropy(p: &Array2<f64>) -> Result<f64> {
    check_pair_joint(p)?;
    let pa = p.sum_axis(ndarray::Axis(1));
    let pb = p.sum_axis(ndarray::Axis(0));
    let flat: Vec<f64> = p.iter().copied().collect();
    Ok((entropy(pa.as_slice().expect("owned")) + entropy(pb.as_slice().expect("owned")) - entropy(&flat)).max(0.0))
}

/// `Σ p ln(p/q)`; `+∞` when `q = 0 < p`.
pub fn kl_discrete(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::validation("q", "alphabet differs from p"));
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 && qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += xlnx_ratio(pi, qi);
    }
    Ok(kl.max(0.0))
}

/// `P(Z_j, Ẑ_j)` for one modality.
fn modality_channel_joint(joint: &DiscreteJoint, channel: &AlignmentChannel, j: usize) -> Array2<f64> {
    let pz = joint.modality_marginal(j);
    let k = channel.kernel();
    Array2::from_shape_fn(k.dim(), |(z, zh)| pz[z] * k[[z, zh]])
}

/// `P(Z, Ẑ)` over flat joint indices, channels applied independently.
fn full_channel_joint(joint: &DiscreteJoint, channel: &AlignmentChannel) -> Array2<f64> {
    let pz = joint.z_marginal();
    let k = channel.kernel();
    let zs = joint.z_sizes();
    let n = pz.len();
    Array2::from_shape_fn((n, n), |(z, zh)| {
        let (dz, dzh) = (digits(z, zs), digits(zh, zs));
        pz[z] * dz.iter().zip(&dzh).map(|(&a, &b)| k[[a, b]]).product::<f64>()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Record {
    /// `Σ_j I(Ẑ_j; Z_j)`.
    pub lhs: f64,
    /// `I(Ẑ; Z)`.
    pub rhs: f64,
    /// `lhs ≤ rhs` up to 1e-9.
    pub holds: bool,
    /// `rhs − lhs`.
    pub margin: f64,
}

/// Compares per-modality information kept by the channel with the
/// information kept about the whole tuple.
pub fn check_prop1(joint: &DiscreteJoint, channel: &AlignmentChannel) -> Result<Prop1Record> {
    if joint.num_modalities() < 2 {
        return Err(Error::validation("joint", "need at least two modalities"));
    }
    channel.check_alphabets(joint)?;
    let lhs = (0..joint.num_modalities())
        .map(|j| mutual_information(&modality_channel_joint(joint, channel, j)))
        .sum::<Result<f64>>()?;
    let rhs = mutual_information(&full_channel_joint(joint, channel))?;
    Ok(Prop1Record {
        lhs,
        rhs,
        holds: lhs <= rhs + HOLDS_TOL,
        margin: rhs - lhs,
    })
}

/// Conditional tables `P(Y | Ẑ_j)` (rows `ẑ_j`) and `P(Y | Ẑ)` (rows flat `ẑ`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorTables {
    pub per_modality: Vec<Array2<f64>>,
    pub joint: Array2<f64>,
}

/// Row-normalizes `counts`; empty rows become uniform.
fn conditional(counts: Array2<f64>) -> Array2<f64> {
    let mut out = counts;
    let cols = out.ncols() as f64;
    for mut row in out.rows_mut() {
        let total: f64 = row.sum();
        if total > 0.0 {
            row /= total;
        } else {
            row.fill(1.0 / cols);
        }
    }
    out
}

/// `P(Y, Ẑ)` over flat `ẑ`, shaped `|Ẑ| × |Y|`.
fn y_zhat_joint(joint: &DiscreteJoint, channel: &AlignmentChannel) -> Array2<f64> {
    let k = channel.kernel();
    let zs = joint.z_sizes();
    let nz: usize = zs.iter().product();
    let mut out = Array2::zeros((nz, joint.sizes[0]));
    for (i, &p) in joint.probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let (y, z) = joint.split(i);
        let dz = digits(z, zs);
        for zh in 0..nz {
            let w: f64 = dz.iter().zip(digits(zh, zs)).map(|(&a, b)| k[[a, b]]).product();
            out[[zh, y]] += p * w;
        }
    }
    out
}

/// `P(Y, Ẑ_j)` shaped `|Ẑ_j| × |Y|`.
fn y_zhat_modality(joint: &DiscreteJoint, channel: &AlignmentChannel, j: usize) -> Array2<f64> {
    let full = y_zhat_joint(joint, channel);
    let zs = joint.z_sizes();
    let mut out = Array2::zeros((zs[j], joint.sizes[0]));
    for ((zh, y), &p) in full.indexed_iter() {
        out[[digits(zh, zs)[j], y]] += p;
    }
    out
}

impl PredictorTables {
    /// Bayes posteriors of `Y` given the channel outputs.
    pub fn bayes(joint: &DiscreteJoint, channel: &AlignmentChannel) -> Result<Self> {
        channel.check_alphabets(joint)?;
        Ok(Self {
            per_modality: (0..joint.num_modalities())
                .map(|j| conditional(y_zhat_modality(joint, channel, j)))
                .collect(),
            joint: conditional(y_zhat_joint(joint, channel)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboValue {
    pub value: f64,
    pub log_likelihood: f64,
    pub kl: f64,
    /// A KL term was infinite (absolute continuity failed).
    pub infinite_kl: bool,
}

fn expected_log(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    p.iter()
        .zip(q.iter())
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * qv.ln())
        .sum()
}

/// `Σ_j E[ln q(Y | Ẑ_j)] − D_KL(P(Z_j) ‖ target)`.
pub fn elbo_per_modality(
    joint: &DiscreteJoint,
    channel: &AlignmentChannel,
    tables: &PredictorTables,
) -> Result<ElboValue> {
    channel.check_alphabets(joint)?;
    if tables.per_modality.len() != joint.num_modalities() {
        return Err(Error::validation("tables", "one predictor table per modality required"));
    }
    let mut ll = 0.0;
    let mut kl = 0.0;
    for j in 0..joint.num_modalities() {
        let p = y_zhat_modality(joint, channel, j);
        if tables.per_modality[j].dim() != p.dim() {
            return Err(Error::validation("tables", "predictor table shape mismatch"));
        }
        ll += expected_log(&p, &tables.per_modality[j]);
        kl += kl_discrete(&joint.modality_marginal(j), &channel.target)?;
    }
    Ok(ElboValue {
        value: ll - kl,
        log_likelihood: ll,
        kl,
        infinite_kl: kl.is_infinite(),
    })
}

/// `E[ln q(Y | Ẑ)] − D_KL(P(Z) ‖ target^⊗J)`.
pub fn elbo_joint(joint: &DiscreteJoint, channel: &AlignmentChannel, tables: &PredictorTables) -> Result<ElboValue> {
    channel.check_alphabets(joint)?;
    let p = y_zhat_joint(joint, channel);
    if tables.joint.dim() != p.dim() {
        return Err(Error::validation("tables", "predictor table shape mismatch"));
    }
    let ll = expected_log(&p, &tables.joint);
    let zs = joint.z_sizes();
    let product_target: Vec<f64> = (0..p.nrows())
        .map(|z| digits(z, zs).iter().map(|&d| channel.target[d]).product())
        .collect();
    let kl = kl_discrete(&joint.z_marginal(), &product_target)?;
    Ok(ElboValue {
        value: ll - kl,
        log_likelihood: ll,
        kl,
        infinite_kl: kl.is_infinite(),
    })
}

/// Parameters of a random-instance probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeParams {
    pub sigmas: Vec<f64>,
    pub instances: usize,
    pub seed: u64,
    pub y_size: usize,
    pub z_size: usize,
    pub num_modalities: usize,
}

impl Default for ProbeParams {
    fn default() -> Self {
        Self {
            sigmas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            instances: 500,
            seed: 0,
            y_size: 2,
            z_size: 2,
            num_modalities: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Instance {
    pub index: usize,
    pub sigma: f64,
    pub record: Prop1Record,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1SigmaRow {
    pub sigma: f64,
    pub holds: usize,
    pub violations: usize,
    pub min_margin: f64,
    pub max_lhs: f64,
    pub max_rhs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboInstance {
    pub index: usize,
    pub sigma: f64,
    pub per_modality: ElboValue,
    pub joint: ElboValue,
    /// Per-modality bound ≤ joint bound.
    pub per_modality_le_joint: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub kind: String,
    pub index: usize,
    pub joint: DiscreteJoint,
    pub channel: AlignmentChannel,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub params: ProbeParams,
    pub prop1_by_sigma: Vec<Prop1SigmaRow>,
    pub prop1_instances: Vec<Prop1Instance>,
    pub elbo_instances: Vec<ElboInstance>,
    pub elbo_holds: usize,
    pub elbo_violations: usize,
    pub counterexample_count: usize,
    pub counterexamples: Vec<Counterexample>,
}

/// Draws `instances` random joints and targets; evaluates the information
/// comparison at every σ of the grid and the bound comparison at σ cycling
/// through the grid.
pub fn run_probe(params: &ProbeParams) -> Result<TheoryReport> {
    if params.sigmas.is_empty() {
        return Err(Error::validation("sigmas", "grid is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut sizes = vec![params.y_size];
    sizes.extend(std::iter::repeat_n(params.z_size, params.num_modalities));
    let mut rows: Vec<Prop1SigmaRow> = params
        .sigmas
        .iter()
        .map(|&sigma| Prop1SigmaRow {
            sigma,
            holds: 0,
            violations: 0,
            min_margin: f64::INFINITY,
            max_lhs: 0.0,
            max_rhs: 0.0,
        })
        .collect();
    let mut prop1_instances = Vec::new();
    let mut elbo_instances = Vec::new();
    let mut counterexamples = Vec::new();

    for index in 0..params.instances {
        let joint = DiscreteJoint::random(sizes.clone(), &mut rng)?;
        let target = random_simplex(params.z_size, &mut rng);
        for (row, &sigma) in rows.iter_mut().zip(&params.sigmas) {
            let channel = AlignmentChannel::new(sigma, target.clone())?;
            let record = check_prop1(&joint, &channel)?;
            if record.holds {
                row.holds += 1;
            } else {
                row.violations += 1;
                counterexamples.push(Counterexample {
                    kind: "prop1".into(),
                    index,
                    joint: joint.clone(),
                    channel: channel.clone(),
                    lhs: record.lhs,
                    rhs: record.rhs,
                });
            }
            row.min_margin = row.min_margin.min(record.margin);
            row.max_lhs = row.max_lhs.max(record.lhs);
            row.max_rhs = row.max_rhs.max(record.rhs);
            prop1_instances.push(Prop1Instance { index, sigma, record });
        }

        let sigma = params.sigmas[index % params.sigmas.len()];
        let channel = AlignmentChannel::new(sigma, target)?;
        let tables = PredictorTables::bayes(&joint, &channel)?;
        let per = elbo_per_modality(&joint, &channel, &tables)?;
        let whole = elbo_joint(&joint, &channel, &tables)?;
        let le = per.value <= whole.value + HOLDS_TOL;
        if !le {
            counterexamples.push(Counterexample {
                kind: "elbo".into(),
                index,
                joint: joint.clone(),
                channel,
                lhs: per.value,
                rhs: whole.value,
            });
        }
        elbo_instances.push(ElboInstance {
            index,
            sigma,
            per_modality: per,
            joint: whole,
            per_modality_le_joint: le,
        });
    }
    let elbo_holds = elbo_instances.iter().filter(|e| e.per_modality_le_joint).count();
    Ok(TheoryReport {
        params: params.clone(),
        prop1_by_sigma: rows,
        prop1_instances,
        elbo_violations: elbo_instances.len() - elbo_holds,
        elbo_instances,
        elbo_holds,
        counterexample_count: counterexamples.len(),
        counterexamples,
    })
}
