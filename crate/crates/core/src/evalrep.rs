//! Dice evaluation over the nested tumour composites and every
//! missing-modality scenario, 2-D embedding projections, and report output.
//!
//! Empty prediction and empty ground truth score 100: predicting nothing
//! where nothing exists is correct.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataio::{enumerate_scenarios, MultiModalSample, ScenarioMask};
use crate::error::{Error, Result};
use crate::latent_align::{GapReport, LatentBatch};
use crate::nets::Model;
use crate::regimes::RegimeConfig;

pub const CLASS_NAMES: [&str; 3] = ["WT", "TC", "ET"];
pub const REPORT_SCHEMA: &str = "MMREP1";
pub const DICE_CONVENTION: &str =
    "Dice is 100 when both prediction and ground truth are empty for a composite class.";
const EVAL_BATCH: usize = 16;
const RANK_TOL: f64 = 1e-12;

/// Label sets of the whole tumour, tumour core, and enhancing tumour.
pub fn composite_classes() -> [(&'static str, &'static [u8]); 3] {
    [("WT", &[1, 2, 3]), ("TC", &[1, 3]), ("ET", &[3])]
}

/// Dice percentage of `pred` against `gt` after binarizing both by membership
/// in `class_set`.
pub fn dice(pred: &Array2<u8>, gt: &Array2<u8>, class_set: &[u8]) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::validation(
            "pred",
            format!("shape {:?} differs from ground truth {:?}", pred.dim(), gt.dim()),
        ));
    }
    let (mut inter, mut p_count, mut g_count) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gt.iter()) {
        let p = class_set.contains(p);
        let g = class_set.contains(g);
        inter += usize::from(p && g);
        p_count += usize::from(p);
        g_count += usize::from(g);
    }
    if p_count + g_count == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / (p_count + g_count) as f64)
}

/// Mean Dice per composite class for one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceRow {
    pub mask: ScenarioMask,
    /// WT, TC, ET.
    pub values: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountAverage {
    /// Number of present modalities.
    pub n: usize,
    pub values: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceTable {
    pub rows: Vec<DiceRow>,
    /// Averages over scenarios with `n` present modalities, `n < J`.
    pub avg_by_count: Vec<CountAverage>,
    /// Average over every scenario, per class.
    pub total_avg: [f64; 3],
    /// Mean of `total_avg` over the three classes.
    pub grand_average: f64,
}

fn mean3<'a>(rows: impl Iterator<Item = &'a [f64; 3]>) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for r in rows {
        for c in 0..3 {
            acc[c] += r[c];
        }
        n += 1;
    }
    acc.map(|v| if n == 0 { f64::NAN } else { v / n as f64 })
}

impl DiceTable {
    pub fn from_rows(rows: Vec<DiceRow>) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::Report("dice table has no rows".into()))?;
        let j = first.mask.len();
        if rows.iter().any(|r| r.mask.len() != j) {
            return Err(Error::Report("dice rows disagree on the modality count".into()));
        }
        if let Some(bad) = rows.iter().flat_map(|r| r.values).find(|v| !(0.0..=100.0).contains(v)) {
            return Err(Error::Report(format!("dice value {bad} outside [0, 100]")));
        }
        let avg_by_count = (1..j)
            .filter(|&n| rows.iter().any(|r| r.mask.count() == n))
            .map(|n| CountAverage {
                n,
                values: mean3(rows.iter().filter(|r| r.mask.count() == n).map(|r| &r.values)),
            })
            .collect();
        let total_avg = mean3(rows.iter().map(|r| &r.values));
        let grand_average = total_avg.iter().sum::<f64>() / 3.0;
        Ok(Self {
            rows,
            avg_by_count,
            total_avg,
            grand_average,
        })
    }

    /// Recomputes every marginal from the rows and reports the largest
    /// absolute discrepancy.
    pub fn marginal_discrepancy(&self) -> f64 {
        let Ok(fresh) = Self::from_rows(self.rows.clone()) else {
            return f64::INFINITY;
        };
        if fresh.avg_by_count.len() != self.avg_by_count.len() {
            return f64::INFINITY;
        }
        let mut worst = (fresh.grand_average - self.grand_average).abs();
        for c in 0..3 {
            worst = worst.max((fresh.total_avg[c] - self.total_avg[c]).abs());
        }
        for (a, b) in fresh.avg_by_count.iter().zip(&self.avg_by_count) {
            if a.n != b.n {
                return f64::INFINITY;
            }
            for c in 0..3 {
                worst = worst.max((a.values[c] - b.values[c]).abs());
            }
        }
        worst
    }

    pub fn row(&self, mask: &ScenarioMask) -> Option<&DiceRow> {
        self.rows.iter().find(|r| &r.mask == mask)
    }

    /// Cell-wise `self − other`; both tables must cover the same scenarios.
    pub fn delta(&self, other: &DiceTable) -> Result<DiceTable> {
        if self.rows.len() != other.rows.len() {
            return Err(Error::Report("tables cover different scenarios".into()));
        }
        let diff = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        let mut rows = Vec::with_capacity(self.rows.len());
        for (a, b) in self.rows.iter().zip(&other.rows) {
            if a.mask != b.mask {
                return Err(Error::Report("tables list scenarios in different orders".into()));
            }
            rows.push(DiceRow {
                mask: a.mask.clone(),
                values: diff(a.values, b.values),
            });
        }
        Ok(DiceTable {
            rows,
            avg_by_count: self
                .avg_by_count
                .iter()
                .zip(&other.avg_by_count)
                .map(|(a, b)| CountAverage {
                    n: a.n,
                    values: diff(a.values, b.values),
                })
                .collect(),
            total_avg: diff(self.total_avg, other.total_avg),
            grand_average: self.grand_average - other.grand_average,
        })
    }

    /// CSV with one row per scenario followed by the marginal rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Report(e.to_string());
        w.write_record(["scenario", "present_mask", "WT", "TC", "ET"]).map_err(io)?;
        let fmt = |v: f64| format!("{v:.4}");
        for r in &self.rows {
            w.write_record([
                r.mask.name(),
                r.mask.to_ox_string(),
                fmt(r.values[0]),
                fmt(r.values[1]),
                fmt(r.values[2]),
            ])
            .map_err(io)?;
        }
        for a in &self.avg_by_count {
            w.write_record([
                format!("Avg N={}", a.n),
                String::new(),
                fmt(a.values[0]),
                fmt(a.values[1]),
                fmt(a.values[2]),
            ])
            .map_err(io)?;
        }
        w.write_record([
            "Total Avg".to_string(),
            String::new(),
            fmt(self.total_avg[0]),
            fmt(self.total_avg[1]),
            fmt(self.total_avg[2]),
        ])
        .map_err(io)?;
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }
}

/// Mean per-sample Dice for each composite class under one scenario.
pub fn scenario_dice(model: &Model, samples: &[MultiModalSample], mask: &ScenarioMask) -> Result<[f64; 3]> {
    if samples.is_empty() {
        return Err(Error::validation("dataset", "evaluation split is empty"));
    }
    let classes = composite_classes();
    let mut sums = [0.0; 3];
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&MultiModalSample> = chunk.iter().collect();
        let preds = model.predict_labels(&refs, mask)?;
        for (pred, sample) in preds.iter().zip(chunk) {
            for (c, (_, set)) in classes.iter().enumerate() {
                sums[c] += dice(pred, &sample.label, set)?;
            }
        }
    }
    Ok(sums.map(|s| s / samples.len() as f64))
}

/// Dice table over every missing-modality scenario.
pub fn evaluate_all_scenarios(model: &Model, samples: &[MultiModalSample]) -> Result<DiceTable> {
    let rows = enumerate_scenarios(model.num_modalities())?
        .into_iter()
        .map(|mask| {
            let values = scenario_dice(model, samples, &mask)?;
            Ok(DiceRow { mask, values })
        })
        .collect::<Result<Vec<_>>>()?;
    DiceTable::from_rows(rows)
}

/// Two-dimensional coordinates of every present modality's latents under a
/// single shared projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub coords: Vec<Option<Array2<f64>>>,
    /// `2×D` projection directions.
    pub components: Array2<f64>,
    pub center: Vec<f64>,
    /// Covariance had rank below two; the first two coordinates were used.
    pub fallback: bool,
}

/// Projects latents onto the top two principal directions of the pooled
/// feature covariance. Each direction's sign makes its largest-magnitude
/// coordinate positive.
pub fn project_embeddings(latents: &LatentBatch) -> Result<Projection> {
    let b = latents.batch_size();
    if b < 2 {
        return Err(Error::validation("batch_size", "projection needs B >= 2"));
    }
    let d = latents.latent_dim();
    let present: Vec<&Array2<f64>> = latents.features().iter().flatten().collect();
    let total = (present.len() * b) as f64;
    let mut center = vec![0.0; d];
    for f in &present {
        for row in f.rows() {
            for (c, v) in center.iter_mut().zip(row) {
                *c += v / total;
            }
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for f in &present {
        for row in f.rows() {
            for p in 0..d {
                let dp = row[p] - center[p];
                for q in 0..d {
                    cov[(p, q)] += dp * (row[q] - center[q]) / total;
                }
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let second = if d > 1 { eig.eigenvalues[order[1]] } else { 0.0 };
    let fallback = d < 2 || second <= RANK_TOL * top.max(1.0);

    let mut components = Array2::<f64>::zeros((2, d));
    if fallback {
        for k in 0..d.min(2) {
            components[[k, k]] = 1.0;
        }
    } else {
        for k in 0..2 {
            let v = eig.eigenvectors.column(order[k]);
            let pivot = (0..d)
                .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
                .expect("d >= 2");
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            for p in 0..d {
                components[[k, p]] = sign * v[p];
            }
        }
    }
    let coords = latents
        .features()
        .iter()
        .map(|f| {
            f.as_ref().map(|f| {
                Array2::from_shape_fn((b, 2), |(i, k)| {
                    (0..d).map(|p| (f[[i, p]] - center[p]) * components[[k, p]]).sum()
                })
            })
        })
        .collect();
    Ok(Projection {
        coords,
        components,
        center,
        fallback,
    })
}

/// One evaluated training run as consumed by [`render_report`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub config: RegimeConfig,
    pub dice: DiceTable,
    pub gap_traces: Vec<GapReport>,
    pub loss_traces: BTreeMap<String, Vec<f64>>,
    pub embedding: Option<Projection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub regime: String,
    pub anchor: String,
    pub medmap_enabled: bool,
    pub seed: u64,
    pub grand_average: f64,
    pub total_avg: [f64; 3],
    pub final_gap_kl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub with_medmap: String,
    pub without_medmap: String,
    pub delta_grand_average: f64,
    pub delta_total_avg: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub schema: String,
    pub runs: Vec<RunSummary>,
    pub pairs: Vec<PairSummary>,
    pub dice_convention: String,
}

#[derive(Clone, Debug)]
pub struct ReportBundle {
    pub summary: ReportSummary,
    pub files: Vec<PathBuf>,
}

/// Configuration with `medmap_enabled` neutralized, used to pair runs.
fn pairing_key(cfg: &RegimeConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.medmap_enabled = false;
    Ok(serde_json::to_string(&c)?)
}

/// Matches every MedMAP run to the run whose configuration differs only in
/// `medmap_enabled`. Pairing applies only when both kinds are present.
pub fn pair_runs(results: &[RunRecord]) -> Result<Vec<(usize, usize)>> {
    let with: Vec<usize> = (0..results.len()).filter(|&i| results[i].config.medmap_enabled).collect();
    let without: Vec<usize> = (0..results.len()).filter(|&i| !results[i].config.medmap_enabled).collect();
    if with.is_empty() || without.is_empty() {
        return Ok(Vec::new());
    }
    let keys = results.iter().map(|r| pairing_key(&r.config)).collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    let mut used = vec![false; results.len()];
    for &w in &with {
        let partner = without.iter().copied().find(|&o| !used[o] && keys[o] == keys[w]);
        match partner {
            Some(o) => {
                used[o] = true;
                pairs.push((w, o));
            }
            None => {
                return Err(Error::Report(format!(
                    "run {:?} has no partner differing only in medmap_enabled",
                    results[w].name
                )))
            }
        }
    }
    if let Some(&o) = without.iter().find(|&&o| !used[o]) {
        return Err(Error::Report(format!(
            "run {:?} has no partner differing only in medmap_enabled",
            results[o].name
        )));
    }
    Ok(pairs)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Minimal SVG line chart; one polyline per series.
pub fn svg_line_chart(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let (w, h, m) = (480.0, 300.0, 40.0);
    let finite = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, if hi > lo { hi } else { lo + 1.0 }) } else { (0.0, 1.0) };
    let max_len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(out, r#"<text x="{}" y="16" text-anchor="middle">{title}</text>"#, w / 2.0);
    let _ = writeln!(out, r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="gray"/>"#, w - 2.0 * m, h - 2.0 * m);
    let _ = writeln!(out, r#"<text x="4" y="{m}">{hi:.3}</text><text x="4" y="{}">{lo:.3}</text>"#, h - m);
    for (i, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(k, v)| {
                let x = m + (w - 2.0 * m) * k as f64 / (max_len - 1) as f64;
                let y = h - m - (h - 2.0 * m) * (v - lo) / (hi - lo);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(out, r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#, m + 6.0, m + 14.0 * (i + 1) as f64);
    }
    out.push_str("</svg>\n");
    out
}

/// Minimal SVG scatter plot of a projection, coloured by modality.
pub fn svg_scatter(title: &str, projection: &Projection, labels: &[&str]) -> String {
    let (w, h, m) = (360.0, 360.0, 30.0);
    let pts: Vec<(usize, f64, f64)> = projection
        .coords
        .iter()
        .enumerate()
        .filter_map(|(j, c)| c.as_ref().map(|c| (j, c)))
        .flat_map(|(j, c)| c.rows().into_iter().map(move |r| (j, r[0], r[1])).collect::<Vec<_>>())
        .collect();
    let span = pts.iter().map(|&(_, x, y)| x.abs().max(y.abs())).fold(1e-12, f64::max);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(out, r#"<text x="{}" y="16" text-anchor="middle">{title}</text>"#, w / 2.0);
    for &(j, x, y) in &pts {
        let px = w / 2.0 + (w / 2.0 - m) * x / span;
        let py = h / 2.0 - (h / 2.0 - m) * y / span;
        let _ = writeln!(out, r#"<circle cx="{px:.1}" cy="{py:.1}" r="2.5" fill="{}" fill-opacity="0.7"/>"#, PALETTE[j % PALETTE.len()]);
    }
    for (j, label) in labels.iter().enumerate() {
        let _ = writeln!(out, r#"<text x="6" y="{}" fill="{}">{label}</text>"#, 30 + 14 * j, PALETTE[j % PALETTE.len()]);
    }
    out.push_str("</svg>\n");
    out
}

/// Writes per-run Dice CSVs, MedMAP-minus-baseline delta CSVs, a JSON summary,
/// a Markdown overview, and SVG plots into `out_dir`.
pub fn render_report(results: &[RunRecord], out_dir: &Path) -> Result<ReportBundle> {
    if results.is_empty() {
        return Err(Error::Report("no runs to report".into()));
    }
    let mut names = std::collections::BTreeSet::new();
    for r in results {
        if !names.insert(sanitize(&r.name)) {
            return Err(Error::Report(format!("duplicate run name {:?}", r.name)));
        }
    }
    let pairs = pair_runs(results)?;
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let mut write = |name: String, body: &str| -> Result<()> {
        let path = out_dir.join(name);
        fs::write(&path, body)?;
        files.push(path);
        Ok(())
    };

    let mut md = String::from("# MedMAP report\n\n| run | regime | anchor | medmap | WT | TC | ET | grand avg | final gap KL |\n|---|---|---|---|---|---|---|---|---|\n");
    let mut runs = Vec::new();
    for r in results {
        let stem = sanitize(&r.name);
        write(format!("dice_{stem}.csv"), &r.dice.to_csv()?)?;
        let final_gap_kl = r.gap_traces.last().map(GapReport::mean_off_diagonal_kl);
        let summary = RunSummary {
            name: r.name.clone(),
            regime: r.config.regime.as_str().into(),
            anchor: r.config.anchor.short_name().into(),
            medmap_enabled: r.config.medmap_enabled,
            seed: r.config.seed,
            grand_average: r.dice.grand_average,
            total_avg: r.dice.total_avg,
            final_gap_kl,
        };
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {:.2} | {:.2} | {:.2} | {:.2} | {} |",
            r.name,
            summary.regime,
            summary.anchor,
            if summary.medmap_enabled { "on" } else { "off" },
            r.dice.total_avg[0],
            r.dice.total_avg[1],
            r.dice.total_avg[2],
            r.dice.grand_average,
            final_gap_kl.map_or("-".into(), |v| format!("{v:.4}")),
        );
        runs.push(summary);

        if !r.loss_traces.is_empty() {
            let series: Vec<(String, Vec<f64>)> = r.loss_traces.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
            write(format!("loss_{stem}.svg"), &svg_line_chart(&format!("losses: {}", r.name), &series))?;
        }
        if let Some(p) = &r.embedding {
            let labels: Vec<&str> = crate::dataio::MODALITY_NAMES.iter().copied().take(p.coords.len()).collect();
            write(format!("embedding_{stem}.svg"), &svg_scatter(&format!("latents: {}", r.name), p, &labels))?;
        }
    }

    let gap_series: Vec<(String, Vec<f64>)> = results
        .iter()
        .filter(|r| !r.gap_traces.is_empty())
        .map(|r| (r.name.clone(), r.gap_traces.iter().map(GapReport::mean_off_diagonal_kl).collect()))
        .collect();
    if !gap_series.is_empty() {
        write("gap_vs_epoch.svg".into(), &svg_line_chart("mean off-diagonal KL per epoch", &gap_series))?;
    }

    let mut pair_summaries = Vec::new();
    if !pairs.is_empty() {
        md.push_str("\n## With minus without MedMAP\n\n| with | without | ΔWT | ΔTC | ΔET | Δgrand |\n|---|---|---|---|---|---|\n");
    }
    for (w, o) in pairs {
        let delta = results[w].dice.delta(&results[o].dice)?;
        write(format!("delta_{}.csv", sanitize(&results[w].name)), &delta.to_csv()?)?;
        let _ = writeln!(
            md,
            "| {} | {} | {:+.2} | {:+.2} | {:+.2} | {:+.2} |",
            results[w].name,
            results[o].name,
            delta.total_avg[0],
            delta.total_avg[1],
            delta.total_avg[2],
            delta.grand_average
        );
        pair_summaries.push(PairSummary {
            with_medmap: results[w].name.clone(),
            without_medmap: results[o].name.clone(),
            delta_grand_average: delta.grand_average,
            delta_total_avg: delta.total_avg,
        });
    }
    let _ = writeln!(md, "\n---\n{DICE_CONVENTION}");
    write("report.md".into(), &md)?;

    let summary = ReportSummary {
        schema: REPORT_SCHEMA.into(),
        runs,
        pairs: pair_summaries,
        dice_convention: DICE_CONVENTION.into(),
    };
    write("summary.json".into(), &serde_json::to_string_pretty(&summary)?)?;
    Ok(ReportBundle { summary, files })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{EncoderConfig, ModelConfig};

    #[test]
    fn dice_unit_values() {
        let gt = Array2::from_shape_fn((8, 8), |(y, _)| if y < 4 { 3u8 } else { 0 });
        assert_eq!(dice(&gt, &gt, &[3]).unwrap(), 100.0);
        let disjoint = Array2::from_shape_fn((8, 8), |(y, _)| if y >= 4 { 3u8 } else { 0 });
        assert_eq!(dice(&disjoint, &gt, &[3]).unwrap(), 0.0);
        // rows 2..6 overlap gt rows 0..4 in exactly half their pixels
        let half = Array2::from_shape_fn((8, 8), |(y, _)| if (2..6).contains(&y) { 3u8 } else { 0 });
        assert_eq!(dice(&half, &gt, &[3]).unwrap(), 50.0);
        let empty = Array2::<u8>::zeros((8, 8));
        assert_eq!(dice(&empty, &empty, &[3]).unwrap(), 100.0);
        assert!(dice(&empty, &Array2::zeros((4, 8)), &[3]).is_err());
    }

    #[test]
    fn composites_are_nested() {
        let [(wt_n, wt), (tc_n, tc), (et_n, et)] = composite_classes();
        assert_eq!([wt_n, tc_n, et_n], CLASS_NAMES);
        assert!(tc.iter().all(|c| wt.contains(c)));
        assert!(et.iter().all(|c| tc.contains(c)));
        assert!(wt.contains(&2) && !tc.contains(&2));
        assert_eq!(et, &[3]);
    }

    fn table_with(values: impl Fn(usize) -> [f64; 3]) -> DiceTable {
        let rows = enumerate_scenarios(4)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, mask)| DiceRow { mask, values: values(i) })
            .collect();
        DiceTable::from_rows(rows).unwrap()
    }

    #[test]
    fn marginals_are_cell_means() {
        let t = table_with(|i| [i as f64, 2.0 * i as f64, 50.0]);
        assert_eq!(t.rows.len(), 15);
        assert_eq!(t.avg_by_count.iter().map(|a| a.n).collect::<Vec<_>>(), vec![1, 2, 3]);
        // rows 0..4 have one modality
        assert!((t.avg_by_count[0].values[0] - 1.5).abs() < 1e-12);
        assert!((t.total_avg[0] - 7.0).abs() < 1e-12);
        assert!((t.grand_average - (7.0 + 14.0 + 50.0) / 3.0).abs() < 1e-12);
        assert_eq!(t.marginal_discrepancy(), 0.0);
        let mut tampered = t.clone();
        tampered.total_avg[1] += 1.0;
        assert!(tampered.marginal_discrepancy() >= 1.0);
    }

    #[test]
    fn delta_is_cellwise_difference() {
        let a = table_with(|i| [i as f64, 10.0, 20.0]);
        let b = table_with(|_| [1.0, 4.0, 25.0]);
        let d = a.delta(&b).unwrap();
        for (i, r) in d.rows.iter().enumerate() {
            assert_eq!(r.values, [i as f64 - 1.0, 6.0, -5.0]);
        }
        assert!((d.grand_average - (a.grand_average - b.grand_average)).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let t = table_with(|_| [100.0, 50.0, 0.0]);
        let csv = t.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "scenario,present_mask,WT,TC,ET");
        assert!(lines[1].starts_with("Flair,oxxx,100.0000,50.0000,0.0000"));
        assert_eq!(lines.len(), 1 + 15 + 3 + 1);
    }

    #[test]
    fn projection_of_identical_clouds_is_identical() {
        let f = Array2::from_shape_fn((6, 5), |(i, k)| ((i * 7 + k * 3) % 5) as f64 + 0.1 * k as f64);
        let batch = LatentBatch::full(vec![f.clone(), f.clone(), f]).unwrap();
        let p = project_embeddings(&batch).unwrap();
        assert!(!p.fallback);
        assert_eq!(p.coords[0].as_ref().unwrap().dim(), (6, 2));
        assert_eq!(p.coords[0], p.coords[1]);
        assert_eq!(p.coords[1], p.coords[2]);
    }

    #[test]
    fn projection_preserves_shift_direction() {
        let base = Array2::from_shape_fn((20, 4), |(i, k)| 0.01 * ((i * 13 + k * 7) % 11) as f64);
        let shift = [3.0, -1.0, 0.5, 2.0];
        let moved = Array2::from_shape_fn((20, 4), |(i, k)| base[[i, k]] + shift[k]);
        let batch = LatentBatch::full(vec![base, moved]).unwrap();
        let p = project_embeddings(&batch).unwrap();
        let norm = shift.iter().map(|v| v * v).sum::<f64>().sqrt();
        let first: Vec<f64> = p.components.row(0).to_vec();
        let cos: f64 = first.iter().zip(&shift).map(|(a, b)| a * b).sum::<f64>() / norm;
        assert!(cos.abs() > 0.999, "cos = {cos}");
        // largest-magnitude coordinate made positive
        let pivot = first.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap();
        assert!(pivot > 0.0);
    }

    #[test]
    fn rank_deficient_covariance_falls_back() {
        let f = Array2::from_shape_fn((4, 3), |(i, _)| i as f64);
        let p = project_embeddings(&LatentBatch::full(vec![f.clone(), f]).unwrap()).unwrap();
        assert!(p.fallback);
        assert_eq!(p.components.row(0).to_vec(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn evaluation_is_deterministic_and_matches_recount() {
        let spec = crate::dataio::SyntheticSpec {
            height: 16,
            width: 16,
            n_samples: 5,
            ..Default::default()
        };
        let data = crate::dataio::generate_dataset(&spec, 2).unwrap();
        let cfg = ModelConfig {
            num_modalities: 4,
            encoder: EncoderConfig {
                depth: 2,
                ..EncoderConfig::default()
            },
        };
        let model = Model::new(cfg, 1, None).unwrap();
        let a = evaluate_all_scenarios(&model, &data).unwrap();
        let b = evaluate_all_scenarios(&model, &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 15);
        let row = &a.rows[7];
        let refs: Vec<&MultiModalSample> = data.iter().collect();
        let preds = model.predict_labels(&refs, &row.mask).unwrap();
        let et: f64 = preds.iter().zip(&data).map(|(p, s)| dice(p, &s.label, &[3]).unwrap()).sum::<f64>() / 5.0;
        assert!((row.values[2] - et).abs() < 1e-9);
    }

    fn record(name: &str, medmap: bool, seed: u64) -> RunRecord {
        RunRecord {
            name: name.into(),
            config: RegimeConfig {
                medmap_enabled: medmap,
                seed,
                ..RegimeConfig::default()
            },
            dice: table_with(|i| [i as f64, if medmap { 60.0 } else { 50.0 }, 10.0]),
            gap_traces: Vec::new(),
            loss_traces: BTreeMap::from([("seg".to_string(), vec![1.0, 0.5])]),
            embedding: None,
        }
    }

    #[test]
    fn report_pairs_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(render_report(&[], dir.path()).is_err());
        assert!(fs::read_dir(dir.path()).unwrap().next().is_none());

        let single = render_report(&[record("a", true, 0)], dir.path()).unwrap();
        assert!(single.summary.pairs.is_empty());

        let bundle = render_report(&[record("on", true, 0), record("off", false, 0)], dir.path()).unwrap();
        assert_eq!(bundle.summary.schema, "MMREP1");
        assert_eq!(bundle.summary.pairs.len(), 1);
        assert!((bundle.summary.pairs[0].delta_total_avg[1] - 10.0).abs() < 1e-12);
        let delta = fs::read_to_string(dir.path().join("delta_on.csv")).unwrap();
        assert!(delta.lines().nth(1).unwrap().ends_with(",0.0000,10.0000,0.0000"));
        assert!(fs::read_to_string(dir.path().join("report.md")).unwrap().contains(DICE_CONVENTION));

        let err = render_report(&[record("on", true, 0), record("off", false, 1)], dir.path()).unwrap_err();
        assert!(err.to_string().contains("\"on\""), "{err}");
    }
}
