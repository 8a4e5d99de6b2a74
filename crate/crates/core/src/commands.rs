//! Subcommand implementations shared by the `medmap` binary and the tests.
//!
//! A training run writes one directory per seed:
//!
//! | file | contents |
//! |---|---|
//! | `config.cfg` | key-value echo of the exact configuration |
//! | `model.mmckpt` | trained parameters (`teacher.mmckpt`, `full_branch.mmckpt` for KD/DA) |
//! | `metrics.json` | loss and gap traces plus the test-split Dice table |
//! | `dice.csv` | the same Dice table as CSV |
//! | `timing.json` | wall-clock seconds, kept apart so metrics are reproducible |
//! | `train.log` | one line per epoch |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataio::{
    generate_dataset, hex_digest, read_dataset, select_split, write_dataset, DatasetManifest, MultiModalSample,
    ScenarioMask, Split, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::evalrep::{evaluate_all_scenarios, project_embeddings, render_report, DiceTable, Projection, RunRecord};
use crate::latent_align::{estimate_gap, AnchorSpec, GapReport};
use crate::nets::{load_checkpoint, save_checkpoint, Model};
use crate::regimes::{train, TrainResult};
use crate::theory::{run_probe, TheoryReport};

pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.cfg";
pub const CHECKPOINT_FILE: &str = "model.mmckpt";
pub const METRICS_SCHEMA: &str = "MMMET1";
pub const WORKERS_ENV: &str = "MEDMAP_NUM_WORKERS";
/// Number of test samples projected by `gap`.
const PROJECTION_SAMPLES: usize = 64;

/// Process exit code for an error: 2 for configuration problems, 3 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Validation { .. } => 2,
        _ => 3,
    }
}

/// Parallel seed runs allowed by `MEDMAP_NUM_WORKERS` (default 1).
pub fn num_workers() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// A dataset with the hash that identifies it across runs.
pub struct LoadedData {
    pub hash: String,
    pub samples: Vec<MultiModalSample>,
}

fn manifest_for(cfg: &RunConfig, samples: &[MultiModalSample]) -> DatasetManifest {
    DatasetManifest {
        format: "MMS1".to_string(),
        spec: cfg.synthetic_spec(),
        seed: cfg.data_seed,
        sample_ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
    }
}

/// Reads `data_dir` or generates the configured dataset in memory. Both
/// paths hash the same manifest bytes.
pub fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    match &cfg.data_dir {
        Some(dir) => {
            let (_, samples) = read_dataset(dir)?;
            let hash = hex_digest(&fs::read(dir.join(MANIFEST_FILE))?);
            Ok(LoadedData { hash, samples })
        }
        None => {
            let samples = generate_dataset(&cfg.synthetic_spec(), cfg.data_seed)?;
            let hash = hex_digest(&serde_json::to_vec_pretty(&manifest_for(cfg, &samples))?);
            Ok(LoadedData { hash, samples })
        }
    }
}

/// `gen-data`: writes the configured dataset to `out_dir`.
pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let samples = generate_dataset(&cfg.synthetic_spec(), cfg.data_seed)?;
    write_dataset(out_dir, &cfg.synthetic_spec(), cfg.data_seed, &samples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherMetrics {
    pub traces: BTreeMap<String, Vec<f64>>,
    pub final_gap_kl: Option<f64>,
}

/// Contents of `metrics.json`; free of wall-clock values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub schema: String,
    pub run_name: String,
    pub seed: u64,
    pub config: RunConfig,
    pub dataset_hash: String,
    pub model_checksum: String,
    pub steps: u64,
    pub traces: BTreeMap<String, Vec<f64>>,
    pub initial_gap: GapReport,
    pub gap_traces: Vec<GapReport>,
    pub final_gap_kl: Option<f64>,
    pub diverged: Option<String>,
    pub warnings: Vec<String>,
    pub teacher: Option<TeacherMetrics>,
    pub dice: DiceTable,
}

/// Result of training and evaluating one seed.
pub struct SeedRun {
    pub dir: PathBuf,
    pub metrics: RunMetrics,
    pub result: TrainResult,
    pub wall_clock_seconds: f64,
}

fn epoch_log(result: &TrainResult) -> String {
    let mut log = String::new();
    let epochs = result.gap_traces.len();
    for e in 0..epochs {
        let _ = write!(log, "epoch {:>3}", e + 1);
        for (k, v) in &result.traces {
            let _ = write!(log, " {k}={:.6}", v[e]);
        }
        let _ = writeln!(log, " gap_kl={:.6}", result.gap_traces[e].mean_off_diagonal_kl());
    }
    if let Some(d) = &result.diverged {
        let _ = writeln!(log, "stopped: {d}");
    }
    for w in &result.warnings {
        let _ = writeln!(log, "warning: {w}");
    }
    log
}

/// Trains and evaluates one seed, writing its run directory under `out_dir`.
pub fn train_seed(cfg: &RunConfig, data: &LoadedData, seed: u64, out_dir: &Path) -> Result<SeedRun> {
    let regime_cfg = cfg.regime_config(seed)?;
    let train_set = select_split(&data.samples, Split::Train);
    let test_set = select_split(&data.samples, Split::Test);
    let (result, teacher) = train(&train_set, &regime_cfg)?;
    let dice = evaluate_all_scenarios(&result.model, &test_set)?;

    let name = cfg.run_name(seed);
    let dir = out_dir.join(&name);
    fs::create_dir_all(&dir)?;
    let echo = RunConfig {
        seeds: vec![seed],
        out_dir: Some(out_dir.to_path_buf()),
        ..cfg.clone()
    };
    fs::write(dir.join(CONFIG_FILE), echo.to_key_values()?)?;
    save_checkpoint(&result.model, result.steps, seed, &dir.join(CHECKPOINT_FILE))?;
    if let Some(t) = &teacher {
        save_checkpoint(&t.model, t.steps, seed, &dir.join("teacher.mmckpt"))?;
    }
    if let Some(full) = &result.full_branch {
        save_checkpoint(full, result.steps, seed, &dir.join("full_branch.mmckpt"))?;
    }
    let metrics = RunMetrics {
        schema: METRICS_SCHEMA.into(),
        run_name: name,
        seed,
        config: echo,
        dataset_hash: data.hash.clone(),
        model_checksum: result.model.checksum(),
        steps: result.steps,
        traces: result.traces.clone(),
        initial_gap: result.initial_gap.clone(),
        gap_traces: result.gap_traces.clone(),
        final_gap_kl: result.gap_traces.last().map(GapReport::mean_off_diagonal_kl),
        diverged: result.diverged.clone(),
        warnings: result.warnings.clone(),
        teacher: teacher.as_ref().map(|t| TeacherMetrics {
            traces: t.traces.clone(),
            final_gap_kl: t.gap_traces.last().map(GapReport::mean_off_diagonal_kl),
        }),
        dice,
    };
    fs::write(dir.join(METRICS_FILE), serde_json::to_vec_pretty(&metrics)?)?;
    fs::write(dir.join("dice.csv"), metrics.dice.to_csv()?)?;
    let wall = result.wall_clock_seconds + teacher.as_ref().map_or(0.0, |t| t.wall_clock_seconds);
    fs::write(
        dir.join("timing.json"),
        serde_json::to_vec_pretty(&serde_json::json!({ "wall_clock_seconds": wall }))?,
    )?;
    fs::write(dir.join("train.log"), epoch_log(&result))?;
    Ok(SeedRun {
        dir,
        metrics,
        result,
        wall_clock_seconds: wall,
    })
}

/// `train`: one run directory per seed, at most `workers` seeds at a time.
pub fn cmd_train(cfg: &RunConfig, workers: usize) -> Result<Vec<SeedRun>> {
    let seeds = cfg.require_seeds()?.to_vec();
    let out_dir = cfg.require_out_dir()?.to_path_buf();
    let data = load_data(cfg)?;
    let mut runs = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(workers.max(1)) {
        let results: Vec<Result<SeedRun>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| {
                    let data = &data;
                    let out_dir = &out_dir;
                    scope.spawn(move || train_seed(cfg, data, seed, out_dir))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Report("training thread panicked".into()))))
                .collect()
        });
        for r in results {
            runs.push(r?);
        }
    }
    Ok(runs)
}

/// Loads a checkpoint, mapping a missing file to a clear error.
pub fn load_model(checkpoint: &Path) -> Result<Model> {
    if !checkpoint.is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint {} not found", checkpoint.display()),
        )));
    }
    Ok(load_checkpoint(checkpoint)?.1)
}

fn test_split(cfg: &RunConfig, model: &Model) -> Result<Vec<MultiModalSample>> {
    let data = load_data(cfg)?;
    let test = select_split(&data.samples, Split::Test);
    if test.first().is_some_and(|s| s.num_modalities() != model.num_modalities()) {
        return Err(Error::Config("checkpoint and dataset disagree on the modality count".into()));
    }
    Ok(test)
}

/// `eval`: Dice over every scenario on the test split, written to `out_dir`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<DiceTable> {
    let model = load_model(checkpoint)?;
    let table = evaluate_all_scenarios(&model, &test_split(cfg, &model)?)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("dice.csv"), table.to_csv()?)?;
    fs::write(out_dir.join("dice.json"), serde_json::to_vec_pretty(&table)?)?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapOutput {
    pub anchor: AnchorSpec,
    pub gap: GapReport,
    pub projection: Projection,
}

/// `gap`: modality gap and 2-D projection of the test latents with every
/// modality present. A checkpoint with trained adaptive weights uses them.
pub fn cmd_gap(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<GapOutput> {
    let model = load_model(checkpoint)?;
    let test = test_split(cfg, &model)?;
    let refs: Vec<&MultiModalSample> = test.iter().take(PROJECTION_SAMPLES).collect();
    if refs.len() < 2 {
        return Err(Error::validation("dataset", "gap estimation needs at least two test samples"));
    }
    let anchor = match &model.anchor_logits {
        Some(w) => AnchorSpec::Adaptive { weights_raw: w.clone() },
        None => cfg.anchor_spec()?,
    };
    let latents = model.encode(&refs, &ScenarioMask::full(model.num_modalities()))?;
    let out = GapOutput {
        gap: estimate_gap(&latents, &anchor)?,
        projection: project_embeddings(&latents)?,
        anchor,
    };
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("gap.json"), serde_json::to_vec_pretty(&out)?)?;
    Ok(out)
}

/// `theory`: one probe report per seed, `theory_seed<N>.json` in `out_dir`.
pub fn cmd_theory(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<TheoryReport>> {
    let seeds = cfg.require_seeds()?;
    fs::create_dir_all(out_dir)?;
    seeds
        .iter()
        .map(|&seed| {
            let report = run_probe(&cfg.probe_params(seed))?;
            fs::write(
                out_dir.join(format!("theory_seed{seed}.json")),
                serde_json::to_vec_pretty(&report)?,
            )?;
            Ok(report)
        })
        .collect()
}

/// Reads a run directory written by `train`; a `gap.json` next to it adds
/// the embedding projection.
pub fn read_run(dir: &Path) -> Result<(RunMetrics, RunRecord)> {
    let bytes = fs::read(dir.join(METRICS_FILE))
        .map_err(|e| Error::Report(format!("{}: cannot read {METRICS_FILE}: {e}", dir.display())))?;
    let metrics: RunMetrics = serde_json::from_slice(&bytes)?;
    let embedding = match fs::read(dir.join("gap.json")) {
        Ok(b) => Some(serde_json::from_slice::<GapOutput>(&b)?.projection),
        Err(_) => None,
    };
    let record = RunRecord {
        name: metrics.run_name.clone(),
        config: metrics.config.regime_config(metrics.seed)?,
        dice: metrics.dice.clone(),
        gap_traces: metrics.gap_traces.clone(),
        loss_traces: metrics.traces.clone(),
        embedding,
    };
    Ok((metrics, record))
}

/// `report`: tables, deltas, and plots over several run directories, which
/// must share one dataset.
pub fn cmd_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<crate::evalrep::ReportBundle> {
    if run_dirs.is_empty() {
        return Err(Error::Report("no run directories given".into()));
    }
    let mut records = Vec::new();
    let mut hash: Option<(String, PathBuf)> = None;
    for dir in run_dirs {
        let (metrics, record) = read_run(dir)?;
        match &hash {
            Some((h, first)) if *h != metrics.dataset_hash => {
                return Err(Error::Report(format!(
                    "{} and {} were trained on different datasets",
                    first.display(),
                    dir.display()
                )))
            }
            None => hash = Some((metrics.dataset_hash.clone(), dir.clone())),
            _ => {}
        }
        records.push(record);
    }
    render_report(&records, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(extra: &str) -> RunConfig {
        RunConfig::parse(&format!(
            "height = 16\nwidth = 16\nn_samples = 24\nepochs = 1\nbatch_size = 4\nbase_channels = 2\nlatent_dim = 8\ndepth = 2\ndecoder_channels = 8\n{extra}"
        ))
        .unwrap()
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::validation("f", "r")), 2);
        assert_eq!(exit_code(&Error::Numeric { layer: "head".into() }), 3);
    }

    #[test]
    fn gen_data_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny("");
        cmd_gen_data(&cfg, &dir.path().join("a/nested")).unwrap();
        cmd_gen_data(&cfg, &dir.path().join("b")).unwrap();
        let ha = crate::dataio::manifest_hash(&dir.path().join("a/nested")).unwrap();
        let hb = crate::dataio::manifest_hash(&dir.path().join("b")).unwrap();
        assert_eq!(ha, hb);
        // the in-memory path hashes identically
        assert_eq!(load_data(&cfg).unwrap().hash, ha);

        let empty = cmd_gen_data(&RunConfig { n_samples: 0, ..cfg }, &dir.path().join("c")).unwrap();
        assert!(empty.sample_ids.is_empty());
    }

    #[test]
    fn train_requires_seeds_and_output() {
        assert!(matches!(cmd_train(&tiny("out_dir = x"), 1), Err(Error::Config(_))));
        assert!(matches!(cmd_train(&tiny("seeds = [1]"), 1), Err(Error::Config(_))));
    }

    #[test]
    fn train_eval_gap_report_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().display().to_string();
        let on = tiny(&format!("regime = sls\nseeds = [0]\nout_dir = \"{out}\""));
        let off = RunConfig { medmap: false, ..on.clone() };
        let run_on = cmd_train(&on, 1).unwrap().remove(0);
        let run_off = cmd_train(&off, 2).unwrap().remove(0);
        assert!(run_on.metrics.traces.contains_key("align"));
        assert!(!run_off.metrics.traces.contains_key("align"));
        assert_eq!(run_on.metrics.dice.rows.len(), 15);
        let echo = fs::read_to_string(run_on.dir.join(CONFIG_FILE)).unwrap();
        assert!(echo.contains("alpha = 0.125"));
        assert_eq!(RunConfig::parse(&echo).unwrap().seeds, vec![0]);

        let ckpt = run_on.dir.join(CHECKPOINT_FILE);
        let table = cmd_eval(&on, &ckpt, &dir.path().join("eval")).unwrap();
        assert_eq!(table, run_on.metrics.dice);
        assert!(cmd_eval(&on, &dir.path().join("missing.mmckpt"), dir.path()).is_err());
        let gap = cmd_gap(&on, &ckpt, &run_on.dir).unwrap();
        assert_eq!(gap.projection.coords.len(), 4);

        let bundle = cmd_report(&[run_on.dir.clone(), run_off.dir.clone()], &dir.path().join("report")).unwrap();
        assert_eq!(bundle.summary.pairs.len(), 1);
        let single = cmd_report(std::slice::from_ref(&run_on.dir), &dir.path().join("report1")).unwrap();
        assert!(single.summary.pairs.is_empty());

        let other = RunConfig {
            data_seed: 9,
            ..off.clone()
        };
        let other_dir = dir.path().join("other");
        let run_other = cmd_train(&RunConfig { out_dir: Some(other_dir), ..other }, 1).unwrap().remove(0);
        assert!(matches!(
            cmd_report(&[run_on.dir, run_other.dir], &dir.path().join("report2")),
            Err(Error::Report(_))
        ));
    }

    #[test]
    fn theory_command_writes_reports() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny("seeds = [0]\ninstances = 10");
        let reports = cmd_theory(&cfg, dir.path()).unwrap();
        assert_eq!(reports[0].elbo_instances.len(), 10);
        assert!(dir.path().join("theory_seed0.json").is_file());
        assert!(cmd_theory(&tiny(""), dir.path()).is_err());
    }
}
