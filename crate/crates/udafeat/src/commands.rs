//! The five subcommands as library functions.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use udafeat_core::gradcheck::{run_suite, CheckResult, SuiteOptions};
use udafeat_core::metrics::{
    activation_histogram, feature_rows, project2d, similarity_matrix, sparsity_scores, DEFAULT_SAMPLE_CAP,
    SPARSITY_TAU,
};
use udafeat_core::trainer::{evaluate, Evaluation, StepLog, Trainer};
use udafeat_core::{SegNet, SegNetConfig, SegNetParams};

use crate::checkpoint;
use crate::config::{apply_ablation, ExperimentConfig};
use crate::dataset::{self, Dataset};
use crate::error::{io_err, Error, Result};
use crate::report;

pub const THREADS_ENV: &str = "UDAFEAT_THREADS";
pub const METRIC_LOG: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.bin";

/// Worker cap from `UDAFEAT_THREADS`; 1 when unset.
pub fn worker_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
    }
}

pub fn checkpoint_name(step: usize) -> String {
    format!("ckpt_{step:06}.bin")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn require_dir(dir: Option<&Path>, what: &str) -> Result<PathBuf> {
    dir.map(Path::to_path_buf).ok_or_else(|| Error::Config(format!("{what} directory is required")))
}

fn out_dir(explicit: Option<&Path>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Config("an output directory is required (--out or out_dir)".into()))
}

/// Optional overrides of the generated split sizes.
#[derive(Debug, Clone, Copy, Default)]
pub struct CountOverrides {
    pub source: Option<usize>,
    pub target: Option<usize>,
    pub val: Option<usize>,
}

/// Writes a dataset and returns its manifest path.
pub fn generate(cfg: &ExperimentConfig, out: Option<&Path>, overrides: CountOverrides) -> Result<PathBuf> {
    let cfg = cfg.resolved()?;
    let root = out_dir(out, &cfg)?;
    let mut counts = cfg.counts;
    counts.source = overrides.source.unwrap_or(counts.source);
    counts.target = overrides.target.unwrap_or(counts.target);
    counts.val = overrides.val.unwrap_or(counts.val);
    dataset::write_dataset(&root, &cfg.scene, &cfg.shift, counts)
}

fn check_data_fits(ds: &Dataset, model: &SegNetConfig) -> Result<()> {
    let spec = &ds.manifest.spec;
    if (spec.height, spec.width) != (model.input_height, model.input_width) {
        return Err(Error::Mismatch(format!(
            "dataset images are {}x{}, the network expects {}x{}",
            spec.height, spec.width, model.input_height, model.input_width
        )));
    }
    Ok(())
}

fn load_dataset(data: Option<&Path>) -> Result<Dataset> {
    let root = require_dir(data, "--data")?;
    if !root.is_dir() {
        return Err(Error::Io {
            path: root,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        });
    }
    Dataset::load(&root)
}

/// Summary of a finished training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub final_step: usize,
    pub best: Option<(usize, f64)>,
}

/// Warm-up then adaptation. Writes `config.json`, the metric log,
/// `ckpt_NNNNNN.bin` at the end of warm-up, at every validation step and at
/// the last step, and `best.bin`.
pub fn train(cfg: &ExperimentConfig, data: Option<&Path>, out: Option<&Path>, ablation: Option<&str>) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    if let Some(mask) = ablation {
        let (weights, em) = apply_ablation(&cfg.train.weights, mask)?;
        cfg.train.weights = weights;
        cfg.train.flags.include_em = em;
    }
    let cfg = cfg.resolved()?;
    let out = out_dir(out, &cfg)?;
    let ds = load_dataset(data)?;
    check_data_fits(&ds, &cfg.model)?;
    create_dir(&out)?;
    report::write(&out.join("config.json"), &cfg.to_json())?;

    let net = SegNet::new(cfg.model.clone())?;
    let params = SegNetParams::init(&cfg.model)?;
    let mut trainer = Trainer::new(net, cfg.train.clone(), params)?;

    let log_path = out.join(METRIC_LOG);
    let file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let mut log = BufWriter::new(file);
    writeln!(log, "{}", report::METRIC_LOG_HEADER).map_err(io_err(&log_path))?;

    let warmup_steps = cfg.train.warmup_steps;
    let total = cfg.train.total_steps();
    let model = cfg.model.clone();
    let mut io_failure: Option<Error> = None;
    let mut observer = |entry: &StepLog, params: &SegNetParams| -> udafeat_core::Result<()> {
        let written = writeln!(log, "{}", report::metric_row(entry)).map_err(io_err(&log_path)).and_then(|_| {
            if entry.val_miou.is_some() || entry.step == warmup_steps || entry.step == total {
                checkpoint::save(&out.join(checkpoint_name(entry.step)), &model, params)
            } else {
                Ok(())
            }
        });
        written.map_err(|e| {
            io_failure = Some(e);
            udafeat_core::Error::InvalidArgument {
                op: "train",
                reason: "output write failed".into(),
            }
        })
    };
    let result = trainer
        .warmup(&ds.source, &mut observer)
        .and_then(|_| trainer.adapt(&ds.source, &ds.target, &ds.val, &mut observer));
    if let Some(e) = io_failure {
        return Err(e);
    }
    log.flush().map_err(io_err(&log_path))?;
    if let Err(e) = result {
        if let udafeat_core::Error::NumericAbort { step, report } = &e {
            let dump = serde_json::json!({ "step": step, "report": report });
            report::write(&out.join("abort.json"), &serde_json::to_string_pretty(&dump).expect("json"))?;
        }
        return Err(e.into());
    }
    let state = trainer.into_state();
    let (best_params, best) = match &state.best_val {
        Some((step, miou, p)) => (p, Some((*step, *miou))),
        None => (&state.params, None),
    };
    checkpoint::save(&out.join(BEST_CHECKPOINT), &cfg.model, best_params)?;
    Ok(TrainOutcome {
        out_dir: out,
        final_step: state.step,
        best,
    })
}

fn evaluate_checkpoint(path: &Path, expected: Option<&SegNetConfig>, ds: &Dataset) -> Result<(SegNetConfig, Evaluation)> {
    let (model, params) = checkpoint::load(path)?;
    if let Some(exp) = expected {
        if exp != &model {
            return Err(Error::Mismatch(format!("{} does not match the configured network", path.display())));
        }
    }
    check_data_fits(ds, &model)?;
    let net = SegNet::new(model.clone())?;
    Ok((model, evaluate(&net, &params, &ds.val)?))
}

/// Evaluates a checkpoint on the validation split, writes the diagnostic
/// CSVs and returns the mIoU.
pub fn eval(
    checkpoint_path: &Path,
    expected: Option<&SegNetConfig>,
    data: Option<&Path>,
    out: &Path,
    seed: u64,
) -> Result<f64> {
    let ds = load_dataset(data)?;
    let (model, ev) = evaluate_checkpoint(checkpoint_path, expected, &ds)?;
    let n = model.num_classes;
    create_dir(out)?;
    report::write(&out.join("iou.csv"), &report::iou_csv(&ev.iou))?;
    let sim = similarity_matrix(&ev.features, &ev.feature_labels, n)?;
    report::write(&out.join("similarity.csv"), &report::similarity_csv(&sim))?;
    let sp = sparsity_scores(&ev.features, &ev.feature_labels, n, SPARSITY_TAU)?;
    report::write(&out.join("sparsity.csv"), &report::sparsity_csv(&sp))?;
    let hist = activation_histogram(&ev.features)?;
    report::write(&out.join("histogram.csv"), &report::histogram_csv(&hist))?;
    let (rows, classes) = feature_rows(&ev.features, &ev.feature_labels)?;
    let points = project2d(&rows, &classes, DEFAULT_SAMPLE_CAP, seed)?;
    report::write(&out.join("projection.csv"), &report::projection_csv(&points))?;
    Ok(ev.iou.miou)
}

/// Side-by-side diagnostics of two checkpoints sharing one network config.
pub fn diagnose(a: &Path, b: &Path, data: Option<&Path>, out: &Path) -> Result<()> {
    let ds = load_dataset(data)?;
    let (model, ea) = evaluate_checkpoint(a, None, &ds)?;
    let (_, eb) = evaluate_checkpoint(b, Some(&model), &ds)?;
    let n = model.num_classes;
    let sim_a = similarity_matrix(&ea.features, &ea.feature_labels, n)?;
    let sim_b = similarity_matrix(&eb.features, &eb.feature_labels, n)?;
    let sp_a = sparsity_scores(&ea.features, &ea.feature_labels, n, SPARSITY_TAU)?;
    let sp_b = sparsity_scores(&eb.features, &eb.feature_labels, n, SPARSITY_TAU)?;
    let h_a = activation_histogram(&ea.features)?;
    let h_b = activation_histogram(&eb.features)?;
    create_dir(out)?;
    report::write(&out.join("compare_similarity.csv"), &report::similarity_comparison_csv(&sim_a, &sim_b))?;
    report::write(&out.join("compare_classes.csv"), &report::class_comparison_csv(&sim_a, &sim_b, &sp_a, &sp_b))?;
    report::write(&out.join("compare_histogram.csv"), &report::histogram_comparison_csv(&h_a, &h_b))?;
    Ok(())
}

/// Runs the finite-difference suite for `count` consecutive seeds from
/// `first_seed`, spread over `workers` threads. Results are in seed order.
pub fn gradcheck(first_seed: u64, count: u64, opts: SuiteOptions, workers: usize) -> Result<Vec<(u64, Vec<CheckResult>)>> {
    let seeds: Vec<u64> = (first_seed..first_seed + count).collect();
    let chunk = seeds.len().div_ceil(workers.max(1)).max(1);
    let results: Vec<udafeat_core::Result<Vec<(u64, Vec<CheckResult>)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|&seed| run_suite(seed, &opts).map(|r| (seed, r))).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("gradcheck worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(seeds.len());
    for part in results {
        out.extend(part?);
    }
    Ok(out)
}
