//! The four verbs. Each validates everything before writing any output.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tc2_core::calibration::{batch_stats, extract_factors, factor_weights, write_factor_csv, write_weights_csv};
use tc2_core::databatch::RawBatch;
use tc2_core::diagnostics::{export_metrics, probe, read_metrics_csv, Labeled, ProbeResult};
use tc2_core::encoder::encode_matrix;
use tc2_core::scm::{is_monotone_in_conflict, theorem1_grid, verify_theorem1, GridRow, Theorem1Report};
use tc2_core::trainer::{resolve, train, Checkpoint};
use tc2_core::{Error, Matrix};

use crate::config::{Overrides, RunConfig};
use crate::plot::{conflict_chart, loss_chart};

/// Why a command did not succeed; maps onto the process exit code.
#[derive(Debug, PartialEq)]
pub enum Failure {
    /// A check or the run itself failed (exit 1).
    Assertion(String),
    /// Bad configuration or input (exit 2).
    Input(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Assertion(_) => 1,
            Failure::Input(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Assertion(m) => write!(f, "check failed: {m}"),
            Failure::Input(m) => write!(f, "input error: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric(_) | Error::Convergence { .. } | Error::DegenerateFactor { .. } => {
                Failure::Assertion(e.to_string())
            }
            _ => Failure::Input(e.to_string()),
        }
    }
}

pub type Outcome<T> = std::result::Result<T, Failure>;

fn io_fail(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Input(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_fail(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_fail(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_fail(path, e))
}

fn make_dir(dir: &Path) -> Outcome<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))
}

fn config_path(p: Option<&Path>) -> Outcome<&Path> {
    p.ok_or_else(|| Failure::Input("--config is required for this command".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Theorem1Checks {
    pub null_weight_norm_j: f64,
    pub null_below_threshold: bool,
    pub max_conflict_weight_norm_j: f64,
    pub conflict_above_threshold: bool,
    pub monotone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Theorem1Output {
    pub grid: Vec<GridRow>,
    /// Uncorrelated labels at the larger sample size.
    pub null: Theorem1Report,
    pub checks: Theorem1Checks,
    pub passed: bool,
}

pub fn theorem1(config: Option<&Path>, over: Overrides, out: &Path) -> Outcome<Theorem1Output> {
    let cfg = RunConfig::load(config_path(config)?, over)?;
    let spec = cfg.theorem1()?.clone();
    let seeds: Vec<u64> = (0..spec.n_seeds as u64).map(|k| cfg.seed.wrapping_add(k)).collect();
    let grid = theorem1_grid(&spec.scm, &spec.grid, spec.n, &seeds)?;
    let null = verify_theorem1(&spec.scm.with_correlation(0.5), spec.null_n, cfg.seed)?;
    let strongest = grid
        .iter()
        .max_by(|a, b| (a.c_ij - 0.5).abs().total_cmp(&(b.c_ij - 0.5).abs()))
        .map_or(0.0, |r| r.weight_norm_j);
    let checks = Theorem1Checks {
        null_weight_norm_j: null.weight_norm_j,
        null_below_threshold: null.weight_norm_j < spec.null_threshold,
        max_conflict_weight_norm_j: strongest,
        conflict_above_threshold: strongest > spec.conflict_threshold,
        monotone: is_monotone_in_conflict(&grid),
    };
    let passed = checks.null_below_threshold && checks.conflict_above_threshold && checks.monotone;
    let report = Theorem1Output {
        grid,
        null,
        checks,
        passed,
    };
    make_dir(out)?;
    write_json(&out.join("theorem1.json"), &report)?;
    let mut csv = String::from("c_ij,weight_norm_j\n");
    for r in &report.grid {
        csv.push_str(&format!("{},{}\n", r.c_ij, r.weight_norm_j));
    }
    let path = out.join("theorem1.csv");
    std::fs::write(&path, csv).map_err(|e| io_fail(&path, e))?;
    if !report.passed {
        return Err(Failure::Assertion(format!(
            "theorem grid checks failed: {:?}",
            report.checks
        )));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub records: usize,
    pub aborted: Option<String>,
}

/// Trains and writes `checkpoint.json`, `metrics.csv`, `conflict.csv`,
/// `factors.csv` (columns of `V`) and `weights.csv` (`w` per sample).
pub fn train_cmd(config: Option<&Path>, over: Overrides, out: &Path) -> Outcome<TrainSummary> {
    let cfg = RunConfig::load(config_path(config)?, over)?;
    let data = cfg.training_data()?;
    let tcfg = resolve(&cfg.train_config(), &data)?;
    let run = train(&tcfg, &data)?;
    make_dir(out)?;
    Checkpoint::new(&tcfg, &run).save(&out.join("checkpoint.json"))?;
    let (m, c) = (out.join("metrics.csv"), out.join("conflict.csv"));
    export_metrics(&run.state.history, create(&m)?, create(&c)?)?;

    let x = samples_matrix(&data.batch)?;
    let z = encode_matrix(&run.state.encoder, &x)?;
    let basis = extract_factors(&run.state.fv, &batch_stats(&z)?)?;
    write_factor_csv(&basis, create(&out.join("factors.csv"))?)?;
    write_weights_csv(&factor_weights(&run.state.fw, &z)?, create(&out.join("weights.csv"))?)?;

    let summary = TrainSummary {
        epochs: run.state.epoch,
        records: run.state.history.losses.len(),
        aborted: run.aborted,
    };
    if let Some(why) = &summary.aborted {
        return Err(Failure::Assertion(format!(
            "training aborted ({why}); last good state saved"
        )));
    }
    Ok(summary)
}

fn samples_matrix(batch: &RawBatch) -> Outcome<Matrix> {
    Ok(Matrix::from_rows(&batch.samples)?)
}

/// Encodes the probe split with the frozen encoder and writes `probe.json`.
pub fn probe_cmd(
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    over: Overrides,
    out: &Path,
) -> Outcome<ProbeResult> {
    let cfg = RunConfig::load(config_path(config)?, over)?;
    let ck_path: PathBuf = checkpoint.map_or_else(|| out.join("checkpoint.json"), Path::to_path_buf);
    let ck = Checkpoint::load(&ck_path).map_err(|e| io_fail(&ck_path, e))?;
    let (train_set, test_set) = cfg.probe_data()?;
    let d_in = ck.encoder.d_in();
    if train_set.dim() != d_in {
        return Err(Failure::Input(format!(
            "checkpoint encoder expects {d_in} features, probe data has {}",
            train_set.dim()
        )));
    }
    let ztr = encode_matrix(&ck.encoder, &samples_matrix(&train_set)?)?;
    let zte = encode_matrix(&ck.encoder, &samples_matrix(&test_set)?)?;
    let labels = |b: &RawBatch| b.labels.clone().unwrap_or_default();
    let (ytr, yte) = (labels(&train_set), labels(&test_set));
    let result = probe(
        Labeled {
            features: &ztr,
            labels: &ytr,
        },
        Labeled {
            features: &zte,
            labels: &yte,
        },
    )?;
    make_dir(out)?;
    write_json(&out.join("probe.json"), &result)?;
    Ok(result)
}

/// Renders `conflict_epoch.svg` and `loss.svg` from a metrics log.
pub fn plot_cmd(metrics: Option<&Path>, out: &Path) -> Outcome<()> {
    let path: PathBuf = metrics.map_or_else(|| out.join("metrics.csv"), Path::to_path_buf);
    let file = File::open(&path).map_err(|e| io_fail(&path, e))?;
    let records = read_metrics_csv(file).map_err(|e| io_fail(&path, e))?;
    make_dir(out)?;
    for (name, svg) in [
        ("conflict_epoch.svg", conflict_chart(&records)),
        ("loss.svg", loss_chart(&records)),
    ] {
        let p = out.join(name);
        std::fs::write(&p, svg).map_err(|e| io_fail(&p, e))?;
    }
    Ok(())
}
