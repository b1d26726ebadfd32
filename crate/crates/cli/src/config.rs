//! Run configuration: one JSON document with the sections `data`, `tasks`,
//! `model`, `tc2`, `train` and `eval`, plus a mandatory top-level `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tc2_core::databatch::{load_idx, load_idx_labels, RawBatch, TaskSpec};
use tc2_core::encoder::ModelSpec;
use tc2_core::scm::{ConflictBenchmark, DomainShift, ScmConfig};
use tc2_core::trainer::{LoopSpec, Tc2Spec, TrainConfig, TrainData};
use tc2_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSpec,
    #[serde(default)]
    pub tasks: TaskSpec,
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    #[serde(default)]
    pub tc2: Tc2Spec,
    #[serde(default)]
    pub train: LoopSpec,
    #[serde(default)]
    pub eval: EvalSpec,
}

fn default_model() -> ModelSpec {
    ModelSpec::new(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSpec {
    /// Factor model for the theorem check.
    Scm(Theorem1Spec),
    /// Two-domain conflict benchmark.
    Benchmark(BenchmarkSpec),
    /// IDX image (and optional label) files.
    Idx(IdxSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Theorem1Spec {
    #[serde(default = "default_scm")]
    pub scm: ScmConfig,
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
    #[serde(default = "default_n")]
    pub n: usize,
    /// Sample size of the uncorrelated check.
    #[serde(default = "default_null_n")]
    pub null_n: usize,
    /// Seeds `seed, seed + 1, ...` per grid point.
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    #[serde(default = "default_null_threshold")]
    pub null_threshold: f64,
    #[serde(default = "default_conflict_threshold")]
    pub conflict_threshold: f64,
}

fn default_scm() -> ScmConfig {
    ScmConfig::symmetric(1, 1.0, 1.0, 0.5)
}
fn default_grid() -> Vec<f64> {
    vec![0.5, 0.6, 0.7, 0.8, 0.9]
}
fn default_n() -> usize {
    100_000
}
fn default_null_n() -> usize {
    1_000_000
}
fn default_n_seeds() -> usize {
    5
}
fn default_null_threshold() -> f64 {
    0.02
}
fn default_conflict_threshold() -> f64 {
    0.1
}

impl Default for Theorem1Spec {
    fn default() -> Self {
        Self {
            scm: default_scm(),
            grid: default_grid(),
            n: default_n(),
            null_n: default_null_n(),
            n_seeds: default_n_seeds(),
            null_threshold: default_null_threshold(),
            conflict_threshold: default_conflict_threshold(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    #[serde(default = "default_c")]
    pub c_ij: f64,
    #[serde(default = "default_n_per_domain")]
    pub n_per_domain: usize,
    #[serde(default = "default_d_in")]
    pub d_in: usize,
    #[serde(default = "default_obs_noise")]
    pub obs_noise: f64,
    #[serde(default)]
    pub mixing_seed: u64,
}

fn default_c() -> f64 {
    0.8
}
fn default_n_per_domain() -> usize {
    64
}
fn default_d_in() -> usize {
    8
}
fn default_obs_noise() -> f64 {
    0.05
}

impl BenchmarkSpec {
    pub fn benchmark(&self) -> ConflictBenchmark {
        let mut b = ConflictBenchmark::new(self.c_ij);
        b.d_in = self.d_in;
        b.obs_noise = self.obs_noise;
        b.mixing_seed = self.mixing_seed;
        b
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    /// Relative paths are taken from the config file's directory.
    pub images: PathBuf,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    /// Keep only the first `limit` items.
    #[serde(default)]
    pub limit: Option<usize>,
}

/// Probe settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Leading fraction of the probe set used to fit the probes.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Size of the shifted benchmark domain.
    #[serde(default = "default_eval_n")]
    pub n: usize,
    /// Added to the run seed for the shifted domain.
    #[serde(default = "default_seed_offset")]
    pub seed_offset: u64,
    #[serde(default = "default_shift")]
    pub shift: DomainShift,
}

fn default_train_fraction() -> f64 {
    0.5
}
fn default_eval_n() -> usize {
    600
}
fn default_seed_offset() -> u64 {
    1000
}
fn default_shift() -> DomainShift {
    DomainShift {
        rotation_deg: 30.0,
        sigma_scale: 1.5,
    }
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            train_fraction: default_train_fraction(),
            n: default_eval_n(),
            seed_offset: default_seed_offset(),
            shift: default_shift(),
        }
    }
}

/// Command-line overrides applied after parsing.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tc2: Option<bool>,
    pub epochs: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, parses, applies overrides and validates; relative IDX paths are
    /// resolved against the file's directory.
    pub fn load(path: &Path, over: Overrides) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let DataSpec::Idx(idx) = &mut cfg.data {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in std::iter::once(&mut idx.images).chain(idx.labels.as_mut()) {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.apply(over);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, over: Overrides) {
        if let Some(s) = over.seed {
            self.seed = s;
        }
        if let Some(t) = over.tc2 {
            self.tc2.enabled = t;
        }
        if let Some(e) = over.epochs {
            self.train.epochs = e;
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSpec::Scm(t) => {
                t.scm.validate()?;
                if t.grid.is_empty() || t.n == 0 || t.null_n == 0 || t.n_seeds == 0 {
                    return Err(Error::Config(
                        "theorem grid, sample sizes and seed count must be non-empty".into(),
                    ));
                }
                if let Some(c) = t.grid.iter().find(|c| !(**c > 0.0 && **c < 1.0)) {
                    return Err(Error::Config(format!("grid value {c} outside (0, 1)")));
                }
            }
            DataSpec::Benchmark(b) => {
                b.benchmark().validate()?;
                if b.n_per_domain == 0 {
                    return Err(Error::Config("n_per_domain must be positive".into()));
                }
            }
            DataSpec::Idx(_) => {}
        }
        let e = &self.eval;
        if !(e.train_fraction > 0.0 && e.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "eval.train_fraction must lie in (0, 1), got {}",
                e.train_fraction
            )));
        }
        if !(e.shift.sigma_scale > 0.0 && e.shift.rotation_deg.is_finite()) {
            return Err(Error::Config(format!("invalid eval.shift {:?}", e.shift)));
        }
        if !matches!(self.data, DataSpec::Scm(_)) {
            let mut probe = self.train_config();
            if probe.model.d_in == 0 {
                probe.model.d_in = 1;
            }
            probe.validate()?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            tasks: self.tasks.clone(),
            model: self.model.clone(),
            tc2: self.tc2.clone(),
            train: self.train.clone(),
        }
    }

    pub fn theorem1(&self) -> Result<&Theorem1Spec> {
        match &self.data {
            DataSpec::Scm(t) => Ok(t),
            _ => Err(Error::Config("theorem1 needs data.source = \"scm\"".into())),
        }
    }

    /// Unlabelled training data, with domain ids for the benchmark.
    pub fn training_data(&self) -> Result<TrainData> {
        match &self.data {
            DataSpec::Scm(_) => Err(Error::Config(
                "training needs data.source = \"benchmark\" or \"idx\"".into(),
            )),
            DataSpec::Benchmark(b) => {
                let d = b.benchmark().two_task(b.n_per_domain, self.seed)?;
                Ok(TrainData {
                    batch: RawBatch::new(d.samples)?,
                    domains: Some(d.domains),
                })
            }
            DataSpec::Idx(idx) => {
                let mut batch = load_idx_set(idx)?;
                batch.labels = None;
                Ok(TrainData::new(batch))
            }
        }
    }

    /// Labelled probe set split into (train, test).
    pub fn probe_data(&self) -> Result<(RawBatch, RawBatch)> {
        let batch = match &self.data {
            DataSpec::Scm(_) => {
                return Err(Error::Config(
                    "probing needs data.source = \"benchmark\" or \"idx\"".into(),
                ))
            }
            DataSpec::Benchmark(b) => {
                let seed = self.seed.wrapping_add(self.eval.seed_offset);
                let d = b.benchmark().shifted(self.eval.n, seed, &self.eval.shift)?;
                RawBatch::new(d.samples)?.with_labels(d.labels)?
            }
            DataSpec::Idx(idx) => {
                let batch = load_idx_set(idx)?;
                if batch.labels.is_none() {
                    return Err(Error::Config("probing IDX data needs data.labels".into()));
                }
                batch
            }
        };
        let n = batch.len();
        let cut = (n as f64 * self.eval.train_fraction).round() as usize;
        if cut == 0 || cut >= n {
            return Err(Error::Config(format!(
                "{n} probe samples cannot be split at fraction {}",
                self.eval.train_fraction
            )));
        }
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..n).collect();
        Ok((batch.subset(&head), batch.subset(&tail)))
    }
}

fn load_idx_set(idx: &IdxSpec) -> Result<RawBatch> {
    let mut batch = load_idx(&idx.images)?;
    if let Some(l) = &idx.labels {
        batch = batch.with_labels(load_idx_labels(l)?)?;
    }
    if let Some(limit) = idx.limit {
        if limit < batch.len() {
            let keep: Vec<usize> = (0..limit).collect();
            batch = batch.subset(&keep);
        }
    }
    Ok(batch)
}
