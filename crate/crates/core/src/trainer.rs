//! The two-stage bi-level training loop.
//!
//! Every batch is split into `K` tasks. Stage 1 adapts the calibration
//! networks `f_v`, `f_w` with the encoder frozen; stage 2 adapts the
//! encoder with `f_v`, `f_w` frozen. Both stages take one inner step per
//! task group and one outer step with the first-order approximation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{
    batch_stats, calibrate_on_tape, extract_factors, factors_on_tape, loss_tc2_on_tape, loss_v_on_tape,
    loss_w_from_weights, FactorBasis, FvParams, FwParams,
};
use crate::databatch::{build_tasks, split_batch, RawBatch, SslMode, Task, TaskSpec, ViewKind};
use crate::diagnostics::{pairwise_cosine, MetricHistory, MetricRecord};
use crate::encoder::{encode_matrix, loss_infonce, loss_recon, loss_sse_pairs, EncoderParams, ModelSpec};
use crate::error::{Error, Result};
use crate::nn::{BoundMlp, Params};
use crate::numcore::{Matrix, Tape, Var};
use crate::rng::LabRng;

/// Squared-error reading of the query loss, or the support loss reused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryLoss {
    Sse,
    Infonce,
}

/// How a batch is cut into tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Seeded random split.
    Random,
    /// One task per data domain, equal share of the batch each.
    Domain,
}

/// Which loss the per-task conflict gradients are taken of.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictLoss {
    Support,
    Query,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tc2Spec {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_lambda_s")]
    pub lambda_s: f64,
    #[serde(default = "one")]
    pub l1_weight: f64,
    /// Defaults to the representation width.
    #[serde(default)]
    pub n_factors: Option<usize>,
    #[serde(default = "default_calib_hidden")]
    pub fv_hidden: usize,
    #[serde(default = "default_calib_hidden")]
    pub fw_hidden: usize,
    #[serde(default = "default_alpha")]
    pub alpha1: f64,
    #[serde(default = "default_alpha")]
    pub alpha2: f64,
    #[serde(default = "default_alpha")]
    pub alpha3: f64,
    #[serde(default = "default_alpha")]
    pub alpha4: f64,
    #[serde(default = "yes")]
    pub calibrate_stage2: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopSpec {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_beta")]
    pub beta1: f64,
    #[serde(default = "default_beta")]
    pub beta2: f64,
    #[serde(default = "default_query_loss")]
    pub query_loss: QueryLoss,
    #[serde(default = "default_grouping")]
    pub grouping: Grouping,
    #[serde(default = "default_conflict_loss")]
    pub conflict_loss: ConflictLoss,
}

fn yes() -> bool {
    true
}
fn one() -> f64 {
    1.0
}
fn default_lambda_s() -> f64 {
    crate::calibration::DEFAULT_LAMBDA_S
}
fn default_calib_hidden() -> usize {
    64
}
fn default_alpha() -> f64 {
    1e-3
}
fn default_beta() -> f64 {
    1e-2
}
fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    64
}
fn default_query_loss() -> QueryLoss {
    QueryLoss::Sse
}
fn default_grouping() -> Grouping {
    Grouping::Random
}
fn default_conflict_loss() -> ConflictLoss {
    ConflictLoss::Support
}

impl Default for Tc2Spec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl Default for LoopSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(default)]
    pub tasks: TaskSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub tc2: Tc2Spec,
    #[serde(default)]
    pub train: LoopSpec,
}

impl TrainConfig {
    pub fn new(seed: u64, d_in: usize) -> Self {
        Self {
            seed,
            tasks: TaskSpec::default(),
            model: ModelSpec::new(d_in),
            tc2: Tc2Spec::default(),
            train: LoopSpec::default(),
        }
    }

    pub fn n_factors(&self) -> usize {
        self.tc2.n_factors.unwrap_or(self.model.dim)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let rates = [
            ("alpha1", self.tc2.alpha1),
            ("alpha2", self.tc2.alpha2),
            ("alpha3", self.tc2.alpha3),
            ("alpha4", self.tc2.alpha4),
            ("beta1", self.train.beta1),
            ("beta2", self.train.beta2),
            ("lambda_s", self.tc2.lambda_s),
            ("l1_weight", self.tc2.l1_weight),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "{name} must be a finite non-negative number, got {v}"
            )));
        }
        let k = self.tasks.k;
        if k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.train.batch_size < 2 * k {
            return Err(Error::Config(format!(
                "batch_size {} is smaller than 2K = {}",
                self.train.batch_size,
                2 * k
            )));
        }
        if self.n_factors() == 0 || self.tc2.fv_hidden == 0 || self.tc2.fw_hidden == 0 {
            return Err(Error::Config("calibration network sizes must be positive".into()));
        }
        self.tasks.augment.validate()?;
        Ok(())
    }
}

/// Everything the loop updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub encoder: EncoderParams,
    pub fv: FvParams,
    pub fw: FwParams,
    /// Completed epochs.
    pub epoch: usize,
    pub history: MetricHistory,
}

impl TrainState {
    /// Encoder first, then `f_v`, then `f_w`, all from one init stream, so
    /// runs that differ only in the calibration switch share the encoder.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.model.d_in == 0 {
            return Err(Error::Config("model.d_in is unresolved".into()));
        }
        let mut rng = LabRng::derived(cfg.seed, 0);
        let encoder = EncoderParams::init(&cfg.model, cfg.tasks.mode, &mut rng);
        let d = cfg.model.dim;
        let fv = FvParams::init(d, cfg.n_factors(), cfg.tc2.fv_hidden, &mut rng);
        let fw = FwParams::init(d, cfg.n_factors(), cfg.tc2.fw_hidden, &mut rng);
        Ok(Self {
            encoder,
            fv,
            fw,
            epoch: 0,
            history: MetricHistory::default(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.fv.is_finite() && self.fw.is_finite()
    }
}

/// Samples plus an optional domain id per sample.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub batch: RawBatch,
    pub domains: Option<Vec<usize>>,
}

impl TrainData {
    pub fn new(batch: RawBatch) -> Self {
        Self { batch, domains: None }
    }
}

/// Views of one batch laid out row-wise, task by task (support rows, then
/// query rows).
pub struct BatchViews {
    pub x: Matrix,
    pub sources: Vec<usize>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
    /// Reconstruction targets and masks (generative mode only).
    pub targets: Option<Matrix>,
    pub masks: Vec<Vec<bool>>,
    pub mode: SslMode,
}

impl BatchViews {
    pub fn new(batch: &RawBatch, tasks: &[Task], mode: SslMode) -> Result<Self> {
        let mut rows: Vec<&[f64]> = Vec::new();
        let mut sources = Vec::new();
        let mut masks = Vec::new();
        let mut support = Vec::new();
        let mut query = Vec::new();
        let d = batch.dim();
        for t in tasks {
            for (set, dest) in [(&t.support, &mut support), (&t.query, &mut query)] {
                let mut idx = Vec::with_capacity(set.len());
                for v in set {
                    idx.push(rows.len());
                    rows.push(&v.payload);
                    sources.push(v.source);
                    masks.push(match (&v.mask, v.kind) {
                        (Some(m), _) => m.clone(),
                        (None, ViewKind::Original) => vec![true; d],
                        (None, _) => vec![false; d],
                    });
                }
                dest.push(idx);
            }
        }
        let x = Matrix::from_rows(&rows)?;
        let targets = match mode {
            SslMode::Gssl => {
                let t: Vec<&[f64]> = sources.iter().map(|&s| batch.samples[s].as_slice()).collect();
                Some(Matrix::from_rows(&t)?)
            }
            SslMode::Dssl => None,
        };
        Ok(Self {
            x,
            sources,
            support,
            query,
            targets,
            masks,
            mode,
        })
    }

    pub fn task_count(&self) -> usize {
        self.support.len()
    }

    /// Support and query rows of task `k`.
    pub fn task_rows(&self, k: usize) -> Vec<usize> {
        self.support[k].iter().chain(&self.query[k]).copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Support,
    Query,
}

/// Heads applied on top of (possibly calibrated) representations.
pub struct Heads<'t> {
    pub projector: (Var<'t>, Var<'t>),
    pub decoder: Option<BoundMlp<'t>>,
}

impl<'t> Heads<'t> {
    fn project(&self, z: Var<'t>) -> Result<Var<'t>> {
        z.matmul(self.projector.0)?.add(self.projector.1)
    }
}

/// The SSL loss of one task on rows `rows` of the batch, given the
/// representations of exactly those rows.
pub fn task_loss<'t>(
    views: &BatchViews,
    rows: &[usize],
    reps: Var<'t>,
    kind: LossKind,
    heads: &Heads<'t>,
    query_loss: QueryLoss,
    temperature: f64,
) -> Result<Var<'t>> {
    let sources: Vec<usize> = rows.iter().map(|&r| views.sources[r]).collect();
    match views.mode {
        SslMode::Dssl => match (kind, query_loss) {
            (LossKind::Query, QueryLoss::Sse) => loss_sse_pairs(reps, &sources),
            _ => loss_infonce(heads.project(reps)?, &sources, temperature),
        },
        SslMode::Gssl => {
            let decoder = heads
                .decoder
                .as_ref()
                .ok_or_else(|| Error::Contract("generative mode needs a decoder".into()))?;
            let targets = views.targets.as_ref().expect("generative views carry targets");
            let masks: Vec<Vec<bool>> = rows.iter().map(|&r| views.masks[r].clone()).collect();
            loss_recon(decoder.forward(reps)?, &targets.select_rows(rows), &masks)
        }
    }
}

fn rows_of(views: &BatchViews, k: usize, kind: LossKind) -> &[usize] {
    match kind {
        LossKind::Support => &views.support[k],
        LossKind::Query => &views.query[k],
    }
}

/// Values of the stage-1 objective at one evaluation point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Eval {
    pub total: f64,
    pub ssl: f64,
    pub tc2: f64,
}

/// `(1/K) Σ_k L_k(calibrated reps) + L_tc²` and its gradient with respect
/// to `f_v` then `f_w`. The encoder is frozen; `z` are its outputs.
pub fn stage1_objective(
    encoder: &EncoderParams,
    fv: &FvParams,
    fw: &FwParams,
    views: &BatchViews,
    z: &Matrix,
    kind: LossKind,
    cfg: &TrainConfig,
) -> Result<(Stage1Eval, Vec<Matrix>, Vec<Matrix>)> {
    let stats = batch_stats(z)?.flattened();
    let tape = Tape::new();
    let bfv = fv.net.bind(&tape);
    let bfw = fw.net.bind(&tape);
    let frozen = encoder.bind_frozen(&tape);
    let heads = Heads {
        projector: frozen.projector,
        decoder: frozen.decoder,
    };
    let v = factors_on_tape(&bfv, tape.constant(stats), fv.dim, fv.n_factors)?;
    let zc = tape.constant(z.clone());
    let w = bfw.forward(zc)?;
    let zhat = calibrate_on_tape(w, v)?;
    let k = views.task_count();
    let mut parts = Vec::with_capacity(k);
    for t in 0..k {
        let rows = rows_of(views, t, kind);
        let reps = zhat.select_rows(rows)?;
        parts.push(task_loss(
            views,
            rows,
            reps,
            kind,
            &heads,
            cfg.train.query_loss,
            cfg.model.temperature,
        )?);
    }
    let ssl = sum_vars(&parts)?.scale(1.0 / k as f64)?;
    let l_v = loss_v_on_tape(v, zc)?;
    let l_w = loss_w_from_weights(w, zc, &v.value(), cfg.tc2.l1_weight)?;
    let tc2 = loss_tc2_on_tape(l_v, l_w, cfg.tc2.lambda_s)?;
    let total = ssl.add(tc2)?;
    let mut wrt = bfv.vars();
    let n_fv = wrt.len();
    wrt.extend(bfw.vars());
    let mut grads = tape.gradient(total, &wrt)?;
    let g_fw = grads.split_off(n_fv);
    let eval = Stage1Eval {
        total: total.scalar(),
        ssl: ssl.scalar(),
        tc2: tc2.scalar(),
    };
    Ok((eval, grads, g_fw))
}

fn sum_vars<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let mut acc = *parts
        .first()
        .ok_or_else(|| Error::Contract("no tasks in batch".into()))?;
    for p in &parts[1..] {
        acc = acc.add(*p)?;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Outcome {
    pub inner: Stage1Eval,
    pub outer: Stage1Eval,
}

/// Inner step on the support objective gives `(f_v', f_w')`; the query
/// objective's gradient at the primed networks then steps from the primed
/// networks to give the new `f_v`, `f_w`.
pub fn stage1_update(state: &mut TrainState, views: &BatchViews, cfg: &TrainConfig) -> Result<Stage1Outcome> {
    let z = encode_matrix(&state.encoder, &views.x)?;
    let (inner, g_fv, g_fw) =
        stage1_objective(&state.encoder, &state.fv, &state.fw, views, &z, LossKind::Support, cfg)?;
    let mut fv = state.fv.clone();
    let mut fw = state.fw.clone();
    fv.sgd_step(&g_fv, cfg.tc2.alpha1)?;
    fw.sgd_step(&g_fw, cfg.tc2.alpha2)?;
    let (outer, g_fv, g_fw) = stage1_objective(&state.encoder, &fv, &fw, views, &z, LossKind::Query, cfg)?;
    fv.sgd_step(&g_fv, cfg.tc2.alpha3)?;
    fw.sgd_step(&g_fw, cfg.tc2.alpha4)?;
    ensure_finite(&fv, "f_v")?;
    ensure_finite(&fw, "f_w")?;
    state.fv = fv;
    state.fw = fw;
    Ok(Stage1Outcome { inner, outer })
}

fn ensure_finite<P: Params>(p: &P, what: &str) -> Result<()> {
    if p.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} became non-finite")))
    }
}

/// Frozen calibration used by stage 2 and the conflict diagnostics.
pub struct FrozenCalibration<'a> {
    pub fw: &'a FwParams,
    pub basis: FactorBasis,
}

impl<'a> FrozenCalibration<'a> {
    /// `V` from the statistics of the current encoder's outputs on the
    /// whole batch.
    pub fn new(encoder: &EncoderParams, fv: &FvParams, fw: &'a FwParams, views: &BatchViews) -> Result<Self> {
        let z = encode_matrix(encoder, &views.x)?;
        let basis = extract_factors(fv, &batch_stats(&z)?)?;
        Ok(Self { fw, basis })
    }

    pub fn for_config(state: &'a TrainState, views: &BatchViews, cfg: &TrainConfig) -> Result<Option<Self>> {
        if cfg.tc2.enabled && cfg.tc2.calibrate_stage2 {
            Self::new(&state.encoder, &state.fv, &state.fw, views).map(Some)
        } else {
            Ok(None)
        }
    }
}

/// Loss of task `k` and its gradient with respect to every encoder tensor
/// (in [`Params::tensors`] order).
pub fn encoder_task_gradient(
    encoder: &EncoderParams,
    views: &BatchViews,
    k: usize,
    kind: LossKind,
    calib: Option<&FrozenCalibration<'_>>,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Matrix>)> {
    let rows = rows_of(views, k, kind);
    let tape = Tape::new();
    let net = encoder.bind(&tape);
    let z = net.encode(tape.constant(views.x.select_rows(rows)))?;
    let reps = match calib {
        Some(c) => {
            let fw = c.fw.net.bind_frozen(&tape);
            calibrate_on_tape(fw.forward(z)?, tape.constant(c.basis.v.clone()))?
        }
        None => z,
    };
    let heads = Heads {
        projector: net.projector,
        decoder: net.decoder.as_ref().map(|d| BoundMlp {
            layers: d.layers.clone(),
        }),
    };
    let loss = task_loss(
        views,
        rows,
        reps,
        kind,
        &heads,
        cfg.train.query_loss,
        cfg.model.temperature,
    )?;
    let grads = tape.gradient(loss, &net.vars())?;
    Ok((loss.scalar(), grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Outcome {
    /// Mean support loss over tasks at the shared encoder.
    pub support: f64,
    /// Summed query loss at the adapted encoders.
    pub query: f64,
}

/// Per-task adaptation on the support set, then one step of the shared
/// encoder on the summed query gradients taken at the adapted copies.
pub fn stage2_update(state: &mut TrainState, views: &BatchViews, cfg: &TrainConfig) -> Result<Stage2Outcome> {
    let calib = FrozenCalibration::for_config(state, views, cfg)?;
    let k = views.task_count();
    let mut total: Vec<Matrix> = state
        .encoder
        .tensors()
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    let (mut support, mut query) = (0.0, 0.0);
    for t in 0..k {
        let (ls, gs) = encoder_task_gradient(&state.encoder, views, t, LossKind::Support, calib.as_ref(), cfg)?;
        support += ls / k as f64;
        let adapted = if cfg.train.beta1 == 0.0 {
            None
        } else {
            let mut a = state.encoder.clone();
            a.sgd_step(&gs, cfg.train.beta1)?;
            Some(a)
        };
        let at = adapted.as_ref().unwrap_or(&state.encoder);
        let (lq, gq) = encoder_task_gradient(at, views, t, LossKind::Query, calib.as_ref(), cfg)?;
        query += lq;
        for (acc, g) in total.iter_mut().zip(&gq) {
            acc.axpy(1.0, g)?;
        }
    }
    let mut encoder = state.encoder.clone();
    encoder.sgd_step(&total, cfg.train.beta2)?;
    ensure_finite(&encoder, "encoder")?;
    state.encoder = encoder;
    Ok(Stage2Outcome { support, query })
}

/// Flattened gradients of each task's loss with respect to the shared
/// encoder and projector tensors.
pub fn task_gradients(
    encoder: &EncoderParams,
    views: &BatchViews,
    kind: LossKind,
    calib: Option<&FrozenCalibration<'_>>,
    cfg: &TrainConfig,
) -> Result<Vec<Vec<f64>>> {
    let shared = encoder.shared_tensors().len();
    (0..views.task_count())
        .map(|k| {
            let (_, g) = encoder_task_gradient(encoder, views, k, kind, calib, cfg)?;
            Ok(g[..shared].iter().flat_map(|m| m.data().iter().copied()).collect())
        })
        .collect()
}

/// Sample indices of each batch of an epoch. Domain grouping also fixes
/// the task groups (as positions within the batch); random grouping
/// leaves them to [`split_batch`].
pub fn epoch_batches(
    data: &TrainData,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<(Vec<usize>, Option<Vec<Vec<usize>>>)>> {
    let mut rng = LabRng::derived(cfg.seed, 1 + epoch as u64);
    let k = cfg.tasks.k;
    let bs = cfg.train.batch_size;
    match cfg.train.grouping {
        Grouping::Random => {
            let perm = rng.permutation(data.batch.len());
            Ok(perm.chunks_exact(bs).map(|c| (c.to_vec(), None)).collect())
        }
        Grouping::Domain => {
            let domains = data
                .domains
                .as_ref()
                .ok_or_else(|| Error::Config("domain grouping needs per-sample domains".into()))?;
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (i, &d) in domains.iter().enumerate() {
                if d >= k {
                    return Err(Error::Config(format!("domain {d} out of range for K = {k}")));
                }
                pools[d].push(i);
            }
            for p in &mut pools {
                rng.shuffle(p);
            }
            let per = bs / k;
            let n_batches = pools.iter().map(|p| p.len() / per).min().unwrap_or(0);
            Ok((0..n_batches)
                .map(|b| {
                    let mut idx = Vec::with_capacity(per * k);
                    let mut groups = Vec::with_capacity(k);
                    for p in &pools {
                        groups.push((idx.len()..idx.len() + per).collect());
                        idx.extend_from_slice(&p[b * per..(b + 1) * per]);
                    }
                    (idx, Some(groups))
                })
                .collect())
        }
    }
}

/// Seed of the task construction for one batch.
pub fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    let stream = ((epoch as u64) << 32) | batch as u64;
    LabRng::derived(seed ^ 0xba7c_5eed, stream).next_u64()
}

/// A finished or aborted run.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub state: TrainState,
    /// Why training stopped early; `state` is then the last finite state.
    pub aborted: Option<String>,
}

/// Resolves `model.d_in` from the data and runs every epoch.
pub fn train(cfg: &TrainConfig, data: &TrainData) -> Result<TrainRun> {
    let cfg = resolve(cfg, data)?;
    let state = TrainState::init(&cfg)?;
    train_from(state, &cfg, data)
}

pub fn resolve(cfg: &TrainConfig, data: &TrainData) -> Result<TrainConfig> {
    let mut cfg = cfg.clone();
    data.batch.validate()?;
    let d = data.batch.dim();
    if cfg.model.d_in == 0 {
        cfg.model.d_in = d;
    } else if cfg.model.d_in != d {
        return Err(Error::Config(format!(
            "model.d_in = {} but the data has {d} features",
            cfg.model.d_in
        )));
    }
    if let Some(dom) = &data.domains {
        if dom.len() != data.batch.len() {
            return Err(Error::Config(format!(
                "{} domain ids for {} samples",
                dom.len(),
                data.batch.len()
            )));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Continues training `state` until `cfg.train.epochs` epochs are done.
pub fn train_from(mut state: TrainState, cfg: &TrainConfig, data: &TrainData) -> Result<TrainRun> {
    while state.epoch < cfg.train.epochs {
        let epoch = state.epoch;
        let batches = epoch_batches(data, cfg, epoch)?;
        if batches.is_empty() {
            return Err(Error::Config(format!(
                "{} samples do not fill one batch of {}",
                data.batch.len(),
                cfg.train.batch_size
            )));
        }
        for (b, (idx, groups)) in batches.iter().enumerate() {
            let last_good = (state.encoder.clone(), state.fv.clone(), state.fw.clone());
            match run_batch(&mut state, cfg, data, epoch, b, idx, groups.as_deref()) {
                Ok(()) => {}
                Err(e @ (Error::Numeric(_) | Error::DegenerateFactor { .. })) => {
                    (state.encoder, state.fv, state.fw) = last_good;
                    return Ok(TrainRun {
                        state,
                        aborted: Some(format!("epoch {epoch}, batch {b}: {e}")),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        state.epoch += 1;
    }
    Ok(TrainRun { state, aborted: None })
}

fn run_batch(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &TrainData,
    epoch: usize,
    b: usize,
    idx: &[usize],
    groups: Option<&[Vec<usize>]>,
) -> Result<()> {
    let raw = data.batch.subset(idx);
    let seed = batch_seed(cfg.seed, epoch, b);
    let split;
    let groups = match groups {
        Some(g) => g,
        None => {
            split = split_batch(&raw, cfg.tasks.k, seed)?;
            &split
        }
    };
    let tasks = build_tasks(&raw, groups, &cfg.tasks, seed.rotate_left(17))?;
    let views = BatchViews::new(&raw, &tasks, cfg.tasks.mode)?;
    let mut records = Vec::new();
    let mut push = |stage: &str, name: &str, value: f64| {
        records.push(MetricRecord {
            epoch,
            batch: b,
            stage: stage.into(),
            loss_name: name.into(),
            value,
        });
    };
    if cfg.tc2.enabled {
        let s1 = stage1_update(state, &views, cfg)?;
        push("stage1", "support_total", s1.inner.total);
        push("stage1", "tc2", s1.inner.tc2);
        push("stage1", "query_total", s1.outer.total);
    }
    let mut report = None;
    if b == 0 && views.task_count() >= 2 {
        let calib = FrozenCalibration::for_config(state, &views, cfg)?;
        let kind = match cfg.train.conflict_loss {
            ConflictLoss::Support => LossKind::Support,
            ConflictLoss::Query => LossKind::Query,
        };
        let grads = task_gradients(&state.encoder, &views, kind, calib.as_ref(), cfg)?;
        let r = pairwise_cosine(&grads, epoch)?;
        push("diagnostics", "mean_cos", r.mean_cos);
        push("diagnostics", "conflict_rate", r.conflict_rate);
        report = Some(r);
    }
    let s2 = stage2_update(state, &views, cfg)?;
    push("stage2", "support", s2.support);
    push("stage2", "query", s2.query);
    state.history.losses.extend(records);
    state.history.conflicts.extend(report);
    Ok(())
}

pub const CHECKPOINT_FORMAT: &str = "tc2-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON dump of every parameter matrix; each matrix carries its shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub epoch: usize,
    pub aborted: Option<String>,
    pub encoder: EncoderParams,
    pub fv: FvParams,
    pub fw: FwParams,
}

impl Checkpoint {
    pub fn new(cfg: &TrainConfig, run: &TrainRun) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            epoch: run.state.epoch,
            aborted: run.aborted.clone(),
            encoder: run.state.encoder.clone(),
            fv: run.state.fv.clone(),
            fw: run.state.fw.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                ck.format, ck.version
            )));
        }
        ck.encoder.validate()?;
        ck.fv.validate()?;
        ck.fw.validate()?;
        Ok(ck)
    }
}
