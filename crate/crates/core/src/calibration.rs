//! Factor extraction, weight extraction and representation calibration.
//!
//! `f_v` maps the batch statistics `S` (mean stacked on covariance) to a
//! factor matrix `V` with unit columns. `f_w` maps a representation to its
//! factor weights `w`, and the calibrated representation is `w Vᵀ`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::{BoundMlp, Mlp, Params};
use crate::numcore::{Matrix, Tape, Var};
use crate::rng::LabRng;

pub const DEFAULT_LAMBDA_S: f64 = 0.1;
const COLUMN_FLOOR: f64 = 1e-8;

/// `(d+1) × d`: row 0 is the mean of the representations, rows `1..=d`
/// their covariance (normalised by `n`).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub s: Matrix,
}

impl BatchStats {
    pub fn dim(&self) -> usize {
        self.s.cols()
    }

    pub fn mean(&self) -> &[f64] {
        self.s.row(0)
    }

    pub fn covariance(&self) -> Matrix {
        let d = self.dim();
        Matrix::from_fn(d, d, |i, j| self.s.get(i + 1, j))
    }

    /// `S` flattened row-major into the `1 × (d+1)d` input of `f_v`.
    pub fn flattened(&self) -> Matrix {
        self.s.clone().reshaped(1, self.s.len()).expect("same element count")
    }
}

pub fn batch_stats(z: &Matrix) -> Result<BatchStats> {
    let (n, d) = z.shape();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "batch statistics need at least 2 representations, got {n}"
        )));
    }
    let nf = n as f64;
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(z.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut s = Matrix::zeros(d + 1, d);
    for (j, m) in mean.iter().enumerate() {
        s.set(0, j, *m);
    }
    for a in 0..d {
        for b in a..d {
            let mut acc = 0.0;
            for i in 0..n {
                acc += (z.get(i, a) - mean[a]) * (z.get(i, b) - mean[b]);
            }
            let c = acc / nf;
            s.set(a + 1, b, c);
            s.set(b + 1, a, c);
        }
    }
    Ok(BatchStats { s })
}

/// `d × n_f` with unit-norm columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorBasis {
    pub v: Matrix,
}

impl FactorBasis {
    pub fn dim(&self) -> usize {
        self.v.rows()
    }

    pub fn n_factors(&self) -> usize {
        self.v.cols()
    }

    /// `‖VᵀV − I‖_F`.
    pub fn orthogonality_defect(&self) -> f64 {
        let g = self.v.t_matmul(&self.v).expect("square gram");
        g.sub(&Matrix::identity(self.n_factors()))
            .expect("same shape")
            .frobenius()
    }
}

/// `f_v`: flattened `S` → hidden → `d · n_f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FvParams {
    pub net: Mlp,
    pub dim: usize,
    pub n_factors: usize,
}

/// `f_w`: `z` → hidden → hidden → `n_f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FwParams {
    pub net: Mlp,
}

impl FvParams {
    pub fn init(dim: usize, n_factors: usize, hidden: usize, rng: &mut LabRng) -> Self {
        Self {
            net: Mlp::init(&[(dim + 1) * dim, hidden, dim * n_factors], rng),
            dim,
            n_factors,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate("f_v")?;
        if self.net.in_dim() != (self.dim + 1) * self.dim || self.net.out_dim() != self.dim * self.n_factors {
            return Err(dim_err(
                "FvParams",
                format!(
                    "net maps {} → {}, expected {} → {}",
                    self.net.in_dim(),
                    self.net.out_dim(),
                    (self.dim + 1) * self.dim,
                    self.dim * self.n_factors
                ),
            ));
        }
        Ok(())
    }
}

impl FwParams {
    pub fn init(dim: usize, n_factors: usize, hidden: usize, rng: &mut LabRng) -> Self {
        Self {
            net: Mlp::init(&[dim, hidden, hidden, n_factors], rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn n_factors(&self) -> usize {
        self.net.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate("f_w")
    }
}

impl Params for FvParams {
    fn tensors(&self) -> Vec<&Matrix> {
        self.net.tensors()
    }
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.net.tensors_mut()
    }
}

impl Params for FwParams {
    fn tensors(&self) -> Vec<&Matrix> {
        self.net.tensors()
    }
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.net.tensors_mut()
    }
}

/// Reshapes `f_v(S)` into `d × n_f` and normalises each column.
pub fn factors_on_tape<'t>(fv: &BoundMlp<'t>, stats: Var<'t>, dim: usize, n_factors: usize) -> Result<Var<'t>> {
    let raw = fv.forward(stats)?.reshape(dim, n_factors)?;
    let value = raw.value();
    for j in 0..n_factors {
        let norm = (0..dim).map(|i| value.get(i, j).powi(2)).sum::<f64>().sqrt();
        if norm <= COLUMN_FLOOR {
            return Err(Error::DegenerateFactor { column: j });
        }
    }
    raw.t()?.row_normalize(COLUMN_FLOOR)?.t()
}

pub fn extract_factors(fv: &FvParams, stats: &BatchStats) -> Result<FactorBasis> {
    if stats.dim() != fv.dim {
        return Err(dim_err(
            "extract_factors",
            format!("stats for d = {}, f_v built for d = {}", stats.dim(), fv.dim),
        ));
    }
    let tape = Tape::new();
    let bound = fv.net.bind_frozen(&tape);
    let v = factors_on_tape(&bound, tape.constant(stats.flattened()), fv.dim, fv.n_factors)?;
    Ok(FactorBasis { v: v.value() })
}

/// `‖VᵀV − I‖²_F + ‖Z − Z V Vᵀ‖²_F`.
pub fn loss_v_on_tape<'t>(v: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
    let (d, n_f) = v.shape();
    if z.shape().1 != d {
        return Err(dim_err(
            "loss_v",
            format!("Z has {} columns, V has {d} rows", z.shape().1),
        ));
    }
    let tape = v.tape();
    let ortho = v
        .t()?
        .matmul(v)?
        .sub(tape.constant(Matrix::identity(n_f)))?
        .frobenius_sq()?;
    let recon = z.sub(z.matmul(v)?.matmul(v.t()?)?)?.frobenius_sq()?;
    ortho.add(recon)
}

pub fn loss_v(basis: &FactorBasis, z_aug: &Matrix) -> Result<f64> {
    let tape = Tape::new();
    Ok(loss_v_on_tape(tape.constant(basis.v.clone()), tape.constant(z_aug.clone()))?.scalar())
}

/// One row of weights per row of `z`.
pub fn factor_weights(fw: &FwParams, z: &Matrix) -> Result<Matrix> {
    if z.cols() != fw.dim() {
        return Err(dim_err(
            "factor_weights",
            format!("z has length {}, f_w expects {}", z.cols(), fw.dim()),
        ));
    }
    fw.net.forward(z)
}

/// `Σ_j ‖z_j − w_j Vᵀ‖² + l1_weight · ‖w_j‖₁` over the samples of every
/// task. `V` enters as a constant.
pub fn loss_w_on_tape<'t>(fw: &BoundMlp<'t>, v: &Matrix, tasks: &[Var<'t>], l1_weight: f64) -> Result<Var<'t>> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::Contract("loss_w over no tasks".into()))?;
    if let Some(k) = tasks.iter().position(|t| t.shape().0 == 0) {
        return Err(Error::Contract(format!("task {k} has no representations")));
    }
    let z = if tasks.len() == 1 {
        *first
    } else {
        Var::concat_rows(tasks)?
    };
    if z.shape().1 != v.rows() {
        return Err(dim_err(
            "loss_w",
            format!("z has length {}, V has {} rows", z.shape().1, v.rows()),
        ));
    }
    loss_w_from_weights(fw.forward(z)?, z, v, l1_weight)
}

/// [`loss_w_on_tape`] with the weights `w = f_w(z)` already computed.
pub fn loss_w_from_weights<'t>(w: Var<'t>, z: Var<'t>, v: &Matrix, l1_weight: f64) -> Result<Var<'t>> {
    if w.shape() != (z.shape().0, v.cols()) || z.shape().1 != v.rows() {
        return Err(dim_err(
            "loss_w",
            format!("w {:?}, z {:?}, V {:?}", w.shape(), z.shape(), v.shape()),
        ));
    }
    let tape = z.tape();
    let recon = z.sub(w.matmul(tape.constant(v.transpose()))?)?.frobenius_sq()?;
    recon.add(w.l1()?.scale(l1_weight)?)
}

/// `ẑ = w Vᵀ`, row by row.
pub fn calibrate(w: &Matrix, basis: &FactorBasis) -> Result<Matrix> {
    if w.cols() != basis.n_factors() {
        return Err(dim_err(
            "calibrate",
            format!("{} weights for {} factors", w.cols(), basis.n_factors()),
        ));
    }
    w.matmul_t(&basis.v)
}

pub fn calibrate_on_tape<'t>(w: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    w.matmul(v.t()?)
}

/// `L_v + λ_s · L_w`.
pub fn loss_tc2_on_tape<'t>(l_v: Var<'t>, l_w: Var<'t>, lambda_s: f64) -> Result<Var<'t>> {
    if !(lambda_s >= 0.0) {
        return Err(Error::Config(format!("lambda_s must be non-negative, got {lambda_s}")));
    }
    l_v.add(l_w.scale(lambda_s)?)
}

/// Evaluates the combined calibration loss for fixed networks. `z_aug`
/// feeds both the statistics and `L_v`; `tasks` feed `L_w`.
pub fn loss_tc2(
    fv: &FvParams,
    fw: &FwParams,
    z_aug: &Matrix,
    tasks: &[Matrix],
    lambda_s: f64,
    l1_weight: f64,
) -> Result<f64> {
    let stats = batch_stats(z_aug)?;
    let tape = Tape::new();
    let bfv = fv.net.bind_frozen(&tape);
    let bfw = fw.net.bind_frozen(&tape);
    let v = factors_on_tape(&bfv, tape.constant(stats.flattened()), fv.dim, fv.n_factors)?;
    let l_v = loss_v_on_tape(v, tape.constant(z_aug.clone()))?;
    let task_vars: Vec<Var> = tasks.iter().map(|t| tape.constant(t.clone())).collect();
    let l_w = loss_w_on_tape(&bfw, &v.value(), &task_vars, l1_weight)?;
    Ok(loss_tc2_on_tape(l_v, l_w, lambda_s)?.scalar())
}

/// Writes `V` as CSV, one row per factor (column of `V`).
pub fn write_factor_csv<W: Write>(basis: &FactorBasis, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["factor".to_string()];
    header.extend((0..basis.dim()).map(|i| format!("v{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for j in 0..basis.n_factors() {
        let mut rec = vec![j.to_string()];
        rec.extend(basis.v.column(j).iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes per-sample factor weights as CSV, one row per sample.
pub fn write_weights_csv<W: Write>(weights: &Matrix, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample".to_string()];
    header.extend((0..weights.cols()).map(|i| format!("w{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..weights.rows() {
        let mut rec = vec![i.to_string()];
        rec.extend(weights.row(i).iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

/// Synthetic representations built from a known orthonormal basis.
#[derive(Clone, Debug)]
pub struct PlantedBasis {
    /// `d × n_f`, orthonormal columns.
    pub basis: Matrix,
    /// `n × n_f`, `active` non-zeros per row.
    pub weights: Matrix,
    /// `weights · basisᵀ + noise`.
    pub z: Matrix,
}

/// Gram–Schmidt on Gaussian columns.
pub fn random_orthonormal(rng: &mut LabRng, d: usize, k: usize) -> Result<Matrix> {
    if k > d {
        return Err(dim_err(
            "random_orthonormal",
            format!("{k} orthonormal columns in dimension {d}"),
        ));
    }
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Ok(Matrix::from_fn(d, k, |i, j| cols[j][i]))
}

/// Weights have magnitude in `[0.5, 1.5]` with a random sign on `active`
/// randomly chosen factors per sample.
pub fn planted_basis(d: usize, n_f: usize, n: usize, active: usize, noise: f64, seed: u64) -> Result<PlantedBasis> {
    if active > n_f {
        return Err(Error::Config(format!("{active} active weights out of {n_f} factors")));
    }
    let mut rng = LabRng::new(seed);
    let basis = random_orthonormal(&mut rng, d, n_f)?;
    let mut weights = Matrix::zeros(n, n_f);
    for i in 0..n {
        for &j in &rng.permutation(n_f)[..active] {
            weights.set(i, j, rng.sign() * rng.uniform_range(0.5, 1.5));
        }
    }
    let mut z = weights.matmul_t(&basis)?;
    z.data_mut().iter_mut().for_each(|v| *v += noise * rng.normal());
    Ok(PlantedBasis { basis, weights, z })
}

/// Step schedule for the standalone fits below: the rate decays
/// geometrically from `lr` to `lr · final_ratio` over `steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GdOptions {
    pub steps: usize,
    pub lr: f64,
    pub final_ratio: f64,
}

impl GdOptions {
    pub fn constant(steps: usize, lr: f64) -> Self {
        Self {
            steps,
            lr,
            final_ratio: 1.0,
        }
    }

    fn rate(&self, step: usize) -> f64 {
        if self.final_ratio == 1.0 {
            self.lr
        } else {
            self.lr * self.final_ratio.powf(step as f64 / self.steps.max(1) as f64)
        }
    }
}

/// Gradient descent on `L_v` through `f_v` with the statistics of `z` held
/// fixed. Returns the loss before every step.
pub fn fit_factors(fv: &mut FvParams, z: &Matrix, opts: &GdOptions) -> Result<Vec<f64>> {
    let stats = batch_stats(z)?.flattened();
    let mut history = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let tape = Tape::new();
        let bound = fv.net.bind(&tape);
        let v = factors_on_tape(&bound, tape.constant(stats.clone()), fv.dim, fv.n_factors)?;
        let loss = loss_v_on_tape(v, tape.constant(z.clone()))?;
        history.push(loss.scalar());
        let grads = tape.gradient(loss, &bound.vars())?;
        fv.sgd_step(&grads, opts.rate(step))?;
    }
    Ok(history)
}

/// Gradient descent on `L_w` through `f_w` with `V` fixed.
pub fn fit_weights(fw: &mut FwParams, v: &Matrix, z: &Matrix, l1_weight: f64, opts: &GdOptions) -> Result<Vec<f64>> {
    let mut history = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let tape = Tape::new();
        let bound = fw.net.bind(&tape);
        let loss = loss_w_on_tape(&bound, v, &[tape.constant(z.clone())], l1_weight)?;
        history.push(loss.scalar());
        let grads = tape.gradient(loss, &bound.vars())?;
        fw.sgd_step(&grads, opts.rate(step))?;
    }
    Ok(history)
}

/// Mean number of entries per row with `|w| > threshold`.
pub fn mean_support(weights: &Matrix, threshold: f64) -> f64 {
    let count = weights.data().iter().filter(|w| w.abs() > threshold).count();
    count as f64 / weights.rows().max(1) as f64
}
