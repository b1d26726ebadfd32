//! Two-task Gaussian factor model, its Bayes-optimal classifier, and an
//! empirical check that a jointly trained task-`i` classifier leans on the
//! other task's factors whenever the task labels are correlated.
//!
//! Labels are ±1. `y_i` is uniform; `y_j` copies it with probability `c_ij`
//! and flips it otherwise. Factor blocks are isotropic Gaussians centred at
//! `y · mu`. Observations are `[f_u_i | f_s | f_u_j]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::sigmoid;
use crate::rng::LabRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmConfig {
    pub d_u: usize,
    #[serde(default)]
    pub d_s: usize,
    pub mu_i: Vec<f64>,
    pub mu_j: Vec<f64>,
    #[serde(default)]
    pub mu_s: Vec<f64>,
    pub sigma_i: f64,
    pub sigma_j: f64,
    #[serde(default = "one")]
    pub sigma_s: f64,
    pub c_ij: f64,
}

fn one() -> f64 {
    1.0
}

impl ScmConfig {
    /// Same mean `mu` on every coordinate of both task blocks, no shared block.
    pub fn symmetric(d_u: usize, mu: f64, sigma: f64, c_ij: f64) -> Self {
        Self {
            d_u,
            d_s: 0,
            mu_i: vec![mu; d_u],
            mu_j: vec![mu; d_u],
            mu_s: Vec::new(),
            sigma_i: sigma,
            sigma_j: sigma,
            sigma_s: 1.0,
            c_ij,
        }
    }

    pub fn with_correlation(&self, c_ij: f64) -> Self {
        Self { c_ij, ..self.clone() }
    }

    pub fn observation_dim(&self) -> usize {
        2 * self.d_u + self.d_s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_u == 0 {
            return bad("d_u must be positive".into());
        }
        if self.mu_i.len() != self.d_u || self.mu_j.len() != self.d_u {
            return bad(format!(
                "mu_i/mu_j must have length d_u = {} (got {}, {})",
                self.d_u,
                self.mu_i.len(),
                self.mu_j.len()
            ));
        }
        if self.mu_s.len() != self.d_s {
            return bad(format!(
                "mu_s must have length d_s = {} (got {})",
                self.d_s,
                self.mu_s.len()
            ));
        }
        for (name, s) in [
            ("sigma_i", self.sigma_i),
            ("sigma_j", self.sigma_j),
            ("sigma_s", self.sigma_s),
        ] {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("{name} must be positive, got {s}"));
            }
        }
        if !(self.c_ij > 0.0 && self.c_ij < 1.0) {
            return bad(format!("c_ij must lie in (0, 1), got {}", self.c_ij));
        }
        let all_means = self.mu_i.iter().chain(&self.mu_j).chain(&self.mu_s);
        if all_means.into_iter().any(|v| !v.is_finite()) {
            return bad("means must be finite".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub y_i: i8,
    pub y_j: i8,
    pub f_u_i: Vec<f64>,
    pub f_u_j: Vec<f64>,
    pub f_s: Vec<f64>,
    /// `[f_u_i | f_s | f_u_j]`
    pub x: Vec<f64>,
}

fn draw_one(config: &ScmConfig, rng: &mut LabRng) -> LabeledSample {
    let yi = rng.sign();
    let yj = if rng.bernoulli(config.c_ij) { yi } else { -yi };
    let f_u_i: Vec<f64> = config
        .mu_i
        .iter()
        .map(|m| rng.gaussian(yi * m, config.sigma_i))
        .collect();
    let f_s: Vec<f64> = config
        .mu_s
        .iter()
        .map(|m| rng.gaussian(yi * m, config.sigma_s))
        .collect();
    let f_u_j: Vec<f64> = config
        .mu_j
        .iter()
        .map(|m| rng.gaussian(yj * m, config.sigma_j))
        .collect();
    let mut x = Vec::with_capacity(config.observation_dim());
    x.extend_from_slice(&f_u_i);
    x.extend_from_slice(&f_s);
    x.extend_from_slice(&f_u_j);
    LabeledSample {
        y_i: yi as i8,
        y_j: yj as i8,
        f_u_i,
        f_u_j,
        f_s,
        x,
    }
}

/// Draws `n` samples; the output is a pure function of `(config, n, seed)`.
pub fn sample_dataset(config: &ScmConfig, n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Config("sample_dataset needs n > 0".into()));
    }
    let mut rng = LabRng::new(seed);
    Ok((0..n).map(|_| draw_one(config, &mut rng)).collect())
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn weighted_dot(mu: &[f64], sigma: f64, f: &[f64]) -> f64 {
    mu.iter().zip(f).map(|(m, v)| m * v).sum::<f64>() / (sigma * sigma)
}

/// `ln P(Y_i = y | f) - ln P(Y_i = -y | f)` for the no-shared-factor model.
pub fn bayes_log_odds(config: &ScmConfig, f_u_i: &[f64], f_u_j: &[f64], y: i8) -> Result<f64> {
    config.validate()?;
    if config.d_s != 0 {
        return Err(Error::Unsupported(
            "the closed-form posterior assumes no shared factor block (d_s = 0)".into(),
        ));
    }
    if f_u_i.len() != config.d_u || f_u_j.len() != config.d_u {
        return Err(crate::error::dim_err(
            "bayes_posterior",
            format!("factor blocks must have length {}", config.d_u),
        ));
    }
    if y != 1 && y != -1 {
        return Err(Error::Contract(format!("labels are ±1, got {y}")));
    }
    let y = f64::from(y);
    let a = weighted_dot(&config.mu_i, config.sigma_i, f_u_i);
    let b = weighted_dot(&config.mu_j, config.sigma_j, f_u_j);
    let (lc, lnc) = (config.c_ij.ln(), (1.0 - config.c_ij).ln());
    // ln g(y) with g(y) = e^{y a} (c e^{y b} + (1 - c) e^{-y b})
    let log_g = |s: f64| s * a + log_sum_exp(lc + s * b, lnc - s * b);
    Ok(log_g(y) - log_g(-y))
}

/// Bayes-optimal `P(Y_i = y | f_u_i, f_u_j)`.
///
/// Computed so that `P(y) + P(-y)` is exactly 1 in floating point: the larger
/// of the two is a sigmoid in [0.5, 1] and the smaller is its exact complement.
pub fn bayes_posterior(config: &ScmConfig, f_u_i: &[f64], f_u_j: &[f64], y: i8) -> Result<f64> {
    let t = bayes_log_odds(config, f_u_i, f_u_j, y)?;
    Ok(if t >= 0.0 { sigmoid(t) } else { 1.0 - sigmoid(-t) })
}

/// Gradient of the Bayes log-odds for `y_i = +1` at the origin, split into
/// the `F^u_i` block and the `F^u_j` block.
pub fn bayes_log_odds_gradient_at_origin(config: &ScmConfig) -> (Vec<f64>, Vec<f64>) {
    let wi = config
        .mu_i
        .iter()
        .map(|m| 2.0 * m / (config.sigma_i * config.sigma_i))
        .collect();
    let slope = 2.0 * (2.0 * config.c_ij - 1.0);
    let wj = config
        .mu_j
        .iter()
        .map(|m| slope * m / (config.sigma_j * config.sigma_j))
        .collect();
    (wi, wj)
}

/// Full-batch gradient descent on the mean logistic loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogisticOptions {
    pub learning_rate: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            grad_tol: 1e-6,
            max_iter: 50_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl LogisticFit {
    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
    }
}

/// Unnormalised gradient sums; `g` receives the weight part and the bias
/// part is returned. Fixed-width rows let the inner loops unroll.
fn gradient_pass<const P: usize>(features: &[f64], targets: &[f64], w: &[f64], b: f64, g: &mut [f64]) -> f64 {
    let w: [f64; P] = w.try_into().expect("width checked by caller");
    let mut acc = [0.0; P];
    let mut gb = 0.0;
    for (row, &t) in features.chunks_exact(P).zip(targets) {
        let mut z = b;
        for k in 0..P {
            z += row[k] * w[k];
        }
        let r = sigmoid(z) - t;
        gb += r;
        for k in 0..P {
            acc[k] += r * row[k];
        }
    }
    g.copy_from_slice(&acc);
    gb
}

fn gradient_pass_dyn(features: &[f64], targets: &[f64], w: &[f64], b: f64, g: &mut [f64]) -> f64 {
    g.iter_mut().for_each(|v| *v = 0.0);
    let mut gb = 0.0;
    for (row, &t) in features.chunks_exact(w.len()).zip(targets) {
        let z = b + row.iter().zip(w).map(|(x, w)| x * w).sum::<f64>();
        let r = sigmoid(z) - t;
        gb += r;
        for (gk, x) in g.iter_mut().zip(row) {
            *gk += r * x;
        }
    }
    gb
}

/// Fits `P(t = 1 | x) = sigmoid(w·x + b)` on row-major `features` (n × p)
/// with targets in {0, 1}.
pub fn fit_logistic(features: &[f64], p: usize, targets: &[f64], opts: LogisticOptions) -> Result<LogisticFit> {
    let n = targets.len();
    if n == 0 || features.len() != n * p {
        return Err(crate::error::dim_err(
            "fit_logistic",
            format!("{} feature values for {n} targets of width {p}", features.len()),
        ));
    }
    let mut w = vec![0.0; p];
    let mut b = 0.0;
    let mut g = vec![0.0; p];
    let inv_n = 1.0 / n as f64;
    let mut grad_norm = f64::INFINITY;
    for it in 0..opts.max_iter {
        let mut gb = match p {
            1 => gradient_pass::<1>(features, targets, &w, b, &mut g),
            2 => gradient_pass::<2>(features, targets, &w, b, &mut g),
            3 => gradient_pass::<3>(features, targets, &w, b, &mut g),
            4 => gradient_pass::<4>(features, targets, &w, b, &mut g),
            _ => gradient_pass_dyn(features, targets, &w, b, &mut g),
        };
        gb *= inv_n;
        g.iter_mut().for_each(|v| *v *= inv_n);
        grad_norm = (gb * gb + g.iter().map(|v| v * v).sum::<f64>()).sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Numeric("logistic gradient became non-finite".into()));
        }
        if grad_norm < opts.grad_tol {
            return Ok(LogisticFit {
                weights: w,
                bias: b,
                iterations: it,
                grad_norm,
            });
        }
        b -= opts.learning_rate * gb;
        for (wk, gk) in w.iter_mut().zip(&g) {
            *wk -= opts.learning_rate * gk;
        }
    }
    let mut last = w;
    last.push(b);
    Err(Error::Convergence {
        iterations: opts.max_iter,
        grad_norm,
        last_weights: last,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub config: ScmConfig,
    #[serde(rename = "weights_on_F_u_j")]
    pub weights_on_f_u_j: Vec<f64>,
    pub weight_norm_j: f64,
    pub bayes_agreement: f64,
    pub n: usize,
    pub seed: u64,
    #[serde(rename = "weights_on_F_u_i")]
    pub weights_on_f_u_i: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
}

/// Held-out sample count used for the Bayes agreement score.
pub const THEOREM1_HELD_OUT: usize = 10_000;

/// Fits a task-`i` logistic classifier on the joint observation and compares
/// it to the Bayes posterior on held-out draws.
pub fn verify_theorem1(config: &ScmConfig, n: usize, seed: u64) -> Result<Theorem1Report> {
    verify_theorem1_with(config, n, seed, LogisticOptions::default())
}

pub fn verify_theorem1_with(config: &ScmConfig, n: usize, seed: u64, opts: LogisticOptions) -> Result<Theorem1Report> {
    config.validate()?;
    if config.d_s != 0 {
        return Err(Error::Unsupported(
            "theorem check assumes no shared factor block (d_s = 0)".into(),
        ));
    }
    let train = sample_dataset(config, n, seed)?;
    let p = config.observation_dim();
    let mut features = Vec::with_capacity(n * p);
    let mut targets = Vec::with_capacity(n);
    for s in &train {
        features.extend_from_slice(&s.x);
        targets.push(if s.y_i > 0 { 1.0 } else { 0.0 });
    }
    drop(train);
    let fit = fit_logistic(&features, p, &targets, opts)?;
    drop(features);

    let mut rng = LabRng::derived(seed, 0x7e57);
    let mut agreement = 0.0;
    for _ in 0..THEOREM1_HELD_OUT {
        let s = draw_one(config, &mut rng);
        let bayes = bayes_posterior(config, &s.f_u_i, &s.f_u_j, 1)?;
        agreement += (fit.probability(&s.x) - bayes).abs();
    }
    agreement /= THEOREM1_HELD_OUT as f64;

    let d_u = config.d_u;
    let wj = fit.weights[d_u..].to_vec();
    let norm = wj.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(Theorem1Report {
        config: config.clone(),
        weights_on_f_u_i: fit.weights[..d_u].to_vec(),
        weights_on_f_u_j: wj,
        weight_norm_j: norm,
        bayes_agreement: agreement,
        n,
        seed,
        bias: fit.bias,
        iterations: fit.iterations,
    })
}

/// One row of a correlation sweep, averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub c_ij: f64,
    pub n: usize,
    pub weight_norm_j: f64,
    pub bayes_agreement: f64,
    pub per_seed: Vec<Theorem1Report>,
}

pub fn theorem1_grid(base: &ScmConfig, grid: &[f64], n: usize, seeds: &[u64]) -> Result<Vec<GridRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("theorem1 grid needs at least one seed".into()));
    }
    grid.iter()
        .map(|&c| {
            let cfg = base.with_correlation(c);
            let per_seed = seeds
                .iter()
                .map(|&s| verify_theorem1(&cfg, n, s))
                .collect::<Result<Vec<_>>>()?;
            let k = per_seed.len() as f64;
            Ok(GridRow {
                c_ij: c,
                n,
                weight_norm_j: per_seed.iter().map(|r| r.weight_norm_j).sum::<f64>() / k,
                bayes_agreement: per_seed.iter().map(|r| r.bayes_agreement).sum::<f64>() / k,
                per_seed,
            })
        })
        .collect()
}

/// True when `weight_norm_j` never decreases as `|c - 0.5|` grows.
pub fn is_monotone_in_conflict(rows: &[GridRow]) -> bool {
    let mut sorted: Vec<&GridRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (a.c_ij - 0.5)
            .abs()
            .partial_cmp(&(b.c_ij - 0.5).abs())
            .expect("finite correlations")
    });
    sorted.windows(2).all(|w| w[1].weight_norm_j >= w[0].weight_norm_j)
}

/// Two SSL domains built from the factor model: samples of domain 0 carry
/// only the task-`i` block (task-`j` block zeroed) and samples of domain 1
/// only the task-`j` block; the shared block is present in both. Factors
/// are observed through a fixed random mixing plus isotropic noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConflictBenchmark {
    pub scm: ScmConfig,
    pub d_in: usize,
    #[serde(default = "default_obs_noise")]
    pub obs_noise: f64,
    #[serde(default)]
    pub mixing_seed: u64,
}

fn default_obs_noise() -> f64 {
    0.05
}

/// Shift applied to produce a transfer domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Rotation of the class means in every `(f_u_i[k], f_u_j[k])` plane.
    pub rotation_deg: f64,
    /// Multiplies every factor standard deviation.
    pub sigma_scale: f64,
}

impl DomainShift {
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            sigma_scale: 1.0,
        }
    }
}

/// Samples with a domain id and a 4-way label `2·[y_i > 0] + [y_j > 0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkData {
    pub samples: Vec<Vec<f64>>,
    pub domains: Vec<usize>,
    pub labels: Vec<usize>,
}

impl ConflictBenchmark {
    pub fn new(c_ij: f64) -> Self {
        let mut scm = ScmConfig::symmetric(2, 1.0, 1.0, c_ij);
        scm.d_s = 2;
        scm.mu_s = vec![1.0; 2];
        Self {
            scm,
            d_in: 8,
            obs_noise: default_obs_noise(),
            mixing_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scm.validate()?;
        if self.d_in == 0 {
            return Err(Error::Config("benchmark d_in must be positive".into()));
        }
        if !(self.obs_noise >= 0.0 && self.obs_noise.is_finite()) {
            return Err(Error::Config(format!(
                "obs_noise must be non-negative, got {}",
                self.obs_noise
            )));
        }
        Ok(())
    }

    /// `d_in × (2 d_u + d_s)`, Gaussian entries scaled by `1/√cols`.
    pub fn mixing(&self) -> Vec<Vec<f64>> {
        let cols = self.scm.observation_dim();
        let mut rng = LabRng::derived(self.mixing_seed, 0x313);
        let scale = 1.0 / (cols as f64).sqrt();
        (0..self.d_in)
            .map(|_| (0..cols).map(|_| rng.normal() * scale).collect())
            .collect()
    }

    fn observe(&self, mix: &[Vec<f64>], f: &[f64], rng: &mut LabRng) -> Vec<f64> {
        mix.iter()
            .map(|row| row.iter().zip(f).map(|(m, v)| m * v).sum::<f64>() + self.obs_noise * rng.normal())
            .collect()
    }

    fn draw(&self, shift: &DomainShift, keep: (bool, bool), rng: &mut LabRng) -> (Vec<f64>, usize) {
        let c = &self.scm;
        let yi = rng.sign();
        let yj = if rng.bernoulli(c.c_ij) { yi } else { -yi };
        let (sin, cos) = shift.rotation_deg.to_radians().sin_cos();
        let mut fi = Vec::with_capacity(c.d_u);
        let mut fj = Vec::with_capacity(c.d_u);
        for k in 0..c.d_u {
            let (a, b) = (yi * c.mu_i[k], yj * c.mu_j[k]);
            fi.push(cos * a - sin * b + shift.sigma_scale * c.sigma_i * rng.normal());
            fj.push(sin * a + cos * b + shift.sigma_scale * c.sigma_j * rng.normal());
        }
        let fs: Vec<f64> = c
            .mu_s
            .iter()
            .map(|m| yi * m + shift.sigma_scale * c.sigma_s * rng.normal())
            .collect();
        if !keep.0 {
            fi.iter_mut().for_each(|v| *v = 0.0);
        }
        if !keep.1 {
            fj.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut f = fi;
        f.extend(fs);
        f.extend(fj);
        let label = 2 * usize::from(yi > 0.0) + usize::from(yj > 0.0);
        (f, label)
    }

    /// `n_per_domain` samples of each domain, interleaved.
    pub fn two_task(&self, n_per_domain: usize, seed: u64) -> Result<BenchmarkData> {
        self.generate(n_per_domain, seed, &DomainShift::none(), true)
    }

    /// `n` samples with both task blocks present, after `shift`.
    pub fn shifted(&self, n: usize, seed: u64, shift: &DomainShift) -> Result<BenchmarkData> {
        self.generate(n, seed, shift, false)
    }

    fn generate(&self, n: usize, seed: u64, shift: &DomainShift, split: bool) -> Result<BenchmarkData> {
        self.validate()?;
        if !(shift.sigma_scale > 0.0) {
            return Err(Error::Config(format!(
                "sigma_scale must be positive, got {}",
                shift.sigma_scale
            )));
        }
        let mix = self.mixing();
        let mut rng = LabRng::new(seed);
        let mut out = BenchmarkData {
            samples: Vec::new(),
            domains: Vec::new(),
            labels: Vec::new(),
        };
        for _ in 0..n {
            let domains: &[(usize, (bool, bool))] = if split {
                &[(0, (true, false)), (1, (false, true))]
            } else {
                &[(0, (true, true))]
            };
            for &(d, keep) in domains {
                let (f, label) = self.draw(shift, keep, &mut rng);
                out.samples.push(self.observe(&mix, &f, &mut rng));
                out.domains.push(d);
                out.labels.push(label);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(c: f64) -> ScmConfig {
        ScmConfig::symmetric(1, 1.0, 1.0, c)
    }

    #[test]
    fn validation_rejects_bad_configs() {
        assert!(unit(0.0).validate().is_err());
        assert!(unit(1.0).validate().is_err());
        let mut c = unit(0.5);
        c.sigma_j = 0.0;
        assert!(c.validate().is_err());
        let mut c = unit(0.5);
        c.mu_i = vec![1.0, 2.0];
        assert!(c.validate().is_err());
        assert!(sample_dataset(&unit(0.5), 0, 1).is_err());
    }

    #[test]
    fn near_one_correlation_copies_labels() {
        let eps = 1e-9;
        let n = 100_000;
        let data = sample_dataset(&unit(1.0 - eps), n, 3).unwrap();
        let agree = data.iter().filter(|s| s.y_i == s.y_j).count() as f64 / n as f64;
        let sd = (eps * (1.0 - eps) / n as f64).sqrt();
        assert!((agree - (1.0 - eps)).abs() <= 3.0 * sd + 1.0 / n as f64);
    }

    #[test]
    fn half_correlation_gives_independent_labels() {
        let n = 100_000;
        let data = sample_dataset(&unit(0.5), n, 4).unwrap();
        let corr = data.iter().map(|s| f64::from(s.y_i) * f64::from(s.y_j)).sum::<f64>() / n as f64;
        assert!(corr.abs() < 0.01, "{corr}");
    }

    #[test]
    fn class_conditional_mean_matches() {
        let n = 100_000;
        let data = sample_dataset(&unit(0.7), n, 5).unwrap();
        let m = data.iter().map(|s| s.f_u_i[0] * f64::from(s.y_i)).sum::<f64>() / n as f64;
        assert!((m - 1.0).abs() < 0.01, "{m}");
    }

    #[test]
    fn observation_is_block_concatenation() {
        let mut cfg = ScmConfig::symmetric(2, 1.0, 0.5, 0.8);
        cfg.d_s = 1;
        cfg.mu_s = vec![0.3];
        for s in sample_dataset(&cfg, 50, 9).unwrap() {
            let mut x = s.f_u_i.clone();
            x.extend(&s.f_s);
            x.extend(&s.f_u_j);
            assert_eq!(s.x, x);
        }
    }

    #[test]
    fn posterior_is_one_half_at_origin() {
        for c in [0.1, 0.5, 0.9] {
            let cfg = ScmConfig::symmetric(2, 0.7, 1.3, c);
            let p = bayes_posterior(&cfg, &[0.0, 0.0], &[0.0, 0.0], 1).unwrap();
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn half_correlation_reduces_to_own_factor_sigmoid() {
        let cfg = ScmConfig {
            mu_i: vec![0.8, -0.4],
            mu_j: vec![1.5, 0.2],
            sigma_i: 1.2,
            ..ScmConfig::symmetric(2, 1.0, 1.0, 0.5)
        };
        let fi = [0.3, -1.1];
        let a: f64 = cfg.mu_i.iter().zip(&fi).map(|(m, f)| m * f).sum::<f64>() / 1.44;
        for fj in [[0.0, 0.0], [2.0, -3.0], [-0.5, 0.9]] {
            let p = bayes_posterior(&cfg, &fi, &fj, 1).unwrap();
            assert!((p - sigmoid(2.0 * a)).abs() < 1e-15);
        }
    }

    #[test]
    fn posterior_closed_form_value() {
        // d_u = 1, mu = sigma = 1, c = 0.9, f_i = 0.5, f_j = -0.3:
        // g(+1) = e^{0.5}(0.9 e^{-0.3} + 0.1 e^{0.3}), g(-1) = e^{-0.5}(0.9 e^{0.3} + 0.1 e^{-0.3})
        let gp = 0.5f64.exp() * (0.9 * (-0.3f64).exp() + 0.1 * 0.3f64.exp());
        let gm = (-0.5f64).exp() * (0.9 * 0.3f64.exp() + 0.1 * (-0.3f64).exp());
        let expected = gp / (gp + gm);
        let p = bayes_posterior(&unit(0.9), &[0.5], &[-0.3], 1).unwrap();
        assert!((p - expected).abs() < 1e-14, "{p} vs {expected}");
        assert!((p - 0.628_357_141_487_150).abs() < 1e-12, "{p}");
    }

    #[test]
    fn posterior_matches_monte_carlo_frequency() {
        // condition on a box around (0.5, -0.3)
        let cfg = unit(0.9);
        let data = sample_dataset(&cfg, 1_000_000, 77).unwrap();
        let (mut hits, mut pos) = (0usize, 0usize);
        for s in &data {
            if (s.f_u_i[0] - 0.5).abs() < 0.1 && (s.f_u_j[0] + 0.3).abs() < 0.1 {
                hits += 1;
                pos += usize::from(s.y_i > 0);
            }
        }
        let freq = pos as f64 / hits as f64;
        let p = bayes_posterior(&cfg, &[0.5], &[-0.3], 1).unwrap();
        let se = (p * (1.0 - p) / hits as f64).sqrt();
        assert!(hits > 1000);
        assert!((freq - p).abs() < 4.0 * se + 0.005, "freq {freq} p {p} hits {hits}");
    }

    #[test]
    fn shared_block_is_unsupported() {
        let mut cfg = unit(0.5);
        cfg.d_s = 1;
        cfg.mu_s = vec![1.0];
        assert!(matches!(
            bayes_posterior(&cfg, &[0.0], &[0.0], 1),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(verify_theorem1(&cfg, 10, 1), Err(Error::Unsupported(_))));
    }

    #[test]
    fn origin_gradient_sign_follows_correlation() {
        assert!(bayes_log_odds_gradient_at_origin(&unit(0.9)).1[0] > 0.0);
        assert!(bayes_log_odds_gradient_at_origin(&unit(0.1)).1[0] < 0.0);
        assert_eq!(bayes_log_odds_gradient_at_origin(&unit(0.5)).1[0], 0.0);
    }

    #[test]
    fn logistic_fit_reports_non_convergence() {
        let x = [1.0, -1.0];
        let t = [1.0, 0.0];
        let err = fit_logistic(
            &x,
            1,
            &t,
            LogisticOptions {
                max_iter: 5,
                ..Default::default()
            },
        )
        .unwrap_err();
        match err {
            Error::Convergence { last_weights, .. } => assert_eq!(last_weights.len(), 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn anticorrelated_tasks_flip_the_cross_weight() {
        let hi = verify_theorem1(&unit(0.9), 20_000, 1).unwrap();
        let lo = verify_theorem1(&unit(0.1), 20_000, 1).unwrap();
        assert!(hi.weights_on_f_u_j[0] > 0.1);
        assert!(lo.weights_on_f_u_j[0] < -0.1);
    }

    #[test]
    fn report_serializes_with_expected_keys() {
        let r = verify_theorem1(&unit(0.6), 2_000, 2).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in [
            "config",
            "weights_on_F_u_j",
            "weight_norm_j",
            "bayes_agreement",
            "n",
            "seed",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn small_samples_leave_cross_weight_nonzero() {
        let norms: Vec<f64> = (0..100)
            .map(|s| verify_theorem1(&unit(0.5), 200, s).unwrap().weight_norm_j)
            .collect();
        let mut sorted = norms.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(sorted[50] > 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn posterior_complements_exactly(
                fi in prop::collection::vec(-3.0f64..3.0, 2),
                fj in prop::collection::vec(-3.0f64..3.0, 2),
                c in 0.01f64..0.99,
                mu in -1.0f64..1.0,
                sigma in 1.0f64..3.0,
            ) {
                let cfg = ScmConfig::symmetric(2, mu, sigma, c);
                let p = bayes_posterior(&cfg, &fi, &fj, 1).unwrap();
                let q = bayes_posterior(&cfg, &fi, &fj, -1).unwrap();
                prop_assert!(p > 0.0 && p < 1.0);
                prop_assert_eq!(p + q, 1.0);
            }

            #[test]
            fn half_correlation_ignores_other_block(
                fi in prop::collection::vec(-4.0f64..4.0, 3),
                fj in prop::collection::vec(-4.0f64..4.0, 3),
            ) {
                let cfg = ScmConfig::symmetric(3, 0.9, 1.1, 0.5);
                let base = bayes_posterior(&cfg, &fi, &[0.0; 3], 1).unwrap();
                let p = bayes_posterior(&cfg, &fi, &fj, 1).unwrap();
                prop_assert!((p - base).abs() < 1e-12);
            }
        }
    }
}
