//! Fully connected layers shared by the encoder and the calibration networks.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::numcore::{Matrix, Tape, Var};
use crate::rng::LabRng;

/// `y = x W + b` with `W: in × out`, `b: 1 × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut LabRng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            weight: Matrix::from_fn(fan_in, fan_out, |_, _| rng.uniform_range(-a, a)),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight)?;
        for i in 0..y.rows() {
            for j in 0..y.cols() {
                y.set(i, j, y.get(i, j) + self.bias.get(0, j));
            }
        }
        Ok(y)
    }
}

/// Linear layers with relu between them (none after the last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, hidden..., out]`.
    pub fn init(widths: &[usize], rng: &mut LabRng) -> Self {
        Self {
            layers: widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect(),
        }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        Self {
            layers: widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, Linear::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::out_dim)
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(dim_err(
                    "Mlp",
                    format!(
                        "{what}: layer {i} outputs {} but layer {} takes {}",
                        w[0].out_dim(),
                        i + 1,
                        w[1].in_dim()
                    ),
                ));
            }
        }
        for l in &self.layers {
            if l.bias.shape() != (1, l.out_dim()) {
                return Err(dim_err("Mlp", format!("{what}: bias shape {:?}", l.bias.shape())));
            }
            l.weight.ensure_finite(what)?;
            l.bias.ensure_finite(what)?;
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i < last {
                h = h.map(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.var(l.weight.clone()), tape.var(l.bias.clone())))
                .collect(),
        }
    }

    /// Records the layers as constants (no gradient wanted).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
                .collect(),
        }
    }
}

/// An [`Mlp`] whose tensors live on a tape.
pub struct BoundMlp<'t> {
    pub layers: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> BoundMlp<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(*w)?.add(*b)?;
            if i < last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    /// Tensors in the same order as [`Params::tensors`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }
}

/// A set of trainable tensors in a fixed order.
pub trait Params {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    /// In-place `p -= lr · g` for every tensor.
    fn sgd_step(&mut self, grads: &[Matrix], lr: f64) -> Result<()> {
        let mut tensors = self.tensors_mut();
        if tensors.len() != grads.len() {
            return Err(dim_err(
                "sgd_step",
                format!("{} gradients for {} tensors", grads.len(), tensors.len()),
            ));
        }
        if lr == 0.0 {
            return Ok(());
        }
        for (p, g) in tensors.iter_mut().zip(grads) {
            p.axpy(-lr, g)?;
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }

    /// Concatenation of all entries in tensor order.
    fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|m| m.data().iter().copied()).collect()
    }
}

impl Params for Mlp {
    fn tensors(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Flattens a gradient list in the same order as [`Params::flatten`].
pub fn flatten_grads(grads: &[Matrix]) -> Vec<f64> {
    grads.iter().flat_map(|m| m.data().iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_and_taped_forward_agree() {
        let mut rng = LabRng::new(4);
        let mlp = Mlp::init(&[3, 5, 2], &mut rng);
        let x = Matrix::from_fn(4, 3, |i, j| (i as f64 - j as f64) * 0.3);
        let plain = mlp.forward(&x).unwrap();
        let tape = Tape::new();
        let bound = mlp.bind(&tape);
        let taped = bound.forward(tape.constant(x)).unwrap().value();
        assert!(plain.max_abs_diff(&taped) < 1e-14);
    }

    #[test]
    fn zero_step_is_bitwise_noop() {
        let mut rng = LabRng::new(4);
        let mut mlp = Mlp::init(&[3, 5, 2], &mut rng);
        let before = mlp.clone();
        let grads: Vec<Matrix> = mlp
            .tensors()
            .iter()
            .map(|m| Matrix::filled(m.rows(), m.cols(), 1.0))
            .collect();
        mlp.sgd_step(&grads, 0.0).unwrap();
        assert_eq!(mlp, before);
    }

    #[test]
    fn validate_catches_broken_chains() {
        let mut mlp = Mlp::zeros(&[3, 4, 2]);
        assert!(mlp.validate("net").is_ok());
        mlp.layers[1] = Linear::zeros(5, 2);
        assert!(mlp.validate("net").is_err());
    }
}
