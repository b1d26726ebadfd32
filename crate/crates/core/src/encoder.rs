//! The SSL network (encoder, projection head, optional decoder) and the
//! losses built on top of it.

use serde::{Deserialize, Serialize};

use crate::databatch::{SslMode, View};
use crate::error::{dim_err, Error, Result};
use crate::nn::{BoundMlp, Linear, Mlp, Params};
use crate::numcore::{Matrix, Tape, Var};
use crate::rng::LabRng;

/// Network sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// 0 means "take it from the data".
    #[serde(default)]
    pub d_in: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_proj")]
    pub proj_dim: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_hidden() -> usize {
    128
}
fn default_dim() -> usize {
    32
}
fn default_proj() -> usize {
    16
}
fn default_temperature() -> f64 {
    0.5
}

impl ModelSpec {
    pub fn new(d_in: usize) -> Self {
        Self {
            d_in,
            hidden: default_hidden(),
            dim: default_dim(),
            proj_dim: default_proj(),
            temperature: default_temperature(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.hidden == 0 || self.dim == 0 || self.proj_dim == 0 {
            return Err(Error::Config(format!("all model sizes must be positive: {self:?}")));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Parameters of the SSL model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// `d_in → h → h → d`
    pub encoder: Mlp,
    /// `d → d_p`
    pub projector: Linear,
    /// `d → h → d_in`, generative mode only.
    pub decoder: Option<Mlp>,
}

impl EncoderParams {
    pub fn init(spec: &ModelSpec, mode: SslMode, rng: &mut LabRng) -> Self {
        let encoder = Mlp::init(&[spec.d_in, spec.hidden, spec.hidden, spec.dim], rng);
        let projector = Linear::init(spec.dim, spec.proj_dim, rng);
        let decoder = match mode {
            SslMode::Gssl => Some(Mlp::init(&[spec.dim, spec.hidden, spec.d_in], rng)),
            SslMode::Dssl => None,
        };
        Self {
            encoder,
            projector,
            decoder,
        }
    }

    pub fn d_in(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn dim(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate("encoder")?;
        let proj = Mlp {
            layers: vec![self.projector.clone()],
        };
        proj.validate("projector")?;
        if self.projector.in_dim() != self.dim() {
            return Err(dim_err("EncoderParams", "projector input must equal encoder output"));
        }
        if let Some(dec) = &self.decoder {
            dec.validate("decoder")?;
            if dec.in_dim() != self.dim() || dec.out_dim() != self.d_in() {
                return Err(dim_err("EncoderParams", "decoder must map d back to d_in"));
            }
        }
        Ok(())
    }

    /// Encoder and projector tensors: the shared parameters whose task
    /// gradients are compared for conflict.
    pub fn shared_tensors(&self) -> Vec<&Matrix> {
        let mut t = self.encoder.tensors();
        t.push(&self.projector.weight);
        t.push(&self.projector.bias);
        t
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundEncoder<'t> {
        BoundEncoder {
            encoder: self.encoder.bind(tape),
            projector: (
                tape.var(self.projector.weight.clone()),
                tape.var(self.projector.bias.clone()),
            ),
            decoder: self.decoder.as_ref().map(|d| d.bind(tape)),
        }
    }

    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundEncoder<'t> {
        BoundEncoder {
            encoder: self.encoder.bind_frozen(tape),
            projector: (
                tape.constant(self.projector.weight.clone()),
                tape.constant(self.projector.bias.clone()),
            ),
            decoder: self.decoder.as_ref().map(|d| d.bind_frozen(tape)),
        }
    }
}

impl Params for EncoderParams {
    /// Order: encoder layers, projector, decoder layers.
    fn tensors(&self) -> Vec<&Matrix> {
        let mut t = self.shared_tensors();
        if let Some(d) = &self.decoder {
            t.extend(d.tensors());
        }
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut t = self.encoder.tensors_mut();
        t.push(&mut self.projector.weight);
        t.push(&mut self.projector.bias);
        if let Some(d) = &mut self.decoder {
            t.extend(d.tensors_mut());
        }
        t
    }
}

pub struct BoundEncoder<'t> {
    pub encoder: BoundMlp<'t>,
    pub projector: (Var<'t>, Var<'t>),
    pub decoder: Option<BoundMlp<'t>>,
}

impl<'t> BoundEncoder<'t> {
    pub fn encode(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.encoder.forward(x)
    }

    pub fn project(&self, z: Var<'t>) -> Result<Var<'t>> {
        z.matmul(self.projector.0)?.add(self.projector.1)
    }

    pub fn decode(&self, z: Var<'t>) -> Result<Var<'t>> {
        self.decoder
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no decoder".into()))?
            .forward(z)
    }

    /// Same order as [`Params::tensors`] on [`EncoderParams`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut v = self.encoder.vars();
        v.push(self.projector.0);
        v.push(self.projector.1);
        if let Some(d) = &self.decoder {
            v.extend(d.vars());
        }
        v
    }
}

/// Encoder output `z` and its l2-normalised projection `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation {
    pub z: Vec<f64>,
    pub p: Vec<f64>,
}

/// Stacks view payloads into an `n × d_in` matrix.
pub fn views_matrix(views: &[View]) -> Result<Matrix> {
    Matrix::from_rows(&views.iter().map(|v| v.payload.as_slice()).collect::<Vec<_>>())
}

pub fn encode_matrix(params: &EncoderParams, x: &Matrix) -> Result<Matrix> {
    if x.cols() != params.d_in() {
        return Err(dim_err(
            "encode",
            format!("inputs have {} features, encoder expects {}", x.cols(), params.d_in()),
        ));
    }
    params.encoder.forward(x)
}

pub fn encode(params: &EncoderParams, views: &[View]) -> Result<Vec<Representation>> {
    if views.is_empty() {
        return Ok(Vec::new());
    }
    let x = views_matrix(views)?;
    let z = encode_matrix(params, &x)?;
    let p = params.projector.forward(&z)?;
    Ok((0..z.rows())
        .map(|i| {
            let pr = p.row(i);
            let n = pr.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            Representation {
                z: z.row(i).to_vec(),
                p: pr.iter().map(|v| v / n).collect(),
            }
        })
        .collect())
}

pub(crate) const NORM_FLOOR: f64 = 1e-8;
const MASKED_LOGIT: f64 = -1e9;

/// NT-Xent over `n` embeddings grouped by `sources`: every other embedding
/// of the same source is a positive, everything else a negative. Rows are
/// l2-normalised inside; the loss is the mean over anchors of the mean
/// cross-entropy of each positive.
pub fn loss_infonce<'t>(embeddings: Var<'t>, sources: &[usize], temperature: f64) -> Result<Var<'t>> {
    let (n, _) = embeddings.shape();
    if sources.len() != n {
        return Err(dim_err(
            "loss_infonce",
            format!("{} sources for {n} embeddings", sources.len()),
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut distinct: Vec<usize> = sources.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::InsufficientData(
            "InfoNCE needs at least two positive groups to supply negatives".into(),
        ));
    }
    let mut weights = Matrix::zeros(n, n);
    let mut diag = Matrix::zeros(n, n);
    for a in 0..n {
        diag.set(a, a, MASKED_LOGIT);
        let pos: Vec<usize> = (0..n).filter(|&b| b != a && sources[b] == sources[a]).collect();
        if pos.is_empty() {
            return Err(Error::Contract(format!("embedding {a} has no positive partner")));
        }
        let w = -1.0 / (pos.len() * n) as f64;
        for b in pos {
            weights.set(a, b, w);
        }
    }
    let tape = embeddings.tape();
    let p = embeddings.row_normalize(NORM_FLOOR)?;
    let logits = p.matmul(p.t()?)?.scale(1.0 / temperature)?.add(tape.constant(diag))?;
    logits.row_log_softmax()?.mul(tape.constant(weights))?.sum()
}

/// Mean over views of the squared error on masked coordinates, each view
/// normalised by its own mask size. Views with empty masks are skipped.
pub fn loss_recon<'t>(decoded: Var<'t>, targets: &Matrix, masks: &[Vec<bool>]) -> Result<Var<'t>> {
    let (n, d) = decoded.shape();
    if targets.shape() != (n, d) || masks.len() != n || masks.iter().any(|m| m.len() != d) {
        return Err(dim_err(
            "loss_recon",
            format!(
                "decoded {:?}, targets {:?}, {} masks",
                (n, d),
                targets.shape(),
                masks.len()
            ),
        ));
    }
    let active: Vec<usize> = masks.iter().map(|m| m.iter().filter(|b| **b).count()).collect();
    let views = active.iter().filter(|c| **c > 0).count();
    if views == 0 {
        return Err(Error::Contract("reconstruction loss over an empty mask set".into()));
    }
    let weights = Matrix::from_fn(n, d, |i, j| {
        if masks[i][j] {
            1.0 / (active[i] * views) as f64
        } else {
            0.0
        }
    });
    let tape = decoded.tape();
    let diff = decoded.sub(tape.constant(targets.clone()))?;
    diff.mul(diff)?.mul(tape.constant(weights))?.sum()
}

/// Sum over positive pairs (all unordered pairs sharing a source) of
/// `‖z_a - z_b‖²`.
pub fn loss_sse_pairs<'t>(reps: Var<'t>, sources: &[usize]) -> Result<Var<'t>> {
    let (n, _) = reps.shape();
    if sources.len() != n {
        return Err(dim_err(
            "loss_sse_query",
            format!("{} sources for {n} rows", sources.len()),
        ));
    }
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if sources[a] == sources[b] {
                pairs.push((a, b));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Contract("no positive pairs for the squared-error loss".into()));
    }
    let mut diff = Matrix::zeros(pairs.len(), n);
    for (r, (a, b)) in pairs.iter().enumerate() {
        diff.set(r, *a, 1.0);
        diff.set(r, *b, -1.0);
    }
    reps.tape().constant(diff).matmul(reps)?.sq_norm()
}
