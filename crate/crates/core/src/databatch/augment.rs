use serde::{Deserialize, Serialize};

use super::{RawBatch, Task, View, ViewKind};
use crate::error::{Error, Result};
use crate::rng::LabRng;

/// Corruption family for vector data. Every strength set to zero gives the
/// identity augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    /// Additive Gaussian noise, as a multiple of each coordinate's batch std.
    pub noise: f64,
    /// Probability of zeroing a coordinate.
    pub dropout: f64,
    /// Global scale drawn uniformly from `[1 - scale, 1 + scale]`.
    pub scale: f64,
    /// Maximum shift in pixels for image batches (zero padded).
    pub crop_pad: usize,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            noise: 0.1,
            dropout: 0.1,
            scale: 0.2,
            crop_pad: 2,
        }
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            noise: 0.0,
            dropout: 0.0,
            scale: 0.0,
            crop_pad: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise >= 0.0) || !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.scale) {
            return Err(Error::Config(format!("invalid augmentation strengths {self:?}")));
        }
        Ok(())
    }

    fn apply(&self, x: &[f64], feature_std: &[f64], image: Option<(usize, usize)>, rng: &mut LabRng) -> Vec<f64> {
        let mut out = match image {
            Some((rows, cols)) if self.crop_pad > 0 => shift_image(x, rows, cols, self.crop_pad, rng),
            _ => x.to_vec(),
        };
        if self.noise > 0.0 {
            for (v, sd) in out.iter_mut().zip(feature_std) {
                *v += self.noise * sd * rng.normal();
            }
        }
        if self.dropout > 0.0 {
            for v in out.iter_mut() {
                if rng.bernoulli(self.dropout) {
                    *v = 0.0;
                }
            }
        }
        if self.scale > 0.0 {
            let s = rng.uniform_range(1.0 - self.scale, 1.0 + self.scale);
            out.iter_mut().for_each(|v| *v *= s);
        }
        out
    }
}

/// Random translation by up to `pad` pixels in each direction. Equivalent to
/// zero-padding by `pad` and cropping back to the original size.
fn shift_image(x: &[f64], rows: usize, cols: usize, pad: usize, rng: &mut LabRng) -> Vec<f64> {
    let span = 2 * pad + 1;
    let dy = rng.below(span) as isize - pad as isize;
    let dx = rng.below(span) as isize - pad as isize;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows as isize {
        let sr = r - dy;
        if sr < 0 || sr >= rows as isize {
            continue;
        }
        for c in 0..cols as isize {
            let sc = c - dx;
            if sc < 0 || sc >= cols as isize {
                continue;
            }
            out[(r as usize) * cols + c as usize] = x[(sr as usize) * cols + sc as usize];
        }
    }
    out
}

/// `m` augmentations per sample; `m_prime` of them, chosen at random, go to
/// the support set and the rest to the query set.
pub fn augment_dssl(
    batch: &RawBatch,
    group: &[usize],
    m: usize,
    m_prime: usize,
    params: &AugmentParams,
    feature_std: &[f64],
    seed: u64,
) -> Result<Task> {
    if m < 4 || m_prime < 2 || m_prime + 2 > m {
        return Err(Error::Config(format!(
            "D-SSL needs m >= 4 and 2 <= m' <= m - 2 (got m = {m}, m' = {m_prime})"
        )));
    }
    params.validate()?;
    if group.iter().any(|&i| i >= batch.len()) {
        return Err(Error::Contract("group index outside the batch".into()));
    }
    let mut rng = LabRng::new(seed);
    let mut support = Vec::with_capacity(group.len() * m_prime);
    let mut query = Vec::with_capacity(group.len() * (m - m_prime));
    for &src in group {
        let views: Vec<View> = (0..m)
            .map(|_| View {
                source: src,
                kind: ViewKind::Augmented,
                payload: params.apply(&batch.samples[src], feature_std, batch.image_shape, &mut rng),
                mask: None,
            })
            .collect();
        let order = rng.permutation(m);
        let mut chosen = vec![false; m];
        order[..m_prime].iter().for_each(|&i| chosen[i] = true);
        for (v, to_support) in views.into_iter().zip(chosen) {
            if to_support {
                support.push(v);
            } else {
                query.push(v);
            }
        }
    }
    Ok(Task { id: 0, support, query })
}
