//! Task construction from a mini-batch, plus IDX ingestion.
//!
//! A batch is split into `K` equal groups. Each group becomes a [`Task`]
//! whose views are either stochastic augmentations (discriminative SSL) or
//! patch-masked copies (generative SSL), divided into support and query.

mod augment;
mod idx;
mod mask;

pub use augment::{augment_dssl, AugmentParams};
pub use idx::{load_idx, load_idx_labels, load_idx_pair, parse_idx, IdxArray};
pub use mask::mask_gssl;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::rng::LabRng;

/// Mini-batch of `N` feature vectors of a common dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawBatch {
    pub samples: Vec<Vec<f64>>,
    /// Only used for evaluation.
    pub labels: Option<Vec<usize>>,
    /// `(rows, cols)` when samples are flattened images.
    pub image_shape: Option<(usize, usize)>,
}

impl RawBatch {
    pub fn new(samples: Vec<Vec<f64>>) -> Result<Self> {
        let b = Self {
            samples,
            labels: None,
            image_shape: None,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.samples.len() {
            return Err(dim_err(
                "RawBatch::with_labels",
                format!("{} labels for {} samples", labels.len(), self.samples.len()),
            ));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if let Some((i, s)) = self.samples.iter().enumerate().find(|(_, s)| s.len() != d) {
            return Err(dim_err(
                "RawBatch",
                format!("sample {i} has dimension {} but sample 0 has {d}", s.len()),
            ));
        }
        if let Some((r, c)) = self.image_shape {
            if r * c != d {
                return Err(dim_err("RawBatch", format!("image {r}x{c} vs dimension {d}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    /// Selects samples (and labels) by index.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            image_shape: self.image_shape,
        }
    }

    /// Per-coordinate mean and population standard deviation.
    pub fn feature_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let n = self.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for s in &self.samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for s in &self.samples {
            for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        (mean, var.into_iter().map(|v| (v / n).sqrt()).collect())
    }

    /// Z-scores every coordinate with the given moments; constant coordinates
    /// are only centred.
    pub fn standardized_with(&self, mean: &[f64], std: &[f64]) -> Self {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                s.iter()
                    .zip(mean.iter().zip(std))
                    .map(|(v, (m, sd))| if *sd > 1e-12 { (v - m) / sd } else { v - m })
                    .collect()
            })
            .collect();
        Self {
            samples,
            labels: self.labels.clone(),
            image_shape: self.image_shape,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Augmented,
    Masked,
    Original,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct View {
    /// Index of the source sample within the batch.
    pub source: usize,
    pub kind: ViewKind,
    pub payload: Vec<f64>,
    /// `true` marks a masked coordinate; present iff `kind == Masked`.
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    pub support: Vec<View>,
    pub query: Vec<View>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslMode {
    Dssl,
    Gssl,
}

/// Seeded `K`-way split. A uniform permutation is cut into `K` contiguous
/// groups of `⌊N/K⌋`; the `N mod K` trailing indices are dropped.
pub fn split_batch(batch: &RawBatch, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let perm = LabRng::new(seed).permutation(batch.len());
    split_permutation(&perm, k)
}

/// Cuts an explicit ordering into `k` equal groups.
pub fn split_permutation(order: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let size = order.len() / k;
    if size < 2 {
        return Err(Error::BatchTooSmall {
            samples: order.len(),
            groups: k,
        });
    }
    Ok(order.chunks_exact(size).take(k).map(<[usize]>::to_vec).collect())
}

/// Builds one task per group in the requested mode, each from its own
/// seed stream so tasks are reproducible independently.
pub fn build_tasks(batch: &RawBatch, groups: &[Vec<usize>], spec: &TaskSpec, seed: u64) -> Result<Vec<Task>> {
    let stats = batch.feature_moments().1;
    groups
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64);
            let mut task = match spec.mode {
                SslMode::Dssl => augment_dssl(batch, g, spec.m, spec.m_prime, &spec.augment, &stats, s)?,
                SslMode::Gssl => mask_gssl(batch, g, spec.m, spec.m_prime, spec.mask_ratio, spec.patch_size, s)?,
            };
            task.id = k;
            Ok(task)
        })
        .collect()
}

/// Everything needed to turn groups into tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_m_prime")]
    pub m_prime: usize,
    #[serde(default = "default_mode")]
    pub mode: SslMode,
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default)]
    pub augment: AugmentParams,
}

fn default_k() -> usize {
    4
}
fn default_m() -> usize {
    4
}
fn default_m_prime() -> usize {
    2
}
fn default_mode() -> SslMode {
    SslMode::Dssl
}
fn default_mask_ratio() -> f64 {
    0.5
}
fn default_patch() -> usize {
    1
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            k: default_k(),
            m: default_m(),
            m_prime: default_m_prime(),
            mode: default_mode(),
            mask_ratio: default_mask_ratio(),
            patch_size: default_patch(),
            augment: AugmentParams::default(),
        }
    }
}
