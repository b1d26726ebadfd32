use super::{RawBatch, Task, View, ViewKind};
use crate::error::{Error, Result};
use crate::rng::LabRng;

/// Value written into masked coordinates (data are standardised, so zero is
/// the feature mean).
pub const MASK_TOKEN: f64 = 0.0;

/// `m` patch-masked views per sample. The support set holds `m_prime` of them
/// plus the unmasked original; the query set holds the rest.
pub fn mask_gssl(
    batch: &RawBatch,
    group: &[usize],
    m: usize,
    m_prime: usize,
    mask_ratio: f64,
    patch_size: usize,
    seed: u64,
) -> Result<Task> {
    let d = batch.dim();
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::Config(format!(
            "mask ratio must lie in (0, 1), got {mask_ratio}"
        )));
    }
    if patch_size == 0 || !d.is_multiple_of(patch_size) {
        return Err(Error::Config(format!(
            "dimension {d} is not divisible by patch size {patch_size}"
        )));
    }
    if m < 2 || m_prime < 1 || m_prime >= m {
        return Err(Error::Config(format!(
            "G-SSL needs m >= 2 and 1 <= m' <= m - 1 (got m = {m}, m' = {m_prime})"
        )));
    }
    if group.iter().any(|&i| i >= batch.len()) {
        return Err(Error::Contract("group index outside the batch".into()));
    }
    let patches = d / patch_size;
    let n_masked = ((mask_ratio * patches as f64).ceil() as usize).min(patches);
    let mut rng = LabRng::new(seed);
    let mut support = Vec::new();
    let mut query = Vec::new();
    for &src in group {
        let x = &batch.samples[src];
        support.push(View {
            source: src,
            kind: ViewKind::Original,
            payload: x.clone(),
            mask: None,
        });
        let views: Vec<View> = (0..m)
            .map(|_| {
                let perm = rng.permutation(patches);
                let mut mask = vec![false; d];
                for &p in &perm[..n_masked] {
                    mask[p * patch_size..(p + 1) * patch_size].fill(true);
                }
                let payload = x
                    .iter()
                    .zip(&mask)
                    .map(|(&v, &hidden)| if hidden { MASK_TOKEN } else { v })
                    .collect();
                View {
                    source: src,
                    kind: ViewKind::Masked,
                    payload,
                    mask: Some(mask),
                }
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
