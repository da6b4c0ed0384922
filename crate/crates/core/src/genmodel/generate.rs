//! Sampling both stages, and condition sweeps at a fixed latent code.

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;

use super::stage2::sections_for;
use super::{BranchSet, VaeStage1, VaeStage2};
use crate::error::{Error, Result};
use crate::ghd::{GhdSpace, GhdTokens};
use crate::markers::Marker;
use crate::util::stream_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub tokens: GhdTokens,
    /// Requested condition, for conditional models.
    pub condition: Option<Vec<f64>>,
    pub branches: BranchSet,
}

/// Draws attempted per requested shape before giving up.
const MAX_ATTEMPTS: usize = 10;

/// `count` complexes with their vessels. Stage I draws `z ~ N(0, I)` (and
/// `λ` from its condition model unless fixed); stage II is conditioned on the
/// stage-I tokens. Draws whose complex has no usable cross-sections are
/// redrawn from the same stream, so output is deterministic per seed.
pub fn generate(
    space: &GhdSpace,
    stage1: &VaeStage1,
    stage2: &VaeStage2,
    count: usize,
    seed: u64,
    lambda: Option<&[f64]>,
) -> Result<Vec<Generated>> {
    let mut rng = stream_rng(seed, "generate");
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > MAX_ATTEMPTS * count.max(1) {
            return Err(Error::Degenerate(format!("only {} of {count} generated complexes were usable", out.len())));
        }
        let (tokens, condition) = stage1.sample(1, lambda, &mut rng)?.remove(0);
        let sections = match sections_for(space, &tokens) {
            Ok(s) => s,
            Err(e) => {
                warn!("redrawing a generated complex: {e}");
                // keep the stream aligned with a successful draw
                for _ in 0..stage2.latent_dim {
                    let _: f64 = rng.sample(StandardNormal);
                }
                continue;
            }
        };
        let branches = stage2.sample(&tokens, &sections, &mut rng)?;
        out.push(Generated {
            tokens,
            condition,
            branches,
        });
    }
    Ok(out)
}

/// Decodes the posterior mean of `tokens` (encoded under `base`) with
/// `marker` replaced by each of `values`; every other condition stays at
/// `base`.
pub fn morph(stage1: &VaeStage1, tokens: &GhdTokens, base: &[f64], marker: Marker, values: &[f64]) -> Result<Vec<GhdTokens>> {
    let cm = stage1
        .condition
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("morphing needs a conditional stage-I model".into()))?;
    let slot = cm
        .markers
        .iter()
        .position(|&m| m == marker)
        .ok_or_else(|| Error::InvalidArgument(format!("marker {marker} is not among the model conditions")))?;
    let (z, _) = stage1.encode(tokens, Some(base))?;
    values
        .iter()
        .map(|&x| {
            let mut l = base.to_vec();
            l[slot] = x;
            stage1.decode(&z, Some(&l))
        })
        .collect()
}

/// `steps` evenly spaced values from `from` to `to` inclusive.
pub fn sweep(from: f64, to: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![from],
        _ => (0..steps).map(|i| from + (to - from) * i as f64 / (steps - 1) as f64).collect(),
    }
}
