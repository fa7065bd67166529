//! Stochastic masking policies for text tokens, image patches and the
//! reconstruction block.
//!
//! Every policy is a pure function of its span, ratio and seed.

use std::ops::Range;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const TEXT_RATIO: f64 = 0.20;
pub const PATCH_RATIO: f64 = 0.50;
pub const BLOCK_B_RATIO: f64 = 0.70;
pub const NOISE_STD: f64 = 1.0;
/// Reconstruction spans shorter than this are masked entirely.
pub const SHORT_BLOCK: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MaskingError {
    #[error("cannot mask an empty span")]
    EmptySpan,
    #[error("span {0:?} has no position with a predecessor")]
    NoEligible(Range<usize>),
    #[error("ratio {0} outside (0, 1]")]
    Ratio(f64),
    #[error("noise std {0} must be finite and non-negative")]
    NoiseStd(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replacement {
    MaskToken,
    GaussianNoise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// Sorted, unique sequence positions.
    pub positions: Vec<usize>,
    /// Action for each entry of `positions`.
    pub replacement: Vec<Replacement>,
    /// Noise vector for each masked patch; empty for text plans.
    pub noise: Vec<Vec<f64>>,
    pub seed_record: u64,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.positions.binary_search(&pos).is_ok()
    }
}

/// `round(ratio * len)` with halves rounded up.
pub fn round_half_up(ratio: f64, len: usize) -> usize {
    (ratio * len as f64 + 0.5 + 1e-9).floor() as usize
}

fn check_ratio(ratio: f64) -> Result<(), MaskingError> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(MaskingError::Ratio(ratio))
    }
}

fn pick(candidates: &[usize], count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = index::sample(&mut rng, candidates.len(), count).into_iter().map(|i| candidates[i]).collect();
    out.sort_unstable();
    out
}

fn text_plan(positions: Vec<usize>, seed: u64) -> MaskPlan {
    MaskPlan { replacement: vec![Replacement::MaskToken; positions.len()], positions, noise: Vec::new(), seed_record: seed }
}

/// Text masking for shifted prediction: `max(1, round(ratio * len))`
/// positions, never sequence position 0.
pub fn mntp_mask(span: Range<usize>, ratio: f64, seed: u64) -> Result<MaskPlan, MaskingError> {
    check_ratio(ratio)?;
    if span.is_empty() {
        return Err(MaskingError::EmptySpan);
    }
    let eligible: Vec<usize> = span.clone().filter(|&p| p > 0).collect();
    if eligible.is_empty() {
        return Err(MaskingError::NoEligible(span));
    }
    let count = round_half_up(ratio, span.len()).max(1).min(eligible.len());
    Ok(text_plan(pick(&eligible, count, seed), seed))
}

/// Patch masking: `max(1, round(ratio * len))` patches replaced by
/// zero-mean Gaussian noise of the given std.
pub fn mae_mask(
    span: Range<usize>,
    ratio: f64,
    seed: u64,
    noise_std: f64,
    patch_dim: usize,
) -> Result<MaskPlan, MaskingError> {
    check_ratio(ratio)?;
    if span.is_empty() {
        return Err(MaskingError::EmptySpan);
    }
    let normal = Normal::new(0.0, noise_std).map_err(|_| MaskingError::NoiseStd(noise_std))?;
    let count = round_half_up(ratio, span.len()).max(1);
    let candidates: Vec<usize> = span.collect();
    let positions = pick(&candidates, count, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_6500_0000);
    let noise = positions.iter().map(|_| (0..patch_dim).map(|_| normal.sample(&mut rng)).collect()).collect();
    Ok(MaskPlan { replacement: vec![Replacement::GaussianNoise; positions.len()], positions, noise, seed_record: seed })
}

/// Reconstruction-block masking: everything when shorter than four tokens,
/// otherwise `round(ratio * len)` tokens.
pub fn blockb_mask(span: Range<usize>, ratio: f64, seed: u64) -> Result<MaskPlan, MaskingError> {
    check_ratio(ratio)?;
    if span.is_empty() {
        return Err(MaskingError::EmptySpan);
    }
    let candidates: Vec<usize> = span.collect();
    if candidates.len() < SHORT_BLOCK {
        return Ok(text_plan(candidates, seed));
    }
    let count = round_half_up(ratio, candidates.len());
    Ok(text_plan(pick(&candidates, count, seed), seed))
}
