//! Reconstruction and contrastive losses.

use crate::model::{lm_logits, BoundParams, ModelError};
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const MAE_WEIGHT: f64 = 0.5;
pub const TEMPERATURE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{rows} prediction rows for {targets} targets")]
    CountMismatch { rows: usize, targets: usize },
    #[error("contrastive batch of {0} has no negatives")]
    NoNegatives(usize),
    #[error("zero-norm embedding")]
    DegenerateEmbedding,
    #[error("embedding lengths differ ({0} vs {1})")]
    Dimension(usize, usize),
    #[error("weight {0} must be finite and non-negative")]
    Weight(f64),
}

impl From<TensorError> for ObjectiveError {
    fn from(e: TensorError) -> Self {
        Self::Model(ModelError::Tensor(e))
    }
}

/// A loss component that may be absent when nothing was masked.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub var: Option<Var>,
    pub count: usize,
}

impl LossTerm {
    pub const EMPTY: LossTerm = LossTerm { var: None, count: 0 };

    pub fn value(&self, g: &Graph<f64>) -> f64 {
        self.var.map_or(0.0, |v| g.value(v).data()[0])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mntp: f64,
    pub mae: f64,
    pub infonce: f64,
    pub masked_tokens: usize,
    pub masked_patches: usize,
    pub pairs: usize,
}

/// Mean cross-entropy of the LM head at `rows` against `targets`.
///
/// Callers choose the rows: the predecessor of each masked position for
/// shifted prediction, or the position itself for the plain masked variant.
pub fn mntp_loss(
    g: &mut Graph<f64>,
    p: &BoundParams,
    hidden: Var,
    rows: &[usize],
    targets: &[usize],
) -> Result<LossTerm, ObjectiveError> {
    if rows.len() != targets.len() {
        return Err(ObjectiveError::CountMismatch { rows: rows.len(), targets: targets.len() });
    }
    if rows.is_empty() {
        return Ok(LossTerm::EMPTY);
    }
    let logits = lm_logits(g, p, hidden, rows)?;
    Ok(LossTerm { var: Some(g.cross_entropy_from_logits(logits, targets)?), count: rows.len() })
}

/// Mean over patches of per-patch mean squared error.
pub fn mae_loss(g: &mut Graph<f64>, pred: Var, targets: &Tensor<f64>) -> Result<LossTerm, ObjectiveError> {
    let count = g.shape(pred)[0];
    if count == 0 && targets.numel() == 0 {
        return Ok(LossTerm::EMPTY);
    }
    let truth = g.constant(targets.clone())?;
    Ok(LossTerm { var: Some(g.mse(pred, truth)?), count })
}

pub fn warmup_total(mntp: f64, mae: f64, w: f64) -> f64 {
    mntp + w * mae
}

/// `mntp + w * mae`, skipping absent components.
pub fn warmup_loss(g: &mut Graph<f64>, mntp: LossTerm, mae: LossTerm, w: f64) -> Result<Option<Var>, ObjectiveError> {
    if !(w.is_finite() && w >= 0.0) {
        return Err(ObjectiveError::Weight(w));
    }
    let mae = match mae.var {
        Some(v) if w != 0.0 => Some(if w == 1.0 { v } else { g.scale(v, w)? }),
        _ => None,
    };
    Ok(match (mntp.var, mae) {
        (Some(a), Some(b)) => Some(g.add(a, b)?),
        (a, b) => a.or(b),
    })
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64, ObjectiveError> {
    if a.len() != b.len() {
        return Err(ObjectiveError::Dimension(a.len(), b.len()));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(ObjectiveError::DegenerateEmbedding);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity matrix `[B × B]` between query and target rows.
pub fn similarity_matrix(g: &mut Graph<f64>, queries: Var, targets: Var) -> Result<Var, ObjectiveError> {
    let q = g.l2_normalize(queries).map_err(degenerate)?;
    let t = g.l2_normalize(targets).map_err(degenerate)?;
    Ok(g.matmul_nt(q, t)?)
}

fn degenerate(e: TensorError) -> ObjectiveError {
    match e {
        TensorError::ZeroNorm { .. } => ObjectiveError::DegenerateEmbedding,
        other => other.into(),
    }
}

/// One-directional InfoNCE with in-batch negatives: row `i` of `queries`
/// is paired with row `i` of `targets`.
pub fn infonce(g: &mut Graph<f64>, queries: Var, targets: Var, tau: f64) -> Result<LossTerm, ObjectiveError> {
    let b = g.shape(queries)[0];
    if b < 2 {
        return Err(ObjectiveError::NoNegatives(b));
    }
    let sims = similarity_matrix(g, queries, targets)?;
    let logits = g.scale(sims, 1.0 / tau)?;
    let labels: Vec<usize> = (0..b).collect();
    Ok(LossTerm { var: Some(g.cross_entropy_from_logits(logits, &labels)?), count: b })
}

/// Mean diagonal minus mean off-diagonal entry of a square matrix.
pub fn diagonal_gap(sims: &Tensor<f64>) -> f64 {
    let b = sims.rows();
    if b < 2 {
        return 0.0;
    }
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..b {
        for (j, &s) in sims.row(i).iter().enumerate() {
            if i == j {
                diag += s;
            } else {
                off += s;
            }
        }
    }
    diag / b as f64 - off / (b * (b - 1)) as f64
}
