//! Visual prototype pooling and the per-token visual focus score.

use crate::error::{Error, Result};
use crate::model::{Trajectory, VisualContext, POOLING_TOLERANCE};

/// Cosine similarity and the focus score derived from it, one entry per token.
#[derive(Debug, Clone, PartialEq)]
pub struct FocusSeries {
    pub cosine: Vec<f64>,
    pub rho: Vec<f64>,
}

/// Weighted sum of the image-token states.
pub fn pool_prototype(image_states: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    let first = image_states.first().ok_or(Error::EmptyImageStates)?;
    if weights.len() != image_states.len() {
        return Err(Error::LengthMismatch {
            field: "pooling_weights".into(),
            expected: image_states.len(),
            found: weights.len(),
        });
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| w.is_nan() || *w < 0.0) || sum.is_nan() || (sum - 1.0).abs() > POOLING_TOLERANCE {
        return Err(Error::BadPoolingWeights { sum });
    }
    let d = first.len();
    let mut out = vec![0.0; d];
    for (k, (state, &alpha)) in image_states.iter().zip(weights).enumerate() {
        if state.len() != d {
            return Err(Error::DimensionMismatch {
                field: format!("image_states[{k}]"),
                expected: d,
                found: state.len(),
            });
        }
        for (o, &h) in out.iter_mut().zip(state) {
            *o += alpha * h;
        }
    }
    Ok(out)
}

/// `h·mu / (|h| |mu| + eps)`, clamped to [-1, 1]. Zero vectors give exactly 0.
pub fn cosine_sim(h: &[f64], mu: &[f64], eps: f64) -> Result<f64> {
    if h.len() != mu.len() {
        return Err(Error::DimensionMismatch {
            field: "hidden_state".into(),
            expected: mu.len(),
            found: h.len(),
        });
    }
    let mut dot = 0.0;
    let mut hh = 0.0;
    let mut mm = 0.0;
    for (&a, &b) in h.iter().zip(mu) {
        dot += a * b;
        hh += a * a;
        mm += b * b;
    }
    Ok((dot / (hh.sqrt() * mm.sqrt() + eps)).clamp(-1.0, 1.0))
}

/// Maps a cosine similarity onto [0, 1].
#[inline]
pub fn focus_from_cosine(cosine: f64) -> f64 {
    (cosine + 1.0) / 2.0
}

/// Focus scores of every token in `traj` against the context prototype.
pub fn focus_score_series(traj: &Trajectory, ctx: &VisualContext, eps: f64) -> Result<FocusSeries> {
    let cosine = traj
        .hidden_states
        .iter()
        .map(|h| cosine_sim(h, &ctx.prototype, eps))
        .collect::<Result<Vec<_>>>()?;
    let rho = cosine.iter().map(|&c| focus_from_cosine(c)).collect();
    Ok(FocusSeries { cosine, rho })
}
