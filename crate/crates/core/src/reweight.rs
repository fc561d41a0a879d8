//! Dual-grained advantage re-weighting.
//!
//! Token weights are min-max scaled and zero-centred inside each trajectory
//! (psi); cumulative trajectory scores are min-max scaled and zero-centred
//! across the group (phi). The shaped advantage is the base advantage times
//! `(1 + psi) * (1 + phi)`. Because both scaled quantities lie in [0, 1] the
//! centred factors lie in (-1, 1) and the modulators stay strictly positive,
//! so shaping never flips the sign of an advantage.

use crate::error::{Error, Result};
use crate::model::ShapingConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct IntraFactors {
    pub w_hat: Vec<f64>,
    pub psi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterFactors {
    pub s: Vec<f64>,
    pub s_hat: Vec<f64>,
    pub phi: Vec<f64>,
}

/// Min-max scaling with a smoothing term, followed by mean removal.
fn minmax_center(values: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    if values.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let denom = hi - lo + eps;
    let scaled: Vec<f64> = values.iter().map(|&v| (v - lo) / denom).collect();
    let mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
    let centered = scaled.iter().map(|&v| v - mean).collect();
    (scaled, centered)
}

pub fn intra_factors(weights: &[f64], eps: f64) -> IntraFactors {
    let (w_hat, psi) = minmax_center(weights, eps);
    IntraFactors { w_hat, psi }
}

/// Cumulative visual score of one trajectory.
pub fn trajectory_score(weights: &[f64]) -> f64 {
    weights.iter().sum()
}

pub fn inter_factors(scores: &[f64], eps: f64) -> InterFactors {
    let (s_hat, phi) = minmax_center(scores, eps);
    InterFactors {
        s: scores.to_vec(),
        s_hat,
        phi,
    }
}

/// Combines base advantages with the intra/inter factors. Disabled factors are
/// treated as zero.
pub fn shape_advantages(
    base_adv: &[f64],
    intra: &[IntraFactors],
    inter: &InterFactors,
    cfg: &ShapingConfig,
) -> Result<Vec<Vec<f64>>> {
    let g = base_adv.len();
    if intra.len() != g {
        return Err(Error::LengthMismatch {
            field: "intra_factors".into(),
            expected: g,
            found: intra.len(),
        });
    }
    if inter.phi.len() != g {
        return Err(Error::LengthMismatch {
            field: "inter_factors".into(),
            expected: g,
            found: inter.phi.len(),
        });
    }
    Ok(base_adv
        .iter()
        .zip(intra)
        .zip(&inter.phi)
        .map(|((&adv, f), &phi)| {
            let phi = if cfg.enable_inter { phi } else { 0.0 };
            f.psi
                .iter()
                .map(|&psi| {
                    let psi = if cfg.enable_intra { psi } else { 0.0 };
                    adv * (1.0 + psi) * (1.0 + phi)
                })
                .collect()
        })
        .collect())
}
