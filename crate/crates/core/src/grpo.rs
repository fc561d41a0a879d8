//! Group-relative advantages, importance ratios and the asymmetric clipped
//! surrogate objective (no KL term).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StdMode;

/// How per-token surrogate terms are averaged into one objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossAgg {
    /// Mean over tokens within each trajectory, then over trajectories.
    #[default]
    TrajectoryMean,
    /// One mean over every token.
    TokenMean,
}

impl std::str::FromStr for LossAgg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "traj" | "trajectory-mean" => Ok(LossAgg::TrajectoryMean),
            "token" | "token-mean" => Ok(LossAgg::TokenMean),
            other => Err(Error::InvalidConfig {
                key: "loss-agg".into(),
                reason: format!("expected traj|token, got `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipConfig {
    pub clip_low: f64,
    pub clip_high: f64,
    pub loss_agg: LossAgg,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            clip_low: 0.2,
            clip_high: 0.28,
            loss_agg: LossAgg::TrajectoryMean,
        }
    }
}

impl ClipConfig {
    /// Symmetric clipping at `eps` (plain GRPO).
    pub fn symmetric(eps: f64) -> Self {
        Self {
            clip_low: eps,
            clip_high: eps,
            ..Default::default()
        }
    }

    pub fn lower(&self) -> f64 {
        1.0 - self.clip_low
    }

    pub fn upper(&self) -> f64 {
        1.0 + self.clip_high
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupAdvantages {
    pub values: Vec<f64>,
    /// True when every reward is equal (or G = 1); all values are then zero.
    pub degenerate: bool,
}

/// Standardises rewards within a group.
pub fn group_advantages(rewards: &[f64], std_mode: StdMode) -> GroupAdvantages {
    let g = rewards.len();
    let all_equal = rewards.windows(2).all(|w| w[0] == w[1]);
    if g < 2 || all_equal {
        return GroupAdvantages {
            values: vec![0.0; g],
            degenerate: true,
        };
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let ss: f64 = rewards.iter().map(|r| (r - mean) * (r - mean)).sum();
    let denom = match std_mode {
        StdMode::Sample => (g - 1) as f64,
        StdMode::Population => g as f64,
    };
    let std = (ss / denom).sqrt();
    if std == 0.0 {
        return GroupAdvantages {
            values: vec![0.0; g],
            degenerate: true,
        };
    }
    GroupAdvantages {
        values: rewards.iter().map(|r| (r - mean) / std).collect(),
        degenerate: false,
    }
}

/// `exp(logp_new - logp_old)` per token.
pub fn importance_ratios(logp_new: Option<&[f64]>, logp_old: Option<&[f64]>) -> Result<Vec<f64>> {
    let new = logp_new.ok_or_else(|| Error::MissingLogProbs {
        field: "logp_new".into(),
    })?;
    let old = logp_old.ok_or_else(|| Error::MissingLogProbs {
        field: "logp_old".into(),
    })?;
    if new.len() != old.len() {
        return Err(Error::LengthMismatch {
            field: "logp_new".into(),
            expected: old.len(),
            found: new.len(),
        });
    }
    Ok(new.iter().zip(old).map(|(n, o)| (n - o).exp()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateResult {
    pub objective: f64,
    /// Derivative of the aggregated objective w.r.t. each token's log-prob
    /// under the current policy (aggregation weight included).
    pub per_token_grad_logp: Vec<Vec<f64>>,
    /// Tokens through which no gradient flows.
    pub clipped_mask: Vec<Vec<bool>>,
}

/// Per-token clipped term and whether the unclipped branch is active.
#[inline]
pub fn clipped_term(ratio: f64, adv: f64, cfg: &ClipConfig) -> (f64, bool) {
    let clipped = ratio.clamp(cfg.lower(), cfg.upper());
    let unclipped_term = ratio * adv;
    let clipped_term = clipped * adv;
    if unclipped_term <= clipped_term {
        // On a tie the unclipped branch carries the gradient.
        (unclipped_term, adv != 0.0)
    } else {
        (clipped_term, false)
    }
}

/// Clipped surrogate over a batch of trajectories. `ratios` and `advantages`
/// are indexed `[trajectory][token]`.
pub fn clipped_surrogate(ratios: &[Vec<f64>], advantages: &[Vec<f64>], cfg: &ClipConfig) -> Result<SurrogateResult> {
    if ratios.len() != advantages.len() {
        return Err(Error::LengthMismatch {
            field: "advantages".into(),
            expected: ratios.len(),
            found: advantages.len(),
        });
    }
    for (i, (r, a)) in ratios.iter().zip(advantages).enumerate() {
        if r.len() != a.len() {
            return Err(Error::LengthMismatch {
                field: format!("advantages[{i}]"),
                expected: r.len(),
                found: a.len(),
            });
        }
    }
    let n_traj = ratios.iter().filter(|r| !r.is_empty()).count();
    let n_tok: usize = ratios.iter().map(Vec::len).sum();

    let mut objective = 0.0;
    let mut grads = Vec::with_capacity(ratios.len());
    let mut mask = Vec::with_capacity(ratios.len());
    for (r, a) in ratios.iter().zip(advantages) {
        let scale = match cfg.loss_agg {
            LossAgg::TrajectoryMean => 1.0 / (n_traj as f64 * r.len() as f64),
            LossAgg::TokenMean => 1.0 / n_tok as f64,
        };
        let mut g = Vec::with_capacity(r.len());
        let mut m = Vec::with_capacity(r.len());
        for (&ratio, &adv) in r.iter().zip(a) {
            let (term, active) = clipped_term(ratio, adv, cfg);
            objective += scale * term;
            // d(r A)/d logp = r A
            g.push(if active { scale * ratio * adv } else { 0.0 });
            m.push(!active);
        }
        grads.push(g);
        mask.push(m);
    }
    Ok(SurrogateResult {
        objective,
        per_token_grad_logp: grads,
        clipped_mask: mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn advantages_sample_std() {
        let a = group_advantages(&[1.0, 0.0, 0.0, 0.0], StdMode::Sample);
        assert!(!a.degenerate);
        for (x, y) in a.values.iter().zip([1.5, -0.5, -0.5, -0.5]) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn advantages_population_std() {
        let a = group_advantages(&[1.0, 1.0, 0.0, 0.0], StdMode::Population);
        for (x, y) in a.values.iter().zip([1.0, 1.0, -1.0, -1.0]) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn advantages_degenerate() {
        let a = group_advantages(&[1.0; 4], StdMode::Sample);
        assert!(a.degenerate);
        assert_eq!(a.values, vec![0.0; 4]);
        assert!(group_advantages(&[0.3], StdMode::Sample).degenerate);
        assert!(group_advantages(&[0.1, 0.1, 0.1], StdMode::Population).degenerate);
    }

    #[test]
    fn ratio_examples() {
        let same = importance_ratios(Some(&[-1.0, -2.0]), Some(&[-1.0, -2.0])).unwrap();
        assert_eq!(same, vec![1.0, 1.0]);
        let two = importance_ratios(Some(&[2f64.ln()]), Some(&[0.0])).unwrap();
        assert_abs_diff_eq!(two[0], 2.0, epsilon = 1e-12);
        let r = importance_ratios(Some(&[-0.5, 0.5]), Some(&[0.0, 0.0])).unwrap();
        assert_abs_diff_eq!(r[0], 0.606_530_659_712_633_4, epsilon = 1e-12);
        assert_abs_diff_eq!(r[1], 1.648_721_270_700_128_2, epsilon = 1e-12);
        assert!(matches!(
            importance_ratios(None, Some(&[0.0])),
            Err(Error::MissingLogProbs { .. })
        ));
    }

    #[test]
    fn clip_examples() {
        let cfg = ClipConfig::default();
        assert_eq!(clipped_term(1.0, 1.0, &cfg), (1.0, true));
        let (t, active) = clipped_term(1.5, 1.0, &cfg);
        assert_abs_diff_eq!(t, 1.28, epsilon = 1e-12);
        assert!(!active);
        let (t, active) = clipped_term(0.5, -1.0, &cfg);
        assert_abs_diff_eq!(t, -0.8, epsilon = 1e-12);
        assert!(!active);

        let res = clipped_surrogate(&[vec![1.5]], &[vec![1.0]], &cfg).unwrap();
        assert_eq!(res.per_token_grad_logp[0][0], 0.0);
        assert!(res.clipped_mask[0][0]);
    }

    #[test]
    fn aggregation_modes() {
        let ratios = vec![vec![1.0, 1.0], vec![1.0]];
        let adv = vec![vec![1.0, 1.0], vec![4.0]];
        let traj = clipped_surrogate(&ratios, &adv, &ClipConfig::default()).unwrap();
        assert_abs_diff_eq!(traj.objective, 2.5, epsilon = 1e-12);
        let token = ClipConfig {
            loss_agg: LossAgg::TokenMean,
            ..Default::default()
        };
        let tok = clipped_surrogate(&ratios, &adv, &token).unwrap();
        assert_abs_diff_eq!(tok.objective, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn surrogate_length_mismatch() {
        let err = clipped_surrogate(&[vec![1.0, 1.0]], &[vec![1.0]], &ClipConfig::default());
        assert!(matches!(err, Err(Error::LengthMismatch { .. })));
    }

    proptest! {
        #[test]
        fn standardisation_invariance(
            rewards in prop::collection::vec(-3.0f64..3.0, 2..16),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let a = group_advantages(&rewards, StdMode::Sample);
            let moved: Vec<f64> = rewards.iter().map(|r| r * scale + shift).collect();
            let b = group_advantages(&moved, StdMode::Sample);
            if !a.degenerate && !b.degenerate {
                for (x, y) in a.values.iter().zip(&b.values) {
                    prop_assert!((x - y).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn permutation_equivariance(rewards in prop::collection::vec(0.0f64..1.0, 2..12), rot in 0usize..12) {
            let k = rot % rewards.len();
            let mut rotated = rewards.clone();
            rotated.rotate_left(k);
            let mut a = group_advantages(&rewards, StdMode::Sample).values;
            a.rotate_left(k);
            let b = group_advantages(&rotated, StdMode::Sample).values;
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn identity_ratios_give_advantage_mean(adv in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 1..8), 1..6)) {
            let ratios: Vec<Vec<f64>> = adv.iter().map(|a| vec![1.0; a.len()]).collect();
            let res = clipped_surrogate(&ratios, &adv, &ClipConfig::default()).unwrap();
            let expected = adv.iter().map(|a| a.iter().sum::<f64>() / a.len() as f64).sum::<f64>() / adv.len() as f64;
            prop_assert!((res.objective - expected).abs() <= 1e-12);
            for (m, a) in res.clipped_mask.iter().flatten().zip(adv.iter().flatten()) {
                prop_assert_eq!(*m, *a == 0.0);
            }
        }
    }
}
