//! End-to-end shaping of one rollout group:
//! focus -> gate and compensate -> intra/inter factors -> shaped advantages.

use crate::compensation::compensate_series;
use crate::error::Result;
use crate::focus::focus_score_series;
use crate::grpo::group_advantages;
use crate::model::{validate_group, RolloutGroup, ShapedAdvantages, ShapedTrajectory, ShapingConfig};
use crate::reweight::{inter_factors, intra_factors, shape_advantages, trajectory_score};

/// Validates `group` and shapes its advantages.
pub fn shape_group(group: &RolloutGroup, cfg: &ShapingConfig) -> Result<ShapedAdvantages> {
    cfg.validate()?;
    validate_group(group)?;
    let eps = cfg.epsilon_smooth;
    let rho = group
        .trajectories
        .iter()
        .map(|t| focus_score_series(t, &group.visual, eps).map(|s| s.rho))
        .collect::<Result<Vec<_>>>()?;
    shape_from_focus(&group.group_id, &rho, &group.rewards(), cfg)
}

/// Shapes advantages from precomputed focus scores (`rho[i][t]`).
pub fn shape_from_focus(
    group_id: &str,
    rho: &[Vec<f64>],
    rewards: &[f64],
    cfg: &ShapingConfig,
) -> Result<ShapedAdvantages> {
    let eps = cfg.epsilon_smooth;
    let comp: Vec<_> = rho.iter().map(|r| compensate_series(r, cfg)).collect();
    let intra: Vec<_> = comp.iter().map(|c| intra_factors(&c.weight, eps)).collect();
    let scores: Vec<f64> = comp.iter().map(|c| trajectory_score(&c.weight)).collect();
    let inter = inter_factors(&scores, eps);
    let base = group_advantages(rewards, cfg.std_mode);
    let shaped = shape_advantages(&base.values, &intra, &inter, cfg)?;

    let trajectories = rho
        .iter()
        .zip(comp)
        .zip(intra)
        .zip(shaped)
        .enumerate()
        .map(|(i, (((rho, comp), intra), shaped_adv))| ShapedTrajectory {
            rho: rho.clone(),
            weight: comp.weight,
            gate: comp.gate,
            psi: if cfg.enable_intra {
                intra.psi
            } else {
                vec![0.0; rho.len()]
            },
            shaped_adv,
            traj_score: scores[i],
            phi: if cfg.enable_inter { inter.phi[i] } else { 0.0 },
            base_adv: base.values[i],
        })
        .collect();
    Ok(ShapedAdvantages {
        group_id: group_id.to_string(),
        degenerate_group: base.degenerate,
        trajectories,
    })
}
