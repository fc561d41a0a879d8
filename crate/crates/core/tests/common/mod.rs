#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;
use vgpo_core::{ImageTokens, RolloutGroup, Trajectory, VisualContext};

/// Shape of the random groups produced by [`random_group`].
#[derive(Debug, Clone, Copy)]
pub struct Fuzz {
    pub max_group: usize,
    pub max_len: usize,
    pub max_dim: usize,
    pub equal_lengths: bool,
    /// Optional fields (log-probs, attention splits, explicit pooling weights).
    pub extras: bool,
    /// Smallest hidden-state norm.
    pub min_norm: f64,
}

impl Default for Fuzz {
    fn default() -> Self {
        Self {
            max_group: 8,
            max_len: 16,
            max_dim: 8,
            equal_lengths: false,
            extras: false,
            min_norm: 0.0,
        }
    }
}

pub fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

pub fn gaussian(rng: &mut impl Rng, dim: usize, min_norm: f64) -> Vec<f64> {
    loop {
        let scale = 0.1 + 3.0 * rng.random::<f64>();
        let v: Vec<f64> = (0..dim)
            .map(|_| f32_exact(scale * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        if v.iter().map(|x| x * x).sum::<f64>().sqrt() >= min_norm.max(1e-3) {
            return v;
        }
    }
}

fn reward(rng: &mut impl Rng) -> f64 {
    match rng.random_range(0..3) {
        0 => rng.random_range(-2.0..2.0),
        _ => rng.random_range(0..2) as f64,
    }
}

fn random_visual(rng: &mut impl Rng, d: usize, fuzz: Fuzz) -> VisualContext {
    if rng.random_bool(0.5) {
        VisualContext::from_prototype(gaussian(rng, d, fuzz.min_norm))
    } else {
        let n = rng.random_range(1..=4);
        let states: Vec<Vec<f64>> = (0..n).map(|_| gaussian(rng, d, fuzz.min_norm)).collect();
        if fuzz.extras && rng.random_bool(0.5) {
            let raw: Vec<f64> = (0..n).map(|_| 0.05 + rng.random::<f64>()).collect();
            let total: f64 = raw.iter().sum();
            VisualContext::pooled(states, raw.iter().map(|w| w / total).collect()).unwrap()
        } else {
            VisualContext::mean_pooled(states).unwrap()
        }
    }
}

pub fn random_group(rng: &mut impl Rng, id: usize, fuzz: Fuzz) -> RolloutGroup {
    let d = rng.random_range(1..=fuzz.max_dim);
    let g = rng.random_range(1..=fuzz.max_group);
    let visual = loop {
        let v = random_visual(rng, d, fuzz);
        if v.prototype.iter().map(|x| x * x).sum::<f64>().sqrt() >= fuzz.min_norm {
            break v;
        }
    };
    let shared_len = rng.random_range(1..=fuzz.max_len);
    let trajectories = (0..g)
        .map(|_| {
            let len = if fuzz.equal_lengths {
                shared_len
            } else {
                rng.random_range(1..=fuzz.max_len)
            };
            let mut t = Trajectory::new((0..len).map(|_| gaussian(rng, d, fuzz.min_norm)).collect(), reward(rng));
            if fuzz.extras {
                let logp = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
                    (0..len)
                        .map(|_| {
                            if rng.random_bool(0.02) {
                                f64::NEG_INFINITY
                            } else {
                                -5.0 * rng.random::<f64>()
                            }
                        })
                        .collect()
                };
                if rng.random_bool(0.7) {
                    t.logp_old = Some(logp(rng));
                }
                if rng.random_bool(0.5) {
                    t.logp_new = Some(logp(rng));
                }
                if rng.random_bool(0.5) {
                    t.attn_split = Some(
                        (0..len)
                            .map(|_| [0, 1, 2].map(|_| f32_exact(rng.random::<f64>())))
                            .collect(),
                    );
                }
            }
            t
        })
        .collect();
    RolloutGroup {
        group_id: format!("fuzz-{id}"),
        visual,
        trajectories,
    }
}

/// Same group with every hidden and image state multiplied by `c`.
pub fn scaled(group: &RolloutGroup, c: f64) -> RolloutGroup {
    let mut out = group.clone();
    let scale = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x *= c);
    scale(&mut out.visual.prototype);
    if let Some(ImageTokens { states, .. }) = &mut out.visual.image_tokens {
        states.iter_mut().for_each(scale);
    }
    for t in &mut out.trajectories {
        t.hidden_states.iter_mut().for_each(scale);
    }
    out
}
