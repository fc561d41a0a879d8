//! Domain types shared by every stage of the shaping pipeline, plus
//! structural validation of incoming rollout data.
//!
//! All hidden-state activations are held as `f64` in memory. The trace wire
//! format stores them at 32-bit precision, so anything read from a trace is
//! exactly representable as `f32`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::focus::pool_prototype;

/// Tolerance on the pooling-weight sum and on the stored prototype.
pub const POOLING_TOLERANCE: f64 = 1e-9;

/// Image-token hidden states together with their pooling weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTokens {
    pub states: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// The visual side of one prompt: either raw image-token states (and the
/// prototype pooled from them) or a precomputed prototype alone.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualContext {
    pub image_tokens: Option<ImageTokens>,
    pub prototype: Vec<f64>,
}

impl VisualContext {
    /// Mean-pools `states` into a prototype.
    pub fn mean_pooled(states: Vec<Vec<f64>>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::EmptyImageStates);
        }
        let weights = uniform_weights(states.len());
        Self::pooled(states, weights)
    }

    /// Pools `states` with explicit weights.
    pub fn pooled(states: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let prototype = pool_prototype(&states, &weights)?;
        Ok(Self {
            image_tokens: Some(ImageTokens { states, weights }),
            prototype,
        })
    }

    pub fn from_prototype(prototype: Vec<f64>) -> Self {
        Self {
            image_tokens: None,
            prototype,
        }
    }

    pub fn dim(&self) -> usize {
        self.prototype.len()
    }
}

pub(crate) fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub hidden_states: Vec<Vec<f64>>,
    pub reward: f64,
    pub logp_old: Option<Vec<f64>>,
    pub logp_new: Option<Vec<f64>>,
    /// Per-step attention mass to (image, query, generated history).
    pub attn_split: Option<Vec<[f64; 3]>>,
}

impl Trajectory {
    pub fn new(hidden_states: Vec<Vec<f64>>, reward: f64) -> Self {
        Self {
            hidden_states,
            reward,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.hidden_states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden_states.is_empty()
    }
}

/// G responses sampled for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub group_id: String,
    pub visual: VisualContext,
    pub trajectories: Vec<Trajectory>,
}

impl RolloutGroup {
    pub fn dim(&self) -> usize {
        self.visual.dim()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.reward).collect()
    }
}

/// Position schedule applied to the compensation bonus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Linear,
    Exponential { power: f64 },
    Step,
}

impl Schedule {
    /// Evaluates the schedule at relative position `x = t / T`.
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Schedule::Linear => x,
            Schedule::Exponential { power } => x.powf(power),
            Schedule::Step => 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Schedule::Linear => "linear",
            Schedule::Exponential { .. } => "exponential",
            Schedule::Step => "step",
        }
    }

    /// Parses a schedule name; `power` applies to the exponential form only.
    pub fn parse(name: &str, power: f64) -> Result<Self> {
        match name {
            "linear" => Ok(Schedule::Linear),
            "exp" | "exponential" => Ok(Schedule::Exponential { power }),
            "step" => Ok(Schedule::Step),
            other => Err(Error::UnknownSchedule(other.to_string())),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Exponential { power } => write!(f, "exponential(p={power})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Which tokens are eligible for the compensation gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Span {
    #[default]
    Late,
    Full,
}

impl FromStr for Span {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "late" => Ok(Span::Late),
            "full" => Ok(Span::Full),
            other => Err(Error::config("span", format!("expected late|full, got `{other}`"))),
        }
    }
}

/// Standard-deviation estimator used for group advantages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdMode {
    /// Bessel-corrected (n - 1).
    #[default]
    Sample,
    Population,
}

impl FromStr for StdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(StdMode::Sample),
            "population" => Ok(StdMode::Population),
            other => Err(Error::config(
                "std-mode",
                format!("expected sample|population, got `{other}`"),
            )),
        }
    }
}

/// Hyper-parameters of the advantage shaper.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapingConfig {
    /// Compensation intensity.
    pub beta: f64,
    /// Fraction of the trajectory treated as its tail.
    pub gamma: f64,
    /// Top fraction of tail scores admitted by the gate.
    pub kappa: f64,
    pub schedule: Schedule,
    pub span: Span,
    /// Smoothing term shared by the cosine and min-max denominators.
    pub epsilon_smooth: f64,
    pub clip_low: f64,
    pub clip_high: f64,
    pub std_mode: StdMode,
    pub enable_intra: bool,
    pub enable_inter: bool,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self {
            beta: 0.3,
            gamma: 0.5,
            kappa: 0.2,
            schedule: Schedule::Linear,
            span: Span::Late,
            epsilon_smooth: 1e-8,
            clip_low: 0.2,
            clip_high: 0.28,
            std_mode: StdMode::Sample,
            enable_intra: true,
            enable_inter: true,
        }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::config("beta", format!("must be >= 0, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(
                "gamma",
                format!("must lie in [0, 1], got {}", self.gamma),
            ));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::config(
                "kappa",
                format!("must lie in (0, 1], got {}", self.kappa),
            ));
        }
        if let Schedule::Exponential { power } = self.schedule {
            if !(power.is_finite() && power > 0.0) {
                return Err(Error::config("power", format!("must be > 0, got {power}")));
            }
        }
        if !(self.epsilon_smooth.is_finite() && self.epsilon_smooth > 0.0) {
            return Err(Error::config(
                "epsilon",
                format!("must be > 0, got {}", self.epsilon_smooth),
            ));
        }
        if !(self.clip_low.is_finite() && self.clip_low < 1.0) {
            return Err(Error::config("eps-low", format!("must be < 1, got {}", self.clip_low)));
        }
        if !(self.clip_high.is_finite() && self.clip_high > 0.0) {
            return Err(Error::config(
                "eps-high",
                format!("must be > 0, got {}", self.clip_high),
            ));
        }
        Ok(())
    }
}

/// Output of the shaper for one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapedTrajectory {
    pub rho: Vec<f64>,
    pub weight: Vec<f64>,
    pub gate: Vec<bool>,
    pub psi: Vec<f64>,
    pub shaped_adv: Vec<f64>,
    pub traj_score: f64,
    pub phi: f64,
    pub base_adv: f64,
}

/// Output of the shaper for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapedAdvantages {
    pub group_id: String,
    pub degenerate_group: bool,
    pub trajectories: Vec<ShapedTrajectory>,
}

impl ShapedAdvantages {
    /// Checks the zero-sum, product and sign invariants; returns a
    /// description of the first breach.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let g = self.trajectories.len() as f64;
        let phi_sum: f64 = self.trajectories.iter().map(|t| t.phi).sum();
        if phi_sum.abs() > 1e-9 * g.max(1.0) {
            return Err(format!("group {}: sum(phi) = {phi_sum:e}", self.group_id));
        }
        for (i, t) in self.trajectories.iter().enumerate() {
            let n = t.psi.len() as f64;
            let psi_sum: f64 = t.psi.iter().sum();
            if psi_sum.abs() > 1e-9 * n.max(1.0) {
                return Err(format!(
                    "group {} trajectory {i}: sum(psi) = {psi_sum:e}",
                    self.group_id
                ));
            }
            for (k, (&adv, &psi)) in t.shaped_adv.iter().zip(&t.psi).enumerate() {
                let expected = t.base_adv * (1.0 + psi) * (1.0 + t.phi);
                if (adv - expected).abs() > 1e-12 * expected.abs().max(f64::MIN_POSITIVE) {
                    return Err(format!(
                        "group {} trajectory {i} token {k}: shaped {adv} != product {expected}",
                        self.group_id
                    ));
                }
                if adv.signum() != t.base_adv.signum() && !(adv == 0.0 && t.base_adv == 0.0) {
                    return Err(format!("group {} trajectory {i} token {k}: sign flip", self.group_id));
                }
            }
        }
        Ok(())
    }
}

fn check_finite(values: &[f64], field: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { field: field() })
    }
}

fn check_vectors(vectors: &[Vec<f64>], d: usize, name: &str) -> Result<()> {
    for (k, v) in vectors.iter().enumerate() {
        if v.len() != d {
            return Err(Error::dim(format!("{name}[{k}]"), d, v.len()));
        }
        check_finite(v, || format!("{name}[{k}]"))?;
    }
    Ok(())
}

/// Checks one trajectory against hidden dimension `d`.
pub fn validate_trajectory(traj: &Trajectory, d: usize) -> Result<()> {
    let t = traj.hidden_states.len();
    if t == 0 {
        return Err(Error::EmptyTrajectory {
            field: "hidden_states".into(),
        });
    }
    check_vectors(&traj.hidden_states, d, "hidden_states")?;
    if !traj.reward.is_finite() {
        return Err(Error::NonFinite { field: "reward".into() });
    }
    for (name, logp) in [("logp_old", &traj.logp_old), ("logp_new", &traj.logp_new)] {
        if let Some(lp) = logp {
            if lp.len() != t {
                return Err(Error::len(name, t, lp.len()));
            }
            // -inf is a legal log-probability.
            if lp.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(Error::NonFinite { field: name.into() });
            }
        }
    }
    if let Some(split) = &traj.attn_split {
        if split.len() != t {
            return Err(Error::len("attn_split", t, split.len()));
        }
        if split.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                field: "attn_split".into(),
            });
        }
    }
    Ok(())
}

/// Checks a visual context for internal consistency.
pub fn validate_visual(ctx: &VisualContext) -> Result<()> {
    let d = ctx.prototype.len();
    if d == 0 {
        return Err(Error::EmptyTrajectory {
            field: "prototype".into(),
        });
    }
    check_finite(&ctx.prototype, || "prototype".into())?;
    if let Some(img) = &ctx.image_tokens {
        if img.states.is_empty() {
            return Err(Error::EmptyImageStates);
        }
        check_vectors(&img.states, d, "image_states")?;
        if img.weights.len() != img.states.len() {
            return Err(Error::len("pooling_weights", img.states.len(), img.weights.len()));
        }
        let sum: f64 = img.weights.iter().sum();
        if img.weights.iter().any(|w| w.is_nan() || *w < 0.0) || sum.is_nan() || (sum - 1.0).abs() > POOLING_TOLERANCE {
            return Err(Error::BadPoolingWeights { sum });
        }
        let pooled = pool_prototype(&img.states, &img.weights)?;
        if pooled
            .iter()
            .zip(&ctx.prototype)
            .any(|(a, b)| (a - b).is_nan() || (a - b).abs() > POOLING_TOLERANCE)
        {
            return Err(Error::PrototypeMismatch);
        }
    }
    Ok(())
}

/// Checks a whole group: the visual context and every trajectory must agree
/// on one hidden dimension.
pub fn validate_group(group: &RolloutGroup) -> Result<()> {
    validate_visual(&group.visual)?;
    if group.trajectories.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let d = group.dim();
    for (i, traj) in group.trajectories.iter().enumerate() {
        validate_trajectory(traj, d).map_err(|e| prefix(e, &format!("trajectories[{i}].")))?;
    }
    Ok(())
}

fn prefix(err: Error, p: &str) -> Error {
    match err {
        Error::DimensionMismatch { field, expected, found } => Error::DimensionMismatch {
            field: format!("{p}{field}"),
            expected,
            found,
        },
        Error::LengthMismatch { field, expected, found } => Error::LengthMismatch {
            field: format!("{p}{field}"),
            expected,
            found,
        },
        Error::EmptyTrajectory { field } => Error::EmptyTrajectory {
            field: format!("{p}{field}"),
        },
        Error::NonFinite { field } => Error::NonFinite {
            field: format!("{p}{field}"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(t: usize, d: usize) -> Trajectory {
        Trajectory::new(vec![vec![0.5; d]; t], 1.0)
    }

    fn group(dims: &[usize]) -> RolloutGroup {
        RolloutGroup {
            group_id: "g".into(),
            visual: VisualContext::mean_pooled(vec![vec![1.0; 4]; 3]).unwrap(),
            trajectories: dims.iter().map(|&d| traj(3, d)).collect(),
        }
    }

    #[test]
    fn well_formed_trajectory_passes() {
        assert_eq!(validate_trajectory(&traj(3, 4), 4), Ok(()));
    }

    #[test]
    fn wrong_dimension_is_reported() {
        let err = validate_trajectory(&traj(3, 4), 8).unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                expected: 8,
                found: 4,
                ..
            }
        ));
    }

    #[test]
    fn short_logp_is_a_length_mismatch() {
        let mut t = traj(3, 4);
        t.logp_old = Some(vec![-1.0, -1.0]);
        let err = validate_trajectory(&t, 4).unwrap_err();
        assert_eq!(err, Error::len("logp_old", 3, 2));
    }

    #[test]
    fn empty_trajectory_is_rejected() {
        let err = validate_trajectory(&traj(0, 4), 4).unwrap_err();
        assert!(matches!(err, Error::EmptyTrajectory { .. }));
    }

    #[test]
    fn uniform_group_passes() {
        assert_eq!(validate_group(&group(&[4, 4])), Ok(()));
    }

    #[test]
    fn bad_pooling_weights() {
        let mut g = group(&[4]);
        g.visual.image_tokens = Some(ImageTokens {
            states: vec![vec![1.0; 4]; 2],
            weights: vec![0.5, 0.6],
        });
        assert!(matches!(validate_group(&g), Err(Error::BadPoolingWeights { .. })));
    }

    #[test]
    fn mixed_dims_in_group() {
        let err = validate_group(&group(&[4, 8])).unwrap_err();
        match err {
            Error::DimensionMismatch { field, .. } => {
                assert!(field.starts_with("trajectories[1]"), "{field}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = ShapingConfig::default();
        assert_eq!(cfg.validate(), Ok(()));
        assert_eq!((cfg.beta, cfg.gamma, cfg.kappa), (0.3, 0.5, 0.2));
    }

    #[test]
    fn config_ranges() {
        let bad = [
            ShapingConfig {
                beta: -1.0,
                ..Default::default()
            },
            ShapingConfig {
                kappa: 0.0,
                ..Default::default()
            },
            ShapingConfig {
                gamma: 1.5,
                ..Default::default()
            },
            ShapingConfig {
                clip_low: 1.0,
                ..Default::default()
            },
            ShapingConfig {
                clip_high: 0.0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn unknown_schedule() {
        assert_eq!(
            Schedule::parse("cosine", 1.0),
            Err(Error::UnknownSchedule("cosine".into()))
        );
        assert_eq!(
            Schedule::parse("exponential", 2.0),
            Ok(Schedule::Exponential { power: 2.0 })
        );
    }
}
