//! Analysis tools for visual forgetting: per-step attention allocation,
//! late/early accumulation ratios split by outcome, and the correlation
//! between focus scores and image attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::focus::focus_score_series;
use crate::model::{RolloutGroup, Trajectory, VisualContext};

/// Per-step attention fractions (image, query, generated history).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationCurve {
    pub steps: Vec<[f64; 3]>,
    /// Steps whose total mass was zero; those rows are all zeros.
    pub zero_mass: Vec<bool>,
}

pub fn attention_allocation(attn_split: Option<&[[f64; 3]]>) -> Result<AllocationCurve> {
    let split = attn_split.ok_or(Error::MissingAttentionSplit)?;
    let mut steps = Vec::with_capacity(split.len());
    let mut zero_mass = Vec::with_capacity(split.len());
    for (step, row) in split.iter().enumerate() {
        if row.iter().any(|v| *v < 0.0) {
            return Err(Error::NegativeMass { step });
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            steps.push(row.map(|v| v / total));
            zero_mass.push(false);
        } else {
            steps.push([0.0; 3]);
            zero_mass.push(true);
        }
    }
    Ok(AllocationCurve { steps, zero_mass })
}

/// Mass after the split point divided by mass up to it, with positions
/// 1-based and the split at `split_point * T`. `None` when the early mass
/// is zero.
pub fn late_early_ratio(series: &[f64], split_point: f64) -> Option<f64> {
    let cut = split_point * series.len() as f64;
    let (mut early, mut late) = (0.0, 0.0);
    for (k, v) in series.iter().enumerate() {
        if (k + 1) as f64 <= cut {
            early += v;
        } else {
            late += v;
        }
    }
    (early != 0.0).then(|| late / early)
}

/// Which per-token series a ratio is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    #[default]
    Rho,
    ImageAttention,
}

impl std::str::FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rho" => Ok(Selector::Rho),
            "image_attention" | "image-attention" => Ok(Selector::ImageAttention),
            other => Err(Error::InvalidConfig {
                key: "selector".into(),
                reason: format!("expected rho|image_attention, got `{other}`"),
            }),
        }
    }
}

impl Selector {
    pub fn name(&self) -> &'static str {
        match self {
            Selector::Rho => "rho",
            Selector::ImageAttention => "image_attention",
        }
    }

    /// Extracts the selected series from one trajectory.
    pub fn series(&self, traj: &Trajectory, ctx: &VisualContext, eps: f64) -> Result<Vec<f64>> {
        match self {
            Selector::Rho => Ok(focus_score_series(traj, ctx, eps)?.rho),
            Selector::ImageAttention => traj
                .attn_split
                .as_ref()
                .map(|s| s.iter().map(|row| row[0]).collect())
                .ok_or(Error::MissingAttentionSplit),
        }
    }

    pub fn available(&self, traj: &Trajectory) -> bool {
        match self {
            Selector::Rho => true,
            Selector::ImageAttention => traj.attn_split.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioEntry {
    pub group_id: String,
    pub trajectory: usize,
    pub reward: f64,
    /// `None` marks an undefined ratio (zero early mass).
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub count: usize,
    pub undefined: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub selector: Selector,
    pub split_point: f64,
    pub entries: Vec<RatioEntry>,
    /// Trajectories with positive reward; `None` when there are none.
    pub correct: Option<PartitionStats>,
    /// Trajectories with non-positive reward; `None` when there are none.
    pub incorrect: Option<PartitionStats>,
}

pub const HISTOGRAM_BINS: usize = 20;

fn median(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2]),
        _ => Some((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0),
    }
}

fn histogram(values: &[f64], upper: f64) -> Histogram {
    let upper = if upper > 0.0 { upper } else { 1.0 };
    let width = upper / HISTOGRAM_BINS as f64;
    let edges = (0..=HISTOGRAM_BINS).map(|k| k as f64 * width).collect();
    let mut counts = vec![0; HISTOGRAM_BINS];
    for &v in values {
        let bin = ((v / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    Histogram { edges, counts }
}

fn partition(entries: &[&RatioEntry], upper: f64) -> Option<PartitionStats> {
    if entries.is_empty() {
        return None;
    }
    let mut defined: Vec<f64> = entries.iter().filter_map(|e| e.ratio).collect();
    defined.sort_by(f64::total_cmp);
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Some(PartitionStats {
        count: entries.len(),
        undefined: entries.len() - defined.len(),
        mean,
        median: median(&defined),
        histogram: histogram(&defined, upper),
    })
}

/// Streaming builder for a [`RatioReport`].
#[derive(Debug, Clone)]
pub struct RatioAccumulator {
    selector: Selector,
    split_point: f64,
    eps: f64,
    entries: Vec<RatioEntry>,
}

impl RatioAccumulator {
    pub fn new(selector: Selector, split_point: f64, eps: f64) -> Self {
        Self {
            selector,
            split_point,
            eps,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, group: &RolloutGroup) -> Result<()> {
        for (i, traj) in group.trajectories.iter().enumerate() {
            let series = self.selector.series(traj, &group.visual, self.eps)?;
            self.entries.push(RatioEntry {
                group_id: group.group_id.clone(),
                trajectory: i,
                reward: traj.reward,
                ratio: late_early_ratio(&series, self.split_point),
            });
        }
        Ok(())
    }

    pub fn finish(self) -> RatioReport {
        let upper = self.entries.iter().filter_map(|e| e.ratio).fold(0.0, f64::max);
        let (correct, incorrect): (Vec<&RatioEntry>, Vec<&RatioEntry>) =
            self.entries.iter().partition(|e| e.reward > 0.0);
        RatioReport {
            selector: self.selector,
            split_point: self.split_point,
            correct: partition(&correct, upper),
            incorrect: partition(&incorrect, upper),
            entries: self.entries,
        }
    }
}

/// Late/early ratios over `groups`, partitioned by outcome.
pub fn ratio_distribution<'a>(
    groups: impl IntoIterator<Item = &'a RolloutGroup>,
    selector: Selector,
    split_point: f64,
    eps: f64,
) -> Result<RatioReport> {
    let mut acc = RatioAccumulator::new(selector, split_point, eps);
    for g in groups {
        acc.push(g)?;
    }
    Ok(acc.finish())
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            field: "y".into(),
            expected: x.len(),
            found: y.len(),
        });
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::ConstantSequence);
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantSequence);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation between a trajectory's focus scores and its per-step image
/// attention mass.
pub fn focus_attention_correlation(traj: &Trajectory, ctx: &VisualContext, eps: f64) -> Result<f64> {
    let rho = Selector::Rho.series(traj, ctx, eps)?;
    let attn = Selector::ImageAttention.series(traj, ctx, eps)?;
    pearson(&rho, &attn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn allocation_examples() {
        let c = attention_allocation(Some(&[[2.0, 1.0, 1.0], [0.0, 0.0, 0.0], [1.0, 3.0, 4.0]])).unwrap();
        assert_eq!(c.steps[0], [0.5, 0.25, 0.25]);
        assert_eq!(c.zero_mass, vec![false, true, false]);
        assert_eq!(c.steps[2], [0.125, 0.375, 0.5]);
        assert_eq!(attention_allocation(None), Err(Error::MissingAttentionSplit));
        assert_eq!(
            attention_allocation(Some(&[[1.0, -1.0, 0.0]])),
            Err(Error::NegativeMass { step: 0 })
        );
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(late_early_ratio(&[0.3; 6], 0.5), Some(1.0));
        assert_eq!(late_early_ratio(&[1.0, 1.0, 0.0, 0.0], 0.5), Some(0.0));
        assert_abs_diff_eq!(
            late_early_ratio(&[0.2, 0.4, 0.6, 0.8], 0.5).unwrap(),
            1.4 / 0.6,
            epsilon = 1e-12
        );
        assert_eq!(late_early_ratio(&[0.0, 0.0, 1.0], 0.5), None);
    }

    #[test]
    fn pearson_examples() {
        assert_abs_diff_eq!(
            pearson(&[1.0, 2.0, 5.0], &[1.0, 2.0, 5.0]).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            pearson(&[1.0, 2.0, 5.0], &[-1.0, -2.0, -5.0]).unwrap(),
            -1.0,
            epsilon = 1e-12
        );
        // cov = 1.5, var_x = 1, var_y = 7/3 (sample); r = 1.5 / sqrt(7/3)
        assert_abs_diff_eq!(
            pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap(),
            0.981_980_506_061_965_7,
            epsilon = 1e-9
        );
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::ConstantSequence));
    }

    fn traj_with_split(image: &[f64], reward: f64) -> Trajectory {
        Trajectory {
            hidden_states: vec![vec![1.0, 0.0]; image.len()],
            reward,
            attn_split: Some(image.iter().map(|&v| [v, 1.0, 1.0]).collect()),
            ..Default::default()
        }
    }

    #[test]
    fn distribution_partitions_by_reward() {
        let group = RolloutGroup {
            group_id: "g".into(),
            visual: VisualContext::from_prototype(vec![1.0, 0.0]),
            trajectories: vec![
                traj_with_split(&[1.0, 1.0, 2.0, 2.0], 1.0),
                traj_with_split(&[2.0, 2.0, 1.0, 1.0], 0.0),
            ],
        };
        let r = ratio_distribution([&group], Selector::ImageAttention, 0.5, 1e-8).unwrap();
        assert_eq!(r.correct.as_ref().unwrap().mean, Some(2.0));
        assert_eq!(r.incorrect.as_ref().unwrap().mean, Some(0.5));

        let only_correct = RolloutGroup {
            trajectories: vec![traj_with_split(&[1.0, 1.0, 2.0, 2.0], 1.0)],
            ..group.clone()
        };
        let r = ratio_distribution([&only_correct], Selector::Rho, 0.5, 1e-8).unwrap();
        assert!(r.incorrect.is_none());
        assert_abs_diff_eq!(r.correct.unwrap().mean.unwrap(), 1.0, epsilon = 1e-12);

        let mut missing = group.clone();
        missing.trajectories[1].attn_split = None;
        assert_eq!(
            ratio_distribution([&missing], Selector::ImageAttention, 0.5, 1e-8),
            Err(Error::MissingAttentionSplit)
        );
    }

    #[test]
    fn identical_trajectories_have_equal_partition_means() {
        let group = RolloutGroup {
            group_id: "g".into(),
            visual: VisualContext::from_prototype(vec![1.0, 0.0]),
            trajectories: vec![
                traj_with_split(&[0.4, 0.3, 0.2, 0.1], 1.0),
                traj_with_split(&[0.4, 0.3, 0.2, 0.1], 0.0),
            ],
        };
        let r = ratio_distribution([&group], Selector::ImageAttention, 0.5, 1e-8).unwrap();
        assert_eq!(r.correct.unwrap().mean, r.incorrect.unwrap().mean);
    }

    proptest! {
        #[test]
        fn ratio_scale_invariant(series in prop::collection::vec(0.01f64..1.0, 2..30), c in 0.1f64..10.0) {
            let a = late_early_ratio(&series, 0.5).unwrap();
            let scaled: Vec<f64> = series.iter().map(|v| v * c).collect();
            let b = late_early_ratio(&scaled, 0.5).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }

        #[test]
        fn pearson_affine_invariant(
            x in prop::collection::vec(-5.0f64..5.0, 3..20),
            noise in prop::collection::vec(-1.0f64..1.0, 20),
            slope in 0.1f64..5.0,
            shift in -3.0f64..3.0,
        ) {
            let y: Vec<f64> = x.iter().zip(&noise).map(|(a, n)| a + n).collect();
            if let Ok(r) = pearson(&x, &y) {
                let mapped: Vec<f64> = x.iter().map(|v| slope * v + shift).collect();
                let r2 = pearson(&mapped, &y).unwrap();
                prop_assert!((r - r2).abs() <= 1e-9);
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn allocation_rows_sum_to_one(rows in prop::collection::vec([0.0f64..5.0, 0.0f64..5.0, 0.0f64..5.0], 1..30)) {
            let c = attention_allocation(Some(&rows)).unwrap();
            for (row, zero) in c.steps.iter().zip(&c.zero_mass) {
                if !zero {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                }
            }
        }
    }
}
