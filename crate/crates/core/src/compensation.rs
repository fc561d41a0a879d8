//! Visual attention compensation: a tail gate that admits the highest-focus
//! late tokens, and a position schedule that amplifies them.

use crate::model::{ShapingConfig, Span};

/// Compensated weights and the gate that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensatedSeries {
    pub weight: Vec<f64>,
    pub gate: Vec<bool>,
    /// `None` when the candidate set was empty.
    pub tail_threshold: Option<f64>,
    /// First 1-based index inside the tail (`T + 1` when the tail is empty).
    pub tail_start: usize,
}

/// Whether 1-based position `t` lies in the tail `t > (1 - gamma) T`.
#[inline]
pub fn in_tail(t: usize, len: usize, gamma: f64) -> bool {
    t as f64 > (1.0 - gamma) * len as f64
}

/// First 1-based tail index.
pub fn tail_start(len: usize, gamma: f64) -> usize {
    (1..=len).find(|&t| in_tail(t, len, gamma)).unwrap_or(len + 1)
}

/// Number of values admitted from a candidate set of size `m`: `ceil(kappa m)`,
/// at least one.
pub fn admitted_count(kappa: f64, m: usize) -> usize {
    // Products such as 0.3 * 10 land one ulp above the integer.
    let raw = (kappa * m as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(m)
}

/// The `ceil(kappa m)`-th largest value of `values`, or `None` if empty.
pub fn top_fraction_threshold(values: &[f64], kappa: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Some(sorted[admitted_count(kappa, sorted.len()) - 1])
}

/// Threshold for the top `kappa` fraction of the tail `t > (1 - gamma) T`.
pub fn tail_threshold(rho: &[f64], gamma: f64, kappa: f64) -> Option<f64> {
    let len = rho.len();
    let tail: Vec<f64> = rho
        .iter()
        .enumerate()
        .filter(|(k, _)| in_tail(k + 1, len, gamma))
        .map(|(_, &r)| r)
        .collect();
    top_fraction_threshold(&tail, kappa)
}

fn gate_with_threshold(rho: &[f64], cfg: &ShapingConfig) -> (Vec<bool>, Option<f64>) {
    let len = rho.len();
    let threshold = match cfg.span {
        Span::Late => tail_threshold(rho, cfg.gamma, cfg.kappa),
        Span::Full => top_fraction_threshold(rho, cfg.kappa),
    };
    let gate = match threshold {
        None => vec![false; len],
        Some(q) => rho
            .iter()
            .enumerate()
            .map(|(k, &r)| {
                let eligible = cfg.span == Span::Full || in_tail(k + 1, len, cfg.gamma);
                eligible && r >= q
            })
            .collect(),
    };
    (gate, threshold)
}

/// Gate mask: open where the token is eligible and its score reaches the
/// threshold (ties pass).
pub fn gate_mask(rho: &[f64], cfg: &ShapingConfig) -> Vec<bool> {
    gate_with_threshold(rho, cfg).0
}

/// Per-token compensation multiplier `1 + gate * beta * sched(t / T)`.
#[inline]
pub fn compensation_factor(t: usize, len: usize, gate: bool, cfg: &ShapingConfig) -> f64 {
    if gate {
        1.0 + cfg.beta * cfg.schedule.eval(t as f64 / len as f64)
    } else {
        1.0
    }
}

/// Applies the schedule-weighted bonus to gated tokens.
pub fn compensate(rho: &[f64], gates: &[bool], cfg: &ShapingConfig) -> CompensatedSeries {
    debug_assert_eq!(rho.len(), gates.len());
    let len = rho.len();
    let weight = rho
        .iter()
        .zip(gates)
        .enumerate()
        .map(|(k, (&r, &g))| r * compensation_factor(k + 1, len, g, cfg))
        .collect();
    let threshold = match cfg.span {
        Span::Late => tail_threshold(rho, cfg.gamma, cfg.kappa),
        Span::Full => top_fraction_threshold(rho, cfg.kappa),
    };
    CompensatedSeries {
        weight,
        gate: gates.to_vec(),
        tail_threshold: threshold,
        tail_start: match cfg.span {
            Span::Late => tail_start(len, cfg.gamma),
            Span::Full => 1,
        },
    }
}

/// Gate then compensate in one pass.
pub fn compensate_series(rho: &[f64], cfg: &ShapingConfig) -> CompensatedSeries {
    let (gate, _) = gate_with_threshold(rho, cfg);
    compensate(rho, &gate, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Schedule;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const RHO: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.4, 0.9, 0.5, 0.6, 0.7];

    #[test]
    fn threshold_is_order_statistic() {
        assert_eq!(tail_threshold(&RHO, 0.5, 0.2), Some(0.9));
    }

    #[test]
    fn whole_sequence_with_kappa_one_gives_minimum() {
        // gamma = 1 puts every position in the tail
        assert_eq!(tail_threshold(&RHO, 1.0, 1.0), Some(0.1));
        assert_eq!(top_fraction_threshold(&RHO, 1.0), Some(0.1));
    }

    #[test]
    fn single_token_tail() {
        assert_eq!(tail_threshold(&[0.37], 0.5, 0.2), Some(0.37));
    }

    #[test]
    fn empty_tail_with_gamma_zero() {
        assert_eq!(tail_threshold(&RHO, 0.0, 0.2), None);
        assert_eq!(tail_start(10, 0.0), 11);
        let cfg = ShapingConfig {
            gamma: 0.0,
            ..Default::default()
        };
        assert!(gate_mask(&RHO, &cfg).iter().all(|g| !g));
    }

    #[test]
    fn gate_reference_case() {
        let gates = gate_mask(&RHO, &ShapingConfig::default());
        let expected = [false, false, false, false, false, false, true, false, false, false];
        assert_eq!(gates, expected);
    }

    #[test]
    fn ties_all_pass() {
        let rho = [0.6; 10];
        let gates = gate_mask(&rho, &ShapingConfig::default());
        assert_eq!(gates[..5], [false; 5]);
        assert_eq!(gates[5..], [true; 5]);
    }

    #[test]
    fn full_span_drops_position_condition() {
        let cfg = ShapingConfig {
            span: Span::Full,
            ..Default::default()
        };
        let rho = [0.95, 0.2, 0.3, 0.4, 0.5, 0.4, 0.9, 0.5, 0.6, 0.7];
        // top 2 of 10: 0.95 and 0.9
        let gates = gate_mask(&rho, &cfg);
        assert!(gates[0] && gates[6]);
        assert_eq!(gates.iter().filter(|g| **g).count(), 2);
    }

    #[test]
    fn compensation_reference_values() {
        let mut gates = [false; 10];
        gates[9] = true;
        gates[4] = true;
        let rho = [0.8; 10];
        let lin = compensate(&rho, &gates, &ShapingConfig::default());
        assert_abs_diff_eq!(lin.weight[9], 1.04, epsilon = 1e-12);
        assert_eq!(lin.weight[0], 0.8);

        let exp = ShapingConfig {
            schedule: Schedule::Exponential { power: 2.0 },
            ..Default::default()
        };
        let w = compensate(&rho, &gates, &exp);
        assert_abs_diff_eq!(w.weight[4], 0.86, epsilon = 1e-12);

        let step = ShapingConfig {
            schedule: Schedule::Step,
            ..Default::default()
        };
        let w = compensate(&rho, &gates, &step);
        assert_abs_diff_eq!(w.weight[4], 1.04, epsilon = 1e-12);
    }

    #[test]
    fn admitted_count_guards_rounding() {
        assert_eq!(admitted_count(0.3, 10), 3);
        assert_eq!(admitted_count(0.2, 5), 1);
        assert_eq!(admitted_count(0.2, 3), 1);
        assert_eq!(admitted_count(0.5, 3), 2);
        assert_eq!(admitted_count(1.0, 7), 7);
    }

    fn schedules() -> impl Strategy<Value = Schedule> {
        prop_oneof![
            Just(Schedule::Linear),
            Just(Schedule::Step),
            Just(Schedule::Exponential { power: 1.0 }),
            Just(Schedule::Exponential { power: 2.0 }),
        ]
    }

    proptest! {
        #[test]
        fn weights_dominate_rho_and_closed_gates_are_identity(
            rho in prop::collection::vec(0.0f64..1.0, 1..40),
            beta in 0.0f64..2.0,
            gamma in 0.0f64..=1.0,
            kappa in 0.01f64..=1.0,
            schedule in schedules(),
            full in any::<bool>(),
        ) {
            let cfg = ShapingConfig {
                beta, gamma, kappa, schedule,
                span: if full { Span::Full } else { Span::Late },
                ..Default::default()
            };
            let c = compensate_series(&rho, &cfg);
            for k in 0..rho.len() {
                prop_assert!(c.weight[k] >= rho[k]);
                if !c.gate[k] {
                    prop_assert_eq!(c.weight[k], rho[k]);
                } else {
                    prop_assert!(full || in_tail(k + 1, rho.len(), gamma));
                    prop_assert!(rho[k] >= c.tail_threshold.unwrap());
                }
            }
        }

        #[test]
        fn zero_beta_is_identity(
            rho in prop::collection::vec(0.0f64..1.0, 1..40),
            schedule in schedules(),
            full in any::<bool>(),
        ) {
            let cfg = ShapingConfig {
                beta: 0.0, schedule,
                span: if full { Span::Full } else { Span::Late },
                ..Default::default()
            };
            prop_assert_eq!(compensate_series(&rho, &cfg).weight, rho);
        }

        #[test]
        fn gate_count_bounded_for_distinct_scores(
            rho in prop::collection::hash_set(0u32..1_000_000, 1..40),
            kappa in 0.01f64..=1.0,
        ) {
            let rho: Vec<f64> = rho.into_iter().map(|v| v as f64 / 1e6).collect();
            let cfg = ShapingConfig { kappa, ..Default::default() };
            let m = (1..=rho.len()).filter(|&t| in_tail(t, rho.len(), 0.5)).count();
            let open = gate_mask(&rho, &cfg).iter().filter(|g| **g).count();
            prop_assert_eq!(open, admitted_count(kappa, m));
        }

        #[test]
        fn monotone_in_position_when_open(
            r in 0.0f64..1.0,
            len in 2usize..50,
            beta in 0.0f64..2.0,
            schedule in prop_oneof![Just(Schedule::Linear), Just(Schedule::Exponential { power: 2.0 })],
        ) {
            let cfg = ShapingConfig { beta, schedule, ..Default::default() };
            let rho = vec![r; len];
            let w = compensate(&rho, &vec![true; len], &cfg).weight;
            prop_assert!(w.windows(2).all(|p| p[0] <= p[1]));
        }
    }
}
