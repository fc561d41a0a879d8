//! Line-delimited JSON traces: one rollout group per line.
//!
//! Hidden states, image states, prototypes and attention splits are stored at
//! 32-bit precision using the shortest decimal that round-trips an `f32`.
//! Rewards, log-probs and pooling weights are stored at 64-bit precision.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Error;
use crate::model::{
    uniform_weights, validate_group, ImageTokens, RolloutGroup, ShapedAdvantages, ShapedTrajectory, Trajectory,
    VisualContext,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: parse error: {reason}")]
    Parse { line: usize, reason: String },

    #[error("line {line}: unsupported schema_version {version} (expected {SCHEMA_VERSION})")]
    SchemaVersionUnsupported { line: usize, version: u64 },

    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: Error,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TraceError {
    pub fn line(&self) -> Option<usize> {
        match self {
            TraceError::Parse { line, .. }
            | TraceError::SchemaVersionUnsupported { line, .. }
            | TraceError::Invalid { line, .. } => Some(*line),
            TraceError::Io(_) => None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireTrajectory {
    reward: f64,
    hidden_states: Vec<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "log_probs")]
    logp_old: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "log_probs")]
    logp_new: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attn_split: Option<Vec<[f32; 3]>>,
}

/// Log-probabilities with `-inf` written as `null`.
mod log_probs {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        let wire: Option<Vec<Option<f64>>> = v
            .as_ref()
            .map(|v| v.iter().map(|&x| (x != f64::NEG_INFINITY).then_some(x)).collect());
        wire.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
        let wire: Option<Vec<Option<f64>>> = Option::deserialize(d)?;
        Ok(wire.map(|v| v.into_iter().map(|x| x.unwrap_or(f64::NEG_INFINITY)).collect()))
    }
}

/// One rollout group as it appears on the wire.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceRecord {
    schema_version: u32,
    group_id: String,
    hidden_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_states: Option<Vec<Vec<f32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prototype: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pooling_weights: Option<Vec<f64>>,
    trajectories: Vec<WireTrajectory>,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: Option<u64>,
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn narrow(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl TraceRecord {
    fn into_group(self) -> Result<RolloutGroup, Error> {
        let d = self.hidden_dim;
        let visual = match (self.image_states, self.prototype) {
            (Some(states), None) => {
                let states: Vec<Vec<f64>> = states.iter().map(|s| widen(s)).collect();
                if states.is_empty() {
                    return Err(Error::EmptyImageStates);
                }
                if let Some((k, s)) = states.iter().enumerate().find(|(_, s)| s.len() != d) {
                    return Err(Error::dim(format!("image_states[{k}]"), d, s.len()));
                }
                let weights = self.pooling_weights.unwrap_or_else(|| uniform_weights(states.len()));
                VisualContext::pooled(states, weights)?
            }
            (None, Some(proto)) => {
                if proto.len() != d {
                    return Err(Error::dim("prototype", d, proto.len()));
                }
                VisualContext::from_prototype(widen(&proto))
            }
            _ => unreachable!("exclusivity checked by the caller"),
        };
        let trajectories = self
            .trajectories
            .into_iter()
            .map(|t| Trajectory {
                hidden_states: t.hidden_states.iter().map(|h| widen(h)).collect(),
                reward: t.reward,
                logp_old: t.logp_old,
                logp_new: t.logp_new,
                attn_split: t
                    .attn_split
                    .map(|s| s.iter().map(|row| row.map(|v| v as f64)).collect()),
            })
            .collect();
        let group = RolloutGroup {
            group_id: self.group_id,
            visual,
            trajectories,
        };
        validate_group(&group)?;
        Ok(group)
    }

    fn from_group(group: &RolloutGroup) -> Self {
        let (image_states, prototype, pooling_weights) = match &group.visual.image_tokens {
            Some(ImageTokens { states, weights }) => {
                let uniform = weights.iter().all(|&w| w == 1.0 / weights.len() as f64);
                (
                    Some(states.iter().map(|s| narrow(s)).collect()),
                    None,
                    (!uniform).then(|| weights.clone()),
                )
            }
            None => (None, Some(narrow(&group.visual.prototype)), None),
        };
        TraceRecord {
            schema_version: SCHEMA_VERSION,
            group_id: group.group_id.clone(),
            hidden_dim: group.dim(),
            image_states,
            prototype,
            pooling_weights,
            trajectories: group
                .trajectories
                .iter()
                .map(|t| WireTrajectory {
                    reward: t.reward,
                    hidden_states: t.hidden_states.iter().map(|h| narrow(h)).collect(),
                    logp_old: t.logp_old.clone(),
                    logp_new: t.logp_new.clone(),
                    attn_split: t
                        .attn_split
                        .as_ref()
                        .map(|s| s.iter().map(|row| row.map(|v| v as f32)).collect()),
                })
                .collect(),
        }
    }
}

/// Parses one trace line (1-based `line` is used for error context).
pub fn parse_record(text: &str, line: usize) -> Result<RolloutGroup, TraceError> {
    let record: TraceRecord = match serde_json::from_str(text) {
        Ok(r) => r,
        Err(e) => {
            if let Ok(VersionProbe {
                schema_version: Some(v),
            }) = serde_json::from_str(text)
            {
                if v != SCHEMA_VERSION as u64 {
                    return Err(TraceError::SchemaVersionUnsupported { line, version: v });
                }
            }
            return Err(TraceError::Parse {
                line,
                reason: e.to_string(),
            });
        }
    };
    if record.schema_version != SCHEMA_VERSION {
        return Err(TraceError::SchemaVersionUnsupported {
            line,
            version: record.schema_version as u64,
        });
    }
    match (&record.image_states, &record.prototype) {
        (Some(_), Some(_)) => {
            return Err(TraceError::Parse {
                line,
                reason: "image_states and prototype are mutually exclusive".into(),
            })
        }
        (None, None) => {
            return Err(TraceError::Parse {
                line,
                reason: "one of image_states or prototype is required".into(),
            })
        }
        _ => {}
    }
    if record.prototype.is_some() && record.pooling_weights.is_some() {
        return Err(TraceError::Parse {
            line,
            reason: "pooling_weights requires image_states".into(),
        });
    }
    record
        .into_group()
        .map_err(|source| TraceError::Invalid { line, source })
}

/// Streaming reader yielding one validated group per non-blank line.
pub struct TraceReader<R> {
    input: R,
    line: usize,
    buf: String,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(input: R) -> Self {
        Self {
            input,
            line: 0,
            buf: String::new(),
        }
    }

    /// Like [`Iterator::next`] but also returns the line number.
    pub fn next_with_line(&mut self) -> Option<(usize, Result<RolloutGroup, TraceError>)> {
        loop {
            self.buf.clear();
            match self.input.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some((self.line + 1, Err(e.into()))),
            }
            self.line += 1;
            let text = self.buf.trim();
            if text.is_empty() {
                continue;
            }
            return Some((self.line, parse_record(text, self.line)));
        }
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<RolloutGroup, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_with_line().map(|(_, r)| r)
    }
}

pub fn read_trace<R: BufRead>(input: R) -> TraceReader<R> {
    TraceReader::new(input)
}

/// Serialises one group to a single line (no trailing newline).
pub fn record_line(group: &RolloutGroup) -> String {
    serde_json::to_string(&TraceRecord::from_group(group)).expect("trace records always serialise")
}

/// Writes one record per line; returns the number of bytes written.
pub fn write_trace<'a, W: Write>(groups: impl IntoIterator<Item = &'a RolloutGroup>, mut out: W) -> io::Result<u64> {
    let mut bytes = 0u64;
    for g in groups {
        let line = record_line(g);
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
        bytes += line.len() as u64 + 1;
    }
    out.flush()?;
    Ok(bytes)
}

#[derive(Debug, Serialize, Deserialize)]
struct ShapedWireTrajectory {
    rho: Vec<f64>,
    weight: Vec<f64>,
    gate: Vec<u8>,
    psi: Vec<f64>,
    shaped_adv: Vec<f64>,
    traj_score: f64,
    phi: f64,
    base_adv: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ShapedRecord {
    group_id: String,
    degenerate_group: bool,
    trajectories: Vec<ShapedWireTrajectory>,
}

/// Serialises shaped advantages to one output line.
pub fn shaped_line(shaped: &ShapedAdvantages) -> String {
    let record = ShapedRecord {
        group_id: shaped.group_id.clone(),
        degenerate_group: shaped.degenerate_group,
        trajectories: shaped
            .trajectories
            .iter()
            .map(|t| ShapedWireTrajectory {
                rho: t.rho.clone(),
                weight: t.weight.clone(),
                gate: t.gate.iter().map(|&g| g as u8).collect(),
                psi: t.psi.clone(),
                shaped_adv: t.shaped_adv.clone(),
                traj_score: t.traj_score,
                phi: t.phi,
                base_adv: t.base_adv,
            })
            .collect(),
    };
    serde_json::to_string(&record).expect("shaped records always serialise")
}

/// Parses one shaped-advantage output line.
pub fn parse_shaped(text: &str, line: usize) -> Result<ShapedAdvantages, TraceError> {
    let record: ShapedRecord = serde_json::from_str(text).map_err(|e| TraceError::Parse {
        line,
        reason: e.to_string(),
    })?;
    Ok(ShapedAdvantages {
        group_id: record.group_id,
        degenerate_group: record.degenerate_group,
        trajectories: record
            .trajectories
            .into_iter()
            .map(|t| ShapedTrajectory {
                rho: t.rho,
                weight: t.weight,
                gate: t.gate.into_iter().map(|g| g != 0).collect(),
                psi: t.psi,
                shaped_adv: t.shaped_adv,
                traj_score: t.traj_score,
                phi: t.phi,
                base_adv: t.base_adv,
            })
            .collect(),
    })
}

pub fn read_shaped<R: BufRead>(input: R) -> impl Iterator<Item = Result<ShapedAdvantages, TraceError>> {
    input.lines().enumerate().filter_map(|(k, line)| match line {
        Err(e) => Some(Err(e.into())),
        Ok(text) if text.trim().is_empty() => None,
        Ok(text) => Some(parse_shaped(text.trim(), k + 1)),
    })
}

/// Writes any report as pretty-printed JSON.
pub fn write_report<T: Serialize, W: Write>(report: &T, mut out: W) -> io::Result<()> {
    serde_json::to_writer_pretty(&mut out, report).map_err(io::Error::other)?;
    out.write_all(b"\n")?;
    out.flush()
}

pub fn read_report<T: serde::de::DeserializeOwned, R: io::Read>(input: R) -> Result<T, TraceError> {
    serde_json::from_reader(input).map_err(|e| TraceError::Parse {
        line: e.line(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group() -> RolloutGroup {
        RolloutGroup {
            group_id: "g0".into(),
            visual: VisualContext::mean_pooled(vec![vec![0.1, 0.2], vec![0.3, -0.4]]).unwrap(),
            trajectories: vec![Trajectory::new(vec![vec![0.1, 0.5], vec![1.0, 2.0]], 1.0)],
        }
    }

    #[test]
    fn empty_input_yields_nothing() {
        assert_eq!(read_trace(&b""[..]).count(), 0);
        assert_eq!(read_trace(&b"\n  \n"[..]).count(), 0);
    }

    #[test]
    fn absent_logps_are_omitted() {
        let line = record_line(&group());
        assert!(!line.contains("logp_old"));
        assert!(!line.contains("logp_new"));
        assert!(!line.contains("pooling_weights"));
        assert!(line.contains("\"hidden_states\":[[0.1,0.5],[1.0,2.0]]"), "{line}");
    }

    #[test]
    fn one_tenth_survives_at_f32() {
        let mut buf = Vec::new();
        write_trace([&group()], &mut buf).unwrap();
        let back: Vec<_> = read_trace(&buf[..]).collect::<Result<_, _>>().unwrap();
        assert_eq!(back[0].trajectories[0].hidden_states[0][0] as f32, 0.1f32);
    }

    #[test]
    fn image_states_and_prototype_are_exclusive() {
        let line = r#"{"schema_version":1,"group_id":"x","hidden_dim":1,"image_states":[[1.0]],"prototype":[1.0],"trajectories":[{"reward":1,"hidden_states":[[1.0]]}]}"#;
        assert!(matches!(parse_record(line, 3), Err(TraceError::Parse { line: 3, .. })));
    }

    #[test]
    fn unknown_schema_version() {
        let line = r#"{"schema_version":2,"group_id":"x","hidden_dim":1,"prototype":[1.0],"trajectories":[]}"#;
        assert!(matches!(
            parse_record(line, 1),
            Err(TraceError::SchemaVersionUnsupported { version: 2, .. })
        ));
        let future = r#"{"schema_version":7,"novel_field":true}"#;
        assert!(matches!(
            parse_record(future, 1),
            Err(TraceError::SchemaVersionUnsupported { version: 7, .. })
        ));
    }

    #[test]
    fn validation_errors_carry_line_numbers() {
        let good = record_line(&group());
        let bad = r#"{"schema_version":1,"group_id":"x","hidden_dim":2,"prototype":[1.0,0.0],"trajectories":[{"reward":1,"hidden_states":[[1.0]]}]}"#;
        let text = format!("{good}\n{bad}\n");
        let results: Vec<_> = read_trace(text.as_bytes()).collect();
        assert!(results[0].is_ok());
        match &results[1] {
            Err(TraceError::Invalid {
                line: 2,
                source: Error::DimensionMismatch { .. },
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn explicit_weights_are_kept() {
        let mut g = group();
        g.visual = VisualContext::pooled(vec![vec![2.0, 0.0], vec![0.0, 4.0]], vec![0.75, 0.25]).unwrap();
        let line = record_line(&g);
        assert!(line.contains("\"pooling_weights\":[0.75,0.25]"));
        let back = parse_record(&line, 1).unwrap();
        assert_eq!(back.visual.prototype, vec![1.5, 1.0]);
    }

    #[test]
    fn negative_infinite_log_probs_survive() {
        let mut g = group();
        g.trajectories[0].logp_old = Some(vec![f64::NEG_INFINITY, -0.25]);
        let line = record_line(&g);
        assert!(line.contains("\"logp_old\":[null,-0.25]"), "{line}");
        let back = parse_record(&line, 1).unwrap();
        assert_eq!(back.trajectories[0].logp_old, g.trajectories[0].logp_old);
    }
}
