//! Synthetic rollouts and a small "evidence bandit" trainer.
//!
//! Every prompt draws a handful of image-token states; the vocabulary token
//! whose embedding is closest to their prototype is the prompt's evidence
//! token. A response earns reward 1 iff it emits the evidence token in the
//! final quarter of the sequence. Token hidden states are synthesised from
//! the emitted tokens and then pulled toward the prototype with a strength
//! that decays along the sequence (`rho_decay`), which reproduces the
//! progressive loss of visual similarity in long generations.
//!
//! The policy is a linear map from `[prototype ; history mean]` to vocabulary
//! logits, trained by one ascent step on the clipped surrogate per update.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::late_early_ratio;
use crate::error::{Error, Result};
use crate::focus::{cosine_sim, focus_score_series};
use crate::grpo::{clipped_surrogate, group_advantages, ClipConfig, LossAgg};
use crate::model::{RolloutGroup, ShapingConfig, Trajectory, VisualContext};
use crate::pipeline::shape_group;

/// Strength of the pull toward the prototype at the first token.
const VISUAL_PULL: f64 = 1.0;
/// Probability that the open-loop generator emits the evidence token.
const EVIDENCE_RATE: f64 = 0.15;
/// Number of trailing steps averaged into the final metrics of a run.
pub const FINAL_WINDOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub dim: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub group_size: usize,
    pub groups_per_batch: usize,
    pub image_tokens: usize,
    /// Blend between the current token embedding and the running history.
    pub evidence_gain: f64,
    /// 0 keeps the visual pull constant; 1 fades it to zero at the last token.
    pub rho_decay: f64,
    /// Every token state equals the prototype, so focus is constant.
    pub flat_focus: bool,
    pub learning_rate: f64,
    /// Ascent steps taken on each sampled batch.
    pub updates_per_batch: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 16,
            vocab: 32,
            seq_len: 12,
            group_size: 8,
            groups_per_batch: 16,
            image_tokens: 4,
            evidence_gain: 0.7,
            rho_decay: 0.6,
            flat_focus: false,
            learning_rate: 3.0,
            updates_per_batch: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("dim", self.dim),
            ("vocab", self.vocab),
            ("seq-len", self.seq_len),
            ("group-size", self.group_size),
            ("groups-per-batch", self.groups_per_batch),
            ("image-tokens", self.image_tokens),
            ("updates-per-batch", self.updates_per_batch),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig {
                    key: key.into(),
                    reason: "must be >= 1".into(),
                });
            }
        }
        if !(0.0..=1.0).contains(&self.rho_decay) {
            return Err(Error::InvalidConfig {
                key: "rho-decay".into(),
                reason: format!("must lie in [0, 1], got {}", self.rho_decay),
            });
        }
        if !(0.0..=1.0).contains(&self.evidence_gain) {
            return Err(Error::InvalidConfig {
                key: "evidence-gain".into(),
                reason: format!("must lie in [0, 1], got {}", self.evidence_gain),
            });
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig {
                key: "lr".into(),
                reason: format!("must be finite and >= 0, got {}", self.learning_rate),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    /// Symmetric clipping, unshaped advantages.
    Grpo,
    /// Clip-higher, unshaped advantages.
    Dapo,
    /// Clip-higher, visually shaped advantages.
    #[default]
    Vgpo,
}

impl std::str::FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grpo" => Ok(Algo::Grpo),
            "dapo" => Ok(Algo::Dapo),
            "vgpo" => Ok(Algo::Vgpo),
            other => Err(Error::InvalidConfig {
                key: "algo".into(),
                reason: format!("expected grpo|dapo|vgpo, got `{other}`"),
            }),
        }
    }
}

impl Algo {
    pub fn name(&self) -> &'static str {
        match self {
            Algo::Grpo => "grpo",
            Algo::Dapo => "dapo",
            Algo::Vgpo => "vgpo",
        }
    }

    pub fn clip_config(&self, shaping: &ShapingConfig, loss_agg: LossAgg) -> ClipConfig {
        match self {
            Algo::Grpo => ClipConfig {
                clip_low: shaping.clip_low,
                clip_high: shaping.clip_low,
                loss_agg,
            },
            Algo::Dapo | Algo::Vgpo => ClipConfig {
                clip_low: shaping.clip_low,
                clip_high: shaping.clip_high,
                loss_agg,
            },
        }
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn gaussian_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| round_f32(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// A rollout group with the token ids the toy policy needs to re-score it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabGroup {
    pub group: RolloutGroup,
    pub tokens: Vec<Vec<usize>>,
    pub evidence: usize,
}

/// Fixed vocabulary embeddings plus the generator settings.
#[derive(Debug, Clone)]
pub struct SynthLab {
    pub cfg: SynthConfig,
    pub embeddings: Vec<Vec<f64>>,
}

struct Prompt {
    image_states: Vec<Vec<f64>>,
    prototype: Vec<f64>,
    evidence: usize,
}

impl SynthLab {
    /// Builds the lab and returns the run's RNG stream positioned after the
    /// embedding draws.
    pub fn new(cfg: SynthConfig) -> Result<(Self, ChaCha8Rng)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let embeddings = (0..cfg.vocab).map(|_| gaussian_vector(&mut rng, cfg.dim)).collect();
        Ok((Self { cfg, embeddings }, rng))
    }

    fn prompt(&self, rng: &mut impl Rng) -> Prompt {
        let image_states: Vec<Vec<f64>> = (0..self.cfg.image_tokens)
            .map(|_| gaussian_vector(rng, self.cfg.dim))
            .collect();
        let n = image_states.len() as f64;
        let mut prototype = vec![0.0; self.cfg.dim];
        for s in &image_states {
            for (p, v) in prototype.iter_mut().zip(s) {
                *p += v / n;
            }
        }
        let evidence = self.nearest_token(&prototype);
        Prompt {
            image_states,
            prototype,
            evidence,
        }
    }

    /// Vocabulary index whose embedding has the highest cosine with `target`.
    pub fn nearest_token(&self, target: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (v, e) in self.embeddings.iter().enumerate() {
            let c = cosine_sim(e, target, 0.0).unwrap_or(f64::NEG_INFINITY);
            if c > best.1 {
                best = (v, c);
            }
        }
        best.0
    }

    /// Reward 1 iff the evidence token appears at a 1-based position
    /// `t > 3T/4`.
    pub fn reward(&self, tokens: &[usize], evidence: usize) -> f64 {
        let len = tokens.len() as f64;
        let hit = tokens
            .iter()
            .enumerate()
            .any(|(k, &tok)| tok == evidence && (k + 1) as f64 > 0.75 * len);
        if hit {
            1.0
        } else {
            0.0
        }
    }

    /// Pull strength toward the prototype at 1-based position `t`.
    pub fn visual_pull(&self, t: usize) -> f64 {
        let len = self.cfg.seq_len;
        let progress = if len > 1 {
            (t - 1) as f64 / (len - 1) as f64
        } else {
            0.0
        };
        VISUAL_PULL * (1.0 - self.cfg.rho_decay * progress)
    }

    /// Hidden states for an emitted token sequence, plus per-step attention
    /// mass (image, query, history).
    pub fn synthesize_states(&self, prototype: &[f64], tokens: &[usize]) -> (Vec<Vec<f64>>, Vec<[f64; 3]>) {
        let d = self.cfg.dim;
        let g = self.cfg.evidence_gain;
        let proto_norm = prototype.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut history = vec![0.0; d];
        let mut states = Vec::with_capacity(tokens.len());
        let mut attn = Vec::with_capacity(tokens.len());
        for (k, &tok) in tokens.iter().enumerate() {
            let emb = &self.embeddings[tok];
            for (h, e) in history.iter_mut().zip(emb) {
                *h += (e - *h) / (k + 1) as f64;
            }
            let state: Vec<f64> = if self.cfg.flat_focus {
                prototype.iter().map(|&v| round_f32(v)).collect()
            } else {
                let base: Vec<f64> = emb.iter().zip(&history).map(|(e, h)| g * e + (1.0 - g) * h).collect();
                let base_norm = base.iter().map(|v| v * v).sum::<f64>().sqrt();
                let pull = self.visual_pull(k + 1) * base_norm / proto_norm.max(f64::MIN_POSITIVE);
                base.iter()
                    .zip(prototype)
                    .map(|(b, p)| round_f32(b + pull * p))
                    .collect()
            };
            let rho = (cosine_sim(&state, prototype, 1e-8).unwrap_or(0.0) + 1.0) / 2.0;
            let image = round_f32(0.6 * rho * rho);
            let query = round_f32(0.25);
            attn.push([image, query, round_f32(1.0 - image - query)]);
            states.push(state);
        }
        (states, attn)
    }

    fn assemble(&self, id: String, prompt: Prompt, sequences: Vec<(Vec<usize>, Option<Vec<f64>>)>) -> LabGroup {
        let mut trajectories = Vec::with_capacity(sequences.len());
        let mut tokens = Vec::with_capacity(sequences.len());
        for (seq, logp) in sequences {
            let (hidden_states, attn) = self.synthesize_states(&prompt.prototype, &seq);
            trajectories.push(Trajectory {
                hidden_states,
                reward: self.reward(&seq, prompt.evidence),
                logp_old: logp,
                logp_new: None,
                attn_split: Some(attn),
            });
            tokens.push(seq);
        }
        let visual = VisualContext {
            image_tokens: Some(crate::model::ImageTokens {
                weights: crate::model::uniform_weights(prompt.image_states.len()),
                states: prompt.image_states,
            }),
            prototype: prompt.prototype,
        };
        LabGroup {
            group: RolloutGroup {
                group_id: id,
                visual,
                trajectories,
            },
            tokens,
            evidence: prompt.evidence,
        }
    }

    /// Open-loop group: tokens are uniform except that the evidence token is
    /// emitted with a fixed elevated rate.
    pub fn generate_group(&self, id: String, rng: &mut impl Rng) -> LabGroup {
        let prompt = self.prompt(rng);
        let sequences = (0..self.cfg.group_size)
            .map(|_| {
                let seq = (0..self.cfg.seq_len)
                    .map(|_| {
                        if rng.random::<f64>() < EVIDENCE_RATE {
                            prompt.evidence
                        } else {
                            rng.random_range(0..self.cfg.vocab)
                        }
                    })
                    .collect();
                (seq, None)
            })
            .collect();
        self.assemble(id, prompt, sequences)
    }

    /// Group sampled from `policy`, with per-token log-probs recorded as
    /// `logp_old`.
    pub fn toy_rollout(&self, policy: &ToyPolicy, id: String, rng: &mut impl Rng) -> LabGroup {
        let prompt = self.prompt(rng);
        let sequences = (0..self.cfg.group_size)
            .map(|_| {
                let mut seq = Vec::with_capacity(self.cfg.seq_len);
                let mut logp = Vec::with_capacity(self.cfg.seq_len);
                let mut history = vec![0.0; self.cfg.dim];
                for k in 0..self.cfg.seq_len {
                    let probs = policy.probs(&feature(&prompt.prototype, &history));
                    let u: f64 = rng.random();
                    let tok = sample_index(&probs, u);
                    logp.push(probs[tok].ln());
                    seq.push(tok);
                    for (h, e) in history.iter_mut().zip(&self.embeddings[tok]) {
                        *h += (e - *h) / (k + 1) as f64;
                    }
                }
                (seq, Some(logp))
            })
            .collect();
        self.assemble(id, prompt, sequences)
    }

    /// Draws one batch of policy rollouts. Each group gets its own generator
    /// seeded from `rng`, so the result does not depend on scheduling.
    pub fn rollout_batch(&self, policy: &ToyPolicy, step: usize, rng: &mut impl RngCore) -> Vec<LabGroup> {
        let seeds: Vec<u64> = (0..self.cfg.groups_per_batch).map(|_| rng.next_u64()).collect();
        seeds
            .into_par_iter()
            .enumerate()
            .map(|(k, seed)| {
                let mut group_rng = ChaCha8Rng::seed_from_u64(seed);
                self.toy_rollout(policy, format!("s{}-step{step}-g{k}", self.cfg.seed), &mut group_rng)
            })
            .collect()
    }
}

/// `n` open-loop groups generated deterministically from `cfg.seed`.
pub fn generate_corpus(cfg: &SynthConfig, n: usize) -> Result<Vec<RolloutGroup>> {
    let (lab, mut rng) = SynthLab::new(*cfg)?;
    let seeds: Vec<u64> = (0..n).map(|_| rng.next_u64()).collect();
    Ok(seeds
        .into_par_iter()
        .enumerate()
        .map(|(k, seed)| {
            let mut group_rng = ChaCha8Rng::seed_from_u64(seed);
            lab.generate_group(format!("synth-{}-{k}", cfg.seed), &mut group_rng)
                .group
        })
        .collect())
}

fn feature(prototype: &[f64], history: &[f64]) -> Vec<f64> {
    prototype.iter().chain(history).copied().collect()
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // u landed in the rounding slack above the cumulative sum
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Linear softmax policy over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    pub vocab: usize,
    pub feature_dim: usize,
    /// Row-major `vocab x feature_dim`.
    pub weights: Vec<f64>,
    pub learning_rate: f64,
}

impl ToyPolicy {
    pub fn zeros(vocab: usize, feature_dim: usize, learning_rate: f64) -> Self {
        Self {
            vocab,
            feature_dim,
            weights: vec![0.0; vocab * feature_dim],
            learning_rate,
        }
    }

    pub fn for_lab(cfg: &SynthConfig) -> Self {
        Self::zeros(cfg.vocab, 2 * cfg.dim, cfg.learning_rate)
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.feature_dim)
            .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
            .collect()
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        let logits = self.logits(x);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / z).collect()
    }

    /// Per-token log-probs of `tokens` and the matching softmax rows and
    /// features.
    fn score(&self, prototype: &[f64], embeddings: &[Vec<f64>], tokens: &[usize]) -> Scored {
        let mut history = vec![0.0; prototype.len()];
        tokens
            .iter()
            .enumerate()
            .map(|(k, &tok)| {
                let x = feature(prototype, &history);
                let probs = self.probs(&x);
                for (h, e) in history.iter_mut().zip(&embeddings[tok]) {
                    *h += (e - *h) / (k + 1) as f64;
                }
                (probs[tok].ln(), probs, x)
            })
            .collect()
    }

    /// Log-probs of every trajectory in `group` under this policy.
    pub fn log_probs(&self, lab: &SynthLab, group: &LabGroup) -> Vec<Vec<f64>> {
        group
            .tokens
            .iter()
            .map(|seq| {
                self.score(&group.group.visual.prototype, &lab.embeddings, seq)
                    .into_iter()
                    .map(|(lp, _, _)| lp)
                    .collect()
            })
            .collect()
    }
}

/// Per-token advantages used by `algo` for one group.
pub fn algo_advantages(group: &RolloutGroup, shaping: &ShapingConfig, algo: Algo) -> Result<Vec<Vec<f64>>> {
    match algo {
        Algo::Grpo | Algo::Dapo => {
            let base = group_advantages(&group.rewards(), shaping.std_mode);
            Ok(group
                .trajectories
                .iter()
                .zip(base.values)
                .map(|(t, a)| vec![a; t.len()])
                .collect())
        }
        Algo::Vgpo => Ok(shape_group(group, shaping)?
            .trajectories
            .into_iter()
            .map(|t| t.shaped_adv)
            .collect()),
    }
}

fn old_log_probs(batch: &[LabGroup]) -> Result<Vec<Vec<f64>>> {
    batch
        .iter()
        .flat_map(|g| &g.group.trajectories)
        .map(|t| {
            t.logp_old.clone().ok_or_else(|| Error::MissingLogProbs {
                field: "logp_old".into(),
            })
        })
        .collect()
}

/// Surrogate objective of `policy` on `batch` with fixed per-token
/// advantages (`[group][trajectory][token]`).
pub fn surrogate_objective(
    policy: &ToyPolicy,
    lab: &SynthLab,
    batch: &[LabGroup],
    advantages: &[Vec<Vec<f64>>],
    clip: &ClipConfig,
) -> Result<f64> {
    let old = old_log_probs(batch)?;
    let new: Vec<Vec<f64>> = batch.iter().flat_map(|g| policy.log_probs(lab, g)).collect();
    let ratios: Vec<Vec<f64>> = new
        .iter()
        .zip(&old)
        .map(|(n, o)| n.iter().zip(o).map(|(a, b)| (a - b).exp()).collect())
        .collect();
    let adv: Vec<Vec<f64>> = advantages.iter().flatten().cloned().collect();
    Ok(clipped_surrogate(&ratios, &adv, clip)?.objective)
}

/// Per token: log-prob, softmax row and feature.
type Scored = Vec<(f64, Vec<f64>, Vec<f64>)>;

/// Surrogate objective and its gradient w.r.t. the policy weights.
pub fn surrogate_gradient(
    policy: &ToyPolicy,
    lab: &SynthLab,
    batch: &[LabGroup],
    advantages: &[Vec<Vec<f64>>],
    clip: &ClipConfig,
) -> Result<(f64, Vec<f64>)> {
    let old = old_log_probs(batch)?;
    let scored: Vec<Scored> = batch
        .par_iter()
        .flat_map_iter(|g| {
            g.tokens
                .iter()
                .map(|seq| policy.score(&g.group.visual.prototype, &lab.embeddings, seq))
                .collect::<Vec<_>>()
        })
        .collect();
    if scored.len() != old.len() {
        return Err(Error::LengthMismatch {
            field: "logp_old".into(),
            expected: scored.len(),
            found: old.len(),
        });
    }
    let mut ratios = Vec::with_capacity(scored.len());
    for (s, o) in scored.iter().zip(&old) {
        if s.len() != o.len() {
            return Err(Error::LengthMismatch {
                field: "logp_old".into(),
                expected: s.len(),
                found: o.len(),
            });
        }
        ratios.push(
            s.iter()
                .zip(o)
                .map(|((lp, _, _), o)| (lp - o).exp())
                .collect::<Vec<f64>>(),
        );
    }
    let adv: Vec<Vec<f64>> = advantages.iter().flatten().cloned().collect();
    let result = clipped_surrogate(&ratios, &adv, clip)?;

    let fd = policy.feature_dim;
    let mut grad = vec![0.0; policy.weights.len()];
    for (traj, g_traj) in scored.iter().zip(&result.per_token_grad_logp) {
        for ((_, probs, x), &g) in traj.iter().zip(g_traj) {
            if g == 0.0 {
                continue;
            }
            // d logp(tok) / d W[v] = (1[v = tok] - p_v) x; the indicator part
            // is added below from the token id.
            for (v, p) in probs.iter().enumerate() {
                let row = &mut grad[v * fd..(v + 1) * fd];
                for (r, xv) in row.iter_mut().zip(x) {
                    *r -= g * p * xv;
                }
            }
        }
    }
    let mut idx = 0;
    for g in batch {
        for seq in &g.tokens {
            let traj = &scored[idx];
            let g_traj = &result.per_token_grad_logp[idx];
            for ((&tok, (_, _, x)), &gt) in seq.iter().zip(traj).zip(g_traj) {
                if gt == 0.0 {
                    continue;
                }
                let row = &mut grad[tok * fd..(tok + 1) * fd];
                for (r, xv) in row.iter_mut().zip(x) {
                    *r += gt * xv;
                }
            }
            idx += 1;
        }
    }
    Ok((result.objective, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_objective: f64,
    /// Mean late/early focus ratio over trajectories with a defined ratio.
    pub rho_ratio: f64,
}

/// Mean reward and mean late/early focus ratio (split at 0.5) of a batch.
pub fn batch_statistics(batch: &[LabGroup], eps: f64) -> Result<(f64, f64)> {
    let mut rewards = 0.0;
    let mut n = 0usize;
    let mut ratio_sum = 0.0;
    let mut ratio_n = 0usize;
    for g in batch {
        for t in &g.group.trajectories {
            rewards += t.reward;
            n += 1;
            let rho = focus_score_series(t, &g.group.visual, eps)?.rho;
            if let Some(r) = late_early_ratio(&rho, 0.5) {
                ratio_sum += r;
                ratio_n += 1;
            }
        }
    }
    let mean = |s: f64, k: usize| if k == 0 { f64::NAN } else { s / k as f64 };
    Ok((mean(rewards, n), mean(ratio_sum, ratio_n)))
}

/// One ascent step on the clipped surrogate for `batch`.
pub fn train_step(
    policy: &mut ToyPolicy,
    lab: &SynthLab,
    batch: &[LabGroup],
    shaping: &ShapingConfig,
    algo: Algo,
    loss_agg: LossAgg,
) -> Result<StepMetrics> {
    let advantages = batch
        .iter()
        .map(|g| algo_advantages(&g.group, shaping, algo))
        .collect::<Result<Vec<_>>>()?;
    let clip = algo.clip_config(shaping, loss_agg);
    let (objective, grad) = surrogate_gradient(policy, lab, batch, &advantages, &clip)?;
    let lr = policy.learning_rate;
    for (w, g) in policy.weights.iter_mut().zip(&grad) {
        *w += lr * g;
    }
    let (mean_reward, rho_ratio) = batch_statistics(batch, shaping.epsilon_smooth)?;
    Ok(StepMetrics {
        step: 0,
        mean_reward,
        mean_objective: objective,
        rho_ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub initial: StepMetrics,
    pub curve: Vec<StepMetrics>,
    /// Averages over the last `FINAL_WINDOW` steps (the initial metrics when
    /// no step was taken).
    pub final_reward: f64,
    pub final_rho_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub algo: Algo,
    pub steps: usize,
    pub synth: SynthConfig,
    pub runs: Vec<SeedRun>,
}

impl ExperimentReport {
    pub fn mean_final_reward(&self) -> f64 {
        self.runs.iter().map(|r| r.final_reward).sum::<f64>() / self.runs.len().max(1) as f64
    }

    pub fn mean_final_rho_ratio(&self) -> f64 {
        self.runs.iter().map(|r| r.final_rho_ratio).sum::<f64>() / self.runs.len().max(1) as f64
    }
}

/// Trains one policy per seed for `steps` sampled batches.
pub fn run_experiment(
    synth: &SynthConfig,
    shaping: &ShapingConfig,
    algo: Algo,
    loss_agg: LossAgg,
    steps: usize,
    seeds: &[u64],
) -> Result<ExperimentReport> {
    shaping.validate()?;
    let runs = seeds
        .iter()
        .map(|&seed| run_seed(&SynthConfig { seed, ..*synth }, shaping, algo, loss_agg, steps))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        algo,
        steps,
        synth: *synth,
        runs,
    })
}

fn run_seed(
    cfg: &SynthConfig,
    shaping: &ShapingConfig,
    algo: Algo,
    loss_agg: LossAgg,
    steps: usize,
) -> Result<SeedRun> {
    let (lab, mut rng) = SynthLab::new(*cfg)?;
    let mut policy = ToyPolicy::for_lab(cfg);
    let eps = shaping.epsilon_smooth;

    let probe = lab.rollout_batch(&policy, 0, &mut rng);
    let (mean_reward, rho_ratio) = batch_statistics(&probe, eps)?;
    let initial = StepMetrics {
        step: 0,
        mean_reward,
        mean_objective: 0.0,
        rho_ratio,
    };

    let mut curve = Vec::with_capacity(steps);
    for step in 1..=steps {
        let batch = lab.rollout_batch(&policy, step, &mut rng);
        let mut metrics = train_step(&mut policy, &lab, &batch, shaping, algo, loss_agg)?;
        for _ in 1..cfg.updates_per_batch {
            train_step(&mut policy, &lab, &batch, shaping, algo, loss_agg)?;
        }
        metrics.step = step;
        curve.push(metrics);
    }

    let (final_reward, final_rho_ratio) = if curve.is_empty() {
        (initial.mean_reward, initial.rho_ratio)
    } else {
        let tail = &curve[curve.len().saturating_sub(FINAL_WINDOW)..];
        let n = tail.len() as f64;
        (
            tail.iter().map(|m| m.mean_reward).sum::<f64>() / n,
            tail.iter().map(|m| m.rho_ratio).sum::<f64>() / n,
        )
    };
    Ok(SeedRun {
        seed: cfg.seed,
        initial,
        curve,
        final_reward,
        final_rho_ratio,
    })
}
