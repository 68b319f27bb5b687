//! Cost-sensitive sequence losses.
//!
//! For every decoder cell of a roll-in trajectory, each candidate token is
//! forced and the sequence is completed by a roll-out; comparing the result
//! with the reference gives the cell's cost vector. The cell is then trained
//! with either a log-loss on the cheapest candidate or a cross-entropy against
//! `softmax(−α·costs)`. Costs are constants: gradients flow only through the
//! decoder scores.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::corpus::{TokenId, EOS};
use crate::error::{Error, Result};
use crate::metrics::{sequence_cost, strip_special, truncate_at_eos};
use crate::model::Seq2Seq;
use crate::params::ParamStore;
use crate::policy::{derive_seed, roll_in, roll_out, PolicyKind, Trajectory, ROLLIN_STREAM};
use crate::tensor::{self, Tensor};

pub const DEFAULT_TOP_K: usize = 15;
pub const DEFAULT_NEIGHBORS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct CostVector {
    pub candidates: Vec<TokenId>,
    pub costs: Vec<f64>,
}

impl CostVector {
    pub fn new(candidates: Vec<TokenId>, costs: Vec<f64>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Invalid("empty candidate set".into()));
        }
        if candidates.len() != costs.len() {
            return Err(Error::Invalid(format!(
                "{} candidates but {} costs",
                candidates.len(),
                costs.len()
            )));
        }
        if candidates.iter().collect::<HashSet<_>>().len() != candidates.len() {
            return Err(Error::Invalid("candidates must be distinct".into()));
        }
        if let Some(c) = costs.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::Invalid(format!("cost {c} outside [0, 1]")));
        }
        Ok(CostVector { candidates, costs })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Position of the cheapest candidate; ties go to the lowest token id.
    pub fn best_index(&self) -> usize {
        (0..self.len())
            .min_by(|&i, &j| {
                self.costs[i]
                    .total_cmp(&self.costs[j])
                    .then(self.candidates[i].cmp(&self.candidates[j]))
            })
            .expect("cost vectors are nonempty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ll,
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SamplingRepr", into = "SamplingRepr")]
pub enum Sampling {
    /// Every vocabulary entry is a candidate, in id order.
    Full,
    Sampled { top_k: usize, neighbors: usize },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SamplingRepr {
    Name(String),
    Sampled(SampledRepr),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampledRepr {
    top_k: usize,
    neighbors: usize,
}

impl TryFrom<SamplingRepr> for Sampling {
    type Error = String;

    fn try_from(r: SamplingRepr) -> std::result::Result<Self, String> {
        match r {
            SamplingRepr::Name(n) if n == "full" => Ok(Sampling::Full),
            SamplingRepr::Name(n) => Err(format!(
                "unknown sampling `{n}`; expected \"full\" or {{\"top_k\": k, \"neighbors\": n}}"
            )),
            SamplingRepr::Sampled(s) => Ok(Sampling::Sampled {
                top_k: s.top_k,
                neighbors: s.neighbors,
            }),
        }
    }
}

impl From<Sampling> for SamplingRepr {
    fn from(s: Sampling) -> Self {
        match s {
            Sampling::Full => SamplingRepr::Name("full".into()),
            Sampling::Sampled { top_k, neighbors } => SamplingRepr::Sampled(SampledRepr { top_k, neighbors }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearnnConfig {
    pub rollin: PolicyKind,
    pub rollout: PolicyKind,
    pub loss: LossKind,
    pub alpha: f64,
    pub sampling: Sampling,
    pub max_rollout_len: usize,
}

impl Default for SearnnConfig {
    fn default() -> Self {
        SearnnConfig {
            rollin: PolicyKind::Reference,
            rollout: PolicyKind::Mixed(0.5),
            loss: LossKind::Kl,
            alpha: 1.0,
            sampling: Sampling::Sampled {
                top_k: DEFAULT_TOP_K,
                neighbors: DEFAULT_NEIGHBORS,
            },
            max_rollout_len: 50,
        }
    }
}

impl SearnnConfig {
    pub fn validate(&self) -> Result<()> {
        self.rollin
            .validate()
            .map_err(|e| Error::config("searnn.rollin", e.to_string()))?;
        self.rollout
            .validate()
            .map_err(|e| Error::config("searnn.rollout", e.to_string()))?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("searnn.alpha", "must be a positive finite number"));
        }
        if let Sampling::Sampled { top_k, neighbors } = self.sampling {
            if top_k + neighbors == 0 {
                return Err(Error::config("searnn.sampling", "top_k + neighbors must be at least 1"));
            }
        }
        if self.max_rollout_len == 0 {
            return Err(Error::config("searnn.max_rollout_len", "must be at least 1"));
        }
        Ok(())
    }
}

/// Candidate tokens for cell `t` (which predicts `ref_target[t + 1]`).
///
/// The `top_k` best-scored tokens come first (ties to the lower id), then the
/// reference tokens at positions `t+1−⌊n/2⌋ ..= t+⌈n/2⌉` clipped to
/// `[1, |ref|−1]`, deduplicated in order. Short sets are topped up with the
/// next-best scored tokens, up to `top_k + neighbors` or the vocabulary size.
pub fn sample_candidates(
    scores: &[f64],
    ref_target: &[TokenId],
    t: usize,
    top_k: usize,
    neighbors: usize,
) -> Vec<TokenId> {
    let wanted = (top_k + neighbors).min(scores.len());
    let mut ranked: Vec<TokenId> = (0..scores.len() as TokenId).collect();
    ranked.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));

    let mut seen = HashSet::with_capacity(wanted);
    let mut out = Vec::with_capacity(wanted);
    let mut push = |tok: TokenId, out: &mut Vec<TokenId>| {
        if seen.insert(tok) {
            out.push(tok);
        }
    };
    for &tok in ranked.iter().take(top_k) {
        push(tok, &mut out);
    }
    if ref_target.len() >= 2 {
        let center = t as i64 + 1;
        let lo = (center - (neighbors / 2) as i64).max(1);
        let hi = (center + neighbors.div_ceil(2) as i64 - 1).min(ref_target.len() as i64 - 1);
        for pos in lo..=hi {
            push(ref_target[pos as usize], &mut out);
        }
    }
    for &tok in &ranked {
        if out.len() >= wanted {
            break;
        }
        push(tok, &mut out);
    }
    out
}

/// Costs `c_t(a)` for every candidate `a` at cell `t` of `trajectory`.
///
/// The scored sequence is the roll-in prefix `chosen_tokens[1..=t]`, then `a`,
/// then the roll-out completion, compared with the full reference. Roll-out
/// `a` draws from `derive_seed(rng_seed, [t, a])`.
pub fn compute_cost_vector(
    model: &Seq2Seq,
    trajectory: &Trajectory,
    t: usize,
    candidates: &[TokenId],
    rollout: PolicyKind,
    max_len: usize,
    rng_seed: u64,
) -> Result<CostVector> {
    if t >= trajectory.steps() {
        return Err(Error::Invalid(format!(
            "cell {t} outside trajectory of {} cells",
            trajectory.steps()
        )));
    }
    let reference = strip_special(&trajectory.ref_target);
    let prefix = &trajectory.chosen_tokens[1..=t];
    let state = &trajectory.states[t + 1];
    let suffix = &trajectory.ref_target[(t + 2).min(trajectory.ref_target.len())..];
    let costs = candidates
        .par_iter()
        .map(|&a| {
            let completion = roll_out(
                model,
                state,
                a,
                suffix,
                rollout,
                max_len,
                derive_seed(rng_seed, &[t as u64, a as u64]),
            )?;
            let full: Vec<TokenId> = prefix.iter().chain(&completion).copied().collect();
            Ok(sequence_cost(truncate_at_eos(&full), &reference).0)
        })
        .collect::<Result<Vec<f64>>>()?;
    CostVector::new(candidates.to_vec(), costs)
}

/// `softmax(−α · costs)` over the candidate set.
pub fn kl_target(cost: &CostVector, alpha: f64) -> Result<TargetDistribution> {
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::Invalid(format!("alpha must be positive, got {alpha}")));
    }
    let neg: Vec<f64> = cost.costs.iter().map(|c| -alpha * c).collect();
    Ok(TargetDistribution {
        probs: tensor::softmax(&neg),
    })
}

fn check_scores(tape: &Tape, scores: NodeId, cost: &CostVector) -> Result<()> {
    let s = tape.value(scores);
    if s.rows() != 1 || s.cols() != cost.len() {
        return Err(Error::shape(
            "cost-sensitive loss",
            format!("scores {:?} for {} candidates", s.shape(), cost.len()),
        ));
    }
    Ok(())
}

/// `−log softmax(scores)[a*]` with `a*` the cheapest candidate.
pub fn ll_loss_graph(tape: &mut Tape, scores: NodeId, cost: &CostVector) -> Result<NodeId> {
    check_scores(tape, scores, cost)?;
    let ls = tape.log_softmax(scores)?;
    let picked = tape.pick(ls, 0, cost.best_index())?;
    tape.scale(picked, -1.0)
}

/// `−Σ_a P_C(a) log P_M(a)` with `P_C = softmax(−α·costs)`.
pub fn kl_loss_graph(tape: &mut Tape, scores: NodeId, cost: &CostVector, alpha: f64) -> Result<NodeId> {
    check_scores(tape, scores, cost)?;
    let target = kl_target(cost, alpha)?;
    let ls = tape.log_softmax(scores)?;
    let pc = tape.leaf(Tensor::row(target.probs))?;
    let weighted = tape.mul(ls, pc)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0)
}

fn scalar_loss(scores: &[f64], build: impl FnOnce(&mut Tape, NodeId) -> Result<NodeId>) -> Result<f64> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let s = tape.leaf(Tensor::row(scores.to_vec()))?;
    let loss = build(&mut tape, s)?;
    Ok(tape.value(loss).data()[0])
}

/// Log-loss on the cheapest candidate; `scores` are restricted to the candidates.
pub fn ll_loss(scores: &[f64], cost: &CostVector) -> Result<f64> {
    scalar_loss(scores, |tape, s| ll_loss_graph(tape, s, cost))
}

pub fn kl_loss(scores: &[f64], cost: &CostVector, alpha: f64) -> Result<f64> {
    scalar_loss(scores, |tape, s| kl_loss_graph(tape, s, cost, alpha))
}

/// Roll-in trajectory plus one cost vector per cell.
#[derive(Debug, Clone)]
pub struct SequenceTargets {
    pub trajectory: Trajectory,
    pub cells: Vec<CostVector>,
}

/// Roll-in, candidate selection and roll-outs for one sentence pair. Pure
/// inference over frozen parameters; cells are processed in parallel.
pub fn build_targets(
    model: &Seq2Seq,
    source: &[TokenId],
    ref_target: &[TokenId],
    config: &SearnnConfig,
    rng_seed: u64,
) -> Result<SequenceTargets> {
    config.validate()?;
    let trajectory = roll_in(
        model,
        source,
        ref_target,
        config.rollin,
        derive_seed(rng_seed, &[ROLLIN_STREAM]),
    )?;
    let vocab = model.dims().tgt_vocab;
    let cells = (0..trajectory.steps())
        .into_par_iter()
        .map(|t| {
            let candidates = match config.sampling {
                Sampling::Full => (0..vocab as TokenId).collect(),
                Sampling::Sampled { top_k, neighbors } => sample_candidates(
                    &trajectory.score_vectors[t].scores,
                    ref_target,
                    t,
                    top_k,
                    neighbors,
                ),
            };
            compute_cost_vector(
                model,
                &trajectory,
                t,
                &candidates,
                config.rollout,
                config.max_rollout_len,
                rng_seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceTargets { trajectory, cells })
}

/// Mean over cells of the per-cell cost-sensitive loss, built on `tape` by
/// replaying the roll-in tokens through the decoder.
pub fn searnn_loss_graph(
    tape: &mut Tape,
    model: &Seq2Seq,
    source: &[TokenId],
    targets: &SequenceTargets,
    config: &SearnnConfig,
) -> Result<NodeId> {
    let (mut h, _, _) = model.encode_graph(tape, source)?;
    let mut total: Option<NodeId> = None;
    for (t, cost) in targets.cells.iter().enumerate() {
        let (scores, next) = model.decode_step_graph(tape, h, targets.trajectory.chosen_tokens[t])?;
        h = next;
        let cols: Vec<usize> = cost.candidates.iter().map(|&c| c as usize).collect();
        let restricted = tape.gather_cols(scores, &cols)?;
        let cell = match config.loss {
            LossKind::Ll => ll_loss_graph(tape, restricted, cost)?,
            LossKind::Kl => kl_loss_graph(tape, restricted, cost, config.alpha)?,
        };
        total = Some(match total {
            Some(acc) => tape.add(acc, cell)?,
            None => cell,
        });
    }
    let total = total.ok_or_else(|| Error::Invalid("reference has no cells".into()))?;
    tape.scale(total, 1.0 / targets.cells.len() as f64)
}

pub fn searnn_sequence_loss(
    model: &Seq2Seq,
    source: &[TokenId],
    ref_target: &[TokenId],
    config: &SearnnConfig,
    rng_seed: u64,
) -> Result<f64> {
    let targets = build_targets(model, source, ref_target, config, rng_seed)?;
    let mut tape = model.tape();
    let loss = searnn_loss_graph(&mut tape, model, source, &targets, config)?;
    Ok(tape.value(loss).data()[0])
}

/// Teacher-forced negative log-likelihood, averaged over target cells.
pub fn mle_loss_graph(tape: &mut Tape, model: &Seq2Seq, source: &[TokenId], target: &[TokenId]) -> Result<NodeId> {
    if target.len() < 2 {
        return Err(Error::Invalid("target must contain at least BOS and EOS".into()));
    }
    // cells up to and including the one predicting the first EOS; PAD after it is ignored
    let cells = target[1..]
        .iter()
        .position(|&t| t == EOS)
        .map_or(target.len() - 1, |p| p + 1);
    let (mut h, _, _) = model.encode_graph(tape, source)?;
    let mut total: Option<NodeId> = None;
    for t in 0..cells {
        let (scores, next) = model.decode_step_graph(tape, h, target[t])?;
        h = next;
        let ls = tape.log_softmax(scores)?;
        let picked = tape.pick(ls, 0, target[t + 1] as usize)?;
        let cell = tape.scale(picked, -1.0)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, cell)?,
            None => cell,
        });
    }
    tape.scale(total.expect("at least one cell"), 1.0 / cells as f64)
}

pub fn mle_loss(model: &Seq2Seq, source: &[TokenId], target: &[TokenId]) -> Result<f64> {
    let mut tape = model.tape();
    let loss = mle_loss_graph(&mut tape, model, source, target)?;
    Ok(tape.value(loss).data()[0])
}
