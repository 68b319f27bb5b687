//! Roll-in and roll-out policies.
//!
//! A roll-in walks the decoder along the reference for `|y| − 1` cells,
//! feeding either ground-truth tokens, the model's own argmax, or a per-cell
//! Bernoulli mixture of the two. A roll-out starts from one of those cells,
//! forces a candidate token, and completes the sequence under a policy.
//!
//! Randomness is never shared: each roll-in or roll-out owns a ChaCha stream
//! seeded from [`derive_seed`], so running roll-outs in parallel and in any
//! order gives the same result.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{TokenId, TokenSequence, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{masked_argmax, DecoderState, ScoreVector, Seq2Seq};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyKind {
    Reference,
    Learned,
    /// Feeds the reference token with probability `p`, the model's argmax otherwise.
    Mixed(f64),
}

impl PolicyKind {
    pub fn validate(self) -> Result<Self> {
        match self {
            PolicyKind::Mixed(p) if !(0.0..=1.0).contains(&p) => {
                Err(Error::Invalid(format!("mixing probability {p} outside [0, 1]")))
            }
            k => Ok(k),
        }
    }

    /// Draws whether this step follows the reference. Only `Mixed` consumes
    /// randomness.
    fn use_reference<R: Rng>(self, rng: &mut R) -> bool {
        match self {
            PolicyKind::Reference => true,
            PolicyKind::Learned => false,
            PolicyKind::Mixed(p) => rng.random_bool(p),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::Reference => f.write_str("reference"),
            PolicyKind::Learned => f.write_str("learned"),
            PolicyKind::Mixed(p) => write!(f, "mixed:{p}"),
        }
    }
}

pub const POLICY_SYNTAX: &str = "reference, learned, mixed:<p> with p in [0, 1]";

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("unknown policy `{s}`; expected one of: {POLICY_SYNTAX}"));
        match s {
            "reference" => Ok(PolicyKind::Reference),
            "learned" => Ok(PolicyKind::Learned),
            _ => {
                let p = s.strip_prefix("mixed:").ok_or_else(bad)?;
                let p: f64 = p.trim().parse().map_err(|_| bad())?;
                PolicyKind::Mixed(p).validate().map_err(|_| bad())
            }
        }
    }
}

impl Serialize for PolicyKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PolicyKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of task coordinates, e.g.
/// `derive_seed(sentence_seed, &[step, candidate])`.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p).rotate_left(17)))
}

/// Stream tag for roll-in draws, distinct from any `(step, candidate)` path.
pub const ROLLIN_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `states[t]` is the state fed `chosen_tokens[t]`; one more than tokens.
    pub states: Vec<DecoderState>,
    pub chosen_tokens: TokenSequence,
    /// `score_vectors[t]` are the scores produced at cell `t`.
    pub score_vectors: Vec<ScoreVector>,
    pub ref_target: TokenSequence,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.chosen_tokens.len()
    }
}

fn check_reference(ref_target: &[TokenId]) -> Result<()> {
    if ref_target.len() < 2 || ref_target[0] != BOS || ref_target[ref_target.len() - 1] != EOS {
        return Err(Error::Invalid("reference must be BOS … EOS with at least two tokens".into()));
    }
    Ok(())
}

/// Runs the decoder for `|ref_target| − 1` cells. Cell 0 is always fed `BOS`;
/// cell `t > 0` is fed `ref_target[t]` or the argmax of cell `t − 1`'s scores
/// according to `policy`.
pub fn roll_in(
    model: &Seq2Seq,
    source: &[TokenId],
    ref_target: &[TokenId],
    policy: PolicyKind,
    rng_seed: u64,
) -> Result<Trajectory> {
    check_reference(ref_target)?;
    let policy = policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let steps = ref_target.len() - 1;
    let enc = model.encode(source)?;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(model.init_decoder(&enc));
    let mut chosen = Vec::with_capacity(steps);
    let mut scores: Vec<ScoreVector> = Vec::with_capacity(steps);
    for t in 0..steps {
        let token = if t == 0 {
            BOS
        } else if policy.use_reference(&mut rng) {
            ref_target[t]
        } else {
            masked_argmax(&scores[t - 1].scores)
        };
        let (s, next) = model.decode_step(&states[t], token)?;
        chosen.push(token);
        scores.push(s);
        states.push(next);
    }
    Ok(Trajectory {
        states,
        chosen_tokens: chosen,
        score_vectors: scores,
        ref_target: ref_target.to_vec(),
    })
}

/// Completes a sequence after forcing `forced_token` into `state`.
///
/// Returns `[forced_token, …]`, ending at the first `EOS` or after `max_len`
/// tokens following the forced one. Reference steps copy `ref_suffix`
/// position by position and emit `EOS` once it is exhausted. The model is
/// only run when a learned step actually needs its prediction.
pub fn roll_out(
    model: &Seq2Seq,
    state: &DecoderState,
    forced_token: TokenId,
    ref_suffix: &[TokenId],
    policy: PolicyKind,
    max_len: usize,
    rng_seed: u64,
) -> Result<TokenSequence> {
    let policy = policy.validate()?;
    if forced_token as usize >= model.dims().tgt_vocab {
        return Err(Error::Invalid(format!("forced token {forced_token} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = vec![forced_token];
    let mut state = state.clone();
    // out[..fed] have already been run through the decoder
    let mut fed = 0usize;
    let mut last_scores: Option<ScoreVector> = None;
    while out.last() != Some(&EOS) && out.len() <= max_len {
        let k = out.len() - 1;
        let next = if policy.use_reference(&mut rng) {
            ref_suffix.get(k).copied().unwrap_or(EOS)
        } else {
            while fed < out.len() {
                let (s, n) = model.decode_step(&state, out[fed])?;
                state = n;
                last_scores = Some(s);
                fed += 1;
            }
            masked_argmax(&last_scores.as_ref().expect("fed at least once").scores)
        };
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use crate::tensor::Tensor;

    fn model(seed: u64) -> Seq2Seq {
        Seq2Seq::new(
            ModelDims {
                src_vocab: 8,
                tgt_vocab: 8,
                embed_dim: 3,
                hidden_dim: 4,
            },
            seed,
        )
        .unwrap()
    }

    fn zero_model() -> Seq2Seq {
        let mut m = model(0);
        for p in m.store_mut().iter_mut() {
            p.value.fill(0.0);
        }
        m
    }

    const SRC: [TokenId; 4] = [BOS, 5, 6, EOS];
    const REF: [TokenId; 5] = [BOS, 4, 7, 5, EOS];

    #[test]
    fn policy_strings() {
        assert_eq!("reference".parse::<PolicyKind>().unwrap(), PolicyKind::Reference);
        assert_eq!("learned".parse::<PolicyKind>().unwrap(), PolicyKind::Learned);
        assert_eq!("mixed:0.25".parse::<PolicyKind>().unwrap(), PolicyKind::Mixed(0.25));
        assert_eq!(PolicyKind::Mixed(0.5).to_string(), "mixed:0.5");
        let err = "oracle".parse::<PolicyKind>().unwrap_err().to_string();
        assert!(err.contains("reference") && err.contains("mixed"));
        assert!("mixed:1.5".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn reference_roll_in_is_teacher_forcing() {
        let m = model(1);
        let tr = roll_in(&m, &SRC, &REF, PolicyKind::Reference, 3).unwrap();
        assert_eq!(tr.chosen_tokens, REF[..4].to_vec());
        assert_eq!(tr.states.len(), tr.chosen_tokens.len() + 1);
        assert_eq!(tr.score_vectors.len(), 4);
    }

    #[test]
    fn degenerate_mixtures() {
        let m = model(2);
        for seed in 0..5 {
            let r = roll_in(&m, &SRC, &REF, PolicyKind::Reference, seed).unwrap();
            let m1 = roll_in(&m, &SRC, &REF, PolicyKind::Mixed(1.0), seed).unwrap();
            assert_eq!(r.chosen_tokens, m1.chosen_tokens);
            let l = roll_in(&m, &SRC, &REF, PolicyKind::Learned, seed).unwrap();
            let m0 = roll_in(&m, &SRC, &REF, PolicyKind::Mixed(0.0), seed).unwrap();
            assert_eq!(l.chosen_tokens, m0.chosen_tokens);
        }
    }

    #[test]
    fn constant_logit_learned_roll_in_follows_tie_rule() {
        let tr = roll_in(&zero_model(), &SRC, &REF, PolicyKind::Learned, 0).unwrap();
        // PAD and BOS are masked, so the lowest remaining id wins.
        assert_eq!(tr.chosen_tokens, vec![BOS, EOS, EOS, EOS]);
    }

    #[test]
    fn trajectory_replays_bit_identically() {
        let m = model(3);
        let tr = roll_in(&m, &SRC, &REF, PolicyKind::Mixed(0.5), 17).unwrap();
        let mut state = m.init_decoder(&m.encode(&SRC).unwrap());
        assert_eq!(state, tr.states[0]);
        for (t, &tok) in tr.chosen_tokens.iter().enumerate() {
            let (s, n) = m.decode_step(&state, tok).unwrap();
            assert_eq!(s, tr.score_vectors[t]);
            assert_eq!(n, tr.states[t + 1]);
            state = n;
        }
    }

    #[test]
    fn reference_roll_out_with_gold_token_reproduces_suffix() {
        let m = model(4);
        let tr = roll_in(&m, &SRC, &REF, PolicyKind::Reference, 0).unwrap();
        let t = 1;
        let out = roll_out(&m, &tr.states[t + 1], REF[t + 1], &REF[t + 2..], PolicyKind::Reference, 20, 0).unwrap();
        assert_eq!(out, REF[t + 1..].to_vec());
    }

    #[test]
    fn reference_roll_out_with_wrong_token_substitutes_one_position() {
        let m = model(4);
        let tr = roll_in(&m, &SRC, &REF, PolicyKind::Reference, 0).unwrap();
        let out = roll_out(&m, &tr.states[1], 6, &REF[2..], PolicyKind::Reference, 20, 0).unwrap();
        assert_eq!(out, vec![6, 7, 5, EOS]);
        let diffs = out.iter().zip(&REF[1..]).filter(|(a, b)| a != b).count();
        assert_eq!(diffs, 1);
    }

    #[test]
    fn learned_roll_out_from_eos_biased_model() {
        let mut m = zero_model();
        let id = m.store().id("out.b").unwrap();
        let mut b = Tensor::zeros(1, 8);
        b.data_mut()[EOS as usize] = 3.0;
        m.store_mut().get_mut(id).value = b;
        let state = DecoderState { hidden: vec![0.0; 4] };
        let out = roll_out(&m, &state, 6, &[], PolicyKind::Learned, 10, 0).unwrap();
        assert_eq!(out, vec![6, EOS]);
    }

    #[test]
    fn roll_out_respects_length_cap_and_eos() {
        let mut m = zero_model();
        let id = m.store().id("out.b").unwrap();
        let mut b = Tensor::zeros(1, 8);
        b.data_mut()[5] = 1.0;
        m.store_mut().get_mut(id).value = b;
        let state = DecoderState { hidden: vec![0.0; 4] };
        let out = roll_out(&m, &state, 6, &[], PolicyKind::Learned, 3, 0).unwrap();
        assert_eq!(out, vec![6, 5, 5, 5]);
        let forced_eos = roll_out(&m, &state, EOS, &[4, 4], PolicyKind::Learned, 3, 0).unwrap();
        assert_eq!(forced_eos, vec![EOS]);
    }

    #[test]
    fn mixed_draw_rate_is_close_to_p() {
        for p in [0.1, 0.5, 0.8] {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(42, &[(p * 10.0) as u64]));
            let hits = (0..10_000).filter(|_| PolicyKind::Mixed(p).use_reference(&mut rng)).count();
            let frac = hits as f64 / 10_000.0;
            assert!((frac - p).abs() < 0.02, "p={p} frac={frac}");
        }
    }

    #[test]
    fn derived_seeds_differ_by_coordinate() {
        let a = derive_seed(1, &[2, 3]);
        assert_eq!(a, derive_seed(1, &[2, 3]));
        assert_ne!(a, derive_seed(1, &[3, 2]));
        assert_ne!(a, derive_seed(2, &[2, 3]));
        assert_ne!(derive_seed(1, &[]), derive_seed(1, &[0]));
    }
}
