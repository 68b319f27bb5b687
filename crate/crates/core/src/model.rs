//! GRU encoder-decoder: a bidirectional single-layer encoder whose final
//! states are projected into the initial state of a single-layer decoder.
//!
//! Every forward computation is expressed once, as graph construction on a
//! [`Tape`]. Inference simply builds a throwaway tape, so the values seen
//! during roll-outs are bit-identical to the ones the training graph sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::corpus::{TokenId, TokenSequence, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Tensor};

pub const DEFAULT_EMBED_DIM: usize = 64;
pub const DEFAULT_HIDDEN_DIM: usize = 256;
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

/// Parameter handles of one GRU cell.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

impl GruParams {
    /// Registers `{prefix}.W_z … {prefix}.b_h` with input size `input` and
    /// hidden size `hidden`.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut add = |name: &str, rows: usize| {
            store.insert_uniform(format!("{prefix}.{name}"), rows, hidden, INIT_SCALE, rng)
        };
        Ok(GruParams {
            w_z: add("W_z", input)?,
            u_z: add("U_z", hidden)?,
            b_z: add("b_z", 1)?,
            w_r: add("W_r", input)?,
            u_r: add("U_r", hidden)?,
            b_r: add("b_r", 1)?,
            w_h: add("W_h", input)?,
            u_h: add("U_h", hidden)?,
            b_h: add("b_h", 1)?,
        })
    }

    fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |name: &str| {
            store
                .id(&format!("{prefix}.{name}"))
                .ok_or_else(|| Error::Invalid(format!("missing parameter {prefix}.{name}")))
        };
        Ok(GruParams {
            w_z: get("W_z")?,
            u_z: get("U_z")?,
            b_z: get("b_z")?,
            w_r: get("W_r")?,
            u_r: get("U_r")?,
            b_r: get("b_r")?,
            w_h: get("W_h")?,
            u_h: get("U_h")?,
            b_h: get("b_h")?,
        })
    }
}

/// One GRU update on row vectors `x` (`1 × in`) and `h_prev` (`1 × hidden`):
///
/// ```text
/// z  = σ(x·W_z + h·U_z + b_z)
/// r  = σ(x·W_r + h·U_r + b_r)
/// h~ = tanh(x·W_h + (r⊙h)·U_h + b_h)
/// h' = (1 − z)⊙h + z⊙h~
/// ```
pub fn gru_step(tape: &mut Tape, p: &GruParams, x: NodeId, h_prev: NodeId) -> Result<NodeId> {
    let gate = |tape: &mut Tape, w: ParamId, u: ParamId, b: ParamId, h: NodeId| -> Result<NodeId> {
        let (w, u, b) = (tape.param(w), tape.param(u), tape.param(b));
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(h, u)?;
        let s = tape.add(xw, hu)?;
        tape.add(s, b)
    };
    let z_pre = gate(tape, p.w_z, p.u_z, p.b_z, h_prev)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, p.w_r, p.u_r, p.b_r, h_prev)?;
    let r = tape.sigmoid(r_pre)?;
    let rh = tape.mul(r, h_prev)?;
    let cand_pre = gate(tape, p.w_h, p.u_h, p.b_h, rh)?;
    let cand = tape.tanh(cand_pre)?;
    let keep = tape.one_minus(z)?;
    let carried = tape.mul(keep, h_prev)?;
    let fresh = tape.mul(z, cand)?;
    tape.add(carried, fresh)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub context: Vec<f64>,
    /// `[src_len × 2·hidden]`, forward state then backward state per position.
    pub per_position_states: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub hidden: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
}

/// Masks `PAD` and `BOS` to the most negative finite score and takes the
/// argmax, ties going to the lowest id.
pub fn masked_argmax(scores: &[f64]) -> TokenId {
    let mut masked = scores.to_vec();
    for special in [PAD, BOS] {
        if let Some(s) = masked.get_mut(special as usize) {
            *s = f64::MIN;
        }
    }
    tensor::argmax(&masked) as TokenId
}

#[derive(Debug, Clone)]
struct Layout {
    src_embed: ParamId,
    tgt_embed: ParamId,
    enc_fwd: GruParams,
    enc_bwd: GruParams,
    bridge_w: ParamId,
    bridge_b: ParamId,
    dec: GruParams,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Seq2Seq {
    dims: ModelDims,
    layout: Layout,
    store: ParamStore,
}

impl Seq2Seq {
    /// Fresh model with `uniform(−0.08, 0.08)` parameters drawn from `seed`.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        if dims.src_vocab == 0 || dims.tgt_vocab == 0 || dims.embed_dim == 0 || dims.hidden_dim == 0 {
            return Err(Error::Invalid(format!("degenerate model dims {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (e, h) = (dims.embed_dim, dims.hidden_dim);
        let s = INIT_SCALE;
        store.insert_uniform("src_embed", dims.src_vocab, e, s, &mut rng)?;
        store.insert_uniform("tgt_embed", dims.tgt_vocab, e, s, &mut rng)?;
        GruParams::register(&mut store, "enc_fwd", e, h, &mut rng)?;
        GruParams::register(&mut store, "enc_bwd", e, h, &mut rng)?;
        store.insert_uniform("bridge.W", 2 * h, h, s, &mut rng)?;
        store.insert_uniform("bridge.b", 1, h, s, &mut rng)?;
        GruParams::register(&mut store, "dec", e, h, &mut rng)?;
        store.insert_uniform("out.W", h, dims.tgt_vocab, s, &mut rng)?;
        store.insert_uniform("out.b", 1, dims.tgt_vocab, s, &mut rng)?;
        Self::from_store(dims, store)
    }

    /// Wraps an existing store, checking every expected parameter is present
    /// with the shape `dims` implies.
    pub fn from_store(dims: ModelDims, store: ParamStore) -> Result<Self> {
        let expected = Self::expected_shapes(dims);
        if store.len() != expected.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameters, found {}",
                expected.len(),
                store.len()
            )));
        }
        for (name, shape) in &expected {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))?;
            let got = store.value(id).shape();
            if got != *shape {
                return Err(Error::Invalid(format!(
                    "parameter {name} has shape {got:?}, expected {shape:?}"
                )));
            }
        }
        let id = |n: &str| store.id(n).expect("checked above");
        let layout = Layout {
            src_embed: id("src_embed"),
            tgt_embed: id("tgt_embed"),
            enc_fwd: GruParams::lookup(&store, "enc_fwd")?,
            enc_bwd: GruParams::lookup(&store, "enc_bwd")?,
            bridge_w: id("bridge.W"),
            bridge_b: id("bridge.b"),
            dec: GruParams::lookup(&store, "dec")?,
            out_w: id("out.W"),
            out_b: id("out.b"),
        };
        Ok(Seq2Seq {
            dims,
            layout,
            store,
        })
    }

    /// Parameter names and shapes in registration order.
    pub fn expected_shapes(dims: ModelDims) -> Vec<(String, [usize; 2])> {
        let (e, h) = (dims.embed_dim, dims.hidden_dim);
        let mut v = vec![
            ("src_embed".to_string(), [dims.src_vocab, e]),
            ("tgt_embed".to_string(), [dims.tgt_vocab, e]),
        ];
        let gru = |v: &mut Vec<(String, [usize; 2])>, prefix: &str| {
            for (n, rows) in [
                ("W_z", e),
                ("U_z", h),
                ("b_z", 1),
                ("W_r", e),
                ("U_r", h),
                ("b_r", 1),
                ("W_h", e),
                ("U_h", h),
                ("b_h", 1),
            ] {
                v.push((format!("{prefix}.{n}"), [rows, h]));
            }
        };
        gru(&mut v, "enc_fwd");
        gru(&mut v, "enc_bwd");
        v.push(("bridge.W".into(), [2 * h, h]));
        v.push(("bridge.b".into(), [1, h]));
        gru(&mut v, "dec");
        v.push(("out.W".into(), [h, dims.tgt_vocab]));
        v.push(("out.b".into(), [1, dims.tgt_vocab]));
        v
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn tape(&self) -> Tape<'_> {
        Tape::new(&self.store)
    }

    fn check_tokens(seq: &[TokenId], vocab: usize, side: &str) -> Result<()> {
        match seq.iter().find(|&&t| t as usize >= vocab) {
            Some(bad) => Err(Error::Invalid(format!(
                "{side} token id {bad} out of range for vocabulary of {vocab}"
            ))),
            None => Ok(()),
        }
    }

    /// Builds the encoder on `tape`; returns (context `1 × hidden`, per-position
    /// forward states, per-position backward states).
    pub fn encode_graph(
        &self,
        tape: &mut Tape,
        source: &[TokenId],
    ) -> Result<(NodeId, Vec<NodeId>, Vec<NodeId>)> {
        if source.is_empty() {
            return Err(Error::Invalid("cannot encode an empty source".into()));
        }
        Self::check_tokens(source, self.dims.src_vocab, "source")?;
        let l = &self.layout;
        let table = tape.param(l.src_embed);
        let ids: Vec<usize> = source.iter().map(|&t| t as usize).collect();
        let embedded = ids
            .iter()
            .map(|&i| tape.row_select(table, &[i]))
            .collect::<Result<Vec<_>>>()?;

        let zero = tape.leaf(Tensor::zeros(1, self.dims.hidden_dim))?;
        let mut fwd = Vec::with_capacity(source.len());
        let mut h = zero;
        for &x in &embedded {
            h = gru_step(tape, &l.enc_fwd, x, h)?;
            fwd.push(h);
        }
        let mut bwd = vec![zero; source.len()];
        let mut h = zero;
        for (i, &x) in embedded.iter().enumerate().rev() {
            h = gru_step(tape, &l.enc_bwd, x, h)?;
            bwd[i] = h;
        }
        let last = *fwd.last().expect("nonempty");
        let joined = tape.concat(&[last, bwd[0]])?;
        let w = tape.param(l.bridge_w);
        let b = tape.param(l.bridge_b);
        let proj = tape.matmul(joined, w)?;
        let pre = tape.add(proj, b)?;
        let context = tape.tanh(pre)?;
        Ok((context, fwd, bwd))
    }

    /// One decoder cell: feeds `prev_token` into hidden state `h`, returning
    /// (scores `1 × tgt_vocab`, new hidden).
    pub fn decode_step_graph(
        &self,
        tape: &mut Tape,
        h: NodeId,
        prev_token: TokenId,
    ) -> Result<(NodeId, NodeId)> {
        Self::check_tokens(&[prev_token], self.dims.tgt_vocab, "target")?;
        let l = &self.layout;
        let table = tape.param(l.tgt_embed);
        let x = tape.row_select(table, &[prev_token as usize])?;
        let h_new = gru_step(tape, &l.dec, x, h)?;
        let w = tape.param(l.out_w);
        let b = tape.param(l.out_b);
        let logits = tape.matmul(h_new, w)?;
        let scores = tape.add(logits, b)?;
        Ok((scores, h_new))
    }

    pub fn encode(&self, source: &[TokenId]) -> Result<EncoderOutput> {
        let mut tape = self.tape();
        let (ctx, fwd, bwd) = self.encode_graph(&mut tape, source)?;
        let h = self.dims.hidden_dim;
        let mut states = Tensor::zeros(source.len(), 2 * h);
        for (i, (&f, &b)) in fwd.iter().zip(&bwd).enumerate() {
            let row = &mut states.data_mut()[i * 2 * h..(i + 1) * 2 * h];
            row[..h].copy_from_slice(tape.value(f).data());
            row[h..].copy_from_slice(tape.value(b).data());
        }
        Ok(EncoderOutput {
            context: tape.value(ctx).data().to_vec(),
            per_position_states: Some(states),
        })
    }

    pub fn init_decoder(&self, enc: &EncoderOutput) -> DecoderState {
        DecoderState {
            hidden: enc.context.clone(),
        }
    }

    pub fn decode_step(&self, state: &DecoderState, prev_token: TokenId) -> Result<(ScoreVector, DecoderState)> {
        if state.hidden.len() != self.dims.hidden_dim {
            return Err(Error::shape(
                "decode_step",
                format!("state of {} for hidden {}", state.hidden.len(), self.dims.hidden_dim),
            ));
        }
        let mut tape = self.tape();
        let h = tape.leaf(Tensor::row(state.hidden.clone()))?;
        let (scores, h_new) = self.decode_step_graph(&mut tape, h, prev_token)?;
        Ok((
            ScoreVector {
                scores: tape.value(scores).data().to_vec(),
            },
            DecoderState {
                hidden: tape.value(h_new).data().to_vec(),
            },
        ))
    }

    /// `[BOS, …]` built from repeated masked argmax until `EOS` (kept) or
    /// `max_len` generated tokens.
    pub fn greedy_decode(&self, source: &[TokenId], max_len: usize) -> Result<TokenSequence> {
        let enc = self.encode(source)?;
        let mut state = self.init_decoder(&enc);
        let mut out = vec![BOS];
        let mut prev = BOS;
        for _ in 0..max_len {
            let (scores, next) = self.decode_step(&state, prev)?;
            state = next;
            prev = masked_argmax(&scores.scores);
            out.push(prev);
            if prev == EOS {
                break;
            }
        }
        Ok(out)
    }
}
