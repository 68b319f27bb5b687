//! Per-layer finite-difference checks over many random seeds: every tape
//! primitive, the GRU cell, encoder, decoder and the three training losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Fault, NodeId, OpKind, Tape};
use crate::corpus::{TokenId, BOS, EOS, NUM_SPECIALS};
use crate::error::Result;
use crate::gradcheck::finite_difference_check;
use crate::model::{gru_step, GruParams, ModelDims, Seq2Seq};
use crate::params::ParamStore;
use crate::policy::PolicyKind;
use crate::searnn::{
    build_targets, kl_loss_graph, ll_loss_graph, mle_loss_graph, searnn_loss_graph, CostVector, LossKind,
    Sampling, SearnnConfig,
};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-4;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Composite layers checked after the primitives.
pub const COMPOSITE_LAYERS: [&str; 7] = [
    "gru_step",
    "encoder",
    "decoder",
    "mle_loss",
    "ll_loss",
    "kl_loss",
    "searnn_loss",
];

pub fn layer_names() -> Vec<&'static str> {
    OpKind::DIFFERENTIABLE
        .iter()
        .map(|k| k.name())
        .chain(COMPOSITE_LAYERS)
        .collect()
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub seeds: u64,
    pub eps: f64,
    pub tol: f64,
    pub dims: ModelDims,
    pub fault: Option<Fault>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            seeds: 20,
            eps: DEFAULT_EPS,
            tol: DEFAULT_TOL,
            dims: small_dims(),
            fault: None,
        }
    }
}

pub fn small_dims() -> ModelDims {
    ModelDims {
        src_vocab: 9,
        tgt_vocab: 8,
        embed_dim: 4,
        hidden_dim: 5,
    }
}

#[derive(Debug, Clone)]
pub struct ParamSummary {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct LayerReport {
    pub layer: String,
    pub seeds: u64,
    pub max_rel_err: f64,
    /// Worst error per parameter over all seeds, in registration order.
    pub params: Vec<ParamSummary>,
    pub passed: bool,
}

type LossFn = Box<dyn Fn(&mut Tape) -> Result<NodeId>>;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..=scale)).collect();
    Tensor::from_vec(rows, cols, data).expect("sizes agree")
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry gets a distinct weight.
fn project(tape: &mut Tape, out: NodeId, r: &Tensor) -> Result<NodeId> {
    let w = tape.leaf(r.clone())?;
    let m = tape.mul(out, w)?;
    tape.sum(m)
}

fn primitive_case(op: OpKind, rng: &mut ChaCha8Rng) -> Result<(ParamStore, LossFn)> {
    let mut store = ParamStore::new();
    let mut add = |name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        store.insert(name, uniform(rng, rows, cols, 1.5))
    };
    let a = add("a", 3, 4, rng)?;
    let (b, out_shape): (_, [usize; 2]) = match op {
        OpKind::MatMul => (add("b", 4, 2, rng)?, [3, 2]),
        OpKind::Add | OpKind::Sub => (add("b", 1, 4, rng)?, [3, 4]),
        OpKind::Mul => (add("b", 3, 4, rng)?, [3, 4]),
        OpKind::Concat => (add("b", 3, 2, rng)?, [3, 6]),
        OpKind::RowSelect => (add("b", 1, 1, rng)?, [4, 4]),
        OpKind::GatherCols => (add("b", 1, 1, rng)?, [3, 3]),
        OpKind::Sum | OpKind::Pick => (add("b", 1, 1, rng)?, [1, 1]),
        _ => (add("b", 1, 1, rng)?, [3, 4]),
    };
    let r = uniform(rng, out_shape[0], out_shape[1], 1.0);
    let f: LossFn = Box::new(move |tape: &mut Tape| {
        let (pa, pb) = (tape.param(a), tape.param(b));
        let out = match op {
            OpKind::MatMul => tape.matmul(pa, pb)?,
            OpKind::Add => tape.add(pa, pb)?,
            OpKind::Sub => tape.sub(pa, pb)?,
            OpKind::Mul => tape.mul(pa, pb)?,
            OpKind::Scale => tape.scale(pa, -1.7)?,
            OpKind::OneMinus => tape.one_minus(pa)?,
            OpKind::Sigmoid => tape.sigmoid(pa)?,
            OpKind::Tanh => tape.tanh(pa)?,
            OpKind::Concat => tape.concat(&[pa, pb])?,
            OpKind::RowSelect => tape.row_select(pa, &[2, 0, 2, 1])?,
            OpKind::GatherCols => tape.gather_cols(pa, &[3, 0, 3])?,
            OpKind::LogSoftmax => tape.log_softmax(pa)?,
            OpKind::Sum => tape.sum(pa)?,
            OpKind::Pick => tape.pick(pa, 1, 2)?,
            OpKind::Leaf | OpKind::Param => unreachable!("not a differentiable primitive"),
        };
        let loss = project(tape, out, &r)?;
        // keep `b` in the graph for ops that ignore it, so every parameter is checked
        let pb2 = tape.param(b);
        let sq = tape.mul(pb2, pb2)?;
        let extra = tape.sum(sq)?;
        tape.add(loss, extra)
    });
    Ok((store, f))
}

/// Parameter range for model-level checks. Larger weights saturate the gates
/// and smaller ones shrink gradients through the recurrences; both push some
/// entries down to the finite-difference noise floor (≈1e-12 absolute).
const MODEL_SCALE: f64 = 0.7;

/// Graph builders read parameter values from the tape's store, so a model
/// captured by a check closure only contributes its layout; the store being
/// perturbed is the clone handed to the checker.
fn random_model(dims: ModelDims, rng: &mut ChaCha8Rng) -> Result<Seq2Seq> {
    let mut m = Seq2Seq::new(dims, rng.random())?;
    for p in m.store_mut().iter_mut() {
        let [r, c] = p.value.shape();
        p.value = uniform(rng, r, c, MODEL_SCALE);
    }
    Ok(m)
}

fn random_sentence(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<TokenId> {
    let len = rng.random_range(1..=max_len);
    let mut s = vec![BOS];
    s.extend((0..len).map(|_| rng.random_range(NUM_SPECIALS as TokenId..vocab as TokenId)));
    s.push(EOS);
    s
}

fn random_costs(rng: &mut ChaCha8Rng, n: usize) -> Result<CostVector> {
    let candidates = (0..n as TokenId).collect();
    let costs = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
    CostVector::new(candidates, costs)
}

fn composite_case(layer: &str, dims: ModelDims, rng: &mut ChaCha8Rng) -> Result<(ParamStore, LossFn)> {
    let h = dims.hidden_dim;
    match layer {
        "gru_step" => {
            let mut store = ParamStore::new();
            let x = store.insert("x", uniform(rng, 1, dims.embed_dim, 1.0))?;
            let hp = store.insert("h_prev", uniform(rng, 1, h, 0.9))?;
            let gp = GruParams::register(&mut store, "gru", dims.embed_dim, h, rng)?;
            for p in store.iter_mut() {
                let [r, c] = p.value.shape();
                p.value = uniform(rng, r, c, 0.8);
            }
            let r = uniform(rng, 1, h, 1.0);
            Ok((
                store,
                Box::new(move |tape: &mut Tape| {
                    let (x, hp) = (tape.param(x), tape.param(hp));
                    let out = gru_step(tape, &gp, x, hp)?;
                    project(tape, out, &r)
                }),
            ))
        }
        "encoder" => {
            let m = random_model(dims, rng)?;
            let src = random_sentence(rng, dims.src_vocab, 4);
            let r = uniform(rng, 1, h, 1.0);
            let r_states = uniform(rng, 1, h, 1.0);
            Ok((
                m.store().clone(),
                Box::new(move |tape: &mut Tape| {
                    let (ctx, fwd, bwd) = m.encode_graph(tape, &src)?;
                    let a = project(tape, ctx, &r)?;
                    let mid = fwd.len() / 2;
                    let b = project(tape, fwd[mid], &r_states)?;
                    let c = project(tape, bwd[mid], &r_states)?;
                    let ab = tape.add(a, b)?;
                    tape.add(ab, c)
                }),
            ))
        }
        "decoder" => {
            let m = random_model(dims, rng)?;
            let src = random_sentence(rng, dims.src_vocab, 3);
            let fed = random_sentence(rng, dims.tgt_vocab, 3);
            let rs: Vec<Tensor> = fed.iter().map(|_| uniform(rng, 1, dims.tgt_vocab, 1.0)).collect();
            Ok((
                m.store().clone(),
                Box::new(move |tape: &mut Tape| {
                    let (mut hn, _, _) = m.encode_graph(tape, &src)?;
                    let mut total: Option<NodeId> = None;
                    for (&tok, r) in fed.iter().zip(&rs) {
                        let (scores, next) = m.decode_step_graph(tape, hn, tok)?;
                        hn = next;
                        let term = project(tape, scores, r)?;
                        total = Some(match total {
                            Some(t) => tape.add(t, term)?,
                            None => term,
                        });
                    }
                    Ok(total.expect("nonempty"))
                }),
            ))
        }
        "mle_loss" => {
            let m = random_model(dims, rng)?;
            let src = random_sentence(rng, dims.src_vocab, 4);
            let tgt = random_sentence(rng, dims.tgt_vocab, 4);
            Ok((
                m.store().clone(),
                Box::new(move |tape: &mut Tape| {
                    mle_loss_graph(tape, &m, &src, &tgt)
                }),
            ))
        }
        "ll_loss" | "kl_loss" => {
            let n = rng.random_range(2..=8);
            let mut store = ParamStore::new();
            let s = store.insert("scores", uniform(rng, 1, n, 2.0))?;
            let cost = random_costs(rng, n)?;
            let alpha = rng.random_range(0.5..=4.0);
            let kl = layer == "kl_loss";
            Ok((
                store,
                Box::new(move |tape: &mut Tape| {
                    let s = tape.param(s);
                    if kl {
                        kl_loss_graph(tape, s, &cost, alpha)
                    } else {
                        ll_loss_graph(tape, s, &cost)
                    }
                }),
            ))
        }
        "searnn_loss" => {
            let m = random_model(dims, rng)?;
            let src = random_sentence(rng, dims.src_vocab, 4);
            let tgt = random_sentence(rng, dims.tgt_vocab, 4);
            let cfg = SearnnConfig {
                rollin: PolicyKind::Mixed(0.5),
                rollout: PolicyKind::Mixed(0.5),
                loss: LossKind::Kl,
                alpha: 2.0,
                sampling: Sampling::Sampled { top_k: 3, neighbors: 2 },
                max_rollout_len: 8,
            };
            // costs are constants of the loss, so they are computed once up front
            let targets = build_targets(&m, &src, &tgt, &cfg, rng.random())?;
            Ok((
                m.store().clone(),
                Box::new(move |tape: &mut Tape| {
                    searnn_loss_graph(tape, &m, &src, &targets, &cfg)
                }),
            ))
        }
        other => Err(crate::error::Error::Invalid(format!("unknown layer `{other}`"))),
    }
}

/// Runs one layer over `opts.seeds` seeds and folds the per-parameter maxima.
pub fn check_layer(layer: &str, opts: &CheckOptions) -> Result<LayerReport> {
    let op = OpKind::from_name(layer);
    let mut params: Vec<ParamSummary> = Vec::new();
    for seed in 0..opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(layer.len() as u64));
        let (mut store, f) = match op {
            Some(op) => primitive_case(op, &mut rng)?,
            None => composite_case(layer, opts.dims, &mut rng)?,
        };
        let report = finite_difference_check(&f, &mut store, opts.eps, opts.tol, opts.fault)?;
        for pc in report.params {
            match params.iter_mut().find(|p| p.name == pc.name) {
                Some(p) => p.max_rel_err = p.max_rel_err.max(pc.max_rel_err),
                None => params.push(ParamSummary {
                    name: pc.name,
                    max_rel_err: pc.max_rel_err,
                }),
            }
        }
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(LayerReport {
        layer: layer.to_string(),
        seeds: opts.seeds,
        max_rel_err,
        params,
        passed: max_rel_err < opts.tol,
    })
}

pub fn check_all_layers(opts: &CheckOptions) -> Result<Vec<LayerReport>> {
    layer_names().into_iter().map(|l| check_layer(l, opts)).collect()
}
