//! Monolingual reference network: sentence pooling, global context attention
//! over fitted anchors, and the augmented decoder step.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Group, ParamStore, Var};
use crate::error::{Error, Result};
use crate::lcc::{self, AnchorSet};
use crate::model::{self, CellVars, Extra, Model};
use crate::tensor::Tensor;

/// Sizes of the monolingual network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MRefDims {
    /// Number of anchors fitted to sentence representations.
    pub anchors: usize,
    /// Width of the global attention layer.
    pub attention: usize,
}

impl Default for MRefDims {
    fn default() -> Self {
        MRefDims {
            anchors: 100,
            attention: 64,
        }
    }
}

/// Adds the global attention and zero-initialised decoder input projection.
pub fn attach(model: &mut Model, dims: MRefDims, rng: &mut ChaCha8Rng) -> Result<()> {
    if dims.anchors == 0 || dims.attention == 0 {
        return Err(Error::InvalidArgument(format!("invalid reference dimensions {dims:?}")));
    }
    if model.mref.is_some() {
        return Err(Error::InvalidArgument("model already has a monolingual reference network".into()));
    }
    let (h, ctx, a) = (model.dims.hidden, model.dims.context(), dims.attention);
    let gates = model.dims.cell.gates();
    let scale = |n: usize| 1.0 / (n as f64).sqrt();
    let p = &mut model.params;
    p.insert("mref.att.w", Group::MRef, Tensor::uniform(&[a, h], scale(h), rng))?;
    p.insert("mref.att.u", Group::MRef, Tensor::uniform(&[a, ctx], scale(ctx), rng))?;
    p.insert("mref.att.anchor", Group::MRef, Tensor::uniform(&[a, ctx], scale(ctx), rng))?;
    p.insert("mref.att.v", Group::MRef, Tensor::uniform(&[a], scale(a), rng))?;
    p.insert("mref.proj", Group::MRef, Tensor::zeros(&[gates * h, ctx]))?;
    model.mref = Some(dims);
    Ok(())
}

/// Monolingual network nodes on one graph. The anchor keys `V_α v_j` are
/// computed once per graph.
#[derive(Debug, Clone, Copy)]
pub struct MRefVars {
    pub anchors: Var,
    pub anchor_keys: Var,
    pub w: Var,
    pub u: Var,
    pub v: Var,
    pub input_proj: Var,
}

impl MRefVars {
    pub fn bind(g: &mut Graph<'_>) -> Result<Self> {
        if !g.params().contains(lcc::ANCHORS) {
            return Err(Error::Prerequisite("monolingual reference network needs fitted anchors".into()));
        }
        let anchors = g.param(lcc::ANCHORS)?;
        let va = g.param("mref.att.anchor")?;
        let anchor_keys = g.matmul_nt(anchors, va)?;
        Ok(MRefVars {
            anchors,
            anchor_keys,
            w: g.param("mref.att.w")?,
            u: g.param("mref.att.u")?,
            v: g.param("mref.att.v")?,
            input_proj: g.param("mref.proj")?,
        })
    }
}

/// Mean of the encoder annotations.
pub fn sentence_repr(states: &Tensor) -> Result<Vec<f64>> {
    if states.shape().len() != 2 || states.rows() == 0 {
        return Err(Error::Empty("encoder states"));
    }
    let mut out = vec![0.0; states.cols()];
    for i in 0..states.rows() {
        for (o, &v) in out.iter_mut().zip(states.row(i)) {
            *o += v;
        }
    }
    let n = states.rows() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Sentence representations of every source, one row each, computed with
/// the current encoder. Sentences are split across `threads` workers.
pub fn sentence_reprs(model: &Model, sources: &[Vec<usize>], threads: usize) -> Result<Tensor> {
    if sources.is_empty() {
        return Err(Error::Empty("source corpus"));
    }
    let chunk = sources.len().div_ceil(threads.max(1));
    let parts: Vec<Result<Vec<Vec<f64>>>> = std::thread::scope(|s| {
        let handles: Vec<_> = sources
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|src| {
                            let mut g = Graph::new(&model.params);
                            let mv = model::ModelVars::bind_baseline(&mut g, model)?;
                            let enc = model::encode(&mut g, &mv, src, None)?;
                            Ok(g.value(enc.mean).data().to_vec())
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("encoder worker panicked")).collect()
    });
    let mut rows = Vec::with_capacity(sources.len());
    for p in parts {
        rows.extend(p?);
    }
    Tensor::from_rows(&rows)
}

/// Global context `Σ_j α_j v_j` with
/// `α = softmax_j(vᵀ tanh(W s_{t-1} + U c_t + V v_j))`. Returns `(α, c^G)`.
pub fn global_attention(g: &mut Graph<'_>, m: &MRefVars, s_prev: Var, ctx: Var) -> Result<(Var, Var)> {
    let ws = g.matvec(m.w, s_prev)?;
    let uc = g.matvec(m.u, ctx)?;
    let q = g.add(ws, uc)?;
    let pre = g.add_rows(m.anchor_keys, q)?;
    let act = g.tanh(pre);
    let scores = g.matvec(act, m.v)?;
    let alpha = g.softmax(scores)?;
    let cg = g.matvec_t(m.anchors, alpha)?;
    Ok((alpha, cg))
}

pub fn global_context(g: &mut Graph<'_>, m: &MRefVars, s_prev: Var, ctx: Var) -> Result<Var> {
    Ok(global_attention(g, m, s_prev, ctx)?.1)
}

/// Decoder update with the global context as an extra input.
pub fn m_decoder_step(g: &mut Graph<'_>, cell: &CellVars, m: &MRefVars, e_prev: Var, s_prev: Var, ctx: Var) -> Result<Var> {
    let cg = global_context(g, m, s_prev, ctx)?;
    model::decoder_step(
        g,
        cell,
        e_prev,
        s_prev,
        ctx,
        &[Extra {
            input: cg,
            projection: m.input_proj,
        }],
    )
}

/// Global context for plain tensors (evaluation helper).
pub fn global_context_tensor(params: &ParamStore, anchors: &AnchorSet, s_prev: &[f64], ctx: &[f64]) -> Result<Vec<f64>> {
    let mut scratch = params.clone();
    if scratch.contains(lcc::ANCHORS) {
        scratch.set(lcc::ANCHORS, anchors.tensor().clone())?;
    } else {
        anchors.insert_into(&mut scratch)?;
    }
    let mut g = Graph::new(&scratch);
    let m = MRefVars::bind(&mut g)?;
    let s = g.constant(Tensor::vector(s_prev.to_vec()));
    let c = g.constant(Tensor::vector(ctx.to_vec()));
    let cg = global_context(&mut g, &m, s, c)?;
    Ok(g.value(cg).data().to_vec())
}
