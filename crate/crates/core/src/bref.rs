//! Bilingual reference network: the decoder query, anchor-local affine
//! regression of the next target embedding, its squared-error loss, and the
//! augmented decoder step.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Group, Var};
use crate::error::{Error, Result};
use crate::lcc::{self, ScoreParams, ScoreVars};
use crate::model::{self, CellVars, Extra, Model};
use crate::tensor::Tensor;

const ANCHORS: &str = "bref.anchors";
const SCORE: &str = "bref.score";

/// Sizes and regularisation of the bilingual network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BRefDims {
    pub anchors: usize,
    /// Output width of the query transform `g`.
    pub anchor_dim: usize,
    /// Score attention width; `None` means the anchor width.
    pub score_dim: Option<usize>,
    /// Score anchors against the raw query instead of `g(q)`; anchors then
    /// have the query width.
    pub raw_query: bool,
    /// Weight of `Σ_j ‖W_j‖²` inside the regression loss.
    pub lambda_m: f64,
}

impl Default for BRefDims {
    fn default() -> Self {
        BRefDims {
            anchors: 30,
            anchor_dim: 16,
            score_dim: None,
            raw_query: false,
            lambda_m: 1e-4,
        }
    }
}

impl BRefDims {
    pub fn query_dim(&self, dims: &model::ModelDims) -> usize {
        dims.embed + dims.hidden + dims.context()
    }

    /// Width of the space anchors live in.
    pub fn key_dim(&self, dims: &model::ModelDims) -> usize {
        if self.raw_query {
            self.query_dim(dims)
        } else {
            self.anchor_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchors == 0 || self.anchor_dim == 0 || self.score_dim == Some(0) {
            return Err(Error::InvalidArgument(format!("invalid bilingual dimensions {self:?}")));
        }
        if !self.lambda_m.is_finite() || self.lambda_m < 0.0 {
            return Err(Error::InvalidArgument(format!("lambda_m must be non-negative, got {}", self.lambda_m)));
        }
        Ok(())
    }
}

/// Adds the bilingual network with a zero-initialised decoder projection.
pub fn attach(model: &mut Model, dims: BRefDims, rng: &mut ChaCha8Rng) -> Result<()> {
    dims.validate()?;
    if model.bref.is_some() {
        return Err(Error::InvalidArgument("model already has a bilingual reference network".into()));
    }
    let md = model.dims;
    let (dq, da, de, c) = (dims.query_dim(&md), dims.anchor_dim, md.embed, dims.anchors);
    let dk = dims.key_dim(&md);
    let k = dims.score_dim.unwrap_or(dk);
    let scale = |n: usize| 1.0 / (n as f64).sqrt();
    let b = Group::BRef;
    let p = &mut model.params;
    p.insert("bref.g.w", b, Tensor::uniform(&[da, dq], scale(dq), rng))?;
    p.insert("bref.g.b", b, Tensor::zeros(&[da]))?;
    p.insert(ANCHORS, b, Tensor::uniform(&[c, dk], 1.0, rng))?;
    ScoreParams::random(dk, k, 0.1, rng).insert_with_prefix(p, SCORE, b)?;
    p.insert("bref.reg.w", b, Tensor::uniform(&[c * de, da], scale(da), rng))?;
    p.insert("bref.reg.b", b, Tensor::zeros(&[c, de]))?;
    p.insert("bref.proj", b, Tensor::zeros(&[md.cell.gates() * md.hidden, de]))?;
    model.bref = Some(dims);
    Ok(())
}

/// Bilingual network nodes on one graph.
#[derive(Debug, Clone, Copy)]
pub struct BRefVars {
    pub g_w: Var,
    pub g_b: Var,
    pub anchors: Var,
    pub anchor_keys: Var,
    pub score: ScoreVars,
    pub reg_w: Var,
    pub reg_b: Var,
    pub input_proj: Var,
    pub count: usize,
    pub embed: usize,
    pub raw_query: bool,
    pub lambda_m: f64,
}

impl BRefVars {
    pub fn bind(g: &mut Graph<'_>, dims: &BRefDims) -> Result<Self> {
        let anchors = g.param(ANCHORS)?;
        let score = ScoreVars::bind(g, SCORE)?;
        let anchor_keys = lcc::anchor_keys(g, anchors, &score)?;
        let reg_b = g.param("bref.reg.b")?;
        let shape = g.shape(reg_b).to_vec();
        Ok(BRefVars {
            g_w: g.param("bref.g.w")?,
            g_b: g.param("bref.g.b")?,
            anchors,
            anchor_keys,
            score,
            reg_w: g.param("bref.reg.w")?,
            reg_b,
            input_proj: g.param("bref.proj")?,
            count: shape[0],
            embed: shape[1],
            raw_query: dims.raw_query,
            lambda_m: dims.lambda_m,
        })
    }
}

/// `q_t = [e(y_{t-1}); s_{t-1}; c_t]`.
pub fn build_query(g: &mut Graph<'_>, e_prev: Var, s_prev: Var, ctx: Var) -> Result<Var> {
    g.concat(&[e_prev, s_prev, ctx])
}

/// `tanh(W_g q + b_g)`.
pub fn g_transform(g: &mut Graph<'_>, b: &BRefVars, q: Var) -> Result<Var> {
    let a = g.matvec(b.g_w, q)?;
    let a = g.add(a, b.g_b)?;
    Ok(g.tanh(a))
}

/// Soft anchor coefficients of a query.
pub fn coefficients(g: &mut Graph<'_>, b: &BRefVars, q: Var) -> Result<(Var, Var)> {
    let gq = g_transform(g, b, q)?;
    let key = if b.raw_query { q } else { gq };
    let scores = lcc::tri_scores_with_keys(g, b.anchors, b.anchor_keys, &b.score, key)?;
    Ok((g.softmax(scores)?, gq))
}

/// Per-anchor affine predictions `W_j g(q) + b_j`, one per row.
pub fn anchor_predictions(g: &mut Graph<'_>, b: &BRefVars, gq: Var) -> Result<Var> {
    let flat = g.matvec(b.reg_w, gq)?;
    let rows = g.reshape(flat, &[b.count, b.embed])?;
    g.add(rows, b.reg_b)
}

/// `f_s(q) = Σ_j γ_j(q) (W_j g(q) + b_j)`.
pub fn f_s(g: &mut Graph<'_>, b: &BRefVars, q: Var) -> Result<Var> {
    let (gamma, gq) = coefficients(g, b, q)?;
    let preds = anchor_predictions(g, b, gq)?;
    g.matvec_t(preds, gamma)
}

/// `Σ_t ‖e(y_t) - f_s(q_t)‖² + λ_M Σ_j ‖W_j‖²` for one sentence.
pub fn hinge_loss(g: &mut Graph<'_>, gold: &[Var], predicted: &[Var], reg_w: Var, lambda_m: f64) -> Result<Var> {
    if gold.is_empty() {
        return Err(Error::Empty("target sentence"));
    }
    if gold.len() != predicted.len() {
        return Err(Error::shape(
            "hinge_loss",
            format!("{} targets vs {} predictions", gold.len(), predicted.len()),
        ));
    }
    let mut terms = Vec::with_capacity(gold.len() + 1);
    for (&y, &f) in gold.iter().zip(predicted) {
        let d = g.sub(y, f)?;
        terms.push(g.sq_norm(d));
    }
    if lambda_m != 0.0 {
        let w = g.sq_norm(reg_w);
        terms.push(g.scale(w, lambda_m));
    }
    g.add_n(&terms)
}

/// Decoder update with `f_s(q_t)` as an extra input.
pub fn b_decoder_step(g: &mut Graph<'_>, cell: &CellVars, b: &BRefVars, e_prev: Var, s_prev: Var, ctx: Var) -> Result<Var> {
    let q = build_query(g, e_prev, s_prev, ctx)?;
    let f = f_s(g, b, q)?;
    model::decoder_step(
        g,
        cell,
        e_prev,
        s_prev,
        ctx,
        &[Extra {
            input: f,
            projection: b.input_proj,
        }],
    )
}
