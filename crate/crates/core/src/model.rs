//! Baseline attentional encoder-decoder and the shared decoder step that the
//! reference networks extend.
//!
//! * Encoder: bidirectional recurrent network; `h_i = [fwd_i ; bwd_i]`.
//! * Attention: `α_ti = softmax_i(v_αᵀ tanh(W_α s_{t-1} + U_α h_i))`,
//!   `c_t = Σ_i α_ti h_i`.
//! * Decoder: `s_t = f_d(e(y_{t-1}), s_{t-1}, c_t, extras...)` where every
//!   extra context vector enters through its own input projection.
//! * Output: `softmax(W_p tanh(W_o [e(y_{t-1}); s_t; c_t] + b_o) + b_p)`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Group, ParamStore, Var};
use crate::bref::{self, BRefDims, BRefVars};
use crate::corpus::{Batch, BOS, EOS};
use crate::error::{Error, Result};
use crate::lcc::{AnchorSet, ScoreParams};
use crate::mref::{self, MRefDims, MRefVars};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    /// GRU update with reset and update gates.
    Gru,
    /// Plain `tanh(W x + U h + b)`.
    Tanh,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Tanh => 1,
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(CellKind::Gru),
            "tanh" => Ok(CellKind::Tanh),
            other => Err(Error::Parse(format!("unknown cell `{other}`"))),
        }
    }
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellKind::Gru => "gru",
            CellKind::Tanh => "tanh",
        })
    }
}

/// Sizes of the baseline network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub attention: usize,
    pub readout: usize,
    pub cell: CellKind,
}

impl ModelDims {
    /// Desk-scale defaults: embedding 32, hidden 64.
    pub fn new(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelDims {
            src_vocab,
            tgt_vocab,
            embed: 32,
            hidden: 64,
            attention: 64,
            readout: 64,
            cell: CellKind::Gru,
        }
    }

    /// Width of an encoder annotation `h_i` (forward ⊕ backward).
    pub fn context(&self) -> usize {
        2 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.src_vocab,
            self.tgt_vocab,
            self.embed,
            self.hidden,
            self.attention,
            self.readout,
        ];
        if all.contains(&0) {
            return Err(Error::InvalidArgument(format!("model dimensions must be positive: {self:?}")));
        }
        if self.tgt_vocab <= EOS {
            return Err(Error::InvalidArgument("target vocabulary lacks special tokens".into()));
        }
        Ok(())
    }
}

/// Baseline parameters plus optional reference-network extensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub mref: Option<MRefDims>,
    pub bref: Option<BRefDims>,
    pub params: ParamStore,
}

fn init_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::uniform(&[rows, cols], 1.0 / (cols as f64).sqrt(), rng)
}

pub(crate) fn insert_cell(
    p: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    group: Group,
    kind: CellKind,
    input: usize,
    hidden: usize,
) -> Result<()> {
    let g = kind.gates() * hidden;
    p.insert(format!("{prefix}.wx"), group, init_weight(rng, g, input))?;
    p.insert(format!("{prefix}.wh"), group, init_weight(rng, g, hidden))?;
    p.insert(format!("{prefix}.bx"), group, Tensor::zeros(&[g]))?;
    p.insert(format!("{prefix}.bh"), group, Tensor::zeros(&[g]))?;
    Ok(())
}

impl Model {
    /// Randomly initialised baseline.
    pub fn new(dims: ModelDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        dims.validate()?;
        let ModelDims {
            src_vocab,
            tgt_vocab,
            embed,
            hidden,
            attention,
            readout,
            cell,
        } = dims;
        let ctx = dims.context();
        let mut p = ParamStore::new();
        p.insert("enc.embed", Group::Encoder, Tensor::uniform(&[src_vocab, embed], 0.1, rng))?;
        insert_cell(&mut p, rng, "enc.fwd", Group::Encoder, cell, embed, hidden)?;
        insert_cell(&mut p, rng, "enc.bwd", Group::Encoder, cell, embed, hidden)?;

        let d = Group::Decoder;
        p.insert("dec.embed", d, Tensor::uniform(&[tgt_vocab, embed], 0.1, rng))?;
        p.insert("dec.init.w", d, init_weight(rng, hidden, ctx))?;
        p.insert("dec.init.b", d, Tensor::zeros(&[hidden]))?;
        p.insert("dec.att.w", d, init_weight(rng, attention, hidden))?;
        p.insert("dec.att.u", d, init_weight(rng, attention, ctx))?;
        p.insert("dec.att.v", d, Tensor::uniform(&[attention], 1.0 / (attention as f64).sqrt(), rng))?;
        insert_cell(&mut p, rng, "dec.cell", d, cell, embed + ctx, hidden)?;
        p.insert("dec.out.w", d, init_weight(rng, readout, embed + hidden + ctx))?;
        p.insert("dec.out.b", d, Tensor::zeros(&[readout]))?;
        p.insert("dec.proj.w", d, init_weight(rng, tgt_vocab, readout))?;
        p.insert("dec.proj.b", d, Tensor::zeros(&[tgt_vocab]))?;
        Ok(Model {
            dims,
            mref: None,
            bref: None,
            params: p,
        })
    }

    pub fn has_anchors(&self) -> bool {
        self.params.contains(crate::lcc::ANCHORS)
    }

    /// Installs fitted anchors and their score network into the anchor group.
    pub fn set_anchors(&mut self, anchors: &AnchorSet, score: &ScoreParams) -> Result<()> {
        if anchors.dim() != self.dims.context() {
            return Err(Error::shape(
                "set_anchors",
                format!("anchor dim {} vs annotation width {}", anchors.dim(), self.dims.context()),
            ));
        }
        self.params.remove_group(Group::Anchors);
        anchors.insert_into(&mut self.params)?;
        score.insert_into(&mut self.params)?;
        Ok(())
    }

    pub fn anchors(&self) -> Result<AnchorSet> {
        AnchorSet::from_store(&self.params)
    }

    pub fn check_source(&self, src: &[usize]) -> Result<()> {
        if src.is_empty() {
            return Err(Error::Empty("source sentence"));
        }
        if let Some(&bad) = src.iter().find(|&&t| t >= self.dims.src_vocab) {
            return Err(Error::OutOfVocab {
                id: bad,
                size: self.dims.src_vocab,
            });
        }
        Ok(())
    }
}

/// Dropout settings and randomness for a training-mode forward pass.
pub struct Regularization<'r> {
    pub embed_rate: f64,
    pub output_rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

#[derive(Debug, Clone, Copy)]
pub struct CellVars {
    pub kind: CellKind,
    pub hidden: usize,
    pub wx: Var,
    pub wh: Var,
    pub bx: Var,
    pub bh: Var,
}

impl CellVars {
    pub fn bind(g: &mut Graph<'_>, prefix: &str, kind: CellKind, hidden: usize) -> Result<Self> {
        Ok(CellVars {
            kind,
            hidden,
            wx: g.param(&format!("{prefix}.wx"))?,
            wh: g.param(&format!("{prefix}.wh"))?,
            bx: g.param(&format!("{prefix}.bx"))?,
            bh: g.param(&format!("{prefix}.bh"))?,
        })
    }

    /// One recurrent update. `extra_inputs` are already-projected additions to
    /// the input pre-activation (one per extra context vector).
    pub fn step(&self, g: &mut Graph<'_>, x: Var, h: Var, extra_inputs: &[Var]) -> Result<Var> {
        let gx = g.matvec(self.wx, x)?;
        let mut gx = g.add(gx, self.bx)?;
        for &e in extra_inputs {
            gx = g.add(gx, e)?;
        }
        let gh = g.matvec(self.wh, h)?;
        let gh = g.add(gh, self.bh)?;
        match self.kind {
            CellKind::Tanh => {
                let a = g.add(gx, gh)?;
                Ok(g.tanh(a))
            }
            CellKind::Gru => {
                let n = self.hidden;
                let (xr, xz, xn) = (g.slice(gx, 0, n)?, g.slice(gx, n, n)?, g.slice(gx, 2 * n, n)?);
                let (hr, hz, hn) = (g.slice(gh, 0, n)?, g.slice(gh, n, n)?, g.slice(gh, 2 * n, n)?);
                let r = g.add(xr, hr)?;
                let r = g.sigmoid(r);
                let z = g.add(xz, hz)?;
                let z = g.sigmoid(z);
                let rh = g.mul(r, hn)?;
                let cand = g.add(xn, rh)?;
                let cand = g.tanh(cand);
                // h' = (1 - z) ∘ cand + z ∘ h = cand + z ∘ (h - cand)
                let d = g.sub(h, cand)?;
                let zd = g.mul(z, d)?;
                g.add(cand, zd)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w: Var,
    pub u: Var,
    pub v: Var,
}

/// Encoder output on a graph: annotations `h` (`[m, 2·hidden]`), their
/// attention keys `U_α h_i` and the mean-pooled sentence representation.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub states: Var,
    pub keys: Var,
    pub mean: Var,
    pub len: usize,
}

/// All baseline parameter nodes bound on one graph.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub dims: ModelDims,
    pub src_embed: Var,
    pub fwd: CellVars,
    pub bwd: CellVars,
    pub tgt_embed: Var,
    pub init_w: Var,
    pub init_b: Var,
    pub att: AttentionVars,
    pub cell: CellVars,
    pub out_w: Var,
    pub out_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub mref: Option<MRefVars>,
    pub bref: Option<BRefVars>,
}

impl ModelVars {
    /// Binds every parameter the model carries.
    pub fn bind(g: &mut Graph<'_>, model: &Model) -> Result<Self> {
        let mut mv = Self::bind_baseline(g, model)?;
        if model.mref.is_some() {
            mv.mref = Some(MRefVars::bind(g)?);
        }
        if let Some(b) = &model.bref {
            mv.bref = Some(BRefVars::bind(g, b)?);
        }
        Ok(mv)
    }

    /// Binds only the baseline encoder and decoder.
    pub fn bind_baseline(g: &mut Graph<'_>, model: &Model) -> Result<Self> {
        let d = model.dims;
        Ok(ModelVars {
            dims: d,
            src_embed: g.param("enc.embed")?,
            fwd: CellVars::bind(g, "enc.fwd", d.cell, d.hidden)?,
            bwd: CellVars::bind(g, "enc.bwd", d.cell, d.hidden)?,
            tgt_embed: g.param("dec.embed")?,
            init_w: g.param("dec.init.w")?,
            init_b: g.param("dec.init.b")?,
            att: AttentionVars {
                w: g.param("dec.att.w")?,
                u: g.param("dec.att.u")?,
                v: g.param("dec.att.v")?,
            },
            cell: CellVars::bind(g, "dec.cell", d.cell, d.hidden)?,
            out_w: g.param("dec.out.w")?,
            out_b: g.param("dec.out.b")?,
            proj_w: g.param("dec.proj.w")?,
            proj_b: g.param("dec.proj.b")?,
            mref: None,
            bref: None,
        })
    }
}

/// Runs one direction of the encoder over `inputs`, returning every state.
pub fn scan(g: &mut Graph<'_>, cell: &CellVars, inputs: &[Var]) -> Result<Vec<Var>> {
    let mut h = g.constant(Tensor::zeros(&[cell.hidden]));
    let mut out = Vec::with_capacity(inputs.len());
    for &x in inputs {
        h = cell.step(g, x, h, &[])?;
        out.push(h);
    }
    Ok(out)
}

fn embed_tokens(
    g: &mut Graph<'_>,
    table: Var,
    ids: &[usize],
    reg: &mut Option<&mut Regularization<'_>>,
) -> Result<Vec<Var>> {
    ids.iter()
        .map(|&t| {
            let e = g.row(table, t)?;
            match reg {
                Some(r) => g.dropout(e, r.embed_rate, true, r.rng),
                None => Ok(e),
            }
        })
        .collect()
}

/// Bidirectional encoding of a source sentence.
pub fn encode(
    g: &mut Graph<'_>,
    mv: &ModelVars,
    src: &[usize],
    mut reg: Option<&mut Regularization<'_>>,
) -> Result<Encoded> {
    if src.is_empty() {
        return Err(Error::Empty("source sentence"));
    }
    if let Some(&bad) = src.iter().find(|&&t| t >= mv.dims.src_vocab) {
        return Err(Error::OutOfVocab {
            id: bad,
            size: mv.dims.src_vocab,
        });
    }
    let emb = embed_tokens(g, mv.src_embed, src, &mut reg)?;
    let fwd = scan(g, &mv.fwd, &emb)?;
    let rev: Vec<Var> = emb.iter().rev().copied().collect();
    let mut bwd = scan(g, &mv.bwd, &rev)?;
    bwd.reverse();
    let rows = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| g.concat(&[f, b]))
        .collect::<Result<Vec<_>>>()?;
    let states = g.stack(&rows)?;
    let keys = g.matmul_nt(states, mv.att.u)?;
    let mean = g.mean_rows(states)?;
    Ok(Encoded {
        states,
        keys,
        mean,
        len: src.len(),
    })
}

/// Encoder annotations as a plain `[m, 2·hidden]` tensor (evaluation mode).
pub fn encode_tensor(model: &Model, src: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new(&model.params);
    let mv = ModelVars::bind(&mut g, model)?;
    let enc = encode(&mut g, &mv, src, None)?;
    Ok(g.value(enc.states).clone())
}

/// Additive attention over encoder annotations. Returns `(α, c_t)`.
pub fn attention(g: &mut Graph<'_>, att: &AttentionVars, s_prev: Var, enc: &Encoded) -> Result<(Var, Var)> {
    if enc.len == 0 {
        return Err(Error::Empty("encoder states"));
    }
    let ws = g.matvec(att.w, s_prev)?;
    let pre = g.add_rows(enc.keys, ws)?;
    let act = g.tanh(pre);
    let scores = g.matvec(act, att.v)?;
    let alpha = g.softmax(scores)?;
    let ctx = g.matvec_t(enc.states, alpha)?;
    Ok((alpha, ctx))
}

/// Decoder initial state `tanh(W_init mean(h) + b_init)`.
pub fn initial_state(g: &mut Graph<'_>, mv: &ModelVars, enc: &Encoded) -> Result<Var> {
    let a = g.matvec(mv.init_w, enc.mean)?;
    let a = g.add(a, mv.init_b)?;
    Ok(g.tanh(a))
}

/// An extra context vector together with its input projection.
#[derive(Debug, Clone, Copy)]
pub struct Extra {
    pub input: Var,
    pub projection: Var,
}

/// Recurrent decoder update over `[e(y_{t-1}); c_t]` plus projected extras.
pub fn decoder_step(g: &mut Graph<'_>, cell: &CellVars, e_prev: Var, s_prev: Var, ctx: Var, extras: &[Extra]) -> Result<Var> {
    let x = g.concat(&[e_prev, ctx])?;
    let projected = extras
        .iter()
        .map(|e| g.matvec(e.projection, e.input))
        .collect::<Result<Vec<_>>>()?;
    cell.step(g, x, s_prev, &projected)
}

/// Pre-softmax scores `W_p tanh(W_o [e; s; c] + b_o) + b_p`.
pub fn output_logits(
    g: &mut Graph<'_>,
    mv: &ModelVars,
    e_prev: Var,
    s: Var,
    ctx: Var,
    reg: Option<&mut Regularization<'_>>,
) -> Result<Var> {
    let x = g.concat(&[e_prev, s, ctx])?;
    let r = g.matvec(mv.out_w, x)?;
    let r = g.add(r, mv.out_b)?;
    let mut r = g.tanh(r);
    if let Some(reg) = reg {
        r = g.dropout(r, reg.output_rate, true, reg.rng)?;
    }
    let l = g.matvec(mv.proj_w, r)?;
    g.add(l, mv.proj_b)
}

/// Result of one full decoder time step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub state: Var,
    pub context: Var,
    pub alpha: Var,
    pub logits: Var,
    /// `f_s(q_t)` when the bilingual network is active.
    pub predicted_embedding: Option<Var>,
}

/// One decoder time step with whatever reference networks the model carries.
pub fn full_step(
    g: &mut Graph<'_>,
    mv: &ModelVars,
    enc: &Encoded,
    prev_token: usize,
    s_prev: Var,
    mut reg: Option<&mut Regularization<'_>>,
) -> Result<StepOutput> {
    let e = g.row(mv.tgt_embed, prev_token)?;
    let e_prev = match reg.as_deref_mut() {
        Some(r) => g.dropout(e, r.embed_rate, true, r.rng)?,
        None => e,
    };
    let (alpha, ctx) = attention(g, &mv.att, s_prev, enc)?;
    let mut extras = Vec::with_capacity(2);
    if let Some(m) = &mv.mref {
        let cg = mref::global_context(g, m, s_prev, ctx)?;
        extras.push(Extra {
            input: cg,
            projection: m.input_proj,
        });
    }
    let mut predicted_embedding = None;
    if let Some(b) = &mv.bref {
        let q = bref::build_query(g, e_prev, s_prev, ctx)?;
        let f = bref::f_s(g, b, q)?;
        predicted_embedding = Some(f);
        extras.push(Extra {
            input: f,
            projection: b.input_proj,
        });
    }
    let state = decoder_step(g, &mv.cell, e_prev, s_prev, ctx, &extras)?;
    let logits = output_logits(g, mv, e_prev, state, ctx, reg)?;
    Ok(StepOutput {
        state,
        context: ctx,
        alpha,
        logits,
        predicted_embedding,
    })
}

/// Teacher-forced losses of one sentence pair, as sums over time steps.
#[derive(Debug, Clone, Copy)]
pub struct SentenceLoss {
    /// `-Σ_t log p(y_t | x, y_<t)`.
    pub nll: Var,
    /// Regression loss `L_M` when the bilingual network is active.
    pub regression: Option<Var>,
    pub tokens: usize,
}

/// `tgt` must be wrapped as `BOS y_1 .. y_T EOS`.
pub fn sentence_loss(
    g: &mut Graph<'_>,
    mv: &ModelVars,
    src: &[usize],
    tgt: &[usize],
    mut reg: Option<&mut Regularization<'_>>,
) -> Result<SentenceLoss> {
    if tgt.len() < 2 || tgt[0] != BOS {
        return Err(Error::InvalidArgument("target must start with BOS and hold at least one token".into()));
    }
    if let Some(&bad) = tgt.iter().find(|&&t| t >= mv.dims.tgt_vocab) {
        return Err(Error::OutOfVocab {
            id: bad,
            size: mv.dims.tgt_vocab,
        });
    }
    let enc = encode(g, mv, src, reg.as_deref_mut())?;
    let mut s = initial_state(g, mv, &enc)?;
    let mut nll_terms = Vec::with_capacity(tgt.len() - 1);
    let (mut gold, mut predicted) = (Vec::new(), Vec::new());
    for w in tgt.windows(2) {
        let out = full_step(g, mv, &enc, w[0], s, reg.as_deref_mut())?;
        let lp = g.log_softmax(out.logits)?;
        let lp = g.pick(lp, w[1])?;
        nll_terms.push(lp);
        if let Some(f) = out.predicted_embedding {
            gold.push(g.row(mv.tgt_embed, w[1])?);
            predicted.push(f);
        }
        s = out.state;
    }
    let total = g.add_n(&nll_terms)?;
    let nll = g.scale(total, -1.0);
    let regression = match &mv.bref {
        Some(b) => Some(bref::hinge_loss(g, &gold, &predicted, b.reg_w, b.lambda_m)?),
        None => None,
    };
    Ok(SentenceLoss {
        nll,
        regression,
        tokens: tgt.len() - 1,
    })
}

/// Components of a batch objective, each normalised by the target token count.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    /// Mean negative log-likelihood per target token.
    pub nll: Var,
    /// Mean bilingual regression loss `L_M` per target token.
    pub hinge: Option<Var>,
    /// `nll + λ · hinge` (or `nll` alone).
    pub objective: Var,
    pub tokens: usize,
}

/// Mean token NLL over a batch, plus the bilingual regression term weighted by
/// `lambda` when that network is present.
pub fn batch_loss(
    g: &mut Graph<'_>,
    model: &Model,
    batch: &Batch,
    lambda: f64,
    mut reg: Option<&mut Regularization<'_>>,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mv = ModelVars::bind(g, model)?;
    let mut nll = Vec::with_capacity(batch.len());
    let mut hinge = Vec::new();
    for i in 0..batch.len() {
        let sl = sentence_loss(g, &mv, batch.source(i), batch.target(i), reg.as_deref_mut())?;
        nll.push(sl.nll);
        if let Some(r) = sl.regression {
            hinge.push(r);
        }
    }
    let tokens = batch.target_tokens();
    let inv = 1.0 / tokens as f64;
    let total = g.add_n(&nll)?;
    let nll = g.scale(total, inv);
    let hinge = if hinge.is_empty() {
        None
    } else {
        let sum = g.add_n(&hinge)?;
        Some(g.scale(sum, inv))
    };
    let objective = match hinge {
        Some(h) if lambda != 0.0 => {
            let w = g.scale(h, lambda);
            g.add(nll, w)?
        }
        _ => nll,
    };
    Ok(BatchLoss {
        nll,
        hinge,
        objective,
        tokens,
    })
}

/// Mean token NLL of a batch in evaluation mode.
pub fn nll_loss(model: &Model, batch: &Batch) -> Result<f64> {
    let mut g = Graph::new(&model.params);
    let l = batch_loss(&mut g, model, batch, 0.0, None)?;
    g.item(l.nll)
}

/// Output distribution `p(y_t | ...)` from logits.
pub fn output_distribution(logits: &[f64]) -> Vec<f64> {
    crate::autodiff::softmax_slice(logits)
}

pub fn random_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
