//! Finite-difference checks of every differentiable building block, on
//! small models with dense random parameters.

use serde::Serialize;

use crate::autodiff::{check_gradients, GradCheckReport, Graph, Group, ParamStore, Var};
use crate::bref::{self, BRefDims, BRefVars};
use crate::corpus::Batch;
use crate::error::Result;
use crate::lcc::{self, AnchorSet, LccConfig, ScoreParams, ScoreVars};
use crate::model::{self, random_rng, AttentionVars, CellKind, CellVars, Encoded, Extra, Model, ModelDims};
use crate::mref::{self, MRefDims, MRefVars};
use crate::tensor::Tensor;

/// Parameter scale. Small initialisations leave attention gradients near
/// the finite-difference noise floor, which makes relative errors meaningless.
const PARAM_STD: f64 = 0.6;
const STEP: f64 = 1e-4;

pub const CHECKS: [&str; 11] = [
    "attention",
    "decoder-step-gru",
    "decoder-step-tanh",
    "global-attention",
    "tri-score",
    "localization-measure",
    "f_s",
    "hinge-loss",
    "nll-baseline",
    "nll-mref",
    "nll-bref",
];

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
    pub passed: bool,
}

fn dims(cell: CellKind) -> ModelDims {
    ModelDims {
        src_vocab: 7,
        tgt_vocab: 6,
        embed: 3,
        hidden: 4,
        attention: 3,
        readout: 5,
        cell,
    }
}

/// Model with both networks attached and every parameter redrawn densely.
fn dense_model(seed: u64, cell: CellKind, mref_on: bool, bref_on: bool) -> Result<Model> {
    let mut rng = random_rng(seed);
    let d = dims(cell);
    let mut m = Model::new(d, &mut rng)?;
    if mref_on {
        let c = d.context();
        let anchors = AnchorSet::new(Tensor::randn(&[3, c], 1.0, &mut rng))?;
        m.set_anchors(&anchors, &ScoreParams::random(c, c, PARAM_STD, &mut rng))?;
        mref::attach(
            &mut m,
            MRefDims {
                anchors: 3,
                attention: 3,
            },
            &mut rng,
        )?;
    }
    if bref_on {
        bref::attach(
            &mut m,
            BRefDims {
                anchors: 3,
                anchor_dim: 2,
                lambda_m: 0.1,
                ..BRefDims::default()
            },
            &mut rng,
        )?;
    }
    for id in m.params.ids().collect::<Vec<_>>() {
        let t = m.params.tensor_mut(id);
        *t = Tensor::randn(t.shape(), PARAM_STD, &mut rng);
    }
    Ok(m)
}

fn subset(model: &Model, prefixes: &[&str]) -> Result<ParamStore> {
    let mut p = ParamStore::new();
    for (_, name, group, t) in model.params.iter() {
        if prefixes.iter().any(|pre| name.starts_with(pre)) {
            p.insert(name, group, t.clone())?;
        }
    }
    Ok(p)
}

fn constant_randn(g: &mut Graph<'_>, shape: &[usize], seed: u64) -> Var {
    g.constant(Tensor::randn(shape, 0.5, &mut random_rng(seed)))
}

fn batch() -> Batch {
    Batch::from_pairs(&[(vec![4, 5, 6, 3], vec![3, 4, 5]), (vec![6, 3, 5], vec![5, 2])])
}

fn run_check(name: &str, seed: u64) -> Result<GradCheckReport> {
    let data_seed = 1000 + seed;
    match name {
        "attention" => {
            let m = dense_model(seed, CellKind::Gru, false, false)?;
            let p = subset(&m, &["dec.att."])?;
            check_gradients(&p, STEP, |g| {
                let att = AttentionVars {
                    w: g.param("dec.att.w")?,
                    u: g.param("dec.att.u")?,
                    v: g.param("dec.att.v")?,
                };
                let states = constant_randn(g, &[4, 8], data_seed);
                let keys = g.matmul_nt(states, att.u)?;
                let mean = g.mean_rows(states)?;
                let enc = Encoded {
                    states,
                    keys,
                    mean,
                    len: 4,
                };
                let s = constant_randn(g, &[4], data_seed + 1);
                let (alpha, ctx) = model::attention(g, &att, s, &enc)?;
                let w1 = constant_randn(g, &[8], data_seed + 2);
                let w2 = constant_randn(g, &[4], data_seed + 3);
                let a = g.dot(ctx, w1)?;
                let b = g.dot(alpha, w2)?;
                g.add(a, b)
            })
        }
        "decoder-step-gru" | "decoder-step-tanh" => {
            let cell_kind = if name.ends_with("gru") { CellKind::Gru } else { CellKind::Tanh };
            let m = dense_model(seed, cell_kind, false, true)?;
            let p = subset(&m, &["dec.cell.", "bref.proj"])?;
            check_gradients(&p, STEP, |g| {
                let cell = CellVars::bind(g, "dec.cell", cell_kind, 4)?;
                let e = constant_randn(g, &[3], data_seed);
                let s = constant_randn(g, &[4], data_seed + 1);
                let c = constant_randn(g, &[8], data_seed + 2);
                let extra = Extra {
                    input: constant_randn(g, &[3], data_seed + 3),
                    projection: g.param("bref.proj")?,
                };
                let out = model::decoder_step(g, &cell, e, s, c, &[extra])?;
                let w = constant_randn(g, &[4], data_seed + 4);
                g.dot(out, w)
            })
        }
        "global-attention" => {
            let m = dense_model(seed, CellKind::Gru, true, false)?;
            let p = subset(&m, &["mref.", "dec.cell.", "lcc.anchors"])?;
            check_gradients(&p, STEP, |g| {
                let cell = CellVars::bind(g, "dec.cell", CellKind::Gru, 4)?;
                let mr = MRefVars::bind(g)?;
                let e = constant_randn(g, &[3], data_seed);
                let s = constant_randn(g, &[4], data_seed + 1);
                let c = constant_randn(g, &[8], data_seed + 2);
                let out = mref::m_decoder_step(g, &cell, &mr, e, s, c)?;
                let w = constant_randn(g, &[4], data_seed + 3);
                g.dot(out, w)
            })
        }
        "tri-score" | "localization-measure" => {
            let m = dense_model(seed, CellKind::Gru, true, false)?;
            let p = subset(&m, &["lcc."])?;
            let measure = name == "localization-measure";
            check_gradients(&p, STEP, |g| {
                let anchors = g.param(lcc::ANCHORS)?;
                let s = ScoreVars::bind(g, lcc::SCORE_PREFIX)?;
                let keys = lcc::anchor_keys(g, anchors, &s)?;
                let mut terms = Vec::new();
                for k in 0..3 {
                    let x = constant_randn(g, &[8], data_seed + k);
                    if measure {
                        let cfg = LccConfig {
                            l_alpha: 1.0,
                            l_beta: 0.5,
                            ..LccConfig::default()
                        };
                        terms.push(lcc::measure_var(g, anchors, keys, &s, x, &cfg)?);
                    } else {
                        let sc = lcc::tri_scores_with_keys(g, anchors, keys, &s, x)?;
                        let w = constant_randn(g, &[3], data_seed + 10 + k);
                        terms.push(g.dot(sc, w)?);
                    }
                }
                g.add_n(&terms)
            })
        }
        "f_s" | "hinge-loss" => {
            let m = dense_model(seed, CellKind::Gru, false, true)?;
            let bd = m.bref.expect("attached");
            let p = subset(&m, &["bref."])?;
            let hinge = name == "hinge-loss";
            check_gradients(&p, STEP, |g| {
                let b = BRefVars::bind(g, &bd)?;
                let mut gold = Vec::new();
                let mut pred = Vec::new();
                for k in 0..2 {
                    let q = constant_randn(g, &[3 + 4 + 8], data_seed + k);
                    pred.push(bref::f_s(g, &b, q)?);
                    gold.push(constant_randn(g, &[3], data_seed + 10 + k));
                }
                if hinge {
                    bref::hinge_loss(g, &gold, &pred, b.reg_w, bd.lambda_m)
                } else {
                    let a = g.dot(pred[0], gold[0])?;
                    let c = g.dot(pred[1], gold[1])?;
                    g.add(a, c)
                }
            })
        }
        "nll-baseline" | "nll-mref" | "nll-bref" => {
            let cell = if seed.is_multiple_of(2) { CellKind::Gru } else { CellKind::Tanh };
            let mut m = dense_model(seed, cell, name == "nll-mref", name == "nll-bref")?;
            let trainable: &[Group] = match name {
                "nll-mref" => &[Group::Decoder, Group::MRef],
                "nll-bref" => &[Group::BRef],
                _ => &[Group::Encoder, Group::Decoder],
            };
            m.params.train_only(trainable);
            let b = batch();
            check_gradients(&m.params, STEP, |g| Ok(model::batch_loss(g, &m, &b, 1.0, None)?.objective))
        }
        other => Err(crate::Error::InvalidArgument(format!("unknown gradient check `{other}`"))),
    }
}

/// Runs every check in [`CHECKS`] at seeds `0..seeds`.
pub fn run_suite(seeds: u64, tolerance: f64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::with_capacity(CHECKS.len() * seeds as usize);
    for name in CHECKS {
        for seed in 0..seeds {
            let r = run_check(name, seed)?;
            out.push(CheckOutcome {
                name,
                seed,
                max_rel_err: r.max_rel_err,
                passed: r.passes(tolerance),
                checked: r.checked,
                worst_param: r.worst_param,
            });
        }
    }
    Ok(out)
}
