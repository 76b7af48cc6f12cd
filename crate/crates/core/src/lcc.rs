//! Local coordinate coding: anchor sets, soft coefficients from the
//! tri-nonlinear score, reconstruction, the localization measure and anchor
//! fitting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Group, Optimizer, OptimizerConfig, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Store name of the monolingual anchors.
pub const ANCHORS: &str = "lcc.anchors";
/// Store prefix of the score network fitted with them.
pub const SCORE_PREFIX: &str = "lcc.score";

/// `|C|` anchors of a common dimension, stored as the rows of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    anchors: Tensor,
}

impl AnchorSet {
    pub fn new(anchors: Tensor) -> Result<Self> {
        if anchors.shape().len() != 2 {
            return Err(Error::shape("AnchorSet", format!("expected a matrix, got {:?}", anchors.shape())));
        }
        if anchors.rows() == 0 {
            return Err(Error::Empty("anchor set"));
        }
        if anchors.cols() == 0 {
            return Err(Error::shape("AnchorSet", "anchors of dimension 0"));
        }
        Ok(AnchorSet { anchors })
    }

    pub fn from_vectors(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("anchor set"));
        }
        AnchorSet::new(Tensor::from_rows(rows)?)
    }

    pub fn count(&self) -> usize {
        self.anchors.rows()
    }

    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    pub fn anchor(&self, j: usize) -> &[f64] {
        self.anchors.row(j)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.anchors
    }

    pub fn insert_into(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(ANCHORS, Group::Anchors, self.anchors.clone())?;
        Ok(())
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        if !store.contains(ANCHORS) {
            return Err(Error::Prerequisite("model has no fitted anchors".into()));
        }
        AnchorSet::new(store.get(ANCHORS)?.clone())
    }
}

/// Parameters of `v_sᵀ tanh(W_s v_j + U_s x + V_s (v_j ∘ x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreParams {
    /// `W_s`, applied to the anchor.
    pub anchor_weight: Tensor,
    /// `U_s`, applied to the input.
    pub input_weight: Tensor,
    /// `V_s`, applied to the element-wise product.
    pub product_weight: Tensor,
    /// `v_s`.
    pub output: Tensor,
}

impl ScoreParams {
    pub fn zeros(dim: usize, score_dim: usize) -> Self {
        ScoreParams {
            anchor_weight: Tensor::zeros(&[score_dim, dim]),
            input_weight: Tensor::zeros(&[score_dim, dim]),
            product_weight: Tensor::zeros(&[score_dim, dim]),
            output: Tensor::zeros(&[score_dim]),
        }
    }

    pub fn random(dim: usize, score_dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        ScoreParams {
            anchor_weight: Tensor::randn(&[score_dim, dim], std, rng),
            input_weight: Tensor::randn(&[score_dim, dim], std, rng),
            product_weight: Tensor::randn(&[score_dim, dim], std, rng),
            output: Tensor::randn(&[score_dim], std, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.anchor_weight.cols()
    }

    pub fn score_dim(&self) -> usize {
        self.output.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (k, d) = (self.score_dim(), self.dim());
        for (name, t) in [
            ("W_s", &self.anchor_weight),
            ("U_s", &self.input_weight),
            ("V_s", &self.product_weight),
        ] {
            if t.shape() != [k, d] {
                return Err(Error::shape("ScoreParams", format!("{name} is {:?}, expected [{k}, {d}]", t.shape())));
            }
        }
        if self.output.shape() != [k] {
            return Err(Error::shape("ScoreParams", format!("v_s is {:?}", self.output.shape())));
        }
        Ok(())
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w", &self.anchor_weight),
            ("u", &self.input_weight),
            ("vm", &self.product_weight),
            ("v", &self.output),
        ]
    }

    pub fn insert_with_prefix(&self, store: &mut ParamStore, prefix: &str, group: Group) -> Result<()> {
        self.validate()?;
        for (suffix, t) in self.tensors() {
            store.insert(format!("{prefix}.{suffix}"), group, t.clone())?;
        }
        Ok(())
    }

    pub fn insert_into(&self, store: &mut ParamStore) -> Result<()> {
        self.insert_with_prefix(store, SCORE_PREFIX, Group::Anchors)
    }

    pub fn from_store_prefix(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |s: &str| store.get(&format!("{prefix}.{s}")).cloned();
        let p = ScoreParams {
            anchor_weight: get("w")?,
            input_weight: get("u")?,
            product_weight: get("vm")?,
            output: get("v")?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Self::from_store_prefix(store, SCORE_PREFIX)
    }
}

/// Weights of the two terms of the localization measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LccConfig {
    pub l_alpha: f64,
    pub l_beta: f64,
    /// Use `‖x - r‖²` instead of `‖x - r‖` in the first term.
    pub squared: bool,
}

impl Default for LccConfig {
    fn default() -> Self {
        LccConfig {
            l_alpha: 1.0,
            l_beta: 0.01,
            squared: false,
        }
    }
}

impl LccConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("l_alpha", self.l_alpha), ("l_beta", self.l_beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Score parameters bound on a graph.
#[derive(Debug, Clone, Copy)]
pub struct ScoreVars {
    pub w: Var,
    pub u: Var,
    pub vm: Var,
    pub v: Var,
}

impl ScoreVars {
    pub fn bind(g: &mut Graph<'_>, prefix: &str) -> Result<Self> {
        Ok(ScoreVars {
            w: g.param(&format!("{prefix}.w"))?,
            u: g.param(&format!("{prefix}.u"))?,
            vm: g.param(&format!("{prefix}.vm"))?,
            v: g.param(&format!("{prefix}.v"))?,
        })
    }

    pub fn constants(g: &mut Graph<'_>, p: &ScoreParams) -> Self {
        ScoreVars {
            w: g.constant(p.anchor_weight.clone()),
            u: g.constant(p.input_weight.clone()),
            vm: g.constant(p.product_weight.clone()),
            v: g.constant(p.output.clone()),
        }
    }
}

/// `W_s v_j` for every anchor; independent of the input so it can be shared.
pub fn anchor_keys(g: &mut Graph<'_>, anchors: Var, s: &ScoreVars) -> Result<Var> {
    g.matmul_nt(anchors, s.w)
}

/// Tri-nonlinear scores of `x` against every anchor row, given precomputed
/// [`anchor_keys`].
pub fn tri_scores_with_keys(g: &mut Graph<'_>, anchors: Var, keys: Var, s: &ScoreVars, x: Var) -> Result<Var> {
    let ux = g.matvec(s.u, x)?;
    let prod = g.mul_rows(anchors, x)?;
    let vp = g.matmul_nt(prod, s.vm)?;
    let pre = g.add(keys, vp)?;
    let pre = g.add_rows(pre, ux)?;
    let act = g.tanh(pre);
    g.matvec(act, s.v)
}

pub fn tri_scores(g: &mut Graph<'_>, anchors: Var, s: &ScoreVars, x: Var) -> Result<Var> {
    let keys = anchor_keys(g, anchors, s)?;
    tri_scores_with_keys(g, anchors, keys, s, x)
}

/// `(γ(x), Σ_j γ_j v_j)` on a graph.
pub fn code(g: &mut Graph<'_>, anchors: Var, keys: Var, s: &ScoreVars, x: Var) -> Result<(Var, Var)> {
    let scores = tri_scores_with_keys(g, anchors, keys, s, x)?;
    let gamma = g.softmax(scores)?;
    let recon = g.matvec_t(anchors, gamma)?;
    Ok((gamma, recon))
}

/// `l_α ‖x - r‖ + l_β Σ_j |γ_j| ‖v_j - r‖²` with `r = Σ_j γ_j v_j`.
pub fn measure_var(g: &mut Graph<'_>, anchors: Var, keys: Var, s: &ScoreVars, x: Var, cfg: &LccConfig) -> Result<Var> {
    let (gamma, recon) = code(g, anchors, keys, s, x)?;
    let diff = g.sub(x, recon)?;
    let fit = if cfg.squared { g.sq_norm(diff) } else { g.norm(diff) };
    let neg = g.scale(recon, -1.0);
    let spread = g.add_rows(anchors, neg)?;
    let dists = g.row_sq_norms(spread)?;
    let weights = g.abs(gamma);
    let local = g.dot(weights, dists)?;
    let fit = g.scale(fit, cfg.l_alpha);
    let local = g.scale(local, cfg.l_beta);
    g.add(fit, local)
}

fn check_input(x: &[f64], anchors: &AnchorSet, params: &ScoreParams) -> Result<()> {
    params.validate()?;
    if x.len() != anchors.dim() || params.dim() != anchors.dim() {
        return Err(Error::shape(
            "lcc",
            format!("input {} / anchors {} / score params {}", x.len(), anchors.dim(), params.dim()),
        ));
    }
    Ok(())
}

/// Evaluates `f` on a throwaway graph holding the inputs as constants.
fn eval<T>(
    x: &[f64],
    anchors: &AnchorSet,
    params: &ScoreParams,
    f: impl FnOnce(&mut Graph<'_>, Var, Var, &ScoreVars) -> Result<T>,
) -> Result<T> {
    check_input(x, anchors, params)?;
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let a = g.constant(anchors.tensor().clone());
    let xv = g.constant(Tensor::vector(x.to_vec()));
    let s = ScoreVars::constants(&mut g, params);
    f(&mut g, a, xv, &s)
}

/// Score of `x` against a single anchor `v`.
pub fn tri_score(x: &[f64], v: &[f64], params: &ScoreParams) -> Result<f64> {
    let one = AnchorSet::from_vectors(&[v.to_vec()])?;
    eval(x, &one, params, |g, a, xv, s| {
        let sc = tri_scores(g, a, s, xv)?;
        Ok(g.value(sc).data()[0])
    })
}

/// Soft coefficients `γ(x)`, a point on the simplex.
pub fn lcc_weights(x: &[f64], anchors: &AnchorSet, params: &ScoreParams) -> Result<Vec<f64>> {
    eval(x, anchors, params, |g, a, xv, s| {
        let sc = tri_scores(g, a, s, xv)?;
        let gamma = g.softmax(sc)?;
        Ok(g.value(gamma).data().to_vec())
    })
}

/// `Σ_j γ_j v_j`.
pub fn reconstruct(gamma: &[f64], anchors: &AnchorSet) -> Result<Vec<f64>> {
    if gamma.len() != anchors.count() {
        return Err(Error::shape(
            "reconstruct",
            format!("{} coefficients for {} anchors", gamma.len(), anchors.count()),
        ));
    }
    let mut out = vec![0.0; anchors.dim()];
    for (j, &w) in gamma.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(anchors.anchor(j)) {
            *o += w * v;
        }
    }
    Ok(out)
}

pub fn localization_measure(x: &[f64], anchors: &AnchorSet, params: &ScoreParams, cfg: &LccConfig) -> Result<f64> {
    cfg.validate()?;
    eval(x, anchors, params, |g, a, xv, s| {
        let keys = anchor_keys(g, a, s)?;
        let m = measure_var(g, a, keys, s, xv, cfg)?;
        g.item(m)
    })
}

/// Pointwise approximation-error bound; the same expression as
/// [`localization_measure`] with the unsquared first term. Diagnostic only.
pub fn lipschitz_bound_diag(x: &[f64], anchors: &AnchorSet, params: &ScoreParams, l_alpha: f64, l_beta: f64) -> Result<f64> {
    let cfg = LccConfig {
        l_alpha,
        l_beta,
        squared: false,
    };
    localization_measure(x, anchors, params, &cfg)
}

/// Mean localization measure over the rows of `data`.
pub fn mean_measure(data: &Tensor, anchors: &AnchorSet, params: &ScoreParams, cfg: &LccConfig) -> Result<f64> {
    cfg.validate()?;
    params.validate()?;
    if data.shape().len() != 2 || data.rows() == 0 {
        return Err(Error::Empty("anchor-fitting dataset"));
    }
    if data.cols() != anchors.dim() || params.dim() != anchors.dim() {
        return Err(Error::shape("mean_measure", format!("data dim {} vs anchors {}", data.cols(), anchors.dim())));
    }
    let store = ParamStore::new();
    let mut total = 0.0;
    for chunk in (0..data.rows()).collect::<Vec<_>>().chunks(256) {
        let mut g = Graph::new(&store);
        let a = g.constant(anchors.tensor().clone());
        let s = ScoreVars::constants(&mut g, params);
        let keys = anchor_keys(&mut g, a, &s)?;
        for &i in chunk {
            let x = g.constant(Tensor::vector(data.row(i).to_vec()));
            let m = measure_var(&mut g, a, keys, &s, x, cfg)?;
            total += g.item(m)?;
        }
    }
    let mean = total / data.rows() as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite {
            context: "mean localization measure".into(),
        });
    }
    Ok(mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorInit {
    /// Distinct rows drawn from the dataset; Gaussian noise for any excess.
    DataSample,
    /// Isotropic Gaussian noise around the origin.
    Gaussian,
}

impl std::str::FromStr for AnchorInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "data-sample" => Ok(AnchorInit::DataSample),
            "gaussian" => Ok(AnchorInit::Gaussian),
            other => Err(Error::Parse(format!("unknown anchor init `{other}`"))),
        }
    }
}

impl std::fmt::Display for AnchorInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AnchorInit::DataSample => "data-sample",
            AnchorInit::Gaussian => "gaussian",
        })
    }
}

/// Optimisation settings for [`fit_anchors`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Peak Adam learning rate, decayed to zero on a cosine schedule.
    pub lr: f64,
    pub init: AnchorInit,
    /// Standard deviation of Gaussian anchor initialisation.
    pub init_std: f64,
    /// Score attention width; `None` means the anchor dimension.
    pub score_dim: Option<usize>,
    pub score_init_std: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 500,
            batch_size: 32,
            lr: 0.05,
            init: AnchorInit::DataSample,
            init_std: 1.0,
            score_dim: None,
            score_init_std: 0.1,
            seed: 42,
        }
    }
}

/// Outcome of [`fit_anchors`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub anchors: AnchorSet,
    pub score: ScoreParams,
    pub initial_measure: f64,
    pub final_measure: f64,
    /// Mini-batch mean measure at every iteration.
    pub history: Vec<f64>,
}

fn initial_anchors(data: &Tensor, count: usize, fit: &FitConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let (n, d) = (data.rows(), data.cols());
    let mut rows = Vec::with_capacity(count);
    if fit.init == AnchorInit::DataSample {
        let take = count.min(n);
        for i in rand::seq::index::sample(rng, n, take) {
            rows.push(data.row(i).to_vec());
        }
    }
    while rows.len() < count {
        rows.push(Tensor::randn(&[d], fit.init_std, rng).into_data());
    }
    Tensor::from_rows(&rows).expect("rows share the data dimension")
}

/// Minimises the mean localization measure over the rows of `data` with
/// mini-batch Adam, jointly over anchors and score parameters.
pub fn fit_anchors(data: &Tensor, count: usize, cfg: &LccConfig, fit: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    if data.shape().len() != 2 || data.rows() == 0 {
        return Err(Error::Empty("anchor-fitting dataset"));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("anchor count must be at least 1".into()));
    }
    if fit.batch_size == 0 || fit.lr.is_nan() || fit.lr <= 0.0 {
        return Err(Error::InvalidArgument("fit batch size and learning rate must be positive".into()));
    }
    if !data.all_finite() {
        return Err(Error::NonFinite {
            context: "anchor-fitting dataset".into(),
        });
    }
    let (n, d) = (data.rows(), data.cols());
    let k = fit.score_dim.unwrap_or(d);
    let mut rng = ChaCha8Rng::seed_from_u64(fit.seed);
    let anchors = initial_anchors(data, count, fit, &mut rng);
    let score = ScoreParams::random(d, k, fit.score_init_std, &mut rng);

    let mut store = ParamStore::new();
    store.insert(ANCHORS, Group::Anchors, anchors)?;
    score.insert_into(&mut store)?;
    let initial_measure = mean_measure(data, &AnchorSet::from_store(&store)?, &score, cfg)?;

    let mut opt = Optimizer::new(OptimizerConfig::adam(fit.lr));
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut history = Vec::with_capacity(fit.iterations);
    for it in 0..fit.iterations {
        let mut batch = Vec::with_capacity(fit.batch_size.min(n));
        while batch.len() < fit.batch_size.min(n) {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let grads = {
            let mut g = Graph::new(&store);
            let a = g.param(ANCHORS)?;
            let s = ScoreVars::bind(&mut g, SCORE_PREFIX)?;
            let keys = anchor_keys(&mut g, a, &s)?;
            let mut terms = Vec::with_capacity(batch.len());
            for &i in &batch {
                let x = g.constant(Tensor::vector(data.row(i).to_vec()));
                terms.push(measure_var(&mut g, a, keys, &s, x, cfg)?);
            }
            let total = g.add_n(&terms)?;
            let loss = g.scale(total, 1.0 / batch.len() as f64);
            let value = g.item(loss)?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("anchor fitting at iteration {it}"),
                });
            }
            history.push(value);
            g.backward(loss).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("{context} at anchor-fitting iteration {it}"),
                },
                other => other,
            })?
        };
        let progress = it as f64 / fit.iterations as f64;
        let lr = fit.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        opt.step_with_lr(&mut store, &grads, lr)?;
    }
    let anchors = AnchorSet::from_store(&store)?;
    let score = ScoreParams::from_store(&store)?;
    let final_measure = mean_measure(data, &anchors, &score, cfg)?;
    Ok(FitResult {
        anchors,
        score,
        initial_measure,
        final_measure,
        history,
    })
}
