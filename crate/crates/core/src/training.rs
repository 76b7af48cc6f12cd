//! Stage-wise training: baseline pretraining, anchor fitting, monolingual
//! fine-tuning and bilingual training, plus checkpoint files.
//!
//! Each stage trains a fixed set of parameter groups. Every other group is
//! frozen and its hash is compared before and after the stage; a mismatch
//! aborts with [`Error::FreezeViolation`].
//!
//! # Checkpoint layout
//!
//! ```text
//! magic      8 bytes   "REFNMTCK"
//! version    u32 LE
//! length     u64 LE    byte length of the manifest
//! manifest   JSON      config, dimensions, provenance, tensor table, payload digest
//! payload    f64 LE    tensors back to back, offsets given in the manifest
//! ```
//!
//! Files are written to a temporary sibling and renamed into place.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{clip_gradient_norm, clip_gradient_value, Graph, Group, Optimizer, OptimizerConfig, OptimizerKind, ParamStore};
use crate::bref::{self, BRefDims};
use crate::corpus::{batch_encoded, Batch};
use crate::error::{Error, Result};
use crate::lcc::{self, AnchorInit, FitConfig, FitResult, LccConfig};
use crate::model::{self, Model, ModelDims, Regularization};
use crate::mref::{self, MRefDims};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"REFNMTCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrain,
    FitAnchors,
    FinetuneM,
    TrainB,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::FitAnchors => "fit-anchors",
            Stage::FinetuneM => "finetune-m",
            Stage::TrainB => "train-b",
        }
    }

    /// Groups updated by the stage.
    pub fn trainable(self) -> &'static [Group] {
        match self {
            Stage::Pretrain => &[Group::Encoder, Group::Decoder],
            Stage::FitAnchors => &[Group::Anchors],
            Stage::FinetuneM => &[Group::Decoder, Group::MRef],
            Stage::TrainB => &[Group::BRef],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" | "train" => Ok(Stage::Pretrain),
            "fit-anchors" => Ok(Stage::FitAnchors),
            "finetune-m" => Ok(Stage::FinetuneM),
            "train-b" => Ok(Stage::TrainB),
            other => Err(Error::Parse(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipMode {
    /// Rescale the whole gradient to at most the clip value in global norm.
    Norm,
    /// Clamp each gradient element into `[-clip, clip]`.
    Value,
}

impl FromStr for ClipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm" => Ok(ClipMode::Norm),
            "value" => Ok(ClipMode::Value),
            other => Err(Error::Parse(format!("unknown clip mode `{other}`"))),
        }
    }
}

impl fmt::Display for ClipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClipMode::Norm => "norm",
            ClipMode::Value => "value",
        })
    }
}

fn default_fit_init() -> AnchorInit {
    AnchorInit::DataSample
}

/// Hyperparameters of one stage. Unused fields are ignored by stages they do
/// not concern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub embed_dropout: f64,
    pub output_dropout: f64,
    pub clip: f64,
    pub clip_mode: ClipMode,
    /// Weight of the bilingual regression loss in the joint objective.
    pub lambda: f64,
    /// Weight of the per-anchor weight norm inside the regression loss.
    pub lambda_m: f64,
    pub l_alpha: f64,
    pub l_beta: f64,
    /// Squared reconstruction error in the localization measure.
    #[serde(default)]
    pub l_squared: bool,
    /// Monolingual anchor count.
    pub m_anchors: usize,
    /// Width of the global attention over monolingual anchors.
    pub m_attention: usize,
    /// Bilingual anchor count.
    pub b_anchors: usize,
    /// Bilingual anchor width `d_a`.
    pub anchor_dim: usize,
    /// Score bilingual anchors against the raw query (anchors of query width).
    pub b_raw_query: bool,
    pub fit_iterations: usize,
    pub fit_batch: usize,
    pub fit_lr: f64,
    #[serde(default = "default_fit_init")]
    pub fit_init: AnchorInit,
    pub seed: u64,
    /// Epochs without dev improvement before stopping; 0 disables stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            embed_dropout: 0.2,
            output_dropout: 0.3,
            clip: 1.0,
            clip_mode: ClipMode::Norm,
            lambda: 1.0,
            lambda_m: 1e-4,
            l_alpha: 1.0,
            l_beta: 0.01,
            l_squared: false,
            m_anchors: 100,
            m_attention: 64,
            b_anchors: 30,
            anchor_dim: 16,
            b_raw_query: false,
            fit_iterations: 500,
            fit_batch: 32,
            fit_lr: 0.05,
            fit_init: AnchorInit::DataSample,
            seed: 42,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        TrainConfig {
            stage,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 || self.fit_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        for (name, v) in [("lr", self.lr), ("fit_lr", self.fit_lr), ("clip", self.clip)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("embed_dropout", self.embed_dropout), ("output_dropout", self.output_dropout)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        for (name, v) in [("lambda", self.lambda), ("lambda_m", self.lambda_m)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.m_anchors == 0 || self.b_anchors == 0 || self.anchor_dim == 0 || self.m_attention == 0 {
            return bad("anchor counts and widths must be positive".into());
        }
        self.lcc().validate()
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Adam => OptimizerConfig::adam(self.lr),
            OptimizerKind::Sgd => OptimizerConfig::sgd(self.lr),
        }
    }

    pub fn lcc(&self) -> LccConfig {
        LccConfig {
            l_alpha: self.l_alpha,
            l_beta: self.l_beta,
            squared: self.l_squared,
        }
    }

    pub fn fit(&self) -> FitConfig {
        FitConfig {
            iterations: self.fit_iterations,
            batch_size: self.fit_batch,
            lr: self.fit_lr,
            init: self.fit_init,
            seed: self.seed,
            ..FitConfig::default()
        }
    }

    pub fn mref_dims(&self) -> MRefDims {
        MRefDims {
            anchors: self.m_anchors,
            attention: self.m_attention,
        }
    }

    pub fn bref_dims(&self) -> BRefDims {
        BRefDims {
            anchors: self.b_anchors,
            anchor_dim: self.anchor_dim,
            score_dim: None,
            raw_query: self.b_raw_query,
            lambda_m: self.lambda_m,
        }
    }
}

/// Encoded training and development pairs.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<(Vec<usize>, Vec<usize>)>,
    pub dev: Vec<(Vec<usize>, Vec<usize>)>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    /// Token-averaged training objective over the epoch.
    pub train_loss: f64,
    pub train_nll: f64,
    /// Token-averaged bilingual regression loss, when present.
    pub train_hinge: Option<f64>,
    /// Development NLL with dropout disabled; `None` without a dev set.
    pub dev_loss: Option<f64>,
    pub wall_seconds: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dev = self.dev_loss.map_or("nan".to_string(), |d| format!("{d:.6}"));
        write!(
            f,
            "{}\t{}\t{:.6}\t{}\t{:.2}",
            self.epoch, self.stage, self.train_loss, dev, self.wall_seconds
        )
    }
}

/// Token-averaged losses in evaluation mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalLoss {
    pub nll: f64,
    pub hinge: Option<f64>,
    pub tokens: usize,
}

/// Evaluation-mode NLL (and regression loss) over `pairs`.
pub fn evaluate(model: &Model, pairs: &[(Vec<usize>, Vec<usize>)], batch_size: usize) -> Result<EvalLoss> {
    let batches = batch_encoded(pairs, batch_size, None)?;
    let (mut nll, mut hinge, mut tokens) = (0.0, 0.0, 0usize);
    let mut has_hinge = false;
    for b in &batches {
        let mut g = Graph::new(&model.params);
        let l = model::batch_loss(&mut g, model, b, 0.0, None)?;
        nll += g.item(l.nll)? * l.tokens as f64;
        if let Some(h) = l.hinge {
            has_hinge = true;
            hinge += g.item(h)? * l.tokens as f64;
        }
        tokens += l.tokens;
    }
    let n = tokens as f64;
    Ok(EvalLoss {
        nll: nll / n,
        hinge: has_hinge.then_some(hinge / n),
        tokens,
    })
}

/// Model, the configuration of the stage that produced it, and the stages
/// applied so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub provenance: Vec<Stage>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: Group,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: TrainConfig,
    dims: ModelDims,
    mref: Option<MRefDims>,
    bref: Option<BRefDims>,
    provenance: Vec<Stage>,
    tensors: Vec<TensorEntry>,
    payload_bytes: u64,
    payload_sha256: String,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt(msg.into())
}

impl Checkpoint {
    pub fn has_stage(&self, stage: Stage) -> bool {
        self.provenance.contains(&stage)
    }

    pub fn provenance_chain(&self) -> String {
        self.provenance.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" -> ")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::with_capacity(self.model.params.total_count() * 8);
        let mut tensors = Vec::with_capacity(self.model.params.len());
        for (_, name, group, t) in self.model.params.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                group,
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            for &v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            config: self.config.clone(),
            dims: self.model.dims,
            mref: self.model.mref,
            bref: self.model.bref,
            provenance: self.provenance.clone(),
            tensors,
            payload_bytes: payload.len() as u64,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| corrupt(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(corrupt("file shorter than header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let body = &bytes[20..];
        if len > body.len() as u64 {
            return Err(corrupt("truncated manifest"));
        }
        let (json, payload) = body.split_at(len as usize);
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| corrupt(format!("manifest: {e}")))?;
        if payload.len() as u64 != manifest.payload_bytes {
            return Err(corrupt(format!(
                "payload is {} bytes, manifest says {}",
                payload.len(),
                manifest.payload_bytes
            )));
        }
        if hex::encode(Sha256::digest(payload)) != manifest.payload_sha256 {
            return Err(corrupt("payload digest mismatch"));
        }
        let mut params = ParamStore::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start
                .checked_add(n * 8)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| corrupt(format!("tensor `{}` runs past the payload", e.name)))?;
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(e.name.clone(), e.group, Tensor::new(e.shape.clone(), data)?)?;
        }
        let model = Model {
            dims: manifest.dims,
            mref: manifest.mref,
            bref: manifest.bref,
            params,
        };
        validate_shapes(&model)?;
        Ok(Checkpoint {
            config: manifest.config,
            model,
            provenance: manifest.provenance,
        })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let name = path
            .file_name()
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint path {} has no file name", path.display())))?;
        let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rejects a checkpoint whose dimensions differ from `dims`.
    pub fn expect_dims(&self, dims: &ModelDims) -> Result<()> {
        if &self.model.dims != dims {
            return Err(Error::shape(
                "checkpoint",
                format!("checkpoint has dimensions {:?}, configuration asks for {:?}", self.model.dims, dims),
            ));
        }
        Ok(())
    }
}

/// Checks every tensor against the shapes implied by the recorded dimensions.
fn validate_shapes(model: &Model) -> Result<()> {
    model.dims.validate()?;
    let expected = crate::eval::param_shapes(&model.dims, model.mref.as_ref(), model.bref.as_ref());
    let p = &model.params;
    for (name, group, shape) in expected.iter().filter(|e| e.1 != Group::Anchors) {
        let t = p
            .get(name)
            .map_err(|_| corrupt(format!("missing tensor `{name}`")))?;
        if t.shape() != shape.as_slice() || p.group(p.id(name)?) != *group {
            return Err(Error::shape(
                "checkpoint",
                format!("`{name}` is {:?} in {}, dimensions imply {shape:?} in {group}", t.shape(), p.group(p.id(name)?)),
            ));
        }
    }
    let known = expected.len() - expected.iter().filter(|e| e.1 == Group::Anchors).count();
    let extra = p.len() - p.group_ids(Group::Anchors).count();
    if extra != known {
        return Err(corrupt(format!("{} tensors outside the anchor group, expected {known}", extra)));
    }
    if p.has_group(Group::Anchors) {
        let anchors = model.anchors()?;
        let score = lcc::ScoreParams::from_store(p)?;
        score.validate()?;
        if anchors.dim() != model.dims.context() || score.dim() != anchors.dim() {
            return Err(Error::shape(
                "checkpoint",
                format!("anchor width {} vs annotation width {}", anchors.dim(), model.dims.context()),
            ));
        }
        if let Some(m) = model.mref {
            if m.anchors != anchors.count() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("{} anchors stored, monolingual network expects {}", anchors.count(), m.anchors),
                ));
            }
        }
    } else if model.mref.is_some() {
        return Err(corrupt("monolingual network without anchors"));
    }
    Ok(())
}

/// Salts separating the random streams of a run.
const INIT_SALT: u64 = 0x1a2b_3c4d;
const DROPOUT_SALT: u64 = 0x5eed_d00d;
const ATTACH_SALT: u64 = 0x0a77_ac4e;

fn rng_for(seed: u64, salt: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ salt);
    r.set_stream(stream);
    r
}

/// Shuffle generator of one epoch.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(epoch as u64);
    r
}

/// Trains `trainable` groups with every other group frozen and verified
/// unchanged afterwards. Early stopping restores the parameters with the
/// lowest dev loss (the starting point included).
fn train_groups(
    model: &mut Model,
    data: &TrainData,
    cfg: &TrainConfig,
    stage: Stage,
    logger: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if data.train.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let trainable = stage.trainable();
    model.params.train_only(trainable);
    let frozen_before = frozen_hashes(&model.params, trainable);
    let mut opt = Optimizer::new(cfg.optimizer_config());
    let has_dev = !data.dev.is_empty();
    let mut best = if has_dev {
        Some((evaluate(model, &data.dev, cfg.batch_size)?.nll, model.params.clone()))
    } else {
        None
    };
    let mut stale = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let batches = batch_encoded(&data.train, cfg.batch_size, Some(&mut epoch_rng(cfg.seed, epoch)))?;
        let mut drop_rng = rng_for(cfg.seed, DROPOUT_SALT, epoch as u64);
        let (mut obj, mut nll, mut hinge, mut tokens) = (0.0, 0.0, 0.0, 0usize);
        let mut has_hinge = false;
        for b in &batches {
            let (o, n, h, t) = train_batch(model, b, cfg, &mut opt, &mut drop_rng)
                .map_err(|e| divergence(e, stage, epoch))?;
            obj += o * t as f64;
            nll += n * t as f64;
            if let Some(h) = h {
                has_hinge = true;
                hinge += h * t as f64;
            }
            tokens += t;
        }
        let dev_loss = if has_dev {
            let d = evaluate(model, &data.dev, cfg.batch_size)?.nll;
            if !d.is_finite() {
                return Err(Error::Diverged {
                    stage: stage.to_string(),
                    epoch,
                });
            }
            Some(d)
        } else {
            None
        };
        let n = tokens as f64;
        let entry = EpochLog {
            epoch,
            stage,
            train_loss: obj / n,
            train_nll: nll / n,
            train_hinge: has_hinge.then_some(hinge / n),
            dev_loss,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("{entry}");
        logger(&entry);
        history.push(entry);
        if let (Some(d), Some((best_loss, best_params))) = (dev_loss, best.as_mut()) {
            if d < *best_loss {
                *best_loss = d;
                *best_params = model.params.clone();
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    log::info!("{stage}: no dev improvement for {stale} epochs, stopping");
                    break;
                }
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    model.params.unfreeze_all();
    check_frozen(&model.params, &frozen_before)?;
    Ok(history)
}

fn divergence(e: Error, stage: Stage, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            stage: stage.to_string(),
            epoch,
        },
        other => other,
    }
}

/// One optimizer step; returns (objective, nll, hinge, tokens).
fn train_batch(
    model: &mut Model,
    batch: &Batch,
    cfg: &TrainConfig,
    opt: &mut Optimizer,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, Option<f64>, usize)> {
    let (vals, mut grads) = {
        let mut g = Graph::new(&model.params);
        let mut reg = Regularization {
            embed_rate: cfg.embed_dropout,
            output_rate: cfg.output_dropout,
            rng,
        };
        let l = model::batch_loss(&mut g, model, batch, cfg.lambda, Some(&mut reg))?;
        let obj = g.item(l.objective)?;
        if !obj.is_finite() {
            return Err(Error::NonFinite {
                context: "training objective".into(),
            });
        }
        let nll = g.item(l.nll)?;
        let hinge = l.hinge.map(|h| g.item(h)).transpose()?;
        let grads = g.backward(l.objective)?;
        ((obj, nll, hinge, l.tokens), grads)
    };
    match cfg.clip_mode {
        ClipMode::Norm => {
            clip_gradient_norm(&mut grads, cfg.clip);
        }
        ClipMode::Value => clip_gradient_value(&mut grads, cfg.clip),
    }
    opt.step(&mut model.params, &grads)?;
    Ok(vals)
}

fn frozen_hashes(params: &ParamStore, trainable: &[Group]) -> Vec<(Group, String)> {
    Group::ALL
        .iter()
        .filter(|g| !trainable.contains(g))
        .map(|&g| (g, params.group_hash(g)))
        .collect()
}

fn check_frozen(params: &ParamStore, before: &[(Group, String)]) -> Result<()> {
    for (g, h) in before {
        if &params.group_hash(*g) != h {
            return Err(Error::FreezeViolation(g.to_string()));
        }
    }
    Ok(())
}

/// Result of a stage: the new checkpoint and its per-epoch log.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochLog>,
    /// Set by the anchor-fitting stage.
    pub fit: Option<FitResult>,
}

/// Trains a freshly initialised baseline.
pub fn pretrain(dims: ModelDims, data: &TrainData, cfg: &TrainConfig, logger: &mut dyn FnMut(&EpochLog)) -> Result<StageReport> {
    cfg.validate()?;
    let mut model = Model::new(dims, &mut rng_for(cfg.seed, INIT_SALT, 0))?;
    let epochs = train_groups(&mut model, data, cfg, Stage::Pretrain, logger)?;
    Ok(StageReport {
        checkpoint: Checkpoint {
            config: TrainConfig {
                stage: Stage::Pretrain,
                ..cfg.clone()
            },
            model,
            provenance: vec![Stage::Pretrain],
        },
        epochs,
        fit: None,
    })
}

fn require_pretrained(ckpt: &Checkpoint, stage: Stage) -> Result<()> {
    if ckpt.provenance.first() != Some(&Stage::Pretrain) {
        return Err(Error::Prerequisite(format!("{stage} needs a pretrained baseline checkpoint")));
    }
    Ok(())
}

fn next(ckpt: Checkpoint, model: Model, cfg: &TrainConfig, stage: Stage) -> Checkpoint {
    let mut provenance = ckpt.provenance;
    provenance.push(stage);
    Checkpoint {
        config: TrainConfig { stage, ..cfg.clone() },
        model,
        provenance,
    }
}

/// Fits monolingual anchors to the mean-pooled encoder states of every
/// training source under the frozen encoder.
pub fn fit_anchor_stage(ckpt: Checkpoint, data: &TrainData, cfg: &TrainConfig, logger: &mut dyn FnMut(&EpochLog)) -> Result<StageReport> {
    cfg.validate()?;
    require_pretrained(&ckpt, Stage::FitAnchors)?;
    if data.train.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let start = Instant::now();
    let mut model = ckpt.model.clone();
    let before = frozen_hashes(&model.params, Stage::FitAnchors.trainable());
    let sources: Vec<_> = data.train.iter().map(|p| p.0.clone()).collect();
    let reprs = mref::sentence_reprs(&model, &sources, 1)?;
    let lcc_cfg = cfg.lcc();
    let fit = lcc::fit_anchors(&reprs, cfg.m_anchors, &lcc_cfg, &cfg.fit()).map_err(|e| divergence(e, Stage::FitAnchors, 1))?;
    model.set_anchors(&fit.anchors, &fit.score)?;
    // Anchors are replaced wholesale, so only the other groups are compared.
    check_frozen(&model.params, &before)?;
    let dev_loss = if data.dev.is_empty() {
        None
    } else {
        let dev: Vec<_> = data.dev.iter().map(|p| p.0.clone()).collect();
        let dev_reprs = mref::sentence_reprs(&model, &dev, 1)?;
        Some(lcc::mean_measure(&dev_reprs, &fit.anchors, &fit.score, &lcc_cfg)?)
    };
    let entry = EpochLog {
        epoch: 1,
        stage: Stage::FitAnchors,
        train_loss: fit.final_measure,
        train_nll: fit.final_measure,
        train_hinge: None,
        dev_loss,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    log::info!("{entry}");
    logger(&entry);
    Ok(StageReport {
        checkpoint: next(ckpt, model, cfg, Stage::FitAnchors),
        epochs: vec![entry],
        fit: Some(fit),
    })
}

/// Adds the monolingual network (if absent) and fine-tunes decoder and
/// network with encoder and anchors frozen.
pub fn finetune_m(ckpt: Checkpoint, data: &TrainData, cfg: &TrainConfig, logger: &mut dyn FnMut(&EpochLog)) -> Result<StageReport> {
    cfg.validate()?;
    require_pretrained(&ckpt, Stage::FinetuneM)?;
    if !ckpt.model.has_anchors() {
        return Err(Error::Prerequisite("finetune-m needs fitted anchors; run fit-anchors first".into()));
    }
    let mut model = ckpt.model.clone();
    if model.mref.is_none() {
        let dims = MRefDims {
            anchors: model.anchors()?.count(),
            attention: cfg.m_attention,
        };
        mref::attach(&mut model, dims, &mut rng_for(cfg.seed, ATTACH_SALT, 1))?;
    }
    let epochs = train_groups(&mut model, data, cfg, Stage::FinetuneM, logger)?;
    Ok(StageReport {
        checkpoint: next(ckpt, model, cfg, Stage::FinetuneM),
        epochs,
        fit: None,
    })
}

/// Adds the bilingual network (if absent) and trains only its parameters on
/// the joint likelihood and regression objective.
pub fn train_b(ckpt: Checkpoint, data: &TrainData, cfg: &TrainConfig, logger: &mut dyn FnMut(&EpochLog)) -> Result<StageReport> {
    cfg.validate()?;
    require_pretrained(&ckpt, Stage::TrainB)?;
    let mut model = ckpt.model.clone();
    if model.bref.is_none() {
        bref::attach(&mut model, cfg.bref_dims(), &mut rng_for(cfg.seed, ATTACH_SALT, 2))?;
    }
    let epochs = train_groups(&mut model, data, cfg, Stage::TrainB, logger)?;
    Ok(StageReport {
        checkpoint: next(ckpt, model, cfg, Stage::TrainB),
        epochs,
        fit: None,
    })
}

/// Starting point of a stage.
#[derive(Debug, Clone)]
pub enum StageInput {
    Fresh(ModelDims),
    Checkpoint(Box<Checkpoint>),
}

/// Runs `cfg.stage` on `input`.
pub fn run_stage(input: StageInput, data: &TrainData, cfg: &TrainConfig, logger: &mut dyn FnMut(&EpochLog)) -> Result<StageReport> {
    match (cfg.stage, input) {
        (Stage::Pretrain, StageInput::Fresh(dims)) => pretrain(dims, data, cfg, logger),
        (Stage::Pretrain, StageInput::Checkpoint(_)) => {
            Err(Error::InvalidArgument("pretraining starts from fresh dimensions, not a checkpoint".into()))
        }
        (stage, StageInput::Fresh(_)) => Err(Error::Prerequisite(format!("{stage} needs an input checkpoint"))),
        (Stage::FitAnchors, StageInput::Checkpoint(c)) => fit_anchor_stage(*c, data, cfg, logger),
        (Stage::FinetuneM, StageInput::Checkpoint(c)) => finetune_m(*c, data, cfg, logger),
        (Stage::TrainB, StageInput::Checkpoint(c)) => train_b(*c, data, cfg, logger),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_task, SynthKind, Vocab};
    use crate::model::CellKind;

    fn quiet() -> impl FnMut(&EpochLog) {
        |_: &EpochLog| {}
    }

    fn copy_data(pairs: usize, seed: u64) -> (TrainData, ModelDims) {
        let corpus = generate_synthetic_task(SynthKind::Copy, 12, pairs, (2, 5), seed).unwrap();
        let vocab = Vocab::build(&corpus.sources(), 100, 1).unwrap();
        let enc: Vec<_> = corpus
            .pairs
            .iter()
            .map(|(s, t)| (vocab.encode(s), vocab.encode(t)))
            .collect();
        let split = pairs * 4 / 5;
        let dims = ModelDims {
            src_vocab: vocab.len(),
            tgt_vocab: vocab.len(),
            embed: 8,
            hidden: 10,
            attention: 8,
            readout: 8,
            cell: CellKind::Gru,
        };
        (
            TrainData {
                train: enc[..split].to_vec(),
                dev: enc[split..].to_vec(),
            },
            dims,
        )
    }

    fn small_cfg(stage: Stage, epochs: usize) -> TrainConfig {
        TrainConfig {
            stage,
            epochs,
            batch_size: 8,
            lr: 5e-3,
            m_anchors: 4,
            m_attention: 6,
            b_anchors: 3,
            anchor_dim: 5,
            fit_iterations: 30,
            fit_batch: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_initialisation() {
        let (data, dims) = copy_data(20, 1);
        let cfg = small_cfg(Stage::Pretrain, 0);
        let rep = pretrain(dims, &data, &cfg, &mut quiet()).unwrap();
        let init = Model::new(dims, &mut rng_for(cfg.seed, INIT_SALT, 0)).unwrap();
        assert_eq!(rep.checkpoint.model, init);
        assert!(rep.epochs.is_empty());
    }

    #[test]
    fn checkpoint_round_trip_and_determinism() {
        let (data, dims) = copy_data(30, 2);
        let cfg = small_cfg(Stage::Pretrain, 2);
        let a = pretrain(dims, &data, &cfg, &mut quiet()).unwrap().checkpoint;
        let b = pretrain(dims, &data, &cfg, &mut quiet()).unwrap().checkpoint;
        let bytes = a.to_bytes().unwrap();
        assert_eq!(bytes, b.to_bytes().unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        a.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, a);
        for ((_, n, _, t), (_, n2, _, t2)) in a.model.params.iter().zip(back.model.params.iter()) {
            assert_eq!(n, n2);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t), bits(t2));
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let (data, dims) = copy_data(10, 3);
        let ck = pretrain(dims, &data, &small_cfg(Stage::Pretrain, 0), &mut quiet()).unwrap().checkpoint;
        let bytes = ck.to_bytes().unwrap();
        for cut in [5, 30, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::VersionMismatch { found: 9, .. })));
        let mut v = bytes.clone();
        let last = v.len() - 1;
        v[last] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Corrupt(_))));

        let other = ModelDims { hidden: 6, ..dims };
        assert!(matches!(ck.expect_dims(&other), Err(Error::Shape { .. })));
        ck.expect_dims(&dims).unwrap();
        // Recorded dimensions that disagree with the tensors.
        let mut lying = ck.clone();
        lying.model.dims.hidden = 6;
        let bytes = lying.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Shape { .. })));
    }

    #[test]
    fn stage_prerequisites_and_provenance() {
        let (data, dims) = copy_data(30, 4);
        let base = pretrain(dims, &data, &small_cfg(Stage::Pretrain, 1), &mut quiet()).unwrap().checkpoint;
        let cfg = small_cfg(Stage::FinetuneM, 1);
        let err = run_stage(StageInput::Checkpoint(Box::new(base.clone())), &data, &cfg, &mut quiet()).unwrap_err();
        assert!(matches!(err, Error::Prerequisite(_)));
        let err = run_stage(StageInput::Fresh(dims), &data, &small_cfg(Stage::TrainB, 1), &mut quiet()).unwrap_err();
        assert!(matches!(err, Error::Prerequisite(_)));
        let mut orphan = base.clone();
        orphan.provenance.clear();
        assert!(matches!(
            train_b(orphan, &data, &small_cfg(Stage::TrainB, 1), &mut quiet()),
            Err(Error::Prerequisite(_))
        ));

        let b = run_stage(StageInput::Checkpoint(Box::new(base.clone())), &data, &small_cfg(Stage::TrainB, 1), &mut quiet()).unwrap();
        assert_eq!(b.checkpoint.provenance, vec![Stage::Pretrain, Stage::TrainB]);
        assert_eq!(b.checkpoint.provenance_chain(), "pretrain -> train-b");
    }

    #[test]
    fn freeze_contracts_hold_across_stages() {
        let (data, dims) = copy_data(40, 5);
        let base = pretrain(dims, &data, &small_cfg(Stage::Pretrain, 2), &mut quiet()).unwrap().checkpoint;
        let h0 = base.model.params.group_hashes();

        let fitted = fit_anchor_stage(base.clone(), &data, &small_cfg(Stage::FitAnchors, 1), &mut quiet()).unwrap();
        let h1 = fitted.checkpoint.model.params.group_hashes();
        assert_eq!(h0[&Group::Encoder], h1[&Group::Encoder]);
        assert_eq!(h0[&Group::Decoder], h1[&Group::Decoder]);
        assert_eq!(fitted.checkpoint.model.anchors().unwrap().count(), 4);

        let mut cfg = small_cfg(Stage::FinetuneM, 2);
        cfg.patience = 0;
        let m = finetune_m(fitted.checkpoint.clone(), &data, &cfg, &mut quiet()).unwrap().checkpoint;
        let h2 = m.model.params.group_hashes();
        assert_eq!(h1[&Group::Encoder], h2[&Group::Encoder]);
        assert_eq!(h1[&Group::Anchors], h2[&Group::Anchors]);
        assert_ne!(h1[&Group::Decoder], h2[&Group::Decoder]);
        assert_eq!(m.provenance, vec![Stage::Pretrain, Stage::FitAnchors, Stage::FinetuneM]);

        let mut cfg = small_cfg(Stage::TrainB, 2);
        cfg.patience = 0;
        let b = train_b(base.clone(), &data, &cfg, &mut quiet()).unwrap().checkpoint;
        let h3 = b.model.params.group_hashes();
        assert_eq!(h0[&Group::Encoder], h3[&Group::Encoder]);
        assert_eq!(h0[&Group::Decoder], h3[&Group::Decoder]);
        assert!(b.model.params.count(Group::BRef) > 0);

        // Round trip of a model carrying every extension.
        let both = train_b(m, &data, &small_cfg(Stage::TrainB, 0), &mut quiet()).unwrap().checkpoint;
        assert_eq!(Checkpoint::from_bytes(&both.to_bytes().unwrap()).unwrap(), both);
    }

    #[test]
    fn zero_epoch_stages_leave_parameters() {
        let (data, dims) = copy_data(20, 6);
        let base = pretrain(dims, &data, &small_cfg(Stage::Pretrain, 1), &mut quiet()).unwrap().checkpoint;
        let b = train_b(base.clone(), &data, &small_cfg(Stage::TrainB, 0), &mut quiet()).unwrap().checkpoint;
        for g in [Group::Encoder, Group::Decoder] {
            assert_eq!(b.model.params.group_hash(g), base.model.params.group_hash(g));
        }
        let mut fresh = base.model.clone();
        bref::attach(&mut fresh, small_cfg(Stage::TrainB, 0).bref_dims(), &mut rng_for(42, ATTACH_SALT, 2)).unwrap();
        assert_eq!(b.model, fresh);
    }

    #[test]
    fn divergence_reports_epoch() {
        let (data, dims) = copy_data(20, 7);
        let mut base = pretrain(dims, &data, &small_cfg(Stage::Pretrain, 0), &mut quiet()).unwrap().checkpoint;
        base.model.params.get_mut("dec.proj.b").unwrap().data_mut()[5] = f64::NAN;
        let mut cfg = small_cfg(Stage::TrainB, 3);
        cfg.patience = 0;
        let mut d = data.clone();
        d.dev.clear();
        match train_b(base, &d, &cfg, &mut quiet()) {
            Err(Error::Diverged { stage, epoch }) => {
                assert_eq!(stage, "train-b");
                assert_eq!(epoch, 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn early_stopping_restores_best() {
        let (data, dims) = copy_data(30, 8);
        let mut cfg = small_cfg(Stage::Pretrain, 6);
        // Absurd step size so the dev loss gets worse after the first epochs.
        cfg.lr = 5.0;
        cfg.patience = 2;
        let rep = pretrain(dims, &data, &cfg, &mut quiet());
        if let Ok(rep) = rep {
            let best = rep
                .epochs
                .iter()
                .filter_map(|e| e.dev_loss)
                .fold(f64::INFINITY, f64::min);
            let init = Model::new(dims, &mut rng_for(cfg.seed, INIT_SALT, 0)).unwrap();
            let init_dev = evaluate(&init, &data.dev, 8).unwrap().nll;
            let got = evaluate(&rep.checkpoint.model, &data.dev, 8).unwrap().nll;
            assert_eq!(got, best.min(init_dev));
            assert!(rep.epochs.len() <= 6);
        }
    }

    #[test]
    fn config_validation_and_log_format() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.embed_dropout = 1.0;
        assert!(c.validate().is_err());
        let c = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let e = EpochLog {
            epoch: 3,
            stage: Stage::TrainB,
            train_loss: 1.5,
            train_nll: 1.0,
            train_hinge: Some(0.5),
            dev_loss: Some(2.0),
            wall_seconds: 0.25,
        };
        let line = e.to_string();
        let fields: Vec<_> = line.split('\t').collect();
        assert_eq!(fields, ["3", "train-b", "1.500000", "2.000000", "0.25"]);
        for s in ["pretrain", "fit-anchors", "finetune-m", "train-b"] {
            assert_eq!(s.parse::<Stage>().unwrap().to_string(), s);
        }
    }
}
