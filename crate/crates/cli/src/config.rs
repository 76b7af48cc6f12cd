//! Experiment configuration: a flat `key = value` file plus `--key value`
//! flags. A flag given on the command line wins over the file; the file wins
//! over built-in defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use refnet::autodiff::OptimizerKind;
use refnet::corpus::SynthKind;
use refnet::decode::BeamConfig;
use refnet::lcc::AnchorInit;
use refnet::model::{CellKind, ModelDims};
use refnet::training::{ClipMode, Stage, TrainConfig};

use crate::error::CliError;

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    pub flag: bool,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default,
        help,
        flag: false,
    }
}

const fn flag(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default,
        help,
        flag: true,
    }
}

/// Every configuration key. Flags are `--<name>`; config-file lines are
/// `<name> = <value>`.
pub const KEYS: &[Key] = &[
    // Files
    key("train-src", "", "training source file"),
    key("train-tgt", "", "training target file"),
    key("dev-src", "", "development source file"),
    key("dev-tgt", "", "development target file"),
    key("test-src", "", "test source file (length buckets in evaluate)"),
    key("test-tgt", "", "test target file"),
    key("src-vocab", "", "source vocabulary file [default: <checkpoint>.src.vocab]"),
    key("tgt-vocab", "", "target vocabulary file [default: <checkpoint>.tgt.vocab]"),
    key("checkpoint", "", "input checkpoint"),
    key("save", "", "output checkpoint"),
    key("input", "", "source sentences to translate"),
    key("output", "", "translation output file"),
    key("hypotheses", "", "hypothesis file to score"),
    key("references", "", "comma-separated reference files"),
    key("report", "", "write the evaluation or parameter report as TSV here"),
    key("log-file", "", "append the per-epoch training log here"),
    // Corpus
    key("max-vocab", "30000", "vocabulary size cap including specials"),
    key("min-count", "1", "minimum token count for the vocabulary"),
    key("max-len", "50", "drop training pairs longer than this"),
    // Model
    key("embed", "32", "embedding width"),
    key("hidden", "64", "recurrent state width"),
    key("attention", "64", "source attention width"),
    key("readout", "64", "output layer width"),
    key("cell", "gru", "recurrent cell: gru | tanh"),
    // Training
    key("epochs", "20", "training epochs"),
    key("batch-size", "32", "sentence pairs per batch"),
    key("lr", "0.001", "learning rate"),
    key("optimizer", "adam", "optimizer: adam | sgd"),
    key("embed-dropout", "0.2", "dropout on embeddings"),
    key("output-dropout", "0.3", "dropout on the output layer"),
    key("clip", "1", "gradient clipping threshold"),
    key("clip-mode", "norm", "clipping: norm (global norm) | value (element-wise)"),
    key("lambda", "1", "weight of the bilingual regression loss"),
    key("lambda-m", "0.0001", "weight of the per-anchor weight norm in the regression loss"),
    key("l-alpha", "1", "localization measure: reconstruction weight"),
    key("l-beta", "0.01", "localization measure: locality weight"),
    flag("l-squared", "false", "localization measure: squared reconstruction error"),
    key("m-anchors", "100", "monolingual anchor count"),
    key("m-attention", "64", "monolingual global attention width"),
    key("b-anchors", "30", "bilingual anchor count"),
    key("anchor-dim", "16", "bilingual anchor width"),
    flag("b-raw-query", "false", "score bilingual anchors against the raw query"),
    key("fit-iterations", "500", "anchor-fitting iterations"),
    key("fit-batch", "32", "anchor-fitting batch size"),
    key("fit-lr", "0.05", "anchor-fitting peak learning rate"),
    key("fit-init", "data-sample", "anchor initialisation: data-sample | gaussian"),
    key("seed", "42", "random seed"),
    key("patience", "5", "early-stopping patience in epochs (0 disables)"),
    // Decoding
    key("beam", "10", "beam size"),
    key("max-decode-len", "0", "maximum output length (0: 2 x source length + 10)"),
    flag("normalize", "true", "rank hypotheses by per-token log-probability"),
    key("threads", "0", "decoding threads (0: all cores)"),
    // Evaluation
    flag("case-sensitive", "true", "case-sensitive BLEU"),
    key("bucket-width", "10", "source-length bucket width"),
    flag("published-scale", "false", "params: report counts at the published model sizes"),
    key("gradcheck-seeds", "5", "gradcheck: random seeds per check"),
    key("tolerance", "0.0001", "gradcheck: maximum relative error"),
    // Synthetic data
    key("kind", "cipher-reverse", "synthetic task: copy | reverse | cipher-reverse"),
    key("pairs", "2000", "synthetic training pairs"),
    key("dev-pairs", "0", "synthetic development pairs"),
    key("test-pairs", "0", "synthetic test pairs"),
    key("synth-vocab", "50", "synthetic vocabulary size"),
    key("min-length", "3", "shortest synthetic sentence"),
    key("max-length", "12", "longest synthetic sentence"),
    key("out-dir", ".", "directory for synthetic corpus files"),
];

pub const SUBCOMMANDS: &[(&str, &str)] = &[
    ("train", "pretrain the baseline model"),
    ("fit-anchors", "fit monolingual anchors to encoder sentence representations"),
    ("finetune-m", "add and fine-tune the monolingual reference network"),
    ("train-b", "add and train the bilingual reference network"),
    ("translate", "beam-search translation of a source file"),
    ("evaluate", "BLEU and length-bucket report of a hypothesis file"),
    ("gradcheck", "finite-difference check of every differentiable operation"),
    ("params", "per-group parameter counts"),
    ("synth", "write a synthetic parallel corpus"),
];

pub fn command() -> Command {
    let mut cmd = Command::new("refnet")
        .about("Attention NMT with monolingual and bilingual reference networks")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("key = value configuration file; command-line flags override it"),
        );
    for k in KEYS {
        let mut a = Arg::new(k.name)
            .long(k.name)
            .global(true)
            .default_value(k.default)
            .help(k.help)
            .action(ArgAction::Set);
        if k.flag {
            a = a.num_args(0..=1).default_missing_value("true").value_name("BOOL");
        } else {
            a = a.value_name("VALUE");
        }
        if k.default.is_empty() {
            a = a.hide_default_value(true);
        }
        cmd = cmd.arg(a);
    }
    for (name, about) in SUBCOMMANDS {
        cmd = cmd.subcommand(Command::new(*name).about(*about));
    }
    cmd
}

/// Parses a config file into raw key/value strings.
pub fn parse_file(text: &str, origin: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("{}:{}: expected key = value", origin.display(), n + 1)))?;
        let k = k.trim();
        if !KEYS.iter().any(|key| key.name == k) {
            return Err(CliError::Config(format!("{}:{}: unknown key `{k}`", origin.display(), n + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Raw values after layering defaults, the config file and command-line flags.
#[derive(Debug, Clone)]
pub struct Values {
    map: BTreeMap<String, String>,
    /// Keys set by the file or the command line.
    explicit: Vec<String>,
}

impl Values {
    pub fn from_matches(m: &ArgMatches) -> Result<Self, CliError> {
        let mut map: BTreeMap<String, String> = KEYS.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect();
        let mut explicit = Vec::new();
        if let Some(path) = m.get_one::<String>("config") {
            let p = Path::new(path);
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("config file {}: {e}", p.display())))?;
            for (k, v) in parse_file(&text, p)? {
                explicit.push(k.clone());
                map.insert(k, v);
            }
        }
        for k in KEYS {
            if m.value_source(k.name) == Some(ValueSource::CommandLine) {
                if let Some(v) = m.get_one::<String>(k.name) {
                    map.insert(k.name.to_string(), v.clone());
                    explicit.push(k.name.to_string());
                }
            }
        }
        Ok(Values { map, explicit })
    }

    #[cfg(test)]
    pub fn from_pairs(pairs: &[(&str, &str)]) -> Self {
        let mut map: BTreeMap<String, String> = KEYS.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect();
        let mut explicit = Vec::new();
        for (k, v) in pairs {
            map.insert(k.to_string(), v.to_string());
            explicit.push(k.to_string());
        }
        Values { map, explicit }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.map.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.iter().any(|k| k == key)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::Config(format!("--{key}: cannot parse `{raw}`: {e}")))
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.raw(key) {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            other => Err(CliError::Config(format!("--{key}: expected a boolean, got `{other}`"))),
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.path(key)
            .ok_or_else(|| CliError::Config(format!("--{key} is required")))
    }

    /// An input path that must exist.
    pub fn existing(&self, key: &str) -> Result<PathBuf, CliError> {
        let p = self.require_path(key)?;
        if !p.exists() {
            return Err(CliError::Config(format!("--{key}: {} does not exist", p.display())));
        }
        Ok(p)
    }
}

/// Fully typed experiment settings.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    /// Vocabulary sizes are filled in once vocabularies are known.
    pub dims: ModelDims,
    pub max_vocab: usize,
    pub min_count: usize,
    pub max_len: usize,
    pub beam: BeamConfig,
    pub threads: usize,
    pub case_sensitive: bool,
    pub bucket_width: usize,
    pub published_scale: bool,
    pub gradcheck_seeds: u64,
    pub tolerance: f64,
    pub synth_kind: SynthKind,
    pub pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub synth_vocab: usize,
    pub length_range: (usize, usize),
}

pub const DIM_KEYS: [&str; 5] = ["embed", "hidden", "attention", "readout", "cell"];

impl ExperimentConfig {
    pub fn from_values(v: &Values, stage: Stage) -> Result<Self, CliError> {
        let train = TrainConfig {
            stage,
            epochs: v.get("epochs")?,
            batch_size: v.get("batch-size")?,
            lr: v.get("lr")?,
            optimizer: v.get::<OptimizerKind>("optimizer")?,
            embed_dropout: v.get("embed-dropout")?,
            output_dropout: v.get("output-dropout")?,
            clip: v.get("clip")?,
            clip_mode: v.get::<ClipMode>("clip-mode")?,
            lambda: v.get("lambda")?,
            lambda_m: v.get("lambda-m")?,
            l_alpha: v.get("l-alpha")?,
            l_beta: v.get("l-beta")?,
            l_squared: v.flag("l-squared")?,
            m_anchors: v.get("m-anchors")?,
            m_attention: v.get("m-attention")?,
            b_anchors: v.get("b-anchors")?,
            anchor_dim: v.get("anchor-dim")?,
            b_raw_query: v.flag("b-raw-query")?,
            fit_iterations: v.get("fit-iterations")?,
            fit_batch: v.get("fit-batch")?,
            fit_lr: v.get("fit-lr")?,
            fit_init: v.get::<AnchorInit>("fit-init")?,
            seed: v.get("seed")?,
            patience: v.get("patience")?,
        };
        train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let dims = ModelDims {
            src_vocab: 0,
            tgt_vocab: 0,
            embed: v.get("embed")?,
            hidden: v.get("hidden")?,
            attention: v.get("attention")?,
            readout: v.get("readout")?,
            cell: v.get::<CellKind>("cell")?,
        };
        let max_decode: usize = v.get("max-decode-len")?;
        let beam = BeamConfig {
            beam: v.get("beam")?,
            max_steps: (max_decode > 0).then_some(max_decode),
            normalize: v.flag("normalize")?,
        };
        if beam.beam == 0 {
            return Err(CliError::Config("--beam must be at least 1".into()));
        }
        let bucket_width: usize = v.get("bucket-width")?;
        if bucket_width == 0 {
            return Err(CliError::Config("--bucket-width must be positive".into()));
        }
        let length_range = (v.get("min-length")?, v.get("max-length")?);
        if length_range.0 == 0 || length_range.0 > length_range.1 {
            return Err(CliError::Config(format!("invalid synthetic length range {length_range:?}")));
        }
        Ok(ExperimentConfig {
            train,
            dims,
            max_vocab: v.get("max-vocab")?,
            min_count: v.get("min-count")?,
            max_len: v.get("max-len")?,
            beam,
            threads: v.get("threads")?,
            case_sensitive: v.flag("case-sensitive")?,
            bucket_width,
            published_scale: v.flag("published-scale")?,
            gradcheck_seeds: v.get("gradcheck-seeds")?,
            tolerance: v.get("tolerance")?,
            synth_kind: v.get::<SynthKind>("kind")?,
            pairs: v.get("pairs")?,
            dev_pairs: v.get("dev-pairs")?,
            test_pairs: v.get("test-pairs")?,
            synth_vocab: v.get("synth-vocab")?,
            length_range,
        })
    }

    pub fn decode_threads(&self) -> usize {
        if self.threads > 0 {
            self.threads
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }
}
