use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use refnet::corpus::{self, encode_corpus, generate_synthetic_task, ParallelCorpus, Vocab};
use refnet::decode::translate_all;
use refnet::eval::{self, ParamReport};
use refnet::gradsuite;
use refnet::training::{self, Checkpoint, EpochLog, Stage, StageInput, TrainData};

use crate::config::{ExperimentConfig, Values, DIM_KEYS};
use crate::error::CliError;

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", base.display()))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn load_checkpoint(v: &Values) -> Result<(PathBuf, Checkpoint), CliError> {
    let path = v.require_path("checkpoint")?;
    if !path.exists() {
        return Err(CliError::MissingCheckpoint(path.display().to_string()));
    }
    let ckpt = Checkpoint::load(&path)?;
    info!("loaded {} ({})", path.display(), ckpt.provenance_chain());
    Ok((path, ckpt))
}

/// Vocabularies of an existing checkpoint: explicit paths, else the files
/// written next to it.
fn load_vocabs(v: &Values, ckpt_path: &Path, ckpt: &Checkpoint) -> Result<(Vocab, Vocab), CliError> {
    let src_path = v.path("src-vocab").unwrap_or_else(|| with_suffix(ckpt_path, ".src.vocab"));
    let tgt_path = v.path("tgt-vocab").unwrap_or_else(|| with_suffix(ckpt_path, ".tgt.vocab"));
    for p in [&src_path, &tgt_path] {
        if !p.exists() {
            return Err(CliError::Config(format!("vocabulary {} does not exist", p.display())));
        }
    }
    let (src, tgt) = (Vocab::load(&src_path)?, Vocab::load(&tgt_path)?);
    let dims = &ckpt.model.dims;
    if src.len() != dims.src_vocab || tgt.len() != dims.tgt_vocab {
        return Err(CliError::Config(format!(
            "vocabulary sizes {}/{} do not match the checkpoint ({}/{})",
            src.len(),
            tgt.len(),
            dims.src_vocab,
            dims.tgt_vocab
        )));
    }
    Ok((src, tgt))
}

fn save_vocabs(save: &Path, src: &Vocab, tgt: &Vocab) -> Result<(), CliError> {
    src.save(&with_suffix(save, ".src.vocab"))?;
    tgt.save(&with_suffix(save, ".tgt.vocab"))?;
    Ok(())
}

fn load_corpus(v: &Values, src_key: &str, tgt_key: &str) -> Result<Option<ParallelCorpus>, CliError> {
    match (v.path(src_key), v.path(tgt_key)) {
        (None, None) => Ok(None),
        (Some(_), Some(_)) => Ok(Some(ParallelCorpus::load(&v.existing(src_key)?, &v.existing(tgt_key)?)?)),
        _ => Err(CliError::Config(format!("--{src_key} and --{tgt_key} must be given together"))),
    }
}

fn training_data(v: &Values, cfg: &ExperimentConfig, src: &Vocab, tgt: &Vocab) -> Result<TrainData, CliError> {
    let train = load_corpus(v, "train-src", "train-tgt")?
        .ok_or_else(|| CliError::Config("--train-src and --train-tgt are required".into()))?
        .filter_by_length(cfg.max_len)?;
    if train.is_empty() {
        return Err(CliError::Config(format!("no training pair within --max-len {}", cfg.max_len)));
    }
    let dev = match load_corpus(v, "dev-src", "dev-tgt")? {
        Some(d) => encode_corpus(&d.filter_by_length(cfg.max_len)?, src, tgt),
        None => Vec::new(),
    };
    info!("{} training pairs, {} development pairs", train.len(), dev.len());
    Ok(TrainData {
        train: encode_corpus(&train, src, tgt),
        dev,
    })
}

/// Prints every epoch line to stdout and optionally appends it to a file.
struct EpochSink {
    file: Option<fs::File>,
}

impl EpochSink {
    fn open(v: &Values) -> Result<Self, CliError> {
        let file = match v.path("log-file") {
            Some(p) => Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .map_err(|e| CliError::io(&p, e))?,
            ),
            None => None,
        };
        println!("epoch\tstage\ttrain\tdev\twall");
        Ok(EpochSink { file })
    }

    fn log(&mut self, e: &EpochLog) {
        println!("{e}");
        if let Some(f) = &mut self.file {
            if let Err(err) = writeln!(f, "{e}") {
                log::warn!("cannot append to the log file: {err}");
            }
        }
    }
}

pub fn run_training(v: &Values, stage: Stage) -> Result<(), CliError> {
    let cfg = ExperimentConfig::from_values(v, stage)?;
    let save = v.require_path("save")?;
    info!("stage {stage}, seed {}", cfg.train.seed);

    let (input, src_vocab, tgt_vocab) = if stage == Stage::Pretrain {
        let corpus = load_corpus(v, "train-src", "train-tgt")?
            .ok_or_else(|| CliError::Config("--train-src and --train-tgt are required".into()))?;
        let src = Vocab::build(&corpus.sources(), cfg.max_vocab, cfg.min_count)?;
        let tgt = Vocab::build(&corpus.targets(), cfg.max_vocab, cfg.min_count)?;
        let mut dims = cfg.dims;
        dims.src_vocab = src.len();
        dims.tgt_vocab = tgt.len();
        info!("vocabularies: {} source, {} target tokens", src.len(), tgt.len());
        (StageInput::Fresh(dims), src, tgt)
    } else {
        let (path, ckpt) = load_checkpoint(v)?;
        if DIM_KEYS.iter().any(|k| v.is_explicit(k)) {
            let mut dims = cfg.dims;
            dims.src_vocab = ckpt.model.dims.src_vocab;
            dims.tgt_vocab = ckpt.model.dims.tgt_vocab;
            ckpt.expect_dims(&dims)?;
        }
        let (src, tgt) = load_vocabs(v, &path, &ckpt)?;
        (StageInput::Checkpoint(Box::new(ckpt)), src, tgt)
    };

    let data = training_data(v, &cfg, &src_vocab, &tgt_vocab)?;
    let mut sink = EpochSink::open(v)?;
    let report = training::run_stage(input, &data, &cfg.train, &mut |e| sink.log(e))?;
    if let Some(fit) = &report.fit {
        info!("localization measure {:.6} -> {:.6}", fit.initial_measure, fit.final_measure);
    }
    report.checkpoint.save(&save)?;
    save_vocabs(&save, &src_vocab, &tgt_vocab)?;
    info!("saved {} ({})", save.display(), report.checkpoint.provenance_chain());
    Ok(())
}

pub fn translate(v: &Values) -> Result<(), CliError> {
    let cfg = ExperimentConfig::from_values(v, Stage::Pretrain)?;
    let (path, ckpt) = load_checkpoint(v)?;
    let (src_vocab, tgt_vocab) = load_vocabs(v, &path, &ckpt)?;
    let input = v.existing("input")?;
    let lines = corpus::read_lines(&input)?;
    let encoded: Vec<Vec<usize>> = lines.iter().map(|l| src_vocab.encode(&corpus::tokenize(l))).collect();
    // Empty lines translate to empty lines.
    let (idx, nonempty): (Vec<usize>, Vec<Vec<usize>>) =
        encoded.into_iter().enumerate().filter(|(_, s)| !s.is_empty()).unzip();
    let threads = cfg.decode_threads();
    info!(
        "translating {} sentences, beam {}, {} threads",
        lines.len(),
        cfg.beam.beam,
        threads
    );
    let outputs = translate_all(&ckpt.model, &nonempty, &cfg.beam, threads)?;
    let mut text = vec![String::new(); lines.len()];
    for (i, out) in idx.into_iter().zip(outputs) {
        text[i] = tgt_vocab.decode_line(&out);
    }
    match v.path("output") {
        Some(p) => corpus::write_lines(&p, &text)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            for t in &text {
                writeln!(lock, "{t}").map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
            }
        }
    }
    Ok(())
}

pub fn evaluate(v: &Values) -> Result<(), CliError> {
    let cfg = ExperimentConfig::from_values(v, Stage::Pretrain)?;
    let hyp_lines = corpus::read_lines(&v.existing("hypotheses")?)?;
    let ref_arg = v.raw("references");
    if ref_arg.is_empty() {
        return Err(CliError::Config("--references is required".into()));
    }
    let mut ref_sets = Vec::new();
    for p in ref_arg.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let p = Path::new(p);
        if !p.exists() {
            return Err(CliError::Config(format!("--references: {} does not exist", p.display())));
        }
        let lines = corpus::read_lines(p)?;
        if lines.len() != hyp_lines.len() {
            return Err(CliError::Config(format!(
                "{} has {} lines, hypotheses have {}",
                p.display(),
                lines.len(),
                hyp_lines.len()
            )));
        }
        ref_sets.push(lines);
    }
    let hyps: Vec<Vec<String>> = hyp_lines.iter().map(|l| corpus::tokenize(l)).collect();
    let refs: Vec<Vec<Vec<String>>> = (0..hyps.len())
        .map(|i| ref_sets.iter().map(|set| corpus::tokenize(&set[i])).collect())
        .collect();
    let report = eval::bleu(&hyps, &refs, cfg.case_sensitive)?;
    println!("{report}");
    let mut tsv = format!("bleu\t{:.4}\n", report.score);

    if let Some(src_path) = v.path("test-src") {
        let src_lines = corpus::read_lines(&v.existing("test-src")?)?;
        if src_lines.len() != hyps.len() {
            return Err(CliError::Config(format!(
                "{} has {} lines, hypotheses have {}",
                src_path.display(),
                src_lines.len(),
                hyps.len()
            )));
        }
        let sources: Vec<Vec<String>> = src_lines.iter().map(|l| corpus::tokenize(l)).collect();
        let first: Vec<Vec<String>> = refs.iter().map(|r| r[0].clone()).collect();
        let buckets = eval::length_buckets(&sources, &hyps, &first, cfg.bucket_width)?;
        let b = buckets.to_tsv();
        print!("{b}");
        tsv.push_str(&b);
    }
    if let Some(p) = v.path("report") {
        write_file(&p, &tsv)?;
    }
    Ok(())
}

pub fn gradcheck(v: &Values) -> Result<(), CliError> {
    let cfg = ExperimentConfig::from_values(v, Stage::Pretrain)?;
    let outcomes = gradsuite::run_suite(cfg.gradcheck_seeds, cfg.tolerance)?;
    let mut tsv = String::from("check\tseed\tmax_rel_err\tworst_param\tchecked\tstatus\n");
    for o in &outcomes {
        tsv.push_str(&format!(
            "{}\t{}\t{:.3e}\t{}\t{}\t{}\n",
            o.name,
            o.seed,
            o.max_rel_err,
            o.worst_param,
            o.checked,
            if o.passed { "ok" } else { "FAIL" }
        ));
    }
    print!("{tsv}");
    if let Some(p) = v.path("report") {
        write_file(&p, &tsv)?;
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(CliError::GradCheck {
            failed,
            total: outcomes.len(),
        });
    }
    Ok(())
}

pub fn params(v: &Values) -> Result<(), CliError> {
    let cfg = ExperimentConfig::from_values(v, Stage::Pretrain)?;
    let text = if cfg.published_scale {
        eval::published_scale_summary()
    } else if v.path("checkpoint").is_some() {
        let (_, ckpt) = load_checkpoint(v)?;
        ParamReport::from_store(&ckpt.model.params).to_tsv()
    } else {
        // Sizes from the configuration, with both vocabularies at --max-vocab.
        let mut dims = cfg.dims;
        dims.src_vocab = cfg.max_vocab;
        dims.tgt_vocab = cfg.max_vocab;
        dims.validate()?;
        let m = cfg.train.mref_dims();
        let b = cfg.train.bref_dims();
        let mut s = String::new();
        for (label, shapes) in [
            ("baseline", eval::param_shapes(&dims, None, None)),
            ("+monolingual", eval::param_shapes(&dims, Some(&m), None)),
            ("+bilingual", eval::param_shapes(&dims, None, Some(&b))),
        ] {
            s.push_str(&format!("# {label}\n{}", ParamReport::from_shapes(&shapes).to_tsv()));
        }
        s
    };
    print!("{text}");
    if let Some(p) = v.path("report") {
        write_file(&p, &text)?;
    }
    Ok(())
}

pub fn synth(v: &Values) -> Result<(), CliError> {
    let cfg = ExperimentConfig::from_values(v, Stage::Pretrain)?;
    let out_dir = v.require_path("out-dir")?;
    fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;
    let total = cfg.pairs + cfg.dev_pairs + cfg.test_pairs;
    if cfg.pairs == 0 {
        return Err(CliError::Config("--pairs must be positive".into()));
    }
    info!("{} {} pairs, seed {}", total, v.raw("kind"), cfg.train.seed);
    let all = generate_synthetic_task(cfg.synth_kind, cfg.synth_vocab, total, cfg.length_range, cfg.train.seed)?;
    let mut rest = all.pairs;
    let test = rest.split_off(cfg.pairs + cfg.dev_pairs);
    let dev = rest.split_off(cfg.pairs);
    for (name, pairs) in [("train", rest), ("dev", dev), ("test", test)] {
        if pairs.is_empty() {
            continue;
        }
        let c = ParallelCorpus::new(pairs);
        c.save(&out_dir.join(format!("{name}.src")), &out_dir.join(format!("{name}.tgt")))?;
    }
    Ok(())
}
