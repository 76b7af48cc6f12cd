//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines are always printed; exits non-zero on any failure.

use std::time::{Duration, Instant};

use rand::Rng;
use refnet::autodiff::{Graph, Group};
use refnet::bref::{self, BRefDims, BRefVars};
use refnet::corpus::{generate_synthetic_task, Batch, ParallelCorpus, SynthKind, Vocab, BOS, EOS, PAD};
use refnet::decode::{beam_search, greedy_translate, translate, translate_all, BeamConfig, NmtScorer, StepScorer};
use refnet::eval::{self, bleu, bleu_lines};
use refnet::gradsuite;
use refnet::lcc::{self, AnchorInit, AnchorSet, FitConfig, LccConfig, ScoreParams};
use refnet::model::{self, random_rng, CellKind, Model, ModelDims};
use refnet::tensor::Tensor;
use refnet::training::{self, Checkpoint, EpochLog, Stage, TrainConfig, TrainData};

type Check = std::result::Result<String, String>;

struct Report {
    failures: usize,
}

impl Report {
    fn record(&mut self, name: &str, started: Instant, limit: Option<Duration>, outcome: Check) {
        let elapsed = started.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(d), Some(l)) if elapsed > l => Err(format!("{d}; took {elapsed:.1?}, limit {l:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("[PASS] {name}: {detail} ({elapsed:.1?})"),
            Err(detail) => {
                self.failures += 1;
                println!("[FAIL] {name}: {detail} ({elapsed:.1?})");
            }
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gradient_suite() -> Check {
    let outcomes = gradsuite::run_suite(5, 1e-4).map_err(err)?;
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).collect();
    let worst = outcomes.iter().map(|o| o.max_rel_err).fold(0.0, f64::max);
    ensure(failed.is_empty(), || format!("{} failing: {:?}", failed.len(), failed))?;
    Ok(format!(
        "{} operations x 5 seeds, worst relative error {worst:.2e} <= 1e-4",
        gradsuite::CHECKS.len()
    ))
}

fn lcc_invariants() -> Check {
    let mut rng = random_rng(7);
    let (dim, count) = (6, 5);
    let anchors = AnchorSet::new(Tensor::randn(&[count, dim], 1.0, &mut rng)).map_err(err)?;
    let params = ScoreParams::random(dim, 8, 0.7, &mut rng);
    let mut worst_sum = 0.0f64;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let gamma = lcc::lcc_weights(&x, &anchors, &params).map_err(err)?;
        ensure(gamma.iter().all(|&g| g >= 0.0), || format!("negative weight {gamma:?}"))?;
        worst_sum = worst_sum.max((gamma.iter().sum::<f64>() - 1.0).abs());
    }
    ensure(worst_sum <= 1e-9, || format!("simplex violated by {worst_sum:e}"))?;

    // One anchor: weight 1, reconstruction is the anchor, zero measure at x = v.
    let v: Vec<f64> = (0..dim).map(|i| i as f64 * 0.3 - 0.7).collect();
    let single = AnchorSet::from_vectors(std::slice::from_ref(&v)).map_err(err)?;
    let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gamma = lcc::lcc_weights(&x, &single, &params).map_err(err)?;
    ensure(gamma == [1.0], || format!("single-anchor weight {gamma:?}"))?;
    ensure(lcc::reconstruct(&gamma, &single).map_err(err)? == v, || "reconstruction differs from anchor".into())?;
    let m = lcc::localization_measure(&v, &single, &params, &LccConfig::default()).map_err(err)?;
    ensure(m.abs() < 1e-12, || format!("measure at the anchor is {m}"))?;

    // Permuting anchors permutes the weights and keeps the reconstruction.
    let perm = [3, 0, 4, 1, 2];
    let rows: Vec<Vec<f64>> = perm.iter().map(|&j| anchors.anchor(j).to_vec()).collect();
    let permuted = AnchorSet::from_vectors(&rows).map_err(err)?;
    for _ in 0..50 {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g0 = lcc::lcc_weights(&x, &anchors, &params).map_err(err)?;
        let g1 = lcc::lcc_weights(&x, &permuted, &params).map_err(err)?;
        for (k, &j) in perm.iter().enumerate() {
            ensure((g1[k] - g0[j]).abs() < 1e-12, || "weights not permutation equivariant".into())?;
        }
        let r0 = lcc::reconstruct(&g0, &anchors).map_err(err)?;
        let r1 = lcc::reconstruct(&g1, &permuted).map_err(err)?;
        ensure(r0.iter().zip(&r1).all(|(a, b)| (a - b).abs() < 1e-12), || "reconstruction changed".into())?;
    }

    // f_s with one bilingual anchor is the plain affine regression W g(q) + b.
    let dims = ModelDims {
        src_vocab: 6,
        tgt_vocab: 6,
        embed: 3,
        hidden: 4,
        attention: 3,
        readout: 3,
        cell: CellKind::Gru,
    };
    let mut model = Model::new(dims, &mut rng).map_err(err)?;
    let bd = BRefDims {
        anchors: 1,
        anchor_dim: 5,
        ..BRefDims::default()
    };
    bref::attach(&mut model, bd, &mut rng).map_err(err)?;
    model.params.set("bref.reg.b", Tensor::randn(&[1, 3], 1.0, &mut rng)).map_err(err)?;
    model.params.set("bref.g.b", Tensor::randn(&[5], 1.0, &mut rng)).map_err(err)?;
    let q: Vec<f64> = (0..bd.query_dim(&dims)).map(|_| rng.random_range(-1.0..1.0)).collect();
    let got = {
        let mut g = Graph::new(&model.params);
        let b = BRefVars::bind(&mut g, &bd).map_err(err)?;
        let qv = g.constant(Tensor::vector(q.clone()));
        let f = bref::f_s(&mut g, &b, qv).map_err(err)?;
        g.value(f).data().to_vec()
    };
    let p = |n: &str| model.params.get(n).cloned().map_err(err);
    let (gw, gb, w, b) = (p("bref.g.w")?, p("bref.g.b")?, p("bref.reg.w")?, p("bref.reg.b")?);
    let gq: Vec<f64> = (0..5)
        .map(|i| (gw.row(i).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() + gb.data()[i]).tanh())
        .collect();
    let want: Vec<f64> = (0..3)
        .map(|i| w.row(i).iter().zip(&gq).map(|(a, b)| a * b).sum::<f64>() + b.data()[i])
        .collect();
    let gap = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(gap < 1e-12, || format!("single-anchor f_s differs from affine regression by {gap:e}"))?;
    Ok(format!(
        "simplex error {worst_sum:.1e} over 1000 inputs; single-anchor, zero-measure, permutation and affine-regression cases hold"
    ))
}

fn two_clusters() -> Tensor {
    let mut rng = random_rng(2024);
    let normal = rand_distr::Normal::new(0.0, 0.3).unwrap();
    let rows: Vec<Vec<f64>> = (0..200)
        .map(|i| {
            let c = if i % 2 == 0 { 4.0 } else { 8.0 };
            vec![c + rng.sample(normal), c + rng.sample(normal)]
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn anchor_fitting() -> Check {
    let data = two_clusters();
    let cfg = LccConfig::default();
    let run = |count: usize, init: AnchorInit| {
        let fit = FitConfig {
            init,
            ..FitConfig::default()
        };
        lcc::fit_anchors(&data, count, &cfg, &fit).map_err(err)
    };
    let (one, two) = (run(1, AnchorInit::Gaussian)?, run(2, AnchorInit::Gaussian)?);
    let (s1, s2) = (run(1, AnchorInit::DataSample)?, run(2, AnchorInit::DataSample)?);
    println!(
        "  data-sample init (informational): |C|=1 {:.3} -> {:.3}, |C|=2 {:.3} -> {:.3}",
        s1.initial_measure, s1.final_measure, s2.initial_measure, s2.final_measure
    );
    let detail = format!(
        "gaussian init: |C|=1 {:.3} -> {:.3}, |C|=2 {:.3} -> {:.3}, ratio {:.3}",
        one.initial_measure,
        one.final_measure,
        two.initial_measure,
        two.final_measure,
        two.final_measure / one.final_measure
    );
    ensure(two.final_measure < 0.5 * one.final_measure, || format!("{detail}; two-anchor fit not below half"))?;
    for (c, r) in [(1, &one), (2, &two)] {
        ensure(r.final_measure <= 0.5 * r.initial_measure, || format!("{detail}; |C|={c} reduced less than half"))?;
    }
    Ok(detail)
}

fn bleu_oracle() -> Check {
    let same = bleu_lines(&["a b c d e f"], &["a b c d e f"], true).map_err(err)?;
    ensure((same.score - 100.0).abs() < 1e-12, || format!("identical gave {}", same.score))?;
    let empty = bleu_lines(&[""], &["a b c"], true).map_err(err)?;
    ensure(empty.score == 0.0, || format!("empty gave {}", empty.score))?;
    let short = bleu_lines(&["the cat sat"], &["the cat sat down"], true).map_err(err)?;
    let expect = 100.0 * (1.0f64 - 4.0 / 3.0).exp();
    ensure((short.score - expect).abs() < 1e-9, || format!("short case gave {}", short.score))?;
    // Hand computation: 1g 4/5, 2g 3/4, 3g 2/3, 4g 1/2; hyp 5 vs closest ref 6.
    let tok = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let r = bleu(
        &[tok("a b c d x")],
        &[vec![tok("a b c d y z"), tok("q r s")]],
        true,
    )
    .map_err(err)?;
    let hand = 100.0 * (1.0f64 - 6.0 / 5.0).exp() * (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
    ensure((r.score - hand).abs() < 1e-9, || format!("hand example {} vs {hand}", r.score))?;
    // Any zero precision with available n-grams floors the score.
    let zero = bleu_lines(&["a b c d"], &["a b d c"], true).map_err(err)?;
    ensure(zero.score == 0.0, || format!("zero 4-gram precision gave {}", zero.score))?;
    Ok(format!(
        "identical 100, empty 0, short case {:.2}, hand example {:.4}, zero-precision floor 0",
        short.score, r.score
    ))
}

fn param_report() -> Check {
    let (base, m, b) = eval::published_scale_report();
    print!("{}", indent(&eval::published_scale_summary()));
    Ok(format!(
        "baseline {} / +{} / +{} parameters printed next to 71.1M / +6.6M / +14M",
        base.total,
        m.total - base.total,
        b.total - base.total
    ))
}

fn indent(s: &str) -> String {
    s.lines().map(|l| format!("  {l}\n")).collect()
}

/// Cipher-reverse task shared by the translation criteria.
struct Toy {
    data: TrainData,
    test: Vec<(Vec<usize>, Vec<usize>)>,
    tgt_vocab: Vocab,
    dims: ModelDims,
}

fn toy() -> Toy {
    let corpus = generate_synthetic_task(SynthKind::CipherReverse, 50, 2400, (3, 12), 11).unwrap();
    let (train, rest) = corpus.pairs.split_at(2000);
    let (dev, test) = rest.split_at(200);
    let tr = ParallelCorpus::new(train.to_vec());
    let sv = Vocab::build(&tr.sources(), 1000, 1).unwrap();
    let tv = Vocab::build(&tr.targets(), 1000, 1).unwrap();
    let enc = |p: &[(Vec<String>, Vec<String>)]| p.iter().map(|(s, t)| (sv.encode(s), tv.encode(t))).collect::<Vec<_>>();
    let mut dims = ModelDims::new(sv.len(), tv.len());
    dims.embed = 32;
    dims.hidden = 64;
    Toy {
        data: TrainData {
            train: enc(train),
            dev: enc(dev),
        },
        test: enc(test),
        tgt_vocab: tv,
        dims,
    }
}

fn test_bleu(toy: &Toy, model: &Model) -> Result<f64, String> {
    let sources: Vec<_> = toy.test.iter().map(|p| p.0.clone()).collect();
    let hyps = translate_all(model, &sources, &BeamConfig::default(), 4).map_err(err)?;
    let h: Vec<_> = hyps.iter().map(|h| toy.tgt_vocab.decode(h)).collect();
    let r: Vec<_> = toy.test.iter().map(|p| vec![toy.tgt_vocab.decode(&p.1)]).collect();
    Ok(bleu(&h, &r, true).map_err(err)?.score)
}

fn stage_cfg(stage: Stage, epochs: usize) -> TrainConfig {
    TrainConfig {
        stage,
        epochs,
        lr: 5e-3,
        fit_iterations: 300,
        ..TrainConfig::default()
    }
}

fn print_log(e: &EpochLog) {
    println!("  {e}");
}

struct Pipeline {
    base: Checkpoint,
    base_epochs: usize,
    base_time: Duration,
    base_bleu: f64,
    fitted: Checkpoint,
    fit_time: Duration,
    m: Checkpoint,
    m_time: Duration,
    m_bleu: f64,
    b: Checkpoint,
    b_time: Duration,
    b_bleu: f64,
    b_log: Vec<EpochLog>,
}

fn pipeline(toy: &Toy) -> Result<Pipeline, String> {
    let t = Instant::now();
    let base = training::pretrain(toy.dims, &toy.data, &stage_cfg(Stage::Pretrain, 50), &mut print_log).map_err(err)?;
    let base_time = t.elapsed();
    let base_bleu = test_bleu(toy, &base.checkpoint.model)?;
    let t = Instant::now();
    let fitted = training::fit_anchor_stage(base.checkpoint.clone(), &toy.data, &stage_cfg(Stage::FitAnchors, 0), &mut print_log)
        .map_err(err)?;
    let fit_time = t.elapsed();
    let t = Instant::now();
    let m = training::finetune_m(fitted.checkpoint.clone(), &toy.data, &stage_cfg(Stage::FinetuneM, 10), &mut print_log).map_err(err)?;
    let m_time = t.elapsed();
    let m_bleu = test_bleu(toy, &m.checkpoint.model)?;
    let t = Instant::now();
    let b = training::train_b(base.checkpoint.clone(), &toy.data, &stage_cfg(Stage::TrainB, 10), &mut print_log).map_err(err)?;
    let b_time = t.elapsed();
    let b_bleu = test_bleu(toy, &b.checkpoint.model)?;
    Ok(Pipeline {
        base_epochs: base.epochs.len(),
        base: base.checkpoint,
        base_time,
        base_bleu,
        fitted: fitted.checkpoint,
        fit_time,
        m: m.checkpoint,
        m_time,
        m_bleu,
        b: b.checkpoint,
        b_time,
        b_bleu,
        b_log: b.epochs,
    })
}

fn toy_translation(p: &Pipeline) -> Check {
    let limit = Duration::from_secs(600);
    let detail = format!(
        "baseline BLEU {:.2} after {} epochs ({:.0?}); fit-anchors {:.0?}; finetune-m BLEU {:.2} ({:.0?}); train-b BLEU {:.2} ({:.0?})",
        p.base_bleu, p.base_epochs, p.base_time, p.fit_time, p.m_bleu, p.m_time, p.b_bleu, p.b_time
    );
    ensure(p.base_bleu >= 90.0 && p.base_epochs <= 50, || format!("{detail}; baseline below 90"))?;
    ensure(p.m_bleu >= p.base_bleu - 1.0, || format!("{detail}; finetune-m degraded"))?;
    ensure(p.b_bleu >= p.base_bleu - 1.0, || format!("{detail}; train-b degraded"))?;
    for (name, t) in [
        ("pretrain", p.base_time),
        ("fit-anchors", p.fit_time),
        ("finetune-m", p.m_time),
        ("train-b", p.b_time),
    ] {
        ensure(t < limit, || format!("{detail}; {name} exceeded 10 min"))?;
    }
    Ok(detail)
}

fn zero_init(toy: &Toy, p: &Pipeline) -> Check {
    let base = training::evaluate(&p.base.model, &toy.data.dev, 32).map_err(err)?.nll;
    let m0 = training::finetune_m(p.fitted.clone(), &toy.data, &stage_cfg(Stage::FinetuneM, 0), &mut |_| {}).map_err(err)?;
    let b0 = training::train_b(p.base.clone(), &toy.data, &stage_cfg(Stage::TrainB, 0), &mut |_| {}).map_err(err)?;
    ensure(m0.checkpoint.model.mref.is_some() && b0.checkpoint.model.bref.is_some(), || "networks not attached".into())?;
    let dm = (training::evaluate(&m0.checkpoint.model, &toy.data.dev, 32).map_err(err)?.nll - base).abs();
    let db = (training::evaluate(&b0.checkpoint.model, &toy.data.dev, 32).map_err(err)?.nll - base).abs();
    ensure(dm <= 1e-10 && db <= 1e-10, || format!("dev loss gaps M {dm:e}, B {db:e}"))?;
    Ok(format!("baseline dev loss {base:.6}; gaps M {dm:.1e}, B {db:.1e} <= 1e-10"))
}

fn freeze_contracts(p: &Pipeline) -> Check {
    let h = |c: &Checkpoint, g: Group| c.model.params.group_hash(g);
    ensure(h(&p.base, Group::Encoder) == h(&p.m, Group::Encoder), || "finetune-m changed the encoder".into())?;
    ensure(h(&p.fitted, Group::Anchors) == h(&p.m, Group::Anchors), || "finetune-m changed the anchors".into())?;
    ensure(h(&p.base, Group::Encoder) == h(&p.b, Group::Encoder), || "train-b changed the encoder".into())?;
    ensure(h(&p.base, Group::Decoder) == h(&p.b, Group::Decoder), || "train-b changed the decoder".into())?;
    Ok(format!(
        "encoder {}.., anchors {}.. unchanged by finetune-m; encoder and decoder {}.. unchanged by train-b; chain {}",
        &h(&p.m, Group::Encoder)[..12],
        &h(&p.m, Group::Anchors)[..12],
        &h(&p.b, Group::Decoder)[..12],
        p.b.provenance_chain()
    ))
}

fn objective_descent(p: &Pipeline) -> Check {
    let (first, last) = match (p.b_log.first(), p.b_log.last()) {
        (Some(f), Some(l)) if p.b_log.len() > 1 => (f, l),
        _ => return Err("train-b ran fewer than two epochs".into()),
    };
    let (h0, h1) = (first.train_hinge.unwrap_or(f64::NAN), last.train_hinge.unwrap_or(f64::NAN));
    let detail = format!(
        "lambda {}; NLL {:.4} -> {:.4}, L_M {:.4} -> {:.4} over {} epochs",
        p.b.config.lambda,
        first.train_nll,
        last.train_nll,
        h0,
        h1,
        p.b_log.len()
    );
    ensure(p.b.config.lambda == 1.0, || format!("{detail}; lambda is not 1"))?;
    ensure(last.train_nll < first.train_nll && h1 < h0, || format!("{detail}; not both decreasing"))?;
    Ok(detail)
}

fn decoding_oracles(toy: &Toy, p: &Pipeline) -> Check {
    let cfg = BeamConfig {
        beam: 1,
        ..BeamConfig::default()
    };
    for (src, _) in toy.test.iter().take(50) {
        let beam = translate(&p.base.model, src, &cfg).map_err(err)?;
        let greedy = greedy_translate(&p.base.model, src, cfg.steps_for(src.len())).map_err(err)?;
        ensure(beam == greedy, || format!("beam 1 {beam:?} vs greedy {greedy:?}"))?;
    }

    // Two-step micro-model over five target ids, scored sequence by sequence.
    let allowed = |w: usize| w != PAD && w != BOS;
    for seed in 0..10 {
        let dims = ModelDims {
            src_vocab: 6,
            tgt_vocab: 5,
            embed: 3,
            hidden: 4,
            attention: 3,
            readout: 4,
            cell: CellKind::Gru,
        };
        let mut rng = random_rng(500 + seed);
        let mut m = Model::new(dims, &mut rng).map_err(err)?;
        for id in m.params.ids().collect::<Vec<_>>() {
            let t = m.params.tensor_mut(id);
            *t = Tensor::randn(t.shape(), 1.0, &mut rng);
        }
        let src = [4, 5, 4];
        let score = |seq: &[usize]| -> Result<f64, String> {
            let mut s = NmtScorer::new(&m, &src).map_err(err)?;
            let mut state = s.initial().map_err(err)?;
            let (mut lp, mut prev) = (0.0, BOS);
            for &w in seq {
                let (dist, next) = s.step(&state, prev).map_err(err)?;
                lp += dist[w];
                state = next;
                prev = w;
            }
            Ok(lp)
        };
        let mut seqs: Vec<Vec<usize>> = vec![vec![EOS]];
        for a in (0..5).filter(|&w| allowed(w) && w != EOS) {
            for b in (0..5).filter(|&w| allowed(w)) {
                seqs.push(vec![a, b]);
            }
        }
        for normalize in [false, true] {
            let mut best: Option<(Vec<usize>, f64)> = None;
            for s in &seqs {
                let lp = score(s)?;
                let key = if normalize { lp / s.len() as f64 } else { lp };
                if best.as_ref().is_none_or(|b| key > b.1) {
                    best = Some((s.clone(), key));
                }
            }
            let best = best.expect("non-empty");
            let mut scorer = NmtScorer::new(&m, &src).map_err(err)?;
            let hyps = beam_search(&mut scorer, 25, 2, normalize).map_err(err)?;
            ensure(hyps[0].tokens == best.0, || format!("seed {seed}: beam {:?} vs exhaustive {:?}", hyps[0].tokens, best.0))?;
        }
        // Finished sequences agree with the training loss.
        let lp = score(&[3, EOS])?;
        let nll = model::nll_loss(&m, &Batch::from_pairs(&[(src.to_vec(), vec![3])])).map_err(err)?;
        ensure((lp + 2.0 * nll).abs() < 1e-10, || format!("sequence score {lp} vs loss {nll}"))?;
    }
    Ok("beam 1 equals greedy on 50 toy sentences; beam 25 equals exhaustive search on 10 two-step |V|=5 models".into())
}

fn main() {
    let mut report = Report { failures: 0 };
    let minute = Duration::from_secs(60);

    let t = Instant::now();
    report.record("gradient suite", t, Some(2 * minute), gradient_suite());
    let t = Instant::now();
    report.record("LCC invariants", t, Some(minute), lcc_invariants());
    let t = Instant::now();
    report.record("anchor fitting", t, Some(2 * minute), anchor_fitting());
    let t = Instant::now();
    report.record("BLEU oracle", t, None, bleu_oracle());
    let t = Instant::now();
    report.record("parameter report", t, None, param_report());

    let toy = toy();
    let t = Instant::now();
    match pipeline(&toy) {
        Ok(p) => {
            report.record("toy translation", t, None, toy_translation(&p));
            let t = Instant::now();
            report.record("zero-initialisation equivalence", t, None, zero_init(&toy, &p));
            let t = Instant::now();
            report.record("freeze contracts", t, None, freeze_contracts(&p));
            let t = Instant::now();
            report.record("objective descent", t, None, objective_descent(&p));
            let t = Instant::now();
            report.record("decoding oracles", t, None, decoding_oracles(&toy, &p));
        }
        Err(e) => {
            for name in [
                "toy translation",
                "zero-initialisation equivalence",
                "freeze contracts",
                "objective descent",
                "decoding oracles",
            ] {
                report.record(name, t, None, Err(format!("pipeline failed: {e}")));
            }
        }
    }
    println!("{} criteria failed", report.failures);
    if report.failures > 0 {
        std::process::exit(1);
    }
}
