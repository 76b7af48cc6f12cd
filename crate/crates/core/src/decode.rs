//! Greedy and beam-search decoding over any step-wise scorer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_slice, Graph, Var};
use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{self, Encoded, Model, ModelVars};

/// Next-token log-probabilities given a decoder state.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn initial(&mut self) -> Result<Self::State>;

    /// Log-probabilities over the vocabulary after emitting `prev`, plus the
    /// updated state. Entries of `-inf` are never chosen.
    fn step(&mut self, state: &Self::State, prev: usize) -> Result<(Vec<f64>, Self::State)>;
}

/// A decoded sequence. `tokens` excludes BOS and includes EOS when finished.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Ranking score: total log-probability, divided by the token count when
    /// `normalize` is set.
    pub fn score(&self, normalize: bool) -> f64 {
        if normalize && !self.tokens.is_empty() {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }

    /// Tokens without the trailing EOS.
    pub fn output(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam: usize,
    /// Maximum generated tokens; `None` means `2 · source length + 10`.
    pub max_steps: Option<usize>,
    /// Rank final hypotheses by log-probability per token.
    pub normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 10,
            max_steps: None,
            normalize: true,
        }
    }
}

impl BeamConfig {
    pub fn steps_for(&self, src_len: usize) -> usize {
        self.max_steps.unwrap_or(2 * src_len + 10)
    }
}

fn allowed(token: usize) -> bool {
    token != PAD && token != BOS
}

/// Argmax rollout; ties go to the lower token id.
pub fn greedy<S: StepScorer>(scorer: &mut S, max_steps: usize) -> Result<Hypothesis> {
    let mut state = scorer.initial()?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    let mut prev = BOS;
    for _ in 0..max_steps {
        let (lp, next) = scorer.step(&state, prev)?;
        let mut best: Option<(usize, f64)> = None;
        for (w, &p) in lp.iter().enumerate() {
            if allowed(w) && p > f64::NEG_INFINITY && best.is_none_or(|(_, b)| p > b) {
                best = Some((w, p));
            }
        }
        let (w, p) = best.ok_or(Error::Empty("allowed vocabulary"))?;
        hyp.tokens.push(w);
        hyp.log_prob += p;
        if w == EOS {
            hyp.finished = true;
            break;
        }
        prev = w;
        state = next;
    }
    Ok(hyp)
}

struct Live<S> {
    hyp: Hypothesis,
    state: S,
}

/// Beam search keeping the `k` best partial hypotheses by total
/// log-probability. Hypotheses that emit EOS leave the beam; whatever is
/// still live after `max_steps` is finalised as is. Returns every final
/// hypothesis, best first under the configured ranking.
pub fn beam_search<S: StepScorer>(scorer: &mut S, beam: usize, max_steps: usize, normalize: bool) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::InvalidArgument("beam size must be at least 1".into()));
    }
    let mut live = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        },
        state: scorer.initial()?,
    }];
    let mut finished = Vec::new();
    for _ in 0..max_steps {
        let mut expanded = Vec::with_capacity(live.len());
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (i, l) in live.iter().enumerate() {
            let prev = l.hyp.tokens.last().copied().unwrap_or(BOS);
            let (lp, next) = scorer.step(&l.state, prev)?;
            for (w, &p) in lp.iter().enumerate() {
                if allowed(w) && p > f64::NEG_INFINITY {
                    cands.push((l.hyp.log_prob + p, i, w));
                }
            }
            expanded.push(next);
        }
        if cands.is_empty() {
            return Err(Error::Empty("allowed vocabulary"));
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(beam);
        let mut next_live = Vec::with_capacity(beam);
        for (lp, i, w) in cands {
            let mut tokens = live[i].hyp.tokens.clone();
            tokens.push(w);
            let hyp = Hypothesis {
                tokens,
                log_prob: lp,
                finished: w == EOS,
            };
            if hyp.finished {
                finished.push(hyp);
            } else {
                next_live.push(Live {
                    hyp,
                    state: expanded[i].clone(),
                });
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }
    finished.extend(live.into_iter().map(|l| l.hyp));
    // Stable sort keeps discovery order among equal scores.
    finished.sort_by(|a, b| b.score(normalize).total_cmp(&a.score(normalize)));
    Ok(finished)
}

/// Scorer backed by a translation model for one source sentence.
pub struct NmtScorer<'m> {
    graph: Graph<'m>,
    vars: ModelVars,
    enc: Encoded,
    vocab: usize,
}

impl<'m> NmtScorer<'m> {
    pub fn new(model: &'m Model, src: &[usize]) -> Result<Self> {
        model.check_source(src)?;
        let mut graph = Graph::new(&model.params);
        let vars = ModelVars::bind(&mut graph, model)?;
        let enc = model::encode(&mut graph, &vars, src, None)?;
        Ok(NmtScorer {
            graph,
            vars,
            enc,
            vocab: model.dims.tgt_vocab,
        })
    }
}

impl StepScorer for NmtScorer<'_> {
    type State = Var;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn initial(&mut self) -> Result<Var> {
        model::initial_state(&mut self.graph, &self.vars, &self.enc)
    }

    fn step(&mut self, state: &Var, prev: usize) -> Result<(Vec<f64>, Var)> {
        let out = model::full_step(&mut self.graph, &self.vars, &self.enc, prev, *state, None)?;
        let lp = log_softmax_slice(self.graph.value(out.logits).data());
        if lp.iter().any(|p| p.is_nan()) {
            return Err(Error::NonFinite {
                context: "decoder output distribution".into(),
            });
        }
        Ok((lp, out.state))
    }
}

/// Greedy translation of one sentence; output excludes EOS.
pub fn greedy_translate(model: &Model, src: &[usize], max_steps: usize) -> Result<Vec<usize>> {
    let mut s = NmtScorer::new(model, src)?;
    Ok(greedy(&mut s, max_steps)?.output().to_vec())
}

/// Best beam-search hypothesis for one sentence.
pub fn translate_hypothesis(model: &Model, src: &[usize], cfg: &BeamConfig) -> Result<Hypothesis> {
    let mut s = NmtScorer::new(model, src)?;
    let steps = cfg.steps_for(src.len());
    let mut all = beam_search(&mut s, cfg.beam, steps, cfg.normalize)?;
    if all.is_empty() {
        return Ok(Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        });
    }
    Ok(all.swap_remove(0))
}

/// Beam-search translation; output excludes EOS.
pub fn translate(model: &Model, src: &[usize], cfg: &BeamConfig) -> Result<Vec<usize>> {
    Ok(translate_hypothesis(model, src, cfg)?.output().to_vec())
}

/// Translates many sentences on `threads` workers; output order matches input.
pub fn translate_all(model: &Model, sources: &[Vec<usize>], cfg: &BeamConfig, threads: usize) -> Result<Vec<Vec<usize>>> {
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let chunk = sources.len().div_ceil(threads.max(1));
    let parts: Vec<Result<Vec<Vec<usize>>>> = std::thread::scope(|s| {
        let handles: Vec<_> = sources
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|src| translate(model, src, cfg)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("decoder worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(sources.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
