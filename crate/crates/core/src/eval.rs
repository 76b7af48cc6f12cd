//! Corpus BLEU, source-length buckets and parameter counts.
//!
//! BLEU follows multi-bleu conventions: clipped n-gram counts against the
//! maximum count over references, brevity penalty from the reference length
//! closest to each hypothesis (shorter wins ties), and a score of 0 whenever
//! an n-gram order has matches possible but none found. An order for which
//! the hypotheses contain no n-grams at all (every hypothesis shorter than n)
//! is left out of the geometric mean. An empty hypothesis corpus scores 0.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Group, ParamStore};
use crate::bref::BRefDims;
use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::mref::MRefDims;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// 0 to 100.
    pub score: f64,
    /// Modified precision per order; `None` when the order has no n-grams.
    pub precisions: [Option<f64>; MAX_ORDER],
    pub brevity_penalty: f64,
    /// Hypothesis length over effective reference length.
    pub ratio: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p: Vec<String> = self
            .precisions
            .iter()
            .map(|p| match p {
                Some(v) => format!("{:.1}", v * 100.0),
                None => "-".into(),
            })
            .collect();
        write!(
            f,
            "BLEU = {:.2}, {} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.score,
            p.join("/"),
            self.brevity_penalty,
            self.ratio,
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    out
}

fn fold(sentence: &[String], case_sensitive: bool) -> Vec<String> {
    if case_sensitive {
        sentence.to_vec()
    } else {
        sentence.iter().map(|t| t.to_lowercase()).collect()
    }
}

/// Corpus-level BLEU-4 of tokenised hypotheses against one or more
/// tokenised references per sentence.
pub fn bleu(hypotheses: &[Vec<String>], references: &[Vec<Vec<String>>], case_sensitive: bool) -> Result<BleuReport> {
    if hypotheses.is_empty() {
        return Err(Error::Empty("hypothesis corpus"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses but {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, refs) in hypotheses.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::InvalidArgument("sentence without references".into()));
        }
        let hyp = fold(hyp, case_sensitive);
        let refs: Vec<Vec<String>> = refs.iter().map(|r| fold(r, case_sensitive)).collect();
        hyp_len += hyp.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .expect("at least one reference");
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(&hyp, n);
            let mut max_ref: HashMap<&Vec<&str>, usize> = HashMap::new();
            let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
            for rc in &ref_counts {
                for (g, &c) in rc {
                    if h.contains_key(g) {
                        let e = max_ref.entry(g).or_insert(0);
                        *e = (*e).max(c);
                    }
                }
            }
            for (g, &c) in &h {
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    let mut precisions = [None; MAX_ORDER];
    let mut log_sum = 0.0;
    let mut used = 0;
    let mut zero = false;
    for n in 0..MAX_ORDER {
        if total[n] == 0 {
            continue;
        }
        let p = matched[n] as f64 / total[n] as f64;
        precisions[n] = Some(p);
        if matched[n] == 0 {
            zero = true;
        } else {
            log_sum += p.ln();
            used += 1;
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if zero || used == 0 {
        0.0
    } else {
        100.0 * brevity_penalty * (log_sum / used as f64).exp()
    };
    Ok(BleuReport {
        score,
        precisions,
        brevity_penalty,
        ratio: if ref_len == 0 { 0.0 } else { hyp_len as f64 / ref_len as f64 },
        hyp_len,
        ref_len,
    })
}

/// BLEU of whitespace-tokenised lines against a single reference each.
pub fn bleu_lines<S: AsRef<str>>(hypotheses: &[S], references: &[S], case_sensitive: bool) -> Result<BleuReport> {
    let tok = |s: &S| crate::corpus::tokenize(s.as_ref());
    let hyps: Vec<_> = hypotheses.iter().map(tok).collect();
    let refs: Vec<_> = references.iter().map(|r| vec![tok(r)]).collect();
    bleu(&hyps, &refs, case_sensitive)
}

/// Sentences whose source length falls in `(lo, hi]` (or `> lo` when open).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub lo: usize,
    /// `None` for the final open-ended bucket.
    pub hi: Option<usize>,
    pub bleu: f64,
    pub mean_hyp_len: f64,
    pub mean_ref_len: f64,
    pub count: usize,
}

impl LengthBucket {
    pub fn label(&self) -> String {
        match self.hi {
            Some(hi) => format!("{}-{}", self.lo + 1, hi),
            None => format!(">{}", self.lo),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBucketReport {
    pub width: usize,
    pub buckets: Vec<LengthBucket>,
}

impl LengthBucketReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("bucket\tcount\tbleu\tmean_hyp_len\tmean_ref_len\n");
        for b in &self.buckets {
            s.push_str(&format!(
                "{}\t{}\t{:.2}\t{:.2}\t{:.2}\n",
                b.label(),
                b.count,
                b.bleu,
                b.mean_hyp_len,
                b.mean_ref_len
            ));
        }
        s
    }
}

/// Source lengths above this land in the open bucket.
pub const OPEN_BUCKET_AFTER: usize = 50;

fn bucket_of(len: usize, width: usize) -> (usize, Option<usize>) {
    if len > OPEN_BUCKET_AFTER {
        return (OPEN_BUCKET_AFTER, None);
    }
    let k = len.saturating_sub(1) / width;
    (k * width, Some(((k + 1) * width).min(OPEN_BUCKET_AFTER)))
}

/// Groups sentences by source length and scores each non-empty group.
pub fn length_buckets(
    sources: &[Vec<String>],
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    width: usize,
) -> Result<LengthBucketReport> {
    if width == 0 {
        return Err(Error::InvalidArgument("bucket width must be positive".into()));
    }
    if sources.len() != hypotheses.len() || sources.len() != references.len() {
        return Err(Error::InvalidArgument("sources, hypotheses and references must align".into()));
    }
    let mut groups: BTreeMap<(usize, Option<usize>), Vec<usize>> = BTreeMap::new();
    for (i, s) in sources.iter().enumerate() {
        groups.entry(bucket_of(s.len(), width)).or_default().push(i);
    }
    let mut buckets = Vec::with_capacity(groups.len());
    // BTreeMap orders `None` first for equal `lo`; only the open bucket has it.
    let mut keys: Vec<_> = groups.keys().copied().collect();
    keys.sort_by_key(|&(lo, hi)| (hi.is_none(), lo));
    for key in keys {
        let idx = &groups[&key];
        let hyps: Vec<_> = idx.iter().map(|&i| hypotheses[i].clone()).collect();
        let refs: Vec<_> = idx.iter().map(|&i| vec![references[i].clone()]).collect();
        let n = idx.len() as f64;
        buckets.push(LengthBucket {
            lo: key.0,
            hi: key.1,
            bleu: bleu(&hyps, &refs, true)?.score,
            mean_hyp_len: hyps.iter().map(|h| h.len()).sum::<usize>() as f64 / n,
            mean_ref_len: idx.iter().map(|&i| references[i].len()).sum::<usize>() as f64 / n,
            count: idx.len(),
        });
    }
    Ok(LengthBucketReport { width, buckets })
}

/// Parameter counts per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub groups: BTreeMap<Group, usize>,
    pub total: usize,
}

impl ParamReport {
    pub fn from_store(store: &ParamStore) -> Self {
        let groups = Group::ALL.iter().map(|&g| (g, store.count(g))).collect();
        ParamReport {
            groups,
            total: store.total_count(),
        }
    }

    pub fn from_shapes(shapes: &[(String, Group, Vec<usize>)]) -> Self {
        let mut groups: BTreeMap<Group, usize> = Group::ALL.iter().map(|&g| (g, 0)).collect();
        for (_, g, s) in shapes {
            *groups.entry(*g).or_insert(0) += s.iter().product::<usize>();
        }
        let total = groups.values().sum();
        ParamReport { groups, total }
    }

    pub fn count(&self, g: Group) -> usize {
        self.groups.get(&g).copied().unwrap_or(0)
    }

    pub fn baseline(&self) -> usize {
        self.count(Group::Encoder) + self.count(Group::Decoder)
    }

    /// Parameters added on top of the baseline, as a fraction of it.
    pub fn added_ratio(&self) -> f64 {
        let base = self.baseline();
        if base == 0 {
            0.0
        } else {
            (self.total - base) as f64 / base as f64
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("group\tparams\n");
        for (g, c) in &self.groups {
            s.push_str(&format!("{g}\t{c}\n"));
        }
        s.push_str(&format!("total\t{}\nadded_ratio\t{:.4}\n", self.total, self.added_ratio()));
        s
    }
}

/// Shapes of every parameter a model with these sizes carries; mirrors the
/// constructors without allocating.
pub fn param_shapes(dims: &ModelDims, mref: Option<&MRefDims>, bref: Option<&BRefDims>) -> Vec<(String, Group, Vec<usize>)> {
    let (e, h, a, r) = (dims.embed, dims.hidden, dims.attention, dims.readout);
    let c = dims.context();
    let gh = dims.cell.gates() * h;
    let mut out = Vec::new();
    let mut push = |n: &str, g: Group, s: Vec<usize>| out.push((n.to_string(), g, s));
    let cell = |push: &mut dyn FnMut(&str, Group, Vec<usize>), p: &str, g: Group, input: usize| {
        push(&format!("{p}.wx"), g, vec![gh, input]);
        push(&format!("{p}.wh"), g, vec![gh, h]);
        push(&format!("{p}.bx"), g, vec![gh]);
        push(&format!("{p}.bh"), g, vec![gh]);
    };
    let enc = Group::Encoder;
    push("enc.embed", enc, vec![dims.src_vocab, e]);
    cell(&mut push, "enc.fwd", enc, e);
    cell(&mut push, "enc.bwd", enc, e);
    let d = Group::Decoder;
    push("dec.embed", d, vec![dims.tgt_vocab, e]);
    push("dec.init.w", d, vec![h, c]);
    push("dec.init.b", d, vec![h]);
    push("dec.att.w", d, vec![a, h]);
    push("dec.att.u", d, vec![a, c]);
    push("dec.att.v", d, vec![a]);
    cell(&mut push, "dec.cell", d, e + c);
    push("dec.out.w", d, vec![r, e + h + c]);
    push("dec.out.b", d, vec![r]);
    push("dec.proj.w", d, vec![dims.tgt_vocab, r]);
    push("dec.proj.b", d, vec![dims.tgt_vocab]);
    if let Some(m) = mref {
        let ma = m.attention;
        push("mref.att.w", Group::MRef, vec![ma, h]);
        push("mref.att.u", Group::MRef, vec![ma, c]);
        push("mref.att.anchor", Group::MRef, vec![ma, c]);
        push("mref.att.v", Group::MRef, vec![ma]);
        push("mref.proj", Group::MRef, vec![gh, c]);
        // Fitted anchors plus the score network used while fitting them.
        push("lcc.anchors", Group::Anchors, vec![m.anchors, c]);
        for s in ["w", "u", "vm"] {
            push(&format!("lcc.score.{s}"), Group::Anchors, vec![c, c]);
        }
        push("lcc.score.v", Group::Anchors, vec![c]);
    }
    if let Some(b) = bref {
        let (dq, da, dk) = (b.query_dim(dims), b.anchor_dim, b.key_dim(dims));
        let k = b.score_dim.unwrap_or(dk);
        let g = Group::BRef;
        push("bref.g.w", g, vec![da, dq]);
        push("bref.g.b", g, vec![da]);
        push("bref.anchors", g, vec![b.anchors, dk]);
        for s in ["w", "u", "vm"] {
            push(&format!("bref.score.{s}"), g, vec![k, dk]);
        }
        push("bref.score.v", g, vec![k]);
        push("bref.reg.w", g, vec![b.anchors * e, da]);
        push("bref.reg.b", g, vec![b.anchors, e]);
        push("bref.proj", g, vec![gh, e]);
    }
    out
}

/// Published totals: baseline 71.1M, +6.6M for the monolingual network and
/// +14M for the bilingual one.
pub const REFERENCE_COUNTS: (f64, f64, f64) = (71.1e6, 6.6e6, 14e6);

/// Counts at the published sizes (30k vocabularies, embedding 620, hidden
/// 1000, 100 monolingual anchors, 30 bilingual anchors of width 100).
pub fn published_scale_report() -> (ParamReport, ParamReport, ParamReport) {
    let dims = ModelDims {
        src_vocab: 30_000,
        tgt_vocab: 30_000,
        embed: 620,
        hidden: 1000,
        attention: 1000,
        readout: 620,
        cell: crate::model::CellKind::Gru,
    };
    let m = MRefDims {
        anchors: 100,
        attention: 1000,
    };
    let b = BRefDims {
        anchors: 30,
        anchor_dim: 100,
        ..BRefDims::default()
    };
    (
        ParamReport::from_shapes(&param_shapes(&dims, None, None)),
        ParamReport::from_shapes(&param_shapes(&dims, Some(&m), None)),
        ParamReport::from_shapes(&param_shapes(&dims, None, Some(&b))),
    )
}

/// Human-readable comparison of [`published_scale_report`] with the published
/// totals.
pub fn published_scale_summary() -> String {
    let (base, m, b) = published_scale_report();
    let (rb, rm, rbb) = REFERENCE_COUNTS;
    let mil = |x: usize| x as f64 / 1e6;
    format!(
        "model\tcomputed\tpublished\nbaseline\t{:.1}M\t{:.1}M\n+monolingual\t+{:.1}M\t+{:.1}M\n+bilingual\t+{:.1}M\t+{:.1}M\n",
        mil(base.total),
        rb / 1e6,
        mil(m.total - base.total),
        rm / 1e6,
        mil(b.total - base.total),
        rbb / 1e6
    )
}
