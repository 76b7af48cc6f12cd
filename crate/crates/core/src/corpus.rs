//! Vocabularies, parallel corpora, batching and synthetic translation tasks.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Bidirectional token/id map. Ids 0..4 are the fixed specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Parse(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    /// Keeps the `max_size - 4` most frequent tokens seen at least
    /// `min_count` times; frequency ties go to the lexicographically smaller token.
    pub fn build<S: AsRef<[String]>>(sentences: &[S], max_size: usize, min_count: usize) -> Result<Self> {
        if max_size <= SPECIALS.len() {
            return Err(Error::InvalidArgument(format!(
                "vocabulary cap {max_size} leaves no room beyond the {} specials",
                SPECIALS.len()
            )));
        }
        if sentences.iter().all(|s| s.as_ref().is_empty()) {
            return Err(Error::Empty("corpus"));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for t in s.as_ref() {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !SPECIALS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - SPECIALS.len());
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to tokens, dropping PAD/BOS/EOS and stopping at the first EOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]).to_string())
            .collect()
    }

    pub fn decode_line(&self, ids: &[usize]) -> String {
        self.decode(ids).join(" ")
    }

    /// Writes one `token<TAB>id` line per entry, ordered by id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(f, "{t}\t{i}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path)?;
        let mut tokens = Vec::new();
        for (lineno, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Parse(format!("{}:{}: expected token<TAB>id", path.display(), lineno + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Parse(format!("{}:{}: bad id `{id}`", path.display(), lineno + 1)))?;
            if id != tokens.len() {
                return Err(Error::Parse(format!(
                    "{}:{}: ids must be consecutive from 0",
                    path.display(),
                    lineno + 1
                )));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Parse(format!("{}: special tokens missing", path.display())));
        }
        Self::from_tokens(tokens)
    }
}

/// Tokenized source/target sentence pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<(Vec<String>, Vec<String>)>) -> Self {
        ParallelCorpus { pairs }
    }

    pub fn from_lines<S: AsRef<str>>(src: &[S], tgt: &[S]) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::InvalidArgument(format!(
                "{} source lines vs {} target lines",
                src.len(),
                tgt.len()
            )));
        }
        Ok(ParallelCorpus {
            pairs: src
                .iter()
                .zip(tgt)
                .map(|(s, t)| (tokenize(s.as_ref()), tokenize(t.as_ref())))
                .collect(),
        })
    }

    /// Reads two line-aligned UTF-8 files.
    pub fn load(src: &Path, tgt: &Path) -> Result<Self> {
        let s = read_lines(src)?;
        let t = read_lines(tgt)?;
        Self::from_lines(&s, &t)
    }

    pub fn save(&self, src: &Path, tgt: &Path) -> Result<()> {
        write_lines(src, self.pairs.iter().map(|p| p.0.join(" ")))?;
        write_lines(tgt, self.pairs.iter().map(|p| p.1.join(" ")))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<Vec<String>> {
        self.pairs.iter().map(|p| p.0.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Vec<String>> {
        self.pairs.iter().map(|p| p.1.clone()).collect()
    }

    /// Drops pairs where either side is longer than `max_len` tokens.
    pub fn filter_by_length(&self, max_len: usize) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        Ok(ParallelCorpus {
            pairs: self
                .pairs
                .iter()
                .filter(|(s, t)| s.len() <= max_len && t.len() <= max_len)
                .cloned()
                .collect(),
        })
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn write_lines<I, S>(path: &Path, lines: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut out = String::new();
    for l in lines {
        out.push_str(l.as_ref());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    Copy,
    Reverse,
    CipherReverse,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(SynthKind::Copy),
            "reverse" => Ok(SynthKind::Reverse),
            "cipher-reverse" => Ok(SynthKind::CipherReverse),
            other => Err(Error::Parse(format!("unknown synthetic task `{other}`"))),
        }
    }
}

pub fn synth_token(i: usize) -> String {
    format!("t{i}")
}

/// The substitution table used by [`SynthKind::CipherReverse`] for a seed.
/// Entry `i` is the target index for source token `t{i}`.
pub fn cipher_permutation(vocab_size: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut perm: Vec<usize> = (0..vocab_size).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Generates `n_pairs` pairs over tokens `t0..t{vocab_size-1}` with source
/// lengths drawn uniformly from `min_len..=max_len`.
pub fn generate_synthetic_task(
    kind: SynthKind,
    vocab_size: usize,
    n_pairs: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<ParallelCorpus> {
    if vocab_size < 5 {
        return Err(Error::InvalidArgument(format!(
            "synthetic vocabulary size {vocab_size} is below 5"
        )));
    }
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi {
        return Err(Error::InvalidArgument(format!("bad length range {lo}..={hi}")));
    }
    let perm = cipher_permutation(vocab_size, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let len = rng.random_range(lo..=hi);
        let src: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab_size)).collect();
        let tgt: Vec<usize> = match kind {
            SynthKind::Copy => src.clone(),
            SynthKind::Reverse => src.iter().rev().copied().collect(),
            SynthKind::CipherReverse => src.iter().rev().map(|&t| perm[t]).collect(),
        };
        pairs.push((
            src.into_iter().map(synth_token).collect(),
            tgt.into_iter().map(synth_token).collect(),
        ));
    }
    Ok(ParallelCorpus { pairs })
}

/// Padded id matrices for one minibatch. Targets are wrapped in BOS ... EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub src_lens: Vec<usize>,
    pub tgt: Vec<Vec<usize>>,
    pub tgt_lens: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[(Vec<usize>, Vec<usize>)]) -> Self {
        let src_max = pairs.iter().map(|p| p.0.len()).max().unwrap_or(0);
        let tgt_max = pairs.iter().map(|p| p.1.len() + 2).max().unwrap_or(0);
        let mut b = Batch {
            src: Vec::with_capacity(pairs.len()),
            src_lens: Vec::with_capacity(pairs.len()),
            tgt: Vec::with_capacity(pairs.len()),
            tgt_lens: Vec::with_capacity(pairs.len()),
        };
        for (s, t) in pairs {
            let mut srow = s.clone();
            srow.resize(src_max, PAD);
            let mut trow = Vec::with_capacity(tgt_max);
            trow.push(BOS);
            trow.extend_from_slice(t);
            trow.push(EOS);
            b.tgt_lens.push(trow.len());
            trow.resize(tgt_max, PAD);
            b.src_lens.push(s.len());
            b.src.push(srow);
            b.tgt.push(trow);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Unpadded source ids of sentence `i`.
    pub fn source(&self, i: usize) -> &[usize] {
        &self.src[i][..self.src_lens[i]]
    }

    /// Unpadded target ids of sentence `i`, including BOS and EOS.
    pub fn target(&self, i: usize) -> &[usize] {
        &self.tgt[i][..self.tgt_lens[i]]
    }

    /// Number of predicted (non-pad, non-BOS) target tokens.
    pub fn target_tokens(&self) -> usize {
        self.tgt_lens.iter().map(|l| l - 1).sum()
    }
}

/// Encodes a corpus into id pairs.
pub fn encode_corpus(corpus: &ParallelCorpus, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Vec<(Vec<usize>, Vec<usize>)> {
    corpus
        .pairs
        .iter()
        .map(|(s, t)| (src_vocab.encode(s), tgt_vocab.encode(t)))
        .collect()
}

/// Splits a corpus into batches, optionally shuffled by `shuffle_seed`.
/// Every pair lands in exactly one batch.
pub fn make_batches(
    corpus: &ParallelCorpus,
    batch_size: usize,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    let encoded = encode_corpus(corpus, src_vocab, tgt_vocab);
    batch_encoded(&encoded, batch_size, shuffle_seed.map(ChaCha8Rng::seed_from_u64).as_mut())
}

pub(crate) fn batch_encoded(
    encoded: &[(Vec<usize>, Vec<usize>)],
    batch_size: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if encoded.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    Ok(order
        .chunks(batch_size)
        .map(|idx| {
            let pairs: Vec<_> = idx.iter().map(|&i| encoded[i].clone()).collect();
            Batch::from_pairs(&pairs)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sents(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| tokenize(l)).collect()
    }

    #[test]
    fn vocab_keeps_all_tokens_under_cap() {
        let v = Vocab::build(&sents(&["a a b"]), 10, 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(4), Some("a"));
        assert_eq!(v.token(5), Some("b"));
        assert_eq!(v.token(PAD), Some("<pad>"));
    }

    #[test]
    fn vocab_keeps_most_frequent() {
        let v = Vocab::build(&sents(&["a b", "b c"]), 5, 1).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.token(4), Some("b"));
    }

    #[test]
    fn vocab_ties_are_lexicographic() {
        let v = Vocab::build(&sents(&["z y x"]), 6, 1).unwrap();
        assert_eq!(v.decode(&[4, 5]), vec!["x", "y"]);
    }

    #[test]
    fn vocab_errors() {
        assert!(Vocab::build(&sents(&["a"]), 4, 1).is_err());
        assert!(matches!(Vocab::build(&sents(&[""]), 10, 1), Err(Error::Empty(_))));
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let v = Vocab::build(&sents(&["a b"]), 10, 1).unwrap();
        assert_eq!(v.encode(&tokenize("a z")), vec![v.id("a"), UNK]);
    }

    #[test]
    fn min_count_filters() {
        let v = Vocab::build(&sents(&["a a b"]), 10, 2).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.tsv");
        let v = Vocab::build(&sents(&["x y z y"]), 10, 1).unwrap();
        v.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<pad>\t0\n<s>\t1\n</s>\t2\n<unk>\t3\ny\t4\n"));
        assert_eq!(Vocab::load(&path).unwrap(), v);
        fs::write(&path, "a\t0\n").unwrap();
        assert!(Vocab::load(&path).is_err());
    }

    #[test]
    fn filter_drops_long_pairs() {
        let long: Vec<String> = (0..51).map(|i| format!("w{i}")).collect();
        let c = ParallelCorpus::new(vec![(long.clone(), tokenize("a")), (tokenize("a b"), tokenize("c"))]);
        let f = c.filter_by_length(50).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f.pairs[0].0, tokenize("a b"));
        let c2 = ParallelCorpus::new(vec![(tokenize("a"), long)]);
        assert!(c2.filter_by_length(50).unwrap().is_empty());
    }

    #[test]
    fn filter_preserves_order() {
        let mk = |n: usize, tag: &str| -> Vec<String> { (0..n).map(|i| format!("{tag}{i}")).collect() };
        let c = ParallelCorpus::new(vec![
            (mk(10, "a"), mk(3, "x")),
            (mk(60, "b"), mk(3, "y")),
            (mk(20, "c"), mk(3, "z")),
        ]);
        let f = c.filter_by_length(50).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f.pairs[0].0.len(), 10);
        assert_eq!(f.pairs[1].0.len(), 20);
        assert_eq!(c.filter_by_length(100).unwrap(), c);
        assert!(c.filter_by_length(0).is_err());
    }

    #[test]
    fn synthetic_tasks() {
        let copy = generate_synthetic_task(SynthKind::Copy, 10, 20, (1, 5), 3).unwrap();
        assert!(copy.pairs.iter().all(|(s, t)| s == t));
        let rev = generate_synthetic_task(SynthKind::Reverse, 10, 20, (1, 5), 3).unwrap();
        for (s, t) in &rev.pairs {
            assert_eq!(s.iter().rev().collect::<Vec<_>>(), t.iter().collect::<Vec<_>>());
            assert!((1..=5).contains(&s.len()));
        }
        // Same seed, same sources.
        assert_eq!(copy.sources(), rev.sources());
        assert!(generate_synthetic_task(SynthKind::Copy, 4, 1, (1, 2), 0).is_err());
    }

    #[test]
    fn cipher_reverse_applies_stored_permutation() {
        let perm = cipher_permutation(12, 9);
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());
        let c = generate_synthetic_task(SynthKind::CipherReverse, 12, 30, (2, 6), 9).unwrap();
        for (s, t) in &c.pairs {
            let expect: Vec<String> = s
                .iter()
                .rev()
                .map(|tok| synth_token(perm[tok[1..].parse::<usize>().unwrap()]))
                .collect();
            assert_eq!(&expect, t);
        }
    }

    #[test]
    fn batches_cover_corpus_once() {
        let c = generate_synthetic_task(SynthKind::Copy, 8, 10, (1, 4), 1).unwrap();
        let v = Vocab::build(&c.sources(), 100, 1).unwrap();
        let b = make_batches(&c, 3, &v, &v, Some(5)).unwrap();
        assert_eq!(b.iter().map(Batch::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut seen: Vec<Vec<usize>> = b
            .iter()
            .flat_map(|b| (0..b.len()).map(move |i| b.source(i).to_vec()))
            .collect();
        let mut all: Vec<Vec<usize>> = c.pairs.iter().map(|p| v.encode(&p.0)).collect();
        seen.sort();
        all.sort();
        assert_eq!(seen, all);
        assert_eq!(b, make_batches(&c, 3, &v, &v, Some(5)).unwrap());
        assert!(make_batches(&c, 0, &v, &v, None).is_err());
        assert!(make_batches(&ParallelCorpus::default(), 2, &v, &v, None).is_err());
    }

    #[test]
    fn targets_are_wrapped() {
        let c = ParallelCorpus::from_lines(&["x y z"], &["a b"]).unwrap();
        let v = Vocab::build(&c.targets(), 10, 1).unwrap();
        let b = make_batches(&c, 1, &v, &v, None).unwrap();
        assert_eq!(b[0].target(0), &[BOS, v.id("a"), v.id("b"), EOS]);
        assert_eq!(b[0].target_tokens(), 3);
    }

    #[test]
    fn padding_only_after_length() {
        let c = ParallelCorpus::from_lines(&["a", "a b c"], &["b b b b", "c"]).unwrap();
        let v = Vocab::build(&c.sources(), 10, 1).unwrap();
        let b = make_batches(&c, 2, &v, &v, None).unwrap().remove(0);
        for i in 0..2 {
            assert!(b.src[i][b.src_lens[i]..].iter().all(|&x| x == PAD));
            assert!(b.source(i).iter().all(|&x| x != PAD));
            assert!(b.tgt[i][b.tgt_lens[i]..].iter().all(|&x| x == PAD));
        }
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(words in proptest::collection::vec("[a-e]{1,3}", 1..12)) {
            let v = Vocab::build(std::slice::from_ref(&words), 1000, 1).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&words)), words);
        }

        #[test]
        fn batch_sizes_sum_to_corpus(n in 1usize..40, bs in 1usize..9, seed in 0u64..50) {
            let c = generate_synthetic_task(SynthKind::Reverse, 6, n, (1, 3), seed).unwrap();
            let v = Vocab::build(&c.sources(), 50, 1).unwrap();
            let b = make_batches(&c, bs, &v, &v, Some(seed)).unwrap();
            prop_assert_eq!(b.iter().map(Batch::len).sum::<usize>(), n);
        }
    }
}
