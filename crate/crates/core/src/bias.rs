//! Response prior: an add-k bigram language model over response words and
//! the biased final score `S_m + alpha * log P(y)`.
//!
//! The model predicts over the training words plus `</s>` and `<unk>`;
//! contexts are `<s>`, the training words and `<unk>`. Every conditional
//! distribution therefore sums to one.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::dot;
use crate::text::tokenize;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const DEFAULT_SMOOTHING: f64 = 0.1;

/// Candidate weights searched when tuning `alpha` offline.
pub const ALPHA_GRID: [f64; 5] = [0.0, 0.1, 0.25, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct BigramLM {
    k: f64,
    /// Training words, sorted; index is the word id.
    words: Vec<String>,
    index: BTreeMap<String, usize>,
    /// Occurrences of each word (and `</s>` at index `words.len()`).
    unigrams: Vec<u64>,
    /// `(context, next) -> count` keyed by ids; context `words.len()` is `<s>`,
    /// next `words.len()` is `</s>`.
    bigrams: BTreeMap<(usize, usize), u64>,
    /// Outgoing transitions per context id (words, then `<s>`).
    context_totals: Vec<u64>,
}

impl BigramLM {
    fn from_counts(k: f64, words: Vec<String>, unigrams: Vec<u64>, bigrams: BTreeMap<(usize, usize), u64>) -> Result<Self> {
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::Config(format!("smoothing constant must be positive, got {k}")));
        }
        let v = words.len();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let mut context_totals = vec![0u64; v + 1];
        for (&(c, n), &cnt) in &bigrams {
            if c > v || n > v {
                return Err(Error::format("language model", "bigram id out of range"));
            }
            context_totals[c] += cnt;
        }
        Ok(BigramLM {
            k,
            words,
            index,
            unigrams,
            bigrams,
            context_totals,
        })
    }

    pub fn smoothing(&self) -> f64 {
        self.k
    }

    /// Number of training words (excluding markers).
    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    /// Size of the predicted set: words plus `</s>` and `<unk>`.
    pub fn outcome_count(&self) -> usize {
        self.words.len() + 2
    }

    fn bos(&self) -> usize {
        self.words.len()
    }

    fn eos(&self) -> usize {
        self.words.len()
    }

    fn unk(&self) -> usize {
        self.words.len() + 1
    }

    fn word_id(&self, w: &str) -> usize {
        self.index.get(w).copied().unwrap_or(self.unk())
    }

    /// `P(next | context)` by ids, where `next` ranges over words, `</s>`
    /// and `<unk>`, and `context` over words, `<s>` (= vocab size) and `<unk>`.
    fn cond_ids(&self, context: usize, next: usize) -> f64 {
        let (count, total) = if context <= self.bos() {
            (
                self.bigrams.get(&(context, next)).copied().unwrap_or(0),
                self.context_totals[context],
            )
        } else {
            (0, 0)
        };
        (count as f64 + self.k) / (total as f64 + self.k * self.outcome_count() as f64)
    }

    /// `P(next | prev)` for word strings; unknown words map to `<unk>`.
    pub fn conditional(&self, prev: &str, next: &str) -> f64 {
        let c = if prev == BOS { self.bos() } else { self.word_id(prev) };
        let n = if next == EOS { self.eos() } else { self.word_id(next) };
        self.cond_ids(c, n)
    }

    /// Smoothed unigram probability over the same outcome set.
    pub fn unigram_prob(&self, w: &str) -> f64 {
        let id = if w == EOS { self.eos() } else { self.word_id(w) };
        let count = self.unigrams.get(id).copied().unwrap_or(0);
        let total: u64 = self.unigrams.iter().sum();
        (count as f64 + self.k) / (total as f64 + self.k * self.outcome_count() as f64)
    }

    /// Sum of `P(. | prev)` over the outcome set.
    pub fn conditional_mass(&self, prev: &str) -> f64 {
        let c = if prev == BOS { self.bos() } else { self.word_id(prev) };
        (0..self.outcome_count()).map(|n| self.cond_ids(c, n)).sum()
    }

    /// Words in the order they enter the model: tokenized response text.
    pub fn words_of(text: &str) -> Vec<String> {
        tokenize(text).tokens
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "#lm v1 k={} vocab={}", self.k, self.words.len());
        s.push_str("[unigrams]\n");
        for (w, c) in self.words.iter().zip(&self.unigrams) {
            let _ = writeln!(s, "{w}\t{c}");
        }
        let _ = writeln!(s, "{EOS}\t{}", self.unigrams[self.eos()]);
        s.push_str("[bigrams]\n");
        let name = |id: usize, ctx: bool| -> &str {
            if id == self.words.len() {
                if ctx {
                    BOS
                } else {
                    EOS
                }
            } else {
                &self.words[id]
            }
        };
        for (&(c, n), cnt) in &self.bigrams {
            let _ = writeln!(s, "{}\t{}\t{cnt}", name(c, true), name(n, false));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("language model", d);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let rest = header.strip_prefix("#lm v1 ").ok_or_else(|| bad(format!("bad header {header:?}")))?;
        let mut k = None;
        let mut vocab = None;
        for part in rest.split_whitespace() {
            match part.split_once('=') {
                Some(("k", v)) => k = v.parse::<f64>().ok(),
                Some(("vocab", v)) => vocab = v.parse::<usize>().ok(),
                _ => return Err(bad(format!("bad header field {part:?}"))),
            }
        }
        let (k, vocab) = match (k, vocab) {
            (Some(k), Some(v)) => (k, v),
            _ => return Err(bad("header needs k and vocab".into())),
        };
        let mut section = "";
        let mut words = Vec::with_capacity(vocab);
        let mut unigrams = Vec::with_capacity(vocab + 1);
        let mut raw_bigrams = Vec::new();
        let mut eos_count = None;
        for line in lines {
            match line {
                "[unigrams]" | "[bigrams]" => {
                    section = line;
                    continue;
                }
                "" => continue,
                _ => {}
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let count_of = |s: &str| s.parse::<u64>().map_err(|_| bad(format!("bad count in {line:?}")));
            match (section, cols.as_slice()) {
                ("[unigrams]", [w, c]) if *w == EOS => eos_count = Some(count_of(c)?),
                ("[unigrams]", [w, c]) => {
                    words.push(w.to_string());
                    unigrams.push(count_of(c)?);
                }
                ("[bigrams]", [a, b, c]) => raw_bigrams.push((a.to_string(), b.to_string(), count_of(c)?)),
                _ => return Err(bad(format!("unexpected line {line:?}"))),
            }
        }
        if words.len() != vocab {
            return Err(bad(format!("expected {vocab} words, found {}", words.len())));
        }
        unigrams.push(eos_count.ok_or_else(|| bad(format!("missing {EOS} count")))?);
        if words.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("words must be sorted and unique".into()));
        }
        let index: BTreeMap<&str, usize> = words.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
        let lookup = |w: &str, marker: &str| -> Result<usize> {
            if w == marker {
                Ok(vocab)
            } else {
                index.get(w).copied().ok_or_else(|| bad(format!("unknown word {w:?} in bigram")))
            }
        };
        let mut bigrams = BTreeMap::new();
        for (a, b, c) in raw_bigrams {
            bigrams.insert((lookup(&a, BOS)?, lookup(&b, EOS)?), c);
        }
        Self::from_counts(k, words, unigrams, bigrams)
    }
}

/// Trains an add-k bigram model on response texts.
pub fn train_lm<S: AsRef<str>>(responses: &[S], k: f64) -> Result<BigramLM> {
    if responses.is_empty() {
        return Err(Error::Empty("language model corpus"));
    }
    let sentences: Vec<Vec<String>> = responses.iter().map(|r| BigramLM::words_of(r.as_ref())).collect();
    let mut vocab: Vec<String> = sentences.iter().flatten().cloned().collect();
    vocab.sort();
    vocab.dedup();
    let v = vocab.len();
    let index: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    let mut unigrams = vec![0u64; v + 1];
    let mut bigrams = BTreeMap::new();
    for s in &sentences {
        let mut prev = v; // <s>
        for w in s {
            let id = index[w.as_str()];
            unigrams[id] += 1;
            *bigrams.entry((prev, id)).or_insert(0) += 1;
            prev = id;
        }
        unigrams[v] += 1;
        *bigrams.entry((prev, v)).or_insert(0) += 1;
    }
    BigramLM::from_counts(k, vocab, unigrams, bigrams)
}

/// `log P(y)`: sum of log conditionals over `<s> w_1 ... w_T </s>`.
pub fn lm_logprob(y: &str, lm: &BigramLM) -> f64 {
    let mut prev = lm.bos();
    let mut total = 0.0;
    for w in BigramLM::words_of(y) {
        let id = lm.word_id(&w);
        total += lm.cond_ids(prev, id).ln();
        prev = id;
    }
    total + lm.cond_ids(prev, lm.eos()).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasConfig {
    pub alpha: f64,
}

impl BiasConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and non-negative, got {alpha}")));
        }
        Ok(BiasConfig { alpha })
    }

    pub fn disabled() -> Self {
        BiasConfig { alpha: 0.0 }
    }
}

pub fn final_score(s_m: f64, logp: f64, cfg: BiasConfig) -> f64 {
    s_m + cfg.alpha * logp
}

/// Appends `alpha` to the query and `log P(y)` to the response so their dot
/// product carries the bias.
pub fn extend_vectors(hx: &[f32], hy: &[f32], logp: f32, cfg: BiasConfig) -> Result<(Vec<f32>, Vec<f32>)> {
    check_dim("extend_vectors", hx.len(), hy.len())?;
    let mut x = hx.to_vec();
    x.push(cfg.alpha as f32);
    let mut y = hy.to_vec();
    y.push(logp);
    Ok((x, y))
}

/// Responses with encodings and prior log-probabilities; the extended rows
/// carry `log P(y)` as a final coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasedResponseSet {
    pub responses: Vec<String>,
    pub dim: usize,
    pub encodings: Vec<f32>,
    pub lm_logprob: Vec<f32>,
    pub extended: Vec<f32>,
}

impl BiasedResponseSet {
    pub fn new(responses: Vec<String>, dim: usize, encodings: Vec<f32>, lm_logprob: Vec<f32>) -> Result<Self> {
        let n = responses.len();
        check_dim("biased response encodings", n * dim, encodings.len())?;
        check_dim("biased response log-probabilities", n, lm_logprob.len())?;
        if let Some(p) = lm_logprob.iter().find(|p| !(p.is_finite() && **p <= 0.0)) {
            return Err(Error::NonFinite(format!("response log-probability {p} must be finite and <= 0")));
        }
        let mut extended = Vec::with_capacity(n * (dim + 1));
        for (row, &lp) in encodings.chunks_exact(dim.max(1)).zip(&lm_logprob) {
            extended.extend_from_slice(row);
            extended.push(lp);
        }
        Ok(BiasedResponseSet {
            responses,
            dim,
            encodings,
            lm_logprob,
            extended,
        })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn extended_dim(&self) -> usize {
        self.dim + 1
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.encodings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn extended_row(&self, i: usize) -> &[f32] {
        let e = self.dim + 1;
        &self.extended[i * e..(i + 1) * e]
    }

    /// Final scores via the extended dot product.
    pub fn folded_scores(&self, hx: &[f32], cfg: BiasConfig) -> Vec<f32> {
        let mut q = hx.to_vec();
        q.push(cfg.alpha as f32);
        (0..self.len()).map(|i| dot(&q, self.extended_row(i))).collect()
    }

    /// Final scores as base dot product plus the bias term.
    pub fn unfolded_scores(&self, hx: &[f32], cfg: BiasConfig) -> Vec<f32> {
        (0..self.len())
            .map(|i| dot(hx, self.row(i)) + cfg.alpha as f32 * self.lm_logprob[i])
            .collect()
    }
}

/// Picks the grid value with the highest metric; ties go to the smaller alpha.
pub fn select_alpha(grid: &[f64], mut metric: impl FnMut(f64) -> Result<f64>) -> Result<(f64, Vec<(f64, f64)>)> {
    let mut best: Option<(f64, f64)> = None;
    let mut all = Vec::with_capacity(grid.len());
    for &a in grid {
        let m = metric(a)?;
        all.push((a, m));
        if best.is_none_or(|(_, bm)| m > bm) {
            best = Some((a, m));
        }
    }
    best.map(|(a, _)| (a, all)).ok_or(Error::Empty("alpha grid"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topk::full_sort;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn near_mle_sentence_probability() {
        let lm = train_lm(&["yes", "yes", "no"], 1e-9).unwrap();
        let p = lm_logprob("yes", &lm).exp();
        assert!((p - 2.0 / 3.0).abs() < 1e-6, "{p}");
    }

    #[test]
    fn two_word_sentence_matches_counts() {
        // Words: i, ok, sure. Outcomes: 3 words + </s> + <unk> = 5.
        let lm = train_lm(&["sure ok", "ok", "i ok"], 0.5).unwrap();
        assert_eq!(lm.outcome_count(), 5);
        // <s> -> sure: 1 of 3 starts; sure -> ok: 1 of 1; ok -> </s>: 3 of 3.
        let want = ((1.0 + 0.5) / (3.0 + 2.5)) * ((1.0 + 0.5) / (1.0 + 2.5)) * ((3.0 + 0.5) / (3.0 + 2.5));
        let got = lm_logprob("sure ok", &lm).exp();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn empty_string_is_stop_after_start() {
        let lm = train_lm(&["a b", "c"], 0.1).unwrap();
        assert!((lm_logprob("", &lm) - lm.conditional(BOS, EOS).ln()).abs() < 1e-15);
    }

    #[test]
    fn single_sentence_corpus_prefers_itself() {
        let lm = train_lm(&["ok"], 0.3).unwrap();
        let best = lm_logprob("ok", &lm);
        for other in ["no", "yes", "", "zzz"] {
            assert!(best > lm_logprob(other, &lm));
        }
    }

    #[test]
    fn uniform_corpus_has_equal_unigrams() {
        let lm = train_lm(&["a b c d", "d c b a", "b a d c"], 0.1).unwrap();
        let p = lm.unigram_prob("a");
        for w in ["b", "c", "d"] {
            assert!((lm.unigram_prob(w) - p).abs() < 1e-9);
        }
    }

    #[test]
    fn conditionals_are_normalized() {
        let lm = train_lm(&["thanks a lot", "thanks !", "see you soon", "a lot of thanks"], 0.1).unwrap();
        for ctx in [BOS, "thanks", "a", "lot", "!", "see", "soon", UNK, "never-seen"] {
            assert!((lm.conditional_mass(ctx) - 1.0).abs() < 1e-9, "{ctx}");
        }
        let uni: f64 = lm.words.iter().map(|w| lm.unigram_prob(w)).sum::<f64>()
            + lm.unigram_prob(EOS)
            + lm.unigram_prob(UNK);
        assert!((uni - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unseen_word_lowers_likelihood() {
        let lm = train_lm(&["see you soon", "see you later", "talk soon"], 0.1).unwrap();
        assert!(lm_logprob("see you soon", &lm) >= lm_logprob("see qqq soon", &lm));
        assert!(lm_logprob("see you soon", &lm) <= 0.0);
    }

    #[test]
    fn text_roundtrip() {
        let lm = train_lm(&["yes , i did .", "no", "it's fine"], 0.25).unwrap();
        let text = lm.to_text();
        assert!(text.starts_with("#lm v1 k=0.25 vocab=8\n[unigrams]\n"));
        let back = BigramLM::from_text(&text).unwrap();
        assert_eq!(back, lm);
        assert!(BigramLM::from_text("#lm v1 k=1\n").is_err());
        assert!(BigramLM::from_text("nonsense").is_err());
    }

    #[test]
    fn final_score_examples() {
        let a = BiasConfig::new(0.5).unwrap();
        assert_eq!(final_score(1.0, -2.0, a), 0.0);
        assert_eq!(final_score(0.7, -3.0, BiasConfig::disabled()), 0.7);
        let c = BiasConfig::new(0.1).unwrap();
        assert!(final_score(0.5, -1.0, c) > final_score(1.0, -10.0, c));
        assert!(BiasConfig::new(-0.1).is_err());
    }

    #[test]
    fn extended_vector_examples() {
        let (x, y) = extend_vectors(&[1.0, 0.0], &[0.0, 1.0], -2.0, BiasConfig::new(0.5).unwrap()).unwrap();
        assert_eq!(dot(&x, &y), -1.0);
        let (x, y) = extend_vectors(&[0.3, 0.2], &[0.5, -1.0], -7.0, BiasConfig::disabled()).unwrap();
        assert_eq!(dot(&x, &y), dot(&[0.3, 0.2], &[0.5, -1.0]));
        assert!(extend_vectors(&[1.0], &[1.0, 2.0], 0.0, BiasConfig::disabled()).is_err());
    }

    #[test]
    fn generic_response_wins_equal_model_scores() {
        let lm = train_lm(&["yes , i did .", "yes , i did .", "yes , i did .", "it's done ."], 0.1).unwrap();
        let generic = lm_logprob("yes , i did .", &lm);
        let specific = lm_logprob("i printed it yesterday .", &lm);
        let cfg = BiasConfig::new(0.25).unwrap();
        assert!(final_score(0.8, generic, cfg) > final_score(0.8, specific, cfg));
    }

    #[test]
    fn folded_and_unfolded_rankings_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d) = (200, 8);
        let enc: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lp: Vec<f32> = (0..n).map(|_| -rng.random_range(0.0f32..20.0)).collect();
        let set = BiasedResponseSet::new((0..n).map(|i| i.to_string()).collect(), d, enc, lp).unwrap();
        assert_eq!(set.extended_dim(), d + 1);
        for _ in 0..20 {
            let hx: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cfg = BiasConfig::new(rng.random_range(0.0..1.0)).unwrap();
            let a = set.folded_scores(&hx, cfg);
            let b = set.unfolded_scores(&hx, cfg);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-5);
            }
            let ra: Vec<u32> = full_sort(&a).into_iter().map(|p| p.0).collect();
            let rb: Vec<u32> = full_sort(&b).into_iter().map(|p| p.0).collect();
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn positive_logprob_is_rejected() {
        assert!(BiasedResponseSet::new(vec!["a".into()], 1, vec![0.0], vec![0.5]).is_err());
    }

    #[test]
    fn alpha_selection_prefers_best_then_smallest() {
        let (a, all) = select_alpha(&ALPHA_GRID, |a| Ok(if a == 0.25 || a == 0.5 { 0.6 } else { 0.5 })).unwrap();
        assert_eq!(a, 0.25);
        assert_eq!(all.len(), 5);
        assert!(select_alpha(&[], |_| Ok(0.0)).is_err());
    }

    proptest! {
        #[test]
        fn mass_is_one_for_random_corpora(
            corpus in proptest::collection::vec("[abc ]{0,12}", 1..8),
            k in 0.01f64..2.0,
        ) {
            let lm = train_lm(&corpus, k).unwrap();
            for ctx in [BOS, "a", "b", "c", UNK] {
                prop_assert!((lm.conditional_mass(ctx) - 1.0).abs() < 1e-9);
            }
            for s in &corpus {
                prop_assert!(lm_logprob(s, &lm) <= 0.0);
            }
        }
    }
}
