//! Tokenization, n-gram extraction and bag-of-n-grams featurization.
//!
//! Text is lowercased and split on whitespace and punctuation boundaries.
//! URLs, email addresses, phone numbers and numerals collapse into the special
//! tokens [`URL`], [`EMAIL`], [`PHONE`] and [`NUM`]. N-grams are contiguous runs
//! of tokens joined by a single space, which never occurs inside a token.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const URL: &str = "<url>";
pub const EMAIL: &str = "<email>";
pub const PHONE: &str = "<phone>";
pub const NUM: &str = "<num>";

/// Separator placed between the tokens of an n-gram.
pub const NGRAM_SEPARATOR: char = ' ';

/// Default maximum n-gram order (unigrams and bigrams).
pub const DEFAULT_MAX_N: usize = 2;
pub const DEFAULT_SIZE_CAP: usize = 200_000;
pub const DEFAULT_MIN_COUNT: u64 = 2;

/// Phone numbers are digit groups with at least this many digits.
const MIN_PHONE_DIGITS: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }
}

pub fn is_special(token: &str) -> bool {
    matches!(token, URL | EMAIL | PHONE | NUM)
}

fn lexer() -> &'static Regex {
    static LEXER: OnceLock<Regex> = OnceLock::new();
    LEXER.get_or_init(|| {
        Regex::new(concat!(
            r#"(?P<url>(?:[a-z][a-z0-9+.\-]*://|www\.)[^\s<>"]*[^\s<>".,!?;:'()\[\]{}])"#,
            r"|(?P<email>[a-z0-9._%+\-]+@[a-z0-9\-]+(?:\.[a-z0-9\-]+)*\.[a-z]{2,})",
            r"|(?P<digits>\+?\(?\d(?:[\d\-.() ]*\d)?)",
            r"|(?P<word>[\p{L}\p{N}_\p{M}]+(?:'[\p{L}\p{M}]+)*)",
            r"|(?P<punct>[^\s\p{L}\p{N}\p{M}\p{Cc}])",
        ))
        .expect("lexer pattern")
    })
}

fn numeral() -> &'static Regex {
    static NUMERAL: OnceLock<Regex> = OnceLock::new();
    NUMERAL.get_or_init(|| Regex::new(r"\d+(?:[.,]\d+)*|[^\s\d]").expect("numeral pattern"))
}

/// Splits a run of digits and separators. Runs with enough digits are phone
/// numbers; anything else is re-lexed as numerals and punctuation.
fn push_digit_run(run: &str, out: &mut Vec<String>) {
    let digits = run.chars().filter(char::is_ascii_digit).count();
    if digits >= MIN_PHONE_DIGITS {
        out.push(PHONE.to_string());
        return;
    }
    for m in numeral().find_iter(run) {
        let s = m.as_str();
        if s.starts_with(|c: char| c.is_ascii_digit()) {
            out.push(NUM.to_string());
        } else {
            out.push(s.to_string());
        }
    }
}

/// Lowercases and tokenizes `text`.
pub fn tokenize(text: &str) -> TokenSequence {
    let lowered = text.to_lowercase();
    let mut tokens = Vec::new();
    for caps in lexer().captures_iter(&lowered) {
        if caps.name("url").is_some() {
            tokens.push(URL.to_string());
        } else if caps.name("email").is_some() {
            tokens.push(EMAIL.to_string());
        } else if let Some(run) = caps.name("digits") {
            push_digit_run(run.as_str(), &mut tokens);
        } else if let Some(m) = caps.name("word").or_else(|| caps.name("punct")) {
            tokens.push(m.as_str().to_string());
        }
    }
    TokenSequence { tokens }
}

/// Removes quoted reply text: lines starting with `>` and `On ... wrote:` headers.
pub fn strip_quoted(text: &str) -> String {
    let mut kept = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with('>') {
            continue;
        }
        let lower = trimmed.to_lowercase();
        if lower.starts_with("on ") && lower.ends_with("wrote:") {
            continue;
        }
        kept.push(line);
    }
    kept.join("\n")
}

/// All contiguous n-grams of order `1..=max_n`, with multiplicity, in order of
/// increasing order then position.
pub fn extract_ngrams(tokens: &TokenSequence, max_n: usize) -> Vec<String> {
    let toks = &tokens.tokens;
    let mut grams = Vec::new();
    for n in 1..=max_n.max(1) {
        if n > toks.len() {
            break;
        }
        for window in toks.windows(n) {
            let mut gram = String::with_capacity(window.iter().map(|t| t.len() + 1).sum());
            for (i, t) in window.iter().enumerate() {
                if i > 0 {
                    gram.push(NGRAM_SEPARATOR);
                }
                gram.push_str(t);
            }
            grams.push(gram);
        }
    }
    grams
}

fn ngram_order(gram: &str) -> usize {
    gram.split(NGRAM_SEPARATOR).count()
}

/// Which message field a bag was extracted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Body,
    Subject,
    Response,
}

/// Sparse multiset of vocabulary ids, sorted by id.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureBag {
    pub items: Vec<(u32, u32)>,
    pub source_field: Field,
}

impl FeatureBag {
    pub fn empty(source_field: Field) -> Self {
        FeatureBag {
            items: Vec::new(),
            source_field,
        }
    }

    /// Builds a bag from raw ids, merging duplicates.
    pub fn from_ids(ids: impl IntoIterator<Item = u32>, source_field: Field) -> Self {
        let mut ids: Vec<u32> = ids.into_iter().collect();
        ids.sort_unstable();
        let mut items: Vec<(u32, u32)> = Vec::new();
        for id in ids {
            match items.last_mut() {
                Some((last, count)) if *last == id => *count += 1,
                _ => items.push((id, 1)),
            }
        }
        FeatureBag {
            items,
            source_field,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn total_count(&self) -> u64 {
        self.items.iter().map(|&(_, c)| c as u64).sum()
    }

    pub fn max_id(&self) -> Option<u32> {
        self.items.last().map(|&(id, _)| id)
    }
}

/// Frequency-ranked n-gram vocabulary with dense ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramVocabulary {
    entries: HashMap<String, u32>,
    ngrams: Vec<String>,
    counts: Vec<u64>,
    max_n: usize,
    size_cap: usize,
}

impl NGramVocabulary {
    /// Counts every n-gram in `corpus` and keeps the `size_cap` most frequent
    /// ones that occur at least `min_count` times. Ties in count are broken by
    /// lexicographic order, and ids follow the ranking.
    pub fn build<I, S>(corpus: I, max_n: usize, size_cap: usize, min_count: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if max_n == 0 {
            return Err(Error::Config("max_n must be at least 1".into()));
        }
        if size_cap == 0 {
            return Err(Error::Config("size_cap must be at least 1".into()));
        }
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let mut freq: HashMap<String, u64> = HashMap::new();
        for text in corpus {
            for gram in extract_ngrams(&tokenize(text.as_ref()), max_n) {
                *freq.entry(gram).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = freq.into_iter().filter(|&(_, c)| c >= min_count).collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(size_cap);
        Ok(Self::from_ranked(ranked, max_n, size_cap))
    }

    fn from_ranked(ranked: Vec<(String, u64)>, max_n: usize, size_cap: usize) -> Self {
        let mut entries = HashMap::with_capacity(ranked.len());
        let mut ngrams = Vec::with_capacity(ranked.len());
        let mut counts = Vec::with_capacity(ranked.len());
        for (id, (gram, count)) in ranked.into_iter().enumerate() {
            entries.insert(gram.clone(), id as u32);
            ngrams.push(gram);
            counts.push(count);
        }
        NGramVocabulary {
            entries,
            ngrams,
            counts,
            max_n,
            size_cap,
        }
    }

    pub fn len(&self) -> usize {
        self.ngrams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ngrams.is_empty()
    }

    pub fn max_n(&self) -> usize {
        self.max_n
    }

    pub fn size_cap(&self) -> usize {
        self.size_cap
    }

    pub fn id(&self, gram: &str) -> Option<u32> {
        self.entries.get(gram).copied()
    }

    pub fn ngram(&self, id: u32) -> Option<&str> {
        self.ngrams.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u32, u64)> {
        self.ngrams
            .iter()
            .zip(&self.counts)
            .enumerate()
            .map(|(id, (g, &c))| (g.as_str(), id as u32, c))
    }

    /// Bag of in-vocabulary n-grams of `text`; out-of-vocabulary n-grams are dropped.
    pub fn featurize(&self, text: &str, field: Field) -> FeatureBag {
        self.featurize_tokens(&tokenize(text), field)
    }

    pub fn featurize_tokens(&self, tokens: &TokenSequence, field: Field) -> FeatureBag {
        let ids = extract_ngrams(tokens, self.max_n)
            .iter()
            .filter_map(|g| self.id(g))
            .collect::<Vec<_>>();
        FeatureBag::from_ids(ids, field)
    }

    /// Serializes to the tab-separated vocabulary format: a
    /// `#vocab v1 max_n=<n>` header followed by `ngram\tid\tcount` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#vocab v1 max_n={}", self.max_n);
        for (gram, id, count) in self.iter() {
            let _ = writeln!(out, "{gram}\t{id}\t{count}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("vocabulary", "missing header"))?;
        let max_n = header
            .strip_prefix("#vocab v1 max_n=")
            .and_then(|n| n.trim().parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::format("vocabulary", format!("bad header {header:?}")))?;
        let mut ranked = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(gram), Some(id), Some(count), None) = (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(Error::format("vocabulary", format!("line {}: expected 3 fields", lineno + 2)));
            };
            let id: usize = id
                .parse()
                .map_err(|_| Error::format("vocabulary", format!("line {}: bad id", lineno + 2)))?;
            if id != ranked.len() {
                return Err(Error::format("vocabulary", format!("line {}: ids must be dense", lineno + 2)));
            }
            let count: u64 = count
                .parse()
                .map_err(|_| Error::format("vocabulary", format!("line {}: bad count", lineno + 2)))?;
            if gram.is_empty() || ngram_order(gram) > max_n {
                return Err(Error::format("vocabulary", format!("line {}: bad n-gram", lineno + 2)));
            }
            ranked.push((gram.to_string(), count));
        }
        let cap = ranked.len().max(1);
        Ok(Self::from_ranked(ranked, max_n, cap))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &[&str]) -> TokenSequence {
        TokenSequence {
            tokens: s.iter().map(|t| t.to_string()).collect(),
        }
    }

    #[test]
    fn tokenize_table_message() {
        let got = tokenize("Did you manage to print the document?");
        assert_eq!(got, toks(&["did", "you", "manage", "to", "print", "the", "document", "?"]));
    }

    #[test]
    fn tokenize_empty() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("   \n\t").is_empty());
    }

    #[test]
    fn tokenize_special_tokens() {
        assert_eq!(tokenize("visit http://x.co now"), toks(&["visit", URL, "now"]));
        assert_eq!(tokenize("see www.example.com."), toks(&["see", URL, "."]));
        assert_eq!(tokenize("mail Bob.Smith@Example.org!"), toks(&["mail", EMAIL, "!"]));
        assert_eq!(tokenize("call 555-123-4567 today"), toks(&["call", PHONE, "today"]));
        assert_eq!(tokenize("call (555) 123 4567"), toks(&["call", PHONE]));
        assert_eq!(tokenize("ring 5551234"), toks(&["ring", PHONE]));
        assert_eq!(tokenize("i have 3 kids"), toks(&["i", "have", NUM, "kids"]));
        assert_eq!(tokenize("pay 3.50, or 12"), toks(&["pay", NUM, ",", "or", NUM]));
        assert_eq!(tokenize("pages 3-4"), toks(&["pages", NUM, "-", NUM]));
    }

    #[test]
    fn tokenize_punctuation_and_case() {
        assert_eq!(tokenize("Yes, I did."), toks(&["yes", ",", "i", "did", "."]));
        assert_eq!(tokenize("It's done!!"), toks(&["it's", "done", "!", "!"]));
        assert_eq!(tokenize("a\u{1}b"), toks(&["a", "b"]));
    }

    #[test]
    fn strip_quoted_drops_reply_lines() {
        let body = "Sounds good.\nOn Mon, Jan 1, Alice wrote:\n> are we on?\n>> older\nSee you";
        assert_eq!(strip_quoted(body), "Sounds good.\nSee you");
    }

    #[test]
    fn ngrams_small_cases() {
        assert_eq!(extract_ngrams(&toks(&["a", "b", "c"]), 2), vec!["a", "b", "c", "a b", "b c"]);
        assert_eq!(extract_ngrams(&toks(&["a"]), 2), vec!["a"]);
        assert!(extract_ngrams(&toks(&[]), 3).is_empty());
        assert_eq!(extract_ngrams(&toks(&["a", "a"]), 1), vec!["a", "a"]);
    }

    #[test]
    fn vocabulary_frequency_order() {
        let v = NGramVocabulary::build(["a a b"], 1, 1, 1).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.id("a"), Some(0));
        assert_eq!(v.count(0), Some(2));
    }

    #[test]
    fn vocabulary_min_count_filters_all() {
        let v = NGramVocabulary::build(["a b"], 2, 10, 2).unwrap();
        assert!(v.is_empty());
    }

    #[test]
    fn vocabulary_empty_corpus_is_valid() {
        let v = NGramVocabulary::build(Vec::<String>::new(), 2, 10, 1).unwrap();
        assert!(v.is_empty());
    }

    #[test]
    fn vocabulary_rejects_bad_config() {
        assert!(NGramVocabulary::build(["a"], 0, 10, 1).is_err());
        assert!(NGramVocabulary::build(["a"], 1, 0, 1).is_err());
        assert!(NGramVocabulary::build(["a"], 1, 10, 0).is_err());
    }

    #[test]
    fn vocabulary_ties_break_lexicographically() {
        let v = NGramVocabulary::build(["c b a"], 1, 2, 1).unwrap();
        assert_eq!(v.ngram(0), Some("a"));
        assert_eq!(v.ngram(1), Some("b"));
        assert_eq!(v.id("c"), None);
    }

    /// Exhaustive count-and-sort reference for vocabulary construction.
    fn brute_force_vocab(corpus: &[String], max_n: usize, cap: usize, min_count: u64) -> Vec<(String, u64)> {
        let mut all: Vec<String> = Vec::new();
        for text in corpus {
            let t: Vec<String> = text.split_whitespace().map(str::to_string).collect();
            for n in 1..=max_n {
                for i in 0..t.len().saturating_sub(n - 1) {
                    all.push(t[i..i + n].join(" "));
                }
            }
        }
        all.sort();
        let mut counted: Vec<(String, u64)> = Vec::new();
        for g in all {
            match counted.last_mut() {
                Some((last, c)) if *last == g => *c += 1,
                _ => counted.push((g, 1)),
            }
        }
        counted.retain(|(_, c)| *c >= min_count);
        counted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        counted.truncate(cap);
        counted
    }

    fn synthetic_corpus(n: usize) -> Vec<String> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let words: Vec<String> = (0..300).map(|i| format!("w{}x", i)).collect();
        (0..n)
            .map(|_| {
                let len = rng.random_range(1..12);
                (0..len)
                    .map(|_| {
                        // Skewed word distribution so frequencies differ.
                        let r: f64 = rng.random();
                        words[((r * r) * words.len() as f64) as usize].clone()
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect()
    }

    #[test]
    fn vocabulary_matches_brute_force_oracle() {
        let corpus = synthetic_corpus(1000);
        let vocab = NGramVocabulary::build(&corpus, 2, 500, 1).unwrap();
        let oracle = brute_force_vocab(&corpus, 2, 500, 1);
        assert_eq!(vocab.len(), 500);
        assert_eq!(oracle.len(), 500);
        for (id, (gram, count)) in oracle.iter().enumerate() {
            assert_eq!(vocab.ngram(id as u32), Some(gram.as_str()));
            assert_eq!(vocab.count(id as u32), Some(*count));
        }
    }

    #[test]
    fn vocabulary_cap_boundary_property() {
        let corpus = synthetic_corpus(300);
        let vocab = NGramVocabulary::build(&corpus, 2, 120, 1).unwrap();
        let full = brute_force_vocab(&corpus, 2, usize::MAX, 1);
        let min_kept = (0..vocab.len() as u32).map(|i| vocab.count(i).unwrap()).min().unwrap();
        for (gram, count) in &full {
            if vocab.id(gram).is_none() {
                assert!(*count <= min_kept, "{gram} discarded with count {count} > {min_kept}");
            }
        }
    }

    #[test]
    fn vocabulary_build_is_deterministic() {
        let corpus = synthetic_corpus(200);
        let a = NGramVocabulary::build(&corpus, 2, 400, 1).unwrap();
        let b = NGramVocabulary::build(&corpus, 2, 400, 1).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn vocabulary_text_roundtrip() {
        let corpus = synthetic_corpus(50);
        let v = NGramVocabulary::build(&corpus, 2, 100, 1).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("#vocab v1 max_n=2\n"));
        let back = NGramVocabulary::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.len(), v.len());
    }

    #[test]
    fn vocabulary_text_rejects_garbage() {
        assert!(NGramVocabulary::from_text("").is_err());
        assert!(NGramVocabulary::from_text("#vocab v2 max_n=2\n").is_err());
        assert!(NGramVocabulary::from_text("#vocab v1 max_n=1\na\t1\t3\n").is_err());
        assert!(NGramVocabulary::from_text("#vocab v1 max_n=1\na b\t0\t3\n").is_err());
    }

    #[test]
    fn featurize_counts_and_drops() {
        let v = NGramVocabulary::build(["a"], 1, 10, 1).unwrap();
        let bag = v.featurize("a a", Field::Body);
        assert_eq!(bag.items, vec![(0, 2)]);
        assert!(v.featurize("zzz qqq", Field::Body).is_empty());
    }

    #[test]
    fn featurize_table_message_is_filtered_ngrams() {
        let corpus = [
            "did you print it ?",
            "did you manage to send the document ?",
            "print the document please",
            "the document is ready",
        ];
        let v = NGramVocabulary::build(corpus, 2, 1000, 2).unwrap();
        let msg = "Did you manage to print the document?";
        let bag = v.featurize(msg, Field::Body);
        let mut expect: HashMap<u32, u32> = HashMap::new();
        for g in extract_ngrams(&tokenize(msg), 2) {
            if let Some(id) = v.id(&g) {
                *expect.entry(id).or_default() += 1;
            }
        }
        let mut expect: Vec<(u32, u32)> = expect.into_iter().collect();
        expect.sort();
        assert_eq!(bag.items, expect);
        // "did you", "the document", "document ?" survive min_count 2.
        assert!(v.id("the document").is_some());
        assert!(bag.items.iter().any(|&(id, _)| Some(id) == v.id("the document")));
    }

    proptest! {
        #[test]
        fn featurize_is_filtered_extraction(words in proptest::collection::vec("[a-e]{1,2}|[,.?!]", 0..20)) {
            let text = words.join(" ");
            let vocab = NGramVocabulary::build(["a b c d e", "a a b b", "aa bb . ,"], 2, 50, 1).unwrap();
            let bag = vocab.featurize(&text, Field::Body);
            let ids: Vec<u32> = extract_ngrams(&tokenize(&text), 2).iter().filter_map(|g| vocab.id(g)).collect();
            prop_assert_eq!(bag, FeatureBag::from_ids(ids, Field::Body));
        }

        #[test]
        fn tokenize_is_idempotent_on_own_output(text in "[a-zA-Z0-9 ,.!?'@:/\\-]{0,60}") {
            let first = tokenize(&text);
            prop_assume!(!first.iter().any(is_special));
            let again = tokenize(&first.tokens.join(" "));
            prop_assert_eq!(again, first);
        }

        #[test]
        fn tokens_are_nonempty(text in "\\PC{0,80}") {
            for t in tokenize(&text).iter() {
                prop_assert!(!t.is_empty());
                prop_assert!(!t.contains(NGRAM_SEPARATOR));
            }
        }
    }
}
