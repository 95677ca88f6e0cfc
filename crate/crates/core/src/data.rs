//! Message/response records, their featurized form, and a seeded synthetic
//! corpus generator.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{strip_quoted, Field, FeatureBag, NGramVocabulary};

/// One JSON-lines corpus record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

impl Record {
    pub fn pair(body: impl Into<String>, subject: Option<String>, response: impl Into<String>) -> Self {
        Record {
            body: body.into(),
            subject,
            response: Some(response.into()),
        }
    }

    /// Body with quoted reply text removed.
    pub fn clean_body(&self) -> String {
        strip_quoted(&self.body)
    }

    /// Every text field, in the order body, subject, response.
    pub fn texts(&self) -> impl Iterator<Item = String> + '_ {
        std::iter::once(self.clean_body())
            .chain(self.subject.iter().cloned())
            .chain(self.response.iter().cloned())
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(std::io::BufReader::new(file))
}

pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::format("corpus record", format!("line {}: {e}", lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Input features in a fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureLayout {
    /// Body only (M = 1).
    Body,
    /// Body then subject (M = 2); a missing subject is an empty bag.
    BodySubject,
}

impl FeatureLayout {
    pub fn num_features(self) -> usize {
        match self {
            FeatureLayout::Body => 1,
            FeatureLayout::BodySubject => 2,
        }
    }

    pub fn from_num_features(m: usize) -> Result<Self> {
        match m {
            1 => Ok(FeatureLayout::Body),
            2 => Ok(FeatureLayout::BodySubject),
            _ => Err(Error::Config(format!("unsupported feature count {m}"))),
        }
    }

    pub fn featurize_input(self, body: &str, subject: Option<&str>, vocab: &NGramVocabulary) -> Vec<FeatureBag> {
        let body_bag = vocab.featurize(&strip_quoted(body), Field::Body);
        match self {
            FeatureLayout::Body => vec![body_bag],
            FeatureLayout::BodySubject => {
                let subject_bag = match subject {
                    Some(s) => vocab.featurize(s, Field::Subject),
                    None => FeatureBag::empty(Field::Subject),
                };
                vec![body_bag, subject_bag]
            }
        }
    }
}

/// A featurized (input, response) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<FeatureBag>,
    pub response: FeatureBag,
    pub response_text: String,
}

pub fn featurize_records(records: &[Record], vocab: &NGramVocabulary, layout: FeatureLayout) -> Result<Vec<Example>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let response = r
                .response
                .as_deref()
                .ok_or_else(|| Error::format("corpus record", format!("record {} has no response", i + 1)))?;
            Ok(Example {
                input: layout.featurize_input(&r.body, r.subject.as_deref(), vocab),
                response: vocab.featurize(response, Field::Response),
                response_text: response.to_string(),
            })
        })
        .collect()
}

/// Parameters of the topic-clustered synthetic corpus.
///
/// Each topic owns a pool of content words and several intents. A message
/// mixes topic words, intent keywords and shared filler; its response is an
/// intent-specific reply phrase that echoes one of the message's topic words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub pairs: usize,
    pub topics: usize,
    pub intents_per_topic: usize,
    pub words_per_topic: usize,
    pub filler_words: usize,
    pub reply_variants: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            pairs: 20_000,
            topics: 50,
            intents_per_topic: 4,
            words_per_topic: 24,
            filler_words: 150,
            reply_variants: 3,
            seed: 7,
        }
    }
}

/// Distinct pronounceable pseudo-words.
fn pseudo_words(rng: &mut ChaCha8Rng, count: usize, seen: &mut HashSet<String>) -> Vec<String> {
    const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr", "br", "pl"];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).unwrap());
            w.push_str(VOWELS.choose(rng).unwrap());
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

struct Intent {
    keywords: Vec<String>,
    replies: Vec<Vec<String>>,
}

struct Topic {
    words: Vec<String>,
    subject_words: Vec<String>,
    intents: Vec<Intent>,
}

/// Generates `cfg.pairs` records. Deterministic per seed.
pub fn synthetic_corpus(cfg: &SyntheticConfig) -> Vec<Record> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = HashSet::new();
    let filler = pseudo_words(&mut rng, cfg.filler_words.max(1), &mut seen);
    let generic_reply = pseudo_words(&mut rng, 12, &mut seen);
    let topics: Vec<Topic> = (0..cfg.topics.max(1))
        .map(|_| {
            let words = pseudo_words(&mut rng, cfg.words_per_topic.max(2), &mut seen);
            let subject_words = pseudo_words(&mut rng, 4, &mut seen);
            let intents = (0..cfg.intents_per_topic.max(1))
                .map(|_| {
                    let keywords = pseudo_words(&mut rng, 2, &mut seen);
                    let reply_words = pseudo_words(&mut rng, 3, &mut seen);
                    let replies = (0..cfg.reply_variants.max(1))
                        .map(|_| {
                            let mut phrase: Vec<String> = reply_words.choose_multiple(&mut rng, 2).cloned().collect();
                            phrase.insert(0, generic_reply.choose(&mut rng).unwrap().clone());
                            phrase
                        })
                        .collect();
                    Intent { keywords, replies }
                })
                .collect();
            Topic {
                words,
                subject_words,
                intents,
            }
        })
        .collect();

    (0..cfg.pairs)
        .map(|_| {
            let topic = topics.choose(&mut rng).unwrap();
            let intent = topic.intents.choose(&mut rng).unwrap();
            let n_topic = rng.random_range(3..=5);
            let content: Vec<&String> = topic.words.choose_multiple(&mut rng, n_topic).collect();
            let mut body: Vec<String> = content.iter().map(|w| (*w).clone()).collect();
            body.push(intent.keywords.choose(&mut rng).unwrap().clone());
            for _ in 0..rng.random_range(3..=7) {
                body.push(filler.choose(&mut rng).unwrap().clone());
            }
            body.shuffle(&mut rng);
            let mut text = body.join(" ");
            text.push_str(if rng.random_bool(0.5) { " ?" } else { " ." });

            let subject = if rng.random_bool(0.8) {
                let mut s = vec![topic.subject_words.choose(&mut rng).unwrap().clone()];
                s.push(content[0].clone());
                Some(s.join(" "))
            } else {
                None
            };

            let mut reply = intent.replies.choose(&mut rng).unwrap().clone();
            reply.push((*content.choose(&mut rng).unwrap()).clone());
            Record::pair(text, subject, reply.join(" "))
        })
        .collect()
}
