//! Precomputed response sets and the three suggestion architectures:
//! exhaustive joint scoring, two-pass (dot-product M-best then joint
//! rescoring) and single-pass (dot product through the HQ index).

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bias::{lm_logprob, BigramLM};
use crate::data::FeatureLayout;
use crate::encoder::{DotProductEncoder, JointScorer};
use crate::error::{check_dim, Error, Result};
use crate::hq::{exact_top_n, HqIndex, SearchParams};
use crate::io::{read_file, sha256, write_file, ContentHash, Reader, Writer};
use crate::numeric::dot_f32;
use crate::text::{FeatureBag, Field, NGramVocabulary};
use crate::topk::TopK;

pub const RESPONSES_MAGIC: &[u8; 4] = b"SRRS";
pub const RESPONSES_VERSION: u32 = 1;

pub const DEFAULT_N: usize = 100;
pub const DEFAULT_M: usize = 500;

/// Hashes of the artifacts a response set was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Provenance {
    pub vocab: ContentHash,
    pub model: ContentHash,
    /// All zero when no language model was used.
    pub lm: ContentHash,
}

/// The fixed response set with its encodings and prior log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSet {
    pub responses: Vec<String>,
    pub bags: Vec<FeatureBag>,
    pub dim: usize,
    /// `n x dim`, row-major.
    pub encodings: Vec<f32>,
    /// `log P_LM(y)`; all zero without a language model.
    pub lm_logprob: Vec<f32>,
    pub provenance: Provenance,
}

/// Encodes every response through the response side of `encoder`.
pub fn precompute_responses(
    responses: Vec<String>,
    vocab: &NGramVocabulary,
    encoder: &DotProductEncoder<f32>,
    lm: Option<&BigramLM>,
    provenance: Provenance,
) -> Result<ResponseSet> {
    if responses.is_empty() {
        return Err(Error::Empty("response set"));
    }
    let bags: Vec<FeatureBag> = responses.iter().map(|r| vocab.featurize(r, Field::Response)).collect();
    let dim = encoder.output_dim();
    let mut encodings = Vec::with_capacity(responses.len() * dim);
    for b in &bags {
        encodings.extend(encoder.encode_response(b)?.h);
    }
    let lm_logprob = match lm {
        Some(lm) => responses.iter().map(|r| lm_logprob(r, lm) as f32).collect(),
        None => vec![0.0; responses.len()],
    };
    ResponseSet::from_parts(responses, bags, dim, encodings, lm_logprob, provenance)
}

impl ResponseSet {
    pub fn from_parts(
        responses: Vec<String>,
        bags: Vec<FeatureBag>,
        dim: usize,
        encodings: Vec<f32>,
        lm_logprob: Vec<f32>,
        provenance: Provenance,
    ) -> Result<Self> {
        let n = responses.len();
        if n == 0 || dim == 0 {
            return Err(Error::Empty("response set"));
        }
        check_dim("response bags", n, bags.len())?;
        check_dim("response encodings", n * dim, encodings.len())?;
        check_dim("response log-probabilities", n, lm_logprob.len())?;
        if encodings.iter().chain(&lm_logprob).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response set entries".into()));
        }
        Ok(ResponseSet {
            responses,
            bags,
            dim,
            encodings,
            lm_logprob,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.encodings[i * self.dim..(i + 1) * self.dim]
    }

    /// Hash of the serialized set; an index built from it records this value.
    pub fn content_hash(&self) -> Result<ContentHash> {
        Ok(sha256(&self.to_bytes()?))
    }

    /// ```text
    /// "SRRS" | version u32 | n u32 | dim u32 | vocab, model, lm sha-256 [3 x 32]
    /// | per response: text (u32 length + utf-8), bag size u32, (id u32, count u32)*
    /// | encodings f32 (n x dim) | log-probabilities f32 (n)
    /// ```
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(RESPONSES_MAGIC).u32(RESPONSES_VERSION);
        w.len_u32(self.len())?.len_u32(self.dim)?;
        w.bytes(&self.provenance.vocab).bytes(&self.provenance.model).bytes(&self.provenance.lm);
        for (r, b) in self.responses.iter().zip(&self.bags) {
            w.str(r)?;
            w.len_u32(b.items.len())?;
            for &(id, c) in &b.items {
                w.u32(id).u32(c);
            }
        }
        w.f32s(&self.encodings).f32s(&self.lm_logprob);
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("response set", bytes);
        r.expect_magic(RESPONSES_MAGIC)?;
        let version = r.u32()?;
        if version != RESPONSES_VERSION {
            return Err(Error::format("response set", format!("unsupported version {version}")));
        }
        let n = r.usize()?;
        let dim = r.usize()?;
        let provenance = Provenance {
            vocab: r.hash()?,
            model: r.hash()?,
            lm: r.hash()?,
        };
        let mut responses = Vec::with_capacity(n.min(1 << 20));
        let mut bags = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            responses.push(r.str()?);
            let len = r.usize()?;
            let items = (0..len)
                .map(|_| Ok((r.u32()?, r.u32()?)))
                .collect::<Result<Vec<_>>>()?;
            bags.push(FeatureBag {
                items,
                source_field: Field::Response,
            });
        }
        let encodings = r.f32s(n * dim)?;
        let lm_logprob = r.f32s(n)?;
        r.finish()?;
        Self::from_parts(responses, bags, dim, encodings, lm_logprob, provenance)
    }
}

pub fn save_responses(path: &Path, rs: &ResponseSet) -> Result<()> {
    write_file(path, &rs.to_bytes()?)
}

pub fn load_responses(path: &Path) -> Result<ResponseSet> {
    ResponseSet::from_bytes(&read_file(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Exhaustive,
    TwoPass,
    #[default]
    SinglePass,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exhaustive" => Ok(Mode::Exhaustive),
            "two_pass" => Ok(Mode::TwoPass),
            "single_pass" => Ok(Mode::SinglePass),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

fn default_n() -> usize {
    DEFAULT_N
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestRequest {
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(rename = "N", alias = "n", default = "default_n")]
    pub n: usize,
    /// First-pass width of two-pass serving; defaults to [`DEFAULT_M`].
    #[serde(rename = "M", alias = "m", default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Stand-in for a triggering model: `false` returns no suggestions.
    #[serde(default = "default_true")]
    pub trigger: bool,
}

impl SuggestRequest {
    pub fn new(body: impl Into<String>, mode: Mode, n: usize) -> Self {
        SuggestRequest {
            body: body.into(),
            subject: None,
            mode,
            n,
            m: None,
            trigger: true,
        }
    }

    pub fn first_pass_width(&self) -> usize {
        self.m.unwrap_or(DEFAULT_M.max(self.n))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("N must be at least 1".into()));
        }
        if self.mode == Mode::TwoPass && self.first_pass_width() < self.n {
            return Err(Error::Config(format!("M = {} is smaller than N = {}", self.first_pass_width(), self.n)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub id: u32,
    pub response: String,
    /// `S_m`: joint or dot-product score.
    pub model_score: f64,
    /// `alpha * log P_LM(y)`.
    pub bias: f64,
    /// `S_f = S_m + alpha * log P_LM(y)`.
    pub final_score: f64,
}

/// Stage latencies in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    /// Featurization plus the input side of the model.
    pub encode_us: f64,
    /// Dot-product first pass or index search.
    pub search_us: f64,
    /// Joint scoring.
    pub rescore_us: f64,
    pub total_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestResult {
    pub suggestions: Vec<Suggestion>,
    pub timing: Timing,
}

/// Single-pass search settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServeConfig {
    pub alpha: f32,
    pub retrieve_m: usize,
    pub rerank: bool,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            alpha: 0.0,
            retrieve_m: 300,
            rerank: true,
        }
    }
}

/// Immutable serving state.
#[derive(Debug, Clone)]
pub struct Suggester {
    vocab: NGramVocabulary,
    layout: FeatureLayout,
    encoder: DotProductEncoder<f32>,
    joint: Option<JointScorer<f32>>,
    joint_embeddings: Vec<Vec<f32>>,
    responses: ResponseSet,
    index: Option<HqIndex>,
    pub config: ServeConfig,
}

fn micros(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e6
}

fn stale(what: &str) -> Error {
    Error::StaleArtifact { path: PathBuf::from(what) }
}

impl Suggester {
    /// Checks that the response set matches `encoder` and that `index`, when
    /// given, was built from the response set.
    pub fn new(
        vocab: NGramVocabulary,
        encoder: DotProductEncoder<f32>,
        joint: Option<JointScorer<f32>>,
        responses: ResponseSet,
        index: Option<HqIndex>,
        config: ServeConfig,
    ) -> Result<Self> {
        if !(config.alpha >= 0.0 && config.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and non-negative, got {}", config.alpha)));
        }
        let layout = FeatureLayout::from_num_features(encoder.num_features())?;
        if responses.dim != encoder.output_dim() {
            return Err(stale("response set"));
        }
        if let Some(j) = &joint {
            if j.num_features() != encoder.num_features() {
                return Err(Error::Config("joint scorer and encoder disagree on features".into()));
            }
        }
        if let Some(idx) = &index {
            if idx.source_hash != responses.content_hash()? || idx.n != responses.len() {
                return Err(stale("index"));
            }
            if config.alpha != 0.0 && idx.bias.is_none() {
                return Err(Error::Config("biased serving needs an index built with response priors".into()));
            }
        }
        let joint_embeddings = match &joint {
            Some(j) => responses
                .bags
                .iter()
                .map(|b| j.embed_response(b))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        Ok(Suggester {
            vocab,
            layout,
            encoder,
            joint,
            joint_embeddings,
            responses,
            index,
            config,
        })
    }

    pub fn responses(&self) -> &ResponseSet {
        &self.responses
    }

    pub fn featurize(&self, req: &SuggestRequest) -> Vec<FeatureBag> {
        self.layout.featurize_input(&req.body, req.subject.as_deref(), &self.vocab)
    }

    /// Query encoding `h_x`.
    pub fn encode_query(&self, req: &SuggestRequest) -> Result<Vec<f32>> {
        Ok(self.encoder.encode_input(&self.featurize(req))?.h)
    }

    fn bias_term(&self, i: usize) -> f32 {
        if self.config.alpha == 0.0 {
            return 0.0;
        }
        self.config.alpha * self.responses.lm_logprob[i]
    }

    fn joint(&self) -> Result<&JointScorer<f32>> {
        self.joint
            .as_ref()
            .ok_or_else(|| Error::Config("this mode needs a joint scoring model".into()))
    }

    fn joint_score(&self, x_embs: &[Vec<f32>], i: usize) -> Result<f32> {
        Ok(self.joint()?.trace_embedded(x_embs, &self.joint_embeddings[i])?.score)
    }

    fn suggestion(&self, id: u32, model_score: f32) -> Suggestion {
        let i = id as usize;
        let bias = self.bias_term(i);
        Suggestion {
            id,
            response: self.responses.responses[i].clone(),
            model_score: model_score as f64,
            bias: bias as f64,
            final_score: (model_score + bias) as f64,
        }
    }

    pub fn suggest(&self, req: &SuggestRequest) -> Result<SuggestResult> {
        req.validate()?;
        let start = Instant::now();
        let mut timing = Timing::default();
        let suggestions = if !req.trigger {
            Vec::new()
        } else {
            match req.mode {
                Mode::Exhaustive => self.exhaustive(req, &mut timing)?,
                Mode::TwoPass => self.two_pass(req, &mut timing)?,
                Mode::SinglePass => self.single_pass(req, &mut timing)?,
            }
        };
        timing.total_us = micros(start);
        Ok(SuggestResult { suggestions, timing })
    }

    fn rescore(&self, x_embs: &[Vec<f32>], ids: impl Iterator<Item = u32>, n: usize) -> Result<Vec<Suggestion>> {
        let mut model = Vec::new();
        let mut top = TopK::new(n);
        for id in ids {
            let s = self.joint_score(x_embs, id as usize)?;
            model.push((id, s));
            top.push(id, s + self.bias_term(id as usize));
        }
        model.sort_unstable_by_key(|p| p.0);
        Ok(top
            .into_sorted()
            .into_iter()
            .map(|(id, _)| {
                let s = model[model.binary_search_by_key(&id, |p| p.0).expect("scored id")].1;
                self.suggestion(id, s)
            })
            .collect())
    }

    fn exhaustive(&self, req: &SuggestRequest, timing: &mut Timing) -> Result<Vec<Suggestion>> {
        let t = Instant::now();
        let x_embs = self.joint()?.embed_input(&self.featurize(req))?;
        timing.encode_us = micros(t);
        let t = Instant::now();
        let out = self.rescore(&x_embs, 0..self.responses.len() as u32, req.n);
        timing.rescore_us = micros(t);
        out
    }

    /// Top `m` of `R h_x + alpha log P` by exact dot products.
    fn first_pass(&self, hx: &[f32], m: usize) -> Vec<(u32, f32)> {
        let a = self.config.alpha;
        exact_top_n(&self.responses.encodings, self.responses.dim, hx, m, a, Some(&self.responses.lm_logprob))
    }

    fn two_pass(&self, req: &SuggestRequest, timing: &mut Timing) -> Result<Vec<Suggestion>> {
        let joint = self.joint()?;
        let t = Instant::now();
        let bags = self.featurize(req);
        let hx = self.encoder.encode_input(&bags)?.h;
        let x_embs = joint.embed_input(&bags)?;
        timing.encode_us = micros(t);
        let t = Instant::now();
        let first = self.first_pass(&hx, req.first_pass_width());
        timing.search_us = micros(t);
        let t = Instant::now();
        let out = self.rescore(&x_embs, first.into_iter().map(|p| p.0), req.n);
        timing.rescore_us = micros(t);
        out
    }

    fn single_pass(&self, req: &SuggestRequest, timing: &mut Timing) -> Result<Vec<Suggestion>> {
        let idx = self
            .index
            .as_ref()
            .ok_or_else(|| Error::Config("single-pass serving needs an index".into()))?;
        let t = Instant::now();
        let hx = self.encode_query(req)?;
        timing.encode_us = micros(t);
        let t = Instant::now();
        let params = SearchParams {
            n_results: req.n,
            retrieve_m: self.config.retrieve_m,
            rerank: self.config.rerank,
            alpha: self.config.alpha,
        };
        let hits = idx.search(&hx, &params)?;
        let out = hits
            .into_iter()
            .map(|(id, s)| {
                let i = id as usize;
                let bias = if idx.bias.is_some() { self.bias_term(i) } else { 0.0 };
                Suggestion {
                    id,
                    response: self.responses.responses[i].clone(),
                    model_score: (s - bias) as f64,
                    bias: bias as f64,
                    final_score: s as f64,
                }
            })
            .collect();
        timing.search_us = micros(t);
        Ok(out)
    }

    /// Exhaustive dot-product ranking of the whole response set.
    pub fn exhaustive_dot(&self, req: &SuggestRequest) -> Result<Vec<Suggestion>> {
        req.validate()?;
        let hx = self.encode_query(req)?;
        Ok(self
            .first_pass(&hx, req.n)
            .into_iter()
            .map(|(id, _)| self.suggestion(id, dot_f32(&hx, self.responses.row(id as usize))))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bias::train_lm;
    use crate::encoder::{DotConfig, JointConfig};
    use crate::hq::{train_hq, HQConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        vocab: NGramVocabulary,
        encoder: DotProductEncoder<f32>,
        joint: JointScorer<f32>,
        rs: ResponseSet,
    }

    fn words(i: usize) -> String {
        const W: [&str; 12] = ["yes", "no", "thanks", "sure", "later", "maybe", "great", "ok", "see", "you", "soon", "fine"];
        format!("{} {} {}", W[i % 12], W[(i / 12) % 12], W[(i * 7 + 3) % 12])
    }

    fn fixture(n: usize, lm: bool) -> Fixture {
        let responses: Vec<String> = (0..n).map(words).collect();
        let vocab = NGramVocabulary::build(responses.iter().chain(["hello there friend".to_string()].iter()), 2, 1000, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dcfg = DotConfig {
            vocab_size: vocab.len(),
            embedding_dim: 8,
            features: 2,
            tower: vec![8],
            fusion: vec![8],
        };
        let encoder = DotProductEncoder::<f32>::new(&dcfg, &mut rng).unwrap();
        let jcfg = JointConfig {
            vocab_size: vocab.len(),
            embedding_dim: 8,
            features: 2,
            tower: vec![8],
            final_layers: vec![4],
        };
        let joint = JointScorer::<f32>::new(&jcfg, &mut rng).unwrap();
        let lm = lm.then(|| train_lm(&responses, 0.1).unwrap());
        let rs = precompute_responses(responses, &vocab, &encoder, lm.as_ref(), Provenance::default()).unwrap();
        Fixture {
            vocab,
            encoder,
            joint,
            rs,
        }
    }

    fn index_for(rs: &ResponseSet, seed: u64) -> HqIndex {
        let mut cfg = HQConfig::desk(rs.dim);
        cfg.vq_size = 8;
        cfg.num_subspaces = 2;
        cfg.pq_size = 16;
        cfg.outer_iterations = 2;
        let (books, _) = train_hq(&rs.encodings, &cfg, seed).unwrap();
        HqIndex::build(books, &rs.encodings, Some(rs.lm_logprob.clone()), true, 2, rs.content_hash().unwrap()).unwrap()
    }

    fn suggester(f: &Fixture, index: bool, alpha: f32) -> Suggester {
        let idx = index.then(|| index_for(&f.rs, 1));
        let cfg = ServeConfig {
            alpha,
            retrieve_m: f.rs.len(),
            rerank: true,
        };
        Suggester::new(f.vocab.clone(), f.encoder.clone(), Some(f.joint.clone()), f.rs.clone(), idx, cfg).unwrap()
    }

    fn req(mode: Mode, n: usize) -> SuggestRequest {
        SuggestRequest {
            subject: Some("see you".into()),
            ..SuggestRequest::new("thanks are you free later", mode, n)
        }
    }

    fn ids(s: &[Suggestion]) -> Vec<u32> {
        s.iter().map(|x| x.id).collect()
    }

    #[test]
    fn single_response_set_is_its_encoding() {
        let f = fixture(1, false);
        assert_eq!(f.rs.len(), 1);
        let direct = f.encoder.encode_response(&f.vocab.featurize(&words(0), Field::Response)).unwrap().h;
        assert_eq!(f.rs.encodings, direct);
        assert!(precompute_responses(vec![], &f.vocab, &f.encoder, None, Provenance::default()).is_err());
    }

    #[test]
    fn rows_match_one_at_a_time_encoding() {
        let f = fixture(200, true);
        for i in [0, 17, 144, 199] {
            let h = f.encoder.encode_response(&f.vocab.featurize(&f.rs.responses[i], Field::Response)).unwrap().h;
            assert_eq!(f.rs.row(i), &h[..]);
        }
        // words(i) repeats with period 144.
        assert_eq!(f.rs.row(3), f.rs.row(147));
    }

    #[test]
    fn response_file_roundtrip() {
        let f = fixture(30, true);
        let bytes = f.rs.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SRRS");
        let back = ResponseSet::from_bytes(&bytes).unwrap();
        assert_eq!(back, f.rs);
        assert_eq!(back.content_hash().unwrap(), f.rs.content_hash().unwrap());
        assert!(ResponseSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn exhaustive_returns_everything_ranked() {
        let f = fixture(20, true);
        let s = suggester(&f, false, 0.5);
        let out = s.suggest(&req(Mode::Exhaustive, 100)).unwrap().suggestions;
        assert_eq!(out.len(), 20);
        let xe = f.joint.embed_input(&s.featurize(&req(Mode::Exhaustive, 1))).unwrap();
        let scores: Vec<f32> = (0..20)
            .map(|i| {
                let ye = f.joint.embed_response(&f.rs.bags[i]).unwrap();
                f.joint.trace_embedded(&xe, &ye).unwrap().score + 0.5 * f.rs.lm_logprob[i]
            })
            .collect();
        assert_eq!(ids(&out), ids_of(crate::topk::full_sort(&scores)));
        for w in out.windows(2) {
            assert!(w[0].final_score > w[1].final_score || (w[0].final_score == w[1].final_score && w[0].id < w[1].id));
        }
        for x in &out {
            assert!((x.final_score - (x.model_score + x.bias)).abs() < 1e-5);
        }
    }

    fn ids_of(v: Vec<(u32, f32)>) -> Vec<u32> {
        v.into_iter().map(|p| p.0).collect()
    }

    #[test]
    fn unbiased_exhaustive_orders_by_joint_score() {
        let f = fixture(20, true);
        let s = suggester(&f, false, 0.0);
        let out = s.suggest(&req(Mode::Exhaustive, 20)).unwrap().suggestions;
        for w in out.windows(2) {
            assert!(w[0].model_score >= w[1].model_score);
        }
        assert!(out.iter().all(|x| x.bias == 0.0));
    }

    #[test]
    fn two_pass_at_full_width_equals_exhaustive() {
        let f = fixture(300, true);
        for alpha in [0.0, 0.25] {
            let s = suggester(&f, false, alpha);
            let ex = s.suggest(&req(Mode::Exhaustive, 10)).unwrap().suggestions;
            let two = s
                .suggest(&SuggestRequest {
                    m: Some(300),
                    ..req(Mode::TwoPass, 10)
                })
                .unwrap()
                .suggestions;
            assert_eq!(two, ex);
        }
    }

    #[test]
    fn two_pass_matches_naive_composition() {
        let f = fixture(300, true);
        let s = suggester(&f, false, 0.1);
        let r = SuggestRequest {
            m: Some(40),
            ..req(Mode::TwoPass, 5)
        };
        let got = s.suggest(&r).unwrap().suggestions;
        // Naive: score everything, sort, keep 40, rescore, sort, keep 5.
        let bags = s.featurize(&r);
        let hx = f.encoder.encode_input(&bags).unwrap().h;
        let mut first: Vec<(f32, u32)> = (0..300)
            .map(|i| (dot_f32(&hx, f.rs.row(i)) + 0.1 * f.rs.lm_logprob[i], i as u32))
            .collect();
        first.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut second: Vec<(f32, u32)> = first[..40]
            .iter()
            .map(|&(_, i)| {
                let (sc, _) = f.joint.score(&bags, &f.rs.bags[i as usize]).unwrap();
                (sc + 0.1 * f.rs.lm_logprob[i as usize], i)
            })
            .collect();
        second.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let want: Vec<u32> = second[..5].iter().map(|p| p.1).collect();
        assert_eq!(ids(&got), want);
    }

    #[test]
    fn two_pass_width_must_cover_n() {
        let f = fixture(20, false);
        let s = suggester(&f, false, 0.0);
        let bad = SuggestRequest {
            m: Some(3),
            ..req(Mode::TwoPass, 5)
        };
        assert!(s.suggest(&bad).is_err());
        assert!(s.suggest(&req(Mode::TwoPass, 0)).is_err());
    }

    #[test]
    fn single_pass_at_full_width_equals_exhaustive_dot() {
        let f = fixture(300, true);
        for alpha in [0.0, 0.5] {
            let s = suggester(&f, true, alpha);
            let r = req(Mode::SinglePass, 25);
            let got = s.suggest(&r).unwrap().suggestions;
            let want = s.exhaustive_dot(&r).unwrap();
            assert_eq!(ids(&got), ids(&want));
            for (a, b) in got.iter().zip(&want) {
                assert_eq!(a.final_score as f32, b.final_score as f32);
            }
        }
    }

    #[test]
    fn stale_index_is_rejected() {
        let f = fixture(50, false);
        let other = fixture(60, false);
        let idx = index_for(&other.rs, 1);
        let err = Suggester::new(f.vocab.clone(), f.encoder.clone(), None, f.rs.clone(), Some(idx), ServeConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::StaleArtifact { .. }), "{err}");
    }

    #[test]
    fn modes_are_deterministic_and_time_their_stages() {
        let f = fixture(200, true);
        let s = suggester(&f, true, 0.2);
        for mode in [Mode::Exhaustive, Mode::TwoPass, Mode::SinglePass] {
            let a = s.suggest(&req(mode, 10)).unwrap();
            let b = s.suggest(&req(mode, 10)).unwrap();
            assert_eq!(a.suggestions, b.suggestions);
            let t = a.timing;
            assert!(t.encode_us + t.search_us + t.rescore_us <= t.total_us);
        }
    }

    #[test]
    fn untriggered_request_returns_nothing() {
        let f = fixture(10, false);
        let s = suggester(&f, false, 0.0);
        let r = SuggestRequest {
            trigger: false,
            ..req(Mode::Exhaustive, 5)
        };
        assert!(s.suggest(&r).unwrap().suggestions.is_empty());
    }

    #[test]
    fn request_json_fields() {
        let r: SuggestRequest = serde_json::from_str(r#"{"body":"hi","mode":"two_pass","N":3,"M":9}"#).unwrap();
        assert_eq!((r.mode, r.n, r.m, r.trigger), (Mode::TwoPass, 3, Some(9), true));
        let d: SuggestRequest = serde_json::from_str(r#"{"body":"hi"}"#).unwrap();
        assert_eq!((d.mode, d.n, d.first_pass_width()), (Mode::SinglePass, 100, 500));
        let out = serde_json::to_value(SuggestResult {
            suggestions: vec![],
            timing: Timing::default(),
        })
        .unwrap();
        let keys: Vec<&String> = out["timing"].as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 4);
        for k in ["encode_us", "search_us", "rescore_us", "total_us"] {
            assert!(out["timing"].get(k).is_some());
        }
    }
}
