//! `reply`: command-line pipeline from corpus to served suggestions.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use reply_core::bias::{train_lm, BigramLM, DEFAULT_SMOOTHING};
use reply_core::data::{featurize_records, read_jsonl, synthetic_corpus, write_jsonl, FeatureLayout, Record, SyntheticConfig};
use reply_core::encoder::{load_model, save_model, AnyModel, DotConfig, DotProductEncoder, JointConfig, JointScorer, SavedModel};
use reply_core::eval::{
    ablation_report, gaussian_mixture, p_at_1, split_dataset, speed_recall_bench, write_ablation_csv, write_ablation_summary,
    write_bench_csv, AblationConfig, AblationSetup, BenchConfig, CandidateScorer, EvalConfig, ModelKind,
};
use reply_core::hq::{load_index, save_index, train_hq, HQConfig, HqIndex, TrainMode};
use reply_core::io::{file_hash, read_file, write_file, ContentHash};
use reply_core::manifest::{self, RunManifest};
use reply_core::serve::{
    load_responses, precompute_responses, save_responses, Mode, Provenance, ResponseSet, ServeConfig, SuggestRequest, Suggester,
};
use reply_core::text::{NGramVocabulary, DEFAULT_MAX_N, DEFAULT_MIN_COUNT, DEFAULT_SIZE_CAP};
use reply_core::train::{parse_key_values, train_with, write_loss_curve, LossKind, TrainFile, ENCODER_KEYS};
use reply_core::{Error, Result};

/// Held-out queries drawn alongside a surrogate database.
const SURROGATE_QUERIES: usize = 1100;

/// Keys other than the encoder keys that a `--config` file may set.
const OTHER_KEYS: &[&str] = &[
    "max_n",
    "size_cap",
    "min_count",
    "smoothing",
    "ratio",
    "vq_size",
    "subspaces",
    "pq_size",
    "hq_mode",
    "outer_iterations",
    "kmeans_iterations",
    "sgd_steps",
    "sgd_batch",
    "sgd_lr",
    "train_sample",
    "vq_beam",
    "retrieve_m",
    "rerank",
    "alpha",
    "num_candidates",
    "trials",
];

#[derive(Parser)]
#[command(name = "reply", version, about = "Response suggestion pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Key-value configuration file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run manifest to verify inputs against and record outputs in.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic topic corpus as JSON lines.
    GenerateCorpus {
        #[arg(long, default_value_t = 20_000)]
        pairs: usize,
        #[arg(long, default_value_t = 50)]
        topics: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Split a corpus into training and test files.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        test_out: PathBuf,
        #[arg(long)]
        ratio: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Build the n-gram vocabulary.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        max_n: Option<usize>,
        #[arg(long)]
        size_cap: Option<usize>,
        #[arg(long)]
        min_count: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a dot-product or joint model.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// `dot` or `joint`.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        features: Option<usize>,
        /// CSV loss curve.
        #[arg(long)]
        loss_curve: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the response language model.
    TrainLm {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        smoothing: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Precompute response encodings and priors.
    EncodeResponses {
        /// One response per line.
        #[arg(long, conflicts_with = "corpus")]
        responses: Option<PathBuf>,
        /// Use the distinct responses of a corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train HQ codebooks on the response encodings and index them.
    BuildIndex {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        vq_size: Option<usize>,
        #[arg(long)]
        subspaces: Option<usize>,
        #[arg(long)]
        pq_size: Option<usize>,
        /// `alternating` or `sgd`.
        #[arg(long)]
        hq_mode: Option<String>,
        /// Leave full-precision vectors out (no re-ranking).
        #[arg(long)]
        no_vectors: bool,
        #[command(flatten)]
        common: Common,
    },
    /// P@1 against sampled distractors.
    Eval {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        num_candidates: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Loss and batch-size ablation grid.
    Ablate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Comma-separated `model:loss:k` cells, e.g. `dot:mn:32,dot:sigmoid:32`.
        #[arg(long)]
        cells: String,
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long)]
        summary: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Speed/recall sweep of HQ search against exhaustive dot products.
    Bench {
        #[arg(long)]
        responses: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        /// Corpus whose inputs are encoded as queries.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Benchmark a Gaussian-mixture surrogate of this many vectors instead.
        #[arg(long)]
        surrogate: Option<usize>,
        #[arg(long, default_value = "30,60,100,200,300,500,1000")]
        sweep: String,
        #[command(flatten)]
        common: Common,
    },
    /// Suggest responses for `--text`, or for JSON requests on stdin.
    Suggest {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        joint: Option<PathBuf>,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        subject: Option<String>,
        /// `exhaustive`, `two_pass` or `single_pass`.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        alpha: Option<f32>,
        #[arg(long)]
        retrieve_m: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

/// Settings from `--config`, checked against the known keys.
struct Settings {
    pairs: BTreeMap<String, String>,
}

impl Settings {
    fn load(common: &Common) -> Result<Self> {
        let pairs = match &common.config {
            Some(p) => {
                let text = String::from_utf8(read_file(p)?).map_err(|e| Error::Config(format!("config is not utf-8: {e}")))?;
                parse_key_values(&text)?
            }
            None => BTreeMap::new(),
        };
        if let Some(k) = pairs.keys().find(|k| !ENCODER_KEYS.contains(&k.as_str()) && !OTHER_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        Ok(Settings { pairs })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.pairs
            .get(key)
            .map(|v| v.parse().map_err(|_| Error::Config(format!("invalid value {v:?} for key {key}"))))
            .transpose()
    }

    /// Flag, then config key, then default.
    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(match flag {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }

    fn seed(&self, common: &Common, default: u64) -> Result<u64> {
        self.pick(common.seed, "seed", default)
    }
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("--out is required".into()))
}

/// Manifest handle that is a no-op without `--manifest`.
struct Tracker {
    path: Option<PathBuf>,
    manifest: RunManifest,
}

impl Tracker {
    fn open(common: &Common) -> Result<Self> {
        let manifest = match &common.manifest {
            Some(p) => RunManifest::load_or_default(p)?,
            None => RunManifest::default(),
        };
        Ok(Tracker {
            path: common.manifest.clone(),
            manifest,
        })
    }

    fn verify(&self, kind: &str, path: &Path) -> Result<()> {
        if self.path.is_some() {
            self.manifest.verify(kind, path)?;
        }
        Ok(())
    }

    fn record(&mut self, kind: &str, path: &Path, config: serde_json::Value, inputs: &[&str]) -> Result<()> {
        if let Some(mp) = &self.path {
            self.manifest.record(kind, path, config, inputs)?;
            self.manifest.save(mp)?;
        }
        Ok(())
    }
}

fn load_vocab(path: &Path) -> Result<(NGramVocabulary, ContentHash)> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| Error::Config(format!("vocabulary is not utf-8: {e}")))?;
    Ok((NGramVocabulary::from_text(&text)?, reply_core::io::sha256(&bytes)))
}

/// Loads a model and checks it was trained against `vocab_hash`.
fn load_checked_model(path: &Path, vocab_hash: &ContentHash) -> Result<(SavedModel, ContentHash)> {
    let saved = load_model(path)?;
    if &saved.vocab_hash != vocab_hash {
        return Err(Error::StaleArtifact { path: path.to_path_buf() });
    }
    Ok((saved, file_hash(path)?))
}

fn dot_model(saved: SavedModel, path: &Path) -> Result<DotProductEncoder<f32>> {
    match saved.model {
        AnyModel::Dot(m) => Ok(m),
        AnyModel::Joint(_) => Err(Error::Config(format!("{} holds a joint model; a dot-product model is needed", path.display()))),
    }
}

fn load_lm(path: &Path) -> Result<BigramLM> {
    let text = String::from_utf8(read_file(path)?).map_err(|e| Error::Config(format!("language model is not utf-8: {e}")))?;
    BigramLM::from_text(&text)
}

fn responses_of(records: &[Record]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    records
        .iter()
        .filter_map(|r| r.response.clone())
        .filter(|r| seen.insert(r.clone()))
        .collect()
}

/// Loads a response set and checks its recorded provenance.
fn load_checked_responses(path: &Path, vocab: &ContentHash, model: &ContentHash) -> Result<ResponseSet> {
    let rs = load_responses(path)?;
    if &rs.provenance.vocab != vocab || &rs.provenance.model != model {
        return Err(Error::StaleArtifact { path: path.to_path_buf() });
    }
    Ok(rs)
}

fn load_checked_index(path: &Path, rs: &ResponseSet) -> Result<HqIndex> {
    let idx = load_index(path)?;
    if idx.source_hash != rs.content_hash()? {
        return Err(Error::StaleArtifact { path: path.to_path_buf() });
    }
    Ok(idx)
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("invalid {what} {x:?}"))))
        .collect()
}

fn cmd_generate_corpus(pairs: usize, topics: usize, common: &Common) -> Result<()> {
    let settings = Settings::load(common)?;
    let cfg = SyntheticConfig {
        pairs,
        topics,
        seed: settings.seed(common, SyntheticConfig::default().seed)?,
        ..SyntheticConfig::default()
    };
    let out = require_out(common)?;
    write_jsonl(out, &synthetic_corpus(&cfg))?;
    println!("pairs={pairs}");
    Ok(())
}

fn cmd_split(corpus: &Path, train_out: &Path, test_out: &Path, ratio: Option<f64>, common: &Common) -> Result<()> {
    let settings = Settings::load(common)?;
    let ratio = settings.pick(ratio, "ratio", EvalConfig::default().train_ratio)?;
    let records = read_jsonl(corpus)?;
    let (train, test) = split_dataset(&records, ratio, settings.seed(common, 0)?)?;
    write_jsonl(train_out, &train)?;
    write_jsonl(test_out, &test)?;
    println!("train={} test={}", train.len(), test.len());
    Ok(())
}

fn cmd_build_vocab(corpus: &Path, max_n: Option<usize>, size_cap: Option<usize>, min_count: Option<u64>, common: &Common) -> Result<()> {
    let settings = Settings::load(common)?;
    let max_n = settings.pick(max_n, "max_n", DEFAULT_MAX_N)?;
    let size_cap = settings.pick(size_cap, "size_cap", DEFAULT_SIZE_CAP)?;
    let min_count = settings.pick(min_count, "min_count", DEFAULT_MIN_COUNT)?;
    let records = read_jsonl(corpus)?;
    let vocab = NGramVocabulary::build(records.iter().flat_map(|r| r.texts()), max_n, size_cap, min_count)?;
    if vocab.is_empty() {
        return Err(Error::Empty("no n-grams retained"));
    }
    let out = require_out(common)?;
    write_file(out, vocab.to_text().as_bytes())?;
    let mut tracker = Tracker::open(common)?;
    tracker.record(manifest::VOCAB, out, json!({"max_n": max_n, "size_cap": size_cap, "min_count": min_count}), &[])?;
    println!("entries={}", vocab.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    corpus: &Path,
    vocab_path: &Path,
    model: Option<String>,
    loss: Option<String>,
    k: Option<usize>,
    epochs: Option<usize>,
    lr: Option<f64>,
    features: Option<usize>,
    loss_curve: Option<&Path>,
    common: &Common,
) -> Result<()> {
    let settings = Settings::load(common)?;
    let encoder_pairs: BTreeMap<String, String> = settings
        .pairs
        .iter()
        .filter(|(k, _)| ENCODER_KEYS.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let flags = TrainFile {
        k,
        epochs,
        lr,
        seed: common.seed,
        model,
        loss: loss.as_deref().map(LossKind::parse).transpose()?,
        features,
        ..TrainFile::default()
    };
    let file = TrainFile::from_pairs(&encoder_pairs)?.overlay(&flags);
    let mut tcfg = file.train_config();
    if file.lr.is_some() && file.lr_decayed.is_none() {
        tcfg.schedule.decayed = tcfg.schedule.initial / 10.0;
    }
    let kind = ModelKind::parse(file.model.as_deref().unwrap_or("dot"))?;
    let layout = FeatureLayout::from_num_features(file.features.unwrap_or(2))?;

    let tracker = Tracker::open(common)?;
    tracker.verify(manifest::VOCAB, vocab_path)?;
    let (vocab, vocab_hash) = load_vocab(vocab_path)?;
    let records = read_jsonl(corpus)?;
    let data = featurize_records(&records, &vocab, layout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let m = layout.num_features();
    let dims = file.split_dims()?;
    let mut curve = Vec::new();
    let log_step = |r: &reply_core::train::LossReport| {
        if r.step.is_multiple_of(500) {
            log::info!("step {} epoch {} loss {:.4} lr {}", r.step, r.epoch, r.loss, r.lr);
        }
    };
    let saved_model = match kind {
        ModelKind::Dot => {
            let mut cfg = DotConfig::desk(vocab.len(), m);
            if let Some((d, tower)) = dims {
                cfg.embedding_dim = d;
                cfg.tower = tower;
            }
            if let Some(f) = &file.fusion {
                cfg.fusion = f.clone();
            }
            let mut model = DotProductEncoder::<f32>::new(&cfg, &mut rng)?;
            curve = train_with(&mut model, &data, &tcfg, log_step)?;
            AnyModel::Dot(model)
        }
        ModelKind::Joint => {
            let mut cfg = JointConfig::desk(vocab.len(), m);
            if let Some((d, tower)) = dims {
                cfg.embedding_dim = d;
                cfg.tower = tower;
            }
            if let Some(f) = &file.fusion {
                cfg.final_layers = f.clone();
            }
            let mut model = JointScorer::<f32>::new(&cfg, &mut rng)?;
            curve.extend(train_with(&mut model, &data, &tcfg, log_step)?);
            AnyModel::Joint(model)
        }
    };
    let out = require_out(common)?;
    save_model(
        out,
        &SavedModel {
            vocab_hash,
            model: saved_model,
        },
    )?;
    if let Some(p) = loss_curve {
        let mut buf = Vec::new();
        write_loss_curve(&mut buf, &curve)?;
        write_file(p, &buf)?;
    }
    let mut tracker = tracker;
    let kind_key = if kind == ModelKind::Dot { manifest::MODEL } else { manifest::JOINT_MODEL };
    tracker.record(kind_key, out, serde_json::to_value(&tcfg)?, &inputs_if_tracked(&tracker, &[manifest::VOCAB]))?;
    let last = curve.last().map_or(f64::NAN, |r| r.loss);
    println!("steps={} final_loss={last}", curve.len());
    Ok(())
}

/// Upstream kinds that are present in the manifest.
fn inputs_if_tracked<'a>(tracker: &Tracker, kinds: &[&'a str]) -> Vec<&'a str> {
    kinds
        .iter()
        .copied()
        .filter(|k| tracker.manifest.artifacts.contains_key(*k))
        .collect()
}

fn cmd_train_lm(corpus: &Path, smoothing: Option<f64>, common: &Common) -> Result<()> {
    let settings = Settings::load(common)?;
    let k = settings.pick(smoothing, "smoothing", DEFAULT_SMOOTHING)?;
    let responses = read_jsonl(corpus)?.into_iter().filter_map(|r| r.response).collect::<Vec<_>>();
    let lm = train_lm(&responses, k)?;
    let out = require_out(common)?;
    write_file(out, lm.to_text().as_bytes())?;
    let mut tracker = Tracker::open(common)?;
    tracker.record(manifest::LM, out, json!({"smoothing": k}), &[])?;
    println!("vocab={}", lm.vocab_size());
    Ok(())
}

fn cmd_encode_responses(
    responses: Option<&Path>,
    corpus: Option<&Path>,
    vocab_path: &Path,
    model_path: &Path,
    lm_path: Option<&Path>,
    common: &Common,
) -> Result<()> {
    let tracker = Tracker::open(common)?;
    tracker.verify(manifest::VOCAB, vocab_path)?;
    tracker.verify(manifest::MODEL, model_path)?;
    let texts = match (responses, corpus) {
        (Some(p), _) => {
            let text = String::from_utf8(read_file(p)?).map_err(|e| Error::Config(format!("responses are not utf-8: {e}")))?;
            text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
        }
        (None, Some(c)) => responses_of(&read_jsonl(c)?),
        (None, None) => return Err(Error::Config("one of --responses or --corpus is required".into())),
    };
    let (vocab, vocab_hash) = load_vocab(vocab_path)?;
    let (saved, model_hash) = load_checked_model(model_path, &vocab_hash)?;
    let encoder = dot_model(saved, model_path)?;
    let (lm, lm_hash) = match lm_path {
        Some(p) => {
            tracker.verify(manifest::LM, p)?;
            (Some(load_lm(p)?), file_hash(p)?)
        }
        None => (None, [0; 32]),
    };
    let provenance = Provenance {
        vocab: vocab_hash,
        model: model_hash,
        lm: lm_hash,
    };
    let rs = precompute_responses(texts, &vocab, &encoder, lm.as_ref(), provenance)?;
    let out = require_out(common)?;
    save_responses(out, &rs)?;
    let mut tracker = tracker;
    let mut kinds = vec![manifest::VOCAB, manifest::MODEL];
    if lm_path.is_some() {
        kinds.push(manifest::LM);
    }
    let kinds = inputs_if_tracked(&tracker, &kinds);
    tracker.record(manifest::RESPONSES, out, json!({"lm": lm_path.is_some()}), &kinds)?;
    println!("responses={} dim={}", rs.len(), rs.dim);
    Ok(())
}

fn hq_config(settings: &Settings, d: usize, n: usize, flags: (Option<usize>, Option<usize>, Option<usize>, Option<String>)) -> Result<HQConfig> {
    let mut cfg = HQConfig::desk(d);
    cfg.vq_size = settings.pick(flags.0, "vq_size", cfg.vq_size)?;
    cfg.num_subspaces = settings.pick(flags.1, "subspaces", cfg.num_subspaces)?;
    cfg.pq_size = settings.pick(flags.2, "pq_size", cfg.pq_size)?;
    if let Some(m) = flags.3.or(settings.get("hq_mode")?) {
        cfg.mode = TrainMode::parse(&m)?;
    }
    cfg.outer_iterations = settings.pick(None, "outer_iterations", cfg.outer_iterations)?;
    cfg.kmeans_iterations = settings.pick(None, "kmeans_iterations", cfg.kmeans_iterations)?;
    cfg.sgd_steps = settings.pick(None, "sgd_steps", cfg.sgd_steps)?;
    cfg.sgd_batch = settings.pick(None, "sgd_batch", cfg.sgd_batch)?;
    cfg.sgd_lr = settings.pick(None, "sgd_lr", cfg.sgd_lr)?;
    cfg.vq_beam = settings.pick(None, "vq_beam", cfg.vq_beam)?;
    if let Some(s) = settings.get::<usize>("train_sample")? {
        cfg.train_sample = (s > 0).then_some(s);
    }
    if cfg.vq_size > n || cfg.pq_size > n {
        log::warn!("{n} vectors: shrinking codebooks to at most {n} centers");
        cfg.vq_size = cfg.vq_size.min(n);
        cfg.pq_size = cfg.pq_size.min(n);
    }
    Ok(cfg)
}

fn cmd_build_index(
    responses: &Path,
    flags: (Option<usize>, Option<usize>, Option<usize>, Option<String>),
    no_vectors: bool,
    common: &Common,
) -> Result<()> {
    let settings = Settings::load(common)?;
    let tracker = Tracker::open(common)?;
    tracker.verify(manifest::RESPONSES, responses)?;
    let rs = load_responses(responses)?;
    let cfg = hq_config(&settings, rs.dim, rs.len(), flags)?;
    let seed = settings.seed(common, 0)?;
    let (books, trace) = train_hq(&rs.encodings, &cfg, seed)?;
    log::info!("reconstruction error: vq only {:.5}, final {:.5}", trace.vq_only_error, trace.errors.last().copied().unwrap_or(f64::NAN));
    let idx = HqIndex::build(books, &rs.encodings, Some(rs.lm_logprob.clone()), !no_vectors, cfg.vq_beam, rs.content_hash()?)?;
    let out = require_out(common)?;
    save_index(out, &idx)?;
    let mut tracker = tracker;
    let kinds = inputs_if_tracked(&tracker, &[manifest::RESPONSES]);
    tracker.record(manifest::INDEX, out, json!({"hq": cfg, "seed": seed}), &kinds)?;
    println!("indexed={} vq_size={} subspaces={} pq_size={}", idx.n, cfg.vq_size, cfg.num_subspaces, cfg.pq_size);
    Ok(())
}

fn cmd_eval(test: &Path, vocab_path: &Path, model_path: &Path, num_candidates: Option<usize>, trials: Option<usize>, common: &Common) -> Result<()> {
    let settings = Settings::load(common)?;
    let tracker = Tracker::open(common)?;
    tracker.verify(manifest::VOCAB, vocab_path)?;
    let (vocab, vocab_hash) = load_vocab(vocab_path)?;
    let (saved, _) = load_checked_model(model_path, &vocab_hash)?;
    let layout = FeatureLayout::from_num_features(saved.model.num_features())?;
    let examples = featurize_records(&read_jsonl(test)?, &vocab, layout)?;
    let cfg = EvalConfig {
        num_candidates: settings.pick(num_candidates, "num_candidates", 100)?,
        trials: trials.or(settings.get("trials")?),
        seed: settings.seed(common, 0)?,
        ..EvalConfig::default()
    };
    let scorer: &dyn CandidateScorer = match &saved.model {
        AnyModel::Dot(m) => m,
        AnyModel::Joint(m) => m,
    };
    let p = p_at_1(scorer, &examples, &cfg)?;
    if let Some(out) = &common.out {
        write_file(out, serde_json::to_string(&p)?.as_bytes())?;
    }
    println!("p_at_1={} p_at_1_random_tiebreak={} pairs={}", p.strict, p.random_tiebreak, p.pairs);
    Ok(())
}

fn parse_cell(s: &str) -> Result<AblationConfig> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [model, loss, k] => Ok(AblationConfig {
            model: ModelKind::parse(model)?,
            loss: LossKind::parse(loss)?,
            k: k.parse().map_err(|_| Error::Config(format!("invalid batch size in {s:?}")))?,
        }),
        _ => Err(Error::Config(format!("cell {s:?} is not model:loss:k"))),
    }
}

fn cmd_ablate(train: &Path, test: &Path, vocab_path: &Path, cells: &str, seeds: &str, summary: Option<&Path>, common: &Common) -> Result<()> {
    let settings = Settings::load(common)?;
    let (vocab, _) = load_vocab(vocab_path)?;
    let features = settings.pick(None, "features", 2)?;
    let layout = FeatureLayout::from_num_features(features)?;
    let train_set = featurize_records(&read_jsonl(train)?, &vocab, layout)?;
    let test_set = featurize_records(&read_jsonl(test)?, &vocab, layout)?;
    let cells = cells.split(',').map(|c| parse_cell(c.trim())).collect::<Result<Vec<_>>>()?;
    let seeds: Vec<u64> = parse_list(seeds, "seed")?;
    let mut setup = AblationSetup::new(vocab.len(), features);
    let encoder_pairs: BTreeMap<String, String> = settings
        .pairs
        .iter()
        .filter(|(k, _)| ENCODER_KEYS.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    setup.train = TrainFile::from_pairs(&encoder_pairs)?.train_config();
    setup.eval.num_candidates = settings.pick(None, "num_candidates", 100)?;
    setup.eval.trials = settings.get("trials")?;
    let rows = ablation_report(&train_set, &test_set, &setup, &cells, &seeds)?;
    let mut buf = Vec::new();
    write_ablation_csv(&mut buf, &rows)?;
    match &common.out {
        Some(p) => write_file(p, &buf)?,
        None => std::io::stdout().write_all(&buf)?,
    }
    if let Some(p) = summary {
        let mut s = Vec::new();
        write_ablation_summary(&mut s, &rows)?;
        write_file(p, &s)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    responses: Option<&Path>,
    index: Option<&Path>,
    queries: Option<&Path>,
    vocab: Option<&Path>,
    model: Option<&Path>,
    surrogate: Option<usize>,
    sweep: &str,
    common: &Common,
) -> Result<()> {
    let settings = Settings::load(common)?;
    let seed = settings.seed(common, 0)?;
    let cfg = BenchConfig {
        sweep: parse_list(sweep, "retrieve_m")?,
        ..BenchConfig::default()
    };
    let (idx, vectors, qs) = match surrogate {
        Some(n) => {
            let d = 64;
            let mut vectors = gaussian_mixture(n + SURROGATE_QUERIES, d, 200, 0.5, seed);
            let qs: Vec<Vec<f32>> = vectors.split_off(n * d).chunks(d).map(<[f32]>::to_vec).collect();
            let hq = hq_config(&settings, d, n, (None, None, None, None))?;
            let (books, _) = train_hq(&vectors, &hq, seed)?;
            let idx = HqIndex::build(books, &vectors, None, true, hq.vq_beam, reply_core::io::sha256(&[]))?;
            (idx, vectors, qs)
        }
        None => {
            let need = |p: Option<&Path>, flag: &str| p.map(Path::to_path_buf).ok_or_else(|| Error::Config(format!("--{flag} is required")));
            let (vocab_path, model_path) = (need(vocab, "vocab")?, need(model, "model")?);
            let (rs_path, idx_path, q_path) = (need(responses, "responses")?, need(index, "index")?, need(queries, "queries")?);
            let (vocab, vocab_hash) = load_vocab(&vocab_path)?;
            let (saved, model_hash) = load_checked_model(&model_path, &vocab_hash)?;
            let encoder = dot_model(saved, &model_path)?;
            let rs = load_checked_responses(&rs_path, &vocab_hash, &model_hash)?;
            let idx = load_checked_index(&idx_path, &rs)?;
            let layout = FeatureLayout::from_num_features(encoder.num_features())?;
            let qs = read_jsonl(&q_path)?
                .iter()
                .map(|r| Ok(encoder.encode_input(&layout.featurize_input(&r.body, r.subject.as_deref(), &vocab))?.h))
                .collect::<Result<Vec<_>>>()?;
            (idx, rs.encodings, qs)
        }
    };
    let report = speed_recall_bench(&idx, &vectors, &qs, &cfg)?;
    let mut buf = Vec::new();
    write_bench_csv(&mut buf, &report.points)?;
    match &common.out {
        Some(p) => write_file(p, &buf)?,
        None => std::io::stdout().write_all(&buf)?,
    }
    log::info!("exhaustive: {:.1} queries/s", report.exhaustive.qps);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_suggest(
    vocab_path: &Path,
    model_path: &Path,
    joint_path: Option<&Path>,
    rs_path: &Path,
    index_path: Option<&Path>,
    text: Option<String>,
    subject: Option<String>,
    mode: Option<String>,
    n: Option<usize>,
    m: Option<usize>,
    alpha: Option<f32>,
    retrieve_m: Option<usize>,
    common: &Common,
) -> Result<()> {
    let settings = Settings::load(common)?;
    let tracker = Tracker::open(common)?;
    tracker.verify(manifest::VOCAB, vocab_path)?;
    tracker.verify(manifest::MODEL, model_path)?;
    tracker.verify(manifest::RESPONSES, rs_path)?;
    let (vocab, vocab_hash) = load_vocab(vocab_path)?;
    let (saved, model_hash) = load_checked_model(model_path, &vocab_hash)?;
    let encoder = dot_model(saved, model_path)?;
    let joint = match joint_path {
        Some(p) => {
            tracker.verify(manifest::JOINT_MODEL, p)?;
            match load_checked_model(p, &vocab_hash)?.0.model {
                AnyModel::Joint(j) => Some(j),
                AnyModel::Dot(_) => return Err(Error::Config(format!("{} holds a dot-product model; a joint model is needed", p.display()))),
            }
        }
        None => None,
    };
    let rs = load_checked_responses(rs_path, &vocab_hash, &model_hash)?;
    let index = match index_path {
        Some(p) => {
            tracker.verify(manifest::INDEX, p)?;
            Some(load_checked_index(p, &rs)?)
        }
        None => None,
    };
    let default_mode = if index.is_some() {
        Mode::SinglePass
    } else if joint.is_some() {
        Mode::TwoPass
    } else {
        return Err(Error::Config("suggest needs --index or --joint".into()));
    };
    let mode = mode.map(|s| Mode::parse(&s)).transpose()?;
    let cfg = ServeConfig {
        alpha: settings.pick(alpha, "alpha", 0.0)?,
        retrieve_m: settings.pick(retrieve_m, "retrieve_m", ServeConfig::default().retrieve_m)?,
        rerank: settings.pick(None, "rerank", true)?,
    };
    let suggester = Suggester::new(vocab, encoder, joint, rs, index, cfg)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut answer = |mut req: SuggestRequest| -> Result<()> {
        if let Some(md) = mode {
            req.mode = md;
        }
        if let Some(v) = n {
            req.n = v;
        }
        if m.is_some() {
            req.m = m;
        }
        let res = suggester.suggest(&req)?;
        serde_json::to_writer(&mut out, &res)?;
        out.write_all(b"\n")?;
        Ok(())
    };
    match text {
        Some(body) => answer(SuggestRequest {
            subject,
            ..SuggestRequest::new(body, mode.unwrap_or(default_mode), n.unwrap_or(reply_core::serve::DEFAULT_N))
        }),
        None => {
            for line in std::io::stdin().lock().lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let mut value: serde_json::Value = serde_json::from_str(&line)?;
                if value.get("mode").is_none() {
                    value["mode"] = serde_json::to_value(default_mode)?;
                }
                answer(serde_json::from_value(value)?)?;
            }
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateCorpus { pairs, topics, common } => cmd_generate_corpus(pairs, topics, &common),
        Command::Split {
            corpus,
            train_out,
            test_out,
            ratio,
            common,
        } => cmd_split(&corpus, &train_out, &test_out, ratio, &common),
        Command::BuildVocab {
            corpus,
            max_n,
            size_cap,
            min_count,
            common,
        } => cmd_build_vocab(&corpus, max_n, size_cap, min_count, &common),
        Command::Train {
            corpus,
            vocab,
            model,
            loss,
            k,
            epochs,
            lr,
            features,
            loss_curve,
            common,
        } => cmd_train(&corpus, &vocab, model, loss, k, epochs, lr, features, loss_curve.as_deref(), &common),
        Command::TrainLm { corpus, smoothing, common } => cmd_train_lm(&corpus, smoothing, &common),
        Command::EncodeResponses {
            responses,
            corpus,
            vocab,
            model,
            lm,
            common,
        } => cmd_encode_responses(responses.as_deref(), corpus.as_deref(), &vocab, &model, lm.as_deref(), &common),
        Command::BuildIndex {
            responses,
            vq_size,
            subspaces,
            pq_size,
            hq_mode,
            no_vectors,
            common,
        } => cmd_build_index(&responses, (vq_size, subspaces, pq_size, hq_mode), no_vectors, &common),
        Command::Eval {
            test,
            vocab,
            model,
            num_candidates,
            trials,
            common,
        } => cmd_eval(&test, &vocab, &model, num_candidates, trials, &common),
        Command::Ablate {
            train,
            test,
            vocab,
            cells,
            seeds,
            summary,
            common,
        } => cmd_ablate(&train, &test, &vocab, &cells, &seeds, summary.as_deref(), &common),
        Command::Bench {
            responses,
            index,
            queries,
            vocab,
            model,
            surrogate,
            sweep,
            common,
        } => cmd_bench(
            responses.as_deref(),
            index.as_deref(),
            queries.as_deref(),
            vocab.as_deref(),
            model.as_deref(),
            surrogate,
            &sweep,
            &common,
        ),
        Command::Suggest {
            vocab,
            model,
            joint,
            responses,
            index,
            text,
            subject,
            mode,
            n,
            m,
            alpha,
            retrieve_m,
            common,
        } => cmd_suggest(
            &vocab,
            &model,
            joint.as_deref(),
            &responses,
            index.as_deref(),
            text,
            subject,
            mode,
            n,
            m,
            alpha,
            retrieve_m,
            &common,
        ),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        let mut line = json!({"error": e.kind(), "message": e.to_string()});
        if let Error::StaleArtifact { path } = &e {
            line["path"] = json!(path.display().to_string());
        }
        eprintln!("{line}");
        std::process::exit(1);
    }
}
