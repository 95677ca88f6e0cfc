//! Offline evaluation: dataset splits, P@1 against sampled distractors, loss
//! and batch-size ablations, and the speed/recall benchmark.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::encoder::{DotConfig, DotProductEncoder, JointConfig, JointScorer};
use crate::error::{check_dim, Error, Result};
use crate::hq::{exact_top_n, recall_at, HqIndex, SearchParams, SignLsh};
use crate::numeric::dot_f32;
use crate::text::FeatureBag;
use crate::train::{train, LossKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Candidates per test pair, the true response included.
    pub num_candidates: usize,
    /// Evaluate at most this many test pairs (all when `None`).
    pub trials: Option<usize>,
    pub seed: u64,
    /// Fraction of pairs used for training.
    pub train_ratio: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            num_candidates: 100,
            trials: None,
            seed: 0,
            train_ratio: 0.95,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_candidates < 2 {
            return Err(Error::Config("num_candidates must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.train_ratio) {
            return Err(Error::Config(format!("train ratio {} is outside [0, 1]", self.train_ratio)));
        }
        Ok(())
    }
}

/// Shuffles `items` and cuts them into `round(ratio * n)` training items and
/// the rest.
pub fn split_dataset<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("train ratio {ratio} is outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * items.len() as f64).round() as usize;
    let pick = |ids: &[usize]| ids.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// Candidate lists for P@1.
///
/// Distinct response bags of the test set form the pool; every pair gets its
/// own response first, followed by `num_candidates - 1` others.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSets {
    /// Test example holding each pooled response.
    pub pool: Vec<usize>,
    /// Per pair: pool indices, the true response first.
    pub candidates: Vec<Vec<usize>>,
    /// Test example of each evaluated pair.
    pub pairs: Vec<usize>,
    /// Whether distractors had to be drawn with replacement.
    pub with_replacement: bool,
}

pub fn sample_candidates(test: &[Example], cfg: &EvalConfig) -> Result<CandidateSets> {
    cfg.validate()?;
    if test.is_empty() {
        return Err(Error::Empty("test pairs"));
    }
    let mut pool = Vec::new();
    let mut pool_of: HashMap<&[(u32, u32)], usize> = HashMap::new();
    let truth: Vec<usize> = test
        .iter()
        .enumerate()
        .map(|(i, e)| {
            *pool_of.entry(&e.response.items).or_insert_with(|| {
                pool.push(i);
                pool.len() - 1
            })
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs: Vec<usize> = (0..test.len()).collect();
    if let Some(t) = cfg.trials.filter(|&t| t < test.len()) {
        pairs = rand::seq::index::sample(&mut rng, test.len(), t).into_vec();
        pairs.sort_unstable();
    }
    let need = cfg.num_candidates - 1;
    let others = pool.len() - 1;
    let with_replacement = others < need;
    if with_replacement {
        log::warn!("only {others} distinct distractors for {need} slots; sampling with replacement");
        if others == 0 {
            return Err(Error::Config("test set has a single distinct response".into()));
        }
    }
    let candidates = pairs
        .iter()
        .map(|&p| {
            let t = truth[p];
            let skip = |j: usize| if j < t { j } else { j + 1 };
            let mut c = vec![t];
            if with_replacement {
                c.extend((0..need).map(|_| skip(rng.random_range(0..others))));
            } else {
                c.extend(rand::seq::index::sample(&mut rng, others, need).into_iter().map(skip));
            }
            c
        })
        .collect();
    Ok(CandidateSets {
        pool,
        candidates,
        pairs,
        with_replacement,
    })
}

/// Anything that scores candidate responses for a test input.
pub trait CandidateScorer {
    /// One score per entry of `sets.candidates`, in the same layout.
    fn score_candidates(&self, test: &[Example], sets: &CandidateSets) -> Result<Vec<Vec<f64>>>;
}

impl CandidateScorer for DotProductEncoder<f32> {
    fn score_candidates(&self, test: &[Example], sets: &CandidateSets) -> Result<Vec<Vec<f64>>> {
        let hy = sets
            .pool
            .iter()
            .map(|&i| Ok(self.encode_response(&test[i].response)?.h))
            .collect::<Result<Vec<_>>>()?;
        sets.pairs
            .iter()
            .zip(&sets.candidates)
            .map(|(&p, cands)| {
                let hx = self.encode_input(&test[p].input)?.h;
                Ok(cands.iter().map(|&c| dot_f32(&hx, &hy[c]) as f64).collect())
            })
            .collect()
    }
}

impl CandidateScorer for JointScorer<f32> {
    fn score_candidates(&self, test: &[Example], sets: &CandidateSets) -> Result<Vec<Vec<f64>>> {
        let ye = sets
            .pool
            .iter()
            .map(|&i| self.embed_response(&test[i].response))
            .collect::<Result<Vec<_>>>()?;
        sets.pairs
            .iter()
            .zip(&sets.candidates)
            .map(|(&p, cands)| {
                let xe = self.embed_input(&test[p].input)?;
                cands
                    .iter()
                    .map(|&c| Ok(self.trace_embedded(&xe, &ye[c])?.score as f64))
                    .collect()
            })
            .collect()
    }
}

/// A scorer given as a function of `(input, response)`.
pub struct FnScorer<F>(pub F);

impl<F: Fn(&[FeatureBag], &FeatureBag) -> f64> CandidateScorer for FnScorer<F> {
    fn score_candidates(&self, test: &[Example], sets: &CandidateSets) -> Result<Vec<Vec<f64>>> {
        Ok(sets
            .pairs
            .iter()
            .zip(&sets.candidates)
            .map(|(&p, cands)| {
                cands
                    .iter()
                    .map(|&c| (self.0)(&test[p].input, &test[sets.pool[c]].response))
                    .collect()
            })
            .collect())
    }
}

/// P@1 under both tie conventions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionAt1 {
    /// The true response must score strictly highest.
    pub strict: f64,
    /// Ties at the top are broken uniformly at random.
    pub random_tiebreak: f64,
    pub pairs: usize,
}

/// P@1 from score lists whose first entry is the true response.
pub fn precision_from_scores(scores: &[Vec<f64>], seed: u64) -> Result<PrecisionAt1> {
    if scores.is_empty() {
        return Err(Error::Empty("score lists"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7469_6562_7265_616b);
    let (mut strict, mut random) = (0usize, 0usize);
    for s in scores {
        let t = *s.first().ok_or(Error::Empty("candidate scores"))?;
        if let Some(v) = s.iter().find(|v| v.is_nan()) {
            return Err(Error::NonFinite(format!("candidate score {v}")));
        }
        let best = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if t < best {
            continue;
        }
        let ties = s[1..].iter().filter(|&&v| v == best).count();
        if ties == 0 {
            strict += 1;
            random += 1;
        } else if rng.random_range(0..=ties) == 0 {
            random += 1;
        }
    }
    let n = scores.len() as f64;
    Ok(PrecisionAt1 {
        strict: strict as f64 / n,
        random_tiebreak: random as f64 / n,
        pairs: scores.len(),
    })
}

pub fn p_at_1(scorer: &dyn CandidateScorer, test: &[Example], cfg: &EvalConfig) -> Result<PrecisionAt1> {
    let sets = sample_candidates(test, cfg)?;
    let scores = scorer.score_candidates(test, &sets)?;
    precision_from_scores(&scores, cfg.seed)
}

/// Mean and half-width of a 95% Student-t interval.
pub fn confidence_interval(xs: &[f64]) -> Option<(f64, f64)> {
    const T95: [f64; 10] = [12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228];
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Some((mean, f64::INFINITY));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = T95.get(xs.len() - 2).copied().unwrap_or(1.96);
    Some((mean, t * (var / n).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dot,
    Joint,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(ModelKind::Dot),
            "joint" => Ok(ModelKind::Joint),
            other => Err(Error::Config(format!("unknown model {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Dot => "dot",
            ModelKind::Joint => "joint",
        }
    }
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub model: ModelKind,
    pub loss: LossKind,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: ModelKind,
    pub loss: LossKind,
    pub k: usize,
    pub seed: u64,
    pub p_at_1: f64,
    pub p_at_1_random_tiebreak: f64,
    pub final_loss: f64,
}

/// Shared settings of an ablation run.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSetup {
    pub vocab_size: usize,
    pub features: usize,
    /// Everything except batch size, loss and seed.
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub dot: Option<DotConfig>,
    pub joint: Option<JointConfig>,
}

impl AblationSetup {
    pub fn new(vocab_size: usize, features: usize) -> Self {
        AblationSetup {
            vocab_size,
            features,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            dot: None,
            joint: None,
        }
    }
}

/// Trains and evaluates one configuration at one seed.
pub fn run_ablation_cell(
    train_set: &[Example],
    test: &[Example],
    setup: &AblationSetup,
    cell: AblationConfig,
    seed: u64,
) -> Result<AblationRow> {
    let tcfg = TrainConfig {
        batch_size: cell.k,
        loss: cell.loss,
        seed,
        ..setup.train.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, curve) = match cell.model {
        ModelKind::Dot => {
            let cfg = setup.dot.clone().unwrap_or_else(|| DotConfig::desk(setup.vocab_size, setup.features));
            let mut m = DotProductEncoder::<f32>::new(&cfg, &mut rng)?;
            let curve = train(&mut m, train_set, &tcfg)?;
            (p_at_1(&m, test, &setup.eval)?, curve)
        }
        ModelKind::Joint => {
            let cfg = setup.joint.clone().unwrap_or_else(|| JointConfig::desk(setup.vocab_size, setup.features));
            let mut m = JointScorer::<f32>::new(&cfg, &mut rng)?;
            let curve = train(&mut m, train_set, &tcfg)?;
            (p_at_1(&m, test, &setup.eval)?, curve)
        }
    };
    Ok(AblationRow {
        model: cell.model,
        loss: cell.loss,
        k: cell.k,
        seed,
        p_at_1: p.strict,
        p_at_1_random_tiebreak: p.random_tiebreak,
        final_loss: curve.last().map_or(f64::NAN, |r| r.loss),
    })
}

/// Every configuration at every seed. Rows come out configuration-major.
pub fn ablation_report(
    train_set: &[Example],
    test: &[Example],
    setup: &AblationSetup,
    configs: &[AblationConfig],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(configs.len() * seeds.len());
    for &cell in configs {
        for &seed in seeds {
            let row = run_ablation_cell(train_set, test, setup, cell, seed)?;
            log::info!("{} {} k={} seed={}: p_at_1={:.4}", cell.model.name(), cell.loss.name(), cell.k, seed, row.p_at_1);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// `model,loss,k,seed,p_at_1`.
pub fn write_ablation_csv(mut w: impl Write, rows: &[AblationRow]) -> Result<()> {
    writeln!(w, "model,loss,k,seed,p_at_1")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.model.name(), r.loss.name(), r.k, r.seed, r.p_at_1)?;
    }
    Ok(())
}

/// Per configuration: `model,loss,k,seeds,mean_p_at_1,ci95_low,ci95_high`.
pub fn write_ablation_summary(mut w: impl Write, rows: &[AblationRow]) -> Result<()> {
    writeln!(w, "model,loss,k,seeds,mean_p_at_1,ci95_low,ci95_high")?;
    let mut keys: Vec<(ModelKind, LossKind, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.model, r.loss, r.k)) {
            keys.push((r.model, r.loss, r.k));
        }
    }
    for (model, loss, k) in keys {
        let xs: Vec<f64> = rows
            .iter()
            .filter(|r| r.model == model && r.loss == loss && r.k == k)
            .map(|r| r.p_at_1)
            .collect();
        let (mean, half) = confidence_interval(&xs).expect("at least one row per key");
        writeln!(w, "{},{},{},{},{},{},{}", model.name(), loss.name(), k, xs.len(), mean, mean - half, mean + half)?;
    }
    Ok(())
}

/// `n` points drawn around `clusters` standard-normal centers with isotropic
/// noise `sigma`, row-major `n x d`.
pub fn gaussian_mixture(n: usize, d: usize, clusters: usize, sigma: f32, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters = clusters.max(1);
    let centers: Vec<f32> = (0..clusters * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let c = rng.random_range(0..clusters);
        for t in 0..d {
            let z: f32 = StandardNormal.sample(&mut rng);
            out.push(centers[c * d + t] + sigma * z);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub warmup: usize,
    pub repeats: usize,
    /// Neighbours compared for recall.
    pub n_results: usize,
    pub sweep: Vec<usize>,
    pub rerank: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup: 100,
            repeats: 3,
            n_results: 30,
            sweep: vec![30, 60, 100, 200, 300, 500, 1000],
            rerank: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub label: String,
    pub retrieve_m: usize,
    pub recall_at_30: f64,
    pub speedup_vs_exhaustive: f64,
    pub qps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub exhaustive: BenchPoint,
    pub points: Vec<BenchPoint>,
}

/// Median seconds per query over `repeats` timed passes, after `warmup`
/// untimed queries.
pub fn time_per_query<F: FnMut(&[f32])>(queries: &[Vec<f32>], warmup: usize, repeats: usize, mut f: F) -> f64 {
    for q in queries.iter().cycle().take(warmup.min(queries.len() * 4)) {
        f(q);
    }
    let mut runs: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            for q in queries {
                f(q);
            }
            t.elapsed().as_secs_f64() / queries.len() as f64
        })
        .collect();
    runs.sort_by(f64::total_cmp);
    runs[runs.len() / 2]
}

fn ids(results: Vec<(u32, f32)>) -> Vec<u32> {
    results.into_iter().map(|(i, _)| i).collect()
}

/// Exact top-`n` ids of every query over the unbiased dot product.
pub fn exact_truth(vectors: &[f32], d: usize, queries: &[Vec<f32>], n: usize) -> Vec<Vec<u32>> {
    queries.iter().map(|q| ids(exact_top_n(vectors, d, q, n, 0.0, None))).collect()
}

fn exhaustive_point(vectors: &[f32], d: usize, queries: &[Vec<f32>], cfg: &BenchConfig) -> (BenchPoint, f64) {
    let t = time_per_query(queries, cfg.warmup, cfg.repeats, |q| {
        std::hint::black_box(exact_top_n(vectors, d, q, cfg.n_results, 0.0, None));
    });
    let point = BenchPoint {
        label: "exhaustive".into(),
        retrieve_m: vectors.len() / d,
        recall_at_30: 1.0,
        speedup_vs_exhaustive: 1.0,
        qps: 1.0 / t,
    };
    (point, t)
}

fn check_bench_input(vectors: &[f32], d: usize, queries: &[Vec<f32>]) -> Result<()> {
    if queries.is_empty() || vectors.is_empty() {
        return Err(Error::Empty("benchmark queries and vectors"));
    }
    check_dim("benchmark vectors", 0, vectors.len() % d)?;
    for q in queries {
        check_dim("benchmark query", d, q.len())?;
    }
    if queries.len() < 1000 {
        log::warn!("{} benchmark queries; timings may be unstable below 1000", queries.len());
    }
    Ok(())
}

/// HQ search at each `retrieve_m` of the sweep against the exhaustive
/// baseline. `vectors` must be the rows the index was built from.
pub fn speed_recall_bench(index: &HqIndex, vectors: &[f32], queries: &[Vec<f32>], cfg: &BenchConfig) -> Result<BenchReport> {
    let d = index.books.dim();
    check_bench_input(vectors, d, queries)?;
    check_dim("benchmark vectors", index.n * d, vectors.len())?;
    let truth = exact_truth(vectors, d, queries, cfg.n_results);
    let (exhaustive, t_ex) = exhaustive_point(vectors, d, queries, cfg);
    let mut sweep = cfg.sweep.clone();
    sweep.sort_unstable();
    sweep.dedup();
    let mut points = Vec::with_capacity(sweep.len());
    for m in sweep {
        let params = SearchParams {
            n_results: cfg.n_results,
            retrieve_m: m,
            rerank: cfg.rerank,
            alpha: 0.0,
        };
        let got = queries
            .iter()
            .map(|q| Ok(ids(index.search(q, &params)?)))
            .collect::<Result<Vec<_>>>()?;
        let recall = recall_at(&got, &truth, cfg.n_results)?;
        let t = time_per_query(queries, cfg.warmup, cfg.repeats, |q| {
            std::hint::black_box(index.search(q, &params).expect("validated query"));
        });
        points.push(BenchPoint {
            label: "hq".into(),
            retrieve_m: m,
            recall_at_30: recall,
            speedup_vs_exhaustive: t_ex / t,
            qps: 1.0 / t,
        });
    }
    Ok(BenchReport { exhaustive, points })
}

/// The same sweep for sign-projection hashing, candidates ranked by Hamming
/// distance.
pub fn lsh_bench(lsh: &SignLsh, vectors: &[f32], d: usize, queries: &[Vec<f32>], cfg: &BenchConfig) -> Result<BenchReport> {
    check_bench_input(vectors, d, queries)?;
    let truth = exact_truth(vectors, d, queries, cfg.n_results);
    let (exhaustive, t_ex) = exhaustive_point(vectors, d, queries, cfg);
    let mut sweep = cfg.sweep.clone();
    sweep.sort_unstable();
    sweep.dedup();
    let mut points = Vec::with_capacity(sweep.len());
    for m in sweep {
        let got = queries
            .iter()
            .map(|q| Ok(ids(lsh.search(q, cfg.n_results, m)?)))
            .collect::<Result<Vec<_>>>()?;
        let recall = recall_at(&got, &truth, cfg.n_results)?;
        let t = time_per_query(queries, cfg.warmup, cfg.repeats, |q| {
            std::hint::black_box(lsh.search(q, cfg.n_results, m).expect("validated query"));
        });
        points.push(BenchPoint {
            label: "lsh".into(),
            retrieve_m: m,
            recall_at_30: recall,
            speedup_vs_exhaustive: t_ex / t,
            qps: 1.0 / t,
        });
    }
    Ok(BenchReport { exhaustive, points })
}

/// `retrieve_m,recall_at_30,speedup_vs_exhaustive,qps`, one row per point.
pub fn write_bench_csv(mut w: impl Write, points: &[BenchPoint]) -> Result<()> {
    writeln!(w, "retrieve_m,recall_at_30,speedup_vs_exhaustive,qps")?;
    for p in points {
        writeln!(w, "{},{},{},{}", p.retrieve_m, p.recall_at_30, p.speedup_vs_exhaustive, p.qps)?;
    }
    Ok(())
}

/// Recall never decreases as `retrieve_m` grows.
pub fn is_recall_monotone(points: &[BenchPoint]) -> bool {
    let mut sorted: Vec<&BenchPoint> = points.iter().collect();
    sorted.sort_by_key(|p| p.retrieve_m);
    sorted.windows(2).all(|w| w[1].recall_at_30 >= w[0].recall_at_30)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hq::{train_hq, HQConfig};
    use crate::text::Field;

    fn toy_examples(n: u32) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                input: vec![FeatureBag::from_ids([i], Field::Body)],
                response: FeatureBag::from_ids([i], Field::Response),
                response_text: format!("r{i}"),
            })
            .collect()
    }

    #[test]
    fn split_examples() {
        let items: Vec<u32> = (0..100).collect();
        let (tr, te) = split_dataset(&items, 0.95, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (95, 5));
        let mut all: Vec<u32> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, items);
        let (tr1, te1) = split_dataset(&items, 1.0, 1).unwrap();
        assert_eq!((tr1.len(), te1.len()), (100, 0));
        assert_eq!(split_dataset(&items, 0.95, 1).unwrap(), (tr, te));
        assert_ne!(split_dataset(&items, 0.95, 2).unwrap().1, split_dataset(&items, 0.95, 1).unwrap().1);
        assert!(split_dataset::<u32>(&[], 0.5, 1).is_err());
        assert!(split_dataset(&items, 1.5, 1).is_err());
    }

    #[test]
    fn candidates_put_truth_first_and_exclude_it() {
        let test = toy_examples(300);
        let sets = sample_candidates(&test, &EvalConfig::default()).unwrap();
        assert!(!sets.with_replacement);
        assert_eq!(sets.pool.len(), 300);
        for (&p, c) in sets.pairs.iter().zip(&sets.candidates) {
            assert_eq!(c.len(), 100);
            assert_eq!(sets.pool[c[0]], p);
            let mut rest = c[1..].to_vec();
            assert!(!rest.contains(&c[0]));
            rest.sort_unstable();
            rest.dedup();
            assert_eq!(rest.len(), 99);
        }
    }

    #[test]
    fn duplicate_responses_share_a_pool_slot() {
        let mut test = toy_examples(150);
        test[1].response = test[0].response.clone();
        let sets = sample_candidates(&test, &EvalConfig::default()).unwrap();
        assert_eq!(sets.pool.len(), 149);
        for c in &sets.candidates {
            assert!(!c[1..].contains(&c[0]));
        }
    }

    #[test]
    fn small_pools_sample_with_replacement() {
        let test = toy_examples(10);
        let sets = sample_candidates(&test, &EvalConfig::default()).unwrap();
        assert!(sets.with_replacement);
        assert!(sets.candidates.iter().all(|c| c.len() == 100 && !c[1..].contains(&c[0])));
        assert!(sample_candidates(&toy_examples(1), &EvalConfig::default()).is_err());
    }

    #[test]
    fn oracle_scorer_is_perfect() {
        let test = toy_examples(200);
        let oracle = FnScorer(|x: &[FeatureBag], y: &FeatureBag| if x[0].items == y.items { 1.0 } else { 0.0 });
        let p = p_at_1(&oracle, &test, &EvalConfig::default()).unwrap();
        assert_eq!(p.strict, 1.0);
        assert_eq!(p.random_tiebreak, 1.0);
    }

    #[test]
    fn constant_scorer_under_both_conventions() {
        let test = toy_examples(500);
        let cfg = EvalConfig {
            seed: 5,
            ..Default::default()
        };
        let sets = sample_candidates(&test, &cfg).unwrap();
        let flat = FnScorer(|_: &[FeatureBag], _: &FeatureBag| 0.5);
        let mut scores = flat.score_candidates(&test, &sets).unwrap();
        // 10k Monte Carlo trials.
        scores = scores.iter().cycle().take(10_000).cloned().collect();
        let p = precision_from_scores(&scores, 9).unwrap();
        assert_eq!(p.strict, 0.0);
        assert!((p.random_tiebreak - 0.01).abs() <= 0.003, "{}", p.random_tiebreak);
    }

    #[test]
    fn p_at_1_is_a_rank_statistic() {
        let test = toy_examples(200);
        let raw = |x: &[FeatureBag], y: &FeatureBag| ((x[0].items[0].0 * 7 + y.items[0].0 * 13) % 101) as f64;
        let cfg = EvalConfig::default();
        let a = p_at_1(&FnScorer(raw), &test, &cfg).unwrap();
        let b = p_at_1(&FnScorer(|x: &[FeatureBag], y: &FeatureBag| (raw(x, y) * 0.3).exp() - 4.0), &test, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trials_subsample_pairs() {
        let test = toy_examples(300);
        let cfg = EvalConfig {
            trials: Some(40),
            ..Default::default()
        };
        let sets = sample_candidates(&test, &cfg).unwrap();
        assert_eq!(sets.pairs.len(), 40);
        assert_eq!(sets, sample_candidates(&test, &cfg).unwrap());
    }

    #[test]
    fn untrained_dot_model_is_near_chance() {
        let test: Vec<Example> = (0..1000u32)
            .map(|i| Example {
                input: vec![FeatureBag::from_ids([i % 500, 500 + i % 37], Field::Body)],
                response: FeatureBag::from_ids([i, 1000 + i % 11], Field::Response),
                response_text: String::new(),
            })
            .collect();
        let cfg = DotConfig {
            vocab_size: 1100,
            embedding_dim: 16,
            features: 1,
            tower: vec![16],
            fusion: vec![16],
        };
        let m = DotProductEncoder::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let p = p_at_1(&m, &test, &EvalConfig::default()).unwrap();
        assert!(p.strict <= 0.05, "{}", p.strict);
    }

    #[test]
    fn confidence_interval_examples() {
        assert_eq!(confidence_interval(&[]), None);
        let (m, h) = confidence_interval(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!((m, h), (0.5, 0.0));
        let (m, h) = confidence_interval(&[1.0, 2.0, 3.0]).unwrap();
        assert!((m - 2.0).abs() < 1e-12);
        assert!((h - 4.303 / 3f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn ablation_rows_repeat_for_identical_seeds() {
        let data: Vec<Example> = toy_examples(128);
        let mut setup = AblationSetup::new(128, 1);
        setup.dot = Some(DotConfig {
            vocab_size: 128,
            embedding_dim: 8,
            features: 1,
            tower: vec![8],
            fusion: vec![8],
        });
        setup.train.epochs = 1;
        setup.eval.num_candidates = 10;
        let cell = AblationConfig {
            model: ModelKind::Dot,
            loss: LossKind::Sigmoid,
            k: 8,
        };
        let rows = ablation_report(&data, &data, &setup, &[cell], &[4, 4]).unwrap();
        assert_eq!(rows[0], rows[1]);
        let mut out = Vec::new();
        write_ablation_csv(&mut out, &rows).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("model,loss,k,seed,p_at_1\ndot,sigmoid,8,4,"));
        let mut out = Vec::new();
        write_ablation_summary(&mut out, &rows).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 2);
    }

    #[test]
    fn bench_points_and_csv() {
        let d = 8;
        let data = gaussian_mixture(2000, d, 10, 0.3, 1);
        let mut hq = HQConfig::desk(d);
        hq.vq_size = 16;
        hq.num_subspaces = 4;
        hq.pq_size = 16;
        hq.outer_iterations = 2;
        let (books, _) = train_hq(&data, &hq, 2).unwrap();
        let idx = HqIndex::build(books, &data, None, true, 2, [0; 32]).unwrap();
        let queries: Vec<Vec<f32>> = gaussian_mixture(50, d, 10, 0.3, 9).chunks(d).map(<[f32]>::to_vec).collect();
        let cfg = BenchConfig {
            warmup: 5,
            repeats: 3,
            n_results: 30,
            sweep: vec![2000, 30, 300],
            rerank: true,
        };
        let report = speed_recall_bench(&idx, &data, &queries, &cfg).unwrap();
        assert_eq!(report.exhaustive.recall_at_30, 1.0);
        assert_eq!(report.exhaustive.speedup_vs_exhaustive, 1.0);
        let ms: Vec<usize> = report.points.iter().map(|p| p.retrieve_m).collect();
        assert_eq!(ms, vec![30, 300, 2000]);
        assert_eq!(report.points[2].recall_at_30, 1.0);
        assert!(is_recall_monotone(&report.points));
        let mut out = Vec::new();
        write_bench_csv(&mut out, &report.points).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next(), Some("retrieve_m,recall_at_30,speedup_vs_exhaustive,qps"));
        assert_eq!(text.lines().count(), 4);

        let lsh = SignLsh::build(&data, d, 1, 3).unwrap();
        let lr = lsh_bench(&lsh, &data, d, &queries, &cfg).unwrap();
        assert_eq!(lr.points.last().unwrap().recall_at_30, 1.0);
    }

    #[test]
    fn monotonicity_check() {
        let p = |m, r| BenchPoint {
            label: String::new(),
            retrieve_m: m,
            recall_at_30: r,
            speedup_vs_exhaustive: 1.0,
            qps: 1.0,
        };
        assert!(is_recall_monotone(&[p(100, 0.9), p(30, 0.5)]));
        assert!(!is_recall_monotone(&[p(100, 0.4), p(30, 0.5)]));
    }

    #[test]
    fn mixture_is_deterministic() {
        assert_eq!(gaussian_mixture(10, 4, 3, 0.1, 1), gaussian_mixture(10, 4, 3, 0.1, 1));
        assert_eq!(gaussian_mixture(10, 4, 3, 0.1, 1).len(), 40);
    }
}
