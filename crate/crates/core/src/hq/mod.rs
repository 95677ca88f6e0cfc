//! Hierarchical quantization for maximum inner product search.
//!
//! A vector is approximated as `HQ(h) = C_VQ[v] + R^T concat_k C_PQ^k[c_k]`
//! where `v` is a coarse center, `R` an orthogonal rotation and `c_k` the
//! product-quantization code of the `k`-th subvector of the rotated residual
//! `R (h - C_VQ[v])`. Queries are scored against codes through lookup tables:
//! `h_x . HQ(h_y) = h_x . C_VQ[v] + sum_k (R h_x)^k . C_PQ^k[c_k]`.

mod file;
mod kmeans;
mod lsh;
mod scan;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::io::ContentHash;
use crate::numeric::{dot_f32, squared_distance};
use crate::topk::TopK;

pub use file::{load_index, save_index, INDEX_MAGIC, INDEX_VERSION};
pub use kmeans::{kmeans_pp, lloyd, nearest};
pub use lsh::SignLsh;
pub use train::{train_hq, TrainTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Alternating,
    Sgd,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alternating" => Ok(TrainMode::Alternating),
            "sgd" => Ok(TrainMode::Sgd),
            other => Err(Error::Config(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HQConfig {
    pub d: usize,
    pub vq_size: usize,
    pub num_subspaces: usize,
    pub pq_size: usize,
    pub mode: TrainMode,
    /// Approximate candidates kept before re-ranking.
    pub retrieve_m: usize,
    pub rerank: bool,
    /// Alternating rounds (alternating mode).
    pub outer_iterations: usize,
    /// Lloyd rounds per k-means call.
    pub kmeans_iterations: usize,
    /// Gradient steps, minibatch size and step size (sgd mode).
    pub sgd_steps: usize,
    pub sgd_batch: usize,
    pub sgd_lr: f64,
    /// Train codebooks on at most this many vectors (all when `None`).
    pub train_sample: Option<usize>,
    /// Number of nearest coarse centers tried when encoding a vector; the
    /// chosen codes minimise the reconstruction error over those candidates.
    pub vq_beam: usize,
}

impl HQConfig {
    pub fn desk(d: usize) -> Self {
        HQConfig {
            d,
            vq_size: 256,
            num_subspaces: if d.is_multiple_of(8) { 8 } else { 1 },
            pq_size: 256,
            mode: TrainMode::Alternating,
            retrieve_m: 300,
            rerank: true,
            outer_iterations: 6,
            kmeans_iterations: 15,
            sgd_steps: 2000,
            sgd_batch: 64,
            sgd_lr: 0.05,
            train_sample: Some(25_000),
            vq_beam: 4,
        }
    }

    pub fn sub_dim(&self) -> usize {
        self.d / self.num_subspaces
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.num_subspaces == 0 || !self.d.is_multiple_of(self.num_subspaces) {
            return Err(Error::Config(format!(
                "number of subspaces {} must divide dimension {}",
                self.num_subspaces, self.d
            )));
        }
        if self.vq_size == 0 || self.pq_size == 0 || self.vq_beam == 0 {
            return Err(Error::Config("codebook sizes and vq_beam must be at least 1".into()));
        }
        if self.vq_size > u16::MAX as usize + 1 {
            return Err(Error::Config(format!("vq_size {} exceeds 65536", self.vq_size)));
        }
        if self.pq_size > 256 {
            return Err(Error::Config(format!("pq_size {} exceeds 256", self.pq_size)));
        }
        Ok(())
    }
}

/// Trained quantizers.
#[derive(Debug, Clone, PartialEq)]
pub struct HQCodebooks {
    d: usize,
    num_subspaces: usize,
    /// `vq_size x d`, row-major.
    pub vq: Vec<f32>,
    /// `d x d`, row-major.
    pub rotation: Vec<f32>,
    /// `num_subspaces x pq_size x (d / num_subspaces)`.
    pub pq: Vec<f32>,
}

/// Codes of one vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Codes {
    pub vq: u16,
    pub pq: Vec<u8>,
}

impl HQCodebooks {
    pub fn from_parts(d: usize, num_subspaces: usize, vq: Vec<f32>, rotation: Vec<f32>, pq: Vec<f32>) -> Result<Self> {
        if d == 0 || num_subspaces == 0 || !d.is_multiple_of(num_subspaces) {
            return Err(Error::Config(format!("{num_subspaces} subspaces do not divide {d}")));
        }
        if vq.is_empty() || !vq.len().is_multiple_of(d) || vq.len() / d > u16::MAX as usize + 1 {
            return Err(Error::format("codebooks", "bad vq codebook size"));
        }
        check_dim("rotation", d * d, rotation.len())?;
        if pq.is_empty() || !pq.len().is_multiple_of(d) || pq.len() / d > 256 {
            return Err(Error::format("codebooks", "bad pq codebook size"));
        }
        let books = HQCodebooks {
            d,
            num_subspaces,
            vq,
            rotation,
            pq,
        };
        if !books.all_finite() {
            return Err(Error::NonFinite("codebook entries".into()));
        }
        Ok(books)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn vq_size(&self) -> usize {
        self.vq.len() / self.d
    }

    pub fn num_subspaces(&self) -> usize {
        self.num_subspaces
    }

    pub fn sub_dim(&self) -> usize {
        self.d / self.num_subspaces
    }

    pub fn pq_size(&self) -> usize {
        self.pq.len() / self.d
    }

    pub fn vq_center(&self, j: usize) -> &[f32] {
        &self.vq[j * self.d..(j + 1) * self.d]
    }

    /// Center `c` of subspace `k`.
    pub fn pq_center(&self, k: usize, c: usize) -> &[f32] {
        let s = self.sub_dim();
        let start = (k * self.pq_size() + c) * s;
        &self.pq[start..start + s]
    }

    fn pq_book(&self, k: usize) -> &[f32] {
        let len = self.pq_size() * self.sub_dim();
        &self.pq[k * len..(k + 1) * len]
    }

    /// `R x`.
    pub fn rotate(&self, x: &[f32]) -> Vec<f32> {
        self.rotation.chunks_exact(self.d).map(|row| dot_f32(row, x)).collect()
    }

    /// `R x` in `f64`.
    fn rotate_f64(&self, x: &[f64]) -> Vec<f64> {
        self.rotation
            .chunks_exact(self.d)
            .map(|row| row.iter().zip(x).map(|(&r, &v)| r as f64 * v).sum())
            .collect()
    }

    /// `R^T y`.
    pub fn rotate_t(&self, y: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0f32; self.d];
        for (row, &v) in self.rotation.chunks_exact(self.d).zip(y) {
            for (o, &r) in out.iter_mut().zip(row) {
                *o += r * v;
            }
        }
        out
    }

    /// Max-norm deviation of `R^T R` from the identity, computed in `f64`.
    pub fn orthogonality_error(&self) -> f64 {
        let d = self.d;
        let r = &self.rotation;
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0f64;
                for k in 0..d {
                    s += r[k * d + i] as f64 * r[k * d + j] as f64;
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((s - target).abs());
            }
        }
        worst
    }

    pub fn all_finite(&self) -> bool {
        self.vq.iter().chain(&self.rotation).chain(&self.pq).all(|v| v.is_finite())
    }

    fn check_codes(&self, codes: &Codes) -> Result<()> {
        if codes.vq as usize >= self.vq_size() {
            return Err(Error::OutOfRange {
                context: "vq code",
                index: codes.vq as usize,
                len: self.vq_size(),
            });
        }
        check_dim("pq codes", self.num_subspaces, codes.pq.len())?;
        if let Some(&c) = codes.pq.iter().find(|&&c| c as usize >= self.pq_size()) {
            return Err(Error::OutOfRange {
                context: "pq code",
                index: c as usize,
                len: self.pq_size(),
            });
        }
        Ok(())
    }

    /// Best PQ codes for a rotated residual `p` and the resulting squared
    /// error `||p - PQ(p)||^2`.
    fn pq_encode_f64(&self, p: &[f64], out: &mut Vec<u8>) -> f64 {
        let s = self.sub_dim();
        out.clear();
        let mut err = 0.0;
        for k in 0..self.num_subspaces {
            let sub = &p[k * s..(k + 1) * s];
            let mut best = (0usize, f64::INFINITY);
            for (c, center) in self.pq_book(k).chunks_exact(s).enumerate() {
                let d: f64 = sub.iter().zip(center).map(|(&a, &b)| (a - b as f64) * (a - b as f64)).sum();
                if d < best.1 {
                    best = (c, d);
                }
            }
            out.push(best.0 as u8);
            err += best.1;
        }
        err
    }
}

/// Index of the nearest coarse center; ties go to the lowest index.
pub fn vq_assign(h: &[f32], books: &HQCodebooks) -> usize {
    nearest(h, &books.vq, books.d).0
}

/// The `beam` nearest coarse centers, nearest first (ties to the lower index).
fn vq_candidates(h: &[f32], books: &HQCodebooks, beam: usize) -> Vec<usize> {
    let mut top = TopK::new(beam.min(books.vq_size()));
    for (j, c) in books.vq.chunks_exact(books.d).enumerate() {
        top.push(j as u32, -squared_distance(h, c));
    }
    top.into_sorted().into_iter().map(|(j, _)| j as usize).collect()
}

/// Encodes `h`. For each of the `beam` nearest coarse centers the residual is
/// rotated and product-quantized; the candidate with the smallest total
/// reconstruction error wins (ties to the lower center index). With
/// `beam >= vq_size` the codes minimise the error over all code tuples.
pub fn quantize_beam(h: &[f32], books: &HQCodebooks, beam: usize) -> Result<Codes> {
    check_dim("quantize", books.d, h.len())?;
    let mut best: Option<(f64, Codes)> = None;
    let mut pq = Vec::with_capacity(books.num_subspaces);
    for v in vq_candidates(h, books, beam.max(1)) {
        let e: Vec<f64> = h.iter().zip(books.vq_center(v)).map(|(&a, &b)| a as f64 - b as f64).collect();
        let p = books.rotate_f64(&e);
        books.pq_encode_f64(&p, &mut pq);
        let codes = Codes { vq: v as u16, pq: pq.clone() };
        let err = reconstruction_error_f64(h, &codes, books);
        let better = match &best {
            None => true,
            Some((b, bc)) => err < *b || (err == *b && codes.vq < bc.vq),
        };
        if better {
            best = Some((err, codes));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

/// [`quantize_beam`] with a single coarse candidate (the nearest center).
pub fn quantize(h: &[f32], books: &HQCodebooks) -> Result<Codes> {
    quantize_beam(h, books, 1)
}

/// `C_VQ[v] + R^T concat(C_PQ^k[c_k])`.
pub fn reconstruct(codes: &Codes, books: &HQCodebooks) -> Result<Vec<f32>> {
    books.check_codes(codes)?;
    let q: Vec<f32> = codes
        .pq
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| books.pq_center(k, c as usize).iter().copied())
        .collect();
    let mut out = books.rotate_t(&q);
    for (o, &c) in out.iter_mut().zip(books.vq_center(codes.vq as usize)) {
        *o += c;
    }
    Ok(out)
}

/// `||h - HQ(h)||^2` with the reconstruction carried out in `f64`.
pub fn reconstruction_error_f64(h: &[f32], codes: &Codes, books: &HQCodebooks) -> f64 {
    let d = books.d;
    let mut rec: Vec<f64> = books.vq_center(codes.vq as usize).iter().map(|&v| v as f64).collect();
    for (k, &c) in codes.pq.iter().enumerate() {
        let center = books.pq_center(k, c as usize);
        let s = books.sub_dim();
        for (t, &q) in center.iter().enumerate() {
            let row = k * s + t;
            for (i, r) in rec.iter_mut().enumerate() {
                *r += books.rotation[row * d + i] as f64 * q as f64;
            }
        }
    }
    h.iter().zip(&rec).map(|(&a, &b)| (a as f64 - b).powi(2)).sum()
}

/// Per-query tables for asymmetric scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTables {
    pub vq: Vec<f32>,
    /// `num_subspaces x pq_size`, row-major.
    pub pq: Vec<f32>,
    pub pq_size: usize,
    /// Weight applied to each response's stored bias scalar.
    pub alpha: f32,
}

pub fn build_tables(hx: &[f32], books: &HQCodebooks, alpha: f32) -> Result<LookupTables> {
    check_dim("build_tables", books.d, hx.len())?;
    let vq = books.vq.chunks_exact(books.d).map(|c| dot_f32(hx, c)).collect();
    let r = books.rotate(hx);
    let s = books.sub_dim();
    let mut pq = Vec::with_capacity(books.num_subspaces * books.pq_size());
    for k in 0..books.num_subspaces {
        let sub = &r[k * s..(k + 1) * s];
        pq.extend(books.pq_book(k).chunks_exact(s).map(|c| dot_f32(sub, c)));
    }
    Ok(LookupTables {
        vq,
        pq,
        pq_size: books.pq_size(),
        alpha,
    })
}

/// `vq[v] + sum_k pq[k][c_k] (+ alpha * bias)`.
#[inline]
pub fn adc_score(tables: &LookupTables, codes: &Codes, bias: Option<f32>) -> f32 {
    let mut s = tables.vq[codes.vq as usize];
    for (k, &c) in codes.pq.iter().enumerate() {
        s += tables.pq[k * tables.pq_size + c as usize];
    }
    match bias {
        Some(b) => s + tables.alpha * b,
        None => s,
    }
}

/// Encoded response set plus what is needed to search it.
#[derive(Debug, Clone, PartialEq)]
pub struct HqIndex {
    pub books: HQCodebooks,
    pub n: usize,
    pub vq_codes: Vec<u16>,
    /// `n x num_subspaces`, row-major.
    pub pq_codes: Vec<u8>,
    /// Per-response bias scalar (log-probability), added exactly after lookup.
    pub bias: Option<Vec<f32>>,
    /// Full-precision vectors for re-ranking.
    pub vectors: Option<Vec<f32>>,
    /// Hash of the vectors the index was built from.
    pub source_hash: ContentHash,
    layout: scan::ScanLayout,
}

/// Search parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchParams {
    pub n_results: usize,
    pub retrieve_m: usize,
    pub rerank: bool,
    pub alpha: f32,
}

impl HqIndex {
    /// Assembles an index from already computed codes.
    #[allow(clippy::too_many_arguments)]
    pub fn from_codes(
        books: HQCodebooks,
        n: usize,
        vq_codes: Vec<u16>,
        pq_codes: Vec<u8>,
        bias: Option<Vec<f32>>,
        vectors: Option<Vec<f32>>,
        source_hash: ContentHash,
    ) -> Result<Self> {
        let k = books.num_subspaces();
        check_dim("vq codes", n, vq_codes.len())?;
        check_dim("pq codes", n * k, pq_codes.len())?;
        if let Some(b) = &bias {
            check_dim("index bias", n, b.len())?;
        }
        if let Some(v) = &vectors {
            check_dim("index vectors", n * books.dim(), v.len())?;
        }
        if let Some(&c) = vq_codes.iter().find(|&&c| c as usize >= books.vq_size()) {
            return Err(Error::OutOfRange {
                context: "vq code",
                index: c as usize,
                len: books.vq_size(),
            });
        }
        if let Some(&c) = pq_codes.iter().find(|&&c| c as usize >= books.pq_size()) {
            return Err(Error::OutOfRange {
                context: "pq code",
                index: c as usize,
                len: books.pq_size(),
            });
        }
        let layout = scan::ScanLayout::new(&vq_codes, &pq_codes, k);
        Ok(HqIndex {
            books,
            n,
            vq_codes,
            pq_codes,
            bias,
            vectors,
            source_hash,
            layout,
        })
    }

    /// Encodes `vectors` (`n x d`) with trained codebooks. `bias` holds one
    /// scalar per vector.
    pub fn build(
        books: HQCodebooks,
        vectors: &[f32],
        bias: Option<Vec<f32>>,
        keep_vectors: bool,
        vq_beam: usize,
        source_hash: ContentHash,
    ) -> Result<Self> {
        let d = books.d;
        if vectors.is_empty() || !vectors.len().is_multiple_of(d) {
            return Err(Error::DimensionMismatch {
                context: "index vectors",
                expected: d,
                actual: vectors.len(),
            });
        }
        let n = vectors.len() / d;
        if let Some(b) = &bias {
            check_dim("index bias", n, b.len())?;
        }
        let mut vq_codes = Vec::with_capacity(n);
        let mut pq_codes = Vec::with_capacity(n * books.num_subspaces);
        for h in vectors.chunks_exact(d) {
            let c = quantize_beam(h, &books, vq_beam)?;
            vq_codes.push(c.vq);
            pq_codes.extend_from_slice(&c.pq);
        }
        Self::from_codes(
            books,
            n,
            vq_codes,
            pq_codes,
            bias,
            keep_vectors.then(|| vectors.to_vec()),
            source_hash,
        )
    }

    pub fn codes(&self, i: usize) -> Codes {
        let k = self.books.num_subspaces;
        Codes {
            vq: self.vq_codes[i],
            pq: self.pq_codes[i * k..(i + 1) * k].to_vec(),
        }
    }

    pub fn vector(&self, i: usize) -> Option<&[f32]> {
        let d = self.books.d;
        self.vectors.as_ref().map(|v| &v[i * d..(i + 1) * d])
    }

    fn bias_of(&self, i: usize) -> f32 {
        self.bias.as_ref().map_or(0.0, |b| b[i])
    }

    /// ADC scan of every code, keeping the best `m`.
    pub fn scan(&self, tables: &LookupTables, m: usize) -> Vec<(u32, f32)> {
        let bias = self.bias.as_deref().filter(|_| tables.alpha != 0.0);
        self.layout.scan(tables, bias, m)
    }

    /// Top `n_results` responses for query `hx`.
    pub fn search(&self, hx: &[f32], params: &SearchParams) -> Result<Vec<(u32, f32)>> {
        if params.n_results == 0 {
            return Err(Error::Config("number of results must be at least 1".into()));
        }
        let tables = build_tables(hx, &self.books, params.alpha)?;
        let m = params.retrieve_m.max(params.n_results);
        let candidates = self.scan(&tables, m);
        if !params.rerank {
            let mut c = candidates;
            c.truncate(params.n_results);
            return Ok(c);
        }
        let vectors = self
            .vectors
            .as_ref()
            .ok_or_else(|| Error::Config("re-ranking needs an index built with full-precision vectors".into()))?;
        let d = self.books.d;
        let mut top = TopK::new(params.n_results);
        for (id, _) in candidates {
            let i = id as usize;
            top.push(id, exact_score(hx, &vectors[i * d..(i + 1) * d], params.alpha, self.bias_of(i)));
        }
        Ok(top.into_sorted())
    }
}

/// Exact biased score used by every full-precision path.
#[inline]
pub fn exact_score(hx: &[f32], hy: &[f32], alpha: f32, bias: f32) -> f32 {
    if alpha == 0.0 {
        dot_f32(hx, hy)
    } else {
        dot_f32(hx, hy) + alpha * bias
    }
}

/// Exhaustive top-`n` by exact (optionally biased) dot product.
pub fn exact_top_n(vectors: &[f32], d: usize, hx: &[f32], n: usize, alpha: f32, bias: Option<&[f32]>) -> Vec<(u32, f32)> {
    let mut top = TopK::new(n);
    for (i, hy) in vectors.chunks_exact(d).enumerate() {
        let b = bias.map_or(0.0, |b| b[i]);
        let s = exact_score(hx, hy, alpha, b);
        if top.threshold().is_none_or(|t| s >= t) {
            top.push(i as u32, s);
        }
    }
    top.into_sorted()
}

/// Mean of `|retrieved ∩ truth| / n` over queries; only the first `n` of each
/// list count.
pub fn recall_at(retrieved: &[Vec<u32>], truth: &[Vec<u32>], n: usize) -> Result<f64> {
    if retrieved.is_empty() {
        return Err(Error::Empty("recall queries"));
    }
    check_dim("recall lists", truth.len(), retrieved.len())?;
    let mut total = 0.0;
    for (r, t) in retrieved.iter().zip(truth) {
        let want: std::collections::HashSet<u32> = t.iter().take(n).copied().collect();
        let hit = r.iter().take(n).filter(|id| want.contains(id)).count();
        total += hit as f64 / n as f64;
    }
    Ok(total / retrieved.len() as f64)
}
