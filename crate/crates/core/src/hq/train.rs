//! Codebook and rotation training.
//!
//! Alternating mode: k-means for the coarse codebook, then rounds of
//! per-subspace Lloyd updates (warm-started) and an orthogonal Procrustes
//! update of `R`. SGD mode: minibatch gradient steps on every codebook and on
//! `R`, which is pulled back to the orthogonal group by a QR step after each
//! update.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kmeans::{kmeans_pp, lloyd, nearest};
use super::{HQCodebooks, HQConfig, TrainMode};
use crate::error::{Error, Result};

/// Reconstruction errors recorded during training (mean squared error).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    /// Error of the coarse quantizer alone.
    pub vq_only_error: f64,
    /// Error before the first residual update.
    pub initial_error: f64,
    /// One entry per alternating round, or per SGD step (minibatch error).
    pub errors: Vec<f64>,
}

fn identity(d: usize) -> Vec<f32> {
    let mut r = vec![0.0f32; d * d];
    for i in 0..d {
        r[i * d + i] = 1.0;
    }
    r
}

fn rotate_rows(rotation: &[f32], d: usize, data: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(data.len());
    for x in data.chunks_exact(d) {
        for row in rotation.chunks_exact(d) {
            out.push(crate::numeric::dot_f32(row, x));
        }
    }
    out
}

fn subspace(data: &[f32], d: usize, k: usize, s: usize) -> Vec<f32> {
    data.chunks_exact(d).flat_map(|x| x[k * s..(k + 1) * s].iter().copied()).collect()
}

/// Mean over rows of `sum_k min_c ||p^k - C^k[c]||^2` for rotated rows `p`.
fn pq_error(rotated: &[f32], d: usize, s: usize, pq: &[f32], pq_size: usize) -> f64 {
    let n = rotated.len() / d;
    let subspaces = d / s;
    let mut total = 0.0f64;
    for p in rotated.chunks_exact(d) {
        for k in 0..subspaces {
            let book = &pq[k * pq_size * s..(k + 1) * pq_size * s];
            total += nearest(&p[k * s..(k + 1) * s], book, s).1 as f64;
        }
    }
    total / n.max(1) as f64
}

/// Orthogonal `R` minimising `sum_i ||R e_i - q_i||^2`: with
/// `M = sum_i q_i e_i^T = U S V^T`, `R = U V^T`.
fn procrustes(residuals: &[f32], targets: &[f32], d: usize) -> Option<Vec<f32>> {
    let mut m = vec![0.0f64; d * d];
    for (e, q) in residuals.chunks_exact(d).zip(targets.chunks_exact(d)) {
        for (i, &qi) in q.iter().enumerate() {
            if qi == 0.0 {
                continue;
            }
            let row = &mut m[i * d..(i + 1) * d];
            for (mj, &ej) in row.iter_mut().zip(e) {
                *mj += qi as f64 * ej as f64;
            }
        }
    }
    if m.iter().all(|&v| v == 0.0) {
        return None;
    }
    let svd = DMatrix::from_row_slice(d, d, &m).svd(true, true);
    let r = svd.u? * svd.v_t?;
    Some((0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| r[(i, j)] as f32).collect())
}

/// Rows of `data` picked for training.
fn training_rows(vectors: &[f32], d: usize, cfg: &HQConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = vectors.len() / d;
    match cfg.train_sample {
        Some(s) if s < n && s >= cfg.vq_size.max(cfg.pq_size) => {
            let mut idx = sample(rng, n, s).into_vec();
            idx.sort_unstable();
            idx.iter().flat_map(|&i| vectors[i * d..(i + 1) * d].iter().copied()).collect()
        }
        _ => vectors.to_vec(),
    }
}

/// Trains codebooks on `vectors` (`n x d`, row-major). Deterministic per seed.
pub fn train_hq(vectors: &[f32], cfg: &HQConfig, seed: u64) -> Result<(HQCodebooks, TrainTrace)> {
    cfg.validate()?;
    let d = cfg.d;
    if !vectors.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            context: "training vectors",
            expected: d,
            actual: vectors.len() % d,
        });
    }
    let n = vectors.len() / d;
    if n < cfg.vq_size || n < cfg.pq_size {
        return Err(Error::Config(format!(
            "need at least max(vq_size, pq_size) = {} vectors, got {n}",
            cfg.vq_size.max(cfg.pq_size)
        )));
    }
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training vectors".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = training_rows(vectors, d, cfg, &mut rng);
    match cfg.mode {
        TrainMode::Alternating => train_alternating(&data, cfg, &mut rng),
        TrainMode::Sgd => train_sgd(&data, cfg, &mut rng),
    }
}

fn residuals(data: &[f32], d: usize, vq: &[f32], assign: &[usize]) -> Vec<f32> {
    let mut e = Vec::with_capacity(data.len());
    for (x, &a) in data.chunks_exact(d).zip(assign) {
        e.extend(x.iter().zip(&vq[a * d..(a + 1) * d]).map(|(v, c)| v - c));
    }
    e
}

fn train_alternating(data: &[f32], cfg: &HQConfig, rng: &mut ChaCha8Rng) -> Result<(HQCodebooks, TrainTrace)> {
    let d = cfg.d;
    let s = cfg.sub_dim();
    let kk = cfg.num_subspaces;
    let mut vq = kmeans_pp(data, d, cfg.vq_size, rng);
    let (assign, vq_err) = lloyd(data, d, &mut vq, cfg.kmeans_iterations);
    let e = residuals(data, d, &vq, &assign);

    let mut rotation = identity(d);
    let mut pq = Vec::with_capacity(kk * cfg.pq_size * s);
    for k in 0..kk {
        pq.extend(kmeans_pp(&subspace(&e, d, k, s), s, cfg.pq_size, rng));
    }
    let mut trace = TrainTrace {
        vq_only_error: vq_err,
        initial_error: pq_error(&e, d, s, &pq, cfg.pq_size),
        errors: Vec::with_capacity(cfg.outer_iterations),
    };

    for _ in 0..cfg.outer_iterations {
        let p = rotate_rows(&rotation, d, &e);
        let mut target = vec![0.0f32; p.len()];
        for k in 0..kk {
            let book = &mut pq[k * cfg.pq_size * s..(k + 1) * cfg.pq_size * s];
            let (codes, _) = lloyd(&subspace(&p, d, k, s), s, book, cfg.kmeans_iterations);
            for (i, &c) in codes.iter().enumerate() {
                target[i * d + k * s..i * d + (k + 1) * s].copy_from_slice(&book[c * s..(c + 1) * s]);
            }
        }
        let before = pq_error(&p, d, s, &pq, cfg.pq_size);
        if let Some(r) = procrustes(&e, &target, d) {
            let after = pq_error(&rotate_rows(&r, d, &e), d, s, &pq, cfg.pq_size);
            // The update is optimal for fixed codes; only f32 rounding could undo it.
            if after <= before {
                rotation = r;
            }
        }
        trace.errors.push(pq_error(&rotate_rows(&rotation, d, &e), d, s, &pq, cfg.pq_size));
    }
    let books = HQCodebooks::from_parts(d, kk, vq, rotation, pq)?;
    Ok((books, trace))
}

/// Q factor of `m` with the signs fixed so that `diag(R) >= 0`.
fn orthogonalize(m: &[f64], d: usize) -> Vec<f64> {
    let qr = DMatrix::from_row_slice(d, d, m).qr();
    let (q, r) = (qr.q(), qr.r());
    let mut out = vec![0.0; d * d];
    for j in 0..d {
        let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            out[i * d + j] = q[(i, j)] * sign;
        }
    }
    out
}

fn train_sgd(data: &[f32], cfg: &HQConfig, rng: &mut ChaCha8Rng) -> Result<(HQCodebooks, TrainTrace)> {
    let d = cfg.d;
    let s = cfg.sub_dim();
    let kk = cfg.num_subspaces;
    let n = data.len() / d;
    let row = |i: usize| &data[i * d..(i + 1) * d];

    let mut vq: Vec<f32> = sample(rng, n, cfg.vq_size).iter().flat_map(|i| row(i).iter().copied()).collect();
    let assign: Vec<usize> = data.chunks_exact(d).map(|x| nearest(x, &vq, d).0).collect();
    let e = residuals(data, d, &vq, &assign);
    let vq_err = e.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / n as f64;
    let mut pq = Vec::with_capacity(kk * cfg.pq_size * s);
    for k in 0..kk {
        let picks = sample(rng, n, cfg.pq_size);
        for i in picks.iter() {
            pq.extend_from_slice(&e[i * d + k * s..i * d + (k + 1) * s]);
        }
    }
    let mut rotation: Vec<f64> = identity(d).into_iter().map(|v| v as f64).collect();
    let mut trace = TrainTrace {
        vq_only_error: vq_err,
        initial_error: pq_error(&e, d, s, &pq, cfg.pq_size),
        errors: Vec::with_capacity(cfg.sgd_steps),
    };

    let lr = cfg.sgd_lr;
    let batch = cfg.sgd_batch.max(1);
    let scale = 2.0 / batch as f64;
    let mut g_vq = vec![0.0f64; vq.len()];
    let mut g_pq = vec![0.0f64; pq.len()];
    let mut g_r = vec![0.0f64; d * d];
    for _ in 0..cfg.sgd_steps {
        g_vq.iter_mut().for_each(|g| *g = 0.0);
        g_pq.iter_mut().for_each(|g| *g = 0.0);
        g_r.iter_mut().for_each(|g| *g = 0.0);
        let r32: Vec<f32> = rotation.iter().map(|&v| v as f32).collect();
        let mut loss = 0.0f64;
        for _ in 0..batch {
            let x = row(rng.random_range(0..n));
            let (v, _) = nearest(x, &vq, d);
            let ev: Vec<f64> = x.iter().zip(&vq[v * d..(v + 1) * d]).map(|(&a, &b)| (a - b) as f64).collect();
            let p: Vec<f32> = rotate_rows(&r32, d, &ev.iter().map(|&t| t as f32).collect::<Vec<_>>());
            let mut q = vec![0.0f64; d];
            let mut codes = Vec::with_capacity(kk);
            for k in 0..kk {
                let book = &pq[k * cfg.pq_size * s..(k + 1) * cfg.pq_size * s];
                let (c, _) = nearest(&p[k * s..(k + 1) * s], book, s);
                codes.push(c);
                for t in 0..s {
                    q[k * s + t] = book[c * s + t] as f64;
                }
            }
            // err = e - R^T q
            let mut err = ev.clone();
            for (i, &qi) in q.iter().enumerate() {
                for (j, ej) in err.iter_mut().enumerate() {
                    *ej -= rotation[i * d + j] * qi;
                }
            }
            loss += err.iter().map(|v| v * v).sum::<f64>();
            // dL/dc_v = -2 err; dL/dq = -2 R err; dL/dR = -2 q err^T.
            for (g, &ej) in g_vq[v * d..(v + 1) * d].iter_mut().zip(&err) {
                *g -= scale * ej;
            }
            for (k, &c) in codes.iter().enumerate() {
                for t in 0..s {
                    let i = k * s + t;
                    let r_err: f64 = (0..d).map(|j| rotation[i * d + j] * err[j]).sum();
                    g_pq[(k * cfg.pq_size + c) * s + t] -= scale * r_err;
                }
            }
            for (i, &qi) in q.iter().enumerate() {
                for (j, &ej) in err.iter().enumerate() {
                    g_r[i * d + j] -= scale * qi * ej;
                }
            }
        }
        trace.errors.push(loss / batch as f64);
        for (c, g) in vq.iter_mut().zip(&g_vq) {
            *c -= (lr * g) as f32;
        }
        for (c, g) in pq.iter_mut().zip(&g_pq) {
            *c -= (lr * g) as f32;
        }
        for (r, g) in rotation.iter_mut().zip(&g_r) {
            *r -= lr * g;
        }
        rotation = orthogonalize(&rotation, d);
        if !rotation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("rotation after SGD step".into()));
        }
    }
    let books = HQCodebooks::from_parts(d, kk, vq, rotation.into_iter().map(|v| v as f32).collect(), pq)?;
    Ok((books, trace))
}
