//! Sign-random-projection hashing, a simple reference point for the
//! speed/recall benchmark.
//!
//! Each vector is hashed to `bits` signs of random Gaussian projections;
//! candidates are the `m` codes with the smallest Hamming distance to the
//! query's code, re-ranked by exact dot product.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::exact_score;
use crate::error::{check_dim, Error, Result};
use crate::numeric::dot_f32;
use crate::topk::TopK;

#[derive(Debug, Clone, PartialEq)]
pub struct SignLsh {
    d: usize,
    words: usize,
    planes: Vec<f32>,
    codes: Vec<u64>,
    vectors: Vec<f32>,
}

impl SignLsh {
    /// Hashes `vectors` (`n x d`) with `64 * words` projections.
    pub fn build(vectors: &[f32], d: usize, words: usize, seed: u64) -> Result<Self> {
        if d == 0 || words == 0 || vectors.is_empty() || !vectors.len().is_multiple_of(d) {
            return Err(Error::Config("LSH needs non-empty vectors and at least one code word".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planes: Vec<f32> = (0..words * 64 * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut lsh = SignLsh {
            d,
            words,
            planes,
            codes: Vec::new(),
            vectors: vectors.to_vec(),
        };
        let codes: Vec<u64> = vectors.chunks_exact(d).flat_map(|v| lsh.hash(v)).collect();
        lsh.codes = codes;
        Ok(lsh)
    }

    pub fn hash(&self, x: &[f32]) -> Vec<u64> {
        (0..self.words)
            .map(|w| {
                let mut code = 0u64;
                for b in 0..64 {
                    let p = &self.planes[(w * 64 + b) * self.d..(w * 64 + b + 1) * self.d];
                    if dot_f32(p, x) >= 0.0 {
                        code |= 1 << b;
                    }
                }
                code
            })
            .collect()
    }

    pub fn search(&self, hx: &[f32], n_results: usize, m: usize) -> Result<Vec<(u32, f32)>> {
        check_dim("lsh query", self.d, hx.len())?;
        let q = self.hash(hx);
        let mut cand = TopK::new(m.max(n_results));
        for (i, code) in self.codes.chunks_exact(self.words).enumerate() {
            let ham: u32 = code.iter().zip(&q).map(|(a, b)| (a ^ b).count_ones()).sum();
            cand.push(i as u32, -(ham as f32));
        }
        let mut top = TopK::new(n_results);
        for (id, _) in cand.into_sorted() {
            let i = id as usize;
            top.push(id, exact_score(hx, &self.vectors[i * self.d..(i + 1) * self.d], 0.0, 0.0));
        }
        Ok(top.into_sorted())
    }
}
