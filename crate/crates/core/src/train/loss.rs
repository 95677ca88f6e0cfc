//! Batch objectives over a `K x K` score matrix whose diagonal holds the
//! true pairs.

use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, sigmoid, softplus, Real};

/// Square score matrix, row-major. Row `i` scores input `i` against every
/// response in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix<T> {
    k: usize,
    data: Vec<T>,
}

impl<T: Real> ScoreMatrix<T> {
    pub fn new(k: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != k * k {
            return Err(Error::DimensionMismatch {
                context: "score matrix (expected K*K entries)",
                expected: k * k,
                actual: data.len(),
            });
        }
        Ok(ScoreMatrix { k, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let k = rows.len();
        for r in rows {
            if r.len() != k {
                return Err(Error::DimensionMismatch {
                    context: "score matrix row (matrix must be square)",
                    expected: k,
                    actual: r.len(),
                });
            }
        }
        Ok(ScoreMatrix {
            k,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.k + j]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// K-way softmax over the in-batch responses.
    MultipleNegatives,
    /// Binary classifier: diagonal entries positive, the rest negative.
    Sigmoid,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::MultipleNegatives => "multiple_negatives",
            LossKind::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multiple_negatives" | "mn" => Ok(LossKind::MultipleNegatives),
            "sigmoid" => Ok(LossKind::Sigmoid),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }

    pub fn loss_and_grad<T: Real>(self, s: &ScoreMatrix<T>) -> (T, Vec<T>) {
        match self {
            LossKind::MultipleNegatives => multiple_negatives_loss_grad(s),
            LossKind::Sigmoid => sigmoid_matrix_loss_grad(s),
        }
    }
}

/// `J = -(1/K) sum_i [S_ii - log sum_j exp(S_ij)]`.
pub fn multiple_negatives_loss<T: Real>(s: &ScoreMatrix<T>) -> T {
    let k = s.k();
    if k == 0 {
        return T::zero();
    }
    let mut acc = T::zero();
    for i in 0..k {
        acc += log_sum_exp(s.row(i)) - s.get(i, i);
    }
    acc / T::lit(k as f64)
}

/// Loss and `dJ/dS_ij = (softmax_ij - [i == j]) / K`.
pub fn multiple_negatives_loss_grad<T: Real>(s: &ScoreMatrix<T>) -> (T, Vec<T>) {
    let k = s.k();
    let inv_k = T::one() / T::lit(k.max(1) as f64);
    let mut grad = vec![T::zero(); k * k];
    let mut loss = T::zero();
    for i in 0..k {
        let row = s.row(i);
        let lse = log_sum_exp(row);
        loss += lse - row[i];
        for j in 0..k {
            let p = (row[j] - lse).exp();
            grad[i * k + j] = (p - if i == j { T::one() } else { T::zero() }) * inv_k;
        }
    }
    (loss * inv_k, grad)
}

/// Mean binary cross-entropy of `(score, label)` pairs.
pub fn sigmoid_classifier_loss<T: Real>(pairs: &[(T, bool)]) -> Result<T> {
    if pairs.is_empty() {
        return Err(Error::Empty("sigmoid loss needs at least one pair"));
    }
    let sum: T = pairs
        .iter()
        .map(|&(s, label)| if label { softplus(-s) } else { softplus(s) })
        .sum();
    Ok(sum / T::lit(pairs.len() as f64))
}

/// Sigmoid loss over all `K^2` entries of the batch matrix: `K` positives on
/// the diagonal and `K(K-1)` negatives elsewhere.
pub fn sigmoid_matrix_loss_grad<T: Real>(s: &ScoreMatrix<T>) -> (T, Vec<T>) {
    let k = s.k();
    let n = T::lit((k * k).max(1) as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); k * k];
    for i in 0..k {
        for j in 0..k {
            let x = s.get(i, j);
            let label = i == j;
            loss += if label { softplus(-x) } else { softplus(x) };
            let target = if label { T::one() } else { T::zero() };
            grad[i * k + j] = (sigmoid(x) - target) / n;
        }
    }
    (loss / n, grad)
}

/// `J(x, y) + sum_i J(x^i, y)`.
pub fn total_multiloss<T: Real>(final_loss: T, per_feature: &[T]) -> T {
    per_feature.iter().fold(final_loss, |acc, &l| acc + l)
}
