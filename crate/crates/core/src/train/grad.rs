//! Reverse-mode gradients of the multi-loss objective for both architectures.

use super::loss::{LossKind, ScoreMatrix};
use crate::data::Example;
use crate::encoder::{DotGrads, DotProductEncoder, JointGrads, JointScorer};
use crate::error::{Error, Result};
use crate::numeric::{dot, Real};

/// Loss terms of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss<T> {
    pub final_loss: T,
    pub per_feature: Vec<T>,
}

impl<T: Real> BatchLoss<T> {
    pub fn total(&self) -> T {
        super::loss::total_multiloss(self.final_loss, &self.per_feature)
    }

    fn check_finite(&self) -> Result<()> {
        if !self.final_loss.is_finite() || self.per_feature.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!(
                "batch loss final={:?} per_feature={:?}",
                self.final_loss, self.per_feature
            )));
        }
        Ok(())
    }
}

/// A scorer that can be trained on in-batch objectives.
pub trait Trainable<T: Real>: Clone {
    type Grads;

    fn num_features(&self) -> usize;

    /// Final and per-feature `K x K` score matrices for a batch.
    fn score_matrices(&self, batch: &[&Example]) -> Result<(ScoreMatrix<T>, Vec<ScoreMatrix<T>>)>;

    fn batch_loss(&self, batch: &[&Example], kind: LossKind) -> Result<BatchLoss<T>> {
        let (s, per) = self.score_matrices(batch)?;
        let loss = BatchLoss {
            final_loss: kind.loss_and_grad(&s).0,
            per_feature: per.iter().map(|m| kind.loss_and_grad(m).0).collect(),
        };
        loss.check_finite()?;
        Ok(loss)
    }

    /// Exact gradients of the total multi-loss with respect to every parameter.
    fn compute_gradients(&self, batch: &[&Example], kind: LossKind) -> Result<(BatchLoss<T>, Self::Grads)>;

    fn apply_gradients(&mut self, grads: &Self::Grads, lr: T);

    fn grad_squared_norm(grads: &Self::Grads) -> f64;

    fn grads_finite(grads: &Self::Grads) -> bool;

    fn vocab_rows(&self) -> usize;

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut [T]));

    fn dense_grads(&self, grads: &Self::Grads) -> Vec<(String, Vec<T>)>;
}

fn check_grads<T: Real, M: Trainable<T>>(grads: &M::Grads, loss: &BatchLoss<T>) -> Result<()> {
    if !M::grads_finite(grads) {
        return Err(Error::NonFinite(format!(
            "gradient contains non-finite entries (loss final={:?} per_feature={:?})",
            loss.final_loss, loss.per_feature
        )));
    }
    Ok(())
}

/// `dH_left[i] = sum_j G_ij H_right[j]` when `transpose` is false, otherwise
/// `dH_left[j] = sum_i G_ij H_right[i]`.
fn propagate<T: Real>(g: &[T], k: usize, right: &[&Vec<T>], transpose: bool) -> Vec<Vec<T>> {
    let dim = right[0].len();
    (0..k)
        .map(|a| {
            let mut out = vec![T::zero(); dim];
            for b in 0..k {
                let w = if transpose { g[b * k + a] } else { g[a * k + b] };
                if w == T::zero() {
                    continue;
                }
                for (o, &h) in out.iter_mut().zip(right[b].iter()) {
                    *o += w * h;
                }
            }
            out
        })
        .collect()
}

fn matrix<T: Real>(left: &[&Vec<T>], right: &[&Vec<T>]) -> ScoreMatrix<T> {
    let k = left.len();
    let mut data = Vec::with_capacity(k * k);
    for x in left {
        for y in right {
            data.push(dot(x, y));
        }
    }
    ScoreMatrix::new(k, data).expect("square by construction")
}

impl<T: Real> Trainable<T> for DotProductEncoder<T> {
    type Grads = DotGrads<T>;

    fn num_features(&self) -> usize {
        DotProductEncoder::num_features(self)
    }

    fn score_matrices(&self, batch: &[&Example]) -> Result<(ScoreMatrix<T>, Vec<ScoreMatrix<T>>)> {
        let xs = batch.iter().map(|e| self.encode_input(&e.input)).collect::<Result<Vec<_>>>()?;
        let ys = batch.iter().map(|e| self.encode_response(&e.response)).collect::<Result<Vec<_>>>()?;
        let s = matrix(&xs.iter().map(|e| &e.h).collect::<Vec<_>>(), &ys.iter().map(|e| &e.h).collect::<Vec<_>>());
        let per = (0..self.num_features())
            .map(|m| {
                matrix(
                    &xs.iter().map(|e| &e.per_feature[m]).collect::<Vec<_>>(),
                    &ys.iter().map(|e| &e.per_feature[m]).collect::<Vec<_>>(),
                )
            })
            .collect();
        Ok((s, per))
    }

    fn compute_gradients(&self, batch: &[&Example], kind: LossKind) -> Result<(BatchLoss<T>, DotGrads<T>)> {
        let k = batch.len();
        let m = self.num_features();
        let xt = batch.iter().map(|e| self.trace_input(&e.input)).collect::<Result<Vec<_>>>()?;
        let yt = batch.iter().map(|e| self.trace_response(&e.response)).collect::<Result<Vec<_>>>()?;

        let hx: Vec<&Vec<T>> = xt.iter().map(|t| t.fusion.last().unwrap()).collect();
        let hy: Vec<&Vec<T>> = yt.iter().map(|t| t.fusion.last().unwrap()).collect();
        let (final_loss, g) = kind.loss_and_grad(&matrix(&hx, &hy));
        let dhx = propagate(&g, k, &hy, false);
        let dhy = propagate(&g, k, &hx, true);

        let mut per_feature = Vec::with_capacity(m);
        let mut dhx_f: Vec<Vec<Vec<T>>> = vec![Vec::with_capacity(m); k];
        let mut dhy_f: Vec<Vec<Vec<T>>> = vec![Vec::with_capacity(m); k];
        for f in 0..m {
            let fx: Vec<&Vec<T>> = xt.iter().map(|t| t.features[f].last().unwrap()).collect();
            let fy: Vec<&Vec<T>> = yt.iter().map(|t| t.features[f].last().unwrap()).collect();
            let (l, gf) = kind.loss_and_grad(&matrix(&fx, &fy));
            per_feature.push(l);
            for (i, d) in propagate(&gf, k, &fy, false).into_iter().enumerate() {
                dhx_f[i].push(d);
            }
            for (j, d) in propagate(&gf, k, &fx, true).into_iter().enumerate() {
                dhy_f[j].push(d);
            }
        }
        let loss = BatchLoss {
            final_loss,
            per_feature,
        };
        loss.check_finite()?;

        let mut grads = self.zero_grads();
        for (i, ex) in batch.iter().enumerate() {
            self.backward_input(&ex.input, &xt[i], &dhx[i], &dhx_f[i], &mut grads);
            self.backward_response(&ex.response, &yt[i], &dhy[i], &dhy_f[i], &mut grads);
        }
        check_grads::<T, Self>(&grads, &loss)?;
        Ok((loss, grads))
    }

    fn apply_gradients(&mut self, grads: &DotGrads<T>, lr: T) {
        DotProductEncoder::apply_gradients(self, grads, lr)
    }

    fn grad_squared_norm(grads: &DotGrads<T>) -> f64 {
        grads.squared_norm()
    }

    fn grads_finite(grads: &DotGrads<T>) -> bool {
        grads.all_finite()
    }

    fn vocab_rows(&self) -> usize {
        self.vocab_size()
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut [T])) {
        DotProductEncoder::for_each_param_mut(self, f)
    }

    fn dense_grads(&self, grads: &DotGrads<T>) -> Vec<(String, Vec<T>)> {
        grads.dense_slices(self.vocab_size())
    }
}

impl<T: Real> Trainable<T> for JointScorer<T> {
    type Grads = JointGrads<T>;

    fn num_features(&self) -> usize {
        JointScorer::num_features(self)
    }

    fn score_matrices(&self, batch: &[&Example]) -> Result<(ScoreMatrix<T>, Vec<ScoreMatrix<T>>)> {
        let k = batch.len();
        let m = self.num_features();
        let xe = batch.iter().map(|e| self.embed_input(&e.input)).collect::<Result<Vec<_>>>()?;
        let ye = batch.iter().map(|e| self.embed_response(&e.response)).collect::<Result<Vec<_>>>()?;
        let mut s = Vec::with_capacity(k * k);
        let mut per = vec![Vec::with_capacity(k * k); m];
        for x in &xe {
            for y in &ye {
                let t = self.trace_embedded(x, y)?;
                s.push(t.score);
                for (f, v) in t.per_feature.into_iter().enumerate() {
                    per[f].push(v);
                }
            }
        }
        Ok((
            ScoreMatrix::new(k, s)?,
            per.into_iter().map(|d| ScoreMatrix::new(k, d)).collect::<Result<_>>()?,
        ))
    }

    fn compute_gradients(&self, batch: &[&Example], kind: LossKind) -> Result<(BatchLoss<T>, JointGrads<T>)> {
        let k = batch.len();
        let m = self.num_features();
        let d = self.embedding_dim();
        let xe = batch.iter().map(|e| self.embed_input(&e.input)).collect::<Result<Vec<_>>>()?;
        let ye = batch.iter().map(|e| self.embed_response(&e.response)).collect::<Result<Vec<_>>>()?;
        let mut traces = Vec::with_capacity(k * k);
        for x in &xe {
            for y in &ye {
                traces.push(self.trace_embedded(x, y)?);
            }
        }
        let s = ScoreMatrix::new(k, traces.iter().map(|t| t.score).collect())?;
        let (final_loss, g) = kind.loss_and_grad(&s);
        let mut per_feature = Vec::with_capacity(m);
        let mut gf = Vec::with_capacity(m);
        for f in 0..m {
            let sf = ScoreMatrix::new(k, traces.iter().map(|t| t.per_feature[f]).collect())?;
            let (l, gr) = kind.loss_and_grad(&sf);
            per_feature.push(l);
            gf.push(gr);
        }
        let loss = BatchLoss {
            final_loss,
            per_feature,
        };
        loss.check_finite()?;

        let mut grads = self.zero_grads();
        let mut gx = vec![vec![vec![T::zero(); d]; m]; k];
        let mut gy = vec![vec![T::zero(); d]; k];
        for i in 0..k {
            for j in 0..k {
                let idx = i * k + j;
                let g_per: Vec<T> = gf.iter().map(|gr| gr[idx]).collect();
                let (dx, dy) = self.backward_pair(&traces[idx], g[idx], &g_per, &mut grads);
                for f in 0..m {
                    for (a, &b) in gx[i][f].iter_mut().zip(&dx[f]) {
                        *a += b;
                    }
                }
                for (a, &b) in gy[j].iter_mut().zip(&dy) {
                    *a += b;
                }
            }
        }
        for (i, ex) in batch.iter().enumerate() {
            for f in 0..m {
                grads.input_embeddings.accumulate_bag(&ex.input[f], &gx[i][f]);
            }
            grads.response_embeddings.accumulate_bag(&ex.response, &gy[i]);
        }
        check_grads::<T, Self>(&grads, &loss)?;
        Ok((loss, grads))
    }

    fn apply_gradients(&mut self, grads: &JointGrads<T>, lr: T) {
        JointScorer::apply_gradients(self, grads, lr)
    }

    fn grad_squared_norm(grads: &JointGrads<T>) -> f64 {
        grads.squared_norm()
    }

    fn grads_finite(grads: &JointGrads<T>) -> bool {
        grads.all_finite()
    }

    fn vocab_rows(&self) -> usize {
        self.vocab_size()
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut [T])) {
        JointScorer::for_each_param_mut(self, f)
    }

    fn dense_grads(&self, grads: &JointGrads<T>) -> Vec<(String, Vec<T>)> {
        grads.dense_slices(self.vocab_size())
    }
}
