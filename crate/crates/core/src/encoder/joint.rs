use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dense, EmbeddingTable, SparseRows, Tower};
use crate::error::{check_dim, Error, Result};
use crate::numeric::Real;
use crate::text::FeatureBag;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub features: usize,
    pub tower: Vec<usize>,
    pub final_layers: Vec<usize>,
}

impl JointConfig {
    pub fn desk(vocab_size: usize, features: usize) -> Self {
        JointConfig {
            vocab_size,
            embedding_dim: 64,
            features,
            tower: vec![64, 64, 64],
            final_layers: vec![64],
        }
    }

    /// Production-sized configuration: d = 320, towers 500-300-100.
    pub fn full_scale(vocab_size: usize, features: usize) -> Self {
        JointConfig {
            vocab_size,
            embedding_dim: 320,
            features,
            tower: vec![500, 300, 100],
            final_layers: vec![100],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.features == 0 {
            return Err(Error::Config("embedding_dim and features must be positive".into()));
        }
        if self.tower.iter().chain(&self.final_layers).any(|&s| s == 0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Joint scorer. Subnetwork `i` reads `[embed(x^i); embed(y)]` through a tanh
/// tower into `h^i` and a linear head `S(x^i, y)`; the final subnetwork reads
/// the concatenation of all `h^i` and emits `S(x, y)` through a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct JointScorer<T> {
    pub input_embeddings: EmbeddingTable<T>,
    pub response_embeddings: EmbeddingTable<T>,
    pub feature_towers: Vec<Tower<T>>,
    pub feature_heads: Vec<Dense<T>>,
    pub final_tower: Tower<T>,
    pub final_head: Dense<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointGrads<T> {
    pub input_embeddings: SparseRows<T>,
    pub response_embeddings: SparseRows<T>,
    pub feature_towers: Vec<Tower<T>>,
    pub feature_heads: Vec<Dense<T>>,
    pub final_tower: Tower<T>,
    pub final_head: Dense<T>,
}

/// Activations for one (input, response) pair.
#[derive(Debug, Clone)]
pub struct PairTrace<T> {
    pub features: Vec<Vec<Vec<T>>>,
    pub final_tower: Vec<Vec<T>>,
    pub score: T,
    pub per_feature: Vec<T>,
}

impl<T: Real> JointScorer<T> {
    pub fn new<R: Rng>(cfg: &JointConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embedding_dim;
        let input_embeddings = EmbeddingTable::random(cfg.vocab_size, d, rng);
        let response_embeddings = EmbeddingTable::random(cfg.vocab_size, d, rng);
        let mut feature_towers = Vec::new();
        let mut feature_heads = Vec::new();
        for _ in 0..cfg.features {
            let t = Tower::random(2 * d, &cfg.tower, rng);
            feature_heads.push(Dense::random(t.output_dim(), 1, rng));
            feature_towers.push(t);
        }
        let concat = feature_towers.iter().map(Tower::output_dim).sum();
        let final_tower = Tower::random(concat, &cfg.final_layers, rng);
        let final_head = Dense::random(final_tower.output_dim(), 1, rng);
        Ok(JointScorer {
            input_embeddings,
            response_embeddings,
            feature_towers,
            feature_heads,
            final_tower,
            final_head,
        })
    }

    pub fn from_parts(
        input_embeddings: EmbeddingTable<T>,
        response_embeddings: EmbeddingTable<T>,
        feature_towers: Vec<Tower<T>>,
        feature_heads: Vec<Dense<T>>,
        final_tower: Tower<T>,
        final_head: Dense<T>,
    ) -> Result<Self> {
        let m = JointScorer {
            input_embeddings,
            response_embeddings,
            feature_towers,
            feature_heads,
            final_tower,
            final_head,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.feature_towers.is_empty() {
            return Err(Error::Config("at least one input feature is required".into()));
        }
        check_dim("embedding dims", self.input_embeddings.dim(), self.response_embeddings.dim())?;
        check_dim("feature head count", self.feature_towers.len(), self.feature_heads.len())?;
        let mut concat = 0;
        for (t, h) in self.feature_towers.iter().zip(&self.feature_heads) {
            check_dim("joint tower input", 2 * self.input_embeddings.dim(), t.input_dim())?;
            check_dim("feature head input", t.output_dim(), h.inputs)?;
            check_dim("feature head output", 1, h.outputs)?;
            concat += t.output_dim();
        }
        check_dim("final tower input", concat, self.final_tower.input_dim())?;
        check_dim("final head input", self.final_tower.output_dim(), self.final_head.inputs)?;
        check_dim("final head output", 1, self.final_head.outputs)?;
        Ok(())
    }

    pub fn num_features(&self) -> usize {
        self.feature_towers.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.input_embeddings.dim()
    }

    pub fn vocab_size(&self) -> usize {
        self.input_embeddings.rows()
    }

    pub fn embed_input(&self, bags: &[FeatureBag]) -> Result<Vec<Vec<T>>> {
        check_dim("feature count", self.num_features(), bags.len())?;
        bags.iter().map(|b| self.input_embeddings.embed_bag(b)).collect()
    }

    pub fn embed_response(&self, bag: &FeatureBag) -> Result<Vec<T>> {
        self.response_embeddings.embed_bag(bag)
    }

    /// Forward pass from precomputed embeddings.
    pub fn trace_embedded(&self, x_embs: &[Vec<T>], y_emb: &[T]) -> Result<PairTrace<T>> {
        check_dim("feature count", self.num_features(), x_embs.len())?;
        let mut features = Vec::with_capacity(x_embs.len());
        let mut per_feature = Vec::with_capacity(x_embs.len());
        let mut concat = Vec::new();
        for ((tower, head), xe) in self.feature_towers.iter().zip(&self.feature_heads).zip(x_embs) {
            let mut z = xe.clone();
            z.extend_from_slice(y_emb);
            let trace = tower.forward_trace(z)?;
            let top = trace.last().unwrap();
            per_feature.push(head.affine(top)[0]);
            concat.extend_from_slice(top);
            features.push(trace);
        }
        let final_tower = self.final_tower.forward_trace(concat)?;
        let score = self.final_head.affine(final_tower.last().unwrap())[0];
        Ok(PairTrace {
            features,
            final_tower,
            score,
            per_feature,
        })
    }

    /// `(S(x, y), [S(x^i, y)])`.
    pub fn score(&self, x_bags: &[FeatureBag], y_bag: &FeatureBag) -> Result<(T, Vec<T>)> {
        let xe = self.embed_input(x_bags)?;
        let ye = self.embed_response(y_bag)?;
        let t = self.trace_embedded(&xe, &ye)?;
        Ok((t.score, t.per_feature))
    }

    /// Backpropagates `dL/dS` and `dL/dS^i` for one pair. Returns the gradient
    /// with respect to each input-feature embedding and the response embedding.
    pub fn backward_pair(
        &self,
        trace: &PairTrace<T>,
        grad_score: T,
        grad_per_feature: &[T],
        grads: &mut JointGrads<T>,
    ) -> (Vec<Vec<T>>, Vec<T>) {
        let d = self.embedding_dim();
        let final_top = trace.final_tower.last().unwrap();
        let g_final_top = self.final_head.backward(final_top, &[grad_score], &mut grads.final_head);
        let g_concat = self.final_tower.backward(&trace.final_tower, &g_final_top, &mut grads.final_tower);

        let mut g_x = Vec::with_capacity(self.num_features());
        let mut g_y = vec![T::zero(); d];
        let mut offset = 0;
        for i in 0..self.num_features() {
            let tower = &self.feature_towers[i];
            let width = tower.output_dim();
            let top = trace.features[i].last().unwrap();
            let g_head = self.feature_heads[i].backward(top, &[grad_per_feature[i]], &mut grads.feature_heads[i]);
            let g_top: Vec<T> = g_concat[offset..offset + width]
                .iter()
                .zip(&g_head)
                .map(|(&a, &b)| a + b)
                .collect();
            offset += width;
            let g_z = tower.backward(&trace.features[i], &g_top, &mut grads.feature_towers[i]);
            g_x.push(g_z[..d].to_vec());
            for (a, &b) in g_y.iter_mut().zip(&g_z[d..]) {
                *a += b;
            }
        }
        (g_x, g_y)
    }

    pub fn zero_grads(&self) -> JointGrads<T> {
        JointGrads {
            input_embeddings: SparseRows::new(self.embedding_dim()),
            response_embeddings: SparseRows::new(self.embedding_dim()),
            feature_towers: self.feature_towers.iter().map(Tower::zeros_like).collect(),
            feature_heads: self.feature_heads.iter().map(Dense::zeros_like).collect(),
            final_tower: self.final_tower.zeros_like(),
            final_head: self.final_head.zeros_like(),
        }
    }

    pub fn apply_gradients(&mut self, g: &JointGrads<T>, lr: T) {
        g.input_embeddings.apply(&mut self.input_embeddings, lr);
        g.response_embeddings.apply(&mut self.response_embeddings, lr);
        for (t, gt) in self.feature_towers.iter_mut().zip(&g.feature_towers) {
            t.add_scaled(gt, -lr);
        }
        for (h, gh) in self.feature_heads.iter_mut().zip(&g.feature_heads) {
            h.add_scaled(gh, -lr);
        }
        self.final_tower.add_scaled(&g.final_tower, -lr);
        self.final_head.add_scaled(&g.final_head, -lr);
    }

    pub fn cast<U: Real>(&self) -> JointScorer<U> {
        JointScorer {
            input_embeddings: self.input_embeddings.cast(),
            response_embeddings: self.response_embeddings.cast(),
            feature_towers: self.feature_towers.iter().map(Tower::cast).collect(),
            feature_heads: self.feature_heads.iter().map(Dense::cast).collect(),
            final_tower: self.final_tower.cast(),
            final_head: self.final_head.cast(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.input_embeddings.all_finite()
            && self.response_embeddings.all_finite()
            && self.feature_towers.iter().all(Tower::all_finite)
            && self.feature_heads.iter().all(Dense::all_finite)
            && self.final_tower.all_finite()
            && self.final_head.all_finite()
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut [T])) {
        f("input_embeddings".into(), self.input_embeddings.data_mut());
        f("response_embeddings".into(), self.response_embeddings.data_mut());
        for (i, t) in self.feature_towers.iter_mut().enumerate() {
            t.for_each_slice_mut(&format!("feature_tower{i}"), f);
        }
        for (i, h) in self.feature_heads.iter_mut().enumerate() {
            f(format!("feature_head{i}.w"), &mut h.weights);
            f(format!("feature_head{i}.b"), &mut h.bias);
        }
        self.final_tower.for_each_slice_mut("final_tower", f);
        f("final_head.w".into(), &mut self.final_head.weights);
        f("final_head.b".into(), &mut self.final_head.bias);
    }
}

impl<T: Real> JointGrads<T> {
    pub fn squared_norm(&self) -> f64 {
        self.input_embeddings.squared_norm()
            + self.response_embeddings.squared_norm()
            + self.feature_towers.iter().map(Tower::squared_norm).sum::<f64>()
            + self.feature_heads.iter().map(Dense::squared_norm).sum::<f64>()
            + self.final_tower.squared_norm()
            + self.final_head.squared_norm()
    }

    pub fn all_finite(&self) -> bool {
        self.input_embeddings.all_finite()
            && self.response_embeddings.all_finite()
            && self.feature_towers.iter().all(Tower::all_finite)
            && self.feature_heads.iter().all(Dense::all_finite)
            && self.final_tower.all_finite()
            && self.final_head.all_finite()
    }

    pub fn dense_slices(&self, vocab_rows: usize) -> Vec<(String, Vec<T>)> {
        let mut out = vec![
            ("input_embeddings".to_string(), self.input_embeddings.to_dense(vocab_rows)),
            ("response_embeddings".to_string(), self.response_embeddings.to_dense(vocab_rows)),
        ];
        let mut push = |name: String, s: &[T]| out.push((name, s.to_vec()));
        for (i, t) in self.feature_towers.iter().enumerate() {
            t.for_each_slice(&format!("feature_tower{i}"), &mut push);
        }
        for (i, h) in self.feature_heads.iter().enumerate() {
            push(format!("feature_head{i}.w"), &h.weights);
            push(format!("feature_head{i}.b"), &h.bias);
        }
        self.final_tower.for_each_slice("final_tower", &mut push);
        push("final_head.w".into(), &self.final_head.weights);
        push("final_head.b".into(), &self.final_head.bias);
        out
    }
}
