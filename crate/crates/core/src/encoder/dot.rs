use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EmbeddingTable, SparseRows, Tower};
use crate::error::{check_dim, Error, Result};
use crate::numeric::{dot, Real};
use crate::text::FeatureBag;

/// Shape of a dot-product encoder. Both sides share the same sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DotConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub features: usize,
    pub tower: Vec<usize>,
    pub fusion: Vec<usize>,
}

impl DotConfig {
    /// Desk-scale default: d = 64, towers 64-64-64, two fusion layers of 64.
    pub fn desk(vocab_size: usize, features: usize) -> Self {
        DotConfig {
            vocab_size,
            embedding_dim: 64,
            features,
            tower: vec![64, 64, 64],
            fusion: vec![64, 64],
        }
    }

    /// Production-sized configuration: d = 320, towers 300-300-500.
    pub fn full_scale(vocab_size: usize, features: usize) -> Self {
        DotConfig {
            vocab_size,
            embedding_dim: 320,
            features,
            tower: vec![300, 300, 500],
            fusion: vec![500, 500],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if self.features == 0 {
            return Err(Error::Config("at least one input feature is required".into()));
        }
        if self.tower.iter().chain(&self.fusion).any(|&s| s == 0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Final and per-feature encodings of one side.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding<T> {
    pub h: Vec<T>,
    pub per_feature: Vec<Vec<T>>,
}

/// Forward activations of one side, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct SideTrace<T> {
    pub features: Vec<Vec<Vec<T>>>,
    pub fusion: Vec<Vec<T>>,
}

impl<T: Real> SideTrace<T> {
    pub fn encoding(&self) -> Encoding<T> {
        Encoding {
            h: self.fusion.last().unwrap().clone(),
            per_feature: self.features.iter().map(|t| t.last().unwrap().clone()).collect(),
        }
    }
}

/// Multi-feature dot-product scorer: `S(x, y) = h_x . h_y` and per-feature
/// scores `S(x^i, y) = h_x^i . h_y^i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DotProductEncoder<T> {
    pub input_embeddings: EmbeddingTable<T>,
    pub response_embeddings: EmbeddingTable<T>,
    pub input_towers: Vec<Tower<T>>,
    pub response_towers: Vec<Tower<T>>,
    pub input_fusion: Tower<T>,
    pub response_fusion: Tower<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DotGrads<T> {
    pub input_embeddings: SparseRows<T>,
    pub response_embeddings: SparseRows<T>,
    pub input_towers: Vec<Tower<T>>,
    pub response_towers: Vec<Tower<T>>,
    pub input_fusion: Tower<T>,
    pub response_fusion: Tower<T>,
}

#[derive(Clone, Copy)]
enum Side {
    Input,
    Response,
}

fn average<T: Real>(vs: &[&Vec<T>]) -> Vec<T> {
    let inv = T::one() / T::lit(vs.len() as f64);
    let mut out = vec![T::zero(); vs[0].len()];
    for v in vs {
        for (o, &x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

impl<T: Real> DotProductEncoder<T> {
    pub fn new<R: Rng>(cfg: &DotConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embedding_dim;
        let input_embeddings = EmbeddingTable::random(cfg.vocab_size, d, rng);
        let response_embeddings = EmbeddingTable::random(cfg.vocab_size, d, rng);
        let input_towers = (0..cfg.features).map(|_| Tower::random(d, &cfg.tower, rng)).collect::<Vec<_>>();
        let response_towers = (0..cfg.features).map(|_| Tower::random(d, &cfg.tower, rng)).collect::<Vec<_>>();
        let tower_out = *cfg.tower.last().unwrap_or(&d);
        Ok(DotProductEncoder {
            input_embeddings,
            response_embeddings,
            input_towers,
            response_towers,
            input_fusion: Tower::random(tower_out, &cfg.fusion, rng),
            response_fusion: Tower::random(tower_out, &cfg.fusion, rng),
        })
    }

    /// Assembles and validates a model from parts.
    pub fn from_parts(
        input_embeddings: EmbeddingTable<T>,
        response_embeddings: EmbeddingTable<T>,
        input_towers: Vec<Tower<T>>,
        response_towers: Vec<Tower<T>>,
        input_fusion: Tower<T>,
        response_fusion: Tower<T>,
    ) -> Result<Self> {
        let m = DotProductEncoder {
            input_embeddings,
            response_embeddings,
            input_towers,
            response_towers,
            input_fusion,
            response_fusion,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.input_towers.is_empty() {
            return Err(Error::Config("at least one input feature is required".into()));
        }
        check_dim("response tower count", self.input_towers.len(), self.response_towers.len())?;
        for (towers, table, fusion) in [
            (&self.input_towers, &self.input_embeddings, &self.input_fusion),
            (&self.response_towers, &self.response_embeddings, &self.response_fusion),
        ] {
            for t in towers {
                check_dim("tower input", table.dim(), t.input_dim())?;
                check_dim("fusion input", fusion.input_dim(), t.output_dim())?;
            }
        }
        check_dim("output dimension", self.input_fusion.output_dim(), self.response_fusion.output_dim())?;
        for (a, b) in self.input_towers.iter().zip(&self.response_towers) {
            check_dim("per-feature output dimension", a.output_dim(), b.output_dim())?;
        }
        Ok(())
    }

    pub fn num_features(&self) -> usize {
        self.input_towers.len()
    }

    pub fn output_dim(&self) -> usize {
        self.input_fusion.output_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.input_embeddings.dim()
    }

    pub fn vocab_size(&self) -> usize {
        self.input_embeddings.rows()
    }

    fn side(&self, side: Side) -> (&EmbeddingTable<T>, &[Tower<T>], &Tower<T>) {
        match side {
            Side::Input => (&self.input_embeddings, &self.input_towers, &self.input_fusion),
            Side::Response => (&self.response_embeddings, &self.response_towers, &self.response_fusion),
        }
    }

    fn trace_side(&self, side: Side, bags: &[&FeatureBag]) -> Result<SideTrace<T>> {
        let (table, towers, fusion) = self.side(side);
        check_dim("feature count", towers.len(), bags.len())?;
        let features = towers
            .iter()
            .zip(bags)
            .map(|(t, bag)| t.forward_trace(table.embed_bag(bag)?))
            .collect::<Result<Vec<_>>>()?;
        let tops: Vec<&Vec<T>> = features.iter().map(|t| t.last().unwrap()).collect();
        let fusion = fusion.forward_trace(average(&tops))?;
        Ok(SideTrace { features, fusion })
    }

    /// `h_x^i = tower_i(embed(x^i))`, `h_x = fusion(mean_i h_x^i)`.
    pub fn encode_input(&self, bags: &[FeatureBag]) -> Result<Encoding<T>> {
        let refs: Vec<&FeatureBag> = bags.iter().collect();
        Ok(self.trace_side(Side::Input, &refs)?.encoding())
    }

    /// Response side of the encoder; the same response bag feeds every
    /// per-feature response tower.
    pub fn encode_response(&self, bag: &FeatureBag) -> Result<Encoding<T>> {
        let refs = vec![bag; self.num_features()];
        Ok(self.trace_side(Side::Response, &refs)?.encoding())
    }

    pub fn trace_input(&self, bags: &[FeatureBag]) -> Result<SideTrace<T>> {
        let refs: Vec<&FeatureBag> = bags.iter().collect();
        self.trace_side(Side::Input, &refs)
    }

    pub fn trace_response(&self, bag: &FeatureBag) -> Result<SideTrace<T>> {
        let refs = vec![bag; self.num_features()];
        self.trace_side(Side::Response, &refs)
    }

    pub fn score(&self, input: &[FeatureBag], response: &FeatureBag) -> Result<T> {
        let hx = self.encode_input(input)?;
        let hy = self.encode_response(response)?;
        Ok(dot(&hx.h, &hy.h))
    }

    fn backward_side(
        &self,
        side: Side,
        bags: &[&FeatureBag],
        trace: &SideTrace<T>,
        grad_h: &[T],
        grad_per_feature: &[Vec<T>],
        grads: &mut DotGrads<T>,
    ) {
        let (_, towers, fusion) = self.side(side);
        let (emb_grads, tower_grads, fusion_grads) = match side {
            Side::Input => (&mut grads.input_embeddings, &mut grads.input_towers, &mut grads.input_fusion),
            Side::Response => (
                &mut grads.response_embeddings,
                &mut grads.response_towers,
                &mut grads.response_fusion,
            ),
        };
        let g_mean = fusion.backward(&trace.fusion, grad_h, fusion_grads);
        let inv_m = T::one() / T::lit(towers.len() as f64);
        for (i, tower) in towers.iter().enumerate() {
            let g_top: Vec<T> = g_mean
                .iter()
                .zip(&grad_per_feature[i])
                .map(|(&gm, &gf)| gm * inv_m + gf)
                .collect();
            let g_emb = tower.backward(&trace.features[i], &g_top, &mut tower_grads[i]);
            emb_grads.accumulate_bag(bags[i], &g_emb);
        }
    }

    /// Accumulates gradients of a loss through the input side, given
    /// `dL/dh_x` and `dL/dh_x^i`.
    pub fn backward_input(
        &self,
        bags: &[FeatureBag],
        trace: &SideTrace<T>,
        grad_h: &[T],
        grad_per_feature: &[Vec<T>],
        grads: &mut DotGrads<T>,
    ) {
        let refs: Vec<&FeatureBag> = bags.iter().collect();
        self.backward_side(Side::Input, &refs, trace, grad_h, grad_per_feature, grads);
    }

    pub fn backward_response(
        &self,
        bag: &FeatureBag,
        trace: &SideTrace<T>,
        grad_h: &[T],
        grad_per_feature: &[Vec<T>],
        grads: &mut DotGrads<T>,
    ) {
        let refs = vec![bag; self.num_features()];
        self.backward_side(Side::Response, &refs, trace, grad_h, grad_per_feature, grads);
    }

    pub fn zero_grads(&self) -> DotGrads<T> {
        DotGrads {
            input_embeddings: SparseRows::new(self.input_embeddings.dim()),
            response_embeddings: SparseRows::new(self.response_embeddings.dim()),
            input_towers: self.input_towers.iter().map(Tower::zeros_like).collect(),
            response_towers: self.response_towers.iter().map(Tower::zeros_like).collect(),
            input_fusion: self.input_fusion.zeros_like(),
            response_fusion: self.response_fusion.zeros_like(),
        }
    }

    /// `theta -= lr * grad`.
    pub fn apply_gradients(&mut self, g: &DotGrads<T>, lr: T) {
        g.input_embeddings.apply(&mut self.input_embeddings, lr);
        g.response_embeddings.apply(&mut self.response_embeddings, lr);
        for (t, gt) in self.input_towers.iter_mut().zip(&g.input_towers) {
            t.add_scaled(gt, -lr);
        }
        for (t, gt) in self.response_towers.iter_mut().zip(&g.response_towers) {
            t.add_scaled(gt, -lr);
        }
        self.input_fusion.add_scaled(&g.input_fusion, -lr);
        self.response_fusion.add_scaled(&g.response_fusion, -lr);
    }

    pub fn cast<U: Real>(&self) -> DotProductEncoder<U> {
        DotProductEncoder {
            input_embeddings: self.input_embeddings.cast(),
            response_embeddings: self.response_embeddings.cast(),
            input_towers: self.input_towers.iter().map(Tower::cast).collect(),
            response_towers: self.response_towers.iter().map(Tower::cast).collect(),
            input_fusion: self.input_fusion.cast(),
            response_fusion: self.response_fusion.cast(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.input_embeddings.all_finite()
            && self.response_embeddings.all_finite()
            && self.input_towers.iter().chain(&self.response_towers).all(Tower::all_finite)
            && self.input_fusion.all_finite()
            && self.response_fusion.all_finite()
    }

    /// Visits every parameter slice in a fixed order.
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut [T])) {
        f("input_embeddings".into(), self.input_embeddings.data_mut());
        f("response_embeddings".into(), self.response_embeddings.data_mut());
        for (i, t) in self.input_towers.iter_mut().enumerate() {
            t.for_each_slice_mut(&format!("input_tower{i}"), f);
        }
        for (i, t) in self.response_towers.iter_mut().enumerate() {
            t.for_each_slice_mut(&format!("response_tower{i}"), f);
        }
        self.input_fusion.for_each_slice_mut("input_fusion", f);
        self.response_fusion.for_each_slice_mut("response_fusion", f);
    }
}

impl<T: Real> DotGrads<T> {
    pub fn squared_norm(&self) -> f64 {
        self.input_embeddings.squared_norm()
            + self.response_embeddings.squared_norm()
            + self.input_towers.iter().chain(&self.response_towers).map(Tower::squared_norm).sum::<f64>()
            + self.input_fusion.squared_norm()
            + self.response_fusion.squared_norm()
    }

    pub fn all_finite(&self) -> bool {
        self.input_embeddings.all_finite()
            && self.response_embeddings.all_finite()
            && self.input_towers.iter().chain(&self.response_towers).all(Tower::all_finite)
            && self.input_fusion.all_finite()
            && self.response_fusion.all_finite()
    }

    /// Dense gradient slices in the same order as
    /// [`DotProductEncoder::for_each_param_mut`].
    pub fn dense_slices(&self, vocab_rows: usize) -> Vec<(String, Vec<T>)> {
        let mut out = vec![
            ("input_embeddings".to_string(), self.input_embeddings.to_dense(vocab_rows)),
            ("response_embeddings".to_string(), self.response_embeddings.to_dense(vocab_rows)),
        ];
        let mut push = |name: String, s: &[T]| out.push((name, s.to_vec()));
        for (i, t) in self.input_towers.iter().enumerate() {
            t.for_each_slice(&format!("input_tower{i}"), &mut push);
        }
        for (i, t) in self.response_towers.iter().enumerate() {
            t.for_each_slice(&format!("response_tower{i}"), &mut push);
        }
        self.input_fusion.for_each_slice("input_fusion", &mut push);
        self.response_fusion.for_each_slice("response_fusion", &mut push);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Dense, EmbeddingTable};
    use crate::text::Field;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bag(items: &[(u32, u32)], field: Field) -> FeatureBag {
        FeatureBag {
            items: items.to_vec(),
            source_field: field,
        }
    }

    fn small(features: usize, fusion: Vec<usize>) -> DotProductEncoder<f64> {
        let cfg = DotConfig {
            vocab_size: 10,
            embedding_dim: 4,
            features,
            tower: vec![5, 3],
            fusion,
        };
        DotProductEncoder::new(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn single_feature_equals_fusion_of_tower() {
        let m = small(1, vec![3]);
        let x = vec![bag(&[(1, 1), (4, 2)], Field::Body)];
        let enc = m.encode_input(&x).unwrap();
        let direct = m.input_towers[0]
            .forward(&m.input_embeddings.embed_bag(&x[0]).unwrap())
            .unwrap();
        assert_eq!(enc.per_feature[0], direct);
        assert_eq!(enc.h, m.input_fusion.forward(&direct).unwrap());
    }

    #[test]
    fn identity_fusion_single_feature_is_plain_tower() {
        let m = small(1, vec![]);
        let x = vec![bag(&[(2, 3)], Field::Body)];
        let enc = m.encode_input(&x).unwrap();
        assert_eq!(enc.h, enc.per_feature[0]);
    }

    #[test]
    fn identical_features_average_to_themselves() {
        let mut m = small(2, vec![3]);
        m.input_towers[1] = m.input_towers[0].clone();
        let b = bag(&[(1, 1), (7, 1)], Field::Body);
        let trace = m.trace_input(&[b.clone(), b]).unwrap();
        let fusion_in = &trace.fusion[0];
        let top = trace.features[0].last().unwrap();
        for (a, b) in fusion_in.iter().zip(top) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn two_feature_fusion_input_is_elementwise_mean() {
        let m = small(2, vec![3]);
        let x = vec![bag(&[(1, 1)], Field::Body), bag(&[(2, 2), (9, 1)], Field::Subject)];
        let trace = m.trace_input(&x).unwrap();
        let a = m.input_towers[0].forward(&m.input_embeddings.embed_bag(&x[0]).unwrap()).unwrap();
        let b = m.input_towers[1].forward(&m.input_embeddings.embed_bag(&x[1]).unwrap()).unwrap();
        for k in 0..a.len() {
            assert!((trace.fusion[0][k] - (a[k] + b[k]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_response_encodes_to_constant() {
        let m = small(2, vec![3]);
        let e = bag(&[], Field::Response);
        let a = m.encode_response(&e).unwrap();
        let zero = vec![0.0; 4];
        let t = m.response_towers[0].forward(&zero).unwrap();
        let u = m.response_towers[1].forward(&zero).unwrap();
        let mean: Vec<f64> = t.iter().zip(&u).map(|(x, y)| (x + y) / 2.0).collect();
        assert_eq!(a.h, m.response_fusion.forward(&mean).unwrap());
        assert_eq!(a, m.encode_response(&e).unwrap());
    }

    #[test]
    fn batched_and_looped_response_encoding_agree() {
        let m = small(2, vec![3]).cast::<f32>();
        let bags: Vec<FeatureBag> = (0..6).map(|i| bag(&[(i, 1), ((i + 3) % 10, 2)], Field::Response)).collect();
        let batched: Vec<Vec<f32>> = bags.iter().map(|b| m.encode_response(b).unwrap().h).collect();
        for (b, h) in bags.iter().zip(&batched) {
            assert_eq!(&m.encode_response(b).unwrap().h, h);
        }
    }

    #[test]
    fn final_outputs_agree_and_bounded() {
        let m = small(2, vec![4, 3]);
        let x = vec![bag(&[(0, 5)], Field::Body), bag(&[(3, 1)], Field::Subject)];
        let y = bag(&[(5, 2)], Field::Response);
        let s = m.score(&x, &y).unwrap();
        assert!(s.abs() < m.output_dim() as f64);
    }

    #[test]
    fn from_parts_rejects_mismatched_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = |o: usize, rng: &mut ChaCha8Rng| Tower::<f32>::random(2, &[o], rng);
        let e = EmbeddingTable::<f32>::zeros(3, 2);
        let fusion3 = Tower::<f32>::identity(3);
        let fusion2 = Tower::from_layers(3, vec![Dense::zeros(3, 2)]).unwrap();
        let r = DotProductEncoder::from_parts(
            e.clone(),
            e,
            vec![t(3, &mut rng)],
            vec![t(3, &mut rng)],
            fusion3,
            fusion2,
        );
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn wrong_feature_count_is_rejected() {
        let m = small(2, vec![3]);
        assert!(m.encode_input(&[bag(&[], Field::Body)]).is_err());
    }
}
