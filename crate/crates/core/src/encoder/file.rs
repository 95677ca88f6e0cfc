//! Binary model file.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SRDE" | version u32 | kind u32 (1 = dot product, 2 = joint) | M u32 | d u32
//! | vocab rows u32 | vocabulary sha-256 [32] | block count u32
//! | per block: layer count L u32, sizes (L + 1) x u32
//! | input embeddings f32 | response embeddings f32
//! | per block, per layer: weights (row-major, out x in) f32, bias f32
//! ```
//!
//! Dot-product blocks: M input towers, M response towers, input fusion,
//! response fusion. Joint blocks: M feature towers, M feature heads, final
//! tower, final head.

use std::path::Path;

use super::{Dense, DotProductEncoder, EmbeddingTable, JointScorer, Tower};
use crate::error::{Error, Result};
use crate::io::{read_file, write_file, ContentHash, Reader, Writer};

pub const MODEL_MAGIC: &[u8; 4] = b"SRDE";
pub const MODEL_VERSION: u32 = 1;

const KIND_DOT: u32 = 1;
const KIND_JOINT: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Dot(DotProductEncoder<f32>),
    Joint(JointScorer<f32>),
}

impl AnyModel {
    pub fn kind_name(&self) -> &'static str {
        match self {
            AnyModel::Dot(_) => "dot",
            AnyModel::Joint(_) => "joint",
        }
    }

    pub fn num_features(&self) -> usize {
        match self {
            AnyModel::Dot(m) => m.num_features(),
            AnyModel::Joint(m) => m.num_features(),
        }
    }
}

/// A model together with the hash of the vocabulary it was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub vocab_hash: ContentHash,
    pub model: AnyModel,
}

fn head_tower(d: &Dense<f32>) -> Tower<f32> {
    Tower::from_layers(d.inputs, vec![d.clone()]).expect("single layer tower")
}

impl SavedModel {
    fn blocks(&self) -> (u32, usize, usize, &EmbeddingTable<f32>, &EmbeddingTable<f32>, Vec<Tower<f32>>) {
        match &self.model {
            AnyModel::Dot(m) => {
                let mut blocks = m.input_towers.clone();
                blocks.extend(m.response_towers.iter().cloned());
                blocks.push(m.input_fusion.clone());
                blocks.push(m.response_fusion.clone());
                (
                    KIND_DOT,
                    m.num_features(),
                    m.embedding_dim(),
                    &m.input_embeddings,
                    &m.response_embeddings,
                    blocks,
                )
            }
            AnyModel::Joint(m) => {
                let mut blocks = m.feature_towers.clone();
                blocks.extend(m.feature_heads.iter().map(head_tower));
                blocks.push(m.final_tower.clone());
                blocks.push(head_tower(&m.final_head));
                (
                    KIND_JOINT,
                    m.num_features(),
                    m.embedding_dim(),
                    &m.input_embeddings,
                    &m.response_embeddings,
                    blocks,
                )
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (kind, m, d, inp, resp, blocks) = self.blocks();
        let mut w = Writer::new();
        w.bytes(MODEL_MAGIC).u32(MODEL_VERSION).u32(kind);
        w.len_u32(m)?.len_u32(d)?.len_u32(inp.rows())?;
        w.bytes(&self.vocab_hash);
        w.len_u32(blocks.len())?;
        for b in &blocks {
            w.len_u32(b.layers().len())?;
            for s in b.sizes() {
                w.len_u32(s)?;
            }
        }
        w.f32s(inp.data()).f32s(resp.data());
        for b in &blocks {
            for l in b.layers() {
                w.f32s(&l.weights).f32s(&l.bias);
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("model file", bytes);
        r.expect_magic(MODEL_MAGIC)?;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::format("model file", format!("unsupported version {version}")));
        }
        let kind = r.u32()?;
        let m = r.usize()?;
        let d = r.usize()?;
        let rows = r.usize()?;
        let vocab_hash = r.hash()?;
        let nblocks = r.usize()?;
        if m == 0 || d == 0 || nblocks != 2 * m + 2 {
            return Err(Error::format("model file", "inconsistent header"));
        }
        let mut shapes = Vec::with_capacity(nblocks);
        for _ in 0..nblocks {
            let layers = r.usize()?;
            let sizes = (0..=layers).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            shapes.push(sizes);
        }
        let inp = EmbeddingTable::from_data(rows, d, r.f32s(rows * d)?)?;
        let resp = EmbeddingTable::from_data(rows, d, r.f32s(rows * d)?)?;
        let mut blocks = Vec::with_capacity(nblocks);
        for sizes in &shapes {
            let mut layers = Vec::new();
            for pair in sizes.windows(2) {
                let (i, o) = (pair[0], pair[1]);
                let weights = r.f32s(i * o)?;
                let bias = r.f32s(o)?;
                layers.push(Dense::from_parts(i, o, weights, bias)?);
            }
            blocks.push(Tower::from_layers(sizes[0], layers)?);
        }
        r.finish()?;

        let single = |t: Tower<f32>| -> Result<Dense<f32>> {
            let mut layers = t.layers().to_vec();
            if layers.len() != 1 {
                return Err(Error::format("model file", "head must have exactly one layer"));
            }
            Ok(layers.remove(0))
        };
        let mut it = blocks.into_iter();
        let model = match kind {
            KIND_DOT => {
                let input_towers: Vec<_> = it.by_ref().take(m).collect();
                let response_towers: Vec<_> = it.by_ref().take(m).collect();
                let input_fusion = it.next().unwrap();
                let response_fusion = it.next().unwrap();
                AnyModel::Dot(DotProductEncoder::from_parts(
                    inp,
                    resp,
                    input_towers,
                    response_towers,
                    input_fusion,
                    response_fusion,
                )?)
            }
            KIND_JOINT => {
                let towers: Vec<_> = it.by_ref().take(m).collect();
                let heads = it.by_ref().take(m).map(single).collect::<Result<Vec<_>>>()?;
                let final_tower = it.next().unwrap();
                let final_head = single(it.next().unwrap())?;
                AnyModel::Joint(JointScorer::from_parts(inp, resp, towers, heads, final_tower, final_head)?)
            }
            other => return Err(Error::format("model file", format!("unknown model kind {other}"))),
        };
        Ok(SavedModel { vocab_hash, model })
    }
}

pub fn save_model(path: &Path, model: &SavedModel) -> Result<()> {
    write_file(path, &model.to_bytes()?)
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    SavedModel::from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{DotConfig, JointConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dot_model_roundtrip() {
        let cfg = DotConfig {
            vocab_size: 7,
            embedding_dim: 3,
            features: 2,
            tower: vec![4, 2],
            fusion: vec![2],
        };
        let model = DotProductEncoder::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let saved = SavedModel {
            vocab_hash: [7; 32],
            model: AnyModel::Dot(model),
        };
        let bytes = saved.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SRDE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), MODEL_VERSION);
        let back = SavedModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, saved);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn joint_model_roundtrip() {
        let cfg = JointConfig {
            vocab_size: 5,
            embedding_dim: 2,
            features: 1,
            tower: vec![3],
            final_layers: vec![],
        };
        let model = JointScorer::new(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let saved = SavedModel {
            vocab_hash: [1; 32],
            model: AnyModel::Joint(model),
        };
        let back = SavedModel::from_bytes(&saved.to_bytes().unwrap()).unwrap();
        assert_eq!(back, saved);
    }

    #[test]
    fn corrupt_model_is_rejected() {
        assert!(SavedModel::from_bytes(b"XXXX").is_err());
        let cfg = DotConfig {
            vocab_size: 3,
            embedding_dim: 2,
            features: 1,
            tower: vec![2],
            fusion: vec![],
        };
        let model = DotProductEncoder::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut bytes = SavedModel {
            vocab_hash: [0; 32],
            model: AnyModel::Dot(model),
        }
        .to_bytes()
        .unwrap();
        bytes.pop();
        assert!(SavedModel::from_bytes(&bytes).is_err());
    }
}
