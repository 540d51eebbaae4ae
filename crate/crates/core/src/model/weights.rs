use std::io::{Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::{ensure, Error, Result};
use crate::numeric::{cast_matrix, cast_vector, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub query: Array2<T>,
    pub key: Array2<T>,
    pub value: Array2<T>,
    pub output: Array2<T>,
    pub ffn_up: Array2<T>,
    pub ffn_down: Array2<T>,
    pub attn_norm: Array1<T>,
    pub ffn_norm: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub token_embedding: Array2<T>,
    pub position_embedding: Array2<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Array1<T>,
}

impl Weights<f32> {
    fn cast<T: Real>(&self) -> Weights<T> {
        Weights {
            token_embedding: cast_matrix(&self.token_embedding),
            position_embedding: cast_matrix(&self.position_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    query: cast_matrix(&l.query),
                    key: cast_matrix(&l.key),
                    value: cast_matrix(&l.value),
                    output: cast_matrix(&l.output),
                    ffn_up: cast_matrix(&l.ffn_up),
                    ffn_down: cast_matrix(&l.ffn_down),
                    attn_norm: cast_vector(&l.attn_norm),
                    ffn_norm: cast_vector(&l.ffn_norm),
                })
                .collect(),
            final_norm: cast_vector(&self.final_norm),
        }
    }

    /// Every tensor in a fixed canonical order.
    fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![
            self.token_embedding.as_slice().unwrap(),
            self.position_embedding.as_slice().unwrap(),
        ];
        for l in &self.layers {
            out.extend([
                l.query.as_slice().unwrap(),
                l.key.as_slice().unwrap(),
                l.value.as_slice().unwrap(),
                l.output.as_slice().unwrap(),
                l.ffn_up.as_slice().unwrap(),
                l.ffn_down.as_slice().unwrap(),
                l.attn_norm.as_slice().unwrap(),
                l.ffn_norm.as_slice().unwrap(),
            ]);
        }
        out.push(self.final_norm.as_slice().unwrap());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![
            self.token_embedding.as_slice_mut().unwrap(),
            self.position_embedding.as_slice_mut().unwrap(),
        ];
        for l in &mut self.layers {
            out.push(l.query.as_slice_mut().unwrap());
            out.push(l.key.as_slice_mut().unwrap());
            out.push(l.value.as_slice_mut().unwrap());
            out.push(l.output.as_slice_mut().unwrap());
            out.push(l.ffn_up.as_slice_mut().unwrap());
            out.push(l.ffn_down.as_slice_mut().unwrap());
            out.push(l.attn_norm.as_slice_mut().unwrap());
            out.push(l.ffn_norm.as_slice_mut().unwrap());
        }
        out.push(self.final_norm.as_slice_mut().unwrap());
        out
    }

    fn zeros(config: &ModelConfig) -> Self {
        let d = config.hidden_dim;
        let m = config.ffn_dim;
        Weights {
            token_embedding: Array2::zeros((config.vocab_size, d)),
            position_embedding: Array2::zeros((config.max_positions, d)),
            layers: (0..config.num_layers)
                .map(|_| LayerWeights {
                    query: Array2::zeros((d, d)),
                    key: Array2::zeros((d, d)),
                    value: Array2::zeros((d, d)),
                    output: Array2::zeros((d, d)),
                    ffn_up: Array2::zeros((d, m)),
                    ffn_down: Array2::zeros((m, d)),
                    attn_norm: Array1::ones(d),
                    ffn_norm: Array1::ones(d),
                })
                .collect(),
            final_norm: Array1::ones(d),
        }
    }
}

/// Frozen, seeded decoder-only transformer.
///
/// Weights are private and never mutated after construction; an `f64` copy is
/// materialized lazily for gradient oracles.
#[derive(Debug)]
pub struct ToyVLM {
    config: ModelConfig,
    weights: Weights<f32>,
    weights_f64: OnceLock<Weights<f64>>,
}

impl Clone for ToyVLM {
    fn clone(&self) -> Self {
        Self { config: self.config.clone(), weights: self.weights.clone(), weights_f64: OnceLock::new() }
    }
}

impl PartialEq for ToyVLM {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.weights == other.weights
    }
}

/// Precisions the model can run in.
pub trait Precision: Real {
    fn weights(model: &ToyVLM) -> &Weights<Self>;
}

impl Precision for f32 {
    fn weights(model: &ToyVLM) -> &Weights<f32> {
        &model.weights
    }
}

impl Precision for f64 {
    fn weights(model: &ToyVLM) -> &Weights<f64> {
        model.weights_f64.get_or_init(|| model.weights.cast())
    }
}

const MAGIC: &[u8; 4] = b"TVLM";
const FORMAT_VERSION: u32 = 1;

impl ToyVLM {
    /// Draws all matrices from `N(0, init_std^2)` with a ChaCha8 stream seeded
    /// by `init_seed`; normalization gains start at one. With `qk_tie > 0`
    /// each key matrix is then replaced by `tie * query + sqrt(1 - tie^2) * key`,
    /// which keeps the entry variance.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut weights = Weights::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let normal = Normal::new(0.0f32, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut fill = |m: &mut Array2<f32>| m.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        fill(&mut weights.token_embedding);
        fill(&mut weights.position_embedding);
        for l in &mut weights.layers {
            fill(&mut l.query);
            fill(&mut l.key);
            fill(&mut l.value);
            fill(&mut l.output);
            fill(&mut l.ffn_up);
            fill(&mut l.ffn_down);
        }
        let tie = config.qk_tie;
        if tie > 0.0 {
            let rest = (1.0 - tie * tie).max(0.0).sqrt();
            for l in &mut weights.layers {
                l.key = &l.query * tie + &l.key * rest;
            }
        }
        if config.qk_gain != 1.0 {
            for l in &mut weights.layers {
                l.query *= config.qk_gain;
                l.key *= config.qk_gain;
            }
        }
        if config.muted_dims > 0 {
            let dims = rand::seq::index::sample(&mut rng, config.hidden_dim, config.muted_dims);
            for l in &mut weights.layers {
                for k in dims.iter() {
                    l.attn_norm[k] = config.muted_gain;
                }
            }
        }
        Ok(Self { config, weights, weights_f64: OnceLock::new() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Coordinates whose first-layer attention gain differs from one, ascending.
    pub fn muted_dims(&self) -> Vec<usize> {
        match self.weights.layers.first() {
            Some(l) => (0..self.config.hidden_dim).filter(|&k| l.attn_norm[k] != 1.0).collect(),
            None => Vec::new(),
        }
    }

    pub fn weights(&self) -> &Weights<f32> {
        &self.weights
    }

    pub fn weights_as<T: Precision>(&self) -> &Weights<T> {
        T::weights(self)
    }

    /// SHA-256 over the little-endian bytes of every tensor, hex-encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.weights.tensors() {
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Binary container: magic, format version, config JSON, raw `f32` LE data.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let config = serde_json::to_vec(&self.config)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(config.len() as u64).to_le_bytes())?;
        w.write_all(&config)?;
        for t in self.weights.tensors() {
            for v in t {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        ensure!(&magic == MAGIC, Input, "not a model weights file");
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        ensure!(version == FORMAT_VERSION, Input, "unsupported weights format version {version}");
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let mut config = vec![0u8; u64::from_le_bytes(u64buf) as usize];
        r.read_exact(&mut config)?;
        let config: ModelConfig = serde_json::from_slice(&config)?;
        config.validate()?;
        let mut weights = Weights::zeros(&config);
        for t in weights.tensors_mut() {
            for v in t.iter_mut() {
                r.read_exact(&mut u32buf)?;
                *v = f32::from_le_bytes(u32buf);
            }
        }
        Ok(Self { config, weights, weights_f64: OnceLock::new() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_checksum() {
        let cfg = ModelConfig { init_seed: 7, ..ModelConfig::default() };
        let a = ToyVLM::init(cfg.clone()).unwrap();
        let b = ToyVLM::init(cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a, b);
    }

    #[test]
    fn different_seed_different_weights() {
        let a = ToyVLM::init(ModelConfig { init_seed: 1, ..ModelConfig::default() }).unwrap();
        let b = ToyVLM::init(ModelConfig { init_seed: 2, ..ModelConfig::default() }).unwrap();
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn indivisible_hidden_dim_is_config_error() {
        let cfg = ModelConfig { hidden_dim: 63, num_heads: 4, ..ModelConfig::default() };
        assert!(matches!(ToyVLM::init(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn minimal_model_is_valid() {
        let cfg = ModelConfig {
            num_layers: 1,
            num_heads: 1,
            hidden_dim: 2,
            ffn_dim: 2,
            vocab_size: 4,
            max_positions: 4,
            init_seed: 0,
            init_std: 0.02,
            qk_tie: 0.0,
            qk_gain: 1.0,
            muted_dims: 0,
            muted_gain: 0.05,
        };
        let m = ToyVLM::init(cfg).unwrap();
        assert_eq!(m.weights().layers.len(), 1);
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let m = ToyVLM::init(ModelConfig { num_layers: 2, max_positions: 16, ..ModelConfig::default() }).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = ToyVLM::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.checksum(), m.checksum());
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(ToyVLM::read_from(&b"NOPE\0\0\0\0"[..]).is_err());
    }
}
