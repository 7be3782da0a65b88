// SPDX-License-Identifier: MIT OR Apache-2.0

//! Architecture config and validated weight bundle for a pre-norm decoder
//! transformer with gated FFNs.
//!
//! Projection matrices are stored input-major (`[in × out]`), so a row of
//! hidden states multiplies them from the left: `q = x · W_Q`.
//!
//! Canonical tensor names:
//!
//! | name                     | shape                         |
//! |--------------------------|-------------------------------|
//! | `embedding`              | `[vocab_size, d_model]`       |
//! | `layers.{i}.attn_norm_w` | `[d_model]`                   |
//! | `layers.{i}.W_Q`         | `[d_model, n_heads·d_head]`   |
//! | `layers.{i}.W_K`, `W_V`  | `[d_model, n_kv_heads·d_head]`|
//! | `layers.{i}.W_O`         | `[n_heads·d_head, d_model]`   |
//! | `layers.{i}.ffn_norm_w`  | `[d_model]`                   |
//! | `layers.{i}.W_gate`, `W_up` | `[d_model, d_ff]`          |
//! | `layers.{i}.W_down`      | `[d_ff, d_model]`             |
//! | `final_norm_w`           | `[d_model]`                   |
//!
//! The LM head is tied to `embedding` and never materialised.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::archive::{self, TensorMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Architecture hyper-parameters. Serialised with exactly these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub rope_enabled: bool,
    pub rope_theta: f64,
    pub norm_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0
            || self.d_model == 0
            || self.d_head == 0
            || self.d_ff == 0
            || self.vocab_size == 0
        {
            return bad("n_layers, d_model, d_head, d_ff and vocab_size must be positive".into());
        }
        if self.n_heads * self.d_head != self.d_model {
            return bad(format!(
                "n_heads ({}) × d_head ({}) must equal d_model ({})",
                self.n_heads, self.d_head, self.d_model
            ));
        }
        if self.n_kv_heads == 0 || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return bad(format!(
                "n_kv_heads ({}) must be ≥ 1 and divide n_heads ({})",
                self.n_kv_heads, self.n_heads
            ));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return bad(format!(
                "rope_theta must be positive, got {}",
                self.rope_theta
            ));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps >= 0.0) {
            return bad(format!("norm_eps must be ≥ 0, got {}", self.norm_eps));
        }
        Ok(())
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// Every tensor name the config requires, with its expected shape.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![("embedding".to_string(), vec![self.vocab_size, d])];
        for i in 0..self.n_layers {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.extend([
                (p("attn_norm_w"), vec![d]),
                (p("W_Q"), vec![d, self.n_heads * self.d_head]),
                (p("W_K"), vec![d, self.kv_dim()]),
                (p("W_V"), vec![d, self.kv_dim()]),
                (p("W_O"), vec![self.n_heads * self.d_head, d]),
                (p("ffn_norm_w"), vec![d]),
                (p("W_gate"), vec![d, self.d_ff]),
                (p("W_up"), vec![d, self.d_ff]),
                (p("W_down"), vec![self.d_ff, d]),
            ]);
        }
        out.push(("final_norm_w".to_string(), vec![d]));
        out
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Weights of one decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm_w: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ffn_norm_w: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

/// Config plus every weight tensor, validated against each other.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm_w: Tensor,
}

impl ModelBundle {
    /// Assembles a bundle from canonically named tensors, checking presence,
    /// shapes and finiteness.
    pub fn from_tensors(config: ModelConfig, mut tensors: TensorMap) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.expected_tensors() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::TensorShape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            if let Some(index) = t.first_non_finite() {
                return Err(Error::NonFinite { name, index });
            }
        }
        let mut take = |name: String| tensors.remove(&name).expect("presence checked above");
        let embedding = take("embedding".into());
        let layers = (0..config.n_layers)
            .map(|i| {
                let mut t = |s: &str| take(format!("layers.{i}.{s}"));
                LayerWeights {
                    attn_norm_w: t("attn_norm_w"),
                    w_q: t("W_Q"),
                    w_k: t("W_K"),
                    w_v: t("W_V"),
                    w_o: t("W_O"),
                    ffn_norm_w: t("ffn_norm_w"),
                    w_gate: t("W_gate"),
                    w_up: t("W_up"),
                    w_down: t("W_down"),
                }
            })
            .collect();
        let final_norm_w = take("final_norm_w".into());
        Ok(Self {
            config,
            embedding,
            layers,
            final_norm_w,
        })
    }

    /// Canonically named tensor map; inverse of [`ModelBundle::from_tensors`].
    pub fn to_tensors(&self) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("embedding".into(), self.embedding.clone());
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            m.insert(p("attn_norm_w"), l.attn_norm_w.clone());
            m.insert(p("W_Q"), l.w_q.clone());
            m.insert(p("W_K"), l.w_k.clone());
            m.insert(p("W_V"), l.w_v.clone());
            m.insert(p("W_O"), l.w_o.clone());
            m.insert(p("ffn_norm_w"), l.ffn_norm_w.clone());
            m.insert(p("W_gate"), l.w_gate.clone());
            m.insert(p("W_up"), l.w_up.clone());
            m.insert(p("W_down"), l.w_down.clone());
        }
        m.insert("final_norm_w".into(), self.final_norm_w.clone());
        m
    }

    pub fn save(&self, path: impl AsRef<Path>, metadata: &BTreeMap<String, String>) -> Result<()> {
        archive::write_archive(&self.to_tensors(), metadata, path)
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }
}

/// Reads an archive and validates it against `config`.
pub fn load_model(config: ModelConfig, archive_path: impl AsRef<Path>) -> Result<ModelBundle> {
    let (_, tensors) = archive::read_archive(archive_path)?;
    ModelBundle::from_tensors(config, tensors)
}

/// Generic random bundle: Gaussian projections scaled by `1/sqrt(fan_in)`
/// and norm weights drawn from `[0.8, 1.2]`. Deterministic per seed.
pub fn random_model(config: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |shape: &[usize], std: f64| {
        let n = Normal::new(0.0, std).expect("finite std");
        let len = shape.iter().product();
        let data = (0..len).map(|_| n.sample(&mut rng) as f32).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    };
    let d = config.d_model;
    let hd = config.n_heads * config.d_head;
    let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    let embedding = gauss(&[config.vocab_size, d], 1.0);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            attn_norm_w: Tensor::zeros(&[d]),
            w_q: gauss(&[d, hd], inv(d)),
            w_k: gauss(&[d, config.kv_dim()], inv(d)),
            w_v: gauss(&[d, config.kv_dim()], inv(d)),
            w_o: gauss(&[hd, d], 0.5 * inv(hd)),
            ffn_norm_w: Tensor::zeros(&[d]),
            w_gate: gauss(&[d, config.d_ff], inv(d)),
            w_up: gauss(&[d, config.d_ff], inv(d)),
            w_down: gauss(&[config.d_ff, d], 0.5 * inv(config.d_ff)),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let unit = Uniform::new(0.8f32, 1.2).expect("valid range");
    let mut norm_w = || Tensor::from_vec((0..d).map(|_| unit.sample(&mut rng)).collect());
    for l in &mut layers {
        l.attn_norm_w = norm_w();
        l.ffn_norm_w = norm_w();
    }
    let final_norm_w = norm_w();
    Ok(ModelBundle {
        config: config.clone(),
        embedding,
        layers,
        final_norm_w,
    })
}
