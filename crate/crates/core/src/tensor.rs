//! Dense tensors, synthetic weight generation and model shapes.
//!
//! All randomness goes through ChaCha8 streams keyed by a 64-bit seed, so a
//! `(config, seed)` pair fully determines every generated byte on every
//! platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input lengths swept by default (prompt tokens).
pub const DEFAULT_INPUT_LENS: [usize; 4] = [64, 128, 256, 512];
/// Generated tokens per trial by default.
pub const DEFAULT_OUTPUT_LEN: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub rows: usize,
    pub cols: usize,
}

impl TensorShape {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape { rows, cols });
        }
        Ok(Self { rows, cols })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which projection a weight matrix plays. Heterogeneous schemes pick their
/// block layout from this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    AttentionWv,
    AttentionWo,
    FeedForwardW2,
    Other,
}

impl Role {
    pub const ALL: [Role; 4] = [
        Role::AttentionWv,
        Role::AttentionWo,
        Role::FeedForwardW2,
        Role::Other,
    ];

    pub fn code(self) -> u8 {
        match self {
            Role::AttentionWv => 0,
            Role::AttentionWo => 1,
            Role::FeedForwardW2 => 2,
            Role::Other => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::AttentionWv => "attention_wv",
            Role::AttentionWo => "attention_wo",
            Role::FeedForwardW2 => "feed_forward_w2",
            Role::Other => "other",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Row-major f32 matrix tagged with its role.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    pub shape: TensorShape,
    pub values: Vec<f32>,
    pub role: Role,
}

impl DenseTensor {
    pub fn new(shape: TensorShape, values: Vec<f32>, role: Role) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: shape.len(),
                got: values.len(),
            });
        }
        check_finite(&values)?;
        Ok(Self {
            shape,
            values,
            role,
        })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.shape.cols;
        &self.values[r * c..(r + 1) * c]
    }
}

pub(crate) fn check_finite(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::InvalidValue {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

/// Shape of a synthetic decoder stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub label: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub vocab_proxy: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("n_heads", self.n_heads),
            ("vocab_proxy", self.vocab_proxy),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every weight matrix of the stack, in generation order.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        let d = self.d_model;
        let f = self.d_ffn;
        let mut specs = Vec::with_capacity(self.n_layers * 7 + 1);
        for layer in 0..self.n_layers {
            let mut push = |suffix: &str, rows, cols, role| {
                specs.push(TensorSpec {
                    name: format!("layers.{layer}.{suffix}"),
                    layer: Some(layer),
                    shape: TensorShape { rows, cols },
                    role,
                })
            };
            push("attention.wq", d, d, Role::Other);
            push("attention.wk", d, d, Role::Other);
            push("attention.wv", d, d, Role::AttentionWv);
            push("attention.wo", d, d, Role::AttentionWo);
            push("feed_forward.w1", f, d, Role::Other);
            push("feed_forward.w3", f, d, Role::Other);
            push("feed_forward.w2", d, f, Role::FeedForwardW2);
        }
        specs.push(TensorSpec {
            name: "output".to_string(),
            layer: None,
            shape: TensorShape {
                rows: self.vocab_proxy,
                cols: d,
            },
            role: Role::Other,
        });
        specs
    }

    /// Closed-form parameter count: per layer four d×d attention projections
    /// and three d×d_ffn feed-forward matrices, plus the output head.
    pub fn parameter_count(&self) -> u64 {
        let d = self.d_model as u64;
        let f = self.d_ffn as u64;
        self.n_layers as u64 * (4 * d * d + 3 * d * f) + self.vocab_proxy as u64 * d
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub layer: Option<usize>,
    pub shape: TensorShape,
    pub role: Role,
}

/// A generated weight matrix with its position in the stack.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensor {
    pub name: String,
    pub layer: Option<usize>,
    pub tensor: DenseTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub input_len: usize,
    pub output_len: usize,
    pub seed: u64,
}

impl Workload {
    pub fn new(input_len: usize, output_len: usize, seed: u64) -> Result<Self> {
        let w = Self {
            input_len,
            output_len,
            seed,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.output_len == 0 {
            return Err(Error::Parameter(format!(
                "workload needs input_len >= 1 and output_len >= 1, got {}/{}",
                self.input_len, self.output_len
            )));
        }
        Ok(())
    }

    pub fn max_tokens(&self) -> usize {
        self.input_len + self.output_len
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fill_normal(out: &mut [f32], seed: u64) {
    let mut r = rng(seed);
    for v in out {
        *v = StandardNormal.sample(&mut r);
    }
}

/// Standard-normal tensor, deterministic in `seed`.
pub fn make_random_tensor(shape: TensorShape, role: Role, seed: u64) -> Result<DenseTensor> {
    let shape = TensorShape::new(shape.rows, shape.cols)?;
    let mut values = vec![0f32; shape.len()];
    fill_normal(&mut values, seed);
    Ok(DenseTensor {
        shape,
        values,
        role,
    })
}

/// Generates every weight matrix of `config`. Each tensor gets its own
/// stream derived from `seed` and its index, so generation parallelises
/// without changing the output.
pub fn make_model(config: &ModelConfig, seed: u64) -> Result<Vec<LayerTensor>> {
    config.validate()?;
    config
        .tensor_specs()
        .into_par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let tensor = make_random_tensor(spec.shape, spec.role, mix_seed(seed, i as u64))?;
            Ok(LayerTensor {
                name: spec.name,
                layer: spec.layer,
                tensor,
            })
        })
        .collect()
}
