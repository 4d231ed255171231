//! Prefill/decode execution of a synthetic decoder stack.
//!
//! Attention is reduced to its projections plus a pass over the cached keys
//! and values: the context vector is the mean cached value gated by the
//! query's agreement with the mean cached key. There is no softmax. Decode
//! runs one single-token pass per step and re-streams every weight.

use std::time::Instant;

use half::f16;
use num_rational::Ratio;
use rayon::prelude::*;

use super::{gemm_tokens_into, KernelMode, Workers};
use crate::bench::{process_cpu_time, BenchRecord, Phase};
use crate::codecs::{is_high_precision_layer, quantize_tensor_with, QuantScheme, QuantizedTensor};
use crate::error::{Error, Result};
use crate::tensor::{fill_normal, make_random_tensor, mix_seed, ModelConfig};

/// Bytes per cached value (binary16 entries).
const KV_ENTRY_BYTES: u64 = 2;

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: QuantizedTensor,
    pub wk: QuantizedTensor,
    pub wv: QuantizedTensor,
    pub wo: QuantizedTensor,
    pub w1: QuantizedTensor,
    pub w3: QuantizedTensor,
    pub w2: QuantizedTensor,
}

impl LayerWeights {
    fn all(&self) -> [&QuantizedTensor; 7] {
        [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.w3, &self.w2,
        ]
    }
}

/// A quantized synthetic decoder stack.
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    pub config: ModelConfig,
    pub scheme: QuantScheme,
    pub layers: Vec<LayerWeights>,
    pub output: QuantizedTensor,
}

impl SyntheticModel {
    /// Generates and quantizes every tensor of `config`. Tensors are
    /// produced one at a time, so the dense model is never held in full.
    pub fn build(config: &ModelConfig, scheme: QuantScheme, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut tensors = Vec::new();
        for (i, spec) in config.tensor_specs().into_iter().enumerate() {
            let dense = make_random_tensor(spec.shape, spec.role, mix_seed(seed, i as u64))?;
            tensors.push(quantize_tensor_with(
                spec.name,
                &dense,
                scheme,
                is_high_precision_layer(spec.layer),
                None,
            )?);
        }
        Self::from_tensors(config, tensors)
    }

    /// Assembles a model from tensors named as in [`ModelConfig::tensor_specs`].
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<QuantizedTensor>) -> Result<Self> {
        config.validate()?;
        let specs = config.tensor_specs();
        if tensors.len() != specs.len() {
            return Err(Error::InvalidConfig(format!(
                "model needs {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        let scheme = tensors[0].scheme;
        let mut by_name = std::collections::HashMap::new();
        for t in tensors {
            if t.scheme != scheme {
                return Err(Error::InvalidConfig(format!("{}: mixed schemes", t.name)));
            }
            by_name.insert(t.name.clone(), t);
        }
        let mut take = |name: &str, spec_shape| -> Result<QuantizedTensor> {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::InvalidConfig(format!("missing tensor {name}")))?;
            if t.shape != spec_shape {
                return Err(Error::InvalidConfig(format!("{name}: unexpected shape")));
            }
            Ok(t)
        };
        let mut it = specs.into_iter();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut next = || {
                let s = it.next().expect("seven specs per layer");
                take(&s.name, s.shape)
            };
            layers.push(LayerWeights {
                wq: next()?,
                wk: next()?,
                wv: next()?,
                wo: next()?,
                w1: next()?,
                w3: next()?,
                w2: next()?,
            });
        }
        let out_spec = it.next().expect("output spec");
        let output = take(&out_spec.name, out_spec.shape)?;
        Ok(Self {
            config: config.clone(),
            scheme,
            layers,
            output,
        })
    }

    pub fn tensors(&self) -> impl Iterator<Item = &QuantizedTensor> {
        self.layers
            .iter()
            .flat_map(|l| l.all())
            .chain(std::iter::once(&self.output))
    }

    /// Bytes of all quantized payloads.
    pub fn weight_bytes(&self) -> u64 {
        self.tensors().map(|t| t.blocks.len() as u64).sum()
    }

    /// Bytes of activations read and written by one token pass: every
    /// product reads `cols` and writes `rows` 32-bit values.
    pub fn activation_bytes_per_token(&self) -> u64 {
        self.tensors()
            .map(|t| 4 * (t.shape.rows + t.shape.cols) as u64)
            .sum()
    }
}

/// Bits per stored weight over the whole stack: payload bits divided by
/// stored elements (padding included). Equals the per-layout BPW when every
/// tensor uses the same layout.
pub fn predicted_bpw(config: &ModelConfig, scheme: QuantScheme) -> Ratio<u64> {
    let stored: u64 = config
        .tensor_specs()
        .iter()
        .map(|s| {
            let layout = scheme.layout(s.role, is_high_precision_layer(s.layer));
            (s.shape.len().div_ceil(layout.block_len()) * layout.block_len()) as u64
        })
        .sum();
    Ratio::new(8 * predicted_weight_bytes(config, scheme), stored)
}

/// Payload bytes `config` occupies under `scheme`, from shapes and layouts
/// alone.
pub fn predicted_weight_bytes(config: &ModelConfig, scheme: QuantScheme) -> u64 {
    config
        .tensor_specs()
        .iter()
        .map(|s| {
            let layout = scheme.layout(s.role, is_high_precision_layer(s.layer));
            let blocks = s.shape.len().div_ceil(layout.block_len()) as u64;
            blocks * layout.block_bytes() as u64
        })
        .sum()
}

/// KV cache size accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvCacheAccount {
    pub bytes_per_token: u64,
    pub tokens_cached: u64,
}

impl KvCacheAccount {
    pub fn for_config(config: &ModelConfig) -> Self {
        Self {
            bytes_per_token: 2 * config.n_layers as u64 * config.d_model as u64 * KV_ENTRY_BYTES,
            tokens_cached: 0,
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes_per_token * self.tokens_cached
    }
}

/// Binary16 key/value storage, one pair of growable buffers per layer.
#[derive(Debug)]
pub struct KvCache {
    account: KvCacheAccount,
    d_model: usize,
    keys: Vec<Vec<f16>>,
    values: Vec<Vec<f16>>,
}

impl KvCache {
    /// Allocates room for `capacity` tokens; allocation failure is a
    /// resource error.
    pub fn new(config: &ModelConfig, capacity: usize) -> Result<Self> {
        let mut cache = Self {
            account: KvCacheAccount::for_config(config),
            d_model: config.d_model,
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
        };
        cache.reserve(capacity)?;
        Ok(cache)
    }

    fn reserve(&mut self, tokens: usize) -> Result<()> {
        let want = tokens
            .checked_mul(self.d_model)
            .ok_or_else(|| Error::Resource("KV cache size overflows".into()))?;
        for buf in self.keys.iter_mut().chain(self.values.iter_mut()) {
            let extra = want.saturating_sub(buf.len());
            buf.try_reserve_exact(extra).map_err(|e| {
                Error::Resource(format!(
                    "KV cache allocation of {tokens} tokens failed: {e}"
                ))
            })?;
        }
        Ok(())
    }

    pub fn account(&self) -> KvCacheAccount {
        self.account
    }

    pub fn len(&self) -> usize {
        self.account.tokens_cached as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all cached tokens, keeping the allocation.
    pub fn reset(&mut self) {
        for buf in self.keys.iter_mut().chain(self.values.iter_mut()) {
            buf.clear();
        }
        self.account.tokens_cached = 0;
    }

    fn push(&mut self, layer: usize, k: &[f32], v: &[f32]) -> Result<()> {
        let need = self.keys[layer].len() + k.len();
        if need > self.keys[layer].capacity() {
            self.reserve(need / self.d_model)?;
        }
        self.keys[layer].extend(k.iter().map(|&x| f16::from_f32(x)));
        self.values[layer].extend(v.iter().map(|&x| f16::from_f32(x)));
        Ok(())
    }

    fn commit(&mut self, tokens: usize) {
        self.account.tokens_cached += tokens as u64;
    }
}

/// Execution settings for a simulated pass.
#[derive(Clone, Copy)]
pub struct SimOptions<'a> {
    pub workers: &'a Workers,
    pub mode: KernelMode,
    pub seed: u64,
}

fn rms_norm(x: &mut [f32], d: usize) {
    for row in x.chunks_mut(d) {
        let ms = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / d as f64;
        let inv = (1.0 / (ms + 1e-6).sqrt()) as f32;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Token-major product: `xt` is `batch × cols`, result is `batch × rows`.
fn project(opts: &SimOptions, w: &QuantizedTensor, xt: &[f32], batch: usize) -> Vec<f32> {
    let rows = w.shape.rows;
    let mut out = vec![0f32; rows * batch];
    opts.workers
        .install(|| gemm_tokens_into(w, xt, batch, opts.mode, &mut out));
    if batch == 1 {
        return out;
    }
    let mut t = vec![0f32; out.len()];
    for r in 0..rows {
        for j in 0..batch {
            t[j * rows + r] = out[r * batch + j];
        }
    }
    t
}

/// Attention stand-in for the newest `batch` tokens of `layer`: each token
/// attends to every cached position up to and including itself.
fn attend(cache: &KvCache, layer: usize, q: &[f32], batch: usize) -> Vec<f32> {
    let d = cache.d_model;
    let keys = &cache.keys[layer];
    let values = &cache.values[layer];
    let total = keys.len() / d;
    let first = total - batch;
    let mut ctx = vec![0f32; batch * d];
    let mut ksum = vec![0f32; d];
    let mut vsum = vec![0f32; d];
    // prefix sums over positions before the new tokens
    for p in 0..first {
        for i in 0..d {
            ksum[i] += keys[p * d + i].to_f32();
            vsum[i] += values[p * d + i].to_f32();
        }
    }
    let scale = 1.0 / (d as f32).sqrt();
    for t in 0..batch {
        let p = first + t;
        for i in 0..d {
            ksum[i] += keys[p * d + i].to_f32();
            vsum[i] += values[p * d + i].to_f32();
        }
        let n = (p + 1) as f32;
        let qt = &q[t * d..(t + 1) * d];
        let score: f32 = qt.iter().zip(&ksum).map(|(a, b)| a * b).sum::<f32>() * scale / n;
        let gate = 1.0 / (1.0 + (-score).exp());
        for (c, v) in ctx[t * d..(t + 1) * d].iter_mut().zip(&vsum) {
            *c = gate * v / n;
        }
    }
    ctx
}

/// One pass of `batch` tokens (token-major `h`, `batch × d_model`) through
/// the stack, appending their keys and values to `cache`. Returns logits.
fn forward(
    model: &SyntheticModel,
    opts: &SimOptions,
    cache: &mut KvCache,
    mut h: Vec<f32>,
    batch: usize,
) -> Result<Vec<f32>> {
    let d = model.config.d_model;
    for (li, layer) in model.layers.iter().enumerate() {
        let mut xn = h.clone();
        rms_norm(&mut xn, d);
        let q = project(opts, &layer.wq, &xn, batch);
        let k = project(opts, &layer.wk, &xn, batch);
        let v = project(opts, &layer.wv, &xn, batch);
        cache.push(li, &k, &v)?;
        let ctx = attend(cache, li, &q, batch);
        let o = project(opts, &layer.wo, &ctx, batch);
        h.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

        let mut xn = h.clone();
        rms_norm(&mut xn, d);
        let mut a = project(opts, &layer.w1, &xn, batch);
        let b = project(opts, &layer.w3, &xn, batch);
        a.par_iter_mut().zip(&b).for_each(|(x, y)| {
            *x = *x / (1.0 + (-*x).exp()) * y;
        });
        let f = project(opts, &layer.w2, &a, batch);
        h.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        rms_norm(&mut h, d);
    }
    cache.commit(batch);
    Ok(project(opts, &model.output, &h, batch))
}

#[allow(clippy::too_many_arguments)]
fn record(
    model: &SyntheticModel,
    phase: Phase,
    tokens: u64,
    weight_passes: u64,
    kv_bytes: u64,
    start: Instant,
    cpu_start: f64,
    opts: &SimOptions,
) -> BenchRecord {
    let wall_time = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    BenchRecord {
        phase,
        tokens,
        wall_time,
        flops: 2 * model.config.parameter_count() * tokens,
        bytes: model.weight_bytes() * weight_passes,
        kv_bytes,
        activation_bytes: model.activation_bytes_per_token() * tokens,
        peak_resident_bytes: None,
        cpu_time: (process_cpu_time() - cpu_start).max(0.0),
        workers: opts.workers.count(),
        trial_index: 0,
    }
}

/// Processes `input_len` synthetic prompt tokens as one batch. Weights are
/// traversed once; the cache ends up holding the prompt.
pub fn simulate_prefill(
    model: &SyntheticModel,
    input_len: usize,
    cache: &mut KvCache,
    opts: &SimOptions,
) -> Result<BenchRecord> {
    if input_len == 0 {
        return Err(Error::Parameter("input_len must be >= 1".into()));
    }
    let d = model.config.d_model;
    let mut h = Vec::new();
    h.try_reserve_exact(input_len * d)
        .map_err(|e| Error::Resource(format!("prompt activations: {e}")))?;
    h.resize(input_len * d, 0.0);
    fill_normal(&mut h, mix_seed(opts.seed, 0x5052_4546));
    let kv_before = cache.account().total_bytes();
    let cpu_start = process_cpu_time();
    let start = Instant::now();
    let logits = forward(model, opts, cache, h, input_len)?;
    std::hint::black_box(&logits);
    let kv_written = cache.account().total_bytes() - kv_before;
    Ok(record(
        model,
        Phase::Prefill,
        input_len as u64,
        1,
        kv_written,
        start,
        cpu_start,
        opts,
    ))
}

/// Generates `output_len` tokens one at a time on top of whatever the cache
/// holds. Every step re-streams all weights and reads the whole cache.
pub fn simulate_decode(
    model: &SyntheticModel,
    output_len: usize,
    cache: &mut KvCache,
    opts: &SimOptions,
) -> Result<BenchRecord> {
    if output_len == 0 {
        return Err(Error::Parameter("output_len must be >= 1".into()));
    }
    let d = model.config.d_model;
    let bpt = cache.account().bytes_per_token;
    let cpu_start = process_cpu_time();
    let start = Instant::now();
    let mut kv_bytes = 0u64;
    let mut h = vec![0f32; d];
    for step in 0..output_len {
        fill_normal(&mut h, mix_seed(opts.seed, 0x4445_4300 + step as u64));
        let logits = forward(model, opts, cache, h.clone(), 1)?;
        std::hint::black_box(&logits);
        // the step reads every cached entry, including the one it wrote
        kv_bytes += bpt * cache.len() as u64 + bpt;
    }
    Ok(record(
        model,
        Phase::Decode,
        output_len as u64,
        output_len as u64,
        kv_bytes,
        start,
        cpu_start,
        opts,
    ))
}
