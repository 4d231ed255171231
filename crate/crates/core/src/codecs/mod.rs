//! Quantization codecs: scalar formulas, packed block formats, tensor-level
//! quantization and the QBF1 container.

pub mod bits;
pub mod block;
pub mod container;
pub mod scalar;
pub mod scheme;

use num_rational::Ratio;
use rayon::prelude::*;

pub use block::{decode_block, decode_span, encode_block};
pub(crate) use block::{half_to_f32, unpack_fixed, unpack_planes, PLANE_CHUNK};
pub use container::{decode_container, encode_container, read_container, write_container};
pub use scalar::{
    dequantize_asymmetric, dequantize_symmetric, quantize_asymmetric, quantize_symmetric,
    AsymmetricQuant, SymmetricQuant,
};
pub use scheme::{bpw, is_high_precision_layer, Layout, QuantScheme, RoleLayout};

use crate::error::{Error, Result};
use crate::tensor::{check_finite, DenseTensor, LayerTensor, Role, TensorShape};

/// A tensor packed under one scheme. Blocks run over the row-major
/// flattening of the matrix; the last block is zero-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub name: String,
    pub shape: TensorShape,
    pub scheme: QuantScheme,
    pub role: Role,
    /// Selects the high-precision layout on roles the scheme splits.
    pub high_precision: bool,
    pub blocks: Vec<u8>,
    pub pad_count: usize,
}

impl QuantizedTensor {
    pub fn layout(&self) -> Layout {
        self.scheme.layout(self.role, self.high_precision)
    }

    pub fn block_count(&self) -> usize {
        (self.shape.len() + self.pad_count) / self.layout().block_len()
    }

    pub fn padded_len(&self) -> usize {
        self.shape.len() + self.pad_count
    }

    pub fn payload_bits(&self) -> u64 {
        self.blocks.len() as u64 * 8
    }

    /// Effective bits per stored (padded) weight.
    pub fn bpw(&self) -> Ratio<u64> {
        Ratio::new(self.payload_bits(), self.padded_len() as u64)
    }

    pub fn block_bytes(&self, index: usize) -> &[u8] {
        let n = self.layout().block_bytes();
        &self.blocks[index * n..(index + 1) * n]
    }

    /// Checks internal consistency: payload length against shape/layout and
    /// finiteness of the stored binary16 parameters.
    pub fn validate(&self) -> Result<()> {
        let layout = self.layout();
        let bl = layout.block_len();
        if self.pad_count >= bl {
            return Err(Error::CorruptData(format!(
                "{}: pad count {} not below block size {bl}",
                self.name, self.pad_count
            )));
        }
        if !self.padded_len().is_multiple_of(bl) {
            return Err(Error::CorruptData(format!(
                "{}: padded length {} not a multiple of {bl}",
                self.name,
                self.padded_len()
            )));
        }
        let expected = self.block_count().checked_mul(layout.block_bytes());
        if expected != Some(self.blocks.len()) {
            return Err(Error::CorruptData(format!(
                "{}: payload {} bytes, layout needs {:?}",
                self.name,
                self.blocks.len(),
                expected
            )));
        }
        if layout != Layout::F16 {
            for b in 0..self.block_count() {
                if block::block_halves(layout, self.block_bytes(b)).any(|h| !h.is_finite()) {
                    return Err(Error::CorruptData(format!(
                        "{}: non-finite scale in block {b}",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Dequantizes the whole tensor (padding dropped).
    pub fn dequantize(&self) -> Vec<f32> {
        let layout = self.layout();
        let bl = layout.block_len();
        let bb = layout.block_bytes();
        let mut out = vec![0f32; self.padded_len()];
        out.par_chunks_mut(bl.max(256))
            .zip(self.blocks.par_chunks(bb * (bl.max(256) / bl)))
            .for_each(|(dst, src)| {
                for (o, b) in dst.chunks_mut(bl).zip(src.chunks(bb)) {
                    decode_block(layout, b, o);
                }
            });
        out.truncate(self.shape.len());
        out
    }

    pub fn to_dense(&self) -> DenseTensor {
        DenseTensor {
            shape: self.shape,
            values: self.dequantize(),
            role: self.role,
        }
    }
}

/// Quantizes with the standard layout for the tensor's role.
pub fn quantize_tensor(
    t: &DenseTensor,
    scheme: QuantScheme,
    importance: Option<&[f32]>,
) -> Result<QuantizedTensor> {
    quantize_tensor_with(String::new(), t, scheme, false, importance)
}

/// Quantizes a model tensor, picking the high-precision path on even layers.
pub fn quantize_layer_tensor(
    lt: &LayerTensor,
    scheme: QuantScheme,
    importance: Option<&[f32]>,
) -> Result<QuantizedTensor> {
    quantize_tensor_with(
        lt.name.clone(),
        &lt.tensor,
        scheme,
        is_high_precision_layer(lt.layer),
        importance,
    )
}

/// Full-control entry point. `importance` holds per-column mean squared
/// activations (`cols` entries) and switches block fitting to the weighted
/// objective.
pub fn quantize_tensor_with(
    name: String,
    t: &DenseTensor,
    scheme: QuantScheme,
    high_precision: bool,
    importance: Option<&[f32]>,
) -> Result<QuantizedTensor> {
    check_finite(&t.values)?;
    let cols = t.shape.cols;
    if let Some(a) = importance {
        if a.len() != cols {
            return Err(Error::ShapeMismatch {
                expected: cols,
                got: a.len(),
            });
        }
        check_finite(a)?;
        if a.iter().any(|&v| v < 0.0) {
            return Err(Error::Parameter("negative importance weight".into()));
        }
    }
    let high_precision = high_precision && scheme.splits(t.role);
    let layout = scheme.layout(t.role, high_precision);
    let bl = layout.block_len();
    let bb = layout.block_bytes();
    let n = t.values.len();
    let n_blocks = n.div_ceil(bl);
    let pad_count = n_blocks * bl - n;

    let mut blocks = vec![0u8; n_blocks * bb];
    // Encode in chunks of whole blocks so tiny layouts (FP16) are not
    // dispatched one value at a time.
    let per_task = (4096 / bl).max(1);
    blocks
        .par_chunks_mut(bb * per_task)
        .enumerate()
        .for_each(|(task, dst)| {
            let mut xbuf = vec![0f32; bl];
            let mut abuf = vec![0f32; bl];
            for (k, out) in dst.chunks_mut(bb).enumerate() {
                let start = (task * per_task + k) * bl;
                let end = (start + bl).min(n);
                xbuf[..end - start].copy_from_slice(&t.values[start..end]);
                xbuf[end - start..].fill(0.0);
                let a = importance.map(|imp| {
                    for (i, slot) in abuf.iter_mut().enumerate() {
                        let flat = start + i;
                        // padding carries no weight
                        *slot = if flat < n { imp[flat % cols] } else { 0.0 };
                    }
                    &abuf[..]
                });
                encode_block(layout, &xbuf, a, out);
            }
        });

    Ok(QuantizedTensor {
        name,
        shape: t.shape,
        scheme,
        role: t.role,
        high_precision,
        blocks,
        pad_count,
    })
}

pub fn rmse(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let sse: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    (sse / a.len() as f64).sqrt()
}

/// RMSE between `t` and its quantize/dequantize round trip.
pub fn round_trip_rmse(
    t: &DenseTensor,
    scheme: QuantScheme,
    importance: Option<&[f32]>,
) -> Result<f64> {
    let q = quantize_tensor(t, scheme, importance)?;
    Ok(rmse(&t.values, &q.dequantize()))
}
