//! Matrix-vector and matrix-matrix products over quantized tensors, and a
//! prefill/decode simulation of a synthetic layer stack.
//!
//! Blocks run over the row-major flattening, so a block may straddle two
//! rows. Decoding happens in units of 256 stored values: eight flat blocks,
//! one super-block, or a run of raw binary16 values. A row's result is the
//! `f64` sum, in ascending unit order, of one `f32` partial dot product per
//! unit segment that overlaps the row. A partial sends element `i` of its
//! segment to lane `i % 64`; each lane is a chain of fused multiply-adds from
//! zero and the lanes reduce in a fixed halving tree. Decoded values are
//! single-rounding affine maps of the codes (`fma(q, a, b)`).
//!
//! Both kernel modes evaluate the same partials in the same order, so their
//! results are bitwise equal, and a row is always computed by a single
//! worker. On x86-64 the kernels are also compiled for AVX2 and AVX-512 and
//! picked at run time. Those paths perform the same IEEE operations as the
//! scalar one, so results do not depend on the path taken.

mod sim;
mod simd;

pub use sim::{
    predicted_bpw, predicted_weight_bytes, simulate_decode, simulate_prefill, KvCache,
    KvCacheAccount, LayerWeights, SimOptions, SyntheticModel,
};

use std::sync::OnceLock;

use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::codecs::{unpack_fixed, unpack_planes, Layout, QuantizedTensor};
use crate::error::{Error, Result};
use simd::{dot, Scalar, Simd, UNIT};
#[cfg(target_arch = "x86_64")]
use simd::{Avx2, Avx512};

/// Environment variable that pins the worker count.
pub const WORKERS_ENV: &str = "KQUANT_WORKERS";

/// Environment variable that caps the instruction-set tier used by the
/// kernels (`scalar`, `avx2` or `avx512`). Results do not depend on it.
pub const ISA_ENV: &str = "KQUANT_ISA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    /// Decode a whole row into a buffer, then run the dot products.
    UnpackThenCompute,
    /// Decode one unit at a time and consume it immediately.
    FusedPerBlock,
}

/// Fixed-size worker pool for kernels.
pub struct Workers {
    pool: ThreadPool,
}

impl Workers {
    pub fn new(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Parameter("worker count must be at least 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(count)
            .thread_name(|i| format!("kquant-worker-{i}"))
            .build()
            .map_err(|e| Error::Resource(format!("cannot start worker pool: {e}")))?;
        Ok(Self { pool })
    }

    pub fn count(&self) -> usize {
        self.pool.current_num_threads()
    }

    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }
}

/// Worker count from `KQUANT_WORKERS`, else the available parallelism.
pub fn default_worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn default_workers() -> &'static Workers {
    static POOL: OnceLock<Workers> = OnceLock::new();
    POOL.get_or_init(|| Workers::new(default_worker_count()).expect("default worker pool"))
}

/// Decoder for one layout. Every unit holds `UNIT` values except possibly
/// the last one of a tensor.
trait Decoder {
    const UNIT_BYTES: usize;
    /// Decodes `out.len()` values of one unit.
    fn decode<S: Simd>(bytes: &[u8], out: &mut [f32]);
    /// Partial of a full unit against `x`; equal to decoding followed by
    /// `S::dot_unit`.
    #[inline(always)]
    fn fused_dot<S: Simd>(bytes: &[u8], x: &[f32], buf: &mut [f32; UNIT]) -> f32 {
        Self::decode::<S>(bytes, buf);
        S::dot_unit(buf, x)
    }
}

struct F16Run;
struct Flat<const B: usize>;
struct Super<const SUB: usize, const WB: usize, const PB: usize, const ASYM: bool>;

impl Decoder for F16Run {
    const UNIT_BYTES: usize = 2 * UNIT;
    #[inline(always)]
    fn decode<S: Simd>(bytes: &[u8], out: &mut [f32]) {
        S::f16_decode(bytes, out)
    }
    #[inline(always)]
    fn fused_dot<S: Simd>(bytes: &[u8], x: &[f32], _buf: &mut [f32; UNIT]) -> f32 {
        S::f16_dot_unit(bytes, x)
    }
}

/// Eight flat blocks per unit.
impl<const B: usize> Decoder for Flat<B> {
    const UNIT_BYTES: usize = 8 * (2 + 4 * B);
    #[inline(always)]
    fn decode<S: Simd>(bytes: &[u8], out: &mut [f32]) {
        let mut codes = [0u8; 32];
        for (o, b) in out.chunks_exact_mut(32).zip(bytes.chunks_exact(2 + 4 * B)) {
            if B == 4 {
                unpack_planes::<4>(&b[2..18], 16, &mut codes);
            } else {
                unpack_fixed::<B>(&b[2..], &mut codes);
            }
            let d = S::half(b);
            S::affine(&codes, d, -((1 << (B - 1)) as f32) * d, o);
        }
    }
    #[inline(always)]
    fn fused_dot<S: Simd>(bytes: &[u8], x: &[f32], buf: &mut [f32; UNIT]) -> f32 {
        match B {
            8 => S::flat8_dot_unit(bytes, x),
            4 => S::flat4_dot_unit(bytes, x),
            _ => {
                Self::decode::<S>(bytes, buf);
                S::dot_unit(buf, x)
            }
        }
    }
}

impl<const SUB: usize, const WB: usize, const PB: usize, const ASYM: bool> Decoder
    for Super<SUB, WB, PB, ASYM>
{
    const UNIT_BYTES: usize =
        2 * (1 + ASYM as usize) + (UNIT / SUB) * PB / 8 * (1 + ASYM as usize) + 32 * WB;
    #[inline(always)]
    fn decode<S: Simd>(bytes: &[u8], out: &mut [f32]) {
        let (codes, a, b) = Self::split::<S>(bytes);
        for (g, (o, c)) in out[..UNIT]
            .chunks_exact_mut(SUB)
            .zip(codes.chunks_exact(SUB))
            .enumerate()
        {
            S::affine(c, a[g], b[g], o);
        }
    }
    #[inline(always)]
    fn fused_dot<S: Simd>(bytes: &[u8], x: &[f32], _buf: &mut [f32; UNIT]) -> f32 {
        let (codes, a, b) = Self::split::<S>(bytes);
        S::affine_dot(&codes, SUB, &a, &b, x)
    }
}

impl<const SUB: usize, const WB: usize, const PB: usize, const ASYM: bool>
    Super<SUB, WB, PB, ASYM>
{
    /// Weight codes and the per-sub-block affine map `fma(q, a, b)`.
    #[inline(always)]
    fn split<S: Simd>(bytes: &[u8]) -> ([u8; UNIT], [f32; 16], [f32; 16]) {
        let n_sub = UNIT / SUB;
        let pbytes = n_sub * PB / 8;
        let d = S::half(bytes);
        let (dmin, mut pos) = if ASYM {
            (S::half(&bytes[2..]), 4)
        } else {
            (0.0, 2)
        };
        let mut sc = [0u8; 16];
        let mut mc = [0u8; 16];
        unpack_fixed::<PB>(&bytes[pos..pos + pbytes], &mut sc[..n_sub]);
        pos += pbytes;
        if ASYM {
            unpack_fixed::<PB>(&bytes[pos..pos + pbytes], &mut mc[..n_sub]);
            pos += pbytes;
        }
        let mut codes = [0u8; UNIT];
        if WB == 2 || WB == 4 {
            S::planes::<WB>(&bytes[pos..pos + 32 * WB], &mut codes);
        } else {
            unpack_fixed::<WB>(&bytes[pos..pos + 32 * WB], &mut codes);
        }
        let (mut a, mut b) = ([0f32; 16], [0f32; 16]);
        for j in 0..n_sub {
            // both products are exact in f32
            a[j] = sc[j] as f32 * d;
            b[j] = if ASYM {
                mc[j] as f32 * dmin
            } else {
                -((1 << (WB - 1)) as f32) * a[j]
            };
        }
        (codes, a, b)
    }
}

/// Operands of one product: token-major activations `xt` (`batch × cols`).
struct Job<'a> {
    blocks: &'a [u8],
    cols: usize,
    /// Stored element count (padding included).
    total: usize,
    xt: &'a [f32],
    batch: usize,
    mode: KernelMode,
}

/// Computes rows `row0..` into `out` (`rows × batch`, row-major).
#[inline(always)]
fn rows_kernel<D: Decoder, S: Simd>(job: &Job, row0: usize, out: &mut [f32]) {
    let (cols, batch) = (job.cols, job.batch);
    let (unit, ub) = (UNIT, D::UNIT_BYTES);
    let mut row_buf: Vec<f32> = Vec::new();
    let mut unit_buf = [0f32; UNIT];
    let mut acc = vec![0f64; batch];
    let unit_len = |u: usize| unit.min(job.total - u * unit);
    let unit_bytes = |u: usize| &job.blocks[u * ub..][..unit_len(u) * ub / unit];

    for (k, yr) in out.chunks_exact_mut(batch).enumerate() {
        let start = (row0 + k) * cols;
        let end = start + cols;
        let (u0, u1) = (start / unit, end.div_ceil(unit));
        // units entirely inside the row
        let (f0, f1) = (start.div_ceil(unit), end / unit);
        let (f0, f1) = if f0 < f1 { (f0, f1) } else { (u1, u1) };
        let x_at = |j: usize, u: usize| &job.xt[j * cols + (u * unit).clamp(start, end) - start..];
        let seg = |u: usize| {
            let u_start = u * unit;
            (
                start.max(u_start) - u_start,
                end.min(u_start + unit) - u_start,
            )
        };
        acc.fill(0.0);
        match job.mode {
            KernelMode::UnpackThenCompute => {
                row_buf.resize((u1 - u0) * unit, 0.0);
                for u in u0..u1 {
                    D::decode::<S>(
                        unit_bytes(u),
                        &mut row_buf[(u - u0) * unit..][..unit_len(u)],
                    );
                }
                for (j, a) in acc.iter_mut().enumerate() {
                    let mut s = *a;
                    for u in u0..f0 {
                        let (lo, hi) = seg(u);
                        s += dot(&row_buf[(u - u0) * unit..][lo..hi], x_at(j, u)) as f64;
                    }
                    let w = if f1 > f0 {
                        &row_buf[(f0 - u0) * unit..(f1 - u0) * unit]
                    } else {
                        &[]
                    };
                    let x = &x_at(j, f0)[..w.len()];
                    for (wu, xu) in w.chunks_exact(unit).zip(x.chunks_exact(unit)) {
                        s += S::dot_unit(wu, xu) as f64;
                    }
                    for u in f1.max(f0)..u1 {
                        let (lo, hi) = seg(u);
                        s += dot(&row_buf[(u - u0) * unit..][lo..hi], x_at(j, u)) as f64;
                    }
                    *a = s;
                }
            }
            KernelMode::FusedPerBlock => {
                let mut partial = |u: usize, acc: &mut [f64]| {
                    let (lo, hi) = seg(u);
                    D::decode::<S>(unit_bytes(u), &mut unit_buf[..unit_len(u)]);
                    for (j, a) in acc.iter_mut().enumerate() {
                        *a += dot(&unit_buf[lo..hi], x_at(j, u)) as f64;
                    }
                };
                for u in u0..f0 {
                    partial(u, &mut acc);
                }
                let blocks = if f1 > f0 {
                    &job.blocks[f0 * ub..f1 * ub]
                } else {
                    &[]
                };
                if batch == 1 {
                    let x = &x_at(0, f0)[..(f1 - f0) * unit];
                    let mut s = acc[0];
                    let mut buf = [0f32; UNIT];
                    for (b, xu) in blocks.chunks_exact(ub).zip(x.chunks_exact(unit)) {
                        s += D::fused_dot::<S>(b, xu, &mut buf) as f64;
                    }
                    acc[0] = s;
                } else {
                    let mut buf = [0f32; UNIT];
                    for (i, b) in blocks.chunks_exact(ub).enumerate() {
                        D::decode::<S>(b, &mut buf);
                        for (j, a) in acc.iter_mut().enumerate() {
                            *a += S::dot_unit(&buf, x_at(j, f0 + i)) as f64;
                        }
                    }
                }
                for u in f1.max(f0)..u1 {
                    partial(u, &mut acc);
                }
            }
        }
        for (y, a) in yr.iter_mut().zip(acc.iter()) {
            *y = *a as f32;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma,f16c")]
fn rows_kernel_avx2<D: Decoder>(job: &Job, row0: usize, out: &mut [f32]) {
    rows_kernel::<D, Avx2>(job, row0, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512bw,avx2,fma,f16c")]
fn rows_kernel_avx512<D: Decoder>(job: &Job, row0: usize, out: &mut [f32]) {
    rows_kernel::<D, Avx512>(job, row0, out)
}

/// Instruction-set tier chosen for this process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Isa {
    Scalar,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    #[cfg(target_arch = "x86_64")]
    Avx512,
}

fn detect_isa() -> Isa {
    let cap = std::env::var(ISA_ENV)
        .unwrap_or_default()
        .to_ascii_lowercase();
    if cap == "scalar" {
        return Isa::Scalar;
    }
    #[cfg(target_arch = "x86_64")]
    {
        use std::arch::is_x86_feature_detected as has;
        let avx2 = has!("avx2") && has!("fma") && has!("f16c");
        if avx2 && cap != "avx2" && has!("avx512f") && has!("avx512bw") {
            return Isa::Avx512;
        }
        if avx2 {
            return Isa::Avx2;
        }
    }
    Isa::Scalar
}

fn isa() -> Isa {
    static ISA: OnceLock<Isa> = OnceLock::new();
    *ISA.get_or_init(detect_isa)
}

fn rows_dispatch<D: Decoder>(isa: Isa, job: &Job, row0: usize, out: &mut [f32]) {
    match isa {
        Isa::Scalar => rows_kernel::<D, Scalar>(job, row0, out),
        // SAFETY: the tiers below are only selected after detecting their
        // features.
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => unsafe { rows_kernel_avx2::<D>(job, row0, out) },
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe { rows_kernel_avx512::<D>(job, row0, out) },
    }
}

fn run_rows<D: Decoder>(isa: Isa, job: &Job, out: &mut [f32]) {
    let rows_per_task = (16384 / job.cols).clamp(1, 64);
    out.par_chunks_mut(rows_per_task * job.batch)
        .enumerate()
        .for_each(|(t, o)| rows_dispatch::<D>(isa, job, t * rows_per_task, o));
}

/// Row-parallel product into `out` (`rows × batch`); must run inside a
/// worker pool.
fn product_into(
    isa: Isa,
    qt: &QuantizedTensor,
    xt: &[f32],
    batch: usize,
    mode: KernelMode,
    out: &mut [f32],
) {
    let job = Job {
        blocks: &qt.blocks,
        cols: qt.shape.cols,
        total: qt.padded_len(),
        xt,
        batch,
        mode,
    };
    let layout = qt.layout();
    macro_rules! go {
        ($d:ty) => {{
            debug_assert!(
                layout == Layout::F16
                    || <$d>::UNIT_BYTES == UNIT / layout.block_len() * layout.block_bytes()
            );
            run_rows::<$d>(isa, &job, out)
        }};
    }
    match layout {
        Layout::F16 => go!(F16Run),
        Layout::Flat { bits: 8 } => go!(Flat<8>),
        Layout::Flat { bits: 5 } => go!(Flat<5>),
        Layout::Flat { bits: 4 } => go!(Flat<4>),
        Layout::Super {
            sub_len,
            weight_bits,
            param_bits,
            asymmetric,
        } => match (sub_len, weight_bits, param_bits, asymmetric) {
            (32, 5, 6, true) => go!(Super<32, 5, 6, true>),
            (32, 4, 6, true) => go!(Super<32, 4, 6, true>),
            (16, 6, 8, false) => go!(Super<16, 6, 8, false>),
            (16, 3, 6, false) => go!(Super<16, 3, 6, false>),
            (16, 2, 4, true) => go!(Super<16, 2, 4, true>),
            _ => unreachable!("no kernel for layout {layout}"),
        },
        _ => unreachable!("no kernel for layout {layout}"),
    }
}

fn check_cols(qt: &QuantizedTensor, len: usize) -> Result<()> {
    if len != qt.shape.cols {
        return Err(Error::ShapeMismatch {
            expected: qt.shape.cols,
            got: len,
        });
    }
    Ok(())
}

/// `y = dequantize(qt) · x` on the default worker pool.
pub fn gemv_quant(qt: &QuantizedTensor, x: &[f32], mode: KernelMode) -> Result<Vec<f32>> {
    gemv_quant_on(default_workers(), qt, x, mode)
}

pub fn gemv_quant_on(
    workers: &Workers,
    qt: &QuantizedTensor,
    x: &[f32],
    mode: KernelMode,
) -> Result<Vec<f32>> {
    check_cols(qt, x.len())?;
    let mut y = vec![0f32; qt.shape.rows];
    workers.install(|| product_into(isa(), qt, x, 1, mode, &mut y));
    Ok(y)
}

/// Batched product. `x` is `cols × batch` row-major (column `j` is token
/// `j`); the result is `rows × batch` row-major. Column `j` of the result is
/// bitwise equal to `gemv_quant` on column `j` of `x`. In unpack mode each
/// row is decoded once and reused for every column.
pub fn gemm_quant(
    qt: &QuantizedTensor,
    x: &[f32],
    batch: usize,
    mode: KernelMode,
) -> Result<Vec<f32>> {
    gemm_quant_on(default_workers(), qt, x, batch, mode)
}

pub fn gemm_quant_on(
    workers: &Workers,
    qt: &QuantizedTensor,
    x: &[f32],
    batch: usize,
    mode: KernelMode,
) -> Result<Vec<f32>> {
    let cols = qt.shape.cols;
    if x.len() != cols * batch {
        return Err(Error::ShapeMismatch {
            expected: cols * batch,
            got: x.len(),
        });
    }
    if batch == 0 {
        return Ok(Vec::new());
    }
    let mut xt = vec![0f32; x.len()];
    for c in 0..cols {
        for j in 0..batch {
            xt[j * cols + c] = x[c * batch + j];
        }
    }
    let mut y = vec![0f32; qt.shape.rows * batch];
    workers.install(|| product_into(isa(), qt, &xt, batch, mode, &mut y));
    Ok(y)
}

/// Token-major product for the simulation: `xt` is `batch × cols`, `out`
/// is `rows × batch`. Must run inside a worker pool.
pub(crate) fn gemm_tokens_into(
    qt: &QuantizedTensor,
    xt: &[f32],
    batch: usize,
    mode: KernelMode,
    out: &mut [f32],
) {
    product_into(isa(), qt, xt, batch, mode, out)
}
