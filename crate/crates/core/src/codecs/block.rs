//! Encoding and decoding of single blocks.
//!
//! Byte layout of each block (all multi-byte fields little-endian):
//!
//! | layout        | fields                                                            |
//! |---------------|-------------------------------------------------------------------|
//! | `F16`         | one binary16 value                                                |
//! | `Flat`        | scale f16, 32 codes (`code + 2^(b-1)`, packed `b` bits each)      |
//! | `Flat` 4-bit  | scale f16, 32 codes as nibble planes of 16 bytes                  |
//! | `Super` sym   | d f16, sub-block scale codes, 256 weight codes (offset like Flat) |
//! | `Super` asym  | d f16, dmin f16, scale codes, min codes, 256 weight codes         |
//!
//! 2- and 4-bit codes are stored as planes: within each group of `n` bytes
//! (16 for flat blocks, 32 for super-block weights), bit field `m` of byte
//! `j` holds code `m * n + j`. Other widths use the packed bit stream.
//!
//! Sub-block scales dequantize as `sc * d`, mins as `mc * dmin`; both f32
//! products are exact. Symmetric weights dequantize as `(q * sc) * d`,
//! asymmetric ones as the single-rounding `fma(q, sc * d, mc * dmin)`.
//!
//! Without importance weights the fit is min/max based, with scales rounded
//! up and mins rounded down during hierarchical quantization so every element
//! lands inside the code range (no clamping). With importance weights each
//! sub-block comes from [`weighted_affine_fit`] and the hierarchy rounds to
//! nearest.

use half::f16;

use super::bits::{pack_bits, packed_len, unpack_bits};
use super::scalar::{round_half_away, signed_range, unsigned_max};
use super::scheme::{Layout, SUPER_BLOCK};
use crate::imatrix::{block_weights, weighted_affine_fit};

/// Nearest binary16, saturating at the largest finite value.
pub fn f16_saturating(v: f32) -> f16 {
    if v.is_nan() {
        return f16::ZERO;
    }
    if v.abs() >= f16::MAX.to_f32() {
        return if v > 0.0 { f16::MAX } else { f16::MIN };
    }
    f16::from_f32(v)
}

/// Smallest binary16 `>= v` for `v >= 0` (saturating).
pub fn f16_round_up(v: f32) -> f16 {
    debug_assert!(v >= 0.0);
    let h = f16_saturating(v);
    if h.to_f32() < v && h != f16::MAX {
        f16::from_bits(h.to_bits() + 1)
    } else {
        h
    }
}

#[inline(always)]
fn read_f16(bytes: &[u8], at: usize) -> f32 {
    f16::from_le_bytes([bytes[at], bytes[at + 1]]).to_f32()
}

fn write_f16(out: &mut [u8], at: usize, v: f16) {
    out[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

/// Covering symmetric scale: the largest negative value maps to at most
/// `-2^(n-1)` and the largest positive value to at most `2^(n-1) - 1`.
fn covering_scale(x: &[f32], n_bits: u32) -> f64 {
    let (lo, hi) = signed_range(n_bits);
    let (mn, mx) = x
        .iter()
        .fold((0f32, 0f32), |(a, b), &v| (a.min(v), b.max(v)));
    (mn as f64 / lo as f64).max(mx as f64 / hi as f64)
}

fn importance_fit(x: &[f32], a_sq: &[f32], n_bits: u32, asymmetric: bool) -> (f64, f64) {
    let bw = block_weights(x, a_sq).expect("block values are finite");
    let fit = weighted_affine_fit(x, &bw.a_tilde_sq, n_bits, asymmetric)
        .expect("bit width validated by layout");
    (fit.scale.max(0.0), fit.min)
}

/// Encodes one block of `layout.block_len()` values into `out`
/// (`layout.block_bytes()` long). `a_sq` holds per-element mean squared
/// activations when importance weighting is requested.
pub fn encode_block(layout: Layout, x: &[f32], a_sq: Option<&[f32]>, out: &mut [u8]) {
    debug_assert_eq!(x.len(), layout.block_len());
    debug_assert_eq!(out.len(), layout.block_bytes());
    match layout {
        Layout::F16 => write_f16(out, 0, f16_saturating(x[0])),
        Layout::Flat { bits } => encode_flat(bits as u32, x, a_sq, out),
        Layout::Super {
            sub_len,
            weight_bits,
            param_bits,
            asymmetric,
        } => encode_super(
            sub_len as usize,
            weight_bits as u32,
            param_bits as u32,
            asymmetric,
            x,
            a_sq,
            out,
        ),
    }
}

fn encode_flat(bits: u32, x: &[f32], a_sq: Option<&[f32]>, out: &mut [u8]) {
    let (lo, hi) = signed_range(bits);
    let d = match a_sq {
        None => f16_round_up(covering_scale(x, bits) as f32),
        Some(a) => f16_saturating(importance_fit(x, a, bits, false).0 as f32),
    };
    write_f16(out, 0, d);
    let df = d.to_f32() as f64;
    let mut codes = [0u32; 32];
    for (c, &v) in codes.iter_mut().zip(x) {
        let q = if df > 0.0 {
            (round_half_away(v as f64 / df) as i64).clamp(lo as i64, hi as i64) as i32
        } else {
            0
        };
        *c = (q - lo) as u32;
    }
    if bits == 4 {
        pack_planes(&codes, 4, 16, &mut out[2..18]);
    } else {
        pack_bits(&codes, bits, &mut out[2..]);
    }
}

/// Bytes per plane chunk of 2- and 4-bit super-block weight codes.
pub(crate) const PLANE_CHUNK: usize = 32;

fn planar_weights(bits: u32) -> bool {
    bits == 2 || bits == 4
}

/// Plane packing of 2- or 4-bit codes: in every `chunk`-byte group, bit
/// field `m` of byte `j` holds code `m * chunk + j` of that group.
fn pack_planes(codes: &[u32], bits: u32, chunk: usize, out: &mut [u8]) {
    let per = (8 / bits) as usize;
    for (c, o) in codes
        .chunks_exact(chunk * per)
        .zip(out.chunks_exact_mut(chunk))
    {
        for (j, b) in o.iter_mut().enumerate() {
            *b = (0..per).fold(0u32, |acc, m| acc | c[m * chunk + j] << (bits as usize * m)) as u8;
        }
    }
}

/// Inverse of [`pack_planes`] for `W`-bit codes.
#[inline(always)]
pub(crate) fn unpack_planes<const W: usize>(bytes: &[u8], chunk: usize, out: &mut [u8]) {
    let per = 8 / W;
    let mask = ((1u32 << W) - 1) as u8;
    for (o, b) in out
        .chunks_exact_mut(chunk * per)
        .zip(bytes.chunks_exact(chunk))
    {
        for (m, plane) in o.chunks_exact_mut(chunk).enumerate() {
            for (c, &v) in plane.iter_mut().zip(b) {
                *c = (v >> (W * m)) & mask;
            }
        }
    }
}

/// Quantizes non-negative sub-block scales against one binary16 super scale.
fn quantize_scales(scales: &[f64], param_bits: u32, cover: bool, codes: &mut [u32]) -> f16 {
    let qp = unsigned_max(param_bits);
    let smax = scales.iter().cloned().fold(0.0, f64::max);
    let target = (smax / qp as f64) as f32;
    let d = if cover {
        f16_round_up(target)
    } else {
        f16_saturating(target)
    };
    let df = d.to_f32() as f64;
    for (c, &s) in codes.iter_mut().zip(scales) {
        *c = if df > 0.0 {
            let r = s / df;
            let r = if cover { r.ceil() } else { round_half_away(r) };
            r.clamp(0.0, qp as f64) as u32
        } else {
            0
        };
    }
    d
}

/// Quantizes sub-block mins against a signed binary16 super min. When any
/// min is negative the super min is negative and non-negative mins get code
/// 0. With `cover` the stored min never exceeds the raw min.
fn quantize_mins(mins: &[f64], param_bits: u32, cover: bool, codes: &mut [u32]) -> f16 {
    let qp = unsigned_max(param_bits) as f64;
    let most_negative = mins.iter().cloned().fold(0.0, f64::min);
    let dmin = if most_negative < 0.0 {
        let mag = (-most_negative / qp) as f32;
        -if cover {
            f16_round_up(mag)
        } else {
            f16_saturating(mag)
        }
    } else {
        let mx = mins.iter().cloned().fold(0.0, f64::max);
        f16_saturating((mx / qp) as f32)
    };
    let df = dmin.to_f32() as f64;
    for (c, &m) in codes.iter_mut().zip(mins) {
        *c = if df != 0.0 {
            let r = m / df;
            // df < 0: ceil moves the stored min down; df > 0: floor does.
            let r = match (cover, df < 0.0) {
                (true, true) => r.ceil(),
                (true, false) => r.floor(),
                (false, _) => round_half_away(r),
            };
            r.clamp(0.0, qp) as u32
        } else {
            0
        };
    }
    dmin
}

fn encode_super(
    sub_len: usize,
    weight_bits: u32,
    param_bits: u32,
    asymmetric: bool,
    x: &[f32],
    a_sq: Option<&[f32]>,
    out: &mut [u8],
) {
    let n_sub = SUPER_BLOCK / sub_len;
    let qmax = unsigned_max(weight_bits);
    let (lo, hi) = signed_range(weight_bits);
    let cover = a_sq.is_none();

    let mut raw_scales = [0f64; 16];
    let mut raw_mins = [0f64; 16];
    for j in 0..n_sub {
        let sub = &x[j * sub_len..(j + 1) * sub_len];
        match a_sq {
            Some(a) => {
                let (s, m) = importance_fit(
                    sub,
                    &a[j * sub_len..(j + 1) * sub_len],
                    weight_bits,
                    asymmetric,
                );
                raw_scales[j] = s;
                raw_mins[j] = m;
            }
            None if asymmetric => {
                raw_mins[j] = sub.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
            }
            None => raw_scales[j] = covering_scale(sub, weight_bits),
        }
    }

    let mut min_codes = [0u32; 16];
    let mut pos = 2;
    let mut stored_mins = [0f64; 16];
    let dmin = if asymmetric {
        let dmin = quantize_mins(
            &raw_mins[..n_sub],
            param_bits,
            cover,
            &mut min_codes[..n_sub],
        );
        let dmf = dmin.to_f32();
        for j in 0..n_sub {
            stored_mins[j] = (min_codes[j] as f32 * dmf) as f64;
            if cover {
                // scale spans [stored min, max] of the sub-block
                let sub = &x[j * sub_len..(j + 1) * sub_len];
                let mx = sub.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                raw_scales[j] = ((mx - stored_mins[j]) / qmax as f64).max(0.0);
            }
        }
        pos += 2;
        Some(dmin)
    } else {
        None
    };

    let mut scale_codes = [0u32; 16];
    let d = quantize_scales(
        &raw_scales[..n_sub],
        param_bits,
        cover,
        &mut scale_codes[..n_sub],
    );
    write_f16(out, 0, d);
    if let Some(dmin) = dmin {
        write_f16(out, 2, dmin);
    }
    let pbytes = packed_len(n_sub, param_bits);
    pack_bits(
        &scale_codes[..n_sub],
        param_bits,
        &mut out[pos..pos + pbytes],
    );
    pos += pbytes;
    if asymmetric {
        pack_bits(&min_codes[..n_sub], param_bits, &mut out[pos..pos + pbytes]);
        pos += pbytes;
    }

    let df = d.to_f32() as f64;
    let mut codes = [0u32; SUPER_BLOCK];
    for j in 0..n_sub {
        let step = scale_codes[j] as f64 * df;
        for i in j * sub_len..(j + 1) * sub_len {
            let v = x[i] as f64;
            codes[i] = if asymmetric {
                if step > 0.0 {
                    round_half_away((v - stored_mins[j]) / step).clamp(0.0, qmax as f64) as u32
                } else {
                    0
                }
            } else {
                let q = if step > 0.0 {
                    (round_half_away(v / step) as i64).clamp(lo as i64, hi as i64) as i32
                } else {
                    0
                };
                (q - lo) as u32
            };
        }
    }
    if planar_weights(weight_bits) {
        pack_planes(&codes, weight_bits, PLANE_CHUNK, &mut out[pos..]);
    } else {
        pack_bits(&codes, weight_bits, &mut out[pos..]);
    }
}

/// Reference decoder for any layout; the specialized decoders below must
/// agree with it bit for bit.
fn decode_generic(layout: Layout, bytes: &[u8], out: &mut [f32]) {
    match layout {
        Layout::F16 => out[0] = read_f16(bytes, 0),
        Layout::Flat { bits } => {
            let bits = bits as u32;
            let lo = signed_range(bits).0;
            let d = read_f16(bytes, 0);
            let mut codes = [0u32; 32];
            if bits == 4 {
                let mut c8 = [0u8; 32];
                unpack_planes::<4>(&bytes[2..18], 16, &mut c8);
                for (c, &v) in codes.iter_mut().zip(&c8) {
                    *c = v as u32;
                }
            } else {
                unpack_bits(&bytes[2..], bits, &mut codes);
            }
            for (o, &c) in out.iter_mut().zip(&codes) {
                *o = (c as i32 + lo) as f32 * d;
            }
        }
        Layout::Super {
            sub_len,
            weight_bits,
            param_bits,
            asymmetric,
        } => {
            let sub_len = sub_len as usize;
            let n_sub = SUPER_BLOCK / sub_len;
            let (wb, pb) = (weight_bits as u32, param_bits as u32);
            let d = read_f16(bytes, 0);
            let mut pos = 2;
            let dmin = if asymmetric {
                pos += 2;
                read_f16(bytes, 2)
            } else {
                0.0
            };
            let pbytes = packed_len(n_sub, pb);
            let mut sc = [0u32; 16];
            let mut mc = [0u32; 16];
            unpack_bits(&bytes[pos..], pb, &mut sc[..n_sub]);
            pos += pbytes;
            if asymmetric {
                unpack_bits(&bytes[pos..], pb, &mut mc[..n_sub]);
                pos += pbytes;
            }
            let mut codes = [0u32; SUPER_BLOCK];
            if planar_weights(wb) {
                let per = (8 / wb) as usize;
                for (k, c) in codes.iter_mut().enumerate() {
                    let (group, r) = (k / (PLANE_CHUNK * per), k % (PLANE_CHUNK * per));
                    let (m, j) = (r / PLANE_CHUNK, r % PLANE_CHUNK);
                    *c = (bytes[pos + group * PLANE_CHUNK + j] as u32 >> (wb as usize * m))
                        & ((1 << wb) - 1);
                }
            } else {
                unpack_bits(&bytes[pos..], wb, &mut codes);
            }
            let offset = if asymmetric { 0 } else { -signed_range(wb).0 };
            for j in 0..n_sub {
                let s = sc[j] as i32;
                let m = mc[j] as f32 * dmin;
                let range = j * sub_len..(j + 1) * sub_len;
                let a = s as f32 * d;
                for (o, &c) in out[range.clone()].iter_mut().zip(&codes[range]) {
                    *o = if asymmetric {
                        (c as f32).mul_add(a, m)
                    } else {
                        ((c as i32 - offset) * s) as f32 * d
                    };
                }
            }
        }
    }
}

/// Exact binary16 to f32 conversion that inlines into vectorized loops.
/// Normal and subnormal halves are rescaled by `2^112`, which is exact;
/// infinities and NaNs are mapped bit-wise.
#[inline(always)]
pub(crate) fn half_to_f32(h: u16) -> f32 {
    let sign = ((h & 0x8000) as u32) << 16;
    let em = ((h & 0x7fff) as u32) << 13;
    let finite = (f32::from_bits(em) * f32::from_bits(0x7780_0000)).to_bits();
    let bits = if h & 0x7c00 == 0x7c00 {
        em | 0x7f80_0000
    } else {
        finite
    };
    f32::from_bits(bits | sign)
}

#[inline(always)]
fn read_half(bytes: &[u8], at: usize) -> f32 {
    half_to_f32(u16::from_le_bytes([bytes[at], bytes[at + 1]]))
}

/// Unpacks `out.len()` (a multiple of 8) codes of `W` bits from the
/// little-endian bit stream.
#[inline(always)]
pub(crate) fn unpack_fixed<const W: usize>(bytes: &[u8], out: &mut [u8]) {
    match W {
        8 => out.copy_from_slice(&bytes[..out.len()]),
        4 => {
            for (o, &b) in out.chunks_exact_mut(2).zip(bytes) {
                o[0] = b & 0xf;
                o[1] = b >> 4;
            }
        }
        2 => {
            for (o, &b) in out.chunks_exact_mut(4).zip(bytes) {
                o[0] = b & 3;
                o[1] = (b >> 2) & 3;
                o[2] = (b >> 4) & 3;
                o[3] = b >> 6;
            }
        }
        _ => {
            // eight codes fill exactly W bytes
            let mask = (1u64 << W) - 1;
            for (o, b) in out.chunks_exact_mut(8).zip(bytes.chunks_exact(W)) {
                let mut word = [0u8; 8];
                word[..W].copy_from_slice(b);
                let v = u64::from_le_bytes(word);
                for (k, c) in o.iter_mut().enumerate() {
                    *c = ((v >> (W * k)) & mask) as u8;
                }
            }
        }
    }
}

/// One flat block of `B`-bit codes.
#[inline(always)]
pub(crate) fn decode_flat<const B: usize>(bytes: &[u8], out: &mut [f32]) {
    let d = read_half(bytes, 0);
    let mut codes = [0u8; 32];
    if B == 4 {
        unpack_planes::<4>(&bytes[2..18], 16, &mut codes);
    } else {
        unpack_fixed::<B>(&bytes[2..2 + 4 * B], &mut codes);
    }
    let off = 1i32 << (B - 1);
    for (o, &c) in out[..32].iter_mut().zip(&codes) {
        *o = (c as i32 - off) as f32 * d;
    }
}

/// One super-block with `SUB`-element sub-blocks, `WB`-bit weights and
/// `PB`-bit sub-block parameters.
#[inline(always)]
pub(crate) fn decode_super<const SUB: usize, const WB: usize, const PB: usize, const ASYM: bool>(
    bytes: &[u8],
    out: &mut [f32],
) {
    let n_sub = SUPER_BLOCK / SUB;
    let pbytes = n_sub * PB / 8;
    let d = read_half(bytes, 0);
    let (dmin, mut pos) = if ASYM {
        (read_half(bytes, 2), 4)
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
    let mut codes = [0u8; SUPER_BLOCK];
    if WB == 2 || WB == 4 {
        unpack_planes::<WB>(&bytes[pos..pos + 32 * WB], PLANE_CHUNK, &mut codes);
    } else {
        unpack_fixed::<WB>(&bytes[pos..pos + 32 * WB], &mut codes);
    }
    let off = if ASYM { 0 } else { 1i32 << (WB - 1) };
    for ((o, c), j) in out[..SUPER_BLOCK]
        .chunks_exact_mut(SUB)
        .zip(codes.chunks_exact(SUB))
        .zip(0..n_sub)
    {
        let s = sc[j] as i32;
        let (a, m) = (s as f32 * d, mc[j] as f32 * dmin);
        for (v, &q) in o.iter_mut().zip(c) {
            *v = if ASYM {
                (q as f32).mul_add(a, m)
            } else {
                ((q as i32 - off) * s) as f32 * d
            };
        }
    }
}

/// Raw binary16 values; `out.len()` values from `2 * out.len()` bytes.
#[inline(always)]
pub(crate) fn decode_f16_run(bytes: &[u8], out: &mut [f32]) {
    for (o, p) in out.iter_mut().zip(bytes.chunks_exact(2)) {
        *o = half_to_f32(u16::from_le_bytes([p[0], p[1]]));
    }
}

/// Decodes one block into `out` (`layout.block_len()` values).
#[inline(always)]
pub fn decode_block(layout: Layout, bytes: &[u8], out: &mut [f32]) {
    match layout {
        Layout::Flat { bits: 8 } => decode_flat::<8>(bytes, out),
        Layout::Flat { bits: 5 } => decode_flat::<5>(bytes, out),
        Layout::Flat { bits: 4 } => decode_flat::<4>(bytes, out),
        Layout::Super {
            sub_len,
            weight_bits,
            param_bits,
            asymmetric,
        } => match (sub_len, weight_bits, param_bits, asymmetric) {
            (32, 5, 6, true) => decode_super::<32, 5, 6, true>(bytes, out),
            (32, 4, 6, true) => decode_super::<32, 4, 6, true>(bytes, out),
            (16, 6, 8, false) => decode_super::<16, 6, 8, false>(bytes, out),
            (16, 3, 6, false) => decode_super::<16, 3, 6, false>(bytes, out),
            (16, 2, 4, true) => decode_super::<16, 2, 4, true>(bytes, out),
            _ => decode_generic(layout, bytes, out),
        },
        _ => decode_generic(layout, bytes, out),
    }
}

/// Decodes consecutive blocks. `out.len()` must be a whole number of blocks
/// and `bytes` must hold exactly that many encoded blocks.
pub fn decode_span(layout: Layout, bytes: &[u8], out: &mut [f32]) {
    if layout == Layout::F16 {
        return decode_f16_run(bytes, out);
    }
    let bl = layout.block_len();
    for (o, b) in out
        .chunks_exact_mut(bl)
        .zip(bytes.chunks_exact(layout.block_bytes()))
    {
        decode_block(layout, b, o);
    }
}

/// Binary16 fields of a block, for validation of untrusted payloads.
pub(crate) fn block_halves(layout: Layout, bytes: &[u8]) -> impl Iterator<Item = f32> + '_ {
    let n = match layout {
        Layout::F16 | Layout::Flat { .. } => 1,
        Layout::Super { asymmetric, .. } => 1 + asymmetric as usize,
    };
    (0..n).map(move |i| read_f16(bytes, 2 * i))
}
