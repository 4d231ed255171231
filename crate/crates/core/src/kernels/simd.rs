//! Primitive operations shared by the kernels. `Scalar` defines the exact
//! arithmetic; the vector implementations perform the same IEEE operations
//! (single-rounding multiply-adds included) in the same order, so every path
//! produces bitwise equal results.

use crate::codecs::{half_to_f32, unpack_planes, PLANE_CHUNK};

/// Values per unit of work.
pub(super) const UNIT: usize = 256;
/// Interleaved accumulator lanes of a partial dot product.
pub(super) const LANES: usize = 64;

pub(super) trait Simd {
    /// Partial dot of one full unit (`UNIT` values).
    fn dot_unit(w: &[f32], x: &[f32]) -> f32;
    /// Binary16 value at the start of `bytes`.
    fn half(bytes: &[u8]) -> f32;
    /// Unpacks plane-packed 2- or 4-bit super-block weight codes.
    fn planes<const W: usize>(bytes: &[u8], out: &mut [u8]);
    /// `out[i] = fma(codes[i], a, b)`; `out.len()` is a multiple of 16.
    fn affine(codes: &[u8], a: f32, b: f32, out: &mut [f32]);
    /// Partial dot of one full unit whose values are `fma(code, a[g], b[g])`
    /// for consecutive groups `g` of `group` codes.
    fn affine_dot(codes: &[u8], group: usize, a: &[f32], b: &[f32], x: &[f32]) -> f32;
    /// Raw binary16 values.
    fn f16_decode(bytes: &[u8], out: &mut [f32]);
    /// Fused decode and partial dot of one unit of raw binary16 values.
    fn f16_dot_unit(bytes: &[u8], x: &[f32]) -> f32;
    /// Fused decode and partial dot of eight 8-bit flat blocks.
    fn flat8_dot_unit(bytes: &[u8], x: &[f32]) -> f32;
    /// Fused decode and partial dot of eight 4-bit flat blocks.
    fn flat4_dot_unit(bytes: &[u8], x: &[f32]) -> f32;
}

#[inline(always)]
pub(super) fn reduce(mut acc: [f32; LANES]) -> f32 {
    let mut width = LANES / 2;
    while width > 0 {
        for l in 0..width {
            acc[l] += acc[l + width];
        }
        width /= 2;
    }
    acc[0]
}

/// Partial dot over any segment: element `i` goes to lane `i % LANES`, each
/// lane is a chain of multiply-adds from zero, and lanes reduce in a fixed
/// tree. Equal to [`Simd::dot_unit`] on a full unit.
#[inline(always)]
pub(super) fn dot(w: &[f32], x: &[f32]) -> f32 {
    let mut acc = [0f32; LANES];
    for (i, (&a, &b)) in w.iter().zip(&x[..w.len()]).enumerate() {
        let l = i % LANES;
        acc[l] = a.mul_add(b, acc[l]);
    }
    reduce(acc)
}

#[inline(always)]
fn half_at(bytes: &[u8], at: usize) -> f32 {
    half_to_f32(u16::from_le_bytes([bytes[at], bytes[at + 1]]))
}

pub(super) struct Scalar;

impl Simd for Scalar {
    #[inline(always)]
    fn dot_unit(w: &[f32], x: &[f32]) -> f32 {
        dot(&w[..UNIT], x)
    }

    #[inline(always)]
    fn half(bytes: &[u8]) -> f32 {
        half_at(bytes, 0)
    }

    #[inline(always)]
    fn planes<const W: usize>(bytes: &[u8], out: &mut [u8]) {
        unpack_planes::<W>(bytes, PLANE_CHUNK, out)
    }

    #[inline(always)]
    fn affine(codes: &[u8], a: f32, b: f32, out: &mut [f32]) {
        for (o, &q) in out.iter_mut().zip(codes) {
            *o = (q as f32).mul_add(a, b);
        }
    }

    #[inline(always)]
    fn affine_dot(codes: &[u8], group: usize, a: &[f32], b: &[f32], x: &[f32]) -> f32 {
        let mut w = [0f32; UNIT];
        for (g, (o, c)) in w
            .chunks_exact_mut(group)
            .zip(codes.chunks_exact(group))
            .enumerate()
        {
            Self::affine(c, a[g], b[g], o);
        }
        dot(&w, x)
    }

    #[inline(always)]
    fn f16_decode(bytes: &[u8], out: &mut [f32]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = half_at(bytes, 2 * i);
        }
    }

    #[inline(always)]
    fn f16_dot_unit(bytes: &[u8], x: &[f32]) -> f32 {
        let mut w = [0f32; UNIT];
        Self::f16_decode(&bytes[..2 * UNIT], &mut w);
        dot(&w, x)
    }

    #[inline(always)]
    fn flat8_dot_unit(bytes: &[u8], x: &[f32]) -> f32 {
        let mut w = [0f32; UNIT];
        for (o, b) in w.chunks_exact_mut(32).zip(bytes.chunks_exact(34)) {
            let d = half_at(b, 0);
            Self::affine(&b[2..34], d, -128.0 * d, o);
        }
        dot(&w, x)
    }

    #[inline(always)]
    fn flat4_dot_unit(bytes: &[u8], x: &[f32]) -> f32 {
        let mut w = [0f32; UNIT];
        let mut codes = [0u8; 32];
        for (o, b) in w.chunks_exact_mut(32).zip(bytes.chunks_exact(18)) {
            unpack_planes::<4>(&b[2..18], 16, &mut codes);
            let d = half_at(b, 0);
            Self::affine(&codes, d, -8.0 * d, o);
        }
        dot(&w, x)
    }
}

#[cfg(target_arch = "x86_64")]
pub(super) use x86::{Avx2, Avx512};

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    use super::{half_at, Simd, PLANE_CHUNK, UNIT};

    /// AVX2 with FMA and F16C. Only used after runtime detection, from code
    /// compiled with those features enabled.
    pub(in crate::kernels) struct Avx2;

    /// AVX-512 (F and BW) on top of [`Avx2`], under the same conditions.
    pub(in crate::kernels) struct Avx512;

    // ---- AVX2 ----

    #[target_feature(enable = "avx2,fma,f16c")]
    #[inline]
    fn reduce8(a: [__m256; 8]) -> f32 {
        // lanes l += l + 32, l += l + 16, l += l + 8, then within 8 lanes
        let b: [__m256; 4] = std::array::from_fn(|k| _mm256_add_ps(a[k], a[k + 4]));
        let c = [_mm256_add_ps(b[0], b[2]), _mm256_add_ps(b[1], b[3])];
        reduce_ymm(_mm256_add_ps(c[0], c[1]))
    }

    #[target_feature(enable = "avx2,fma,f16c")]
    #[inline]
    fn reduce_ymm(s: __m256) -> f32 {
        let s = _mm_add_ps(_mm256_castps256_ps128(s), _mm256_extractf128_ps::<1>(s));
        let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
        let s = _mm_add_ss(s, _mm_movehdup_ps(s));
        _mm_cvtss_f32(s)
    }

    #[target_feature(enable = "avx2,fma,f16c")]
    #[inline]
    fn half_vec(bytes: &[u8]) -> f32 {
        let h = u16::from_le_bytes([bytes[0], bytes[1]]) as i32;
        _mm_cvtss_f32(_mm_cvtph_ps(_mm_cvtsi32_si128(h)))
    }

    #[target_feature(enable = "avx2,fma,f16c")]
    #[inline]
    fn codes8(p: &[u8]) -> __m256i {
        assert!(p.len() >= 8);
        // SAFETY: eight bytes are readable at `p`.
        unsafe { _mm256_cvtepu8_epi32(_mm_loadl_epi64(p.as_ptr() as *const __m128i)) }
    }

    #[target_feature(enable = "avx2,fma,f16c")]
    #[inline]
    fn load8(x: &[f32], at: usize) -> __m256 {
        assert!(at + 8 <= x.len());
        // SAFETY: bounds checked above.
        unsafe { _mm256_loadu_ps(x.as_ptr().add(at)) }
    }

    #[target_feature(enable = "avx2,fma,f16c")]
    #[inline]
    fn dot_unit_avx2(w: &[f32], x: &[f32]) -> f32 {
        let (w, x) = (&w[..UNIT], &x[..UNIT]);
        let mut acc = [_mm256_setzero_ps(); 8];
        for c in 0..UNIT / 64 {
            for (k, a) in acc.iter_mut().enumerate() {
                let i = 64 * c + 8 * k;
                *a = _mm256_fmadd_ps(load8(w, i), load8(x, i), *a);
            }
        }
        reduce8(acc)
    }

    #[target_feature(enable = "avx2,fma,f16c")]
    #[inline]
    fn planes_avx2<const W: usize>(bytes: &[u8], out: &mut [u8]) {
        assert!(W == 2 || W == 4);
        let per = 8 / W;
        let mask = _mm256_set1_epi8(((1u32 << W) - 1) as i8);
        let shift = _mm_cvtsi32_si128(W as i32);
        for (o, b) in out
            .chunks_exact_mut(PLANE_CHUNK * per)
            .zip(bytes.chunks_exact(PLANE_CHUNK))
        {
            // SAFETY: `b` holds 32 bytes and `o` holds `per` planes of 32.
            unsafe {
                let mut v = _mm256_loadu_si256(b.as_ptr() as *const __m256i);
                for m in 0..per {
                    let p = o.as_mut_ptr().add(PLANE_CHUNK * m) as *mut __m256i;
                    _mm256_storeu_si256(p, _mm256_and_si256(v, mask));
                    v = _mm256_srl_epi16(v, shift);
                }
            }
        }
    }

    #[target_feature(enable = "avx2,fma,f16c")]
    #[inline]
    fn affine_avx2(codes: &[u8], a: f32, b: f32, out: &mut [f32]) {
        let n = out.len();
        assert!(n.is_multiple_of(8) && codes.len() >= n);
        let (av, bv) = (_mm256_set1_ps(a), _mm256_set1_ps(b));
        for i in (0..n).step_by(8) {
            let w = _mm256_fmadd_ps(_mm256_cvtepi32_ps(codes8(&codes[i..])), av, bv);
            // SAFETY: i + 8 <= n.
            unsafe { _mm256_storeu_ps(out.as_mut_ptr().add(i), w) };
        }
    }

    #[target_feature(enable = "avx2,fma,f16c")]
    #[inline]
    fn affine_dot_avx2(codes: &[u8], group: usize, a: &[f32], b: &[f32], x: &[f32]) -> f32 {
        let (codes, x) = (&codes[..UNIT], &x[..UNIT]);
        assert!(group.is_multiple_of(8) && a.len() * group >= UNIT && b.len() * group >= UNIT);
        let mut acc = [_mm256_setzero_ps(); 8];
        for i in (0..UNIT).step_by(8) {
            let g = i / group;
            let c = _mm256_cvtepi32_ps(codes8(&codes[i..]));
            let w = _mm256_fmadd_ps(c, _mm256_set1_ps(a[g]), _mm256_set1_ps(b[g]));
            let k = i % 64 / 8;
            acc[k] = _mm256_fmadd_ps(w, load8(x, i), acc[k]);
        }
        reduce8(acc)
    }

    #[target_feature(enable = "avx2,fma,f16c")]
    #[inline]
    fn f16_decode_avx2(bytes: &[u8], out: &mut [f32]) {
        assert!(bytes.len() >= 2 * out.len());
        let body = out.len() / 8 * 8;
        for i in (0..body).step_by(8) {
            // SAFETY: 16 bytes at 2i and 8 floats at i are in bounds.
            unsafe {
                let h = _mm_loadu_si128(bytes.as_ptr().add(2 * i) as *const __m128i);
                _mm256_storeu_ps(out.as_mut_ptr().add(i), _mm256_cvtph_ps(h));
            }
        }
        for (i, o) in out.iter_mut().enumerate().skip(body) {
            *o = half_at(bytes, 2 * i);
        }
    }

    #[target_feature(enable = "avx2,fma,f16c")]
    #[inline]
    fn f16_dot_unit_avx2(bytes: &[u8], x: &[f32]) -> f32 {
        let (bytes, x) = (&bytes[..2 * UNIT], &x[..UNIT]);
        let mut acc = [_mm256_setzero_ps(); 8];
        for c in 0..UNIT / 64 {
            for (k, a) in acc.iter_mut().enumerate() {
                let i = 64 * c + 8 * k;
                // SAFETY: 2i + 16 <= 2 * UNIT.
                let h = unsafe { _mm_loadu_si128(bytes.as_ptr().add(2 * i) as *const __m128i) };
                *a = _mm256_fmadd_ps(_mm256_cvtph_ps(h), load8(x, i), *a);
            }
        }
        reduce8(acc)
    }

    #[target_feature(enable = "avx2,fma,f16c")]
    #[inline]
    fn flat8_dot_unit_avx2(bytes: &[u8], x: &[f32]) -> f32 {
        let (bytes, x) = (&bytes[..8 * 34], &x[..UNIT]);
        let mut acc = [_mm256_setzero_ps(); 8];
        for (b, blk) in bytes.chunks_exact(34).enumerate() {
            let d = half_vec(blk);
            // (c - 128) * d with one rounding; -128 * d is exact
            let (dv, nd) = (_mm256_set1_ps(d), _mm256_set1_ps(-128.0 * d));
            for g in 0..4 {
                let c = _mm256_cvtepi32_ps(codes8(&blk[2 + 8 * g..]));
                let w = _mm256_fmadd_ps(c, dv, nd);
                let k = 4 * (b % 2) + g;
                acc[k] = _mm256_fmadd_ps(w, load8(x, 32 * b + 8 * g), acc[k]);
            }
        }
        reduce8(acc)
    }

    #[target_feature(enable = "avx2,fma,f16c")]
    #[inline]
    fn flat4_dot_unit_avx2(bytes: &[u8], x: &[f32]) -> f32 {
        let (bytes, x) = (&bytes[..8 * 18], &x[..UNIT]);
        let mask = _mm_set1_epi8(0xf);
        let mut acc = [_mm256_setzero_ps(); 8];
        for (b, blk) in bytes.chunks_exact(18).enumerate() {
            let d = half_vec(blk);
            let (dv, nd) = (_mm256_set1_ps(d), _mm256_set1_ps(-8.0 * d));
            // SAFETY: the block has 16 code bytes after the scale.
            let v = unsafe { _mm_loadu_si128(blk.as_ptr().add(2) as *const __m128i) };
            let lo = _mm_and_si128(v, mask);
            let hi = _mm_and_si128(_mm_srli_epi16::<4>(v), mask);
            let parts = [lo, _mm_srli_si128::<8>(lo), hi, _mm_srli_si128::<8>(hi)];
            for (g, p) in parts.into_iter().enumerate() {
                let c = _mm256_cvtepi32_ps(_mm256_cvtepu8_epi32(p));
                let w = _mm256_fmadd_ps(c, dv, nd);
                let k = 4 * (b % 2) + g;
                acc[k] = _mm256_fmadd_ps(w, load8(x, 32 * b + 8 * g), acc[k]);
            }
        }
        reduce8(acc)
    }

    // ---- AVX-512 ----

    #[target_feature(enable = "avx512f,avx512bw,avx2,fma,f16c")]
    #[inline]
    fn load16(x: &[f32], at: usize) -> __m512 {
        assert!(at + 16 <= x.len());
        // SAFETY: bounds checked above.
        unsafe { _mm512_loadu_ps(x.as_ptr().add(at)) }
    }

    #[target_feature(enable = "avx512f,avx512bw,avx2,fma,f16c")]
    #[inline]
    fn codes16(p: &[u8]) -> __m512i {
        assert!(p.len() >= 16);
        // SAFETY: sixteen bytes are readable at `p`.
        unsafe { _mm512_cvtepu8_epi32(_mm_loadu_si128(p.as_ptr() as *const __m128i)) }
    }

    #[target_feature(enable = "avx512f,avx512bw,avx2,fma,f16c")]
    #[inline]
    fn reduce4(a: [__m512; 4]) -> f32 {
        // lanes l += l + 32, l += l + 16, then the 256-bit halves
        let b = _mm512_add_ps(_mm512_add_ps(a[0], a[2]), _mm512_add_ps(a[1], a[3]));
        let lo = _mm512_castps512_ps256(b);
        let hi = _mm256_castpd_ps(_mm512_extractf64x4_pd::<1>(_mm512_castps_pd(b)));
        reduce_ymm(_mm256_add_ps(lo, hi))
    }

    #[target_feature(enable = "avx512f,avx512bw,avx2,fma,f16c")]
    #[inline]
    fn dot_unit_avx512(w: &[f32], x: &[f32]) -> f32 {
        let (w, x) = (&w[..UNIT], &x[..UNIT]);
        let mut acc = [_mm512_setzero_ps(); 4];
        for c in 0..UNIT / 64 {
            for (k, a) in acc.iter_mut().enumerate() {
                let i = 64 * c + 16 * k;
                *a = _mm512_fmadd_ps(load16(w, i), load16(x, i), *a);
            }
        }
        reduce4(acc)
    }

    #[target_feature(enable = "avx512f,avx512bw,avx2,fma,f16c")]
    #[inline]
    fn f16_dot_unit_avx512(bytes: &[u8], x: &[f32]) -> f32 {
        let (bytes, x) = (&bytes[..2 * UNIT], &x[..UNIT]);
        let mut acc = [_mm512_setzero_ps(); 4];
        for c in 0..UNIT / 64 {
            for (k, a) in acc.iter_mut().enumerate() {
                let i = 64 * c + 16 * k;
                // SAFETY: 2i + 32 <= 2 * UNIT.
                let h = unsafe { _mm256_loadu_si256(bytes.as_ptr().add(2 * i) as *const __m256i) };
                *a = _mm512_fmadd_ps(_mm512_cvtph_ps(h), load16(x, i), *a);
            }
        }
        reduce4(acc)
    }

    #[target_feature(enable = "avx512f,avx512bw,avx2,fma,f16c")]
    #[inline]
    fn flat8_dot_unit_avx512(bytes: &[u8], x: &[f32]) -> f32 {
        let (bytes, x) = (&bytes[..8 * 34], &x[..UNIT]);
        let mut acc = [_mm512_setzero_ps(); 4];
        for (b, blk) in bytes.chunks_exact(34).enumerate() {
            let d = half_vec(blk);
            let (dv, nd) = (_mm512_set1_ps(d), _mm512_set1_ps(-128.0 * d));
            for g in 0..2 {
                let c = _mm512_cvtepi32_ps(codes16(&blk[2 + 16 * g..]));
                let w = _mm512_fmadd_ps(c, dv, nd);
                let k = 2 * (b % 2) + g;
                acc[k] = _mm512_fmadd_ps(w, load16(x, 32 * b + 16 * g), acc[k]);
            }
        }
        reduce4(acc)
    }

    #[target_feature(enable = "avx512f,avx512bw,avx2,fma,f16c")]
    #[inline]
    fn flat4_dot_unit_avx512(bytes: &[u8], x: &[f32]) -> f32 {
        let (bytes, x) = (&bytes[..8 * 18], &x[..UNIT]);
        let centred = _mm512_setr_ps(
            -8.0, -7.0, -6.0, -5.0, -4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0,
        );
        let mut acc = [_mm512_setzero_ps(); 4];
        for (b, blk) in bytes.chunks_exact(18).enumerate() {
            // table[c] = (c - 8) * d, indexed by the low four bits of a lane
            let table = _mm512_mul_ps(centred, _mm512_set1_ps(half_vec(blk)));
            let v = codes16(&blk[2..]);
            let lo = _mm512_permutexvar_ps(v, table);
            let hi = _mm512_permutexvar_ps(_mm512_srli_epi32::<4>(v), table);
            let k = 2 * (b % 2);
            acc[k] = _mm512_fmadd_ps(lo, load16(x, 32 * b), acc[k]);
            acc[k + 1] = _mm512_fmadd_ps(hi, load16(x, 32 * b + 16), acc[k + 1]);
        }
        reduce4(acc)
    }

    #[target_feature(enable = "avx512f,avx512bw,avx2,fma,f16c")]
    #[inline]
    fn affine_avx512(codes: &[u8], a: f32, b: f32, out: &mut [f32]) {
        let n = out.len();
        assert!(n.is_multiple_of(16) && codes.len() >= n);
        let (av, bv) = (_mm512_set1_ps(a), _mm512_set1_ps(b));
        for i in (0..n).step_by(16) {
            let w = _mm512_fmadd_ps(_mm512_cvtepi32_ps(codes16(&codes[i..])), av, bv);
            // SAFETY: i + 16 <= n.
            unsafe { _mm512_storeu_ps(out.as_mut_ptr().add(i), w) };
        }
    }

    #[target_feature(enable = "avx512f,avx512bw,avx2,fma,f16c")]
    #[inline]
    fn affine_dot_avx512(codes: &[u8], group: usize, a: &[f32], b: &[f32], x: &[f32]) -> f32 {
        let (codes, x) = (&codes[..UNIT], &x[..UNIT]);
        assert!(group.is_multiple_of(16) && a.len() * group >= UNIT && b.len() * group >= UNIT);
        let mut acc = [_mm512_setzero_ps(); 4];
        for i in (0..UNIT).step_by(16) {
            let g = i / group;
            let c = _mm512_cvtepi32_ps(codes16(&codes[i..]));
            let w = _mm512_fmadd_ps(c, _mm512_set1_ps(a[g]), _mm512_set1_ps(b[g]));
            let k = i % 64 / 16;
            acc[k] = _mm512_fmadd_ps(w, load16(x, i), acc[k]);
        }
        reduce4(acc)
    }

    // The trait wrappers are only reached from code compiled with the
    // corresponding features enabled, after runtime detection.
    impl Simd for Avx2 {
        #[inline(always)]
        fn dot_unit(w: &[f32], x: &[f32]) -> f32 {
            // SAFETY: see the impl comment.
            unsafe { dot_unit_avx2(w, x) }
        }
        #[inline(always)]
        fn half(bytes: &[u8]) -> f32 {
            // SAFETY: see the impl comment.
            unsafe { half_vec(bytes) }
        }
        #[inline(always)]
        fn planes<const W: usize>(bytes: &[u8], out: &mut [u8]) {
            // SAFETY: see the impl comment.
            unsafe { planes_avx2::<W>(bytes, out) }
        }
        #[inline(always)]
        fn affine(codes: &[u8], a: f32, b: f32, out: &mut [f32]) {
            // SAFETY: see the impl comment.
            unsafe { affine_avx2(codes, a, b, out) }
        }
        #[inline(always)]
        fn affine_dot(codes: &[u8], group: usize, a: &[f32], b: &[f32], x: &[f32]) -> f32 {
            // SAFETY: see the impl comment.
            unsafe { affine_dot_avx2(codes, group, a, b, x) }
        }
        #[inline(always)]
        fn f16_decode(bytes: &[u8], out: &mut [f32]) {
            // SAFETY: see the impl comment.
            unsafe { f16_decode_avx2(bytes, out) }
        }
        #[inline(always)]
        fn f16_dot_unit(bytes: &[u8], x: &[f32]) -> f32 {
            // SAFETY: see the impl comment.
            unsafe { f16_dot_unit_avx2(bytes, x) }
        }
        #[inline(always)]
        fn flat8_dot_unit(bytes: &[u8], x: &[f32]) -> f32 {
            // SAFETY: see the impl comment.
            unsafe { flat8_dot_unit_avx2(bytes, x) }
        }
        #[inline(always)]
        fn flat4_dot_unit(bytes: &[u8], x: &[f32]) -> f32 {
            // SAFETY: see the impl comment.
            unsafe { flat4_dot_unit_avx2(bytes, x) }
        }
    }

    impl Simd for Avx512 {
        #[inline(always)]
        fn dot_unit(w: &[f32], x: &[f32]) -> f32 {
            // SAFETY: see the impl comment.
            unsafe { dot_unit_avx512(w, x) }
        }
        #[inline(always)]
        fn half(bytes: &[u8]) -> f32 {
            // SAFETY: see the impl comment.
            unsafe { half_vec(bytes) }
        }
        #[inline(always)]
        fn planes<const W: usize>(bytes: &[u8], out: &mut [u8]) {
            // SAFETY: see the impl comment.
            unsafe { planes_avx2::<W>(bytes, out) }
        }
        #[inline(always)]
        fn affine(codes: &[u8], a: f32, b: f32, out: &mut [f32]) {
            // SAFETY: see the impl comment.
            unsafe { affine_avx512(codes, a, b, out) }
        }
        #[inline(always)]
        fn affine_dot(codes: &[u8], group: usize, a: &[f32], b: &[f32], x: &[f32]) -> f32 {
            // SAFETY: see the impl comment.
            unsafe { affine_dot_avx512(codes, group, a, b, x) }
        }
        #[inline(always)]
        fn f16_decode(bytes: &[u8], out: &mut [f32]) {
            // SAFETY: see the impl comment.
            unsafe { f16_decode_avx2(bytes, out) }
        }
        #[inline(always)]
        fn f16_dot_unit(bytes: &[u8], x: &[f32]) -> f32 {
            // SAFETY: see the impl comment.
            unsafe { f16_dot_unit_avx512(bytes, x) }
        }
        #[inline(always)]
        fn flat8_dot_unit(bytes: &[u8], x: &[f32]) -> f32 {
            // SAFETY: see the impl comment.
            unsafe { flat8_dot_unit_avx512(bytes, x) }
        }
        #[inline(always)]
        fn flat4_dot_unit(bytes: &[u8], x: &[f32]) -> f32 {
            // SAFETY: see the impl comment.
            unsafe { flat4_dot_unit_avx512(bytes, x) }
        }
    }
}
