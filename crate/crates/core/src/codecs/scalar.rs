//! Scalar symmetric / asymmetric quantization of a value list.
//!
//! Symmetric: `s = max|x| / 2^(n-1)`, `q = clamp(round(x / s), -2^(n-1), 2^(n-1) - 1)`.
//! Asymmetric: `m = min x`, `s = (max x - m) / (2^n - 1)`,
//! `q = clamp(round((x - m) / s), 0, 2^n - 1)`.
//!
//! Rounding is half-away-from-zero throughout the crate.

use crate::error::{Error, Result};
use crate::tensor::check_finite;

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricQuant {
    pub codes: Vec<i32>,
    pub scale: f32,
    pub n_bits: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymmetricQuant {
    pub codes: Vec<u32>,
    pub scale: f32,
    pub min: f32,
    pub n_bits: u32,
}

#[inline]
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

pub fn signed_range(n_bits: u32) -> (i32, i32) {
    let half = 1i32 << (n_bits - 1);
    (-half, half - 1)
}

pub fn unsigned_max(n_bits: u32) -> u32 {
    (1u32 << n_bits) - 1
}

fn check_input(values: &[f32], n_bits: u32) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Parameter("empty value list".into()));
    }
    if !(2..=8).contains(&n_bits) {
        return Err(Error::Parameter(format!("n_bits {n_bits} outside 2..=8")));
    }
    check_finite(values)
}

pub fn quantize_symmetric(values: &[f32], n_bits: u32) -> Result<SymmetricQuant> {
    check_input(values, n_bits)?;
    let (lo, hi) = signed_range(n_bits);
    let amax = values.iter().fold(0f32, |a, &v| a.max(v.abs()));
    if amax == 0.0 {
        return Ok(SymmetricQuant {
            codes: vec![0; values.len()],
            scale: 0.0,
            n_bits,
        });
    }
    let scale = amax / (1u32 << (n_bits - 1)) as f32;
    let codes = values
        .iter()
        .map(|&x| {
            (round_half_away(x as f64 / scale as f64) as i64).clamp(lo as i64, hi as i64) as i32
        })
        .collect();
    Ok(SymmetricQuant {
        codes,
        scale,
        n_bits,
    })
}

pub fn quantize_asymmetric(values: &[f32], n_bits: u32) -> Result<AsymmetricQuant> {
    check_input(values, n_bits)?;
    let qmax = unsigned_max(n_bits);
    let (min, max) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if max == min {
        return Ok(AsymmetricQuant {
            codes: vec![0; values.len()],
            scale: 0.0,
            min,
            n_bits,
        });
    }
    let scale = (max - min) / qmax as f32;
    let codes = values
        .iter()
        .map(|&x| {
            let q = round_half_away((x as f64 - min as f64) / scale as f64);
            q.clamp(0.0, qmax as f64) as u32
        })
        .collect();
    Ok(AsymmetricQuant {
        codes,
        scale,
        min,
        n_bits,
    })
}

pub fn dequantize_symmetric(codes: &[i32], scale: f32, n_bits: u32) -> Result<Vec<f32>> {
    let (lo, hi) = signed_range(n_bits);
    codes
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            if q < lo || q > hi {
                Err(Error::CorruptData(format!(
                    "code {q} at index {i} outside [{lo}, {hi}]"
                )))
            } else {
                Ok(q as f32 * scale)
            }
        })
        .collect()
}

pub fn dequantize_asymmetric(codes: &[u32], scale: f32, min: f32, n_bits: u32) -> Result<Vec<f32>> {
    let qmax = unsigned_max(n_bits);
    codes
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            if q > qmax {
                Err(Error::CorruptData(format!(
                    "code {q} at index {i} outside [0, {qmax}]"
                )))
            } else {
                Ok(q as f32 * scale + min)
            }
        })
        .collect()
}

impl SymmetricQuant {
    pub fn dequantize(&self) -> Result<Vec<f32>> {
        dequantize_symmetric(&self.codes, self.scale, self.n_bits)
    }
}

impl AsymmetricQuant {
    pub fn dequantize(&self) -> Result<Vec<f32>> {
        dequantize_asymmetric(&self.codes, self.scale, self.min, self.n_bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Weighted least-squares (s, m) for a fixed code vector, then the
    /// objective. Plain reference used to brute-force small cases.
    fn ls_objective(x: &[f64], q: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (sq, sx) = (q.iter().sum::<f64>(), x.iter().sum::<f64>());
        let sqq = q.iter().map(|v| v * v).sum::<f64>();
        let sqx = q.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let det = n * sqq - sq * sq;
        let (s, m) = if det.abs() < 1e-12 {
            (0.0, sx / n)
        } else {
            ((n * sqx - sq * sx) / det, (sqq * sx - sq * sqx) / det)
        };
        q.iter()
            .zip(x)
            .map(|(qi, xi)| (s * qi + m - xi).powi(2))
            .sum()
    }

    #[test]
    fn zeros_give_zero_scale() {
        let q = quantize_symmetric(&[0.0, 0.0, 0.0], 8).unwrap();
        assert_eq!(q.codes, vec![0, 0, 0]);
        assert_eq!(q.scale, 0.0);
    }

    #[test]
    fn symmetric_upper_clamp() {
        let q = quantize_symmetric(&[-2.0, 1.0, 2.0], 3).unwrap();
        assert_eq!(q.scale, 0.5);
        assert_eq!(q.codes, vec![-4, 2, 3]);
    }

    #[test]
    fn symmetric_eight_bit() {
        let q = quantize_symmetric(&[-1.0, 0.0, 1.0], 8).unwrap();
        assert_eq!(q.scale, 1.0 / 128.0);
        assert_eq!(q.codes, vec![-128, 0, 127]);
    }

    #[test]
    fn asymmetric_lattice_round_trip() {
        let q = quantize_asymmetric(&[0.0, 1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!((q.min, q.scale), (0.0, 1.0));
        assert_eq!(q.codes, vec![0, 1, 2, 3]);
        assert_eq!(q.dequantize().unwrap(), vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn asymmetric_constant() {
        let q = quantize_asymmetric(&[5.0; 4], 4).unwrap();
        assert_eq!((q.scale, q.min), (0.0, 5.0));
        assert_eq!(q.codes, vec![0; 4]);
        assert_eq!(q.dequantize().unwrap(), vec![5.0; 4]);
    }

    #[test]
    fn asymmetric_matches_exhaustive_codes() {
        let x = [0.0f32, 0.3, 0.7, 1.0];
        let xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut best = f64::INFINITY;
        for idx in 0..256u32 {
            let q: Vec<f64> = (0..4).map(|i| ((idx >> (2 * i)) & 3) as f64).collect();
            best = best.min(ls_objective(&xd, &q));
        }
        let got = quantize_asymmetric(&x, 2).unwrap();
        let got_q: Vec<f64> = got.codes.iter().map(|&c| c as f64).collect();
        // the reversed assignment with a negative scale ties; compare objectives
        assert_eq!(got_q, vec![0.0, 1.0, 2.0, 3.0]);
        assert!((ls_objective(&xd, &got_q) - best).abs() < 1e-6);
    }

    #[test]
    fn dequantize_rejects_out_of_range() {
        assert!(matches!(
            dequantize_symmetric(&[200], 1.0, 8),
            Err(Error::CorruptData(_))
        ));
        assert!(matches!(
            dequantize_asymmetric(&[4], 1.0, 0.0, 2),
            Err(Error::CorruptData(_))
        ));
        assert_eq!(
            dequantize_asymmetric(&[0, 3], 1.0, 0.0, 2).unwrap(),
            vec![0.0, 3.0]
        );
        assert_eq!(
            dequantize_symmetric(&[0, 0], 3.5, 4).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn nan_rejected() {
        assert!(matches!(
            quantize_symmetric(&[1.0, f32::NAN], 4),
            Err(Error::InvalidValue { index: 1, .. })
        ));
        assert!(matches!(
            quantize_asymmetric(&[f32::INFINITY], 4),
            Err(Error::InvalidValue { index: 0, .. })
        ));
    }

    proptest! {
        #[test]
        fn codes_stay_in_range(values in prop::collection::vec(-3.0e38f32..3.0e38, 1..64), n in 2u32..=8) {
            let (lo, hi) = signed_range(n);
            let s = quantize_symmetric(&values, n).unwrap();
            prop_assert!(s.codes.iter().all(|&c| c >= lo && c <= hi));
            let a = quantize_asymmetric(&values, n).unwrap();
            prop_assert!(a.codes.iter().all(|&c| c <= unsigned_max(n)));
        }

        #[test]
        fn symmetric_in_range_error_bound(values in prop::collection::vec(-100.0f32..100.0, 1..64), n in 2u32..=8) {
            let q = quantize_symmetric(&values, n).unwrap();
            let (lo, hi) = signed_range(n);
            let deq = q.dequantize().unwrap();
            for (x, y) in values.iter().zip(&deq) {
                let t = *x as f64 / q.scale as f64;
                // only elements that did not hit the clamp are covered by the bound
                if q.scale > 0.0 && t >= lo as f64 - 0.5 && t <= hi as f64 + 0.5 {
                    prop_assert!((*x as f64 - *y as f64).abs() <= q.scale as f64 / 2.0 * (1.0 + 1e-6));
                }
            }
        }

        #[test]
        fn asymmetric_error_bound(values in prop::collection::vec(-100.0f32..100.0, 1..64), n in 2u32..=8) {
            let q = quantize_asymmetric(&values, n).unwrap();
            let deq = q.dequantize().unwrap();
            for (x, y) in values.iter().zip(&deq) {
                prop_assert!((*x as f64 - *y as f64).abs() <= q.scale as f64 / 2.0 * (1.0 + 1e-5) + 1e-5);
            }
        }
    }
}
