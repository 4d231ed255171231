//! Importance-matrix statistics and importance-weighted block fitting.
//!
//! Per column we accumulate `sum a_i^2` over calibration activations. For a
//! block `x` with mean squared activations `a^2`, the per-element weight is
//!
//! ```text
//! a~_i^2 = a_i^2 * sqrt(sigma2 + x_i^2),   sigma2 = mean(x^2)
//! ```
//!
//! and the block's `(s, m)` minimise `sum a~_i^2 (s q_i + m - x_i)^2`. The
//! search is a geometric grid of 64 scales around the min/max scale, each
//! with a closed-form weighted-optimal offset, followed by a ±1 code
//! perturbation search that re-solves `(s, m)` by weighted least squares
//! after each accepted move.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::codecs::container::{put_name, Reader};
use crate::codecs::scalar::{round_half_away, signed_range, unsigned_max};
use crate::error::{Error, Result};
use crate::tensor::{check_finite, rng};

pub const MAGIC: [u8; 4] = *b"QIM1";
pub const VERSION: u32 = 1;

/// Number of candidate scales in the grid search.
pub const GRID_POINTS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMatrix {
    pub sum_sq_activation: Vec<f64>,
    pub sample_count: u64,
}

impl ImportanceMatrix {
    pub fn new(columns: usize) -> Self {
        Self {
            sum_sq_activation: vec![0.0; columns],
            sample_count: 0,
        }
    }

    pub fn columns(&self) -> usize {
        self.sum_sq_activation.len()
    }

    pub fn accumulate(&mut self, activations: &[f32]) -> Result<()> {
        if activations.len() != self.columns() {
            return Err(Error::ShapeMismatch {
                expected: self.columns(),
                got: activations.len(),
            });
        }
        check_finite(activations)?;
        for (s, &a) in self.sum_sq_activation.iter_mut().zip(activations) {
            *s += a as f64 * a as f64;
        }
        self.sample_count += 1;
        Ok(())
    }

    /// Mean squared activation per column; all ones when nothing has been
    /// accumulated yet.
    pub fn mean_sq(&self) -> Vec<f32> {
        if self.sample_count == 0 {
            return vec![1.0; self.columns()];
        }
        let n = self.sample_count as f64;
        self.sum_sq_activation
            .iter()
            .map(|&s| (s / n) as f32)
            .collect()
    }
}

/// Functional form of [`ImportanceMatrix::accumulate`].
pub fn accumulate(mut m: ImportanceMatrix, activations: &[f32]) -> Result<ImportanceMatrix> {
    m.accumulate(activations)?;
    Ok(m)
}

/// Fills an importance matrix from synthetic activations whose per-column
/// scale is log-normal, so a few channels dominate (outlier channels).
pub fn calibrate_synthetic(columns: usize, samples: usize, seed: u64) -> ImportanceMatrix {
    let mut r = rng(seed);
    let col_scale: Vec<f32> = (0..columns)
        .map(|_| {
            let z: f32 = StandardNormal.sample(&mut r);
            z.exp()
        })
        .collect();
    let mut m = ImportanceMatrix::new(columns);
    let mut a = vec![0f32; columns];
    for _ in 0..samples {
        for (v, s) in a.iter_mut().zip(&col_scale) {
            let z: f32 = StandardNormal.sample(&mut r);
            *v = z * s;
        }
        m.accumulate(&a).expect("length matches");
    }
    m
}

/// Named importance matrices, as stored in a QIM1 file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImportanceSet {
    pub entries: Vec<(String, ImportanceMatrix)>,
}

impl ImportanceSet {
    pub fn get(&self, name: &str) -> Option<&ImportanceMatrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, m) in &self.entries {
            put_name(&mut out, name);
            out.extend_from_slice(&(m.columns() as u32).to_le_bytes());
            out.extend_from_slice(&m.sample_count.to_le_bytes());
            for s in &m.sum_sq_activation {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch(version));
        }
        let count = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name = r.name()?;
            let cols = r.u32()? as usize;
            let sample_count = r.u64()?;
            let raw = r.take(cols * 8)?;
            let sums: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if sums.iter().any(|s| !s.is_finite() || *s < 0.0) {
                return Err(Error::CorruptData(format!("{name}: invalid column sum")));
            }
            entries.push((
                name,
                ImportanceMatrix {
                    sum_sq_activation: sums,
                    sample_count,
                },
            ));
        }
        r.finish()?;
        Ok(Self { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub w: Vec<f32>,
    pub a_sq: Vec<f32>,
    pub sigma2: f64,
    pub a_tilde_sq: Vec<f32>,
}

pub fn block_weights(w: &[f32], a_sq: &[f32]) -> Result<BlockWeights> {
    if w.len() != a_sq.len() {
        return Err(Error::ShapeMismatch {
            expected: w.len(),
            got: a_sq.len(),
        });
    }
    check_finite(w)?;
    check_finite(a_sq)?;
    let sigma2 = if w.is_empty() {
        0.0
    } else {
        w.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / w.len() as f64
    };
    let a_tilde_sq = w
        .iter()
        .zip(a_sq)
        .map(|(&x, &a)| (a as f64 * (sigma2 + x as f64 * x as f64).sqrt()) as f32)
        .collect();
    Ok(BlockWeights {
        w: w.to_vec(),
        a_sq: a_sq.to_vec(),
        sigma2,
        a_tilde_sq,
    })
}

/// Result of a block fit. Codes are signed for symmetric fits and in
/// `[0, 2^n - 1]` for asymmetric ones; `min` is 0 for symmetric fits.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFit {
    pub scale: f64,
    pub min: f64,
    pub codes: Vec<i32>,
    pub objective: f64,
}

/// Weighted least-squares problem over one block.
struct Problem {
    x: Vec<f64>,
    w: Vec<f64>,
    lo: i32,
    hi: i32,
    asymmetric: bool,
}

/// Sufficient statistics of `sum w (s q + m - x)^2` for a fixed code vector.
#[derive(Debug, Clone, Copy)]
struct Stats {
    w: f64,
    q: f64,
    qq: f64,
    x: f64,
    qx: f64,
    xx: f64,
}

impl Problem {
    fn new(x: &[f32], weights: &[f32], n_bits: u32, asymmetric: bool) -> Result<Self> {
        if x.len() != weights.len() {
            return Err(Error::ShapeMismatch {
                expected: x.len(),
                got: weights.len(),
            });
        }
        if x.is_empty() {
            return Err(Error::Parameter("empty block".into()));
        }
        if !(2..=8).contains(&n_bits) {
            return Err(Error::Parameter(format!("n_bits {n_bits} outside 2..=8")));
        }
        check_finite(x)?;
        check_finite(weights)?;
        if weights.iter().any(|&v| v < 0.0) {
            return Err(Error::Parameter("negative weight".into()));
        }
        let mut w: Vec<f64> = weights.iter().map(|&v| v as f64).collect();
        if w.iter().all(|&v| v == 0.0) {
            w.fill(1.0);
        }
        let (lo, hi) = if asymmetric {
            (0, unsigned_max(n_bits) as i32)
        } else {
            signed_range(n_bits)
        };
        Ok(Self {
            x: x.iter().map(|&v| v as f64).collect(),
            w,
            lo,
            hi,
            asymmetric,
        })
    }

    fn objective(&self, codes: &[i32], s: f64, m: f64) -> f64 {
        self.x
            .iter()
            .zip(&self.w)
            .zip(codes)
            .map(|((&x, &w), &q)| w * (s * q as f64 + m - x).powi(2))
            .sum()
    }

    fn round_codes(&self, s: f64, m: f64, codes: &mut [i32]) {
        for (c, &x) in codes.iter_mut().zip(&self.x) {
            *c = if s > 0.0 {
                (round_half_away((x - m) / s) as i64).clamp(self.lo as i64, self.hi as i64) as i32
            } else {
                0
            };
        }
    }

    fn stats(&self, codes: &[i32]) -> Stats {
        let mut st = Stats {
            w: 0.0,
            q: 0.0,
            qq: 0.0,
            x: 0.0,
            qx: 0.0,
            xx: 0.0,
        };
        for ((&x, &w), &q) in self.x.iter().zip(&self.w).zip(codes) {
            let q = q as f64;
            st.w += w;
            st.q += w * q;
            st.qq += w * q * q;
            st.x += w * x;
            st.qx += w * q * x;
            st.xx += w * x * x;
        }
        st
    }

    /// Weighted-least-squares `(s, m)` for the codes summarised by `st`.
    /// When the codes cannot determine a scale, `s_keep` is retained.
    fn solve(&self, st: &Stats, s_keep: f64) -> (f64, f64) {
        if self.asymmetric {
            let det = st.w * st.qq - st.q * st.q;
            if det <= 1e-12 * st.w * st.qq.max(1.0) {
                (s_keep, (st.x - s_keep * st.q) / st.w)
            } else {
                (
                    (st.w * st.qx - st.q * st.x) / det,
                    (st.qq * st.x - st.q * st.qx) / det,
                )
            }
        } else if st.qq > 0.0 {
            (st.qx / st.qq, 0.0)
        } else {
            (s_keep, 0.0)
        }
    }

    fn stats_objective(st: &Stats, s: f64, m: f64) -> f64 {
        let f =
            s * s * st.qq + 2.0 * s * m * st.q + m * m * st.w - 2.0 * s * st.qx - 2.0 * m * st.x
                + st.xx;
        f.max(0.0)
    }

    /// Closed-form weighted-optimal offset for fixed `s` and codes.
    fn best_min(&self, codes: &[i32], s: f64) -> f64 {
        let (num, den) = self
            .x
            .iter()
            .zip(&self.w)
            .zip(codes)
            .fold((0.0, 0.0), |(n, d), ((&x, &w), &q)| {
                (n + w * (x - s * q as f64), d + w)
            });
        num / den
    }

    /// Min/max fit: the textbook scale and offset, codes by rounding.
    fn minmax(&self) -> (f64, f64) {
        let (mn, mx) = self
            .x
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        if self.asymmetric {
            ((mx - mn) / self.hi as f64, mn)
        } else {
            (mn.abs().max(mx.abs()) / (-self.lo) as f64, 0.0)
        }
    }
}

/// Objective of the plain min/max fit under the same weights. Used as the
/// dominance baseline.
pub fn minmax_objective(x: &[f32], weights: &[f32], n_bits: u32, asymmetric: bool) -> Result<f64> {
    let p = Problem::new(x, weights, n_bits, asymmetric)?;
    let (s, m) = p.minmax();
    let mut codes = vec![0; x.len()];
    p.round_codes(s, m, &mut codes);
    Ok(p.objective(&codes, if s > 0.0 { s } else { 0.0 }, m))
}

pub fn weighted_affine_fit(
    x: &[f32],
    weights: &[f32],
    n_bits: u32,
    asymmetric: bool,
) -> Result<AffineFit> {
    let p = Problem::new(x, weights, n_bits, asymmetric)?;
    let n = x.len();
    let (s0, m0) = p.minmax();
    let mut codes = vec![0i32; n];
    p.round_codes(s0, m0, &mut codes);
    if s0 <= 0.0 {
        let objective = p.objective(&codes, 0.0, m0);
        return Ok(AffineFit {
            scale: 0.0,
            min: m0,
            codes,
            objective,
        });
    }

    let mut best = (p.objective(&codes, s0, m0), s0, m0, codes.clone());
    let mut trial = vec![0i32; n];
    let consider = |codes: &[i32], s: f64, m: f64, best: &mut (f64, f64, f64, Vec<i32>)| {
        let f = p.objective(codes, s, m);
        if f < best.0 {
            *best = (f, s, m, codes.to_vec());
        }
    };
    for c in 0..GRID_POINTS {
        let s = s0 * 2f64.powf(-1.0 + 2.0 * c as f64 / (GRID_POINTS - 1) as f64);
        let mut m = m0;
        if p.asymmetric {
            p.round_codes(s, m, &mut trial);
            m = p.best_min(&trial, s);
        }
        p.round_codes(s, m, &mut trial);
        consider(&trial, s, m, &mut best);
        // one least-squares polish of this candidate
        let (s2, m2) = p.solve(&p.stats(&trial), s);
        if s2 > 0.0 {
            p.round_codes(s2, m2, &mut trial);
            let (s3, m3) = p.solve(&p.stats(&trial), s2);
            consider(&trial, s3, m3, &mut best);
        }
    }

    let (_, s, m, codes) = best;
    let refined = refine(&p, codes, s, m, 4 * n + 8);
    Ok(refined)
}

/// Outcome of [`perturbative_refine`]; `history` holds the objective after
/// each accepted move, starting with the initial objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub fit: AffineFit,
    pub history: Vec<f64>,
}

/// ±1 code moves in best-improvement order; every accepted move strictly
/// lowers the objective and re-solves `(s, m)` by weighted least squares.
#[allow(clippy::too_many_arguments)]
pub fn perturbative_refine(
    codes: &[i32],
    x: &[f32],
    weights: &[f32],
    scale: f64,
    min: f64,
    n_bits: u32,
    asymmetric: bool,
    max_rounds: usize,
) -> Result<Refinement> {
    let p = Problem::new(x, weights, n_bits, asymmetric)?;
    if codes.len() != x.len() {
        return Err(Error::ShapeMismatch {
            expected: x.len(),
            got: codes.len(),
        });
    }
    if codes.iter().any(|&c| c < p.lo || c > p.hi) {
        return Err(Error::Parameter("starting code out of range".into()));
    }
    Ok(refine_traced(&p, codes.to_vec(), scale, min, max_rounds))
}

fn refine(p: &Problem, codes: Vec<i32>, s: f64, m: f64, max_rounds: usize) -> AffineFit {
    refine_traced(p, codes, s, m, max_rounds).fit
}

fn refine_traced(
    p: &Problem,
    mut codes: Vec<i32>,
    mut s: f64,
    mut m: f64,
    max_rounds: usize,
) -> Refinement {
    let mut f = p.objective(&codes, s, m);
    let mut history = vec![f];
    for _ in 0..max_rounds {
        let st = p.stats(&codes);
        let mut best: Option<(f64, usize, i32, f64, f64)> = None;
        #[allow(clippy::needless_range_loop)]
        for i in 0..codes.len() {
            let (x, w, q) = (p.x[i], p.w[i], codes[i]);
            for step in [-1, 1] {
                let nq = q + step;
                if nq < p.lo || nq > p.hi {
                    continue;
                }
                let (qf, nqf) = (q as f64, nq as f64);
                let moved = Stats {
                    q: st.q + w * (nqf - qf),
                    qq: st.qq + w * (nqf * nqf - qf * qf),
                    qx: st.qx + w * (nqf - qf) * x,
                    ..st
                };
                let (ns, nm) = p.solve(&moved, s);
                let nf = Problem::stats_objective(&moved, ns, nm);
                if best.is_none_or(|b| nf < b.0) {
                    best = Some((nf, i, nq, ns, nm));
                }
            }
        }
        let Some((_, i, nq, ns, nm)) = best else {
            break;
        };
        let old = codes[i];
        codes[i] = nq;
        let exact = p.objective(&codes, ns, nm);
        // the sufficient-statistic estimate can be off by rounding; only
        // accept moves that improve the directly evaluated objective
        if exact < f * (1.0 - 1e-12) - 1e-300 {
            f = exact;
            s = ns;
            m = nm;
            history.push(f);
        } else {
            codes[i] = old;
            break;
        }
    }
    Refinement {
        fit: AffineFit {
            scale: s,
            min: m,
            codes,
            objective: f,
        },
        history,
    }
}

/// Monte-Carlo check of the cross-term elimination
/// `E[(sum e_i a_i)^2] ≈ E[sum a_i^2 e_i^2]` for a fixed error vector `e`
/// and zero-mean unit-variance activations. Returns `(lhs, rhs, rel_gap)`.
pub fn check_sum_squared_approx(dim: usize, samples: usize, seed: u64) -> (f64, f64, f64) {
    sum_squared_gap(dim, samples, seed, false)
}

/// As [`check_sum_squared_approx`] but with all activations of a sample
/// equal, the case where the approximation breaks down.
pub fn check_sum_squared_approx_correlated(
    dim: usize,
    samples: usize,
    seed: u64,
) -> (f64, f64, f64) {
    sum_squared_gap(dim, samples, seed, true)
}

fn sum_squared_gap(dim: usize, samples: usize, seed: u64, correlated: bool) -> (f64, f64, f64) {
    let mut r = rng(seed);
    // rounding residuals of a scaled normal vector
    let e: Vec<f64> = (0..dim)
        .map(|_| {
            let w: f64 = StandardNormal.sample(&mut r);
            let w = 4.0 * w;
            let res = w.round() - w;
            if res == 0.0 {
                0.25
            } else {
                res
            }
        })
        .collect();
    let unit = Uniform::new(-3f64.sqrt(), 3f64.sqrt()).expect("valid range");
    let (mut lhs, mut rhs) = (0.0, 0.0);
    let mut a = vec![0f64; dim];
    for _ in 0..samples {
        if correlated {
            a.fill(unit.sample(&mut r));
        } else {
            a.iter_mut().for_each(|v| *v = unit.sample(&mut r));
        }
        let mut dot = 0.0;
        for (ei, ai) in e.iter().zip(&a) {
            let t = ei * ai;
            dot += t;
            rhs += t * t;
        }
        lhs += dot * dot;
    }
    let n = samples.max(1) as f64;
    let (lhs, rhs) = (lhs / n, rhs / n);
    let gap = if rhs > 0.0 {
        (lhs - rhs).abs() / rhs
    } else {
        0.0
    };
    (lhs, rhs, gap)
}
