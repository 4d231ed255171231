//! Exit-gate checks. Each test prints one `PASS`/`FAIL` line and then
//! asserts. Tests hold a shared lock so timing and resident-set
//! measurements never overlap.
//!
//! Run with `cargo test --release -p kquant-core --test acceptance`.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use half::f16;
use kquant::bench::{
    degradation_comm, degradation_comp, measure_peak_resident, operational_intensity,
    run_benchmark, runtime_overhead_bytes, BenchOptions, BenchRecord, Phase,
};
use kquant::codecs::bits::unpack_bits;
use kquant::codecs::{
    bpw, decode_block, decode_container, encode_block, encode_container, quantize_tensor_with,
    read_container, write_container, Layout, QuantScheme, QuantizedTensor,
};
use kquant::imatrix::{
    block_weights, check_sum_squared_approx, minmax_objective, weighted_affine_fit,
};
use kquant::kernels::{
    gemm_quant, gemv_quant, predicted_weight_bytes, KernelMode, KvCacheAccount, SyntheticModel,
};
use kquant::report::{pareto_frontier, ParetoPoint};
use kquant::tensor::{make_random_tensor, rng, ModelConfig, Role, TensorShape, Workload};
use num_rational::Ratio;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|p| p.into_inner())
}

/// Prints the verdict line, then fails the test if the criterion failed or
/// overran its time budget.
fn verdict(name: &str, pass: bool, detail: String, started: Instant, budget: Duration) {
    let elapsed = started.elapsed();
    let ok = pass && elapsed <= budget;
    // written to the raw handle so the line shows without --nocapture
    let _ = writeln!(
        std::io::stdout().lock(),
        "{} {name}: {detail} [{:.2}s of {:.0}s]",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    assert!(pass, "{name}: {detail}");
    assert!(
        elapsed <= budget,
        "{name}: took {elapsed:?}, budget {budget:?}"
    );
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

// ---------------------------------------------------------------------------
// 1. BPW exactness

#[test]
fn bpw_exactness() {
    let _g = serial();
    let t0 = Instant::now();
    use QuantScheme::*;
    use Role::*;
    // (scheme, role, high-precision path, expected bits per weight)
    let cases: [(QuantScheme, Role, bool, Ratio<u64>); 8] = [
        (Q8_0, Other, false, Ratio::new(85, 10)),
        (Q5_0, Other, false, Ratio::new(55, 10)),
        (Q4_0, Other, false, Ratio::new(45, 10)),
        (Q4K, Other, false, Ratio::new(45, 10)),
        (Q5K, AttentionWv, true, Ratio::new(65625, 10000)),
        (Q5K, AttentionWv, false, Ratio::new(55, 10)),
        (Q3K, Other, false, Ratio::new(34375, 10000)),
        (Q3K, AttentionWv, false, Ratio::new(45, 10)),
    ];
    let mut failures = Vec::new();
    for (scheme, role, hp, expected) in cases {
        let layout = scheme.layout(role, hp);
        if layout.bpw() != expected {
            failures.push(format!(
                "{scheme}/{role:?}/hp={hp}: layout {}",
                layout.bpw()
            ));
        }
        if !hp && bpw(scheme, role) != expected {
            failures.push(format!("{scheme}/{role:?}: bpw() {}", bpw(scheme, role)));
        }
    }
    // the other two Q3_K 4-bit roles share the layout
    for role in [AttentionWo, FeedForwardW2] {
        if bpw(Q3K, role) != Ratio::new(9, 2) {
            failures.push(format!("Q3_K/{role:?}: {}", bpw(Q3K, role)));
        }
    }

    // serialized sizes for 256-multiple tensors, container overhead included
    let mut r = rng(11);
    for (i, (scheme, role, hp, expected)) in cases.into_iter().enumerate() {
        let shape = TensorShape::new(r.random_range(1..6), 256 * r.random_range(1..5)).unwrap();
        let dense = make_random_tensor(shape, role, i as u64).unwrap();
        let name = format!("t{i}");
        let qt = quantize_tensor_with(name.clone(), &dense, scheme, hp, None).unwrap();
        let want_payload =
            expected * Ratio::from_integer(shape.len() as u64) / Ratio::from_integer(8);
        if !want_payload.is_integer() || qt.blocks.len() as u64 != want_payload.to_integer() {
            failures.push(format!(
                "{scheme}/{role:?}: payload {} != {want_payload}",
                qt.blocks.len()
            ));
        }
        if qt.pad_count != 0 || qt.bpw() != expected {
            failures.push(format!("{scheme}/{role:?}: tensor bpw {}", qt.bpw()));
        }
        let file = encode_container(std::slice::from_ref(&qt)).unwrap();
        let record = 4 + name.len() + 1 + 1 + 12 + 8 + 4;
        if file.len() as u64 != 24 + record as u64 + want_payload.to_integer() {
            failures.push(format!("{scheme}/{role:?}: file size {}", file.len()));
        }
    }
    verdict(
        "bpw_exactness",
        failures.is_empty(),
        if failures.is_empty() {
            "8 layouts exact, serialized sizes match".into()
        } else {
            failures.join("; ")
        },
        t0,
        secs(1),
    );
}

// ---------------------------------------------------------------------------
// 2. Round-trip bound

/// Per-element step `s` of an encoded symmetric block.
fn block_steps(layout: Layout, bytes: &[u8]) -> Vec<f64> {
    let d = f16::from_le_bytes([bytes[0], bytes[1]]).to_f64();
    match layout {
        Layout::Flat { .. } => vec![d; 32],
        Layout::Super {
            sub_len,
            param_bits,
            asymmetric: false,
            ..
        } => {
            let n_sub = 256 / sub_len as usize;
            let mut codes = vec![0u32; n_sub];
            unpack_bits(&bytes[2..], param_bits as u32, &mut codes);
            codes
                .iter()
                .flat_map(|&c| std::iter::repeat_n(c as f64 * d, sub_len as usize))
                .collect()
        }
        other => panic!("not a symmetric layout: {other:?}"),
    }
}

#[test]
fn round_trip_bound() {
    let _g = serial();
    let t0 = Instant::now();
    let formats = [
        (QuantScheme::Q8_0, Role::Other),
        (QuantScheme::Q5_0, Role::Other),
        (QuantScheme::Q4_0, Role::Other),
        (QuantScheme::Q3K, Role::Other),
    ];
    let mut r = rng(22);
    let mut summary = Vec::new();
    let mut total_violations = 0usize;
    for (scheme, role) in formats {
        let layout = scheme.layout(role, false);
        let n = layout.block_len();
        let mut out = vec![0u8; layout.block_bytes()];
        let mut back = vec![0f32; n];
        let mut violations = 0usize;
        let mut worst = 0f64;
        for _ in 0..10_000 {
            let mag = 10f64.powf(r.random_range(-3.0..3.0));
            let x: Vec<f32> = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    (z * mag) as f32
                })
                .collect();
            encode_block(layout, &x, None, &mut out);
            decode_block(layout, &out, &mut back);
            let steps = block_steps(layout, &out);
            for ((&a, &b), &s) in x.iter().zip(&back).zip(&steps) {
                let err = (a as f64 - b as f64).abs();
                if err > s / 2.0 {
                    violations += 1;
                }
                if s > 0.0 {
                    worst = worst.max(err / s);
                }
            }
        }
        total_violations += violations;
        summary.push(format!("{scheme} {violations} viol, max |e|/s {worst:.4}"));
    }
    verdict(
        "round_trip_bound",
        total_violations == 0,
        summary.join("; "),
        t0,
        secs(30),
    );
}

// ---------------------------------------------------------------------------
// 3. Weighted-fit oracle

/// All 4^4 code assignments, each with its closed-form weighted
/// least-squares (scale, min).
fn exhaustive_2bit(x: &[f64; 4], w: &[f64; 4]) -> f64 {
    let mut best = f64::INFINITY;
    for idx in 0..256u32 {
        let q: [f64; 4] = std::array::from_fn(|i| ((idx >> (2 * i)) & 3) as f64);
        let sw: f64 = w.iter().sum();
        let sq: f64 = (0..4).map(|i| w[i] * q[i]).sum();
        let sqq: f64 = (0..4).map(|i| w[i] * q[i] * q[i]).sum();
        let sx: f64 = (0..4).map(|i| w[i] * x[i]).sum();
        let sqx: f64 = (0..4).map(|i| w[i] * q[i] * x[i]).sum();
        let det = sw * sqq - sq * sq;
        let (s, m) = if det.abs() < 1e-12 {
            (0.0, sx / sw)
        } else {
            ((sw * sqx - sq * sx) / det, (sqq * sx - sq * sqx) / det)
        };
        let f: f64 = (0..4).map(|i| w[i] * (s * q[i] + m - x[i]).powi(2)).sum();
        best = best.min(f);
    }
    best
}

#[test]
fn weighted_fit_oracle() {
    let _g = serial();
    let t0 = Instant::now();
    let mut r = rng(33);
    let (mut hits, mut worse_than_minmax, mut weight_mismatch) = (0, 0, 0);
    for _ in 0..200 {
        let x: [f32; 4] = std::array::from_fn(|_| r.random_range(-2.0..2.0));
        let a_sq: [f32; 4] = std::array::from_fn(|_| r.random_range(0.01..4.0));
        // a~^2 = a^2 sqrt(sigma2 + x^2), sigma2 the block mean of x^2
        let sigma2 = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 4.0;
        let w: [f64; 4] =
            std::array::from_fn(|i| a_sq[i] as f64 * (sigma2 + (x[i] as f64).powi(2)).sqrt());
        let lib = block_weights(&x, &a_sq).unwrap();
        if lib
            .a_tilde_sq
            .iter()
            .zip(&w)
            .any(|(&l, &o)| ((l as f64 - o) / o).abs() > 1e-6)
        {
            weight_mismatch += 1;
        }
        let wf = lib.a_tilde_sq.clone();
        let fit = weighted_affine_fit(&x, &wf, 2, true).unwrap();
        let opt = exhaustive_2bit(&x.map(|v| v as f64), &std::array::from_fn(|i| wf[i] as f64));
        if (fit.objective - opt).abs() <= 1e-6 {
            hits += 1;
        }
        if fit.objective > minmax_objective(&x, &wf, 2, true).unwrap() {
            worse_than_minmax += 1;
        }
    }
    verdict(
        "weighted_fit_oracle",
        hits >= 195 && worse_than_minmax == 0 && weight_mismatch == 0,
        format!(
            "{hits}/200 at exhaustive optimum, {worse_than_minmax} worse than min/max, \
             {weight_mismatch} weight mismatches"
        ),
        t0,
        secs(60),
    );
}

// ---------------------------------------------------------------------------
// 4. Sum-squared approximation

#[test]
fn sum_squared_approximation() {
    let _g = serial();
    let t0 = Instant::now();
    let (lhs, rhs, gap) = check_sum_squared_approx(8, 100_000, 44);

    // independent estimate: gaussian activations, uniform residuals
    let mut r = rng(45);
    let e: Vec<f64> = (0..8).map(|_| r.random_range(-0.5..0.5)).collect();
    let (mut l2, mut r2) = (0.0, 0.0);
    for _ in 0..100_000 {
        let a: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut r)).collect();
        let dot: f64 = e.iter().zip(&a).map(|(x, y)| x * y).sum();
        l2 += dot * dot;
        r2 += e.iter().zip(&a).map(|(x, y)| (x * y).powi(2)).sum::<f64>();
    }
    let gap2 = (l2 - r2).abs() / r2;
    verdict(
        "sum_squared_approximation",
        gap < 0.05 && gap2 < 0.05,
        format!("library lhs {lhs:.5} rhs {rhs:.5} gap {gap:.4}; independent gap {gap2:.4}"),
        t0,
        secs(30),
    );
}

// ---------------------------------------------------------------------------
// 5. Kernel correctness

fn dense_reference(w: &[f32], rows: usize, cols: usize, x: &[f32], batch: usize) -> Vec<f64> {
    let mut y = vec![0f64; rows * batch];
    for r in 0..rows {
        for j in 0..batch {
            y[r * batch + j] = (0..cols)
                .map(|c| w[r * cols + c] as f64 * x[c * batch + j] as f64)
                .sum();
        }
    }
    y
}

fn relative_error(y: &[f32], reference: &[f64]) -> f64 {
    let num: f64 = y
        .iter()
        .zip(reference)
        .map(|(&a, &b)| (a as f64 - b).powi(2))
        .sum();
    let den: f64 = reference.iter().map(|b| b * b).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

fn bitwise_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn kernel_correctness() {
    let _g = serial();
    let t0 = Instant::now();
    let mut r = rng(55);
    let mut worst = 0f64;
    let mut mode_mismatch = 0;
    let mut failing = Vec::new();
    for case in 0..100u64 {
        let scheme = *QuantScheme::ALL.choose(&mut r).unwrap();
        let role = *Role::ALL.choose(&mut r).unwrap();
        let hp = scheme.splits(role) && r.random_bool(0.5);
        let rows = r.random_range(1..48);
        let cols = *[r.random_range(1..600), 256 * r.random_range(1..5)]
            .choose(&mut r)
            .unwrap();
        let batch = r.random_range(1..6);
        let dense = make_random_tensor(TensorShape::new(rows, cols).unwrap(), role, case).unwrap();
        let importance: Option<Vec<f32>> = r
            .random_bool(0.3)
            .then(|| (0..cols).map(|_| r.random_range(0.01..10.0)).collect());
        let qt =
            quantize_tensor_with("k".into(), &dense, scheme, hp, importance.as_deref()).unwrap();
        let w = qt.dequantize();

        let x: Vec<f32> = (0..cols * batch)
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        let x0: Vec<f32> = (0..cols).map(|c| x[c * batch]).collect();
        let gv_f = gemv_quant(&qt, &x0, KernelMode::FusedPerBlock).unwrap();
        let gv_u = gemv_quant(&qt, &x0, KernelMode::UnpackThenCompute).unwrap();
        let gm_f = gemm_quant(&qt, &x, batch, KernelMode::FusedPerBlock).unwrap();
        let gm_u = gemm_quant(&qt, &x, batch, KernelMode::UnpackThenCompute).unwrap();
        if !bitwise_eq(&gv_f, &gv_u) || !bitwise_eq(&gm_f, &gm_u) {
            mode_mismatch += 1;
        }
        let e1 = relative_error(&gv_f, &dense_reference(&w, rows, cols, &x0, 1));
        let e2 = relative_error(&gm_f, &dense_reference(&w, rows, cols, &x, batch));
        let e = e1.max(e2);
        worst = worst.max(e);
        if e >= 1e-6 {
            failing.push(format!("{scheme}/{role:?} {rows}x{cols}: {e:.2e}"));
        }
    }
    verdict(
        "kernel_correctness",
        failing.is_empty() && mode_mismatch == 0,
        format!(
            "100 cases, max rel err {worst:.2e}, {} over 1e-6 {failing:?}, {mode_mismatch} mode mismatches",
            failing.len()
        ),
        t0,
        secs(60),
    );
}

// ---------------------------------------------------------------------------
// 6. Operational-intensity ratio

/// Decode record of one token under the counter model: 2 FLOPs per weight,
/// every weight streamed once at `bits` bits.
fn counter_record(params: u64, bits: u64) -> BenchRecord {
    BenchRecord {
        phase: Phase::Decode,
        tokens: 1,
        wall_time: 1.0,
        flops: 2 * params,
        bytes: params * bits / 8,
        kv_bytes: 0,
        activation_bytes: 0,
        peak_resident_bytes: None,
        cpu_time: 1.0,
        workers: 1,
        trial_index: 0,
    }
}

#[test]
fn operational_intensity_ratio() {
    let _g = serial();
    let t0 = Instant::now();
    let config = ModelConfig {
        label: "107m".into(),
        n_layers: 8,
        d_model: 1024,
        d_ffn: 2816,
        n_heads: 16,
        vocab_proxy: 4096,
    };
    let params = config.parameter_count();
    let oi2 = operational_intensity(&counter_record(params, 2)).unwrap();
    let oi16 = operational_intensity(&counter_record(params, 16)).unwrap();
    let ratio = oi2 / oi16;
    // the FP16 model's stored bytes agree with the counter model
    let fp16_bytes = predicted_weight_bytes(&config, QuantScheme::Fp16);
    verdict(
        "operational_intensity_ratio",
        ratio == 8.0 && fp16_bytes == 2 * params,
        format!("OI(2-bit) {oi2} / OI(16-bit) {oi16} = {ratio}"),
        t0,
        secs(1),
    );
}

// ---------------------------------------------------------------------------
// 7. Throughput directionality

#[test]
fn throughput_directionality() {
    let _g = serial();
    let t0 = Instant::now();
    runtime_overhead_bytes();
    let config = ModelConfig {
        label: "107m".into(),
        n_layers: 8,
        d_model: 1024,
        d_ffn: 2816,
        n_heads: 16,
        vocab_proxy: 4096,
    };
    assert!(config.parameter_count() >= 100_000_000);
    let schemes = [
        QuantScheme::Fp16,
        QuantScheme::Q8_0,
        QuantScheme::Q4_0,
        QuantScheme::Q2K,
    ];
    let models: Vec<SyntheticModel> = schemes
        .iter()
        .map(|&s| SyntheticModel::build(&config, s, 1).unwrap())
        .collect();
    let opts = BenchOptions {
        warmup: 1,
        trials: 3,
        workers: 1,
        mode: KernelMode::FusedPerBlock,
        measure_memory: false,
    };
    const ROUNDS: usize = 5;
    let mut tps = [[0f64; 4]; ROUNDS];
    for (round, row) in tps.iter_mut().enumerate() {
        let workload = Workload::new(16, 64, round as u64).unwrap();
        // rotate the order so slow drift does not favour one scheme
        for k in 0..schemes.len() {
            let i = (k + round) % schemes.len();
            row[i] = run_benchmark(&models[i], &workload, &opts)
                .unwrap()
                .decode
                .tps_mean;
        }
    }
    let wins = |lo: usize, hi: usize| tps.iter().filter(|t| t[lo] < t[hi]).count();
    let (w1, w2) = (wins(0, 1), wins(1, 2));
    // one-sided sign test: 5/5 wins has p = 1/32 < 0.05
    let p = |w: usize| {
        (w..=ROUNDS)
            .map(|k| binomial(ROUNDS, k) as f64)
            .sum::<f64>()
            / 2f64.powi(ROUNDS as i32)
    };
    let mean = |i: usize| tps.iter().map(|t| t[i]).sum::<f64>() / ROUNDS as f64;
    let deg = degradation_comm(mean(3), mean(0)).unwrap();
    let line = |i: usize| {
        tps.iter()
            .map(|t| format!("{:.2}", t[i]))
            .collect::<Vec<_>>()
            .join(",")
    };
    verdict(
        "throughput_directionality",
        p(w1) < 0.05 && p(w2) < 0.05 && deg > 0.0,
        format!(
            "decode tok/s FP16 [{}] Q8_0 [{}] Q4_0 [{}] Q2_K [{}]; FP16<Q8_0 {w1}/5 (p={:.3}), \
             Q8_0<Q4_0 {w2}/5 (p={:.3}), degradation_comm(Q2_K, FP16) {deg:.3}",
            line(0),
            line(1),
            line(2),
            line(3),
            p(w1),
            p(w2)
        ),
        t0,
        secs(600),
    );
}

fn binomial(n: usize, k: usize) -> u64 {
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i as u64 + 1))
}

// ---------------------------------------------------------------------------
// 8. Degradation formulas

#[test]
fn degradation_formulas() {
    let _g = serial();
    let t0 = Instant::now();
    let comm = degradation_comm(25.0, 10.0).unwrap();
    let comm2 = degradation_comm(10.0, 4.0).unwrap();
    let comp = degradation_comp(100.0, 90.0).unwrap();
    verdict(
        "degradation_formulas",
        comm == 0.6 && comm2 == 0.6 && comp == 0.1,
        format!("comm(25, 10) = {comm}, comm(10, 4) = {comm2}, comp(100, 90) = {comp}"),
        t0,
        secs(1),
    );
}

// ---------------------------------------------------------------------------
// 9. Pareto oracle

fn dominance_oracle(points: &[ParetoPoint]) -> Vec<usize> {
    let dominated = |q: &ParetoPoint, p: &ParetoPoint| {
        q.fidelity >= p.fidelity
            && q.tps >= p.tps
            && q.mem_bytes <= p.mem_bytes
            && (q.fidelity > p.fidelity || q.tps > p.tps || q.mem_bytes < p.mem_bytes)
    };
    (0..points.len())
        .filter(|&i| !points.iter().any(|q| dominated(q, &points[i])))
        .collect()
}

#[test]
fn pareto_oracle() {
    let _g = serial();
    let t0 = Instant::now();
    let mut mismatches = 0;
    let mut sizes = Vec::new();
    for seed in 0..50u64 {
        let mut r = rng(9000 + seed);
        // odd seeds draw from a coarse grid so ties and duplicates occur
        let coarse = seed % 2 == 1;
        let points: Vec<ParetoPoint> = (0..1000)
            .map(|i| {
                let (f, t, m) = if coarse {
                    (
                        r.random_range(0..8) as f64,
                        r.random_range(0..8) as f64,
                        r.random_range(0..8u64),
                    )
                } else {
                    (
                        r.random(),
                        r.random::<f64>() * 100.0,
                        r.random_range(0..1_000_000u64),
                    )
                };
                ParetoPoint::new(i.to_string(), f, t, m).unwrap()
            })
            .collect();
        let got: Vec<usize> = pareto_frontier(&points)
            .iter()
            .map(|p| p.label.parse().unwrap())
            .collect();
        let want = dominance_oracle(&points);
        if got != want {
            mismatches += 1;
        }
        sizes.push(want.len());
    }
    verdict(
        "pareto_oracle",
        mismatches == 0,
        format!(
            "50 seeds x 1000 points, {mismatches} mismatches, frontier sizes {}..{}",
            sizes.iter().min().unwrap(),
            sizes.iter().max().unwrap()
        ),
        t0,
        secs(30),
    );
}

// ---------------------------------------------------------------------------
// 10. Container round-trip and fuzz

fn random_tensor_set(r: &mut ChaCha8Rng, seed: u64) -> Vec<QuantizedTensor> {
    const NAMES: [&str; 5] = ["layers.0.attention.wq", "output", "blk.3.ffn", "é名", ""];
    (0..r.random_range(0..5))
        .map(|i| {
            let scheme = *QuantScheme::ALL.choose(r).unwrap();
            let role = *Role::ALL.choose(r).unwrap();
            let hp = scheme.splits(role) && r.random_bool(0.5);
            let shape = TensorShape::new(r.random_range(1..9), r.random_range(1..300)).unwrap();
            let dense = make_random_tensor(shape, role, seed * 16 + i).unwrap();
            let name = format!("{}{i}", NAMES.choose(r).unwrap());
            quantize_tensor_with(name, &dense, scheme, hp, None).unwrap()
        })
        .collect()
}

fn mutate(r: &mut ChaCha8Rng, bytes: &[u8]) -> Vec<u8> {
    let mut m = bytes.to_vec();
    let at = r.random_range(0..m.len());
    match r.random_range(0..6) {
        0 => m[at] ^= 1 << r.random_range(0..8),
        1 => m[at] ^= r.random_range(1..=255u8),
        2 => m.truncate(at),
        3 => {
            m.insert(at, r.random());
        }
        4 => {
            m.remove(at);
        }
        _ => {
            // several random bytes at random offsets
            for _ in 0..r.random_range(2..8) {
                let i = r.random_range(0..m.len());
                m[i] = r.random();
            }
        }
    }
    m
}

#[test]
fn container_round_trip_and_fuzz() {
    let _g = serial();
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(1010);
    let mut round_trip_failures = 0;
    let mut corpus = Vec::new();
    for set in 0..100u64 {
        let tensors = random_tensor_set(&mut r, set);
        let path = dir.path().join(format!("{set}.qbf"));
        write_container(&tensors, &path).unwrap();
        let written = std::fs::read(&path).unwrap();
        let back = read_container(&path).unwrap();
        let again = encode_container(&back).unwrap();
        if back != tensors || again != written {
            round_trip_failures += 1;
        }
        corpus.push(written);
    }

    let (mut panics, mut accepted, mut typed) = (0, 0, 0);
    for _ in 0..1000 {
        let original = corpus.choose(&mut r).unwrap();
        let mutated = mutate(&mut r, original);
        if mutated == *original {
            // a random overwrite can reproduce the original byte; redraw
            continue;
        }
        match catch_unwind(AssertUnwindSafe(|| decode_container(&mutated))) {
            Err(_) => panics += 1,
            Ok(Ok(_)) => accepted += 1,
            Ok(Err(_)) => typed += 1,
        }
    }
    verdict(
        "container_round_trip_and_fuzz",
        round_trip_failures == 0 && panics == 0 && accepted == 0,
        format!(
            "100 sets, {round_trip_failures} round-trip failures; {} mutations: {typed} typed \
             errors, {accepted} accepted, {panics} panics",
            typed + accepted + panics
        ),
        t0,
        secs(60),
    );
}

// ---------------------------------------------------------------------------
// 11. Footprint envelope

#[test]
fn footprint_envelope() {
    let _g = serial();
    let t0 = Instant::now();
    runtime_overhead_bytes();
    let config = ModelConfig {
        label: "desk".into(),
        n_layers: 4,
        d_model: 512,
        d_ffn: 1408,
        n_heads: 8,
        vocab_proxy: 2048,
    };
    let workload = Workload::new(32, 32, 0).unwrap();
    let kv = KvCacheAccount {
        tokens_cached: workload.max_tokens() as u64,
        ..KvCacheAccount::for_config(&config)
    }
    .total_bytes();
    let opts = BenchOptions {
        warmup: 0,
        trials: 1,
        workers: 1,
        mode: KernelMode::FusedPerBlock,
        measure_memory: false,
    };
    let mut ok = true;
    let mut lines = Vec::new();
    for scheme in [QuantScheme::Fp16, QuantScheme::Q4_0, QuantScheme::Q2K] {
        // independent byte count from the layouts alone
        let oracle: u64 = config
            .tensor_specs()
            .iter()
            .map(|s| {
                let hp = s.layer.is_some_and(|l| l % 2 == 0);
                let layout = scheme.layout(s.role, hp);
                let blocks = s.shape.len().div_ceil(layout.block_len()) as u64;
                blocks * layout.block_bits() / 8
            })
            .sum();
        let predicted = predicted_weight_bytes(&config, scheme);
        let model = SyntheticModel::build(&config, scheme, 3).unwrap();
        let payloads: u64 = model.tensors().map(|t| t.blocks.len() as u64).sum();
        let (summary, peak) =
            measure_peak_resident(|| run_benchmark(&model, &workload, &opts).unwrap()).unwrap();
        let footprint = summary.mem_bytes;
        drop(model);
        let lower = predicted + kv;
        let upper = (1.5 * footprint as f64) as u64 + peak.baseline_bytes;
        let pass = predicted == oracle
            && predicted == payloads
            && peak.peak_bytes >= lower
            && peak.peak_bytes <= upper;
        ok &= pass;
        lines.push(format!(
            "{scheme} weights {predicted} (payloads {payloads}), peak {} in [{lower}, {upper}]",
            peak.peak_bytes
        ));
    }
    verdict("footprint_envelope", ok, lines.join("; "), t0, secs(300));
}
