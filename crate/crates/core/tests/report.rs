use std::collections::HashMap;

use kquant::bench::{BenchOptions, JsonlEntry, Phase};
use kquant::codecs::QuantScheme;
use kquant::kernels::KernelMode;
use kquant::report::{
    frontier_rows, pareto_frontier, sweep, write_frontier_csv, ParetoPoint, ReportRow, ReportTable,
    SweepOptions, CSV_HEADER,
};
use kquant::tensor::{ModelConfig, Workload};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pairwise dominance check over all points.
fn oracle(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let dominated = |q: &ParetoPoint, p: &ParetoPoint| {
        q.fidelity >= p.fidelity
            && q.tps >= p.tps
            && q.mem_bytes <= p.mem_bytes
            && (q.fidelity > p.fidelity || q.tps > p.tps || q.mem_bytes < p.mem_bytes)
    };
    points
        .iter()
        .filter(|p| !points.iter().any(|q| dominated(q, p)))
        .cloned()
        .collect()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, coarse: bool) -> Vec<ParetoPoint> {
    (0..n)
        .map(|i| {
            let (f, t, m) = if coarse {
                (
                    rng.random_range(0..8) as f64,
                    rng.random_range(0..8) as f64,
                    rng.random_range(0..8u64),
                )
            } else {
                (
                    rng.random::<f64>(),
                    rng.random::<f64>() * 100.0,
                    rng.random_range(0..1_000_000u64),
                )
            };
            ParetoPoint::new(format!("p{i}"), f, t, m).unwrap()
        })
        .collect()
}

#[test]
fn frontier_matches_oracle_on_random_sets() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_points(&mut rng, 1000, seed % 2 == 1);
        assert_eq!(pareto_frontier(&pts), oracle(&pts), "seed {seed}");
    }
}

#[test]
fn frontier_matches_oracle_at_ten_thousand_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let pts = random_points(&mut rng, 10_000, true);
    assert_eq!(pareto_frontier(&pts), oracle(&pts));
}

fn point_strategy() -> impl Strategy<Value = ParetoPoint> {
    (-50i32..50, -50i32..50, 0u64..50)
        .prop_map(|(f, t, m)| ParetoPoint::new("p", f as f64 / 4.0, t as f64, m).unwrap())
}

proptest! {
    #[test]
    fn frontier_equals_oracle(pts in prop::collection::vec(point_strategy(), 0..200)) {
        prop_assert_eq!(pareto_frontier(&pts), oracle(&pts));
    }

    #[test]
    fn frontier_invariant_under_monotone_rescaling(
        pts in prop::collection::vec(point_strategy(), 1..150),
        a in 0.1f64..10.0,
        b in -100.0f64..100.0,
        k in 1u64..7,
    ) {
        let mapped: Vec<ParetoPoint> = pts
            .iter()
            .map(|p| ParetoPoint::new(
                "p",
                a * p.fidelity + b,
                p.tps.powi(3) + b,
                k * p.mem_bytes * p.mem_bytes + 3,
            ).unwrap())
            .collect();
        let member = |set: &[ParetoPoint], all: &[ParetoPoint]| {
            let f = pareto_frontier(all);
            set.iter().map(|p| f.contains(p)).collect::<Vec<_>>()
        };
        prop_assert_eq!(member(&pts, &pts), member(&mapped, &mapped));
    }

    #[test]
    fn csv_round_trip(rows in prop::collection::vec(row_strategy(), 0..20)) {
        let mut table = ReportTable { rows, failures: vec![] };
        table.sort();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        table.write_csv(&path).unwrap();
        prop_assert_eq!(ReportTable::read_csv(&path).unwrap(), table);
    }
}

fn row_strategy() -> impl Strategy<Value = ReportRow> {
    (
        "[a-z ,\"]{0,8}",
        prop::sample::select(QuantScheme::ALL.to_vec()),
        prop::sample::select(vec![Phase::Prefill, Phase::Decode]),
        1usize..600,
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        prop::option::of(0.0f64..1.0),
        any::<u64>(),
    )
        .prop_map(
            |(model, scheme, phase, input_len, tps, rmse, mem)| ReportRow {
                model,
                scheme,
                bpw: 4.5,
                phase,
                input_len,
                output_len: 7,
                tps_mean: tps,
                tps_std: tps.abs() / 3.0,
                rmse,
                mem_bytes: mem,
            },
        )
}

#[test]
fn empty_table_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.csv");
    ReportTable::default().write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, format!("{}\n", CSV_HEADER.join(",")));
    assert_eq!(
        ReportTable::read_csv(&path).unwrap(),
        ReportTable::default()
    );
}

#[test]
fn comma_in_label_is_quoted_and_round_trips() {
    let row = ReportRow {
        model: "tiny,v2".into(),
        scheme: QuantScheme::Q4K,
        bpw: 4.5,
        phase: Phase::Decode,
        input_len: 64,
        output_len: 8,
        tps_mean: 12.5,
        tps_std: 0.25,
        rmse: None,
        mem_bytes: 1234,
    };
    let table = ReportTable {
        rows: vec![row],
        failures: vec![],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    table.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(
        text.contains("\"tiny,v2\",Q4_K,4.5,decode,64,8,12.5,0.25,,1234"),
        "{text}"
    );
    assert_eq!(ReportTable::read_csv(&path).unwrap(), table);
}

#[test]
fn rows_are_written_in_key_order() {
    let mk = |model: &str, scheme, phase, input_len| ReportRow {
        model: model.into(),
        scheme,
        bpw: 8.5,
        phase,
        input_len,
        output_len: 1,
        tps_mean: 1.0,
        tps_std: 0.0,
        rmse: Some(0.0),
        mem_bytes: 1,
    };
    let table = ReportTable {
        rows: vec![
            mk("b", QuantScheme::Fp16, Phase::Prefill, 64),
            mk("a", QuantScheme::Q8_0, Phase::Decode, 128),
            mk("a", QuantScheme::Q8_0, Phase::Decode, 64),
            mk("a", QuantScheme::Q8_0, Phase::Prefill, 512),
            mk("a", QuantScheme::Fp16, Phase::Decode, 64),
        ],
        failures: vec![],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("o.csv");
    table.write_csv(&path).unwrap();
    let back = ReportTable::read_csv(&path).unwrap();
    let keys: Vec<_> = back
        .rows
        .iter()
        .map(|r| format!("{} {} {} {}", r.model, r.scheme, r.phase, r.input_len))
        .collect();
    assert_eq!(
        keys,
        [
            "a FP16 decode 64",
            "a Q8_0 prefill 512",
            "a Q8_0 decode 64",
            "a Q8_0 decode 128",
            "b FP16 prefill 64",
        ]
    );
}

fn tiny() -> ModelConfig {
    ModelConfig {
        label: "tiny".into(),
        n_layers: 2,
        d_model: 64,
        d_ffn: 128,
        n_heads: 4,
        vocab_proxy: 96,
    }
}

fn quick() -> SweepOptions {
    SweepOptions {
        bench: BenchOptions {
            warmup: 0,
            trials: 2,
            workers: 1,
            mode: KernelMode::FusedPerBlock,
            measure_memory: false,
        },
        seed: 3,
    }
}

#[test]
fn sweep_counts_rows_and_streams_entries() {
    let mut streamed = 0;
    let table = sweep(
        &[tiny()],
        &[QuantScheme::Fp16, QuantScheme::Q2K],
        &[Workload::new(4, 3, 1).unwrap()],
        &quick(),
        |e| {
            streamed += e.len();
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(streamed, 2 * 2 * 2);
    assert_eq!(table.rows.len(), 4);
    for phase in [Phase::Prefill, Phase::Decode] {
        assert_eq!(table.rows.iter().filter(|r| r.phase == phase).count(), 2);
    }
    let q2 = table
        .rows
        .iter()
        .find(|r| r.scheme == QuantScheme::Q2K)
        .unwrap();
    let f16 = table
        .rows
        .iter()
        .find(|r| r.scheme == QuantScheme::Fp16)
        .unwrap();
    assert!(q2.rmse.unwrap() > f16.rmse.unwrap());
    assert!(q2.bpw < f16.bpw && f16.bpw == 16.0);
    assert!(table.failures.is_empty());
}

#[test]
fn sweep_records_failed_cells() {
    let mut bad = tiny();
    bad.n_heads = 5;
    let mut entries = Vec::new();
    let table = sweep(
        &[bad, tiny()],
        &[QuantScheme::Q8_0],
        &[Workload::new(2, 2, 0).unwrap()],
        &quick(),
        |e| {
            entries.extend_from_slice(e);
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(table.failures.len(), 1);
    assert_eq!(table.rows.len(), 2);
    assert!(matches!(entries[0], JsonlEntry::Failure(_)));
}

#[test]
fn sweep_rejects_empty_lists() {
    let w = [Workload::new(2, 2, 0).unwrap()];
    assert!(sweep(&[tiny()], &[], &w, &quick(), |_| Ok(())).is_err());
    assert!(sweep(&[], &[QuantScheme::Q8_0], &w, &quick(), |_| Ok(())).is_err());
    assert!(sweep(&[tiny()], &[QuantScheme::Q8_0], &[], &quick(), |_| Ok(())).is_err());
}

#[test]
fn frontier_per_phase_and_imported_scores() {
    let mk = |scheme, phase, tps, rmse, mem| ReportRow {
        model: "m".into(),
        scheme,
        bpw: 0.0,
        phase,
        input_len: 64,
        output_len: 8,
        tps_mean: tps,
        tps_std: 0.0,
        rmse: Some(rmse),
        mem_bytes: mem,
    };
    let table = ReportTable {
        rows: vec![
            mk(QuantScheme::Fp16, Phase::Decode, 10.0, 0.0, 400),
            mk(QuantScheme::Q4K, Phase::Decode, 30.0, 0.01, 120),
            mk(QuantScheme::Q2K, Phase::Decode, 25.0, 0.05, 140),
            mk(QuantScheme::Fp16, Phase::Prefill, 90.0, 0.0, 400),
        ],
        failures: vec![],
    };
    let rows = frontier_rows(&table, None);
    let labels: Vec<_> = rows.iter().map(|r| (r.phase, r.label.as_str())).collect();
    assert_eq!(
        labels,
        [
            (Phase::Prefill, "m/FP16/64x8"),
            (Phase::Decode, "m/FP16/64x8"),
            (Phase::Decode, "m/Q4_K/64x8"),
        ]
    );
    // a score that favours Q2_K puts it on the frontier
    let scores = HashMap::from([
        (("m".to_string(), QuantScheme::Fp16), 50.0),
        (("m".to_string(), QuantScheme::Q4K), 40.0),
        (("m".to_string(), QuantScheme::Q2K), 45.0),
    ]);
    let decode: Vec<_> = frontier_rows(&table, Some(&scores))
        .into_iter()
        .filter(|r| r.phase == Phase::Decode)
        .map(|r| r.label)
        .collect();
    assert_eq!(decode.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.csv");
    write_frontier_csv(&[], &path).unwrap();
    assert_eq!(
        std::fs::read_to_string(&path).unwrap(),
        "phase,label,fidelity,tps,mem_bytes\n"
    );
}
