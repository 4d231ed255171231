//! Aggregation of benchmark output into tables, Pareto frontiers over
//! (fidelity, throughput, memory), and CSV/JSON emission.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{
    degradation_comm, degradation_comp, run_benchmark, runtime_overhead_bytes, BenchOptions,
    BenchRecord, CellFailure, JsonlEntry, Phase, PhaseStats,
};
use crate::codecs::{is_high_precision_layer, quantize_tensor_with, QuantScheme};
use crate::error::{Error, Result};
use crate::kernels::SyntheticModel;
use crate::tensor::{make_random_tensor, mix_seed, ModelConfig, Workload};

/// Column order of the report CSV.
pub const CSV_HEADER: [&str; 10] = [
    "model",
    "scheme",
    "bpw",
    "phase",
    "input_len",
    "output_len",
    "tps_mean",
    "tps_std",
    "rmse",
    "mem_bytes",
];

/// One configuration in objective space: fidelity and throughput are
/// maximized, memory is minimized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub label: String,
    pub fidelity: f64,
    pub tps: f64,
    pub mem_bytes: u64,
}

impl ParetoPoint {
    pub fn new(label: impl Into<String>, fidelity: f64, tps: f64, mem_bytes: u64) -> Result<Self> {
        let label = label.into();
        if !fidelity.is_finite() || !tps.is_finite() {
            return Err(Error::Parameter(format!(
                "{label}: objectives must be finite (fidelity {fidelity}, tps {tps})"
            )));
        }
        Ok(Self {
            label,
            fidelity,
            tps,
            mem_bytes,
        })
    }

    /// At least as good on every objective and strictly better on one.
    pub fn dominates(&self, other: &ParetoPoint) -> bool {
        let no_worse = self.fidelity >= other.fidelity
            && self.tps >= other.tps
            && self.mem_bytes <= other.mem_bytes;
        let better = self.fidelity > other.fidelity
            || self.tps > other.tps
            || self.mem_bytes < other.mem_bytes;
        no_worse && better
    }
}

/// The non-dominated points, in input order. Equal points do not dominate
/// each other, so duplicates on the frontier are all kept.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    // In this order a point can only be dominated by an earlier one, and
    // dominance is transitive, so checking against the frontier so far is
    // enough.
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (&points[a], &points[b]);
        q.fidelity
            .total_cmp(&p.fidelity)
            .then(q.tps.total_cmp(&p.tps))
            .then(p.mem_bytes.cmp(&q.mem_bytes))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if !kept.iter().any(|&k| points[k].dominates(&points[i])) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept.into_iter().map(|i| points[i].clone()).collect()
}

/// One aggregated cell of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub scheme: QuantScheme,
    pub bpw: f64,
    pub phase: Phase,
    pub input_len: usize,
    pub output_len: usize,
    pub tps_mean: f64,
    pub tps_std: f64,
    pub rmse: Option<f64>,
    pub mem_bytes: u64,
}

impl ReportRow {
    fn key(&self) -> (&str, QuantScheme, Phase, usize, usize) {
        (
            &self.model,
            self.scheme,
            self.phase,
            self.input_len,
            self.output_len,
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
    /// Cells that could not be measured.
    pub failures: Vec<CellFailure>,
}

impl ReportTable {
    /// Sorts rows by model, scheme, phase and input length.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| a.key().cmp(&b.key()));
    }

    /// Aggregates JSON-lines entries, one row per
    /// (model, scheme, phase, input length, output length).
    pub fn from_entries(entries: &[JsonlEntry]) -> Self {
        type Key = (String, QuantScheme, Phase, usize, usize);
        let mut cells: BTreeMap<Key, (f64, Option<f64>, u64, Vec<BenchRecord>)> = BTreeMap::new();
        let mut failures = Vec::new();
        for e in entries {
            match e {
                JsonlEntry::Record(l) => {
                    let key = (
                        l.model.clone(),
                        l.scheme,
                        l.record.phase,
                        l.input_len,
                        l.output_len,
                    );
                    let cell = cells.entry(key).or_insert((l.bpw, l.rmse, 0, Vec::new()));
                    cell.1 = cell.1.or(l.rmse);
                    cell.2 = cell.2.max(l.mem_bytes);
                    cell.3.push(l.record.clone());
                }
                JsonlEntry::Failure(f) => failures.push(f.clone()),
            }
        }
        let rows = cells
            .into_iter()
            .filter_map(
                |((model, scheme, phase, input_len, output_len), (bpw, rmse, mem, recs))| {
                    let stats = PhaseStats::from_records(&recs)?;
                    Some(ReportRow {
                        model,
                        scheme,
                        bpw,
                        phase,
                        input_len,
                        output_len,
                        tps_mean: stats.tps_mean,
                        tps_std: stats.tps_std,
                        rmse,
                        mem_bytes: mem,
                    })
                },
            )
            .collect();
        let mut table = ReportTable { rows, failures };
        table.sort();
        table
    }

    /// Writes the rows as CSV in sorted order.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut rows: Vec<&ReportRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.key().cmp(&b.key()));
        write_serialized_csv(&rows, &CSV_HEADER, path.as_ref())
    }

    /// Reads rows written by [`ReportTable::write_csv`].
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let header = r.headers().map_err(csv_err)?;
        if header.iter().ne(CSV_HEADER) {
            return Err(Error::CorruptData(format!(
                "{}: unexpected header {:?}",
                path.display(),
                header.iter().collect::<Vec<_>>()
            )));
        }
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<ReportRow>, _>>()
            .map_err(csv_err)?;
        Ok(ReportTable {
            rows,
            failures: Vec::new(),
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Pareto points of one phase. Fidelity is the externally supplied score
    /// for (model, scheme) when present, otherwise `-rmse`; rows with neither
    /// are left out.
    pub fn pareto_points(
        &self,
        phase: Phase,
        scores: Option<&HashMap<(String, QuantScheme), f64>>,
    ) -> Vec<ParetoPoint> {
        self.rows
            .iter()
            .filter(|r| r.phase == phase)
            .filter_map(|r| {
                let fidelity = scores
                    .and_then(|s| s.get(&(r.model.clone(), r.scheme)).copied())
                    .or(r.rmse.map(|e| -e))?;
                let label = format!("{}/{}/{}x{}", r.model, r.scheme, r.input_len, r.output_len);
                ParetoPoint::new(label, fidelity, r.tps_mean, r.mem_bytes).ok()
            })
            .collect()
    }

    /// Throughput degradation of every row against the FP16 row of the same
    /// cell and against the shortest prompt of the same model, scheme and
    /// phase.
    pub fn degradation(&self) -> Vec<DegradationRow> {
        let fp16: HashMap<_, f64> = self
            .rows
            .iter()
            .filter(|r| r.scheme == QuantScheme::Fp16)
            .map(|r| {
                (
                    (r.model.as_str(), r.phase, r.input_len, r.output_len),
                    r.tps_mean,
                )
            })
            .collect();
        let mut shortest: HashMap<_, (usize, f64)> = HashMap::new();
        for r in &self.rows {
            let e = shortest
                .entry((r.model.as_str(), r.scheme, r.phase, r.output_len))
                .or_insert((r.input_len, r.tps_mean));
            if r.input_len < e.0 {
                *e = (r.input_len, r.tps_mean);
            }
        }
        let mut rows: Vec<&ReportRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.key().cmp(&b.key()));
        rows.into_iter()
            .map(|r| {
                let comm = fp16
                    .get(&(r.model.as_str(), r.phase, r.input_len, r.output_len))
                    .and_then(|&t16| degradation_comm(r.tps_mean, t16).ok());
                let (base_len, base_tps) =
                    shortest[&(r.model.as_str(), r.scheme, r.phase, r.output_len)];
                DegradationRow {
                    model: r.model.clone(),
                    scheme: r.scheme,
                    phase: r.phase,
                    input_len: r.input_len,
                    output_len: r.output_len,
                    tps_mean: r.tps_mean,
                    degradation_comm: comm,
                    base_input_len: base_len,
                    degradation_comp: degradation_comp(base_tps, r.tps_mean).ok(),
                }
            })
            .collect()
    }
}

/// Degradation ratios of one report row. `degradation_comm` compares with
/// FP16 at the same cell, `degradation_comp` with `base_input_len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRow {
    pub model: String,
    pub scheme: QuantScheme,
    pub phase: Phase,
    pub input_len: usize,
    pub output_len: usize,
    pub tps_mean: f64,
    pub degradation_comm: Option<f64>,
    pub base_input_len: usize,
    pub degradation_comp: Option<f64>,
}

pub const DEGRADATION_HEADER: [&str; 9] = [
    "model",
    "scheme",
    "phase",
    "input_len",
    "output_len",
    "tps_mean",
    "degradation_comm",
    "base_input_len",
    "degradation_comp",
];

pub fn write_degradation_csv(rows: &[DegradationRow], path: impl AsRef<Path>) -> Result<()> {
    write_serialized_csv(rows, &DEGRADATION_HEADER, path.as_ref())
}

/// A frontier point tagged with its phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub phase: Phase,
    pub label: String,
    pub fidelity: f64,
    pub tps: f64,
    pub mem_bytes: u64,
}

/// Frontier of each phase, prefill first.
pub fn frontier_rows(
    table: &ReportTable,
    scores: Option<&HashMap<(String, QuantScheme), f64>>,
) -> Vec<FrontierRow> {
    [Phase::Prefill, Phase::Decode]
        .into_iter()
        .flat_map(|phase| {
            pareto_frontier(&table.pareto_points(phase, scores))
                .into_iter()
                .map(move |p| FrontierRow {
                    phase,
                    label: p.label,
                    fidelity: p.fidelity,
                    tps: p.tps,
                    mem_bytes: p.mem_bytes,
                })
        })
        .collect()
}

pub const FRONTIER_HEADER: [&str; 5] = ["phase", "label", "fidelity", "tps", "mem_bytes"];

pub fn write_frontier_csv(rows: &[FrontierRow], path: impl AsRef<Path>) -> Result<()> {
    write_serialized_csv(rows, &FRONTIER_HEADER, path.as_ref())
}

fn write_serialized_csv<T: Serialize>(rows: &[T], header: &[&str], path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Round-trip RMSE pooled over every weight of the stack that
/// [`SyntheticModel::build`] generates for the same arguments.
pub fn model_rmse(config: &ModelConfig, scheme: QuantScheme, seed: u64) -> Result<f64> {
    config.validate()?;
    let parts = config
        .tensor_specs()
        .into_par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let dense = make_random_tensor(spec.shape, spec.role, mix_seed(seed, i as u64))?;
            let q = quantize_tensor_with(
                spec.name,
                &dense,
                scheme,
                is_high_precision_layer(spec.layer),
                None,
            )?;
            let sse: f64 = dense
                .values
                .iter()
                .zip(q.dequantize())
                .map(|(&a, b)| (a as f64 - b as f64).powi(2))
                .sum();
            Ok((sse, dense.values.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let (sse, n) = parts
        .iter()
        .fold((0.0, 0.0), |(s, c), &(a, b)| (s + a, c + b));
    Ok((sse / n).sqrt())
}

/// Grid settings shared by every cell of a sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub bench: BenchOptions,
    /// Seed for weight generation; workloads carry their own.
    pub seed: u64,
}

/// Runs every (model, scheme, workload) cell. A failing cell becomes a
/// [`CellFailure`] and the sweep continues. `sink` receives each cell's
/// entries as soon as they exist; an error from it stops the sweep.
pub fn sweep(
    models: &[ModelConfig],
    schemes: &[QuantScheme],
    workloads: &[Workload],
    opts: &SweepOptions,
    mut sink: impl FnMut(&[JsonlEntry]) -> Result<()>,
) -> Result<ReportTable> {
    for (what, empty) in [
        ("models", models.is_empty()),
        ("schemes", schemes.is_empty()),
        ("workloads", workloads.is_empty()),
    ] {
        if empty {
            return Err(Error::Parameter(format!(
                "sweep needs at least one entry in {what}"
            )));
        }
    }
    // calibrate the overhead before any model is resident
    runtime_overhead_bytes();
    let mut entries = Vec::new();
    for config in models {
        for &scheme in schemes {
            let built = SyntheticModel::build(config, scheme, opts.seed)
                .and_then(|m| Ok((model_rmse(config, scheme, opts.seed)?, m)));
            for w in workloads {
                let fail = |e: &Error| {
                    JsonlEntry::Failure(CellFailure {
                        model: config.label.clone(),
                        scheme,
                        input_len: w.input_len,
                        output_len: w.output_len,
                        error: e.to_string(),
                    })
                };
                let cell = match &built {
                    Ok((rmse, model)) => match run_benchmark(model, w, &opts.bench) {
                        Ok(summary) => summary.lines(Some(*rmse)),
                        Err(e) => vec![fail(&e)],
                    },
                    Err(e) => vec![fail(e)],
                };
                sink(&cell)?;
                entries.extend(cell);
            }
        }
    }
    Ok(ReportTable::from_entries(&entries))
}
