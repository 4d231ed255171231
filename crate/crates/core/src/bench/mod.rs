//! Measurement protocol, throughput statistics, degradation ratios,
//! roofline classification and memory accounting.

mod memory;

pub use memory::{
    measure_peak_resident, memory_footprint, resident_bytes, runtime_overhead_bytes, PeakResident,
};

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::codecs::QuantScheme;
use crate::error::{Error, Result};
use crate::kernels::{predicted_bpw, KernelMode, KvCache, SimOptions, SyntheticModel, Workers};
use crate::tensor::Workload;
use num_traits::ToPrimitive;

pub const DEFAULT_WARMUP: usize = 3;
pub const DEFAULT_TRIALS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefill" => Ok(Phase::Prefill),
            "decode" => Ok(Phase::Decode),
            _ => Err(Error::Parameter(format!("unknown phase {s:?}"))),
        }
    }
}

/// One measured phase of one trial.
///
/// `bytes` counts weight traffic only (payloads once for prefill, once per
/// token for decode); cache and activation traffic are reported separately
/// so operational intensity follows directly from the weight-streaming model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub phase: Phase,
    pub tokens: u64,
    pub wall_time: f64,
    pub flops: u64,
    pub bytes: u64,
    pub kv_bytes: u64,
    pub activation_bytes: u64,
    pub peak_resident_bytes: Option<u64>,
    pub cpu_time: f64,
    pub workers: usize,
    pub trial_index: usize,
}

impl BenchRecord {
    /// Tokens per second.
    pub fn tps(&self) -> f64 {
        self.tokens as f64 / self.wall_time
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub tps_mean: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub tps_std: f64,
}

impl PhaseStats {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a BenchRecord>) -> Option<Self> {
        let tps: Vec<f64> = records.into_iter().map(BenchRecord::tps).collect();
        if tps.is_empty() {
            return None;
        }
        let n = tps.len() as f64;
        let mean = tps.iter().sum::<f64>() / n;
        let std = if tps.len() > 1 {
            (tps.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            tps_mean: mean,
            tps_std: std,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub model: String,
    pub scheme: QuantScheme,
    pub input_len: usize,
    pub output_len: usize,
    pub seed: u64,
    pub warmup_count: usize,
    pub trial_count: usize,
    pub prefill: PhaseStats,
    pub decode: PhaseStats,
    /// Bits per weight of the whole stack.
    pub bpw: f64,
    /// Predicted footprint (payloads + cache at max tokens + overhead).
    pub mem_bytes: u64,
    pub records: Vec<BenchRecord>,
}

impl BenchSummary {
    pub fn stats(&self, phase: Phase) -> PhaseStats {
        match phase {
            Phase::Prefill => self.prefill,
            Phase::Decode => self.decode,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub warmup: usize,
    pub trials: usize,
    pub workers: usize,
    pub mode: KernelMode,
    /// Sample resident memory during each measured trial.
    pub measure_memory: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup: DEFAULT_WARMUP,
            trials: DEFAULT_TRIALS,
            workers: crate::kernels::default_worker_count(),
            mode: KernelMode::FusedPerBlock,
            measure_memory: false,
        }
    }
}

static BENCH_LOCK: Mutex<()> = Mutex::new(());

/// Holds the process-wide benchmark lock; timing-bearing work outside
/// [`run_benchmark`] can take it too.
pub fn exclusive() -> std::sync::MutexGuard<'static, ()> {
    BENCH_LOCK.lock().unwrap_or_else(|p| p.into_inner())
}

/// Warmup runs (discarded) followed by measured trials, each a prefill of
/// `input_len` tokens then `output_len` decode steps on a freshly reset
/// cache. A failing run is retried once with `seed + 1`; a second failure
/// aborts with the records gathered so far.
pub fn run_benchmark(
    model: &SyntheticModel,
    workload: &Workload,
    opts: &BenchOptions,
) -> Result<BenchSummary> {
    workload.validate()?;
    if opts.trials == 0 {
        return Err(Error::Parameter("trials must be >= 1".into()));
    }
    let _guard = exclusive();
    let workers = Workers::new(opts.workers)?;
    let mut cache = KvCache::new(&model.config, workload.max_tokens())?;
    let mut records = Vec::with_capacity(2 * opts.trials);

    let mut run = |index: usize, measured: bool, records: &mut Vec<BenchRecord>| -> Result<()> {
        let mut last_err = None;
        for attempt in 0..2u64 {
            let sim = SimOptions {
                workers: &workers,
                mode: opts.mode,
                seed: workload
                    .seed
                    .wrapping_add(index as u64)
                    .wrapping_add(attempt),
            };
            let mut trial = || -> Result<(BenchRecord, BenchRecord)> {
                cache.reset();
                let p =
                    crate::kernels::simulate_prefill(model, workload.input_len, &mut cache, &sim)?;
                let d =
                    crate::kernels::simulate_decode(model, workload.output_len, &mut cache, &sim)?;
                Ok((p, d))
            };
            let outcome = if measured && opts.measure_memory {
                match measure_peak_resident(&mut trial) {
                    Ok((r, peak)) => r.map(|(mut p, mut d)| {
                        p.peak_resident_bytes = Some(peak.peak_bytes);
                        d.peak_resident_bytes = Some(peak.peak_bytes);
                        (p, d)
                    }),
                    // sampling unavailable: keep the predicted-only record
                    Err(Error::Capability(_)) => trial(),
                    Err(e) => Err(e),
                }
            } else {
                trial()
            };
            match outcome {
                Ok((mut p, mut d)) => {
                    if measured {
                        p.trial_index = index;
                        d.trial_index = index;
                        records.push(p);
                        records.push(d);
                    }
                    return Ok(());
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.expect("two attempts"))
    };

    for w in 0..opts.warmup {
        if let Err(e) = run(w, false, &mut records) {
            return Err(Error::Aborted {
                reason: format!("warmup {w}: {e}"),
                partial: records,
            });
        }
    }
    for t in 0..opts.trials {
        if let Err(e) = run(t, true, &mut records) {
            return Err(Error::Aborted {
                reason: format!("trial {t}: {e}"),
                partial: records,
            });
        }
    }
    let by_phase = |ph: Phase| {
        PhaseStats::from_records(records.iter().filter(|r| r.phase == ph)).expect("trials >= 1")
    };
    Ok(BenchSummary {
        model: model.config.label.clone(),
        scheme: model.scheme,
        input_len: workload.input_len,
        output_len: workload.output_len,
        seed: workload.seed,
        warmup_count: opts.warmup,
        trial_count: opts.trials,
        prefill: by_phase(Phase::Prefill),
        decode: by_phase(Phase::Decode),
        bpw: predicted_bpw(&model.config, model.scheme)
            .to_f64()
            .unwrap_or(f64::NAN),
        mem_bytes: memory_footprint(&model.config, model.scheme, workload)?,
        records,
    })
}

/// Communication-bound degradation: relative throughput lost by the
/// 16-bit model against a low-BPW one, `(t_low - t_fp16) / t_low`.
pub fn degradation_comm(t_low_bpw: f64, t_fp16: f64) -> Result<f64> {
    ratio(t_low_bpw, t_fp16, "low-BPW throughput")
}

/// Compute-bound degradation: relative throughput lost going from 64 to
/// 512 prompt tokens, `(t_64 - t_512) / t_64`.
pub fn degradation_comp(t_64: f64, t_512: f64) -> Result<f64> {
    ratio(t_64, t_512, "64-token throughput")
}

fn ratio(base: f64, other: f64, what: &str) -> Result<f64> {
    if base == 0.0 || !base.is_finite() || !other.is_finite() {
        return Err(Error::Math(format!(
            "{what} must be finite and non-zero, got {base}"
        )));
    }
    Ok((base - other) / base)
}

/// FLOPs per weight byte.
pub fn operational_intensity(record: &BenchRecord) -> Result<f64> {
    if record.bytes == 0 {
        return Err(Error::Math("operational intensity with zero bytes".into()));
    }
    Ok(record.flops as f64 / record.bytes as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub peak_flops_per_s: f64,
    pub mem_bandwidth_bytes_per_s: f64,
    pub cores: usize,
}

impl HardwareProfile {
    pub fn new(
        peak_flops_per_s: f64,
        mem_bandwidth_bytes_per_s: f64,
        cores: usize,
    ) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(peak_flops_per_s) || !ok(mem_bandwidth_bytes_per_s) || cores == 0 {
            return Err(Error::Parameter(
                "hardware profile values must be positive".into(),
            ));
        }
        Ok(Self {
            peak_flops_per_s,
            mem_bandwidth_bytes_per_s,
            cores,
        })
    }

    /// Machine balance in FLOPs per byte.
    pub fn balance(&self) -> f64 {
        self.peak_flops_per_s / self.mem_bandwidth_bytes_per_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Compute,
    Communication,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RooflinePoint {
    pub operational_intensity: f64,
    pub bound: Bound,
}

/// Compute-bound iff `oi` reaches the machine balance; a tie counts as
/// compute-bound.
pub fn classify_bound(oi: f64, hw: &HardwareProfile) -> RooflinePoint {
    let bound = if oi >= hw.balance() {
        Bound::Compute
    } else {
        Bound::Communication
    };
    RooflinePoint {
        operational_intensity: oi,
        bound,
    }
}

/// Process CPU time in seconds.
pub fn process_cpu_time() -> f64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_PROCESS_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0.0;
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

/// One JSON-lines entry: a measured record with its cell context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchLine {
    pub model: String,
    pub scheme: QuantScheme,
    pub input_len: usize,
    pub output_len: usize,
    pub seed: u64,
    pub bpw: f64,
    pub rmse: Option<f64>,
    pub mem_bytes: u64,
    #[serde(flatten)]
    pub record: BenchRecord,
}

/// JSON-lines entry for a cell that could not be measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub model: String,
    pub scheme: QuantScheme,
    pub input_len: usize,
    pub output_len: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum JsonlEntry {
    Record(BenchLine),
    Failure(CellFailure),
}

impl BenchSummary {
    pub fn lines(&self, rmse: Option<f64>) -> Vec<JsonlEntry> {
        self.records
            .iter()
            .map(|r| {
                JsonlEntry::Record(BenchLine {
                    model: self.model.clone(),
                    scheme: self.scheme,
                    input_len: self.input_len,
                    output_len: self.output_len,
                    seed: self.seed,
                    bpw: self.bpw,
                    rmse,
                    mem_bytes: self.mem_bytes,
                    record: r.clone(),
                })
            })
            .collect()
    }
}

/// Appends entries to a JSON-lines file.
pub fn append_jsonl(path: impl AsRef<Path>, entries: &[JsonlEntry]) -> Result<()> {
    let path = path.as_ref();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        serde_json::to_writer(&mut w, e).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses JSON-lines text; blank lines are skipped and a malformed line is
/// reported with its 1-based number.
pub fn parse_jsonl(text: &str) -> Result<Vec<JsonlEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str::<JsonlEntry>(line)
            .map_err(|e| Error::CorruptData(format!("line {}: {e}", i + 1)))?;
        out.push(entry);
    }
    Ok(out)
}
