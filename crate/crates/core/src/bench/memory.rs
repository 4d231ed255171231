//! Resident-set sampling and predicted footprints.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::thread;
use std::time::Duration;

use crate::codecs::QuantScheme;
use crate::error::{Error, Result};
use crate::kernels::{predicted_weight_bytes, KvCacheAccount};
use crate::tensor::{ModelConfig, Workload};

/// Sampling period of the resident-set observer (100 Hz).
const SAMPLE_PERIOD: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeakResident {
    /// Resident bytes just before the run.
    pub baseline_bytes: u64,
    /// Largest resident size observed during the run.
    pub peak_bytes: u64,
}

fn status_field(name: &str) -> Result<u64> {
    let status = std::fs::read_to_string("/proc/self/status")
        .map_err(|e| Error::Capability(format!("/proc/self/status unavailable: {e}")))?;
    status
        .lines()
        .find_map(|l| l.strip_prefix(name))
        .and_then(|rest| rest.trim().strip_suffix("kB"))
        .and_then(|kb| kb.trim().parse::<u64>().ok())
        .map(|kb| kb * 1024)
        .ok_or_else(|| Error::Capability(format!("{name} missing from /proc/self/status")))
}

/// Current resident set size in bytes.
pub fn resident_bytes() -> Result<u64> {
    status_field("VmRSS:")
}

fn release_free_heap() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: malloc_trim only returns free heap pages to the OS.
    unsafe {
        libc::malloc_trim(0);
    }
}

/// Runs `run` while a sampler thread records the resident set every 10 ms.
/// When the kernel allows resetting the high-water mark, the final peak
/// also takes `VmHWM` into account so short spikes between samples count.
pub fn measure_peak_resident<R>(run: impl FnOnce() -> R) -> Result<(R, PeakResident)> {
    release_free_heap();
    let baseline = resident_bytes()?;
    let hwm_reset = std::fs::write("/proc/self/clear_refs", "5").is_ok();

    let peak = Arc::new(AtomicU64::new(baseline));
    let stop = Arc::new(AtomicBool::new(false));
    let sampler = {
        let (peak, stop) = (Arc::clone(&peak), Arc::clone(&stop));
        thread::Builder::new()
            .name("kquant-rss".into())
            .spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    if let Ok(rss) = resident_bytes() {
                        peak.fetch_max(rss, Ordering::Relaxed);
                    }
                    thread::sleep(SAMPLE_PERIOD);
                }
            })
            .map_err(|e| Error::Resource(format!("cannot start sampler: {e}")))?
    };

    let out = run();
    if let Ok(rss) = resident_bytes() {
        peak.fetch_max(rss, Ordering::Relaxed);
    }
    stop.store(true, Ordering::Relaxed);
    let _ = sampler.join();
    let mut peak_bytes = peak.load(Ordering::Relaxed);
    if hwm_reset {
        if let Ok(hwm) = status_field("VmHWM:") {
            peak_bytes = peak_bytes.max(hwm);
        }
    }
    Ok((
        out,
        PeakResident {
            baseline_bytes: baseline,
            peak_bytes,
        },
    ))
}

/// Fixed runtime overhead, calibrated once per process as the resident size
/// of an empty measured run. Zero when sampling is unavailable.
pub fn runtime_overhead_bytes() -> u64 {
    static OVERHEAD: OnceLock<u64> = OnceLock::new();
    *OVERHEAD.get_or_init(|| {
        measure_peak_resident(|| ())
            .map(|(_, p)| p.baseline_bytes)
            .unwrap_or(0)
    })
}

/// Predicted bytes: all payloads, the cache at the workload's maximum token
/// count, and the calibrated runtime overhead.
pub fn memory_footprint(
    config: &ModelConfig,
    scheme: QuantScheme,
    workload: &Workload,
) -> Result<u64> {
    config.validate()?;
    workload.validate()?;
    let kv = KvCacheAccount {
        tokens_cached: workload.max_tokens() as u64,
        ..KvCacheAccount::for_config(config)
    };
    Ok(predicted_weight_bytes(config, scheme) + kv.total_bytes() + runtime_overhead_bytes())
}
