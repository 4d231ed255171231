use std::collections::HashMap;
use std::path::{Path, PathBuf};

use kquant::bench::{append_jsonl, parse_jsonl, BenchOptions, JsonlEntry};
use kquant::codecs::{
    is_high_precision_layer, quantize_tensor_with, read_container, rmse, write_container,
    QuantScheme, QuantizedTensor,
};
use kquant::imatrix::{calibrate_synthetic, ImportanceSet};
use kquant::kernels::default_worker_count;
use kquant::report::{
    frontier_rows, sweep, write_degradation_csv, write_frontier_csv, ReportTable, SweepOptions,
};
use kquant::tensor::{make_model, mix_seed, DenseTensor, ModelConfig, Workload};
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::exit::{Code, Context, Failure, Outcome};
use crate::{DequantizeArgs, GridArgs, ImatrixArgs, InspectArgs, QuantizeArgs, ReportArgs, Source};

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(
        Code::Io,
        anyhow::Error::new(e).context(path.display().to_string()),
    )
}

fn read_model_config(path: &Path) -> Outcome<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    let config: ModelConfig = toml::from_str(&text)
        .map_err(|e| Failure::new(Code::Data, anyhow::anyhow!("{}: {e}", path.display())))?;
    config.validate().ctx(path.display())?;
    Ok(config)
}

/// Layer index encoded in a `layers.N.` tensor name.
fn layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("layers.")?
        .split('.')
        .next()?
        .parse()
        .ok()
}

/// Dense tensors to quantize, each with its name and high-precision flag.
fn load_source(src: &Source, seed: u64) -> Outcome<Vec<(String, DenseTensor, bool)>> {
    if let Some(path) = &src.model_config {
        let config = read_model_config(path)?;
        let model = make_model(&config, seed).ctx("generating weights")?;
        return Ok(model
            .into_iter()
            .map(|lt| (lt.name, lt.tensor, is_high_precision_layer(lt.layer)))
            .collect());
    }
    let path = src.input.as_ref().expect("clap requires one source");
    let tensors = read_container(path).ctx(path.display())?;
    Ok(tensors
        .into_iter()
        .map(|t| {
            let hp = match layer_of(&t.name) {
                Some(l) => is_high_precision_layer(Some(l)),
                None => t.high_precision,
            };
            let dense = t.to_dense();
            (t.name, dense, hp)
        })
        .collect())
}

pub fn quantize(a: &QuantizeArgs) -> Outcome {
    let importance = match &a.imatrix {
        Some(p) => Some(ImportanceSet::read(p).ctx(p.display())?),
        None => None,
    };
    let sources = load_source(&a.source, a.seed)?;
    let mut out = Vec::with_capacity(sources.len());
    say!(
        "{:<32} {:>14} {:<16} {:>8} {:>12}",
        "tensor",
        "shape",
        "role",
        "bpw",
        "rmse"
    );
    for (name, dense, hp) in sources {
        let imp = match importance.as_ref() {
            Some(set) => match set.get(&name) {
                Some(m) => Some(m.mean_sq()),
                None => {
                    eprintln!("warning: {name}: no importance entry, using unweighted fit");
                    None
                }
            },
            None => None,
        };
        let q = quantize_tensor_with(name.clone(), &dense, a.scheme, hp, imp.as_deref())
            .ctx(format!("tensor {name}"))?;
        let err = rmse(&dense.values, &q.dequantize());
        say!(
            "{:<32} {:>14} {:<16} {:>8.4} {:>12.6e}",
            name,
            format!("{}x{}", q.shape.rows, q.shape.cols),
            q.role.as_str(),
            q.bpw().to_f64().unwrap_or(f64::NAN),
            err
        );
        out.push(q);
    }
    write_container(&out, &a.out).ctx(a.out.display())?;
    let bits: u64 = out.iter().map(|t| t.payload_bits()).sum();
    let stored: u64 = out.iter().map(|t| t.padded_len() as u64).sum();
    say!(
        "wrote {} tensors, {:.4} bits per weight overall, to {}",
        out.len(),
        bits as f64 / stored.max(1) as f64,
        a.out.display()
    );
    Ok(())
}

pub fn dequantize(a: &DequantizeArgs) -> Outcome {
    let tensors = read_container(&a.input).ctx(a.input.display())?;
    let mut out = Vec::with_capacity(tensors.len());
    for t in &tensors {
        let dense = t.to_dense();
        let q = quantize_tensor_with(t.name.clone(), &dense, QuantScheme::Fp16, false, None)
            .ctx(format!("tensor {}", t.name))?;
        out.push(q);
    }
    write_container(&out, &a.out).ctx(a.out.display())?;
    say!("wrote {} FP16 tensors to {}", out.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TensorInfo {
    name: String,
    role: String,
    scheme: QuantScheme,
    layout: String,
    rows: usize,
    cols: usize,
    blocks: usize,
    pad_count: usize,
    payload_bytes: usize,
    bpw: f64,
}

impl From<&QuantizedTensor> for TensorInfo {
    fn from(t: &QuantizedTensor) -> Self {
        Self {
            name: t.name.clone(),
            role: t.role.as_str().to_string(),
            scheme: t.scheme,
            layout: t.layout().to_string(),
            rows: t.shape.rows,
            cols: t.shape.cols,
            blocks: t.block_count(),
            pad_count: t.pad_count,
            payload_bytes: t.blocks.len(),
            bpw: t.bpw().to_f64().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Serialize)]
struct ImportanceInfo {
    name: String,
    columns: usize,
    sample_count: u64,
}

pub fn inspect(a: &InspectArgs) -> Outcome {
    let bytes = std::fs::read(&a.input).map_err(|e| io_failure(&a.input, e))?;
    if bytes.starts_with(&kquant::imatrix::MAGIC) {
        let set = ImportanceSet::decode(&bytes).ctx(a.input.display())?;
        let info: Vec<ImportanceInfo> = set
            .entries
            .iter()
            .map(|(name, m)| ImportanceInfo {
                name: name.clone(),
                columns: m.columns(),
                sample_count: m.sample_count,
            })
            .collect();
        if a.json {
            say!(
                "{}",
                serde_json::to_string_pretty(&info).expect("serializable")
            );
        } else {
            say!("QIM1, {} entries", info.len());
            for i in info {
                say!(
                    "{:<32} columns {:>6} samples {}",
                    i.name,
                    i.columns,
                    i.sample_count
                );
            }
        }
        return Ok(());
    }
    let tensors = kquant::codecs::decode_container(&bytes).ctx(a.input.display())?;
    let info: Vec<TensorInfo> = tensors.iter().map(TensorInfo::from).collect();
    if a.json {
        say!(
            "{}",
            serde_json::to_string_pretty(&info).expect("serializable")
        );
    } else {
        say!("QBF1, {} tensors", info.len());
        say!(
            "{:<32} {:<8} {:<24} {:>14} {:>8} {:>10}",
            "tensor",
            "scheme",
            "layout",
            "shape",
            "bpw",
            "bytes"
        );
        for i in info {
            say!(
                "{:<32} {:<8} {:<24} {:>14} {:>8.4} {:>10}",
                i.name,
                i.scheme.to_string(),
                i.layout,
                format!("{}x{}", i.rows, i.cols),
                i.bpw,
                i.payload_bytes
            );
        }
    }
    Ok(())
}

pub fn imatrix(a: &ImatrixArgs) -> Outcome {
    if a.samples == 0 {
        return Err(Failure::usage("--samples must be at least 1"));
    }
    let columns: Vec<(String, usize)> = if let Some(path) = &a.source.model_config {
        read_model_config(path)?
            .tensor_specs()
            .into_iter()
            .map(|s| (s.name, s.shape.cols))
            .collect()
    } else {
        let path = a.source.input.as_ref().expect("clap requires one source");
        read_container(path)
            .ctx(path.display())?
            .into_iter()
            .map(|t| (t.name, t.shape.cols))
            .collect()
    };
    let set = ImportanceSet {
        entries: columns
            .into_iter()
            .enumerate()
            .map(|(i, (name, cols))| {
                (
                    name,
                    calibrate_synthetic(cols, a.samples, mix_seed(a.seed, i as u64)),
                )
            })
            .collect(),
    };
    set.write(&a.out).ctx(a.out.display())?;
    say!(
        "wrote {} importance entries to {}",
        set.entries.len(),
        a.out.display()
    );
    Ok(())
}

/// `<dir>/<stem><suffix>` next to the JSON-lines file.
fn sibling(jsonl: &Path, suffix: &str) -> PathBuf {
    let stem = jsonl
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    jsonl.with_file_name(format!("{stem}{suffix}"))
}

pub fn bench(configs: &[PathBuf], g: &GridArgs, json: Option<&Path>) -> Outcome {
    let models = configs
        .iter()
        .map(|p| read_model_config(p))
        .collect::<Outcome<Vec<_>>>()?;
    if g.schemes.is_empty() || g.input_lens.is_empty() {
        return Err(Failure::usage(
            "--schemes and --input-lens must not be empty",
        ));
    }
    if g.trials == 0 {
        return Err(Failure::usage("--trials must be at least 1"));
    }
    let workloads = g
        .input_lens
        .iter()
        .map(|&n| Workload::new(n, g.output_len, g.seed))
        .collect::<kquant::Result<Vec<_>>>()
        .ctx_code(Code::Usage, "workload")?;
    let opts = SweepOptions {
        bench: BenchOptions {
            warmup: g.warmup,
            trials: g.trials,
            workers: g.workers.unwrap_or_else(default_worker_count),
            mode: g.mode.into(),
            measure_memory: !g.no_memory,
        },
        seed: g.seed,
    };
    if opts.bench.workers == 0 {
        return Err(Failure::usage("--workers must be at least 1"));
    }

    // start from an empty file so reruns produce the same output
    if let Some(dir) = g.jsonl.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    std::fs::write(&g.jsonl, b"").map_err(|e| io_failure(&g.jsonl, e))?;
    let table = sweep(&models, &g.schemes, &workloads, &opts, |entries| {
        for e in entries {
            match e {
                JsonlEntry::Record(l) => eprintln!(
                    "{} {} {}x{} trial {} {}: {:.2} tok/s",
                    l.model,
                    l.scheme,
                    l.input_len,
                    l.output_len,
                    l.record.trial_index,
                    l.record.phase,
                    l.record.tps()
                ),
                JsonlEntry::Failure(f) => eprintln!(
                    "{} {} {}x{} FAILED: {}",
                    f.model, f.scheme, f.input_len, f.output_len, f.error
                ),
            }
        }
        append_jsonl(&g.jsonl, entries)
    })
    .ctx("sweep")?;

    let csv = sibling(&g.jsonl, ".csv");
    table.write_csv(&csv).ctx(csv.display())?;
    let deg = sibling(&g.jsonl, ".degradation.csv");
    write_degradation_csv(&table.degradation(), &deg).ctx(deg.display())?;
    if let Some(p) = json {
        table.write_json(p).ctx(p.display())?;
    }
    say!(
        "{} rows, {} failed cells; wrote {}, {}, {}",
        table.rows.len(),
        table.failures.len(),
        g.jsonl.display(),
        csv.display(),
        deg.display()
    );
    if table.rows.is_empty() {
        return Err(Failure::new(
            Code::Data,
            anyhow::anyhow!("every benchmark cell failed"),
        ));
    }
    Ok(())
}

#[derive(Deserialize)]
struct ScoreRow {
    model: String,
    scheme: String,
    score: f64,
}

fn read_scores(path: &Path) -> Outcome<HashMap<(String, QuantScheme), f64>> {
    let data = |e: String| Failure::new(Code::Data, anyhow::anyhow!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Failure::new(Code::Io, anyhow::anyhow!("{}: {e}", path.display())),
        _ => data(e.to_string()),
    })?;
    let mut out = HashMap::new();
    for (i, row) in r.deserialize::<ScoreRow>().enumerate() {
        let row = row.map_err(|e| data(format!("row {}: {e}", i + 1)))?;
        let scheme = row
            .scheme
            .parse()
            .map_err(|e: kquant::Error| data(e.to_string()))?;
        if !row.score.is_finite() {
            return Err(data(format!("row {}: score must be finite", i + 1)));
        }
        out.insert((row.model, scheme), row.score);
    }
    Ok(out)
}

pub fn report(a: &ReportArgs) -> Outcome {
    let text = std::fs::read_to_string(&a.input).map_err(|e| io_failure(&a.input, e))?;
    let entries = parse_jsonl(&text).ctx_code(Code::Data, a.input.display())?;
    let scores = a.scores.as_deref().map(read_scores).transpose()?;
    let table = ReportTable::from_entries(&entries);
    table.write_csv(&a.csv).ctx(a.csv.display())?;
    if let Some(p) = &a.json {
        table.write_json(p).ctx(p.display())?;
    }
    if let Some(p) = &a.pareto {
        let rows = frontier_rows(&table, scores.as_ref());
        write_frontier_csv(&rows, p).ctx(p.display())?;
        say!("{} frontier points written to {}", rows.len(), p.display());
    }
    for f in &table.failures {
        eprintln!(
            "failed cell: {} {} {}x{}: {}",
            f.model, f.scheme, f.input_len, f.output_len, f.error
        );
    }
    say!("{} rows written to {}", table.rows.len(), a.csv.display());
    Ok(())
}
