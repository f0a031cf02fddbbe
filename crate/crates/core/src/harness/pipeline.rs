//! Per-seed runs, aggregation, baselines and the ablation table.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::{Ablation, Baseline, DataSource, EffectiveConfig, RunConfig};
use crate::datagen::{load_dataset, split, synth_longtail, write_atomic, Dataset};
use crate::diffcore::ModelState;
use crate::icc::{run_icc, IccTrace};
use crate::metrics::{GroupSpec, MetricsReport};
use crate::rrl::{train_stage1, Stage1Trace};
use crate::{eval, seed, Error, Result};

pub struct SeedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub groups: GroupSpec,
}

/// Generates or loads the data for one seed and splits it.
pub fn prepare_data(cfg: &RunConfig, seed_value: u64) -> Result<SeedData> {
    let full = match &cfg.data {
        DataSource::Synthetic(spec) => {
            let mut spec = spec.clone();
            spec.seed = seed_value;
            synth_longtail(&spec)?
        }
        DataSource::File(p) => load_dataset(p)?,
    };
    let (train, val, test) = split(&full, cfg.split, seed::derive(seed_value, &[seed::TAG_SPLIT]))?;
    let groups = match &cfg.groups {
        Some(p) => GroupSpec::load(p, full.num_classes)?,
        None => GroupSpec::from_train_counts(&train.class_counts),
    };
    Ok(SeedData {
        train,
        val,
        test,
        groups,
    })
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub report: MetricsReport,
    pub stage1_state: ModelState,
    pub stage1_trace: Stage1Trace,
    pub final_state: ModelState,
    pub stage2_trace: Option<IccTrace>,
}

/// Stage-one results shared between runs whose stage-one settings agree.
pub type Stage1Cache = Mutex<HashMap<String, (ModelState, Stage1Trace)>>;

fn run_stage1_cached(
    data: &SeedData,
    eff: &EffectiveConfig,
    cache: Option<&Stage1Cache>,
) -> Result<(ModelState, Stage1Trace)> {
    let key = serde_json::to_string(&eff.stage1).expect("config serializes");
    if let Some(c) = cache {
        if let Some(hit) = c.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
    }
    let out = train_stage1(&data.train, &data.val, &eff.stage1)?;
    if let Some(c) = cache {
        c.lock().unwrap().insert(key, out.clone());
    }
    Ok(out)
}

/// Data → stage 1 → stage 2 (unless disabled) → test evaluation.
pub fn run_seed(cfg: &RunConfig, seed_value: u64, cache: Option<&Stage1Cache>) -> Result<SeedOutcome> {
    let data = prepare_data(cfg, seed_value)?;
    let eff = cfg.effective(seed_value);
    let (stage1_state, stage1_trace) = run_stage1_cached(&data, &eff, cache)?;
    let (final_state, stage2_trace) = match &eff.stage2 {
        Some(c2) => {
            let (s, t) = run_icc(&data.train, &data.val, &stage1_state, c2)?;
            (s, Some(t))
        }
        None => (stage1_state.clone(), None),
    };
    let report = eval::evaluate(&final_state, &data.test, &data.groups)?;
    Ok(SeedOutcome {
        seed: seed_value,
        report,
        stage1_state,
        stage1_trace,
        final_state,
        stage2_trace,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; `None` for a single value.
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Some(Self { mean, std, n })
    }
}

pub const AGGREGATE_KEYS: [&str; 9] = [
    "auc", "bacc", "f1", "kappa", "precision", "recall", "head", "medium", "tail",
];

fn metric(r: &MetricsReport, key: &str) -> Option<f64> {
    match key {
        "auc" => Some(r.auc_macro),
        "bacc" => Some(r.bacc),
        "f1" => Some(r.f1_macro),
        "kappa" => Some(r.kappa_quadratic),
        "precision" => Some(r.precision_macro),
        "recall" => Some(r.recall_macro),
        "head" => r.group_bacc.head,
        "medium" => r.group_bacc.medium,
        "tail" => r.group_bacc.tail,
        _ => None,
    }
}

/// Mean and sample std of each metric across seeds. Groups that are empty
/// for some seed average over the seeds that have them.
pub fn aggregate(reports: &[MetricsReport]) -> BTreeMap<String, Option<Stat>> {
    AGGREGATE_KEYS
        .iter()
        .map(|k| {
            let v: Vec<f64> = reports.iter().filter_map(|r| metric(r, k)).collect();
            (k.to_string(), Stat::of(&v))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PipelineReport {
    pub config_hash: String,
    pub seeds: Vec<SeedOutcome>,
    pub aggregate: BTreeMap<String, Option<Stat>>,
}

impl PipelineReport {
    pub fn reports(&self) -> Vec<MetricsReport> {
        self.seeds.iter().map(|s| s.report.clone()).collect()
    }

    pub fn aggregate_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            config_hash: &'a str,
            seeds: Vec<u64>,
            metrics: &'a BTreeMap<String, Option<Stat>>,
        }
        serde_json::to_string_pretty(&Out {
            config_hash: &self.config_hash,
            seeds: self.seeds.iter().map(|s| s.seed).collect(),
            metrics: &self.aggregate,
        })
        .expect("aggregate serializes")
    }
}

/// Seed-level parallelism from `LMD_THREADS` (default 1).
pub fn thread_budget() -> usize {
    std::env::var("LMD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Runs `f` over `items` on up to `threads` workers; results keep input order.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = Mutex::new(0usize);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.min(items.len()) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                out.lock().unwrap()[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect()
}

#[derive(Serialize)]
struct SeedStatus {
    seed: u64,
    status: &'static str,
    error: Option<String>,
}

#[derive(Serialize)]
struct RunManifest {
    config_hash: String,
    complete: bool,
    seeds: Vec<SeedStatus>,
}

fn write_json(path: &Path, json: &str) -> Result<()> {
    write_atomic(path, json.as_bytes())
}

fn write_seed_outputs(dir: &Path, hash: &str, o: &SeedOutcome, has_stage2: bool) -> Result<()> {
    let sd = dir.join(format!("seed_{}", o.seed));
    std::fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
    write_json(&sd.join("report.json"), &o.report.to_json(o.seed, hash))?;
    write_json(
        &sd.join("stage1_trace.json"),
        &serde_json::to_string_pretty(&o.stage1_trace).expect("trace serializes"),
    )?;
    let ck = |stage: &str, state: &ModelState| Checkpoint {
        stage: stage.into(),
        seed: o.seed,
        config_hash: hash.into(),
        state: state.clone(),
    };
    save_checkpoint(&ck("stage1", &o.stage1_state), &sd.join("stage1.ckpt"))?;
    if let (true, Some(t)) = (has_stage2, &o.stage2_trace) {
        // Wall-clock goes to its own file so the trace stays reproducible.
        write_json(
            &sd.join("stage2_trace.json"),
            &serde_json::to_string_pretty(&(&t.iterations, t.selected)).expect("trace serializes"),
        )?;
        write_json(
            &sd.join("stage2_timing.json"),
            &serde_json::to_string(&t.elapsed_secs).expect("timing serializes"),
        )?;
        save_checkpoint(&ck("stage2", &o.final_state), &sd.join("stage2.ckpt"))?;
    }
    Ok(())
}

/// Runs every seed, writes per-seed reports, checkpoints and the aggregate
/// under `cfg.output` (when set). Any failure still writes `manifest.json`
/// with one status per seed, then returns the first error.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineReport> {
    run_pipeline_with(cfg, None)
}

pub fn run_pipeline_with(cfg: &RunConfig, cache: Option<&Stage1Cache>) -> Result<PipelineReport> {
    cfg.validate()?;
    let hash = cfg.config_hash();
    let results = par_map(&cfg.seeds, thread_budget(), |&s| run_seed(cfg, s, cache));
    if let Some(dir) = &cfg.output {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("config.txt"), cfg.to_kv_text().as_bytes())?;
        let has_stage2 = cfg.effective(cfg.seeds[0]).stage2.is_some();
        let mut statuses = Vec::new();
        for (s, r) in cfg.seeds.iter().zip(&results) {
            let status = match r {
                Ok(o) => match write_seed_outputs(dir, &hash, o, has_stage2) {
                    Ok(()) => SeedStatus { seed: *s, status: "ok", error: None },
                    Err(e) => SeedStatus { seed: *s, status: "failed", error: Some(e.to_string()) },
                },
                Err(e) => SeedStatus { seed: *s, status: "failed", error: Some(e.to_string()) },
            };
            statuses.push(status);
        }
        let manifest = RunManifest {
            config_hash: hash.clone(),
            complete: statuses.iter().all(|s| s.error.is_none()),
            seeds: statuses,
        };
        write_json(
            &dir.join("manifest.json"),
            &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
    }
    let seeds = results.into_iter().collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricsReport> = seeds.iter().map(|s| s.report.clone()).collect();
    let out = PipelineReport {
        config_hash: hash,
        aggregate: aggregate(&reports),
        seeds,
    };
    if let Some(dir) = &cfg.output {
        write_json(&dir.join("aggregate.json"), &out.aggregate_json())?;
    }
    Ok(out)
}

/// CE stage 1, then a fresh classifier fitted on class-balanced resampled
/// real features with the encoder frozen.
pub fn run_baseline_decoupling(cfg: &RunConfig) -> Result<PipelineReport> {
    let mut c = cfg.clone();
    c.ablations.clear();
    c.baseline = Some(Baseline::Decoupling);
    run_pipeline(&c)
}

pub const MATRIX_ROWS: [&str; 8] = [
    "full", "no_rrl", "no_icc", "no_vfc", "no_fdc", "ce", "rs", "decoupling",
];

/// The run configuration for one ablation-table row.
pub fn matrix_variant(base: &RunConfig, row: &str) -> Result<RunConfig> {
    let mut c = base.clone();
    c.ablations.clear();
    c.baseline = None;
    match row {
        "full" => {}
        "ce" | "rs" | "decoupling" => c.baseline = Some(row.parse()?),
        other => {
            c.ablations.insert(other.parse::<Ablation>()?);
        }
    }
    Ok(c)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    pub report: PipelineReport,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_json(&self) -> String {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|r| {
                let per_seed: Vec<serde_json::Value> = r
                    .report
                    .seeds
                    .iter()
                    .map(|s| {
                        let mut m = serde_json::Map::new();
                        m.insert("seed".into(), s.seed.into());
                        for k in AGGREGATE_KEYS {
                            m.insert(k.into(), metric(&s.report, k).into());
                        }
                        m.into()
                    })
                    .collect();
                serde_json::json!({
                    "name": r.name,
                    "config_hash": r.report.config_hash,
                    "aggregate": r.report.aggregate,
                    "per_seed": per_seed,
                })
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({ "rows": rows }))
            .expect("table serializes")
    }

    /// Fixed-width table of mean ± std per metric.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<12}", "variant");
        for k in AGGREGATE_KEYS {
            let _ = write!(s, " {k:>15}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<12}", r.name);
            for k in AGGREGATE_KEYS {
                let cell = match r.report.aggregate.get(k).copied().flatten() {
                    Some(Stat { mean, std: Some(sd), .. }) => format!("{mean:.4}±{sd:.4}"),
                    Some(Stat { mean, std: None, .. }) => format!("{mean:.4}"),
                    None => "-".into(),
                };
                let _ = write!(s, " {cell:>15}");
            }
            s.push('\n');
        }
        s
    }
}

/// Runs `rows` (a subset of [`MATRIX_ROWS`], in the given order) over the
/// shared seeds. Rows with identical stage-one settings train stage one once.
pub fn ablation_rows(cfg: &RunConfig, rows: &[&str]) -> Result<AblationTable> {
    let cache = Stage1Cache::default();
    let mut out = Vec::new();
    for &name in rows {
        let mut c = matrix_variant(cfg, name)?;
        c.output = cfg.output.as_ref().map(|d| d.join(name));
        log::info!("ablation row `{name}`");
        let report = run_pipeline_with(&c, Some(&cache))?;
        out.push(AblationRow {
            name: name.to_string(),
            report,
        });
    }
    let table = AblationTable { rows: out };
    if let Some(dir) = &cfg.output {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("ablation.json"), &table.to_json())?;
        write_atomic(&dir.join("ablation.txt"), table.to_text().as_bytes())?;
    }
    Ok(table)
}

pub fn ablation_matrix(cfg: &RunConfig) -> Result<AblationTable> {
    ablation_rows(cfg, &MATRIX_ROWS)
}

/// Encoder outputs and labels as CSV: `z0,…,z{C−1},label`.
pub fn export_features(state: &ModelState, ds: &Dataset, path: &Path) -> Result<()> {
    let z = state.features(&ds.features_f64(), ds.len())?;
    let c = state.arch.feature_dim;
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Validation(e.to_string());
    let mut header: Vec<String> = (0..c).map(|j| format!("z{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(io)?;
    for (row, label) in z.chunks(c).zip(&ds.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:.10e}")).collect();
        rec.push(label.to_string());
        w.write_record(&rec).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Reads a feature export back as `(features, dim, labels)`.
pub fn read_features(path: &Path) -> Result<(Vec<f64>, usize, Vec<usize>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let fmt = |line: usize, m: String| Error::Format {
        offset: line as u64,
        message: m,
    };
    let cols = r.headers().map_err(|e| fmt(0, e.to_string()))?.len();
    if cols < 2 {
        return Err(fmt(0, "feature export needs at least one feature column".into()));
    }
    let dim = cols - 1;
    let (mut feats, mut labels) = (Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| fmt(i + 1, e.to_string()))?;
        for j in 0..dim {
            feats.push(rec[j].parse().map_err(|e| fmt(i + 1, format!("column {j}: {e}")))?);
        }
        labels.push(rec[dim].parse().map_err(|e| fmt(i + 1, format!("label: {e}")))?);
    }
    Ok((feats, dim, labels))
}
