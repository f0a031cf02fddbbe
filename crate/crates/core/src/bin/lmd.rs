//! `lmd`: data generation, the two training stages, evaluation, ablations
//! and feature export.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
//! abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lmd_core::datagen::{load_dataset, save_dataset, split, synth_longtail, Dataset, LongTailSpec};
use lmd_core::harness::{
    ablation_matrix, ablation_rows, export_features, load_checkpoint, run_pipeline,
    save_checkpoint, Checkpoint, RunConfig,
};
use lmd_core::icc::{run_icc, MahalanobisMode};
use lmd_core::metrics::GroupSpec;
use lmd_core::rrl::train_stage1;
use lmd_core::{eval, seed, Error, Result};

#[derive(Parser)]
#[command(name = "lmd", version, about = "Two-stage long-tailed classification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set stage1.lr=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic long-tailed dataset.
    Gen {
        #[arg(long, default_value_t = 8)]
        classes: usize,
        /// Size of the largest class.
        #[arg(long, default_value_t = 1000)]
        n0: usize,
        /// Ratio of largest to smallest class size.
        #[arg(long, default_value_t = 100.0)]
        imbalance: f64,
        /// Informative dimensions.
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        noise_dims: usize,
        /// Distance between adjacent class means.
        #[arg(long, default_value_t = 2.5)]
        sep: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `.csv` for CSV, anything else for the binary format.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train stage one on a dataset file.
    Stage1 {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run seed (drives split, init and perturbations).
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run classifier calibration from a stage-one checkpoint.
    Stage2 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        r_virtual: Option<usize>,
        #[arg(long)]
        lambda_e: Option<f64>,
        /// `inverse` or `as_printed`.
        #[arg(long)]
        mode: Option<MahalanobisMode>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; prints the report JSON.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Class → group file; tertiles of training counts otherwise.
        #[arg(long)]
        groups: Option<PathBuf>,
        /// Evaluate the whole file instead of the seed's test split.
        #[arg(long)]
        all: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every seed of a configuration end to end.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full model, the four ablations and the three baselines over shared seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated subset of rows; all eight by default.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write encoder features and labels of a dataset as CSV.
    ExportFeatures {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn split_for(ds: &Dataset, cfg: &RunConfig, seed_value: u64) -> Result<(Dataset, Dataset, Dataset)> {
    split(ds, cfg.split, seed::derive(seed_value, &[seed::TAG_SPLIT]))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen {
            classes,
            n0,
            imbalance,
            dim,
            noise_dims,
            sep,
            seed,
            out,
        } => {
            let spec = LongTailSpec {
                num_classes: classes,
                head_count: n0,
                imbalance_factor: imbalance,
                feature_dim: dim,
                class_separation: sep,
                noise_dims,
                seed,
            };
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
            let ds = synth_longtail(&spec)?;
            save_dataset(&ds, &out)?;
            println!("{} rows, class counts {:?}", ds.len(), ds.class_counts);
        }
        Cmd::Stage1 {
            data,
            cfg,
            seed,
            out,
        } => {
            let cfg = cfg.load()?;
            let ds = load_dataset(&data)?;
            let (train, val, _) = split_for(&ds, &cfg, seed)?;
            let eff = cfg.effective(seed);
            let (state, trace) = train_stage1(&train, &val, &eff.stage1)?;
            create_dir(&out)?;
            let ck = Checkpoint {
                stage: "stage1".into(),
                seed,
                config_hash: cfg.config_hash(),
                state,
            };
            save_checkpoint(&ck, &out.join("stage1.ckpt"))?;
            let json = serde_json::to_string_pretty(&trace).expect("trace serializes");
            write_text(&out.join("stage1_trace.json"), &json)?;
            let best = &trace.epochs[trace.selected];
            println!("stage1: epoch {} selected, val BACC {:.4}", best.epoch, best.val_bacc);
        }
        Cmd::Stage2 {
            data,
            ckpt,
            cfg,
            iters,
            r_virtual,
            lambda_e,
            mode,
            seed,
            out,
        } => {
            let cfg = cfg.load()?;
            let ds = load_dataset(&data)?;
            let (train, val, _) = split_for(&ds, &cfg, seed)?;
            let stage1 = load_checkpoint(&ckpt)?;
            let mut c2 = cfg.effective(seed).stage2.unwrap_or_else(|| cfg.stage2.clone());
            if let Some(j) = iters {
                c2.iterations = j;
            }
            if let Some(r) = r_virtual {
                c2.r_virtual = r;
            }
            if let Some(l) = lambda_e {
                c2.lambda_e = l;
            }
            if let Some(m) = mode {
                c2.mahalanobis_mode = m;
            }
            c2.validate().map_err(|e| Error::Config(e.to_string()))?;
            let (state, trace) = run_icc(&train, &val, &stage1.state, &c2)?;
            create_dir(&out)?;
            let ck = Checkpoint {
                stage: "stage2".into(),
                seed,
                config_hash: cfg.config_hash(),
                state,
            };
            save_checkpoint(&ck, &out.join("stage2.ckpt"))?;
            let json = serde_json::to_string_pretty(&trace).expect("trace serializes");
            write_text(&out.join("stage2_trace.json"), &json)?;
            let best = &trace.iterations[trace.selected];
            println!(
                "stage2: iteration {} selected, val BACC {:.4}",
                best.iteration, best.val_bacc
            );
        }
        Cmd::Eval {
            data,
            ckpt,
            groups,
            all,
            cfg,
            seed,
            out,
        } => {
            let cfg = cfg.load()?;
            let ds = load_dataset(&data)?;
            let ck = load_checkpoint(&ckpt)?;
            let (train, _, test) = split_for(&ds, &cfg, seed)?;
            let groups = match groups {
                Some(p) => GroupSpec::load(&p, ds.num_classes)?,
                None => GroupSpec::from_train_counts(&train.class_counts),
            };
            let target = if all { &ds } else { &test };
            let report = eval::evaluate(&ck.state, target, &groups)?;
            let json = report.to_json(ck.seed, &ck.config_hash);
            match out {
                Some(p) => write_text(&p, &json)?,
                None => println!("{json}"),
            }
        }
        Cmd::Run { cfg, out } => {
            let mut cfg = cfg.load()?;
            if out.is_some() {
                cfg.output = out;
            }
            let report = run_pipeline(&cfg)?;
            println!("{}", report.aggregate_json());
        }
        Cmd::Ablate { cfg, rows, out } => {
            let mut cfg = cfg.load()?;
            if out.is_some() {
                cfg.output = out;
            }
            cfg.ablations.clear();
            cfg.baseline = None;
            cfg.validate()?;
            let table = if rows.is_empty() {
                ablation_matrix(&cfg)?
            } else {
                let names: Vec<&str> = rows.iter().map(String::as_str).collect();
                ablation_rows(&cfg, &names)?
            };
            print!("{}", table.to_text());
        }
        Cmd::ExportFeatures { data, ckpt, out } => {
            let ds = load_dataset(&data)?;
            let ck = load_checkpoint(&ckpt)?;
            export_features(&ck.state, &ds, &out)?;
            println!("{} rows written", ds.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
