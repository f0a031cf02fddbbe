//! Run configuration as flat `key = value` text.
//!
//! Lines are `section.key = value`; `#` starts a comment and blank lines are
//! ignored. Every key is optional and unknown keys are errors. The full
//! schema, with defaults, is what [`RunConfig::to_kv_text`] prints.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{LongTailSpec, SamplingMode, SplitRatios};
use crate::icc::{BankSource, IccConfig, MahalanobisMode};
use crate::rrl::{CeView, KlDirection, Stage1Config};
use crate::{seed, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoRrl,
    NoIcc,
    NoVfc,
    NoFdc,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Self::NoRrl, Self::NoIcc, Self::NoVfc, Self::NoFdc];

    pub fn name(self) -> &'static str {
        match self {
            Self::NoRrl => "no_rrl",
            Self::NoIcc => "no_icc",
            Self::NoVfc => "no_vfc",
            Self::NoFdc => "no_fdc",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Joint encoder/classifier cross-entropy on the natural stream.
    Ce,
    /// Joint cross-entropy on the class-balanced stream.
    Rs,
    /// Cross-entropy, then a fresh classifier on class-balanced resampled
    /// real features with the encoder frozen.
    Decoupling,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Self::Ce, Self::Rs, Self::Decoupling];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ce => "ce",
            Self::Rs => "rs",
            Self::Decoupling => "decoupling",
        }
    }
}

impl FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generated per run seed (the spec's own seed is replaced).
    Synthetic(LongTailSpec),
    /// One dataset file, split per run seed.
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    pub split: SplitRatios,
    pub stage1: Stage1Config,
    pub stage2: IccConfig,
    pub ablations: BTreeSet<Ablation>,
    pub baseline: Option<Baseline>,
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
    /// Explicit head/medium/tail assignment; tertiles of train counts otherwise.
    pub groups: Option<PathBuf>,
}

pub fn default_synthetic() -> LongTailSpec {
    LongTailSpec {
        num_classes: 8,
        head_count: 1000,
        imbalance_factor: 100.0,
        feature_dim: 8,
        class_separation: 2.5,
        noise_dims: 8,
        seed: 0,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic(default_synthetic()),
            split: SplitRatios::default(),
            stage1: Stage1Config::default(),
            stage2: IccConfig::default(),
            ablations: BTreeSet::new(),
            baseline: None,
            seeds: (1..=5).collect(),
            output: None,
            groups: None,
        }
    }
}

/// Stage settings actually used for one seed, after ablations and baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveConfig {
    pub seed: u64,
    pub stage1: Stage1Config,
    pub stage2: Option<IccConfig>,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true/false, got `{v}`"))),
    }
}

fn parse_opt_f64(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn opt_f64(v: Option<f64>) -> String {
    v.map_or("none".into(), |x| x.to_string())
}

fn join<T: Display>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn kl_name(k: KlDirection) -> &'static str {
    match k {
        KlDirection::StudentTeacher => "student_teacher",
        KlDirection::TeacherStudent => "teacher_student",
    }
}

fn bank_name(b: BankSource) -> &'static str {
    match b {
        BankSource::Virtual => "virtual",
        BankSource::ResampledReal => "resampled_real",
    }
}

impl RunConfig {
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_text(&text)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s1 = &mut self.stage1;
        let s2 = &mut self.stage2;
        match key {
            "seeds" => self.seeds = parse_list(key, v)?,
            "output" => self.output = (v != "none").then(|| PathBuf::from(v)),
            "groups" => self.groups = (v != "none").then(|| PathBuf::from(v)),
            "ablations" => {
                self.ablations = if v == "none" {
                    BTreeSet::new()
                } else {
                    parse_list(key, v)?.into_iter().collect()
                }
            }
            "baseline" => self.baseline = if v == "none" { None } else { Some(v.parse()?) },
            "data.source" => match v {
                "synthetic" => {
                    if !matches!(self.data, DataSource::Synthetic(_)) {
                        self.data = DataSource::Synthetic(default_synthetic());
                    }
                }
                "file" => {
                    if !matches!(self.data, DataSource::File(_)) {
                        self.data = DataSource::File(PathBuf::new());
                    }
                }
                _ => return Err(Error::Config(format!("`{key}`: synthetic or file, got `{v}`"))),
            },
            "data.path" => self.data = DataSource::File(PathBuf::from(v)),
            k if k.starts_with("data.") => {
                let DataSource::Synthetic(spec) = &mut self.data else {
                    return Err(Error::Config(format!("`{k}` needs data.source = synthetic")));
                };
                match k {
                    "data.num_classes" => spec.num_classes = parse(k, v)?,
                    "data.head_count" => spec.head_count = parse(k, v)?,
                    "data.imbalance_factor" => spec.imbalance_factor = parse(k, v)?,
                    "data.feature_dim" => spec.feature_dim = parse(k, v)?,
                    "data.class_separation" => spec.class_separation = parse(k, v)?,
                    "data.noise_dims" => spec.noise_dims = parse(k, v)?,
                    _ => return Err(Error::Config(format!("unknown key `{k}`"))),
                }
            }
            "split.train" => self.split.train = parse(key, v)?,
            "split.val" => self.split.val = parse(key, v)?,
            "split.test" => self.split.test = parse(key, v)?,
            "stage1.lambda1" => s1.lambda1 = parse(key, v)?,
            "stage1.epochs" => s1.epochs = parse(key, v)?,
            "stage1.batch_size" => s1.batch_size = parse(key, v)?,
            "stage1.lr" => s1.lr = parse(key, v)?,
            "stage1.max_grad_norm" => s1.max_grad_norm = parse_opt_f64(key, v)?,
            "stage1.ema_momentum" => s1.ema_momentum = parse(key, v)?,
            "stage1.kl_direction" => {
                s1.kl_direction = match v {
                    "student_teacher" => KlDirection::StudentTeacher,
                    "teacher_student" => KlDirection::TeacherStudent,
                    _ => return Err(Error::Config(format!("`{key}`: unknown direction `{v}`"))),
                }
            }
            "stage1.ce_view" => {
                s1.ce_view = match v {
                    "weak" => CeView::Weak,
                    "strong" => CeView::Strong,
                    _ => return Err(Error::Config(format!("`{key}`: weak or strong, got `{v}`"))),
                }
            }
            "stage1.use_teacher" => s1.use_teacher = parse_bool(key, v)?,
            "stage1.sampling" => s1.sampling = v.parse()?,
            "stage1.hidden" => s1.model.hidden = parse_list(key, v)?,
            "stage1.feature_dim" => s1.model.feature_dim = parse(key, v)?,
            "stage1.select_best_val" => s1.select_best_val = parse_bool(key, v)?,
            "stage1.gram_normalize" => s1.gram_normalize = parse_bool(key, v)?,
            "stage1.strong.sigma" => s1.perturb_strong.gauss_sigma = parse(key, v)?,
            "stage1.strong.mask" => s1.perturb_strong.mask_prob = parse(key, v)?,
            "stage1.strong.jitter" => s1.perturb_strong.scale_jitter = parse(key, v)?,
            "stage1.weak.sigma" => s1.perturb_weak.gauss_sigma = parse(key, v)?,
            "stage1.weak.mask" => s1.perturb_weak.mask_prob = parse(key, v)?,
            "stage1.weak.jitter" => s1.perturb_weak.scale_jitter = parse(key, v)?,
            "stage2.iterations" => s2.iterations = parse(key, v)?,
            "stage2.r_virtual" => s2.r_virtual = parse(key, v)?,
            "stage2.lambda_e" => s2.lambda_e = parse(key, v)?,
            "stage2.lr_classifier" => s2.lr_classifier = parse(key, v)?,
            "stage2.lr_encoder" => s2.lr_encoder = parse(key, v)?,
            "stage2.m_epochs" => s2.m_epochs = parse(key, v)?,
            "stage2.e_epochs" => s2.e_epochs = parse(key, v)?,
            "stage2.m_batch_size" => s2.m_batch_size = parse(key, v)?,
            "stage2.e_batch_size" => s2.e_batch_size = parse(key, v)?,
            "stage2.mahalanobis_mode" => s2.mahalanobis_mode = v.parse::<MahalanobisMode>()?,
            "stage2.e_step_sampling" => s2.e_step_sampling = v.parse()?,
            "stage2.m_step_stats_sampling" => s2.m_step_stats_sampling = v.parse()?,
            "stage2.moment_momentum" => s2.moment_momentum = parse(key, v)?,
            "stage2.ridge" => s2.ridge = parse(key, v)?,
            "stage2.bank" => {
                s2.bank = match v {
                    "virtual" => BankSource::Virtual,
                    "resampled_real" => BankSource::ResampledReal,
                    _ => return Err(Error::Config(format!("`{key}`: unknown bank `{v}`"))),
                }
            }
            "stage2.max_grad_norm" => s2.max_grad_norm = parse_opt_f64(key, v)?,
            "stage2.select_best_val" => s2.select_best_val = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, sorted; parses back to `self`.
    pub fn to_kv_text(&self) -> String {
        let mut m: BTreeMap<&str, String> = BTreeMap::new();
        m.insert("seeds", join(&self.seeds));
        m.insert(
            "output",
            self.output.as_ref().map_or("none".into(), |p| p.display().to_string()),
        );
        m.insert(
            "groups",
            self.groups.as_ref().map_or("none".into(), |p| p.display().to_string()),
        );
        m.insert(
            "ablations",
            if self.ablations.is_empty() {
                "none".into()
            } else {
                join(self.ablations.iter().map(|a| a.name()))
            },
        );
        m.insert("baseline", self.baseline.map_or("none", Baseline::name).into());
        match &self.data {
            DataSource::Synthetic(s) => {
                m.insert("data.source", "synthetic".into());
                m.insert("data.num_classes", s.num_classes.to_string());
                m.insert("data.head_count", s.head_count.to_string());
                m.insert("data.imbalance_factor", s.imbalance_factor.to_string());
                m.insert("data.feature_dim", s.feature_dim.to_string());
                m.insert("data.class_separation", s.class_separation.to_string());
                m.insert("data.noise_dims", s.noise_dims.to_string());
            }
            DataSource::File(p) => {
                m.insert("data.source", "file".into());
                m.insert("data.path", p.display().to_string());
            }
        }
        m.insert("split.train", self.split.train.to_string());
        m.insert("split.val", self.split.val.to_string());
        m.insert("split.test", self.split.test.to_string());
        let s1 = &self.stage1;
        m.insert("stage1.lambda1", s1.lambda1.to_string());
        m.insert("stage1.epochs", s1.epochs.to_string());
        m.insert("stage1.batch_size", s1.batch_size.to_string());
        m.insert("stage1.lr", s1.lr.to_string());
        m.insert("stage1.max_grad_norm", opt_f64(s1.max_grad_norm));
        m.insert("stage1.ema_momentum", s1.ema_momentum.to_string());
        m.insert("stage1.kl_direction", kl_name(s1.kl_direction).into());
        m.insert(
            "stage1.ce_view",
            match s1.ce_view {
                CeView::Weak => "weak",
                CeView::Strong => "strong",
            }
            .into(),
        );
        m.insert("stage1.use_teacher", s1.use_teacher.to_string());
        m.insert("stage1.sampling", s1.sampling.to_string());
        m.insert("stage1.hidden", join(&s1.model.hidden));
        m.insert("stage1.feature_dim", s1.model.feature_dim.to_string());
        m.insert("stage1.select_best_val", s1.select_best_val.to_string());
        m.insert("stage1.gram_normalize", s1.gram_normalize.to_string());
        m.insert("stage1.strong.sigma", s1.perturb_strong.gauss_sigma.to_string());
        m.insert("stage1.strong.mask", s1.perturb_strong.mask_prob.to_string());
        m.insert("stage1.strong.jitter", s1.perturb_strong.scale_jitter.to_string());
        m.insert("stage1.weak.sigma", s1.perturb_weak.gauss_sigma.to_string());
        m.insert("stage1.weak.mask", s1.perturb_weak.mask_prob.to_string());
        m.insert("stage1.weak.jitter", s1.perturb_weak.scale_jitter.to_string());
        let s2 = &self.stage2;
        m.insert("stage2.iterations", s2.iterations.to_string());
        m.insert("stage2.r_virtual", s2.r_virtual.to_string());
        m.insert("stage2.lambda_e", s2.lambda_e.to_string());
        m.insert("stage2.lr_classifier", s2.lr_classifier.to_string());
        m.insert("stage2.lr_encoder", s2.lr_encoder.to_string());
        m.insert("stage2.m_epochs", s2.m_epochs.to_string());
        m.insert("stage2.e_epochs", s2.e_epochs.to_string());
        m.insert("stage2.m_batch_size", s2.m_batch_size.to_string());
        m.insert("stage2.e_batch_size", s2.e_batch_size.to_string());
        m.insert("stage2.mahalanobis_mode", s2.mahalanobis_mode.to_string());
        m.insert("stage2.e_step_sampling", s2.e_step_sampling.to_string());
        m.insert("stage2.m_step_stats_sampling", s2.m_step_stats_sampling.to_string());
        m.insert("stage2.moment_momentum", s2.moment_momentum.to_string());
        m.insert("stage2.ridge", s2.ridge.to_string());
        m.insert("stage2.bank", bank_name(s2.bank).into());
        m.insert("stage2.max_grad_norm", opt_f64(s2.max_grad_norm));
        m.insert("stage2.select_best_val", s2.select_best_val.to_string());
        m.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.baseline.is_some() && !self.ablations.is_empty() {
            return Err(Error::Config(
                "ablations and a baseline are mutually exclusive".into(),
            ));
        }
        match &self.data {
            DataSource::Synthetic(s) => s.validate().map_err(|e| Error::Config(e.to_string()))?,
            DataSource::File(p) if p.as_os_str().is_empty() => {
                return Err(Error::Config("data.source = file needs data.path".into()))
            }
            DataSource::File(_) => {}
        }
        self.split.validate().map_err(|e| Error::Config(e.to_string()))?;
        for s in &self.seeds {
            let eff = self.effective(*s);
            eff.stage1.validate()?;
            if let Some(c2) = &eff.stage2 {
                c2.validate().map_err(|e| match e {
                    Error::Validation(m) => Error::Config(m),
                    other => other,
                })?;
            }
        }
        Ok(())
    }

    /// Stage settings for `seed` with ablation and baseline switches applied.
    pub fn effective(&self, seed_value: u64) -> EffectiveConfig {
        let mut s1 = self.stage1.clone();
        s1.reseed(seed_value);
        let mut s2 = self.stage2.clone();
        s2.seed = seed::derive(seed_value, &[seed::TAG_STAGE2]);
        let ce_only = |s1: &mut Stage1Config| {
            s1.lambda1 = 0.0;
            s1.use_teacher = false;
        };
        let mut stage2 = Some(s2);
        match self.baseline {
            Some(Baseline::Ce) => {
                ce_only(&mut s1);
                s1.sampling = SamplingMode::Uniform;
                stage2 = None;
            }
            Some(Baseline::Rs) => {
                ce_only(&mut s1);
                s1.sampling = SamplingMode::ClassBalanced;
                stage2 = None;
            }
            Some(Baseline::Decoupling) => {
                ce_only(&mut s1);
                s1.sampling = SamplingMode::Uniform;
                if let Some(c) = stage2.as_mut() {
                    c.iterations = 1;
                    c.e_epochs = 0;
                    c.lambda_e = 0.0;
                    c.bank = BankSource::ResampledReal;
                }
            }
            None => {}
        }
        for a in &self.ablations {
            match a {
                Ablation::NoRrl => ce_only(&mut s1),
                Ablation::NoIcc => stage2 = None,
                Ablation::NoVfc => {
                    if let Some(c) = stage2.as_mut() {
                        c.bank = BankSource::ResampledReal;
                    }
                }
                Ablation::NoFdc => {
                    if let Some(c) = stage2.as_mut() {
                        c.lambda_e = 0.0;
                    }
                }
            }
        }
        EffectiveConfig {
            seed: seed_value,
            stage1: s1,
            stage2,
        }
    }

    /// Short hash of everything except seeds and output location.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        c.output = None;
        let digest = Sha256::digest(c.to_kv_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, serde_json::Value>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&p, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

/// Flattened keys whose values differ between two effective configs.
pub fn config_diff(a: &EffectiveConfig, b: &EffectiveConfig) -> Vec<String> {
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    flatten("", &serde_json::to_value(a).expect("config serializes"), &mut fa);
    flatten("", &serde_json::to_value(b).expect("config serializes"), &mut fb);
    let keys: BTreeSet<&String> = fa.keys().chain(fb.keys()).collect();
    keys.into_iter()
        .filter(|k| fa.get(*k) != fb.get(*k))
        .cloned()
        .collect()
}
