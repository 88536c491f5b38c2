//! Command-line front end.
//!
//! Settings come from an optional flat `key = value` file (`--config`),
//! overridden by `--set key=value` pairs and then by dedicated flags.
//! Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use crate::data::{stratified_group_kfold, synth_generate, FoldAssignment, Manifest, SynthConfig};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, param_breakdown, save_checkpoint, MgNetConfig};
use crate::train::{cross_validate, evaluate, load_samples, train_monitored, TrainConfig};

/// Reference parameter count for a multigrid model of this shape.
pub const REFERENCE_MGNET_PARAMS: usize = 6_202_754;
/// Reference parameter count for a 3D ResNet baseline.
pub const REFERENCE_RESNET_PARAMS: usize = 8_288_290;

#[derive(Debug, Parser)]
#[command(
    name = "mgnet3d",
    version,
    about = "3D multigrid CNN: synthetic data, splits, training, evaluation"
)]
pub struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override any configuration key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Manifest CSV (subject_id,scan_id,label,path).
    #[arg(long, global = true, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Fold assignment CSV written by `split`.
    #[arg(long, global = true, value_name = "PATH")]
    pub folds: Option<PathBuf>,
    /// Held-out fold index.
    #[arg(long, global = true, value_name = "N")]
    pub fold: Option<usize>,
    /// Number of folds.
    #[arg(long, global = true, value_name = "N")]
    pub k: Option<usize>,
    /// Seed for parameter initialisation.
    #[arg(long = "seed-model", global = true, value_name = "N")]
    pub seed_model: Option<u64>,
    /// Seed for mini-batch shuffling.
    #[arg(long = "seed-train", global = true, value_name = "N")]
    pub seed_train: Option<u64>,
    /// Seed for fold assignment.
    #[arg(long = "seed-split", global = true, value_name = "N")]
    pub seed_split: Option<u64>,
    /// MGN3 checkpoint to read.
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Disable the mean filter after each coarse-grid transfer.
    #[arg(long = "no-avg-pool", global = true)]
    pub no_avg_pool: bool,
    /// Worker threads (0 = one per core). Results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-class dataset (manifest + VOL3 volumes).
    Synth,
    /// Assign subjects to stratified, subject-grouped folds.
    Split,
    /// Train on every fold except `--fold` and save a checkpoint.
    Train,
    /// Evaluate a checkpoint on a manifest (optionally one fold of it).
    Eval,
    /// Print the exact parameter count and its breakdown.
    Params,
    /// Run k-fold cross-validation.
    Cv,
}

const KEYS: &[&str] = &[
    // model
    "num_grids",
    "smoothing_iters",
    "feature_channels",
    "data_channels",
    "input_channels",
    "num_classes",
    "use_avg_pool",
    "share_smoother",
    "channel_norm",
    // training
    "learning_rate",
    "lr_schedule",
    "batch_size",
    "epochs",
    "log_every",
    "normalize",
    // seeds
    "seed_model",
    "seed_train",
    "seed_split",
    // run
    "k",
    "fold",
    "threads",
    "manifest",
    "folds",
    "checkpoint",
    "out",
    // synthetic data
    "subjects_per_class",
    "scans_per_subject",
    "size",
    "effect_size",
    "noise_std",
    "synth_seed",
];

/// Merged configuration, keyed by the names in `KEYS`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1))
            })?;
            s.set(k.trim(), v.trim())?;
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown configuration key `{key}`")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn from_cli(cli: &Cli) -> Result<Self> {
        let mut s = match &cli.config {
            Some(path) => Self::parse(&fs::read_to_string(path)?)?,
            None => Self::default(),
        };
        for pair in &cli.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{pair}`")))?;
            s.set(k.trim(), v.trim())?;
        }
        let paths = [
            ("manifest", &cli.manifest),
            ("folds", &cli.folds),
            ("checkpoint", &cli.checkpoint),
            ("out", &cli.out),
        ];
        for (key, value) in paths {
            if let Some(p) = value {
                s.set(key, p.display().to_string())?;
            }
        }
        let numbers = [
            ("fold", cli.fold.map(|v| v as u64)),
            ("k", cli.k.map(|v| v as u64)),
            ("seed_model", cli.seed_model),
            ("seed_train", cli.seed_train),
            ("seed_split", cli.seed_split),
            ("threads", cli.threads.map(|v| v as u64)),
        ];
        for (key, value) in numbers {
            if let Some(v) = value {
                s.set(key, v.to_string())?;
            }
        }
        if cli.no_avg_pool {
            s.set("use_avg_pool", "false")?;
        }
        Ok(s)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(v) => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }

    fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| Error::Config(format!("`{key}` is required (flag --{key})")))
    }

    pub fn model_config(&self) -> Result<MgNetConfig> {
        let d = MgNetConfig::default();
        let num_grids = self.get_or("num_grids", d.num_grids)?;
        let smoothing_iters = match self.raw("smoothing_iters") {
            None => vec![2; num_grids],
            Some(v) => {
                let parts = v
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Config(format!("invalid smoothing_iters `{v}`")))?;
                if parts.len() == 1 {
                    vec![parts[0]; num_grids]
                } else {
                    parts
                }
            }
        };
        let cfg = MgNetConfig {
            num_grids,
            smoothing_iters,
            feature_channels: self.get_or("feature_channels", d.feature_channels)?,
            data_channels: self.get_or("data_channels", d.data_channels)?,
            input_channels: self.get_or("input_channels", d.input_channels)?,
            num_classes: self.get_or("num_classes", d.num_classes)?,
            use_avg_pool: self.bool_or("use_avg_pool", d.use_avg_pool)?,
            share_smoother: self.bool_or("share_smoother", d.share_smoother)?,
            channel_norm: self.bool_or("channel_norm", d.channel_norm)?,
            seed: self.get_or("seed_model", d.seed)?,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            learning_rate: self.get_or("learning_rate", d.learning_rate)?,
            lr_schedule: self.get_or("lr_schedule", d.lr_schedule)?,
            batch_size: self.get_or("batch_size", d.batch_size)?,
            epochs: self.get_or("epochs", d.epochs)?,
            seed: self.get_or("seed_train", d.seed)?,
            log_every: self.get_or("log_every", d.log_every)?,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    fn synth_config(&self) -> Result<SynthConfig> {
        let d = SynthConfig::cube(20, 2, 16);
        let geometry = match self.raw("size") {
            None => d.geometry,
            Some(v) => parse_size(v)?,
        };
        Ok(SynthConfig {
            subjects_per_class: self.get_or("subjects_per_class", d.subjects_per_class)?,
            scans_per_subject: self.get_or("scans_per_subject", d.scans_per_subject)?,
            geometry,
            effect_size: self.get_or("effect_size", d.effect_size)?,
            noise_std: self.get_or("noise_std", d.noise_std)?,
            seed: self.get_or("synth_seed", d.seed)?,
        })
    }

    fn seeds(&self) -> Result<[u64; 3]> {
        Ok([
            self.get_or("seed_model", 0)?,
            self.get_or("seed_train", 0)?,
            self.get_or("seed_split", 0)?,
        ])
    }
}

/// `N` (cube) or `DxHxW`, single channel.
fn parse_size(v: &str) -> Result<[usize; 4]> {
    let dims = v
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Config(format!("invalid size `{v}`")))?;
    match *dims.as_slice() {
        [n] => Ok([1, n, n, n]),
        [d, h, w] => Ok([1, d, h, w]),
        _ => Err(Error::Config(format!("size must be N or DxHxW, got `{v}`"))),
    }
}

fn geometry_str(g: &[usize]) -> String {
    g.iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn write_seeds(out: &mut dyn Write, s: &Settings) -> Result<()> {
    let [m, t, sp] = s.seeds()?;
    writeln!(out, "seed_model={m}")?;
    writeln!(out, "seed_train={t}")?;
    writeln!(out, "seed_split={sp}")?;
    Ok(())
}

/// Runs a parsed command line, writing the report to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let settings = Settings::from_cli(cli)?;
    let threads: usize = settings.get_or("threads", 0)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let mut buf = Vec::new();
    let result = pool.install(|| match cli.command {
        Command::Synth => cmd_synth(&settings, &mut buf),
        Command::Split => cmd_split(&settings, &mut buf),
        Command::Train => cmd_train(&settings, &mut buf),
        Command::Eval => cmd_eval(&settings, &mut buf),
        Command::Params => cmd_params(&settings, &mut buf),
        Command::Cv => cmd_cv(&settings, &mut buf),
    });
    out.write_all(&buf)?;
    result
}

pub fn cmd_synth(s: &Settings, out: &mut dyn Write) -> Result<()> {
    let dir = s.require_path("out")?;
    let cfg = s.synth_config()?;
    let manifest = synth_generate(&cfg, &dir)?;
    writeln!(out, "manifest={}", dir.join("manifest.csv").display())?;
    writeln!(out, "subjects={}", 2 * cfg.subjects_per_class)?;
    writeln!(out, "scans={}", manifest.records.len())?;
    writeln!(out, "geometry={}", geometry_str(&cfg.geometry))?;
    writeln!(out, "effect_size={}", cfg.effect_size)?;
    writeln!(out, "noise_std={}", cfg.noise_std)?;
    writeln!(out, "synth_seed={}", cfg.seed)?;
    Ok(())
}

fn folds_output(s: &Settings) -> Result<PathBuf> {
    if let Some(p) = s.path("folds") {
        return Ok(p);
    }
    Ok(s.require_path("out")?.join("folds.csv"))
}

pub fn cmd_split(s: &Settings, out: &mut dyn Write) -> Result<()> {
    let manifest = Manifest::load(s.require_path("manifest")?)?;
    let k = s.get_or("k", 10)?;
    let seed = s.get_or("seed_split", 0)?;
    let folds = stratified_group_kfold(&manifest, k, seed)?;
    let path = folds_output(s)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    folds.save(&path)?;
    writeln!(out, "seed_split={seed}")?;
    writeln!(out, "folds={}", path.display())?;
    writeln!(out, "k={k}")?;
    let subjects = manifest.subjects();
    for f in 0..k {
        let members = folds.subjects_in(f);
        let pos = members.iter().filter(|m| subjects[*m] == 1).count();
        writeln!(
            out,
            "fold={f} subjects={} positive={pos} negative={}",
            members.len(),
            members.len() - pos
        )?;
    }
    Ok(())
}

fn load_folds(s: &Settings, manifest: &Manifest) -> Result<FoldAssignment> {
    match s.path("folds") {
        Some(p) => FoldAssignment::load(p),
        None => stratified_group_kfold(manifest, s.get_or("k", 10)?, s.get_or("seed_split", 0)?),
    }
}

pub fn cmd_train(s: &Settings, out: &mut dyn Write) -> Result<()> {
    let manifest = Manifest::load(s.require_path("manifest")?)?;
    let model = s.model_config()?;
    let cfg = s.train_config()?;
    let normalize = s.bool_or("normalize", true)?;
    let dir = s.require_path("out")?;
    fs::create_dir_all(&dir)?;
    let checkpoint = s
        .path("checkpoint")
        .unwrap_or_else(|| dir.join("model.mgn3"));

    let held_out = s.get::<usize>("fold")?;
    let records: Vec<_> = match held_out {
        Some(fold) => load_folds(s, &manifest)?.split(&manifest, fold)?.0,
        None => manifest.records.iter().collect(),
    };
    let samples = load_samples(records, normalize)?;
    let (params, history) = train_monitored(&model, &samples, &cfg, Some(&samples))?;
    save_checkpoint(&params, &checkpoint)?;

    fs::write(dir.join("history.log"), history.log(true))?;
    let mut summary = Vec::new();
    write_seeds(&mut summary, s)?;
    writeln!(
        summary,
        "held_out_fold={}",
        held_out.map_or("none".into(), |f| f.to_string())
    )?;
    writeln!(summary, "train_scans={}", samples.len())?;
    writeln!(summary, "epochs={}", cfg.epochs)?;
    writeln!(summary, "learning_rate={}", cfg.learning_rate)?;
    writeln!(summary, "lr_schedule={}", cfg.lr_schedule)?;
    writeln!(summary, "batch_size={}", cfg.batch_size)?;
    if let Some(last) = history.epochs.last() {
        writeln!(summary, "final_loss={:.6}", last.mean_loss)?;
    }
    writeln!(summary, "checkpoint={}", checkpoint.display())?;
    fs::write(dir.join("summary.txt"), &summary)?;

    out.write_all(&summary)?;
    out.write_all(history.log(false).as_bytes())?;
    Ok(())
}

pub fn cmd_eval(s: &Settings, out: &mut dyn Write) -> Result<()> {
    let params = load_checkpoint(s.require_path("checkpoint")?)?;
    let manifest = Manifest::load(s.require_path("manifest")?)?;
    if manifest.geometry[0] != params.config.input_channels {
        return Err(Error::Shape(format!(
            "model expects input geometry [{}, D, H, W], manifest volumes are [{}]",
            params.config.input_channels,
            geometry_str(&manifest.geometry).replace('x', ", ")
        )));
    }
    let records: Vec<_> = match s.get::<usize>("fold")? {
        Some(fold) => load_folds(s, &manifest)?.split(&manifest, fold)?.1,
        None => manifest.records.iter().collect(),
    };
    let samples = load_samples(records, s.bool_or("normalize", true)?)?;
    let metrics = evaluate(&params, &samples)?;
    writeln!(out, "scans={}", samples.len())?;
    writeln!(out, "{metrics}")?;
    Ok(())
}

pub fn cmd_params(s: &Settings, out: &mut dyn Write) -> Result<()> {
    let model = s.model_config()?;
    let b = param_breakdown(&model)?;
    writeln!(out, "num_grids={}", model.num_grids)?;
    writeln!(
        out,
        "smoothing_iters={}",
        model
            .smoothing_iters
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    )?;
    writeln!(out, "feature_channels={}", model.feature_channels)?;
    writeln!(out, "data_channels={}", model.data_channels)?;
    writeln!(out, "share_smoother={}", model.share_smoother)?;
    for (name, n) in &b.entries {
        writeln!(out, "{name}={n}")?;
    }
    for (l, n) in b.level_totals.iter().enumerate() {
        writeln!(out, "level{}.total={n}", l + 1)?;
    }
    writeln!(out, "total={}", b.total)?;
    let delta = |r: usize| b.total as i64 - r as i64;
    writeln!(
        out,
        "reference_mgnet={REFERENCE_MGNET_PARAMS} delta={:+}",
        delta(REFERENCE_MGNET_PARAMS)
    )?;
    writeln!(
        out,
        "reference_resnet={REFERENCE_RESNET_PARAMS} delta={:+}",
        delta(REFERENCE_RESNET_PARAMS)
    )?;
    writeln!(
        out,
        "below_reference_resnet={}",
        b.total < REFERENCE_RESNET_PARAMS
    )?;
    Ok(())
}

pub fn cmd_cv(s: &Settings, out: &mut dyn Write) -> Result<()> {
    let manifest = Manifest::load(s.require_path("manifest")?)?;
    let model = s.model_config()?;
    let cfg = s.train_config()?;
    let folds = load_folds(s, &manifest)?;
    let report = cross_validate(
        &model,
        &manifest,
        &folds,
        &cfg,
        s.bool_or("normalize", true)?,
    )?;

    let mut text = Vec::new();
    write_seeds(&mut text, s)?;
    writeln!(text, "use_avg_pool={}", model.use_avg_pool)?;
    writeln!(text)?;
    write!(text, "{report}")?;
    if let Some(dir) = s.path("out") {
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("cv_report.txt"), &text)?;
        for f in &report.folds {
            fs::write(dir.join(format!("fold{}.log", f.fold)), f.history.log(true))?;
        }
    }
    out.write_all(&text)?;
    Ok(())
}

/// Parses `key=value` report lines into a map (later keys win).
pub fn parse_report(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}
