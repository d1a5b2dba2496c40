use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attack::{AttackConfig, InclusionPolicy, LabelPolicy, LossKind};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::nn::ModelConfig;
use crate::taf::{TafConfig, TrainConfig};

/// Resolved configuration of one command. Budgets are kept in 1/255 pixel
/// units, as written on the command line and in config files.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SyntheticSpec,
    pub data_dir: Option<PathBuf>,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub shift_div: usize,
    pub train: TrainConfig,
    pub taf: TafConfig,
    pub epsilon_255: f64,
    pub beta_255: f64,
    pub checkpoint: Option<PathBuf>,
    pub compare_checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub severities: Vec<u8>,
    pub corruption_seed: u64,
    pub ablate_tables: Vec<String>,
    pub ablate_baseline: bool,
    pub dump_clips: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let taf = TafConfig::default();
        RunConfig {
            seed: 0,
            data: SyntheticSpec::default(),
            data_dir: None,
            widths: model.widths,
            strides: model.strides,
            shift_div: model.shift_div,
            train: TrainConfig::default(),
            epsilon_255: taf.attack.epsilon * 255.0,
            beta_255: taf.attack.beta * 255.0,
            taf,
            checkpoint: None,
            compare_checkpoint: None,
            out: PathBuf::from("runs/latest"),
            severities: vec![3],
            corruption_seed: 0,
            ablate_tables: crate::taf::ABLATION_TABLES.iter().map(|s| s.to_string()).collect(),
            ablate_baseline: true,
            dump_clips: 4,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{v}` for key `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(key, x)).collect()
}

fn list<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.trim().is_empty()).then(|| PathBuf::from(v.trim()))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one dotted key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.data;
        let t = &mut self.train;
        let f = &mut self.taf;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.dir" => self.data_dir = opt_path(v),
            "data.n_classes" => d.n_classes = parse(key, v)?,
            "data.frames" => d.frames = parse(key, v)?,
            "data.height" => d.height = parse(key, v)?,
            "data.width" => d.width = parse(key, v)?,
            "data.sprite_size" => d.sprite_size = parse(key, v)?,
            "data.split_frame" => d.split_frame = parse(key, v)?,
            "data.speed" => d.speed = parse(key, v)?,
            "data.noise" => d.noise = parse(key, v)?,
            "data.contrast_min" => d.contrast_min = parse(key, v)?,
            "data.contrast_max" => d.contrast_max = parse(key, v)?,
            "data.clutter" => d.clutter = parse(key, v)?,
            "data.train_size" => d.train_size = parse(key, v)?,
            "data.val_size" => d.val_size = parse(key, v)?,
            "data.seed" => d.seed = parse(key, v)?,
            "model.widths" => self.widths = parse_list(key, v)?,
            "model.strides" => self.strides = parse_list(key, v)?,
            "model.shift_div" => self.shift_div = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.lr" => t.lr.initial = parse(key, v)?,
            "train.lr_factor" => t.lr.factor = parse(key, v)?,
            "train.lr_decay_every" => t.lr.decay_every = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.momentum" => t.momentum = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "taf.alpha" => f.alpha = parse(key, v)?,
            "taf.epochs" => f.train.epochs = parse(key, v)?,
            "taf.lr" => f.train.lr.initial = parse(key, v)?,
            "taf.lr_factor" => f.train.lr.factor = parse(key, v)?,
            "taf.lr_decay_every" => f.train.lr.decay_every = parse(key, v)?,
            "taf.batch_size" => f.train.batch_size = parse(key, v)?,
            "taf.momentum" => f.train.momentum = parse(key, v)?,
            "taf.weight_decay" => f.train.weight_decay = parse(key, v)?,
            "attack.epsilon" => self.epsilon_255 = parse(key, v)?,
            "attack.beta" => self.beta_255 = parse(key, v)?,
            "attack.steps" => f.attack.steps = parse(key, v)?,
            "attack.frames_n" => f.attack.n_frames = parse(key, v)?,
            "attack.label_policy" => f.attack.label_policy = v.trim().parse::<LabelPolicy>()?,
            "attack.inclusion" => f.attack.inclusion = v.trim().parse::<InclusionPolicy>()?,
            "attack.loss" => f.attack.loss = v.trim().parse::<LossKind>()?,
            "attack.seed" => f.attack.seed = parse(key, v)?,
            "run.checkpoint" => self.checkpoint = opt_path(v),
            "run.compare_checkpoint" => self.compare_checkpoint = opt_path(v),
            "run.out" => self.out = PathBuf::from(v.trim()),
            "eval.severities" => self.severities = parse_list(key, v)?,
            "eval.corruption_seed" => self.corruption_seed = parse(key, v)?,
            "ablate.tables" => self.ablate_tables = parse_list(key, v)?,
            "ablate.baseline" => self.ablate_baseline = parse(key, v)?,
            "dump.clips" => self.dump_clips = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (d, t, f) = (&self.data, &self.train, &self.taf);
        vec![
            ("seed", self.seed.to_string()),
            ("data.dir", show_path(&self.data_dir)),
            ("data.n_classes", d.n_classes.to_string()),
            ("data.frames", d.frames.to_string()),
            ("data.height", d.height.to_string()),
            ("data.width", d.width.to_string()),
            ("data.sprite_size", d.sprite_size.to_string()),
            ("data.split_frame", d.split_frame.to_string()),
            ("data.speed", d.speed.to_string()),
            ("data.noise", d.noise.to_string()),
            ("data.contrast_min", d.contrast_min.to_string()),
            ("data.contrast_max", d.contrast_max.to_string()),
            ("data.clutter", d.clutter.to_string()),
            ("data.train_size", d.train_size.to_string()),
            ("data.val_size", d.val_size.to_string()),
            ("data.seed", d.seed.to_string()),
            ("model.widths", list(&self.widths)),
            ("model.strides", list(&self.strides)),
            ("model.shift_div", self.shift_div.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.lr", t.lr.initial.to_string()),
            ("train.lr_factor", t.lr.factor.to_string()),
            ("train.lr_decay_every", t.lr.decay_every.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("taf.alpha", f.alpha.to_string()),
            ("taf.epochs", f.train.epochs.to_string()),
            ("taf.lr", f.train.lr.initial.to_string()),
            ("taf.lr_factor", f.train.lr.factor.to_string()),
            ("taf.lr_decay_every", f.train.lr.decay_every.to_string()),
            ("taf.batch_size", f.train.batch_size.to_string()),
            ("taf.momentum", f.train.momentum.to_string()),
            ("taf.weight_decay", f.train.weight_decay.to_string()),
            ("attack.epsilon", self.epsilon_255.to_string()),
            ("attack.beta", self.beta_255.to_string()),
            ("attack.steps", f.attack.steps.to_string()),
            ("attack.frames_n", f.attack.n_frames.to_string()),
            ("attack.label_policy", f.attack.label_policy.to_string()),
            ("attack.inclusion", f.attack.inclusion.to_string()),
            ("attack.loss", f.attack.loss.to_string()),
            ("attack.seed", f.attack.seed.to_string()),
            ("run.checkpoint", show_path(&self.checkpoint)),
            ("run.compare_checkpoint", show_path(&self.compare_checkpoint)),
            ("run.out", self.out.display().to_string()),
            ("eval.severities", list(&self.severities)),
            ("eval.corruption_seed", self.corruption_seed.to_string()),
            ("ablate.tables", self.ablate_tables.join(",")),
            ("ablate.baseline", self.ablate_baseline.to_string()),
            ("dump.clips", self.dump_clips.to_string()),
        ]
    }

    /// `key=value` lines that [`parse_config_text`] reads back unchanged.
    pub fn echo(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            frames: self.data.frames,
            channels: 1,
            height: self.data.height,
            width: self.data.width,
            classes: self.data.n_classes,
            widths: self.widths.clone(),
            strides: self.strides.clone(),
            shift_div: self.shift_div,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    /// Fine-tune config with budgets converted to pixel units.
    pub fn taf_config(&self) -> TafConfig {
        let mut c = self.taf.clone();
        c.train.seed = self.seed;
        c.attack = AttackConfig { epsilon: self.epsilon_255 / 255.0, beta: self.beta_255 / 255.0, ..c.attack };
        c
    }
}

/// Applies `key=value` lines (blank lines and `#` comments skipped).
pub fn apply_config_text(cfg: &mut RunConfig, text: &str) -> Result<()> {
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(())
}

pub fn parse_config_text(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    apply_config_text(&mut cfg, text)?;
    Ok(cfg)
}

fn flag_key(flag: &str) -> Option<&str> {
    Some(match flag {
        "seed" => "seed",
        "alpha" => "taf.alpha",
        "epsilon" => "attack.epsilon",
        "beta" => "attack.beta",
        "steps" => "attack.steps",
        "frames-n" => "attack.frames_n",
        "inclusion" => "attack.inclusion",
        "loss" => "attack.loss",
        "out" => "run.out",
        "checkpoint" => "run.checkpoint",
        "compare" => "run.compare_checkpoint",
        "data" => "data.dir",
        _ => return None,
    })
}

/// Defaults, then the `--config` file, then every other `--flag value`.
pub fn parse_config(args: &[String]) -> Result<RunConfig> {
    let mut pairs = Vec::new();
    let mut file: Option<&Path> = None;
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let name = a
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("unexpected argument `{a}`")))?;
        let value = it
            .next()
            .ok_or_else(|| Error::Config(format!("flag `{a}` needs a value")))?;
        if name == "config" {
            file = Some(Path::new(value));
        } else {
            let key = flag_key(name).unwrap_or(name);
            pairs.push((key.to_string(), value.clone()));
        }
    }
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        apply_config_text(&mut cfg, &text)?;
    }
    for (k, v) in pairs {
        cfg.set(&k, &v)?;
    }
    Ok(cfg)
}
