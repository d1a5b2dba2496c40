//! Command-line surface: `taf <command> [--key value]...`.
//!
//! Every command writes the resolved `config.txt` and the probe-set
//! `probe.txt` into its output directory next to its own artifacts.

pub mod config;
pub mod render;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{apply_config_text, parse_config, parse_config_text, RunConfig};

use crate::attack::{attack_batch, InclusionPolicy};
use crate::cam::{compute_cam, CamStack};
use crate::data::{generate_dataset, load_dataset, save_dataset, Batch, CorruptionKind, CorruptionSpec, Dataset, VideoClip};
use crate::error::{Error, Result};
use crate::nn::Checkpoint;
use crate::taf::{
    ablation_grid, ablation_sweep, ablation_tsv, evaluate, finetune_taf, metrics_csv, probe_clips, train_baseline,
    RunLog, TrainState,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Finetune,
    Eval,
    EvalCorrupt,
    Ablate,
    CamDump,
    AttackDump,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::GenData,
        Command::Train,
        Command::Finetune,
        Command::Eval,
        Command::EvalCorrupt,
        Command::Ablate,
        Command::CamDump,
        Command::AttackDump,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::EvalCorrupt => "eval-corrupt",
            Command::Ablate => "ablate",
            Command::CamDump => "cam-dump",
            Command::AttackDump => "attack-dump",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown command `{s}`")))
    }
}

/// What a command produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    /// Human-readable result, printed by the binary.
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
}

pub fn usage() -> String {
    let names: Vec<&str> = Command::ALL.iter().map(|c| c.name()).collect();
    format!(
        "usage: taf <{}> [--config FILE] [--key value]...\n\
         flags: --seed --alpha --epsilon --beta --steps --frames-n --inclusion --loss\n\
         \x20      --out --checkpoint --compare --data, or any dotted config key",
        names.join("|")
    )
}

/// Parses `args` (command first) and runs it.
pub fn run(args: &[String]) -> Result<Outcome> {
    let (cmd, rest) = args
        .split_first()
        .ok_or_else(|| Error::Config("missing command".into()))?;
    let cmd: Command = cmd.parse()?;
    let cfg = parse_config(rest)?;
    run_command(cmd, &cfg)
}

pub fn run_command(cmd: Command, cfg: &RunConfig) -> Result<Outcome> {
    match cmd {
        Command::GenData => cmd_gen_data(cfg),
        Command::Train => cmd_train(cfg),
        Command::Finetune => cmd_finetune(cfg),
        Command::Eval => cmd_eval(cfg),
        Command::EvalCorrupt => cmd_eval_corrupt(cfg),
        Command::Ablate => cmd_ablate(cfg),
        Command::CamDump => cmd_cam_dump(cfg),
        Command::AttackDump => cmd_attack_dump(cfg),
    }
}

struct RunDir {
    root: PathBuf,
    artifacts: Vec<PathBuf>,
}

impl RunDir {
    fn create(cfg: &RunConfig) -> Result<Self> {
        let root = cfg.out.clone();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let mut dir = RunDir { root, artifacts: Vec::new() };
        dir.write("config.txt", cfg.echo())?;
        Ok(dir)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        self.artifacts.push(p);
        Ok(())
    }

    fn record(&mut self, path: PathBuf) {
        self.artifacts.push(path);
    }

    fn write_probe(&mut self, data: &Dataset) -> Result<()> {
        let ids: String = probe_clips(data).iter().map(|c| format!("{}\n", c.clip_id)).collect();
        self.write("probe.txt", ids)
    }

    fn finish(self, summary: String) -> Outcome {
        Outcome { summary, artifacts: self.artifacts }
    }
}

/// Loads `data.dir` when set, otherwise generates from the spec.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(dir) => load_dataset(dir),
        None => generate_dataset(&cfg.data),
    }
}

/// The config with its data fields replaced by the spec actually loaded.
fn with_data(cfg: &RunConfig, data: &Dataset) -> RunConfig {
    RunConfig { data: data.spec.clone(), ..cfg.clone() }
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("this command needs --{flag} PATH")))
}

fn load_state(cfg: &RunConfig, path: &Path) -> Result<TrainState> {
    let ck = Checkpoint::load(path)?;
    TrainState::from_checkpoint(&ck, cfg.model_config(), &cfg.train_config())
}

fn steps_csv(log: &RunLog) -> String {
    let mut s = String::from("step,total,clean,adv,included,alpha\n");
    for (i, st) in log.steps.iter().enumerate() {
        let _ = writeln!(s, "{i},{:.9},{:.9},{:.9},{},{}", st.total, st.clean, st.adv, st.included, st.alpha);
    }
    s
}

fn last_val(log: &RunLog) -> String {
    log.metrics
        .iter()
        .rev()
        .find(|m| m.split == "val")
        .map(|m| format!("epoch {} val top1 {:.2} top5 {:.2} loss {:.4}", m.epoch, m.top1, m.top5, m.clean_loss))
        .unwrap_or_default()
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Outcome> {
    let data = generate_dataset(&cfg.data)?;
    let mut dir = RunDir::create(cfg)?;
    save_dataset(&data, &dir.root)?;
    for name in ["header.txt", "labels.txt", "clips"] {
        let p = dir.path(name);
        dir.record(p);
    }
    let summary = format!("{} train / {} val clips in {}", data.train.len(), data.val.len(), dir.root.display());
    Ok(dir.finish(summary))
}

/// Trains from scratch, or continues the baseline from `--checkpoint`.
pub fn cmd_train(cfg: &RunConfig) -> Result<Outcome> {
    let data = load_data(cfg)?;
    let cfg = with_data(cfg, &data);
    let train = cfg.train_config();
    let mut state = match &cfg.checkpoint {
        Some(p) => load_state(&cfg, p)?,
        None => TrainState::fresh(cfg.model_config(), cfg.seed, &train)?,
    };
    let mut dir = RunDir::create(&cfg)?;
    dir.write_probe(&data)?;
    let log = train_baseline(&mut state, &data, &train)?;
    dir.write("metrics.csv", metrics_csv(&log.metrics))?;
    let ck = dir.path("checkpoint.ckpt");
    state.checkpoint().save(&ck)?;
    dir.record(ck);
    Ok(dir.finish(last_val(&log)))
}

pub fn cmd_finetune(cfg: &RunConfig) -> Result<Outcome> {
    let data = load_data(cfg)?;
    let cfg = with_data(cfg, &data);
    let mut state = load_state(&cfg, require(&cfg.checkpoint, "checkpoint")?)?;
    let taf = cfg.taf_config();
    let mut dir = RunDir::create(&cfg)?;
    dir.write_probe(&data)?;
    let log = finetune_taf(&mut state, &data, &taf)?;
    dir.write("metrics.csv", metrics_csv(&log.metrics))?;
    dir.write("steps.csv", steps_csv(&log))?;
    let ck = dir.path("checkpoint.ckpt");
    state.checkpoint().save(&ck)?;
    dir.record(ck);
    Ok(dir.finish(last_val(&log)))
}

/// Clean-path top-1/top-5 on the validation split. Without a checkpoint the
/// model is freshly initialized from `seed`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Outcome> {
    let data = load_data(cfg)?;
    let cfg = with_data(cfg, &data);
    let state = match &cfg.checkpoint {
        Some(p) => load_state(&cfg, p)?,
        None => TrainState::fresh(cfg.model_config(), cfg.seed, &cfg.train_config())?,
    };
    let e = evaluate(&state.model, &data.val, None)?;
    let mut dir = RunDir::create(&cfg)?;
    dir.write_probe(&data)?;
    let summary = format!("top1={:.4}\ntop5={:.4}\nloss={:.6}\nclips={}\n", e.top1, e.top5, e.loss, e.clips);
    dir.write("eval.txt", &summary)?;
    Ok(dir.finish(summary))
}

pub fn corruption_family(kind: CorruptionKind) -> &'static str {
    match kind {
        CorruptionKind::GaussianNoise | CorruptionKind::ImpulseNoise | CorruptionKind::SpeckleNoise => "noise",
        CorruptionKind::GaussianBlur | CorruptionKind::DefocusBlur | CorruptionKind::ZoomBlur => "blur",
        CorruptionKind::Snow | CorruptionKind::Brightness => "weather",
    }
}

/// One row per corruption kind and severity. With `--compare` a second
/// checkpoint is scored on the same corrupted clips.
pub fn cmd_eval_corrupt(cfg: &RunConfig) -> Result<Outcome> {
    let data = load_data(cfg)?;
    let cfg = with_data(cfg, &data);
    let main = load_state(&cfg, require(&cfg.checkpoint, "checkpoint")?)?;
    let other = cfg.compare_checkpoint.as_deref().map(|p| load_state(&cfg, p)).transpose()?;
    if cfg.severities.is_empty() {
        return Err(Error::Config("eval.severities is empty".into()));
    }
    let mut tsv = String::from("family\tkind\tseverity\ttop1\ttop5");
    if other.is_some() {
        tsv.push_str("\tcompare_top1\tcompare_top5");
    }
    tsv.push('\n');
    for &severity in &cfg.severities {
        for kind in CorruptionKind::ALL {
            let spec = CorruptionSpec { kind, severity, seed: cfg.corruption_seed };
            let e = evaluate(&main.model, &data.val, Some(&spec))?;
            let _ = write!(tsv, "{}\t{}\t{}\t{:.4}\t{:.4}", corruption_family(kind), kind, severity, e.top1, e.top5);
            if let Some(o) = &other {
                let c = evaluate(&o.model, &data.val, Some(&spec))?;
                let _ = write!(tsv, "\t{:.4}\t{:.4}", c.top1, c.top5);
            }
            tsv.push('\n');
        }
    }
    let mut dir = RunDir::create(&cfg)?;
    dir.write_probe(&data)?;
    dir.write("corruption.tsv", &tsv)?;
    Ok(dir.finish(tsv))
}

/// Fine-tunes the `--checkpoint` model once per grid cell of every table in
/// `ablate.tables`, one TSV per table plus a combined one.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Outcome> {
    let data = load_data(cfg)?;
    let cfg = with_data(cfg, &data);
    let ck = Checkpoint::load(require(&cfg.checkpoint, "checkpoint")?)?;
    let base = cfg.taf_config();
    let mut dir = RunDir::create(&cfg)?;
    dir.write_probe(&data)?;
    let mut all = Vec::new();
    for table in &cfg.ablate_tables {
        let cells = ablation_grid(table, &base)?;
        let baseline = cfg.ablate_baseline.then_some(&base.train);
        let rows = ablation_sweep(&ck, &cfg.model_config(), &data, &cells, baseline)?;
        dir.write(&format!("ablation_{table}.tsv"), ablation_tsv(&rows))?;
        all.extend(rows);
    }
    let tsv = ablation_tsv(&all);
    dir.write("ablation.tsv", &tsv)?;
    Ok(dir.finish(tsv))
}

const TILE_SCALE: usize = 4;
const CAM_ALPHA: f64 = 0.5;

fn frame_tiles(clip: &[f32], frames: usize, h: usize, w: usize) -> Vec<render::Image> {
    clip.chunks(clip.len() / frames).map(|f| render::gray(f, h, w, TILE_SCALE)).collect()
}

fn cam_tiles(clip: &[f32], stack: &CamStack, h: usize, w: usize) -> Vec<render::Image> {
    let (t, mh, mw) = (stack.maps.shape()[0], stack.maps.shape()[1], stack.maps.shape()[2]);
    let maps = stack.maps.data();
    (0..t)
        .map(|i| {
            let frame = &clip[i * h * w..(i + 1) * h * w];
            render::overlay(frame, h, w, &maps[i * mh * mw..(i + 1) * mh * mw], mh, mw, CAM_ALPHA, TILE_SCALE)
        })
        .collect()
}

fn dump_selection(cfg: &RunConfig, data: &Dataset) -> Vec<VideoClip> {
    probe_clips(data).into_iter().take(cfg.dump_clips).collect()
}

/// True-label CAMs on probe clips: row 1 from `--checkpoint`, row 2 from
/// `--compare`, one column per frame.
pub fn cmd_cam_dump(cfg: &RunConfig) -> Result<Outcome> {
    let data = load_data(cfg)?;
    let cfg = with_data(cfg, &data);
    let first = load_state(&cfg, require(&cfg.checkpoint, "checkpoint")?)?;
    let second = load_state(&cfg, require(&cfg.compare_checkpoint, "compare")?)?;
    let (h, w) = (data.spec.height, data.spec.width);
    let mut dir = RunDir::create(&cfg)?;
    dir.write_probe(&data)?;
    let mut summary = String::from("clip_id\tlabel\tentropy_first\tentropy_second\n");
    for clip in dump_selection(&cfg, &data) {
        let a = compute_cam(&first.model, &clip.frames, clip.label)?;
        let b = compute_cam(&second.model, &clip.frames, clip.label)?;
        let px = clip.frames.data();
        let img = render::grid(&[cam_tiles(px, &a, h, w), cam_tiles(px, &b, h, w)], 2)?;
        dir.write(&format!("cam_{}.ppm", clip.clip_id), img.to_ppm())?;
        let _ = writeln!(summary, "{}\t{}\t{:.6}\t{:.6}", clip.clip_id, clip.label, a.mass_entropy(), b.mass_entropy());
    }
    dir.write("cam.tsv", &summary)?;
    Ok(dir.finish(summary))
}

/// Attacks probe clips with the configured attack and draws, per clip, rows
/// of original frames, perturbed frames, signed deltas, and the target CAM
/// before and after. Every dumped clip is attacked regardless of inclusion.
pub fn cmd_attack_dump(cfg: &RunConfig) -> Result<Outcome> {
    let data = load_data(cfg)?;
    let cfg = with_data(cfg, &data);
    let state = load_state(&cfg, require(&cfg.checkpoint, "checkpoint")?)?;
    let mut attack = cfg.taf_config().attack;
    attack.inclusion = InclusionPolicy::All;
    let clips = dump_selection(&cfg, &data);
    if clips.is_empty() {
        return Err(Error::Config("dump.clips must be positive".into()));
    }
    let batch = Batch::from_clips(&clips)?;
    let mut rng = ChaCha8Rng::seed_from_u64(attack.seed ^ cfg.seed);
    let aug = attack_batch(&state.model, &batch.data, &batch.labels, &attack, &mut rng)?;
    let (t, h, w) = (data.spec.frames, data.spec.height, data.spec.width);
    let mut dir = RunDir::create(&cfg)?;
    dir.write_probe(&data)?;
    let mut summary = String::from("clip_id\tlabel\ttarget\tmax_abs_delta\tcam_loss_before\tcam_loss_after\n");
    for (b, clip) in clips.iter().enumerate() {
        let target = aug.targets[b];
        let orig = clip.frames.data();
        let adv = aug.clip(b);
        let before = compute_cam(&state.model, &clip.frames, target)?;
        let after = compute_cam(&state.model, &Tensor::new(clip.frames.shape(), adv.to_vec())?, target)?;
        let n = clip.frames.numel();
        let delta = &aug.deltas[b * n..(b + 1) * n];
        let eps = attack.epsilon.max(f64::MIN_POSITIVE);
        let delta_row = (0..t)
            .map(|i| {
                let f = &delta[i * h * w..(i + 1) * h * w];
                render::colored(h, w, TILE_SCALE, |y, x| render::diverging(f[y * w + x] as f64 / eps))
            })
            .collect();
        let rows = [
            frame_tiles(orig, t, h, w),
            frame_tiles(adv, t, h, w),
            delta_row,
            cam_tiles(orig, &before, h, w),
            cam_tiles(adv, &after, h, w),
        ];
        dir.write(&format!("attack_{}.ppm", clip.clip_id), render::grid(&rows, 2)?.to_ppm())?;
        let loss = |s: &CamStack| crate::cam::cam_loss(s, attack.n_frames);
        let _ = writeln!(
            summary,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            clip.clip_id,
            clip.label,
            target,
            aug.max_abs_delta(b),
            loss(&before)?,
            loss(&after)?
        );
    }
    dir.write("attack.tsv", &summary)?;
    Ok(dir.finish(summary))
}
