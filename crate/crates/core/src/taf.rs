//! Baseline training, adversarial fine-tuning with dual normalization,
//! evaluation and ablation sweeps.
//!
//! Fine-tuning minimizes `α·CE(x, y) + (1−α)·CE(x^K, y)` where the clean
//! term runs through the clean normalization path and the augmented term
//! through the adversarial one. Inference always uses the clean path.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attack::{argmax, attack_batch, AttackConfig, InclusionPolicy, LossKind};
use crate::cam::compute_cams;
use crate::data::{batch_indices, corrupt, Batch, CorruptionSpec, Dataset, VideoClip};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, Checkpoint, Mode, ModelConfig, NormPath, Sgd, VideoModel};
use crate::tensor::Graph;

/// Step decay: `initial · factor^⌊epoch / decay_every⌋`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub decay_every: usize,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let k = if self.decay_every == 0 { 0 } else { epoch / self.decay_every };
        self.initial * self.factor.powi(k as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: LrSchedule { initial: 0.05, factor: 0.1, decay_every: 20 },
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TafConfig {
    /// Weight of the clean term.
    pub alpha: f64,
    pub train: TrainConfig,
    pub attack: AttackConfig,
}

impl Default for TafConfig {
    fn default() -> Self {
        TafConfig {
            alpha: 0.7,
            train: TrainConfig {
                epochs: 15,
                lr: LrSchedule { initial: 0.005, factor: 0.1, decay_every: 10 },
                ..TrainConfig::default()
            },
            attack: AttackConfig::default(),
        }
    }
}

impl TafConfig {
    pub fn validate(&self, frames: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        self.attack.validate(frames)
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: u64,
    pub split: String,
    pub top1: f64,
    pub top5: f64,
    pub clean_loss: f64,
    pub adv_loss: f64,
    pub cam_entropy: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,top1,top5,clean_loss,adv_loss,cam_entropy";

impl MetricsRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{:.6},{:.6},{:.6}",
            self.epoch, self.split, self.top1, self.top5, self.clean_loss, self.adv_loss, self.cam_entropy
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Loss decomposition of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub clean: f64,
    pub adv: f64,
    pub included: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub metrics: Vec<MetricsRecord>,
    pub steps: Vec<StepLoss>,
    /// Train-mode forwards through each normalization path.
    pub clean_forwards: u64,
    pub adv_forwards: u64,
}

/// Model, optimizer and epoch counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: VideoModel<f32>,
    pub optimizer: Sgd<f32>,
    pub epoch: u64,
}

impl TrainState {
    pub fn fresh(config: ModelConfig, seed: u64, train: &TrainConfig) -> Result<Self> {
        Ok(TrainState {
            model: VideoModel::new(config, seed)?,
            optimizer: Sgd::new(train.momentum, train.weight_decay),
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, config: ModelConfig, train: &TrainConfig) -> Result<Self> {
        let mut model = VideoModel::new(config, 0)?;
        ck.restore_model(&mut model)?;
        let mut optimizer = Sgd::new(train.momentum, train.weight_decay);
        ck.restore_optimizer(&model, &mut optimizer)?;
        Ok(TrainState { model, optimizer, epoch: ck.epoch().unwrap_or(0) })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, Some(&self.optimizer), self.epoch)
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Shuffle seed of an absolute epoch.
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    mix(seed, epoch.wrapping_add(1))
}

/// Fixed, seeded subset of `n` indices used for CAM statistics.
pub fn probe_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 0x70_72_6f_62_65)));
    idx.truncate(n.min(len));
    idx.sort_unstable();
    idx
}

pub const PROBE_SIZE: usize = 64;

fn rank_hits(logits: &[f32], classes: usize, labels: &[usize]) -> (usize, usize) {
    let k5 = 5.min(classes);
    let (mut h1, mut h5) = (0, 0);
    for (row, &y) in logits.chunks(classes).zip(labels) {
        let better = row.iter().filter(|&&v| v > row[y]).count();
        let tied_before = row[..y].iter().filter(|&&v| v == row[y]).count();
        let rank = better + tied_before;
        h1 += usize::from(rank == 0);
        h5 += usize::from(rank < k5);
        debug_assert_eq!(rank == 0, argmax(row) == y);
    }
    (h1, h5)
}

/// Clean-path eval metrics over a clip collection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub top1: f64,
    pub top5: f64,
    pub loss: f64,
    pub clips: usize,
}

const EVAL_BATCH: usize = 64;

/// Single-view clean-path evaluation, optionally on corrupted copies.
pub fn evaluate(model: &VideoModel<f32>, clips: &[VideoClip], corruption: Option<&CorruptionSpec>) -> Result<EvalResult> {
    if clips.is_empty() {
        return Err(Error::Domain("cannot evaluate an empty split".into()));
    }
    let classes = model.config().classes;
    let (mut h1, mut h5, mut loss) = (0, 0, 0.0);
    for chunk in clips.chunks(EVAL_BATCH) {
        let owned: Vec<VideoClip>;
        let view: &[VideoClip] = match corruption {
            Some(spec) => {
                owned = chunk.iter().map(|c| corrupt(c, spec)).collect::<Result<_>>()?;
                &owned
            }
            None => chunk,
        };
        let batch = Batch::from_clips(view)?;
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let x = g.input(&model.input_shape(batch.len()), batch.data, false)?;
        let out = model.forward_inference(&mut g, &b, x)?;
        let ce = g.cross_entropy(out.logits, &batch.labels)?;
        loss += g.value(ce).iter().map(|&v| v as f64).sum::<f64>();
        let (a, c) = rank_hits(g.value(out.logits), classes, &batch.labels);
        h1 += a;
        h5 += c;
    }
    let n = clips.len() as f64;
    Ok(EvalResult { top1: 100.0 * h1 as f64 / n, top5: 100.0 * h5 as f64 / n, loss: loss / n, clips: clips.len() })
}

/// Mean frame-mass entropy of true-label CAMs over `clips`.
pub fn cam_entropy(model: &VideoModel<f32>, clips: &[VideoClip]) -> Result<f64> {
    if clips.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in clips.chunks(16) {
        let batch = Batch::from_clips(chunk)?;
        for s in compute_cams(model, &batch.data, &batch.labels)? {
            total += s.mass_entropy();
        }
    }
    Ok(total / clips.len() as f64)
}

fn val_record(model: &VideoModel<f32>, data: &Dataset, probe: &[VideoClip], epoch: u64) -> Result<MetricsRecord> {
    let e = evaluate(model, &data.val, None)?;
    Ok(MetricsRecord {
        epoch,
        split: "val".into(),
        top1: e.top1,
        top5: e.top5,
        clean_loss: e.loss,
        adv_loss: f64::NAN,
        cam_entropy: cam_entropy(model, probe)?,
    })
}

pub fn probe_clips(data: &Dataset) -> Vec<VideoClip> {
    probe_indices(data.val.len(), PROBE_SIZE, data.spec.seed)
        .into_iter()
        .map(|i| data.val[i].clone())
        .collect()
}

struct Augment<'a> {
    alpha: f64,
    attack: &'a AttackConfig,
    rng: ChaCha8Rng,
}

fn run_epochs(state: &mut TrainState, data: &Dataset, train: &TrainConfig, mut aug: Option<Augment<'_>>) -> Result<RunLog> {
    if data.train.is_empty() {
        return Err(Error::Domain("empty training split".into()));
    }
    let classes = state.model.config().classes;
    let probe = probe_clips(data);
    let mut log = RunLog::default();
    for e in 0..train.epochs {
        let lr = train.lr.at(e);
        let order = batch_indices(data.train.len(), train.batch_size, Some(epoch_seed(train.seed, state.epoch)))?;
        let (mut h1, mut h5, mut clean_sum, mut adv_sum, mut adv_steps) = (0, 0, 0.0, 0.0, 0);
        for idx in &order {
            let batch = Batch::from_clips(idx.iter().map(|&i| &data.train[i]))?;
            let augmented = match aug.as_mut() {
                Some(a) => Some(attack_batch(&state.model, &batch.data, &batch.labels, a.attack, &mut a.rng)?),
                None => None,
            };
            let model = &mut state.model;
            let mut g = Graph::new();
            let b = model.bind(&mut g, true);
            let x = g.input(&model.input_shape(batch.len()), batch.data.clone(), false)?;
            let out = model.forward(&mut g, &b, x, NormPath::Clean, Mode::Train)?;
            log.clean_forwards += 1;
            let clean = cross_entropy(&mut g, out.logits, &batch.labels)?;
            let (hit1, hit5) = rank_hits(g.value(out.logits), classes, &batch.labels);
            h1 += hit1;
            h5 += hit5;
            let (total, step) = match (&aug, &augmented) {
                (Some(a), Some(adv)) => {
                    let chosen: Vec<usize> = (0..batch.len()).filter(|&k| adv.included[k]).collect();
                    let clean_term = g.scale(clean, a.alpha as f32);
                    let (total, adv_value) = if chosen.is_empty() {
                        (clean_term, 0.0)
                    } else {
                        let xs: Vec<f32> = chosen.iter().flat_map(|&k| adv.clip(k).iter().copied()).collect();
                        let ys: Vec<usize> = chosen.iter().map(|&k| batch.labels[k]).collect();
                        let xa = g.input(&model.input_shape(chosen.len()), xs, false)?;
                        let oa = model.forward(&mut g, &b, xa, NormPath::Adversarial, Mode::Train)?;
                        log.adv_forwards += 1;
                        let adv_loss = cross_entropy(&mut g, oa.logits, &ys)?;
                        let adv_term = g.scale(adv_loss, (1.0 - a.alpha) as f32);
                        (g.add(clean_term, adv_term)?, g.scalar_value(adv_loss) as f64)
                    };
                    let step = StepLoss {
                        total: g.scalar_value(total) as f64,
                        clean: g.scalar_value(clean) as f64,
                        adv: adv_value,
                        included: chosen.len(),
                        alpha: a.alpha,
                    };
                    (total, step)
                }
                _ => {
                    let v = g.scalar_value(clean) as f64;
                    (clean, StepLoss { total: v, clean: v, adv: 0.0, included: 0, alpha: 1.0 })
                }
            };
            g.backward(total)?;
            model.zero_grad();
            model.accumulate_grads(&g, &b)?;
            state.optimizer.step(&mut model.params_mut(), lr)?;
            clean_sum += step.clean;
            if step.included > 0 {
                adv_sum += step.adv;
                adv_steps += 1;
            }
            log.steps.push(step);
        }
        state.epoch += 1;
        let n = data.train.len() as f64;
        log.metrics.push(MetricsRecord {
            epoch: state.epoch,
            split: "train".into(),
            top1: 100.0 * h1 as f64 / n,
            top5: 100.0 * h5 as f64 / n,
            clean_loss: clean_sum / order.len() as f64,
            adv_loss: if adv_steps > 0 { adv_sum / adv_steps as f64 } else { f64::NAN },
            cam_entropy: f64::NAN,
        });
        log.metrics.push(val_record(&state.model, data, &probe, state.epoch)?);
    }
    Ok(log)
}

/// Clean-path supervised training for `train.epochs` epochs.
pub fn train_baseline(state: &mut TrainState, data: &Dataset, train: &TrainConfig) -> Result<RunLog> {
    run_epochs(state, data, train, None)
}

/// Fine-tunes with temporally augmented clips. The adversarial normalization
/// path starts as a copy of the clean one, with fresh momentum.
pub fn finetune_taf(state: &mut TrainState, data: &Dataset, cfg: &TafConfig) -> Result<RunLog> {
    cfg.validate(state.model.config().frames)?;
    state.model.init_adversarial_path();
    let adv_params: Vec<usize> = state
        .model
        .param_names()
        .iter()
        .enumerate()
        .filter(|(_, n)| n.contains(".adv."))
        .map(|(i, _)| i)
        .collect();
    for i in adv_params {
        state.optimizer.reset_velocity(i);
    }
    let aug = Augment {
        alpha: cfg.alpha,
        attack: &cfg.attack,
        rng: ChaCha8Rng::seed_from_u64(mix(cfg.attack.seed, cfg.train.seed ^ 0xa77ac)),
    };
    run_epochs(state, data, &cfg.train, Some(aug))
}

/// One ablation cell: a label for its table and the fine-tune config.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub table: String,
    pub cfg: TafConfig,
}

/// Result row of one fine-tune + evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub table: String,
    /// `None` for the baseline-continuation row.
    pub cfg: Option<TafConfig>,
    pub top1: f64,
    pub top5: f64,
    pub val_loss: f64,
    pub cam_entropy: f64,
}

/// The grid cells of every reported ablation table, built on `base`.
pub fn ablation_grid(table: &str, base: &TafConfig) -> Result<Vec<AblationCell>> {
    let cell = |f: &dyn Fn(&mut TafConfig)| {
        let mut c = base.clone();
        f(&mut c);
        AblationCell { table: table.to_string(), cfg: c }
    };
    let cells = match table {
        "loss" => [LossKind::CrossEntropy, LossKind::Cam]
            .into_iter()
            .map(|l| cell(&|c| c.attack.loss = l))
            .collect(),
        "alpha" => [0.2, 0.5, 0.7, 0.8].into_iter().map(|a| cell(&|c| c.alpha = a)).collect(),
        "attack" => [(6.0, 1), (6.0, 3), (64.0, 1), (64.0, 3)]
            .into_iter()
            .map(|(e, k)| {
                cell(&|c| {
                    c.attack.epsilon = e / 255.0;
                    c.attack.beta = e / 2.0 / 255.0;
                    c.attack.steps = k;
                })
            })
            .collect(),
        "frames" => [2, 4, 8].into_iter().map(|n| cell(&|c| c.attack.n_frames = n)).collect(),
        "inclusion" => [InclusionPolicy::All, InclusionPolicy::CorrectOnly, InclusionPolicy::IncorrectOnly]
            .into_iter()
            .map(|p| cell(&|c| c.attack.inclusion = p))
            .collect(),
        _ => return Err(Error::Config(format!("unknown ablation table `{table}`"))),
    };
    Ok(cells)
}

pub const ABLATION_TABLES: [&str; 5] = ["loss", "alpha", "attack", "frames", "inclusion"];

fn finish_row(table: &str, cfg: Option<TafConfig>, model: &VideoModel<f32>, data: &Dataset) -> Result<AblationRow> {
    let e = evaluate(model, &data.val, None)?;
    Ok(AblationRow {
        table: table.to_string(),
        cfg,
        top1: e.top1,
        top5: e.top5,
        val_loss: e.loss,
        cam_entropy: cam_entropy(model, &probe_clips(data))?,
    })
}

/// Fine-tunes `pretrained` once per cell. When `with_baseline` is set each
/// table also gets a baseline-continuation row trained with the base schedule.
pub fn ablation_sweep(
    pretrained: &Checkpoint,
    model_config: &ModelConfig,
    data: &Dataset,
    cells: &[AblationCell],
    baseline: Option<&TrainConfig>,
) -> Result<Vec<AblationRow>> {
    if cells.is_empty() {
        return Err(Error::Domain("ablation grid is empty".into()));
    }
    let mut rows = Vec::new();
    let mut tables: Vec<&str> = Vec::new();
    for c in cells {
        if !tables.contains(&c.table.as_str()) {
            tables.push(&c.table);
        }
    }
    if let Some(train) = baseline {
        let mut state = TrainState::from_checkpoint(pretrained, model_config.clone(), train)?;
        train_baseline(&mut state, data, train)?;
        for t in &tables {
            rows.push(finish_row(t, None, &state.model, data)?);
        }
    }
    for c in cells {
        let mut state = TrainState::from_checkpoint(pretrained, model_config.clone(), &c.cfg.train)?;
        finetune_taf(&mut state, data, &c.cfg)?;
        rows.push(finish_row(&c.table, Some(c.cfg.clone()), &state.model, data)?);
    }
    rows.sort_by_key(|r| tables.iter().position(|t| *t == r.table));
    Ok(rows)
}

pub const ABLATION_HEADER: &str =
    "table\tmethod\talpha\tepsilon_255\tbeta_255\tsteps\tframes_n\tinclusion\tloss\ttop1\ttop5\tval_loss\tcam_entropy";

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for r in rows {
        match &r.cfg {
            None => {
                let _ = write!(s, "{}\tbaseline\t-\t-\t-\t-\t-\t-\t-", r.table);
            }
            Some(c) => {
                let a = &c.attack;
                let _ = write!(
                    s,
                    "{}\ttaf\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    r.table,
                    c.alpha,
                    round255(a.epsilon),
                    round255(a.beta),
                    a.steps,
                    a.n_frames,
                    a.inclusion,
                    a.loss
                );
            }
        }
        let _ = writeln!(s, "\t{:.4}\t{:.4}\t{:.6}\t{:.6}", r.top1, r.top5, r.val_loss, r.cam_entropy);
    }
    s
}

fn round255(x: f64) -> f64 {
    (x * 255.0 * 1e6).round() / 1e6
}
