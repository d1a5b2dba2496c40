//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. `TAF_ACCEPT_SKIP=2,9` skips criteria by number.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taflab::attack::{attack_batch, AttackConfig, InclusionPolicy};
use taflab::cam::{cam_loss, compute_cams, rank_frames, CamStack};
use taflab::cli::{cmd_ablate, RunConfig};
use taflab::data::{generate_dataset, Batch, CorruptionKind, CorruptionSpec, Dataset, SyntheticSpec};
use taflab::nn::{Checkpoint, Mode, ModelConfig, NormPath, VideoModel};
use taflab::taf::{
    cam_entropy, evaluate, finetune_taf, probe_clips, train_baseline, EvalResult, TafConfig, TrainConfig, TrainState,
    ABLATION_HEADER,
};
use taflab::tensor::Tensor;
use taflab::Result;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

/// Directional runs at the calibrated desk scale.
fn desk_spec() -> SyntheticSpec {
    SyntheticSpec { train_size: 512, val_size: 512, ..SyntheticSpec::default() }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

struct SeedRun {
    pretrained: Checkpoint,
    pre: VideoModel<f32>,
    cont: VideoModel<f32>,
    taf: VideoModel<f32>,
}

struct Scored {
    val: EvalResult,
    train: EvalResult,
}

impl Scored {
    fn new(model: &VideoModel<f32>, data: &Dataset) -> Result<Self> {
        Ok(Scored {
            val: evaluate(model, &data.val, None)?,
            train: evaluate(model, &data.train, None)?,
        })
    }

    /// Held-out minus fitted loss, both in eval mode.
    fn gap(&self) -> f64 {
        self.val.loss - self.train.loss
    }
}

#[derive(Default)]
struct Lab {
    data: Option<Dataset>,
    runs: Vec<SeedRun>,
}

impl Lab {
    fn data(&mut self) -> Result<&Dataset> {
        if self.data.is_none() {
            self.data = Some(generate_dataset(&desk_spec())?);
        }
        Ok(self.data.as_ref().expect("set above"))
    }

    fn ensure_runs(&mut self) -> Result<()> {
        if !self.runs.is_empty() {
            return Ok(());
        }
        let data = self.data()?.clone();
        for seed in SEEDS {
            let t = Instant::now();
            let train = TrainConfig { seed, ..TrainConfig::default() };
            let mut base = TrainState::fresh(ModelConfig::default(), seed, &train)?;
            train_baseline(&mut base, &data, &train)?;
            let pretrained = base.checkpoint();
            let mut cfg = TafConfig::default();
            cfg.train.seed = seed;
            cfg.attack.seed = seed;
            let mut cont = TrainState::from_checkpoint(&pretrained, ModelConfig::default(), &cfg.train)?;
            train_baseline(&mut cont, &data, &cfg.train)?;
            let mut taf = TrainState::from_checkpoint(&pretrained, ModelConfig::default(), &cfg.train)?;
            finetune_taf(&mut taf, &data, &cfg)?;
            println!("  seed {seed}: baseline, continuation and fine-tune in {:.0}s", t.elapsed().as_secs_f64());
            self.runs.push(SeedRun { pretrained, pre: base.model, cont: cont.model, taf: taf.model });
        }
        Ok(())
    }
}

fn gradients(_: &mut Lab) -> Result<Verdict> {
    let mut worst = BTreeMap::new();
    for (i, case) in common::cases().iter().enumerate() {
        worst.insert(case.name.to_string(), common::check_case(case, 1000 + i as u64)?);
    }
    worst.insert("stop_gradient".into(), common::check_stop_gradient(7)?);
    for (path, mode) in [(NormPath::Clean, Mode::Train), (NormPath::Adversarial, Mode::Train), (NormPath::Clean, Mode::Eval)] {
        let mut w = 0.0f64;
        for seed in 0..common::INSTANCES as u64 {
            w = w.max(common::check_model_instance(seed, path, mode)?);
        }
        worst.insert(format!("model/{path:?}/{mode:?}"), w);
    }
    let bad: Vec<String> = worst
        .iter()
        .filter(|(_, &e)| !(e < common::TOLERANCE))
        .map(|(n, e)| format!("{n}={e:.2e}"))
        .collect();
    let max = worst.values().copied().fold(0.0, f64::max);
    verdict(bad.is_empty(), format!("{} checks, worst rel err {max:.2e} {}", worst.len(), bad.join(" ")))
}

fn attack_invariants(lab: &mut Lab) -> Result<Verdict> {
    lab.ensure_runs()?;
    let data = lab.data()?.clone();
    let model = &lab.runs[0].pre;
    let clips = &data.val[..500];
    let mut pass = true;
    let mut detail = Vec::new();
    for steps in [1, 3] {
        let cfg = AttackConfig { steps, inclusion: InclusionPolicy::All, ..AttackConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(steps as u64);
        let (mut budget, mut range, mut held, mut gain) = (0, 0, 0, 0.0);
        for chunk in clips.chunks(25) {
            let batch = Batch::from_clips(chunk)?;
            let aug = attack_batch(model, &batch.data, &batch.labels, &cfg, &mut rng)?;
            let before = compute_cams(model, &batch.data, &aug.targets)?;
            let after = compute_cams(model, &aug.data, &aug.targets)?;
            for b in 0..chunk.len() {
                budget += usize::from(aug.max_abs_delta(b) as f64 > cfg.epsilon + 1e-6);
                range += usize::from(aug.clip(b).iter().any(|&p| !(0.0..=1.0).contains(&p)));
                let (x, y) = (cam_loss(&before[b], cfg.n_frames)?, cam_loss(&after[b], cfg.n_frames)?);
                held += usize::from(y >= x);
                gain += y - x;
            }
        }
        let frac = held as f64 / clips.len() as f64;
        pass &= budget == 0 && range == 0 && frac >= 0.9;
        let mean_gain = gain / clips.len() as f64;
        detail.push(format!(
            "K={steps}: budget violations {budget}, range violations {range}, L_C held {:.1}%, mean gain {mean_gain:.4}",
            100.0 * frac
        ));
    }
    verdict(pass, detail.join("; "))
}

fn cam_contracts(_: &mut Lab) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut failures = Vec::new();
    for i in 0..200 {
        let (t, s) = (rng.gen_range(1..=8), rng.gen_range(1..=5));
        let v: Vec<f64> = if i % 10 == 0 {
            let f: Vec<f64> = (0..s * s).map(|_| rng.gen_range(0.0..1.0)).collect();
            (0..t).flat_map(|_| f.clone()).collect()
        } else {
            (0..t * s * s).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let stack = CamStack::from_raw(Tensor::new(&[t, s, s], v.clone())?, 0)?;
        let maps = stack.maps.data();
        if !stack.degenerate {
            let arg = (0..v.len()).min_by(|&a, &b| v[a].total_cmp(&v[b])).expect("non-empty");
            if maps[arg] != 0.0 {
                failures.push(format!("{i}: min maps to {}", maps[arg]));
            }
        }
        let mut sorted = stack.pi.clone();
        sorted.sort_unstable();
        let ordered = stack.pi.windows(2).all(|w| {
            let (a, b) = (stack.frame_mass[w[0]], stack.frame_mass[w[1]]);
            a < b || (a == b && w[0] < w[1])
        });
        if sorted != (0..t).collect::<Vec<_>>() || !ordered || rank_frames(&stack.frame_mass) != stack.pi {
            failures.push(format!("{i}: bad ranking {:?}", stack.pi));
        }
        let losses = (1..=t).map(|n| cam_loss(&stack, n)).collect::<Result<Vec<_>>>()?;
        if losses.windows(2).any(|w| w[1] < w[0] - 1e-12) {
            failures.push(format!("{i}: prefix loss not monotone"));
        }
        let n = rng.gen_range(1..=t);
        let (bm, bpi, bl) = common::brute_force_cam(&v, t, n);
        let close = maps.iter().zip(&bm).all(|(a, b)| (a - b).abs() < 1e-12);
        if bpi != stack.pi || !close || (cam_loss(&stack, n)? - bl).abs() >= 1e-12 {
            failures.push(format!("{i}: disagrees with brute force"));
        }
    }
    let detail = if failures.is_empty() { "200 stacks agree".to_string() } else { failures.join("; ") };
    verdict(failures.is_empty(), detail)
}

fn small_desk_data() -> Result<Dataset> {
    generate_dataset(&SyntheticSpec { train_size: 64, val_size: 32, ..SyntheticSpec::default() })
}

fn writes(model: &VideoModel<f32>, path: NormPath) -> Vec<u64> {
    model.blocks.iter().map(|b| b.bn.path(path).writes()).collect()
}

fn small_taf(alpha: f64, inclusion: InclusionPolicy) -> TafConfig {
    let mut cfg = TafConfig { alpha, ..TafConfig::default() };
    cfg.train.epochs = 2;
    cfg.attack.inclusion = inclusion;
    cfg
}

fn pretrain_small(data: &Dataset) -> Result<TrainState> {
    let train = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let mut state = TrainState::fresh(ModelConfig::default(), 4, &train)?;
    train_baseline(&mut state, data, &train)?;
    Ok(state)
}

fn dual_bn_isolation(_: &mut Lab) -> Result<Verdict> {
    let data = small_desk_data()?;
    let start = pretrain_small(&data)?;
    let mut problems = Vec::new();
    let fresh = VideoModel::<f32>::new(ModelConfig::default(), 4)?;
    if writes(&start.model, NormPath::Adversarial).iter().any(|&w| w != 0) {
        problems.push("baseline wrote adversarial statistics".to_string());
    }
    for (a, b) in start.model.blocks.iter().zip(&fresh.blocks) {
        let (a, b) = (a.bn.path(NormPath::Adversarial), b.bn.path(NormPath::Adversarial));
        if !(a.weight.bit_eq(&b.weight) && a.bias.bit_eq(&b.bias) && a.running_mean.bit_eq(&b.running_mean)) {
            problems.push("baseline changed adversarial parameters".to_string());
        }
    }
    let mut forwards = (0, 0);
    for inclusion in [InclusionPolicy::All, InclusionPolicy::IncorrectOnly] {
        let mut state = start.clone();
        let (c0, a0) = (writes(&state.model, NormPath::Clean), writes(&state.model, NormPath::Adversarial));
        let log = finetune_taf(&mut state, &data, &small_taf(0.7, inclusion))?;
        forwards.0 += log.clean_forwards;
        forwards.1 += log.adv_forwards;
        let dc: Vec<u64> = writes(&state.model, NormPath::Clean).iter().zip(&c0).map(|(a, b)| a - b).collect();
        let da: Vec<u64> = writes(&state.model, NormPath::Adversarial).iter().zip(&a0).map(|(a, b)| a - b).collect();
        if dc.iter().any(|&d| d != log.clean_forwards) || da.iter().any(|&d| d != log.adv_forwards) {
            problems.push(format!("{inclusion}: writes clean {dc:?} adv {da:?} vs forwards {}/{}", log.clean_forwards, log.adv_forwards));
        }
        let batch = Batch::from_clips(&data.val)?;
        let before = state.model.predict_logits(&batch.data, batch.len())?;
        let mut scrambled = state.model.clone();
        scrambled.switch_path(NormPath::Adversarial);
        for b in &mut scrambled.blocks {
            let s = b.bn.path_mut(NormPath::Adversarial);
            s.weight.data_mut().iter_mut().for_each(|v| *v = -3.0);
            s.running_mean.data_mut().iter_mut().for_each(|v| *v = 7.0);
        }
        if scrambled.predict_logits(&batch.data, batch.len())? != before
            || evaluate(&scrambled, &data.val, None)? != evaluate(&state.model, &data.val, None)?
        {
            problems.push(format!("{inclusion}: inference reached the adversarial path"));
        }
    }
    let detail = if problems.is_empty() {
        format!("{} clean and {} adversarial forwards, no cross-path writes", forwards.0, forwards.1)
    } else {
        problems.join("; ")
    };
    verdict(problems.is_empty() && forwards.1 > 0, detail)
}

fn accounting(_: &mut Lab) -> Result<Verdict> {
    let data = small_desk_data()?;
    let start = pretrain_small(&data)?;
    let mut worst = 0.0f64;
    let mut steps = 0;
    for inclusion in [InclusionPolicy::All, InclusionPolicy::IncorrectOnly, InclusionPolicy::CorrectOnly] {
        let mut state = start.clone();
        let log = finetune_taf(&mut state, &data, &small_taf(0.7, inclusion))?;
        for s in &log.steps {
            worst = worst.max((s.total - (0.7 * s.clean + 0.3 * s.adv)).abs());
            steps += 1;
        }
    }
    let cfg = small_taf(1.0, InclusionPolicy::All);
    let mut taf = start.clone();
    let taf_log = finetune_taf(&mut taf, &data, &cfg)?;
    let mut cont = start;
    let cont_log = train_baseline(&mut cont, &data, &cfg.train)?;
    let names = cont.model.param_names();
    let params_match = names
        .iter()
        .zip(taf.model.params())
        .zip(cont.model.params())
        .all(|((n, a), b)| n.contains(".adv.") || a.bit_eq(b));
    let stats_match = taf.model.blocks.iter().zip(&cont.model.blocks).all(|(a, b)| {
        let (x, y) = (a.bn.path(NormPath::Clean), b.bn.path(NormPath::Clean));
        x.running_mean.bit_eq(&y.running_mean) && x.running_var.bit_eq(&y.running_var)
    });
    let val = |l: &taflab::taf::RunLog| -> Vec<String> {
        l.metrics.iter().filter(|m| m.split == "val").map(|m| m.csv_line()).collect()
    };
    let metrics_match = val(&taf_log) == val(&cont_log);
    let collapse = params_match && stats_match && metrics_match;
    verdict(
        worst <= 1e-6 && steps > 0 && collapse,
        format!("{steps} steps, worst |total - weighted sum| {worst:.2e}; alpha=1 bit-match {collapse}"),
    )
}

fn directional(lab: &mut Lab) -> Result<Verdict> {
    lab.ensure_runs()?;
    let data = lab.data()?.clone();
    let (mut cont, mut taf) = (Vec::new(), Vec::new());
    for r in &lab.runs {
        cont.push(Scored::new(&r.cont, &data)?);
        taf.push(Scored::new(&r.taf, &data)?);
    }
    let top1 = |v: &[Scored]| mean(v.iter().map(|s| s.val.top1));
    let gap = |v: &[Scored]| mean(v.iter().map(Scored::gap));
    let (ta, tb, ga, gb) = (top1(&cont), top1(&taf), gap(&cont), gap(&taf));
    // Temporal-order sensitivity of the task, for the record only.
    let scrambled: Vec<_> = data.val.iter().map(|c| c.permuted(&[3, 6, 0, 5, 2, 7, 1, 4])).collect::<Result<_>>()?;
    let (ordered, shuffled) = (evaluate(&lab.runs[0].pre, &data.val, None)?.top1, evaluate(&lab.runs[0].pre, &scrambled, None)?.top1);
    let per_seed: Vec<String> = cont
        .iter()
        .zip(&taf)
        .map(|(a, b)| format!("{:.2}/{:.2}", a.val.top1, b.val.top1))
        .collect();
    verdict(
        tb >= ta && gb <= ga,
        format!(
            "top1 continuation {ta:.2} vs TAF {tb:.2} (per seed {}); loss gap {ga:.4} vs {gb:.4}; \
             baseline {ordered:.1} on ordered val, {shuffled:.1} on frame-scrambled val",
            per_seed.join(" ")
        ),
    )
}

fn attention_spread(lab: &mut Lab) -> Result<Verdict> {
    lab.ensure_runs()?;
    let probe = probe_clips(lab.data()?);
    let (mut pre, mut post, mut cont) = (Vec::new(), Vec::new(), Vec::new());
    for r in &lab.runs {
        pre.push(cam_entropy(&r.pre, &probe)?);
        post.push(cam_entropy(&r.taf, &probe)?);
        cont.push(cam_entropy(&r.cont, &probe)?);
    }
    let (a, b, c) = (mean(pre), mean(post), mean(cont));
    verdict(b > a, format!("probe entropy pre {a:.6}, post-TAF {b:.6} (continuation {c:.6})"))
}

fn ood(lab: &mut Lab) -> Result<Verdict> {
    lab.ensure_runs()?;
    let data = lab.data()?.clone();
    let mut wins = 0;
    let mut cells = Vec::new();
    for kind in CorruptionKind::ALL {
        let spec = CorruptionSpec { kind, severity: 3, seed: 0 };
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for r in &lab.runs {
            a.push(evaluate(&r.cont, &data.val, Some(&spec))?.top1);
            b.push(evaluate(&r.taf, &data.val, Some(&spec))?.top1);
        }
        let (a, b) = (mean(a), mean(b));
        wins += usize::from(b >= a);
        cells.push(format!("{kind} {a:.1}/{b:.1}"));
    }
    let clean = evaluate(&lab.runs[0].pre, &data.val, None)?.top1;
    let noisy = evaluate(&lab.runs[0].pre, &data.val, Some(&CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity: 3, seed: 0 }))?.top1;
    verdict(
        wins >= 6,
        format!(
            "TAF >= continuation on {wins}/8: {}; baseline gaussian-noise drop {:.1}",
            cells.join(", "),
            clean - noisy
        ),
    )
}

fn expected_cells(table: &str) -> Vec<Vec<&'static str>> {
    // alpha, epsilon_255, beta_255, steps, frames_n, inclusion
    let row = |a: &'static str, e: &'static str, b: &'static str, k: &'static str, n: &'static str, i: &'static str| {
        vec![a, e, b, k, n, i]
    };
    match table {
        "alpha" => ["0.2", "0.5", "0.7", "0.8"].map(|a| row(a, "64", "32", "1", "8", "incorrect")).to_vec(),
        "attack" => vec![
            row("0.7", "6", "3", "1", "8", "incorrect"),
            row("0.7", "6", "3", "3", "8", "incorrect"),
            row("0.7", "64", "32", "1", "8", "incorrect"),
            row("0.7", "64", "32", "3", "8", "incorrect"),
        ],
        "frames" => ["2", "4", "8"].map(|n| row("0.7", "64", "32", "1", n, "incorrect")).to_vec(),
        "inclusion" => ["all", "correct", "incorrect"].map(|i| row("0.7", "64", "32", "1", "8", i)).to_vec(),
        _ => Vec::new(),
    }
}

fn ablation(lab: &mut Lab) -> Result<Verdict> {
    lab.ensure_runs()?;
    let dir = tempfile::tempdir().map_err(|e| taflab::Error::io("tempdir", e))?;
    let ck = dir.path().join("pretrained.ckpt");
    lab.runs[0].pretrained.save(&ck)?;
    let tables = ["alpha", "attack", "frames", "inclusion"];
    let cfg = RunConfig {
        data: desk_spec(),
        checkpoint: Some(ck),
        out: dir.path().join("ablate"),
        ablate_tables: tables.iter().map(|s| s.to_string()).collect(),
        ablate_baseline: true,
        ..RunConfig::default()
    };
    cmd_ablate(&cfg)?;
    let mut problems = Vec::new();
    let mut summary = Vec::new();
    for table in tables {
        let path = cfg.out.join(format!("ablation_{table}.tsv"));
        let text = std::fs::read_to_string(&path).map_err(|e| taflab::Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(ABLATION_HEADER) {
            problems.push(format!("{table}: header"));
        }
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
        let baseline = rows.iter().filter(|r| r.get(1) == Some(&"baseline")).count();
        let cells: Vec<Vec<&str>> = rows.iter().filter(|r| r.get(1) == Some(&"taf")).map(|r| r[2..8].to_vec()).collect();
        if baseline != 1 || cells != expected_cells(table) {
            problems.push(format!("{table}: cells {cells:?}"));
        }
        let numeric = rows.iter().all(|r| r.len() == 13 && r[9..].iter().all(|v| v.parse::<f64>().is_ok_and(f64::is_finite)));
        if !numeric {
            problems.push(format!("{table}: non-numeric metrics"));
        }
        let top1: Vec<&str> = rows.iter().map(|r| r.get(9).copied().unwrap_or("?")).collect();
        summary.push(format!("{table} [{}]", top1.join(" ")));
    }
    let detail = if problems.is_empty() { summary.join("; ") } else { problems.join("; ") };
    verdict(problems.is_empty(), detail)
}

type Criterion = fn(&mut Lab) -> Result<Verdict>;

fn main() {
    let skip: Vec<usize> = std::env::var("TAF_ACCEPT_SKIP")
        .unwrap_or_default()
        .split(',')
        .filter_map(|s| s.trim().parse().ok())
        .collect();
    let mins = |m: u64| Duration::from_secs(60 * m);
    // Execution order puts the shared training runs under criterion 6.
    let criteria: [(usize, &str, Duration, Criterion); 9] = [
        (1, "gradient suite", mins(2), gradients),
        (3, "CAM contracts", mins(1), cam_contracts),
        (4, "dual-BN isolation", mins(5), dual_bn_isolation),
        (5, "loss accounting and alpha=1 collapse", mins(10), accounting),
        (6, "directional accuracy and loss gap", mins(45), directional),
        (7, "attention spread", mins(45), attention_spread),
        (8, "corruption robustness", mins(15), ood),
        (2, "attack invariants", mins(5), attack_invariants),
        (9, "ablation harness", mins(180), ablation),
    ];
    let mut lab = Lab::default();
    let mut lines = BTreeMap::new();
    let mut failed = false;
    for (n, name, budget, run) in criteria {
        if skip.contains(&n) {
            let line = format!("criterion {n} SKIP {name}");
            println!("{line}");
            lines.insert(n, line);
            continue;
        }
        let t = Instant::now();
        let outcome = run(&mut lab);
        let took = t.elapsed();
        let (pass, detail) = match outcome {
            Ok(v) => (v.pass && took <= budget, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed |= !pass;
        let line = format!(
            "criterion {n} {} {name}: {detail} [{:.1}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs()
        );
        println!("{line}");
        lines.insert(n, line);
    }
    println!("\nsummary");
    for line in lines.values() {
        println!("{line}");
    }
    if failed {
        std::process::exit(1);
    }
}
