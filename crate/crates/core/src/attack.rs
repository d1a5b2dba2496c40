//! Sign-gradient ascent attacks bounded in ℓ∞.
//!
//! The temporal attack ascends the CAM loss of the `N` least-attended frames
//! while perturbing every frame; the vanilla attack ascends cross entropy on
//! the true label. Both run the model on its clean normalization path in eval
//! mode, so neither touches parameters or statistics.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::cam::cam_objective;
use crate::error::{Error, Result};
use crate::nn::VideoModel;
use crate::tensor::{Graph, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelPolicy {
    /// Correct predictions get a random wrong target; wrong ones the true label.
    PaperRule,
    AlwaysTrue,
    AlwaysRandom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InclusionPolicy {
    All,
    CorrectOnly,
    IncorrectOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Cam,
    CrossEntropy,
}

macro_rules! named_enum {
    ($t:ty { $($v:path => $s:literal),+ $(,)? }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(Error::Config(format!("unknown {} `{s}`", stringify!($t)))),
                }
            }
        }
    };
}

named_enum!(LabelPolicy {
    LabelPolicy::PaperRule => "paper-rule",
    LabelPolicy::AlwaysTrue => "always-true",
    LabelPolicy::AlwaysRandom => "always-random",
});
named_enum!(InclusionPolicy {
    InclusionPolicy::All => "all",
    InclusionPolicy::CorrectOnly => "correct",
    InclusionPolicy::IncorrectOnly => "incorrect",
});
named_enum!(LossKind {
    LossKind::Cam => "cam",
    LossKind::CrossEntropy => "ce",
});

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    /// ℓ∞ budget in pixel units (`[0, 1]` scale).
    pub epsilon: f64,
    pub beta: f64,
    pub steps: usize,
    /// Number of lowest-mass frames entering the CAM loss.
    pub n_frames: usize,
    pub label_policy: LabelPolicy,
    pub inclusion: InclusionPolicy,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 64.0 / 255.0,
            beta: 32.0 / 255.0,
            steps: 1,
            n_frames: 8,
            label_policy: LabelPolicy::PaperRule,
            inclusion: InclusionPolicy::IncorrectOnly,
            loss: LossKind::Cam,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.epsilon < 0.0 || self.beta < 0.0 || (self.epsilon > 0.0 && self.beta > self.epsilon) {
            return Err(Error::Config(format!(
                "need 0 ≤ beta ≤ epsilon, got beta={} epsilon={}",
                self.beta, self.epsilon
            )));
        }
        if self.epsilon > 0.0 && self.beta == 0.0 {
            return Err(Error::Config("beta must be positive when epsilon is".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack needs at least one step".into()));
        }
        if self.n_frames == 0 || self.n_frames > frames {
            return Err(Error::Config(format!("N = {} outside 1..={frames}", self.n_frames)));
        }
        Ok(())
    }
}

/// Attack target for one clip.
pub fn assign_target(pred: usize, true_label: usize, classes: usize, policy: LabelPolicy, rng: &mut impl Rng) -> usize {
    let random_other = |rng: &mut dyn rand::RngCore| {
        if classes < 2 {
            return true_label;
        }
        let k = rng.gen_range(0..classes - 1);
        if k >= true_label {
            k + 1
        } else {
            k
        }
    };
    match policy {
        LabelPolicy::AlwaysTrue => true_label,
        LabelPolicy::AlwaysRandom => random_other(rng),
        LabelPolicy::PaperRule if pred == true_label => random_other(rng),
        LabelPolicy::PaperRule => true_label,
    }
}

pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, S::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Perturbed clips together with everything used to produce them.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch<S: Scalar = f32> {
    /// `X^K`, laid out like the input batch.
    pub data: Vec<S>,
    /// `X^K − X`.
    pub deltas: Vec<S>,
    pub targets: Vec<usize>,
    pub included: Vec<bool>,
    /// Clean eval-mode predictions on the unperturbed clips.
    pub predictions: Vec<usize>,
    /// Number of (clip, step) pairs whose CAM stack was flat.
    pub flat_steps: usize,
}

impl<S: Scalar> AugmentedBatch<S> {
    pub fn clips(&self) -> usize {
        self.targets.len()
    }

    pub fn clip(&self, b: usize) -> &[S] {
        let n = self.data.len() / self.clips();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn max_abs_delta(&self, b: usize) -> S {
        let n = self.deltas.len() / self.clips();
        self.deltas[b * n..(b + 1) * n]
            .iter()
            .fold(S::zero(), |m, &d| if d.abs() > m { d.abs() } else { m })
    }

    pub fn num_included(&self) -> usize {
        self.included.iter().filter(|&&i| i).count()
    }
}

fn sign<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

/// `steps` iterations of `X ← clip₀₁(Π_ε(X + β·sgn ∇L))` on a stacked batch.
/// Returns the perturbed data and the number of flat CAM stacks met.
pub fn perturb<S: Scalar>(
    model: &VideoModel<S>,
    clean: &[S],
    targets: &[usize],
    cfg: &AttackConfig,
) -> Result<(Vec<S>, usize)> {
    cfg.validate(model.config().frames)?;
    let clips = targets.len();
    let shape = model.input_shape(clips);
    if clean.len() != shape.iter().product::<usize>() {
        return Err(Error::Shape(format!("{} values for input {shape:?}", clean.len())));
    }
    let (eps, beta) = (S::lit(cfg.epsilon), S::lit(cfg.beta));
    let mut x = clean.to_vec();
    let mut flat = 0;
    if clips == 0 || cfg.epsilon == 0.0 {
        return Ok((x, 0));
    }
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let input = g.input(&shape, x.clone(), true)?;
        let total = match cfg.loss {
            LossKind::Cam => {
                let obj = cam_objective(model, &mut g, input, targets, cfg.n_frames)?;
                flat += obj.stacks.iter().filter(|s| s.degenerate).count();
                let mut acc = obj.losses[0];
                for &l in &obj.losses[1..] {
                    acc = g.add(acc, l)?;
                }
                acc
            }
            LossKind::CrossEntropy => {
                let b = model.bind(&mut g, false);
                let out = model.forward_inference(&mut g, &b, input)?;
                let ce = g.cross_entropy(out.logits, targets)?;
                g.sum_all(ce)?
            }
        };
        g.backward(total)?;
        let grad = g.grad_or_zeros(input);
        for ((xi, &x0), &gi) in x.iter_mut().zip(clean).zip(&grad) {
            let stepped = *xi + beta * sign(gi);
            let projected = stepped.max(x0 - eps).min(x0 + eps);
            *xi = projected.max(S::zero()).min(S::one());
        }
    }
    Ok((x, flat))
}

/// Temporal (CAM-loss) attack of clips stacked in `clean`, one target each.
pub fn temporal_attack<S: Scalar>(
    model: &VideoModel<S>,
    clean: &[S],
    targets: &[usize],
    cfg: &AttackConfig,
) -> Result<(Vec<S>, usize)> {
    perturb(model, clean, targets, &AttackConfig { loss: LossKind::Cam, ..cfg.clone() })
}

/// Cross-entropy attack on the true labels.
pub fn vanilla_attack<S: Scalar>(
    model: &VideoModel<S>,
    clean: &[S],
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<S>> {
    perturb(model, clean, labels, &AttackConfig { loss: LossKind::CrossEntropy, ..cfg.clone() }).map(|r| r.0)
}

/// Predicts, filters by the inclusion policy, assigns targets and attacks the
/// included clips. Excluded clips are returned unchanged with target `y`.
pub fn attack_batch<S: Scalar>(
    model: &VideoModel<S>,
    batch: &[S],
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<AugmentedBatch<S>> {
    let clips = labels.len();
    if clips == 0 {
        return Err(Error::Domain("attack_batch needs a non-empty batch".into()));
    }
    cfg.validate(model.config().frames)?;
    let classes = model.config().classes;
    let logits = model.predict_logits(batch, clips)?;
    let predictions: Vec<usize> = logits.chunks(classes).map(argmax).collect();
    let included: Vec<bool> = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| match cfg.inclusion {
            InclusionPolicy::All => true,
            InclusionPolicy::CorrectOnly => p == y,
            InclusionPolicy::IncorrectOnly => p != y,
        })
        .collect();
    let mut targets = labels.to_vec();
    for b in (0..clips).filter(|&b| included[b]) {
        if cfg.loss == LossKind::Cam {
            targets[b] = assign_target(predictions[b], labels[b], classes, cfg.label_policy, rng);
        }
    }
    let per = batch.len() / clips;
    let chosen: Vec<usize> = (0..clips).filter(|&b| included[b]).collect();
    let mut data = batch.to_vec();
    let mut flat_steps = 0;
    if !chosen.is_empty() {
        let sub: Vec<S> = chosen.iter().flat_map(|&b| batch[b * per..(b + 1) * per].iter().copied()).collect();
        let sub_targets: Vec<usize> = chosen.iter().map(|&b| targets[b]).collect();
        let (adv, flat) = perturb(model, &sub, &sub_targets, cfg)?;
        flat_steps = flat;
        for (k, &b) in chosen.iter().enumerate() {
            data[b * per..(b + 1) * per].copy_from_slice(&adv[k * per..(k + 1) * per]);
        }
    }
    let deltas = data.iter().zip(batch).map(|(&a, &x)| a - x).collect();
    Ok(AugmentedBatch { data, deltas, targets, included, predictions, flat_steps })
}
