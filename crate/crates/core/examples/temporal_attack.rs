//! Sign-gradient attack on the CAM loss versus the cross-entropy attack:
//! budget use and how much each moves attention onto non-key frames.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taflab::attack::{attack_batch, AttackConfig, InclusionPolicy, LossKind};
use taflab::cam::{cam_loss, compute_cams};
use taflab::data::{generate_dataset, Batch, SyntheticSpec};
use taflab::nn::ModelConfig;
use taflab::taf::{train_baseline, TrainConfig, TrainState};

fn main() -> taflab::Result<()> {
    let data = generate_dataset(&SyntheticSpec { train_size: 128, val_size: 16, ..SyntheticSpec::default() })?;
    let train = TrainConfig { epochs: 3, ..TrainConfig::default() };
    let mut state = TrainState::fresh(ModelConfig::default(), 0, &train)?;
    train_baseline(&mut state, &data, &train)?;
    let model = &state.model;
    let batch = Batch::from_clips(&data.val)?;

    for loss in [LossKind::Cam, LossKind::CrossEntropy] {
        for steps in [1, 3] {
            let cfg = AttackConfig { loss, steps, inclusion: InclusionPolicy::All, ..AttackConfig::default() };
            let aug = attack_batch(model, &batch.data, &batch.labels, &cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
            let before = compute_cams(model, &batch.data, &aug.targets)?;
            let after = compute_cams(model, &aug.data, &aug.targets)?;
            let (mut gain, mut max_delta) = (0.0, 0.0f32);
            for b in 0..aug.clips() {
                gain += cam_loss(&after[b], cfg.n_frames)? - cam_loss(&before[b], cfg.n_frames)?;
                max_delta = max_delta.max(aug.max_abs_delta(b));
            }
            println!(
                "{loss} K={steps}: max |delta| {:.1}/255, mean CAM-loss change {:+.4}",
                max_delta * 255.0,
                gain / aug.clips() as f64
            );
        }
    }
    Ok(())
}
