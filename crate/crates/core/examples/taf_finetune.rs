//! Pretrains a baseline, then compares plain continuation with the
//! adversarial fine-tune from the same checkpoint.

use taflab::data::{generate_dataset, SyntheticSpec};
use taflab::nn::ModelConfig;
use taflab::taf::{cam_entropy, evaluate, finetune_taf, probe_clips, train_baseline, LrSchedule, TafConfig, TrainConfig, TrainState};

fn main() -> taflab::Result<()> {
    // Mid-range difficulty, so the short baseline leaves chance.
    let spec = SyntheticSpec {
        noise: 0.08,
        contrast_min: 0.25,
        contrast_max: 0.6,
        clutter: 2,
        train_size: 512,
        val_size: 128,
        ..SyntheticSpec::default()
    };
    let data = generate_dataset(&spec)?;
    let train = TrainConfig {
        epochs: 20,
        lr: LrSchedule { initial: 0.05, factor: 0.1, decay_every: 15 },
        ..TrainConfig::default()
    };
    let mut base = TrainState::fresh(ModelConfig::default(), 0, &train)?;
    train_baseline(&mut base, &data, &train)?;
    let ck = base.checkpoint();

    let mut cfg = TafConfig::default();
    cfg.train.epochs = 4;
    let mut cont = TrainState::from_checkpoint(&ck, ModelConfig::default(), &cfg.train)?;
    train_baseline(&mut cont, &data, &cfg.train)?;
    let mut taf = TrainState::from_checkpoint(&ck, ModelConfig::default(), &cfg.train)?;
    let log = finetune_taf(&mut taf, &data, &cfg)?;

    let included: usize = log.steps.iter().map(|s| s.included).sum();
    println!("{} steps, {included} clips augmented", log.steps.len());
    let probe = probe_clips(&data);
    for (name, model) in [("pretrained", &base.model), ("continued", &cont.model), ("fine-tuned", &taf.model)] {
        let e = evaluate(model, &data.val, None)?;
        println!(
            "{name:>10}: top1 {:.2} loss {:.4} probe entropy {:.4}",
            e.top1,
            e.loss,
            cam_entropy(model, &probe)?
        );
    }
    Ok(())
}
