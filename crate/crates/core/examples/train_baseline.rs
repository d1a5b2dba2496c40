//! Trains the clean-path model on a small synthetic task and prints the
//! metrics stream. The data is set to the easy end of the difficulty knobs
//! so a few epochs are enough to leave chance.

use taflab::data::{generate_dataset, SyntheticSpec};
use taflab::nn::ModelConfig;
use taflab::taf::{metrics_csv, train_baseline, LrSchedule, TrainConfig, TrainState};

fn main() -> taflab::Result<()> {
    let spec = SyntheticSpec {
        n_classes: 4,
        frames: 4,
        height: 16,
        width: 16,
        sprite_size: 3,
        split_frame: 2,
        speed: 1,
        noise: 0.05,
        contrast_min: 0.5,
        contrast_max: 0.8,
        clutter: 0,
        train_size: 512,
        val_size: 64,
        ..SyntheticSpec::default()
    };
    let data = generate_dataset(&spec)?;
    let model = ModelConfig {
        frames: 4,
        height: 16,
        width: 16,
        classes: 4,
        widths: vec![8, 16],
        strides: vec![2, 1],
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        epochs: 20,
        lr: LrSchedule { initial: 0.05, factor: 0.1, decay_every: 15 },
        batch_size: 16,
        ..TrainConfig::default()
    };
    let mut state = TrainState::fresh(model, 0, &train)?;
    let log = train_baseline(&mut state, &data, &train)?;
    print!("{}", metrics_csv(&log.metrics));
    Ok(())
}
