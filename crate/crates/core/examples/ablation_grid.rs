//! Lists every ablation table's cells, then runs the `frames` table on a
//! tiny task and prints the report.

use taflab::data::{generate_dataset, SyntheticSpec};
use taflab::nn::ModelConfig;
use taflab::taf::{ablation_grid, ablation_sweep, ablation_tsv, train_baseline, TafConfig, TrainConfig, TrainState, ABLATION_TABLES};

fn main() -> taflab::Result<()> {
    let mut base = TafConfig::default();
    base.train.epochs = 2;
    for table in ABLATION_TABLES {
        println!("{table}: {} cells", ablation_grid(table, &base)?.len());
    }

    let data = generate_dataset(&SyntheticSpec { train_size: 64, val_size: 64, ..SyntheticSpec::default() })?;
    let train = TrainConfig { epochs: 3, ..TrainConfig::default() };
    let mut state = TrainState::fresh(ModelConfig::default(), 0, &train)?;
    train_baseline(&mut state, &data, &train)?;
    let cells = ablation_grid("frames", &base)?;
    let rows = ablation_sweep(&state.checkpoint(), &ModelConfig::default(), &data, &cells, Some(&base.train))?;
    print!("{}", ablation_tsv(&rows));
    Ok(())
}
