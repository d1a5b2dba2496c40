//! Per-frame GradCAM on a briefly trained model: frame masses, the
//! low-to-high ranking, and the CAM loss over the N least attended frames.

use taflab::cam::{cam_loss, compute_cam};
use taflab::data::{generate_dataset, SyntheticSpec};
use taflab::nn::ModelConfig;
use taflab::taf::{train_baseline, TrainConfig, TrainState};

fn main() -> taflab::Result<()> {
    let spec = SyntheticSpec { train_size: 128, val_size: 16, ..SyntheticSpec::default() };
    let data = generate_dataset(&spec)?;
    let train = TrainConfig { epochs: 3, ..TrainConfig::default() };
    let mut state = TrainState::fresh(ModelConfig::default(), 0, &train)?;
    train_baseline(&mut state, &data, &train)?;

    let clip = &data.val[0];
    let stack = compute_cam(&state.model, &clip.frames, clip.label)?;
    println!("clip {} label {}", clip.clip_id, clip.label);
    for (t, m) in stack.frame_mass.iter().enumerate() {
        println!("frame {t}: mass {m:8.3}");
    }
    println!("ranking (least attended first): {:?}", stack.pi);
    println!("mass entropy {:.4} (uniform would be {:.4})", stack.mass_entropy(), (spec.frames as f64).ln());
    for n in [1, 2, 4, 8] {
        println!("cam loss N={n}: {:.4}", cam_loss(&stack, n)?);
    }
    Ok(())
}
