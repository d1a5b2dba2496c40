//! Generates a small two-phase motion dataset, prints a clip's label
//! decomposition as ASCII frames, and round-trips it through disk.

use taflab::data::{generate_dataset, load_dataset, save_dataset, SyntheticSpec};

fn main() -> taflab::Result<()> {
    let spec = SyntheticSpec {
        height: 16,
        width: 16,
        sprite_size: 3,
        speed: 1,
        clutter: 0,
        noise: 0.0,
        train_size: 32,
        val_size: 16,
        ..SyntheticSpec::default()
    };
    let data = generate_dataset(&spec)?;
    let clip = &data.train[0];
    let (a, b) = spec.phases_of(clip.label);
    println!("clip {} label {} = {a:?} then {b:?} (switch at frame {})", clip.clip_id, clip.label, spec.split_frame);
    for t in [0, spec.frames - 1] {
        println!("frame {t}");
        for row in clip.frame(t).chunks(spec.width) {
            let line: String = row.iter().map(|&v| if v > 0.5 { '#' } else if v > 0.2 { '+' } else { '.' }).collect();
            println!("  {line}");
        }
    }
    let dir = std::env::temp_dir().join("taflab-synthetic-example");
    save_dataset(&data, &dir)?;
    let back = load_dataset(&dir)?;
    println!("saved to {} and reloaded: identical = {}", dir.display(), back.train == data.train && back.val == data.val);
    Ok(())
}
