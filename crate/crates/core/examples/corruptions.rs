//! Applies every corruption kind at each severity and reports how far each
//! moves the pixels.

use taflab::data::{corrupt, generate_dataset, CorruptionKind, CorruptionSpec, SyntheticSpec};

fn main() -> taflab::Result<()> {
    let data = generate_dataset(&SyntheticSpec { train_size: 4, val_size: 4, ..SyntheticSpec::default() })?;
    let clip = &data.val[0];
    let px = clip.frames.data();
    println!("{:<16}{}", "kind", (1..=5).map(|s| format!("{:>9}", format!("sev {s}"))).collect::<String>());
    for kind in CorruptionKind::ALL {
        let mut row = format!("{:<16}", kind.name());
        for severity in 1..=5 {
            let out = corrupt(clip, &CorruptionSpec { kind, severity, seed: 0 })?;
            let mad = out.frames.data().iter().zip(px).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / px.len() as f64;
            row.push_str(&format!("{mad:>9.4}"));
        }
        println!("{row}");
    }
    Ok(())
}
