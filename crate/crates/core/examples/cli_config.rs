//! Resolves a run configuration the way the `taf` binary does (defaults,
//! then a config file, then flags) and runs a quick evaluation through
//! the command layer.

use taflab::cli::{parse_config, run_command, Command};

fn main() -> taflab::Result<()> {
    let dir = std::env::temp_dir().join("taflab-cli-example");
    std::fs::create_dir_all(&dir).map_err(|e| taflab::Error::io(&dir, e))?;
    let file = dir.join("run.cfg");
    std::fs::write(&file, "# small, fast run\ndata.train_size=16\ndata.val_size=64\ntaf.alpha=0.5\n")
        .map_err(|e| taflab::Error::io(&file, e))?;
    let args: Vec<String> = ["--config", file.to_str().unwrap_or_default(), "--alpha", "0.7", "--out", dir.to_str().unwrap_or_default()]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let cfg = parse_config(&args)?;
    print!("{}", cfg.echo());
    let outcome = run_command(Command::Eval, &cfg)?;
    print!("{}", outcome.summary);
    for p in outcome.artifacts {
        println!("wrote {}", p.display());
    }
    Ok(())
}
