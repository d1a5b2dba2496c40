use anyhow::Context;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.is_empty() || matches!(args[0].as_str(), "-h" | "--help" | "help") {
        println!("{}", taflab::cli::usage());
        return;
    }
    if let Err(e) = run(&args) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(args: &[String]) -> anyhow::Result<()> {
    let outcome = taflab::cli::run(args).with_context(|| format!("`{}` failed", args[0]))?;
    print!("{}", outcome.summary);
    if !outcome.summary.ends_with('\n') {
        println!();
    }
    for a in &outcome.artifacts {
        eprintln!("wrote {}", a.display());
    }
    Ok(())
}
