use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;
use flexipatch_cli::config::parse_override;
use flexipatch_cli::{exit_code, init_threads, run_verb, RunConfig, Verb};

/// Compute-elastic patch tokenization experiments.
#[derive(Parser, Debug)]
#[command(name = "flexipatch", version)]
struct Cli {
    verb: Verb,
    /// TOML config, or a previous run's manifest.json to replay it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.embed_dim=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `eval.sizes`, comma separated.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    /// Shorthand for `rollout.schedule`.
    #[arg(long)]
    schedule: Option<String>,
    /// Shorthand for `rollout.steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Shorthand for `checkpoint`.
    #[arg(long)]
    checkpoint: Option<String>,
    /// Shorthand for `data.dir`.
    #[arg(long)]
    data: Option<String>,
    /// Run directories for `compare`, or the rollout directory for `spectra`.
    inputs: Vec<String>,
}

fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut o = Vec::new();
    for s in &cli.overrides {
        o.push(parse_override(s)?);
    }
    if !cli.sizes.is_empty() {
        o.push(("eval.sizes".into(), format!("{:?}", cli.sizes)));
    }
    if let Some(s) = &cli.schedule {
        o.push(("rollout.schedule".into(), quoted(s)));
    }
    if let Some(n) = cli.steps {
        o.push(("rollout.steps".into(), n.to_string()));
    }
    if let Some(c) = &cli.checkpoint {
        o.push(("checkpoint".into(), quoted(c)));
    }
    if let Some(d) = &cli.data {
        o.push(("data.dir".into(), quoted(d)));
    }
    if let Some(s) = cli.seed {
        o.push(("seed".into(), s.to_string()));
    }
    match cli.verb {
        Verb::Compare if !cli.inputs.is_empty() => {
            let runs: Vec<String> = cli.inputs.iter().map(|r| quoted(r)).collect();
            o.push(("compare.runs".into(), format!("[{}]", runs.join(", "))));
        }
        Verb::Spectra if cli.inputs.len() == 1 => o.push(("spectra.input".into(), quoted(&cli.inputs[0]))),
        _ if !cli.inputs.is_empty() => {
            anyhow::bail!(flexipatch_cli::ConfigError(format!(
                "unexpected arguments {:?} for `{}`",
                cli.inputs,
                cli.verb.name()
            )))
        }
        _ => {}
    }
    Ok(o)
}

fn run(cli: &Cli) -> Result<()> {
    init_threads()?;
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides(cli)?)?;
    let m = run_verb(cli.verb, &cfg, &cli.out)?;
    for s in &m.summary {
        let mut key = s.metric.clone();
        if let Some(v) = &s.variant {
            key += &format!(" {}", v);
        }
        if let Some(z) = s.size {
            key += &format!(" size={}", z);
        }
        if let Some(t) = s.step {
            key += &format!(" step={}", t);
        }
        println!("{}: {}", key, s.value);
    }
    println!("wrote {}", cli.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
