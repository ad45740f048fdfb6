use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xbsim::xbar::CrossbarAccelerator;
use xbsim_cli::config::{ExperimentConfig, Overrides};
use xbsim_cli::{recipes, CliError};

#[derive(Parser)]
#[command(name = "xbsim", version, about = "Crossbar accelerator simulation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// Check a config file and report the crossbar area it needs.
    Validate { config: PathBuf },
    /// Convert a saved accelerator state into a text conductance map.
    DumpMap { state: PathBuf, out: PathBuf },
}

fn load(path: &PathBuf) -> Result<ExperimentConfig, CliError> {
    let overrides = Overrides::from_env()?;
    Ok(ExperimentConfig::load(path, &overrides)?)
}

fn validate(path: &PathBuf) -> Result<ExitCode, CliError> {
    let cfg = load(path)?;
    let mut resolved = cfg.clone();
    resolved.train.lr = Some(cfg.train.learning_rate());
    resolved.train.p_max = Some(cfg.train.pulses());
    let echo = toml::to_string(&resolved).map_err(|e| xbsim::Error::Format(e.to_string()))?;
    print!("{echo}");
    let a = &cfg.accelerator;
    let capacity = a.rows * a.cols;
    let mut fits = true;
    for r in cfg.redundancies() {
        let required = cfg.required_devices(r);
        let oversized = cfg.train.sizes.windows(2).any(|w| w[0] > a.rows || w[1] > a.cols);
        let ok = required <= capacity && !oversized;
        println!(
            "# area r={r}: {required} devices required, {capacity} available ({:.1}%){}",
            100.0 * required as f64 / capacity as f64,
            if ok { "" } else { " -> OutOfDevices" }
        );
        fits &= ok;
    }
    Ok(if fits { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

fn dump_map(state: &PathBuf, out: &PathBuf) -> Result<(), CliError> {
    let acc = CrossbarAccelerator::<f64>::load_state(state)?;
    let f = std::io::BufWriter::new(std::fs::File::create(out)?);
    acc.write_map(f)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config } => load(config).and_then(|cfg| recipes::run(&cfg)).map(|dir| {
            println!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }),
        Command::Validate { config } => validate(config),
        Command::DumpMap { state, out } => dump_map(state, out).map(|_| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
