use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;

use config::RawConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "deepblur", version, about = "Latent-space image obfuscation")]
struct Cli {
    /// Flat key = value configuration file; missing keys take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set obfuscator.sigma=2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub struct InOut {
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Search the latent that regenerates a PNG and write it as a latent file.
    Invert {
        #[command(flatten)]
        io: InOut,
        /// Also write the loss trajectory as `step,loss,elapsed_ms`.
        #[arg(long, value_name = "CSV")]
        trajectory: Option<PathBuf>,
        /// Also write the reconstruction.
        #[arg(long, value_name = "PNG")]
        image: Option<PathBuf>,
    },
    /// Gaussian-filter (or average) a latent file.
    Blur {
        #[command(flatten)]
        io: InOut,
        /// Defaults to `obfuscator.sigma`.
        #[arg(long, conflicts_with = "average")]
        sigma: Option<f64>,
        /// Replace every entry with the global mean.
        #[arg(long)]
        average: bool,
        /// Also render the filtered latent.
        #[arg(long, value_name = "PNG")]
        image: Option<PathBuf>,
    },
    /// Render a latent file.
    Generate {
        #[command(flatten)]
        io: InOut,
    },
    /// Apply the configured obfuscator to a PNG.
    Obfuscate {
        #[command(flatten)]
        io: InOut,
        /// Identity label, read by advnoise only.
        #[arg(long, default_value_t = 0)]
        label: usize,
        /// For deepblur kinds, also write the filtered latent.
        #[arg(long, value_name = "FILE")]
        latent: Option<PathBuf>,
    },
    /// Apply a pixel-space baseline to a PNG.
    Baseline {
        #[command(flatten)]
        io: InOut,
        /// pixel_blur | pixelate | mask | advnoise
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0)]
        label: usize,
    },
    /// PSNR/SSIM/MS-SSIM for two PNGs, or a quality CSV for two directories.
    Metrics {
        #[arg(long = "ref", value_name = "PATH")]
        reference: PathBuf,
        #[arg(long, value_name = "PATH")]
        test: PathBuf,
        /// Method column for directory mode.
        #[arg(long, default_value = "test")]
        method: String,
        #[arg(long, value_name = "CSV")]
        out: Option<PathBuf>,
    },
    /// Re-identification accuracy under the threat models.
    Eval {
        #[arg(long, value_name = "CSV")]
        out: Option<PathBuf>,
    },
    /// Loss per step for every optimizer on one benchmark target.
    CompareOptimizers {
        #[arg(long, value_name = "CSV")]
        out: Option<PathBuf>,
    },
    /// Write the synthetic identity dataset as PNGs, latent files and labels.
    MakeDataset {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run the mock recognition service until killed.
    ServeMock {
        /// Defaults to `serve.addr`.
        #[arg(long)]
        addr: Option<String>,
    },
    /// Print the default configuration file.
    Defaults,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut raw = match &cli.config {
        Some(path) => RawConfig::load(path)?,
        None => RawConfig::default(),
    };
    for o in &cli.overrides {
        raw.set(o)?;
    }
    let cfg = raw.resolve()?;
    match cli.command {
        Command::Invert {
            io,
            trajectory,
            image,
        } => commands::invert(&cfg, &io.input, &io.out, trajectory.as_deref(), image.as_deref()),
        Command::Blur {
            io,
            sigma,
            average,
            image,
        } => commands::blur(&cfg, &io.input, &io.out, sigma, average, image.as_deref()),
        Command::Generate { io } => commands::generate(&cfg, &io.input, &io.out),
        Command::Obfuscate { io, label, latent } => {
            commands::obfuscate(&cfg, &io.input, &io.out, label, latent.as_deref())
        }
        Command::Baseline { io, kind, label } => {
            commands::baseline(&cfg, &io.input, &io.out, &kind, label)
        }
        Command::Metrics {
            reference,
            test,
            method,
            out,
        } => commands::metrics(&cfg, &reference, &test, &method, out.as_deref()),
        Command::Eval { out } => commands::eval(&cfg, out.as_deref()),
        Command::CompareOptimizers { out } => commands::compare_optimizers(&cfg, out.as_deref()),
        Command::MakeDataset { out } => commands::make_dataset(&cfg, &out),
        Command::ServeMock { addr } => commands::serve_mock(&cfg, addr.as_deref()),
        Command::Defaults => {
            print!("{}", config::defaults_file());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            let msg = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", CliError::Usage(msg.to_string()).line());
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
