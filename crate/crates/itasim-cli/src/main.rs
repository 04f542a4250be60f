//! Command-line front end over the simulator library. Every verb maps onto
//! one function in `itasim::commands`; this file only parses arguments,
//! routes results to stdout or files, and turns errors into an exit status.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use itasim::blocks::ScaleMode;
use itasim::commands::{
    cmd_calibrate, cmd_compare, cmd_cycles, cmd_fit, cmd_run, read_config, CalibrateSpec,
    InputSpec, Overrides,
};
use itasim::mac::Tile;
use itasim::reference::CalibStat;

#[derive(Parser)]
#[command(
    name = "itasim",
    about = "Bit-exact simulator for an integer-only transformer encoder accelerator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the exponential and erf polynomials and print the constants.
    Fit {
        /// Refresh the fit constants inside an existing package directory.
        #[arg(long)]
        package: Option<PathBuf>,
    },
    /// Generate a seeded toy model, calibrate it, and write a package.
    Calibrate {
        /// Model configuration file (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Directory the package is written into.
        #[arg(long)]
        out: PathBuf,
        /// Number of encoder layers to generate.
        #[arg(long, default_value_t = 2)]
        layers: usize,
        /// Seed for weight generation and calibration samples.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of calibration samples.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Calibrate on this percentile of observed magnitudes instead of the maximum.
        #[arg(long)]
        percentile: Option<f64>,
    },
    /// Run integer inference over a packaged model and print the run report.
    Run {
        /// Package directory produced by calibrate.
        #[arg(long)]
        package: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        /// Also write the run report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the scheduler state trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Print the cycle and latency report for a configuration; no weights needed.
    Cycles {
        /// Model configuration file (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Number of encoder layers to schedule.
        #[arg(long)]
        layers: usize,
        /// Also write the cycle report as JSON to this file.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Compare integer inference against the float mirror, dumping both outputs.
    Compare {
        /// Package directory produced by calibrate.
        #[arg(long)]
        package: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        /// Also write the comparison report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
}

/// Stimulus selection shared by run and compare.
#[derive(Args)]
struct InputArgs {
    /// Seed for the generated input.
    #[arg(long, default_value_t = 0, conflicts_with = "zero_input")]
    seed: u64,
    /// Use an all-zero input instead of a seeded one.
    #[arg(long)]
    zero_input: bool,
}

impl InputArgs {
    fn spec(&self) -> InputSpec {
        if self.zero_input {
            InputSpec::Zero
        } else {
            InputSpec::Seed(self.seed)
        }
    }
}

/// Configuration knobs layered over the packaged or loaded configuration.
#[derive(Args)]
struct OverrideArgs {
    /// Clock period in nanoseconds.
    #[arg(long)]
    clock_ns: Option<f64>,
    /// Number of attention heads processed in parallel.
    #[arg(long)]
    heads_parallel: Option<usize>,
    /// Score scaling mode.
    #[arg(long, value_parser = parse_scale_mode)]
    scale_mode: Option<ScaleMode>,
    /// MAC array tile as ROWSxCOLS, for example 64x64.
    #[arg(long, value_parser = parse_tile)]
    tile: Option<Tile>,
}

impl OverrideArgs {
    fn to_overrides(&self) -> Overrides {
        Overrides {
            clock_ns: self.clock_ns,
            heads_parallel: self.heads_parallel,
            scale_mode: self.scale_mode,
            tile: self.tile,
        }
    }
}

fn parse_scale_mode(s: &str) -> Result<ScaleMode, String> {
    match s {
        "sqrt-dh-shift" => Ok(ScaleMode::SqrtDhShift),
        "model-dim" => Ok(ScaleMode::ModelDim),
        other => Err(format!(
            "unknown scale mode {other:?}; expected sqrt-dh-shift or model-dim"
        )),
    }
}

fn parse_tile(s: &str) -> Result<Tile, String> {
    let (r, c) = s
        .split_once('x')
        .ok_or_else(|| format!("tile {s:?} is not of the form ROWSxCOLS"))?;
    let rows: usize = r.parse().map_err(|_| format!("tile rows {r:?} is not a count"))?;
    let cols: usize = c.parse().map_err(|_| format!("tile cols {c:?} is not a count"))?;
    Tile::new(rows, cols).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> itasim::Result<()> {
    match cli.command {
        Command::Fit { package } => {
            let text = cmd_fit(package.as_deref())?;
            print!("{text}");
        }
        Command::Calibrate {
            config,
            out,
            layers,
            seed,
            samples,
            percentile,
        } => {
            let cfg = read_config(&config)?;
            let spec = CalibrateSpec {
                n_layers: layers,
                seed,
                n_samples: samples,
                stat: match percentile {
                    Some(p) => CalibStat::Percentile(p),
                    None => CalibStat::MaxAbs,
                },
            };
            let text = cmd_calibrate(&cfg, &spec, &out)?;
            print!("{text}");
        }
        Command::Run {
            package,
            input,
            report,
            trace,
            overrides,
        } => {
            let art = cmd_run(&package, input.spec(), &overrides.to_overrides())?;
            if let Some(path) = report {
                fs::write(path, &art.report_text)?;
            }
            if let Some(path) = trace {
                fs::write(path, &art.trace_text)?;
            }
            print!("{}", art.report_text);
        }
        Command::Cycles {
            config,
            layers,
            report,
            overrides,
        } => {
            let cfg = read_config(&config)?;
            let (cycles, text) = cmd_cycles(&cfg, layers, &overrides.to_overrides())?;
            if let Some(path) = report {
                let mut json = serde_json::to_string_pretty(&cycles)?;
                json.push('\n');
                fs::write(path, json)?;
            }
            print!("{text}");
        }
        Command::Compare {
            package,
            input,
            report,
            overrides,
        } => {
            let (_, text) = cmd_compare(&package, input.spec(), &overrides.to_overrides())?;
            if let Some(path) = report {
                fs::write(path, &text)?;
            }
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
