use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use obfsim::harness::{run_experiment, summarize, write_output, Experiment, ExperimentConfig, OutputFormat};
use obfsim::Error;

/// Location-obfuscation precoding simulator.
#[derive(Parser)]
#[command(name = "obfsim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// List experiment tags.
    ListExperiments,
    /// Check a config file and print it with all defaults filled in.
    Validate {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run an experiment with built-in defaults.
    Demo {
        experiment: String,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv or json.
    #[arg(long)]
    format: Option<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), Error> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(f) = &self.format {
            cfg.format = f.parse()?;
        }
        cfg.validate()
    }
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

fn load(path: &PathBuf, o: &Overrides) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::from_file(path).map_err(Failure::Config)?;
    o.apply(&mut cfg).map_err(Failure::Config)?;
    Ok(cfg)
}

fn execute(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let out = run_experiment(cfg).map_err(Failure::Runtime)?;
    let format: OutputFormat = cfg.format;
    let paths = write_output(cfg, &out, &cfg.output_dir, format).map_err(Failure::Runtime)?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    println!(
        "{:<14} {:<22} {:>6} {:>6} {:>12} {:>12} {:>12} {:>12}",
        "scenario", "variant", "trials", "errors", "aoa_err_deg", "range_err_m", "loc_err_m", "rssi_drop_db"
    );
    for row in summarize(&out.records) {
        println!(
            "{:<14} {:<22} {:>6} {:>6} {:>12} {:>12} {:>12} {:>12}",
            row.scenario,
            row.variant.as_str(),
            row.trials,
            row.errors,
            fmt(row.median_aoa_err_deg),
            fmt(row.median_range_err_m),
            fmt(row.median_loc_err_m),
            fmt(row.mean_rssi_drop_db)
        );
    }
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::ListExperiments => {
            for e in Experiment::ALL {
                println!("{:<28} {}", e.tag(), e.description());
            }
            Ok(())
        }
        Command::Validate { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            print!("{}", cfg.to_toml_string());
            Ok(())
        }
        Command::Run { config, overrides } => execute(&load(&config, &overrides)?),
        Command::Demo { experiment, overrides } => {
            let exp: Experiment = experiment.parse().map_err(Failure::Config)?;
            let mut cfg = ExperimentConfig::demo(exp);
            overrides.apply(&mut cfg).map_err(Failure::Config)?;
            execute(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
