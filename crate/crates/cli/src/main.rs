use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use reachcast_cli::{cmd_run, cmd_session_times, cmd_synth, CliError, ForecasterSpec, RunArgs};

#[derive(Parser)]
#[command(
    name = "reachcast",
    version,
    about = "Forecast-augmented reaching assessment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort from a generator spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Baseline curves, augmented points and the ΔICC report.
    Run {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// arima, replay, external or external:<command line>
        #[arg(long)]
        forecaster: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["8", "16"]))]
        context: Option<String>,
        /// Command line of the external forecaster; must come last.
        #[arg(long, num_args = 1.., allow_hyphen_values = true)]
        external_cmd: Vec<String>,
    },
    /// Per-subject session times and ECDF positions.
    SessionTimes {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { spec, out } => {
            let s = cmd_synth(&spec, &out)?;
            println!(
                "wrote {}: {} subjects, {} trials",
                out.display(),
                s.subjects,
                s.trials
            );
        }
        Command::Run {
            cohort,
            config,
            forecaster,
            out,
            context,
            external_cmd,
        } => {
            let args = RunArgs {
                cohort,
                config,
                forecaster: ForecasterSpec::parse(&forecaster, &external_cmd)?,
                out_dir: out,
                context: context.map(|c| c.parse().expect("validated by clap")),
            };
            let summary = cmd_run(&args)?;
            println!(
                "wrote {}: {} report rows, run {}",
                args.out_dir.display(),
                summary.report.len(),
                &summary.manifest.run_hash[..12]
            );
        }
        Command::SessionTimes { cohort, out } => {
            let rows = cmd_session_times(&cohort, &out)?;
            println!("wrote {}: {} rows", out.display(), rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                reachcast_cli::EXIT_INPUT
            } else {
                0
            });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(reachcast_cli::EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
