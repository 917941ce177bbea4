use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffrepro_cli::{
    cmd_encode, cmd_hyperplane, cmd_inpaint, cmd_sample, cmd_scores, cmd_sweep, CliError, Common,
};

#[derive(Parser, Debug)]
#[command(
    name = "diffrepro",
    version,
    about = "Analytical diffusion-model experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Flags {
    /// key = value config file (defaults apply to missing keys)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: all cores); outputs do not depend on it
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the config's seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a sample set from seeded noises
    Sample(Flags),
    /// Map images to their noise codes
    Encode {
        #[command(flatten)]
        flags: Flags,
        /// Image files, image directories or tensor files
        inputs: Vec<PathBuf>,
    },
    /// Score matrix (and GL scores) over sample-set directories
    Scores {
        #[command(flatten)]
        flags: Flags,
        sets: Vec<PathBuf>,
    },
    /// Noise hyperplane map
    Hyperplane(Flags),
    /// Dataset-size sweep
    Sweep(Flags),
    /// Inpaint one dataset image from a masked observation
    Inpaint(Flags),
}

impl Command {
    fn flags(&self) -> &Flags {
        match self {
            Command::Sample(f)
            | Command::Hyperplane(f)
            | Command::Sweep(f)
            | Command::Inpaint(f) => f,
            Command::Encode { flags, .. } | Command::Scores { flags, .. } => flags,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let flags = cli.command.flags();
    if let Some(n) = flags.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads {n}: {e}")))?;
    }
    let common = Common {
        config: flags.config.clone(),
        out: flags.out.clone(),
        seed: flags.seed,
    };
    match &cli.command {
        Command::Sample(_) => cmd_sample(&common),
        Command::Encode { inputs, .. } => cmd_encode(&common, inputs),
        Command::Scores { sets, .. } => cmd_scores(&common, sets),
        Command::Hyperplane(_) => cmd_hyperplane(&common),
        Command::Sweep(_) => cmd_sweep(&common),
        Command::Inpaint(_) => cmd_inpaint(&common),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("diffrepro: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
