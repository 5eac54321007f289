use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use leakwatch_cli::{commands, server, CliError};

#[derive(Parser, Debug)]
#[command(name = "leakwatch", version, about = "Detect, extract and rewrite PII leaks in HTTP flow logs")]
struct Cli {
    /// More log output on stderr (-v info, -vv debug)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train classifiers on a labeled flow log and write the model set
    Train {
        #[arg(long)]
        flows: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Model set directory (created or updated)
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// k-fold evaluation on a labeled flow log
    Eval {
        #[arg(long)]
        flows: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 10)]
        kfold: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a flow log through the engine and record predictions
    Ingest {
        /// Flow log, `-` for stdin
        file: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the leaking key/value pairs of each flow
    Extract {
        file: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Apply rewrite rules to each flow of a flow log
    Rewrite {
        file: PathBuf,
        /// Rules as a JSON array or one rule per line
        #[arg(long)]
        rules: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a labeled synthetic corpus
    Synth {
        /// Corpus spec JSON; the built-in corpus when omitted
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the JSON API
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `listen` from the config
        #[arg(long)]
        listen: Option<String>,
    },
}

fn run(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    use commands::load_config;
    match command {
        Command::Train { flows, labels, out: dir, config } => {
            commands::train(&flows, &labels, &dir, &load_config(config.as_deref())?.pipeline, out)
        }
        Command::Eval { flows, labels, kfold, config } => {
            commands::eval(&flows, &labels, kfold, &load_config(config.as_deref())?.pipeline, out)
        }
        Command::Ingest { file, config } => commands::ingest(&file, load_config(config.as_deref())?, out),
        Command::Extract { file, models, config } => {
            commands::extract(&file, &models, &load_config(config.as_deref())?.pipeline, out)
        }
        Command::Rewrite { file, rules, models, config } => {
            commands::rewrite(&file, &rules, &models, &load_config(config.as_deref())?.pipeline, out)
        }
        Command::Synth { spec, out: dir } => commands::synth(spec.as_deref(), &dir, out),
        Command::Serve { config, listen } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(l) = listen {
                cfg.listen = l;
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(cfg))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            eprintln!("{}", CliError::new("usage", e.to_string().trim()).to_json());
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let result = run(cli.command, &mut out).and_then(|_| out.flush().map_err(CliError::from));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
