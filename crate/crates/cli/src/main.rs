use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use polyglot_cli::commands::{self, CliError, CliResult, PhaseSelection, EXIT_USAGE};
use polyglot_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "polyglot", version, about = "Polyglot multi-speaker synthesis: corpus, training, conversion, evaluation")]
struct Cli {
    /// Override a config key, e.g. `--set train.phase1.steps=50`; applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multilingual corpus.
    GenCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides corpus.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one phase, or all remaining phases in order.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus manifest.
        #[arg(long)]
        corpus: PathBuf,
        /// 1, 2, 3 or all.
        #[arg(long, default_value = "all")]
        phase: String,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Speak phonemes of one language in a voice sampled in another.
    Convert {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        src_lang: String,
        /// Frame files (.f32) of the source speaker; several are averaged.
        #[arg(long, num_args = 1.., required = true)]
        voice: Vec<PathBuf>,
        #[arg(long)]
        tgt_lang: String,
        /// Target-language phoneme ids, comma or space separated.
        #[arg(long)]
        phonemes: String,
        /// Free-running cap; defaults to 16 per phoneme.
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Speaker-identification accuracy matrix, embedding dump and 2-D projection.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint trained without the speaker-preservation loss.
        #[arg(long)]
        ablation: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences on the tiny configuration.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load(path: Option<&std::path::Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    for o in overrides {
        cfg.apply_text(o, "--set")?;
    }
    Ok(cfg)
}

fn run(command: Command, overrides: &[String]) -> CliResult<()> {
    match command {
        Command::GenCorpus { config, out, seed } => {
            let mut cfg = load(config.as_deref(), overrides)?;
            if let Some(s) = seed {
                cfg.corpus.seed = s;
            }
            let manifest = commands::gen_corpus(&cfg, &out)?;
            println!("{}", manifest.display());
        }
        Command::Train { config, corpus, phase, resume, out } => {
            let cfg = load(config.as_deref(), overrides)?;
            let sel = match phase.as_str() {
                "all" => PhaseSelection::All,
                "1" | "2" | "3" => PhaseSelection::One(phase.parse().expect("digit")),
                other => return Err(CliError::usage(format!("--phase must be 1, 2, 3 or all, got {other:?}"))),
            };
            let summary = commands::train(&cfg, &corpus, sel, resume.as_deref(), &out)?;
            for (label, mse) in &summary.probe {
                println!("probe MSE {label}: {mse:.4}");
            }
            println!("{} ({:.1}s)", summary.checkpoint.display(), summary.seconds);
        }
        Command::Convert { ckpt, src_lang, voice, tgt_lang, phonemes, max_steps, out } => {
            let ids = commands::parse_ids(&phonemes)?;
            let path = commands::convert(&ckpt, &src_lang, &voice, &tgt_lang, &ids, max_steps, &out)?;
            println!("{}", path.display());
        }
        Command::Eval { config, ckpt, corpus, ablation, out } => {
            let cfg = load(config.as_deref(), overrides)?;
            let (full, abl) = commands::eval(&cfg, &ckpt, &corpus, ablation.as_deref(), &out)?;
            print!("{}", full.report.to_table());
            if let Some(a) = abl {
                println!("ablation:");
                print!("{}", a.report.to_table());
            }
        }
        Command::GradCheck { config } => {
            let cfg = load(config.as_deref(), overrides)?;
            let (rows, text) = commands::grad_check(&cfg)?;
            print!("{text}");
            if rows.iter().any(|r| !r.passed) {
                return Err(CliError { code: commands::EXIT_NUMERIC, message: "gradient check failed".into() });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli.command, &cli.overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
