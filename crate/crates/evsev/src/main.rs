use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use evsev::commands::{self, DatasetArgs, EvalArgs, TrainArgs};
use evsev_core::synth::Split;

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

/// Comma-separated retention fractions as a single argument.
#[derive(Clone)]
struct Fractions(Vec<f64>);

fn parse_fractions(s: &str) -> Result<Fractions, String> {
    s.split(',')
        .map(|f| f.trim().parse::<f64>().map_err(|e| format!("bad fraction {f:?}: {e}")))
        .collect::<Result<Vec<f64>, String>>()
        .map(Fractions)
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Smoke-severity pipeline: synthesize or ingest datasets, train the
/// evidential classifier, and emit evaluation reports.
#[derive(Parser)]
#[command(name = "evsev", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Output directory; all emitted paths are relative to it.
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set epochs=5 (repeatable).
    #[arg(long = "set", value_parser = parse_kv)]
    sets: Vec<(String, String)>,
    /// RNG seed; overrides the config file and EVSEV_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest a labeled patch dataset with scene-level splits.
    Dataset {
        #[command(flatten)]
        common: Common,
        /// Synthesize patches (the default when --ingest is absent).
        #[arg(long)]
        synth: bool,
        /// Number of patches to synthesize.
        #[arg(long)]
        n: Option<usize>,
        /// Ingest a directory of PPM files, labeling them with the
        /// pseudo-AOD pipeline.
        #[arg(long)]
        ingest: Option<PathBuf>,
    },
    /// Train on the train split and write a checkpoint plus history.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Epoch count override; 0 writes the untouched initialization.
        #[arg(long)]
        epochs: Option<usize>,
        /// Dataset directory (defaults to --out).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a split and emit report.json plus CSV/PGM artifacts.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path (defaults to <out>/checkpoint.bin).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory (defaults to --out).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Which split to score.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Retention fractions for the selective-prediction curve,
        /// e.g. 1.0,0.8,0.6,0.5,0.3,0.2
        #[arg(long, value_parser = parse_fractions)]
        selective: Option<Fractions>,
        /// Also score all degradation conditions.
        #[arg(long)]
        degrade: bool,
        /// Emit a sliding-window uncertainty map and attention raster.
        #[arg(long)]
        map: bool,
        /// Window side for --map (defaults to the model input size).
        #[arg(long)]
        window: Option<usize>,
        /// Window stride for --map (defaults to window / 2).
        #[arg(long)]
        stride: Option<usize>,
        /// Bootstrap iteration count for the accuracy confidence interval.
        #[arg(long)]
        bootstrap: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful exits; everything else is usage
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let result = match cli.command {
        Command::Dataset { common, synth, n, ingest } => commands::cmd_dataset(&DatasetArgs {
            out: common.out,
            config: common.config,
            sets: common.sets,
            seed: common.seed,
            n,
            synth,
            ingest,
        }),
        Command::Train { common, epochs, data } => commands::cmd_train(&TrainArgs {
            out: common.out,
            config: common.config,
            sets: common.sets,
            seed: common.seed,
            epochs,
            data,
        }),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            selective,
            degrade,
            map,
            window,
            stride,
            bootstrap,
        } => commands::cmd_eval(&EvalArgs {
            out: common.out,
            config: common.config,
            sets: common.sets,
            seed: common.seed,
            checkpoint,
            data,
            split: split.into(),
            selective: selective.map(|f| f.0),
            degrade,
            map,
            window,
            stride,
            bootstrap,
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
