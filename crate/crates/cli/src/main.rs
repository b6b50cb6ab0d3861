use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use robotize_core::datagen::Split;
use robotize_core::pipeline::{self, EvalSource, PipelineConfig, TrainOptions};
use robotize_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "robotize", version, about = "Turn videos of people into videos of humanoid robots")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file; keys not given keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    overwrite: bool,
    /// Config override `dotted.key=value`, applied after the file (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Adapter or base checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Base checkpoint for an adapter (default: base.ckpt next to it).
    #[arg(long)]
    base: Option<PathBuf>,
    /// Sampler steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the paired human/humanoid dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train adapters on a dataset's training split.
    Train {
        /// Dataset manifest written by gen-data.
        #[arg(long)]
        manifest: PathBuf,
        /// Run directory for checkpoints and traces.
        #[arg(long)]
        out: PathBuf,
        /// Total optimizer steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue the run stored in the output directory.
        #[arg(long)]
        resume: bool,
        /// Use only the first N training pairs.
        #[arg(long)]
        max_pairs: Option<usize>,
        /// Start from this base checkpoint instead of pretraining one.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Edit one clip.
    Edit {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also export the edited frames as PPM images here.
        #[arg(long)]
        ppm: Option<PathBuf>,
    },
    /// Edit every clip in a directory.
    Robotize {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score edits against the humanoid ground truth and the copy baseline.
    Eval {
        /// Checkpoint to sample with.
        #[arg(long, conflicts_with = "edited", required_unless_present = "edited")]
        checkpoint: Option<PathBuf>,
        /// Base checkpoint for an adapter (default: base.ckpt next to it).
        #[arg(long)]
        base: Option<PathBuf>,
        /// Directory of pre-edited clips instead of a checkpoint.
        #[arg(long)]
        edited: Option<PathBuf>,
        /// Dataset manifest written by gen-data.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Score only the first N pairs of the split.
        #[arg(long)]
        limit: Option<usize>,
        /// Sampler steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Print the per-clip table as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Describe a clip, checkpoint, manifest, trace, config or report.
    Inspect { path: PathBuf },
}

fn config(common: &Common, extra: &[String]) -> Result<PipelineConfig> {
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    pipeline::load_config(common.config.as_deref(), &overrides, common.seed)
}

fn sampler_steps(steps: Option<usize>) -> Vec<String> {
    steps.map(|n| vec![format!("sampler.steps={n}")]).unwrap_or_default()
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| Error::config(format!("cannot start {j} workers: {e}")))?;
    }
    let c = &cli.common;
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::GenData { out: dir } => {
            let cfg = config(c, &[])?;
            pipeline::cmd_gen_data(&cfg, &dir, c.overwrite, &mut out)?;
        }
        Command::Train {
            manifest,
            out: dir,
            steps,
            resume,
            max_pairs,
            base,
        } => {
            let extra: Vec<String> = steps.map(|n| vec![format!("train.steps={n}")]).unwrap_or_default();
            let cfg = config(c, &extra)?;
            let opts = TrainOptions {
                resume,
                overwrite: c.overwrite,
                max_pairs,
                base,
            };
            pipeline::cmd_train(&cfg, &manifest, &dir, &opts, &mut out)?;
        }
        Command::Edit { model, input, output, ppm } => {
            let cfg = config(c, &sampler_steps(model.steps))?;
            pipeline::cmd_edit(
                &cfg,
                &model.checkpoint,
                model.base.as_deref(),
                &input,
                &output,
                ppm.as_deref(),
                c.overwrite,
                &mut out,
            )?;
        }
        Command::Robotize { model, input, output } => {
            let cfg = config(c, &sampler_steps(model.steps))?;
            pipeline::cmd_robotize(&cfg, &model.checkpoint, model.base.as_deref(), &input, &output, c.overwrite, &mut out)?;
        }
        Command::Eval {
            checkpoint,
            base,
            edited,
            manifest,
            split,
            limit,
            steps,
            report,
            csv,
        } => {
            let cfg = config(c, &sampler_steps(steps))?;
            let source = match (&checkpoint, &edited) {
                (_, Some(dir)) => EvalSource::Edited(dir),
                (Some(ck), None) => EvalSource::Model {
                    checkpoint: ck,
                    base: base.as_deref(),
                },
                (None, None) => return Err(Error::config("eval needs --checkpoint or --edited")),
            };
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
            };
            let outcome = pipeline::cmd_eval(&cfg, source, &manifest, split, limit, &mut out)?;
            if let Some(path) = report {
                std::fs::write(&path, outcome.to_json()).map_err(|e| Error::io(&path, e))?;
            }
            if csv {
                use std::io::Write;
                write!(out, "{}", outcome.model.to_csv()).map_err(|e| Error::io("<stdout>", e))?;
            }
        }
        Command::Inspect { path } => {
            use std::io::Write;
            writeln!(out, "{}", pipeline::cmd_inspect(&path)?).map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
