use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use glyphforge_cli::commands::{
    self, Assertion, EvalArgs, EvalModel, GroupMode, SampleArgs, Stage2Args,
};
use glyphforge_cli::config::RunConfig;
use glyphforge_cli::server;
use glyphforge_core::dataset::{Dataset, Split};
use glyphforge_core::glyphkit::GroupSource;
use glyphforge_core::train::Objective;

#[derive(Parser)]
#[command(
    name = "glyphforge",
    version,
    about = "Toy glyph renderer: data, training, sampling, evaluation, annotation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root. Defaults to $GLYPHFORGE_DATA, then the config's data_root.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let root = cfg.data_root(self.data.as_deref());
        Ok((cfg, root))
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SourceArg {
    SyntheticOracle,
    ModelAutolabel,
    Human,
}

impl From<SourceArg> for GroupSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::SyntheticOracle => GroupSource::SyntheticOracle,
            SourceArg::ModelAutolabel => GroupSource::ModelAutolabel,
            SourceArg::Human => GroupSource::Human,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write conditions, stage-1 training images, synthetic groups, and test conditions.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Dataset root to create (overrides --data).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace an existing manifest.
        #[arg(long)]
        force: bool,
    },
    /// Flow-matching training on the stage-1 images.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build one candidate group per stage-2 condition.
    GenGroups {
        #[command(flatten)]
        common: Common,
        /// Corrupted ground truth with exact labels, or stage-1 samples labelled by the recognition oracle.
        #[arg(long, value_enum)]
        mode: GroupMode,
        /// Stage-1 checkpoint, required for model-autolabel.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Preference or SFT training from a stage-1 checkpoint, which also serves as the frozen reference.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        /// One of sft, mask-sft, dpo, rgdpo.
        #[arg(long, default_value = "rgdpo")]
        objective: Objective,
        /// Stage-1 checkpoint: the starting point and the frozen reference.
        #[arg(long)]
        stage1: PathBuf,
        /// Overrides hyper.lambda_inter.
        #[arg(long)]
        lambda_inter: Option<f64>,
        /// Overrides hyper.beta.
        #[arg(long)]
        beta: Option<f64>,
        /// Train only on groups from this source.
        #[arg(long, value_enum)]
        source: Option<SourceArg>,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample images for a condition file or the dataset's test split.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Model to sample.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference checkpoint for --rrg.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Guide inside the text region with --reference.
        #[arg(long)]
        rrg: bool,
        /// Guidance weight; overrides sample.omega.
        #[arg(long)]
        omega: Option<f64>,
        /// Euler steps; overrides sample.steps.
        #[arg(long)]
        steps: Option<usize>,
        /// JSON array of conditions; defaults to the dataset's test split.
        #[arg(long)]
        conditions: Option<PathBuf>,
        /// Also write a per-step velocity trace CSV for each RRG image.
        #[arg(long)]
        trace: bool,
        /// Output directory for images and metadata.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate checkpoints on the dataset's test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// LABEL=PATH, sampled plainly. Repeatable.
        #[arg(long = "model", value_parser = commands::parse_labeled)]
        models: Vec<(String, PathBuf)>,
        /// LABEL=PATH, sampled with RRG against --reference. Repeatable.
        #[arg(long = "rrg-model", value_parser = commands::parse_labeled)]
        rrg_models: Vec<(String, PathBuf)>,
        /// Reference checkpoint for every --rrg-model.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Guidance weight; overrides sample.omega.
        #[arg(long)]
        omega: Option<f64>,
        /// LABEL>=VALUE floor on overall Glyph.Acc; the command fails if any is missed.
        #[arg(long = "assert")]
        asserts: Vec<Assertion>,
        /// Directory for report.json and report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the annotation API.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Address to listen on; port 0 picks a free port.
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
    /// Check manifest integrity.
    Verify {
        #[command(flatten)]
        common: Common,
    },
}

fn open(root: &std::path::Path) -> Result<Dataset> {
    Dataset::open(root).with_context(|| format!("opening dataset at {}", root.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out, force } => {
            let (cfg, root) = common.load()?;
            let root = out.unwrap_or(root);
            let ds = commands::gen_data(&cfg, &root, force)?;
            println!(
                "wrote {} conditions and {} groups to {}",
                ds.manifest.conditions.len(),
                ds.manifest.groups.len(),
                root.display()
            );
        }
        Command::TrainStage1 { common, out } => {
            let (cfg, root) = common.load()?;
            let ck = commands::train_stage1_cmd(&cfg, &open(&root)?, &out)?;
            println!(
                "wrote {} checkpoint after {} steps to {}",
                ck.header.stage,
                ck.header.steps,
                out.display()
            );
        }
        Command::GenGroups {
            common,
            mode,
            checkpoint,
        } => {
            let (cfg, root) = common.load()?;
            let mut ds = open(&root)?;
            let n = commands::gen_groups(&cfg, &mut ds, mode, checkpoint.as_deref())?;
            println!("wrote {n} groups");
        }
        Command::TrainStage2 {
            common,
            objective,
            stage1,
            lambda_inter,
            beta,
            source,
            out,
        } => {
            let (cfg, root) = common.load()?;
            let args = Stage2Args {
                objective,
                stage1: &stage1,
                lambda_inter,
                beta,
                source: source.map(Into::into),
                out: &out,
            };
            let ck = commands::train_stage2_cmd(&cfg, &open(&root)?, &args)?;
            println!(
                "wrote {} checkpoint after {} steps to {}",
                ck.header.stage,
                ck.header.steps,
                out.display()
            );
        }
        Command::Sample {
            common,
            checkpoint,
            reference,
            rrg,
            omega,
            steps,
            conditions,
            trace,
            out,
        } => {
            let (cfg, root) = common.load()?;
            let mut sample = cfg.experiment.sample;
            sample.seed = cfg.seed;
            if let Some(o) = omega {
                sample.omega = o;
            }
            if let Some(s) = steps {
                sample.steps = s;
            }
            let size = cfg.experiment.model.image_size;
            let conditions = match conditions {
                Some(p) => commands::read_conditions(&p, size, size)?,
                None => commands::split_conditions(&open(&root)?, Split::Test),
            };
            let args = SampleArgs {
                checkpoint: &checkpoint,
                reference: reference.as_deref(),
                rrg,
                sample,
                conditions,
                trace,
                out: &out,
            };
            let meta = commands::sample_cmd(&args)?;
            println!("wrote {} images to {}", meta.images.len(), out.display());
        }
        Command::Eval {
            common,
            models,
            rrg_models,
            reference,
            omega,
            asserts,
            out,
        } => {
            let (cfg, root) = common.load()?;
            let mut list: Vec<EvalModel> = models
                .into_iter()
                .map(|(label, path)| EvalModel {
                    label,
                    path,
                    rrg: false,
                })
                .collect();
            list.extend(rrg_models.into_iter().map(|(label, path)| EvalModel {
                label,
                path,
                rrg: true,
            }));
            if list.is_empty() {
                bail!("give at least one --model or --rrg-model");
            }
            let args = EvalArgs {
                models: list,
                reference: reference.as_deref(),
                omega: omega.unwrap_or(cfg.experiment.sample.omega),
                asserts,
                out: out.as_deref(),
            };
            let (reports, failed) = commands::eval_cmd(&cfg, &open(&root)?, &args)?;
            print!("{}", glyphforge_core::evalbench::format_table(&reports));
            if !failed.is_empty() {
                bail!("assertions failed:\n  {}", failed.join("\n  "));
            }
        }
        Command::Serve { common, bind } => {
            let (_, root) = common.load()?;
            let ds = open(&root)?;
            let problems = ds.verify();
            if !problems.is_empty() {
                bail!("manifest is invalid:\n  {}", problems.join("\n  "));
            }
            tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?
                .block_on(server::serve(ds, bind))?;
        }
        Command::Verify { common } => {
            let (_, root) = common.load()?;
            let problems = open(&root)?.verify();
            if !problems.is_empty() {
                bail!(
                    "{} problem(s):\n  {}",
                    problems.len(),
                    problems.join("\n  ")
                );
            }
            println!("ok");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
