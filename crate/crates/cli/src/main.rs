use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pocketseg::phantom::{generate_dataset, PhantomSampler};
use pocketseg::pipeline::{self, RunConfig, RunLayout, Stage};
use pocketseg::pocketnet::{count_parameters, ArchSpec, Widening};
use pocketseg::training::{arch_for_training, Preset};

#[derive(Parser)]
#[command(name = "pocketseg", version, about = "Two-stage organ and tumor segmentation of pelvic MRI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train.seed` (folds, initialization, patch sampling).
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate inference windows sequentially on one thread.
    #[arg(long)]
    deterministic: bool,
    /// Applies a named hyperparameter preset; outputs go to `stage<N>-<preset>/`.
    #[arg(long, value_parser = ["default", "customized"])]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Preprocess every manifest case into the cache and report the derived patch size.
    Preprocess {
        #[command(flatten)]
        run: RunArgs,
    },
    /// K-fold training of one stage with held-out prediction and evaluation.
    Crossval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
    },
    /// Train one stage on every case.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
    },
    /// Segment raw NIfTI images with trained stage-1 and stage-2 checkpoints.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        organ_checkpoint: PathBuf,
        #[arg(long)]
        tumor_checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score a directory of predicted label files against the manifest labels.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        pred: PathBuf,
        /// Metrics table to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Summary table and boxplot figure from one or more metrics tables.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        tables: Vec<PathBuf>,
    },
    /// Parameter counts of the configured networks and a constant-width vs doubling comparison.
    ParamCount {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base width for the comparison table.
        #[arg(long, default_value_t = 16)]
        width: usize,
    },
    /// Generate a synthetic phantom dataset with a manifest.
    Phantom {
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Sampler bounds (TOML); built-in defaults otherwise.
        #[arg(long)]
        sampler: Option<PathBuf>,
    },
}

fn load_run(args: &RunArgs) -> Result<(RunConfig, RunLayout)> {
    let mut cfg = RunConfig::load(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if args.deterministic {
        cfg.window.deterministic = true;
        rayon::ThreadPoolBuilder::new().num_threads(1).build_global().ok();
    }
    let tag = match &args.preset {
        Some(p) => {
            let preset: Preset = p.parse()?;
            cfg.train = cfg.train.clone().with_preset(preset);
            Some(preset.to_string())
        }
        None => None,
    };
    let layout = RunLayout::new(cfg.paths.work_dir.clone(), tag);
    Ok((cfg, layout))
}

fn param_count(config: Option<&Path>, width: usize) -> Result<()> {
    if let Some(path) = config {
        let cfg = RunConfig::load(path)?;
        for (name, spec) in [("stage1", &cfg.stage1), ("stage2", &cfg.stage2)] {
            let trained = arch_for_training(spec, &cfg.train);
            println!(
                "{name}: {} parameters ({} levels, width {}, {:?}, {} auxiliary heads)",
                count_parameters(&trained),
                trained.levels,
                trained.width,
                trained.widening,
                trained.deep_supervision_heads
            );
        }
        println!();
    }
    println!("levels\tconstant-width\tdoubling\tratio");
    for levels in 2..=5 {
        let spec = |widening| ArchSpec {
            levels,
            width,
            widening,
            ..ArchSpec::default()
        };
        let pocket = count_parameters(&spec(Widening::Pocket));
        let doubling = count_parameters(&spec(Widening::Doubling));
        println!("{levels}\t{pocket}\t{doubling}\t{:.4}", pocket as f64 / doubling as f64);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess { run } => {
            let (cfg, layout) = load_run(&run)?;
            let out = pipeline::cmd_preprocess(&cfg, &layout)?;
            if let Some(r) = &out.report {
                println!(
                    "{} cases ({} cached), median dims {:?} at {:?} mm, derived patch {:?} (max {:?}), configured patch {:?}",
                    r.cases, out.cache_hits, r.median_dims, r.target_spacing, r.derived_patch, r.max_patch, r.configured_patch
                );
            }
            if !out.failures.is_empty() {
                for (id, e) in &out.failures {
                    eprintln!("failed: {id}: {e}");
                }
                bail!("{} of {} cases failed", out.failures.len(), out.failures.len() + out.processed.len());
            }
        }
        Command::Crossval { run, stage } => {
            let (cfg, layout) = load_run(&run)?;
            let out = pipeline::cmd_crossval(&cfg, &layout, Stage::from_number(stage)?)?;
            for f in &out.folds {
                let tumor = f.mean_dsc_tumor.map(|t| format!("\ttumor DSC {t:.4}")).unwrap_or_default();
                println!("fold {}\torgan DSC {:.4}{tumor}", f.fold, f.mean_dsc_organ);
            }
            let tumor = out.mean_dsc_tumor().map(|t| format!(", tumor DSC {t:.4}")).unwrap_or_default();
            println!("mean held-out organ DSC {:.4}{tumor}", out.mean_dsc_organ());
            println!("metrics: {}", out.metrics_path.display());
        }
        Command::Train { run, stage } => {
            let (cfg, layout) = load_run(&run)?;
            let stage = Stage::from_number(stage)?;
            let h = pipeline::cmd_train(&cfg, &layout, stage)?;
            if let (Some(last), Some(ckpt)) = (h.records.last(), &h.final_checkpoint) {
                println!("final loss {:.5}; checkpoint {}", last.loss, ckpt.display());
            }
        }
        Command::Infer {
            run,
            organ_checkpoint,
            tumor_checkpoint,
            out,
            inputs,
        } => {
            let (cfg, _) = load_run(&run)?;
            for (id, path) in pipeline::cmd_infer(&cfg, &organ_checkpoint, &tumor_checkpoint, &inputs, &out)? {
                println!("{id}\t{}", path.display());
            }
        }
        Command::Evaluate { run, pred, out } => {
            let (cfg, _) = load_run(&run)?;
            let rows = pipeline::cmd_evaluate(&cfg, &pred, &out)?;
            println!("{} cases scored; table {}", rows.len(), out.display());
        }
        Command::Report { out, tables } => {
            let r = pipeline::cmd_report(&tables, &out)?;
            print!("{}", r.summary_text);
            println!("figure: {}", r.figure_path.display());
        }
        Command::ParamCount { config, width } => param_count(config.as_deref(), width)?,
        Command::Phantom { n, seed, out, sampler } => {
            let sampler = match sampler {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => PhantomSampler::default(),
            };
            let m = generate_dataset(n, &sampler, seed, &out)?;
            println!("{} phantoms; manifest {}", m.cases.len(), out.join("manifest.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
