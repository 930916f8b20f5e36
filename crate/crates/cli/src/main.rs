//! `crossreg` command-line interface.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 I/O, 4 parse,
//! 5 configuration, 6 dataset (empty or unreadable corpus), and 10–17 for a
//! failure inside registration stage downsample, normals, features,
//! filtering, coarse, keypoints, local, fusion respectively.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crossreg::eval::{run_ablation, run_benchmark, CorpusDir, CrossSourceDir, PairSource, GROUND_TRUTH_FILE};
use crossreg::features::ExtractorKind;
use crossreg::io::{load_cloud_auto, save_cloud, transform_to_text, CloudFormat};
use crossreg::synth::{write_corpus, CorpusSpec, MANIFEST_FILE};
use crossreg::{register, Error, PipelineConfig, RefineMode, Stage};
use log::info;

const LOG_ENV: &str = "CROSSREG_LOG";

#[derive(Parser, Debug)]
#[command(name = "crossreg", version, about = "Cross-modality point cloud registration")]
#[command(after_help = "Log verbosity is read from CROSSREG_LOG (error, warn, info, debug, trace).")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Register a source cloud onto a target cloud.
    Register {
        source: PathBuf,
        target: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Output directory for result.json, transform.txt and registered_source.ply.
        #[arg(long, default_value = "crossreg-out")]
        out: PathBuf,
    },
    /// Generate a synthetic corpus (clouds as PLY plus manifest.json).
    Synth {
        /// Corpus spec JSON; defaults are used for omitted fields or when absent.
        spec: Option<PathBuf>,
        /// Overrides the corpus seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Benchmark the configured pipeline on a corpus.
    Evaluate {
        /// Corpus directory (manifest.json) or a tree of pair directories with T_gt.txt.
        corpus: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Runs per pair; repeat r uses seed + r.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Report JSON path; a CSV of per-pair errors is written next to it.
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Coarse-only, global-only and key-region refinement on the same coarse stages.
    Ablate {
        corpus: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long, default_value = "ablation.json")]
        out: PathBuf,
    },
    /// Print version, default configuration and exit codes.
    Info,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Pipeline config JSON; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["seeded-attention", "classical-descriptor"])]
    extractor: Option<String>,
    /// Stop after the coarse transform.
    #[arg(long, conflicts_with = "go_only")]
    no_logo: bool,
    /// One global point-to-plane solve instead of key-region solves.
    #[arg(long)]
    go_only: bool,
}

impl PipelineArgs {
    fn resolve(&self) -> Result<PipelineConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(kind) = &self.extractor {
            cfg.extractor = kind.parse::<ExtractorKind>()?;
        }
        if self.no_logo {
            cfg.mode = RefineMode::CoarseOnly;
        }
        if self.go_only {
            cfg.mode = RefineMode::GlobalOnly;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Stage { stage, .. } => match stage {
            Stage::Downsample => 10,
            Stage::Normals => 11,
            Stage::Features => 12,
            Stage::Filtering => 13,
            Stage::Coarse => 14,
            Stage::Keypoints => 15,
            Stage::Local => 16,
            Stage::Fusion => 17,
        },
        Error::Io { .. } => 3,
        Error::Parse { .. } => 4,
        Error::Config { .. } => 5,
        Error::InvalidParameter { name, .. } if *name == "dataset" => 6,
        _ => 1,
    }
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn open_corpus(dir: &Path) -> Result<Box<dyn PairSource>, Error> {
    if dir.join(MANIFEST_FILE).is_file() {
        return Ok(Box::new(CorpusDir::open(dir)?));
    }
    if !dir.is_dir() {
        return Err(Error::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
        });
    }
    let pairs = CrossSourceDir::discover(dir)?;
    if pairs.is_empty() {
        return Err(Error::InvalidParameter {
            name: "dataset",
            message: format!(
                "{} holds neither {MANIFEST_FILE} nor pair directories with {GROUND_TRUTH_FILE}",
                dir.display()
            ),
        });
    }
    Ok(Box::new(pairs))
}

fn cmd_register(source: &Path, target: &Path, pipeline: &PipelineArgs, out: &Path) -> Result<(), Error> {
    let cfg = pipeline.resolve()?;
    let src = load_cloud_auto(source)?;
    let tgt = load_cloud_auto(target)?;
    info!("registering {} ({} points) onto {} ({} points)", source.display(), src.len(), target.display(), tgt.len());
    let result = register(&src, &tgt, &cfg)?;
    // nothing is written unless registration succeeded
    write(&out.join("result.json"), &result.to_json())?;
    write(&out.join("transform.txt"), &transform_to_text(&result.final_transform))?;
    save_cloud(
        out.join("registered_source.ply"),
        &src.transformed(&result.final_transform),
        CloudFormat::PlyAscii,
    )?;
    print!("{}", transform_to_text(&result.final_transform));
    if result.diagnostics.degraded {
        eprintln!("warning: refinement fell back (degraded); see result.json diagnostics");
    }
    Ok(())
}

fn cmd_synth(spec: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), Error> {
    let mut corpus = match spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })?;
            CorpusSpec::from_json(&text)?
        }
        None => CorpusSpec::default(),
    };
    if let Some(seed) = seed {
        corpus.seed = seed;
    }
    let manifest = write_corpus(&corpus, out)?;
    println!("wrote {} pairs and {MANIFEST_FILE} to {}", manifest.pairs.len(), out.display());
    Ok(())
}

fn csv_path(out: &Path) -> PathBuf {
    out.with_extension("csv")
}

fn cmd_evaluate(corpus: &Path, pipeline: &PipelineArgs, repeats: usize, out: &Path) -> Result<(), Error> {
    let cfg = pipeline.resolve()?;
    let pairs = open_corpus(corpus)?;
    let report = run_benchmark(pairs.as_ref(), &cfg, repeats)?;
    write(out, &report.to_json())?;
    write(&csv_path(out), &report.to_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_ablate(corpus: &Path, pipeline: &PipelineArgs, repeats: usize, out: &Path) -> Result<(), Error> {
    let cfg = pipeline.resolve()?;
    let pairs = open_corpus(corpus)?;
    let report = run_ablation(pairs.as_ref(), &cfg, repeats)?;
    write(out, &report.to_json())?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_info() {
    println!("crossreg {}", env!("CARGO_PKG_VERSION"));
    println!("refinement modes: coarse-only, global-only, key-regions (default)");
    println!("extractors: seeded-attention, classical-descriptor (default)");
    println!("log verbosity: {LOG_ENV}=error|warn|info|debug|trace");
    println!("exit codes: 0 ok, 1 other, 2 usage, 3 i/o, 4 parse, 5 config, 6 dataset,");
    println!("            10 downsample, 11 normals, 12 features, 13 filtering, 14 coarse,");
    println!("            15 keypoints, 16 local, 17 fusion");
    println!("default config:");
    println!("{}", PipelineConfig::default().to_json());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Register {
            source,
            target,
            pipeline,
            out,
        } => cmd_register(source, target, pipeline, out),
        Command::Synth { spec, seed, out } => cmd_synth(spec.as_deref(), *seed, out),
        Command::Evaluate {
            corpus,
            pipeline,
            repeats,
            out,
        } => cmd_evaluate(corpus, pipeline, *repeats, out),
        Command::Ablate {
            corpus,
            pipeline,
            repeats,
            out,
        } => cmd_ablate(corpus, pipeline, *repeats, out),
        Command::Info => {
            cmd_info();
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
