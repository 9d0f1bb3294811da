use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use intensity_slam::config::Config;
use intensity_slam::evaluate::ape;
use intensity_slam::features::{DetectorParams, IntensityFrame};
use intensity_slam::image::{project, NormalizationParams};
use intensity_slam::loop_closure::Vocabulary;
use intensity_slam::pipeline::{list_scans, run_dir, PipelineMode, RunOptions};
use intensity_slam::scan::{import_ascii, read_scan, read_trajectory, write_scan};
use intensity_slam::synth::{
    make_sequence_with, write_sequence, Scenario, SensorModel, SequenceOptions,
};

#[derive(Parser)]
#[command(name = "intensity-slam", version, about = "LiDAR intensity-image SLAM")]
struct Cli {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for RANSAC, the simulator and vocabulary training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `serial` runs the stages in turn, `parallel` on threads joined by queues.
    #[arg(long, global = true, default_value = "serial")]
    pipeline: PipelineMode,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline over a directory of scans.
    Run {
        /// Directory of `.oscn` scans, processed in file-name order.
        scans: PathBuf,
        /// Output directory for trajectories, map, graph and summary.
        out: PathBuf,
        /// Vocabulary file; overrides the config entry.
        #[arg(long)]
        vocabulary: Option<PathBuf>,
    },
    /// Translational APE of a trajectory against ground truth.
    Evaluate {
        trajectory: PathBuf,
        ground_truth: PathBuf,
    },
    /// Render a synthetic sequence.
    SynthGenerate {
        /// corridor, loop, slope or parking.
        scenario: Scenario,
        /// Number of scans.
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Metres between scans; the loop always spans one full circuit.
        #[arg(long, default_value_t = 0.2)]
        step_size: f64,
        #[arg(long, default_value = "sequence")]
        out: PathBuf,
        /// Disable range and intensity noise.
        #[arg(long)]
        noiseless: bool,
    },
    /// Train a descriptor vocabulary on scan directories.
    VocabTrain {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        branching: usize,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        /// Use every n-th scan.
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Convert `x y z intensity ring` text into the binary scan format.
    ScanConvert {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 64)]
        rows: usize,
        #[arg(long, default_value_t = 1024)]
        cols: usize,
        #[arg(long, default_value_t = 0.0)]
        timestamp: f64,
    },
    /// Write the intensity image of a scan as a binary PGM.
    DumpImage { scan: PathBuf, output: PathBuf },
    /// Print detected features of a scan.
    DumpFeatures { scan: PathBuf },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.ransac_seed = s;
    }
    Ok(cfg)
}

fn normalization(cfg: &Config) -> NormalizationParams {
    NormalizationParams {
        cap: cfg.intensity_cap,
        gain_equalization: cfg.gain_equalization,
    }
}

fn detector(cfg: &Config) -> DetectorParams {
    DetectorParams {
        threshold: cfg.fast_threshold,
        cap: cfg.feature_cap,
        max_range: cfg.feature_max_range,
        ..Default::default()
    }
}

fn frame_of(path: &Path, cfg: &Config) -> Result<IntensityFrame> {
    let scan = read_scan(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(IntensityFrame::build(
        &scan,
        &normalization(cfg),
        &detector(cfg),
    )?)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Run {
            scans,
            out,
            vocabulary,
        } => {
            let vocab_path = vocabulary.clone().or_else(|| cfg.vocabulary.clone());
            let vocabulary = match &vocab_path {
                Some(p) => Some(
                    Vocabulary::read(p)
                        .with_context(|| format!("loading vocabulary {}", p.display()))?,
                ),
                None => None,
            };
            let opts = RunOptions {
                mode: cli.pipeline,
                exec: None,
                vocabulary,
            };
            let output = run_dir(scans, &cfg, &opts)
                .with_context(|| format!("running on {}", scans.display()))?;
            output.write_outputs(out)?;
            print!("{}", output.summary());
        }
        Command::Evaluate {
            trajectory,
            ground_truth,
        } => {
            let est = read_trajectory(trajectory)
                .with_context(|| format!("reading {}", trajectory.display()))?;
            let gt = read_trajectory(ground_truth)
                .with_context(|| format!("reading {}", ground_truth.display()))?;
            println!("{}", ape(&est, &gt)?);
        }
        Command::SynthGenerate {
            scenario,
            steps,
            step_size,
            out,
            noiseless,
        } => {
            if *steps < 2 {
                bail!("--steps must be at least 2");
            }
            let opts = SequenceOptions {
                sensor: if *noiseless {
                    SensorModel::noiseless()
                } else {
                    SensorModel::default()
                },
                seed: cli.seed.unwrap_or(1),
                ..Default::default()
            };
            let seq = make_sequence_with(*scenario, *steps, *step_size, &opts);
            write_sequence(&seq, out)?;
            info!("wrote {} scans to {}", seq.scans.len(), out.display());
        }
        Command::VocabTrain {
            inputs,
            out,
            branching,
            depth,
            stride,
        } => {
            let mut docs = Vec::new();
            for dir in inputs {
                for path in list_scans(dir)?.iter().step_by((*stride).max(1)) {
                    docs.push(frame_of(path, &cfg)?.descriptors());
                }
            }
            let vocab =
                Vocabulary::train_documents(&docs, *branching, *depth, cli.seed.unwrap_or(0))?;
            vocab.write(out)?;
            println!("{} words from {} scans", vocab.word_count(), docs.len());
        }
        Command::ScanConvert {
            input,
            output,
            rows,
            cols,
            timestamp,
        } => {
            let text = std::fs::read_to_string(input)
                .with_context(|| format!("reading {}", input.display()))?;
            let scan = import_ascii(&text, *rows, *cols, *timestamp)?;
            write_scan(&scan, output)?;
            println!("{} of {} cells valid", scan.valid_count(), scan.len());
        }
        Command::DumpImage { scan, output } => {
            let s = read_scan(scan).with_context(|| format!("reading {}", scan.display()))?;
            project(&s, &normalization(&cfg))?.write_pgm(output)?;
        }
        Command::DumpFeatures { scan } => {
            print!("{}", frame_of(scan, &cfg)?.dump());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
