use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use strokeseg::harness::{
    self, evaluate, load_history, load_metrics, predict, preprocess_dataset, report, run_ablation, save_overlay,
    train_observed, write_run_dir, AblationAxis, TrainConfig,
};
use strokeseg::metrics::MetricsReport;
use strokeseg::model::{load_checkpoint, ModelConfig, ModelParams};
use strokeseg::preprocess::PipelineMode;
use strokeseg::synth::{
    dataset_statistics, generate_dataset, load_dataset, parse_mix, save_dataset, split_dataset, Dataset, PhantomSpec,
};
use strokeseg::volume::{load_volume, save_mask};

#[derive(Parser)]
#[command(name = "strokeseg", version, about = "Volumetric lesion segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Comprehensive,
    Basic,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    SwinGce,
    Preprocessing,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Generate {
        #[arg(long)]
        n: usize,
        /// Comma-separated `scenario:weight` pairs, e.g. `single-left:1,multiple-both:2,none:1`.
        #[arg(long, default_value = "single-left:1,single-right:1,multiple-both:1")]
        mix: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Voxels per side.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 4.0)]
        spacing_mm: f64,
        /// Peak-to-peak multiplicative bias-field amplitude.
        #[arg(long, default_value_t = 0.0)]
        bias: f64,
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
    },
    /// Run the preprocessing pipeline over a dataset directory.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// TOML config; only its `pipeline` table is used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on a dataset split into train and test parts; writes a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// The data is already preprocessed; skip the pipeline.
        #[arg(long)]
        preprocessed: bool,
    },
    /// Evaluate a checkpoint on a preprocessed dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a lesion mask for one preprocessed volume.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired training runs differing in one component.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Raw (unpreprocessed) dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Curves and comparison table from a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => Ok(TrainConfig::load(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_overlays(params: &ModelParams, model: &ModelConfig, d: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for s in &d.subjects {
        let Some(gt) = &s.mask else { continue };
        let pred = predict(params, model, &s.image)?;
        save_overlay(&s.image, gt, &pred, &dir.join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

fn print_summary(metrics: &MetricsReport) {
    let a = &metrics.aggregates;
    let fmt = |s: &Option<strokeseg::metrics::Summary>| s.as_ref().map_or("n/a".to_string(), |s| format!("{:.4}", s.mean));
    println!(
        "cases {}  mean DSC {}  mean HD95 {} mm  mean ASSD {} mm  undefined distances {}",
        metrics.cases.len(),
        fmt(&a.dsc),
        fmt(&a.hd95_mm),
        fmt(&a.assd_mm),
        a.undefined_distance_cases
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { n, mix, seed, out, size, spacing_mm, bias, noise } => {
            let base = PhantomSpec {
                shape: [size; 3],
                spacing: [spacing_mm; 3],
                bias_field_amplitude: bias,
                noise_std: noise,
                ..PhantomSpec::default()
            };
            let mix = parse_mix(&mix, &base)?;
            let d = generate_dataset(n, &mix, seed)?;
            save_dataset(&d, &out)?;
            let stats = dataset_statistics(&d)?;
            write_json(&out.join("statistics.json"), &stats)?;
            println!("wrote {} subjects to {}", d.len(), out.display());
        }
        Command::Preprocess { input, out, mode, config } => {
            let mut cfg = load_config(config.as_deref())?.pipeline;
            if let Some(m) = mode {
                cfg.mode = match m {
                    Mode::Comprehensive => PipelineMode::Comprehensive,
                    Mode::Basic => PipelineMode::Basic,
                };
            }
            let d = preprocess_dataset(&load_dataset(&input)?, &cfg)?;
            save_dataset(&d, &out)?;
            println!("preprocessed {} subjects into {}", d.len(), out.display());
        }
        Command::Train { config, data, out, preprocessed } => {
            let cfg = load_config(config.as_deref())?;
            let mut d = load_dataset(&data)?;
            if !preprocessed {
                d = preprocess_dataset(&d, &cfg.pipeline)?;
            }
            let (train_set, test_set) = split_dataset(&d, cfg.train_fraction, cfg.split_seed)?;
            println!("training on {} subjects, testing on {}", train_set.len(), test_set.len());
            let (params, history) = train_observed(&cfg, &train_set, &test_set, |r| {
                let dsc = r.test_dsc.map_or(String::new(), |d| format!("  test DSC {d:.4}"));
                println!("epoch {:>4}  train loss {:.5}{dsc}", r.epoch, r.train_loss);
            })?;
            let metrics = evaluate(&params, &cfg.model, &test_set)?;
            write_run_dir(&out, &cfg, &params, &history, &metrics)?;
            report(&history, Some(&metrics), &out)?;
            write_overlays(&params, &cfg.model, &test_set, &out.join("overlays"))?;
            print_summary(&metrics);
        }
        Command::Eval { checkpoint, data, out } => {
            let (model, params) = load_checkpoint(&checkpoint)?;
            let d = load_dataset(&data)?;
            let metrics = evaluate(&params, &model, &d)?;
            metrics.save(&out)?;
            write_overlays(&params, &model, &d, &out.join("overlays"))?;
            print_summary(&metrics);
        }
        Command::Predict { checkpoint, input, out } => {
            let (model, params) = load_checkpoint(&checkpoint)?;
            let image = load_volume(&input)?;
            let mask = predict(&params, &model, &image)?;
            save_mask(&mask, &out)?;
            println!("{} foreground voxels written to {}", mask.count(), out.display());
        }
        Command::Ablate { config, axis, seeds, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let axis = match axis {
                Axis::SwinGce => AblationAxis::SwinGce,
                Axis::Preprocessing => AblationAxis::Preprocessing,
            };
            if seeds.is_empty() {
                bail!("at least one seed is required");
            }
            let summary = run_ablation(&cfg, axis, &seeds, &load_dataset(&data)?)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_json(&out.join("ablation.json"), &summary)?;
            for p in &summary.pairs {
                println!("seed {:>4}  delta DSC {:+.4}", p.seed, p.delta_dsc);
            }
            println!(
                "mean DSC full {:.4}  ablated {:.4}  delta {:+.4}",
                summary.mean_dsc_full, summary.mean_dsc_ablated, summary.mean_delta_dsc
            );
        }
        Command::Report { run_dir, out } => {
            let history = load_history(&run_dir.join(harness::HISTORY_FILE))?;
            let metrics_path = run_dir.join("metrics.json");
            let metrics = if metrics_path.exists() { Some(load_metrics(&metrics_path)?) } else { None };
            let files = report(&history, metrics.as_ref(), &out)?;
            println!("wrote {}, {}, {}", files.curves_png.display(), files.curves_csv.display(), files.comparison_csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
