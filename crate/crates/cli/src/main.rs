//! Command-line entry points for dataset generation, training,
//! evaluation and reporting.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use xmd_core::config::ProjectConfig;
use xmd_core::dataset::{generate_dataset, load_clouds, read_manifest};
use xmd_core::models::TapLayer;
use xmd_core::pipeline::{run_depth_probes, run_pipeline};
use xmd_core::report::{aggregate, collect_results, render_table};
use xmd_core::training::{pretrain_3d, TrainMode};

#[derive(Parser)]
#[command(name = "xmd", version, about = "3D-to-2D feature distillation on synthetic indoor scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic scene corpus (both domains, all splits).
    GenData {
        /// Flat key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root to create.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain the frozen 3D point network on a cloud corpus.
    Pretrain3d {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root (defaults to config/data root or XMD_DATA_ROOT).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for the checkpoint.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Cloud corpus split under domain_A: train or train3d.
        #[arg(long, default_value = "train")]
        corpus: String,
    },
    /// Precompute global feature statistics for the normalization targets.
    PrecomputeStats {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory holding three_d.ckpt (from pretrain-3d).
        #[arg(long)]
        teacher: PathBuf,
        /// Baseline experiment directory (best.ckpt + arch.json) for the
        /// 2D-side statistics; omit to compute only the 3D side.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        corpus: String,
    },
    /// Train one model (no evaluation suite; see `pipeline`).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Experiment root; the run lands in <out>/<mode>-s<seed>.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a finished experiment's best checkpoint on a split.
    Eval {
        /// Experiment directory (arch.json + best.ckpt).
        #[arg(long)]
        exp: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split path relative to the dataset root, e.g. domain_B/val.
        #[arg(long, default_value = "domain_A/val")]
        split: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train frozen-backbone depth probes and report SSIM per tap.
    ProbeDepth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        exp: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated taps: stem,stage1,stage2,stage3.
        #[arg(long, default_value = "stem,stage1,stage2,stage3")]
        taps: String,
    },
    /// Full run: (pretrain + stats when needed) → train → evaluation suite.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Experiment root.
        #[arg(long)]
        exp: PathBuf,
    },
    /// Aggregate finished experiments into a table and plots.
    Report {
        /// Experiment directories.
        #[arg(long, num_args = 1.., required = true)]
        experiments: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<ProjectConfig> {
    match path {
        Some(p) => ProjectConfig::from_file(p).with_context(|| format!("config {}", p.display())),
        None => Ok(ProjectConfig::default()),
    }
}

fn data_root(cfg: &ProjectConfig, data: &Option<PathBuf>) -> PathBuf {
    data.clone().unwrap_or_else(|| cfg.data_root())
}

fn parse_taps(s: &str) -> anyhow::Result<Vec<TapLayer>> {
    s.split(',')
        .map(|t| match t.trim() {
            "stem" => Ok(TapLayer::Stem),
            "stage1" => Ok(TapLayer::Stage1),
            "stage2" => Ok(TapLayer::Stage2),
            "stage3" => Ok(TapLayer::Stage3),
            other => bail!("unknown tap {other:?}"),
        })
        .collect()
}

fn corpus_split(corpus: &str) -> anyhow::Result<&'static str> {
    match corpus {
        "train" => Ok("domain_A/train"),
        "train3d" => Ok("domain_A/train3d"),
        other => bail!("corpus must be train or train3d, got {other:?}"),
    }
}

/// Errors from bad configuration or usage exit with 2, runtime failures
/// with 1 (matching clap's own usage-error convention).
fn is_usage_error(e: &anyhow::Error) -> bool {
    matches!(
        e.downcast_ref::<xmd_core::Error>(),
        Some(xmd_core::Error::Config(_)) | Some(xmd_core::Error::Invalid(_))
    ) || e.to_string().contains("config ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let cfg = load_config(&config)?;
            let written = generate_dataset(&cfg, &out, seed)?;
            for (split, count) in written {
                let dir = out.join(split.rel_path());
                let lines = read_manifest(&dir)?.len();
                println!("{}: {count} scenes, {lines} manifest lines", split.rel_path().display());
            }
            println!("dataset written to {}", out.display());
            Ok(())
        }
        Command::Pretrain3d {
            config,
            data,
            out,
            seed,
            corpus,
        } => {
            let cfg = load_config(&config)?;
            let root = data_root(&cfg, &data);
            let clouds = load_clouds(&root.join(corpus_split(&corpus)?))?;
            let holdout = load_clouds(&root.join("domain_A/val"))?;
            let trained = pretrain_3d(&cfg, &clouds, &holdout, seed, &out)?;
            println!(
                "pretrained 3D network: held-out point accuracy {:.4}, checkpoint {}",
                trained.point_accuracy,
                trained.checkpoint_path.display()
            );
            Ok(())
        }
        Command::PrecomputeStats {
            config,
            data,
            teacher,
            baseline,
            out,
            corpus,
        } => {
            let cfg = load_config(&config)?;
            let root = data_root(&cfg, &data);
            std::fs::create_dir_all(&out)?;
            let (net3d, store3d) =
                xmd_core::training::load_threednet(cfg.dims, &teacher.join("three_d.ckpt"))?;
            let clouds = load_clouds(&root.join(corpus_split(&corpus)?))?;
            let stats3d = xmd_core::training::compute_3d_feature_stats(
                &net3d,
                &store3d,
                &clouds,
                cfg.dims.knn,
            )?;
            xmd_core::dnorm::write_stats(&stats3d, &out.join("stats3d.stat"))?;
            println!("stats3d.stat written ({} channels)", stats3d.channels());
            if let Some(base) = baseline {
                let (dims, norm, _, _) = xmd_core::training::read_arch(&base)?;
                let (net, store) =
                    xmd_core::training::load_twodnet(dims, norm, &base.join("best.ckpt"))?;
                let images = xmd_core::dataset::load_images(&root.join("domain_A/train"))?;
                let stats2d =
                    xmd_core::training::compute_2d_feature_stats(&cfg, &net, &store, &images)?;
                xmd_core::dnorm::write_stats(&stats2d, &out.join("stats2d.stat"))?;
                println!("stats2d.stat written ({} channels)", stats2d.channels());
            }
            Ok(())
        }
        Command::Train {
            config,
            mode,
            seed,
            data,
            out,
        } => {
            let cfg = load_config(&config)?;
            let mode = TrainMode::parse(&mode)?;
            let root = data_root(&cfg, &data);
            let dir = xmd_core::pipeline::run_train_only(&cfg, mode, seed, &root, &out)?;
            println!("trained {} seed {seed}; run directory {}", mode.as_str(), dir.display());
            Ok(())
        }
        Command::Eval {
            exp,
            data,
            split,
            config,
        } => {
            let cfg = load_config(&config)?;
            let root = data_root(&cfg, &data);
            let miou = xmd_core::pipeline::eval_checkpoint(&cfg, &exp, &root, &split)?;
            println!("{split} mIoU: {miou:.4}");
            Ok(())
        }
        Command::ProbeDepth {
            config,
            exp,
            data,
            taps,
        } => {
            let cfg = load_config(&config)?;
            let root = data_root(&cfg, &data);
            let taps = parse_taps(&taps)?;
            let results = run_depth_probes(&cfg, &exp, &root, &taps)?;
            for (tap, ssim) in results {
                println!("{}: SSIM {ssim:.4}", tap.name());
            }
            Ok(())
        }
        Command::Pipeline {
            config,
            mode,
            seed,
            data,
            exp,
        } => {
            let cfg = load_config(&config)?;
            let mode = TrainMode::parse(&mode)?;
            let root = data_root(&cfg, &data);
            let summary = run_pipeline(&cfg, mode, seed, &root, &exp)?;
            println!(
                "{} seed {seed}: best val mIoU {:.4}, domain-B mIoU {:.4}",
                mode.as_str(),
                summary.best_val_miou,
                summary.domain_b_miou
            );
            for r in &summary.results {
                println!("  {} {} = {:.4}", r.split, r.metric, r.value);
            }
            Ok(())
        }
        Command::Report { experiments, out } => {
            std::fs::create_dir_all(&out)?;
            let dirs: Vec<&Path> = experiments.iter().map(|p| p.as_path()).collect();
            let (records, incomplete) = collect_results(&dirs)?;
            for dir in &incomplete {
                eprintln!("warning: {dir} has no results, marked incomplete");
            }
            let rows = aggregate(&records);
            let table = render_table(&rows);
            std::fs::write(out.join("report.tsv"), &table)?;
            print!("{table}");
            plot::write_plots(&rows, &out)?;
            println!("report written to {}", out.display());
            Ok(())
        }
    }
}
