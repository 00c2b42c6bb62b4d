//! Experiment orchestration: run manifests, the stage sequence from 3D
//! pretraining through training to the evaluation suite, and the results
//! stream consumed by the report command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ProjectConfig;
use crate::dataset::{load_clouds, load_images, load_pairings, SplitId, SplitKind};
use crate::error::{Error, Result};
use crate::evaluation::{cross_domain_eval, depth_probe, validate_miou};
use crate::models::TapLayer;
use crate::synthscene::DomainId;
use crate::training::{
    build_paired_aux, build_unpaired_aux, compute_2d_feature_stats, compute_3d_feature_stats,
    load_twodnet, pretrain_3d, train_2d, TrainInputs, TrainMode, TrainOutcome,
};

/// Immutable run header written before any stage starts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment_id: String,
    pub command: String,
    pub seed: u64,
    pub config_snapshot: String,
    /// SHA-256 over the config snapshot and the dataset manifests.
    pub input_hash: String,
    pub started_unix_ms: u128,
}

/// One line of `results.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment_id: String,
    pub mode: String,
    pub seed: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Everything the acceptance harness wants back from one pipeline run.
#[derive(Clone, Debug)]
pub struct PipelineSummary {
    pub experiment_dir: PathBuf,
    pub mode: TrainMode,
    pub seed: u64,
    pub best_val_miou: f64,
    pub domain_b_miou: f64,
    pub point_accuracy: Option<f64>,
    pub threed_checksum_unchanged: Option<bool>,
    pub pairing_reads_during_training: u64,
    pub results: Vec<ResultRecord>,
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn input_hash(cfg: &ProjectConfig, data_root: &Path) -> String {
    let mut hasher = Sha256::new();
    hasher.update(cfg.snapshot().as_bytes());
    for split in [
        SplitId { domain: DomainId::A, kind: SplitKind::Train },
        SplitId { domain: DomainId::A, kind: SplitKind::Val },
        SplitId { domain: DomainId::A, kind: SplitKind::Train3d },
        SplitId { domain: DomainId::B, kind: SplitKind::Val },
    ] {
        let path = data_root.join(split.rel_path()).join("manifest.jsonl");
        if let Ok(bytes) = fs::read(&path) {
            hasher.update(&bytes);
        }
    }
    format!("{:x}", hasher.finalize())
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("run_manifest.json"),
        serde_json::to_string_pretty(manifest)?,
    )?;
    fs::write(dir.join("config.snapshot"), &manifest.config_snapshot)?;
    Ok(())
}

fn append_results(dir: &Path, records: &[ResultRecord]) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("results.jsonl"))?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_results(dir: &Path) -> Result<Vec<ResultRecord>> {
    let text = fs::read_to_string(dir.join("results.jsonl"))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(line)?);
        }
    }
    Ok(out)
}

/// Location of the per-seed baseline run inside an experiment root.
pub fn baseline_dir(exp_root: &Path, seed: u64) -> PathBuf {
    exp_root.join(format!("baseline-s{seed}"))
}

/// Run one experiment end to end: (pretrain 3D and precompute statistics
/// when the mode needs them) → train → evaluation suite → results. Stage
/// failures leave a `FAILED` marker with the error text.
///
/// Distillation modes derive their 2D target statistics from the per-seed
/// baseline checkpoint, training it first if absent (deterministic, so a
/// shared baseline and a freshly trained one are interchangeable).
pub fn run_pipeline(
    cfg: &ProjectConfig,
    mode: TrainMode,
    seed: u64,
    data_root: &Path,
    exp_root: &Path,
) -> Result<PipelineSummary> {
    let experiment_id = format!("{}-s{seed}", mode.as_str());
    let dir = exp_root.join(&experiment_id);
    let manifest = RunManifest {
        experiment_id: experiment_id.clone(),
        command: format!("pipeline --mode {} --seed {seed}", mode.as_str()),
        seed,
        config_snapshot: cfg.snapshot(),
        input_hash: input_hash(cfg, data_root),
        started_unix_ms: now_ms(),
    };
    write_manifest(&dir, &manifest)?;
    match run_pipeline_stages(cfg, mode, seed, data_root, exp_root, &dir, &experiment_id) {
        Ok(summary) => Ok(summary),
        Err(e) => {
            let _ = fs::write(dir.join("FAILED"), e.to_string());
            Err(e)
        }
    }
}

struct TrainingStages {
    outcome: TrainOutcome,
    point_accuracy: Option<f64>,
    threed_checksum_unchanged: Option<bool>,
    pairing_reads_during_training: u64,
}

fn run_pipeline_stages(
    cfg: &ProjectConfig,
    mode: TrainMode,
    seed: u64,
    data_root: &Path,
    exp_root: &Path,
    dir: &Path,
    experiment_id: &str,
) -> Result<PipelineSummary> {
    let stages = training_stages(cfg, mode, seed, data_root, exp_root, dir)?;
    evaluation_stage(cfg, mode, seed, data_root, dir, experiment_id, stages)
}

fn training_stages(
    cfg: &ProjectConfig,
    mode: TrainMode,
    seed: u64,
    data_root: &Path,
    exp_root: &Path,
    dir: &Path,
) -> Result<TrainingStages> {
    let a_train = data_root.join(SplitId { domain: DomainId::A, kind: SplitKind::Train }.rel_path());
    let a_val = data_root.join(SplitId { domain: DomainId::A, kind: SplitKind::Val }.rel_path());
    let a_train3d =
        data_root.join(SplitId { domain: DomainId::A, kind: SplitKind::Train3d }.rel_path());

    let train_images = load_images(&a_train)?;
    let val_images = load_images(&a_val)?;

    let mut point_accuracy = None;
    let mut threed_checksum_unchanged = None;
    let pairing_reads_before = crate::geometry::pairing_reads();

    let outcome: TrainOutcome = match mode {
        TrainMode::Baseline => {
            let inputs = TrainInputs {
                train: &train_images,
                val: &val_images,
                paired: None,
                stats3d: None,
                stats2d: None,
                unpaired: None,
            };
            train_2d(cfg, mode, seed, &inputs, dir)?
        }
        TrainMode::Paired | TrainMode::BnAblation => {
            // Teacher: pretrained on the paired training clouds.
            let train_clouds = load_clouds(&a_train)?;
            let teacher = teacher_for(cfg, seed, SplitKind::Train, data_root, exp_root)?;
            point_accuracy = Some(teacher.point_accuracy);
            let checksum_before = teacher.store.checksum();

            let stats_dir = dir.join("stats");
            fs::create_dir_all(&stats_dir)?;
            crate::dnorm::write_stats(&teacher.stats3d, &stats_dir.join("stats3d.stat"))?;
            let stats2d = baseline_feature_stats(cfg, seed, data_root, exp_root, &train_images)?;
            crate::dnorm::write_stats(&stats2d, &stats_dir.join("stats2d.stat"))?;

            let pairings = load_pairings(&a_train)?;
            let paired =
                build_paired_aux(&teacher.net, &teacher.store, &train_clouds, &pairings, cfg.dims.knn)?;
            let inputs = TrainInputs {
                train: &train_images,
                val: &val_images,
                paired: Some(&paired),
                stats3d: Some(&teacher.stats3d),
                stats2d: Some(&stats2d),
                unpaired: None,
            };
            let outcome = train_2d(cfg, mode, seed, &inputs, dir)?;
            threed_checksum_unchanged = Some(teacher.store.checksum() == checksum_before);
            outcome
        }
        TrainMode::Unpaired => {
            // Teacher trained on the disjoint 3D corpus; no pairing maps
            // anywhere in this branch.
            let corpus3d = load_clouds(&a_train3d)?;
            let teacher = teacher_for(cfg, seed, SplitKind::Train3d, data_root, exp_root)?;
            point_accuracy = Some(teacher.point_accuracy);
            let checksum_before = teacher.store.checksum();

            let stats_dir = dir.join("stats");
            fs::create_dir_all(&stats_dir)?;
            crate::dnorm::write_stats(&teacher.stats3d, &stats_dir.join("stats3d.stat"))?;
            let stats2d = baseline_feature_stats(cfg, seed, data_root, exp_root, &train_images)?;
            crate::dnorm::write_stats(&stats2d, &stats_dir.join("stats2d.stat"))?;

            let unpaired = build_unpaired_aux(cfg, &teacher.net, &teacher.store, &corpus3d, seed)?;
            let inputs = TrainInputs {
                train: &train_images,
                val: &val_images,
                paired: None,
                stats3d: Some(&teacher.stats3d),
                stats2d: Some(&stats2d),
                unpaired: Some(&unpaired),
            };
            let outcome = train_2d(cfg, mode, seed, &inputs, dir)?;
            threed_checksum_unchanged = Some(teacher.store.checksum() == checksum_before);
            outcome
        }
    };
    Ok(TrainingStages {
        outcome,
        point_accuracy,
        threed_checksum_unchanged,
        pairing_reads_during_training: crate::geometry::pairing_reads() - pairing_reads_before,
    })
}

fn evaluation_stage(
    cfg: &ProjectConfig,
    mode: TrainMode,
    seed: u64,
    data_root: &Path,
    dir: &Path,
    experiment_id: &str,
    stages: TrainingStages,
) -> Result<PipelineSummary> {
    let TrainingStages {
        outcome,
        point_accuracy,
        threed_checksum_unchanged,
        pairing_reads_during_training,
    } = stages;
    let a_val = data_root.join(SplitId { domain: DomainId::A, kind: SplitKind::Val }.rel_path());
    let b_val = data_root.join(SplitId { domain: DomainId::B, kind: SplitKind::Val }.rel_path());
    let val_images = load_images(&a_val)?;

    // Evaluation suite on the best checkpoint.
    let b_val_images = load_images(&b_val)?;
    let domain_b_miou = cross_domain_eval(
        &outcome.net,
        &outcome.best_store,
        &b_val_images,
        cfg.train.batch_size,
    )?;
    let val_recheck = validate_miou(
        &outcome.net,
        &outcome.best_store,
        &val_images,
        cfg.train.batch_size,
    )?;

    let mut results = vec![
        ResultRecord {
            experiment_id: experiment_id.to_string(),
            mode: mode.as_str().to_string(),
            seed,
            split: "domain_A/val".into(),
            metric: "best_val_miou".into(),
            value: outcome.best_val_miou,
        },
        ResultRecord {
            experiment_id: experiment_id.to_string(),
            mode: mode.as_str().to_string(),
            seed,
            split: "domain_A/val".into(),
            metric: "best_checkpoint_recheck_miou".into(),
            value: val_recheck,
        },
        ResultRecord {
            experiment_id: experiment_id.to_string(),
            mode: mode.as_str().to_string(),
            seed,
            split: "domain_B/val".into(),
            metric: "cross_domain_miou".into(),
            value: domain_b_miou,
        },
    ];
    if let Some(acc) = point_accuracy {
        results.push(ResultRecord {
            experiment_id: experiment_id.to_string(),
            mode: mode.as_str().to_string(),
            seed,
            split: "domain_A/val".into(),
            metric: "point_accuracy_3d".into(),
            value: acc,
        });
    }
    append_results(dir, &results)?;

    Ok(PipelineSummary {
        experiment_dir: dir.to_path_buf(),
        mode,
        seed,
        best_val_miou: outcome.best_val_miou,
        domain_b_miou,
        point_accuracy,
        threed_checksum_unchanged,
        pairing_reads_during_training,
        results,
    })
}

/// Run the preparation and training stages only (no evaluation suite).
/// Returns the run directory.
pub fn run_train_only(
    cfg: &ProjectConfig,
    mode: TrainMode,
    seed: u64,
    data_root: &Path,
    exp_root: &Path,
) -> Result<PathBuf> {
    let experiment_id = format!("{}-s{seed}", mode.as_str());
    let dir = exp_root.join(&experiment_id);
    let manifest = RunManifest {
        experiment_id: experiment_id.clone(),
        command: format!("train --mode {} --seed {seed}", mode.as_str()),
        seed,
        config_snapshot: cfg.snapshot(),
        input_hash: input_hash(cfg, data_root),
        started_unix_ms: now_ms(),
    };
    write_manifest(&dir, &manifest)?;
    match training_stages(cfg, mode, seed, data_root, exp_root, &dir) {
        Ok(stages) => {
            append_results(
                &dir,
                &[ResultRecord {
                    experiment_id,
                    mode: mode.as_str().to_string(),
                    seed,
                    split: "domain_A/val".into(),
                    metric: "best_val_miou".into(),
                    value: stages.outcome.best_val_miou,
                }],
            )?;
            Ok(dir)
        }
        Err(e) => {
            let _ = fs::write(dir.join("FAILED"), e.to_string());
            Err(e)
        }
    }
}

/// Evaluate a finished experiment's best checkpoint on one dataset split
/// (path relative to the dataset root). Appends a result record.
pub fn eval_checkpoint(
    cfg: &ProjectConfig,
    experiment_dir: &Path,
    data_root: &Path,
    split: &str,
) -> Result<f64> {
    let (dims, branch_norm, mode, seed) = crate::training::read_arch(experiment_dir)?;
    let (net, store) = load_twodnet(dims, branch_norm, &experiment_dir.join("best.ckpt"))?;
    let images = load_images(&data_root.join(split))?;
    let miou = if split.starts_with("domain_B") {
        cross_domain_eval(&net, &store, &images, cfg.train.batch_size)?
    } else {
        validate_miou(&net, &store, &images, cfg.train.batch_size)?
    };
    append_results(
        experiment_dir,
        &[ResultRecord {
            experiment_id: experiment_dir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            mode: mode.as_str().to_string(),
            seed,
            split: split.to_string(),
            metric: "eval_miou".into(),
            value: miou,
        }],
    )?;
    Ok(miou)
}

/// A frozen teacher plus its global feature statistics.
pub struct Teacher {
    pub net: crate::models::ThreeDNet,
    pub store: crate::tensorcore::ParamStore<f32>,
    pub stats3d: ChannelStatsOwned,
    pub point_accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct TeacherMeta {
    point_accuracy: f64,
}

/// Pretrain (or reload) the frozen 3D teacher for one (corpus, seed) and
/// its global feature statistics. Results are cached under
/// `exp_root/shared/`; pretraining is deterministic, so reloading and
/// retraining are interchangeable.
fn teacher_for(
    cfg: &ProjectConfig,
    seed: u64,
    corpus: SplitKind,
    data_root: &Path,
    exp_root: &Path,
) -> Result<Teacher> {
    let corpus_dir =
        data_root.join(SplitId { domain: DomainId::A, kind: corpus }.rel_path());
    let shared = exp_root
        .join("shared")
        .join(format!("teacher-{}-s{seed}", corpus.dir_name()));
    let ckpt = shared.join("three_d.ckpt");
    if ckpt.exists() {
        let (net, store) = crate::training::load_threednet(cfg.dims, &ckpt)?;
        let stats3d = crate::dnorm::read_stats(&shared.join("stats3d.stat"))?;
        let meta: TeacherMeta =
            serde_json::from_str(&fs::read_to_string(shared.join("meta.json"))?)?;
        return Ok(Teacher {
            net,
            store,
            stats3d,
            point_accuracy: meta.point_accuracy,
        });
    }
    let clouds = load_clouds(&corpus_dir)?;
    let holdout = load_clouds(
        &data_root.join(SplitId { domain: DomainId::A, kind: SplitKind::Val }.rel_path()),
    )?;
    let trained = pretrain_3d(cfg, &clouds, &holdout, seed, &shared)?;
    let stats3d = compute_3d_feature_stats(&trained.net, &trained.store, &clouds, cfg.dims.knn)?;
    crate::dnorm::write_stats(&stats3d, &shared.join("stats3d.stat"))?;
    fs::write(
        shared.join("meta.json"),
        serde_json::to_string_pretty(&TeacherMeta {
            point_accuracy: trained.point_accuracy,
        })?,
    )?;
    Ok(Teacher {
        net: trained.net,
        store: trained.store,
        stats3d,
        point_accuracy: trained.point_accuracy,
    })
}

/// 2D target statistics for the second distillation stage, derived from
/// the per-seed baseline-pretrained backbone (trained on demand).
fn baseline_feature_stats(
    cfg: &ProjectConfig,
    seed: u64,
    data_root: &Path,
    exp_root: &Path,
    train_images: &crate::dataset::ImageSet,
) -> Result<ChannelStatsOwned> {
    let base_dir = baseline_dir(exp_root, seed);
    let ckpt = base_dir.join("best.ckpt");
    if !ckpt.exists() {
        run_pipeline(cfg, TrainMode::Baseline, seed, data_root, exp_root)?;
    }
    let (dims, branch_norm, _, _) = crate::training::read_arch(&base_dir)?;
    let (net, store) = load_twodnet(dims, branch_norm, &ckpt)?;
    compute_2d_feature_stats(cfg, &net, &store, train_images)
}

type ChannelStatsOwned = crate::dnorm::ChannelStats;

/// Train a depth probe per tap for a finished experiment and append the
/// SSIM results. Returns (tap, ssim) pairs in tap order.
pub fn run_depth_probes(
    cfg: &ProjectConfig,
    experiment_dir: &Path,
    data_root: &Path,
    taps: &[TapLayer],
) -> Result<Vec<(TapLayer, f64)>> {
    let (dims, branch_norm, mode, seed) = crate::training::read_arch(experiment_dir)?;
    let (net, store) = load_twodnet(dims, branch_norm, &experiment_dir.join("best.ckpt"))?;
    let a_train = data_root.join(SplitId { domain: DomainId::A, kind: SplitKind::Train }.rel_path());
    let a_val = data_root.join(SplitId { domain: DomainId::A, kind: SplitKind::Val }.rel_path());
    let train_images = load_images(&a_train)?;
    let val_images = load_images(&a_val)?;
    let mut out = Vec::new();
    let mut records = Vec::new();
    for tap in taps {
        let probe = depth_probe(cfg, &net, &store, *tap, &train_images, &val_images, seed)?;
        if probe.backbone_checksum_before != probe.backbone_checksum_after {
            return Err(Error::invalid("depth probe touched the backbone"));
        }
        out.push((*tap, probe.ssim));
        records.push(ResultRecord {
            experiment_id: experiment_dir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            mode: mode.as_str().to_string(),
            seed,
            split: "domain_A/val".into(),
            metric: format!("depth_ssim_{}", tap.name()),
            value: probe.ssim,
        });
    }
    append_results(experiment_dir, &records)?;
    Ok(out)
}
