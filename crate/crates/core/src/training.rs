//! The training regimes: baseline, paired distillation, unpaired
//! adversarial distillation and the BN ablation, plus 3D pretraining, the
//! poly learning-rate schedule, metrics streaming and checkpointing.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ProjectConfig;
use crate::dataset::{
    cloud_labels, cloud_to_input, downsample_labels, stack_images, stack_labels, CloudSet,
    ImageSet,
};
use crate::dnorm::{precompute_global_stats, ChannelStats, NormMode};
use crate::error::{Error, Result};
use crate::evaluation::validate_miou;
use crate::geometry::PairingMap;
use crate::losses::{
    discriminator_loss, generator_adv_loss, paired_regression_loss, segmentation_loss,
    total_loss, AuxMode, Reduction,
};
use crate::models::{knn_indices, BranchNorm, Discriminator, ModelDims, ThreeDNet, TwoDNet};
use crate::rng::stream;
use crate::tensorcore::{write_checkpoint, ParamStore, Tape, Tensor, IGNORE_LABEL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Baseline,
    Paired,
    Unpaired,
    BnAblation,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Paired => "paired",
            TrainMode::Unpaired => "unpaired",
            TrainMode::BnAblation => "bn_ablation",
        }
    }

    pub fn parse(s: &str) -> Result<TrainMode> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "paired" => Ok(TrainMode::Paired),
            "unpaired" => Ok(TrainMode::Unpaired),
            "bn_ablation" => Ok(TrainMode::BnAblation),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }

    pub fn branch_norm(&self) -> BranchNorm {
        match self {
            TrainMode::Baseline => BranchNorm::DnIdentity,
            TrainMode::Paired | TrainMode::Unpaired => BranchNorm::Dn,
            TrainMode::BnAblation => BranchNorm::Bn,
        }
    }
}

/// `lr0 · (1 − iter/total)^power`.
pub fn poly_lr(iter: usize, lr0: f64, power: f64, total_iters: usize) -> f64 {
    let frac = 1.0 - iter as f64 / total_iters as f64;
    lr0 * frac.max(0.0).powf(power)
}

/// One JSON-lines metrics record per training step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_adv_d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_adv_g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
    pub wall_time_s: f64,
}

pub struct MetricsWriter {
    writer: BufWriter<fs::File>,
    pub path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<MetricsWriter> {
        Ok(MetricsWriter {
            writer: BufWriter::new(fs::File::create(path)?),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.writer, record)?;
        self.writer.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.writer.flush()?;
        Ok(self.path)
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(line)?);
        }
    }
    Ok(out)
}

/// Hash of the deterministic fields of a metrics stream (wall time is
/// excluded; it is the one non-reproducible field).
pub fn metrics_fingerprint(records: &[MetricsRecord]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut mix = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for r in records {
        mix(&r.iter.to_le_bytes());
        mix(&r.lr.to_bits().to_le_bytes());
        for field in [r.loss_s, r.loss_p, r.loss_adv_d, r.loss_adv_g, r.val_miou] {
            match field {
                Some(v) => mix(&v.to_bits().to_le_bytes()),
                None => mix(&[0xA5]),
            }
        }
    }
    h
}

/// Lazily computed per-scene neighbor lists, memoized process-wide by the
/// scene's generation seed (neighborhoods are a pure function of the
/// cloud, so sharing across runs changes nothing).
pub struct NeighborCache {
    k: usize,
    cache: Vec<Option<Arc<Vec<Vec<u32>>>>>,
}

type KnnMemo = std::collections::HashMap<(u64, usize, usize), Arc<Vec<Vec<u32>>>>;
static KNN_MEMO: std::sync::OnceLock<std::sync::Mutex<KnnMemo>> = std::sync::OnceLock::new();

impl NeighborCache {
    pub fn new(scenes: usize, k: usize) -> NeighborCache {
        NeighborCache {
            k,
            cache: vec![None; scenes],
        }
    }

    pub fn get(&mut self, clouds: &CloudSet, idx: usize) -> Arc<Vec<Vec<u32>>> {
        if self.cache[idx].is_none() {
            let key = (clouds.records[idx].seed, self.k, clouds.clouds[idx].len());
            let memo = KNN_MEMO.get_or_init(|| std::sync::Mutex::new(KnnMemo::new()));
            let hit = memo.lock().ok().and_then(|m| m.get(&key).cloned());
            let nbrs = match hit {
                Some(nbrs) => nbrs,
                None => {
                    let nbrs = Arc::new(knn_indices(&clouds.clouds[idx].positions, self.k));
                    if let Ok(mut m) = memo.lock() {
                        m.insert(key, Arc::clone(&nbrs));
                    }
                    nbrs
                }
            };
            self.cache[idx] = Some(nbrs);
        }
        Arc::clone(self.cache[idx].as_ref().unwrap())
    }
}

/// A pretrained, frozen 3D network.
pub struct Pretrained3d {
    pub net: ThreeDNet,
    pub store: ParamStore<f32>,
    pub point_accuracy: f64,
    pub checkpoint_path: PathBuf,
}

/// Point-wise cross-entropy pretraining, then freeze. Writes the
/// checkpoint and reports held-out point accuracy.
pub fn pretrain_3d(
    cfg: &ProjectConfig,
    train: &CloudSet,
    holdout: &CloudSet,
    seed: u64,
    out_dir: &Path,
) -> Result<Pretrained3d> {
    fs::create_dir_all(out_dir)?;
    let mut store = ParamStore::<f32>::new();
    let net = ThreeDNet::init(&mut store, cfg.dims, seed)?;
    let mut neighbors = NeighborCache::new(train.clouds.len(), cfg.dims.knn);
    let mut batch_rng = stream(seed, "pretrain3d-batches");
    let mut last_good = store.clone();

    for iter in 0..cfg.pretrain3d.iters {
        let lr = poly_lr(iter, cfg.pretrain3d.lr0, cfg.pretrain3d.poly_power, cfg.pretrain3d.iters);
        let mut tape = Tape::new();
        let mut terms = Vec::new();
        for _ in 0..cfg.pretrain3d.batch_scenes {
            let idx = batch_rng.gen_range(0..train.clouds.len());
            let cloud = &train.clouds[idx];
            let nbrs = neighbors.get(train, idx);
            let inputs = cloud_to_input(cloud);
            let out = net.forward(&mut tape, &store, &inputs, &nbrs)?;
            let ce = tape.softmax_cross_entropy(out.point_logits, cloud_labels(cloud), true)?;
            terms.push((ce, 1.0 / cfg.pretrain3d.batch_scenes as f64));
        }
        let loss = tape.weighted_sum(&terms)?;
        match tape.finish(loss, &mut store) {
            Ok(()) => {}
            Err(e) => {
                write_checkpoint(&last_good, &out_dir.join("three_d.last_good.ckpt"))?;
                return Err(e);
            }
        }
        store.sgd_step(lr as f32);
        store.zero_grads();
        last_good = store.clone();
    }

    // Held-out point accuracy.
    let mut correct = 0u64;
    let mut total = 0u64;
    let mut holdout_neighbors = NeighborCache::new(holdout.clouds.len(), cfg.dims.knn);
    for idx in 0..holdout.clouds.len() {
        let cloud = &holdout.clouds[idx];
        let nbrs = holdout_neighbors.get(holdout, idx);
        let inputs = cloud_to_input(cloud);
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &store, &inputs, &nbrs)?;
        let logits = tape.value(out.point_logits);
        let (p, c) = logits.dims2("pretrain-eval")?;
        for pi in 0..p {
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for ch in 0..c {
                let v = logits.data()[pi * c + ch];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            if best as u16 == cloud.labels[pi] {
                correct += 1;
            }
            total += 1;
        }
    }
    let checkpoint_path = out_dir.join("three_d.ckpt");
    write_checkpoint(&store, &checkpoint_path)?;
    Ok(Pretrained3d {
        net,
        store,
        point_accuracy: correct as f64 / total.max(1) as f64,
        checkpoint_path,
    })
}

/// Penultimate per-point features of a frozen 3D network, as values.
pub fn threed_features(
    net: &ThreeDNet,
    store: &ParamStore<f32>,
    cloud: &crate::synthscene::PointCloud,
    neighbors: &[Vec<u32>],
) -> Result<Tensor<f32>> {
    let inputs = cloud_to_input(cloud);
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, store, &inputs, neighbors)?;
    Ok(tape.value(out.f3d).clone())
}

/// Global per-channel statistics of the frozen 3D features over a corpus.
pub fn compute_3d_feature_stats(
    net: &ThreeDNet,
    store: &ParamStore<f32>,
    clouds: &CloudSet,
    knn: usize,
) -> Result<ChannelStats> {
    let mut neighbors = NeighborCache::new(clouds.clouds.len(), knn);
    let mut acc: Option<ChannelStats> = None;
    for idx in 0..clouds.clouds.len() {
        let nbrs = neighbors.get(clouds, idx);
        let f3d = threed_features(net, store, &clouds.clouds[idx], &nbrs)?;
        let (p, c) = f3d.dims2("stats3d")?;
        let reshaped = f3d.reshaped(&[1, c, 1, p])?;
        // Transpose (P, C) rows into a (1, C, 1, P) map.
        let mut map = Tensor::zeros(&[1, c, 1, p]);
        for pi in 0..p {
            for ch in 0..c {
                map.data_mut()[ch * p + pi] = reshaped.data()[pi * c + ch];
            }
        }
        let scene_stats = precompute_global_stats([&map].into_iter())?;
        acc = Some(match acc {
            None => scene_stats,
            Some(mut prev) => {
                prev.merge(&scene_stats);
                prev
            }
        });
    }
    acc.ok_or_else(|| Error::invalid("no clouds for 3D statistics"))
}

/// Global statistics of the backbone feature over the training images,
/// pooled across channels and broadcast to the branch width. Uses a
/// pretrained baseline checkpoint in inference mode.
pub fn compute_2d_feature_stats(
    cfg: &ProjectConfig,
    net: &TwoDNet,
    store: &ParamStore<f32>,
    images: &ImageSet,
) -> Result<ChannelStats> {
    let mut scratch = store.clone();
    let mut acc: Option<ChannelStats> = None;
    for chunk in images.images.chunks(cfg.train.batch_size.max(1)) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        let rgb = stack_images(&refs)?;
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &mut scratch, &rgb, NormMode::Infer)?;
        let stats = precompute_global_stats([tape.value(out.f2d)].into_iter())?;
        acc = Some(match acc {
            None => stats,
            Some(mut prev) => {
                prev.merge(&stats);
                prev
            }
        });
    }
    let stats = acc.ok_or_else(|| Error::invalid("no images for 2D statistics"))?;
    Ok(stats.pooled_to(cfg.dims.c3d))
}

/// Precomputed paired supervision: per scene, the projected 3D feature
/// grid (C, gh, gw) and its coverage mask. The 3D network is frozen, so
/// its features per scene never change.
pub struct PairedAux {
    pub grids: Vec<Tensor<f32>>,
    pub masks: Vec<Vec<bool>>,
    pub grid_h: usize,
    pub grid_w: usize,
}

pub fn build_paired_aux(
    net: &ThreeDNet,
    store: &ParamStore<f32>,
    clouds: &CloudSet,
    pairings: &[PairingMap],
    knn: usize,
) -> Result<PairedAux> {
    if clouds.clouds.len() != pairings.len() {
        return Err(Error::invalid("cloud/pairing count mismatch"));
    }
    let mut neighbors = NeighborCache::new(clouds.clouds.len(), knn);
    let mut grids = Vec::with_capacity(pairings.len());
    let mut masks = Vec::with_capacity(pairings.len());
    let (mut gh, mut gw) = (0, 0);
    for (idx, map) in pairings.iter().enumerate() {
        let nbrs = neighbors.get(clouds, idx);
        let f3d = threed_features(net, store, &clouds.clouds[idx], &nbrs)?;
        let (grid, mask) = crate::models::scatter_3d_to_grid(&f3d, map)?;
        gh = map.grid_height;
        gw = map.grid_width;
        grids.push(grid);
        masks.push(mask);
    }
    Ok(PairedAux {
        grids,
        masks,
        grid_h: gh,
        grid_w: gw,
    })
}

/// Real 3D feature vectors for the adversarial objective, pooled per class
/// from a disjoint 3D corpus. Row-major with stride `c3d`.
pub struct UnpairedAux {
    pub pools: Vec<Vec<f32>>,
    pub c3d: usize,
}

impl UnpairedAux {
    pub fn class_rows(&self, class: usize) -> usize {
        self.pools[class].len() / self.c3d
    }
}

pub fn build_unpaired_aux(
    cfg: &ProjectConfig,
    net: &ThreeDNet,
    store: &ParamStore<f32>,
    clouds: &CloudSet,
    seed: u64,
) -> Result<UnpairedAux> {
    let c3d = cfg.dims.c3d;
    let per_scene_cap = 32usize;
    let mut pools = vec![Vec::new(); cfg.dims.num_classes];
    let mut neighbors = NeighborCache::new(clouds.clouds.len(), cfg.dims.knn);
    let mut rng = stream(seed, "unpaired-pool");
    for idx in 0..clouds.clouds.len() {
        let cloud = &clouds.clouds[idx];
        let nbrs = neighbors.get(clouds, idx);
        let f3d = threed_features(net, store, cloud, &nbrs)?;
        let mut by_class: Vec<Vec<u32>> = vec![Vec::new(); cfg.dims.num_classes];
        for (pi, label) in cloud.labels.iter().enumerate() {
            if usize::from(*label) < cfg.dims.num_classes {
                by_class[usize::from(*label)].push(pi as u32);
            }
        }
        for (class, indices) in by_class.iter().enumerate() {
            let take = indices.len().min(per_scene_cap);
            for _ in 0..take {
                let pi = indices[rng.gen_range(0..indices.len())] as usize;
                pools[class].extend_from_slice(&f3d.data()[pi * c3d..(pi + 1) * c3d]);
            }
        }
    }
    Ok(UnpairedAux { pools, c3d })
}

/// Fixed affine applied to every discriminator input: standardization by
/// the precomputed global 3D feature statistics, identically on real and
/// simulated vectors. Keeps the sum-form adversarial objective in a sane
/// numeric range whatever scale the frozen teacher's features have.
struct DiscInputNorm {
    neg_mean: Vec<f32>,
    inv_std: Vec<f32>,
}

impl DiscInputNorm {
    fn from_stats(stats: Option<&ChannelStats>, channels: usize, epsilon: f64) -> DiscInputNorm {
        match stats {
            Some(s) => DiscInputNorm {
                neg_mean: s.mean.iter().map(|m| -*m as f32).collect(),
                inv_std: s.std(epsilon).iter().map(|v| (1.0 / v) as f32).collect(),
            },
            None => DiscInputNorm {
                neg_mean: vec![0.0; channels],
                inv_std: vec![1.0; channels],
            },
        }
    }

    fn apply(&self, channel: usize, v: f32) -> f32 {
        (v + self.neg_mean[channel]) * self.inv_std[channel]
    }

    /// Same affine on a rank-4 feature map, on the tape.
    fn apply_map(
        &self,
        tape: &mut Tape<f32>,
        x: crate::tensorcore::Var,
    ) -> Result<crate::tensorcore::Var> {
        let c = self.neg_mean.len();
        let nm = tape.constant(Tensor::from_vec(&[c], self.neg_mean.clone())?);
        let inv = tape.constant(Tensor::from_vec(&[c], self.inv_std.clone())?);
        let centered = tape.add_channel(x, nm)?;
        tape.mul_channel(centered, inv)
    }
}

/// Everything a 2D training run consumes.
pub struct TrainInputs<'a> {
    pub train: &'a ImageSet,
    pub val: &'a ImageSet,
    pub paired: Option<&'a PairedAux>,
    pub stats3d: Option<&'a ChannelStats>,
    pub stats2d: Option<&'a ChannelStats>,
    pub unpaired: Option<&'a UnpairedAux>,
}

pub struct TrainOutcome {
    pub net: TwoDNet,
    pub best_store: ParamStore<f32>,
    pub best_val_miou: f64,
    pub best_iter: usize,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub empty_pairing_batches: usize,
    pub skipped_discriminator_terms: usize,
}

#[derive(Serialize, Deserialize)]
struct ArchManifest {
    c2d: usize,
    c3d: usize,
    num_classes: usize,
    knn: usize,
    branch_norm: String,
    mode: String,
    seed: u64,
}

/// Train the 2D network in the selected mode. Deterministic in
/// `(config, seed)`; the metrics stream, checkpoints and the best
/// validation mIoU are all reproducible bit-for-bit (wall time aside).
pub fn train_2d(
    cfg: &ProjectConfig,
    mode: TrainMode,
    seed: u64,
    inputs: &TrainInputs,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)?;
    let reduction = if cfg.train.sum_reduction {
        Reduction::Sum
    } else {
        Reduction::Mean
    };
    // A paired run with zero regression weight degenerates to the baseline
    // objective and architecture.
    let effective_mode = if mode == TrainMode::Paired && cfg.train.weights.w_p == 0.0 {
        TrainMode::Baseline
    } else {
        mode
    };
    let branch_norm = effective_mode.branch_norm();

    let mut store = ParamStore::<f32>::new();
    let net = TwoDNet::init(
        &mut store,
        cfg.dims,
        branch_norm,
        inputs.stats3d,
        inputs.stats2d,
        seed,
    )?;

    let needs_paired = matches!(effective_mode, TrainMode::Paired | TrainMode::BnAblation);
    let paired = if needs_paired {
        Some(
            inputs
                .paired
                .ok_or_else(|| Error::invalid("paired supervision missing"))?,
        )
    } else {
        None
    };

    let mut d_store = ParamStore::<f32>::new();
    let discriminators: Vec<Discriminator> = if effective_mode == TrainMode::Unpaired {
        (0..cfg.dims.num_classes)
            .map(|c| Discriminator::init(&mut d_store, cfg.dims.c3d, c, seed))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let unpaired = if effective_mode == TrainMode::Unpaired {
        Some(
            inputs
                .unpaired
                .ok_or_else(|| Error::invalid("unpaired 3D pools missing"))?,
        )
    } else {
        None
    };
    let disc_norm = DiscInputNorm::from_stats(
        inputs.stats3d.filter(|_| effective_mode == TrainMode::Unpaired),
        cfg.dims.c3d,
        crate::dnorm::DEFAULT_EPSILON,
    );

    // Per-scene cell labels at the feature grid resolution.
    let cell_labels: Vec<Vec<u8>> = inputs
        .train
        .labels
        .iter()
        .map(|l| downsample_labels(l, inputs.train.width, inputs.train.height, 8))
        .collect();
    let cells_per_scene = (inputs.train.width / 8) * (inputs.train.height / 8);

    let mut metrics = MetricsWriter::create(&out_dir.join("metrics.jsonl"))?;
    let started = Instant::now();
    let n_train = inputs.train.images.len();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut cursor = n_train;
    let mut epoch = 0usize;
    let mut adv_rng = stream(seed, "adv-real-draws");

    let mut best_val_miou = f64::NEG_INFINITY;
    let mut best_iter = 0usize;
    let mut best_store = store.clone();
    let mut last_good = store.clone();
    let mut empty_pairing_batches = 0usize;
    let mut skipped_discriminator_terms = 0usize;
    let checkpoint_path = out_dir.join("best.ckpt");

    // `total_iters` budgets 2D-network updates; the alternating regime
    // interleaves its discriminator steps on top, stretching the schedule
    // horizon so every mode trains the 2D network for the same number of
    // updates under the same decay trajectory.
    let cycle = cfg.train.adv_alternation + 1;
    let total_steps = if effective_mode == TrainMode::Unpaired {
        cfg.train.total_iters * cycle
    } else {
        cfg.train.total_iters
    };
    let batch_size = cfg.train.batch_size.min(n_train).max(1);
    for iter in 0..total_steps {
        let lr = poly_lr(iter, cfg.train.lr0, cfg.train.poly_power, total_steps) as f32;
        let mut idx = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if cursor >= n_train {
                let mut shuffle_rng = stream(seed, &format!("batch-order/{epoch}"));
                for i in (1..n_train).rev() {
                    order.swap(i, shuffle_rng.gen_range(0..=i));
                }
                cursor = 0;
                epoch += 1;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &inputs.train.images[i]).collect();
        let rgb = stack_images(&refs)?;
        let label_refs: Vec<&Arc<Vec<u8>>> = idx.iter().map(|&i| &inputs.train.labels[i]).collect();
        let labels = Arc::new(stack_labels(&label_refs));

        let mut record = MetricsRecord {
            iter,
            lr: f64::from(lr),
            loss_s: None,
            loss_p: None,
            loss_adv_d: None,
            loss_adv_g: None,
            val_miou: None,
            wall_time_s: 0.0,
        };

        let is_d_step = effective_mode == TrainMode::Unpaired && iter % cycle != 0;

        let abort_guard = |e: Error, last_good: &ParamStore<f32>| -> Error {
            let _ = write_checkpoint(last_good, &out_dir.join("aborted_last_good.ckpt"));
            e
        };

        if is_d_step {
            // Feature extraction with the 2D network held fixed.
            let unpaired = unpaired.unwrap();
            let sim_rows = {
                let mut tape = Tape::new();
                let out = net
                    .forward(&mut tape, &mut store, &rgb, NormMode::Train)
                    .map_err(|e| abort_guard(e, &last_good))?;
                tape.value(out.f3d_sim).clone()
            };
            let (_, c3d, gh, gw) = sim_rows.dims4("d-step")?;
            let mut tape = Tape::new();
            let mut terms = Vec::new();
            let mut total_d = 0.0;
            for d in &discriminators {
                // Simulated rows of this class from the batch, capped and
                // fed through the fixed input normalization.
                let mut cells: Vec<(usize, usize, usize)> = Vec::new();
                for (bi, &scene) in idx.iter().enumerate() {
                    for cell in 0..cells_per_scene {
                        if usize::from(cell_labels[scene][cell]) == d.category {
                            cells.push((bi, cell / gw, cell % gw));
                        }
                    }
                }
                let cap = cfg.train.adv_vectors_per_class.max(1);
                if cells.len() > cap {
                    for i in 0..cap {
                        let j = adv_rng.gen_range(i..cells.len());
                        cells.swap(i, j);
                    }
                    cells.truncate(cap);
                }
                let mut rows = Vec::with_capacity(cells.len() * c3d);
                for &(bi, hy, wx) in &cells {
                    for ch in 0..c3d {
                        rows.push(disc_norm.apply(
                            ch,
                            sim_rows.data()[((bi * c3d + ch) * gh + hy) * gw + wx],
                        ));
                    }
                }
                let n_sim = rows.len() / c3d;
                let pool_rows = unpaired.class_rows(d.category);
                if n_sim == 0 || pool_rows == 0 {
                    skipped_discriminator_terms += 1;
                    continue;
                }
                let n_real = cap.min(pool_rows);
                let mut real = Vec::with_capacity(n_real * c3d);
                for _ in 0..n_real {
                    let r = adv_rng.gen_range(0..pool_rows);
                    for ch in 0..c3d {
                        real.push(disc_norm.apply(ch, unpaired.pools[d.category][r * c3d + ch]));
                    }
                }
                let sim_t = Tensor::from_vec(&[n_sim, c3d], rows)?;
                let real_t = Tensor::from_vec(&[n_real, c3d], real)?;
                let term = discriminator_loss(&mut tape, &d_store, d, &sim_t, &real_t)?;
                total_d += tape.value(term.var).item() as f64;
                terms.push((term.var, 1.0));
            }
            if !terms.is_empty() {
                let loss = tape.weighted_sum(&terms)?;
                tape.finish(loss, &mut d_store)
                    .map_err(|e| abort_guard(e, &last_good))?;
                if cfg.train.partition_checks {
                    assert_eq!(
                        store.grad_norm(),
                        0.0,
                        "discriminator step leaked gradient into the 2D network"
                    );
                }
                let d_lr =
                    poly_lr(iter, cfg.train.d_lr0, cfg.train.poly_power, total_steps);
                d_store.sgd_step(d_lr as f32);
                d_store.zero_grads();
            }
            record.loss_adv_d = Some(total_d);
        } else {
            let mut tape = Tape::new();
            let out = net
                .forward(&mut tape, &mut store, &rgb, NormMode::Train)
                .map_err(|e| abort_guard(e, &last_good))?;
            let seg = segmentation_loss(&mut tape, out.logits, Arc::clone(&labels), reduction)?;
            record.loss_s = Some(tape.value(seg.var).item() as f64);
            let total = match effective_mode {
                TrainMode::Baseline => tape.weighted_sum(&[(seg.var, cfg.train.weights.w_s)])?,
                TrainMode::Paired | TrainMode::BnAblation => {
                    let aux = paired.unwrap();
                    let (gh, gw) = (aux.grid_h, aux.grid_w);
                    let mut target = Tensor::zeros(&[idx.len(), cfg.dims.c3d, gh, gw]);
                    let mut mask = Vec::with_capacity(idx.len() * gh * gw);
                    for (bi, &scene) in idx.iter().enumerate() {
                        let stride = cfg.dims.c3d * gh * gw;
                        target.data_mut()[bi * stride..(bi + 1) * stride]
                            .copy_from_slice(aux.grids[scene].data());
                        mask.extend_from_slice(&aux.masks[scene]);
                    }
                    let lp = paired_regression_loss(
                        &mut tape,
                        out.f3d_sim,
                        Arc::new(target),
                        Arc::new(mask),
                        reduction,
                    )?;
                    if lp.flagged_empty {
                        empty_pairing_batches += 1;
                    }
                    record.loss_p = Some(tape.value(lp.var).item() as f64);
                    total_loss(&mut tape, seg.var, lp.var, &cfg.train.weights, AuxMode::Paired)?
                }
                TrainMode::Unpaired => {
                    // The generator objective runs on a per-class subsample
                    // of the labeled cells, mirroring the discriminator-side
                    // vector sampling; unsampled cells are marked ignore.
                    let mut all_cells = Vec::with_capacity(idx.len() * cells_per_scene);
                    for &scene in &idx {
                        all_cells.extend_from_slice(&cell_labels[scene]);
                    }
                    let mut cells = vec![IGNORE_LABEL; all_cells.len()];
                    let cap = cfg.train.adv_vectors_per_class.max(1);
                    for class in 0..cfg.dims.num_classes as u8 {
                        let mut members: Vec<usize> = all_cells
                            .iter()
                            .enumerate()
                            .filter(|(_, l)| **l == class)
                            .map(|(i, _)| i)
                            .collect();
                        if members.len() > cap {
                            for i in 0..cap {
                                let j = adv_rng.gen_range(i..members.len());
                                members.swap(i, j);
                            }
                            members.truncate(cap);
                        }
                        for i in members {
                            cells[i] = class;
                        }
                    }
                    let sim_norm = disc_norm.apply_map(&mut tape, out.f3d_sim)?;
                    let adv =
                        generator_adv_loss(&mut tape, &d_store, &discriminators, sim_norm, &cells)?;
                    record.loss_adv_g = Some(tape.value(adv.var).item() as f64);
                    total_loss(&mut tape, seg.var, adv.var, &cfg.train.weights, AuxMode::Unpaired)?
                }
            };
            tape.finish(total, &mut store)
                .map_err(|e| abort_guard(e, &last_good))?;
            if cfg.train.partition_checks && effective_mode == TrainMode::Unpaired {
                assert_eq!(
                    d_store.grad_norm(),
                    0.0,
                    "generator step leaked gradient into the discriminators"
                );
            }
            store.sgd_step(lr);
            store.zero_grads();
        }
        last_good = store.clone();

        if (iter + 1) % cfg.train.eval_every == 0 || iter + 1 == total_steps {
            let val = validate_miou(&net, &store, inputs.val, batch_size)?;
            record.val_miou = Some(val);
            if val > best_val_miou {
                best_val_miou = val;
                best_iter = iter;
                best_store = store.clone();
            }
        }
        record.wall_time_s = started.elapsed().as_secs_f64();
        metrics.write(&record)?;
    }

    write_checkpoint(&best_store, &checkpoint_path)?;
    fs::write(
        out_dir.join("arch.json"),
        serde_json::to_string_pretty(&ArchManifest {
            c2d: cfg.dims.c2d,
            c3d: cfg.dims.c3d,
            num_classes: cfg.dims.num_classes,
            knn: cfg.dims.knn,
            branch_norm: format!("{branch_norm:?}"),
            mode: mode.as_str().to_string(),
            seed,
        })?,
    )?;
    let metrics_path = metrics.finish()?;
    Ok(TrainOutcome {
        net,
        best_store,
        best_val_miou,
        best_iter,
        checkpoint_path,
        metrics_path,
        empty_pairing_batches,
        skipped_discriminator_terms,
    })
}

/// Rebuild a network skeleton and load a checkpoint into it. The branch
/// norm must match the checkpoint's architecture; target statistics come
/// from the checkpoint buffers.
pub fn load_twodnet(
    dims: ModelDims,
    branch_norm: BranchNorm,
    checkpoint: &Path,
) -> Result<(TwoDNet, ParamStore<f32>)> {
    let mut store = ParamStore::<f32>::new();
    let skeleton_norm = match branch_norm {
        BranchNorm::Bn => BranchNorm::Bn,
        _ => BranchNorm::DnIdentity,
    };
    let net = TwoDNet::init(&mut store, dims, skeleton_norm, None, None, 0)?;
    let entries = crate::tensorcore::read_checkpoint(checkpoint)?;
    crate::tensorcore::load_into(&mut store, &entries)?;
    Ok((net, store))
}

/// Rebuild a 3D network skeleton and load a checkpoint into it.
pub fn load_threednet(dims: ModelDims, checkpoint: &Path) -> Result<(ThreeDNet, ParamStore<f32>)> {
    let mut store = ParamStore::<f32>::new();
    let net = ThreeDNet::init(&mut store, dims, 0)?;
    let entries = crate::tensorcore::read_checkpoint(checkpoint)?;
    crate::tensorcore::load_into(&mut store, &entries)?;
    Ok((net, store))
}

/// Architecture metadata saved next to each checkpoint.
pub fn read_arch(out_dir: &Path) -> Result<(ModelDims, BranchNorm, TrainMode, u64)> {
    let text = fs::read_to_string(out_dir.join("arch.json"))?;
    let arch: ArchManifest = serde_json::from_str(&text)?;
    let dims = ModelDims {
        c2d: arch.c2d,
        c3d: arch.c3d,
        num_classes: arch.num_classes,
        knn: arch.knn,
    };
    let branch_norm = match arch.branch_norm.as_str() {
        "Dn" => BranchNorm::Dn,
        "DnIdentity" => BranchNorm::DnIdentity,
        "Bn" => BranchNorm::Bn,
        other => return Err(Error::Config(format!("unknown branch norm {other:?}"))),
    };
    Ok((dims, branch_norm, TrainMode::parse(&arch.mode)?, arch.seed))
}

/// Count of pixels whose label is not ignore, over a full split.
pub fn labeled_fraction(images: &ImageSet) -> f64 {
    let mut labeled = 0usize;
    let mut total = 0usize;
    for l in &images.labels {
        labeled += l.iter().filter(|v| **v != IGNORE_LABEL).count();
        total += l.len();
    }
    labeled as f64 / total.max(1) as f64
}
