//! Dataset generation and loading: scene corpus layout, JSON-lines
//! manifests and in-memory caches for training.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::ProjectConfig;
use crate::error::{Error, Result};
use crate::geometry::{
    self, project_points, CameraIntrinsics, CameraPose, PairingMap,
};
use crate::synthscene::{
    self, generate_scene, render, sample_camera, sample_points, DomainId, DomainProfile,
    PointCloud, IGNORE,
};
use crate::tensorcore::{Tensor, IGNORE_LABEL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitKind {
    Train,
    Val,
    /// Disjoint 3D-only corpus for unpaired training.
    Train3d,
}

impl SplitKind {
    pub fn dir_name(&self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Train3d => "train3d",
        }
    }
}

/// A split is addressed by domain + kind, e.g. `domain_A/train`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitId {
    pub domain: DomainId,
    pub kind: SplitKind,
}

impl SplitId {
    pub fn rel_path(&self) -> PathBuf {
        PathBuf::from(format!("domain_{}", self.domain.as_str())).join(self.kind.dir_name())
    }
}

/// One manifest line: file names, generation seed, domain and camera.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub seed: u64,
    pub domain: String,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub rgb: String,
    pub labels: String,
    pub depth: String,
    pub cloud: String,
    pub pairing: String,
    pub coverage: f64,
}

/// Aggregate pairing coverage written next to each manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub samples: usize,
    pub mean_coverage: f64,
    pub min_coverage: f64,
    pub max_coverage: f64,
}

fn scene_seed(root_seed: u64, domain: DomainId, kind: SplitKind, index: usize) -> u64 {
    let label = format!("gen/{}/{}/{index}", domain.as_str(), kind.dir_name());
    let mut h: u64 = 0xcbf29ce484222325 ^ root_seed.wrapping_mul(0x9e3779b97f4a7c15);
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Camera intrinsics used for every rendered view under a config.
pub fn default_intrinsics(cfg: &ProjectConfig) -> CameraIntrinsics {
    CameraIntrinsics {
        fx: cfg.data.focal,
        fy: cfg.data.focal,
        cx: cfg.data.image_size as f64 / 2.0,
        cy: cfg.data.image_size as f64 / 2.0,
        width: cfg.data.image_size,
        height: cfg.data.image_size,
    }
}

/// Generate one sample (scene, view, cloud, pairing) and write its files.
fn generate_sample(
    cfg: &ProjectConfig,
    dir: &Path,
    profile: &DomainProfile,
    kind: SplitKind,
    index: usize,
    root_seed: u64,
) -> Result<SampleRecord> {
    let seed = scene_seed(root_seed, profile.domain, kind, index);
    let scene = generate_scene(profile, seed);
    let mut cam_rng = crate::rng::stream(seed, "camera");
    let pose = sample_camera(scene.room_extent, &mut cam_rng);
    let intrinsics = default_intrinsics(cfg);
    let raster = render(&scene, &intrinsics, &pose)?;
    let cloud = sample_points(&scene, cfg.data.points, seed)?;
    // The paired grid lives at the 2D network's 1/8 feature resolution:
    // project with intrinsics scaled by 1/8 rather than post-hoc stride
    // decimation of the full grid.
    let grid_intrinsics = intrinsics.scaled_down(8);
    let pairing = project_points(&cloud, &grid_intrinsics, &pose, 1)?;

    let id = format!("{index:04}");
    let rgb = format!("{id}.rgb.ppm");
    let labels = format!("{id}.labels.pgm");
    let depth = format!("{id}.depth.dpth");
    let cloud_file = format!("{id}.cloud.pc3d");
    let pairing_file = format!("{id}.pairs.pair");
    synthscene::write_ppm(&raster.rgb, raster.width, raster.height, &dir.join(&rgb))?;
    synthscene::write_pgm(&raster.labels, raster.width, raster.height, &dir.join(&labels))?;
    synthscene::write_depth(&raster.depth, raster.width, raster.height, &dir.join(&depth))?;
    synthscene::write_point_cloud(&cloud, &dir.join(&cloud_file))?;
    geometry::write_pairing_map(&pairing, &dir.join(&pairing_file))?;

    Ok(SampleRecord {
        id,
        seed,
        domain: profile.domain.as_str().to_string(),
        intrinsics,
        pose,
        rgb,
        labels,
        depth,
        cloud: cloud_file,
        pairing: pairing_file,
        coverage: pairing.coverage(),
    })
}

/// Generate the full corpus: train/val for both domains plus the disjoint
/// 3D corpus for domain A. Deterministic in `(config, seed)`.
pub fn generate_dataset(cfg: &ProjectConfig, out_root: &Path, seed: u64) -> Result<Vec<(SplitId, usize)>> {
    let mut written = Vec::new();
    let splits = [
        (DomainId::A, SplitKind::Train, cfg.data.train_scenes),
        (DomainId::A, SplitKind::Val, cfg.data.val_scenes),
        (DomainId::A, SplitKind::Train3d, cfg.data.aux3d_scenes),
        (DomainId::B, SplitKind::Train, cfg.data.train_scenes),
        (DomainId::B, SplitKind::Val, cfg.data.val_scenes),
    ];
    for (domain, kind, count) in splits {
        let profile = DomainProfile::standard(domain);
        let split = SplitId { domain, kind };
        let dir = out_root.join(split.rel_path());
        fs::create_dir_all(&dir)?;
        let mut manifest = fs::File::create(dir.join("manifest.jsonl"))?;
        let mut coverages = Vec::with_capacity(count);
        for index in 0..count {
            let record = generate_sample(cfg, &dir, &profile, kind, index, seed)?;
            coverages.push(record.coverage);
            serde_json::to_writer(&mut manifest, &record)?;
            manifest.write_all(b"\n")?;
        }
        manifest.flush()?;
        if !coverages.is_empty() {
            let summary = CoverageSummary {
                samples: coverages.len(),
                mean_coverage: coverages.iter().sum::<f64>() / coverages.len() as f64,
                min_coverage: coverages.iter().copied().fold(f64::INFINITY, f64::min),
                max_coverage: coverages.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            fs::write(
                dir.join("coverage.json"),
                serde_json::to_string_pretty(&summary)?,
            )?;
        }
        written.push((split, count));
    }
    Ok(written)
}

pub fn read_manifest(split_dir: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(split_dir.join("manifest.jsonl"))?;
    let mut records = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line)?);
    }
    if records.is_empty() {
        return Err(Error::invalid(format!(
            "empty manifest in {}",
            split_dir.display()
        )));
    }
    Ok(records)
}

/// In-memory 2D view of a split: images as (3, H, W) tensors in [0,1],
/// full-resolution labels and depth maps.
pub struct ImageSet {
    pub records: Vec<SampleRecord>,
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<Arc<Vec<u8>>>,
    pub depths: Vec<Vec<f32>>,
    pub width: usize,
    pub height: usize,
}

pub fn load_images(split_dir: &Path) -> Result<ImageSet> {
    let records = read_manifest(split_dir)?;
    let mut images = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    let mut depths = Vec::with_capacity(records.len());
    let mut dims = (0usize, 0usize);
    for r in &records {
        let (rgb, w, h) = synthscene::read_ppm(&split_dir.join(&r.rgb))?;
        let (lab, lw, lh) = synthscene::read_pgm(&split_dir.join(&r.labels))?;
        let (dep, dw, dh) = synthscene::read_depth(&split_dir.join(&r.depth))?;
        if (w, h) != (lw, lh) || (w, h) != (dw, dh) {
            return Err(Error::invalid(format!("inconsistent raster sizes for {}", r.id)));
        }
        dims = (w, h);
        // Interleaved HWC -> planar CHW.
        let mut planar = Tensor::zeros(&[3, h, w]);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    planar.data_mut()[(c * h + y) * w + x] = rgb[(y * w + x) * 3 + c];
                }
            }
        }
        images.push(planar);
        labels.push(Arc::new(lab));
        depths.push(dep);
    }
    Ok(ImageSet {
        records,
        images,
        labels,
        depths,
        width: dims.0,
        height: dims.1,
    })
}

/// 3D view of a split: clouds plus per-scene pairing maps.
pub struct CloudSet {
    pub records: Vec<SampleRecord>,
    pub clouds: Vec<PointCloud>,
}

pub fn load_clouds(split_dir: &Path) -> Result<CloudSet> {
    let records = read_manifest(split_dir)?;
    let mut clouds = Vec::with_capacity(records.len());
    for r in &records {
        clouds.push(synthscene::read_point_cloud(&split_dir.join(&r.cloud))?);
    }
    Ok(CloudSet { records, clouds })
}

pub fn load_pairings(split_dir: &Path) -> Result<Vec<PairingMap>> {
    let records = read_manifest(split_dir)?;
    records
        .iter()
        .map(|r| geometry::read_pairing_map(&split_dir.join(&r.pairing)))
        .collect()
}

/// Stack per-sample (3, H, W) images into one (N, 3, H, W) batch.
pub fn stack_images(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("empty image batch"))?;
    let shape = first.shape().to_vec();
    let mut out = Tensor::zeros(&[images.len(), shape[0], shape[1], shape[2]]);
    let stride = first.len();
    for (i, img) in images.iter().enumerate() {
        if img.shape() != shape.as_slice() {
            return Err(Error::shape(
                "stack_images",
                format!("{shape:?}"),
                format!("{:?}", img.shape()),
            ));
        }
        out.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(img.data());
    }
    Ok(out)
}

/// Concatenate per-sample label grids into one batch-major vector.
pub fn stack_labels(labels: &[&Arc<Vec<u8>>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(labels.iter().map(|l| l.len()).sum());
    for l in labels {
        out.extend_from_slice(l);
    }
    out
}

/// Majority-vote downsampling of a label grid by an integer factor. Ignore
/// pixels do not vote; an all-ignore block stays ignore; ties take the
/// lowest class id.
pub fn downsample_labels(labels: &[u8], width: usize, height: usize, factor: usize) -> Vec<u8> {
    debug_assert_eq!(labels.len(), width * height);
    let (ow, oh) = (width / factor, height / factor);
    let mut out = vec![IGNORE_LABEL; ow * oh];
    let mut counts = [0usize; 256];
    for oy in 0..oh {
        for ox in 0..ow {
            counts.fill(0);
            for dy in 0..factor {
                for dx in 0..factor {
                    let l = labels[(oy * factor + dy) * width + ox * factor + dx];
                    if l != IGNORE {
                        counts[usize::from(l)] += 1;
                    }
                }
            }
            let mut best = IGNORE_LABEL;
            let mut best_count = 0usize;
            for (cls, &n) in counts.iter().enumerate() {
                if n > best_count {
                    best_count = n;
                    best = cls as u8;
                }
            }
            out[oy * ow + ox] = best;
        }
    }
    out
}

/// Convert a point cloud to the (P, 6) network input rows [x y z r g b].
pub fn cloud_to_input(cloud: &PointCloud) -> Tensor<f32> {
    Tensor::from_fn(&[cloud.len(), 6], |flat| {
        let (row, col) = (flat / 6, flat % 6);
        if col < 3 {
            cloud.positions[row][col]
        } else {
            cloud.colors[row][col - 3]
        }
    })
}

/// Per-point labels as the loss expects them (u8 with 255 = ignore).
pub fn cloud_labels(cloud: &PointCloud) -> Arc<Vec<u8>> {
    Arc::new(
        cloud
            .labels
            .iter()
            .map(|l| u8::try_from(*l).unwrap_or(IGNORE_LABEL))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ProjectConfig {
        let mut cfg = ProjectConfig::default();
        cfg.data.train_scenes = 3;
        cfg.data.val_scenes = 2;
        cfg.data.aux3d_scenes = 2;
        cfg.data.points = 512;
        cfg
    }

    #[test]
    fn generation_writes_manifests_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let written = generate_dataset(&cfg, dir.path(), 42).unwrap();
        assert_eq!(written.len(), 5);
        let train = dir.path().join("domain_A/train");
        let records = read_manifest(&train).unwrap();
        assert_eq!(records.len(), 3);
        let images = load_images(&train).unwrap();
        assert_eq!(images.images.len(), 3);
        assert_eq!(images.images[0].shape(), &[3, 64, 64]);
        let clouds = load_clouds(&train).unwrap();
        assert_eq!(clouds.clouds[0].len(), 512);
        let pairings = load_pairings(&train).unwrap();
        assert_eq!(pairings[0].grid_width, 8);
        assert!(dir.path().join("domain_A/train/coverage.json").exists());
        assert!(dir.path().join("domain_B/val/manifest.jsonl").exists());
        assert!(dir.path().join("domain_A/train3d/manifest.jsonl").exists());
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let cfg = tiny_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, d1.path(), 7).unwrap();
        generate_dataset(&cfg, d2.path(), 7).unwrap();
        for rel in [
            "domain_A/train/manifest.jsonl",
            "domain_A/train/0000.rgb.ppm",
            "domain_A/train/0002.cloud.pc3d",
            "domain_B/val/0001.pairs.pair",
            "domain_A/train3d/0001.depth.dpth",
        ] {
            let a = std::fs::read(d1.path().join(rel)).unwrap();
            let b = std::fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs");
        }
        // A different seed changes the corpus.
        let d3 = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, d3.path(), 8).unwrap();
        let a = std::fs::read(d1.path().join("domain_A/train/0000.rgb.ppm")).unwrap();
        let b = std::fs::read(d3.path().join("domain_A/train/0000.rgb.ppm")).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn splits_use_disjoint_scene_seeds() {
        let s1 = scene_seed(1, DomainId::A, SplitKind::Train, 0);
        let s2 = scene_seed(1, DomainId::A, SplitKind::Val, 0);
        let s3 = scene_seed(1, DomainId::A, SplitKind::Train3d, 0);
        let s4 = scene_seed(1, DomainId::B, SplitKind::Train, 0);
        let all = [s1, s2, s3, s4];
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(all[i], all[j]);
            }
        }
    }

    #[test]
    fn majority_vote_downsampling_handles_ignore_and_ties() {
        // 4x4 grid, factor 2.
        #[rustfmt::skip]
        let labels = vec![
            1, 1, 2, 3,
            1, 0, 3, 2,
            IGNORE, IGNORE, 4, IGNORE,
            IGNORE, IGNORE, IGNORE, IGNORE,
        ];
        let out = downsample_labels(&labels, 4, 4, 2);
        assert_eq!(out[0], 1); // majority
        assert_eq!(out[1], 2); // tie between 2 and 3 -> lowest id
        assert_eq!(out[2], IGNORE_LABEL); // all ignore
        assert_eq!(out[3], 4); // single vote wins over ignores
    }
}
