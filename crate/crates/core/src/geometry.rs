//! Camera model, 3D→2D projection with z-buffer nearest-point selection,
//! stride decimation and pairing-map construction.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthscene::PointCloud;

/// Pinhole camera intrinsics in pixels.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got fx={}, fy={}",
                self.fx, self.fy
            )));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64)
            || !(0.0 <= self.cy && self.cy < self.height as f64)
        {
            return Err(Error::invalid(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics for a grid downscaled by an integer factor.
    pub fn scaled_down(&self, factor: usize) -> CameraIntrinsics {
        let f = factor as f64;
        CameraIntrinsics {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: self.width / factor,
            height: self.height / factor,
        }
    }
}

/// World→camera rigid transform. Camera frame: X right, Y down, Z forward.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CameraPose {
    /// Row-major 3×3 rotation, world to camera.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraPose {
    /// Pose looking from `position` with the given yaw (around world z) and
    /// pitch (positive looks up). World frame is z-up.
    pub fn from_yaw_pitch(position: [f64; 3], yaw: f64, pitch: f64) -> CameraPose {
        let f = [
            pitch.cos() * yaw.cos(),
            pitch.cos() * yaw.sin(),
            pitch.sin(),
        ];
        // right = forward × up, down = forward × right
        let r = normalize(cross(f, [0.0, 0.0, 1.0]));
        let d = cross(f, r);
        let rotation = [r, d, f];
        let translation = [-dot(r, position), -dot(d, position), -dot(f, position)];
        CameraPose {
            rotation,
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let tol = 1e-9;
        for i in 0..3 {
            for j in 0..3 {
                let acc: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                if (acc - target).abs() > tol {
                    return Err(Error::invalid(format!(
                        "rotation not orthonormal: col{i}·col{j} = {acc}"
                    )));
                }
            }
        }
        let det = dot(r[0], cross(r[1], r[2]));
        if (det - 1.0).abs() > tol {
            return Err(Error::invalid(format!("rotation determinant {det} != +1")));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        [
            dot(self.rotation[0], p) + self.translation[0],
            dot(self.rotation[1], p) + self.translation[1],
            dot(self.rotation[2], p) + self.translation[2],
        ]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        // C = -Rᵀ t
        let r = &self.rotation;
        let t = self.translation;
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    /// Camera-space direction to world-space direction.
    pub fn dir_to_world(&self, d: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }
}

/// One pixel↔point correspondence on the stride-decimated grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairingEntry {
    pub row: u16,
    pub col: u16,
    pub point_index: u32,
    pub depth: f32,
}

/// Sparse pixel↔point correspondences after z-buffered projection.
#[derive(Clone, Debug, Default)]
pub struct PairingMap {
    pub entries: Vec<PairingEntry>,
    pub grid_width: usize,
    pub grid_height: usize,
}

impl PairingMap {
    pub fn coverage(&self) -> f64 {
        if self.grid_width * self.grid_height == 0 {
            return 0.0;
        }
        self.entries.len() as f64 / (self.grid_width * self.grid_height) as f64
    }
}

/// Summary statistics for a pairing map. Depth fields are absent for an
/// empty map.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CoverageReport {
    pub coverage: f64,
    pub entry_count: usize,
    pub min_depth: Option<f64>,
    pub max_depth: Option<f64>,
    pub mean_depth: Option<f64>,
}

/// Round to nearest integer with ties toward negative infinity.
pub fn round_half_down(x: f64) -> i64 {
    (x - 0.5).ceil() as i64
}

/// Project a cloud through a camera onto the stride-decimated pixel grid,
/// keeping per pixel only the nearest point.
///
/// Points behind the camera (Z ≤ 0) and points projecting outside the image
/// are discarded; among the survivors only pixels whose full-resolution
/// coordinates are multiples of `stride` are retained, indexed on the
/// decimated grid. Depth ties keep the lowest point index. An empty cloud
/// yields an empty map with coverage 0.
pub fn project_points(
    cloud: &PointCloud,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
    stride: usize,
) -> Result<PairingMap> {
    intrinsics.validate()?;
    pose.validate()?;
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1".to_string()));
    }
    let grid_width = intrinsics.width.div_ceil(stride);
    let grid_height = intrinsics.height.div_ceil(stride);
    let mut best: Vec<Option<(f32, u32)>> = vec![None; grid_width * grid_height];
    for (idx, p) in cloud.positions.iter().enumerate() {
        let pc = pose.to_camera([f64::from(p[0]), f64::from(p[1]), f64::from(p[2])]);
        if pc[2] <= 0.0 {
            continue;
        }
        let u = round_half_down(intrinsics.fx * pc[0] / pc[2] + intrinsics.cx);
        let v = round_half_down(intrinsics.fy * pc[1] / pc[2] + intrinsics.cy);
        if u < 0 || v < 0 || u >= intrinsics.width as i64 || v >= intrinsics.height as i64 {
            continue;
        }
        let (u, v) = (u as usize, v as usize);
        if u % stride != 0 || v % stride != 0 {
            continue;
        }
        let (col, row) = (u / stride, v / stride);
        let depth = pc[2] as f32;
        let slot = &mut best[row * grid_width + col];
        let replace = match slot {
            None => true,
            Some((d, i)) => depth < *d || (depth == *d && (idx as u32) < *i),
        };
        if replace {
            *slot = Some((depth, idx as u32));
        }
    }
    let mut entries = Vec::new();
    for row in 0..grid_height {
        for col in 0..grid_width {
            if let Some((depth, point_index)) = best[row * grid_width + col] {
                entries.push(PairingEntry {
                    row: row as u16,
                    col: col as u16,
                    point_index,
                    depth,
                });
            }
        }
    }
    Ok(PairingMap {
        entries,
        grid_width,
        grid_height,
    })
}

/// Coverage fraction, entry count and depth statistics of a pairing map.
pub fn coverage_report(map: &PairingMap) -> CoverageReport {
    if map.entries.is_empty() {
        return CoverageReport {
            coverage: 0.0,
            entry_count: 0,
            min_depth: None,
            max_depth: None,
            mean_depth: None,
        };
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for e in &map.entries {
        let d = f64::from(e.depth);
        min = min.min(d);
        max = max.max(d);
        sum += d;
    }
    CoverageReport {
        coverage: map.coverage(),
        entry_count: map.entries.len(),
        min_depth: Some(min),
        max_depth: Some(max),
        mean_depth: Some(sum / map.entries.len() as f64),
    }
}

static PAIRING_READS: AtomicU64 = AtomicU64::new(0);

/// Number of pairing-map file reads since process start. The unpaired
/// training mode asserts this stays flat.
pub fn pairing_reads() -> u64 {
    PAIRING_READS.load(Ordering::Relaxed)
}

const MAGIC: &[u8; 4] = b"PAIR";

/// Write the `PAIR` binary format: magic, u32 grid width/height, u32 entry
/// count, then per entry u16 row, u16 col, u32 point index, f32 depth.
pub fn write_pairing_map(map: &PairingMap, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(map.grid_width as u32).to_le_bytes())?;
    w.write_all(&(map.grid_height as u32).to_le_bytes())?;
    w.write_all(&(map.entries.len() as u32).to_le_bytes())?;
    for e in &map.entries {
        w.write_all(&e.row.to_le_bytes())?;
        w.write_all(&e.col.to_le_bytes())?;
        w.write_all(&e.point_index.to_le_bytes())?;
        w.write_all(&e.depth.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairing_map(path: &Path) -> Result<PairingMap> {
    PAIRING_READS.fetch_add(1, Ordering::Relaxed);
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format {
            format: "PAIR",
            detail: format!("bad magic {magic:?}"),
        });
    }
    let grid_width = read_u32(&mut r)? as usize;
    let grid_height = read_u32(&mut r)? as usize;
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut buf = [0u8; 12];
        r.read_exact(&mut buf)?;
        entries.push(PairingEntry {
            row: u16::from_le_bytes([buf[0], buf[1]]),
            col: u16::from_le_bytes([buf[2], buf[3]]),
            point_index: u32::from_le_bytes([buf[4], buf[5], buf[6], buf[7]]),
            depth: f32::from_le_bytes([buf[8], buf[9], buf[10], buf[11]]),
        });
    }
    Ok(PairingMap {
        entries,
        grid_width,
        grid_height,
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthscene::PointCloud;
    use rand::Rng;

    fn identity_pose() -> CameraPose {
        CameraPose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    fn cloud_from(points: &[[f32; 3]]) -> PointCloud {
        PointCloud {
            positions: points.to_vec(),
            colors: vec![[0.5, 0.5, 0.5]; points.len()],
            labels: vec![0; points.len()],
        }
    }

    fn intr64() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
        }
    }

    #[test]
    fn pinhole_projection_example() {
        let cloud = cloud_from(&[[0.1, 0.2, 1.0]]);
        let map = project_points(&cloud, &intr64(), &identity_pose(), 1).unwrap();
        assert_eq!(map.entries.len(), 1);
        let e = map.entries[0];
        assert_eq!((e.row, e.col), (52, 42));
        assert_eq!(e.depth, 1.0);
    }

    #[test]
    fn points_behind_camera_are_discarded() {
        let cloud = cloud_from(&[[0.0, 0.0, -1.0], [0.0, 0.0, 0.0]]);
        let map = project_points(&cloud, &intr64(), &identity_pose(), 1).unwrap();
        assert!(map.entries.is_empty());
        assert_eq!(map.coverage(), 0.0);
    }

    #[test]
    fn z_buffer_keeps_nearest_point() {
        // Both points project to the principal pixel.
        let cloud = cloud_from(&[[0.0, 0.0, 2.0], [0.0, 0.0, 1.5]]);
        let map = project_points(&cloud, &intr64(), &identity_pose(), 1).unwrap();
        assert_eq!(map.entries.len(), 1);
        assert_eq!(map.entries[0].point_index, 1);
        assert_eq!(map.entries[0].depth, 1.5);
    }

    #[test]
    fn empty_cloud_gives_flagged_empty_map() {
        let cloud = cloud_from(&[]);
        let map = project_points(&cloud, &intr64(), &identity_pose(), 1).unwrap();
        let report = coverage_report(&map);
        assert_eq!(report.entry_count, 0);
        assert_eq!(report.coverage, 0.0);
        assert!(report.min_depth.is_none());
    }

    #[test]
    fn degenerate_camera_is_rejected() {
        let cloud = cloud_from(&[[0.0, 0.0, 1.0]]);
        let mut intr = intr64();
        intr.fx = 0.0;
        assert!(project_points(&cloud, &intr, &identity_pose(), 1).is_err());
    }

    #[test]
    fn rounding_ties_go_toward_negative_infinity() {
        assert_eq!(round_half_down(2.5), 2);
        assert_eq!(round_half_down(2.51), 3);
        assert_eq!(round_half_down(-2.5), -3);
        assert_eq!(round_half_down(2.49), 2);
    }

    #[test]
    fn stride_decimation_matches_counting_bound() {
        let mut rng = crate::rng::stream(5, "stride");
        let points: Vec<[f32; 3]> = (0..20000)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.5..3.0),
                ]
            })
            .collect();
        let cloud = cloud_from(&points);
        let map = project_points(&cloud, &intr64(), &identity_pose(), 8).unwrap();
        assert_eq!(map.grid_width, 8);
        // Re-expressed on the 64x64 grid the covered fraction is at most
        // ceil(64/8)^2 / 64^2.
        let full_fraction = map.entries.len() as f64 / (64.0 * 64.0);
        assert!(full_fraction <= 64.0 / 4096.0 + 1e-12);
    }

    #[test]
    fn coverage_is_monotone_when_strides_nest() {
        let mut rng = crate::rng::stream(23, "stride-mono");
        for _ in 0..10 {
            let points: Vec<[f32; 3]> = (0..rng.gen_range(10..3000))
                .map(|_| {
                    [
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(0.2..4.0),
                    ]
                })
                .collect();
            let cloud = cloud_from(&points);
            let s1 = [1usize, 2][rng.gen_range(0..2)];
            let s2 = s1 * [2usize, 4][rng.gen_range(0..2)];
            let c1 = project_points(&cloud, &intr64(), &identity_pose(), s1)
                .unwrap()
                .entries
                .len();
            let c2 = project_points(&cloud, &intr64(), &identity_pose(), s2)
                .unwrap()
                .entries
                .len();
            // Over the full-resolution grid both counts share the 64x64
            // denominator, so comparing counts compares coverage.
            assert!(c2 <= c1, "stride {s2} covered {c2} > stride {s1} covered {c1}");
        }
    }

    #[test]
    fn back_projection_lands_within_one_pixel_footprint() {
        let mut rng = crate::rng::stream(31, "roundtrip");
        let points: Vec<[f32; 3]> = (0..500)
            .map(|_| {
                [
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(0.5..4.0),
                ]
            })
            .collect();
        let cloud = cloud_from(&points);
        let intr = intr64();
        for stride in [1usize, 8] {
            let map = project_points(&cloud, &intr, &identity_pose(), stride).unwrap();
            for e in &map.entries {
                let z = f64::from(e.depth);
                let u = (e.col as usize * stride) as f64;
                let v = (e.row as usize * stride) as f64;
                let x = (u - intr.cx) / intr.fx * z;
                let y = (v - intr.cy) / intr.fy * z;
                let p = points[e.point_index as usize];
                let foot = z / intr.fx;
                assert!((x - f64::from(p[0])).abs() <= foot + 1e-9);
                assert!((y - f64::from(p[1])).abs() <= foot + 1e-9);
            }
        }
    }

    #[test]
    fn pose_from_yaw_pitch_is_orthonormal() {
        let mut rng = crate::rng::stream(2, "pose");
        for _ in 0..50 {
            let pose = CameraPose::from_yaw_pitch(
                [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), 1.5],
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(-0.3..0.3),
            );
            pose.validate().unwrap();
        }
    }

    #[test]
    fn pairing_map_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.pair");
        let map = PairingMap {
            entries: vec![
                PairingEntry {
                    row: 1,
                    col: 2,
                    point_index: 77,
                    depth: 1.25,
                },
                PairingEntry {
                    row: 3,
                    col: 0,
                    point_index: 9,
                    depth: 0.5,
                },
            ],
            grid_width: 8,
            grid_height: 8,
        };
        write_pairing_map(&map, &path).unwrap();
        let before = pairing_reads();
        let loaded = read_pairing_map(&path).unwrap();
        assert_eq!(pairing_reads(), before + 1);
        assert_eq!(loaded.entries, map.entries);
        assert_eq!(loaded.grid_width, 8);
    }
}
