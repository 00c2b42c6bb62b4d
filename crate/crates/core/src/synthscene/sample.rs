//! Surface-area-proportional point sampling over every object surface,
//! including occluded ones.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream;

use super::{PointCloud, Primitive, SceneObject, SceneSpec};

/// Total surface area of one object.
pub fn surface_area(obj: &SceneObject) -> f64 {
    match obj.primitive {
        Primitive::Box => {
            let he = obj.half_extents();
            let (sx, sy, sz) = (2.0 * he[0], 2.0 * he[1], 2.0 * he[2]);
            2.0 * (sx * sy + sy * sz + sx * sz)
        }
        Primitive::Cylinder => {
            let r = obj.size[0] / 2.0;
            let h = obj.size[2];
            std::f64::consts::TAU * r * h + 2.0 * std::f64::consts::PI * r * r
        }
    }
}

/// Sample `count` points uniformly by surface area over all objects.
/// Deterministic in `seed`; every point carries its object's category and
/// albedo.
pub fn sample_points(scene: &SceneSpec, count: usize, seed: u64) -> Result<PointCloud> {
    if count == 0 {
        return Err(Error::invalid("point count must be positive"));
    }
    // Cumulative area over (object, face) pairs.
    struct Face {
        object: usize,
        face: usize,
        cum: f64,
    }
    let mut faces: Vec<Face> = Vec::new();
    let mut total = 0.0;
    for (oi, obj) in scene.objects.iter().enumerate() {
        let areas = face_areas(obj);
        for (fi, a) in areas.iter().enumerate() {
            if *a <= 0.0 {
                continue;
            }
            total += a;
            faces.push(Face {
                object: oi,
                face: fi,
                cum: total,
            });
        }
    }
    if faces.is_empty() {
        return Err(Error::invalid("scene has no surface area"));
    }
    let mut rng = stream(seed, "sample-points");
    let mut cloud = PointCloud {
        positions: Vec::with_capacity(count),
        colors: Vec::with_capacity(count),
        labels: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let pick = rng.gen_range(0.0..total);
        let idx = faces.partition_point(|f| f.cum <= pick);
        let face = &faces[idx.min(faces.len() - 1)];
        let obj = &scene.objects[face.object];
        let p = sample_on_face(obj, face.face, &mut rng);
        cloud.positions.push([p[0] as f32, p[1] as f32, p[2] as f32]);
        cloud
            .colors
            .push([obj.albedo[0] as f32, obj.albedo[1] as f32, obj.albedo[2] as f32]);
        cloud.labels.push(u16::from(obj.category));
    }
    Ok(cloud)
}

/// Per-face areas: boxes list ±x, ±y, ±z; cylinders list side, top, bottom.
fn face_areas(obj: &SceneObject) -> Vec<f64> {
    match obj.primitive {
        Primitive::Box => {
            let he = obj.half_extents();
            let (sx, sy, sz) = (2.0 * he[0], 2.0 * he[1], 2.0 * he[2]);
            vec![sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy]
        }
        Primitive::Cylinder => {
            let r = obj.size[0] / 2.0;
            let h = obj.size[2];
            let cap = std::f64::consts::PI * r * r;
            vec![std::f64::consts::TAU * r * h, cap, cap]
        }
    }
}

fn sample_on_face(obj: &SceneObject, face: usize, rng: &mut rand_chacha::ChaCha8Rng) -> [f64; 3] {
    let c = obj.position;
    match obj.primitive {
        Primitive::Box => {
            let he = obj.half_extents();
            let (axis, sign) = (face / 2, if face % 2 == 0 { -1.0 } else { 1.0 });
            let mut p = [0.0; 3];
            for a in 0..3 {
                p[a] = if a == axis {
                    c[a] + sign * he[a]
                } else {
                    c[a] + rng.gen_range(-he[a]..he[a])
                };
            }
            p
        }
        Primitive::Cylinder => {
            let r = obj.size[0] / 2.0;
            let hh = obj.size[2] / 2.0;
            match face {
                0 => {
                    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                    let z = rng.gen_range(-hh..hh);
                    [c[0] + r * theta.cos(), c[1] + r * theta.sin(), c[2] + z]
                }
                cap => {
                    let zs = if cap == 1 { hh } else { -hh };
                    // Uniform over the disk.
                    let rr = r * rng.gen_range(0.0f64..1.0).sqrt();
                    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                    [c[0] + rr * theta.cos(), c[1] + rr * theta.sin(), c[2] + zs]
                }
            }
        }
    }
}

/// Unsigned distance from a point to an object's surface.
pub fn point_surface_distance(obj: &SceneObject, p: [f64; 3]) -> f64 {
    let c = obj.position;
    let q = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
    match obj.primitive {
        Primitive::Box => {
            let he = obj.half_extents();
            let d = [q[0].abs() - he[0], q[1].abs() - he[1], q[2].abs() - he[2]];
            let outside = (d[0].max(0.0).powi(2) + d[1].max(0.0).powi(2) + d[2].max(0.0).powi(2))
                .sqrt();
            let inside = d[0].max(d[1]).max(d[2]).min(0.0);
            (outside + inside).abs()
        }
        Primitive::Cylinder => {
            let r = obj.size[0] / 2.0;
            let hh = obj.size[2] / 2.0;
            let radial = (q[0] * q[0] + q[1] * q[1]).sqrt() - r;
            let axial = q[2].abs() - hh;
            let outside = (radial.max(0.0).powi(2) + axial.max(0.0).powi(2)).sqrt();
            let inside = radial.max(axial).min(0.0);
            (outside + inside).abs()
        }
    }
}
