//! Analytic ray casting of box/cylinder scenes.

use crate::error::Result;
use crate::geometry::{CameraIntrinsics, CameraPose};

use super::{Primitive, RasterSample, SceneObject, SceneSpec, IGNORE};

const LIGHT_DIR: [f64; 3] = [0.30, 0.22, -0.93]; // toward the scene, unnormalized
const AMBIENT: f64 = 0.30;
const DIFFUSE: f64 = 0.70;

struct Hit {
    t: f64,
    normal: [f64; 3],
}

/// Render one camera view with Lambertian shading under a single fixed
/// directional light. Pixels with no surface hit get [`IGNORE`] labels and
/// zero depth; depth is camera-space Z in meters.
pub fn render(
    scene: &SceneSpec,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
) -> Result<RasterSample> {
    intrinsics.validate()?;
    pose.validate()?;
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut rgb = vec![0.0f32; w * h * 3];
    let mut labels = vec![IGNORE; w * h];
    let mut depth = vec![0.0f32; w * h];
    let origin = pose.center();
    let light = normalize(LIGHT_DIR);

    for v in 0..h {
        for u in 0..w {
            let dir_cam = normalize([
                (u as f64 - intrinsics.cx) / intrinsics.fx,
                (v as f64 - intrinsics.cy) / intrinsics.fy,
                1.0,
            ]);
            let dir = pose.dir_to_world(dir_cam);
            let mut best: Option<(Hit, usize)> = None;
            for (oi, obj) in scene.objects.iter().enumerate() {
                if let Some(hit) = intersect(obj, origin, dir) {
                    if best.as_ref().map_or(true, |(b, _)| hit.t < b.t) {
                        best = Some((hit, oi));
                    }
                }
            }
            if let Some((hit, oi)) = best {
                let obj = &scene.objects[oi];
                let p = [
                    origin[0] + hit.t * dir[0],
                    origin[1] + hit.t * dir[1],
                    origin[2] + hit.t * dir[2],
                ];
                let z = pose.to_camera(p)[2];
                // Face the normal toward the viewer.
                let mut n = hit.normal;
                if dot(n, dir) > 0.0 {
                    n = [-n[0], -n[1], -n[2]];
                }
                let shade = AMBIENT + DIFFUSE * dot(n, [-light[0], -light[1], -light[2]]).max(0.0);
                let idx = (v * w + u) * 3;
                for c in 0..3 {
                    rgb[idx + c] = (obj.albedo[c] * shade).clamp(0.0, 1.0) as f32;
                }
                labels[v * w + u] = obj.category;
                depth[v * w + u] = z as f32;
            }
        }
    }
    Ok(RasterSample {
        width: w,
        height: h,
        rgb,
        labels,
        depth,
    })
}

fn intersect(obj: &SceneObject, origin: [f64; 3], dir: [f64; 3]) -> Option<Hit> {
    match obj.primitive {
        Primitive::Box => intersect_box(obj, origin, dir),
        Primitive::Cylinder => intersect_cylinder(obj, origin, dir),
    }
}

const T_MIN: f64 = 1e-6;

fn intersect_box(obj: &SceneObject, origin: [f64; 3], dir: [f64; 3]) -> Option<Hit> {
    let he = obj.half_extents();
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0usize;
    let mut near_sign = 1.0f64;
    for a in 0..3 {
        let o = origin[a] - obj.position[a];
        if dir[a].abs() < 1e-13 {
            if o.abs() > he[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let mut t0 = (-he[a] - o) * inv;
        let mut t1 = (he[a] - o) * inv;
        let mut sign = -1.0;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            sign = 1.0;
        }
        if t0 > t_near {
            t_near = t0;
            near_axis = a;
            near_sign = sign;
        }
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    let t = if t_near > T_MIN { t_near } else { t_far };
    if t <= T_MIN || t_near > t_far {
        return None;
    }
    if t_near <= T_MIN {
        // Origin inside the slab volume; skip (cameras never sit inside
        // scene furniture, walls are entered from their inner face).
        return None;
    }
    let mut normal = [0.0; 3];
    normal[near_axis] = near_sign;
    Some(Hit { t, normal })
}

fn intersect_cylinder(obj: &SceneObject, origin: [f64; 3], dir: [f64; 3]) -> Option<Hit> {
    let r = obj.size[0] / 2.0;
    let hh = obj.size[2] / 2.0;
    let cx = obj.position[0];
    let cy = obj.position[1];
    let cz = obj.position[2];
    let ox = origin[0] - cx;
    let oy = origin[1] - cy;
    let mut best: Option<Hit> = None;

    // Lateral surface.
    let a = dir[0] * dir[0] + dir[1] * dir[1];
    if a > 1e-13 {
        let b = 2.0 * (ox * dir[0] + oy * dir[1]);
        let c = ox * ox + oy * oy - r * r;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                if t <= T_MIN {
                    continue;
                }
                let z = origin[2] + t * dir[2];
                if (z - cz).abs() <= hh {
                    let n = normalize([ox + t * dir[0], oy + t * dir[1], 0.0]);
                    if best.as_ref().map_or(true, |h| t < h.t) {
                        best = Some(Hit { t, normal: n });
                    }
                    break; // nearer root first
                }
            }
        }
    }

    // Caps.
    if dir[2].abs() > 1e-13 {
        for (zcap, nz) in [(cz + hh, 1.0), (cz - hh, -1.0)] {
            let t = (zcap - origin[2]) / dir[2];
            if t <= T_MIN {
                continue;
            }
            let x = origin[0] + t * dir[0] - cx;
            let y = origin[1] + t * dir[1] - cy;
            if x * x + y * y <= r * r && best.as_ref().map_or(true, |h| t < h.t) {
                best = Some(Hit {
                    t,
                    normal: [0.0, 0.0, nz],
                });
            }
        }
    }
    best
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}
