//! Metrics and analyses: mean IoU over a confusion matrix, the SSIM
//! depth-reconstruction probe, and cross-domain evaluation.

use std::sync::Arc;

use crate::config::ProjectConfig;
use crate::dataset::{stack_images, ImageSet};
use crate::error::{Error, Result};
use crate::models::{ConvLayer, ModelDims, TapLayer, TwoDNet};
use crate::rng::stream;
use crate::tensorcore::{ParamStore, Tape, Tensor, IGNORE_LABEL};
use crate::training::poly_lr;

/// Rows are ground truth, columns are predictions; ignore-labeled pixels
/// never enter.
#[derive(Clone, Debug)]
pub struct ConfusionMatrix {
    pub counts: Vec<u64>,
    pub num_classes: usize,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            counts: vec![0; num_classes * num_classes],
            num_classes,
        }
    }

    pub fn accumulate(&mut self, gt: &[u8], pred: &[u8]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::shape(
                "confusion",
                format!("{} predictions", gt.len()),
                format!("{}", pred.len()),
            ));
        }
        for (&g, &p) in gt.iter().zip(pred.iter()) {
            if g == IGNORE_LABEL {
                continue;
            }
            let (g, p) = (usize::from(g), usize::from(p));
            if g >= self.num_classes || p >= self.num_classes {
                return Err(Error::invalid(format!(
                    "label {g}/{p} outside {} classes",
                    self.num_classes
                )));
            }
            self.counts[g * self.num_classes + p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Per-class IoU and their mean; classes with zero union are excluded.
#[derive(Clone, Debug)]
pub struct MiouResult {
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

pub fn miou(cm: &ConfusionMatrix) -> MiouResult {
    let n = cm.num_classes;
    let mut per_class = Vec::with_capacity(n);
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..n {
        let tp = cm.counts[c * n + c];
        let fp: u64 = (0..n).filter(|g| *g != c).map(|g| cm.counts[g * n + c]).sum();
        let fn_: u64 = (0..n).filter(|p| *p != c).map(|p| cm.counts[c * n + p]).sum();
        let union = tp + fp + fn_;
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            present += 1;
        }
    }
    MiouResult {
        per_class,
        mean: (present > 0).then(|| sum / present as f64),
    }
}

const SSIM_RADIUS: usize = 5; // 11x11 window
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 1e-4; // (0.01 L)^2, L = 1
const SSIM_C2: f64 = 9e-4; // (0.03 L)^2

fn gaussian_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian filter; invalid pixels contribute whatever they hold,
/// so callers must exclude windows touching them.
fn gauss_filter(src: &[f64], width: usize, height: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let mut tmp = vec![0.0; width * height];
    for y in 0..height {
        for x in SSIM_RADIUS..width - SSIM_RADIUS {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * src[y * width + x + i - SSIM_RADIUS];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; width * height];
    for y in SSIM_RADIUS..height - SSIM_RADIUS {
        for x in 0..width {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i - SSIM_RADIUS) * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Windowed SSIM with an 11×11 Gaussian window (σ = 1.5) averaged over
/// valid window centers. A window is valid when it lies fully inside the
/// image and covers no masked-out pixel. Returns `None` when no window is
/// valid.
pub fn ssim(x: &[f64], y: &[f64], width: usize, height: usize, valid: Option<&[bool]>) -> Option<f64> {
    assert_eq!(x.len(), width * height);
    assert_eq!(y.len(), width * height);
    if width < 2 * SSIM_RADIUS + 1 || height < 2 * SSIM_RADIUS + 1 {
        return None;
    }
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y.iter()).map(|(a, b)| a * b).collect();
    let mu_x = gauss_filter(x, width, height);
    let mu_y = gauss_filter(y, width, height);
    let e_xx = gauss_filter(&xx, width, height);
    let e_yy = gauss_filter(&yy, width, height);
    let e_xy = gauss_filter(&xy, width, height);

    // Count of invalid pixels per window via a summed-area table.
    let invalid_in_window: Option<Vec<u32>> = valid.map(|mask| {
        let mut sat = vec![0u32; (width + 1) * (height + 1)];
        for yi in 0..height {
            for xi in 0..width {
                let inv = u32::from(!mask[yi * width + xi]);
                sat[(yi + 1) * (width + 1) + xi + 1] = inv
                    + sat[yi * (width + 1) + xi + 1]
                    + sat[(yi + 1) * (width + 1) + xi]
                    - sat[yi * (width + 1) + xi];
            }
        }
        let mut counts = vec![0u32; width * height];
        for cy in SSIM_RADIUS..height - SSIM_RADIUS {
            for cx in SSIM_RADIUS..width - SSIM_RADIUS {
                let (y0, y1) = (cy - SSIM_RADIUS, cy + SSIM_RADIUS + 1);
                let (x0, x1) = (cx - SSIM_RADIUS, cx + SSIM_RADIUS + 1);
                counts[cy * width + cx] = (sat[y1 * (width + 1) + x1]
                    + sat[y0 * (width + 1) + x0])
                    - sat[y0 * (width + 1) + x1]
                    - sat[y1 * (width + 1) + x0];
            }
        }
        counts
    });

    let mut sum = 0.0;
    let mut n = 0usize;
    for cy in SSIM_RADIUS..height - SSIM_RADIUS {
        for cx in SSIM_RADIUS..width - SSIM_RADIUS {
            if let Some(counts) = &invalid_in_window {
                if counts[cy * width + cx] > 0 {
                    continue;
                }
            }
            let i = cy * width + cx;
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            let v = ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            sum += v;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// SSIM between a predicted and ground-truth depth map: both rescaled to
/// [0,1] by the ground truth's min/max over valid (positive-depth) pixels,
/// misses masked out. `None` when the ground truth is degenerate or no
/// window is valid.
pub fn depth_ssim(pred: &[f32], gt: &[f32], width: usize, height: usize) -> Option<f64> {
    let valid: Vec<bool> = gt.iter().map(|d| *d > 0.0).collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (d, v) in gt.iter().zip(valid.iter()) {
        if *v {
            lo = lo.min(f64::from(*d));
            hi = hi.max(f64::from(*d));
        }
    }
    if !(hi > lo) {
        return None;
    }
    let scale = 1.0 / (hi - lo);
    let xs: Vec<f64> = pred.iter().map(|d| (f64::from(*d) - lo) * scale).collect();
    let ys: Vec<f64> = gt.iter().map(|d| (f64::from(*d) - lo) * scale).collect();
    ssim(&xs, &ys, width, height, Some(&valid))
}

/// Full-split validation: forward every image in inference mode, argmax the
/// logits and accumulate a confusion matrix. Returns the mean IoU.
pub fn validate_miou(
    net: &TwoDNet,
    store: &ParamStore<f32>,
    images: &ImageSet,
    batch_size: usize,
) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(net.dims.num_classes);
    let n = images.images.len();
    let mut scratch = store.clone();
    for start in (0..n).step_by(batch_size.max(1)) {
        let end = (start + batch_size).min(n);
        let refs: Vec<&Tensor<f32>> = (start..end).map(|i| &images.images[i]).collect();
        let rgb = stack_images(&refs)?;
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &mut scratch, &rgb, crate::dnorm::NormMode::Infer)?;
        let logits = tape.value(out.logits);
        let (nb, c, h, w) = logits.dims4("validate")?;
        for bi in 0..nb {
            let mut pred = vec![0u8; h * w];
            for pos in 0..h * w {
                let mut best = 0usize;
                let mut best_v = f32::NEG_INFINITY;
                for ch in 0..c {
                    let v = logits.data()[(bi * c + ch) * h * w + pos];
                    if v > best_v {
                        best_v = v;
                        best = ch;
                    }
                }
                pred[pos] = best as u8;
            }
            cm.accumulate(&images.labels[start + bi], &pred)?;
        }
    }
    miou(&cm)
        .mean
        .ok_or_else(|| Error::invalid("validation split has no labeled pixels"))
}

/// Straight evaluation of a domain-A-trained checkpoint on a domain-B
/// split, no adaptation. Rejects a class-set mismatch.
pub fn cross_domain_eval(
    net: &TwoDNet,
    store: &ParamStore<f32>,
    domain_b: &ImageSet,
    batch_size: usize,
) -> Result<f64> {
    for labels in &domain_b.labels {
        for l in labels.iter() {
            if *l != IGNORE_LABEL && usize::from(*l) >= net.dims.num_classes {
                return Err(Error::invalid(format!(
                    "domain-B label {l} outside the {}-class set",
                    net.dims.num_classes
                )));
            }
        }
    }
    validate_miou(net, store, domain_b, batch_size)
}

/// A trained depth probe's validation SSIM plus the freeze evidence.
#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub tap: TapLayer,
    pub ssim: f64,
    pub backbone_checksum_before: u64,
    pub backbone_checksum_after: u64,
}

/// Train a small depth head (two 3×3 convolutions and an upsampler) on
/// frozen backbone features from `tap`, with per-pixel L1 loss on the train
/// split, and report mean SSIM over the validation split.
pub fn depth_probe(
    cfg: &ProjectConfig,
    net: &TwoDNet,
    store: &ParamStore<f32>,
    tap: TapLayer,
    train: &ImageSet,
    val: &ImageSet,
    seed: u64,
) -> Result<ProbeOutcome> {
    let checksum_before = store.checksum();
    let dims: ModelDims = net.dims;
    let cin = tap.channels(&dims);
    let factor = tap.scale();

    // Cache tapped features once; the backbone itself never re-runs.
    let cache = |set: &ImageSet| -> Result<Vec<Tensor<f32>>> {
        let mut scratch = store.clone();
        let mut feats = Vec::with_capacity(set.images.len());
        for chunk in set.images.chunks(cfg.probe.batch_size.max(1)) {
            let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
            let rgb = stack_images(&refs)?;
            let mut tape = Tape::new();
            let out = net.forward(&mut tape, &mut scratch, &rgb, crate::dnorm::NormMode::Infer)?;
            let t = tape.value(out.taps[tap.index()]);
            let (nb, c, h, w) = t.dims4("probe-cache")?;
            for bi in 0..nb {
                let mut one = Tensor::zeros(&[c, h, w]);
                one.data_mut()
                    .copy_from_slice(&t.data()[bi * c * h * w..(bi + 1) * c * h * w]);
                feats.push(one);
            }
        }
        Ok(feats)
    };
    let train_feats = cache(train)?;
    let val_feats = cache(val)?;

    let mut probe_store = ParamStore::<f32>::new();
    let rng = &mut stream(seed, &format!("probe-{}", tap.name()));
    let c_mid = 16;
    let conv1 = ConvLayer::init(&mut probe_store, "probe.conv1", cin, c_mid, 3, 1, rng)?;
    let conv2 = ConvLayer::init(&mut probe_store, "probe.conv2", c_mid, 1, 3, 1, rng)?;

    let forward = |tape: &mut Tape<f32>, probe_store: &ParamStore<f32>, feats: Tensor<f32>| -> Result<crate::tensorcore::Var> {
        let x = tape.constant(feats);
        let h = conv1.forward(tape, probe_store, x)?;
        let h = tape.relu(h);
        let d = conv2.forward(tape, probe_store, h)?;
        tape.upsample_nearest(d, factor)
    };

    let stack_feats = |feats: &[Tensor<f32>], idx: &[usize]| -> Tensor<f32> {
        let shape = feats[idx[0]].shape();
        let mut out = Tensor::zeros(&[idx.len(), shape[0], shape[1], shape[2]]);
        let stride = feats[idx[0]].len();
        for (i, &j) in idx.iter().enumerate() {
            out.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(feats[j].data());
        }
        out
    };

    let n = train_feats.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut order_rng = stream(seed, &format!("probe-order-{}", tap.name()));
    let mut cursor = n; // trigger shuffle on first use
    for iter in 0..cfg.probe.iters {
        let bs = cfg.probe.batch_size.min(n).max(1);
        let mut idx = Vec::with_capacity(bs);
        for _ in 0..bs {
            if cursor >= n {
                for i in (1..n).rev() {
                    use rand::Rng;
                    order.swap(i, order_rng.gen_range(0..=i));
                }
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let feats = stack_feats(&train_feats, &idx);
        let (h, w) = (train.height, train.width);
        let mut target = Tensor::zeros(&[idx.len(), 1, h, w]);
        let mut mask = Vec::with_capacity(idx.len() * h * w);
        for (i, &j) in idx.iter().enumerate() {
            for (k, d) in train.depths[j].iter().enumerate() {
                target.data_mut()[i * h * w + k] = *d;
                mask.push(*d > 0.0);
            }
        }
        let mut tape = Tape::new();
        let pred = forward(&mut tape, &probe_store, feats)?;
        let loss = tape.masked_l1(pred, Arc::new(target), Arc::new(mask), true)?;
        tape.finish(loss, &mut probe_store)?;
        let lr = poly_lr(iter, cfg.probe.lr0, cfg.probe.poly_power, cfg.probe.iters);
        probe_store.sgd_step(lr as f32);
        probe_store.zero_grads();
    }

    // Validation SSIM.
    let mut sum = 0.0;
    let mut count = 0usize;
    for (j, feats) in val_feats.iter().enumerate() {
        let batch = stack_feats(std::slice::from_ref(feats), &[0]);
        let mut tape = Tape::new();
        let pred = forward(&mut tape, &probe_store, batch)?;
        let pv = tape.value(pred);
        let pred32: Vec<f32> = pv.data().to_vec();
        if let Some(s) = depth_ssim(&pred32, &val.depths[j], val.width, val.height) {
            sum += s;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("no valid SSIM window in the validation split"));
    }
    Ok(ProbeOutcome {
        tap,
        ssim: sum / count as f64,
        backbone_checksum_before: checksum_before,
        backbone_checksum_after: store.checksum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miou_hand_counted_example() {
        // gt [0,0,1,1], pred [0,1,1,1] -> IoU0 = 1/2, IoU1 = 2/3.
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        let result = miou(&cm);
        assert!((result.per_class[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((result.per_class[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(result.per_class[2].is_none());
        assert!((result.mean.unwrap() - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn miou_perfect_prediction_and_ignore_handling() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, IGNORE_LABEL], &[0, 1, 0]).unwrap();
        let result = miou(&cm);
        assert_eq!(result.mean, Some(1.0));
        assert_eq!(cm.total(), 2);

        let empty = ConfusionMatrix::new(2);
        assert!(miou(&empty).mean.is_none());
    }

    #[test]
    fn miou_matches_set_intersection_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::stream(3, "miou-oracle");
        for _ in 0..20 {
            let n = 500;
            let classes = 5u8;
            let gt: Vec<u8> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.1) {
                        IGNORE_LABEL
                    } else {
                        rng.gen_range(0..classes)
                    }
                })
                .collect();
            let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let mut cm = ConfusionMatrix::new(classes as usize);
            cm.accumulate(&gt, &pred).unwrap();
            let got = miou(&cm);

            // Brute-force set intersection per class.
            let mut sum = 0.0;
            let mut present = 0;
            for c in 0..classes {
                let inter = gt
                    .iter()
                    .zip(pred.iter())
                    .filter(|(g, p)| **g == c && **p == c)
                    .count();
                let union = gt
                    .iter()
                    .zip(pred.iter())
                    .filter(|(g, p)| **g == c || (**p == c && **g != IGNORE_LABEL))
                    .count();
                if union > 0 {
                    sum += inter as f64 / union as f64;
                    present += 1;
                }
            }
            let expect = sum / f64::from(present);
            assert!((got.mean.unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_identity_symmetry_and_constant_case() {
        use rand::Rng;
        let mut rng = crate::rng::stream(9, "ssim");
        let a: Vec<f64> = (0..16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert!((ssim(&a, &a, 16, 16, None).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(&a, &b, 16, 16, None).unwrap();
        let ba = ssim(&b, &a, 16, 16, None).unwrap();
        assert_eq!(ab, ba);

        // Constant maps 0.2 vs 0.4.
        let x = vec![0.2; 16 * 16];
        let y = vec![0.4; 16 * 16];
        let got = ssim(&x, &y, 16, 16, None).unwrap();
        let expect = (2.0 * 0.08 + 1e-4) / (0.04 + 0.16 + 1e-4);
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn ssim_matches_sliding_window_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::stream(10, "ssim-oracle");
        let (w, h) = (16usize, 16usize);
        let x: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect();
        let got = ssim(&x, &y, w, h, None).unwrap();

        // Direct per-window weighted statistics.
        let k = gaussian_kernel();
        let mut sum = 0.0;
        let mut n = 0;
        for cy in SSIM_RADIUS..h - SSIM_RADIUS {
            for cx in SSIM_RADIUS..w - SSIM_RADIUS {
                let mut mx = 0.0;
                let mut my = 0.0;
                let mut exx = 0.0;
                let mut eyy = 0.0;
                let mut exy = 0.0;
                for dy in 0..=2 * SSIM_RADIUS {
                    for dx in 0..=2 * SSIM_RADIUS {
                        let wgt = k[dy] * k[dx];
                        let xi = x[(cy + dy - SSIM_RADIUS) * w + cx + dx - SSIM_RADIUS];
                        let yi = y[(cy + dy - SSIM_RADIUS) * w + cx + dx - SSIM_RADIUS];
                        mx += wgt * xi;
                        my += wgt * yi;
                        exx += wgt * xi * xi;
                        eyy += wgt * yi * yi;
                        exy += wgt * xi * yi;
                    }
                }
                let vx = exx - mx * mx;
                let vy = eyy - my * my;
                let cov = exy - mx * my;
                sum += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                n += 1;
            }
        }
        let expect = sum / f64::from(n);
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn ssim_rejects_too_small_maps_and_masks_windows() {
        let x = vec![0.5; 8 * 8];
        assert!(ssim(&x, &x, 8, 8, None).is_none());

        // Masking everything removes all windows.
        let x = vec![0.5; 16 * 16];
        let mask = vec![false; 16 * 16];
        assert!(ssim(&x, &x, 16, 16, Some(&mask)).is_none());
    }

    #[test]
    fn depth_ssim_rescales_by_ground_truth() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, "depth-ssim");
        let gt: Vec<f32> = (0..16 * 16).map(|_| rng.gen_range(1.0..5.0)).collect();
        assert!((depth_ssim(&gt, &gt, 16, 16).unwrap() - 1.0).abs() < 1e-12);
        // Constant ground truth is degenerate.
        let flat = vec![2.0f32; 16 * 16];
        assert!(depth_ssim(&flat, &flat, 16, 16).is_none());
    }
}
