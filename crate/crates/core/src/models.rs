//! The toy networks: 2D segmentation backbone with the simulated-3D branch,
//! frozen 3D point network, and per-category discriminators.

use rand_chacha::ChaCha8Rng;

use crate::dnorm::{BnParams, ChannelStats, Dn1Block, Dn2Block, DnParams, NormLayer, NormMode};
use crate::error::{Error, Result};
use crate::geometry::PairingMap;
use crate::rng::{gauss, stream};
use crate::tensorcore::{ConvSpec, Padding, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Width and depth defaults for the desk-scale networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub c2d: usize,
    pub c3d: usize,
    pub num_classes: usize,
    pub knn: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            c2d: 32,
            c3d: 16,
            num_classes: 6,
            knn: 8,
        }
    }
}

/// Convolution layer handle: weights (Cout, Cin, k, k) + bias, same padding.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl ConvLayer {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ConvLayer> {
        let spec = ConvSpec::new(kernel, stride, Padding::Same)?;
        let std = (2.0 / (cin * kernel * kernel) as f64).sqrt();
        let w = Tensor::from_fn(&[cout, cin, kernel, kernel], |_| {
            T::from_f64(gauss(rng) * std)
        });
        Ok(ConvLayer {
            w: store.add(format!("{name}.w"), w, true)?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout]), true)?,
            spec,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, b, self.spec)
    }
}

/// Fully-connected layer handle: weights (in, out) + bias.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearLayer {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<LinearLayer> {
        let std = (gain / cin as f64).sqrt();
        let w = Tensor::from_fn(&[cin, cout], |_| T::from_f64(gauss(rng) * std));
        Ok(LinearLayer {
            w: store.add(format!("{name}.w"), w, true)?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout]), true)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        frozen: bool,
    ) -> Result<Var> {
        let (w, b) = if frozen {
            (tape.param_frozen(store, self.w), tape.param_frozen(store, self.b))
        } else {
            (tape.param(store, self.w), tape.param(store, self.b))
        };
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
struct ConvBnRelu {
    conv: ConvLayer,
    bn: BnParams,
}

impl ConvBnRelu {
    fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ConvBnRelu> {
        Ok(ConvBnRelu {
            conv: ConvLayer::init(store, &format!("{name}.conv"), cin, cout, 3, stride, rng)?,
            bn: BnParams::init(store, &format!("{name}.bn"), cout)?,
        })
    }

    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: NormMode,
    ) -> Result<Var> {
        let c = self.conv.forward(tape, store, x)?;
        let n = crate::dnorm::bn_forward(tape, store, c, &self.bn, mode)?;
        Ok(tape.relu(n))
    }
}

/// Which normalization the two distillation blocks carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchNorm {
    /// Dimension normalization with precomputed target statistics.
    Dn,
    /// Dimension normalization with identity targets (the no-3D baseline).
    DnIdentity,
    /// Plain batch normalization (the ablation).
    Bn,
}

/// 2D segmentation network: stem + three strided stages producing the
/// backbone feature at 1/8 resolution, the two-stage distillation branch,
/// and a classifier over the concatenated features with nearest-neighbor
/// logit upsampling back to full resolution.
#[derive(Clone, Debug)]
pub struct TwoDNet {
    pub dims: ModelDims,
    stem: ConvBnRelu,
    stage1: ConvBnRelu,
    stage2: ConvBnRelu,
    stage3: ConvBnRelu,
    pub dn1: Dn1Block,
    pub dn2: Dn2Block,
    classifier: ConvLayer,
    pub branch_norm: BranchNorm,
}

/// Intermediate features of one 2D forward pass.
pub struct TwoDForward {
    pub logits: Var,
    pub f2d: Var,
    pub f3d_sim: Var,
    pub branch_out: Var,
    /// Backbone taps, shallow to deep: stem, stage1, stage2, stage3.
    pub taps: [Var; 4],
    /// Pre-classifier concatenation of `f2d` and the calibrated branch.
    pub concat: Var,
}

/// Identifier of one probe tap point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TapLayer {
    Stem,
    Stage1,
    Stage2,
    Stage3,
}

impl TapLayer {
    pub const ALL: [TapLayer; 4] = [TapLayer::Stem, TapLayer::Stage1, TapLayer::Stage2, TapLayer::Stage3];

    pub fn index(&self) -> usize {
        match self {
            TapLayer::Stem => 0,
            TapLayer::Stage1 => 1,
            TapLayer::Stage2 => 2,
            TapLayer::Stage3 => 3,
        }
    }

    /// Downsampling factor of this tap relative to the input image.
    pub fn scale(&self) -> usize {
        [1, 2, 4, 8][self.index()]
    }

    /// Channel width of this tap under the given dims.
    pub fn channels(&self, dims: &ModelDims) -> usize {
        [16, 24, dims.c2d, dims.c2d][self.index()]
    }

    pub fn name(&self) -> &'static str {
        ["stem", "stage1", "stage2", "stage3"][self.index()]
    }
}

impl TwoDNet {
    /// Build the network. `stats3d`/`stats2d` are the precomputed target
    /// statistics for the two distillation stages; they are only consulted
    /// when `branch_norm` is [`BranchNorm::Dn`].
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        dims: ModelDims,
        branch_norm: BranchNorm,
        stats3d: Option<&ChannelStats>,
        stats2d: Option<&ChannelStats>,
        seed: u64,
    ) -> Result<TwoDNet> {
        let rng = &mut stream(seed, "init-2d");
        let stem = ConvBnRelu::init(store, "stem", 3, 16, 1, rng)?;
        let stage1 = ConvBnRelu::init(store, "stage1", 16, 24, 2, rng)?;
        let stage2 = ConvBnRelu::init(store, "stage2", 24, dims.c2d, 2, rng)?;
        let stage3 = ConvBnRelu::init(store, "stage3", dims.c2d, dims.c2d, 2, rng)?;
        let norm1 = match branch_norm {
            BranchNorm::Dn => {
                let stats = stats3d.ok_or_else(|| {
                    Error::invalid("dimension normalization requires 3D target statistics")
                })?;
                NormLayer::Dn(DnParams::init(store, "dn1.norm", dims.c3d, Some(stats))?)
            }
            BranchNorm::DnIdentity => {
                NormLayer::Dn(DnParams::init(store, "dn1.norm", dims.c3d, None)?)
            }
            BranchNorm::Bn => NormLayer::Bn(BnParams::init(store, "dn1.norm", dims.c3d)?),
        };
        let dn1 = Dn1Block::init(store, "dn1", dims.c2d, dims.c3d, norm1, rng)?;
        let norm2 = match branch_norm {
            BranchNorm::Dn => {
                let stats = stats2d.ok_or_else(|| {
                    Error::invalid("dimension normalization requires 2D target statistics")
                })?;
                NormLayer::Dn(DnParams::init(store, "dn2.norm", dims.c3d, Some(stats))?)
            }
            BranchNorm::DnIdentity => {
                NormLayer::Dn(DnParams::init(store, "dn2.norm", dims.c3d, None)?)
            }
            BranchNorm::Bn => NormLayer::Bn(BnParams::init(store, "dn2.norm", dims.c3d)?),
        };
        let dn2 = Dn2Block::init(store, "dn2", dims.c3d, norm2, rng)?;
        let classifier = ConvLayer::init(
            store,
            "classifier",
            dims.c2d + dims.c3d,
            dims.num_classes,
            1,
            1,
            rng,
        )?;
        Ok(TwoDNet {
            dims,
            stem,
            stage1,
            stage2,
            stage3,
            dn1,
            dn2,
            classifier,
            branch_norm,
        })
    }

    /// Forward pass over an RGB batch (N, 3, H, W) in [0,1]. Training mode
    /// updates running statistics; inference mode requires them. The
    /// returned logits sit at full input resolution. Aborts if any
    /// activation goes non-finite.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        rgb: &Tensor<T>,
        mode: NormMode,
    ) -> Result<TwoDForward> {
        let (_, c, _, _) = rgb.dims4("twod_forward")?;
        if c != 3 {
            return Err(Error::shape("twod_forward", "3 input channels", format!("{c}")));
        }
        let x = tape.constant(rgb.clone());
        let t0 = self.stem.forward(tape, store, x, mode)?;
        let t1 = self.stage1.forward(tape, store, t0, mode)?;
        let t2 = self.stage2.forward(tape, store, t1, mode)?;
        let t3 = self.stage3.forward(tape, store, t2, mode)?;
        let f2d = t3;
        let f3d_sim = self.dn1.forward(tape, store, f2d, mode)?;
        let branch_out = self.dn2.forward(tape, store, f3d_sim, mode)?;
        let concat = tape.concat_channels(f2d, branch_out)?;
        let logits_low = self.classifier.forward(tape, store, concat)?;
        let logits = tape.upsample_nearest(logits_low, 8)?;
        for (name, var) in [("stem", t0), ("stage3", t3), ("branch", branch_out), ("logits", logits)] {
            if !tape.value(var).all_finite() {
                return Err(Error::NonFinite {
                    what: "activation",
                    context: format!("twod_forward at {name}"),
                });
            }
        }
        Ok(TwoDForward {
            logits,
            f2d,
            f3d_sim,
            branch_out,
            taps: [t0, t1, t2, t3],
            concat,
        })
    }

    /// Inference entry point: images in, logits out. Takes no point cloud,
    /// pairing map or any other 3D-typed argument.
    pub fn infer_logits<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        rgb: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut scratch = store.clone();
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &mut scratch, rgb, NormMode::Infer)?;
        Ok(tape.value(out.logits).clone())
    }
}

/// Per-point network: MLP over position+color with one k-nearest-neighbor
/// max-pool aggregation, producing the penultimate feature the 2D branch
/// learns to simulate, plus a point classifier head.
#[derive(Clone, Debug)]
pub struct ThreeDNet {
    pub dims: ModelDims,
    l1: LinearLayer,
    l2: LinearLayer,
    l3: LinearLayer,
    head: LinearLayer,
}

pub struct ThreeDForward {
    pub point_logits: Var,
    pub f3d: Var,
}

impl ThreeDNet {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, dims: ModelDims, seed: u64) -> Result<ThreeDNet> {
        let rng = &mut stream(seed, "init-3d");
        Ok(ThreeDNet {
            dims,
            l1: LinearLayer::init(store, "p1", 6, 32, 2.0, rng)?,
            l2: LinearLayer::init(store, "p2", 32, 32, 2.0, rng)?,
            l3: LinearLayer::init(store, "p3", 32, dims.c3d, 2.0, rng)?,
            head: LinearLayer::init(store, "head", dims.c3d, dims.num_classes, 1.0, rng)?,
        })
    }

    /// Point inputs are rows of [x, y, z, r, g, b]; `neighbors` lists each
    /// point's k nearest indices (self included).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &Tensor<T>,
        neighbors: &[Vec<u32>],
    ) -> Result<ThreeDForward> {
        let (p, c) = inputs.dims2("threed_forward")?;
        if c != 6 {
            return Err(Error::shape("threed_forward", "6 input columns", format!("{c}")));
        }
        if p == 0 {
            return Err(Error::invalid("empty point cloud"));
        }
        let x = tape.constant(inputs.clone());
        let h1 = self.l1.forward(tape, store, x, false)?;
        let h1 = tape.relu(h1);
        let h2 = self.l2.forward(tape, store, h1, false)?;
        let h2 = tape.relu(h2);
        let pooled = tape.max_neighbor(h2, neighbors)?;
        let f3d = self.l3.forward(tape, store, pooled, false)?;
        let act = tape.relu(f3d);
        let point_logits = self.head.forward(tape, store, act, false)?;
        Ok(ThreeDForward { point_logits, f3d })
    }
}

/// Widths of the six discriminator layers.
pub const DISCRIMINATOR_WIDTHS: [usize; 6] = [64, 32, 16, 8, 4, 1];

/// Per-category discriminator: six fully-connected layers with LeakyReLU
/// after the first five and a sigmoid on the output confidence.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub category: usize,
    pub in_channels: usize,
    layers: Vec<LinearLayer>,
}

impl Discriminator {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        in_channels: usize,
        category: usize,
        seed: u64,
    ) -> Result<Discriminator> {
        let rng = &mut stream(seed, &format!("init-d{category}"));
        let mut layers = Vec::with_capacity(6);
        let mut cin = in_channels;
        for (i, cout) in DISCRIMINATOR_WIDTHS.iter().enumerate() {
            let gain = if i + 1 == DISCRIMINATOR_WIDTHS.len() { 1.0 } else { 2.0 };
            layers.push(LinearLayer::init(
                store,
                &format!("d{category}.fc{i}"),
                cin,
                *cout,
                gain,
                rng,
            )?);
            cin = *cout;
        }
        Ok(Discriminator {
            category,
            in_channels,
            layers,
        })
    }

    /// Pre-sigmoid scores, one per input row. `frozen` cuts gradient flow
    /// into the discriminator parameters.
    pub fn logits<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        frozen: bool,
    ) -> Result<Var> {
        let (_, c) = tape.value(x).dims2("discriminator")?;
        if c != self.in_channels {
            return Err(Error::shape(
                "discriminator",
                format!("{} input channels", self.in_channels),
                format!("{c}"),
            ));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h, frozen)?;
            if i + 1 < self.layers.len() {
                h = tape.leaky_relu(h, 0.01);
            }
        }
        Ok(h)
    }

    /// Confidence in (0,1) that each input row comes from the 3D network.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let z = self.logits(tape, store, x, false)?;
        Ok(tape.sigmoid(z))
    }
}

/// Closed-form parameter count of one discriminator.
pub fn discriminator_param_count(in_channels: usize) -> usize {
    let mut cin = in_channels;
    let mut total = 0;
    for cout in DISCRIMINATOR_WIDTHS {
        total += cin * cout + cout;
        cin = cout;
    }
    total
}

/// Scatter per-point features onto the pairing grid: output (C, gh, gw)
/// holds each paired pixel's point feature, the mask marks covered pixels,
/// uncovered pixels stay zero.
pub fn scatter_3d_to_grid<T: Scalar>(
    f3d: &Tensor<T>,
    map: &PairingMap,
) -> Result<(Tensor<T>, Vec<bool>)> {
    let (p, c) = f3d.dims2("scatter_3d_to_grid")?;
    let mut grid = Tensor::zeros(&[c, map.grid_height, map.grid_width]);
    let mut mask = vec![false; map.grid_height * map.grid_width];
    for e in &map.entries {
        let (r, col) = (usize::from(e.row), usize::from(e.col));
        let pi = e.point_index as usize;
        if pi >= p || r >= map.grid_height || col >= map.grid_width {
            return Err(Error::invalid(format!(
                "pairing entry ({r}, {col}, {pi}) out of range for {p} points and {}x{} grid",
                map.grid_height, map.grid_width
            )));
        }
        for ch in 0..c {
            grid.data_mut()[(ch * map.grid_height + r) * map.grid_width + col] =
                f3d.data()[pi * c + ch];
        }
        mask[r * map.grid_width + col] = true;
    }
    Ok((grid, mask))
}

/// k nearest neighbors (self included) for every point, accelerated by a
/// uniform cell grid. Ties break toward the lower index, so the result is a
/// pure function of the point sequence.
pub fn knn_indices(positions: &[[f32; 3]], k: usize) -> Vec<Vec<u32>> {
    let n = positions.len();
    if n == 0 {
        return Vec::new();
    }
    let k = k.min(n);
    let mut lo = [f32::INFINITY; 3];
    let mut hi = [f32::NEG_INFINITY; 3];
    for p in positions {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let diag = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2)).sqrt();
    let cell = (f64::from(diag) / (n as f64).cbrt()).max(1e-6) as f32 * 1.5;
    let dims: [usize; 3] = std::array::from_fn(|a| {
        (((hi[a] - lo[a]) / cell).floor() as usize + 1).max(1)
    });
    let cell_of = |p: &[f32; 3]| -> [usize; 3] {
        std::array::from_fn(|a| (((p[a] - lo[a]) / cell) as usize).min(dims[a] - 1))
    };
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
    for (i, p) in positions.iter().enumerate() {
        let c = cell_of(p);
        buckets[(c[0] * dims[1] + c[1]) * dims[2] + c[2]].push(i as u32);
    }
    let max_shell = dims[0].max(dims[1]).max(dims[2]);
    let mut result = Vec::with_capacity(n);
    let mut cand: Vec<(f32, u32)> = Vec::new();
    for (i, p) in positions.iter().enumerate() {
        cand.clear();
        let home = cell_of(p);
        let mut shell = 0usize;
        loop {
            // Cells at Chebyshev distance exactly `shell`.
            let lo_c: [isize; 3] = std::array::from_fn(|a| home[a] as isize - shell as isize);
            let hi_c: [isize; 3] = std::array::from_fn(|a| home[a] as isize + shell as isize);
            for cx in lo_c[0]..=hi_c[0] {
                if cx < 0 || cx >= dims[0] as isize {
                    continue;
                }
                for cy in lo_c[1]..=hi_c[1] {
                    if cy < 0 || cy >= dims[1] as isize {
                        continue;
                    }
                    for cz in lo_c[2]..=hi_c[2] {
                        if cz < 0 || cz >= dims[2] as isize {
                            continue;
                        }
                        let on_shell = (cx - home[0] as isize).unsigned_abs().max(
                            (cy - home[1] as isize)
                                .unsigned_abs()
                                .max((cz - home[2] as isize).unsigned_abs()),
                        ) == shell;
                        if !on_shell {
                            continue;
                        }
                        let bucket =
                            &buckets[((cx as usize) * dims[1] + cy as usize) * dims[2] + cz as usize];
                        for &j in bucket {
                            let q = positions[j as usize];
                            let d = (q[0] - p[0]).powi(2)
                                + (q[1] - p[1]).powi(2)
                                + (q[2] - p[2]).powi(2);
                            cand.push((d, j));
                        }
                    }
                }
            }
            if cand.len() >= k {
                cand.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let kth = cand[k - 1].0.sqrt();
                if kth <= shell as f32 * cell || shell >= max_shell {
                    break;
                }
            } else if shell >= max_shell {
                cand.sort_by(|a, b| a.partial_cmp(b).unwrap());
                break;
            }
            shell += 1;
        }
        result.push(cand.iter().take(k).map(|(_, j)| *j).collect());
        let _ = i;
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PairingEntry;
    use rand::Rng;

    #[test]
    fn discriminator_param_count_at_96_channels() {
        assert_eq!(discriminator_param_count(96), 8_993);
    }

    #[test]
    fn discriminator_store_matches_closed_form() {
        let mut store = ParamStore::<f32>::new();
        Discriminator::init(&mut store, 96, 0, 1).unwrap();
        assert_eq!(store.trainable_count(), 8_993);
    }

    #[test]
    fn zeroed_final_layer_outputs_exactly_half() {
        let mut store = ParamStore::<f64>::new();
        let d = Discriminator::init(&mut store, 16, 2, 3).unwrap();
        let final_w = store.lookup("d2.fc5.w").unwrap();
        store.value_mut(final_w).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[5, 16], |i| i as f64 * 0.1 - 0.8));
        let y = d.forward(&mut tape, &store, x).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn discriminator_outputs_stay_strictly_inside_unit_interval() {
        let mut store = ParamStore::<f32>::new();
        let d = Discriminator::init(&mut store, 8, 0, 9).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[64, 8], |i| (i as f32 - 256.0) * 50.0));
        let y = d.forward(&mut tape, &store, x).unwrap();
        assert!(tape.value(y).data().iter().all(|v| 0.0 < *v && *v < 1.0));
    }

    #[test]
    fn scatter_matches_naive_loop_and_handles_empty() {
        let f3d = Tensor::<f32>::from_fn(&[10, 4], |i| i as f32);
        let map = PairingMap {
            entries: vec![
                PairingEntry { row: 0, col: 1, point_index: 3, depth: 1.0 },
                PairingEntry { row: 2, col: 0, point_index: 7, depth: 2.0 },
            ],
            grid_width: 3,
            grid_height: 3,
        };
        let (grid, mask) = scatter_3d_to_grid(&f3d, &map).unwrap();
        let mut expect = Tensor::<f32>::zeros(&[4, 3, 3]);
        let mut emask = vec![false; 9];
        for e in &map.entries {
            for ch in 0..4 {
                expect.data_mut()[(ch * 3 + usize::from(e.row)) * 3 + usize::from(e.col)] =
                    f3d.data()[e.point_index as usize * 4 + ch];
            }
            emask[usize::from(e.row) * 3 + usize::from(e.col)] = true;
        }
        assert_eq!(grid.data(), expect.data());
        assert_eq!(mask, emask);

        let empty = PairingMap { entries: vec![], grid_width: 3, grid_height: 3 };
        let (zgrid, zmask) = scatter_3d_to_grid(&f3d, &empty).unwrap();
        assert!(zgrid.data().iter().all(|v| *v == 0.0));
        assert!(zmask.iter().all(|m| !m));

        let bad = PairingMap {
            entries: vec![PairingEntry { row: 0, col: 0, point_index: 99, depth: 1.0 }],
            grid_width: 3,
            grid_height: 3,
        };
        assert!(scatter_3d_to_grid(&f3d, &bad).is_err());
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = crate::rng::stream(77, "knn");
        for n in [10usize, 64, 500] {
            let points: Vec<[f32; 3]> = (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(0.0..2.0),
                    ]
                })
                .collect();
            let k = 8.min(n);
            let fast = knn_indices(&points, 8);
            for (i, nbrs) in fast.iter().enumerate() {
                let mut dists: Vec<(f32, u32)> = points
                    .iter()
                    .enumerate()
                    .map(|(j, q)| {
                        let d = (q[0] - points[i][0]).powi(2)
                            + (q[1] - points[i][1]).powi(2)
                            + (q[2] - points[i][2]).powi(2);
                        (d, j as u32)
                    })
                    .collect();
                dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let expect: Vec<u32> = dists.iter().take(k).map(|(_, j)| *j).collect();
                assert_eq!(nbrs, &expect, "point {i} of {n}");
            }
        }
    }

    #[test]
    fn twod_forward_shapes_and_infer_entry() {
        let mut store = ParamStore::<f32>::new();
        let dims = ModelDims::default();
        let net = TwoDNet::init(&mut store, dims, BranchNorm::DnIdentity, None, None, 5).unwrap();
        let rgb = Tensor::from_fn(&[2, 3, 64, 64], |i| (i % 255) as f32 / 255.0);
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &mut store, &rgb, NormMode::Train).unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[2, 6, 64, 64]);
        assert_eq!(tape.value(out.f2d).shape(), &[2, 32, 8, 8]);
        assert_eq!(tape.value(out.f3d_sim).shape(), &[2, 16, 8, 8]);
        assert_eq!(tape.value(out.concat).shape(), &[2, 48, 8, 8]);

        // Inference path: image in, logits out, nothing 3D-typed anywhere.
        let infer: fn(&TwoDNet, &ParamStore<f32>, &Tensor<f32>) -> crate::error::Result<Tensor<f32>> =
            TwoDNet::infer_logits;
        let logits = infer(&net, &store, &rgb).unwrap();
        assert_eq!(logits.shape(), &[2, 6, 64, 64]);
    }

    #[test]
    fn threed_forward_is_permutation_equivariant() {
        let dims = ModelDims::default();
        let mut store = ParamStore::<f64>::new();
        let net = ThreeDNet::init(&mut store, dims, 11).unwrap();
        let mut rng = crate::rng::stream(4, "perm");
        let n = 64;
        let inputs = Tensor::from_fn(&[n, 6], |_| rng.gen_range(-1.0..1.0));
        let positions: Vec<[f32; 3]> = (0..n)
            .map(|i| {
                [
                    inputs.data()[i * 6] as f32,
                    inputs.data()[i * 6 + 1] as f32,
                    inputs.data()[i * 6 + 2] as f32,
                ]
            })
            .collect();
        let nbrs = knn_indices(&positions, dims.knn);
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &store, &inputs, &nbrs).unwrap();
        let base = tape.value(out.f3d).clone();

        // Permute the rows, recompute neighborhoods, undo the permutation.
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                p.swap(i, rng.gen_range(0..=i));
            }
            p
        };
        let perm_inputs = Tensor::from_fn(&[n, 6], |flat| {
            let (row, col) = (flat / 6, flat % 6);
            inputs.data()[perm[row] * 6 + col]
        });
        let perm_positions: Vec<[f32; 3]> = perm.iter().map(|&i| positions[i]).collect();
        let perm_nbrs = knn_indices(&perm_positions, dims.knn);
        let mut tape2 = Tape::new();
        let out2 = net.forward(&mut tape2, &store, &perm_inputs, &perm_nbrs).unwrap();
        let permuted = tape2.value(out2.f3d);
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..dims.c3d {
                let a = permuted.data()[new_row * dims.c3d + c];
                let b = base.data()[old_row * dims.c3d + c];
                assert!((a - b).abs() < 1e-9, "row {new_row} ch {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn per_category_discriminators_share_no_parameters() {
        let mut store = ParamStore::<f32>::new();
        let d0 = Discriminator::init(&mut store, 16, 0, 1).unwrap();
        let d1 = Discriminator::init(&mut store, 16, 1, 1).unwrap();
        let ids0: Vec<_> = d0.layers.iter().flat_map(|l| [l.w, l.b]).collect();
        let ids1: Vec<_> = d1.layers.iter().flat_map(|l| [l.w, l.b]).collect();
        for a in &ids0 {
            assert!(!ids1.contains(a));
        }
    }
}
