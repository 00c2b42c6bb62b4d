use std::sync::Arc;

use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};
use super::scalar::{gemm_a_bt, gemm_at_b, gemm_rm, Scalar};
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Convolution hyperparameters. Kernels are 1x1 or 3x3, strides 1 or 2.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, padding: Padding) -> Result<Self> {
        if !matches!(kernel, 1 | 3) {
            return Err(Error::invalid(format!("kernel must be 1 or 3, got {kernel}")));
        }
        if !matches!(stride, 1 | 2) {
            return Err(Error::invalid(format!("stride must be 1 or 2, got {stride}")));
        }
        Ok(ConvSpec {
            kernel,
            stride,
            padding,
        })
    }

    pub fn pad_size(&self) -> usize {
        match self.padding {
            Padding::Same => (self.kernel - 1) / 2,
            Padding::Valid => 0,
        }
    }

    fn pad(&self) -> usize {
        self.pad_size()
    }

    fn out_dim(&self, input: usize) -> usize {
        (input + 2 * self.pad() - self.kernel) / self.stride + 1
    }
}

enum Op<T: Scalar> {
    Leaf {
        param: Option<ParamId>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AffineScalar {
        x: Var,
        scale: T,
    },
    Sqrt {
        x: Var,
    },
    ChannelMean {
        x: Var,
    },
    MulChannel {
        x: Var,
        v: Var,
    },
    AddChannel {
        x: Var,
        v: Var,
    },
    DivChannel {
        x: Var,
        v: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    GatherPixels {
        x: Var,
        coords: Arc<Vec<(usize, usize, usize)>>,
    },
    MaxNeighbor {
        x: Var,
        argmax: Vec<u32>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Arc<Vec<u8>>,
        probs: Tensor<T>,
        valid: usize,
        mean: bool,
    },
    MaskedSqDiff {
        x: Var,
        target: Arc<Tensor<T>>,
        mask: Arc<Vec<bool>>,
        covered: usize,
        mean: bool,
    },
    MaskedL1 {
        x: Var,
        target: Arc<Tensor<T>>,
        mask: Arc<Vec<bool>>,
        covered: usize,
        mean: bool,
    },
    LogSigmoidLoss {
        z: Var,
        positive: bool,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
    DotConst {
        x: Var,
        w: Arc<Tensor<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
}

/// Label value marking pixels excluded from the segmentation loss.
pub const IGNORE_LABEL: u8 = 255;

/// Reverse-mode autodiff tape. Nodes are appended in topological order by
/// construction; `backward` walks them in reverse, then `apply_param_grads`
/// adds leaf gradients into a [`ParamStore`]. Dropping the tape releases the
/// graph.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient computed by the latest `backward`, if any reached this node.
    pub fn grad_of(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A node with no gradient flow into the graph inputs it came from.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Leaf bound to a store parameter. Non-trainable entries enter as
    /// constants so no gradient ever accumulates on them.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let entry = store.entry(id);
        let param = if entry.trainable { Some(id) } else { None };
        self.push(entry.value.clone(), Op::Leaf { param })
    }

    /// Leaf bound to a parameter's value but detached from it, regardless of
    /// trainability. Used when a network is held fixed for one objective.
    pub fn param_frozen(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf { param: None })
    }

    /// Copy of a node's value, cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    // ---- primitives ----

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let (n, cin, h, width) = self.value(x).dims4("conv2d")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != spec.kernel || ws[3] != spec.kernel {
            return Err(Error::shape(
                "conv2d",
                format!("weights (Cout, {cin}, {0}, {0})", spec.kernel),
                format!("{ws:?}"),
            ));
        }
        let cout = ws[0];
        if self.value(b).shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias ({cout})"),
                format!("{:?}", self.value(b).shape()),
            ));
        }
        let ho = spec.out_dim(h);
        let wo = spec.out_dim(width);
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        let ckk = cin * spec.kernel * spec.kernel;
        let mut cols = vec![T::ZERO; ckk * ho * wo];
        for i in 0..n {
            im2col(
                self.value(x),
                i,
                spec,
                &mut cols,
            );
            let dst = &mut out.data_mut()[i * cout * ho * wo..(i + 1) * cout * ho * wo];
            gemm_rm(cout, ckk, ho * wo, T::ONE, self.value(w).data(), &cols, T::ZERO, dst);
            let bias = self.value(b).data().to_vec();
            for (c, &bv) in bias.iter().enumerate() {
                for v in &mut dst[c * ho * wo..(c + 1) * ho * wo] {
                    *v += bv;
                }
            }
        }
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }))
    }

    /// Affine map per row: x (rows, in) · w (in, out) + b (out).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, xin) = self.value(x).dims2("linear")?;
        let (win, wout) = self.value(w).dims2("linear")?;
        if xin != win {
            return Err(Error::shape(
                "linear",
                format!("input width {win}"),
                format!("{xin}"),
            ));
        }
        if self.value(b).shape() != [wout] {
            return Err(Error::shape(
                "linear",
                format!("bias ({wout})"),
                format!("{:?}", self.value(b).shape()),
            ));
        }
        let mut out = Tensor::zeros(&[rows, wout]);
        gemm_rm(
            rows,
            xin,
            wout,
            T::ONE,
            self.value(x).data(),
            self.value(w).data(),
            T::ZERO,
            out.data_mut(),
        );
        let bias = self.value(b).data().to_vec();
        for r in 0..rows {
            for (c, &bv) in bias.iter().enumerate() {
                out.data_mut()[r * wout + c] += bv;
            }
        }
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.maximum(T::ZERO));
        self.push(out, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        let out = self.value(x).map(|v| if v > T::ZERO { v } else { s * v });
        self.push(out, Op::LeakyRelu { x, slope: s })
    }

    /// Logistic function, pinned strictly inside (0, 1).
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid_clamped);
        self.push(out, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = Tensor::from_fn(self.value(a).shape(), |i| {
            self.value(a).data()[i] + self.value(b).data()[i]
        });
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = Tensor::from_fn(self.value(a).shape(), |i| {
            self.value(a).data()[i] * self.value(b).data()[i]
        });
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let s = T::from_f64(scale);
        let sh = T::from_f64(shift);
        let out = self.value(x).map(|v| s * v + sh);
        self.push(out, Op::AffineScalar { x, scale: s })
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.sqrt());
        self.push(out, Op::Sqrt { x })
    }

    /// Per-channel mean of a rank-4 map over batch, height and width.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("channel_mean")?;
        let denom = T::from_f64((n * h * w) as f64);
        let mut out = Tensor::zeros(&[c]);
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * h * w;
                let s: T = self.value(x).data()[base..base + h * w].iter().copied().sum();
                out.data_mut()[ch] += s;
            }
        }
        for v in out.data_mut() {
            *v = *v / denom;
        }
        Ok(self.push(out, Op::ChannelMean { x }))
    }

    pub fn mul_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        self.check_channel("mul_channel", x, v)?;
        let out = self.broadcast_channel(x, v, |a, b| a * b);
        Ok(self.push(out, Op::MulChannel { x, v }))
    }

    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        self.check_channel("add_channel", x, v)?;
        let out = self.broadcast_channel(x, v, |a, b| a + b);
        Ok(self.push(out, Op::AddChannel { x, v }))
    }

    pub fn div_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        self.check_channel("div_channel", x, v)?;
        let out = self.broadcast_channel(x, v, |a, b| a / b);
        Ok(self.push(out, Op::DivChannel { x, v }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4("concat_channels")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("({n}, _, {h}, {w})"),
                format!("({nb}, _, {hb}, {wb})"),
            ));
        }
        let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
        let hw = h * w;
        for i in 0..n {
            let dst = &mut out.data_mut()[i * (ca + cb) * hw..(i + 1) * (ca + cb) * hw];
            dst[..ca * hw].copy_from_slice(&self.value(a).data()[i * ca * hw..(i + 1) * ca * hw]);
            dst[ca * hw..].copy_from_slice(&self.value(b).data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        Ok(self.push(out, Op::ConcatChannels { a, b }))
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("upsample_nearest")?;
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        for i in 0..n {
            for ch in 0..c {
                let src = &self.value(x).data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                let dst = &mut out.data_mut()[(i * c + ch) * ho * wo..(i * c + ch + 1) * ho * wo];
                for oh in 0..ho {
                    for ow in 0..wo {
                        dst[oh * wo + ow] = src[(oh / factor) * w + ow / factor];
                    }
                }
            }
        }
        Ok(self.push(out, Op::UpsampleNearest { x, factor }))
    }

    /// Rows of per-pixel channel vectors: out (K, C) from coords (n, h, w).
    pub fn gather_pixels(&mut self, x: Var, coords: Arc<Vec<(usize, usize, usize)>>) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("gather_pixels")?;
        for &(ni, hi, wi) in coords.iter() {
            if ni >= n || hi >= h || wi >= w {
                return Err(Error::invalid(format!(
                    "gather_pixels coordinate ({ni}, {hi}, {wi}) outside ({n}, {h}, {w})"
                )));
            }
        }
        let mut out = Tensor::zeros(&[coords.len(), c]);
        for (k, &(ni, hi, wi)) in coords.iter().enumerate() {
            for ch in 0..c {
                out.data_mut()[k * c + ch] = self.value(x).data()[((ni * c + ch) * h + hi) * w + wi];
            }
        }
        Ok(self.push(out, Op::GatherPixels { x, coords }))
    }

    /// Per-row max over listed neighbor rows: x (P, C) -> out (P, C) with
    /// `out[p][c] = max over q in neighbors[p] of x[q][c]`.
    pub fn max_neighbor(&mut self, x: Var, neighbors: &[Vec<u32>]) -> Result<Var> {
        let (p, c) = self.value(x).dims2("max_neighbor")?;
        if neighbors.len() != p {
            return Err(Error::shape(
                "max_neighbor",
                format!("{p} neighbor lists"),
                format!("{}", neighbors.len()),
            ));
        }
        let mut out = Tensor::zeros(&[p, c]);
        let mut argmax = vec![0u32; p * c];
        for (pi, nbrs) in neighbors.iter().enumerate() {
            if nbrs.is_empty() {
                return Err(Error::invalid(format!("empty neighbor list at row {pi}")));
            }
            for ch in 0..c {
                let mut best_q = nbrs[0];
                let mut best = self.value(x).data()[best_q as usize * c + ch];
                for &q in &nbrs[1..] {
                    if q as usize >= p {
                        return Err(Error::invalid(format!("neighbor index {q} out of range")));
                    }
                    let v = self.value(x).data()[q as usize * c + ch];
                    if v > best {
                        best = v;
                        best_q = q;
                    }
                }
                out.data_mut()[pi * c + ch] = best;
                argmax[pi * c + ch] = best_q;
            }
        }
        Ok(self.push(out, Op::MaxNeighbor { x, argmax }))
    }

    /// Softmax + negative log-likelihood over the channel dimension, skipping
    /// positions labeled [`IGNORE_LABEL`]. Labels index (batch, h, w)
    /// row-major. Rank-2 inputs (rows, classes) are treated as (rows,
    /// classes, 1, 1). Returns the scalar loss; all-ignored input yields 0.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: Arc<Vec<u8>>,
        mean: bool,
    ) -> Result<Var> {
        let (n, c, h, w) = match self.value(logits).rank() {
            2 => {
                let (rows, classes) = self.value(logits).dims2("softmax_cross_entropy")?;
                (rows, classes, 1, 1)
            }
            _ => self.value(logits).dims4("softmax_cross_entropy")?,
        };
        if labels.len() != n * h * w {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels", n * h * w),
                format!("{}", labels.len()),
            ));
        }
        let mut probs = Tensor::zeros(&[n, c, h, w]);
        let mut loss = 0.0f64;
        let mut valid = 0usize;
        let hw = h * w;
        for i in 0..n {
            for pos in 0..hw {
                let label = labels[i * hw + pos];
                let mut maxv = f64::NEG_INFINITY;
                for ch in 0..c {
                    maxv = maxv.max(self.value(logits).data()[(i * c + ch) * hw + pos].to_f64());
                }
                let mut denom = 0.0f64;
                for ch in 0..c {
                    let e = (self.value(logits).data()[(i * c + ch) * hw + pos].to_f64() - maxv).exp();
                    probs.data_mut()[(i * c + ch) * hw + pos] = T::from_f64(e);
                    denom += e;
                }
                for ch in 0..c {
                    let p = probs.data()[(i * c + ch) * hw + pos].to_f64() / denom;
                    probs.data_mut()[(i * c + ch) * hw + pos] = T::from_f64(p);
                }
                if label != IGNORE_LABEL {
                    if usize::from(label) >= c {
                        return Err(Error::invalid(format!(
                            "label {label} outside {c} classes"
                        )));
                    }
                    let p = probs.data()[(i * c + usize::from(label)) * hw + pos].to_f64();
                    loss -= p.max(1e-300).ln();
                    valid += 1;
                }
            }
        }
        let total = if mean && valid > 0 {
            loss / valid as f64
        } else {
            loss
        };
        Ok(self.push(
            Tensor::scalar(T::from_f64(total)),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
                valid,
                mean,
            },
        ))
    }

    /// Channel-summed squared difference against a constant target, reduced
    /// over masked positions. Mask indexes (batch, h, w) row-major; `mean`
    /// divides by the covered-position count. Empty mask yields 0.
    pub fn masked_sq_diff(
        &mut self,
        x: Var,
        target: Arc<Tensor<T>>,
        mask: Arc<Vec<bool>>,
        mean: bool,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("masked_sq_diff")?;
        if target.shape() != self.value(x).shape() {
            return Err(Error::shape(
                "masked_sq_diff",
                format!("{:?}", self.value(x).shape()),
                format!("{:?}", target.shape()),
            ));
        }
        if mask.len() != n * h * w {
            return Err(Error::shape(
                "masked_sq_diff",
                format!("{} mask entries", n * h * w),
                format!("{}", mask.len()),
            ));
        }
        let hw = h * w;
        let covered = mask.iter().filter(|m| **m).count();
        let mut loss = 0.0f64;
        for i in 0..n {
            for pos in 0..hw {
                if !mask[i * hw + pos] {
                    continue;
                }
                for ch in 0..c {
                    let d = self.value(x).data()[(i * c + ch) * hw + pos].to_f64()
                        - target.data()[(i * c + ch) * hw + pos].to_f64();
                    loss += d * d;
                }
            }
        }
        if mean && covered > 0 {
            loss /= covered as f64;
        }
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::MaskedSqDiff {
                x,
                target,
                mask,
                covered,
                mean,
            },
        ))
    }

    /// Absolute difference against a constant target over masked positions.
    pub fn masked_l1(
        &mut self,
        x: Var,
        target: Arc<Tensor<T>>,
        mask: Arc<Vec<bool>>,
        mean: bool,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("masked_l1")?;
        if target.shape() != self.value(x).shape() {
            return Err(Error::shape(
                "masked_l1",
                format!("{:?}", self.value(x).shape()),
                format!("{:?}", target.shape()),
            ));
        }
        if mask.len() != n * h * w {
            return Err(Error::shape(
                "masked_l1",
                format!("{} mask entries", n * h * w),
                format!("{}", mask.len()),
            ));
        }
        let hw = h * w;
        let covered = mask.iter().filter(|m| **m).count();
        let mut loss = 0.0f64;
        for i in 0..n {
            for pos in 0..hw {
                if !mask[i * hw + pos] {
                    continue;
                }
                for ch in 0..c {
                    loss += (self.value(x).data()[(i * c + ch) * hw + pos].to_f64()
                        - target.data()[(i * c + ch) * hw + pos].to_f64())
                    .abs();
                }
            }
        }
        if mean && covered > 0 {
            loss /= covered as f64;
        }
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::MaskedL1 {
                x,
                target,
                mask,
                covered,
                mean,
            },
        ))
    }

    /// Sum over elements of `softplus(-z)` (positive targets, `-log σ(z)`)
    /// or `softplus(z)` (negative targets, `-log(1-σ(z))`).
    pub fn log_sigmoid_loss(&mut self, z: Var, positive: bool) -> Var {
        let mut loss = 0.0f64;
        for v in self.value(z).data() {
            let u = if positive { -v.to_f64() } else { v.to_f64() };
            loss += softplus(u);
        }
        self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::LogSigmoidLoss { z, positive },
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0f64;
        let mut saved = Vec::with_capacity(terms.len());
        for &(v, wt) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape(
                    "weighted_sum",
                    "scalar term",
                    format!("{:?}", self.value(v).shape()),
                ));
            }
            total += self.value(v).item().to_f64() * wt;
            saved.push((v, T::from_f64(wt)));
        }
        Ok(self.push(
            Tensor::scalar(T::from_f64(total)),
            Op::WeightedSum { terms: saved },
        ))
    }

    /// Scalar projection `sum(x ⊙ w)` against a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, w: Arc<Tensor<T>>) -> Result<Var> {
        if w.shape() != self.value(x).shape() {
            return Err(Error::shape(
                "dot_const",
                format!("{:?}", self.value(x).shape()),
                format!("{:?}", w.shape()),
            ));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(w.data().iter())
            .map(|(a, b)| a.to_f64() * b.to_f64())
            .sum();
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::DotConst { x, w }))
    }

    // ---- backward ----

    /// Reverse-mode sweep from a finite scalar loss. Gradients land on every
    /// reachable node and can be read back with [`Tape::grad_of`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                "scalar loss",
                format!("{:?}", self.value(loss).shape()),
            ));
        }
        let lv = self.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                context: format!("backward over {} nodes", self.nodes.len()),
            });
        }
        match &mut self.nodes[loss.0].grad {
            Some(g) => {
                g.data_mut()[0] += T::ONE;
            }
            slot => *slot = Some(Tensor::scalar(T::ONE)),
        }
        for i in (0..=loss.0).rev() {
            let g = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Add leaf gradients into their bound parameters.
    pub fn apply_param_grads(&self, store: &mut ParamStore<T>) {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = &node.grad {
                    let dst = store.grad_mut(id);
                    for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
                        *d += *s;
                    }
                }
            }
        }
    }

    /// Backward then accumulate parameter gradients, consuming the tape.
    pub fn finish(mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?;
        self.apply_param_grads(store);
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Tensor<T>) {
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor<T>) {
        // Ops only reference earlier nodes, so reads of parent values and the
        // later accumulate never alias `g`.
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Conv2d { x, w, b, spec } => {
                let (x, w, b, spec) = (*x, *w, *b, *spec);
                let (gx, gw, gb) = self.conv2d_backward(x, w, g, spec);
                self.accumulate(x, gx);
                self.accumulate(w, gw);
                self.accumulate(b, gb);
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (rows, xin) = (self.value(x).shape()[0], self.value(x).shape()[1]);
                let wout = self.value(w).shape()[1];
                let mut gx = Tensor::zeros(&[rows, xin]);
                gemm_a_bt(
                    rows,
                    wout,
                    xin,
                    T::ONE,
                    g.data(),
                    self.value(w).data(),
                    T::ZERO,
                    gx.data_mut(),
                );
                let mut gw = Tensor::zeros(&[xin, wout]);
                gemm_at_b(
                    xin,
                    rows,
                    wout,
                    T::ONE,
                    self.value(x).data(),
                    g.data(),
                    T::ZERO,
                    gw.data_mut(),
                );
                let mut gb = Tensor::zeros(&[wout]);
                for r in 0..rows {
                    for c in 0..wout {
                        gb.data_mut()[c] += g.data()[r * wout + c];
                    }
                }
                self.accumulate(x, gx);
                self.accumulate(w, gw);
                self.accumulate(b, gb);
            }
            Op::Relu { x } => {
                let x = *x;
                let gx = Tensor::from_fn(g.shape(), |k| {
                    if self.value(x).data()[k] > T::ZERO {
                        g.data()[k]
                    } else {
                        T::ZERO
                    }
                });
                self.accumulate(x, gx);
            }
            Op::LeakyRelu { x, slope } => {
                let (x, slope) = (*x, *slope);
                let gx = Tensor::from_fn(g.shape(), |k| {
                    if self.value(x).data()[k] > T::ZERO {
                        g.data()[k]
                    } else {
                        slope * g.data()[k]
                    }
                });
                self.accumulate(x, gx);
            }
            Op::Sigmoid { x } => {
                let x = *x;
                let y = self.nodes[i].value.clone();
                let gx = Tensor::from_fn(g.shape(), |k| {
                    let s = y.data()[k];
                    g.data()[k] * s * (T::ONE - s)
                });
                self.accumulate(x, gx);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let ga = Tensor::from_fn(g.shape(), |k| g.data()[k] * self.value(b).data()[k]);
                let gb = Tensor::from_fn(g.shape(), |k| g.data()[k] * self.value(a).data()[k]);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::AffineScalar { x, scale } => {
                let (x, scale) = (*x, *scale);
                let gx = g.map(|v| v * scale);
                self.accumulate(x, gx);
            }
            Op::Sqrt { x } => {
                let x = *x;
                let y = self.nodes[i].value.clone();
                let half = T::from_f64(0.5);
                let gx = Tensor::from_fn(g.shape(), |k| g.data()[k] * half / y.data()[k]);
                self.accumulate(x, gx);
            }
            Op::ChannelMean { x } => {
                let x = *x;
                let (n, c, h, w) = self.value(x).dims4("channel_mean-grad").unwrap();
                let denom = T::from_f64((n * h * w) as f64);
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                for ni in 0..n {
                    for ch in 0..c {
                        let gv = g.data()[ch] / denom;
                        let base = (ni * c + ch) * h * w;
                        for v in &mut gx.data_mut()[base..base + h * w] {
                            *v += gv;
                        }
                    }
                }
                self.accumulate(x, gx);
            }
            Op::MulChannel { x, v } => {
                let (x, v) = (*x, *v);
                let (n, c, h, w) = self.value(x).dims4("mul_channel-grad").unwrap();
                let hw = h * w;
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                let mut gv = Tensor::zeros(&[c]);
                for ni in 0..n {
                    for ch in 0..c {
                        let vc = self.value(v).data()[ch];
                        let base = (ni * c + ch) * hw;
                        let mut acc = T::ZERO;
                        for k in 0..hw {
                            gx.data_mut()[base + k] = g.data()[base + k] * vc;
                            acc += g.data()[base + k] * self.value(x).data()[base + k];
                        }
                        gv.data_mut()[ch] += acc;
                    }
                }
                self.accumulate(x, gx);
                self.accumulate(v, gv);
            }
            Op::AddChannel { x, v } => {
                let (x, v) = (*x, *v);
                let (n, c, h, w) = self.value(x).dims4("add_channel-grad").unwrap();
                let hw = h * w;
                let mut gv = Tensor::zeros(&[c]);
                for ni in 0..n {
                    for ch in 0..c {
                        let base = (ni * c + ch) * hw;
                        let acc: T = g.data()[base..base + hw].iter().copied().sum();
                        gv.data_mut()[ch] += acc;
                    }
                }
                self.accumulate(x, g.clone());
                self.accumulate(v, gv);
            }
            Op::DivChannel { x, v } => {
                let (x, v) = (*x, *v);
                let (n, c, h, w) = self.value(x).dims4("div_channel-grad").unwrap();
                let hw = h * w;
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                let mut gv = Tensor::zeros(&[c]);
                for ni in 0..n {
                    for ch in 0..c {
                        let vc = self.value(v).data()[ch];
                        let base = (ni * c + ch) * hw;
                        let mut acc = T::ZERO;
                        for k in 0..hw {
                            gx.data_mut()[base + k] = g.data()[base + k] / vc;
                            acc += g.data()[base + k] * self.value(x).data()[base + k];
                        }
                        gv.data_mut()[ch] -= acc / (vc * vc);
                    }
                }
                self.accumulate(x, gx);
                self.accumulate(v, gv);
            }
            Op::ConcatChannels { a, b } => {
                let (a, b) = (*a, *b);
                let (n, ca, h, w) = self.value(a).dims4("concat-grad").unwrap();
                let cb = self.value(b).shape()[1];
                let hw = h * w;
                let mut ga = Tensor::zeros(&[n, ca, h, w]);
                let mut gb = Tensor::zeros(&[n, cb, h, w]);
                for ni in 0..n {
                    let src = &g.data()[ni * (ca + cb) * hw..(ni + 1) * (ca + cb) * hw];
                    ga.data_mut()[ni * ca * hw..(ni + 1) * ca * hw]
                        .copy_from_slice(&src[..ca * hw]);
                    gb.data_mut()[ni * cb * hw..(ni + 1) * cb * hw]
                        .copy_from_slice(&src[ca * hw..]);
                }
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::UpsampleNearest { x, factor } => {
                let (x, factor) = (*x, *factor);
                let (n, c, h, w) = self.value(x).dims4("upsample-grad").unwrap();
                let (ho, wo) = (h * factor, w * factor);
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                for ni in 0..n {
                    for ch in 0..c {
                        let src = &g.data()[(ni * c + ch) * ho * wo..(ni * c + ch + 1) * ho * wo];
                        let dst = &mut gx.data_mut()[(ni * c + ch) * h * w..(ni * c + ch + 1) * h * w];
                        for oh in 0..ho {
                            for ow in 0..wo {
                                dst[(oh / factor) * w + ow / factor] += src[oh * wo + ow];
                            }
                        }
                    }
                }
                self.accumulate(x, gx);
            }
            Op::GatherPixels { x, coords } => {
                let (x, coords) = (*x, Arc::clone(coords));
                let (n, c, h, w) = self.value(x).dims4("gather-grad").unwrap();
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                for (k, &(ni, hi, wi)) in coords.iter().enumerate() {
                    for ch in 0..c {
                        gx.data_mut()[((ni * c + ch) * h + hi) * w + wi] += g.data()[k * c + ch];
                    }
                }
                self.accumulate(x, gx);
            }
            Op::MaxNeighbor { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let (p, c) = self.value(x).dims2("max_neighbor-grad").unwrap();
                let mut gx = Tensor::zeros(&[p, c]);
                for pi in 0..p {
                    for ch in 0..c {
                        let q = argmax[pi * c + ch] as usize;
                        gx.data_mut()[q * c + ch] += g.data()[pi * c + ch];
                    }
                }
                self.accumulate(x, gx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
                valid,
                mean,
            } => {
                let logits = *logits;
                let labels = Arc::clone(labels);
                let probs = probs.clone();
                let (valid, mean) = (*valid, *mean);
                let shape = self.value(logits).shape().to_vec();
                let (n, c, h, w) = if shape.len() == 2 {
                    (shape[0], shape[1], 1, 1)
                } else {
                    (shape[0], shape[1], shape[2], shape[3])
                };
                let hw = h * w;
                let gs = g.data()[0];
                let scale = if mean && valid > 0 {
                    gs / T::from_f64(valid as f64)
                } else {
                    gs
                };
                let mut gx = Tensor::zeros(&shape);
                for ni in 0..n {
                    for pos in 0..hw {
                        let label = labels[ni * hw + pos];
                        if label == IGNORE_LABEL {
                            continue;
                        }
                        for ch in 0..c {
                            let idx = (ni * c + ch) * hw + pos;
                            let mut d = probs.data()[idx];
                            if ch == usize::from(label) {
                                d -= T::ONE;
                            }
                            gx.data_mut()[idx] = scale * d;
                        }
                    }
                }
                self.accumulate(logits, gx);
            }
            Op::MaskedSqDiff {
                x,
                target,
                mask,
                covered,
                mean,
            } => {
                let x = *x;
                let target = Arc::clone(target);
                let mask = Arc::clone(mask);
                let (covered, mean) = (*covered, *mean);
                let (n, c, h, w) = self.value(x).dims4("masked_sq_diff-grad").unwrap();
                let hw = h * w;
                let gs = g.data()[0];
                let scale = if mean && covered > 0 {
                    gs / T::from_f64(covered as f64)
                } else {
                    gs
                };
                let two = T::from_f64(2.0);
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                for ni in 0..n {
                    for pos in 0..hw {
                        if !mask[ni * hw + pos] {
                            continue;
                        }
                        for ch in 0..c {
                            let idx = (ni * c + ch) * hw + pos;
                            gx.data_mut()[idx] =
                                scale * two * (self.value(x).data()[idx] - target.data()[idx]);
                        }
                    }
                }
                self.accumulate(x, gx);
            }
            Op::MaskedL1 {
                x,
                target,
                mask,
                covered,
                mean,
            } => {
                let x = *x;
                let target = Arc::clone(target);
                let mask = Arc::clone(mask);
                let (covered, mean) = (*covered, *mean);
                let (n, c, h, w) = self.value(x).dims4("masked_l1-grad").unwrap();
                let hw = h * w;
                let gs = g.data()[0];
                let scale = if mean && covered > 0 {
                    gs / T::from_f64(covered as f64)
                } else {
                    gs
                };
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                for ni in 0..n {
                    for pos in 0..hw {
                        if !mask[ni * hw + pos] {
                            continue;
                        }
                        for ch in 0..c {
                            let idx = (ni * c + ch) * hw + pos;
                            let d = self.value(x).data()[idx] - target.data()[idx];
                            let s = if d > T::ZERO {
                                T::ONE
                            } else if d < T::ZERO {
                                -T::ONE
                            } else {
                                T::ZERO
                            };
                            gx.data_mut()[idx] = scale * s;
                        }
                    }
                }
                self.accumulate(x, gx);
            }
            Op::LogSigmoidLoss { z, positive } => {
                let (z, positive) = (*z, *positive);
                let gs = g.data()[0];
                let gx = Tensor::from_fn(self.value(z).shape(), |k| {
                    let s = T::from_f64(sigmoid_f64(self.value(z).data()[k].to_f64()));
                    if positive {
                        gs * (s - T::ONE)
                    } else {
                        gs * s
                    }
                });
                self.accumulate(z, gx);
            }
            Op::WeightedSum { terms } => {
                let terms = terms.clone();
                let gs = g.data()[0];
                for (v, wt) in terms {
                    self.accumulate(v, Tensor::scalar(gs * wt));
                }
            }
            Op::DotConst { x, w } => {
                let x = *x;
                let w = Arc::clone(w);
                let gs = g.data()[0];
                let gx = Tensor::from_fn(w.shape(), |k| gs * w.data()[k]);
                self.accumulate(x, gx);
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        g: &Tensor<T>,
        spec: ConvSpec,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (n, cin, h, width) = self.value(x).dims4("conv2d-grad").unwrap();
        let cout = self.value(w).shape()[0];
        let ho = spec.out_dim(h);
        let wo = spec.out_dim(width);
        let ckk = cin * spec.kernel * spec.kernel;
        let hw = ho * wo;

        let mut gx = Tensor::zeros(&[n, cin, h, width]);
        let mut gw = Tensor::zeros(self.value(w).shape());
        let mut gb = Tensor::zeros(&[cout]);
        let mut cols = vec![T::ZERO; ckk * hw];
        let mut gcols = vec![T::ZERO; ckk * hw];

        for i in 0..n {
            let gout = &g.data()[i * cout * hw..(i + 1) * cout * hw];
            for c in 0..cout {
                let s: T = gout[c * hw..(c + 1) * hw].iter().copied().sum();
                gb.data_mut()[c] += s;
            }
            im2col(self.value(x), i, spec, &mut cols);
            // gw (cout, ckk) += gout (cout, hw) · colsᵀ (hw, ckk)
            gemm_a_bt(cout, hw, ckk, T::ONE, gout, &cols, T::ONE, gw.data_mut());
            // gcols (ckk, hw) = wᵀ (ckk, cout) · gout (cout, hw)
            gemm_at_b(
                ckk,
                cout,
                hw,
                T::ONE,
                self.value(w).data(),
                gout,
                T::ZERO,
                &mut gcols,
            );
            col2im_add(&gcols, i, spec, cin, h, width, ho, wo, &mut gx);
        }
        (gx, gw, gb)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?}", self.value(a).shape()),
                format!("{:?}", self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn check_channel(&self, op: &'static str, x: Var, v: Var) -> Result<()> {
        let (_, c, _, _) = self.value(x).dims4(op)?;
        if self.value(v).shape() != [c] {
            return Err(Error::shape(
                op,
                format!("channel vector ({c})"),
                format!("{:?}", self.value(v).shape()),
            ));
        }
        Ok(())
    }

    fn broadcast_channel(&self, x: Var, v: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (n, c, h, w) = self.value(x).dims4("broadcast").unwrap();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for ni in 0..n {
            for ch in 0..c {
                let vc = self.value(v).data()[ch];
                let base = (ni * c + ch) * hw;
                for k in 0..hw {
                    out.data_mut()[base + k] = f(self.value(x).data()[base + k], vc);
                }
            }
        }
        out
    }
}

fn sigmoid_f64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

fn sigmoid_clamped<T: Scalar>(x: T) -> T {
    let s = T::from_f64(sigmoid_f64(x.to_f64()));
    // Keep outputs strictly inside (0, 1) even when exp saturates.
    let lo = T::from_f64(f64::from(f32::MIN_POSITIVE));
    let hi = T::from_f64(1.0 - f64::from(f32::EPSILON) / 2.0);
    if s <= T::ZERO {
        lo
    } else if s >= T::ONE {
        hi
    } else {
        s
    }
}

fn im2col<T: Scalar>(x: &Tensor<T>, sample: usize, spec: ConvSpec, cols: &mut [T]) {
    let (_, cin, h, w) = x.dims4("im2col").unwrap();
    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.pad() as isize;
    let ho = spec.out_dim(h);
    let wo = spec.out_dim(w);
    let hw = ho * wo;
    let data = x.data();
    for ci in 0..cin {
        let src = &data[(sample * cin + ci) * h * w..(sample * cin + ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oh in 0..ho {
                    let ih = (oh * s) as isize + ki as isize - p;
                    if ih < 0 || ih >= h as isize {
                        dst[oh * wo..(oh + 1) * wo].fill(T::ZERO);
                        continue;
                    }
                    let srow = &src[ih as usize * w..(ih as usize + 1) * w];
                    for ow in 0..wo {
                        let iw = (ow * s) as isize + kj as isize - p;
                        dst[oh * wo + ow] = if iw < 0 || iw >= w as isize {
                            T::ZERO
                        } else {
                            srow[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    sample: usize,
    spec: ConvSpec,
    cin: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    gx: &mut Tensor<T>,
) {
    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.pad() as isize;
    let hw = ho * wo;
    for ci in 0..cin {
        let dst_base = (sample * cin + ci) * h * w;
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oh in 0..ho {
                    let ih = (oh * s) as isize + ki as isize - p;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * s) as isize + kj as isize - p;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        gx.data_mut()[dst_base + ih as usize * w + iw as usize] +=
                            src[oh * wo + ow];
                    }
                }
            }
        }
    }
}
