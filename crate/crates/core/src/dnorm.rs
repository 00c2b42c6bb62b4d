//! The normalization family: batch normalization, adaptive batch
//! normalization and the two-stage dimension normalization, plus global
//! feature-statistics precomputation and the `STAT` file codec.
//!
//! Dimension normalization standardizes with source-batch statistics,
//! rescales to fixed precomputed target statistics (μ̄, σ̄) and applies
//! learnable offsets Δμ, Δσ:
//!
//! `y = Δσ ⊙ (σ̄ ⊙ (x − μ)/σ + μ̄) + Δμ`
//!
//! The same operation implements both stages; the first uses global 3D
//! targets, the second global 2D targets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::ConvLayer;
use crate::tensorcore::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Exact per-channel population statistics over pooled batches.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: u64,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Standard deviation with the numerical floor applied.
    pub fn std(&self, epsilon: f64) -> Vec<f64> {
        self.var.iter().map(|v| (v + epsilon).sqrt()).collect()
    }

    /// Pairwise combination with another population of the same width.
    pub fn merge(&mut self, other: &ChannelStats) {
        assert_eq!(self.channels(), other.channels());
        let na = self.count as f64;
        let nb = other.count as f64;
        let total = na + nb;
        for ch in 0..self.mean.len() {
            let delta = other.mean[ch] - self.mean[ch];
            let m2a = self.var[ch] * na;
            let m2b = other.var[ch] * nb;
            let m2 = m2a + m2b + delta * delta * na * nb / total;
            self.mean[ch] += delta * nb / total;
            self.var[ch] = m2 / total;
        }
        self.count += other.count;
    }

    /// Collapse to scalar statistics over all channels and broadcast to a
    /// new channel width (used when target and source widths differ).
    pub fn pooled_to(&self, channels: usize) -> ChannelStats {
        let c = self.channels() as f64;
        let mean = self.mean.iter().sum::<f64>() / c;
        // Var over the pooled population: E[x²] − mean², from per-channel
        // mean/var of equally-sized channel populations.
        let ex2 = self
            .mean
            .iter()
            .zip(self.var.iter())
            .map(|(m, v)| v + m * m)
            .sum::<f64>()
            / c;
        let var = (ex2 - mean * mean).max(0.0);
        ChannelStats {
            mean: vec![mean; channels],
            var: vec![var; channels],
            count: self.count * self.channels() as u64 / channels.max(1) as u64,
        }
    }
}

/// Exact population mean/variance per channel over all (batch, height,
/// width) positions pooled across the streamed batches, via single-pass
/// pairwise combination.
pub fn precompute_global_stats<'a, T: Scalar>(
    batches: impl Iterator<Item = &'a Tensor<T>>,
) -> Result<ChannelStats> {
    let mut acc: Option<(Vec<f64>, Vec<f64>, u64)> = None; // mean, m2, count
    for batch in batches {
        let (n, c, h, w) = batch.dims4("precompute_global_stats")?;
        let hw = h * w;
        let bcount = (n * hw) as u64;
        if bcount == 0 {
            continue;
        }
        let mut bmean = vec![0.0f64; c];
        let mut bm2 = vec![0.0f64; c];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * hw;
                for k in 0..hw {
                    bmean[ch] += batch.data()[base + k].to_f64();
                }
            }
        }
        for m in &mut bmean {
            *m /= bcount as f64;
        }
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * hw;
                for k in 0..hw {
                    let d = batch.data()[base + k].to_f64() - bmean[ch];
                    bm2[ch] += d * d;
                }
            }
        }
        acc = Some(match acc {
            None => (bmean, bm2, bcount),
            Some((mut mean, mut m2, count)) => {
                let total = count + bcount;
                for ch in 0..mean.len() {
                    let delta = bmean[ch] - mean[ch];
                    mean[ch] += delta * bcount as f64 / total as f64;
                    m2[ch] += bm2[ch]
                        + delta * delta * (count as f64) * (bcount as f64) / total as f64;
                }
                (mean, m2, total)
            }
        });
    }
    let (mean, m2, count) = acc.ok_or_else(|| Error::invalid("no feature elements streamed"))?;
    let var = m2.iter().map(|v| v / count as f64).collect();
    Ok(ChannelStats { mean, var, count })
}

const STAT_MAGIC: &[u8; 4] = b"STAT";

/// `STAT`: magic, u32 channel count, f32 means, f32 variances, u64 count.
pub fn write_stats(stats: &ChannelStats, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(STAT_MAGIC)?;
    w.write_all(&(stats.channels() as u32).to_le_bytes())?;
    for m in &stats.mean {
        w.write_all(&(*m as f32).to_le_bytes())?;
    }
    for v in &stats.var {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.write_all(&stats.count.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_stats(path: &Path) -> Result<ChannelStats> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != STAT_MAGIC {
        return Err(Error::Format {
            format: "STAT",
            detail: format!("bad magic {magic:?}"),
        });
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let c = u32::from_le_bytes(buf4) as usize;
    let mut mean = Vec::with_capacity(c);
    for _ in 0..c {
        r.read_exact(&mut buf4)?;
        mean.push(f64::from(f32::from_le_bytes(buf4)));
    }
    let mut var = Vec::with_capacity(c);
    for _ in 0..c {
        r.read_exact(&mut buf4)?;
        var.push(f64::from(f32::from_le_bytes(buf4)));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    Ok(ChannelStats {
        mean,
        var,
        count: u64::from_le_bytes(buf8),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Infer,
}

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Learnable scale/shift plus running batch statistics.
#[derive(Clone, Debug)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub steps: ParamId,
    pub channels: usize,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BnParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
    ) -> Result<BnParams> {
        Ok(BnParams {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[channels], T::ONE), true)?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.add(
                format!("{prefix}.running_mean"),
                Tensor::zeros(&[channels]),
                false,
            )?,
            running_var: store.add(
                format!("{prefix}.running_var"),
                Tensor::full(&[channels], T::ONE),
                false,
            )?,
            steps: store.add(format!("{prefix}.steps"), Tensor::zeros(&[1]), false)?,
            channels,
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
        })
    }
}

/// Fixed target statistics (μ̄, σ̄), learnable offsets (Δμ, Δσ) and running
/// batch statistics. Identity targets (μ̄=0, σ̄=1) make the module a plain
/// learnable standardization.
#[derive(Clone, Debug)]
pub struct DnParams {
    pub target_mean: ParamId,
    pub target_std: ParamId,
    pub delta_mean: ParamId,
    pub delta_std: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub steps: ParamId,
    pub channels: usize,
    pub epsilon: f64,
    pub momentum: f64,
}

impl DnParams {
    /// `targets = None` gives identity targets. σ̄ is derived from the stats
    /// as `sqrt(var + ε)`; both target vectors are frozen buffers.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        targets: Option<&ChannelStats>,
    ) -> Result<DnParams> {
        let (tmean, tstd) = match targets {
            Some(stats) => {
                if stats.channels() != channels {
                    return Err(Error::shape(
                        "dn_init",
                        format!("{channels} target channels"),
                        format!("{}", stats.channels()),
                    ));
                }
                let mean = Tensor::from_vec(
                    &[channels],
                    stats.mean.iter().map(|v| T::from_f64(*v)).collect(),
                )?;
                let std = Tensor::from_vec(
                    &[channels],
                    stats
                        .std(DEFAULT_EPSILON)
                        .iter()
                        .map(|v| T::from_f64(*v))
                        .collect(),
                )?;
                (mean, std)
            }
            None => (Tensor::zeros(&[channels]), Tensor::full(&[channels], T::ONE)),
        };
        Ok(DnParams {
            target_mean: store.add(format!("{prefix}.target_mean"), tmean, false)?,
            target_std: store.add(format!("{prefix}.target_std"), tstd, false)?,
            delta_mean: store.add(format!("{prefix}.delta_mean"), Tensor::zeros(&[channels]), true)?,
            delta_std: store.add(
                format!("{prefix}.delta_std"),
                Tensor::full(&[channels], T::ONE),
                true,
            )?,
            running_mean: store.add(
                format!("{prefix}.running_mean"),
                Tensor::zeros(&[channels]),
                false,
            )?,
            running_var: store.add(
                format!("{prefix}.running_var"),
                Tensor::full(&[channels], T::ONE),
                false,
            )?,
            steps: store.add(format!("{prefix}.steps"), Tensor::zeros(&[1]), false)?,
            channels,
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
        })
    }
}

/// Standardize `x` per channel. Train mode uses batch statistics and
/// updates the running buffers; infer mode substitutes the running values.
/// Returns the normalized map.
fn standardize<T: Scalar>(
    tape: &mut Tape<T>,
    store: &mut ParamStore<T>,
    x: Var,
    running_mean: ParamId,
    running_var: ParamId,
    steps: ParamId,
    epsilon: f64,
    momentum: f64,
    mode: NormMode,
) -> Result<Var> {
    match mode {
        NormMode::Train => {
            let m = tape.channel_mean(x)?;
            let neg_m = tape.affine(m, -1.0, 0.0);
            let xc = tape.add_channel(x, neg_m)?;
            let sq = tape.mul(xc, xc)?;
            let var = tape.channel_mean(sq)?;
            let var_eps = tape.affine(var, 1.0, epsilon);
            let std = tape.sqrt(var_eps);
            let xhat = tape.div_channel(xc, std)?;

            // Running buffers move outside the graph.
            let batch_mean = tape.value(m).clone();
            let batch_var = tape.value(var).clone();
            let keep = T::from_f64(1.0 - momentum);
            let mom = T::from_f64(momentum);
            for (dst, src) in [(running_mean, batch_mean), (running_var, batch_var)] {
                let buf = store.value_mut(dst);
                for (r, b) in buf.data_mut().iter_mut().zip(src.data()) {
                    *r = keep * *r + mom * *b;
                }
            }
            let s = store.value_mut(steps);
            s.data_mut()[0] += T::ONE;
            Ok(xhat)
        }
        NormMode::Infer => {
            if store.value(steps).data()[0].to_f64() == 0.0 {
                return Err(Error::invalid(
                    "inference requested before any running-statistics update",
                ));
            }
            let mean = store.value(running_mean).clone();
            let std = Tensor::from_vec(
                &[store.value(running_var).len()],
                store
                    .value(running_var)
                    .data()
                    .iter()
                    .map(|v| T::from_f64((v.to_f64() + epsilon).sqrt()))
                    .collect(),
            )?;
            let neg_mean = tape.constant(mean.map(|v| -v));
            let std_c = tape.constant(std);
            let xc = tape.add_channel(x, neg_mean)?;
            tape.div_channel(xc, std_c)
        }
    }
}

/// Batch normalization: `y = γ (x − μ)/σ + β`.
pub fn bn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &mut ParamStore<T>,
    x: Var,
    p: &BnParams,
    mode: NormMode,
) -> Result<Var> {
    check_channels(tape, x, p.channels, "bn_forward")?;
    let xhat = standardize(
        tape,
        store,
        x,
        p.running_mean,
        p.running_var,
        p.steps,
        p.epsilon,
        p.momentum,
        mode,
    )?;
    let gamma = tape.param(store, p.gamma);
    let beta = tape.param(store, p.beta);
    let scaled = tape.mul_channel(xhat, gamma)?;
    tape.add_channel(scaled, beta)
}

/// Adaptive batch normalization: normalize with fixed target-domain
/// statistics instead of batch statistics: `y = γ (x − μ̄)/σ̄ + β`.
pub fn adabn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    target: &ChannelStats,
    epsilon: f64,
) -> Result<Var> {
    check_channels(tape, x, target.channels(), "adabn_forward")?;
    let neg_mean = tape.constant(Tensor::from_vec(
        &[target.channels()],
        target.mean.iter().map(|v| T::from_f64(-*v)).collect(),
    )?);
    let std = tape.constant(Tensor::from_vec(
        &[target.channels()],
        target.std(epsilon).iter().map(|v| T::from_f64(*v)).collect(),
    )?);
    let xc = tape.add_channel(x, neg_mean)?;
    let xhat = tape.div_channel(xc, std)?;
    let scaled = tape.mul_channel(xhat, gamma)?;
    tape.add_channel(scaled, beta)
}

/// Dimension normalization: `y = Δσ (σ̄ (x − μ)/σ + μ̄) + Δμ`, batch
/// statistics in train mode, running statistics at inference.
pub fn dn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &mut ParamStore<T>,
    x: Var,
    p: &DnParams,
    mode: NormMode,
) -> Result<Var> {
    check_channels(tape, x, p.channels, "dn_forward")?;
    let xhat = standardize(
        tape,
        store,
        x,
        p.running_mean,
        p.running_var,
        p.steps,
        p.epsilon,
        p.momentum,
        mode,
    )?;
    let t_std = tape.param(store, p.target_std); // frozen buffer -> constant
    let t_mean = tape.param(store, p.target_mean);
    let d_std = tape.param(store, p.delta_std);
    let d_mean = tape.param(store, p.delta_mean);
    let rescaled = tape.mul_channel(xhat, t_std)?;
    let shifted = tape.add_channel(rescaled, t_mean)?;
    let modulated = tape.mul_channel(shifted, d_std)?;
    tape.add_channel(modulated, d_mean)
}

/// Either normalization, selected at model construction. The ablation
/// harness swaps dimension normalization for plain batch normalization
/// while keeping the surrounding convolutions.
#[derive(Clone, Debug)]
pub enum NormLayer {
    Dn(DnParams),
    Bn(BnParams),
}

impl NormLayer {
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: NormMode,
    ) -> Result<Var> {
        match self {
            NormLayer::Dn(p) => dn_forward(tape, store, x, p, mode),
            NormLayer::Bn(p) => bn_forward(tape, store, x, p, mode),
        }
    }

    pub fn is_dn(&self) -> bool {
        matches!(self, NormLayer::Dn(_))
    }
}

/// First distillation stage: transform the tapped 2D backbone feature into
/// a simulated 3D feature. Two convolutions (3×3 then 1×1, ReLU between)
/// map the channel width to the 3D feature width, the normalization aligns
/// the statistics to the 3D targets, and two more convolutions produce the
/// simulated feature.
#[derive(Clone, Debug)]
pub struct Dn1Block {
    pub conv_in_a: ConvLayer,
    pub conv_in_b: ConvLayer,
    pub norm: NormLayer,
    pub conv_out_a: ConvLayer,
    pub conv_out_b: ConvLayer,
}

impl Dn1Block {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c2d: usize,
        c3d: usize,
        norm: NormLayer,
        rng: &mut ChaCha8Rng,
    ) -> Result<Dn1Block> {
        Ok(Dn1Block {
            conv_in_a: ConvLayer::init(store, &format!("{prefix}.conv_in_a"), c2d, c3d, 3, 1, rng)?,
            conv_in_b: ConvLayer::init(store, &format!("{prefix}.conv_in_b"), c3d, c3d, 1, 1, rng)?,
            norm,
            conv_out_a: ConvLayer::init(store, &format!("{prefix}.conv_out_a"), c3d, c3d, 3, 1, rng)?,
            conv_out_b: ConvLayer::init(store, &format!("{prefix}.conv_out_b"), c3d, c3d, 1, 1, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        f2d: Var,
        mode: NormMode,
    ) -> Result<Var> {
        let a = self.conv_in_a.forward(tape, store, f2d)?;
        let a = tape.relu(a);
        let b = self.conv_in_b.forward(tape, store, a)?;
        let n = self.norm.forward(tape, store, b, mode)?;
        let c = self.conv_out_a.forward(tape, store, n)?;
        let c = tape.relu(c);
        self.conv_out_b.forward(tape, store, c)
    }
}

/// Second distillation stage: calibrate the simulated 3D feature back
/// toward the 2D feature statistics for concatenation. No pre-transform
/// convolution exists before the normalization.
#[derive(Clone, Debug)]
pub struct Dn2Block {
    pub norm: NormLayer,
    pub conv_out_a: ConvLayer,
    pub conv_out_b: ConvLayer,
}

impl Dn2Block {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c3d: usize,
        norm: NormLayer,
        rng: &mut ChaCha8Rng,
    ) -> Result<Dn2Block> {
        Ok(Dn2Block {
            norm,
            conv_out_a: ConvLayer::init(store, &format!("{prefix}.conv_out_a"), c3d, c3d, 3, 1, rng)?,
            conv_out_b: ConvLayer::init(store, &format!("{prefix}.conv_out_b"), c3d, c3d, 1, 1, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        f3d_sim: Var,
        mode: NormMode,
    ) -> Result<Var> {
        let n = self.norm.forward(tape, store, f3d_sim, mode)?;
        let c = self.conv_out_a.forward(tape, store, n)?;
        let c = tape.relu(c);
        self.conv_out_b.forward(tape, store, c)
    }

    /// The normalized feature before the output convolutions.
    pub fn forward_norm_only<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        f3d_sim: Var,
        mode: NormMode,
    ) -> Result<Var> {
        self.norm.forward(tape, store, f3d_sim, mode)
    }
}

fn check_channels<T: Scalar>(tape: &Tape<T>, x: Var, c: usize, op: &'static str) -> Result<()> {
    let (_, xc, _, _) = tape.value(x).dims4(op)?;
    if xc != c {
        return Err(Error::shape(op, format!("{c} channels"), format!("{xc}")));
    }
    Ok(())
}
