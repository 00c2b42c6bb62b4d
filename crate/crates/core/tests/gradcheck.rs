//! Finite-difference validation of every differentiable primitive and all
//! four training objectives, over randomized configurations.

mod common;

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use common::gradcheck;
use xmd_core::dnorm::{
    adabn_forward, bn_forward, dn_forward, BnParams, ChannelStats, Dn1Block, Dn2Block, DnParams,
    NormLayer, NormMode,
};
use xmd_core::losses::{
    discriminator_loss, generator_adv_loss, paired_regression_loss, segmentation_loss, Reduction,
};
use xmd_core::models::{knn_indices, Discriminator, LinearLayer, ModelDims, ThreeDNet};
use xmd_core::rng::stream;
use xmd_core::tensorcore::{ConvSpec, Padding, ParamStore, Tape, Tensor, IGNORE_LABEL};

const CONFIGS: usize = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn proj(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arc<Tensor<f64>> {
    Arc::new(Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)))
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = stream(100, "gc-conv");
    for cfg in 0..CONFIGS {
        let (n, cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(3..6), rng.gen_range(3..6));
        let kernel = [1, 3][rng.gen_range(0..2)];
        let stride = [1, 2][rng.gen_range(0..2)];
        let spec = ConvSpec::new(kernel, stride, Padding::Same).unwrap();
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", rand_tensor(&mut rng, &[n, cin, h, w], 1.5), true).unwrap();
        let wt = store
            .add("w", rand_tensor(&mut rng, &[cout, cin, kernel, kernel], 1.0), true)
            .unwrap();
        let b = store.add("b", rand_tensor(&mut rng, &[cout], 0.5), true).unwrap();
        let ho = (h + 2 * spec.pad_size() - kernel) / stride + 1;
        let wo = (w + 2 * spec.pad_size() - kernel) / stride + 1;
        let p = proj(&mut rng, &[n, cout, ho, wo]);
        gradcheck(
            &format!("conv2d[{cfg}]"),
            &mut store,
            &|tape, store| {
                let xv = tape.param(store, x);
                let wv = tape.param(store, wt);
                let bv = tape.param(store, b);
                let y = tape.conv2d(xv, wv, bv, spec)?;
                tape.dot_const(y, Arc::clone(&p))
            },
            &[],
        );
    }
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = stream(101, "gc-linear");
    for cfg in 0..CONFIGS {
        let (rows, cin, cout) = (rng.gen_range(1..5), rng.gen_range(1..7), rng.gen_range(1..6));
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", rand_tensor(&mut rng, &[rows, cin], 1.5), true).unwrap();
        let w = store.add("w", rand_tensor(&mut rng, &[cin, cout], 1.0), true).unwrap();
        let b = store.add("b", rand_tensor(&mut rng, &[cout], 0.5), true).unwrap();
        let p = proj(&mut rng, &[rows, cout]);
        gradcheck(
            &format!("linear[{cfg}]"),
            &mut store,
            &|tape, store| {
                let xv = tape.param(store, x);
                let wv = tape.param(store, w);
                let bv = tape.param(store, b);
                let y = tape.linear(xv, wv, bv)?;
                tape.dot_const(y, Arc::clone(&p))
            },
            &[],
        );
    }
}

#[test]
fn activation_gradients_match_finite_differences() {
    let mut rng = stream(102, "gc-act");
    for cfg in 0..CONFIGS {
        let shape = [rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(2..5)];
        for kind in 0..3 {
            let mut store = ParamStore::<f64>::new();
            let x = store.add("x", rand_tensor(&mut rng, &shape, 2.0), true).unwrap();
            let p = proj(&mut rng, &shape);
            gradcheck(
                &format!("activation{kind}[{cfg}]"),
                &mut store,
                &|tape, store| {
                    let xv = tape.param(store, x);
                    let y = match kind {
                        0 => tape.relu(xv),
                        1 => tape.leaky_relu(xv, 0.01),
                        _ => tape.sigmoid(xv),
                    };
                    tape.dot_const(y, Arc::clone(&p))
                },
                &[],
            );
        }
    }
}

#[test]
fn sigmoid_slope_at_zero_is_one_quarter() {
    // Central finite difference at the origin.
    let eval = |x: f64| {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::scalar(x));
        let s = tape.sigmoid(v);
        tape.value(s).item()
    };
    let h = 1e-6;
    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
    assert!((numeric - 0.25).abs() < 1e-6);

    let mut tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(v);
    let loss = tape.dot_const(s, Arc::new(Tensor::scalar(1.0))).unwrap();
    tape.backward(loss).unwrap();
    assert!((tape.grad_of(v).unwrap().item() - 0.25).abs() < 1e-12);
}

#[test]
fn bn_and_adabn_gradients_match_finite_differences() {
    let mut rng = stream(103, "gc-bn");
    for cfg in 0..CONFIGS {
        let (n, c) = (rng.gen_range(2..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(2..4), rng.gen_range(2..4));
        let mut store = ParamStore::<f64>::new();
        let bn = BnParams::init(&mut store, "bn", c).unwrap();
        let x = store.add("x", rand_tensor(&mut rng, &[n, c, h, w], 1.5), true).unwrap();
        let p = proj(&mut rng, &[n, c, h, w]);
        gradcheck(
            &format!("bn_forward[{cfg}]"),
            &mut store,
            &|tape, store| {
                let xv = tape.param(store, x);
                let y = bn_forward(tape, store, xv, &bn, NormMode::Train)?;
                tape.dot_const(y, Arc::clone(&p))
            },
            &[],
        );

        let mut store = ParamStore::<f64>::new();
        let gamma = store.add("gamma", rand_tensor(&mut rng, &[c], 1.0), true).unwrap();
        let beta = store.add("beta", rand_tensor(&mut rng, &[c], 1.0), true).unwrap();
        let x = store.add("x", rand_tensor(&mut rng, &[n, c, h, w], 1.5), true).unwrap();
        let target = ChannelStats {
            mean: (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            var: (0..c).map(|_| rng.gen_range(0.2..2.0)).collect(),
            count: 100,
        };
        let p = proj(&mut rng, &[n, c, h, w]);
        gradcheck(
            &format!("adabn_forward[{cfg}]"),
            &mut store,
            &|tape, store| {
                let xv = tape.param(store, x);
                let gv = tape.param(store, gamma);
                let bv = tape.param(store, beta);
                let y = adabn_forward(tape, xv, gv, bv, &target, 1e-5)?;
                tape.dot_const(y, Arc::clone(&p))
            },
            &[],
        );
    }
}

#[test]
fn dn_gradients_match_finite_differences() {
    let mut rng = stream(104, "gc-dn");
    for cfg in 0..CONFIGS {
        let (n, c) = (rng.gen_range(2..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(2..4), rng.gen_range(2..4));
        let targets = ChannelStats {
            mean: (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            var: (0..c).map(|_| rng.gen_range(0.2..3.0)).collect(),
            count: 64,
        };
        let mut store = ParamStore::<f64>::new();
        let dn = DnParams::init(&mut store, "dn", c, Some(&targets)).unwrap();
        let x = store.add("x", rand_tensor(&mut rng, &[n, c, h, w], 1.5), true).unwrap();
        let p = proj(&mut rng, &[n, c, h, w]);
        gradcheck(
            &format!("dn_forward[{cfg}]"),
            &mut store,
            &|tape, store| {
                let xv = tape.param(store, x);
                let y = dn_forward(tape, store, xv, &dn, NormMode::Train)?;
                tape.dot_const(y, Arc::clone(&p))
            },
            &[],
        );
    }
}

#[test]
fn dn_block_gradients_match_finite_differences() {
    let mut rng = stream(105, "gc-blocks");
    for cfg in 0..CONFIGS {
        let (c2d, c3d) = (rng.gen_range(2..4), rng.gen_range(2..4));
        let (n, hw) = (2usize, 3usize);
        let targets = ChannelStats {
            mean: (0..c3d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            var: (0..c3d).map(|_| rng.gen_range(0.3..2.0)).collect(),
            count: 64,
        };
        let mut store = ParamStore::<f64>::new();
        let mut init_rng = stream(200 + cfg as u64, "gc-block-init");
        let norm = NormLayer::Dn(DnParams::init(&mut store, "dn1.norm", c3d, Some(&targets)).unwrap());
        let block = Dn1Block::init(&mut store, "dn1", c2d, c3d, norm, &mut init_rng).unwrap();
        let x = store
            .add("x", rand_tensor(&mut rng, &[n, c2d, hw, hw], 1.0), true)
            .unwrap();
        let p = proj(&mut rng, &[n, c3d, hw, hw]);
        gradcheck(
            &format!("dn1_block[{cfg}]"),
            &mut store,
            &|tape, store| {
                let xv = tape.param(store, x);
                let y = block.forward(tape, store, xv, NormMode::Train)?;
                tape.dot_const(y, Arc::clone(&p))
            },
            &[],
        );

        let mut store = ParamStore::<f64>::new();
        let norm = NormLayer::Dn(DnParams::init(&mut store, "dn2.norm", c3d, Some(&targets)).unwrap());
        let block = Dn2Block::init(&mut store, "dn2", c3d, norm, &mut init_rng).unwrap();
        let x = store
            .add("x", rand_tensor(&mut rng, &[n, c3d, hw, hw], 1.0), true)
            .unwrap();
        let p = proj(&mut rng, &[n, c3d, hw, hw]);
        gradcheck(
            &format!("dn2_block[{cfg}]"),
            &mut store,
            &|tape, store| {
                let xv = tape.param(store, x);
                let y = block.forward(tape, store, xv, NormMode::Train)?;
                tape.dot_const(y, Arc::clone(&p))
            },
            &[],
        );
    }
}

#[test]
fn paired_regression_gradients_match_finite_differences() {
    let mut rng = stream(106, "gc-lp");
    for cfg in 0..CONFIGS {
        let (n, c) = (rng.gen_range(1..3), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(2..4), rng.gen_range(2..4));
        let mut store = ParamStore::<f64>::new();
        let x = store.add("sim", rand_tensor(&mut rng, &[n, c, h, w], 1.5), true).unwrap();
        let target = Arc::new(rand_tensor(&mut rng, &[n, c, h, w], 1.5));
        let mask: Arc<Vec<bool>> = Arc::new((0..n * h * w).map(|_| rng.gen_bool(0.6)).collect());
        let reduction = if cfg % 2 == 0 { Reduction::Mean } else { Reduction::Sum };
        gradcheck(
            &format!("paired_regression[{cfg}]"),
            &mut store,
            &|tape, store| {
                let xv = tape.param(store, x);
                let term = paired_regression_loss(
                    tape,
                    xv,
                    Arc::clone(&target),
                    Arc::clone(&mask),
                    reduction,
                )?;
                Ok(term.var)
            },
            &[],
        );
    }
}

#[test]
fn segmentation_gradients_match_finite_differences() {
    let mut rng = stream(107, "gc-ls");
    for cfg in 0..CONFIGS {
        let (n, c) = (rng.gen_range(1..3), rng.gen_range(2..5));
        let (h, w) = (rng.gen_range(2..4), rng.gen_range(2..4));
        let mut store = ParamStore::<f64>::new();
        let x = store
            .add("logits", rand_tensor(&mut rng, &[n, c, h, w], 2.0), true)
            .unwrap();
        let labels: Arc<Vec<u8>> = Arc::new(
            (0..n * h * w)
                .map(|_| {
                    if rng.gen_bool(0.15) {
                        IGNORE_LABEL
                    } else {
                        rng.gen_range(0..c) as u8
                    }
                })
                .collect(),
        );
        let reduction = if cfg % 2 == 0 { Reduction::Mean } else { Reduction::Sum };
        gradcheck(
            &format!("segmentation[{cfg}]"),
            &mut store,
            &|tape, store| {
                let xv = tape.param(store, x);
                let term = segmentation_loss(tape, xv, Arc::clone(&labels), reduction)?;
                Ok(term.var)
            },
            &[],
        );
    }
}

#[test]
fn discriminator_loss_gradients_match_finite_differences() {
    let mut rng = stream(108, "gc-eq3");
    for cfg in 0..CONFIGS {
        let cin = rng.gen_range(2..5);
        let mut store = ParamStore::<f64>::new();
        let d = Discriminator::init(&mut store, cin, 0, 300 + cfg as u64).unwrap();
        let n_sim = rng.gen_range(1..4);
        let n_real = rng.gen_range(1..4);
        let sim = rand_tensor(&mut rng, &[n_sim, cin], 1.0);
        let real = rand_tensor(&mut rng, &[n_real, cin], 1.0);
        gradcheck(
            &format!("discriminator_loss[{cfg}]"),
            &mut store,
            &|tape, store| {
                let term = discriminator_loss(tape, store, &d, &sim, &real)?;
                Ok(term.var)
            },
            &[],
        );
    }
}

#[test]
fn generator_loss_gradients_match_finite_differences() {
    let mut rng = stream(109, "gc-eq4");
    for cfg in 0..CONFIGS {
        let c = rng.gen_range(2..4);
        let (n, h, w) = (1usize, 2usize, rng.gen_range(2..4));
        let mut store = ParamStore::<f64>::new();
        let ds: Vec<Discriminator> = (0..2)
            .map(|cat| Discriminator::init(&mut store, c, cat, 400 + cfg as u64).unwrap())
            .collect();
        let x = store.add("sim", rand_tensor(&mut rng, &[n, c, h, w], 1.0), true).unwrap();
        let cells: Vec<u8> = (0..n * h * w)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    IGNORE_LABEL
                } else {
                    rng.gen_range(0..2u8)
                }
            })
            .collect();
        gradcheck(
            &format!("generator_loss[{cfg}]"),
            &mut store,
            &|tape, store| {
                let xv = tape.param(store, x);
                let term = generator_adv_loss(tape, store, &ds, xv, &cells)?;
                Ok(term.var)
            },
            // The discriminators are frozen inside the generator objective.
            &["d0.", "d1."],
        );
    }
}

#[test]
fn point_network_gradients_match_finite_differences() {
    // Covers the neighbor max-pool and the per-point MLP end to end.
    let mut rng = stream(110, "gc-3d");
    for cfg in 0..6 {
        let dims = ModelDims {
            c2d: 4,
            c3d: 3,
            num_classes: 3,
            knn: 3,
        };
        let mut store = ParamStore::<f64>::new();
        let net = ThreeDNet::init(&mut store, dims, 500 + cfg as u64).unwrap();
        let p = 10usize;
        let inputs = rand_tensor(&mut rng, &[p, 6], 1.0);
        let positions: Vec<[f32; 3]> = (0..p)
            .map(|i| {
                [
                    inputs.data()[i * 6] as f32,
                    inputs.data()[i * 6 + 1] as f32,
                    inputs.data()[i * 6 + 2] as f32,
                ]
            })
            .collect();
        let nbrs = knn_indices(&positions, dims.knn);
        let labels: Arc<Vec<u8>> = Arc::new((0..p).map(|_| rng.gen_range(0..3u8)).collect());
        gradcheck(
            &format!("threed_net[{cfg}]"),
            &mut store,
            &|tape, store| {
                let out = net.forward(tape, store, &inputs, &nbrs)?;
                tape.softmax_cross_entropy(out.point_logits, Arc::clone(&labels), true)
            },
            &[],
        );
    }
}

#[test]
fn linear_layer_helper_matches_finite_differences() {
    let mut rng = stream(111, "gc-ll");
    for cfg in 0..CONFIGS {
        let (cin, cout) = (rng.gen_range(2..5), rng.gen_range(1..4));
        let mut store = ParamStore::<f64>::new();
        let mut init_rng = stream(600 + cfg as u64, "gc-ll-init");
        let layer = LinearLayer::init(&mut store, "fc", cin, cout, 2.0, &mut init_rng).unwrap();
        let x = store.add("x", rand_tensor(&mut rng, &[3, cin], 1.0), true).unwrap();
        let p = proj(&mut rng, &[3, cout]);
        gradcheck(
            &format!("linear_layer[{cfg}]"),
            &mut store,
            &|tape, store| {
                let xv = tape.param(store, x);
                let y = layer.forward(tape, store, xv, false)?;
                tape.dot_const(y, Arc::clone(&p))
            },
            &[],
        );
    }
}
