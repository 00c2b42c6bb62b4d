//! The four training objectives and their weighted combination: paired
//! feature regression, segmentation cross-entropy, the per-category
//! discriminator objective and the generator-side adversarial objective.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::models::Discriminator;
use crate::tensorcore::{ParamStore, Scalar, Tape, Tensor, Var, IGNORE_LABEL};

/// Weights on the segmentation, paired-regression and adversarial terms.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub w_s: f64,
    pub w_p: f64,
    pub w_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_s: 1.0,
            w_p: 0.03,
            w_adv: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_s < 0.0 || self.w_p < 0.0 || self.w_adv < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

impl Reduction {
    fn mean(&self) -> bool {
        matches!(self, Reduction::Mean)
    }
}

/// Which auxiliary term joins the segmentation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxMode {
    Paired,
    Unpaired,
}

/// A scalar loss node plus a flag for degenerate batches (no covered
/// pixels, no labeled pixels, an empty vector set).
pub struct LossTerm {
    pub var: Var,
    pub flagged_empty: bool,
}

/// Squared L2 distance between the simulated and projected 3D features,
/// summed over channels at each covered pixel and reduced over covered
/// pixels. Differentiable w.r.t. the simulated features only; zero covered
/// pixels yield 0, flagged.
pub fn paired_regression_loss<T: Scalar>(
    tape: &mut Tape<T>,
    f3d_sim: Var,
    target: Arc<Tensor<T>>,
    mask: Arc<Vec<bool>>,
    reduction: Reduction,
) -> Result<LossTerm> {
    let flagged_empty = !mask.iter().any(|m| *m);
    let var = tape.masked_sq_diff(f3d_sim, target, mask, reduction.mean())?;
    Ok(LossTerm { var, flagged_empty })
}

/// Softmax cross-entropy over non-ignore pixels. All pixels ignored yields
/// 0, flagged.
pub fn segmentation_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: Arc<Vec<u8>>,
    reduction: Reduction,
) -> Result<LossTerm> {
    let flagged_empty = labels.iter().all(|l| *l == IGNORE_LABEL);
    let var = tape.softmax_cross_entropy(logits, labels, reduction.mean())?;
    Ok(LossTerm { var, flagged_empty })
}

/// Discriminator objective for one category, sum form:
/// `-Σ log(1 - D(sim)) - Σ log(D(real))`. Both vector sets are plain
/// values (detached); gradients flow into the discriminator only. An empty
/// set contributes nothing, flagged.
pub fn discriminator_loss<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    d: &Discriminator,
    sim_vectors: &Tensor<T>,
    real_vectors: &Tensor<T>,
) -> Result<LossTerm> {
    let (n_sim, _) = sim_vectors.dims2("discriminator_loss")?;
    let (n_real, _) = real_vectors.dims2("discriminator_loss")?;
    let flagged_empty = n_sim == 0 || n_real == 0;
    let mut terms = Vec::new();
    if n_sim > 0 {
        let sim = tape.constant(sim_vectors.clone());
        let z = d.logits(tape, store, sim, false)?;
        terms.push((tape.log_sigmoid_loss(z, false), 1.0));
    }
    if n_real > 0 {
        let real = tape.constant(real_vectors.clone());
        let z = d.logits(tape, store, real, false)?;
        terms.push((tape.log_sigmoid_loss(z, true), 1.0));
    }
    let var = tape.weighted_sum(&terms)?;
    Ok(LossTerm { var, flagged_empty })
}

/// Generator-side adversarial objective, sum form over labeled cells:
/// `-Σ_i Σ_c 1[label_i = c] log(D_c(f3d_sim_i))`. Discriminator parameters
/// are held frozen; gradients flow into the simulated features only.
/// `cell_labels` index the (batch, h, w) positions of `f3d_sim` row-major,
/// with [`IGNORE_LABEL`] skipping a cell. No labeled cell yields 0,
/// flagged.
pub fn generator_adv_loss<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    discriminators: &[Discriminator],
    f3d_sim: Var,
    cell_labels: &[u8],
) -> Result<LossTerm> {
    let (n, _, h, w) = tape.value(f3d_sim).dims4("generator_adv_loss")?;
    if cell_labels.len() != n * h * w {
        return Err(Error::shape(
            "generator_adv_loss",
            format!("{} cell labels", n * h * w),
            format!("{}", cell_labels.len()),
        ));
    }
    let mut terms = Vec::new();
    let mut any = false;
    for d in discriminators {
        let coords: Vec<(usize, usize, usize)> = cell_labels
            .iter()
            .enumerate()
            .filter(|(_, l)| usize::from(**l) == d.category)
            .map(|(i, _)| (i / (h * w), (i / w) % h, i % w))
            .collect();
        if coords.is_empty() {
            continue;
        }
        any = true;
        let rows = tape.gather_pixels(f3d_sim, Arc::new(coords))?;
        let z = d.logits(tape, store, rows, true)?;
        terms.push((tape.log_sigmoid_loss(z, true), 1.0));
    }
    let var = tape.weighted_sum(&terms)?;
    Ok(LossTerm {
        var,
        flagged_empty: !any,
    })
}

/// Combine the segmentation loss with exactly one auxiliary term:
/// `w_s·L_s + w_p·L_p` (paired) or `w_s·L_s + w_adv·L_adv` (unpaired).
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    l_s: Var,
    aux: Var,
    weights: &LossWeights,
    mode: AuxMode,
) -> Result<Var> {
    weights.validate()?;
    let aux_weight = match mode {
        AuxMode::Paired => weights.w_p,
        AuxMode::Unpaired => weights.w_adv,
    };
    tape.weighted_sum(&[(l_s, weights.w_s), (aux, aux_weight)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{discriminator_param_count, Discriminator};
    use crate::tensorcore::ParamStore;

    const LN2: f64 = std::f64::consts::LN_2;

    fn zeroed_discriminator(store: &mut ParamStore<f64>, cat: usize) -> Discriminator {
        let d = Discriminator::init(store, 2, cat, 7).unwrap();
        // Zero weights and biases give logits 0 and confidence 1/2.
        for i in 0..6 {
            for suffix in ["w", "b"] {
                let id = store.lookup(&format!("d{cat}.fc{i}.{suffix}")).unwrap();
                store.value_mut(id).data_mut().fill(0.0);
            }
        }
        d
    }

    #[test]
    fn paired_loss_zero_when_features_agree() {
        let mut tape = Tape::<f64>::new();
        let v = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let sim = tape.constant(v.clone());
        let term = paired_regression_loss(
            &mut tape,
            sim,
            Arc::new(v),
            Arc::new(vec![true; 4]),
            Reduction::Mean,
        )
        .unwrap();
        assert_eq!(tape.value(term.var).item(), 0.0);
        assert!(!term.flagged_empty);
    }

    #[test]
    fn paired_loss_single_pixel_value_is_five_under_both_reductions() {
        for reduction in [Reduction::Mean, Reduction::Sum] {
            let mut tape = Tape::<f64>::new();
            let sim = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
            let target = Arc::new(Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, 2.0]).unwrap());
            let term =
                paired_regression_loss(&mut tape, sim, target, Arc::new(vec![true]), reduction)
                    .unwrap();
            assert!((tape.value(term.var).item() - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn paired_loss_empty_mask_flags_and_returns_zero() {
        let mut tape = Tape::<f64>::new();
        let sim = tape.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64));
        let target = Arc::new(Tensor::zeros(&[1, 2, 2, 2]));
        let term = paired_regression_loss(
            &mut tape,
            sim,
            target,
            Arc::new(vec![false; 4]),
            Reduction::Mean,
        )
        .unwrap();
        assert_eq!(tape.value(term.var).item(), 0.0);
        assert!(term.flagged_empty);
    }

    #[test]
    fn segmentation_loss_point_values() {
        // Probability 1 on the true class -> 0.
        let mut tape = Tape::<f64>::new();
        let mut logits = Tensor::zeros(&[1, 2, 1, 1]);
        logits.data_mut()[0] = 60.0;
        let l = tape.constant(logits);
        let term = segmentation_loss(&mut tape, l, Arc::new(vec![0]), Reduction::Mean).unwrap();
        assert!(tape.value(term.var).item().abs() < 1e-12);

        // Equal logits over two classes -> ln 2.
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
        let term = segmentation_loss(&mut tape, l, Arc::new(vec![1]), Reduction::Mean).unwrap();
        assert!((tape.value(term.var).item() - LN2).abs() < 1e-12);

        // All pixels ignored -> 0, flagged.
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[1, 2, 2, 1]));
        let term = segmentation_loss(
            &mut tape,
            l,
            Arc::new(vec![IGNORE_LABEL, IGNORE_LABEL]),
            Reduction::Mean,
        )
        .unwrap();
        assert_eq!(tape.value(term.var).item(), 0.0);
        assert!(term.flagged_empty);
    }

    #[test]
    fn discriminator_loss_five_ln_two_at_half_confidence() {
        let mut store = ParamStore::<f64>::new();
        let d = zeroed_discriminator(&mut store, 0);
        let mut tape = Tape::new();
        let sim = Tensor::from_fn(&[2, 2], |i| i as f64);
        let real = Tensor::from_fn(&[3, 2], |i| -(i as f64));
        let term = discriminator_loss(&mut tape, &store, &d, &sim, &real).unwrap();
        assert!((tape.value(term.var).item() - 5.0 * LN2).abs() < 1e-9);
        assert!(!term.flagged_empty);
    }

    #[test]
    fn discriminator_loss_empty_sets_flag_and_vanish() {
        let mut store = ParamStore::<f64>::new();
        let d = zeroed_discriminator(&mut store, 1);
        let mut tape = Tape::new();
        let empty = Tensor::zeros(&[0, 2]);
        let term = discriminator_loss(&mut tape, &store, &d, &empty, &empty).unwrap();
        assert_eq!(tape.value(term.var).item(), 0.0);
        assert!(term.flagged_empty);
    }

    #[test]
    fn discriminator_loss_approaches_zero_under_perfect_separation() {
        // Strongly negative logits on sim, strongly positive on real.
        let mut store = ParamStore::<f64>::new();
        let d = Discriminator::init(&mut store, 1, 0, 3).unwrap();
        for i in 0..6 {
            let w = store.lookup(&format!("d0.fc{i}.w")).unwrap();
            let shape = store.value(w).shape().to_vec();
            *store.value_mut(w) = Tensor::from_fn(&shape, |k| {
                // Single-column propagation; large enough to saturate the
                // sigmoid through the LeakyReLU attenuation on negatives.
                if k % shape[1] == 0 { 1000.0 } else { 0.0 }
            });
        }
        let mut tape = Tape::new();
        let sim = Tensor::from_vec(&[1, 1], vec![-1.0]).unwrap();
        let real = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let term = discriminator_loss(&mut tape, &store, &d, &sim, &real).unwrap();
        assert!(tape.value(term.var).item() < 1e-6);
    }

    #[test]
    fn generator_loss_three_ln_two_and_zero_in_the_limit() {
        let mut store = ParamStore::<f64>::new();
        let d = zeroed_discriminator(&mut store, 0);
        let mut tape = Tape::new();
        let sim = tape.constant(Tensor::from_fn(&[1, 2, 3, 1], |i| i as f64 * 0.3));
        let term =
            generator_adv_loss(&mut tape, &store, &[d.clone()], sim, &[0, 0, 0]).unwrap();
        assert!((tape.value(term.var).item() - 3.0 * LN2).abs() < 1e-9);

        // Discriminator emitting ~1 on its inputs drives the loss to ~0.
        let final_b = store.lookup("d0.fc5.b").unwrap();
        store.value_mut(final_b).data_mut()[0] = 50.0;
        let mut tape = Tape::new();
        let sim = tape.constant(Tensor::from_fn(&[1, 2, 3, 1], |i| i as f64 * 0.3));
        let term = generator_adv_loss(&mut tape, &store, &[d], sim, &[0, 0, 0]).unwrap();
        assert!(tape.value(term.var).item() < 1e-6);
    }

    #[test]
    fn generator_loss_leaves_discriminator_gradients_at_zero() {
        let mut store = ParamStore::<f64>::new();
        let d = Discriminator::init(&mut store, 2, 0, 5).unwrap();
        let mut tape = Tape::new();
        let sim = tape.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 * 0.1));
        let term = generator_adv_loss(&mut tape, &store, &[d], sim, &[0, 0, 0, 0]).unwrap();
        tape.backward(term.var).unwrap();
        tape.apply_param_grads(&mut store);
        assert_eq!(store.grad_norm(), 0.0);
        // The simulated features do receive gradient.
        assert!(tape.grad_of(sim).is_some());
    }

    #[test]
    fn generator_loss_with_no_labeled_cells_flags() {
        let mut store = ParamStore::<f64>::new();
        let d = Discriminator::init(&mut store, 2, 0, 5).unwrap();
        let mut tape = Tape::new();
        let sim = tape.constant(Tensor::zeros(&[1, 2, 2, 1]));
        let term =
            generator_adv_loss(&mut tape, &store, &[d], sim, &[IGNORE_LABEL, 3]).unwrap();
        assert!(term.flagged_empty);
        assert_eq!(tape.value(term.var).item(), 0.0);
    }

    #[test]
    fn total_loss_weighting() {
        let weights = LossWeights::default();
        let mut tape = Tape::<f64>::new();
        let ls = tape.constant(Tensor::scalar(0.7));
        let lp = tape.constant(Tensor::scalar(5.0));
        let total = total_loss(&mut tape, ls, lp, &weights, AuxMode::Paired).unwrap();
        assert!((tape.value(total).item() - 0.85).abs() < 1e-12);

        // w_p = 0 degenerates to the bare segmentation objective.
        let zero_p = LossWeights { w_p: 0.0, ..weights };
        let total = total_loss(&mut tape, ls, lp, &zero_p, AuxMode::Paired).unwrap();
        assert!((tape.value(total).item() - 0.7).abs() < 1e-12);

        let ladv = tape.constant(Tensor::scalar(2.0));
        let total = total_loss(&mut tape, ls, ladv, &weights, AuxMode::Unpaired).unwrap();
        assert!((tape.value(total).item() - 0.72).abs() < 1e-12);
    }

    #[test]
    fn loss_nonnegativity_and_seg_monotonicity() {
        use rand::Rng;
        let mut rng = crate::rng::stream(3, "loss-props");
        for _ in 0..20 {
            let mut tape = Tape::<f64>::new();
            let sim = tape.constant(Tensor::from_fn(&[2, 3, 2, 2], |_| rng.gen_range(-2.0..2.0)));
            let target = Arc::new(Tensor::from_fn(&[2, 3, 2, 2], |_| rng.gen_range(-2.0..2.0)));
            let mask: Vec<bool> = (0..8).map(|_| rng.gen_bool(0.6)).collect();
            let term =
                paired_regression_loss(&mut tape, sim, target, Arc::new(mask), Reduction::Mean)
                    .unwrap();
            assert!(tape.value(term.var).item() >= 0.0);
        }

        // Raising the true-class logit lowers the loss.
        let labels = Arc::new(vec![1u8]);
        let mut prev = f64::INFINITY;
        for bump in 0..5 {
            let mut tape = Tape::<f64>::new();
            let mut logits = Tensor::zeros(&[1, 3, 1, 1]);
            logits.data_mut()[1] = bump as f64;
            let l = tape.constant(logits);
            let term =
                segmentation_loss(&mut tape, l, Arc::clone(&labels), Reduction::Mean).unwrap();
            let v = tape.value(term.var).item();
            assert!(v >= 0.0 && v < prev);
            prev = v;
        }
    }

    #[test]
    fn discriminator_loss_touches_only_discriminator_parameters() {
        let mut store = ParamStore::<f64>::new();
        let d = Discriminator::init(&mut store, 2, 0, 5).unwrap();
        let other = store
            .add("unrelated.w", Tensor::full(&[3], 1.0), true)
            .unwrap();
        let mut tape = Tape::new();
        let sim = Tensor::from_fn(&[4, 2], |i| i as f64 * 0.25);
        let real = Tensor::from_fn(&[4, 2], |i| 1.0 - i as f64 * 0.25);
        let term = discriminator_loss(&mut tape, &store, &d, &sim, &real).unwrap();
        tape.finish(term.var, &mut store).unwrap();
        assert!(store.grad_norm() > 0.0);
        assert_eq!(store.grad(other).data(), &[0.0, 0.0, 0.0]);
        let _ = discriminator_param_count(2);
    }
}
