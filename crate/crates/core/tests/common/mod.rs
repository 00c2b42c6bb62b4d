//! Shared test machinery: the central finite-difference gradient oracle.
//!
//! The oracle is independent of the reverse-mode path it checks: it only
//! ever calls the forward computation at perturbed parameter values.

use xmd_core::tensorcore::{ParamStore, Tape, Var};
use xmd_core::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Forward builder: assembles the computation on a fresh tape and returns
/// the scalar loss node. May mutate running statistics in the store (the
/// loss in train mode never reads them).
pub type BuildFn<'a> = dyn Fn(&mut Tape<f64>, &mut ParamStore<f64>) -> Result<Var> + 'a;

fn eval_loss(build: &BuildFn, store: &mut ParamStore<f64>) -> f64 {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store).expect("forward construction failed");
    tape.value(loss).item()
}

/// Compare reverse-mode gradients against central finite differences over
/// every element of every trainable parameter. Parameters whose name
/// starts with one of `frozen_prefixes` must carry an exactly-zero
/// analytic gradient and are excluded from differencing.
///
/// Returns the worst relative error observed (`|a - n| / max(1, |a|, |n|)`).
pub fn gradcheck(
    label: &str,
    store: &mut ParamStore<f64>,
    build: &BuildFn,
    frozen_prefixes: &[&str],
) -> f64 {
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store).expect("forward construction failed");
    tape.finish(loss, store).expect("backward failed");

    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.grad.data().to_vec()))
        .collect();

    let mut worst = 0.0f64;
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.value.len())).collect();
    for (id, name, len) in ids {
        let frozen = frozen_prefixes.iter().any(|p| name.starts_with(p));
        let grads = &analytic.iter().find(|(n, _)| *n == name).unwrap().1;
        if frozen {
            for (i, g) in grads.iter().enumerate() {
                assert_eq!(*g, 0.0, "{label}: frozen {name}[{i}] has gradient {g}");
            }
            continue;
        }
        if !store.entry(id).trainable {
            continue;
        }
        for i in 0..len {
            let a = grads[i];
            let mut err = f64::INFINITY;
            // An activation kink inside the difference interval produces a
            // bogus mismatch; shrinking the step resolves it, while a real
            // gradient bug persists at every step size.
            for step in [FD_STEP, FD_STEP / 16.0, FD_STEP / 256.0] {
                let original = store.value(id).data()[i];
                store.value_mut(id).data_mut()[i] = original + step;
                let plus = eval_loss(build, store);
                store.value_mut(id).data_mut()[i] = original - step;
                let minus = eval_loss(build, store);
                store.value_mut(id).data_mut()[i] = original;
                let numeric = (plus - minus) / (2.0 * step);
                err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
                if err < FD_TOL {
                    break;
                }
            }
            assert!(
                err < FD_TOL,
                "{label}: {name}[{i}] analytic {a} (rel err {err:.3e})"
            );
            worst = worst.max(err);
        }
    }
    worst
}
