//! Shared test utilities: the central-finite-difference gradient oracle and
//! small dataset fixtures.

#![allow(dead_code)]

use stereoface::tensor::params::ParamStore;
use stereoface::tensor::tape::{NodeId, Tape};

/// Central finite differences over every coordinate of every parameter in the
/// store, against the tape's analytic gradients.
///
/// Error metric per coordinate: `|analytic - fd| / max(1, |analytic|, |fd|)`,
/// i.e. absolute error for small derivatives, relative for large ones.
/// Returns the maximum over all coordinates.
pub fn fd_max_err<F>(store: &mut ParamStore, build: F, eps: f32) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> NodeId,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    tape.backward(loss).expect("backward");
    store.clear_grads();
    tape.accumulate_into(store);

    let ids: Vec<_> = store.ids().collect();
    let analytic: Vec<Vec<f32>> = ids
        .iter()
        .map(|&id| {
            store
                .get(id)
                .grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; store.get(id).len()])
        })
        .collect();

    let eval = |store: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store);
        tape.value(loss).item().expect("scalar loss") as f64
    };

    let mut max_err = 0.0f64;
    for (pi, &id) in ids.iter().enumerate() {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + eps;
            let up = eval(store);
            store.get_mut(id).data_mut()[k] = orig - eps;
            let down = eval(store);
            store.get_mut(id).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * eps as f64);
            let a = analytic[pi][k] as f64;
            let err = (a - fd).abs() / 1.0f64.max(a.abs()).max(fd.abs());
            if err > max_err {
                max_err = err;
            }
        }
    }
    max_err
}

/// Uniform values in [lo, hi] with a deterministic stream.
pub fn uniform_vec(rng: &mut rand_chacha::ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    use rand::Rng;
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero (avoids finite differences across the
/// PReLU / abs kinks): magnitude in [0.08, 1.0], random sign.
pub fn kink_free_vec(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f32> {
    use rand::Rng;
    (0..n)
        .map(|_| {
            let m: f32 = rng.random_range(0.08..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}
