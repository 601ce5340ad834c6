//! Finite-difference helpers shared by unit tests.

use crate::autodiff::{Tape, Var};
use crate::nn::{Bindings, ParamStore};

/// Compares the tape gradient of `build` against central differences for
/// every scalar of every parameter. Returns the worst relative error, using
/// `max(|numeric|, |analytic|, floor)` as the denominator.
pub fn store_fd_error(
    store: &ParamStore<f64>,
    build: &dyn Fn(&mut Tape<f64>, &Bindings) -> Var,
    eps: f64,
    floor: f64,
) -> f64 {
    store_fd_error_where(store, build, eps, floor, &|_| true)
}

/// Like [`store_fd_error`] but only probes parameters whose name passes
/// `include`.
pub fn store_fd_error_where(
    store: &ParamStore<f64>,
    build: &dyn Fn(&mut Tape<f64>, &Bindings) -> Var,
    eps: f64,
    floor: f64,
    include: &dyn Fn(&str) -> bool,
) -> f64 {
    let mut tape = Tape::new();
    let binds = store.bind(&mut tape);
    let loss = build(&mut tape, &binds);
    tape.backward(loss).unwrap();
    let mut with_grads = store.clone();
    with_grads.accumulate_grads(&tape, &binds);

    let eval = |s: &ParamStore<f64>| {
        let mut t = Tape::new();
        let b = s.bind_frozen(&mut t);
        let l = build(&mut t, &b);
        t.value(l).item().unwrap()
    };
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    let analytic: Vec<Vec<f64>> = with_grads.iter().map(|p| p.grad.clone().unwrap()).collect();
    for (k, grads) in analytic.iter().enumerate() {
        if !include(&store.iter().nth(k).unwrap().name) {
            continue;
        }
        for i in 0..grads.len() {
            let orig = probe.iter().nth(k).unwrap().value.data()[i];
            probe.iter_mut().nth(k).unwrap().value.data_mut()[i] = orig + eps;
            let up = eval(&probe);
            probe.iter_mut().nth(k).unwrap().value.data_mut()[i] = orig - eps;
            let down = eval(&probe);
            probe.iter_mut().nth(k).unwrap().value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (numeric - grads[i]).abs() / numeric.abs().max(grads[i].abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}
