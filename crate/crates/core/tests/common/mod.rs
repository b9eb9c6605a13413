//! Shared helpers for the integration tests: random instances, finite
//! differences through a parameter store, and loop-based reference
//! evaluations.
#![allow(dead_code)]

pub mod gradcases;
pub mod oracle;
pub mod suites;

use pcflow_autograd::check::relative_error;
use pcflow_autograd::{Tensor, Var};
use pcflow_core::geom::PointSet;
use pcflow_core::nn::{Ctx, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut r = rng(seed);
    (0..n).map(|_| [r.random(), r.random(), r.random()]).collect()
}

pub fn cloud(n: usize, seed: u64) -> PointSet {
    PointSet::new(random_points(n, seed)).unwrap()
}

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect())
}

/// Replaces every parameter with uniform noise in `[-scale, scale]`, so that
/// zero-initialised heads and biases take part in checks.
pub fn randomize(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = r.random_range(-scale..scale);
        }
    }
}

/// Scalar projection of `out` onto a fixed random direction.
pub fn project(ctx: &mut Ctx, out: Var, seed: u64) -> Var {
    let (r, c) = ctx.value(out).shape();
    let w = ctx.constant(random_tensor(r, c, seed));
    let p = ctx.graph.mul(out, w);
    ctx.graph.sum(p)
}

const STEP: f64 = 1e-5;
const MIN_STEP: f64 = 1e-9;

/// Largest relative error between reverse-mode and central-difference
/// gradients over every entry of every input and every parameter.
pub fn grad_check<F>(store: &ParamStore, inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Ctx, &[Var]) -> Var,
{
    let eval = |s: &ParamStore, xs: &[Tensor]| -> (f64, u64) {
        let mut ctx = Ctx::new(s, false);
        let vars: Vec<Var> = xs.iter().map(|t| ctx.graph.input(t.clone())).collect();
        let out = build(&mut ctx, &vars);
        (ctx.value(out).item(), ctx.graph.branch_signature())
    };
    let mut ctx = Ctx::new(store, true);
    let vars: Vec<Var> = inputs.iter().map(|t| ctx.graph.input(t.clone())).collect();
    let out = build(&mut ctx, &vars);
    assert_eq!(ctx.value(out).shape(), (1, 1), "grad_check needs a scalar");
    let signature = ctx.graph.branch_signature();
    let grads = ctx.graph.backward(out);
    let input_grads: Vec<Tensor> = vars.iter().zip(inputs).map(|(v, t)| grads.get_or_zeros(*v, t)).collect();
    let param_grads = ctx.param_gradients(out);

    let numeric = |perturb: &dyn Fn(f64) -> (f64, u64)| -> f64 {
        let mut h = STEP;
        loop {
            let (plus, sp) = perturb(h);
            let (minus, sm) = perturb(-h);
            if (sp == signature && sm == signature) || h <= MIN_STEP {
                return (plus - minus) / (2.0 * h);
            }
            h *= 0.1;
        }
    };
    let mut worst: f64 = 0.0;
    for (k, g) in input_grads.iter().enumerate() {
        for e in 0..g.len() {
            let n = numeric(&|h| {
                let mut xs = inputs.to_vec();
                xs[k].data_mut()[e] += h;
                eval(store, &xs)
            });
            worst = worst.max(relative_error(g.data()[e], n));
        }
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, g) in ids.iter().zip(&param_grads) {
        for e in 0..g.len() {
            let n = numeric(&|h| {
                let mut s = store.clone();
                s.get_mut(*id).data_mut()[e] += h;
                eval(&s, inputs)
            });
            worst = worst.max(relative_error(g.data()[e], n));
        }
    }
    worst
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    let d = max_abs_diff(a, b);
    assert!(d <= tol, "max difference {d} exceeds {tol}");
}
