#![allow(dead_code)]

use equigrasp_core::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, rng)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Builds `f` on a fresh tape and contracts its output with fixed weights.
fn scalarize(
    f: &dyn Fn(&Graph<f64>, &[Var]) -> Var,
    inputs: &[Tensor<f64>],
    weights: &mut Option<Tensor<f64>>,
    seed: u64,
) -> (Graph<f64>, Vec<Var>, Var) {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars);
    let shape = g.shape(out);
    let w = weights.get_or_insert_with(|| {
        let mut r = rng(seed ^ 0x5eed);
        Tensor::uniform(&shape, 0.5, 1.5, &mut r)
    });
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv);
    let loss = g.sum(prod);
    (g, vars, loss)
}

/// Largest relative L2 error between tape gradients and central
/// differences (h = 1e-5) over all inputs.
pub fn grad_check(f: impl Fn(&Graph<f64>, &[Var]) -> Var, inputs: Vec<Tensor<f64>>) -> f64 {
    let h = 1e-5;
    let mut weights = None;
    let (g, vars, loss) = scalarize(&f, &inputs, &mut weights, 7);
    let grads = g.backward(loss).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut moved = inputs.clone();
                moved[i].data_mut()[j] += delta;
                let (g2, _, l2) = scalarize(&f, &moved, &mut weights.clone(), 7);
                g2.value(l2).item()
            };
            *slot = (eval(h) - eval(-h)) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        let rel = if norm < 1e-10 { diff } else { diff / norm };
        worst = worst.max(rel);
    }
    worst
}

/// Central-difference Jacobian of a tape function with one input, one row
/// per output element.
pub fn numeric_jacobian(f: impl Fn(&Graph<f64>, Var) -> Var, x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let h = 1e-5;
    let eval = |t: &Tensor<f64>| {
        let g = Graph::new();
        let v = g.leaf(t.clone());
        let out = f(&g, v);
        g.value(out).data().to_vec()
    };
    let m = eval(x).len();
    let mut jac = vec![vec![0.0; x.numel()]; m];
    for j in 0..x.numel() {
        let (mut a, mut b) = (x.clone(), x.clone());
        a.data_mut()[j] += h;
        b.data_mut()[j] -= h;
        let (fa, fb) = (eval(&a), eval(&b));
        for i in 0..m {
            jac[i][j] = (fa[i] - fb[i]) / (2.0 * h);
        }
    }
    jac
}

pub fn random_point(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}
