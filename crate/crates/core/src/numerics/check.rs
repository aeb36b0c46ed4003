//! Independent finite-difference gradient oracle.
//!
//! The checker never touches the backward pass for its reference values:
//! it re-evaluates the function forward at perturbed inputs and compares
//! the central difference against the recorded gradient.

use super::graph::{Graph, Var};
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Max over elements of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|) for a scalar
/// function of a single tensor.
pub fn finite_diff_check<S, F>(f: F, x: &Tensor<S>, h: S) -> S
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Var,
{
    finite_diff_check_multi(|g, vars| f(g, vars[0]), &[x.clone()], h)
}

/// Same, for a scalar function of several tensors; returns the max error
/// over all inputs and elements.
pub fn finite_diff_check_multi<S, F>(f: F, xs: &[Tensor<S>], h: S) -> S
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Var,
{
    // autodiff gradients
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let loss = f(&mut g, &vars);
    assert_eq!(g.value(loss).numel(), 1, "finite_diff_check requires a scalar function");
    g.backward(loss).expect("backward");
    let grads: Vec<Tensor<S>> = vars
        .iter()
        .zip(xs.iter())
        .map(|(v, x)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let eval = |inputs: &[Tensor<S>]| -> S {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), false)).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };

    let mut worst = S::zero();
    for (xi, gx) in grads.iter().enumerate() {
        for e in 0..xs[xi].numel() {
            let mut plus: Vec<Tensor<S>> = xs.to_vec();
            plus[xi].data_mut()[e] += h;
            let mut minus: Vec<Tensor<S>> = xs.to_vec();
            minus[xi].data_mut()[e] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (S::two() * h);
            let ad = gx.data()[e];
            let denom = S::one().max(ad.abs()).max(fd.abs());
            let err = (ad - fd).abs() / denom;
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}
