//! Shared test harness: a central finite-difference oracle for gradients.
//!
//! The oracle re-evaluates the loss through a freshly built graph for every
//! perturbed parameter, so it is independent of the backward pass it checks.

use fedconv::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

/// Relative error with the customary guard for small magnitudes:
/// `|a - b| / max(1, |a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Check analytic gradients of `build` against central finite differences on
/// every entry of every leaf. Returns the worst relative error observed.
///
/// `build` receives the leaves already installed on a fresh graph and must
/// return a scalar loss node.
pub fn check_gradients<F>(build: F, leaves: &[Tensor]) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    // analytic pass
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|t| g.leaf(t.clone().with_grad()))
        .collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).expect("backward");

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item().expect("scalar loss")
    };

    let mut worst = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(vars[li])
            .unwrap_or_else(|| panic!("no gradient for leaf {li}"));
        for idx in 0..leaf.len() {
            let mut plus = leaves.to_vec();
            let mut minus = leaves.to_vec();
            let mut pd = plus[li].data().to_vec();
            let mut md = minus[li].data().to_vec();
            pd[idx] += FD_STEP;
            md[idx] -= FD_STEP;
            plus[li] = Tensor::new(leaf.shape().to_vec(), pd).unwrap();
            minus[li] = Tensor::new(leaf.shape().to_vec(), md).unwrap();
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(fd, analytic.data()[idx]));
        }
    }
    worst
}

/// Uniform random tensor in `[lo, hi)` from a seeded generator.
pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = fedconv::rng::rng_from(seed, "fd-test");
    Tensor::rand_uniform(shape, lo, hi, &mut rng)
}

/// Random tensor with magnitudes bounded away from zero, for ops with a
/// kink at the origin (ReLU, MLR).
pub fn rand_tensor_away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let t = rand_tensor(shape, -1.0, 1.0, seed);
    t.map(|x| if x >= 0.0 { x + 0.05 } else { x - 0.05 })
}
