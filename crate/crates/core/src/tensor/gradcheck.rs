//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor};
use crate::error::Result;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per input leaf, over the coordinates checked.
    pub per_leaf_max: Vec<f64>,
    /// Coordinates checked per leaf.
    pub per_leaf_checked: Vec<usize>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Relative error with a floor that keeps near-zero pairs from blowing up.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Reverse-mode gradients of `f` at `inputs`, one vector per leaf.
pub fn analytic_gradients<F>(f: &F, inputs: &[(Vec<usize>, Vec<f64>)]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let g = Graph::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(shape, data)| g.leaf(data.clone(), shape, true))
        .collect();
    let loss = f(&leaves)?;
    loss.backward()?;
    Ok(leaves
        .iter()
        .map(|l| l.grad().expect("leaf gradient populated by backward"))
        .collect())
}

fn eval<F>(f: &F, inputs: &[(Vec<usize>, Vec<f64>)]) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let g = Graph::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(shape, data)| g.leaf(data.clone(), shape, false))
        .collect();
    Ok(f(&leaves)?.scalar_value())
}

/// Central finite differences of `f` at `inputs`, full dense evaluation.
pub fn numeric_gradients<F>(
    f: &F,
    inputs: &[(Vec<usize>, Vec<f64>)],
    eps: f64,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for li in 0..inputs.len() {
        let n = inputs[li].1.len();
        let mut grad = vec![0.0; n];
        for ci in 0..n {
            grad[ci] = fd_at(f, &mut work, li, ci, eps)?;
        }
        out.push(grad);
    }
    Ok(out)
}

fn fd_at<F>(
    f: &F,
    work: &mut [(Vec<usize>, Vec<f64>)],
    leaf: usize,
    coord: usize,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let orig = work[leaf].1[coord];
    work[leaf].1[coord] = orig + eps;
    let fp = eval(f, work)?;
    work[leaf].1[coord] = orig - eps;
    let fm = eval(f, work)?;
    work[leaf].1[coord] = orig;
    Ok((fp - fm) / (2.0 * eps))
}

/// Check every coordinate of every leaf.
pub fn check_gradients<F>(
    f: F,
    inputs: &[(Vec<usize>, Vec<f64>)],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    check_gradients_sampled(f, inputs, eps, tol, usize::MAX, 0)
}

/// Check up to `max_per_leaf` coordinates per leaf, chosen with a seeded
/// shuffle. Keeps whole-model checks affordable.
pub fn check_gradients_sampled<F>(
    f: F,
    inputs: &[(Vec<usize>, Vec<f64>)],
    eps: f64,
    tol: f64,
    max_per_leaf: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = inputs.to_vec();
    let mut per_leaf_max = Vec::with_capacity(inputs.len());
    let mut per_leaf_checked = Vec::with_capacity(inputs.len());
    let mut global_max: f64 = 0.0;
    for (li, (_, data)) in inputs.iter().enumerate() {
        let mut coords: Vec<usize> = (0..data.len()).collect();
        if coords.len() > max_per_leaf {
            coords.shuffle(&mut rng);
            coords.truncate(max_per_leaf);
        }
        let mut leaf_max: f64 = 0.0;
        for &ci in &coords {
            let n = fd_at(&f, &mut work, li, ci, eps)?;
            leaf_max = leaf_max.max(relative_error(analytic[li][ci], n));
        }
        global_max = global_max.max(leaf_max);
        per_leaf_checked.push(coords.len());
        per_leaf_max.push(leaf_max);
    }
    Ok(GradCheckReport {
        per_leaf_max,
        per_leaf_checked,
        max_rel_err: global_max,
        tol,
    })
}
