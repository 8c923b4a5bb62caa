//! Central finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a − n| / max(1e-8, |a| + |n|)`.
    pub max_relative_error: f64,
    /// `(input, coordinate)` attaining the maximum.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Checks every coordinate of every input. Returns the max relative error.
pub fn check_gradients<F>(op: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    Ok(check_gradients_at(op, inputs, eps, &coords)?.max_relative_error)
}

/// Checks only the listed `(input, coordinate)` pairs.
///
/// Non-scalar outputs are contracted with a fixed pseudo-random weight
/// vector, so every output element contributes to the checked scalar.
pub fn check_gradients_at<F>(
    op: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        let n = g.value(out).len();
        let loss = if n == 1 {
            out
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
            let w = Tensor::from_fn(g.shape(out), |_| rng.gen_range(-1.0..1.0));
            let w = g.constant(w);
            let prod = g.mul(out, w)?;
            g.sum(prod)
        };
        Ok((g, vars, loss))
    };

    let (graph, vars, loss) = eval(inputs)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get_or_zeros(*v, t.len()))
        .collect();
    drop(graph);

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for &(i, j) in coords {
        if i >= inputs.len() || j >= inputs[i].len() {
            return Err(Error::Index(format!("gradient check coordinate ({}, {})", i, j)));
        }
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let (gp, _, lp) = eval(&work)?;
        let fp = gp.value(lp).data()[0];
        work[i].data_mut()[j] = orig - eps;
        let (gm, _, lm) = eval(&work)?;
        let fm = gm.value(lm).data()[0];
        work[i].data_mut()[j] = orig;

        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i][j];
        if !a.is_finite() || !numeric.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at input {} coordinate {}",
                i, j
            )));
        }
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        report.coordinates += 1;
        if rel > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = rel.max(report.max_relative_error);
            report.worst = Some((i, j));
        }
    }
    Ok(report)
}
