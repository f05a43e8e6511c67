//! Central finite-difference gradient checking at 64-bit precision.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Result of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Max over all entries of `|analytic − numeric| / max(1, |numeric|)`.
    pub max_rel_err: f64,
    pub entries: usize,
}

/// Builds a scalar loss from graph leaves created for `inputs`.
pub type LossFn<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Compare `backward` against central differences with step `h` for every
/// entry of every input.
pub fn check_gradients(inputs: &[Tensor<f64>], h: f64, loss: &LossFn<'_>) -> Result<GradCheck> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let l = loss(&mut g, &vars)?;
    g.backward(l)?;
    let analytic: Vec<Tensor<f64>> =
        vars.iter().map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let l = loss(&mut g, &vars)?;
        Ok(g.value(l).item())
    };

    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let err = (analytic[i].data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            entries += 1;
        }
    }
    Ok(GradCheck { max_rel_err: worst, entries })
}
