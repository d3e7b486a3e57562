//! Central finite-difference gradient checking.
//!
//! Only forward values are used to build the numerical gradient, so the check
//! is independent of every backward rule it verifies.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Check at most this many entries per input (chosen at random), or all.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, max_entries: None, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` per input,
    /// over the checked entries.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub entries_checked: usize,
}

/// Checks every entry of every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_gradients_with(inputs, &GradCheckOptions::default(), f).expect("forward failed")
}

pub fn check_gradients_with<F>(inputs: &[Tensor], opts: &GradCheckOptions, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.constant(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = inputs.to_vec();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut entries_checked = 0;
    for (k, &var) in vars.iter().enumerate() {
        let n = inputs[k].len();
        let zeros = vec![0.0; n];
        let analytic = g.grad(var).unwrap_or(&zeros).to_vec();
        let picks: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &i in &picks {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + opts.step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - opts.step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            diff += (analytic[i] - numeric).powi(2);
            na += analytic[i].powi(2);
            nn += numeric.powi(2);
        }
        entries_checked += picks.len();
        let scale = na.sqrt().max(nn.sqrt());
        rel_errors.push(if scale > 0.0 { diff.sqrt() / scale } else { 0.0 });
    }
    let max_rel_error = rel_errors.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheck { rel_errors, max_rel_error, entries_checked })
}
