//! Central-difference verification of analytic backward passes.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst entry within input `worst_input`.
    pub worst_index: usize,
    pub worst_input: usize,
    pub checked: usize,
    /// Entries skipped because the one-sided slopes disagree (a kink of the function).
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Inputs larger than this are checked on a seeded random subset of entries.
    pub max_entries_per_input: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-4, max_entries_per_input: 48, seed: 7 }
    }
}

/// Checks `f` at `inputs`. The output of `f` is reduced to a scalar with a fixed random
/// cotangent, so vector-valued ops are covered by a single vector-Jacobian product.
///
/// The relative error of one entry is `|a - n| / max(|a|, |n|, 1e-3 * s)` where `s` is the
/// largest gradient magnitude seen in that input; the floor keeps entries whose true
/// gradient is zero from dividing by roundoff.
pub fn grad_check<F>(op_name: &str, inputs: &[Tensor<f64>], opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eval = |vals: &[Tensor<f64>], cot: Option<&Tensor<f64>>| -> Result<(f64, Tensor<f64>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let y = g.value(out).clone();
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("grad_check({op_name}) forward")));
        }
        let l = match cot {
            Some(c) => y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum(),
            None => 0.0,
        };
        Ok((l, y))
    };

    let (_, y0) = eval(inputs, None)?;
    let cot = Tensor::uniform(y0.shape(), -1.0, 1.0, &mut rng);

    let analytic: Vec<Option<Tensor<f64>>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let grads = g.backward_with(out, cot.clone());
        vars.iter().map(|&v| grads.get(v).cloned()).collect()
    };

    let mut report =
        GradCheckReport { op_name: op_name.to_string(), max_rel_err: 0.0, worst_index: 0, worst_input: 0, checked: 0, skipped_kinks: 0 };
    let base_loss = eval(inputs, Some(&cot))?.0;
    let mut perturbed = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let entries: Vec<usize> = if n <= opts.max_entries_per_input {
            (0..n).collect()
        } else {
            let mut e = sample(&mut rng, n, opts.max_entries_per_input).into_vec();
            e.sort_unstable();
            e
        };
        let zeros = Tensor::zeros(input.shape());
        let a_full = analytic[i].as_ref().unwrap_or(&zeros);
        let mut rows = Vec::with_capacity(entries.len());
        for &j in &entries {
            let orig = input.data()[j];
            perturbed[i].data_mut()[j] = orig + opts.eps;
            let lp = eval(&perturbed, Some(&cot))?.0;
            perturbed[i].data_mut()[j] = orig - opts.eps;
            let lm = eval(&perturbed, Some(&cot))?.0;
            perturbed[i].data_mut()[j] = orig;
            let fwd = (lp - base_loss) / opts.eps;
            let bwd = (base_loss - lm) / opts.eps;
            let kink = (fwd - bwd).abs() > 1e-3 + 1e-2 * fwd.abs().max(bwd.abs());
            rows.push((j, a_full.data()[j], (lp - lm) / (2.0 * opts.eps), kink));
        }
        let scale = rows.iter().map(|r| r.1.abs().max(r.2.abs())).fold(0.0, f64::max);
        for (j, a, num, kink) in rows {
            if kink {
                report.skipped_kinks += 1;
                continue;
            }
            report.checked += 1;
            let denom = a.abs().max(num.abs()).max(1e-3 * scale).max(1e-12);
            let err = (a - num).abs() / denom;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_index = j;
                report.worst_input = i;
            }
        }
    }
    Ok(report)
}

/// [`grad_check`] with respect to stored parameters: each id in `ids` is bound to a
/// checked input before `f` builds the graph from `store`.
pub fn param_grad_check<F>(op_name: &str, store: &ParamStore<f64>, ids: &[ParamId], opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| store.value(id).clone()).collect();
    grad_check(op_name, &inputs, opts, |g, vars| {
        for (&id, &v) in ids.iter().zip(vars) {
            g.bind_param(id, v);
        }
        f(g, store)
    })
}
