//! Finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Compares reverse-mode gradients against central differences.
///
/// `build` maps the input leaves to an output of any shape; the output is reduced to a
/// scalar through a fixed random projection so every output entry contributes. The
/// graph is rebuilt from scratch for every evaluation with the same seed, so ops that
/// draw random numbers see identical draws. Returns, per input, the relative error
/// `‖g_analytic − g_numeric‖ / max(‖g_analytic‖ + ‖g_numeric‖, 1e-8)`.
pub fn relative_errors<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>], keep_grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new(true, 7);
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let shape = g.shape(out).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let proj = g.constant(Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)));
        let prod = g.mul(out, proj)?;
        let loss = g.sum(prod);
        let value = g.value(loss).item();
        if !keep_grads {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let grads = vars
            .iter()
            .zip(vals)
            .map(|(&v, t)| g.grad(v).map(|x| x.into_data()).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut errors = Vec::with_capacity(inputs.len());
    for (k, ga) in analytic.iter().enumerate() {
        let mut vals = inputs.to_vec();
        let mut num = Vec::with_capacity(ga.len());
        for i in 0..ga.len() {
            let orig = vals[k].data()[i];
            vals[k].data_mut()[i] = orig + h;
            let (fp, _) = eval(&vals, false)?;
            vals[k].data_mut()[i] = orig - h;
            let (fm, _) = eval(&vals, false)?;
            vals[k].data_mut()[i] = orig;
            num.push((fp - fm) / (2.0 * h));
        }
        let diff = ga.iter().zip(&num).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let na = ga.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        errors.push(diff / (na + nn).max(1e-8));
    }
    Ok(errors)
}
