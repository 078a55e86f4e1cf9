use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{numerical_err, Result};

/// Evaluates `f` on fresh leaves holding `params` and returns the scalar.
fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(numerical_err!("gradient check needs a scalar function, got shape {:?}", v.shape()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(numerical_err!("function value {v} is not finite"));
    }
    Ok(v)
}

/// Analytic gradients of `f` at `params`.
pub fn gradients<F>(f: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars.iter().map(|&v| grads.wrt(v)).collect())
}

/// Per-parameter maximum of `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// with a central difference of half-width `eps`.
pub fn grad_check_per_param<F>(f: F, params: &[Tensor], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let coords: Vec<Vec<usize>> = params.iter().map(|p| (0..p.len()).collect()).collect();
    check_coords(&f, params, eps, &coords)
}

/// Like [`grad_check_per_param`] but probes at most `probes` coordinates of
/// each parameter, drawn without replacement from `rng`.
pub fn grad_check_sampled<F>(f: F, params: &[Tensor], eps: f64, probes: usize, rng: &mut impl Rng) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let coords: Vec<Vec<usize>> = params
        .iter()
        .map(|p| {
            let mut idx = rand::seq::index::sample(rng, p.len(), probes.min(p.len())).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    check_coords(&f, params, eps, &coords)
}

fn check_coords<F>(f: &F, params: &[Tensor], eps: f64, coords: &[Vec<usize>]) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = gradients(f, params)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for &i in &coords[pi] {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + eps;
            let plus = eval(f, &work)?;
            work[pi].data_mut()[i] = orig - eps;
            let minus = eval(f, &work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            if !a.is_finite() {
                return Err(numerical_err!("analytic gradient is not finite"));
            }
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
        out.push(worst);
    }
    Ok(out)
}

/// Maximum relative error over every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    Ok(grad_check_per_param(f, params, eps)?.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::LtfeError;

    #[test]
    fn sum_of_squares() {
        let f = |g: &mut Graph, p: &[Var]| {
            let s = g.square(p[0])?;
            g.sum(s)
        };
        let x = Tensor::vector(vec![1.0, 2.0]);
        let grads = gradients(&f, std::slice::from_ref(&x)).unwrap();
        assert_eq!(grads[0].data(), &[2.0, 4.0]);
        assert!(grad_check(f, &[x], 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let f = |g: &mut Graph, _: &[Var]| Ok(g.scalar(3.0));
        let x = Tensor::vector(vec![1.0, -1.0, 0.5]);
        let grads = gradients(&f, std::slice::from_ref(&x)).unwrap();
        assert!(grads[0].data().iter().all(|&v| v == 0.0));
        assert_eq!(grad_check(f, &[x], 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn non_finite_evaluation_is_reported() {
        // log of a value pushed through zero by the perturbation
        let f = |g: &mut Graph, p: &[Var]| {
            let l = g.ln(p[0])?;
            g.sum(l)
        };
        let x = Tensor::vector(vec![1e-7]);
        assert!(matches!(grad_check(f, &[x], 1e-5), Err(LtfeError::Numerical(_))));
    }
}
