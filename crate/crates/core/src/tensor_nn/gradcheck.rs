use super::{Graph, Tensor, TensorError, Var};

/// Denominator floor of the relative error, so that components whose true
/// gradient is (numerically) zero are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Central finite differences of a scalar function of `params`.
pub fn numeric_grad<F>(f: &F, params: &[Tensor], eps: f64) -> Result<Vec<Vec<f64>>, TensorError>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |ps: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut gi = Vec::with_capacity(params[i].len());
        for j in 0..params[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            gi.push((plus - minus) / (2.0 * eps));
        }
        out.push(gi);
    }
    Ok(out)
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients of `f` over every element of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let numeric = numeric_grad(&f, params, eps)?;
    let mut worst: f64 = 0.0;
    for (v, num) in vars.iter().zip(&numeric) {
        let zeros = vec![0.0; num.len()];
        let ana = grads.get(*v).unwrap_or(&zeros);
        for (a, n) in ana.iter().zip(num) {
            let denom = a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max((a - n).abs() / denom);
        }
    }
    Ok(worst)
}
