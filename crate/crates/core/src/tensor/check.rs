use super::{Graph, Result, Tensor, TensorError, Var};

/// Compares reverse-mode gradients of `f` at `x` with central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F, E>(f: F, x: &Tensor, eps: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Graph, Var) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

/// Multi-input form of [`grad_check`]; the error is the maximum over every
/// coordinate of every input.
pub fn grad_check_many<F, E>(f: F, xs: &[Tensor], eps: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Graph, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::Invalid { op: "grad_check", detail: format!("eps {eps} outside [1e-7, 1e-3]") }.into());
    }
    let eval = |inputs: &[Tensor]| -> std::result::Result<f64, E> {
        let mut g = Graph::new();
        let vars = inputs.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(TensorError::NotScalar(v.shape().to_vec()).into());
        }
        Ok(v.data()[0])
    };

    let mut g = Graph::new();
    let vars = xs.iter().map(|t| g.param(t)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (ti, x) in xs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[ti], x);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = x.data()[j];
            probe[ti].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[ti].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(TensorError::NonFinite { op: "grad_check" }.into());
            }
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
