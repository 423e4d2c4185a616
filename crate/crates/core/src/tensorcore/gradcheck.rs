use super::{Graph, ParamStore, Result, Tensor, Var};

/// `|a-b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| relative_error(x, y)).fold(0.0, f64::max)
}

fn eval_scalar(g: &Graph<f64>, out: Var) -> f64 {
    g.value(out).data()[0]
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// `(f(x+eps) - f(x-eps)) / 2eps` and returns the worst elementwise relative
/// error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone(), true);
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::no_grad();
        let xv = g.input(t, false);
        let out = f(&mut g, xv)?;
        Ok(eval_scalar(&g, out))
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Finite-difference check of every trainable parameter of `store`.
/// `max_per_param` limits the number of (evenly spaced) coordinates probed
/// per parameter tensor.
pub fn grad_check_params<F>(store: &ParamStore<f64>, f: F, eps: f64, max_per_param: Option<usize>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out)?;
    let grads = g.param_grads();

    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for (pid, param) in store.iter() {
        if !param.trainable {
            continue;
        }
        let n = param.value.numel();
        let analytic = grads
            .iter()
            .find(|(p, _)| *p == pid)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; n]);
        let step = match max_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(step) {
            let orig = param.value.data()[i];
            let mut eval = |v: f64| -> Result<f64> {
                probe.get_mut(pid).value.data_mut()[i] = v;
                let mut g = Graph::no_grad();
                let out = f(&mut g, &probe)?;
                Ok(eval_scalar(&g, out))
            };
            let numeric = (eval(orig + eps)? - eval(orig - eps)?) / (2.0 * eps);
            probe.get_mut(pid).value.data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    }
    Ok(worst)
}
