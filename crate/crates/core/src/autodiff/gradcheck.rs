use super::{AutodiffError, Graph, NodeId, ParamStore};

/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central finite differences over every coordinate of every parameter.
///
/// `f` receives a fresh graph each call and must be deterministic (seed any
/// dropout through the graph it is handed). Returns the maximum relative
/// error.
pub fn grad_check<F, G>(store: &ParamStore, eps: f64, make_graph: G, f: F) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId, AutodiffError>,
    G: Fn() -> Graph,
{
    let mut g = make_graph();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;

    let eval = |s: &ParamStore| -> Result<f64, AutodiffError> {
        let mut g = make_graph();
        let loss = f(&mut g, s)?;
        Ok(g.value(loss).item())
    };

    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for id in store.ids() {
        let analytic = grads.dense(store, id);
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[k], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParamId, Tensor};

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::default();
        store.insert("x", Tensor::scalar(3.0));
        let err = grad_check(&store, 1e-5, Graph::inference, |g, s| {
            let x = g.param(s, ParamId(0));
            let xx = g.mul(x, x)?;
            g.sum(xx)
        })
        .unwrap();
        assert!(err < 1e-7, "err={err}");
    }
}
