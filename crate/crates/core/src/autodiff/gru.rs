use rand::Rng;

use super::{AutodiffError, Graph, NodeId, ParamId, ParamStore, Tensor};

/// Weights of one GRU layer with fused gate matrices.
///
/// `w` is `d_in x 3h` and `u` is `h x 3h`; column blocks are ordered
/// update (z), reset (r), candidate (n). `b` is the input-side bias `1 x 3h`.
#[derive(Debug, Clone, Copy)]
pub struct GruLayer {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl GruLayer {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize, rng: &mut R) -> Self {
        let w = store.insert(&format!("{prefix}.w"), Tensor::glorot(d_in, 3 * hidden, rng));
        let u = store.insert(&format!("{prefix}.u"), Tensor::glorot(hidden, 3 * hidden, rng));
        let b = store.insert(&format!("{prefix}.b"), Tensor::zeros(&[1, 3 * hidden]));
        Self { w, u, b, hidden }
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Option<Self> {
        let w = store.find(&format!("{prefix}.w"))?;
        let u = store.find(&format!("{prefix}.u"))?;
        let b = store.find(&format!("{prefix}.b"))?;
        let hidden = store.get(u).rows();
        Some(Self { w, u, b, hidden })
    }

    /// Runs the layer over `steps` inputs (each `batch x d_in`). When a
    /// `mask` is given (`batch x 1` per step, 1 = real token), padded rows
    /// carry the previous state through unchanged.
    pub fn run(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        steps: &[NodeId],
        masks: Option<&[NodeId]>,
    ) -> Result<Vec<NodeId>, AutodiffError> {
        let Some(&first) = steps.first() else {
            return Ok(Vec::new());
        };
        let batch = g.value(first).rows();
        let mut h = g.constant(Tensor::zeros(&[batch, self.hidden]));
        let mut out = Vec::with_capacity(steps.len());
        for (t, &x) in steps.iter().enumerate() {
            let next = gru_cell(g, store, self, x, h)?;
            h = match masks {
                Some(m) => {
                    // h + m * (next - h)
                    let delta = g.sub(next, h)?;
                    let kept = g.mul(delta, m[t])?;
                    g.add(h, kept)?
                }
                None => next,
            };
            out.push(h);
        }
        Ok(out)
    }
}

/// One GRU step:
/// `z = sigmoid(x Wz + h Uz + bz)`, `r = sigmoid(x Wr + h Ur + br)`,
/// `n = tanh(x Wn + r * (h Un) + bn)`, `h' = (1 - z) * n + z * h`.
pub fn gru_cell(g: &mut Graph, store: &ParamStore, layer: &GruLayer, x: NodeId, h: NodeId) -> Result<NodeId, AutodiffError> {
    let hd = layer.hidden;
    let w = g.param(store, layer.w);
    let u = g.param(store, layer.u);
    let b = g.param(store, layer.b);
    let xw = g.affine(x, w, b)?;
    let hu = g.matmul(h, u)?;

    let xz = g.slice_cols(xw, 0..hd)?;
    let hz = g.slice_cols(hu, 0..hd)?;
    let z_pre = g.add(xz, hz)?;
    let z = g.sigmoid(z_pre)?;

    let xr = g.slice_cols(xw, hd..2 * hd)?;
    let hr = g.slice_cols(hu, hd..2 * hd)?;
    let r_pre = g.add(xr, hr)?;
    let r = g.sigmoid(r_pre)?;

    let xn = g.slice_cols(xw, 2 * hd..3 * hd)?;
    let hn = g.slice_cols(hu, 2 * hd..3 * hd)?;
    let rhn = g.mul(r, hn)?;
    let n_pre = g.add(xn, rhn)?;
    let n = g.tanh(n_pre)?;

    // (1 - z) n + z h  ==  n + z (h - n)
    let h_minus_n = g.sub(h, n)?;
    let gated = g.mul(z, h_minus_n)?;
    g.add(n, gated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_layer(store: &mut ParamStore, d: usize) -> GruLayer {
        let w = store.insert("w", Tensor::zeros(&[d, 3 * d]));
        let u = store.insert("u", Tensor::zeros(&[d, 3 * d]));
        let b = store.insert("b", Tensor::zeros(&[1, 3 * d]));
        GruLayer { w, u, b, hidden: d }
    }

    #[test]
    fn zero_everything_stays_zero() {
        let mut store = ParamStore::default();
        let layer = zero_layer(&mut store, 3);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let h = g.constant(Tensor::zeros(&[1, 3]));
        let out = gru_cell(&mut g, &store, &layer, x, h).unwrap();
        assert_eq!(g.value(out).data(), &[0.0; 3]);
    }

    #[test]
    fn zero_weights_halve_unit_state() {
        // z = sigmoid(0) = 0.5, n = tanh(0) = 0, h' = 0.5 * h
        let mut store = ParamStore::default();
        let layer = zero_layer(&mut store, 3);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let h = g.constant(Tensor::full(&[1, 3], 1.0));
        let out = gru_cell(&mut g, &store, &layer, x, h).unwrap();
        assert_eq!(g.value(out).data(), &[0.5; 3]);
    }

    #[test]
    fn cell_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::default();
        let layer = GruLayer::init(&mut store, "gru", 3, 3, &mut rng);
        store.get_mut(layer.b).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        let x = Tensor::uniform(&[2, 3], 1.0, &mut rng);
        let h0 = Tensor::uniform(&[2, 3], 1.0, &mut rng);
        let err = crate::autodiff::grad_check(&store, 1e-5, Graph::inference, |g, s| {
            let xn = g.constant(x.clone());
            let hn = g.constant(h0.clone());
            let h1 = gru_cell(g, s, &layer, xn, hn)?;
            let h2 = gru_cell(g, s, &layer, xn, h1)?;
            let sq = g.mul(h2, h2)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-6, "err={err}");
    }
}
