//! Set-based models over multi-hot prefix encodings.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};

use super::{lookup as param, MlpConfig, ModelError, SeqBatch};

/// `v[k] = 1` iff token `k + 1` occurs in `prefix`; counts and order are
/// discarded.
pub fn multi_hot(prefix: &[u32], n: usize) -> Result<Vec<f64>, ModelError> {
    if prefix.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    let mut v = vec![0.0; n];
    for &t in prefix {
        if t == 0 || t as usize > n {
            return Err(ModelError::BadToken(t));
        }
        v[t as usize - 1] = 1.0;
    }
    Ok(v)
}

fn readout_features(batch: &SeqBatch, n: usize) -> Result<Tensor, ModelError> {
    let mut data = Vec::with_capacity(batch.readouts.len() * n);
    for &(r, p) in &batch.readouts {
        data.extend(multi_hot(&batch.seqs[r][..=p], n)?);
    }
    Ok(Tensor::new(vec![batch.readouts.len(), n], data)?)
}

pub(super) fn init_lr(n: usize) -> ParamStore {
    let mut s = ParamStore::default();
    s.insert("lr.w", Tensor::zeros(&[n, n]));
    s.insert("lr.b", Tensor::zeros(&[1, n]));
    s
}

/// `v W + b`; the per-item probabilities are the sigmoid of these logits.
pub(super) fn lr_logits(g: &mut Graph, store: &ParamStore, batch: &SeqBatch, n: usize) -> Result<NodeId, ModelError> {
    let x = g.constant(readout_features(batch, n)?);
    let w = param(g, store, "lr.w")?;
    let b = param(g, store, "lr.b")?;
    Ok(g.affine(x, w, b)?)
}

pub(super) fn init_mlp<R: Rng>(c: &MlpConfig, n: usize, rng: &mut R) -> ParamStore {
    let mut s = ParamStore::default();
    let mut d_in = n;
    for k in 0..c.layers {
        s.insert(&format!("mlp.l{k}.w"), Tensor::glorot(d_in, c.hidden, rng));
        s.insert(&format!("mlp.l{k}.b"), Tensor::zeros(&[1, c.hidden]));
        d_in = c.hidden;
    }
    s.insert("mlp.out.w", Tensor::glorot(d_in, n, rng));
    s.insert("mlp.out.b", Tensor::zeros(&[1, n]));
    s
}

pub(super) fn mlp_logits(
    g: &mut Graph,
    store: &ParamStore,
    c: &MlpConfig,
    batch: &SeqBatch,
    n: usize,
) -> Result<NodeId, ModelError> {
    let mut x = g.constant(readout_features(batch, n)?);
    for k in 0..c.layers {
        let w = param(g, store, &format!("mlp.l{k}.w"))?;
        let b = param(g, store, &format!("mlp.l{k}.b"))?;
        let a = g.affine(x, w, b)?;
        x = g.relu(a)?;
    }
    let w = param(g, store, "mlp.out.w")?;
    let b = param(g, store, "mlp.out.b")?;
    Ok(g.affine(x, w, b)?)
}
