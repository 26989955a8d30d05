//! GRU4Rec-style and NARM recommenders over left-padded batches.

use rand::Rng;

use crate::autodiff::{Axis, Graph, GruLayer, NodeId, ParamStore, Tensor};

use super::{lookup, GruConfig, ModelError, NarmConfig, SeqBatch, PAD};

const EMB_INIT: f64 = 0.05;

fn layer(store: &ParamStore, prefix: &str) -> Result<GruLayer, ModelError> {
    GruLayer::from_store(store, prefix).ok_or_else(|| ModelError::Checkpoint(format!("missing GRU layer {prefix}")))
}

/// Per-step inputs (`batch x d`) and masks of a left-padded batch.
struct Steps {
    inputs: Vec<NodeId>,
    masks: Option<Vec<NodeId>>,
    width: usize,
    rows: usize,
}

fn embed_steps(g: &mut Graph, emb: NodeId, batch: &SeqBatch, dropout: f64) -> Result<Steps, ModelError> {
    let width = batch.width();
    let rows = batch.seqs.len();
    let padded = batch.padded();
    let ragged = batch.seqs.iter().any(|s| s.len() != width);
    let mut inputs = Vec::with_capacity(width);
    let mut masks = ragged.then(Vec::new);
    for t in 0..width {
        let ids: Vec<usize> = (0..rows).map(|b| padded[b * width + t] as usize).collect();
        let x = g.embedding_gather(emb, &ids)?;
        inputs.push(g.dropout(x, dropout)?);
        if let Some(m) = masks.as_mut() {
            let data = ids.iter().map(|&id| if id == PAD as usize { 0.0 } else { 1.0 }).collect();
            m.push(g.constant(Tensor::new(vec![rows, 1], data)?));
        }
    }
    Ok(Steps {
        inputs,
        masks,
        width,
        rows,
    })
}

/// Runs stacked layers `{prefix}.l{k}`; dropout `between` is applied to the
/// outputs of every layer but the last. Returns top-layer states stacked
/// step-major: row `t * rows + b`.
fn encode(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    layers: usize,
    mut steps: Steps,
    between: f64,
) -> Result<(NodeId, Steps), ModelError> {
    for k in 0..layers {
        let l = layer(store, &format!("{prefix}.l{k}"))?;
        let mut out = l.run(g, store, &steps.inputs, steps.masks.as_deref())?;
        if k + 1 < layers {
            for h in &mut out {
                *h = g.dropout(*h, between)?;
            }
        }
        steps.inputs = out;
    }
    let stacked = g.concat(&steps.inputs, Axis::Rows)?;
    Ok((stacked, steps))
}

/// Row of the stacked states holding position `p` of sequence `r`.
fn state_row(batch: &SeqBatch, steps: &Steps, r: usize, p: usize) -> usize {
    (steps.width - batch.seqs[r].len() + p) * steps.rows + r
}

pub(super) fn init_gru<R: Rng>(c: &GruConfig, n: usize, rng: &mut R) -> ParamStore {
    let mut s = ParamStore::default();
    s.insert("gru.emb", Tensor::uniform(&[n + 1, c.emb], EMB_INIT, rng));
    let mut d_in = c.emb;
    for k in 0..c.layers {
        GruLayer::init(&mut s, &format!("gru.l{k}"), d_in, c.cell, rng);
        d_in = c.cell;
    }
    s.insert("gru.out.w", Tensor::glorot(c.cell, n, rng));
    s.insert("gru.out.b", Tensor::zeros(&[1, n]));
    s
}

/// Embeds (with dropout), runs the stacked GRU and projects the top-layer
/// state at each readout to `n` logits.
pub(super) fn gru_logits(
    g: &mut Graph,
    store: &ParamStore,
    c: &GruConfig,
    batch: &SeqBatch,
    _n: usize,
) -> Result<NodeId, ModelError> {
    let emb = lookup(g, store, "gru.emb")?;
    let steps = embed_steps(g, emb, batch, c.dropout)?;
    let (stacked, steps) = encode(g, store, "gru", c.layers, steps, c.dropout)?;
    let rows: Vec<usize> = batch.readouts.iter().map(|&(r, p)| state_row(batch, &steps, r, p)).collect();
    let h = g.embedding_gather(stacked, &rows)?;
    let w = lookup(g, store, "gru.out.w")?;
    let b = lookup(g, store, "gru.out.b")?;
    Ok(g.affine(h, w, b)?)
}

pub(super) fn init_narm<R: Rng>(c: &NarmConfig, n: usize, rng: &mut R) -> ParamStore {
    let mut s = ParamStore::default();
    s.insert("narm.emb", Tensor::uniform(&[n + 1, c.emb], EMB_INIT, rng));
    let mut d_in = c.emb;
    for k in 0..c.layers {
        GruLayer::init(&mut s, &format!("narm.l{k}"), d_in, c.enc, rng);
        d_in = c.enc;
    }
    s.insert("narm.a1", Tensor::glorot(c.enc, c.enc, rng));
    s.insert("narm.a2", Tensor::glorot(c.enc, c.enc, rng));
    s.insert("narm.v", Tensor::glorot(c.enc, 1, rng));
    s.insert("narm.b", Tensor::glorot(2 * c.enc, c.emb, rng));
    s
}

/// Global (`c_g = h_t`) and attention-pooled local (`c_l`) encodings, one
/// row per readout.
fn narm_contexts(
    g: &mut Graph,
    store: &ParamStore,
    c: &NarmConfig,
    batch: &SeqBatch,
    emb: NodeId,
) -> Result<(NodeId, NodeId), ModelError> {
    let steps = embed_steps(g, emb, batch, c.emb_dropout)?;
    let (h, steps) = encode(g, store, "narm", c.layers, steps, 0.0)?;
    let a1 = lookup(g, store, "narm.a1")?;
    let a2 = lookup(g, store, "narm.a2")?;
    let v = lookup(g, store, "narm.v")?;
    let q = g.matmul(h, a1)?;
    let k = g.matmul(h, a2)?;

    let mut globals = Vec::new();
    let mut locals = Vec::new();
    let mut i = 0;
    while i < batch.readouts.len() {
        // consecutive readouts of one sequence share its key rows
        let r = batch.readouts[i].0;
        let mut end = i;
        while end < batch.readouts.len() && batch.readouts[end].0 == r {
            end += 1;
        }
        let positions: Vec<usize> = batch.readouts[i..end].iter().map(|x| x.1).collect();
        let len = batch.seqs[r].len();
        let key_rows: Vec<usize> = (0..len).map(|j| state_row(batch, &steps, r, j)).collect();
        let query_rows: Vec<usize> = positions.iter().map(|&p| state_row(batch, &steps, r, p)).collect();

        let pair_q: Vec<usize> = query_rows.iter().flat_map(|&qr| std::iter::repeat_n(qr, len)).collect();
        let pair_k: Vec<usize> = positions.iter().flat_map(|_| key_rows.iter().copied()).collect();
        let qe = g.embedding_gather(q, &pair_q)?;
        let ke = g.embedding_gather(k, &pair_k)?;
        let pre = g.add(qe, ke)?;
        let act = g.sigmoid(pre)?;
        let e = g.matmul(act, v)?;
        let e = g.reshape(e, &[positions.len(), len])?;
        let future: Vec<bool> = positions.iter().flat_map(|&p| (0..len).map(move |j| j > p)).collect();
        let e = g.masked_fill(e, &future, -1e9)?;
        let alpha = g.softmax(e)?;
        let hs = g.embedding_gather(h, &key_rows)?;
        locals.push(g.matmul(alpha, hs)?);
        globals.push(g.embedding_gather(h, &query_rows)?);
        i = end;
    }
    let cg = g.concat(&globals, Axis::Rows)?;
    let cl = g.concat(&locals, Axis::Rows)?;
    Ok((cg, cl))
}

/// `score(i) = emb(i)^T B [c_g; c_l]` with context dropout on `[c_g; c_l]`.
pub(super) fn narm_logits(
    g: &mut Graph,
    store: &ParamStore,
    c: &NarmConfig,
    batch: &SeqBatch,
    n: usize,
) -> Result<NodeId, ModelError> {
    let emb = lookup(g, store, "narm.emb")?;
    let (cg, cl) = narm_contexts(g, store, c, batch, emb)?;
    let ctx = g.concat(&[cg, cl], Axis::Cols)?;
    let ctx = g.dropout(ctx, c.ctx_dropout)?;
    let bm = lookup(g, store, "narm.b")?;
    let proj = g.matmul(ctx, bm)?;
    let items = g.slice_rows(emb, 1..n + 1)?;
    Ok(g.matmul_t(proj, items)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gru_cell;
    use crate::models::test_support::{index, jitter, toy_configs};
    use crate::models::{ModelConfig, Ranker};

    fn narm_cfg() -> NarmConfig {
        match &toy_configs()[3] {
            ModelConfig::Narm(c) => c.clone(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn gru_length_one_is_single_cell_step() {
        let cfg = toy_configs()[2].clone();
        let ModelConfig::Gru(c) = &cfg else { unreachable!() };
        let c = GruConfig { layers: 1, ..c.clone() };
        let mut r = Ranker::init(ModelConfig::Gru(c), index(6), 5, 2).unwrap();
        jitter(&mut r, 4);
        let s = &r.params;
        let mut g = Graph::inference();
        let emb = g.param(s, s.find("gru.emb").unwrap());
        let x = g.embedding_gather(emb, &[3]).unwrap();
        let h0 = g.constant(Tensor::zeros(&[1, 4]));
        let h1 = gru_cell(&mut g, s, &GruLayer::from_store(s, "gru.l0").unwrap(), x, h0).unwrap();
        let w = g.param(s, s.find("gru.out.w").unwrap());
        let b = g.param(s, s.find("gru.out.b").unwrap());
        let out = g.affine(h1, w, b).unwrap();
        assert_eq!(g.value(out).data(), r.score(&[3]).unwrap().as_slice());
    }

    #[test]
    fn gru_order_sensitive() {
        let mut r = Ranker::init(toy_configs()[2].clone(), index(6), 5, 2).unwrap();
        jitter(&mut r, 5);
        assert_ne!(r.score(&[1, 2]).unwrap(), r.score(&[2, 1]).unwrap());
    }

    #[test]
    fn padding_does_not_leak() {
        for cfg in [toy_configs()[2].clone(), toy_configs()[3].clone()] {
            let mut r = Ranker::init(cfg, index(6), 5, 2).unwrap();
            jitter(&mut r, 6);
            let single = SeqBatch {
                seqs: vec![vec![4, 2]],
                readouts: vec![(0, 0), (0, 1)],
            };
            let mixed = SeqBatch {
                seqs: vec![vec![1, 5, 6, 3, 1], vec![4, 2]],
                readouts: vec![(1, 0), (1, 1)],
            };
            let run = |b: &SeqBatch| {
                let mut g = Graph::inference();
                let out = r.logits(&mut g, &r.params, b).unwrap();
                g.value(out).clone()
            };
            assert!(run(&single).max_abs_diff(&run(&mixed)) < 1e-12);
        }
    }

    fn contexts(r: &Ranker, seq: Vec<u32>) -> (Tensor, Tensor) {
        let c = narm_cfg();
        let batch = SeqBatch {
            readouts: (0..seq.len()).map(|p| (0, p)).collect(),
            seqs: vec![seq],
        };
        let mut g = Graph::inference();
        let emb = g.param(&r.params, r.params.find("narm.emb").unwrap());
        let (cg, cl) = narm_contexts(&mut g, &r.params, &c, &batch, emb).unwrap();
        (g.value(cg).clone(), g.value(cl).clone())
    }

    #[test]
    fn narm_singleton_attention_copies_state() {
        let mut r = Ranker::init(ModelConfig::Narm(narm_cfg()), index(6), 5, 1).unwrap();
        jitter(&mut r, 7);
        let (cg, cl) = contexts(&r, vec![5]);
        assert!(cg.max_abs_diff(&cl) < 1e-15);
    }

    #[test]
    fn narm_flat_attention_is_mean_of_states() {
        let mut r = Ranker::init(ModelConfig::Narm(narm_cfg()), index(6), 5, 1).unwrap();
        jitter(&mut r, 8);
        let v = r.params.find("narm.v").unwrap();
        r.params.get_mut(v).data_mut().fill(0.0);
        let (cg, cl) = contexts(&r, vec![5, 1, 3]);
        // cg rows are h_1, h_2, h_3; local encodings are running means
        for t in 0..3 {
            for d in 0..cg.cols() {
                let mean = (0..=t).map(|j| cg.row(j)[d]).sum::<f64>() / (t + 1) as f64;
                assert!((cl.row(t)[d] - mean).abs() < 1e-14);
            }
        }
    }
}
