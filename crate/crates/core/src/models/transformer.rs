//! SASRec (causal) and BERT4Rec (bidirectional) encoders.
//!
//! Both share one pre-norm block: `x += drop(attn(ln1(x)))`,
//! `x += drop(ffn(ln2(x)))`, followed by a final layer norm. Positions of all
//! sequences in a batch are packed into one matrix; attention runs per
//! sequence and head. Output scores are dot products with the (shared) item
//! embeddings, plus a per-item bias for BERT4Rec.

use rand::Rng;

use crate::autodiff::{Axis, Graph, NodeId, ParamStore, Tensor};

use super::{lookup, Activation, ModelError, SeqBatch, TransformerConfig};

const EMB_INIT: f64 = 0.05;
const LN_EPS: f64 = 1e-6;
/// Finite stand-in for `-inf` on masked attention logits.
const MASKED: f64 = -1e9;

pub(super) fn init<R: Rng>(c: &TransformerConfig, n: usize, l_max: usize, bert: bool, rng: &mut R) -> ParamStore {
    let d = c.width();
    let vocab = n + 1 + usize::from(bert);
    let mut s = ParamStore::default();
    s.insert("tf.emb", Tensor::uniform(&[vocab, d], EMB_INIT, rng));
    s.insert("tf.pos", Tensor::uniform(&[l_max, d], EMB_INIT, rng));
    let ln = |s: &mut ParamStore, name: &str| {
        s.insert(&format!("{name}.g"), Tensor::full(&[1, d], 1.0));
        s.insert(&format!("{name}.b"), Tensor::zeros(&[1, d]));
    };
    for k in 0..c.layers {
        let p = format!("tf.l{k}");
        ln(&mut s, &format!("{p}.ln1"));
        for m in ["wq", "wk", "wv", "wo"] {
            s.insert(&format!("{p}.{m}"), Tensor::glorot(d, d, rng));
        }
        s.insert(&format!("{p}.bo"), Tensor::zeros(&[1, d]));
        ln(&mut s, &format!("{p}.ln2"));
        s.insert(&format!("{p}.ff1.w"), Tensor::glorot(d, d, rng));
        s.insert(&format!("{p}.ff1.b"), Tensor::zeros(&[1, d]));
        s.insert(&format!("{p}.ff2.w"), Tensor::glorot(d, d, rng));
        s.insert(&format!("{p}.ff2.b"), Tensor::zeros(&[1, d]));
    }
    ln(&mut s, "tf.ln");
    if bert {
        s.insert("tf.out.b", Tensor::zeros(&[1, n]));
    }
    s
}

fn norm(g: &mut Graph, store: &ParamStore, x: NodeId, name: &str) -> Result<NodeId, ModelError> {
    let gamma = lookup(g, store, &format!("{name}.g"))?;
    let beta = lookup(g, store, &format!("{name}.b"))?;
    let z = g.layer_norm(x, LN_EPS)?;
    let z = g.mul(z, gamma)?;
    Ok(g.add(z, beta)?)
}

/// Scaled dot-product attention of one head over one sequence. With
/// `causal`, position `i` attends to `0..=i` only.
fn attention(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId, causal: bool) -> Result<NodeId, ModelError> {
    let len = g.value(q).rows();
    let scale = 1.0 / (g.value(q).cols() as f64).sqrt();
    let s = g.matmul_t(q, k)?;
    let mut s = g.scale(s, scale)?;
    if causal && len > 1 {
        let future: Vec<bool> = (0..len).flat_map(|i| (0..len).map(move |j| j > i)).collect();
        s = g.masked_fill(s, &future, MASKED)?;
    }
    let a = g.softmax(s)?;
    Ok(g.matmul(a, v)?)
}

/// Encoded states for every position of every sequence, packed row-wise
/// (sequence `r` occupies rows `offsets[r]..offsets[r] + len`).
fn encode(
    g: &mut Graph,
    store: &ParamStore,
    c: &TransformerConfig,
    batch: &SeqBatch,
    causal: bool,
) -> Result<(NodeId, Vec<usize>), ModelError> {
    let hs = c.head_size;
    let emb = lookup(g, store, "tf.emb")?;
    let pos = lookup(g, store, "tf.pos")?;
    let mut offsets = Vec::with_capacity(batch.seqs.len());
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    for s in &batch.seqs {
        offsets.push(tokens.len());
        tokens.extend(s.iter().map(|&t| t as usize));
        positions.extend(0..s.len());
    }
    let te = g.embedding_gather(emb, &tokens)?;
    let pe = g.embedding_gather(pos, &positions)?;
    let x0 = g.add(te, pe)?;
    let mut x = g.dropout(x0, c.dropout)?;

    for k in 0..c.layers {
        let p = format!("tf.l{k}");
        let a = norm(g, store, x, &format!("{p}.ln1"))?;
        let wq = lookup(g, store, &format!("{p}.wq"))?;
        let wk = lookup(g, store, &format!("{p}.wk"))?;
        let wv = lookup(g, store, &format!("{p}.wv"))?;
        let q = g.matmul(a, wq)?;
        let kk = g.matmul(a, wk)?;
        let v = g.matmul(a, wv)?;
        let mut seqs_out = Vec::with_capacity(batch.seqs.len());
        for (r, s) in batch.seqs.iter().enumerate() {
            let rows = offsets[r]..offsets[r] + s.len();
            let mut heads = Vec::with_capacity(c.heads);
            for h in 0..c.heads {
                let cols = h * hs..(h + 1) * hs;
                let qh = g.slice(q, rows.clone(), cols.clone())?;
                let kh = g.slice(kk, rows.clone(), cols.clone())?;
                let vh = g.slice(v, rows.clone(), cols)?;
                heads.push(attention(g, qh, kh, vh, causal)?);
            }
            seqs_out.push(if heads.len() == 1 { heads[0] } else { g.concat(&heads, Axis::Cols)? });
        }
        let o = if seqs_out.len() == 1 { seqs_out[0] } else { g.concat(&seqs_out, Axis::Rows)? };
        let wo = lookup(g, store, &format!("{p}.wo"))?;
        let bo = lookup(g, store, &format!("{p}.bo"))?;
        let o = g.affine(o, wo, bo)?;
        let o = g.dropout(o, c.dropout)?;
        x = g.add(x, o)?;

        let a = norm(g, store, x, &format!("{p}.ln2"))?;
        let w1 = lookup(g, store, &format!("{p}.ff1.w"))?;
        let b1 = lookup(g, store, &format!("{p}.ff1.b"))?;
        let w2 = lookup(g, store, &format!("{p}.ff2.w"))?;
        let b2 = lookup(g, store, &format!("{p}.ff2.b"))?;
        let f = g.affine(a, w1, b1)?;
        let f = match c.activation {
            Activation::Relu => g.relu(f)?,
            Activation::Tanh => g.tanh(f)?,
        };
        let f = g.affine(f, w2, b2)?;
        let f = g.dropout(f, c.dropout)?;
        x = g.add(x, f)?;
    }
    let x = norm(g, store, x, "tf.ln")?;
    Ok((x, offsets))
}

pub(super) fn logits(
    g: &mut Graph,
    store: &ParamStore,
    c: &TransformerConfig,
    batch: &SeqBatch,
    n: usize,
    bert: bool,
) -> Result<NodeId, ModelError> {
    let (x, offsets) = encode(g, store, c, batch, !bert)?;
    let rows: Vec<usize> = batch.readouts.iter().map(|&(r, p)| offsets[r] + p).collect();
    let h = g.embedding_gather(x, &rows)?;
    let emb = lookup(g, store, "tf.emb")?;
    let items = g.slice_rows(emb, 1..n + 1)?;
    let out = g.matmul_t(h, items)?;
    if bert {
        let b = lookup(g, store, "tf.out.b")?;
        Ok(g.add(out, b)?)
    } else {
        Ok(out)
    }
}
