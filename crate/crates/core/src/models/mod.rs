//! The eight next-item recommenders behind one [`Ranker`] contract.
//!
//! Items are addressed by tokens: `0` is padding, `1..=n` are the
//! purchasable items in ascending id order and `n + 1` is the BERT4Rec mask.
//! Every model produces `n` scores per query, column `k` belonging to token
//! `k + 1`, so padding and mask never enter a ranking.

mod baseline;
mod checkpoint;
mod linear;
mod recurrent;
mod transformer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Graph, NodeId, ParamStore};
use crate::data::{Dataset, ItemId, ItemVocab};

pub use baseline::{markov_fit, pop_fit};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader, TensorEntry};
pub use linear::multi_hot;

pub const PAD: u32 = 0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("empty prefix")]
    EmptyPrefix,
    #[error("item {0} is not in the model vocabulary")]
    UnknownItem(ItemId),
    #[error("token {0} outside the model vocabulary")]
    BadToken(u32),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("no training data: {0}")]
    Empty(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Pop,
    Markov,
    Lr,
    Mlp,
    Gru,
    Narm,
    Sasrec,
    Bert4rec,
}

impl ModelKind {
    pub const ALL: [ModelKind; 8] = [
        ModelKind::Pop,
        ModelKind::Markov,
        ModelKind::Lr,
        ModelKind::Mlp,
        ModelKind::Gru,
        ModelKind::Narm,
        ModelKind::Sasrec,
        ModelKind::Bert4rec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Pop => "pop",
            ModelKind::Markov => "markov",
            ModelKind::Lr => "lr",
            ModelKind::Mlp => "mlp",
            ModelKind::Gru => "gru",
            ModelKind::Narm => "narm",
            ModelKind::Sasrec => "sasrec",
            ModelKind::Bert4rec => "bert4rec",
        }
    }

    pub fn is_neural(self) -> bool {
        !matches!(self, ModelKind::Pop | ModelKind::Markov)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| ModelError::Config(format!("unknown model '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruConfig {
    pub emb: usize,
    pub cell: usize,
    pub layers: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarmConfig {
    pub emb: usize,
    pub enc: usize,
    pub layers: usize,
    pub ctx_dropout: f64,
    pub emb_dropout: f64,
}

/// Shared by SASRec and BERT4Rec. The model width is
/// `heads * head_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub heads: usize,
    pub layers: usize,
    pub head_size: usize,
    pub dropout: f64,
    pub activation: Activation,
}

impl TransformerConfig {
    pub fn width(&self) -> usize {
        self.heads * self.head_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Pop,
    Markov,
    Lr,
    Mlp(MlpConfig),
    Gru(GruConfig),
    Narm(NarmConfig),
    Sasrec(TransformerConfig),
    Bert4rec(TransformerConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Pop => ModelKind::Pop,
            ModelConfig::Markov => ModelKind::Markov,
            ModelConfig::Lr => ModelKind::Lr,
            ModelConfig::Mlp(_) => ModelKind::Mlp,
            ModelConfig::Gru(_) => ModelKind::Gru,
            ModelConfig::Narm(_) => ModelKind::Narm,
            ModelConfig::Sasrec(_) => ModelKind::Sasrec,
            ModelConfig::Bert4rec(_) => ModelKind::Bert4rec,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        let p_ok = |p: f64| (0.0..1.0).contains(&p);
        match self {
            ModelConfig::Pop | ModelConfig::Markov | ModelConfig::Lr => Ok(()),
            ModelConfig::Mlp(c) if c.hidden == 0 || c.layers == 0 => fail(format!("mlp sizes must be positive: {c:?}")),
            ModelConfig::Gru(c) if c.emb == 0 || c.cell == 0 || c.layers == 0 || !p_ok(c.dropout) => {
                fail(format!("invalid gru config {c:?}"))
            }
            ModelConfig::Narm(c)
                if c.emb == 0 || c.enc == 0 || c.layers == 0 || !p_ok(c.ctx_dropout) || !p_ok(c.emb_dropout) =>
            {
                fail(format!("invalid narm config {c:?}"))
            }
            ModelConfig::Sasrec(c) | ModelConfig::Bert4rec(c)
                if c.heads == 0 || c.layers == 0 || c.head_size == 0 || !p_ok(c.dropout) =>
            {
                fail(format!("invalid transformer config {c:?}"))
            }
            _ => Ok(()),
        }
    }
}

fn lookup(g: &mut Graph, store: &ParamStore, name: &str) -> Result<NodeId, ModelError> {
    let id = store
        .find(name)
        .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {name}")))?;
    Ok(g.param(store, id))
}

/// Bijection between purchasable item ids and tokens `1..=n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemIndex {
    item_ids: Vec<ItemId>,
}

impl ItemIndex {
    pub fn new(mut item_ids: Vec<ItemId>) -> Result<Self, ModelError> {
        item_ids.sort_unstable();
        let n = item_ids.len();
        item_ids.dedup();
        if item_ids.len() != n || n == 0 {
            return Err(ModelError::Config("item ids must be unique and non-empty".into()));
        }
        Ok(Self { item_ids })
    }

    pub fn from_vocab(vocab: &ItemVocab) -> Result<Self, ModelError> {
        Self::new(vocab.purchasable_ids())
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn item_ids(&self) -> &[ItemId] {
        &self.item_ids
    }

    pub fn mask_token(&self) -> u32 {
        self.item_ids.len() as u32 + 1
    }

    pub fn token(&self, id: ItemId) -> Result<u32, ModelError> {
        self.item_ids
            .binary_search(&id)
            .map(|i| i as u32 + 1)
            .map_err(|_| ModelError::UnknownItem(id))
    }

    pub fn item(&self, token: u32) -> Result<ItemId, ModelError> {
        match token {
            0 => Err(ModelError::BadToken(0)),
            t => self.item_ids.get(t as usize - 1).copied().ok_or(ModelError::BadToken(t)),
        }
    }

    pub fn encode(&self, items: impl IntoIterator<Item = ItemId>) -> Result<Vec<u32>, ModelError> {
        items.into_iter().map(|id| self.token(id)).collect()
    }

    /// Token sequence of every session, in dataset order.
    pub fn encode_dataset(&self, d: &Dataset) -> Result<Vec<Vec<u32>>, ModelError> {
        d.sessions().map(|s| self.encode(s.items())).collect()
    }
}

/// Item ids ordered by score descending, ties by id ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankedList(pub Vec<ItemId>);

/// Orders columns by `(score desc, column asc)`. Columns follow ascending id
/// order, so the column tie-break is the id tie-break.
pub fn rank_columns(scores: &[f64]) -> Vec<usize> {
    let mut cols: Vec<usize> = (0..scores.len()).collect();
    cols.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    cols
}

/// A batch of token sequences (each at most the model's `l_max`, no
/// padding) with the positions at which scores are read out.
///
/// For every model except BERT4Rec, the readout at position `p` of a row
/// scores the next item after the row's tokens `0..=p`. BERT4Rec reads its
/// logits at `p` itself, which should hold the mask token.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeqBatch {
    pub seqs: Vec<Vec<u32>>,
    pub readouts: Vec<(usize, usize)>,
}

impl SeqBatch {
    /// Longest row.
    pub fn width(&self) -> usize {
        self.seqs.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Rows left-padded with [`PAD`] to [`SeqBatch::width`], row-major.
    pub fn padded(&self) -> Vec<u32> {
        let w = self.width();
        let mut out = Vec::with_capacity(w * self.seqs.len());
        for s in &self.seqs {
            out.extend(std::iter::repeat_n(PAD, w - s.len()));
            out.extend_from_slice(s);
        }
        out
    }

    /// Validity mask matching [`SeqBatch::padded`].
    pub fn mask(&self) -> Vec<bool> {
        let w = self.width();
        self.seqs
            .iter()
            .flat_map(|s| (0..w).map(move |c| c >= w - s.len()))
            .collect()
    }

    fn check(&self, max_token: u32, l_max: usize) -> Result<(), ModelError> {
        for s in &self.seqs {
            if s.is_empty() {
                return Err(ModelError::EmptyPrefix);
            }
            if s.len() > l_max {
                return Err(ModelError::Config(format!("sequence of {} exceeds l_max {l_max}", s.len())));
            }
            if let Some(&t) = s.iter().find(|&&t| t == PAD || t > max_token) {
                return Err(ModelError::BadToken(t));
            }
        }
        if let Some(&(r, p)) = self.readouts.iter().find(|(r, p)| *r >= self.seqs.len() || *p >= self.seqs[*r].len()) {
            return Err(ModelError::Config(format!("readout ({r}, {p}) outside the batch")));
        }
        Ok(())
    }
}

/// Windows over a sequence of `len` tokens that together read out every
/// prefix `tokens[..j]`, `j = 1..=len`, truncated to its last `l_max`
/// tokens. Returns `(start, end, readout positions)`; the first window
/// covers all prefixes up to `l_max`, every later prefix gets its own
/// window with a single readout at its end.
pub fn prefix_windows(len: usize, l_max: usize) -> Vec<(usize, usize, Vec<usize>)> {
    if len == 0 || l_max == 0 {
        return Vec::new();
    }
    let first = len.min(l_max);
    let mut out = vec![(0, first, (0..first).collect())];
    for j in l_max + 1..=len {
        out.push((j - l_max, j, vec![l_max - 1]));
    }
    out
}

/// A recommender: configuration, item index and parameters. Baselines keep
/// their counts in `params` too, so every kind checkpoints the same way.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranker {
    pub config: ModelConfig,
    pub index: ItemIndex,
    pub l_max: usize,
    pub params: ParamStore,
}

impl Ranker {
    /// Freshly initialised neural model.
    pub fn init(config: ModelConfig, index: ItemIndex, l_max: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if l_max == 0 {
            return Err(ModelError::Config("l_max must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = index.n_items();
        let params = match &config {
            ModelConfig::Pop | ModelConfig::Markov => {
                return Err(ModelError::Config("baselines are fitted, not initialised".into()))
            }
            ModelConfig::Lr => linear::init_lr(n),
            ModelConfig::Mlp(c) => linear::init_mlp(c, n, &mut rng),
            ModelConfig::Gru(c) => recurrent::init_gru(c, n, &mut rng),
            ModelConfig::Narm(c) => recurrent::init_narm(c, n, &mut rng),
            ModelConfig::Sasrec(c) => transformer::init(c, n, l_max, false, &mut rng),
            ModelConfig::Bert4rec(c) => transformer::init(c, n, l_max, true, &mut rng),
        };
        Ok(Self {
            config,
            index,
            l_max,
            params,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind()
    }

    pub fn n_items(&self) -> usize {
        self.index.n_items()
    }

    fn max_token(&self) -> u32 {
        match self.kind() {
            ModelKind::Bert4rec => self.index.mask_token(),
            _ => self.n_items() as u32,
        }
    }

    /// Logits (`readouts x n`) of a neural model for `batch`, recorded on
    /// `g` against `params` (which may differ from `self.params` during
    /// training and gradient checks).
    pub fn logits(&self, g: &mut Graph, params: &ParamStore, batch: &SeqBatch) -> Result<NodeId, ModelError> {
        batch.check(self.max_token(), self.l_max)?;
        let n = self.n_items();
        match &self.config {
            ModelConfig::Pop | ModelConfig::Markov => {
                Err(ModelError::Config(format!("{} has no differentiable forward pass", self.kind())))
            }
            ModelConfig::Lr => linear::lr_logits(g, params, batch, n),
            ModelConfig::Mlp(c) => linear::mlp_logits(g, params, c, batch, n),
            ModelConfig::Gru(c) => recurrent::gru_logits(g, params, c, batch, n),
            ModelConfig::Narm(c) => recurrent::narm_logits(g, params, c, batch, n),
            ModelConfig::Sasrec(c) => transformer::logits(g, params, c, batch, n, false),
            ModelConfig::Bert4rec(c) => transformer::logits(g, params, c, batch, n, true),
        }
    }

    /// Scores of every prefix `seq[..j]`, `j = 1..=seq.len()`, for each
    /// sequence (already tokenised; truncation to `l_max` happens here).
    pub fn score_prefixes(&self, seqs: &[&[u32]]) -> Result<Vec<Vec<Vec<f64>>>, ModelError> {
        if seqs.iter().any(|s| s.is_empty()) {
            return Err(ModelError::EmptyPrefix);
        }
        match self.kind() {
            ModelKind::Pop | ModelKind::Markov => seqs
                .iter()
                .map(|s| {
                    for &t in s.iter() {
                        if t == PAD || t > self.n_items() as u32 {
                            return Err(ModelError::BadToken(t));
                        }
                    }
                    Ok((1..=s.len()).map(|j| baseline::scores(self, &s[..j])).collect())
                })
                .collect(),
            ModelKind::Bert4rec => self.score_bert_prefixes(seqs),
            _ => self.score_causal_prefixes(seqs),
        }
    }

    fn run_inference(&self, batch: &SeqBatch) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut g = Graph::inference();
        let out = self.logits(&mut g, &self.params, batch)?;
        let t = g.value(out);
        let squash = self.kind() == ModelKind::Lr;
        Ok((0..t.rows())
            .map(|r| {
                let row = t.row(r);
                if squash {
                    row.iter().map(|&x| crate::autodiff::sigmoid(x)).collect()
                } else {
                    row.to_vec()
                }
            })
            .collect())
    }

    fn score_causal_prefixes(&self, seqs: &[&[u32]]) -> Result<Vec<Vec<Vec<f64>>>, ModelError> {
        let mut batch = SeqBatch::default();
        let mut owner = Vec::new();
        for (si, s) in seqs.iter().enumerate() {
            for (start, end, reads) in prefix_windows(s.len(), self.l_max) {
                let row = batch.seqs.len();
                batch.seqs.push(s[start..end].to_vec());
                for p in reads {
                    batch.readouts.push((row, p));
                    owner.push(si);
                }
            }
        }
        let rows = self.run_inference(&batch)?;
        let mut out: Vec<Vec<Vec<f64>>> = seqs.iter().map(|s| Vec::with_capacity(s.len())).collect();
        for (si, row) in owner.into_iter().zip(rows) {
            out[si].push(row);
        }
        Ok(out)
    }

    fn score_bert_prefixes(&self, seqs: &[&[u32]]) -> Result<Vec<Vec<Vec<f64>>>, ModelError> {
        let mask = self.index.mask_token();
        let keep = self.l_max.saturating_sub(1);
        if keep == 0 {
            return Err(ModelError::Config("bert4rec needs l_max >= 2".into()));
        }
        let mut batch = SeqBatch::default();
        for s in seqs {
            for j in 1..=s.len() {
                let mut row = s[j.saturating_sub(keep)..j].to_vec();
                row.push(mask);
                batch.readouts.push((batch.seqs.len(), row.len() - 1));
                batch.seqs.push(row);
            }
        }
        let mut rows = self.run_inference(&batch)?.into_iter();
        Ok(seqs.iter().map(|s| rows.by_ref().take(s.len()).collect()).collect())
    }

    /// Scores for one prefix of item ids.
    pub fn score(&self, prefix: &[ItemId]) -> Result<Vec<f64>, ModelError> {
        if prefix.is_empty() {
            return Err(ModelError::EmptyPrefix);
        }
        let tokens = self.index.encode(prefix.iter().copied())?;
        let start = tokens.len().saturating_sub(self.l_max);
        let tail = &tokens[start..];
        let mut all = self.score_prefixes(&[tail])?;
        Ok(all.pop().and_then(|mut v| v.pop()).expect("one prefix scored"))
    }

    pub fn rank(&self, prefix: &[ItemId]) -> Result<RankedList, ModelError> {
        let scores = self.score(prefix)?;
        Ok(RankedList(
            rank_columns(&scores)
                .into_iter()
                .map(|c| self.index.item_ids()[c])
                .collect(),
        ))
    }
}
