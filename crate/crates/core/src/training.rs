//! Training instances, the three loss regimes and the optimisation loop
//! with early stopping on validation Recall@3.
//!
//! Causal models (LR, MLP, GRU, NARM, SASRec) train on session windows:
//! one sequence per session with a readout at every position, which yields
//! exactly the `(prefix, next item)` instances of [`augment_subsequences`]
//! while sharing the prefix computation. `batch_size` counts readouts.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamState, AutodiffError, Graph, NodeId, ParamStore, Tensor};
use crate::data::Dataset;
use crate::eval::{evaluate, EvalConfig, EvalError, EvalReport};
use crate::models::{
    markov_fit, pop_fit, prefix_windows, ItemIndex, ModelConfig, ModelError, ModelKind, Ranker, SeqBatch,
};

pub const RNG_ALGORITHM: &str = "ChaCha8";
/// Share of training sessions that must fit in `l_max` untruncated.
pub const DEFAULT_COVERAGE: f64 = 0.995;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("empty split: {0}")]
    Empty(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("training diverged in epoch {}", .0.diverged_at_epoch.unwrap_or(0))]
    Diverged(Box<RunManifest>),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Linear warmup length (BERT4Rec only).
    pub warmup_steps: u64,
    /// Cloze mask probability (BERT4Rec only).
    pub mask_prob: f64,
    /// Maximum sequence length; `None` derives it from the training split
    /// at [`DEFAULT_COVERAGE`].
    pub l_max: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            max_epochs: 25,
            patience: 3,
            batch_size: 128,
            warmup_steps: 10_000,
            mask_prob: 0.2,
            l_max: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let checks = [
            (self.lr > 0.0 && self.lr.is_finite(), "lr must be positive and finite"),
            (self.max_epochs > 0, "max_epochs must be positive"),
            (self.patience > 0, "patience must be positive"),
            (self.patience <= self.max_epochs, "patience must not exceed max_epochs"),
            (self.batch_size > 0, "batch_size must be positive"),
            (self.warmup_steps > 0, "warmup_steps must be positive"),
            (self.mask_prob > 0.0 && self.mask_prob < 1.0, "mask_prob must lie in (0, 1)"),
            (self.l_max != Some(0), "l_max must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            None => Ok(()),
            Some((_, why)) => Err(TrainError::Config(format!("invalid training config: {why}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: ModelConfig,
    pub train_config: TrainConfig,
    pub seed: u64,
    pub rng_algorithm: String,
    pub l_max: usize,
    pub conventions: Vec<String>,
    pub train_instances: usize,
    pub train_loss: Vec<f64>,
    pub val_recall_at_3: Vec<f64>,
    pub best_epoch: usize,
    pub stopping_epoch: usize,
    pub diverged_at_epoch: Option<usize>,
    pub checkpoint_path: Option<String>,
    pub test_metrics: Option<EvalReport>,
}

/// A training sequence with `(position, target token)` readouts.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub seq: Vec<u32>,
    pub readouts: Vec<(usize, u32)>,
}

/// Every `([s_1..s_j], s_{j+1})` pair, `j = 1..l-1`.
pub fn augment_subsequences<T: Clone>(sessions: &[Vec<T>]) -> Vec<(Vec<T>, T)> {
    sessions
        .iter()
        .flat_map(|s| (1..s.len()).map(move |j| (s[..j].to_vec(), s[j].clone())))
        .collect()
}

impl From<(Vec<u32>, u32)> for Example {
    fn from((seq, target): (Vec<u32>, u32)) -> Self {
        let last = seq.len().saturating_sub(1);
        Example {
            seq,
            readouts: vec![(last, target)],
        }
    }
}

/// Windows covering every augmented instance of `session` (see
/// [`prefix_windows`]); their readouts are those instances.
pub fn session_windows(session: &[u32], l_max: usize) -> Vec<Example> {
    if session.len() < 2 {
        return Vec::new();
    }
    prefix_windows(session.len() - 1, l_max)
        .into_iter()
        .map(|(start, end, reads)| Example {
            seq: session[start..end].to_vec(),
            readouts: reads.into_iter().map(|p| (p, session[start + p + 1])).collect(),
        })
        .collect()
}

/// Smallest `L` such that at least `coverage` of the lengths are `<= L`.
pub fn compute_l_max(lengths: &[usize], coverage: f64) -> Result<usize, TrainError> {
    if lengths.is_empty() {
        return Err(TrainError::Empty("no sessions to size l_max".into()));
    }
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(TrainError::Config(format!("coverage {coverage} outside (0, 1]")));
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    // need count(l <= L) >= coverage * n, in integers where possible
    let need = ((coverage * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[need.min(n) - 1])
}

/// A shuffled training batch: sequences plus one target per readout.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub batch: SeqBatch,
    pub targets: Vec<u32>,
}

/// Truncates each example to its last `l_max` tokens (readouts that fall
/// off are dropped), shuffles with `rng` and groups examples until a batch
/// holds at least `batch_size` readouts. Padding happens in the models:
/// rows are left-padded with token 0 ([`SeqBatch::padded`]) and masked
/// ([`SeqBatch::mask`]).
pub fn make_batches<R: Rng>(examples: &[Example], l_max: usize, batch_size: usize, rng: &mut R) -> Vec<TrainBatch> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let mut out = Vec::new();
    let mut cur = TrainBatch {
        batch: SeqBatch::default(),
        targets: Vec::new(),
    };
    for i in order {
        let e = &examples[i];
        let cut = e.seq.len().saturating_sub(l_max);
        let reads: Vec<(usize, u32)> = e.readouts.iter().filter(|r| r.0 >= cut).map(|&(p, t)| (p - cut, t)).collect();
        if reads.is_empty() {
            continue;
        }
        let row = cur.batch.seqs.len();
        cur.batch.seqs.push(e.seq[cut..].to_vec());
        for (p, t) in reads {
            cur.batch.readouts.push((row, p));
            cur.targets.push(t);
        }
        if cur.targets.len() >= batch_size {
            out.push(std::mem::replace(
                &mut cur,
                TrainBatch {
                    batch: SeqBatch::default(),
                    targets: Vec::new(),
                },
            ));
        }
    }
    if !cur.targets.is_empty() {
        out.push(cur);
    }
    out
}

/// Replaces each position by `mask_token` with probability `rho`, forcing
/// one uniformly chosen position when none was drawn. Returns the masked
/// sequence and the masked positions.
pub fn cloze_mask<R: Rng>(seq: &[u32], rho: f64, mask_token: u32, rng: &mut R) -> Result<(Vec<u32>, Vec<usize>), TrainError> {
    if seq.is_empty() {
        return Err(TrainError::Empty("cannot mask an empty sequence".into()));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(TrainError::Config(format!("mask probability {rho} outside (0, 1]")));
    }
    let mut masked = seq.to_vec();
    let mut positions: Vec<usize> = (0..seq.len()).filter(|_| rng.random::<f64>() < rho).collect();
    if positions.is_empty() {
        positions.push(rng.random_range(0..seq.len()));
    }
    for &p in &positions {
        masked[p] = mask_token;
    }
    Ok((masked, positions))
}

fn check_targets(targets: &[u32], n: usize) -> Result<(), TrainError> {
    match targets.iter().find(|&&t| t == 0 || t as usize > n) {
        Some(t) => Err(TrainError::Config(format!("target token {t} is padding or out of range"))),
        None => Ok(()),
    }
}

/// `-mean(log softmax(logits)[target])`; `targets` are item tokens and
/// select column `token - 1`.
pub fn loss_cross_entropy(g: &mut Graph, logits: NodeId, targets: &[u32]) -> Result<NodeId, TrainError> {
    check_targets(targets, g.value(logits).cols())?;
    let lp = g.log_softmax(logits)?;
    let cols: Vec<usize> = targets.iter().map(|&t| t as usize - 1).collect();
    let picked = g.pick(lp, &cols)?;
    let m = g.mean(picked)?;
    Ok(g.scale(m, -1.0)?)
}

/// `-mean(ln sigmoid(pos - neg))`.
pub fn loss_bpr(g: &mut Graph, pos: NodeId, neg: NodeId) -> Result<NodeId, TrainError> {
    let d = g.sub(pos, neg)?;
    let ls = g.log_sigmoid(d)?;
    let m = g.mean(ls)?;
    Ok(g.scale(m, -1.0)?)
}

/// One-vs-rest binary cross-entropy: per row, the sum over items of
/// `-[y ln sigmoid(x) + (1 - y) ln sigmoid(-x)]`, averaged over rows.
pub fn loss_binary_cross_entropy(g: &mut Graph, logits: NodeId, targets: &[u32]) -> Result<NodeId, TrainError> {
    let (rows, n) = (g.value(logits).rows(), g.value(logits).cols());
    check_targets(targets, n)?;
    if targets.len() != rows {
        return Err(TrainError::Config(format!("{} targets for {rows} rows", targets.len())));
    }
    let mut y = vec![0.0; rows * n];
    for (r, &t) in targets.iter().enumerate() {
        y[r * n + t as usize - 1] = 1.0;
    }
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let y = g.constant(Tensor::new(vec![rows, n], y)?);
    let not_y = g.constant(Tensor::new(vec![rows, n], not_y)?);
    let pos = g.log_sigmoid(logits)?;
    let flipped = g.scale(logits, -1.0)?;
    let neg = g.log_sigmoid(flipped)?;
    let a = g.mul(pos, y)?;
    let b = g.mul(neg, not_y)?;
    let both = g.add(a, b)?;
    let s = g.sum(both)?;
    Ok(g.scale(s, -1.0 / rows as f64)?)
}

/// Uniform negative in `1..=n`, different from `positive`.
pub fn sample_negative<R: Rng>(positive: u32, n: usize, rng: &mut R) -> u32 {
    debug_assert!(n >= 2);
    let k = rng.random_range(1..n as u32);
    if k >= positive {
        k + 1
    } else {
        k
    }
}

/// Patience-based stopping on a score that must strictly improve.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub epochs: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            ..Self::default()
        }
    }

    /// Records one epoch's score; returns `(improved, stop)`.
    pub fn update(&mut self, score: f64) -> (bool, bool) {
        self.epochs += 1;
        let improved = self.best.is_none_or(|b| score > b);
        if improved {
            self.best = Some(score);
            self.best_epoch = self.epochs;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        (improved, self.stale >= self.patience)
    }
}

/// Regime-specific loss of one batch.
fn batch_loss<R: Rng>(
    g: &mut Graph,
    ranker: &Ranker,
    params: &ParamStore,
    tb: &TrainBatch,
    rng: &mut R,
) -> Result<NodeId, TrainError> {
    let logits = ranker.logits(g, params, &tb.batch)?;
    match ranker.kind() {
        ModelKind::Lr => loss_binary_cross_entropy(g, logits, &tb.targets),
        ModelKind::Sasrec => {
            let n = ranker.n_items();
            check_targets(&tb.targets, n)?;
            let pos_cols: Vec<usize> = tb.targets.iter().map(|&t| t as usize - 1).collect();
            let neg_cols: Vec<usize> = tb
                .targets
                .iter()
                .map(|&t| sample_negative(t, n, rng) as usize - 1)
                .collect();
            let pos = g.pick(logits, &pos_cols)?;
            let neg = g.pick(logits, &neg_cols)?;
            loss_bpr(g, pos, neg)
        }
        _ => loss_cross_entropy(g, logits, &tb.targets),
    }
}

/// Loss of `batch` under `params`, on an inference graph; used by tests and
/// gradient checks.
pub fn loss_for(ranker: &Ranker, g: &mut Graph, params: &ParamStore, tb: &TrainBatch, seed: u64) -> Result<NodeId, TrainError> {
    batch_loss(g, ranker, params, tb, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn conventions(kind: ModelKind) -> Vec<String> {
    let mut c = vec![
        "optimizer: adam(beta1=0.9, beta2=0.999, eps=1e-8)".to_string(),
        "batch_size counts prediction instances (readouts)".to_string(),
        "sequences truncated to their last l_max items, left-padded with token 0".to_string(),
        "model selection: best validation Recall@3 (strict improvement), patience epochs".to_string(),
    ];
    match kind {
        ModelKind::Sasrec => c.push("bpr: one uniform negative per position, != positive, != pad, resampled each epoch".into()),
        ModelKind::Bert4rec => {
            c.push("warmup: linear 0 -> lr over warmup_steps, then constant".into());
            c.push("cloze: independent masking with mask_prob, at least one masked position".into());
        }
        ModelKind::Lr => c.push("loss: one-vs-rest binary cross-entropy".into()),
        _ => c.push("loss: cross-entropy over the item vocabulary".into()),
    }
    c
}

fn encode_sessions(index: &ItemIndex, d: &Dataset) -> Result<Vec<Vec<u32>>, TrainError> {
    Ok(index.encode_dataset(d)?.into_iter().filter(|s| s.len() >= 2).collect())
}

fn val_recall3(r: &Ranker, val: &Dataset) -> Result<f64, TrainError> {
    let cfg = EvalConfig { ks: vec![3], l_max: None };
    Ok(evaluate(r, val, &cfg)?.recall(3).expect("k = 3 requested"))
}

/// Trains (or fits, for the baselines) one model and returns the
/// best-validation-epoch ranker with its manifest.
pub fn train(model: &ModelConfig, cfg: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<(Ranker, RunManifest), TrainError> {
    cfg.validate()?;
    model.validate()?;
    let index = ItemIndex::from_vocab(&train.vocab)?;
    let seqs = encode_sessions(&index, train)?;
    if seqs.is_empty() {
        return Err(TrainError::Empty("training split has no session of length >= 2".into()));
    }
    if val.sessions().all(|s| s.len() < 2) {
        return Err(TrainError::Empty("validation split has no session of length >= 2".into()));
    }
    let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
    let l_max = match cfg.l_max {
        Some(l) => l,
        None => compute_l_max(&lengths, DEFAULT_COVERAGE)?,
    };
    let kind = model.kind();
    let mut manifest = RunManifest {
        model: model.clone(),
        train_config: cfg.clone(),
        seed: cfg.seed,
        rng_algorithm: RNG_ALGORITHM.into(),
        l_max,
        conventions: conventions(kind),
        train_instances: lengths.iter().map(|l| l - 1).sum(),
        train_loss: Vec::new(),
        val_recall_at_3: Vec::new(),
        best_epoch: 0,
        stopping_epoch: 0,
        diverged_at_epoch: None,
        checkpoint_path: None,
        test_metrics: None,
    };

    if !kind.is_neural() {
        let ranker = if kind == ModelKind::Pop { pop_fit(train)? } else { markov_fit(train)? };
        manifest.conventions = vec!["fitted by counting; no optimisation".into()];
        manifest.val_recall_at_3.push(val_recall3(&ranker, val)?);
        manifest.best_epoch = 1;
        manifest.stopping_epoch = 1;
        return Ok((ranker, manifest));
    }
    if index.n_items() < 2 {
        return Err(TrainError::Config("need at least two items".into()));
    }

    let mut ranker = Ranker::init(model.clone(), index, l_max, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005E_ED0F_EB0C);
    let mut adam = AdamState::new(&ranker.params, cfg.lr);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = ranker.params.clone();
    let bert = kind == ModelKind::Bert4rec;
    let windows: Vec<Example> = if bert {
        Vec::new()
    } else {
        seqs.iter().flat_map(|s| session_windows(s, l_max)).collect()
    };

    for epoch in 1..=cfg.max_epochs {
        let examples = if bert {
            let mask = ranker.index.mask_token();
            let mut ex = Vec::with_capacity(seqs.len());
            for s in &seqs {
                let tail = &s[s.len().saturating_sub(l_max)..];
                let (masked, pos) = cloze_mask(tail, cfg.mask_prob, mask, &mut rng)?;
                ex.push(Example {
                    seq: masked,
                    readouts: pos.into_iter().map(|p| (p, tail[p])).collect(),
                });
            }
            ex
        } else {
            windows.clone()
        };
        let batches = make_batches(&examples, l_max, cfg.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        for tb in &batches {
            let step_result = (|| -> Result<f64, TrainError> {
                let mut g = Graph::training(rng.random());
                let loss = batch_loss(&mut g, &ranker, &ranker.params, tb, &mut rng)?;
                let value = g.value(loss).item();
                let grads = g.backward(loss)?;
                let lr = if bert {
                    let step = (adam.step_count() + 1) as f64;
                    cfg.lr * (step / cfg.warmup_steps as f64).min(1.0)
                } else {
                    cfg.lr
                };
                adam.step(&mut ranker.params, &grads, lr)?;
                Ok(value)
            })();
            match step_result {
                Ok(v) if v.is_finite() && ranker.params.iter().all(|(_, _, t)| t.all_finite()) => loss_sum += v,
                Ok(_) | Err(TrainError::Model(ModelError::Autodiff(AutodiffError::NonFinite(_)))) => {
                    manifest.diverged_at_epoch = Some(epoch);
                    manifest.stopping_epoch = epoch;
                    return Err(TrainError::Diverged(Box::new(manifest)));
                }
                Err(e) => return Err(e),
            }
        }
        manifest.train_loss.push(loss_sum / batches.len().max(1) as f64);
        let score = val_recall3(&ranker, val)?;
        manifest.val_recall_at_3.push(score);
        let (improved, stop) = stopper.update(score);
        if improved {
            best_params = ranker.params.clone();
        }
        if stop {
            break;
        }
    }
    manifest.best_epoch = stopper.best_epoch;
    manifest.stopping_epoch = stopper.epochs;
    ranker.params = best_params;
    Ok((ranker, manifest))
}
