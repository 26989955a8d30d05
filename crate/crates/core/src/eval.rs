//! Next-item evaluation: every position `j >= 2` of every session is one
//! event; the prefix before it is scored over the full vocabulary and the
//! rank of the true item gives Recall@k and NDCG@k.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, HeroId, ItemId, Session};
use crate::models::{ItemIndex, ModelError, Ranker};
use crate::synth::{Oracle, SynthError};

/// Sessions scored per forward pass.
const CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty split: {0}")]
    Empty(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Oracle(#[from] SynthError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Extra prefix truncation on top of the model's own `l_max`.
    pub l_max: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![1, 3], l_max: None }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.ks.is_empty() || self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::Config(format!("ks {:?} must be positive and strictly ascending", self.ks)));
        }
        if self.l_max == Some(0) {
            return Err(EvalError::Config("l_max must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAtK {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub config: EvalConfig,
    pub events: u64,
    pub sessions: usize,
    pub metrics: Vec<MetricAtK>,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&MetricAtK> {
        self.metrics.iter().find(|m| m.k == k)
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.at(k).map(|m| m.recall)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.at(k).map(|m| m.ndcg)
    }
}

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// `1 / log2(rank + 1)` inside the cutoff, 0 outside (one relevant item, so
/// the ideal DCG is 1).
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// 1-based rank of column `target` under the (score desc, column asc)
/// order, without sorting.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(c, &s)| s > t || (s == t && c < target))
        .count()
}

/// Anything that scores session prefixes over the columns of an
/// [`ItemIndex`].
pub trait PrefixScorer: Sync {
    fn index(&self) -> &ItemIndex;

    /// For each session, scores after every prefix `items[..j]`,
    /// `j = 1..len` (the last item is never a prefix end).
    fn score_sessions(&self, sessions: &[&Session]) -> Result<Vec<Vec<Vec<f64>>>, EvalError>;
}

impl PrefixScorer for Ranker {
    fn index(&self) -> &ItemIndex {
        &self.index
    }

    fn score_sessions(&self, sessions: &[&Session]) -> Result<Vec<Vec<Vec<f64>>>, EvalError> {
        let tokens: Vec<Vec<u32>> = sessions
            .iter()
            .map(|s| self.index.encode(s.items().take(s.len() - 1)))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&[u32]> = tokens.iter().map(Vec::as_slice).collect();
        Ok(self.score_prefixes(&refs)?)
    }
}

/// The generating distributions of a synthetic corpus as a scorer
/// (conditioned on each session's hero).
pub struct OracleScorer<'a> {
    oracle: &'a Oracle,
    index: ItemIndex,
}

impl<'a> OracleScorer<'a> {
    pub fn new(oracle: &'a Oracle) -> Result<Self, EvalError> {
        let index = ItemIndex::new((1..=oracle.n_items as ItemId).collect())?;
        Ok(Self { oracle, index })
    }

    fn session(&self, hero: HeroId, items: &[ItemId]) -> Result<Vec<Vec<f64>>, EvalError> {
        (1..items.len())
            .map(|j| Ok(self.oracle.next_distribution(hero, &items[..j])?))
            .collect()
    }
}

impl PrefixScorer for OracleScorer<'_> {
    fn index(&self) -> &ItemIndex {
        &self.index
    }

    fn score_sessions(&self, sessions: &[&Session]) -> Result<Vec<Vec<Vec<f64>>>, EvalError> {
        sessions
            .iter()
            .map(|s| self.session(s.hero_id, &s.items().collect::<Vec<_>>()))
            .collect()
    }
}

/// Ranks of every event in split order (sessions in dataset order, then
/// position).
pub fn event_ranks<S: PrefixScorer + ?Sized>(scorer: &S, split: &Dataset) -> Result<Vec<usize>, EvalError> {
    let sessions: Vec<&Session> = split.sessions().filter(|s| s.len() >= 2).collect();
    let chunks: Vec<Vec<usize>> = sessions
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<Vec<usize>, EvalError> {
            let scores = scorer.score_sessions(chunk)?;
            let mut ranks = Vec::new();
            for (s, per_prefix) in chunk.iter().zip(scores) {
                for (j, target) in s.items().enumerate().skip(1) {
                    let col = scorer.index().token(target)? as usize - 1;
                    ranks.push(rank_of(&per_prefix[j - 1], col));
                }
            }
            Ok(ranks)
        })
        .collect::<Result<_, _>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Averages per-event metrics in event order.
pub fn report_from_ranks(model: &str, cfg: &EvalConfig, ranks: &[usize], sessions: usize) -> EvalReport {
    let metrics = cfg
        .ks
        .iter()
        .map(|&k| {
            let (mut r, mut n) = (0.0, 0.0);
            for &rank in ranks {
                r += recall_at_k(rank, k);
                n += ndcg_at_k(rank, k);
            }
            let denom = ranks.len().max(1) as f64;
            MetricAtK {
                k,
                recall: r / denom,
                ndcg: n / denom,
            }
        })
        .collect();
    EvalReport {
        model: model.to_string(),
        config: cfg.clone(),
        events: ranks.len() as u64,
        sessions,
        metrics,
    }
}

pub fn evaluate_scorer<S: PrefixScorer + ?Sized>(
    scorer: &S,
    name: &str,
    split: &Dataset,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let sessions = split.sessions().filter(|s| s.len() >= 2).count();
    if sessions == 0 {
        return Err(EvalError::Empty("no session with at least two purchases".into()));
    }
    let ranks = event_ranks(scorer, split)?;
    Ok(report_from_ranks(name, cfg, &ranks, sessions))
}

pub fn evaluate(r: &Ranker, split: &Dataset, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    match cfg.l_max {
        Some(l) if l < r.l_max => {
            let mut shorter = r.clone();
            shorter.l_max = l;
            evaluate_scorer(&shorter, r.kind().name(), split, cfg)
        }
        _ => evaluate_scorer(r, r.kind().name(), split, cfg),
    }
}

/// Leaderboard CSV (`model,rec@1,ndcg@1,rec@3,ndcg@3,events`) sorted by
/// Recall@3 descending, then NDCG@3 descending, then model name.
pub fn compare_reports(reports: &[EvalReport]) -> Result<String, EvalError> {
    let first = reports.first().ok_or_else(|| EvalError::Empty("no reports".into()))?;
    if reports.iter().any(|r| r.config != first.config) {
        return Err(EvalError::Config("reports were produced with different evaluation configs".into()));
    }
    let need: BTreeSet<usize> = [1, 3].into();
    if !need.iter().all(|k| first.at(*k).is_some()) {
        return Err(EvalError::Config("leaderboard needs k = 1 and k = 3".into()));
    }
    let mut rows: Vec<&EvalReport> = reports.iter().collect();
    let key = |r: &EvalReport| (r.recall(3).unwrap_or(0.0), r.ndcg(3).unwrap_or(0.0));
    rows.sort_by(|a, b| {
        let (ka, kb) = (key(a), key(b));
        kb.0.total_cmp(&ka.0)
            .then(kb.1.total_cmp(&ka.1))
            .then(a.model.cmp(&b.model))
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "rec@1", "ndcg@1", "rec@3", "ndcg@3", "events"])?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            format!("{:.4}", r.recall(1).unwrap_or(0.0)),
            format!("{:.4}", r.ndcg(1).unwrap_or(0.0)),
            format!("{:.4}", r.recall(3).unwrap_or(0.0)),
            format!("{:.4}", r.ndcg(3).unwrap_or(0.0)),
            r.events.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
