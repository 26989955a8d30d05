use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;

use super::types::{Dataset, HeroId, ItemId};
use super::DataError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub n_matches: usize,
    pub n_sessions: usize,
    pub n_purchases: u64,
    pub n_items_observed: usize,
    pub n_heroes_observed: usize,
    /// Mean session length.
    pub mean_ls: f64,
    /// Population standard deviation of session length.
    pub std_ls: f64,
    pub item_freq: BTreeMap<ItemId, u64>,
    pub hero_freq: BTreeMap<HeroId, u64>,
}

pub fn compute_stats(d: &Dataset) -> Result<DatasetStats, DataError> {
    let n_sessions = d.n_sessions();
    if n_sessions == 0 {
        return Err(DataError::Empty("no sessions to describe".into()));
    }
    let mut item_freq = BTreeMap::new();
    let mut hero_freq = BTreeMap::new();
    let mut sum = 0.0;
    let mut lengths = Vec::with_capacity(n_sessions);
    for s in d.sessions() {
        *hero_freq.entry(s.hero_id).or_insert(0) += 1;
        for id in s.items() {
            *item_freq.entry(id).or_insert(0) += 1;
        }
        lengths.push(s.len() as f64);
        sum += s.len() as f64;
    }
    let mean = sum / n_sessions as f64;
    let var = lengths.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n_sessions as f64;
    Ok(DatasetStats {
        n_matches: d.matches.len(),
        n_sessions,
        n_purchases: item_freq.values().sum(),
        n_items_observed: item_freq.len(),
        n_heroes_observed: hero_freq.len(),
        mean_ls: mean,
        std_ls: var.sqrt(),
        item_freq,
        hero_freq,
    })
}

/// Kendall's tau-a between two rankings of the same id set:
/// `(concordant - discordant) / (n (n - 1) / 2)`.
///
/// Rankings must be tie-free; break frequency ties before calling. Rankings
/// of fewer than two ids are trivially identical and give 1.
pub fn kendall_tau(a: &[u32], b: &[u32]) -> Result<f64, DataError> {
    if a.len() != b.len() {
        return Err(DataError::Ranking(format!("lengths differ: {} vs {}", a.len(), b.len())));
    }
    let pos_b: HashMap<u32, usize> = b.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    if pos_b.len() != b.len() || a.iter().collect::<HashSet<_>>().len() != a.len() {
        return Err(DataError::Ranking("ranking contains duplicate ids".into()));
    }
    let ranks: Vec<usize> = a
        .iter()
        .map(|id| pos_b.get(id).copied().ok_or_else(|| DataError::Ranking(format!("id {id} missing from second ranking"))))
        .collect::<Result<_, _>>()?;
    let n = ranks.len();
    if n < 2 {
        return Ok(1.0);
    }
    let mut balance: i64 = 0;
    for i in 0..n {
        for j in i + 1..n {
            balance += if ranks[i] < ranks[j] { 1 } else { -1 };
        }
    }
    Ok(balance as f64 / (n * (n - 1) / 2) as f64)
}

/// Ids ordered by frequency (descending), ties by id (ascending). Ids in
/// `universe` absent from `freq` count as zero.
pub fn frequency_ranking(freq: &BTreeMap<u32, u64>, universe: &[u32]) -> Vec<u32> {
    let mut ids = universe.to_vec();
    ids.sort_by_key(|id| (std::cmp::Reverse(freq.get(id).copied().unwrap_or(0)), *id));
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepresentativenessReport {
    pub tau_items: f64,
    pub tau_heroes: f64,
    pub all_items_present: bool,
    pub all_heroes_present: bool,
}

/// Compares item-purchase and hero-pick frequency rankings of `part`
/// against `whole`, over the ids observed in `whole`.
pub fn validate_split_representativeness(whole: &Dataset, part: &Dataset) -> Result<RepresentativenessReport, DataError> {
    let w = compute_stats(whole)?;
    let p = compute_stats(part)?;
    let items: Vec<u32> = w.item_freq.keys().copied().collect();
    let heroes: Vec<u32> = w.hero_freq.keys().copied().collect();
    Ok(RepresentativenessReport {
        tau_items: kendall_tau(&frequency_ranking(&w.item_freq, &items), &frequency_ranking(&p.item_freq, &items))?,
        tau_heroes: kendall_tau(&frequency_ranking(&w.hero_freq, &heroes), &frequency_ranking(&p.hero_freq, &heroes))?,
        all_items_present: items.iter().all(|id| p.item_freq.contains_key(id)),
        all_heroes_present: heroes.iter().all(|id| p.hero_freq.contains_key(id)),
    })
}
