//! Synthetic match corpora with planted sequential structure.
//!
//! Every hero owns a first-order transition matrix (plus a start
//! distribution); sessions are random walks through it. Optional extras make
//! the corpus harder for first-order models: a shared second-order table
//! mixed into each step, and a rule that non-consumable items are never
//! bought twice in one session. The generating distributions are returned
//! as an [`Oracle`], which is the Bayes-optimal next-item predictor for the
//! corpus.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    Dataset, HeroEntry, HeroId, HeroVocab, ItemEntry, ItemId, ItemVocab, MatchRecord, Purchase, Session, Team,
    DEFAULT_MODE,
};

pub const RNG_ALGORITHM: &str = "ChaCha8";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible spec: {0}")]
    Infeasible(String),
    #[error("oracle: {0}")]
    Oracle(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_matches: usize,
    pub n_items: usize,
    pub n_heroes: usize,
    /// Scale applied to standard-normal logits of every transition row:
    /// 0 gives uniform rows, large values give near-deterministic rows.
    pub transition_sharpness: f64,
    pub consumable_rate: f64,
    pub mean_ls: f64,
    pub std_ls: f64,
    pub mean_duration_s: f64,
    pub std_duration_s: f64,
    /// Weight of the second-order table in each step's mixture (0 = pure
    /// first-order walk).
    #[serde(default)]
    pub second_order: f64,
    /// Forbid repurchasing a non-consumable item within a session.
    #[serde(default)]
    pub no_repeat: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_matches: 1000,
            n_items: 50,
            n_heroes: 1,
            transition_sharpness: 2.0,
            consumable_rate: 0.1,
            mean_ls: 10.0,
            std_ls: 3.0,
            mean_duration_s: 2400.0,
            std_duration_s: 480.0,
            second_order: 0.0,
            no_repeat: false,
            seed: 7,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: &str| Err(SynthError::Infeasible(m.to_string()));
        if self.n_items < 3 {
            return fail("n_items must be at least 3");
        }
        if self.n_matches == 0 || self.n_heroes == 0 {
            return fail("n_matches and n_heroes must be positive");
        }
        if !(0.0..=1.0).contains(&self.consumable_rate) || !(0.0..=1.0).contains(&self.second_order) {
            return fail("probabilities must lie in [0, 1]");
        }
        if !(self.transition_sharpness >= 0.0 && self.transition_sharpness.is_finite()) {
            return fail("transition_sharpness must be finite and non-negative");
        }
        if !(self.mean_ls > 0.0 && self.std_ls > 0.0 && self.mean_duration_s > 0.0 && self.std_duration_s > 0.0) {
            return fail("moments must be positive");
        }
        Ok(())
    }
}

/// Generating distributions of a synthetic corpus. Matrices are row-major
/// `n_items x n_items` with row `i - 1` holding `P(next | last = i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub rng_algorithm: String,
    pub seed: u64,
    pub n_items: usize,
    pub consumable: Vec<bool>,
    pub start: BTreeMap<HeroId, Vec<f64>>,
    pub matrices: BTreeMap<HeroId, Vec<f64>>,
    /// Mixture weight and `n^3` table `P(next | prev2, last)`, row
    /// `((prev2 - 1) * n + last - 1)`.
    pub second_order: Option<(f64, Vec<f64>)>,
    pub no_repeat: bool,
}

impl Oracle {
    /// True next-item distribution after `prefix` for `hero` (index
    /// `k` is item `k + 1`).
    pub fn next_distribution(&self, hero: HeroId, prefix: &[ItemId]) -> Result<Vec<f64>, SynthError> {
        let n = self.n_items;
        let Some(&last) = prefix.last() else {
            return self
                .start
                .get(&hero)
                .cloned()
                .ok_or_else(|| SynthError::Oracle(format!("unknown hero {hero}")));
        };
        let check = |id: ItemId| {
            if id == 0 || id as usize > n {
                Err(SynthError::Oracle(format!("item {id} outside 1..={n}")))
            } else {
                Ok(id as usize - 1)
            }
        };
        let li = check(last)?;
        let m = self
            .matrices
            .get(&hero)
            .ok_or_else(|| SynthError::Oracle(format!("unknown hero {hero}")))?;
        let mut dist = m[li * n..(li + 1) * n].to_vec();
        if let (Some((w, table)), true) = (&self.second_order, prefix.len() >= 2) {
            let pi = check(prefix[prefix.len() - 2])?;
            let row = &table[(pi * n + li) * n..(pi * n + li + 1) * n];
            for (d, s) in dist.iter_mut().zip(row) {
                *d = (1.0 - w) * *d + w * s;
            }
        }
        if self.no_repeat {
            for &id in prefix {
                let k = check(id)?;
                if !self.consumable[k] {
                    dist[k] = 0.0;
                }
            }
            let total: f64 = dist.iter().sum();
            if total > 0.0 {
                dist.iter_mut().for_each(|d| *d /= total);
            }
        }
        Ok(dist)
    }

    /// Items ordered by true next-item probability, ties by id.
    pub fn oracle_rank(&self, hero: HeroId, prefix: &[ItemId]) -> Result<Vec<ItemId>, SynthError> {
        let dist = self.next_distribution(hero, prefix)?;
        let mut ids: Vec<ItemId> = (1..=self.n_items as ItemId).collect();
        ids.sort_by(|a, b| {
            dist[*b as usize - 1]
                .total_cmp(&dist[*a as usize - 1])
                .then(a.cmp(b))
        });
        Ok(ids)
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub dataset: Dataset,
    pub oracle: Oracle,
}

fn softmax_row(logits: &mut [f64]) {
    crate::autodiff::softmax_in_place(logits);
}

fn random_row<R: Rng>(rng: &mut R, n: usize, sharpness: f64, boost: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n)
        .map(|j| {
            let z: f64 = StandardNormal.sample(rng);
            sharpness * z + boost(j)
        })
        .collect();
    softmax_row(&mut row);
    row
}

fn sample_index<R: Rng>(rng: &mut R, dist: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last item with positive mass
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(dist.len() - 1)
}

/// Consumables get this logit bonus for repeating themselves and for being
/// bought first.
const CONSUMABLE_BOOST: f64 = 1.5;

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_items;

    let n_consumable = (spec.consumable_rate * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut consumable = vec![false; n];
    for &i in &order[..n_consumable] {
        consumable[i] = true;
    }

    let mut start = BTreeMap::new();
    let mut matrices = BTreeMap::new();
    for hero in 1..=spec.n_heroes as HeroId {
        let s = random_row(&mut rng, n, spec.transition_sharpness, |j| {
            if consumable[j] {
                CONSUMABLE_BOOST
            } else {
                0.0
            }
        });
        let mut m = Vec::with_capacity(n * n);
        for i in 0..n {
            m.extend(random_row(&mut rng, n, spec.transition_sharpness, |j| {
                if i == j && consumable[j] {
                    CONSUMABLE_BOOST
                } else {
                    0.0
                }
            }));
        }
        start.insert(hero, s);
        matrices.insert(hero, m);
    }
    let second_order = (spec.second_order > 0.0).then(|| {
        let mut table = Vec::with_capacity(n * n * n);
        for _ in 0..n * n {
            table.extend(random_row(&mut rng, n, spec.transition_sharpness, |_| 0.0));
        }
        (spec.second_order, table)
    });
    let oracle = Oracle {
        rng_algorithm: RNG_ALGORITHM.to_string(),
        seed: spec.seed,
        n_items: n,
        consumable: consumable.clone(),
        start,
        matrices,
        second_order,
        no_repeat: spec.no_repeat,
    };

    let len_dist = Normal::new(spec.mean_ls, spec.std_ls).map_err(|e| SynthError::Infeasible(e.to_string()))?;
    let dur_dist =
        Normal::new(spec.mean_duration_s, spec.std_duration_s).map_err(|e| SynthError::Infeasible(e.to_string()))?;
    let max_len = (3.0 * spec.mean_ls).floor().max(2.0) as usize;
    let n_heroes = spec.n_heroes as HeroId;

    let mut matches = Vec::with_capacity(spec.n_matches);
    for mi in 0..spec.n_matches {
        let duration_s = (dur_dist.sample(&mut rng).round() as i64).max(60);
        let start_time = 1_600_000_000 + mi as i64 * 600 + rng.random_range(0..300);
        let mut heroes: Vec<HeroId> = (1..=n_heroes).collect();
        heroes.shuffle(&mut rng);
        let mut sessions = Vec::with_capacity(10);
        for slot in 0..10u8 {
            let hero = if spec.n_heroes >= 10 {
                heroes[slot as usize]
            } else {
                rng.random_range(1..=n_heroes)
            };
            let len = (len_dist.sample(&mut rng).round().max(2.0) as usize).min(max_len);
            let mut items: Vec<ItemId> = Vec::with_capacity(len);
            for _ in 0..len {
                let dist = oracle.next_distribution(hero, &items)?;
                if dist.iter().all(|&p| p == 0.0) {
                    break; // every non-consumable already bought
                }
                items.push(sample_index(&mut rng, &dist) as ItemId + 1);
            }
            if items.len() < 2 {
                return Err(SynthError::Infeasible("too few purchasable items for no_repeat sessions".into()));
            }
            let mut times: Vec<i64> = (0..items.len()).map(|_| rng.random_range(0..=duration_s)).collect();
            times.sort_unstable();
            sessions.push(Session {
                player_slot: slot,
                hero_id: hero,
                team: if slot < 5 { Team::Radiant } else { Team::Dire },
                purchases: items
                    .into_iter()
                    .zip(times)
                    .map(|(item_id, t_s)| Purchase { item_id, t_s })
                    .collect(),
            });
        }
        matches.push(MatchRecord {
            match_id: mi as i64 + 1,
            start_time,
            duration_s,
            game_mode: DEFAULT_MODE.to_string(),
            abandoned: false,
            sessions,
        });
    }

    let vocab = ItemVocab::new(
        (0..n)
            .map(|i| ItemEntry {
                item_id: i as ItemId + 1,
                name: format!("item{}", i + 1),
                purchasable: true,
                consumable: consumable[i],
            })
            .collect(),
    )
    .map_err(|e| SynthError::Infeasible(e.to_string()))?;
    let heroes = HeroVocab::new(
        (1..=n_heroes)
            .map(|h| HeroEntry {
                hero_id: h,
                name: format!("hero{h}"),
            })
            .collect(),
    )
    .map_err(|e| SynthError::Infeasible(e.to_string()))?;
    Ok(SynthCorpus {
        dataset: Dataset::new(vocab, heroes, matches),
        oracle,
    })
}
