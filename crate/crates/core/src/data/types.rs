use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::DataError;

pub type ItemId = u32;
pub type HeroId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemEntry {
    pub item_id: ItemId,
    pub name: String,
    #[serde(with = "flag")]
    pub purchasable: bool,
    #[serde(with = "flag")]
    pub consumable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeroEntry {
    pub hero_id: HeroId,
    pub name: String,
}

/// The items that can appear in purchase histories. Id 0 is reserved for
/// padding and never names an item.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ItemVocab {
    entries: Vec<ItemEntry>,
    by_id: HashMap<ItemId, usize>,
}

impl ItemVocab {
    pub fn new(entries: Vec<ItemEntry>) -> Result<Self, DataError> {
        let mut by_id = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.item_id == 0 {
                return Err(DataError::Vocab("item id 0 is reserved for padding".into()));
            }
            if by_id.insert(e.item_id, i).is_some() {
                return Err(DataError::Vocab(format!("duplicate item id {}", e.item_id)));
            }
        }
        if !entries.iter().any(|e| e.purchasable) {
            return Err(DataError::Vocab("no purchasable items".into()));
        }
        Ok(Self { entries, by_id })
    }

    pub fn entries(&self) -> &[ItemEntry] {
        &self.entries
    }

    pub fn get(&self, id: ItemId) -> Option<&ItemEntry> {
        self.by_id.get(&id).map(|&i| &self.entries[i])
    }

    pub fn is_purchasable(&self, id: ItemId) -> bool {
        self.get(id).is_some_and(|e| e.purchasable)
    }

    /// Purchasable item ids in ascending order.
    pub fn purchasable_ids(&self) -> Vec<ItemId> {
        let mut ids: Vec<_> = self.entries.iter().filter(|e| e.purchasable).map(|e| e.item_id).collect();
        ids.sort_unstable();
        ids
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HeroVocab {
    entries: Vec<HeroEntry>,
    ids: HashSet<HeroId>,
}

impl HeroVocab {
    pub fn new(entries: Vec<HeroEntry>) -> Result<Self, DataError> {
        let mut ids = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !ids.insert(e.hero_id) {
                return Err(DataError::Vocab(format!("duplicate hero id {}", e.hero_id)));
            }
        }
        Ok(Self { entries, ids })
    }

    pub fn entries(&self) -> &[HeroEntry] {
        &self.entries
    }

    pub fn contains(&self, id: HeroId) -> bool {
        self.ids.contains(&id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Purchase {
    pub item_id: ItemId,
    pub t_s: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Team {
    Radiant,
    Dire,
}

/// One player's purchases within one match.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Session {
    pub player_slot: u8,
    pub hero_id: HeroId,
    pub team: Team,
    pub purchases: Vec<Purchase>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.purchases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.purchases.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.purchases.iter().map(|p| p.item_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchRecord {
    pub match_id: i64,
    pub start_time: i64,
    pub duration_s: i64,
    pub game_mode: String,
    pub abandoned: bool,
    pub sessions: Vec<Session>,
}

/// Parameters a dataset has already been filtered with. Present only on
/// preprocessed datasets; see [`super::preprocess`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessParams {
    pub mode_filter: String,
    pub trim_q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: ItemVocab,
    pub heroes: HeroVocab,
    pub matches: Vec<MatchRecord>,
    pub processed: Option<PreprocessParams>,
}

impl Dataset {
    pub fn new(vocab: ItemVocab, heroes: HeroVocab, matches: Vec<MatchRecord>) -> Self {
        Self {
            vocab,
            heroes,
            matches,
            processed: None,
        }
    }

    /// Same vocabularies, different matches.
    pub fn with_matches(&self, matches: Vec<MatchRecord>) -> Self {
        Self {
            vocab: self.vocab.clone(),
            heroes: self.heroes.clone(),
            matches,
            processed: self.processed.clone(),
        }
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.matches.iter().flat_map(|m| m.sessions.iter())
    }

    pub fn n_sessions(&self) -> usize {
        self.matches.iter().map(|m| m.sessions.len()).sum()
    }

    pub fn is_sorted_by_start(&self) -> bool {
        self.matches.windows(2).all(|w| w[0].start_time <= w[1].start_time)
    }
}

/// Train/validation/test proportions, held as parts per million so that
/// split boundaries are integer-exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ppm: u64,
    pub val_ppm: u64,
    pub test_ppm: u64,
}

pub const PPM: u64 = 1_000_000;

impl SplitSpec {
    pub fn new(train_ppm: u64, val_ppm: u64, test_ppm: u64) -> Result<Self, DataError> {
        if train_ppm == 0 || val_ppm == 0 || test_ppm == 0 {
            return Err(DataError::Split("every fraction must be positive".into()));
        }
        if train_ppm + val_ppm + test_ppm != PPM {
            return Err(DataError::Split(format!(
                "fractions must sum to 1 (got {} ppm)",
                train_ppm + val_ppm + test_ppm
            )));
        }
        Ok(Self {
            train_ppm,
            val_ppm,
            test_ppm,
        })
    }

    /// Fractions are rounded to the nearest part per million.
    pub fn from_fractions(train: f64, val: f64, test: f64) -> Result<Self, DataError> {
        let ppm = |f: f64| -> Result<u64, DataError> {
            if !(f > 0.0 && f < 1.0) {
                return Err(DataError::Split(format!("fraction {f} outside (0, 1)")));
            }
            Ok((f * PPM as f64).round() as u64)
        };
        Self::new(ppm(train)?, ppm(val)?, ppm(test)?)
    }

    /// 94% / 1% / 5%.
    pub fn default_chronological() -> Self {
        Self::new(940_000, 10_000, 50_000).expect("valid")
    }
}

mod flag {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(de::Error::custom(format!("expected 0 or 1, got {other}"))),
        }
    }
}
