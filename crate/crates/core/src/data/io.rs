//! Match-file and vocabulary ingestion.
//!
//! Match files hold one JSON object per line. Lines that do not satisfy the
//! schema are malformed: in strict mode the first one aborts parsing, in
//! lenient mode each is reported and skipped. Matches that parse but name
//! unknown items or heroes are kept and reported as invalid; preprocessing
//! removes them.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use super::types::{Dataset, HeroEntry, HeroVocab, ItemEntry, ItemVocab, MatchRecord};
use super::DataError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InvalidMatch {
    pub line: usize,
    pub match_id: i64,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ParseOutcome {
    pub dataset: Dataset,
    pub malformed: Vec<LineError>,
    pub invalid: Vec<InvalidMatch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    Strict,
    Lenient,
}

/// Parses every line of `input` into a raw, unfiltered dataset.
pub fn parse_matches<R: BufRead>(
    input: R,
    vocab: &ItemVocab,
    heroes: &HeroVocab,
    mode: ParseMode,
) -> Result<ParseOutcome, DataError> {
    let mut matches = Vec::new();
    let mut malformed = Vec::new();
    let mut invalid = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str::<MatchRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(|m| check_structure(&m).map(|()| m));
        match record {
            Ok(m) => {
                let reasons = unresolved_ids(&m, vocab, heroes);
                if !reasons.is_empty() {
                    invalid.push(InvalidMatch {
                        line: line_no,
                        match_id: m.match_id,
                        reasons,
                    });
                }
                matches.push(m);
            }
            Err(message) => {
                if mode == ParseMode::Strict {
                    return Err(DataError::Malformed { line: line_no, message });
                }
                malformed.push(LineError { line: line_no, message });
            }
        }
    }
    Ok(ParseOutcome {
        dataset: Dataset::new(vocab.clone(), heroes.clone(), matches),
        malformed,
        invalid,
    })
}

fn check_structure(m: &MatchRecord) -> Result<(), String> {
    if m.duration_s <= 0 {
        return Err(format!("match {}: duration_s must be positive", m.match_id));
    }
    if m.sessions.len() > 10 {
        return Err(format!("match {}: {} sessions (max 10)", m.match_id, m.sessions.len()));
    }
    for s in &m.sessions {
        if s.player_slot > 9 {
            return Err(format!("match {}: player_slot {} out of 0-9", m.match_id, s.player_slot));
        }
        let mut last = 0;
        for p in &s.purchases {
            if p.t_s < 0 || p.t_s > m.duration_s {
                return Err(format!("match {}: purchase time {} outside [0, {}]", m.match_id, p.t_s, m.duration_s));
            }
            if p.t_s < last {
                return Err(format!("match {}: purchases not ordered by t_s", m.match_id));
            }
            last = p.t_s;
        }
    }
    Ok(())
}

/// Reasons a structurally valid match references something outside the
/// vocabularies.
pub fn unresolved_ids(m: &MatchRecord, vocab: &ItemVocab, heroes: &HeroVocab) -> Vec<String> {
    let mut reasons = Vec::new();
    for s in &m.sessions {
        if !heroes.contains(s.hero_id) {
            reasons.push(format!("unknown hero_id {} in slot {}", s.hero_id, s.player_slot));
        }
        for p in &s.purchases {
            if vocab.get(p.item_id).is_none() {
                reasons.push(format!("unknown item_id {} in slot {}", p.item_id, s.player_slot));
            }
        }
    }
    reasons
}

pub fn read_items<R: Read>(input: R) -> Result<ItemVocab, DataError> {
    let mut rdr = csv::Reader::from_reader(input);
    let entries = rdr.deserialize::<ItemEntry>().collect::<Result<Vec<_>, _>>()?;
    ItemVocab::new(entries)
}

pub fn read_heroes<R: Read>(input: R) -> Result<HeroVocab, DataError> {
    let mut rdr = csv::Reader::from_reader(input);
    let entries = rdr.deserialize::<HeroEntry>().collect::<Result<Vec<_>, _>>()?;
    HeroVocab::new(entries)
}

pub fn write_items<W: Write>(vocab: &ItemVocab, out: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    for e in vocab.entries() {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_heroes<W: Write>(heroes: &HeroVocab, out: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    for e in heroes.entries() {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_matches<W: Write>(matches: &[MatchRecord], mut out: W) -> Result<(), DataError> {
    for m in matches {
        serde_json::to_writer(&mut out, m)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub const ITEMS_FILE: &str = "items.csv";
pub const HEROES_FILE: &str = "heroes.csv";
pub const MATCHES_FILE: &str = "matches.jsonl";
pub const PREPROCESS_FILE: &str = "preprocess.json";

pub fn load_vocabs(dir: &Path) -> Result<(ItemVocab, HeroVocab), DataError> {
    let items = read_items(open(&dir.join(ITEMS_FILE))?)?;
    let heroes = read_heroes(open(&dir.join(HEROES_FILE))?)?;
    Ok((items, heroes))
}

/// Loads `file` (a match file inside `dir`) with the vocabularies stored
/// next to it. A `preprocess.json` marker in `dir` tags the dataset as
/// already preprocessed.
pub fn load_match_file(dir: &Path, file: &str, mode: ParseMode) -> Result<ParseOutcome, DataError> {
    let (items, heroes) = load_vocabs(dir)?;
    let reader = BufReader::new(open(&dir.join(file))?);
    let mut outcome = parse_matches(reader, &items, &heroes, mode)?;
    let marker = dir.join(PREPROCESS_FILE);
    if marker.exists() {
        let params = serde_json::from_reader(open(&marker)?)?;
        outcome.dataset.processed = Some(params);
    }
    Ok(outcome)
}

/// Writes vocabularies, the match file and (for preprocessed data) the
/// marker into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path, file: &str) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    write_items(&dataset.vocab, create(&dir.join(ITEMS_FILE))?)?;
    write_heroes(&dataset.heroes, create(&dir.join(HEROES_FILE))?)?;
    write_matches(&dataset.matches, BufWriter::new(create(&dir.join(file))?))?;
    if let Some(params) = &dataset.processed {
        serde_json::to_writer_pretty(create(&dir.join(PREPROCESS_FILE))?, params)?;
    }
    Ok(())
}

fn open(path: &Path) -> Result<File, DataError> {
    File::open(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<File, DataError> {
    File::create(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))
}
