use serde::Serialize;

use super::io::unresolved_ids;
use super::types::{Dataset, MatchRecord, PreprocessParams, SplitSpec, PPM};
use super::DataError;

/// How many matches each filter removed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PreprocessReport {
    pub input: usize,
    pub wrong_mode: usize,
    pub abandoned: usize,
    pub invalid_items: usize,
    pub short_session: usize,
    pub trimmed_short: usize,
    pub trimmed_long: usize,
    pub output: usize,
}

/// Filters a raw dataset, in order:
///
/// 1. keep matches whose `game_mode` equals `mode_filter`;
/// 2. drop abandoned matches;
/// 3. drop matches with a non-purchasable or unknown item, or an unknown hero;
/// 4. drop every match that contains a session with fewer than two purchases;
/// 5. sort by duration and drop `floor(n * trim_q)` matches from each end.
///
/// Matches with fewer than ten sessions are kept. The result is ordered by
/// start time (ties keep input order) and tagged with the parameters used;
/// calling this again on a dataset tagged with the same parameters returns
/// it unchanged.
pub fn preprocess(d: &Dataset, mode_filter: &str, trim_q: f64) -> Result<(Dataset, PreprocessReport), DataError> {
    if !(0.0..0.5).contains(&trim_q) {
        return Err(DataError::Preprocess(format!("trim_q {trim_q} outside [0, 0.5)")));
    }
    let params = PreprocessParams {
        mode_filter: mode_filter.to_string(),
        trim_q,
    };
    if d.processed.as_ref() == Some(&params) {
        let report = PreprocessReport {
            input: d.matches.len(),
            output: d.matches.len(),
            ..Default::default()
        };
        return Ok((d.clone(), report));
    }

    let mut report = PreprocessReport {
        input: d.matches.len(),
        ..Default::default()
    };
    let mut kept: Vec<(usize, &MatchRecord)> = Vec::with_capacity(d.matches.len());
    for (i, m) in d.matches.iter().enumerate() {
        if m.game_mode != mode_filter {
            report.wrong_mode += 1;
        } else if m.abandoned {
            report.abandoned += 1;
        } else if !unresolved_ids(m, &d.vocab, &d.heroes).is_empty()
            || m.sessions.iter().flat_map(|s| s.items()).any(|id| !d.vocab.is_purchasable(id))
        {
            report.invalid_items += 1;
        } else if m.sessions.iter().any(|s| s.len() < 2) {
            report.short_session += 1;
        } else {
            kept.push((i, m));
        }
    }

    kept.sort_by_key(|(i, m)| (m.duration_s, *i));
    let cut = trim_count(kept.len(), trim_q);
    report.trimmed_short = cut;
    report.trimmed_long = cut;
    let mut trimmed: Vec<(usize, &MatchRecord)> = kept[cut..kept.len() - cut].to_vec();
    trimmed.sort_by_key(|(i, m)| (m.start_time, *i));

    report.output = trimmed.len();
    if trimmed.is_empty() {
        return Err(DataError::Empty("preprocessing removed every match".into()));
    }
    let mut out = d.with_matches(trimmed.into_iter().map(|(_, m)| m.clone()).collect());
    out.processed = Some(params);
    Ok((out, report))
}

/// Nearest-rank cut count `floor(n * q)`, computed on parts per million.
pub fn trim_count(n: usize, q: f64) -> usize {
    let q_ppm = (q * PPM as f64).round() as u128;
    ((n as u128 * q_ppm) / PPM as u128) as usize
}

/// Splits `d` (ordered by start time) at match granularity into
/// train/validation/test at `floor(n * train)` and `floor(n * (train + val))`.
pub fn split_chronological(d: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset), DataError> {
    if !d.is_sorted_by_start() {
        return Err(DataError::Split("matches are not ordered by start_time".into()));
    }
    let n = d.matches.len() as u128;
    let b1 = (n * spec.train_ppm as u128 / PPM as u128) as usize;
    let b2 = (n * (spec.train_ppm + spec.val_ppm) as u128 / PPM as u128) as usize;
    let sizes = [b1, b2 - b1, d.matches.len() - b2];
    if sizes.contains(&0) {
        return Err(DataError::Split(format!(
            "split of {} matches yields empty part (sizes {sizes:?})",
            d.matches.len()
        )));
    }
    Ok((
        d.with_matches(d.matches[..b1].to_vec()),
        d.with_matches(d.matches[b1..b2].to_vec()),
        d.with_matches(d.matches[b2..].to_vec()),
    ))
}
