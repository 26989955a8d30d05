//! Match data model, ingestion, preprocessing, chronological splitting and
//! descriptive statistics.

mod io;
mod plot;
mod preprocess;
mod stats;
mod types;

use thiserror::Error;

pub use io::{
    load_match_file, load_vocabs, parse_matches, read_heroes, read_items, save_dataset, unresolved_ids, write_heroes,
    write_items, write_matches, InvalidMatch, LineError, ParseMode, ParseOutcome, HEROES_FILE, ITEMS_FILE,
    MATCHES_FILE, PREPROCESS_FILE,
};
pub use plot::{plot_data, rolling_mean, write_plot_csv, PlotRow, PlotSeries};
pub use preprocess::{preprocess, split_chronological, trim_count, PreprocessReport};
pub use stats::{
    compute_stats, frequency_ranking, kendall_tau, validate_split_representativeness, DatasetStats,
    RepresentativenessReport,
};
pub use types::{
    Dataset, HeroEntry, HeroId, HeroVocab, ItemEntry, ItemId, ItemVocab, MatchRecord, PreprocessParams, Purchase,
    Session, SplitSpec, Team, PPM,
};

/// Game mode kept by default during preprocessing.
pub const DEFAULT_MODE: &str = "ranked_all_pick";
/// Fraction trimmed from each end of the duration distribution.
pub const DEFAULT_TRIM_Q: f64 = 0.025;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("preprocess: {0}")]
    Preprocess(String),
    #[error("empty dataset: {0}")]
    Empty(String),
    #[error("split: {0}")]
    Split(String),
    #[error("ranking: {0}")]
    Ranking(String),
    #[error("plot data: {0}")]
    Plot(String),
    #[error("io: {0}")]
    Io(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}
