use std::io::Write;

use serde::Serialize;

use super::types::{Dataset, ItemId};
use super::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotSeries {
    /// In-game purchase times of one item.
    ItemPurchaseTime(ItemId),
    MatchDuration,
    /// Histogram of session lengths in unit-width bins; `bin_s` and the
    /// rolling window do not apply.
    SessionLength,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlotRow {
    pub bin_start_s: i64,
    pub value: f64,
}

/// Bins the events of `series`, normalises each bin by the total number of
/// events and applies a centred rolling mean over `window_bins` bins (edge
/// windows shrink). Bins run from 0 to the last non-empty bin.
pub fn plot_data(d: &Dataset, series: PlotSeries, bin_s: i64, window_bins: usize) -> Result<Vec<PlotRow>, DataError> {
    if bin_s <= 0 {
        return Err(DataError::Plot(format!("bin width {bin_s} must be positive")));
    }
    if window_bins.is_multiple_of(2) {
        return Err(DataError::Plot(format!("window of {window_bins} bins must be odd")));
    }
    let (events, width, window): (Vec<i64>, i64, usize) = match series {
        PlotSeries::ItemPurchaseTime(id) => (
            d.sessions()
                .flat_map(|s| s.purchases.iter())
                .filter(|p| p.item_id == id)
                .map(|p| p.t_s)
                .collect(),
            bin_s,
            window_bins,
        ),
        PlotSeries::MatchDuration => (d.matches.iter().map(|m| m.duration_s).collect(), bin_s, window_bins),
        PlotSeries::SessionLength => (d.sessions().map(|s| s.len() as i64).collect(), 1, 1),
    };
    if events.is_empty() {
        return Err(DataError::Plot(format!("no events for {series:?}")));
    }
    let last_bin = events.iter().map(|t| t / width).max().unwrap_or(0) as usize;
    let mut counts = vec![0u64; last_bin + 1];
    for t in &events {
        counts[(t / width) as usize] += 1;
    }
    let total = events.len() as f64;
    let normed: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    let smoothed = rolling_mean(&normed, window);
    Ok(smoothed
        .into_iter()
        .enumerate()
        .map(|(i, value)| PlotRow {
            bin_start_s: i as i64 * width,
            value,
        })
        .collect())
}

/// Centred rolling mean; windows shrink at the edges so the output length
/// matches the input.
pub fn rolling_mean(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(values.len() - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

pub fn write_plot_csv<W: Write>(rows: &[PlotRow], out: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::test_support::{fixture, match_with};
    use crate::data::types::Purchase;

    fn with_times(times: &[i64]) -> Dataset {
        let mut m = match_with(1, 1, 3000, &[times.len()]);
        m.sessions[0].purchases = times.iter().map(|&t_s| Purchase { item_id: 2, t_s }).collect();
        fixture(vec![m])
    }

    #[test]
    fn single_event_normalises_to_one() {
        let rows = plot_data(&with_times(&[130]), PlotSeries::ItemPurchaseTime(2), 60, 1).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows.iter().map(|r| r.value).collect::<Vec<_>>(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn hand_binned_example() {
        let rows = plot_data(&with_times(&[30, 90, 95]), PlotSeries::ItemPurchaseTime(2), 60, 1).unwrap();
        assert_eq!(
            rows,
            vec![
                PlotRow { bin_start_s: 0, value: 1.0 / 3.0 },
                PlotRow { bin_start_s: 60, value: 2.0 / 3.0 }
            ]
        );
    }

    #[test]
    fn constant_series_unchanged_by_rolling() {
        assert_eq!(rolling_mean(&[0.25; 7], 5), vec![0.25; 7]);
        assert_eq!(rolling_mean(&[1.0, 2.0, 3.0], 3), vec![1.5, 2.0, 2.5]);
    }

    #[test]
    fn no_events_is_error() {
        assert!(plot_data(&with_times(&[30]), PlotSeries::ItemPurchaseTime(3), 60, 1).is_err());
        assert!(plot_data(&with_times(&[30]), PlotSeries::ItemPurchaseTime(2), 60, 2).is_err());
        assert!(plot_data(&with_times(&[30]), PlotSeries::ItemPurchaseTime(2), 0, 1).is_err());
    }

    #[test]
    fn session_lengths_histogram() {
        let d = fixture(vec![match_with(1, 1, 3000, &[2, 2, 4])]);
        let rows = plot_data(&d, PlotSeries::SessionLength, 60, 5).unwrap();
        let values: Vec<f64> = rows.iter().map(|r| r.value).collect();
        assert_eq!(values, vec![0.0, 0.0, 2.0 / 3.0, 0.0, 1.0 / 3.0]);
    }

    #[test]
    fn csv_header() {
        let mut buf = Vec::new();
        write_plot_csv(&[PlotRow { bin_start_s: 0, value: 0.5 }], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "bin_start_s,value\n0,0.5\n");
    }
}
