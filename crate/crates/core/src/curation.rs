//! Dataset-construction heuristics: patch gridding, cloud filtering, label
//! entropy ranking, temporal sequence selection and SAR date pairing.

use std::cmp::Ordering;

use chrono::{Datelike, Months, NaiveDate};
use ndarray::ArrayView2;
use serde::Serialize;

use crate::region::Timestamp;
use crate::{Error, Result};

/// Maximum revisits kept per location.
pub const MAX_REVISITS: usize = 10;
pub const DENSE_COUNT: usize = 6;
pub const SEASONAL_COUNT: usize = 4;
/// Months between consecutive seasonal anchors.
pub const SEASONAL_STEP_MONTHS: u32 = 3;

/// Top-left offsets of the non-overlapping `window`-sized crops of a
/// `capture_h x capture_w` capture, row-major.
pub fn patch_grid(capture_h: usize, capture_w: usize, window: usize) -> Vec<(usize, usize)> {
    if window == 0 {
        return Vec::new();
    }
    let (rows, cols) = (capture_h / window, capture_w / window);
    (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i * window, j * window)))
        .collect()
}

/// Fraction of set pixels in a binary cloud mask.
pub fn cloud_fraction(mask: ArrayView2<'_, bool>) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::Empty("cloud mask"));
    }
    let n = mask.iter().filter(|&&v| v).count();
    Ok(n as f64 / mask.len() as f64)
}

/// Shannon entropy (nats) of the class histogram of a label map.
pub fn scl_entropy(labels: ArrayView2<'_, u16>, n_classes: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("label map"));
    }
    let mut hist = vec![0usize; n_classes];
    for &l in labels.iter() {
        let l = l as usize;
        if l >= n_classes {
            return Err(Error::LabelOutOfRange { label: l, n_classes });
        }
        hist[l] += 1;
    }
    let total = labels.len() as f64;
    Ok(hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Candidate {
    pub offset: (usize, usize),
    pub cloud_fraction: f64,
    pub scl_entropy: f64,
}

fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.scl_entropy
        .total_cmp(&a.scl_entropy)
        .then(a.cloud_fraction.total_cmp(&b.cloud_fraction))
        .then(a.offset.cmp(&b.offset))
}

/// Keep candidates with `cloud_fraction < cloud_max`, order them by entropy
/// (descending), then cloud fraction, then offset, and return the first `k`.
pub fn rank_candidates(candidates: &[Candidate], k: usize, cloud_max: f64) -> Vec<Candidate> {
    let mut kept: Vec<Candidate> = candidates
        .iter()
        .filter(|c| c.cloud_fraction < cloud_max)
        .copied()
        .collect();
    kept.sort_by(candidate_order);
    kept.truncate(k);
    kept
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DateSequence {
    pub dates: Vec<Timestamp>,
    pub dense_count: usize,
    pub seasonal_count: usize,
}

fn to_date(ts: &Timestamp) -> NaiveDate {
    let year = if ts.year == 0 { 2019 } else { ts.year as i32 };
    let month = if (1..=12).contains(&ts.month) { ts.month as u32 } else { 6 };
    let day = if ts.day == 0 { 15 } else { ts.day as u32 };
    // clamp impossible days (e.g. Feb 30) to the month's last day
    (1..=day)
        .rev()
        .find_map(|d| NaiveDate::from_ymd_opt(year, month, d))
        .expect("day 1 always exists")
}

/// Position on a continuous day axis. Unknown components count as
/// mid-range values: year 2019, month 6, day 15, hour 12.
pub fn day_ordinal(ts: &Timestamp) -> f64 {
    let hour = ts.hour_of_day().unwrap_or(12) as f64;
    to_date(ts).num_days_from_ce() as f64 + hour / 24.0
}

fn nearest(available: &[Timestamp], target: f64, taken: &[bool]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, ts) in available.iter().enumerate() {
        if taken[i] {
            continue;
        }
        let d = (day_ordinal(ts) - target).abs();
        // strict < keeps the earlier date on ties; `available` is ascending
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i)
}

/// Choose at most ten dates: a dense block of six consecutive observations
/// with minimal span, plus the four dates nearest to 3, 6, 9 and 12 months
/// after the block's last date.
pub fn select_temporal_sequence(available: &[Timestamp]) -> Result<DateSequence> {
    if available.is_empty() {
        return Err(Error::Empty("available dates"));
    }
    let mut sorted = available.to_vec();
    sorted.sort_by(|a, b| day_ordinal(a).total_cmp(&day_ordinal(b)).then(a.cmp(b)));
    sorted.dedup();
    if sorted.len() < MAX_REVISITS {
        let n = sorted.len();
        return Ok(DateSequence {
            dates: sorted,
            dense_count: n,
            seasonal_count: 0,
        });
    }
    let ord: Vec<f64> = sorted.iter().map(day_ordinal).collect();
    let start = (0..=sorted.len() - DENSE_COUNT)
        .min_by(|&a, &b| {
            let sa = ord[a + DENSE_COUNT - 1] - ord[a];
            let sb = ord[b + DENSE_COUNT - 1] - ord[b];
            sa.total_cmp(&sb).then(a.cmp(&b))
        })
        .unwrap();
    let mut taken = vec![false; sorted.len()];
    taken[start..start + DENSE_COUNT].iter_mut().for_each(|t| *t = true);
    let anchor = sorted[start + DENSE_COUNT - 1];
    let anchor_date = to_date(&anchor);
    let anchor_frac = ord[start + DENSE_COUNT - 1] - anchor_date.num_days_from_ce() as f64;
    for k in 1..=SEASONAL_COUNT as u32 {
        let target_date = anchor_date
            .checked_add_months(Months::new(SEASONAL_STEP_MONTHS * k))
            .expect("date within chrono range");
        let target = target_date.num_days_from_ce() as f64 + anchor_frac;
        let i = nearest(&sorted, target, &taken).expect("at least ten distinct dates");
        taken[i] = true;
    }
    let dates = sorted
        .into_iter()
        .zip(taken)
        .filter_map(|(d, t)| t.then_some(d))
        .collect();
    Ok(DateSequence {
        dates,
        dense_count: DENSE_COUNT,
        seasonal_count: SEASONAL_COUNT,
    })
}

/// For every reference date, the SAR date closest in days (earlier on ties).
pub fn pair_sar_dates(s2_dates: &[Timestamp], s1_available: &[Timestamp]) -> Result<Vec<Timestamp>> {
    if s1_available.is_empty() {
        return Err(Error::Empty("s1 dates"));
    }
    Ok(s2_dates
        .iter()
        .map(|d| {
            let target = day_ordinal(d);
            *s1_available
                .iter()
                .min_by(|a, b| {
                    let da = (day_ordinal(a) - target).abs();
                    let db = (day_ordinal(b) - target).abs();
                    da.total_cmp(&db).then(day_ordinal(a).total_cmp(&day_ordinal(b)))
                })
                .unwrap()
        })
        .collect())
}

/// How per-date cloud fractions of a candidate sequence are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum CloudAggregation {
    #[default]
    Mean,
    Max,
}

pub fn sequence_cloud_score(fractions: &[f64], agg: CloudAggregation) -> Result<f64> {
    if fractions.is_empty() {
        return Err(Error::Empty("cloud fractions"));
    }
    Ok(match agg {
        CloudAggregation::Mean => fractions.iter().sum::<f64>() / fractions.len() as f64,
        CloudAggregation::Max => fractions.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Index of the candidate sequence with the lowest cloud score (first on ties).
pub fn best_sequence(per_sequence_fractions: &[Vec<f64>], agg: CloudAggregation) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, f) in per_sequence_fractions.iter().enumerate() {
        let s = sequence_cloud_score(f, agg)?;
        if best.map_or(true, |(b, _)| s < b) {
            best = Some((s, i));
        }
    }
    best.map(|(_, i)| i).ok_or(Error::Empty("candidate sequences"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn day(n: i64) -> Timestamp {
        let d = NaiveDate::from_ymd_opt(2019, 1, 1).unwrap() + chrono::Days::new(n as u64);
        Timestamp::date(d.year() as u16, d.month() as u8, d.day() as u8)
    }

    #[test]
    fn grid_examples() {
        assert_eq!(patch_grid(1000, 800, 384), vec![(0, 0), (0, 384), (384, 0), (384, 384)]);
        assert_eq!(patch_grid(384, 384, 384), vec![(0, 0)]);
        assert!(patch_grid(383, 500, 384).is_empty());
    }

    #[test]
    fn cloud_fraction_examples() {
        assert_eq!(cloud_fraction(Array2::from_elem((3, 3), true).view()).unwrap(), 1.0);
        assert_eq!(cloud_fraction(Array2::from_elem((3, 3), false).view()).unwrap(), 0.0);
        let mut m = Array2::from_elem((4, 4), false);
        for i in 0..4 {
            m[[i, i]] = true;
        }
        assert_eq!(cloud_fraction(m.view()).unwrap(), 0.25);
        assert!(cloud_fraction(Array2::<bool>::from_elem((0, 3), true).view()).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(scl_entropy(Array2::from_elem((5, 5), 3u16).view(), 11).unwrap(), 0.0);
        let uniform = Array2::from_shape_fn((11, 4), |(i, _)| i as u16);
        assert!((scl_entropy(uniform.view(), 11).unwrap() - 11f64.ln()).abs() < 1e-9);
        let half = Array2::from_shape_fn((2, 8), |(i, _)| i as u16);
        assert!((scl_entropy(half.view(), 11).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(
            scl_entropy(Array2::from_elem((1, 1), 11u16).view(), 11),
            Err(Error::LabelOutOfRange { label: 11, .. })
        ));
    }

    fn cand(row: usize, cloud: f64, ent: f64) -> Candidate {
        Candidate { offset: (row, 0), cloud_fraction: cloud, scl_entropy: ent }
    }

    #[test]
    fn ranking_examples() {
        let cloudy = vec![cand(0, 1.0, 2.0), cand(1, 1.0, 1.0)];
        assert!(rank_candidates(&cloudy, 3, 0.3).is_empty());
        let cs = vec![cand(0, 0.0, 0.1), cand(1, 0.0, 2.0), cand(2, 0.0, 1.0)];
        let top = rank_candidates(&cs, 2, 0.3);
        assert_eq!(top, vec![cs[1], cs[2]]);
        assert_eq!(rank_candidates(&cs, 10, 0.3), vec![cs[1], cs[2], cs[0]]);
    }

    #[test]
    fn ranking_ties_use_cloud_then_offset() {
        let cs = vec![cand(5, 0.2, 1.0), cand(3, 0.1, 1.0), cand(1, 0.2, 1.0)];
        let top = rank_candidates(&cs, 3, 0.3);
        assert_eq!(top, vec![cs[1], cs[2], cs[0]]);
        // cloud_max is a strict bound
        assert_eq!(rank_candidates(&cs, 3, 0.2), vec![cs[1]]);
    }

    #[test]
    fn ten_dates_are_forced() {
        let dates: Vec<_> = (0..10).map(|i| day(i * 37)).collect();
        let seq = select_temporal_sequence(&dates).unwrap();
        assert_eq!(seq.dates, dates);
        assert_eq!((seq.dense_count, seq.seasonal_count), (6, 4));
    }

    #[test]
    fn short_sequences_are_returned_whole() {
        let dates = vec![day(0), day(10), day(20)];
        let seq = select_temporal_sequence(&dates).unwrap();
        assert_eq!(seq.dates, dates);
        assert_eq!((seq.dense_count, seq.seasonal_count), (3, 0));
        assert!(select_temporal_sequence(&[]).is_err());
    }

    #[test]
    fn dense_block_prefers_minimal_span() {
        // gaps: 30 days except a tight cluster of six starting at day 300
        let mut dates: Vec<_> = (0..10).map(|i| day(i * 30)).collect();
        dates.extend((0..6).map(|i| day(301 + i)));
        dates.extend((0..6).map(|i| day(400 + i * 45)));
        dates.sort();
        let seq = select_temporal_sequence(&dates).unwrap();
        let dense: Vec<_> = (0..6).map(|i| day(301 + i)).collect();
        for d in &dense {
            assert!(seq.dates.contains(d));
        }
        assert_eq!(seq.dates.len(), 10);
        assert!(seq.dates.windows(2).all(|w| day_ordinal(&w[0]) < day_ordinal(&w[1])));
    }

    #[test]
    fn sar_pairing_examples() {
        assert_eq!(pair_sar_dates(&[day(100)], &[day(90), day(105)]).unwrap(), vec![day(105)]);
        assert_eq!(pair_sar_dates(&[day(100)], &[day(95), day(105)]).unwrap(), vec![day(95)]);
        let s2 = vec![day(3), day(40), day(77)];
        assert_eq!(pair_sar_dates(&s2, &s2).unwrap(), s2);
        assert!(pair_sar_dates(&s2, &[]).is_err());
    }

    #[test]
    fn unknown_components_are_mid_range() {
        let a = Timestamp::UNKNOWN;
        let b = Timestamp::with_hour(2019, 6, 15, 12);
        assert_eq!(day_ordinal(&a), day_ordinal(&b));
    }

    #[test]
    fn sequence_scores() {
        let seqs = vec![vec![0.1, 0.5], vec![0.3, 0.3], vec![0.0, 0.6]];
        assert_eq!(best_sequence(&seqs, CloudAggregation::Mean).unwrap(), 0);
        assert_eq!(best_sequence(&seqs, CloudAggregation::Max).unwrap(), 1);
        assert!(sequence_cloud_score(&[], CloudAggregation::Mean).is_err());
    }
}
