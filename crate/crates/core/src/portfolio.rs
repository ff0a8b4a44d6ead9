//! Travel portfolios: per-location dwell accounting and population rank
//! curves.
//!
//! A *dwell interval* says "this user stayed at this location from `start`
//! until `end`". Summing those per location and splitting each interval
//! exactly at the day/night thresholds (08:00 and 20:00 by default) yields a
//! user's ranked *portfolio*: rank 1 is where most total time was spent.
//! Averaging per-rank dwell across a population produces the day and night
//! rank curves; commuter populations show a Zipf-like day curve and a night
//! curve that collapses past the first few ranks.

use std::collections::{BTreeMap, BTreeSet};

use crate::geo::{LocationId, UserId};
use crate::time::{Timestamp, SECONDS_PER_DAY};

/// Default start of the day window (08:00) in seconds of day.
pub const DEFAULT_DAY_START: i64 = 8 * 3600;
/// Default start of the night window (20:00) in seconds of day.
pub const DEFAULT_NIGHT_START: i64 = 20 * 3600;

/// A stay: one user at one location over `[start, end)`.
///
/// Producers (the gap segmenter) guarantee `start < end` and a duration
/// below the configured maximum gap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DwellInterval {
    pub location: LocationId,
    pub start: Timestamp,
    pub end: Timestamp,
}

impl DwellInterval {
    pub fn duration_seconds(&self) -> i64 {
        self.end.seconds() - self.start.seconds()
    }
}

/// One line of a ranked portfolio. Dwell values are seconds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PortfolioEntry {
    pub rank: u32,
    pub location: LocationId,
    pub day_dwell: i64,
    pub night_dwell: i64,
    pub total_dwell: i64,
}

/// A user's locations ranked by total dwell (descending; ties broken by
/// ascending location id; ranks contiguous from 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DwellPortfolio {
    pub user: UserId,
    pub entries: Vec<PortfolioEntry>,
}

impl DwellPortfolio {
    pub fn total_dwell(&self) -> i64 {
        self.entries.iter().map(|e| e.total_dwell).sum()
    }
}

/// Which half of the civil day a statistic refers to.
#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub enum Period {
    Day,
    Night,
}

/// Population mean dwell per rank, in seconds per user per observed day.
#[derive(Debug, Clone, PartialEq)]
pub struct RankCurve {
    pub period: Period,
    /// `(rank, mean dwell)` with ranks ascending.
    pub points: Vec<(u32, f64)>,
}

/// An ordinary least-squares fit of `ln(mean_dwell)` against `ln(rank)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub rss: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PortfolioError {
    #[error("user {0} has no observed-day count (or zero)")]
    MissingObservedDays(UserId),
    #[error("log-log fit needs at least 3 in-range points, found {0}")]
    TooFewPoints(usize),
    #[error("log-log fit range contains non-positive dwell at rank {0}")]
    NonPositiveDwell(u32),
}

/// Splits an interval into its exact overlap with the day window
/// `[day_start, night_start)` and the complementary night window, across
/// however many midnights it spans. Returns `(day_seconds, night_seconds)`;
/// the two always sum to the interval's duration.
pub fn split_day_night(iv: &DwellInterval, day_start: i64, night_start: i64) -> (i64, i64) {
    debug_assert!(0 <= day_start && day_start < night_start && night_start <= SECONDS_PER_DAY);
    let (s, e) = (iv.start.seconds(), iv.end.seconds());
    let mut day = 0;
    for d in iv.start.day_index()..=Timestamp::from_seconds(e - 1).day_index() {
        let window_start = d * SECONDS_PER_DAY + day_start;
        let window_end = d * SECONDS_PER_DAY + night_start;
        day += (e.min(window_end) - s.max(window_start)).max(0);
    }
    (day, (e - s) - day)
}

/// Sums a user's intervals into a ranked portfolio. Empty input produces an
/// empty portfolio.
pub fn accumulate_dwell(
    user: UserId,
    intervals: &[DwellInterval],
    day_start: i64,
    night_start: i64,
) -> DwellPortfolio {
    let mut sums: BTreeMap<&LocationId, (i64, i64)> = BTreeMap::new();
    for iv in intervals {
        let (day, night) = split_day_night(iv, day_start, night_start);
        let slot = sums.entry(&iv.location).or_default();
        slot.0 += day;
        slot.1 += night;
    }
    let mut entries: Vec<PortfolioEntry> = sums
        .into_iter()
        .map(|(location, (day_dwell, night_dwell))| PortfolioEntry {
            rank: 0,
            location: location.clone(),
            day_dwell,
            night_dwell,
            total_dwell: day_dwell + night_dwell,
        })
        .collect();
    // Descending total; the BTreeMap already yields ascending location ids,
    // and the sort is stable, so ties stay id-ordered.
    entries.sort_by_key(|e| std::cmp::Reverse(e.total_dwell));
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i as u32 + 1;
    }
    DwellPortfolio { user, entries }
}

/// Number of distinct calendar days a user's intervals touch. An interval
/// spanning midnight observes both days.
pub fn observed_days(intervals: &[DwellInterval]) -> u32 {
    let mut days = BTreeSet::new();
    for iv in intervals {
        let last = Timestamp::from_seconds(iv.end.seconds() - 1).day_index();
        for d in iv.start.day_index()..=last {
            days.insert(d);
        }
    }
    days.len() as u32
}

/// Builds the population mean-dwell-per-rank curve for one period. The point
/// at rank `r` averages, over the users whose portfolio has a rank `r`, that
/// entry's period dwell divided by the user's observed days.
pub fn population_rank_curve<'a>(
    portfolios: impl IntoIterator<Item = &'a DwellPortfolio>,
    period: Period,
    observed_days: &BTreeMap<UserId, u32>,
) -> Result<RankCurve, PortfolioError> {
    let mut acc: BTreeMap<u32, (f64, u64)> = BTreeMap::new();
    for p in portfolios {
        let days = observed_days
            .get(&p.user)
            .copied()
            .filter(|&d| d >= 1)
            .ok_or_else(|| PortfolioError::MissingObservedDays(p.user.clone()))?;
        for e in &p.entries {
            let dwell = match period {
                Period::Day => e.day_dwell,
                Period::Night => e.night_dwell,
            };
            let slot = acc.entry(e.rank).or_default();
            slot.0 += dwell as f64 / days as f64;
            slot.1 += 1;
        }
    }
    Ok(RankCurve {
        period,
        points: acc
            .into_iter()
            .map(|(rank, (sum, count))| (rank, sum / count as f64))
            .collect(),
    })
}

/// Ordinary least squares of `ln(mean_dwell)` on `ln(rank)` over the ranks
/// in `[r_min, r_max]`. Needs at least 3 in-range points, all positive.
pub fn loglog_slope(
    curve: &RankCurve,
    r_min: u32,
    r_max: u32,
) -> Result<LogLogFit, PortfolioError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(rank, dwell) in &curve.points {
        if rank < r_min || rank > r_max {
            continue;
        }
        if dwell <= 0.0 {
            return Err(PortfolioError::NonPositiveDwell(rank));
        }
        xs.push((rank as f64).ln());
        ys.push(dwell.ln());
    }
    if xs.len() < 3 {
        return Err(PortfolioError::TooFewPoints(xs.len()));
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (intercept + slope * x)).powi(2))
        .sum();
    Ok(LogLogFit {
        slope,
        intercept,
        rss,
    })
}
