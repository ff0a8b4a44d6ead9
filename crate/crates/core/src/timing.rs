//! Per-user-day commute timing proxies and their aggregation.
//!
//! A call placed from home just before leaving and a call placed from work
//! just after arriving bracket the morning commute from the outside, so the
//! gap between them is an *upper estimate* of the true travel time:
//!
//! * morning: depart = last home call strictly before noon, arrive = first
//!   work call strictly before noon;
//! * evening: arrive = first home call at/after noon, depart = last work
//!   call at/after noon that precedes it.
//!
//! Proxies are only meaningful for users who call often enough, so each leg
//! is gated by a frequent-caller test (≥ 1 call/hour inside the leg's window
//! by default). One sample per user-day per leg; aggregation bins samples by
//! commute distance.
//!
//! The literal evening rule can latch onto a lunchtime home call; such
//! samples (arrival before 15:00) are emitted but flagged so downstream
//! aggregation can exclude them.

use std::collections::BTreeMap;
use std::fmt;

use crate::geo::{CallEvent, UserId};
use crate::homework::HomeWorkAssignment;
use crate::time::Timestamp;

/// Noon: the morning/evening divider, seconds of day.
pub const NOON: i64 = 12 * 3600;
/// Frequent-caller window for the morning leg, seconds of day (half-open).
pub const MORNING_WINDOW: (i64, i64) = (5 * 3600, 12 * 3600);
/// Frequent-caller window for the evening leg, seconds of day (half-open).
pub const EVENING_WINDOW: (i64, i64) = (12 * 3600, 22 * 3600);
/// Default minimum call rate (calls/hour) inside a leg window.
pub const DEFAULT_MIN_CALL_RATE: f64 = 1.0;
/// Evening arrivals before this time of day are flagged as implausible.
pub const FLAG_ARRIVAL_BEFORE: i64 = 15 * 3600;
/// Histogram bucket width for all time-of-day and duration plots, minutes.
pub const BUCKET_MINUTES: f64 = 10.0;

/// Morning or evening commute leg.
#[derive(Debug, Copy, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Leg {
    Morning,
    Evening,
}

impl fmt::Display for Leg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Leg::Morning => "morning",
            Leg::Evening => "evening",
        })
    }
}

/// One user-day commute proxy.
#[derive(Debug, Clone, PartialEq)]
pub struct CommuteSample {
    pub user: UserId,
    pub date: chrono::NaiveDate,
    pub leg: Leg,
    pub depart: Timestamp,
    pub arrive: Timestamp,
    /// `arrive − depart`, minutes; strictly positive.
    pub duration_minutes: f64,
    /// The user's commute distance, carried along for binning.
    pub distance_km: f64,
    /// Evening samples arriving implausibly early (lunchtime home calls).
    pub flagged: bool,
}

/// Why a user-day produced no sample for a leg.
#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub enum TimingReject {
    /// No qualifying call from the home tower in the leg's half of the day.
    NoHomeCall,
    /// No qualifying call from the work tower.
    NoWorkCall,
    /// Both towers called, but in an order that brackets no commute.
    InvertedOrder,
}

impl fmt::Display for TimingReject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimingReject::NoHomeCall => "no_home_call",
            TimingReject::NoWorkCall => "no_work_call",
            TimingReject::InvertedOrder => "inverted_order",
        })
    }
}

/// Knobs for proxy extraction. All times are seconds of day.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingConfig {
    pub noon: i64,
    pub morning_window: (i64, i64),
    pub evening_window: (i64, i64),
    pub min_call_rate: f64,
    /// Evening arrivals before this are flagged.
    pub flag_arrival_before: i64,
    /// Whether flagged samples participate in aggregated outputs.
    pub include_flagged: bool,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            noon: NOON,
            morning_window: MORNING_WINDOW,
            evening_window: EVENING_WINDOW,
            min_call_rate: DEFAULT_MIN_CALL_RATE,
            flag_arrival_before: FLAG_ARRIVAL_BEFORE,
            include_flagged: true,
        }
    }
}

/// True iff the user-day's call rate inside `window` (seconds of day,
/// half-open) is at least `min_rate` calls/hour. The comparison is
/// inclusive: exactly one call per hour qualifies. A zero threshold
/// accepts everyone.
pub fn is_frequent_caller(events: &[CallEvent], window: (i64, i64), min_rate: f64) -> bool {
    let (start, end) = window;
    debug_assert!(start < end, "window must be non-empty");
    let count = events
        .iter()
        .filter(|e| {
            let sod = e.stamp.seconds_of_day();
            sod >= start && sod < end
        })
        .count();
    let hours = (end - start) as f64 / 3600.0;
    count as f64 / hours >= min_rate
}

/// Extracts the morning proxy from one user-day of time-sorted events:
/// depart = last home call strictly before noon, arrive = first work call
/// strictly before noon; the pair must bracket a positive interval.
pub fn morning_commute(
    events: &[CallEvent],
    hw: &HomeWorkAssignment,
    distance_km: f64,
    cfg: &TimingConfig,
) -> Result<CommuteSample, TimingReject> {
    let before_noon = |e: &&CallEvent| e.stamp.seconds_of_day() < cfg.noon;
    let depart = events
        .iter()
        .rfind(|e| before_noon(e) && e.tower == hw.home)
        .ok_or(TimingReject::NoHomeCall)?;
    let arrive = events
        .iter()
        .filter(before_noon)
        .find(|e| e.tower == hw.work)
        .ok_or(TimingReject::NoWorkCall)?;
    if depart.stamp >= arrive.stamp {
        return Err(TimingReject::InvertedOrder);
    }
    Ok(sample(
        hw,
        Leg::Morning,
        depart.stamp,
        arrive.stamp,
        distance_km,
        false,
    ))
}

/// Extracts the evening proxy: arrive = first home call at/after noon,
/// depart = last work call at/after noon that still precedes the arrival.
/// Arrivals before the plausibility threshold are flagged, not dropped.
pub fn evening_commute(
    events: &[CallEvent],
    hw: &HomeWorkAssignment,
    distance_km: f64,
    cfg: &TimingConfig,
) -> Result<CommuteSample, TimingReject> {
    let afternoon = |e: &&CallEvent| e.stamp.seconds_of_day() >= cfg.noon;
    let arrive = events
        .iter()
        .filter(afternoon)
        .find(|e| e.tower == hw.home)
        .ok_or(TimingReject::NoHomeCall)?;
    let mut work_calls = events
        .iter()
        .filter(afternoon)
        .filter(|e| e.tower == hw.work)
        .peekable();
    if work_calls.peek().is_none() {
        return Err(TimingReject::NoWorkCall);
    }
    let depart = work_calls
        .rfind(|e| e.stamp < arrive.stamp)
        .ok_or(TimingReject::InvertedOrder)?;
    let flagged = arrive.stamp.seconds_of_day() < cfg.flag_arrival_before;
    Ok(sample(
        hw,
        Leg::Evening,
        depart.stamp,
        arrive.stamp,
        distance_km,
        flagged,
    ))
}

fn sample(
    hw: &HomeWorkAssignment,
    leg: Leg,
    depart: Timestamp,
    arrive: Timestamp,
    distance_km: f64,
    flagged: bool,
) -> CommuteSample {
    debug_assert!(depart < arrive);
    CommuteSample {
        user: hw.user.clone(),
        date: depart.date(),
        leg,
        depart,
        arrive,
        duration_minutes: (arrive.seconds() - depart.seconds()) as f64 / 60.0,
        distance_km,
        flagged,
    }
}

/// Runs both legs over every calendar day of a user's time-sorted event
/// stream, gating each leg by the frequent-caller test. Returns one sample
/// per qualifying user-day-leg.
pub fn extract_samples(
    events: &[CallEvent],
    hw: &HomeWorkAssignment,
    distance_km: f64,
    cfg: &TimingConfig,
) -> Vec<CommuteSample> {
    let mut samples = Vec::new();
    let mut day_start = 0;
    while day_start < events.len() {
        let day = events[day_start].stamp.day_index();
        let day_end = day_start
            + events[day_start..]
                .iter()
                .take_while(|e| e.stamp.day_index() == day)
                .count();
        let day_events = &events[day_start..day_end];
        if is_frequent_caller(day_events, cfg.morning_window, cfg.min_call_rate) {
            if let Ok(s) = morning_commute(day_events, hw, distance_km, cfg) {
                samples.push(s);
            }
        }
        if is_frequent_caller(day_events, cfg.evening_window, cfg.min_call_rate) {
            if let Ok(s) = evening_commute(day_events, hw, distance_km, cfg) {
                samples.push(s);
            }
        }
        day_start = day_end;
    }
    samples
}

/// Ascending distance-bin edges; bin `i` spans `[edges[i], edges[i+1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceBins {
    edges: Vec<f64>,
}

impl DistanceBins {
    /// Bins for departure/arrival timing plots: 0–2.5–5–10–20–50 km.
    pub fn timing_preset() -> Self {
        DistanceBins {
            edges: vec![0.0, 2.5, 5.0, 10.0, 20.0, 50.0],
        }
    }

    /// Bins for duration plots: 0–5–10–20–40–80 km.
    pub fn duration_preset() -> Self {
        DistanceBins {
            edges: vec![0.0, 5.0, 10.0, 20.0, 40.0, 80.0],
        }
    }

    /// Edges must be non-negative and strictly ascending, at least two.
    pub fn new(edges: Vec<f64>) -> Option<Self> {
        if edges.len() < 2 || edges[0] < 0.0 {
            return None;
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return None;
        }
        Some(DistanceBins { edges })
    }

    /// Number of bins.
    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false // at least one bin by construction
    }

    /// Index of the bin containing `km`, or `None` outside the covered range.
    pub fn index_of(&self, km: f64) -> Option<usize> {
        if km < self.edges[0] || km >= *self.edges.last().expect("≥2 edges") {
            return None;
        }
        Some(
            self.edges
                .windows(2)
                .position(|w| km < w[1])
                .expect("in range"),
        )
    }

    /// Human- and filename-friendly label, e.g. `"2.5-5"`.
    pub fn label(&self, bin: usize) -> String {
        format!("{}-{}", self.edges[bin], self.edges[bin + 1])
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }
}

/// A density-normalized histogram over fixed-width minute buckets. Only
/// occupied buckets are stored; densities are per minute, so the masses
/// `density × bucket_minutes` of a non-empty histogram sum to 1.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Histogram {
    /// `bucket start (minutes) → density (per minute)`.
    pub buckets: BTreeMap<i64, f64>,
}

impl Histogram {
    /// Builds from raw minute values (times of day or durations).
    pub fn from_minutes(values: impl IntoIterator<Item = f64>) -> Self {
        let mut counts: BTreeMap<i64, u64> = BTreeMap::new();
        let mut n = 0u64;
        for v in values {
            let bucket = (v / BUCKET_MINUTES).floor() as i64 * BUCKET_MINUTES as i64;
            *counts.entry(bucket).or_default() += 1;
            n += 1;
        }
        let norm = n as f64 * BUCKET_MINUTES;
        Histogram {
            buckets: counts
                .into_iter()
                .map(|(b, c)| (b, c as f64 / norm))
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    /// Total mass `Σ density × width`; 1 for any non-empty histogram.
    pub fn mass(&self) -> f64 {
        self.buckets.values().sum::<f64>() * BUCKET_MINUTES
    }

    /// Start minute of the densest bucket (smallest on ties).
    pub fn mode_bucket(&self) -> Option<i64> {
        self.buckets
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&b, _)| b)
    }
}

/// Which proxy timestamp to histogram.
#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub enum ProxyField {
    Depart,
    Arrive,
}

/// Per-distance-bin time-of-day histograms of one proxy for one leg.
/// Out-of-range distances are ignored; empty bins yield empty histograms.
pub fn timing_distribution(
    samples: &[CommuteSample],
    bins: &DistanceBins,
    leg: Leg,
    field: ProxyField,
) -> Vec<Histogram> {
    let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); bins.len()];
    for s in samples.iter().filter(|s| s.leg == leg) {
        if let Some(i) = bins.index_of(s.distance_km) {
            let stamp = match field {
                ProxyField::Depart => s.depart,
                ProxyField::Arrive => s.arrive,
            };
            per_bin[i].push(stamp.seconds_of_day() as f64 / 60.0);
        }
    }
    per_bin.into_iter().map(Histogram::from_minutes).collect()
}

/// Per-bin sample count, mean duration, and its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct BinSummary {
    pub n: usize,
    /// Mean duration in minutes; absent for empty bins.
    pub mean_minutes: Option<f64>,
    /// `s/√n` with the (n−1)-denominator sample standard deviation;
    /// defined only for n ≥ 2.
    pub stderr_minutes: Option<f64>,
}

/// One distance bin's duration statistics: summary, histogram, exact CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationBin {
    pub summary: BinSummary,
    pub histogram: Histogram,
    /// `(duration minutes, fraction ≤ duration)` steps.
    pub cdf: Vec<(f64, f64)>,
}

/// Bins one leg's samples by commute distance and summarizes durations.
pub fn duration_by_bin(
    samples: &[CommuteSample],
    bins: &DistanceBins,
    leg: Leg,
) -> Vec<DurationBin> {
    let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); bins.len()];
    for s in samples.iter().filter(|s| s.leg == leg) {
        if let Some(i) = bins.index_of(s.distance_km) {
            per_bin[i].push(s.duration_minutes);
        }
    }
    per_bin
        .into_iter()
        .map(|mut durations| {
            durations.sort_by(f64::total_cmp);
            let n = durations.len();
            let mean = (n > 0).then(|| durations.iter().sum::<f64>() / n as f64);
            let stderr = (n >= 2).then(|| {
                let m = mean.expect("n ≥ 2");
                let var = durations.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            });
            let mut cdf = Vec::new();
            let mut seen = 0usize;
            let mut i = 0;
            while i < n {
                let d = durations[i];
                while i < n && durations[i] == d {
                    i += 1;
                    seen += 1;
                }
                cdf.push((d, seen as f64 / n as f64));
            }
            DurationBin {
                summary: BinSummary {
                    n,
                    mean_minutes: mean,
                    stderr_minutes: stderr,
                },
                histogram: Histogram::from_minutes(durations.iter().copied()),
                cdf,
            }
        })
        .collect()
}
