//! Pre-analysis cleaning rules.
//!
//! Raw observation streams lie in small ways: towers ping-pong for a phone
//! that never moved, GPS jitter fabricates speed, weekend behaviour isn't
//! commuting, and long silences say nothing about where someone stayed.
//! Each rule here removes one class of artifact:
//!
//! * [`calendar_filter`] — drop excluded weekdays (weekends by default);
//! * [`resample_uniform`] — 10-minute lattice with the stay-at-tower rule;
//! * [`spatial_noise_filter`] — sticky-anchor suppression of sub-radius
//!   movement (tower ping-pong);
//! * [`speed_screen`] — discard GPS traces implying impossible speeds;
//! * [`gap_segmenter`] — turn observation pairs into dwell intervals, but
//!   never across silences of 16 h or more;
//! * [`sparse_tower_screen`] — remove users dominated by towers so isolated
//!   that their effective catchment is enormous.
//!
//! All operations are pure and per-user/per-vehicle, so callers can map them
//! over users in parallel.

use std::collections::{BTreeMap, BTreeSet};

use crate::geo::{haversine_km, CallEvent, GeoError, GpsPoint, LocationId, TowerRegistry, UserId};
use crate::portfolio::DwellInterval;
use crate::time::{Timestamp, WeekdaySet};

/// Tunable thresholds for every cleaning rule, with the reference defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    /// Resampling lattice spacing, minutes.
    pub resample_interval: i64,
    /// Movements within this radius (km) are noise, not travel.
    pub spatial_radius: f64,
    /// Implied speeds at or above this (km/h) discard a GPS trace.
    pub speed_limit: f64,
    /// Consecutive-pair time floor (seconds) below which speed is not judged.
    pub min_segment_seconds: i64,
    /// Weekdays whose events are removed outright (the local weekend).
    pub excluded_weekdays: WeekdaySet,
    /// Silences of this length (hours) or more break dwell continuity.
    pub max_gap: f64,
    /// A tower is "sparse" if its nearest neighbor is farther than this (km).
    pub sparse_tower_km: f64,
    /// Users with more than this share of dwell at sparse towers are removed.
    pub sparse_dwell_share: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            resample_interval: 10,
            spatial_radius: 1.0,
            speed_limit: 120.0,
            min_segment_seconds: 60,
            excluded_weekdays: "sat,sun".parse().expect("static weekday list"),
            max_gap: 16.0,
            sparse_tower_km: 50.0,
            sparse_dwell_share: 0.10,
        }
    }
}

impl FilterConfig {
    pub fn resample_interval_seconds(&self) -> i64 {
        self.resample_interval * 60
    }

    pub fn max_gap_seconds(&self) -> i64 {
        (self.max_gap * 3600.0).round() as i64
    }

    /// Checks the config invariants; call after construction or parsing.
    pub fn validate(&self) -> Result<(), FilterError> {
        let positive = [
            ("resample_interval", self.resample_interval as f64),
            ("spatial_radius", self.spatial_radius),
            ("speed_limit", self.speed_limit),
            ("min_segment_seconds", self.min_segment_seconds as f64),
            ("max_gap", self.max_gap),
            ("sparse_tower_km", self.sparse_tower_km),
        ];
        for (key, value) in positive {
            if value.is_nan() || value <= 0.0 {
                return Err(FilterError::BadValue {
                    key,
                    reason: "must be strictly positive".into(),
                });
            }
        }
        if !(self.sparse_dwell_share > 0.0 && self.sparse_dwell_share < 1.0) {
            return Err(FilterError::BadValue {
                key: "sparse_dwell_share",
                reason: "must lie strictly between 0 and 1".into(),
            });
        }
        let excluded = (0..7)
            .filter(|&i| self.excluded_weekdays.contains(weekday_from_index(i)))
            .count();
        if excluded > 6 {
            return Err(FilterError::BadValue {
                key: "excluded_weekdays",
                reason: "cannot exclude every day of the week".into(),
            });
        }
        Ok(())
    }

    /// Applies one `key = value` pair. Returns `Ok(false)` for keys this
    /// config does not own, so larger configs can layer on top.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool, FilterError> {
        let bad = |reason: String| FilterError::BadValue {
            key: KEYS.iter().find(|&&k| k == key).copied().unwrap_or("?"),
            reason,
        };
        match key {
            "resample_interval" => self.resample_interval = parse_num(value).map_err(bad)?,
            "spatial_radius" => self.spatial_radius = parse_num(value).map_err(bad)?,
            "speed_limit" => self.speed_limit = parse_num(value).map_err(bad)?,
            "min_segment_seconds" => self.min_segment_seconds = parse_num(value).map_err(bad)?,
            "excluded_weekdays" => {
                self.excluded_weekdays = value.parse().map_err(|e| bad(format!("{e}")))?
            }
            "max_gap" => self.max_gap = parse_num(value).map_err(bad)?,
            "sparse_tower_km" => self.sparse_tower_km = parse_num(value).map_err(bad)?,
            "sparse_dwell_share" => self.sparse_dwell_share = parse_num(value).map_err(bad)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses a full flat `key = value` document (comments with `#`,
    /// blank lines ignored). Unknown keys are rejected.
    pub fn from_kv_text(text: &str) -> Result<Self, FilterError> {
        let mut cfg = FilterConfig::default();
        for (key, value) in iter_kv_lines(text)? {
            if !cfg.apply_kv(key, value)? {
                return Err(FilterError::UnknownKey(key.to_owned()));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The inverse of [`from_kv_text`](Self::from_kv_text).
    pub fn to_kv_text(&self) -> String {
        format!(
            "resample_interval = {}\n\
             spatial_radius = {}\n\
             speed_limit = {}\n\
             min_segment_seconds = {}\n\
             excluded_weekdays = {}\n\
             max_gap = {}\n\
             sparse_tower_km = {}\n\
             sparse_dwell_share = {}\n",
            self.resample_interval,
            self.spatial_radius,
            self.speed_limit,
            self.min_segment_seconds,
            self.excluded_weekdays,
            self.max_gap,
            self.sparse_tower_km,
            self.sparse_dwell_share,
        )
    }
}

const KEYS: &[&str] = &[
    "resample_interval",
    "spatial_radius",
    "speed_limit",
    "min_segment_seconds",
    "excluded_weekdays",
    "max_gap",
    "sparse_tower_km",
    "sparse_dwell_share",
];

fn weekday_from_index(i: u8) -> chrono::Weekday {
    use chrono::Weekday::*;
    [Mon, Tue, Wed, Thu, Fri, Sat, Sun][i as usize]
}

fn parse_num<T: std::str::FromStr>(value: &str) -> Result<T, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("cannot parse {value:?} as a number"))
}

/// Splits flat config text into `(key, value)` pairs: one pair per line,
/// `#` starts a comment, blank lines are skipped. Shared by every config
/// type that round-trips through the flat format.
pub fn iter_kv_lines(text: &str) -> Result<Vec<(&str, &str)>, FilterError> {
    let mut out = Vec::new();
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(FilterError::BadLine(raw.trim().to_owned()));
        };
        out.push((key.trim(), value.trim()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FilterError {
    #[error("config line is not `key = value`: {0:?}")]
    BadLine(String),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {reason}")]
    BadValue { key: &'static str, reason: String },
}

/// A user's observations resampled onto the uniform time lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrack {
    pub user: UserId,
    /// `(lattice tick, held location)`, time-ordered. Consecutive ticks
    /// within a segment are exactly one resample interval apart; a larger
    /// step marks a segment boundary (a silence of `max_gap` or more).
    pub samples: Vec<(Timestamp, LocationId)>,
}

/// Removes events falling on excluded weekdays. Order is preserved; with an
/// empty exclusion set this is the identity.
pub fn calendar_filter(events: &[CallEvent], cfg: &FilterConfig) -> Vec<CallEvent> {
    events
        .iter()
        .filter(|e| !cfg.excluded_weekdays.contains(e.stamp.weekday()))
        .cloned()
        .collect()
}

/// Resamples one user's time-sorted events onto the lattice of
/// `resample_interval` multiples, applying the stay-at-tower rule: each tick
/// carries the location of the most recent event at or before it.
///
/// Events separated by `max_gap` or more split the stream into sessions, and
/// no ticks are fabricated between sessions. Within a session, ticks run
/// from the first lattice point at or after the first event through the last
/// lattice point at or before the last event — plus one trailing tick when
/// the session's final location would otherwise not appear at all (a session
/// ending in a move would lose its destination otherwise).
pub fn resample_uniform(events: &[CallEvent], cfg: &FilterConfig) -> SampledTrack {
    let interval = cfg.resample_interval_seconds();
    let max_gap = cfg.max_gap_seconds();
    let user = events
        .first()
        .map_or_else(|| UserId("".into()), |e| e.user.clone());
    let mut samples: Vec<(Timestamp, LocationId)> = Vec::new();

    let mut session_start = 0;
    for i in 0..events.len() {
        let is_last = i + 1 == events.len();
        let gap_after = if is_last {
            max_gap // sentinel: close the session
        } else {
            events[i + 1].stamp.seconds() - events[i].stamp.seconds()
        };
        if gap_after < max_gap {
            continue;
        }
        let session = &events[session_start..=i];
        session_start = i + 1;

        let first = session.first().expect("session is non-empty");
        let last = session.last().expect("session is non-empty");
        let first_tick = first.stamp.seconds().div_euclid(interval) * interval;
        let first_tick = if first_tick < first.stamp.seconds() {
            first_tick + interval
        } else {
            first_tick
        };
        let last_tick = last.stamp.seconds().div_euclid(interval) * interval;

        let mut cursor = 0; // index of the most recent event <= tick
        let mut tick = first_tick;
        while tick <= last_tick {
            while cursor + 1 < session.len() && session[cursor + 1].stamp.seconds() <= tick {
                cursor += 1;
            }
            samples.push((Timestamp::from_seconds(tick), session[cursor].tower.clone()));
            tick += interval;
        }
        // Trailing tick if the final location is not yet represented.
        let covered = samples
            .last()
            .is_some_and(|(t, loc)| *t >= first.stamp && *loc == last.tower);
        if !covered {
            samples.push((
                Timestamp::from_seconds(last_tick + interval),
                last.tower.clone(),
            ));
        }
    }
    SampledTrack { user, samples }
}

/// The sticky-anchor automaton shared by the track- and event-level spatial
/// filters: a held anchor absorbs every location within `radius_km` of it;
/// a location farther away becomes the new anchor.
fn sticky_anchor_rewrite<'a>(
    locations: impl Iterator<Item = &'a LocationId>,
    registry: &TowerRegistry,
    radius_km: f64,
) -> Result<Vec<LocationId>, GeoError> {
    let mut out = Vec::new();
    let mut anchor: Option<(LocationId, crate::geo::Coord)> = None;
    for loc in locations {
        let coord = registry.coord_or_err(loc)?;
        let next = match &anchor {
            Some((id, anchor_coord)) if haversine_km(*anchor_coord, coord) < radius_km => {
                id.clone()
            }
            _ => {
                anchor = Some((loc.clone(), coord));
                loc.clone()
            }
        };
        out.push(next);
    }
    Ok(out)
}

/// Suppresses sub-radius movement on a sampled track with sticky-anchor
/// semantics. After this pass, no two consecutive distinct locations are
/// closer than `spatial_radius`.
pub fn spatial_noise_filter(
    track: &SampledTrack,
    registry: &TowerRegistry,
    cfg: &FilterConfig,
) -> Result<SampledTrack, GeoError> {
    let rewritten = sticky_anchor_rewrite(
        track.samples.iter().map(|(_, loc)| loc),
        registry,
        cfg.spatial_radius,
    )?;
    Ok(SampledTrack {
        user: track.user.clone(),
        samples: track
            .samples
            .iter()
            .zip(rewritten)
            .map(|((stamp, _), loc)| (*stamp, loc))
            .collect(),
    })
}

/// The same sticky-anchor rewrite applied directly to an event sequence, for
/// consumers (the commute-timing proxies) that need denoised locations at
/// original call timestamps rather than lattice ticks.
pub fn spatial_rewrite_events(
    events: &[CallEvent],
    registry: &TowerRegistry,
    cfg: &FilterConfig,
) -> Result<Vec<CallEvent>, GeoError> {
    let rewritten = sticky_anchor_rewrite(
        events.iter().map(|e| &e.tower),
        registry,
        cfg.spatial_radius,
    )?;
    Ok(events
        .iter()
        .zip(rewritten)
        .map(|(e, tower)| CallEvent {
            user: e.user.clone(),
            stamp: e.stamp,
            tower,
        })
        .collect())
}

/// Verdict of [`speed_screen`].
#[derive(Debug, Clone, PartialEq)]
pub enum SpeedScreenDecision {
    Keep,
    /// The whole trace is discarded; carries the first offending pair.
    Discard {
        first: GpsPoint,
        second: GpsPoint,
        speed_kmh: f64,
    },
}

impl SpeedScreenDecision {
    pub fn is_keep(&self) -> bool {
        matches!(self, SpeedScreenDecision::Keep)
    }
}

/// Screens one vehicle's time-sorted fixes for impossible speeds. Pairs
/// closer in time than `min_segment_seconds` are not judged (GPS jitter over
/// tiny intervals fabricates huge speeds) — except exact duplicates in time
/// at distinct positions, which are unconditionally impossible.
pub fn speed_screen(points: &[GpsPoint], cfg: &FilterConfig) -> SpeedScreenDecision {
    for pair in points.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let dt = b.stamp.seconds() - a.stamp.seconds();
        let km = haversine_km(a.coord, b.coord);
        if dt == 0 && km > 0.0 {
            return SpeedScreenDecision::Discard {
                first: a.clone(),
                second: b.clone(),
                speed_kmh: f64::INFINITY,
            };
        }
        if dt < cfg.min_segment_seconds {
            continue;
        }
        let speed_kmh = km / (dt as f64 / 3600.0);
        if speed_kmh >= cfg.speed_limit {
            return SpeedScreenDecision::Discard {
                first: a.clone(),
                second: b.clone(),
                speed_kmh,
            };
        }
    }
    SpeedScreenDecision::Keep
}

/// Turns consecutive observation pairs into dwell intervals: for each pair
/// closer than `max_gap`, the user stayed at the earlier observation's
/// location for the whole span. Pairs at or beyond `max_gap` emit nothing —
/// a 16-hour silence is not evidence of staying put.
pub fn gap_segmenter(events: &[CallEvent], cfg: &FilterConfig) -> Vec<DwellInterval> {
    let max_gap = cfg.max_gap_seconds();
    events
        .windows(2)
        .filter(|pair| {
            let dt = pair[1].stamp.seconds() - pair[0].stamp.seconds();
            dt > 0 && dt < max_gap
        })
        .map(|pair| DwellInterval {
            location: pair[0].tower.clone(),
            start: pair[0].stamp,
            end: pair[1].stamp,
        })
        .collect()
}

/// Outcome of the sparse-tower screen over a whole population.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseScreenOutcome {
    pub survivors: BTreeSet<UserId>,
    /// Users removed, with their sparse-tower dwell share.
    pub removed: Vec<(UserId, f64)>,
    /// Towers whose nearest neighbor is farther than the threshold.
    pub sparse_towers: BTreeSet<LocationId>,
    /// Degenerate registry (single tower): every tower is sparse and the
    /// screen removes everyone. Reported so callers can warn instead of
    /// silently emptying the population.
    pub single_tower_registry: bool,
}

/// Removes users whose dwell at sparse towers (nearest neighbor farther than
/// `sparse_tower_km`) exceeds `sparse_dwell_share` of their total dwell.
/// Such towers have enormous effective catchments, so location claims around
/// them are too coarse to trust.
pub fn sparse_tower_screen(
    users: &BTreeMap<UserId, Vec<DwellInterval>>,
    registry: &TowerRegistry,
    cfg: &FilterConfig,
) -> Result<SparseScreenOutcome, GeoError> {
    let sparse_towers: BTreeSet<LocationId> = registry
        .nearest_neighbor_km()
        .into_iter()
        .filter(|&(_, d)| d > cfg.sparse_tower_km)
        .map(|(id, _)| id)
        .collect();

    let mut outcome = SparseScreenOutcome {
        survivors: BTreeSet::new(),
        removed: Vec::new(),
        sparse_towers,
        single_tower_registry: registry.len() == 1,
    };
    for (user, intervals) in users {
        let mut total = 0i64;
        let mut sparse = 0i64;
        for iv in intervals {
            if !registry.contains(&iv.location) {
                return Err(GeoError::UnknownLocation(iv.location.clone()));
            }
            let dur = iv.duration_seconds();
            total += dur;
            if outcome.sparse_towers.contains(&iv.location) {
                sparse += dur;
            }
        }
        let share = if total > 0 {
            sparse as f64 / total as f64
        } else {
            0.0
        };
        if share > cfg.sparse_dwell_share {
            outcome.removed.push((user.clone(), share));
        } else {
            outcome.survivors.insert(user.clone());
        }
    }
    Ok(outcome)
}
