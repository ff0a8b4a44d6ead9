//! Civil time without a timezone.
//!
//! Every timestamp in the pipeline is a *local clock reading*: whole seconds,
//! no zone, no DST. Internally that is an offset in seconds from the civil
//! epoch 1970-01-01T00:00:00, which makes day arithmetic exact (`86_400 * k`
//! boundaries are midnights) and keeps comparisons and differences plain
//! integer math. The chrono crate is used only at the string boundary
//! (parsing and formatting) and for calendar facts (weekday of a date).

use std::fmt;
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime, NaiveTime, Timelike, Weekday};

/// Seconds in one civil day.
pub const SECONDS_PER_DAY: i64 = 86_400;

/// The timestamp format accepted and emitted everywhere: ISO-8601 date and
/// time, no zone suffix.
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// A civil timestamp: whole seconds on a local clock, no timezone.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const fn from_seconds(secs: i64) -> Self {
        Timestamp(secs)
    }

    pub const fn seconds(self) -> i64 {
        self.0
    }

    /// Index of the civil day this instant falls on (day 0 starts at the
    /// epoch; negative before it).
    pub const fn day_index(self) -> i64 {
        self.0.div_euclid(SECONDS_PER_DAY)
    }

    /// Seconds since the most recent midnight, in `0..86_400`.
    pub const fn seconds_of_day(self) -> i64 {
        self.0.rem_euclid(SECONDS_PER_DAY)
    }

    /// Midnight of the day this instant falls on.
    pub const fn midnight(self) -> Self {
        Timestamp(self.day_index() * SECONDS_PER_DAY)
    }

    /// Day of the week. The epoch day (1970-01-01) was a Thursday.
    pub fn weekday(self) -> Weekday {
        match (self.day_index() + 3).rem_euclid(7) {
            0 => Weekday::Mon,
            1 => Weekday::Tue,
            2 => Weekday::Wed,
            3 => Weekday::Thu,
            4 => Weekday::Fri,
            5 => Weekday::Sat,
            _ => Weekday::Sun,
        }
    }

    pub fn from_naive(dt: NaiveDateTime) -> Self {
        Timestamp(dt.and_utc().timestamp())
    }

    /// The calendar date (for report output).
    pub fn date(self) -> NaiveDate {
        self.to_naive().date()
    }

    fn to_naive(self) -> NaiveDateTime {
        chrono::DateTime::from_timestamp(self.0, 0)
            .expect("timestamp out of chrono's representable range")
            .naive_utc()
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_naive().format(TIMESTAMP_FORMAT))
    }
}

impl fmt::Debug for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Timestamp({self})")
    }
}

/// Error from [`Timestamp::from_str`] / the time-of-day parsers.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid time syntax: {input:?} (expected {expected})")]
pub struct TimeSyntaxError {
    pub input: String,
    pub expected: &'static str,
}

impl FromStr for Timestamp {
    type Err = TimeSyntaxError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
            .map(Timestamp::from_naive)
            .map_err(|_| TimeSyntaxError {
                input: s.to_owned(),
                expected: "YYYY-MM-DDTHH:MM:SS",
            })
    }
}

/// Parses a wall-clock time of day (`HH:MM` or `HH:MM:SS`) to seconds since
/// midnight.
pub fn parse_time_of_day(s: &str) -> Result<i64, TimeSyntaxError> {
    NaiveTime::parse_from_str(s, "%H:%M:%S")
        .or_else(|_| NaiveTime::parse_from_str(s, "%H:%M"))
        .map(|t| i64::from(t.num_seconds_from_midnight()))
        .map_err(|_| TimeSyntaxError {
            input: s.to_owned(),
            expected: "HH:MM or HH:MM:SS",
        })
}

/// Formats seconds-since-midnight as `HH:MM` (exact minutes) or `HH:MM:SS`.
pub fn format_time_of_day(secs_of_day: i64) -> String {
    let s = secs_of_day.rem_euclid(SECONDS_PER_DAY);
    let (h, m, sec) = (s / 3600, (s % 3600) / 60, s % 60);
    if sec == 0 {
        format!("{h:02}:{m:02}")
    } else {
        format!("{h:02}:{m:02}:{sec:02}")
    }
}

/// A set of weekdays, stored as a bitmask (bit 0 = Monday).
///
/// Used for calendar exclusion (which days count as "weekend") and for the
/// synthetic generator's workday schedule. Parses from a comma-separated list
/// of day names (`sat,sun` or `Saturday,Sunday`).
#[derive(Copy, Clone, PartialEq, Eq, Default)]
pub struct WeekdaySet(u8);

impl WeekdaySet {
    pub const fn empty() -> Self {
        WeekdaySet(0)
    }

    pub fn from_days(days: &[Weekday]) -> Self {
        let mut set = WeekdaySet(0);
        for &d in days {
            set.insert(d);
        }
        set
    }

    pub fn insert(&mut self, day: Weekday) {
        self.0 |= 1 << day.num_days_from_monday();
    }

    pub fn contains(self, day: Weekday) -> bool {
        self.0 & (1 << day.num_days_from_monday()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    fn iter(self) -> impl Iterator<Item = Weekday> {
        (0..7u32)
            .filter(move |b| self.0 & (1 << b) != 0)
            .map(|b| match b {
                0 => Weekday::Mon,
                1 => Weekday::Tue,
                2 => Weekday::Wed,
                3 => Weekday::Thu,
                4 => Weekday::Fri,
                5 => Weekday::Sat,
                _ => Weekday::Sun,
            })
    }
}

impl FromStr for WeekdaySet {
    type Err = TimeSyntaxError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut set = WeekdaySet::empty();
        for part in s.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let day: Weekday = part.parse().map_err(|_| TimeSyntaxError {
                input: part.to_owned(),
                expected: "weekday name (e.g. sat or Saturday)",
            })?;
            set.insert(day);
        }
        Ok(set)
    }
}

impl fmt::Display for WeekdaySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for day in self.iter() {
            if !first {
                write!(f, ",")?;
            }
            write!(f, "{}", day)?;
            first = false;
        }
        Ok(())
    }
}

impl fmt::Debug for WeekdaySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "WeekdaySet({self})")
    }
}
