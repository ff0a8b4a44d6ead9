//! The analysis configuration: every threshold the pipeline applies, in one
//! auditable record. Assembled in layers — built-in defaults, then an
//! optional flat `key = value` config file, then command-line overrides —
//! using the same flat format the filter and world configs round-trip
//! through.

use std::io;
use std::path::PathBuf;

use pendler_core::filters::{iter_kv_lines, FilterConfig, FilterError};
use pendler_core::homework::{DEFAULT_MIN_COMMUTE_KM, DEFAULT_SHARE_THRESHOLD};
use pendler_core::portfolio::{DEFAULT_DAY_START, DEFAULT_NIGHT_START};
use pendler_core::time::{format_time_of_day, parse_time_of_day, SECONDS_PER_DAY};
use pendler_core::timing::{DistanceBins, TimingConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unreadable config file {path}: {source}")]
    Unreadable { path: PathBuf, source: io::Error },
    #[error("config line is not `key = value`: {0:?}")]
    BadLine(String),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("input file does not exist: {0}")]
    MissingFile(PathBuf),
}

impl From<FilterError> for ConfigError {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::BadLine(line) => ConfigError::BadLine(line),
            FilterError::UnknownKey(key) => ConfigError::UnknownKey(key),
            FilterError::BadValue { key, reason } => ConfigError::BadValue {
                key: key.to_owned(),
                reason,
            },
        }
    }
}

/// Everything `analyze` and `evaluate` need: input paths, the filter
/// thresholds, anchor-inference knobs, timing-proxy knobs, and output
/// shaping. Exactly one of `cdr` / `gps` must be set per run.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    /// Call-record input (`user_id,timestamp,tower_id`); requires `towers`.
    pub cdr: Option<PathBuf>,
    /// GPS input (`vehicle_id,timestamp,lat,lon`); towers are derived by
    /// gridding, so `towers` must not be set.
    pub gps: Option<PathBuf>,
    /// Tower registry (`tower_id,lat,lon`) for call-record mode.
    pub towers: Option<PathBuf>,
    pub outdir: PathBuf,
    /// Dataset label echoed into the correlation table's region column.
    pub label: String,
    pub filters: FilterConfig,
    /// Day window start, seconds of day.
    pub day_start: i64,
    /// Night window start (= day window end), seconds of day.
    pub night_start: i64,
    /// Strict dwell-share majority required of home/night and work/day.
    pub share_threshold: f64,
    /// Commutes shorter than this (km) are excluded as same-place noise.
    pub min_commute_km: f64,
    /// Optional beeline→route correction factor.
    pub crow_fly_factor: Option<f64>,
    pub timing: TimingConfig,
    /// Distance bins for departure/arrival-time figures.
    pub timing_bins: DistanceBins,
    /// Distance bins for duration figures.
    pub duration_bins: DistanceBins,
    /// Grid cell size (km) when deriving locations from GPS.
    pub grid_cell_km: f64,
    /// Bin width (km) of the commute-distance PDF.
    pub distance_bin_width_km: f64,
    /// Seed forwarded to the synthetic generator; analysis itself draws no
    /// random numbers.
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            cdr: None,
            gps: None,
            towers: None,
            outdir: PathBuf::from("out"),
            label: "unlabeled".to_owned(),
            filters: FilterConfig::default(),
            day_start: DEFAULT_DAY_START,
            night_start: DEFAULT_NIGHT_START,
            share_threshold: DEFAULT_SHARE_THRESHOLD,
            min_commute_km: DEFAULT_MIN_COMMUTE_KM,
            crow_fly_factor: None,
            timing: TimingConfig::default(),
            timing_bins: DistanceBins::timing_preset(),
            duration_bins: DistanceBins::duration_preset(),
            grid_cell_km: 0.5,
            distance_bin_width_km: 2.0,
            seed: 42,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_owned(),
        reason: format!("cannot parse {value:?}"),
    })
}

fn parse_clock(key: &str, value: &str) -> Result<i64, ConfigError> {
    parse_time_of_day(value).map_err(|e| ConfigError::BadValue {
        key: key.to_owned(),
        reason: e.to_string(),
    })
}

/// Parses `HH:MM-HH:MM` into a `(start, end)` seconds-of-day pair.
fn parse_window(key: &str, value: &str) -> Result<(i64, i64), ConfigError> {
    let (lo, hi) = value.split_once('-').ok_or_else(|| ConfigError::BadValue {
        key: key.to_owned(),
        reason: format!("expected HH:MM-HH:MM, got {value:?}"),
    })?;
    Ok((parse_clock(key, lo.trim())?, parse_clock(key, hi.trim())?))
}

/// Parses comma-separated ascending bin edges.
fn parse_bins(key: &str, value: &str) -> Result<DistanceBins, ConfigError> {
    let edges = value
        .split(',')
        .map(|s| parse_value::<f64>(key, s.trim()))
        .collect::<Result<Vec<f64>, _>>()?;
    DistanceBins::new(edges).ok_or_else(|| ConfigError::BadValue {
        key: key.to_owned(),
        reason: "need at least two strictly ascending edges".to_owned(),
    })
}

fn format_window(w: (i64, i64)) -> String {
    format!("{}-{}", format_time_of_day(w.0), format_time_of_day(w.1))
}

fn format_bins(bins: &DistanceBins) -> String {
    bins.edges()
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl AnalysisConfig {
    /// Applies one `key = value` pair; keys this type does not own are
    /// offered to the nested [`FilterConfig`]. `Ok(false)` means no config
    /// owns the key.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "cdr" => self.cdr = Some(PathBuf::from(value)),
            "gps" => self.gps = Some(PathBuf::from(value)),
            "towers" => self.towers = Some(PathBuf::from(value)),
            "outdir" => self.outdir = PathBuf::from(value),
            "label" => self.label = value.to_owned(),
            "day_start" => self.day_start = parse_clock(key, value)?,
            "night_start" => self.night_start = parse_clock(key, value)?,
            "share_threshold" => self.share_threshold = parse_value(key, value)?,
            "min_commute_km" => self.min_commute_km = parse_value(key, value)?,
            "crow_fly_factor" => {
                self.crow_fly_factor = if value == "none" {
                    None
                } else {
                    Some(parse_value(key, value)?)
                };
            }
            "noon" => self.timing.noon = parse_clock(key, value)?,
            "morning_window" => self.timing.morning_window = parse_window(key, value)?,
            "evening_window" => self.timing.evening_window = parse_window(key, value)?,
            "min_call_rate" => self.timing.min_call_rate = parse_value(key, value)?,
            "flag_arrival_before" => self.timing.flag_arrival_before = parse_clock(key, value)?,
            "include_flagged" => self.timing.include_flagged = parse_value(key, value)?,
            "timing_bins" => self.timing_bins = parse_bins(key, value)?,
            "duration_bins" => self.duration_bins = parse_bins(key, value)?,
            "grid_cell_km" => self.grid_cell_km = parse_value(key, value)?,
            "distance_bin_width_km" => self.distance_bin_width_km = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(self.filters.apply_kv(key, value)?),
        }
        Ok(true)
    }

    /// Applies a whole config file's text on top of the current values.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (key, value) in iter_kv_lines(text)? {
            if !self.apply_kv(key, value)? {
                return Err(ConfigError::UnknownKey(key.to_owned()));
            }
        }
        Ok(())
    }

    /// The effective configuration in the flat format, suitable for
    /// archiving next to the outputs and for re-running the exact analysis.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        use std::fmt::Write;
        if let Some(p) = &self.cdr {
            let _ = writeln!(out, "cdr = {}", p.display());
        }
        if let Some(p) = &self.gps {
            let _ = writeln!(out, "gps = {}", p.display());
        }
        if let Some(p) = &self.towers {
            let _ = writeln!(out, "towers = {}", p.display());
        }
        let _ = writeln!(out, "outdir = {}", self.outdir.display());
        let _ = writeln!(out, "label = {}", self.label);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "day_start = {}", format_time_of_day(self.day_start));
        let _ = writeln!(
            out,
            "night_start = {}",
            format_time_of_day(self.night_start)
        );
        let _ = writeln!(out, "share_threshold = {}", self.share_threshold);
        let _ = writeln!(out, "min_commute_km = {}", self.min_commute_km);
        if let Some(f) = self.crow_fly_factor {
            let _ = writeln!(out, "crow_fly_factor = {f}");
        }
        let _ = writeln!(out, "noon = {}", format_time_of_day(self.timing.noon));
        let _ = writeln!(
            out,
            "morning_window = {}",
            format_window(self.timing.morning_window)
        );
        let _ = writeln!(
            out,
            "evening_window = {}",
            format_window(self.timing.evening_window)
        );
        let _ = writeln!(out, "min_call_rate = {}", self.timing.min_call_rate);
        let _ = writeln!(
            out,
            "flag_arrival_before = {}",
            format_time_of_day(self.timing.flag_arrival_before)
        );
        let _ = writeln!(out, "include_flagged = {}", self.timing.include_flagged);
        let _ = writeln!(out, "timing_bins = {}", format_bins(&self.timing_bins));
        let _ = writeln!(out, "duration_bins = {}", format_bins(&self.duration_bins));
        let _ = writeln!(out, "grid_cell_km = {}", self.grid_cell_km);
        let _ = writeln!(
            out,
            "distance_bin_width_km = {}",
            self.distance_bin_width_km
        );
        out.push_str(&self.filters.to_kv_text());
        out
    }

    /// Structural validation plus input-path existence checks.
    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.cdr, &self.gps) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "cdr and gps inputs are mutually exclusive".into(),
                ))
            }
            (None, None) => {
                return Err(ConfigError::Invalid("one of cdr or gps is required".into()))
            }
            (Some(_), None) if self.towers.is_none() => {
                return Err(ConfigError::Invalid(
                    "cdr input requires a towers file".into(),
                ))
            }
            (None, Some(_)) if self.towers.is_some() => {
                return Err(ConfigError::Invalid(
                    "towers only apply to cdr input; gps derives its own grid".into(),
                ))
            }
            _ => {}
        }
        for path in [&self.cdr, &self.gps, &self.towers].into_iter().flatten() {
            if !path.exists() {
                return Err(ConfigError::MissingFile(path.clone()));
            }
        }
        if !(0 <= self.day_start
            && self.day_start < self.night_start
            && self.night_start <= SECONDS_PER_DAY)
        {
            return Err(ConfigError::Invalid(
                "day/night windows need 0 ≤ day_start < night_start ≤ 24:00".into(),
            ));
        }
        if !(self.share_threshold > 0.0 && self.share_threshold < 1.0) {
            return Err(ConfigError::Invalid(
                "share_threshold must lie strictly inside (0, 1)".into(),
            ));
        }
        if self.min_commute_km < 0.0 {
            return Err(ConfigError::Invalid(
                "min_commute_km must be non-negative".into(),
            ));
        }
        if let Some(f) = self.crow_fly_factor {
            if f.is_nan() || f < 1.0 {
                return Err(ConfigError::Invalid(
                    "crow_fly_factor must be at least 1 (routes are no shorter than beelines)"
                        .into(),
                ));
            }
        }
        for (name, (lo, hi)) in [
            ("morning_window", self.timing.morning_window),
            ("evening_window", self.timing.evening_window),
        ] {
            if !(0 <= lo && lo < hi && hi <= SECONDS_PER_DAY) {
                return Err(ConfigError::Invalid(format!(
                    "{name} must be an ascending pair within one day"
                )));
            }
        }
        if self.timing.min_call_rate < 0.0 {
            return Err(ConfigError::Invalid(
                "min_call_rate must be non-negative".into(),
            ));
        }
        if self.grid_cell_km.is_nan() || self.grid_cell_km <= 0.0 {
            return Err(ConfigError::Invalid("grid_cell_km must be positive".into()));
        }
        if self.distance_bin_width_km.is_nan() || self.distance_bin_width_km <= 0.0 {
            return Err(ConfigError::Invalid(
                "distance_bin_width_km must be positive".into(),
            ));
        }
        self.filters.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_text_round_trips() {
        let mut cfg = AnalysisConfig {
            cdr: Some(PathBuf::from("data/calls.csv")),
            towers: Some(PathBuf::from("data/towers.csv")),
            label: "it".to_owned(),
            crow_fly_factor: Some(1.35),
            ..AnalysisConfig::default()
        };
        cfg.timing.min_call_rate = 0.5;
        let mut parsed = AnalysisConfig::default();
        parsed.apply_kv_text(&cfg.to_kv_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_after_filter_delegation() {
        let mut cfg = AnalysisConfig::default();
        // A filter key is accepted through delegation…
        assert!(cfg.apply_kv("spatial_radius", "2.5").unwrap());
        assert_eq!(cfg.filters.spatial_radius, 2.5);
        // …an unowned key is not.
        assert!(!cfg.apply_kv("quux", "1").unwrap());
        assert!(matches!(
            cfg.apply_kv_text("quux = 1\n"),
            Err(ConfigError::UnknownKey(k)) if k == "quux"
        ));
    }

    #[test]
    fn clock_and_window_keys_parse() {
        let mut cfg = AnalysisConfig::default();
        cfg.apply_kv_text("day_start = 07:30\nmorning_window = 04:00-11:00\nnoon = 13:00\n")
            .unwrap();
        assert_eq!(cfg.day_start, 7 * 3600 + 1800);
        assert_eq!(cfg.timing.morning_window, (4 * 3600, 11 * 3600));
        assert_eq!(cfg.timing.noon, 13 * 3600);
        assert!(matches!(
            cfg.apply_kv("evening_window", "12:00"),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn bin_edges_parse_and_reject_disorder() {
        let mut cfg = AnalysisConfig::default();
        cfg.apply_kv("timing_bins", "0, 1, 2.5, 10").unwrap();
        assert_eq!(cfg.timing_bins.edges(), &[0.0, 1.0, 2.5, 10.0]);
        assert!(matches!(
            cfg.apply_kv("duration_bins", "0,5,5"),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn validation_requires_exactly_one_input_mode() {
        let cfg = AnalysisConfig::default();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));

        let dir = tempfile::tempdir().unwrap();
        let touch = |name: &str| {
            let p = dir.path().join(name);
            std::fs::write(&p, "x").unwrap();
            p
        };
        let both = AnalysisConfig {
            cdr: Some(touch("c.csv")),
            gps: Some(touch("g.csv")),
            ..AnalysisConfig::default()
        };
        assert!(matches!(both.validate(), Err(ConfigError::Invalid(_))));

        let cdr_no_towers = AnalysisConfig {
            cdr: Some(touch("c2.csv")),
            ..AnalysisConfig::default()
        };
        assert!(matches!(
            cdr_no_towers.validate(),
            Err(ConfigError::Invalid(_))
        ));

        let gps_with_towers = AnalysisConfig {
            gps: Some(touch("g2.csv")),
            towers: Some(touch("t.csv")),
            ..AnalysisConfig::default()
        };
        assert!(matches!(
            gps_with_towers.validate(),
            Err(ConfigError::Invalid(_))
        ));

        let ok = AnalysisConfig {
            cdr: Some(touch("c3.csv")),
            towers: Some(touch("t2.csv")),
            ..AnalysisConfig::default()
        };
        ok.validate().unwrap();
    }

    #[test]
    fn missing_paths_are_config_errors() {
        let cfg = AnalysisConfig {
            cdr: Some(PathBuf::from("/definitely/not/here.csv")),
            towers: Some(PathBuf::from("/also/not/here.csv")),
            ..AnalysisConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(ConfigError::MissingFile(_))));
    }

    #[test]
    fn threshold_sanity_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let cdr = dir.path().join("c.csv");
        let towers = dir.path().join("t.csv");
        std::fs::write(&cdr, "x").unwrap();
        std::fs::write(&towers, "x").unwrap();
        let base = AnalysisConfig {
            cdr: Some(cdr),
            towers: Some(towers),
            ..AnalysisConfig::default()
        };
        base.validate().unwrap();

        let mut bad = base.clone();
        bad.share_threshold = 1.0;
        assert!(bad.validate().is_err());

        let mut bad = base.clone();
        bad.crow_fly_factor = Some(0.9);
        assert!(bad.validate().is_err());

        let mut bad = base.clone();
        bad.day_start = bad.night_start;
        assert!(bad.validate().is_err());

        let mut bad = base;
        bad.filters.spatial_radius = -1.0;
        assert!(bad.validate().is_err());
    }
}
