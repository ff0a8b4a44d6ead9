//! Mining home/work commute behaviour from call-detail records (CDRs) and
//! vehicle GPS traces.
//!
//! The pipeline turns sparse, noisy location observations (a tower id per
//! phone call, or a GPS fix per vehicle) into per-user *travel portfolios*
//! (ranked dwell-time accounts per location), infers home and work anchors
//! from night/day dwell dominance, and extracts commute departure/arrival
//! proxies from call timestamps. A seeded synthetic-population generator
//! ([`synth`]) provides ground truth against which the whole chain is
//! validated.
//!
//! Modules, in dependency order:
//!
//! * [`time`] — civil timestamps (no timezone) and time-of-day arithmetic
//! * [`geo`] — coordinates, haversine, tower registry, grid discretization,
//!   CSV ingestion
//! * [`filters`] — pre-analysis cleaning: resampling, spatial noise
//!   suppression, speed screening, calendar exclusion, gap segmentation,
//!   sparse-tower screening
//! * [`portfolio`] — dwell intervals, day/night split, ranked portfolios,
//!   population rank curves and log-log slope fits
//! * [`homework`] — home/work inference, commute distance, radius of gyration
//! * [`timing`] — morning/evening commute proxies, distance-binned timing and
//!   duration statistics
//! * [`stats`] — Gaussian window fits, Q-Q points, medians, Spearman rank
//!   correlation (exact small-n p-values), two-sample Kolmogorov-Smirnov
//! * [`synth`] — seeded synthetic commuter worlds with ground truth and
//!   recovery scoring

pub mod filters;
pub mod geo;
pub mod homework;
pub mod portfolio;
pub mod stats;
pub mod synth;
pub mod time;
pub mod timing;
