//! Home/work inference and commute geometry.
//!
//! Home is where the night dwell is — but only when one location holds a
//! strict majority (more than half) of all observed night dwell; work is the
//! analogous strict majority of day dwell. Users without such dominant
//! locations are rejected with a reason rather than assigned a guess.
//!
//! Commute distance is the great-circle distance between the two anchors,
//! with a 1-km floor: the spatial noise filter makes the method blind below
//! that scale, so shorter "commutes" (including home == work) are excluded
//! rather than reported as zeros. An optional crow-fly correction factor
//! can be applied for route-length estimates, but it never alters the
//! as-the-crow-flies `distance_km`.

use std::collections::BTreeMap;
use std::fmt;

use crate::geo::{haversine_km, Coord, GeoError, TowerRegistry, UserId, EARTH_RADIUS_KM};
use crate::portfolio::{DwellInterval, DwellPortfolio};

/// Default strict dwell-share threshold for both anchors.
pub const DEFAULT_SHARE_THRESHOLD: f64 = 0.5;
/// Default minimum commute distance (km); shorter assignments are excluded.
pub const DEFAULT_MIN_COMMUTE_KM: f64 = 1.0;

/// A user's inferred home and work anchors with their dwell shares.
#[derive(Debug, Clone, PartialEq)]
pub struct HomeWorkAssignment {
    pub user: UserId,
    pub home: crate::geo::LocationId,
    pub work: crate::geo::LocationId,
    /// Fraction of total night dwell spent at `home`; strictly above the
    /// threshold by construction.
    pub night_share: f64,
    /// Fraction of total day dwell spent at `work`.
    pub day_share: f64,
}

/// Why no assignment was made.
#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub enum RejectReason {
    /// Zero total night or day dwell: nothing to rank.
    InsufficientData,
    /// The top night location does not hold a strict majority.
    NoHomeCandidate,
    /// The top day location does not hold a strict majority (home passed).
    NoWorkCandidate,
    /// Both anchors fail the share test.
    InsufficientShare,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::InsufficientData => "insufficient_data",
            RejectReason::NoHomeCandidate => "no_home_candidate",
            RejectReason::NoWorkCandidate => "no_work_candidate",
            RejectReason::InsufficientShare => "insufficient_share",
        })
    }
}

/// Infers home (night majority) and work (day majority) from a portfolio.
/// Both must strictly exceed `share_threshold` of their period's total
/// dwell. Home and work may coincide; the distance floor excludes such
/// users downstream.
pub fn infer_home_work(
    p: &DwellPortfolio,
    share_threshold: f64,
) -> Result<HomeWorkAssignment, RejectReason> {
    let total_night: i64 = p.entries.iter().map(|e| e.night_dwell).sum();
    let total_day: i64 = p.entries.iter().map(|e| e.day_dwell).sum();
    if total_night == 0 || total_day == 0 {
        return Err(RejectReason::InsufficientData);
    }

    // Largest dwell wins; ties go to the ascending location id. Entries are
    // already sorted by (total desc, id asc), but the per-period maximum
    // needs its own scan.
    let best = |dwell: fn(&crate::portfolio::PortfolioEntry) -> i64| {
        p.entries
            .iter()
            .max_by(|a, b| {
                dwell(a)
                    .cmp(&dwell(b))
                    .then_with(|| b.location.cmp(&a.location))
            })
            .expect("non-empty: totals above are positive")
    };
    let home = best(|e| e.night_dwell);
    let work = best(|e| e.day_dwell);
    let night_share = home.night_dwell as f64 / total_night as f64;
    let day_share = work.day_dwell as f64 / total_day as f64;

    match (night_share > share_threshold, day_share > share_threshold) {
        (true, true) => Ok(HomeWorkAssignment {
            user: p.user.clone(),
            home: home.location.clone(),
            work: work.location.clone(),
            night_share,
            day_share,
        }),
        (false, true) => Err(RejectReason::NoHomeCandidate),
        (true, false) => Err(RejectReason::NoWorkCandidate),
        (false, false) => Err(RejectReason::InsufficientShare),
    }
}

/// A user's commute distance. `corrected_km` carries the optional crow-fly
/// route correction and is present only when a factor was configured.
#[derive(Debug, Clone, PartialEq)]
pub struct CommuteDistanceRecord {
    pub user: UserId,
    pub distance_km: f64,
    pub corrected_km: Option<f64>,
}

/// Computes the commute distance for an assignment. Returns `Ok(None)` when
/// the distance falls below `min_commute_km` (the method cannot see such
/// short commutes; home == work lands here with distance 0).
pub fn commute_distance(
    a: &HomeWorkAssignment,
    registry: &TowerRegistry,
    min_commute_km: f64,
    crow_fly_factor: Option<f64>,
) -> Result<Option<CommuteDistanceRecord>, GeoError> {
    let home = registry.coord_or_err(&a.home)?;
    let work = registry.coord_or_err(&a.work)?;
    let distance_km = haversine_km(home, work);
    if distance_km < min_commute_km {
        return Ok(None);
    }
    Ok(Some(CommuteDistanceRecord {
        user: a.user.clone(),
        distance_km,
        corrected_km: crow_fly_factor.map(|f| distance_km * f),
    }))
}

/// Dwell-weighted radius of gyration:
/// `sqrt( Σ wᵢ·d(rᵢ, r_cm)² / Σ wᵢ )` with dwell durations as weights, the
/// weighted centroid computed in a local equirectangular projection (anchored
/// at the heaviest location), and great-circle distances `d`.
pub fn radius_of_gyration(
    intervals: &[DwellInterval],
    registry: &TowerRegistry,
) -> Result<f64, GeoError> {
    let mut weights: BTreeMap<&crate::geo::LocationId, i64> = BTreeMap::new();
    for iv in intervals {
        *weights.entry(&iv.location).or_default() += iv.duration_seconds();
    }
    let weighted: Vec<(Coord, f64)> = weights
        .iter()
        .map(|(loc, &w)| Ok((registry.coord_or_err(loc)?, w as f64)))
        .collect::<Result<_, GeoError>>()?;
    Ok(gyration(&weighted))
}

/// Radius of gyration over the distinct visited locations with equal
/// weights, for comparison with the dwell-weighted default.
pub fn radius_of_gyration_unweighted(
    intervals: &[DwellInterval],
    registry: &TowerRegistry,
) -> Result<f64, GeoError> {
    let mut locations: Vec<&crate::geo::LocationId> =
        intervals.iter().map(|iv| &iv.location).collect();
    locations.sort();
    locations.dedup();
    let weighted: Vec<(Coord, f64)> = locations
        .iter()
        .map(|loc| Ok((registry.coord_or_err(loc)?, 1.0)))
        .collect::<Result<_, GeoError>>()?;
    Ok(gyration(&weighted))
}

fn gyration(weighted: &[(Coord, f64)]) -> f64 {
    let total: f64 = weighted.iter().map(|&(_, w)| w).sum();
    if weighted.is_empty() || total <= 0.0 {
        return 0.0;
    }
    // Project about the heaviest location (deterministic anchor), take the
    // weighted centroid in the plane, then measure great-circle distances to
    // the unprojected centroid.
    let anchor = weighted
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty")
        .0;
    let cos_lat = anchor.lat.to_radians().cos();
    let (mut cx, mut cy) = (0.0, 0.0);
    for &(c, w) in weighted {
        let x = (c.lon - anchor.lon).to_radians() * EARTH_RADIUS_KM * cos_lat;
        let y = (c.lat - anchor.lat).to_radians() * EARTH_RADIUS_KM;
        cx += w * x;
        cy += w * y;
    }
    let centroid = Coord {
        lat: anchor.lat + (cy / total / EARTH_RADIUS_KM).to_degrees(),
        lon: anchor.lon + (cx / total / (EARTH_RADIUS_KM * cos_lat)).to_degrees(),
    };
    let sum_sq: f64 = weighted
        .iter()
        .map(|&(c, w)| w * haversine_km(c, centroid).powi(2))
        .sum();
    (sum_sq / total).sqrt()
}

/// Empirical distribution of commute distances: a density-normalized
/// histogram (area 1), the exact empirical CDF, and the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceDistribution {
    /// `(bin start km, density per km)`; bins span `[start, start + width)`.
    pub pdf: Vec<(f64, f64)>,
    pub bin_width_km: f64,
    /// `(distance km, fraction of records ≤ distance)` at each distinct
    /// observed distance; right limit is exactly 1.
    pub cdf: Vec<(f64, f64)>,
    pub mean_km: f64,
}

/// Builds the distance distribution behind the population figures.
/// Requires at least one record and a positive bin width.
pub fn distance_population(
    records: &[crate::homework::CommuteDistanceRecord],
    bin_width_km: f64,
) -> Option<DistanceDistribution> {
    if records.is_empty() || bin_width_km.is_nan() || bin_width_km <= 0.0 {
        return None;
    }
    let mut distances: Vec<f64> = records.iter().map(|r| r.distance_km).collect();
    distances.sort_by(f64::total_cmp);
    let n = distances.len() as f64;

    let max = *distances.last().expect("non-empty");
    let bins = (max / bin_width_km).floor() as usize + 1;
    let mut counts = vec![0u64; bins];
    for &d in &distances {
        let idx = ((d / bin_width_km).floor() as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let pdf = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (i as f64 * bin_width_km, c as f64 / (n * bin_width_km)))
        .collect();

    let mut cdf = Vec::new();
    let mut seen = 0usize;
    let mut i = 0;
    while i < distances.len() {
        let d = distances[i];
        while i < distances.len() && distances[i] == d {
            i += 1;
            seen += 1;
        }
        cdf.push((d, seen as f64 / n));
    }

    Some(DistanceDistribution {
        pdf,
        bin_width_km,
        cdf,
        mean_km: distances.iter().sum::<f64>() / n,
    })
}
