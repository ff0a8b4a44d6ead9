//! Coordinates, geodesic and grid primitives, and raw-record ingestion.
//!
//! Everything downstream works on two record shapes produced here: per-user
//! [`CallEvent`] sequences (a tower id per phone call) and per-vehicle
//! [`GpsPoint`] sequences (a coordinate per fix). Both parsers are
//! loss-tolerant: malformed rows are tallied in a [`ParseReport`] and
//! skipped, never fatal, because datasets at this scale always contain dirty
//! rows. Registry loading, by contrast, fails hard — a broken tower registry
//! is a configuration mistake, not dirty data.

use std::collections::BTreeMap;
use std::fmt;
use std::io;

use crate::time::Timestamp;

/// IUGG mean Earth radius in kilometers. The great-circle distances in this
/// crate all use the spherical model with this radius.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Maximum distance from a grid anchor at which the local flat projection is
/// still considered valid.
pub const GRID_RANGE_KM: f64 = 5000.0;

/// Opaque identifier of a phone user or tracked vehicle.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UserId(pub String);

/// Opaque identifier of a location: a cell tower, or a grid cell derived
/// from GPS fixes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LocationId(pub String);

impl UserId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl LocationId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for LocationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for UserId {
    fn from(s: &str) -> Self {
        UserId(s.to_owned())
    }
}

impl From<&str> for LocationId {
    fn from(s: &str) -> Self {
        LocationId(s.to_owned())
    }
}

/// A position in decimal degrees.
#[derive(Debug, Copy, Clone, PartialEq)]
pub struct Coord {
    pub lat: f64,
    pub lon: f64,
}

impl Coord {
    pub const fn new(lat: f64, lon: f64) -> Self {
        Coord { lat, lon }
    }

    fn in_bounds(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }
}

/// One call-detail record: a user was observed at a tower at an instant.
#[derive(Debug, Clone, PartialEq)]
pub struct CallEvent {
    pub user: UserId,
    pub stamp: Timestamp,
    pub tower: LocationId,
}

/// One GPS fix of a tracked vehicle.
///
/// Coordinate sanity ([-90, 90] latitude, [-180, 180] longitude) is enforced
/// at parse time; proximity to the study region is enforced later by
/// [`gps_to_grid`]'s range guard, since the parser has no registry to
/// compare against.
#[derive(Debug, Clone, PartialEq)]
pub struct GpsPoint {
    pub vehicle: UserId,
    pub stamp: Timestamp,
    pub coord: Coord,
}

/// Great-circle distance between two coordinates, spherical haversine with
/// [`EARTH_RADIUS_KM`].
pub fn haversine_km(a: Coord, b: Coord) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Errors from registry loading, record parsing, and grid projection.
#[derive(Debug, thiserror::Error)]
pub enum GeoError {
    #[error("read failed: {0}")]
    Io(#[from] io::Error),
    #[error("bad header: expected {expected:?}, found {found:?}")]
    Header {
        expected: &'static str,
        found: String,
    },
    #[error("duplicate tower id {0} in registry")]
    DuplicateTower(LocationId),
    #[error("line {line}: bad coordinate {value:?}")]
    BadCoordinate { line: u64, value: String },
    #[error("empty registry")]
    EmptyRegistry,
    #[error(
        "point ({lat}, {lon}) is {distance_km:.1} km from the grid anchor (limit {limit:.0} km)"
    )]
    OutOfGridRange {
        lat: f64,
        lon: f64,
        distance_km: f64,
        limit: f64,
    },
    #[error("location id {0} not present in the registry")]
    UnknownLocation(LocationId),
}

/// The tower registry: location ids mapped to coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TowerRegistry {
    entries: BTreeMap<LocationId, Coord>,
}

impl TowerRegistry {
    /// Builds a registry from pairs, rejecting duplicates, out-of-bounds
    /// coordinates and emptiness.
    pub fn from_entries(
        pairs: impl IntoIterator<Item = (LocationId, Coord)>,
    ) -> Result<Self, GeoError> {
        let mut entries = BTreeMap::new();
        for (line, (id, coord)) in pairs.into_iter().enumerate() {
            if !coord.in_bounds() {
                return Err(GeoError::BadCoordinate {
                    line: line as u64 + 1,
                    value: format!("({}, {})", coord.lat, coord.lon),
                });
            }
            if entries.insert(id.clone(), coord).is_some() {
                return Err(GeoError::DuplicateTower(id));
            }
        }
        if entries.is_empty() {
            return Err(GeoError::EmptyRegistry);
        }
        Ok(TowerRegistry { entries })
    }

    pub fn coord(&self, id: &LocationId) -> Option<Coord> {
        self.entries.get(id).copied()
    }

    /// Like [`coord`](Self::coord) but failing loudly; for pipeline stages
    /// whose inputs are guaranteed resolvable.
    pub fn coord_or_err(&self, id: &LocationId) -> Result<Coord, GeoError> {
        self.coord(id)
            .ok_or_else(|| GeoError::UnknownLocation(id.clone()))
    }

    pub fn contains(&self, id: &LocationId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LocationId, Coord)> {
        self.entries.iter().map(|(id, &c)| (id, c))
    }

    /// Distance from each tower to its nearest other tower. Quadratic scan;
    /// registries are thousands of towers, not millions. A single-tower
    /// registry yields `f64::INFINITY` for that tower.
    pub fn nearest_neighbor_km(&self) -> BTreeMap<LocationId, f64> {
        let towers: Vec<(&LocationId, Coord)> = self.iter().collect();
        let mut out = BTreeMap::new();
        for (i, &(id, c)) in towers.iter().enumerate() {
            let mut best = f64::INFINITY;
            for (j, &(_, other)) in towers.iter().enumerate() {
                if i != j {
                    best = best.min(haversine_km(c, other));
                }
            }
            out.insert(id.clone(), best);
        }
        out
    }
}

/// Local-grid discretization parameters: an anchor coordinate and a square
/// cell size (0.5 km in the reference setup).
#[derive(Debug, Copy, Clone, PartialEq)]
pub struct GridSpec {
    pub anchor: Coord,
    pub cell_size_km: f64,
}

/// A grid cell index pair; row grows northward, column eastward, both signed.
#[derive(Debug, Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GridCell {
    pub row: i64,
    pub col: i64,
}

impl GridCell {
    /// A stable, sortable location id for this cell (`g<row>_<col>`).
    pub fn location_id(&self) -> LocationId {
        LocationId(format!("g{}_{}", self.row, self.col))
    }
}

/// Projects a point onto the grid: local equirectangular projection about
/// the anchor (east/north offsets in km), floored to cell indices.
///
/// Points farther than [`GRID_RANGE_KM`] from the anchor are rejected — the
/// flat approximation is only meant for metropolitan-scale regions.
pub fn gps_to_grid(p: Coord, spec: GridSpec) -> Result<GridCell, GeoError> {
    let distance_km = haversine_km(spec.anchor, p);
    if distance_km > GRID_RANGE_KM {
        return Err(GeoError::OutOfGridRange {
            lat: p.lat,
            lon: p.lon,
            distance_km,
            limit: GRID_RANGE_KM,
        });
    }
    let north_km = (p.lat - spec.anchor.lat).to_radians() * EARTH_RADIUS_KM;
    let east_km = (p.lon - spec.anchor.lon).to_radians()
        * EARTH_RADIUS_KM
        * spec.anchor.lat.to_radians().cos();
    Ok(GridCell {
        row: (north_km / spec.cell_size_km).floor() as i64,
        col: (east_km / spec.cell_size_km).floor() as i64,
    })
}

/// Inverse of [`gps_to_grid`] evaluated at the cell's center: the coordinate
/// used when a grid cell stands in for a tower.
pub fn grid_cell_center(cell: GridCell, spec: GridSpec) -> Coord {
    let north_km = (cell.row as f64 + 0.5) * spec.cell_size_km;
    let east_km = (cell.col as f64 + 0.5) * spec.cell_size_km;
    Coord {
        lat: spec.anchor.lat + (north_km / EARTH_RADIUS_KM).to_degrees(),
        lon: spec.anchor.lon
            + (east_km / (EARTH_RADIUS_KM * spec.anchor.lat.to_radians().cos())).to_degrees(),
    }
}

/// Tally of what a record parser accepted and skipped. Merging reports is
/// associative and commutative, so partial reports from parallel chunks can
/// be combined in any order.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ParseReport {
    pub rows_read: u64,
    pub accepted: u64,
    pub bad_row: u64,
    pub bad_timestamp: u64,
    pub bad_coordinate: u64,
    pub unknown_tower: u64,
}

impl ParseReport {
    pub fn merge(&mut self, other: &ParseReport) {
        self.rows_read += other.rows_read;
        self.accepted += other.accepted;
        self.bad_row += other.bad_row;
        self.bad_timestamp += other.bad_timestamp;
        self.bad_coordinate += other.bad_coordinate;
        self.unknown_tower += other.unknown_tower;
    }

    pub fn skipped(&self) -> u64 {
        self.rows_read - self.accepted
    }
}

impl fmt::Display for ParseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} rows read, {} accepted, {} skipped (bad row {}, bad timestamp {}, bad coordinate {}, unknown tower {})",
            self.rows_read,
            self.accepted,
            self.skipped(),
            self.bad_row,
            self.bad_timestamp,
            self.bad_coordinate,
            self.unknown_tower
        )
    }
}

/// Timestamp syntax of one input file: ISO-8601 without zone, or integer
/// epoch-seconds read as local time. Detected from the first row whose
/// timestamp parses at all, then held fixed for the whole file.
#[derive(Debug, Copy, Clone, PartialEq, Eq)]
enum StampFormat {
    Iso,
    Epoch,
}

fn detect_stamp_format(field: &str) -> Option<StampFormat> {
    if field.parse::<i64>().is_ok() {
        Some(StampFormat::Epoch)
    } else if field.parse::<Timestamp>().is_ok() {
        Some(StampFormat::Iso)
    } else {
        None
    }
}

fn parse_stamp(field: &str, format: StampFormat) -> Option<Timestamp> {
    match format {
        StampFormat::Epoch => field.parse::<i64>().ok().map(Timestamp::from_seconds),
        StampFormat::Iso => field.parse::<Timestamp>().ok(),
    }
}

/// Loads the tower registry from CSV (`tower_id,lat,lon`). Fails on the
/// first malformed row: registries are small, curated inputs.
pub fn load_tower_registry(source: impl io::Read) -> Result<TowerRegistry, GeoError> {
    let mut reader = csv::ReaderBuilder::new().from_reader(source);
    check_header(&mut reader, "tower_id,lat,lon")?;

    let mut entries = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(csv_to_io)?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |value: &str| GeoError::BadCoordinate {
            line,
            value: value.to_owned(),
        };
        if record.len() != 3 {
            return Err(bad(&record.iter().collect::<Vec<_>>().join(",")));
        }
        let id = LocationId(record[0].to_owned());
        let lat: f64 = record[1].parse().map_err(|_| bad(&record[1]))?;
        let lon: f64 = record[2].parse().map_err(|_| bad(&record[2]))?;
        let coord = Coord::new(lat, lon);
        if !coord.in_bounds() {
            return Err(bad(&format!("({lat}, {lon})")));
        }
        if entries.insert(id.clone(), coord).is_some() {
            return Err(GeoError::DuplicateTower(id));
        }
    }
    if entries.is_empty() {
        return Err(GeoError::EmptyRegistry);
    }
    Ok(TowerRegistry { entries })
}

/// Parses a CDR stream (`user_id,timestamp,tower_id`) into per-user event
/// sequences, each sorted by timestamp with input order breaking ties.
/// Events naming towers absent from the registry are dropped and tallied.
pub fn parse_cdr_stream(
    source: impl io::Read,
    registry: &TowerRegistry,
) -> Result<(BTreeMap<UserId, Vec<CallEvent>>, ParseReport), GeoError> {
    let mut reader = csv::ReaderBuilder::new().from_reader(source);
    check_header(&mut reader, "user_id,timestamp,tower_id")?;

    let mut users: BTreeMap<UserId, Vec<CallEvent>> = BTreeMap::new();
    let mut report = ParseReport::default();
    let mut format: Option<StampFormat> = None;

    for record in reader.records() {
        report.rows_read += 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                if e.is_io_error() {
                    return Err(csv_to_io(e));
                }
                report.bad_row += 1;
                continue;
            }
        };
        if record.len() != 3 {
            report.bad_row += 1;
            continue;
        }
        let format = match format {
            Some(f) => f,
            None => match detect_stamp_format(&record[1]) {
                Some(f) => *format.insert(f),
                None => {
                    report.bad_timestamp += 1;
                    continue;
                }
            },
        };
        let Some(stamp) = parse_stamp(&record[1], format) else {
            report.bad_timestamp += 1;
            continue;
        };
        let tower = LocationId(record[2].to_owned());
        if !registry.contains(&tower) {
            report.unknown_tower += 1;
            continue;
        }
        report.accepted += 1;
        users
            .entry(UserId(record[0].to_owned()))
            .or_default()
            .push(CallEvent {
                user: UserId(record[0].to_owned()),
                stamp,
                tower,
            });
    }

    for events in users.values_mut() {
        events.sort_by_key(|e| e.stamp); // stable: ties keep input order
    }
    Ok((users, report))
}

/// Parses a GPS stream (`vehicle_id,timestamp,lat,lon`) into per-vehicle fix
/// sequences, sorted like [`parse_cdr_stream`]. Rows with coordinates
/// outside [-90, 90] × [-180, 180] are dropped and tallied.
pub fn parse_gps_stream(
    source: impl io::Read,
) -> Result<(BTreeMap<UserId, Vec<GpsPoint>>, ParseReport), GeoError> {
    let mut reader = csv::ReaderBuilder::new().from_reader(source);
    check_header(&mut reader, "vehicle_id,timestamp,lat,lon")?;

    let mut vehicles: BTreeMap<UserId, Vec<GpsPoint>> = BTreeMap::new();
    let mut report = ParseReport::default();
    let mut format: Option<StampFormat> = None;

    for record in reader.records() {
        report.rows_read += 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                if e.is_io_error() {
                    return Err(csv_to_io(e));
                }
                report.bad_row += 1;
                continue;
            }
        };
        if record.len() != 4 {
            report.bad_row += 1;
            continue;
        }
        let format = match format {
            Some(f) => f,
            None => match detect_stamp_format(&record[1]) {
                Some(f) => *format.insert(f),
                None => {
                    report.bad_timestamp += 1;
                    continue;
                }
            },
        };
        let Some(stamp) = parse_stamp(&record[1], format) else {
            report.bad_timestamp += 1;
            continue;
        };
        let (Ok(lat), Ok(lon)) = (record[2].parse::<f64>(), record[3].parse::<f64>()) else {
            report.bad_coordinate += 1;
            continue;
        };
        let coord = Coord::new(lat, lon);
        if !coord.in_bounds() {
            report.bad_coordinate += 1;
            continue;
        }
        report.accepted += 1;
        vehicles
            .entry(UserId(record[0].to_owned()))
            .or_default()
            .push(GpsPoint {
                vehicle: UserId(record[0].to_owned()),
                stamp,
                coord,
            });
    }

    for points in vehicles.values_mut() {
        points.sort_by_key(|p| p.stamp);
    }
    Ok((vehicles, report))
}

fn check_header<R: io::Read>(
    reader: &mut csv::Reader<R>,
    expected: &'static str,
) -> Result<(), GeoError> {
    let headers = reader.headers().map_err(csv_to_io)?;
    let found = headers.iter().collect::<Vec<_>>().join(",");
    if found != expected {
        return Err(GeoError::Header { expected, found });
    }
    Ok(())
}

fn csv_to_io(e: csv::Error) -> GeoError {
    match e.into_kind() {
        csv::ErrorKind::Io(io_err) => GeoError::Io(io_err),
        other => GeoError::Io(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{other:?}"),
        )),
    }
}
