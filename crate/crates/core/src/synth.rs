//! Synthetic commuter worlds with full ground truth.
//!
//! Real call records come with no answer key. These generators build one: a
//! square region of towers, agents with fixed home/work towers, weekday
//! schedules (home → commute → work, with Zipf-frequency side visits and
//! rare night excursions → commute → home), and a homogeneous Poisson call
//! process stamped with the tower of the scheduled location. Every quantity
//! the pipeline later infers — home, work, commute distance, true travel
//! times — is recorded in a [`GroundTruth`] for exact scoring.
//!
//! Two travel regimes mirror the qualitative split the analysis must
//! reproduce: `multimodal` draws travel time about a constant, independent
//! of distance (a constant travel-time budget); `car_only` derives it from
//! distance and a fixed speed, and additionally emits GPS fixes along the
//! straight-line path during commutes.
//!
//! Calls placed mid-commute are stamped with the nearest tower that keeps
//! at least the spatial-filter radius of clearance from *both* endpoint
//! towers (no tower qualifies → the call is dropped). A handover model that
//! snapped to the nearer endpoint would let a mid-commute call masquerade
//! as a departure or arrival and silently break the upper-estimate
//! guarantee the timing proxies are built on; clearance keeps transit calls
//! visibly in transit even after the sticky-anchor rewrite.
//!
//! Everything is deterministic given the seed: agents derive independent
//! sub-seeds, so generation order (or parallelism) cannot change output.

use std::collections::BTreeMap;
use std::io;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use thiserror::Error;

use crate::geo::{haversine_km, CallEvent, Coord, GpsPoint, LocationId, TowerRegistry, UserId};
use crate::homework::{HomeWorkAssignment, RejectReason};
use crate::time::{Timestamp, WeekdaySet, SECONDS_PER_DAY};
use crate::timing::CommuteSample;

/// Simulation epoch: Monday 2023-01-02 00:00, so day 0 starts a work week.
pub const SIM_EPOCH: Timestamp = Timestamp::from_seconds(1_672_617_600);
/// South-west corner of the synthetic region.
pub const REGION_SW: Coord = Coord::new(45.0, 9.0);
/// Kilometres per degree of latitude on the reference sphere.
const KM_PER_DEG_LAT: f64 = std::f64::consts::PI * crate::geo::EARTH_RADIUS_KM / 180.0;
/// Minimum home–work tower separation; matches the analysis distance floor.
pub const MIN_ANCHOR_SEPARATION_KM: f64 = 1.0;
/// In-transit calls must be stamped this far (km) from both endpoint towers.
pub const TRANSIT_TOWER_CLEARANCE_KM: f64 = 1.0;
/// GPS fix cadence along commute paths, seconds.
pub const GPS_CADENCE_SECONDS: i64 = 30;
/// Size of the Zipf-ranked pool of side-visit / excursion towers.
const ZIPF_POOL_SIZE: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("unparseable config line: {0:?}")]
    BadLine(String),
    #[error("unknown config key: {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(
        "region too small: no tower pair ≥ {MIN_ANCHOR_SEPARATION_KM} km apart fits agent {agent}"
    )]
    RegionTooSmall { agent: usize },
    #[error("ground truth parse failure at line {line}: {reason}")]
    BadGroundTruth { line: u64, reason: String },
}

/// How travel time relates to distance.
#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub enum Regime {
    /// Travel time drawn about a constant, independent of distance.
    Multimodal,
    /// Travel time = distance / speed; commutes also emit GPS fixes.
    CarOnly,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Multimodal => "multimodal",
            Regime::CarOnly => "car_only",
        })
    }
}

impl std::str::FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "multimodal" => Ok(Regime::Multimodal),
            "car_only" => Ok(Regime::CarOnly),
            other => Err(format!("unknown regime {other:?}")),
        }
    }
}

/// Parameters of a synthetic world; round-trips as flat `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_towers: usize,
    /// Side of the square region, km.
    pub region_km: f64,
    pub n_agents: usize,
    /// Simulated span in days, starting at [`SIM_EPOCH`] (a Monday).
    pub days: u32,
    /// Days on which agents commute.
    pub workdays: WeekdaySet,
    /// Per-agent call rate is drawn uniformly from this range, calls/hour.
    pub call_rate_min: f64,
    pub call_rate_max: f64,
    pub regime: Regime,
    /// Multimodal: center of the travel-time draw, minutes.
    pub target_commute_minutes: f64,
    /// Multimodal: spread of the travel-time draw, minutes.
    pub commute_minutes_sigma: f64,
    /// Car-only: straight-line driving speed, km/h.
    pub speed_kmh: f64,
    /// Exponent of the Zipf visit-frequency law for side locations.
    pub zipf_exponent: f64,
    /// Probability that a workday contains one mid-day side visit.
    pub side_visit_prob: f64,
    /// Probability that a night contains an excursion; must sit in (0, 0.5).
    pub night_excursion_prob: f64,
    /// Home–work target distances are drawn log-uniformly from this range, km.
    pub commute_km_min: f64,
    pub commute_km_max: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 42,
            n_towers: 400,
            region_km: 60.0,
            n_agents: 100,
            days: 14,
            workdays: "mon,tue,wed,thu,fri".parse().expect("static weekday list"),
            call_rate_min: 2.0,
            call_rate_max: 2.0,
            regime: Regime::Multimodal,
            target_commute_minutes: 40.0,
            commute_minutes_sigma: 6.0,
            speed_kmh: 40.0,
            zipf_exponent: 1.0,
            side_visit_prob: 0.3,
            night_excursion_prob: 0.05,
            commute_km_min: 1.5,
            commute_km_max: 30.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let positive = [
            ("n_towers", self.n_towers as f64),
            ("region_km", self.region_km),
            ("n_agents", self.n_agents as f64),
            ("days", f64::from(self.days)),
            ("target_commute_minutes", self.target_commute_minutes),
            ("commute_minutes_sigma", self.commute_minutes_sigma),
            ("speed_kmh", self.speed_kmh),
            ("zipf_exponent", self.zipf_exponent),
            ("commute_km_min", self.commute_km_min),
        ];
        for (key, value) in positive {
            if value.is_nan() || value <= 0.0 {
                return Err(SynthError::Invalid(format!("{key} must be positive")));
            }
        }
        if self.call_rate_min < 0.0 || self.call_rate_max < self.call_rate_min {
            return Err(SynthError::Invalid(
                "call rate range must satisfy 0 ≤ min ≤ max".into(),
            ));
        }
        if self.commute_km_max < self.commute_km_min {
            return Err(SynthError::Invalid(
                "commute_km_max below commute_km_min".into(),
            ));
        }
        if !(self.night_excursion_prob > 0.0 && self.night_excursion_prob < 0.5) {
            return Err(SynthError::Invalid(
                "night_excursion_prob must lie strictly inside (0, 0.5)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.side_visit_prob) {
            return Err(SynthError::Invalid(
                "side_visit_prob must lie in [0, 1]".into(),
            ));
        }
        // An empty workday set is legal: a world of homebodies.
        Ok(())
    }

    /// Applies one `key = value` pair; `Ok(false)` means the key is not a
    /// world key (callers layering configs can pass it on).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool, SynthError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, SynthError> {
            value.parse().map_err(|_| SynthError::BadValue {
                key: key.to_owned(),
                value: value.to_owned(),
            })
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "n_towers" => self.n_towers = parse(key, value)?,
            "region_km" => self.region_km = parse(key, value)?,
            "n_agents" => self.n_agents = parse(key, value)?,
            "days" => self.days = parse(key, value)?,
            "workdays" => self.workdays = parse(key, value)?,
            "call_rate" => {
                let rate = parse(key, value)?;
                self.call_rate_min = rate;
                self.call_rate_max = rate;
            }
            "call_rate_min" => self.call_rate_min = parse(key, value)?,
            "call_rate_max" => self.call_rate_max = parse(key, value)?,
            "regime" => self.regime = parse(key, value)?,
            "target_commute_minutes" => self.target_commute_minutes = parse(key, value)?,
            "commute_minutes_sigma" => self.commute_minutes_sigma = parse(key, value)?,
            "speed_kmh" => self.speed_kmh = parse(key, value)?,
            "zipf_exponent" => self.zipf_exponent = parse(key, value)?,
            "side_visit_prob" => self.side_visit_prob = parse(key, value)?,
            "night_excursion_prob" => self.night_excursion_prob = parse(key, value)?,
            "commute_km_min" => self.commute_km_min = parse(key, value)?,
            "commute_km_max" => self.commute_km_max = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses a whole flat config (`#` comments, blank lines ignored).
    pub fn from_kv_text(text: &str) -> Result<Self, SynthError> {
        let mut cfg = WorldConfig::default();
        let pairs =
            crate::filters::iter_kv_lines(text).map_err(|e| SynthError::BadLine(e.to_string()))?;
        for (key, value) in pairs {
            if !cfg.apply_kv(key, value)? {
                return Err(SynthError::UnknownKey(key.to_owned()));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        format!(
            "seed = {}\nn_towers = {}\nregion_km = {}\nn_agents = {}\ndays = {}\n\
             workdays = {}\ncall_rate_min = {}\ncall_rate_max = {}\nregime = {}\n\
             target_commute_minutes = {}\ncommute_minutes_sigma = {}\nspeed_kmh = {}\n\
             zipf_exponent = {}\nside_visit_prob = {}\nnight_excursion_prob = {}\n\
             commute_km_min = {}\ncommute_km_max = {}\n",
            self.seed,
            self.n_towers,
            self.region_km,
            self.n_agents,
            self.days,
            self.workdays,
            self.call_rate_min,
            self.call_rate_max,
            self.regime,
            self.target_commute_minutes,
            self.commute_minutes_sigma,
            self.speed_kmh,
            self.zipf_exponent,
            self.side_visit_prob,
            self.night_excursion_prob,
            self.commute_km_min,
            self.commute_km_max,
        )
    }

    /// Mean nearest-neighbor scale for uniform towers: region / √n. The
    /// recovery MAE is judged against this spacing.
    pub fn tower_spacing_km(&self) -> f64 {
        self.region_km / (self.n_towers as f64).sqrt()
    }
}

/// Where an agent is scheduled to be.
#[derive(Debug, Clone, PartialEq)]
enum Place {
    Stay(LocationId),
    Transit { from: LocationId, to: LocationId },
}

#[derive(Debug, Clone, PartialEq)]
struct Segment {
    start: Timestamp,
    end: Timestamp,
    place: Place,
}

/// An agent's scheduled place at one instant, for replay checks.
#[derive(Debug, PartialEq)]
pub enum ScheduledPlace<'a> {
    At(&'a LocationId),
    InTransit {
        from: &'a LocationId,
        to: &'a LocationId,
        progress: f64,
    },
}

/// One simulated commuter: fixed anchors, a fixed call rate, and a
/// contiguous schedule over the simulated span.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub id: UserId,
    pub home: LocationId,
    pub work: LocationId,
    /// Calls per hour for this agent's Poisson process.
    pub call_rate: f64,
    segments: Vec<Segment>,
}

impl Agent {
    /// The scheduled place at `t`, or `None` outside the simulated span.
    pub fn place_at(&self, t: Timestamp) -> Option<ScheduledPlace<'_>> {
        let idx = self.segments.partition_point(|s| s.end <= t);
        let seg = self.segments.get(idx)?;
        if t < seg.start {
            return None;
        }
        Some(match &seg.place {
            Place::Stay(loc) => ScheduledPlace::At(loc),
            Place::Transit { from, to } => ScheduledPlace::InTransit {
                from,
                to,
                progress: (t.seconds() - seg.start.seconds()) as f64
                    / (seg.end.seconds() - seg.start.seconds()) as f64,
            },
        })
    }
}

/// True departure/arrival instants of one commuting day.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueDay {
    pub date: chrono::NaiveDate,
    pub depart_home: Timestamp,
    pub arrive_work: Timestamp,
    pub depart_work: Timestamp,
    pub arrive_home: Timestamp,
}

impl TrueDay {
    pub fn morning_minutes(&self) -> f64 {
        (self.arrive_work.seconds() - self.depart_home.seconds()) as f64 / 60.0
    }

    pub fn evening_minutes(&self) -> f64 {
        (self.arrive_home.seconds() - self.depart_work.seconds()) as f64 / 60.0
    }
}

/// Everything the pipeline is later asked to recover about one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTruth {
    pub home: LocationId,
    pub work: LocationId,
    /// Great-circle distance between the anchor towers, km.
    pub commute_km: f64,
    /// One record per commuting day.
    pub days: Vec<TrueDay>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub agents: BTreeMap<UserId, AgentTruth>,
}

/// A generated world: tower registry, agents with schedules, and the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub registry: TowerRegistry,
    pub agents: Vec<Agent>,
    pub truth: GroundTruth,
}

/// Splitmix64: derives decorrelated per-agent seeds from the master seed so
/// agents can be generated independently (and in parallel) without sharing
/// an RNG stream.
fn derive_seed(seed: u64, stream: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TOWER_SALT: u64 = 0x746f_7765;
const AGENT_SALT: u64 = 0x6167_656e;
const CALL_SALT: u64 = 0x6361_6c6c;

struct RegionGeometry {
    lat_span: f64,
    lon_span: f64,
}

impl RegionGeometry {
    fn new(region_km: f64) -> Self {
        let lat_span = region_km / KM_PER_DEG_LAT;
        let mid_lat = REGION_SW.lat + lat_span / 2.0;
        RegionGeometry {
            lat_span,
            lon_span: region_km / (KM_PER_DEG_LAT * mid_lat.to_radians().cos()),
        }
    }

    fn contains(&self, c: Coord) -> bool {
        c.lat >= REGION_SW.lat
            && c.lat <= REGION_SW.lat + self.lat_span
            && c.lon >= REGION_SW.lon
            && c.lon <= REGION_SW.lon + self.lon_span
    }

    /// A point `km` away from `from` along `bearing` (radians, 0 = north),
    /// in the local flat approximation — plenty for a metropolitan region.
    fn offset(&self, from: Coord, km: f64, bearing: f64) -> Coord {
        Coord {
            lat: from.lat + km * bearing.cos() / KM_PER_DEG_LAT,
            lon: from.lon + km * bearing.sin() / (KM_PER_DEG_LAT * from.lat.to_radians().cos()),
        }
    }
}

fn nearest_tower(
    towers: &[(LocationId, Coord)],
    p: Coord,
    keep: impl Fn(&LocationId, Coord) -> bool,
) -> Option<(&LocationId, Coord)> {
    towers
        .iter()
        .filter(|(id, c)| keep(id, *c))
        .min_by(|a, b| haversine_km(a.1, p).total_cmp(&haversine_km(b.1, p)))
        .map(|(id, c)| (id, *c))
}

/// The `ZIPF_POOL_SIZE` towers nearest `center`, excluding the anchors;
/// rank 1 = nearest. Side-visit and excursion towers never coincide with
/// home or work, which keeps call stamps unambiguous when scoring.
fn zipf_pool(
    towers: &[(LocationId, Coord)],
    center: Coord,
    exclude: [&LocationId; 2],
) -> Vec<LocationId> {
    let mut ranked: Vec<(f64, &LocationId)> = towers
        .iter()
        .filter(|(id, _)| id != exclude[0] && id != exclude[1])
        .map(|(id, c)| (haversine_km(*c, center), id))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    ranked
        .into_iter()
        .take(ZIPF_POOL_SIZE)
        .map(|(_, id)| id.clone())
        .collect()
}

/// Generates towers, agents, schedules, and ground truth. Deterministic
/// given the seed. Fails if the region cannot host a home/work pair at the
/// minimum anchor separation for some agent.
pub fn generate_world(cfg: &WorldConfig) -> Result<World, SynthError> {
    cfg.validate()?;
    let geom = RegionGeometry::new(cfg.region_km);

    // Towers come from their own stream so agent parameters do not shift
    // when the tower count changes.
    let mut tower_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, TOWER_SALT));
    let id_width = (cfg.n_towers.max(2) - 1).to_string().len();
    let towers: Vec<(LocationId, Coord)> = (0..cfg.n_towers)
        .map(|i| {
            let lat = REGION_SW.lat + tower_rng.random::<f64>() * geom.lat_span;
            let lon = REGION_SW.lon + tower_rng.random::<f64>() * geom.lon_span;
            (LocationId(format!("t{i:0id_width$}")), Coord { lat, lon })
        })
        .collect();
    let registry = TowerRegistry::from_entries(towers.iter().cloned())
        .map_err(|e| SynthError::Invalid(format!("tower generation: {e}")))?;

    let agent_width = (cfg.n_agents.max(2) - 1).to_string().len();
    let mut agents = Vec::with_capacity(cfg.n_agents);
    let mut truth = GroundTruth::default();
    for a in 0..cfg.n_agents {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, a as u64, AGENT_SALT));
        let id = UserId(format!("a{a:0agent_width$}"));
        let agent = build_agent(cfg, &geom, &towers, id, &mut rng)
            .ok_or(SynthError::RegionTooSmall { agent: a })?;
        truth.agents.insert(agent.0.id.clone(), agent.1);
        agents.push(agent.0);
    }

    Ok(World {
        config: cfg.clone(),
        registry,
        agents,
        truth,
    })
}

fn build_agent(
    cfg: &WorldConfig,
    geom: &RegionGeometry,
    towers: &[(LocationId, Coord)],
    id: UserId,
    rng: &mut ChaCha8Rng,
) -> Option<(Agent, AgentTruth)> {
    use rand_distr::Normal;

    let (home, home_c) = {
        let idx = rng.random_range(0..towers.len());
        (towers[idx].0.clone(), towers[idx].1)
    };

    // Aim at a log-uniform target distance in a random direction and snap
    // to the nearest tower; retry until the pair respects the separation
    // floor and stays in-region.
    let mut found = None;
    for _ in 0..256 {
        let ln_d = rng.random_range(cfg.commute_km_min.ln()..=cfg.commute_km_max.ln());
        let bearing = rng.random_range(0.0..std::f64::consts::TAU);
        let target = geom.offset(home_c, ln_d.exp(), bearing);
        if !geom.contains(target) {
            continue;
        }
        let Some((cand, cand_c)) = nearest_tower(towers, target, |t, _| *t != home) else {
            continue;
        };
        if haversine_km(home_c, cand_c) >= MIN_ANCHOR_SEPARATION_KM {
            found = Some((cand.clone(), cand_c));
            break;
        }
    }
    let (work, work_c) = found?;
    let commute_km = haversine_km(home_c, work_c);

    let side_pool = zipf_pool(towers, work_c, [&home, &work]);
    let night_pool = zipf_pool(towers, home_c, [&home, &work]);
    let zipf = (!side_pool.is_empty())
        .then(|| rand_distr::Zipf::new(side_pool.len() as f64, cfg.zipf_exponent).ok())
        .flatten();

    let call_rate = if cfg.call_rate_max > cfg.call_rate_min {
        rng.random_range(cfg.call_rate_min..=cfg.call_rate_max)
    } else {
        cfg.call_rate_min
    };

    // Per-agent habitual departure time, then small day-to-day jitter.
    let h: f64 = 3600.0;
    let mu_depart = Normal::new(8.0 * h, 40.0 * 60.0)
        .expect("static sigma")
        .sample(rng)
        .clamp(6.5 * h, 9.5 * h);
    let day_jitter = Normal::new(0.0, 15.0 * 60.0).expect("static sigma");
    let work_len = Normal::new(8.5 * h, 30.0 * 60.0).expect("static sigma");
    let travel = |rng: &mut ChaCha8Rng| -> i64 {
        let minutes = match cfg.regime {
            Regime::Multimodal => {
                Normal::new(cfg.target_commute_minutes, cfg.commute_minutes_sigma)
                    .expect("validated sigma")
                    .sample(rng)
                    .clamp(5.0, 150.0)
            }
            Regime::CarOnly => (commute_km / cfg.speed_kmh * 60.0).clamp(1.0, 150.0),
        };
        (minutes * 60.0) as i64
    };

    let mut segments = Vec::new();
    let mut days = Vec::new();
    for d in 0..i64::from(cfg.days) {
        let day_start = Timestamp::from_seconds(SIM_EPOCH.seconds() + d * SECONDS_PER_DAY);
        let day_end = Timestamp::from_seconds(day_start.seconds() + SECONDS_PER_DAY);
        let at = |sod: i64| Timestamp::from_seconds(day_start.seconds() + sod);

        let mut day_segments = Vec::new();
        if cfg.workdays.contains(day_start.weekday()) {
            let morning = travel(rng);
            let depart_cap = (11 * 3600 - morning).max(6 * 3600);
            let depart_sod =
                ((mu_depart + day_jitter.sample(rng)) as i64).clamp(11 * 1800, depart_cap);
            let work_secs = (work_len.sample(rng) as i64).clamp(7 * 3600, 10 * 3600);
            let evening = travel(rng);

            let depart_home = at(depart_sod);
            let arrive_work = at(depart_sod + morning);
            let depart_work = at(depart_sod + morning + work_secs);
            let arrive_home = at(depart_sod + morning + work_secs + evening);

            day_segments.push(Segment {
                start: day_start,
                end: depart_home,
                place: Place::Stay(home.clone()),
            });
            day_segments.push(Segment {
                start: depart_home,
                end: arrive_work,
                place: Place::Transit {
                    from: home.clone(),
                    to: work.clone(),
                },
            });

            // Optionally carve a Zipf-ranked side visit out of the work stay.
            let side = (rng.random::<f64>() < cfg.side_visit_prob)
                .then(|| zipf.as_ref().map(|z| z.sample(rng) as usize - 1))
                .flatten()
                .map(|rank| {
                    let frac = rng.random_range(0.35..0.55);
                    let visit_start = arrive_work.seconds() + (frac * work_secs as f64) as i64;
                    let visit_len = rng.random_range(20 * 60..50 * 60);
                    (
                        Timestamp::from_seconds(visit_start),
                        Timestamp::from_seconds(visit_start + visit_len),
                        side_pool[rank].clone(),
                    )
                });
            match side {
                Some((vs, ve, tower)) if ve < depart_work => {
                    day_segments.push(Segment {
                        start: arrive_work,
                        end: vs,
                        place: Place::Stay(work.clone()),
                    });
                    day_segments.push(Segment {
                        start: vs,
                        end: ve,
                        place: Place::Stay(tower),
                    });
                    day_segments.push(Segment {
                        start: ve,
                        end: depart_work,
                        place: Place::Stay(work.clone()),
                    });
                }
                _ => day_segments.push(Segment {
                    start: arrive_work,
                    end: depart_work,
                    place: Place::Stay(work.clone()),
                }),
            }

            day_segments.push(Segment {
                start: depart_work,
                end: arrive_home,
                place: Place::Transit {
                    from: work.clone(),
                    to: home.clone(),
                },
            });
            day_segments.push(Segment {
                start: arrive_home,
                end: day_end,
                place: Place::Stay(home.clone()),
            });

            days.push(TrueDay {
                date: day_start.date(),
                depart_home,
                arrive_work,
                depart_work,
                arrive_home,
            });
        } else {
            day_segments.push(Segment {
                start: day_start,
                end: day_end,
                place: Place::Stay(home.clone()),
            });
        }

        // A rare evening excursion replaces 21:00–23:30 of the trailing
        // home stay (skipped when the agent is not home by 21:00).
        if rng.random::<f64>() < cfg.night_excursion_prob && !night_pool.is_empty() {
            let exc_start = at(21 * 3600);
            let exc_end = at(23 * 3600 + 1800);
            let rank = zipf
                .as_ref()
                .map(|z| (z.sample(rng) as usize - 1).min(night_pool.len() - 1))
                .unwrap_or(0);
            let last = day_segments.last_mut().expect("day covered");
            if matches!(last.place, Place::Stay(ref l) if *l == home) && last.start <= exc_start {
                last.end = exc_start;
                day_segments.push(Segment {
                    start: exc_start,
                    end: exc_end,
                    place: Place::Stay(night_pool[rank].clone()),
                });
                day_segments.push(Segment {
                    start: exc_end,
                    end: day_end,
                    place: Place::Stay(home.clone()),
                });
            }
        }

        segments.extend(day_segments);
    }

    debug_assert!(
        segments.windows(2).all(|w| w[0].end == w[1].start),
        "schedule must be contiguous"
    );

    Some((
        Agent {
            id: id.clone(),
            home: home.clone(),
            work: work.clone(),
            call_rate,
            segments,
        },
        AgentTruth {
            home,
            work,
            commute_km,
            days,
        },
    ))
}

/// Simulates the Poisson call process for every agent and, in the car-only
/// regime, GPS fixes along commute paths. Events are ordered by agent then
/// time; in-transit calls that cannot clear both endpoint towers are
/// dropped.
pub fn simulate_calls(world: &World) -> (Vec<CallEvent>, Vec<GpsPoint>) {
    let towers: Vec<(LocationId, Coord)> = world
        .registry
        .iter()
        .map(|(id, c)| (id.clone(), c))
        .collect();
    let span = i64::from(world.config.days) * SECONDS_PER_DAY;

    let mut events = Vec::new();
    let mut fixes = Vec::new();
    for (a, agent) in world.agents.iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(world.config.seed, a as u64, CALL_SALT));
        if agent.call_rate > 0.0 {
            let gaps = rand_distr::Exp::new(agent.call_rate / 3600.0).expect("positive rate");
            let mut t = gaps.sample(&mut rng);
            while (t as i64) < span {
                let stamp = Timestamp::from_seconds(SIM_EPOCH.seconds() + t as i64);
                if let Some(tower) = stamp_for(agent, stamp, &world.registry, &towers) {
                    events.push(CallEvent {
                        user: agent.id.clone(),
                        stamp,
                        tower,
                    });
                }
                t += gaps.sample(&mut rng);
            }
        }

        if world.config.regime == Regime::CarOnly {
            trace_commutes(agent, &world.registry, &mut fixes);
        }
    }
    (events, fixes)
}

/// The tower a call at `stamp` is stamped with, or `None` for an in-transit
/// call with no qualifying tower.
fn stamp_for(
    agent: &Agent,
    stamp: Timestamp,
    registry: &TowerRegistry,
    towers: &[(LocationId, Coord)],
) -> Option<LocationId> {
    match agent.place_at(stamp)? {
        ScheduledPlace::At(loc) => Some(loc.clone()),
        ScheduledPlace::InTransit { from, to, progress } => {
            let from_c = registry.coord(from).expect("scheduled towers exist");
            let to_c = registry.coord(to).expect("scheduled towers exist");
            let pos = Coord {
                lat: from_c.lat + (to_c.lat - from_c.lat) * progress,
                lon: from_c.lon + (to_c.lon - from_c.lon) * progress,
            };
            nearest_tower(towers, pos, |_, c| {
                haversine_km(c, from_c) >= TRANSIT_TOWER_CLEARANCE_KM
                    && haversine_km(c, to_c) >= TRANSIT_TOWER_CLEARANCE_KM
            })
            .map(|(id, _)| id.clone())
        }
    }
}

/// Emits GPS fixes at the fixed cadence along every transit segment, plus
/// one fix exactly at arrival so the trace touches the destination.
fn trace_commutes(agent: &Agent, registry: &TowerRegistry, out: &mut Vec<GpsPoint>) {
    for seg in &agent.segments {
        let Place::Transit { from, to } = &seg.place else {
            continue;
        };
        let from_c = registry.coord(from).expect("scheduled towers exist");
        let to_c = registry.coord(to).expect("scheduled towers exist");
        let len = (seg.end.seconds() - seg.start.seconds()) as f64;
        let mut t = seg.start.seconds();
        while t < seg.end.seconds() {
            let progress = (t - seg.start.seconds()) as f64 / len;
            out.push(GpsPoint {
                vehicle: agent.id.clone(),
                stamp: Timestamp::from_seconds(t),
                coord: Coord {
                    lat: from_c.lat + (to_c.lat - from_c.lat) * progress,
                    lon: from_c.lon + (to_c.lon - from_c.lon) * progress,
                },
            });
            t += GPS_CADENCE_SECONDS;
        }
        out.push(GpsPoint {
            vehicle: agent.id.clone(),
            stamp: seg.end,
            coord: to_c,
        });
    }
}

/// Writes `tower_id,lat,lon` in the format the ingest side reads back.
pub fn write_towers_csv(mut w: impl io::Write, registry: &TowerRegistry) -> io::Result<()> {
    writeln!(w, "tower_id,lat,lon")?;
    for (id, c) in registry.iter() {
        writeln!(w, "{id},{:.6},{:.6}", c.lat, c.lon)?;
    }
    Ok(())
}

/// Writes `user_id,timestamp,tower_id` with ISO timestamps.
pub fn write_cdr_csv(mut w: impl io::Write, events: &[CallEvent]) -> io::Result<()> {
    writeln!(w, "user_id,timestamp,tower_id")?;
    for e in events {
        writeln!(w, "{},{},{}", e.user, e.stamp, e.tower)?;
    }
    Ok(())
}

/// Writes `vehicle_id,timestamp,lat,lon` with ISO timestamps.
pub fn write_gps_csv(mut w: impl io::Write, points: &[GpsPoint]) -> io::Result<()> {
    writeln!(w, "vehicle_id,timestamp,lat,lon")?;
    for p in points {
        writeln!(
            w,
            "{},{},{:.6},{:.6}",
            p.vehicle, p.stamp, p.coord.lat, p.coord.lon
        )?;
    }
    Ok(())
}

/// One row per agent-day (agents without commuting days still get a single
/// row with empty day fields, so the agent roster survives the round trip).
pub fn write_ground_truth_csv(mut w: impl io::Write, truth: &GroundTruth) -> io::Result<()> {
    writeln!(
        w,
        "agent_id,home_id,work_id,commute_km,date,depart_home,arrive_work,depart_work,arrive_home"
    )?;
    for (agent, t) in &truth.agents {
        if t.days.is_empty() {
            writeln!(w, "{agent},{},{},{:.6},,,,,", t.home, t.work, t.commute_km)?;
            continue;
        }
        for d in &t.days {
            writeln!(
                w,
                "{agent},{},{},{:.6},{},{},{},{},{}",
                t.home,
                t.work,
                t.commute_km,
                d.date,
                d.depart_home,
                d.arrive_work,
                d.depart_work,
                d.arrive_home
            )?;
        }
    }
    Ok(())
}

/// Reads a ground-truth table back (for scoring a pipeline run out of
/// process).
pub fn read_ground_truth_csv(r: impl io::Read) -> Result<GroundTruth, SynthError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let mut truth = GroundTruth::default();
    for (line, record) in (2u64..).zip(reader.records()) {
        let record = record.map_err(|e| SynthError::BadGroundTruth {
            line,
            reason: e.to_string(),
        })?;
        let field = |i: usize| -> Result<&str, SynthError> {
            record.get(i).ok_or(SynthError::BadGroundTruth {
                line,
                reason: format!("missing column {i}"),
            })
        };
        let agent = UserId(field(0)?.to_owned());
        let entry = truth.agents.entry(agent).or_insert_with(|| AgentTruth {
            home: LocationId(field(1).unwrap_or_default().to_owned()),
            work: LocationId(field(2).unwrap_or_default().to_owned()),
            commute_km: field(3).unwrap_or_default().parse().unwrap_or(f64::NAN),
            days: Vec::new(),
        });
        if field(4)?.is_empty() {
            continue;
        }
        let date = field(4)?.parse().map_err(|e| SynthError::BadGroundTruth {
            line,
            reason: format!("date: {e}"),
        })?;
        let stamp = |i: usize| -> Result<Timestamp, SynthError> {
            field(i)?.parse().map_err(|e| SynthError::BadGroundTruth {
                line,
                reason: format!("timestamp: {e}"),
            })
        };
        entry.days.push(TrueDay {
            date,
            depart_home: stamp(5)?,
            arrive_work: stamp(6)?,
            depart_work: stamp(7)?,
            arrive_home: stamp(8)?,
        });
    }
    Ok(truth)
}

/// How well the pipeline recovered the planted truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    pub n_truth_agents: usize,
    /// Agents that survived every filter and received an assignment.
    pub n_eligible: usize,
    pub home_recovered: usize,
    pub work_recovered: usize,
    pub both_recovered: usize,
    /// Mean |estimated − true| commute distance over eligible agents, km.
    pub distance_mae_km: f64,
    /// Proxy − true duration, minutes, one entry per matched sample.
    pub overestimates_minutes: Vec<f64>,
    /// Samples whose proxy fell below the true duration (must be zero).
    pub duration_violations: usize,
    /// Truth agents that got no assignment, keyed by reason.
    pub filtered: BTreeMap<String, usize>,
    /// Samples with no matching truth day (should be zero).
    pub unmatched_samples: usize,
}

impl RecoveryReport {
    pub fn home_rate(&self) -> f64 {
        ratio(self.home_recovered, self.n_eligible)
    }

    pub fn work_rate(&self) -> f64 {
        ratio(self.work_recovered, self.n_eligible)
    }

    pub fn both_rate(&self) -> f64 {
        ratio(self.both_recovered, self.n_eligible)
    }

    pub fn mean_overestimate(&self) -> Option<f64> {
        (!self.overestimates_minutes.is_empty()).then(|| {
            self.overestimates_minutes.iter().sum::<f64>() / self.overestimates_minutes.len() as f64
        })
    }

    /// Structured text for the report file / console.
    pub fn render(&self) -> String {
        let mut out = String::new();
        use std::fmt::Write;
        let _ = writeln!(out, "truth agents: {}", self.n_truth_agents);
        let _ = writeln!(out, "eligible (assigned): {}", self.n_eligible);
        let _ = writeln!(out, "home recovery: {:.4}", self.home_rate());
        let _ = writeln!(out, "work recovery: {:.4}", self.work_rate());
        let _ = writeln!(out, "both recovery: {:.4}", self.both_rate());
        let _ = writeln!(out, "distance MAE km: {:.4}", self.distance_mae_km);
        let _ = writeln!(
            out,
            "timing samples matched: {}",
            self.overestimates_minutes.len()
        );
        let _ = writeln!(out, "duration violations: {}", self.duration_violations);
        if let Some(m) = self.mean_overestimate() {
            let _ = writeln!(out, "mean overestimate min: {m:.2}");
        }
        let _ = writeln!(out, "unmatched samples: {}", self.unmatched_samples);
        for (reason, n) in &self.filtered {
            let _ = writeln!(out, "filtered {reason}: {n}");
        }
        out
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores pipeline output against the truth: exact tower matches for
/// home/work among eligible agents, distance MAE, per-sample duration
/// overestimates, and an accounting of why missing agents were filtered.
pub fn evaluate_recovery(
    outcomes: &BTreeMap<UserId, Result<HomeWorkAssignment, RejectReason>>,
    samples: &[CommuteSample],
    truth: &GroundTruth,
    registry: &TowerRegistry,
) -> RecoveryReport {
    let mut report = RecoveryReport {
        n_truth_agents: truth.agents.len(),
        n_eligible: 0,
        home_recovered: 0,
        work_recovered: 0,
        both_recovered: 0,
        distance_mae_km: 0.0,
        overestimates_minutes: Vec::new(),
        duration_violations: 0,
        filtered: BTreeMap::new(),
        unmatched_samples: 0,
    };

    let mut abs_err_sum = 0.0;
    let mut abs_err_n = 0usize;
    for (agent, t) in &truth.agents {
        match outcomes.get(agent) {
            Some(Ok(a)) => {
                report.n_eligible += 1;
                let home_ok = a.home == t.home;
                let work_ok = a.work == t.work;
                report.home_recovered += usize::from(home_ok);
                report.work_recovered += usize::from(work_ok);
                report.both_recovered += usize::from(home_ok && work_ok);
                if let (Some(h), Some(w)) = (registry.coord(&a.home), registry.coord(&a.work)) {
                    abs_err_sum += (haversine_km(h, w) - t.commute_km).abs();
                    abs_err_n += 1;
                }
            }
            Some(Err(reason)) => {
                *report.filtered.entry(reason.to_string()).or_default() += 1;
            }
            None => {
                *report
                    .filtered
                    .entry("removed_before_inference".into())
                    .or_default() += 1;
            }
        }
    }
    report.distance_mae_km = if abs_err_n == 0 {
        0.0
    } else {
        abs_err_sum / abs_err_n as f64
    };

    for s in samples {
        let Some(t) = truth.agents.get(&s.user) else {
            report.unmatched_samples += 1;
            continue;
        };
        let Some(day) = t.days.iter().find(|d| d.date == s.date) else {
            report.unmatched_samples += 1;
            continue;
        };
        let true_minutes = match s.leg {
            crate::timing::Leg::Morning => day.morning_minutes(),
            crate::timing::Leg::Evening => day.evening_minutes(),
        };
        let over = s.duration_minutes - true_minutes;
        if over < -1e-9 {
            report.duration_violations += 1;
        }
        report.overestimates_minutes.push(over);
    }

    report
}
