//! Deterministic patterns-of-life simulator.
//!
//! Agents live in a shared set of buildings and repeat a home, work,
//! optional leisure, home routine with per-day jitter. Travel is straight
//! line at the agent's mode speed; positions carry Gaussian noise in the
//! local tangent plane. A few agents get scripted detours into 50 m boxes
//! during the test days.
//!
//! Every random stream is a ChaCha8 stream keyed by `rng_seed` and a hash of
//! its purpose (agent id, anomaly day), so output never depends on worker
//! scheduling.

use std::collections::BTreeSet;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::write_agent_file;
use crate::error::{Error, Result};
use crate::geo::{day_start_of, haversine_m, AgentTrajectory, GeoPoint, TimedPoint, SECONDS_PER_DAY};
use crate::reeb::Mode;
use crate::scoring::WlgAssignment;

/// Half the side of a target box.
pub const BOX_HALF_WIDTH_M: f64 = 25.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct Aoi {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl Aoi {
    pub fn validate(&self) -> Result<()> {
        GeoPoint::new(self.min_lat, self.min_lon)?;
        GeoPoint::new(self.max_lat, self.max_lon)?;
        if !(self.min_lat < self.max_lat && self.min_lon < self.max_lon) {
            return Err(Error::param("area of interest must be nonempty"));
        }
        Ok(())
    }

    pub fn contains(&self, p: &GeoPoint) -> bool {
        (self.min_lat..=self.max_lat).contains(&p.lat()) && (self.min_lon..=self.max_lon).contains(&p.lon())
    }

    fn sample(&self, rng: &mut impl Rng) -> GeoPoint {
        let lat = rng.random_range(self.min_lat..self.max_lat);
        let lon = rng.random_range(self.min_lon..self.max_lon);
        GeoPoint::new(lat, lon).expect("inside a validated box")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct SpeedRange {
    pub min_mps: f64,
    pub max_mps: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ModeSpeeds {
    pub walk: SpeedRange,
    pub bike: SpeedRange,
    pub car: SpeedRange,
}

impl Default for ModeSpeeds {
    fn default() -> Self {
        ModeSpeeds {
            walk: SpeedRange { min_mps: 1.2, max_mps: 1.8 },
            bike: SpeedRange { min_mps: 3.5, max_mps: 6.0 },
            car: SpeedRange { min_mps: 8.0, max_mps: 14.0 },
        }
    }
}

impl ModeSpeeds {
    pub fn range(&self, m: Mode) -> SpeedRange {
        match m {
            Mode::Walk => self.walk,
            Mode::Bike => self.bike,
            Mode::Car => self.car,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default)]
pub struct AnomalyConfig {
    pub n_anomalous: usize,
    /// Test days on which each anomalous agent detours.
    pub active_days: usize,
    pub dwell_min_s: i64,
    pub dwell_max_s: i64,
    /// Time-of-day range for the detour start, seconds.
    pub entry_window_s: (i64, i64),
    /// Minimum distance from a box center to any building.
    pub clearance_m: f64,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        AnomalyConfig {
            n_anomalous: 5,
            active_days: 2,
            dwell_min_s: 1800,
            dwell_max_s: 3600,
            entry_window_s: (10 * 3600, 14 * 3600),
            clearance_m: 800.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default)]
pub struct WorldConfig {
    pub aoi: Aoi,
    pub n_agents: usize,
    pub n_days_train: usize,
    pub n_days_test: usize,
    pub sample_period_s: i64,
    pub speeds: ModeSpeeds,
    pub gps_noise_sigma_m: f64,
    pub rng_seed: u64,
    /// Epoch day of the first simulated day.
    pub first_day: i64,
    pub tz_offset_s: i64,
    pub n_homes: usize,
    pub n_workplaces: usize,
    pub n_leisure: usize,
    /// Habitual leisure sites per agent, drawn from the shared pool.
    pub leisure_sites_per_agent: usize,
    /// Uniform per-day jitter on every scheduled time, whole minutes.
    /// Schedules live on a one-minute lattice, so two days that leave at
    /// the same minute travel in lockstep.
    pub schedule_jitter_min: i64,
    pub leisure_prob: f64,
    /// Choose the mode per trip by distance instead of once per agent.
    pub per_trip_mode: bool,
    pub anomalies: AnomalyConfig,
    pub wlg_size: usize,
    pub anomalies_in_distinct_groups: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            aoi: Aoi { min_lat: 47.60, min_lon: -122.40, max_lat: 47.70, max_lon: -122.28 },
            n_agents: 200,
            n_days_train: 14,
            n_days_test: 7,
            sample_period_s: 60,
            speeds: ModeSpeeds::default(),
            gps_noise_sigma_m: 5.0,
            rng_seed: 20_240_601,
            first_day: 19_723,
            tz_offset_s: 0,
            n_homes: 80,
            n_workplaces: 20,
            n_leisure: 15,
            leisure_sites_per_agent: 1,
            schedule_jitter_min: 5,
            leisure_prob: 0.6,
            per_trip_mode: false,
            anomalies: AnomalyConfig::default(),
            wlg_size: 20,
            anomalies_in_distinct_groups: true,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        self.aoi.validate()?;
        if self.n_agents == 0 || self.n_days_train == 0 || self.n_days_test == 0 {
            return Err(Error::param("agent and day counts must be positive"));
        }
        if self.sample_period_s < 1 || SECONDS_PER_DAY % self.sample_period_s != 0 {
            return Err(Error::param("sample period must be a positive divisor of a day"));
        }
        if !(self.gps_noise_sigma_m >= 0.0 && self.gps_noise_sigma_m.is_finite()) {
            return Err(Error::param("noise sigma must be nonnegative"));
        }
        if self.n_homes == 0 || self.n_workplaces == 0 || self.n_leisure == 0 || self.leisure_sites_per_agent == 0 {
            return Err(Error::param("building counts must be positive"));
        }
        for m in [Mode::Walk, Mode::Bike, Mode::Car] {
            let r = self.speeds.range(m);
            if !(r.min_mps > 0.0 && r.min_mps <= r.max_mps) {
                return Err(Error::param(format!("invalid {m:?} speed range")));
            }
        }
        let a = &self.anomalies;
        if a.n_anomalous > self.n_agents || a.active_days > self.n_days_test {
            return Err(Error::param("anomaly counts exceed population or test days"));
        }
        if !(0 < a.dwell_min_s && a.dwell_min_s <= a.dwell_max_s) {
            return Err(Error::param("dwell range must be positive"));
        }
        if !(0 <= a.entry_window_s.0
            && a.entry_window_s.0 <= a.entry_window_s.1
            && a.entry_window_s.1 < SECONDS_PER_DAY)
        {
            return Err(Error::param("entry window must lie within a day"));
        }
        if self.wlg_size < 2 {
            return Err(Error::param("group size must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.leisure_prob) || self.schedule_jitter_min < 0 {
            return Err(Error::param("invalid schedule parameters"));
        }
        Ok(())
    }

    pub fn train_days(&self) -> std::ops::Range<i64> {
        self.first_day..self.first_day + self.n_days_train as i64
    }

    pub fn test_days(&self) -> std::ops::Range<i64> {
        let s = self.first_day + self.n_days_train as i64;
        s..s + self.n_days_test as i64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: String,
    pub home: GeoPoint,
    pub work: GeoPoint,
    pub leisure: Vec<GeoPoint>,
    /// Mean time-of-day of leaving home and leaving work, seconds.
    pub depart_s: i64,
    pub return_s: i64,
    pub mode: Mode,
    pub speed_mps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub center: GeoPoint,
    pub half_width_m: f64,
    pub dwell_s: i64,
    /// Epoch days.
    pub active_days: Vec<i64>,
    pub entry_window_s: (i64, i64),
    pub speed_mps: f64,
    pub noise_sigma_m: f64,
    pub tz_offset_s: i64,
}

impl AnomalySpec {
    /// Inside the box, measured along the local axes.
    pub fn contains(&self, p: &GeoPoint, slack_m: f64) -> bool {
        let h = self.half_width_m + slack_m;
        let north = haversine_m(&GeoPoint::new(p.lat(), self.center.lon()).expect("valid"), &self.center);
        let east = haversine_m(&GeoPoint::new(self.center.lat(), p.lon()).expect("valid"), &self.center);
        north <= h && east <= h
    }
}

/// One detour. Times are epoch seconds of samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyInterval {
    pub agent_id: String,
    pub day_index: i64,
    /// First and last replaced sample.
    pub splice_start: i64,
    pub splice_end: i64,
    /// First and last sample held inside the box.
    pub dwell_start: i64,
    pub dwell_end: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub anomalous: BTreeSet<String>,
    pub specs: Vec<(String, AnomalySpec)>,
    pub intervals: Vec<AnomalyInterval>,
    pub wlg: WlgAssignment,
}

#[derive(Clone, Debug)]
pub struct Population {
    pub profiles: Vec<AgentProfile>,
    pub trajectories: Vec<AgentTrajectory>,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub population: Population,
    pub truth: GroundTruth,
}

/// Independent stream for `(seed, purpose)`.
fn stream(seed: u64, purpose: &str) -> ChaCha8Rng {
    let h = Sha256::digest(purpose.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from_le_bytes(h[..8].try_into().expect("8 bytes")));
    rng
}

fn round7(p: GeoPoint) -> GeoPoint {
    let r = |x: f64| (x * 1e7).round() / 1e7;
    GeoPoint::new(r(p.lat()), r(p.lon())).expect("rounding stays in range")
}

struct Noise(Option<Normal<f64>>);

impl Noise {
    fn new(sigma: f64) -> Self {
        Noise((sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma")))
    }

    fn apply(&self, p: GeoPoint, rng: &mut impl Rng) -> GeoPoint {
        match &self.0 {
            Some(n) => round7(p.offset_m(n.sample(rng), n.sample(rng))),
            None => round7(p),
        }
    }
}

pub fn agent_id(i: usize) -> String {
    format!("agent{i:04}")
}

fn mode_for_distance(d_m: f64) -> Mode {
    if d_m <= 1500.0 {
        Mode::Walk
    } else if d_m <= 5000.0 {
        Mode::Bike
    } else {
        Mode::Car
    }
}

#[derive(Clone, Copy, Debug)]
enum Leg {
    Stay { t1: i64, at: GeoPoint },
    Move { t0: i64, t1: i64, from: GeoPoint, to: GeoPoint },
}

impl Leg {
    fn end(&self) -> i64 {
        match *self {
            Leg::Stay { t1, .. } | Leg::Move { t1, .. } => t1,
        }
    }

    fn at(&self, t: i64) -> GeoPoint {
        match *self {
            Leg::Stay { at, .. } => at,
            Leg::Move { t0, t1, from, to } => from.lerp(&to, (t - t0) as f64 / (t1 - t0).max(1) as f64),
        }
    }
}

/// Noise-free movement for one day, times relative to local midnight.
struct DayPlan {
    legs: Vec<Leg>,
}

impl DayPlan {
    fn new(start: GeoPoint) -> Self {
        DayPlan { legs: vec![Leg::Stay { t1: 0, at: start }] }
    }

    fn here(&self) -> (i64, GeoPoint) {
        let last = self.legs.last().expect("plan starts with a stay");
        (last.end(), last.at(last.end()))
    }

    fn stay_until(&mut self, t: i64) {
        let (now, p) = self.here();
        if t > now {
            self.legs.push(Leg::Stay { t1: t, at: p });
        }
    }

    fn travel(&mut self, to: GeoPoint, speed: f64) {
        let (now, p) = self.here();
        let dur = (haversine_m(&p, &to) / speed).ceil() as i64;
        if dur > 0 {
            self.legs.push(Leg::Move { t0: now, t1: now + dur, from: p, to });
        }
    }

    fn at(&self, t: i64) -> GeoPoint {
        let i = self.legs.partition_point(|l| l.end() < t);
        match self.legs.get(i) {
            Some(l) => l.at(t),
            None => self.here().1,
        }
    }
}

fn plan_day(p: &AgentProfile, cfg: &WorldConfig, rng: &mut impl Rng) -> DayPlan {
    let jm = cfg.schedule_jitter_min;
    let mut j = |t: i64| t + 60 * rng.random_range(-jm..=jm);
    let speed_for = |from: &GeoPoint, to: &GeoPoint| {
        if cfg.per_trip_mode {
            let r = cfg.speeds.range(mode_for_distance(haversine_m(from, to)));
            (r.min_mps + r.max_mps) / 2.0
        } else {
            p.speed_mps
        }
    };
    let mut plan = DayPlan::new(p.home);
    plan.stay_until(j(p.depart_s));
    plan.travel(p.work, speed_for(&p.home, &p.work));
    plan.stay_until(j(p.return_s));
    if rng.random_bool(cfg.leisure_prob) {
        let dest = *p.leisure.choose(rng).expect("at least one leisure site");
        plan.travel(dest, speed_for(&p.work, &dest));
        let (now, _) = plan.here();
        plan.stay_until(now + 60 * rng.random_range(45..=120));
        plan.travel(p.home, speed_for(&dest, &p.home));
    } else {
        plan.travel(p.home, speed_for(&p.work, &p.home));
    }
    plan.stay_until(SECONDS_PER_DAY);
    plan
}

struct World {
    homes: Vec<GeoPoint>,
    workplaces: Vec<GeoPoint>,
    leisure: Vec<GeoPoint>,
}

impl World {
    fn new(cfg: &WorldConfig) -> Self {
        let mut rng = stream(cfg.rng_seed, "world");
        let mut pts = |n: usize| (0..n).map(|_| cfg.aoi.sample(&mut rng)).collect::<Vec<_>>();
        World { homes: pts(cfg.n_homes), workplaces: pts(cfg.n_workplaces), leisure: pts(cfg.n_leisure) }
    }

    fn buildings(&self) -> impl Iterator<Item = &GeoPoint> {
        self.homes.iter().chain(&self.workplaces).chain(&self.leisure)
    }
}

fn make_profile(cfg: &WorldConfig, world: &World, id: &str) -> AgentProfile {
    let mut rng = stream(cfg.rng_seed, &format!("profile/{id}"));
    let home = *world.homes.choose(&mut rng).expect("nonempty");
    let work = *world.workplaces.choose(&mut rng).expect("nonempty");
    // Habitual sites come from the few nearest home, as people rarely cross
    // town for routine leisure.
    let mut near = world.leisure.clone();
    near.sort_by(|a, b| haversine_m(&home, a).total_cmp(&haversine_m(&home, b)));
    near.truncate((2 * cfg.leisure_sites_per_agent).max(3));
    let k = cfg.leisure_sites_per_agent.min(near.len());
    let leisure = near.choose_multiple(&mut rng, k).copied().collect();
    let mode = mode_for_distance(haversine_m(&home, &work));
    let r = cfg.speeds.range(mode);
    AgentProfile {
        agent_id: id.to_string(),
        home,
        work,
        leisure,
        depart_s: 60 * rng.random_range(7 * 60..=9 * 60),
        return_s: 60 * rng.random_range(16 * 60..=18 * 60),
        mode,
        speed_mps: rng.random_range(r.min_mps..=r.max_mps),
    }
}

fn sample_agent(cfg: &WorldConfig, p: &AgentProfile) -> AgentTrajectory {
    let noise = Noise::new(cfg.gps_noise_sigma_m);
    let days = cfg.first_day..cfg.test_days().end;
    let per_day = (SECONDS_PER_DAY / cfg.sample_period_s) as usize;
    let mut points = Vec::with_capacity(per_day * days.clone().count());
    for day in days {
        let mut rng = stream(cfg.rng_seed, &format!("day/{}/{day}", p.agent_id));
        let plan = plan_day(p, cfg, &mut rng);
        let day_start = day_start_of(day, cfg.tz_offset_s);
        for k in 0..per_day as i64 {
            let tod = k * cfg.sample_period_s;
            points.push(TimedPoint::new(day_start + tod, noise.apply(plan.at(tod), &mut rng)));
        }
    }
    AgentTrajectory::new(p.agent_id.clone(), points).expect("grid times increase")
}

/// Normal routines for every agent. Agents are generated in parallel; each
/// draws only from its own streams.
pub fn generate_population(cfg: &WorldConfig) -> Result<Population> {
    cfg.validate()?;
    let world = World::new(cfg);
    let profiles: Vec<AgentProfile> = (0..cfg.n_agents).map(|i| make_profile(cfg, &world, &agent_id(i))).collect();
    let trajectories = profiles.par_iter().map(|p| sample_agent(cfg, p)).collect();
    Ok(Population { profiles, trajectories })
}

/// Splices a detour into `traj` on each active day: travel from the current
/// sample to the box at `speed_mps`, hold inside it for at least `dwell_s`,
/// then rejoin the original trajectory at the first sample reachable in
/// time. Sample times never change and samples outside the splice are left
/// untouched.
pub fn inject_anomaly(
    traj: &AgentTrajectory,
    spec: &AnomalySpec,
    seed: u64,
) -> Result<(AgentTrajectory, Vec<AnomalyInterval>)> {
    if !(spec.dwell_s > 0 && spec.speed_mps > 0.0 && spec.half_width_m > 0.0) {
        return Err(Error::param("dwell, speed and box size must be positive"));
    }
    let noise = Noise::new(spec.noise_sigma_m);
    let mut pts = traj.points().to_vec();
    let mut intervals = Vec::new();
    let infeasible = |day: i64, why: &str| Error::InfeasibleAnomaly(format!("{} day {day}: {why}", traj.agent_id));
    let mut days = spec.active_days.clone();
    days.sort_unstable();
    days.dedup();
    for day in days {
        let mut rng = stream(seed, &format!("anomaly/{}/{day}", traj.agent_id));
        let day_start = day_start_of(day, spec.tz_offset_s);
        let day_end = day_start + SECONDS_PER_DAY;
        let (w0, w1) = spec.entry_window_s;
        let entry = day_start + rng.random_range(w0..=w1);
        let i0 = pts.partition_point(|p| p.t < entry);
        if i0 >= pts.len() || pts[i0].t >= day_end {
            return Err(infeasible(day, "no samples in the entry window"));
        }
        let (t0, p0) = (pts[i0].t, pts[i0].pos);
        let travel = |p: &GeoPoint| (haversine_m(p, &spec.center) / spec.speed_mps).ceil() as i64;
        let arrive = t0 + travel(&p0);
        // The dwell is measured between samples, so both ends snap forward
        // to the sample grid.
        let first_at = |t: i64| pts.partition_point(|p| p.t < t);
        let a = first_at(arrive);
        let l = pts.get(a).map(|p| first_at(p.t + spec.dwell_s));
        let leave = l.and_then(|l| pts.get(l)).map(|p| p.t).filter(|&t| t < day_end);
        let Some(leave) = leave else {
            return Err(infeasible(day, "dwell does not fit in the day"));
        };
        // First original sample reachable from the box after the dwell.
        let i1 = (i0 + 1..pts.len())
            .take_while(|&i| pts[i].t < day_end)
            .find(|&i| pts[i].t >= leave && travel(&pts[i].pos) <= pts[i].t - leave)
            .ok_or_else(|| infeasible(day, "box unreachable within the day at mode speed"))?;
        let (t1, p1) = (pts[i1].t, pts[i1].pos);
        let depart_box = t1 - travel(&p1);
        let (mut d0, mut d1) = (None, None);
        for p in &mut pts[i0 + 1..i1] {
            let t = p.t;
            let exact = if t < arrive {
                p0.lerp(&spec.center, (t - t0) as f64 / (arrive - t0) as f64)
            } else if t <= depart_box {
                d0.get_or_insert(t);
                d1 = Some(t);
                spec.center
            } else {
                spec.center.lerp(&p1, (t - depart_box) as f64 / (t1 - depart_box) as f64)
            };
            p.pos = noise.apply(exact, &mut rng);
        }
        if i0 + 1 < i1 {
            intervals.push(AnomalyInterval {
                agent_id: traj.agent_id.clone(),
                day_index: day,
                splice_start: pts[i0 + 1].t,
                splice_end: pts[i1 - 1].t,
                dwell_start: d0.unwrap_or(arrive),
                dwell_end: d1.unwrap_or(depart_box),
            });
        }
    }
    Ok((AgentTrajectory::new(traj.agent_id.clone(), pts)?, intervals))
}

/// Random partition into groups of `g` (the last may be smaller). With
/// `distinct`, anomalous agents are spread over distinct groups while
/// groups remain.
pub fn assign_wlgs(
    agent_ids: &[String],
    g: usize,
    anomalous: &BTreeSet<String>,
    distinct: bool,
    seed: u64,
) -> Result<WlgAssignment> {
    if g < 2 {
        return Err(Error::param("group size must be at least 2"));
    }
    let mut rng = stream(seed, "wlg");
    let n = agent_ids.len();
    let n_groups = n.div_ceil(g);
    let cap = |j: usize| if j + 1 == n_groups { n - g * (n_groups - 1) } else { g };
    let mut seats: Vec<Vec<String>> = vec![Vec::new(); n_groups];
    let mut ids: Vec<String> = agent_ids.to_vec();
    ids.sort();
    let mut rest = Vec::new();
    if distinct {
        let mut anom: Vec<String> = ids.iter().filter(|a| anomalous.contains(*a)).cloned().collect();
        anom.shuffle(&mut rng);
        let mut order: Vec<usize> = (0..n_groups).collect();
        let mut pending = anom.into_iter();
        'outer: loop {
            order.shuffle(&mut rng);
            let mut placed = false;
            for &j in &order {
                if seats[j].len() < cap(j) {
                    match pending.next() {
                        Some(a) => {
                            seats[j].push(a);
                            placed = true;
                        }
                        None => break 'outer,
                    }
                }
            }
            if !placed {
                break;
            }
        }
        rest.extend(ids.into_iter().filter(|a| !anomalous.contains(a)));
    } else {
        rest = ids;
    }
    rest.shuffle(&mut rng);
    let mut rest = rest.into_iter();
    for (j, s) in seats.iter_mut().enumerate() {
        while s.len() < cap(j) {
            s.push(rest.next().expect("capacity matches population"));
        }
    }
    Ok(WlgAssignment(
        seats
            .into_iter()
            .enumerate()
            .flat_map(|(j, s)| s.into_iter().map(move |a| (a, format!("wlg{j:03}"))))
            .collect(),
    ))
}

fn place_box(cfg: &WorldConfig, world: &World, taken: &[GeoPoint], rng: &mut impl Rng) -> Result<GeoPoint> {
    let margin = 200.0;
    for _ in 0..10_000 {
        let c = cfg.aoi.sample(rng);
        let inside = cfg.aoi.contains(&c.offset_m(margin, margin)) && cfg.aoi.contains(&c.offset_m(-margin, -margin));
        if inside && world.buildings().chain(taken).all(|b| haversine_m(b, &c) >= cfg.anomalies.clearance_m) {
            return Ok(round7(c));
        }
    }
    Err(Error::InfeasibleAnomaly("no box location clears every building".into()))
}

/// Full synthetic dataset: population, detours for the anomalous agents and
/// weak-label groups.
pub fn simulate(cfg: &WorldConfig) -> Result<SimOutput> {
    let mut population = generate_population(cfg)?;
    let world = World::new(cfg);
    let mut rng = stream(cfg.rng_seed, "anomalies");
    let ids: Vec<String> = population.profiles.iter().map(|p| p.agent_id.clone()).collect();
    let picked: Vec<usize> = rand::seq::index::sample(&mut rng, ids.len(), cfg.anomalies.n_anomalous).into_vec();
    let test_days: Vec<i64> = cfg.test_days().collect();
    let mut specs = Vec::new();
    let mut centers = Vec::new();
    for &i in &picked {
        let p = &population.profiles[i];
        let center = place_box(cfg, &world, &centers, &mut rng)?;
        centers.push(center);
        let mut active: Vec<i64> = test_days.choose_multiple(&mut rng, cfg.anomalies.active_days).copied().collect();
        active.sort_unstable();
        specs.push((
            i,
            AnomalySpec {
                center,
                half_width_m: BOX_HALF_WIDTH_M,
                dwell_s: rng.random_range(cfg.anomalies.dwell_min_s..=cfg.anomalies.dwell_max_s),
                active_days: active,
                entry_window_s: cfg.anomalies.entry_window_s,
                speed_mps: p.speed_mps,
                noise_sigma_m: cfg.gps_noise_sigma_m,
                tz_offset_s: cfg.tz_offset_s,
            },
        ));
    }
    let mut intervals = Vec::new();
    for (i, spec) in &specs {
        let (t, iv) = inject_anomaly(&population.trajectories[*i], spec, cfg.rng_seed)?;
        population.trajectories[*i] = t;
        intervals.extend(iv);
    }
    let anomalous: BTreeSet<String> = picked.iter().map(|&i| ids[i].clone()).collect();
    let wlg = assign_wlgs(&ids, cfg.wlg_size, &anomalous, cfg.anomalies_in_distinct_groups, cfg.rng_seed)?;
    let mut specs: Vec<(String, AnomalySpec)> = specs.into_iter().map(|(i, s)| (ids[i].clone(), s)).collect();
    specs.sort_by(|a, b| a.0.cmp(&b.0));
    intervals.sort_by(|a, b| (&a.agent_id, a.day_index).cmp(&(&b.agent_id, b.day_index)));
    Ok(SimOutput { population, truth: GroundTruth { anomalous, specs, intervals, wlg } })
}

pub const TRUTH_DIR: &str = "truth";
pub const WLG_DIR: &str = "wlg";

fn csv_file(path: &Path) -> Result<csv::Writer<BufWriter<fs::File>>> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format { path: path.to_path_buf(), message: e.to_string() }
}

/// Writes agent files, ground truth, groups and the generating config.
pub fn write_dataset(out: &SimOutput, cfg: &WorldConfig, root: &Path) -> Result<()> {
    out.population.trajectories.par_iter().try_for_each(|t| write_agent_file(root, t))?;

    let path = root.join(TRUTH_DIR).join("anomalous_agents.csv");
    let mut w = csv_file(&path)?;
    w.write_record(["agent_id"]).map_err(csv_err(&path))?;
    for a in &out.truth.anomalous {
        w.write_record([a]).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = root.join(TRUTH_DIR).join("intervals.csv");
    let mut w = csv_file(&path)?;
    for iv in &out.truth.intervals {
        w.serialize(iv).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = root.join(TRUTH_DIR).join("specs.json");
    let json = serde_json::to_vec_pretty(&out.truth.specs)
        .map_err(|e| Error::Format { path: path.clone(), message: e.to_string() })?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

    let dir = root.join(WLG_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("groups.csv");
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    out.truth.wlg.write_csv(BufWriter::new(f))?;

    let path = root.join("config.json");
    let json =
        serde_json::to_vec_pretty(cfg).map_err(|e| Error::Format { path: path.clone(), message: e.to_string() })?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_anomalous(root: &Path) -> Result<BTreeSet<String>> {
    let path = root.join(TRUTH_DIR).join("anomalous_agents.csv");
    let mut rd =
        csv::Reader::from_path(&path).map_err(|e| Error::Format { path: path.clone(), message: e.to_string() })?;
    rd.records().map(|r| r.map(|r| r[0].to_string()).map_err(csv_err(&path))).collect()
}

pub fn read_wlg(root: &Path) -> Result<WlgAssignment> {
    let path = root.join(WLG_DIR).join("groups.csv");
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    WlgAssignment::read_csv(std::io::BufReader::new(f))
}

pub fn read_world_config(root: &Path) -> Result<WorldConfig> {
    let path = root.join("config.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format { path, message: e.to_string() })
}
