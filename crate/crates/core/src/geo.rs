//! Geometric and temporal primitives: points, trajectories, daily
//! segmentation, resampling onto a time-of-day grid, distances, speeds and
//! bearings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::track::{Grid, GridTrack};

/// Mean Earth radius in meters. Every metric threshold in the crate is
/// expressed against this constant.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Meters per degree of arc on a great circle of radius [`EARTH_RADIUS_M`].
pub const METERS_PER_DEGREE: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

/// A validated WGS-84 coordinate in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint", into = "RawPoint")]
pub struct GeoPoint {
    lat_deg: f64,
    lon_deg: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPoint {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = Error;

    fn try_from(raw: RawPoint) -> Result<Self> {
        GeoPoint::new(raw.lat, raw.lon)
    }
}

impl From<GeoPoint> for RawPoint {
    fn from(p: GeoPoint) -> Self {
        RawPoint { lat: p.lat_deg, lon: p.lon_deg }
    }
}

impl GeoPoint {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self> {
        let valid = lat_deg.is_finite()
            && lon_deg.is_finite()
            && (-90.0..=90.0).contains(&lat_deg)
            && (-180.0..=180.0).contains(&lon_deg);
        if !valid {
            return Err(Error::InvalidCoordinate { lat: lat_deg, lon: lon_deg });
        }
        Ok(GeoPoint { lat_deg, lon_deg })
    }

    /// Clamps into the valid range. Used for values derived from already
    /// valid points (means, interpolations, small offsets).
    pub(crate) fn clamped(lat_deg: f64, lon_deg: f64) -> Self {
        let mut lon = lon_deg;
        if lon > 180.0 {
            lon -= 360.0;
        } else if lon < -180.0 {
            lon += 360.0;
        }
        GeoPoint { lat_deg: lat_deg.clamp(-90.0, 90.0), lon_deg: lon.clamp(-180.0, 180.0) }
    }

    #[inline]
    pub fn lat(&self) -> f64 {
        self.lat_deg
    }

    #[inline]
    pub fn lon(&self) -> f64 {
        self.lon_deg
    }

    /// Linear interpolation in coordinate space, `frac` in [0, 1].
    pub fn lerp(&self, other: &GeoPoint, frac: f64) -> GeoPoint {
        GeoPoint::clamped(
            self.lat_deg + (other.lat_deg - self.lat_deg) * frac,
            self.lon_deg + (other.lon_deg - self.lon_deg) * frac,
        )
    }

    /// Moves the point by a metric offset in the local tangent plane.
    pub fn offset_m(&self, east_m: f64, north_m: f64) -> GeoPoint {
        let dlat = north_m / METERS_PER_DEGREE;
        let coslat = self.lat_deg.to_radians().cos().max(1e-9);
        let dlon = east_m / (METERS_PER_DEGREE * coslat);
        GeoPoint::clamped(self.lat_deg + dlat, self.lon_deg + dlon)
    }

    /// Unweighted coordinate mean. `None` for an empty iterator.
    pub fn mean<'a>(points: impl IntoIterator<Item = &'a GeoPoint>) -> Option<GeoPoint> {
        let (mut lat, mut lon, mut n) = (0.0, 0.0, 0usize);
        for p in points {
            lat += p.lat_deg;
            lon += p.lon_deg;
            n += 1;
        }
        (n > 0).then(|| GeoPoint::clamped(lat / n as f64, lon / n as f64))
    }
}

/// Distance in degrees treating latitude and longitude as planar axes.
pub fn euclidean_deg(p: &GeoPoint, q: &GeoPoint) -> f64 {
    let dlat = p.lat_deg - q.lat_deg;
    let dlon = p.lon_deg - q.lon_deg;
    (dlat * dlat + dlon * dlon).sqrt()
}

/// Great-circle distance in meters.
pub fn haversine_m(p: &GeoPoint, q: &GeoPoint) -> f64 {
    let lat1 = p.lat_deg.to_radians();
    let lat2 = q.lat_deg.to_radians();
    let dlat = lat2 - lat1;
    let dlon = (q.lon_deg - p.lon_deg).to_radians();
    let a = (dlat * 0.5).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon * 0.5).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// Distance function used for ε-connectivity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Great-circle meters.
    #[default]
    Haversine,
    /// Planar degrees.
    EuclideanDeg,
}

impl Metric {
    #[inline]
    pub fn distance(self, p: &GeoPoint, q: &GeoPoint) -> f64 {
        match self {
            Metric::Haversine => haversine_m(p, q),
            Metric::EuclideanDeg => euclidean_deg(p, q),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedPoint {
    /// Epoch seconds, UTC.
    pub t: i64,
    pub pos: GeoPoint,
}

impl TimedPoint {
    pub fn new(t: i64, pos: GeoPoint) -> Self {
        TimedPoint { t, pos }
    }
}

/// Speed between two samples in meters per second.
pub fn speed_mps(a: &TimedPoint, b: &TimedPoint) -> Result<f64> {
    if a.t >= b.t {
        return Err(Error::NonIncreasingTime { prev: a.t, next: b.t });
    }
    Ok(haversine_m(&a.pos, &b.pos) / (b.t - a.t) as f64)
}

/// Initial great-circle bearing from `p` to `q`, degrees clockwise from
/// north in [0, 360).
pub fn bearing_deg(p: &GeoPoint, q: &GeoPoint) -> Result<f64> {
    if p == q {
        return Err(Error::UndefinedBearing);
    }
    let lat1 = p.lat_deg.to_radians();
    let lat2 = q.lat_deg.to_radians();
    let dlon = (q.lon_deg - p.lon_deg).to_radians();
    let y = dlon.sin() * lat2.cos();
    let x = lat1.cos() * lat2.sin() - lat1.sin() * lat2.cos() * dlon.cos();
    let deg = y.atan2(x).to_degrees().rem_euclid(360.0);
    // rem_euclid can return exactly 360.0 for tiny negative inputs
    Ok(if deg >= 360.0 { 0.0 } else { deg })
}

fn check_increasing(points: &[TimedPoint]) -> Result<()> {
    for w in points.windows(2) {
        if w[1].t <= w[0].t {
            return Err(Error::NonIncreasingTime { prev: w[0].t, next: w[1].t });
        }
    }
    Ok(())
}

/// Day ordinal of an epoch timestamp given the local offset from UTC.
pub fn day_index_of(t: i64, tz_offset_s: i64) -> i64 {
    (t + tz_offset_s).div_euclid(SECONDS_PER_DAY)
}

/// Epoch second of local midnight starting `day_index`.
pub fn day_start_of(day_index: i64, tz_offset_s: i64) -> i64 {
    day_index * SECONDS_PER_DAY - tz_offset_s
}

/// An agent's whole movement record prior to daily segmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrajectory {
    pub agent_id: String,
    points: Vec<TimedPoint>,
}

impl AgentTrajectory {
    pub fn new(agent_id: impl Into<String>, points: Vec<TimedPoint>) -> Result<Self> {
        check_increasing(&points)?;
        Ok(AgentTrajectory { agent_id: agent_id.into(), points })
    }

    pub fn points(&self) -> &[TimedPoint] {
        &self.points
    }

    pub fn into_points(self) -> Vec<TimedPoint> {
        self.points
    }
}

/// One local day of an agent's movement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubTrajectory {
    pub agent_id: String,
    pub day_index: i64,
    /// Epoch second of the local midnight opening this day.
    pub day_start: i64,
    points: Vec<TimedPoint>,
}

impl SubTrajectory {
    pub fn new(agent_id: impl Into<String>, day_index: i64, tz_offset_s: i64, points: Vec<TimedPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput);
        }
        check_increasing(&points)?;
        let day_start = day_start_of(day_index, tz_offset_s);
        let day_end = day_start + SECONDS_PER_DAY;
        if let Some(p) = points.iter().find(|p| p.t < day_start || p.t >= day_end) {
            return Err(Error::param(format!("timestamp {} outside day {day_index} [{day_start}, {day_end})", p.t)));
        }
        Ok(SubTrajectory { agent_id: agent_id.into(), day_index, day_start, points })
    }

    pub fn points(&self) -> &[TimedPoint] {
        &self.points
    }

    pub fn tz_offset_s(&self) -> i64 {
        self.day_index * SECONDS_PER_DAY - self.day_start
    }
}

/// Splits a trajectory at local midnights. Concatenating the output
/// reproduces the input exactly.
pub fn segment_daily(traj: &AgentTrajectory, tz_offset_s: i64) -> Result<Vec<SubTrajectory>> {
    if traj.points.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut out = Vec::new();
    let mut start = 0;
    let pts = &traj.points;
    for i in 1..=pts.len() {
        let boundary = i == pts.len() || day_index_of(pts[i].t, tz_offset_s) != day_index_of(pts[start].t, tz_offset_s);
        if boundary {
            let day = day_index_of(pts[start].t, tz_offset_s);
            out.push(SubTrajectory::new(traj.agent_id.clone(), day, tz_offset_s, pts[start..i].to_vec())?);
            start = i;
        }
    }
    Ok(out)
}

/// Temporal resolution of event detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ResampleSpec {
    /// Seconds between grid timestamps.
    pub stride_s: i64,
    /// Bracketing gaps longer than this are not interpolated; the slots
    /// inside them are absent.
    pub max_gap_s: i64,
}

impl Default for ResampleSpec {
    fn default() -> Self {
        ResampleSpec { stride_s: 60, max_gap_s: 600 }
    }
}

impl ResampleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stride_s < 1 || self.max_gap_s < self.stride_s {
            return Err(Error::param(format!(
                "resample spec requires stride_s >= 1 and max_gap_s >= stride_s, got {self:?}"
            )));
        }
        Ok(())
    }

    /// The time-of-day grid shared by every day at this stride.
    pub fn day_grid(&self) -> Grid {
        Grid { origin: 0, stride: self.stride_s, len: ((SECONDS_PER_DAY + self.stride_s - 1) / self.stride_s) as usize }
    }
}

/// A sub-trajectory sampled on its day's time-of-day grid. Slot `k` holds the
/// position at `day_start + k * stride`, or `None` when the agent is absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resampled {
    pub agent_id: String,
    pub day_index: i64,
    pub day_start: i64,
    pub track: GridTrack,
}

impl Resampled {
    /// Present grid samples as absolute timestamped points.
    pub fn points(&self) -> Vec<TimedPoint> {
        self.track.iter_present().map(|(k, p)| TimedPoint::new(self.day_start + self.track.grid.time(k), p)).collect()
    }

    pub fn absent_mask(&self) -> Vec<bool> {
        self.track.slots.iter().map(Option::is_none).collect()
    }

    pub fn to_sub_trajectory(&self) -> Result<SubTrajectory> {
        SubTrajectory::new(
            self.agent_id.clone(),
            self.day_index,
            self.day_index * SECONDS_PER_DAY - self.day_start,
            self.points(),
        )
    }
}

/// Places a sub-trajectory on the time-of-day grid by linear interpolation
/// between bracketing samples. Slots before the first sample, after the last,
/// or inside a gap longer than `max_gap_s` are absent.
pub fn resample(st: &SubTrajectory, spec: &ResampleSpec) -> Result<Resampled> {
    spec.validate()?;
    let grid = spec.day_grid();
    let pts = st.points();
    let mut slots = vec![None; grid.len];
    let mut j = 0;
    for (k, slot) in slots.iter_mut().enumerate() {
        let t = st.day_start + grid.time(k);
        if t < pts[0].t {
            continue;
        }
        if t > pts[pts.len() - 1].t {
            break;
        }
        while j + 1 < pts.len() && pts[j + 1].t <= t {
            j += 1;
        }
        let a = &pts[j];
        if a.t == t {
            *slot = Some(a.pos);
            continue;
        }
        let b = &pts[j + 1];
        if b.t - a.t > spec.max_gap_s {
            continue;
        }
        let frac = (t - a.t) as f64 / (b.t - a.t) as f64;
        *slot = Some(a.pos.lerp(&b.pos, frac));
    }
    Ok(Resampled {
        agent_id: st.agent_id.clone(),
        day_index: st.day_index,
        day_start: st.day_start,
        track: GridTrack::new(grid, slots),
    })
}
