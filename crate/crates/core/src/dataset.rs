//! Agent-partitioned trajectory files: `<root>/agents/<agent_id>.csv` with
//! header `agent_id,timestamp,latitude,longitude`.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geo::{AgentTrajectory, GeoPoint, TimedPoint};

pub const AGENTS_DIR: &str = "agents";
const HEADER: [&str; 4] = ["agent_id", "timestamp", "latitude", "longitude"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TimeFormat {
    Epoch,
    Rfc3339,
}

fn parse_time(s: &str, fmt: TimeFormat) -> Option<i64> {
    match fmt {
        TimeFormat::Epoch => s.parse().ok(),
        TimeFormat::Rfc3339 => chrono::DateTime::parse_from_rfc3339(s).ok().map(|d| d.timestamp()),
    }
}

/// Reads one agent file. The timestamp format is fixed by the first data
/// row; every row must carry the same agent id and strictly later time.
pub fn read_agent_csv<R: Read>(r: R, path: &Path) -> Result<AgentTrajectory> {
    let rec_err = |row: u64, message: String| Error::Record { path: path.to_path_buf(), row, message };
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header = rd.headers().map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("expected header {}", HEADER.join(",")),
        });
    }
    let mut agent: Option<String> = None;
    let mut fmt: Option<TimeFormat> = None;
    let mut points: Vec<TimedPoint> = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let row = i as u64 + 2;
        let rec = rec.map_err(|e| rec_err(row, e.to_string()))?;
        if rec.len() != 4 {
            return Err(rec_err(row, format!("expected 4 fields, found {}", rec.len())));
        }
        match &agent {
            None => agent = Some(rec[0].to_string()),
            Some(a) if a != &rec[0] => {
                return Err(rec_err(row, format!("agent id {} differs from {a}", &rec[0])));
            }
            _ => {}
        }
        let f = *fmt.get_or_insert(if rec[1].parse::<i64>().is_ok() { TimeFormat::Epoch } else { TimeFormat::Rfc3339 });
        let t = parse_time(&rec[1], f).ok_or_else(|| rec_err(row, format!("bad timestamp {:?}", &rec[1])))?;
        if t < 0 {
            return Err(rec_err(row, "negative timestamp".into()));
        }
        let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| rec_err(row, format!("bad {what} {s:?}")));
        let pos = GeoPoint::new(num(&rec[2], "latitude")?, num(&rec[3], "longitude")?)
            .map_err(|e| rec_err(row, e.to_string()))?;
        if let Some(prev) = points.last() {
            if t <= prev.t {
                return Err(rec_err(row, format!("non-increasing time: {} then {t}", prev.t)));
            }
        }
        points.push(TimedPoint::new(t, pos));
    }
    let agent = agent.ok_or(Error::Format { path: path.to_path_buf(), message: "no rows".into() })?;
    AgentTrajectory::new(agent, points)
}

/// Timestamp of the first data row, without reading the rest of the file.
pub fn first_timestamp(path: &Path) -> Result<i64> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(std::io::BufReader::new(f));
    let rec = rd
        .records()
        .next()
        .ok_or_else(|| Error::Format { path: path.to_path_buf(), message: "no rows".into() })?
        .map_err(|e| Error::Record { path: path.to_path_buf(), row: 2, message: e.to_string() })?;
    let s = rec.get(1).unwrap_or_default();
    let fmt = if s.parse::<i64>().is_ok() { TimeFormat::Epoch } else { TimeFormat::Rfc3339 };
    parse_time(s, fmt).ok_or_else(|| Error::Record {
        path: path.to_path_buf(),
        row: 2,
        message: format!("bad timestamp {s:?}"),
    })
}

/// Epoch-second timestamps; coordinates use shortest round-trip formatting.
pub fn write_agent_csv<W: Write>(traj: &AgentTrajectory, w: W) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format { path: PathBuf::from(&traj.agent_id), message: e.to_string() };
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(HEADER).map_err(fmt)?;
    for p in traj.points() {
        wr.write_record([traj.agent_id.as_str(), &p.t.to_string(), &p.pos.lat().to_string(), &p.pos.lon().to_string()])
            .map_err(fmt)?;
    }
    wr.flush().map_err(|e| Error::io(&traj.agent_id, e))
}

pub fn agent_path(root: &Path, agent_id: &str) -> PathBuf {
    root.join(AGENTS_DIR).join(format!("{agent_id}.csv"))
}

pub fn write_agent_file(root: &Path, traj: &AgentTrajectory) -> Result<()> {
    let dir = root.join(AGENTS_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = agent_path(root, &traj.agent_id);
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_agent_csv(traj, BufWriter::new(f)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(&path, source),
        other => other,
    })
}

pub fn read_agent_file(path: &Path) -> Result<AgentTrajectory> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_agent_csv(std::io::BufReader::new(f), path)
}

/// Agent files under `root/agents`, sorted by file name.
pub fn list_agent_files(root: &Path) -> Result<Vec<PathBuf>> {
    let dir = root.join(AGENTS_DIR);
    let mut out = Vec::new();
    for e in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let p = e.map_err(|e| Error::io(&dir, e))?.path();
        if p.extension().is_some_and(|x| x == "csv") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}
