//! Stage orchestration over an agent-partitioned dataset root.
//!
//! Stages run in dependency order: agent graphs, population graph, scores,
//! metrics. Each stage owns one directory under the root and records a
//! content stamp: the digest of its inputs and of the files it produced. A
//! stage whose input digest and output files both still match its stamp is
//! skipped. While a stage runs its directory carries an `.incomplete`
//! marker, which stays behind if the stage fails.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{first_timestamp, list_agent_files, read_agent_file};
use crate::error::{Error, Result};
use crate::evalx::{self, LabeledScores, Metrics};
use crate::events::EpsilonConfig;
use crate::geo::{day_index_of, resample, segment_daily, ResampleSpec};
use crate::marg::{build_marg, marg_stats, write_stats_csv, MargBuilder, MargConfig, PseudoTrack};
use crate::reeb::{self, ReebGraph, TrackInfo};
use crate::scoring::{
    aggregate_values, apply_wlg_filter, match_test_graph, read_detections_csv, top_nodes, write_detections_csv,
    write_node_scores_jsonl, AgentScore, Aggregation, FeatureWeights, FusionParams, NodeMatches, WlgAssignment,
    WlgPolicy,
};
use crate::simgen::{self, generate_population, WorldConfig};
use crate::terg::{annotate_features, build_terg_with, FeatureParams, DEFAULT_REP_STRIDE_S};
use crate::track::{Grid, SpanTrack};

pub const TERG_DIR: &str = "terg";
pub const MARG_DIR: &str = "marg";
pub const DETECTIONS_DIR: &str = "detections";
pub const METRICS_DIR: &str = "metrics";
const STAMP: &str = ".stamp";
const INCOMPLETE: &str = ".incomplete";

/// Candidate sets searched by `tune`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TuneGrid {
    pub alphas: Vec<f64>,
    /// Lattice step over the weight simplex; `None` searches only the
    /// explicit sets.
    pub weight_step: Option<f64>,
    /// Extra `[dist, stop, velocity, mode]` weight vectors.
    pub weight_sets: Vec<[f64; 4]>,
    /// Distance normalization scales in meters; empty keeps the configured one.
    pub dist_scales_m: Vec<f64>,
}

impl Default for TuneGrid {
    fn default() -> Self {
        TuneGrid {
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            weight_step: Some(0.1),
            weight_sets: Vec::new(),
            dist_scales_m: vec![250.0, 500.0, 1000.0, 2000.0],
        }
    }
}

impl TuneGrid {
    /// Weight vectors in search order: lattice first (lexicographic), then
    /// the explicit sets, without duplicates.
    pub fn weight_candidates(&self) -> Result<Vec<[f64; 4]>> {
        let mut out: Vec<[f64; 4]> = Vec::new();
        if let Some(step) = self.weight_step {
            let n = (1.0 / step).round() as usize;
            if !(step > 0.0) || ((n as f64) * step - 1.0).abs() > 1e-9 {
                return Err(Error::param("weight_step must divide 1"));
            }
            for a in 0..=n {
                for b in 0..=n - a {
                    for c in 0..=n - a - b {
                        let d = n - a - b - c;
                        out.push([a, b, c, d].map(|x| x as f64 / n as f64));
                    }
                }
            }
        }
        for w in &self.weight_sets {
            if !out.contains(w) {
                out.push(*w);
            }
        }
        if out.is_empty() || self.alphas.is_empty() {
            return Err(Error::param("tuning grid is empty"));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub epsilon: EpsilonConfig,
    pub resample: ResampleSpec,
    /// Seconds between vertices of node centroid paths.
    pub rep_stride_s: i64,
    pub tz_offset_s: i64,
    /// Days, counted from the earliest day in the dataset, that form the
    /// training period; later days are scored.
    pub train_days: usize,
    pub features: FeatureParams,
    pub marg: MargConfig,
    pub weights: FeatureWeights,
    pub fusion: FusionParams,
    pub aggregation: Aggregation,
    pub wlg_policy: WlgPolicy,
    /// Highest-scoring nodes kept per agent in the detections.
    pub top_nodes: usize,
    pub workers: usize,
    pub tune: TuneGrid,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            epsilon: EpsilonConfig::default(),
            resample: ResampleSpec::default(),
            rep_stride_s: DEFAULT_REP_STRIDE_S,
            tz_offset_s: 0,
            train_days: 14,
            features: FeatureParams::default(),
            marg: MargConfig::default(),
            weights: FeatureWeights::default(),
            fusion: FusionParams::default(),
            aggregation: Aggregation::default(),
            wlg_policy: WlgPolicy::default(),
            top_nodes: 3,
            workers: 4,
            tune: TuneGrid::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.epsilon.validate()?;
        self.resample.validate()?;
        self.features.validate()?;
        self.marg.validate()?;
        self.weights.validate()?;
        self.fusion.validate()?;
        if self.workers < 1 {
            return Err(Error::param("workers must be at least 1"));
        }
        if self.rep_stride_s < 1 || self.train_days < 1 {
            return Err(Error::param("rep_stride_s and train_days must be positive"));
        }
        if let Aggregation::MeanTopK { k } = self.aggregation {
            if k < 1 {
                return Err(Error::param("mean_top_k needs k ≥ 1"));
            }
        }
        Ok(())
    }

    pub fn from_json(bytes: &[u8], path: &Path) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_slice(bytes)
            .map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes, path)
    }

    /// JSON schema of the configuration file.
    pub fn schema() -> serde_json::Value {
        serde_json::to_value(schemars::schema_for!(PipelineConfig)).expect("schema serializes")
    }
}

/// The configuration file: simulator knobs and pipeline knobs, each
/// section optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub world: WorldConfig,
    pub pipeline: PipelineConfig,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let c: ConfigFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
        c.world.validate()?;
        c.pipeline.validate()?;
        Ok(c)
    }

    pub fn schema() -> serde_json::Value {
        serde_json::to_value(schemars::schema_for!(ConfigFile)).expect("schema serializes")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Also write every graph as JSON next to its binary form.
    pub dump_json: bool,
    /// Ignore stamps and rerun every stage.
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOutcome {
    Ran,
    Skipped,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct Stamp {
    input: String,
    output: String,
}

fn hex_digest(h: Sha256) -> String {
    hex::encode(h.finalize())
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("config serializes")
}

fn stage_err(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage { stage, source: Box::new(e) },
    }
}

/// Digest of every visible file in `dir`, by name and content.
fn digest_dir(dir: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let hidden = p.file_name().and_then(|n| n.to_str()).is_none_or(|n| n.starts_with('.'));
        if p.is_file() && !hidden {
            names.push(p);
        }
    }
    names.sort();
    let digests: Vec<(String, String)> = names
        .par_iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            let name = p.file_name().expect("file").to_string_lossy().into_owned();
            Ok((name, hex::encode(Sha256::digest(&bytes))))
        })
        .collect::<Result<_>>()?;
    let mut h = Sha256::new();
    for (n, d) in digests {
        h.update(n.as_bytes());
        h.update([0]);
        h.update(d.as_bytes());
    }
    Ok(hex_digest(h))
}

fn read_stamp(dir: &Path) -> Option<Stamp> {
    let bytes = fs::read(dir.join(STAMP)).ok()?;
    serde_json::from_slice(&bytes).ok()
}

/// Output digest of a completed stage, or an error naming the stage.
fn completed(dir: &Path, stage: &'static str) -> Result<String> {
    match read_stamp(dir) {
        Some(s) if !dir.join(INCOMPLETE).exists() => Ok(s.output),
        _ => Err(Error::Stage {
            stage,
            source: Box::new(Error::Format { path: dir.to_path_buf(), message: "stage has not completed".into() }),
        }),
    }
}

fn run_stage(
    dir: &Path,
    stage: &'static str,
    input: String,
    force: bool,
    body: impl FnOnce(&Path) -> Result<()>,
) -> Result<StageOutcome> {
    if !force && !dir.join(INCOMPLETE).exists() {
        if let Some(s) = read_stamp(dir) {
            if s.input == input && digest_dir(dir).ok().as_deref() == Some(s.output.as_str()) {
                log::info!("{stage}: up to date");
                return Ok(StageOutcome::Skipped);
            }
        }
    }
    let err = stage_err(stage);
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| err(Error::io(dir, e)))?;
    }
    fs::create_dir_all(dir).map_err(|e| err(Error::io(dir, e)))?;
    fs::write(dir.join(INCOMPLETE), b"").map_err(|e| err(Error::io(dir, e)))?;
    let t = Instant::now();
    body(dir).map_err(&err)?;
    let output = digest_dir(dir).map_err(&err)?;
    let stamp = serde_json::to_vec_pretty(&Stamp { input, output }).expect("stamp serializes");
    fs::write(dir.join(STAMP), stamp).map_err(|e| err(Error::io(dir, e)))?;
    fs::remove_file(dir.join(INCOMPLETE)).map_err(|e| err(Error::io(dir, e)))?;
    log::info!("{stage}: done in {:.2}s", t.elapsed().as_secs_f64());
    Ok(StageOutcome::Ran)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Training graphs are `terg/<agent>.rg`, test-window graphs
/// `terg/<agent>.test.rg`, the population graph `marg/model.rg`.
pub const GRAPH_EXT: &str = ".rg";
pub const TEST_GRAPH_EXT: &str = ".test.rg";
pub const MARG_FILE: &str = "model.rg";

fn write_graph(dir: &Path, stem: &str, g: &ReebGraph, dump_json: bool) -> Result<()> {
    write_file(&dir.join(format!("{stem}{GRAPH_EXT}")), &reeb::serialize(g)?)?;
    if dump_json {
        let path = dir.join(format!("{stem}.json"));
        let mut w = create(&path)?;
        reeb::write_json(g, &mut w)?;
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn read_graph(path: &Path) -> Result<ReebGraph> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    reeb::deserialize(&bytes).map_err(|e| match e {
        Error::CorruptPayload(m) => {
            Error::Format { path: path.to_path_buf(), message: format!("corrupt payload: {m}") }
        }
        other => other,
    })
}

fn check_agent_id(id: &str, path: &Path) -> Result<()> {
    let ok = !id.is_empty() && id != "." && id != ".." && !id.contains(['/', '\\']);
    if ok {
        Ok(())
    } else {
        Err(Error::Format { path: path.to_path_buf(), message: format!("agent id {id:?} is not a valid file name") })
    }
}

/// Train and test graphs for one agent; the test graph is absent when the
/// agent has no days after the training period.
pub struct AgentGraphs {
    pub agent_id: String,
    pub train: ReebGraph,
    pub test: Option<ReebGraph>,
}

/// Builds annotated train and test graphs from one agent file.
pub fn agent_graphs(path: &Path, cfg: &PipelineConfig, first_test_day: i64) -> Result<Option<AgentGraphs>> {
    let traj = read_agent_file(path)?;
    check_agent_id(&traj.agent_id, path)?;
    let days = segment_daily(&traj, cfg.tz_offset_s)?;
    let (train, test): (Vec<_>, Vec<_>) = days.into_iter().partition(|d| d.day_index < first_test_day);
    let build = |subs: &[crate::geo::SubTrajectory]| -> Result<Option<ReebGraph>> {
        if subs.is_empty() {
            return Ok(None);
        }
        let rs = subs.iter().map(|s| resample(s, &cfg.resample)).collect::<Result<Vec<_>>>()?;
        let g = build_terg_with(&rs, &cfg.epsilon, cfg.rep_stride_s)?;
        Ok(Some(annotate_features(&g, subs, &cfg.features)?))
    };
    let Some(train_g) = build(&train)? else {
        log::warn!("{}: no training days, agent skipped", traj.agent_id);
        return Ok(None);
    };
    Ok(Some(AgentGraphs { agent_id: traj.agent_id, train: train_g, test: build(&test)? }))
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub stages: Vec<(&'static str, StageOutcome)>,
    pub metrics: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub alpha: f64,
    pub beta: f64,
    pub weights: FeatureWeights,
    pub auc_pr: f64,
    pub default_auc_pr: f64,
    pub candidates: usize,
}

pub struct Pipeline {
    root: PathBuf,
    cfg: PipelineConfig,
    opts: RunOptions,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    pub fn new(root: impl Into<PathBuf>, cfg: PipelineConfig, opts: RunOptions) -> Result<Self> {
        cfg.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::param(format!("worker pool: {e}")))?;
        Ok(Pipeline { root: root.into(), cfg, opts, pool })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Agent graphs for every agent file, written to `terg/`.
    pub fn build_terg(&self) -> Result<StageOutcome> {
        const STAGE: &str = "build-terg";
        self.pool.install(|| {
            let err = stage_err(STAGE);
            let files = list_agent_files(&self.root).map_err(&err)?;
            if files.is_empty() {
                return Err(err(Error::Format { path: self.dir("agents"), message: "no agent files".into() }));
            }
            let mut h = Sha256::new();
            h.update(STAGE.as_bytes());
            let c = &self.cfg;
            h.update(json_bytes(&(c.epsilon, c.resample, c.rep_stride_s, c.tz_offset_s, c.train_days, c.features)));
            h.update([self.opts.dump_json as u8]);
            let file_digests: Vec<String> = files
                .par_iter()
                .map(|p| fs::read(p).map(|b| hex::encode(Sha256::digest(&b))).map_err(|e| Error::io(p, e)))
                .collect::<Result<_>>()
                .map_err(&err)?;
            for (p, d) in files.iter().zip(&file_digests) {
                h.update(p.file_name().expect("file").to_string_lossy().as_bytes());
                h.update(d.as_bytes());
            }
            run_stage(&self.dir(TERG_DIR), STAGE, hex_digest(h), self.opts.force, |dir| {
                let first_day = files
                    .par_iter()
                    .map(|p| first_timestamp(p).map(|t| day_index_of(t, c.tz_offset_s)))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .min()
                    .expect("files nonempty");
                let first_test_day = first_day + c.train_days as i64;
                let ids = files
                    .par_iter()
                    .map(|p| {
                        let Some(a) = agent_graphs(p, c, first_test_day)? else {
                            return Ok(None);
                        };
                        write_graph(dir, &a.agent_id, &a.train, self.opts.dump_json)?;
                        if let Some(t) = &a.test {
                            write_graph(dir, &format!("{}.test", a.agent_id), t, self.opts.dump_json)?;
                        }
                        Ok(Some(a.agent_id))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut seen = BTreeSet::new();
                for id in ids.into_iter().flatten() {
                    if !seen.insert(id.clone()) {
                        return Err(Error::Format {
                            path: self.dir("agents"),
                            message: format!("agent {id} appears in two files"),
                        });
                    }
                }
                Ok(())
            })
        })
    }

    /// `(agent id, path)` of the training or test-window graphs, by id.
    fn graph_files(&self, test: bool) -> Result<Vec<(String, PathBuf)>> {
        let dir = self.dir(TERG_DIR);
        let mut out = Vec::new();
        for e in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = e.map_err(|e| Error::io(&dir, e))?.path();
            let Some(name) = p.file_name().and_then(|n| n.to_str()) else { continue };
            let id = match (name.strip_suffix(TEST_GRAPH_EXT), test) {
                (Some(id), true) => id,
                (None, false) => match name.strip_suffix(GRAPH_EXT) {
                    Some(id) => id,
                    None => continue,
                },
                _ => continue,
            };
            out.push((id.to_string(), p.clone()));
        }
        out.sort();
        Ok(out)
    }

    /// Population graph over all training graphs, written to `marg/`.
    pub fn build_marg(&self) -> Result<StageOutcome> {
        const STAGE: &str = "build-marg";
        self.build_terg()?;
        self.pool.install(|| {
            let err = stage_err(STAGE);
            let terg = completed(&self.dir(TERG_DIR), "build-terg")?;
            let mut h = Sha256::new();
            h.update(STAGE.as_bytes());
            h.update(json_bytes(&self.cfg.marg));
            h.update([self.opts.dump_json as u8]);
            h.update(terg.as_bytes());
            run_stage(&self.dir(MARG_DIR), STAGE, hex_digest(h), self.opts.force, |dir| {
                let files = self.graph_files(false)?;
                let graphs = files.par_iter().map(|(_, p)| read_graph(p)).collect::<Result<Vec<_>>>()?;
                let marg = build_marg(&graphs, &self.cfg.marg)?;
                write_graph(dir, MARG_FILE.trim_end_matches(GRAPH_EXT), &marg, self.opts.dump_json)?;
                let path = dir.join("stats.csv");
                write_stats_csv(&marg_stats(&marg), create(&path)?)
            })
            .map_err(err)
        })
    }

    fn wlg(&self) -> Result<WlgAssignment> {
        let path = self.root.join(simgen::WLG_DIR).join("groups.csv");
        if path.exists() {
            simgen::read_wlg(&self.root)
        } else {
            Err(Error::Format { path, message: "missing weak-label group file".into() })
        }
    }

    fn wlg_or_single(&self, agents: &[String]) -> Result<(WlgAssignment, Vec<u8>)> {
        let path = self.root.join(simgen::WLG_DIR).join("groups.csv");
        if path.exists() {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Ok((self.wlg()?, bytes))
        } else {
            log::warn!("no weak-label groups at {}; treating all agents as one group", path.display());
            Ok((WlgAssignment(agents.iter().map(|a| (a.clone(), "all".to_string())).collect()), Vec::new()))
        }
    }

    /// Matches of every test node against both references, by agent id.
    pub fn collect_matches(&self) -> Result<Vec<(String, Vec<NodeMatches>)>> {
        self.pool.install(|| {
            let marg = read_graph(&self.dir(MARG_DIR).join(MARG_FILE))?;
            let tests = self.graph_files(true)?;
            tests
                .par_iter()
                .map(|(id, p)| {
                    let test = read_graph(p)?;
                    let train = read_graph(&p.with_file_name(format!("{id}{GRAPH_EXT}")))?;
                    Ok((id.clone(), match_test_graph(&test, &train, &marg)?))
                })
                .collect()
        })
    }

    /// Agent scores and flags, written to `detections/`.
    pub fn score(&self) -> Result<StageOutcome> {
        const STAGE: &str = "score";
        self.build_marg()?;
        let err = stage_err(STAGE);
        let terg = completed(&self.dir(TERG_DIR), "build-terg")?;
        let marg = completed(&self.dir(MARG_DIR), "build-marg")?;
        let agents: Vec<String> = self.graph_files(true).map_err(&err)?.into_iter().map(|(id, _)| id).collect();
        let (wlg, wlg_bytes) = self.wlg_or_single(&agents).map_err(&err)?;
        let c = &self.cfg;
        let mut h = Sha256::new();
        h.update(STAGE.as_bytes());
        h.update(json_bytes(&(c.weights, c.fusion, c.aggregation, c.wlg_policy, c.top_nodes)));
        h.update(terg.as_bytes());
        h.update(marg.as_bytes());
        h.update(Sha256::digest(&wlg_bytes));
        run_stage(&self.dir(DETECTIONS_DIR), STAGE, hex_digest(h), self.opts.force, |dir| {
            let matches = self.collect_matches()?;
            let per_agent: Vec<(String, Vec<_>)> = matches
                .iter()
                .map(|(id, ms)| (id.clone(), ms.iter().map(|m| m.score(&c.fusion, &c.weights)).collect()))
                .collect();
            let mut scores = Vec::new();
            for (id, ns) in &per_agent {
                if ns.is_empty() {
                    log::warn!("{id}: test graph has no nodes, agent not scored");
                    continue;
                }
                let values: Vec<f64> = ns.iter().map(|s| s.s_combined).collect();
                scores.push(AgentScore {
                    agent_id: id.clone(),
                    score: aggregate_values(&values, c.aggregation)?,
                    top_nodes: top_nodes(ns, c.top_nodes),
                });
            }
            let dets = apply_wlg_filter(&scores, &wlg, c.wlg_policy)?;
            write_detections_csv(&dets, create(&dir.join("detections.csv"))?)?;
            let path = dir.join("nodes.jsonl");
            let mut w = create(&path)?;
            write_node_scores_jsonl(&per_agent, &mut w)?;
            w.flush().map_err(|e| Error::io(&path, e))
        })
        .map_err(err)
    }

    fn anomalous(&self) -> Result<BTreeSet<String>> {
        simgen::read_anomalous(&self.root)
    }

    /// Metrics against the ground truth, written to `metrics/`.
    pub fn evaluate(&self) -> Result<StageOutcome> {
        const STAGE: &str = "evaluate";
        self.score()?;
        let err = stage_err(STAGE);
        let det = completed(&self.dir(DETECTIONS_DIR), "score")?;
        let truth_path = self.root.join(simgen::TRUTH_DIR).join("anomalous_agents.csv");
        let truth = fs::read(&truth_path).map_err(|e| err(Error::io(&truth_path, e)))?;
        let wlg_path = self.root.join(simgen::WLG_DIR).join("groups.csv");
        let wlg_bytes = fs::read(&wlg_path).unwrap_or_default();
        let mut h = Sha256::new();
        h.update(STAGE.as_bytes());
        h.update(det.as_bytes());
        h.update(Sha256::digest(&truth));
        h.update(Sha256::digest(&wlg_bytes));
        run_stage(&self.dir(METRICS_DIR), STAGE, hex_digest(h), self.opts.force, |dir| {
            let path = self.dir(DETECTIONS_DIR).join("detections.csv");
            let rows = read_detections_csv(fs::File::open(&path).map_err(|e| Error::io(&path, e))?)?;
            let anomalous = self.anomalous()?;
            let (m, curve) = evalx::evaluate(&LabeledScores::from_detections(&rows, &anomalous))?;
            let json = serde_json::to_vec_pretty(&m).expect("metrics serialize");
            write_file(&dir.join("metrics.json"), &json)?;
            evalx::write_pr_curve_csv(&curve, create(&dir.join("pr_curve.csv"))?)?;
            if wlg_path.exists() {
                let report = evalx::wlg_flag_report(&rows, &self.wlg()?, &anomalous);
                evalx::write_wlg_report_csv(&report, create(&dir.join("wlg_report.csv"))?)?;
                let json = serde_json::to_vec_pretty(&report).expect("report serializes");
                write_file(&dir.join("wlg_report.json"), &json)?;
            }
            Ok(())
        })
        .map_err(err)
    }

    /// Every stage in order; metrics only when ground truth is present.
    pub fn run(&self) -> Result<RunReport> {
        let mut stages =
            vec![("build-terg", self.build_terg()?), ("build-marg", self.build_marg()?), ("score", self.score()?)];
        let mut metrics = None;
        if self.root.join(simgen::TRUTH_DIR).join("anomalous_agents.csv").exists() {
            stages.push(("evaluate", self.evaluate()?));
            metrics = Some(self.metrics()?);
        } else {
            log::warn!("no ground truth under {}; skipping evaluate", self.root.display());
        }
        Ok(RunReport { stages, metrics })
    }

    pub fn metrics(&self) -> Result<Metrics> {
        let path = self.dir(METRICS_DIR).join("metrics.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format { path, message: e.to_string() })
    }

    /// Exhaustive AUC-PR search over the configured grid; writes
    /// `tuned.json` at the root. Stop and velocity scales stay fixed.
    pub fn tune(&self) -> Result<TuneResult> {
        self.build_marg()?;
        let err = stage_err("tune");
        let anomalous = self.anomalous().map_err(&err)?;
        let matches = self.collect_matches().map_err(&err)?;
        let weights = self.cfg.tune.weight_candidates().map_err(&err)?;
        let base = self.cfg.weights;
        let eval = |fp: &FusionParams, w: &FeatureWeights| -> Result<f64> {
            let ls = LabeledScores(
                matches
                    .iter()
                    .filter(|(_, ms)| !ms.is_empty())
                    .map(|(id, ms)| {
                        let v: Vec<f64> = ms.iter().map(|m| fp.fuse(m.agent.score(w), m.pop.score(w))).collect();
                        Ok(evalx::Labeled {
                            agent_id: id.clone(),
                            score: aggregate_values(&v, self.cfg.aggregation)?,
                            anomalous: anomalous.contains(id),
                        })
                    })
                    .collect::<Result<_>>()?,
            );
            evalx::auc_pr(&ls)
        };
        let default_auc = eval(&self.cfg.fusion, &base).map_err(&err)?;
        let scales = match self.cfg.tune.dist_scales_m.as_slice() {
            [] => vec![base.dist_scale_m],
            s => s.to_vec(),
        };
        let mut grid = Vec::new();
        for &alpha in &self.cfg.tune.alphas {
            let fp = FusionParams::new(alpha, 1.0 - alpha).map_err(&err)?;
            for &dist_scale_m in &scales {
                for w in &weights {
                    let fw =
                        FeatureWeights { w_dist: w[0], w_stop: w[1], w_vel: w[2], w_mode: w[3], dist_scale_m, ..base };
                    fw.validate().map_err(&err)?;
                    grid.push((fp, fw));
                }
            }
        }
        let aucs = self
            .pool
            .install(|| grid.par_iter().map(|(fp, fw)| eval(fp, fw)).collect::<Result<Vec<f64>>>())
            .map_err(&err)?;
        let mut best = 0;
        for (i, a) in aucs.iter().enumerate() {
            if *a > aucs[best] {
                best = i;
            }
        }
        let (fp, fw) = grid[best];
        let out = TuneResult {
            alpha: fp.alpha,
            beta: fp.beta,
            weights: fw,
            auc_pr: aucs[best],
            default_auc_pr: default_auc,
            candidates: grid.len(),
        };
        let json = serde_json::to_vec_pretty(&out).expect("tune result serializes");
        write_file(&self.root.join("tuned.json"), &json).map_err(err)?;
        Ok(out)
    }
}

/// Simulates a dataset and writes it under `root`.
pub fn simulate_to(cfg: &WorldConfig, root: &Path) -> Result<simgen::SimOutput> {
    let out = simgen::simulate(cfg)?;
    simgen::write_dataset(&out, cfg, root)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub points: usize,
    pub terg_s: f64,
    pub marg_update_s: f64,
    /// Ratios to the previous rung; absent on the first row.
    pub point_ratio: Option<f64>,
    pub terg_ratio: Option<f64>,
    pub marg_ratio: Option<f64>,
}

/// Median wall time of `f` after one untimed warm-up call. Repeats until
/// at least `min_reps` runs and `min_total_s` seconds have been measured.
fn time_median(min_reps: usize, min_total_s: f64, mut f: impl FnMut() -> f64) -> f64 {
    f();
    let mut v = Vec::new();
    let mut total = 0.0;
    while v.len() < min_reps || (total < min_total_s && v.len() < 200) {
        let t = f();
        total += t;
        v.push(t);
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Daily tracks of one simulated agent over `days` days with exactly `n`
/// samples. The day count is fixed and the sampling period shrinks as `n`
/// grows, so rungs differ only in time points per track.
fn bench_days(n: usize, days: usize, seed: u64) -> Result<Vec<(crate::geo::SubTrajectory, crate::geo::Resampled)>> {
    const DAY: i64 = 86_400;
    let span = days as i64 * DAY;
    // coarsest whole-day divisor that still yields n samples
    let period = (1..=DAY)
        .rev()
        .find(|p| DAY % p == 0 && span / p >= n as i64)
        .ok_or_else(|| Error::param(format!("{n} samples do not fit in {days} days at 1 Hz")))?;
    let cfg = WorldConfig {
        n_agents: 1,
        n_days_train: days,
        n_days_test: 1,
        sample_period_s: period,
        rng_seed: seed,
        anomalies: simgen::AnomalyConfig { n_anomalous: 0, active_days: 0, ..Default::default() },
        ..WorldConfig::default()
    };
    let pop = generate_population(&cfg)?;
    let pts = pop.trajectories[0].points()[..n].to_vec();
    let traj = crate::geo::AgentTrajectory::new(pop.trajectories[0].agent_id.clone(), pts)?;
    let spec = ResampleSpec { stride_s: period, max_gap_s: 600.max(2 * period) };
    segment_daily(&traj, 0)?
        .into_iter()
        .map(|s| {
            let r = resample(&s, &spec)?;
            Ok((s, r))
        })
        .collect()
}

/// A population graph over a grid of `n` one-second slots holding one
/// moving track and one distant track, plus a new track running parallel to
/// the first within epsilon for its whole length.
fn bench_marg(n: usize, eps: EpsilonConfig) -> Result<(MargBuilder, PseudoTrack)> {
    let grid = Grid { origin: 0, stride: 1, len: n };
    let start = crate::geo::GeoPoint::new(47.6, -122.4)?;
    let track = |id: &str, east0: f64, north: f64| PseudoTrack {
        info: TrackInfo { agent_id: id.into(), day_index: 0, day_start: 0, source: None },
        span: SpanTrack {
            start: 0,
            slots: (0..n).map(|k| Some(start.offset_m(east0 + (k % 20_000) as f64 * 1.0, north))).collect(),
        },
    };
    let b = MargBuilder::from_batch(grid, eps, 60, 1, vec![track("a", 0.0, 0.0), track("b", 0.0, 5_000.0)])?;
    Ok((b, track("c", 0.0, eps.epsilon * 0.2)))
}

/// Wall time of agent-graph construction and of one population-graph update
/// at each point count. Every rung uses the same agent and day count (enough
/// days for the largest rung at 1 Hz), so only the track length varies.
pub fn bench(ladder: &[usize], seed: u64) -> Result<Vec<BenchRow>> {
    let eps = EpsilonConfig::default();
    let n_days = ladder.iter().max().map_or(1, |m| m.div_ceil(86_400)).max(1);
    let mut rows: Vec<BenchRow> = Vec::new();
    for &n in ladder {
        if n == 0 {
            return Err(Error::param("bench point counts must be positive"));
        }
        let days = bench_days(n, n_days, seed)?;
        let rs: Vec<_> = days.iter().map(|d| d.1.clone()).collect();
        let terg_s = time_median(5, 1.0, || {
            let t = Instant::now();
            let g = build_terg_with(&rs, &eps, DEFAULT_REP_STRIDE_S).expect("bench graph builds");
            std::hint::black_box(&g);
            t.elapsed().as_secs_f64()
        });
        let (b, track) = bench_marg(n, eps)?;
        let marg_update_s = time_median(5, 1.0, || {
            let mut b = b.clone();
            let t = track.clone();
            let start = Instant::now();
            let r = b.update(t).expect("bench update succeeds");
            let el = start.elapsed().as_secs_f64();
            std::hint::black_box((&b, r));
            el
        });
        let prev = rows.last();
        rows.push(BenchRow {
            points: n,
            terg_s,
            marg_update_s,
            point_ratio: prev.map(|p| n as f64 / p.points as f64),
            terg_ratio: prev.map(|p| terg_s / p.terg_s),
            marg_ratio: prev.map(|p| marg_update_s / p.marg_update_s),
        });
        log::info!("bench {n} points: agent graph {terg_s:.4}s, population update {marg_update_s:.4}s");
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], w: W) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format { path: "bench".into(), message: e.to_string() };
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["points", "terg_s", "marg_update_s", "point_ratio", "terg_ratio", "marg_ratio"]).map_err(fmt)?;
    let opt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_default();
    for r in rows {
        wr.write_record([
            r.points.to_string(),
            format!("{:.6}", r.terg_s),
            format!("{:.6}", r.marg_update_s),
            opt(r.point_ratio),
            opt(r.terg_ratio),
            opt(r.marg_ratio),
        ])
        .map_err(fmt)?;
    }
    wr.flush().map_err(|e| Error::io("bench", e))
}
