use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use trajreeb::marg::{marg_stats, write_stats_csv};
use trajreeb::pipeline::{self, ConfigFile, Pipeline, RunOptions, StageOutcome};
use trajreeb::reeb;

#[derive(Parser, Debug)]
#[command(name = "trajreeb", version, about = "Reeb-graph trajectory anomaly detection pipeline")]
struct Cli {
    /// JSON configuration file with optional `world` and `pipeline` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-agent stages.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Seed for the simulator and the benchmark.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Also write every graph as JSON.
    #[arg(long, global = true)]
    dump_json: bool,
    /// Rerun stages even when their stamps are current.
    #[arg(long, global = true)]
    force: bool,
    /// More log output; repeat for debug detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct RootArg {
    /// Dataset root holding `agents/` and the stage directories.
    #[arg(long, default_value = ".")]
    root: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic labeled dataset.
    Simulate {
        /// Output root.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        train_days: Option<usize>,
        #[arg(long)]
        test_days: Option<usize>,
        #[arg(long)]
        anomalous: Option<usize>,
        /// Seconds between samples.
        #[arg(long)]
        sample_period: Option<i64>,
    },
    /// Build per-agent train and test graphs into `terg/`.
    BuildTerg(RootArg),
    /// Build the population graph into `marg/`.
    BuildMarg(RootArg),
    /// Score agents and apply the group policy into `detections/`.
    Score(RootArg),
    /// Compute metrics against ground truth into `metrics/`.
    Evaluate(RootArg),
    /// Run every stage, skipping those already up to date.
    Run(RootArg),
    /// Grid-search fusion and feature weights by AUC-PR; writes `tuned.json`.
    Tune(RootArg),
    /// Time graph construction and population updates over a point-count ladder.
    Bench {
        /// Comma-separated point counts.
        #[arg(long, value_delimiter = ',', default_value = "10000,100000,1000000")]
        ladder: Vec<usize>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Population graph utilities.
    Marg {
        #[command(subcommand)]
        cmd: MargCmd,
    },
    /// Print the configuration file JSON schema.
    Schema,
}

#[derive(Subcommand, Debug)]
enum MargCmd {
    /// Node, edge and degree statistics of the population graph.
    Stats {
        #[command(flatten)]
        root: RootArg,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ConfigFile> {
    let mut c = match &cli.config {
        Some(p) => ConfigFile::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => ConfigFile::default(),
    };
    if let Some(w) = cli.workers {
        c.pipeline.workers = w;
    }
    if let Some(s) = cli.seed {
        c.world.rng_seed = s;
    }
    Ok(c)
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            Box::new(io::BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?))
        }
        None => Box::new(io::stdout().lock()),
    })
}

/// Writes one line to stdout; a closed pipe surfaces as an error rather
/// than a panic.
fn say(line: impl std::fmt::Display) -> Result<()> {
    writeln!(io::stdout().lock(), "{line}")?;
    Ok(())
}

fn report(stage: &str, o: StageOutcome) -> Result<()> {
    let word = match o {
        StageOutcome::Ran => "ran",
        StageOutcome::Skipped => "skipped (up to date)",
    };
    say(format_args!("{stage}: {word}"))
}

fn pipeline(cli: &Cli, cfg: &ConfigFile, root: &Path) -> Result<Pipeline> {
    let opts = RunOptions { dump_json: cli.dump_json, force: cli.force };
    Ok(Pipeline::new(root, cfg.pipeline.clone(), opts)?)
}

fn exec(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::Simulate { out, agents, train_days, test_days, anomalous, sample_period } => {
            let mut w = cfg.world.clone();
            w.n_agents = agents.unwrap_or(w.n_agents);
            w.n_days_train = train_days.unwrap_or(w.n_days_train);
            w.n_days_test = test_days.unwrap_or(w.n_days_test);
            w.anomalies.n_anomalous = anomalous.unwrap_or(w.anomalies.n_anomalous);
            w.sample_period_s = sample_period.unwrap_or(w.sample_period_s);
            let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.pipeline.workers).build()?;
            let sim = pool.install(|| pipeline::simulate_to(&w, out))?;
            say(format_args!(
                "simulated {} agents ({} anomalous) into {}",
                sim.population.trajectories.len(),
                sim.truth.anomalous.len(),
                out.display()
            ))?;
        }
        Cmd::BuildTerg(r) => report("build-terg", pipeline(cli, &cfg, &r.root)?.build_terg()?)?,
        Cmd::BuildMarg(r) => report("build-marg", pipeline(cli, &cfg, &r.root)?.build_marg()?)?,
        Cmd::Score(r) => report("score", pipeline(cli, &cfg, &r.root)?.score()?)?,
        Cmd::Evaluate(r) => {
            let p = pipeline(cli, &cfg, &r.root)?;
            report("evaluate", p.evaluate()?)?;
            say(serde_json::to_string_pretty(&p.metrics()?)?)?;
        }
        Cmd::Run(r) => {
            let rep = pipeline(cli, &cfg, &r.root)?.run()?;
            for (s, o) in &rep.stages {
                report(s, *o)?;
            }
            if let Some(m) = rep.metrics {
                say(serde_json::to_string_pretty(&m)?)?;
            }
        }
        Cmd::Tune(r) => {
            let t = pipeline(cli, &cfg, &r.root)?.tune()?;
            say(serde_json::to_string_pretty(&t)?)?;
        }
        Cmd::Bench { ladder, out } => {
            let rows = pipeline::bench(ladder, cli.seed.unwrap_or(cfg.world.rng_seed))?;
            pipeline::write_bench_csv(&rows, output(out)?)?;
        }
        Cmd::Marg { cmd: MargCmd::Stats { root, out } } => {
            let path = root.root.join(pipeline::MARG_DIR).join(pipeline::MARG_FILE);
            let bytes = fs::read(&path).with_context(|| format!("reading {}; run build-marg first", path.display()))?;
            let g = reeb::deserialize(&bytes).with_context(|| format!("decoding {}", path.display()))?;
            let stats = marg_stats(&g);
            let mut w = output(out)?;
            if cli.dump_json {
                serde_json::to_writer_pretty(&mut w, &stats)?;
                writeln!(w)?;
            } else {
                write_stats_csv(&stats, &mut w)?;
            }
            w.flush()?;
        }
        Cmd::Schema => say(serde_json::to_string_pretty(&ConfigFile::schema())?)?,
    }
    Ok(())
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| c.downcast_ref::<io::Error>().is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match exec(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
