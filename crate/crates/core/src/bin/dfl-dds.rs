use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};

use dfl_dds_core::aggregation::VehicleRuntime;
use dfl_dds_core::mobility::{self, FleetState};
use dfl_dds_core::road_network::{self, RoadGraph};
use dfl_dds_core::sim::{self, Observer, NOT_AVAILABLE};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "dfl-dds", version, about = "Decentralized federated learning simulator for vehicular networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a road network and write it as JSON.
    #[command(group(ArgGroup::new("shape").required(true).args(["grid", "spider", "random"])))]
    GenNetwork {
        /// Grid size as ROWSxCOLS.
        #[arg(long, value_name = "ROWSxCOLS")]
        grid: Option<String>,
        /// Spider net as ARMS,CIRCLES.
        #[arg(long, value_name = "ARMS,CIRCLES")]
        spider: Option<String>,
        /// Random net with this many nodes.
        #[arg(long, value_name = "NODES")]
        random: Option<usize>,
        /// Grid spacing or spider radius increment in meters.
        #[arg(long, default_value_t = 100.0)]
        spacing: f64,
        #[arg(long, default_value_t = 100.0)]
        min_length: f64,
        #[arg(long, default_value_t = 200.0)]
        max_length: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run an experiment and write per-epoch metrics as CSV.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Add per-vehicle accuracy, entropy and KL columns.
        #[arg(long)]
        wide: bool,
        /// Worker threads (overrides the config).
        #[arg(long)]
        threads: Option<usize>,
        /// Also write vehicle positions per epoch to this CSV.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Epochs needed to reach target accuracies, plus summary statistics.
    Analyze {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.90, 0.92, 0.95])]
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

fn runtime<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{context}: {e}"))
}

fn parse_pair(s: &str, sep: char, what: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::Usage(format!("{what} must look like A{sep}B with positive integers, got {s:?}"));
    let (a, b) = s.split_once(sep).ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

struct TrajectoryWriter {
    out: csv::Writer<File>,
    error: Option<csv::Error>,
}

impl Observer for TrajectoryWriter {
    fn epoch(&mut self, epoch: usize, fleet: &FleetState, graph: &RoadGraph, _: &[VehicleRuntime]) {
        if self.error.is_none() {
            if let Err(e) = mobility::write_trajectory_rows(&mut self.out, epoch, fleet, graph) {
                self.error = Some(e);
            }
        }
    }
}

fn gen_network(
    grid: Option<String>,
    spider: Option<String>,
    random: Option<usize>,
    spacing: f64,
    (min_length, max_length): (f64, f64),
    seed: u64,
    output: Option<PathBuf>,
) -> Result<(), Failure> {
    let graph = if let Some(g) = grid {
        let (rows, cols) = parse_pair(&g.to_lowercase(), 'x', "--grid")?;
        road_network::gen_grid(rows, cols, spacing)
    } else if let Some(s) = spider {
        let (arms, circles) = parse_pair(&s, ',', "--spider")?;
        road_network::gen_spider(arms, circles, spacing)
    } else {
        road_network::gen_random(random.expect("clap enforces one shape"), min_length, max_length, seed)
    }
    .map_err(runtime("generating network"))?;
    let json = graph.to_json();
    match output {
        Some(path) => std::fs::write(&path, json).map_err(runtime(&format!("writing {}", path.display())))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn run(config: PathBuf, output: PathBuf, wide: bool, threads: Option<usize>, trajectory: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = sim::load_config(&config).map_err(runtime(&config.display().to_string()))?;
    cfg.apply_env_overrides().map_err(runtime("environment"))?;
    if threads.is_some() {
        cfg.threads = threads;
    }
    cfg.validate().map_err(runtime("config"))?;
    let result = match trajectory {
        Some(path) => {
            let file = File::create(&path).map_err(runtime(&format!("creating {}", path.display())))?;
            let mut out = csv::Writer::from_writer(file);
            out.write_record(mobility::TRAJECTORY_HEADER).map_err(runtime("writing trajectory"))?;
            let mut obs = TrajectoryWriter { out, error: None };
            let r = sim::run_observed(&cfg, &mut obs);
            if let Some(e) = obs.error.take() {
                return Err(Failure::Runtime(format!("writing trajectory: {e}")));
            }
            obs.out.flush().map_err(runtime("writing trajectory"))?;
            r
        }
        None => sim::run(&cfg),
    };
    match result {
        Ok(log) => {
            if log.solver_warnings > 0 {
                log::warn!("weight solver hit its iteration cap {} times", log.solver_warnings);
            }
            sim::write_metrics_csv(&log, &output, wide).map_err(runtime(&format!("writing {}", output.display())))
        }
        Err(sim::RunError::Epoch { epoch, source, partial }) => {
            let _ = sim::write_metrics_csv(&partial, &output, wide);
            Err(Failure::Runtime(format!("epoch {epoch}: {source} (partial metrics written to {})", output.display())))
        }
        Err(e) => Err(Failure::Runtime(e.to_string())),
    }
}

fn analyze(files: Vec<PathBuf>, targets: Vec<f64>) -> Result<(), Failure> {
    if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Failure::Usage(format!("target {t} is not a fraction in [0, 1]")));
    }
    let mut tables = Vec::new();
    for path in &files {
        let f = File::open(path).map_err(runtime(&path.display().to_string()))?;
        let rows = sim::read_metrics(f).map_err(runtime(&path.display().to_string()))?;
        tables.push((path.display().to_string(), rows));
    }
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut emit = || -> io::Result<()> {
        writeln!(out, "file,target,epochs_to_target")?;
        for (name, rows) in &tables {
            for (t, hit) in sim::epochs_to_targets(rows, &targets) {
                let hit = hit.map_or_else(|| NOT_AVAILABLE.to_string(), |e| e.to_string());
                writeln!(out, "{name},{t},{hit}")?;
            }
        }
        writeln!(out)?;
        writeln!(out, "file,epochs,final_accuracy,best_accuracy,mean_consensus_distance")?;
        for (name, rows) in &tables {
            let last = rows.last();
            let best = rows.iter().map(|r| r.avg_accuracy).fold(f64::NAN, f64::max);
            let cd: Vec<f64> = rows.iter().map(|r| r.consensus_distance).collect();
            writeln!(
                out,
                "{name},{},{},{},{}",
                last.map_or(0, |r| r.epoch),
                last.map_or_else(|| NOT_AVAILABLE.into(), |r| sim::format_sig(r.avg_accuracy)),
                sim::format_sig(best),
                sim::format_sig(dfl_dds_core::metrics::mean(&cd)),
            )?;
        }
        Ok(())
    };
    emit().map_err(runtime("writing output"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenNetwork { grid, spider, random, spacing, min_length, max_length, seed, output } => {
            gen_network(grid, spider, random, spacing, (min_length, max_length), seed, output)
        }
        Command::Run { config, output, wide, threads, trajectory } => run(config, output, wide, threads, trajectory),
        Command::Analyze { files, targets } => analyze(files, targets),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
