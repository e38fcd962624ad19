use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use vinit::io::{dump_simulation, DatasetPaths};
use vinit::map::serialize_map;
use vinit::pipeline::{
    read_attempts, run_attempt, run_batch, simulate_scenarios, summarize, windows, write_outputs,
    Attempt, PipelineConfig, Sequence, Summary,
};

const LOG_ENV: &str = "VINIT_LOG";

/// Visual-inertial initialization from IMU samples and feature tracks.
#[derive(Parser)]
#[command(name = "vinit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every scenario of a config into dataset directories.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attempt initialization on one dataset, window by window, until one succeeds.
    Init {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Keep attempting after the first success.
        #[arg(long)]
        all: bool,
    },
    /// Run every window of the configured scenarios and of the given datasets.
    Batch {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; may be repeated.
        #[arg(long = "dataset")]
        datasets: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the aggregate table of an `attempts.jsonl` file or output directory.
    Report {
        path: PathBuf,
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Args)]
struct DatasetArgs {
    /// Directory holding imu0.csv, tracks.jsonl, camera.json and optionally groundtruth.csv.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    imu: Option<PathBuf>,
    #[arg(long)]
    tracks: Option<PathBuf>,
    #[arg(long)]
    camera: Option<PathBuf>,
    #[arg(long)]
    groundtruth: Option<PathBuf>,
}

enum Failure {
    Config(String),
    Data(String),
}

impl From<vinit::Error> for Failure {
    fn from(e: vinit::Error) -> Self {
        match e {
            vinit::Error::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(path: Option<&Path>) -> CliResult<PipelineConfig> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => PipelineConfig::load(p).map_err(|e| Failure::Config(e.to_string())),
    }
}

impl DatasetArgs {
    fn paths(&self) -> CliResult<DatasetPaths> {
        let base = self.dataset.as_deref().map(DatasetPaths::in_dir);
        let pick = |flag: &Option<PathBuf>, from: Option<PathBuf>, name: &str| {
            flag.clone()
                .or(from)
                .ok_or_else(|| Failure::Config(format!("missing --{name} (or --dataset)")))
        };
        Ok(DatasetPaths {
            imu: pick(&self.imu, base.as_ref().map(|b| b.imu.clone()), "imu")?,
            tracks: pick(
                &self.tracks,
                base.as_ref().map(|b| b.tracks.clone()),
                "tracks",
            )?,
            camera: pick(
                &self.camera,
                base.as_ref().map(|b| b.camera.clone()),
                "camera",
            )?,
            groundtruth: self
                .groundtruth
                .clone()
                .or_else(|| base.and_then(|b| b.groundtruth)),
        })
    }

    fn name(&self) -> String {
        let source = self.dataset.as_ref().or(self.tracks.as_ref());
        source.map_or_else(|| "dataset".into(), |p| dataset_name(p))
    }
}

fn dataset_name(dir: &Path) -> String {
    dir.file_stem()
        .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
}

fn print_summary(summary: &Summary, csv: bool) {
    let mut text = String::new();
    if csv {
        text.push_str("section,name,value\n");
        for r in &summary.rows {
            text.push_str(&format!("{},{},{}\n", r.section, r.name, r.value));
        }
    } else {
        let width = summary.rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
        let mut section = "";
        for r in &summary.rows {
            if r.section != section {
                section = &r.section;
                text.push_str(&format!("[{section}]\n"));
            }
            text.push_str(&format!("  {:width$}  {}\n", r.name, r.value));
        }
    }
    // a closed pipe (`vinit report | head`) is not an error
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn simulate(config: &Path, out: &Path) -> CliResult<()> {
    let config = load_config(Some(config))?;
    let scenarios = config.expand_scenarios();
    if scenarios.is_empty() {
        return Err(Failure::Config(
            "config declares no [[scenario]] sets".into(),
        ));
    }
    for (name, scenario) in scenarios {
        let dir = out.join(&name);
        dump_simulation(&dir, &scenario.simulate()?)?;
        println!("{}", dir.display());
    }
    Ok(())
}

fn init(data: &DatasetArgs, config: Option<&Path>, out: &Path, all: bool) -> CliResult<()> {
    let config = load_config(config)?;
    let seq = Sequence::load(data.name(), &data.paths()?)?;
    let mut attempts: Vec<Attempt> = Vec::new();
    for (i, w) in windows(&seq.frame_times, config.window, config.n)
        .iter()
        .enumerate()
    {
        let a = run_attempt(&seq, w, i, &config);
        info!("{}: {:?}", a.report.id, a.report.outcome);
        let done = a.report.succeeded() && !all;
        attempts.push(a);
        if done {
            break;
        }
    }
    write_outputs(out, &attempts)?;
    match attempts.iter().find(|a| a.report.succeeded()) {
        Some(a) => {
            let path = out.join("initial_map.json");
            serialize_map(a.map.as_ref().expect("successful attempt has a map"), &path)?;
            let w = a.report.window;
            println!(
                "initialized by {} on [{:.3}, {:.3}] s after {} attempt(s): {}",
                a.report.id,
                w.t_start,
                w.t_end,
                attempts.len(),
                path.display()
            );
        }
        None => println!("not initialized after {} attempt(s)", attempts.len()),
    }
    Ok(())
}

fn batch(config: Option<&Path>, datasets: &[PathBuf], out: &Path) -> CliResult<()> {
    let config = load_config(config)?;
    let mut sequences = simulate_scenarios(&config)?;
    for dir in datasets {
        sequences.push(Sequence::load(
            dataset_name(dir),
            &DatasetPaths::in_dir(dir),
        )?);
    }
    if sequences.is_empty() {
        return Err(Failure::Config(
            "nothing to run: declare [[scenario]] sets or pass --dataset".into(),
        ));
    }
    info!("{} sequence(s)", sequences.len());
    let attempts = run_batch(&sequences, &config);
    write_outputs(out, &attempts)?;
    let reports: Vec<_> = attempts.into_iter().map(|a| a.report).collect();
    print_summary(&summarize(&reports), false);
    Ok(())
}

fn report(path: &Path, csv: bool) -> CliResult<()> {
    let file = if path.is_dir() {
        path.join("attempts.jsonl")
    } else {
        path.to_path_buf()
    };
    print_summary(&summarize(&read_attempts(&file)?), csv);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(3);
        }
    };
    let result = match &cli.command {
        Command::Simulate { config, out } => simulate(config, out),
        Command::Init {
            data,
            config,
            out,
            all,
        } => init(data, config.as_deref(), out, *all),
        Command::Batch {
            config,
            datasets,
            out,
        } => batch(config.as_deref(), datasets, out),
        Command::Report { path, csv } => report(path, *csv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("vinit: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("vinit: {msg}");
            ExitCode::from(2)
        }
    }
}
