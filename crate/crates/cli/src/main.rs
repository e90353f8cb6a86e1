use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ewwa_core::config::{config_hash, config_to_pretty_json, parse_config};
use ewwa_core::federation::{run_federation_with, Federation};
use ewwa_core::report::{self, RunManifest, CHECKPOINT_FILE};
use ewwa_core::{FederationConfig, FlError};

#[derive(Parser)]
#[command(
    name = "ewwa",
    version,
    about = "Federated learning simulator with element-wise aggregation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federation and write metrics under <out>/<config hash prefix>/.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from <run dir>/checkpoint.json if present.
        #[arg(long)]
        resume: bool,
    },
    /// Print per-client class histograms for a config's partition.
    PartitionPreview {
        #[arg(long)]
        config: PathBuf,
    },
    /// Tabulate final/best accuracy and rounds-to-threshold across runs.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        threshold: f64,
        /// Write comparison.csv here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Config problems exit with 1, everything else with 2.
enum Failure {
    Config(FlError),
    Runtime(FlError),
}

impl From<FlError> for Failure {
    fn from(e: FlError) -> Self {
        if e.is_config() {
            Failure::Config(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

fn load_config(path: &Path) -> Result<FederationConfig, Failure> {
    parse_config(path).map_err(Failure::Config)
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn run(config: PathBuf, out: PathBuf, resume: bool) -> Result<(), Failure> {
    let cfg = load_config(&config)?;
    let hash = config_hash(&cfg);
    let dir = report::run_dir(&out, &hash);
    std::fs::create_dir_all(&dir).map_err(|e| FlError::Io {
        path: dir.clone(),
        source: e,
    })?;
    std::fs::write(dir.join("config.json"), config_to_pretty_json(&cfg)).map_err(|e| FlError::Io {
        path: dir.join("config.json"),
        source: e,
    })?;
    let started = now();
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let every = cfg.checkpoint_every;

    let records = if resume && ckpt_path.exists() {
        let ckpt = ewwa_core::federation::Checkpoint::load(&ckpt_path)?;
        let mut fed = Federation::new(cfg.clone())?;
        fed.restore(ckpt)?;
        log::info!("resuming from round {}", fed.round());
        // earlier rounds come from the existing metrics file
        let mut records = report::read_metrics(&dir)
            .map(|mut r| {
                r.truncate(fed.round());
                r
            })
            .unwrap_or_default();
        while fed.round() < cfg.rounds {
            let rec = fed.step()?;
            log_round(&rec);
            if every.is_some_and(|k| rec.round % k == 0) {
                fed.checkpoint().save(&ckpt_path)?;
            }
            records.push(rec);
        }
        records
    } else {
        run_federation_with(cfg.clone(), |fed, rec| {
            log_round(rec);
            if every.is_some_and(|k| rec.round % k == 0) {
                fed.checkpoint().save(&ckpt_path)?;
            }
            Ok(())
        })?
    };

    let manifest = RunManifest::new(&cfg, started, now());
    report::emit_metrics(&records, &manifest, &dir)?;
    if let Some(last) = records.last() {
        println!(
            "{} {} rounds={} final_test_acc={:.4} -> {}",
            cfg.aggregator.strategy,
            cfg.aggregator.variant,
            last.round,
            last.global_test_accuracy,
            dir.display()
        );
    }
    Ok(())
}

fn log_round(rec: &ewwa_core::RoundRecord) {
    log::info!(
        "round {:>4}  test_acc {:.4}  test_loss {:.4}  train_loss {:.4}  ({} ms)",
        rec.round,
        rec.global_test_accuracy,
        rec.global_test_loss,
        rec.mean_local_train_loss,
        rec.wall_ms
    );
}

fn partition_preview(config: PathBuf) -> Result<(), Failure> {
    let cfg = load_config(&config)?;
    let fed = Federation::new(cfg)?;
    let hists = fed.partition().histograms(fed.train_set());
    let classes = fed.train_set().num_classes();
    let header: Vec<String> = (0..classes).map(|k| format!("c{k}")).collect();
    let mut text = format!("client,total,{}\n", header.join(","));
    for (id, h) in hists.iter().enumerate() {
        let counts: Vec<String> = h.iter().map(ToString::to_string).collect();
        text.push_str(&format!("{id},{},{}\n", h.iter().sum::<usize>(), counts.join(",")));
    }
    print_stdout(&text)
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn print_stdout(text: &str) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Runtime(FlError::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        })),
        _ => Ok(()),
    }
}

fn compare(runs: Vec<PathBuf>, threshold: f64, out: Option<PathBuf>) -> Result<(), Failure> {
    let rows = report::compare_runs(&runs, threshold)?;
    let csv = report::comparison_csv(&rows);
    match out {
        Some(path) => std::fs::write(&path, csv).map_err(|e| Failure::Runtime(FlError::Io { path, source: e })),
        None => print_stdout(&csv),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, resume } => run(config, out, resume),
        Command::PartitionPreview { config } => partition_preview(config),
        Command::Compare { runs, threshold, out } => compare(runs, threshold, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
