use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::Result;
use clap::{Parser, Subcommand};
use redf_cli::{
    cmd_benchmark, cmd_broker, cmd_grid_search, cmd_plot, cmd_predict, cmd_preprocess, cmd_serve, cmd_synth,
    cmd_train, one_line, BenchmarkArgs, GridArgs, PredictArgs, RunConfig, ServeArgs, SynthArgs,
};

#[derive(Parser)]
#[command(name = "redf", version, about = "Short-term energy demand forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean a raw CSV and cache it with a metadata sidecar.
    Preprocess(RunConfig),
    /// Train the LSTM and write the model artifact and loss history.
    Train(RunConfig),
    /// Cross-validated hyperparameter search.
    GridSearch {
        #[command(flatten)]
        run: RunConfig,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Compare models on the test split; writes report and figures.
    Benchmark {
        #[command(flatten)]
        run: RunConfig,
        #[command(flatten)]
        bench: BenchmarkArgs,
    },
    /// Render a predictions CSV as SVG.
    Plot {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        title: Option<String>,
    },
    /// Serve forecasts from model artifacts.
    Serve(ServeArgs),
    /// Run the message broker.
    Broker {
        #[arg(long, default_value = "127.0.0.1:7879")]
        listen: String,
    },
    /// One-shot forecast, in-process or through a server or broker.
    Predict(PredictArgs),
    /// Generate a synthetic hourly load CSV.
    Synth(SynthArgs),
}

fn stop_on_ctrl_c() -> Result<Arc<AtomicBool>> {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))?;
    Ok(stop)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(cfg) => {
            let out = cmd_preprocess(&cfg)?;
            let m = &out.metadata;
            println!(
                "{}: {} raw rows, {} points, {} gaps filled, {} outliers clipped",
                m.zone,
                m.raw_rows,
                m.points,
                m.gaps.total(),
                m.outliers.clipped
            );
            println!("wrote {}", out.series.display());
            println!("wrote {}", out.metadata_path.display());
        }
        Command::Train(cfg) => {
            let out = cmd_train(&cfg)?;
            println!(
                "best epoch {} val_mse={:e} ({:?})",
                out.history.best_epoch,
                out.history.best_val_mse(),
                out.history.stop_reason
            );
            println!("wrote {}", out.artifact.display());
            println!("wrote {}", out.history_path.display());
        }
        Command::GridSearch { run, grid } => {
            let result = cmd_grid_search(&run, &grid)?;
            let b = &result.best;
            println!(
                "best units={} timesteps={} lr={} dropout={} batch={} mae={}",
                b.units, b.timesteps, b.learning_rate, b.dropout, b.batch_size, result.best_score
            );
        }
        Command::Benchmark { run, bench } => {
            let out = cmd_benchmark(&run, &bench)?;
            println!("model,unit,mae,rmse,r2");
            for r in out.run.runs.iter().flat_map(|r| &r.rows) {
                println!(
                    "{},{},{:.6},{:.6},{:.6}",
                    r.model,
                    r.unit.as_str(),
                    r.metrics.mae,
                    r.metrics.rmse,
                    r.metrics.r2
                );
            }
            println!("wrote {}", out.report.display());
        }
        Command::Plot { predictions, out, title } => {
            let path = cmd_plot(&predictions, &out, title.as_deref())?;
            println!("wrote {}", path.display());
        }
        Command::Serve(args) => {
            let stop = stop_on_ctrl_c()?;
            cmd_serve(&args, stop, |addr| match addr {
                Some(a) => eprintln!("serving on {a}"),
                None => eprintln!("serving through broker"),
            })?;
        }
        Command::Broker { listen } => {
            let stop = stop_on_ctrl_c()?;
            cmd_broker(&listen, stop, |addr| eprintln!("broker on {addr}"))?;
        }
        Command::Predict(args) => {
            for v in cmd_predict(&args)? {
                println!("{v}");
            }
        }
        Command::Synth(args) => {
            let path = cmd_synth(&args)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
