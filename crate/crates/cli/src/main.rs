use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pfrp::altretrieval::RetrievalCriterion;
use pfrp::analysis::{periodicity_score, PeriodicityConfig, DEFAULT_BINS};
use pfrp::io::{load_json, write_atomic};
use pfrp::local::LocalKind;
use pfrp::pipeline::{
    forecast, plot_predictions_row, plot_weight_scatter, run_build_bank, run_eval, run_train, run_train_encoder,
    Composite, EvalReport, RunConfig, SyntheticData,
};
use pfrp::series::load_csv;
use pfrp::synthetic::motif_series;
use pfrp::{ErrorClass, PfrpError, Result};

#[derive(Parser)]
#[command(name = "pfrp", version, about = "Retrieval-augmented forecasting with a periodicity-aware memory bank")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the contrastive window encoder.
    TrainEncoder(RunArgs),
    /// Compact encoded train windows into the memory bank.
    BuildBank(RunArgs),
    /// Train the baseline and PFRP models for every horizon.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the saved model and optimizer state.
        #[arg(long)]
        resume: bool,
    },
    /// Score the trained models on the test split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Test windows to draw as SVG charts.
        #[arg(long, value_delimiter = ',')]
        plot_indices: Vec<usize>,
    },
    /// All four stages in order.
    Run {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        plot_indices: Vec<usize>,
    },
    /// Forecast from the tail of a CSV series, printing JSON.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        /// History to forecast from; the last `lookback` values are used.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        input_column: Option<String>,
        /// Which trained horizon to use. Defaults to the first configured one.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Periodicity score of a CSV series.
    Periodicity {
        csv: PathBuf,
        #[arg(long)]
        column: Option<String>,
        /// Autocorrelation lags in samples.
        #[arg(long, value_delimiter = ',')]
        lags: Vec<usize>,
        /// Picks day and week lags when --lags is absent (1h, 15min, 10min).
        #[arg(long, default_value = "1h")]
        freq: String,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
    },
    /// Render a predictions row, or periodicity vs fusion weight across reports.
    Plot {
        #[arg(long, conflicts_with = "reports", requires = "window")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the motif benchmark series as CSV.
    Synth {
        #[arg(long, default_value_t = 20_000)]
        len: usize,
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Overrides applied on top of the config file.
#[derive(Args, Clone, Debug)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    column: Option<String>,
    /// Use the built-in motif series instead of a CSV.
    #[arg(long, conflicts_with = "data")]
    synthetic: bool,
    #[arg(long, env = "PFRP_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    horizons: Vec<usize>,
    #[arg(short, long)]
    k: Option<usize>,
    #[arg(long)]
    bank_size: Option<usize>,
    #[arg(long)]
    bank_horizon: Option<usize>,
    #[arg(long)]
    store_raw_x: bool,
    /// feature, mse, dtw or pcc.
    #[arg(long)]
    retrieval: Option<String>,
    /// linear or dlinear.
    #[arg(long)]
    local: Option<String>,
    #[arg(long)]
    no_confidence_gate: bool,
    #[arg(long)]
    no_output_gate: bool,
    #[arg(long)]
    no_local_model: bool,
    #[arg(long)]
    pretrained_local: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    encoder_epochs: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.data {
            cfg.data.path = Some(p.clone());
            cfg.data.synthetic = None;
        }
        if self.synthetic {
            cfg.data.path = None;
            cfg.data.synthetic.get_or_insert_with(SyntheticData::default);
        }
        if let Some(c) = &self.column {
            cfg.data.column = Some(c.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(l) = self.lookback {
            cfg.lookback = l;
        }
        if !self.horizons.is_empty() {
            cfg.horizons = self.horizons.clone();
        }
        if self.k.is_some() {
            cfg.k = self.k;
        }
        if self.bank_size.is_some() {
            cfg.bank.size = self.bank_size;
        }
        if let Some(h) = self.bank_horizon {
            cfg.bank.horizon = h;
        }
        cfg.bank.store_raw_x |= self.store_raw_x;
        if let Some(r) = &self.retrieval {
            cfg.retrieval = RetrievalCriterion::parse(r)?;
        }
        if let Some(l) = &self.local {
            cfg.local_kind = match l.as_str() {
                "linear" => LocalKind::Linear,
                "dlinear" => LocalKind::Dlinear,
                other => return Err(PfrpError::invalid(format!("unknown local model {other:?} (linear, dlinear)"))),
            };
        }
        cfg.ablation.no_confidence_gate |= self.no_confidence_gate;
        cfg.ablation.no_output_gate |= self.no_output_gate;
        cfg.ablation.no_local_model |= self.no_local_model;
        cfg.pretrained_local |= self.pretrained_local;
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(e) = self.encoder_epochs {
            cfg.encoder.epochs = e;
        }
        Ok(cfg)
    }
}

fn print_report(report: &EvalReport, path: &Path) {
    println!("{:>8} {:>12} {:>12} {:>8} {:>8}", "horizon", "base_mse", "pfrp_mse", "impr%", "mean_w1");
    for h in &report.horizons {
        println!(
            "{:>8} {:>12.6} {:>12.6} {:>8.2} {:>8.3}",
            h.horizon, h.baseline.mse, h.pfrp.mse, h.improvement_mse_pct, h.fusion_weights.mean_w1
        );
    }
    println!(
        "{:>8} {:>12.6} {:>12.6} {:>8.2}",
        "avg", report.average.baseline.mse, report.average.pfrp.mse, report.average.improvement_mse_pct
    );
    println!("report: {}", path.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainEncoder(args) => {
            let cfg = args.resolve()?;
            run_train_encoder(&cfg)?;
            println!("encoder: {}", cfg.paths().encoder().display());
        }
        Command::BuildBank(args) => {
            let cfg = args.resolve()?;
            let bank = run_build_bank(&cfg)?;
            println!("bank: {} entries -> {}", bank.len(), cfg.paths().bank().display());
        }
        Command::Train { run, resume } => {
            let cfg = run.resolve()?;
            for s in run_train(&cfg, resume)? {
                println!(
                    "horizon {}: final loss {:.6} (baseline {:.6}), adam step {}",
                    s.horizon,
                    s.pfrp_loss.last().copied().unwrap_or(f64::NAN),
                    s.baseline_loss.last().copied().unwrap_or(f64::NAN),
                    s.adam_step
                );
            }
        }
        Command::Eval { run, plot_indices } => {
            let cfg = run.resolve()?;
            let report = run_eval(&cfg, &plot_indices)?;
            print_report(&report, &cfg.paths().report());
        }
        Command::Run { run, plot_indices } => {
            let cfg = run.resolve()?;
            run_train_encoder(&cfg)?;
            run_build_bank(&cfg)?;
            run_train(&cfg, false)?;
            let report = run_eval(&cfg, &plot_indices)?;
            print_report(&report, &cfg.paths().report());
        }
        Command::Predict {
            run,
            input,
            input_column,
            horizon,
        } => {
            let cfg = run.resolve()?;
            let h = horizon.unwrap_or(cfg.horizons[0]);
            let composite = Composite::load(&cfg.paths().manifest(h))?;
            let history = load_csv(&input, input_column.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&forecast(&composite, &history.values)?).expect("serializable"));
        }
        Command::Periodicity {
            csv,
            column,
            lags,
            freq,
            bins,
        } => {
            let ts = load_csv(&csv, column.as_deref())?;
            let lags = if lags.is_empty() {
                PeriodicityConfig::for_freq(&freq)
                    .ok_or_else(|| PfrpError::invalid(format!("no default lags for {freq:?}; pass --lags")))?
                    .lags
            } else {
                lags
            };
            let report = periodicity_score(&ts.values, &PeriodicityConfig { lags, bins })?;
            println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
        }
        Command::Plot {
            predictions,
            window,
            reports,
            out,
        } => {
            let svg = match (predictions, window) {
                (Some(csv), Some(w)) => plot_predictions_row(&csv, w)?,
                _ if !reports.is_empty() => {
                    let loaded = reports.iter().map(|p| load_json(p)).collect::<Result<Vec<EvalReport>>>()?;
                    plot_weight_scatter(&loaded)?
                }
                _ => return Err(PfrpError::invalid("pass --predictions with --window, or --reports")),
            };
            write_atomic(&out, svg.as_bytes())?;
            println!("plot: {}", out.display());
        }
        Command::Synth { len, noise, seed, out } => {
            let ts = motif_series(len, noise, seed)?;
            let mut text = String::from("value\n");
            for v in &ts.values {
                text.push_str(&v.to_string());
                text.push('\n');
            }
            write_atomic(&out, text.as_bytes())?;
            println!("{} values -> {}", ts.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}
