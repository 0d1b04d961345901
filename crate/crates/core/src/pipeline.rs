//! Run configuration and the train-encoder → build-bank → train → eval stages.
//!
//! Every stage reads its inputs from, and writes its outputs under, the
//! configured output directory:
//!
//! ```text
//! encoder.json  encoder_loss.csv  standardizer.json  bank.gmb  report.json  timings.json
//! h96/manifest.json  h96/pfrp.json  h96/baseline.json  h96/adam.json  h96/baseline_adam.json
//! h96/train_loss.csv  h96/predictions.csv  h96/w1.csv  plots/h96_window0.svg
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::altretrieval::RetrievalCriterion;
use crate::analysis::{periodicity_score, weight_report, write_weight_csv, PeriodicityConfig, PeriodicityReport, WeightSummary};
use crate::error::{check_len, PfrpError, Result};
use crate::gmb::{
    build_bank, default_bank_size, load_bank, save_bank, BankOptions, KmedoidsOptions, MemoryBank, DEFAULT_BANK_HORIZON,
};
use crate::io::{load_json, save_json, write_atomic};
use crate::local::{LocalKind, LocalPredictor};
use crate::nn::AdamState;
use crate::pcl::{stack_rows, train_encoder, Encoder, EncoderConfig};
use crate::plot::{line_chart, scatter_chart, Series};
use crate::predictor::{
    train_local, train_pfrp, Ablation, PfrpConfig, PfrpModel, PfrpPrediction, Retriever, TrainingSet,
};
use crate::series::{chronological_split, load_csv, make_windows, mae, mse, SplitSpec, Splits, Standardizer, WindowSample};
use crate::synthetic::motif_series;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticData {
    pub len: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self {
            len: 20_000,
            noise_std: 0.2,
            seed: 0,
        }
    }
}

/// Where the series comes from: a CSV file or the built-in motif generator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub column: Option<String>,
    /// Used for per-dataset defaults and in reports. Defaults to the file stem.
    pub name: Option<String>,
    /// Sampling interval label such as "1h" or "15min".
    pub freq: Option<String>,
    pub synthetic: Option<SyntheticData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    /// Number of medoids; defaults per dataset, else 1000.
    pub size: Option<usize>,
    pub horizon: usize,
    pub store_raw_x: bool,
    pub max_iter: usize,
    /// k-medoids initializations; the cheapest clustering is kept.
    pub restarts: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            size: None,
            horizon: DEFAULT_BANK_HORIZON,
            store_raw_x: false,
            max_iter: 100,
            restarts: 5,
        }
    }
}

/// Full run description. `lookback` and `seed` override the encoder's own
/// values so one setting drives every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub split: SplitSpec,
    pub lookback: usize,
    pub horizons: Vec<usize>,
    pub encoder: EncoderConfig,
    pub bank: BankConfig,
    /// Retrieved entries per query; defaults per dataset, else 10.
    pub k: Option<usize>,
    pub retrieval: RetrievalCriterion,
    pub local_kind: LocalKind,
    pub ablation: Ablation,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Train the local model alone first and keep it frozen inside PFRP.
    pub pretrained_local: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PfrpConfig::default();
        Self {
            data: DataConfig::default(),
            split: SplitSpec::default(),
            lookback: 96,
            horizons: vec![96, 192, 336, 720],
            encoder: EncoderConfig::default(),
            bank: BankConfig::default(),
            k: None,
            retrieval: p.retrieval,
            local_kind: p.local_kind,
            ablation: p.ablation,
            lr: p.lr,
            epochs: p.epochs,
            batch_size: p.batch_size,
            pretrained_local: false,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PfrpError::invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PfrpError::invalid(format!("config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        if self.lookback == 0 || self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(PfrpError::invalid("lookback and every horizon must be >= 1"));
        }
        if let Some(&h) = self.horizons.iter().find(|&&h| h > self.bank.horizon) {
            return Err(PfrpError::invalid(format!("horizon {h} exceeds the bank horizon {}", self.bank.horizon)));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(PfrpError::invalid("batch_size and lr must be positive"));
        }
        match (&self.data.path, &self.data.synthetic) {
            (Some(_), Some(_)) => Err(PfrpError::invalid("set either data.path or data.synthetic, not both")),
            (None, None) => Err(PfrpError::invalid("no dataset: set data.path or data.synthetic")),
            _ => self.encoder_config().validate(),
        }
    }

    pub fn dataset_name(&self) -> String {
        if let Some(n) = &self.data.name {
            return n.clone();
        }
        match &self.data.path {
            Some(p) => p.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned()),
            None => "synthetic".into(),
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            lookback: self.lookback,
            seed: self.seed,
            ..self.encoder.clone()
        }
    }

    pub fn k(&self) -> usize {
        self.k
            .or_else(|| default_bank_size(&self.dataset_name()).map(|(_, k)| k))
            .unwrap_or(10)
    }

    pub fn bank_size(&self) -> usize {
        self.bank
            .size
            .or_else(|| default_bank_size(&self.dataset_name()).map(|(k, _)| k))
            .unwrap_or(1000)
    }

    pub fn pfrp_config(&self, horizon: usize) -> PfrpConfig {
        PfrpConfig {
            k: self.k(),
            horizon,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            retrieval: self.retrieval,
            local_kind: self.local_kind,
            ablation: self.ablation,
            freeze_local: self.pretrained_local,
            ..PfrpConfig::default()
        }
    }

    pub fn paths(&self) -> RunPaths {
        RunPaths {
            root: self.output_dir.clone(),
        }
    }
}

/// File layout under the output directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn encoder(&self) -> PathBuf {
        self.root.join("encoder.json")
    }
    pub fn encoder_loss(&self) -> PathBuf {
        self.root.join("encoder_loss.csv")
    }
    pub fn standardizer(&self) -> PathBuf {
        self.root.join("standardizer.json")
    }
    pub fn bank(&self) -> PathBuf {
        self.root.join("bank.gmb")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
    pub fn horizon_dir(&self, h: usize) -> PathBuf {
        self.root.join(format!("h{h}"))
    }
    pub fn manifest(&self, h: usize) -> PathBuf {
        self.horizon_dir(h).join("manifest.json")
    }
}

/// Standardized series with its split boundaries.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub name: String,
    pub freq: Option<String>,
    pub values: Vec<f64>,
    pub standardizer: Standardizer,
    pub splits: Splits,
}

impl PreparedData {
    pub fn windows(&self, range: std::ops::Range<usize>, lookback: usize, horizon: usize) -> Result<Vec<WindowSample>> {
        make_windows(&self.values, range, lookback, horizon, 1)
    }
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let ts = match (&cfg.data.path, &cfg.data.synthetic) {
        (Some(path), _) if !path.is_file() => {
            return Err(PfrpError::invalid(format!("dataset not found: {}", path.display())))
        }
        (Some(path), _) => load_csv(path, cfg.data.column.as_deref())?,
        (None, Some(s)) => motif_series(s.len, s.noise_std, s.seed)?,
        (None, None) => unreachable!("validated"),
    };
    let longest = cfg.horizons.iter().copied().max().unwrap_or(1);
    let splits = chronological_split(ts.len(), &cfg.split, cfg.lookback + longest)?;
    let standardizer = Standardizer::fit(&ts.values[splits.train.clone()])?;
    Ok(PreparedData {
        name: cfg.dataset_name(),
        freq: cfg.data.freq.clone().or(ts.freq_label),
        values: standardizer.apply(&ts.values),
        standardizer,
        splits,
    })
}

fn record_timing(paths: &RunPaths, stage: &str, started: Instant) -> Result<()> {
    let path = paths.timings();
    let mut map: BTreeMap<String, f64> = if path.exists() { load_json(&path)? } else { BTreeMap::new() };
    map.insert(stage.to_string(), started.elapsed().as_secs_f64());
    save_json(&map, &path)
}

fn write_curve(path: &Path, header: &str, curve: &[f64]) -> Result<()> {
    let mut out = format!("epoch,{header}\n");
    for (i, v) in curve.iter().enumerate() {
        writeln!(out, "{i},{v}").expect("string write");
    }
    write_atomic(path, out.as_bytes())
}

/// Stage 1: contrastive encoder training on the train split.
pub fn run_train_encoder(cfg: &RunConfig) -> Result<Encoder> {
    let started = Instant::now();
    let data = prepare_data(cfg)?;
    let samples = data.windows(data.splits.train.clone(), cfg.lookback, cfg.bank.horizon)?;
    log::info!("training encoder on {} windows", samples.len());
    let trained = train_encoder(&samples, &cfg.encoder_config())?;
    let paths = cfg.paths();
    save_json(&trained.encoder, &paths.encoder())?;
    save_json(&data.standardizer, &paths.standardizer())?;
    // Row 0 is the loss of the untrained encoder.
    write_curve(&paths.encoder_loss(), "loss", &trained.loss_curve)?;
    record_timing(&paths, "train_encoder", started)?;
    Ok(trained.encoder)
}

pub fn load_encoder(path: &Path) -> Result<Encoder> {
    load_json(path)
}

/// Stage 1b: k-medoids compaction of the encoded train windows.
pub fn run_build_bank(cfg: &RunConfig) -> Result<MemoryBank> {
    let started = Instant::now();
    let paths = cfg.paths();
    let encoder = load_encoder(&paths.encoder())?;
    let data = prepare_data(cfg)?;
    let samples = data.windows(data.splits.train.clone(), cfg.lookback, cfg.bank.horizon)?;
    let opts = BankOptions {
        size: cfg.bank_size(),
        seed: cfg.seed,
        store_raw_x: cfg.bank.store_raw_x,
        dataset: data.name.clone(),
        clustering: KmedoidsOptions {
            max_iter: cfg.bank.max_iter,
            restarts: cfg.bank.restarts.max(1),
        },
    };
    log::info!("clustering {} windows into {} medoids", samples.len(), opts.size);
    let bank = build_bank(&encoder, &samples, &opts)?;
    save_bank(&bank, &paths.bank())?;
    record_timing(&paths, "build_bank", started)?;
    Ok(bank)
}

/// Per-horizon checkpoint index. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub lookback: usize,
    pub horizon: usize,
    pub encoder: String,
    pub encoder_hash: String,
    pub bank: String,
    pub standardizer: String,
    pub model: String,
    pub baseline: String,
    pub adam: String,
    pub baseline_adam: String,
    pub config: PfrpConfig,
}

impl Manifest {
    fn new(lookback: usize, config: PfrpConfig, encoder_hash: String) -> Self {
        Self {
            version: 1,
            lookback,
            horizon: config.horizon,
            encoder: "../encoder.json".into(),
            encoder_hash,
            bank: "../bank.gmb".into(),
            standardizer: "../standardizer.json".into(),
            model: "pfrp.json".into(),
            baseline: "baseline.json".into(),
            adam: "adam.json".into(),
            baseline_adam: "baseline_adam.json".into(),
            config,
        }
    }
}

/// Everything needed to serve one horizon.
pub struct Composite {
    pub manifest: Manifest,
    pub encoder: Encoder,
    pub bank: MemoryBank,
    pub standardizer: Standardizer,
    pub model: PfrpModel,
    pub baseline: LocalPredictor,
}

impl Composite {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: Manifest = load_json(manifest_path)?;
        if manifest.version != 1 {
            return Err(PfrpError::Version(format!("manifest version {}", manifest.version)));
        }
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let encoder = load_encoder(&dir.join(&manifest.encoder))?;
        if encoder.content_hash() != manifest.encoder_hash {
            return Err(PfrpError::data(format!(
                "encoder checkpoint changed since training (expected {})",
                manifest.encoder_hash
            )));
        }
        let model: PfrpModel = load_json(&dir.join(&manifest.model))?;
        check_len("model horizon", manifest.horizon, model.horizon)?;
        Ok(Self {
            bank: load_bank(&dir.join(&manifest.bank))?,
            standardizer: load_json(&dir.join(&manifest.standardizer))?,
            baseline: load_json(&dir.join(&manifest.baseline))?,
            encoder,
            model,
            manifest,
        })
    }

    pub fn retriever(&self) -> Result<Retriever<'_>> {
        Retriever::new(&self.encoder, &self.bank, &self.manifest.config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub horizon: usize,
    pub baseline_loss: Vec<f64>,
    pub pfrp_loss: Vec<f64>,
    pub adam_step: u64,
}

/// Stage 2 for every configured horizon. With `resume`, existing model and
/// optimizer checkpoints are loaded and trained for `epochs` more epochs.
pub fn run_train(cfg: &RunConfig, resume: bool) -> Result<Vec<TrainSummary>> {
    let started = Instant::now();
    let paths = cfg.paths();
    let encoder = load_encoder(&paths.encoder())?;
    let bank = load_bank(&paths.bank())?;
    let data = prepare_data(cfg)?;
    let mut out = Vec::new();
    for &h in &cfg.horizons {
        let dir = paths.horizon_dir(h);
        let pcfg = cfg.pfrp_config(h);
        let retriever = Retriever::new(&encoder, &bank, &pcfg)?;
        let samples = data.windows(data.splits.train.clone(), cfg.lookback, h)?;
        log::info!("horizon {h}: resolving retrieval for {} windows", samples.len());
        let set = TrainingSet::new(&retriever, &samples)?;

        let resuming = resume && dir.join("adam.json").exists();
        let (mut baseline, mut baseline_adam) = if resuming {
            (load_json(&dir.join("baseline.json"))?, load_json(&dir.join("baseline_adam.json"))?)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6261_7365);
            (LocalPredictor::new(cfg.local_kind, cfg.lookback, h, &mut rng)?, AdamState::new(cfg.lr))
        };
        let baseline_loss = train_local(&mut baseline, &mut baseline_adam, &samples, &pcfg)?;

        let (mut model, mut adam) = if resuming {
            (load_json::<PfrpModel>(&dir.join("pfrp.json"))?, load_json::<AdamState>(&dir.join("adam.json"))?)
        } else {
            let model = PfrpModel::new(cfg.lookback, &pcfg)?;
            let model = if cfg.pretrained_local { model.with_local(baseline.clone())? } else { model };
            (model, AdamState::new(cfg.lr))
        };
        log::info!("horizon {h}: training {} parameters", model.num_parameters());
        let pfrp_loss = train_pfrp(&mut model, &mut adam, &set, &pcfg)?;

        save_json(&model, &dir.join("pfrp.json"))?;
        save_json(&adam, &dir.join("adam.json"))?;
        save_json(&baseline, &dir.join("baseline.json"))?;
        save_json(&baseline_adam, &dir.join("baseline_adam.json"))?;
        write_curve(&dir.join("train_loss.csv"), "pfrp_loss", &pfrp_loss)?;
        save_json(&Manifest::new(cfg.lookback, pcfg, encoder.content_hash()), &paths.manifest(h))?;
        out.push(TrainSummary {
            horizon: h,
            baseline_loss,
            pfrp_loss,
            adam_step: adam.step,
        });
    }
    record_timing(&paths, "train", started)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

impl Metrics {
    pub fn of(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Self> {
        let p: Vec<f64> = pred.concat();
        let t: Vec<f64> = truth.concat();
        Ok(Self {
            mse: mse(&p, &t)?,
            mae: mae(&p, &t)?,
        })
    }
}

fn improvement(base: f64, new: f64) -> f64 {
    (base - new) / base * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub horizon: usize,
    pub test_windows: usize,
    pub baseline: Metrics,
    pub pfrp: Metrics,
    pub improvement_mse_pct: f64,
    pub improvement_mae_pct: f64,
    pub baseline_parameters: usize,
    pub pfrp_parameters: usize,
    pub fusion_weights: WeightSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageReport {
    pub baseline: Metrics,
    pub pfrp: Metrics,
    pub improvement_mse_pct: f64,
    pub improvement_mae_pct: f64,
}

/// Test-split results. Wall-clock timings live in `timings.json` so that
/// identical runs produce identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub seed: u64,
    pub lookback: usize,
    pub k: usize,
    pub bank_size: usize,
    pub retrieval: RetrievalCriterion,
    pub local_kind: LocalKind,
    pub ablation: Ablation,
    pub encoder_parameters: usize,
    pub horizons: Vec<HorizonReport>,
    /// Mean over the evaluated horizons.
    pub average: AverageReport,
    pub periodicity: Option<PeriodicityReport>,
}

/// Evaluation output for one horizon, kept in memory for tests and plots.
pub struct HorizonEval {
    pub report: HorizonReport,
    pub samples: Vec<WindowSample>,
    pub baseline: Vec<Vec<f64>>,
    pub predictions: Vec<PfrpPrediction>,
}

pub fn evaluate_horizon(composite: &Composite, samples: Vec<WindowSample>) -> Result<HorizonEval> {
    if samples.is_empty() {
        return Err(PfrpError::data("no test windows"));
    }
    let retriever = composite.retriever()?;
    let x = stack_rows(samples.iter().map(|s| &s.x[..]))?;
    let baseline: Vec<Vec<f64>> = composite
        .baseline
        .predict(x.view())?
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect();
    let predictions = samples
        .iter()
        .map(|s| composite.model.forward(&retriever, &s.x))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<Vec<f64>> = samples.iter().map(|s| s.y.clone()).collect();
    let ys: Vec<Vec<f64>> = predictions.iter().map(|p| p.y.clone()).collect();
    let base = Metrics::of(&baseline, &truth)?;
    let pfrp = Metrics::of(&ys, &truth)?;
    if !(pfrp.mse.is_finite() && base.mse.is_finite()) {
        return Err(PfrpError::Numeric("non-finite test error".into()));
    }
    Ok(HorizonEval {
        report: HorizonReport {
            horizon: composite.model.horizon,
            test_windows: samples.len(),
            baseline: base,
            pfrp,
            improvement_mse_pct: improvement(base.mse, pfrp.mse),
            improvement_mae_pct: improvement(base.mae, pfrp.mae),
            baseline_parameters: composite.baseline.num_parameters(),
            pfrp_parameters: composite.model.num_parameters(),
            fusion_weights: weight_report(&predictions)?,
        },
        samples,
        baseline,
        predictions,
    })
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

/// One row per test window; vector columns are `;`-separated.
pub fn write_predictions_csv(path: &Path, eval: &HorizonEval) -> Result<()> {
    let mut out = String::from("window,start_index,w1,y_true,y1,y2,y,baseline\n");
    for (i, ((s, p), b)) in eval.samples.iter().zip(&eval.predictions).zip(&eval.baseline).enumerate() {
        writeln!(
            out,
            "{i},{},{},{},{},{},{},{}",
            s.start_index,
            p.fusion.0,
            join(&s.y),
            join(&p.y1),
            p.y2.as_deref().map(join).unwrap_or_default(),
            join(&p.y),
            join(b)
        )
        .expect("string write");
    }
    write_atomic(path, out.as_bytes())
}

pub fn prediction_chart(title: &str, truth: &[f64], y1: &[f64], y2: Option<&[f64]>, y: &[f64]) -> String {
    let mut series = vec![Series::line("truth", truth), Series::line("y1 global", y1)];
    if let Some(y2) = y2 {
        series.push(Series::line("y2 local", y2));
    }
    series.push(Series::line("y fused", y));
    line_chart(title, &series)
}

/// Stage 3: test-split metrics for every trained horizon.
pub fn run_eval(cfg: &RunConfig, plot_indices: &[usize]) -> Result<EvalReport> {
    let started = Instant::now();
    let paths = cfg.paths();
    let data = prepare_data(cfg)?;
    let mut horizons = Vec::new();
    let mut encoder_parameters = 0;
    let mut bank_size = 0;
    for &h in &cfg.horizons {
        let composite = Composite::load(&paths.manifest(h))?;
        encoder_parameters = composite.encoder.mlp.num_parameters();
        bank_size = composite.bank.len();
        let samples = data.windows(data.splits.test.clone(), cfg.lookback, h)?;
        let eval = evaluate_horizon(&composite, samples)?;
        let dir = paths.horizon_dir(h);
        write_predictions_csv(&dir.join("predictions.csv"), &eval)?;
        write_weight_csv(&dir.join("w1.csv"), &eval.predictions)?;
        for &i in plot_indices {
            let (Some(s), Some(p)) = (eval.samples.get(i), eval.predictions.get(i)) else {
                return Err(PfrpError::invalid(format!("plot index {i} beyond {} test windows", eval.samples.len())));
            };
            let svg = prediction_chart(&format!("{} H={h} window {i}", data.name), &s.y, &p.y1, p.y2.as_deref(), &p.y);
            write_atomic(&paths.plots().join(format!("h{h}_window{i}.svg")), svg.as_bytes())?;
        }
        log::info!(
            "horizon {h}: baseline mse {:.4}, pfrp mse {:.4}",
            eval.report.baseline.mse,
            eval.report.pfrp.mse
        );
        horizons.push(eval.report);
    }
    let n = horizons.len() as f64;
    let avg = |f: &dyn Fn(&HorizonReport) -> f64| horizons.iter().map(f).sum::<f64>() / n;
    let baseline = Metrics {
        mse: avg(&|r| r.baseline.mse),
        mae: avg(&|r| r.baseline.mae),
    };
    let pfrp = Metrics {
        mse: avg(&|r| r.pfrp.mse),
        mae: avg(&|r| r.pfrp.mae),
    };
    let periodicity = PeriodicityConfig::for_freq(data.freq.as_deref().unwrap_or("1h"))
        .and_then(|c| periodicity_score(&data.values, &c).ok());
    let report = EvalReport {
        dataset: data.name,
        seed: cfg.seed,
        lookback: cfg.lookback,
        k: cfg.k(),
        bank_size,
        retrieval: cfg.retrieval,
        local_kind: cfg.local_kind,
        ablation: cfg.ablation,
        encoder_parameters,
        average: AverageReport {
            baseline,
            pfrp,
            improvement_mse_pct: improvement(baseline.mse, pfrp.mse),
            improvement_mae_pct: improvement(baseline.mae, pfrp.mae),
        },
        horizons,
        periodicity,
    };
    save_json(&report, &paths.report())?;
    record_timing(&paths, "eval", started)?;
    Ok(report)
}

/// All four stages in order.
pub fn run_all(cfg: &RunConfig) -> Result<EvalReport> {
    run_train_encoder(cfg)?;
    run_build_bank(cfg)?;
    run_train(cfg, false)?;
    run_eval(cfg, &[])
}

/// A forecast in the original units of the series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub horizon: usize,
    pub y: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Option<Vec<f64>>,
    pub w1: f64,
    pub w2: f64,
    pub indices: Vec<usize>,
    pub confidences: Vec<f64>,
    pub mod_weights: Vec<f64>,
}

/// Forecasts from the last `lookback` raw values of `history`.
pub fn forecast(composite: &Composite, history: &[f64]) -> Result<Forecast> {
    let l = composite.manifest.lookback;
    if history.len() < l {
        return Err(PfrpError::data(format!("need {l} history values, got {}", history.len())));
    }
    let x = composite.standardizer.apply(&history[history.len() - l..]);
    let p = composite.model.forward(&composite.retriever()?, &x)?;
    let inv = |v: &[f64]| composite.standardizer.invert(v);
    Ok(Forecast {
        horizon: composite.manifest.horizon,
        y: inv(&p.y),
        y1: inv(&p.y1),
        y2: p.y2.as_deref().map(inv),
        w1: p.fusion.0,
        w2: p.fusion.1,
        indices: p.indices,
        confidences: p.confidences,
        mod_weights: p.mod_weights,
    })
}

/// Re-renders one row of a predictions CSV.
pub fn plot_predictions_row(csv_path: &Path, window: usize) -> Result<String> {
    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| PfrpError::data(format!("{}: {e}", csv_path.display())))?;
    let headers = reader.headers().map_err(|e| PfrpError::data(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PfrpError::data(format!("{} has no {name} column", csv_path.display())))
    };
    let (ct, c1, c2, cy) = (col("y_true")?, col("y1")?, col("y2")?, col("y")?);
    let parse = |s: &str| -> Result<Vec<f64>> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(';')
            .map(|v| v.parse::<f64>().map_err(|e| PfrpError::data(format!("{v:?}: {e}"))))
            .collect()
    };
    let record = reader
        .records()
        .nth(window)
        .ok_or_else(|| PfrpError::invalid(format!("window {window} not in {}", csv_path.display())))?
        .map_err(|e| PfrpError::data(e.to_string()))?;
    let y2 = parse(&record[c2])?;
    Ok(prediction_chart(
        &format!("window {window}"),
        &parse(&record[ct])?,
        &parse(&record[c1])?,
        (!y2.is_empty()).then_some(&y2[..]),
        &parse(&record[cy])?,
    ))
}

/// Periodicity score against mean global weight, one point per report and horizon.
pub fn plot_weight_scatter(reports: &[EvalReport]) -> Result<String> {
    let mut points = Vec::new();
    for r in reports {
        let p = r
            .periodicity
            .as_ref()
            .ok_or_else(|| PfrpError::data(format!("report for {} has no periodicity score", r.dataset)))?;
        points.extend(r.horizons.iter().map(|h| (p.score, h.fusion_weights.mean_w1)));
    }
    Ok(scatter_chart(
        "periodicity score vs mean w1",
        &[Series {
            label: "datasets",
            points,
        }],
    ))
}
