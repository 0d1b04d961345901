//! Browser bindings: periodicity scoring, DTW alignment and memory-bank
//! retrieval on the built-in motif series. Every export returns a JSON string.

use std::cell::RefCell;

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use pfrp::altretrieval::{dtw_distance, retrieve_topk_by, RetrievalCriterion};
use pfrp::analysis::{acf, periodicity_score, PeriodicityConfig};
use pfrp::gmb::{build_bank, BankOptions, KmedoidsOptions, MemoryBank};
use pfrp::nn::softmax;
use pfrp::pcl::{train_encoder, Encoder, EncoderConfig};
use pfrp::series::{make_windows, WindowSample};
use pfrp::synthetic::{motif, motif_series, white_noise, DAY};
use pfrp::{PfrpError, Result};

const WEEK_LEN: usize = DAY * 7;
const LOOKBACK: usize = 96;
const HORIZON: usize = DAY;

fn to_js(r: Result<Value>) -> std::result::Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

pub fn periodicity_json(kind: &str, noise: f64, seed: u64) -> Result<Value> {
    let len = WEEK_LEN * 20;
    let values = match kind {
        "motifs" => motif_series(len, noise, seed)?.values,
        "sine" => {
            let clean: Vec<f64> = (0..len).map(|t| motif(0, t % DAY)).collect();
            let eps = white_noise(len, seed)?.values;
            clean.iter().zip(&eps).map(|(c, e)| c + noise * e).collect()
        }
        "noise" => white_noise(len, seed)?.values,
        other => return Err(PfrpError::invalid(format!("unknown series {other:?}"))),
    };
    let report = periodicity_score(&values, &PeriodicityConfig::default())?;
    let curve = (1..=2 * WEEK_LEN).map(|l| acf(&values, l)).collect::<Result<Vec<_>>>()?;
    Ok(json!({
        "preview": &values[..2 * WEEK_LEN],
        "acf": curve,
        "report": report,
    }))
}

/// Optimal alignment path, for drawing. Same recurrence as the library's distance.
fn dtw_path(a: &[f64], b: &[f64]) -> (f64, Vec<(usize, usize)>) {
    let (n, m) = (a.len(), b.len());
    let mut d = vec![vec![f64::INFINITY; m + 1]; n + 1];
    d[0][0] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            d[i][j] = (a[i - 1] - b[j - 1]).abs() + d[i - 1][j - 1].min(d[i - 1][j]).min(d[i][j - 1]);
        }
    }
    let (mut i, mut j) = (n, m);
    let mut path = vec![(i - 1, j - 1)];
    while (i, j) != (1, 1) {
        let moves = [(i - 1, j - 1), (i - 1, j), (i, j - 1)];
        (i, j) = moves
            .into_iter()
            .filter(|&(p, q)| p >= 1 && q >= 1)
            .min_by(|x, y| d[x.0][x.1].total_cmp(&d[y.0][y.1]))
            .expect("a predecessor exists");
        path.push((i - 1, j - 1));
    }
    path.reverse();
    (d[n][m], path)
}

/// Two copies of a double-peak day, the second shifted by `shift` hours.
pub fn dtw_json(shift: usize) -> Result<Value> {
    let day = |s: usize| -> Vec<f64> { (0..DAY).map(|h| motif(2, (h + DAY - s % DAY) % DAY)).collect() };
    let a = day(0);
    let mse = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
    let mut curve = Vec::new();
    for s in 0..=DAY / 2 {
        let b = day(s);
        curve.push(json!({ "shift": s, "dtw": dtw_distance(&a, &b)?, "mse": mse(&a, &b) }));
    }
    let b = day(shift);
    let (cost, path) = dtw_path(&a, &b);
    Ok(json!({
        "a": a,
        "b": b,
        "dtw": cost,
        "mse": mse(&a, &b),
        "path": path,
        "curve": curve,
    }))
}

struct Memory {
    key: (u64, u64),
    encoder: Encoder,
    bank: MemoryBank,
    test: Vec<WindowSample>,
}

thread_local! {
    static MEMORY: RefCell<Option<Memory>> = const { RefCell::new(None) };
}

fn build_memory(seed: u64, noise: f64) -> Result<Memory> {
    let values = motif_series(WEEK_LEN * 16, noise, seed)?.values;
    let cut = values.len() * 3 / 4;
    let train = make_windows(&values, 0..cut, LOOKBACK, HORIZON, 1)?;
    let test = make_windows(&values, cut..values.len(), LOOKBACK, HORIZON, HORIZON)?;
    let config = EncoderConfig {
        lookback: LOOKBACK,
        feature_dim: 32,
        hidden: vec![64],
        batch_size: 128,
        epochs: 3,
        seed,
        ..EncoderConfig::default()
    };
    let encoder = train_encoder(&train, &config)?.encoder;
    let opts = BankOptions {
        size: 120,
        seed,
        store_raw_x: true,
        dataset: "motifs".into(),
        clustering: KmedoidsOptions { max_iter: 30, restarts: 1 },
    };
    let bank = build_bank(&encoder, &train, &opts)?;
    Ok(Memory {
        key: (seed, noise.to_bits()),
        encoder,
        bank,
        test,
    })
}

/// Retrieves `k` bank entries for test window `query` and averages their
/// futures under a softmax over similarities.
pub fn retrieval_json(seed: u64, noise: f64, criterion: &str, k: usize, query: usize) -> Result<Value> {
    let criterion = RetrievalCriterion::parse(criterion)?;
    MEMORY.with(|cell| {
        let mut slot = cell.borrow_mut();
        if slot.as_ref().map(|m| m.key) != Some((seed, noise.to_bits())) {
            *slot = Some(build_memory(seed, noise)?);
        }
        let m = slot.as_ref().expect("just built");
        let sample = &m.test[query.min(m.test.len() - 1)];
        let r = retrieve_topk_by(criterion, &m.bank, &m.encoder, &sample.x, k, HORIZON)?;
        let w = softmax(&r.weights);
        let forecast: Vec<f64> = (0..HORIZON).map(|t| w.iter().zip(&r.values).map(|(wi, v)| wi * v[t]).sum()).collect();
        let err = forecast.iter().zip(&sample.y).map(|(f, y)| (f - y) * (f - y)).sum::<f64>() / HORIZON as f64;
        let neighbours: Vec<Value> = r
            .indices
            .iter()
            .zip(&r.scores)
            .zip(&w)
            .zip(&r.values)
            .map(|(((&i, s), w), v)| json!({ "entry": i, "start": m.bank.start_indices[i], "score": s, "weight": w, "values": v }))
            .collect();
        Ok(json!({
            "queries": m.test.len(),
            "bank_size": m.bank.len(),
            "history": sample.x,
            "truth": sample.y,
            "forecast": forecast,
            "mse": err,
            "neighbours": neighbours,
        }))
    })
}

#[wasm_bindgen]
pub fn periodicity(kind: &str, noise: f64, seed: u32) -> std::result::Result<String, JsError> {
    to_js(periodicity_json(kind, noise, seed.into()))
}

#[wasm_bindgen]
pub fn dtw(shift: usize) -> std::result::Result<String, JsError> {
    to_js(dtw_json(shift))
}

#[wasm_bindgen]
pub fn retrieve(seed: u32, noise: f64, criterion: &str, k: usize, query: usize) -> std::result::Result<String, JsError> {
    to_js(retrieval_json(seed.into(), noise, criterion, k, query))
}
