//! Linear model alone vs. retrieval-augmented on the motif series.
//!
//! cargo run --release -p pfrp --example synthetic_benchmark -- [seed] [out_dir]

use std::time::Instant;

use pfrp::pipeline::{run_build_bank, run_eval, run_train, run_train_encoder, RunConfig, SyntheticData};

fn main() -> pfrp::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let out = args.next().unwrap_or_else(|| format!("runs/synthetic-{seed}"));
    let mut cfg = RunConfig {
        seed,
        horizons: vec![96],
        k: Some(10),
        output_dir: out.into(),
        ..RunConfig::default()
    };
    cfg.data.synthetic = Some(SyntheticData { seed, ..SyntheticData::default() });
    cfg.bank.size = Some(500);
    let t = Instant::now();
    run_train_encoder(&cfg)?;
    println!("encoder {:.1}s", t.elapsed().as_secs_f64());
    run_build_bank(&cfg)?;
    println!("bank {:.1}s", t.elapsed().as_secs_f64());
    let tr = run_train(&cfg, false)?;
    println!("train {:.1}s {:?}", t.elapsed().as_secs_f64(), tr[0]);
    let r = run_eval(&cfg, &[0])?;
    println!("eval {:.1}s", t.elapsed().as_secs_f64());
    println!("{}", serde_json::to_string_pretty(&r.horizons[0]).unwrap());
    Ok(())
}
