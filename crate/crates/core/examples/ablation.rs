//! Runs the component ablation (SFT, reward-only, KL-only, full GRQO) on a
//! small corpus. Cells share one supervised warmup.
//!
//! `cargo run --release --example ablation -- [out_dir]`

use std::path::PathBuf;

use grqo::ablate::{self, AblateOptions, Axis};
use grqo::synthdata::{build_splits, DatasetSpec};
use grqo::trainer::TrainConfig;

fn main() -> grqo::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/ablate-component".into()));
    let spec = DatasetSpec { train_count: 200, val_id_count: 40, val_ood_count: 40, ..Default::default() };
    let data = build_splits(&spec, 0)?;
    let base = TrainConfig { epochs: 3, eval_prompts_per_class: 8, ..Default::default() };
    let opts = AblateOptions { workers: 2, ..Default::default() };

    let rows = ablate::run(Axis::Component, &base, &data, &out, &opts, &|dir, cell| {
        println!("training {} -> {}", cell.name, dir.display());
        Ok(())
    })?;
    println!("{}", ablate::SUMMARY_HEADER);
    for r in &rows {
        println!("{}", r.csv_row());
    }
    Ok(())
}
