//! Trains the supervised baseline on a small corpus and saves a checkpoint.
//!
//! `cargo run --release --example train_sft -- [out_dir]`

use std::path::PathBuf;

use grqo::synthdata::{build_splits, DatasetSpec};
use grqo::trainer::{train_sft, TrainConfig};

fn main() -> grqo::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/sft".into()));
    let spec = DatasetSpec { train_count: 400, val_id_count: 60, val_ood_count: 60, ..Default::default() };
    let data = build_splits(&spec, 0)?;
    let cfg = TrainConfig { epochs: 3, eval_prompts_per_class: 8, ..TrainConfig::sft() };

    let t = train_sft(&cfg, &data, Some(&out))?;
    for m in &t.history {
        println!(
            "epoch {} loss {:.3} id AP50 {:.4} ood AP50 {:.4}",
            m.epoch,
            m.loss.total,
            m.val_id_ap50.unwrap_or(f64::NAN),
            m.val_ood_ap50.unwrap_or(f64::NAN)
        );
    }
    println!("checkpoints and metrics.csv in {}", out.display());
    Ok(())
}
