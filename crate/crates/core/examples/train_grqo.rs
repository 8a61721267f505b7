//! Supervised warmup followed by GRQO epochs against the frozen warmup
//! snapshot. Prints reward, KL and validation AP per epoch.
//!
//! `cargo run --release --example train_grqo -- [out_dir]`

use std::path::PathBuf;

use grqo::synthdata::{build_splits, DatasetSpec};
use grqo::trainer::{train_grqo, TrainConfig};

fn main() -> grqo::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/grqo".into()));
    let spec = DatasetSpec { train_count: 400, val_id_count: 60, val_ood_count: 60, ..Default::default() };
    let data = build_splits(&spec, 0)?;
    let cfg = TrainConfig { epochs: 4, sft_warmup_epochs: 1, eval_prompts_per_class: 8, ..Default::default() };

    let t = train_grqo(&cfg, &data, None, Some(&out))?;
    for m in &t.history {
        println!(
            "epoch {} {:>4?} loss {:.3} reward term {:.3} kl {:.4} id AP50 {:.4} ood AP50 {:.4}",
            m.epoch,
            m.phase,
            m.loss.total,
            m.loss.grqo_reward,
            m.loss.kl,
            m.val_id_ap50.unwrap_or(f64::NAN),
            m.val_ood_ap50.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
