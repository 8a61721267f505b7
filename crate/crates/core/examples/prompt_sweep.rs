//! Evaluates one model with 1, 8 and 64 visual prompts per class on both
//! validation splits. Pass a checkpoint to sweep it, or let the example
//! train a short SFT model first.
//!
//! `cargo run --release --example prompt_sweep -- [model.ckpt]`

use std::path::Path;

use grqo::evalkit::{map_over, EvalOptions};
use grqo::synthdata::{build_splits, DatasetSpec, SplitName};
use grqo::trainer::{load_checkpoint, train_sft, TrainConfig};

fn main() -> grqo::Result<()> {
    let spec = DatasetSpec { train_count: 300, val_id_count: 60, val_ood_count: 60, ..Default::default() };
    let data = build_splits(&spec, 0)?;
    let model = match std::env::args().nth(1) {
        Some(path) => load_checkpoint(Path::new(&path))?.into_model()?,
        None => train_sft(&TrainConfig { epochs: 2, eval: false, ..TrainConfig::sft() }, &data, None)?.model,
    };

    println!("{:>6} {:>9} {:>9} {:>9} {:>9}", "P", "id AP50", "id mAP", "ood AP50", "ood mAP");
    for p in [1, 8, 64] {
        let opts = EvalOptions { prompts_per_class: p, ..Default::default() };
        let id = map_over(&model, &data, SplitName::ValId, &opts)?;
        let ood = map_over(&model, &data, SplitName::ValOod, &opts)?;
        println!("{p:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4}", id.ap50, id.map, ood.ap50, ood.map);
    }
    Ok(())
}
