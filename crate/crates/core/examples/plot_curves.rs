//! Trains an SFT and a GRQO run and draws their validation curves.
//!
//! `cargo run --release --example plot_curves -- [out_dir]`

use std::path::PathBuf;

use grqo::cli::{metrics_csv, metrics_svg, MetricsTable};
use grqo::synthdata::{build_splits, DatasetSpec};
use grqo::trainer::{train_grqo, train_sft, TrainConfig};

fn main() -> grqo::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/curves".into()));
    let spec = DatasetSpec { train_count: 200, val_id_count: 40, val_ood_count: 40, ..Default::default() };
    let data = build_splits(&spec, 0)?;
    let cfg = TrainConfig { epochs: 3, eval_prompts_per_class: 8, ..Default::default() };

    train_sft(&cfg, &data, Some(&out.join("sft")))?;
    train_grqo(&cfg, &data, None, Some(&out.join("grqo")))?;

    let tables = [MetricsTable::read(&out.join("sft"))?, MetricsTable::read(&out.join("grqo"))?];
    std::fs::write(out.join("curves.svg"), metrics_svg(&tables))?;
    std::fs::write(out.join("curves.csv"), metrics_csv(&tables)?)?;
    println!("wrote {0}/curves.svg and {0}/curves.csv", out.display());
    Ok(())
}
