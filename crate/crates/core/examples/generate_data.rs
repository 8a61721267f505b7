//! Generates the synthetic shapes corpus and writes it to disk.
//!
//! `cargo run --release --example generate_data -- [out_dir] [seed]`

use std::path::PathBuf;

use grqo::synthdata::{build_splits, class_name, save_dataset, DatasetSpec, SplitName, NUM_CLASSES};

fn main() -> grqo::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "shapes-data".into()));
    let seed: u64 = args.next().map(|s| s.parse().expect("seed must be an integer")).unwrap_or(0);

    let spec = DatasetSpec::default();
    let data = build_splits(&spec, seed)?;
    save_dataset(&out, &data)?;

    println!("wrote {} (seed {seed}, checksum {:08x})", out.display(), data.checksum());
    for name in [SplitName::Train, SplitName::ValId, SplitName::ValOod] {
        let split = data.split(name);
        let mut counts = [0usize; NUM_CLASSES];
        split.scenes.iter().flat_map(|s| &s.instances).for_each(|i| counts[i.class_id] += 1);
        let rarest = (0..NUM_CLASSES).min_by_key(|&k| counts[k]).unwrap();
        println!(
            "{:>8}: {} scenes, {} objects, rarest class {} ({})",
            name.as_str(),
            split.scenes.len(),
            counts.iter().sum::<usize>(),
            class_name(rarest),
            counts[rarest]
        );
    }
    Ok(())
}
