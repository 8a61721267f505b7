//! Dataset directory format: `manifest.json` plus one headerless
//! `scenes_<split>.bin` payload per split.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSpec, Domain, Instance, Scene, Split, SplitName, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::geometry::Box;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    master_seed: u64,
    spec: DatasetSpec,
    splits: Vec<SplitRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitRecord {
    name: SplitName,
    seeds: Vec<u64>,
    scenes: Vec<SceneRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    scene_id: u64,
    seed: u64,
    domain: Domain,
    instances: Vec<Instance>,
    crc32: u32,
}

fn payload_name(split: SplitName) -> String {
    format!("scenes_{}.bin", split.as_str())
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut splits = Vec::with_capacity(dataset.splits.len());
    for split in &dataset.splits {
        let mut payload = Vec::with_capacity(split.scenes.iter().map(|s| s.pixels.len()).sum());
        for s in &split.scenes {
            payload.extend_from_slice(&s.pixels);
        }
        fs::write(dir.join(payload_name(split.name)), payload)?;
        splits.push(SplitRecord {
            name: split.name,
            seeds: split.scenes.iter().map(|s| s.seed).collect(),
            scenes: split
                .scenes
                .iter()
                .map(|s| SceneRecord {
                    scene_id: s.scene_id,
                    seed: s.seed,
                    domain: s.domain,
                    instances: s.instances.clone(),
                    crc32: s.crc32(),
                })
                .collect(),
        });
    }
    let manifest = Manifest { version: FORMAT_VERSION, master_seed: dataset.master_seed, spec: dataset.spec.clone(), splits };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Corrupt { path: manifest_path.clone(), reason: e.to_string() })?;
    // check the version before the full schema so old formats report clearly
    let found = raw.get("version").and_then(|v| v.as_u64()).ok_or_else(|| Error::Schema("manifest has no version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::Version { found: found as u32, expected: FORMAT_VERSION });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::Schema(format!("manifest: {e}")))?;
    if manifest.spec.num_classes != NUM_CLASSES {
        return Err(Error::Schema(format!(
            "manifest declares {} classes, expected {NUM_CLASSES}",
            manifest.spec.num_classes
        )));
    }
    manifest.spec.validate()?;

    let side = manifest.spec.image_size;
    let per_scene = side * side * 3;
    let mut splits = Vec::with_capacity(manifest.splits.len());
    for rec in manifest.splits {
        if rec.seeds.len() != rec.scenes.len() || rec.seeds.iter().zip(&rec.scenes).any(|(a, s)| *a != s.seed) {
            return Err(Error::Schema(format!("seed list of split {} disagrees with scene records", rec.name.as_str())));
        }
        let path = dir.join(payload_name(rec.name));
        let payload = fs::read(&path)?;
        if payload.len() != per_scene * rec.scenes.len() {
            let actual = crc32fast::hash(&payload);
            let expected = rec.scenes.first().map_or(0, |s| s.crc32);
            return Err(Error::Checksum {
                what: format!("{} (length {} != {})", path.display(), payload.len(), per_scene * rec.scenes.len()),
                expected,
                actual,
            });
        }
        let mut scenes = Vec::with_capacity(rec.scenes.len());
        for (i, s) in rec.scenes.into_iter().enumerate() {
            let pixels = payload[i * per_scene..(i + 1) * per_scene].to_vec();
            let actual = crc32fast::hash(&pixels);
            if actual != s.crc32 {
                return Err(Error::Checksum { what: format!("scene {} in {}", s.scene_id, path.display()), expected: s.crc32, actual });
            }
            for inst in &s.instances {
                if inst.class_id >= NUM_CLASSES {
                    return Err(Error::Schema(format!("scene {} has class {}", s.scene_id, inst.class_id)));
                }
                let b = inst.bbox;
                Box::new(b.cx, b.cy, b.w, b.h)?;
            }
            scenes.push(Scene { scene_id: s.scene_id, seed: s.seed, domain: s.domain, size: side, pixels, instances: s.instances });
        }
        splits.push(Split { name: rec.name, scenes });
    }
    for name in SplitName::ALL {
        if !splits.iter().any(|s| s.name == name) {
            return Err(Error::Schema(format!("manifest lacks split {}", name.as_str())));
        }
    }
    Ok(Dataset { spec: manifest.spec, master_seed: manifest.master_seed, splits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::build_splits;

    fn tiny() -> Dataset {
        let spec = DatasetSpec { train_count: 6, val_id_count: 3, val_ood_count: 3, pool_prompts_per_class: 2, ..Default::default() };
        build_splits(&spec, 11).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        save_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn truncated_payload_is_a_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &tiny()).unwrap();
        let p = dir.path().join("scenes_train.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 100);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Checksum { .. })));
    }

    #[test]
    fn flipped_byte_is_a_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &tiny()).unwrap();
        let p = dir.path().join("scenes_val_id.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes[17] ^= 0x40;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Checksum { .. })));
    }

    #[test]
    fn class_count_and_version_checked() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &tiny()).unwrap();
        let mp = dir.path().join("manifest.json");
        let original: serde_json::Value = serde_json::from_str(&fs::read_to_string(&mp).unwrap()).unwrap();

        let mut v = original.clone();
        v["spec"]["num_classes"] = 10.into();
        fs::write(&mp, v.to_string()).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Schema(_))));

        let mut v = original.clone();
        v["version"] = 99.into();
        fs::write(&mp, v.to_string()).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Version { found: 99, .. })));

        fs::write(&mp, "{ not json").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Corrupt { .. })));
    }
}
