//! Seeded procedural shape scenes with in-domain and out-of-distribution
//! appearance ranges, prompt pools, and the on-disk dataset format.
//!
//! There are 12 classes: four shapes times three hue families. Intra-class
//! variance comes from hue jitter, saturation/value, scale and rotation. The
//! OOD domain draws hue offsets and scales from bands that do not overlap the
//! in-domain ranges, so it tests appearance transfer rather than new
//! categories.

mod io;
pub mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, Box};
use crate::tensor::Tensor;

pub use io::{load_dataset, save_dataset, FORMAT_VERSION};
pub use render::{ShapeKind, ShapeParams};

pub const HUE_FAMILIES: [(&str, f64); 3] = [("red", 0.0), ("green", 120.0), ("blue", 240.0)];
pub const NUM_CLASSES: usize = 12;

/// Ground-truth instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class_id: usize,
    #[serde(flatten)]
    pub bbox: Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    In,
    Ood,
}

/// Class id from shape and hue family.
pub fn class_id(shape: ShapeKind, family: usize) -> usize {
    let s = ShapeKind::ALL.iter().position(|k| *k == shape).unwrap();
    s * HUE_FAMILIES.len() + family
}

pub fn class_name(class_id: usize) -> String {
    let shape = ShapeKind::ALL[class_id / HUE_FAMILIES.len()];
    format!("{}-{}", HUE_FAMILIES[class_id % HUE_FAMILIES.len()].0, shape.name())
}

/// A rendered scene: 8-bit RGB pixels, row-major, plus annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    pub seed: u64,
    pub domain: Domain,
    pub size: usize,
    pub pixels: Vec<u8>,
    pub instances: Vec<Instance>,
}

impl Scene {
    /// Pixels as an `[H*W, 3]`-ordered float buffer in `[0,1]`.
    pub fn float_pixels(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }

    /// Patchifies into `[(size/patch)^2, patch*patch*3]`, tokens in
    /// row-major grid order, each patch flattened row-major with RGB
    /// innermost.
    pub fn patches(&self, patch: usize) -> Tensor {
        let g = self.size / patch;
        let per = patch * patch * 3;
        let mut data = Vec::with_capacity(g * g * per);
        for ty in 0..g {
            for tx in 0..g {
                for py in 0..patch {
                    let row = (ty * patch + py) * self.size + tx * patch;
                    let start = row * 3;
                    data.extend(self.pixels[start..start + patch * 3].iter().map(|&p| p as f32 / 255.0));
                }
            }
        }
        Tensor::new(g * g, per, data)
    }

    pub fn crc32(&self) -> u32 {
        crc32fast::hash(&self.pixels)
    }
}

/// Generator parameters. Angles in degrees, scales as fractions of the
/// image side (circumradius * 2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub scale_range: [f64; 2],
    pub ood_scale_range: [f64; 2],
    pub rotation_range: f64,
    /// In-domain hue offsets lie in `[-hue_jitter, hue_jitter]`.
    pub hue_jitter: f64,
    /// OOD hue offsets have magnitude in `[ood_hue_offset, ood_hue_offset + ood_hue_width]`.
    pub ood_hue_offset: f64,
    pub ood_hue_width: f64,
    pub saturation_range: [f64; 2],
    pub value_range: [f64; 2],
    pub noise_amplitude: f64,
    pub background_level: f64,
    pub min_instances: usize,
    pub max_instances: usize,
    pub max_pair_iou: f64,
    /// Smallest admissible box side in pixels.
    pub min_box_px: f64,
    pub train_count: usize,
    pub val_id_count: usize,
    pub val_ood_count: usize,
    pub pool_prompts_per_class: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: NUM_CLASSES,
            image_size: 64,
            scale_range: [0.26, 0.40],
            ood_scale_range: [0.41, 0.49],
            rotation_range: 45.0,
            hue_jitter: 12.0,
            ood_hue_offset: 18.0,
            ood_hue_width: 12.0,
            saturation_range: [0.55, 1.0],
            value_range: [0.6, 1.0],
            noise_amplitude: 0.08,
            background_level: 0.4,
            min_instances: 1,
            max_instances: 6,
            max_pair_iou: 0.4,
            min_box_px: 9.0,
            train_count: 2000,
            val_id_count: 200,
            val_ood_count: 200,
            pool_prompts_per_class: 64,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Schema(format!("num_classes must be {NUM_CLASSES}, got {}", self.num_classes)));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return bad("image_size must be a positive multiple of 8");
        }
        if !(self.scale_range[0] > 0.0 && self.scale_range[0] < self.scale_range[1] && self.scale_range[1] <= 1.0) {
            return bad("scale_range must be increasing within (0,1]");
        }
        if !(self.ood_scale_range[0] < self.ood_scale_range[1] && self.ood_scale_range[1] <= 1.0) {
            return bad("ood_scale_range must be increasing within (0,1]");
        }
        if !self.scale_ranges_disjoint() || !self.hue_ranges_disjoint() {
            return bad("OOD appearance ranges must be disjoint from in-domain ranges");
        }
        if self.ood_hue_offset + self.ood_hue_width >= 60.0 {
            return bad("OOD hue band must stay closer to its own family than to neighbours");
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return bad("instance count range must satisfy 1 <= min <= max");
        }
        if self.train_count == 0 || self.val_id_count == 0 || self.val_ood_count == 0 {
            return bad("split counts must be positive");
        }
        if self.pool_prompts_per_class == 0 {
            return bad("pool_prompts_per_class must be positive");
        }
        Ok(())
    }

    pub fn scale_ranges_disjoint(&self) -> bool {
        self.ood_scale_range[0] > self.scale_range[1] || self.ood_scale_range[1] < self.scale_range[0]
    }

    pub fn hue_ranges_disjoint(&self) -> bool {
        self.ood_hue_offset > self.hue_jitter
    }

    fn scale_range_for(&self, domain: Domain) -> [f64; 2] {
        match domain {
            Domain::In => self.scale_range,
            Domain::Ood => self.ood_scale_range,
        }
    }
}

/// Appearance draw for one instance, exposed for range checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appearance {
    pub class_id: usize,
    pub hue_offset: f64,
    pub scale: f64,
}

/// A scene together with the exact parameters used to draw it.
#[derive(Debug, Clone)]
pub struct DetailedScene {
    pub scene: Scene,
    pub shapes: Vec<ShapeParams>,
    pub appearances: Vec<Appearance>,
}

fn draw_appearance(rng: &mut ChaCha8Rng, spec: &DatasetSpec, domain: Domain, class_id: usize) -> Appearance {
    let hue_offset = match domain {
        Domain::In => rng.gen_range(-spec.hue_jitter..=spec.hue_jitter),
        Domain::Ood => {
            let mag = spec.ood_hue_offset + rng.gen_range(0.0..=spec.ood_hue_width);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        }
    };
    let [lo, hi] = spec.scale_range_for(domain);
    Appearance { class_id, hue_offset, scale: rng.gen_range(lo..=hi) }
}

/// Renders the scene for `seed`. Pure function of `(seed, spec, domain)`.
pub fn gen_scene(seed: u64, scene_id: u64, spec: &DatasetSpec, domain: Domain) -> Scene {
    gen_scene_detailed(seed, scene_id, spec, domain).scene
}

pub fn gen_scene_detailed(seed: u64, scene_id: u64, spec: &DatasetSpec, domain: Domain) -> DetailedScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.image_size;
    let sz = size as f64;

    let cells = 8;
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let noise = render::value_noise(&lattice, cells, size);
    let mut canvas = Vec::with_capacity(size * size * 3);
    for n in &noise {
        let v = spec.background_level + spec.noise_amplitude * n;
        canvas.extend_from_slice(&[v, v, v]);
    }

    let target = rng.gen_range(spec.min_instances..=spec.max_instances);
    let mut shapes: Vec<ShapeParams> = Vec::new();
    let mut appearances = Vec::new();
    let mut instances: Vec<Instance> = Vec::new();
    let mut attempts = 0;
    while instances.len() < target && attempts < 400 {
        attempts += 1;
        let class_id = rng.gen_range(0..NUM_CLASSES);
        let app = draw_appearance(&mut rng, spec, domain, class_id);
        let kind = ShapeKind::ALL[class_id / HUE_FAMILIES.len()];
        let family_hue = HUE_FAMILIES[class_id % HUE_FAMILIES.len()].1;
        let sat = rng.gen_range(spec.saturation_range[0]..=spec.saturation_range[1]);
        let val = rng.gen_range(spec.value_range[0]..=spec.value_range[1]);
        let rotation = rng.gen_range(-spec.rotation_range..=spec.rotation_range).to_radians();
        let radius = 0.5 * app.scale * sz;
        let cx = rng.gen_range(0.0..sz);
        let cy = rng.gen_range(0.0..sz);
        let shape = ShapeParams {
            kind,
            cx,
            cy,
            radius,
            rotation,
            color: render::hsv_to_rgb(family_hue + app.hue_offset, sat, val),
        };
        let (x0, y0, x1, y1) = shape.bounds();
        if x0 < 0.0 || y0 < 0.0 || x1 > sz || y1 > sz {
            continue;
        }
        if (x1 - x0) < spec.min_box_px || (y1 - y0) < spec.min_box_px {
            continue;
        }
        let Ok(bbox) = Box::new((x0 + x1) / (2.0 * sz), (y0 + y1) / (2.0 * sz), (x1 - x0) / sz, (y1 - y0) / sz)
        else {
            continue;
        };
        if instances.iter().any(|other| iou(&other.bbox, &bbox) > spec.max_pair_iou) {
            continue;
        }
        shape.paint(&mut canvas, size);
        shapes.push(shape);
        appearances.push(app);
        instances.push(Instance { class_id, bbox });
    }
    debug_assert!(!instances.is_empty(), "placement failed for seed {seed}");

    let pixels = canvas.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    DetailedScene {
        scene: Scene { scene_id, seed, domain, size, pixels, instances },
        shapes,
        appearances,
    }
}

/// Deterministic 64-bit mixing used to derive per-scene seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(tag)) ^ index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    ValId,
    ValOod,
    PoolTrain,
    PoolValId,
    PoolValOod,
}

impl SplitName {
    pub const ALL: [SplitName; 6] = [
        SplitName::Train,
        SplitName::ValId,
        SplitName::ValOod,
        SplitName::PoolTrain,
        SplitName::PoolValId,
        SplitName::PoolValOod,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::ValId => "val_id",
            SplitName::ValOod => "val_ood",
            SplitName::PoolTrain => "pool_train",
            SplitName::PoolValId => "pool_val_id",
            SplitName::PoolValOod => "pool_val_ood",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            SplitName::ValOod | SplitName::PoolValOod => Domain::Ood,
            _ => Domain::In,
        }
    }

    fn tag(self) -> u64 {
        SplitName::ALL.iter().position(|s| *s == self).unwrap() as u64 + 1
    }

    /// Prompt pool serving a target split.
    pub fn pool_for(self) -> SplitName {
        match self {
            SplitName::Train | SplitName::PoolTrain => SplitName::PoolTrain,
            SplitName::ValId | SplitName::PoolValId => SplitName::PoolValId,
            SplitName::ValOod | SplitName::PoolValOod => SplitName::PoolValOod,
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "id" | "val_id" => Ok(SplitName::ValId),
            "ood" | "val_ood" => Ok(SplitName::ValOod),
            "pool_train" => Ok(SplitName::PoolTrain),
            "pool_val_id" => Ok(SplitName::PoolValId),
            "pool_val_ood" => Ok(SplitName::PoolValOod),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// A visual prompt: a box on a reference scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub scene_id: u64,
    pub class_id: usize,
    pub bbox: Box,
}

/// Per-class prompt lists drawn from a pool split's annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool {
    pub split: SplitName,
    pub by_class: Vec<Vec<PromptEntry>>,
}

impl PromptPool {
    pub fn from_scenes(split: SplitName, scenes: &[Scene]) -> Self {
        let mut by_class = vec![Vec::new(); NUM_CLASSES];
        for s in scenes {
            for inst in &s.instances {
                by_class[inst.class_id].push(PromptEntry { scene_id: s.scene_id, class_id: inst.class_id, bbox: inst.bbox });
            }
        }
        Self { split, by_class }
    }

    pub fn min_per_class(&self) -> usize {
        self.by_class.iter().map(Vec::len).min().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub name: SplitName,
    pub scenes: Vec<Scene>,
}

impl Split {
    pub fn scene(&self, scene_id: u64) -> Option<&Scene> {
        // scene ids are contiguous within a split
        let first = self.scenes.first()?.scene_id;
        self.scenes.get(scene_id.checked_sub(first)? as usize).filter(|s| s.scene_id == scene_id)
    }
}

/// All splits and their prompt pools.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub master_seed: u64,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &Split {
        self.splits.iter().find(|s| s.name == name).expect("all splits are present")
    }

    pub fn pool(&self, target: SplitName) -> PromptPool {
        let name = target.pool_for();
        PromptPool::from_scenes(name, &self.split(name).scenes)
    }

    /// CRC32 over all scene checksums and annotations, in split order.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for split in &self.splits {
            for s in &split.scenes {
                h.update(&s.scene_id.to_le_bytes());
                h.update(&s.crc32().to_le_bytes());
                for i in &s.instances {
                    h.update(&(i.class_id as u64).to_le_bytes());
                    for v in i.bbox.as_array() {
                        h.update(&v.to_le_bytes());
                    }
                }
            }
        }
        h.finalize()
    }
}

/// Generates every split from `master_seed`.
///
/// Scene ids are globally unique and contiguous per split. Pool splits keep
/// adding scenes until each class has at least `pool_prompts_per_class`
/// prompts.
pub fn build_splits(spec: &DatasetSpec, master_seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut next_id = 0u64;
    let mut splits = Vec::new();
    for name in SplitName::ALL {
        let fixed = match name {
            SplitName::Train => Some(spec.train_count),
            SplitName::ValId => Some(spec.val_id_count),
            SplitName::ValOod => Some(spec.val_ood_count),
            _ => None,
        };
        let mut scenes = Vec::new();
        match fixed {
            Some(count) => {
                use rayon::prelude::*;
                let base = next_id;
                scenes = (0..count as u64)
                    .into_par_iter()
                    .map(|i| gen_scene(derive_seed(master_seed, name.tag(), i), base + i, spec, name.domain()))
                    .collect();
            }
            None => {
                let mut counts = [0usize; NUM_CLASSES];
                let mut i = 0u64;
                while counts.iter().any(|&c| c < spec.pool_prompts_per_class) {
                    let s = gen_scene(derive_seed(master_seed, name.tag(), i), next_id + i, spec, name.domain());
                    for inst in &s.instances {
                        counts[inst.class_id] += 1;
                    }
                    scenes.push(s);
                    i += 1;
                }
            }
        }
        next_id += scenes.len() as u64;
        splits.push(Split { name, scenes });
    }
    Ok(Dataset { spec: spec.clone(), master_seed, splits })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec { train_count: 60, val_id_count: 20, val_ood_count: 20, pool_prompts_per_class: 8, ..Default::default() }
    }

    #[test]
    fn scenes_are_deterministic() {
        let spec = DatasetSpec::default();
        let a = gen_scene(42, 0, &spec, Domain::In);
        let b = gen_scene(42, 0, &spec, Domain::In);
        assert_eq!(a, b);
        assert_ne!(a.pixels, gen_scene(43, 0, &spec, Domain::In).pixels);
    }

    #[test]
    fn domains_draw_from_their_ranges() {
        let spec = DatasetSpec::default();
        for seed in 0..200 {
            for domain in [Domain::In, Domain::Ood] {
                let d = gen_scene_detailed(seed, 0, &spec, domain);
                assert!(!d.scene.instances.is_empty() && d.scene.instances.len() <= spec.max_instances);
                for a in &d.appearances {
                    let mag = a.hue_offset.abs();
                    match domain {
                        Domain::In => {
                            assert!(mag <= spec.hue_jitter);
                            assert!(a.scale >= spec.scale_range[0] && a.scale <= spec.scale_range[1]);
                        }
                        Domain::Ood => {
                            assert!(mag >= spec.ood_hue_offset && mag <= spec.ood_hue_offset + spec.ood_hue_width);
                            assert!(a.scale >= spec.ood_scale_range[0] && a.scale <= spec.ood_scale_range[1]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pairwise_overlap_bounded_and_boxes_inside() {
        let spec = DatasetSpec::default();
        for seed in 0..300 {
            let s = gen_scene(seed, 0, &spec, if seed % 2 == 0 { Domain::In } else { Domain::Ood });
            for (i, a) in s.instances.iter().enumerate() {
                let c = a.bbox.to_corners();
                assert!(c.x0 >= 0.0 && c.y0 >= 0.0 && c.x1 <= 1.0 && c.y1 <= 1.0);
                for b in &s.instances[i + 1..] {
                    assert!(iou(&a.bbox, &b.bbox) <= spec.max_pair_iou);
                }
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_pools_filled() {
        let ds = build_splits(&small_spec(), 7).unwrap();
        let mut ids: Vec<u64> = ds.splits.iter().flat_map(|s| s.scenes.iter().map(|x| x.scene_id)).collect();
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
        for target in [SplitName::Train, SplitName::ValId, SplitName::ValOod] {
            let pool = ds.pool(target);
            assert!(pool.min_per_class() >= 8);
            let target_ids: Vec<u64> = ds.split(target).scenes.iter().map(|s| s.scene_id).collect();
            for entries in &pool.by_class {
                assert!(entries.iter().all(|e| !target_ids.contains(&e.scene_id)));
            }
        }
        let s = ds.split(SplitName::ValId);
        let probe = &s.scenes[5];
        assert_eq!(s.scene(probe.scene_id), Some(probe));
    }

    #[test]
    fn ood_ranges_disjoint_by_default() {
        let spec = DatasetSpec::default();
        spec.validate().unwrap();
        assert!(spec.scale_ranges_disjoint() && spec.hue_ranges_disjoint());
        let overlapping = DatasetSpec { ood_hue_offset: 5.0, ..spec };
        assert!(overlapping.validate().is_err());
    }

    #[test]
    fn patch_layout() {
        let spec = DatasetSpec::default();
        let s = gen_scene(3, 0, &spec, Domain::In);
        let p = s.patches(8);
        assert_eq!(p.shape(), (64, 192));
        // token (row 1, col 2), pixel (1, 3) within patch, green channel
        let (ty, tx, py, px, ch) = (1, 2, 1, 3, 1);
        let expect = s.pixels[((ty * 8 + py) * 64 + tx * 8 + px) * 3 + ch] as f32 / 255.0;
        assert_eq!(p.get(ty * 8 + tx, (py * 8 + px) * 3 + ch), expect);
    }
}
