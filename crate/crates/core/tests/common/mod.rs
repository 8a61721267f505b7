//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use grqo::grqo::LossMode;
use grqo::model::{Model, ModelConfig};
use grqo::synthdata::{build_splits, Dataset, DatasetSpec, Scene, SplitName};
use grqo::trainer::{BatchPrompts, HeldTerms, Mode, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// C=8, N_q=4, one block of each kind.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        dim: 8,
        heads: 2,
        ffn_hidden: 16,
        encoder_layers: 1,
        fusion_layers: 1,
        decoder_layers: 1,
        num_queries: 4,
        ..Default::default()
    }
}

/// A handful of scenes with at most three objects each.
pub fn tiny_data() -> Dataset {
    let spec = DatasetSpec { train_count: 4, val_id_count: 2, val_ood_count: 2, pool_prompts_per_class: 2, max_instances: 3, ..Default::default() };
    build_splits(&spec, 5).unwrap()
}

/// Small corpus for end-to-end runs of the default architecture.
pub fn small_spec() -> DatasetSpec {
    DatasetSpec { train_count: 16, val_id_count: 4, val_ood_count: 4, pool_prompts_per_class: 2, ..Default::default() }
}

/// Two short epochs on [`small_spec`] data with cheap evaluation.
pub fn small_config(mode: Mode) -> TrainConfig {
    TrainConfig { mode, epochs: 2, batch_size: 4, eval_prompts_per_class: 2, ..Default::default() }
}

const H: f64 = 3e-3;

fn loss_at(t: &Trainer<'_>, batch: &[&Scene], bp: &BatchPrompts, held: &[HeldTerms]) -> f64 {
    t.loss_and_grads_held(batch, bp, Some(held)).unwrap().0.total
}

/// Relative error allowed for the full gradient and each module.
pub const MODULE_TOL: f64 = 1e-3;
/// Relative error allowed for single tensors, whose directions sit closer to
/// f32 rounding.
pub const TENSOR_TOL: f64 = 5e-2;

pub struct Outcome {
    /// Worst error over the full gradient and the per-module directions.
    pub modules: f64,
    /// Worst error over single tensors with a non-negligible gradient.
    pub tensors: f64,
}

pub fn gradcheck(mode: Mode, loss_mode: LossMode) -> Outcome {
    let data = tiny_data();
    let cfg = TrainConfig {
        mode,
        epochs: 2,
        sft_warmup_epochs: 0,
        batch_size: 2,
        loss_mode,
        model: tiny_model(),
        ..Default::default()
    };
    let mut t = Trainer::new(cfg, &data).unwrap();
    if mode == Mode::Grqo {
        let other = Model::new(tiny_model(), &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        // a nearby reference so the KL term is active but moderate
        let mut reference = t.model.params.clone();
        for i in 0..reference.len() {
            let src = other.params.by_index(i).data().to_vec();
            for (v, o) in reference.by_index_mut(i).data_mut().iter_mut().zip(src) {
                *v = 0.9 * *v + 0.1 * o;
            }
        }
        t.set_reference(reference).unwrap();
    }
    let train = &data.split(SplitName::Train).scenes;
    let batch: Vec<&Scene> = train.iter().take(2).collect();
    let bp = t.batch_prompts(&batch).unwrap();
    let (_, grads, held) = t.loss_and_grads_held(&batch, &bp, None).unwrap();
    let n = grads.grads.len();
    let total_norm = grads.norm();

    // Directional derivatives along gradient blocks: each equals the norm
    // of its block, which keeps the signal well above f32 rounding.
    let block = |keep: &dyn Fn(&str) -> bool| -> Vec<Option<Vec<f32>>> {
        (0..n)
            .map(|i| grads.grads[i].as_ref().filter(|_| keep(t.model.params.name(i))).map(|g| g.data().to_vec()))
            .collect()
    };
    let mut modules = vec![("all".to_string(), block(&|_| true))];
    for m in ["patch", "encoder.", "prompt.", "fusion.", "select.", "decoder.", "anchors"] {
        modules.push((m.to_string(), block(&|name| name.starts_with(m))));
    }
    let mut tensors = Vec::new();
    for i in 0..n {
        let name = t.model.params.name(i).to_string();
        tensors.push((name.clone(), block(&|x| x == name)));
    }

    let base = t.model.params.clone();
    let mut directional = |name: &str, dir: &[Option<Vec<f32>>], tol: f64| -> Option<f64> {
        let sq: f64 = dir.iter().flatten().flat_map(|v| v.iter()).map(|&x| (x as f64).powi(2)).sum();
        let norm = sq.sqrt();
        // blocks whose true gradient vanishes (key biases) carry only noise
        if norm < 1e-3 * total_norm {
            return None;
        }
        let mut at = |eps: f64| {
            let mut p = base.clone();
            for (i, d) in dir.iter().enumerate() {
                if let Some(d) = d {
                    for (v, &u) in p.by_index_mut(i).data_mut().iter_mut().zip(d) {
                        *v += (eps * u as f64 / norm) as f32;
                    }
                }
            }
            t.model.params = p;
            loss_at(&t, &batch, &bp, &held)
        };
        let mut central = |h: f64| (at(h) - at(-h)) / (2.0 * h);
        // Richardson extrapolation cancels the O(h^2) term
        let (d1, d2) = (central(H), central(H / 2.0));
        let numeric = (4.0 * d2 - d1) / 3.0;
        let rel = (norm - numeric).abs() / norm.max(numeric.abs());
        if rel > tol {
            eprintln!("{name}: analytic {norm:.6e} numeric {numeric:.6e} rel {rel:.2e}");
        }
        Some(rel)
    };
    let worst = |v: Vec<Option<f64>>| v.into_iter().flatten().fold(0.0, f64::max);
    let m = worst(modules.iter().map(|(name, d)| directional(name, d, MODULE_TOL)).collect());
    let tns = worst(tensors.iter().map(|(name, d)| directional(name, d, TENSOR_TOL)).collect());
    t.model.params = base;
    Outcome { modules: m, tensors: tns }
}

