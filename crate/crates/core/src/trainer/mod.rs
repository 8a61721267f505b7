//! Supervised and GRQO training loops, the frozen reference model, and run
//! bookkeeping.
//!
//! One step: the classes present in the batch get `M` freshly sampled
//! prompts each; the prompt set is encoded once on its own graph; every
//! scene then runs on a separate graph (in parallel) with the pooled prompts
//! as a leaf, and the per-scene gradients for those prompts are pushed back
//! through the prompt graph together with the contrastive loss.
//!
//! Randomness comes from independent streams derived from the run seed:
//! parameter init, data order (per epoch) and prompt sampling. A GRQO run
//! and an SFT run with the same seed are therefore identical through the
//! warmup epochs.

mod checkpoint;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, TensorEntry, CHECKPOINT_VERSION, MAGIC};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::evalkit::{map_over, EvalOptions};
use crate::grqo::{self, AdvantageMode, LossMode};
use crate::model::{self, boxes_of, Model, ModelConfig};
use crate::nn::{Graph, ParamGrads, ParamStore};
use crate::objective::{self, CostMatrix, CostWeights, FocalParams};
use crate::optim::{clip_grad_norm, cosine_lr, Adam};
use crate::synthdata::{derive_seed, Dataset, Instance, PromptEntry, PromptPool, Scene, SplitName};
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;
const PROMPT_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sft,
    Grqo,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(Mode::Sft),
            "grqo" => Ok(Mode::Grqo),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Everything a run needs. Unknown JSON fields are rejected; missing ones
/// take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    /// Leading supervised epochs in GRQO mode; the reference model is the
    /// snapshot taken when they end.
    pub sft_warmup_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    /// Prompts sampled per class per batch (`M`).
    pub prompts_per_class: usize,
    pub weights: CostWeights,
    pub focal: FocalParams,
    pub contrastive_weight: f64,
    /// Scale of the supervised detection losses during GRQO epochs.
    pub sft_loss_scale: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Cost weights for the reward's matching cost; `None` uses `weights`.
    /// Zeroing terms gives classification-only or localization-only rewards.
    pub reward_weights: Option<CostWeights>,
    pub loss_mode: LossMode,
    pub advantage_mode: AdvantageMode,
    pub layerwise: bool,
    pub objectness_floor: f64,
    /// Re-snapshot the reference every `n` GRQO epochs; 0 never does.
    pub reference_refresh_epochs: usize,
    pub seed: u64,
    /// Truncates each epoch to this many steps.
    pub steps_per_epoch: Option<usize>,
    pub eval_prompts_per_class: usize,
    pub eval_seed: u64,
    pub eval_max_images: Option<usize>,
    /// Skip the per-epoch evaluation entirely.
    pub eval: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Grqo,
            epochs: 6,
            sft_warmup_epochs: 1,
            batch_size: 8,
            lr: 1e-3,
            grad_clip: 1.0,
            prompts_per_class: 1,
            weights: CostWeights::default(),
            focal: FocalParams::default(),
            contrastive_weight: 1.0,
            sft_loss_scale: 1.0,
            alpha: 1e3,
            beta: 0.04,
            reward_weights: None,
            loss_mode: LossMode::ScoreWeighted,
            advantage_mode: AdvantageMode::Relative,
            layerwise: true,
            objectness_floor: 0.5,
            reference_refresh_epochs: 0,
            seed: 0,
            steps_per_epoch: None,
            eval_prompts_per_class: 64,
            eval_seed: 0,
            eval_max_images: None,
            eval: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn sft() -> Self {
        Self { mode: Mode::Sft, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        self.weights.validate()?;
        if let Some(w) = &self.reward_weights {
            w.validate()?;
        }
        if self.epochs == 0 || self.batch_size == 0 || self.prompts_per_class == 0 || self.eval_prompts_per_class == 0 {
            return bad("epochs, batch_size and prompt counts must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.grad_clip < 0.0 {
            return bad(format!("invalid lr {} or grad_clip {}", self.lr, self.grad_clip));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("contrastive_weight", self.contrastive_weight),
            ("sft_loss_scale", self.sft_loss_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.objectness_floor) {
            return bad(format!("objectness_floor {} outside [0,1]", self.objectness_floor));
        }
        if self.mode == Mode::Grqo && self.sft_warmup_epochs >= self.epochs {
            return bad(format!("warmup {} leaves no GRQO epochs of {}", self.sft_warmup_epochs, self.epochs));
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive".into());
        }
        Ok(())
    }

    /// Parses JSON, applying defaults and validation.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn is_grqo_epoch(&self, epoch: usize) -> bool {
        self.mode == Mode::Grqo && epoch >= self.sft_warmup_epochs
    }
}

/// Loss components of one step (already weighted as they enter the total).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub total: f64,
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
    pub contrastive: f64,
    /// GRQO reward part (without the KL part).
    pub grqo_reward: f64,
    /// Mean unweighted per-query KL.
    pub kl: f64,
    pub grad_norm: f64,
}

impl StepStats {
    fn add(&mut self, o: &StepStats) {
        self.total += o.total;
        self.focal += o.focal;
        self.l1 += o.l1;
        self.giou += o.giou;
        self.contrastive += o.contrastive;
        self.grqo_reward += o.grqo_reward;
        self.kl += o.kl;
        self.grad_norm += o.grad_norm;
    }

    fn scaled(mut self, s: f64) -> Self {
        for v in [
            &mut self.total,
            &mut self.focal,
            &mut self.l1,
            &mut self.giou,
            &mut self.contrastive,
            &mut self.grqo_reward,
            &mut self.kl,
            &mut self.grad_norm,
        ] {
            *v *= s;
        }
        self
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.focal, self.l1, self.giou, self.contrastive, self.grqo_reward, self.kl, self.grad_norm]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub phase: Mode,
    pub lr: f64,
    /// Means over the epoch's steps.
    pub loss: StepStats,
    pub val_id_ap50: Option<f64>,
    pub val_id_map: Option<f64>,
    pub val_ood_ap50: Option<f64>,
    pub val_ood_map: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "step,epoch,phase,lr,loss,focal,l1,giou,contrastive,grqo_reward,kl,grad_norm,val_id_ap50,val_id_map,val_ood_ap50,val_ood_map";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let l = &self.loss;
        format!(
            "{},{},{},{:.8},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            self.step,
            self.epoch,
            if self.phase == Mode::Sft { "sft" } else { "grqo" },
            self.lr,
            l.total,
            l.focal,
            l.l1,
            l.giou,
            l.contrastive,
            l.grqo_reward,
            l.kl,
            l.grad_norm,
            opt(self.val_id_ap50),
            opt(self.val_id_map),
            opt(self.val_ood_ap50),
            opt(self.val_ood_map)
        )
    }
}

/// Prompts drawn for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPrompts {
    /// Classes present in the batch, ascending; column order of the logits.
    pub classes: Vec<usize>,
    pub entries: Vec<Vec<PromptEntry>>,
}

/// Values the gradient treats as constants for one scene: the selected
/// query indices, the winning prompt per token, the per-layer matching, the alpha mask, the advantages
/// (score-weighted mode) and the per-layer reward statistics (direct mode).
/// Holding them fixed makes the total loss a smooth function whose true
/// gradient is the computed one, which is what finite-difference checks need.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeldTerms {
    pub indices: Vec<usize>,
    pub winners: Vec<usize>,
    pub assignments: Vec<objective::Assignment>,
    pub alpha: Vec<f64>,
    pub advantages: Vec<f64>,
    pub group_stats: Vec<Option<(f64, f64)>>,
}

/// Result of one scene's graph.
struct SceneResult {
    grads: ParamGrads,
    prompt_grad: Option<Tensor>,
    stats: StepStats,
    held: HeldTerms,
}

/// Frozen reference parameters and their fingerprint.
#[derive(Debug, Clone)]
pub struct Reference {
    pub params: ParamStore,
    pub fingerprint: u32,
}

impl Reference {
    pub fn new(params: ParamStore) -> Self {
        let fingerprint = params.fingerprint();
        Self { params, fingerprint }
    }

    fn verify(&self) -> Result<()> {
        let now = self.params.fingerprint();
        if now != self.fingerprint {
            return Err(Error::Diverged(format!("reference parameters changed ({:08x} -> {now:08x})", self.fingerprint)));
        }
        Ok(())
    }
}

/// Training state. Cloning forks a run (used to share warmup epochs).
#[derive(Clone)]
pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub model: Model,
    pub reference: Option<Reference>,
    pub history: Vec<EpochMetrics>,
    pub step: u64,
    pub epoch: usize,
    data: &'d Dataset,
    pool: PromptPool,
    opt: Adam,
    prompt_rng: ChaCha8Rng,
    best_ap50: Option<f64>,
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, data: &'d Dataset) -> Result<Self> {
        config.validate()?;
        if config.model.image_size != data.spec.image_size {
            return Err(Error::Config(format!(
                "model image_size {} differs from dataset {}",
                config.model.image_size, data.spec.image_size
            )));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, INIT_STREAM, 0));
        let model = Model::new(config.model.clone(), &mut init_rng)?;
        let opt = Adam::new(&model.params);
        let prompt_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, PROMPT_STREAM, 0));
        Ok(Self {
            pool: data.pool(SplitName::Train),
            model,
            reference: None,
            history: Vec::new(),
            step: 0,
            epoch: 0,
            data,
            opt,
            prompt_rng,
            best_ap50: None,
            config,
        })
    }

    /// Continues this run's state under a different configuration (same
    /// architecture, seed and schedule length).
    pub fn fork(&self, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.model != self.config.model
            || config.seed != self.config.seed
            || config.epochs != self.config.epochs
            || config.batch_size != self.config.batch_size
            || config.steps_per_epoch != self.config.steps_per_epoch
        {
            return Err(Error::Config("forked run must keep architecture, seed and schedule".into()));
        }
        let mut t = self.clone();
        t.config = config;
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> usize {
        let full = self.data.split(SplitName::Train).scenes.len().div_ceil(self.config.batch_size);
        self.config.steps_per_epoch.map_or(full, |s| s.min(full))
    }

    pub fn total_steps(&self) -> u64 {
        (self.steps_per_epoch() * self.config.epochs) as u64
    }

    /// Takes the current parameters as the frozen reference.
    pub fn snapshot_reference(&mut self) -> &Reference {
        self.reference = Some(Reference::new(self.model.params.clone()));
        self.reference.as_ref().unwrap()
    }

    pub fn set_reference(&mut self, params: ParamStore) -> Result<()> {
        Model::check_layout(&self.model.config, &params)?;
        self.reference = Some(Reference::new(params));
        Ok(())
    }

    /// Scene order for an epoch; independent of everything but seed and epoch.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let n = self.data.split(SplitName::Train).scenes.len();
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, ORDER_STREAM, epoch as u64));
        idx.shuffle(&mut rng);
        idx
    }

    /// Whether the current epoch trains with the GRQO terms.
    pub fn grqo_active(&self) -> bool {
        self.config.is_grqo_epoch(self.epoch)
    }

    /// Samples the prompts for `batch`: `M` draws for every class present.
    pub fn batch_prompts(&mut self, batch: &[&Scene]) -> Result<BatchPrompts> {
        let mut classes: Vec<usize> = batch.iter().flat_map(|s| s.instances.iter().map(|i| i.class_id)).collect();
        classes.sort_unstable();
        classes.dedup();
        let entries = model::sample_prompt_entries(&self.pool, &classes, self.config.prompts_per_class, &mut self.prompt_rng)?;
        Ok(BatchPrompts { classes, entries })
    }

    /// Total loss and parameter gradients for `batch`, without updating.
    pub fn loss_and_grads(&self, batch: &[&Scene], bp: &BatchPrompts) -> Result<(StepStats, ParamGrads)> {
        let (stats, grads, _) = self.loss_and_grads_held(batch, bp, None)?;
        Ok((stats, grads))
    }

    /// Like [`Trainer::loss_and_grads`], optionally reusing the constants of
    /// an earlier evaluation (one entry per scene); returns the constants used.
    pub fn loss_and_grads_held(
        &self,
        batch: &[&Scene],
        bp: &BatchPrompts,
        held: Option<&[HeldTerms]>,
    ) -> Result<(StepStats, ParamGrads, Vec<HeldTerms>)> {
        if held.is_some_and(|h| h.len() != batch.len()) {
            return Err(Error::Config("held terms must cover every scene of the batch".into()));
        }
        let grqo_on = self.grqo_active();
        if grqo_on && self.reference.is_none() {
            return Err(Error::Config("GRQO step without a reference model".into()));
        }
        let cfg = &self.config;
        let mcfg = &self.model.config;
        let classes = &bp.classes;
        let pool_split = self.data.split(SplitName::PoolTrain);
        let refs = model::resolve(pool_split, &bp.entries)?;

        let mut pg = Graph::new(&self.model.params);
        let prompts = model::encode_prompt_set(&mut pg, mcfg, &refs)?;
        let all_anchors = pg.p("anchors");
        let anchors = pg.gather_rows(all_anchors, classes);
        let contra = objective::tape::contrastive_loss(&mut pg, prompts, anchors, mcfg.contrastive_temperature as f32);
        let prompt_values = pg.value(prompts).clone();

        let ref_prompts = match (&self.reference, grqo_on) {
            (Some(r), true) => {
                let mut rg = Graph::frozen(&r.params);
                let v = model::encode_prompt_set(&mut rg, mcfg, &refs)?;
                Some(rg.value(v).clone())
            }
            _ => None,
        };

        let mut column = vec![usize::MAX; mcfg.num_classes];
        for (k, &c) in classes.iter().enumerate() {
            column[c] = k;
        }
        let num_gt = batch.iter().map(|s| s.instances.len()).sum::<usize>().max(1) as f32;
        let ctx = SceneContext {
            cfg,
            params: &self.model.params,
            reference: if grqo_on { self.reference.as_ref() } else { None },
            prompts: &prompt_values,
            ref_prompts: ref_prompts.as_ref(),
            column: &column,
            num_gt,
            batch_len: batch.len(),
        };
        let results: Vec<SceneResult> = batch
            .par_iter()
            .enumerate()
            .map(|(i, s)| ctx.scene_step(s, held.map(|h| &h[i])))
            .collect::<Result<_>>()?;

        let mut grads = ParamGrads::empty(self.model.params.len());
        let mut prompt_grad = Tensor::zeros(prompt_values.rows(), prompt_values.cols());
        let mut stats = StepStats::default();
        for r in &results {
            grads.accumulate(&r.grads);
            if let Some(g) = &r.prompt_grad {
                prompt_grad.add_assign(g);
            }
            stats.add(&r.stats);
        }
        let cw = cfg.contrastive_weight as f32;
        let pgrads = pg.backward_seeded(&[(prompts, prompt_grad), (contra, Tensor::scalar(cw))]);
        grads.accumulate(&pg.param_grads(&pgrads));
        let contra_value = pg.value(contra).item() as f64 * cfg.contrastive_weight;
        stats.contrastive = contra_value;
        stats.total += contra_value;
        let held = results.into_iter().map(|r| r.held).collect();
        Ok((stats, grads, held))
    }

    /// One optimization step on `batch`.
    pub fn train_step(&mut self, batch: &[&Scene]) -> Result<StepStats> {
        let bp = self.batch_prompts(batch)?;
        let (mut stats, mut grads) = self.loss_and_grads(batch, &bp)?;
        if !stats.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss or gradient at step {}", self.step)));
        }
        stats.grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        let lr = cosine_lr(self.config.lr as f32, self.step, self.total_steps());
        self.opt.update(&mut self.model.params, &grads, lr);
        self.step += 1;
        Ok(stats)
    }

    /// Runs one epoch (taking the reference snapshot when GRQO starts).
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        if self.grqo_active() {
            let warmup_end = self.epoch == self.config.sft_warmup_epochs;
            let refresh = self.config.reference_refresh_epochs;
            let due = refresh > 0 && self.epoch > self.config.sft_warmup_epochs && (self.epoch - self.config.sft_warmup_epochs).is_multiple_of(refresh);
            if self.reference.is_none() || (warmup_end && self.config.sft_warmup_epochs > 0) || due {
                self.snapshot_reference();
            }
        }
        let order = self.epoch_order(self.epoch);
        let steps = self.steps_per_epoch();
        let train = &self.data.split(SplitName::Train).scenes;
        let mut sum = StepStats::default();
        for s in 0..steps {
            let idx = &order[s * self.config.batch_size..((s + 1) * self.config.batch_size).min(order.len())];
            let batch: Vec<&Scene> = idx.iter().map(|&i| &train[i]).collect();
            let st = self.train_step(&batch)?;
            sum.add(&st);
        }
        if let Some(r) = &self.reference {
            r.verify()?;
        }
        let phase = if self.grqo_active() { Mode::Grqo } else { Mode::Sft };
        let mut m = EpochMetrics {
            epoch: self.epoch,
            step: self.step,
            phase,
            lr: cosine_lr(self.config.lr as f32, self.step, self.total_steps()) as f64,
            loss: sum.scaled(1.0 / steps as f64),
            val_id_ap50: None,
            val_id_map: None,
            val_ood_ap50: None,
            val_ood_map: None,
        };
        if self.config.eval {
            let opts = EvalOptions {
                run_id: String::new(),
                prompts_per_class: self.config.eval_prompts_per_class,
                seed: self.config.eval_seed,
                max_images: self.config.eval_max_images,
                ..Default::default()
            };
            let id = map_over(&self.model, self.data, SplitName::ValId, &opts)?;
            let ood = map_over(&self.model, self.data, SplitName::ValOod, &opts)?;
            m.val_id_ap50 = Some(id.ap50);
            m.val_id_map = Some(id.map);
            m.val_ood_ap50 = Some(ood.ap50);
            m.val_ood_map = Some(ood.map);
        }
        self.history.push(m.clone());
        self.epoch += 1;
        Ok(m)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.config.clone(),
            train: Some(self.config.clone()),
            step: self.step,
            epoch: self.epoch,
            history: self.history.clone(),
            params: self.model.params.clone(),
        }
    }

    /// Runs the remaining epochs, writing artifacts into `out` if given.
    pub fn run(&mut self, out: Option<&Path>) -> Result<()> {
        let run_dir = out.map(RunDir::create).transpose()?;
        if let Some(d) = &run_dir {
            d.write_config(&self.config)?;
            d.write_metrics(&self.history)?;
        }
        while self.epoch < self.config.epochs {
            let had_reference = self.reference.as_ref().map(|r| r.fingerprint);
            let m = self.run_epoch()?;
            let Some(d) = &run_dir else { continue };
            if let Some(r) = &self.reference {
                if had_reference != Some(r.fingerprint) {
                    let mut c = self.checkpoint();
                    c.params = r.params.clone();
                    save_checkpoint(&d.path.join("reference.ckpt"), &c)?;
                }
            }
            d.write_metrics(&self.history)?;
            let ckpt = self.checkpoint();
            save_checkpoint(&d.path.join("last.ckpt"), &ckpt)?;
            let score = m.val_id_ap50.unwrap_or(f64::NEG_INFINITY);
            if self.best_ap50.is_none_or(|b| score > b) {
                self.best_ap50 = Some(score);
                save_checkpoint(&d.path.join("best.ckpt"), &ckpt)?;
            }
        }
        Ok(())
    }
}

struct SceneContext<'a> {
    cfg: &'a TrainConfig,
    params: &'a ParamStore,
    reference: Option<&'a Reference>,
    prompts: &'a Tensor,
    ref_prompts: Option<&'a Tensor>,
    column: &'a [usize],
    num_gt: f32,
    batch_len: usize,
}

impl SceneContext<'_> {
    fn scene_step(&self, scene: &Scene, held: Option<&HeldTerms>) -> Result<SceneResult> {
        let cfg = self.cfg;
        let mcfg = &cfg.model;
        let mut g = Graph::new(self.params);
        let p = g.param(self.prompts.clone());
        let fixed = held.map(|h| model::Fixed { indices: &h.indices, winners: &h.winners });
        let out = model::forward_at(&mut g, mcfg, scene, p, fixed)?;
        let gts: Vec<Instance> =
            scene.instances.iter().map(|i| Instance { class_id: self.column[i.class_id], bbox: i.bbox }).collect();

        let mut stats = StepStats::default();
        let mut terms: Vec<Var> = Vec::new();
        let mut layer_costs: Vec<CostMatrix> = Vec::new();
        let mut used = HeldTerms { indices: out.indices.clone(), winners: out.winners.clone(), ..Default::default() };
        let w = cfg.weights;
        let scale = if self.reference.is_some() { cfg.sft_loss_scale } else { 1.0 };
        for (k, layer) in out.layers.iter().enumerate() {
            let assignment = if gts.is_empty() {
                objective::Assignment { pairs: Vec::new(), total_cost: 0.0 }
            } else {
                let boxes = boxes_of(g.value(layer.boxes));
                let costs = objective::cost_matrix(g.value(layer.logits), &boxes, &gts, w, cfg.focal)?;
                let a = match held {
                    Some(h) => h.assignments.get(k).cloned().ok_or_else(|| Error::Config("held terms lack a matching per layer".into()))?,
                    None => objective::hungarian(&costs)?,
                };
                layer_costs.push(costs);
                a
            };
            used.assignments.push(assignment.clone());
            let l = objective::tape::detection_losses(&mut g, layer.logits, layer.boxes, &gts, &assignment, cfg.focal, self.num_gt);
            for (v, lambda, slot) in [
                (l.focal, w.lambda_focal, &mut stats.focal),
                (l.l1, w.lambda_l1, &mut stats.l1),
                (l.giou, w.lambda_giou, &mut stats.giou),
            ] {
                let k = lambda * scale;
                *slot += g.value(v).item() as f64 * k;
                terms.push(g.scale(v, k as f32));
            }
        }

        if let (Some(reference), Some(ref_prompts)) = (self.reference, self.ref_prompts) {
            let lp = grqo::tape::objectness_log_probs(&mut g, out.objectness);
            let probs: Vec<f64> = g.value(lp).data().iter().map(|&v| (v as f64).exp()).collect();
            let alpha = match held {
                Some(h) => h.alpha.clone(),
                None => grqo::alpha_mask(&probs, cfg.alpha, cfg.objectness_floor),
            };
            used.alpha = alpha.clone();

            let mut rg = Graph::frozen(&reference.params);
            let rp = rg.constant(ref_prompts.clone());
            let ro = model::objectness_at(&mut rg, mcfg, scene, rp, &out.indices)?;
            let ref_lp = rg.log_softmax_rows(ro);
            let ref_lp = rg.value(ref_lp).clone();
            let kl = grqo::tape::kl_k3(&mut g, lp, &ref_lp);

            let reward = if gts.is_empty() {
                grqo::tape::RewardTerm::None
            } else {
                self.reward_term(&mut g, &out, &gts, &layer_costs, held, &mut used)?
            };
            let loss = grqo::tape::grqo_loss(&mut g, reward, &alpha, lp, kl, cfg.beta);
            let loss = g.scale(loss, 1.0 / self.batch_len as f32);
            let kl_vals = g.value(kl).data();
            let kl_mean = kl_vals.iter().map(|&v| v as f64).sum::<f64>() / kl_vals.len() as f64;
            let total = g.value(loss).item() as f64;
            stats.kl = kl_mean / self.batch_len as f64;
            stats.grqo_reward = total - cfg.beta * kl_mean / self.batch_len as f64;
            terms.push(loss);
        }

        let root = if terms.len() == 1 {
            terms[0]
        } else {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = g.add(acc, t);
            }
            acc
        };
        stats.total = g.value(root).item() as f64;
        let mut grads = g.backward(root);
        Ok(SceneResult { grads: g.param_grads(&grads), prompt_grad: grads.take(p), stats, held: used })
    }

    fn reward_term(
        &self,
        g: &mut Graph<'_>,
        out: &model::ForwardOutput,
        gts: &[Instance],
        layer_costs: &[CostMatrix],
        held: Option<&HeldTerms>,
        used: &mut HeldTerms,
    ) -> Result<grqo::tape::RewardTerm> {
        let cfg = self.cfg;
        let layers: Vec<usize> =
            if cfg.layerwise { (0..out.layers.len()).collect() } else { vec![out.layers.len() - 1] };
        match cfg.loss_mode {
            LossMode::ScoreWeighted => {
                if let Some(h) = held {
                    used.advantages = h.advantages.clone();
                    return Ok(grqo::tape::RewardTerm::ScoreWeighted(h.advantages.clone()));
                }
                let n = layer_costs[0].num_queries();
                let mut adv = vec![0.0; n];
                for &l in &layers {
                    let r = match &cfg.reward_weights {
                        Some(rw) => {
                            let layer = out.layers[l];
                            let boxes = boxes_of(g.value(layer.boxes));
                            grqo::query_rewards(&objective::cost_matrix(g.value(layer.logits), &boxes, gts, *rw, cfg.focal)?)?
                        }
                        None => grqo::query_rewards(&layer_costs[l])?,
                    };
                    let a = match cfg.advantage_mode {
                        AdvantageMode::Relative => grqo::group_advantages(&r, grqo::DEFAULT_EPS),
                        AdvantageMode::Absolute => r,
                    };
                    for (x, v) in adv.iter_mut().zip(a) {
                        *x += v / layers.len() as f64;
                    }
                }
                used.advantages = adv.clone();
                Ok(grqo::tape::RewardTerm::ScoreWeighted(adv))
            }
            LossMode::Direct => {
                let mut parts = Vec::new();
                for (k, &l) in layers.iter().enumerate() {
                    let layer = out.layers[l];
                    let rw = cfg.reward_weights.unwrap_or(cfg.weights);
                    let cm = objective::tape::cost_matrix(g, layer.logits, layer.boxes, gts, rw, cfg.focal)?;
                    let best = g.row_min(cm);
                    let r = g.transpose(best);
                    let r = g.scale(r, -1.0);
                    let a = match cfg.advantage_mode {
                        AdvantageMode::Relative => {
                            let stats = match held {
                                Some(h) => h.group_stats[k],
                                None => grqo::tape::group_stats(g, r, grqo::DEFAULT_EPS),
                            };
                            used.group_stats.push(stats);
                            stats.map(|(mean, std)| grqo::tape::standardize(g, r, mean, std))
                        }
                        AdvantageMode::Absolute => Some(r),
                    };
                    parts.extend(a);
                }
                if parts.is_empty() {
                    return Ok(grqo::tape::RewardTerm::None);
                }
                let mut acc = parts[0];
                for &p in &parts[1..] {
                    acc = g.add(acc, p);
                }
                // degenerate layers contribute zero advantages to the mean
                Ok(grqo::tape::RewardTerm::Direct(g.scale(acc, 1.0 / layers.len() as f32)))
            }
        }
    }
}

/// A run directory: `config.json`, `metrics.csv`, checkpoints.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path)?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn write_config(&self, cfg: &TrainConfig) -> Result<()> {
        fs::write(self.path.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
        Ok(())
    }

    pub fn write_metrics(&self, history: &[EpochMetrics]) -> Result<()> {
        let mut f = fs::File::create(self.path.join("metrics.csv"))?;
        writeln!(f, "{METRICS_HEADER}")?;
        for m in history {
            writeln!(f, "{}", m.csv_row())?;
        }
        Ok(())
    }
}

/// Supervised training from scratch.
pub fn train_sft<'d>(config: &TrainConfig, data: &'d Dataset, out: Option<&Path>) -> Result<Trainer<'d>> {
    let cfg = TrainConfig { mode: Mode::Sft, ..config.clone() };
    let mut t = Trainer::new(cfg, data)?;
    t.run(out)?;
    Ok(t)
}

/// GRQO training. Without `reference`, the first `sft_warmup_epochs` run
/// supervised and their result becomes the reference; with it, training
/// starts from the reference parameters.
pub fn train_grqo<'d>(
    config: &TrainConfig,
    data: &'d Dataset,
    reference: Option<Checkpoint>,
    out: Option<&Path>,
) -> Result<Trainer<'d>> {
    let cfg = TrainConfig { mode: Mode::Grqo, ..config.clone() };
    if cfg.sft_warmup_epochs == 0 && reference.is_none() {
        return Err(Error::Config("GRQO without warmup needs a reference checkpoint".into()));
    }
    let mut t = Trainer::new(cfg, data)?;
    if let Some(r) = reference {
        if r.model != t.model.config {
            return Err(Error::Shape("reference checkpoint architecture differs from the config".into()));
        }
        Model::check_layout(&t.model.config, &r.params)?;
        t.model.params = r.params.clone();
        t.set_reference(r.params)?;
        // skip the warmup that produced the reference
        t.epoch = t.config.sft_warmup_epochs;
        t.step = (t.steps_per_epoch() * t.epoch) as u64;
    }
    t.run(out)?;
    Ok(t)
}
