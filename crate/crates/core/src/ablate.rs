//! Ablation grids over a base configuration.
//!
//! Cells whose configurations differ only in GRQO settings share one
//! supervised warmup: it runs once per seed and every cell forks from it.
//! Because warmup epochs never read the GRQO settings, a forked cell ends
//! exactly where a standalone run of its configuration would.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::evalkit::{map_over, EvalOptions};
use crate::grqo::AdvantageMode;
use crate::objective::CostWeights;
use crate::synthdata::{Dataset, SplitName};
use crate::trainer::{EpochMetrics, Mode, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// SFT, reward only, KL only, both.
    Component,
    /// Reward cost terms, absolute vs group-relative, layerwise.
    RewardDesign,
    /// Reward and KL weights.
    LossWeights,
    /// Prompts per class at training time, plus an inference sweep.
    PromptCount,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Component => "component",
            Axis::RewardDesign => "reward-design",
            Axis::LossWeights => "loss-weights",
            Axis::PromptCount => "prompt-count",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "component" => Ok(Axis::Component),
            "reward-design" => Ok(Axis::RewardDesign),
            "loss-weights" => Ok(Axis::LossWeights),
            "prompt-count" => Ok(Axis::PromptCount),
            other => Err(Error::Config(format!("unknown ablation axis `{other}`"))),
        }
    }
}

/// Inference prompt counts for the prompt-count sweep.
pub const INFERENCE_PROMPTS: [usize; 5] = [1, 8, 16, 32, 64];

/// One grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub config: TrainConfig,
    /// Extra evaluations of the final model at these prompt counts.
    pub eval_prompts: Vec<usize>,
}

fn cell(name: &str, config: TrainConfig) -> Cell {
    Cell { name: name.to_string(), config, eval_prompts: Vec::new() }
}

/// The grid for `axis`, built from `base` (whose own mode is ignored).
pub fn cells(axis: Axis, base: &TrainConfig) -> Vec<Cell> {
    let grqo = TrainConfig { mode: Mode::Grqo, ..base.clone() };
    match axis {
        Axis::Component => vec![
            cell("sft", TrainConfig { mode: Mode::Sft, ..base.clone() }),
            cell("reward-only", TrainConfig { beta: 0.0, ..grqo.clone() }),
            cell("kl-only", TrainConfig { alpha: 0.0, ..grqo.clone() }),
            cell("grqo", grqo),
        ],
        Axis::RewardDesign => {
            let w = base.weights;
            let cls = CostWeights { lambda_l1: 0.0, lambda_giou: 0.0, ..w };
            let loc = CostWeights { lambda_focal: 0.0, ..w };
            let flat = TrainConfig { layerwise: false, ..grqo.clone() };
            vec![
                cell("cls-only", TrainConfig { reward_weights: Some(cls), ..flat.clone() }),
                cell("loc-only", TrainConfig { reward_weights: Some(loc), ..flat.clone() }),
                cell("absolute", TrainConfig { advantage_mode: AdvantageMode::Absolute, ..flat.clone() }),
                cell("relative", TrainConfig { advantage_mode: AdvantageMode::Relative, ..flat }),
                cell("relative-layerwise", TrainConfig { advantage_mode: AdvantageMode::Relative, layerwise: true, ..grqo }),
            ]
        }
        Axis::LossWeights => [(1.0, 0.4), (1.0, 0.04), (10.0, 0.04), (1e3, 0.04), (1e4, 0.04), (1e3, 0.004)]
            .iter()
            .map(|&(alpha, beta)| cell(&format!("alpha{alpha}-beta{beta}"), TrainConfig { alpha, beta, ..grqo.clone() }))
            .collect(),
        Axis::PromptCount => INFERENCE_PROMPTS
            .iter()
            .map(|&m| {
                let mut c = cell(&format!("train-m{m}"), TrainConfig { prompts_per_class: m, ..grqo.clone() });
                if m == 1 {
                    c.eval_prompts = INFERENCE_PROMPTS.to_vec();
                }
                c
            })
            .collect(),
    }
}

/// The configuration with every setting that only GRQO epochs read reset,
/// so two cells can share a warmup iff their keys are equal.
fn warmup_key(c: &TrainConfig) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        mode: d.mode,
        alpha: d.alpha,
        beta: d.beta,
        reward_weights: d.reward_weights,
        loss_mode: d.loss_mode,
        advantage_mode: d.advantage_mode,
        layerwise: d.layerwise,
        objectness_floor: d.objectness_floor,
        reference_refresh_epochs: d.reference_refresh_epochs,
        sft_loss_scale: d.sft_loss_scale,
        ..c.clone()
    }
}

/// One line of the summary CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub axis: Axis,
    pub cell: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub eval_prompts_per_class: usize,
    pub val_id_ap50: f64,
    pub val_id_map: f64,
    pub val_ood_ap50: f64,
    pub val_ood_map: f64,
    /// Per-epoch history of the cell's run.
    pub history: Vec<EpochMetrics>,
}

pub const SUMMARY_HEADER: &str = "axis,cell,seed,mode,train_prompts_per_class,eval_prompts_per_class,alpha,beta,\
advantage_mode,layerwise,reward_weights,epochs,val_id_ap50,val_id_map,val_ood_ap50,val_ood_map";

impl SummaryRow {
    pub fn csv_row(&self) -> String {
        let c = &self.config;
        let rw = c
            .reward_weights
            .map(|w| format!("{}/{}/{}", w.lambda_focal, w.lambda_l1, w.lambda_giou))
            .unwrap_or_else(|| "matching".into());
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.axis.as_str(),
            self.cell,
            self.seed,
            if c.mode == Mode::Sft { "sft" } else { "grqo" },
            c.prompts_per_class,
            self.eval_prompts_per_class,
            c.alpha,
            c.beta,
            if c.advantage_mode == AdvantageMode::Relative { "relative" } else { "absolute" },
            c.layerwise,
            rw,
            c.epochs,
            self.val_id_ap50,
            self.val_id_map,
            self.val_ood_ap50,
            self.val_ood_map
        )
    }
}

/// Options for [`run`].
#[derive(Debug, Clone)]
pub struct AblateOptions {
    pub seeds: Vec<u64>,
    /// Cells trained concurrently after the shared warmup.
    pub workers: usize,
}

impl Default for AblateOptions {
    fn default() -> Self {
        Self { seeds: vec![0], workers: 1 }
    }
}

/// Directory of one cell's run below `out`.
pub fn cell_dir(out: &Path, cell: &str, seed: u64, multi_seed: bool) -> PathBuf {
    if multi_seed {
        out.join(format!("{cell}-s{seed}"))
    } else {
        out.join(cell)
    }
}

fn final_metrics(t: &Trainer<'_>, data: &Dataset, p: usize) -> Result<[f64; 4]> {
    let last = t.history.last();
    let from_history = last.and_then(|m| Some([m.val_id_ap50?, m.val_id_map?, m.val_ood_ap50?, m.val_ood_map?]));
    if p == t.config.eval_prompts_per_class {
        if let Some(v) = from_history {
            return Ok(v);
        }
    }
    let opts = EvalOptions {
        prompts_per_class: p,
        seed: t.config.eval_seed,
        max_images: t.config.eval_max_images,
        ..Default::default()
    };
    let id = map_over(&t.model, data, SplitName::ValId, &opts)?;
    let ood = map_over(&t.model, data, SplitName::ValOod, &opts)?;
    Ok([id.ap50, id.map, ood.ap50, ood.map])
}

/// Runs every cell of `axis` for every seed, writing one run directory per
/// cell and seed plus `summary.csv` into `out`. `on_cell` is called with
/// each cell's directory and configuration before that cell trains.
pub fn run(
    axis: Axis,
    base: &TrainConfig,
    data: &Dataset,
    out: &Path,
    opts: &AblateOptions,
    on_cell: &(dyn Fn(&Path, &Cell) -> Result<()> + Sync),
) -> Result<Vec<SummaryRow>> {
    if opts.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    fs::create_dir_all(out)?;
    let multi = opts.seeds.len() > 1;
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        let base = TrainConfig { seed, ..base.clone() };
        let grid = cells(axis, &base);
        for c in &grid {
            c.config.validate()?;
        }
        // group cells by shared warmup, keeping grid order
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, c) in grid.iter().enumerate() {
            match groups.iter_mut().find(|g| warmup_key(&grid[g[0]].config) == warmup_key(&c.config)) {
                Some(g) => g.push(i),
                None => groups.push(vec![i]),
            }
        }
        let results: Mutex<Vec<Option<Vec<SummaryRow>>>> = Mutex::new(vec![None; grid.len()]);
        for group in &groups {
            let first = &grid[group[0]].config;
            let warm_cfg = TrainConfig { mode: Mode::Sft, ..first.clone() };
            let mut warm = Trainer::new(warm_cfg, data)?;
            let shared = grid[group[0]].config.sft_warmup_epochs.min(first.epochs);
            // a pure SFT group has nothing to share
            if group.iter().any(|&i| grid[i].config.mode == Mode::Grqo) {
                while warm.epoch < shared {
                    warm.run_epoch()?;
                }
            }
            let next = AtomicUsize::new(0);
            let workers = opts.workers.max(1).min(group.len());
            let run_one = |i: usize| -> Result<()> {
                let c = &grid[i];
                let dir = cell_dir(out, &c.name, seed, multi);
                fs::create_dir_all(&dir)?;
                on_cell(&dir, c)?;
                let mut t = warm.fork(c.config.clone())?;
                t.run(Some(&dir))?;
                let mut cell_rows = Vec::new();
                let mut prompts = vec![c.config.eval_prompts_per_class];
                prompts.extend(c.eval_prompts.iter().copied().filter(|&p| p != c.config.eval_prompts_per_class));
                for p in prompts {
                    let [a, b, d, e] = final_metrics(&t, data, p)?;
                    cell_rows.push(SummaryRow {
                        axis,
                        cell: c.name.clone(),
                        seed,
                        config: c.config.clone(),
                        eval_prompts_per_class: p,
                        val_id_ap50: a,
                        val_id_map: b,
                        val_ood_ap50: d,
                        val_ood_map: e,
                        history: t.history.clone(),
                    });
                }
                results.lock().unwrap()[i] = Some(cell_rows);
                Ok(())
            };
            let errors: Mutex<Vec<Error>> = Mutex::new(Vec::new());
            std::thread::scope(|s| {
                for _ in 0..workers {
                    s.spawn(|| loop {
                        let k = next.fetch_add(1, Ordering::SeqCst);
                        if k >= group.len() {
                            break;
                        }
                        if let Err(e) = run_one(group[k]) {
                            errors.lock().unwrap().push(e);
                            break;
                        }
                    });
                }
            });
            if let Some(e) = errors.into_inner().unwrap().into_iter().next() {
                return Err(e);
            }
        }
        for r in results.into_inner().unwrap().into_iter().flatten() {
            rows.extend(r);
        }
    }
    let mut csv = String::from(SUMMARY_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    fs::write(out.join("summary.csv"), csv)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_the_expected_cells() {
        let base = TrainConfig::default();
        let names = |a| cells(a, &base).into_iter().map(|c| c.name).collect::<Vec<_>>();
        assert_eq!(names(Axis::Component), ["sft", "reward-only", "kl-only", "grqo"]);
        assert_eq!(names(Axis::RewardDesign).len(), 5);
        assert_eq!(names(Axis::LossWeights).len(), 6);
        assert_eq!(names(Axis::PromptCount).len(), 5);
        for a in [Axis::Component, Axis::RewardDesign, Axis::LossWeights, Axis::PromptCount] {
            assert_eq!(a.as_str().parse::<Axis>().unwrap(), a);
            for c in cells(a, &base) {
                c.config.validate().unwrap();
            }
        }
        let comp = cells(Axis::Component, &base);
        assert_eq!(comp[1].config.beta, 0.0);
        assert_eq!(comp[2].config.alpha, 0.0);
        assert!(comp.iter().all(|c| warmup_key(&c.config) == warmup_key(&comp[0].config)));
        let pc = cells(Axis::PromptCount, &base);
        assert_ne!(warmup_key(&pc[0].config), warmup_key(&pc[1].config));
        assert_eq!(pc[0].eval_prompts, INFERENCE_PROMPTS);
    }
}
