//! Group relative query optimization.
//!
//! Each image's `N_q` selected queries form one group. A query's reward is
//! the negated cost of its best ground-truth match, advantages are the
//! rewards standardized within the group, and the objectness distribution
//! over the selected tokens is kept close to a frozen reference with a k3
//! KL estimator.
//!
//! The group statistics are always treated as constants: with them inside
//! the graph, `sum_i A_i` is identically zero and so is its gradient (see
//! the `degenerate_group_statistics` test).

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::objective::CostMatrix;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;

/// How the reward term reaches the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Constant advantages weight `log O(q_i)`.
    #[default]
    ScoreWeighted,
    /// Gradient flows through the rewards, group statistics held constant.
    Direct,
}

/// Whether rewards are standardized within the group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvantageMode {
    #[default]
    Relative,
    /// Raw rewards stand in for advantages.
    Absolute,
}

/// Per-query rewards and their group normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardGroup {
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
}

impl RewardGroup {
    pub fn new(rewards: Vec<f64>, eps: f64) -> Self {
        let (mean, std) = population_stats(&rewards);
        let advantages = group_advantages(&rewards, eps);
        Self { rewards, mean, std, advantages }
    }
}

fn population_stats(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `r_i = -min_j C[i, j]`.
pub fn query_rewards(costs: &CostMatrix) -> Result<Vec<f64>> {
    if costs.num_gts() == 0 {
        return Err(Error::NoGroundTruth);
    }
    Ok((0..costs.num_queries())
        .map(|i| -costs.row(i).iter().cloned().fold(f64::INFINITY, f64::min))
        .collect())
}

/// `(r_i - mean) / std` with the population standard deviation. Returns
/// zeros for groups smaller than two or with `std < eps`.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Vec<f64> {
    let (mean, std) = population_stats(rewards);
    if rewards.len() < 2 || std < eps {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Per-layer advantages averaged over decoder layers.
pub fn layerwise_advantages(per_layer: &[CostMatrix], eps: f64) -> Result<Vec<f64>> {
    let first = per_layer.first().ok_or_else(|| Error::Shape("no decoder layers".into()))?;
    let (nq, ng) = (first.num_queries(), first.num_gts());
    let mut acc = vec![0.0; nq];
    for costs in per_layer {
        if costs.num_queries() != nq || costs.num_gts() != ng {
            return Err(Error::Shape(format!(
                "layer cost matrix {}x{} differs from {nq}x{ng}",
                costs.num_queries(),
                costs.num_gts()
            )));
        }
        for (a, v) in acc.iter_mut().zip(group_advantages(&query_rewards(costs)?, eps)) {
            *a += v;
        }
    }
    let l = per_layer.len() as f64;
    Ok(acc.into_iter().map(|a| a / l).collect())
}

/// `base_alpha` where `prob >= floor_fraction / N_q`, zero elsewhere.
pub fn alpha_mask(probs: &[f64], base_alpha: f64, floor_fraction: f64) -> Vec<f64> {
    let threshold = floor_fraction / probs.len().max(1) as f64;
    probs.iter().map(|&p| if p >= threshold { base_alpha } else { 0.0 }).collect()
}

/// Current and reference objectness distributions over the same selected
/// token indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectnessPair {
    pub indices: Vec<usize>,
    pub current: Vec<f64>,
    pub reference: Vec<f64>,
}

impl ObjectnessPair {
    pub fn new(indices: Vec<usize>, current: Vec<f64>, reference: Vec<f64>) -> Result<Self> {
        if current.len() != indices.len() || reference.len() != indices.len() {
            return Err(Error::Shape(format!(
                "objectness lengths {} / {} for {} indices",
                current.len(),
                reference.len(),
                indices.len()
            )));
        }
        for (name, p) in [("current", &current), ("reference", &reference)] {
            if p.iter().any(|&v| !(v > 0.0 && v < 1.0 || (v == 1.0 && p.len() == 1))) {
                return Err(Error::Shape(format!("{name} objectness probabilities must lie in (0,1)")));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Shape(format!("{name} objectness sums to {s}")));
            }
        }
        Ok(Self { indices, current, reference })
    }

    /// From raw selected-token scores of both models (softmax over the group).
    pub fn from_scores(indices: Vec<usize>, current: &[f64], reference: &[f64]) -> Result<Self> {
        Self::new(indices, softmax(current), softmax(reference))
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// k3 estimator per query: `ratio - ln(ratio) - 1`, `ratio = ref / cur`.
pub fn kl_k3(pair: &ObjectnessPair) -> Vec<f64> {
    pair.current
        .iter()
        .zip(&pair.reference)
        .map(|(&c, &r)| {
            let ratio = r / c;
            ratio - ratio.ln() - 1.0
        })
        .collect()
}

/// Value of `-(1/N) sum_i (w_i A_i log O_i - beta KL_i)`.
pub fn grqo_loss(advantages: &[f64], alpha: &[f64], log_probs: &[f64], kl: &[f64], beta: f64) -> Result<f64> {
    let n = advantages.len();
    if alpha.len() != n || log_probs.len() != n || kl.len() != n {
        return Err(Error::Shape(format!(
            "grqo_loss lengths {n}/{}/{}/{}",
            alpha.len(),
            log_probs.len(),
            kl.len()
        )));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let s: f64 = (0..n).map(|i| alpha[i] * advantages[i] * log_probs[i] - beta * kl[i]).sum();
    Ok(-s / n as f64)
}

/// Tape builders; per-query quantities are `[1, N_q]` rows.
pub mod tape {
    use super::*;

    /// Log objectness probabilities from raw selected-token scores.
    pub fn objectness_log_probs(t: &mut Tape, scores: Var) -> Var {
        t.log_softmax_rows(scores)
    }

    /// k3 KL with `ref_log_probs` constant. Written in log space:
    /// `exp(d) - d - 1` with `d = log O_ref - log O_cur`.
    pub fn kl_k3(t: &mut Tape, log_probs: Var, ref_log_probs: &Tensor) -> Var {
        let r = t.constant(ref_log_probs.clone());
        let d = t.sub(r, log_probs);
        let e = t.exp(d);
        let e = t.sub(e, d);
        t.offset(e, -1.0)
    }

    /// Group mean and std of a reward row, `None` when degenerate.
    pub fn group_stats(t: &Tape, rewards: Var, eps: f64) -> Option<(f64, f64)> {
        let vals: Vec<f64> = t.value(rewards).data().iter().map(|&v| v as f64).collect();
        let (mean, std) = population_stats(&vals);
        if vals.len() < 2 || std < eps {
            return None;
        }
        Some((mean, std))
    }

    /// `(r - mean) / std` with the statistics as constants.
    pub fn standardize(t: &mut Tape, rewards: Var, mean: f64, std: f64) -> Var {
        let centered = t.offset(rewards, -mean as f32);
        t.scale(centered, (1.0 / std) as f32)
    }

    /// Standardizes a differentiable reward row with its group statistics
    /// taken as constants. `None` when the group is degenerate.
    pub fn direct_advantages(t: &mut Tape, rewards: Var, eps: f64) -> Option<Var> {
        let (mean, std) = group_stats(t, rewards, eps)?;
        Some(standardize(t, rewards, mean, std))
    }

    /// The reward half of the objective.
    pub enum RewardTerm {
        /// Constant advantages, weighted against `log O`.
        ScoreWeighted(Vec<f64>),
        /// Differentiable advantage row.
        Direct(Var),
        /// No usable reward (no ground truth, degenerate group).
        None,
    }

    /// `-(1/N) sum_i (alpha_i * reward_i - beta KL_i)` where `reward_i` is
    /// `A_i log O_i` or the differentiable advantage.
    pub fn grqo_loss(t: &mut Tape, reward: RewardTerm, alpha: &[f64], log_probs: Var, kl: Var, beta: f64) -> Var {
        let n = t.value(log_probs).cols();
        assert_eq!(alpha.len(), n, "alpha mask length");
        let kl_sum = t.sum(kl);
        let kl_part = t.scale(kl_sum, beta as f32);
        let total = match reward {
            RewardTerm::ScoreWeighted(adv) => {
                assert_eq!(adv.len(), n, "advantage length");
                let w = Tensor::row(adv.iter().zip(alpha).map(|(a, m)| (a * m) as f32).collect());
                let w = t.constant(w);
                let wl = t.mul(w, log_probs);
                let s = t.sum(wl);
                t.sub(s, kl_part)
            }
            RewardTerm::Direct(adv) => {
                let w = t.constant(Tensor::row(alpha.iter().map(|&a| a as f32).collect()));
                let wa = t.mul(w, adv);
                let s = t.sum(wa);
                t.sub(s, kl_part)
            }
            RewardTerm::None => t.scale(kl_part, -1.0),
        };
        t.scale(total, -1.0 / n as f32)
    }
}
