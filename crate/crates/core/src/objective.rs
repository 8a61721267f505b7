//! Matching costs, one-to-one assignment, and the per-instance detection
//! losses shared by supervised training and the query reward.
//!
//! The focal matching cost follows the usual detection-transformer form
//! `pos(p) - neg(p)` with
//! `pos(p) = alpha (1-p)^gamma (-log p)` and
//! `neg(p) = (1-alpha) p^gamma (-log(1-p))`, probabilities clamped to
//! `[1e-8, 1 - 1e-8]` before the logarithms.
//!
//! Every cost and loss exists in two forms: plain `f64` functions over
//! values (used for matching and rewards) and tape builders in [`tape`]
//! (used when gradients must flow).

use serde::{Deserialize, Serialize};

use crate::autograd::{focal_cost_and_grad, PROB_EPS};
use crate::error::{Error, Result};
use crate::geometry::{giou, Box};
use crate::synthdata::Instance;
use crate::tensor::Tensor;

/// Weights of the three matching-cost terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub lambda_focal: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { lambda_focal: 2.0, lambda_l1: 5.0, lambda_giou: 2.0 }
    }
}

impl CostWeights {
    pub fn new(lambda_focal: f64, lambda_l1: f64, lambda_giou: f64) -> Result<Self> {
        let w = Self { lambda_focal, lambda_l1, lambda_giou };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_focal, self.lambda_l1, self.lambda_giou];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("cost weights must be finite and >= 0: {all:?}")));
        }
        if all.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("at least one cost weight must be positive".into()));
        }
        Ok(())
    }
}

/// Focal-term constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

/// The two halves of the focal matching cost at one probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalCost {
    pub pos: f64,
    pub neg: f64,
}

impl FocalCost {
    pub fn cost(&self) -> f64 {
        self.pos - self.neg
    }
}

pub fn focal_cost(class_prob: f64, params: FocalParams) -> FocalCost {
    let p = class_prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let FocalParams { alpha, gamma } = params;
    FocalCost {
        pos: alpha * (1.0 - p).powf(gamma) * (-p.ln()),
        neg: (1.0 - alpha) * p.powf(gamma) * (-(1.0 - p).ln()),
    }
}

/// Sum of absolute coordinate differences in center format.
pub fn l1_cost(pred: &Box, gt: &Box) -> f64 {
    let (a, b) = (pred.as_array(), gt.as_array());
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn giou_cost(pred: &Box, gt: &Box) -> f64 {
    -giou(pred, gt)
}

/// `N_q x N_gt` matching costs, queries on rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for {rows}x{cols} cost matrix", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("cost matrix has non-finite entries".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn num_queries(&self) -> usize {
        self.rows
    }

    pub fn num_gts(&self) -> usize {
        self.cols
    }

    pub fn get(&self, query: usize, gt: usize) -> f64 {
        self.values[query * self.cols + gt]
    }

    pub fn row(&self, query: usize) -> &[f64] {
        &self.values[query * self.cols..(query + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Matching costs between per-query predictions and ground truths.
///
/// `class_logits` is `N_q x K_present`; each ground truth's `class_id` must
/// already be its column in that matrix.
pub fn cost_matrix(
    class_logits: &Tensor,
    boxes: &[Box],
    gts: &[Instance],
    weights: CostWeights,
    focal: FocalParams,
) -> Result<CostMatrix> {
    if gts.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let nq = class_logits.rows();
    if boxes.len() != nq {
        return Err(Error::Shape(format!("{} boxes for {nq} queries", boxes.len())));
    }
    let mut values = Vec::with_capacity(nq * gts.len());
    for (i, pred) in boxes.iter().enumerate() {
        for gt in gts {
            if gt.class_id >= class_logits.cols() {
                return Err(Error::Shape(format!(
                    "gt column {} outside {} logits",
                    gt.class_id,
                    class_logits.cols()
                )));
            }
            let logit = class_logits.get(i, gt.class_id) as f64;
            let p = 1.0 / (1.0 + (-logit).exp());
            let (c_focal, _) = focal_cost_and_grad(p, focal.alpha, focal.gamma);
            let c = weights.lambda_focal * c_focal
                + weights.lambda_l1 * l1_cost(pred, &gt.bbox)
                + weights.lambda_giou * giou_cost(pred, &gt.bbox);
            values.push(c);
        }
    }
    CostMatrix::new(nq, gts.len(), values)
}

/// One-to-one query/ground-truth pairs, sorted by ground-truth index.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(query, gt)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn query_for_gt(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == gt).map(|p| p.0)
    }
}

/// Minimum-cost assignment of every ground truth to a distinct query.
///
/// Among optimal assignments the one whose query sequence (ordered by
/// ground truth) is lexicographically smallest is returned.
pub fn hungarian(costs: &CostMatrix) -> Result<Assignment> {
    let (nq, ng) = (costs.num_queries(), costs.num_gts());
    if ng > nq {
        return Err(Error::TooManyGroundTruths { gts: ng, queries: nq });
    }
    if ng == 0 {
        return Ok(Assignment { pairs: Vec::new(), total_cost: 0.0 });
    }
    let all_q: Vec<usize> = (0..nq).collect();
    let all_g: Vec<usize> = (0..ng).collect();
    let (best, _) = solve_subproblem(costs, &all_g, &all_q);
    let scale = costs.values().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale * ng as f64;

    let mut fixed_cost = 0.0;
    let mut used = vec![false; nq];
    let mut pairs = Vec::with_capacity(ng);
    for gt in 0..ng {
        let rest_g: Vec<usize> = (gt + 1..ng).collect();
        let mut chosen = None;
        for q in 0..nq {
            if used[q] {
                continue;
            }
            let rest_q: Vec<usize> = (0..nq).filter(|&k| !used[k] && k != q).collect();
            let (sub, _) = solve_subproblem(costs, &rest_g, &rest_q);
            let total = fixed_cost + costs.get(q, gt) + sub;
            if total <= best + tol {
                chosen = Some(q);
                break;
            }
        }
        // Numerical fallback: the optimum is always reachable by some query.
        let q = chosen.unwrap_or_else(|| {
            (0..nq).filter(|&k| !used[k]).min_by(|&a, &b| costs.get(a, gt).total_cmp(&costs.get(b, gt))).unwrap()
        });
        used[q] = true;
        fixed_cost += costs.get(q, gt);
        pairs.push((q, gt));
    }
    Ok(Assignment { pairs, total_cost: fixed_cost })
}

/// Shortest-augmenting-path Hungarian method on the submatrix selected by
/// `gts` (rows of the internal problem) and `queries` (columns), with
/// `gts.len() <= queries.len()`. Returns the optimal cost and, per gt, the
/// chosen query.
fn solve_subproblem(costs: &CostMatrix, gts: &[usize], queries: &[usize]) -> (f64, Vec<usize>) {
    let n = gts.len();
    let m = queries.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let a = |i: usize, j: usize| costs.get(queries[j - 1], gts[i - 1]);
    // 1-based potentials; way/p as in the classic O(n^2 m) formulation.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut choice = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=m {
        if p[j] != 0 {
            choice[p[j] - 1] = queries[j - 1];
            total += a(p[j], j);
        }
    }
    (total, choice)
}

/// Tape builders for the differentiable versions of the costs and losses.
pub mod tape {
    use super::*;
    use crate::autograd::{Tape, Var};

    /// Matched-instance detection losses, each normalized by `num_gt_norm`.
    #[derive(Debug, Clone, Copy)]
    pub struct DetectionLosses {
        pub focal: Var,
        pub l1: Var,
        pub giou: Var,
    }

    /// Generalized IoU between corresponding rows of two `[P, 4]`
    /// center-format box matrices; returns `[P, 1]`.
    pub fn giou_rows(t: &mut Tape, pred: Var, gt: Var) -> Var {
        let corners = |t: &mut Tape, b: Var| {
            let cx = t.slice_cols(b, 0, 1);
            let cy = t.slice_cols(b, 1, 1);
            let w = t.slice_cols(b, 2, 1);
            let h = t.slice_cols(b, 3, 1);
            let hw = t.scale(w, 0.5);
            let hh = t.scale(h, 0.5);
            let x0 = t.sub(cx, hw);
            let x1 = t.add(cx, hw);
            let y0 = t.sub(cy, hh);
            let y1 = t.add(cy, hh);
            let area = t.mul(w, h);
            (x0, y0, x1, y1, area)
        };
        let (px0, py0, px1, py1, pa) = corners(t, pred);
        let (gx0, gy0, gx1, gy1, ga) = corners(t, gt);
        let ix0 = t.maximum(px0, gx0);
        let iy0 = t.maximum(py0, gy0);
        let ix1 = t.minimum(px1, gx1);
        let iy1 = t.minimum(py1, gy1);
        let iw = t.sub(ix1, ix0);
        let iw = t.relu(iw);
        let ih = t.sub(iy1, iy0);
        let ih = t.relu(ih);
        let inter = t.mul(iw, ih);
        let areas = t.add(pa, ga);
        let union = t.sub(areas, inter);
        let iou = t.div(inter, union);
        let hx0 = t.minimum(px0, gx0);
        let hy0 = t.minimum(py0, gy0);
        let hx1 = t.maximum(px1, gx1);
        let hy1 = t.maximum(py1, gy1);
        let hw = t.sub(hx1, hx0);
        let hh = t.sub(hy1, hy0);
        let hull = t.mul(hw, hh);
        let gap = t.sub(hull, union);
        let penalty = t.div(gap, hull);
        t.sub(iou, penalty)
    }

    fn gt_box_tensor(gts: &[&Box]) -> Tensor {
        Tensor::new(
            gts.len(),
            4,
            gts.iter().flat_map(|b| b.as_array().map(|v| v as f32)).collect(),
        )
    }

    /// Differentiable `N_q x N_gt` cost matrix (same definition as
    /// [`super::cost_matrix`]).
    pub fn cost_matrix(
        t: &mut Tape,
        class_logits: Var,
        boxes: Var,
        gts: &[Instance],
        weights: CostWeights,
        focal: FocalParams,
    ) -> Result<Var> {
        if gts.is_empty() {
            return Err(Error::NoGroundTruth);
        }
        let nq = t.value(boxes).rows();
        let mut columns = Vec::with_capacity(gts.len());
        let logits_t = t.transpose(class_logits);
        for gt in gts {
            let row = t.gather_rows(logits_t, &[gt.class_id]);
            let col = t.transpose(row);
            let c_focal = t.focal_cost(col, focal.alpha, focal.gamma);
            let target = t.constant(gt_box_tensor(&vec![&gt.bbox; nq]));
            let diff = t.sub(boxes, target);
            let diff = t.abs(diff);
            let c_l1 = t.row_sum(diff);
            let g = giou_rows(t, boxes, target);
            let a = t.scale(c_focal, weights.lambda_focal as f32);
            let b = t.scale(c_l1, weights.lambda_l1 as f32);
            let c = t.scale(g, -weights.lambda_giou as f32);
            let ab = t.add(a, b);
            columns.push(t.add(ab, c));
        }
        Ok(t.concat_cols(&columns))
    }

    /// Sigmoid focal loss: matched queries get one-hot targets on their
    /// ground truth's column, all other entries target zero.
    pub fn focal_loss(
        t: &mut Tape,
        class_logits: Var,
        gts: &[Instance],
        assignment: &Assignment,
        focal: FocalParams,
        num_gt_norm: f32,
    ) -> Var {
        let (nq, k) = t.value(class_logits).shape();
        let mut targets = Tensor::zeros(nq, k);
        for &(q, g) in &assignment.pairs {
            targets.set(q, gts[g].class_id, 1.0);
        }
        let s = t.sigmoid_focal_sum(class_logits, targets, focal.alpha as f32, focal.gamma as f32);
        t.scale(s, 1.0 / num_gt_norm)
    }

    pub fn l1_loss(t: &mut Tape, boxes: Var, gts: &[Instance], assignment: &Assignment, num_gt_norm: f32) -> Var {
        if assignment.pairs.is_empty() {
            return t.scalar(0.0);
        }
        let queries: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
        let matched = t.gather_rows(boxes, &queries);
        let targets: Vec<&Box> = assignment.pairs.iter().map(|p| &gts[p.1].bbox).collect();
        let target = t.constant(gt_box_tensor(&targets));
        let d = t.sub(matched, target);
        let d = t.abs(d);
        let s = t.sum(d);
        t.scale(s, 1.0 / num_gt_norm)
    }

    pub fn giou_loss(t: &mut Tape, boxes: Var, gts: &[Instance], assignment: &Assignment, num_gt_norm: f32) -> Var {
        if assignment.pairs.is_empty() {
            return t.scalar(0.0);
        }
        let queries: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
        let matched = t.gather_rows(boxes, &queries);
        let targets: Vec<&Box> = assignment.pairs.iter().map(|p| &gts[p.1].bbox).collect();
        let target = t.constant(gt_box_tensor(&targets));
        let g = giou_rows(t, matched, target);
        let one_minus = t.scale(g, -1.0);
        let one_minus = t.offset(one_minus, 1.0);
        let s = t.sum(one_minus);
        t.scale(s, 1.0 / num_gt_norm)
    }

    pub fn detection_losses(
        t: &mut Tape,
        class_logits: Var,
        boxes: Var,
        gts: &[Instance],
        assignment: &Assignment,
        focal: FocalParams,
        num_gt_norm: f32,
    ) -> DetectionLosses {
        DetectionLosses {
            focal: focal_loss(t, class_logits, gts, assignment, focal, num_gt_norm),
            l1: l1_loss(t, boxes, gts, assignment, num_gt_norm),
            giou: giou_loss(t, boxes, gts, assignment, num_gt_norm),
        }
    }

    /// Symmetric InfoNCE between prompt embeddings and their class anchors
    /// (row `i` of each belongs to the same class), over cosine similarity
    /// divided by `temperature`.
    pub fn contrastive_loss(t: &mut Tape, prompts: Var, anchors: Var, temperature: f32) -> Var {
        let k = t.value(prompts).rows();
        assert_eq!(k, t.value(anchors).rows(), "prompt/anchor count mismatch");
        let p = t.l2_normalize_rows(prompts);
        let a = t.l2_normalize_rows(anchors);
        let s = t.matmul_nt(p, a);
        let s = t.scale(s, 1.0 / temperature);
        let mut eye = Tensor::zeros(k, k);
        for i in 0..k {
            eye.set(i, i, 1.0);
        }
        let eye = t.constant(eye);
        let rows = t.log_softmax_rows(s);
        let st = t.transpose(s);
        let cols = t.log_softmax_rows(st);
        let both = t.add(rows, cols);
        let diag = t.mul(both, eye);
        let total = t.sum(diag);
        t.scale(total, -0.5 / k as f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inst(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Instance {
        Instance { class_id, bbox: Box::new(cx, cy, w, h).unwrap() }
    }

    /// Exhaustive search over injective maps gt -> query.
    fn brute_force(c: &CostMatrix) -> f64 {
        fn rec(c: &CostMatrix, gt: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if gt == c.num_gts() {
                *best = best.min(acc);
                return;
            }
            for q in 0..c.num_queries() {
                if !used[q] {
                    used[q] = true;
                    rec(c, gt + 1, used, acc + c.get(q, gt), best);
                    used[q] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(c, 0, &mut vec![false; c.num_queries()], 0.0, &mut best);
        best
    }

    #[test]
    fn focal_cost_closed_form() {
        let f = focal_cost(0.5, FocalParams::default());
        assert!((f.pos - 0.043_321_7).abs() < 1e-7);
        assert!((f.neg - 0.129_965_1).abs() < 1e-7);
        assert!((f.cost() + 0.086_643_4).abs() < 1e-6);
    }

    #[test]
    fn focal_cost_decreasing_and_diverging() {
        let grid: Vec<f64> = (1..=100).map(|i| i as f64 / 101.0).collect();
        let costs: Vec<f64> = grid.iter().map(|&p| focal_cost(p, FocalParams::default()).cost()).collect();
        assert!(costs.windows(2).all(|w| w[1] < w[0]));
        let near_one = focal_cost(1.0 - 1e-7, FocalParams::default()).cost();
        assert!(near_one < -10.0, "{near_one}");
    }

    #[test]
    fn l1_and_giou_costs() {
        let a = Box::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let b = Box::new(0.4, 0.5, 0.2, 0.3).unwrap();
        assert_eq!(l1_cost(&a, &a), 0.0);
        assert!((l1_cost(&a, &b) - 0.2).abs() < 1e-12);
        assert!((giou_cost(&a, &a) + 1.0).abs() < 1e-12);
        let c = Box::new(0.25, 0.25, 0.5, 0.5).unwrap();
        let d = Box::new(0.5, 0.5, 0.5, 0.5).unwrap();
        assert!((giou_cost(&c, &d) - 5.0 / 63.0).abs() < 1e-12);
    }

    #[test]
    fn cost_matrix_examples() {
        let b = Box::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let logits = Tensor::new(1, 1, vec![0.0]);
        let gts = [Instance { class_id: 0, bbox: b }];
        let ones = CostWeights::new(1.0, 1.0, 1.0).unwrap();
        let c = cost_matrix(&logits, &[b], &gts, ones, FocalParams::default()).unwrap();
        assert!((c.get(0, 0) + 1.086_643_4).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let boxes: Vec<Box> = (0..16)
            .map(|_| Box::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), 0.2, 0.3).unwrap())
            .collect();
        let logits = Tensor::new(16, 4, (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let gts = [inst(0, 0.3, 0.3, 0.2, 0.2), inst(3, 0.6, 0.5, 0.3, 0.2), inst(1, 0.5, 0.7, 0.1, 0.1)];
        let l1_only = CostWeights::new(0.0, 1.0, 0.0).unwrap();
        let c = cost_matrix(&logits, &boxes, &gts, l1_only, FocalParams::default()).unwrap();
        assert_eq!((c.num_queries(), c.num_gts()), (16, 3));
        for i in 0..16 {
            for j in 0..3 {
                assert!((c.get(i, j) - l1_cost(&boxes[i], &gts[j].bbox)).abs() < 1e-12);
            }
        }
        assert!(matches!(
            cost_matrix(&logits, &boxes, &[], l1_only, FocalParams::default()),
            Err(Error::NoGroundTruth)
        ));
    }

    #[test]
    fn tape_cost_matrix_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let boxes: Vec<Box> = (0..6)
            .map(|_| {
                Box::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.1..0.4), 0.3).unwrap()
            })
            .collect();
        let logits = Tensor::new(6, 3, (0..18).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let gts = [inst(2, 0.3, 0.3, 0.2, 0.2), inst(0, 0.6, 0.5, 0.3, 0.2)];
        let w = CostWeights::default();
        let plain = cost_matrix(&logits, &boxes, &gts, w, FocalParams::default()).unwrap();
        let mut t = Tape::new();
        let lv = t.constant(logits);
        let bv = t.constant(Tensor::new(6, 4, boxes.iter().flat_map(|b| b.as_array().map(|v| v as f32)).collect()));
        let cv = tape::cost_matrix(&mut t, lv, bv, &gts, w, FocalParams::default()).unwrap();
        for (a, b) in plain.values().iter().zip(t.value(cv).data()) {
            assert!((a - *b as f64).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn hungarian_examples() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);
        let c = CostMatrix::from_rows(&[vec![5.0], vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(hungarian(&c).unwrap().pairs, vec![(1, 0)]);
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(hungarian(&c), Err(Error::TooManyGroundTruths { .. })));
    }

    #[test]
    fn hungarian_lexicographic_tie_break() {
        let c = CostMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(hungarian(&c).unwrap().pairs, vec![(0, 0), (1, 1)]);
        let c = CostMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0], vec![0.0, 0.0]]).unwrap();
        // Optimal total 0 via (1->0, 0->1), (2->0, 0->1), (1->0, 2->1): smallest first query is 1.
        assert_eq!(hungarian(&c).unwrap().pairs, vec![(1, 0), (0, 1)]);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let ng = rng.gen_range(1..=7);
            let nq = rng.gen_range(ng..=7);
            let vals = (0..nq * ng).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let c = CostMatrix::new(nq, ng, vals).unwrap();
            let a = hungarian(&c).unwrap();
            assert!((a.total_cost - brute_force(&c)).abs() < 1e-9);
            let mut qs: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
            qs.sort();
            qs.dedup();
            assert_eq!(qs.len(), ng);
        }
    }

    #[test]
    fn perfect_boxes_have_zero_box_losses() {
        let gts = [inst(0, 0.3, 0.4, 0.2, 0.2), inst(1, 0.7, 0.6, 0.3, 0.1)];
        let mut t = Tape::new();
        let boxes = t.param(Tensor::from_rows(&[
            vec![0.7, 0.6, 0.3, 0.1],
            vec![0.5, 0.5, 0.5, 0.5],
            vec![0.3, 0.4, 0.2, 0.2],
        ]));
        let a = Assignment { pairs: vec![(2, 0), (0, 1)], total_cost: 0.0 };
        let l1 = tape::l1_loss(&mut t, boxes, &gts, &a, 2.0);
        let g = tape::giou_loss(&mut t, boxes, &gts, &a, 2.0);
        assert!(t.value(l1).item().abs() < 1e-6);
        assert!(t.value(g).item().abs() < 1e-6);
        let logits = t.param(Tensor::full(3, 2, -30.0));
        let none = Assignment { pairs: vec![], total_cost: 0.0 };
        let f = tape::focal_loss(&mut t, logits, &gts, &none, FocalParams::default(), 1.0);
        assert!(t.value(f).item() < 1e-20);
    }

    #[test]
    fn contrastive_examples() {
        let eval = |p: Tensor, a: Tensor| {
            let mut t = Tape::new();
            let pv = t.constant(p);
            let av = t.constant(a);
            let l = tape::contrastive_loss(&mut t, pv, av, 0.07);
            t.value(l).item()
        };
        let e = Tensor::row(vec![0.3, -0.2, 0.9]);
        assert!(eval(e.clone(), e).abs() < 1e-6);
        let p = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let swapped = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let aligned = eval(p.clone(), p.clone());
        assert!(aligned < eval(p.clone(), swapped));
        let scaled = eval(p.map(|v| 3.0 * v), p.map(|v| 0.5 * v));
        assert!((aligned - scaled).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn l1_triangle_inequality(v in proptest::collection::vec(0.1f64..0.9, 12)) {
            let b = |k: usize| Box::new(v[k], v[k + 1], v[k + 2] * 0.5, v[k + 3] * 0.5).unwrap();
            let (a, bb, c) = (b(0), b(4), b(8));
            prop_assert!(l1_cost(&a, &c) <= l1_cost(&a, &bb) + l1_cost(&bb, &c) + 1e-12);
        }

        #[test]
        fn giou_cost_negates_giou(v in proptest::collection::vec(0.1f64..0.9, 8)) {
            let a = Box::new(v[0], v[1], v[2] * 0.5, v[3] * 0.5).unwrap();
            let b = Box::new(v[4], v[5], v[6] * 0.5, v[7] * 0.5).unwrap();
            prop_assert_eq!(giou_cost(&a, &b) + giou(&a, &b), 0.0);
        }

        #[test]
        fn cost_matrix_affine_in_weights(l in 0.1f64..5.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let boxes: Vec<Box> = (0..4).map(|_| Box::new(rng.gen_range(0.2..0.8), 0.5, 0.2, 0.2).unwrap()).collect();
            let logits = Tensor::new(4, 2, (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let gts = [inst(1, 0.4, 0.5, 0.2, 0.3)];
            let f = FocalParams::default();
            let at = |x: f64| cost_matrix(&logits, &boxes, &gts, CostWeights { lambda_focal: x, lambda_l1: 1.0, lambda_giou: 1.0 }, f).unwrap();
            let (c0, c1, cl) = (at(0.0), at(1.0), at(l));
            for k in 0..4 {
                let expect = c0.values()[k] + l * (c1.values()[k] - c0.values()[k]);
                prop_assert!((cl.values()[k] - expect).abs() < 1e-9);
            }
        }
    }
}
