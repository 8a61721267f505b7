//! COCO-style detection metrics under the prompt-pool protocol.
//!
//! Each evaluated image is run against one prompt set holding every class,
//! built from `prompts_per_class` seeded draws from the split's prompt pool.
//! Detections are greedily matched per image and class in descending score
//! order, and AP is the 101-point interpolated area under the
//! precision/recall envelope.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{iou, Box};
use crate::model::{Model, PromptSet};
use crate::synthdata::{Dataset, Instance, Scene, SplitName, NUM_CLASSES};

/// Detections kept per image.
pub const MAX_DETECTIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub bbox: Box,
    pub score: f64,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy one-to-one matching; returns a TP flag per detection in input
/// order. A detection is a TP when it has the ground truth's class, reaches
/// `iou_threshold`, and the best such unmatched ground truth exists.
pub fn match_detections(dets: &[Detection], gts: &[Instance], iou_threshold: f64) -> Vec<bool> {
    let mut flags = vec![false; dets.len()];
    let mut taken = vec![false; gts.len()];
    for i in score_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.class_id != d.class_id {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            flags[i] = true;
        }
    }
    flags
}

/// 101-point interpolated AP from TP flags already sorted by descending
/// score.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // precision envelope from the right
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut total = 0.0;
    let mut k = 0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        while k < recall.len() && recall[k] < target - 1e-12 {
            k += 1;
        }
        if k < recall.len() {
            total += precision[k];
        }
    }
    total / 101.0
}

/// Per-image detections from a prompt set's predictions.
pub fn detect(model: &Model, scene: &Scene, prompts: &PromptSet) -> Result<Vec<Detection>> {
    let pred = model.predict(scene, prompts)?;
    let mut dets = Vec::with_capacity(pred.logits.len());
    for (q, bbox) in pred.boxes.iter().enumerate() {
        for (k, &class_id) in pred.class_ids.iter().enumerate() {
            let score = 1.0 / (1.0 + (-(pred.logits.get(q, k) as f64)).exp());
            dets.push(Detection { class_id, bbox: *bbox, score });
        }
    }
    let order = score_order(&dets);
    Ok(order.into_iter().take(MAX_DETECTIONS).map(|i| dets[i]).collect())
}

/// Aggregated metrics for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub split: String,
    pub prompts_per_class: usize,
    pub seed: u64,
    pub num_images: usize,
    pub ap50: f64,
    pub map: f64,
    /// AP@0.5 per class, `None` for classes without ground truth.
    pub per_class_ap50: Vec<Option<f64>>,
    /// AP averaged over thresholds, per class.
    pub per_class_map: Vec<Option<f64>>,
    pub excluded_classes: Vec<usize>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv_header() -> String {
        let mut h = String::from("run_id,split,prompts_per_class,ap50,map");
        for c in 0..NUM_CLASSES {
            let _ = write!(h, ",ap50_c{c}");
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!("{},{},{},{:.6},{:.6}", self.run_id, self.split, self.prompts_per_class, self.ap50, self.map);
        for c in 0..NUM_CLASSES {
            match self.per_class_ap50.get(c).copied().flatten() {
                Some(v) => {
                    let _ = write!(r, ",{v:.6}");
                }
                None => r.push(','),
            }
        }
        r
    }
}

/// Per-class AP at each threshold from per-image detections.
pub fn evaluate_detections(
    per_image: &[(Vec<Detection>, Vec<Instance>)],
    thresholds: &[f64],
) -> (Vec<Option<Vec<f64>>>, Vec<usize>) {
    let mut n_gt = [0usize; NUM_CLASSES];
    for (_, gts) in per_image {
        for g in gts {
            n_gt[g.class_id] += 1;
        }
    }
    let mut per_class = vec![None; NUM_CLASSES];
    for (c, slot) in per_class.iter_mut().enumerate() {
        if n_gt[c] == 0 {
            continue;
        }
        let aps = thresholds
            .iter()
            .map(|&thr| {
                // (score, image, det index, tp)
                let mut scored: Vec<(f64, usize, usize, bool)> = Vec::new();
                for (img, (dets, gts)) in per_image.iter().enumerate() {
                    let dc: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).copied().collect();
                    let gc: Vec<Instance> = gts.iter().filter(|g| g.class_id == c).copied().collect();
                    let flags = match_detections(&dc, &gc, thr);
                    scored.extend(dc.iter().zip(flags).enumerate().map(|(k, (d, f))| (d.score, img, k, f)));
                }
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                let flags: Vec<bool> = scored.iter().map(|s| s.3).collect();
                average_precision(&flags, n_gt[c])
            })
            .collect();
        *slot = Some(aps);
    }
    let excluded = (0..NUM_CLASSES).filter(|&c| n_gt[c] == 0).collect();
    (per_class, excluded)
}

/// Options for [`map_over`].
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub run_id: String,
    pub prompts_per_class: usize,
    pub seed: u64,
    pub thresholds: Vec<f64>,
    /// Evaluate only the first `n` scenes of the split.
    pub max_images: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { run_id: "eval".into(), prompts_per_class: 64, seed: 0, thresholds: coco_thresholds(), max_images: None }
    }
}

/// Evaluates `model` on a split with prompts drawn from that split's pool.
pub fn map_over(model: &Model, data: &Dataset, split: SplitName, opts: &EvalOptions) -> Result<Report> {
    let pool_split = data.split(split.pool_for());
    let pool = data.pool(split);
    let classes: Vec<usize> = (0..NUM_CLASSES).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let prompts = model.sample_prompts(&pool, pool_split, &classes, opts.prompts_per_class, &mut rng)?;

    let scenes = &data.split(split).scenes;
    let scenes = &scenes[..opts.max_images.unwrap_or(scenes.len()).min(scenes.len())];
    let per_image: Vec<(Vec<Detection>, Vec<Instance>)> = scenes
        .par_iter()
        .map(|s| Ok((detect(model, s, &prompts)?, s.instances.clone())))
        .collect::<Result<_>>()?;

    let (per_class, excluded) = evaluate_detections(&per_image, &opts.thresholds);
    let idx50 = opts.thresholds.iter().position(|t| (t - 0.5).abs() < 1e-9);
    let per_class_ap50: Vec<Option<f64>> =
        per_class.iter().map(|a| a.as_ref().and_then(|v| idx50.map(|i| v[i]))).collect();
    let per_class_map: Vec<Option<f64>> =
        per_class.iter().map(|a| a.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64)).collect();
    let mean = |v: &[Option<f64>]| {
        let xs: Vec<f64> = v.iter().flatten().copied().collect();
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    Ok(Report {
        run_id: opts.run_id.clone(),
        split: split.as_str().to_string(),
        prompts_per_class: opts.prompts_per_class,
        seed: opts.seed,
        num_images: scenes.len(),
        ap50: mean(&per_class_ap50),
        map: mean(&per_class_map),
        per_class_ap50,
        per_class_map,
        excluded_classes: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> Box {
        Box::new(cx, cy, w, h).unwrap()
    }

    fn det(class_id: usize, bbox: Box, score: f64) -> Detection {
        Detection { class_id, bbox, score }
    }

    #[test]
    fn matching_examples() {
        let gt = [Instance { class_id: 0, bbox: b(0.5, 0.5, 0.2, 0.2) }];
        // same size, shifted so IoU = 0.6: overlap 0.2*x / (0.08 - 0.2x) = 0.6 -> x = 0.15
        let shifted = b(0.55, 0.5, 0.2, 0.2);
        assert!((iou(&shifted, &gt[0].bbox) - 0.6).abs() < 1e-12);
        assert_eq!(match_detections(&[det(0, shifted, 0.9)], &gt, 0.5), vec![true]);
        let two = [det(0, gt[0].bbox, 0.3), det(0, gt[0].bbox, 0.8)];
        assert_eq!(match_detections(&two, &gt, 0.5), vec![false, true]);
        assert_eq!(match_detections(&[det(1, gt[0].bbox, 0.9)], &gt, 0.5), vec![false]);
        // equal scores: lower index wins
        let tie = [det(0, gt[0].bbox, 0.5), det(0, gt[0].bbox, 0.5)];
        assert_eq!(match_detections(&tie, &gt, 0.5), vec![true, false]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), 1.0);
        assert_eq!(average_precision(&[true, false], 1), 1.0);
        // recall 0.5 reached at precision 0.5: points 0.00..=0.50 score 0.5
        let ap = average_precision(&[false, true], 2);
        assert!((ap - 51.0 * 0.5 / 101.0).abs() < 1e-12);
        assert!((ap - 0.25).abs() < 0.01);
        assert_eq!(average_precision(&[], 3), 0.0);
    }

    #[test]
    fn report_csv_layout() {
        let r = Report {
            run_id: "r".into(),
            split: "val_ood".into(),
            prompts_per_class: 8,
            seed: 0,
            num_images: 1,
            ap50: 0.5,
            map: 0.25,
            per_class_ap50: vec![Some(0.5); NUM_CLASSES],
            per_class_map: vec![Some(0.25); NUM_CLASSES],
            excluded_classes: vec![],
        };
        let cols = Report::csv_header().split(',').count();
        assert_eq!(r.csv_row().split(',').count(), cols);
        assert!(r.csv_row().starts_with("r,val_ood,8,0.500000,0.250000"));
    }

    proptest! {
        #[test]
        fn fp_to_tp_never_lowers_ap(flags in prop::collection::vec(any::<bool>(), 1..30), pick in 0usize..30) {
            let n_gt = flags.iter().filter(|f| **f).count() + 1;
            let base = average_precision(&flags, n_gt);
            let mut better = flags.clone();
            let i = pick % flags.len();
            if !better[i] {
                better[i] = true;
                prop_assert!(average_precision(&better, n_gt) >= base - 1e-12);
            }
        }

        #[test]
        fn monotone_rescaling_keeps_ap(scores in prop::collection::vec(0.01f64..0.99, 1..12)) {
            let gts = vec![
                (vec![], vec![Instance { class_id: 2, bbox: b(0.3, 0.3, 0.2, 0.2) }]),
            ];
            let mk = |f: &dyn Fn(f64) -> f64| {
                let dets: Vec<Detection> = scores
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| det(2, b(0.3 + 0.01 * i as f64, 0.3, 0.2, 0.2), f(s)))
                    .collect();
                let mut imgs = gts.clone();
                imgs[0].0 = dets;
                evaluate_detections(&imgs, &[0.5, 0.75]).0[2].clone()
            };
            prop_assert_eq!(mk(&|s| s), mk(&|s| s * s * 0.5));
        }
    }
}
