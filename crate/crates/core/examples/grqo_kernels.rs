//! Walks through the GRQO pieces on hand-made numbers: matching costs,
//! rewards, group advantages, the objectness mask and the k3 KL.

use grqo::geometry::Box;
use grqo::grqo::{alpha_mask, grqo_loss, group_advantages, kl_k3, query_rewards, ObjectnessPair};
use grqo::objective::{cost_matrix, hungarian, CostWeights, FocalParams};
use grqo::synthdata::Instance;
use grqo::tensor::Tensor;

fn main() -> grqo::Result<()> {
    // four queries, two classes present, two ground truths
    let logits = Tensor::new(4, 2, vec![3.0, -2.0, -1.0, 2.5, 0.0, 0.0, -3.0, -3.0]);
    let boxes = [
        Box::new(0.30, 0.30, 0.20, 0.20)?,
        Box::new(0.70, 0.65, 0.25, 0.20)?,
        Box::new(0.50, 0.50, 0.40, 0.40)?,
        Box::new(0.10, 0.90, 0.05, 0.05)?,
    ];
    let gts = [
        Instance { class_id: 0, bbox: Box::new(0.31, 0.29, 0.20, 0.22)? },
        Instance { class_id: 1, bbox: Box::new(0.70, 0.66, 0.24, 0.20)? },
    ];
    let costs = cost_matrix(&logits, &boxes, &gts, CostWeights::default(), FocalParams::default())?;
    let assignment = hungarian(&costs)?;
    println!("assignment {:?}, total cost {:.3}", assignment.pairs, assignment.total_cost);

    let rewards = query_rewards(&costs)?;
    let adv = group_advantages(&rewards, 1e-6);
    for (q, (r, a)) in rewards.iter().zip(&adv).enumerate() {
        println!("query {q}: reward {r:>7.3}  advantage {a:>6.3}");
    }

    let pair = ObjectnessPair::from_scores(vec![5, 12, 40, 63], &[2.0, 1.5, 0.2, -1.0], &[1.8, 1.6, 0.1, -0.5])?;
    let alpha = alpha_mask(&pair.current, 1e3, 0.5);
    let kl = kl_k3(&pair);
    let log_probs: Vec<f64> = pair.current.iter().map(|p| p.ln()).collect();
    println!("objectness {:.3?}", pair.current);
    println!("alpha mask {alpha:?}");
    println!("k3 KL      {kl:.5?}");
    println!("loss       {:.4}", grqo_loss(&adv, &alpha, &log_probs, &kl, 0.04)?);
    Ok(())
}
