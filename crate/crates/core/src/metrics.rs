//! Hard-mask Dice, forgetting rates and dataset evaluation.

use crate::error::{bail, Result};
use crate::model::{forward, ParamStore, SegLogits};
use crate::prompts::Vocab;
use crate::synth::{Batch, Sample, TaskSpec};
use serde::{Deserialize, Serialize};

const EVAL_BATCH: usize = 32;

/// `2|P ∩ G| / (|P| + |G|)`, with two empty masks scoring 1.
pub fn dice_coeff(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        bail!(Input, "mask lengths differ: {} vs {}", pred.len(), gt.len());
    }
    if let Some(v) = pred.iter().chain(gt).find(|&&v| v > 1) {
        bail!(Input, "mask value {v} is not binary");
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        inter += usize::from(a & b);
        p += usize::from(a);
        g += usize::from(b);
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Foreground where the softmax foreground probability exceeds one half;
/// exact ties go to background. One row-major mask per batch item.
pub fn binarize(logits: &SegLogits) -> Vec<Vec<u8>> {
    let s = logits.values.shape();
    let (batch, hw) = (s[0], s[2] * s[3]);
    let data = logits.values.data();
    (0..batch)
        .map(|b| {
            let bg = &data[b * 2 * hw..b * 2 * hw + hw];
            let fg = &data[b * 2 * hw + hw..(b + 1) * 2 * hw];
            bg.iter()
                .zip(fg)
                .map(|(&l0, &l1)| {
                    let p = 1.0 / (1.0 + (l0 - l1).exp());
                    u8::from(p > 0.5)
                })
                .collect()
        })
        .collect()
}

/// Mean per-sample Dice of the model on `samples`, using their own prompts.
pub fn evaluate_dice(params: &ParamStore, spec: &TaskSpec, samples: &[Sample], vocab: &Vocab) -> Result<f64> {
    if samples.is_empty() {
        bail!(Input, "no samples to evaluate");
    }
    let mut total = 0.0;
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = Batch::new(&refs, spec, vocab, None)?;
        let logits = forward(params, &batch.images, &batch.prompts)?;
        for (pred, s) in binarize(&logits).iter().zip(chunk) {
            total += dice_coeff(pred, &s.mask)?;
        }
    }
    Ok(total / samples.len() as f64)
}

/// Summary of a Dice trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Final Dice of every task, in training order.
    pub per_task_dice: Vec<f64>,
    pub average_dice: f64,
    /// Peak minus final Dice for every task but the last.
    pub per_task_forgetting: Vec<f64>,
    /// Sum of `per_task_forgetting`.
    pub forgetting_total: f64,
    /// Mean of `per_task_forgetting`, in percent.
    pub forgetting_mean_pct: f64,
}

/// Forgetting from a square matrix whose row `k` holds the test Dice of
/// every task (columns, training order) after training step `k`.
///
/// A task's peak is its best score at or after its own training step.
pub fn forgetting_rate(matrix: &[Vec<f64>]) -> Result<EvalResult> {
    let t = matrix.len();
    if t == 0 {
        bail!(State, "empty Dice matrix");
    }
    for (k, row) in matrix.iter().enumerate() {
        if row.len() != t {
            bail!(State, "checkpoint {k} has {} entries, expected {t}", row.len());
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            bail!(State, "checkpoint {k} holds Dice {v} outside [0, 1]");
        }
    }
    let last = &matrix[t - 1];
    let per_task_forgetting: Vec<f64> = (0..t - 1)
        .map(|j| {
            let peak = (j..t).map(|k| matrix[k][j]).fold(f64::NEG_INFINITY, f64::max);
            peak - last[j]
        })
        .collect();
    let forgetting_total: f64 = per_task_forgetting.iter().sum();
    let forgetting_mean_pct = if t > 1 { 100.0 * forgetting_total / (t - 1) as f64 } else { 0.0 };
    Ok(EvalResult {
        per_task_dice: last.clone(),
        average_dice: last.iter().sum::<f64>() / t as f64,
        per_task_forgetting,
        forgetting_total,
        forgetting_mean_pct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dice_examples() {
        assert_eq!(dice_coeff(&[1, 1, 0], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(dice_coeff(&[1, 0, 0], &[0, 1, 0]).unwrap(), 0.0);
        assert_eq!(dice_coeff(&[1, 1, 0, 0], &[0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(dice_coeff(&[0, 0], &[0, 0]).unwrap(), 1.0);
        assert!(dice_coeff(&[1], &[1, 0]).is_err());
        assert!(dice_coeff(&[2], &[1]).is_err());
    }

    #[test]
    fn dice_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let p: Vec<u8> = (0..64).map(|_| rng.random_range(0..2)).collect();
            let g: Vec<u8> = (0..64).map(|_| rng.random_range(0..2)).collect();
            let inter = p.iter().zip(&g).filter(|(a, b)| **a == 1 && **b == 1).count();
            let count = p.iter().filter(|&&v| v == 1).count() + g.iter().filter(|&&v| v == 1).count();
            let expect = if count == 0 { 1.0 } else { 2.0 * inter as f64 / count as f64 };
            assert_eq!(dice_coeff(&p, &g).unwrap(), expect);
            assert_eq!(dice_coeff(&g, &p).unwrap(), expect);
        }
    }

    #[test]
    fn binarize_thresholds_with_ties_to_background() {
        // One item, 2x2 pixels: bg channel then fg channel.
        let v = Tensor::new(vec![1, 2, 2, 2], vec![0.0, 0.0, 5.0, -1.0, 9.0, 0.0, -5.0, -1.0 + 1e-9]).unwrap();
        assert_eq!(binarize(&SegLogits { values: v }), vec![vec![1, 0, 0, 1]]);
    }

    #[test]
    fn forgetting_examples() {
        let flat = vec![vec![0.5, 0.2], vec![0.5, 0.7]];
        let r = forgetting_rate(&flat).unwrap();
        assert_eq!(r.forgetting_total, 0.0);
        assert_eq!(r.per_task_dice, vec![0.5, 0.7]);
        assert!((r.average_dice - 0.6).abs() < 1e-15);

        let kvasir = vec![vec![0.8951, 0.0], vec![0.6736, 0.5]];
        assert!((forgetting_rate(&kvasir).unwrap().forgetting_total - 0.2215).abs() < 1e-12);

        let two = vec![vec![0.9, 0.0, 0.0], vec![0.85, 0.8, 0.0], vec![0.8, 0.7, 0.6]];
        let r = forgetting_rate(&two).unwrap();
        assert!((r.forgetting_total - 0.2).abs() < 1e-12);
        assert!((r.forgetting_mean_pct - 10.0).abs() < 1e-9);
    }

    #[test]
    fn peak_can_come_after_own_training() {
        let m = vec![vec![0.4, 0.0], vec![0.6, 0.5]];
        assert_eq!(forgetting_rate(&m).unwrap().per_task_forgetting, vec![0.0]);
        let m = vec![vec![0.4, 0.0, 0.0], vec![0.6, 0.5, 0.0], vec![0.3, 0.5, 0.5]];
        assert!((forgetting_rate(&m).unwrap().per_task_forgetting[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn incomplete_matrix_rejected() {
        assert!(forgetting_rate(&[]).is_err());
        assert!(forgetting_rate(&[vec![0.5, 0.5], vec![0.5]]).is_err());
        assert!(forgetting_rate(&[vec![1.5]]).is_err());
    }
}
