use crate::nn::{Graph, NnError, Var};
use crate::phantom::Sample;

use super::SegError;

/// Anything that maps images to per-pixel foreground probabilities.
pub trait SegPredictor: Sync {
    /// `images` is `[B, H, W]` flattened; returns probabilities of the same shape.
    fn predict_probs(
        &self,
        images: &[f32],
        batch: usize,
        height: usize,
        width: usize,
    ) -> Result<Vec<f32>, SegError>;
}

/// Soft Dice loss with smoothing 1, averaged over the batch.
pub fn dice_loss(g: &mut Graph, probs: Var, mask: Var) -> Result<Var, NnError> {
    g.soft_dice(probs, mask, 1.0)
}

/// `2|pred ∩ truth| / (|pred| + |truth|)`, and 1 when both are empty.
pub fn dice_score(pred: &[u8], truth: &[u8]) -> Result<f64, SegError> {
    if pred.len() != truth.len() {
        return Err(SegError::Shape(format!(
            "prediction has {} pixels, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(v) = pred.iter().chain(truth).find(|&&v| v > 1) {
        return Err(SegError::NotBinary(format!(
            "dice_score needs binary masks, found value {v}"
        )));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        inter += (p & t) as usize;
        total += (p + t) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Table label of a site: `"A"` becomes `"Hospital A"`.
pub fn site_label(site: &str) -> String {
    format!("Hospital {site}")
}

/// Dice of one model on one test set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub train_source: String,
    pub test_source: String,
    pub dice: f64,
    pub per_slice: Vec<f64>,
}

/// Thresholds the predictor's probabilities on every test slice and scores them.
/// Test slices must be real and come from a single site.
pub fn evaluate(
    model: &dyn SegPredictor,
    test: &[&Sample],
    threshold: f32,
    train_source: &str,
) -> Result<MetricRow, SegError> {
    let first = test.first().ok_or(SegError::EmptySet("test"))?;
    let site = first.provenance.site().to_string();
    for s in test {
        if s.provenance.is_synthetic() {
            return Err(SegError::Synthetic {
                set: "test",
                patient: s.patient_id,
                slice: s.slice_index,
            });
        }
        if s.provenance.site() != site {
            return Err(SegError::Config(format!(
                "test set mixes sites {site} and {}",
                s.provenance.site()
            )));
        }
    }
    let (h, w) = (first.height, first.width);
    let mut per_slice = Vec::with_capacity(test.len());
    for chunk in test.chunks(16) {
        let images: Vec<f32> = chunk.iter().flat_map(|s| s.image.iter().copied()).collect();
        let probs = model.predict_probs(&images, chunk.len(), h, w)?;
        for (s, p) in chunk.iter().zip(probs.chunks_exact(h * w)) {
            let pred: Vec<u8> = p.iter().map(|&v| (v >= threshold) as u8).collect();
            per_slice.push(dice_score(&pred, &s.mask)?);
        }
    }
    let dice = per_slice.iter().sum::<f64>() / per_slice.len() as f64;
    Ok(MetricRow {
        train_source: train_source.to_string(),
        test_source: site_label(&site),
        dice,
        per_slice,
    })
}
