//! Measurements against ground truth. This is the only code that reads
//! ground-truth masks.

use rayon::prelude::*;

use super::finetune::{attention_pseudo_label, PseudoLabelParams};
use crate::convnet::Network;
use crate::dataset::{DatasetManifest, Sample};
use crate::error::Result;
use crate::pseudo_label::{mean_iou, MeanIou};
use crate::tensor::{FeatureMap, LabelImage, IGNORE};

pub fn load_truths(manifest: &DatasetManifest, indices: &[usize]) -> Result<Vec<LabelImage>> {
    indices.par_iter().map(|&i| manifest.read_truth(i)).collect()
}

/// The most frequent foreground code, lowest code on ties; 0 when the mask
/// has no foreground.
pub fn dominant_class(truth: &LabelImage) -> u32 {
    let mut counts = std::collections::BTreeMap::new();
    for &c in truth.labels() {
        if c != 0 && c != IGNORE {
            *counts.entry(c).or_insert(0usize) += 1;
        }
    }
    counts
        .into_iter()
        .fold((0, 0), |best, (c, n)| if n > best.1 { (c, n) } else { best })
        .0
}

/// Fraction of records whose tag names the dominant object of their ground
/// truth.
pub fn tag_purity(manifest: &DatasetManifest, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let truths = load_truths(manifest, indices)?;
    let pure = indices
        .iter()
        .zip(&truths)
        .filter(|(&i, t)| manifest.records()[i].tag == dominant_class(t))
        .count();
    Ok(pure as f64 / indices.len() as f64)
}

pub fn evaluate_masks(manifest: &DatasetManifest, indices: &[usize], preds: &[LabelImage]) -> Result<MeanIou> {
    let truths = load_truths(manifest, indices)?;
    mean_iou(preds, &truths, manifest.class_count())
}

pub fn evaluate_segmenter(manifest: &DatasetManifest, samples: &[Sample], net: &Network) -> Result<MeanIou> {
    let preds: Vec<LabelImage> = samples
        .par_iter()
        .map(|s| net.predict_mask(&s.image))
        .collect::<Result<_>>()?;
    let indices: Vec<usize> = samples.iter().map(|s| s.index).collect();
    evaluate_masks(manifest, &indices, &preds)
}

/// `tag` where the single-channel map exceeds `threshold`, background
/// elsewhere.
pub fn threshold_mask(map: &FeatureMap, tag: u32, threshold: f64) -> LabelImage {
    let labels = map.values().iter().map(|&v| if v > threshold { tag } else { 0 }).collect();
    LabelImage::new(map.height(), map.width(), labels).expect("same size")
}

/// Pseudo-mask quality of each attention variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ablation {
    pub forward_only: f64,
    pub backward_only: f64,
    pub fused: f64,
    pub fused_smoothed: f64,
    /// The trimap masks actually used for training; IGNORE pixels count as
    /// no prediction.
    pub trimap: f64,
}

/// Scores hard-thresholded attention variants for each sample's tag
/// against ground truth.
pub fn attention_ablation(
    manifest: &DatasetManifest,
    samples: &[Sample],
    classifier: &Network,
    params: &PseudoLabelParams,
    threshold: f64,
) -> Result<Ablation> {
    let variants: Vec<[LabelImage; 5]> = samples
        .par_iter()
        .map(|s| {
            let p = attention_pseudo_label(classifier, s, params)?;
            Ok([
                threshold_mask(&p.bundle.forward_only()?, s.tag, threshold),
                threshold_mask(&p.bundle.backward_only()?, s.tag, threshold),
                threshold_mask(&p.bundle.fused.map, s.tag, threshold),
                threshold_mask(&p.smoothed.map, s.tag, threshold),
                p.mask.mask,
            ])
        })
        .collect::<Result<_>>()?;
    let indices: Vec<usize> = samples.iter().map(|s| s.index).collect();
    let truths = load_truths(manifest, &indices)?;
    let k = manifest.class_count();
    let score = |v: usize| -> Result<f64> {
        let preds: Vec<LabelImage> = variants.iter().map(|m| m[v].clone()).collect();
        Ok(mean_iou(&preds, &truths, k)?.mean)
    };
    Ok(Ablation {
        forward_only: score(0)?,
        backward_only: score(1)?,
        fused: score(2)?,
        fused_smoothed: score(3)?,
        trimap: score(4)?,
    })
}
