use rayon::prelude::*;

use super::report::{Decision, StageReport};
use crate::attention::{class_attention, AttentionBundle, AttentionMap};
use crate::convnet::{Head, Network};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::pseudo_label::{generate_segments, smooth, trimap, Provenance, PseudoMask, SegmentParams};
use crate::seed;
use crate::tensor::{FeatureMap, LabelImage};

/// Thresholds and segment settings shared by both pseudo-label paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabelParams {
    pub lambda_forward: f64,
    pub lambda_backward: f64,
    /// Trimap foreground threshold (δ1).
    pub upper: f64,
    /// Trimap background threshold (δ2).
    pub lower: f64,
    /// Segment settings; the seed is a root from which every image derives
    /// its own stream.
    pub segments: SegmentParams,
}

impl Default for PseudoLabelParams {
    fn default() -> Self {
        Self {
            lambda_forward: 1.0,
            lambda_backward: 1.0,
            upper: 0.65,
            lower: 0.5,
            segments: SegmentParams::default(),
        }
    }
}

impl PseudoLabelParams {
    /// Segments for the image of record `index`, seeded per record.
    pub fn segments_for(&self, sample: &Sample) -> Result<crate::pseudo_label::SegmentMap> {
        let params = SegmentParams {
            seed: seed::sub_seed(self.segments.seed, &format!("record/{}", sample.index)),
            ..self.segments
        };
        generate_segments(&sample.image, &params)
    }
}

/// Attention products and the resulting pseudo mask for one image.
#[derive(Debug, Clone)]
pub struct AttentionPseudoLabel {
    pub bundle: AttentionBundle,
    pub smoothed: AttentionMap,
    pub mask: PseudoMask,
}

/// Fused attention for the image's tag, smoothed over its segments and
/// trimapped.
pub fn attention_pseudo_label(
    classifier: &Network,
    sample: &Sample,
    params: &PseudoLabelParams,
) -> Result<AttentionPseudoLabel> {
    let bundle = class_attention(
        classifier,
        &sample.image,
        sample.tag as usize,
        params.lambda_forward,
        params.lambda_backward,
    )?;
    let segments = params.segments_for(sample)?;
    let smoothed = smooth(&bundle.fused, &segments)?;
    let mask = trimap(&smoothed, sample.tag, params.upper, params.lower, Provenance::Attention)?;
    Ok(AttentionPseudoLabel {
        bundle,
        smoothed,
        mask,
    })
}

/// Pseudo masks for a whole set, in input order.
pub fn attention_pseudo_masks(
    classifier: &Network,
    samples: &[Sample],
    params: &PseudoLabelParams,
) -> Result<Vec<PseudoMask>> {
    samples
        .par_iter()
        .map(|s| attention_pseudo_label(classifier, s, params).map(|p| p.mask))
        .collect()
}

/// Binary mask of pixels where the tag's probability is at least that of
/// every other class, background included. Ties count as 1.
pub fn compute_mask(seg_probs: &FeatureMap, tag: u32) -> Result<LabelImage> {
    let (c, h, w) = seg_probs.shape();
    if tag == 0 {
        return Err(Error::usage("background is never a tag"));
    }
    if tag as usize >= c {
        return Err(Error::usage(format!("tag {tag} outside 1..={}", c - 1)));
    }
    let t = seg_probs.plane(tag as usize);
    let labels = (0..h * w)
        .map(|p| {
            let best_other = (0..c)
                .filter(|&k| k != tag as usize)
                .map(|k| seg_probs.plane(k)[p])
                .fold(f64::NEG_INFINITY, f64::max);
            u32::from(t[p] >= best_other)
        })
        .collect();
    LabelImage::new(h, w, labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateOutcome {
    pub accept: bool,
    /// `P(tag | image ⊙ mask)`.
    pub probability: f64,
}

/// Classifies the masked image and accepts when the tag's probability
/// strictly exceeds `mu`.
pub fn finetune_gate(
    classifier: &Network,
    image: &FeatureMap,
    mask: &LabelImage,
    tag: u32,
    mu: f64,
) -> Result<GateOutcome> {
    if tag == 0 || tag as usize > classifier.class_count() {
        return Err(Error::usage(format!(
            "tag {tag} outside 1..={}",
            classifier.class_count()
        )));
    }
    let probability = classifier.classify(&image.masked(mask)?)?[tag as usize - 1];
    Ok(GateOutcome {
        accept: probability > mu,
        probability,
    })
}

/// An accepted pool image with its new pseudo mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneExample {
    /// Position in the pool slice.
    pub position: usize,
    pub mask: PseudoMask,
}

/// Runs mask, gate and pseudo-labeling over the pool. Only images and
/// their noisy tags are consulted.
pub fn build_finetune_set(
    pool: &[Sample],
    segmenter: &Network,
    classifier: &Network,
    mu: f64,
    params: &PseudoLabelParams,
) -> Result<(Vec<FinetuneExample>, StageReport)> {
    if segmenter.head() != Head::Segmenter || classifier.head() != Head::Classifier {
        return Err(Error::usage("build_finetune_set needs a segmenter and a classifier"));
    }
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::config(format!("gate threshold {mu} outside (0, 1)")));
    }
    let results: Vec<(Decision, Option<PseudoMask>)> = pool
        .par_iter()
        .map(|s| {
            let probs = segmenter.segment_probs(&s.image)?;
            let m = compute_mask(&probs, s.tag)?;
            let gate = finetune_gate(classifier, &s.image, &m, s.tag, mu)?;
            let mask = if gate.accept {
                let tag_map = FeatureMap::new(1, probs.height(), probs.width(), probs.plane(s.tag as usize).to_vec())?;
                let attention = AttentionMap::new(s.tag as usize, tag_map)?;
                let smoothed = smooth(&attention, &params.segments_for(s)?)?;
                Some(trimap(&smoothed, s.tag, params.upper, params.lower, Provenance::FineTune)?)
            } else {
                None
            };
            let decision = Decision {
                index: s.index,
                tag: s.tag,
                score: gate.probability,
                rank: None,
                kept: gate.accept,
                reason: if gate.accept { String::new() } else { "gate".into() },
            };
            Ok((decision, mask))
        })
        .collect::<Result<_>>()?;
    let mut examples = Vec::new();
    let mut decisions = Vec::with_capacity(results.len());
    for (position, (d, mask)) in results.into_iter().enumerate() {
        if let Some(mask) = mask {
            examples.push(FinetuneExample { position, mask });
        }
        decisions.push(d);
    }
    Ok((examples, StageReport::new("finetune-gate", decisions)))
}
