//! From attention maps to trimap pseudo masks.
//!
//! Superpixels come from seeded SLIC-style clustering on (color, position)
//! with connectivity enforcement. Smoothing replaces each pixel by its
//! segment mean, and the trimap turns the smoothed map into a mask with a
//! confident foreground, a confident background and an ignored band.

use std::collections::VecDeque;

use rand::Rng;

use crate::attention::AttentionMap;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{FeatureMap, LabelImage, IGNORE};

/// A partition of the pixel grid into nonempty, 4-connected segments coded
/// `0..count`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMap {
    labels: LabelImage,
    count: usize,
}

impl SegmentMap {
    /// Validates an externally supplied partition.
    pub fn new(labels: LabelImage) -> Result<Self> {
        let count = labels.labels().iter().map(|&c| c as usize + 1).max().unwrap_or(0);
        if labels.labels().contains(&IGNORE) {
            return Err(Error::usage("segment codes must not contain IGNORE"));
        }
        let mut sizes = vec![0usize; count];
        for &c in labels.labels() {
            sizes[c as usize] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::usage(format!("segment {empty} is empty")));
        }
        let (_, components) = connected_components(&labels);
        if components != count {
            return Err(Error::usage(format!(
                "{count} segment codes but {components} connected regions"
            )));
        }
        Ok(Self { labels, count })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn labels(&self) -> &LabelImage {
        &self.labels
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &c in self.labels.labels() {
            sizes[c as usize] += 1;
        }
        sizes
    }
}

/// 4-connected components of equal codes, numbered in raster order of their
/// first pixel.
fn connected_components(labels: &LabelImage) -> (Vec<usize>, usize) {
    let (h, w) = (labels.height(), labels.width());
    let codes = labels.labels();
    let mut comp = vec![usize::MAX; h * w];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for q in neighbors4(p, h, w) {
                if comp[q] == usize::MAX && codes[q] == codes[start] {
                    comp[q] = next;
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    (comp, next)
}

fn neighbors4(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (p / w, p % w);
    [
        (y > 0).then(|| p - w),
        (x > 0).then(|| p - 1),
        (x + 1 < w).then(|| p + 1),
        (y + 1 < h).then(|| p + w),
    ]
    .into_iter()
    .flatten()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentParams {
    pub target_count: usize,
    pub compactness: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            target_count: 32,
            compactness: 20.0,
            iterations: 10,
            seed: 0,
        }
    }
}

// Colors in [0, 1] are stretched to the range SLIC's compactness was tuned
// for (CIELAB lightness spans 0..100).
const COLOR_SCALE: f64 = 100.0;

struct Center {
    y: f64,
    x: f64,
    color: Vec<f64>,
}

/// Seeded SLIC superpixels over all channels of `image`.
pub fn generate_segments(image: &FeatureMap, params: &SegmentParams) -> Result<SegmentMap> {
    if params.target_count == 0 {
        return Err(Error::usage("segment count must be at least 1"));
    }
    let (c, h, w) = image.shape();
    if h == 0 || w == 0 {
        return Err(Error::usage("cannot segment an empty image"));
    }
    let ny = ((params.target_count as f64 * h as f64 / w as f64).sqrt().round() as usize).clamp(1, h);
    let nx = ((params.target_count as f64 / ny as f64).round() as usize).clamp(1, w);
    let step = ((h * w) as f64 / (nx * ny) as f64).sqrt();
    let pixel = |p: usize| -> Vec<f64> { (0..c).map(|ch| image.plane(ch)[p] * COLOR_SCALE).collect() };

    let mut rng = seed::rng(params.seed, "segments");
    let jitter = step / 4.0;
    let mut centers: Vec<Center> = Vec::with_capacity(nx * ny);
    for gy in 0..ny {
        for gx in 0..nx {
            let mut y = (gy as f64 + 0.5) * h as f64 / ny as f64;
            let mut x = (gx as f64 + 0.5) * w as f64 / nx as f64;
            if jitter > 0.0 {
                y += rng.gen_range(-jitter..=jitter);
                x += rng.gen_range(-jitter..=jitter);
            }
            let y = y.clamp(0.0, (h - 1) as f64);
            let x = x.clamp(0.0, (w - 1) as f64);
            let p = y.round() as usize * w + x.round() as usize;
            centers.push(Center { y, x, color: pixel(p) });
        }
    }

    let spatial_weight = (params.compactness / step).powi(2);
    let dist = |center: &Center, p: usize| -> f64 {
        let (py, px) = ((p / w) as f64, (p % w) as f64);
        let dc: f64 = (0..c)
            .map(|ch| (image.plane(ch)[p] * COLOR_SCALE - center.color[ch]).powi(2))
            .sum();
        let ds = (py - center.y).powi(2) + (px - center.x).powi(2);
        dc + ds * spatial_weight
    };

    let mut assign = vec![0u32; h * w];
    let radius = step.ceil() as isize;
    for _ in 0..params.iterations.max(1) {
        let mut best = vec![f64::INFINITY; h * w];
        for (k, center) in centers.iter().enumerate() {
            let (cy, cx) = (center.y.round() as isize, center.x.round() as isize);
            let y0 = (cy - radius).max(0) as usize;
            let y1 = ((cy + radius) as usize).min(h - 1);
            let x0 = (cx - radius).max(0) as usize;
            let x1 = ((cx + radius) as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * w + x;
                    let d = dist(center, p);
                    if d < best[p] {
                        best[p] = d;
                        assign[p] = k as u32;
                    }
                }
            }
        }
        for p in 0..h * w {
            if best[p].is_infinite() {
                let (k, _) = centers
                    .iter()
                    .enumerate()
                    .map(|(k, center)| (k, dist(center, p)))
                    .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
                assign[p] = k as u32;
            }
        }

        let mut sums = vec![vec![0.0; c + 2]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &k) in assign.iter().enumerate() {
            let s = &mut sums[k as usize];
            s[0] += (p / w) as f64;
            s[1] += (p % w) as f64;
            for ch in 0..c {
                s[2 + ch] += image.plane(ch)[p] * COLOR_SCALE;
            }
            counts[k as usize] += 1;
        }
        for ((center, s), &n) in centers.iter_mut().zip(&sums).zip(&counts) {
            if n == 0 {
                continue;
            }
            let n = n as f64;
            center.y = s[0] / n;
            center.x = s[1] / n;
            for ch in 0..c {
                center.color[ch] = s[2 + ch] / n;
            }
        }
    }

    let raw = LabelImage::new(h, w, assign)?;
    Ok(enforce_connectivity(&raw, (h * w) / (4 * nx * ny).max(1)))
}

/// Merges every component smaller than `min_size` into its largest
/// neighboring component, then renumbers components in raster order.
fn enforce_connectivity(raw: &LabelImage, min_size: usize) -> SegmentMap {
    let (h, w) = (raw.height(), raw.width());
    let (comp, n) = connected_components(raw);
    let mut size = vec![0usize; n];
    let mut members = vec![Vec::new(); n];
    for (p, &c) in comp.iter().enumerate() {
        size[c] += 1;
        members[c].push(p);
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut c: usize) -> usize {
        while parent[c] != c {
            parent[c] = parent[parent[c]];
            c = parent[c];
        }
        c
    }
    // Components are visited smallest first so fragments join established
    // regions rather than each other.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&c| (size[c], c));
    for c in order {
        let root = find(&mut parent, c);
        if size[root] >= min_size {
            continue;
        }
        let mut best: Option<(usize, usize)> = None;
        for &p in &members[c] {
            for q in neighbors4(p, h, w) {
                let other = find(&mut parent, comp[q]);
                if other == root {
                    continue;
                }
                let candidate = (size[other], usize::MAX - other);
                if best.map_or(true, |(s, o)| candidate > (s, usize::MAX - o)) {
                    best = Some((candidate.0, other));
                }
            }
        }
        if let Some((_, other)) = best {
            parent[root] = other;
            size[other] += size[root];
        }
    }

    let mut code = vec![u32::MAX; n];
    let mut next = 0u32;
    let mut out = vec![0u32; h * w];
    for p in 0..h * w {
        let root = find(&mut parent, comp[p]);
        if code[root] == u32::MAX {
            code[root] = next;
            next += 1;
        }
        out[p] = code[root];
    }
    SegmentMap {
        labels: LabelImage::new(h, w, out).expect("same size"),
        count: next as usize,
    }
}

/// Replaces every pixel with the mean of its segment.
pub fn smooth(attention: &AttentionMap, segments: &SegmentMap) -> Result<AttentionMap> {
    let (h, w) = (attention.height(), attention.width());
    if (h, w) != (segments.height(), segments.width()) {
        return Err(Error::usage(format!(
            "attention is {h}x{w} but segments are {}x{}",
            segments.height(),
            segments.width()
        )));
    }
    let codes = segments.labels().labels();
    let mut sums = vec![0.0; segments.count()];
    let mut counts = vec![0usize; segments.count()];
    for (&v, &s) in attention.values().iter().zip(codes) {
        sums[s as usize] += v;
        counts[s as usize] += 1;
    }
    let means: Vec<f64> = sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect();
    let values = codes.iter().map(|&s| means[s as usize]).collect();
    AttentionMap::new(attention.class_id, FeatureMap::new(1, h, w, values)?)
}

/// Where a pseudo mask came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Attention,
    FineTune,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Attention => "attention",
            Provenance::FineTune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Provenance::Attention, Provenance::FineTune]
            .into_iter()
            .find(|p| p.as_str() == s)
    }
}

/// A training target with codes `{0, tag, IGNORE}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMask {
    pub mask: LabelImage,
    pub tag: u32,
    pub provenance: Provenance,
}

impl PseudoMask {
    /// Pixel counts of (foreground, ignored, background).
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for &c in self.mask.labels() {
            match c {
                0 => counts.2 += 1,
                IGNORE => counts.1 += 1,
                _ => counts.0 += 1,
            }
        }
        counts
    }
}

/// Thresholds the map into tag (`> upper`), IGNORE (`lower < v ≤ upper`) and
/// background (`≤ lower`).
pub fn trimap(
    attention: &AttentionMap,
    tag: u32,
    upper: f64,
    lower: f64,
    provenance: Provenance,
) -> Result<PseudoMask> {
    if !(upper > lower) {
        return Err(Error::config(format!(
            "trimap needs upper > lower, got {upper} and {lower}"
        )));
    }
    if tag == 0 || tag == IGNORE {
        return Err(Error::usage("trimap tag must be a foreground class"));
    }
    let labels = attention
        .values()
        .iter()
        .map(|&v| {
            if v > upper {
                tag
            } else if v > lower {
                IGNORE
            } else {
                0
            }
        })
        .collect();
    Ok(PseudoMask {
        mask: LabelImage::new(attention.height(), attention.width(), labels)?,
        tag,
        provenance,
    })
}

/// Set-level intersection over union for classes `0..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanIou {
    pub mean: f64,
    /// `None` for classes absent from both predictions and ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Accumulates intersections and unions over the whole set, skipping pixels
/// whose ground truth is IGNORE. Predicted IGNORE pixels match no class.
pub fn mean_iou(preds: &[LabelImage], gts: &[LabelImage], k: usize) -> Result<MeanIou> {
    if preds.len() != gts.len() {
        return Err(Error::usage(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut inter = vec![0u64; k + 1];
    let mut union = vec![0u64; k + 1];
    for (pred, gt) in preds.iter().zip(gts) {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::usage(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == IGNORE {
                continue;
            }
            let g = g as usize;
            if g > k || (p != IGNORE && p as usize > k) {
                return Err(Error::usage(format!("label outside 0..={k}")));
            }
            if p as usize == g {
                inter[g] += 1;
                union[g] += 1;
            } else {
                union[g] += 1;
                if p != IGNORE {
                    union[p as usize] += 1;
                }
            }
        }
    }
    let per_class: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MeanIou { mean, per_class })
}
