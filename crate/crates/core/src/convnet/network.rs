use rand::Rng;

use super::layer::{Conv2d, Dense, Layer, LayerKind};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{FeatureMap, LabelImage, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Global average pool, bias-free fully-connected layer, softmax.
    Classifier,
    /// 1×1 convolution to `K + 1` channels, upsample to input, per-pixel softmax.
    Segmenter,
}

/// A named layer whose output feeds the attention module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tap {
    pub name: String,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    head: Head,
    class_count: usize,
    taps: Vec<Tap>,
}

/// Every layer output recorded during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub input: FeatureMap,
    pub outputs: Vec<FeatureMap>,
}

impl ActivationTrace {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    /// Input to layer `i`.
    pub fn layer_input(&self, i: usize) -> &FeatureMap {
        if i == 0 {
            &self.input
        } else {
            &self.outputs[i - 1]
        }
    }

    pub fn last(&self) -> &FeatureMap {
        self.outputs.last().expect("trace of an empty network")
    }
}

/// Training target for one image.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    /// Class label in `1..=K`.
    Class(usize),
    /// Per-pixel labels over `{0..=K, IGNORE}`.
    Mask(&'a LabelImage),
}

/// Parameter gradients, one array per parameter group in
/// [`Network::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub groups: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            groups: net.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.groups {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.groups.iter().flatten().all(|&x| x == 0.0)
    }
}

/// Summed loss and gradient over a batch.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: f64,
    pub gradients: Gradients,
    /// Number of loss terms: images for a classifier, labeled pixels for a
    /// segmenter.
    pub terms: usize,
}

pub const REFERENCE_WIDTHS: [usize; 3] = [8, 16, 32];

fn trunk(input_channels: usize, rng: &mut impl Rng) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut c = input_channels;
    for &w in &REFERENCE_WIDTHS {
        layers.push(Layer::Conv(Conv2d::init(c, w, 3, 1, rng).without_bias()));
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool { size: 2, stride: 2 });
        c = w;
    }
    layers
}

fn reference_taps() -> Vec<Tap> {
    vec![
        Tap {
            name: "shallow".into(),
            layer: 2,
        },
        Tap {
            name: "deep".into(),
            layer: 5,
        },
    ]
}

impl Network {
    pub fn new(layers: Vec<Layer>, head: Head, class_count: usize, taps: Vec<Tap>) -> Result<Self> {
        let net = Self {
            layers,
            head,
            class_count,
            taps,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(Error::config("class count must be positive"));
        }
        let kinds: Vec<LayerKind> = self.layers.iter().map(Layer::kind).collect();
        let n = kinds.len();
        match self.head {
            Head::Classifier => {
                if n < 3
                    || kinds[n - 3] != LayerKind::GlobalAveragePool
                    || kinds[n - 2] != LayerKind::FullyConnected
                    || kinds[n - 1] != LayerKind::Softmax
                {
                    return Err(Error::config(
                        "classifier must end with global-average-pool, fully-connected, softmax",
                    ));
                }
                let Layer::Dense(fc) = &self.layers[n - 2] else { unreachable!() };
                if !fc.bias.is_empty() {
                    return Err(Error::config("classifier fully-connected layer must be bias-free"));
                }
                if fc.outputs != self.class_count {
                    return Err(Error::config(format!(
                        "classifier has {} outputs for {} classes",
                        fc.outputs, self.class_count
                    )));
                }
            }
            Head::Segmenter => {
                if n < 3
                    || kinds[n - 3] != LayerKind::Convolution
                    || kinds[n - 2] != LayerKind::UpsampleToInput
                    || kinds[n - 1] != LayerKind::PixelSoftmax
                {
                    return Err(Error::config(
                        "segmenter must end with convolution, upsample-to-input, per-pixel softmax",
                    ));
                }
                let Layer::Conv(conv) = &self.layers[n - 3] else { unreachable!() };
                if conv.out_channels != self.class_count + 1 {
                    return Err(Error::config(format!(
                        "segmenter emits {} channels, expected {}",
                        conv.out_channels,
                        self.class_count + 1
                    )));
                }
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.stride() == 0 {
                return Err(Error::config(format!("layer {i} has stride 0")));
            }
            if matches!(l.kind(), LayerKind::Softmax | LayerKind::PixelSoftmax) && i + 1 != n {
                return Err(Error::config("softmax may only be the final layer"));
            }
            if let Layer::Conv(c) = l {
                if c.weights.len() != c.out_channels * c.in_channels * c.kernel * c.kernel
                    || !(c.bias.is_empty() || c.bias.len() == c.out_channels)
                {
                    return Err(Error::config(format!("layer {i}: convolution parameter shape")));
                }
            }
            if let Layer::Dense(d) = l {
                if d.weights.len() != d.inputs * d.outputs
                    || !(d.bias.is_empty() || d.bias.len() == d.outputs)
                {
                    return Err(Error::config(format!("layer {i}: dense parameter shape")));
                }
            }
        }
        for tap in &self.taps {
            if tap.layer >= n {
                return Err(Error::config(format!("tap '{}' past the last layer", tap.name)));
            }
        }
        Ok(())
    }

    /// Three `[3×3 conv → ReLU → 2×2 max-pool]` blocks of widths 8/16/32,
    /// bias-free so a black image scores uniformly, then GAP → bias-free FC →
    /// softmax. Taps sit after blocks 1 and 2.
    pub fn reference_classifier(input_channels: usize, class_count: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, "classifier-init");
        let mut layers = trunk(input_channels, &mut rng);
        let c = *REFERENCE_WIDTHS.last().unwrap();
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Dense(Dense::init(c, class_count, false, &mut rng)));
        layers.push(Layer::Softmax);
        Self::new(layers, Head::Classifier, class_count, reference_taps())
            .expect("reference classifier is well-formed")
    }

    /// Reference trunk followed by the segmentation head, freshly initialized.
    pub fn reference_segmenter(input_channels: usize, class_count: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, "segmenter-init");
        let layers = trunk(input_channels, &mut rng);
        Self::with_segmentation_head(layers, class_count, &mut rng)
    }

    /// Segmenter whose trunk starts from this classifier's trunk weights.
    pub fn segmenter_from_classifier(&self, seed: u64) -> Result<Self> {
        if self.head != Head::Classifier {
            return Err(Error::usage("segmenter_from_classifier needs a classifier"));
        }
        let n = self.layers.len();
        let trunk = self.layers[..n - 3].to_vec();
        let mut rng = seed::rng(seed, "segmenter-head-init");
        Ok(Self::with_segmentation_head(trunk, self.class_count, &mut rng))
    }

    fn with_segmentation_head(mut layers: Vec<Layer>, class_count: usize, rng: &mut impl Rng) -> Self {
        let factor: usize = layers.iter().map(Layer::stride).product();
        let width = layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Conv(c) => Some(c.out_channels),
                _ => None,
            })
            .expect("trunk has a convolution");
        layers.push(Layer::Conv(Conv2d::init(width, class_count + 1, 1, 1, rng)));
        layers.push(Layer::UpsampleToInput { factor });
        layers.push(Layer::PixelSoftmax);
        Self::new(layers, Head::Segmenter, class_count, reference_taps())
            .expect("segmenter is well-formed")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }

    pub fn tap(&self, name: &str) -> Option<usize> {
        self.taps.iter().find(|t| t.name == name).map(|t| t.layer)
    }

    pub fn input_channels(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Conv(c) => Some(c.in_channels),
            Layer::Dense(d) => Some(d.inputs),
            _ => None,
        })
    }

    /// Product of strides of layers `0..=layer`.
    pub fn cumulative_stride(&self, layer: usize) -> usize {
        self.layers[..=layer].iter().map(Layer::stride).product()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Runs the network and records every layer output.
    pub fn forward(&self, image: &FeatureMap) -> Result<ActivationTrace> {
        let mut outputs: Vec<FeatureMap> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = outputs.last().unwrap_or(image);
            let out = layer
                .forward(input)
                .map_err(|e| Error::config(format!("layer {i} ({:?}): {e}", layer.kind())))?;
            outputs.push(out);
        }
        if self.head == Head::Segmenter {
            let out = outputs.last().expect("nonempty");
            if out.height() != image.height() || out.width() != image.width() {
                return Err(Error::config(format!(
                    "segmenter output {}x{} does not match input {}x{}",
                    out.height(),
                    out.width(),
                    image.height(),
                    image.width()
                )));
            }
        }
        Ok(ActivationTrace {
            input: image.clone(),
            outputs,
        })
    }

    /// Class probabilities; index `i` holds class `i + 1`.
    pub fn classify(&self, image: &FeatureMap) -> Result<Vec<f64>> {
        if self.head != Head::Classifier {
            return Err(Error::usage("classify needs a classifier-headed network"));
        }
        Ok(self.forward(image)?.last().values().to_vec())
    }

    /// `(K + 1) × H × W` per-pixel probabilities, channel 0 = background.
    pub fn segment_probs(&self, image: &FeatureMap) -> Result<FeatureMap> {
        if self.head != Head::Segmenter {
            return Err(Error::usage("segment_probs needs a segmenter-headed network"));
        }
        let mut trace = self.forward(image)?;
        Ok(trace.outputs.pop().expect("nonempty"))
    }

    /// Per-pixel argmax over `K + 1` channels.
    pub fn predict_mask(&self, image: &FeatureMap) -> Result<LabelImage> {
        let probs = self.segment_probs(image)?;
        let (c, h, w) = probs.shape();
        let n = h * w;
        let v = probs.values();
        let labels = (0..n)
            .map(|p| {
                let mut best = 0;
                for ch in 1..c {
                    if v[ch * n + p] > v[best * n + p] {
                        best = ch;
                    }
                }
                best as u32
            })
            .collect();
        LabelImage::new(h, w, labels)
    }

    /// Cross-entropy loss and parameter gradients for one image.
    pub fn sample_gradient(&self, image: &FeatureMap, target: Target<'_>) -> Result<BatchGradient> {
        let trace = self.forward(image)?;
        let probs = trace.last();
        let (loss, terms, mut grad) = match (self.head, target) {
            (Head::Classifier, Target::Class(k)) => {
                if k == 0 || k > self.class_count {
                    return Err(Error::usage(format!("class label {k} outside 1..={}", self.class_count)));
                }
                let mut g = probs.clone();
                let p = probs.values()[k - 1];
                g.values_mut()[k - 1] -= 1.0;
                (-p.ln(), 1, g)
            }
            (Head::Segmenter, Target::Mask(mask)) => {
                let (c, h, w) = probs.shape();
                if mask.height() != h || mask.width() != w {
                    return Err(Error::usage("mask size does not match segmenter output"));
                }
                let n = h * w;
                let p = probs.values();
                let mut g = FeatureMap::zeros(c, h, w);
                let gv = g.values_mut();
                let mut loss = 0.0;
                let mut terms = 0;
                for (px, &label) in mask.labels().iter().enumerate() {
                    if label == IGNORE {
                        continue;
                    }
                    let label = label as usize;
                    if label >= c {
                        return Err(Error::usage(format!("mask label {label} outside 0..{c}")));
                    }
                    terms += 1;
                    loss -= p[label * n + px].ln();
                    for ch in 0..c {
                        gv[ch * n + px] = p[ch * n + px];
                    }
                    gv[label * n + px] -= 1.0;
                }
                (loss, terms, g)
            }
            _ => return Err(Error::usage("target kind does not match network head")),
        };

        let mut gradients = Gradients::zeros_like(self);
        if terms == 0 {
            return Ok(BatchGradient {
                loss,
                gradients,
                terms,
            });
        }
        // Parameter-group offset of each layer.
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut next = 0;
        for l in &self.layers {
            offsets.push(next);
            next += l.params().len();
        }
        let first_param_layer = self.layers.iter().position(|l| l.param_count() > 0);
        let n = self.layers.len();
        for i in (0..n - 1).rev() {
            let layer = &self.layers[i];
            let k = layer.params().len();
            let slots = &mut gradients.groups[offsets[i]..offsets[i] + k];
            let need_input = first_param_layer.is_some_and(|f| i > f);
            match layer.backward(trace.layer_input(i), &grad, slots, need_input)? {
                Some(g) => grad = g,
                None => break,
            }
        }
        Ok(BatchGradient {
            loss,
            gradients,
            terms,
        })
    }

    /// Summed loss and gradients over a batch. Per-sample work may run in
    /// parallel; the reduction is always in batch order.
    pub fn gradient(&self, batch: &[(&FeatureMap, Target<'_>)]) -> Result<BatchGradient> {
        use rayon::prelude::*;
        let parts: Vec<BatchGradient> = batch
            .par_iter()
            .map(|(img, t)| self.sample_gradient(img, *t))
            .collect::<Result<_>>()?;
        let mut total = BatchGradient {
            loss: 0.0,
            gradients: Gradients::zeros_like(self),
            terms: 0,
        };
        for p in &parts {
            total.loss += p.loss;
            total.terms += p.terms;
            total.gradients.add_assign(&p.gradients);
        }
        Ok(total)
    }
}
