//! Class-specific attention from a trained classifier.
//!
//! Three ingredients are combined:
//!
//! * forward scores, the class-weighted sum of the feature channels that
//!   enter global average pooling (class activation mapping);
//! * excitation maps, obtained by pushing a one-hot winner distribution down
//!   through the network and routing each neuron's probability to its
//!   children in proportion to their positive weight-activation products;
//! * a fusion rule that adds the normalized forward map to the product of
//!   two normalized excitation maps taken at different depths.

use crate::convnet::{window_argmax, ActivationTrace, Conv2d, Dense, Head, Layer, Network};
use crate::error::{Error, Result};
use crate::tensor::{bilinear_upsample, minmax_normalize, FeatureMap};

/// A single-channel relevance map for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub class_id: usize,
    pub map: FeatureMap,
}

impl AttentionMap {
    pub fn new(class_id: usize, map: FeatureMap) -> Result<Self> {
        if map.channels() != 1 {
            return Err(Error::usage("attention maps are single-channel"));
        }
        Ok(Self { class_id, map })
    }

    pub fn height(&self) -> usize {
        self.map.height()
    }

    pub fn width(&self) -> usize {
        self.map.width()
    }

    pub fn values(&self) -> &[f64] {
        self.map.values()
    }
}

fn check_class(net: &Network, k: usize) -> Result<()> {
    if net.head() != Head::Classifier {
        return Err(Error::usage("attention needs a classifier-headed network"));
    }
    if k == 0 || k > net.class_count() {
        return Err(Error::usage(format!(
            "class {k} outside 1..={}",
            net.class_count()
        )));
    }
    Ok(())
}

fn gap_index(net: &Network) -> Result<usize> {
    net.layers()
        .iter()
        .position(|l| matches!(l, Layer::GlobalAvgPool))
        .ok_or_else(|| Error::usage("network has no global-average-pool layer"))
}

/// Forward attention scores at the resolution of the pooled feature tensor:
/// `F(x, y) = Σ_c w[k][c] · f_c(x, y)`, where `w` is the bias-free
/// classifier weight matrix. Values may be negative.
pub fn forward_attention(net: &Network, trace: &ActivationTrace, k: usize) -> Result<AttentionMap> {
    check_class(net, k)?;
    let g = gap_index(net)?;
    if trace.len() != net.layers().len() {
        return Err(Error::usage("trace does not belong to this network"));
    }
    let Some(Layer::Dense(fc)) = net.layers().get(g + 1) else {
        return Err(Error::usage("global-average-pool is not followed by the classifier layer"));
    };
    let features = trace.layer_input(g);
    let (c, h, w) = features.shape();
    if c != fc.inputs {
        return Err(Error::usage("pre-pooling features do not match the classifier layer"));
    }
    let mut out = FeatureMap::zeros(1, h, w);
    let dst = out.plane_mut(0);
    for ch in 0..c {
        let wk = fc.weight(k - 1, ch);
        for (o, &v) in dst.iter_mut().zip(features.plane(ch)) {
            *o += wk * v;
        }
    }
    AttentionMap::new(k, out)
}

/// Probability over the neurons of every layer output, top-down.
///
/// `layers[i]` holds the distribution over `trace.outputs[i]`; entries for
/// layers below the propagation floor are `None`.
#[derive(Debug, Clone)]
pub struct ExcitationState {
    pub class_id: usize,
    pub layers: Vec<Option<FeatureMap>>,
}

impl ExcitationState {
    /// Channel-summed distribution at `layer`, as a spatial map.
    pub fn marginal(&self, layer: usize) -> Option<AttentionMap> {
        let p = self.layers.get(layer)?.as_ref()?;
        AttentionMap::new(self.class_id, p.sum_channels()).ok()
    }
}

fn require_nonnegative(x: &FeatureMap, layer: usize) -> Result<()> {
    if x.values().iter().any(|&v| v < 0.0) {
        return Err(Error::usage(format!(
            "excitation needs nonnegative inputs to layer {layer}"
        )));
    }
    Ok(())
}

/// `parent / denom`, with parents whose denominator is not positive dropped.
fn ratios(parent: &FeatureMap, denom: &FeatureMap) -> FeatureMap {
    let mut r = parent.clone();
    for (v, &d) in r.values_mut().iter_mut().zip(denom.values()) {
        *v = if *v != 0.0 && d > 0.0 { *v / d } else { 0.0 };
    }
    r
}

fn positive_conv(conv: &Conv2d) -> Conv2d {
    Conv2d {
        weights: conv.weights.iter().map(|&w| w.max(0.0)).collect(),
        bias: vec![0.0; conv.out_channels],
        ..conv.clone()
    }
}

fn positive_dense(d: &Dense) -> Dense {
    Dense {
        weights: d.weights.iter().map(|&w| w.max(0.0)).collect(),
        bias: Vec::new(),
        ..d.clone()
    }
}

/// Routes the distribution over a layer's output onto its input.
fn propagate(layer: &Layer, input: &FeatureMap, parent: &FeatureMap, index: usize) -> Result<FeatureMap> {
    Ok(match layer {
        Layer::Softmax | Layer::Relu => {
            let (c, h, w) = input.shape();
            FeatureMap::new(c, h, w, parent.values().to_vec())?
        }
        Layer::Dense(d) => {
            require_nonnegative(input, index)?;
            let pos = positive_dense(d);
            let denom = pos.forward(input)?;
            let r = ratios(parent, &denom);
            let mut child = vec![0.0; d.inputs];
            for (o, &ro) in r.values().iter().enumerate() {
                if ro == 0.0 {
                    continue;
                }
                for (slot, &w) in child.iter_mut().zip(&pos.weights[o * d.inputs..(o + 1) * d.inputs]) {
                    *slot += w * ro;
                }
            }
            for (slot, &x) in child.iter_mut().zip(input.values()) {
                *slot *= x;
            }
            let (c, h, w) = input.shape();
            FeatureMap::new(c, h, w, child)?
        }
        Layer::Conv(conv) => {
            require_nonnegative(input, index)?;
            let pos = positive_conv(conv);
            let denom = pos.forward(input)?;
            let r = ratios(parent, &denom);
            let mut child = pos.transpose_apply(&r, input.shape());
            for (slot, &x) in child.values_mut().iter_mut().zip(input.values()) {
                *slot *= x;
            }
            child
        }
        Layer::GlobalAvgPool => {
            require_nonnegative(input, index)?;
            let mut child = input.clone();
            for c in 0..input.channels() {
                let total: f64 = input.plane(c).iter().sum();
                let pc = parent.values()[c];
                let plane = child.plane_mut(c);
                if total > 0.0 && pc != 0.0 {
                    for v in plane.iter_mut() {
                        *v *= pc / total;
                    }
                } else {
                    plane.fill(0.0);
                }
            }
            child
        }
        Layer::AvgPool { size, stride } => {
            require_nonnegative(input, index)?;
            let (c, h, w) = input.shape();
            let denom = layer.forward(input)?;
            let r = ratios(parent, &denom);
            let norm = 1.0 / (size * size) as f64;
            let mut child = FeatureMap::zeros(c, h, w);
            let (oh, ow) = (r.height(), r.width());
            for ch in 0..c {
                let rp = r.plane(ch);
                let src = input.plane(ch);
                let dst = child.plane_mut(ch);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let ro = rp[oy * ow + ox];
                        if ro == 0.0 {
                            continue;
                        }
                        for dy in 0..*size {
                            let row = (oy * stride + dy) * w + ox * stride;
                            for i in row..row + size {
                                dst[i] += norm * src[i] * ro;
                            }
                        }
                    }
                }
            }
            child
        }
        Layer::MaxPool { size, stride } => {
            let (c, h, w) = input.shape();
            let (oh, ow) = (parent.height(), parent.width());
            let mut child = FeatureMap::zeros(c, h, w);
            for ch in 0..c {
                let pp = parent.plane(ch);
                let src = input.plane(ch);
                let dst = child.plane_mut(ch);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let p = pp[oy * ow + ox];
                        if p == 0.0 {
                            continue;
                        }
                        let at = window_argmax(src, w, oy * stride, ox * stride, *size);
                        let share = p / at.len() as f64;
                        for i in at {
                            dst[i] += share;
                        }
                    }
                }
            }
            child
        }
        Layer::PixelSoftmax | Layer::UpsampleToInput { .. } => {
            return Err(Error::usage("excitation is defined for classifier networks only"))
        }
    })
}

/// Runs top-down excitation from a one-hot distribution at class `k` down to
/// the output of layer `floor`, keeping every intermediate distribution.
pub fn excitation_state(
    net: &Network,
    trace: &ActivationTrace,
    k: usize,
    floor: usize,
) -> Result<ExcitationState> {
    check_class(net, k)?;
    let n = net.layers().len();
    if trace.len() != n {
        return Err(Error::usage("trace does not belong to this network"));
    }
    if floor >= n {
        return Err(Error::usage(format!(
            "tap layer {floor} lies above the top layer {}",
            n - 1
        )));
    }
    let mut layers: Vec<Option<FeatureMap>> = vec![None; n];
    let mut start = FeatureMap::zeros(net.class_count(), 1, 1);
    start.values_mut()[k - 1] = 1.0;
    layers[n - 1] = Some(start);
    for i in (floor + 1..n).rev() {
        let parent = layers[i].as_ref().expect("filled top-down");
        let child = propagate(&net.layers()[i], trace.layer_input(i), parent, i)?;
        layers[i - 1] = Some(child);
    }
    Ok(ExcitationState { class_id: k, layers })
}

/// Excitation map at `tap`: the top-down probability over that layer's
/// output with the channel axis summed out.
pub fn excitation_backward(
    net: &Network,
    trace: &ActivationTrace,
    k: usize,
    tap: usize,
) -> Result<AttentionMap> {
    let state = excitation_state(net, trace, k, tap)?;
    Ok(state.marginal(tap).expect("tap layer is filled"))
}

/// Fusion weights and upsampling factors for [`fuse`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuseParams {
    pub lambda_forward: f64,
    pub lambda_backward: f64,
    pub forward_factor: usize,
    pub shallow_factor: usize,
    pub deep_factor: usize,
}

/// Upsamples and min-max normalizes the three maps, then returns
/// `minmax(λ1·F + λ2·(B_shallow ⊙ B_deep))`.
pub fn fuse(
    forward: &AttentionMap,
    shallow: &AttentionMap,
    deep: &AttentionMap,
    params: &FuseParams,
) -> Result<AttentionMap> {
    let f = minmax_normalize(&bilinear_upsample(&forward.map, params.forward_factor)?);
    let s = minmax_normalize(&bilinear_upsample(&shallow.map, params.shallow_factor)?);
    let d = minmax_normalize(&bilinear_upsample(&deep.map, params.deep_factor)?);
    if !f.same_shape(&s) || !f.same_shape(&d) {
        return Err(Error::config(format!(
            "upsampled maps disagree in size: {:?}, {:?}, {:?}",
            f.shape(),
            s.shape(),
            d.shape()
        )));
    }
    let mut out = f.clone();
    for ((o, &sv), &dv) in out.values_mut().iter_mut().zip(s.values()).zip(d.values()) {
        *o = params.lambda_forward * *o + params.lambda_backward * sv * dv;
    }
    AttentionMap::new(forward.class_id, minmax_normalize(&out))
}

/// Every intermediate attention product for one image and class.
#[derive(Debug, Clone)]
pub struct AttentionBundle {
    /// Coarse forward scores.
    pub forward: AttentionMap,
    pub shallow: AttentionMap,
    pub deep: AttentionMap,
    /// Fused map at input resolution, in `[0, 1]`.
    pub fused: AttentionMap,
    pub params: FuseParams,
}

impl AttentionBundle {
    /// Normalized, upsampled forward map alone.
    pub fn forward_only(&self) -> Result<FeatureMap> {
        Ok(minmax_normalize(&bilinear_upsample(
            &self.forward.map,
            self.params.forward_factor,
        )?))
    }

    /// Normalized product of the two upsampled, normalized excitation maps.
    pub fn backward_only(&self) -> Result<FeatureMap> {
        let s = minmax_normalize(&bilinear_upsample(&self.shallow.map, self.params.shallow_factor)?);
        let d = minmax_normalize(&bilinear_upsample(&self.deep.map, self.params.deep_factor)?);
        let mut out = s;
        for (o, &dv) in out.values_mut().iter_mut().zip(d.values()) {
            *o *= dv;
        }
        Ok(minmax_normalize(&out))
    }
}

/// Computes forward scores, both tap excitation maps and their fusion for
/// class `k`. Upsampling factors follow the cumulative stride at each map.
pub fn class_attention(
    net: &Network,
    image: &FeatureMap,
    k: usize,
    lambda_forward: f64,
    lambda_backward: f64,
) -> Result<AttentionBundle> {
    let shallow_tap = net
        .tap("shallow")
        .ok_or_else(|| Error::config("network has no 'shallow' tap"))?;
    let deep_tap = net
        .tap("deep")
        .ok_or_else(|| Error::config("network has no 'deep' tap"))?;
    let trace = net.forward(image)?;
    let forward = forward_attention(net, &trace, k)?;
    let floor = shallow_tap.min(deep_tap);
    let state = excitation_state(net, &trace, k, floor)?;
    let shallow = state.marginal(shallow_tap).expect("filled");
    let deep = state.marginal(deep_tap).expect("filled");
    let g = gap_index(net)?;
    let params = FuseParams {
        lambda_forward,
        lambda_backward,
        forward_factor: net.cumulative_stride(g - 1),
        shallow_factor: net.cumulative_stride(shallow_tap),
        deep_factor: net.cumulative_stride(deep_tap),
    };
    let fused = fuse(&forward, &shallow, &deep, &params)?;
    Ok(AttentionBundle {
        forward,
        shallow,
        deep,
        fused,
        params,
    })
}
