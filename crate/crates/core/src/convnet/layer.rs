use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{bilinear_upsample, bilinear_upsample_adjoint, FeatureMap};

/// 2-D convolution with zero padding. Weights are laid out
/// `[out_channel][in_channel][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Fully-connected layer over the flattened input. Weights are `[out][in]`.
/// An empty `bias` means the layer is bias-free.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Convolution,
    Relu,
    MaxPool,
    AveragePool,
    GlobalAveragePool,
    FullyConnected,
    PixelSoftmax,
    Softmax,
    UpsampleToInput,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool { size: usize, stride: usize },
    AvgPool { size: usize, stride: usize },
    GlobalAvgPool,
    Dense(Dense),
    /// Softmax over the channel axis of a `K × 1 × 1` vector.
    Softmax,
    /// Softmax over channels, independently at every pixel.
    PixelSoftmax,
    /// Bilinear upsampling back to the network's input resolution.
    UpsampleToInput { factor: usize },
}

fn xavier(rng: &mut impl Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-a..=a)).collect()
}

impl Conv2d {
    /// "Same"-padded convolution with Xavier-uniform weights and zero bias.
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let kk = kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            weights: xavier(
                rng,
                out_channels * in_channels * kk,
                in_channels * kk,
                out_channels * kk,
            ),
            bias: vec![0.0; out_channels],
        }
    }

    /// Drops the bias array.
    pub fn without_bias(mut self) -> Self {
        self.bias.clear();
        self
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel || pw < self.kernel {
            return Err(Error::config(format!(
                "{h}x{w} input too small for a {k}x{k} kernel",
                k = self.kernel
            )));
        }
        Ok((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }

    #[inline]
    pub fn weight(&self, o: usize, c: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_channels + c) * self.kernel + ky) * self.kernel + kx]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unfolds the input into a `(C·k·k) × (Ho·Wo)` patch matrix.
    fn im2col(&self, input: &FeatureMap, oh: usize, ow: usize) -> Vec<f64> {
        let (c_in, h, w) = input.shape();
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let np = oh * ow;
        let mut cols = vec![0.0; c_in * k * k * np];
        for c in 0..c_in {
            let plane = input.plane(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * np;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                        if s == 1 {
                            let lo = p.saturating_sub(kx);
                            let hi = ow.min((w + p).saturating_sub(kx));
                            if lo < hi {
                                let off = lo + kx - p;
                                dst[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && (ix as usize) < w {
                                    *d = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], shape: (usize, usize, usize), oh: usize, ow: usize) -> FeatureMap {
        let (c_in, h, w) = shape;
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let np = oh * ow;
        let mut out = FeatureMap::zeros(c_in, h, w);
        for c in 0..c_in {
            let plane = out.plane_mut(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * np;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        if input.channels() != self.in_channels {
            return Err(Error::config(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            )));
        }
        let (oh, ow) = self.output_size(input.height(), input.width())?;
        let np = oh * ow;
        let ck = self.patch_len();
        let cols = self.im2col(input, oh, ow);
        let mut out = vec![0.0; self.out_channels * np];
        for (o, b) in self.bias.iter().enumerate() {
            out[o * np..(o + 1) * np].fill(*b);
        }
        // SAFETY: all slices are sized for the stated dimensions and strides.
        unsafe {
            matrixmultiply::dgemm(
                self.out_channels,
                ck,
                np,
                1.0,
                self.weights.as_ptr(),
                ck as isize,
                1,
                cols.as_ptr(),
                np as isize,
                1,
                1.0,
                out.as_mut_ptr(),
                np as isize,
                1,
            );
        }
        FeatureMap::new(self.out_channels, oh, ow, out)
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input` is set.
    fn backward(
        &self,
        input: &FeatureMap,
        grad_out: &FeatureMap,
        gw: &mut [f64],
        gb: &mut [f64],
        need_input: bool,
    ) -> Option<FeatureMap> {
        let (oh, ow) = (grad_out.height(), grad_out.width());
        let np = oh * ow;
        let ck = self.patch_len();
        let cols = self.im2col(input, oh, ow);
        let g = grad_out.values();
        for (o, b) in gb.iter_mut().enumerate() {
            *b += g[o * np..(o + 1) * np].iter().sum::<f64>();
        }
        // SAFETY: dimensions match the buffers; transposes are expressed via strides.
        unsafe {
            matrixmultiply::dgemm(
                self.out_channels,
                np,
                ck,
                1.0,
                g.as_ptr(),
                np as isize,
                1,
                cols.as_ptr(),
                1,
                np as isize,
                1.0,
                gw.as_mut_ptr(),
                ck as isize,
                1,
            );
        }
        if !need_input {
            return None;
        }
        Some(self.transpose_apply(grad_out, input.shape()))
    }

    /// Applies the transpose of the (bias-free) convolution to an
    /// output-shaped map.
    pub(crate) fn transpose_apply(
        &self,
        grad_out: &FeatureMap,
        input_shape: (usize, usize, usize),
    ) -> FeatureMap {
        let (oh, ow) = (grad_out.height(), grad_out.width());
        let np = oh * ow;
        let ck = self.patch_len();
        let g = grad_out.values();
        let mut dcols = vec![0.0; ck * np];
        // SAFETY: buffers match the stated dimensions; the transpose is expressed via strides.
        unsafe {
            matrixmultiply::dgemm(
                ck,
                self.out_channels,
                np,
                1.0,
                self.weights.as_ptr(),
                1,
                ck as isize,
                g.as_ptr(),
                np as isize,
                1,
                0.0,
                dcols.as_mut_ptr(),
                np as isize,
                1,
            );
        }
        self.col2im(&dcols, input_shape, oh, ow)
    }
}

impl Dense {
    pub fn init(inputs: usize, outputs: usize, with_bias: bool, rng: &mut impl Rng) -> Self {
        Self {
            inputs,
            outputs,
            weights: xavier(rng, inputs * outputs, inputs, outputs),
            bias: if with_bias { vec![0.0; outputs] } else { Vec::new() },
        }
    }

    #[inline]
    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.inputs + inp]
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        let x = input.values();
        if x.len() != self.inputs {
            return Err(Error::config(format!(
                "fully-connected layer expects {} inputs, got {}",
                self.inputs,
                x.len()
            )));
        }
        let y = (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                let b = self.bias.get(o).copied().unwrap_or(0.0);
                b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        FeatureMap::from_vector(y)
    }
}

fn pool_output(h: usize, w: usize, size: usize, stride: usize) -> Result<(usize, usize)> {
    if size == 0 || stride == 0 || h < size || w < size {
        return Err(Error::config(format!(
            "{h}x{w} input cannot be pooled with window {size} stride {stride}"
        )));
    }
    Ok(((h - size) / stride + 1, (w - size) / stride + 1))
}

/// Positions of the maximal entries of one pooling window, as plane offsets.
pub(crate) fn window_argmax(
    plane: &[f64],
    width: usize,
    y0: usize,
    x0: usize,
    size: usize,
) -> Vec<usize> {
    let mut best = f64::NEG_INFINITY;
    let mut at = Vec::with_capacity(1);
    for dy in 0..size {
        for dx in 0..size {
            let i = (y0 + dy) * width + x0 + dx;
            let v = plane[i];
            if v > best {
                best = v;
                at.clear();
                at.push(i);
            } else if v == best {
                at.push(i);
            }
        }
    }
    at
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(_) => LayerKind::Convolution,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool { .. } => LayerKind::MaxPool,
            Layer::AvgPool { .. } => LayerKind::AveragePool,
            Layer::GlobalAvgPool => LayerKind::GlobalAveragePool,
            Layer::Dense(_) => LayerKind::FullyConnected,
            Layer::Softmax => LayerKind::Softmax,
            Layer::PixelSoftmax => LayerKind::PixelSoftmax,
            Layer::UpsampleToInput { .. } => LayerKind::UpsampleToInput,
        }
    }

    /// Spatial downsampling this layer applies.
    pub fn stride(&self) -> usize {
        match self {
            Layer::Conv(c) => c.stride,
            Layer::MaxPool { stride, .. } | Layer::AvgPool { stride, .. } => *stride,
            _ => 1,
        }
    }

    pub fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        Ok(match self {
            Layer::Conv(conv) => {
                if c != conv.in_channels {
                    return Err(Error::config(format!(
                        "convolution expects {} channels, got {c}",
                        conv.in_channels
                    )));
                }
                let (oh, ow) = conv.output_size(h, w)?;
                (conv.out_channels, oh, ow)
            }
            Layer::Relu | Layer::PixelSoftmax => (c, h, w),
            Layer::MaxPool { size, stride } | Layer::AvgPool { size, stride } => {
                let (oh, ow) = pool_output(h, w, *size, *stride)?;
                (c, oh, ow)
            }
            Layer::GlobalAvgPool => (c, 1, 1),
            Layer::Dense(d) => {
                if c * h * w != d.inputs {
                    return Err(Error::config(format!(
                        "fully-connected layer expects {} inputs, got {}",
                        d.inputs,
                        c * h * w
                    )));
                }
                (d.outputs, 1, 1)
            }
            Layer::Softmax => {
                if h != 1 || w != 1 {
                    return Err(Error::config("softmax expects a vector input"));
                }
                (c, 1, 1)
            }
            Layer::UpsampleToInput { factor } => (c, h * factor, w * factor),
        })
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        match self {
            Layer::Conv(conv) => conv.forward(input),
            Layer::Relu => Ok(input.map(|v| v.max(0.0))),
            Layer::MaxPool { size, stride } | Layer::AvgPool { size, stride } => {
                let (c, h, w) = input.shape();
                let (oh, ow) = pool_output(h, w, *size, *stride)?;
                let is_max = matches!(self, Layer::MaxPool { .. });
                let norm = 1.0 / (size * size) as f64;
                let mut out = FeatureMap::zeros(c, oh, ow);
                for ch in 0..c {
                    let src = input.plane(ch);
                    let dst = out.plane_mut(ch);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = if is_max { f64::NEG_INFINITY } else { 0.0 };
                            for dy in 0..*size {
                                let row = (oy * stride + dy) * w + ox * stride;
                                for &v in &src[row..row + size] {
                                    if is_max {
                                        acc = acc.max(v);
                                    } else {
                                        acc += v;
                                    }
                                }
                            }
                            dst[oy * ow + ox] = if is_max { acc } else { acc * norm };
                        }
                    }
                }
                Ok(out)
            }
            Layer::GlobalAvgPool => {
                let n = input.plane_len() as f64;
                let v = (0..input.channels())
                    .map(|c| input.plane(c).iter().sum::<f64>() / n)
                    .collect();
                FeatureMap::from_vector(v)
            }
            Layer::Dense(d) => d.forward(input),
            Layer::Softmax => {
                self.output_shape(input.shape())?;
                let mut v = input.values().to_vec();
                softmax_in_place(&mut v);
                FeatureMap::from_vector(v)
            }
            Layer::PixelSoftmax => {
                let (c, h, w) = input.shape();
                let n = h * w;
                let src = input.values();
                let mut out = vec![0.0; c * n];
                let mut buf = vec![0.0; c];
                for p in 0..n {
                    for ch in 0..c {
                        buf[ch] = src[ch * n + p];
                    }
                    softmax_in_place(&mut buf);
                    for ch in 0..c {
                        out[ch * n + p] = buf[ch];
                    }
                }
                FeatureMap::new(c, h, w, out)
            }
            Layer::UpsampleToInput { factor } => bilinear_upsample(input, *factor),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(c) => c.weights.len() + c.bias.len(),
            Layer::Dense(d) => d.weights.len() + d.bias.len(),
            _ => 0,
        }
    }

    /// Parameter arrays in canonical order: weights, then bias if present.
    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Conv(c) => vec![&c.weights, &c.bias],
            Layer::Dense(d) if d.bias.is_empty() => vec![&d.weights],
            Layer::Dense(d) => vec![&d.weights, &d.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weights, &mut c.bias],
            Layer::Dense(d) => {
                if d.bias.is_empty() {
                    vec![&mut d.weights]
                } else {
                    vec![&mut d.weights, &mut d.bias]
                }
            }
            _ => Vec::new(),
        }
    }

    /// Backpropagates `grad_out` (gradient w.r.t. this layer's output) into
    /// the parameter gradient slots `grads` and returns the gradient w.r.t.
    /// the input. Softmax layers are never differentiated here: the loss
    /// gradient enters directly at their input.
    pub(crate) fn backward(
        &self,
        input: &FeatureMap,
        grad_out: &FeatureMap,
        grads: &mut [Vec<f64>],
        need_input: bool,
    ) -> Result<Option<FeatureMap>> {
        match self {
            Layer::Conv(conv) => {
                let (gw, rest) = grads.split_first_mut().expect("conv weight slot");
                Ok(conv.backward(input, grad_out, gw, &mut rest[0], need_input))
            }
            Layer::Dense(d) => {
                let x = input.values();
                let g = grad_out.values();
                {
                    let gw = &mut grads[0];
                    for (o, &go) in g.iter().enumerate() {
                        for (slot, &xi) in gw[o * d.inputs..(o + 1) * d.inputs].iter_mut().zip(x) {
                            *slot += go * xi;
                        }
                    }
                }
                if !d.bias.is_empty() {
                    for (slot, &go) in grads[1].iter_mut().zip(g) {
                        *slot += go;
                    }
                }
                if !need_input {
                    return Ok(None);
                }
                let mut gi = vec![0.0; d.inputs];
                for (o, &go) in g.iter().enumerate() {
                    for (slot, &wv) in gi.iter_mut().zip(&d.weights[o * d.inputs..(o + 1) * d.inputs]) {
                        *slot += go * wv;
                    }
                }
                let (c, h, w) = input.shape();
                Ok(Some(FeatureMap::new(c, h, w, gi)?))
            }
            Layer::Relu => {
                let mut g = grad_out.clone();
                for (gv, &x) in g.values_mut().iter_mut().zip(input.values()) {
                    if x <= 0.0 {
                        *gv = 0.0;
                    }
                }
                Ok(Some(g))
            }
            Layer::MaxPool { size, stride } => {
                let (c, _, w) = input.shape();
                let (oh, ow) = (grad_out.height(), grad_out.width());
                let mut gi = FeatureMap::zeros(c, input.height(), w);
                for ch in 0..c {
                    let src = input.plane(ch);
                    let go = grad_out.plane(ch);
                    let dst = gi.plane_mut(ch);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let at = window_argmax(src, w, oy * stride, ox * stride, *size);
                            dst[at[0]] += go[oy * ow + ox];
                        }
                    }
                }
                Ok(Some(gi))
            }
            Layer::AvgPool { size, stride } => {
                let (c, h, w) = input.shape();
                let (oh, ow) = (grad_out.height(), grad_out.width());
                let norm = 1.0 / (size * size) as f64;
                let mut gi = FeatureMap::zeros(c, h, w);
                for ch in 0..c {
                    let go = grad_out.plane(ch);
                    let dst = gi.plane_mut(ch);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = go[oy * ow + ox] * norm;
                            for dy in 0..*size {
                                let row = (oy * stride + dy) * w + ox * stride;
                                for d in &mut dst[row..row + size] {
                                    *d += g;
                                }
                            }
                        }
                    }
                }
                Ok(Some(gi))
            }
            Layer::GlobalAvgPool => {
                let (c, h, w) = input.shape();
                let n = (h * w) as f64;
                let mut gi = FeatureMap::zeros(c, h, w);
                for ch in 0..c {
                    let g = grad_out.values()[ch] / n;
                    gi.plane_mut(ch).fill(g);
                }
                Ok(Some(gi))
            }
            Layer::UpsampleToInput { factor } => {
                Ok(Some(bilinear_upsample_adjoint(grad_out, *factor)?))
            }
            Layer::Softmax | Layer::PixelSoftmax => Err(Error::config(
                "softmax layers are only supported as the final layer",
            )),
        }
    }
}
