//! Shared test helpers: random networks and an independent loop-nest forward
//! pass used as an oracle.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use webseg::convnet::{Conv2d, Dense, Head, Layer, Network, Tap};
use webseg::{FeatureMap, LabelImage, IGNORE};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut impl Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> FeatureMap {
    FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn random_conv(rng: &mut impl Rng, cin: usize, cout: usize, k: usize, lo: f64, hi: f64) -> Conv2d {
    Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel: k,
        stride: 1,
        padding: k / 2,
        weights: (0..cout * cin * k * k).map(|_| rng.gen_range(lo..hi)).collect(),
        bias: (0..cout).map(|_| rng.gen_range(-0.1..0.1)).collect(),
    }
}

pub fn random_dense(rng: &mut impl Rng, i: usize, o: usize, lo: f64, hi: f64) -> Dense {
    Dense {
        inputs: i,
        outputs: o,
        weights: (0..i * o).map(|_| rng.gen_range(lo..hi)).collect(),
        bias: Vec::new(),
    }
}

/// conv → ReLU → max-pool → conv → ReLU → GAP → FC → softmax on `cin × 8 × 8`
/// inputs. Weights drawn from `[lo, hi)`.
pub fn small_classifier(rng: &mut impl Rng, cin: usize, k: usize, lo: f64, hi: f64) -> Network {
    let layers = vec![
        Layer::Conv(random_conv(rng, cin, 3, 3, lo, hi)),
        Layer::Relu,
        Layer::MaxPool { size: 2, stride: 2 },
        Layer::Conv(random_conv(rng, 3, 4, 3, lo, hi)),
        Layer::Relu,
        Layer::GlobalAvgPool,
        Layer::Dense(random_dense(rng, 4, k, lo, hi)),
        Layer::Softmax,
    ];
    let taps = vec![
        Tap { name: "shallow".into(), layer: 2 },
        Tap { name: "deep".into(), layer: 4 },
    ];
    Network::new(layers, Head::Classifier, k, taps).unwrap()
}

/// Same trunk with an average pool, then a segmentation head.
pub fn small_segmenter(rng: &mut impl Rng, cin: usize, k: usize) -> Network {
    let layers = vec![
        Layer::Conv(random_conv(rng, cin, 3, 3, -0.6, 0.6)),
        Layer::Relu,
        Layer::MaxPool { size: 2, stride: 2 },
        Layer::Conv(random_conv(rng, 3, 4, 3, -0.6, 0.6)),
        Layer::Relu,
        Layer::AvgPool { size: 2, stride: 2 },
        Layer::Conv(random_conv(rng, 4, k + 1, 1, -0.8, 0.8)),
        Layer::UpsampleToInput { factor: 4 },
        Layer::PixelSoftmax,
    ];
    Network::new(layers, Head::Segmenter, k, Vec::new()).unwrap()
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, k: usize, ignore_frac: f64) -> LabelImage {
    let labels = (0..h * w)
        .map(|_| {
            if rng.gen::<f64>() < ignore_frac {
                IGNORE
            } else {
                rng.gen_range(0..=k as u32)
            }
        })
        .collect();
    LabelImage::new(h, w, labels).unwrap()
}

// ---- independent loop-nest reference forward pass ----

fn ref_conv(c: &Conv2d, x: &FeatureMap) -> FeatureMap {
    let (cin, h, w) = x.shape();
    let oh = (h + 2 * c.padding - c.kernel) / c.stride + 1;
    let ow = (w + 2 * c.padding - c.kernel) / c.stride + 1;
    let mut out = FeatureMap::zeros(c.out_channels, oh, ow);
    for o in 0..c.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = c.bias.get(o).copied().unwrap_or(0.0);
                for ci in 0..cin {
                    for ky in 0..c.kernel {
                        for kx in 0..c.kernel {
                            let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                            let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += c.weights[((o * cin + ci) * c.kernel + ky) * c.kernel + kx]
                                    * x.get(ci, iy as usize, ix as usize);
                            }
                        }
                    }
                }
                out.set(o, oy, ox, acc);
            }
        }
    }
    out
}

fn ref_pool(x: &FeatureMap, size: usize, stride: usize, max: bool) -> FeatureMap {
    let (c, h, w) = x.shape();
    let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
    let mut out = FeatureMap::zeros(c, oh, ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut vals = Vec::new();
                for dy in 0..size {
                    for dx in 0..size {
                        vals.push(x.get(ch, oy * stride + dy, ox * stride + dx));
                    }
                }
                let v = if max {
                    vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                };
                out.set(ch, oy, ox, v);
            }
        }
    }
    out
}

fn ref_upsample(x: &FeatureMap, f: usize) -> FeatureMap {
    let (c, h, w) = x.shape();
    let mut out = FeatureMap::zeros(c, h * f, w * f);
    for ch in 0..c {
        for oy in 0..h * f {
            for ox in 0..w * f {
                let sy = ((oy as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                let sx = ((ox as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let v = x.get(ch, y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + x.get(ch, y0, x1) * (1.0 - fy) * fx
                    + x.get(ch, y1, x0) * fy * (1.0 - fx)
                    + x.get(ch, y1, x1) * fy * fx;
                out.set(ch, oy, ox, v);
            }
        }
    }
    out
}

/// Straightforward re-implementation of every layer, returning all outputs.
pub fn reference_forward(net: &Network, image: &FeatureMap) -> Vec<FeatureMap> {
    let mut outs: Vec<FeatureMap> = Vec::new();
    for layer in net.layers() {
        let x = outs.last().unwrap_or(image).clone();
        let y = match layer {
            Layer::Conv(c) => ref_conv(c, &x),
            Layer::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
            Layer::MaxPool { size, stride } => ref_pool(&x, *size, *stride, true),
            Layer::AvgPool { size, stride } => ref_pool(&x, *size, *stride, false),
            Layer::GlobalAvgPool => {
                let (c, h, w) = x.shape();
                let mut v = vec![0.0; c];
                for (ch, slot) in v.iter_mut().enumerate() {
                    for y in 0..h {
                        for xx in 0..w {
                            *slot += x.get(ch, y, xx);
                        }
                    }
                    *slot /= (h * w) as f64;
                }
                FeatureMap::from_vector(v).unwrap()
            }
            Layer::Dense(d) => {
                let inp = x.values();
                let v = (0..d.outputs)
                    .map(|o| {
                        let mut acc = if d.bias.is_empty() { 0.0 } else { d.bias[o] };
                        for i in 0..d.inputs {
                            acc += d.weights[o * d.inputs + i] * inp[i];
                        }
                        acc
                    })
                    .collect();
                FeatureMap::from_vector(v).unwrap()
            }
            Layer::Softmax | Layer::PixelSoftmax => {
                let (c, h, w) = x.shape();
                let mut out = FeatureMap::zeros(c, h, w);
                for y in 0..h {
                    for xx in 0..w {
                        let z: f64 = (0..c).map(|ch| x.get(ch, y, xx).exp()).sum();
                        for ch in 0..c {
                            out.set(ch, y, xx, x.get(ch, y, xx).exp() / z);
                        }
                    }
                }
                out
            }
            Layer::UpsampleToInput { factor } => ref_upsample(&x, *factor),
        };
        outs.push(y);
    }
    outs
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central finite-difference gradient of the summed batch loss with respect
/// to every parameter, compared with the analytic gradient. Returns the
/// worst relative error `|a - n| / max(|a|, |n|)`, skipping entries where
/// both are below `floor` in magnitude (compared absolutely against it).
/// ReLU signs and max-pool winners across the net: the loss is smooth in
/// any neighborhood where this pattern stays fixed.
pub fn activation_pattern(net: &Network, img: &FeatureMap) -> Vec<usize> {
    let trace = net.forward(img).unwrap();
    let mut pattern = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        let input = if i == 0 { img } else { &trace.outputs[i - 1] };
        match layer {
            Layer::Relu => pattern.extend(input.values().iter().map(|&x| (x > 0.0) as usize)),
            Layer::MaxPool { size, stride } => {
                let (c, h, w) = input.shape();
                let out = &trace.outputs[i];
                for ch in 0..c {
                    for oy in 0..out.height() {
                        for ox in 0..out.width() {
                            let (mut best, mut at) = (f64::NEG_INFINITY, 0);
                            for y in oy * stride..(oy * stride + size).min(h) {
                                for x in ox * stride..(ox * stride + size).min(w) {
                                    let v = input.get(ch, y, x);
                                    if v > best {
                                        best = v;
                                        at = y * w + x;
                                    }
                                }
                            }
                            pattern.push(at);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    pattern
}

/// Whether moving any single parameter by `±h` leaves every image's
/// activation pattern unchanged, so central differences see a smooth loss.
pub fn kink_free(net: &Network, imgs: &[&FeatureMap], h: f64) -> bool {
    let base: Vec<Vec<usize>> = imgs.iter().map(|im| activation_pattern(net, im)).collect();
    for g in 0..net.params().len() {
        for i in 0..net.params()[g].len() {
            for step in [h, -h] {
                let mut moved = net.clone();
                moved.params_mut()[g][i] += step;
                if imgs.iter().zip(&base).any(|(im, b)| activation_pattern(&moved, im) != *b) {
                    return false;
                }
            }
        }
    }
    true
}

pub fn gradient_check(
    net: &Network,
    batch: &[(&FeatureMap, webseg::convnet::Target<'_>)],
    h: f64,
    floor: f64,
) -> f64 {
    let analytic = net.gradient(batch).unwrap().gradients;
    let loss = |n: &Network| n.gradient(batch).unwrap().loss;
    let mut worst: f64 = 0.0;
    let groups = net.params().len();
    for g in 0..groups {
        let len = net.params()[g].len();
        for i in 0..len {
            let mut plus = net.clone();
            plus.params_mut()[g][i] += h;
            let mut minus = net.clone();
            minus.params_mut()[g][i] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = analytic.groups[g][i];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < floor {
                (a - numeric).abs() / floor
            } else {
                (a - numeric).abs() / scale
            };
            worst = worst.max(err);
        }
    }
    worst
}

// ---- dense excitation oracle ----

/// Dense `outputs × inputs` matrix of a layer's linear part (bias removed),
/// obtained by pushing unit vectors through the layer.
fn dense_linear_matrix(layer: &Layer, shape: (usize, usize, usize)) -> Vec<Vec<f64>> {
    let stripped = match layer {
        Layer::Conv(c) => Layer::Conv(Conv2d { bias: vec![0.0; c.out_channels], ..c.clone() }),
        Layer::Dense(d) => Layer::Dense(Dense { bias: Vec::new(), ..d.clone() }),
        other => other.clone(),
    };
    let (c, h, w) = shape;
    let n_in = c * h * w;
    let mut cols = Vec::with_capacity(n_in);
    for i in 0..n_in {
        let mut e = vec![0.0; n_in];
        e[i] = 1.0;
        let x = FeatureMap::new(c, h, w, e).unwrap();
        cols.push(stripped.forward(&x).unwrap().into_values());
    }
    let n_out = cols[0].len();
    (0..n_out).map(|j| (0..n_in).map(|i| cols[i][j]).collect()).collect()
}

/// Every conditional probability P(child i | parent j) of one layer, as a
/// dense `parents × children` matrix.
pub fn dense_conditionals(layer: &Layer, input: &FeatureMap, output_len: usize) -> Vec<Vec<f64>> {
    let x = input.values();
    let n_in = x.len();
    match layer {
        Layer::Relu | Layer::Softmax => (0..output_len)
            .map(|j| (0..n_in).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
            .collect(),
        Layer::MaxPool { size, stride } => {
            let (c, h, w) = input.shape();
            let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
            let mut m = vec![vec![0.0; n_in]; c * oh * ow];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let j = (ch * oh + oy) * ow + ox;
                        let idx: Vec<usize> = (0..size * size)
                            .map(|t| (ch * h + oy * stride + t / size) * w + ox * stride + t % size)
                            .collect();
                        let best = idx.iter().map(|&i| x[i]).fold(f64::NEG_INFINITY, f64::max);
                        let winners: Vec<usize> = idx.into_iter().filter(|&i| x[i] == best).collect();
                        for &i in &winners {
                            m[j][i] = 1.0 / winners.len() as f64;
                        }
                    }
                }
            }
            m
        }
        _ => {
            let wmat = dense_linear_matrix(layer, input.shape());
            wmat.iter()
                .map(|row| {
                    let denom: f64 = row
                        .iter()
                        .zip(x)
                        .filter(|(w, _)| **w > 0.0)
                        .map(|(w, v)| w * v)
                        .sum();
                    row.iter()
                        .zip(x)
                        .map(|(w, v)| if *w > 0.0 && denom > 0.0 { w * v / denom } else { 0.0 })
                        .collect()
                })
                .collect()
        }
    }
}

/// Top-down propagation by explicit matrix-vector products. Returns the
/// distribution over every layer output from `floor` up.
pub fn dense_excitation(net: &Network, image: &FeatureMap, k: usize, floor: usize) -> Vec<Option<Vec<f64>>> {
    let trace = net.forward(image).unwrap();
    let n = net.layers().len();
    let mut out = vec![None; n];
    let mut p = vec![0.0; net.class_count()];
    p[k - 1] = 1.0;
    out[n - 1] = Some(p.clone());
    for i in (floor + 1..n).rev() {
        let input = trace.layer_input(i);
        let m = dense_conditionals(&net.layers()[i], input, p.len());
        let mut child = vec![0.0; input.values().len()];
        for (j, row) in m.iter().enumerate() {
            for (c, &v) in child.iter_mut().zip(row) {
                *c += v * p[j];
            }
        }
        p = child;
        out[i - 1] = Some(p.clone());
    }
    out
}

pub fn zero_biases(net: &mut Network) {
    for l in net.layers_mut() {
        if let Layer::Conv(c) = l {
            c.bias.fill(0.0);
        }
    }
}

// ---- partitions ----

/// Random labels relabeled into 4-connected components, so every code is a
/// valid segment.
pub fn random_partition(r: &mut ChaCha8Rng, h: usize, w: usize, colors: u32) -> LabelImage {
    let raw: Vec<u32> = (0..h * w).map(|_| r.gen_range(0..colors)).collect();
    let mut out = vec![u32::MAX; h * w];
    let mut next = 0;
    for start in 0..h * w {
        if out[start] != u32::MAX {
            continue;
        }
        let mut stack = vec![start];
        out[start] = next;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut nb = Vec::new();
            if y > 0 { nb.push(p - w); }
            if y + 1 < h { nb.push(p + w); }
            if x > 0 { nb.push(p - 1); }
            if x + 1 < w { nb.push(p + 1); }
            for q in nb {
                if out[q] == u32::MAX && raw[q] == raw[start] {
                    out[q] = next;
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    LabelImage::new(h, w, out).unwrap()
}

/// Per-segment means by a separate sum pass and lookup pass.
pub fn naive_segment_means(values: &[f64], segs: &LabelImage) -> Vec<f64> {
    let codes = segs.labels();
    let n = *codes.iter().max().unwrap() as usize + 1;
    let mut out = vec![0.0; values.len()];
    for s in 0..n {
        let members: Vec<usize> = (0..codes.len()).filter(|&p| codes[p] as usize == s).collect();
        let mean = members.iter().map(|&p| values[p]).sum::<f64>() / members.len() as f64;
        for p in members {
            out[p] = mean;
        }
    }
    out
}
