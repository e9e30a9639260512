//! Dense channel-plane arrays and the few primitives the rest of the crate
//! builds on: bilinear upsampling, per-channel min-max scaling and a stable
//! descending argsort.

use crate::error::{Error, Result};

/// A `channels × height × width` array of `f64`, stored row-major with each
/// channel plane contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::usage(format!(
                "feature map dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::usage(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty feature map");
        Self {
            channels,
            height,
            width,
            values: vec![value; channels * height * width],
        }
    }

    /// A `n × 1 × 1` map holding a plain vector.
    pub fn from_vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(n, 1, 1, values)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.values[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.values[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureMap {
        FeatureMap {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Collapses all channels into one by summation.
    pub fn sum_channels(&self) -> FeatureMap {
        let n = self.plane_len();
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        FeatureMap {
            channels: 1,
            height: self.height,
            width: self.width,
            values: out,
        }
    }

    /// Keeps values where `mask` is nonzero and zeroes the rest, identically in
    /// every channel.
    pub fn masked(&self, mask: &LabelImage) -> Result<FeatureMap> {
        if mask.height() != self.height || mask.width() != self.width {
            return Err(Error::usage(format!(
                "mask {}x{} does not match map {}x{}",
                mask.height(),
                mask.width(),
                self.height,
                self.width
            )));
        }
        let mut out = self.clone();
        for c in 0..self.channels {
            for (v, &m) in out.plane_mut(c).iter_mut().zip(mask.labels()) {
                if m == 0 {
                    *v = 0.0;
                }
            }
        }
        Ok(out)
    }
}

/// Label code used for pixels excluded from losses and evaluation.
pub const IGNORE: u32 = u32::MAX;

/// A `height × width` image of integer codes: class labels (with [`IGNORE`])
/// or segment ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelImage {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::usage("label image dimensions must be positive"));
        }
        if labels.len() != height * width {
            return Err(Error::usage(format!(
                "label image {height}x{width} needs {} codes, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, code: u32) -> Self {
        assert!(height > 0 && width > 0, "empty label image");
        Self {
            height,
            width,
            labels: vec![code; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, code: u32) {
        self.labels[y * self.width + x] = code;
    }
}

/// Per-axis sampling table for half-pixel-center bilinear interpolation.
fn axis_taps(src: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let dst = src * factor;
    let max = (src - 1) as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, max);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Upsamples every channel by an integer factor with bilinear interpolation.
///
/// Output pixel `o` samples source coordinate `(o + 0.5) / factor - 0.5`,
/// clamped to the valid range, on each spatial axis.
pub fn bilinear_upsample(map: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    if factor == 0 {
        return Err(Error::usage("upsample factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(map.clone());
    }
    let (c, h, w) = map.shape();
    let (oh, ow) = (h * factor, w * factor);
    let ys = axis_taps(h, factor);
    let xs = axis_taps(w, factor);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = map.plane(ch);
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            let row = &mut dst[oy * ow..(oy + 1) * ow];
            for (o, &(x0, x1, fx)) in row.iter_mut().zip(&xs) {
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bottom = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                *o = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    FeatureMap::new(c, oh, ow, out)
}

/// Transpose of [`bilinear_upsample`]: scatters an upsampled-resolution map
/// back onto the source grid with the same interpolation weights.
pub(crate) fn bilinear_upsample_adjoint(
    grad: &FeatureMap,
    factor: usize,
) -> Result<FeatureMap> {
    if factor == 1 {
        return Ok(grad.clone());
    }
    let (c, oh, ow) = grad.shape();
    if oh % factor != 0 || ow % factor != 0 {
        return Err(Error::config("upsampled map is not a multiple of the factor"));
    }
    let (h, w) = (oh / factor, ow / factor);
    let ys = axis_taps(h, factor);
    let xs = axis_taps(w, factor);
    let mut out = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        let g = grad.plane(ch);
        let dst = out.plane_mut(ch);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v = g[oy * ow + ox];
                dst[y0 * w + x0] += v * (1.0 - fx) * (1.0 - fy);
                dst[y0 * w + x1] += v * fx * (1.0 - fy);
                dst[y1 * w + x0] += v * (1.0 - fx) * fy;
                dst[y1 * w + x1] += v * fx * fy;
            }
        }
    }
    Ok(out)
}

/// Indices ordering `scores` from largest to smallest. Equal scores keep
/// their original relative order.
pub fn argsort_descending(scores: &[f64]) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::usage("argsort of an empty score vector"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(idx)
}

/// Rescales each channel to `[0, 1]` via `(v - min) / (max - min)`. A channel
/// with no range becomes all zeros.
pub fn minmax_normalize(map: &FeatureMap) -> FeatureMap {
    let mut out = map.clone();
    for c in 0..out.channels() {
        let plane = out.plane_mut(c);
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if range > 0.0 && range.is_finite() {
            for v in plane.iter_mut() {
                *v = ((*v - lo) / range).clamp(0.0, 1.0);
            }
        } else {
            plane.fill(0.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(c: usize, h: usize, w: usize, v: &[f64]) -> FeatureMap {
        FeatureMap::new(c, h, w, v.to_vec()).unwrap()
    }

    /// Evaluates the half-pixel mapping directly for one output pixel.
    fn reference_sample(src: &FeatureMap, c: usize, oy: usize, ox: usize, factor: usize) -> f64 {
        let coord = |o: usize, n: usize| {
            ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64)
        };
        let sy = coord(oy, src.height());
        let sx = coord(ox, src.width());
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let y1 = (y0 + 1).min(src.height() - 1);
        let x1 = (x0 + 1).min(src.width() - 1);
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        src.get(c, y0, x0) * (1.0 - fy) * (1.0 - fx)
            + src.get(c, y0, x1) * (1.0 - fy) * fx
            + src.get(c, y1, x0) * fy * (1.0 - fx)
            + src.get(c, y1, x1) * fy * fx
    }

    #[test]
    fn upsample_constant_map() {
        let m = FeatureMap::filled(1, 4, 4, 3.0);
        let up = bilinear_upsample(&m, 8).unwrap();
        assert_eq!(up.shape(), (1, 32, 32));
        assert!(up.values().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn upsample_single_sample() {
        let up = bilinear_upsample(&map(1, 1, 1, &[5.0]), 4).unwrap();
        assert_eq!(up.shape(), (1, 4, 4));
        assert!(up.values().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn upsample_matches_per_pixel_reference() {
        let src = map(1, 2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let up = bilinear_upsample(&src, 2).unwrap();
        // Frozen from the per-pixel evaluation of the alignment formula.
        let expected = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                let r = reference_sample(&src, 0, y, x, 2);
                assert!((up.get(0, y, x) - r).abs() < 1e-15);
                assert!((up.get(0, y, x) - expected[x]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn upsample_rejects_zero_factor() {
        assert!(bilinear_upsample(&FeatureMap::zeros(1, 2, 2), 0).is_err());
    }

    #[test]
    fn adjoint_is_transpose() {
        let a = map(2, 2, 3, &[0.3, -1.0, 2.0, 0.5, 0.1, 0.7, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let up = bilinear_upsample(&a, 3).unwrap();
        let g = FeatureMap::new(
            2,
            6,
            9,
            (0..108).map(|i| ((i * 37) % 11) as f64 - 5.0).collect(),
        )
        .unwrap();
        let lhs: f64 = up.values().iter().zip(g.values()).map(|(x, y)| x * y).sum();
        let adj = bilinear_upsample_adjoint(&g, 3).unwrap();
        let rhs: f64 = a.values().iter().zip(adj.values()).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn argsort_examples() {
        assert_eq!(argsort_descending(&[0.1, 0.7, 0.2]).unwrap(), vec![1, 2, 0]);
        assert_eq!(argsort_descending(&[0.5, 0.5, 0.1]).unwrap(), vec![0, 1, 2]);
        assert!(argsort_descending(&[]).is_err());
    }

    #[test]
    fn argsort_matches_naive_sort() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..20).map(|_| rng.gen::<f64>()).collect();
            // Selection sort: repeatedly take the first maximum still unused.
            let mut used = vec![false; scores.len()];
            let mut naive = Vec::new();
            for _ in 0..scores.len() {
                let mut best: Option<usize> = None;
                for i in 0..scores.len() {
                    if !used[i] && best.map_or(true, |b| scores[i] > scores[b]) {
                        best = Some(i);
                    }
                }
                used[best.unwrap()] = true;
                naive.push(best.unwrap());
            }
            assert_eq!(argsort_descending(&scores).unwrap(), naive);
        }
    }

    #[test]
    fn minmax_examples() {
        let n = minmax_normalize(&map(1, 1, 3, &[2.0, 4.0, 6.0]));
        assert_eq!(n.values(), &[0.0, 0.5, 1.0]);
        let n = minmax_normalize(&FeatureMap::filled(1, 2, 2, 7.0));
        assert!(n.values().iter().all(|&v| v == 0.0));
        let n = minmax_normalize(&map(1, 1, 3, &[-1.0, 0.0, 3.0]));
        assert_eq!(n.values(), &[0.0, 0.25, 1.0]);
    }

    #[test]
    fn minmax_is_per_channel() {
        let n = minmax_normalize(&map(2, 1, 2, &[0.0, 2.0, 10.0, 10.0]));
        assert_eq!(n.values(), &[0.0, 1.0, 0.0, 0.0]);
    }

    fn small_map() -> impl Strategy<Value = FeatureMap> {
        (1usize..3, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| {
            proptest::collection::vec(-100.0f64..100.0, c * h * w)
                .prop_map(move |v| FeatureMap::new(c, h, w, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn upsample_stays_within_bounds(m in small_map(), factor in 1usize..6) {
            let up = bilinear_upsample(&m, factor).unwrap();
            prop_assert_eq!(up.shape(), (m.channels(), m.height() * factor, m.width() * factor));
            let (lo, hi) = (m.min(), m.max());
            for &v in up.values() {
                prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            }
        }

        #[test]
        fn upsample_factor_one_is_identity(m in small_map()) {
            prop_assert_eq!(bilinear_upsample(&m, 1).unwrap(), m);
        }

        #[test]
        fn minmax_bounded_and_idempotent(m in small_map()) {
            let once = minmax_normalize(&m);
            prop_assert!(once.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let twice = minmax_normalize(&once);
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn argsort_orders_scores(v in proptest::collection::vec(-10.0f64..10.0, 1..40)) {
            let idx = argsort_descending(&v).unwrap();
            for pair in idx.windows(2) {
                prop_assert!(v[pair[0]] >= v[pair[1]]);
            }
        }
    }
}
