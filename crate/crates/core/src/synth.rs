//! Synthetic noisily tagged shape images.
//!
//! Each image holds one foreground object whose class fixes its geometry,
//! hue and texture, optionally joined by a smaller distractor of another
//! class. A fixed fraction of tags is replaced by a wrong class. Every image
//! is rendered from its own named RNG stream, so generation is deterministic
//! and parallel.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use std::path::{Path, PathBuf};

use crate::dataset::{DatasetManifest, Record, Split};
use crate::error::{Error, Result};
use crate::io;
use crate::seed;
use crate::tensor::{FeatureMap, LabelImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Diamond,
    Ellipse,
    Plus,
    Ring,
    Bar,
    Cross,
}

// Solid shapes first: thin ones are hard to resolve at the segmenter's
// output stride.
const SHAPES: [Shape; 9] = [
    Shape::Disk,
    Shape::Square,
    Shape::Triangle,
    Shape::Diamond,
    Shape::Ellipse,
    Shape::Plus,
    Shape::Ring,
    Shape::Bar,
    Shape::Cross,
];

impl Shape {
    /// Whether offset `(dy, dx)` from the center lies inside a shape of
    /// radius `r`.
    pub fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        let (ay, ax) = (dy.abs(), dx.abs());
        match self {
            Shape::Disk => dy * dy + dx * dx <= r * r,
            Shape::Square => ay.max(ax) <= 0.85 * r,
            Shape::Triangle => dy >= -r && dy <= 0.8 * r && ax <= (dy + r) / 1.8,
            Shape::Plus => (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r),
            Shape::Ring => {
                let d2 = dy * dy + dx * dx;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
            Shape::Diamond => ay + ax <= r,
            Shape::Ellipse => dy * dy / 0.4 + dx * dx <= r * r,
            Shape::Bar => ay <= r / 2.5 && ax <= r,
            Shape::Cross => (ay - ax).abs() <= r / 3.0 && ay.max(ax) <= 0.8 * r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    Flat,
    Stripes,
    Checker,
}

/// Appearance of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStyle {
    pub shape: Shape,
    /// Base hue in `[0, 1)`.
    pub hue: f64,
    pub texture: Texture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub attention_train: usize,
    pub finetune_pool: usize,
    pub eval: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.attention_train + self.finetune_pool + self.eval
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub class_count: usize,
    pub height: usize,
    pub width: usize,
    pub styles: Vec<ClassStyle>,
    /// Probability that an image also contains a smaller object of another
    /// class.
    pub distractor_rate: f64,
    /// Fraction of images per split whose tag names a wrong class.
    pub noise_rate: f64,
    pub counts: SplitCounts,
    pub seed: u64,
}

impl SynthSpec {
    /// Evenly spaced hues with shapes and textures cycling through the
    /// built-in lists.
    pub fn default_styles(class_count: usize) -> Vec<ClassStyle> {
        let textures = [Texture::Flat];
        (0..class_count)
            .map(|i| ClassStyle {
                shape: SHAPES[i % SHAPES.len()],
                hue: i as f64 / class_count as f64,
                texture: textures[i % textures.len()],
            })
            .collect()
    }

    pub fn new(class_count: usize, counts: SplitCounts, seed: u64) -> Self {
        Self {
            class_count,
            height: 64,
            width: 64,
            styles: Self::default_styles(class_count),
            distractor_rate: 0.5,
            noise_rate: 0.3,
            counts,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::config("synthetic data needs at least two classes"));
        }
        if self.styles.len() != self.class_count {
            return Err(Error::config(format!(
                "{} styles for {} classes",
                self.styles.len(),
                self.class_count
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::config("synthetic images must be at least 16x16"));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::config("noise rate must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(Error::config("distractor rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::new(
            5,
            SplitCounts {
                attention_train: 2000,
                finetune_pool: 500,
                eval: 500,
            },
            0,
        )
    }
}

/// One rendered image with its noisy tag and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub split: Split,
    pub image: FeatureMap,
    pub truth: LabelImage,
    pub true_class: u32,
    pub tag: u32,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Placed {
    class: u32,
    cy: f64,
    cx: f64,
    r: f64,
}

fn render(spec: &SynthSpec, index: usize, split: Split, true_class: u32, tag: u32) -> SynthSample {
    let (h, w) = (spec.height, spec.width);
    let mut rng = seed::rng(spec.seed, &format!("synth/image/{index}"));
    let scale = h.min(w) as f64 / 64.0;

    let mut objects = vec![];
    let r = rng.gen_range(14.0..22.0) * scale;
    objects.push(Placed {
        class: true_class,
        cy: rng.gen_range(r..h as f64 - r),
        cx: rng.gen_range(r..w as f64 - r),
        r,
    });
    if rng.gen_bool(spec.distractor_rate) {
        let mut other = rng.gen_range(1..spec.class_count as u32);
        if other >= true_class {
            other += 1;
        }
        let r = rng.gen_range(5.0..8.0) * scale;
        // A few placement attempts to keep the distractor clear of the main
        // object; the last attempt is kept regardless.
        let mut placed = Placed { class: other, cy: 0.0, cx: 0.0, r };
        for _ in 0..8 {
            placed.cy = rng.gen_range(r..h as f64 - r);
            placed.cx = rng.gen_range(r..w as f64 - r);
            let main = &objects[0];
            let d = ((placed.cy - main.cy).powi(2) + (placed.cx - main.cx).powi(2)).sqrt();
            if d > placed.r + main.r + 2.0 {
                break;
            }
        }
        objects.push(placed);
    }

    let bg_a = hsv_to_rgb(rng.gen(), rng.gen_range(0.0..0.15), rng.gen_range(0.0..0.8));
    let bg_b = hsv_to_rgb(rng.gen(), rng.gen_range(0.0..0.15), rng.gen_range(0.0..0.8));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (gy, gx) = (angle.sin(), angle.cos());

    let mut image = FeatureMap::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let t = (((y as f64 / h as f64 - 0.5) * gy + (x as f64 / w as f64 - 0.5) * gx) + 0.71) / 1.42;
            for c in 0..3 {
                let v = bg_a[c] * (1.0 - t) + bg_b[c] * t + rng.gen_range(-0.06..0.06);
                image.set(c, y, x, v);
            }
        }
    }

    let mut truth = LabelImage::filled(h, w, 0);
    for obj in &objects {
        let style = spec.styles[obj.class as usize - 1];
        let color = hsv_to_rgb(
            style.hue + rng.gen_range(-0.03..0.03),
            rng.gen_range(0.6..0.95),
            rng.gen_range(0.6..0.95),
        );
        let period = rng.gen_range(3..6) as usize;
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 + 0.5 - obj.cy, x as f64 + 0.5 - obj.cx);
                if !style.shape.contains(dy, dx, obj.r) {
                    continue;
                }
                let shade = match style.texture {
                    Texture::Flat => 1.0,
                    Texture::Stripes => {
                        if (x + y) / period % 2 == 0 { 1.0 } else { 0.8 }
                    }
                    Texture::Checker => {
                        if (x / period + y / period) % 2 == 0 { 1.0 } else { 0.8 }
                    }
                };
                for c in 0..3 {
                    image.set(c, y, x, color[c] * shade + rng.gen_range(-0.04..0.04));
                }
                truth.set(y, x, obj.class);
            }
        }
    }
    let image = image.map(|v| v.clamp(0.0, 1.0));
    SynthSample {
        split,
        image,
        truth,
        true_class,
        tag,
    }
}

/// Renders the whole benchmark in split order: attention-train, then
/// finetune-pool, then eval.
pub fn render_dataset(spec: &SynthSpec) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    let k = spec.class_count as u32;
    let mut plan = Vec::with_capacity(spec.counts.total());
    let sizes = [
        (Split::AttentionTrain, spec.counts.attention_train),
        (Split::FinetunePool, spec.counts.finetune_pool),
        (Split::Eval, spec.counts.eval),
    ];
    for (split, n) in sizes {
        let mut rng = seed::rng(spec.seed, &format!("synth/labels/{}", split.as_str()));
        let classes: Vec<u32> = (0..n).map(|_| rng.gen_range(1..=k)).collect();
        let mislabeled = (spec.noise_rate * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut tags = classes.clone();
        for &i in &order[..mislabeled] {
            let mut wrong = rng.gen_range(1..k);
            if wrong >= classes[i] {
                wrong += 1;
            }
            tags[i] = wrong;
        }
        for i in 0..n {
            plan.push((split, classes[i], tags[i]));
        }
    }
    Ok(plan
        .into_par_iter()
        .enumerate()
        .map(|(i, (split, class, tag))| render(spec, i, split, class, tag))
        .collect())
}

/// Renders the benchmark and writes `images/NNNNN.png`,
/// `truth/NNNNN.png` and `manifest.tsv` under `out_dir`.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let samples = render_dataset(spec)?;
    let records: Vec<Record> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let image = PathBuf::from(format!("images/{i:05}.png"));
            let truth = PathBuf::from(format!("truth/{i:05}.png"));
            io::save_image(&out_dir.join(&image), &s.image)?;
            io::save_mask(&out_dir.join(&truth), &s.truth)?;
            Ok(Record::new(image, s.tag, s.split, Some(truth)))
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest::new(out_dir, spec.class_count, records)?;
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
