mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use webseg::attention::AttentionMap;
use webseg::pseudo_label::{
    generate_segments, mean_iou, smooth, trimap, Provenance, SegmentMap, SegmentParams,
};
use webseg::{LabelImage, IGNORE};

fn attention(r: &mut impl Rng, h: usize, w: usize) -> AttentionMap {
    AttentionMap::new(1, random_map(r, 1, h, w, 0.0, 1.0)).unwrap()
}

#[test]
fn smooth_matches_two_pass_oracle() {
    let mut r = rng(9);
    for _ in 0..50 {
        let (h, w) = (r.gen_range(1..20), r.gen_range(1..20));
        let a = attention(&mut r, h, w);
        let part = random_partition(&mut r, h, w, 3);
        let segs = SegmentMap::new(part.clone()).unwrap();
        let out = smooth(&a, &segs).unwrap();
        assert!(max_abs_diff(out.values(), &naive_segment_means(a.values(), &part)) < 1e-12);
    }
}

#[test]
fn segments_on_textured_image_are_a_partition() {
    let img = random_map(&mut rng(3), 3, 48, 40, 0.0, 1.0);
    let params = SegmentParams { target_count: 30, ..Default::default() };
    let segs = generate_segments(&img, &params).unwrap();
    let again = SegmentMap::new(segs.labels().clone()).unwrap();
    assert_eq!(again.count(), segs.count());
    assert!(segs.sizes().iter().all(|&s| s > 0));
    assert_eq!(segs.sizes().iter().sum::<usize>(), 48 * 40);
    assert_eq!(generate_segments(&img, &params).unwrap(), segs);
}

#[test]
fn segment_count_tracks_target_on_textured_image() {
    let mut r = rng(4);
    let mut img = random_map(&mut r, 3, 64, 64, -0.05, 0.05);
    for c in 0..3 {
        for y in 0..64 {
            for x in 0..64 {
                let base = ((x + c * 11) as f64 / 64.0 + (y as f64 / 20.0).sin()) * 0.4;
                img.set(c, y, x, img.get(c, y, x) + base);
            }
        }
    }
    let segs = generate_segments(&img, &SegmentParams { target_count: 64, ..Default::default() }).unwrap();
    assert!((32..=96).contains(&segs.count()), "{} segments", segs.count());
}

#[test]
fn pure_noise_still_yields_many_segments() {
    let img = random_map(&mut rng(5), 3, 64, 64, 0.0, 1.0);
    let segs = generate_segments(&img, &SegmentParams { target_count: 64, ..Default::default() }).unwrap();
    assert!(segs.count() >= 16, "{} segments", segs.count());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn segments_always_partition(seed in any::<u64>(), s in 1usize..40, h in 1usize..24, w in 1usize..24, compact in 1.0f64..40.0) {
        let img = random_map(&mut rng(seed), 3, h, w, 0.0, 1.0);
        let params = SegmentParams { target_count: s, compactness: compact, iterations: 5, seed };
        let segs = generate_segments(&img, &params).unwrap();
        prop_assert!(SegmentMap::new(segs.labels().clone()).is_ok());
    }

    #[test]
    fn smoothing_preserves_mass_and_is_idempotent(seed in any::<u64>(), h in 1usize..24, w in 1usize..24, colors in 1u32..6) {
        let mut r = rng(seed);
        let a = attention(&mut r, h, w);
        let segs = SegmentMap::new(random_partition(&mut r, h, w, colors)).unwrap();
        let once = smooth(&a, &segs).unwrap();
        let twice = smooth(&once, &segs).unwrap();
        let mass = a.map.sum();
        prop_assert!((once.map.sum() - mass).abs() <= 1e-9 * mass.abs().max(1e-300));
        prop_assert!(max_abs_diff(once.values(), twice.values()) <= 1e-12);
    }

    #[test]
    fn trimap_partitions_and_is_monotone(seed in any::<u64>(), lo in 0.0f64..0.9, gap in 1e-6f64..0.5, bump in 0.0f64..0.3) {
        let mut r = rng(seed);
        let a = attention(&mut r, 12, 12);
        let hi = lo + gap;
        let m = trimap(&a, 2, hi, lo, Provenance::Attention).unwrap();
        let (fg, ig, bg) = m.counts();
        prop_assert_eq!(fg + ig + bg, 144);
        prop_assert!(m.mask.labels().iter().all(|&c| c == 0 || c == 2 || c == IGNORE));

        let raised = trimap(&a, 2, hi + bump, lo, Provenance::Attention).unwrap();
        prop_assert!(raised.counts().0 <= fg);
        let lowered = trimap(&a, 2, hi, lo - bump, Provenance::Attention).unwrap();
        prop_assert!(lowered.counts().2 <= bg);
    }

    #[test]
    fn iou_is_symmetric(seed in any::<u64>(), k in 1usize..5) {
        let mut r = rng(seed);
        let mk = |r: &mut rand_chacha::ChaCha8Rng| {
            LabelImage::new(6, 6, (0..36).map(|_| r.gen_range(0..=k as u32)).collect()).unwrap()
        };
        let preds: Vec<_> = (0..3).map(|_| mk(&mut r)).collect();
        let gts: Vec<_> = (0..3).map(|_| mk(&mut r)).collect();
        let ab = mean_iou(&preds, &gts, k).unwrap();
        let ba = mean_iou(&gts, &preds, k).unwrap();
        prop_assert!((ab.mean - ba.mean).abs() < 1e-15);
        prop_assert_eq!(ab.per_class, ba.per_class);
    }

    #[test]
    fn iou_is_one_iff_agreement(seed in any::<u64>(), flips in 0usize..3) {
        let mut r = rng(seed);
        let gt = LabelImage::new(5, 5, (0..25).map(|_| {
            if r.gen_bool(0.2) { IGNORE } else { r.gen_range(0..3) }
        }).collect()).unwrap();
        let mut pred = gt.clone();
        for c in pred.labels_mut() {
            if *c == IGNORE {
                *c = r.gen_range(0..3);
            }
        }
        let mut changed = false;
        for _ in 0..flips {
            let p = r.gen_range(0..25);
            if gt.labels()[p] != IGNORE {
                let old = pred.labels()[p];
                pred.labels_mut()[p] = (old + 1) % 3;
                changed = true;
            }
        }
        let m = mean_iou(&[pred], &[gt], 2).unwrap().mean;
        prop_assert_eq!(m == 1.0, !changed);
    }
}
