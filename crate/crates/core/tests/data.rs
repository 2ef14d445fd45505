mod common;

use mlpscale::data::{normalize, resize_dataset, smooth_labels, ChannelStats, FlipCrop, MixupDraw, Split};
use mlpscale::SeededRng;
use proptest::prelude::*;

#[test]
fn crop_offsets_are_uniform() {
    let pad = 4;
    let side = 2 * pad + 1;
    let draws = 100_000;
    let mut counts = vec![0usize; side * side];
    let mut rng = SeededRng::new(2024);
    for _ in 0..draws {
        let d = FlipCrop::draw(true, pad, &mut rng);
        counts[d.dy * side + d.dx] += 1;
    }
    let p = 1.0 / (side * side) as f64;
    let expect = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (cell, &n) in counts.iter().enumerate() {
        assert!((n as f64 - expect).abs() <= 3.0 * sigma, "cell {cell}: {n} vs {expect:.1} +- {sigma:.1}");
    }
}

#[test]
fn flips_are_fair_coins() {
    let mut rng = SeededRng::new(8);
    let n = 20_000;
    let flips = (0..n).filter(|_| FlipCrop::draw(true, 0, &mut rng).flip).count();
    let sigma = (n as f64 * 0.25).sqrt();
    assert!((flips as f64 - n as f64 / 2.0).abs() <= 3.0 * sigma);
    assert!((0..100).all(|_| !FlipCrop::draw(false, 2, &mut rng).flip));
}

#[test]
fn normalized_training_split_is_standardized() {
    let ds = common::prototype(600, 6, 0.7, 1, Split::Train);
    let stats = ChannelStats::compute(&ds).unwrap();
    let z: Vec<f64> = normalize(&ds.images, &stats).unwrap();
    for ch in 0..3 {
        let vals: Vec<f64> = z.iter().skip(ch).step_by(3).copied().collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() <= 1e-5, "channel {ch} mean {mean}");
        assert!((std - 1.0).abs() <= 1e-4, "channel {ch} std {std}");
    }
}

#[test]
fn bright_pixel_set_is_separable_by_construction() {
    let ds = common::bright_pixel(1000, 8, 4, Split::Train);
    for i in 0..ds.len() {
        let img = ds.image(i);
        let brightest = (0..64).max_by_key(|&p| img[p * 3] as u32 + img[p * 3 + 1] as u32 + img[p * 3 + 2] as u32).unwrap();
        assert_eq!(brightest, ds.labels[i] as usize * 64 / 10);
    }
}

#[test]
fn resize_keeps_labels_and_changes_extent() {
    let ds = common::prototype(40, 32, 0.5, 2, Split::Test);
    let big = resize_dataset(&ds, 64, 64).unwrap();
    assert_eq!((big.height, big.width, big.channels), (64, 64, 3));
    assert_eq!(big.labels, ds.labels);
    assert_eq!(big.images.len(), 40 * 64 * 64 * 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// A single lambda and a permutation partner leave the batch mean of images
    /// and targets unchanged (up to rounding).
    #[test]
    fn mixup_preserves_batch_mean(
        seed in 0u64..10_000,
        batch in 2usize..12,
        dim in 1usize..8,
        alpha in 0.1f64..2.0,
    ) {
        let mut rng = SeededRng::new(seed);
        let mut images: Vec<f64> = (0..batch * dim).map(|_| rng.uniform() * 4.0 - 2.0).collect();
        let labels: Vec<u32> = (0..batch).map(|_| rng.next_below(5) as u32).collect();
        let mut targets: Vec<f64> = smooth_labels(&labels, 0.1, 5).unwrap();
        let (img0, tgt0) = (images.clone(), targets.clone());
        let draw = MixupDraw::draw(batch, alpha, &mut rng).unwrap();
        prop_assert!((0.0..=1.0).contains(&draw.lambda));
        draw.apply(&mut images, &mut targets).unwrap();
        for (after, before, d) in [(&images, &img0, dim), (&targets, &tgt0, 5)] {
            for j in 0..d {
                let m1: f64 = after.iter().skip(j).step_by(d).sum();
                let m0: f64 = before.iter().skip(j).step_by(d).sum();
                prop_assert!((m1 - m0).abs() <= 1e-12 * batch as f64, "column {}: {} vs {}", j, m1, m0);
            }
        }
        for row in targets.chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn mixup_lambda_one_is_identity(seed in 0u64..1000, batch in 2usize..8) {
        let mut rng = SeededRng::new(seed);
        let mut images: Vec<f64> = (0..batch * 3).map(|_| rng.uniform()).collect();
        let mut targets: Vec<f64> = (0..batch * 2).map(|_| rng.uniform()).collect();
        let (img0, tgt0) = (images.clone(), targets.clone());
        let draw = MixupDraw { lambda: 1.0, partner: rng.permutation(batch) };
        draw.apply(&mut images, &mut targets).unwrap();
        prop_assert_eq!(images, img0);
        prop_assert_eq!(targets, tgt0);
    }

    #[test]
    fn smoothed_rows_sum_to_one_and_keep_argmax(
        labels in prop::collection::vec(0u32..20, 1..16),
        alpha in 0.0f64..0.999,
        extra in 0usize..10,
    ) {
        let k = 20 + extra;
        let t: Vec<f64> = smooth_labels(&labels, alpha, k).unwrap();
        for (row, &l) in t.chunks(k).zip(&labels) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-7);
            let arg = row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            prop_assert_eq!(arg, l as usize);
        }
    }

    #[test]
    fn no_flip_no_pad_is_identity(seed in 0u64..1000, h in 1usize..6, w in 1usize..6) {
        let mut rng = SeededRng::new(seed);
        let img: Vec<f64> = (0..h * w * 2).map(|_| rng.uniform()).collect();
        let d = FlipCrop::draw(false, 0, &mut rng);
        let mut out = vec![0.0; img.len()];
        d.apply(&img, (h, w, 2), &mut out);
        prop_assert_eq!(out, img);
    }
}
