//! Property suites for kernels, accounting, optimizers, the batch pipeline
//! and reporting.

mod common;

use mlpscale::data::{denormalize, normalize, AugmentConfig, ChannelStats, Split};
use mlpscale::model::{count_forward_flops, count_params, Activation, BlockKind, InputShape, MlpModel, ModelConfig};
use mlpscale::optim::{Lion, LionConfig, Optimizer, OptimizerConfig, SgdConfig};
use mlpscale::report::{encode_pgm, filter_grid, filter_tile};
use mlpscale::scaling::{compute_cost, fit_allocation, fit_power_law, log_space, FrontierPoint};
use mlpscale::tensor::moments;
use mlpscale::train::{init_model, mean_loss, prepare_batch, TrainConfig, TrainMode, Trainer};
use mlpscale::{SeededRng, Tensor};
use proptest::prelude::*;
use rand::RngCore;

fn rand_mat<T: mlpscale::Scalar>(r: usize, c: usize, rng: &mut SeededRng) -> Tensor<T> {
    Tensor::from_vec(&[r, c], (0..r * c).map(|_| T::lit(2.0 * rng.uniform() - 1.0)).collect()).unwrap()
}

#[test]
fn blocked_matmul_agrees_with_naive_f32() {
    let mut rng = SeededRng::new(1);
    for _ in 0..5 {
        let a = rand_mat::<f32>(64, 64, &mut rng);
        let b = rand_mat::<f32>(64, 64, &mut rng);
        let fast = a.matmul(&b).unwrap();
        let slow = a.matmul_naive(&b).unwrap();
        let scale = slow.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() <= 1e-5 * scale, "{x} vs {y}");
        }
    }
}

#[test]
fn naive_matmul_is_the_triple_loop_f64() {
    let mut rng = SeededRng::new(2);
    let (n, k, m) = (17, 23, 9);
    let a = rand_mat::<f64>(n, k, &mut rng);
    let b = rand_mat::<f64>(k, m, &mut rng);
    let got = a.matmul_naive(&b).unwrap();
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data()[i * k + p] * b.data()[p * m + j];
            }
            assert_eq!(got.data()[i * m + j].to_bits(), acc.to_bits());
        }
    }
}

#[test]
fn seeded_streams_are_reproducible_and_distinct() {
    let draw = |seed| {
        let mut r = SeededRng::new(seed);
        (0..64).map(|_| r.next_u64()).collect::<Vec<_>>()
    };
    assert_eq!(draw(5), draw(5));
    assert_ne!(draw(5), draw(6));
    // Interleaving two generators does not perturb either stream.
    let (mut a, mut b) = (SeededRng::new(5), SeededRng::new(6));
    let mixed: Vec<(u64, u64)> = (0..64).map(|_| (a.next_u64(), b.next_u64())).collect();
    assert_eq!(mixed.iter().map(|p| p.0).collect::<Vec<_>>(), draw(5));
    assert_eq!(mixed.iter().map(|p| p.1).collect::<Vec<_>>(), draw(6));
}

#[test]
fn zeroed_collapse_makes_the_stack_an_identity() {
    let mut rng = SeededRng::new(4);
    let cfg = ModelConfig::bottleneck(3, 6, InputShape::new(2, 2, 3), 4);
    let mut model = MlpModel::<f64>::new(cfg, &mut rng).unwrap();
    for (name, t) in model.params_mut().named_mut() {
        if name.contains(".collapse.") {
            t.fill(0.0);
        }
    }
    let x = common::random_tensor(&[3, 12], &mut rng);
    let feats = model.features(&x).unwrap();
    let embedded = model.params().embed.forward(x.data(), 3).unwrap();
    assert_eq!(feats.data(), &embedded[..]);
}

#[test]
fn first_epoch_lowers_the_loss_with_defaults() {
    let train = common::bright_pixel(1000, 8, 3, Split::Train);
    let cfg = TrainConfig::defaults(TrainMode::Scratch);
    let model = init_model::<f32>(ModelConfig::bottleneck(2, 32, InputShape::square(8), 10), cfg.seed).unwrap();
    let stats = ChannelStats::compute(&train).unwrap();
    let smoothing = cfg.augment.label_smoothing;
    let before = mean_loss(&model, &train, &stats, smoothing).unwrap();
    let mut t = Trainer::new(model, cfg, stats.clone()).unwrap();
    t.train_epoch(&train).unwrap();
    let after = mean_loss(t.model(), &train, &stats, smoothing).unwrap();
    assert!(after < before, "loss {before} -> {after}");
}

fn any_config() -> impl Strategy<Value = ModelConfig> {
    (1usize..4, 1usize..24, 1usize..5, 1usize..6, 1usize..4, 2usize..12, any::<bool>()).prop_map(
        |(depth, width, expansion, side, channels, k, std)| ModelConfig {
            depth,
            width,
            expansion,
            input: InputShape::new(side, side, channels),
            num_classes: k,
            block: if std { BlockKind::Standard } else { BlockKind::InvertedBottleneck },
            activation: Activation::Relu,
            dropout: 0.0,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_is_neutral(r in 1usize..12, c in 1usize..12, seed in 0u64..100) {
        let a = rand_mat::<f64>(r, c, &mut SeededRng::new(seed));
        prop_assert_eq!(a.matmul(&Tensor::identity(c)).unwrap(), a.clone());
        prop_assert_eq!(Tensor::identity(r).matmul(&a).unwrap(), a);
    }

    #[test]
    fn moments_shift(xs in prop::collection::vec(-100.0f64..100.0, 1..64), shift in -1e3f64..1e3) {
        let (m, v) = moments(&xs).unwrap();
        let moved: Vec<f64> = xs.iter().map(|x| x + shift).collect();
        let (m2, v2) = moments(&moved).unwrap();
        prop_assert!((m2 - (m + shift)).abs() <= 1e-9 * (1.0 + shift.abs()));
        prop_assert!((v2 - v).abs() <= 1e-6);
    }

    #[test]
    fn accounting_matches_materialized_models(cfg in any_config(), seed in 0u64..100) {
        let model = MlpModel::<f32>::new(cfg.clone(), &mut SeededRng::new(seed)).unwrap();
        prop_assert_eq!(model.scalar_count() as u64, count_params(&cfg));
        prop_assert!(count_forward_flops(&cfg) <= count_params(&cfg));
    }

    #[test]
    fn lion_ignores_gradient_scale(seed in 0u64..1000, scale in 1e-3f64..1e3) {
        let mut rng = SeededRng::new(seed);
        let cfg = ModelConfig::bottleneck(1, 4, InputShape::new(1, 2, 1), 3);
        let params = MlpModel::<f64>::new(cfg, &mut rng).unwrap().params().clone();
        let mut grads = params.zeros_like();
        for (_, t) in grads.named_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 2.0 * rng.uniform() - 1.0);
        }
        let mut scaled = grads.clone();
        for (_, t) in scaled.named_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let (mut p1, mut p2) = (params.clone(), params.clone());
        Lion::new(LionConfig::new(1e-3)).step(&mut p1, &grads, 1.0).unwrap();
        Lion::new(LionConfig::new(1e-3)).step(&mut p2, &scaled, 1.0).unwrap();
        prop_assert_eq!(p1, p2);
    }

    #[test]
    fn optimizers_are_deterministic(seed in 0u64..1000, lion in any::<bool>()) {
        let mut rng = SeededRng::new(seed);
        let cfg = ModelConfig::standard(1, 3, InputShape::new(1, 2, 1), 2);
        let params = MlpModel::<f64>::new(cfg, &mut rng).unwrap().params().clone();
        let mut grads = params.zeros_like();
        for (_, t) in grads.named_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.uniform() - 0.5);
        }
        let oc = if lion {
            OptimizerConfig::Lion(LionConfig { weight_decay: 0.1, ..LionConfig::new(1e-2) })
        } else {
            OptimizerConfig::SgdMomentum(SgdConfig { head_lr: 0.01, body_lr: 0.001, momentum: 0.9 })
        };
        let run = || {
            let mut p = params.clone();
            let mut opt = Optimizer::<f64>::new(oc);
            for _ in 0..3 {
                opt.step(&mut p, &grads, 1.0).unwrap();
            }
            (p, opt.state().clone())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn batches_are_reproducible_and_shape_preserving(
        seed in 0u64..1000,
        epoch in 0u64..5,
        step in 0u64..5,
        flip in any::<bool>(),
        pad in 0usize..3,
        mix in prop::option::of(0.1f64..1.0),
    ) {
        let ds = common::prototype(30, 4, 0.5, seed, Split::Train);
        let stats = ChannelStats::compute(&ds).unwrap();
        let aug = AugmentConfig { flip, crop_pad: pad, mixup_alpha: mix.unwrap_or(0.0), label_smoothing: 0.1 };
        let idx: Vec<usize> = (0..7).map(|i| (i * 3 + step as usize) % 30).collect();
        let make = || {
            let mut rng = SeededRng::derived(seed, &[epoch, step]);
            prepare_batch::<f64>(&ds, &idx, &stats, &aug, &mut rng).unwrap()
        };
        let (a, b) = (make(), make());
        prop_assert_eq!(a.inputs.data(), b.inputs.data());
        prop_assert_eq!(&a.targets, &b.targets);
        prop_assert_eq!(a.inputs.shape(), &[7, ds.image_len()][..]);
        prop_assert_eq!(a.targets.len(), 7 * ds.num_classes);
        if mix.is_none() && !flip && pad == 0 {
            let plain: Vec<f64> = idx.iter().flat_map(|&i| normalize::<f64>(ds.image(i), &stats).unwrap()).collect();
            prop_assert_eq!(a.inputs.data(), &plain[..]);
        }
    }

    #[test]
    fn normalization_round_trips(seed in 0u64..1000) {
        let ds = common::prototype(20, 3, 0.8, seed, Split::Train);
        let stats = ChannelStats::compute(&ds).unwrap();
        let z: Vec<f32> = normalize(&ds.images, &stats).unwrap();
        let back = denormalize(&z, &stats);
        for (&p, q) in ds.images.iter().zip(back) {
            prop_assert!((p as f64 - q).abs() <= 1e-5 * 255.0, "{} vs {}", p, q);
        }
    }

    #[test]
    fn compute_cost_is_linear(f in 1u64..1 << 20, n in 1u64..1 << 20, t in 1u64..1000, k in 1u64..50) {
        let base = compute_cost(f, n, t).unwrap();
        prop_assert_eq!(base, 3 * f as u128 * n as u128 * t as u128);
        prop_assert_eq!(compute_cost(f * k, n, t).unwrap(), k as u128 * base);
        prop_assert_eq!(compute_cost(f, n * k, t).unwrap(), k as u128 * base);
        prop_assert_eq!(compute_cost(f, n, t * k).unwrap(), k as u128 * base);
    }

    #[test]
    fn fits_ignore_point_order(seed in 0u64..1000) {
        let mut rng = SeededRng::new(seed);
        let pts: Vec<(f64, f64)> = log_space(10.0, 1e5, 7)
            .into_iter()
            .map(|c| (c, 1.5 * c.powf(-0.3) + 0.05 + 0.01 * rng.uniform()))
            .collect();
        let perm = rng.permutation(pts.len());
        let shuffled: Vec<_> = perm.iter().map(|&i| pts[i]).collect();
        prop_assert_eq!(fit_power_law(&pts).unwrap(), fit_power_law(&shuffled).unwrap());
        let fp: Vec<FrontierPoint> = pts
            .iter()
            .map(|&(c, e)| FrontierPoint { compute: c, error: e, params: c.sqrt(), examples: c.powf(0.4) })
            .collect();
        let fs: Vec<FrontierPoint> = perm.iter().map(|&i| fp[i]).collect();
        prop_assert_eq!(fit_allocation(&fp).unwrap(), fit_allocation(&fs).unwrap());
    }

    #[test]
    fn tiles_ignore_positive_row_scaling(seed in 0u64..1000, scale in 0.01f32..100.0) {
        let mut rng = SeededRng::new(seed);
        let row: Vec<f32> = (0..5 * 4 * 3).map(|_| rng.uniform() as f32 - 0.5).collect();
        let scaled: Vec<f32> = row.iter().map(|v| v * scale).collect();
        prop_assert_eq!(filter_tile(&row, 5, 4, 3), filter_tile(&scaled, 5, 4, 3));
    }

    #[test]
    fn grid_reads_only_the_leading_rows(seed in 0u64..1000, g in 1usize..4) {
        let mut rng = SeededRng::new(seed);
        let (m, d) = (12, 3 * 3 * 2);
        let w: Vec<f32> = (0..m * d).map(|_| rng.uniform() as f32).collect();
        let mut other = w.clone();
        for v in &mut other[g * g * d..] {
            *v = rng.uniform() as f32 * 7.0;
        }
        let a = filter_grid(&Tensor::from_vec(&[m, d], w).unwrap(), 3, 3, 2, g).unwrap();
        let b = filter_grid(&Tensor::from_vec(&[m, d], other).unwrap(), 3, 3, 2, g).unwrap();
        prop_assert_eq!(encode_pgm(&a.image), encode_pgm(&b.image));
    }
}
