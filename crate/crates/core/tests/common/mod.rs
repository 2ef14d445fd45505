#![allow(dead_code)]

use mlpscale::data::{synth_dataset, Dataset, Split, SynthPattern, SynthSpec};
use mlpscale::model::{Activation, BlockKind, InputShape, MlpModel, ModelConfig};
use mlpscale::{SeededRng, Tensor};

/// Small model with every parameter (LN gains and biases included) drawn at
/// random so no gradient path is trivially zero.
pub fn random_tiny_model(rng: &mut SeededRng, block: BlockKind, activation: Activation) -> MlpModel<f64> {
    let side = 1 + rng.next_below(3) as usize;
    let channels = 1 + rng.next_below(3) as usize;
    let config = ModelConfig {
        depth: 1 + rng.next_below(2) as usize,
        // Width 2 makes LN output +-1 whatever the input, leaving gradients
        // through it at the eps scale where differences are pure noise.
        width: 3 + rng.next_below(3) as usize,
        expansion: 1 + rng.next_below(3) as usize,
        input: InputShape::new(side, side + rng.next_below(2) as usize, channels),
        num_classes: 2 + rng.next_below(3) as usize,
        block,
        activation,
        dropout: 0.0,
    };
    let mut model = MlpModel::new(config, rng).unwrap();
    for (name, t) in model.params_mut().named_mut() {
        let gain = name.ends_with("norm.gain");
        for v in t.data_mut() {
            let u = 2.0 * rng.uniform() - 1.0;
            *v = if gain { 1.0 + 0.5 * u } else { u };
        }
    }
    model
}

pub fn random_tensor(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| 2.0 * rng.uniform() - 1.0).collect()).unwrap()
}

/// Loss `sum(logits * r)`, whose logit gradient is exactly `r`.
fn probe_loss(model: &MlpModel<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    let (logits, _) = model.forward(x).unwrap();
    logits.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Largest per-tensor relative error `|g - g_fd| / max(|g|, |g_fd|)` between
/// backprop and central differences, norms taken over each tensor. The
/// differences at `h` and `h / 2` are Richardson-combined to cancel the `h^2`
/// truncation term, which otherwise dominates on strongly curved tiny models.
pub fn gradient_check(model: &MlpModel<f64>, x: &Tensor<f64>, r: &Tensor<f64>, h: f64) -> (f64, String) {
    let (_, cache) = model.forward(x).unwrap();
    let grads = model.backward(&cache, r).unwrap();
    let analytic = grads.named();
    let mut worst = (0.0, String::new());
    for (ti, (name, g)) in analytic.iter().enumerate() {
        let mut diff = 0.0;
        let mut norm_a = 0.0;
        let mut norm_fd = 0.0;
        for i in 0..g.len() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params_mut().named_mut()[ti].1.data_mut()[i] += delta;
                probe_loss(&m, x, r)
            };
            let central = |step: f64| (eval(step) - eval(-step)) / (2.0 * step);
            let fd = (4.0 * central(h / 2.0) - central(h)) / 3.0;
            let a = g.data()[i];
            diff += (a - fd) * (a - fd);
            norm_a += a * a;
            norm_fd += fd * fd;
        }
        let scale = norm_a.sqrt().max(norm_fd.sqrt());
        let rel = if scale == 0.0 { 0.0 } else { diff.sqrt() / scale };
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
    }
    worst
}

pub fn bright_pixel(n: usize, side: usize, seed: u64, split: Split) -> Dataset {
    let spec = SynthSpec {
        n,
        height: side,
        width: side,
        channels: 3,
        num_classes: 10,
        pattern: SynthPattern::BrightPixel { noise: 100 },
        balanced: true,
    };
    synth_dataset(&spec, seed, split).unwrap()
}

pub fn prototype(n: usize, side: usize, mix: f64, seed: u64, split: Split) -> Dataset {
    let spec = SynthSpec {
        n,
        height: side,
        width: side,
        channels: 3,
        num_classes: 10,
        pattern: SynthPattern::Prototype { mix },
        balanced: true,
    };
    synth_dataset(&spec, seed, split).unwrap()
}
