//! Support code for gradient-check oracles and fixture networks.
//!
//! Everything here exists for tests (unit, integration, acceptance); nothing
//! in the production path depends on it. The finite-difference routines are
//! deliberately independent of the reverse-mode implementation they check:
//! they only evaluate forward passes.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{backward, forward, loss_and_grad, LayerKind, LossKind, TapeBase, WeightMap};
use crate::rules::BackwardPolicy;
use crate::tensor::{Element, Tensor, Tensor64, TensorBase, WindowSpec};

/// A degenerate tape carrying only logits; lets loss functions be tested in
/// isolation.
pub fn tape_with_logits<E: Element>(logits: TensorBase<E>) -> TapeBase<E> {
    crate::graph::tape_from_logits(logits)
}

/// Flatten + single linear layer over a 3×32×32 input with the given weight
/// matrix (classes × 3072); the workhorse for exactly solvable cases.
pub fn linear_probe(weight: Tensor) -> (crate::models::ModelDef, crate::models::WeightStore) {
    let classes = weight.shape()[0];
    let shape = weight.shape().to_vec();
    let layers = vec![
        crate::graph::LayerKind::Flatten,
        crate::graph::LayerKind::Linear { weight: "fc0.w".into(), bias: None },
    ];
    let def = crate::models::ModelDef::from_parts(
        "linear-probe",
        (3, 32, 32),
        layers,
        classes,
        vec![("fc0.w".into(), shape)],
    );
    let mut tensors = HashMap::new();
    tensors.insert("fc0.w".to_string(), weight);
    let store = crate::models::WeightStore::new(
        tensors,
        crate::models::StoreMeta { model_name: "linear-probe".into(), seed: 0, clean_test_accuracy: 0.0 },
    );
    (def, store)
}

fn randn(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller; plenty for fixture weights
    let u1: f32 = rng.random::<f32>().max(1e-7);
    let u2: f32 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

fn init_conv(rng: &mut ChaCha8Rng, weights: &mut WeightMap<f32>, id: &str, o: usize, i: usize, k: usize) {
    let fan_in = (i * k * k) as f32;
    let std = (2.0 / fan_in).sqrt();
    weights.insert(format!("{id}.w"), Tensor::from_fn(&[o, i, k, k], |_| randn(rng) * std));
    weights.insert(format!("{id}.b"), Tensor::from_fn(&[o], |_| randn(rng) * 0.1));
}

fn init_linear(rng: &mut ChaCha8Rng, weights: &mut WeightMap<f32>, id: &str, o: usize, i: usize) {
    let std = (1.0 / i as f32).sqrt();
    weights.insert(format!("{id}.w"), Tensor::from_fn(&[o, i], |_| randn(rng) * std));
    weights.insert(format!("{id}.b"), Tensor::from_fn(&[o], |_| randn(rng) * 0.1));
}

/// Builds a random small network over an 8×8 input, mixing conv, ReLU,
/// max-pool, batch-norm, residual and linear layers as requested, together
/// with random weights and a well-conditioned random input (no ReLU input or
/// pooled window sits close enough to a kink to invalidate central
/// differences).
pub fn random_small_net(
    rng: &mut ChaCha8Rng,
    use_relu: bool,
    use_pool: bool,
    use_residual: bool,
) -> (Vec<LayerKind>, WeightMap<f32>, Tensor) {
    let c_in = rng.random_range(2..=3usize);
    let c_mid = rng.random_range(3..=4usize);
    let mut layers = Vec::new();
    let mut weights = HashMap::new();
    let mut relu_ord = 0usize;
    let mut pool_ord = 0usize;

    init_conv(rng, &mut weights, "conv0", c_mid, c_in, 3);
    layers.push(LayerKind::Conv {
        weight: "conv0.w".into(),
        bias: Some("conv0.b".into()),
        spec: WindowSpec::square_padded(3, 1, 1).unwrap(),
    });
    let mut h = 8usize;
    if use_relu {
        layers.push(LayerKind::Relu { ordinal: relu_ord });
        relu_ord += 1;
    }
    if use_pool {
        let overlapping = rng.random::<f32>() < 0.5;
        let spec = if overlapping { WindowSpec::square(3, 2).unwrap() } else { WindowSpec::square(2, 2).unwrap() };
        let (nh, _) = spec.out_dims(h, h).unwrap();
        layers.push(LayerKind::MaxPool { spec, ordinal: pool_ord });
        pool_ord += 1;
        let _ = pool_ord;
        h = nh;
    }
    if rng.random::<f32>() < 0.5 {
        weights.insert("bn0.scale".into(), Tensor::from_fn(&[c_mid], |_| 0.5 + rng.random::<f32>()));
        weights.insert("bn0.shift".into(), Tensor::from_fn(&[c_mid], |_| randn(rng) * 0.2));
        weights.insert("bn0.mean".into(), Tensor::from_fn(&[c_mid], |_| randn(rng) * 0.2));
        weights.insert("bn0.var".into(), Tensor::from_fn(&[c_mid], |_| 0.5 + rng.random::<f32>()));
        layers.push(LayerKind::BatchNormInference {
            scale: "bn0.scale".into(),
            shift: "bn0.shift".into(),
            mean: "bn0.mean".into(),
            var: "bn0.var".into(),
            epsilon: 1e-5,
        });
    }
    if use_residual {
        layers.push(LayerKind::ResidualBlockBegin { block: 0 });
        init_conv(rng, &mut weights, "res0a", c_mid, c_mid, 3);
        layers.push(LayerKind::Conv {
            weight: "res0a.w".into(),
            bias: Some("res0a.b".into()),
            spec: WindowSpec::square_padded(3, 1, 1).unwrap(),
        });
        if use_relu {
            layers.push(LayerKind::Relu { ordinal: relu_ord });
            relu_ord += 1;
        }
        init_conv(rng, &mut weights, "res0b", c_mid, c_mid, 3);
        layers.push(LayerKind::Conv {
            weight: "res0b.w".into(),
            bias: Some("res0b.b".into()),
            spec: WindowSpec::square_padded(3, 1, 1).unwrap(),
        });
        layers.push(LayerKind::ResidualBlockEnd { block: 0 });
        if use_relu {
            layers.push(LayerKind::Relu { ordinal: relu_ord });
            relu_ord += 1;
        }
    } else {
        init_conv(rng, &mut weights, "conv1", c_mid, c_mid, 3);
        layers.push(LayerKind::Conv {
            weight: "conv1.w".into(),
            bias: Some("conv1.b".into()),
            spec: WindowSpec::square_padded(3, 1, 1).unwrap(),
        });
        if use_relu {
            layers.push(LayerKind::Relu { ordinal: relu_ord });
            relu_ord += 1;
        }
    }
    let _ = relu_ord;
    if h >= 4 && rng.random::<f32>() < 0.5 {
        layers.push(LayerKind::AvgPool { spec: WindowSpec::square(2, 2).unwrap() });
        h /= 2;
    }
    layers.push(LayerKind::Flatten);
    let classes = 3;
    init_linear(rng, &mut weights, "fc", classes, c_mid * h * h);
    layers.push(LayerKind::Linear { weight: "fc.w".into(), bias: Some("fc.b".into()) });

    // resample the input until no kink sits within reach of the FD step
    let arc = Arc::new(weights);
    let mut x = Tensor::zeros(&[1, c_in, 8, 8]);
    let mut probe = ChaCha8Rng::seed_from_u64(rng.random());
    for attempt in 0..500 {
        x = Tensor::from_fn(&[1, c_in, 8, 8], |_| probe.random_range(-1.0f32..1.0));
        let tape = forward(&layers, &arc, &x, None, &mut ChaCha8Rng::seed_from_u64(0)).expect("fixture forward");
        if well_conditioned(&tape, 2e-3, 2e-2) {
            break;
        }
        if attempt == 499 {
            let mut report = String::new();
            for e in &tape.entries {
                match &e.kind {
                    LayerKind::Relu { ordinal } => {
                        let min = e.input.data().iter().map(|v| v.abs()).fold(f32::MAX, f32::min);
                        report.push_str(&format!("relu {ordinal} min|z|={min:e}; "));
                    }
                    LayerKind::MaxPool { spec, .. } => {
                        report.push_str(&format!("pool {spec:?}; "));
                    }
                    _ => {}
                }
            }
            panic!("could not find a well-conditioned input: {report}");
        }
    }
    let weights = Arc::try_unwrap(arc).expect("sole owner");
    (layers, weights, x)
}

use rand::SeedableRng;

/// True when every ReLU input is at least `relu_margin` away from zero and
/// every max-pool window's top two values are at least `pool_margin` apart.
pub fn well_conditioned(tape: &TapeBase<f32>, relu_margin: f32, pool_margin: f32) -> bool {
    for entry in &tape.entries {
        match &entry.kind {
            LayerKind::Relu { .. } => {
                if entry.input.data().iter().any(|v| v.abs() < relu_margin) {
                    return false;
                }
            }
            LayerKind::MaxPool { spec, .. } => {
                let mut ok = true;
                let data = entry.input.data();
                let _ = crate::tensor::for_each_window(&entry.input, spec, |_, window| {
                    if window.len() < 2 {
                        return;
                    }
                    let mut top = f32::NEG_INFINITY;
                    let mut second = f32::NEG_INFINITY;
                    for &p in window {
                        let v = data[p];
                        if v > top {
                            second = top;
                            top = v;
                        } else if v > second {
                            second = v;
                        }
                    }
                    // an exact tie is a stable plateau (clipped zeros); only
                    // near-ties of distinct values are kinks
                    let gap = top - second;
                    if gap > 0.0 && gap < pool_margin {
                        ok = false;
                    }
                });
                if !ok {
                    return false;
                }
            }
            _ => {}
        }
    }
    true
}

/// Central finite difference of the loss w.r.t. every input coordinate,
/// evaluated entirely in f64 forward passes.
pub fn fd_input_grad(
    layers: &[LayerKind],
    weights: &Arc<WeightMap<f64>>,
    x: &Tensor64,
    loss: &LossKind,
    h: f64,
) -> Tensor64 {
    let mut grad = Tensor64::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval_loss(layers, weights, &probe, loss);
        probe.data_mut()[i] = orig - h;
        let minus = eval_loss(layers, weights, &probe, loss);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

fn eval_loss(layers: &[LayerKind], weights: &Arc<WeightMap<f64>>, x: &Tensor64, loss: &LossKind) -> f64 {
    let tape = forward(layers, weights, x, None, &mut ChaCha8Rng::seed_from_u64(0)).expect("oracle forward");
    loss_and_grad(&tape, loss).expect("oracle loss").0
}

pub fn convert_weights(weights: &WeightMap<f32>) -> WeightMap<f64> {
    weights.iter().map(|(k, v)| (k.clone(), v.convert::<f64>())).collect()
}

/// Runs the 64-bit twin of the vanilla backward pass against central finite
/// differences (step 1e-3) and returns the maximum relative error over
/// coordinates with |grad| > 1e-6.
pub fn max_rel_error_vs_fd(layers: &[LayerKind], weights: &WeightMap<f32>, x: &Tensor, label: usize) -> f64 {
    let w64 = Arc::new(convert_weights(weights));
    let x64 = x.convert::<f64>();
    let loss = LossKind::CrossEntropy { label };
    let tape = forward(layers, &w64, &x64, None, &mut ChaCha8Rng::seed_from_u64(0)).expect("forward");
    let (_, dlogits) = loss_and_grad(&tape, &loss).expect("loss");
    let analytic = backward(&tape, &BackwardPolicy::vanilla(), &dlogits, &mut ChaCha8Rng::seed_from_u64(0)).expect("backward");
    let fd = fd_input_grad(layers, &w64, &x64, &loss, 1e-3);
    let mut worst = 0.0f64;
    for (&a, &b) in analytic.data().iter().zip(fd.data()) {
        if a.abs() > 1e-6 {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()));
        }
    }
    worst
}
