//! Gradient-based attacks parameterized by a backward policy: FGSM, I-FGSM,
//! PGD, MI-FGSM and VMI-FGSM, with optional input-diversity and
//! translation-invariant gradient smoothing, in untargeted and targeted
//! (logit-loss) modes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{backward, forward, loss_and_grad, LossKind};
use crate::models::{ModelDef, WeightStore};
use crate::rules::BackwardPolicy;
use crate::tensor::{depthwise_conv_same, gaussian_kernel, resize_and_pad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMethod {
    Fgsm,
    IFgsm,
    Pgd,
    MiFgsm,
    VmiFgsm,
}

impl AttackMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(Self::Fgsm),
            "ifgsm" | "i-fgsm" => Ok(Self::IFgsm),
            "pgd" => Ok(Self::Pgd),
            "mifgsm" | "mi-fgsm" => Ok(Self::MiFgsm),
            "vmifgsm" | "vmi-fgsm" => Ok(Self::VmiFgsm),
            other => Err(Error::Config(format!("unknown attack method '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Fgsm => "fgsm",
            Self::IFgsm => "ifgsm",
            Self::Pgd => "pgd",
            Self::MiFgsm => "mifgsm",
            Self::VmiFgsm => "vmifgsm",
        }
    }
}

/// Random resize-and-pad input diversity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimParams {
    pub prob: f32,
    /// Images are resized into [input, max_canvas) and placed at a random
    /// offset in a max_canvas square before rescaling back.
    pub max_canvas: usize,
}

impl Default for DimParams {
    fn default() -> Self {
        Self { prob: 0.5, max_canvas: 40 }
    }
}

/// Gaussian smoothing of the gradient before the sign step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimParams {
    pub kernel_size: usize,
    pub sigma: f32,
}

impl Default for TimParams {
    fn default() -> Self {
        Self { kernel_size: 7, sigma: 3.0 }
    }
}

/// Forward-side companion to the backward policy: the ghost perturbation
/// range, when that baseline is active.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackPolicy {
    pub backward: BackwardPolicy,
    pub ghost_lambda: Option<f32>,
}

impl AttackPolicy {
    pub fn vanilla() -> Self {
        Self { backward: BackwardPolicy::vanilla(), ghost_lambda: None }
    }

    pub fn from_backward(backward: BackwardPolicy) -> Self {
        Self { backward, ghost_lambda: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// L∞ budget on the [0,1] pixel scale.
    pub epsilon: f32,
    pub alpha: f32,
    pub iters: usize,
    pub mu: f32,
    pub vmi_samples: usize,
    pub vmi_beta: f32,
    pub dim: Option<DimParams>,
    pub tim: Option<TimParams>,
    pub targeted: bool,
    pub loss: LossKind,
    pub seed: u64,
    /// PGD starts from a random point in the ε-ball; I-FGSM never does.
    pub pgd_random_init: bool,
}

impl AttackConfig {
    /// Untargeted defaults: ε = 8/255, T = 10, α = 1.6/255, μ = 1.0, N = 20.
    pub fn untargeted(method: AttackMethod, label: usize) -> Self {
        Self {
            method,
            epsilon: 8.0 / 255.0,
            alpha: 1.6 / 255.0,
            iters: if method == AttackMethod::Fgsm { 1 } else { 10 },
            mu: 1.0,
            vmi_samples: 20,
            vmi_beta: 1.5,
            dim: None,
            tim: None,
            targeted: false,
            loss: LossKind::CrossEntropy { label },
            seed: 0,
            pgd_random_init: true,
        }
    }

    /// Targeted defaults: T = 300, α = 1/255, logit loss.
    pub fn targeted(method: AttackMethod, target: usize) -> Self {
        Self {
            iters: if method == AttackMethod::Fgsm { 1 } else { 300 },
            alpha: 1.0 / 255.0,
            targeted: true,
            loss: LossKind::NegTargetLogit { target },
            ..Self::untargeted(method, target)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha {} must be positive", self.alpha)));
        }
        if self.iters < 1 {
            return Err(Error::Config("iters must be at least 1".into()));
        }
        if self.method == AttackMethod::Fgsm && self.iters > 1 {
            return Err(Error::Config(format!("fgsm is single-step; iters = {} is invalid", self.iters)));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::Config(format!("mu {} must be ≥ 0", self.mu)));
        }
        if self.vmi_samples < 1 {
            return Err(Error::Config("vmi_samples must be ≥ 1".into()));
        }
        if !(self.vmi_beta >= 0.0) {
            return Err(Error::Config(format!("vmi_beta {} must be ≥ 0", self.vmi_beta)));
        }
        if let Some(dim) = &self.dim {
            if !(0.0..=1.0).contains(&dim.prob) {
                return Err(Error::Config(format!("dim prob {} outside [0,1]", dim.prob)));
            }
            if dim.max_canvas <= 32 {
                return Err(Error::Config("dim max_canvas must exceed the 32-pixel input".into()));
            }
        }
        if let Some(tim) = &self.tim {
            if tim.kernel_size % 2 == 0 || tim.kernel_size == 0 {
                return Err(Error::Config(format!("tim kernel size {} must be odd", tim.kernel_size)));
            }
            if !(tim.sigma > 0.0) {
                return Err(Error::Config(format!("tim sigma {} must be positive", tim.sigma)));
            }
        }
        Ok(())
    }
}

/// Result of one attack run.
#[derive(Debug, Clone)]
pub struct AdvResult {
    pub adv: Tensor,
    /// Loss at each iteration's evaluation point (before the step).
    pub loss_trace: Vec<f64>,
    /// Surrogate prediction on the final adversarial image (plain forward).
    pub final_pred: usize,
}

fn dim_transform(x: &Tensor, dim: &DimParams, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let canvas = dim.max_canvas;
    let r = rng.random_range(h..canvas);
    let oy = rng.random_range(0..=(canvas - r));
    let ox = rng.random_range(0..=(canvas - r));
    let padded = resize_and_pad(x, r, r, canvas, canvas, oy, ox)?;
    resize_and_pad(&padded, h, w, h, w, 0, 0)
}

/// Crafts an adversarial example for `x` on the surrogate under the given
/// policy. The whole run is a pure function of its arguments (all
/// randomness flows from `cfg.seed`).
pub fn attack(
    def: &ModelDef,
    store: &WeightStore,
    policy: &AttackPolicy,
    x: &Tensor,
    cfg: &AttackConfig,
) -> Result<AdvResult> {
    cfg.validate()?;
    policy.backward.validate()?;
    def.validate_input(x)?;
    if x.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Param("attack input must lie in [0,1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clean = x.clone();
    let mut adv = x.clone();
    if cfg.method == AttackMethod::Pgd && cfg.pgd_random_init {
        for v in adv.data_mut() {
            let u: f32 = rng.random();
            *v += cfg.epsilon * (2.0 * u - 1.0);
        }
        adv.clamp_ball(&clean, cfg.epsilon)?;
        adv.clamp_in_place(0.0, 1.0);
    }
    let step_size = if cfg.method == AttackMethod::Fgsm { cfg.epsilon } else { cfg.alpha };
    let momentum_based = matches!(cfg.method, AttackMethod::MiFgsm | AttackMethod::VmiFgsm);
    let tim_kernel = cfg.tim.as_ref().map(|t| gaussian_kernel(t.kernel_size, t.sigma)).transpose()?;
    let mut momentum = Tensor::zeros(x.shape());
    let mut variance = Tensor::zeros(x.shape());
    let mut loss_trace = Vec::with_capacity(cfg.iters);

    let grad_at = |point: &Tensor, rng: &mut ChaCha8Rng| -> Result<(f64, Tensor)> {
        let tape = forward(&def.layers, store.tensors(), point, policy.ghost_lambda, rng)?;
        let (loss, dlogits) = loss_and_grad(&tape, &cfg.loss)?;
        let g = backward(&tape, &policy.backward, &dlogits, rng)?;
        Ok((loss, g))
    };

    for _ in 0..cfg.iters {
        let eval_point = match &cfg.dim {
            Some(dim) if rng.random::<f32>() < dim.prob => dim_transform(&adv, dim, &mut rng)?,
            _ => adv.clone(),
        };
        let (loss, g) = grad_at(&eval_point, &mut rng)?;
        loss_trace.push(loss);

        let mut g_hat = if cfg.method == AttackMethod::VmiFgsm { g.add(&variance)? } else { g.clone() };
        if let Some(kernel) = &tim_kernel {
            g_hat = depthwise_conv_same(&g_hat, kernel)?;
        }
        let direction = if momentum_based {
            let l1 = g_hat.l1_norm() as f32;
            momentum = momentum.scalar_mul(cfg.mu);
            if l1 > 0.0 {
                momentum.add_scaled(&g_hat, 1.0 / l1)?;
            }
            momentum.clone()
        } else {
            g_hat
        };
        if cfg.method == AttackMethod::VmiFgsm {
            // mean of (sample gradient − g) over the (β·ε)-ball, used next
            // iteration; the differences keep β = 0 exactly momentum-free
            let mut acc = Tensor::zeros(x.shape());
            let mut sample = adv.clone();
            for _ in 0..cfg.vmi_samples {
                for (s, &a) in sample.data_mut().iter_mut().zip(adv.data()) {
                    let u: f32 = rng.random();
                    *s = a + cfg.vmi_beta * cfg.epsilon * (2.0 * u - 1.0);
                }
                let (_, gs) = grad_at(&sample, &mut rng)?;
                acc.add_scaled(&gs.sub(&g)?, 1.0)?;
            }
            variance = acc.scalar_mul(1.0 / cfg.vmi_samples as f32);
        }
        let sgn = direction.sign();
        let orientation = if cfg.targeted { -step_size } else { step_size };
        adv.add_scaled(&sgn, orientation)?;
        adv.clamp_ball(&clean, cfg.epsilon)?;
        adv.clamp_in_place(0.0, 1.0);
    }
    debug_assert!(adv.linf_distance(&clean)? <= cfg.epsilon as f64 + 1e-6);
    let final_pred = crate::models::predict(def, store, &adv)?;
    Ok(AdvResult { adv, loss_trace, final_pred })
}

/// Loss increase per unit step along the policy's gradient:
/// (J(x + step·g) − J(x)) / step, with J always evaluated by the plain
/// (vanilla-forward) model.
pub fn relevance(
    def: &ModelDef,
    store: &WeightStore,
    policy: &AttackPolicy,
    x: &Tensor,
    loss: &LossKind,
    step: f32,
    seed: u64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Param(format!("relevance step {step} must be positive")));
    }
    def.validate_input(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy_tape = forward(&def.layers, store.tensors(), x, policy.ghost_lambda, &mut rng)?;
    let (_, dlogits) = loss_and_grad(&policy_tape, loss)?;
    let g = backward(&policy_tape, &policy.backward, &dlogits, &mut rng)?;

    let base_tape = crate::models::model_forward(def, store, x)?;
    let (j0, _) = loss_and_grad(&base_tape, loss)?;
    let mut shifted = x.clone();
    shifted.add_scaled(&g, step)?;
    let shifted_tape = crate::models::model_forward(def, store, &shifted)?;
    let (j1, _) = loss_and_grad(&shifted_tape, loss)?;
    if !j0.is_finite() || !j1.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((j1 - j0) / step as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build, init_weights, ModelDef, WeightStore};
    use crate::rules::{PoolRule, ReluRule};
    use crate::testkit;
    use proptest::prelude::*;

    fn tiny_model() -> (ModelDef, WeightStore) {
        let def = build("plaincnn").unwrap();
        let store = init_weights(&def, 42);
        (def, store)
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 3, 32, 32], |_| rng.random_range(0.0f32..1.0))
    }

    #[test]
    fn fgsm_with_multiple_iters_is_config_error() {
        let mut cfg = AttackConfig::untargeted(AttackMethod::Fgsm, 0);
        cfg.iters = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn fully_masked_policy_leaves_image_unchanged() {
        let (def, store) = tiny_model();
        let x = image(1);
        let mut cfg = AttackConfig::untargeted(AttackMethod::IFgsm, 0);
        cfg.iters = 3;
        let policy = AttackPolicy::from_backward(BackwardPolicy::vanilla().with_mask(0, 1.0));
        let res = attack(&def, &store, &policy, &x, &cfg).unwrap();
        assert_eq!(res.adv.data(), x.data());
    }

    #[test]
    fn saturated_pixels_stay_clamped() {
        // two-class linear model: w0 = +1, w1 = −1 per pixel, so the
        // untargeted cross-entropy gradient is strictly positive everywhere
        let mut w = vec![1.0f32 / 3072.0; 3072];
        w.extend(std::iter::repeat(-1.0f32 / 3072.0).take(3072));
        let (def, store) = testkit::linear_probe(Tensor::new(vec![2, 3072], w).unwrap());
        let x = Tensor::filled(&[1, 3, 32, 32], 1.0);
        let cfg = AttackConfig {
            loss: LossKind::CrossEntropy { label: 1 },
            ..AttackConfig::untargeted(AttackMethod::Fgsm, 1)
        };
        let res = attack(&def, &store, &AttackPolicy::vanilla(), &x, &cfg).unwrap();
        assert!(res.adv.data().iter().all(|&v| v == 1.0), "clamp must bind at 1.0");
    }

    #[test]
    fn momentum_recurrence_with_constant_gradient() {
        // −logit[target] of a linear model has a constant gradient, so at
        // μ = 1 the momentum doubles while its sign stays fixed
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::from_fn(&[2, 3072], |_| rng.random_range(-1.0f32..1.0));
        let (def, store) = testkit::linear_probe(w.clone());
        let x = Tensor::filled(&[1, 3, 32, 32], 0.5);
        let mut cfg = AttackConfig::untargeted(AttackMethod::MiFgsm, 0);
        cfg.loss = LossKind::NegTargetLogit { target: 0 };
        cfg.iters = 2;
        cfg.alpha = 0.01;
        cfg.epsilon = 0.5; // wide budget: no projection interferes
        let res = attack(&def, &store, &AttackPolicy::vanilla(), &x, &cfg).unwrap();
        // constant gradient g = −w_0; both steps move by α·sign(g)
        let g_sign: Vec<f32> = w.data()[..3072]
            .iter()
            .map(|&v| {
                if v > 0.0 {
                    -1.0
                } else if v < 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        for (i, (&a, &s)) in res.adv.data().iter().zip(&g_sign).enumerate() {
            let expect = (0.5 + 2.0 * 0.01 * s).clamp(0.0, 1.0);
            assert!((a - expect).abs() < 1e-6, "pixel {i}: {a} vs {expect}");
        }
    }

    #[test]
    fn vmi_with_zero_beta_reduces_to_mi_bitwise() {
        let (def, store) = tiny_model();
        let x = image(2);
        let mut mi = AttackConfig::untargeted(AttackMethod::MiFgsm, 0);
        mi.iters = 3;
        mi.seed = 77;
        let mut vmi = AttackConfig::untargeted(AttackMethod::VmiFgsm, 0);
        vmi.iters = 3;
        vmi.seed = 77;
        vmi.vmi_beta = 0.0;
        vmi.vmi_samples = 4;
        let a = attack(&def, &store, &AttackPolicy::vanilla(), &x, &mi).unwrap();
        let b = attack(&def, &store, &AttackPolicy::vanilla(), &x, &vmi).unwrap();
        assert_eq!(a.adv.data(), b.adv.data());
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let (def, store) = tiny_model();
        let x = image(3);
        let mut cfg = AttackConfig::untargeted(AttackMethod::Pgd, 0);
        cfg.iters = 4;
        cfg.seed = 123;
        let mut policy = AttackPolicy::vanilla();
        policy.backward.relu_rule = ReluRule::Bpa;
        policy.backward.pool_rule = PoolRule::Bpa { temperature: 10.0 };
        let a = attack(&def, &store, &policy, &x, &cfg).unwrap();
        let b = attack(&def, &store, &policy, &x, &cfg).unwrap();
        assert_eq!(a.adv.data(), b.adv.data());
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn dim_and_tim_respect_the_budget() {
        let (def, store) = tiny_model();
        let x = image(4);
        let mut cfg = AttackConfig::untargeted(AttackMethod::MiFgsm, 0);
        cfg.iters = 4;
        cfg.dim = Some(DimParams::default());
        cfg.tim = Some(TimParams::default());
        let res = attack(&def, &store, &AttackPolicy::vanilla(), &x, &cfg).unwrap();
        assert!(res.adv.linf_distance(&x).unwrap() <= cfg.epsilon as f64 + 1e-6);
        assert!(res.adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // smoothing must actually change the perturbation
        cfg.dim = None;
        cfg.tim = None;
        let plain = attack(&def, &store, &AttackPolicy::vanilla(), &x, &cfg).unwrap();
        assert_ne!(plain.adv.data(), res.adv.data());
    }

    #[test]
    fn relevance_of_linear_model_is_squared_gradient_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = Tensor::from_fn(&[2, 3072], |_| rng.random_range(-0.05f32..0.05));
        let norm_sq: f64 = w.data()[..3072].iter().map(|&v| (v as f64) * (v as f64)).sum();
        let (def, store) = testkit::linear_probe(w);
        let x = image(7);
        for step in [1e-2f32, 0.5, 2.0] {
            let r = relevance(
                &def,
                &store,
                &AttackPolicy::vanilla(),
                &x,
                &LossKind::NegTargetLogit { target: 0 },
                step,
                0,
            )
            .unwrap();
            assert!((r - norm_sq).abs() < 1e-4 * norm_sq.max(1.0), "step {step}: {r} vs {norm_sq}");
        }
    }

    #[test]
    fn relevance_approaches_gradient_norm_for_small_steps() {
        let (def, store) = tiny_model();
        let x = image(8);
        let loss = LossKind::CrossEntropy { label: 0 };
        let tape = crate::models::model_forward(&def, &store, &x).unwrap();
        let (_, dl) = loss_and_grad(&tape, &loss).unwrap();
        let g = backward(&tape, &BackwardPolicy::vanilla(), &dl, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let gnorm2: f64 = g.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        let r = relevance(&def, &store, &AttackPolicy::vanilla(), &x, &loss, 1e-3, 0).unwrap();
        assert!(r >= 0.0);
        assert!((r - gnorm2).abs() < 0.05 * gnorm2.max(1e-9), "relevance {r} vs ‖∇J‖² {gnorm2}");
    }

    #[test]
    fn relevance_rejects_nonpositive_step() {
        let (def, store) = tiny_model();
        let x = image(9);
        assert!(matches!(
            relevance(&def, &store, &AttackPolicy::vanilla(), &x, &LossKind::CrossEntropy { label: 0 }, 0.0, 0),
            Err(Error::Param(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]
        #[test]
        fn budget_invariant_under_random_configs(
            seed in 0u64..1000,
            eps_px in 2u32..16,
            iters in 1usize..5,
            method_pick in 0usize..4,
            use_bpa in proptest::bool::ANY,
        ) {
            let (def, store) = tiny_model();
            let x = image(seed);
            let method = [AttackMethod::IFgsm, AttackMethod::Pgd, AttackMethod::MiFgsm, AttackMethod::VmiFgsm][method_pick];
            let mut cfg = AttackConfig::untargeted(method, 0);
            cfg.epsilon = eps_px as f32 / 255.0;
            cfg.alpha = cfg.epsilon / 3.0;
            cfg.iters = iters;
            cfg.seed = seed;
            cfg.vmi_samples = 2;
            let mut policy = AttackPolicy::vanilla();
            if use_bpa {
                policy.backward.relu_rule = ReluRule::Bpa;
                policy.backward.pool_rule = PoolRule::Bpa { temperature: 10.0 };
            }
            let res = attack(&def, &store, &policy, &x, &cfg).unwrap();
            prop_assert!(res.adv.linf_distance(&x).unwrap() <= cfg.epsilon as f64 + 1e-6);
            prop_assert!(res.adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
