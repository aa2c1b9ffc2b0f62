//! Local backward rules for ReLU, max-pooling and residual blocks, plus the
//! masking/recovery instruments used in the truncation experiments.
//!
//! Forward propagation never changes (the ghost forward perturbation is the
//! sole exception and lives in the graph module); these rules only decide how
//! each non-linear layer turns an upstream gradient into a downstream one.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{for_each_window, ArgIndices, Element, TensorBase, WindowSpec};

/// Backward rule applied to ReLU layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReluRule {
    /// Exact subgradient: 1 for z > 0, 0 otherwise (0 at z = 0).
    Vanilla,
    /// All-ones derivative (linear backward).
    LinBp,
    /// Derivative of z·σ(z): σ(z)·(1 + z·(1 − σ(z))). Smooth, non-monotonic,
    /// magnitude-aware.
    Bpa,
    /// Vanilla derivative with each zero independently flipped to one with
    /// the given probability.
    Recover { prob: f32 },
}

/// Backward rule applied to max-pooling layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoolRule {
    /// Route the window's gradient to its argmax position.
    Vanilla,
    /// Distribute the window's gradient as softmax(t · window values), then
    /// sum contributions over overlapping windows.
    Bpa { temperature: f32 },
    /// Vanilla binary derivative with zeros flipped to one with the given
    /// probability, per window position.
    Recover { prob: f32 },
}

/// How a residual block combines skip and branch gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResidualRule {
    /// skip + branch.
    Vanilla,
    /// skip + γ·branch, γ ∈ (0, 1].
    Sgm { gamma: f32 },
    /// skip + c·branch with c chosen so the all-ones ReLU branch gradient is
    /// renormalized against its vanilla-ReLU counterpart (2-norm ratio per
    /// block per backward pass).
    LinBpRescale,
}

/// Bernoulli zero-mask applied to the gradient flowing past one tape layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradMaskSpec {
    /// Tape index of the layer whose input gradient gets masked.
    pub boundary_layer: usize,
    pub prob: f32,
}

/// Full per-layer backward specification.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPolicy {
    pub relu_rule: ReluRule,
    /// The rule applies to ReLU layers with forward ordinal ≥ this index;
    /// earlier ReLUs stay vanilla. Indices past the ReLU count make the rule
    /// a no-op.
    pub relu_start_index: usize,
    pub pool_rule: PoolRule,
    pub residual_rule: ResidualRule,
    pub grad_mask: Option<GradMaskSpec>,
}

impl BackwardPolicy {
    pub fn vanilla() -> Self {
        Self {
            relu_rule: ReluRule::Vanilla,
            relu_start_index: 0,
            pool_rule: PoolRule::Vanilla,
            residual_rule: ResidualRule::Vanilla,
            grad_mask: None,
        }
    }

    /// Checks every parameter against its documented domain.
    pub fn validate(&self) -> Result<()> {
        if let ReluRule::Recover { prob } = self.relu_rule {
            if !(0.0..=1.0).contains(&prob) {
                return Err(Error::Param(format!("ReLU recover prob {prob} outside [0,1]")));
            }
        }
        match self.pool_rule {
            PoolRule::Bpa { temperature } => {
                if !(temperature >= 0.0) {
                    return Err(Error::Param(format!("pool temperature {temperature} must be ≥ 0")));
                }
            }
            PoolRule::Recover { prob } => {
                if !(0.0..=1.0).contains(&prob) {
                    return Err(Error::Param(format!("pool recover prob {prob} outside [0,1]")));
                }
            }
            PoolRule::Vanilla => {}
        }
        if let ResidualRule::Sgm { gamma } = self.residual_rule {
            if !(gamma > 0.0 && gamma <= 1.0) {
                return Err(Error::Param(format!("SGM gamma {gamma} outside (0,1]")));
            }
        }
        if let Some(mask) = &self.grad_mask {
            if !(0.0..=1.0).contains(&mask.prob) {
                return Err(Error::Param(format!("mask prob {} outside [0,1]", mask.prob)));
            }
        }
        Ok(())
    }

    pub fn with_mask(mut self, boundary_layer: usize, prob: f32) -> Self {
        self.grad_mask = Some(GradMaskSpec { boundary_layer, prob });
        self
    }
}

/// σ(z)·(1 + z·(1 − σ(z))) — the smooth ReLU surrogate derivative.
pub fn silu_derivative<E: Element>(z: E) -> E {
    let sig = E::ONE / (E::ONE + (-z).exp());
    sig * (E::ONE + z * (E::ONE - sig))
}

/// Elementwise `upstream · d(rule, z_in)` for a ReLU layer.
pub fn relu_backward<E: Element>(
    rule: ReluRule,
    z_in: &TensorBase<E>,
    upstream: &TensorBase<E>,
    rng: &mut ChaCha8Rng,
) -> Result<TensorBase<E>> {
    if z_in.shape() != upstream.shape() {
        return Err(Error::Shape(format!(
            "relu_backward: input {:?} vs upstream {:?}",
            z_in.shape(),
            upstream.shape()
        )));
    }
    let mut out = upstream.clone();
    match rule {
        ReluRule::Vanilla => {
            for (g, &z) in out.data_mut().iter_mut().zip(z_in.data()) {
                if z <= E::ZERO {
                    *g = E::ZERO;
                }
            }
        }
        ReluRule::LinBp => {}
        ReluRule::Bpa => {
            for (g, &z) in out.data_mut().iter_mut().zip(z_in.data()) {
                *g = *g * silu_derivative(z);
            }
        }
        ReluRule::Recover { prob } => {
            for (g, &z) in out.data_mut().iter_mut().zip(z_in.data()) {
                if z <= E::ZERO && !(rng.random::<f32>() < prob) {
                    *g = E::ZERO;
                }
            }
        }
    }
    Ok(out)
}

/// Routes pooled gradients back to input positions under the given rule.
/// Overlapping windows accumulate; padded positions receive nothing.
pub fn maxpool_backward<E: Element>(
    rule: PoolRule,
    z_in: &TensorBase<E>,
    spec: &WindowSpec,
    arg: &ArgIndices,
    upstream: &TensorBase<E>,
    rng: &mut ChaCha8Rng,
) -> Result<TensorBase<E>> {
    if upstream.shape() != arg.out_shape.as_slice() {
        return Err(Error::Shape(format!(
            "maxpool_backward: upstream {:?} vs pooled {:?}",
            upstream.shape(),
            arg.out_shape
        )));
    }
    match rule {
        PoolRule::Vanilla => {
            let mut grad = TensorBase::zeros(z_in.shape());
            let g = grad.data_mut();
            for (oi, &src) in arg.idx.iter().enumerate() {
                if src >= g.len() {
                    return Err(Error::Shape("arg indices inconsistent with input".into()));
                }
                g[src] = g[src] + upstream.data()[oi];
            }
            Ok(grad)
        }
        PoolRule::Bpa { temperature } => {
            let mut grad = TensorBase::zeros(z_in.shape());
            let g = grad.data_mut();
            let z = z_in.data();
            let up = upstream.data();
            let t = E::from_f64(temperature as f64);
            let mut weights: Vec<E> = Vec::new();
            for_each_window(z_in, spec, |oi, window| {
                // softmax(t·z) over the window, max-subtracted for stability
                let mut zmax = z[window[0]];
                for &p in &window[1..] {
                    if z[p] > zmax {
                        zmax = z[p];
                    }
                }
                weights.clear();
                let mut denom = E::ZERO;
                for &p in window {
                    let e = (t * (z[p] - zmax)).exp();
                    weights.push(e);
                    denom = denom + e;
                }
                for (&p, &e) in window.iter().zip(&weights) {
                    g[p] = g[p] + up[oi] * (e / denom);
                }
            })?;
            Ok(grad)
        }
        PoolRule::Recover { prob } => {
            let mut grad = TensorBase::zeros(z_in.shape());
            let g = grad.data_mut();
            let up = upstream.data();
            for_each_window(z_in, spec, |oi, window| {
                for &p in window {
                    let is_arg = p == arg.idx[oi];
                    if is_arg || rng.random::<f32>() < prob {
                        g[p] = g[p] + up[oi];
                    }
                }
            })?;
            Ok(grad)
        }
    }
}

/// Combines the gradients of a residual block's two paths.
///
/// `vanilla_branch` is required only for [`ResidualRule::LinBpRescale`]; it is
/// the branch gradient recomputed under all-vanilla rules, used to pick the
/// renormalization constant.
pub fn residual_backward<E: Element>(
    rule: ResidualRule,
    branch_grad: &TensorBase<E>,
    skip_grad: &TensorBase<E>,
    vanilla_branch: Option<&TensorBase<E>>,
) -> Result<TensorBase<E>> {
    if branch_grad.shape() != skip_grad.shape() {
        return Err(Error::Shape(format!(
            "residual_backward: branch {:?} vs skip {:?}",
            branch_grad.shape(),
            skip_grad.shape()
        )));
    }
    match rule {
        ResidualRule::Vanilla => skip_grad.add(branch_grad),
        ResidualRule::Sgm { gamma } => {
            let mut out = skip_grad.clone();
            out.add_scaled(branch_grad, E::from_f64(gamma as f64))?;
            Ok(out)
        }
        ResidualRule::LinBpRescale => {
            let reference = vanilla_branch
                .ok_or_else(|| Error::Policy("LinBpRescale needs the vanilla branch gradient".into()))?;
            let modified_total = skip_grad.add(branch_grad)?;
            let vanilla_total = skip_grad.add(reference)?;
            let denom = modified_total.l2_norm();
            let c = if denom > 0.0 { vanilla_total.l2_norm() / denom } else { 1.0 };
            let mut out = skip_grad.clone();
            out.add_scaled(branch_grad, E::from_f64(c))?;
            Ok(out)
        }
    }
}

/// Zeroes each element independently with probability `prob` (kept entries
/// are not rescaled — this simulates truncation, not dropout training).
pub fn grad_mask<E: Element>(grad: &TensorBase<E>, prob: f32, rng: &mut ChaCha8Rng) -> Result<TensorBase<E>> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::Param(format!("mask prob {prob} outside [0,1]")));
    }
    let mut out = grad.clone();
    for v in out.data_mut() {
        if rng.random::<f32>() < prob {
            *v = E::ZERO;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{maxpool_forward, Tensor, Tensor64};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Central finite difference of s(z) = z·σ(z), the independent oracle for
    /// the smooth ReLU derivative.
    fn silu_fd(z: f64, h: f64) -> f64 {
        let s = |z: f64| z / (1.0 + (-z).exp());
        (s(z + h) - s(z - h)) / (2.0 * h)
    }

    #[test]
    fn bpa_relu_value_at_zero_is_half() {
        assert_eq!(silu_derivative(0.0f64), 0.5);
        assert_eq!(silu_derivative(0.0f32), 0.5);
    }

    #[test]
    fn bpa_relu_matches_fd_at_extremes() {
        // frozen from the h=1e-5 central-difference oracle
        let at10 = silu_fd(10.0, 1e-5);
        let atm10 = silu_fd(-10.0, 1e-5);
        assert!((at10 - 1.000408).abs() < 1e-6);
        assert!((atm10 - (-4.0856e-4)).abs() < 1e-7);
        assert!((silu_derivative(10.0f64) - at10).abs() < 1e-9);
        assert!((silu_derivative(-10.0f64) - atm10).abs() < 1e-9);
    }

    #[test]
    fn bpa_relu_matches_fd_on_grid() {
        let mut worst = 0.0f64;
        let mut z = -10.0f64;
        while z <= 10.0 {
            let d = silu_derivative(z);
            let fd = silu_fd(z, 1e-5);
            worst = worst.max((d - fd).abs());
            // analytic range of the surrogate derivative
            assert!(d.abs() <= 1.1, "containment violated at z={z}: {d}");
            z += 0.01;
        }
        assert!(worst < 1e-6, "max |analytic - fd| = {worst}");
    }

    #[test]
    fn relu_rules_elementwise_semantics() {
        let z = Tensor::new(vec![4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let up = Tensor::filled(&[4], 1.0);
        let vanilla = relu_backward(ReluRule::Vanilla, &z, &up, &mut rng(0)).unwrap();
        assert_eq!(vanilla.data(), &[0.0, 0.0, 1.0, 1.0]);
        let linbp = relu_backward(ReluRule::LinBp, &z, &up, &mut rng(0)).unwrap();
        assert_eq!(linbp.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn recover_degenerate_probs_match_vanilla_and_linbp() {
        let mut r = rng(11);
        let z = Tensor::from_fn(&[64], |_| r.random_range(-1.0f32..1.0));
        let up = Tensor::from_fn(&[64], |_| r.random_range(-1.0f32..1.0));
        let v = relu_backward(ReluRule::Vanilla, &z, &up, &mut rng(1)).unwrap();
        let r0 = relu_backward(ReluRule::Recover { prob: 0.0 }, &z, &up, &mut rng(2)).unwrap();
        assert_eq!(v.data(), r0.data());
        let l = relu_backward(ReluRule::LinBp, &z, &up, &mut rng(3)).unwrap();
        let r1 = relu_backward(ReluRule::Recover { prob: 1.0 }, &z, &up, &mut rng(4)).unwrap();
        assert_eq!(l.data(), r1.data());
    }

    #[test]
    fn recover_is_seed_deterministic_with_expected_flip_rate() {
        let z = Tensor::filled(&[10_000], -1.0);
        let up = Tensor::filled(&[10_000], 1.0);
        for prob in [0.25f32, 0.5, 0.8] {
            let a = relu_backward(ReluRule::Recover { prob }, &z, &up, &mut rng(42)).unwrap();
            let b = relu_backward(ReluRule::Recover { prob }, &z, &up, &mut rng(42)).unwrap();
            assert_eq!(a.data(), b.data());
            let flipped = a.data().iter().filter(|&&v| v == 1.0).count() as f32 / 10_000.0;
            assert!((flipped - prob).abs() < 0.02, "flip rate {flipped} vs prob {prob}");
        }
    }

    #[test]
    fn pool_bpa_uniform_for_equal_values_and_t_zero() {
        let z = Tensor::filled(&[1, 1, 4, 4], 0.7);
        let spec = WindowSpec::square(2, 2).unwrap();
        let (_, arg) = maxpool_forward(&z, &spec).unwrap();
        let up = Tensor::filled(&[1, 1, 2, 2], 1.0);
        for t in [0.0f32, 3.0, 50.0] {
            let g = maxpool_backward(PoolRule::Bpa { temperature: t }, &z, &spec, &arg, &up, &mut rng(0)).unwrap();
            assert!(g.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
        }
        // t = 0 is uniform regardless of values
        let mut r = rng(9);
        let z = Tensor::from_fn(&[1, 1, 4, 4], |_| r.random_range(-2.0f32..2.0));
        let (_, arg) = maxpool_forward(&z, &spec).unwrap();
        let g = maxpool_backward(PoolRule::Bpa { temperature: 0.0 }, &z, &spec, &arg, &up, &mut rng(0)).unwrap();
        assert!(g.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn pool_bpa_window_weights_from_direct_softmax() {
        // top-left 2×2 window (0.1, −0.2, 0.0, −0.5) at t = 10: weights from
        // direct e^{10z}/Σ evaluation.
        let z = Tensor::new(
            vec![1, 1, 4, 4],
            vec![0.1, -0.2, 1.9, 1.4, 0.0, -0.5, 2.3, 0.7, -0.4, 0.9, 1.0, -2.0, 0.7, 0.6, 0.5, 1.7],
        )
        .unwrap();
        let spec = WindowSpec::square(2, 2).unwrap();
        let (_, arg) = maxpool_forward(&z, &spec).unwrap();
        let mut up = Tensor::zeros(&[1, 1, 2, 2]);
        up.data_mut()[0] = 1.0;
        let g = maxpool_backward(PoolRule::Bpa { temperature: 10.0 }, &z, &spec, &arg, &up, &mut rng(0)).unwrap();
        let expect = {
            let vals = [0.1f64, -0.2, 0.0, -0.5];
            let denom: f64 = vals.iter().map(|v| (10.0 * v).exp()).sum();
            vals.map(|v| (10.0 * v).exp() / denom)
        };
        // frozen from the direct e^{10z}/Σ oracle
        assert!((expect[0] - 0.70415332).abs() < 1e-7);
        assert!((expect[1] - 0.03505773).abs() < 1e-7);
        assert!((expect[2] - 0.25904353).abs() < 1e-7);
        assert!((expect[3] - 0.00174542).abs() < 1e-7);
        for (pos, e) in [(0usize, expect[0]), (1, expect[1]), (4, expect[2]), (5, expect[3])] {
            assert!((g.data()[pos] as f64 - e).abs() < 1e-6);
        }
        // no gradient leaked outside the first window
        assert!(g.data().iter().enumerate().all(|(i, &v)| [0, 1, 4, 5].contains(&i) || v == 0.0));
    }

    #[test]
    fn pool_bpa_weights_sum_to_one_per_window() {
        let mut r = rng(21);
        let z = Tensor::from_fn(&[1, 2, 7, 7], |_| r.random_range(-3.0f32..3.0));
        for (k, s) in [(2usize, 2usize), (3, 2), (3, 1)] {
            let spec = WindowSpec::square(k, s).unwrap();
            let (pooled, arg) = maxpool_forward(&z, &spec).unwrap();
            let windows = pooled.len();
            let up = Tensor::filled(pooled.shape(), 1.0);
            for t in [0.0f32, 1.0, 10.0, 100.0] {
                let g = maxpool_backward(PoolRule::Bpa { temperature: t }, &z, &spec, &arg, &up, &mut rng(0)).unwrap();
                // each window distributes total mass 1
                assert!(
                    (g.sum() - windows as f64).abs() < 1e-4 * windows as f64,
                    "t={t} k={k} s={s}: mass {} vs {windows}",
                    g.sum()
                );
            }
        }
    }

    #[test]
    fn pool_bpa_high_temperature_concentrates_on_argmax() {
        let mut r = rng(31);
        // unique maxima separated by at least 0.1
        let z = Tensor::from_fn(&[1, 1, 6, 6], |i| (i as f32 * 0.17) % 2.3 - 1.0 + r.random_range(0.0..0.01));
        let spec = WindowSpec::square(2, 2).unwrap();
        let (pooled, arg) = maxpool_forward(&z, &spec).unwrap();
        let up = Tensor::filled(pooled.shape(), 1.0);
        let g = maxpool_backward(PoolRule::Bpa { temperature: 1000.0 }, &z, &spec, &arg, &up, &mut rng(0)).unwrap();
        for &src in &arg.idx {
            assert!(g.data()[src] >= 0.999, "mass at argmax only {}", g.data()[src]);
        }
    }

    #[test]
    fn pool_bpa_fold_matches_bruteforce_on_overlapping_windows() {
        let mut r = rng(41);
        for trial in 0..10u64 {
            let z = Tensor::from_fn(&[1, 1, 7, 7], |_| r.random_range(-2.0f32..2.0));
            let spec = WindowSpec::square(3, 2).unwrap();
            let (pooled, arg) = maxpool_forward(&z, &spec).unwrap();
            let up = Tensor::from_fn(pooled.shape(), |i| ((i as f32) + trial as f32).sin());
            let t = 7.0f32;
            let fast = maxpool_backward(PoolRule::Bpa { temperature: t }, &z, &spec, &arg, &up, &mut rng(0)).unwrap();

            // brute-force per-window softmax accumulation in f64
            let (oh, ow) = spec.out_dims(7, 7).unwrap();
            let mut slow = vec![0.0f64; 49];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut idxs = Vec::new();
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (y, x) = (oy * 2 + ky, ox * 2 + kx);
                            if y < 7 && x < 7 {
                                idxs.push(y * 7 + x);
                            }
                        }
                    }
                    let denom: f64 = idxs.iter().map(|&p| ((t as f64) * z.data()[p] as f64).exp()).sum();
                    for &p in &idxs {
                        slow[p] += up.data()[oy * ow + ox] as f64 * ((t as f64) * z.data()[p] as f64).exp() / denom;
                    }
                }
            }
            for (a, &b) in fast.data().iter().zip(slow.iter().map(|v| v).collect::<Vec<_>>()) {
                assert!((*a as f64 - b).abs() < 1e-5, "fold mismatch: {a} vs {b}");
            }
        }
    }

    #[test]
    fn pool_vanilla_accumulates_overlaps_at_shared_argmax() {
        // 3×3 input with a dominant center: every 2×2/stride-1 window picks it
        let z = Tensor::new(vec![1, 1, 3, 3], vec![0.0, 0.1, 0.0, 0.2, 9.0, 0.3, 0.0, 0.4, 0.0]).unwrap();
        let spec = WindowSpec::square(2, 1).unwrap();
        let (_, arg) = maxpool_forward(&z, &spec).unwrap();
        let up = Tensor::filled(&[1, 1, 2, 2], 1.0);
        let g = maxpool_backward(PoolRule::Vanilla, &z, &spec, &arg, &up, &mut rng(0)).unwrap();
        assert_eq!(g.data()[4], 4.0);
        assert_eq!(g.sum(), 4.0);
    }

    #[test]
    fn residual_rules_combine_as_documented() {
        let branch = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let skip = Tensor::new(vec![4], vec![0.5, 0.5, -1.0, 2.0]).unwrap();
        let vanilla = residual_backward(ResidualRule::Vanilla, &branch, &skip, None).unwrap();
        assert_eq!(vanilla.data(), &[1.5, -1.5, -0.5, 5.0]);

        let sgm1 = residual_backward(ResidualRule::Sgm { gamma: 1.0 }, &branch, &skip, None).unwrap();
        assert_eq!(sgm1.data(), vanilla.data());

        // γ = 0.5 with branch == skip gives 1.5·g
        let g = Tensor::new(vec![3], vec![2.0, -4.0, 6.0]).unwrap();
        let half = residual_backward(ResidualRule::Sgm { gamma: 0.5 }, &g, &g, None).unwrap();
        assert_eq!(half.data(), &[3.0, -6.0, 9.0]);

        // zero branch: every rule returns the skip gradient
        let zero = Tensor::zeros(&[4]);
        for rule in [ResidualRule::Vanilla, ResidualRule::Sgm { gamma: 0.3 }, ResidualRule::LinBpRescale] {
            let out = residual_backward(rule, &zero, &skip, Some(&zero)).unwrap();
            assert_eq!(out.data(), skip.data());
        }
    }

    #[test]
    fn linbp_rescale_matches_norm_ratio() {
        let branch = Tensor64::new(vec![2], vec![3.0, 4.0]).unwrap();
        let vanilla_branch = Tensor64::new(vec![2], vec![0.3, 0.4]).unwrap();
        let skip = Tensor64::zeros(&[2]);
        let out = residual_backward(ResidualRule::LinBpRescale, &branch, &skip, Some(&vanilla_branch)).unwrap();
        // c = ‖skip+vanilla‖/‖skip+branch‖ = 0.5/5 = 0.1
        assert!((out.data()[0] - 0.3).abs() < 1e-12);
        assert!((out.data()[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn grad_mask_semantics() {
        let mut r = rng(51);
        let g = Tensor::from_fn(&[1000], |_| r.random_range(-1.0f32..1.0));
        let unchanged = grad_mask(&g, 0.0, &mut rng(1)).unwrap();
        assert_eq!(unchanged.data(), g.data());
        let zeroed = grad_mask(&g, 1.0, &mut rng(2)).unwrap();
        assert!(zeroed.data().iter().all(|&v| v == 0.0));
        let a = grad_mask(&g, 0.4, &mut rng(3)).unwrap();
        let b = grad_mask(&g, 0.4, &mut rng(3)).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(matches!(grad_mask(&g, 1.5, &mut rng(4)), Err(Error::Param(_))));
    }

    #[test]
    fn policy_validation_rejects_bad_params() {
        let mut p = BackwardPolicy::vanilla();
        p.relu_rule = ReluRule::Recover { prob: 1.2 };
        assert!(p.validate().is_err());
        let mut p = BackwardPolicy::vanilla();
        p.residual_rule = ResidualRule::Sgm { gamma: 0.0 };
        assert!(p.validate().is_err());
        let mut p = BackwardPolicy::vanilla();
        p.pool_rule = PoolRule::Bpa { temperature: -1.0 };
        assert!(p.validate().is_err());
        assert!(BackwardPolicy::vanilla().validate().is_ok());
    }
}
