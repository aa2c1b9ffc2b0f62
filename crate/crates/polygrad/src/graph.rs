//! Tape-based forward execution and reverse replay.
//!
//! A forward pass records every layer with its saved input/output on a
//! [`TapeBase`]; replaying the tape in reverse dispatches each non-linear
//! layer's local backward through a [`BackwardPolicy`]. Forward stays
//! standard for every policy; only the ghost perturbation (a forward-side
//! baseline) changes activations, and it does so explicitly via
//! `ghost_lambda`.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rules::{
    grad_mask, maxpool_backward, relu_backward, residual_backward, BackwardPolicy, ReluRule, ResidualRule,
};
use crate::tensor::{
    avgpool_backward, avgpool_forward, conv2d, conv2d_backward_input, conv2d_backward_params, maxpool_forward,
    ArgIndices, Element, TensorBase, WindowSpec,
};

/// One step of a layered network. Weight-bearing layers reference tensors in
/// the weight map by id; ReLU/MaxPool carry their global forward ordinal so
/// policies can scope rules by position.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv { weight: String, bias: Option<String>, spec: WindowSpec },
    Linear { weight: String, bias: Option<String> },
    Relu { ordinal: usize },
    MaxPool { spec: WindowSpec, ordinal: usize },
    AvgPool { spec: WindowSpec },
    BatchNormInference { scale: String, shift: String, mean: String, var: String, epsilon: f32 },
    ResidualBlockBegin { block: usize },
    ResidualBlockEnd { block: usize },
    Flatten,
}

/// Loss at the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy { label: usize },
    /// −logit[target]; gradient descent on it raises the target logit.
    NegTargetLogit { target: usize },
}

impl LossKind {
    pub fn label(&self) -> usize {
        match *self {
            LossKind::CrossEntropy { label } => label,
            LossKind::NegTargetLogit { target } => target,
        }
    }
}

pub type WeightMap<E> = HashMap<String, TensorBase<E>>;

#[derive(Debug, Clone)]
pub struct TapeEntry<E: Element> {
    pub kind: LayerKind,
    pub input: TensorBase<E>,
    pub output: TensorBase<E>,
    /// Argmax record for max-pool layers.
    pub arg: Option<ArgIndices>,
    /// Ghost multiplicative factor applied to this entry's output.
    pub ghost_factor: Option<E>,
}

/// Ordered record of one forward pass; replayable in reverse under any
/// policy. Holds a shared handle to the weights it was computed with so the
/// backward pass is self-contained.
#[derive(Debug, Clone)]
pub struct TapeBase<E: Element> {
    pub entries: Vec<TapeEntry<E>>,
    pub logits: TensorBase<E>,
    weights: Arc<WeightMap<E>>,
    relu_count: usize,
    /// end index → begin index for every residual block
    block_spans: HashMap<usize, usize>,
}

pub type Tape = TapeBase<f32>;

impl<E: Element> TapeBase<E> {
    pub fn relu_count(&self) -> usize {
        self.relu_count
    }

    pub fn num_classes(&self) -> usize {
        *self.logits.shape().last().unwrap_or(&0)
    }
}

fn get_weight<'a, E: Element>(weights: &'a WeightMap<E>, id: &str) -> Result<&'a TensorBase<E>> {
    weights.get(id).ok_or_else(|| Error::MissingWeight(id.to_string()))
}

fn linear_forward<E: Element>(
    x: &TensorBase<E>,
    weight: &TensorBase<E>,
    bias: Option<&TensorBase<E>>,
) -> Result<TensorBase<E>> {
    let (n, i) = match x.shape() {
        &[n, i] => (n, i),
        other => return Err(Error::Shape(format!("linear expects rank-2 input, got {other:?}"))),
    };
    let (o, wi) = match weight.shape() {
        &[o, wi] => (o, wi),
        other => return Err(Error::Shape(format!("linear weight must be rank 2, got {other:?}"))),
    };
    if wi != i {
        return Err(Error::Shape(format!("linear: input width {i} vs weight width {wi}")));
    }
    let mut out = vec![E::ZERO; n * o];
    // x · W^T with the transpose as a strided view
    E::gemm_strided(n, i, o, E::ONE, x.data(), i as isize, 1, weight.data(), 1, i as isize, E::ZERO, &mut out);
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::Shape(format!("linear bias shape {:?}, expected [{o}]", b.shape())));
        }
        for r in 0..n {
            for c in 0..o {
                out[r * o + c] = out[r * o + c] + b.data()[c];
            }
        }
    }
    TensorBase::new(vec![n, o], out)
}

fn batchnorm_forward<E: Element>(
    x: &TensorBase<E>,
    scale: &TensorBase<E>,
    shift: &TensorBase<E>,
    mean: &TensorBase<E>,
    var: &TensorBase<E>,
    epsilon: f32,
) -> Result<TensorBase<E>> {
    let (n, c, h, w) = x.dims4()?;
    for (name, t) in [("scale", scale), ("shift", shift), ("mean", mean), ("var", var)] {
        if t.shape() != [c] {
            return Err(Error::Shape(format!("batchnorm {name} shape {:?}, expected [{c}]", t.shape())));
        }
    }
    let eps = E::from_f64(epsilon as f64);
    let mut out = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            let inv = scale.data()[ci] / (var.data()[ci] + eps).sqrt();
            let m = mean.data()[ci];
            let b = shift.data()[ci];
            for v in &mut out.data_mut()[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w] {
                *v = (*v - m) * inv + b;
            }
        }
    }
    Ok(out)
}

/// Applies one layer to an activation, returning the output and, for
/// max-pool, the argmax record. Residual markers are handled by the caller.
fn apply_layer<E: Element>(
    kind: &LayerKind,
    x: &TensorBase<E>,
    weights: &WeightMap<E>,
) -> Result<(TensorBase<E>, Option<ArgIndices>)> {
    match kind {
        LayerKind::Conv { weight, bias, spec } => {
            let w = get_weight(weights, weight)?;
            let b = bias.as_ref().map(|id| get_weight(weights, id)).transpose()?;
            Ok((conv2d(x, w, b, spec)?, None))
        }
        LayerKind::Linear { weight, bias } => {
            let w = get_weight(weights, weight)?;
            let b = bias.as_ref().map(|id| get_weight(weights, id)).transpose()?;
            Ok((linear_forward(x, w, b)?, None))
        }
        LayerKind::Relu { .. } => {
            let mut out = x.clone();
            for v in out.data_mut() {
                if *v < E::ZERO {
                    *v = E::ZERO;
                }
            }
            Ok((out, None))
        }
        LayerKind::MaxPool { spec, .. } => {
            let (out, arg) = maxpool_forward(x, spec)?;
            Ok((out, Some(arg)))
        }
        LayerKind::AvgPool { spec } => Ok((avgpool_forward(x, spec)?, None)),
        LayerKind::BatchNormInference { scale, shift, mean, var, epsilon } => {
            let s = get_weight(weights, scale)?;
            let b = get_weight(weights, shift)?;
            let m = get_weight(weights, mean)?;
            let v = get_weight(weights, var)?;
            Ok((batchnorm_forward(x, s, b, m, v, *epsilon)?, None))
        }
        LayerKind::Flatten => {
            let (n, c, h, w) = x.dims4()?;
            Ok((x.clone().reshape(vec![n, c * h * w])?, None))
        }
        LayerKind::ResidualBlockBegin { .. } | LayerKind::ResidualBlockEnd { .. } => {
            unreachable!("residual markers handled by forward")
        }
    }
}

/// Standard forward pass over a layer list. With `ghost_lambda` set, each
/// residual branch output (or each max-pool output when the model has no
/// residual blocks) is scaled by an independent factor from
/// U[1−λ, 1+λ] before use; otherwise activations are untouched.
pub fn forward<E: Element>(
    layers: &[LayerKind],
    weights: &Arc<WeightMap<E>>,
    x: &TensorBase<E>,
    ghost_lambda: Option<f32>,
    rng: &mut ChaCha8Rng,
) -> Result<TapeBase<E>> {
    let has_residual = layers.iter().any(|l| matches!(l, LayerKind::ResidualBlockBegin { .. }));
    let mut entries: Vec<TapeEntry<E>> = Vec::with_capacity(layers.len());
    let mut skip_stack: Vec<(usize, TensorBase<E>)> = Vec::new();
    let mut block_spans = HashMap::new();
    let mut begin_stack: Vec<usize> = Vec::new();
    let mut relu_count = 0usize;
    let mut cur = x.clone();

    let draw_factor = |rng: &mut ChaCha8Rng| -> E {
        let lambda = ghost_lambda.unwrap_or(0.0);
        let u: f32 = rng.random();
        E::from_f64((1.0 + lambda * (2.0 * u - 1.0)) as f64)
    };

    for (li, kind) in layers.iter().enumerate() {
        match kind {
            LayerKind::ResidualBlockBegin { block } => {
                skip_stack.push((*block, cur.clone()));
                begin_stack.push(li);
                entries.push(TapeEntry { kind: kind.clone(), input: cur.clone(), output: cur.clone(), arg: None, ghost_factor: None });
            }
            LayerKind::ResidualBlockEnd { block } => {
                let (open_block, skip) = skip_stack
                    .pop()
                    .ok_or_else(|| Error::Param(format!("residual end {block} without begin")))?;
                if open_block != *block {
                    return Err(Error::Param(format!("residual end {block} closes block {open_block}")));
                }
                let begin_idx = begin_stack.pop().expect("begin stack tracks skip stack");
                block_spans.insert(li, begin_idx);
                let branch = cur;
                let factor = if ghost_lambda.is_some() && has_residual { Some(draw_factor(rng)) } else { None };
                let scaled = match factor {
                    Some(f) => branch.scalar_mul(f),
                    None => branch.clone(),
                };
                let out = skip.add(&scaled).map_err(|_| {
                    Error::Shape(format!("residual block {block}: branch output shape differs from skip input"))
                })?;
                entries.push(TapeEntry { kind: kind.clone(), input: branch, output: out.clone(), arg: None, ghost_factor: factor });
                cur = out;
            }
            _ => {
                if let LayerKind::Relu { ordinal } = kind {
                    if *ordinal != relu_count {
                        return Err(Error::Param(format!(
                            "ReLU ordinal {ordinal} out of order (expected {relu_count})"
                        )));
                    }
                    relu_count += 1;
                }
                let (mut out, arg) = apply_layer(kind, &cur, weights)?;
                let mut factor = None;
                if ghost_lambda.is_some() && !has_residual {
                    if matches!(kind, LayerKind::MaxPool { .. }) {
                        let f = draw_factor(rng);
                        out = out.scalar_mul(f);
                        factor = Some(f);
                    }
                }
                entries.push(TapeEntry { kind: kind.clone(), input: cur, output: out.clone(), arg, ghost_factor: factor });
                cur = out;
            }
        }
    }
    if !skip_stack.is_empty() {
        return Err(Error::Param("unclosed residual block".into()));
    }
    Ok(TapeBase { entries, logits: cur, weights: Arc::clone(weights), relu_count, block_spans })
}

/// Plain forward pass producing logits only — no tape entries, no ghost
/// perturbation. The fast path for victim evaluation and eval-set filtering.
pub fn forward_inference<E: Element>(
    layers: &[LayerKind],
    weights: &WeightMap<E>,
    x: &TensorBase<E>,
) -> Result<TensorBase<E>> {
    let mut skip_stack: Vec<TensorBase<E>> = Vec::new();
    let mut cur = x.clone();
    for kind in layers {
        match kind {
            LayerKind::ResidualBlockBegin { .. } => skip_stack.push(cur.clone()),
            LayerKind::ResidualBlockEnd { block } => {
                let skip = skip_stack
                    .pop()
                    .ok_or_else(|| Error::Param(format!("residual end {block} without begin")))?;
                cur = skip.add(&cur)?;
            }
            LayerKind::Relu { .. } => {
                for v in cur.data_mut() {
                    if *v < E::ZERO {
                        *v = E::ZERO;
                    }
                }
            }
            LayerKind::Flatten => {
                let (n, c, h, w) = cur.dims4()?;
                cur = cur.reshape(vec![n, c * h * w])?;
            }
            other => cur = apply_layer(other, &cur, weights)?.0,
        }
    }
    Ok(cur)
}

/// Loss value and its gradient at the logits. Logits must be rank 2 with a
/// single row.
pub fn loss_and_grad<E: Element>(tape: &TapeBase<E>, loss: &LossKind) -> Result<(f64, TensorBase<E>)> {
    let (rows, classes) = match tape.logits.shape() {
        &[r, c] => (r, c),
        other => return Err(Error::Shape(format!("logits must be rank 2, got {other:?}"))),
    };
    if rows != 1 {
        return Err(Error::Shape(format!("loss expects a single example, got {rows} rows")));
    }
    let l = tape.logits.data();
    match *loss {
        LossKind::CrossEntropy { label } => {
            if label >= classes {
                return Err(Error::LabelRange { label, classes });
            }
            let m = l.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v.to_f64()));
            let denom: f64 = l.iter().map(|&v| (v.to_f64() - m).exp()).sum();
            let value = -(l[label].to_f64() - m - denom.ln());
            let mut grad = TensorBase::zeros(tape.logits.shape());
            for (i, g) in grad.data_mut().iter_mut().enumerate() {
                let p = (l[i].to_f64() - m).exp() / denom;
                *g = E::from_f64(p - if i == label { 1.0 } else { 0.0 });
            }
            Ok((value, grad))
        }
        LossKind::NegTargetLogit { target } => {
            if target >= classes {
                return Err(Error::LabelRange { label: target, classes });
            }
            let mut grad = TensorBase::zeros(tape.logits.shape());
            grad.data_mut()[target] = -E::ONE;
            Ok((-l[target].to_f64(), grad))
        }
    }
}

/// Per-weight gradient accumulator used by the trainer.
#[derive(Debug, Default, Clone)]
pub struct GradStore<E: Element> {
    pub grads: WeightMap<E>,
}

impl<E: Element> GradStore<E> {
    pub fn new() -> Self {
        Self { grads: HashMap::new() }
    }

    fn accumulate(&mut self, id: &str, delta: TensorBase<E>) -> Result<()> {
        match self.grads.get_mut(id) {
            Some(t) => t.add_scaled(&delta, E::ONE),
            None => {
                self.grads.insert(id.to_string(), delta);
                Ok(())
            }
        }
    }

    /// Merges another store elementwise (fixed insertion order is the
    /// caller's concern; accumulation itself is order-stable per id).
    pub fn merge(&mut self, other: GradStore<E>) -> Result<()> {
        let mut ids: Vec<_> = other.grads.into_iter().collect();
        ids.sort_by(|a, b| a.0.cmp(&b.0));
        for (id, g) in ids {
            self.accumulate(&id, g)?;
        }
        Ok(())
    }
}

struct BackwardRun<'a, E: Element> {
    tape: &'a TapeBase<E>,
    params: Option<&'a mut GradStore<E>>,
    trace: Option<&'a mut Vec<(usize, TensorBase<E>)>>,
}

impl<'a, E: Element> BackwardRun<'a, E> {
    /// Walks entries[lo..hi] in reverse, transforming the gradient at the
    /// segment's output into the gradient at its input.
    fn segment(
        &mut self,
        lo: usize,
        hi: usize,
        mut grad: TensorBase<E>,
        policy: &BackwardPolicy,
        rng: &mut ChaCha8Rng,
        top_level: bool,
    ) -> Result<TensorBase<E>> {
        let weights = &self.tape.weights;
        let mut i = hi;
        while i > lo {
            i -= 1;
            let entry = &self.tape.entries[i];
            match &entry.kind {
                LayerKind::Conv { weight, bias, spec } => {
                    let w = get_weight(weights, weight)?;
                    if self.params.is_some() {
                        let (dw, db) = conv2d_backward_params(&entry.input, w.shape(), &grad, spec)?;
                        let store = self.params.as_deref_mut().expect("checked");
                        store.accumulate(weight, dw)?;
                        if let Some(bid) = bias {
                            store.accumulate(bid, db)?;
                        }
                    }
                    grad = conv2d_backward_input(entry.input.shape(), w, &grad, spec)?;
                }
                LayerKind::Linear { weight, bias } => {
                    let w = get_weight(weights, weight)?;
                    let (n, o) = (grad.shape()[0], grad.shape()[1]);
                    let inw = w.shape()[1];
                    if self.params.is_some() {
                        // dW = dY^T · X with dY^T as a strided view
                        let mut dw = vec![E::ZERO; o * inw];
                        E::gemm_strided(
                            o,
                            n,
                            inw,
                            E::ONE,
                            grad.data(),
                            1,
                            o as isize,
                            entry.input.data(),
                            inw as isize,
                            1,
                            E::ZERO,
                            &mut dw,
                        );
                        let store = self.params.as_deref_mut().expect("checked");
                        store.accumulate(weight, TensorBase::new(vec![o, inw], dw)?)?;
                        if let Some(bid) = bias {
                            let mut db = TensorBase::zeros(&[o]);
                            for r in 0..n {
                                for c in 0..o {
                                    db.data_mut()[c] = db.data_mut()[c] + grad.data()[r * o + c];
                                }
                            }
                            store.accumulate(bid, db)?;
                        }
                    }
                    let mut dx = vec![E::ZERO; n * inw];
                    E::gemm(n, o, inw, E::ONE, grad.data(), w.data(), E::ZERO, &mut dx);
                    grad = TensorBase::new(vec![n, inw], dx)?;
                }
                LayerKind::Relu { ordinal } => {
                    let rule = if *ordinal >= policy.relu_start_index { policy.relu_rule } else { ReluRule::Vanilla };
                    grad = relu_backward(rule, &entry.input, &grad, rng)?;
                }
                LayerKind::MaxPool { spec, .. } => {
                    if let Some(f) = entry.ghost_factor {
                        grad = grad.scalar_mul(f);
                    }
                    let arg = entry.arg.as_ref().expect("max-pool entries carry arg indices");
                    grad = maxpool_backward(policy.pool_rule, &entry.input, spec, arg, &grad, rng)?;
                }
                LayerKind::AvgPool { spec } => {
                    grad = avgpool_backward(&entry.input, spec, &grad)?;
                }
                LayerKind::BatchNormInference { scale, var, epsilon, .. } => {
                    // frozen statistics: exact affine backward
                    let s = get_weight(weights, scale)?;
                    let v = get_weight(weights, var)?;
                    let (n, c, h, w) = entry.input.dims4()?;
                    let eps = E::from_f64(*epsilon as f64);
                    for ni in 0..n {
                        for ci in 0..c {
                            let inv = s.data()[ci] / (v.data()[ci] + eps).sqrt();
                            for g in &mut grad.data_mut()[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w] {
                                *g = *g * inv;
                            }
                        }
                    }
                }
                LayerKind::Flatten => {
                    grad = grad.reshape(entry.input.shape().to_vec())?;
                }
                LayerKind::ResidualBlockEnd { .. } => {
                    let begin = *self
                        .tape
                        .block_spans
                        .get(&i)
                        .ok_or_else(|| Error::Policy(format!("no matching begin for residual end at {i}")))?;
                    let skip_grad = grad.clone();
                    let branch_up = match entry.ghost_factor {
                        Some(f) => grad.scalar_mul(f),
                        None => grad.clone(),
                    };
                    let branch_grad = self.segment(begin + 1, i, branch_up.clone(), policy, rng, false)?;
                    let vanilla_branch = if policy.residual_rule == ResidualRule::LinBpRescale {
                        let vanilla = BackwardPolicy::vanilla();
                        Some(self.segment(begin + 1, i, branch_up, &vanilla, rng, false)?)
                    } else {
                        None
                    };
                    grad = residual_backward(policy.residual_rule, &branch_grad, &skip_grad, vanilla_branch.as_ref())?;
                    i = begin; // Begin itself contributes identity
                }
                LayerKind::ResidualBlockBegin { block } => {
                    return Err(Error::Policy(format!("unbalanced residual begin for block {block}")));
                }
            }
            if top_level {
                if let Some(mask) = &policy.grad_mask {
                    if mask.boundary_layer == i {
                        grad = grad_mask(&grad, mask.prob, rng)?;
                    }
                }
                if let Some(trace) = self.trace.as_deref_mut() {
                    trace.push((i, grad.clone()));
                }
            }
        }
        Ok(grad)
    }
}

fn run_backward<E: Element>(
    tape: &TapeBase<E>,
    policy: &BackwardPolicy,
    dlogits: &TensorBase<E>,
    rng: &mut ChaCha8Rng,
    params: Option<&mut GradStore<E>>,
    trace: Option<&mut Vec<(usize, TensorBase<E>)>>,
) -> Result<TensorBase<E>> {
    policy.validate()?;
    if dlogits.shape() != tape.logits.shape() {
        return Err(Error::Shape(format!(
            "dlogits shape {:?} vs logits {:?}",
            dlogits.shape(),
            tape.logits.shape()
        )));
    }
    if let Some(mask) = &policy.grad_mask {
        if mask.boundary_layer >= tape.entries.len() {
            return Err(Error::Policy(format!(
                "mask boundary layer {} not on tape of {} entries",
                mask.boundary_layer,
                tape.entries.len()
            )));
        }
    }
    let mut run = BackwardRun { tape, params, trace };
    run.segment(0, tape.entries.len(), dlogits.clone(), policy, rng, true)
}

/// Reverse traversal producing the gradient w.r.t. the network input.
pub fn backward<E: Element>(
    tape: &TapeBase<E>,
    policy: &BackwardPolicy,
    dlogits: &TensorBase<E>,
    rng: &mut ChaCha8Rng,
) -> Result<TensorBase<E>> {
    run_backward(tape, policy, dlogits, rng, None, None)
}

/// Like [`backward`], also recording the gradient after each top-level layer
/// (tape index, dJ/d input-of-that-layer), in backward order.
pub fn backward_trace<E: Element>(
    tape: &TapeBase<E>,
    policy: &BackwardPolicy,
    dlogits: &TensorBase<E>,
    rng: &mut ChaCha8Rng,
) -> Result<(TensorBase<E>, Vec<(usize, TensorBase<E>)>)> {
    let mut trace = Vec::new();
    let grad = run_backward(tape, policy, dlogits, rng, None, Some(&mut trace))?;
    Ok((grad, trace))
}

/// Vanilla-rule backward that also accumulates weight gradients; the
/// trainer's workhorse.
pub fn backward_params<E: Element>(
    tape: &TapeBase<E>,
    dlogits: &TensorBase<E>,
) -> Result<(TensorBase<E>, GradStore<E>)> {
    let mut store = GradStore::new();
    let policy = BackwardPolicy::vanilla();
    let mut rng = ChaCha8Rng::seed_from_u64(0); // vanilla rules draw nothing
    let grad = run_backward(tape, &policy, dlogits, &mut rng, Some(&mut store), None)?;
    Ok((grad, store))
}

/// Tape with logits only; lets the loss functions be exercised alone.
pub(crate) fn tape_from_logits<E: Element>(logits: TensorBase<E>) -> TapeBase<E> {
    TapeBase {
        entries: Vec::new(),
        logits,
        weights: Arc::new(HashMap::new()),
        relu_count: 0,
        block_spans: HashMap::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn forward_is_deterministic_without_ghost() {
        let mut r = rng(1);
        let (layers, weights, x) = testkit::random_small_net(&mut r, true, true, true);
        let weights = Arc::new(weights);
        let a = forward(&layers, &weights, &x, None, &mut rng(0)).unwrap();
        let b = forward(&layers, &weights, &x, None, &mut rng(99)).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn ghost_zero_matches_plain_forward() {
        let mut r = rng(2);
        let (layers, weights, x) = testkit::random_small_net(&mut r, true, true, true);
        let weights = Arc::new(weights);
        let plain = forward(&layers, &weights, &x, None, &mut rng(0)).unwrap();
        let ghost0 = forward(&layers, &weights, &x, Some(0.0), &mut rng(7)).unwrap();
        assert_eq!(plain.logits.data(), ghost0.logits.data());
    }

    #[test]
    fn ghost_with_fixed_seed_is_reproducible_and_perturbs() {
        let mut r = rng(3);
        let (layers, weights, x) = testkit::random_small_net(&mut r, true, true, true);
        let weights = Arc::new(weights);
        let a = forward(&layers, &weights, &x, Some(0.22), &mut rng(5)).unwrap();
        let b = forward(&layers, &weights, &x, Some(0.22), &mut rng(5)).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
        let plain = forward(&layers, &weights, &x, None, &mut rng(0)).unwrap();
        assert_ne!(a.logits.data(), plain.logits.data());
    }

    #[test]
    fn replaying_saved_inputs_reproduces_outputs_bit_exactly() {
        let mut r = rng(4);
        let (layers, weights, x) = testkit::random_small_net(&mut r, true, true, true);
        let weights = Arc::new(weights);
        let tape = forward(&layers, &weights, &x, None, &mut rng(0)).unwrap();
        for entry in &tape.entries {
            match &entry.kind {
                LayerKind::ResidualBlockBegin { .. } | LayerKind::ResidualBlockEnd { .. } => continue,
                kind => {
                    let (out, _) = apply_layer(kind, &entry.input, &weights).unwrap();
                    assert_eq!(out.data(), entry.output.data());
                }
            }
        }
    }

    #[test]
    fn cross_entropy_symmetric_two_class() {
        let logits = TensorBase::new(vec![1, 2], vec![0.0f64, 0.0]).unwrap();
        let tape = testkit::tape_with_logits(logits);
        let (loss, grad) = loss_and_grad(&tape, &LossKind::CrossEntropy { label: 0 }).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((grad.data()[0] + 0.5).abs() < 1e-12);
        assert!((grad.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn neg_target_logit_definition() {
        let logits = TensorBase::new(vec![1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let tape = testkit::tape_with_logits(logits);
        let (loss, grad) = loss_and_grad(&tape, &LossKind::NegTargetLogit { target: 2 }).unwrap();
        assert_eq!(loss, -3.0);
        assert_eq!(grad.data(), &[0.0, 0.0, -1.0]);
    }

    #[test]
    fn confident_cross_entropy_is_near_zero() {
        let logits = TensorBase::new(vec![1, 4], vec![30.0f64, 0.0, 0.0, 0.0]).unwrap();
        let tape = testkit::tape_with_logits(logits);
        let (loss, _) = loss_and_grad(&tape, &LossKind::CrossEntropy { label: 0 }).unwrap();
        assert!(loss < 1e-10);
    }

    #[test]
    fn label_out_of_range_is_error() {
        let logits = TensorBase::new(vec![1, 3], vec![0.0f64, 0.0, 0.0]).unwrap();
        let tape = testkit::tape_with_logits(logits);
        assert!(matches!(
            loss_and_grad(&tape, &LossKind::CrossEntropy { label: 3 }),
            Err(Error::LabelRange { .. })
        ));
    }

    #[test]
    fn vanilla_backward_matches_finite_differences() {
        let mut r = rng(7);
        for _ in 0..3 {
            let (layers, weights, x) = testkit::random_small_net(&mut r, true, true, true);
            let rel = testkit::max_rel_error_vs_fd(&layers, &weights, &x, 0);
            assert!(rel < 1e-3, "relative error {rel}");
        }
    }

    #[test]
    fn loss_value_is_policy_independent() {
        let mut r = rng(8);
        let (layers, weights, x) = testkit::random_small_net(&mut r, true, true, true);
        let weights = Arc::new(weights);
        let tape = forward(&layers, &weights, &x, None, &mut rng(0)).unwrap();
        let (l1, _) = loss_and_grad(&tape, &LossKind::CrossEntropy { label: 1 }).unwrap();
        // policies only affect backward; same tape, same loss
        let (l2, _) = loss_and_grad(&tape, &LossKind::CrossEntropy { label: 1 }).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn net_without_nonlinear_dispatch_points_ignores_policies() {
        let mut r = rng(9);
        let (layers, weights, x) = testkit::random_small_net(&mut r, false, false, false);
        assert!(!layers.iter().any(|l| matches!(l, LayerKind::Relu { .. } | LayerKind::MaxPool { .. })));
        let weights = Arc::new(weights);
        let tape = forward(&layers, &weights, &x, None, &mut rng(0)).unwrap();
        let (_, dlogits) = loss_and_grad(&tape, &LossKind::CrossEntropy { label: 0 }).unwrap();
        let vanilla = backward(&tape, &BackwardPolicy::vanilla(), &dlogits, &mut rng(0)).unwrap();
        let mut bpa = BackwardPolicy::vanilla();
        bpa.relu_rule = crate::rules::ReluRule::Bpa;
        bpa.pool_rule = crate::rules::PoolRule::Bpa { temperature: 10.0 };
        let modified = backward(&tape, &bpa, &dlogits, &mut rng(0)).unwrap();
        assert_eq!(vanilla.data(), modified.data());
    }

    #[test]
    fn policy_change_is_local_in_backward_order() {
        let mut r = rng(10);
        // plain sequential net (no residual) so trace boundaries are simple
        let (layers, weights, x) = testkit::random_small_net(&mut r, true, true, false);
        let relu_indices: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, LayerKind::Relu { .. }).then_some(i))
            .collect();
        assert!(relu_indices.len() >= 2, "need at least two ReLUs");
        let target_relu_ord = relu_indices.len() - 1; // modify only the last ReLU
        let weights = Arc::new(weights);
        let tape = forward(&layers, &weights, &x, None, &mut rng(0)).unwrap();
        let (_, dlogits) = loss_and_grad(&tape, &LossKind::CrossEntropy { label: 0 }).unwrap();
        let (_, trace_v) = backward_trace(&tape, &BackwardPolicy::vanilla(), &dlogits, &mut rng(0)).unwrap();
        let mut p = BackwardPolicy::vanilla();
        p.relu_rule = crate::rules::ReluRule::LinBp;
        p.relu_start_index = target_relu_ord;
        let (_, trace_m) = backward_trace(&tape, &p, &dlogits, &mut rng(0)).unwrap();
        let modified_layer = relu_indices[target_relu_ord];
        let mut saw_difference = false;
        for ((ia, ga), (ib, gb)) in trace_v.iter().zip(&trace_m) {
            assert_eq!(ia, ib);
            if *ia > modified_layer {
                assert_eq!(ga.data(), gb.data(), "layer {ia} upstream of the change must be untouched");
            } else if ga.data() != gb.data() {
                saw_difference = true;
            }
        }
        assert!(saw_difference, "modification had no effect at all");
    }

    #[test]
    fn missing_weight_is_reported_by_id() {
        let layers = vec![LayerKind::Conv {
            weight: "conv.w".into(),
            bias: None,
            spec: WindowSpec::square(3, 1).unwrap(),
        }];
        let weights: Arc<WeightMap<f32>> = Arc::new(HashMap::new());
        let x = TensorBase::zeros(&[1, 1, 5, 5]);
        match forward(&layers, &weights, &x, None, &mut rng(0)) {
            Err(Error::MissingWeight(id)) => assert_eq!(id, "conv.w"),
            other => panic!("expected MissingWeight, got {other:?}"),
        }
    }

    #[test]
    fn mask_boundary_outside_tape_is_policy_error() {
        let mut r = rng(11);
        let (layers, weights, x) = testkit::random_small_net(&mut r, true, false, false);
        let weights = Arc::new(weights);
        let tape = forward(&layers, &weights, &x, None, &mut rng(0)).unwrap();
        let (_, dlogits) = loss_and_grad(&tape, &LossKind::CrossEntropy { label: 0 }).unwrap();
        let p = BackwardPolicy::vanilla().with_mask(tape.entries.len() + 5, 0.5);
        assert!(matches!(backward(&tape, &p, &dlogits, &mut rng(0)), Err(Error::Policy(_))));
    }
}
