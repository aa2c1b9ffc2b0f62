//! Desk-scale architectures, the SGD trainer, and weight serialization.
//!
//! Seven architectures are registered by name: two surrogates
//! (`resnet-small` with one overlapping 3×3/stride-2 max-pool and ten
//! identity residual blocks; `vgg-small` with three non-overlapping 2×2
//! pools) and five victims spanning different depths, widths, block types
//! and pooling layouts. None use batch normalization: the trainer works on
//! per-example tapes with vanilla rules only, so architectures stay exactly
//! differentiable layer by layer.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{backward_params, forward, loss_and_grad, LayerKind, LossKind, Tape, WeightMap};
use crate::tensor::{Tensor, WindowSpec};

/// Architecture description: an ordered layer list plus derived counts used
/// by policies and experiments.
#[derive(Debug, Clone)]
pub struct ModelDef {
    pub name: String,
    /// (channels, height, width) of the expected input.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerKind>,
    pub num_classes: usize,
    pub relu_count: usize,
    pub pool_count: usize,
    pub residual_block_count: usize,
    /// Layer indices at which a new stage starts; used by mask and
    /// position experiments.
    pub stage_boundaries: Vec<usize>,
    /// Weight ids of convs that close a residual branch (zero-initialized so
    /// blocks start as identities).
    branch_final: Vec<String>,
    /// (id, shape) in creation order — the deterministic init sequence.
    weight_shapes: Vec<(String, Vec<usize>)>,
}

impl ModelDef {
    /// ReLU ordinal of the first ReLU at or after the given residual block,
    /// mapping block scopes onto `relu_start_index`.
    pub fn relu_ordinal_at_block(&self, block: usize) -> Option<usize> {
        let mut begin_seen = false;
        for layer in &self.layers {
            match layer {
                LayerKind::ResidualBlockBegin { block: b } if *b >= block => begin_seen = true,
                LayerKind::Relu { ordinal } if begin_seen => return Some(*ordinal),
                _ => {}
            }
        }
        None
    }

    /// Any max-pool whose windows overlap (stride < kernel)?
    pub fn has_overlapping_pool(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerKind::MaxPool { spec, .. } if spec.overlapping()))
    }

    pub fn validate_input(&self, x: &Tensor) -> Result<()> {
        let (c, h, w) = self.input;
        if x.shape() != [1, c, h, w] {
            return Err(Error::Shape(format!(
                "{} expects input [1, {c}, {h}, {w}], got {:?}",
                self.name,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn weight_ids(&self) -> impl Iterator<Item = &str> {
        self.weight_shapes.iter().map(|(id, _)| id.as_str())
    }

    /// Assembles a model from raw parts, deriving the counts. Registry
    /// architectures are the only public construction path; this exists for
    /// in-crate fixtures.
    pub(crate) fn from_parts(
        name: &str,
        input: (usize, usize, usize),
        layers: Vec<LayerKind>,
        num_classes: usize,
        weight_shapes: Vec<(String, Vec<usize>)>,
    ) -> Self {
        let relu_count = layers.iter().filter(|l| matches!(l, LayerKind::Relu { .. })).count();
        let pool_count = layers.iter().filter(|l| matches!(l, LayerKind::MaxPool { .. })).count();
        let residual_block_count =
            layers.iter().filter(|l| matches!(l, LayerKind::ResidualBlockBegin { .. })).count();
        Self {
            name: name.to_string(),
            input,
            layers,
            num_classes,
            relu_count,
            pool_count,
            residual_block_count,
            stage_boundaries: Vec::new(),
            branch_final: Vec::new(),
            weight_shapes,
        }
    }
}

struct NetBuilder {
    layers: Vec<LayerKind>,
    weight_shapes: Vec<(String, Vec<usize>)>,
    branch_final: Vec<String>,
    stage_boundaries: Vec<usize>,
    c: usize,
    h: usize,
    w: usize,
    relu: usize,
    pool: usize,
    block: usize,
    conv_id: usize,
    fc_id: usize,
    open_blocks: Vec<usize>,
}

impl NetBuilder {
    fn new(c: usize, h: usize, w: usize) -> Self {
        Self {
            layers: Vec::new(),
            weight_shapes: Vec::new(),
            branch_final: Vec::new(),
            stage_boundaries: Vec::new(),
            c,
            h,
            w,
            relu: 0,
            pool: 0,
            block: 0,
            conv_id: 0,
            fc_id: 0,
            open_blocks: Vec::new(),
        }
    }

    fn mark_stage(&mut self) {
        self.stage_boundaries.push(self.layers.len());
    }

    fn conv(&mut self, out: usize, k: usize, s: usize, p: usize) -> String {
        let id = format!("conv{}", self.conv_id);
        self.conv_id += 1;
        let spec = WindowSpec::square_padded(k, s, p).expect("valid conv spec");
        self.weight_shapes.push((format!("{id}.w"), vec![out, self.c, k, k]));
        self.weight_shapes.push((format!("{id}.b"), vec![out]));
        self.layers.push(LayerKind::Conv { weight: format!("{id}.w"), bias: Some(format!("{id}.b")), spec });
        let (nh, nw) = spec.out_dims(self.h, self.w).expect("valid conv dims");
        self.c = out;
        self.h = nh;
        self.w = nw;
        id
    }

    fn relu(&mut self) {
        self.layers.push(LayerKind::Relu { ordinal: self.relu });
        self.relu += 1;
    }

    fn maxpool(&mut self, k: usize, s: usize, p: usize) {
        let spec = WindowSpec::square_padded(k, s, p).expect("valid pool spec");
        self.layers.push(LayerKind::MaxPool { spec, ordinal: self.pool });
        self.pool += 1;
        let (nh, nw) = spec.out_dims(self.h, self.w).expect("valid pool dims");
        self.h = nh;
        self.w = nw;
    }

    fn avgpool(&mut self, k: usize, s: usize) {
        let spec = WindowSpec::square(k, s).expect("valid pool spec");
        self.layers.push(LayerKind::AvgPool { spec });
        let (nh, nw) = spec.out_dims(self.h, self.w).expect("valid pool dims");
        self.h = nh;
        self.w = nw;
    }

    fn begin_block(&mut self) {
        self.layers.push(LayerKind::ResidualBlockBegin { block: self.block });
        self.open_blocks.push(self.block);
        self.block += 1;
    }

    fn end_block(&mut self) {
        let block = self.open_blocks.pop().expect("balanced blocks");
        if let Some((id, _)) = self.weight_shapes.iter().rev().find(|(id, _)| id.ends_with(".w")) {
            self.branch_final.push(id.clone());
        }
        self.layers.push(LayerKind::ResidualBlockEnd { block });
    }

    /// Two 3×3 convs with an inner ReLU on an identity skip.
    fn basic_block(&mut self) {
        self.begin_block();
        self.conv(self.c, 3, 1, 1);
        self.relu();
        self.conv(self.c, 3, 1, 1);
        self.end_block();
        self.relu();
    }

    /// 1×1 → 3×3 → 1×1 bottleneck branch on an identity skip.
    fn bottleneck_block(&mut self, mid: usize) {
        let outer = self.c;
        self.begin_block();
        self.conv(mid, 1, 1, 0);
        self.relu();
        self.conv(mid, 3, 1, 1);
        self.relu();
        self.conv(outer, 1, 1, 0);
        self.end_block();
        self.relu();
    }

    fn flatten(&mut self) {
        self.layers.push(LayerKind::Flatten);
        self.c *= self.h * self.w;
        self.h = 1;
        self.w = 1;
    }

    fn linear(&mut self, out: usize) {
        let id = format!("fc{}", self.fc_id);
        self.fc_id += 1;
        self.weight_shapes.push((format!("{id}.w"), vec![out, self.c]));
        self.weight_shapes.push((format!("{id}.b"), vec![out]));
        self.layers.push(LayerKind::Linear { weight: format!("{id}.w"), bias: Some(format!("{id}.b")) });
        self.c = out;
    }

    fn finish(self, name: &str, input: (usize, usize, usize)) -> ModelDef {
        assert!(self.open_blocks.is_empty(), "unclosed residual block in {name}");
        ModelDef {
            name: name.to_string(),
            input,
            num_classes: self.c,
            relu_count: self.relu,
            pool_count: self.pool,
            residual_block_count: self.block,
            stage_boundaries: self.stage_boundaries,
            branch_final: self.branch_final,
            weight_shapes: self.weight_shapes,
            layers: self.layers,
        }
    }
}

fn resnet_small() -> ModelDef {
    let mut b = NetBuilder::new(3, 32, 32);
    b.conv(16, 3, 1, 1);
    b.relu();
    b.maxpool(3, 2, 1); // overlapping windows, 32 -> 16
    b.mark_stage();
    for _ in 0..3 {
        b.basic_block();
    }
    b.mark_stage();
    b.conv(32, 3, 2, 1); // 16 -> 8
    b.relu();
    for _ in 0..3 {
        b.basic_block();
    }
    b.mark_stage();
    b.conv(64, 3, 2, 1); // 8 -> 4
    b.relu();
    for _ in 0..2 {
        b.basic_block();
    }
    b.mark_stage();
    b.conv(64, 3, 2, 1); // 4 -> 2
    b.relu();
    for _ in 0..2 {
        b.basic_block();
    }
    b.avgpool(2, 2);
    b.flatten();
    b.linear(10);
    b.finish("resnet-small", (3, 32, 32))
}

fn vgg_small() -> ModelDef {
    let mut b = NetBuilder::new(3, 32, 32);
    for c_out in [16usize, 32, 64] {
        b.mark_stage();
        b.conv(c_out, 3, 1, 1);
        b.relu();
        b.conv(c_out, 3, 1, 1);
        b.relu();
        b.maxpool(2, 2, 0);
    }
    b.mark_stage();
    b.flatten();
    b.linear(128);
    b.relu();
    b.linear(10);
    b.finish("vgg-small", (3, 32, 32))
}

fn wrn_tiny() -> ModelDef {
    // wide and shallow: one wide residual block
    let mut b = NetBuilder::new(3, 32, 32);
    b.conv(24, 3, 1, 1);
    b.relu();
    b.maxpool(2, 2, 0); // 32 -> 16
    b.mark_stage();
    b.conv(48, 3, 2, 1); // 16 -> 8
    b.relu();
    b.basic_block();
    b.mark_stage();
    b.conv(96, 3, 2, 1); // 8 -> 4
    b.relu();
    b.avgpool(4, 4);
    b.flatten();
    b.linear(10);
    b.finish("wrn-tiny", (3, 32, 32))
}

fn densenet_tiny() -> ModelDef {
    // narrow and deep, average-pool transitions, no residual blocks
    let mut b = NetBuilder::new(3, 32, 32);
    b.conv(16, 3, 1, 1);
    b.relu();
    b.avgpool(2, 2); // 32 -> 16
    b.mark_stage();
    b.conv(24, 3, 1, 1);
    b.relu();
    b.avgpool(2, 2); // 16 -> 8
    b.mark_stage();
    b.conv(32, 3, 1, 1);
    b.relu();
    b.conv(32, 3, 1, 1);
    b.relu();
    b.avgpool(2, 2); // 8 -> 4
    b.mark_stage();
    b.conv(48, 3, 1, 1);
    b.relu();
    b.avgpool(4, 4);
    b.flatten();
    b.linear(10);
    b.finish("densenet-tiny", (3, 32, 32))
}

fn plaincnn() -> ModelDef {
    let mut b = NetBuilder::new(3, 32, 32);
    b.conv(16, 3, 1, 1);
    b.relu();
    b.maxpool(2, 2, 0);
    b.mark_stage();
    b.conv(32, 3, 1, 1);
    b.relu();
    b.maxpool(2, 2, 0);
    b.mark_stage();
    b.conv(48, 3, 1, 1);
    b.relu();
    b.maxpool(2, 2, 0);
    b.flatten();
    b.linear(10);
    b.finish("plaincnn", (3, 32, 32))
}

fn resnext_tiny() -> ModelDef {
    // bottleneck residual blocks behind a max-pool stem
    let mut b = NetBuilder::new(3, 32, 32);
    b.conv(32, 3, 2, 1); // 32 -> 16
    b.relu();
    b.maxpool(2, 2, 0); // 16 -> 8
    b.mark_stage();
    b.bottleneck_block(16);
    b.bottleneck_block(16);
    b.mark_stage();
    b.conv(64, 3, 2, 1); // 8 -> 4
    b.relu();
    b.bottleneck_block(32);
    b.avgpool(4, 4);
    b.flatten();
    b.linear(10);
    b.finish("resnext-tiny", (3, 32, 32))
}

fn mobilenet_tiny() -> ModelDef {
    // alternating 3×3 spatial and 1×1 pointwise convs, no max-pool
    let mut b = NetBuilder::new(3, 32, 32);
    b.conv(16, 3, 2, 1); // 32 -> 16
    b.relu();
    b.mark_stage();
    b.conv(16, 3, 1, 1);
    b.relu();
    b.conv(32, 1, 1, 0);
    b.relu();
    b.mark_stage();
    b.conv(32, 3, 2, 1); // 16 -> 8
    b.relu();
    b.conv(64, 1, 1, 0);
    b.relu();
    b.avgpool(8, 8);
    b.flatten();
    b.linear(10);
    b.finish("mobilenet-tiny", (3, 32, 32))
}

/// Name → builder registry; architectures are selected by name at runtime.
pub const REGISTRY: &[(&str, fn() -> ModelDef)] = &[
    ("resnet-small", resnet_small),
    ("vgg-small", vgg_small),
    ("wrn-tiny", wrn_tiny),
    ("densenet-tiny", densenet_tiny),
    ("plaincnn", plaincnn),
    ("resnext-tiny", resnext_tiny),
    ("mobilenet-tiny", mobilenet_tiny),
];

pub fn arch_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

/// Builds a registered architecture.
pub fn build(arch_name: &str) -> Result<ModelDef> {
    REGISTRY
        .iter()
        .find(|(n, _)| *n == arch_name)
        .map(|(_, f)| f())
        .ok_or_else(|| Error::UnknownArch(arch_name.to_string()))
}

/// Training provenance carried with every weight store.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreMeta {
    pub model_name: String,
    pub seed: u64,
    pub clean_test_accuracy: f32,
}

/// Immutable bundle of named weight tensors plus metadata.
#[derive(Debug, Clone)]
pub struct WeightStore {
    tensors: Arc<WeightMap<f32>>,
    pub meta: StoreMeta,
}

impl WeightStore {
    pub fn new(tensors: WeightMap<f32>, meta: StoreMeta) -> Self {
        Self { tensors: Arc::new(tensors), meta }
    }

    pub fn tensors(&self) -> &Arc<WeightMap<f32>> {
        &self.tensors
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.tensors.get(id)
    }

    /// Checks that every weight id the model references exists with the
    /// shape the model declared.
    pub fn bind(&self, def: &ModelDef) -> Result<()> {
        for (id, shape) in &def.weight_shapes {
            match self.tensors.get(id) {
                None => return Err(Error::MissingWeight(id.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Shape(format!(
                        "weight {id}: stored shape {:?}, model expects {:?}",
                        t.shape(),
                        shape
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn randn(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f32 = rng.random::<f32>().max(1e-7);
    let u2: f32 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

/// He-normal initialization in deterministic creation order. Convs that
/// close a residual branch start at zero so every block begins as an
/// identity, which keeps the normalization-free nets trainable.
pub fn init_weights(def: &ModelDef, seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = HashMap::new();
    for (id, shape) in &def.weight_shapes {
        let t = if id.ends_with(".b") || def.branch_final.contains(id) {
            Tensor::zeros(shape)
        } else if shape.len() == 4 {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
            let std = (2.0 / fan_in).sqrt();
            Tensor::from_fn(shape, |_| randn(&mut rng) * std)
        } else {
            let fan_in = shape[1] as f32;
            let std = (1.0 / fan_in).sqrt();
            Tensor::from_fn(shape, |_| randn(&mut rng) * std)
        };
        tensors.insert(id.clone(), t);
    }
    WeightStore::new(
        tensors,
        StoreMeta { model_name: def.name.clone(), seed, clean_test_accuracy: 0.0 },
    )
}

/// Plain forward pass to a tape (no ghost perturbation).
pub fn model_forward(def: &ModelDef, store: &WeightStore, x: &Tensor) -> Result<Tape> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    forward(&def.layers, store.tensors(), x, None, &mut rng)
}

pub fn predict(def: &ModelDef, store: &WeightStore, x: &Tensor) -> Result<usize> {
    Ok(crate::graph::forward_inference(&def.layers, store.tensors(), x)?.argmax())
}

/// Accuracy over the given dataset indices; examples evaluate in parallel
/// and reduce in index order.
pub fn accuracy(def: &ModelDef, store: &WeightStore, data: &Dataset, indices: &[usize]) -> Result<f32> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let preds: Vec<Result<bool>> = indices
        .par_iter()
        .map(|&i| {
            let (x, label) = data.example(i)?;
            Ok(predict(def, store, &x)? == label)
        })
        .collect();
    let mut correct = 0usize;
    for p in preds {
        if p? {
            correct += 1;
        }
    }
    Ok(correct as f32 / indices.len() as f32)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Random 4-pad crop and horizontal flip.
    pub augment: bool,
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            seed: 0,
            augment: true,
            verbose: false,
        }
    }
}

/// Zero-pad by 4 then crop a 32×32 view at (dy, dx) ∈ [0,8]², then flip.
fn augment_example(x: &Tensor, dy: usize, dx: usize, flip: bool) -> Tensor {
    let (_, c, h, w) = x.dims4().expect("NCHW example");
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for y in 0..h {
            let sy = y as isize + dy as isize - 4;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for xx in 0..w {
                let sx = xx as isize + dx as isize - 4;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let tx = if flip { w - 1 - xx } else { xx };
                dst[(ci * h + y) * w + tx] = src[(ci * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// SGD with momentum over softmax cross-entropy, cosine learning-rate decay.
/// Per-example gradients are computed in parallel and reduced in index
/// order, so the result is bit-identical for any worker count.
pub fn train(def: &ModelDef, data: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<WeightStore> {
    if data.len() == 0 {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let store = init_weights(def, cfg.seed);
    let mut weights: WeightMap<f32> = store.tensors().as_ref().clone();
    let mut velocity: WeightMap<f32> =
        def.weight_shapes.iter().map(|(id, shape)| (id.clone(), Tensor::zeros(shape))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let total_steps = (cfg.epochs * data.len()).max(1);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            // assemble inputs single-threaded so augmentation draws are
            // independent of worker count
            let mut examples = Vec::with_capacity(batch.len());
            for &i in batch {
                let (x, label) = data.example(i)?;
                let x = if cfg.augment {
                    let dy = rng.random_range(0..9usize);
                    let dx = rng.random_range(0..9usize);
                    let flip = rng.random::<f32>() < 0.5;
                    augment_example(&x, dy, dx, flip)
                } else {
                    x
                };
                examples.push((x, label));
            }
            let shared = Arc::new(weights);
            let results: Vec<Result<(f64, bool, crate::graph::GradStore<f32>)>> = examples
                .par_iter()
                .map(|(x, label)| {
                    let tape = forward(&def.layers, &shared, x, None, &mut ChaCha8Rng::seed_from_u64(0))?;
                    let (loss, dlogits) = loss_and_grad(&tape, &LossKind::CrossEntropy { label: *label })?;
                    let correct = tape.logits.argmax() == *label;
                    let (_, grads) = backward_params(&tape, &dlogits)?;
                    Ok((loss, correct, grads))
                })
                .collect();
            weights = Arc::try_unwrap(shared).expect("workers have finished");
            let mut total = crate::graph::GradStore::new();
            let mut n = 0usize;
            for r in results {
                let (loss, correct, grads) = r?;
                epoch_loss += loss;
                epoch_correct += correct as usize;
                total.merge(grads)?;
                n += 1;
            }
            // cosine-decayed learning rate
            let progress = step as f32 / total_steps as f32;
            let lr = cfg.lr * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
            step += n;
            let scale = 1.0 / n as f32;
            for (id, _) in &def.weight_shapes {
                let Some(g) = total.grads.get(id) else { continue };
                let w = weights.get_mut(id).expect("weight exists");
                let v = velocity.get_mut(id).expect("velocity exists");
                for ((vi, wi), gi) in v.data_mut().iter_mut().zip(w.data_mut()).zip(g.data()) {
                    *vi = cfg.momentum * *vi - lr * (gi * scale + cfg.weight_decay * *wi);
                    *wi += *vi;
                }
            }
        }
        if cfg.verbose {
            eprintln!(
                "[{}] epoch {epoch}: loss {:.4}, train acc {:.2}%",
                def.name,
                epoch_loss / data.len() as f64,
                100.0 * epoch_correct as f32 / data.len() as f32
            );
        }
    }

    let meta = StoreMeta { model_name: def.name.clone(), seed: cfg.seed, clean_test_accuracy: 0.0 };
    let mut out = WeightStore { tensors: Arc::new(weights), meta };
    let test_indices: Vec<usize> = (0..test.len()).collect();
    out.meta.clean_test_accuracy = if test.len() > 0 { accuracy(def, &out, test, &test_indices)? } else { 0.0 };
    if cfg.verbose {
        eprintln!("[{}] clean test accuracy {:.2}%", def.name, 100.0 * out.meta.clean_test_accuracy);
    }
    Ok(out)
}

const MAGIC: &[u8; 4] = b"BPAW";
const VERSION: u32 = 1;
const META_NAME: &str = "~meta/model_name";
const META_SEED: &str = "~meta/seed";
const META_ACC: &str = "~meta/clean_test_accuracy";

/// Serializes a store: magic "BPAW", u32 version, u32 entry count, then per
/// entry a u16 name length, the UTF-8 name, a u8 rank, u32 dims, and raw
/// little-endian f32 data. Metadata rides along as reserved `~meta/`
/// entries with byte values encoded as f32. Entries are sorted by name so
/// repeated saves are byte-identical.
pub fn save_weights(store: &WeightStore, path: &Path) -> Result<()> {
    let mut entries: Vec<(String, Tensor)> =
        store.tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let name_bytes: Vec<f32> = store.meta.model_name.bytes().map(|b| b as f32).collect();
    entries.push((
        META_NAME.into(),
        Tensor::new(
            vec![name_bytes.len().max(1)],
            if name_bytes.is_empty() { vec![0.0] } else { name_bytes },
        )?,
    ));
    entries.push((
        META_SEED.into(),
        Tensor::new(vec![8], store.meta.seed.to_le_bytes().iter().map(|&b| b as f32).collect())?,
    ));
    entries.push((META_ACC.into(), Tensor::new(vec![1], vec![store.meta.clean_test_accuracy])?));
    entries.sort_by(|a, b| a.0.cmp(&b.0));

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in &entries {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Param(format!("weight name too long: {name}")));
        }
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        if tensor.shape().len() > u8::MAX as usize {
            return Err(Error::Param(format!("rank too large for {name}")));
        }
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::WeightFormat {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Reads a weight file written by [`save_weights`].
pub fn load_weights(path: &Path) -> Result<WeightStore> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::WeightFormat { offset: 0, msg: format!("bad magic {magic:?}, expected {MAGIC:?}") });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::WeightFormat { offset: 4, msg: format!("unsupported version {version}") });
    }
    let count = r.u32("entry count")? as usize;
    let mut tensors: WeightMap<f32> = HashMap::new();
    let mut meta = StoreMeta { model_name: String::new(), seed: 0, clean_test_accuracy: 0.0 };
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name_off = r.pos as u64;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::WeightFormat { offset: name_off, msg: "name is not UTF-8".into() })?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let len: usize = shape.iter().product();
        let data_off = r.pos as u64;
        let raw = r.take(len * 4, "tensor data")?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::WeightFormat { offset: data_off, msg: e.to_string() })?;
        match name.as_str() {
            META_NAME => {
                meta.model_name =
                    tensor.data().iter().map(|&v| v as u8 as char).filter(|&c| c != '\0').collect();
            }
            META_SEED => {
                let bytes: Vec<u8> = tensor.data().iter().map(|&v| v as u8).collect();
                if bytes.len() == 8 {
                    meta.seed = u64::from_le_bytes(bytes.try_into().unwrap());
                }
            }
            META_ACC => meta.clean_test_accuracy = tensor.data()[0],
            _ => {
                tensors.insert(name, tensor);
            }
        }
    }
    Ok(WeightStore { tensors: Arc::new(tensors), meta })
}

/// Loads weights and binds them against the given architecture.
pub fn load_weights_for(def: &ModelDef, path: &Path) -> Result<WeightStore> {
    let store = load_weights(path)?;
    store.bind(def)?;
    Ok(store)
}
