//! Experiment orchestration: policy presets, eval-set filtering, transfer
//! tables, parameter sweeps, the ReLU/max-pool ablation grid, relevance
//! summaries, and CSV reporting.
//!
//! Every run is a pure function of its [`ExperimentSpec`]; per-image seeds
//! derive as `seed XOR image-index`, workers merge in deterministic image
//! order, and reports carry no clocks, so equal specs give byte-identical
//! CSV for any worker count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attacks::{attack, relevance, AttackConfig, AttackMethod, AttackPolicy, DimParams, TimParams};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::LossKind;
use crate::models::{build, load_weights_for, predict, ModelDef, WeightStore};
use crate::rules::{BackwardPolicy, GradMaskSpec, PoolRule, ReluRule, ResidualRule};

/// A named, fully concrete attack policy.
#[derive(Debug, Clone)]
pub struct Policy {
    pub name: String,
    pub attack_policy: AttackPolicy,
}

/// Knobs that refine a preset: flags override file values, file values
/// override defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyOverrides {
    pub temperature: Option<f32>,
    pub relu_start: Option<usize>,
    pub gamma: Option<f32>,
    pub lambda: Option<f32>,
    pub mask_prob: Option<f32>,
    pub mask_layer: Option<usize>,
    pub recover_prob: Option<f32>,
}

pub const PRESET_NAMES: &[&str] = &[
    "vanilla",
    "sgm",
    "linbp",
    "ghost",
    "bpa",
    "sgm+bpa",
    "linbp+bpa",
    "ghost+bpa",
    "recover-relu",
    "recover-pool",
];

/// Default rule scope for a model: the last eight residual blocks when the
/// architecture has that many, otherwise the last three ReLUs.
pub fn default_relu_start(def: &ModelDef) -> usize {
    if def.residual_block_count >= 8 {
        def.relu_ordinal_at_block(def.residual_block_count - 8).unwrap_or(0)
    } else {
        def.relu_count.saturating_sub(3)
    }
}

/// Default softmax temperature: 10 for overlapping-pool models, 1 for
/// non-overlapping ones.
pub fn default_temperature(def: &ModelDef) -> f32 {
    if def.has_overlapping_pool() {
        10.0
    } else {
        1.0
    }
}

/// Default mask boundary: the first layer of the third stage, so the masked
/// gradient is the one flowing from stage 3 into stage 2.
pub fn default_mask_layer(def: &ModelDef) -> usize {
    def.stage_boundaries.get(2).copied().unwrap_or(def.layers.len() / 2)
}

/// Expands a named preset into a concrete policy for the given surrogate.
pub fn preset(name: &str, def: &ModelDef, ovr: &PolicyOverrides) -> Result<Policy> {
    let relu_start = ovr.relu_start.unwrap_or_else(|| default_relu_start(def));
    let temperature = ovr.temperature.unwrap_or_else(|| default_temperature(def));
    let gamma = ovr.gamma.unwrap_or(0.5);
    let lambda = ovr.lambda.unwrap_or(0.22);
    let recover_prob = ovr.recover_prob.unwrap_or(0.3);

    let mut backward = BackwardPolicy::vanilla();
    let mut ghost_lambda = None;
    match name {
        "vanilla" => {}
        "sgm" => backward.residual_rule = ResidualRule::Sgm { gamma },
        "linbp" => {
            backward.relu_rule = ReluRule::LinBp;
            backward.relu_start_index = relu_start;
            backward.residual_rule = ResidualRule::LinBpRescale;
        }
        "ghost" => ghost_lambda = Some(lambda),
        "bpa" => {
            backward.relu_rule = ReluRule::Bpa;
            backward.relu_start_index = relu_start;
            backward.pool_rule = PoolRule::Bpa { temperature };
        }
        "sgm+bpa" => {
            backward.relu_rule = ReluRule::Bpa;
            backward.relu_start_index = relu_start;
            backward.pool_rule = PoolRule::Bpa { temperature };
            backward.residual_rule = ResidualRule::Sgm { gamma };
        }
        // both modify ReLU, so the combination keeps the all-ones ReLU and
        // takes only the smoothed max-pool rule
        "linbp+bpa" => {
            backward.relu_rule = ReluRule::LinBp;
            backward.relu_start_index = relu_start;
            backward.residual_rule = ResidualRule::LinBpRescale;
            backward.pool_rule = PoolRule::Bpa { temperature };
        }
        "ghost+bpa" => {
            backward.relu_rule = ReluRule::Bpa;
            backward.relu_start_index = relu_start;
            backward.pool_rule = PoolRule::Bpa { temperature };
            ghost_lambda = Some(lambda);
        }
        "recover-relu" => {
            backward.relu_rule = ReluRule::Recover { prob: recover_prob };
            backward.relu_start_index = relu_start;
        }
        "recover-pool" => backward.pool_rule = PoolRule::Recover { prob: recover_prob },
        other => {
            return Err(Error::Config(format!(
                "unknown policy preset '{other}' (expected one of {PRESET_NAMES:?})"
            )))
        }
    }
    if let Some(prob) = ovr.mask_prob {
        let layer = ovr.mask_layer.unwrap_or_else(|| default_mask_layer(def));
        backward.grad_mask = Some(GradMaskSpec { boundary_layer: layer, prob });
    }
    backward.validate()?;
    Ok(Policy { name: name.to_string(), attack_policy: AttackPolicy { backward, ghost_lambda } })
}

/// Attack parameters as they appear in specs and flags, before a concrete
/// loss/label is attached per image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub method: AttackMethod,
    pub epsilon: f32,
    pub alpha: f32,
    pub iters: usize,
    pub mu: f32,
    pub vmi_samples: usize,
    pub vmi_beta: f32,
    pub dim: Option<DimParams>,
    pub tim: Option<TimParams>,
    pub targeted: bool,
    pub pgd_random_init: bool,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            method: AttackMethod::Pgd,
            epsilon: 8.0 / 255.0,
            alpha: 1.6 / 255.0,
            iters: 10,
            mu: 1.0,
            vmi_samples: 20,
            vmi_beta: 1.5,
            dim: None,
            tim: None,
            targeted: false,
            pgd_random_init: true,
        }
    }
}

impl AttackSpec {
    fn instantiate(&self, loss: LossKind, seed: u64) -> AttackConfig {
        AttackConfig {
            method: self.method,
            epsilon: self.epsilon,
            alpha: self.alpha,
            iters: self.iters,
            mu: self.mu,
            vmi_samples: self.vmi_samples,
            vmi_beta: self.vmi_beta,
            dim: self.dim,
            tim: self.tim,
            targeted: self.targeted,
            loss,
            seed,
            pgd_random_init: self.pgd_random_init,
        }
    }
}

/// Full description of one experiment run.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub data_dir: PathBuf,
    pub surrogate_arch: String,
    pub surrogate_weights: PathBuf,
    /// (architecture, weights path) per victim.
    pub victims: Vec<(String, PathBuf)>,
    pub policies: Vec<String>,
    pub overrides: PolicyOverrides,
    pub attack: AttackSpec,
    /// Eval-set size after the all-models-correct filter.
    pub eval_n: usize,
    pub seed: u64,
    pub sweep: Option<(String, Vec<f32>)>,
    pub relevance_step: f32,
    pub relevance_images: usize,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            surrogate_arch: "vgg-small".into(),
            surrogate_weights: PathBuf::from("weights/vgg-small.bpaw"),
            victims: Vec::new(),
            policies: vec!["vanilla".into()],
            overrides: PolicyOverrides::default(),
            attack: AttackSpec::default(),
            eval_n: 1000,
            seed: 0,
            sweep: None,
            relevance_step: 1e-2,
            relevance_images: 500,
            out: None,
        }
    }
}

fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: cannot parse '{v}' as bool"))),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

/// Fractions like "8/255" are accepted anywhere a float is.
fn parse_f32(v: &str, key: &str) -> Result<f32> {
    if let Some((num, den)) = v.split_once('/') {
        let n: f32 = parse_num(num.trim(), key)?;
        let d: f32 = parse_num(den.trim(), key)?;
        if d == 0.0 {
            return Err(Error::Config(format!("{key}: division by zero in '{v}'")));
        }
        return Ok(n / d);
    }
    parse_num(v.trim(), key)
}

impl ExperimentSpec {
    /// Parses the flat `key = value` experiment-file format. Lines starting
    /// with `#` and blank lines are skipped; later keys override earlier
    /// ones (so CLI flags can be appended as extra lines).
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1)))?;
            spec.set(key.trim(), value.trim())?;
        }
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies one key=value assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "surrogate" => self.surrogate_arch = value.to_string(),
            "surrogate_weights" => self.surrogate_weights = PathBuf::from(value),
            "victims" => {
                self.victims.clear();
                for item in value.split(',').filter(|s| !s.trim().is_empty()) {
                    let (arch, path) = item
                        .trim()
                        .split_once(':')
                        .ok_or_else(|| Error::Config(format!("victims: expected arch:path, got '{item}'")))?;
                    self.victims.push((arch.trim().to_string(), PathBuf::from(path.trim())));
                }
            }
            "policy" | "policies" => {
                self.policies =
                    value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                if self.policies.is_empty() {
                    return Err(Error::Config("policy list is empty".into()));
                }
            }
            "method" => self.attack.method = AttackMethod::parse(value)?,
            "epsilon" => self.attack.epsilon = parse_f32(value, key)?,
            "alpha" => self.attack.alpha = parse_f32(value, key)?,
            "iters" => self.attack.iters = parse_num(value, key)?,
            "mu" => self.attack.mu = parse_f32(value, key)?,
            "vmi_samples" => self.attack.vmi_samples = parse_num(value, key)?,
            "vmi_beta" => self.attack.vmi_beta = parse_f32(value, key)?,
            "dim" => {
                self.attack.dim = if parse_bool(value, key)? { Some(DimParams::default()) } else { None }
            }
            "dim_prob" => {
                let mut d = self.attack.dim.unwrap_or_default();
                d.prob = parse_f32(value, key)?;
                self.attack.dim = Some(d);
            }
            "dim_canvas" => {
                let mut d = self.attack.dim.unwrap_or_default();
                d.max_canvas = parse_num(value, key)?;
                self.attack.dim = Some(d);
            }
            "tim" => {
                self.attack.tim = if parse_bool(value, key)? { Some(TimParams::default()) } else { None }
            }
            "tim_kernel" => {
                let mut t = self.attack.tim.unwrap_or_default();
                t.kernel_size = parse_num(value, key)?;
                self.attack.tim = Some(t);
            }
            "tim_sigma" => {
                let mut t = self.attack.tim.unwrap_or_default();
                t.sigma = parse_f32(value, key)?;
                self.attack.tim = Some(t);
            }
            "targeted" => self.attack.targeted = parse_bool(value, key)?,
            "pgd_random_init" => self.attack.pgd_random_init = parse_bool(value, key)?,
            "n" => self.eval_n = parse_num(value, key)?,
            "seed" => self.seed = parse_num(value, key)?,
            "sweep_param" => {
                let grid = self.sweep.take().map(|(_, g)| g).unwrap_or_default();
                self.sweep = Some((value.to_string(), grid));
            }
            "sweep_grid" => {
                let grid: Result<Vec<f32>> = value.split(',').map(|s| parse_f32(s.trim(), key)).collect();
                let param = self.sweep.take().map(|(p, _)| p).unwrap_or_default();
                self.sweep = Some((param, grid?));
            }
            "temperature" => self.overrides.temperature = Some(parse_f32(value, key)?),
            "relu_start" => self.overrides.relu_start = Some(parse_num(value, key)?),
            "gamma" => self.overrides.gamma = Some(parse_f32(value, key)?),
            "lambda" => self.overrides.lambda = Some(parse_f32(value, key)?),
            "mask_prob" => self.overrides.mask_prob = Some(parse_f32(value, key)?),
            "mask_layer" => self.overrides.mask_layer = Some(parse_num(value, key)?),
            "recover_prob" => self.overrides.recover_prob = Some(parse_f32(value, key)?),
            "step" => self.relevance_step = parse_f32(value, key)?,
            "n_images" => self.relevance_images = parse_num(value, key)?,
            "out" => self.out = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown spec key '{other}'"))),
        }
        Ok(())
    }

    /// Deterministic `key=value` echo of everything that affects results.
    fn echo(&self) -> Vec<(String, String)> {
        let mut kv = BTreeMap::new();
        kv.insert("surrogate".to_string(), self.surrogate_arch.clone());
        kv.insert(
            "victims".to_string(),
            self.victims.iter().map(|(a, _)| a.as_str()).collect::<Vec<_>>().join(","),
        );
        kv.insert("policies".to_string(), self.policies.join(","));
        kv.insert("method".to_string(), self.attack.method.name().to_string());
        kv.insert("epsilon".to_string(), format!("{:.6}", self.attack.epsilon));
        kv.insert("alpha".to_string(), format!("{:.6}", self.attack.alpha));
        kv.insert("iters".to_string(), self.attack.iters.to_string());
        kv.insert("mu".to_string(), format!("{:.3}", self.attack.mu));
        kv.insert("targeted".to_string(), self.attack.targeted.to_string());
        kv.insert("n".to_string(), self.eval_n.to_string());
        kv.insert("seed".to_string(), self.seed.to_string());
        if self.attack.method == AttackMethod::VmiFgsm {
            kv.insert("vmi_samples".to_string(), self.attack.vmi_samples.to_string());
            kv.insert("vmi_beta".to_string(), format!("{:.3}", self.attack.vmi_beta));
        }
        if let Some(d) = &self.attack.dim {
            kv.insert("dim".to_string(), format!("prob={:.2},canvas={}", d.prob, d.max_canvas));
        }
        if let Some(t) = &self.attack.tim {
            kv.insert("tim".to_string(), format!("kernel={},sigma={:.2}", t.kernel_size, t.sigma));
        }
        if let Some((p, grid)) = &self.sweep {
            kv.insert(
                "sweep".to_string(),
                format!("{p}:{}", grid.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")),
            );
        }
        if self.overrides != PolicyOverrides::default() {
            kv.insert("overrides".to_string(), format!("{:?}", self.overrides));
        }
        kv.into_iter().collect()
    }
}

/// Loaded models ready to run.
pub struct Bench {
    pub surrogate: (ModelDef, WeightStore),
    pub victims: Vec<(ModelDef, WeightStore)>,
    pub test: Dataset,
}

impl Bench {
    pub fn load(spec: &ExperimentSpec) -> Result<Self> {
        let sdef = build(&spec.surrogate_arch)?;
        let sweights = load_weights_for(&sdef, &spec.surrogate_weights)?;
        let mut victims = Vec::new();
        for (arch, path) in &spec.victims {
            let def = build(arch)?;
            let w = load_weights_for(&def, path)?;
            victims.push((def, w));
        }
        let (_, test) = Dataset::load_dir(&spec.data_dir)?;
        Ok(Self { surrogate: (sdef, sweights), victims, test })
    }
}

/// First `n` seeded-shuffled test images that the surrogate and every victim
/// classify correctly.
pub fn select_eval_set(bench: &Bench, n: usize, seed: u64) -> Result<Vec<usize>> {
    let mut candidates: Vec<usize> = (0..bench.test.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let mut selected = Vec::with_capacity(n);
    for chunk in candidates.chunks(256) {
        let ok: Vec<(usize, bool)> = chunk
            .par_iter()
            .map(|&i| {
                let verdict = (|| -> Result<bool> {
                    let (x, label) = bench.test.example(i)?;
                    if predict(&bench.surrogate.0, &bench.surrogate.1, &x)? != label {
                        return Ok(false);
                    }
                    for (def, store) in &bench.victims {
                        if predict(def, store, &x)? != label {
                            return Ok(false);
                        }
                    }
                    Ok(true)
                })();
                (i, verdict.unwrap_or(false))
            })
            .collect();
        for (i, keep) in ok {
            if keep {
                selected.push(i);
                if selected.len() == n {
                    return Ok(selected);
                }
            }
        }
    }
    Err(Error::EvalPool { requested: n, available: selected.len() })
}

/// One report row: per-victim success rates (%) plus the surrogate
/// white-box rate.
#[derive(Debug, Clone)]
pub struct TransferRow {
    pub policy: String,
    pub sweep_value: Option<f32>,
    pub victim_rates: Vec<f32>,
    pub whitebox: f32,
}

impl TransferRow {
    pub fn mean_victim_rate(&self) -> f32 {
        if self.victim_rates.is_empty() {
            return 0.0;
        }
        self.victim_rates.iter().sum::<f32>() / self.victim_rates.len() as f32
    }
}

#[derive(Debug, Clone)]
pub struct TransferReport {
    pub victim_names: Vec<String>,
    pub rows: Vec<TransferRow>,
    pub clean_accuracies: Vec<(String, f32)>,
    pub config_echo: Vec<(String, String)>,
    pub seed: u64,
    pub eval_count: usize,
    pub sweep_param: Option<String>,
    pub wall_time: Duration,
}

impl TransferReport {
    /// Wide CSV: `# key=value` echo lines, a header of victim names plus
    /// `surrogate_whitebox`, one row per (policy, sweep value). Rates carry
    /// two decimals. Wall time stays out so reruns are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.config_echo {
            s.push_str(&format!("# {k}={v}\n"));
        }
        for (name, acc) in &self.clean_accuracies {
            s.push_str(&format!("# clean_accuracy_{name}={:.2}\n", acc * 100.0));
        }
        s.push_str(&format!("# eval_count={}\n", self.eval_count));
        let mut header = vec!["policy".to_string()];
        if self.sweep_param.is_some() {
            header.insert(0, "sweep_value".into());
        }
        header.extend(self.victim_names.clone());
        header.push("surrogate_whitebox".into());
        s.push_str(&header.join(","));
        s.push('\n');
        for row in &self.rows {
            let mut cells = Vec::new();
            if self.sweep_param.is_some() {
                cells.push(format!("{}", row.sweep_value.unwrap_or(f32::NAN)));
            }
            cells.push(row.policy.clone());
            for r in &row.victim_rates {
                cells.push(format!("{r:.2}"));
            }
            cells.push(format!("{:.2}", row.whitebox));
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    /// Long CSV for sweeps: one (sweep value, policy, victim, rate) row per
    /// measurement.
    pub fn to_long_csv(&self) -> String {
        let param = self.sweep_param.clone().unwrap_or_else(|| "value".into());
        let mut s = String::new();
        for (k, v) in &self.config_echo {
            s.push_str(&format!("# {k}={v}\n"));
        }
        s.push_str("param,value,policy,victim,rate\n");
        for row in &self.rows {
            let val = row.sweep_value.map(|v| format!("{v}")).unwrap_or_default();
            for (name, rate) in self.victim_names.iter().zip(&row.victim_rates) {
                s.push_str(&format!("{param},{val},{},{name},{rate:.2}\n", row.policy));
            }
            s.push_str(&format!("{param},{val},{},surrogate_whitebox,{:.2}\n", row.policy, row.whitebox));
        }
        s
    }

    pub fn write(&self, path: &Path, long_format: bool) -> Result<()> {
        let csv = if long_format { self.to_long_csv() } else { self.to_csv() };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, csv)?;
        Ok(())
    }

    pub fn row(&self, policy: &str) -> Option<&TransferRow> {
        self.rows.iter().find(|r| r.policy == policy)
    }
}

/// Attacks every eval image under one policy and scores every victim.
fn run_policy_rows(
    bench: &Bench,
    eval: &[usize],
    policy: &Policy,
    sweep_value: Option<f32>,
    attack_spec: &AttackSpec,
    seed: u64,
) -> Result<TransferRow> {
    let (sdef, sweights) = &bench.surrogate;
    let per_image: Vec<Result<(Vec<bool>, bool)>> = eval
        .par_iter()
        .map(|&idx| {
            let (x, label) = bench.test.example(idx)?;
            let image_seed = seed ^ idx as u64;
            let loss = if attack_spec.targeted {
                let mut trng = ChaCha8Rng::seed_from_u64(image_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let offset = trng.random_range(1..sdef.num_classes);
                LossKind::NegTargetLogit { target: (label + offset) % sdef.num_classes }
            } else {
                LossKind::CrossEntropy { label }
            };
            let cfg = attack_spec.instantiate(loss, image_seed);
            let result = attack(sdef, sweights, &policy.attack_policy, &x, &cfg)?;
            let whitebox = if attack_spec.targeted {
                result.final_pred == loss.label()
            } else {
                result.final_pred != label
            };
            let mut victim_hits = Vec::with_capacity(bench.victims.len());
            for (vdef, vweights) in &bench.victims {
                let pred = predict(vdef, vweights, &result.adv)?;
                victim_hits.push(if attack_spec.targeted { pred == loss.label() } else { pred != label });
            }
            Ok((victim_hits, whitebox))
        })
        .collect();

    let mut victim_counts = vec![0usize; bench.victims.len()];
    let mut whitebox_count = 0usize;
    let mut total = 0usize;
    for r in per_image {
        let (hits, wb) = r?;
        for (c, h) in victim_counts.iter_mut().zip(hits) {
            *c += h as usize;
        }
        whitebox_count += wb as usize;
        total += 1;
    }
    // accounting: successes + failures = eval size, per victim
    debug_assert_eq!(total, eval.len());
    let denom = total.max(1) as f32;
    Ok(TransferRow {
        policy: policy.name.clone(),
        sweep_value,
        victim_rates: victim_counts.iter().map(|&c| 100.0 * c as f32 / denom).collect(),
        whitebox: 100.0 * whitebox_count as f32 / denom,
    })
}

fn clean_accuracies(bench: &Bench) -> Vec<(String, f32)> {
    let mut out = vec![(
        format!("surrogate_{}", bench.surrogate.0.name),
        bench.surrogate.1.meta.clean_test_accuracy,
    )];
    for (def, store) in &bench.victims {
        out.push((def.name.clone(), store.meta.clean_test_accuracy));
    }
    out
}

/// Attacks the eval set under each policy in the spec and scores transfer.
pub fn run_transfer(spec: &ExperimentSpec) -> Result<TransferReport> {
    let start = Instant::now();
    let bench = Bench::load(spec)?;
    let eval = select_eval_set(&bench, spec.eval_n, spec.seed)?;
    let mut rows = Vec::new();
    for name in &spec.policies {
        let policy = preset(name, &bench.surrogate.0, &spec.overrides)?;
        rows.push(run_policy_rows(&bench, &eval, &policy, None, &spec.attack, spec.seed)?);
    }
    let report = TransferReport {
        victim_names: bench.victims.iter().map(|(d, _)| d.name.clone()).collect(),
        rows,
        clean_accuracies: clean_accuracies(&bench),
        config_echo: spec.echo(),
        seed: spec.seed,
        eval_count: eval.len(),
        sweep_param: None,
        wall_time: start.elapsed(),
    };
    if let Some(out) = &spec.out {
        report.write(out, false)?;
    }
    Ok(report)
}

/// Registered sweep parameters.
pub const SWEEP_PARAMS: &[&str] =
    &["mask_prob", "recover_relu", "recover_pool", "temperature", "relu_start"];

fn sweep_policy(param: &str, value: f32, def: &ModelDef, ovr: &PolicyOverrides) -> Result<Policy> {
    let mut o = ovr.clone();
    let base = match param {
        "mask_prob" => {
            o.mask_prob = Some(value);
            "vanilla"
        }
        "recover_relu" => {
            o.recover_prob = Some(value);
            "recover-relu"
        }
        "recover_pool" => {
            o.recover_prob = Some(value);
            "recover-pool"
        }
        "temperature" => {
            o.temperature = Some(value);
            "bpa"
        }
        "relu_start" => {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(Error::Config(format!("relu_start sweep needs integer grid, got {value}")));
            }
            o.relu_start = Some(value as usize);
            "bpa"
        }
        other => return Err(Error::UnknownSweep(other.to_string())),
    };
    let mut p = preset(base, def, &o)?;
    p.name = format!("{base}[{param}={value}]");
    Ok(p)
}

/// One transfer row per grid value, sharing the eval set and seeds so the
/// curve is comparable point to point.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<TransferReport> {
    let start = Instant::now();
    let (param, grid) =
        spec.sweep.clone().ok_or_else(|| Error::Config("sweep requires sweep_param and sweep_grid".into()))?;
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if !SWEEP_PARAMS.contains(&param.as_str()) {
        return Err(Error::UnknownSweep(param));
    }
    let bench = Bench::load(spec)?;
    let eval = select_eval_set(&bench, spec.eval_n, spec.seed)?;
    let mut rows = Vec::new();
    for &value in &grid {
        let policy = sweep_policy(&param, value, &bench.surrogate.0, &spec.overrides)?;
        rows.push(run_policy_rows(&bench, &eval, &policy, Some(value), &spec.attack, spec.seed)?);
    }
    let report = TransferReport {
        victim_names: bench.victims.iter().map(|(d, _)| d.name.clone()).collect(),
        rows,
        clean_accuracies: clean_accuracies(&bench),
        config_echo: spec.echo(),
        seed: spec.seed,
        eval_count: eval.len(),
        sweep_param: Some(param),
        wall_time: start.elapsed(),
    };
    if let Some(out) = &spec.out {
        report.write(out, true)?;
    }
    Ok(report)
}

/// Four shared-eval runs: {vanilla, relu-only, pool-only, both} from the
/// smoothed-backward preset.
pub fn run_ablation_grid(spec: &ExperimentSpec) -> Result<TransferReport> {
    let start = Instant::now();
    let bench = Bench::load(spec)?;
    let eval = select_eval_set(&bench, spec.eval_n, spec.seed)?;
    let def = &bench.surrogate.0;
    let full = preset("bpa", def, &spec.overrides)?;
    let mut cells = Vec::new();
    for (relu_on, pool_on) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut backward = BackwardPolicy::vanilla();
        if relu_on {
            backward.relu_rule = full.attack_policy.backward.relu_rule;
            backward.relu_start_index = full.attack_policy.backward.relu_start_index;
        }
        if pool_on {
            backward.pool_rule = full.attack_policy.backward.pool_rule;
        }
        let name = format!(
            "relu={},maxpool={}",
            if relu_on { "on" } else { "off" },
            if pool_on { "on" } else { "off" }
        );
        cells.push(Policy { name, attack_policy: AttackPolicy { backward, ghost_lambda: None } });
    }
    let mut rows = Vec::new();
    for policy in &cells {
        rows.push(run_policy_rows(&bench, &eval, policy, None, &spec.attack, spec.seed)?);
    }
    let mut echo = spec.echo();
    echo.push(("ablation_flags".to_string(), "relu on/off x maxpool on/off".to_string()));
    let report = TransferReport {
        victim_names: bench.victims.iter().map(|(d, _)| d.name.clone()).collect(),
        rows,
        clean_accuracies: clean_accuracies(&bench),
        config_echo: echo,
        seed: spec.seed,
        eval_count: eval.len(),
        sweep_param: None,
        wall_time: start.elapsed(),
    };
    if let Some(out) = &spec.out {
        report.write(out, false)?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct RelevanceRow {
    pub policy: String,
    pub mean: f64,
    pub stddev: f64,
}

#[derive(Debug, Clone)]
pub struct RelevanceReport {
    pub rows: Vec<RelevanceRow>,
    pub step: f32,
    pub image_count: usize,
    pub config_echo: Vec<(String, String)>,
    pub wall_time: Duration,
}

impl RelevanceReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.config_echo {
            s.push_str(&format!("# {k}={v}\n"));
        }
        s.push_str(&format!("# step={}\n# n_images={}\n", self.step, self.image_count));
        s.push_str("policy,mean_relevance,stddev\n");
        for row in &self.rows {
            s.push_str(&format!("{},{:.4},{:.4}\n", row.policy, row.mean, row.stddev));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn mean_of(&self, policy: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.policy == policy).map(|r| r.mean)
    }
}

/// Mean/stddev of the gradient-relevance quotient per policy over
/// surrogate-correct test images.
pub fn run_relevance(spec: &ExperimentSpec) -> Result<RelevanceReport> {
    let start = Instant::now();
    if spec.relevance_images == 0 {
        return Err(Error::Param("n_images must be positive".into()));
    }
    let bench = Bench::load(spec)?;
    let (sdef, sweights) = &bench.surrogate;
    // surrogate-correct filter only; victims play no role here
    let mut candidates: Vec<usize> = (0..bench.test.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    candidates.shuffle(&mut rng);
    let mut chosen = Vec::with_capacity(spec.relevance_images);
    for chunk in candidates.chunks(256) {
        let ok: Vec<(usize, bool)> = chunk
            .par_iter()
            .map(|&i| {
                let keep = bench
                    .test
                    .example(i)
                    .and_then(|(x, label)| Ok(predict(sdef, sweights, &x)? == label))
                    .unwrap_or(false);
                (i, keep)
            })
            .collect();
        for (i, keep) in ok {
            if keep {
                chosen.push(i);
                if chosen.len() == spec.relevance_images {
                    break;
                }
            }
        }
        if chosen.len() == spec.relevance_images {
            break;
        }
    }
    if chosen.len() < spec.relevance_images {
        return Err(Error::EvalPool { requested: spec.relevance_images, available: chosen.len() });
    }

    let mut rows = Vec::new();
    for name in &spec.policies {
        let policy = preset(name, sdef, &spec.overrides)?;
        let values: Vec<Result<f64>> = chosen
            .par_iter()
            .map(|&idx| {
                let (x, label) = bench.test.example(idx)?;
                relevance(
                    sdef,
                    sweights,
                    &policy.attack_policy,
                    &x,
                    &LossKind::CrossEntropy { label },
                    spec.relevance_step,
                    spec.seed ^ idx as u64,
                )
            })
            .collect();
        let mut vals = Vec::with_capacity(values.len());
        for v in values {
            vals.push(v?);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        rows.push(RelevanceRow { policy: name.clone(), mean, stddev: var.sqrt() });
    }
    let report = RelevanceReport {
        rows,
        step: spec.relevance_step,
        image_count: chosen.len(),
        config_echo: spec.echo(),
        wall_time: start.elapsed(),
    };
    if let Some(out) = &spec.out {
        report.write(out)?;
    }
    Ok(report)
}
