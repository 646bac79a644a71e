//! Self-supervised training on the negative objective, and evaluation.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::channel::{derive_seed, ChannelSample, Dataset};
use crate::error::{Error, Result};
use crate::feasibility::{self, Dc3Config, HopContext, Mode};
use crate::models::{self, Arch, Model, ModelSpec};
use crate::problem::graph::{self, BeamNodes, InstanceNodes};
use crate::problem::{self, Beamformer, ProblemInstance, ViolationReport, FEASIBILITY_TOL};
use crate::wmmse;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Penalty,
    Dc3,
    Hop,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Penalty, Method::Dc3, Method::Hop];

    pub fn name(self) -> &'static str {
        match self {
            Method::Penalty => "penalty",
            Method::Dc3 => "dc3",
            Method::Hop => "hop",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "penalty" => Ok(Method::Penalty),
            "dc3" => Ok(Method::Dc3),
            "hop" => Ok(Method::Hop),
            _ => Err(Error::InvalidParam(format!("unknown method '{s}' (expected penalty, dc3 or hop)"))),
        }
    }
}

fn default_epochs() -> usize {
    300
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_lambda() -> f64 {
    feasibility::DEFAULT_LAMBDA
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_delta() -> f64 {
    feasibility::DEFAULT_DELTA
}
fn default_seed() -> u64 {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: Arch,
    pub method: Method,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Weight of the violation term on the corrected output (dc3 only);
    /// `None` means `lambda`.
    #[serde(default)]
    pub lambda_soft: Option<f64>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub dc3: Dc3Config,
    #[serde(default = "default_delta")]
    pub hop_delta: f64,
    /// Architecture override; defaults to the standard sizes for the dataset.
    #[serde(default)]
    pub model: Option<ModelSpec>,
}

impl TrainConfig {
    pub fn new(arch: Arch, method: Method) -> Self {
        Self {
            arch,
            method,
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            lambda: default_lambda(),
            lambda_soft: None,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            seed: default_seed(),
            dc3: Dc3Config::default(),
            hop_delta: default_delta(),
            model: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lambda >= 0.0) || self.lambda_soft.is_some_and(|l| !(l >= 0.0)) {
            return bad("penalty weights must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad(format!("invalid optimizer constants beta1={} beta2={} eps={}", self.beta1, self.beta2, self.eps));
        }
        if let Some(spec) = &self.model {
            if spec.arch() != self.arch {
                return bad(format!("model spec is {} but arch is {}", spec.arch().name(), self.arch.name()));
            }
        }
        self.dc3.validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            method: self.method,
            lambda: self.lambda,
            lambda_soft: self.lambda_soft.unwrap_or(self.lambda),
            dc3: self.dc3,
            hop_delta: self.hop_delta,
        }
    }

    pub fn model_spec(&self, k: usize, n: usize) -> ModelSpec {
        self.model.clone().unwrap_or_else(|| ModelSpec::default_for(self.arch, k, n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub method: Method,
    pub lambda: f64,
    pub lambda_soft: f64,
    pub dc3: Dc3Config,
    pub hop_delta: f64,
}

/// What a generator hands to the constraint layer.
#[derive(Debug, Clone, Copy)]
pub enum Generated {
    /// Flat `[2NK]` network output.
    Raw(NodeId),
    /// Beamformer planes (deep unfolding).
    Beam(BeamNodes),
}

/// Applies the method's constraint layer and returns `(loss, final beamformer)`.
///
/// penalty: `-wsr(V) + lambda sum relu(g)^2` on the raw beamformer.
/// dc3: the same form on the corrected beamformer, weight `lambda_soft`.
/// hop: `-wsr` of the mapped beamformer.
pub fn loss_for(
    tape: &mut Tape,
    cfg: &LossConfig,
    inst: &ProblemInstance,
    h: &InstanceNodes,
    out: Generated,
    ctx: Option<&HopContext>,
    mode: Mode,
) -> Result<(NodeId, BeamNodes)> {
    let (n, k) = (inst.n(), inst.k());
    let as_beam = |tape: &mut Tape, out: Generated| -> Result<BeamNodes> {
        match out {
            Generated::Raw(raw) => graph::split_raw(tape, raw, n, k),
            Generated::Beam(b) => Ok(b),
        }
    };
    match cfg.method {
        Method::Penalty => {
            let beam = as_beam(tape, out)?;
            Ok((feasibility::penalty_loss(tape, inst, h, beam, cfg.lambda)?, beam))
        }
        Method::Dc3 => {
            let beam = as_beam(tape, out)?;
            let fixed = feasibility::dc3_correct(tape, inst, h, beam, &cfg.dc3, mode)?;
            Ok((feasibility::penalty_loss(tape, inst, h, fixed, cfg.lambda_soft)?, fixed))
        }
        Method::Hop => {
            let ctx = ctx.ok_or_else(|| Error::InvalidParam("hop requires an interior-point context".into()))?;
            let beam = match out {
                Generated::Raw(raw) => feasibility::hop_map(tape, inst, ctx, raw)?,
                Generated::Beam(b) => feasibility::hop_radial(tape, inst, ctx, b)?,
            };
            let w = graph::wsr(tape, inst, h, beam)?;
            Ok((tape.neg(w), beam))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// Bias-corrected adaptive-moment update.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, hp: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidParam(format!(
            "adam_step got {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", &[p.shape(), g.shape()]));
        }
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            md[i] = hp.beta1 * md[i] + (1.0 - hp.beta1) * gd[i];
            vd[i] = hp.beta2 * vd[i] + (1.0 - hp.beta2) * gd[i] * gd[i];
            let mhat = md[i] / c1;
            let vhat = vd[i] / c2;
            pd[i] -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub wsr: f64,
    /// Mean of `max(0, worst constraint)`.
    pub violation: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    /// Equality ignoring wall-clock columns.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.loss.to_bits() == b.loss.to_bits()
                    && a.wsr.to_bits() == b.wsr.to_bits()
                    && a.violation.to_bits() == b.violation.to_bits()
            })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,wsr,violation,seconds\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.loss, e.wsr, e.violation, e.seconds));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub model: Model,
    /// Parameters at the epoch with the lowest mean training loss.
    pub best: Model,
    pub best_epoch: usize,
    pub history: TrainHistory,
    pub steps: u64,
}

/// Interior points keyed by sample seed.
pub type HopContexts = HashMap<u64, HopContext>;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ContextCache {
    fingerprint: String,
    delta: f64,
    contexts: Vec<(u64, HopContext)>,
}

/// Builds HoP contexts for `samples` (in parallel), reusing and extending a
/// sidecar cache file when given.
pub fn hop_contexts(ds: &Dataset, samples: &[ChannelSample], delta: f64, cache: Option<&Path>) -> Result<HopContexts> {
    let mut map = HopContexts::new();
    if let Some(path) = cache.filter(|p| p.exists()) {
        let c: ContextCache = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if c.fingerprint == ds.header.fingerprint && c.delta == delta {
            map.extend(c.contexts);
        }
    }
    let todo: Vec<&ChannelSample> = samples.iter().filter(|s| !map.contains_key(&s.sample_seed)).collect();
    if todo.is_empty() {
        return Ok(map);
    }
    let built: Vec<Result<(u64, HopContext)>> = todo
        .par_iter()
        .map(|s| {
            let inst = ds.instance(s)?;
            feasibility::hop_build_context(&inst, delta)
                .map(|c| (s.sample_seed, c))
                .map_err(|e| Error::Infeasible(format!("sample seed {}: {e}", s.sample_seed)))
        })
        .collect();
    for b in built {
        let (seed, ctx) = b?;
        map.insert(seed, ctx);
    }
    if let Some(path) = cache {
        let mut contexts: Vec<(u64, HopContext)> = map.iter().map(|(k, v)| (*k, v.clone())).collect();
        contexts.sort_by_key(|c| c.0);
        let c = ContextCache { fingerprint: ds.header.fingerprint.clone(), delta, contexts };
        std::fs::write(path, serde_json::to_string(&c)?)?;
    }
    Ok(map)
}

struct Prepared {
    inst: ProblemInstance,
    features: Vec<f64>,
    seed: u64,
}

fn prepare(ds: &Dataset, samples: &[ChannelSample]) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            let inst = ds.instance(s)?;
            Ok(Prepared { features: models::featurize(&inst), inst, seed: s.sample_seed })
        })
        .collect()
}

/// Generator outputs for a batch of samples on one tape.
fn generate(tape: &mut Tape, model: &Model, params: &[NodeId], batch: &[&Prepared]) -> Result<Vec<(InstanceNodes, Generated)>> {
    match model.arch() {
        Arch::Mlp => {
            let f = batch[0].features.len();
            let mut x = Vec::with_capacity(batch.len() * f);
            for p in batch {
                x.extend_from_slice(&p.features);
            }
            let x = tape.constant(Tensor::matrix(batch.len(), f, x)?);
            let out = models::mlp_forward(tape, params, x)?;
            let width = tape.shape(out)[1];
            batch
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let h = InstanceNodes::new(tape, &p.inst);
                    let row = tape.slice(out, 0, i, i + 1)?;
                    Ok((h, Generated::Raw(tape.reshape(row, &[width])?)))
                })
                .collect()
        }
        Arch::Du => batch
            .iter()
            .map(|p| {
                let h = InstanceNodes::new(tape, &p.inst);
                let beam = models::du_forward(tape, params, &p.inst, &h)?;
                Ok((h, Generated::Beam(beam)))
            })
            .collect(),
    }
}

/// Trains on the dataset's train split.
pub fn train(ds: &Dataset, cfg: &TrainConfig, contexts: Option<&HopContexts>) -> Result<TrainOutput> {
    cfg.validate()?;
    let samples = ds.train();
    if samples.is_empty() {
        return Err(Error::InvalidParam("training split is empty".into()));
    }
    if cfg.batch_size > samples.len() {
        return Err(Error::InvalidParam(format!("batch_size {} exceeds the {} training samples", cfg.batch_size, samples.len())));
    }
    let (k, n) = (ds.header.k, ds.header.n);
    let spec = cfg.model_spec(k, n);
    spec.check_dims(k, n)?;
    let mut model = Model::init(spec, cfg.seed)?;
    let owned;
    let contexts = match (cfg.method, contexts) {
        (Method::Hop, None) => {
            owned = hop_contexts(ds, samples, cfg.hop_delta, None)?;
            Some(&owned)
        }
        (_, c) => c,
    };
    let data = prepare(ds, samples)?;
    let loss_cfg = cfg.loss_config();
    let hp = AdamConfig { lr: cfg.learning_rate, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps };
    let mut adam = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, model.clone(), 0);

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut wsr_sum, mut viol_sum) = (0.0, 0.0, 0.0);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
            let diverged = |detail: String| Error::Diverged { epoch, batch: bi, detail };
            let mut tape = Tape::new();
            let params = model.register(&mut tape);
            let outs = generate(&mut tape, &model, &params, &batch).map_err(|e| diverged(e.to_string()))?;
            let mut losses = Vec::with_capacity(batch.len());
            for (p, (h, out)) in batch.iter().zip(outs) {
                let ctx = contexts.and_then(|c| c.get(&p.seed));
                let (loss, beam) = loss_for(&mut tape, &loss_cfg, &p.inst, &h, out, ctx, Mode::Train)
                    .map_err(|e| diverged(format!("sample seed {}: {e}", p.seed)))?;
                let v = graph::to_beamformer(&tape, beam);
                wsr_sum += problem::wsr(&p.inst, &v);
                viol_sum += problem::violation_report(&p.inst, &v, FEASIBILITY_TOL).worst.max(0.0);
                losses.push(loss);
            }
            let stacked = tape.concat(&losses, 0)?;
            let total = tape.sum(stacked);
            let mean = tape.scale(total, 1.0 / batch.len() as f64);
            let lv = tape.scalar(mean);
            if !lv.is_finite() {
                return Err(diverged(format!("loss = {lv}")));
            }
            loss_sum += tape.scalar(total);
            let grads = tape.backward(mean)?.into_tensors();
            if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
                return Err(diverged(format!("non-finite gradient in parameter tensor {bad}")));
            }
            adam_step(&mut model.params, &grads, &mut adam, &hp)?;
        }
        let m = data.len() as f64;
        let stats = EpochStats {
            epoch,
            loss: loss_sum / m,
            wsr: wsr_sum / m,
            violation: viol_sum / m,
            seconds: start.elapsed().as_secs_f64(),
        };
        if stats.loss < best.0 {
            best = (stats.loss, model.clone(), epoch);
        }
        history.epochs.push(stats);
    }
    let best_model = if cfg.epochs == 0 { model.clone() } else { best.1 };
    Ok(TrainOutput { model, best: best_model, best_epoch: best.2, history, steps: adam.t })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub seed: u64,
    pub wsr: f64,
    pub report: ViolationReport,
    /// Final beamformer in raw layout.
    pub output: Vec<f64>,
    pub infer_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mean_wsr: f64,
    pub violation_rate: f64,
    pub mean_worst_g: f64,
    pub infer_ms: f64,
    pub samples: Vec<SampleResult>,
}

impl Metrics {
    /// Aggregates per-sample results.
    pub fn from_samples(samples: Vec<SampleResult>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidParam("no samples to aggregate".into()));
        }
        let m = samples.len() as f64;
        Ok(Self {
            mean_wsr: samples.iter().map(|s| s.wsr).sum::<f64>() / m,
            violation_rate: samples.iter().filter(|s| !s.report.feasible).count() as f64 / m,
            mean_worst_g: samples.iter().map(|s| s.report.worst).sum::<f64>() / m,
            infer_ms: samples.iter().map(|s| s.infer_ms).sum::<f64>() / m,
            samples,
        })
    }
}

fn sample_result(inst: &ProblemInstance, seed: u64, v: Beamformer, ms: f64) -> SampleResult {
    SampleResult {
        seed,
        wsr: problem::wsr(inst, &v),
        report: problem::violation_report(inst, &v, FEASIBILITY_TOL),
        output: v.to_raw(),
        infer_ms: ms,
    }
}

/// Inference on one instance: forward pass plus the method's test-mode layer.
pub fn infer(model: &Model, cfg: &LossConfig, inst: &ProblemInstance, ctx: Option<&HopContext>) -> Result<Beamformer> {
    let mut tape = Tape::new();
    let params = model.load_constants(&mut tape);
    let p = Prepared { features: models::featurize(inst), inst: inst.clone(), seed: inst.channel.sample_seed };
    let (h, out) = generate(&mut tape, model, &params, &[&p])?.pop().expect("one sample");
    let (_, beam) = loss_for(&mut tape, cfg, inst, &h, out, ctx, Mode::Test)?;
    Ok(graph::to_beamformer(&tape, beam))
}

/// Evaluates on the test split. Samples run sequentially so timings are
/// not contended.
pub fn evaluate(model: &Model, ds: &Dataset, cfg: &LossConfig, contexts: Option<&HopContexts>) -> Result<Metrics> {
    let samples = ds.test();
    if samples.is_empty() {
        return Err(Error::InvalidParam("test split is empty".into()));
    }
    model.spec.check_dims(ds.header.k, ds.header.n)?;
    let owned;
    let contexts = match (cfg.method, contexts) {
        (Method::Hop, None) => {
            owned = hop_contexts(ds, samples, cfg.hop_delta, None)?;
            Some(&owned)
        }
        (_, c) => c,
    };
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let inst = ds.instance(s)?;
        let ctx = contexts.and_then(|c| c.get(&s.sample_seed));
        let start = Instant::now();
        let v = infer(model, cfg, &inst, ctx)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        out.push(sample_result(&inst, s.sample_seed, v, ms));
    }
    Metrics::from_samples(out)
}

/// The repaired WMMSE baseline, evaluated the same way.
pub fn evaluate_baseline(ds: &Dataset) -> Result<Metrics> {
    let samples = ds.test();
    if samples.is_empty() {
        return Err(Error::InvalidParam("test split is empty".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let inst = ds.instance(s)?;
        let start = Instant::now();
        let sol = wmmse::baseline(&inst)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        out.push(sample_result(&inst, s.sample_seed, sol.beamformer, ms));
    }
    Metrics::from_samples(out)
}
