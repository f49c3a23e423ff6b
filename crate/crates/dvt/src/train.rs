//! Adam optimization and the three training regimes — semi-supervised on a
//! single domain, freeze-and-transfer onto a target domain, and joint
//! multi-task training — plus cycle-consistency early stopping and ensemble
//! prediction.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample as index_sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distributions::{sample_gumbel, sample_standard_normal};
use crate::error::{Error, Result};
use crate::losses::{loss_domain, loss_dvt, DomainInput, Hyper, SupInput, UnsupInput};
use crate::metrics::{argmax_rows, unweighted_mean_f1};
use crate::model::DvtModel;
use crate::rng::{salt, stream};
use crate::tape::Tape;
use crate::tensor::Tensor;

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    SemiSupervised,
    Transfer,
    MultiTask,
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semi_supervised" => Ok(Regime::SemiSupervised),
            "transfer" => Ok(Regime::Transfer),
            "multi_task" => Ok(Regime::MultiTask),
            other => Err(Error::Config(format!(
                "unknown regime '{}' (expected semi_supervised, transfer, or multi_task)",
                other
            ))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::SemiSupervised => "semi_supervised",
            Regime::Transfer => "transfer",
            Regime::MultiTask => "multi_task",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EarlyStop {
    Off,
    /// Stop when the cycle-consistency score stops improving: evaluate every
    /// `eval_every` steps, give up after `patience` evaluations without a
    /// new best, and restore the best-scoring parameters.
    CycleConsistency { patience: usize, eval_every: usize },
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop::Off
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub weights: Hyper,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Maximum number of optimization steps (batches).
    pub steps: usize,
    /// When the supervised pool is at most this large, every step uses the
    /// whole pool; otherwise each step samples this many without replacement.
    pub sup_batch_size: usize,
    pub unsup_batch_size: usize,
    pub seed: u64,
    pub early_stop: EarlyStop,
    pub ensemble_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::SemiSupervised,
            weights: Hyper::default(),
            learning_rate: 0.005,
            beta1: 0.5,
            beta2: 0.5,
            epsilon: 0.001,
            steps: 15_000,
            sup_batch_size: 512,
            unsup_batch_size: 100,
            seed: 0,
            early_stop: EarlyStop::Off,
            ensemble_size: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.sup_batch_size == 0 || self.unsup_batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{} must be in [0, 1), got {}", name, b)));
            }
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be >= 1".into()));
        }
        if let EarlyStop::CycleConsistency { patience, eval_every } = self.early_stop {
            if patience == 0 || eval_every == 0 {
                return Err(Error::Config("early-stop patience and eval_every must be >= 1".into()));
            }
        }
        self.weights.validate()
    }
}

// ── Adam ────────────────────────────────────────────────────────────────

/// First and second moments per scalar parameter, plus the global step
/// counter used for bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn for_model(model: &DvtModel) -> Self {
        Self::zeros(model.param_vector().len())
    }
}

#[inline]
fn adam_update(
    theta: &mut f64,
    m: &mut f64,
    v: &mut f64,
    g: f64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    bc1: f64,
    bc2: f64,
) {
    *m = beta1 * *m + (1.0 - beta1) * g;
    *v = beta2 * *v + (1.0 - beta2) * g * g;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    *theta -= lr * m_hat / (v_hat.sqrt() + epsilon);
}

/// One Adam step with bias correction over a flat parameter vector:
/// m ← β₁m + (1−β₁)g, v ← β₂v + (1−β₂)g², θ ← θ − lr·m̂/(√v̂ + ε).
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape {
            op: "adam_step",
            detail: format!(
                "{} params vs {} grads vs state of {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        adam_update(
            &mut params[i], &mut state.m[i], &mut state.v[i], grads[i], lr, beta1, beta2, epsilon,
            bc1, bc2,
        );
    }
    Ok(())
}

/// Adam step over a model's parameters in canonical order. `grads[i]` is the
/// gradient of parameter tensor i (aligned with the registration order), or
/// None when the parameter did not take part in the step; `frozen[i]` pins
/// parameter i entirely. Skipped parameters keep their moments untouched
/// while the global step counter still advances.
pub fn adam_step_model(
    model: &mut DvtModel,
    grads: &[Option<Tensor>],
    frozen: &[bool],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let mut idx = 0usize;
    let mut offset = 0usize;
    let mut failure: Option<Error> = None;
    model.visit_params_mut(|p| {
        if failure.is_some() {
            return;
        }
        if idx >= grads.len() || idx >= frozen.len() {
            failure = Some(Error::Shape {
                op: "adam_step",
                detail: format!("gradient/freeze lists shorter than parameter list ({})", idx),
            });
            return;
        }
        let n = p.len();
        if !frozen[idx] {
            if let Some(g) = &grads[idx] {
                if g.shape() != p.shape() {
                    failure = Some(Error::Shape {
                        op: "adam_step",
                        detail: format!(
                            "parameter {} is {:?} but gradient is {:?}",
                            idx,
                            p.shape(),
                            g.shape()
                        ),
                    });
                    return;
                }
                let theta = p.data_mut();
                let gd = g.data();
                for j in 0..n {
                    adam_update(
                        &mut theta[j],
                        &mut state.m[offset + j],
                        &mut state.v[offset + j],
                        gd[j],
                        cfg.learning_rate,
                        cfg.beta1,
                        cfg.beta2,
                        cfg.epsilon,
                        bc1,
                        bc2,
                    );
                }
            }
        }
        idx += 1;
        offset += n;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if offset != state.m.len() {
        return Err(Error::Shape {
            op: "adam_step",
            detail: format!("state holds {} scalars, model has {}", state.m.len(), offset),
        });
    }
    Ok(())
}

// ── Batching ────────────────────────────────────────────────────────────

/// The four per-domain noise/sampling streams. Each purpose gets its own
/// generator so adding or removing one consumer never shifts another's draws.
struct DomainStreams {
    sup: ChaCha8Rng,
    unsup: ChaCha8Rng,
    eps: ChaCha8Rng,
    gumbel: ChaCha8Rng,
}

impl DomainStreams {
    fn new(seed: u64, di: usize) -> Self {
        let off = salt::DOMAIN_STRIDE * di as u64;
        DomainStreams {
            sup: stream(seed, salt::SUP_BATCH + off),
            unsup: stream(seed, salt::UNSUP_BATCH + off),
            eps: stream(seed, salt::EPS + off),
            gumbel: stream(seed, salt::GUMBEL + off),
        }
    }
}

fn draw_indices(pool: &[usize], want: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.len() <= want {
        pool.to_vec()
    } else {
        index_sample(rng, pool.len(), want).iter().map(|i| pool[i]).collect()
    }
}

/// One step's worth of batch data for one domain. Owns its tensors so the
/// borrowed loss inputs can point into it.
struct StepBatch {
    sup: Option<(Tensor, Vec<usize>, Tensor)>,
    unsup: Option<(Tensor, Tensor, Tensor)>,
}

impl StepBatch {
    fn input<'a>(&'a self, di: usize) -> DomainInput<'a> {
        DomainInput {
            di,
            sup: self.sup.as_ref().map(|(x, y, eps)| SupInput { x, y, eps }),
            unsup: self.unsup.as_ref().map(|(x, eps, g)| UnsupInput::new(x, eps, g)),
        }
    }
}

/// Draw the supervised and unsupervised batches one domain needs for one
/// step. Terms with zero weight draw nothing, so their data and noise
/// streams are never consumed.
fn draw_batch(
    ds: &Dataset,
    model: &DvtModel,
    cfg: &TrainConfig,
    streams: &mut DomainStreams,
) -> Result<StepBatch> {
    let latent = model.arch.latent_dim;
    let k = model.arch.class_count;
    let w = &cfg.weights;

    let sup = if w.gamma < 1.0 || w.rho > 0.0 {
        let pool = ds.supervised_indices();
        if pool.is_empty() {
            return Err(Error::Data(format!(
                "domain '{}' has no supervised samples",
                ds.domain_id
            )));
        }
        let idx = draw_indices(&pool, cfg.sup_batch_size, &mut streams.sup);
        let x = ds.x.take_rows(&idx);
        let y: Vec<usize> = idx
            .iter()
            .map(|&i| ds.labels[i].expect("supervised rows carry labels"))
            .collect();
        let eps = sample_standard_normal(&mut streams.eps, idx.len(), latent);
        Some((x, y, eps))
    } else {
        None
    };

    let unsup = if w.gamma > 0.0 {
        let pool = ds.unsupervised_indices();
        if pool.is_empty() {
            None
        } else {
            let idx = draw_indices(&pool, cfg.unsup_batch_size, &mut streams.unsup);
            let x = ds.x.take_rows(&idx);
            let eps = sample_standard_normal(&mut streams.eps, idx.len(), latent);
            let g = sample_gumbel(&mut streams.gumbel, idx.len(), k);
            Some((x, eps, g))
        }
    } else {
        None
    };

    Ok(StepBatch { sup, unsup })
}

// ── Traces ──────────────────────────────────────────────────────────────

/// One optimization step's record. `elapsed_ms` is wall clock and is
/// excluded from the CSV and from every determinism comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub supervised: f64,
    pub unsupervised: f64,
    pub classification: f64,
    pub cycle: Option<f64>,
    pub elapsed_ms: f64,
}

/// Write a trace as CSV: step, total, components, optional cycle score. The
/// output is fully deterministic (wall-clock timing stays in memory only).
pub fn write_trace_csv(rows: &[TraceRow], path: &Path) -> Result<()> {
    let mut out = String::from("step,total,supervised,unsupervised,classification,cycle\n");
    for r in rows {
        let cycle = r.cycle.map(|c| c.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.total, r.supervised, r.unsupervised, r.classification, cycle
        ));
    }
    crate::ioutil::write_atomic(path, out.as_bytes())
}

// ── Core loop ───────────────────────────────────────────────────────────

struct DomainRun<'a> {
    ds: &'a Dataset,
    di: usize,
    streams: DomainStreams,
}

/// Shared optimization loop. `sides` carries one entry per participating
/// domain; `eta` mixes exactly two sides (source first) and must be 1 for a
/// single supervised-side run. `frozen` pins parameters (transfer).
fn run_loop(
    mut model: DvtModel,
    mut sides: Vec<DomainRun<'_>>,
    eta: f64,
    frozen: &[bool],
    cfg: &TrainConfig,
    cycle_target: Option<&str>,
) -> Result<(DvtModel, Vec<TraceRow>)> {
    cfg.validate()?;
    let started = Instant::now();
    let mut state = AdamState::for_model(&model);
    let mut trace = Vec::with_capacity(cfg.steps);

    let mut best_cycle = f64::NEG_INFINITY;
    let mut best_params: Option<Vec<f64>> = None;
    let mut evals_since_best = 0usize;

    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let nodes = model.register(&mut tape)?;

        let mut batches = Vec::with_capacity(sides.len());
        for side in sides.iter_mut() {
            batches.push(draw_batch(side.ds, &model, cfg, &mut side.streams)?);
        }

        let mut totals = Vec::with_capacity(sides.len());
        let mut components = [0.0f64; 3];
        for (side, batch) in sides.iter().zip(&batches) {
            let terms = loss_domain(&mut tape, &model, &nodes, &batch.input(side.di), &cfg.weights)?;
            let weight = match (sides.len(), totals.len()) {
                (1, _) => 1.0,
                (_, 0) => eta,
                _ => 1.0 - eta,
            };
            for (slot, part) in
                [terms.supervised, terms.unsupervised, terms.classification].iter().enumerate()
            {
                if let Some(n) = part {
                    components[slot] += weight * tape.value(*n)[0];
                }
            }
            totals.push(terms.total);
        }
        let objective = match totals.len() {
            1 => {
                if eta == 1.0 {
                    loss_dvt(&mut tape, Some(totals[0]), None, 1.0)?
                } else {
                    loss_dvt(&mut tape, None, Some(totals[0]), 0.0)?
                }
            }
            2 => loss_dvt(&mut tape, Some(totals[0]), Some(totals[1]), eta)?,
            n => {
                return Err(Error::Invalid(format!("expected 1 or 2 objective sides, got {}", n)))
            }
        };

        let mut grads = tape.backward(objective)?;
        let grad_list: Vec<Option<Tensor>> =
            nodes.flat.iter().map(|&n| grads.take(n)).collect();
        let total_value = tape.value(objective)[0];
        drop(tape);
        adam_step_model(&mut model, &grad_list, frozen, &mut state, cfg)?;

        let mut cycle = None;
        if let (EarlyStop::CycleConsistency { patience, eval_every }, Some(target)) =
            (cfg.early_stop, cycle_target)
        {
            if (step + 1) % eval_every == 0 || step + 1 == cfg.steps {
                let score = cycle_consistency_score(&model, sides[0].ds, target)?;
                cycle = Some(score);
                if score > best_cycle {
                    best_cycle = score;
                    best_params = Some(model.param_vector());
                    evals_since_best = 0;
                } else {
                    evals_since_best += 1;
                }
                if evals_since_best >= patience {
                    trace.push(TraceRow {
                        step,
                        total: total_value,
                        supervised: components[0],
                        unsupervised: components[1],
                        classification: components[2],
                        cycle,
                        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
                    });
                    break;
                }
            }
        }

        trace.push(TraceRow {
            step,
            total: total_value,
            supervised: components[0],
            unsupervised: components[1],
            classification: components[2],
            cycle,
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    if let Some(best) = best_params {
        model.set_param_vector(&best)?;
    }
    Ok((model, trace))
}

// ── Regimes ─────────────────────────────────────────────────────────────

/// Train one domain on its own objective. The dataset's domain must exist in
/// the model and must contain at least one supervised sample.
pub fn train_semi_supervised(
    model: DvtModel,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(DvtModel, Vec<TraceRow>)> {
    cfg.validate()?;
    ds.validate()?;
    if matches!(cfg.early_stop, EarlyStop::CycleConsistency { .. }) {
        return Err(Error::Config(
            "cycle-consistency early stopping needs a source and a target domain; \
             it applies to the multi_task regime only"
                .into(),
        ));
    }
    let di = model.domain_index(&ds.domain_id)?;
    if ds.supervised_indices().is_empty() {
        return Err(Error::Data(format!(
            "domain '{}' has no supervised samples; the classifier is untrainable",
            ds.domain_id
        )));
    }
    let sides = vec![DomainRun { ds, di, streams: DomainStreams::new(cfg.seed, di) }];
    let frozen = vec![false; model.shared_mask().len()];
    run_loop(model, sides, 1.0, &frozen, cfg, None)
}

/// Freeze every shared parameter of an already-trained model and fit the
/// target domain's own parameters on the target dataset.
///
/// When the model holds exactly two domains, the target domain's stack is
/// first warm-started from the other (source) domain via
/// [`DvtModel::warm_start`], so optimization continues from the source
/// run's specialized layers rather than from random initialization. Models
/// with another domain count skip the warm start (no unique donor).
pub fn train_transfer(
    mut model: DvtModel,
    target: &Dataset,
    cfg: &TrainConfig,
) -> Result<(DvtModel, Vec<TraceRow>)> {
    cfg.validate()?;
    target.validate()?;
    if matches!(cfg.early_stop, EarlyStop::CycleConsistency { .. }) {
        return Err(Error::Config(
            "cycle-consistency early stopping needs a source and a target domain; \
             it applies to the multi_task regime only"
                .into(),
        ));
    }
    let di = model.domain_index(&target.domain_id)?;
    if model.domains.len() == 2 {
        let donor = model.domains[1 - di].spec.id.clone();
        let target_id = target.domain_id.clone();
        model.warm_start(&donor, &target_id)?;
    }
    if target.supervised_indices().is_empty() {
        return Err(Error::Data(format!(
            "domain '{}' has no supervised samples; the classifier is untrainable",
            target.domain_id
        )));
    }
    let sides = vec![DomainRun { ds: target, di, streams: DomainStreams::new(cfg.seed, di) }];
    let frozen = model.shared_mask();
    run_loop(model, sides, 1.0, &frozen, cfg, None)
}

/// Joint training: every step draws one supervised and one unsupervised
/// batch per domain and takes one Adam step on the mixed objective. A side
/// whose mixing weight is zero is skipped entirely (no batches, no noise).
pub fn train_multi_task(
    model: DvtModel,
    source: &Dataset,
    target: &Dataset,
    cfg: &TrainConfig,
) -> Result<(DvtModel, Vec<TraceRow>)> {
    cfg.validate()?;
    source.validate()?;
    target.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::Data("multi-task training needs nonempty datasets".into()));
    }
    let si = model.domain_index(&source.domain_id)?;
    let ti = model.domain_index(&target.domain_id)?;
    if si == ti {
        return Err(Error::Invalid("source and target must be distinct domains".into()));
    }
    let eta = cfg.weights.eta;
    let mut sides = Vec::new();
    if eta > 0.0 {
        sides.push(DomainRun { ds: source, di: si, streams: DomainStreams::new(cfg.seed, si) });
    }
    if eta < 1.0 {
        sides.push(DomainRun { ds: target, di: ti, streams: DomainStreams::new(cfg.seed, ti) });
    }
    let frozen = vec![false; model.shared_mask().len()];
    let cycle_target: Option<&str> = match cfg.early_stop {
        EarlyStop::CycleConsistency { .. } => Some(&target.domain_id),
        EarlyStop::Off => None,
    };
    run_loop(model, sides, eta, &frozen, cfg, cycle_target)
}

// ── Cycle consistency ───────────────────────────────────────────────────

/// Classification quality after a source→target→source round trip: encode
/// labeled source points, decode them through the target decoder, re-encode
/// with the target encoder, classify with the source classifier, and score
/// the predictions with the unweighted mean F1. Dimension mismatches at any
/// stage of the composition surface as shape errors.
pub fn cycle_consistency_score(
    model: &DvtModel,
    source: &Dataset,
    target_domain: &str,
) -> Result<f64> {
    let labeled: Vec<usize> =
        (0..source.len()).filter(|&i| source.labels[i].is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::Data(format!(
            "cycle consistency needs labeled rows in domain '{}'",
            source.domain_id
        )));
    }
    let x = source.x.take_rows(&labeled);
    let y: Vec<usize> = labeled.iter().map(|&i| source.labels[i].unwrap()).collect();

    let (z_source, _) = model.encode_mean(&source.domain_id, &x)?;
    let through_target = model.decode_mean(target_domain, &z_source)?;
    let (z_back, _) = model.encode_mean(target_domain, &through_target)?;
    let probs = model.classify_probs(&source.domain_id, &z_back)?;
    let preds = argmax_rows(&probs);
    unweighted_mean_f1(&y, &preds, model.arch.class_count)
}

// ── Ensembles ───────────────────────────────────────────────────────────

/// Average the per-model class probabilities and predict the argmax, ties
/// resolved to the lowest class index. Returns (predictions, mean probs).
pub fn ensemble_predict(
    models: &[DvtModel],
    domain: &str,
    x: &Tensor,
) -> Result<(Vec<usize>, Tensor)> {
    let first = models.first().ok_or_else(|| Error::Invalid("empty ensemble".into()))?;
    let k = first.arch.class_count;
    let dim = first.domains[first.domain_index(domain)?].spec.input_dim;
    for m in models {
        let di = m.domain_index(domain)?;
        if m.arch.class_count != k || m.domains[di].spec.input_dim != dim {
            return Err(Error::Invalid(
                "ensemble members must share the class count and input dimension".into(),
            ));
        }
    }
    let mut mean = Tensor::zeros(vec![x.rows(), k]);
    for m in models {
        let p = m.predict_probs(domain, x)?;
        let md = mean.data_mut();
        for (a, b) in md.iter_mut().zip(p.data()) {
            *a += b / models.len() as f64;
        }
    }
    let preds = argmax_rows(&mean);
    Ok((preds, mean))
}

/// Train `cfg.ensemble_size` independent models with seeds `cfg.seed + i`
/// (both initialization and data/noise streams), in parallel when the
/// `parallel` feature is active. Results are merged in seed order, so the
/// outcome is identical either way. Transfer ensembles start every member
/// from the same `base` model.
pub fn train_ensemble(
    arch: &crate::model::ArchConfig,
    cfg: &TrainConfig,
    source: &Dataset,
    target: Option<&Dataset>,
    base: Option<&DvtModel>,
) -> Result<Vec<(DvtModel, Vec<TraceRow>)>> {
    cfg.validate()?;
    let train_one = |i: usize| -> Result<(DvtModel, Vec<TraceRow>)> {
        let mut member_cfg = cfg.clone();
        member_cfg.seed = cfg.seed + i as u64;
        member_cfg.ensemble_size = 1;
        match cfg.regime {
            Regime::SemiSupervised => {
                let model = crate::model::build_model(arch, member_cfg.seed)?;
                train_semi_supervised(model, source, &member_cfg)
            }
            Regime::Transfer => {
                let model = base
                    .ok_or_else(|| {
                        Error::Config("transfer ensembles need a base model to start from".into())
                    })?
                    .clone();
                train_transfer(model, source, &member_cfg)
            }
            Regime::MultiTask => {
                let target = target.ok_or_else(|| {
                    Error::Config("multi-task training needs a target dataset".into())
                })?;
                let model = crate::model::build_model(arch, member_cfg.seed)?;
                train_multi_task(model, source, target, &member_cfg)
            }
        }
    };

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..cfg.ensemble_size).into_par_iter().map(train_one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..cfg.ensemble_size).map(train_one).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_moons, split_supervised, SupervisedSplit};
    use crate::model::{build_model, ArchConfig, DomainSpec, Likelihood};

    fn moons_arch(domains: Vec<DomainSpec>) -> ArchConfig {
        let mut arch = ArchConfig::defaults(2, domains);
        arch.shared_hidden = vec![8, 8];
        arch.domain_hidden = vec![8];
        arch.latent_dim = 4;
        arch
    }

    fn gaussian_domain(id: &str) -> DomainSpec {
        DomainSpec { id: id.into(), input_dim: 2, likelihood: Likelihood::Gaussian }
    }

    fn small_moons(seed: u64, id: &str) -> Dataset {
        let ds = generate_moons(80, 80, 0.05, seed, id).unwrap();
        split_supervised(&ds, SupervisedSplit::Fraction(0.2), true, seed).unwrap()
    }

    fn quick_cfg(steps: usize) -> TrainConfig {
        TrainConfig { steps, unsup_batch_size: 32, ..TrainConfig::default() }
    }

    #[test]
    fn adam_matches_hand_evaluated_step() {
        let mut theta = [0.0];
        let mut state = AdamState::zeros(1);
        adam_step(&mut theta, &[1.0], &mut state, 0.005, 0.5, 0.5, 0.001).unwrap();
        // m = .5, v = .5, both bias-correct to 1 at t=1: θ = −.005·1/(1+.001).
        let expect = -0.005 / 1.001;
        assert!((theta[0] - expect).abs() < 1e-15, "{} vs {}", theta[0], expect);
        assert!((theta[0] - (-0.0049950)).abs() < 1e-7);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_fresh_params_unchanged() {
        let mut theta = [1.5, -2.0, 0.25];
        let before = theta;
        let mut state = AdamState::zeros(3);
        adam_step(&mut theta, &[0.0; 3], &mut state, 0.005, 0.5, 0.5, 0.001).unwrap();
        assert_eq!(theta, before);
    }

    #[test]
    fn adam_scale_invariance_holds_only_in_small_epsilon_limit() {
        let run = |g: f64, eps: f64| -> f64 {
            let mut theta = [0.0];
            let mut state = AdamState::zeros(1);
            adam_step(&mut theta, &[g], &mut state, 0.005, 0.5, 0.5, eps).unwrap();
            theta[0]
        };
        // ε → 0: the update is −lr·sign(g) regardless of |g|.
        let tiny = 1e-300;
        assert!((run(1.0, tiny) - run(10.0, tiny)).abs() < 1e-12);
        assert!((run(1.0, tiny) - (-0.005)).abs() < 1e-12);
        // With ε = 0.001 the same scaling changes the step.
        let a = run(1.0, 0.001);
        let b = run(10.0, 0.001);
        assert!((a - b).abs() > 1e-6, "{} vs {}", a, b);
    }

    #[test]
    fn adam_shape_mismatch_errors() {
        let mut theta = [0.0; 2];
        let mut state = AdamState::zeros(2);
        assert!(adam_step(&mut theta, &[1.0], &mut state, 0.005, 0.5, 0.5, 0.001).is_err());
        let mut short_state = AdamState::zeros(1);
        assert!(adam_step(&mut theta, &[1.0; 2], &mut short_state, 0.005, 0.5, 0.5, 0.001)
            .is_err());
    }

    #[test]
    fn semi_supervised_loss_decreases_and_is_deterministic() {
        let ds = small_moons(7, "src");
        let arch = moons_arch(vec![gaussian_domain("src")]);
        let cfg = quick_cfg(220);
        let (model_a, trace_a) =
            train_semi_supervised(build_model(&arch, 1).unwrap(), &ds, &cfg).unwrap();
        let (model_b, trace_b) =
            train_semi_supervised(build_model(&arch, 1).unwrap(), &ds, &cfg).unwrap();

        // Learning happened: step 0 loss above the median of the last 100.
        let mut tail: Vec<f64> = trace_a[trace_a.len() - 100..].iter().map(|r| r.total).collect();
        tail.sort_by(f64::total_cmp);
        let median = tail[tail.len() / 2];
        assert!(
            trace_a[0].total > median,
            "step0 {} vs tail median {}",
            trace_a[0].total,
            median
        );
        assert!(trace_a.iter().all(|r| r.total.is_finite()));

        // Equal seeds: identical traces and identical final parameters.
        let totals_a: Vec<u64> = trace_a.iter().map(|r| r.total.to_bits()).collect();
        let totals_b: Vec<u64> = trace_b.iter().map(|r| r.total.to_bits()).collect();
        assert_eq!(totals_a, totals_b);
        let pa: Vec<u64> = model_a.param_vector().iter().map(|v| v.to_bits()).collect();
        let pb: Vec<u64> = model_b.param_vector().iter().map(|v| v.to_bits()).collect();
        assert_eq!(pa, pb);
    }

    #[test]
    fn zero_supervised_dataset_is_rejected() {
        let mut ds = small_moons(3, "src");
        for i in 0..ds.len() {
            ds.sup_mask[i] = false;
        }
        let arch = moons_arch(vec![gaussian_domain("src")]);
        let err =
            train_semi_supervised(build_model(&arch, 0).unwrap(), &ds, &quick_cfg(5)).unwrap_err();
        assert!(err.to_string().contains("supervised"), "{}", err);
    }

    #[test]
    fn gamma_zero_ignores_unsupervised_rows_entirely() {
        // Keep supervised rows in place, shuffle only the unlabeled tail: with
        // γ=0 the unlabeled pool is never read or sampled, so the trace and
        // final parameters are bit-identical.
        let base = small_moons(11, "src");
        let mut permuted_rows: Vec<usize> = (0..base.len()).collect();
        let unsup = base.unsupervised_indices();
        for (slot, &row) in unsup.iter().rev().enumerate() {
            permuted_rows[unsup[slot]] = row;
        }
        let permuted = base.select(&permuted_rows);
        assert_ne!(base, permuted, "permutation must actually move rows");

        let arch = moons_arch(vec![gaussian_domain("src")]);
        let mut cfg = quick_cfg(40);
        cfg.weights.gamma = 0.0;
        let (m1, t1) = train_semi_supervised(build_model(&arch, 2).unwrap(), &base, &cfg).unwrap();
        let (m2, t2) =
            train_semi_supervised(build_model(&arch, 2).unwrap(), &permuted, &cfg).unwrap();
        assert!(t1.iter().all(|r| r.unsupervised == 0.0));
        let bits = |m: &DvtModel| -> Vec<u64> {
            m.param_vector().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&m1), bits(&m2));
        let totals = |t: &[TraceRow]| -> Vec<u64> { t.iter().map(|r| r.total.to_bits()).collect() };
        assert_eq!(totals(&t1), totals(&t2));
    }

    #[test]
    fn transfer_freezes_shared_parameters_exactly() {
        let source = small_moons(5, "src");
        let target = small_moons(6, "tgt");
        let arch = moons_arch(vec![gaussian_domain("src"), gaussian_domain("tgt")]);
        let (pretrained, _) =
            train_semi_supervised(build_model(&arch, 4).unwrap(), &source, &quick_cfg(60)).unwrap();

        let before = pretrained.param_vector();
        let mask = pretrained.shared_mask();
        // Expand the per-tensor mask to per-scalar for comparison.
        let mut scalar_mask = Vec::with_capacity(before.len());
        let mut i = 0;
        pretrained.visit_params(|p| {
            scalar_mask.extend(std::iter::repeat(mask[i]).take(p.len()));
            i += 1;
        });

        let (transferred, trace) = train_transfer(pretrained, &target, &quick_cfg(60)).unwrap();
        let after = transferred.param_vector();
        let mut shared_moved = 0;
        let mut target_moved = 0;
        for j in 0..before.len() {
            if scalar_mask[j] {
                assert_eq!(before[j].to_bits(), after[j].to_bits(), "shared scalar {} moved", j);
                shared_moved += 1;
            } else if before[j] != after[j] {
                target_moved += 1;
            }
        }
        assert!(shared_moved > 0 && target_moved > 0);
        assert!(trace.iter().all(|r| r.total.is_finite()));

        // The target classifier specifically must have moved.
        let ti = transferred.domain_index("tgt").unwrap();
        let cls_after = transferred.domains[ti].classifier.as_ref().unwrap();
        let fresh = build_model(&arch, 4).unwrap();
        let cls_before = fresh.domains[ti].classifier.as_ref().unwrap();
        assert_ne!(cls_before.w.data(), cls_after.w.data());
    }

    #[test]
    fn transfer_rejects_unknown_domain() {
        let arch = moons_arch(vec![gaussian_domain("src")]);
        let model = build_model(&arch, 0).unwrap();
        let stranger = small_moons(5, "elsewhere");
        assert!(train_transfer(model, &stranger, &quick_cfg(5)).is_err());
    }

    #[test]
    fn multi_task_eta_one_never_touches_target_parameters() {
        let source = small_moons(8, "src");
        let target = small_moons(9, "tgt");
        let arch = moons_arch(vec![gaussian_domain("src"), gaussian_domain("tgt")]);
        let model = build_model(&arch, 3).unwrap();
        let before = model.param_vector();
        let mut cfg = quick_cfg(30);
        cfg.weights.eta = 1.0;
        let (trained, _) = train_multi_task(model, &source, &target, &cfg).unwrap();
        let after = trained.param_vector();

        // Per-scalar ownership: shared mask per tensor, then domain spans.
        let fresh = build_model(&arch, 3).unwrap();
        let mask = fresh.shared_mask();
        let mut owner = Vec::new(); // 0 = shared, 1.. = domain index + 1
        let mut ti = 0usize;
        let shared_tensors = mask.iter().filter(|&&s| s).count();
        fresh.visit_params(|p| {
            let domain = if ti < shared_tensors {
                0
            } else {
                1 + (ti - shared_tensors) / ((mask.len() - shared_tensors) / 2)
            };
            owner.extend(std::iter::repeat(domain).take(p.len()));
            ti += 1;
        });
        let mut target_checked = 0;
        let mut source_moved = 0;
        for j in 0..before.len() {
            match owner[j] {
                2 => {
                    assert_eq!(before[j].to_bits(), after[j].to_bits(), "target scalar {}", j);
                    target_checked += 1;
                }
                _ => {
                    if before[j] != after[j] {
                        source_moved += 1;
                    }
                }
            }
        }
        assert!(target_checked > 0 && source_moved > 0);
    }

    #[test]
    fn multi_task_equal_seeds_share_traces_and_mixes_both_sides() {
        let source = small_moons(12, "src");
        let target = small_moons(13, "tgt");
        let arch = moons_arch(vec![gaussian_domain("src"), gaussian_domain("tgt")]);
        let cfg = quick_cfg(25);
        let (ma, ta) =
            train_multi_task(build_model(&arch, 5).unwrap(), &source, &target, &cfg).unwrap();
        let (mb, tb) =
            train_multi_task(build_model(&arch, 5).unwrap(), &source, &target, &cfg).unwrap();
        assert_eq!(
            ta.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>(),
            tb.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            ma.param_vector().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            mb.param_vector().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        // Every parameter class moves when both sides are active.
        let before = build_model(&arch, 5).unwrap().param_vector();
        let after = ma.param_vector();
        assert!(before.iter().zip(&after).any(|(a, b)| a != b));
    }

    #[test]
    fn cycle_score_is_perfect_for_identity_composition() {
        // Latent dim == input dim, weights hand-set so that encoding is the
        // identity map, decoding is the identity map, and the source
        // classifier reads the true class off the first coordinate.
        let mut arch = ArchConfig::defaults(
            2,
            vec![gaussian_domain("src"), gaussian_domain("tgt")],
        );
        arch.latent_dim = 2;
        arch.shared_hidden = vec![2];
        arch.domain_hidden = vec![2];
        let mut model = build_model(&arch, 0).unwrap();

        let eye = |n: usize| -> Tensor {
            let mut t = Tensor::zeros(vec![n, n]);
            for i in 0..n {
                t.data_mut()[i * n + i] = 1.0;
            }
            t
        };
        // Shared trunk: identity (ReLU is fine: inputs stay nonnegative).
        model.shared[0].w = eye(2);
        model.shared[0].b = Tensor::zeros(vec![2]);
        for d in model.domains.iter_mut() {
            d.encoder[0].w = eye(2);
            d.encoder[0].b = Tensor::zeros(vec![2]);
            // Head: mean = z, log-var = anything (unused by posterior mean).
            let mut head = Tensor::zeros(vec![2, 4]);
            head.data_mut()[0] = 1.0; // x0 -> mu0
            head.data_mut()[4 + 1] = 1.0; // x1 -> mu1
            d.enc_head.w = head;
            d.enc_head.b = Tensor::zeros(vec![4]);
            // Decoder mirror: identity down to the Gaussian mean head.
            d.decoder[0].w = eye(2);
            d.decoder[0].b = Tensor::zeros(vec![2]);
            d.decoder[1].w = eye(2);
            d.decoder[1].b = Tensor::zeros(vec![2]);
            let mut dec_head = Tensor::zeros(vec![2, 4]);
            dec_head.data_mut()[0] = 1.0;
            dec_head.data_mut()[4 + 1] = 1.0;
            d.dec_head.w = dec_head;
            d.dec_head.b = Tensor::zeros(vec![4]);
            // Classifier: class 0 iff x0 > x1.
            let mut cls = Tensor::zeros(vec![2, 2]);
            cls.data_mut()[0] = 5.0;
            cls.data_mut()[3] = 5.0;
            let c = d.classifier.as_mut().unwrap();
            c.w = cls;
            c.b = Tensor::zeros(vec![2]);
        }

        // Separable data on the coordinate axes.
        let x = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.0, 1.0],
            vec![0.2, 0.8],
        ])
        .unwrap();
        let ds = Dataset {
            domain_id: "src".into(),
            x,
            labels: vec![Some(0), Some(0), Some(1), Some(1)],
            sup_mask: vec![true; 4],
            class_count: 2,
        };
        let score = cycle_consistency_score(&model, &ds, "tgt").unwrap();
        assert_eq!(score, 1.0);

        // Shuffling the evaluation set changes nothing.
        let shuffled = ds.select(&[3, 1, 0, 2]);
        assert_eq!(cycle_consistency_score(&model, &shuffled, "tgt").unwrap(), 1.0);
    }

    #[test]
    fn cycle_score_of_random_model_sits_near_chance() {
        let arch = moons_arch(vec![gaussian_domain("src"), gaussian_domain("tgt")]);
        // Balanced two-class data; chance level is 1/K = 0.5 for accuracy,
        // and the F1 of a constant or random predictor stays well below a
        // trained model's. Average over seeds to damp initialization luck.
        let ds = small_moons(21, "src");
        let mut scores = Vec::new();
        for seed in 0..6 {
            let model = build_model(&arch, seed).unwrap();
            scores.push(cycle_consistency_score(&model, &ds, "tgt").unwrap());
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        assert!(
            (0.15..0.85).contains(&mean),
            "untrained cycle score should hover near chance, got {}",
            mean
        );
    }

    #[test]
    fn early_stopping_restores_best_and_respects_step_cap() {
        let source = small_moons(30, "src");
        let target = small_moons(31, "tgt");
        let arch = moons_arch(vec![gaussian_domain("src"), gaussian_domain("tgt")]);
        let mut cfg = quick_cfg(120);
        cfg.early_stop = EarlyStop::CycleConsistency { patience: 2, eval_every: 10 };
        let (model, trace) =
            train_multi_task(build_model(&arch, 9).unwrap(), &source, &target, &cfg).unwrap();
        assert!(trace.len() <= cfg.steps);
        let evals: Vec<f64> = trace.iter().filter_map(|r| r.cycle).collect();
        assert!(!evals.is_empty());
        // The restored parameters must reproduce the best recorded score.
        let best = evals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let restored = cycle_consistency_score(&model, &source, "tgt").unwrap();
        assert!(
            (restored - best).abs() < 1e-12,
            "restored {} vs best recorded {}",
            restored,
            best
        );
        // Early stopping is rejected outside multi_task.
        let err = train_semi_supervised(build_model(&arch, 9).unwrap(), &source, &cfg);
        assert!(err.is_err());
    }

    #[test]
    fn ensemble_prediction_averages_and_breaks_ties_low() {
        let arch = moons_arch(vec![gaussian_domain("src")]);
        let m1 = build_model(&arch, 100).unwrap();
        let m2 = build_model(&arch, 101).unwrap();
        let ds = small_moons(40, "src");

        // Single-model ensemble is the model itself.
        let (solo_pred, solo_probs) = ensemble_predict(&[m1.clone()], "src", &ds.x).unwrap();
        let direct = m1.predict_probs("src", &ds.x).unwrap();
        assert_eq!(solo_probs.data(), direct.data());
        assert_eq!(solo_pred, argmax_rows(&direct));

        // Two-model mean really is the elementwise average.
        let (_, duo_probs) = ensemble_predict(&[m1.clone(), m2.clone()], "src", &ds.x).unwrap();
        let p2 = m2.predict_probs("src", &ds.x).unwrap();
        for j in 0..duo_probs.len() {
            let expect = (direct.data()[j] + p2.data()[j]) / 2.0;
            assert!((duo_probs.data()[j] - expect).abs() < 1e-15);
        }

        // Documented tie-break: mean of [.9,.1] and [.1,.9] picks class 0.
        let probs = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        let mean: Vec<f64> = (0..2).map(|j| (probs.row(0)[j] + probs.row(1)[j]) / 2.0).collect();
        assert_eq!(mean, vec![0.5, 0.5]);
        let tie = Tensor::from_rows(&[mean]).unwrap();
        assert_eq!(argmax_rows(&tie), vec![0]);

        assert!(ensemble_predict(&[], "src", &ds.x).is_err());
    }

    #[test]
    fn ensemble_training_merges_by_seed_order_and_helps_accuracy() {
        let ds = small_moons(50, "src");
        let arch = moons_arch(vec![gaussian_domain("src")]);
        let mut cfg = quick_cfg(120);
        cfg.ensemble_size = 3;
        cfg.seed = 60;
        let members = train_ensemble(&arch, &cfg, &ds, None, None).unwrap();
        assert_eq!(members.len(), 3);

        // Member i is exactly a solo run with seed 60 + i.
        let mut solo_cfg = cfg.clone();
        solo_cfg.seed = 61;
        solo_cfg.ensemble_size = 1;
        let (solo, _) =
            train_semi_supervised(build_model(&arch, 61).unwrap(), &ds, &solo_cfg).unwrap();
        assert_eq!(
            members[1].0.param_vector().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            solo.param_vector().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        // Ensemble accuracy is at least the weakest member's accuracy.
        let truth = ds.true_labels().unwrap();
        let models: Vec<DvtModel> = members.iter().map(|(m, _)| m.clone()).collect();
        let member_acc: Vec<f64> = models
            .iter()
            .map(|m| {
                let p = m.predict_probs("src", &ds.x).unwrap();
                crate::metrics::accuracy(&truth, &argmax_rows(&p)).unwrap()
            })
            .collect();
        let (ens_pred, _) = ensemble_predict(&models, "src", &ds.x).unwrap();
        let ens_acc = crate::metrics::accuracy(&truth, &ens_pred).unwrap();
        let min_acc = member_acc.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            ens_acc >= min_acc - 1e-12,
            "ensemble {} vs weakest member {}",
            ens_acc,
            min_acc
        );
    }

    #[test]
    fn trace_csv_is_deterministic_and_skips_wall_clock() {
        let rows = vec![
            TraceRow {
                step: 0,
                total: 1.5,
                supervised: 1.0,
                unsupervised: 0.25,
                classification: 0.25,
                cycle: None,
                elapsed_ms: 123.4,
            },
            TraceRow {
                step: 1,
                total: 1.25,
                supervised: 0.875,
                unsupervised: 0.25,
                classification: 0.125,
                cycle: Some(0.5),
                elapsed_ms: 456.7,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "step,total,supervised,unsupervised,classification,cycle\n\
             0,1.5,1,0.25,0.25,\n\
             1,1.25,0.875,0.25,0.125,0.5\n"
        );
        let mut changed = rows.clone();
        changed[0].elapsed_ms = 999.9;
        write_trace_csv(&changed, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), text);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { steps: 0, ..ok.clone() },
            TrainConfig { sup_batch_size: 0, ..ok.clone() },
            TrainConfig { unsup_batch_size: 0, ..ok.clone() },
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { learning_rate: -1.0, ..ok.clone() },
            TrainConfig { beta1: 1.0, ..ok.clone() },
            TrainConfig { epsilon: 0.0, ..ok.clone() },
            TrainConfig { ensemble_size: 0, ..ok.clone() },
            TrainConfig {
                early_stop: EarlyStop::CycleConsistency { patience: 0, eval_every: 500 },
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!("multi_task".parse::<Regime>().unwrap(), Regime::MultiTask);
        assert!("sorta_supervised".parse::<Regime>().is_err());
        assert_eq!(Regime::Transfer.to_string(), "transfer");
    }
}
