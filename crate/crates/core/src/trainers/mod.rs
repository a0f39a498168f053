//! The four learning rules as step functions over a [`Model`], plus SGD
//! and the epoch loop.
//!
//! Every step stages the parameter gradients of all layers and applies them
//! together at the end, so the weights used by any forward computation in a
//! step are the weights the step started with.

mod train;

use std::fmt;
use std::str::FromStr;

pub use train::{evaluate, evaluate_sequential, train, EpochRecord, TrainOptions, TrainOutcome};

use crate::error::{Error, Result};
use crate::feedback::{FeedbackMode, FeedbackPolicy, FeedbackSet};
use crate::layers::{ActivationCache, InputRoute, LayerGrad, OpCounts};
use crate::ledger::{self, MemoryTimeline, Phase};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Bp,
    Fa,
    Dfa,
    MemDfa,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Bp, Algorithm::Fa, Algorithm::Dfa, Algorithm::MemDfa];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Bp => "bp",
            Algorithm::Fa => "fa",
            Algorithm::Dfa => "dfa",
            Algorithm::MemDfa => "memdfa",
        }
    }

    pub fn feedback_mode(self) -> Option<FeedbackMode> {
        match self {
            Algorithm::Bp => None,
            Algorithm::Fa => Some(FeedbackMode::Fa),
            Algorithm::Dfa | Algorithm::MemDfa => Some(FeedbackMode::Dfa),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm `{s}` (expected bp, fa, dfa or memdfa)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(format!("unknown precision `{s}` (expected f32 or f64)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub feedback_policy: FeedbackPolicy,
    pub precision: Precision,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("config", "learning rate must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("config", "batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct StepReport {
    pub loss: f64,
    /// Number of parameter tensors updated.
    pub grads_applied: usize,
    pub op_counts: OpCounts,
    /// Ledger events of this step, when the active ledger is recording.
    pub timeline_slice: Option<MemoryTimeline>,
}

/// Staged parameter gradients, one entry per layer.
pub struct Gradients<T: Scalar> {
    pub loss: f64,
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
    pub op_counts: OpCounts,
}

/// `param ← param − lr · grad`, in place.
pub fn sgd_update<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, lr: T) -> Result<()> {
    param.sub_scaled_in_place(grad, lr)
}

fn ensure_finite<T: Scalar>(t: &Tensor<T>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { tag: t.tag().to_string() })
    }
}

fn check_batch<T: Scalar>(model: &Model<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if x.shape().get(1..) != Some(model.input_shape()) {
        return Err(Error::shape("batch input", x.shape(), model.input_shape()));
    }
    if y.shape() != [x.shape()[0], model.output_len()] {
        return Err(Error::shape("batch target", y.shape(), &[x.shape()[0], model.output_len()]));
    }
    Ok(())
}

fn output_error<T: Scalar>(model: &Model<T>, a_n: &Tensor<T>, y: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let (loss, delta) = model.loss().loss_and_delta(a_n, y, "activation:delta_n")?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { tag: "loss".into() });
    }
    ensure_finite(&delta)?;
    Ok((loss, delta))
}

/// Forward pass keeping every layer's cache.
fn cached_forward<T: Scalar>(
    model: &Model<T>,
    x: Tensor<T>,
    counts: &mut OpCounts,
) -> Result<(Tensor<T>, Vec<ActivationCache<T>>)> {
    ledger::set_phase(Phase::Forward);
    let mut caches: Vec<ActivationCache<T>> = (0..model.n_layers()).map(|_| ActivationCache::new()).collect();
    let mut a = x;
    for (i, (layer, cache)) in model.layers().iter().zip(caches.iter_mut()).enumerate() {
        a = layer.forward(i, a, Some(cache), counts)?;
    }
    Ok((a, caches))
}

/// Backward sweep shared by BP and FA: the error crosses from layer `i` into
/// layer `i − 1` through `Wᵢᵀ` or through `Rᵢ`.
fn chained_gradients<T: Scalar>(
    model: &Model<T>,
    x: Tensor<T>,
    y: &Tensor<T>,
    feedback: Option<&FeedbackSet<T>>,
) -> Result<Gradients<T>> {
    let mut counts = OpCounts::default();
    let (a_n, mut caches) = cached_forward(model, x, &mut counts)?;
    let (loss, mut delta) = output_error(model, &a_n, y)?;
    drop(a_n);

    ledger::set_phase(Phase::Backward);
    let n = model.n_layers();
    let mut staged = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let route = match (i, feedback) {
            (0, _) => InputRoute::Skip,
            (_, None) => InputRoute::Weights,
            (_, Some(fb)) => InputRoute::Feedback(fb.require(i, FeedbackMode::Fa)?.matrix()),
        };
        let mut cache = caches.pop().expect("one cache per layer");
        let LayerGrad { delta_in, weight, bias } = model.layers()[i].backward(i, &mut cache, delta, route, &mut counts)?;
        drop(cache);
        staged.push((weight, bias));
        match delta_in {
            Some(d) => {
                ensure_finite(&d)?;
                delta = d;
            }
            None => break,
        }
    }
    staged.reverse();
    Ok(Gradients {
        loss,
        layers: staged,
        op_counts: counts,
    })
}

/// Projects the output error through layer `i`'s DFA matrix and shapes it
/// like that layer's output.
fn direct_error<T: Scalar>(
    model: &Model<T>,
    feedback: &FeedbackSet<T>,
    i: usize,
    error: &Tensor<T>,
    counts: &mut OpCounts,
) -> Result<Tensor<T>> {
    let projected = feedback.require(i, FeedbackMode::Dfa)?.project(error)?;
    counts.feedback_projections += 1;
    ensure_finite(&projected)?;
    let mut shape = vec![error.rows()];
    shape.extend(model.layers()[i].output_shape());
    projected.reshape(&shape)
}

fn dfa_gradients<T: Scalar>(
    model: &Model<T>,
    x: Tensor<T>,
    y: &Tensor<T>,
    feedback: &FeedbackSet<T>,
) -> Result<Gradients<T>> {
    let mut counts = OpCounts::default();
    let (a_n, mut caches) = cached_forward(model, x, &mut counts)?;
    let (loss, error) = output_error(model, &a_n, y)?;
    drop(a_n);

    ledger::set_phase(Phase::Backward);
    let n = model.n_layers();
    let mut staged = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let delta = if i + 1 == n {
            error.copy_as(crate::layers::activation_tag(i, "delta"))?
        } else {
            direct_error(model, feedback, i, &error, &mut counts)?
        };
        let mut cache = caches.pop().expect("one cache per layer");
        let g = model.layers()[i].backward(i, &mut cache, delta, InputRoute::Skip, &mut counts)?;
        drop(cache);
        staged.push((g.weight, g.bias));
    }
    staged.reverse();
    Ok(Gradients {
        loss,
        layers: staged,
        op_counts: counts,
    })
}

/// Phase 1 runs the model without caches, keeping only `a0`, to obtain the
/// output error. Phase 2 revisits the layers in order: recompute the layer
/// with caching from the retained input, project the error into it, run
/// the local backward and drop the cache. At most one layer's cache is
/// live at a time.
fn memdfa_gradients<T: Scalar>(
    model: &Model<T>,
    x: Tensor<T>,
    y: &Tensor<T>,
    feedback: &FeedbackSet<T>,
) -> Result<Gradients<T>> {
    let mut counts = OpCounts::default();
    ledger::set_phase(Phase::Forward);
    let a_n = model.forward(&x, &mut counts)?;
    let (loss, error) = output_error(model, &a_n, y)?;
    drop(a_n);

    let n = model.n_layers();
    let mut staged = Vec::with_capacity(n);
    let mut a_prev = x;
    let mut error = Some(error);
    for (i, layer) in model.layers().iter().enumerate() {
        ledger::set_phase(Phase::LocalForward);
        let mut cache = ActivationCache::new();
        let a_i = layer.forward(i, a_prev, Some(&mut cache), &mut counts)?;

        ledger::set_phase(Phase::LocalBackward);
        let delta = if i + 1 == n {
            error.take().expect("output error is consumed by the last layer only")
        } else {
            direct_error(model, feedback, i, error.as_ref().expect("present"), &mut counts)?
        };
        let g = layer.backward(i, &mut cache, delta, InputRoute::Skip, &mut counts)?;
        drop(cache);
        staged.push((g.weight, g.bias));
        a_prev = a_i;
    }
    drop(a_prev);
    Ok(Gradients {
        loss,
        layers: staged,
        op_counts: counts,
    })
}

/// Gradients of one step without touching the parameters. Feedback
/// matrices are used as they are; call [`FeedbackSet::prepare_step`] first
/// to advance them.
pub fn gradients<T: Scalar>(
    model: &Model<T>,
    algorithm: Algorithm,
    x: Tensor<T>,
    y: &Tensor<T>,
    feedback: Option<&FeedbackSet<T>>,
) -> Result<Gradients<T>> {
    check_batch(model, &x, y)?;
    let need = |mode: FeedbackMode| {
        feedback.ok_or_else(|| Error::Feedback {
            mode: mode.name(),
            reason: format!("{algorithm} needs feedback matrices"),
        })
    };
    match algorithm {
        Algorithm::Bp => chained_gradients(model, x, y, None),
        Algorithm::Fa => chained_gradients(model, x, y, Some(need(FeedbackMode::Fa)?)),
        Algorithm::Dfa => dfa_gradients(model, x, y, need(FeedbackMode::Dfa)?),
        Algorithm::MemDfa => memdfa_gradients(model, x, y, need(FeedbackMode::Dfa)?),
    }
}

/// Applies staged gradients layer by layer, freeing each as it goes.
fn apply<T: Scalar>(model: &mut Model<T>, grads: Vec<(Tensor<T>, Tensor<T>)>, lr: f64) -> Result<usize> {
    ledger::set_phase(Phase::Update);
    let lr = T::from_f64(lr);
    let mut applied = 0;
    for (layer, (gw, gb)) in model.layers_mut().iter_mut().zip(grads) {
        let (w, b) = layer.params_mut();
        sgd_update(w, &gw, lr)?;
        sgd_update(b, &gb, lr)?;
        applied += 2;
    }
    Ok(applied)
}

/// One full training step of `algorithm`.
pub fn step<T: Scalar>(
    model: &mut Model<T>,
    algorithm: Algorithm,
    x: Tensor<T>,
    y: &Tensor<T>,
    lr: f64,
    feedback: Option<&mut FeedbackSet<T>>,
) -> Result<StepReport> {
    let active = ledger::active();
    let mark = active.as_ref().and_then(|l| l.mark());
    let feedback = match feedback {
        Some(fb) => {
            fb.prepare_step(model)?;
            Some(&*fb)
        }
        None => None,
    };
    let result = gradients(model, algorithm, x, y, feedback).and_then(|g| {
        let applied = apply(model, g.layers, lr)?;
        Ok((g.loss, applied, g.op_counts))
    });
    ledger::set_phase(Phase::Forward);
    let (loss, grads_applied, op_counts) = result?;
    Ok(StepReport {
        loss,
        grads_applied,
        op_counts,
        timeline_slice: active.zip(mark).and_then(|(l, m)| l.slice_since(m)),
    })
}

pub fn bp_step<T: Scalar>(model: &mut Model<T>, x: Tensor<T>, y: &Tensor<T>, lr: f64) -> Result<StepReport> {
    step(model, Algorithm::Bp, x, y, lr, None)
}

pub fn fa_step<T: Scalar>(
    model: &mut Model<T>,
    x: Tensor<T>,
    y: &Tensor<T>,
    lr: f64,
    feedback: &mut FeedbackSet<T>,
) -> Result<StepReport> {
    step(model, Algorithm::Fa, x, y, lr, Some(feedback))
}

pub fn dfa_step<T: Scalar>(
    model: &mut Model<T>,
    x: Tensor<T>,
    y: &Tensor<T>,
    lr: f64,
    feedback: &mut FeedbackSet<T>,
) -> Result<StepReport> {
    step(model, Algorithm::Dfa, x, y, lr, Some(feedback))
}

pub fn memdfa_step<T: Scalar>(
    model: &mut Model<T>,
    x: Tensor<T>,
    y: &Tensor<T>,
    lr: f64,
    feedback: &mut FeedbackSet<T>,
) -> Result<StepReport> {
    step(model, Algorithm::MemDfa, x, y, lr, Some(feedback))
}

/// Feedback matrices appropriate for `algorithm`, or `None` for BP.
pub fn feedback_for<T: Scalar>(
    model: &Model<T>,
    algorithm: Algorithm,
    policy: FeedbackPolicy,
    seed: u64,
) -> Result<Option<FeedbackSet<T>>> {
    algorithm
        .feedback_mode()
        .map(|mode| FeedbackSet::for_model(model, mode, policy, seed))
        .transpose()
}
