use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::OpCounts;
use crate::ledger::{self, Ledger, MemoryTimeline, Phase};
use crate::model::Model;
use crate::scalar::Scalar;

use super::{feedback_for, step, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub train_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// How many leading steps of the first epoch the memory timeline covers.
    pub profile_steps: usize,
    /// Stops each epoch after this many steps.
    pub max_steps_per_epoch: Option<usize>,
    /// Called after every epoch.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

#[derive(Debug, Default)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Ledger events of the profiled steps, batch construction included.
    pub timeline: MemoryTimeline,
    /// Activation peak of each profiled step.
    pub step_activation_peaks: Vec<u64>,
    /// Operation counts of the first step.
    pub first_step_counts: OpCounts,
    pub steps: usize,
}

/// Trains `model` in place. Shuffling, parameter and feedback draws are
/// all derived from `config.seed`, so two calls with equal inputs produce
/// identical results. Allocations are recorded on the active ledger, or on
/// a private one if none is installed.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    config: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    options: &mut TrainOptions<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.classes() != model.output_len() {
        return Err(Error::invalid(
            "train",
            format!("{} classes but the model outputs {}", train_set.classes(), model.output_len()),
        ));
    }
    let (ledger, _guard) = match ledger::active() {
        Some(l) => (l, None),
        None => {
            let l = Ledger::new();
            (l.clone(), Some(ledger::install(l)))
        }
    };

    let mut feedback = feedback_for(model, config.algorithm, config.feedback_policy, config.seed)?;
    let input_shape = model.input_shape().to_vec();
    let mut outcome = TrainOutcome::default();
    let mut profiled: Option<MemoryTimeline> = None;

    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        let mut samples = 0usize;
        ledger.set_phase(Phase::Forward);
        if outcome.steps < options.profile_steps && profiled.is_none() && !ledger.is_recording() {
            ledger.start_recording();
        }
        let mut batches = train_set.epoch_batches::<T>(config.batch_size, config.seed, epoch as u64, &input_shape)?;
        let mut taken = 0;
        loop {
            if options.max_steps_per_epoch.is_some_and(|m| taken >= m) {
                break;
            }
            let profiling = outcome.steps < options.profile_steps;
            let mark = if profiling { ledger.mark() } else { None };
            let Some(batch) = batches.next() else { break };
            let (x, y) = batch?;
            let rows = x.rows();
            let report = step(model, config.algorithm, x, &y, config.learning_rate, feedback.as_mut())?;
            drop(y);
            if outcome.steps == 0 {
                outcome.first_step_counts = report.op_counts;
            }
            if let Some(slice) = mark.and_then(|m| ledger.slice_since(m)) {
                outcome.step_activation_peaks.push(slice.activation_peak());
            }
            outcome.steps += 1;
            taken += 1;
            if outcome.steps == options.profile_steps && profiled.is_none() {
                profiled = ledger.stop_recording();
            }
            loss_sum += report.loss * rows as f64;
            samples += rows;
        }
        if profiled.is_none() && ledger.is_recording() {
            profiled = ledger.stop_recording();
        }
        ledger.set_phase(Phase::Forward);
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / samples.max(1) as f64,
            test_accuracy: evaluate(model, test_set)?,
        };
        if let Some(f) = options.on_epoch.as_mut() {
            f(&record);
        }
        outcome.history.push(record);
    }
    outcome.timeline = profiled.unwrap_or_default();
    Ok(outcome)
}

const EVAL_CHUNK: usize = 500;

fn argmax_row<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn correct_in<T: Scalar>(model: &Model<T>, data: &Dataset, range: std::ops::Range<usize>) -> Result<usize> {
    let idx: Vec<usize> = range.collect();
    let (x, _) = data.gather::<T>(&idx, model.input_shape())?;
    let out = model.forward(&x, &mut OpCounts::default())?;
    let k = model.output_len();
    Ok(out
        .data()
        .chunks(k)
        .zip(&idx)
        .filter(|(row, &i)| argmax_row(row) == data.labels()[i] as usize)
        .count())
}

fn chunks(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(EVAL_CHUNK))
        .map(|c| c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(n))
        .collect()
}

fn check_eval<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    if data.classes() != model.output_len() {
        return Err(Error::invalid("evaluate", "label width differs from model output"));
    }
    Ok(())
}

/// Fraction of samples whose largest output (first one on ties) is the label.
pub fn evaluate_sequential<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<f64> {
    check_eval(model, data)?;
    let mut correct = 0;
    for r in chunks(data.len()) {
        correct += correct_in(model, data, r)?;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// As [`evaluate_sequential`], with chunks scored on the rayon pool.
#[cfg(feature = "parallel")]
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<f64> {
    use rayon::prelude::*;
    check_eval(model, data)?;
    let counts: Result<Vec<usize>> = chunks(data.len())
        .into_par_iter()
        .map(|r| correct_in(model, data, r))
        .collect();
    Ok(counts?.into_iter().sum::<usize>() as f64 / data.len() as f64)
}

#[cfg(not(feature = "parallel"))]
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<f64> {
    evaluate_sequential(model, data)
}
