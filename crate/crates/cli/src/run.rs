//! `train` and `compare`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use memdfa_core::data::{self, Dataset};
use memdfa_core::ledger::{self, Ledger};
use memdfa_core::trainers::{self, EpochRecord, TrainOptions, TrainOutcome};
use memdfa_core::{Algorithm, Model, ModelSpec, Precision, Scalar, TrainConfig};

use crate::settings::{DatasetKind, Settings};
use crate::CliError;

pub const HISTORY_HEADER: &str = "epoch,train_loss,test_accuracy";
pub const COMPARE_HEADER: &str = "algo,final_accuracy,peak_activation_bytes,forward_matmuls,backward_matmuls";

const SYNTHETIC_TRAIN: usize = 2000;
const SYNTHETIC_TEST: usize = 500;

pub fn model_spec(s: &Settings) -> Result<ModelSpec, CliError> {
    match s.model.strip_prefix("custom:") {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{path}: {e}")))?;
            ModelSpec::parse(&text).map_err(|e| CliError::Usage(format!("{path}: {e}")))
        }
        None => ModelSpec::named(&s.model, s.layers, s.width).map_err(|e| CliError::Usage(e.to_string())),
    }
}

fn first_dir(candidates: &[PathBuf], probe: &str) -> PathBuf {
    candidates
        .iter()
        .find(|d| d.join(probe).is_file() || d.join(format!("{probe}.gz")).is_file())
        .unwrap_or(&candidates[0])
        .clone()
}

/// Loads the train and test splits the model expects.
pub fn load_data(s: &Settings, spec: &ModelSpec) -> Result<(Dataset, Dataset), CliError> {
    let sample: usize = spec.input_shape.iter().product();
    let kind = match s.dataset {
        DatasetKind::Auto => match sample {
            784 => DatasetKind::Mnist,
            3072 => DatasetKind::Cifar10,
            _ => DatasetKind::Synthetic,
        },
        k => k,
    };
    let classes = spec.output_len().map_err(|e| CliError::Usage(e.to_string()))?;
    let missing = |e: memdfa_core::Error| CliError::Data(e.to_string());
    let (train, test) = match kind {
        DatasetKind::Mnist => {
            let dir = first_dir(&[s.data.clone(), s.data.join("mnist")], "train-images-idx3-ubyte");
            (
                data::load_mnist_dir(&dir, true).map_err(missing)?,
                data::load_mnist_dir(&dir, false).map_err(missing)?,
            )
        }
        DatasetKind::Cifar10 => {
            let dir = first_dir(&[s.data.clone(), s.data.join("cifar10")], "test_batch.bin");
            (
                data::load_cifar10_dir(&dir, true).map_err(missing)?,
                data::load_cifar10_dir(&dir, false).map_err(missing)?,
            )
        }
        DatasetKind::Synthetic | DatasetKind::Auto => {
            let make = |name, count, split| {
                data::synthetic(name, &spec.input_shape, classes, count, s.seed, split)
                    .map_err(|e| CliError::Usage(e.to_string()))
            };
            (
                make("synthetic-train", s.limit_train.unwrap_or(SYNTHETIC_TRAIN), 0)?,
                make("synthetic-test", s.limit_test.unwrap_or(SYNTHETIC_TEST), 1)?,
            )
        }
    };
    let train = s.limit_train.map_or(train.clone(), |n| train.subset(n));
    let test = s.limit_test.map_or(test.clone(), |n| test.subset(n));
    if train.sample_len() != sample || train.classes() != classes {
        return Err(CliError::Usage(format!(
            "model {} expects {sample} inputs and {classes} classes, dataset {} has {} and {}",
            s.model,
            train.name,
            train.sample_len(),
            train.classes()
        )));
    }
    if train.is_empty() || test.is_empty() {
        return Err(CliError::Usage("empty training or test set".into()));
    }
    Ok((train, test))
}

/// What one finished run reports back.
#[derive(Debug)]
pub struct RunSummary {
    pub history: Vec<EpochRecord>,
    pub final_accuracy: f64,
    pub peak_activation_bytes: u64,
    pub forward_matmuls: u64,
    pub backward_matmuls: u64,
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        s.push_str(&format!("{},{:?},{:?}\n", r.epoch, r.train_loss, r.test_accuracy));
    }
    s
}

fn train_typed<T: Scalar>(
    s: &Settings,
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    log: &mut dyn Write,
) -> Result<(TrainOutcome, f64), CliError> {
    let mut model = Model::<T>::build(spec, s.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let config = TrainConfig {
        algorithm: s.algo,
        learning_rate: s.lr,
        batch_size: s.batch,
        epochs: s.epochs,
        seed: s.seed,
        feedback_policy: s.feedback_policy,
        precision: s.precision,
    };
    let algo = s.algo;
    let mut report = |r: &EpochRecord| {
        let _ = writeln!(
            log,
            "{algo} epoch {:>3}  loss {:.5}  test accuracy {:.4}",
            r.epoch, r.train_loss, r.test_accuracy
        );
    };
    let mut options = TrainOptions {
        profile_steps: s.profile_steps,
        max_steps_per_epoch: s.max_steps,
        on_epoch: Some(&mut report),
    };
    let outcome = trainers::train(&mut model, &config, train, test, &mut options).map_err(CliError::from_core)?;
    let final_accuracy = match outcome.history.last() {
        Some(r) => r.test_accuracy,
        None => trainers::evaluate(&model, test).map_err(CliError::from_core)?,
    };
    Ok((outcome, final_accuracy))
}

/// Trains once and writes `manifest`, `history.csv` and `memory.csv` to `s.out`.
pub fn run_one(
    s: &Settings,
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    log: &mut dyn Write,
) -> Result<RunSummary, CliError> {
    fs::create_dir_all(&s.out).map_err(|e| CliError::Other(format!("{}: {e}", s.out.display())))?;
    write_file(&s.out.join("manifest"), &s.manifest())?;

    let ledger = Ledger::new();
    let _active = ledger::install(Arc::clone(&ledger));
    let (outcome, final_accuracy) = match s.precision {
        Precision::F32 => train_typed::<f32>(s, spec, train, test, log)?,
        Precision::F64 => train_typed::<f64>(s, spec, train, test, log)?,
    };

    write_file(&s.out.join("history.csv"), &history_csv(&outcome.history))?;
    outcome
        .timeline
        .export_csv(s.out.join("memory.csv"))
        .map_err(|e| CliError::Other(e.to_string()))?;
    Ok(RunSummary {
        history: outcome.history,
        final_accuracy,
        peak_activation_bytes: outcome.timeline.activation_peak(),
        forward_matmuls: outcome.first_step_counts.forward_matmuls,
        backward_matmuls: outcome.first_step_counts.backward_matmuls,
    })
}

pub fn cmd_train(s: &Settings, log: &mut dyn Write) -> Result<RunSummary, CliError> {
    let spec = model_spec(s)?;
    let (train, test) = load_data(s, &spec)?;
    let summary = run_one(s, &spec, &train, &test, log)?;
    let _ = writeln!(
        log,
        "{}: final test accuracy {:.4}, peak activation bytes {}",
        s.algo, summary.final_accuracy, summary.peak_activation_bytes
    );
    Ok(summary)
}

/// Runs all four algorithms with the same settings, each into its own
/// subdirectory, and writes `compare.csv`.
pub fn cmd_compare(base: &Settings, log: &mut dyn Write) -> Result<Vec<(Algorithm, RunSummary)>, CliError> {
    let spec = model_spec(base)?;
    let (train, test) = load_data(base, &spec)?;
    fs::create_dir_all(&base.out).map_err(|e| CliError::Other(format!("{}: {e}", base.out.display())))?;
    let mut rows = Vec::new();
    let mut csv = format!("{COMPARE_HEADER}\n");
    for algo in Algorithm::ALL {
        let s = Settings {
            algo,
            out: base.out.join(algo.name()),
            ..base.clone()
        };
        let r = run_one(&s, &spec, &train, &test, log)?;
        csv.push_str(&format!(
            "{},{:?},{},{},{}\n",
            algo, r.final_accuracy, r.peak_activation_bytes, r.forward_matmuls, r.backward_matmuls
        ));
        rows.push((algo, r));
    }
    write_file(&base.out.join("compare.csv"), &csv)?;
    let _ = write!(log, "{csv}");
    Ok(rows)
}
