//! Run settings: command-line flags merged over an optional `key=value`
//! config file, with per-model defaults filling the rest.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use memdfa_core::{Algorithm, FeedbackPolicy, Precision};

use crate::CliError;

#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// mnist-fc3, mnist-cnn, cifar-cnn2, cifar-cnn3, fc50, or custom:PATH
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory holding the dataset files
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// auto, mnist, cifar10 or synthetic
    #[arg(long)]
    pub dataset: Option<DatasetKind>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// fixed, per_iteration, sign_concordant, sign_concordant_init or symmetric
    #[arg(long = "feedback-policy")]
    pub feedback_policy: Option<FeedbackPolicy>,
    #[arg(long)]
    pub precision: Option<Precision>,
    /// Width of the fc50 hidden layers
    #[arg(long)]
    pub width: Option<usize>,
    /// Depth of fc50
    #[arg(long)]
    pub layers: Option<usize>,
    /// Use only the first N training samples
    #[arg(long = "limit-train")]
    pub limit_train: Option<usize>,
    /// Use only the first N test samples
    #[arg(long = "limit-test")]
    pub limit_test: Option<usize>,
    /// Stop each epoch after N steps
    #[arg(long = "max-steps")]
    pub max_steps: Option<usize>,
    /// Number of leading steps recorded in memory.csv
    #[arg(long = "profile-steps")]
    pub profile_steps: Option<usize>,
    /// key=value file; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Auto,
    Mnist,
    Cifar10,
    Synthetic,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Auto => "auto",
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [DatasetKind::Auto, DatasetKind::Mnist, DatasetKind::Cifar10, DatasetKind::Synthetic]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown dataset `{s}` (expected auto, mnist, cifar10 or synthetic)"))
    }
}

/// Fully resolved settings of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub algo: Algorithm,
    pub model: String,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub data: PathBuf,
    pub dataset: DatasetKind,
    pub out: PathBuf,
    pub feedback_policy: FeedbackPolicy,
    pub precision: Precision,
    pub width: usize,
    pub layers: usize,
    pub limit_train: Option<usize>,
    pub limit_test: Option<usize>,
    pub max_steps: Option<usize>,
    pub profile_steps: usize,
}

const KEYS: [&str; 17] = [
    "algo",
    "batch",
    "data",
    "dataset",
    "epochs",
    "feedback_policy",
    "layers",
    "limit_test",
    "limit_train",
    "lr",
    "max_steps",
    "model",
    "out",
    "precision",
    "profile_steps",
    "seed",
    "width",
];

/// Learning rate and epoch count used when neither flag nor file sets them.
pub fn model_defaults(model: &str) -> (f64, usize) {
    match model {
        "mnist-fc3" => (0.01, 100),
        "mnist-cnn" | "cifar-cnn2" | "cifar-cnn3" => (0.005, 150),
        "fc50" => (0.01, 1),
        _ => (0.01, 10),
    }
}

/// Parses `key=value` lines; `#` starts a comment. Dashes in keys are
/// read as underscores.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("config line {}: expected key=value", n + 1)));
        };
        let key = k.trim().replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::Usage(format!("config line {}: unknown key `{key}`", n + 1)));
        }
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

struct Resolver {
    file: BTreeMap<String, String>,
}

impl Resolver {
    fn get<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key).map(String::as_str) {
            None | Some("none") => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::Usage(format!("config key `{key}`: {e}"))),
        }
    }
}

impl Settings {
    /// Merges flags over the config file. `algo` may come from either; a
    /// missing one is a usage error unless `fallback_algo` is given.
    pub fn resolve(args: &RunArgs, algo: Option<Algorithm>, fallback_algo: Option<Algorithm>) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(p) => parse_config(&std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?)?,
            None => BTreeMap::new(),
        };
        let r = Resolver { file };
        let algo = r
            .get(algo, "algo")?
            .or(fallback_algo)
            .ok_or_else(|| CliError::Usage("--algo is required".into()))?;
        let model: String = r
            .get(args.model.clone(), "model")?
            .ok_or_else(|| CliError::Usage("--model is required".into()))?;
        let out: PathBuf = r
            .get(args.out.clone(), "out")?
            .ok_or_else(|| CliError::Usage("--out is required".into()))?;
        let (lr, epochs) = model_defaults(&model);
        let s = Settings {
            algo,
            lr: r.get(args.lr, "lr")?.unwrap_or(lr),
            batch: r.get(args.batch, "batch")?.unwrap_or(100),
            epochs: r.get(args.epochs, "epochs")?.unwrap_or(epochs),
            seed: r.get(args.seed, "seed")?.unwrap_or(0),
            data: r.get(args.data.clone(), "data")?.unwrap_or_else(|| PathBuf::from("data")),
            dataset: r.get(args.dataset, "dataset")?.unwrap_or(DatasetKind::Auto),
            out,
            feedback_policy: r.get(args.feedback_policy, "feedback_policy")?.unwrap_or_default(),
            precision: r.get(args.precision, "precision")?.unwrap_or_default(),
            width: r.get(args.width, "width")?.unwrap_or(64),
            layers: r.get(args.layers, "layers")?.unwrap_or(50),
            limit_train: r.get(args.limit_train, "limit_train")?,
            limit_test: r.get(args.limit_test, "limit_test")?,
            max_steps: r.get(args.max_steps, "max_steps")?,
            profile_steps: r.get(args.profile_steps, "profile_steps")?.unwrap_or(1),
            model,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<(), CliError> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(CliError::Usage("--lr must be a finite non-negative number".into()));
        }
        for (name, v) in [("--batch", self.batch), ("--width", self.width), ("--layers", self.layers)] {
            if v == 0 {
                return Err(CliError::Usage(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// `key=value` lines sorted by key. Reading them back through
    /// `--config` reproduces these settings exactly.
    pub fn manifest(&self) -> String {
        let opt = |v: Option<usize>| v.map_or_else(|| "none".to_string(), |v| v.to_string());
        let mut entries: BTreeMap<&str, String> = BTreeMap::new();
        entries.insert("algo", self.algo.to_string());
        entries.insert("batch", self.batch.to_string());
        entries.insert("data", path_str(&self.data));
        entries.insert("dataset", self.dataset.name().into());
        entries.insert("epochs", self.epochs.to_string());
        entries.insert("feedback_policy", self.feedback_policy.to_string());
        entries.insert("layers", self.layers.to_string());
        entries.insert("limit_test", opt(self.limit_test));
        entries.insert("limit_train", opt(self.limit_train));
        entries.insert("lr", format!("{:?}", self.lr));
        entries.insert("max_steps", opt(self.max_steps));
        entries.insert("model", self.model.clone());
        entries.insert("out", path_str(&self.out));
        entries.insert("precision", self.precision.to_string());
        entries.insert("profile_steps", self.profile_steps.to_string());
        entries.insert("seed", self.seed.to_string());
        entries.insert("width", self.width.to_string());
        debug_assert!(entries.keys().copied().eq(KEYS));
        entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(model: &str, out: &str) -> RunArgs {
        RunArgs {
            model: Some(model.into()),
            out: Some(out.into()),
            ..RunArgs::default()
        }
    }

    #[test]
    fn defaults_follow_the_model() {
        let s = Settings::resolve(&args("mnist-cnn", "o"), Some(Algorithm::Bp), None).unwrap();
        assert_eq!((s.lr, s.epochs, s.batch, s.width, s.layers), (0.005, 150, 100, 64, 50));
        assert_eq!(s.profile_steps, 1);
        assert_eq!(s.feedback_policy, FeedbackPolicy::Fixed);
    }

    #[test]
    fn manifest_round_trips() {
        let mut a = args("fc50", "runs/x");
        a.lr = Some(0.1 + 0.2);
        a.limit_train = Some(500);
        a.feedback_policy = Some(FeedbackPolicy::SignConcordantInit);
        let s = Settings::resolve(&a, Some(Algorithm::MemDfa), None).unwrap();
        let text = s.manifest();
        let keys: Vec<&str> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest");
        std::fs::write(&path, &text).unwrap();
        let again = RunArgs {
            config: Some(path),
            ..RunArgs::default()
        };
        assert_eq!(Settings::resolve(&again, None, None).unwrap(), s);
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        std::fs::write(&path, "model = mnist-fc3\nout=o\nepochs=3 # short\nlimit-train=10\n").unwrap();
        let a = RunArgs {
            config: Some(path),
            epochs: Some(5),
            ..RunArgs::default()
        };
        let s = Settings::resolve(&a, Some(Algorithm::Fa), None).unwrap();
        assert_eq!((s.epochs, s.limit_train, s.model.as_str()), (5, Some(10), "mnist-fc3"));
    }

    #[test]
    fn bad_inputs_are_usage_errors() {
        assert!(matches!(parse_config("nonsense"), Err(CliError::Usage(_))));
        assert!(matches!(parse_config("colour=red"), Err(CliError::Usage(_))));
        assert!(matches!(Settings::resolve(&args("fc50", "o"), None, None), Err(CliError::Usage(_))));
        let mut a = args("fc50", "o");
        a.batch = Some(0);
        assert!(matches!(Settings::resolve(&a, Some(Algorithm::Bp), None), Err(CliError::Usage(_))));
    }
}
