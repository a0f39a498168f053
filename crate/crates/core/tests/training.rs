use std::io::Write;

use memdfa_core::data::{self, load_mnist_idx};
use memdfa_core::trainers::{self, TrainOptions};
use memdfa_core::{Algorithm, FeedbackPolicy, Model, ModelSpec, Precision, TrainConfig};

fn config(algorithm: Algorithm, policy: FeedbackPolicy) -> TrainConfig {
    TrainConfig {
        algorithm,
        learning_rate: 0.05,
        batch_size: 25,
        epochs: 2,
        seed: 11,
        feedback_policy: policy,
        precision: Precision::F32,
    }
}

#[test]
fn memdfa_and_dfa_train_identically_end_to_end() {
    let spec = ModelSpec::fc(64, &[24, 16], 4);
    let train = data::synthetic("train", &[64], 4, 200, 11, 0).unwrap();
    let test = data::synthetic("test", &[64], 4, 80, 11, 1).unwrap();
    for policy in [FeedbackPolicy::Fixed, FeedbackPolicy::PerIteration] {
        let mut dfa = Model::<f32>::build(&spec, 11).unwrap();
        let mut mem = dfa.clone();
        let profiled = || TrainOptions {
            profile_steps: 1,
            ..TrainOptions::default()
        };
        let a = trainers::train(&mut dfa, &config(Algorithm::Dfa, policy), &train, &test, &mut profiled()).unwrap();
        let b = trainers::train(&mut mem, &config(Algorithm::MemDfa, policy), &train, &test, &mut profiled()).unwrap();
        assert_eq!(a.history, b.history, "{policy}");
        assert!(dfa.bit_eq(&mem), "{policy}");
        assert!(b.timeline.activation_peak() > 0);
    }
}

#[test]
fn every_algorithm_learns_separable_blobs() {
    let spec = ModelSpec::fc(64, &[32], 4);
    let train = data::synthetic("train", &[64], 4, 400, 3, 0).unwrap();
    let test = data::synthetic("test", &[64], 4, 200, 3, 1).unwrap();
    for algo in Algorithm::ALL {
        let mut model = Model::<f32>::build(&spec, 3).unwrap();
        let config = TrainConfig {
            epochs: 10,
            ..config(algo, FeedbackPolicy::Fixed)
        };
        let out = trainers::train(&mut model, &config, &train, &test, &mut TrainOptions::default()).unwrap();
        let acc = out.history.last().unwrap().test_accuracy;
        assert!(acc > 0.9, "{algo}: {acc}");
    }
}

#[test]
fn idx_files_load_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("img");
    let labels = dir.path().join("lbl");
    let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
    img.extend([0, 255, 51, 102, 255, 0, 0, 0]);
    std::fs::File::create(&images).unwrap().write_all(&img).unwrap();
    std::fs::File::create(&labels).unwrap().write_all(&[0, 0, 8, 1, 0, 0, 0, 2, 7, 3]).unwrap();
    let set = load_mnist_idx(&images, &labels).unwrap();
    assert_eq!(set.len(), 2);
    assert_eq!(set.sample_shape(), &[1, 2, 2]);
    assert_eq!(set.labels(), &[7, 3]);
    assert_eq!(&set.pixels()[..4], &[0.0, 1.0, 0.2, 0.4]);
}
