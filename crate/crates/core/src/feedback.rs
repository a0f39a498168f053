//! Random feedback matrices for feedback alignment (FA) and direct feedback
//! alignment (DFA).
//!
//! Under FA, layer `i` (for `i ≥ 1`) owns a matrix `R_i` shaped like `W_iᵀ`
//! that replaces the transposed weights when the error crosses into layer
//! `i − 1`. Under DFA, every layer except the last owns a matrix mapping the
//! output error straight to that layer's (flattened) output.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::activation_tag;
use crate::model::Model;
use crate::rng::{streams, Rng};
use crate::scalar::Scalar;
use crate::tensor::{FillDistribution, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeedbackMode {
    Fa,
    Dfa,
}

impl FeedbackMode {
    pub fn name(self) -> &'static str {
        match self {
            FeedbackMode::Fa => "FA",
            FeedbackMode::Dfa => "DFA",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FeedbackPolicy {
    /// Drawn once, constant afterwards.
    #[default]
    Fixed,
    /// Redrawn before every step from the step's own stream.
    PerIteration,
    /// Random magnitudes fixed at initialization, signs copied from the
    /// current `Wᵀ` before every step (FA only).
    SignConcordant,
    /// As [`SignConcordant`](Self::SignConcordant) but signs copied once, at initialization.
    SignConcordantInit,
    /// `R = Wᵀ`, recopied before every step (FA only). Degenerates FA to backpropagation.
    Symmetric,
}

impl FeedbackPolicy {
    pub const ALL: [FeedbackPolicy; 5] = [
        FeedbackPolicy::Fixed,
        FeedbackPolicy::PerIteration,
        FeedbackPolicy::SignConcordant,
        FeedbackPolicy::SignConcordantInit,
        FeedbackPolicy::Symmetric,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeedbackPolicy::Fixed => "fixed",
            FeedbackPolicy::PerIteration => "per_iteration",
            FeedbackPolicy::SignConcordant => "sign_concordant",
            FeedbackPolicy::SignConcordantInit => "sign_concordant_init",
            FeedbackPolicy::Symmetric => "symmetric",
        }
    }

    fn uses_weights(self) -> bool {
        matches!(
            self,
            FeedbackPolicy::SignConcordant
                | FeedbackPolicy::SignConcordantInit
                | FeedbackPolicy::Symmetric
        )
    }
}

impl fmt::Display for FeedbackPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeedbackPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        FeedbackPolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown feedback policy `{s}`"))
    }
}

#[derive(Clone, Debug)]
pub struct FeedbackMatrix<T: Scalar> {
    pub layer_index: usize,
    pub mode: FeedbackMode,
    pub policy: FeedbackPolicy,
    pub stream_id: u64,
    matrix: Tensor<T>,
    magnitudes: Option<Tensor<T>>,
    seed: u64,
}

impl<T: Scalar> FeedbackMatrix<T> {
    /// Draws a `rows × cols` matrix (it maps `cols`-dimensional errors to
    /// `rows`-dimensional ones) with entries uniform(−1/√cols, 1/√cols).
    ///
    /// `weight_ref` is the layer's `W` (`cols × rows`) and must be given
    /// exactly when the policy reads the weights.
    pub fn generate(
        seed: u64,
        layer_index: usize,
        mode: FeedbackMode,
        policy: FeedbackPolicy,
        shape: [usize; 2],
        weight_ref: Option<&Tensor<T>>,
        iteration: u64,
    ) -> Result<Self> {
        let err = |reason: String| Error::Feedback {
            mode: mode.name(),
            reason,
        };
        match (policy.uses_weights(), weight_ref) {
            (true, None) => return Err(err(format!("{policy} policy needs the layer weights"))),
            (false, Some(_)) => return Err(err(format!("{policy} policy takes no weight reference"))),
            _ => {}
        }
        if policy.uses_weights() && mode == FeedbackMode::Dfa {
            return Err(err(format!("{policy} policy needs FA mode (DFA matrices are not shaped like Wᵀ)")));
        }
        if let Some(w) = weight_ref {
            if w.shape() != [shape[1], shape[0]] {
                return Err(err(format!("weights {:?} are not the transpose of {shape:?}", w.shape())));
            }
        }

        let stream_id = streams::feedback(layer_index, iteration);
        let tag = format!("feedback:L{layer_index}");
        let mut fb = FeedbackMatrix {
            layer_index,
            mode,
            policy,
            stream_id,
            matrix: Tensor::random(&mut Rng::new(seed, stream_id), &shape, entry_law(shape[1]), tag.clone())?,
            magnitudes: None,
            seed,
        };
        match policy {
            FeedbackPolicy::SignConcordant | FeedbackPolicy::SignConcordantInit => {
                fb.magnitudes = Some(fb.matrix.map(|v: T| v.abs(), format!("{tag}.mag"))?);
                fb.copy_signs(weight_ref.expect("checked above"));
            }
            FeedbackPolicy::Symmetric => fb.copy_transpose(weight_ref.expect("checked above")),
            FeedbackPolicy::Fixed | FeedbackPolicy::PerIteration => {}
        }
        Ok(fb)
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.matrix
    }

    /// Direct access for hand-set matrices. Policies that refresh will
    /// overwrite the contents on the next step.
    pub fn matrix_mut(&mut self) -> &mut Tensor<T> {
        &mut self.matrix
    }

    /// Rows (output dimension) and columns (input dimension).
    pub fn shape(&self) -> [usize; 2] {
        [self.matrix.shape()[0], self.matrix.shape()[1]]
    }

    pub fn bytes(&self) -> u64 {
        self.matrix.bytes() + self.magnitudes.as_ref().map_or(0, Tensor::bytes)
    }

    /// Brings the matrix up to date for step `iteration`, in place.
    pub fn refresh(&mut self, weight: &Tensor<T>, iteration: u64) -> Result<()> {
        match self.policy {
            FeedbackPolicy::Fixed | FeedbackPolicy::SignConcordantInit => {}
            FeedbackPolicy::PerIteration => {
                self.stream_id = streams::feedback(self.layer_index, iteration);
                let mut rng = Rng::new(self.seed, self.stream_id);
                let law = entry_law(self.shape()[1]);
                self.matrix.fill_random(&mut rng, law)?;
            }
            FeedbackPolicy::SignConcordant => self.copy_signs(weight),
            FeedbackPolicy::Symmetric => self.copy_transpose(weight),
        }
        Ok(())
    }

    fn copy_signs(&mut self, weight: &Tensor<T>) {
        let [rows, cols] = self.shape();
        let mags = self.magnitudes.as_ref().expect("sign-concordant magnitudes");
        let (m, r) = (mags.data(), self.matrix.data_mut());
        for i in 0..rows {
            for j in 0..cols {
                let mag = m[i * cols + j];
                r[i * cols + j] = if weight.data()[j * rows + i] < T::zero() { -mag } else { mag };
            }
        }
    }

    fn copy_transpose(&mut self, weight: &Tensor<T>) {
        let [rows, cols] = self.shape();
        let r = self.matrix.data_mut();
        for i in 0..rows {
            for j in 0..cols {
                r[i * cols + j] = weight.data()[j * rows + i];
            }
        }
    }

    /// `R · delta` for a vector, or `delta · Rᵀ` row by row for a batch.
    pub fn project(&self, delta: &Tensor<T>) -> Result<Tensor<T>> {
        let [rows, cols] = self.shape();
        let tag = activation_tag(self.layer_index, "delta");
        let mismatch = || Error::Feedback {
            mode: self.mode.name(),
            reason: format!("cannot project {:?} through a {rows}×{cols} matrix", delta.shape()),
        };
        match delta.rank() {
            1 if delta.len() == cols => delta
                .clone()
                .reshape(&[1, cols])?
                .matmul_transpose_right(&self.matrix, tag)?
                .reshape(&[rows]),
            2 if delta.shape()[1] == cols => delta.matmul_transpose_right(&self.matrix, tag),
            _ => Err(mismatch()),
        }
    }
}

fn entry_law(fan: usize) -> FillDistribution {
    let bound = 1.0 / (fan as f64).sqrt();
    FillDistribution::Uniform {
        lo: -bound,
        hi: bound,
    }
}

/// The feedback matrices of one model, indexed by layer.
#[derive(Clone, Debug)]
pub struct FeedbackSet<T: Scalar> {
    mode: FeedbackMode,
    policy: FeedbackPolicy,
    steps: u64,
    matrices: Vec<Option<FeedbackMatrix<T>>>,
}

impl<T: Scalar> FeedbackSet<T> {
    pub fn for_model(model: &Model<T>, mode: FeedbackMode, policy: FeedbackPolicy, seed: u64) -> Result<Self> {
        let n = model.n_layers();
        let out_len = model.output_len();
        let mut matrices = Vec::with_capacity(n);
        for (i, layer) in model.layers().iter().enumerate() {
            let fb = match mode {
                FeedbackMode::Fa if i > 0 => {
                    let w = layer.weight();
                    let shape = [w.shape()[1], w.shape()[0]];
                    let wref = policy.uses_weights().then_some(w);
                    Some(FeedbackMatrix::generate(seed, i, mode, policy, shape, wref, 0)?)
                }
                FeedbackMode::Dfa if i + 1 < n => {
                    let shape = [layer.output_len(), out_len];
                    Some(FeedbackMatrix::generate(seed, i, mode, policy, shape, None, 0)?)
                }
                _ => None,
            };
            matrices.push(fb);
        }
        Ok(FeedbackSet {
            mode,
            policy,
            steps: 0,
            matrices,
        })
    }

    pub fn mode(&self) -> FeedbackMode {
        self.mode
    }

    pub fn policy(&self) -> FeedbackPolicy {
        self.policy
    }

    pub fn get(&self, layer: usize) -> Option<&FeedbackMatrix<T>> {
        self.matrices.get(layer).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, layer: usize) -> Option<&mut FeedbackMatrix<T>> {
        self.matrices.get_mut(layer).and_then(Option::as_mut)
    }

    pub fn bytes(&self) -> u64 {
        self.matrices.iter().flatten().map(FeedbackMatrix::bytes).sum()
    }

    /// Called once at the start of every step, before any weight changes.
    /// Step `t` uses draw `t` under the per-iteration policy.
    pub fn prepare_step(&mut self, model: &Model<T>) -> Result<()> {
        let step = self.steps;
        self.steps += 1;
        if self.policy == FeedbackPolicy::PerIteration && step == 0 {
            return Ok(());
        }
        for (layer, fb) in model.layers().iter().zip(self.matrices.iter_mut()) {
            if let Some(fb) = fb {
                fb.refresh(layer.weight(), step)?;
            }
        }
        Ok(())
    }

    /// The matrix routing the error into layer `layer`, checked against the mode.
    pub(crate) fn require(&self, layer: usize, mode: FeedbackMode) -> Result<&FeedbackMatrix<T>> {
        if self.mode != mode {
            return Err(Error::Feedback {
                mode: mode.name(),
                reason: format!("feedback set was built for {}", self.mode.name()),
            });
        }
        self.get(layer).ok_or_else(|| Error::Feedback {
            mode: mode.name(),
            reason: format!("no feedback matrix for layer {layer}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec(), "t").unwrap()
    }

    fn gen(policy: FeedbackPolicy, w: Option<&Tensor<f64>>, it: u64) -> Result<FeedbackMatrix<f64>> {
        FeedbackMatrix::generate(5, 1, FeedbackMode::Fa, policy, [3, 2], w, it)
    }

    #[test]
    fn fixed_policy_is_constant() {
        let w = t(&[2, 3], &[0.1; 6]);
        let mut fb = gen(FeedbackPolicy::Fixed, None, 0).unwrap();
        let before = fb.matrix().clone();
        fb.refresh(&w, 1).unwrap();
        fb.refresh(&w, 2).unwrap();
        assert!(fb.matrix().bit_eq(&before));
        let bound = 1.0 / 2f64.sqrt();
        assert!(before.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn sign_concordant_follows_weights() {
        let w = t(&[2, 3], &[0.5; 6]);
        let fb = gen(FeedbackPolicy::SignConcordant, Some(&w), 0).unwrap();
        assert!(fb.matrix().data().iter().all(|&v| v >= 0.0));

        let mut fb = fb;
        let w2 = t(&[2, 3], &[-1., 2., -3., 4., -5., 6.]);
        let mags: Vec<f64> = fb.matrix().data().iter().map(|v| v.abs()).collect();
        fb.refresh(&w2, 1).unwrap();
        let wt = w2.transpose("wt").unwrap();
        for ((r, m), s) in fb.matrix().data().iter().zip(&mags).zip(wt.data()) {
            assert_eq!(r.abs(), *m);
            assert_eq!(r.signum(), s.signum());
        }

        let mut frozen = gen(FeedbackPolicy::SignConcordantInit, Some(&w), 0).unwrap();
        let before = frozen.matrix().clone();
        frozen.refresh(&w2, 1).unwrap();
        assert!(frozen.matrix().bit_eq(&before));
    }

    #[test]
    fn per_iteration_draws_differ_but_repeat() {
        let w = t(&[2, 3], &[0.0; 6]);
        let mut a = gen(FeedbackPolicy::PerIteration, None, 0).unwrap();
        let first = a.matrix().clone();
        a.refresh(&w, 1).unwrap();
        assert!(!a.matrix().bit_eq(&first));
        let b = gen(FeedbackPolicy::PerIteration, None, 1).unwrap();
        assert!(a.matrix().bit_eq(b.matrix()));
    }

    #[test]
    fn weight_reference_rules() {
        let w = t(&[2, 3], &[0.1; 6]);
        assert!(gen(FeedbackPolicy::SignConcordant, None, 0).is_err());
        assert!(gen(FeedbackPolicy::Fixed, Some(&w), 0).is_err());
        let wrong = t(&[3, 2], &[0.1; 6]);
        assert!(gen(FeedbackPolicy::Symmetric, Some(&wrong), 0).is_err());
        let dfa = FeedbackMatrix::generate(5, 1, FeedbackMode::Dfa, FeedbackPolicy::SignConcordant, [3, 2], Some(&w), 0);
        assert!(matches!(dfa, Err(Error::Feedback { mode: "DFA", .. })));
    }

    #[test]
    fn symmetric_copies_transpose() {
        let w = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let fb = gen(FeedbackPolicy::Symmetric, Some(&w), 0).unwrap();
        assert!(fb.matrix().bit_eq(&w.transpose("wt").unwrap()));
    }

    fn with_matrix(m: Tensor<f64>) -> FeedbackMatrix<f64> {
        let [r, c] = [m.shape()[0], m.shape()[1]];
        let mut fb = FeedbackMatrix::generate(0, 0, FeedbackMode::Dfa, FeedbackPolicy::Fixed, [r, c], None, 0).unwrap();
        *fb.matrix_mut() = m;
        fb
    }

    #[test]
    fn projection_examples() {
        let id = with_matrix(t(&[2, 2], &[1., 0., 0., 1.]));
        assert_eq!(id.project(&t(&[2], &[4., -2.])).unwrap().data(), &[4., -2.]);
        let r = with_matrix(t(&[2, 2], &[1., 2., 3., 4.]));
        let out = r.project(&t(&[2], &[1., 1.])).unwrap();
        assert_eq!(out.shape(), &[2]);
        assert_eq!(out.data(), &[3., 7.]);
        let err = r.project(&t(&[3], &[1., 1., 1.])).unwrap_err();
        assert!(err.to_string().contains("DFA"), "{err}");
    }

    #[test]
    fn batched_projection_matches_per_sample() {
        let fb = FeedbackMatrix::<f64>::generate(3, 0, FeedbackMode::Dfa, FeedbackPolicy::Fixed, [4, 3], None, 0).unwrap();
        let batch = t(&[2, 3], &[0.5, -1., 2., 1.5, 0.25, -0.75]);
        let out = fb.project(&batch).unwrap();
        for b in 0..2 {
            let row = t(&[3], &batch.data()[b * 3..b * 3 + 3]);
            let single = fb.project(&row).unwrap();
            assert_eq!(&out.data()[b * 4..b * 4 + 4], single.data());
        }
    }

    #[test]
    fn sets_are_shaped_per_mode() {
        let spec = ModelSpec::fc(6, &[5, 4], 3);
        let model = Model::<f64>::build(&spec, 1).unwrap();
        let fa = FeedbackSet::for_model(&model, FeedbackMode::Fa, FeedbackPolicy::Fixed, 1).unwrap();
        assert!(fa.get(0).is_none());
        assert_eq!(fa.get(1).unwrap().shape(), [5, 4]);
        assert_eq!(fa.get(2).unwrap().shape(), [4, 3]);
        let dfa = FeedbackSet::for_model(&model, FeedbackMode::Dfa, FeedbackPolicy::Fixed, 1).unwrap();
        assert_eq!(dfa.get(0).unwrap().shape(), [5, 3]);
        assert_eq!(dfa.get(1).unwrap().shape(), [4, 3]);
        assert!(dfa.get(2).is_none());
        assert!(FeedbackSet::for_model(&model, FeedbackMode::Dfa, FeedbackPolicy::Symmetric, 1).is_err());
    }

    #[test]
    fn per_iteration_set_redraws_each_step() {
        let spec = ModelSpec::fc(6, &[5], 3);
        let model = Model::<f64>::build(&spec, 1).unwrap();
        let mut set = FeedbackSet::for_model(&model, FeedbackMode::Dfa, FeedbackPolicy::PerIteration, 9).unwrap();
        let draw0 = set.get(0).unwrap().matrix().clone();
        set.prepare_step(&model).unwrap();
        assert!(set.get(0).unwrap().matrix().bit_eq(&draw0));
        set.prepare_step(&model).unwrap();
        let draw1 = set.get(0).unwrap().matrix().clone();
        assert!(!draw1.bit_eq(&draw0));

        let mut again = FeedbackSet::for_model(&model, FeedbackMode::Dfa, FeedbackPolicy::PerIteration, 9).unwrap();
        again.prepare_step(&model).unwrap();
        again.prepare_step(&model).unwrap();
        assert!(again.get(0).unwrap().matrix().bit_eq(&draw1));
    }
}
