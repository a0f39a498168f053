//! Output losses. Over a batch the loss is the mean of the per-sample losses,
//! so the returned delta is the per-sample error divided by the batch size.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// `½‖y − a‖²`, error `a − y`.
    Mse,
    /// Softmax followed by cross-entropy against a one-hot target, error `softmax(z) − y`.
    SoftmaxCrossEntropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::SoftmaxCrossEntropy => "softmax_ce",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mse" => Some(LossKind::Mse),
            "softmax_ce" => Some(LossKind::SoftmaxCrossEntropy),
            _ => None,
        }
    }

    pub fn loss_and_delta<T: Scalar>(
        self,
        prediction: &Tensor<T>,
        target: &Tensor<T>,
        tag: &str,
    ) -> Result<(f64, Tensor<T>)> {
        match self {
            LossKind::Mse => mse_loss_and_delta(prediction, target, tag),
            LossKind::SoftmaxCrossEntropy => softmax_ce_loss_and_delta(prediction, target, tag),
        }
    }
}

fn batch_dims<T: Scalar>(op: &'static str, p: &Tensor<T>, y: &Tensor<T>) -> Result<(usize, usize)> {
    if p.shape() != y.shape() || p.rank() > 2 {
        return Err(Error::shape(op, p.shape(), y.shape()));
    }
    Ok(if p.rank() == 1 {
        (1, p.len())
    } else {
        (p.shape()[0], p.shape()[1])
    })
}

pub fn mse_loss_and_delta<T: Scalar>(
    prediction: &Tensor<T>,
    target: &Tensor<T>,
    tag: &str,
) -> Result<(f64, Tensor<T>)> {
    let (batch, _) = batch_dims("mse", prediction, target)?;
    let inv = T::from_f64(1.0 / batch as f64);
    let mut sq = 0.0;
    let delta: Vec<T> = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &y)| {
            let d = a - y;
            sq += d.as_f64() * d.as_f64();
            d * inv
        })
        .collect();
    let loss = 0.5 * sq / batch as f64;
    Ok((loss, Tensor::from_vec(prediction.shape(), delta, tag)?))
}

pub fn softmax_ce_loss_and_delta<T: Scalar>(
    logits: &Tensor<T>,
    onehot: &Tensor<T>,
    tag: &str,
) -> Result<(f64, Tensor<T>)> {
    let (batch, classes) = batch_dims("softmax_ce", logits, onehot)?;
    let inv = T::from_f64(1.0 / batch as f64);
    let mut delta = Vec::with_capacity(logits.len());
    let mut total = 0.0;
    for (b, (z, y)) in logits
        .data()
        .chunks(classes)
        .zip(onehot.data().chunks(classes))
        .enumerate()
    {
        let hot = one_hot_index(y).ok_or_else(|| {
            Error::invalid("softmax_ce", format!("target row {b} is not one-hot"))
        })?;
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        total += -((z[hot] - max).as_f64() - sum.as_f64().ln());
        delta.extend(
            exps.iter()
                .zip(y)
                .map(|(&e, &t)| (e / sum - t) * inv),
        );
    }
    Ok((total / batch as f64, Tensor::from_vec(logits.shape(), delta, tag)?))
}

fn one_hot_index<T: Scalar>(row: &[T]) -> Option<usize> {
    let mut hot = None;
    for (i, &v) in row.iter().enumerate() {
        if v == T::one() {
            if hot.is_some() {
                return None;
            }
            hot = Some(i);
        } else if v != T::zero() {
            return None;
        }
    }
    hot
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[data.len()], data.to_vec(), "t").unwrap()
    }

    fn fd_check(kind: LossKind, z: &[f64], y: &[f64], tol: f64) {
        let h = 1e-6;
        let (_, delta) = kind.loss_and_delta(&v(z), &v(y), "d").unwrap();
        for i in 0..z.len() {
            let mut plus = z.to_vec();
            let mut minus = z.to_vec();
            plus[i] += h;
            minus[i] -= h;
            let lp = kind.loss_and_delta(&v(&plus), &v(y), "d").unwrap().0;
            let lm = kind.loss_and_delta(&v(&minus), &v(y), "d").unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - delta.data()[i]).abs() < tol, "{kind:?} [{i}]: fd {fd} vs {}", delta.data()[i]);
        }
    }

    #[test]
    fn mse_cases() {
        let (l, d) = mse_loss_and_delta(&v(&[0.3, 0.7]), &v(&[0.3, 0.7]), "d").unwrap();
        assert_eq!(l, 0.0);
        assert!(d.data().iter().all(|&x| x == 0.0));

        let (l, d) = mse_loss_and_delta(&v(&[0.8, 0.2]), &v(&[1.0, 0.0]), "d").unwrap();
        assert!((l - 0.04).abs() < 1e-12);
        assert!((d.data()[0] + 0.2).abs() < 1e-12 && (d.data()[1] - 0.2).abs() < 1e-12);
        assert!(mse_loss_and_delta(&v(&[1.0]), &v(&[1.0, 2.0]), "d").is_err());
    }

    #[test]
    fn softmax_ce_cases() {
        let (l, _) = softmax_ce_loss_and_delta(&v(&[0.5; 10]), &v(&one_hot(3, 10)), "d").unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);

        let (l, d) = softmax_ce_loss_and_delta(&v(&[1000.0, 0.0]), &v(&[1.0, 0.0]), "d").unwrap();
        assert!(l.is_finite() && l.abs() < 1e-12);
        assert!(d.all_finite());

        let err = softmax_ce_loss_and_delta(&v(&[0.0, 0.0]), &v(&[0.5, 0.5]), "d");
        assert!(err.is_err());
        assert!(softmax_ce_loss_and_delta(&v(&[0.0, 0.0]), &v(&[0.0, 0.0]), "d").is_err());
    }

    fn one_hot(i: usize, n: usize) -> Vec<f64> {
        (0..n).map(|j| if j == i { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn deltas_match_finite_differences() {
        let z = [0.3, -1.2, 2.5, 0.1, -0.4];
        fd_check(LossKind::SoftmaxCrossEntropy, &z, &one_hot(2, 5), 1e-6);
        fd_check(LossKind::Mse, &z, &[0.1, 0.9, -0.3, 0.0, 1.5], 1e-6);
    }

    #[test]
    fn batched_delta_is_mean_gradient() {
        let p = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 3.0], "p").unwrap();
        let y = Tensor::<f64>::from_vec(&[2, 2], vec![0.0, 0.0, 0.0, 1.0], "y").unwrap();
        let (l, d) = mse_loss_and_delta(&p, &y, "d").unwrap();
        assert!((l - 0.5 * (1.0 + 4.0) / 2.0).abs() < 1e-12);
        assert_eq!(d.data(), &[0.5, 0.0, 0.0, 1.0]);
    }
}
