//! Fully connected layer, softmax and categorical cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Probabilities are clamped to `[CCE_CLAMP, 1]` before the logarithm.
pub const CCE_CLAMP: f64 = 1e-7;

/// `x [N,D] · weightsᵀ [D,K] + bias [K]`.
pub fn linear<T: Element>(x: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = x.dims2("linear")?;
    let (k, wd) = weights.dims2("linear")?;
    if wd != d {
        return Err(Error::shape(
            "linear",
            format!("feature axis: weights expect {wd} inputs but x has {d}"),
        ));
    }
    if bias.shape() != [k] {
        return Err(Error::shape(
            "linear",
            format!("bias shape {:?} does not match {k} outputs", bias.shape()),
        ));
    }
    let mut out = Vec::with_capacity(n * k);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    T::gemm(n, d, k, T::one(), x.data(), d as isize, 1, weights.data(), 1, d as isize, T::one(), &mut out, k as isize, 1);
    Tensor::from_vec(&[n, k], out)
}

/// Gradients `(x, weights, bias)` of [`linear`].
pub fn linear_backward<T: Element>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let k = weights.shape()[0];
    let dy = grad_out.data();
    let mut dx = vec![T::zero(); n * d];
    T::gemm(n, k, d, T::one(), dy, k as isize, 1, weights.data(), d as isize, 1, T::zero(), &mut dx, d as isize, 1);
    let mut dw = vec![T::zero(); k * d];
    T::gemm(k, n, d, T::one(), dy, 1, k as isize, x.data(), d as isize, 1, T::zero(), &mut dw, d as isize, 1);
    let mut db = vec![T::zero(); k];
    for row in dy.chunks(k) {
        for (a, &g) in db.iter_mut().zip(row) {
            *a += g;
        }
    }
    (
        Tensor::from_vec(&[n, d], dx).expect("linear dx"),
        Tensor::from_vec(&[k, d], dw).expect("linear dw"),
        Tensor::from_vec(&[k], db).expect("linear db"),
    )
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = logits.dims2("softmax")?;
    if k == 0 {
        return Err(Error::shape("softmax", "zero classes"));
    }
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - m).exp()));
        let z: T = out[start..].iter().copied().sum();
        for p in &mut out[start..] {
            *p /= z;
        }
    }
    Tensor::from_vec(logits.shape(), out)
}

/// Vector-Jacobian product of softmax given its output `probs`.
pub fn softmax_backward<T: Element>(probs: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let k = probs.shape()[1];
    let mut dx = Vec::with_capacity(probs.numel());
    for (p, g) in probs.data().chunks(k).zip(grad_out.data().chunks(k)) {
        let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
        dx.extend(p.iter().zip(g).map(|(&pi, &gi)| pi * (gi - dot)));
    }
    Tensor::from_vec(probs.shape(), dx).expect("softmax dx")
}

/// Checks that every row of `onehot` has exactly one 1 and zeros elsewhere.
pub fn validate_onehot<T: Element>(onehot: &Tensor<T>) -> Result<()> {
    let (_, k) = onehot.dims2("cce_loss")?;
    for (r, row) in onehot.data().chunks(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::InvalidArgument(format!(
                "cce_loss: row {r} is not a valid one-hot vector"
            )));
        }
    }
    Ok(())
}

/// Mean categorical cross-entropy `-(1/N) Σ log p[true]`.
pub fn cce_loss<T: Element>(probs: &Tensor<T>, onehot: &Tensor<T>) -> Result<T> {
    if probs.shape() != onehot.shape() {
        return Err(Error::shape(
            "cce_loss",
            format!("probs {:?} vs labels {:?}", probs.shape(), onehot.shape()),
        ));
    }
    validate_onehot(onehot)?;
    let n = probs.shape()[0];
    let eps = T::from_f64(CCE_CLAMP);
    let total: T = probs
        .data()
        .iter()
        .zip(onehot.data())
        .map(|(&p, &y)| y * -(p.max(eps).min(T::one())).ln())
        .sum();
    Ok(total / T::from_f64(n as f64))
}

pub fn cce_loss_backward<T: Element>(probs: &Tensor<T>, onehot: &Tensor<T>, grad: T) -> Tensor<T> {
    let n = T::from_f64(probs.shape()[0] as f64);
    let eps = T::from_f64(CCE_CLAMP);
    probs_zip(probs, onehot, |p, y| {
        if p < eps || p > T::one() {
            T::zero()
        } else {
            -grad * y / (p * n)
        }
    })
}

fn probs_zip<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("zip shape")
}

/// One-hot encoding of class indices.
pub fn one_hot<T: Element>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        data[i * classes + l] = T::one();
    }
    Tensor::from_vec(&[labels.len(), classes], data)
}
