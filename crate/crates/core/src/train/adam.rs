use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// First and second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Element> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m: Vec<Vec<T>> = params.into_iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update. Every gradient is checked before any
/// parameter changes, so a non-finite gradient leaves params and state intact.
///
/// `names` labels the tensors in the error message.
pub fn adam_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    names: &[&str],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} state slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.numel() {
            return Err(Error::shape(
                "adam_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            let name = names.get(i).copied().unwrap_or("?");
            return Err(Error::NonFinite(format!(
                "gradient of `{name}` {:?} holds {} at flat index {j} (step {})",
                g.shape(),
                g.data()[j],
                state.t + 1
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64(state.beta1);
    let b2 = T::from_f64(state.beta2);
    let one = T::one();
    let c1 = T::from_f64(1.0 - state.beta1.powi(t));
    let c2 = T::from_f64(1.0 - state.beta2.powi(t));
    let lr = T::from_f64(lr);
    let eps = T::from_f64(state.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
