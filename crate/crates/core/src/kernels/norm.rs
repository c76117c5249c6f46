//! Per-channel batch normalization over `N × H × W`.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const BN_EPSILON: f64 = 1e-3;
/// Weight kept on the old running statistic at each training step.
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Forward result with the context the backward rule needs.
pub struct BatchNormForward<T> {
    pub output: Tensor<T>,
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Batch mean and biased variance (train mode only).
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

fn check_channels<T: Element>(op: &'static str, c: usize, v: &Tensor<T>, what: &str) -> Result<()> {
    if v.shape() != [c] {
        return Err(Error::shape(
            op,
            format!("channel axis: {what} has shape {:?} but input has {c} channels", v.shape()),
        ));
    }
    Ok(())
}

pub fn batch_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: Mode,
) -> Result<BatchNormForward<T>> {
    const OP: &str = "batch_norm";
    let (n, c, h, w) = x.dims4(OP)?;
    for (t, what) in [
        (gamma, "gamma"),
        (beta, "beta"),
        (running_mean, "running mean"),
        (running_var, "running variance"),
    ] {
        check_channels(OP, c, t, what)?;
    }
    let area = h * w;
    let count = n * area;
    if count == 0 {
        return Err(Error::dim(OP, "empty batch"));
    }
    let data = x.data();
    let eps = T::from_f64(BN_EPSILON);
    let (mean, var, batch_stats) = match mode {
        Mode::Train => {
            let inv_count = T::from_f64(1.0 / count as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s += data[(b * c + ch) * area..][..area].iter().copied().sum::<T>();
                }
                let m = s * inv_count;
                let mut v = T::zero();
                for b in 0..n {
                    for &xv in &data[(b * c + ch) * area..][..area] {
                        v += (xv - m) * (xv - m);
                    }
                }
                mean[ch] = m;
                var[ch] = v * inv_count;
            }
            (mean.clone(), var.clone(), Some((mean, var)))
        }
        Mode::Infer => (running_mean.data().to_vec(), running_var.data().to_vec(), None),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = vec![T::zero(); data.len()];
    let mut output = vec![T::zero(); data.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * area;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in off..off + area {
                let xh = (data[i] - mean[ch]) * inv_std[ch];
                normalized[i] = xh;
                output[i] = g * xh + bt;
            }
        }
    }
    Ok(BatchNormForward {
        output: Tensor::from_vec(x.shape(), output)?,
        normalized: Tensor::from_vec(x.shape(), normalized)?,
        inv_std,
        batch_stats,
    })
}

/// Exponential moving average update of running statistics.
pub fn update_running<T: Element>(running: &mut Tensor<T>, batch: &[T]) {
    let keep = T::from_f64(BN_MOMENTUM);
    let take = T::one() - keep;
    for (r, &b) in running.data_mut().iter_mut().zip(batch) {
        *r = keep * *r + take * b;
    }
}

/// Gradients `(input, gamma, beta)`.
pub fn batch_norm_backward<T: Element>(
    normalized: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
    mode: Mode,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = normalized.shape();
    let (n, c, area) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = T::from_f64((n * area) as f64);
    let xh = normalized.data();
    let dy = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * area;
            for i in off..off + area {
                dgamma[ch] += dy[i] * xh[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * area;
            let scale = gamma.data()[ch] * inv_std[ch];
            for i in off..off + area {
                dx[i] = match mode {
                    Mode::Infer => dy[i] * scale,
                    Mode::Train => {
                        scale * (dy[i] - dbeta[ch] / count - xh[i] * dgamma[ch] / count)
                    }
                };
            }
        }
    }
    (
        Tensor::from_vec(shape, dx).expect("bn dx"),
        Tensor::from_vec(&[c], dgamma).expect("bn dgamma"),
        Tensor::from_vec(&[c], dbeta).expect("bn dbeta"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn channel_moments(t: &Tensor<f64>, ch: usize) -> (f64, f64) {
        let s = t.shape();
        let (n, c, area) = (s[0], s[1], s[2] * s[3]);
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| t.data()[(b * c + ch) * area..][..area].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(&[4, 3, 5, 5], -2.0, 7.0, &mut rng);
        let ones = Tensor::ones(&[3]);
        let zeros = Tensor::zeros(&[3]);
        let f = batch_norm(&x, &ones, &zeros, &zeros, &ones, Mode::Train).unwrap();
        for ch in 0..3 {
            let (m, v) = channel_moments(&f.output, ch);
            let (_, raw_v) = channel_moments(&x, ch);
            assert!(m.abs() < 1e-5, "mean {m}");
            // epsilon shrinks the variance slightly below one
            assert!((v - raw_v / (raw_v + BN_EPSILON)).abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn scale_and_shift_move_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::uniform(&[8, 1, 4, 4], -1.0, 1.0, &mut rng);
        let gamma = Tensor::full(&[1], 2.0);
        let beta = Tensor::full(&[1], 3.0);
        let zeros = Tensor::zeros(&[1]);
        let ones = Tensor::ones(&[1]);
        let f = batch_norm(&x, &gamma, &beta, &zeros, &ones, Mode::Train).unwrap();
        let (m, v) = channel_moments(&f.output, 0);
        assert!((m - 3.0).abs() < 1e-9);
        assert!((v.sqrt() - 2.0).abs() < 0.01);
    }

    #[test]
    fn zero_variance_is_finite() {
        let x = Tensor::<f32>::full(&[2, 1, 3, 3], 4.0);
        let ones = Tensor::ones(&[1]);
        let zeros = Tensor::zeros(&[1]);
        let f = batch_norm(&x, &ones, &zeros, &zeros, &ones, Mode::Train).unwrap();
        assert!(f.output.is_finite());
        assert!(f.output.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut r = Tensor::<f64>::zeros(&[2]);
        update_running(&mut r, &[1.0, 2.0]);
        assert!((r.data()[0] - 0.01).abs() < 1e-15);
        assert!((r.data()[1] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f32>::ones(&[1, 3, 2, 2]);
        let p = Tensor::ones(&[2]);
        assert!(matches!(
            batch_norm(&x, &p, &p, &p, &p, Mode::Infer),
            Err(Error::Shape { .. })
        ));
    }
}
