use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedule over 1-based epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Schedule {
    Fixed,
    /// Constant for `flat_epochs`, then multiplied by `decay` every epoch.
    Adaptive {
        flat_epochs: usize,
        decay: f64,
        max_epochs: usize,
    },
}

impl Schedule {
    pub fn adaptive() -> Self {
        Schedule::Adaptive {
            flat_epochs: 7,
            decay: 0.95,
            max_epochs: 35,
        }
    }

    /// Accepts `fixed` or `adaptive` (with the default constants).
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "fixed" => Ok(Schedule::Fixed),
            "adaptive" => Ok(Self::adaptive()),
            other => Err(Error::Config(format!("unknown schedule `{other}`; use fixed or adaptive"))),
        }
    }
}

/// Learning rate for `epoch` (1-based).
pub fn lr_at(schedule: Schedule, base_lr: f64, epoch: usize) -> Result<f64> {
    if epoch == 0 {
        return Err(Error::InvalidArgument("epochs are numbered from 1".into()));
    }
    Ok(match schedule {
        Schedule::Fixed => base_lr,
        Schedule::Adaptive { flat_epochs, decay, .. } => {
            if epoch <= flat_epochs {
                base_lr
            } else {
                base_lr * decay.powf((epoch - flat_epochs) as f64)
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopping {
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self { patience: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub early_stopping: Option<EarlyStopping>,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    /// Relative train/valid/test weights, normalized before use.
    pub split_weights: [f64; 3],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            base_lr: 1e-4,
            schedule: Schedule::Fixed,
            epochs: 35,
            early_stopping: None,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            split_weights: [6.0, 2.0, 1.0],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if let Schedule::Adaptive { decay, max_epochs, .. } = self.schedule {
            if !(decay > 0.0 && decay <= 1.0) {
                return bad(format!("decay must lie in (0, 1], got {decay}"));
            }
            if self.epochs > max_epochs {
                return bad(format!("epochs {} exceed the schedule's max_epochs {max_epochs}", self.epochs));
            }
        }
        if let Some(es) = self.early_stopping {
            if es.patience == 0 {
                return bad("patience must be at least 1".into());
            }
        }
        let [b1, b2] = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || self.adam_eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.split_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.split_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("split weights must be non-negative with a positive sum".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        lr_at(self.schedule, self.base_lr, epoch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_rule() {
        let s = Schedule::adaptive();
        assert_eq!(lr_at(s, 1e-4, 1).unwrap(), 1e-4);
        assert_eq!(lr_at(s, 1e-4, 7).unwrap(), 1e-4);
        assert_eq!(lr_at(s, 1e-4, 8).unwrap(), 1e-4 * 0.95);
        assert!(lr_at(s, 1e-4, 0).is_err());
    }

    #[test]
    fn schedule_json_shape() {
        let s: Schedule = serde_json::from_str(r#"{"kind":"adaptive","flat_epochs":7,"decay":0.95,"max_epochs":35}"#).unwrap();
        assert_eq!(s, Schedule::adaptive());
        let f: Schedule = serde_json::from_str(r#"{"kind":"fixed"}"#).unwrap();
        assert_eq!(f, Schedule::Fixed);
    }

    #[test]
    fn invalid_settings_rejected() {
        for cfg in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { early_stopping: Some(EarlyStopping { patience: 0 }), ..Default::default() },
            TrainConfig {
                schedule: Schedule::Adaptive { flat_epochs: 7, decay: 1.5, max_epochs: 35 },
                ..Default::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
