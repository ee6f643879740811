//! Two-level training: the label generator is adjusted so that the
//! segmenter it supervises gets better on the foreground objective.

mod bilevel;
mod targets;
mod trainer;

pub use bilevel::{
    grad_l2, hypergradient, inner_step, params_axpy, BilevelProblem, EpsRule, HyperGrad,
};
pub use targets::{
    case_soft_mask, logits_to_q, plain_binary_field, roi_batch, soft_mask_batch, stack_fields,
    target_batch, target_field, target_graph, PatchView,
};
pub use trainer::{
    continue_training, continue_training_with, eval_on_cases, init_state, static_context,
    train_baseline, train_colab, train_with_static_context, write_metrics_csv, ContextProvider,
    EpochRecord, NetworkBilevel, TrainData, TrainOptions, TrainOutput, TrainState,
};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Training knobs. Config files carry exactly these field names; omitted
/// fields fall back to the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColabConfig {
    /// Context classes the generator invents.
    pub t: usize,
    /// Segmenter learning rate; doubles as the inner step size.
    pub alpha: f64,
    /// Generator learning rate.
    pub beta: f64,
    /// Heavy-ball coefficient for both optimizers.
    pub momentum: f64,
    /// Soft mask margin, pixels.
    pub m: f64,
    /// Soft mask decay length, pixels.
    pub tau: f64,
    /// Generator update every this many iterations (1-based); set beyond
    /// the total iteration count to freeze the generator.
    pub update_period: usize,
    /// Plain gradient steps inside the probe update.
    pub inner_steps: usize,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    /// Square patch side, pixels; must be divisible by 2^depth.
    pub patch_size: usize,
    /// Fraction of each batch drawn from windows that contain foreground.
    pub roi_patch_fraction: f64,
    /// Segmenter/generator channel width at full resolution.
    pub base_width: usize,
    /// Downsampling stages in both networks.
    pub depth: usize,
    pub seed: u64,
}

impl Default for ColabConfig {
    fn default() -> Self {
        ColabConfig {
            t: 2,
            alpha: 0.02,
            beta: 1e-3,
            momentum: 0.9,
            m: 10.0,
            tau: 7.0,
            update_period: 10,
            inner_steps: 1,
            epochs: 16,
            iters_per_epoch: 25,
            batch_size: 4,
            patch_size: 24,
            roi_patch_fraction: 0.7,
            base_width: 8,
            depth: 2,
            seed: 0,
        }
    }
}

impl ColabConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t < 2 {
            return Err(Error::invalid(format!("t must be >= 2, got {}", self.t)));
        }
        if self.update_period < 1 {
            return Err(Error::invalid("update_period must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.roi_patch_fraction) {
            return Err(Error::invalid(format!(
                "roi_patch_fraction must lie in [0, 1], got {}",
                self.roi_patch_fraction
            )));
        }
        if self.inner_steps < 1 {
            return Err(Error::invalid("inner_steps must be >= 1"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::invalid(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.m > 0.0) || !(self.tau > 0.0) {
            return Err(Error::invalid(format!("m and tau must be positive, got m={} tau={}", self.m, self.tau)));
        }
        if self.epochs < 1 || self.iters_per_epoch < 1 || self.batch_size < 1 {
            return Err(Error::invalid("epochs, iters_per_epoch and batch_size must be >= 1"));
        }
        if self.depth < 1 || self.base_width < 1 {
            return Err(Error::invalid("depth and base_width must be >= 1"));
        }
        let div = 1usize << self.depth;
        if self.patch_size == 0 || self.patch_size % div != 0 {
            return Err(Error::invalid(format!(
                "patch_size must be a positive multiple of {div}, got {}",
                self.patch_size
            )));
        }
        Ok(())
    }

    /// True when the generator is refreshed on this 0-based iteration.
    pub fn is_update_iteration(&self, iteration: usize) -> bool {
        (iteration + 1) % self.update_period == 0
    }

    pub fn total_iterations(&self) -> usize {
        self.epochs * self.iters_per_epoch
    }
}

#[cfg(test)]
mod config_tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ColabConfig::default().validate().unwrap();
    }

    #[test]
    fn invariants_rejected() {
        let mut c = ColabConfig { t: 1, ..Default::default() };
        assert!(c.validate().is_err());
        c = ColabConfig { update_period: 0, ..Default::default() };
        assert!(c.validate().is_err());
        c = ColabConfig { roi_patch_fraction: 1.5, ..Default::default() };
        assert!(c.validate().is_err());
        c = ColabConfig { patch_size: 30, depth: 2, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn update_schedule_is_one_based() {
        let c = ColabConfig { update_period: 10, ..Default::default() };
        assert!(!c.is_update_iteration(0));
        assert!(c.is_update_iteration(9));
        assert!(c.is_update_iteration(19));
        let frozen = ColabConfig { update_period: usize::MAX, ..Default::default() };
        assert!((0..1000).all(|i| !frozen.is_update_iteration(i)));
    }

    #[test]
    fn json_roundtrip_keeps_field_names() {
        let c = ColabConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        for key in [
            "\"t\"", "\"alpha\"", "\"beta\"", "\"m\"", "\"tau\"", "\"update_period\"",
            "\"inner_steps\"", "\"epochs\"", "\"batch_size\"", "\"roi_patch_fraction\"",
            "\"seed\"",
        ] {
            assert!(s.contains(key), "missing {key} in {s}");
        }
        let back: ColabConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back.t, c.t);
        assert_eq!(back.seed, c.seed);

        let partial: ColabConfig = serde_json::from_str(r#"{"t": 4, "alpha": 0.1}"#).unwrap();
        assert_eq!(partial.t, 4);
        assert_eq!(partial.alpha, 0.1);
        assert_eq!(partial.beta, ColabConfig::default().beta);

        let bad = serde_json::from_str::<ColabConfig>(r#"{"alpa": 0.1}"#);
        assert!(bad.unwrap_err().to_string().contains("alpa"));
    }
}
