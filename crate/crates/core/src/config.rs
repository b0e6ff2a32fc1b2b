//! Experiment configuration.

use serde::{Deserialize, Serialize};

use crate::error::{DagamError, Result};
use crate::features::FeatureConfig;
use crate::model::Architecture;

/// How the gradient-reversal coefficient evolves over training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaMode {
    /// `λ` fixed at the configured value.
    Constant,
    /// `λ · (2/(1+exp(-10p)) - 1)` with `p` the training progress in `[0, 1]`.
    Schedule,
    /// `λ = 0`: the domain head still trains, nothing reaches the features.
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLoss {
    Kl,
    Ce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub sigma: f64,
    /// `None` picks the built-in inter-hemisphere pairs present in the layout.
    pub global_pairs: Option<Vec<(String, String)>>,
    pub global_weight: f64,
    pub k: f64,
    pub gcn_layers: usize,
    pub gcn_width: usize,
    pub emotion_hidden: Vec<usize>,
    pub domain_hidden: Vec<usize>,
    pub lr: f64,
    pub lambda_mode: LambdaMode,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub emotion_loss: EmotionLoss,
    /// `false` detaches the domain head entirely.
    pub domain_adversarial: bool,
    pub features: FeatureConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            sigma: 5.0,
            global_pairs: None,
            global_weight: -1.0,
            k: 0.5,
            gcn_layers: 3,
            gcn_width: 64,
            emotion_hidden: vec![64, 32],
            domain_hidden: vec![32],
            lr: 1e-3,
            lambda_mode: LambdaMode::Constant,
            lambda: 1.0,
            batch_size: 32,
            epochs: 200,
            emotion_loss: EmotionLoss::Kl,
            domain_adversarial: true,
            features: FeatureConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DagamError::Config(msg));
        if !(self.k > 0.0 && self.k <= 1.0) {
            return bad(format!("k must lie in (0, 1], got {}", self.k));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(-1.0..=0.0).contains(&self.global_weight) {
            return bad(format!(
                "global weight must lie in [-1, 0], got {}",
                self.global_weight
            ));
        }
        if !self.lambda.is_finite() {
            return bad(format!("lambda must be finite, got {}", self.lambda));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.gcn_layers == 0 || self.gcn_width == 0 {
            return bad("need at least one GCN layer of positive width".into());
        }
        if self.features.bands.is_empty() {
            return bad("no frequency bands configured".into());
        }
        Ok(())
    }

    pub fn architecture(&self, classes: usize) -> Architecture {
        Architecture {
            in_features: self.features.bands.len(),
            gcn_hidden: vec![self.gcn_width; self.gcn_layers],
            emotion_hidden: self.emotion_hidden.clone(),
            domain_hidden: self.domain_hidden.clone(),
            classes,
        }
    }

    /// Reversal coefficient at training progress `p ∈ [0, 1]`.
    pub fn lambda_at(&self, p: f64) -> f64 {
        match self.lambda_mode {
            LambdaMode::Constant => self.lambda,
            LambdaMode::Schedule => self.lambda * lambda_schedule(p),
            LambdaMode::Off => 0.0,
        }
    }

    /// Seed of fold `i`: the master seed xor the fold index.
    pub fn fold_seed(&self, i: usize) -> u64 {
        self.seed ^ i as u64
    }
}

/// `2/(1+exp(-10p)) - 1`, rising from 0 at `p=0` towards 1.
pub fn lambda_schedule(p: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"k": 0.3, "epochs": 0}"#).unwrap();
        assert_eq!(partial.k, 0.3);
        assert_eq!(partial.lr, 1e-3);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"kk": 1}"#).is_err());
    }

    #[test]
    fn rejects_out_of_range() {
        for c in [
            ExperimentConfig {
                k: 0.0,
                ..Default::default()
            },
            ExperimentConfig {
                k: 1.1,
                ..Default::default()
            },
            ExperimentConfig {
                lr: 0.0,
                ..Default::default()
            },
            ExperimentConfig {
                global_weight: 0.5,
                ..Default::default()
            },
            ExperimentConfig {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(c.validate(), Err(DagamError::Config(_))));
        }
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(lambda_schedule(0.0), 0.0);
        assert!((lambda_schedule(1.0) - (2.0 / (1.0 + (-10.0f64).exp()) - 1.0)).abs() < 1e-15);
        assert!(lambda_schedule(0.3) < lambda_schedule(0.6));
        let c = ExperimentConfig {
            lambda_mode: LambdaMode::Off,
            ..Default::default()
        };
        assert_eq!(c.lambda_at(0.5), 0.0);
        assert_eq!(ExperimentConfig::default().fold_seed(3), 3);
    }
}
