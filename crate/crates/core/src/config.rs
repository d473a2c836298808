use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::OTParams;

/// Training strategies: the four neighborhood-aware OT variants plus the
/// fine-tuning baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TargetFt,
    SeqFt,
    MixedFt,
    KnnFt,
    Otnn,
    OtnnPreselect,
    OtnnSloss,
    OtnnPreselectSloss,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::TargetFt,
        Method::SeqFt,
        Method::MixedFt,
        Method::KnnFt,
        Method::Otnn,
        Method::OtnnPreselect,
        Method::OtnnSloss,
        Method::OtnnPreselectSloss,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::TargetFt => "target_ft",
            Method::SeqFt => "seq_ft",
            Method::MixedFt => "mixed_ft",
            Method::KnnFt => "knn_ft",
            Method::Otnn => "otnn",
            Method::OtnnPreselect => "otnn_preselect",
            Method::OtnnSloss => "otnn_sloss",
            Method::OtnnPreselectSloss => "otnn_preselect_sloss",
        }
    }

    pub fn is_ot(&self) -> bool {
        matches!(
            self,
            Method::Otnn | Method::OtnnPreselect | Method::OtnnSloss | Method::OtnnPreselectSloss
        )
    }

    /// Training restricted to the union of the targets' source neighbors.
    pub fn uses_preselect(&self) -> bool {
        matches!(self, Method::KnnFt | Method::OtnnPreselect | Method::OtnnPreselectSloss)
    }

    pub fn needs_source(&self) -> bool {
        !matches!(self, Method::TargetFt)
    }

    /// Source cross-entropy weight implied by the method, if it fixes one.
    pub fn forced_theta_s(&self) -> Option<f64> {
        match self {
            Method::Otnn | Method::OtnnPreselect => Some(0.0),
            Method::OtnnSloss | Method::OtnnPreselectSloss => Some(1.0),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// Label-consistency cost between two ground-truth labels in the gamma step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelCost {
    /// 0 when the labels agree, 1 otherwise.
    Indicator,
    /// Cross-entropy of the target label under the source one-hot smoothed
    /// by `smoothing` towards uniform.
    SmoothedCe { smoothing: f64 },
}

impl LabelCost {
    pub fn between(&self, source: u8, target: u8, num_classes: usize) -> f64 {
        match *self {
            LabelCost::Indicator => (source != target) as u8 as f64,
            LabelCost::SmoothedCe { smoothing } => {
                let uniform = smoothing / num_classes as f64;
                let q = if source == target {
                    1.0 - smoothing + uniform
                } else {
                    uniform
                };
                -q.ln()
            }
        }
    }
}

/// Neighbor-count grid searched on the target validation split.
pub const K_GRID: [usize; 9] = [10, 30, 50, 70, 100, 200, 300, 400, 500];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub theta_s: f64,
    pub theta_t: f64,
    pub k: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epoch budget of the source phase of sequential fine-tuning.
    pub source_epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub hidden_dim: usize,
    pub use_ed: bool,
    pub use_lc: bool,
    pub label_cost: LabelCost,
    pub ot_tol: f64,
    pub ot_max_iter: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Otnn,
            alpha: 0.05,
            beta: 10.0,
            epsilon: 0.2,
            lambda: 0.5,
            theta_s: 0.0,
            theta_t: 10.0,
            k: 100,
            batch_size: 32,
            epochs: 10,
            source_epochs: 10,
            seed: 0,
            learning_rate: 1e-3,
            hidden_dim: 64,
            use_ed: true,
            use_lc: true,
            label_cost: LabelCost::Indicator,
            ot_tol: 1e-6,
            ot_max_iter: 1000,
        }
    }
}

impl TrainConfig {
    /// Defaults with the source weight appropriate for `method`: 0 for the
    /// OT variants without source loss and for target-only training, 1 otherwise.
    pub fn for_method(method: Method) -> Self {
        let theta_s = method.forced_theta_s().unwrap_or(match method {
            Method::TargetFt => 0.0,
            _ => 1.0,
        });
        TrainConfig {
            method,
            theta_s,
            ..TrainConfig::default()
        }
    }

    pub fn ot_params(&self) -> OTParams {
        OTParams {
            epsilon: self.epsilon,
            lambda: self.lambda,
            tol: self.ot_tol,
            max_iter: self.ot_max_iter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("theta_s", self.theta_s),
            ("theta_t", self.theta_t),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        let positive = [
            ("epsilon", self.epsilon),
            ("lambda", self.lambda),
            ("learning_rate", self.learning_rate),
            ("ot_tol", self.ot_tol),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        let counts = [
            ("k", self.k),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("hidden_dim", self.hidden_dim),
            ("ot_max_iter", self.ot_max_iter),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.use_ed && !self.use_lc {
            return Err(Error::Config("at least one of use_ed / use_lc must be enabled".into()));
        }
        if let LabelCost::SmoothedCe { smoothing } = self.label_cost {
            if !(smoothing > 0.0 && smoothing < 1.0) {
                return Err(Error::Config(format!(
                    "label smoothing must lie in (0, 1), got {smoothing}"
                )));
            }
        }
        Ok(())
    }
}
