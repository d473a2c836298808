//! Datasets of labeled sentence embeddings, discrete measures and the
//! synthetic domain-shift generator.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of classes in every shipped experiment (0 = non-hate, 1 = hate).
pub const NUM_CLASSES: usize = 2;

/// The positive class scored by the hate-class F1.
pub const HATE: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub id: u64,
    pub label: u8,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Source,
    TargetTrain,
    TargetVal,
    TargetTest,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::TargetTrain => "target-train",
            Role::TargetVal => "target-val",
            Role::TargetTest => "target-test",
        }
    }
}

/// An ordered, non-empty collection of instances sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    instances: Vec<LabeledInstance>,
    dim: usize,
    role: Role,
}

impl Dataset {
    /// Validates and wraps `instances`.
    ///
    /// Ids must be unique, labels below [`NUM_CLASSES`], and every embedding
    /// finite with length `dim`.
    pub fn new(instances: Vec<LabeledInstance>, dim: usize, role: Role) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if dim == 0 {
            return Err(Error::InvalidSize("embedding dimension must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(instances.len());
        for inst in &instances {
            if !seen.insert(inst.id) {
                return Err(Error::Integrity {
                    id: inst.id,
                    reason: "duplicate id".into(),
                });
            }
            if inst.label as usize >= NUM_CLASSES {
                return Err(Error::Integrity {
                    id: inst.id,
                    reason: format!("label {} outside 0..{}", inst.label, NUM_CLASSES),
                });
            }
            if inst.embedding.len() != dim {
                return Err(Error::Integrity {
                    id: inst.id,
                    reason: format!("embedding has dimension {}, expected {}", inst.embedding.len(), dim),
                });
            }
            if inst.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::Integrity {
                    id: inst.id,
                    reason: "non-finite embedding component".into(),
                });
            }
        }
        Ok(Dataset { instances, dim, role })
    }

    pub fn instances(&self) -> &[LabeledInstance] {
        &self.instances
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.instances.iter().map(|i| i.label).collect()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.instances.iter().map(|i| i.id).collect()
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Keeps only the instances whose id is in `ids`, preserving order.
    pub fn subset(&self, ids: &[u64]) -> Result<Dataset> {
        let keep: HashSet<u64> = ids.iter().copied().collect();
        let instances = self
            .instances
            .iter()
            .filter(|i| keep.contains(&i.id))
            .cloned()
            .collect();
        Dataset::new(instances, self.dim, self.role)
    }

    /// True when every embedding has unit l2 norm within `tol`.
    pub fn is_normalized(&self, tol: f64) -> bool {
        self.instances
            .iter()
            .all(|i| (l2_norm(&i.embedding) - 1.0).abs() <= tol)
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales every embedding to unit l2 norm.
pub fn normalize_embeddings(d: &Dataset) -> Result<Dataset> {
    let mut instances = Vec::with_capacity(d.len());
    for inst in d.instances() {
        let norm = l2_norm(&inst.embedding);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateEmbedding(inst.id));
        }
        instances.push(LabeledInstance {
            id: inst.id,
            label: inst.label,
            embedding: inst.embedding.iter().map(|x| x / norm).collect(),
        });
    }
    Ok(Dataset {
        instances,
        dim: d.dim,
        role: d.role,
    })
}

/// Non-negative weights over the instances of one side of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidSize("measure needs at least one atom".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::Domain(format!(
                "measure weight {w} is not a finite non-negative number"
            )));
        }
        Ok(DiscreteMeasure { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Compensated (Neumaier) sum of the weights.
    pub fn total_mass(&self) -> f64 {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for &w in &self.weights {
            let t = sum + w;
            comp += if sum.abs() >= w.abs() {
                (sum - t) + w
            } else {
                (w - t) + sum
            };
            sum = t;
        }
        sum + comp
    }
}

/// `n` atoms of weight exactly `1/n`.
pub fn make_uniform_measure(n: usize) -> Result<DiscreteMeasure> {
    if n == 0 {
        return Err(Error::InvalidSize("uniform measure over zero atoms".into()));
    }
    Ok(DiscreteMeasure {
        weights: vec![1.0 / n as f64; n],
    })
}

/// Sizes and shift for [`synth_generate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_source: usize,
    pub n_target_train: usize,
    pub n_target_val: usize,
    pub n_target_test: usize,
    pub dim: usize,
    pub shift: f64,
    pub seed: u64,
}

/// Half the distance between the two class means, in noise standard deviations.
pub const SYNTH_SEPARATION: f64 = 2.0;

/// The four splits produced by the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplits {
    pub source: Dataset,
    pub target_train: Dataset,
    pub target_val: Dataset,
    pub target_test: Dataset,
}

/// Two labeled Gaussian clusters per domain.
///
/// Class `c` has mean `(2c - 1) * SYNTH_SEPARATION * e0` and identity
/// covariance. Target points are the same draw rotated by `shift * pi/4` in
/// the `(e0, e1)` plane and translated by `shift * SYNTH_SEPARATION * e1`.
/// Ids run consecutively across source, target-train, target-val and
/// target-test. Embeddings are returned unnormalized.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthSplits> {
    let counts = [
        spec.n_source,
        spec.n_target_train,
        spec.n_target_val,
        spec.n_target_test,
    ];
    if counts.contains(&0) {
        return Err(Error::InvalidSize("every split needs at least one instance".into()));
    }
    if spec.dim < 2 {
        return Err(Error::InvalidSize("synthetic data needs dim >= 2".into()));
    }
    if !spec.shift.is_finite() {
        return Err(Error::Domain("shift must be finite".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let angle = spec.shift * std::f64::consts::FRAC_PI_4;
    let (sin, cos) = angle.sin_cos();
    let translation = spec.shift * SYNTH_SEPARATION;

    let mut next_id = 0u64;
    let mut draw = |n: usize, shifted: bool, role: Role, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let mut instances = Vec::with_capacity(n);
        for _ in 0..n {
            let label: u8 = if rng.random_bool(0.5) { 1 } else { 0 };
            let mut x: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
            x[0] += (2.0 * label as f64 - 1.0) * SYNTH_SEPARATION;
            if shifted {
                let (x0, x1) = (x[0], x[1]);
                x[0] = cos * x0 - sin * x1;
                x[1] = sin * x0 + cos * x1 + translation;
            }
            instances.push(LabeledInstance {
                id: next_id,
                label,
                embedding: x,
            });
            next_id += 1;
        }
        Dataset::new(instances, spec.dim, role)
    };

    let source = draw(spec.n_source, false, Role::Source, &mut rng)?;
    let target_train = draw(spec.n_target_train, true, Role::TargetTrain, &mut rng)?;
    let target_val = draw(spec.n_target_val, true, Role::TargetVal, &mut rng)?;
    let target_test = draw(spec.n_target_test, true, Role::TargetTest, &mut rng)?;
    Ok(SynthSplits {
        source,
        target_train,
        target_val,
        target_test,
    })
}
