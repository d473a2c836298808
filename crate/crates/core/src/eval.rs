//! Hate-class F1, McNemar's test, multi-seed aggregation and the
//! neighbor-voting analysis of learned representations.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::data::{normalize_embeddings, Dataset, LabeledInstance, HATE};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::neighbors::{build_index, majority_vote, query_topk};

/// Significance level used for the `*` marker.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

/// Precision, recall and F1 of the hate class. Undefined ratios are 0.
pub fn f1_hate(preds: &[u8], golds: &[u8]) -> Result<F1Report> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch(preds.len(), golds.len()));
    }
    if preds.is_empty() {
        return Err(Error::InvalidSize("no predictions to score".into()));
    }
    let mut c = Confusion::default();
    for (&p, &g) in preds.iter().zip(golds) {
        match (p == HATE, g == HATE) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if c.tp == 0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(F1Report {
        precision,
        recall,
        f1,
        confusion: c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    /// A right, B wrong.
    pub b: usize,
    /// A wrong, B right.
    pub c: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub significant: bool,
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_sf_1dof(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        gamma_ur(0.5, x / 2.0)
    }
}

/// Continuity-corrected McNemar test between two classifiers on shared gold labels.
pub fn mcnemar(preds_a: &[u8], preds_b: &[u8], golds: &[u8]) -> Result<McNemar> {
    if preds_a.len() != golds.len() {
        return Err(Error::LengthMismatch(preds_a.len(), golds.len()));
    }
    if preds_b.len() != golds.len() {
        return Err(Error::LengthMismatch(preds_b.len(), golds.len()));
    }
    let (mut b, mut c) = (0usize, 0usize);
    for ((&pa, &pb), &g) in preds_a.iter().zip(preds_b).zip(golds) {
        match (pa == g, pb == g) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    Ok(mcnemar_from_counts(b, c))
}

pub fn mcnemar_from_counts(b: usize, c: usize) -> McNemar {
    if b + c == 0 {
        return McNemar {
            b,
            c,
            statistic: 0.0,
            p_value: 1.0,
            significant: false,
        };
    }
    let corrected = (b.abs_diff(c) as f64 - 1.0).max(0.0);
    let statistic = corrected * corrected / (b + c) as f64;
    let p_value = chi2_sf_1dof(statistic);
    McNemar {
        b,
        c,
        statistic,
        p_value,
        significant: p_value < SIGNIFICANCE_LEVEL,
    }
}

/// Mean and population standard deviation.
pub fn aggregate_runs(scores: &[f64]) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::InvalidSize("no runs to aggregate".into()));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Per-seed F1 scores with their aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_seed: Vec<F1Report>,
    pub mean: f64,
    pub std: f64,
}

impl EvalReport {
    pub fn from_runs(per_seed: Vec<F1Report>) -> Result<Self> {
        let scores: Vec<f64> = per_seed.iter().map(|r| r.f1).collect();
        let (mean, std) = aggregate_runs(&scores)?;
        Ok(EvalReport { per_seed, mean, std })
    }
}

/// `71.6±2.1` style rendering of an F1 fraction, in points.
pub fn format_score(mean: f64, std: f64) -> String {
    format!("{:.1}±{:.1}", 100.0 * mean, 100.0 * std)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnAnalysisPoint {
    pub k: usize,
    /// Majority vote over neighbors in the sentence-embedding space.
    pub f1_raw: f64,
    /// Majority vote over neighbors in the encoder's representation space.
    pub f1_learned: f64,
}

fn encode_dataset(model: &ModelParams, d: &Dataset) -> Result<Dataset> {
    let x = Array2::from_shape_fn((d.len(), d.dim()), |(i, j)| d.instances()[i].embedding[j]);
    let z = model.encode_batch(x.view())?;
    let instances = d
        .instances()
        .iter()
        .zip(z.rows())
        .map(|(inst, row)| LabeledInstance {
            id: inst.id,
            label: inst.label,
            embedding: row.to_vec(),
        })
        .collect();
    normalize_embeddings(&Dataset::new(instances, model.hidden_dim(), d.role())?)
}

fn knn_curve(source: &Dataset, queries: &Dataset, ks: &[usize]) -> Result<Vec<f64>> {
    let index = build_index(source)?;
    let max_k = *ks.iter().max().expect("non-empty k list");
    let golds = queries.labels();
    let mut preds = vec![Vec::with_capacity(queries.len()); ks.len()];
    for q in queries.instances() {
        let ranked = query_topk(&index, &q.embedding, max_k)?;
        for (slot, &k) in ks.iter().enumerate() {
            preds[slot].push(majority_vote(&ranked[..k.min(ranked.len())]));
        }
    }
    preds.iter().map(|p| f1_hate(p, &golds).map(|r| r.f1)).collect()
}

/// Hate-F1 of top-k majority voting, per k, in the raw sentence-embedding
/// space and in the model's learned space. Inputs must be normalized.
pub fn representation_knn_analysis(
    model: &ModelParams,
    source: &Dataset,
    target_test: &Dataset,
    k_values: &[usize],
) -> Result<Vec<KnnAnalysisPoint>> {
    if k_values.is_empty() {
        return Err(Error::InvalidSize("no k values to analyze".into()));
    }
    if k_values.contains(&0) {
        return Err(Error::InvalidK);
    }
    let raw = knn_curve(source, target_test, k_values)?;
    let learned = knn_curve(
        &encode_dataset(model, source)?,
        &encode_dataset(model, target_test)?,
        k_values,
    )?;
    Ok(k_values
        .iter()
        .zip(raw.into_iter().zip(learned))
        .map(|(&k, (f1_raw, f1_learned))| KnnAnalysisPoint { k, f1_raw, f1_learned })
        .collect())
}
