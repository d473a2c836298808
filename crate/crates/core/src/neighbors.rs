//! Exact cosine k-NN retrieval from target queries into the source corpus,
//! cost masking and the neighbor-voting baselines.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::ot::CostMatrix;

/// Norm tolerance for vectors entering the index or used as queries.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: u64,
    pub similarity: f64,
    pub label: u8,
}

/// Read-only store of unit-normalized source embeddings.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    ids: Vec<u64>,
    labels: Vec<u8>,
    vectors: Array2<f64>,
}

pub fn build_index(source: &Dataset) -> Result<NeighborIndex> {
    if !source.is_normalized(UNIT_NORM_TOL) {
        return Err(Error::Precondition("index vectors must be unit-normalized".into()));
    }
    let dim = source.dim();
    let mut vectors = Array2::zeros((source.len(), dim));
    for (row, inst) in source.instances().iter().enumerate() {
        for (d, x) in inst.embedding.iter().enumerate() {
            vectors[[row, d]] = *x;
        }
    }
    Ok(NeighborIndex {
        ids: source.ids(),
        labels: source.labels(),
        vectors,
    })
}

impl NeighborIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Cosine similarity of `query` against every stored vector, in index order.
    fn similarities(&self, query: &[f64]) -> Vec<f64> {
        self.vectors
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(query).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Top-`k` neighbors by cosine similarity; ties go to the smaller source id.
pub fn query_topk(index: &NeighborIndex, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
    if k == 0 {
        return Err(Error::InvalidK);
    }
    if query.len() != index.dim() {
        return Err(Error::Shape(format!(
            "query has dimension {}, index has {}",
            query.len(),
            index.dim()
        )));
    }
    let norm = crate::data::l2_norm(query);
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::Precondition(format!("query norm {norm} is not 1")));
    }
    let sims = index.similarities(query);
    let mut order: Vec<usize> = (0..sims.len()).collect();
    let by_rank = |&x: &usize, &y: &usize| {
        sims[y]
            .total_cmp(&sims[x])
            .then_with(|| index.ids[x].cmp(&index.ids[y]))
    };
    let k = k.min(order.len());
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, by_rank);
        order.truncate(k);
    }
    order.sort_unstable_by(by_rank);
    Ok(order
        .into_iter()
        .map(|row| Neighbor {
            id: index.ids[row],
            similarity: sims[row],
            label: index.labels[row],
        })
        .collect())
}

/// Per-target ordered neighbor lists.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborSet {
    lists: BTreeMap<u64, Vec<Neighbor>>,
    members: HashMap<u64, HashSet<u64>>,
}

impl NeighborSet {
    pub fn insert(&mut self, target_id: u64, neighbors: Vec<Neighbor>) {
        self.members.insert(target_id, neighbors.iter().map(|n| n.id).collect());
        self.lists.insert(target_id, neighbors);
    }

    pub fn get(&self, target_id: u64) -> Option<&[Neighbor]> {
        self.lists.get(&target_id).map(|v| v.as_slice())
    }

    /// Whether `source_id` is among the neighbors of `target_id`.
    pub fn contains(&self, target_id: u64, source_id: u64) -> Result<bool> {
        self.members
            .get(&target_id)
            .map(|s| s.contains(&source_id))
            .ok_or(Error::Mapping(target_id))
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// Targets in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (u64, &[Neighbor])> {
        self.lists.iter().map(|(t, v)| (*t, v.as_slice()))
    }
}

/// Neighbor lists for every instance of `targets` (which must be normalized).
pub fn compute_neighbors(index: &NeighborIndex, targets: &Dataset, k: usize) -> Result<NeighborSet> {
    let mut set = NeighborSet::default();
    for inst in targets.instances() {
        set.insert(inst.id, query_topk(index, &inst.embedding, k)?);
    }
    Ok(set)
}

/// Result of masking one batch cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedCost {
    pub cost: CostMatrix,
    /// Value written into non-neighbor cells.
    pub fill: f64,
    pub masked_cells: usize,
    /// Batch targets none of whose neighbors made it into the source half.
    pub fully_masked_targets: usize,
}

/// Sets every non-neighbor cell to the batch maximum of `c`.
pub fn neighborhood_mask(
    c: &CostMatrix,
    neighbors: &NeighborSet,
    batch_src_ids: &[u64],
    batch_tgt_ids: &[u64],
) -> Result<MaskedCost> {
    neighborhood_mask_with_fill(c, neighbors, batch_src_ids, batch_tgt_ids, c.max())
}

/// As [`neighborhood_mask`] with an explicit fill value.
pub fn neighborhood_mask_with_fill(
    c: &CostMatrix,
    neighbors: &NeighborSet,
    batch_src_ids: &[u64],
    batch_tgt_ids: &[u64],
    fill: f64,
) -> Result<MaskedCost> {
    let (n, m) = c.shape();
    if batch_src_ids.len() != n || batch_tgt_ids.len() != m {
        return Err(Error::Shape(format!(
            "cost is {n}x{m} but batch has {} sources and {} targets",
            batch_src_ids.len(),
            batch_tgt_ids.len()
        )));
    }
    let mut out = c.entries().clone();
    let mut masked_cells = 0;
    let mut fully_masked_targets = 0;
    for (j, &t) in batch_tgt_ids.iter().enumerate() {
        let mut any_neighbor = false;
        for (i, &s) in batch_src_ids.iter().enumerate() {
            if neighbors.contains(t, s)? {
                any_neighbor = true;
            } else {
                out[[i, j]] = fill;
                masked_cells += 1;
            }
        }
        if !any_neighbor {
            fully_masked_targets += 1;
        }
    }
    Ok(MaskedCost {
        cost: CostMatrix::new(out)?,
        fill,
        masked_cells,
        fully_masked_targets,
    })
}

/// Label with the largest summed similarity; exact ties go to the lower class.
pub fn weighted_vote(neighbors: &[Neighbor]) -> u8 {
    let mut scores = [0.0f64; NUM_CLASSES];
    for n in neighbors {
        scores[n.label as usize] += n.similarity;
    }
    crate::model::argmax(scores.iter().copied()) as u8
}

/// Most frequent label; ties are settled by [`weighted_vote`] over the
/// neighbors of the tied classes.
pub fn majority_vote(neighbors: &[Neighbor]) -> u8 {
    let mut counts = [0usize; NUM_CLASSES];
    for n in neighbors {
        counts[n.label as usize] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0);
    let tied: Vec<usize> = (0..NUM_CLASSES).filter(|&c| counts[c] == top).collect();
    if tied.len() == 1 {
        return tied[0] as u8;
    }
    let contenders: Vec<Neighbor> = neighbors
        .iter()
        .filter(|n| tied.contains(&(n.label as usize)))
        .copied()
        .collect();
    weighted_vote(&contenders)
}

pub fn knn_ranking_predict(index: &NeighborIndex, query: &[f64], k: usize) -> Result<u8> {
    Ok(majority_vote(&query_topk(index, query, k)?))
}

pub fn weighted_knn_predict(index: &NeighborIndex, query: &[f64], k: usize) -> Result<u8> {
    Ok(weighted_vote(&query_topk(index, query, k)?))
}

/// Union of all neighbor ids, ascending.
pub fn preselect_sources(neighbors: &NeighborSet) -> Vec<u64> {
    neighbors
        .iter()
        .flat_map(|(_, list)| list.iter().map(|n| n.id))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// One JSONL line of an exported neighbor set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborRecord {
    pub target_id: u64,
    pub neighbors: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn to_records(&self) -> Vec<NeighborRecord> {
        self.iter()
            .map(|(target_id, list)| NeighborRecord {
                target_id,
                neighbors: list.to_vec(),
            })
            .collect()
    }
}
