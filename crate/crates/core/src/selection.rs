//! Per-cluster facility-location selection under a cardinality budget.
//!
//! For a cluster with members `V` and a candidate set `S ⊆ V`,
//!
//! ```text
//! F(S) = Σ_{i ∈ V} max_{s ∈ S} sim(i, s),    F(∅) = 0
//! ```
//!
//! Similarities are only ever materialized inside one cluster's
//! [`SimilarityBlock`]; there is no corpus-wide similarity matrix.
//!
//! Cosine similarities can be negative. For non-empty `A ⊆ B` the function
//! is monotone and has diminishing returns; the step from `∅` to a singleton
//! `{s}` is exactly the column sum of `s`, which may be negative. The greedy
//! therefore evaluates every singleton exactly before switching to lazy
//! evaluation, so the lazy bound is only relied on where it holds.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterModel;
use crate::corpus::{Corpus, RecordId};
use crate::embedding::EmbeddingVector;

#[derive(Debug, thiserror::Error)]
pub enum SelectionError {
    #[error("member index {index} out of range for block of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("similarity matrix is not square ({rows} rows, row {row} has {cols})")]
    NotSquare { rows: usize, row: usize, cols: usize },
    #[error("similarity matrix is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
    #[error("{members} member ids for a {rows}x{rows} matrix")]
    MemberCount { members: usize, rows: usize },
    #[error("budget: {0}")]
    Budget(String),
    #[error("inputs disagree: {0}")]
    Inconsistent(String),
}

/// Cosine similarities among the members of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBlock {
    cluster: usize,
    members: Vec<RecordId>,
    n: usize,
    sims: Vec<f64>,
}

impl SimilarityBlock {
    /// Builds the block from unit vectors. The diagonal is exactly 1 and
    /// bit-identical vectors get similarity exactly 1.
    pub fn from_vectors(cluster: usize, members: Vec<RecordId>, vectors: &[&EmbeddingVector]) -> Result<Self, SelectionError> {
        let n = members.len();
        if vectors.len() != n {
            return Err(SelectionError::MemberCount { members: n, rows: vectors.len() });
        }
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (i + 1..n)
                    .map(|j| {
                        if vectors[i] == vectors[j] {
                            1.0
                        } else {
                            vectors[i].dot(vectors[j]).clamp(-1.0, 1.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let mut sims = vec![0.0; n * n];
        for (i, row) in rows.into_iter().enumerate() {
            sims[i * n + i] = 1.0;
            for (off, s) in row.into_iter().enumerate() {
                let j = i + 1 + off;
                sims[i * n + j] = s;
                sims[j * n + i] = s;
            }
        }
        Ok(Self { cluster, members, n, sims })
    }

    /// Builds a block from an explicit symmetric matrix.
    pub fn from_matrix(cluster: usize, members: Vec<RecordId>, rows: &[Vec<f64>]) -> Result<Self, SelectionError> {
        let n = rows.len();
        if members.len() != n {
            return Err(SelectionError::MemberCount { members: members.len(), rows: n });
        }
        for (row, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(SelectionError::NotSquare { rows: n, row, cols: r.len() });
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                if rows[i][j] != rows[j][i] {
                    return Err(SelectionError::NotSymmetric(i, j));
                }
            }
        }
        Ok(Self {
            cluster,
            members,
            n,
            sims: rows.concat(),
        })
    }

    pub fn cluster(&self) -> usize {
        self.cluster
    }

    pub fn members(&self) -> &[RecordId] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn sim(&self, i: usize, j: usize) -> f64 {
        self.sims[i * self.n + j]
    }

    fn column_sum(&self, s: usize) -> f64 {
        (0..self.n).map(|i| self.sim(i, s)).sum()
    }
}

fn check_indices(block: &SimilarityBlock, subset: &[usize]) -> Result<(), SelectionError> {
    match subset.iter().find(|&&s| s >= block.len()) {
        Some(&index) => Err(SelectionError::IndexOutOfRange { index, len: block.len() }),
        None => Ok(()),
    }
}

/// `F(subset)`; the empty subset scores 0.
pub fn facility_location_value(block: &SimilarityBlock, subset: &[usize]) -> Result<f64, SelectionError> {
    check_indices(block, subset)?;
    if subset.is_empty() {
        return Ok(0.0);
    }
    Ok((0..block.len())
        .map(|i| subset.iter().map(|&s| block.sim(i, s)).fold(f64::NEG_INFINITY, f64::max))
        .sum())
}

/// `F(subset ∪ {s}) − F(subset)`.
pub fn marginal_gain(block: &SimilarityBlock, subset: &[usize], s: usize) -> Result<f64, SelectionError> {
    check_indices(block, subset)?;
    check_indices(block, &[s])?;
    let mut with = subset.to_vec();
    with.push(s);
    Ok(facility_location_value(block, &with)? - facility_location_value(block, subset)?)
}

/// Greedy picks, in pick order, plus the realized `F` of the picked set.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedySelection {
    pub picks: Vec<usize>,
    pub value: f64,
}

#[derive(Debug, PartialEq)]
struct Candidate {
    gain: f64,
    index: usize,
    round: usize,
}

impl Eq for Candidate {}

/// Gains are compared on a 2^-32 grid. Symmetric configurations produce
/// gains that are equal in exact arithmetic but differ by an ulp depending on
/// summation order; the grid turns those back into ties.
fn gain_rank(g: f64) -> f64 {
    (g * 4_294_967_296.0).round()
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        gain_rank(self.gain)
            .total_cmp(&gain_rank(other.gain))
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn gain_against(block: &SimilarityBlock, cover: &[f64], s: usize) -> f64 {
    cover
        .iter()
        .enumerate()
        .map(|(i, &c)| (block.sim(i, s) - c).max(0.0))
        .sum()
}

/// Lazy greedy maximization of `F` over `eligible` members, picking up to
/// `k`. Equal gains go to the lower member index. `eligible = None` means
/// every member.
pub fn greedy_select(block: &SimilarityBlock, k: usize, eligible: Option<&[bool]>) -> GreedySelection {
    let pool: Vec<usize> = (0..block.len())
        .filter(|&i| eligible.is_none_or(|e| e.get(i).copied().unwrap_or(false)))
        .collect();
    let k = k.min(pool.len());
    if k == 0 {
        return GreedySelection { picks: Vec::new(), value: 0.0 };
    }

    // Exact singleton values first.
    let mut first = pool[0];
    let mut first_value = block.column_sum(first);
    for &s in &pool[1..] {
        let v = block.column_sum(s);
        if gain_rank(v) > gain_rank(first_value) {
            first = s;
            first_value = v;
        }
    }
    let mut picks = vec![first];
    let mut cover: Vec<f64> = (0..block.len()).map(|i| block.sim(i, first)).collect();

    let mut heap: BinaryHeap<Candidate> = pool
        .iter()
        .filter(|&&s| s != first)
        .map(|&s| Candidate {
            gain: gain_against(block, &cover, s),
            index: s,
            round: 1,
        })
        .collect();

    while picks.len() < k {
        let top = heap.pop().expect("pool holds at least k candidates");
        if top.round == picks.len() {
            for (i, c) in cover.iter_mut().enumerate() {
                *c = c.max(block.sim(i, top.index));
            }
            picks.push(top.index);
        } else {
            heap.push(Candidate {
                gain: gain_against(block, &cover, top.index),
                index: top.index,
                round: picks.len(),
            });
        }
    }
    let value = facility_location_value(block, &picks).expect("picks are in range");
    GreedySelection { picks, value }
}

/// How the per-cluster budgets are set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Allocation {
    /// The same cap `k` for every cluster.
    UniformK { k: usize },
    /// Budgets proportional to cluster size summing to `total_target`.
    ProportionalToClusterSize { total_target: usize },
    /// As above with `total_target = ceil(fraction · n)`.
    ProportionalFraction { fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionBudget {
    pub allocation: Allocation,
    /// Members scoring below this are excluded before selection.
    pub quality_floor: Option<f64>,
}

impl Default for SelectionBudget {
    fn default() -> Self {
        Self {
            allocation: Allocation::ProportionalFraction { fraction: 0.2 },
            quality_floor: None,
        }
    }
}

/// Per-cluster budgets for clusters of the given sizes.
///
/// Proportional allocation uses largest remainders on the exact quotas,
/// gives every non-empty cluster at least one slot and never more than its
/// size. Remainder ties go to the lower cluster index.
pub fn allocate(sizes: &[usize], allocation: Allocation) -> Result<Vec<usize>, SelectionError> {
    let n: usize = sizes.iter().sum();
    let target = match allocation {
        Allocation::UniformK { k } => return Ok(sizes.iter().map(|_| k).collect()),
        Allocation::ProportionalToClusterSize { total_target } => total_target,
        Allocation::ProportionalFraction { fraction } => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(SelectionError::Budget(format!("fraction {fraction} outside (0, 1]")));
            }
            (fraction * n as f64).ceil() as usize
        }
    };
    let nonempty = sizes.iter().filter(|&&s| s > 0).count();
    if target > n {
        return Err(SelectionError::Budget(format!("target {target} exceeds {n} records")));
    }
    if target < nonempty {
        return Err(SelectionError::Budget(format!(
            "target {target} cannot give each of {nonempty} non-empty clusters a slot"
        )));
    }
    if n == 0 {
        return Ok(vec![0; sizes.len()]);
    }
    let quota: Vec<f64> = sizes.iter().map(|&s| target as f64 * s as f64 / n as f64).collect();
    let mut alloc: Vec<usize> = sizes
        .iter()
        .zip(&quota)
        .map(|(&s, &q)| if s == 0 { 0 } else { (q.floor() as usize).clamp(1, s) })
        .collect();
    let mut total: usize = alloc.iter().sum();
    while total < target {
        let j = (0..sizes.len())
            .filter(|&j| alloc[j] < sizes[j])
            .max_by(|&a, &b| {
                (quota[a] - alloc[a] as f64)
                    .total_cmp(&(quota[b] - alloc[b] as f64))
                    .then(b.cmp(&a))
            })
            .expect("target <= n leaves room");
        alloc[j] += 1;
        total += 1;
    }
    while total > target {
        let j = (0..sizes.len())
            .filter(|&j| alloc[j] > 1)
            .max_by(|&a, &b| {
                (alloc[a] as f64 - quota[a])
                    .total_cmp(&(alloc[b] as f64 - quota[b]))
                    .then(a.cmp(&b))
            })
            .expect("target >= nonempty leaves a reducible cluster");
        alloc[j] -= 1;
        total -= 1;
    }
    Ok(alloc)
}

/// One cluster's line in the selection report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSelection {
    pub cluster: usize,
    pub size: usize,
    pub budget: usize,
    pub selected: usize,
    #[serde(rename = "F")]
    pub value: f64,
    pub coverage_ratio: f64,
    /// Selected ids in pick order.
    pub selected_ids: Vec<RecordId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub clusters: Vec<ClusterSelection>,
    pub total_size: usize,
    pub total_budget: usize,
    pub total_selected: usize,
    #[serde(rename = "total_F")]
    pub total_value: f64,
}

/// Runs the per-cluster greedy and returns the filtered corpus (original
/// order) with its report. `scores`, indexed by corpus position, is
/// required when the budget has a quality floor.
pub fn filter_corpus(
    corpus: &Corpus,
    model: &ClusterModel,
    vectors: &[EmbeddingVector],
    budget: &SelectionBudget,
    scores: Option<&[f64]>,
) -> Result<(Corpus, SelectionReport), SelectionError> {
    if model.assignments.len() != corpus.len() || vectors.len() != corpus.len() {
        return Err(SelectionError::Inconsistent(format!(
            "{} records, {} vectors, {} assignments",
            corpus.len(),
            vectors.len(),
            model.assignments.len()
        )));
    }
    let floor = match (budget.quality_floor, scores) {
        (Some(q), Some(s)) if s.len() == corpus.len() => Some((q, s)),
        (Some(_), _) => return Err(SelectionError::Inconsistent("quality floor needs one score per record".into())),
        (None, _) => None,
    };
    let members = model.members();
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let budgets = allocate(&sizes, budget.allocation)?;

    let clusters: Vec<(ClusterSelection, Vec<usize>)> = members
        .par_iter()
        .enumerate()
        .map(|(cluster, positions)| {
            let ids: Vec<RecordId> = positions.iter().map(|&p| corpus.records()[p].id.clone()).collect();
            let vecs: Vec<&EmbeddingVector> = positions.iter().map(|&p| &vectors[p]).collect();
            let block = SimilarityBlock::from_vectors(cluster, ids, &vecs)?;
            let eligible: Option<Vec<bool>> =
                floor.map(|(q, s)| positions.iter().map(|&p| s[p] >= q).collect());
            let sel = greedy_select(&block, budgets[cluster], eligible.as_deref());
            let picked: Vec<usize> = sel.picks.iter().map(|&i| positions[i]).collect();
            let size = positions.len();
            Ok((
                ClusterSelection {
                    cluster,
                    size,
                    budget: budgets[cluster],
                    selected: picked.len(),
                    value: sel.value,
                    coverage_ratio: if size == 0 { 0.0 } else { sel.value / size as f64 },
                    selected_ids: sel.picks.iter().map(|&i| block.members()[i].clone()).collect(),
                },
                picked,
            ))
        })
        .collect::<Result<_, SelectionError>>()?;

    let mut keep: Vec<usize> = clusters.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    keep.sort_unstable();
    let clusters: Vec<ClusterSelection> = clusters.into_iter().map(|(c, _)| c).collect();
    let report = SelectionReport {
        total_size: corpus.len(),
        total_budget: clusters.iter().map(|c| c.budget).sum(),
        total_selected: keep.len(),
        total_value: clusters.iter().map(|c| c.value).sum(),
        clusters,
    };
    Ok((corpus.subset(&keep), report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<RecordId> {
        (0..n).map(RecordId::sequence).collect()
    }

    fn hand_block() -> SimilarityBlock {
        let rows = vec![
            vec![1.0, 0.5, 0.2, -0.1],
            vec![0.5, 1.0, 0.3, 0.0],
            vec![0.2, 0.3, 1.0, 0.4],
            vec![-0.1, 0.0, 0.4, 1.0],
        ];
        SimilarityBlock::from_matrix(0, ids(4), &rows).unwrap()
    }

    #[test]
    fn full_subset_covers_every_member_once() {
        let b = hand_block();
        assert_eq!(facility_location_value(&b, &[0, 1, 2, 3]).unwrap(), 4.0);
    }

    #[test]
    fn empty_subset_is_zero() {
        assert_eq!(facility_location_value(&hand_block(), &[]).unwrap(), 0.0);
    }

    #[test]
    fn singleton_is_column_sum() {
        // 1.0 + 0.5 + 0.2 - 0.1, summed by hand.
        let v = facility_location_value(&hand_block(), &[0]).unwrap();
        assert!((v - 1.6).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_index() {
        assert!(matches!(
            facility_location_value(&hand_block(), &[4]),
            Err(SelectionError::IndexOutOfRange { index: 4, len: 4 })
        ));
    }

    #[test]
    fn matrix_validation() {
        assert!(matches!(
            SimilarityBlock::from_matrix(0, ids(2), &[vec![1.0, 0.2], vec![0.3, 1.0]]),
            Err(SelectionError::NotSymmetric(0, 1))
        ));
        assert!(matches!(
            SimilarityBlock::from_matrix(0, ids(2), &[vec![1.0, 0.2], vec![0.2]]),
            Err(SelectionError::NotSquare { .. })
        ));
    }

    #[test]
    fn saturated_budget_returns_everyone() {
        let sel = greedy_select(&hand_block(), 4, None);
        let mut picks = sel.picks.clone();
        picks.sort();
        assert_eq!(picks, vec![0, 1, 2, 3]);
        assert_eq!(sel.value, 4.0);
        assert_eq!(greedy_select(&hand_block(), 4, None), sel);
        assert_eq!(greedy_select(&hand_block(), 10, None).picks.len(), 4);
        assert!(greedy_select(&hand_block(), 0, None).picks.is_empty());
    }

    #[test]
    fn floor_excludes_members() {
        let sel = greedy_select(&hand_block(), 4, Some(&[true, false, true, false]));
        let mut picks = sel.picks;
        picks.sort();
        assert_eq!(picks, vec![0, 2]);
    }

    #[test]
    fn duplicate_pair_second_copy_is_dropped() {
        // 0 and 1 are exact duplicates; 2 and 3 are distinct.
        let rows = vec![
            vec![1.0, 1.0, 0.1, 0.2],
            vec![1.0, 1.0, 0.1, 0.2],
            vec![0.1, 0.1, 1.0, 0.3],
            vec![0.2, 0.2, 0.3, 1.0],
        ];
        let b = SimilarityBlock::from_matrix(0, ids(4), &rows).unwrap();
        let sel = greedy_select(&b, 3, None);
        let dups = sel.picks.iter().filter(|&&p| p < 2).count();
        assert_eq!(dups, 1, "picks {:?}", sel.picks);
    }

    #[test]
    fn proportional_allocation_examples() {
        assert_eq!(
            allocate(&[90, 10], Allocation::ProportionalToClusterSize { total_target: 10 }).unwrap(),
            vec![9, 1]
        );
        assert_eq!(
            allocate(&[98, 1, 1], Allocation::ProportionalToClusterSize { total_target: 5 }).unwrap(),
            vec![3, 1, 1]
        );
        assert_eq!(
            allocate(&[5, 0, 5], Allocation::ProportionalToClusterSize { total_target: 4 }).unwrap(),
            vec![2, 0, 2]
        );
        assert_eq!(allocate(&[3, 7], Allocation::UniformK { k: 4 }).unwrap(), vec![4, 4]);
        assert_eq!(
            allocate(&[10, 10], Allocation::ProportionalFraction { fraction: 0.2 }).unwrap(),
            vec![2, 2]
        );
        assert!(allocate(&[5, 5, 5], Allocation::ProportionalToClusterSize { total_target: 2 }).is_err());
        assert!(allocate(&[5], Allocation::ProportionalToClusterSize { total_target: 6 }).is_err());
    }

    #[test]
    fn negative_column_sum_makes_singleton_worse_than_empty() {
        // Documented edge: F is only monotone from non-empty sets when
        // similarities are signed.
        let rows = vec![
            vec![1.0, -0.9, -0.9],
            vec![-0.9, 1.0, 1.0],
            vec![-0.9, 1.0, 1.0],
        ];
        let b = SimilarityBlock::from_matrix(0, ids(3), &rows).unwrap();
        assert!(facility_location_value(&b, &[0]).unwrap() < 0.0);
        assert_eq!(greedy_select(&b, 1, None).picks, vec![1]);
    }
}
