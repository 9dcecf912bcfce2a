//! Disjoint similar-pair mining inside each cluster's filtered subset.
//!
//! Edges with similarity at or above `tau` are taken heaviest first
//! (ties by member order) and accepted when both endpoints are still free.
//! The result is a maximal matching; unmatched members are singletons.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::RecordId;
use crate::selection::SimilarityBlock;

#[derive(Debug, thiserror::Error)]
pub enum PairingError {
    #[error("threshold {0} outside (-1, 1]")]
    InvalidThreshold(f64),
    #[error("size target {target} unreachable: {reason}")]
    Unreachable { target: usize, reason: String },
    #[error("pair manifest {}: {message}", path.display())]
    Manifest { path: std::path::PathBuf, message: String },
}

/// Two members of one cluster whose similarity met the threshold.
/// `id_a` precedes `id_b` in corpus order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub cluster: usize,
    pub id_a: RecordId,
    pub id_b: RecordId,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingResult {
    pub cluster: usize,
    /// In acceptance order (heaviest first).
    pub pairs: Vec<CandidatePair>,
    /// In member order.
    pub singletons: Vec<RecordId>,
}

fn check_tau(tau: f64) -> Result<(), PairingError> {
    if tau > -1.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(PairingError::InvalidThreshold(tau))
    }
}

/// Edges `(sim, i, j)` with `i < j`, heaviest first, ties by `(i, j)`.
fn sorted_edges(block: &SimilarityBlock, floor: f64) -> Vec<(f64, usize, usize)> {
    let n = block.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let s = block.sim(i, j);
            if s >= floor {
                edges.push((s, i, j));
            }
        }
    }
    edges.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    edges
}

fn greedy_match(n: usize, edges: &[(f64, usize, usize)], tau: f64) -> (Vec<(f64, usize, usize)>, Vec<usize>) {
    let mut used = vec![false; n];
    let mut pairs = Vec::new();
    for &(s, i, j) in edges {
        if s < tau {
            break;
        }
        if !used[i] && !used[j] {
            used[i] = true;
            used[j] = true;
            pairs.push((s, i, j));
        }
    }
    let singles = (0..n).filter(|&i| !used[i]).collect();
    (pairs, singles)
}

/// Greedy maximum-weight matching over edges with `sim >= tau`.
pub fn mine_pairs(block: &SimilarityBlock, tau: f64) -> Result<PairingResult, PairingError> {
    check_tau(tau)?;
    let edges = sorted_edges(block, tau);
    let (pairs, singles) = greedy_match(block.len(), &edges, tau);
    let m = block.members();
    Ok(PairingResult {
        cluster: block.cluster(),
        pairs: pairs
            .into_iter()
            .map(|(similarity, i, j)| CandidatePair {
                cluster: block.cluster(),
                id_a: m[i].clone(),
                id_b: m[j].clone(),
                similarity,
            })
            .collect(),
        singletons: singles.into_iter().map(|i| m[i].clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingStats {
    pub records: usize,
    pub pairs: usize,
    pub singletons: usize,
    /// Fraction of records that ended up in a pair.
    pub pairing_rate: f64,
    pub keep_singletons: bool,
    /// Size after merging if every pair merges.
    pub expected_size: usize,
}

pub fn expected_size(pairs: usize, singletons: usize, keep_singletons: bool) -> usize {
    if keep_singletons {
        pairs + singletons
    } else {
        pairs
    }
}

pub fn pairing_stats(results: &[PairingResult], keep_singletons: bool) -> PairingStats {
    let pairs: usize = results.iter().map(|r| r.pairs.len()).sum();
    let singletons: usize = results.iter().map(|r| r.singletons.len()).sum();
    stats_from_counts(pairs, singletons, keep_singletons)
}

pub fn stats_from_counts(pairs: usize, singletons: usize, keep_singletons: bool) -> PairingStats {
    let records = 2 * pairs + singletons;
    PairingStats {
        records,
        pairs,
        singletons,
        pairing_rate: if records == 0 { 0.0 } else { 2.0 * pairs as f64 / records as f64 },
        keep_singletons,
        expected_size: expected_size(pairs, singletons, keep_singletons),
    }
}

/// Threshold picked to bring the expected post-merge size near a target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TunedThreshold {
    pub tau: f64,
    pub expected_size: usize,
    pub target: usize,
}

/// Searches the observed similarity values for the `tau` whose expected
/// post-merge size is closest to `target`. Ties prefer the higher `tau`.
pub fn tune_threshold(blocks: &[SimilarityBlock], target: usize, keep_singletons: bool) -> Result<TunedThreshold, PairingError> {
    let edges: Vec<Vec<(f64, usize, usize)>> = blocks
        .iter()
        .map(|b| sorted_edges(b, f64::NEG_INFINITY).into_iter().filter(|e| e.0 > -1.0).collect())
        .collect();
    let n: usize = blocks.iter().map(SimilarityBlock::len).sum();
    let mut candidates: Vec<f64> = edges.iter().flatten().map(|e| e.0).collect();
    candidates.sort_by(|a, b| b.total_cmp(a));
    candidates.dedup();
    if candidates.is_empty() {
        return Err(PairingError::Unreachable {
            target,
            reason: "no candidate edges".into(),
        });
    }

    let size_at = |tau: f64| {
        let pairs: usize = blocks
            .iter()
            .zip(&edges)
            .map(|(b, e)| greedy_match(b.len(), e, tau).0.len())
            .sum();
        expected_size(pairs, n - 2 * pairs, keep_singletons)
    };

    // Lower tau (higher index) admits more edges and, for kept singletons,
    // shrinks the expected size. Bisect on that trend, then check the
    // neighbourhood because greedy matchings are not strictly monotone.
    let too_big = |size: usize| if keep_singletons { size > target } else { size < target };
    let (mut lo, mut hi) = (0usize, candidates.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if too_big(size_at(candidates[mid])) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    let window = lo.saturating_sub(3)..(lo + 4).min(candidates.len());
    let best = window
        .map(|k| (candidates[k], size_at(candidates[k])))
        .min_by(|a, b| {
            a.1.abs_diff(target)
                .cmp(&b.1.abs_diff(target))
                .then(b.0.total_cmp(&a.0))
        })
        .expect("window is non-empty");
    Ok(TunedThreshold {
        tau: best.0,
        expected_size: best.1,
        target,
    })
}

/// Writes one `{cluster, id_a, id_b, similarity}` line per pair.
pub fn write_pair_manifest(path: &Path, results: &[PairingResult]) -> Result<(), PairingError> {
    let mut buf = Vec::new();
    for p in results.iter().flat_map(|r| &r.pairs) {
        serde_json::to_writer(&mut buf, p).expect("pair serializes");
        buf.write_all(b"\n").expect("vec write");
    }
    crate::fsio::write_atomic(path, &buf).map_err(|e| PairingError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn read_pair_manifest(path: &Path) -> Result<Vec<CandidatePair>, PairingError> {
    let err = |message: String| PairingError::Manifest {
        path: path.to_path_buf(),
        message,
    };
    let file = std::fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(rows: &[Vec<f64>]) -> SimilarityBlock {
        let ids = ["a", "b", "c", "d"][..rows.len()].iter().map(|&s| RecordId::from(s)).collect();
        SimilarityBlock::from_matrix(3, ids, rows).unwrap()
    }

    #[test]
    fn single_eligible_edge() {
        let r = mine_pairs(&block(&[vec![1.0, 0.9], vec![0.9, 1.0]]), 0.8).unwrap();
        assert_eq!(r.pairs.len(), 1);
        assert!(r.singletons.is_empty());
        assert_eq!(r.pairs[0].cluster, 3);
        assert_eq!((r.pairs[0].id_a.as_str(), r.pairs[0].id_b.as_str()), ("a", "b"));
    }

    #[test]
    fn heaviest_edge_first() {
        let rows = vec![vec![1.0, 0.95, 0.5], vec![0.95, 1.0, 0.9], vec![0.5, 0.9, 1.0]];
        let r = mine_pairs(&block(&rows), 0.8).unwrap();
        assert_eq!(r.pairs.len(), 1);
        assert_eq!((r.pairs[0].id_a.as_str(), r.pairs[0].id_b.as_str()), ("a", "b"));
        assert_eq!(r.singletons, vec![RecordId::from("c")]);
    }

    #[test]
    fn tau_one_pairs_only_exact_duplicates() {
        let rows = vec![
            vec![1.0, 1.0, 0.999, 0.2],
            vec![1.0, 1.0, 0.999, 0.2],
            vec![0.999, 0.999, 1.0, 0.1],
            vec![0.2, 0.2, 0.1, 1.0],
        ];
        let r = mine_pairs(&block(&rows), 1.0).unwrap();
        assert_eq!(r.pairs.len(), 1);
        assert_eq!(r.pairs[0].similarity, 1.0);
        assert!(mine_pairs(&block(&rows), 1.0 + 1e-9).is_err());
        assert!(mine_pairs(&block(&rows), -1.0).is_err());
    }

    #[test]
    fn equal_weights_break_by_member_order() {
        let rows = vec![
            vec![1.0, 0.9, 0.9, 0.0],
            vec![0.9, 1.0, 0.0, 0.9],
            vec![0.9, 0.0, 1.0, 0.0],
            vec![0.0, 0.9, 0.0, 1.0],
        ];
        let r = mine_pairs(&block(&rows), 0.5).unwrap();
        let got: Vec<_> = r.pairs.iter().map(|p| (p.id_a.as_str(), p.id_b.as_str())).collect();
        assert_eq!(got, vec![("a", "b")]);
        assert_eq!(r.singletons.len(), 2);
    }

    #[test]
    fn stats_arithmetic() {
        let keep = stats_from_counts(40, 20, true);
        assert_eq!(keep.records, 100);
        assert_eq!(keep.expected_size, 60);
        assert!((keep.pairing_rate - 0.8).abs() < 1e-12);
        assert_eq!(stats_from_counts(40, 20, false).expected_size, 40);
    }

    #[test]
    fn manifest_round_trip() {
        let rows = vec![vec![1.0, 0.9], vec![0.9, 1.0]];
        let r = mine_pairs(&block(&rows), 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pairs.jsonl");
        write_pair_manifest(&p, std::slice::from_ref(&r)).unwrap();
        let line = std::fs::read_to_string(&p).unwrap();
        assert_eq!(line.trim(), r#"{"cluster":3,"id_a":"a","id_b":"b","similarity":0.9}"#);
        assert_eq!(read_pair_manifest(&p).unwrap(), r.pairs);
    }

    #[test]
    fn tuning_hits_reachable_target() {
        let rows = vec![
            vec![1.0, 0.9, 0.1, 0.2],
            vec![0.9, 1.0, 0.3, 0.4],
            vec![0.1, 0.3, 1.0, 0.6],
            vec![0.2, 0.4, 0.6, 1.0],
        ];
        let b = block(&rows);
        let t = tune_threshold(std::slice::from_ref(&b), 3, true).unwrap();
        assert_eq!(t.expected_size, 3);
        assert_eq!(t.tau, 0.9);
        let t = tune_threshold(std::slice::from_ref(&b), 2, true).unwrap();
        assert_eq!(t.expected_size, 2);
        assert_eq!(t.tau, 0.6);
    }
}
