//! Reference subset selectors: random, perplexity-ranked, and
//! farthest-from-centroid k-means sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans_fit, ClusterModel, ClusteringError, KMeansParams};
use crate::corpus::{Corpus, InstructionRecord};
use crate::embedding::{squared_distance, EmbeddingVector};
use crate::scoring::{compute_perplexity, ln_to_log2, LogprobSource};

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("{0}")]
    Argument(String),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
}

fn check_n(n: usize, len: usize) -> Result<(), BaselineError> {
    if n > len {
        Err(BaselineError::Argument(format!("cannot take {n} records from a corpus of {len}")))
    } else {
        Ok(())
    }
}

/// `n` records drawn uniformly without replacement, in corpus order.
pub fn baseline_random(corpus: &Corpus, n: usize, seed: u64) -> Result<Corpus, BaselineError> {
    check_n(n, corpus.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, corpus.len(), n).into_vec();
    picks.sort_unstable();
    Ok(corpus.subset(&picks))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerplexityDirection {
    #[default]
    Lowest,
    Highest,
}

/// Training sequence scored by the perplexity baseline.
pub fn perplexity_text(r: &InstructionRecord) -> String {
    [r.instruction.as_str(), r.input.as_str(), r.output.as_str()]
        .iter()
        .filter(|s| !s.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexitySelection {
    /// Perplexity per record in corpus order; `None` when scoring failed.
    pub perplexities: Vec<Option<f64>>,
    pub skipped: usize,
    pub direction: PerplexityDirection,
}

/// Ranks records by perplexity and keeps `n`, in corpus order. Ties go to
/// the lower id. Records that fail to score are skipped with a warning.
pub fn baseline_perplexity(
    corpus: &Corpus,
    n: usize,
    source: &dyn LogprobSource,
    direction: PerplexityDirection,
) -> Result<(Corpus, PerplexitySelection), BaselineError> {
    check_n(n, corpus.len())?;
    let perplexities: Vec<Option<f64>> = corpus
        .iter()
        .map(|r| {
            let pp = source
                .token_logprobs(&perplexity_text(r))
                .and_then(|lp| compute_perplexity(&ln_to_log2(&lp)));
            match pp {
                Ok(v) => Some(v),
                Err(e) => {
                    tracing::warn!("perplexity of {} skipped: {e}", r.id);
                    None
                }
            }
        })
        .collect();
    let mut ranked: Vec<(usize, f64)> = perplexities
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|v| (i, v)))
        .collect();
    let skipped = corpus.len() - ranked.len();
    if ranked.len() < n {
        return Err(BaselineError::Argument(format!(
            "only {} of {} records could be scored; {n} requested",
            ranked.len(),
            corpus.len()
        )));
    }
    let records = corpus.records();
    ranked.sort_by(|(i, a), (j, b)| {
        let by_pp = match direction {
            PerplexityDirection::Lowest => a.total_cmp(b),
            PerplexityDirection::Highest => b.total_cmp(a),
        };
        by_pp.then_with(|| records[*i].id.cmp(&records[*j].id))
    });
    let mut picks: Vec<usize> = ranked[..n].iter().map(|(i, _)| *i).collect();
    picks.sort_unstable();
    Ok((
        corpus.subset(&picks),
        PerplexitySelection {
            perplexities,
            skipped,
            direction,
        },
    ))
}

/// Positions chosen by round-robin over clusters, each visited in
/// descending distance to its centroid (ties by position).
pub fn distant_order(model: &ClusterModel, vectors: &[EmbeddingVector], n: usize) -> Vec<usize> {
    let mut queues: Vec<Vec<usize>> = model
        .members()
        .into_iter()
        .enumerate()
        .map(|(c, mut members)| {
            let d = |i: usize| squared_distance(vectors[i].values(), model.centroids[c].values());
            members.sort_by(|&a, &b| d(b).total_cmp(&d(a)).then(a.cmp(&b)));
            members.reverse();
            members
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let before = out.len();
        for q in queues.iter_mut() {
            if out.len() == n {
                break;
            }
            if let Some(i) = q.pop() {
                out.push(i);
            }
        }
        if out.len() == before {
            break;
        }
    }
    out
}

/// Fits k-means with `groups` clusters and takes the points farthest from
/// their centroids, round-robin across clusters. Output in corpus order.
pub fn baseline_kmeans_distant(
    corpus: &Corpus,
    vectors: &[EmbeddingVector],
    groups: usize,
    n: usize,
    seed: u64,
) -> Result<(Corpus, ClusterModel), BaselineError> {
    check_n(n, corpus.len())?;
    if vectors.len() != corpus.len() {
        return Err(BaselineError::Argument(format!(
            "{} vectors for {} records",
            vectors.len(),
            corpus.len()
        )));
    }
    if n < groups {
        return Err(BaselineError::Argument(format!("n = {n} is below the group count {groups}")));
    }
    let model = kmeans_fit(vectors, &KMeansParams::new(groups, seed))?;
    let mut picks = distant_order(&model, vectors, n);
    picks.sort_unstable();
    Ok((corpus.subset(&picks), model))
}
