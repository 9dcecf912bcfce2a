//! Run report: stage counts, gate tallies, quality deltas, and the
//! consistency checks every emitted report must pass.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::merging::{GateConfig, MergeOutcome, Verdict};
use crate::pairing::TunedThreshold;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("report failed consistency check: {0}")]
    Inconsistent(String),
    #[error("writing report {}: {source}", path.display())]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("reading report: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub input: usize,
    pub filtered: usize,
    pub pairs: usize,
    pub singletons: usize,
    pub kept_singletons: usize,
    pub merged: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateTally {
    pub accepted: usize,
    pub rejected_by_gate: usize,
    pub parse_failed: usize,
    pub provider_failed: usize,
}

impl GateTally {
    pub fn from_outcomes<'a>(outcomes: impl IntoIterator<Item = &'a MergeOutcome>) -> Self {
        let mut t = Self::default();
        for o in outcomes {
            match o.verdict {
                Verdict::Accepted => t.accepted += 1,
                Verdict::RejectedByGate => t.rejected_by_gate += 1,
                Verdict::ParseFailed => t.parse_failed += 1,
                Verdict::ProviderFailed => t.provider_failed += 1,
            }
        }
        t
    }

    pub fn total(&self) -> usize {
        self.accepted + self.rejected_by_gate + self.parse_failed + self.provider_failed
    }
}

/// Mean parent score against mean merged score over accepted merges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityDelta {
    pub accepted: usize,
    pub pre_pair_mean: f64,
    pub post_merge_mean: f64,
    /// `100 · (post − pre) / pre`; 0 when nothing was accepted.
    pub percent_change: f64,
    pub no_merges_accepted: bool,
}

impl QualityDelta {
    /// From `(parent scores, merged score)` of each accepted merge.
    pub fn from_scores(accepted: impl IntoIterator<Item = ([f64; 2], f64)>) -> Self {
        let (mut n, mut pre, mut post) = (0usize, 0.0, 0.0);
        for ([a, b], p) in accepted {
            n += 1;
            pre += a + b;
            post += p;
        }
        if n == 0 {
            return Self {
                accepted: 0,
                pre_pair_mean: 0.0,
                post_merge_mean: 0.0,
                percent_change: 0.0,
                no_merges_accepted: true,
            };
        }
        let pre_mean = pre / (2 * n) as f64;
        let post_mean = post / n as f64;
        Self {
            accepted: n,
            pre_pair_mean: pre_mean,
            post_merge_mean: post_mean,
            percent_change: if pre_mean > 0.0 { 100.0 * (post_mean - pre_mean) / pre_mean } else { 0.0 },
            no_merges_accepted: false,
        }
    }

    pub fn from_outcomes<'a>(outcomes: impl IntoIterator<Item = &'a MergeOutcome>) -> Self {
        Self::from_scores(outcomes.into_iter().filter(|o| o.accepted()).filter_map(|o| Some((o.pre_scores?, o.post_score?))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub cluster: usize,
    pub size: usize,
    pub selected: usize,
    pub coverage_ratio: f64,
    pub pairs: usize,
    pub singletons: usize,
    pub quality: QualityDelta,
}

/// A published merge example: two parent scores and the merged score,
/// all of which were presented as successful merges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMerge {
    pub name: String,
    pub parent_scores: [f64; 2],
    pub merged_score: f64,
    pub threshold: f64,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCheck {
    pub merges: Vec<ReferenceMerge>,
    pub failing: usize,
    /// True when the configured gate rejects any of the reference merges.
    pub discrepancy: bool,
    pub note: String,
}

pub const REFERENCE_MERGES: [(&str, [f64; 2], f64); 3] = [
    ("translation", [1.88, 1.93], 2.57),
    ("language_analysis", [1.71, 1.23], 3.13),
    ("calculation", [2.35, 2.97], 3.08),
];

/// Evaluates the configured gate on the reference merges.
pub fn reference_check(gate: &GateConfig) -> ReferenceCheck {
    let merges: Vec<ReferenceMerge> = REFERENCE_MERGES
        .iter()
        .map(|(name, [a, b], post)| ReferenceMerge {
            name: (*name).into(),
            parent_scores: [*a, *b],
            merged_score: *post,
            threshold: gate.threshold(*a, *b),
            passes: crate::merging::quality_gate(*post, *a, *b, gate),
        })
        .collect();
    let failing = merges.iter().filter(|m| !m.passes).count();
    let note = if failing == 0 {
        "the configured gate accepts every reference merge".to_owned()
    } else {
        let names: Vec<&str> = merges.iter().filter(|m| !m.passes).map(|m| m.name.as_str()).collect();
        format!(
            "the configured gate rejects {failing} of {} reference merges that were published as successful ({})",
            merges.len(),
            names.join(", ")
        )
    };
    ReferenceCheck {
        discrepancy: failing > 0,
        failing,
        merges,
        note,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderInfo {
    pub embedder: String,
    pub scorer: String,
    pub merger: String,
    pub merge_template: String,
    pub score_template: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub providers: ProviderInfo,
    pub tau: f64,
    pub tuned: Option<TunedThreshold>,
    pub counts: StageCounts,
    pub gate: GateTally,
    pub quality: QualityDelta,
    pub clusters: Vec<ClusterReport>,
    pub reference: ReferenceCheck,
    pub config: PipelineConfig,
    /// Wall-clock seconds per stage. The only field that varies between
    /// identical runs.
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    /// Conservation identities between the stage counts, the per-cluster
    /// lines and the gate tallies.
    pub fn check(&self) -> Result<(), ReportError> {
        let c = &self.counts;
        let fail = |m: String| Err(ReportError::Inconsistent(m));
        let sel: usize = self.clusters.iter().map(|k| k.selected).sum();
        if sel != c.filtered {
            return fail(format!("filtered {} but clusters selected {sel}", c.filtered));
        }
        let (p, s): (usize, usize) = self
            .clusters
            .iter()
            .fold((0, 0), |(p, s), k| (p + k.pairs, s + k.singletons));
        if p != c.pairs || s != c.singletons {
            return fail(format!("cluster lines sum to {p} pairs / {s} singletons, totals say {} / {}", c.pairs, c.singletons));
        }
        if 2 * c.pairs + c.singletons != c.filtered {
            return fail(format!("2 x {} pairs + {} singletons != {} filtered", c.pairs, c.singletons, c.filtered));
        }
        let kept = if self.config.pairing.keep_singletons { c.singletons } else { 0 };
        if c.kept_singletons != kept {
            return fail(format!("kept {} singletons, expected {kept}", c.kept_singletons));
        }
        if self.gate.total() != c.pairs {
            return fail(format!("{} outcomes for {} pairs", self.gate.total(), c.pairs));
        }
        let expect = self.gate.accepted + 2 * (c.pairs - self.gate.accepted) + c.kept_singletons;
        if c.merged != expect {
            return fail(format!("merged corpus has {} records, expected {expect}", c.merged));
        }
        if self.quality.accepted != self.gate.accepted {
            return fail(format!("quality delta covers {} merges, {} accepted", self.quality.accepted, self.gate.accepted));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("report serializes");
        v.push(b'\n');
        v
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, ReportError> {
        serde_json::from_slice(bytes).map_err(|e| ReportError::Parse(e.to_string()))
    }

    /// Plain-text summary.
    pub fn summary(&self) -> String {
        let c = &self.counts;
        let mut s = String::new();
        let _ = writeln!(s, "config {}", &self.config_hash[..12.min(self.config_hash.len())]);
        let _ = writeln!(
            s,
            "records: {} -> {} filtered -> {} pairs + {} singletons -> {} merged corpus",
            c.input, c.filtered, c.pairs, c.singletons, c.merged
        );
        match &self.tuned {
            Some(t) => {
                let _ = writeln!(s, "tau {:.4} (tuned for {}; expected {})", self.tau, t.target, t.expected_size);
            }
            None => {
                let _ = writeln!(s, "tau {:.4}", self.tau);
            }
        }
        let g = &self.gate;
        let _ = writeln!(
            s,
            "gate: {} accepted, {} rejected, {} parse failures, {} provider failures",
            g.accepted, g.rejected_by_gate, g.parse_failed, g.provider_failed
        );
        if self.quality.no_merges_accepted {
            let _ = writeln!(s, "quality: no merges accepted (change 0%)");
        } else {
            let q = &self.quality;
            let _ = writeln!(
                s,
                "quality: {:.3} -> {:.3} ({:+.1}%)",
                q.pre_pair_mean, q.post_merge_mean, q.percent_change
            );
        }
        const SHOWN: usize = 10;
        let merged: Vec<&ClusterReport> = self.clusters.iter().filter(|k| !k.quality.no_merges_accepted).collect();
        for k in merged.iter().take(SHOWN) {
            let _ = writeln!(
                s,
                "  cluster {:>3}: {} merged, {:.3} -> {:.3} ({:+.1}%)",
                k.cluster, k.quality.accepted, k.quality.pre_pair_mean, k.quality.post_merge_mean, k.quality.percent_change
            );
        }
        if merged.len() > SHOWN {
            let _ = writeln!(s, "  ... {} more clusters with merges", merged.len() - SHOWN);
        }
        if self.reference.discrepancy {
            let _ = writeln!(s, "note: {}", self.reference.note);
        }
        for (stage, secs) in &self.timings {
            let _ = writeln!(s, "  {stage}: {secs:.2}s");
        }
        s
    }
}

/// Checks `report` and writes it as JSON. Returns the text summary.
pub fn emit_report(report: &RunReport, path: &Path) -> Result<String, ReportError> {
    report.check()?;
    crate::fsio::write_atomic(path, &report.to_json()).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(report.summary())
}
