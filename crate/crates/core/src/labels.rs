//! Span distributions and the sparse teacher targets derived from them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::dataset::{parse_jsonl, write_jsonl};
use crate::error::{Error, Result};
use crate::numerics::{floored_ln, ProbabilityVector};

pub const DEFAULT_TOP_K: usize = 8;
/// Entries allowed per head in a labels file.
pub const MAX_STORED_ENTRIES: usize = 8;

/// Start and end distributions over the positions of one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanDistributionPair {
    pub start: ProbabilityVector,
    pub end: ProbabilityVector,
}

/// Up to eight `(index, probability)` pairs per head, indices increasing.
/// Index 0 is the unanswerable slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseSpanLabels {
    pub qid: String,
    pub start: Vec<(usize, f64)>,
    pub end: Vec<(usize, f64)>,
}

fn sparse_argmax(entries: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(i, p) in entries {
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((i, p));
        }
    }
    best.map(|(i, _)| i)
}

fn check_entries(entries: &[(usize, f64)], context_len: usize, what: &str, qid: &str) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::Validation(format!("qid {qid:?}: {what} labels are empty")));
    }
    let mut prev = None;
    let mut sum = 0.0;
    for &(i, p) in entries {
        if prev.is_some_and(|q| i <= q) {
            return Err(Error::Validation(format!("qid {qid:?}: {what} indices not strictly increasing")));
        }
        if i >= context_len {
            return Err(Error::Validation(format!(
                "qid {qid:?}: {what} index {i} outside context of length {context_len}"
            )));
        }
        if !(p.is_finite() && p > 0.0 && p <= 1.0) {
            return Err(Error::Validation(format!("qid {qid:?}: {what} probability {p} invalid")));
        }
        sum += p;
        prev = Some(i);
    }
    if sum > 1.0 + 1e-9 {
        return Err(Error::Validation(format!("qid {qid:?}: {what} mass {sum} exceeds 1")));
    }
    Ok(())
}

impl SparseSpanLabels {
    /// One-hot labels at a gold span, or at position 0 when unanswerable.
    pub fn one_hot(qid: impl Into<String>, start: usize, end: usize) -> Self {
        Self { qid: qid.into(), start: vec![(start, 1.0)], end: vec![(end, 1.0)] }
    }

    pub fn from_distributions(qid: impl Into<String>, pred: &SpanDistributionPair, k: usize, renormalize: bool) -> Result<Self> {
        Ok(Self {
            qid: qid.into(),
            start: sparsify_topk(&pred.start, k, renormalize)?,
            end: sparsify_topk(&pred.end, k, renormalize)?,
        })
    }

    pub fn start_argmax(&self) -> usize {
        sparse_argmax(&self.start).unwrap_or(0)
    }

    pub fn end_argmax(&self) -> usize {
        sparse_argmax(&self.end).unwrap_or(0)
    }

    /// Labels whose most likely start and end are both the `[BOS]` slot.
    pub fn is_unanswerable(&self) -> bool {
        self.start_argmax() == 0 && self.end_argmax() == 0
    }

    /// The teacher's argmax start and end as one-hot labels.
    pub fn to_hard(&self) -> Self {
        Self::one_hot(self.qid.clone(), self.start_argmax(), self.end_argmax())
    }

    /// Checks the structural invariants against a context of `context_len`
    /// positions (including `[BOS]`).
    pub fn validate(&self, context_len: usize) -> Result<()> {
        for (entries, what) in [(&self.start, "start"), (&self.end, "end")] {
            if entries.len() > MAX_STORED_ENTRIES {
                return Err(Error::Validation(format!(
                    "qid {:?}: {what} has {} entries, at most {MAX_STORED_ENTRIES} allowed",
                    self.qid,
                    entries.len()
                )));
            }
            check_entries(entries, context_len, what, &self.qid)?;
        }
        Ok(())
    }

    pub fn max_index(&self) -> usize {
        self.start.iter().chain(&self.end).map(|&(i, _)| i).max().unwrap_or(0)
    }
}

/// Keeps the `k` largest probabilities (ties to the lower index), drops
/// zeros, and optionally renormalizes. Entries come back in index order.
pub fn sparsify_topk(dist: &ProbabilityVector, k: usize, renormalize: bool) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let v = dist.as_slice();
    let mut order: Vec<usize> = (0..v.len()).filter(|&i| v[i] > 0.0).collect();
    let all_kept = order.len() <= k;
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    let mass: f64 = order.iter().map(|&i| v[i]).sum();
    // nothing was dropped, so the input is already normalized
    let norm = if renormalize && !all_kept { mass } else { 1.0 };
    Ok(order.into_iter().map(|i| (i, v[i] / norm)).collect())
}

/// Dense vector of length `len` from sparse entries.
pub fn densify(entries: &[(usize, f64)], len: usize) -> Result<ProbabilityVector> {
    let mut out = vec![0.0; len];
    for &(i, p) in entries {
        if i >= len {
            return Err(Error::invalid(format!("index {i} outside length {len}")));
        }
        out[i] = p;
    }
    let sum: f64 = out.iter().sum();
    if (sum - 1.0).abs() > crate::numerics::prob::NORMALIZATION_TOL {
        for x in &mut out {
            *x /= sum;
        }
    }
    ProbabilityVector::new(out)
}

fn sparse_nll(entries: &[(usize, f64)], probs: &ProbabilityVector) -> Result<f64> {
    let p = probs.as_slice();
    let mut loss = 0.0;
    for &(i, t) in entries {
        let pi = *p
            .get(i)
            .ok_or_else(|| Error::invalid(format!("label index {i} outside distribution of length {}", p.len())))?;
        if t > 0.0 {
            loss -= t * floored_ln(pi);
        }
    }
    Ok(loss)
}

/// Cross-entropy of the stored sparse targets under the predictions, summed
/// over both heads.
pub fn distill_loss(pred: &SpanDistributionPair, labels: &SparseSpanLabels) -> Result<f64> {
    Ok(sparse_nll(&labels.start, &pred.start)? + sparse_nll(&labels.end, &pred.end)?)
}

/// Negative log-likelihood of the labels' argmax start and end.
pub fn hard_label_loss(pred: &SpanDistributionPair, labels: &SparseSpanLabels) -> Result<f64> {
    distill_loss(pred, &labels.to_hard())
}

pub fn parse_labels(text: &str) -> Result<Vec<SparseSpanLabels>> {
    let labels: Vec<SparseSpanLabels> = parse_jsonl(text)?;
    for l in &labels {
        // context length is unknown here; bound only the structure
        l.validate(usize::MAX)?;
    }
    Ok(labels)
}

pub fn read_labels(path: &Path) -> Result<Vec<SparseSpanLabels>> {
    parse_labels(&fs::read_to_string(path)?)
}

pub fn write_labels(path: &Path, labels: &[SparseSpanLabels]) -> Result<()> {
    write_jsonl(path, labels)
}
