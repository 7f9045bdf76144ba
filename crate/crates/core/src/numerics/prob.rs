//! Probability vectors and the scalar metrics built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a [`ProbabilityVector`].
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Floor applied before taking the log of a probability that carries target mass.
pub const LOG_FLOOR: f64 = 1e-12;

/// A normalized distribution over positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("probability vector is empty"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0 + NORMALIZATION_TOL) {
            return Err(Error::invalid("probability entries must lie in [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![1.0 / len as f64; len])
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ProbabilityVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbabilityVector> for Vec<f64> {
    fn from(p: ProbabilityVector) -> Self {
        p.0
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::invalid(format!("{what} is empty")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbabilityVector> {
    check_finite(logits, "logits")?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbabilityVector(exps.into_iter().map(|e| e / total).collect()))
}

/// Max-shifted log-softmax; every entry is finite for finite input.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits, "logits")?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|x| x - lse).collect())
}

/// `-Σ target_i · log_probs_i`, skipping zero-mass targets entirely.
pub fn cross_entropy_to_target(target: &ProbabilityVector, log_probs: &[f64]) -> Result<f64> {
    if target.len() != log_probs.len() {
        return Err(Error::invalid(format!(
            "target has {} entries but log_probs has {}",
            target.len(),
            log_probs.len()
        )));
    }
    Ok(target
        .as_slice()
        .iter()
        .zip(log_probs)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, lp)| -t * lp)
        .sum())
}

/// Shannon entropy in nats (0·ln 0 = 0).
pub fn entropy(p: &ProbabilityVector) -> f64 {
    p.as_slice().iter().filter(|x| **x > 0.0).map(|x| -x * x.ln()).sum()
}

/// `ln(max(p, LOG_FLOOR))`.
pub fn floored_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid("cosine similarity of vectors with different lengths"));
    }
    let nu = super::matrix::l2_norm(u);
    let nv = super::matrix::l2_norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::degenerate("cosine similarity of a zero-norm vector"));
    }
    Ok((super::matrix::dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid("pearson inputs differ in length"));
    }
    if x.len() < 2 {
        return Err(Error::degenerate("pearson needs at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::degenerate("pearson input has zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Area under the ROC curve via the rank-sum statistic, ties counted ½.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("auroc inputs differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("auroc scores must be finite"));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::degenerate("auroc needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks (1-based) across tie groups
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, l)| **l).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().as_slice(), &[0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p.as_slice()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.as_slice()[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap().as_slice(), &[0.5, 0.5]);
        assert!(matches!(softmax(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let eps: f64 = 1e-12;
        let t = ProbabilityVector::one_hot(2, 0);
        let ce = cross_entropy_to_target(&t, &[(1.0 - eps).ln(), eps.ln()]).unwrap();
        assert!(ce.abs() < 1e-11);

        let l = 7;
        let u = ProbabilityVector::uniform(l);
        let lp = vec![(1.0 / l as f64).ln(); l];
        assert!((cross_entropy_to_target(&u, &lp).unwrap() - (l as f64).ln()).abs() < 1e-12);

        let half = ProbabilityVector::new(vec![0.5, 0.5]).unwrap();
        let ce = cross_entropy_to_target(&half, &[0.25f64.ln(), 0.75f64.ln()]).unwrap();
        assert!((ce - 0.836988).abs() < 1e-6, "{ce}");

        assert!(cross_entropy_to_target(&half, &[0.0]).is_err());
    }

    #[test]
    fn zero_targets_never_touch_log_probs() {
        let t = ProbabilityVector::one_hot(2, 1);
        let ce = cross_entropy_to_target(&t, &[f64::NEG_INFINITY, 0.0]).unwrap();
        assert_eq!(ce, 0.0);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[1.0, 1.0], &[1.0, -1.0]).unwrap(), 0.0);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn auroc_and_pearson_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        let x = [1.0, 2.0, 3.5, 7.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_monotone_transform(
            scores in proptest::collection::vec(-5.0f64..5.0, 4..30),
            seed in any::<u64>(),
        ) {
            let labels: Vec<bool> = (0..scores.len()).map(|i| (seed >> (i % 64)) & 1 == 1 || i == 0).collect();
            prop_assume!(labels.iter().any(|l| !l));
            let a = auroc(&scores, &labels).unwrap();
            let transformed: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 - 1.0).collect();
            let b = auroc(&transformed, &labels).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn kl_is_non_negative(
            p in proptest::collection::vec(0.0f64..1.0, 2..12),
            q in proptest::collection::vec(0.01f64..1.0, 2..12),
        ) {
            let n = p.len().min(q.len());
            let ps: f64 = p[..n].iter().sum();
            prop_assume!(ps > 0.0);
            let p = ProbabilityVector::new(p[..n].iter().map(|v| v / ps).collect()).unwrap();
            let qs: f64 = q[..n].iter().sum();
            let lq: Vec<f64> = q[..n].iter().map(|v| (v / qs).ln()).collect();
            let lp: Vec<f64> = p.as_slice().iter().map(|v| floored_ln(*v)).collect();
            prop_assert!((cross_entropy_to_target(&p, &lp).unwrap() - entropy(&p)).abs() < 1e-12);
            prop_assert!(cross_entropy_to_target(&p, &lq).unwrap() >= entropy(&p) - 1e-12);
        }
    }
}
