//! Group-fairness functionals.
//!
//! `soft_delta` is the training-time penalty: the largest, over components,
//! absolute difference between per-group average responsibilities. The hard
//! `gap` and `balance` are evaluation metrics on argmax labels.

use ndarray::Array2;

use crate::data::{Dataset, SubSample};
use crate::error::{FmcError, Result};
use crate::mixture::{responsibilities_rows, ModelParams, Responsibilities};

/// Row positions of each sensitive group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupIndex {
    pub members: Vec<Vec<usize>>,
}

impl GroupIndex {
    /// `labels[r]` is the group of row position `r`.
    pub fn from_labels(labels: &[usize], n_groups: usize) -> Result<Self> {
        let mut members = vec![Vec::new(); n_groups];
        for (r, &s) in labels.iter().enumerate() {
            members
                .get_mut(s)
                .ok_or_else(|| {
                    FmcError::GroupDegenerate(format!("label {s} outside 0..{n_groups}"))
                })?
                .push(r);
        }
        if let Some(s) = members.iter().position(Vec::is_empty) {
            return Err(FmcError::GroupDegenerate(format!("group {s} is empty")));
        }
        Ok(GroupIndex { members })
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        Self::from_labels(&ds.sensitive, ds.n_groups())
    }

    /// Groups of the subsample's positions; duplicates appear once per draw.
    pub fn from_subsample(ds: &Dataset, sub: &SubSample) -> Result<Self> {
        let labels: Vec<usize> = sub.indices.iter().map(|&i| ds.sensitive[i]).collect();
        Self::from_labels(&labels, ds.n_groups())
    }

    pub fn n_groups(&self) -> usize {
        self.members.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Group of every row position.
    pub fn labels(&self) -> Vec<usize> {
        let n = self.members.iter().map(Vec::len).sum();
        let mut out = vec![0; n];
        for (s, rows) in self.members.iter().enumerate() {
            for &r in rows {
                out[r] = s;
            }
        }
        out
    }
}

/// Δ and the component index attaining it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaValue {
    pub value: f64,
    pub argmax: usize,
}

/// M × K matrix of per-group average responsibilities.
pub fn group_means(psi: &Responsibilities, groups: &GroupIndex) -> Array2<f64> {
    let k = psi.k();
    let mut out = Array2::zeros((groups.n_groups(), k));
    for (s, rows) in groups.members.iter().enumerate() {
        let n_s = rows.len() as f64;
        for kk in 0..k {
            let mut acc = 0.0;
            for &r in rows {
                acc += psi.psi[[r, kk]];
            }
            out[[s, kk]] = acc / n_s;
        }
    }
    out
}

/// Per-component fairness gap: |m_1k − m_2k| for two groups, the average of
/// all pairwise absolute gaps otherwise.
pub fn component_gaps(means: &Array2<f64>) -> Vec<f64> {
    let m = means.nrows();
    let pairs = (m * (m - 1) / 2) as f64;
    (0..means.ncols())
        .map(|k| {
            let mut acc = 0.0;
            for a in 0..m {
                for b in a + 1..m {
                    acc += (means[[a, k]] - means[[b, k]]).abs();
                }
            }
            acc / pairs
        })
        .collect()
}

fn max_with_index(v: &[f64]) -> DeltaValue {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = k;
        }
    }
    DeltaValue {
        value: v[best],
        argmax: best,
    }
}

fn check_rows(psi: &Responsibilities, groups: &GroupIndex) -> Result<()> {
    let n: usize = groups.counts().iter().sum();
    if n != psi.n_rows() {
        return Err(FmcError::Dimension {
            what: "rows covered by groups".into(),
            expected: psi.n_rows(),
            got: n,
        });
    }
    if groups.members.iter().any(Vec::is_empty) {
        return Err(FmcError::GroupDegenerate("a group is empty".into()));
    }
    Ok(())
}

/// Soft Δ for a binary sensitive attribute.
pub fn soft_delta(psi: &Responsibilities, groups: &GroupIndex) -> Result<DeltaValue> {
    if groups.n_groups() != 2 {
        return Err(FmcError::GroupDegenerate(format!(
            "soft_delta needs exactly two groups, got {}",
            groups.n_groups()
        )));
    }
    check_rows(psi, groups)?;
    Ok(max_with_index(&component_gaps(&group_means(psi, groups))))
}

/// Soft Δ for M ≥ 2 groups: max over components of the mean pairwise gap.
pub fn soft_delta_multinary(psi: &Responsibilities, groups: &GroupIndex) -> Result<DeltaValue> {
    if groups.n_groups() < 2 {
        return Err(FmcError::GroupDegenerate("fewer than two groups".into()));
    }
    check_rows(psi, groups)?;
    Ok(max_with_index(&component_gaps(&group_means(psi, groups))))
}

/// Binary or multinary Δ depending on the number of groups.
pub fn delta(psi: &Responsibilities, groups: &GroupIndex) -> Result<DeltaValue> {
    if groups.n_groups() == 2 {
        soft_delta(psi, groups)
    } else {
        soft_delta_multinary(psi, groups)
    }
}

/// Σ_k of the per-component gaps. Reported only.
pub fn additive_gap(psi: &Responsibilities, groups: &GroupIndex) -> Result<f64> {
    check_rows(psi, groups)?;
    Ok(component_gaps(&group_means(psi, groups)).iter().sum())
}

/// Hard Gap: Δ of the one-hot assignment matrix.
pub fn hard_gap(labels: &[usize], groups: &GroupIndex, k: usize) -> Result<f64> {
    Ok(delta(&Responsibilities::one_hot(labels, k), groups)?.value)
}

/// Balance: min over non-empty clusters of the smallest ratio between group
/// counts. A cluster missing some group contributes 0.
pub fn balance(labels: &[usize], groups: &GroupIndex, k: usize) -> Result<f64> {
    if groups.n_groups() < 2 {
        return Err(FmcError::GroupDegenerate("fewer than two groups".into()));
    }
    if groups.members.iter().any(Vec::is_empty) {
        return Err(FmcError::GroupDegenerate("a group is empty".into()));
    }
    let mut counts = vec![vec![0usize; groups.n_groups()]; k];
    for (s, rows) in groups.members.iter().enumerate() {
        for &r in rows {
            counts[labels[r]][s] += 1;
        }
    }
    let mut out = f64::INFINITY;
    for c in &counts {
        let hi = *c.iter().max().expect("at least two groups");
        if hi == 0 {
            continue;
        }
        let lo = *c.iter().min().expect("at least two groups");
        out = out.min(lo as f64 / hi as f64);
    }
    Ok(if out.is_finite() { out } else { 0.0 })
}

/// Δ computed only on the subsample rows, counting duplicates.
pub fn subsampled_delta(params: &ModelParams, sub: &SubSample, ds: &Dataset) -> Result<DeltaValue> {
    let groups = GroupIndex::from_subsample(ds, sub)?;
    let psi = responsibilities_rows(&ds.features, params, &sub.indices);
    delta(&psi, &groups)
}

/// Coefficient of each group's mean ψ_{·k̃} in the derivative of the gap at
/// component `k_tilde`. `sign(0) = 0`.
pub(crate) fn group_coefficients(means: &Array2<f64>, k_tilde: usize) -> Vec<f64> {
    let m = means.nrows();
    let pairs = (m * (m - 1) / 2) as f64;
    (0..m)
        .map(|a| {
            let mut acc = 0.0;
            for b in 0..m {
                if a != b {
                    let d = means[[a, k_tilde]] - means[[b, k_tilde]];
                    acc += if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }
            acc / pairs
        })
        .collect()
}
