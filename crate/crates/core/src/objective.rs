//! Penalized objectives, analytic gradients and the finite-difference oracle.
//!
//! All gradients are taken in unconstrained coordinates: mixture logits,
//! means, log-scales and categorical logits. Every gradient here is an
//! ascent direction.
//!
//! Writing a_ik = log π_k + log f(x_i; θ_k), each objective's gradient is
//! Σ_i Σ_k W_ik ∇a_ik for a weight matrix W:
//! * log-likelihood: W = ψ(Θ);
//! * Q(Θ | Θ_t): W = ψ(Θ_t), frozen;
//! * Δ at its maximizing component k̃: W_ik = c_i ψ_ik̃ (δ_kk̃ − ψ_ik), with
//!   c_i the signed inverse group size of row i.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Features, SubSample};
use crate::error::{FmcError, Result};
use crate::fairness::{self, group_coefficients, group_means, DeltaValue, GroupIndex};
use crate::mixture::{
    log_likelihood, q_with_frozen, responsibilities, responsibilities_and_loglik, softmax,
    ModelParams, Responsibilities, Scale, Structure,
};

/// How Δ enters the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyForm {
    /// λ Δ
    #[default]
    Abs,
    /// λ Δ²
    Squared,
}

impl PenaltyForm {
    pub fn apply(self, delta: f64) -> f64 {
        match self {
            PenaltyForm::Abs => delta,
            PenaltyForm::Squared => delta * delta,
        }
    }

    fn slope(self, delta: f64) -> f64 {
        match self {
            PenaltyForm::Abs => 1.0,
            PenaltyForm::Squared => 2.0 * delta,
        }
    }
}

impl std::str::FromStr for PenaltyForm {
    type Err = FmcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs" => Ok(PenaltyForm::Abs),
            "squared" => Ok(PenaltyForm::Squared),
            other => Err(FmcError::Config(format!("unknown penalty form `{other}`"))),
        }
    }
}

/// Rows on which Δ is evaluated.
#[derive(Debug, Clone, Copy)]
pub enum DeltaSource<'a> {
    Full,
    Subsample(&'a SubSample),
}

/// Likelihood part of the objective being differentiated.
#[derive(Debug, Clone, Copy)]
pub enum ObjectiveKind<'a> {
    /// ℓ(Θ | D)
    Likelihood,
    /// Q(Θ | Θ_t) with responsibilities frozen at Θ_t
    QFair { frozen: &'a Responsibilities },
}

/// Gradient in the unconstrained coordinates of a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub d_eta: Array1<f64>,
    pub d_means: Array2<f64>,
    /// With respect to log σ (or log of each diagonal scale).
    pub d_log_scale: Scale,
    pub d_cat_logits: Vec<Vec<Vec<f64>>>,
}

impl Gradient {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradient {
            d_eta: Array1::zeros(params.k()),
            d_means: Array2::zeros(params.means.dim()),
            d_log_scale: match &params.scale {
                Scale::None => Scale::None,
                Scale::Iso(_) => Scale::Iso(0.0),
                Scale::Diag(s) => Scale::Diag(Array2::zeros(s.dim())),
            },
            d_cat_logits: params
                .cat_logits
                .iter()
                .map(|t| t.iter().map(|l| vec![0.0; l.len()]).collect())
                .collect(),
        }
    }

    /// Same coordinate order as [`ModelParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.d_eta.iter().copied().collect();
        v.extend(self.d_means.iter());
        match &self.d_log_scale {
            Scale::Iso(s) => v.push(*s),
            Scale::Diag(s) => v.extend(s.iter()),
            Scale::None => {}
        }
        v.extend(self.d_cat_logits.iter().flatten().flatten());
        v
    }

    pub fn from_flat(params: &ModelParams, v: &[f64]) -> Self {
        let mut g = Gradient::zeros_like(params);
        let mut it = v.iter().copied();
        g.d_eta.iter_mut().for_each(|x| *x = it.next().unwrap());
        g.d_means.iter_mut().for_each(|x| *x = it.next().unwrap());
        match &mut g.d_log_scale {
            Scale::Iso(s) => *s = it.next().unwrap(),
            Scale::Diag(s) => s.iter_mut().for_each(|x| *x = it.next().unwrap()),
            Scale::None => {}
        }
        g.d_cat_logits
            .iter_mut()
            .flatten()
            .flatten()
            .for_each(|x| *x = it.next().unwrap());
        assert!(it.next().is_none(), "flat gradient length");
        g
    }

    fn map_pair(&self, other: &Gradient, f: impl Fn(f64, f64) -> f64) -> Gradient {
        let a = self.to_flat();
        let b = other.to_flat();
        let v: Vec<f64> = a.iter().zip(&b).map(|(x, y)| f(*x, *y)).collect();
        let mut g = self.clone();
        let mut it = v.into_iter();
        g.d_eta.iter_mut().for_each(|x| *x = it.next().unwrap());
        g.d_means.iter_mut().for_each(|x| *x = it.next().unwrap());
        match &mut g.d_log_scale {
            Scale::Iso(s) => *s = it.next().unwrap(),
            Scale::Diag(s) => s.iter_mut().for_each(|x| *x = it.next().unwrap()),
            Scale::None => {}
        }
        g.d_cat_logits
            .iter_mut()
            .flatten()
            .flatten()
            .for_each(|x| *x = it.next().unwrap());
        g
    }

    /// self + factor · other
    pub fn add_scaled(&self, other: &Gradient, factor: f64) -> Gradient {
        self.map_pair(other, |a, b| a + factor * b)
    }

    pub fn scaled(&self, factor: f64) -> Gradient {
        self.map_pair(self, |a, _| a * factor)
    }

    pub fn norm(&self) -> f64 {
        self.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    /// ‖self − reference‖ / max(‖self‖, ‖reference‖), 0 when both vanish.
    pub fn relative_error(&self, reference: &Gradient) -> f64 {
        let diff = self.add_scaled(reference, -1.0).norm();
        let scale = self.norm().max(reference.norm());
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }
}

/// Applies one ascent step `params + step · grad` and re-imposes the floors.
pub fn ascend(params: &ModelParams, grad: &Gradient, step: f64) -> ModelParams {
    let flat: Vec<f64> = params
        .to_flat()
        .iter()
        .zip(grad.to_flat())
        .map(|(p, g)| p + step * g)
        .collect();
    let mut out = params.from_flat(&flat);
    out.clamp_floors();
    out
}

/// Σ_r Σ_k W_rk ∇a_{i(r) k}; row r of `weights` belongs to data row
/// `rows[r]` (or `r` when `rows` is `None`).
pub fn weighted_gradient(
    params: &ModelParams,
    features: &Features,
    rows: Option<&[usize]>,
    weights: &Array2<f64>,
) -> Gradient {
    let k = params.k();
    let d = params.d_cont();
    let mut g = Gradient::zeros_like(params);
    let mut wsum = vec![0.0; k];
    let n = weights.nrows();
    let gaussian = params.structure.has_gaussian();
    let cat = params.structure.has_categorical();
    let cat_probs: Vec<Vec<Vec<f64>>> = params
        .cat_logits
        .iter()
        .map(|t| t.iter().map(|l| softmax(l)).collect())
        .collect();

    let mut scale_acc = 0.0;
    for r in 0..n {
        let i = rows.map_or(r, |rs| rs[r]);
        let x = features.cont_row(i);
        for kk in 0..k {
            let w = weights[[r, kk]];
            if w == 0.0 {
                continue;
            }
            wsum[kk] += w;
            if gaussian {
                match &params.scale {
                    Scale::Iso(sigma) => {
                        let var = sigma * sigma;
                        let mut sq = 0.0;
                        for j in 0..d {
                            let diff = x[j] - params.means[[kk, j]];
                            g.d_means[[kk, j]] += w * diff / var;
                            sq += diff * diff;
                        }
                        scale_acc += w * (sq / var - d as f64);
                    }
                    Scale::Diag(s) => {
                        let Scale::Diag(ds) = &mut g.d_log_scale else {
                            unreachable!()
                        };
                        for j in 0..d {
                            let var = s[[kk, j]] * s[[kk, j]];
                            let diff = x[j] - params.means[[kk, j]];
                            g.d_means[[kk, j]] += w * diff / var;
                            ds[[kk, j]] += w * (diff * diff / var - 1.0);
                        }
                    }
                    Scale::None => {}
                }
            }
            if cat {
                for (j, &c) in features.cate_row(i).iter().enumerate() {
                    g.d_cat_logits[kk][j][c] += w;
                }
            }
        }
    }
    if let Scale::Iso(s) = &mut g.d_log_scale {
        *s = scale_acc;
    }
    if cat {
        for kk in 0..k {
            for (j, probs) in cat_probs[kk].iter().enumerate() {
                for (c, p) in probs.iter().enumerate() {
                    g.d_cat_logits[kk][j][c] -= p * wsum[kk];
                }
            }
        }
    }
    let pi = params.pi();
    let total: f64 = wsum.iter().sum();
    for kk in 0..k {
        g.d_eta[kk] = wsum[kk] - pi[kk] * total;
    }
    g
}

/// Δ penalty (after `form`) on `rows` and its gradient. `groups` indexes
/// positions within `rows`.
#[derive(Debug, Clone)]
pub struct PenaltyEval {
    pub delta: DeltaValue,
    pub penalty: f64,
    pub gradient: Gradient,
    pub psi: Responsibilities,
}

pub fn penalty_with_gradient(
    params: &ModelParams,
    features: &Features,
    rows: Option<&[usize]>,
    groups: &GroupIndex,
    form: PenaltyForm,
) -> Result<PenaltyEval> {
    let (psi, _) = responsibilities_and_loglik(features, params, rows);
    penalty_from_psi(params, features, rows, groups, form, psi)
}

/// As [`penalty_with_gradient`] with responsibilities already computed on
/// `rows` at `params`.
pub fn penalty_from_psi(
    params: &ModelParams,
    features: &Features,
    rows: Option<&[usize]>,
    groups: &GroupIndex,
    form: PenaltyForm,
    psi: Responsibilities,
) -> Result<PenaltyEval> {
    let delta = fairness::delta(&psi, groups)?;
    let means = group_means(&psi, groups);
    let kt = delta.argmax;
    let coef = group_coefficients(&means, kt);
    let slope = form.slope(delta.value);
    let k = params.k();
    let mut weights = Array2::zeros(psi.psi.dim());
    for (s, members) in groups.members.iter().enumerate() {
        let c = slope * coef[s] / members.len() as f64;
        if c == 0.0 {
            continue;
        }
        for &r in members {
            let pt = psi.psi[[r, kt]];
            for kk in 0..k {
                let delta_kk = if kk == kt { 1.0 } else { 0.0 };
                weights[[r, kk]] = c * pt * (delta_kk - psi.psi[[r, kk]]);
            }
        }
    }
    let gradient = weighted_gradient(params, features, rows, &weights);
    Ok(PenaltyEval {
        delta,
        penalty: form.apply(delta.value),
        gradient,
        psi,
    })
}

fn delta_on(
    params: &ModelParams,
    ds: &Dataset,
    groups: &GroupIndex,
    source: DeltaSource<'_>,
) -> Result<DeltaValue> {
    match source {
        DeltaSource::Full => fairness::delta(&responsibilities(&ds.features, params), groups),
        DeltaSource::Subsample(sub) => fairness::subsampled_delta(params, sub, ds),
    }
}

/// ℓ(Θ | D) − λ · penalty(Δ).
pub fn penalized_objective(
    params: &ModelParams,
    ds: &Dataset,
    groups: &GroupIndex,
    lambda: f64,
    source: DeltaSource<'_>,
    form: PenaltyForm,
) -> Result<f64> {
    let ll = log_likelihood(&ds.features, params);
    if lambda == 0.0 {
        return Ok(ll);
    }
    let d = delta_on(params, ds, groups, source)?;
    Ok(ll - lambda * form.apply(d.value))
}

/// Q(Θ | Θ_t) − λ · penalty(Δ(Θ)); Δ uses the free parameters.
pub fn q_fair(
    params: &ModelParams,
    params_t: &ModelParams,
    ds: &Dataset,
    groups: &GroupIndex,
    lambda: f64,
    form: PenaltyForm,
) -> Result<f64> {
    let frozen = responsibilities(&ds.features, params_t);
    let q = q_with_frozen(params, &frozen, &ds.features);
    if lambda == 0.0 {
        return Ok(q);
    }
    let d = fairness::delta(&responsibilities(&ds.features, params), groups)?;
    Ok(q - lambda * form.apply(d.value))
}

/// Ascent gradient of the selected objective minus λ · penalty. The Δ term
/// is differentiated with its maximizing component held fixed.
pub fn grad_penalized(
    params: &ModelParams,
    ds: &Dataset,
    groups: &GroupIndex,
    lambda: f64,
    kind: ObjectiveKind<'_>,
    source: DeltaSource<'_>,
    form: PenaltyForm,
) -> Result<Gradient> {
    let features = &ds.features;
    let mut g = match kind {
        ObjectiveKind::Likelihood => {
            let psi = responsibilities(features, params);
            weighted_gradient(params, features, None, &psi.psi)
        }
        ObjectiveKind::QFair { frozen } => weighted_gradient(params, features, None, &frozen.psi),
    };
    if lambda != 0.0 {
        let pen = match source {
            DeltaSource::Full => penalty_with_gradient(params, features, None, groups, form)?,
            DeltaSource::Subsample(sub) => {
                let sub_groups = GroupIndex::from_subsample(ds, sub)?;
                penalty_with_gradient(params, features, Some(&sub.indices), &sub_groups, form)?
            }
        };
        g = g.add_scaled(&pen.gradient, -lambda);
    }
    if !g.is_finite() {
        return Err(FmcError::NonFinite("gradient".into()));
    }
    Ok(g)
}

/// Central differences on the unconstrained coordinates of `params`.
pub fn finite_diff_gradient(
    params: &ModelParams,
    objective: impl Fn(&ModelParams) -> f64,
    step: f64,
) -> Gradient {
    assert!(step > 0.0, "finite-difference step must be positive");
    let base = params.to_flat();
    let mut out = vec![0.0; base.len()];
    let mut work = base.clone();
    for c in 0..base.len() {
        work[c] = base[c] + step;
        let up = objective(&params.from_flat(&work));
        work[c] = base[c] - step;
        let down = objective(&params.from_flat(&work));
        work[c] = base[c];
        out[c] = (up - down) / (2.0 * step);
    }
    Gradient::from_flat(params, &out)
}

/// Weighted sufficient statistics of frozen responsibilities.
///
/// Q(Θ | Θ_t) depends on the data only through these sums, so the M-step can
/// evaluate Q and its gradient in O(K·d) per step, and a mini-batch E-step can
/// refresh individual rows by subtracting their old contribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    structure: Structure,
    /// Σ_i ψ_ik
    pub weight: Vec<f64>,
    /// Σ_i ψ_ik x_i
    pub first: Array2<f64>,
    /// Σ_i ψ_ik x_ij²
    pub second: Array2<f64>,
    /// Σ_i ψ_ik 𝟙(x_ij = c)
    pub counts: Vec<Vec<Vec<f64>>>,
}

impl SufficientStats {
    pub fn zeros(params: &ModelParams) -> Self {
        let k = params.k();
        let d = params.d_cont();
        SufficientStats {
            structure: params.structure,
            weight: vec![0.0; k],
            first: Array2::zeros((k, d)),
            second: Array2::zeros((k, d)),
            counts: params
                .cat_logits
                .iter()
                .map(|t| t.iter().map(|l| vec![0.0; l.len()]).collect())
                .collect(),
        }
    }

    pub fn from_frozen(params: &ModelParams, features: &Features, psi: &Responsibilities) -> Self {
        let mut st = Self::zeros(params);
        for i in 0..features.n_rows() {
            st.add_row(features, i, psi.psi.row(i).as_slice().expect("row-major"), 1.0);
        }
        st
    }

    /// Adds `sign` times row i's contribution under responsibilities `psi_row`.
    pub fn add_row(&mut self, features: &Features, i: usize, psi_row: &[f64], sign: f64) {
        let gaussian = self.structure.has_gaussian();
        let cat = self.structure.has_categorical();
        let x = features.cont_row(i);
        for (k, &p) in psi_row.iter().enumerate() {
            let w = sign * p;
            self.weight[k] += w;
            if gaussian {
                for j in 0..x.len() {
                    self.first[[k, j]] += w * x[j];
                    self.second[[k, j]] += w * x[j] * x[j];
                }
            }
            if cat {
                for (j, &c) in features.cate_row(i).iter().enumerate() {
                    self.counts[k][j][c] += w;
                }
            }
        }
    }

    /// Σ_i ψ_ik (x_ij − μ_kj)² from the moments.
    fn centered(&self, params: &ModelParams, k: usize, j: usize) -> f64 {
        let mu = params.means[[k, j]];
        (self.second[[k, j]] - 2.0 * mu * self.first[[k, j]] + self.weight[k] * mu * mu).max(0.0)
    }

    /// Q(Θ | Θ_t).
    pub fn q_value(&self, params: &ModelParams) -> f64 {
        let log_pi = params.log_pi();
        let mut q = 0.0;
        let d = params.d_cont();
        for (k, lp) in log_pi.iter().enumerate() {
            let w = self.weight[k];
            q += w * lp;
            match &params.scale {
                Scale::Iso(sigma) if self.structure.has_gaussian() => {
                    let var = sigma * sigma;
                    let ss: f64 = (0..d).map(|j| self.centered(params, k, j)).sum();
                    q += -0.5 * w * d as f64 * (2.0 * std::f64::consts::PI * var).ln()
                        - ss / (2.0 * var);
                }
                Scale::Diag(s) => {
                    for j in 0..d {
                        let sd = s[[k, j]];
                        q += -w * (0.5 * (2.0 * std::f64::consts::PI).ln() + sd.ln())
                            - self.centered(params, k, j) / (2.0 * sd * sd);
                    }
                }
                _ => {}
            }
            if self.structure.has_categorical() {
                for (j, logits) in params.cat_logits[k].iter().enumerate() {
                    let lp = crate::mixture::log_softmax(logits);
                    for (c, l) in lp.iter().enumerate() {
                        let n = self.counts[k][j][c];
                        if n != 0.0 {
                            q += n * l;
                        }
                    }
                }
            }
        }
        q
    }

    /// ∇ Q(Θ | Θ_t) in unconstrained coordinates.
    pub fn q_gradient(&self, params: &ModelParams) -> Gradient {
        let mut g = Gradient::zeros_like(params);
        let pi = params.pi();
        let total: f64 = self.weight.iter().sum();
        let d = params.d_cont();
        let mut iso_acc = 0.0;
        for k in 0..params.k() {
            let w = self.weight[k];
            g.d_eta[k] = w - pi[k] * total;
            match (&params.scale, &mut g.d_log_scale) {
                (Scale::Iso(sigma), Scale::Iso(_)) if self.structure.has_gaussian() => {
                    let var = sigma * sigma;
                    let mut ss = 0.0;
                    for j in 0..d {
                        g.d_means[[k, j]] = (self.first[[k, j]] - w * params.means[[k, j]]) / var;
                        ss += self.centered(params, k, j);
                    }
                    iso_acc += ss / var - w * d as f64;
                }
                (Scale::Diag(s), Scale::Diag(ds)) => {
                    for j in 0..d {
                        let var = s[[k, j]] * s[[k, j]];
                        g.d_means[[k, j]] = (self.first[[k, j]] - w * params.means[[k, j]]) / var;
                        ds[[k, j]] = self.centered(params, k, j) / var - w;
                    }
                }
                _ => {}
            }
            if self.structure.has_categorical() {
                for (j, logits) in params.cat_logits[k].iter().enumerate() {
                    let p = softmax(logits);
                    for (c, pc) in p.iter().enumerate() {
                        g.d_cat_logits[k][j][c] = self.counts[k][j][c] - pc * w;
                    }
                }
            }
        }
        if let Scale::Iso(s) = &mut g.d_log_scale {
            *s = iso_acc;
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    use crate::data::Features;

    fn quadratic_params() -> ModelParams {
        ModelParams::gaussian_iso(&[0.25, 0.75], array![[0.5, -1.5], [2.0, 0.25]], 1.7).unwrap()
    }

    #[test]
    fn quadratic_finite_difference() {
        let p = quadratic_params();
        let f = |q: &ModelParams| q.to_flat().iter().map(|v| v * v).sum::<f64>();
        let expected: Vec<f64> = p.to_flat().iter().map(|v| 2.0 * v).collect();
        let g = finite_diff_gradient(&p, f, 1e-4).to_flat();
        for (a, b) in g.iter().zip(&expected) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn finite_difference_is_second_order() {
        // f(θ) = Σ θ³ has third derivative 6, so central error = h² per coordinate
        let p = quadratic_params();
        let f = |q: &ModelParams| q.to_flat().iter().map(|v| v * v * v).sum::<f64>();
        let exact: Vec<f64> = p.to_flat().iter().map(|v| 3.0 * v * v).collect();
        let err = |h: f64| {
            finite_diff_gradient(&p, f, h)
                .to_flat()
                .iter()
                .zip(&exact)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn eta_gradient_sums_to_zero_without_penalty() {
        let p = quadratic_params();
        let f = Features::continuous(array![[0.0, 1.0], [2.0, -1.0], [0.3, 0.3]]);
        let psi = responsibilities(&f, &p);
        let g = weighted_gradient(&p, &f, None, &psi.psi);
        assert_abs_diff_eq!(g.d_eta.sum(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn mean_gradient_vanishes_at_sample_mean() {
        let f = Features::continuous(array![[1.0], [2.0], [6.0]]);
        let p = ModelParams::gaussian_iso(&[1.0], array![[3.0]], 1.0).unwrap();
        let psi = responsibilities(&f, &p);
        let g = weighted_gradient(&p, &f, None, &psi.psi);
        assert_abs_diff_eq!(g.d_means[[0, 0]], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn sufficient_stats_match_row_route() {
        let f = Features::new(
            array![[0.1, 1.0], [2.0, -1.0], [0.3, 0.7], [-1.2, 0.2]],
            array![[0usize, 2], [1, 1], [1, 0], [0, 2]],
            vec![2, 3],
        )
        .unwrap();
        let tables = vec![
            vec![vec![0.3, 0.7], vec![0.2, 0.3, 0.5]],
            vec![vec![0.6, 0.4], vec![0.1, 0.8, 0.1]],
        ];
        let p_t = ModelParams::mixed(&[0.4, 0.6], array![[0.0, 0.5], [1.0, -0.5]], 0.9, &tables).unwrap();
        let p = ModelParams::mixed(&[0.7, 0.3], array![[0.2, 0.1], [0.8, -0.2]], 1.3, &tables).unwrap();
        let frozen = responsibilities(&f, &p_t);
        let st = SufficientStats::from_frozen(&p, &f, &frozen);
        assert_abs_diff_eq!(st.q_value(&p), q_with_frozen(&p, &frozen, &f), epsilon = 1e-12);
        let direct = weighted_gradient(&p, &f, None, &frozen.psi);
        assert!(st.q_gradient(&p).relative_error(&direct) < 1e-12);
    }
}
