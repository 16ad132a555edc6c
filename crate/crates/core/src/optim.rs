//! Initialization, K-means and the three fitting algorithms.
//!
//! All fits maximize the per-sample form ℓ(Θ)/N − λ·penalty(Δ), so one
//! λ and one learning rate behave the same across dataset sizes.

use std::time::Instant;

use log::{debug, info, warn};
use ndarray::{Array1, Array2};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{subsample, Dataset, Features, Preprocessing, SubSample};
use crate::error::{FmcError, Result};
use crate::eval::{cost, CostKind};
use crate::fairness::{self, GroupIndex};
use crate::mixture::{
    hard_assign, pairwise_sum, responsibilities, responsibilities_and_loglik, ModelParams,
    Responsibilities, Scale, Structure,
};
use crate::objective::{ascend, penalty_from_psi, weighted_gradient, PenaltyForm, SufficientStats};
use crate::rng::{self, FmcRng};

/// Fitting algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Gd,
    Em,
    EmMinibatch,
}

impl std::str::FromStr for Algorithm {
    type Err = FmcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(Algorithm::Gd),
            "em" => Ok(Algorithm::Em),
            "em-minibatch" => Ok(Algorithm::EmMinibatch),
            other => Err(FmcError::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub k: usize,
    pub lambda: f64,
    /// Outer iteration cap.
    pub max_iter: usize,
    /// Gradient steps per M-step (EM variants).
    pub inner_steps: usize,
    pub learning_rate: f64,
    pub batch_fraction: f64,
    pub subsample_fraction: f64,
    pub structure: Structure,
    pub penalty_form: PenaltyForm,
    pub seed: u64,
    /// Relative tolerance on the monitored objective.
    pub tol: f64,
    pub kmeans_max_iter: usize,
    pub max_halvings: usize,
    /// Record full-data ℓ, Gap, Balance and Cost after every outer iteration.
    pub track_metrics: bool,
    pub cost: CostKind,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig::em(2)
    }
}

impl FitConfig {
    /// EM defaults: T = 200, R = 10, γ = 1e-2.
    pub fn em(k: usize) -> Self {
        FitConfig {
            k,
            lambda: 0.0,
            max_iter: 200,
            inner_steps: 10,
            learning_rate: 1e-2,
            batch_fraction: 1.0,
            subsample_fraction: 1.0,
            structure: Structure::GaussianIso,
            penalty_form: PenaltyForm::Abs,
            seed: 0,
            tol: 1e-6,
            kmeans_max_iter: 100,
            max_halvings: 10,
            track_metrics: true,
            cost: CostKind::Dist,
        }
    }

    /// Gradient-ascent defaults: T = 10000, γ = 1e-3.
    pub fn gd(k: usize) -> Self {
        FitConfig {
            max_iter: 10_000,
            learning_rate: 1e-3,
            ..FitConfig::em(k)
        }
    }

    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        let bad = |m: &str| Err(FmcError::Config(m.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and non-negative");
        }
        if self.max_iter == 0 || self.inner_steps == 0 || self.kmeans_max_iter == 0 {
            return bad("iteration caps must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        for (name, f) in [
            ("batch_fraction", self.batch_fraction),
            ("subsample_fraction", self.subsample_fraction),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(FmcError::Config(format!("{name} must lie in (0, 1]")));
            }
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if ds.n_rows() < self.k {
            return Err(FmcError::Config(format!(
                "{} rows cannot support {} components",
                ds.n_rows(),
                self.k
            )));
        }
        if self.structure.has_gaussian() && ds.features.d_cont() == 0 {
            return bad("structure needs continuous features");
        }
        if self.structure.has_categorical() && ds.features.d_cate() == 0 {
            return bad("structure needs categorical features");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    /// The M-step could not increase the objective even after all step
    /// halvings.
    Stalled,
    Diverged,
}

/// Metrics after one outer iteration; iteration 0 is the initial point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    /// Monitored objective: Q_fair (EM), the surrogate sum (mini-batch) or
    /// ℓ/N − λ·penalty (GD), per sample.
    pub objective: f64,
    /// Same objective at the start of the iteration, under the same frozen
    /// responsibilities.
    pub objective_start: f64,
    /// Soft Δ on the penalty rows.
    pub delta_soft: f64,
    pub log_likelihood: Option<f64>,
    pub gap_hard: Option<f64>,
    pub balance: Option<f64>,
    pub cost: Option<f64>,
    pub learning_rate: f64,
    pub halvings: usize,
}

/// Full-data evaluation of a parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub log_likelihood: f64,
    pub nll: f64,
    pub delta_soft: f64,
    pub gap_hard: f64,
    pub balance: f64,
    /// `None` without continuous features.
    pub cost: Option<f64>,
}

impl Metrics {
    pub fn compute(
        params: &ModelParams,
        ds: &Dataset,
        groups: &GroupIndex,
        cost_kind: CostKind,
    ) -> Result<Self> {
        let (psi, lls) = responsibilities_and_loglik(&ds.features, params, None);
        Self::from_psi(params, ds, groups, cost_kind, &psi, pairwise_sum(&lls))
    }

    fn from_psi(
        params: &ModelParams,
        ds: &Dataset,
        groups: &GroupIndex,
        cost_kind: CostKind,
        psi: &Responsibilities,
        ll: f64,
    ) -> Result<Self> {
        let labels = hard_assign(psi);
        let k = params.k();
        Ok(Metrics {
            log_likelihood: ll,
            nll: -ll / ds.n_rows() as f64,
            delta_soft: fairness::delta(psi, groups)?.value,
            gap_hard: fairness::hard_gap(&labels, groups, k)?,
            balance: fairness::balance(&labels, groups, k)?,
            cost: params
                .structure
                .has_gaussian()
                .then(|| cost(&ds.features, &labels, &params.means, cost_kind)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub algorithm: Algorithm,
    pub config: FitConfig,
    pub params: ModelParams,
    pub trajectory: Vec<IterRecord>,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub converged: bool,
    pub seconds: f64,
    pub seed: u64,
    pub metrics: Metrics,
    /// Rows in the Δ subsample.
    pub subsample_size: usize,
    /// Statistics to apply to new rows before [`post_assign`].
    #[serde(default)]
    pub preprocessing: Preprocessing,
}

/// Lloyd's algorithm result.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Array2<f64>,
    pub labels: Vec<usize>,
    /// Σ squared distance to the assigned center after each assignment step.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations on the continuous features from `k` distinct random
/// rows. An emptied cluster is re-seeded at the point farthest from its
/// center.
pub fn kmeans(features: &Features, k: usize, rng: &mut FmcRng, max_iter: usize) -> Result<KMeans> {
    let n = features.n_rows();
    if k == 0 || n < k {
        return Err(FmcError::Config(format!("kmeans needs 1 ≤ k ≤ N, got k={k}, N={n}")));
    }
    if features.d_cont() == 0 {
        return Err(FmcError::Config("kmeans needs continuous features".into()));
    }
    let x = &features.cont;
    let seeds = sample_indices(rng, n, k).into_vec();
    let mut centers = x.select(ndarray::Axis(0), &seeds);
    let mut labels = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut changed = false;
        let mut total = 0.0;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (mut best, mut best_d) = (0, f64::INFINITY);
            for c in 0..k {
                let d = sq_dist(x.row(i), centers.row(c));
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
            dists[i] = best_d;
            total += best_d;
        }
        history.push(total);
        if !changed && iterations > 1 {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for i in 0..n {
            sums.row_mut(labels[i]).scaled_add(1.0, &x.row(i));
            counts[labels[i]] += 1;
        }
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / count as f64));
            } else {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]))
                    .expect("n ≥ 1");
                centers.row_mut(c).assign(&x.row(far));
                dists[far] = 0.0;
                labels[far] = c;
            }
        }
    }
    Ok(KMeans {
        centers,
        labels,
        cost_history: history,
        iterations,
    })
}

/// Uniform weights, K-means means, unit scales and uniform(0, 1) categorical
/// logits.
pub fn init_params(ds: &Dataset, config: &FitConfig, rng: &mut FmcRng) -> Result<ModelParams> {
    config.validate(ds)?;
    let k = config.k;
    let f = &ds.features;
    let means = if config.structure.has_gaussian() {
        kmeans(f, k, rng, config.kmeans_max_iter)?.centers
    } else {
        Array2::zeros((k, 0))
    };
    let d = means.ncols();
    let scale = match config.structure {
        Structure::GaussianIso | Structure::Mixed => Scale::Iso(1.0),
        Structure::GaussianDiag => Scale::Diag(Array2::ones((k, d))),
        Structure::Multinoulli => Scale::None,
    };
    let cat_logits = if config.structure.has_categorical() {
        (0..k)
            .map(|_| {
                f.cardinalities
                    .iter()
                    .map(|&c| (0..c).map(|_| rng.random::<f64>()).collect())
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };
    let params = ModelParams {
        structure: config.structure,
        eta: Array1::zeros(k),
        means,
        scale,
        cat_logits,
    };
    params.validate()?;
    Ok(params)
}

fn penalty_sample(ds: &Dataset, config: &FitConfig) -> Result<SubSample> {
    if config.subsample_fraction >= 1.0 {
        return Ok(SubSample::identity(ds));
    }
    let n = ((config.subsample_fraction * ds.n_rows() as f64).ceil() as usize).max(1);
    subsample(ds, n, &mut rng::stream(config.seed, rng::STREAM_SUBSAMPLE))
}

/// Rows and groups on which Δ is evaluated during a fit.
struct PenaltyRows {
    rows: Option<Vec<usize>>,
    groups: GroupIndex,
}

impl PenaltyRows {
    fn new(ds: &Dataset, groups: &GroupIndex, sub: &SubSample) -> Result<Self> {
        let identity = sub.indices.len() == ds.n_rows()
            && sub.indices.iter().enumerate().all(|(r, &i)| r == i);
        Ok(if identity {
            PenaltyRows {
                rows: None,
                groups: groups.clone(),
            }
        } else {
            PenaltyRows {
                rows: Some(sub.indices.clone()),
                groups: GroupIndex::from_subsample(ds, sub)?,
            }
        })
    }

    /// Penalty value, Δ and the penalty gradient at `params`.
    fn eval(
        &self,
        params: &ModelParams,
        features: &Features,
        form: PenaltyForm,
        need_grad: bool,
    ) -> Result<(f64, f64, Option<crate::objective::Gradient>)> {
        let rows = self.rows.as_deref();
        let (psi, _) = responsibilities_and_loglik(features, params, rows);
        if need_grad {
            let pe = penalty_from_psi(params, features, rows, &self.groups, form, psi)?;
            Ok((pe.penalty, pe.delta.value, Some(pe.gradient)))
        } else {
            let d = fairness::delta(&psi, &self.groups)?.value;
            Ok((form.apply(d), d, None))
        }
    }
}

fn check_groups(ds: &Dataset, groups: &GroupIndex) -> Result<()> {
    let n: usize = groups.counts().iter().sum();
    if n != ds.n_rows() {
        return Err(FmcError::Dimension {
            what: "rows covered by groups".into(),
            expected: ds.n_rows(),
            got: n,
        });
    }
    Ok(())
}

fn is_small(change: f64, reference: f64, tol: f64) -> bool {
    change.abs() < tol * reference.abs().max(1.0)
}

struct Tracker<'a> {
    ds: &'a Dataset,
    groups: &'a GroupIndex,
    config: &'a FitConfig,
}

impl Tracker<'_> {
    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        iter: usize,
        params: &ModelParams,
        objective: f64,
        objective_start: f64,
        delta_soft: f64,
        learning_rate: f64,
        halvings: usize,
    ) -> Result<IterRecord> {
        let mut rec = IterRecord {
            iter,
            objective,
            objective_start,
            delta_soft,
            log_likelihood: None,
            gap_hard: None,
            balance: None,
            cost: None,
            learning_rate,
            halvings,
        };
        if self.config.track_metrics {
            let m = Metrics::compute(params, self.ds, self.groups, self.config.cost)?;
            rec.log_likelihood = Some(m.log_likelihood);
            rec.gap_hard = Some(m.gap_hard);
            rec.balance = Some(m.balance);
            rec.cost = m.cost;
        }
        Ok(rec)
    }
}

/// FMC-GD: full-batch gradient ascent on ℓ/N − λ·penalty(Δ). Stops after
/// five consecutive iterations that each improve the objective by less than
/// the tolerance and returns the best iterate.
pub fn fit_fmc_gd(ds: &Dataset, groups: &GroupIndex, config: &FitConfig) -> Result<FitReport> {
    config.validate(ds)?;
    let init = init_params(ds, config, &mut rng::stream(config.seed, rng::STREAM_INIT))?;
    fit_fmc_gd_from(ds, groups, config, init)
}

pub fn fit_fmc_gd_from(
    ds: &Dataset,
    groups: &GroupIndex,
    config: &FitConfig,
    init: ModelParams,
) -> Result<FitReport> {
    config.validate(ds)?;
    check_groups(ds, groups)?;
    init.check_features(&ds.features)?;
    let start = Instant::now();
    let sub = penalty_sample(ds, config)?;
    let pen_rows = PenaltyRows::new(ds, groups, &sub)?;
    let tracker = Tracker { ds, groups, config };
    let n = ds.n_rows() as f64;
    let f = &ds.features;
    let lambda = config.lambda;
    let gamma = config.learning_rate;

    let evaluate = |p: &ModelParams| -> Result<(f64, f64, crate::objective::Gradient)> {
        let (psi, lls) = responsibilities_and_loglik(f, p, None);
        let mut g = weighted_gradient(p, f, None, &psi.psi).scaled(1.0 / n);
        let mut obj = pairwise_sum(&lls) / n;
        let mut delta = f64::NAN;
        if lambda > 0.0 || config.track_metrics {
            let (pen, d, pg) = pen_rows.eval(p, f, config.penalty_form, lambda > 0.0)?;
            delta = d;
            if let Some(pg) = pg {
                obj -= lambda * pen;
                g = g.add_scaled(&pg, -lambda);
            }
        }
        Ok((obj, delta, g))
    };

    let mut params = init;
    let (mut obj, mut delta, mut grad) = evaluate(&params)?;
    let mut trajectory = vec![tracker.record(0, &params, obj, obj, delta, gamma, 0)?];
    let mut best = (params.clone(), obj);
    let mut quiet = 0;
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;
    for t in 1..=config.max_iter {
        if !grad.is_finite() {
            stop = StopReason::Diverged;
            break;
        }
        let next = ascend(&params, &grad, gamma);
        let (o, d, g) = evaluate(&next)?;
        if !o.is_finite() {
            stop = StopReason::Diverged;
            break;
        }
        iterations = t;
        let prev = obj;
        params = next;
        (obj, delta, grad) = (o, d, g);
        if obj > best.1 {
            best = (params.clone(), obj);
        }
        trajectory.push(tracker.record(t, &params, obj, prev, delta, gamma, 0)?);
        if obj - prev < config.tol * prev.abs().max(1.0) {
            quiet += 1;
            if quiet >= 5 {
                stop = StopReason::Converged;
                break;
            }
        } else {
            quiet = 0;
        }
    }
    if stop == StopReason::Diverged {
        warn!("gradient ascent diverged after {iterations} iterations");
    }
    finish(
        Algorithm::Gd,
        ds,
        groups,
        config,
        best.0,
        trajectory,
        iterations,
        stop,
        start,
        sub.len(),
    )
}

/// FMC-EM: E-step freezes responsibilities, M-step runs R gradient steps on
/// Q_fair with step halving until Q_fair does not decrease.
pub fn fit_fmc_em(ds: &Dataset, groups: &GroupIndex, config: &FitConfig) -> Result<FitReport> {
    let cfg = FitConfig {
        batch_fraction: 1.0,
        ..config.clone()
    };
    cfg.validate(ds)?;
    let init = init_params(ds, &cfg, &mut rng::stream(cfg.seed, rng::STREAM_INIT))?;
    run_em(Algorithm::Em, ds, groups, &cfg, init)
}

pub fn fit_fmc_em_from(
    ds: &Dataset,
    groups: &GroupIndex,
    config: &FitConfig,
    init: ModelParams,
) -> Result<FitReport> {
    let cfg = FitConfig {
        batch_fraction: 1.0,
        ..config.clone()
    };
    run_em(Algorithm::Em, ds, groups, &cfg, init)
}

/// Mini-batch FMC-EM: each outer step refreshes the frozen responsibilities
/// of a random batch only, and Δ is evaluated on a subsample drawn once.
pub fn fit_fmc_em_minibatch(
    ds: &Dataset,
    groups: &GroupIndex,
    config: &FitConfig,
) -> Result<FitReport> {
    config.validate(ds)?;
    let init = init_params(ds, config, &mut rng::stream(config.seed, rng::STREAM_INIT))?;
    run_em(Algorithm::EmMinibatch, ds, groups, config, init)
}

pub fn fit_fmc_em_minibatch_from(
    ds: &Dataset,
    groups: &GroupIndex,
    config: &FitConfig,
    init: ModelParams,
) -> Result<FitReport> {
    run_em(Algorithm::EmMinibatch, ds, groups, config, init)
}

/// Dispatches on `algorithm`.
pub fn fit(
    algorithm: Algorithm,
    ds: &Dataset,
    groups: &GroupIndex,
    config: &FitConfig,
) -> Result<FitReport> {
    match algorithm {
        Algorithm::Gd => fit_fmc_gd(ds, groups, config),
        Algorithm::Em => fit_fmc_em(ds, groups, config),
        Algorithm::EmMinibatch => fit_fmc_em_minibatch(ds, groups, config),
    }
}

fn run_em(
    algorithm: Algorithm,
    ds: &Dataset,
    groups: &GroupIndex,
    config: &FitConfig,
    init: ModelParams,
) -> Result<FitReport> {
    config.validate(ds)?;
    check_groups(ds, groups)?;
    init.check_features(&ds.features)?;
    let start = Instant::now();
    let f = &ds.features;
    let n_rows = ds.n_rows();
    let n = n_rows as f64;
    let lambda = config.lambda;
    let form = config.penalty_form;
    let sub = penalty_sample(ds, config)?;
    let pen_rows = PenaltyRows::new(ds, groups, &sub)?;
    let tracker = Tracker { ds, groups, config };
    let batch_size = ((config.batch_fraction * n).ceil() as usize).clamp(1, n_rows);
    let mut batch_rng = rng::stream(config.seed, rng::STREAM_BATCHES);

    // value of the monitored objective for fixed statistics
    let value = |stats: &SufficientStats, p: &ModelParams| -> Result<(f64, f64)> {
        let q = stats.q_value(p) / n;
        if lambda == 0.0 {
            return Ok((q, f64::NAN));
        }
        let (pen, d, _) = pen_rows.eval(p, f, form, false)?;
        Ok((q - lambda * pen, d))
    };
    let m_step = |stats: &SufficientStats, from: &ModelParams, gamma: f64| -> Result<ModelParams> {
        let mut p = from.clone();
        for _ in 0..config.inner_steps {
            let mut g = stats.q_gradient(&p).scaled(1.0 / n);
            if lambda > 0.0 {
                let (_, _, pg) = pen_rows.eval(&p, f, form, true)?;
                g = g.add_scaled(&pg.expect("requested"), -lambda);
            }
            if !g.is_finite() {
                return Err(FmcError::NonFinite("M-step gradient".into()));
            }
            p = ascend(&p, &g, gamma);
        }
        Ok(p)
    };

    let mut params = init;
    let (mut psi, _) = responsibilities_and_loglik(f, &params, None);
    let mut stats = SufficientStats::from_frozen(&params, f, &psi);
    let (obj0, d0) = value(&stats, &params)?;
    let d0 = if d0.is_nan() && config.track_metrics {
        pen_rows.eval(&params, f, form, false)?.1
    } else {
        d0
    };
    let mut trajectory = vec![tracker.record(0, &params, obj0, obj0, d0, config.learning_rate, 0)?];
    let mut gamma = config.learning_rate;
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;

    for t in 1..=config.max_iter {
        // E-step
        if t > 1 {
            if batch_size == n_rows {
                psi = responsibilities(f, &params);
                stats = SufficientStats::from_frozen(&params, f, &psi);
            } else {
                let mut batch = sample_indices(&mut batch_rng, n_rows, batch_size).into_vec();
                batch.sort_unstable();
                let fresh = crate::mixture::responsibilities_rows(f, &params, &batch);
                for (r, &i) in batch.iter().enumerate() {
                    let old: Vec<f64> = psi.psi.row(i).to_vec();
                    stats.add_row(f, i, &old, -1.0);
                    let new = fresh.psi.row(r);
                    stats.add_row(f, i, new.as_slice().expect("row-major"), 1.0);
                    psi.psi.row_mut(i).assign(&new);
                }
            }
        }
        let (start_obj, _) = value(&stats, &params)?;
        if !start_obj.is_finite() {
            stop = StopReason::Diverged;
            break;
        }

        // M-step with step halving
        let mut halvings = 0;
        let accepted = loop {
            match m_step(&stats, &params, gamma) {
                Ok(candidate) => {
                    let (obj, d) = value(&stats, &candidate)?;
                    if obj.is_finite() && obj >= start_obj {
                        break Some((candidate, obj, d));
                    }
                    if obj.is_finite() && start_obj - obj <= 1e-12 * start_obj.abs().max(1.0) {
                        // no representable ascent left
                        break None;
                    }
                }
                Err(FmcError::NonFinite(_)) => {}
                Err(e) => return Err(e),
            }
            if halvings == config.max_halvings {
                break None;
            }
            gamma *= 0.5;
            halvings += 1;
            debug!("iteration {t}: halving step to {gamma}");
        };
        let Some((candidate, obj, d)) = accepted else {
            stop = if halvings == config.max_halvings {
                StopReason::Stalled
            } else {
                StopReason::Converged
            };
            iterations = t - 1;
            break;
        };
        params = candidate;
        iterations = t;
        let d = if d.is_nan() && config.track_metrics {
            pen_rows.eval(&params, f, form, false)?.1
        } else {
            d
        };
        trajectory.push(tracker.record(t, &params, obj, start_obj, d, gamma, halvings)?);
        if is_small(obj - start_obj, start_obj, config.tol) {
            stop = StopReason::Converged;
            break;
        }
    }
    match stop {
        StopReason::Stalled => warn!("M-step stalled after {iterations} iterations"),
        StopReason::Diverged => warn!("EM diverged after {iterations} iterations"),
        _ => {}
    }
    finish(
        algorithm, ds, groups, config, params, trajectory, iterations, stop, start, sub.len(),
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    algorithm: Algorithm,
    ds: &Dataset,
    groups: &GroupIndex,
    config: &FitConfig,
    params: ModelParams,
    trajectory: Vec<IterRecord>,
    iterations: usize,
    stop_reason: StopReason,
    start: Instant,
    subsample_size: usize,
) -> Result<FitReport> {
    let metrics = Metrics::compute(&params, ds, groups, config.cost)?;
    let seconds = start.elapsed().as_secs_f64();
    info!(
        "{algorithm:?} λ={} stopped ({stop_reason:?}) after {iterations} iterations: nll={:.6} Δ={:.4} gap={:.4}",
        config.lambda, metrics.nll, metrics.delta_soft, metrics.gap_hard
    );
    Ok(FitReport {
        algorithm,
        config: config.clone(),
        params,
        trajectory,
        iterations,
        stop_reason,
        converged: stop_reason == StopReason::Converged,
        seconds,
        seed: config.seed,
        metrics,
        subsample_size,
        preprocessing: Preprocessing::default(),
    })
}

/// Responsibilities and hard labels for (already preprocessed) rows.
pub fn post_assign(params: &ModelParams, features: &Features) -> Result<(Responsibilities, Vec<usize>)> {
    params.check_features(features)?;
    let psi = responsibilities(features, params);
    let labels = hard_assign(&psi);
    Ok((psi, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn line(values: &[f64]) -> Dataset {
        let n = values.len();
        let f = Features::continuous(Array2::from_shape_vec((n, 1), values.to_vec()).unwrap());
        Dataset::new(f, (0..n).map(|i| i % 2).collect(), 2).unwrap()
    }

    #[test]
    fn kmeans_with_k_equal_n_has_zero_cost() {
        let ds = line(&[0.0, 3.0, 7.0, 12.0]);
        let km = kmeans(&ds.features, 4, &mut rng::seeded(1), 50).unwrap();
        assert_eq!(*km.cost_history.last().unwrap(), 0.0);
        let mut l = km.labels.clone();
        l.sort_unstable();
        assert_eq!(l, vec![0, 1, 2, 3]);
    }

    #[test]
    fn kmeans_cost_never_increases() {
        let ds = line(&[0.0, 0.5, 1.0, 5.0, 5.5, 9.0, 9.2, 20.0]);
        for seed in 0..10 {
            let km = kmeans(&ds.features, 3, &mut rng::seeded(seed), 50).unwrap();
            for w in km.cost_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }

    #[test]
    fn init_with_one_component_uses_data_mean() {
        let ds = line(&[1.0, 2.0, 6.0]);
        let p = init_params(&ds, &FitConfig::em(1), &mut rng::seeded(3)).unwrap();
        assert_abs_diff_eq!(p.means[[0, 0]], 3.0, epsilon = 1e-12);
        assert_eq!(p.pi().to_vec(), vec![1.0]);
        assert_eq!(p.scale, Scale::Iso(1.0));
    }

    #[test]
    fn init_is_deterministic() {
        let ds = line(&[1.0, 2.0, 6.0, 7.0, 9.0]);
        let a = init_params(&ds, &FitConfig::em(2), &mut rng::seeded(9)).unwrap();
        let b = init_params(&ds, &FitConfig::em(2), &mut rng::seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_rejects_bad_values() {
        let ds = line(&[1.0, 2.0]);
        let mut c = FitConfig::em(3);
        assert!(c.validate(&ds).is_err());
        c.k = 2;
        c.batch_fraction = 0.0;
        assert!(c.validate(&ds).is_err());
        c.batch_fraction = 1.0;
        c.tol = 0.0;
        assert!(c.validate(&ds).is_err());
    }

    #[test]
    fn em_with_one_component_reaches_sample_mean() {
        let ds = line(&[1.0, 2.0, 6.0, 3.0]);
        let cfg = FitConfig {
            learning_rate: 0.5,
            tol: 1e-12,
            max_iter: 500,
            ..FitConfig::em(1)
        };
        let rep = fit_fmc_em(&ds, &GroupIndex::from_dataset(&ds).unwrap(), &cfg).unwrap();
        assert_abs_diff_eq!(rep.params.means[[0, 0]], 3.0, epsilon = 1e-6);
    }

    #[test]
    fn post_assign_checks_dimensions() {
        let p = ModelParams::gaussian_iso(&[0.5, 0.5], array![[0.0, 0.0], [5.0, 5.0]], 1.0).unwrap();
        let wrong = Features::continuous(array![[1.0]]);
        assert!(matches!(post_assign(&p, &wrong), Err(FmcError::Dimension { .. })));
        let (_, labels) = post_assign(&p, &Features::continuous(array![[5.0, 5.0], [0.0, 0.1]])).unwrap();
        assert_eq!(labels, vec![1, 0]);
    }
}
