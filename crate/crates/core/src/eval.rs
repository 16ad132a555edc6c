//! Utility metrics, the λ sweep harness and diagnostic checks.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Features};
use crate::error::{FmcError, Result};
use crate::fairness::GroupIndex;
use crate::mixture::{log_likelihood, responsibilities, ModelParams, Scale, Structure};
use crate::optim::{fit, Algorithm, FitConfig, FitReport, StopReason};

/// Distance used in the clustering cost.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    /// Euclidean distance.
    #[default]
    Dist,
    /// Squared Euclidean distance, the K-means objective.
    Sqdist,
}

impl std::str::FromStr for CostKind {
    type Err = FmcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dist" => Ok(CostKind::Dist),
            "sqdist" => Ok(CostKind::Sqdist),
            other => Err(FmcError::Config(format!("unknown cost `{other}`"))),
        }
    }
}

/// Σ_i dist(x_i, center of label_i) over the continuous features.
pub fn cost(features: &Features, labels: &[usize], centers: &Array2<f64>, kind: CostKind) -> f64 {
    let terms: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let sq: f64 = features
                .cont_row(i)
                .iter()
                .zip(centers.row(l).iter())
                .map(|(x, c)| (x - c) * (x - c))
                .sum();
            match kind {
                CostKind::Dist => sq.sqrt(),
                CostKind::Sqdist => sq,
            }
        })
        .collect();
    crate::mixture::pairwise_sum(&terms)
}

/// Per-sample negative log-likelihood.
pub fn nll(ds: &Dataset, params: &ModelParams) -> f64 {
    -log_likelihood(&ds.features, params) / ds.n_rows() as f64
}

/// Fraction of agreements under the better of the two label mappings.
pub fn accuracy_best_mapping(labels: &[usize], truth: &[usize]) -> Result<f64> {
    if labels.len() != truth.len() {
        return Err(FmcError::Dimension {
            what: "labels".into(),
            expected: truth.len(),
            got: labels.len(),
        });
    }
    if labels.iter().chain(truth).any(|&v| v > 1) {
        return Err(FmcError::Config("best-mapping accuracy needs binary labels".into()));
    }
    if labels.is_empty() {
        return Err(FmcError::EmptyDataset);
    }
    let same = labels.iter().zip(truth).filter(|(a, b)| a == b).count();
    let n = labels.len();
    Ok(same.max(n - same) as f64 / n as f64)
}

/// Row-wise check that the largest responsibility of an isotropic Gaussian
/// mixture respects the softmax lower bound
/// 1 / (1 + (1 − π_a)/π_a · exp(−D / 2σ²)), where a is the nearest
/// component and D the gap between the second-nearest and nearest squared
/// distances. With uniform weights this is 1 / (1 + (K−1) e^{−D/2σ²}).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub rows: usize,
    pub violations: usize,
    pub min_margin: f64,
    pub min_max_psi: f64,
}

pub fn remark1_bound_check(features: &Features, params: &ModelParams) -> Result<BoundReport> {
    let Scale::Iso(sigma) = params.scale else {
        return Err(FmcError::Config("bound check needs an isotropic Gaussian model".into()));
    };
    if params.structure != Structure::GaussianIso {
        return Err(FmcError::Config("bound check needs an isotropic Gaussian model".into()));
    }
    params.check_features(features)?;
    let psi = responsibilities(features, params);
    let pi = params.pi();
    let k = params.k();
    let var = sigma * sigma;
    let mut out = BoundReport {
        rows: features.n_rows(),
        violations: 0,
        min_margin: f64::INFINITY,
        min_max_psi: f64::INFINITY,
    };
    for i in 0..features.n_rows() {
        let x = features.cont_row(i);
        let d2: Vec<f64> = (0..k)
            .map(|kk| {
                x.iter()
                    .zip(params.means.row(kk).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            })
            .collect();
        let a = (0..k).min_by(|&p, &q| d2[p].total_cmp(&d2[q])).expect("k ≥ 1");
        let bound = if k == 1 {
            1.0
        } else {
            let second = (0..k)
                .filter(|&kk| kk != a)
                .map(|kk| d2[kk])
                .fold(f64::INFINITY, f64::min);
            let gap = second - d2[a];
            1.0 / (1.0 + (1.0 - pi[a]) / pi[a] * (-gap / (2.0 * var)).exp())
        };
        let max_psi = psi.psi.row(i).iter().copied().fold(0.0, f64::max);
        let margin = max_psi - bound;
        if margin < -1e-12 {
            out.violations += 1;
        }
        out.min_margin = out.min_margin.min(margin);
        out.min_max_psi = out.min_max_psi.min(max_psi);
    }
    Ok(out)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &p in &idx[i..=j] {
                r[p] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// One (λ, seed) run of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub seed: u64,
    pub cost: f64,
    pub nll: f64,
    pub delta_soft: f64,
    pub gap_hard: f64,
    pub balance: f64,
    pub iters: usize,
    pub seconds: f64,
    /// converged, max-iterations, stalled, diverged, or `error: CODE`.
    pub status: String,
}

impl SweepRow {
    fn from_report(lambda: f64, seed: u64, rep: &FitReport) -> Self {
        let status = match rep.stop_reason {
            StopReason::Converged => "converged",
            StopReason::MaxIterations => "max-iterations",
            StopReason::Stalled => "stalled",
            StopReason::Diverged => "diverged",
        };
        SweepRow {
            lambda,
            seed,
            cost: rep.metrics.cost.unwrap_or(f64::NAN),
            nll: rep.metrics.nll,
            delta_soft: rep.metrics.delta_soft,
            gap_hard: rep.metrics.gap_hard,
            balance: rep.metrics.balance,
            iters: rep.iterations,
            seconds: rep.seconds,
            status: status.into(),
        }
    }

    fn failed(lambda: f64, seed: u64, err: &FmcError, seconds: f64) -> Self {
        SweepRow {
            lambda,
            seed,
            cost: f64::NAN,
            nll: f64::NAN,
            delta_soft: f64::NAN,
            gap_hard: f64::NAN,
            balance: f64::NAN,
            iters: 0,
            seconds,
            status: format!("error: {}", err.code()),
        }
    }

    pub fn ok(&self) -> bool {
        !self.status.starts_with("error")
    }
}

/// Mean ± standard deviation of one metric over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(v: &[f64]) -> Self {
        let v: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        MeanStd {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Seed-averaged metrics at one λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSummary {
    pub lambda: f64,
    pub runs: usize,
    pub failures: usize,
    pub cost: MeanStd,
    pub nll: MeanStd,
    pub delta_soft: MeanStd,
    pub gap_hard: MeanStd,
    pub balance: MeanStd,
    pub seconds: MeanStd,
    /// Not dominated on (mean Cost, mean hard Gap) by another λ.
    pub pareto: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub algorithm: Algorithm,
    pub base_config: FitConfig,
    /// Sorted by (λ, seed).
    pub rows: Vec<SweepRow>,
    /// Sorted by λ.
    pub summary: Vec<LambdaSummary>,
}

/// Flags points that no other point weakly dominates with one strict
/// improvement. Points with a non-finite coordinate are never flagged.
pub fn pareto_flags(points: &[(f64, f64)]) -> Vec<bool> {
    points
        .iter()
        .map(|&(a, b)| {
            a.is_finite()
                && b.is_finite()
                && !points.iter().any(|&(c, d)| {
                    c.is_finite() && d.is_finite() && c <= a && d <= b && (c < a || d < b)
                })
        })
        .collect()
}

/// Fits every (λ, seed) pair on `jobs` worker threads. Failed runs are kept
/// as rows with an error status. Results do not depend on `jobs`.
pub fn sweep(
    algorithm: Algorithm,
    ds: &Dataset,
    groups: &GroupIndex,
    base: &FitConfig,
    lambdas: &[f64],
    seeds: &[u64],
    jobs: usize,
) -> Result<SweepResult> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(FmcError::Config("sweep needs at least one λ and one seed".into()));
    }
    let grid: Vec<(f64, u64)> = lambdas
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    let run = |&(lambda, seed): &(f64, u64)| {
        let cfg = FitConfig {
            lambda,
            seed,
            ..base.clone()
        };
        let t = Instant::now();
        match fit(algorithm, ds, groups, &cfg) {
            Ok(rep) => SweepRow::from_report(lambda, seed, &rep),
            Err(e) => SweepRow::failed(lambda, seed, &e, t.elapsed().as_secs_f64()),
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| FmcError::Config(format!("thread pool: {e}")))?;
    let mut rows: Vec<SweepRow> = pool.install(|| grid.par_iter().map(run).collect());
    rows.sort_by(|a, b| a.lambda.total_cmp(&b.lambda).then(a.seed.cmp(&b.seed)));

    let mut distinct: Vec<f64> = lambdas.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut summary: Vec<LambdaSummary> = distinct
        .iter()
        .map(|&lambda| {
            let at: Vec<&SweepRow> = rows.iter().filter(|r| r.lambda == lambda).collect();
            let ok: Vec<&SweepRow> = at.iter().copied().filter(|r| r.ok()).collect();
            let col = |f: fn(&SweepRow) -> f64| MeanStd::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            LambdaSummary {
                lambda,
                runs: at.len(),
                failures: at.len() - ok.len(),
                cost: col(|r| r.cost),
                nll: col(|r| r.nll),
                delta_soft: col(|r| r.delta_soft),
                gap_hard: col(|r| r.gap_hard),
                balance: col(|r| r.balance),
                seconds: col(|r| r.seconds),
                pareto: false,
            }
        })
        .collect();
    let points: Vec<(f64, f64)> = summary.iter().map(|s| (s.cost.mean, s.gap_hard.mean)).collect();
    for (s, flag) in summary.iter_mut().zip(pareto_flags(&points)) {
        s.pareto = flag;
    }
    Ok(SweepResult {
        algorithm,
        base_config: base.clone(),
        rows,
        summary,
    })
}

impl SweepResult {
    /// `lambda,seed,cost,nll,delta_soft,gap_hard,balance,iters,seconds,status`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(FmcError::from)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| FmcError::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| FmcError::io(path, e))
    }

    /// Per-λ mean and std series for plotting.
    pub fn write_plot_data(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(FmcError::from)?;
        w.write_record([
            "lambda",
            "cost_mean",
            "cost_std",
            "gap_hard_mean",
            "gap_hard_std",
            "delta_soft_mean",
            "delta_soft_std",
            "balance_mean",
            "balance_std",
            "nll_mean",
            "nll_std",
            "pareto",
        ])?;
        for s in &self.summary {
            let mut rec: Vec<String> = vec![s.lambda.to_string()];
            for m in [s.cost, s.gap_hard, s.delta_soft, s.balance, s.nll] {
                rec.push(m.mean.to_string());
                rec.push(m.std.to_string());
            }
            rec.push(s.pareto.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| FmcError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn cost_single_term() {
        let f = Features::continuous(array![[3.0, 0.0], [1.0, 1.0]]);
        let centers = array![[0.0, 0.0], [1.0, 1.0]];
        assert_eq!(cost(&f, &[0, 1], &centers, CostKind::Dist), 3.0);
        assert_eq!(cost(&f, &[0, 1], &centers, CostKind::Sqdist), 9.0);
    }

    #[test]
    fn nll_at_mean_of_unit_gaussian() {
        let f = Features::continuous(array![[0.0], [0.0]]);
        let ds = Dataset::new(f, vec![0, 1], 2).unwrap();
        let p = ModelParams::gaussian_iso(&[1.0], array![[0.0]], 1.0).unwrap();
        assert_abs_diff_eq!(nll(&ds, &p), 0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-14);
    }

    #[test]
    fn best_mapping_accuracy() {
        assert_eq!(accuracy_best_mapping(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy_best_mapping(&[1, 0, 0, 1], &[0, 1, 1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy_best_mapping(&[0, 0, 1, 1], &[0, 1, 1, 0]).unwrap(), 0.5);
        assert!(accuracy_best_mapping(&[0, 2], &[0, 1]).is_err());
    }

    #[test]
    fn spearman_values() {
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0, epsilon = 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), 0.0);
    }

    #[test]
    fn pareto_flags_exclude_dominated() {
        let flags = pareto_flags(&[(1.0, 5.0), (2.0, 2.0), (3.0, 3.0), (2.0, 2.0), (f64::NAN, 0.0)]);
        assert_eq!(flags, vec![true, true, false, true, false]);
    }

    #[test]
    fn bound_for_single_component_is_one() {
        let f = Features::continuous(array![[0.3], [-2.0]]);
        let p = ModelParams::gaussian_iso(&[1.0], array![[0.0]], 1.0).unwrap();
        let r = remark1_bound_check(&f, &p).unwrap();
        assert_eq!(r.violations, 0);
        assert_eq!(r.min_max_psi, 1.0);
    }
}
