//! Mixture parameterization, component log-densities, responsibilities and
//! log-likelihoods.
//!
//! Mixture weights are stored as logits `eta` (weights = softmax(eta)) and
//! categorical tables as per-feature logits, so any real-valued update stays
//! on the simplex. Gaussian scales are positive reals; gradients act on their
//! logarithm.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::Features;
use crate::error::{FmcError, Result};

/// Lower bound on every Gaussian scale.
pub const SIGMA_FLOOR: f64 = 1e-4;
/// Lower bound on every categorical probability.
pub const P_FLOOR: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Structure {
    /// Gaussian components sharing one isotropic scale σ.
    #[serde(rename = "iso", alias = "gaussian-iso")]
    GaussianIso,
    /// Gaussian components with per-component diagonal scales.
    #[serde(rename = "diag", alias = "gaussian-diag")]
    GaussianDiag,
    /// Products of categorical distributions.
    #[serde(rename = "multinoulli")]
    Multinoulli,
    /// Isotropic Gaussian block times a multinoulli block.
    #[serde(rename = "mixed")]
    Mixed,
}

impl Structure {
    pub fn has_gaussian(self) -> bool {
        !matches!(self, Structure::Multinoulli)
    }

    pub fn has_categorical(self) -> bool {
        matches!(self, Structure::Multinoulli | Structure::Mixed)
    }
}

impl std::str::FromStr for Structure {
    type Err = FmcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iso" | "gaussian-iso" => Ok(Structure::GaussianIso),
            "diag" | "gaussian-diag" => Ok(Structure::GaussianDiag),
            "multinoulli" => Ok(Structure::Multinoulli),
            "mixed" => Ok(Structure::Mixed),
            other => Err(FmcError::Config(format!("unknown structure `{other}`"))),
        }
    }
}

/// Gaussian scale parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Scale {
    None,
    /// One σ shared by all components.
    Iso(f64),
    /// K × d standard deviations.
    Diag(Array2<f64>),
}

impl Scale {
    fn len(&self) -> usize {
        match self {
            Scale::None => 0,
            Scale::Iso(_) => 1,
            Scale::Diag(s) => s.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr", into = "ParamsRepr")]
pub struct ModelParams {
    pub structure: Structure,
    pub eta: Array1<f64>,
    /// K × d_cont component means (d_cont = 0 without a Gaussian block).
    pub means: Array2<f64>,
    pub scale: Scale,
    /// `cat_logits[k][j]` are the logits of feature j's table in component k.
    pub cat_logits: Vec<Vec<Vec<f64>>>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|v| v - lse).collect()
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Pairwise summation; fixed association order for a given length.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

impl ModelParams {
    pub fn gaussian_iso(pi: &[f64], means: Array2<f64>, sigma: f64) -> Result<Self> {
        let p = ModelParams {
            structure: Structure::GaussianIso,
            eta: eta_from_pi(pi)?,
            means,
            scale: Scale::Iso(sigma),
            cat_logits: Vec::new(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn gaussian_diag(pi: &[f64], means: Array2<f64>, scales: Array2<f64>) -> Result<Self> {
        let p = ModelParams {
            structure: Structure::GaussianDiag,
            eta: eta_from_pi(pi)?,
            means,
            scale: Scale::Diag(scales),
            cat_logits: Vec::new(),
        };
        p.validate()?;
        Ok(p)
    }

    /// `tables[k][j]` is a probability vector over feature j's levels.
    pub fn multinoulli(pi: &[f64], tables: &[Vec<Vec<f64>>]) -> Result<Self> {
        let p = ModelParams {
            structure: Structure::Multinoulli,
            eta: eta_from_pi(pi)?,
            means: Array2::zeros((pi.len(), 0)),
            scale: Scale::None,
            cat_logits: logits_from_tables(tables)?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn mixed(
        pi: &[f64],
        means: Array2<f64>,
        sigma: f64,
        tables: &[Vec<Vec<f64>>],
    ) -> Result<Self> {
        let p = ModelParams {
            structure: Structure::Mixed,
            eta: eta_from_pi(pi)?,
            means,
            scale: Scale::Iso(sigma),
            cat_logits: logits_from_tables(tables)?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn k(&self) -> usize {
        self.eta.len()
    }

    pub fn d_cont(&self) -> usize {
        self.means.ncols()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.cat_logits
            .first()
            .map(|t| t.iter().map(Vec::len).collect())
            .unwrap_or_default()
    }

    pub fn pi(&self) -> Array1<f64> {
        Array1::from(softmax(self.eta.as_slice().expect("contiguous")))
    }

    pub fn log_pi(&self) -> Vec<f64> {
        log_softmax(self.eta.as_slice().expect("contiguous"))
    }

    /// Probability table of feature j in component k.
    pub fn cat_probs(&self, k: usize, j: usize) -> Vec<f64> {
        softmax(&self.cat_logits[k][j])
    }

    pub fn sigma(&self, k: usize, j: usize) -> f64 {
        match &self.scale {
            Scale::Iso(s) => *s,
            Scale::Diag(s) => s[[k, j]],
            Scale::None => 1.0,
        }
    }

    /// Checks shapes and the floor/simplex invariants.
    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(FmcError::Config("model has no components".into()));
        }
        if self.means.nrows() != k {
            return Err(FmcError::Dimension {
                what: "mean rows".into(),
                expected: k,
                got: self.means.nrows(),
            });
        }
        if self.eta.iter().any(|v| !v.is_finite()) || self.means.iter().any(|v| !v.is_finite()) {
            return Err(FmcError::NonFinite("model parameters".into()));
        }
        match (self.structure.has_gaussian(), &self.scale) {
            (true, Scale::Iso(s)) if self.structure != Structure::GaussianDiag => {
                if !(s.is_finite() && *s >= SIGMA_FLOOR) {
                    return Err(FmcError::Config(format!("σ = {s} below floor {SIGMA_FLOOR}")));
                }
            }
            (true, Scale::Diag(s)) if self.structure == Structure::GaussianDiag => {
                if s.dim() != self.means.dim() {
                    return Err(FmcError::Dimension {
                        what: "diagonal scales".into(),
                        expected: self.means.len(),
                        got: s.len(),
                    });
                }
                if s.iter().any(|v| !(v.is_finite() && *v >= SIGMA_FLOOR)) {
                    return Err(FmcError::Config("diagonal scale below floor".into()));
                }
            }
            (false, Scale::None) => {}
            _ => {
                return Err(FmcError::Config(format!(
                    "scale does not match structure {:?}",
                    self.structure
                )))
            }
        }
        if self.structure.has_categorical() {
            if self.cat_logits.len() != k {
                return Err(FmcError::Dimension {
                    what: "categorical tables".into(),
                    expected: k,
                    got: self.cat_logits.len(),
                });
            }
            let cards = self.cardinalities();
            for tables in &self.cat_logits {
                if tables.iter().map(Vec::len).collect::<Vec<_>>() != cards {
                    return Err(FmcError::Config("categorical table shapes differ".into()));
                }
                if tables.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(FmcError::NonFinite("categorical logits".into()));
                }
            }
        } else if !self.cat_logits.is_empty() {
            return Err(FmcError::Config(
                "categorical tables on a Gaussian-only structure".into(),
            ));
        }
        Ok(())
    }

    /// Checks that the parts of `features` used by this structure have the
    /// right shape.
    pub fn check_features(&self, features: &Features) -> Result<()> {
        if self.structure.has_gaussian() && features.d_cont() != self.d_cont() {
            return Err(FmcError::Dimension {
                what: "continuous features".into(),
                expected: self.d_cont(),
                got: features.d_cont(),
            });
        }
        if self.structure.has_categorical() {
            let cards = self.cardinalities();
            if features.d_cate() != cards.len() {
                return Err(FmcError::Dimension {
                    what: "categorical features".into(),
                    expected: cards.len(),
                    got: features.d_cate(),
                });
            }
            if features
                .cardinalities
                .iter()
                .zip(&cards)
                .any(|(f, m)| f > m)
            {
                return Err(FmcError::Schema(
                    "data has more categorical levels than the model".into(),
                ));
            }
        }
        Ok(())
    }

    /// Raises scales to [`SIGMA_FLOOR`] and categorical probabilities to
    /// [`P_FLOOR`].
    pub fn clamp_floors(&mut self) {
        match &mut self.scale {
            Scale::Iso(s) => *s = s.max(SIGMA_FLOOR),
            Scale::Diag(s) => s.mapv_inplace(|v| v.max(SIGMA_FLOOR)),
            Scale::None => {}
        }
        for logits in self.cat_logits.iter_mut().flatten() {
            let p = softmax(logits);
            if p.iter().any(|&v| v < P_FLOOR) {
                let l = p.len() as f64;
                *logits = p
                    .iter()
                    .map(|&v| ((1.0 - l * P_FLOOR) * v + P_FLOOR).ln())
                    .collect();
            }
        }
    }

    /// Number of unconstrained coordinates.
    pub fn n_free(&self) -> usize {
        self.eta.len()
            + self.means.len()
            + self.scale.len()
            + self.cat_logits.iter().flatten().map(Vec::len).sum::<usize>()
    }

    /// Unconstrained coordinates: eta, means (row-major), log-scales,
    /// categorical logits.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_free());
        v.extend(self.eta.iter());
        v.extend(self.means.iter());
        match &self.scale {
            Scale::Iso(s) => v.push(s.ln()),
            Scale::Diag(s) => v.extend(s.iter().map(|x| x.ln())),
            Scale::None => {}
        }
        v.extend(self.cat_logits.iter().flatten().flatten());
        v
    }

    /// Inverse of [`to_flat`](Self::to_flat), using `self` for shapes. Does
    /// not clamp.
    pub fn from_flat(&self, v: &[f64]) -> ModelParams {
        assert_eq!(v.len(), self.n_free(), "flat parameter length");
        let mut it = v.iter().copied();
        let mut out = self.clone();
        out.eta.iter_mut().for_each(|x| *x = it.next().unwrap());
        out.means.iter_mut().for_each(|x| *x = it.next().unwrap());
        match &mut out.scale {
            Scale::Iso(s) => *s = it.next().unwrap().exp(),
            Scale::Diag(s) => s.iter_mut().for_each(|x| *x = it.next().unwrap().exp()),
            Scale::None => {}
        }
        out.cat_logits
            .iter_mut()
            .flatten()
            .flatten()
            .for_each(|x| *x = it.next().unwrap());
        out
    }

    /// Precomputes the log-weights and log-tables used in every density
    /// evaluation.
    pub fn prepared(&self) -> Prepared<'_> {
        let cat_log_probs = self
            .cat_logits
            .iter()
            .map(|tables| tables.iter().map(|l| log_softmax(l)).collect())
            .collect();
        Prepared {
            params: self,
            log_pi: self.log_pi(),
            cat_log_probs,
        }
    }
}

fn eta_from_pi(pi: &[f64]) -> Result<Array1<f64>> {
    let s: f64 = pi.iter().sum();
    if pi.is_empty() || pi.iter().any(|&p| !(p > 0.0)) || (s - 1.0).abs() > 1e-9 {
        return Err(FmcError::InvalidSimplex {
            field: "pi".into(),
            reason: format!("{pi:?}"),
        });
    }
    Ok(pi.iter().map(|p| p.ln()).collect())
}

fn logits_from_tables(tables: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<Vec<f64>>>> {
    tables
        .iter()
        .enumerate()
        .map(|(k, comp)| {
            comp.iter()
                .enumerate()
                .map(|(j, p)| {
                    let s: f64 = p.iter().sum();
                    if p.iter().any(|&v| !(v > 0.0)) || (s - 1.0).abs() > 1e-9 {
                        return Err(FmcError::InvalidSimplex {
                            field: format!("tables[{k}][{j}]"),
                            reason: format!("{p:?}"),
                        });
                    }
                    Ok(p.iter().map(|v| v.ln()).collect())
                })
                .collect()
        })
        .collect()
}

/// Parameters with cached log-weights and categorical log-probabilities.
pub struct Prepared<'a> {
    pub params: &'a ModelParams,
    pub log_pi: Vec<f64>,
    /// `[k][j][c]` log-probabilities.
    pub cat_log_probs: Vec<Vec<Vec<f64>>>,
}

impl Prepared<'_> {
    /// log f(x; θ_k).
    pub fn log_density(&self, x_cont: ArrayView1<f64>, x_cate: ArrayView1<usize>, k: usize) -> f64 {
        let p = self.params;
        let mut out = 0.0;
        match (&p.scale, p.structure.has_gaussian()) {
            (Scale::Iso(sigma), true) => {
                let d = x_cont.len() as f64;
                let var = sigma * sigma;
                let mu = p.means.row(k);
                let sq: f64 = x_cont.iter().zip(mu.iter()).map(|(x, m)| (x - m) * (x - m)).sum();
                out += -0.5 * d * (LN_2PI + var.ln()) - sq / (2.0 * var);
            }
            (Scale::Diag(s), true) => {
                for j in 0..x_cont.len() {
                    let sd = s[[k, j]];
                    let z = (x_cont[j] - p.means[[k, j]]) / sd;
                    out += -0.5 * LN_2PI - sd.ln() - 0.5 * z * z;
                }
            }
            _ => {}
        }
        if p.structure.has_categorical() {
            for (j, &c) in x_cate.iter().enumerate() {
                out += self.cat_log_probs[k][j][c];
            }
        }
        out
    }

    /// log π_k + log f(x_i; θ_k) for one row.
    pub fn log_joint_row(&self, features: &Features, i: usize, out: &mut [f64]) {
        let xc = features.cont_row(i);
        let xk = features.cate_row(i);
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.log_pi[k] + self.log_density(xc, xk, k);
        }
    }
}

/// log f(x; θ_k) for a single sample.
pub fn log_component_density(
    x_cont: ArrayView1<f64>,
    x_cate: ArrayView1<usize>,
    k: usize,
    params: &ModelParams,
) -> f64 {
    params.prepared().log_density(x_cont, x_cate, k)
}

/// Soft assignments ψ_k(x_i; Θ), one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub psi: Array2<f64>,
}

impl Responsibilities {
    pub fn n_rows(&self) -> usize {
        self.psi.nrows()
    }

    pub fn k(&self) -> usize {
        self.psi.ncols()
    }

    /// One-hot rows from hard labels.
    pub fn one_hot(labels: &[usize], k: usize) -> Self {
        let mut psi = Array2::zeros((labels.len(), k));
        for (i, &l) in labels.iter().enumerate() {
            psi[[i, l]] = 1.0;
        }
        Responsibilities { psi }
    }

    /// −Σ ψ log ψ.
    pub fn entropy(&self) -> f64 {
        let terms: Vec<f64> = self
            .psi
            .iter()
            .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
            .collect();
        pairwise_sum(&terms)
    }
}

/// Responsibilities and per-row log-likelihood contributions for `rows`
/// (all rows when `None`).
pub fn responsibilities_and_loglik(
    features: &Features,
    params: &ModelParams,
    rows: Option<&[usize]>,
) -> (Responsibilities, Vec<f64>) {
    let prep = params.prepared();
    let k = params.k();
    let n = rows.map_or(features.n_rows(), <[usize]>::len);
    let mut psi = Array2::zeros((n, k));
    let mut lls = Vec::with_capacity(n);
    let mut buf = vec![0.0; k];
    for r in 0..n {
        let i = rows.map_or(r, |rs| rs[r]);
        prep.log_joint_row(features, i, &mut buf);
        let lse = log_sum_exp(&buf);
        for (kk, v) in buf.iter().enumerate() {
            psi[[r, kk]] = (v - lse).exp();
        }
        lls.push(lse);
    }
    (Responsibilities { psi }, lls)
}

/// ψ_ik = π_k f(x_i; θ_k) / Σ_l π_l f(x_i; θ_l), evaluated in log space.
pub fn responsibilities(features: &Features, params: &ModelParams) -> Responsibilities {
    responsibilities_and_loglik(features, params, None).0
}

pub fn responsibilities_rows(
    features: &Features,
    params: &ModelParams,
    rows: &[usize],
) -> Responsibilities {
    responsibilities_and_loglik(features, params, Some(rows)).0
}

/// Row-wise argmax; ties go to the lowest component index.
pub fn hard_assign(psi: &Responsibilities) -> Vec<usize> {
    psi.psi
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// ℓ(Θ | D) = Σ_i log Σ_k π_k f(x_i; θ_k).
pub fn log_likelihood(features: &Features, params: &ModelParams) -> f64 {
    let (_, lls) = responsibilities_and_loglik(features, params, None);
    pairwise_sum(&lls)
}

/// Expected complete-data log-likelihood with responsibilities frozen at
/// `params_t`.
pub fn q_function(params: &ModelParams, params_t: &ModelParams, features: &Features) -> f64 {
    let frozen = responsibilities(features, params_t);
    q_with_frozen(params, &frozen, features)
}

/// Σ_i Σ_k ψ_ik [log π_k + log f(x_i; θ_k)] for given frozen ψ.
pub fn q_with_frozen(params: &ModelParams, frozen: &Responsibilities, features: &Features) -> f64 {
    let prep = params.prepared();
    let k = params.k();
    let mut buf = vec![0.0; k];
    let terms: Vec<f64> = (0..features.n_rows())
        .map(|i| {
            prep.log_joint_row(features, i, &mut buf);
            buf.iter()
                .enumerate()
                .map(|(kk, a)| {
                    let w = frozen.psi[[i, kk]];
                    if w > 0.0 {
                        w * a
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect();
    pairwise_sum(&terms)
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ScaleRepr {
    Iso(f64),
    Diag(Vec<Vec<f64>>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsRepr {
    structure: Structure,
    #[serde(rename = "K")]
    k: usize,
    d_cont: usize,
    cardinalities: Vec<usize>,
    eta: Vec<f64>,
    means: Vec<Vec<f64>>,
    scale: Option<ScaleRepr>,
    cat_logits: Vec<Vec<Vec<f64>>>,
}

impl From<ModelParams> for ParamsRepr {
    fn from(p: ModelParams) -> Self {
        ParamsRepr {
            structure: p.structure,
            k: p.k(),
            d_cont: p.d_cont(),
            cardinalities: p.cardinalities(),
            eta: p.eta.to_vec(),
            means: p.means.rows().into_iter().map(|r| r.to_vec()).collect(),
            scale: match &p.scale {
                Scale::None => None,
                Scale::Iso(s) => Some(ScaleRepr::Iso(*s)),
                Scale::Diag(s) => Some(ScaleRepr::Diag(
                    s.rows().into_iter().map(|r| r.to_vec()).collect(),
                )),
            },
            cat_logits: p.cat_logits,
        }
    }
}

fn rows_to_array(rows: &[Vec<f64>], n: usize, d: usize, what: &str) -> Result<Array2<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != d) {
        return Err(FmcError::Dimension {
            what: what.into(),
            expected: n * d,
            got: rows.iter().map(Vec::len).sum(),
        });
    }
    Ok(Array2::from_shape_vec((n, d), rows.concat()).expect("shape checked"))
}

impl TryFrom<ParamsRepr> for ModelParams {
    type Error = FmcError;

    fn try_from(r: ParamsRepr) -> Result<Self> {
        if r.eta.len() != r.k {
            return Err(FmcError::Dimension {
                what: "eta".into(),
                expected: r.k,
                got: r.eta.len(),
            });
        }
        let means = rows_to_array(&r.means, r.k, r.d_cont, "means")?;
        let scale = match r.scale {
            None => Scale::None,
            Some(ScaleRepr::Iso(s)) => Scale::Iso(s),
            Some(ScaleRepr::Diag(rows)) => {
                Scale::Diag(rows_to_array(&rows, r.k, r.d_cont, "diagonal scales")?)
            }
        };
        let p = ModelParams {
            structure: r.structure,
            eta: Array1::from(r.eta),
            means,
            scale,
            cat_logits: r.cat_logits,
        };
        if p.structure.has_categorical() && p.cardinalities() != r.cardinalities {
            return Err(FmcError::Config("cardinalities do not match cat_logits".into()));
        }
        p.validate()?;
        Ok(p)
    }
}

/// −d/2 log(2πσ²), exposed for tests and diagnostics.
pub fn iso_log_normalizer(d: usize, sigma: f64) -> f64 {
    -0.5 * d as f64 * (2.0 * PI * sigma * sigma).ln()
}
