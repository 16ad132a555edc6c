//! Dataset ingestion, preprocessing, group bookkeeping, with-replacement
//! subsampling and synthetic mixture generation.
//!
//! Categorical entries, sensitive labels and component labels are stored as
//! dense 0-based indices. String levels are kept in [`Encoding`] so a dataset
//! can be written back with its original spelling.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use log::warn;
use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::{weighted::WeightedIndex, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FmcError, Result};
use crate::rng::FmcRng;

/// Maximum number of redraws before a subsample missing a group is rejected.
pub const SUBSAMPLE_RETRIES: usize = 100;

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    #[serde(alias = "cont")]
    Continuous,
    #[serde(alias = "cat", alias = "cate")]
    Categorical,
    Sensitive,
    #[serde(alias = "ignore")]
    Ignored,
}

impl std::str::FromStr for Role {
    type Err = FmcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "continuous" | "cont" => Ok(Role::Continuous),
            "categorical" | "cat" | "cate" => Ok(Role::Categorical),
            "sensitive" => Ok(Role::Sensitive),
            "ignored" | "ignore" => Ok(Role::Ignored),
            other => Err(FmcError::Schema(format!("unknown column role `{other}`"))),
        }
    }
}

/// Column name → role. Every CSV column must be named.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema {
    pub roles: BTreeMap<String, Role>,
}

impl Schema {
    pub fn new<I, S>(roles: I) -> Self
    where
        I: IntoIterator<Item = (S, Role)>,
        S: Into<String>,
    {
        Schema {
            roles: roles.into_iter().map(|(c, r)| (c.into(), r)).collect(),
        }
    }

    /// Parses `age=continuous,sex=sensitive,...`.
    pub fn parse_inline(spec: &str) -> Result<Self> {
        let mut roles = BTreeMap::new();
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, role) = item
                .split_once('=')
                .ok_or_else(|| FmcError::Schema(format!("expected `column=role`, got `{item}`")))?;
            roles.insert(name.trim().to_string(), role.parse()?);
        }
        Ok(Schema { roles })
    }

    pub fn sensitive_column(&self) -> Result<&str> {
        let mut it = self
            .roles
            .iter()
            .filter(|(_, r)| **r == Role::Sensitive)
            .map(|(c, _)| c.as_str());
        match (it.next(), it.next()) {
            (Some(c), None) => Ok(c),
            (None, _) => Err(FmcError::Schema("no sensitive column in schema".into())),
            (Some(_), Some(_)) => Err(FmcError::Schema(
                "schema names more than one sensitive column".into(),
            )),
        }
    }
}

/// Observed features of N rows: a continuous block and a categorical block.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub cont: Array2<f64>,
    pub cate: Array2<usize>,
    pub cardinalities: Vec<usize>,
}

impl Features {
    pub fn new(cont: Array2<f64>, cate: Array2<usize>, cardinalities: Vec<usize>) -> Result<Self> {
        if cont.nrows() != cate.nrows() {
            return Err(FmcError::Dimension {
                what: "categorical rows".into(),
                expected: cont.nrows(),
                got: cate.nrows(),
            });
        }
        if cate.ncols() != cardinalities.len() {
            return Err(FmcError::Dimension {
                what: "categorical cardinalities".into(),
                expected: cate.ncols(),
                got: cardinalities.len(),
            });
        }
        for (j, col) in cate.columns().into_iter().enumerate() {
            if let Some(&bad) = col.iter().find(|&&v| v >= cardinalities[j]) {
                return Err(FmcError::Schema(format!(
                    "categorical feature {j} has level {bad} but cardinality {}",
                    cardinalities[j]
                )));
            }
        }
        Ok(Features {
            cont,
            cate,
            cardinalities,
        })
    }

    pub fn continuous(cont: Array2<f64>) -> Self {
        let n = cont.nrows();
        Features {
            cont,
            cate: Array2::zeros((n, 0)),
            cardinalities: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.cont.nrows()
    }

    pub fn d_cont(&self) -> usize {
        self.cont.ncols()
    }

    pub fn d_cate(&self) -> usize {
        self.cate.ncols()
    }

    pub fn cont_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.cont.row(i)
    }

    pub fn cate_row(&self, i: usize) -> ArrayView1<'_, usize> {
        self.cate.row(i)
    }

    pub fn select(&self, rows: &[usize]) -> Features {
        Features {
            cont: self.cont.select(ndarray::Axis(0), rows),
            cate: self.cate.select(ndarray::Axis(0), rows),
            cardinalities: self.cardinalities.clone(),
        }
    }
}

/// Column names and string levels needed to write a dataset back out.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Encoding {
    /// All non-ignored columns in file order.
    pub columns: Vec<String>,
    /// Every column of the source file (including ignored ones).
    #[serde(default)]
    pub source_columns: Vec<String>,
    pub cont_names: Vec<String>,
    pub cate_names: Vec<String>,
    pub cate_levels: Vec<Vec<String>>,
    pub sensitive_name: String,
    pub sensitive_levels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Features,
    /// Group label per row, in `0..n_groups()`.
    pub sensitive: Vec<usize>,
    pub group_sizes: Vec<usize>,
    pub encoding: Encoding,
    /// Ground-truth component labels (synthetic data only).
    pub truth: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(features: Features, sensitive: Vec<usize>, n_groups: usize) -> Result<Self> {
        if features.n_rows() == 0 {
            return Err(FmcError::EmptyDataset);
        }
        if sensitive.len() != features.n_rows() {
            return Err(FmcError::Dimension {
                what: "sensitive labels".into(),
                expected: features.n_rows(),
                got: sensitive.len(),
            });
        }
        let group_sizes = count_groups(&sensitive, n_groups)?;
        Ok(Dataset {
            features,
            sensitive,
            group_sizes,
            encoding: Encoding::default(),
            truth: None,
        })
    }

    pub fn with_encoding(mut self, encoding: Encoding) -> Self {
        self.encoding = encoding;
        self
    }

    pub fn with_truth(mut self, truth: Vec<usize>) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn n_rows(&self) -> usize {
        self.features.n_rows()
    }

    pub fn n_groups(&self) -> usize {
        self.group_sizes.len()
    }

    /// Rows restricted to `rows` (duplicates allowed). Fails if a group vanishes.
    pub fn select(&self, rows: &[usize]) -> Result<Dataset> {
        let sensitive: Vec<usize> = rows.iter().map(|&i| self.sensitive[i]).collect();
        let mut out = Dataset::new(self.features.select(rows), sensitive, self.n_groups())?;
        out.encoding = self.encoding.clone();
        out.truth = self
            .truth
            .as_ref()
            .map(|t| rows.iter().map(|&i| t[i]).collect());
        Ok(out)
    }

    pub fn with_features(&self, features: Features) -> Dataset {
        Dataset {
            features,
            sensitive: self.sensitive.clone(),
            group_sizes: self.group_sizes.clone(),
            encoding: self.encoding.clone(),
            truth: self.truth.clone(),
        }
    }
}

fn count_groups(labels: &[usize], n_groups: usize) -> Result<Vec<usize>> {
    if n_groups < 2 {
        return Err(FmcError::GroupDegenerate(format!(
            "need at least two sensitive groups, found {n_groups}"
        )));
    }
    let mut sizes = vec![0usize; n_groups];
    for &s in labels {
        if s >= n_groups {
            return Err(FmcError::GroupDegenerate(format!(
                "label {s} outside 0..{n_groups}"
            )));
        }
        sizes[s] += 1;
    }
    if let Some(g) = sizes.iter().position(|&c| c == 0) {
        return Err(FmcError::GroupDegenerate(format!("group {g} is empty")));
    }
    Ok(sizes)
}

/// Maps strings to dense indices in first-appearance order.
#[derive(Default)]
struct LevelMap {
    index: HashMap<String, usize>,
    levels: Vec<String>,
}

impl LevelMap {
    fn from_levels(levels: &[String]) -> Self {
        LevelMap {
            index: levels
                .iter()
                .enumerate()
                .map(|(i, l)| (l.clone(), i))
                .collect(),
            levels: levels.to_vec(),
        }
    }

    fn intern(&mut self, value: &str) -> usize {
        if let Some(&i) = self.index.get(value) {
            return i;
        }
        let i = self.levels.len();
        self.index.insert(value.to_string(), i);
        self.levels.push(value.to_string());
        i
    }
}

struct ParsedTable {
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

fn read_table(path: &Path) -> Result<ParsedTable> {
    let file = std::fs::File::open(path).map_err(|e| FmcError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let rows = reader.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(ParsedTable { headers, rows })
}

fn parse_number(value: &str, row: usize, column: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| FmcError::Parse {
            row,
            column: column.to_string(),
            value: value.to_string(),
        })
}

/// Reads a headed, comma-separated UTF-8 file, assigning each column the role
/// named in `schema`.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let table = read_table(path.as_ref())?;
    let sensitive_name = schema.sensitive_column()?.to_string();
    for h in &table.headers {
        if !schema.roles.contains_key(h) {
            return Err(FmcError::Schema(format!("column `{h}` has no role")));
        }
    }
    for name in schema.roles.keys() {
        if !table.headers.iter().any(|h| h == name) {
            return Err(FmcError::Schema(format!("column `{name}` not found in file")));
        }
    }
    if table.rows.is_empty() {
        return Err(FmcError::EmptyDataset);
    }

    let roles: Vec<Role> = table.headers.iter().map(|h| schema.roles[h]).collect();
    let pick = |role: Role| -> Vec<usize> {
        roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == role)
            .map(|(i, _)| i)
            .collect()
    };
    let cont_cols = pick(Role::Continuous);
    let cate_cols = pick(Role::Categorical);
    let sens_col = table
        .headers
        .iter()
        .position(|h| *h == sensitive_name)
        .expect("checked above");

    let n = table.rows.len();
    let mut cont = Array2::<f64>::zeros((n, cont_cols.len()));
    let mut cate = Array2::<usize>::zeros((n, cate_cols.len()));
    let mut cate_maps: Vec<LevelMap> = cate_cols.iter().map(|_| LevelMap::default()).collect();
    let mut sens_map = LevelMap::default();
    let mut sensitive = Vec::with_capacity(n);

    for (i, rec) in table.rows.iter().enumerate() {
        if rec.len() != table.headers.len() {
            return Err(FmcError::Dimension {
                what: format!("fields in row {}", i + 1),
                expected: table.headers.len(),
                got: rec.len(),
            });
        }
        for (j, &c) in cont_cols.iter().enumerate() {
            cont[[i, j]] = parse_number(&rec[c], i + 1, &table.headers[c])?;
        }
        for (j, &c) in cate_cols.iter().enumerate() {
            cate[[i, j]] = cate_maps[j].intern(&rec[c]);
        }
        sensitive.push(sens_map.intern(&rec[sens_col]));
    }

    if sens_map.levels.len() < 2 {
        return Err(FmcError::GroupDegenerate(format!(
            "sensitive column `{sensitive_name}` has a single value"
        )));
    }

    let cardinalities = cate_maps.iter().map(|m| m.levels.len()).collect();
    let features = Features::new(cont, cate, cardinalities)?;
    let encoding = Encoding {
        columns: table
            .headers
            .iter()
            .zip(&roles)
            .filter(|(_, r)| **r != Role::Ignored)
            .map(|(h, _)| h.clone())
            .collect(),
        source_columns: table.headers.clone(),
        cont_names: cont_cols.iter().map(|&c| table.headers[c].clone()).collect(),
        cate_names: cate_cols.iter().map(|&c| table.headers[c].clone()).collect(),
        cate_levels: cate_maps.into_iter().map(|m| m.levels).collect(),
        sensitive_name,
        sensitive_levels: sens_map.levels.clone(),
    };
    Ok(Dataset::new(features, sensitive, sens_map.levels.len())?.with_encoding(encoding))
}

/// Reads feature columns of a file using a previously fitted encoding.
///
/// The file must carry the same columns as the training file. The sensitive
/// column is optional; unseen categorical levels are rejected.
pub fn load_features_with_encoding(
    path: impl AsRef<Path>,
    encoding: &Encoding,
) -> Result<(Features, Option<Vec<usize>>)> {
    let table = read_table(path.as_ref())?;
    let expected = if encoding.source_columns.is_empty() {
        &encoding.columns
    } else {
        &encoding.source_columns
    };
    let has_sensitive = table.headers.contains(&encoding.sensitive_name);
    let required = expected.len() - usize::from(!has_sensitive);
    if table.headers.len() != required {
        return Err(FmcError::Dimension {
            what: "columns".into(),
            expected: expected.len(),
            got: table.headers.len(),
        });
    }
    let position = |name: &str| -> Result<usize> {
        table
            .headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| FmcError::Dimension {
                what: format!("column `{name}`"),
                expected: 1,
                got: 0,
            })
    };
    let cont_cols = encoding
        .cont_names
        .iter()
        .map(|c| position(c))
        .collect::<Result<Vec<_>>>()?;
    let cate_cols = encoding
        .cate_names
        .iter()
        .map(|c| position(c))
        .collect::<Result<Vec<_>>>()?;
    let sens_col = if has_sensitive {
        Some(position(&encoding.sensitive_name)?)
    } else {
        None
    };

    let n = table.rows.len();
    let maps: Vec<LevelMap> = encoding
        .cate_levels
        .iter()
        .map(|l| LevelMap::from_levels(l))
        .collect();
    let sens_map = LevelMap::from_levels(&encoding.sensitive_levels);
    let mut cont = Array2::<f64>::zeros((n, cont_cols.len()));
    let mut cate = Array2::<usize>::zeros((n, cate_cols.len()));
    let mut sensitive = Vec::new();
    for (i, rec) in table.rows.iter().enumerate() {
        for (j, &c) in cont_cols.iter().enumerate() {
            cont[[i, j]] = parse_number(&rec[c], i + 1, &table.headers[c])?;
        }
        for (j, &c) in cate_cols.iter().enumerate() {
            cate[[i, j]] = *maps[j].index.get(&rec[c]).ok_or_else(|| {
                FmcError::Schema(format!(
                    "row {}: unseen level `{}` in column `{}`",
                    i + 1,
                    &rec[c],
                    table.headers[c]
                ))
            })?;
        }
        if let Some(c) = sens_col {
            sensitive.push(*sens_map.index.get(&rec[c]).ok_or_else(|| {
                FmcError::Schema(format!("row {}: unseen sensitive level `{}`", i + 1, &rec[c]))
            })?);
        }
    }
    let cards = encoding.cate_levels.iter().map(Vec::len).collect();
    Ok((
        Features::new(cont, cate, cards)?,
        sens_col.map(|_| sensitive),
    ))
}

/// Writes the dataset with its original column names and level strings.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let enc = &ds.encoding;
    let mut w = csv::Writer::from_path(path)?;
    let cont_names = names_or_default(&enc.cont_names, ds.features.d_cont(), "x");
    let cate_names = names_or_default(&enc.cate_names, ds.features.d_cate(), "c");
    let sens_name = if enc.sensitive_name.is_empty() {
        "group".to_string()
    } else {
        enc.sensitive_name.clone()
    };
    let mut header: Vec<String> = cont_names.clone();
    header.extend(cate_names.iter().cloned());
    header.push(sens_name);
    w.write_record(&header)?;
    for i in 0..ds.n_rows() {
        let mut rec: Vec<String> = ds.features.cont_row(i).iter().map(|v| v.to_string()).collect();
        for (j, &v) in ds.features.cate_row(i).iter().enumerate() {
            rec.push(
                enc.cate_levels
                    .get(j)
                    .and_then(|l| l.get(v))
                    .cloned()
                    .unwrap_or_else(|| v.to_string()),
            );
        }
        let s = ds.sensitive[i];
        rec.push(
            enc.sensitive_levels
                .get(s)
                .cloned()
                .unwrap_or_else(|| s.to_string()),
        );
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| FmcError::io(path, e))?;
    Ok(())
}

fn names_or_default(names: &[String], d: usize, prefix: &str) -> Vec<String> {
    if names.len() == d {
        names.to_vec()
    } else {
        (1..=d).map(|j| format!("{prefix}{j}")).collect()
    }
}

/// Column means and population standard deviations of the continuous block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation; zero marks a constant column.
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &Features) -> Result<Self> {
        let n = features.n_rows();
        if n < 2 {
            return Err(FmcError::Config(
                "standardization needs at least two rows".into(),
            ));
        }
        let mut mean = Vec::with_capacity(features.d_cont());
        let mut std = Vec::with_capacity(features.d_cont());
        for (j, col) in features.cont.columns().into_iter().enumerate() {
            let m = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            let s = var.sqrt();
            if s <= 1e-12 * (1.0 + m.abs()) {
                warn!("continuous column {j} is constant; standardized to zeros");
                std.push(0.0);
            } else {
                std.push(s);
            }
            mean.push(m);
        }
        Ok(Standardizer { mean, std })
    }

    pub fn transform(&self, features: &Features) -> Result<Features> {
        if features.d_cont() != self.mean.len() {
            return Err(FmcError::Dimension {
                what: "continuous columns".into(),
                expected: self.mean.len(),
                got: features.d_cont(),
            });
        }
        let mut out = features.clone();
        for (j, mut col) in out.cont.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.mean[j], self.std[j]);
            col.mapv_inplace(|v| if s == 0.0 { 0.0 } else { (v - m) / s });
        }
        Ok(out)
    }
}

/// Zero-mean, unit-population-variance continuous columns.
pub fn standardize(ds: &Dataset) -> Result<Dataset> {
    let st = Standardizer::fit(&ds.features)?;
    Ok(ds.with_features(st.transform(&ds.features)?))
}

pub fn l2_normalize_features(features: &Features) -> Result<Features> {
    let mut out = features.clone();
    if out.d_cont() == 0 {
        return Ok(out);
    }
    for (i, mut row) in out.cont.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(FmcError::ZeroVector { row: i });
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

/// Scales every continuous row to unit Euclidean norm.
pub fn l2_normalize(ds: &Dataset) -> Result<Dataset> {
    Ok(ds.with_features(l2_normalize_features(&ds.features)?))
}

/// Preprocessing fitted on training data and replayed on new rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub standardizer: Option<Standardizer>,
    pub l2_normalize: bool,
}

impl Preprocessing {
    pub fn fit(ds: &Dataset, standardize: bool, l2: bool) -> Result<(Dataset, Preprocessing)> {
        let standardizer = if standardize {
            Some(Standardizer::fit(&ds.features)?)
        } else {
            None
        };
        let pre = Preprocessing {
            standardizer,
            l2_normalize: l2,
        };
        let out = ds.with_features(pre.apply(&ds.features)?);
        Ok((out, pre))
    }

    pub fn apply(&self, features: &Features) -> Result<Features> {
        let mut f = match &self.standardizer {
            Some(st) => st.transform(features)?,
            None => features.clone(),
        };
        if self.l2_normalize {
            f = l2_normalize_features(&f)?;
        }
        Ok(f)
    }
}

/// Row indices drawn with replacement from a parent dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubSample {
    pub indices: Vec<usize>,
    pub group_counts: Vec<usize>,
}

impl SubSample {
    /// Every row exactly once.
    pub fn identity(ds: &Dataset) -> Self {
        SubSample {
            indices: (0..ds.n_rows()).collect(),
            group_counts: ds.group_sizes.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Smallest group count, `n'` in the concentration bound.
    pub fn min_group_count(&self) -> usize {
        self.group_counts.iter().copied().min().unwrap_or(0)
    }
}

/// Draws `n` rows uniformly with replacement, redrawing until every group is
/// present.
pub fn subsample(ds: &Dataset, n: usize, rng: &mut FmcRng) -> Result<SubSample> {
    if n == 0 {
        return Err(FmcError::Config("subsample size must be at least 1".into()));
    }
    let big_n = ds.n_rows();
    for _ in 0..SUBSAMPLE_RETRIES {
        let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..big_n)).collect();
        let mut counts = vec![0usize; ds.n_groups()];
        for &i in &indices {
            counts[ds.sensitive[i]] += 1;
        }
        if counts.iter().all(|&c| c > 0) {
            return Ok(SubSample {
                indices,
                group_counts: counts,
            });
        }
    }
    Err(FmcError::GroupMissing {
        n,
        retries: SUBSAMPLE_RETRIES,
    })
}

/// Generative description of a synthetic mixture. Serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    pub weights: Vec<f64>,
    /// K continuous centers; empty for purely categorical data.
    #[serde(default)]
    pub centers: Vec<Vec<f64>>,
    /// Per-component isotropic standard deviation (default 1).
    #[serde(default)]
    pub scales: Vec<f64>,
    /// P(first group | component), binary sensitive attribute.
    #[serde(default)]
    pub group_bias: Option<Vec<f64>>,
    /// P(group | component), K rows on the simplex; overrides `group_bias`.
    #[serde(default)]
    pub group_probs: Option<Vec<Vec<f64>>>,
    /// Per component, per categorical feature, a probability table.
    #[serde(default)]
    pub categorical: Vec<Vec<Vec<f64>>>,
}

fn check_simplex(field: &str, p: &[f64]) -> Result<()> {
    let bad = |reason: String| FmcError::InvalidSimplex {
        field: field.to_string(),
        reason,
    };
    if p.is_empty() {
        return Err(bad("empty".into()));
    }
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(bad(format!("entry {v} is negative or not finite")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(bad(format!("entries sum to {s}")));
    }
    Ok(())
}

impl SyntheticSpec {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    fn group_probs(&self) -> Result<Vec<Vec<f64>>> {
        if let Some(gp) = &self.group_probs {
            return Ok(gp.clone());
        }
        match &self.group_bias {
            Some(b) => b
                .iter()
                .map(|&p| {
                    if (0.0..=1.0).contains(&p) {
                        Ok(vec![p, 1.0 - p])
                    } else {
                        Err(FmcError::InvalidSimplex {
                            field: "group_bias".into(),
                            reason: format!("{p} is not a probability"),
                        })
                    }
                })
                .collect(),
            None => Ok(vec![vec![0.5, 0.5]; self.k()]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_simplex("weights", &self.weights)?;
        let k = self.k();
        let len_check = |what: &str, got: usize| -> Result<()> {
            if got != k {
                return Err(FmcError::Dimension {
                    what: what.to_string(),
                    expected: k,
                    got,
                });
            }
            Ok(())
        };
        if !self.centers.is_empty() {
            len_check("centers", self.centers.len())?;
            let d = self.centers[0].len();
            if self.centers.iter().any(|c| c.len() != d) {
                return Err(FmcError::Config("centers have unequal dimensions".into()));
            }
        }
        if !self.scales.is_empty() {
            len_check("scales", self.scales.len())?;
            if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(FmcError::Config("scales must be positive".into()));
            }
        }
        let gp = self.group_probs()?;
        len_check("group probabilities", gp.len())?;
        for (kk, row) in gp.iter().enumerate() {
            check_simplex(&format!("group_probs[{kk}]"), row)?;
        }
        if gp.iter().any(|r| r.len() != gp[0].len()) {
            return Err(FmcError::Config("group_probs rows have unequal lengths".into()));
        }
        if !self.categorical.is_empty() {
            len_check("categorical", self.categorical.len())?;
            let shape: Vec<usize> = self.categorical[0].iter().map(Vec::len).collect();
            for (kk, tables) in self.categorical.iter().enumerate() {
                if tables.iter().map(Vec::len).collect::<Vec<_>>() != shape {
                    return Err(FmcError::Config(
                        "categorical tables differ in shape across components".into(),
                    ));
                }
                for (j, t) in tables.iter().enumerate() {
                    check_simplex(&format!("categorical[{kk}][{j}]"), t)?;
                }
            }
        }
        if self.centers.is_empty() && self.categorical.is_empty() {
            return Err(FmcError::Config(
                "spec needs continuous centers or categorical tables".into(),
            ));
        }
        if self.n == 0 {
            return Err(FmcError::EmptyDataset);
        }
        Ok(())
    }
}

/// Samples exactly from the mixture described by `spec`, keeping the
/// generating component of every row as ground truth.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = crate::rng::seeded(spec.seed);
    let d = spec.centers.first().map_or(0, Vec::len);
    let cards: Vec<usize> = spec
        .categorical
        .first()
        .map(|t| t.iter().map(Vec::len).collect())
        .unwrap_or_default();
    let gp = spec.group_probs()?;
    let m = gp[0].len();

    let comp = WeightedIndex::new(&spec.weights).map_err(|e| FmcError::InvalidSimplex {
        field: "weights".into(),
        reason: e.to_string(),
    })?;
    let group_dists = gp
        .iter()
        .map(WeightedIndex::new)
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| FmcError::InvalidSimplex {
            field: "group_probs".into(),
            reason: e.to_string(),
        })?;
    let cat_dists = spec
        .categorical
        .iter()
        .map(|tables| tables.iter().map(WeightedIndex::new).collect())
        .collect::<std::result::Result<Vec<Vec<_>>, _>>()
        .map_err(|e| FmcError::InvalidSimplex {
            field: "categorical".into(),
            reason: e.to_string(),
        })?;

    let mut cont = Array2::<f64>::zeros((spec.n, d));
    let mut cate = Array2::<usize>::zeros((spec.n, cards.len()));
    let mut sensitive = Vec::with_capacity(spec.n);
    let mut truth = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let z = comp.sample(&mut rng);
        let scale = spec.scales.get(z).copied().unwrap_or(1.0);
        for j in 0..d {
            let e: f64 = StandardNormal.sample(&mut rng);
            cont[[i, j]] = spec.centers[z][j] + scale * e;
        }
        if !cat_dists.is_empty() {
            for (j, dist) in cat_dists[z].iter().enumerate() {
                cate[[i, j]] = dist.sample(&mut rng);
            }
        }
        sensitive.push(group_dists[z].sample(&mut rng));
        truth.push(z);
    }
    let mut encoding = Encoding {
        cont_names: names_or_default(&[], d, "x"),
        cate_names: names_or_default(&[], cards.len(), "c"),
        cate_levels: cards
            .iter()
            .map(|&l| (0..l).map(|c| format!("v{c}")).collect())
            .collect(),
        sensitive_name: "group".into(),
        sensitive_levels: (0..m).map(|s| format!("g{s}")).collect(),
        ..Encoding::default()
    };
    encoding.columns = encoding
        .cont_names
        .iter()
        .chain(&encoding.cate_names)
        .cloned()
        .chain(std::iter::once("group".to_string()))
        .collect();
    encoding.source_columns = encoding.columns.clone();
    Ok(Dataset::new(Features::new(cont, cate, cards)?, sensitive, m)?
        .with_encoding(encoding)
        .with_truth(truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn two_group(cont: Array2<f64>, sensitive: Vec<usize>) -> Dataset {
        Dataset::new(Features::continuous(cont), sensitive, 2).unwrap()
    }

    #[test]
    fn standardize_uses_population_std() {
        let ds = two_group(array![[1.0], [2.0], [3.0]], vec![0, 1, 0]);
        let out = standardize(&ds).unwrap();
        // population std of (1,2,3) is sqrt(2/3), so the ends map to ±sqrt(3/2)
        let e = (1.5f64).sqrt();
        assert_abs_diff_eq!(out.features.cont[[0, 0]], -e, epsilon = 1e-12);
        assert_abs_diff_eq!(out.features.cont[[1, 0]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.features.cont[[2, 0]], e, epsilon = 1e-12);
        assert_eq!(out.sensitive, ds.sensitive);
    }

    #[test]
    fn standardize_is_idempotent() {
        let ds = two_group(array![[1.0, 10.0], [2.0, -3.0], [7.0, 0.5], [4.0, 2.0]], vec![0, 1, 0, 1]);
        let once = standardize(&ds).unwrap();
        let twice = standardize(&once).unwrap();
        for (a, b) in once.features.cont.iter().zip(twice.features.cont.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_column_becomes_zeros() {
        let ds = two_group(array![[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]], vec![0, 1, 1]);
        let out = standardize(&ds).unwrap();
        assert!(out.features.cont.column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let ds = two_group(array![[3.0, 4.0], [0.6, 0.8]], vec![0, 1]);
        let out = l2_normalize(&ds).unwrap();
        assert_abs_diff_eq!(out.features.cont[[0, 0]], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(out.features.cont[[0, 1]], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(out.features.cont[[1, 0]], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(out.features.cont[[1, 1]], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn l2_normalize_rejects_zero_row() {
        let ds = two_group(array![[1.0, 1.0], [0.0, 0.0]], vec![0, 1]);
        assert!(matches!(l2_normalize(&ds), Err(FmcError::ZeroVector { row: 1 })));
    }

    #[test]
    fn subsample_is_deterministic() {
        let ds = two_group(Array2::zeros((50, 1)), (0..50).map(|i| i % 2).collect());
        let a = subsample(&ds, 50, &mut crate::rng::seeded(3)).unwrap();
        let b = subsample(&ds, 50, &mut crate::rng::seeded(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.group_counts.iter().sum::<usize>(), 50);
    }

    #[test]
    fn subsample_of_one_misses_a_group() {
        let ds = two_group(Array2::zeros((10, 1)), (0..10).map(|i| i % 2).collect());
        let err = subsample(&ds, 1, &mut crate::rng::seeded(0)).unwrap_err();
        assert!(matches!(err, FmcError::GroupMissing { n: 1, .. }));
    }

    #[test]
    fn subsample_group_counts_concentrate() {
        // Binomial(1000, 1/2): P(|X - 500| >= 200) <= 2 exp(-2 * 200^2 / 1000) = 2e-35 (Hoeffding)
        let ds = two_group(Array2::zeros((10_000, 1)), (0..10_000).map(|i| i % 2).collect());
        for seed in 0..20 {
            let s = subsample(&ds, 1000, &mut crate::rng::seeded(seed)).unwrap();
            assert!(s.group_counts.iter().all(|&c| c > 300 && c < 700));
        }
    }

    #[test]
    fn synthetic_rejects_bad_weights() {
        let spec = SyntheticSpec {
            n: 10,
            seed: 0,
            weights: vec![0.7, 0.7],
            centers: vec![vec![0.0], vec![1.0]],
            scales: vec![],
            group_bias: None,
            group_probs: None,
            categorical: vec![],
        };
        match make_synthetic(&spec) {
            Err(FmcError::InvalidSimplex { field, .. }) => assert_eq!(field, "weights"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_valued_sensitive_column_is_degenerate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "age,sex\n1,m\n2,m\n3,m\n").unwrap();
        let schema = Schema::parse_inline("age=continuous,sex=sensitive").unwrap();
        assert!(matches!(load_csv(&p, &schema), Err(FmcError::GroupDegenerate(_))));
    }

    #[test]
    fn load_small_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "age,sex\n31,m\n45,f\n22,m\n").unwrap();
        let schema = Schema::parse_inline("age=continuous,sex=sensitive").unwrap();
        let ds = load_csv(&p, &schema).unwrap();
        assert_eq!(ds.n_rows(), 3);
        assert_eq!(ds.features.d_cont(), 1);
        assert_eq!(ds.n_groups(), 2);
        assert_eq!(ds.sensitive, vec![0, 1, 0]);
        assert_eq!(ds.group_sizes, vec![2, 1]);
    }

    #[test]
    fn unparseable_cell_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "age,sex\n31,m\nabc,f\n").unwrap();
        let schema = Schema::parse_inline("age=continuous,sex=sensitive").unwrap();
        match load_csv(&p, &schema) {
            Err(FmcError::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "age");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_and_empty_file() {
        let schema = Schema::parse_inline("age=continuous,sex=sensitive").unwrap();
        assert!(matches!(
            load_csv("/nonexistent/file.csv", &schema),
            Err(FmcError::Io { .. })
        ));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "age,sex\n").unwrap();
        assert!(matches!(load_csv(&p, &schema), Err(FmcError::EmptyDataset)));
    }

    #[test]
    fn schema_requires_one_sensitive_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "age,sex\n1,m\n2,f\n").unwrap();
        let schema = Schema::parse_inline("age=continuous,sex=categorical").unwrap();
        assert!(matches!(load_csv(&p, &schema), Err(FmcError::Schema(_))));
    }
}
