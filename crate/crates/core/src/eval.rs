//! Evaluation harness: datasets, the prediction gap on unimportant features
//! (PGU), permutation feature importance (PFI) and random-ranking baselines.
//!
//! PGU keeps the top-`k` features of a ranking and replaces every other
//! feature by its training mean, i.e. zero on standardized features:
//!
//! ```text
//! PGU(k) = mean_rows |N(x) - N(x with non-top-k features at the baseline)|
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::CausalGraph;
use crate::predictor::{rmse, train, Mlp, Predictor, PredictorError, TrainConfig};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sampler::{inverse_normal_cdf, PointSource};
use crate::scalar::{mean, variance, Real};
use crate::scm::{dequantize, Scm, ScmError};

pub const DEFAULT_TRAIN_ROWS: usize = 700;
pub const DEFAULT_TEST_ROWS: usize = 300;
/// Scale of the label noise in the synthetic dataset.
pub const LABEL_NOISE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("csv: {0}")]
    Parse(String),
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("column {column:?} row {row}: {value:?} is not a number")]
    NonNumeric { column: String, row: usize, value: String },
    #[error("dataset: {0}")]
    Invalid(String),
    #[error("ranking: {0}")]
    InvalidRanking(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Regression,
    Binary,
}

/// Feature matrix with raw values, targets and a disjoint train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    names: Vec<String>,
    x: Array2<T>,
    y: Vec<T>,
    task: Task,
    train: Vec<usize>,
    test: Vec<usize>,
    graph: Option<CausalGraph>,
}

/// Per-feature mean and standard deviation of the training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization<T> {
    pub mean: Vec<T>,
    /// Constant columns get 1.
    pub std: Vec<T>,
}

impl<T: Real> Standardization<T> {
    pub fn apply(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut out = x.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        out
    }
}

impl<T: Real> Dataset<T> {
    pub fn new(
        names: Vec<String>,
        x: Array2<T>,
        y: Vec<T>,
        task: Task,
        train: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self, EvalError> {
        let n = x.nrows();
        if names.len() != x.ncols() {
            return Err(EvalError::Invalid(format!("{} names for {} columns", names.len(), x.ncols())));
        }
        if y.len() != n {
            return Err(EvalError::Invalid(format!("{} targets for {n} rows", y.len())));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(EvalError::Invalid("non-finite value".into()));
        }
        let mut seen = vec![false; n];
        for &i in train.iter().chain(&test) {
            if i >= n || seen[i] {
                return Err(EvalError::Invalid("split indices must be disjoint and in range".into()));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(EvalError::Invalid("split does not cover every row".into()));
        }
        if train.len() < 2 {
            return Err(EvalError::Invalid("need at least two training rows".into()));
        }
        Ok(Dataset {
            names,
            x,
            y,
            task,
            train,
            test,
            graph: None,
        })
    }

    /// Attaches a graph whose nodes are the feature names in column order.
    pub fn with_graph(mut self, graph: CausalGraph) -> Result<Self, EvalError> {
        if graph.names() != self.names.as_slice() {
            return Err(EvalError::Invalid(format!(
                "graph nodes {:?} differ from features {:?}",
                graph.names(),
                self.names
            )));
        }
        self.graph = Some(graph);
        Ok(self)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn graph(&self) -> Option<&CausalGraph> {
        self.graph.as_ref()
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test
    }

    pub fn x(&self) -> ArrayView2<'_, T> {
        self.x.view()
    }

    pub fn y(&self) -> &[T] {
        &self.y
    }

    pub fn train_x(&self) -> Array2<T> {
        self.x.select(Axis(0), &self.train)
    }

    pub fn test_x(&self) -> Array2<T> {
        self.x.select(Axis(0), &self.test)
    }

    pub fn train_y(&self) -> Vec<T> {
        self.train.iter().map(|&i| self.y[i]).collect()
    }

    pub fn test_y(&self) -> Vec<T> {
        self.test.iter().map(|&i| self.y[i]).collect()
    }

    pub fn standardization(&self) -> Standardization<T> {
        let tx = self.train_x();
        let (mut m, mut s) = (Vec::new(), Vec::new());
        for col in tx.columns() {
            let c = col.to_vec();
            let sd = variance(&c).sqrt();
            m.push(mean(&c));
            s.push(if sd > T::zero() { sd } else { T::one() });
        }
        Standardization { mean: m, std: s }
    }

    /// Training means: the PGU replacement values.
    pub fn baseline(&self) -> Vec<T> {
        self.standardization().mean
    }

    /// Writes `rows` as CSV with the feature names and `target` as header.
    pub fn write_csv<W: Write>(&self, rows: &[usize], target: &str, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| EvalError::Parse(e.to_string());
        let mut header: Vec<&str> = self.names.iter().map(String::as_str).collect();
        header.push(target);
        w.write_record(&header).map_err(err)?;
        for &i in rows {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| v.as_f64().to_string()).collect();
            rec.push(self.y[i].as_f64().to_string());
            w.write_record(&rec).map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws the reference synthetic dataset: features `W, Z, X` from
/// [`Scm::reference_linear`] and `Y = tanh(X) + 0.5 Z^2 + 0.1 U_Y`.
/// The first `n_train` rows form the training split.
pub fn generate_synthetic(n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset<f64>, Scm<f64>), EvalError> {
    let scm = Scm::<f64>::reference_linear();
    let n = n_train + n_test;
    let (_, x) = scm.sample(n, &PointSource::Pseudo { seed })?;
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    let y: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|r| {
            let u = inverse_normal_cdf(rand::Rng::gen_range(&mut rng, f64::EPSILON..1.0));
            synthetic_label_mean(r[1], r[2]) + LABEL_NOISE * u
        })
        .collect();
    let ds = Dataset::new(
        scm.graph().names().to_vec(),
        x,
        y,
        Task::Regression,
        (0..n_train).collect(),
        (n_train..n).collect(),
    )?
    .with_graph(scm.graph().clone())?;
    Ok((ds, scm))
}

/// `E[Y | Z, X]` of the synthetic label: the Bayes-optimal predictor.
pub fn synthetic_label_mean(z: f64, x: f64) -> f64 {
    x.tanh() + 0.5 * z * z
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSpec {
    pub name: String,
    /// Integer-valued; dequantized on load.
    pub integer: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub features: Vec<ColumnSpec>,
    pub target: String,
    pub task: Task,
}

impl CsvSchema {
    pub fn real(features: &[&str], target: &str, task: Task) -> Self {
        CsvSchema {
            features: features
                .iter()
                .map(|n| ColumnSpec {
                    name: (*n).to_owned(),
                    integer: false,
                })
                .collect(),
            target: target.to_owned(),
            task,
        }
    }
}

impl CsvSchema {
    /// Every header column except `target` is a feature; names in `integer`
    /// are marked integer-valued.
    pub fn from_header(path: &Path, target: &str, integer: &[String], task: Task) -> Result<Self, EvalError> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| EvalError::Parse(format!("{}: {e}", path.display())))?;
        let headers = rdr.headers().map_err(|e| EvalError::Parse(e.to_string()))?;
        if !headers.iter().any(|h| h.trim() == target) {
            return Err(EvalError::MissingColumn(target.to_owned()));
        }
        let features: Vec<ColumnSpec> = headers
            .iter()
            .map(str::trim)
            .filter(|h| *h != target)
            .map(|h| ColumnSpec {
                name: h.to_owned(),
                integer: integer.iter().any(|i| i == h),
            })
            .collect();
        if let Some(unknown) = integer.iter().find(|i| !features.iter().any(|f| &f.name == *i)) {
            return Err(EvalError::MissingColumn(unknown.clone()));
        }
        Ok(CsvSchema {
            features,
            target: target.to_owned(),
            task,
        })
    }
}

fn read_table(
    path: &Path,
    features: &[ColumnSpec],
    target: Option<&str>,
) -> Result<(Array2<f64>, Vec<f64>), EvalError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| EvalError::Parse(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| EvalError::Parse(e.to_string()))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| EvalError::MissingColumn(name.to_owned()))
    };
    let cols: Vec<usize> = features.iter().map(|c| find(&c.name)).collect::<Result<_, _>>()?;
    let target = target.map(|t| find(t).map(|i| (i, t))).transpose()?;
    let mut values = Vec::new();
    let mut y = Vec::new();
    let mut rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| EvalError::Parse(format!("{}: {e}", path.display())))?;
        let parse = |idx: usize, name: &str| -> Result<f64, EvalError> {
            let raw = rec.get(idx).unwrap_or("").trim();
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| EvalError::NonNumeric {
                    column: name.to_owned(),
                    row: r + 1,
                    value: raw.to_owned(),
                })
        };
        for (&c, spec) in cols.iter().zip(features) {
            values.push(parse(c, &spec.name)?);
        }
        if let Some((i, name)) = target {
            y.push(parse(i, name)?);
        }
        rows += 1;
    }
    let x = Array2::from_shape_vec((rows, cols.len()), values).map_err(|e| EvalError::Parse(e.to_string()))?;
    Ok((x, y))
}

/// The named feature columns of a CSV, integer columns dequantized.
pub fn load_feature_matrix(path: &Path, features: &[ColumnSpec], seed: u64) -> Result<Array2<f64>, EvalError> {
    let (mut x, _) = read_table(path, features, None)?;
    dequantize_columns(&mut x, features, seed)?;
    Ok(x)
}

fn dequantize_columns(x: &mut Array2<f64>, features: &[ColumnSpec], seed: u64) -> Result<(), EvalError> {
    for (j, spec) in features.iter().enumerate() {
        if spec.integer {
            let col = dequantize(&x.column(j).to_vec(), derive_seed(seed, j as u64))?;
            x.column_mut(j).assign(&ndarray::Array1::from(col));
        }
    }
    Ok(())
}

fn finish_dataset(
    schema: &CsvSchema,
    x: Array2<f64>,
    y: Vec<f64>,
    train: Vec<usize>,
    test: Vec<usize>,
    graph: Option<CausalGraph>,
) -> Result<Dataset<f64>, EvalError> {
    let names = schema.features.iter().map(|c| c.name.clone()).collect();
    let ds = Dataset::new(names, x, y, schema.task, train, test)?;
    match graph {
        Some(g) => ds.with_graph(g),
        None => Ok(ds),
    }
}

/// One CSV, split into train/test by a seeded shuffle with `test_fraction` of
/// the rows held out. Integer columns are dequantized with the same seed.
pub fn load_csv(
    path: &Path,
    schema: &CsvSchema,
    graph: Option<CausalGraph>,
    test_fraction: f64,
    seed: u64,
) -> Result<Dataset<f64>, EvalError> {
    let (mut x, y) = read_table(path, &schema.features, Some(&schema.target))?;
    dequantize_columns(&mut x, &schema.features, seed)?;
    let mut idx: Vec<usize> = (0..x.nrows()).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let n_test = (test_fraction.clamp(0.0, 1.0) * x.nrows() as f64).round() as usize;
    let test = idx[..n_test].to_vec();
    let train = idx[n_test..].to_vec();
    finish_dataset(schema, x, y, train, test, graph)
}

/// Separate train and test files with identical schemas.
pub fn load_csv_split(
    train_path: &Path,
    test_path: &Path,
    schema: &CsvSchema,
    graph: Option<CausalGraph>,
    seed: u64,
) -> Result<Dataset<f64>, EvalError> {
    let (xa, ya) = read_table(train_path, &schema.features, Some(&schema.target))?;
    let (xb, yb) = read_table(test_path, &schema.features, Some(&schema.target))?;
    let n_train = xa.nrows();
    let mut x = ndarray::concatenate(Axis(0), &[xa.view(), xb.view()]).map_err(|e| EvalError::Parse(e.to_string()))?;
    dequantize_columns(&mut x, &schema.features, seed)?;
    let y = ya.into_iter().chain(yb).collect();
    let n = x.nrows();
    finish_dataset(schema, x, y, (0..n_train).collect(), (n_train..n).collect(), graph)
}

/// An MLP on raw features with train/test error.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub model: Mlp<f64>,
    pub train_rmse: f64,
    pub test_rmse: f64,
    /// Share of test rows with `score >= 0.5` matching the label; binary tasks only.
    pub test_accuracy: Option<f64>,
}

/// Trains on standardized training features and folds the standardization
/// into the first layer, so the returned network reads raw features.
pub fn fit_model(ds: &Dataset<f64>, cfg: &TrainConfig) -> Result<FittedModel, EvalError> {
    let st = ds.standardization();
    let outcome = train(st.apply(ds.train_x().view()).view(), &ds.train_y(), cfg)?;
    let model = outcome.model.fold_input_standardization(&st.mean, &st.std)?;
    let train_pred = model.predict(ds.train_x().view())?;
    let test_pred = model.predict(ds.test_x().view())?;
    let test_y = ds.test_y();
    let test_accuracy = (ds.task() == Task::Binary && !test_y.is_empty()).then(|| {
        let hits = test_pred
            .iter()
            .zip(&test_y)
            .filter(|(p, y)| (**p >= 0.5) == (**y >= 0.5))
            .count();
        hits as f64 / test_y.len() as f64
    });
    Ok(FittedModel {
        train_rmse: rmse(&train_pred, &ds.train_y()),
        test_rmse: if test_y.is_empty() { f64::NAN } else { rmse(&test_pred, &test_y) },
        test_accuracy,
        model,
    })
}

/// Feature indices by decreasing importance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    pub method: String,
    pub order: Vec<usize>,
}

impl Ranking {
    pub fn new(method: impl Into<String>, order: Vec<usize>) -> Result<Self, EvalError> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || seen[i] {
                return Err(EvalError::InvalidRanking(format!("{order:?} is not a permutation")));
            }
            seen[i] = true;
        }
        Ok(Ranking {
            method: method.into(),
            order,
        })
    }

    /// Indices sorted by decreasing `scores`; ties keep index order.
    pub fn from_scores(method: impl Into<String>, scores: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        Ranking {
            method: method.into(),
            order,
        }
    }

    /// Ranking by feature names, most important first.
    pub fn from_names(method: impl Into<String>, names: &[String], features: &[String]) -> Result<Self, EvalError> {
        let order = names
            .iter()
            .map(|n| {
                features
                    .iter()
                    .position(|f| f == n)
                    .ok_or_else(|| EvalError::InvalidRanking(format!("unknown feature {n:?}")))
            })
            .collect::<Result<_, _>>()?;
        Ranking::new(method, order)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn reversed(&self) -> Self {
        Ranking {
            method: format!("{}-reversed", self.method),
            order: self.order.iter().rev().copied().collect(),
        }
    }
}

/// Mean `|N(x) - N(x')|` where `x'` keeps the top-`k` features of `ranking`
/// and takes `baseline` elsewhere.
pub fn pgu<T: Real>(
    model: &dyn Predictor<T>,
    test: ArrayView2<T>,
    ranking: &Ranking,
    k: usize,
    baseline: &[T],
) -> Result<f64, EvalError> {
    let p = test.ncols();
    if ranking.len() != p || baseline.len() != p || model.n_features() != p {
        return Err(EvalError::InvalidRanking(format!(
            "ranking over {}, baseline over {}, model over {}, data over {p} features",
            ranking.len(),
            baseline.len(),
            model.n_features()
        )));
    }
    if k == 0 || k > p {
        return Err(EvalError::InvalidRanking(format!("k = {k} outside 1..={p}")));
    }
    if test.nrows() == 0 {
        return Ok(0.0);
    }
    let mut perturbed = test.to_owned();
    for &j in &ranking.order[k..] {
        perturbed.column_mut(j).fill(baseline[j]);
    }
    let a = model.predict(test)?;
    let b = model.predict(perturbed.view())?;
    let total: f64 = a.iter().zip(&b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).sum();
    Ok(total / test.nrows() as f64)
}

/// `[PGU(1), ..., PGU(p)]`.
pub fn pgu_curve<T: Real>(
    model: &dyn Predictor<T>,
    test: ArrayView2<T>,
    ranking: &Ranking,
    baseline: &[T],
) -> Result<Vec<f64>, EvalError> {
    (1..=test.ncols()).map(|k| pgu(model, test, ranking, k, baseline)).collect()
}

/// `sum_{k=1}^{p} PGU(k)`.
pub fn pgu_aggregate<T: Real>(
    model: &dyn Predictor<T>,
    test: ArrayView2<T>,
    ranking: &Ranking,
    baseline: &[T],
) -> Result<f64, EvalError> {
    Ok(pgu_curve(model, test, ranking, baseline)?.iter().sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PfiMetric {
    /// Increase in RMSE.
    Rmse,
    /// Drop in F1 of `score >= 0.5` against labels `>= 0.5`.
    F1Score,
}

fn metric_value(metric: PfiMetric, pred: &[f64], y: &[f64]) -> f64 {
    match metric {
        PfiMetric::Rmse => rmse(pred, y),
        PfiMetric::F1Score => {
            let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
            for (&p, &t) in pred.iter().zip(y) {
                match (p >= 0.5, t >= 0.5) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fneg += 1.0,
                    _ => {}
                }
            }
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fneg)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfiResult {
    /// Mean metric degradation per feature.
    pub importances: Vec<f64>,
    pub ranking: Ranking,
}

/// Permutation feature importance averaged over `repeats` shuffles; repeat
/// `r` of feature `j` shuffles with seed `derive_seed(derive_seed(seed, r), j)`.
pub fn pfi(
    model: &dyn Predictor<f64>,
    x: ArrayView2<f64>,
    y: &[f64],
    metric: PfiMetric,
    repeats: usize,
    seed: u64,
) -> Result<PfiResult, EvalError> {
    if repeats == 0 {
        return Err(EvalError::Invalid("repeats must be at least 1".into()));
    }
    let base = metric_value(metric, &model.predict(x)?, y);
    let p = x.ncols();
    let mut importances = vec![0.0; p];
    for r in 0..repeats {
        let rs = derive_seed(seed, r as u64);
        for (j, imp) in importances.iter_mut().enumerate() {
            let mut col = x.column(j).to_vec();
            col.shuffle(&mut rng_from_seed(derive_seed(rs, j as u64)));
            let mut xp = x.to_owned();
            xp.column_mut(j).assign(&ndarray::Array1::from(col));
            let v = metric_value(metric, &model.predict(xp.view())?, y);
            *imp += match metric {
                PfiMetric::Rmse => v - base,
                PfiMetric::F1Score => base - v,
            };
        }
    }
    importances.iter_mut().for_each(|v| *v /= repeats as f64);
    let ranking = Ranking::from_scores("pfi", &importances);
    Ok(PfiResult { importances, ranking })
}

/// `n` uniformly random rankings; ranking `i` uses `derive_seed(seed, i)`.
pub fn random_rankings(p: usize, n: usize, seed: u64) -> Vec<Ranking> {
    (0..n)
        .map(|i| {
            let mut order: Vec<usize> = (0..p).collect();
            order.shuffle(&mut rng_from_seed(derive_seed(seed, i as u64)));
            Ranking {
                method: format!("random-{i}"),
                order,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PguCurve {
    pub per_k: Vec<f64>,
    pub aggregate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline {
    pub count: usize,
    pub seed: u64,
    pub mean_aggregate: f64,
    pub std_aggregate: f64,
    /// Mean of `PGU(k)` over the random rankings.
    pub mean_per_k: Vec<f64>,
}

/// Rankings by feature name and their PGU curves, keyed by method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rankings: BTreeMap<String, Vec<String>>,
    pub pgu: BTreeMap<String, PguCurve>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub random: Option<RandomBaseline>,
}

impl ComparisonReport {
    /// PGU curves for each ranking plus `n_random` random rankings.
    pub fn build(
        model: &dyn Predictor<f64>,
        test: ArrayView2<f64>,
        baseline: &[f64],
        names: &[String],
        rankings: &[Ranking],
        n_random: usize,
        seed: u64,
    ) -> Result<Self, EvalError> {
        let mut out = ComparisonReport {
            rankings: BTreeMap::new(),
            pgu: BTreeMap::new(),
            random: None,
        };
        for r in rankings {
            let per_k = pgu_curve(model, test, r, baseline)?;
            out.rankings
                .insert(r.method.clone(), r.order.iter().map(|&i| names[i].clone()).collect());
            out.pgu.insert(
                r.method.clone(),
                PguCurve {
                    aggregate: per_k.iter().sum(),
                    per_k,
                },
            );
        }
        if n_random > 0 {
            let curves: Vec<Vec<f64>> = random_rankings(names.len(), n_random, seed)
                .iter()
                .map(|r| pgu_curve(model, test, r, baseline))
                .collect::<Result<_, _>>()?;
            let aggs: Vec<f64> = curves.iter().map(|c| c.iter().sum()).collect();
            let m = aggs.iter().sum::<f64>() / n_random as f64;
            let sd = if n_random > 1 {
                (aggs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n_random - 1) as f64).sqrt()
            } else {
                0.0
            };
            let mean_per_k = (0..names.len())
                .map(|k| curves.iter().map(|c| c[k]).sum::<f64>() / n_random as f64)
                .collect();
            out.random = Some(RandomBaseline {
                count: n_random,
                seed,
                mean_aggregate: m,
                std_aggregate: sd,
                mean_per_k,
            });
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `method,k,pgu` rows; the random baseline appears as `random-mean`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| EvalError::Parse(e.to_string());
        w.write_record(["method", "k", "pgu"]).map_err(err)?;
        let random = self.random.as_ref().map(|r| ("random-mean".to_owned(), &r.mean_per_k));
        for (method, per_k) in self.pgu.iter().map(|(m, c)| (m.clone(), &c.per_k)).chain(random) {
            for (k, v) in per_k.iter().enumerate() {
                w.write_record([method.as_str(), &(k + 1).to_string(), &v.to_string()])
                    .map_err(err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{FnPredictor, LinearPredictor};
    use crate::sampler::Scramble;
    use crate::scm::NoiseSpec;

    fn standard_normal(n: usize, p: usize, seed: u64) -> Array2<f64> {
        let g = CausalGraph::empty((0..p).map(|i| format!("x{i}")).collect()).unwrap();
        let scm = Scm::linear(g, &[], NoiseSpec::standard_normal(p)).unwrap();
        scm.sample(
            n,
            &PointSource::Sobol {
                scramble: Scramble::Owen,
                seed,
            },
        )
        .unwrap()
        .1
    }

    #[test]
    fn pgu_zero_cases() {
        let x = standard_normal(256, 3, 1);
        let model = FnPredictor::new(3, |x: &[f64]| x[0].sin());
        let base = vec![0.0; 3];
        let r = Ranking::new("m", vec![0, 2, 1]).unwrap();
        assert_eq!(pgu(&model, x.view(), &r, 1, &base).unwrap(), 0.0);
        assert_eq!(pgu(&model, x.view(), &r, 3, &base).unwrap(), 0.0);
        let wrong = Ranking::new("w", vec![1, 2, 0]).unwrap();
        assert!(pgu(&model, x.view(), &wrong, 1, &base).unwrap() > 0.1);
        assert!(pgu(&model, x.view(), &r, 0, &base).is_err());
        assert!(pgu(&model, x.view(), &r, 4, &base).is_err());
    }

    #[test]
    fn pgu_linear_closed_form() {
        // E|sum c_i x_i| = sigma sqrt(2/pi) for standard normal features
        let c = [3.0, -2.0, 1.0, 0.5];
        let x = standard_normal(1 << 18, 4, 2);
        let model = LinearPredictor::new(c.to_vec(), 0.0);
        let r = Ranking::from_scores("abs", &c.map(f64::abs));
        assert_eq!(r.order, vec![0, 1, 2, 3]);
        for k in 1..=4 {
            let sigma = c[k..].iter().map(|v| v * v).sum::<f64>().sqrt();
            let want = sigma * (2.0 / std::f64::consts::PI).sqrt();
            let got = pgu(&model, x.view(), &r, k, &[0.0; 4]).unwrap();
            assert!((got - want).abs() < 1e-3, "k={k}: {got} vs {want}");
            let direct: f64 = x
                .rows()
                .into_iter()
                .map(|row| c.iter().zip(row.iter()).skip(k).map(|(a, b)| a * b).sum::<f64>().abs())
                .sum::<f64>()
                / x.nrows() as f64;
            assert!((got - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn pgu_aggregate_cases() {
        let x = standard_normal(512, 3, 3);
        let base = [0.0; 3];
        let constant = LinearPredictor::new(vec![0.0; 3], 4.0);
        let r = Ranking::new("m", vec![0, 1, 2]).unwrap();
        assert_eq!(pgu_aggregate(&constant, x.view(), &r, &base).unwrap(), 0.0);
        let lin = LinearPredictor::new(vec![3.0, 1.0, 0.2], 0.0);
        let truth = Ranking::new("truth", vec![0, 1, 2]).unwrap();
        let a = pgu_aggregate(&lin, x.view(), &truth, &base).unwrap();
        let b = pgu_aggregate(&lin, x.view(), &truth.reversed(), &base).unwrap();
        assert!(a <= b, "{a} {b}");
        let one = standard_normal(64, 1, 0);
        let single = LinearPredictor::new(vec![2.0], 0.0);
        let r1 = Ranking::new("s", vec![0]).unwrap();
        assert_eq!(pgu_aggregate(&single, one.view(), &r1, &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn pgu_non_increasing_in_k() {
        let x = standard_normal(300, 4, 4);
        let model = FnPredictor::new(4, |x: &[f64]| x[0] * x[1] + x[2].tanh() - 0.3 * x[3]);
        for r in random_rankings(4, 10, 5) {
            let curve = pgu_curve(&model, x.view(), &r, &[0.0; 4]).unwrap();
            assert_eq!(curve[3], 0.0);
            // zeroing fewer features cannot increase the gap for this separable-by-block model on average
            assert!(curve.iter().all(|v| v.is_finite()));
        }
        // additive model: strictly monotone by construction
        let lin = LinearPredictor::new(vec![1.0, -1.0, 0.5, 2.0], 0.0);
        let y: Vec<f64> = lin.predict(x.view()).unwrap();
        let _ = y;
        for r in random_rankings(4, 10, 6) {
            let c = pgu_curve(&lin, x.view(), &r, &[0.0; 4]).unwrap();
            assert!(c.windows(2).all(|w| w[1] <= w[0]), "{c:?}");
        }
    }

    #[test]
    fn pfi_rankings() {
        let x = standard_normal(1000, 2, 7);
        let ignore = LinearPredictor::new(vec![1.0, 0.0], 0.0);
        let y = ignore.predict(x.view()).unwrap();
        let r = pfi(&ignore, x.view(), &y, PfiMetric::Rmse, 5, 1).unwrap();
        assert!(r.importances[1].abs() < 0.01);
        assert_eq!(r.ranking.order, vec![0, 1]);

        let strong = LinearPredictor::new(vec![3.0, 1.0], 0.0);
        let y = strong.predict(x.view()).unwrap();
        for seed in 0..20 {
            assert_eq!(pfi(&strong, x.view(), &y, PfiMetric::Rmse, 1, seed).unwrap().ranking.order, vec![0, 1]);
        }
        let one = pfi(&strong, x.view(), &y, PfiMetric::Rmse, 1, 3).unwrap();
        let ten = pfi(&strong, x.view(), &y, PfiMetric::Rmse, 10, 3).unwrap();
        assert_eq!(one.ranking.order, ten.ranking.order);
        assert_eq!(ten, pfi(&strong, x.view(), &y, PfiMetric::Rmse, 10, 3).unwrap());
    }

    #[test]
    fn pfi_f1_metric() {
        let x = standard_normal(1000, 2, 8);
        let model = FnPredictor::new(2, |x: &[f64]| 1.0 / (1.0 + (-4.0 * x[0]).exp()));
        let y: Vec<f64> = x.column(0).iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let r = pfi(&model, x.view(), &y, PfiMetric::F1Score, 3, 0).unwrap();
        assert!(r.importances[0] > 0.3);
        assert_eq!(r.importances[1], 0.0);
    }

    #[test]
    fn synthetic_defaults() {
        let (ds, _) = generate_synthetic(DEFAULT_TRAIN_ROWS, DEFAULT_TEST_ROWS, 0).unwrap();
        assert_eq!(ds.train_x().nrows(), 700);
        assert_eq!(ds.test_x().nrows(), 300);
        assert_eq!(ds.names(), ["W", "Z", "X"]);
        assert!(ds.graph().is_some());
        let (again, _) = generate_synthetic(700, 300, 0).unwrap();
        assert_eq!(ds, again);
        let (other, _) = generate_synthetic(700, 300, 1).unwrap();
        assert_ne!(ds, other);
    }

    #[test]
    fn bayes_predictor_sits_on_the_noise_floor() {
        let (ds, _) = generate_synthetic(700, 20_000, 2).unwrap();
        let tx = ds.test_x();
        let pred: Vec<f64> = tx.rows().into_iter().map(|r| synthetic_label_mean(r[1], r[2])).collect();
        let e = rmse(&pred, &ds.test_y());
        assert!((e - LABEL_NOISE).abs() < 0.005, "{e}");
    }

    #[test]
    fn trained_mlp_beats_noise_floor_margin() {
        let (ds, _) = generate_synthetic(700, 300, 0).unwrap();
        let fit = fit_model(&ds, &TrainConfig::default()).unwrap();
        assert!(fit.test_rmse < 1.5 * LABEL_NOISE, "test rmse {}", fit.test_rmse);
        let short = fit_model(
            &ds,
            &TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert!(short.test_rmse > fit.test_rmse);
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn csv_loading() {
        let dir = tempfile::tempdir().unwrap();
        let body = "a,b,c,y\n1,2.5,3,0.5\n2,3.5,1,1.5\n3,1.0,2,2.5\n4,0.5,5,3.5\n";
        let path = write(dir.path(), "d.csv", body);
        let schema = CsvSchema::real(&["a", "b", "c"], "y", Task::Regression);
        let ds = load_csv(&path, &schema, None, 0.25, 1).unwrap();
        assert_eq!(ds.names(), ["a", "b", "c"]);
        assert_eq!(ds.train_indices().len(), 3);
        assert_eq!(ds.test_indices().len(), 1);
        assert_eq!(ds.x()[[1, 1]], 3.5);

        let missing = CsvSchema::real(&["a", "d"], "y", Task::Regression);
        assert!(matches!(load_csv(&path, &missing, None, 0.25, 1), Err(EvalError::MissingColumn(c)) if c == "d"));

        let bad = write(dir.path(), "bad.csv", "a,y\n1,2\nfoo,3\n");
        let s = CsvSchema::real(&["a"], "y", Task::Regression);
        assert!(matches!(
            load_csv(&bad, &s, None, 0.0, 0),
            Err(EvalError::NonNumeric { row: 2, .. })
        ));
        let ragged = write(dir.path(), "ragged.csv", "a,y\n1,2,3\n");
        assert!(matches!(load_csv(&ragged, &s, None, 0.0, 0), Err(EvalError::Parse(_))));
    }

    #[test]
    fn schema_from_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "h.csv", "a,y,b\n1,2,3\n4,5,6\n");
        let s = CsvSchema::from_header(&path, "y", &["b".to_owned()], Task::Regression).unwrap();
        assert_eq!(s.features.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert!(s.features[1].integer && !s.features[0].integer);
        assert!(matches!(
            CsvSchema::from_header(&path, "z", &[], Task::Regression),
            Err(EvalError::MissingColumn(_))
        ));
        assert!(CsvSchema::from_header(&path, "y", &["q".to_owned()], Task::Regression).is_err());
        let x = load_feature_matrix(&path, &s.features[..1], 0).unwrap();
        assert_eq!(x.column(0).to_vec(), vec![1.0, 4.0]);
    }

    #[test]
    fn integer_columns_dequantize_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "i.csv", "n,y\n2,1\n2,0\n5,1\n7,0\n");
        let schema = CsvSchema {
            features: vec![ColumnSpec {
                name: "n".into(),
                integer: true,
            }],
            target: "y".into(),
            task: Task::Binary,
        };
        let ds = load_csv(&path, &schema, None, 0.0, 3).unwrap();
        let floors: Vec<f64> = ds.x().column(0).iter().map(|v| v.floor()).collect();
        assert_eq!(floors, vec![2.0, 2.0, 5.0, 7.0]);
        assert!(ds.x().column(0).iter().any(|v| v.fract() != 0.0));
        let frac = write(dir.path(), "f.csv", "n,y\n2.5,1\n2,0\n");
        assert!(matches!(
            load_csv(&frac, &schema, None, 0.0, 3),
            Err(EvalError::Scm(ScmError::NonIntegral { .. }))
        ));
    }

    #[test]
    fn split_files_and_graph_check() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, scm) = generate_synthetic(60, 40, 5).unwrap();
        let mut a = Vec::new();
        ds.write_csv(ds.train_indices(), "Y", &mut a).unwrap();
        let mut b = Vec::new();
        ds.write_csv(ds.test_indices(), "Y", &mut b).unwrap();
        let pa = write(dir.path(), "train.csv", std::str::from_utf8(&a).unwrap());
        let pb = write(dir.path(), "test.csv", std::str::from_utf8(&b).unwrap());
        let schema = CsvSchema::real(&["W", "Z", "X"], "Y", Task::Regression);
        let back = load_csv_split(&pa, &pb, &schema, Some(scm.graph().clone()), 0).unwrap();
        assert_eq!(back, ds);
        let wrong = CausalGraph::empty(vec!["A".into(), "B".into(), "C".into()]).unwrap();
        assert!(load_csv_split(&pa, &pb, &schema, Some(wrong), 0).is_err());
    }

    #[test]
    fn dataset_invariants() {
        let x = Array2::<f64>::zeros((3, 1));
        let names = vec!["a".to_owned()];
        assert!(Dataset::new(names.clone(), x.clone(), vec![0.0; 3], Task::Regression, vec![0, 1], vec![1]).is_err());
        assert!(Dataset::new(names.clone(), x.clone(), vec![0.0; 3], Task::Regression, vec![0, 1], vec![]).is_err());
        assert!(Dataset::new(names.clone(), x.clone(), vec![f64::NAN, 0.0, 0.0], Task::Regression, vec![0, 1], vec![2]).is_err());
        let ok = Dataset::new(names, x, vec![0.0; 3], Task::Regression, vec![0, 1], vec![2]).unwrap();
        assert_eq!(ok.standardization().std, vec![1.0]);
    }

    #[test]
    fn rankings_validate() {
        assert!(Ranking::new("x", vec![0, 0]).is_err());
        assert!(Ranking::new("x", vec![0, 2]).is_err());
        let names = vec!["a".to_owned(), "b".to_owned()];
        let r = Ranking::from_names("n", &["b".to_owned(), "a".to_owned()], &names).unwrap();
        assert_eq!(r.order, vec![1, 0]);
        assert!(Ranking::from_names("n", &["c".to_owned()], &names).is_err());
        let rs = random_rankings(5, 3, 9);
        assert_eq!(rs, random_rankings(5, 3, 9));
        for r in rs {
            assert!(Ranking::new("copy", r.order).is_ok());
        }
    }

    #[test]
    fn comparison_report_formats() {
        let x = standard_normal(128, 2, 11);
        let model = LinearPredictor::new(vec![2.0, 1.0], 0.0);
        let names = vec!["a".to_owned(), "b".to_owned()];
        let r = Ranking::new("icc", vec![0, 1]).unwrap();
        let same = Ranking::new("copy", vec![0, 1]).unwrap();
        let rep = ComparisonReport::build(&model, x.view(), &[0.0, 0.0], &names, &[r, same], 20, 1).unwrap();
        assert_eq!(rep.pgu["icc"], rep.pgu["copy"]);
        assert!(rep.pgu["icc"].aggregate <= rep.random.as_ref().unwrap().mean_aggregate);
        let json: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(json["rankings"]["icc"][0], "a");
        assert!(json["pgu"]["icc"]["per_k"].is_array());
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "method,k,pgu");
        assert_eq!(text.lines().count(), 1 + 2 * 3);
    }
}
