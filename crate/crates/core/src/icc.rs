//! Aggregation of context contributions `phi(I + j) - phi(I)` into per-feature
//! attributions.
//!
//! The topological scheme averages the contribution of `j` given its prefix in
//! each topological ordering of the causal graph. The Shapley scheme weights
//! every context `T` not containing `j` by `1 / (p * C(p - 1, |T|))`, exactly
//! for `p <= 20` and by permutation sampling above.
//!
//! All contexts of one ordering (or of the whole Shapley lattice) share a
//! single pair of noise blocks, so the contributions along an ordering
//! telescope to `phi([p]) - phi(empty)` up to rounding.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{EstimatorError, JansenBlocks, PhiEstimate, Spread};
use crate::graph::{CausalGraph, FeatureSet, GraphError, Ordering, DEFAULT_ORDERING_CAP};
use crate::predictor::Predictor;
use crate::rng::derive_seed;
use crate::sampler::{PointSource, Scramble};
use crate::scalar::Real;
use crate::scm::Scm;

/// Largest feature count for which all `2^p` Shapley contexts are evaluated.
pub const EXACT_SHAPLEY_LIMIT: usize = 20;
/// Permutations drawn when the Shapley lattice is too large.
pub const DEFAULT_PERMUTATIONS: usize = 200;
/// Normalization refuses sums at or below this.
const ZERO_SUM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum IccError {
    #[error("attributions sum to {sum:e}; nothing to normalize")]
    AllZero { sum: f64 },
    #[error("{0} must be at least 1")]
    InvalidBudget(&'static str),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report serialization: {0}")]
    Serialize(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Topological,
    Shapley,
}

/// `phi(context + feature) - phi(context)` with both estimates retained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextContribution<T> {
    pub feature: usize,
    pub context: FeatureSet,
    pub value: T,
    pub with: PhiEstimate<T>,
    pub without: PhiEstimate<T>,
}

/// Contribution of `feature` given `context`, both phis from the same blocks.
pub fn contribution<T: Real>(
    blocks: &JansenBlocks<'_, T>,
    feature: usize,
    context: FeatureSet,
) -> Result<ContextContribution<T>, EstimatorError> {
    let without = blocks.phi(context.without(feature))?;
    let with = blocks.phi(context.with(feature))?;
    Ok(ContextContribution {
        feature,
        context: context.without(feature),
        value: with.value - without.value,
        with,
        without,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IccConfig {
    pub batch_size: usize,
    pub source: PointSource,
    /// Orderings enumerated before switching to sampling that many.
    pub ordering_budget: usize,
    /// Permutations sampled when `p > EXACT_SHAPLEY_LIMIT`.
    pub subset_budget: usize,
}

impl Default for IccConfig {
    fn default() -> Self {
        IccConfig {
            batch_size: 1 << 12,
            source: PointSource::default(),
            ordering_budget: DEFAULT_ORDERING_CAP,
            subset_budget: DEFAULT_PERMUTATIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub batch_size: usize,
    pub seed: u64,
    pub point_source: String,
    /// Orderings or permutations averaged; zero for exact Shapley.
    pub orderings_evaluated: usize,
    /// Distinct contexts estimated.
    pub contexts_evaluated: usize,
    /// False when orderings or permutations were sampled rather than enumerated.
    pub exact: bool,
    /// Mean estimate of `phi(empty)`.
    pub phi_empty: f64,
    /// Mean estimate of `phi([p])`.
    pub phi_full: f64,
    /// Mean pooled output variance.
    pub output_variance: f64,
    /// Largest `|sum_j ICC_j - (phi([p]) - phi(empty))|` within a single ordering.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_ordering_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureAttribution {
    pub name: String,
    pub icc_raw: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub icc_normalized: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub method: Method,
    pub features: Vec<FeatureAttribution>,
    pub normalized: bool,
    pub clamped: bool,
    /// `|sum_j icc_raw_j - 1|`.
    pub efficiency_residual: f64,
    pub diagnostics: Diagnostics,
}

impl AttributionReport {
    pub fn raw(&self) -> Vec<f64> {
        self.features.iter().map(|f| f.icc_raw).collect()
    }

    /// Normalized values when present, raw otherwise.
    pub fn values(&self) -> Vec<f64> {
        self.features
            .iter()
            .map(|f| f.icc_normalized.unwrap_or(f.icc_raw))
            .collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.name.as_str()).collect()
    }

    /// Feature indices by decreasing value; ties keep index order.
    pub fn ranking(&self) -> Vec<usize> {
        let v = self.values();
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
        idx
    }

    pub fn to_json(&self) -> Result<String, IccError> {
        serde_json::to_string_pretty(self).map_err(|e| IccError::Serialize(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, IccError> {
        serde_json::from_str(text).map_err(|e| IccError::Serialize(e.to_string()))
    }

    /// `method,feature,icc_raw,icc_normalized` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), IccError> {
        let mut w = csv::Writer::from_writer(out);
        let method = match self.method {
            Method::Topological => "topological",
            Method::Shapley => "shapley",
        };
        let err = |e: csv::Error| IccError::Serialize(e.to_string());
        w.write_record(["method", "feature", "icc_raw", "icc_normalized"]).map_err(err)?;
        for f in &self.features {
            let norm = f.icc_normalized.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([method, &f.name, &f.icc_raw.to_string(), &norm]).map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn describe(source: &PointSource) -> String {
    match source {
        PointSource::Sobol { scramble, .. } => match scramble {
            Scramble::None => "sobol".into(),
            Scramble::Owen => "sobol-owen".into(),
            Scramble::DigitalShift => "sobol-shift".into(),
        },
        PointSource::Pseudo { .. } => "pseudo".into(),
    }
}

/// Per-ordering contributions indexed by feature, plus the phi endpoints.
struct OrderingResult {
    icc: Vec<f64>,
    phi_empty: f64,
    phi_full: f64,
    variance: f64,
    residual: f64,
}

fn evaluate_ordering<T: Real>(
    scm: &Scm<T>,
    model: &dyn Predictor<T>,
    ordering: &Ordering,
    batch_size: usize,
    source: &PointSource,
) -> Result<OrderingResult, EstimatorError> {
    let blocks = JansenBlocks::from_scm(scm, model, batch_size, source)?;
    let order = ordering.as_slice();
    let mut contexts = Vec::with_capacity(order.len() + 1);
    let mut prefix = FeatureSet::empty();
    contexts.push(prefix);
    for &j in order {
        prefix = prefix.with(j);
        contexts.push(prefix);
    }
    let phis: Vec<f64> = contexts
        .iter()
        .map(|&c| blocks.phi(c).map(|e| e.value.as_f64()))
        .collect::<Result<_, _>>()?;
    let mut icc = vec![0.0; order.len()];
    for (pos, &j) in order.iter().enumerate() {
        icc[j] = phis[pos + 1] - phis[pos];
    }
    let (phi_empty, phi_full) = (phis[0], phis[order.len()]);
    let residual = (icc.iter().sum::<f64>() - (phi_full - phi_empty)).abs();
    Ok(OrderingResult {
        icc,
        phi_empty,
        phi_full,
        variance: blocks.variance().as_f64(),
        residual,
    })
}

fn average_orderings<T: Real>(
    scm: &Scm<T>,
    model: &dyn Predictor<T>,
    orderings: &[Ordering],
    cfg: &IccConfig,
    method: Method,
    exact: bool,
) -> Result<AttributionReport, IccError> {
    let p = scm.len();
    let results: Vec<OrderingResult> = orderings
        .par_iter()
        .enumerate()
        .map(|(k, o)| evaluate_ordering(scm, model, o, cfg.batch_size, &cfg.source.for_item(k as u64)))
        .collect::<Result<_, _>>()?;
    let n = results.len() as f64;
    let mut icc = vec![0.0; p];
    let (mut e, mut f, mut v, mut worst) = (0.0, 0.0, 0.0, 0.0f64);
    for r in &results {
        for (acc, x) in icc.iter_mut().zip(&r.icc) {
            *acc += x;
        }
        e += r.phi_empty;
        f += r.phi_full;
        v += r.variance;
        worst = worst.max(r.residual);
    }
    icc.iter_mut().for_each(|x| *x /= n);
    let diagnostics = Diagnostics {
        batch_size: cfg.batch_size,
        seed: cfg.source.seed(),
        point_source: describe(&cfg.source),
        orderings_evaluated: results.len(),
        contexts_evaluated: results.len() * (p + 1),
        exact,
        phi_empty: e / n,
        phi_full: f / n,
        output_variance: v / n,
        max_ordering_residual: Some(worst),
    };
    Ok(build_report(scm.graph(), method, icc, diagnostics))
}

fn build_report(graph: &CausalGraph, method: Method, icc: Vec<f64>, diagnostics: Diagnostics) -> AttributionReport {
    let efficiency_residual = (icc.iter().sum::<f64>() - 1.0).abs();
    AttributionReport {
        method,
        features: graph
            .names()
            .iter()
            .zip(icc)
            .map(|(name, v)| FeatureAttribution {
                name: name.clone(),
                icc_raw: v,
                icc_normalized: None,
            })
            .collect(),
        normalized: false,
        clamped: false,
        efficiency_residual,
        diagnostics,
    }
}

/// Average of `phi(T_pi^j + j) - phi(T_pi^j)` over the topological orderings
/// `pi` of the graph, where `T_pi^j` is the set of features preceding `j`.
///
/// Orderings are enumerated up to `cfg.ordering_budget`; beyond that the same
/// number is sampled and the report is marked inexact.
pub fn icc_topological<T: Real>(
    scm: &Scm<T>,
    model: &dyn Predictor<T>,
    cfg: &IccConfig,
) -> Result<AttributionReport, IccError> {
    if cfg.ordering_budget == 0 {
        return Err(IccError::InvalidBudget("ordering budget"));
    }
    let graph = scm.graph();
    let (orderings, exact) = match graph.enumerate_topological_orderings(cfg.ordering_budget) {
        Ok(all) => (all, true),
        Err(GraphError::TooManyOrderings { .. }) => (
            graph.sample_topological_orderings(cfg.ordering_budget, derive_seed(cfg.source.seed(), u64::MAX)),
            false,
        ),
        Err(e) => return Err(e.into()),
    };
    average_orderings(scm, model, &orderings, cfg, Method::Topological, exact)
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley-weighted contributions over all contexts.
pub fn icc_shapley<T: Real>(
    scm: &Scm<T>,
    model: &dyn Predictor<T>,
    cfg: &IccConfig,
) -> Result<AttributionReport, IccError> {
    let p = scm.len();
    if p > EXACT_SHAPLEY_LIMIT {
        return icc_shapley_sampled(scm, model, cfg);
    }
    let blocks = JansenBlocks::from_scm(scm, model, cfg.batch_size, &cfg.source)?;
    let contexts: Vec<FeatureSet> = (0..1u64 << p).map(FeatureSet::from_bits).collect();
    let phis: Vec<f64> = blocks
        .phi_many(&contexts)?
        .into_iter()
        .map(|e| e.value.as_f64())
        .collect();
    let weights: Vec<f64> = (0..p).map(|t| 1.0 / (p as f64 * binomial(p - 1, t))).collect();
    let mut icc = vec![0.0; p];
    for (bits, &phi) in phis.iter().enumerate() {
        let t = FeatureSet::from_bits(bits as u64);
        for (j, acc) in icc.iter_mut().enumerate() {
            if !t.contains(j) {
                *acc += weights[t.len()] * (phis[t.with(j).bits() as usize] - phi);
            }
        }
    }
    let diagnostics = Diagnostics {
        batch_size: cfg.batch_size,
        seed: cfg.source.seed(),
        point_source: describe(&cfg.source),
        orderings_evaluated: 0,
        contexts_evaluated: contexts.len(),
        exact: true,
        phi_empty: phis[0],
        phi_full: phis[phis.len() - 1],
        output_variance: blocks.variance().as_f64(),
        max_ordering_residual: None,
    };
    Ok(build_report(scm.graph(), Method::Shapley, icc, diagnostics))
}

/// Shapley values by averaging prefix contributions over uniformly random
/// permutations, regardless of the graph.
pub fn icc_shapley_sampled<T: Real>(
    scm: &Scm<T>,
    model: &dyn Predictor<T>,
    cfg: &IccConfig,
) -> Result<AttributionReport, IccError> {
    if cfg.subset_budget == 0 {
        return Err(IccError::InvalidBudget("subset budget"));
    }
    let free = CausalGraph::empty(scm.graph().names().to_vec())?;
    let perms = free.sample_topological_orderings(cfg.subset_budget, derive_seed(cfg.source.seed(), u64::MAX));
    average_orderings(scm, model, &perms, cfg, Method::Shapley, false)
}

/// `|sum_j icc_raw_j - (phi([p]) - phi(empty))|` with the exact targets 1 and 0.
pub fn efficiency_residual(report: &AttributionReport) -> f64 {
    (report.raw().iter().sum::<f64>() - 1.0).abs()
}

/// Rescales raw values to sum to one. With `clamp`, negatives become zero
/// first. The pre-clamp efficiency residual is recorded either way.
pub fn normalize_and_clamp(report: &AttributionReport, clamp: bool) -> Result<AttributionReport, IccError> {
    let raw = report.raw();
    let adjusted: Vec<f64> = if clamp { raw.iter().map(|&v| v.max(0.0)).collect() } else { raw.clone() };
    let sum: f64 = adjusted.iter().sum();
    if !(sum > ZERO_SUM) {
        return Err(IccError::AllZero { sum });
    }
    let mut out = report.clone();
    for (f, v) in out.features.iter_mut().zip(adjusted) {
        f.icc_normalized = Some(v / sum);
    }
    out.normalized = true;
    out.clamped = clamp;
    out.efficiency_residual = efficiency_residual(report);
    Ok(out)
}

/// Per-feature mean and spread of raw values across replicated reports.
pub fn feature_spreads(reports: &[AttributionReport]) -> Vec<Spread> {
    let p = reports.first().map_or(0, |r| r.features.len());
    (0..p)
        .map(|j| Spread::of(&reports.iter().map(|r| r.features[j].icc_raw).collect::<Vec<_>>()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::replicate;
    use crate::predictor::{FnPredictor, LinearPredictor};
    use crate::scm::NoiseSpec;
    use proptest::prelude::*;

    const VAR_Y: f64 = 1.06 * 1.06 + 0.7 * 0.7 + 1.0;

    fn cfg(b: usize, seed: u64) -> IccConfig {
        IccConfig {
            batch_size: b,
            source: PointSource::Sobol {
                scramble: Scramble::Owen,
                seed,
            },
            ..IccConfig::default()
        }
    }

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|i| format!("x{i}")).collect()
    }

    fn independent(p: usize) -> Scm<f64> {
        Scm::linear(CausalGraph::empty(names(p)).unwrap(), &[], NoiseSpec::standard_normal(p)).unwrap()
    }

    fn report_with(raw: &[f64]) -> AttributionReport {
        build_report(
            &CausalGraph::empty(names(raw.len())).unwrap(),
            Method::Topological,
            raw.to_vec(),
            Diagnostics {
                batch_size: 0,
                seed: 0,
                point_source: "none".into(),
                orderings_evaluated: 0,
                contexts_evaluated: 0,
                exact: true,
                phi_empty: 0.0,
                phi_full: 1.0,
                output_variance: 1.0,
                max_ordering_residual: None,
            },
        )
    }

    #[test]
    fn chain_splits_evenly() {
        let g = CausalGraph::new(&["X1", "X2"], &[("X1", "X2")]).unwrap();
        let scm = Scm::linear(g, &[((0, 1), 1.0)], NoiseSpec::standard_normal(2)).unwrap();
        let model = LinearPredictor::new(vec![0.0, 1.0], 0.0);
        let r = icc_topological(&scm, &model, &cfg(1 << 14, 1)).unwrap();
        assert_eq!(r.diagnostics.orderings_evaluated, 1);
        for v in r.raw() {
            assert!((v - 0.5).abs() < 0.02, "{:?}", r.raw());
        }
    }

    #[test]
    fn linear_gaussian_oracle_both_methods() {
        let scm = Scm::<f64>::reference_linear();
        let model = LinearPredictor::new(vec![0.0, 0.0, 1.0], 0.0);
        let want = [1.06 * 1.06 / VAR_Y, 0.49 / VAR_Y, 1.0 / VAR_Y];
        for r in [
            icc_topological(&scm, &model, &cfg(1 << 14, 2)).unwrap(),
            icc_shapley(&scm, &model, &cfg(1 << 14, 2)).unwrap(),
        ] {
            for (got, w) in r.raw().iter().zip(want) {
                assert!((got - w).abs() < 0.02, "{:?} {:?}", r.method, r.raw());
            }
        }
    }

    #[test]
    fn telescoping_is_exact_per_ordering() {
        let scm = Scm::<f64>::reference_linear();
        let model = FnPredictor::new(3, |x: &[f64]| x[2].tanh() + 0.5 * x[1] * x[1]);
        let r = icc_topological(&scm, &model, &cfg(1 << 10, 3)).unwrap();
        assert!(r.diagnostics.max_ordering_residual.unwrap() < 1e-12);
        let ind = independent(4);
        let lin = LinearPredictor::new(vec![1.0, 2.0, -1.0, 0.5], 0.0);
        let r = icc_topological(&ind, &lin, &cfg(256, 3)).unwrap();
        assert_eq!(r.diagnostics.orderings_evaluated, 24);
        assert!(r.diagnostics.max_ordering_residual.unwrap() < 1e-12);
    }

    #[test]
    fn averaged_efficiency_residual() {
        let scm = Scm::<f64>::reference_linear();
        let model = LinearPredictor::new(vec![0.0, 0.0, 1.0], 0.0);
        let r = icc_topological(&scm, &model, &cfg(1 << 12, 4)).unwrap();
        assert!(r.efficiency_residual < 0.03);
        assert_eq!(efficiency_residual(&r), r.efficiency_residual);
    }

    #[test]
    fn unread_features_get_nothing() {
        let g = CausalGraph::new(&["A", "B", "S"], &[("A", "B"), ("A", "S")]).unwrap();
        let scm = Scm::linear(g, &[((0, 1), 0.9), ((0, 2), 1.5)], NoiseSpec::standard_normal(3)).unwrap();
        let model = LinearPredictor::new(vec![1.0, 1.0, 0.0], 0.0);
        for r in [
            icc_topological(&scm, &model, &cfg(1 << 14, 5)).unwrap(),
            icc_shapley(&scm, &model, &cfg(1 << 14, 5)).unwrap(),
        ] {
            assert!(r.raw()[2].abs() < 0.01, "{:?}", r.raw());
        }
    }

    #[test]
    fn empty_graph_topological_equals_shapley() {
        let scm = independent(3);
        let model = FnPredictor::new(3, |x: &[f64]| x[0] + x[1] * x[2] + 0.5 * x[2]);
        let topo: Vec<_> = replicate(20, 6, |s| icc_topological(&scm, &model, &cfg(1 << 10, s))).unwrap();
        let shap: Vec<_> = replicate(20, 7, |s| icc_shapley(&scm, &model, &cfg(1 << 10, s))).unwrap();
        for (a, b) in feature_spreads(&topo).iter().zip(feature_spreads(&shap)) {
            let se = (a.std_error().powi(2) + b.std_error().powi(2)).sqrt();
            assert!((a.mean - b.mean).abs() < 2.0 * se, "{a:?} {b:?}");
        }
    }

    #[test]
    fn exchangeable_features_are_symmetric() {
        let scm = independent(2);
        let model = LinearPredictor::new(vec![1.0, 1.0], 0.0);
        let reps: Vec<_> = replicate(20, 8, |s| icc_shapley(&scm, &model, &cfg(1 << 10, s))).unwrap();
        let s = feature_spreads(&reps);
        let se = (s[0].std_error().powi(2) + s[1].std_error().powi(2)).sqrt();
        assert!((s[0].mean - s[1].mean).abs() < 2.0 * se + 1e-12, "{s:?}");
    }

    #[test]
    fn single_feature_gets_everything() {
        let scm = independent(1);
        let model = FnPredictor::new(1, |x: &[f64]| x[0].sin());
        let r = normalize_and_clamp(&icc_shapley(&scm, &model, &cfg(64, 0)).unwrap(), true).unwrap();
        assert_eq!(r.values(), vec![1.0]);
    }

    #[test]
    fn sampled_shapley_agrees_with_exact() {
        let scm = Scm::<f64>::reference_linear();
        let model = FnPredictor::new(3, |x: &[f64]| x[2].tanh() + 0.5 * x[1] * x[1]);
        let exact = icc_shapley(&scm, &model, &cfg(1 << 12, 9)).unwrap();
        let sampled = icc_shapley_sampled(&scm, &model, &IccConfig {
            subset_budget: 300,
            ..cfg(1 << 10, 9)
        })
        .unwrap();
        assert!(!sampled.diagnostics.exact);
        for (a, b) in exact.raw().iter().zip(sampled.raw()) {
            assert!((a - b).abs() < 0.03, "{:?} {:?}", exact.raw(), sampled.raw());
        }
    }

    #[test]
    fn ordering_budget_switches_to_sampling() {
        let scm = independent(4);
        let model = LinearPredictor::new(vec![1.0; 4], 0.0);
        let r = icc_topological(&scm, &model, &IccConfig {
            ordering_budget: 5,
            ..cfg(256, 1)
        })
        .unwrap();
        assert!(!r.diagnostics.exact);
        assert_eq!(r.diagnostics.orderings_evaluated, 5);
        let bad = IccConfig {
            ordering_budget: 0,
            ..cfg(256, 1)
        };
        assert!(matches!(icc_topological(&scm, &model, &bad), Err(IccError::InvalidBudget(_))));
    }

    #[test]
    fn constant_model_is_an_error() {
        let scm = independent(2);
        let model = LinearPredictor::new(vec![0.0, 0.0], 1.0);
        assert!(matches!(
            icc_shapley(&scm, &model, &cfg(64, 0)),
            Err(IccError::Estimator(EstimatorError::DegenerateVariance { .. }))
        ));
        assert!(matches!(
            normalize_and_clamp(&report_with(&[0.0, 0.0]), true),
            Err(IccError::AllZero { .. })
        ));
        assert!(matches!(
            normalize_and_clamp(&report_with(&[-0.1, 0.0]), true),
            Err(IccError::AllZero { .. })
        ));
    }

    #[test]
    fn clamp_arithmetic() {
        let r = normalize_and_clamp(&report_with(&[0.6, 0.41, -0.01]), true).unwrap();
        let v = r.values();
        assert!((v[0] - 0.6 / 1.01).abs() < 1e-15 && (v[0] - 0.594).abs() < 5e-4);
        assert!((v[1] - 0.406).abs() < 5e-4);
        assert_eq!(v[2], 0.0);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(r.clamped && r.normalized);
        assert_eq!(r.raw(), vec![0.6, 0.41, -0.01]);

        let same = normalize_and_clamp(&report_with(&[0.25, 0.75]), true).unwrap();
        assert_eq!(same.values(), vec![0.25, 0.75]);
        assert_eq!(same.efficiency_residual, 0.0);

        let short = normalize_and_clamp(&report_with(&[0.47, 0.5]), false).unwrap();
        assert!((short.efficiency_residual - 0.03).abs() < 1e-12);
        assert!((short.values().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(!short.clamped);
    }

    #[test]
    fn report_round_trips() {
        let r = normalize_and_clamp(&report_with(&[0.2, 0.8]), true).unwrap();
        let back = AttributionReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["method"], "topological");
        assert_eq!(json["features"][1]["name"], "x1");
        assert_eq!(json["features"][1]["icc_normalized"], 0.8);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "method,feature,icc_raw,icc_normalized");
        assert_eq!(text.lines().nth(2).unwrap(), "topological,x1,0.8,0.8");
        assert_eq!(r.ranking(), vec![1, 0]);
    }

    #[test]
    fn seeded_reports_are_reproducible() {
        let scm = Scm::<f64>::reference_linear();
        let model = LinearPredictor::new(vec![0.3, -0.2, 1.0], 0.0);
        let a = icc_topological(&scm, &model, &cfg(128, 42)).unwrap();
        let b = icc_topological(&scm, &model, &cfg(128, 42)).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| icc_topological(&scm, &model, &cfg(128, 42)).unwrap());
        assert_eq!(a, c);
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(5, 0), 1.0);
        assert_eq!(binomial(5, 2), 10.0);
        assert_eq!(binomial(19, 9), 92378.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn clamped_values_are_a_distribution(raw in prop::collection::vec(-0.2f64..1.0, 1..8)) {
            prop_assume!(raw.iter().map(|v| v.max(0.0)).sum::<f64>() > 1e-6);
            let r = normalize_and_clamp(&report_with(&raw), true).unwrap();
            let v = r.values();
            prop_assert!(v.iter().all(|&x| x >= 0.0));
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!((r.efficiency_residual - (raw.iter().sum::<f64>() - 1.0).abs()).abs() < 1e-15);
        }

        #[test]
        fn shapley_weights_sum_to_one(p in 1usize..=20) {
            let total: f64 = (0..p).map(|t| binomial(p - 1, t) / (p as f64 * binomial(p - 1, t))).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
