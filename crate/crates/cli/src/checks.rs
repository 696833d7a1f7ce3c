//! Executable property checks on built-in oracles. Each check returns its
//! measurements with the tolerance each must stay under; `verify` and the
//! acceptance harness both run these.

use std::collections::BTreeSet;
use std::fmt;

use anyhow::{ensure, Result};
use causal_icc::estimator::{phi_scm, replicate, Spread};
use causal_icc::eval::{fit_model, generate_synthetic, ComparisonReport, Ranking, DEFAULT_TEST_ROWS, DEFAULT_TRAIN_ROWS};
use causal_icc::graph::{CausalGraph, FeatureSet};
use causal_icc::icc::{feature_spreads, icc_shapley, icc_topological, AttributionReport, IccConfig};
use causal_icc::predictor::{FnPredictor, LinearPredictor, Predictor, TrainConfig};
use causal_icc::rng::{derive_seed, rng_from_seed};
use causal_icc::sampler::{PointSource, Scramble};
use causal_icc::scm::{Mechanism, NoiseDist, NoiseSpec, Scm};
use causal_icc::scm_learn::{fit_anm, FitOptions};
use causal_icc::sobol::{ishigami_variances, sobol_to_shapley, TestFunction, DEFAULT_NODES, ISHIGAMI};
use rand::Rng;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CheckId {
    Calibration,
    LinearOracle,
    Efficiency,
    Nullity,
    Symmetry,
    SobolEquivalence,
    Identifiability,
    Rqmc,
    Enumeration,
    LearnedBackend,
    PguDirection,
}

impl CheckId {
    pub const ALL: [CheckId; 11] = [
        CheckId::Calibration,
        CheckId::LinearOracle,
        CheckId::Efficiency,
        CheckId::Nullity,
        CheckId::Symmetry,
        CheckId::SobolEquivalence,
        CheckId::Identifiability,
        CheckId::Rqmc,
        CheckId::Enumeration,
        CheckId::LearnedBackend,
        CheckId::PguDirection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckId::Calibration => "calibration",
            CheckId::LinearOracle => "linear-oracle",
            CheckId::Efficiency => "efficiency",
            CheckId::Nullity => "nullity",
            CheckId::Symmetry => "symmetry",
            CheckId::SobolEquivalence => "sobol-equivalence",
            CheckId::Identifiability => "identifiability",
            CheckId::Rqmc => "rqmc",
            CheckId::Enumeration => "enumeration",
            CheckId::LearnedBackend => "learned-backend",
            CheckId::PguDirection => "pgu-direction",
        }
    }
}

impl fmt::Display for CheckId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Measurement {
    pub label: String,
    pub observed: f64,
    pub tolerance: f64,
    /// Pass on `observed <= tolerance` rather than `<`.
    pub inclusive: bool,
}

impl Measurement {
    fn below(label: impl Into<String>, observed: f64, tolerance: f64) -> Self {
        Measurement {
            label: label.into(),
            observed,
            tolerance,
            inclusive: false,
        }
    }

    fn at_most(label: impl Into<String>, observed: f64, tolerance: f64) -> Self {
        Measurement {
            inclusive: true,
            ..Measurement::below(label, observed, tolerance)
        }
    }

    /// `observed / tolerance`; for a zero bound, the sign of `observed`.
    fn slack(&self) -> f64 {
        if self.tolerance > 0.0 {
            self.observed / self.tolerance
        } else if self.observed == 0.0 {
            1.0
        } else {
            self.observed.signum() * f64::INFINITY
        }
    }

    pub fn passed(&self) -> bool {
        if self.inclusive {
            self.observed <= self.tolerance
        } else {
            self.observed < self.tolerance
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub check: CheckId,
    pub measurements: Vec<Measurement>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.measurements.iter().all(Measurement::passed)
    }

    /// The measurement closest to (or furthest past) its bound, relative to
    /// the bound.
    pub fn worst(&self) -> Option<&Measurement> {
        self.measurements.iter().max_by(|a, b| a.slack().total_cmp(&b.slack()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub seed: u64,
    /// Replaces every Monte Carlo tolerance.
    pub tolerance: Option<f64>,
}

pub fn run(check: CheckId, opts: &CheckOptions) -> Result<CheckResult> {
    let s = opts.seed;
    let mut measurements = match check {
        CheckId::Calibration => calibration(s)?,
        CheckId::LinearOracle => linear_oracle(s)?,
        CheckId::Efficiency => efficiency(s)?,
        CheckId::Nullity => nullity(s)?,
        CheckId::Symmetry => symmetry(s)?,
        CheckId::SobolEquivalence => sobol_equivalence(s)?,
        CheckId::Identifiability => identifiability(s)?,
        CheckId::Rqmc => rqmc(s)?,
        CheckId::Enumeration => enumeration(s)?,
        CheckId::LearnedBackend => learned_backend(s)?,
        CheckId::PguDirection => pgu_direction(s)?,
    };
    if let Some(tol) = opts.tolerance {
        if is_monte_carlo(check) {
            measurements.iter_mut().for_each(|m| m.tolerance = tol);
        }
    }
    Ok(CheckResult { check, measurements })
}

/// Checks whose bounds absorb sampling error; the others compare exact
/// counts or signs.
fn is_monte_carlo(check: CheckId) -> bool {
    !matches!(check, CheckId::Enumeration | CheckId::PguDirection)
}

fn sobol(seed: u64) -> PointSource {
    PointSource::Sobol {
        scramble: Scramble::Owen,
        seed,
    }
}

fn cfg(batch_size: usize, seed: u64) -> IccConfig {
    IccConfig {
        batch_size,
        source: sobol(seed),
        ..IccConfig::default()
    }
}

/// `Var(X)` of the reference linear SCM.
const REFERENCE_VAR_X: f64 = 1.06 * 1.06 + 0.7 * 0.7 + 1.0;

/// Analytic `a_j^2 sigma_j^2 / sum_k a_k^2 sigma_k^2` for `Yhat = X` on the
/// reference linear SCM, where `a_j` is the total path coefficient of `U_j`.
pub fn reference_oracle() -> [f64; 3] {
    [1.06 * 1.06 / REFERENCE_VAR_X, 0.49 / REFERENCE_VAR_X, 1.0 / REFERENCE_VAR_X]
}

fn read_x() -> LinearPredictor<f64> {
    LinearPredictor::new(vec![0.0, 0.0, 1.0], 0.0)
}

fn nonlinear() -> FnPredictor<impl Fn(&[f64]) -> f64 + Send + Sync> {
    FnPredictor::new(3, |x: &[f64]| x[2].tanh() + 0.5 * x[1] * x[1])
}

fn oracle_errors(label: &str, report: &AttributionReport, want: &[f64], tol: f64) -> Vec<Measurement> {
    report
        .features
        .iter()
        .zip(want)
        .map(|(f, w)| Measurement::at_most(format!("{label} {}: |icc - oracle|", f.name), (f.icc_raw - w).abs(), tol))
        .collect()
}

fn calibration(seed: u64) -> Result<Vec<Measurement>> {
    const B: usize = 1 << 14;
    let reference = Scm::<f64>::reference_linear();
    let ishigami = ISHIGAMI.scm()?;
    let ishigami_model = ISHIGAMI.predictor();
    let lin = read_x();
    let nl = nonlinear();
    let cases: [(&str, &Scm<f64>, &dyn Predictor<f64>); 3] = [
        ("reference/linear", &reference, &lin),
        ("reference/nonlinear", &reference, &nl),
        ("ishigami", &ishigami, ishigami_model.as_ref()),
    ];
    let mut out = Vec::new();
    for (k, (label, scm, model)) in cases.into_iter().enumerate() {
        let src = sobol(derive_seed(seed, k as u64));
        let empty = phi_scm(scm, model, FeatureSet::empty(), B, &src)?;
        let full = phi_scm(scm, model, FeatureSet::full(scm.len()), B, &src)?;
        out.push(Measurement::at_most(format!("{label}: |phi(empty)|"), empty.value.abs(), 0.01));
        out.push(Measurement::at_most(format!("{label}: |phi(full) - 1|"), (full.value - 1.0).abs(), 1e-12));
    }
    Ok(out)
}

fn linear_oracle(seed: u64) -> Result<Vec<Measurement>> {
    let scm = Scm::<f64>::reference_linear();
    let model = read_x();
    let c = cfg(1 << 14, seed);
    let want = reference_oracle();
    let mut out = oracle_errors("topological", &icc_topological(&scm, &model, &c)?, &want, 0.02);
    out.extend(oracle_errors("shapley", &icc_shapley(&scm, &model, &c)?, &want, 0.02));
    Ok(out)
}

fn efficiency(seed: u64) -> Result<Vec<Measurement>> {
    let scm = Scm::<f64>::reference_linear();
    let lin = read_x();
    let nl = nonlinear();
    let models: [(&str, &dyn Predictor<f64>); 2] = [("linear", &lin), ("nonlinear", &nl)];
    let mut out = Vec::new();
    for (k, (label, model)) in models.into_iter().enumerate() {
        let c = cfg(1 << 12, derive_seed(seed, k as u64));
        let topo = icc_topological(&scm, model, &c)?;
        out.push(Measurement::below(
            format!("{label}: max per-ordering residual"),
            topo.diagnostics.max_ordering_residual.unwrap_or(f64::INFINITY),
            1e-12,
        ));
        out.push(Measurement::below(
            format!("{label}: topological |sum - 1|"),
            topo.efficiency_residual,
            0.03,
        ));
        let shap = icc_shapley(&scm, model, &c)?;
        out.push(Measurement::below(format!("{label}: shapley |sum - 1|"), shap.efficiency_residual, 0.03));
    }
    Ok(out)
}

fn nullity(seed: u64) -> Result<Vec<Measurement>> {
    const B: usize = 1 << 14;
    // S disconnected from everything the model reads
    let g = CausalGraph::new(&["A", "B", "S"], &[("A", "B")])?;
    let disconnected = Scm::linear(g, &[((0, 1), 0.9)], NoiseSpec::standard_normal(3))?;
    // S caused by A but ignored by the model
    let g = CausalGraph::new(&["A", "B", "S"], &[("A", "B"), ("A", "S")])?;
    let ignored = Scm::linear(g, &[((0, 1), 0.9), ((0, 2), 1.5)], NoiseSpec::standard_normal(3))?;
    let model = FnPredictor::new(3, |x: &[f64]| x[0] + x[1].tanh());
    let mut out = Vec::new();
    for (k, (label, scm)) in [("disconnected", &disconnected), ("ignored", &ignored)].into_iter().enumerate() {
        let c = cfg(B, derive_seed(seed, k as u64));
        let topo = icc_topological(scm, &model, &c)?;
        let shap = icc_shapley(scm, &model, &c)?;
        out.push(Measurement::below(format!("{label}: |ICC^To(S)|"), topo.raw()[2].abs(), 0.01));
        out.push(Measurement::below(format!("{label}: |ICC^Sh(S)|"), shap.raw()[2].abs(), 0.01));
    }
    Ok(out)
}

fn symmetry(seed: u64) -> Result<Vec<Measurement>> {
    let names = vec!["X1".to_owned(), "X2".to_owned()];
    let scm = Scm::linear(CausalGraph::empty(names)?, &[], NoiseSpec::standard_normal(2))?;
    let model = FnPredictor::new(2, |x: &[f64]| x[0] + x[1] + x[0] * x[1]);
    let reps = replicate(20, seed, |s| icc_shapley(&scm, &model, &cfg(1 << 10, s)))?;
    // the two values share estimation blocks, so the standard error is taken on the paired difference
    let diffs: Vec<f64> = reps.iter().map(|r| r.raw()[0] - r.raw()[1]).collect();
    let d = Spread::of(&diffs);
    Ok(vec![Measurement::below(
        "|mean(ICC_1 - ICC_2)| against 2 combined standard errors",
        d.mean.abs(),
        2.0 * d.std_error(),
    )])
}

/// Mean Shapley ICC over `replicates` seeds against the quadrature
/// Sobol-Shapley value of each input, within `max(0.02, 3 SE)`.
pub fn sobol_comparison(
    f: TestFunction,
    nodes: usize,
    batch_size: usize,
    replicates: usize,
    seed: u64,
) -> Result<Vec<Measurement>> {
    let scm = f.scm()?;
    let model = f.predictor();
    let d = f.decompose(nodes)?;
    let reps = replicate(replicates, seed, |s| icc_shapley(&scm, model.as_ref(), &cfg(batch_size, s)))?;
    Ok(feature_spreads(&reps)
        .iter()
        .enumerate()
        .map(|(j, spread)| {
            let oracle = sobol_to_shapley(&d, j);
            Measurement::at_most(
                format!("{} x{}: |ICC^Sh - Sobol-Shapley| (oracle {oracle:.4})", f.name(), j + 1),
                (spread.mean - oracle).abs(),
                (3.0 * spread.std_error()).max(0.02),
            )
        })
        .collect())
}

fn sobol_equivalence(seed: u64) -> Result<Vec<Measurement>> {
    let mut out = Vec::new();
    let functions = [TestFunction::Additive, TestFunction::Interaction, ISHIGAMI];
    for (k, f) in functions.into_iter().enumerate() {
        out.extend(sobol_comparison(f, DEFAULT_NODES, 1 << 12, 10, derive_seed(seed, k as u64))?);
    }
    let TestFunction::Ishigami { a, b } = ISHIGAMI else {
        unreachable!("ISHIGAMI is an Ishigami function")
    };
    let d = ISHIGAMI.decompose(DEFAULT_NODES)?;
    let (v1, v2, v13, total) = ishigami_variances(a, b);
    let set = |ix: &[usize]| ix.iter().copied().collect::<FeatureSet>();
    for (label, got, want) in [
        ("V1", d.component(set(&[0])).variance, v1),
        ("V2", d.component(set(&[1])).variance, v2),
        ("V13", d.component(set(&[0, 2])).variance, v13),
        ("V", d.total_variance(), total),
    ] {
        out.push(Measurement::below(
            format!("ishigami {label}: relative error"),
            ((got - want) / want).abs(),
            1e-4,
        ));
    }
    Ok(out)
}

/// Reference linear SCM with every noise replaced by `h(U)` and the
/// mechanisms reading `h^{-1}`.
pub fn reparameterized_reference(map: &str, inverse: &str) -> Result<Scm<f64>> {
    let g = CausalGraph::new(&["W", "Z", "X"], &[("W", "Z"), ("W", "X"), ("Z", "X")])?;
    let mechs = vec![
        Mechanism::expression(&[], inverse, None)?,
        Mechanism::expression(&["W"], &format!("0.8*W + {inverse}"), None)?,
        Mechanism::expression(&["W", "Z"], &format!("0.5*W + 0.7*Z + {inverse}"), None)?,
    ];
    let noise = (0..3)
        .map(|_| NoiseDist::transformed(NoiseDist::standard_normal(), map))
        .collect::<Result<Vec<_>, _>>()
        .map_err(anyhow::Error::msg)?;
    Ok(Scm::new(g, mechs, NoiseSpec::new(noise))?)
}

fn identifiability(seed: u64) -> Result<Vec<Measurement>> {
    let base = Scm::<f64>::reference_linear();
    let model = nonlinear();
    let run = |scm: &Scm<f64>| -> Result<(Vec<Spread>, Vec<Spread>)> {
        let topo = replicate(20, seed, |s| icc_topological(scm, &model, &cfg(1 << 10, s)))?;
        let shap = replicate(20, seed, |s| icc_shapley(scm, &model, &cfg(1 << 10, s)))?;
        Ok((feature_spreads(&topo), feature_spreads(&shap)))
    };
    let (bt, bs) = run(&base)?;
    let mut out = Vec::new();
    for (map, inverse) in [("u^3", "cbrt(u)"), ("phi(u)", "probit(u)")] {
        let (rt, rs) = run(&reparameterized_reference(map, inverse)?)?;
        for (method, a, b) in [("To", &bt, &rt), ("Sh", &bs, &rs)] {
            for (j, (x, y)) in a.iter().zip(b).enumerate() {
                let se = (x.std_error().powi(2) + y.std_error().powi(2)).sqrt();
                out.push(Measurement::at_most(
                    format!("u -> {map}, ICC^{method} {}: |difference| against 2 SE", base.graph().names()[j]),
                    (x.mean - y.mean).abs(),
                    2.0 * se,
                ));
            }
        }
    }
    Ok(out)
}

fn rqmc(seed: u64) -> Result<Vec<Measurement>> {
    let scm = Scm::<f64>::reference_linear();
    let model = read_x();
    let context: FeatureSet = [0].into_iter().collect();
    let spread = |pseudo: bool| -> Result<f64> {
        let v = replicate(30, seed, |s| {
            let src = if pseudo { PointSource::Pseudo { seed: s } } else { sobol(s) };
            phi_scm(&scm, &model, context, 1 << 10, &src).map(|e| e.value)
        })?;
        Ok(Spread::of(&v).std_dev)
    };
    let (q, p) = (spread(false)?, spread(true)?);
    Ok(vec![Measurement::below(
        format!("sd(scrambled Sobol) / sd(pseudorandom) (sd {q:.2e} vs {p:.2e})"),
        q / p,
        1.0,
    )])
}

/// Every permutation of `0..p` in which each edge points forward.
fn brute_force_orderings(p: usize, edges: &[(usize, usize)]) -> BTreeSet<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, used: &mut [bool], edges: &[(usize, usize)], out: &mut BTreeSet<Vec<usize>>) {
        if prefix.len() == used.len() {
            let pos = |v: usize| prefix.iter().position(|&x| x == v);
            if edges.iter().all(|&(a, b)| pos(a) < pos(b)) {
                out.insert(prefix.clone());
            }
            return;
        }
        for v in 0..used.len() {
            if !used[v] {
                used[v] = true;
                prefix.push(v);
                extend(prefix, used, edges, out);
                prefix.pop();
                used[v] = false;
            }
        }
    }
    let mut out = BTreeSet::new();
    extend(&mut Vec::new(), &mut vec![false; p], edges, &mut out);
    out
}

fn enumeration(seed: u64) -> Result<Vec<Measurement>> {
    let mut mismatches = 0usize;
    let mut total = 0usize;
    for g in 0..200u64 {
        let mut rng = rng_from_seed(derive_seed(seed, g));
        let p = rng.gen_range(1..=6);
        let mut order: Vec<usize> = (0..p).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let density = rng.gen_range(0.0..1.0);
        let mut edges = Vec::new();
        for i in 0..p {
            for j in i + 1..p {
                if rng.gen_bool(density) {
                    edges.push((order[i], order[j]));
                }
            }
        }
        let names = (0..p).map(|i| format!("n{i}")).collect();
        let graph = CausalGraph::from_indices(names, &edges)?;
        let found: Vec<Vec<usize>> = graph
            .enumerate_topological_orderings(usize::MAX)?
            .into_iter()
            .map(|o| o.as_slice().to_vec())
            .collect();
        let unique: BTreeSet<Vec<usize>> = found.iter().cloned().collect();
        let want = brute_force_orderings(p, &edges);
        total += want.len();
        if unique.len() != found.len() || unique != want {
            mismatches += 1;
        }
    }
    ensure!(total > 0, "no orderings generated");
    Ok(vec![Measurement::at_most(
        format!("graphs whose enumeration differs from brute force (of 200, {total} orderings)"),
        mismatches as f64,
        0.0,
    )])
}

fn learned_backend(seed: u64) -> Result<Vec<Measurement>> {
    let truth = Scm::<f64>::reference_linear();
    let (_, data) = truth.sample(5000, &PointSource::Pseudo { seed: derive_seed(seed, 0) })?;
    let fit = fit_anm(
        data.view(),
        truth.graph(),
        &FitOptions {
            seed,
            ..FitOptions::default()
        },
    )?;
    let report = icc_topological(fit.scm(), &read_x(), &cfg(1 << 14, derive_seed(seed, 1)))?;
    Ok(oracle_errors("fitted ANM, topological", &report, &reference_oracle(), 0.05))
}

/// Seed stream of the PFI shuffles in `icc pgu`.
pub const PFI_STREAM: u64 = 1;
/// Seed stream of the random rankings in `icc pgu`.
pub const RANDOM_RANKING_STREAM: u64 = 2;

/// Mean aggregate PGU over every permutation of the features.
fn all_permutation_mean(report_of: impl Fn(&[Ranking]) -> Result<ComparisonReport>, p: usize) -> Result<f64> {
    let free = CausalGraph::empty((0..p).map(|i| format!("f{i}")).collect())?;
    let perms: Vec<Ranking> = free
        .enumerate_topological_orderings(usize::MAX)?
        .into_iter()
        .enumerate()
        .map(|(i, o)| Ranking::new(format!("perm-{i}"), o.as_slice().to_vec()))
        .collect::<Result<_, _>>()?;
    let report = report_of(&perms)?;
    Ok(report.pgu.values().map(|c| c.aggregate).sum::<f64>() / perms.len() as f64)
}

/// Mirrors `icc generate`, `icc train`, `icc icc` and `icc pgu` at their defaults.
fn pgu_direction(seed: u64) -> Result<Vec<Measurement>> {
    let (ds, scm) = generate_synthetic(DEFAULT_TRAIN_ROWS, DEFAULT_TEST_ROWS, seed)?;
    let fitted = fit_model(
        &ds,
        &TrainConfig {
            seed,
            ..TrainConfig::default()
        },
    )?;
    let c = cfg(1 << 12, seed);
    let rankings = [
        Ranking::from_scores("icc-topological", &icc_topological(&scm, &fitted.model, &c)?.raw()),
        Ranking::from_scores("icc-shapley", &icc_shapley(&scm, &fitted.model, &c)?.raw()),
    ];
    let test_x = ds.test_x();
    let baseline = ds.baseline();
    let build = |rs: &[Ranking], n_random: usize| {
        ComparisonReport::build(
            &fitted.model,
            test_x.view(),
            &baseline,
            ds.names(),
            rs,
            n_random,
            derive_seed(seed, RANDOM_RANKING_STREAM),
        )
    };
    let report = build(&rankings, 20)?;
    let exact = all_permutation_mean(|rs| Ok(build(rs, 0)?), ds.n_features())?;
    let random = report.random.as_ref().expect("random baselines requested").mean_aggregate;
    let mut out = Vec::new();
    for r in &rankings {
        let curve = &report.pgu[&r.method];
        out.push(Measurement::at_most(
            format!(
                "{}: aggregate PGU - mean of 20 random ({:.4} vs {random:.4}; all-permutation mean {exact:.4})",
                r.method, curve.aggregate
            ),
            curve.aggregate - random,
            0.0,
        ));
        let rise = curve.per_k.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        out.push(Measurement::at_most(format!("{}: max PGU(k+1) - PGU(k)", r.method), rise, 0.0));
    }
    Ok(out)
}
