//! Functional ANOVA (HDMR) decomposition of a predictor with independent inputs
//! on a tensor-product Gauss quadrature grid, Sobol indices, and their
//! Shapley aggregation `sum_{T containing j} S_T / |T|`.
//!
//! Components are built by increasing subset size:
//! `f_T = E[f | x_T] - sum_{T' strict subset of T} f_T'`.
//! The grid is exact for polynomials up to degree `2n - 1` per dimension, so
//! this is an oracle for the Monte Carlo estimators rather than a production
//! path; it is limited to four inputs.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

use crate::graph::{CausalGraph, FeatureSet};
use crate::predictor::{FnPredictor, Predictor};
use crate::scm::{NoiseDist, NoiseSpec, Scm};

pub const MAX_INPUTS: usize = 4;
pub const DEFAULT_NODES: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SobolError {
    #[error("{0} inputs exceed the tensor-grid limit of 4")]
    DimensionTooLarge(usize),
    #[error("need at least one input and one quadrature node")]
    EmptyGrid,
    #[error("predictor reads {model} features, {inputs} input distributions given")]
    FeatureMismatch { model: usize, inputs: usize },
    #[error("non-finite model output at quadrature node {0:?}")]
    QuadratureFailure(Vec<f64>),
    #[error("total variance is zero")]
    ZeroTotalVariance,
    #[error("invalid input distribution: {0}")]
    InvalidInput(String),
}

/// Nodes and probability weights (summing to one) of a Gauss rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Golub-Welsch: eigen-decomposition of the Jacobi matrix with zero diagonal
/// and off-diagonal `beta[k]`, for a probability measure.
fn golub_welsch(beta: impl Fn(usize) -> f64, n: usize) -> Quadrature {
    let jac = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j {
            beta(j)
        } else if j + 1 == i {
            beta(i)
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Quadrature {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1 / total).collect(),
    }
}

/// Uniform measure on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Quadrature {
    golub_welsch(|k| k as f64 / ((4 * k * k - 1) as f64).sqrt(), n)
}

/// Standard normal measure.
pub fn gauss_hermite(n: usize) -> Quadrature {
    golub_welsch(|k| (k as f64).sqrt(), n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InputDist {
    Uniform { lo: f64, hi: f64 },
    Gaussian { mean: f64, std: f64 },
}

impl InputDist {
    pub fn quadrature(&self, n: usize) -> Quadrature {
        match *self {
            InputDist::Uniform { lo, hi } => {
                let mut q = gauss_legendre(n);
                let (mid, half) = ((lo + hi) / 2.0, (hi - lo) / 2.0);
                q.nodes.iter_mut().for_each(|x| *x = mid + half * *x);
                q
            }
            InputDist::Gaussian { mean, std } => {
                let mut q = gauss_hermite(n);
                q.nodes.iter_mut().for_each(|x| *x = mean + std * *x);
                q
            }
        }
    }

    pub fn to_noise(&self) -> Result<NoiseDist<f64>, SobolError> {
        match *self {
            InputDist::Uniform { lo, hi } => NoiseDist::uniform(lo, hi),
            InputDist::Gaussian { mean, std } => NoiseDist::gaussian(mean, std),
        }
        .map_err(SobolError::InvalidInput)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HdmrComponent {
    pub subset: FeatureSet,
    /// `f_T` on the sub-grid of the dimensions in `T`, first dimension slowest.
    pub values: Vec<f64>,
    /// Zero for the empty subset.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HdmrDecomposition {
    quad: Vec<Quadrature>,
    /// Indexed by `FeatureSet::bits`.
    components: Vec<HdmrComponent>,
    mean: f64,
    total_variance: f64,
}

/// Digits of a grid index over `dims`, first dimension most significant.
fn digits(mut index: usize, n: usize, count: usize, out: &mut [usize]) {
    for slot in out[..count].iter_mut().rev() {
        *slot = index % n;
        index /= n;
    }
}

fn subset_index(set: FeatureSet, full_digits: &[usize], n: usize) -> usize {
    set.iter().fold(0, |acc, d| acc * n + full_digits[d])
}

impl HdmrDecomposition {
    pub fn n_inputs(&self) -> usize {
        self.quad.len()
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    pub fn component(&self, subset: FeatureSet) -> &HdmrComponent {
        &self.components[subset.bits() as usize]
    }

    pub fn components(&self) -> &[HdmrComponent] {
        &self.components
    }

    fn nodes_per_dim(&self) -> usize {
        self.quad[0].nodes.len()
    }

    /// `f_T` evaluated at grid digits given for the dimensions of `outer`.
    fn lifted(&self, subset: FeatureSet, outer: FeatureSet, outer_digits: &[usize]) -> f64 {
        let n = self.nodes_per_dim();
        let mut full = [0usize; MAX_INPUTS];
        for (d, &k) in outer.iter().zip(outer_digits) {
            full[d] = k;
        }
        self.component(subset).values[subset_index(subset, &full, n)]
    }

    /// Grid inner product `E[f_T f_T']`.
    pub fn inner_product(&self, a: FeatureSet, b: FeatureSet) -> f64 {
        let n = self.nodes_per_dim();
        let union = FeatureSet::from_bits(a.bits() | b.bits());
        let dims: Vec<usize> = union.iter().collect();
        let mut dg = [0usize; MAX_INPUTS];
        let mut acc = 0.0;
        for idx in 0..n.pow(dims.len() as u32) {
            digits(idx, n, dims.len(), &mut dg);
            let w: f64 = dims.iter().zip(&dg).map(|(&d, &k)| self.quad[d].weights[k]).product();
            acc += w * self.lifted(a, union, &dg[..dims.len()]) * self.lifted(b, union, &dg[..dims.len()]);
        }
        acc
    }

    /// Largest `|E[f_T f_T']|` over distinct non-empty subset pairs.
    pub fn max_cross_product(&self) -> f64 {
        let m = self.components.len() as u64;
        let mut worst = 0.0f64;
        for a in 1..m {
            for b in (a + 1)..m {
                worst = worst.max(self.inner_product(FeatureSet::from_bits(a), FeatureSet::from_bits(b)).abs());
            }
        }
        worst
    }
}

/// Decomposes `model` under independent `inputs` with `nodes` points per dimension.
pub fn hdmr(model: &dyn Predictor<f64>, inputs: &[InputDist], nodes: usize) -> Result<HdmrDecomposition, SobolError> {
    let p = inputs.len();
    if p > MAX_INPUTS {
        return Err(SobolError::DimensionTooLarge(p));
    }
    if p == 0 || nodes == 0 {
        return Err(SobolError::EmptyGrid);
    }
    if model.n_features() != p {
        return Err(SobolError::FeatureMismatch {
            model: model.n_features(),
            inputs: p,
        });
    }
    let n = nodes;
    let quad: Vec<Quadrature> = inputs.iter().map(|d| d.quadrature(n)).collect();
    let total = n.pow(p as u32);

    let values: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let mut dg = [0usize; MAX_INPUTS];
            digits(idx, n, p, &mut dg);
            let x: Vec<f64> = (0..p).map(|d| quad[d].nodes[dg[d]]).collect();
            let y = model.predict_row(&x);
            if y.is_finite() {
                Ok(y)
            } else {
                Err(SobolError::QuadratureFailure(x))
            }
        })
        .collect::<Result<_, _>>()?;

    let full = FeatureSet::full(p);
    let mut components: Vec<HdmrComponent> = Vec::with_capacity(1 << p);
    let mut dg = [0usize; MAX_INPUTS];
    // proper subsets of T have smaller bit patterns, so they are ready first
    for bits in 0..(1u64 << p) {
        let t = FeatureSet::from_bits(bits);
        let size = n.pow(t.len() as u32);
        let mut cond = vec![0.0; size];
        for (idx, &y) in values.iter().enumerate() {
            digits(idx, n, p, &mut dg);
            let w: f64 = full
                .iter()
                .filter(|&d| !t.contains(d))
                .map(|d| quad[d].weights[dg[d]])
                .product();
            cond[subset_index(t, &dg, n)] += w * y;
        }
        let dims: Vec<usize> = t.iter().collect();
        let mut sub = [0usize; MAX_INPUTS];
        for (k, c) in cond.iter_mut().enumerate() {
            digits(k, n, dims.len(), &mut sub);
            let mut fulld = [0usize; MAX_INPUTS];
            for (&d, &v) in dims.iter().zip(&sub) {
                fulld[d] = v;
            }
            for lower in 0..bits {
                let l = FeatureSet::from_bits(lower);
                if l.is_subset(t) {
                    *c -= components[lower as usize].values[subset_index(l, &fulld, n)];
                }
            }
        }
        let variance = if t.is_empty() {
            0.0
        } else {
            cond.iter()
                .enumerate()
                .map(|(k, v)| {
                    digits(k, n, dims.len(), &mut sub);
                    let w: f64 = dims.iter().zip(&sub).map(|(&d, &i)| quad[d].weights[i]).product();
                    w * v * v
                })
                .sum()
        };
        components.push(HdmrComponent {
            subset: t,
            values: cond,
            variance,
        });
    }
    let mean = components[0].values[0];
    let second: f64 = values
        .iter()
        .enumerate()
        .map(|(idx, &y)| {
            digits(idx, n, p, &mut dg);
            let w: f64 = (0..p).map(|d| quad[d].weights[dg[d]]).product();
            w * (y - mean) * (y - mean)
        })
        .sum();
    Ok(HdmrDecomposition {
        quad,
        components,
        mean,
        total_variance: second,
    })
}

/// `S_T = Var(f_T) / Var(f)`.
pub fn sobol_index(d: &HdmrDecomposition, subset: FeatureSet) -> Result<f64, SobolError> {
    if !(d.total_variance > 0.0) {
        return Err(SobolError::ZeroTotalVariance);
    }
    Ok(d.component(subset).variance / d.total_variance)
}

/// `sum_{T subset of I} S_T`, the explained-variance share of the inputs in `I`.
pub fn closed_index(d: &HdmrDecomposition, set: FeatureSet) -> Result<f64, SobolError> {
    if !(d.total_variance > 0.0) {
        return Err(SobolError::ZeroTotalVariance);
    }
    Ok(d.components
        .iter()
        .filter(|c| c.subset.is_subset(set))
        .map(|c| c.variance)
        .sum::<f64>()
        / d.total_variance)
}

/// `sum_{T containing j} S_T / |T|`; zero when the total variance vanishes.
pub fn sobol_to_shapley(d: &HdmrDecomposition, j: usize) -> f64 {
    if !(d.total_variance > 0.0) {
        return 0.0;
    }
    d.components
        .iter()
        .filter(|c| c.subset.contains(j))
        .map(|c| c.variance / c.subset.len() as f64)
        .sum::<f64>()
        / d.total_variance
}

/// Built-in functions of independent inputs with known decompositions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TestFunction {
    /// `x1 + x2`, standard normal inputs.
    Additive,
    /// `x1 * x2`, standard normal inputs.
    Interaction,
    /// `sin x1 + a sin^2 x2 + b x3^4 sin x1` on `Uniform(-pi, pi)^3`.
    Ishigami { a: f64, b: f64 },
}

pub const ISHIGAMI: TestFunction = TestFunction::Ishigami { a: 7.0, b: 0.1 };

pub type BoxedPredictor = Box<dyn Predictor<f64>>;

impl TestFunction {
    pub fn name(&self) -> &'static str {
        match self {
            TestFunction::Additive => "additive",
            TestFunction::Interaction => "interaction",
            TestFunction::Ishigami { .. } => "ishigami",
        }
    }

    pub fn inputs(&self) -> Vec<InputDist> {
        let normal = InputDist::Gaussian { mean: 0.0, std: 1.0 };
        match self {
            TestFunction::Additive | TestFunction::Interaction => vec![normal; 2],
            TestFunction::Ishigami { .. } => vec![
                InputDist::Uniform {
                    lo: -std::f64::consts::PI,
                    hi: std::f64::consts::PI,
                };
                3
            ],
        }
    }

    pub fn predictor(&self) -> BoxedPredictor {
        match *self {
            TestFunction::Additive => Box::new(FnPredictor::new(2, |x: &[f64]| x[0] + x[1])),
            TestFunction::Interaction => Box::new(FnPredictor::new(2, |x: &[f64]| x[0] * x[1])),
            TestFunction::Ishigami { a, b } => Box::new(FnPredictor::new(3, move |x: &[f64]| {
                x[0].sin() + a * x[1].sin().powi(2) + b * x[2].powi(4) * x[0].sin()
            })),
        }
    }

    /// Empty-graph SCM whose noises are the inputs and whose features copy them.
    pub fn scm(&self) -> Result<Scm<f64>, SobolError> {
        let inputs = self.inputs();
        let names = (1..=inputs.len()).map(|i| format!("x{i}")).collect();
        let graph = CausalGraph::empty(names).map_err(|e| SobolError::InvalidInput(e.to_string()))?;
        let noise = inputs.iter().map(InputDist::to_noise).collect::<Result<_, _>>()?;
        Scm::linear(graph, &[], NoiseSpec::new(noise)).map_err(|e| SobolError::InvalidInput(e.to_string()))
    }

    pub fn decompose(&self, nodes: usize) -> Result<HdmrDecomposition, SobolError> {
        hdmr(self.predictor().as_ref(), &self.inputs(), nodes)
    }
}

/// Closed-form Ishigami component variances `(V1, V2, V13, total)`; every
/// other component vanishes.
pub fn ishigami_variances(a: f64, b: f64) -> (f64, f64, f64, f64) {
    let pi4 = std::f64::consts::PI.powi(4);
    let pi8 = pi4 * pi4;
    let v1 = 0.5 * (1.0 + b * pi4 / 5.0).powi(2);
    let v2 = a * a / 8.0;
    let v13 = b * b * pi8 * 8.0 / 225.0;
    let total = a * a / 8.0 + b * pi4 / 5.0 + b * b * pi8 / 18.0 + 0.5;
    (v1, v2, v13, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn set(ix: &[usize]) -> FeatureSet {
        ix.iter().copied().collect()
    }

    fn norm(c: &HdmrComponent) -> f64 {
        c.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn legendre_rule_integrates_polynomials() {
        let q = gauss_legendre(8);
        assert!((q.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        // E[x^k] under Uniform(-1, 1) is 1/(k+1) for even k
        for k in 0..16 {
            let m: f64 = q.nodes.iter().zip(&q.weights).map(|(x, w)| w * x.powi(k)).sum();
            let want = if k % 2 == 0 { 1.0 / (k as f64 + 1.0) } else { 0.0 };
            assert!((m - want).abs() < 1e-13, "k={k}: {m}");
        }
    }

    #[test]
    fn hermite_rule_matches_normal_moments() {
        let q = gauss_hermite(20);
        // E[x^(2k)] = (2k-1)!!
        let mut dfact = 1.0;
        for k in 0..20 {
            let m: f64 = q.nodes.iter().zip(&q.weights).map(|(x, w)| w * x.powi(2 * k)).sum();
            if k > 0 {
                dfact *= (2 * k - 1) as f64;
            }
            assert!((m - dfact).abs() < 1e-9 * dfact, "k={k}: {m} vs {dfact}");
        }
    }

    #[test]
    fn additive_function_components() {
        let d = TestFunction::Additive.decompose(16).unwrap();
        assert!(d.mean().abs() < 1e-12);
        assert!(norm(d.component(set(&[0, 1]))) < 1e-8);
        let f1 = d.component(set(&[0]));
        let q = gauss_hermite(16);
        for (v, x) in f1.values.iter().zip(&q.nodes) {
            assert!((v - x).abs() < 1e-10);
        }
        assert!((sobol_index(&d, set(&[0])).unwrap() - 0.5).abs() < 1e-10);
        assert!((sobol_index(&d, set(&[1])).unwrap() - 0.5).abs() < 1e-10);
        assert!(sobol_index(&d, set(&[0, 1])).unwrap().abs() < 1e-12);
        assert!((sobol_to_shapley(&d, 0) - 0.5).abs() < 1e-10);
        assert!((sobol_to_shapley(&d, 1) - 0.5).abs() < 1e-10);
    }

    #[test]
    fn pure_interaction_components() {
        let d = TestFunction::Interaction.decompose(16).unwrap();
        assert!(norm(d.component(set(&[0]))) < 1e-8);
        assert!(norm(d.component(set(&[1]))) < 1e-8);
        assert!((sobol_index(&d, set(&[0, 1])).unwrap() - 1.0).abs() < 1e-10);
        assert!((sobol_to_shapley(&d, 0) - 0.5).abs() < 1e-10);
        assert!((sobol_to_shapley(&d, 1) - 0.5).abs() < 1e-10);
    }

    #[test]
    fn ishigami_matches_closed_form() {
        let d = ISHIGAMI.decompose(DEFAULT_NODES).unwrap();
        let (v1, v2, v13, total) = ishigami_variances(7.0, 0.1);
        let rel = |got: f64, want: f64| (got - want).abs() / want;
        assert!(rel(d.component(set(&[0])).variance, v1) < 1e-4);
        assert!(rel(d.component(set(&[1])).variance, v2) < 1e-4);
        assert!(rel(d.component(set(&[0, 2])).variance, v13) < 1e-4);
        assert!(rel(d.total_variance(), total) < 1e-4);
        for s in [set(&[2]), set(&[0, 1]), set(&[1, 2]), set(&[0, 1, 2])] {
            assert!(d.component(s).variance < 1e-10 * total, "{s:?}");
        }
        let s1 = v1 / total;
        let s13 = v13 / total;
        assert!((sobol_to_shapley(&d, 0) - (s1 + s13 / 2.0)).abs() < 1e-6);
        assert!((sobol_to_shapley(&d, 2) - s13 / 2.0).abs() < 1e-6);
    }

    #[test]
    fn closed_form_is_self_consistent() {
        let (v1, v2, v13, total) = ishigami_variances(7.0, 0.1);
        assert!((v1 + v2 + v13 - total).abs() < 1e-12);
        assert!((v2 - 49.0 / 8.0).abs() < 1e-15);
        assert!((v1 - 0.5 * (1.0 + 0.1 * PI.powi(4) / 5.0).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn components_are_orthogonal_and_complete() {
        for f in [TestFunction::Additive, TestFunction::Interaction, ISHIGAMI] {
            let nodes = if matches!(f, TestFunction::Ishigami { .. }) { 24 } else { 12 };
            let d = f.decompose(nodes).unwrap();
            assert!(d.max_cross_product() < 1e-6, "{}", f.name());
            let sum: f64 = d.components().iter().map(|c| c.variance).sum();
            assert!((sum - d.total_variance()).abs() < 1e-6 * d.total_variance().max(1.0));
            let shap: f64 = (0..d.n_inputs()).map(|j| sobol_to_shapley(&d, j)).sum();
            assert!((shap - 1.0).abs() < 1e-6);
            let full = FeatureSet::full(d.n_inputs());
            assert!((closed_index(&d, full).unwrap() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn four_inputs_and_limits() {
        let model = FnPredictor::new(4, |x: &[f64]| x[0] * x[1] + x[2] + 2.0 * x[3] * x[3]);
        let inputs = vec![InputDist::Gaussian { mean: 0.0, std: 1.0 }; 4];
        let d = hdmr(&model, &inputs, 6).unwrap();
        // Var = 1 (x0 x1) + 1 (x2) + 4 Var(x3^2) = 2 + 8
        assert!((d.total_variance() - 10.0).abs() < 1e-9);
        assert!((sobol_index(&d, set(&[3])).unwrap() - 0.8).abs() < 1e-9);

        let five = FnPredictor::new(5, |x: &[f64]| x[0]);
        assert_eq!(
            hdmr(&five, &[InputDist::Gaussian { mean: 0.0, std: 1.0 }; 5], 4).unwrap_err(),
            SobolError::DimensionTooLarge(5)
        );
        let bad = FnPredictor::new(1, |x: &[f64]| 1.0 / x[0].abs().min(0.0));
        assert!(matches!(
            hdmr(&bad, &[InputDist::Uniform { lo: -1.0, hi: 1.0 }], 4),
            Err(SobolError::QuadratureFailure(_))
        ));
        let constant = FnPredictor::new(1, |_: &[f64]| 3.0);
        let d = hdmr(&constant, &[InputDist::Uniform { lo: 0.0, hi: 1.0 }], 4).unwrap();
        assert_eq!(sobol_index(&d, set(&[0])), Err(SobolError::ZeroTotalVariance));
        assert_eq!(sobol_to_shapley(&d, 0), 0.0);
    }

    #[test]
    fn test_function_scms_copy_their_inputs() {
        let scm = ISHIGAMI.scm().unwrap();
        assert_eq!(scm.len(), 3);
        assert!(scm.graph().edges().is_empty());
        let (u, x) = scm.sample(16, &crate::sampler::PointSource::default()).unwrap();
        assert_eq!(u, x);
        assert!(x.iter().all(|v| v.abs() <= PI));
    }
}
