//! Structural causal model over the features.
//!
//! Each node `j` has an assignment `x_j = f_j(pa_j, u_j)` that is strictly
//! increasing in its own noise `u_j`, and the noises are mutually independent.
//! Evaluating the assignments in topological order gives the triangular
//! reduced-form map `x = F(u)`; abduction inverts it node by node.

mod file;

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use thiserror::Error;

use crate::expr::{Expr, ExprError};
use crate::graph::{CausalGraph, FeatureSet, GraphError};
use crate::predictor::{Mlp, Predictor};
use crate::rng::rng_from_seed;
use crate::sampler::{inverse_normal_cdf, to_noise, PointSource, SamplerError};
use crate::scalar::Real;

pub use file::{AssignmentFile, MechanismFile, NoiseDistFile, NoiseFile, RegressorFile, ScmFile};

#[derive(Debug, Error)]
pub enum ScmError {
    #[error("invalid noise for node {node}: {reason}")]
    InvalidNoise { node: String, reason: String },
    #[error("mechanism of node {0} produced a non-finite value")]
    NonFiniteValue(String),
    #[error("mechanism of node {0} has no declared inverse")]
    NotInvertible(String),
    #[error("node {node}: {reason}")]
    BadAssignment { node: String, reason: String },
    #[error("expected {expected} values per row, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("value {value} at position {index} is not an integer")]
    NonIntegral { index: usize, value: f64 },
    #[error("scm file: {0}")]
    Parse(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Distribution of one exogenous noise variable, sampled through its quantile
/// function.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseDist<T> {
    Gaussian { mean: T, std: T },
    Uniform { lo: T, hi: T },
    /// Sorted sample table; quantiles interpolate linearly between order statistics.
    Empirical { sorted: Arc<Vec<T>> },
    /// Push-forward of `base` through an increasing map of the variable `u`.
    Transformed { base: Box<NoiseDist<T>>, map: Expr },
}

impl<T: Real> NoiseDist<T> {
    pub fn gaussian(mean: T, std: T) -> Result<Self, String> {
        if !(std > T::zero()) || !mean.is_finite() || !std.is_finite() {
            return Err(format!("gaussian needs finite mean and std > 0, got std {std}"));
        }
        Ok(NoiseDist::Gaussian { mean, std })
    }

    pub fn standard_normal() -> Self {
        NoiseDist::Gaussian {
            mean: T::zero(),
            std: T::one(),
        }
    }

    pub fn uniform(lo: T, hi: T) -> Result<Self, String> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(format!("uniform needs finite lo < hi, got [{lo}, {hi}]"));
        }
        Ok(NoiseDist::Uniform { lo, hi })
    }

    pub fn empirical(mut values: Vec<T>) -> Result<Self, String> {
        if values.is_empty() {
            return Err("empirical table is empty".into());
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err("empirical table has non-finite values".into());
        }
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        Ok(NoiseDist::Empirical {
            sorted: Arc::new(values),
        })
    }

    pub fn transformed(base: NoiseDist<T>, map: &str) -> Result<Self, String> {
        let map = Expr::parse(map, &["u"]).map_err(|e| e.to_string())?;
        Ok(NoiseDist::Transformed {
            base: Box::new(base),
            map,
        })
    }

    /// Inverse CDF at `p` in `[0, 1)`. Unbounded distributions clamp `p` away
    /// from the endpoints by half of the 32-bit grid spacing.
    pub fn quantile(&self, p: T) -> T {
        match self {
            NoiseDist::Gaussian { mean, std } => {
                let half = 0.5 / 4_294_967_296.0;
                let q = p.as_f64().clamp(half, 1.0 - half);
                *mean + *std * T::lit(inverse_normal_cdf(q))
            }
            NoiseDist::Uniform { lo, hi } => *lo + (*hi - *lo) * p,
            NoiseDist::Empirical { sorted } => {
                let n = sorted.len();
                if n == 1 {
                    return sorted[0];
                }
                let pos = p.max(T::zero()).min(T::one()) * T::from_usize_lossy(n - 1);
                let k = pos.floor().to_usize().unwrap_or(0).min(n - 2);
                let frac = pos - T::from_usize_lossy(k);
                sorted[k] + (sorted[k + 1] - sorted[k]) * frac
            }
            NoiseDist::Transformed { base, map } => map.eval(&[base.quantile(p)]),
        }
    }
}

/// One noise distribution per node, in node order.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec<T>(Vec<NoiseDist<T>>);

impl<T: Real> NoiseSpec<T> {
    pub fn new(dists: Vec<NoiseDist<T>>) -> Self {
        NoiseSpec(dists)
    }

    pub fn standard_normal(p: usize) -> Self {
        NoiseSpec(vec![NoiseDist::standard_normal(); p])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, j: usize) -> &NoiseDist<T> {
        &self.0[j]
    }

    pub fn iter(&self) -> impl Iterator<Item = &NoiseDist<T>> {
        self.0.iter()
    }
}

/// Regression function of the parents used by additive mechanisms.
#[derive(Debug, Clone, PartialEq)]
pub enum Regressor<T> {
    /// Weights over [`polynomial_features`] of the parents.
    Polynomial { degree: u32, weights: Vec<T> },
    Mlp(Mlp<T>),
}

impl<T: Real> Regressor<T> {
    pub fn eval(&self, parents: &[T]) -> T {
        match self {
            Regressor::Polynomial { degree, weights } => {
                let mut acc = T::zero();
                let mut k = 0;
                for_each_polynomial_feature(parents, *degree, |f| {
                    acc += weights[k] * f;
                    k += 1;
                });
                acc
            }
            Regressor::Mlp(m) => m.predict_row(parents),
        }
    }

    fn input_check(&self, n_parents: usize) -> Result<(), String> {
        match self {
            Regressor::Polynomial { degree, weights } => {
                let want = polynomial_feature_count(n_parents, *degree);
                if *degree > 2 {
                    Err(format!("polynomial degree {degree} unsupported (max 2)"))
                } else if weights.len() != want {
                    Err(format!("{} polynomial weights, expected {want}", weights.len()))
                } else {
                    Ok(())
                }
            }
            Regressor::Mlp(m) if m.n_features() != n_parents => {
                Err(format!("regressor reads {} inputs, node has {n_parents} parents", m.n_features()))
            }
            Regressor::Mlp(_) => Ok(()),
        }
    }
}

/// Number of features `[1, x_i..., x_i x_k (i <= k)...]` for `degree <= 2`.
pub fn polynomial_feature_count(n: usize, degree: u32) -> usize {
    match degree {
        0 => 1,
        1 => 1 + n,
        _ => 1 + n + n * (n + 1) / 2,
    }
}

pub(crate) fn for_each_polynomial_feature<T: Real>(x: &[T], degree: u32, mut f: impl FnMut(T)) {
    f(T::one());
    if degree >= 1 {
        x.iter().for_each(|&v| f(v));
    }
    if degree >= 2 {
        for i in 0..x.len() {
            for k in i..x.len() {
                f(x[i] * x[k]);
            }
        }
    }
}

pub fn polynomial_features<T: Real>(x: &[T], degree: u32) -> Vec<T> {
    let mut out = Vec::with_capacity(polynomial_feature_count(x.len(), degree));
    for_each_polynomial_feature(x, degree, |v| out.push(v));
    out
}

/// Structural assignment of a node given its parents (ascending index order)
/// and its own noise.
#[derive(Debug, Clone, PartialEq)]
pub enum Mechanism<T> {
    /// `intercept + coefficients . pa + u`.
    Linear { coefficients: Vec<T>, intercept: T },
    /// `f(pa) + u`.
    Additive(Regressor<T>),
    /// Closed form over the parent names and `u`; the inverse is a closed form
    /// over the parent names and `x`.
    Expression { forward: Expr, inverse: Option<Expr> },
    /// Intervened node; ignores parents and noise.
    Constant(T),
}

impl<T: Real> Mechanism<T> {
    /// Parses an expression mechanism for a node with the given parent names.
    pub fn expression(parents: &[&str], forward: &str, inverse: Option<&str>) -> Result<Self, ExprError> {
        let mut fv = parents.to_vec();
        fv.push("u");
        let mut iv = parents.to_vec();
        iv.push("x");
        Ok(Mechanism::Expression {
            forward: Expr::parse(forward, &fv)?,
            inverse: inverse.map(|s| Expr::parse(s, &iv)).transpose()?,
        })
    }

    /// `slots` holds the parent values followed by one free slot.
    fn apply(&self, slots: &mut [T], u: T) -> T {
        let n = slots.len() - 1;
        match self {
            Mechanism::Linear {
                coefficients,
                intercept,
            } => coefficients
                .iter()
                .zip(&slots[..n])
                .fold(*intercept, |acc, (&c, &v)| acc + c * v)
                + u,
            Mechanism::Additive(r) => r.eval(&slots[..n]) + u,
            Mechanism::Expression { forward, .. } => {
                slots[n] = u;
                forward.eval(slots)
            }
            Mechanism::Constant(c) => *c,
        }
    }

    fn invert(&self, slots: &mut [T], x: T) -> Option<T> {
        let n = slots.len() - 1;
        match self {
            Mechanism::Linear {
                coefficients,
                intercept,
            } => Some(
                x - coefficients
                    .iter()
                    .zip(&slots[..n])
                    .fold(*intercept, |acc, (&c, &v)| acc + c * v),
            ),
            Mechanism::Additive(r) => Some(x - r.eval(&slots[..n])),
            Mechanism::Expression { inverse, .. } => inverse.as_ref().map(|inv| {
                slots[n] = x;
                inv.eval(slots)
            }),
            // the noise of an intervened node is never read
            Mechanism::Constant(_) => Some(T::zero()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scm<T> {
    graph: CausalGraph,
    mechanisms: Vec<Mechanism<T>>,
    noise: NoiseSpec<T>,
    order: Vec<usize>,
}

impl<T: Real> Scm<T> {
    pub fn new(graph: CausalGraph, mechanisms: Vec<Mechanism<T>>, noise: NoiseSpec<T>) -> Result<Self, ScmError> {
        let p = graph.len();
        if mechanisms.len() != p || noise.len() != p {
            return Err(ScmError::ShapeMismatch {
                expected: p,
                got: if mechanisms.len() != p { mechanisms.len() } else { noise.len() },
            });
        }
        for (j, m) in mechanisms.iter().enumerate() {
            let k = graph.parents(j).len();
            let bad = |reason: String| ScmError::BadAssignment {
                node: graph.names()[j].clone(),
                reason,
            };
            match m {
                Mechanism::Linear { coefficients, intercept } => {
                    if coefficients.len() != k {
                        return Err(bad(format!("{} coefficients for {k} parents", coefficients.len())));
                    }
                    if !intercept.is_finite() || coefficients.iter().any(|c| !c.is_finite()) {
                        return Err(bad("non-finite coefficient".into()));
                    }
                }
                Mechanism::Additive(r) => r.input_check(k).map_err(bad)?,
                Mechanism::Expression { .. } | Mechanism::Constant(_) => {}
            }
        }
        let order = graph.topological_order().as_slice().to_vec();
        Ok(Scm {
            graph,
            mechanisms,
            noise,
            order,
        })
    }

    /// Linear SCM: `coefficients[(parent, child)]` per edge, zero intercepts.
    pub fn linear(graph: CausalGraph, coefficients: &[((usize, usize), T)], noise: NoiseSpec<T>) -> Result<Self, ScmError> {
        let mechanisms = (0..graph.len())
            .map(|j| Mechanism::Linear {
                coefficients: graph
                    .parents(j)
                    .iter()
                    .map(|&a| {
                        coefficients
                            .iter()
                            .find(|(e, _)| *e == (a, j))
                            .map_or(T::zero(), |(_, c)| *c)
                    })
                    .collect(),
                intercept: T::zero(),
            })
            .collect();
        Scm::new(graph, mechanisms, noise)
    }

    /// `W -> Z -> X`, `W -> X` with `Z = 0.8 W + U_Z`, `X = 0.5 W + 0.7 Z + U_X`,
    /// all noises standard normal.
    pub fn reference_linear() -> Self {
        let g = CausalGraph::new(&["W", "Z", "X"], &[("W", "Z"), ("W", "X"), ("Z", "X")]).expect("acyclic");
        Scm::linear(
            g,
            &[((0, 1), T::lit(0.8)), ((0, 2), T::lit(0.5)), ((1, 2), T::lit(0.7))],
            NoiseSpec::standard_normal(3),
        )
        .expect("valid reference scm")
    }

    pub fn graph(&self) -> &CausalGraph {
        &self.graph
    }

    pub fn mechanisms(&self) -> &[Mechanism<T>] {
        &self.mechanisms
    }

    pub fn noise(&self) -> &NoiseSpec<T> {
        &self.noise
    }

    pub fn len(&self) -> usize {
        self.graph.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.is_empty()
    }

    /// Evaluates `F(u)` for one row.
    pub fn forward_row(&self, u: &[T], x: &mut [T]) -> Result<(), ScmError> {
        let mut slots = Vec::with_capacity(8);
        for &j in &self.order {
            slots.clear();
            slots.extend(self.graph.parents(j).iter().map(|&k| x[k]));
            slots.push(T::zero());
            let v = self.mechanisms[j].apply(&mut slots, u[j]);
            if !v.is_finite() {
                return Err(ScmError::NonFiniteValue(self.graph.names()[j].clone()));
            }
            x[j] = v;
        }
        Ok(())
    }

    /// Row-wise `F(u)`.
    pub fn push_forward(&self, u: ArrayView2<T>) -> Result<Array2<T>, ScmError> {
        if u.ncols() != self.len() {
            return Err(ScmError::ShapeMismatch {
                expected: self.len(),
                got: u.ncols(),
            });
        }
        let mut x = Array2::zeros(u.raw_dim());
        let mut urow = vec![T::zero(); self.len()];
        let mut xrow = vec![T::zero(); self.len()];
        for (ur, mut xr) in u.rows().into_iter().zip(x.rows_mut()) {
            urow.iter_mut().zip(ur.iter()).for_each(|(a, &b)| *a = b);
            self.forward_row(&urow, &mut xrow)?;
            xr.iter_mut().zip(&xrow).for_each(|(a, &b)| *a = b);
        }
        Ok(x)
    }

    /// Noise matrix drawn from `source` and its push-forward.
    pub fn sample(&self, n: usize, source: &PointSource) -> Result<(Array2<T>, Array2<T>), ScmError> {
        let pts = source.unit_points::<T>(self.len(), n)?;
        let u = to_noise(pts.view(), &self.noise)?;
        let x = self.push_forward(u.view())?;
        Ok((u, x))
    }

    /// Recovers `u` with `F(u) = x`, node by node in topological order.
    pub fn abduct(&self, x: &[T]) -> Result<Vec<T>, ScmError> {
        if x.len() != self.len() {
            return Err(ScmError::ShapeMismatch {
                expected: self.len(),
                got: x.len(),
            });
        }
        let mut u = vec![T::zero(); self.len()];
        let mut slots = Vec::with_capacity(8);
        for &j in &self.order {
            slots.clear();
            slots.extend(self.graph.parents(j).iter().map(|&k| x[k]));
            slots.push(T::zero());
            u[j] = self.mechanisms[j]
                .invert(&mut slots, x[j])
                .ok_or_else(|| ScmError::NotInvertible(self.graph.names()[j].clone()))?;
        }
        Ok(u)
    }

    pub fn abduct_matrix(&self, x: ArrayView2<T>) -> Result<Array2<T>, ScmError> {
        let mut u = Array2::zeros(x.raw_dim());
        for (xr, mut ur) in x.rows().into_iter().zip(u.rows_mut()) {
            let row = self.abduct(&xr.to_vec())?;
            ur.iter_mut().zip(row).for_each(|(a, b)| *a = b);
        }
        Ok(u)
    }

    /// Mutilated model: each target becomes a constant and loses its incoming edges.
    pub fn intervene(&self, assignments: &[(usize, T)]) -> Result<Scm<T>, ScmError> {
        let targets: FeatureSet = assignments.iter().map(|&(j, _)| j).collect();
        if let Some(&(j, _)) = assignments.iter().find(|(j, _)| *j >= self.len()) {
            return Err(ScmError::ShapeMismatch {
                expected: self.len(),
                got: j,
            });
        }
        let graph = self.graph.mutilate(targets);
        let mut mechanisms = self.mechanisms.clone();
        for &(j, v) in assignments {
            mechanisms[j] = Mechanism::Constant(v);
        }
        Scm::new(graph, mechanisms, self.noise.clone())
    }
}

/// Adds `Uniform[0, 1)` noise to an integer-valued column so that
/// `floor(output) == input` holds exactly.
pub fn dequantize<T: Real>(column: &[T], seed: u64) -> Result<Vec<T>, ScmError> {
    let mut rng = rng_from_seed(seed);
    column
        .iter()
        .enumerate()
        .map(|(index, &v)| {
            if !v.is_finite() || v.fract() != T::zero() {
                return Err(ScmError::NonIntegral {
                    index,
                    value: v.as_f64(),
                });
            }
            loop {
                let out = v + T::lit(rng.gen::<f64>());
                // rounding can land on v + 1 for large |v|; redraw
                if out.floor() == v {
                    return Ok(out);
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests;
