//! Jansen estimator of `phi(I) = Var(E[Y | U_I]) / Var(Y)`.
//!
//! Two independent blocks `M`, `N` of `B` rows each are drawn. The hybrid block
//! `Q` takes the coordinates in `I` from `N` and the rest from `M`. With
//! `ybar` the pooled mean of `y_M` and `y_N`,
//!
//! ```text
//! V   = (sum (y_M - ybar)^2 + sum (y_N - ybar)^2) / (2B - 1)
//! psi = V - sum (y_N - y_Q)^2 / (2B)
//! phi = psi / V
//! ```
//!
//! The SCM backend draws noise vectors and pushes them through the structural
//! equations; the data backend draws rows of a feature matrix and is only
//! valid when the coordinates outside the context are independent of those
//! inside it.

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{CausalGraph, FeatureSet};
use crate::predictor::{Predictor, PredictorError};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sampler::{to_noise, PointSource, SamplerError};
use crate::scalar::Real;
use crate::scm::{Scm, ScmError};

/// Output variance below this is treated as a constant predictor.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("output variance {variance:e} is below 1e-12; the predictor is constant on the sample")]
    DegenerateVariance { variance: f64 },
    #[error("batch size must be at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("need {needed} rows for two disjoint blocks, have {available}")]
    InsufficientRows { needed: usize, available: usize },
    #[error("context {0:?} is not ancestor-closed; use the SCM backend or declare the features independent")]
    ContextNotAncestorClosed(FeatureSet),
    #[error("context {context:?} has indices outside 0..{p}")]
    ContextOutOfRange { context: FeatureSet, p: usize },
    #[error("predictor reads {model} features, the input has {input}")]
    FeatureMismatch { model: usize, input: usize },
    #[error("non-finite predictor output")]
    NonFiniteOutput,
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Scm,
    Data,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiEstimate<T> {
    /// `psi / variance`, unclamped.
    pub value: T,
    pub psi: T,
    /// Pooled variance of `y_M` and `y_N`.
    pub variance: T,
    pub batch_size: usize,
    pub context: FeatureSet,
    pub backend: Backend,
    pub seed: u64,
}

/// How the data backend may treat a context.
#[derive(Debug, Clone, Copy)]
pub enum DataAssumption<'a> {
    /// Contexts must be ancestor-closed in this graph.
    Graph(&'a CausalGraph),
    /// All features are mutually independent; any context is accepted.
    Independent,
}

/// The two sample blocks shared by every context of one estimate batch.
///
/// `a` and `b` hold noise rows (SCM backend) or feature rows (data backend).
pub struct JansenBlocks<'m, T: Real> {
    a: Array2<T>,
    b: Array2<T>,
    y_a: Vec<T>,
    y_b: Vec<T>,
    variance: T,
    model: &'m dyn Predictor<T>,
    scm: Option<&'m Scm<T>>,
    backend: Backend,
    seed: u64,
}

fn check_outputs<T: Real>(y: &[T]) -> Result<(), EstimatorError> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EstimatorError::NonFiniteOutput)
    }
}

fn pooled_variance<T: Real>(y_a: &[T], y_b: &[T]) -> T {
    let n = y_a.len() + y_b.len();
    let mean = y_a.iter().chain(y_b).copied().sum::<T>() / T::from_usize_lossy(n);
    let ss = y_a.iter().chain(y_b).map(|&y| (y - mean) * (y - mean)).sum::<T>();
    ss / T::from_usize_lossy(n - 1)
}

impl<'m, T: Real> JansenBlocks<'m, T> {
    /// Draws `u_M` and `u_N` as the two halves of one `2p`-dimensional point set.
    pub fn from_scm(
        scm: &'m Scm<T>,
        model: &'m dyn Predictor<T>,
        batch_size: usize,
        source: &PointSource,
    ) -> Result<Self, EstimatorError> {
        if batch_size < 2 {
            return Err(EstimatorError::BatchTooSmall(batch_size));
        }
        let p = scm.len();
        if model.n_features() != p {
            return Err(EstimatorError::FeatureMismatch {
                model: model.n_features(),
                input: p,
            });
        }
        let pts = source.unit_points::<T>(2 * p, batch_size)?;
        let a = to_noise(pts.slice(s![.., ..p]), scm.noise())?;
        let b = to_noise(pts.slice(s![.., p..]), scm.noise())?;
        let y_a = model.predict(scm.push_forward(a.view())?.view())?;
        let y_b = model.predict(scm.push_forward(b.view())?.view())?;
        Self::finish(a, b, y_a, y_b, model, Some(scm), Backend::Scm, source.seed())
    }

    /// Draws two disjoint blocks of rows of `data` without replacement.
    pub fn from_data(
        data: ArrayView2<T>,
        model: &'m dyn Predictor<T>,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self, EstimatorError> {
        if batch_size < 2 {
            return Err(EstimatorError::BatchTooSmall(batch_size));
        }
        if model.n_features() != data.ncols() {
            return Err(EstimatorError::FeatureMismatch {
                model: model.n_features(),
                input: data.ncols(),
            });
        }
        if 2 * batch_size > data.nrows() {
            return Err(EstimatorError::InsufficientRows {
                needed: 2 * batch_size,
                available: data.nrows(),
            });
        }
        let mut idx: Vec<usize> = (0..data.nrows()).collect();
        idx.shuffle(&mut rng_from_seed(seed));
        let a = data.select(ndarray::Axis(0), &idx[..batch_size]);
        let b = data.select(ndarray::Axis(0), &idx[batch_size..2 * batch_size]);
        let y_a = model.predict(a.view())?;
        let y_b = model.predict(b.view())?;
        Self::finish(a, b, y_a, y_b, model, None, Backend::Data, seed)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        a: Array2<T>,
        b: Array2<T>,
        y_a: Vec<T>,
        y_b: Vec<T>,
        model: &'m dyn Predictor<T>,
        scm: Option<&'m Scm<T>>,
        backend: Backend,
        seed: u64,
    ) -> Result<Self, EstimatorError> {
        check_outputs(&y_a)?;
        check_outputs(&y_b)?;
        let variance = pooled_variance(&y_a, &y_b);
        if !(variance.as_f64() >= DEGENERATE_VARIANCE) {
            return Err(EstimatorError::DegenerateVariance {
                variance: variance.as_f64(),
            });
        }
        Ok(JansenBlocks {
            a,
            b,
            y_a,
            y_b,
            variance,
            model,
            scm,
            backend,
            seed,
        })
    }

    pub fn n_features(&self) -> usize {
        self.a.ncols()
    }

    pub fn batch_size(&self) -> usize {
        self.a.nrows()
    }

    pub fn variance(&self) -> T {
        self.variance
    }

    /// Estimate for one context against the shared blocks.
    pub fn phi(&self, context: FeatureSet) -> Result<PhiEstimate<T>, EstimatorError> {
        let p = self.n_features();
        if !context.is_subset(FeatureSet::full(p)) {
            return Err(EstimatorError::ContextOutOfRange { context, p });
        }
        let bsz = self.batch_size();
        let sq_sum = if context == FeatureSet::full(p) {
            // y_Q is y_N exactly
            T::zero()
        } else if context.is_empty() {
            self.y_a
                .iter()
                .zip(&self.y_b)
                .map(|(&m, &n)| (n - m) * (n - m))
                .sum::<T>()
        } else {
            let mut q = self.a.clone();
            for j in context.iter() {
                q.column_mut(j).assign(&self.b.column(j));
            }
            let y_q = match self.scm {
                Some(scm) => self.model.predict(scm.push_forward(q.view())?.view())?,
                None => self.model.predict(q.view())?,
            };
            check_outputs(&y_q)?;
            self.y_b.iter().zip(&y_q).map(|(&n, &q)| (n - q) * (n - q)).sum::<T>()
        };
        let psi = self.variance - sq_sum / T::from_usize_lossy(2 * bsz);
        Ok(PhiEstimate {
            value: psi / self.variance,
            psi,
            variance: self.variance,
            batch_size: bsz,
            context,
            backend: self.backend,
            seed: self.seed,
        })
    }

    /// Estimates for every context; order matches the input.
    pub fn phi_many(&self, contexts: &[FeatureSet]) -> Result<Vec<PhiEstimate<T>>, EstimatorError> {
        contexts.par_iter().map(|&c| self.phi(c)).collect()
    }
}

/// `phi(I)` through the structural equations of `scm`.
pub fn phi_scm<T: Real>(
    scm: &Scm<T>,
    model: &dyn Predictor<T>,
    context: FeatureSet,
    batch_size: usize,
    source: &PointSource,
) -> Result<PhiEstimate<T>, EstimatorError> {
    JansenBlocks::from_scm(scm, model, batch_size, source)?.phi(context)
}

/// `phi(I)` by resampling rows of `data`.
pub fn phi_data<T: Real>(
    data: ArrayView2<T>,
    model: &dyn Predictor<T>,
    context: FeatureSet,
    batch_size: usize,
    seed: u64,
    assumption: DataAssumption<'_>,
) -> Result<PhiEstimate<T>, EstimatorError> {
    check_data_context(context, assumption)?;
    JansenBlocks::from_data(data, model, batch_size, seed)?.phi(context)
}

fn check_data_context(context: FeatureSet, assumption: DataAssumption<'_>) -> Result<(), EstimatorError> {
    match assumption {
        DataAssumption::Graph(g) if !g.is_ancestor_closed(context) => {
            Err(EstimatorError::ContextNotAncestorClosed(context))
        }
        _ => Ok(()),
    }
}

/// Where a batch of estimates draws its samples from.
#[derive(Clone, Copy)]
pub enum PhiBackend<'a, T: Real> {
    Scm { scm: &'a Scm<T>, source: PointSource },
    Data {
        data: ArrayView2<'a, T>,
        seed: u64,
        assumption: DataAssumption<'a>,
    },
}

/// All contexts share one `(M, N)` block pair.
pub fn phi_batch<T: Real>(
    backend: PhiBackend<'_, T>,
    model: &dyn Predictor<T>,
    contexts: &[FeatureSet],
    batch_size: usize,
) -> Result<Vec<PhiEstimate<T>>, EstimatorError> {
    if contexts.is_empty() {
        return Ok(Vec::new());
    }
    let blocks = match backend {
        PhiBackend::Scm { scm, source } => JansenBlocks::from_scm(scm, model, batch_size, &source)?,
        PhiBackend::Data { data, seed, assumption } => {
            for &c in contexts {
                check_data_context(c, assumption)?;
            }
            JansenBlocks::from_data(data, model, batch_size, seed)?
        }
    };
    blocks.phi_many(contexts)
}

/// Sample mean and standard deviation of replicated estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    /// Unbiased; the standard error of a single replicate.
    pub std_dev: f64,
    pub n: usize,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = if n == 0 { 0.0 } else { values.iter().sum::<f64>() / n as f64 };
        let var = if n < 2 {
            0.0
        } else {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        };
        Spread {
            mean,
            std_dev: var.sqrt(),
            n,
        }
    }

    /// Standard error of `mean`.
    pub fn std_error(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.std_dev / (self.n as f64).sqrt()
        }
    }
}

/// Runs `f` for seeds `derive_seed(base, 0..n)` in parallel; results in seed order.
pub fn replicate<R, E, F>(n: usize, base_seed: u64, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(u64) -> Result<R, E> + Sync,
{
    (0..n as u64)
        .into_par_iter()
        .map(|i| f(derive_seed(base_seed, i)))
        .collect()
}
