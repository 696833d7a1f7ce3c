//! Additive-noise SCMs learned from data on a known graph.
//!
//! Each node is regressed on its parents, `X_j = f_j(PA_j) + U_j`, and `U_j`
//! keeps the centered training residuals as an empirical distribution. Root
//! nodes become their mean plus the centered column. The result is a complete
//! [`Scm`] whose mechanisms are strictly increasing in the noise.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{CausalGraph, FeatureSet};
use crate::predictor::{train, Layer, Mlp, Predictor, PredictorError, TrainConfig};
use crate::rng::derive_seed;
use crate::sampler::PointSource;
use crate::scalar::{mean, pearson, Real};
use crate::scm::{dequantize, polynomial_features, Mechanism, NoiseDist, NoiseSpec, Regressor, Scm, ScmError};

pub const MIN_ROWS: usize = 50;
/// Residual-parent dependence above this flags a node.
pub const DEPENDENCE_FLAG: f64 = 0.1;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("{rows} rows; at least 50 are needed")]
    TooFewRows { rows: usize },
    #[error("node {node}: parent {parent} is constant, the regression is singular")]
    SingularFit { node: String, parent: String },
    #[error("data has {got} columns, graph has {expected} nodes")]
    Shape { expected: usize, got: usize },
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RegressorKind {
    /// Ridge regression on polynomial features of the parents.
    Ridge { degree: u32, lambda: f64 },
    /// One small network per node.
    Mlp { hidden: Vec<usize>, epochs: usize, learning_rate: f64 },
}

impl Default for RegressorKind {
    fn default() -> Self {
        RegressorKind::Ridge {
            degree: 2,
            lambda: 1e-6,
        }
    }
}

impl RegressorKind {
    pub fn small_mlp() -> Self {
        RegressorKind::Mlp {
            hidden: vec![32, 32],
            epochs: 200,
            learning_rate: 3e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitOptions {
    pub regressor: RegressorKind,
    /// Integer-valued columns dequantized before fitting.
    pub dequantize: FeatureSet,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFit {
    pub node: String,
    pub parents: Vec<String>,
    /// Training R^2; zero for roots.
    pub r2: f64,
    pub residual_variance: f64,
    /// `|corr(residual, parent)|` per parent on the training rows.
    pub residual_parent_corr: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AnmFit<T> {
    scm: Scm<T>,
    /// Centered residuals per node, in row order.
    residuals: Vec<Vec<T>>,
    nodes: Vec<NodeFit>,
}

impl<T: Real> AnmFit<T> {
    pub fn scm(&self) -> &Scm<T> {
        &self.scm
    }

    pub fn into_scm(self) -> Scm<T> {
        self.scm
    }

    pub fn residuals(&self, j: usize) -> &[T] {
        &self.residuals[j]
    }

    pub fn nodes(&self) -> &[NodeFit] {
        &self.nodes
    }

    /// Linear coefficient of `parent` in the mechanism of `child`, if the
    /// mechanism is polynomial.
    pub fn linear_coefficient(&self, parent: usize, child: usize) -> Option<T> {
        let pos = self.scm.graph().parents(child).iter().position(|&k| k == parent)?;
        match &self.scm.mechanisms()[child] {
            Mechanism::Additive(Regressor::Polynomial { degree, weights }) if *degree >= 1 => Some(weights[1 + pos]),
            Mechanism::Linear { coefficients, .. } => Some(coefficients[pos]),
            _ => None,
        }
    }
}

fn column<T: Real>(data: ArrayView2<T>, j: usize) -> Vec<T> {
    data.column(j).to_vec()
}

fn ridge<T: Real>(features: &[Vec<T>], y: &[T], lambda: f64) -> Option<Vec<T>> {
    let n = features.len();
    let k = features[0].len();
    let x = DMatrix::from_fn(n, k, |i, c| features[i][c].as_f64());
    let yv = DVector::from_iterator(n, y.iter().map(|v| v.as_f64()));
    let mut gram = x.transpose() * &x;
    // intercept is unpenalized
    for c in 1..k {
        gram[(c, c)] += lambda * n as f64;
    }
    let rhs = x.transpose() * yv;
    let w = gram.cholesky()?.solve(&rhs);
    w.iter().all(|v| v.is_finite()).then(|| w.iter().map(|&v| T::lit(v)).collect())
}

fn r_squared<T: Real>(y: &[T], fitted: &[T]) -> f64 {
    let m = mean(y).as_f64();
    let ss_tot: f64 = y.iter().map(|v| (v.as_f64() - m).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(fitted).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        0.0
    }
}

/// Fits one additive-noise mechanism per node, in topological order.
pub fn fit_anm<T: Real>(data: ArrayView2<T>, graph: &CausalGraph, opts: &FitOptions) -> Result<AnmFit<T>, LearnError> {
    let p = graph.len();
    if data.ncols() != p {
        return Err(LearnError::Shape {
            expected: p,
            got: data.ncols(),
        });
    }
    if data.nrows() < MIN_ROWS {
        return Err(LearnError::TooFewRows { rows: data.nrows() });
    }
    let mut data = data.to_owned();
    for j in opts.dequantize.iter().filter(|&j| j < p) {
        let col = dequantize(&column(data.view(), j), derive_seed(opts.seed, j as u64))?;
        data.column_mut(j).assign(&ndarray::Array1::from(col));
    }
    let names = graph.names();
    let n = data.nrows();
    let mut mechanisms = Vec::with_capacity(p);
    let mut noise = Vec::with_capacity(p);
    let mut residuals = Vec::with_capacity(p);
    let mut nodes = Vec::with_capacity(p);

    for j in 0..p {
        let parents = graph.parents(j);
        let y = column(data.view(), j);
        let parent_cols: Vec<Vec<T>> = parents.iter().map(|&k| column(data.view(), k)).collect();
        for (&k, col) in parents.iter().zip(&parent_cols) {
            let m = mean(col).as_f64();
            let spread = col.iter().map(|v| (v.as_f64() - m).abs()).fold(0.0, f64::max);
            if spread <= 1e-12 * (1.0 + m.abs()) {
                return Err(LearnError::SingularFit {
                    node: names[j].clone(),
                    parent: names[k].clone(),
                });
            }
        }
        let rows: Vec<Vec<T>> = (0..n).map(|i| parent_cols.iter().map(|c| c[i]).collect()).collect();

        let (mut regressor, fitted): (Option<Regressor<T>>, Vec<T>) = if parents.is_empty() {
            (None, vec![mean(&y); n])
        } else {
            match &opts.regressor {
                RegressorKind::Ridge { degree, lambda } => {
                    let feats: Vec<Vec<T>> = rows.iter().map(|r| polynomial_features(r, *degree)).collect();
                    let weights = ridge(&feats, &y, *lambda).ok_or_else(|| LearnError::SingularFit {
                        node: names[j].clone(),
                        parent: names[parents[0]].clone(),
                    })?;
                    let reg = Regressor::Polynomial {
                        degree: *degree,
                        weights,
                    };
                    let fitted = rows.iter().map(|r| reg.eval(r)).collect();
                    (Some(reg), fitted)
                }
                RegressorKind::Mlp {
                    hidden,
                    epochs,
                    learning_rate,
                } => {
                    let x = Array2::from_shape_fn((n, parents.len()), |(i, c)| rows[i][c]);
                    let cfg = TrainConfig {
                        epochs: *epochs,
                        learning_rate: *learning_rate,
                        hidden: hidden.clone(),
                        seed: derive_seed(opts.seed, j as u64),
                        ..TrainConfig::default()
                    };
                    let model = train(x.view(), &y, &cfg)?.model;
                    let fitted = model.predict(x.view())?;
                    (Some(Regressor::Mlp(model)), fitted)
                }
            }
        };

        let raw: Vec<T> = y.iter().zip(&fitted).map(|(&a, &b)| a - b).collect();
        let shift = mean(&raw);
        let centered: Vec<T> = raw.iter().map(|&r| r - shift).collect();
        // fold the residual mean into the regression so residuals are centered
        if let Some(reg) = regressor.as_mut() {
            shift_regressor(reg, shift)?;
        }
        let mechanism = match regressor {
            None => Mechanism::Linear {
                coefficients: Vec::new(),
                intercept: fitted[0] + shift,
            },
            Some(reg) => Mechanism::Additive(reg),
        };
        let dist = NoiseDist::empirical(centered.clone()).map_err(|reason| ScmError::InvalidNoise {
            node: names[j].clone(),
            reason,
        })?;
        let variance = centered.iter().map(|r| r.as_f64().powi(2)).sum::<f64>() / (n - 1) as f64;
        nodes.push(NodeFit {
            node: names[j].clone(),
            parents: parents.iter().map(|&k| names[k].clone()).collect(),
            r2: if parents.is_empty() { 0.0 } else { r_squared(&y, &fitted) },
            residual_variance: variance,
            residual_parent_corr: parent_cols.iter().map(|c| pearson(&centered, c).as_f64().abs()).collect(),
        });
        mechanisms.push(mechanism);
        noise.push(dist);
        residuals.push(centered);
    }
    let scm = Scm::new(graph.clone(), mechanisms, NoiseSpec::new(noise))?;
    Ok(AnmFit { scm, residuals, nodes })
}

fn shift_regressor<T: Real>(reg: &mut Regressor<T>, shift: T) -> Result<(), LearnError> {
    match reg {
        Regressor::Polynomial { weights, .. } => weights[0] += shift,
        Regressor::Mlp(model) => {
            let mut layers: Vec<Layer<T>> = model.layers().to_vec();
            if let Some(last) = layers.last_mut() {
                last.bias.mapv_inplace(|b| b + shift);
            }
            *model = Mlp::new(layers, model.head())?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeQuality {
    pub node: String,
    pub holdout_r2: f64,
    /// `|corr(r, pa)|` per parent.
    pub residual_parent_corr: Vec<f64>,
    /// `|corr(r^2, (pa - mean)^2)|` per parent; catches heteroscedastic residuals
    /// that are uncorrelated with the parent.
    pub residual_parent_corr_squared: Vec<f64>,
    /// Largest entry of either correlation list.
    pub dependence: f64,
    /// Kolmogorov-Smirnov distance between model samples and the holdout column.
    pub marginal_distance: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitQuality {
    pub nodes: Vec<NodeQuality>,
}

impl FitQuality {
    pub fn flagged(&self) -> Vec<&str> {
        self.nodes.iter().filter(|n| n.flagged).map(|n| n.node.as_str()).collect()
    }
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut k, mut d) = (0, 0, 0.0f64);
    while i < a.len() && k < b.len() {
        let x = a[i].min(b[k]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while k < b.len() && b[k] <= x {
            k += 1;
        }
        d = d.max((i as f64 / na - k as f64 / nb).abs());
    }
    d
}

/// Holdout diagnostics of a fitted SCM. Residuals come from abduction.
pub fn fit_quality<T: Real>(fit: &AnmFit<T>, holdout: ArrayView2<T>, seed: u64) -> Result<FitQuality, LearnError> {
    let scm = fit.scm();
    let p = scm.len();
    if holdout.ncols() != p {
        return Err(LearnError::Shape {
            expected: p,
            got: holdout.ncols(),
        });
    }
    let u = scm.abduct_matrix(holdout)?;
    let (_, sampled) = scm.sample(holdout.nrows(), &PointSource::Pseudo { seed })?;
    let graph = scm.graph();
    let nodes = (0..p)
        .map(|j| {
            let x: Vec<T> = holdout.column(j).to_vec();
            let r: Vec<T> = u.column(j).to_vec();
            let fitted: Vec<T> = x.iter().zip(&r).map(|(&a, &b)| a - b).collect();
            let r_sq: Vec<T> = r.iter().map(|&v| v * v).collect();
            let (mut lin, mut sq) = (Vec::new(), Vec::new());
            for &k in graph.parents(j) {
                let pa: Vec<T> = holdout.column(k).to_vec();
                let m = mean(&pa);
                let pa_sq: Vec<T> = pa.iter().map(|&v| (v - m) * (v - m)).collect();
                lin.push(pearson(&r, &pa).as_f64().abs());
                sq.push(pearson(&r_sq, &pa_sq).as_f64().abs());
            }
            let dependence = lin.iter().chain(&sq).copied().fold(0.0, f64::max);
            let observed: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
            let model: Vec<f64> = sampled.column(j).iter().map(|v| v.as_f64()).collect();
            NodeQuality {
                node: graph.names()[j].clone(),
                holdout_r2: if graph.parents(j).is_empty() { 0.0 } else { r_squared(&x, &fitted) },
                residual_parent_corr: lin,
                residual_parent_corr_squared: sq,
                dependence,
                marginal_distance: ks_distance(&observed, &model),
                flagged: dependence > DEPENDENCE_FLAG,
            }
        })
        .collect();
    Ok(FitQuality { nodes })
}

/// Rows of `data` split into `(train, holdout)` by a seeded shuffle.
pub fn split_rows<T: Real>(data: ArrayView2<T>, holdout_fraction: f64, seed: u64) -> (Array2<T>, Array2<T>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..data.nrows()).collect();
    idx.shuffle(&mut crate::rng::rng_from_seed(seed));
    let cut = ((1.0 - holdout_fraction) * data.nrows() as f64).round() as usize;
    (data.select(Axis(0), &idx[..cut]), data.select(Axis(0), &idx[cut..]))
}
