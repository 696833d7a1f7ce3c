//! JSON form of an [`Scm`]:
//!
//! ```json
//! {"graph": {"nodes": ["W", "Z"], "edges": [["W", "Z"]]},
//!  "noise": [{"node": "W", "kind": "gaussian", "mean": 0.0, "std": 1.0},
//!            {"node": "Z", "kind": "empirical", "csv": "res.csv", "column": "Z"}],
//!  "assignments": [{"node": "W", "parents": [], "kind": "linear", "coefficients": [], "intercept": 0.0},
//!                  {"node": "Z", "parents": ["W"], "kind": "expression", "forward": "W^3 + u", "inverse": "x - W^3"}]}
//! ```
//!
//! Empirical tables are inline (`values`) or read from a CSV column, with the
//! path resolved against the directory of the SCM file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Mechanism, NoiseDist, NoiseSpec, Regressor, Scm, ScmError};
use crate::expr::Expr;
use crate::graph::{CausalGraph, GraphFile};
use crate::predictor::{Mlp, WeightsFile};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmFile {
    pub graph: GraphFile,
    pub noise: Vec<NoiseFile>,
    pub assignments: Vec<AssignmentFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseFile {
    pub node: String,
    #[serde(flatten)]
    pub dist: NoiseDistFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseDistFile {
    Gaussian {
        mean: f64,
        std: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    Empirical {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        values: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        csv: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        column: Option<String>,
    },
    Transformed {
        base: Box<NoiseDistFile>,
        map: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentFile {
    pub node: String,
    pub parents: Vec<String>,
    #[serde(flatten)]
    pub mechanism: MechanismFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MechanismFile {
    /// Coefficients follow the order of `parents`.
    Linear { coefficients: Vec<f64>, intercept: f64 },
    /// Polynomial regressors read parents in graph node order.
    Additive { regressor: RegressorFile },
    Expression {
        forward: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inverse: Option<String>,
    },
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RegressorFile {
    Polynomial { degree: u32, weights: Vec<f64> },
    Mlp { model: WeightsFile },
}

fn parse_err(msg: impl Into<String>) -> ScmError {
    ScmError::Parse(msg.into())
}

impl NoiseDistFile {
    fn to_dist<T: Real>(&self, node: &str, base_dir: Option<&Path>) -> Result<NoiseDist<T>, ScmError> {
        let invalid = |reason: String| ScmError::InvalidNoise {
            node: node.to_owned(),
            reason,
        };
        match self {
            NoiseDistFile::Gaussian { mean, std } => NoiseDist::gaussian(T::lit(*mean), T::lit(*std)).map_err(invalid),
            NoiseDistFile::Uniform { lo, hi } => NoiseDist::uniform(T::lit(*lo), T::lit(*hi)).map_err(invalid),
            NoiseDistFile::Empirical { values, csv, column } => {
                let raw = match (values, csv) {
                    (Some(v), None) => v.clone(),
                    (None, Some(path)) => {
                        let full = match base_dir {
                            Some(dir) => dir.join(path),
                            None => Path::new(path).to_path_buf(),
                        };
                        read_csv_column(&full, column.as_deref().unwrap_or(node))?
                    }
                    _ => return Err(invalid("empirical noise needs exactly one of `values` or `csv`".into())),
                };
                NoiseDist::empirical(raw.into_iter().map(T::lit).collect()).map_err(invalid)
            }
            NoiseDistFile::Transformed { base, map } => {
                NoiseDist::transformed(base.to_dist(node, base_dir)?, map).map_err(invalid)
            }
        }
    }

    fn from_dist<T: Real>(d: &NoiseDist<T>) -> Self {
        match d {
            NoiseDist::Gaussian { mean, std } => NoiseDistFile::Gaussian {
                mean: mean.as_f64(),
                std: std.as_f64(),
            },
            NoiseDist::Uniform { lo, hi } => NoiseDistFile::Uniform {
                lo: lo.as_f64(),
                hi: hi.as_f64(),
            },
            NoiseDist::Empirical { sorted } => NoiseDistFile::Empirical {
                values: Some(sorted.iter().map(|v| v.as_f64()).collect()),
                csv: None,
                column: None,
            },
            NoiseDist::Transformed { base, map } => NoiseDistFile::Transformed {
                base: Box::new(NoiseDistFile::from_dist(base)),
                map: map.source().to_owned(),
            },
        }
    }
}

fn read_csv_column(path: &Path, column: &str) -> Result<Vec<f64>, ScmError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_err(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    let idx = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| parse_err(format!("{}: no column {column:?}", path.display())))?;
    rdr.records()
        .map(|r| {
            let r = r.map_err(|e| parse_err(e.to_string()))?;
            r.get(idx)
                .unwrap_or("")
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(format!("{}: {e}", path.display())))
        })
        .collect()
}

impl ScmFile {
    pub fn to_scm<T: Real>(&self, base_dir: Option<&Path>) -> Result<Scm<T>, ScmError> {
        let graph = CausalGraph::try_from(&self.graph)?;
        let p = graph.len();
        let names = graph.names().to_vec();
        let find = |node: &str| {
            graph
                .index_of(node)
                .ok_or_else(|| parse_err(format!("unknown node {node:?}")))
        };

        let mut noise: Vec<Option<NoiseDist<T>>> = vec![None; p];
        for nf in &self.noise {
            let j = find(&nf.node)?;
            if noise[j].is_some() {
                return Err(parse_err(format!("noise for {:?} given twice", nf.node)));
            }
            noise[j] = Some(nf.dist.to_dist(&nf.node, base_dir)?);
        }
        let noise = noise
            .into_iter()
            .enumerate()
            .map(|(j, d)| d.ok_or_else(|| parse_err(format!("no noise for node {:?}", names[j]))))
            .collect::<Result<Vec<_>, _>>()?;

        let mut mechs: Vec<Option<Mechanism<T>>> = vec![None; p];
        for a in &self.assignments {
            let j = find(&a.node)?;
            if mechs[j].is_some() {
                return Err(parse_err(format!("assignment for {:?} given twice", a.node)));
            }
            let canonical: Vec<&str> = graph.parents(j).iter().map(|&k| names[k].as_str()).collect();
            let mut given: Vec<&str> = a.parents.iter().map(String::as_str).collect();
            given.sort_unstable();
            let mut want = canonical.clone();
            want.sort_unstable();
            if given != want && !matches!(a.mechanism, MechanismFile::Constant { .. }) {
                return Err(ScmError::BadAssignment {
                    node: a.node.clone(),
                    reason: format!("parents {:?} differ from graph parents {:?}", a.parents, canonical),
                });
            }
            let m = match &a.mechanism {
                MechanismFile::Linear { coefficients, intercept } => {
                    if coefficients.len() != a.parents.len() {
                        return Err(ScmError::BadAssignment {
                            node: a.node.clone(),
                            reason: format!("{} coefficients for {} parents", coefficients.len(), a.parents.len()),
                        });
                    }
                    let coefficients = canonical
                        .iter()
                        .map(|c| {
                            let at = a.parents.iter().position(|n| n == c).expect("same parent set");
                            T::lit(coefficients[at])
                        })
                        .collect();
                    Mechanism::Linear {
                        coefficients,
                        intercept: T::lit(*intercept),
                    }
                }
                MechanismFile::Additive { regressor } => Mechanism::Additive(match regressor {
                    RegressorFile::Polynomial { degree, weights } => Regressor::Polynomial {
                        degree: *degree,
                        weights: weights.iter().map(|&w| T::lit(w)).collect(),
                    },
                    RegressorFile::Mlp { model } => {
                        Regressor::Mlp(Mlp::from_file(model).map_err(|e| parse_err(e.to_string()))?)
                    }
                }),
                MechanismFile::Expression { forward, inverse } => {
                    Mechanism::expression(&canonical, forward, inverse.as_deref())?
                }
                MechanismFile::Constant { value } => Mechanism::Constant(T::lit(*value)),
            };
            mechs[j] = Some(m);
        }
        let mechs = mechs
            .into_iter()
            .enumerate()
            .map(|(j, m)| m.ok_or_else(|| parse_err(format!("no assignment for node {:?}", names[j]))))
            .collect::<Result<Vec<_>, _>>()?;
        Scm::new(graph, mechs, NoiseSpec::new(noise))
    }
}

impl<T: Real> Scm<T> {
    pub fn to_file(&self) -> ScmFile {
        let names = self.graph.names();
        let noise = self
            .noise
            .iter()
            .zip(names)
            .map(|(d, n)| NoiseFile {
                node: n.clone(),
                dist: NoiseDistFile::from_dist(d),
            })
            .collect();
        let assignments = self
            .mechanisms
            .iter()
            .enumerate()
            .map(|(j, m)| AssignmentFile {
                node: names[j].clone(),
                parents: self.graph.parents(j).iter().map(|&k| names[k].clone()).collect(),
                mechanism: match m {
                    Mechanism::Linear { coefficients, intercept } => MechanismFile::Linear {
                        coefficients: coefficients.iter().map(|c| c.as_f64()).collect(),
                        intercept: intercept.as_f64(),
                    },
                    Mechanism::Additive(Regressor::Polynomial { degree, weights }) => MechanismFile::Additive {
                        regressor: RegressorFile::Polynomial {
                            degree: *degree,
                            weights: weights.iter().map(|w| w.as_f64()).collect(),
                        },
                    },
                    Mechanism::Additive(Regressor::Mlp(model)) => MechanismFile::Additive {
                        regressor: RegressorFile::Mlp { model: model.to_file() },
                    },
                    Mechanism::Expression { forward, inverse } => MechanismFile::Expression {
                        forward: forward.source().to_owned(),
                        inverse: inverse.as_ref().map(Expr::to_string),
                    },
                    Mechanism::Constant(v) => MechanismFile::Constant { value: v.as_f64() },
                },
            })
            .collect();
        ScmFile {
            graph: GraphFile::from(&self.graph),
            noise,
            assignments,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ScmError> {
        let text = std::fs::read_to_string(path)?;
        let file: ScmFile = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
        file.to_scm(path.parent())
    }

    pub fn save(&self, path: &Path) -> Result<(), ScmError> {
        let text = serde_json::to_string_pretty(&self.to_file()).expect("scm serializes");
        std::fs::write(path, text)?;
        Ok(())
    }
}
