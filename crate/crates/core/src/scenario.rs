//! Scenario configuration: a JSON document with matrices as nested row
//! arrays, validated into a runnable [`Setup`]. Ships the built-in
//! four-node scenario.

use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus;
use crate::gain_design::{self, PlacementConfig, PlacementTargets, ProtocolConfig};
use crate::network::Digraph;
use crate::numerics::{self, Matrix, Vector};
use crate::plant::{self, LtiSystem};
use crate::runtime::Setup;

pub const PAPER_4NODE: &str = "paper-4node";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown built-in scenario {0:?} (available: paper-4node)")]
    UnknownScenario(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("graph is not strongly connected")]
    NotStronglyConnected,
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("weights do not follow the out-degree rule p_lj = 1/(1 + d_j): entry ({row}, {col}) is {found}, expected {expected}")]
    Weights { row: usize, col: usize, found: f64, expected: f64 },
    #[error("plant not jointly controllable and observable: (A, B) jointly controllable = {controllable}, (A, C) jointly observable = {observable}")]
    NotJointlyControllableObservable { controllable: bool, observable: bool },
    #[error("invalid {which} targets: {reason}")]
    Targets { which: &'static str, reason: String },
    #[error("invalid priorities: {0}")]
    Priorities(String),
    #[error("invalid value: {0}")]
    Value(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GraphSpec {
    /// Directed edges `[from, to]`; weights follow the out-degree rule.
    Edges { nodes: usize, edges: Vec<(usize, usize)> },
    /// Explicit column-stochastic `P`, `weights[to][from]`.
    Weights { weights: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    pub a: Vec<Vec<f64>>,
    /// One `n × q_i` matrix per agent.
    pub b: Vec<Vec<Vec<f64>>>,
    /// One `p_i × n` matrix per agent.
    pub c: Vec<Vec<Vec<f64>>>,
}

/// A real target `0.5` or a complex one `[re, im]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetSpec {
    Real(f64),
    Complex([f64; 2]),
}

impl TargetSpec {
    pub fn value(self) -> Complex64 {
        match self {
            TargetSpec::Real(x) => Complex64::new(x, 0.0),
            TargetSpec::Complex([re, im]) => Complex64::new(re, im),
        }
    }
}

fn default_rank_tol() -> f64 {
    consensus::DEFAULT_RANK_TOL
}
fn default_pbh_tol() -> f64 {
    1e-9
}
fn default_eigen_match_tol() -> f64 {
    1e-6
}
fn default_margin() -> f64 {
    1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Relative rank tolerance for the Hankel tests in finite-time consensus.
    #[serde(default = "default_rank_tol")]
    pub consensus_rank: f64,
    /// Relative tolerance of the PBH test inside gain design.
    #[serde(default = "default_pbh_tol")]
    pub pbh: f64,
    /// How close a placed eigenvalue must be to its target.
    #[serde(default = "default_eigen_match_tol")]
    pub eigen_match: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { consensus_rank: default_rank_tol(), pbh: default_pbh_tol(), eigen_match: default_eigen_match_tol() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub graph: GraphSpec,
    pub plant: PlantSpec,
    pub controller_targets: Vec<TargetSpec>,
    pub observer_targets: Vec<TargetSpec>,
    /// Agents treat eigenvalues with modulus ≥ 1 − margin as unstable.
    #[serde(default = "default_margin")]
    pub controller_margin: f64,
    #[serde(default = "default_margin")]
    pub observer_margin: f64,
    /// Out-neighbour priority list per node, highest first. Defaults to
    /// ascending ids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priorities: Option<Vec<Vec<usize>>>,
    /// Leader election keys. Defaults to node ids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub election_keys: Option<Vec<u64>>,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Initial state. Drawn uniformly from [−1, 1]ⁿ with `seed` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Initial local estimates. Zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_hat0: Option<Vec<Vec<f64>>>,
    pub horizon: usize,
    pub taus: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

/// A validated scenario ready to run.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub setup: Setup,
    pub x0: Vector,
    pub x_hat0: Vec<Vector>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn builtin(name: &str) -> Result<Self, ConfigError> {
        match name {
            PAPER_4NODE => Ok(paper_4node()),
            other => Err(ConfigError::UnknownScenario(other.to_string())),
        }
    }

    /// A built-in name or a path to a JSON file.
    pub fn resolve(name_or_path: &str) -> Result<Self, ConfigError> {
        match Self::builtin(name_or_path) {
            Ok(cfg) => Ok(cfg),
            Err(ConfigError::UnknownScenario(_)) if Path::new(name_or_path).exists() => Self::load(Path::new(name_or_path)),
            Err(e) => Err(e),
        }
    }

    pub fn build(&self) -> Result<Scenario, ConfigError> {
        let graph = self.build_graph()?;
        let n_nodes = graph.node_count();
        if !graph.is_strongly_connected() {
            return Err(ConfigError::NotStronglyConnected);
        }

        let a = rows_to_matrix(&self.plant.a, "A")?;
        let n = a.nrows();
        if !a.is_square() || n == 0 {
            return Err(ConfigError::Dimension(format!("A must be square and nonempty, got {}x{}", a.nrows(), a.ncols())));
        }
        if self.plant.b.len() != n_nodes || self.plant.c.len() != n_nodes {
            return Err(ConfigError::Dimension(format!(
                "{n_nodes} nodes but {} B_i and {} C_i",
                self.plant.b.len(),
                self.plant.c.len()
            )));
        }
        let b = self
            .plant
            .b
            .iter()
            .enumerate()
            .map(|(i, m)| rows_to_matrix(m, &format!("B_{i}")))
            .collect::<Result<Vec<_>, _>>()?;
        let c = self
            .plant
            .c
            .iter()
            .enumerate()
            .map(|(i, m)| rows_to_matrix(m, &format!("C_{i}")))
            .collect::<Result<Vec<_>, _>>()?;
        let sys = LtiSystem::new(a, b, c).map_err(|e| ConfigError::Dimension(e.to_string()))?;
        let (controllable, observable) = plant::joint_rank_checks(&sys);
        if !(controllable && observable) {
            return Err(ConfigError::NotJointlyControllableObservable { controllable, observable });
        }

        let controller_targets = targets(&self.controller_targets, "controller")?;
        let observer_targets = targets(&self.observer_targets, "observer")?;
        for (what, m) in [("controller_margin", self.controller_margin), ("observer_margin", self.observer_margin)] {
            if !(0.0..1.0).contains(&m) {
                return Err(ConfigError::Value(format!("{what} must lie in [0, 1), got {m}")));
            }
        }
        let tol = &self.tolerances;
        for (what, v) in [("consensus_rank", tol.consensus_rank), ("pbh", tol.pbh), ("eigen_match", tol.eigen_match)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::Value(format!("tolerance {what} must be positive, got {v}")));
            }
        }

        let priorities = match &self.priorities {
            None => gain_design::default_priorities(&graph),
            Some(p) => {
                check_priorities(&graph, p)?;
                p.clone()
            }
        };
        let election_keys = match &self.election_keys {
            None => (0..n_nodes as u64).collect(),
            Some(k) if k.len() == n_nodes => k.clone(),
            Some(k) => return Err(ConfigError::Dimension(format!("{} election keys for {n_nodes} nodes", k.len()))),
        };

        let x0 = match &self.x0 {
            Some(x) if x.len() == n => Vector::from_vec(x.clone()),
            Some(x) => return Err(ConfigError::Dimension(format!("x0 has length {}, expected {n}", x.len()))),
            None => random_state(n, self.seed),
        };
        let x_hat0 = match &self.x_hat0 {
            None => vec![Vector::zeros(n); n_nodes],
            Some(xs) if xs.len() == n_nodes && xs.iter().all(|x| x.len() == n) => {
                xs.iter().map(|x| Vector::from_vec(x.clone())).collect()
            }
            Some(_) => return Err(ConfigError::Dimension(format!("x_hat0 needs {n_nodes} vectors of length {n}"))),
        };
        if x0.iter().chain(x_hat0.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(ConfigError::Value("initial conditions must be finite".into()));
        }
        if let Some(t) = self.taus.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
            return Err(ConfigError::Value(format!("tau must be finite and nonnegative, got {t}")));
        }

        let setup = Setup {
            controller: ProtocolConfig::new(
                PlacementConfig { stability_margin: self.controller_margin, pbh_tol: tol.pbh },
                n_nodes,
            ),
            observer: ProtocolConfig::new(
                PlacementConfig { stability_margin: self.observer_margin, pbh_tol: tol.pbh },
                n_nodes,
            ),
            graph,
            sys,
            controller_targets,
            observer_targets,
            priorities,
            election_keys,
            consensus_tol: tol.consensus_rank,
        };
        Ok(Scenario { config: self.clone(), setup, x0, x_hat0 })
    }

    fn build_graph(&self) -> Result<Digraph, ConfigError> {
        match &self.graph {
            GraphSpec::Edges { nodes, edges } => {
                Digraph::from_edges(*nodes, edges).map_err(|e| ConfigError::Graph(e.to_string()))
            }
            GraphSpec::Weights { weights } => {
                let p = rows_to_matrix(weights, "weights")?;
                let g = Digraph::from_weight_support(&p).map_err(|e| ConfigError::Graph(e.to_string()))?;
                let expected = g.out_weight_matrix();
                for row in 0..p.nrows() {
                    for col in 0..p.ncols() {
                        if (p[(row, col)] - expected[(row, col)]).abs() > 1e-12 {
                            return Err(ConfigError::Weights {
                                row,
                                col,
                                found: p[(row, col)],
                                expected: expected[(row, col)],
                            });
                        }
                    }
                }
                Ok(g)
            }
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<Matrix, ConfigError> {
    numerics::matrix_from_rows(rows).map_err(|e| ConfigError::Dimension(format!("{what}: {e}")))
}

fn targets(spec: &[TargetSpec], which: &'static str) -> Result<PlacementTargets, ConfigError> {
    PlacementTargets::new(spec.iter().map(|t| t.value()).collect())
        .map_err(|e| ConfigError::Targets { which, reason: e.to_string() })
}

fn check_priorities(graph: &Digraph, p: &[Vec<usize>]) -> Result<(), ConfigError> {
    if p.len() != graph.node_count() {
        return Err(ConfigError::Priorities(format!("{} lists for {} nodes", p.len(), graph.node_count())));
    }
    for (j, list) in p.iter().enumerate() {
        let mut sorted = list.clone();
        sorted.sort_unstable();
        if sorted != graph.out_neighbors(j) {
            return Err(ConfigError::Priorities(format!(
                "node {j} lists {list:?} but its out-neighbours are {:?}",
                graph.out_neighbors(j)
            )));
        }
    }
    Ok(())
}

fn random_state(n: usize, seed: u64) -> Vector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Vector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0))
}

fn unit(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// The four-node, eight-state example: exact `P`, `A`, single-column `B_i`
/// and single-row `C_i`, controller targets 0.60..0.67 and observer targets
/// 0.20..0.27. The margins make every eigenvalue outside each target disk
/// count as unstable.
pub fn paper_4node() -> ScenarioConfig {
    let third = 1.0 / 3.0;
    let weights = vec![
        vec![third, 0.0, 0.25, third],
        vec![third, 0.5, 0.25, 0.0],
        vec![0.0, 0.5, 0.25, third],
        vec![third, 0.0, 0.25, third],
    ];
    let a = vec![
        vec![1.0, 0.5, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0],
        vec![0.5, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0, 0.5, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.8, 1.0, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.5, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 0.6, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.7, 0.1],
        vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.2, 0.7],
    ];
    let b = [1, 3, 5, 7].iter().map(|&i| unit(8, i).into_iter().map(|v| vec![v]).collect()).collect();
    let c = [0, 2, 4, 6].iter().map(|&i| vec![unit(8, i)]).collect();
    let steps = |lo: f64| (0..8).map(|i| TargetSpec::Real(((lo + 0.01 * i as f64) * 100.0).round() / 100.0)).collect();
    ScenarioConfig {
        name: PAPER_4NODE.into(),
        graph: GraphSpec::Weights { weights },
        plant: PlantSpec { a, b, c },
        controller_targets: steps(0.60),
        observer_targets: steps(0.20),
        controller_margin: 0.325,
        observer_margin: 0.725,
        priorities: None,
        election_keys: Some(vec![4, 3, 2, 1]),
        tolerances: Tolerances::default(),
        x0: Some(vec![1.0; 8]),
        x_hat0: None,
        horizon: 60,
        taus: vec![0.1, 1.0, 10.0],
        seed: 0,
    }
}
