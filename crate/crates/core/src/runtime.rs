//! The closed-loop schedule: a three-step initialization (round budget and
//! diameter bound, leader, gains), then for every step k an agreement window
//! of finite-time consensus on the local estimates followed by one
//! estimation/control update.

use thiserror::Error;

use crate::consensus::{self, ConsensusError, TerminationOutcome};
use crate::gain_design::{self, Election, GainError, Mode, PlacementTargets, ProtocolConfig, TokenOutcome};
use crate::network::Digraph;
use crate::numerics::{Matrix, Vector};
use crate::plant::{self, LtiSystem, PlantError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuntimeError {
    #[error("invalid setup: {0}")]
    InvalidSetup(String),
    #[error("the two bootstrap runs disagree on the minimal-polynomial degrees: {first:?} vs {second:?}")]
    BootstrapMismatch { first: Vec<usize>, second: Vec<usize> },
    #[error("nodes disagree on {0} after the read-only flood")]
    Disagreement(&'static str),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Gain(#[from] GainError),
    #[error(transparent)]
    Plant(#[from] PlantError),
}

/// Everything the initialization and the closed loop need.
#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub graph: Digraph,
    pub sys: LtiSystem,
    pub controller_targets: PlacementTargets,
    pub observer_targets: PlacementTargets,
    pub controller: ProtocolConfig,
    pub observer: ProtocolConfig,
    /// Out-neighbour priority lists, highest priority first.
    pub priorities: Vec<Vec<usize>>,
    pub election_keys: Vec<u64>,
    pub consensus_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Initialization {
    pub m_bar: usize,
    pub diameter_bound: usize,
    pub degrees: Vec<usize>,
    pub bootstrap: TerminationOutcome,
    pub election: Election,
    pub control: TokenOutcome,
    pub observer: TokenOutcome,
}

impl Initialization {
    pub fn k_gains(&self) -> &[Matrix] {
        &self.control.gains
    }

    pub fn l_gains(&self) -> &[Matrix] {
        &self.observer.gains
    }

    /// `ΣB_jK_j` as every node learned it from the flood.
    pub fn sum_bk(&self) -> &Matrix {
        &self.control.f
    }

    /// `A − (1/N)ΣL_iC_i`.
    pub fn observer_matrix(&self) -> &Matrix {
        &self.observer.closed_loop
    }

    /// `A + ΣB_iK_i`.
    pub fn controller_matrix(&self) -> &Matrix {
        &self.control.closed_loop
    }
}

/// Runs the three initialization procedures.
pub fn initialize(setup: &Setup) -> Result<Initialization, RuntimeError> {
    let n_nodes = setup.graph.node_count();
    if setup.sys.agents() != n_nodes {
        return Err(RuntimeError::InvalidSetup(format!("{} agents on {n_nodes} nodes", setup.sys.agents())));
    }
    // bootstrap payload: node ids
    let ids: Vec<Vec<f64>> = (0..n_nodes).map(|j| vec![j as f64]).collect();
    let first = consensus::finite_time_average(
        &setup.graph,
        &ids,
        setup.consensus_tol,
        consensus::default_round_cap(n_nodes),
    )?;
    let bootstrap = consensus::run_with_termination(&setup.graph, &ids, setup.consensus_tol)?;
    if bootstrap.degrees != first.degrees {
        return Err(RuntimeError::BootstrapMismatch { first: first.degrees, second: bootstrap.degrees });
    }
    let m_bar = bootstrap.m_bar_at(0);
    let diameter_bound = bootstrap.diameter_bound_at(0);
    if (0..n_nodes).any(|j| bootstrap.m_bar_at(j) != m_bar || bootstrap.diameter_bound_at(j) != diameter_bound) {
        return Err(RuntimeError::Disagreement("m̄ and D′"));
    }

    let election = gain_design::elect_leader(&setup.graph, diameter_bound, &setup.election_keys)?;
    let control = gain_design::run_token_protocol(
        &setup.graph,
        &setup.sys,
        &setup.controller_targets,
        Mode::Control,
        election.leader,
        &setup.priorities,
        &setup.controller,
    )?;
    let observer = gain_design::run_token_protocol(
        &setup.graph,
        &setup.sys,
        &setup.observer_targets,
        Mode::Observer,
        election.leader,
        &setup.priorities,
        &setup.observer,
    )?;
    if control.known_f.iter().any(|f| f != &control.f) {
        return Err(RuntimeError::Disagreement("ΣB_jK_j"));
    }
    Ok(Initialization {
        m_bar,
        diameter_bound,
        degrees: first.degrees,
        bootstrap,
        election,
        control,
        observer,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeEstimator {
    pub id: usize,
    /// `n × p_i`.
    pub l: Matrix,
    /// `q_i × n`.
    pub k: Matrix,
    pub x_hat: Vector,
    /// Last agreed average as held by this node.
    pub x_bar: Vector,
    /// `ΣB_jK_j` learned during initialization.
    pub sum_bk: Matrix,
}

pub fn build_estimators(init: &Initialization, x_hat0: &[Vector]) -> Vec<NodeEstimator> {
    x_hat0
        .iter()
        .enumerate()
        .map(|(id, x)| NodeEstimator {
            id,
            l: init.observer.gains[id].clone(),
            k: init.control.gains[id].clone(),
            x_hat: x.clone(),
            x_bar: x.clone(),
            sum_bk: init.control.known_f[id].clone(),
        })
        .collect()
}

/// One agreement window: finite-time averaging of the local estimates with
/// a budget of `m_bar` rounds. Returns each node's agreed value and the
/// rounds it took.
pub fn agreement_phase(
    graph: &Digraph,
    estimates: &[Vector],
    m_bar: usize,
    tol: f64,
) -> Result<(Vec<Vector>, usize), RuntimeError> {
    let payload: Vec<Vec<f64>> = estimates.iter().map(|x| x.iter().copied().collect()).collect();
    let out = consensus::finite_time_average(graph, &payload, tol, m_bar)?;
    Ok((out.averages.into_iter().map(Vector::from_vec).collect(), out.rounds_used))
}

/// `u_i = K_i x̄`, `x̂_i⁺ = A x̄ + L_i(y_i − C_i x̄) + ΣB_jK_j x̄` and the plant
/// update. Returns `x[k+1]` and the inputs applied.
pub fn estimate_and_control_step(
    sys: &LtiSystem,
    nodes: &mut [NodeEstimator],
    x: &Vector,
) -> Result<(Vector, Vec<Vector>), RuntimeError> {
    let inputs: Vec<Vector> = nodes.iter().map(|nd| &nd.k * &nd.x_bar).collect();
    let (x_next, outputs) = plant::plant_step(sys, x, &inputs)?;
    for (nd, (y, c)) in nodes.iter_mut().zip(outputs.iter().zip(&sys.c)) {
        let innovation = y - c * &nd.x_bar;
        nd.x_hat = &sys.a * &nd.x_bar + &nd.l * innovation + &nd.sum_bk * &nd.x_bar;
    }
    Ok((x_next, inputs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    /// Normalized time `k(m̄τ + 1)`.
    pub t: f64,
    pub x: Vector,
    pub x_hat: Vec<Vector>,
    /// Exact network average of the local estimates.
    pub x_bar: Vector,
    /// Agreed average as held by each node.
    pub x_bar_nodes: Vec<Vector>,
    /// `ē[k] = x[k] − x̄[k]`.
    pub e_bar: Vector,
    /// `e_i[k] = x[k] − x̂_i[k]`.
    pub e: Vec<Vector>,
    pub norm_x: f64,
    pub norm_ebar: f64,
    pub norm_e: Vec<f64>,
    pub rounds_used: usize,
    /// Largest `‖x̄_node − x̄‖` relative to the largest estimate norm.
    pub agreement_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopTrace {
    pub tau: f64,
    pub m_bar: usize,
    pub rows: Vec<StepRecord>,
}

pub fn normalized_time(k: usize, m_bar: usize, tau: f64) -> f64 {
    k as f64 * (m_bar as f64 * tau + 1.0)
}

/// Alternates agreement windows and estimation/control updates for
/// `horizon` steps. Row `k` holds the state and estimates at step `k`
/// together with the agreement reached on them.
pub fn run_closed_loop(
    setup: &Setup,
    init: &Initialization,
    x0: &Vector,
    x_hat0: &[Vector],
    horizon: usize,
    tau: f64,
) -> Result<ClosedLoopTrace, RuntimeError> {
    let n = setup.sys.state_dim();
    let n_nodes = setup.graph.node_count();
    if x0.len() != n || x_hat0.len() != n_nodes || x_hat0.iter().any(|x| x.len() != n) {
        return Err(RuntimeError::InvalidSetup(format!(
            "x0 needs length {n} and x̂0 needs {n_nodes} vectors of length {n}"
        )));
    }
    if !tau.is_finite() || tau < 0.0 {
        return Err(RuntimeError::InvalidSetup(format!("tau must be finite and nonnegative, got {tau}")));
    }
    let mut nodes = build_estimators(init, x_hat0);
    let mut x = x0.clone();
    let mut rows = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let estimates: Vec<Vector> = nodes.iter().map(|nd| nd.x_hat.clone()).collect();
        let (agreed, rounds_used) = agreement_phase(&setup.graph, &estimates, init.m_bar, setup.consensus_tol)?;
        let x_bar = estimates.iter().fold(Vector::zeros(n), |acc, v| acc + v) / n_nodes as f64;
        let scale = estimates.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let agreement_error = if scale == 0.0 {
            agreed.iter().map(|v| v.norm()).fold(0.0, f64::max)
        } else {
            agreed.iter().map(|v| (v - &x_bar).norm()).fold(0.0, f64::max) / scale
        };
        for (nd, xb) in nodes.iter_mut().zip(&agreed) {
            nd.x_bar = xb.clone();
        }
        let e_bar = &x - &x_bar;
        let e: Vec<Vector> = estimates.iter().map(|xh| &x - xh).collect();
        rows.push(StepRecord {
            k,
            t: normalized_time(k, init.m_bar, tau),
            norm_x: x.norm(),
            norm_ebar: e_bar.norm(),
            norm_e: e.iter().map(Vector::norm).collect(),
            x: x.clone(),
            x_hat: estimates,
            x_bar,
            x_bar_nodes: agreed,
            e_bar,
            e,
            rounds_used,
            agreement_error,
        });
        if k < horizon {
            let (next, _) = estimate_and_control_step(&setup.sys, &mut nodes, &x)?;
            x = next;
        }
    }
    Ok(ClosedLoopTrace { tau, m_bar: init.m_bar, rows })
}

/// Largest per-step residuals of the average and local error recursions,
/// each relative to `max(1, ‖ē[k]‖)`.
pub fn error_recursion_residuals(trace: &ClosedLoopTrace, init: &Initialization, sys: &LtiSystem) -> (f64, f64) {
    let observer = init.observer_matrix();
    let local: Vec<Matrix> = init.l_gains().iter().zip(&sys.c).map(|(l, c)| &sys.a - l * c).collect();
    let mut worst_avg = 0.0_f64;
    let mut worst_local = 0.0_f64;
    for pair in trace.rows.windows(2) {
        let (now, next) = (&pair[0], &pair[1]);
        let scale = now.norm_ebar.max(1.0);
        worst_avg = worst_avg.max((&next.e_bar - observer * &now.e_bar).norm() / scale);
        for (i, m) in local.iter().enumerate() {
            worst_local = worst_local.max((&next.e[i] - m * &now.e_bar).norm() / scale);
        }
    }
    (worst_avg, worst_local)
}

/// Least-squares slope of `ln ‖ē[k]‖` over `k ∈ [from, to]`.
pub fn log_error_slope(trace: &ClosedLoopTrace, from: usize, to: usize) -> f64 {
    let points: Vec<(f64, f64)> = trace
        .rows
        .iter()
        .filter(|r| r.k >= from && r.k <= to && r.norm_ebar > 0.0)
        .map(|r| (r.k as f64, r.norm_ebar.ln()))
        .collect();
    let m = points.len() as f64;
    if points.len() < 2 {
        return f64::NAN;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / m;
    let my = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::gain_design::tests::{control_targets, observer_targets};
    use crate::gain_design::{default_priorities, PlacementConfig};
    use crate::network::tests::four_node;
    use crate::numerics;
    use crate::plant::tests::four_agent_plant;
    use proptest::prelude::*;

    pub(crate) fn four_node_setup() -> Setup {
        let graph = four_node();
        Setup {
            priorities: default_priorities(&graph),
            sys: four_agent_plant(),
            controller_targets: control_targets(),
            observer_targets: observer_targets(),
            controller: ProtocolConfig::new(PlacementConfig { stability_margin: 0.325, pbh_tol: 1e-9 }, 4),
            observer: ProtocolConfig::new(PlacementConfig { stability_margin: 0.725, pbh_tol: 1e-9 }, 4),
            election_keys: vec![4, 3, 2, 1],
            consensus_tol: consensus::DEFAULT_RANK_TOL,
            graph,
        }
    }

    #[test]
    fn four_node_initialization() {
        let setup = four_node_setup();
        let init = initialize(&setup).unwrap();
        assert_eq!(init.degrees, vec![3, 3, 3, 3]);
        assert_eq!(init.m_bar, 15);
        assert_eq!(init.diameter_bound, 3);
        assert_eq!(init.election.leader, 0);
        assert!(numerics::is_schur_stable(init.controller_matrix(), 0.0).unwrap());
        assert!(numerics::is_schur_stable(init.observer_matrix(), 0.0).unwrap());
    }

    #[test]
    fn single_node_initialization() {
        let graph = Digraph::from_edges(1, &[]).unwrap();
        let a = Matrix::from_row_slice(2, 2, &[1.2, 1.0, 0.0, 0.5]);
        let sys = LtiSystem::new(a, vec![Matrix::identity(2, 2)], vec![Matrix::identity(2, 2)]).unwrap();
        let setup = Setup {
            priorities: default_priorities(&graph),
            graph,
            sys,
            controller_targets: PlacementTargets::from_real(&[0.3, 0.2]),
            observer_targets: PlacementTargets::from_real(&[0.1, 0.05]),
            controller: ProtocolConfig::new(PlacementConfig::default(), 1),
            observer: ProtocolConfig::new(PlacementConfig::default(), 1),
            election_keys: vec![0],
            consensus_tol: consensus::DEFAULT_RANK_TOL,
        };
        let init = initialize(&setup).unwrap();
        assert_eq!(init.election.leader, 0);
        assert_eq!(init.m_bar, 3);
        assert!(numerics::is_schur_stable(init.controller_matrix(), 0.0).unwrap());
        assert!(numerics::is_schur_stable(init.observer_matrix(), 0.0).unwrap());
    }

    #[test]
    fn agreement_examples() {
        let g = Digraph::directed_cycle(3).unwrap();
        let same = vec![Vector::from_element(2, 1.5); 3];
        let (agreed, _) = agreement_phase(&g, &same, 11, consensus::DEFAULT_RANK_TOL).unwrap();
        for v in agreed {
            assert!((v - Vector::from_element(2, 1.5)).norm() < 1e-12);
        }
        let xs: Vec<Vector> = [0.0, 3.0, 6.0].iter().map(|&x| Vector::from_element(1, x)).collect();
        let (agreed, rounds) = agreement_phase(&g, &xs, 11, consensus::DEFAULT_RANK_TOL).unwrap();
        assert!(rounds <= 11);
        for v in agreed {
            assert!((v[0] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_estimate_gives_zero_error() {
        let setup = four_node_setup();
        let init = initialize(&setup).unwrap();
        let x = Vector::from_fn(8, |i, _| 0.3 * i as f64 - 1.0);
        let mut nodes = build_estimators(&init, &vec![x.clone(); 4]);
        let (next, _) = estimate_and_control_step(&setup.sys, &mut nodes, &x).unwrap();
        for nd in &nodes {
            assert!((&next - &nd.x_hat).norm() < 1e-12 * next.norm().max(1.0));
        }
    }

    #[test]
    fn horizon_zero_has_initial_row_only() {
        let setup = four_node_setup();
        let init = initialize(&setup).unwrap();
        let trace = run_closed_loop(&setup, &init, &Vector::from_element(8, 1.0), &vec![Vector::zeros(8); 4], 0, 1.0).unwrap();
        assert_eq!(trace.rows.len(), 1);
        assert_eq!(trace.rows[0].t, 0.0);
    }

    #[test]
    fn four_node_closed_loop() {
        let setup = four_node_setup();
        let init = initialize(&setup).unwrap();
        let trace = run_closed_loop(&setup, &init, &Vector::from_element(8, 1.0), &vec![Vector::zeros(8); 4], 60, 1.0).unwrap();
        let (avg, local) = error_recursion_residuals(&trace, &init, &setup.sys);
        assert!(avg <= 1e-10, "average recursion residual {avg:e}");
        assert!(local <= 1e-10, "local recursion residual {local:e}");
        for row in &trace.rows {
            assert!(row.agreement_error <= 1e-8, "step {} agreement {:e}", row.k, row.agreement_error);
            assert!(row.rounds_used <= init.m_bar);
            let mean_e = row.e.iter().fold(Vector::zeros(8), |acc, e| acc + e) / 4.0;
            assert!((&mean_e - &row.e_bar).norm() <= 1e-12 * row.norm_ebar.max(1.0));
        }
        // the closed loop is far from normal, so measure decay against the transient peak
        let peak = trace.rows.iter().map(|r| r.norm_x).fold(0.0, f64::max);
        assert!(trace.rows[60].norm_x < 1e-7 * peak);
        assert!(trace.rows[60].norm_ebar < 1e-12);
    }

    #[test]
    fn deterministic_traces() {
        let setup = four_node_setup();
        let init = initialize(&setup).unwrap();
        let run = || run_closed_loop(&setup, &init, &Vector::from_element(8, 1.0), &vec![Vector::zeros(8); 4], 20, 0.5).unwrap();
        assert_eq!(run(), run());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn separation_drives_state_and_error_to_zero(x0 in proptest::collection::vec(-2.0..2.0f64, 8)) {
            let setup = four_node_setup();
            let init = initialize(&setup).unwrap();
            let x0 = Vector::from_vec(x0);
            let trace = run_closed_loop(&setup, &init, &x0, &vec![Vector::zeros(8); 4], 60, 1.0).unwrap();
            let peak = trace.rows.iter().map(|r| r.norm_x).fold(0.0, f64::max);
            prop_assert!(trace.rows[60].norm_x <= 1e-7 * peak.max(1e-12));
            prop_assert!(trace.rows[60].norm_ebar <= 1e-12 * trace.rows[0].norm_ebar.max(1.0));
            prop_assert!(trace.rows.iter().all(|r| r.norm_x.is_finite()));
        }
    }
}
