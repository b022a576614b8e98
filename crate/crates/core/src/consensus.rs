//! Ratio consensus on a column-stochastic digraph, finite-time exact averaging
//! from defective Hankel matrices of successive differences, and the
//! max-consensus based termination rule that yields the round budget m̄.

use thiserror::Error;

use crate::network::{Digraph, NetworkError, SyncFabric};
use crate::numerics::{self, Matrix, NumericsError};

/// Default relative tolerance for Hankel rank-loss detection.
pub const DEFAULT_RANK_TOL: f64 = 1e-11;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsensusError {
    #[error("initial values must be finite and have one equal-length vector per node")]
    InvalidInput,
    #[error("graph is not strongly connected")]
    NotStronglyConnected,
    #[error("no Hankel rank loss at nodes {undetected:?} within {rounds} rounds (degenerate initialization)")]
    DegenerateInitialization {
        rounds: usize,
        undetected: Vec<usize>,
        /// Per-node `(α history, π history)` so callers can perturb and retry.
        history: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
    },
    #[error("termination did not complete within {0} rounds")]
    TerminationCap(usize),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioNodeState {
    pub alpha: Vec<f64>,
    pub pi: f64,
    pub alpha_history: Vec<Vec<f64>>,
    pub pi_history: Vec<f64>,
    /// Step counter c_j.
    pub counter: usize,
    /// Agreement counter r_j.
    pub agreement: usize,
    /// Max-consensus value φ_j.
    pub phi: usize,
    /// Detected minimal-polynomial degree M_j.
    pub degree: Option<usize>,
    /// c°_j = 2(M_j + 1), the value c_j froze at.
    pub frozen_counter: Option<usize>,
    pub average: Option<Vec<f64>>,
    pub detected_round: Option<usize>,
    pub done: bool,
}

impl RatioNodeState {
    pub fn new(alpha: Vec<f64>) -> Self {
        Self {
            alpha_history: vec![alpha.clone()],
            pi_history: vec![1.0],
            alpha,
            pi: 1.0,
            counter: 0,
            agreement: 0,
            phi: 0,
            degree: None,
            frozen_counter: None,
            average: None,
            detected_round: None,
            done: false,
        }
    }

    pub fn round(&self) -> usize {
        self.pi_history.len() - 1
    }

    fn push(&mut self, alpha: Vec<f64>, pi: f64) {
        self.alpha_history.push(alpha.clone());
        self.pi_history.push(pi);
        self.alpha = alpha;
        self.pi = pi;
    }

    /// Runs the Hankel test on the current history. Only odd rounds
    /// `m = 2k + 1` supply the `2k + 1` differences a `(k+1)`-square Hankel needs.
    fn try_detect(&mut self, rel_tol: f64) {
        let m = self.round();
        if self.degree.is_some() || m.is_multiple_of(2) {
            return;
        }
        let k = (m - 1) / 2;
        if let Some(mu) = final_value(&self.alpha_history, &self.pi_history, k, rel_tol) {
            self.degree = Some(k);
            self.frozen_counter = Some(2 * (k + 1));
            self.counter = 2 * (k + 1);
            self.average = Some(mu);
            self.detected_round = Some(m);
        }
    }
}

/// Normalized Hankel block of a scalar history, `None` when its differences
/// are negligible next to the values themselves.
fn hankel_block(values: &[f64], k: usize, rel_tol: f64) -> Option<Matrix> {
    let diffs: Vec<f64> = values.windows(2).take(2 * k + 1).map(|w| w[1] - w[0]).collect();
    let h = numerics::hankel_from_differences(&diffs).ok()?;
    let scale = values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let norm = h.norm();
    if norm <= rel_tol * scale || norm == 0.0 {
        return None;
    }
    Some(h / norm)
}

/// Final value from the first `k + 1` iterates when every nonzero block is
/// rank deficient and the stacked blocks share a kernel.
fn final_value(alpha_hist: &[Vec<f64>], pi_hist: &[f64], k: usize, rel_tol: f64) -> Option<Vec<f64>> {
    let dim = alpha_hist[0].len();
    let size = k + 1;
    let mut blocks = Vec::with_capacity(dim + 1);
    let columns = (0..dim).map(|r| alpha_hist.iter().map(|a| a[r]).collect::<Vec<_>>());
    for seq in columns.chain(std::iter::once(pi_hist.to_vec())) {
        if let Some(block) = hankel_block(&seq[..=2 * k + 1], k, rel_tol) {
            if numerics::numerical_rank(&block, rel_tol) == size {
                return None;
            }
            blocks.push(block);
        }
    }
    let beta = if blocks.is_empty() {
        let mut beta = numerics::Vector::zeros(size);
        beta[k] = 1.0;
        beta
    } else {
        let mut stacked = Matrix::zeros(size * blocks.len(), size);
        for (b, block) in blocks.iter().enumerate() {
            stacked.view_mut((b * size, 0), (size, size)).copy_from(block);
        }
        numerics::kernel_vector(&stacked, rel_tol).ok()?
    };
    let den: f64 = (0..size).map(|i| pi_hist[i] * beta[i]).sum();
    if den.abs() <= f64::MIN_POSITIVE || !den.is_finite() {
        return None;
    }
    Some(
        (0..dim)
            .map(|r| (0..size).map(|i| alpha_hist[i][r] * beta[i]).sum::<f64>() / den)
            .collect(),
    )
}

/// One ratio-consensus iteration as a direct matrix product, used as the
/// oracle for the message-passing rounds.
pub fn ratio_step(states: &[RatioNodeState], p: &Matrix) -> Vec<RatioNodeState> {
    let n = states.len();
    let dim = states.first().map_or(0, |s| s.alpha.len());
    let mut next = states.to_vec();
    for j in 0..n {
        let alpha: Vec<f64> = (0..dim)
            .map(|r| (0..n).map(|i| p[(j, i)] * states[i].alpha[r]).sum())
            .collect();
        let pi = (0..n).map(|i| p[(j, i)] * states[i].pi).sum();
        next[j].push(alpha, pi);
    }
    next
}

/// `φ_j ← max over the in-neighbourhood and j itself of max(φ_i, c_i)`.
pub fn max_consensus_step(graph: &Digraph, phi: &[usize], counters: &[usize]) -> Vec<usize> {
    (0..graph.node_count())
        .map(|j| {
            graph
                .in_neighbors(j)
                .iter()
                .chain(std::iter::once(&j))
                .map(|&i| phi[i].max(counters[i]))
                .max()
                .unwrap_or(0)
        })
        .collect()
}

/// Applies a new φ value: `r` restarts on change, otherwise counts up; the
/// node is done once `r` reaches its frozen counter.
pub fn termination_update(state: &mut RatioNodeState, new_phi: usize) {
    if new_phi != state.phi {
        state.agreement = 0;
    } else {
        state.agreement += 1;
    }
    state.phi = new_phi;
    if let Some(frozen) = state.frozen_counter {
        if state.agreement >= frozen {
            state.done = true;
        }
    }
}

/// `m̄ = 2·max_j 2(M_j + 1) − 1`.
pub fn m_bar(degrees: &[usize]) -> usize {
    2 * degrees.iter().map(|m| 2 * (m + 1)).max().unwrap_or(2) - 1
}

/// `D′ = max_j M_j`, an upper bound on the graph diameter.
pub fn diameter_upper_bound(degrees: &[usize]) -> usize {
    degrees.iter().copied().max().unwrap_or(0)
}

#[derive(Debug, Clone)]
struct RoundMsg {
    alpha: Vec<f64>,
    pi: f64,
    phi: usize,
    counter: usize,
}

/// One synchronous round on the fabric: every node broadcasts its weighted
/// share together with its previous (φ, c); receivers sum shares, advance
/// their counters, test for rank loss and, if `terminate`, update φ and r.
fn fabric_round(
    fabric: &mut SyncFabric,
    states: &mut [RatioNodeState],
    rel_tol: f64,
    terminate: bool,
) -> Result<(), ConsensusError> {
    let graph = fabric.graph().clone();
    let shares: Vec<RoundMsg> = states
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let w = 1.0 / (1.0 + graph.out_degree(j) as f64);
            RoundMsg { alpha: s.alpha.iter().map(|a| a * w).collect(), pi: s.pi * w, phi: s.phi, counter: s.counter }
        })
        .collect();
    let mut inboxes = vec![Vec::new(); states.len()];
    fabric.round_exchange(
        |out| {
            out.broadcast(shares[out.node()].clone());
            Ok(())
        },
        |j, inbox| inboxes[j] = inbox,
    )?;
    for (j, (state, inbox)) in states.iter_mut().zip(inboxes).enumerate() {
        let own = &shares[j];
        let mut alpha = own.alpha.clone();
        let mut pi = own.pi;
        let mut neighbour_max = 0;
        for (_, msg) in &inbox {
            for (a, b) in alpha.iter_mut().zip(&msg.alpha) {
                *a += b;
            }
            pi += msg.pi;
            neighbour_max = neighbour_max.max(msg.phi.max(msg.counter));
        }
        state.push(alpha, pi);
        if state.frozen_counter.is_none() {
            state.counter += 1;
        }
        state.try_detect(rel_tol);
        if terminate {
            let new_phi = state.phi.max(state.counter).max(neighbour_max);
            termination_update(state, new_phi);
        }
    }
    Ok(())
}

fn validate(graph: &Digraph, initial: &[Vec<f64>]) -> Result<(), ConsensusError> {
    let dim = initial.first().map_or(0, Vec::len);
    if initial.len() != graph.node_count()
        || initial.iter().any(|v| v.len() != dim || v.iter().any(|x| !x.is_finite()))
    {
        return Err(ConsensusError::InvalidInput);
    }
    if !graph.is_strongly_connected() {
        return Err(ConsensusError::NotStronglyConnected);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteTimeOutcome {
    pub averages: Vec<Vec<f64>>,
    pub degrees: Vec<usize>,
    pub detection_rounds: Vec<usize>,
    pub rounds_used: usize,
    pub messages: usize,
}

/// Default round cap `4N + 2`.
pub fn default_round_cap(n: usize) -> usize {
    4 * n + 2
}

/// Runs ratio consensus on the fabric until every node has detected rank
/// loss and computed its final value, or `round_cap` rounds have passed.
pub fn finite_time_average(
    graph: &Digraph,
    initial: &[Vec<f64>],
    rel_tol: f64,
    round_cap: usize,
) -> Result<FiniteTimeOutcome, ConsensusError> {
    validate(graph, initial)?;
    let mut states: Vec<RatioNodeState> = initial.iter().cloned().map(RatioNodeState::new).collect();
    let mut fabric = SyncFabric::new(graph.clone());
    while states.iter().any(|s| s.average.is_none()) {
        if fabric.round() >= round_cap {
            return Err(degenerate(&states, fabric.round()));
        }
        fabric_round(&mut fabric, &mut states, rel_tol, false)?;
    }
    Ok(FiniteTimeOutcome {
        averages: states.iter().map(|s| s.average.clone().unwrap_or_default()).collect(),
        degrees: states.iter().map(|s| s.degree.unwrap_or(0)).collect(),
        detection_rounds: states.iter().map(|s| s.detected_round.unwrap_or(0)).collect(),
        rounds_used: fabric.round(),
        messages: fabric.messages_sent(),
    })
}

fn degenerate(states: &[RatioNodeState], rounds: usize) -> ConsensusError {
    ConsensusError::DegenerateInitialization {
        rounds,
        undetected: states.iter().enumerate().filter(|(_, s)| s.average.is_none()).map(|(j, _)| j).collect(),
        history: states.iter().map(|s| (s.alpha_history.clone(), s.pi_history.clone())).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminationOutcome {
    pub averages: Vec<Vec<f64>>,
    pub degrees: Vec<usize>,
    pub detection_rounds: Vec<usize>,
    /// Round at which each node set its done flag.
    pub done_rounds: Vec<usize>,
    /// Final φ at each node, equal to max_j c°_j once done.
    pub phi: Vec<usize>,
    pub rounds_used: usize,
}

impl TerminationOutcome {
    /// m̄ as node `j` derives it from its own φ.
    pub fn m_bar_at(&self, j: usize) -> usize {
        2 * self.phi[j] - 1
    }

    /// D′ as node `j` derives it from its own φ.
    pub fn diameter_bound_at(&self, j: usize) -> usize {
        self.phi[j] / 2 - 1
    }
}

/// Ratio consensus with the distributed termination rule running alongside;
/// stops once every node is done.
pub fn run_with_termination(
    graph: &Digraph,
    initial: &[Vec<f64>],
    rel_tol: f64,
) -> Result<TerminationOutcome, ConsensusError> {
    validate(graph, initial)?;
    let n = graph.node_count();
    let detection_cap = default_round_cap(n);
    // every node freezes by the detection cap; the slowest then needs at most
    // the diameter plus its own frozen counter
    let cap = detection_cap + n + 2 * (detection_cap + 1);
    let mut states: Vec<RatioNodeState> = initial.iter().cloned().map(RatioNodeState::new).collect();
    let mut fabric = SyncFabric::new(graph.clone());
    let mut done_rounds = vec![None; n];
    while done_rounds.iter().any(Option::is_none) {
        if fabric.round() >= detection_cap && states.iter().any(|s| s.average.is_none()) {
            return Err(degenerate(&states, fabric.round()));
        }
        if fabric.round() >= cap {
            return Err(ConsensusError::TerminationCap(cap));
        }
        fabric_round(&mut fabric, &mut states, rel_tol, true)?;
        for (j, s) in states.iter().enumerate() {
            if s.done && done_rounds[j].is_none() {
                done_rounds[j] = Some(fabric.round());
            }
        }
    }
    Ok(TerminationOutcome {
        averages: states.iter().map(|s| s.average.clone().unwrap_or_default()).collect(),
        degrees: states.iter().map(|s| s.degree.unwrap_or(0)).collect(),
        detection_rounds: states.iter().map(|s| s.detected_round.unwrap_or(0)).collect(),
        done_rounds: done_rounds.into_iter().map(|d| d.unwrap_or(0)).collect(),
        phi: states.iter().map(|s| s.phi).collect(),
        rounds_used: fabric.round(),
    })
}

/// Largest relative deviation of the per-node averages from the arithmetic mean.
pub fn max_relative_error(initial: &[Vec<f64>], averages: &[Vec<f64>]) -> f64 {
    let n = initial.len() as f64;
    let dim = initial.first().map_or(0, Vec::len);
    let mut worst = 0.0_f64;
    for r in 0..dim {
        let mean = initial.iter().map(|v| v[r]).sum::<f64>() / n;
        let scale = initial.iter().fold(0.0_f64, |a, v| a.max(v[r].abs())).max(f64::MIN_POSITIVE);
        for avg in averages {
            worst = worst.max((avg[r] - mean).abs() / scale);
        }
    }
    worst
}
