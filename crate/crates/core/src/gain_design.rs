//! Rank-one eigenvalue placement through left eigenvectors, its per-agent
//! iteration, leader election by max-consensus and the token-passing protocol
//! that lets agents pick their gains one after another.

use std::collections::BTreeSet;

use num_complex::Complex64;
use thiserror::Error;

use crate::network::{Digraph, NetworkError, SyncFabric};
use crate::numerics::{self, CMatrix, CVector, Matrix, NumericsError};
use crate::plant::LtiSystem;

/// Targets closer than this to each other's conjugate count as a pair.
const CONJ_TOL: f64 = 1e-12;
/// Largest imaginary residue accepted when realifying a conjugate-pair gain.
const REALIFY_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GainError {
    #[error("invalid targets: {0}")]
    InvalidTargets(String),
    #[error("placement targets exhausted while placeable unstable eigenvalues remain")]
    InsufficientTargets,
    #[error("eigenvalue is not controllable through this column (|wᵀb| = {0:e})")]
    UncontrollableDirection(f64),
    #[error("conjugate-pair gain has imaginary residue {0:e}")]
    ComplexResidue(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("token protocol failure: {0}")]
    ProtocolFailure(String),
    #[error("leader election disagreement after {rounds} rounds: {leaders:?}")]
    LeaderDisagreement { rounds: usize, leaders: Vec<usize> },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Ordered target eigenvalues with consumption flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementTargets {
    values: Vec<Complex64>,
    consumed: Vec<bool>,
}

impl PlacementTargets {
    pub fn new(values: Vec<Complex64>) -> Result<Self, GainError> {
        for (i, t) in values.iter().enumerate() {
            if !t.re.is_finite() || !t.im.is_finite() {
                return Err(GainError::InvalidTargets(format!("target {i} is not finite")));
            }
        }
        // every complex target needs a distinct conjugate partner
        let mut paired = vec![false; values.len()];
        for i in 0..values.len() {
            if numerics::is_real(values[i]) || paired[i] {
                continue;
            }
            let partner = (0..values.len())
                .find(|&j| j != i && !paired[j] && (values[j] - values[i].conj()).norm() <= CONJ_TOL);
            match partner {
                Some(j) => {
                    paired[i] = true;
                    paired[j] = true;
                }
                None => {
                    return Err(GainError::InvalidTargets(format!(
                        "target {} has no conjugate partner",
                        values[i]
                    )))
                }
            }
        }
        let values: Vec<Complex64> = values
            .into_iter()
            .map(|t| if numerics::is_real(t) { Complex64::new(t.re, 0.0) } else { t })
            .collect();
        let consumed = vec![false; values.len()];
        Ok(Self { values, consumed })
    }

    pub fn from_real(values: &[f64]) -> Self {
        Self::new(values.iter().map(|&v| Complex64::new(v, 0.0)).collect()).expect("real targets are conjugate closed")
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn remaining(&self) -> usize {
        self.consumed.iter().filter(|c| !**c).count()
    }

    /// First unconsumed real target.
    pub fn take_real(&mut self) -> Result<Complex64, GainError> {
        let i = (0..self.values.len())
            .find(|&i| !self.consumed[i] && numerics::is_real(self.values[i]))
            .ok_or(GainError::InsufficientTargets)?;
        self.consumed[i] = true;
        Ok(self.values[i])
    }

    /// First unconsumed target plus its partner: the conjugate for a complex
    /// target, the next real target for a real one.
    pub fn take_pair(&mut self) -> Result<(Complex64, Complex64), GainError> {
        let first = (0..self.values.len()).find(|&i| !self.consumed[i]).ok_or(GainError::InsufficientTargets)?;
        let t = self.values[first];
        let partner = (first + 1..self.values.len()).find(|&j| {
            !self.consumed[j]
                && if numerics::is_real(t) {
                    numerics::is_real(self.values[j])
                } else {
                    (self.values[j] - t.conj()).norm() <= CONJ_TOL
                }
        });
        let j = partner.ok_or(GainError::InsufficientTargets)?;
        self.consumed[first] = true;
        self.consumed[j] = true;
        Ok((t, self.values[j]))
    }
}

/// `𝒦 = ((λ̄ − λ)/(wᵀb))·wᵀ`: moves `λ` to `λ̄` and leaves the rest of the
/// spectrum of `A_eff + b𝒦` in place.
pub fn place_single(
    a_eff: &CMatrix,
    b: &CVector,
    value: Complex64,
    target: Complex64,
    w: &CVector,
) -> Result<CVector, GainError> {
    let n = a_eff.nrows();
    if !a_eff.is_square() || b.len() != n || w.len() != n {
        return Err(GainError::Dimension(format!(
            "A_eff {}x{}, b {}, w {}",
            a_eff.nrows(),
            a_eff.ncols(),
            b.len(),
            w.len()
        )));
    }
    let wb: Complex64 = w.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    if wb.norm() <= 1e-12 * w.norm() * b.norm().max(1.0) {
        return Err(GainError::UncontrollableDirection(wb.norm()));
    }
    let scale = (target - value) / wb;
    Ok(w.map(|z| z * scale))
}

/// One eigenvalue moved by an agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub column: usize,
    pub from: Complex64,
    pub to: Complex64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacementConfig {
    /// Eigenvalues with modulus at or above `1 − stability_margin` are unstable.
    pub stability_margin: f64,
    /// Relative tolerance for the PBH rank test.
    pub pbh_tol: f64,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self { stability_margin: 1e-9, pbh_tol: 1e-9 }
    }
}

impl PlacementConfig {
    pub fn radius(&self) -> f64 {
        1.0 - self.stability_margin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentPlacement {
    /// `q_i × n`.
    pub gain: Matrix,
    pub placements: Vec<Placement>,
}

/// Left eigenvector for `value` with the largest projection on `b`. For a
/// repeated eigenvalue this combines the whole left eigenspace.
fn best_left_vector(m: &CMatrix, value: Complex64, multiplicity: usize, b: &CVector) -> CVector {
    let n = m.nrows();
    let scale = m.norm().max(1.0);
    let shifted = m.transpose() - CMatrix::identity(n, n) * value;
    let svd = nalgebra::linalg::SVD::new(shifted, false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let sv = &svd.singular_values;
    let rows = v_t.nrows();
    let mut basis = Vec::new();
    for k in 0..multiplicity.max(1).min(rows) {
        let idx = rows - 1 - k;
        if k > 0 && sv[idx] > 1e-8 * scale {
            break;
        }
        let row = v_t.row(idx);
        basis.push(CVector::from_fn(n, |i, _| row[i].conj()));
    }
    let mut w = CVector::zeros(n);
    for v in &basis {
        let vb: Complex64 = v.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        w += v * vb.conj();
    }
    let norm = w.norm();
    if norm == 0.0 {
        basis.swap_remove(0)
    } else {
        w / Complex64::new(norm, 0.0)
    }
}

fn realify(k: &CVector) -> Result<numerics::Vector, GainError> {
    let residue = k.iter().fold(0.0_f64, |acc, z| acc.max(z.im.abs()));
    let magnitude = k.iter().fold(0.0_f64, |acc, z| acc.max(z.norm()));
    if residue > REALIFY_TOL * magnitude.max(1.0) {
        return Err(GainError::ComplexResidue(residue));
    }
    Ok(k.map(|z| z.re))
}

/// Iterated placement for one agent: for each column of `B_i`, left to right,
/// every unstable eigenvalue of the current matrix that the column controls
/// is moved to the next target, using the left eigenvector of the already
/// updated matrix. Rows are stacked into `K_i`.
pub fn place_for_agent(
    a_eff: &Matrix,
    b_i: &Matrix,
    targets: &mut PlacementTargets,
    cfg: &PlacementConfig,
) -> Result<AgentPlacement, GainError> {
    let n = a_eff.nrows();
    if !a_eff.is_square() || b_i.nrows() != n {
        return Err(GainError::Dimension(format!("A_eff {}x{}, B_i {}x{}", n, a_eff.ncols(), b_i.nrows(), b_i.ncols())));
    }
    let radius = cfg.radius();
    let mut m = a_eff.clone();
    let mut gain = Matrix::zeros(b_i.ncols(), n);
    let mut placements = Vec::new();
    for col in 0..b_i.ncols() {
        let b_col = b_i.columns(col, 1).into_owned();
        let b = b_i.column(col).into_owned();
        let bc = b.map(|x| Complex64::new(x, 0.0));
        // each pass places one eigenvalue or a conjugate pair; n passes suffice
        for _ in 0..=n {
            let values = numerics::eigenvalues_sorted(&m)?;
            let mc = numerics::to_complex(&m);
            let scale = m.norm().max(1.0);
            let candidate = values.iter().copied().filter(|z| z.im >= 0.0 && z.norm() >= radius).find_map(|z| {
                if !numerics::pbh_controllable(&m, &b_col, z, cfg.pbh_tol) {
                    return None;
                }
                let multiplicity = values.iter().filter(|y| (**y - z).norm() <= 1e-9 * scale).count();
                let w = best_left_vector(&mc, z, multiplicity, &bc);
                let wb: Complex64 = w.iter().zip(bc.iter()).map(|(x, y)| x * y).sum();
                (wb.norm() > 1e-9 * b.norm()).then_some((z, w))
            });
            let Some((value, w)) = candidate else { break };
            let row = if numerics::is_real(value) {
                let t = targets.take_real()?;
                let k = place_single(&mc, &bc, value, t, &w)?;
                placements.push(Placement { column: col, from: value, to: t });
                realify(&k)?
            } else {
                let (t1, t2) = targets.take_pair()?;
                let k1 = place_single(&mc, &bc, value, t1, &w)?;
                let stepped = &mc + &bc * k1.transpose();
                let w2 = numerics::left_null_vector(&stepped, value.conj());
                let k2 = place_single(&stepped, &bc, value.conj(), t2, &w2)?;
                placements.push(Placement { column: col, from: value, to: t1 });
                placements.push(Placement { column: col, from: value.conj(), to: t2 });
                realify(&(k1 + k2))?
            };
            m += &b * row.transpose();
            let mut g = gain.row_mut(col);
            g += row.transpose();
        }
    }
    Ok(AgentPlacement { gain, placements })
}

/// Eigenvalues of `after` not matched (within `tol`) to one of `before`,
/// pairing closest first.
pub fn moved_eigenvalues(before: &[Complex64], after: &[Complex64], tol: f64) -> Vec<Complex64> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, a) in after.iter().enumerate() {
        for (j, b) in before.iter().enumerate() {
            pairs.push(((a - b).norm(), i, j));
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut used_after = vec![false; after.len()];
    let mut used_before = vec![false; before.len()];
    for (d, i, j) in pairs {
        if d > tol {
            break;
        }
        if !used_after[i] && !used_before[j] {
            used_after[i] = true;
            used_before[j] = true;
        }
    }
    after.iter().zip(used_after).filter(|(_, u)| !u).map(|(z, _)| *z).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Election {
    pub leader: usize,
    /// Leader as learned by each node.
    pub per_node: Vec<usize>,
    pub rounds: usize,
}

/// Max-consensus over `(key, id)` for `rounds` rounds; the node with the
/// largest key (ties to the larger id) wins.
pub fn elect_leader(graph: &Digraph, rounds: usize, keys: &[u64]) -> Result<Election, GainError> {
    let n = graph.node_count();
    if keys.len() != n {
        return Err(GainError::Dimension(format!("{} election keys for {n} nodes", keys.len())));
    }
    let mut best: Vec<(u64, usize)> = (0..n).map(|j| (keys[j], j)).collect();
    let mut fabric = SyncFabric::new(graph.clone());
    for _ in 0..rounds {
        let snapshot = best.clone();
        fabric.round_exchange(
            |out| {
                out.broadcast(snapshot[out.node()]);
                Ok(())
            },
            |j, inbox| {
                for (_, cand) in inbox {
                    best[j] = best[j].max(cand);
                }
            },
        )?;
    }
    let per_node: Vec<usize> = best.iter().map(|b| b.1).collect();
    if per_node.iter().any(|&l| l != per_node[0]) {
        return Err(GainError::LeaderDisagreement { rounds, leaders: per_node });
    }
    Ok(Election { leader: per_node[0], per_node, rounds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Control,
    Observer,
}

/// The writable message of the protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct GainToken {
    pub f: Matrix,
    pub visited: BTreeSet<usize>,
    pub read_only: bool,
    pub hop_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub placement: PlacementConfig,
    /// Token transmissions allowed before the protocol gives up.
    pub hop_cap: usize,
}

impl ProtocolConfig {
    pub fn new(placement: PlacementConfig, nodes: usize) -> Self {
        Self { placement, hop_cap: default_hop_cap(nodes) }
    }
}

pub fn default_hop_cap(nodes: usize) -> usize {
    2 * nodes * nodes + nodes
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenOutcome {
    pub mode: Mode,
    /// `K_i` (`q_i × n`) in control mode, `L_i` (`n × p_i`) in observer mode.
    pub gains: Vec<Matrix>,
    /// Accumulated token matrix in protocol coordinates.
    pub f: Matrix,
    /// `A + ΣB_iK_i` or `A − (1/N)ΣL_iC_i`.
    pub closed_loop: Matrix,
    pub placements: Vec<Vec<Placement>>,
    /// Nodes in the order they first received the writable token.
    pub visit_order: Vec<usize>,
    /// Node that found `A + F` Schur and started the flood.
    pub declared_by: usize,
    /// Point-to-point token transmissions before the token became read-only.
    pub hop_count: usize,
    pub flood_transmissions: usize,
    /// The read-only `F` as received by each node.
    pub known_f: Vec<Matrix>,
    pub rounds: usize,
}

#[derive(Debug, Clone)]
enum TokenMsg {
    Writable(GainToken),
    ReadOnly(Matrix),
}

/// Protocol-coordinates pair: `(A, B_i)` for control, `(Aᵀ, −C_iᵀ/N)` for the observer dual.
fn protocol_pair(sys: &LtiSystem, mode: Mode) -> (Matrix, Vec<Matrix>) {
    match mode {
        Mode::Control => (sys.a.clone(), sys.b.clone()),
        Mode::Observer => {
            let n_agents = sys.agents() as f64;
            (sys.a.transpose(), sys.c.iter().map(|c| -c.transpose() / n_agents).collect())
        }
    }
}

fn next_hop(
    graph: &Digraph,
    node: usize,
    visited: &BTreeSet<usize>,
    priorities: &[Vec<usize>],
    dist: &[Vec<Option<usize>>],
) -> Option<usize> {
    if let Some(&to) = priorities[node].iter().find(|v| !visited.contains(v)) {
        return Some(to);
    }
    let unvisited: Vec<usize> = (0..graph.node_count()).filter(|v| !visited.contains(v)).collect();
    if unvisited.is_empty() {
        // everyone has placed; the next receiver only has to run the Schur check
        return priorities[node].first().copied();
    }
    graph
        .out_neighbors(node)
        .iter()
        .filter_map(|&u| unvisited.iter().filter_map(|&v| dist[u][v]).min().map(|d| (d, u)))
        .min()
        .map(|(_, u)| u)
}

/// Default priorities: out-neighbours by ascending id.
pub fn default_priorities(graph: &Digraph) -> Vec<Vec<usize>> {
    (0..graph.node_count()).map(|j| graph.out_neighbors(j).to_vec()).collect()
}

/// Runs the token protocol from `leader` on the synchronous fabric.
pub fn run_token_protocol(
    graph: &Digraph,
    sys: &LtiSystem,
    targets: &PlacementTargets,
    mode: Mode,
    leader: usize,
    priorities: &[Vec<usize>],
    cfg: &ProtocolConfig,
) -> Result<TokenOutcome, GainError> {
    let n_nodes = graph.node_count();
    if sys.agents() != n_nodes || leader >= n_nodes || priorities.len() != n_nodes {
        return Err(GainError::Dimension(format!(
            "{} agents, {} nodes, leader {}, {} priority lists",
            sys.agents(),
            n_nodes,
            leader,
            priorities.len()
        )));
    }
    for (j, list) in priorities.iter().enumerate() {
        let listed: BTreeSet<usize> = list.iter().copied().collect();
        let actual: BTreeSet<usize> = graph.out_neighbors(j).iter().copied().collect();
        if listed != actual || list.len() != actual.len() {
            return Err(GainError::Dimension(format!("priorities of node {j} must list each out-neighbour once")));
        }
    }
    let (a, b_tilde) = protocol_pair(sys, mode);
    let n = a.nrows();
    let radius = cfg.placement.radius();
    let dist = graph.all_pairs_distances();
    let mut targets = targets.clone();
    let mut local_gains: Vec<Matrix> = b_tilde.iter().map(|b| Matrix::zeros(b.ncols(), n)).collect();
    let mut placements = vec![Vec::new(); n_nodes];
    let mut visit_order = Vec::new();
    let mut known_f: Vec<Option<Matrix>> = vec![None; n_nodes];
    let mut flooders: Vec<usize> = Vec::new();
    let mut declared_by = None;
    let mut hop_count = 0;
    let mut flood_transmissions = 0;

    let mut fabric = SyncFabric::new(graph.clone());
    let mut arriving: Option<(usize, GainToken)> = Some((
        leader,
        GainToken { f: Matrix::zeros(n, n), visited: BTreeSet::new(), read_only: false, hop_count: 0 },
    ));

    loop {
        // the token holder acts on what it received
        let mut outgoing: Option<(usize, usize, GainToken)> = None;
        if let Some((j, mut token)) = arriving.take() {
            if numerics::is_schur_stable(&(&a + &token.f), cfg.placement.stability_margin)? {
                token.read_only = true;
                known_f[j] = Some(token.f.clone());
                flooders.push(j);
                declared_by = Some(j);
            } else {
                if token.visited.insert(j) {
                    visit_order.push(j);
                    let placed = place_for_agent(&(&a + &token.f), &b_tilde[j], &mut targets, &cfg.placement)?;
                    token.f += &b_tilde[j] * &placed.gain;
                    local_gains[j] = placed.gain;
                    placements[j] = placed.placements;
                } else if token.visited.len() == n_nodes {
                    return Err(GainError::ProtocolFailure(format!(
                        "every agent has placed its eigenvalues but A + F has spectral radius {:.6} ≥ {radius}",
                        numerics::spectral_radius(&(&a + &token.f))?
                    )));
                }
                if n_nodes == 1 {
                    // a lone node hands the token back to itself without a transmission
                    arriving = Some((j, token));
                    continue;
                }
                if hop_count >= cfg.hop_cap {
                    return Err(GainError::ProtocolFailure(format!("hop cap {} reached", cfg.hop_cap)));
                }
                let to = next_hop(graph, j, &token.visited, priorities, &dist).ok_or_else(|| {
                    GainError::ProtocolFailure(format!("node {j} has no out-neighbour to forward to"))
                })?;
                hop_count += 1;
                token.hop_count = hop_count;
                outgoing = Some((j, to, token));
            }
        }
        if outgoing.is_none() && flooders.is_empty() {
            break;
        }
        let senders = std::mem::take(&mut flooders);
        let mut inboxes: Vec<Vec<(usize, TokenMsg)>> = vec![Vec::new(); n_nodes];
        let flood_before = fabric.messages_sent();
        fabric.round_exchange(
            |out| {
                let j = out.node();
                if let Some((from, to, token)) = &outgoing {
                    if *from == j {
                        out.send(*to, TokenMsg::Writable(token.clone()))?;
                    }
                }
                if senders.contains(&j) {
                    let f = known_f[j].clone().expect("flooder knows F");
                    out.broadcast(TokenMsg::ReadOnly(f));
                }
                Ok(())
            },
            |j, inbox| inboxes[j] = inbox,
        )?;
        let token_sent = usize::from(outgoing.is_some());
        flood_transmissions += fabric.messages_sent() - flood_before - token_sent;
        for (j, inbox) in inboxes.into_iter().enumerate() {
            for (_, msg) in inbox {
                match msg {
                    TokenMsg::Writable(token) => arriving = Some((j, token)),
                    TokenMsg::ReadOnly(f) => {
                        if known_f[j].is_none() {
                            known_f[j] = Some(f);
                            flooders.push(j);
                        }
                    }
                }
            }
        }
    }

    let declared_by = declared_by.ok_or_else(|| GainError::ProtocolFailure("token never became read-only".into()))?;
    let f = known_f[declared_by].clone().expect("declaring node holds F");
    let known_f: Vec<Matrix> = known_f
        .into_iter()
        .enumerate()
        .map(|(j, k)| k.ok_or_else(|| GainError::ProtocolFailure(format!("read-only message never reached node {j}"))))
        .collect::<Result<_, _>>()?;
    let (gains, closed_loop) = match mode {
        Mode::Control => (local_gains, &a + &f),
        Mode::Observer => (local_gains.iter().map(Matrix::transpose).collect(), (&a + &f).transpose()),
    };
    Ok(TokenOutcome {
        mode,
        gains,
        f,
        closed_loop,
        placements,
        visit_order,
        declared_by,
        hop_count,
        flood_transmissions,
        known_f,
        rounds: fabric.round(),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::network::tests::{four_node, strongly_connected_graph};
    use crate::numerics::Vector;
    use crate::plant::tests::four_agent_plant;
    use proptest::prelude::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn spectrum(m: &Matrix) -> Vec<Complex64> {
        numerics::eigenvalues_sorted(m).unwrap()
    }

    pub(crate) fn control_targets() -> PlacementTargets {
        PlacementTargets::from_real(&(0..8).map(|i| 0.60 + 0.01 * i as f64).collect::<Vec<_>>())
    }

    pub(crate) fn observer_targets() -> PlacementTargets {
        PlacementTargets::from_real(&(0..8).map(|i| 0.20 + 0.01 * i as f64).collect::<Vec<_>>())
    }

    #[test]
    fn place_single_diagonal() {
        let a = numerics::to_complex(&Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 0.5])));
        let b = CVector::from_vec(vec![c(1.0), c(0.0)]);
        let w = CVector::from_vec(vec![c(1.0), c(0.0)]);
        let k = place_single(&a, &b, c(2.0), c(0.6), &w).unwrap();
        assert!((k[0] - c(-1.4)).norm() < 1e-15 && k[1].norm() == 0.0);
        let closed = &a + &b * k.transpose();
        assert!((closed[(0, 0)] - c(0.6)).norm() < 1e-15);
        let k = place_single(&a, &b, c(2.0), c(2.0), &w).unwrap();
        assert_eq!(k.norm(), 0.0);
    }

    #[test]
    fn place_single_rejects_orthogonal_direction() {
        let a = numerics::to_complex(&Matrix::identity(2, 2));
        let b = CVector::from_vec(vec![c(1.0), c(0.0)]);
        let w = CVector::from_vec(vec![c(0.0), c(1.0)]);
        assert!(matches!(place_single(&a, &b, c(1.0), c(0.5), &w), Err(GainError::UncontrollableDirection(_))));
    }

    #[test]
    fn targets_validation_and_consumption() {
        assert!(PlacementTargets::new(vec![Complex64::new(0.1, 0.2)]).is_err());
        let mut t = PlacementTargets::new(vec![c(0.1), Complex64::new(0.2, 0.3), c(0.4), Complex64::new(0.2, -0.3)]).unwrap();
        assert_eq!(t.take_pair().unwrap(), (c(0.1), c(0.4)));
        assert_eq!(t.take_pair().unwrap(), (Complex64::new(0.2, 0.3), Complex64::new(0.2, -0.3)));
        assert!(matches!(t.take_real(), Err(GainError::InsufficientTargets)));
    }

    #[test]
    fn schur_matrix_needs_no_gain() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![0.5, 0.2]));
        let mut t = PlacementTargets::from_real(&[0.1, 0.1]);
        let out = place_for_agent(&a, &Matrix::identity(2, 1), &mut t, &PlacementConfig::default()).unwrap();
        assert_eq!(out.gain, Matrix::zeros(1, 2));
        assert_eq!(t.remaining(), 2);
    }

    #[test]
    fn unexcited_mode_needs_no_gain() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![0.5, 2.0]));
        let mut t = PlacementTargets::from_real(&[0.1]);
        let out = place_for_agent(&a, &Matrix::identity(2, 1), &mut t, &PlacementConfig::default()).unwrap();
        assert_eq!(out.gain, Matrix::zeros(1, 2));
    }

    #[test]
    fn complex_pair_placement_is_real() {
        // rotation with modulus 1.2
        let a = Matrix::from_row_slice(2, 2, &[0.0, -1.2, 1.2, 0.0]);
        let b = Matrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let mut t = PlacementTargets::new(vec![Complex64::new(0.3, 0.2), Complex64::new(0.3, -0.2)]).unwrap();
        let out = place_for_agent(&a, &b, &mut t, &PlacementConfig::default()).unwrap();
        let closed = &a + &b * &out.gain;
        let eig = spectrum(&closed);
        assert!((eig[0] - Complex64::new(0.3, 0.2)).norm() < 1e-10);
        assert!((eig[1] - Complex64::new(0.3, -0.2)).norm() < 1e-10);
    }

    #[test]
    fn insufficient_targets() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 3.0]));
        let mut t = PlacementTargets::from_real(&[0.1]);
        let err = place_for_agent(&a, &Matrix::identity(2, 2), &mut t, &PlacementConfig::default());
        assert_eq!(err, Err(GainError::InsufficientTargets));
    }

    #[test]
    fn four_agent_first_controller_placement() {
        let sys = four_agent_plant();
        let mut t = control_targets();
        let cfg = PlacementConfig { stability_margin: 0.325, pbh_tol: 1e-9 };
        let out = place_for_agent(&sys.a, &sys.b[0], &mut t, &cfg).unwrap();
        let after = spectrum(&(&sys.a + &sys.b[0] * &out.gain));
        let moved = moved_eigenvalues(&spectrum(&sys.a), &after, 1e-6);
        assert_eq!(moved.len(), out.placements.len());
        for z in moved {
            assert!(t.values().iter().any(|t| (t - z).norm() < 1e-6), "{z} not a target");
        }
    }

    #[test]
    fn leader_examples() {
        let g = Digraph::from_edges(1, &[]).unwrap();
        assert_eq!(elect_leader(&g, 0, &[5]).unwrap().leader, 0);
        let g = four_node();
        assert_eq!(elect_leader(&g, 2, &[0, 1, 2, 3]).unwrap().leader, 3);
        assert_eq!(elect_leader(&g, 2, &[4, 3, 2, 1]).unwrap().leader, 0);
        assert!(matches!(elect_leader(&g, 0, &[0, 1, 2, 3]), Err(GainError::LeaderDisagreement { .. })));
    }

    fn four_agent_protocol(mode: Mode) -> TokenOutcome {
        let sys = four_agent_plant();
        let g = four_node();
        let (targets, margin) = match mode {
            Mode::Control => (control_targets(), 0.325),
            Mode::Observer => (observer_targets(), 0.725),
        };
        let cfg = ProtocolConfig::new(PlacementConfig { stability_margin: margin, pbh_tol: 1e-9 }, 4);
        run_token_protocol(&g, &sys, &targets, mode, 0, &default_priorities(&g), &cfg).unwrap()
    }

    #[test]
    fn four_agent_control_protocol() {
        let out = four_agent_protocol(Mode::Control);
        assert_eq!(out.visit_order, vec![0, 1, 2]);
        assert_eq!(out.declared_by, 3);
        assert_eq!(out.gains[3], Matrix::zeros(1, 8));
        assert!(numerics::is_schur_stable(&out.closed_loop, 0.0).unwrap());
        assert_eq!(out.hop_count, 3);
        assert_eq!(out.flood_transmissions, four_node().edge_count());
        for f in &out.known_f {
            assert_eq!(f, &out.f);
        }
    }

    #[test]
    fn four_agent_observer_protocol_matches_printed_gains() {
        let out = four_agent_protocol(Mode::Observer);
        assert_eq!(out.gains[2], Matrix::zeros(8, 1));
        let printed = [
            (0, 0, 12.56),
            (1, 0, -8.1221),
            (4, 0, 7.0165),
            (5, 0, 7.6708),
            (6, 0, -0.1299),
            (7, 0, -5.7761),
            (2, 1, 6.04),
            (3, 1, 7.76),
            (6, 3, 3.48),
            (7, 3, 8.368),
        ];
        for (row, agent, value) in printed {
            assert!((out.gains[agent][(row, 0)] - value).abs() < 5e-5, "L_{agent}[{row}] = {}", out.gains[agent][(row, 0)]);
        }
        assert!(numerics::is_schur_stable(&out.closed_loop, 0.0).unwrap());
    }

    #[test]
    fn schur_plant_floods_immediately() {
        let sys = LtiSystem::new(
            Matrix::identity(2, 2) * 0.5,
            vec![Matrix::identity(2, 1); 3],
            vec![Matrix::identity(1, 2); 3],
        )
        .unwrap();
        let g = Digraph::directed_cycle(3).unwrap();
        let cfg = ProtocolConfig::new(PlacementConfig::default(), 3);
        let out = run_token_protocol(&g, &sys, &PlacementTargets::from_real(&[]), Mode::Control, 0, &default_priorities(&g), &cfg).unwrap();
        assert_eq!(out.hop_count, 0);
        assert!(out.gains.iter().all(|k| k.iter().all(|x| *x == 0.0)));
        assert_eq!(out.flood_transmissions, 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn single_placement_invariance(
            n in 2usize..=6,
            entries in proptest::collection::vec(-1.5..1.5f64, 36),
            bvec in proptest::collection::vec(-1.0..1.0f64, 6),
            target in (-0.9..0.9f64, 0.0..0.5f64),
            pick in 0usize..6,
        ) {
            let a = Matrix::from_fn(n, n, |i, j| entries[i * 6 + j]);
            let b = Vector::from_fn(n, |i, _| bvec[i]);
            let pairs = numerics::eigen_left(&a).unwrap();
            let pair = &pairs[pick % n];
            let tol = 1e-9;
            prop_assume!(numerics::numerical_rank(&numerics::controllability_matrix(&a, &Matrix::from_column_slice(n, 1, b.as_slice())), tol) == n);
            // keep eigenvalues apart so the multiset comparison is meaningful
            let before = spectrum(&a);
            let gap = before.iter().enumerate().flat_map(|(i, x)| before.iter().skip(i + 1).map(move |y| (x - y).norm())).fold(f64::INFINITY, f64::min);
            prop_assume!(gap > 1e-3);
            let t = if pair.is_real() { c(target.0) } else { Complex64::new(target.0, target.1) };
            let bc = b.map(|x| Complex64::new(x, 0.0));
            let k = place_single(&numerics::to_complex(&a), &bc, pair.value, t, &pair.left_vector).unwrap();
            let closed = numerics::to_complex(&a) + &bc * k.transpose();
            let after = numerics::complex_eigenvalues(&closed).unwrap();
            let moved = moved_eigenvalues(&before, &after, 1e-6);
            prop_assert_eq!(moved.len(), 1, "moved {:?}", moved);
            prop_assert!((moved[0] - t).norm() < 1e-6);
        }

        #[test]
        fn protocol_on_random_systems(g in strongly_connected_graph(), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let n_nodes = g.node_count();
            prop_assume!(n_nodes <= 8);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..=6usize);
            let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.5..1.5));
            let b: Vec<Matrix> = (0..n_nodes).map(|_| Matrix::from_fn(n, 1, |_, _| if rng.random_bool(0.6) { rng.random_range(-1.0..1.0) } else { 0.0 })).collect();
            let cs: Vec<Matrix> = (0..n_nodes).map(|_| Matrix::from_fn(1, n, |_, _| rng.random_range(-1.0..1.0))).collect();
            let sys = LtiSystem::new(a, b, cs).unwrap();
            prop_assume!(crate::plant::joint_rank_checks(&sys).0);
            // unstable eigenvalues must be simple and well separated for rank-one placement
            let eig = spectrum(&sys.a);
            let gap = eig.iter().enumerate().flat_map(|(i, x)| eig.iter().skip(i + 1).map(move |y| (x - y).norm())).fold(f64::INFINITY, f64::min);
            prop_assume!(gap > 1e-3);
            // joint controllability with margin: σ_min([λI − A, B]) bounded away from 0
            let bstack = numerics::to_complex(&sys.stacked_b());
            prop_assume!(eig.iter().filter(|z| z.norm() >= 1.0).all(|z| {
                let mut pbh = CMatrix::zeros(n, n + bstack.ncols());
                pbh.view_mut((0, 0), (n, n)).copy_from(&(CMatrix::identity(n, n) * *z - numerics::to_complex(&sys.a)));
                pbh.view_mut((0, n), (n, bstack.ncols())).copy_from(&bstack);
                pbh.singular_values().min() > 0.05
            }));
            let targets: Vec<Complex64> = (0..n).flat_map(|i| {
                let r = 0.1 + 0.05 * i as f64;
                [Complex64::new(r, 0.1), Complex64::new(r, -0.1)]
            }).chain((0..n).map(|i| c(-0.3 + 0.04 * i as f64))).collect();
            // a target next to an eigenvalue that stays put makes an ill-conditioned pair
            prop_assume!(targets.iter().all(|t| eig.iter().all(|z| (t - z).norm() > 0.05)));
            let targets = PlacementTargets::new(targets).unwrap();
            let cfg = ProtocolConfig::new(PlacementConfig::default(), n_nodes);
            let out = run_token_protocol(&g, &sys, &targets, Mode::Control, 0, &default_priorities(&g), &cfg).unwrap();
            prop_assert!(numerics::is_schur_stable(&out.closed_loop, 0.0).unwrap());
            // closely spaced targets are ill-conditioned eigenvalues, so check the
            // backward residual σ_min(tI − A_cl) rather than computed eigenvalues
            let cl = numerics::to_complex(&out.closed_loop);
            let scale = 1.0 + cl.norm();
            for p in out.placements.iter().flatten() {
                let shifted = CMatrix::identity(n, n) * p.to - &cl;
                let smin = shifted.singular_values().min();
                prop_assert!(smin <= 1e-9 * scale, "target {} residual {:e}", p.to, smin);
                prop_assert!(targets.values().contains(&p.to));
            }
            prop_assert!(moved_eigenvalues(&eig, &spectrum(&out.closed_loop), 1e-4).len() <= out.placements.iter().flatten().count());
            prop_assert_eq!(out.flood_transmissions, g.edge_count());
            prop_assert!(out.hop_count <= n_nodes * n_nodes);
        }
    }
}
