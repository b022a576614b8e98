//! The acceptance suite. Each check returns a [`CriterionResult`]; the CLI's
//! `verify` command and the `acceptance` test target both print one line
//! per criterion from the same code.

use std::fmt;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batch::{self, Execution};
use crate::consensus;
use crate::gain_design::{self, Mode, PlacementTargets, ProtocolConfig, PlacementConfig, TokenOutcome};
use crate::network::{self, Digraph};
use crate::numerics::{self, Matrix, Vector};
use crate::plant::{self, LtiSystem};
use crate::runtime::{self, ClosedLoopTrace, Initialization};
use crate::scenario::{self, Scenario};

pub const EXPECTED_M_BAR: usize = 11;
pub const EXPECTED_RHO: [usize; 4] = [4, 2, 6, 2];
pub const EXPECTED_CHI: [usize; 4] = [4, 2, 2, 6];
pub const EIGEN_MATCH_TOL: f64 = 1e-6;
pub const REMARK_EIGEN_TOL: f64 = 5e-4;
pub const AVERAGE_REL_TOL: f64 = 1e-8;
pub const RECURSION_TOL: f64 = 1e-10;
pub const AGREEMENT_REL_TOL: f64 = 1e-8;
pub const RATE_BOUND: f64 = 0.27 + 0.05;
pub const RATE_FIT_FROM: usize = 5;
pub const RATE_FIT_TO: usize = 60;
pub const MIN_RANDOM_GRAPHS: usize = 100;
pub const MIN_RANDOM_PLACEMENTS: usize = 100;
/// Sweep sizes actually run. Rare behaviour (a few percent of graphs) only
/// shows up reliably well above the minimum.
pub const RANDOM_GRAPH_TRIALS: usize = 1000;
pub const RANDOM_PLACEMENT_TRIALS: usize = 1000;
pub const TAUS: [f64; 3] = [0.1, 1.0, 10.0];
pub const TIME_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub id: String,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CriterionResult {
    fn new(id: impl Into<String>, name: &'static str, passed: bool, detail: String) -> Self {
        Self { id: id.into(), name, passed, detail }
    }

    fn error(id: impl Into<String>, name: &'static str, err: impl fmt::Display) -> Self {
        Self::new(id, name, false, format!("error: {err}"))
    }
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} [{}] {}: {}", self.id, self.name, self.detail)
    }
}

pub fn all_passed(results: &[CriterionResult]) -> bool {
    results.iter().all(|r| r.passed)
}

/// Gains printed alongside the four-node example, one row per agent.
pub fn printed_k() -> Vec<Vec<f64>> {
    vec![
        vec![-1.0916, -1.0114, 0.0, 0.0, 31.9630, 32.3204, -0.0350, -0.0247],
        vec![0.0, 0.0, -1.0664, -0.7300, 0.0, 0.0, 0.0, 0.0],
        vec![0.0003, 0.0003, 0.0, 0.0, -0.8021, -0.5786, 0.0, 0.0],
        vec![0.0; 8],
    ]
}

/// Observer gains printed alongside the four-node example, one column per
/// agent (stored here one agent per row).
pub fn printed_l() -> Vec<Vec<f64>> {
    vec![
        vec![12.5600, -8.1221, 0.0, 0.0, 7.0165, 7.6708, -0.1299, -5.7761],
        vec![0.0, 0.0, 6.0400, 7.7600, 0.0, 0.0, 0.0, 0.0],
        vec![0.0; 8],
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.4800, 8.3680],
    ]
}

/// Everything the scenario checks share: one initialization and one
/// closed-loop trace per τ.
pub struct ScenarioRun {
    pub scenario: Scenario,
    pub init: Result<Initialization, runtime::RuntimeError>,
    pub traces: Vec<Result<ClosedLoopTrace, runtime::RuntimeError>>,
}

impl ScenarioRun {
    pub fn new(scenario: Scenario, exec: Execution) -> Self {
        let init = runtime::initialize(&scenario.setup);
        let traces = match &init {
            Ok(init) => batch::map(&TAUS, exec, |&tau| {
                runtime::run_closed_loop(
                    &scenario.setup,
                    init,
                    &scenario.x0,
                    &scenario.x_hat0,
                    scenario.config.horizon,
                    tau,
                )
            }),
            Err(e) => TAUS.iter().map(|_| Err(e.clone())).collect(),
        };
        Self { scenario, init, traces }
    }

    fn trace_at(&self, tau: f64) -> Result<&ClosedLoopTrace, String> {
        let i = TAUS.iter().position(|t| *t == tau).expect("tau in sweep");
        self.traces[i].as_ref().map_err(|e| e.to_string())
    }
}

/// Runs all eleven criteria.
pub fn run_suite(seed: u64, exec: Execution) -> Vec<CriterionResult> {
    let scenario = match scenario::paper_4node().build() {
        Ok(s) => s,
        Err(e) => return (1..=11).map(|i| CriterionResult::error(i.to_string(), "paper-4node", &e)).collect(),
    };
    let run = ScenarioRun::new(scenario, exec);
    vec![
        m_bar_reproduction(&run),
        structural_indices(&run.scenario.setup.sys),
        control_design(&run),
        observer_design(&run),
        remark_counterexample(),
        finite_time_exactness(seed, RANDOM_GRAPH_TRIALS, exec),
        error_recursion(&run),
        convergence_rate(&run),
        placement_invariance(seed, RANDOM_PLACEMENT_TRIALS, exec),
        token_complexity(3..=8, exec),
        tau_invariance(&run, EXPECTED_M_BAR),
    ]
}

pub fn m_bar_reproduction(run: &ScenarioRun) -> CriterionResult {
    const NAME: &str = "m̄ reproduction";
    match &run.init {
        Ok(init) => CriterionResult::new(
            "1",
            NAME,
            init.m_bar == EXPECTED_M_BAR,
            format!(
                "m̄ = {} (expected {EXPECTED_M_BAR}); minimal-polynomial degrees M = {:?}, D′ = {}",
                init.m_bar, init.degrees, init.diameter_bound
            ),
        ),
        Err(e) => CriterionResult::error("1", NAME, e),
    }
}

pub fn structural_indices(sys: &LtiSystem) -> CriterionResult {
    let idx = plant::local_indices(sys);
    let rho: Vec<usize> = idx.iter().map(|p| p.0).collect();
    let chi: Vec<usize> = idx.iter().map(|p| p.1).collect();
    CriterionResult::new(
        "2",
        "structural indices",
        rho == EXPECTED_RHO && chi == EXPECTED_CHI,
        format!("ρ = {rho:?} (expected {EXPECTED_RHO:?}), χ = {chi:?} (expected {EXPECTED_CHI:?})"),
    )
}

/// Schur stability plus every moved eigenvalue near some target. Returns
/// (passed, worst distance, number moved).
fn placement_quality(a: &Matrix, outcome: &TokenOutcome, targets: &PlacementTargets, tol: f64) -> Result<(bool, f64, usize), String> {
    let closed = &outcome.closed_loop;
    let schur = numerics::is_schur_stable(closed, 0.0).map_err(|e| e.to_string())?;
    let before = numerics::eigenvalues_sorted(a).map_err(|e| e.to_string())?;
    let after = numerics::eigenvalues_sorted(closed).map_err(|e| e.to_string())?;
    let moved = gain_design::moved_eigenvalues(&before, &after, tol);
    let worst = moved
        .iter()
        .map(|z| targets.values().iter().map(|t| (z - t).norm()).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max);
    Ok((schur && worst <= tol, worst, moved.len()))
}

fn max_entry_diff(gains: &[Matrix], printed: &[Vec<f64>]) -> f64 {
    gains
        .iter()
        .zip(printed)
        .flat_map(|(g, p)| g.iter().zip(p).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

pub fn control_design(run: &ScenarioRun) -> CriterionResult {
    const NAME: &str = "gain design, control";
    let init = match &run.init {
        Ok(i) => i,
        Err(e) => return CriterionResult::error("3", NAME, e),
    };
    let setup = &run.scenario.setup;
    match placement_quality(&setup.sys.a, &init.control, &setup.controller_targets, EIGEN_MATCH_TOL) {
        Ok((ok, worst, moved)) => {
            let last_zero = init.control.gains[3].iter().all(|x| *x == 0.0);
            let radius = numerics::spectral_radius(&init.control.closed_loop).unwrap_or(f64::NAN);
            CriterionResult::new(
                "3",
                NAME,
                ok && last_zero,
                format!(
                    "ρ(A + ΣBK) = {radius:.6}; {moved} eigenvalues moved, worst distance to a target {worst:.2e}; K₄ zero: {last_zero}; visit order {:?}; max |K − printed K| = {:.4} (informational)",
                    init.control.visit_order,
                    max_entry_diff(&init.control.gains, &printed_k())
                ),
            )
        }
        Err(e) => CriterionResult::error("3", NAME, e),
    }
}

pub fn observer_design(run: &ScenarioRun) -> CriterionResult {
    const NAME: &str = "gain design, observer";
    let init = match &run.init {
        Ok(i) => i,
        Err(e) => return CriterionResult::error("4", NAME, e),
    };
    let setup = &run.scenario.setup;
    match placement_quality(&setup.sys.a, &init.observer, &setup.observer_targets, EIGEN_MATCH_TOL) {
        Ok((ok, worst, moved)) => {
            let third_zero = init.observer.gains[2].iter().all(|x| *x == 0.0);
            let radius = numerics::spectral_radius(&init.observer.closed_loop).unwrap_or(f64::NAN);
            let l_cols: Vec<Matrix> = init.observer.gains.iter().map(|l| l.transpose()).collect();
            CriterionResult::new(
                "4",
                NAME,
                ok && third_zero,
                format!(
                    "ρ(A − ΣLC/N) = {radius:.6}; {moved} eigenvalues moved, worst distance to a target {worst:.2e}; L₃ zero: {third_zero}; max |L − printed L| = {:.1e} (informational)",
                    max_entry_diff(&l_cols, &printed_l())
                ),
            )
        }
        Err(e) => CriterionResult::error("4", NAME, e),
    }
}

/// Greedy nearest matching; returns the worst matched distance.
fn match_spectra(found: &[Complex64], expected: &[Complex64]) -> f64 {
    let mut used = vec![false; found.len()];
    let mut worst = 0.0_f64;
    for e in expected {
        let best = found
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, z)| ((z - e).norm(), i))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        match best {
            Some((d, i)) => {
                used[i] = true;
                worst = worst.max(d);
            }
            None => return f64::INFINITY,
        }
    }
    worst
}

pub fn remark_counterexample() -> CriterionResult {
    const NAME: &str = "independent-design counterexample";
    let a = Matrix::from_row_slice(4, 4, &[1.0, -2.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.1, -0.1, 0.5, 0.1, 0.2, -0.1, 0.5, 0.1]);
    let b1 = Matrix::from_column_slice(4, 1, &[0.0, 1.0, 0.0, 1.0]);
    let b2 = Matrix::from_column_slice(4, 1, &[1.0, 0.0, 1.0, 0.0]);
    let k1 = Matrix::from_row_slice(1, 4, &[2.7788, -2.0033, 0.0436, 1.5033]);
    let k2 = Matrix::from_row_slice(1, 4, &[-1.7909, 4.0311, -0.1091, -5.0182]);
    let expected = [
        Complex64::new(0.6515, 2.8137),
        Complex64::new(0.6515, -2.8137),
        Complex64::new(-2.7102, 0.0),
        Complex64::new(0.5073, 0.0),
    ];
    match numerics::eigenvalues_sorted(&(a + b1 * k1 + b2 * k2)) {
        Ok(found) => {
            let worst = match_spectra(&found, &expected);
            let unstable = found.iter().any(|z| z.norm() >= 1.0);
            let shown: Vec<String> = found.iter().map(|z| format!("{:.4}{:+.4}i", z.re, z.im)).collect();
            CriterionResult::new(
                "5",
                NAME,
                worst <= REMARK_EIGEN_TOL,
                format!("eigenvalues [{}]; worst match {worst:.4} (tolerance {REMARK_EIGEN_TOL:e}); unstable: {unstable}", shown.join(", ")),
            )
        }
        Err(e) => CriterionResult::error("5", NAME, e),
    }
}

struct GraphTrial {
    nodes: usize,
    rel_error: f64,
    overshoot: usize,
    error: Option<String>,
}

pub fn finite_time_exactness(seed: u64, trials: usize, exec: Execution) -> CriterionResult {
    const NAME: &str = "finite-time exactness";
    let seeds: Vec<u64> = (0..trials as u64).map(|i| seed.wrapping_mul(0x9e37_79b9).wrapping_add(i)).collect();
    let results = batch::map(&seeds, exec, |&s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let n = rng.random_range(1..=10usize);
        let extra = rng.random_range(0.0..0.5);
        let g = network::random_strongly_connected(&mut rng, n, extra);
        let dim = rng.random_range(1..=3usize);
        let init: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
        match consensus::run_with_termination(&g, &init, consensus::DEFAULT_RANK_TOL) {
            Ok(out) => {
                let overshoot = (0..n).map(|j| out.done_rounds[j].saturating_sub(out.m_bar_at(j))).max().unwrap_or(0);
                GraphTrial { nodes: n, rel_error: consensus::max_relative_error(&init, &out.averages), overshoot, error: None }
            }
            Err(e) => GraphTrial { nodes: n, rel_error: f64::INFINITY, overshoot: 0, error: Some(e.to_string()) },
        }
    });
    let worst = results.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let inexact = results.iter().filter(|r| r.rel_error > AVERAGE_REL_TOL).count();
    let late: Vec<&GraphTrial> = results.iter().filter(|r| r.overshoot > 0).collect();
    let errors = results.iter().filter_map(|r| r.error.as_deref()).next();
    let passed = inexact == 0 && late.is_empty() && results.len() >= MIN_RANDOM_GRAPHS;
    let mut detail = format!(
        "{} graphs (N ≤ 10): worst relative error {worst:.1e}, {inexact} beyond {AVERAGE_REL_TOL:e}; {} graphs finish after m̄ (max overshoot {} rounds)",
        results.len(),
        late.len(),
        late.iter().map(|r| r.overshoot).max().unwrap_or(0)
    );
    if let Some(e) = errors {
        detail.push_str(&format!("; first error: {e}"));
    }
    if let Some(r) = late.first() {
        detail.push_str(&format!("; e.g. an N = {} graph", r.nodes));
    }
    CriterionResult::new("6", NAME, passed, detail)
}

pub fn error_recursion(run: &ScenarioRun) -> CriterionResult {
    const NAME: &str = "error-recursion exactness";
    let (init, trace) = match (&run.init, run.trace_at(1.0)) {
        (Ok(i), Ok(t)) => (i, t),
        (Err(e), _) => return CriterionResult::error("7", NAME, e),
        (_, Err(e)) => return CriterionResult::error("7", NAME, e),
    };
    let (avg, local) = runtime::error_recursion_residuals(trace, init, &run.scenario.setup.sys);
    let agreement = trace.rows.iter().map(|r| r.agreement_error).fold(0.0, f64::max);
    CriterionResult::new(
        "7",
        NAME,
        avg <= RECURSION_TOL && local <= RECURSION_TOL,
        format!(
            "{} steps: average-error residual {avg:.1e}, local-error residual {local:.1e} (tolerance {RECURSION_TOL:e}); agreement error {agreement:.1e}",
            trace.rows.len() - 1
        ),
    )
}

pub fn convergence_rate(run: &ScenarioRun) -> CriterionResult {
    const NAME: &str = "convergence rate";
    let trace = match run.trace_at(1.0) {
        Ok(t) => t,
        Err(e) => return CriterionResult::error("8", NAME, e),
    };
    let slope = runtime::log_error_slope(trace, RATE_FIT_FROM, RATE_FIT_TO);
    let bound = RATE_BOUND.ln();
    let floor = trace.rows.iter().filter(|r| r.k >= RATE_FIT_FROM).map(|r| r.norm_ebar).fold(f64::INFINITY, f64::min);
    CriterionResult::new(
        "8",
        NAME,
        slope <= bound,
        format!(
            "slope of ln‖ē‖ over k = {RATE_FIT_FROM}..{RATE_FIT_TO} is {slope:.4} (needs ≤ ln {RATE_BOUND} = {bound:.4}); per-step factor {:.4}; smallest ‖ē‖ {floor:.1e}",
            slope.exp()
        ),
    )
}

struct PlacementTrial {
    moved: usize,
    worst: f64,
}

/// Draws random `(A, b)` with `n ≤ 6` until one is controllable with
/// separated eigenvalues, then places one eigenvalue.
fn placement_trial(seed: u64) -> Result<PlacementTrial, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let n = rng.random_range(2..=6usize);
        let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.5..1.5));
        let b = Matrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
        if numerics::numerical_rank(&numerics::controllability_matrix(&a, &b), 1e-9) < n {
            continue;
        }
        let before = numerics::eigenvalues_sorted(&a).map_err(|e| e.to_string())?;
        let gap = before
            .iter()
            .enumerate()
            .flat_map(|(i, x)| before.iter().skip(i + 1).map(move |y| (x - y).norm()))
            .fold(f64::INFINITY, f64::min);
        if gap <= 1e-3 {
            continue;
        }
        let pairs = numerics::eigen_left(&a).map_err(|e| e.to_string())?;
        let pair = &pairs[rng.random_range(0..pairs.len())];
        let target = if pair.is_real() {
            Complex64::new(rng.random_range(-0.9..0.9), 0.0)
        } else {
            Complex64::new(rng.random_range(-0.9..0.9), rng.random_range(0.0..0.5))
        };
        let ac = numerics::to_complex(&a);
        let bc = numerics::to_complex(&b).column(0).into_owned();
        let k = gain_design::place_single(&ac, &bc, pair.value, target, &pair.left_vector).map_err(|e| e.to_string())?;
        let after = numerics::complex_eigenvalues(&(ac + &bc * k.transpose())).map_err(|e| e.to_string())?;
        let moved = gain_design::moved_eigenvalues(&before, &after, EIGEN_MATCH_TOL);
        let worst = moved.iter().map(|z| (z - target).norm()).fold(0.0, f64::max);
        return Ok(PlacementTrial { moved: moved.len(), worst });
    }
}

pub fn placement_invariance(seed: u64, trials: usize, exec: Execution) -> CriterionResult {
    const NAME: &str = "placement invariance";
    let seeds: Vec<u64> = (0..trials as u64).map(|i| seed.wrapping_mul(0x85eb_ca6b).wrapping_add(1_000_003 * i)).collect();
    let results = batch::map(&seeds, exec, |&s| placement_trial(s));
    if let Some(Err(e)) = results.iter().find(|r| r.is_err()) {
        return CriterionResult::error("9", NAME, e);
    }
    let ok: Vec<PlacementTrial> = results.into_iter().map(Result::unwrap).collect();
    let wrong_count = ok.iter().filter(|t| t.moved != 1).count();
    let worst = ok.iter().map(|t| t.worst).fold(0.0, f64::max);
    CriterionResult::new(
        "9",
        NAME,
        ok.len() >= MIN_RANDOM_PLACEMENTS && wrong_count == 0 && worst <= EIGEN_MATCH_TOL,
        format!(
            "{} controllable pairs (n ≤ 6): {wrong_count} moved other than exactly one eigenvalue; worst distance to target {worst:.1e}",
            ok.len()
        ),
    )
}

/// A directed ring `0 → 1 → … → N−1 → 0` with chords from the hub `0` to
/// every other node.
pub fn hub_ring(n: usize) -> Digraph {
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    edges.extend((2..n).map(|k| (0, k)));
    Digraph::from_edges(n, &edges).expect("valid ring")
}

/// Worst hop count over every priority order of the hub, with a plant every
/// agent must act on: `A` diagonal with distinct unstable entries and
/// `B_i = e_i`. Returns (worst hops, worst flood transmissions, edges).
pub fn adversarial_token_run(n: usize, exec: Execution) -> Result<(usize, usize, usize), String> {
    let g = hub_ring(n);
    let a = Matrix::from_diagonal(&Vector::from_fn(n, |i, _| 1.5 + 0.1 * i as f64));
    let unit = |i: usize| Matrix::from_fn(n, 1, |r, _| if r == i { 1.0 } else { 0.0 });
    let sys = LtiSystem::new(a, (0..n).map(unit).collect(), (0..n).map(|i| unit(i).transpose()).collect())
        .map_err(|e| e.to_string())?;
    let targets = PlacementTargets::from_real(&(0..n).map(|i| 0.1 * i as f64 / n as f64).collect::<Vec<_>>());
    let cfg = ProtocolConfig::new(PlacementConfig::default(), n);
    let base = gain_design::default_priorities(&g);
    let perms = permutations(g.out_neighbors(0));
    let outcomes = batch::map(&perms, exec, |hub| {
        let mut prio = base.clone();
        prio[0] = hub.clone();
        gain_design::run_token_protocol(&g, &sys, &targets, Mode::Control, 0, &prio, &cfg)
            .map(|o| (o.hop_count, o.flood_transmissions))
            .map_err(|e| e.to_string())
    });
    let mut worst = (0, 0);
    for o in outcomes {
        let (h, f) = o?;
        worst = (worst.0.max(h), worst.1.max(f));
    }
    Ok((worst.0, worst.1, g.edge_count()))
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

pub fn token_complexity(sizes: std::ops::RangeInclusive<usize>, exec: Execution) -> CriterionResult {
    const NAME: &str = "token complexity";
    let mut passed = true;
    let mut parts = Vec::new();
    for n in sizes {
        match adversarial_token_run(n, exec) {
            Ok((hops, flood, edges)) => {
                let bound = (n - 1) * (n - 1);
                passed &= hops <= bound && flood <= edges;
                let printed = (n * n) as i64 - 4 * n as i64 + 2;
                parts.push(format!("N={n}: hops {hops} ≤ {bound} (printed constant {printed}), flood {flood}/{edges}"));
            }
            Err(e) => {
                passed = false;
                parts.push(format!("N={n}: error {e}"));
            }
        }
    }
    CriterionResult::new("10", NAME, passed, parts.join("; "))
}

/// Per-step comparison of two traces, ignoring the time column.
fn same_steps(a: &ClosedLoopTrace, b: &ClosedLoopTrace) -> bool {
    a.rows.len() == b.rows.len()
        && a.rows.iter().zip(&b.rows).all(|(x, y)| {
            x.k == y.k
                && x.x == y.x
                && x.x_hat == y.x_hat
                && x.x_bar_nodes == y.x_bar_nodes
                && x.e_bar == y.e_bar
                && x.e == y.e
                && x.rounds_used == y.rounds_used
        })
}

/// Worst relative deviation of the time column from `k(m̄τ + 1)`.
fn time_column_error(trace: &ClosedLoopTrace, m_bar: usize) -> f64 {
    trace
        .rows
        .iter()
        .map(|r| {
            let want = runtime::normalized_time(r.k, m_bar, trace.tau);
            (r.t - want).abs() / want.max(1.0)
        })
        .fold(0.0, f64::max)
}

pub fn tau_invariance(run: &ScenarioRun, expected_m_bar: usize) -> CriterionResult {
    const NAME: &str = "τ-invariance";
    let traces: Result<Vec<&ClosedLoopTrace>, String> = TAUS.iter().map(|&t| run.trace_at(t)).collect();
    let traces = match traces {
        Ok(t) => t,
        Err(e) => return CriterionResult::error("11", NAME, e),
    };
    let identical = traces.windows(2).all(|w| same_steps(w[0], w[1]));
    let time_err = traces.iter().map(|t| time_column_error(t, expected_m_bar)).fold(0.0, f64::max);
    let m_bar = traces[0].m_bar;
    let last = traces.iter().map(|t| format!("τ={}: t_end={}", t.tau, t.rows.last().map_or(0.0, |r| r.t))).collect::<Vec<_>>();
    CriterionResult::new(
        "11",
        NAME,
        identical && time_err <= TIME_REL_TOL,
        format!(
            "per-step traces identical: {identical}; time column vs k({expected_m_bar}τ + 1): worst relative error {time_err:.3} (runtime m̄ = {m_bar}); {}",
            last.join(", ")
        ),
    )
}

/// Checks for a user-supplied scenario: the scenario-independent parts of
/// the suite, applied to its own matrices and its own m̄.
pub fn scenario_checks(scenario: Scenario, exec: Execution) -> Vec<CriterionResult> {
    let tol = scenario.config.tolerances.eigen_match;
    let run = ScenarioRun::new(scenario, exec);
    let init = match &run.init {
        Ok(i) => i,
        Err(e) => return vec![CriterionResult::error("S1", "initialization", e)],
    };
    let setup = &run.scenario.setup;
    let mut out = vec![CriterionResult::new(
        "S1",
        "initialization",
        true,
        format!("m̄ = {}, D′ = {}, leader {}", init.m_bar, init.diameter_bound, init.election.leader),
    )];
    for (id, name, outcome, targets) in [
        ("S2", "controller placement", &init.control, &setup.controller_targets),
        ("S3", "observer placement", &init.observer, &setup.observer_targets),
    ] {
        out.push(match placement_quality(&setup.sys.a, outcome, targets, tol) {
            Ok((ok, worst, moved)) => CriterionResult::new(
                id,
                name,
                ok,
                format!("Schur and {moved} moved eigenvalues within {worst:.1e} of targets (tolerance {tol:e})"),
            ),
            Err(e) => CriterionResult::error(id, name, e),
        });
    }
    match run.trace_at(1.0) {
        Ok(trace) => {
            let (avg, local) = runtime::error_recursion_residuals(trace, init, &setup.sys);
            out.push(CriterionResult::new(
                "S4",
                "error recursions",
                avg <= RECURSION_TOL && local <= RECURSION_TOL,
                format!("residuals {avg:.1e} and {local:.1e} (tolerance {RECURSION_TOL:e})"),
            ));
            let agreement = trace.rows.iter().map(|r| r.agreement_error).fold(0.0, f64::max);
            let rounds = trace.rows.iter().map(|r| r.rounds_used).max().unwrap_or(0);
            out.push(CriterionResult::new(
                "S5",
                "agreement",
                agreement <= AGREEMENT_REL_TOL && rounds <= init.m_bar,
                format!("worst relative agreement error {agreement:.1e}, at most {rounds} of {} rounds used", init.m_bar),
            ));
        }
        Err(e) => out.push(CriterionResult::error("S4", "error recursions", e)),
    }
    let mut tau = tau_invariance(&run, init.m_bar);
    tau.id = "S6".into();
    out.push(tau);
    out
}
