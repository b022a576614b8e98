//! The plant `x⁺ = Ax + Σ B_j u_j`, `y_i = C_i x`, observed and actuated in
//! pieces by the agents, plus its joint and local rank checks.

use thiserror::Error;

use crate::numerics::{self, Matrix, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("invalid plant: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    pub a: Matrix,
    pub b: Vec<Matrix>,
    pub c: Vec<Matrix>,
}

impl LtiSystem {
    pub fn new(a: Matrix, b: Vec<Matrix>, c: Vec<Matrix>) -> Result<Self, PlantError> {
        let n = a.nrows();
        if !a.is_square() || n == 0 {
            return Err(PlantError::InvalidInput(format!("A must be square and nonempty, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.is_empty() || b.len() != c.len() {
            return Err(PlantError::InvalidInput(format!(
                "need one B_i and one C_i per agent, got {} and {}",
                b.len(),
                c.len()
            )));
        }
        for (i, bi) in b.iter().enumerate() {
            if bi.nrows() != n {
                return Err(PlantError::InvalidInput(format!("B_{i} has {} rows, expected {n}", bi.nrows())));
            }
        }
        for (i, ci) in c.iter().enumerate() {
            if ci.ncols() != n {
                return Err(PlantError::InvalidInput(format!("C_{i} has {} columns, expected {n}", ci.ncols())));
            }
        }
        for m in std::iter::once(&a).chain(&b).chain(&c) {
            numerics::check_finite(m).map_err(|e| PlantError::InvalidInput(e.to_string()))?;
        }
        Ok(Self { a, b, c })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn agents(&self) -> usize {
        self.b.len()
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.b.iter().map(Matrix::ncols).collect()
    }

    pub fn output_dims(&self) -> Vec<usize> {
        self.c.iter().map(Matrix::nrows).collect()
    }

    /// `[B_1 … B_N]`.
    pub fn stacked_b(&self) -> Matrix {
        let n = self.state_dim();
        let q: usize = self.input_dims().iter().sum();
        let mut out = Matrix::zeros(n, q);
        let mut col = 0;
        for bi in &self.b {
            out.view_mut((0, col), (n, bi.ncols())).copy_from(bi);
            col += bi.ncols();
        }
        out
    }

    /// `[C_1; …; C_N]`.
    pub fn stacked_c(&self) -> Matrix {
        let n = self.state_dim();
        let p: usize = self.output_dims().iter().sum();
        let mut out = Matrix::zeros(p, n);
        let mut row = 0;
        for ci in &self.c {
            out.view_mut((row, 0), (ci.nrows(), n)).copy_from(ci);
            row += ci.nrows();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub x: Vector,
    pub k: usize,
}

/// Advances the plant one step. Outputs are measured before the update.
pub fn plant_step(sys: &LtiSystem, x: &Vector, inputs: &[Vector]) -> Result<(Vector, Vec<Vector>), PlantError> {
    if x.len() != sys.state_dim() {
        return Err(PlantError::InvalidInput(format!("state has length {}, expected {}", x.len(), sys.state_dim())));
    }
    if inputs.len() != sys.agents() {
        return Err(PlantError::InvalidInput(format!("{} inputs for {} agents", inputs.len(), sys.agents())));
    }
    let outputs = sys.c.iter().map(|ci| ci * x).collect();
    let mut next = &sys.a * x;
    for (j, (bj, uj)) in sys.b.iter().zip(inputs).enumerate() {
        if uj.len() != bj.ncols() {
            return Err(PlantError::InvalidInput(format!("u_{j} has length {}, expected {}", uj.len(), bj.ncols())));
        }
        next += bj * uj;
    }
    Ok((next, outputs))
}

fn rank(m: &Matrix) -> usize {
    numerics::numerical_rank(m, numerics::default_rank_tol(m.nrows(), m.ncols()))
}

/// Kalman rank tests on the stacked input and output matrices.
pub fn joint_rank_checks(sys: &LtiSystem) -> (bool, bool) {
    let n = sys.state_dim();
    let ctrb = numerics::controllability_matrix(&sys.a, &sys.stacked_b());
    let obsv = numerics::observability_matrix(&sys.a, &sys.stacked_c());
    (rank(&ctrb) == n, rank(&obsv) == n)
}

/// Per agent `(ρ_i, χ_i)`: ranks of the local controllability and
/// observability matrices.
pub fn local_indices(sys: &LtiSystem) -> Vec<(usize, usize)> {
    sys.b
        .iter()
        .zip(&sys.c)
        .map(|(bi, ci)| {
            (
                rank(&numerics::controllability_matrix(&sys.a, bi)),
                rank(&numerics::observability_matrix(&sys.a, ci)),
            )
        })
        .collect()
}
