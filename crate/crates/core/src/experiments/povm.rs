//! Outcome statistics of experiments as positive-operator-valued measures.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

const TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PovmError {
    #[error("operator for outcome {0} is not Hermitian")]
    NotHermitian(String),
    #[error("operator for outcome {0} is not positive semidefinite (eigenvalue {1:e})")]
    NotPositive(String, f64),
    #[error("operators do not add up to the identity (deviation {0:e})")]
    Incomplete(f64),
    #[error("operator for outcome {0} has the wrong dimension")]
    Dimension(String),
    #[error("unknown outcome {0}")]
    UnknownOutcome(String),
    #[error("state is not normalized (norm {0})")]
    NotNormalized(f64),
    #[error("outcome {0} has no numeric value")]
    NoValue(String),
    #[error("operator for outcome {0} is not a projection")]
    NotProjection(String),
    #[error("projections for outcomes {0} and {1} are not orthogonal")]
    NotOrthogonal(String, String),
    #[error("a table needs at least one outcome")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub label: String,
    /// Numeric value, when the outcome is a number.
    pub value: Option<f64>,
    pub operator: DMatrix<Complex64>,
}

/// Outcomes `z` with positive operators `F(z)` summing to the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct PovmTable {
    dim: usize,
    outcomes: Vec<Outcome>,
}

impl PovmTable {
    pub fn new(outcomes: Vec<Outcome>) -> Result<Self, PovmError> {
        let dim = outcomes.first().ok_or(PovmError::Empty)?.operator.nrows();
        let mut sum = DMatrix::<Complex64>::zeros(dim, dim);
        for o in &outcomes {
            let f = &o.operator;
            if f.nrows() != dim || f.ncols() != dim {
                return Err(PovmError::Dimension(o.label.clone()));
            }
            if (f - f.adjoint()).iter().any(|z| z.norm() > TOLERANCE) {
                return Err(PovmError::NotHermitian(o.label.clone()));
            }
            let low = f.clone().symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
            if low < -TOLERANCE {
                return Err(PovmError::NotPositive(o.label.clone(), low));
            }
            sum += f;
        }
        let dev = (sum - DMatrix::<Complex64>::identity(dim, dim)).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if dev > TOLERANCE {
            return Err(PovmError::Incomplete(dev));
        }
        Ok(Self { dim, outcomes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn outcomes(&self) -> &[Outcome] {
        &self.outcomes
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.outcomes.iter().map(|o| o.label.as_str())
    }

    fn outcome(&self, z: &str) -> Result<&Outcome, PovmError> {
        self.outcomes.iter().find(|o| o.label == z).ok_or_else(|| PovmError::UnknownOutcome(z.to_string()))
    }

    /// `σ_z` eigenprojections with outcomes `up` (+1) and `down` (−1).
    pub fn sigma_z() -> Self {
        Self::projective(&[("up", 1.0), ("down", -1.0)])
    }

    /// Diagonal projections `|k⟩⟨k|` with the given labels and values.
    pub fn projective(entries: &[(&str, f64)]) -> Self {
        let n = entries.len();
        let outcomes = entries
            .iter()
            .enumerate()
            .map(|(k, (label, value))| {
                let mut f = DMatrix::zeros(n, n);
                f[(k, k)] = Complex64::new(1.0, 0.0);
                Outcome { label: label.to_string(), value: Some(*value), operator: f }
            })
            .collect();
        Self::new(outcomes).expect("diagonal projections form a valid table")
    }

    /// Coarse position `x1 |ψ1⟩⟨ψ1| + x2 |ψ2⟩⟨ψ2|` on the span of two
    /// orthonormal packets, in the basis `(ψ1, ψ2)`.
    pub fn coarse_position(x1: f64, x2: f64) -> Self {
        Self::projective(&[("x1", x1), ("x2", x2)])
    }
}

fn check_normalized(psi: &DVector<Complex64>) -> Result<(), PovmError> {
    let n = psi.norm();
    if (n - 1.0).abs() > 1e-10 {
        return Err(PovmError::NotNormalized(n));
    }
    Ok(())
}

/// `⟨ψ|F(z)|ψ⟩`.
pub fn povm_probability(psi: &DVector<Complex64>, table: &PovmTable, z: &str) -> Result<f64, PovmError> {
    check_normalized(psi)?;
    let f = &table.outcome(z)?.operator;
    if psi.len() != table.dim {
        return Err(PovmError::Dimension(z.to_string()));
    }
    Ok((psi.adjoint() * f * psi)[(0, 0)].re.clamp(0.0, 1.0))
}

/// Probabilities of every outcome, in table order.
pub fn povm_distribution(psi: &DVector<Complex64>, table: &PovmTable) -> Result<Vec<f64>, PovmError> {
    table.labels().map(|z| povm_probability(psi, table, z)).collect()
}

/// `A = Σ_z z F(z)` for a projection-valued table with numeric outcomes.
pub fn observable_from_povm(table: &PovmTable) -> Result<DMatrix<Complex64>, PovmError> {
    let close = |m: &DMatrix<Complex64>| m.iter().all(|z| z.norm() <= TOLERANCE);
    let mut a = DMatrix::<Complex64>::zeros(table.dim, table.dim);
    for (i, o) in table.outcomes.iter().enumerate() {
        let value = o.value.ok_or_else(|| PovmError::NoValue(o.label.clone()))?;
        let f = &o.operator;
        if !close(&(f * f - f)) {
            return Err(PovmError::NotProjection(o.label.clone()));
        }
        for other in &table.outcomes[i + 1..] {
            if !close(&(f * &other.operator)) {
                return Err(PovmError::NotOrthogonal(o.label.clone(), other.label.clone()));
            }
        }
        a += f * Complex64::new(value, 0.0);
    }
    Ok(a)
}
