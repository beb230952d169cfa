//! Phase-space value types: centroids, covariance matrices, Gaussian
//! components and mixtures, the symplectic form, and the admissibility
//! checks (uncertainty, squeezing, purity) used as runtime invariants.
//!
//! All types are immutable values after construction and safe to share
//! read-only among parallel workers.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::PhaseError;

/// Relative tolerance for the symmetry check on covariance input.
pub const SYMMETRY_RTOL: f64 = 1e-12;
/// Eigenvalue slack (relative to the matrix scale) accepted as "still PSD".
const PSD_SLACK: f64 = 1e-10;
/// Tolerance on the weight normalization of a mixture snapshot.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// A point of the `2d`-dimensional phase space, laid out as
/// `(x_1..x_d, p_1..p_d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    coords: DVector<f64>,
}

impl PhasePoint {
    pub fn new(coords: Vec<f64>) -> Result<Self, PhaseError> {
        if coords.is_empty() || !coords.len().is_multiple_of(2) {
            return Err(PhaseError::OddPhaseDim { len: coords.len() });
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(PhaseError::NonFinite("phase point coordinate"));
        }
        Ok(Self {
            coords: DVector::from_vec(coords),
        })
    }

    pub fn from_vector(coords: DVector<f64>) -> Result<Self, PhaseError> {
        Self::new(coords.data.into())
    }

    /// Number of spatial degrees of freedom `d`.
    pub fn dof(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    /// Position component `x_i` (0-based, `i < d`).
    pub fn x(&self, i: usize) -> f64 {
        self.coords[i]
    }

    /// Momentum component `p_i` (0-based, `i < d`).
    pub fn p(&self, i: usize) -> f64 {
        self.coords[self.dof() + i]
    }
}

/// A real symmetric positive-semidefinite `2d x 2d` covariance matrix.
///
/// Inputs are symmetrized as `(m + m^T)/2` on construction; asymmetry beyond
/// [`SYMMETRY_RTOL`] (relative to the largest entry) or a negative eigenvalue
/// beyond the PSD slack is rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix {
    entries: DMatrix<f64>,
}

impl CovMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self, PhaseError> {
        if !entries.is_square() || !entries.nrows().is_multiple_of(2) || entries.nrows() == 0 {
            return Err(PhaseError::BadCovShape {
                rows: entries.nrows(),
                cols: entries.ncols(),
            });
        }
        if entries.iter().any(|c| !c.is_finite()) {
            return Err(PhaseError::NonFinite("covariance entry"));
        }
        let scale = entries.amax().max(1.0);
        let asym = (&entries - entries.transpose()).amax();
        if asym > SYMMETRY_RTOL * scale {
            return Err(PhaseError::NotSymmetric { asym });
        }
        let sym = (&entries + entries.transpose()) * 0.5;
        let min_eig = min_symmetric_eigenvalue(&sym);
        if min_eig < -PSD_SLACK * scale {
            return Err(PhaseError::NotPsd { min_eig });
        }
        Ok(Self { entries: sym })
    }

    /// Coherent-state covariance `(hbar/2) I` for `d` degrees of freedom.
    pub fn coherent(d: usize, hbar: f64) -> Self {
        Self {
            entries: DMatrix::identity(2 * d, 2 * d) * (hbar / 2.0),
        }
    }

    pub fn dof(&self) -> usize {
        self.entries.nrows() / 2
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_symmetric_eigenvalue(&self.entries)
    }
}

fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

/// One Gaussian packet of the mixture: centroid, covariance, statistical
/// weight.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub alpha: PhasePoint,
    pub sigma: CovMatrix,
    pub weight: f64,
}

impl GaussianComponent {
    pub fn new(alpha: PhasePoint, sigma: CovMatrix, weight: f64) -> Result<Self, PhaseError> {
        if alpha.dof() != sigma.dof() {
            return Err(PhaseError::DimMismatch {
                alpha: alpha.dof(),
                sigma: sigma.dof(),
            });
        }
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(PhaseError::BadWeight { weight });
        }
        Ok(Self {
            alpha,
            sigma,
            weight,
        })
    }

    /// Unit-weight minimum-uncertainty state centered at `alpha`.
    pub fn coherent(alpha: PhasePoint, hbar: f64) -> Self {
        let sigma = CovMatrix::coherent(alpha.dof(), hbar);
        Self {
            alpha,
            sigma,
            weight: 1.0,
        }
    }

    pub fn dof(&self) -> usize {
        self.alpha.dof()
    }
}

/// A time-stamped weighted set of Gaussian components: the particle
/// representation of the mixing measure at one instant.
#[derive(Debug, Clone)]
pub struct MixtureSnapshot {
    pub time: f64,
    pub components: Vec<GaussianComponent>,
}

impl MixtureSnapshot {
    pub fn new(time: f64, components: Vec<GaussianComponent>) -> Result<Self, PhaseError> {
        if components.is_empty() {
            return Err(PhaseError::EmptyMixture);
        }
        let sum: f64 = components.iter().map(|c| c.weight).sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(PhaseError::WeightSum { sum });
        }
        Ok(Self { time, components })
    }

    pub fn weight_sum(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }
}

/// The standard symplectic form `[[0, I], [-I, 0]]` in block form.
#[derive(Debug, Clone, PartialEq)]
pub struct SymplecticForm {
    omega: DMatrix<f64>,
}

impl SymplecticForm {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.omega
    }
}

/// Canonical symplectic form for `d >= 1` degrees of freedom.
pub fn symplectic_form(d: usize) -> SymplecticForm {
    assert!(d >= 1, "symplectic form needs d >= 1");
    let n = 2 * d;
    let mut omega = DMatrix::zeros(n, n);
    for i in 0..d {
        omega[(i, d + i)] = 1.0;
        omega[(d + i, i)] = -1.0;
    }
    SymplecticForm { omega }
}

/// Uncertainty-principle check: true iff the minimum eigenvalue of the
/// Hermitian matrix `sigma + (i hbar / 2) omega` is at least `-tol`.
pub fn uncertainty_check(sigma: &CovMatrix, hbar: f64, tol: f64) -> bool {
    let n = sigma.entries().nrows();
    let omega = symplectic_form(n / 2);
    let mut herm = DMatrix::<Complex64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            herm[(i, j)] = Complex64::new(
                sigma.entries()[(i, j)],
                0.5 * hbar * omega.matrix()[(i, j)],
            );
        }
    }
    let eigs = herm.symmetric_eigen().eigenvalues;
    eigs.iter().all(|&e| e >= -tol)
}

/// Not-too-squeezed check: true iff the minimum eigenvalue of `sigma` is at
/// least `xi * hbar / 2`.
pub fn nts_check(sigma: &CovMatrix, xi: f64, hbar: f64) -> bool {
    sigma.min_eigenvalue() >= xi * hbar / 2.0
}

/// Distance from the pure-state symplectic condition: the max-abs-entry norm
/// of `sigma omega sigma - (hbar^2/4) omega`. Zero exactly for pure Gaussian
/// states.
pub fn purity_defect(sigma: &CovMatrix, hbar: f64) -> f64 {
    let omega = symplectic_form(sigma.dof());
    let sos = sigma.entries() * omega.matrix() * sigma.entries();
    (sos - omega.matrix() * (hbar * hbar / 4.0)).amax()
}
