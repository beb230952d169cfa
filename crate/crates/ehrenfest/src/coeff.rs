//! Local-harmonic Lindblad coefficients.
//!
//! Given the Weyl symbols of the Hamiltonian and the jump operators, the
//! second-order expansion around a packet centroid produces a drift `U`,
//! friction `G`, Hessian flow `F`, friction Jacobian `Gamma`, diffusion `D`,
//! and the covariance flow `S = (F+Gamma) sigma + sigma (F+Gamma)^T + D`.
//! The flow splits as `S = S0 + SD` with `SD = D` kept symmetric PSD; `S0`
//! generates the purity-preserving part and `SD` the diffusive part.
//!
//! All symbolic derivative tables are built once at model construction, so
//! per-point evaluation is a cheap tree walk.

use nalgebra::{DMatrix, DVector};

use crate::error::{DynamicsError, SymbolError};
use crate::phase::{CovMatrix, PhasePoint};
use crate::symbol::{ComplexSymbol, Expr, ParamBindings, VarId};

/// Tolerance below which a negative eigenvalue of `D`/`SD` is treated as
/// rounding; anything larger is reported as a convention error.
pub const COEFF_PSD_TOL: f64 = 1e-10;

/// Index-raising convention for phase-space gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Raising {
    /// `v^a = omega^{ab} d_b f` (Hamiltonian flow directions).
    Symplectic,
    /// `v^a = d_a f` (plain gradient).
    Euclidean,
}

/// Convention switches. The defaults reproduce the exactly solvable
/// free-particle reference model: symplectic raising for the drift-side
/// objects (U, G, F, Gamma), Euclidean raising for the diffusion matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConventionFlags {
    pub drift_raising: Raising,
    pub diffusion_raising: Raising,
    /// Double the coherent part of mixture rates (literal push-forward
    /// bookkeeping). Off by default: the single-counted chain rule is the
    /// variant that matches finite-difference derivatives.
    pub ehrenfest_factor_two: bool,
}

impl Default for ConventionFlags {
    fn default() -> Self {
        Self {
            drift_raising: Raising::Symplectic,
            diffusion_raising: Raising::Euclidean,
            ehrenfest_factor_two: false,
        }
    }
}

/// All coefficients evaluated at one `(alpha, sigma)`.
#[derive(Debug, Clone)]
pub struct CoefficientBundle {
    pub u: DVector<f64>,
    pub g: DVector<f64>,
    pub f: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub s0: DMatrix<f64>,
    pub sd: DMatrix<f64>,
}

/// A Lindblad model over `2d` phase-space coordinates: Hamiltonian symbol,
/// jump-operator symbols, parameter bindings, and raising conventions, with
/// precomputed symbolic derivative tables.
#[derive(Debug, Clone)]
pub struct LindbladModel {
    d: usize,
    hbar: f64,
    hamiltonian: Expr,
    lindblads: Vec<ComplexSymbol>,
    bindings: ParamBindings,
    conventions: ConventionFlags,
    /// Raised gradient of H (drift convention), length 2d.
    grad_h: Vec<Expr>,
    /// Raised friction vector (drift convention), length 2d.
    g_vec: Vec<Expr>,
    /// F^a_b = d_b (raised grad H)^a.
    f_mat: Vec<Vec<Expr>>,
    /// Gamma^a_b = d_b G^a.
    gamma_mat: Vec<Vec<Expr>>,
    /// Diffusion D^{ab}, raised per the diffusion convention.
    d_mat: Vec<Vec<Expr>>,
    /// Divergence table d_b D^{ab} for the effective drift.
    d_div: Vec<Vec<Expr>>,
    /// True if no phase variable occurs in any diffusion entry.
    d_constant: bool,
}

/// Raise a table of 2d expressions: symplectic raising permutes the blocks
/// with a sign, `(omega v)_a = v_{a+d}` for `a < d` and `-v_{a-d}` otherwise.
fn raise_vec(v: &[Expr], d: usize, raising: Raising) -> Vec<Expr> {
    match raising {
        Raising::Euclidean => v.to_vec(),
        Raising::Symplectic => (0..2 * d)
            .map(|a| {
                if a < d {
                    v[a + d].clone()
                } else {
                    Expr::neg(v[a - d].clone())
                }
            })
            .collect(),
    }
}

impl LindbladModel {
    pub fn new(
        d: usize,
        hbar: f64,
        hamiltonian: Expr,
        lindblads: Vec<ComplexSymbol>,
        bindings: ParamBindings,
        conventions: ConventionFlags,
    ) -> Result<Self, DynamicsError> {
        if d == 0 {
            return Err(DynamicsError::BadDimension);
        }
        if !(hbar > 0.0 && hbar.is_finite()) {
            return Err(DynamicsError::BadHbar(hbar));
        }
        let n = 2 * d;
        let var = |a: usize| VarId::from_flat(a, d);

        // Plain (lower-index) gradient of H, then raised per convention.
        let grad_h_euc: Vec<Expr> = (0..n).map(|a| hamiltonian.differentiate(var(a))).collect();
        let grad_h = raise_vec(&grad_h_euc, d, conventions.drift_raising);
        let f_mat: Vec<Vec<Expr>> = grad_h
            .iter()
            .map(|ua| (0..n).map(|b| ua.differentiate(var(b))).collect())
            .collect();

        // Friction G^a = Im sum_k L_k d^a L_k^*. With L = u + iv this is
        // sum_k (v_k d_a u_k - u_k d_a v_k), raised per the drift convention.
        let mut g_euc: Vec<Expr> = (0..n).map(|_| Expr::zero()).collect();
        for sym in &lindblads {
            for (a, slot) in g_euc.iter_mut().enumerate() {
                let du = sym.re.differentiate(var(a));
                let dv = sym.im.differentiate(var(a));
                let term = Expr::sub(
                    Expr::mul(sym.im.clone(), du),
                    Expr::mul(sym.re.clone(), dv),
                );
                *slot = Expr::add(std::mem::replace(slot, Expr::zero()), term);
            }
        }
        let g_vec = raise_vec(&g_euc, d, conventions.drift_raising);
        let gamma_mat: Vec<Vec<Expr>> = g_vec
            .iter()
            .map(|ga| (0..n).map(|b| ga.differentiate(var(b))).collect())
            .collect();

        // Diffusion D^{ab} = hbar Re sum_k (d^a L_k)(d^b L_k^*)
        //                  = hbar sum_k (d^a u d^b u + d^a v d^b v),
        // assembled with plain gradients first, then raised on both indices.
        let mut d_euc: Vec<Vec<Expr>> = (0..n)
            .map(|_| (0..n).map(|_| Expr::zero()).collect())
            .collect();
        for sym in &lindblads {
            let du: Vec<Expr> = (0..n).map(|a| sym.re.differentiate(var(a))).collect();
            let dv: Vec<Expr> = (0..n).map(|a| sym.im.differentiate(var(a))).collect();
            for a in 0..n {
                for b in 0..n {
                    let term = Expr::add(
                        Expr::mul(du[a].clone(), du[b].clone()),
                        Expr::mul(dv[a].clone(), dv[b].clone()),
                    );
                    let prev = std::mem::replace(&mut d_euc[a][b], Expr::zero());
                    d_euc[a][b] = Expr::add(prev, term);
                }
            }
        }
        let scale = Expr::Const(hbar);
        let scaled = |e: &Expr| Expr::mul(scale.clone(), e.clone());
        let d_mat: Vec<Vec<Expr>> = match conventions.diffusion_raising {
            Raising::Euclidean => d_euc
                .iter()
                .map(|row| row.iter().map(scaled).collect())
                .collect(),
            Raising::Symplectic => {
                // (omega D omega^T)^{ab}: raise rows, then columns.
                let rows: Vec<Vec<Expr>> = (0..n)
                    .map(|a| {
                        let (src, negate) = if a < d { (a + d, false) } else { (a - d, true) };
                        d_euc[src]
                            .iter()
                            .map(|e| {
                                let e = scaled(e);
                                if negate {
                                    Expr::neg(e)
                                } else {
                                    e
                                }
                            })
                            .collect()
                    })
                    .collect();
                (0..n)
                    .map(|a| {
                        (0..n)
                            .map(|b| {
                                let (src, negate) =
                                    if b < d { (b + d, false) } else { (b - d, true) };
                                let e = rows[a][src].clone();
                                if negate {
                                    Expr::neg(e)
                                } else {
                                    e
                                }
                            })
                            .collect()
                    })
                    .collect()
            }
        };

        let d_div: Vec<Vec<Expr>> = d_mat
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(b, e)| e.differentiate(var(b)))
                    .collect()
            })
            .collect();
        let d_constant = d_mat
            .iter()
            .all(|row| row.iter().all(|e| !e.has_variables()));

        Ok(Self {
            d,
            hbar,
            hamiltonian,
            lindblads,
            bindings,
            conventions,
            grad_h,
            g_vec,
            f_mat,
            gamma_mat,
            d_mat,
            d_div,
            d_constant,
        })
    }

    pub fn dof(&self) -> usize {
        self.d
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    pub fn hamiltonian(&self) -> &Expr {
        &self.hamiltonian
    }

    pub fn lindblads(&self) -> &[ComplexSymbol] {
        &self.lindblads
    }

    pub fn bindings(&self) -> &ParamBindings {
        &self.bindings
    }

    pub fn conventions(&self) -> ConventionFlags {
        self.conventions
    }

    /// True if the diffusion matrix does not depend on the phase point.
    pub fn diffusion_is_constant(&self) -> bool {
        self.d_constant
    }

    fn check_point(&self, alpha: &PhasePoint) -> Result<(), DynamicsError> {
        if alpha.dof() != self.d {
            return Err(DynamicsError::StateDim {
                state: alpha.dof(),
                model: self.d,
            });
        }
        Ok(())
    }

    fn eval_vec(&self, table: &[Expr], alpha: &PhasePoint) -> Result<DVector<f64>, SymbolError> {
        let mut out = DVector::zeros(table.len());
        for (i, e) in table.iter().enumerate() {
            out[i] = e.evaluate(alpha, &self.bindings)?;
        }
        Ok(out)
    }

    fn eval_mat(
        &self,
        table: &[Vec<Expr>],
        alpha: &PhasePoint,
    ) -> Result<DMatrix<f64>, SymbolError> {
        let n = table.len();
        let mut out = DMatrix::zeros(n, n);
        for (i, row) in table.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                out[(i, j)] = e.evaluate(alpha, &self.bindings)?;
            }
        }
        Ok(out)
    }

    /// Friction vector `G` at `alpha` (raised per the drift convention).
    pub fn friction_vector(&self, alpha: &PhasePoint) -> Result<DVector<f64>, DynamicsError> {
        self.check_point(alpha)?;
        Ok(self.eval_vec(&self.g_vec, alpha)?)
    }

    /// Centroid drift `U = raise(grad H) + G` at `alpha`.
    pub fn drift(&self, alpha: &PhasePoint) -> Result<DVector<f64>, DynamicsError> {
        self.check_point(alpha)?;
        Ok(self.eval_vec(&self.grad_h, alpha)? + self.eval_vec(&self.g_vec, alpha)?)
    }

    /// Hamiltonian Hessian with raised first index, `F^a_b`.
    pub fn hessian_f(&self, alpha: &PhasePoint) -> Result<DMatrix<f64>, DynamicsError> {
        self.check_point(alpha)?;
        Ok(self.eval_mat(&self.f_mat, alpha)?)
    }

    /// Friction Jacobian `Gamma^a_b`.
    pub fn friction_jacobian_gamma(
        &self,
        alpha: &PhasePoint,
    ) -> Result<DMatrix<f64>, DynamicsError> {
        self.check_point(alpha)?;
        Ok(self.eval_mat(&self.gamma_mat, alpha)?)
    }

    /// Diffusion matrix `D` at `alpha`; errors if it fails the PSD tolerance.
    pub fn diffusion_d(&self, alpha: &PhasePoint) -> Result<DMatrix<f64>, DynamicsError> {
        self.check_point(alpha)?;
        let d = self.eval_mat(&self.d_mat, alpha)?;
        let sym = (&d + d.transpose()) * 0.5;
        let min_eig = sym
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b));
        if min_eig < -COEFF_PSD_TOL {
            return Err(DynamicsError::CoefficientPsd {
                name: "diffusion matrix D",
                min_eig,
            });
        }
        Ok(d)
    }

    /// Purity-preserving covariance flow `(F+Gamma) sigma + sigma (F+Gamma)^T`
    /// on a raw matrix. Integrator stage arithmetic goes through here: stage
    /// matrices are not states and need not be PSD.
    pub(crate) fn s0_raw(
        &self,
        alpha: &PhasePoint,
        sigma: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>, DynamicsError> {
        let fg = self.eval_mat(&self.f_mat, alpha)? + self.eval_mat(&self.gamma_mat, alpha)?;
        let prod = &fg * sigma;
        Ok(&prod + prod.transpose())
    }

    /// Full covariance flow `S = S0 + D` on a raw matrix.
    pub(crate) fn covariance_rhs_raw(
        &self,
        alpha: &PhasePoint,
        sigma: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>, DynamicsError> {
        Ok(self.s0_raw(alpha, sigma)? + self.diffusion_d(alpha)?)
    }

    fn s0_matrix(
        &self,
        alpha: &PhasePoint,
        sigma: &CovMatrix,
    ) -> Result<DMatrix<f64>, DynamicsError> {
        self.s0_raw(alpha, sigma.entries())
    }

    /// Right side of the covariance ODE, `S = S0 + D`.
    pub fn covariance_rhs_s(
        &self,
        alpha: &PhasePoint,
        sigma: &CovMatrix,
    ) -> Result<DMatrix<f64>, DynamicsError> {
        let (s0, sd) = self.split_s(alpha, sigma)?;
        Ok(s0 + sd)
    }

    /// The split `S = S0 + SD` with `SD = D`. The sum of the returned parts
    /// reconstructs `S` exactly because `S` is defined as that sum.
    pub fn split_s(
        &self,
        alpha: &PhasePoint,
        sigma: &CovMatrix,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
        self.check_point(alpha)?;
        let s0 = self.s0_matrix(alpha, sigma)?;
        let sd = self.diffusion_d(alpha)?;
        Ok((s0, sd))
    }

    /// Effective drift `U^a - (1/2) d_b SD^{ab}` absorbing the diffusion
    /// divergence. With the `SD = D` split the covariance argument only
    /// fixes the signature; the value depends on `alpha` alone.
    pub fn effective_drift(
        &self,
        alpha: &PhasePoint,
        _sigma: &CovMatrix,
    ) -> Result<DVector<f64>, DynamicsError> {
        self.check_point(alpha)?;
        let mut u = self.drift(alpha)?;
        for (a, row) in self.d_div.iter().enumerate() {
            let mut div = 0.0;
            for e in row {
                div += e.evaluate(alpha, &self.bindings)?;
            }
            u[a] -= 0.5 * div;
        }
        Ok(u)
    }

    /// All coefficients at one `(alpha, sigma)`.
    pub fn coefficients(
        &self,
        alpha: &PhasePoint,
        sigma: &CovMatrix,
    ) -> Result<CoefficientBundle, DynamicsError> {
        self.check_point(alpha)?;
        let g = self.eval_vec(&self.g_vec, alpha)?;
        let u = self.eval_vec(&self.grad_h, alpha)? + &g;
        let f = self.eval_mat(&self.f_mat, alpha)?;
        let gamma = self.eval_mat(&self.gamma_mat, alpha)?;
        let d = self.diffusion_d(alpha)?;
        let s0 = self.s0_matrix(alpha, sigma)?;
        let s = &s0 + &d;
        Ok(CoefficientBundle {
            u,
            g,
            f,
            gamma,
            sd: d.clone(),
            d,
            s,
            s0,
        })
    }
}
