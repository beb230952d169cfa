//! Polynomial observables, exact Gaussian expectations, and the
//! coherent/diffusive rate decomposition.
//!
//! Expectations are computed by expanding the Weyl symbol around the
//! centroid and contracting central moments with Isserlis pairings, which is
//! exact for polynomials. The rate of change of an expectation along the
//! semiclassical flow splits into a coherent contraction with `(U, S0)` and
//! a diffusive contraction with `SD`; for the Hamiltonian these are the work
//! and heat rates.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::coeff::{ConventionFlags, LindbladModel};
use crate::ensemble::mixture_expectation;
use crate::error::{DynamicsError, ObservableError};
use crate::phase::{CovMatrix, GaussianComponent, MixtureSnapshot, PhasePoint};
use crate::symbol::{Expr, ParamBindings};

/// Degree bound for polynomial observables. Isserlis contraction is exact at
/// any degree; the bound keeps the pairing enumeration small.
pub const MAX_DEGREE: usize = 8;

/// A polynomial Weyl symbol stored as a multi-index coefficient table over
/// the `2d` phase variables.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialObservable {
    n: usize,
    terms: BTreeMap<Vec<u8>, f64>,
}

impl PolynomialObservable {
    /// Build from `(multi-index, coefficient)` pairs; `n = 2d` variables.
    pub fn new(
        n: usize,
        terms: impl IntoIterator<Item = (Vec<u8>, f64)>,
    ) -> Result<Self, ObservableError> {
        let mut map = BTreeMap::new();
        for (idx, coeff) in terms {
            if idx.len() != n {
                return Err(ObservableError::IndexLength {
                    len: idx.len(),
                    expected: n,
                });
            }
            if !coeff.is_finite() {
                return Err(ObservableError::NonFiniteCoefficient(idx));
            }
            let degree: usize = idx.iter().map(|&k| k as usize).sum();
            if degree > MAX_DEGREE {
                return Err(ObservableError::DegreeTooHigh {
                    degree,
                    max: MAX_DEGREE,
                });
            }
            if coeff != 0.0 {
                *map.entry(idx).or_insert(0.0) += coeff;
            }
        }
        map.retain(|_, c| *c != 0.0);
        Ok(Self { n, terms: map })
    }

    pub fn constant(n: usize, c: f64) -> Self {
        let mut terms = BTreeMap::new();
        if c != 0.0 {
            terms.insert(vec![0u8; n], c);
        }
        Self { n, terms }
    }

    /// Single monomial `c * prod_i beta_i^{idx_i}`.
    pub fn monomial(n: usize, idx: &[u8], c: f64) -> Result<Self, ObservableError> {
        Self::new(n, [(idx.to_vec(), c)])
    }

    /// Number of phase variables (`2d`).
    pub fn vars(&self) -> usize {
        self.n
    }

    /// Total degree (0 for the zero polynomial).
    pub fn degree(&self) -> usize {
        self.terms
            .keys()
            .map(|idx| idx.iter().map(|&k| k as usize).sum())
            .max()
            .unwrap_or(0)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[u8], f64)> {
        self.terms.iter().map(|(k, v)| (k.as_slice(), *v))
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn scale(&self, c: f64) -> Self {
        let terms = if c == 0.0 {
            BTreeMap::new()
        } else {
            self.terms.iter().map(|(k, v)| (k.clone(), v * c)).collect()
        };
        Self { n: self.n, terms }
    }

    pub fn add(&self, other: &Self) -> Result<Self, ObservableError> {
        Self::new(
            self.n,
            self.terms()
                .map(|(k, v)| (k.to_vec(), v))
                .chain(other.terms().map(|(k, v)| (k.to_vec(), v))),
        )
    }

    pub fn mul(&self, other: &Self) -> Result<Self, ObservableError> {
        let mut out: Vec<(Vec<u8>, f64)> = Vec::new();
        for (ka, va) in self.terms() {
            for (kb, vb) in other.terms() {
                let idx: Vec<u8> = ka.iter().zip(kb).map(|(a, b)| a + b).collect();
                out.push((idx, va * vb));
            }
        }
        Self::new(self.n, out)
    }

    /// Exact partial derivative along flat coordinate `a`.
    pub fn differentiate(&self, a: usize) -> Self {
        let mut terms = BTreeMap::new();
        for (idx, coeff) in &self.terms {
            let k = idx[a];
            if k == 0 {
                continue;
            }
            let mut didx = idx.clone();
            didx[a] = k - 1;
            *terms.entry(didx).or_insert(0.0) += coeff * f64::from(k);
        }
        terms.retain(|_, c| *c != 0.0);
        Self { n: self.n, terms }
    }

    /// Convert a parsed expression to a polynomial, binding parameters to
    /// their values. Errors on transcendental functions, non-constant
    /// divisors, unbound parameters, or degree overflow.
    pub fn from_expr(
        e: &Expr,
        d: usize,
        bindings: &ParamBindings,
    ) -> Result<Self, ObservableError> {
        let n = 2 * d;
        match e {
            Expr::Const(c) => Ok(Self::constant(n, *c)),
            Expr::Param(name) => bindings
                .get(name)
                .map(|v| Self::constant(n, v))
                .ok_or_else(|| ObservableError::UnboundParam(name.clone())),
            Expr::Var(v) => {
                let mut idx = vec![0u8; n];
                idx[v.flat(d)] = 1;
                Self::new(n, [(idx, 1.0)])
            }
            Expr::Neg(a) => Ok(Self::from_expr(a, d, bindings)?.scale(-1.0)),
            Expr::Add(a, b) => Self::from_expr(a, d, bindings)?.add(&Self::from_expr(b, d, bindings)?),
            Expr::Sub(a, b) => Self::from_expr(a, d, bindings)?
                .add(&Self::from_expr(b, d, bindings)?.scale(-1.0)),
            Expr::Mul(a, b) => Self::from_expr(a, d, bindings)?.mul(&Self::from_expr(b, d, bindings)?),
            Expr::Div(a, b) => {
                if b.has_variables() {
                    return Err(ObservableError::NonPolynomial("non-constant divisor"));
                }
                let num = Self::from_expr(a, d, bindings)?;
                let den = Self::from_expr(b, d, bindings)?;
                let c = den
                    .terms
                    .get(&vec![0u8; n])
                    .copied()
                    .unwrap_or(0.0);
                if c == 0.0 {
                    return Err(ObservableError::NonPolynomial("division by zero constant"));
                }
                Ok(num.scale(1.0 / c))
            }
            Expr::Pow(a, k) => {
                let base = Self::from_expr(a, d, bindings)?;
                let mut acc = Self::constant(n, 1.0);
                for _ in 0..*k {
                    acc = acc.mul(&base)?;
                }
                Ok(acc)
            }
            Expr::Apply(_, _) => Err(ObservableError::NonPolynomial(
                "transcendental function in observable",
            )),
        }
    }
}

fn binom(k: u8, j: u8) -> f64 {
    let (k, j) = (u64::from(k), u64::from(j));
    let mut out = 1u64;
    for i in 0..j {
        out = out * (k - i) / (i + 1);
    }
    out as f64
}

/// Symmetrized covariance lookup used by the pairing products.
fn s_entry(sigma: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    0.5 * (sigma[(i, j)] + sigma[(j, i)])
}

/// Central moment of the multiset of coordinates `idx` under covariance
/// `sigma`, by recursive Isserlis pairing: fix the first index, pair it with
/// every remaining one.
fn central_moment(idx: &[usize], sigma: &DMatrix<f64>) -> f64 {
    match idx.len() {
        0 => 1.0,
        k if k % 2 == 1 => 0.0,
        2 => s_entry(sigma, idx[0], idx[1]),
        _ => {
            let first = idx[0];
            let rest = &idx[1..];
            let mut total = 0.0;
            for (m, &j) in rest.iter().enumerate() {
                let sub: Vec<usize> = rest
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != m)
                    .map(|(_, &v)| v)
                    .collect();
                total += s_entry(sigma, first, j) * central_moment(&sub, sigma);
            }
            total
        }
    }
}

/// Like [`central_moment`] but returns the independent-entry derivative with
/// respect to `sigma[(a, b)]`: every pairing contributes through the pairs
/// that hit `{a, b}`, weighted 1/2 off-diagonal.
fn central_moment_dsigma(idx: &[usize], sigma: &DMatrix<f64>, a: usize, b: usize) -> f64 {
    match idx.len() {
        0 | 1 => 0.0,
        2 => pair_weight(idx[0], idx[1], a, b),
        k if k % 2 == 1 => 0.0,
        _ => {
            let first = idx[0];
            let rest = &idx[1..];
            let mut total = 0.0;
            for (m, &j) in rest.iter().enumerate() {
                let sub: Vec<usize> = rest
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != m)
                    .map(|(_, &v)| v)
                    .collect();
                // Product rule over the pairing product.
                total += pair_weight(first, j, a, b) * central_moment(&sub, sigma)
                    + s_entry(sigma, first, j) * central_moment_dsigma(&sub, sigma, a, b);
            }
            total
        }
    }
}

/// d s(i,j) / d sigma[(a,b)] treating all matrix entries as independent,
/// with the pairing product reading the symmetrized entry.
fn pair_weight(i: usize, j: usize, a: usize, b: usize) -> f64 {
    if i == j {
        if i == a && i == b {
            1.0
        } else {
            0.0
        }
    } else {
        let mut w = 0.0;
        if i == a && j == b {
            w += 0.5;
        }
        if j == a && i == b {
            w += 0.5;
        }
        w
    }
}

/// Iterate all sub-multi-indices `j <= k` (componentwise).
fn for_each_sub_index(k: &[u8], mut f: impl FnMut(&[u8])) {
    let mut j = vec![0u8; k.len()];
    loop {
        f(&j);
        // Odometer increment.
        let mut pos = 0;
        loop {
            if pos == k.len() {
                return;
            }
            if j[pos] < k[pos] {
                j[pos] += 1;
                for slot in j.iter_mut().take(pos) {
                    *slot = 0;
                }
                break;
            }
            pos += 1;
        }
    }
}

fn check_dims(o: &PolynomialObservable, alpha: &PhasePoint, sigma: &CovMatrix) {
    assert_eq!(
        o.vars(),
        2 * alpha.dof(),
        "observable has {} variables but the state has 2d = {}",
        o.vars(),
        2 * alpha.dof()
    );
    assert_eq!(alpha.dof(), sigma.dof());
}

/// Exact Gaussian expectation of the polynomial symbol: expand around the
/// centroid and contract central moments by Isserlis pairings (odd central
/// moments vanish).
pub fn gaussian_expectation(
    o: &PolynomialObservable,
    alpha: &PhasePoint,
    sigma: &CovMatrix,
) -> f64 {
    check_dims(o, alpha, sigma);
    let s = sigma.entries();
    let mut total = 0.0;
    for (k, coeff) in o.terms() {
        let mut term = 0.0;
        for_each_sub_index(k, |j| {
            // alpha part: prod_i C(k_i, j_i) alpha_i^{k_i - j_i}.
            let mut alpha_part = 1.0;
            let mut idx = Vec::with_capacity(MAX_DEGREE);
            for (i, (&ki, &ji)) in k.iter().zip(j).enumerate() {
                alpha_part *= binom(ki, ji) * alpha.coords()[i].powi(i32::from(ki - ji));
                for _ in 0..ji {
                    idx.push(i);
                }
            }
            if idx.len() % 2 == 0 {
                term += alpha_part * central_moment(&idx, s);
            }
        });
        total += coeff * term;
    }
    total
}

/// Gradient of the expectation in the centroid: `d<O>/d alpha_a = <d_a O>`.
pub fn grad_alpha(o: &PolynomialObservable, alpha: &PhasePoint, sigma: &CovMatrix) -> DVector<f64> {
    check_dims(o, alpha, sigma);
    let n = o.vars();
    DVector::from_fn(n, |a, _| {
        gaussian_expectation(&o.differentiate(a), alpha, sigma)
    })
}

/// Hessian of the expectation in the centroid.
pub fn hess_alpha(o: &PolynomialObservable, alpha: &PhasePoint, sigma: &CovMatrix) -> DMatrix<f64> {
    check_dims(o, alpha, sigma);
    let n = o.vars();
    let partials: Vec<PolynomialObservable> = (0..n).map(|a| o.differentiate(a)).collect();
    DMatrix::from_fn(n, n, |a, b| {
        gaussian_expectation(&partials[a].differentiate(b), alpha, sigma)
    })
}

/// Covariance gradient of the expectation via the structural identity
/// `d<O>/d sigma^{ab} = (1/2) d^2 <O> / d alpha^a d alpha^b`.
pub fn grad_sigma(o: &PolynomialObservable, alpha: &PhasePoint, sigma: &CovMatrix) -> DMatrix<f64> {
    hess_alpha(o, alpha, sigma) * 0.5
}

/// Covariance gradient computed directly from the Wick form, by
/// differentiating the pairing products entry by entry. Must agree with
/// [`grad_sigma`]; kept as the independent route for that check.
pub fn grad_sigma_direct(
    o: &PolynomialObservable,
    alpha: &PhasePoint,
    sigma: &CovMatrix,
) -> DMatrix<f64> {
    check_dims(o, alpha, sigma);
    let n = o.vars();
    let s = sigma.entries();
    DMatrix::from_fn(n, n, |a, b| {
        let mut total = 0.0;
        for (k, coeff) in o.terms() {
            let mut term = 0.0;
            for_each_sub_index(k, |j| {
                let mut alpha_part = 1.0;
                let mut idx = Vec::with_capacity(MAX_DEGREE);
                for (i, (&ki, &ji)) in k.iter().zip(j).enumerate() {
                    alpha_part *= binom(ki, ji) * alpha.coords()[i].powi(i32::from(ki - ji));
                    for _ in 0..ji {
                        idx.push(i);
                    }
                }
                if idx.len() % 2 == 0 {
                    term += alpha_part * central_moment_dsigma(&idx, s, a, b);
                }
            });
            total += coeff * term;
        }
        total
    })
}

/// An observable rate split into its coherent and diffusive parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateDecomposition {
    pub coherent: f64,
    pub diffusive: f64,
    pub total: f64,
}

impl RateDecomposition {
    fn new(coherent: f64, diffusive: f64) -> Self {
        Self {
            coherent,
            diffusive,
            total: coherent + diffusive,
        }
    }
}

/// Rate of change of `<O>` for a single Gaussian component:
/// coherent = `U . grad_alpha + S0 : grad_sigma`, diffusive =
/// `(1/2) SD : hess_alpha`.
pub fn component_rate(
    model: &LindbladModel,
    state: &GaussianComponent,
    o: &PolynomialObservable,
) -> Result<RateDecomposition, DynamicsError> {
    let u = model.drift(&state.alpha)?;
    let (s0, sd) = model.split_s(&state.alpha, &state.sigma)?;
    let ga = grad_alpha(o, &state.alpha, &state.sigma);
    let hess = hess_alpha(o, &state.alpha, &state.sigma);

    let mut coherent = u.dot(&ga);
    let mut diffusive = 0.0;
    let n = o.vars();
    for a in 0..n {
        for b in 0..n {
            // grad_sigma = hess/2 entry-wise.
            coherent += s0[(a, b)] * 0.5 * hess[(a, b)];
            diffusive += 0.5 * sd[(a, b)] * hess[(a, b)];
        }
    }
    Ok(RateDecomposition::new(coherent, diffusive))
}

/// Weight-averaged rate over a mixture snapshot. With
/// `flags.ehrenfest_factor_two` the coherent part is doubled (the literal
/// push-forward bookkeeping, which double-counts against a finite-difference
/// derivative).
pub fn mixture_rate(
    model: &LindbladModel,
    snapshot: &MixtureSnapshot,
    o: &PolynomialObservable,
    flags: ConventionFlags,
) -> Result<RateDecomposition, DynamicsError> {
    let mut coherent = 0.0;
    let mut diffusive = 0.0;
    for comp in &snapshot.components {
        let rate = component_rate(model, comp, o)?;
        coherent += comp.weight * rate.coherent;
        diffusive += comp.weight * rate.diffusive;
    }
    if flags.ehrenfest_factor_two {
        coherent *= 2.0;
    }
    Ok(RateDecomposition::new(coherent, diffusive))
}

/// One row of the energy ledger: mixture energy, work rate, heat rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyRecord {
    pub time: f64,
    pub energy: f64,
    pub work_rate: f64,
    pub heat_rate: f64,
}

/// Energy balance along a sequence of snapshots: `E(t) = <H>`, the work rate
/// is the coherent part of the H-rate and the heat rate the diffusive part.
/// Requires a polynomial Hamiltonian.
pub fn energy_balance(
    model: &LindbladModel,
    snapshots: &[MixtureSnapshot],
) -> Result<Vec<EnergyRecord>, DynamicsError> {
    let h_poly =
        PolynomialObservable::from_expr(model.hamiltonian(), model.dof(), model.bindings())?;
    snapshots
        .iter()
        .map(|snap| {
            let energy = mixture_expectation(snap, &h_poly);
            let rate = mixture_rate(model, snap, &h_poly, model.conventions())?;
            Ok(EnergyRecord {
                time: snap.time,
                energy,
                work_rate: rate.coherent,
                heat_rate: rate.diffusive,
            })
        })
        .collect()
}

/// Trapezoidal integral of `work_rate + heat_rate`; the first-law residual
/// against `E(t) - E(0)` bounds the bookkeeping error.
pub fn integrate_rates(records: &[EnergyRecord]) -> f64 {
    records
        .windows(2)
        .map(|w| {
            let dt = w[1].time - w[0].time;
            0.5 * dt
                * (w[0].work_rate + w[0].heat_rate + w[1].work_rate + w[1].heat_rate)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::{ConventionFlags, LindbladModel};
    use crate::symbol::parse;
    use nalgebra::DMatrix;
    use std::collections::BTreeSet;

    fn pt(coords: &[f64]) -> PhasePoint {
        PhasePoint::new(coords.to_vec()).unwrap()
    }

    fn cov(entries: &[f64]) -> CovMatrix {
        CovMatrix::new(DMatrix::from_row_slice(2, 2, entries)).unwrap()
    }

    fn poly(terms: &[(&[u8], f64)]) -> PolynomialObservable {
        PolynomialObservable::new(2, terms.iter().map(|(k, v)| (k.to_vec(), *v))).unwrap()
    }

    /// Brute-force oracle: enumerate every perfect matching of the index
    /// multiset explicitly and sum the pairing products. Written as an
    /// independent path (explicit matching lists, not the recursion used by
    /// the implementation).
    fn moment_by_matchings(idx: &[usize], sigma: &DMatrix<f64>) -> f64 {
        fn matchings(items: &[usize]) -> Vec<Vec<(usize, usize)>> {
            if items.is_empty() {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            let first = items[0];
            for m in 1..items.len() {
                let partner = items[m];
                let mut rest: Vec<usize> = Vec::new();
                for (i, &v) in items.iter().enumerate().skip(1) {
                    if i != m {
                        rest.push(v);
                    }
                }
                for mut tail in matchings(&rest) {
                    let mut full = vec![(first, partner)];
                    full.append(&mut tail);
                    out.push(full);
                }
            }
            out
        }
        if idx.len() % 2 == 1 {
            return 0.0;
        }
        matchings(idx)
            .into_iter()
            .map(|pairs| {
                pairs
                    .into_iter()
                    .map(|(i, j)| 0.5 * (sigma[(i, j)] + sigma[(j, i)]))
                    .product::<f64>()
            })
            .sum()
    }

    /// Gaussian expectation by brute-force expansion + matching enumeration.
    fn expectation_oracle(
        o: &PolynomialObservable,
        alpha: &PhasePoint,
        sigma: &CovMatrix,
    ) -> f64 {
        let mut total = 0.0;
        for (k, coeff) in o.terms() {
            let mut term = 0.0;
            for_each_sub_index(k, |j| {
                let mut alpha_part = 1.0;
                let mut idx = Vec::new();
                for (i, (&ki, &ji)) in k.iter().zip(j).enumerate() {
                    alpha_part *= binom(ki, ji) * alpha.coords()[i].powi(i32::from(ki - ji));
                    for _ in 0..ji {
                        idx.push(i);
                    }
                }
                term += alpha_part * moment_by_matchings(&idx, sigma.entries());
            });
            total += coeff * term;
        }
        total
    }

    /// 5-point Gauss-Hermite tensor quadrature, exact for total degree <= 9.
    fn expectation_quadrature(
        o: &PolynomialObservable,
        alpha: &PhasePoint,
        sigma: &CovMatrix,
    ) -> f64 {
        const NODES: [f64; 5] = [
            -2.0201828704560856,
            -0.9585724646138185,
            0.0,
            0.9585724646138185,
            2.0201828704560856,
        ];
        const WEIGHTS: [f64; 5] = [
            0.019953242059045913,
            0.3936193231522412,
            0.9453087204829419,
            0.3936193231522412,
            0.019953242059045913,
        ];
        let n = o.vars();
        let chol = sigma
            .entries()
            .clone()
            .cholesky()
            .expect("quadrature oracle needs positive definite sigma")
            .l();
        let eval_poly = |beta: &DVector<f64>| -> f64 {
            o.terms()
                .map(|(k, c)| {
                    c * k
                        .iter()
                        .enumerate()
                        .map(|(i, &ki)| beta[i].powi(i32::from(ki)))
                        .product::<f64>()
                })
                .sum()
        };
        // Tensor grid over n dims.
        let mut total = 0.0;
        let mut grid = vec![0usize; n];
        loop {
            let mut w = 1.0;
            let mut z = DVector::zeros(n);
            for (i, &g) in grid.iter().enumerate() {
                w *= WEIGHTS[g];
                z[i] = NODES[g] * std::f64::consts::SQRT_2;
            }
            let beta = alpha.coords() + &chol * z;
            total += w * eval_poly(&beta);
            let mut pos = 0;
            loop {
                if pos == n {
                    return total / std::f64::consts::PI.powi(n as i32 / 2);
                }
                if grid[pos] + 1 < NODES.len() {
                    grid[pos] += 1;
                    for slot in grid.iter_mut().take(pos) {
                        *slot = 0;
                    }
                    break;
                }
                pos += 1;
            }
        }
    }

    #[test]
    fn expectation_of_x_squared() {
        let o = poly(&[(&[2, 0], 1.0)]);
        let alpha = pt(&[1.5, -0.5]);
        let sigma = cov(&[0.7, 0.1, 0.1, 0.9]);
        let got = gaussian_expectation(&o, &alpha, &sigma);
        assert!((got - (1.5 * 1.5 + 0.7)).abs() < 1e-15);
    }

    #[test]
    fn expectation_of_x_is_centroid() {
        let o = poly(&[(&[1, 0], 1.0)]);
        let alpha = pt(&[0.37, 2.1]);
        let sigma = cov(&[0.7, 0.1, 0.1, 0.9]);
        assert_eq!(gaussian_expectation(&o, &alpha, &sigma), 0.37);
    }

    #[test]
    fn expectation_of_x_fourth_centered() {
        // Three pairings of four identical indices: 3 (sigma^xx)^2.
        let o = poly(&[(&[4, 0], 1.0)]);
        let alpha = pt(&[0.0, 0.0]);
        let sigma = cov(&[0.7, 0.1, 0.1, 0.9]);
        let got = gaussian_expectation(&o, &alpha, &sigma);
        assert!((got - 3.0 * 0.7 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn expectation_of_constant_is_constant() {
        let o = PolynomialObservable::constant(2, 1.0);
        let alpha = pt(&[3.0, -2.0]);
        let sigma = cov(&[0.7, 0.1, 0.1, 0.9]);
        assert_eq!(gaussian_expectation(&o, &alpha, &sigma), 1.0);
    }

    /// Admissible dyadic test covariances and centroids: every entry is a
    /// small multiple of 1/8, so all pairing products and their sums are
    /// exact in f64 and the two enumeration routes must agree bitwise.
    fn dyadic_cases() -> Vec<(PhasePoint, CovMatrix)> {
        let sigmas = [
            [1.0, 0.5, 0.5, 1.0],
            [0.5, 0.0, 0.0, 0.5],
            [2.0, -0.5, -0.5, 1.0],
            [1.5, 0.25, 0.25, 0.75],
        ];
        let alphas = [
            [0.0, 0.0],
            [0.5, -0.5],
            [1.0, 2.0],
            [-1.5, 0.25],
        ];
        let mut out = Vec::new();
        for s in sigmas {
            for a in alphas {
                out.push((pt(&a), cov(&s)));
            }
        }
        out
    }

    #[test]
    fn wick_matches_matching_enumeration_exactly() {
        for deg in 0..=6u8 {
            for kx in 0..=deg {
                let kp = deg - kx;
                let o = poly(&[(&[kx, kp], 1.0)]);
                for (alpha, sigma) in dyadic_cases() {
                    let wick = gaussian_expectation(&o, &alpha, &sigma);
                    let oracle = expectation_oracle(&o, &alpha, &sigma);
                    assert_eq!(wick, oracle, "monomial x^{kx} p^{kp}");
                }
            }
        }
    }

    #[test]
    fn wick_matches_gauss_hermite_quadrature() {
        let alpha = pt(&[0.4, -0.7]);
        let sigma = cov(&[0.9, 0.2, 0.2, 0.6]);
        for deg in 0..=6u8 {
            for kx in 0..=deg {
                let kp = deg - kx;
                let o = poly(&[(&[kx, kp], 1.0)]);
                let wick = gaussian_expectation(&o, &alpha, &sigma);
                let quad = expectation_quadrature(&o, &alpha, &sigma);
                let scale = wick.abs().max(quad.abs()).max(1.0);
                assert!(
                    (wick - quad).abs() / scale < 1e-12,
                    "x^{kx} p^{kp}: wick={wick}, quad={quad}"
                );
            }
        }
    }

    #[test]
    fn degree_bound_enforced() {
        assert!(matches!(
            PolynomialObservable::monomial(2, &[5, 4], 1.0),
            Err(ObservableError::DegreeTooHigh { degree: 9, .. })
        ));
        assert!(PolynomialObservable::monomial(2, &[4, 4], 1.0).is_ok());
    }

    #[test]
    fn grad_and_hess_quadratic() {
        let o = poly(&[(&[2, 0], 1.0)]);
        let alpha = pt(&[1.2, -0.3]);
        let sigma = cov(&[0.7, 0.1, 0.1, 0.9]);
        let g = grad_alpha(&o, &alpha, &sigma);
        assert_eq!(g[0], 2.4);
        assert_eq!(g[1], 0.0);
        let h = hess_alpha(&o, &alpha, &sigma);
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn grad_and_hess_kinetic_energy() {
        // <H> = alpha_p^2/2m + sigma^pp/2m: grad = (0, alpha_p/m),
        // hess = diag(0, 1/m).
        let m = 1.4;
        let o = poly(&[(&[0, 2], 1.0 / (2.0 * m))]);
        let alpha = pt(&[0.3, 1.1]);
        let sigma = cov(&[0.7, 0.1, 0.1, 0.9]);
        let g = grad_alpha(&o, &alpha, &sigma);
        assert!((g[0]).abs() < 1e-15);
        assert!((g[1] - 1.1 / m).abs() < 1e-15);
        let h = hess_alpha(&o, &alpha, &sigma);
        assert!((h[(1, 1)] - 1.0 / m).abs() < 1e-15);
        assert_eq!(h[(0, 0)], 0.0);
    }

    #[test]
    fn grad_alpha_matches_finite_differences() {
        let o = poly(&[(&[3, 1], 0.7), (&[1, 2], -0.4), (&[0, 4], 0.2)]);
        let sigma = cov(&[0.9, 0.2, 0.2, 0.6]);
        let h = 1e-5;
        for coords in [[0.4, -0.7], [1.3, 0.8]] {
            let alpha = pt(&coords);
            let g = grad_alpha(&o, &alpha, &sigma);
            for a in 0..2 {
                let mut up = coords;
                let mut dn = coords;
                up[a] += h;
                dn[a] -= h;
                let fd = (gaussian_expectation(&o, &pt(&up), &sigma)
                    - gaussian_expectation(&o, &pt(&dn), &sigma))
                    / (2.0 * h);
                let scale = g[a].abs().max(fd.abs()).max(1.0);
                assert!((g[a] - fd).abs() / scale < 1e-7);
            }
        }
    }

    #[test]
    fn grad_sigma_identity_on_quadratic() {
        let o = poly(&[(&[2, 0], 1.0)]);
        let alpha = pt(&[0.4, 0.2]);
        let sigma = cov(&[0.7, 0.1, 0.1, 0.9]);
        let gs = grad_sigma(&o, &alpha, &sigma);
        assert_eq!(gs[(0, 0)], 1.0);
        let direct = grad_sigma_direct(&o, &alpha, &sigma);
        assert_eq!(direct[(0, 0)], 1.0);
        assert_eq!(gs, direct);
    }

    #[test]
    fn grad_sigma_identity_on_quartic() {
        // <x^4> at alpha=0 is 3 (sigma^xx)^2: both routes give 6 sigma^xx.
        let o = poly(&[(&[4, 0], 1.0)]);
        let alpha = pt(&[0.0, 0.0]);
        let sigma = cov(&[0.7, 0.1, 0.1, 0.9]);
        let gs = grad_sigma(&o, &alpha, &sigma);
        let direct = grad_sigma_direct(&o, &alpha, &sigma);
        assert!((gs[(0, 0)] - 6.0 * 0.7).abs() < 1e-14);
        assert!((direct[(0, 0)] - 6.0 * 0.7).abs() < 1e-14);
        assert!((&gs - &direct).amax() < 1e-14);
    }

    #[test]
    fn grad_sigma_zero_for_linear() {
        let o = poly(&[(&[0, 1], 1.0)]);
        let alpha = pt(&[0.3, -0.9]);
        let sigma = cov(&[0.7, 0.1, 0.1, 0.9]);
        assert_eq!(grad_sigma(&o, &alpha, &sigma), DMatrix::zeros(2, 2));
        assert_eq!(grad_sigma_direct(&o, &alpha, &sigma), DMatrix::zeros(2, 2));
    }

    fn free_particle_model() -> LindbladModel {
        let ps: BTreeSet<String> = ["m", "c"].iter().map(|s| s.to_string()).collect();
        let h = parse("p1^2/(2*m)", 1, &ps).unwrap();
        let l = crate::symbol::ComplexSymbol::real(parse("c*x1", 1, &ps).unwrap());
        let mut b = ParamBindings::new();
        b.set("m", 1.0).set("c", 0.3f64.sqrt());
        LindbladModel::new(1, 1.0, h, vec![l], b, ConventionFlags::default()).unwrap()
    }

    #[test]
    fn component_rate_position_variance() {
        // O = x^2 on the reference model: coherent = 2xp/m + 2 sigma^xp/m,
        // diffusive = 2 hbar lambda, by contracting the displayed
        // coefficients by hand.
        let model = free_particle_model();
        let o = poly(&[(&[2, 0], 1.0)]);
        let (x, p, sxp) = (0.8, 1.1, 0.35);
        let state = GaussianComponent::new(
            pt(&[x, p]),
            cov(&[1.4, sxp, sxp, 0.5]),
            1.0,
        )
        .unwrap();
        let rate = component_rate(&model, &state, &o).unwrap();
        assert!((rate.coherent - (2.0 * x * p + 2.0 * sxp)).abs() < 1e-14);
        assert!((rate.diffusive - 0.3).abs() < 1e-15);
        assert_eq!(rate.total, rate.coherent + rate.diffusive);
    }

    #[test]
    fn component_rate_constant_observable_vanishes() {
        let model = free_particle_model();
        let o = PolynomialObservable::constant(2, 42.0);
        let state = GaussianComponent::coherent(pt(&[0.0, 1.0]), 1.0);
        let rate = component_rate(&model, &state, &o).unwrap();
        assert_eq!(rate.coherent, 0.0);
        assert_eq!(rate.diffusive, 0.0);
        assert_eq!(rate.total, 0.0);
    }

    #[test]
    fn component_rate_energy_conserved_in_reference_model() {
        // O = H = p^2/2m: no pp diffusion and no x-dependence of <H>, so
        // work and heat both vanish identically.
        let model = free_particle_model();
        let o = poly(&[(&[0, 2], 0.5)]);
        let state = GaussianComponent::new(
            pt(&[0.8, 1.1]),
            cov(&[1.4, 0.35, 0.35, 0.5]),
            1.0,
        )
        .unwrap();
        let rate = component_rate(&model, &state, &o).unwrap();
        assert!(rate.coherent.abs() < 1e-15);
        assert!(rate.diffusive.abs() < 1e-15);
    }

    #[test]
    fn mixture_rate_single_component_and_factor_two() {
        let model = free_particle_model();
        let o = poly(&[(&[2, 0], 1.0)]);
        let state = GaussianComponent::coherent(pt(&[0.5, 1.0]), 1.0);
        let snap = MixtureSnapshot::new(0.0, vec![state.clone()]).unwrap();
        let single = component_rate(&model, &state, &o).unwrap();
        let mixed = mixture_rate(&model, &snap, &o, model.conventions()).unwrap();
        assert_eq!(single, mixed);

        let doubled_flags = ConventionFlags {
            ehrenfest_factor_two: true,
            ..model.conventions()
        };
        let doubled = mixture_rate(&model, &snap, &o, doubled_flags).unwrap();
        assert_eq!(doubled.coherent, 2.0 * single.coherent);
        assert_eq!(doubled.diffusive, single.diffusive);
    }

    #[test]
    fn rates_are_linear_in_the_observable() {
        let model = free_particle_model();
        let oa = poly(&[(&[2, 0], 1.0)]);
        let ob = poly(&[(&[1, 1], 1.0), (&[0, 2], 0.5)]);
        let combo = oa.scale(1.75).add(&ob.scale(-0.6)).unwrap();
        let state = GaussianComponent::new(
            pt(&[0.8, 1.1]),
            cov(&[1.4, 0.35, 0.35, 0.5]),
            1.0,
        )
        .unwrap();
        let ra = component_rate(&model, &state, &oa).unwrap();
        let rb = component_rate(&model, &state, &ob).unwrap();
        let rc = component_rate(&model, &state, &combo).unwrap();
        assert!((rc.coherent - (1.75 * ra.coherent - 0.6 * rb.coherent)).abs() < 1e-12);
        assert!((rc.diffusive - (1.75 * ra.diffusive - 0.6 * rb.diffusive)).abs() < 1e-12);
    }

    #[test]
    fn from_expr_kinetic_energy() {
        let ps: BTreeSet<String> = ["m"].iter().map(|s| s.to_string()).collect();
        let e = parse("p1^2/(2*m)", 1, &ps).unwrap();
        let mut b = ParamBindings::new();
        b.set("m", 2.0);
        let o = PolynomialObservable::from_expr(&e, 1, &b).unwrap();
        assert_eq!(o, poly(&[(&[0, 2], 0.25)]));
    }

    #[test]
    fn from_expr_rejects_transcendental_and_unbound() {
        let ps: BTreeSet<String> = ["m"].iter().map(|s| s.to_string()).collect();
        let e = parse("sin(x1)", 1, &ps).unwrap();
        assert!(matches!(
            PolynomialObservable::from_expr(&e, 1, &ParamBindings::new()),
            Err(ObservableError::NonPolynomial(_))
        ));
        let e = parse("m*x1", 1, &ps).unwrap();
        assert!(matches!(
            PolynomialObservable::from_expr(&e, 1, &ParamBindings::new()),
            Err(ObservableError::UnboundParam(_))
        ));
        let e = parse("x1^9", 1, &ps).unwrap();
        assert!(matches!(
            PolynomialObservable::from_expr(&e, 1, &ParamBindings::new()),
            Err(ObservableError::DegreeTooHigh { .. })
        ));
    }

    #[test]
    fn energy_balance_reference_model_is_flat() {
        // E = p0^2/2m + sigma^pp/2m stays at 0.5 + 0.25; both rates vanish.
        let model = free_particle_model();
        let snaps: Vec<MixtureSnapshot> = [0.0, 1.0, 2.0]
            .iter()
            .map(|&t| {
                let sxx = 0.5 + 0.5 * t * t + 0.3 * t;
                let state = GaussianComponent::new(
                    pt(&[t, 1.0]),
                    cov(&[sxx, 0.5 * t, 0.5 * t, 0.5]),
                    1.0,
                )
                .unwrap();
                MixtureSnapshot::new(t, vec![state]).unwrap()
            })
            .collect();
        let records = energy_balance(&model, &snaps).unwrap();
        for r in &records {
            assert!((r.energy - 0.75).abs() < 1e-14);
            assert!(r.work_rate.abs() < 1e-14);
            assert!(r.heat_rate.abs() < 1e-14);
        }
        assert!(integrate_rates(&records).abs() < 1e-14);
    }

    #[test]
    fn energy_balance_rejects_nonpolynomial_hamiltonian() {
        let ps: BTreeSet<String> = BTreeSet::new();
        let h = parse("cos(x1)", 1, &ps).unwrap();
        let model = LindbladModel::new(
            1,
            1.0,
            h,
            vec![],
            ParamBindings::new(),
            ConventionFlags::default(),
        )
        .unwrap();
        let snap = MixtureSnapshot::new(
            0.0,
            vec![GaussianComponent::coherent(pt(&[0.0, 0.0]), 1.0)],
        )
        .unwrap();
        assert!(matches!(
            energy_balance(&model, &[snap]),
            Err(DynamicsError::Observable(ObservableError::NonPolynomial(_)))
        ));
    }
}
