//! Faedo-Galerkin reduction of the fractional phase-field system to the ODE
//! system
//!
//! ```text
//! Theta' + E Phi' + Lambda Theta = g(t),    Phi' + M Phi + F(Theta, Phi) = 0
//! ```
//!
//! with `Lambda = diag(lambda_j^{2r})`, `M = diag(mu_j^{2 sigma})`,
//! `E = l [(eta_j, e_i)]`, `g(t) = [(f(t), e_i)]` and
//! `F(Theta, Phi) = [(beta_eps(phi) + pi(phi) - l(phi) theta, eta_i)]`.
//! The nonlinearity is evaluated by collocation on the shared quadrature grid.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expr::Field;
use crate::potentials::PotentialSpec;
use crate::spectral::{eigen_power, SpectralBasis};

/// Latent-heat coupling `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coupling {
    Constant { value: f64 },
    /// `l(s) = base + amplitude * tanh(rate * s)`: bounded and Lipschitz.
    Tanh {
        base: f64,
        amplitude: f64,
        rate: f64,
    },
}

impl Default for Coupling {
    fn default() -> Self {
        Coupling::Constant { value: 1.0 }
    }
}

impl Coupling {
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            Coupling::Constant { value } => value,
            Coupling::Tanh {
                base,
                amplitude,
                rate,
            } => base + amplitude * (rate * s).tanh(),
        }
    }

    pub fn constant_value(&self) -> Option<f64> {
        match *self {
            Coupling::Constant { value } => Some(value),
            Coupling::Tanh { .. } => None,
        }
    }

    pub fn bound(&self) -> f64 {
        match *self {
            Coupling::Constant { value } => value.abs(),
            Coupling::Tanh {
                base, amplitude, ..
            } => base.abs() + amplitude.abs(),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match *self {
            Coupling::Constant { .. } => 0.0,
            Coupling::Tanh {
                amplitude, rate, ..
            } => (amplitude * rate).abs(),
        }
    }
}

/// Heat source `f(x, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    #[default]
    Zero,
    Field { terms: Field },
    /// Grid samples at increasing times, linearly interpolated in between and
    /// held constant outside.
    Table {
        times: Vec<f64>,
        samples: Vec<Vec<f64>>,
    },
}

impl Source {
    pub fn sample(&self, basis: &SpectralBasis, t: f64) -> Result<Vec<f64>> {
        match self {
            Source::Zero => Ok(vec![0.0; basis.n_points()]),
            Source::Field { terms } => terms.sample(basis, t),
            Source::Table { times, samples } => {
                if times.is_empty() || times.len() != samples.len() {
                    return Err(Error::invalid("source table needs matching times/samples"));
                }
                if let Some(s) = samples.iter().find(|s| s.len() != basis.n_points()) {
                    return Err(Error::LengthMismatch {
                        expected: basis.n_points(),
                        got: s.len(),
                    });
                }
                if t <= times[0] {
                    return Ok(samples[0].clone());
                }
                if t >= times[times.len() - 1] {
                    return Ok(samples[times.len() - 1].clone());
                }
                let k = times.partition_point(|&x| x <= t) - 1;
                let w = (t - times[k]) / (times[k + 1] - times[k]);
                Ok(samples[k]
                    .iter()
                    .zip(&samples[k + 1])
                    .map(|(a, b)| (1.0 - w) * a + w * b)
                    .collect())
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Source::Zero => true,
            Source::Field { terms } => terms.is_zero(),
            Source::Table { samples, .. } => samples.iter().flatten().all(|v| *v == 0.0),
        }
    }
}

/// Initial data, source and coupling of one problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ProblemData {
    #[serde(default)]
    pub theta0: Field,
    #[serde(default)]
    pub phi0: Field,
    #[serde(default)]
    pub source: Source,
    #[serde(default)]
    pub coupling: Coupling,
}

/// Which operator plays the role of `B^{2 sigma}` in the phase equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhaseOperator {
    Fractional,
    /// `I - P`: the phase-relaxation limit `sigma -> 0`.
    RelaxationLimit,
}

/// Assembled Galerkin system; immutable and shareable across runs.
#[derive(Debug, Clone)]
pub struct DiscreteSystem {
    basis_a: Arc<SpectralBasis>,
    basis_b: Arc<SpectralBasis>,
    r: f64,
    sigma: f64,
    lambda: Vec<f64>,
    m_diag: Vec<f64>,
    phase_operator: PhaseOperator,
    coupling: Coupling,
    same_basis: bool,
    /// `(eta_j, e_i)`, row-major `n_a x n_b`; absent when the bases coincide.
    cross: Option<Vec<f64>>,
    eps: f64,
    potential: PotentialSpec,
    source: Source,
    warnings: Vec<String>,
}

/// Output of [`DiscreteSystem::eval_nonlinearity`].
#[derive(Debug, Clone, PartialEq)]
pub struct Nonlinearity {
    /// `l(phi) theta` on the grid.
    pub coupling_grid: Vec<f64>,
    /// `F(Theta, Phi)` in B-coefficients.
    pub f_phi: Vec<f64>,
}

/// Assembles the Galerkin system. `eps = 0` keeps the unregularized `beta`
/// (only meaningful for the proximal scheme).
pub fn assemble(
    data: &ProblemData,
    basis_a: Arc<SpectralBasis>,
    basis_b: Arc<SpectralBasis>,
    r: f64,
    sigma: f64,
    eps: f64,
    potential: PotentialSpec,
) -> Result<DiscreteSystem> {
    if !basis_a.shares_grid_with(&basis_b) {
        return Err(Error::invalid(
            "bases A and B must live on the same domain and quadrature grid",
        ));
    }
    for (name, v) in [("r", r), ("sigma", sigma)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::invalid(format!("{name} must be positive, got {v}")));
        }
    }
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(Error::invalid(format!("eps must be >= 0, got {eps}")));
    }

    let phi0 = data.phi0.sample(&basis_b, 0.0)?;
    validate_phase_data(&potential, &phi0, &basis_b)?;
    data.theta0.sample(&basis_a, 0.0)?;
    data.source.sample(&basis_a, 0.0)?;

    let mut warnings = Vec::new();
    if data.coupling.constant_value().is_none() && r + 2.0 * sigma <= 0.75 {
        let msg = format!(
            "nonconstant coupling with r + 2 sigma = {} <= 3/4: embedding condition for well-posedness not met",
            r + 2.0 * sigma
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let same_basis = Arc::ptr_eq(&basis_a, &basis_b) || *basis_a == *basis_b;
    let cross = if same_basis {
        None
    } else {
        let (na, nb) = (basis_a.n_modes(), basis_b.n_modes());
        let mut c = vec![0.0; na * nb];
        for (node, w) in basis_a.weights().iter().enumerate() {
            for i in 0..na {
                let we = w * basis_a.value(node, i);
                for j in 0..nb {
                    c[i * nb + j] += we * basis_b.value(node, j);
                }
            }
        }
        Some(c)
    };

    let lambda = basis_a
        .eigenvalues()
        .iter()
        .map(|&l| eigen_power(l, 2.0 * r))
        .collect();
    let m_diag = basis_b
        .eigenvalues()
        .iter()
        .map(|&m| eigen_power(m, 2.0 * sigma))
        .collect();

    Ok(DiscreteSystem {
        basis_a,
        basis_b,
        r,
        sigma,
        lambda,
        m_diag,
        phase_operator: PhaseOperator::Fractional,
        coupling: data.coupling.clone(),
        same_basis,
        cross,
        eps,
        potential,
        source: data.source.clone(),
        warnings,
    })
}

/// `beta_hat(phi0)` finite at every node; reports the offending nodes.
fn validate_phase_data(potential: &PotentialSpec, phi0: &[f64], basis: &SpectralBasis) -> Result<()> {
    let bad: Vec<usize> = phi0
        .iter()
        .enumerate()
        .filter(|(_, v)| !potential.beta_hat(**v).is_finite())
        .map(|(i, _)| i)
        .collect();
    if bad.is_empty() {
        return Ok(());
    }
    let listed: Vec<String> = bad
        .iter()
        .take(5)
        .map(|&i| format!("node {i} at {:?}: phi0 = {}", basis.points()[i], phi0[i]))
        .collect();
    Err(Error::config(
        "data.phi0",
        format!(
            "{} node(s) outside the domain of beta_hat: {}{}",
            bad.len(),
            listed.join("; "),
            if bad.len() > 5 { "; ..." } else { "" }
        ),
    ))
}

impl DiscreteSystem {
    pub fn basis_a(&self) -> &SpectralBasis {
        &self.basis_a
    }

    pub fn basis_b(&self) -> &SpectralBasis {
        &self.basis_b
    }

    pub fn basis_a_arc(&self) -> Arc<SpectralBasis> {
        Arc::clone(&self.basis_a)
    }

    pub fn basis_b_arc(&self) -> Arc<SpectralBasis> {
        Arc::clone(&self.basis_b)
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn potential(&self) -> &PotentialSpec {
        &self.potential
    }

    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    pub fn source(&self) -> &Source {
        &self.source
    }

    /// Diagonal of `Lambda`.
    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// Diagonal of `M` (or of `I - P` in the relaxation limit).
    pub fn m_diag(&self) -> &[f64] {
        &self.m_diag
    }

    pub fn phase_operator(&self) -> PhaseOperator {
        self.phase_operator
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn same_basis(&self) -> bool {
        self.same_basis
    }

    pub fn n_a(&self) -> usize {
        self.basis_a.n_modes()
    }

    pub fn n_b(&self) -> usize {
        self.basis_b.n_modes()
    }

    /// Copy with a different Yosida level.
    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(Error::invalid(format!("eps must be >= 0, got {eps}")));
        }
        Ok(DiscreteSystem {
            eps,
            ..self.clone()
        })
    }

    /// Copy where `B^{2 sigma}` is replaced by `I - P` (multiplier 1 on
    /// modes with positive eigenvalue, 0 on the kernel).
    pub fn relaxation_limit(&self) -> Self {
        let m_diag = self
            .basis_b
            .eigenvalues()
            .iter()
            .map(|&m| if m > 0.0 { 1.0 } else { 0.0 })
            .collect();
        DiscreteSystem {
            m_diag,
            phase_operator: PhaseOperator::RelaxationLimit,
            ..self.clone()
        }
    }

    /// Source coefficients `g(t) = [(f(t), e_i)]`.
    pub fn g(&self, t: f64) -> Result<Vec<f64>> {
        if self.source.is_zero() {
            return Ok(vec![0.0; self.n_a()]);
        }
        self.basis_a.analyze(&self.source.sample(&self.basis_a, t)?)
    }

    pub fn theta_grid(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.basis_a.synthesize(theta)
    }

    pub fn phi_grid(&self, phi: &[f64]) -> Result<Vec<f64>> {
        self.basis_b.synthesize(phi)
    }

    /// `beta_eps(s)`, or the minimal section when `eps = 0`.
    pub fn beta_value(&self, s: f64) -> Result<f64> {
        if self.eps > 0.0 {
            self.potential.yosida(self.eps, s)
        } else {
            self.potential.beta_min(s).ok_or_else(|| {
                Error::NonFinite(format!("phi = {s} outside the domain of beta"))
            })
        }
    }

    /// `F(Theta, Phi)` by collocation, together with the grid coupling term.
    pub fn eval_nonlinearity(&self, theta: &[f64], phi: &[f64]) -> Result<Nonlinearity> {
        self.eval_parts(theta, phi, true)
    }

    /// `F` without the convex part: `[(pi(phi) - l(phi) theta, eta_i)]`.
    pub fn eval_smooth_part(&self, theta: &[f64], phi: &[f64]) -> Result<Nonlinearity> {
        self.eval_parts(theta, phi, false)
    }

    fn eval_parts(&self, theta: &[f64], phi: &[f64], with_beta: bool) -> Result<Nonlinearity> {
        let pg = self.phi_grid(phi)?;
        let tg = self.theta_grid(theta)?;
        let mut coupling_grid = Vec::with_capacity(pg.len());
        let mut h = Vec::with_capacity(pg.len());
        for (&p, &t) in pg.iter().zip(&tg) {
            let lt = self.coupling.eval(p) * t;
            let b = if with_beta { self.beta_value(p)? } else { 0.0 };
            coupling_grid.push(lt);
            h.push(b + self.potential.pi(p) - lt);
        }
        let f_phi = self.basis_b.analyze(&h)?;
        Ok(Nonlinearity {
            coupling_grid,
            f_phi,
        })
    }

    /// `E(Phi) w`: constant coupling uses the (cross-)mass matrix, nonconstant
    /// coupling is evaluated matrix-free as `analyze_A(l(phi) synthesize_B(w))`.
    pub fn apply_coupling(&self, phi: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        match self.coupling.constant_value() {
            Some(l) if self.same_basis => {
                if w.len() != self.n_b() {
                    return Err(Error::LengthMismatch {
                        expected: self.n_b(),
                        got: w.len(),
                    });
                }
                Ok(w.iter().map(|v| l * v).collect())
            }
            Some(l) => {
                let nb = self.n_b();
                if w.len() != nb {
                    return Err(Error::LengthMismatch {
                        expected: nb,
                        got: w.len(),
                    });
                }
                let c = self.cross.as_ref().expect("cross matrix assembled for distinct bases");
                Ok(c.chunks_exact(nb)
                    .map(|row| l * row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
                    .collect())
            }
            None => self.apply_coupling_quadrature(phi, w),
        }
    }

    /// Generic quadrature route for `E(Phi) w`, valid for every coupling.
    pub fn apply_coupling_quadrature(&self, phi: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let pg = self.phi_grid(phi)?;
        let wg = self.basis_b.synthesize(w)?;
        let prod: Vec<f64> = pg
            .iter()
            .zip(&wg)
            .map(|(p, v)| self.coupling.eval(*p) * v)
            .collect();
        self.basis_a.analyze(&prod)
    }

    /// Entry `(i, j)` of the constant-coupling matrix `E = l (eta_j, e_i)`.
    pub fn coupling_entry(&self, i: usize, j: usize) -> Option<f64> {
        let l = self.coupling.constant_value()?;
        Some(match &self.cross {
            None => {
                if i == j {
                    l
                } else {
                    0.0
                }
            }
            Some(c) => l * c[i * self.n_b() + j],
        })
    }

    /// H-projections of the initial data onto the discrete spaces.
    pub fn project_data(&self, data: &ProblemData) -> Result<(Vec<f64>, Vec<f64>)> {
        let theta0 = self.basis_a.analyze(&data.theta0.sample(&self.basis_a, 0.0)?)?;
        let phi0 = self.basis_b.analyze(&data.phi0.sample(&self.basis_b, 0.0)?)?;
        Ok((theta0, phi0))
    }
}

/// Free-function form of [`DiscreteSystem::project_data`].
pub fn project_data(system: &DiscreteSystem, data: &ProblemData) -> Result<(Vec<f64>, Vec<f64>)> {
    system.project_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Term;
    use crate::spectral::{build_interval_basis, coeff_norm, graph_norm, BasisKind};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn neumann(n: usize, m: usize) -> Arc<SpectralBasis> {
        Arc::new(build_interval_basis(BasisKind::IntervalNeumann, 1.0, n, m).unwrap())
    }

    fn data(l: f64) -> ProblemData {
        ProblemData {
            coupling: Coupling::Constant { value: l },
            ..Default::default()
        }
    }

    #[test]
    fn same_basis_coupling_is_scaled_identity() {
        let b = neumann(6, 48);
        let sys = assemble(&data(2.0), b.clone(), b, 0.5, 0.5, 1e-2, PotentialSpec::regular()).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let e = sys.coupling_entry(i, j).unwrap();
                assert_abs_diff_eq!(e, if i == j { 2.0 } else { 0.0 }, epsilon = 1e-12);
            }
        }
        // the quadrature route agrees with the fast path
        let w = [0.3, -1.0, 0.2, 0.0, 0.5, 0.1];
        let phi = [0.1, 0.2, 0.0, 0.0, 0.0, 0.0];
        let fast = sys.apply_coupling(&phi, &w).unwrap();
        let slow = sys.apply_coupling_quadrature(&phi, &w).unwrap();
        for (a, b) in fast.iter().zip(&slow) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn cross_mass_between_dirichlet_and_neumann() {
        let a = Arc::new(build_interval_basis(BasisKind::IntervalDirichlet, 1.0, 4, 512).unwrap());
        let b = neumann(4, 512);
        let sys = assemble(&data(1.0), a, b, 0.5, 0.5, 1e-2, PotentialSpec::regular()).unwrap();
        // (eta_0, e_1) = int_0^1 sqrt(2) sin(pi x) dx = 2 sqrt(2) / pi (e_1 is row 0)
        let e = sys.coupling_entry(0, 0).unwrap();
        assert_abs_diff_eq!(e, 2.0 * 2f64.sqrt() / PI, epsilon = 1e-5);
        let w = [0.3, -1.0, 0.2, 0.4];
        let fast = sys.apply_coupling(&[0.0; 4], &w).unwrap();
        let slow = sys.apply_coupling_quadrature(&[0.0; 4], &w).unwrap();
        for (x, y) in fast.iter().zip(&slow) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
    }

    #[test]
    fn cross_mass_fine_grid() {
        // trapezoid error on sin(pi x) is O(h^2); m = 16385 puts it below 1e-8
        let a = Arc::new(build_interval_basis(BasisKind::IntervalDirichlet, 1.0, 2, 16385).unwrap());
        let b = neumann(2, 16385);
        let sys = assemble(&data(1.0), a, b, 0.5, 0.5, 1e-2, PotentialSpec::regular()).unwrap();
        assert_abs_diff_eq!(sys.coupling_entry(0, 0).unwrap(), 2.0 * 2f64.sqrt() / PI, epsilon = 1e-8);
    }

    #[test]
    fn stiff_diagonals_for_half_exponents() {
        let b = neumann(4, 32);
        let sys = assemble(&data(1.0), b.clone(), b, 0.5, 0.5, 1e-2, PotentialSpec::regular()).unwrap();
        let pi2 = PI * PI;
        for (k, want) in [0.0, pi2, 4.0 * pi2, 9.0 * pi2].iter().enumerate() {
            assert_abs_diff_eq!(sys.lambda()[k], want, epsilon = 1e-10);
            assert_abs_diff_eq!(sys.m_diag()[k], want, epsilon = 1e-10);
        }
        let limit = sys.relaxation_limit();
        assert_eq!(limit.m_diag(), &[0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn projection_examples() {
        let b = neumann(4, 32);
        let d = ProblemData {
            theta0: Field::from_terms([Term::Mode { amp: 1.0, index: 1 }]),
            phi0: Field::from_terms([Term::Cos { amp: 1.0, kx: 2.0, ky: 0.0 }]),
            ..data(1.0)
        };
        let sys = assemble(&d, b.clone(), b.clone(), 0.5, 0.5, 1e-2, PotentialSpec::regular()).unwrap();
        let (t0, p0) = project_data(&sys, &d).unwrap();
        assert_abs_diff_eq!(t0[1], 1.0, epsilon = 1e-12);
        assert!(t0[0].abs() < 1e-12 && t0[2].abs() < 1e-12);
        assert_abs_diff_eq!(p0[2], 1.0 / 2f64.sqrt(), epsilon = 1e-12);

        let zero = data(1.0);
        let (_, p) = project_data(&sys, &zero).unwrap();
        assert!(p.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn projection_never_increases_fractional_norm() {
        let b = neumann(6, 48);
        let d = ProblemData {
            phi0: Field::from_terms([
                Term::Cos { amp: 0.4, kx: 1.0, ky: 0.0 },
                Term::Cos { amp: 0.1, kx: 9.0, ky: 0.0 },
            ]),
            ..data(1.0)
        };
        let sys = assemble(&d, b.clone(), b.clone(), 0.5, 0.5, 1e-2, PotentialSpec::regular()).unwrap();
        let (_, p0) = project_data(&sys, &d).unwrap();
        // the kx = 9 component lies outside the 6-mode space
        let full = (0.4f64.powi(2) * (1.0 + PI.powi(4)) / 2.0 + 0.01 * (1.0 + (9.0 * PI).powi(4)) / 2.0).sqrt();
        assert!(graph_norm(&b, 1.0, &p0).unwrap() <= full);
        assert!(coeff_norm(&p0) <= b.grid_norm(&d.phi0.sample(&b, 0.0).unwrap()) + 1e-14);
    }

    #[test]
    fn obstacle_violation_is_reported_with_nodes() {
        let b = neumann(4, 32);
        let d = ProblemData {
            phi0: Field::from_terms([Term::Const { value: 1.2 }]),
            ..data(1.0)
        };
        let err = assemble(&d, b.clone(), b, 0.5, 0.5, 1e-2, PotentialSpec::double_obstacle(1.0).unwrap())
            .unwrap_err();
        match err {
            Error::Config { key, message } => {
                assert_eq!(key, "data.phi0");
                assert!(message.contains("node 0"));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn nonlinearity_examples() {
        let b = neumann(4, 32);
        let sys = assemble(&data(3.0), b.clone(), b.clone(), 0.5, 0.5, 1e-2, PotentialSpec::regular()).unwrap();
        let z = sys.eval_nonlinearity(&[0.0; 4], &[0.0; 4]).unwrap();
        assert!(z.f_phi.iter().all(|v| *v == 0.0));

        let nl = sys.eval_nonlinearity(&[2.0, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap();
        for v in &nl.coupling_grid {
            assert_abs_diff_eq!(*v, 6.0, epsilon = 1e-12);
        }

        // constant state 1: F = beta_eps(1) - 1 -> 0 as eps -> 0
        let small = sys.with_eps(1e-6).unwrap();
        let zero_l = assemble(&data(0.0), b.clone(), b, 0.5, 0.5, 1e-6, PotentialSpec::regular()).unwrap();
        let f = zero_l.eval_nonlinearity(&[0.0; 4], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let expected = PotentialSpec::regular().yosida(1e-6, 1.0).unwrap() - 1.0;
        assert_abs_diff_eq!(f.f_phi[0], expected, epsilon = 1e-12);
        assert!(f.f_phi[0].abs() < 1e-5);
        assert!(small.eps() == 1e-6);
    }

    #[test]
    fn cubic_nonlinearity_is_alias_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 8;
        let coarse = neumann(n, 8 * n);
        let fine = neumann(n, 16 * n);
        let mk = |b: Arc<SpectralBasis>| {
            assemble(&data(0.0), b.clone(), b, 0.5, 0.5, 0.0, PotentialSpec::regular()).unwrap()
        };
        let (sc, sf) = (mk(coarse), mk(fine));
        for _ in 0..20 {
            let mut phi: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = coeff_norm(&phi);
            phi.iter_mut().for_each(|v| *v /= norm.max(1.0));
            let a = sc.eval_nonlinearity(&[0.0; 8], &phi).unwrap().f_phi;
            let b = sf.eval_nonlinearity(&[0.0; 8], &phi).unwrap().f_phi;
            let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            assert!(coeff_norm(&diff) <= 1e-8);
        }
    }

    #[test]
    fn nonlinearity_is_inverse_eps_lipschitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = neumann(6, 48);
        let eps = 0.05;
        let sys = assemble(&data(0.0), b.clone(), b, 0.5, 0.5, eps, PotentialSpec::double_obstacle(0.0001).unwrap())
            .unwrap();
        // pi(s) = -2 c2 s adds 2 c2 to the Lipschitz bound
        let bound = 1.0 / eps + 2.0 * 0.0001;
        for _ in 0..50 {
            let p: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let fp = sys.eval_nonlinearity(&[0.0; 6], &p).unwrap().f_phi;
            let fq = sys.eval_nonlinearity(&[0.0; 6], &q).unwrap().f_phi;
            let df: Vec<f64> = fp.iter().zip(&fq).map(|(x, y)| x - y).collect();
            let dp: Vec<f64> = p.iter().zip(&q).map(|(x, y)| x - y).collect();
            assert!(coeff_norm(&df) <= bound * coeff_norm(&dp) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn advisory_warning_for_nonconstant_coupling() {
        let b = neumann(4, 32);
        let d = ProblemData {
            coupling: Coupling::Tanh {
                base: 1.0,
                amplitude: 0.5,
                rate: 2.0,
            },
            ..Default::default()
        };
        let sys = assemble(&d, b.clone(), b.clone(), 0.25, 0.125, 1e-2, PotentialSpec::regular()).unwrap();
        assert_eq!(sys.warnings().len(), 1);
        let ok = assemble(&d, b.clone(), b, 0.5, 0.5, 1e-2, PotentialSpec::regular()).unwrap();
        assert!(ok.warnings().is_empty());
    }

    #[test]
    fn source_table_interpolates_in_time() {
        let b = neumann(2, 8);
        let s = Source::Table {
            times: vec![0.0, 1.0],
            samples: vec![vec![0.0; 8], vec![2.0; 8]],
        };
        assert_eq!(s.sample(&b, 0.25).unwrap(), vec![0.5; 8]);
        assert_eq!(s.sample(&b, 5.0).unwrap(), vec![2.0; 8]);
    }
}
