//! Time integration of the Galerkin system and the energy ledger.
//!
//! Two first-order schemes are provided:
//!
//! * `imex_euler`: stiff diagonals implicit, `F` explicit.
//! * `implicit_prox`: stiff diagonals implicit, then the convex part resolved
//!   node by node with the resolvent of `beta_eps` (or of `beta` itself when
//!   `eps = 0`), so it also handles the unregularized obstacle.
//!
//! The ledger mirrors the first energy identity of the Galerkin system,
//!
//! ```text
//! 1/2|theta(t)|^2 + int |A^r theta|^2 + int |phi_t|^2 + 1/2|phi(t)|_{B,sigma}^2 + int_Omega beta_hat_eps(phi(t))
//!   = (same terms at t = 0) + int (f, theta) + int (phi - pi(phi), phi_t)
//! ```
//!
//! with left-endpoint time integrals and forward difference quotients, so the
//! balance residual is first order in `dt`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::galerkin::DiscreteSystem;
use crate::spectral::{coeff_norm, graph_norm};

/// Entries above this magnitude abort the run.
pub const OVERFLOW_GUARD: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub t: f64,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

impl State {
    pub fn new(theta: Vec<f64>, phi: Vec<f64>) -> Self {
        State { t: 0.0, theta, phi }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    ImexEuler,
    ImplicitProx,
}

fn default_tol() -> f64 {
    1e-10
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    #[serde(default)]
    pub scheme: Scheme,
    pub dt: f64,
    /// Tolerance on the nodal resolvent residual of `implicit_prox`.
    #[serde(default = "default_tol")]
    pub fixed_point_tol: f64,
}

impl SchemeConfig {
    pub fn imex(dt: f64) -> Self {
        SchemeConfig {
            scheme: Scheme::ImexEuler,
            dt,
            fixed_point_tol: default_tol(),
        }
    }

    pub fn prox(dt: f64) -> Self {
        SchemeConfig {
            scheme: Scheme::ImplicitProx,
            ..Self::imex(dt)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::config("scheme.dt", format!("must be positive, got {}", self.dt)));
        }
        if !(self.fixed_point_tol.is_finite() && self.fixed_point_tol > 0.0) {
            return Err(Error::config(
                "scheme.fixed_point_tol",
                format!("must be positive, got {}", self.fixed_point_tol),
            ));
        }
        Ok(())
    }
}

fn guard(values: &[f64], t: f64, what: &str) -> Result<()> {
    if let Some((i, v)) = values
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || v.abs() > OVERFLOW_GUARD)
    {
        return Err(Error::Overflow {
            step: 0,
            t,
            detail: format!("{what}[{i}] = {v:e}"),
        });
    }
    Ok(())
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    Ok(())
}

/// Temperature update shared by both schemes:
/// `Theta+ = (I + dt Lambda)^-1 (Theta - E(Phi) (Phi+ - Phi) + dt g(t + dt))`.
fn theta_update(sys: &DiscreteSystem, state: &State, phi_new: &[f64], dt: f64) -> Result<Vec<f64>> {
    let dphi: Vec<f64> = phi_new.iter().zip(&state.phi).map(|(a, b)| a - b).collect();
    let e_dphi = sys.apply_coupling(&state.phi, &dphi)?;
    let g = sys.g(state.t + dt)?;
    Ok(state
        .theta
        .iter()
        .zip(&e_dphi)
        .zip(&g)
        .zip(sys.lambda())
        .map(|(((th, e), g), l)| (th - e + dt * g) / (1.0 + dt * l))
        .collect())
}

/// One IMEX Euler step:
/// `Phi+ = (I + dt M)^-1 (Phi - dt F(Theta, Phi))`, then the temperature update.
pub fn step_imex(sys: &DiscreteSystem, state: &State, dt: f64) -> Result<State> {
    check_dt(dt)?;
    let nl = sys.eval_nonlinearity(&state.theta, &state.phi)?;
    let phi: Vec<f64> = state
        .phi
        .iter()
        .zip(&nl.f_phi)
        .zip(sys.m_diag())
        .map(|((p, f), m)| (p - dt * f) / (1.0 + dt * m))
        .collect();
    guard(&phi, state.t + dt, "Phi")?;
    let theta = theta_update(sys, state, &phi, dt)?;
    guard(&theta, state.t + dt, "Theta")?;
    Ok(State {
        t: state.t + dt,
        theta,
        phi,
    })
}

/// Nodal output of a proximal step.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxDiagnostics {
    /// Phase field at the grid nodes after the resolvent.
    pub phi_nodes: Vec<f64>,
    /// Multiplier `xi = (intermediate - phi_nodes) / dt`, an element of `beta(phi_nodes)`.
    pub xi_nodes: Vec<f64>,
    /// Largest relative residual of the scalar resolvent solves (0 for multivalued `beta`).
    pub resolvent_residual: f64,
}

/// One proximal step with the convex part treated implicitly at the nodes.
///
/// The linear stiff part is solved as in [`step_imex`] with the smooth terms
/// `pi(phi) - l(phi) theta` explicit, giving the intermediate field
/// `u = synthesize((I + dt M)^-1 (Phi - dt [(pi(phi) - l(phi) theta, eta_i)]))`.
/// The convex part then acts node by node through its resolvent,
///
/// ```text
/// phi+ = J(u)        (resolvent of dt beta_eps, or of dt beta when eps = 0)
/// xi   = (u - phi+) / dt   in beta_eps(phi+)
/// Phi+ = analyze(phi+)
/// ```
///
/// so `phi+ + dt xi = u` holds at every node. For single-valued `beta` the
/// scalar solves are checked against `|phi+ + dt beta(phi+) - u| <= tol (1 + |u|)`.
/// With `beta = 0` it reproduces [`step_imex`].
pub fn step_implicit_prox(sys: &DiscreteSystem, state: &State, dt: f64, tol: f64) -> Result<(State, ProxDiagnostics)> {
    check_dt(dt)?;
    if !(tol > 0.0) {
        return Err(Error::invalid("resolvent tolerance must be positive"));
    }
    let basis = sys.basis_b();
    let smooth = sys.eval_smooth_part(&state.theta, &state.phi)?.f_phi;
    let u_coef: Vec<f64> = state
        .phi
        .iter()
        .zip(&smooth)
        .zip(sys.m_diag())
        .map(|((p, f), m)| (p - dt * f) / (1.0 + dt * m))
        .collect();
    let u = basis.synthesize(&u_coef)?;
    let pot = sys.potential();
    let eps = sys.eps();
    let check = eps > 0.0 || pot.is_single_valued();
    let mut nodes = Vec::with_capacity(u.len());
    let mut worst = 0.0f64;
    for &ui in &u {
        let p = pot.regularized_resolvent(eps, dt, ui)?.point;
        if check {
            let b = if eps > 0.0 { pot.yosida(eps, p)? } else { pot.beta_min(p).unwrap_or(f64::NAN) };
            let r = (p + dt * b - ui).abs() / (1.0 + ui.abs());
            worst = if r.is_nan() { f64::INFINITY } else { worst.max(r) };
        }
        nodes.push(p);
    }
    if worst > tol {
        return Err(Error::NoConvergence {
            iterations: 1,
            residual: worst,
        });
    }

    let phi = basis.analyze(&nodes)?;
    guard(&phi, state.t + dt, "Phi")?;
    let theta = theta_update(sys, state, &phi, dt)?;
    guard(&theta, state.t + dt, "Theta")?;
    let xi_nodes = u.iter().zip(&nodes).map(|(u, p)| (u - p) / dt).collect();
    Ok((
        State {
            t: state.t + dt,
            theta,
            phi,
        },
        ProxDiagnostics {
            phi_nodes: nodes,
            xi_nodes,
            resolvent_residual: worst,
        },
    ))
}

/// Terms of the energy identity at one time level.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LedgerRow {
    /// `1/2 |theta|^2`
    pub kinetic: f64,
    /// `int_0^t |A^r theta|^2`
    pub diss_theta: f64,
    /// `int_0^t |phi_t|^2`
    pub diss_phi: f64,
    /// `1/2 |phi|_{B,sigma}^2`
    pub half_graph_phi: f64,
    /// `int_Omega beta_hat_eps(phi)`
    pub potential: f64,
    /// `int_0^t (f, theta)`
    pub work_f: f64,
    /// `int_0^t (phi - pi(phi), phi_t)`
    pub work_pi: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

impl LedgerRow {
    pub fn lhs_terms(&self) -> [f64; 5] {
        [
            self.kinetic,
            self.diss_theta,
            self.diss_phi,
            self.half_graph_phi,
            self.potential,
        ]
    }
}

/// Running accumulator of the energy identity.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyLedger {
    initial: f64,
    diss_theta: f64,
    diss_phi: f64,
    work_f: f64,
    work_pi: f64,
}

impl EnergyLedger {
    fn start(row0: &LedgerRow) -> Self {
        EnergyLedger {
            initial: row0.kinetic + row0.half_graph_phi + row0.potential,
            diss_theta: 0.0,
            diss_phi: 0.0,
            work_f: 0.0,
            work_pi: 0.0,
        }
    }

    fn row(&self, kinetic: f64, half_graph_phi: f64, potential: f64) -> LedgerRow {
        let lhs = kinetic + self.diss_theta + self.diss_phi + half_graph_phi + potential;
        let rhs = self.initial + self.work_f + self.work_pi;
        LedgerRow {
            kinetic,
            diss_theta: self.diss_theta,
            diss_phi: self.diss_phi,
            half_graph_phi,
            potential,
            work_f: self.work_f,
            work_pi: self.work_pi,
            lhs,
            rhs,
            residual: (lhs - rhs).abs(),
        }
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub t: f64,
    pub norm_theta: f64,
    pub graphnorm_theta: f64,
    pub norm_phi: f64,
    pub graphnorm_phi: f64,
    /// `|(Phi_k - Phi_{k-1}) / dt|`; row 0 repeats the first quotient.
    pub dtphi_norm: f64,
    /// `|A^r theta|`
    pub ar_theta_norm: f64,
    pub energy: LedgerRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub t: f64,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_nodes: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi_nodes: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub scheme: Scheme,
    pub dt: f64,
    pub steps: usize,
    pub series: Vec<SeriesRow>,
    pub snapshots: Vec<Snapshot>,
    pub final_state: State,
    pub max_resolvent_residual: f64,
}

impl RunOutput {
    pub fn final_time(&self) -> f64 {
        self.final_state.t
    }
}

/// Failed run with everything computed up to the failure.
#[derive(Debug, Clone)]
pub struct RunFailure {
    pub partial: RunOutput,
    pub error: Error,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (partial output up to t = {})", self.error, self.partial.final_time())
    }
}

impl std::error::Error for RunFailure {}

impl From<RunFailure> for Error {
    fn from(f: RunFailure) -> Self {
        f.error
    }
}

struct Recorder<'a> {
    sys: &'a DiscreteSystem,
    ledger: EnergyLedger,
    out: RunOutput,
    stride: usize,
}

impl<'a> Recorder<'a> {
    fn nodes_of(&self, state: &State, nodes: Option<&[f64]>) -> Result<Vec<f64>> {
        match nodes {
            Some(n) => Ok(n.to_vec()),
            None => self.sys.phi_grid(&state.phi),
        }
    }

    fn level_terms(&self, state: &State, nodes: &[f64]) -> Result<(f64, f64, f64)> {
        let kinetic = 0.5 * state.theta.iter().map(|v| v * v).sum::<f64>();
        let half_graph = 0.5
            * state
                .phi
                .iter()
                .zip(self.sys.m_diag())
                .map(|(p, m)| p * p * (1.0 + m))
                .sum::<f64>();
        let pot = self.sys.potential();
        let eps = self.sys.eps();
        let mut potential = 0.0;
        for (w, s) in self.sys.basis_b().weights().iter().zip(nodes) {
            potential += w * pot.convex_energy(eps, *s)?;
        }
        Ok((kinetic, half_graph, potential))
    }

    fn series_row(&self, state: &State, dtphi: f64, energy: LedgerRow) -> Result<SeriesRow> {
        let ar2: f64 = state
            .theta
            .iter()
            .zip(self.sys.lambda())
            .map(|(t, l)| l * t * t)
            .sum();
        Ok(SeriesRow {
            t: state.t,
            norm_theta: coeff_norm(&state.theta),
            graphnorm_theta: graph_norm(self.sys.basis_a(), self.sys.r(), &state.theta)?,
            norm_phi: coeff_norm(&state.phi),
            graphnorm_phi: (2.0 * energy.half_graph_phi).sqrt(),
            dtphi_norm: dtphi,
            ar_theta_norm: ar2.sqrt(),
            energy,
        })
    }

    fn snapshot(&mut self, step: usize, state: &State, diag: Option<&ProxDiagnostics>) {
        self.out.snapshots.push(Snapshot {
            step,
            t: state.t,
            theta: state.theta.clone(),
            phi: state.phi.clone(),
            phi_nodes: diag.map(|d| d.phi_nodes.clone()),
            xi_nodes: diag.map(|d| d.xi_nodes.clone()),
        });
    }

    /// Accumulates the step `prev -> next` into the ledger and records level `next`.
    fn advance(
        &mut self,
        step: usize,
        dt: f64,
        prev: &State,
        prev_nodes: &[f64],
        next: &State,
        next_nodes: &[f64],
        diag: Option<&ProxDiagnostics>,
        last: bool,
    ) -> Result<()> {
        let sys = self.sys;
        let ar2: f64 = prev
            .theta
            .iter()
            .zip(sys.lambda())
            .map(|(t, l)| l * t * t)
            .sum();
        let dphi: Vec<f64> = next.phi.iter().zip(&prev.phi).map(|(a, b)| a - b).collect();
        let dtphi = coeff_norm(&dphi) / dt;
        let g = sys.g(prev.t)?;
        let work_f: f64 = g.iter().zip(&prev.theta).map(|(a, b)| a * b).sum();
        let dphi_nodes: Vec<f64> = next_nodes.iter().zip(prev_nodes).map(|(a, b)| a - b).collect();
        let pot = sys.potential();
        let lever: Vec<f64> = prev_nodes.iter().map(|p| p - pot.pi(*p)).collect();
        let work_pi = sys.basis_b().inner(&lever, &dphi_nodes);

        self.ledger.diss_theta += dt * ar2;
        self.ledger.diss_phi += dt * dtphi * dtphi;
        self.ledger.work_f += dt * work_f;
        self.ledger.work_pi += work_pi;

        let (kinetic, half_graph, potential) = self.level_terms(next, next_nodes)?;
        let energy = self.ledger.row(kinetic, half_graph, potential);
        let row = self.series_row(next, dtphi, energy)?;
        if step == 1 {
            self.out.series[0].dtphi_norm = dtphi;
        }
        self.out.series.push(row);
        if step.is_multiple_of(self.stride) || last {
            self.snapshot(step, next, diag);
        }
        self.out.steps = step;
        self.out.final_state = next.clone();
        Ok(())
    }
}

/// Integrates from `initial` to `t_final` with a fixed step.
///
/// Series rows are recorded at every step; snapshots at `t = 0`, every
/// `snapshot_stride` steps, and at the final time.
pub fn integrate(
    sys: &DiscreteSystem,
    initial: &State,
    config: &SchemeConfig,
    t_final: f64,
    snapshot_stride: usize,
) -> std::result::Result<RunOutput, RunFailure> {
    let empty = |error: Error| RunFailure {
        partial: RunOutput {
            scheme: config.scheme,
            dt: config.dt,
            steps: 0,
            series: Vec::new(),
            snapshots: Vec::new(),
            final_state: initial.clone(),
            max_resolvent_residual: 0.0,
        },
        error,
    };
    if let Err(e) = config.validate() {
        return Err(empty(e));
    }
    if !(t_final.is_finite() && t_final > 0.0) {
        return Err(empty(Error::invalid(format!("final time must be positive, got {t_final}"))));
    }
    if snapshot_stride == 0 {
        return Err(empty(Error::invalid("snapshot stride must be at least 1")));
    }
    let dt = config.dt;
    let n_steps = (t_final / dt).round() as usize;
    if n_steps == 0 || ((n_steps as f64) * dt - t_final).abs() > 1e-9 * t_final {
        return Err(empty(Error::invalid(format!(
            "final time {t_final} is not an integer multiple of dt = {dt}"
        ))));
    }
    if initial.theta.len() != sys.n_a() || initial.phi.len() != sys.n_b() {
        return Err(empty(Error::LengthMismatch {
            expected: sys.n_a() + sys.n_b(),
            got: initial.theta.len() + initial.phi.len(),
        }));
    }
    if config.scheme == Scheme::ImexEuler && sys.eps() == 0.0 && !sys.potential().is_single_valued() {
        return Err(empty(Error::invalid(
            "imex_euler needs eps > 0 for a multivalued beta; use implicit_prox",
        )));
    }

    let mut rec = Recorder {
        sys,
        ledger: EnergyLedger {
            initial: 0.0,
            diss_theta: 0.0,
            diss_phi: 0.0,
            work_f: 0.0,
            work_pi: 0.0,
        },
        out: empty(Error::invalid("")).partial,
        stride: snapshot_stride,
    };

    let start = || -> Result<(Vec<f64>, SeriesRow)> {
        let nodes = rec.nodes_of(initial, None)?;
        let (k, h, p) = rec.level_terms(initial, &nodes)?;
        let row0 = LedgerRow {
            kinetic: k,
            half_graph_phi: h,
            potential: p,
            lhs: k + h + p,
            rhs: k + h + p,
            ..Default::default()
        };
        Ok((nodes, rec.series_row(initial, 0.0, row0)?))
    };
    let (mut nodes, row0) = match start() {
        Ok(v) => v,
        Err(e) => return Err(empty(e)),
    };
    rec.ledger = EnergyLedger::start(&row0.energy);
    rec.out.series.push(row0);
    rec.snapshot(0, initial, None);

    let mut state = initial.clone();
    for step in 1..=n_steps {
        let t_next = step as f64 * dt;
        let result = match config.scheme {
            Scheme::ImexEuler => step_imex(sys, &state, dt).map(|s| (s, None)),
            Scheme::ImplicitProx => {
                step_implicit_prox(sys, &state, dt, config.fixed_point_tol).map(|(s, d)| (s, Some(d)))
            }
        };
        let advanced = result.and_then(|(mut next, diag)| {
            next.t = t_next;
            let next_nodes = rec.nodes_of(&next, diag.as_ref().map(|d| d.phi_nodes.as_slice()))?;
            rec.advance(step, dt, &state, &nodes, &next, &next_nodes, diag.as_ref(), step == n_steps)?;
            Ok((next, next_nodes, diag))
        });
        match advanced {
            Ok((next, next_nodes, diag)) => {
                if let Some(d) = diag {
                    rec.out.max_resolvent_residual = rec.out.max_resolvent_residual.max(d.resolvent_residual);
                }
                state = next;
                nodes = next_nodes;
            }
            Err(mut error) => {
                if let Error::Overflow { step: s, .. } = &mut error {
                    *s = step;
                }
                return Err(RunFailure {
                    partial: rec.out,
                    error,
                });
            }
        }
    }
    Ok(rec.out)
}

/// Result of [`energy_ledger_audit`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerAudit {
    pub times: Vec<f64>,
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    /// Every left-hand-side term nonnegative at every recorded level.
    pub lhs_nonnegative: bool,
}

/// Balance residual `|LHS(t) - RHS(t)|` of the energy identity along a run.
pub fn energy_ledger_audit(run: &RunOutput) -> LedgerAudit {
    let times = run.series.iter().map(|r| r.t).collect();
    let residuals: Vec<f64> = run.series.iter().map(|r| r.energy.residual).collect();
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);
    let lhs_nonnegative = run
        .series
        .iter()
        .all(|r| r.energy.lhs_terms().iter().all(|v| *v >= 0.0));
    LedgerAudit {
        times,
        residuals,
        max_residual,
        lhs_nonnegative,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{Field, Term};
    use crate::galerkin::{assemble, Coupling, ProblemData};
    use crate::potentials::{CustomTables, PotentialKind, PotentialSpec};
    use crate::spectral::{build_interval_basis, BasisKind, SpectralBasis};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn neumann(n: usize) -> Arc<SpectralBasis> {
        Arc::new(build_interval_basis(BasisKind::IntervalNeumann, 1.0, n, 8 * n).unwrap())
    }

    /// beta_hat = beta = pi = 0.
    fn flat() -> PotentialSpec {
        let nodes = vec![-1.0, 0.0, 1.0];
        PotentialSpec::new(PotentialKind::Custom(CustomTables {
            beta_hat: vec![0.0; 3],
            beta: vec![0.0; 3],
            pi: vec![0.0; 3],
            nodes,
        }))
        .unwrap()
    }

    fn system(l: f64, pot: PotentialSpec, eps: f64, n: usize) -> DiscreteSystem {
        let b = neumann(n);
        let data = ProblemData {
            coupling: Coupling::Constant { value: l },
            ..Default::default()
        };
        assemble(&data, b.clone(), b, 0.5, 0.5, eps, pot).unwrap()
    }

    #[test]
    fn scalar_backward_euler_decay() {
        let sys = system(0.0, flat(), 1e-2, 4);
        let a = sys.lambda()[2];
        let s = State::new(vec![0.0, 0.0, 1.5, 0.0], vec![0.0; 4]);
        let next = step_imex(&sys, &s, 0.01).unwrap();
        assert_abs_diff_eq!(next.theta[2], 1.5 / (1.0 + a * 0.01), epsilon = 1e-15);
        // kernel mode with no source is conserved
        let s = State::new(vec![0.7, 0.0, 0.0, 0.0], vec![0.0; 4]);
        assert_eq!(step_imex(&sys, &s, 0.3).unwrap().theta[0], 0.7);
    }

    #[test]
    fn constant_state_moves_toward_the_well() {
        // phi' = -(beta_eps(phi) - phi) on the kernel mode, from 0.5
        let sys = system(0.0, PotentialSpec::regular(), 1e-4, 4);
        let mut s = State::new(vec![0.0; 4], vec![0.5, 0.0, 0.0, 0.0]);
        let dt = 1e-3;
        // explicit Euler on the scalar ODE as oracle
        let mut x: f64 = 0.5;
        for _ in 0..2000 {
            s = step_imex(&sys, &s, dt).unwrap();
            x -= dt * (PotentialSpec::regular().yosida(1e-4, x).unwrap() - x);
        }
        assert_abs_diff_eq!(s.phi[0], x, epsilon = 1e-10);
        assert!(s.phi[0] > 0.9 && s.phi[0] < 1.0);
    }

    #[test]
    fn prox_step_solves_implicit_cubic() {
        // phi' + phi^3 = 0 from phi = 1 on the kernel mode
        let sys = system(0.0, PotentialSpec::new(PotentialKind::Regular { gamma: 0.0 }).unwrap(), 0.0, 4);
        let s = State::new(vec![0.0; 4], vec![1.0, 0.0, 0.0, 0.0]);
        let (next, diag) = step_implicit_prox(&sys, &s, 0.1, 1e-13).unwrap();
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid: f64 = 0.5 * (lo + hi);
            if mid + 0.1 * mid.powi(3) > 1.0 {
                hi = mid
            } else {
                lo = mid
            }
        }
        assert_abs_diff_eq!(next.phi[0], lo, epsilon = 1e-12);
        assert!(diag.phi_nodes.iter().all(|p| (p - lo).abs() < 1e-12));
    }

    #[test]
    fn prox_with_flat_potential_matches_imex() {
        let b = neumann(6);
        let data = ProblemData {
            coupling: Coupling::Constant { value: 0.7 },
            theta0: Field::from_terms([Term::Cos { amp: 0.3, kx: 1.0, ky: 0.0 }]),
            phi0: Field::from_terms([Term::Cos { amp: 0.2, kx: 2.0, ky: 0.0 }, Term::Const { value: 0.1 }]),
            ..Default::default()
        };
        let sys = assemble(&data, b.clone(), b, 0.5, 0.5, 1e-2, flat()).unwrap();
        let (t0, p0) = sys.project_data(&data).unwrap();
        let s = State::new(t0, p0);
        let a = step_imex(&sys, &s, 1e-2).unwrap();
        let (p, _) = step_implicit_prox(&sys, &s, 1e-2, 1e-12).unwrap();
        for (x, y) in a.phi.iter().zip(&p.phi).chain(a.theta.iter().zip(&p.theta)) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-11);
        }
    }

    #[test]
    fn prox_obstacle_clamps_and_reports_multiplier() {
        // pi = -2 c2 phi pushes phi past 1
        let sys = system(0.0, PotentialSpec::double_obstacle(2.0).unwrap(), 0.0, 6);
        let mut s = State::new(vec![0.0; 6], vec![0.95, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let mut d = None;
        for _ in 0..10 {
            let (next, diag) = step_implicit_prox(&sys, &s, 0.05, 1e-12).unwrap();
            assert!(diag.phi_nodes.iter().all(|p| p.abs() <= 1.0));
            s = next;
            d = Some(diag);
        }
        let d = d.unwrap();
        assert!(d.phi_nodes.iter().all(|p| (p - 1.0).abs() < 1e-12));
        assert!(d.xi_nodes.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn linear_contraction_for_any_dt() {
        let sys = system(0.0, flat(), 1e-2, 5);
        let s = State::new(vec![1.0, -2.0, 0.5, 0.1, 3.0], vec![0.2, 1.0, -1.0, 0.4, 0.0]);
        for dt in [1e-4, 1e-1, 10.0, 1e4] {
            let n = step_imex(&sys, &s, dt).unwrap();
            assert!(coeff_norm(&n.theta) <= coeff_norm(&s.theta));
            assert!(coeff_norm(&n.phi) <= coeff_norm(&s.phi));
        }
    }

    #[test]
    fn zero_data_gives_zero_trajectory() {
        let sys = system(1.0, PotentialSpec::regular(), 1e-2, 4);
        let out = integrate(&sys, &State::new(vec![0.0; 4], vec![0.0; 4]), &SchemeConfig::imex(1e-2), 0.5, 10)
            .unwrap();
        assert_eq!(out.steps, 50);
        assert!(out.series.iter().all(|r| r.norm_theta == 0.0 && r.norm_phi == 0.0));
        assert_eq!(energy_ledger_audit(&out).max_residual, 0.0);
        let t: Vec<f64> = out.snapshots.iter().map(|s| s.t).collect();
        assert_eq!(t, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]);
    }

    #[test]
    fn stride_past_the_end_keeps_endpoints() {
        let sys = system(1.0, PotentialSpec::regular(), 1e-2, 4);
        let out = integrate(&sys, &State::new(vec![0.0; 4], vec![0.1; 4]), &SchemeConfig::imex(0.1), 1.0, 1000)
            .unwrap();
        let t: Vec<f64> = out.snapshots.iter().map(|s| s.t).collect();
        assert_eq!(t, vec![0.0, 1.0]);
    }

    #[test]
    fn overflow_keeps_partial_output() {
        // huge pi slope makes explicit Euler blow up
        let sys = system(0.0, PotentialSpec::new(PotentialKind::Regular { gamma: 1e4 }).unwrap(), 1e-2, 4);
        let s = State::new(vec![0.0; 4], vec![0.1, 0.0, 0.0, 0.0]);
        let err = integrate(&sys, &s, &SchemeConfig::imex(0.5), 100.0, 1).unwrap_err();
        match err.error {
            Error::Overflow { step, .. } => {
                assert!(step > 1);
                assert_eq!(err.partial.steps, step - 1);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn rejects_misaligned_horizon() {
        let sys = system(0.0, flat(), 1e-2, 4);
        let s = State::new(vec![0.0; 4], vec![0.0; 4]);
        assert!(integrate(&sys, &s, &SchemeConfig::imex(0.3), 1.0, 1).is_err());
        assert!(integrate(&sys, &s, &SchemeConfig::imex(-0.1), 1.0, 1).is_err());
    }
}
