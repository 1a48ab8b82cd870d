//! Experiment drivers: convergence studies, continuous dependence on data,
//! long-time probes, the phase-relaxation limit and operator checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expr::{Field, Term, TimedTerm};
use crate::galerkin::{assemble, DiscreteSystem, ProblemData};
use crate::potentials::{PotentialKind, PotentialSpec};
use crate::spectral::{
    apply_fractional, build_interval_basis, build_rect_basis, coeff_norm, eigen_power, kernel_projection,
    BasisKind, SpectralBasis,
};
use crate::timestepper::{integrate, RunOutput, Scheme, SchemeConfig, State};

/// Geometry and truncation of one operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    /// `[L]` for intervals, `[Lx, Ly]` for rectangles.
    pub extent: Vec<f64>,
    pub n_modes: usize,
    /// Quadrature nodes (per axis on rectangles). Defaults to `8 n` on
    /// intervals and `4 n` per axis on rectangles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_grid: Option<usize>,
}

impl BasisSpec {
    pub fn interval(kind: BasisKind, len: f64, n_modes: usize) -> Self {
        BasisSpec {
            kind,
            extent: vec![len],
            n_modes,
            m_grid: None,
        }
    }

    fn default_grid(&self) -> usize {
        if self.kind.dim() == 1 {
            8 * self.n_modes
        } else {
            4 * self.n_modes
        }
    }

    pub fn build_with_grid(&self, m_grid: usize) -> Result<SpectralBasis> {
        if self.extent.len() != self.kind.dim() {
            return Err(Error::config(
                "extent",
                format!("{:?} needs {} extent value(s), got {}", self.kind, self.kind.dim(), self.extent.len()),
            ));
        }
        match self.kind.dim() {
            1 => build_interval_basis(self.kind, self.extent[0], self.n_modes, m_grid),
            _ => build_rect_basis(self.kind, self.extent[0], self.extent[1], self.n_modes, m_grid),
        }
    }

    pub fn build(&self) -> Result<SpectralBasis> {
        self.build_with_grid(self.m_grid.unwrap_or_else(|| self.default_grid()))
    }
}

/// Everything needed to assemble and integrate one problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub operator_a: BasisSpec,
    pub operator_b: BasisSpec,
    pub r: f64,
    pub sigma: f64,
    pub eps: f64,
    pub potential: PotentialKind,
    pub data: ProblemData,
    pub scheme: SchemeConfig,
    pub t_final: f64,
    pub snapshot_stride: usize,
}

impl Scenario {
    /// Both bases on a common grid; identical specs share one basis.
    pub fn bases(&self) -> Result<(Arc<SpectralBasis>, Arc<SpectralBasis>)> {
        let m = match (self.operator_a.m_grid, self.operator_b.m_grid) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::config(
                    "operator_b.m_grid",
                    format!("A and B must share the quadrature grid ({a} vs {b})"),
                ))
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => self.operator_a.default_grid().max(self.operator_b.default_grid()),
        };
        let a = Arc::new(self.operator_a.build_with_grid(m)?);
        let b = if self.operator_a.kind == self.operator_b.kind
            && self.operator_a.extent == self.operator_b.extent
            && self.operator_a.n_modes == self.operator_b.n_modes
        {
            a.clone()
        } else {
            Arc::new(self.operator_b.build_with_grid(m)?)
        };
        Ok((a, b))
    }

    pub fn system(&self) -> Result<DiscreteSystem> {
        let (a, b) = self.bases()?;
        let potential = PotentialSpec::new(self.potential.clone())?;
        assemble(&self.data, a, b, self.r, self.sigma, self.eps, potential)
    }

    pub fn initial_state(&self, sys: &DiscreteSystem) -> Result<State> {
        let (theta, phi) = sys.project_data(&self.data)?;
        Ok(State::new(theta, phi))
    }

    /// Assembles and integrates; a failed integration is returned as its error.
    pub fn run(&self) -> Result<(DiscreteSystem, RunOutput)> {
        let sys = self.system()?;
        let init = self.initial_state(&sys)?;
        let out = integrate(&sys, &init, &self.scheme, self.t_final, self.snapshot_stride)?;
        Ok((sys, out))
    }

    /// Snapshot spacing in time units.
    pub fn sample_interval(&self) -> f64 {
        self.scheme.dt * self.snapshot_stride as f64
    }

    /// Copy with a new step size and the same snapshot times.
    pub fn with_dt(&self, dt: f64) -> Result<Scenario> {
        let stride = (self.sample_interval() / dt).round();
        if stride < 1.0 || (stride * dt - self.sample_interval()).abs() > 1e-9 * self.sample_interval() {
            return Err(Error::invalid(format!(
                "dt = {dt} does not divide the snapshot interval {}",
                self.sample_interval()
            )));
        }
        let mut s = self.clone();
        s.scheme.dt = dt;
        s.snapshot_stride = stride as usize;
        Ok(s)
    }
}

/// Coefficient trajectory recorded at snapshot times.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn from_run(run: &RunOutput) -> Self {
        Trajectory {
            times: run.snapshots.iter().map(|s| s.t).collect(),
            theta: run.snapshots.iter().map(|s| s.theta.clone()).collect(),
            phi: run.snapshots.iter().map(|s| s.phi.clone()).collect(),
        }
    }
}

fn padded_diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0))
        .collect()
}

/// Time-sampled norms of a vector-valued function.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimeNorms {
    /// `sup_t |v(t)|`
    pub linf_h: f64,
    /// `(int |v|^2)^(1/2)`, trapezoid in time
    pub l2_h: f64,
    /// `(int |v|^2 + |C^rho v|^2)^(1/2)` with the given squared multipliers
    pub l2_v: f64,
    /// `sup_t (|v|^2 + |C^rho v|^2)^(1/2)`
    pub linf_v: f64,
}

/// `mult` holds the squared fractional multipliers (`lambda^{2r}` or `mu^{2 sigma}`).
pub fn time_norms(times: &[f64], values: &[Vec<f64>], mult: &[f64]) -> TimeNorms {
    let h: Vec<f64> = values.iter().map(|v| v.iter().map(|x| x * x).sum()).collect();
    let v: Vec<f64> = values
        .iter()
        .zip(&h)
        .map(|(x, h)| h + x.iter().zip(mult).map(|(a, m)| m * a * a).sum::<f64>())
        .collect();
    let trap = |f: &[f64]| -> f64 {
        times
            .windows(2)
            .zip(f.windows(2))
            .map(|(t, f)| 0.5 * (t[1] - t[0]) * (f[0] + f[1]))
            .sum()
    };
    TimeNorms {
        linf_h: h.iter().copied().fold(0.0, f64::max).sqrt(),
        l2_h: trap(&h).sqrt(),
        l2_v: trap(&v).sqrt(),
        linf_v: v.iter().copied().fold(0.0, f64::max).sqrt(),
    }
}

/// Running time integral `(1 * v)(t) = int_0^t v`, trapezoid rule on the samples.
pub fn running_integral(times: &[f64], values: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(values.len());
    if values.is_empty() {
        return out;
    }
    let mut acc = vec![0.0; values[0].len()];
    out.push(acc.clone());
    for k in 1..values.len() {
        let h = times[k] - times[k - 1];
        for (a, (x, y)) in acc.iter_mut().zip(values[k - 1].iter().zip(&values[k])) {
            *a += 0.5 * h * (x + y);
        }
        out.push(acc.clone());
    }
    out
}

fn match_times(a: &[f64], b: &[f64]) -> Result<Vec<(usize, usize)>> {
    let scale = a.last().copied().unwrap_or(1.0).abs().max(1.0);
    let mut pairs = Vec::new();
    let mut j = 0;
    for (i, t) in a.iter().enumerate() {
        while j < b.len() && b[j] < t - 1e-9 * scale {
            j += 1;
        }
        if j < b.len() && (b[j] - t).abs() <= 1e-9 * scale {
            pairs.push((i, j));
        }
    }
    if pairs.len() != a.len().min(b.len()) || pairs.is_empty() {
        return Err(Error::invalid("trajectories do not share snapshot times"));
    }
    Ok(pairs)
}

/// Errors of `run` against `reference` on their common snapshot times.
/// `mult_a`, `mult_b` are the reference's squared multipliers.
pub fn trajectory_errors(
    run: &Trajectory,
    reference: &Trajectory,
    mult_a: &[f64],
    mult_b: &[f64],
) -> Result<(TimeNorms, TimeNorms)> {
    let pairs = match_times(&run.times, &reference.times)?;
    let times: Vec<f64> = pairs.iter().map(|&(i, _)| run.times[i]).collect();
    let dt: Vec<Vec<f64>> = pairs
        .iter()
        .map(|&(i, j)| padded_diff(&run.theta[i], &reference.theta[j]))
        .collect();
    let dp: Vec<Vec<f64>> = pairs
        .iter()
        .map(|&(i, j)| padded_diff(&run.phi[i], &reference.phi[j]))
        .collect();
    Ok((time_norms(&times, &dt, mult_a), time_norms(&times, &dp, mult_b)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Tabular study outcome: one row per parameter value. Missing entries are NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: String,
    pub parameter: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub checks: Vec<Check>,
}

impl StudyReport {
    fn new(study: &str, parameter: &str, columns: &[&str]) -> Self {
        let mut cols = vec![parameter.to_string()];
        cols.extend(columns.iter().map(|c| c.to_string()));
        StudyReport {
            study: study.into(),
            parameter: parameter.into(),
            columns: cols,
            rows: Vec::new(),
            checks: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[0]).collect()
    }
}

/// `ln(e_{k-1}/e_k) / ln(v_{k-1}/v_k)` between adjacent levels; first entry NaN.
pub fn empirical_orders(values: &[f64], errors: &[f64]) -> Vec<f64> {
    let mut out = vec![f64::NAN];
    for k in 1..values.len() {
        out.push((errors[k - 1] / errors[k]).ln() / (values[k - 1] / values[k]).ln());
    }
    out
}

pub fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// Largest over smallest minus one.
pub fn relative_spread(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    max / min - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    NModes,
    Eps,
    Dt,
    Sigma,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::NModes => "n_modes",
            Axis::Eps => "eps",
            Axis::Dt => "dt",
            Axis::Sigma => "sigma",
        }
    }

    /// Copy of `base` with this parameter set to `value`.
    pub fn apply(self, base: &Scenario, value: f64) -> Result<Scenario> {
        let mut s = base.clone();
        match self {
            Axis::NModes => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::invalid(format!("n_modes must be a positive integer, got {value}")));
                }
                s.operator_a.n_modes = value as usize;
                s.operator_b.n_modes = value as usize;
            }
            Axis::Eps => s.eps = value,
            Axis::Dt => s = base.with_dt(value)?,
            Axis::Sigma => s.sigma = value,
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePolicy {
    /// The last (finest) level.
    SelfFinest,
    /// Mode-wise exponentials `exp(-lambda^{2r} t)`, `exp(-mu^{2 sigma} t)`:
    /// exact for the decoupled linear problem (`l = 0`, `beta_hat = pi = 0`, `f = 0`).
    LinearExact,
}

fn exact_linear_trajectory(sys: &DiscreteSystem, init: &State, times: &[f64]) -> Trajectory {
    let evolve = |c: &[f64], m: &[f64], t: f64| -> Vec<f64> {
        c.iter().zip(m).map(|(c, m)| c * (-m * t).exp()).collect()
    };
    Trajectory {
        times: times.to_vec(),
        theta: times.iter().map(|&t| evolve(&init.theta, sys.lambda(), t)).collect(),
        phi: times.iter().map(|&t| evolve(&init.phi, sys.m_diag(), t)).collect(),
    }
}

fn check_linear_decoupled(sys: &DiscreteSystem) -> Result<()> {
    let pot = sys.potential();
    let flat = [-0.5, 0.0, 0.5]
        .iter()
        .all(|&s| pot.pi(s) == 0.0 && pot.beta_min(s) == Some(0.0));
    if sys.coupling().constant_value() != Some(0.0) || !sys.source().is_zero() || !flat {
        return Err(Error::invalid(
            "the exact reference needs l = 0, f = 0 and beta = pi = 0",
        ));
    }
    Ok(())
}

/// Runs `base` at every `value` of `axis` (concurrently) and measures errors
/// against the reference, plus Cauchy differences between adjacent levels.
pub fn convergence_study(
    base: &Scenario,
    axis: Axis,
    values: &[f64],
    reference: ReferencePolicy,
) -> Result<StudyReport> {
    if values.len() < 2 {
        return Err(Error::invalid("a study needs at least two levels"));
    }
    let runs: Vec<(DiscreteSystem, RunOutput)> = values
        .par_iter()
        .map(|&v| axis.apply(base, v)?.run())
        .collect::<Result<_>>()?;
    let trajs: Vec<Trajectory> = runs.iter().map(|(_, r)| Trajectory::from_run(r)).collect();

    let (ref_traj, ref_sys, finest) = match reference {
        ReferencePolicy::SelfFinest => {
            let last = runs.len() - 1;
            (trajs[last].clone(), &runs[last].0, Some(last))
        }
        ReferencePolicy::LinearExact => {
            let sys = &runs[0].0;
            check_linear_decoupled(sys)?;
            let init = base.initial_state(sys)?;
            (exact_linear_trajectory(sys, &init, &trajs[0].times), sys, None)
        }
    };

    let mut report = StudyReport::new(
        "convergence",
        axis.name(),
        &[
            "theta_linf_h",
            "theta_l2_h",
            "theta_l2_v",
            "phi_linf_h",
            "phi_l2_h",
            "phi_l2_v",
            "cauchy_phi_linf_h",
            "order_theta_l2_h",
            "order_phi_l2_h",
        ],
    );
    let mut th = Vec::new();
    let mut ph = Vec::new();
    for (k, traj) in trajs.iter().enumerate() {
        let (et, ep) = if finest == Some(k) {
            (TimeNorms::default(), TimeNorms::default())
        } else {
            trajectory_errors(traj, &ref_traj, ref_sys.lambda(), ref_sys.m_diag())?
        };
        let cauchy = if k == 0 {
            f64::NAN
        } else {
            let sys = &runs[k].0;
            trajectory_errors(traj, &trajs[k - 1], sys.lambda(), sys.m_diag())?.1.linf_h
        };
        th.push(et.l2_h);
        ph.push(ep.l2_h);
        report.rows.push(vec![
            values[k], et.linf_h, et.l2_h, et.l2_v, ep.linf_h, ep.l2_h, ep.l2_v, cauchy, f64::NAN, f64::NAN,
        ]);
    }
    let (ot, op) = (empirical_orders(values, &th), empirical_orders(values, &ph));
    let n = report.columns.len();
    for (k, row) in report.rows.iter_mut().enumerate() {
        row[n - 2] = ot[k];
        row[n - 1] = op[k];
    }
    let measured = finest.map_or(trajs.len(), |f| f);
    let err: Vec<f64> = (0..measured).map(|k| th[k] + ph[k]).collect();
    report.checks.push(Check::new(
        "errors_decrease",
        err.windows(2).all(|w| w[1] <= w[0]),
        format!("{err:?}"),
    ));
    Ok(report)
}

/// Energy balance residual under step refinement. With a first-order ledger
/// the ratio of maxima between adjacent levels is close to the step ratio.
pub fn energy_residual_study(base: &Scenario, dts: &[f64]) -> Result<StudyReport> {
    let runs: Vec<(DiscreteSystem, RunOutput)> = dts
        .par_iter()
        .map(|&dt| base.with_dt(dt)?.run())
        .collect::<Result<_>>()?;
    let mut report = StudyReport::new(
        "energy_ledger",
        "dt",
        &["max_residual", "ratio_to_previous", "min_lhs_term"],
    );
    let mut res = Vec::new();
    let mut nonneg = true;
    for (k, (_, run)) in runs.iter().enumerate() {
        let audit = crate::timestepper::energy_ledger_audit(run);
        let min_term = run
            .series
            .iter()
            .flat_map(|r| r.energy.lhs_terms())
            .fold(f64::INFINITY, f64::min);
        nonneg &= audit.lhs_nonnegative;
        let ratio = if k == 0 { f64::NAN } else { res[k - 1] / audit.max_residual };
        res.push(audit.max_residual);
        report.rows.push(vec![dts[k], audit.max_residual, ratio, min_term]);
    }
    let ratios: Vec<f64> = report.column("ratio_to_previous").unwrap_or_default()[1..].to_vec();
    let halving = dts.windows(2).zip(&ratios).all(|(d, r)| {
        let want = d[0] / d[1];
        (r - want).abs() <= 0.15 * want
    });
    report
        .checks
        .push(Check::new("residual_first_order", halving, format!("ratios {ratios:?}")));
    report
        .checks
        .push(Check::new("lhs_terms_nonnegative", nonneg, String::new()));
    Ok(report)
}

/// Ledger suprema across Yosida levels and the Cauchy differences
/// `|phi_eps - phi_{eps/2}|_{L^inf(H)}`.
pub fn eps_uniformity_study(base: &Scenario, eps_list: &[f64]) -> Result<StudyReport> {
    let levels: Vec<f64> = eps_list.iter().flat_map(|&e| [e, 0.5 * e]).collect();
    let runs: Vec<(DiscreteSystem, RunOutput)> = levels
        .par_iter()
        .map(|&e| {
            let mut s = base.clone();
            s.eps = e;
            s.run()
        })
        .collect::<Result<_>>()?;
    let mut report = StudyReport::new(
        "eps_uniformity",
        "eps",
        &[
            "sup_lhs",
            "sup_kinetic",
            "sup_diss_theta",
            "sup_diss_phi",
            "sup_half_graph_phi",
            "sup_potential",
            "cauchy_phi_linf_h",
        ],
    );
    for (k, &eps) in eps_list.iter().enumerate() {
        let (sys, run) = &runs[2 * k];
        let sup = |f: &dyn Fn(&crate::timestepper::LedgerRow) -> f64| {
            run.series.iter().map(|r| f(&r.energy)).fold(0.0, f64::max)
        };
        let (_, half) = &runs[2 * k + 1];
        let (_, ep) = trajectory_errors(
            &Trajectory::from_run(run),
            &Trajectory::from_run(half),
            sys.lambda(),
            sys.m_diag(),
        )?;
        report.rows.push(vec![
            eps,
            sup(&|e| e.lhs),
            sup(&|e| e.kinetic),
            sup(&|e| e.diss_theta),
            sup(&|e| e.diss_phi),
            sup(&|e| e.half_graph_phi),
            sup(&|e| e.potential),
            ep.linf_h,
        ]);
    }
    let sups = report.column("sup_lhs").unwrap_or_default();
    let spread = relative_spread(&sups);
    report.checks.push(Check::new(
        "ledger_sup_uniform",
        spread < 0.1,
        format!("relative spread {spread:.4e}"),
    ));
    let cauchy = report.column("cauchy_phi_linf_h").unwrap_or_default();
    report.checks.push(Check::new(
        "cauchy_decreasing",
        strictly_decreasing(&cauchy),
        format!("{cauchy:?}"),
    ));
    Ok(report)
}

/// One continuous-dependence comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContdepReport {
    pub lhs: f64,
    pub rhs: f64,
    /// `None` when the data coincide (`rhs = 0`).
    pub ratio: Option<f64>,
    pub theta_l2_h: f64,
    pub int_theta_linf_v: f64,
    pub phi_linf_h: f64,
    pub phi_l2_v: f64,
    pub int_f_l2_h: f64,
    pub theta0_diff: f64,
    pub phi0_diff: f64,
}

impl ContdepReport {
    pub fn degenerate(&self) -> bool {
        self.ratio.is_none()
    }
}

/// Runs `base` with its own data and with `data2` (same bases, eps, potential)
/// and evaluates
///
/// ```text
/// LHS = |theta1 - theta2|_{L2(H)} + |1*(theta1 - theta2)|_{Linf(V_A^r)} + |phi1 - phi2|_{Linf(H)} + |phi1 - phi2|_{L2(V_B^sigma)}
/// RHS = |1*(f1 - f2)|_{L2(H)} + |theta0_1 - theta0_2| + |phi0_1 - phi0_2|
/// ```
///
/// on every time step.
pub fn contdep_check(base: &Scenario, data2: &ProblemData) -> Result<ContdepReport> {
    let mut s1 = base.clone();
    s1.snapshot_stride = 1;
    let mut s2 = s1.clone();
    s2.data = data2.clone();
    let (a, b) = rayon::join(|| s1.run(), || s2.run());
    let ((sys1, r1), (sys2, r2)) = (a?, b?);
    let (t1, t2) = (Trajectory::from_run(&r1), Trajectory::from_run(&r2));
    let times = t1.times.clone();
    if times.len() != t2.times.len() {
        return Err(Error::invalid("runs have different lengths"));
    }
    let dth: Vec<Vec<f64>> = t1.theta.iter().zip(&t2.theta).map(|(a, b)| padded_diff(a, b)).collect();
    let dph: Vec<Vec<f64>> = t1.phi.iter().zip(&t2.phi).map(|(a, b)| padded_diff(a, b)).collect();
    let df: Vec<Vec<f64>> = times
        .iter()
        .map(|&t| Ok(padded_diff(&sys1.g(t)?, &sys2.g(t)?)))
        .collect::<Result<_>>()?;

    let nth = time_norms(&times, &dth, sys1.lambda());
    let int_th = time_norms(&times, &running_integral(&times, &dth), sys1.lambda());
    let nph = time_norms(&times, &dph, sys1.m_diag());
    let int_f = time_norms(&times, &running_integral(&times, &df), &[]);
    let theta0_diff = coeff_norm(&dth[0]);
    let phi0_diff = coeff_norm(&dph[0]);

    let lhs = nth.l2_h + int_th.linf_v + nph.linf_h + nph.l2_v;
    let rhs = int_f.l2_h + theta0_diff + phi0_diff;
    Ok(ContdepReport {
        lhs,
        rhs,
        ratio: (rhs > 0.0).then(|| lhs / rhs),
        theta_l2_h: nth.l2_h,
        int_theta_linf_v: int_th.linf_v,
        phi_linf_h: nph.linf_h,
        phi_l2_v: nph.l2_v,
        int_f_l2_h: int_f.l2_h,
        theta0_diff,
        phi0_diff,
    })
}

/// `field + amp * (mode index of basis)`.
pub fn add_mode(field: &Field, basis: &SpectralBasis, amp: f64, index: usize) -> Result<Field> {
    match field {
        Field::Terms(t) => {
            let mut t = t.clone();
            t.push(TimedTerm::from(Term::Mode { amp, index }));
            Ok(Field::Terms(t))
        }
        Field::Samples { samples } => {
            if index >= basis.n_modes() {
                return Err(Error::invalid(format!("mode index {index} out of range")));
            }
            Ok(Field::Samples {
                samples: samples
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + amp * basis.value(i, index))
                    .collect(),
            })
        }
    }
}

/// Continuous dependence under `theta0 -> theta0 + delta e_mode` for every delta.
pub fn contdep_study(base: &Scenario, mode: usize, deltas: &[f64]) -> Result<StudyReport> {
    let (a, _) = base.bases()?;
    let reports: Vec<ContdepReport> = deltas
        .par_iter()
        .map(|&d| {
            let mut data2 = base.data.clone();
            data2.theta0 = add_mode(&base.data.theta0, &a, d, mode)?;
            contdep_check(base, &data2)
        })
        .collect::<Result<_>>()?;
    let mut report = StudyReport::new("contdep", "delta", &["lhs", "rhs", "ratio"]);
    for (d, r) in deltas.iter().zip(&reports) {
        report.rows.push(vec![*d, r.lhs, r.rhs, r.ratio.unwrap_or(f64::NAN)]);
    }
    let ratios = report.column("ratio").unwrap_or_default();
    let finite = ratios.iter().all(|r| r.is_finite());
    let spread = relative_spread(&ratios);
    report.checks.push(Check::new("ratios_finite", finite, format!("{ratios:?}")));
    report.checks.push(Check::new(
        "ratio_stable",
        finite && spread < 0.2,
        format!("relative spread {spread:.4e}"),
    ));
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OmegaThresholds {
    pub tail: f64,
    pub stationary: f64,
    pub theta: f64,
    /// Increases below this size count as round-off in the monotonicity check.
    pub noise_floor: f64,
}

impl Default for OmegaThresholds {
    fn default() -> Self {
        OmegaThresholds {
            tail: 1e-6,
            stationary: 1e-6,
            theta: 1e-6,
            noise_floor: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaReport {
    pub tail_start: f64,
    pub tail_sup_ar_theta: f64,
    pub tail_sup_dtphi: f64,
    pub tail_monotone: bool,
    /// `|M Phi + F(Theta, Phi)|` at the final state.
    pub stationary_residual: f64,
    /// `|A^r theta|` at the final state.
    pub final_ar_theta: f64,
    pub final_theta_norm: f64,
    pub trivial_kernel_a: bool,
    pub checks: Vec<Check>,
}

impl OmegaReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn monotone_within(v: &[f64], floor: f64) -> bool {
    v.windows(2).all(|w| w[1] <= w[0] + floor)
}

/// Stationarity diagnostics on the final `tail_fraction` of a long run.
pub fn omega_limit_probe(
    sys: &DiscreteSystem,
    run: &RunOutput,
    tail_fraction: f64,
    thresholds: &OmegaThresholds,
) -> Result<OmegaReport> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::invalid(format!("tail fraction must lie in (0, 1], got {tail_fraction}")));
    }
    let t_end = run.final_time();
    let tail_start = (1.0 - tail_fraction) * t_end;
    let tail: Vec<_> = run.series.iter().filter(|r| r.t >= tail_start - 1e-12).collect();
    let ar: Vec<f64> = tail.iter().map(|r| r.ar_theta_norm).collect();
    let dp: Vec<f64> = tail.iter().map(|r| r.dtphi_norm).collect();
    let sup = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let fin = &run.final_state;
    let nl = sys.eval_nonlinearity(&fin.theta, &fin.phi)?;
    let residual: Vec<f64> = fin
        .phi
        .iter()
        .zip(sys.m_diag())
        .zip(&nl.f_phi)
        .map(|((p, m), f)| m * p + f)
        .collect();
    let final_ar = fin
        .theta
        .iter()
        .zip(sys.lambda())
        .map(|(t, l)| l * t * t)
        .sum::<f64>()
        .sqrt();
    let trivial = sys.basis_a().eigenvalues().iter().all(|&l| l > 0.0);
    let mut report = OmegaReport {
        tail_start,
        tail_sup_ar_theta: sup(&ar),
        tail_sup_dtphi: sup(&dp),
        tail_monotone: monotone_within(&ar, thresholds.noise_floor)
            && monotone_within(&dp, thresholds.noise_floor),
        stationary_residual: coeff_norm(&residual),
        final_ar_theta: final_ar,
        final_theta_norm: coeff_norm(&fin.theta),
        trivial_kernel_a: trivial,
        checks: Vec::new(),
    };
    report.checks = vec![
        Check::new(
            "tail_ar_theta",
            report.tail_sup_ar_theta <= thresholds.tail,
            format!("{:.3e}", report.tail_sup_ar_theta),
        ),
        Check::new(
            "tail_dtphi",
            report.tail_sup_dtphi <= thresholds.tail,
            format!("{:.3e}", report.tail_sup_dtphi),
        ),
        Check::new("tail_monotone", report.tail_monotone, String::new()),
        Check::new(
            "stationary_residual",
            report.stationary_residual <= thresholds.stationary,
            format!("{:.3e}", report.stationary_residual),
        ),
        Check::new(
            "theta_in_kernel",
            final_ar <= thresholds.theta,
            format!("|A^r theta| = {final_ar:.3e}"),
        ),
    ];
    if trivial {
        report.checks.push(Check::new(
            "theta_vanishes",
            report.final_theta_norm <= thresholds.theta,
            format!("{:.3e}", report.final_theta_norm),
        ));
    }
    Ok(report)
}

/// Phase-relaxation limit: `B^{2 sigma}` replaced by `I - P`, unregularized
/// `beta` through the proximal scheme, `pi = -gamma id`, constant `l`.
pub fn limit_system(base: &Scenario) -> Result<DiscreteSystem> {
    let sys = base.system()?;
    if sys.coupling().constant_value().is_none() {
        return Err(Error::config("coupling", "the relaxation limit needs a constant coupling"));
    }
    if sys.potential().gamma().is_none() {
        return Err(Error::config(
            "potential",
            "the relaxation limit needs pi = -gamma id (regular, logarithmic or double obstacle)",
        ));
    }
    Ok(sys.with_eps(0.0)?.relaxation_limit())
}

fn prox_config(base: &Scenario) -> SchemeConfig {
    SchemeConfig {
        scheme: Scheme::ImplicitProx,
        ..base.scheme
    }
}

pub fn solve_relaxation_limit(base: &Scenario) -> Result<(DiscreteSystem, RunOutput)> {
    let sys = limit_system(base)?;
    let init = base.initial_state(&sys)?;
    let out = integrate(&sys, &init, &prox_config(base), base.t_final, base.snapshot_stride)?;
    Ok((sys, out))
}

/// Fractional runs along a decreasing sigma ladder compared with the limit,
/// both with unregularized `beta` and the proximal scheme.
pub fn relaxation_limit_study(base: &Scenario, sigmas: &[f64]) -> Result<StudyReport> {
    if !strictly_decreasing(sigmas) {
        return Err(Error::config("study.sigmas", "the sigma ladder must be strictly decreasing"));
    }
    let (limit, runs) = rayon::join(
        || solve_relaxation_limit(base),
        || {
            sigmas
                .par_iter()
                .map(|&sigma| {
                    let mut s = base.clone();
                    s.sigma = sigma;
                    s.eps = 0.0;
                    s.scheme = prox_config(base);
                    s.run()
                })
                .collect::<Result<Vec<_>>>()
        },
    );
    let (lsys, lrun) = limit?;
    let runs = runs?;
    let lt = Trajectory::from_run(&lrun);
    let mut report = StudyReport::new(
        "relaxation_limit",
        "sigma",
        &["phi_l2_q", "theta_l2_q", "phi_linf_h"],
    );
    for (sigma, (_, run)) in sigmas.iter().zip(&runs) {
        let (et, ep) = trajectory_errors(&Trajectory::from_run(run), &lt, lsys.lambda(), lsys.m_diag())?;
        report
            .rows
            .push(vec![*sigma, ep.l2_h, et.l2_h, ep.linf_h]);
    }
    for col in ["phi_l2_q", "theta_l2_q"] {
        let v = report.column(col).unwrap_or_default();
        report
            .checks
            .push(Check::new(format!("{col}_decreasing"), strictly_decreasing(&v), format!("{v:?}")));
    }
    Ok(report)
}

/// Nodal obstacle diagnostics over all snapshots carrying proximal output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleReport {
    pub snapshots_checked: usize,
    pub max_abs_phi: f64,
    pub upper_contacts: usize,
    pub lower_contacts: usize,
    /// Smallest multiplier at upper contact nodes.
    pub upper_xi_min: f64,
    /// Largest multiplier at lower contact nodes.
    pub lower_xi_max: f64,
    pub passed: bool,
}

/// A node is in contact when `|phi| >= 1 - contact_tol`; multipliers of
/// magnitude below `xi_tol` count as zero.
pub fn obstacle_report(run: &RunOutput, contact_tol: f64, xi_tol: f64) -> ObstacleReport {
    let mut r = ObstacleReport {
        snapshots_checked: 0,
        max_abs_phi: 0.0,
        upper_contacts: 0,
        lower_contacts: 0,
        upper_xi_min: f64::INFINITY,
        lower_xi_max: f64::NEG_INFINITY,
        passed: true,
    };
    for s in &run.snapshots {
        let (Some(p), Some(x)) = (&s.phi_nodes, &s.xi_nodes) else {
            continue;
        };
        r.snapshots_checked += 1;
        for (&p, &x) in p.iter().zip(x) {
            r.max_abs_phi = r.max_abs_phi.max(p.abs());
            if p >= 1.0 - contact_tol {
                r.upper_contacts += 1;
                r.upper_xi_min = r.upper_xi_min.min(x);
            } else if p <= -1.0 + contact_tol {
                r.lower_contacts += 1;
                r.lower_xi_max = r.lower_xi_max.max(x);
            }
        }
    }
    r.passed = r.snapshots_checked > 0
        && r.max_abs_phi <= 1.0
        && (r.upper_contacts == 0 || r.upper_xi_min >= -xi_tol)
        && (r.lower_contacts == 0 || r.lower_xi_max <= xi_tol);
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaZeroRow {
    pub sigma: f64,
    /// `|B^sigma v - (v - P v)|` from the operators.
    pub computed: f64,
    /// `sum_{mu_j > 0} (mu_j^sigma - 1)^2 v_j^2`
    pub closed_form_sq: f64,
}

impl SigmaZeroRow {
    pub fn closed_form(&self) -> f64 {
        self.closed_form_sq.sqrt()
    }
}

/// Distance between `B^sigma v` and `v - P v` along a sigma list, computed
/// through the operators and through the modal sum.
pub fn sigma_zero_operator_check(basis: &SpectralBasis, v: &[f64], sigmas: &[f64]) -> Result<Vec<SigmaZeroRow>> {
    let pv = kernel_projection(basis, v)?;
    sigmas
        .iter()
        .map(|&sigma| {
            let bv = apply_fractional(basis, sigma, v)?;
            let diff: Vec<f64> = bv
                .iter()
                .zip(v)
                .zip(&pv)
                .map(|((b, v), p)| b - (v - p))
                .collect();
            let closed_form_sq = basis
                .eigenvalues()
                .iter()
                .zip(v)
                .filter(|(m, _)| **m > 0.0)
                .map(|(m, c)| (m.powf(sigma) - 1.0).powi(2) * c * c)
                .sum();
            Ok(SigmaZeroRow {
                sigma,
                computed: coeff_norm(&diff),
                closed_form_sq,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpqoReport {
    /// `(B^sigma beta_eps(v), B^sigma v)` per sample.
    pub values: Vec<f64>,
    pub violations: usize,
    pub min_value: f64,
}

/// Sign of `(B^sigma beta_eps(v), B^sigma v)` on coefficient samples.
/// Diagnostic only.
pub fn hpqo_probe(
    basis: &SpectralBasis,
    sigma: f64,
    potential: &PotentialSpec,
    eps: f64,
    samples: &[Vec<f64>],
) -> Result<HpqoReport> {
    if !(eps > 0.0) {
        return Err(Error::invalid("the probe uses beta_eps and needs eps > 0"));
    }
    let mult: Vec<f64> = basis.eigenvalues().iter().map(|&m| eigen_power(m, 2.0 * sigma)).collect();
    let mut values: Vec<f64> = Vec::with_capacity(samples.len());
    for c in samples {
        let grid = basis.synthesize(c)?;
        let b: Vec<f64> = grid.iter().map(|&s| potential.yosida(eps, s)).collect::<Result<_>>()?;
        let bc = basis.analyze(&b)?;
        values.push(bc.iter().zip(c).zip(&mult).map(|((x, y), m)| m * x * y).sum());
    }
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let violations = values.iter().filter(|v| **v < -1e-12 * scale).count();
    let min_value = values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(HpqoReport {
        values,
        violations,
        min_value,
    })
}

/// Random smooth coefficient vectors with amplitudes decaying like `1/(1+j)^2`.
pub fn random_smooth_samples(n_modes: usize, count: usize, amplitude: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            (0..n_modes)
                .map(|j| amplitude * rng.gen_range(-1.0..1.0) / ((1 + j) as f64).powi(2))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::galerkin::Coupling;
    use crate::potentials::CustomTables;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn flat() -> PotentialKind {
        PotentialKind::Custom(CustomTables {
            nodes: vec![-1.0, 0.0, 1.0],
            beta_hat: vec![0.0; 3],
            beta: vec![0.0; 3],
            pi: vec![0.0; 3],
        })
    }

    fn scenario(potential: PotentialKind, l: f64) -> Scenario {
        Scenario {
            operator_a: BasisSpec::interval(BasisKind::IntervalNeumann, 1.0, 8),
            operator_b: BasisSpec::interval(BasisKind::IntervalNeumann, 1.0, 8),
            r: 0.5,
            sigma: 0.5,
            eps: 1e-2,
            potential,
            data: ProblemData {
                theta0: Field::from_terms([Term::Cos { amp: 0.3, kx: 1.0, ky: 0.0 }]),
                phi0: Field::from_terms([
                    Term::Const { value: 0.2 },
                    Term::Cos { amp: 0.3, kx: 2.0, ky: 0.0 },
                ]),
                coupling: Coupling::Constant { value: l },
                ..Default::default()
            },
            scheme: SchemeConfig::imex(1e-3),
            t_final: 0.1,
            snapshot_stride: 10,
        }
    }

    #[test]
    fn running_integral_of_linear_function() {
        let times: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1).collect();
        let v: Vec<Vec<f64>> = times.iter().map(|t| vec![*t, 1.0]).collect();
        let iv = running_integral(&times, &v);
        assert_abs_diff_eq!(iv[10][0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(iv[10][1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn running_integral_cauchy_schwarz() {
        let samples = random_smooth_samples(3, 50, 1.0, 7);
        let times: Vec<f64> = (0..50).map(|k| k as f64 * 0.04).collect();
        let iv = running_integral(&times, &samples);
        let t_end = *times.last().unwrap();
        let lhs = time_norms(&times, &iv, &[]).linf_h;
        let rhs = t_end.sqrt() * time_norms(&times, &samples, &[]).l2_h;
        assert!(lhs <= rhs);
    }

    #[test]
    fn contdep_identical_data_is_degenerate() {
        let s = scenario(PotentialKind::Regular { gamma: 1.0 }, 1.0);
        let r = contdep_check(&s, &s.data).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.degenerate());
    }

    #[test]
    fn contdep_decoupled_phi_perturbation_leaves_theta() {
        let s = scenario(PotentialKind::Regular { gamma: 1.0 }, 0.0);
        let (_, b) = s.bases().unwrap();
        let mut d2 = s.data.clone();
        d2.phi0 = add_mode(&s.data.phi0, &b, 0.01, 1).unwrap();
        let r = contdep_check(&s, &d2).unwrap();
        assert_eq!(r.theta_l2_h, 0.0);
        assert_eq!(r.int_theta_linf_v, 0.0);
        assert!(r.phi_linf_h > 0.0);
        assert_abs_diff_eq!(r.lhs, r.phi_linf_h + r.phi_l2_v, epsilon = 1e-15);
    }

    #[test]
    fn exact_reference_matches_for_small_steps() {
        let mut s = scenario(flat(), 0.0);
        s.r = 0.25;
        s.sigma = 0.25;
        let rep = convergence_study(&s, Axis::Dt, &[1e-3, 5e-4], ReferencePolicy::LinearExact).unwrap();
        let orders = rep.column("order_theta_l2_h").unwrap();
        assert!((orders[1] - 1.0).abs() < 0.1, "{orders:?}");
        assert!(rep.passed());
    }

    #[test]
    fn exact_reference_rejects_nonlinear_problems() {
        let s = scenario(PotentialKind::Regular { gamma: 1.0 }, 0.0);
        assert!(convergence_study(&s, Axis::Dt, &[1e-3, 5e-4], ReferencePolicy::LinearExact).is_err());
    }

    #[test]
    fn n_modes_study_decreases() {
        let mut s = scenario(PotentialKind::Regular { gamma: 1.0 }, 1.0);
        s.operator_a.m_grid = Some(256);
        s.operator_b.m_grid = Some(256);
        s.data.phi0 = Field::from_terms([Term::Gaussian {
            amp: 0.5,
            center: vec![0.3],
            width: 0.1,
        }]);
        let rep = convergence_study(&s, Axis::NModes, &[4.0, 8.0, 16.0, 32.0], ReferencePolicy::SelfFinest).unwrap();
        assert!(rep.passed(), "{:?}", rep.rows);
    }

    #[test]
    fn relaxation_limit_linear_modes_decay_exponentially() {
        let mut s = scenario(PotentialKind::Regular { gamma: 0.0 }, 0.0);
        s.potential = flat();
        // flat custom tables carry no gamma
        assert!(solve_relaxation_limit(&s).is_err());
        let sys = s.system().unwrap().with_eps(0.0).unwrap().relaxation_limit();
        let init = s.initial_state(&sys).unwrap();
        let out = integrate(&sys, &init, &SchemeConfig::prox(1e-3), 0.1, 100).unwrap();
        let fin = &out.final_state;
        assert_abs_diff_eq!(fin.phi[0], init.phi[0], epsilon = 1e-14);
        let want = init.phi[2] * (1.0f64 + 1e-3).powi(-100);
        assert_abs_diff_eq!(fin.phi[2], want, epsilon = 1e-12);
        assert!((fin.phi[2] - init.phi[2] * (-0.1f64).exp()).abs() < 1e-4);
    }

    #[test]
    fn dirichlet_limit_has_no_kernel() {
        let mut s = scenario(PotentialKind::Regular { gamma: 1.0 }, 1.0);
        s.operator_b = BasisSpec::interval(BasisKind::IntervalDirichlet, 1.0, 8);
        let sys = limit_system(&s).unwrap();
        assert!(sys.m_diag().iter().all(|m| *m == 1.0));
    }

    #[test]
    fn sigma_zero_check_examples() {
        let b = build_interval_basis(BasisKind::IntervalNeumann, 1.0, 6, 48).unwrap();
        let mut v = vec![0.0; 6];
        v[1] = 1.0;
        let rows = sigma_zero_operator_check(&b, &v, &[0.25]).unwrap();
        assert_abs_diff_eq!(rows[0].computed, PI.sqrt() - 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rows[0].computed, 0.7725, epsilon = 5e-5);
        let kernel = [2.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        for r in sigma_zero_operator_check(&b, &kernel, &[0.5, 0.1]).unwrap() {
            assert_eq!(r.computed, 0.0);
            assert_eq!(r.closed_form_sq, 0.0);
        }
    }

    #[test]
    fn hpqo_linear_beta_is_nonnegative() {
        let b = build_interval_basis(BasisKind::IntervalNeumann, 1.0, 8, 64).unwrap();
        // the regular potential's beta is s^3: monotone, sign not guaranteed in general
        let lin = PotentialSpec::new(PotentialKind::Custom(CustomTables {
            nodes: vec![-2.0, 0.0, 2.0],
            beta_hat: vec![2.0, 0.0, 2.0],
            beta: vec![-2.0, 0.0, 2.0],
            pi: vec![0.0; 3],
        }))
        .unwrap();
        let samples = random_smooth_samples(8, 20, 0.5, 3);
        let rep = hpqo_probe(&b, 0.5, &lin, 1e-2, &samples).unwrap();
        assert_eq!(rep.violations, 0);
        let konst = vec![vec![0.4, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]];
        let rep = hpqo_probe(&b, 0.5, &lin, 1e-2, &konst).unwrap();
        assert_abs_diff_eq!(rep.values[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn obstacle_report_reads_multipliers() {
        let mut s = scenario(PotentialKind::DoubleObstacle { c2: 2.0 }, 0.0);
        s.data.phi0 = Field::from_terms([Term::Cos { amp: 0.9, kx: 1.0, ky: 0.0 }]);
        s.data.theta0 = Field::zero();
        s.scheme = SchemeConfig::prox(1e-2);
        s.t_final = 0.5;
        s.snapshot_stride = 1;
        let (_, run) = solve_relaxation_limit(&s).unwrap();
        let r = obstacle_report(&run, 1e-9, 1e-8);
        assert!(r.passed, "{r:?}");
        assert!(r.upper_contacts > 0 && r.lower_contacts > 0);
    }
}
