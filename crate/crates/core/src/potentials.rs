//! Convex/concave splits `F = beta_hat + pi_hat` of the phase potential and the
//! convex-analysis machinery built on the convex part: minimal section,
//! resolvent `J_eps = (I + eps beta)^-1`, Yosida approximation and Moreau
//! envelope.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX: usize = 100;
const BISECTION_MAX: usize = 200;

fn one() -> f64 {
    1.0
}

/// Tabulated convex part and perturbation for user-defined potentials.
///
/// All three tables share `nodes`. `beta` and `pi` are piecewise linear and
/// continue with their end slopes outside the table. `beta_hat` is evaluated
/// as the exact antiderivative of `beta`; the supplied `beta_hat` values must
/// agree with it at the nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomTables {
    pub nodes: Vec<f64>,
    pub beta_hat: Vec<f64>,
    pub beta: Vec<f64>,
    pub pi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialKind {
    /// `beta_hat = s^4/4`, `pi_hat = 1/4 - gamma s^2/2` (`gamma = 1` gives `(s^2-1)^2/4`).
    Regular {
        #[serde(default = "one")]
        gamma: f64,
    },
    /// `beta_hat = (1+s)ln(1+s) + (1-s)ln(1-s)` on `[-1,1]`, `pi_hat = -c1 s^2`.
    Logarithmic { c1: f64 },
    /// `beta_hat` = indicator of `[-1,1]`, `pi_hat = -c2 s^2`.
    DoubleObstacle { c2: f64 },
    Custom(CustomTables),
}

/// Effective domain of `beta_hat`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    pub lo: f64,
    pub hi: f64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl Domain {
    pub fn contains(&self, s: f64) -> bool {
        let above = if self.lo_closed { s >= self.lo } else { s > self.lo };
        let below = if self.hi_closed { s <= self.hi } else { s < self.hi };
        above && below
    }
}

/// Output of the resolvent: the point `x = J_eps(s)` and the element
/// `b in beta(x)` with `x + eps * b = s` (the Yosida value at `s`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolved {
    pub point: f64,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialSpec {
    kind: PotentialKind,
}

impl PotentialSpec {
    pub fn new(kind: PotentialKind) -> Result<Self> {
        match &kind {
            PotentialKind::Regular { gamma } => {
                if !(gamma.is_finite() && *gamma >= 0.0) {
                    return Err(Error::invalid(format!("gamma must be >= 0, got {gamma}")));
                }
            }
            PotentialKind::Logarithmic { c1 } => {
                if !(c1.is_finite() && *c1 > 1.0) {
                    return Err(Error::invalid(format!("c1 must exceed 1, got {c1}")));
                }
            }
            PotentialKind::DoubleObstacle { c2 } => {
                if !(c2.is_finite() && *c2 > 0.0) {
                    return Err(Error::invalid(format!("c2 must be positive, got {c2}")));
                }
            }
            PotentialKind::Custom(t) => validate_tables(t)?,
        }
        Ok(PotentialSpec { kind })
    }

    pub fn regular() -> Self {
        PotentialSpec {
            kind: PotentialKind::Regular { gamma: 1.0 },
        }
    }

    pub fn logarithmic(c1: f64) -> Result<Self> {
        Self::new(PotentialKind::Logarithmic { c1 })
    }

    pub fn double_obstacle(c2: f64) -> Result<Self> {
        Self::new(PotentialKind::DoubleObstacle { c2 })
    }

    pub fn kind(&self) -> &PotentialKind {
        &self.kind
    }

    /// Slope `gamma` when `pi(s) = -gamma s`; `None` for tabulated perturbations.
    pub fn gamma(&self) -> Option<f64> {
        match &self.kind {
            PotentialKind::Regular { gamma } => Some(*gamma),
            PotentialKind::Logarithmic { c1 } => Some(2.0 * c1),
            PotentialKind::DoubleObstacle { c2 } => Some(2.0 * c2),
            PotentialKind::Custom(_) => None,
        }
    }

    /// Lipschitz constant of `pi`.
    pub fn pi_lipschitz(&self) -> f64 {
        match &self.kind {
            PotentialKind::Custom(t) => max_slope(&t.nodes, &t.pi),
            _ => self.gamma().unwrap_or(0.0).abs(),
        }
    }

    /// True when `beta` is a function on all of its domain (no vertical segments).
    pub fn is_single_valued(&self) -> bool {
        !matches!(self.kind, PotentialKind::DoubleObstacle { .. })
    }

    pub fn domain(&self) -> Domain {
        match &self.kind {
            PotentialKind::Logarithmic { .. } | PotentialKind::DoubleObstacle { .. } => Domain {
                lo: -1.0,
                hi: 1.0,
                lo_closed: true,
                hi_closed: true,
            },
            _ => Domain {
                lo: f64::NEG_INFINITY,
                hi: f64::INFINITY,
                lo_closed: false,
                hi_closed: false,
            },
        }
    }

    /// Convex part; `+inf` outside its domain.
    pub fn beta_hat(&self, s: f64) -> f64 {
        match &self.kind {
            PotentialKind::Regular { .. } => 0.25 * s.powi(4),
            PotentialKind::Logarithmic { .. } => {
                if s.abs() > 1.0 {
                    f64::INFINITY
                } else if s.abs() == 1.0 {
                    2.0 * std::f64::consts::LN_2
                } else {
                    (1.0 + s) * s.ln_1p() + (1.0 - s) * (-s).ln_1p()
                }
            }
            PotentialKind::DoubleObstacle { .. } => {
                if s.abs() <= 1.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            PotentialKind::Custom(t) => custom_beta_hat(t, s),
        }
    }

    /// Minimal-modulus element of `beta(s)`; `None` outside `D(beta)`.
    pub fn beta_min(&self, s: f64) -> Option<f64> {
        match &self.kind {
            PotentialKind::Regular { .. } => Some(s * s * s),
            PotentialKind::Logarithmic { .. } => {
                if s.abs() < 1.0 {
                    Some(2.0 * s.atanh())
                } else {
                    None
                }
            }
            PotentialKind::DoubleObstacle { .. } => {
                if s.abs() <= 1.0 {
                    Some(0.0)
                } else {
                    None
                }
            }
            PotentialKind::Custom(t) => Some(interp(&t.nodes, &t.beta, s)),
        }
    }

    pub fn pi_hat(&self, s: f64) -> f64 {
        match &self.kind {
            PotentialKind::Regular { gamma } => 0.25 - 0.5 * gamma * s * s,
            PotentialKind::Logarithmic { c1 } => -c1 * s * s,
            PotentialKind::DoubleObstacle { c2 } => -c2 * s * s,
            PotentialKind::Custom(t) => integrate_pl(&t.nodes, &t.pi, s),
        }
    }

    pub fn pi(&self, s: f64) -> f64 {
        match &self.kind {
            PotentialKind::Custom(t) => interp(&t.nodes, &t.pi, s),
            _ => -self.gamma().unwrap_or(0.0) * s,
        }
    }

    /// Full potential `F = beta_hat + pi_hat`.
    pub fn potential(&self, s: f64) -> f64 {
        self.beta_hat(s) + self.pi_hat(s)
    }

    /// `J_eps(s)`, the unique `x` with `x + eps beta(x) ∋ s`.
    pub fn resolvent(&self, eps: f64, s: f64) -> Result<Resolved> {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::invalid(format!("eps must be positive, got {eps}")));
        }
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("resolvent argument {s}")));
        }
        match &self.kind {
            PotentialKind::DoubleObstacle { .. } => {
                let x = s.clamp(-1.0, 1.0);
                Ok(Resolved {
                    point: x,
                    multiplier: (s - x) / eps,
                })
            }
            PotentialKind::Regular { .. } => {
                let a = s.abs() + 1.0;
                let x = safeguarded_newton(
                    |x| (x + eps * x * x * x - s, 1.0 + 3.0 * eps * x * x),
                    s / (1.0 + eps * s * s).max(1.0),
                    s.min(0.0) - a,
                    s.max(0.0) + a,
                )?;
                Ok(Resolved {
                    point: x,
                    multiplier: x * x * x,
                })
            }
            PotentialKind::Logarithmic { .. } => {
                // x = tanh(y) keeps the root representable when x rounds to +-1.
                let y = safeguarded_newton(
                    |y| {
                        let t = y.tanh();
                        (t + 2.0 * eps * y - s, 1.0 - t * t + 2.0 * eps)
                    },
                    s / (1.0 + 2.0 * eps),
                    (s - 1.0) / (2.0 * eps),
                    (s + 1.0) / (2.0 * eps),
                )?;
                Ok(Resolved {
                    point: y.tanh(),
                    multiplier: 2.0 * y,
                })
            }
            PotentialKind::Custom(t) => {
                let b = interp(&t.nodes, &t.beta, s);
                let (lo, hi) = if b >= 0.0 { (s - eps * b, s) } else { (s, s - eps * b) };
                let x = bisect(|x| x + eps * interp(&t.nodes, &t.beta, x) - s, lo, hi)?;
                Ok(Resolved {
                    point: x,
                    multiplier: (s - x) / eps,
                })
            }
        }
    }

    /// Yosida approximation `beta_eps(s) = (s - J_eps(s)) / eps`.
    pub fn yosida(&self, eps: f64, s: f64) -> Result<f64> {
        Ok(self.resolvent(eps, s)?.multiplier)
    }

    /// Moreau envelope `beta_hat_eps(s) = |s - J_eps(s)|^2 / (2 eps) + beta_hat(J_eps(s))`.
    pub fn moreau(&self, eps: f64, s: f64) -> Result<f64> {
        let r = self.resolvent(eps, s)?;
        let hat = match &self.kind {
            PotentialKind::Logarithmic { .. } => log_beta_hat_from_y(0.5 * r.multiplier),
            _ => self.beta_hat(r.point),
        };
        // |s - J|^2 / (2 eps) = eps |beta_eps|^2 / 2
        Ok(0.5 * eps * r.multiplier * r.multiplier + hat)
    }

    /// Regularized potential `F_eps = beta_hat_eps + pi_hat`; `eps = 0` means unregularized.
    pub fn potential_eps(&self, eps: f64, s: f64) -> Result<f64> {
        if eps == 0.0 {
            Ok(self.potential(s))
        } else {
            Ok(self.moreau(eps, s)? + self.pi_hat(s))
        }
    }

    /// Convex energy density used by ledgers: Moreau envelope for `eps > 0`,
    /// `beta_hat` itself for `eps = 0`.
    pub fn convex_energy(&self, eps: f64, s: f64) -> Result<f64> {
        if eps == 0.0 {
            Ok(self.beta_hat(s))
        } else {
            self.moreau(eps, s)
        }
    }

    /// Resolvent of `beta_eps` with step `tau`:
    /// `(I + tau beta_eps)^-1 s = (eps s + tau J_{eps+tau}(s)) / (eps + tau)`.
    /// With `eps = 0` this is `J_tau`.
    pub fn regularized_resolvent(&self, eps: f64, tau: f64, s: f64) -> Result<Resolved> {
        if eps < 0.0 || !eps.is_finite() {
            return Err(Error::invalid(format!("eps must be >= 0, got {eps}")));
        }
        if eps == 0.0 {
            return self.resolvent(tau, s);
        }
        let j = self.resolvent(eps + tau, s)?;
        let point = (eps * s + tau * j.point) / (eps + tau);
        Ok(Resolved {
            point,
            multiplier: (s - point) / tau,
        })
    }
}

/// Newton on an increasing function with a bracket `[lo, hi]`; falls back to
/// bisection whenever a step leaves the bracket, and entirely if Newton stalls.
fn safeguarded_newton<F>(f: F, x0: f64, lo: f64, hi: f64) -> Result<f64>
where
    F: Fn(f64) -> (f64, f64),
{
    let (mut lo, mut hi) = (lo, hi);
    let mut x = x0.clamp(lo, hi);
    for _ in 0..NEWTON_MAX {
        let (g, dg) = f(x);
        if g == 0.0 {
            return Ok(x);
        }
        if g > 0.0 {
            hi = hi.min(x);
        } else {
            lo = lo.max(x);
        }
        let mut next = x - g / dg;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= NEWTON_TOL * x.abs().max(1.0) {
            return Ok(next);
        }
        x = next;
    }
    bisect(|x| f(x).0, lo, hi)
}

fn bisect<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64) -> Result<f64> {
    let (mut lo, mut hi) = (lo, hi);
    let glo = f(lo);
    if glo == 0.0 {
        return Ok(lo);
    }
    if f(hi) == 0.0 {
        return Ok(hi);
    }
    for _ in 0..BISECTION_MAX {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Ok(mid);
        }
        let g = f(mid);
        if g == 0.0 {
            return Ok(mid);
        }
        if (g > 0.0) == (glo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mid = 0.5 * (lo + hi);
    if (hi - lo) <= 1e-14 * mid.abs().max(1.0) {
        Ok(mid)
    } else {
        Err(Error::NoConvergence {
            iterations: BISECTION_MAX,
            residual: f(mid).abs(),
        })
    }
}

/// `beta_hat(tanh y)` for the logarithmic potential, accurate for large `|y|`.
fn log_beta_hat_from_y(y: f64) -> f64 {
    let y = y.abs();
    let e = (-2.0 * y).exp();
    let l1 = e.ln_1p();
    let ln2 = std::f64::consts::LN_2;
    // 1 + x = 2/(1+e), 1 - x = 2e/(1+e)
    let one_plus = 2.0 / (1.0 + e);
    let one_minus = 2.0 * e / (1.0 + e);
    one_plus * (ln2 - l1) + one_minus * (ln2 - 2.0 * y - l1)
}

fn interp(nodes: &[f64], vals: &[f64], s: f64) -> f64 {
    let n = nodes.len();
    let k = if s <= nodes[0] {
        0
    } else if s >= nodes[n - 1] {
        n - 2
    } else {
        nodes.partition_point(|&x| x <= s) - 1
    };
    let k = k.min(n - 2);
    let t = (s - nodes[k]) / (nodes[k + 1] - nodes[k]);
    vals[k] + t * (vals[k + 1] - vals[k])
}

/// `int_0^s` of the piecewise-linear (linearly extrapolated) interpolant.
fn integrate_pl(nodes: &[f64], vals: &[f64], s: f64) -> f64 {
    let seg = |a: f64, b: f64| 0.5 * (b - a) * (interp(nodes, vals, a) + interp(nodes, vals, b));
    let (a, b, sign) = if s >= 0.0 { (0.0, s, 1.0) } else { (s, 0.0, -1.0) };
    let mut cuts = vec![a];
    cuts.extend(nodes.iter().copied().filter(|&x| x > a && x < b));
    cuts.push(b);
    sign * cuts.windows(2).map(|w| seg(w[0], w[1])).sum::<f64>()
}

fn max_slope(nodes: &[f64], vals: &[f64]) -> f64 {
    nodes
        .windows(2)
        .zip(vals.windows(2))
        .map(|(x, v)| ((v[1] - v[0]) / (x[1] - x[0])).abs())
        .fold(0.0, f64::max)
}

fn custom_beta_hat(t: &CustomTables, s: f64) -> f64 {
    integrate_pl(&t.nodes, &t.beta, s)
}

fn validate_tables(t: &CustomTables) -> Result<()> {
    let n = t.nodes.len();
    if n < 2 || t.beta_hat.len() != n || t.beta.len() != n || t.pi.len() != n {
        return Err(Error::invalid(
            "custom potential tables need >= 2 nodes and equal lengths",
        ));
    }
    let all = t.nodes.iter().chain(&t.beta_hat).chain(&t.beta).chain(&t.pi);
    if all.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("custom potential table".into()));
    }
    if t.nodes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("custom nodes must be strictly increasing"));
    }
    if !(t.nodes[0] <= 0.0 && t.nodes[n - 1] >= 0.0) {
        return Err(Error::invalid("custom nodes must bracket 0"));
    }
    if t.beta.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("custom beta must be nondecreasing"));
    }
    if interp(&t.nodes, &t.beta, 0.0).abs() > 1e-12 {
        return Err(Error::invalid("custom beta must vanish at 0 so that beta_hat is minimal there"));
    }
    let scale = t.beta_hat.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    for (&x, &v) in t.nodes.iter().zip(&t.beta_hat) {
        let exact = integrate_pl(&t.nodes, &t.beta, x);
        if (v - exact).abs() > 1e-8 * scale {
            return Err(Error::invalid(format!(
                "custom beta_hat({x}) = {v} is not the integral of beta ({exact})"
            )));
        }
    }
    // midpoint convexity on a sample of the table range
    let (a, b) = (t.nodes[0], t.nodes[n - 1]);
    let samples: Vec<f64> = (0..=64).map(|k| a + (b - a) * k as f64 / 64.0).collect();
    for (i, &p) in samples.iter().enumerate() {
        for &q in &samples[i + 1..] {
            let mid = custom_beta_hat(t, 0.5 * (p + q));
            let chord = 0.5 * (custom_beta_hat(t, p) + custom_beta_hat(t, q));
            if mid > chord + 1e-12 * scale {
                return Err(Error::invalid(format!(
                    "custom beta_hat fails midpoint convexity between {p} and {q}"
                )));
            }
        }
    }
    Ok(())
}

/// Result of [`coercivity_probe`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoercivityReport {
    pub alpha: f64,
    pub c: f64,
    pub passed: bool,
}

/// Grid search for constants with `beta_hat_eps(r) + pi_hat(r) >= alpha r^2 - C`
/// on `range` for every `eps` in `eps_list`.
///
/// A candidate `alpha` is accepted when `F_eps(r) - alpha r^2` does not dip in
/// the outer half of the range below its minimum over the inner half, i.e. the
/// sampled growth is at least quadratic with rate `alpha`. `C` is the smallest
/// constant making the inequality hold at every sample.
pub fn coercivity_probe(
    spec: &PotentialSpec,
    eps_list: &[f64],
    range: (f64, f64),
    samples: usize,
) -> Result<CoercivityReport> {
    let (lo, hi) = range;
    if !(lo < hi) || samples < 3 || eps_list.is_empty() {
        return Err(Error::invalid("coercivity probe needs lo < hi, >= 3 samples, eps list"));
    }
    let pts: Vec<f64> = (0..samples)
        .map(|k| lo + (hi - lo) * k as f64 / (samples - 1) as f64)
        .collect();
    let half = 0.5 * lo.abs().max(hi.abs());
    let mut tables = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let vals = pts
            .iter()
            .map(|&s| spec.potential_eps(eps, s))
            .collect::<Result<Vec<_>>>()?;
        tables.push(vals);
    }

    let admissible = |alpha: f64| -> bool {
        tables.iter().all(|vals| {
            let mut inner = f64::INFINITY;
            let mut outer = f64::INFINITY;
            for (s, v) in pts.iter().zip(vals) {
                let g = v - alpha * s * s;
                if s.abs() <= half {
                    inner = inner.min(g);
                } else {
                    outer = outer.min(g);
                }
            }
            outer >= inner
        })
    };

    // alpha = 2^k, k from 10 down to -30
    let alpha = (-30..=10)
        .rev()
        .map(|k| 2f64.powi(k))
        .find(|&a| admissible(a));
    match alpha {
        Some(alpha) => {
            let c = tables
                .iter()
                .flat_map(|vals| pts.iter().zip(vals).map(|(s, v)| alpha * s * s - v))
                .fold(f64::NEG_INFINITY, f64::max)
                .max(f64::MIN_POSITIVE);
            Ok(CoercivityReport {
                alpha,
                c,
                passed: true,
            })
        }
        None => Ok(CoercivityReport {
            alpha: 0.0,
            c: f64::INFINITY,
            passed: false,
        }),
    }
}
