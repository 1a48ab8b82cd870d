//! Property suites over the spectral bases and the potentials, evaluated on
//! seeded random samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::potentials::{CustomTables, PotentialKind, PotentialSpec};
use crate::spectral::{apply_fractional, build_interval_basis, build_rect_basis, coeff_norm, kernel_projection, BasisKind, SpectralBasis};

pub const GRAM_TOL: f64 = 1e-10;
pub const SEMIGROUP_TOL: f64 = 1e-13;
pub const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub suite: String,
    pub property: String,
    pub samples: usize,
    pub violations: usize,
    pub max_error: f64,
    pub passed: bool,
}

struct Tally {
    suite: String,
    property: String,
    samples: usize,
    violations: usize,
    max_error: f64,
}

impl Tally {
    fn new(suite: &str, property: &str) -> Self {
        Tally {
            suite: suite.into(),
            property: property.into(),
            samples: 0,
            violations: 0,
            max_error: 0.0,
        }
    }

    /// Records a sample whose error must not exceed `tol`.
    fn record(&mut self, err: f64, tol: f64) {
        self.samples += 1;
        self.max_error = self.max_error.max(err);
        if !(err <= tol) {
            self.violations += 1;
        }
    }

    fn finish(self) -> SuiteRow {
        SuiteRow {
            passed: self.violations == 0 && self.samples > 0,
            suite: self.suite,
            property: self.property,
            samples: self.samples,
            violations: self.violations,
            max_error: self.max_error,
        }
    }
}

fn random_coeffs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    coeff_norm(&d) / coeff_norm(b).max(f64::MIN_POSITIVE)
}

fn semigroup(basis: &SpectralBasis, rng: &mut ChaCha8Rng, count: usize, t: &mut Tally) -> Result<()> {
    for _ in 0..count {
        let v = random_coeffs(rng, basis.n_modes());
        let (a, b) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let two_step = apply_fractional(basis, a, &apply_fractional(basis, b, &v)?)?;
        let one_step = apply_fractional(basis, a + b, &v)?;
        t.record(rel_diff(&two_step, &one_step), SEMIGROUP_TOL);
    }
    Ok(())
}

/// Orthonormality of the interval and rectangle bases, the semigroup law of
/// fractional powers, synthesis/analysis round trips and idempotence of the
/// kernel projection.
pub fn spectral_suite(seed: u64) -> Result<Vec<SuiteRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let bases = [
        ("interval_neumann", build_interval_basis(BasisKind::IntervalNeumann, 1.0, 64, 512)?),
        ("interval_dirichlet", build_interval_basis(BasisKind::IntervalDirichlet, 1.0, 64, 512)?),
        ("rect_neumann", build_rect_basis(BasisKind::RectNeumann, 1.0, 2.0, 32, 48)?),
        ("rect_dirichlet", build_rect_basis(BasisKind::RectDirichlet, 2.0, 1.0, 32, 48)?),
    ];
    for (name, basis) in &bases {
        let mut gram = Tally::new("spectral", &format!("{name}_gram"));
        gram.record(basis.gram_deviation(), GRAM_TOL);
        rows.push(gram.finish());

        let mut sg = Tally::new("spectral", &format!("{name}_semigroup"));
        semigroup(basis, &mut rng, 100, &mut sg)?;
        rows.push(sg.finish());

        let mut rt = Tally::new("spectral", &format!("{name}_round_trip"));
        let mut proj = Tally::new("spectral", &format!("{name}_projection_idempotent"));
        for _ in 0..20 {
            let v = random_coeffs(&mut rng, basis.n_modes());
            let back = basis.analyze(&basis.synthesize(&v)?)?;
            rt.record(rel_diff(&back, &v), 1e-12);
            let p = kernel_projection(basis, &v)?;
            let pp = kernel_projection(basis, &p)?;
            let d: Vec<f64> = pp.iter().zip(&p).map(|(a, b)| a - b).collect();
            proj.record(coeff_norm(&d), 1e-14);
        }
        rows.push(rt.finish());
        rows.push(proj.finish());
    }
    Ok(rows)
}

/// Custom table with `beta` sampled from `s^3` and `beta_hat` its
/// piecewise-quadratic antiderivative.
pub fn quartic_table() -> CustomTables {
    let nodes: Vec<f64> = (0..=16).map(|k| -2.0 + 0.25 * k as f64).collect();
    let beta: Vec<f64> = nodes.iter().map(|s| s.powi(3)).collect();
    let zero = nodes.iter().position(|&x| x == 0.0).expect("0 is a node");
    let mut beta_hat = vec![0.0; nodes.len()];
    for k in zero + 1..nodes.len() {
        beta_hat[k] = beta_hat[k - 1] + 0.5 * (nodes[k] - nodes[k - 1]) * (beta[k] + beta[k - 1]);
    }
    for k in (0..zero).rev() {
        beta_hat[k] = beta_hat[k + 1] - 0.5 * (nodes[k + 1] - nodes[k]) * (beta[k] + beta[k + 1]);
    }
    CustomTables {
        beta_hat,
        beta,
        pi: nodes.iter().map(|s| -s).collect(),
        nodes,
    }
}

/// One instance of every potential kind.
pub fn standard_potentials() -> Result<Vec<(&'static str, PotentialSpec)>> {
    Ok(vec![
        ("regular", PotentialSpec::regular()),
        ("logarithmic", PotentialSpec::logarithmic(1.5)?),
        ("double_obstacle", PotentialSpec::double_obstacle(1.0)?),
        ("custom", PotentialSpec::new(PotentialKind::Custom(quartic_table()))?),
    ])
}

/// Value of `beta` at the resolvent point, checked against the reported
/// multiplier; returns the membership error and the `beta` value used.
fn beta_at(pot: &PotentialSpec, point: f64, multiplier: f64) -> (f64, f64) {
    match pot.kind() {
        PotentialKind::Regular { .. } | PotentialKind::Custom(_) => {
            let b = pot.beta_min(point).unwrap_or(f64::NAN);
            ((b - multiplier).abs() / (1.0 + multiplier.abs()), b)
        }
        PotentialKind::Logarithmic { .. } => ((point - (0.5 * multiplier).tanh()).abs(), multiplier),
        PotentialKind::DoubleObstacle { .. } => {
            let ok = if point.abs() < 1.0 {
                multiplier == 0.0
            } else if point == 1.0 {
                multiplier >= 0.0
            } else {
                point == -1.0 && multiplier <= 0.0
            };
            (if ok { 0.0 } else { multiplier.abs().max(1.0) }, multiplier)
        }
    }
}

fn moreau_pair(pot: &PotentialSpec, eps: f64, s: f64) -> Result<(f64, f64)> {
    Ok((pot.moreau(eps, s)?, pot.beta_hat(s)))
}

/// Convex-analysis properties on `samples` random `(s, eps)` pairs per
/// potential kind, `s` uniform in `[-3, 3]` and `eps` log-uniform in
/// `[1e-4, 1]`.
pub fn potentials_suite(seed: u64, samples: usize) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    for (name, pot) in standard_potentials()? {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prop = |p: &str| Tally::new("potentials", &format!("{name}_{p}"));
        let (mut bounds, mut mono, mut minsec, mut lip, mut nonexp, mut resid) = (
            prop("moreau_bounds"),
            prop("moreau_monotone_in_eps"),
            prop("yosida_below_min_section"),
            prop("yosida_lipschitz"),
            prop("resolvent_nonexpansive"),
            prop("resolvent_residual"),
        );
        for _ in 0..samples {
            let s: f64 = rng.gen_range(-3.0..3.0);
            let eps = 10f64.powf(rng.gen_range(-4.0..0.0));
            let s2 = s + rng.gen_range(-1.0..1.0);
            let eps_small = eps * rng.gen_range(0.01..1.0);

            let (env, hat) = moreau_pair(&pot, eps, s)?;
            let over = if hat.is_finite() { (env - hat).max(0.0) / (1.0 + hat) } else { 0.0 };
            bounds.record((-env).max(0.0).max(over), 1e-12);

            let env_small = pot.moreau(eps_small, s)?;
            mono.record((env - env_small).max(0.0) / (1.0 + env.abs()), 1e-12);

            let y = pot.yosida(eps, s)?;
            let excess = match pot.beta_min(s) {
                Some(b) => (y.abs() - b.abs()).max(0.0) / (1.0 + b.abs()),
                None => 0.0,
            };
            minsec.record(excess, 1e-12);

            let y2 = pot.yosida(eps, s2)?;
            let bound = (s - s2).abs() / eps;
            lip.record(((y - y2).abs() - bound).max(0.0) / (1.0 + bound), 1e-10);

            let j = pot.resolvent(eps, s)?;
            let j2 = pot.resolvent(eps, s2)?;
            nonexp.record(((j.point - j2.point).abs() - (s - s2).abs()).max(0.0), 1e-14);

            let (membership, b) = beta_at(&pot, j.point, j.multiplier);
            resid.record((j.point + eps * b - s).abs().max(membership), RESIDUAL_TOL);
        }
        rows.extend([bounds, mono, minsec, lip, nonexp, resid].into_iter().map(Tally::finish));
    }
    Ok(rows)
}
