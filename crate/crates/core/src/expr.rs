//! Built-in vocabulary for initial data and sources: constants, trigonometric
//! products, monomials, Gaussians, exact eigenfunctions, each optionally
//! multiplied by a time exponential. Sampled on a basis' quadrature grid.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::spectral::SpectralBasis;

/// One spatial term. `kx`, `ky` are half-wavenumbers relative to the domain,
/// i.e. `cos(kx pi x / Lx)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Term {
    Const {
        value: f64,
    },
    /// `amp cos(kx pi x/Lx) cos(ky pi y/Ly)`.
    Cos {
        amp: f64,
        kx: f64,
        #[serde(default)]
        ky: f64,
    },
    /// `amp sin(kx pi x/Lx)`, times `sin(ky pi y/Ly)` when `ky` is given.
    Sin {
        amp: f64,
        kx: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ky: Option<f64>,
    },
    /// `amp x^px y^py`.
    Monomial {
        amp: f64,
        px: u32,
        #[serde(default)]
        py: u32,
    },
    /// `amp exp(-|x - center|^2 / (2 width^2))`.
    Gaussian {
        amp: f64,
        center: Vec<f64>,
        width: f64,
    },
    /// `amp` times eigenfunction `index` of the basis the field is sampled on.
    Mode { amp: f64, index: usize },
}

/// A term with an optional time factor `exp(-decay t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedTerm {
    #[serde(flatten)]
    pub term: Term,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub decay: f64,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

impl From<Term> for TimedTerm {
    fn from(term: Term) -> Self {
        TimedTerm { term, decay: 0.0 }
    }
}

/// A scalar field: a sum of terms or raw samples on the quadrature grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Field {
    Terms(Vec<TimedTerm>),
    Samples { samples: Vec<f64> },
}

impl Default for Field {
    fn default() -> Self {
        Field::Terms(Vec::new())
    }
}

impl Field {
    pub fn zero() -> Self {
        Field::default()
    }

    pub fn from_terms(terms: impl IntoIterator<Item = Term>) -> Self {
        Field::Terms(terms.into_iter().map(TimedTerm::from).collect())
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Field::Terms(t) => t.is_empty(),
            Field::Samples { samples } => samples.iter().all(|v| *v == 0.0),
        }
    }

    /// Values at the quadrature nodes of `basis` at time `t`.
    pub fn sample(&self, basis: &SpectralBasis, t: f64) -> Result<Vec<f64>> {
        match self {
            Field::Samples { samples } => {
                if samples.len() != basis.n_points() {
                    return Err(Error::LengthMismatch {
                        expected: basis.n_points(),
                        got: samples.len(),
                    });
                }
                Ok(samples.clone())
            }
            Field::Terms(terms) => {
                let mut out = vec![0.0; basis.n_points()];
                for tt in terms {
                    let factor = (-tt.decay * t).exp();
                    for (o, p) in out.iter_mut().zip(basis.points()) {
                        *o += factor * eval_term(&tt.term, basis, *p)?;
                    }
                }
                if out.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("sampled field".into()));
                }
                Ok(out)
            }
        }
    }
}

fn eval_term(term: &Term, basis: &SpectralBasis, p: [f64; 2]) -> Result<f64> {
    let ext = basis.extent();
    let lx = ext[0];
    let ly = ext.get(1).copied().unwrap_or(1.0);
    let two_d = ext.len() == 2;
    Ok(match term {
        Term::Const { value } => *value,
        Term::Cos { amp, kx, ky } => {
            let y = if two_d { (ky * PI * p[1] / ly).cos() } else { 1.0 };
            amp * (kx * PI * p[0] / lx).cos() * y
        }
        Term::Sin { amp, kx, ky } => {
            let y = match (two_d, ky) {
                (true, Some(ky)) => (ky * PI * p[1] / ly).sin(),
                _ => 1.0,
            };
            amp * (kx * PI * p[0] / lx).sin() * y
        }
        Term::Monomial { amp, px, py } => {
            let y = if two_d { p[1].powi(*py as i32) } else { 1.0 };
            amp * p[0].powi(*px as i32) * y
        }
        Term::Gaussian { amp, center, width } => {
            if *width <= 0.0 {
                return Err(Error::invalid("gaussian width must be positive"));
            }
            let d2: f64 = center
                .iter()
                .zip(p.iter())
                .take(ext.len())
                .map(|(c, x)| (x - c) * (x - c))
                .sum();
            amp * (-d2 / (2.0 * width * width)).exp()
        }
        Term::Mode { amp, index } => {
            if *index >= basis.n_modes() {
                return Err(Error::invalid(format!(
                    "mode index {index} out of range (n_modes = {})",
                    basis.n_modes()
                )));
            }
            amp * basis.eval_mode(*index, p)
        }
    })
}
