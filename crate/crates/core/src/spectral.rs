//! Closed-form Laplacian eigenbases on intervals and rectangles, spectral
//! fractional powers, and the quadrature transforms between coefficient space
//! and grid values.
//!
//! Every basis carries its own uniform quadrature grid (composite trapezoid,
//! half weights on boundary nodes). The orthonormality of the sampled
//! eigenfunctions under that quadrature is checked when the basis is built.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Largest tolerated `max |G - I|` of the weighted Gram matrix at build time.
pub const ORTHONORMALITY_GATE: f64 = 1e-8;

/// Geometry and boundary condition of a closed-form eigenbasis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    IntervalDirichlet,
    IntervalNeumann,
    RectDirichlet,
    RectNeumann,
}

impl BasisKind {
    pub fn is_neumann(self) -> bool {
        matches!(self, BasisKind::IntervalNeumann | BasisKind::RectNeumann)
    }

    pub fn dim(self) -> usize {
        match self {
            BasisKind::IntervalDirichlet | BasisKind::IntervalNeumann => 1,
            BasisKind::RectDirichlet | BasisKind::RectNeumann => 2,
        }
    }
}

/// Truncated eigenbasis of a nonnegative self-adjoint operator, sampled on a
/// quadrature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    kind: BasisKind,
    extent: Vec<f64>,
    eigenvalues: Vec<f64>,
    /// Per-axis 1-D mode numbers of each retained mode (second entry is 0 in 1-D).
    labels: Vec<[usize; 2]>,
    points: Vec<[f64; 2]>,
    weights: Vec<f64>,
    /// Row-major `m x n`: `values[i * n + j]` is mode `j` at node `i`.
    values: Vec<f64>,
}

/// Uniform nodes on `[0, len]` with trapezoid weights.
fn trapezoid_grid(len: f64, m: usize) -> (Vec<f64>, Vec<f64>) {
    let h = len / (m - 1) as f64;
    let nodes = (0..m).map(|i| i as f64 * h).collect();
    let weights = (0..m)
        .map(|i| if i == 0 || i == m - 1 { 0.5 * h } else { h })
        .collect();
    (nodes, weights)
}

/// One-dimensional factor: mode numbers, eigenvalues and sampled eigenfunctions.
struct Factor {
    numbers: Vec<usize>,
    eigenvalues: Vec<f64>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// `values[k][i]`: mode `k` at node `i`.
    values: Vec<Vec<f64>>,
}

fn interval_factor(neumann: bool, len: f64, count: usize, m: usize) -> Factor {
    let (nodes, weights) = trapezoid_grid(len, m);
    let first = if neumann { 0 } else { 1 };
    let numbers: Vec<usize> = (first..first + count).collect();
    let amp = (2.0 / len).sqrt();
    let eigenvalues = numbers
        .iter()
        .map(|&j| {
            let k = j as f64 * PI / len;
            k * k
        })
        .collect();
    let values = numbers
        .iter()
        .map(|&j| {
            nodes
                .iter()
                .map(|&x| {
                    let arg = j as f64 * PI * x / len;
                    if neumann {
                        if j == 0 {
                            1.0 / len.sqrt()
                        } else {
                            amp * arg.cos()
                        }
                    } else {
                        amp * arg.sin()
                    }
                })
                .collect()
        })
        .collect();
    Factor {
        numbers,
        eigenvalues,
        nodes,
        weights,
        values,
    }
}

fn check_extent(len: f64, axis: &str) -> Result<()> {
    if !(len.is_finite() && len > 0.0) {
        return Err(Error::invalid(format!(
            "domain length along {axis} must be positive and finite, got {len}"
        )));
    }
    Ok(())
}

fn check_grid(n_needed: usize, m_grid: usize) -> Result<()> {
    if m_grid < 4 * n_needed {
        return Err(Error::invalid(format!(
            "m_grid = {m_grid} is below the anti-aliasing floor 4 * {n_needed}"
        )));
    }
    Ok(())
}

/// Builds the Neumann or Dirichlet Laplacian basis on `(0, len)`.
pub fn build_interval_basis(
    kind: BasisKind,
    len: f64,
    n_modes: usize,
    m_grid: usize,
) -> Result<SpectralBasis> {
    if kind.dim() != 1 {
        return Err(Error::invalid(format!("{kind:?} is not an interval basis")));
    }
    if n_modes == 0 {
        return Err(Error::invalid("n_modes must be at least 1"));
    }
    check_extent(len, "x")?;
    check_grid(n_modes, m_grid)?;

    let f = interval_factor(kind.is_neumann(), len, n_modes, m_grid);
    let mut values = vec![0.0; m_grid * n_modes];
    for (j, col) in f.values.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            values[i * n_modes + j] = *v;
        }
    }
    let basis = SpectralBasis {
        kind,
        extent: vec![len],
        eigenvalues: f.eigenvalues,
        labels: f.numbers.iter().map(|&j| [j, 0]).collect(),
        points: f.nodes.iter().map(|&x| [x, 0.0]).collect(),
        weights: f.weights,
        values,
    };
    basis.orthonormality_gate()?;
    Ok(basis)
}

/// Builds the tensor-product basis on `(0, lx) x (0, ly)`, keeping the
/// `n_modes` smallest eigenvalues (ties broken lexicographically on the
/// per-axis mode numbers). `m_grid` is the node count per axis.
pub fn build_rect_basis(
    kind: BasisKind,
    lx: f64,
    ly: f64,
    n_modes: usize,
    m_grid: usize,
) -> Result<SpectralBasis> {
    if kind.dim() != 2 {
        return Err(Error::invalid(format!("{kind:?} is not a rectangle basis")));
    }
    if n_modes == 0 {
        return Err(Error::invalid("n_modes must be at least 1"));
    }
    check_extent(lx, "x")?;
    check_extent(ly, "y")?;
    let neumann = kind.is_neumann();

    // n candidates per axis always cover the n smallest tensor eigenvalues.
    let fx = interval_factor(neumann, lx, n_modes, 2);
    let fy = interval_factor(neumann, ly, n_modes, 2);
    let mut cand: Vec<(f64, usize, usize)> = Vec::with_capacity(n_modes * n_modes);
    for (a, lam_x) in fx.eigenvalues.iter().enumerate() {
        for (b, lam_y) in fy.eigenvalues.iter().enumerate() {
            cand.push((lam_x + lam_y, a, b));
        }
    }
    cand.sort_by(|p, q| {
        let scale = p.0.abs().max(q.0.abs()).max(1.0);
        if (p.0 - q.0).abs() <= 1e-12 * scale {
            (p.1, p.2).cmp(&(q.1, q.2))
        } else {
            p.0.total_cmp(&q.0)
        }
    });
    cand.truncate(n_modes);

    let need_x = cand.iter().map(|c| c.1 + 1).max().unwrap_or(1);
    let need_y = cand.iter().map(|c| c.2 + 1).max().unwrap_or(1);
    check_grid(need_x.max(need_y), m_grid)?;

    let fx = interval_factor(neumann, lx, need_x, m_grid);
    let fy = interval_factor(neumann, ly, need_y, m_grid);
    let m = m_grid * m_grid;
    let mut points = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    for ix in 0..m_grid {
        for iy in 0..m_grid {
            points.push([fx.nodes[ix], fy.nodes[iy]]);
            weights.push(fx.weights[ix] * fy.weights[iy]);
        }
    }
    let mut values = vec![0.0; m * n_modes];
    for (j, &(_, a, b)) in cand.iter().enumerate() {
        for ix in 0..m_grid {
            for iy in 0..m_grid {
                values[(ix * m_grid + iy) * n_modes + j] = fx.values[a][ix] * fy.values[b][iy];
            }
        }
    }
    let basis = SpectralBasis {
        kind,
        extent: vec![lx, ly],
        eigenvalues: cand.iter().map(|c| c.0).collect(),
        labels: cand
            .iter()
            .map(|&(_, a, b)| [fx.numbers[a], fy.numbers[b]])
            .collect(),
        points,
        weights,
        values,
    };
    basis.orthonormality_gate()?;
    Ok(basis)
}

impl SpectralBasis {
    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn extent(&self) -> &[f64] {
        &self.extent
    }

    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n_points(&self) -> usize {
        self.weights.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Per-axis mode numbers `[j, k]` (k = 0 for intervals).
    pub fn labels(&self) -> &[[usize; 2]] {
        &self.labels
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Measure of the domain.
    pub fn measure(&self) -> f64 {
        self.extent.iter().product()
    }

    /// Eigenfunction `mode` evaluated at grid node `node`.
    pub fn value(&self, node: usize, mode: usize) -> f64 {
        self.values[node * self.n_modes() + mode]
    }

    /// Eigenfunction `mode` evaluated at an arbitrary point of the domain.
    pub fn eval_mode(&self, mode: usize, x: [f64; 2]) -> f64 {
        let neumann = self.kind.is_neumann();
        let factor = |j: usize, len: f64, s: f64| -> f64 {
            if neumann && j == 0 {
                1.0 / len.sqrt()
            } else if neumann {
                (2.0 / len).sqrt() * (j as f64 * PI * s / len).cos()
            } else {
                (2.0 / len).sqrt() * (j as f64 * PI * s / len).sin()
            }
        };
        let [j, k] = self.labels[mode];
        match self.kind.dim() {
            1 => factor(j, self.extent[0], x[0]),
            _ => factor(j, self.extent[0], x[0]) * factor(k, self.extent[1], x[1]),
        }
    }

    /// Same geometry and quadrature grid (needed to couple two bases).
    pub fn shares_grid_with(&self, other: &SpectralBasis) -> bool {
        self.kind.dim() == other.kind.dim()
            && self.extent == other.extent
            && self.points == other.points
            && self.weights == other.weights
    }

    /// `max |G - I|` for the weighted Gram matrix of the sampled eigenfunctions.
    pub fn gram_deviation(&self) -> f64 {
        let n = self.n_modes();
        let mut worst = 0.0_f64;
        for a in 0..n {
            for b in a..n {
                let g: f64 = self
                    .weights
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w * self.value(i, a) * self.value(i, b))
                    .sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((g - target).abs());
            }
        }
        worst
    }

    fn orthonormality_gate(&self) -> Result<()> {
        let max_dev = self.gram_deviation();
        if max_dev > ORTHONORMALITY_GATE || !max_dev.is_finite() {
            return Err(Error::Orthonormality {
                max_dev,
                tol: ORTHONORMALITY_GATE,
            });
        }
        Ok(())
    }

    fn check_coeffs(&self, coeffs: &[f64]) -> Result<()> {
        if coeffs.len() != self.n_modes() {
            return Err(Error::LengthMismatch {
                expected: self.n_modes(),
                got: coeffs.len(),
            });
        }
        Ok(())
    }

    /// Coefficients to grid values.
    pub fn synthesize(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        self.check_coeffs(coeffs)?;
        if let Some(j) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("coefficient {j} = {}", coeffs[j])));
        }
        let n = self.n_modes();
        Ok(self
            .values
            .chunks_exact(n)
            .map(|row| row.iter().zip(coeffs).map(|(e, c)| e * c).sum())
            .collect())
    }

    /// Grid values to coefficients: `c_j = sum_i w_i v_i e_j(x_i)`.
    pub fn analyze(&self, grid: &[f64]) -> Result<Vec<f64>> {
        if grid.len() != self.n_points() {
            return Err(Error::LengthMismatch {
                expected: self.n_points(),
                got: grid.len(),
            });
        }
        if let Some(i) = grid.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "grid value at node {i} = {}",
                grid[i]
            )));
        }
        let n = self.n_modes();
        let mut out = vec![0.0; n];
        for ((row, w), v) in self.values.chunks_exact(n).zip(&self.weights).zip(grid) {
            let wv = w * v;
            for (o, e) in out.iter_mut().zip(row) {
                *o += wv * e;
            }
        }
        Ok(out)
    }

    /// Weighted grid inner product `(u, v)`.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(u.iter().zip(v))
            .map(|(w, (a, b))| w * a * b)
            .sum()
    }

    pub fn grid_norm(&self, u: &[f64]) -> f64 {
        self.inner(u, u).sqrt()
    }

    /// Fractional power `A^exponent` of this basis' operator.
    pub fn power(&self, exponent: f64) -> Result<FractionalPower<'_>> {
        FractionalPower::new(self, exponent)
    }
}

/// Spectral fractional power: acts by `lambda_j^exponent` on mode `j`, with
/// `0^exponent = 0`.
#[derive(Debug, Clone, Copy)]
pub struct FractionalPower<'a> {
    basis: &'a SpectralBasis,
    exponent: f64,
}

/// `lambda^rho` with the convention `0^rho = 0`.
pub fn eigen_power(lambda: f64, rho: f64) -> f64 {
    if lambda == 0.0 {
        0.0
    } else {
        lambda.powf(rho)
    }
}

impl<'a> FractionalPower<'a> {
    pub fn new(basis: &'a SpectralBasis, exponent: f64) -> Result<Self> {
        if !(exponent.is_finite() && exponent > 0.0) {
            return Err(Error::invalid(format!(
                "fractional exponent must be positive, got {exponent}"
            )));
        }
        Ok(FractionalPower { basis, exponent })
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn multipliers(&self) -> Vec<f64> {
        self.basis
            .eigenvalues
            .iter()
            .map(|&l| eigen_power(l, self.exponent))
            .collect()
    }

    pub fn apply(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        self.basis.check_coeffs(coeffs)?;
        Ok(self
            .basis
            .eigenvalues
            .iter()
            .zip(coeffs)
            .map(|(&l, c)| eigen_power(l, self.exponent) * c)
            .collect())
    }
}

/// `A^exponent` applied to a coefficient vector.
pub fn apply_fractional(basis: &SpectralBasis, exponent: f64, coeffs: &[f64]) -> Result<Vec<f64>> {
    FractionalPower::new(basis, exponent)?.apply(coeffs)
}

/// H-orthogonal projection onto the kernel: keeps zero-eigenvalue modes only.
pub fn kernel_projection(basis: &SpectralBasis, coeffs: &[f64]) -> Result<Vec<f64>> {
    basis.check_coeffs(coeffs)?;
    Ok(basis
        .eigenvalues
        .iter()
        .zip(coeffs)
        .map(|(&l, &c)| if l > 0.0 { 0.0 } else { c })
        .collect())
}

/// Graph norm of `D(A^exponent)`: `(|c|^2 + |A^exponent c|^2)^(1/2)`.
pub fn graph_norm(basis: &SpectralBasis, exponent: f64, coeffs: &[f64]) -> Result<f64> {
    let frac = apply_fractional(basis, exponent, coeffs)?;
    let s: f64 = coeffs.iter().map(|c| c * c).sum::<f64>() + frac.iter().map(|c| c * c).sum::<f64>();
    Ok(s.sqrt())
}

/// Euclidean norm of a coefficient vector (the H norm for orthonormal bases).
pub fn coeff_norm(coeffs: &[f64]) -> f64 {
    coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn neumann(n: usize) -> SpectralBasis {
        build_interval_basis(BasisKind::IntervalNeumann, 1.0, n, 8 * n).unwrap()
    }

    #[test]
    fn neumann_spectrum_unit_interval() {
        let b = build_interval_basis(BasisKind::IntervalNeumann, 1.0, 3, 24).unwrap();
        let pi2 = PI * PI;
        assert_eq!(b.eigenvalues()[0], 0.0);
        assert_abs_diff_eq!(b.eigenvalues()[1], pi2, epsilon = 1e-12);
        assert_abs_diff_eq!(b.eigenvalues()[2], 4.0 * pi2, epsilon = 1e-12);
    }

    #[test]
    fn dirichlet_spectrum_and_value() {
        // odd node count puts a node at x = 0.5
        let b = build_interval_basis(BasisKind::IntervalDirichlet, 1.0, 2, 9).unwrap();
        assert_abs_diff_eq!(b.eigenvalues()[0], PI * PI, epsilon = 1e-12);
        assert_abs_diff_eq!(b.eigenvalues()[1], 4.0 * PI * PI, epsilon = 1e-12);
        assert_abs_diff_eq!(b.points()[4][0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(b.value(4, 0), 2f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn neumann_constant_mode_on_length_two() {
        let b = build_interval_basis(BasisKind::IntervalNeumann, 2.0, 1, 8).unwrap();
        assert_eq!(b.eigenvalues(), &[0.0]);
        for i in 0..b.n_points() {
            assert_abs_diff_eq!(b.value(i, 0), 1.0 / 2f64.sqrt(), epsilon = 1e-15);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_interval_basis(BasisKind::IntervalNeumann, 0.0, 3, 24).is_err());
        assert!(build_interval_basis(BasisKind::IntervalNeumann, -1.0, 3, 24).is_err());
        assert!(build_interval_basis(BasisKind::IntervalNeumann, 1.0, 8, 31).is_err());
        assert!(build_interval_basis(BasisKind::IntervalNeumann, 1.0, 0, 31).is_err());
        assert!(build_interval_basis(BasisKind::RectNeumann, 1.0, 2, 31).is_err());
    }

    #[test]
    fn rect_spectra() {
        let pi2 = PI * PI;
        let b = build_rect_basis(BasisKind::RectNeumann, 1.0, 1.0, 4, 16).unwrap();
        let e = b.eigenvalues();
        assert_eq!(e[0], 0.0);
        assert_abs_diff_eq!(e[1], pi2, epsilon = 1e-12);
        assert_abs_diff_eq!(e[2], pi2, epsilon = 1e-12);
        assert_abs_diff_eq!(e[3], 2.0 * pi2, epsilon = 1e-12);
        // tie (0,1) vs (1,0): lexicographic
        assert_eq!(b.labels()[1], [0, 1]);
        assert_eq!(b.labels()[2], [1, 0]);

        let d = build_rect_basis(BasisKind::RectDirichlet, 1.0, 1.0, 1, 8).unwrap();
        assert_abs_diff_eq!(d.eigenvalues()[0], 2.0 * pi2, epsilon = 1e-12);

        let t = build_rect_basis(BasisKind::RectNeumann, 1.0, 2.0, 2, 8).unwrap();
        assert_eq!(t.eigenvalues()[0], 0.0);
        assert_abs_diff_eq!(t.eigenvalues()[1], (PI / 2.0).powi(2), epsilon = 1e-12);
        assert_eq!(t.labels()[1], [0, 1]);
        assert!(t.gram_deviation() < 1e-12);
    }

    #[test]
    fn fractional_examples() {
        let b = neumann(4);
        let mut c = vec![0.0; 4];
        c[1] = 1.0;
        let out = apply_fractional(&b, 0.5, &c).unwrap();
        assert_abs_diff_eq!(out[1], PI, epsilon = 1e-12);

        let mut k = vec![0.0; 4];
        k[0] = 1.0;
        assert_eq!(apply_fractional(&b, 0.3, &k).unwrap(), vec![0.0; 4]);
        assert!(apply_fractional(&b, 0.5, &[1.0]).is_err());
        assert!(apply_fractional(&b, 0.0, &c).is_err());
    }

    #[test]
    fn kernel_projection_examples() {
        let b = neumann(4);
        assert_eq!(
            kernel_projection(&b, &[1.0, 1.0, 0.0, 0.0]).unwrap(),
            vec![1.0, 0.0, 0.0, 0.0]
        );
        let d = build_interval_basis(BasisKind::IntervalDirichlet, 1.0, 4, 32).unwrap();
        assert_eq!(kernel_projection(&d, &[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.0; 4]);

        let x: Vec<f64> = b.points().iter().map(|p| p[0]).collect();
        let c = b.analyze(&x).unwrap();
        let v = b.synthesize(&kernel_projection(&b, &c).unwrap()).unwrap();
        for vi in v {
            assert_abs_diff_eq!(vi, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn transforms() {
        let b = neumann(8);
        let mut c = vec![0.0; 8];
        c[1] = 1.0;
        let back = b.analyze(&b.synthesize(&c).unwrap()).unwrap();
        for (j, v) in back.iter().enumerate() {
            assert_abs_diff_eq!(*v, c[j], epsilon = 1e-12);
        }

        let constant = vec![2.5; b.n_points()];
        let cc = b.analyze(&constant).unwrap();
        assert_abs_diff_eq!(cc[0], 2.5, epsilon = 1e-12);
        assert!(cc[1..].iter().all(|v| v.abs() < 1e-12));

        let cos3: Vec<f64> = b.points().iter().map(|p| (3.0 * PI * p[0]).cos()).collect();
        let c3 = b.analyze(&cos3).unwrap();
        assert_abs_diff_eq!(c3[3], 1.0 / 2f64.sqrt(), epsilon = 1e-12);
        for (j, v) in c3.iter().enumerate() {
            if j != 3 {
                assert!(v.abs() < 1e-12);
            }
        }

        let mut bad = constant.clone();
        bad[3] = f64::NAN;
        assert!(matches!(b.analyze(&bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn graph_norm_examples() {
        let b = neumann(3);
        assert_eq!(graph_norm(&b, 0.5, &[0.0; 3]).unwrap(), 0.0);
        assert_abs_diff_eq!(graph_norm(&b, 0.7, &[1.0, 0.0, 0.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            graph_norm(&b, 1.0, &[0.0, 1.0, 0.0]).unwrap(),
            (1.0 + PI.powi(4)).sqrt(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn eval_mode_matches_grid() {
        let b = build_rect_basis(BasisKind::RectDirichlet, 1.0, 1.5, 5, 20).unwrap();
        for node in [0, 7, 45, 133] {
            for mode in 0..5 {
                assert_abs_diff_eq!(
                    b.eval_mode(mode, b.points()[node]),
                    b.value(node, mode),
                    epsilon = 1e-14
                );
            }
        }
    }
}
