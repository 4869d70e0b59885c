//! Homogeneous conics in the image plane.
//!
//! A conic is stored as the six independent entries of a symmetric 3x3 matrix
//!
//! ```text
//!     | A    B/2  D/2 |
//! M = | B/2  C    E/2 |      u^T M u = A u² + B uv + C v² + D u + E v + F
//!     | D/2  E/2  F   |
//! ```
//!
//! and partitioned into the blocks `C11` (upper-left 2x2), `C12` (upper-right
//! 2x1) and `C22` (bottom-right scalar). Image coordinates are pixels.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{
    Matrix2, Matrix3, Matrix5, Matrix6, Point2, SymmetricEigen, Vector2, Vector5, Vector6,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum number of points that determines a conic.
pub const MIN_POINTS: usize = 6;

/// Symmetric homogeneous conic matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conic {
    // m00, m01, m02, m11, m12, m22
    m: [f64; 6],
}

impl Conic {
    /// Builds a conic from the algebraic coefficients of
    /// `A u² + B uv + C v² + D u + E v + F = 0`.
    pub fn from_coeffs(a: f64, b: f64, c: f64, d: f64, e: f64, f: f64) -> Result<Self> {
        let coeffs = [a, b, c, d, e, f];
        if coeffs.iter().all(|&x| x == 0.0) {
            return Err(Error::DegenerateConic(
                "all six coefficients are zero".into(),
            ));
        }
        if coeffs.iter().any(|x| !x.is_finite()) {
            return Err(Error::DegenerateConic("non-finite coefficient".into()));
        }
        Ok(Self {
            m: [a, 0.5 * b, 0.5 * d, c, 0.5 * e, f],
        })
    }

    /// Builds a conic from a 3x3 matrix. The off-diagonal pairs are averaged,
    /// so slightly asymmetric inputs are symmetrized.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Self {
            m: [
                m[(0, 0)],
                0.5 * (m[(0, 1)] + m[(1, 0)]),
                0.5 * (m[(0, 2)] + m[(2, 0)]),
                m[(1, 1)],
                0.5 * (m[(1, 2)] + m[(2, 1)]),
                m[(2, 2)],
            ],
        }
    }

    /// Builds a conic from a row-major 3x3 array.
    pub fn from_rows(rows: &[[f64; 3]; 3]) -> Self {
        Self::from_matrix(&Matrix3::from_fn(|i, j| rows[i][j]))
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let [m00, m01, m02, m11, m12, m22] = self.m;
        Matrix3::new(m00, m01, m02, m01, m11, m12, m02, m12, m22)
    }

    pub fn to_rows(&self) -> [[f64; 3]; 3] {
        let m = self.matrix();
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    /// Coefficients `(A, B, C, D, E, F)`.
    pub fn coeffs(&self) -> [f64; 6] {
        let [m00, m01, m02, m11, m12, m22] = self.m;
        [m00, 2.0 * m01, m11, 2.0 * m02, 2.0 * m12, m22]
    }

    pub fn c11(&self) -> Matrix2<f64> {
        Matrix2::new(self.m[0], self.m[1], self.m[1], self.m[3])
    }

    pub fn c12(&self) -> Vector2<f64> {
        Vector2::new(self.m[2], self.m[4])
    }

    pub fn c22(&self) -> f64 {
        self.m[5]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            m: self.m.map(|x| k * x),
        }
    }

    pub fn det(&self) -> f64 {
        let [a, b, c, d, e, f] = self.m;
        // a b c / b d e / c e f
        a * (d * f - e * e) - b * (b * f - e * c) + c * (b * e - d * c)
    }

    pub fn det11(&self) -> f64 {
        self.m[0] * self.m[3] - self.m[1] * self.m[1]
    }

    pub fn trace11(&self) -> f64 {
        self.m[0] + self.m[3]
    }

    /// Frobenius norm of the full symmetric matrix.
    pub fn norm(&self) -> f64 {
        let [a, b, c, d, e, f] = self.m;
        (a * a + d * d + f * f + 2.0 * (b * b + c * c + e * e)).sqrt()
    }

    /// Evaluates `ū^T M ū` at pixel `(u, v)`.
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        let [a, b, c, d, e, f] = self.m;
        a * u * u + 2.0 * b * u * v + d * v * v + 2.0 * c * u + 2.0 * e * v + f
    }

    /// Returns `T^T M T`.
    pub fn congruence(&self, t: &Matrix3<f64>) -> Self {
        Self::from_matrix(&(t.transpose() * self.matrix() * t))
    }

    /// Scales to unit Frobenius norm with `A + C > 0` (when `A + C` is nonzero).
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n == 0.0 {
            return *self;
        }
        let sign = if self.trace11() < 0.0 { -1.0 } else { 1.0 };
        self.scaled(sign / n)
    }

    /// Value of the conic at the center of its upper-left block,
    /// `C22 - C12^T C11^{-1} C12`, i.e. `det(M) / det(C11)`.
    fn center_value(&self) -> Option<(Vector2<f64>, f64, f64)> {
        let det11 = self.det11();
        if det11 == 0.0 || !det11.is_finite() {
            return None;
        }
        let [a, b, _, d, _, _] = self.m;
        let c12 = self.c12();
        // -C11^{-1} C12
        let center = -Vector2::new(d * c12.x - b * c12.y, -b * c12.x + a * c12.y) / det11;
        let quad = -c12.dot(&center);
        Some((center, self.c22() - quad, quad))
    }

    /// True when the conic is a real, non-degenerate ellipse.
    pub fn is_ellipse(&self) -> bool {
        if !(self.det11() > 0.0) {
            return false;
        }
        let Some((_, value, quad)) = self.center_value() else {
            return false;
        };
        let scale = self.c22().abs() + quad.abs();
        if !(value.abs() > 1e-12 * scale) {
            return false;
        }
        // After making C11 positive definite the center must lie inside.
        self.trace11().signum() * value < 0.0
    }

    /// Geometric parameters of a real ellipse.
    pub fn ellipse_params(&self) -> Result<EllipseParams> {
        if !self.is_ellipse() {
            return Err(Error::NotEllipse(format!(
                "det(C11) = {:e}, det(M) = {:e}",
                self.det11(),
                self.det()
            )));
        }
        let (center, value, _) = self.center_value().expect("checked by is_ellipse");
        // (x - c)^T (C11 / -value) (x - c) = 1
        let q = self.c11() / -value;
        let (p, h, r) = (q[(0, 0)], q[(0, 1)], q[(1, 1)]);
        let mean = 0.5 * (p + r);
        let half_diff = 0.5 * (p - r);
        let rad = half_diff.hypot(h);
        let lambda_min = mean - rad;
        let lambda_max = mean + rad;
        let orientation = 0.5 * (-2.0 * h).atan2(r - p);
        EllipseParams::new(
            Point2::new(center.x, center.y),
            1.0 / lambda_min.sqrt(),
            1.0 / lambda_max.sqrt(),
            orientation,
        )
    }
}

/// Classification helper mirroring [`Conic::is_ellipse`].
pub fn is_ellipse(c: &Conic) -> bool {
    c.is_ellipse()
}

/// Center, semi-axes (pixels) and major-axis orientation (radians,
/// counter-clockwise from +u, in `(-π/2, π/2]`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseParams {
    pub center: Point2<f64>,
    pub semi_major: f64,
    pub semi_minor: f64,
    pub orientation: f64,
}

/// Angular range of eccentric anomaly, radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arc {
    pub start: f64,
    pub sweep: f64,
}

impl Arc {
    pub const FULL: Arc = Arc {
        start: 0.0,
        sweep: 2.0 * PI,
    };

    pub fn new(start: f64, sweep: f64) -> Self {
        Self { start, sweep }
    }

    pub fn from_degrees(start_deg: f64, sweep_deg: f64) -> Self {
        Self::new(start_deg.to_radians(), sweep_deg.to_radians())
    }
}

impl Default for Arc {
    fn default() -> Self {
        Self::FULL
    }
}

impl EllipseParams {
    /// Validates and canonicalizes: swaps axes if needed and wraps the
    /// orientation into `(-π/2, π/2]`.
    pub fn new(
        center: Point2<f64>,
        semi_major: f64,
        semi_minor: f64,
        orientation: f64,
    ) -> Result<Self> {
        if !(semi_major > 0.0 && semi_minor > 0.0)
            || !semi_major.is_finite()
            || !semi_minor.is_finite()
        {
            return Err(Error::NotEllipse(format!(
                "semi-axes must be positive and finite, got ({semi_major}, {semi_minor})"
            )));
        }
        let (semi_major, semi_minor, orientation) = if semi_minor > semi_major {
            (semi_minor, semi_major, orientation + 0.5 * PI)
        } else {
            (semi_major, semi_minor, orientation)
        };
        Ok(Self {
            center,
            semi_major,
            semi_minor,
            orientation: wrap_half_turn(orientation),
        })
    }

    /// Conic with interior negative, normalized to `C22 - C12^T C11^{-1} C12 = -1`.
    pub fn to_conic(&self) -> Conic {
        let (s, c) = self.orientation.sin_cos();
        let rot = Matrix2::new(c, -s, s, c);
        let diag = Matrix2::new(
            1.0 / (self.semi_major * self.semi_major),
            0.0,
            0.0,
            1.0 / (self.semi_minor * self.semi_minor),
        );
        let c11 = rot * diag * rot.transpose();
        let center = Vector2::new(self.center.x, self.center.y);
        let c12 = -(c11 * center);
        let c22 = center.dot(&(c11 * center)) - 1.0;
        Conic::from_matrix(&Matrix3::new(
            c11[(0, 0)],
            c11[(0, 1)],
            c12.x,
            c11[(1, 0)],
            c11[(1, 1)],
            c12.y,
            c12.x,
            c12.y,
            c22,
        ))
    }

    /// Point at eccentric anomaly `t`.
    pub fn point_at(&self, t: f64) -> Point2<f64> {
        let (st, ct) = t.sin_cos();
        let (so, co) = self.orientation.sin_cos();
        let x = self.semi_major * ct;
        let y = self.semi_minor * st;
        Point2::new(
            self.center.x + co * x - so * y,
            self.center.y + so * x + co * y,
        )
    }

    /// `count` points at uniformly spaced eccentric anomalies over the
    /// half-open interval `[arc.start, arc.start + arc.sweep)`.
    pub fn sample_points(&self, count: usize, arc: Arc) -> Result<Vec<Point2<f64>>> {
        if count < MIN_POINTS {
            return Err(Error::InsufficientPoints {
                got: count,
                need: MIN_POINTS,
            });
        }
        let step = arc.sweep / count as f64;
        Ok((0..count)
            .map(|i| self.point_at(arc.start + step * i as f64))
            .collect())
    }
}

fn wrap_half_turn(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(PI);
    if a > 0.5 * PI {
        a -= PI;
    }
    a
}

/// Normalization used by [`fit_conic`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    /// Taubin gradient-weight normalization.
    #[default]
    Taubin,
    /// Taubin weight plus the second-order bias term `2 S[ξ e^T]`,
    /// `e = (1, 0, 1, 0, 0, 0)`.
    SemiHyper,
}

/// Algebraic conic fit.
///
/// Minimizes `Σ (ξ_i·θ)²` with `ξ = (u², uv, v², u, v, 1)` subject to the
/// normalization selected by `method`. Points are centered and scaled to RMS
/// radius √2 before fitting. The returned conic has `‖θ‖ = 1` and `A + C > 0`.
pub fn fit_conic(points: &[Point2<f64>], method: FitMethod) -> Result<Conic> {
    if points.len() < MIN_POINTS {
        return Err(Error::InsufficientPoints {
            got: points.len(),
            need: MIN_POINTS,
        });
    }
    if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::DegenerateData("non-finite point coordinate".into()));
    }

    let n = points.len() as f64;
    let (cu, cv) = points
        .iter()
        .fold((0.0, 0.0), |(su, sv), p| (su + p.x, sv + p.y));
    let (cu, cv) = (cu / n, cv / n);
    let mean_sq = points
        .iter()
        .map(|p| (p.x - cu).powi(2) + (p.y - cv).powi(2))
        .sum::<f64>()
        / n;
    if !(mean_sq > 0.0) {
        return Err(Error::DegenerateData("all points coincide".into()));
    }
    let k = (2.0 / mean_sq).sqrt();
    let scaled: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (k * (p.x - cu), k * (p.y - cv)))
        .collect();

    let theta = match method {
        FitMethod::Taubin => fit_taubin(&scaled)?,
        FitMethod::SemiHyper => fit_semi_hyper(&scaled)?,
    };
    let normalized = Conic::from_coeffs(theta[0], theta[1], theta[2], theta[3], theta[4], theta[5])
        .map_err(|e| Error::DegenerateData(e.to_string()))?;

    // ū_n = H ū  =>  C = H^T C_n H
    let h = Matrix3::new(k, 0.0, -k * cu, 0.0, k, -k * cv, 0.0, 0.0, 1.0);
    let conic = coeff_normalized(&normalized.congruence(&h));

    if !conic.is_ellipse() {
        return Err(Error::NonEllipticalFit(format!(
            "det(C11) = {:e}, det(C) = {:e}",
            conic.det11(),
            conic.det()
        )));
    }
    Ok(conic)
}

/// Scales to `‖(A, B, C, D, E, F)‖ = 1` with `A + C > 0`.
fn coeff_normalized(c: &Conic) -> Conic {
    let theta = c.coeffs();
    let n = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sign = if theta[0] + theta[2] < 0.0 { -1.0 } else { 1.0 };
    c.scaled(sign / n)
}

fn carrier(x: f64, y: f64) -> Vector6<f64> {
    Vector6::new(x * x, x * y, y * y, x, y, 1.0)
}

/// Sum of `∂ξ/∂u ∂ξ/∂u^T + ∂ξ/∂v ∂ξ/∂v^T`.
fn gradient_weight(x: f64, y: f64) -> Matrix6<f64> {
    let gu = Vector6::new(2.0 * x, y, 0.0, 1.0, 0.0, 0.0);
    let gv = Vector6::new(0.0, x, 2.0 * y, 0.0, 1.0, 0.0);
    gu * gu.transpose() + gv * gv.transpose()
}

fn check_rank(sorted_eigs: &[f64], what: &str) -> Result<()> {
    // Only one conic through the data: the second-smallest eigenvalue must be
    // well away from zero.
    let max = sorted_eigs.last().copied().unwrap_or(0.0);
    if !(sorted_eigs[1] > 1e-10 * max) {
        return Err(Error::DegenerateData(format!(
            "{what} is rank deficient (eigenvalues {:e} / {:e})",
            sorted_eigs[1], max
        )));
    }
    Ok(())
}

/// The constant term is eliminated (`F = -mean(ξ₅)·a`), leaving a 5x5
/// problem whose Taubin matrix is positive definite for non-degenerate data.
fn fit_taubin(points: &[(f64, f64)]) -> Result<[f64; 6]> {
    let n = points.len() as f64;
    let z: Vec<Vector5<f64>> = points
        .iter()
        .map(|&(x, y)| Vector5::new(x * x, x * y, y * y, x, y))
        .collect();
    let zbar = z.iter().fold(Vector5::zeros(), |acc, v| acc + v) / n;
    let mut scatter = Matrix5::zeros();
    let mut weight = Matrix5::zeros();
    for (zi, &(x, y)) in z.iter().zip(points) {
        let d = zi - zbar;
        scatter += d * d.transpose();
        let full = gradient_weight(x, y);
        weight += full.fixed_view::<5, 5>(0, 0).into_owned();
    }
    scatter /= n;
    weight /= n;

    let chol = weight.cholesky().ok_or_else(|| {
        Error::DegenerateData("Taubin weight matrix is not positive definite".into())
    })?;
    let l = chol.l();
    let l_inv = l
        .solve_lower_triangular(&Matrix5::identity())
        .ok_or_else(|| Error::DegenerateData("singular Taubin weight factor".into()))?;
    let reduced = l_inv * scatter * l_inv.transpose();
    let reduced = 0.5 * (reduced + reduced.transpose());
    let eig = SymmetricEigen::new(reduced);
    let mut order: Vec<usize> = (0..5).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let sorted: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    check_rank(&sorted, "conic design matrix")?;

    let y = eig.eigenvectors.column(order[0]).into_owned();
    let a = l_inv.transpose() * y;
    let f = -zbar.dot(&a);
    Ok([a[0], a[1], a[2], a[3], a[4], f])
}

fn fit_semi_hyper(points: &[(f64, f64)]) -> Result<[f64; 6]> {
    let n = points.len() as f64;
    let e = Vector6::new(1.0, 0.0, 1.0, 0.0, 0.0, 0.0);
    let mut moment = Matrix6::zeros();
    let mut weight = Matrix6::zeros();
    for &(x, y) in points {
        let xi = carrier(x, y);
        moment += xi * xi.transpose();
        let cross = xi * e.transpose();
        weight += gradient_weight(x, y) + cross + cross.transpose();
    }
    moment /= n;
    weight /= n;

    let eig = SymmetricEigen::new(moment);
    let mut order: Vec<usize> = (0..6).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let sorted: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    check_rank(&sorted, "conic moment matrix")?;
    let max = sorted[5];
    if sorted[0] <= 1e-13 * max {
        // Exact data: the null vector interpolates every point.
        let v = eig.eigenvectors.column(order[0]);
        return Ok([v[0], v[1], v[2], v[3], v[4], v[5]]);
    }

    // Whiten the moment matrix and solve W^T N W y = μ y for the largest |μ|.
    let mut whiten = Matrix6::zeros();
    for (col, &i) in order.iter().enumerate() {
        let scale = 1.0 / eig.eigenvalues[i].sqrt();
        whiten.set_column(col, &(eig.eigenvectors.column(i) * scale));
    }
    let reduced = whiten.transpose() * weight * whiten;
    let reduced = 0.5 * (reduced + reduced.transpose());
    let red = SymmetricEigen::new(reduced);
    let best = (0..6)
        .max_by(|&i, &j| {
            red.eigenvalues[i]
                .abs()
                .total_cmp(&red.eigenvalues[j].abs())
        })
        .expect("six eigenvalues");
    let theta = whiten * red.eigenvectors.column(best);
    Ok([theta[0], theta[1], theta[2], theta[3], theta[4], theta[5]])
}

#[derive(Debug, Serialize, Deserialize)]
struct PointRow {
    u: f64,
    v: f64,
}

/// Writes a `u,v` points CSV with 17 significant digits.
pub fn write_points_csv<W: Write>(writer: W, points: &[Point2<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["u", "v"])?;
    for p in points {
        w.write_record([format!("{:.16e}", p.x), format!("{:.16e}", p.y)])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `u,v` points CSV.
pub fn read_points_csv<R: Read>(reader: R) -> Result<Vec<Point2<f64>>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "u" || &headers[1] != "v" {
        return Err(Error::InvalidConfig(format!(
            "points CSV header must be `u,v`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut points = Vec::new();
    for row in r.deserialize() {
        let row: PointRow = row?;
        points.push(Point2::new(row.u, row.v));
    }
    Ok(points)
}
