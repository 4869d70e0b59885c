//! Single-image calibration: recover `K` from a reference cone `C` and the
//! imaged conic `C'` related by `s K^T C' K = C`.
//!
//! The steps follow the closed-form procedure:
//!
//! 1. `α = sign(trace(C'11))`
//! 2. `β = sign(trace(C11))`
//! 3. `C' ← α C'`
//! 4. `C ← β C`
//! 5. `s = det(C) det(C'11) / (det(C') det(C11))`
//! 6. `L_C' = chol(s C'11)`
//! 7. `L_C = chol(C11)`
//! 8. `K11 = L_C'^{-T} L_C^T`
//! 9. `K12 = J = (L_C L_C'^T)^{-1} C12 - C'11^{-1} C'12`
//! 10. assemble `K`
//!
//! Every matrix here is 2x2 or 3x3, so the factorizations and triangular
//! solves are written out by hand. Errors carry the number of the failing step.

use nalgebra::{Matrix2, Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use crate::conics::Conic;
use crate::error::{Error, Result};

/// `cond(C'11)` above which the estimate carries a warning.
pub const CONDITION_WARNING: f64 = 1e8;

/// Pinhole intrinsics. Focal length and pixel pitch in millimeters, skew and
/// principal point in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub f_mm: f64,
    pub mu_x_mm: f64,
    pub mu_y_mm: f64,
    pub gamma: f64,
    pub u0_px: f64,
    pub v0_px: f64,
}

impl CameraIntrinsics {
    pub fn new(
        f_mm: f64,
        mu_x_mm: f64,
        mu_y_mm: f64,
        gamma: f64,
        u0_px: f64,
        v0_px: f64,
    ) -> Result<Self> {
        let k = Self {
            f_mm,
            mu_x_mm,
            mu_y_mm,
            gamma,
            u0_px,
            v0_px,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("f", self.f_mm),
            ("mu_x", self.mu_x_mm),
            ("mu_y", self.mu_y_mm),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidSensor(format!(
                    "{name} = {v} must be positive"
                )));
            }
        }
        if !self.gamma.is_finite() || !self.u0_px.is_finite() || !self.v0_px.is_finite() {
            return Err(Error::InvalidSensor(
                "non-finite skew or principal point".into(),
            ));
        }
        Ok(())
    }

    pub fn d_x(&self) -> f64 {
        self.f_mm / self.mu_x_mm
    }

    pub fn d_y(&self) -> f64 {
        self.f_mm / self.mu_y_mm
    }

    pub fn k11(&self) -> Matrix2<f64> {
        Matrix2::new(self.d_x(), self.gamma, 0.0, self.d_y())
    }

    pub fn k12(&self) -> Vector2<f64> {
        Vector2::new(self.u0_px, self.v0_px)
    }

    pub fn k(&self) -> Matrix3<f64> {
        assemble_k(&self.k11(), &self.k12())
    }

    /// Closed-form inverse of the upper-triangular `K`.
    pub fn k_inverse(&self) -> Matrix3<f64> {
        let (fx, fy, g, u0, v0) = (self.d_x(), self.d_y(), self.gamma, self.u0_px, self.v0_px);
        Matrix3::new(
            1.0 / fx,
            -g / (fx * fy),
            (g * v0 - fy * u0) / (fx * fy),
            0.0,
            1.0 / fy,
            -v0 / fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

pub fn assemble_k(k11: &Matrix2<f64>, k12: &Vector2<f64>) -> Matrix3<f64> {
    Matrix3::new(
        k11[(0, 0)],
        k11[(0, 1)],
        k12.x,
        0.0,
        k11[(1, 1)],
        k12.y,
        0.0,
        0.0,
        1.0,
    )
}

/// Recovered calibration and the intermediate quantities of each step.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationEstimate {
    /// Upper-triangular `[[f/μx, γ], [0, f/μy]]`, pixels.
    pub k11: Matrix2<f64>,
    /// Principal point, pixels.
    pub k12: Vector2<f64>,
    pub s: f64,
    pub alpha: f64,
    pub beta: f64,
    /// `chol(C11)`, lower triangular.
    pub l_c: Matrix2<f64>,
    /// `chol(s C'11)`, lower triangular.
    pub l_cp: Matrix2<f64>,
    pub j: Vector2<f64>,
    pub d_x: f64,
    pub d_y: f64,
    pub warnings: Vec<String>,
}

impl CalibrationEstimate {
    pub fn k(&self) -> Matrix3<f64> {
        assemble_k(&self.k11, &self.k12)
    }

    pub fn gamma(&self) -> f64 {
        self.k11[(0, 1)]
    }

    /// Per-image terms used by the multi-image estimators.
    pub fn terms(&self) -> crate::batch::ImageTerms {
        crate::batch::ImageTerms {
            d_x: self.d_x,
            d_y: self.d_y,
            j: self.j,
        }
    }
}

/// Sign normalization of lines 1-4: scales by `sign(trace(C11))` so the
/// upper-left block has positive trace. Returns the scaled conic and the sign.
pub fn normalize_sign(c: &Conic) -> Result<(Conic, f64)> {
    normalize_sign_at(c, 1)
}

fn normalize_sign_at(c: &Conic, line: u8) -> Result<(Conic, f64)> {
    let c11 = c.c11();
    let trace = c11[(0, 0)] + c11[(1, 1)];
    let scale = c11[(0, 0)].abs() + c11[(1, 1)].abs() + 2.0 * c11[(0, 1)].abs();
    if !(trace.abs() > 1e-14 * scale) {
        return Err(Error::IndefiniteBlock {
            line,
            detail: format!("trace(C11) = {trace:e} vanishes; not an ellipse"),
        });
    }
    let sign = trace.signum();
    Ok((c.scaled(sign), sign))
}

/// Line 5. Both conics must already be sign-normalized.
pub fn scale_factor(c: &Conic, cp: &Conic) -> Result<f64> {
    let det_cp = cp.det();
    let det_c11 = c.det11();
    if det_cp == 0.0 || det_c11 == 0.0 || !det_cp.is_finite() || !det_c11.is_finite() {
        return Err(Error::Singular {
            line: 5,
            detail: format!(
                "zero denominator determinant (det C' = {det_cp:e}, det C11 = {det_c11:e})"
            ),
        });
    }
    Ok(c.det() * cp.det11() / (det_cp * det_c11))
}

/// Lower-triangular Cholesky factor of a symmetric 2x2 matrix.
fn cholesky2(m: &Matrix2<f64>, line: u8, what: &str) -> Result<Matrix2<f64>> {
    let a = m[(0, 0)];
    let fail = |detail: String| Error::NotPositiveDefinite {
        line,
        detail: format!("{what}: {detail}"),
    };
    if !(a > 0.0) {
        return Err(fail(format!("leading entry {a:e}")));
    }
    let l11 = a.sqrt();
    let l21 = m[(1, 0)] / l11;
    let rem = m[(1, 1)] - l21 * l21;
    if !(rem > 0.0) {
        return Err(fail(format!("Schur complement {rem:e}")));
    }
    Ok(Matrix2::new(l11, 0.0, l21, rem.sqrt()))
}

/// Solves `L x = b` for lower-triangular `L`.
fn forward_sub(l: &Matrix2<f64>, b: &Vector2<f64>) -> Vector2<f64> {
    let x0 = b.x / l[(0, 0)];
    Vector2::new(x0, (b.y - l[(1, 0)] * x0) / l[(1, 1)])
}

/// Solves `L^T x = b` for lower-triangular `L`.
fn back_sub_transposed(l: &Matrix2<f64>, b: &Vector2<f64>) -> Vector2<f64> {
    let x1 = b.y / l[(1, 1)];
    Vector2::new((b.x - l[(1, 0)] * x1) / l[(0, 0)], x1)
}

/// Line 8: `K11 = L_C'^{-T} L_C^T`, by back substitution on `L_C'^T K11 = L_C^T`.
fn k11_from_factors(l_c: &Matrix2<f64>, l_cp: &Matrix2<f64>) -> Matrix2<f64> {
    let k22 = l_c[(1, 1)] / l_cp[(1, 1)];
    let k11 = l_c[(0, 0)] / l_cp[(0, 0)];
    let k12 = (l_c[(1, 0)] - l_cp[(1, 0)] * k22) / l_cp[(0, 0)];
    Matrix2::new(k11, k12, 0.0, k22)
}

/// Line 6-8 on sign-normalized conics. Returns `(K11, L_C, L_C')`.
pub fn solve_k11(
    c: &Conic,
    cp: &Conic,
    s: f64,
) -> Result<(Matrix2<f64>, Matrix2<f64>, Matrix2<f64>)> {
    let l_cp = cholesky2(&(cp.c11() * s), 6, "s C'11")?;
    let l_c = cholesky2(&c.c11(), 7, "C11")?;
    Ok((k11_from_factors(&l_c, &l_cp), l_c, l_cp))
}

/// Line 9: `J = (L_C L_C'^T)^{-1} C12 - C'11^{-1} C'12`, using
/// `C'11^{-1} = s L_C'^{-T} L_C'^{-1}`.
pub fn solve_k12(
    c: &Conic,
    cp: &Conic,
    s: f64,
    l_c: &Matrix2<f64>,
    l_cp: &Matrix2<f64>,
) -> Result<Vector2<f64>> {
    let first = back_sub_transposed(l_cp, &forward_sub(l_c, &c.c12()));
    let second = back_sub_transposed(l_cp, &forward_sub(l_cp, &cp.c12())) * s;
    let j = first - second;
    if !(j.x.is_finite() && j.y.is_finite()) {
        return Err(Error::Singular {
            line: 9,
            detail: "non-finite principal point (singular C'11)".into(),
        });
    }
    Ok(j)
}

fn condition_2x2(m: &Matrix2<f64>) -> f64 {
    let mean = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let rad = (0.5 * (m[(0, 0)] - m[(1, 1)])).hypot(m[(0, 1)]);
    (mean + rad) / (mean - rad)
}

/// Runs the full single-image procedure on a reference cone `C` (camera
/// frame) and the imaged conic `C'` (pixels). Both inputs may carry any
/// nonzero scale.
pub fn calibrate_single(c: &Conic, cp: &Conic) -> Result<CalibrationEstimate> {
    let (cp, alpha) = normalize_sign_at(cp, 1)?;
    let (c, beta) = normalize_sign_at(c, 2)?;
    for (conic, line, name) in [(&cp, 1, "C'"), (&c, 2, "C")] {
        if !(conic.det11() > 0.0) {
            return Err(Error::IndefiniteBlock {
                line,
                detail: format!("det({name}11) = {:e} <= 0; not an ellipse", conic.det11()),
            });
        }
    }

    let s = scale_factor(&c, &cp)?;
    let (k11, l_c, l_cp) = solve_k11(&c, &cp, s)?;
    let j = solve_k12(&c, &cp, s, &l_c, &l_cp)?;

    let mut warnings = Vec::new();
    let cond = condition_2x2(&cp.c11());
    if cond > CONDITION_WARNING {
        warnings.push(format!(
            "near-parabolic imaged conic: cond(C'11) = {cond:.3e}"
        ));
    }

    Ok(CalibrationEstimate {
        k11,
        k12: j,
        s,
        alpha,
        beta,
        l_c,
        l_cp,
        j,
        d_x: k11[(0, 0)],
        d_y: k11[(1, 1)],
        warnings,
    })
}

/// Least-squares focal length (mm) from one image: the mean of `μx d_x` and
/// `μy d_y`.
pub fn focal_from_k(est: &CalibrationEstimate, mu_x_mm: f64, mu_y_mm: f64) -> Result<f64> {
    check_pitch(mu_x_mm, mu_y_mm)?;
    Ok(pair_mean(mu_x_mm * est.d_x, mu_y_mm * est.d_y))
}

pub(crate) fn check_pitch(mu_x_mm: f64, mu_y_mm: f64) -> Result<()> {
    if !(mu_x_mm > 0.0 && mu_y_mm > 0.0) || !mu_x_mm.is_finite() || !mu_y_mm.is_finite() {
        return Err(Error::InvalidSensor(format!(
            "pixel pitch must be positive, got ({mu_x_mm}, {mu_y_mm})"
        )));
    }
    Ok(())
}

/// Normal-equation solution of `[1; 1] f = [a; b]`.
pub(crate) fn pair_mean(a: f64, b: f64) -> f64 {
    0.5 * (a + b)
}

/// Result file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Row-major 3x3.
    #[serde(rename = "K")]
    pub k: [[f64; 3]; 3],
    pub f_mm: Option<f64>,
    pub u0_px: f64,
    pub v0_px: f64,
    pub gamma: f64,
    pub s: f64,
    pub alpha: f64,
    pub beta: f64,
    pub warnings: Vec<String>,
}

impl CalibrationResult {
    /// `pitch_mm` is `(μx, μy)`; without it `f_mm` is omitted.
    pub fn from_estimate(est: &CalibrationEstimate, pitch_mm: Option<(f64, f64)>) -> Result<Self> {
        let k = est.k();
        let f_mm = pitch_mm
            .map(|(mx, my)| focal_from_k(est, mx, my))
            .transpose()?;
        Ok(Self {
            k: [
                [k[(0, 0)], k[(0, 1)], k[(0, 2)]],
                [k[(1, 0)], k[(1, 1)], k[(1, 2)]],
                [k[(2, 0)], k[(2, 1)], k[(2, 2)]],
            ],
            f_mm,
            u0_px: est.k12.x,
            v0_px: est.k12.y,
            gamma: est.gamma(),
            s: est.s,
            alpha: est.alpha,
            beta: est.beta,
            warnings: est.warnings.clone(),
        })
    }

    pub fn terms(&self) -> crate::batch::ImageTerms {
        crate::batch::ImageTerms {
            d_x: self.k[0][0],
            d_y: self.k[1][1],
            j: Vector2::new(self.k[0][2], self.k[1][2]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    fn diag(a: f64, b: f64, c: f64) -> Conic {
        Conic::from_matrix(&Matrix3::from_diagonal(&Vector3::new(a, b, c)))
    }

    /// A tilted, off-center cone to use as the reference conic.
    fn reference_cone() -> Conic {
        let m = Matrix3::new(-2.0, 0.3, 0.4, 0.3, -1.5, -0.2, 0.4, -0.2, 0.9);
        Conic::from_matrix(&m)
    }

    /// Forward model `C' = K^{-T} C K^{-1}`, written independently of the
    /// library's projection routine.
    fn image_of(c: &Conic, k: &Matrix3<f64>) -> Conic {
        let k_inv = k.try_inverse().unwrap();
        Conic::from_matrix(&(k_inv.transpose() * c.matrix() * k_inv))
    }

    fn rel(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn sign_normalization() {
        let (c, s) = normalize_sign(&diag(1.0, 1.0, -1.0)).unwrap();
        assert_eq!(s, 1.0);
        assert_eq!(c, diag(1.0, 1.0, -1.0));
        let (c, s) = normalize_sign(&diag(-1.0, -1.0, 1.0)).unwrap();
        assert_eq!(s, -1.0);
        assert_eq!(c, diag(1.0, 1.0, -1.0));
        assert!(matches!(
            normalize_sign(&diag(1.0, -1.0, 1.0)),
            Err(Error::IndefiniteBlock { .. })
        ));
    }

    #[test]
    fn scale_factor_cases() {
        let (c, _) = normalize_sign(&reference_cone()).unwrap();
        assert_relative_eq!(scale_factor(&c, &c).unwrap(), 1.0, epsilon = 1e-15);
        let k = 3.5;
        assert_relative_eq!(
            scale_factor(&c, &c.scaled(1.0 / k)).unwrap(),
            k,
            epsilon = 1e-13
        );
        let singular = diag(1.0, 1.0, 0.0);
        assert!(matches!(
            scale_factor(&c, &singular),
            Err(Error::Singular { line: 5, .. })
        ));
    }

    #[test]
    fn k11_identity_and_zoom() {
        let (c, _) = normalize_sign(&reference_cone()).unwrap();
        let (k11, _, _) = solve_k11(&c, &c, 1.0).unwrap();
        assert_relative_eq!(k11, Matrix2::identity(), epsilon = 1e-15);

        // C11 = k² C'11 with s = 1.
        let k = 4.0;
        let cp = Conic::from_matrix(&{
            let mut m = c.matrix();
            m.fixed_view_mut::<2, 2>(0, 0).scale_mut(1.0 / (k * k));
            m
        });
        let (k11, _, _) = solve_k11(&c, &cp, 1.0).unwrap();
        assert_relative_eq!(k11, Matrix2::identity() * k, epsilon = 1e-14);
    }

    #[test]
    fn k11_satisfies_block_equation() {
        let (c, _) = normalize_sign(&reference_cone()).unwrap();
        let k11_true = Matrix2::new(812.0, 3.1, 0.0, 790.0);
        let s = 2.5;
        let inv = k11_true.try_inverse().unwrap();
        let cp11 = inv.transpose() * c.c11() * inv / s;
        let mut m = c.matrix();
        m.fixed_view_mut::<2, 2>(0, 0).copy_from(&cp11);
        let cp = Conic::from_matrix(&m);
        let (k11, _, _) = solve_k11(&c, &cp, s).unwrap();
        assert!((k11 - k11_true).norm() / k11_true.norm() < 1e-10);
        assert_eq!(k11[(1, 0)], 0.0);
        let lhs = k11.transpose() * cp.c11() * k11 * s;
        assert!((lhs - c.c11()).norm() / c.c11().norm() < 1e-10);
    }

    #[test]
    fn k12_identity_camera_is_zero() {
        let (c, _) = normalize_sign(&reference_cone()).unwrap();
        let (_, l_c, l_cp) = solve_k11(&c, &c, 1.0).unwrap();
        let j = solve_k12(&c, &c, 1.0, &l_c, &l_cp).unwrap();
        assert!(j.norm() < 1e-15);
    }

    #[test]
    fn pure_translation_camera() {
        let k = Matrix3::new(1.0, 0.0, 12.5, 0.0, 1.0, -40.0, 0.0, 0.0, 1.0);
        let est = calibrate_single(&reference_cone(), &image_of(&reference_cone(), &k)).unwrap();
        assert_relative_eq!(est.k12, Vector2::new(12.5, -40.0), epsilon = 1e-12);
        assert_eq!(est.k12, est.j);
    }

    #[test]
    fn exact_recovery_with_unsimplified_principal_point() {
        let k = Matrix3::new(1500.0, 2.0, 530.0, 0.0, 1480.0, 490.0, 0.0, 0.0, 1.0);
        let c = reference_cone();
        let cp = image_of(&c, &k).scaled(-0.37);
        let est = calibrate_single(&c, &cp).unwrap();
        assert!(rel(&est.k(), &k) < 1e-10);
        assert!(est.d_x == est.k11[(0, 0)] && est.d_y == est.k11[(1, 1)]);

        // K12 = C'11^{-1} ((s K11^T)^{-1} C12 - C'12), with general inverses.
        let cpn = cp.scaled(est.alpha);
        let cn = c.scaled(est.beta);
        let sk = (est.k11.transpose() * est.s).try_inverse().unwrap();
        let k12 = cpn.c11().try_inverse().unwrap() * (sk * cn.c12() - cpn.c12());
        assert!((k12 - est.j).norm() < 1e-10 * k12.norm());

        // s³ det(K)² det(C') = det(C) on the normalized conics.
        let lhs = est.s.powi(3) * est.k().determinant().powi(2) * cpn.det();
        assert!((lhs - cn.det()).abs() < 1e-10 * cn.det().abs());
        assert_eq!(est.k().determinant(), est.k11.determinant());
    }

    #[test]
    fn errors_name_the_step() {
        let hyperbola = diag(1.0, -2.0, 1.0);
        match calibrate_single(&reference_cone(), &hyperbola) {
            Err(Error::IndefiniteBlock { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match calibrate_single(&hyperbola, &reference_cone()) {
            Err(Error::IndefiniteBlock { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let trace_zero = diag(1.0, -1.0, 1.0);
        assert!(matches!(
            calibrate_single(&reference_cone(), &trace_zero),
            Err(Error::IndefiniteBlock { line: 1, .. })
        ));
        // Imaginary image conic: det(C')/det(C) has the wrong sign, so s < 0.
        let imaginary = diag(1.0, 1.0, 1.0);
        assert!(matches!(
            calibrate_single(&reference_cone(), &imaginary),
            Err(Error::NotPositiveDefinite { line: 6, .. })
        ));
    }

    #[test]
    fn near_parabolic_warning() {
        let c = reference_cone();
        let k = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1e5, 0.0, 0.0, 0.0, 1.0);
        let est = calibrate_single(&c, &image_of(&c, &k)).unwrap();
        assert_eq!(est.warnings.len(), 1);
        let plain = calibrate_single(&c, &c).unwrap();
        assert!(plain.warnings.is_empty());
    }

    #[test]
    fn focal_length() {
        let mut est = calibrate_single(&reference_cone(), &reference_cone()).unwrap();
        est.d_x = 1000.0;
        est.d_y = 1000.0;
        assert_relative_eq!(
            focal_from_k(&est, 0.012, 0.012).unwrap(),
            12.0,
            epsilon = 1e-12
        );
        est.d_x = 1002.0;
        est.d_y = 998.0;
        assert_relative_eq!(
            focal_from_k(&est, 0.012, 0.012).unwrap(),
            12.0,
            epsilon = 1e-12
        );
        assert!(matches!(
            focal_from_k(&est, 0.0, 0.012),
            Err(Error::InvalidSensor(_))
        ));
        assert!(matches!(
            focal_from_k(&est, 0.012, -1.0),
            Err(Error::InvalidSensor(_))
        ));
    }

    #[test]
    fn intrinsics_inverse() {
        let k = CameraIntrinsics::new(2002.7, 0.012, 0.0121, 1.5, 560.0, 500.0).unwrap();
        assert!((k.k() * k.k_inverse() - Matrix3::identity()).amax() < 1e-12);
        assert!(CameraIntrinsics::new(0.0, 0.012, 0.012, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn result_terms_match_estimate() {
        let k = Matrix3::new(1500.0, 2.0, 530.0, 0.0, 1480.0, 490.0, 0.0, 0.0, 1.0);
        let est = calibrate_single(&reference_cone(), &image_of(&reference_cone(), &k)).unwrap();
        let res = CalibrationResult::from_estimate(&est, Some((0.01, 0.01))).unwrap();
        assert_eq!(res.terms(), est.terms());
        let json = serde_json::to_string(&res).unwrap();
        assert!(json.contains("\"K\":"));
        let back: CalibrationResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back, res);
        assert!(CalibrationResult::from_estimate(&est, None)
            .unwrap()
            .f_mm
            .is_none());
    }
}
