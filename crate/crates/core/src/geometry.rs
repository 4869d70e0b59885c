//! Ellipsoid shape matrices, line-of-sight intersection, and the horizon cone.
//!
//! World geometry is in kilometers. Rotations are 3x3 matrices acting on
//! column vectors; `Pose::rotation` maps planet-frame coordinates to camera
//! coordinates (`x_C = R x_P`).

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::conics::Conic;
use crate::error::{Error, Result};

/// Relative tolerance for the tangency (single root) test.
pub const TANGENCY_TOL: f64 = 1e-9;
/// Margin on `r^T A r > 1` below which the observer counts as on the surface.
pub const OUTSIDE_MARGIN: f64 = 1e-12;
/// Tolerance on `R R^T = I` and `det R = 1`.
pub const ROTATION_TOL: f64 = 1e-12;

/// Triaxial ellipsoid in its principal frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipsoidShape {
    a: f64,
    b: f64,
    c: f64,
}

impl EllipsoidShape {
    /// Semi-axes in kilometers.
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        for (name, v) in [("a", a), ("b", b), ("c", c)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidShape(format!(
                    "semi-axis {name} = {v} must be positive"
                )));
            }
        }
        Ok(Self { a, b, c })
    }

    pub fn semi_axes(&self) -> (f64, f64, f64) {
        (self.a, self.b, self.c)
    }

    pub fn max_semi_axis(&self) -> f64 {
        self.a.max(self.b).max(self.c)
    }

    /// `diag(1/a², 1/b², 1/c²)`, in 1/km².
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.diagonal())
    }

    fn diagonal(&self) -> Vector3<f64> {
        Vector3::new(
            1.0 / (self.a * self.a),
            1.0 / (self.b * self.b),
            1.0 / (self.c * self.c),
        )
    }

    /// `p^T A p`.
    pub fn quadratic_form(&self, p: &Vector3<f64>) -> f64 {
        self.bilinear(p, p)
    }

    fn bilinear(&self, p: &Vector3<f64>, q: &Vector3<f64>) -> f64 {
        self.diagonal().component_mul(p).dot(q)
    }
}

/// Shape matrix constructor.
pub fn shape_matrix(a: f64, b: f64, c: f64) -> Result<EllipsoidShape> {
    EllipsoidShape::new(a, b, c)
}

/// Observer position (km, planet principal frame) and planet-to-camera rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    position: Vector3<f64>,
    rotation: Matrix3<f64>,
}

impl Pose {
    pub fn new(position_km: Vector3<f64>, rotation: Matrix3<f64>) -> Result<Self> {
        if position_km.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidPose("non-finite position".into()));
        }
        check_rotation(&rotation)?;
        Ok(Self {
            position: position_km,
            rotation,
        })
    }

    /// Scalar-first Hamilton quaternion `[w, x, y, z]`. Inputs within 1e-6 of
    /// unit norm are renormalized.
    pub fn from_quaternion(position_km: Vector3<f64>, q: [f64; 4]) -> Result<Self> {
        Self::new(position_km, quaternion_to_rotation(q)?)
    }

    pub fn position(&self) -> &Vector3<f64> {
        &self.position
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let orth = (r * r.transpose() - Matrix3::identity()).amax();
    let det = r.determinant();
    if !(orth <= ROTATION_TOL) || !((det - 1.0).abs() <= ROTATION_TOL) {
        return Err(Error::InvalidPose(format!(
            "not a proper rotation (|R R^T - I| = {orth:e}, det = {det})"
        )));
    }
    Ok(())
}

pub fn quaternion_to_rotation(q: [f64; 4]) -> Result<Matrix3<f64>> {
    let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !((norm - 1.0).abs() <= 1e-6) {
        return Err(Error::InvalidPose(format!(
            "quaternion norm {norm} is not 1"
        )));
    }
    let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    Ok(uq.to_rotation_matrix().into_inner())
}

/// Scalar-first quaternion with `w >= 0`.
pub fn rotation_to_quaternion(r: &Matrix3<f64>) -> [f64; 4] {
    let uq = UnitQuaternion::from_matrix(r);
    let q = uq.quaternion();
    let s = if q.w < 0.0 { -1.0 } else { 1.0 };
    [s * q.w, s * q.i, s * q.j, s * q.k]
}

/// Real roots of the line-of-sight quadratic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayIntersection {
    pub root_count: usize,
    lambdas: [f64; 2],
    /// Quarter discriminant `(r^T A e)² - (e^T A e)(r^T A r - 1)`.
    pub discriminant: f64,
}

impl RayIntersection {
    /// Distances along the ray, km, ascending.
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas[..self.root_count]
    }
}

/// Intersects the line `p = r + λ e` with the ellipsoid surface.
///
/// `e_hat` must be a unit vector. A root is reported single when
/// `|disc| <= 1e-9 * max(1, (r^T A e)²)`.
pub fn intersect_ray(
    shape: &EllipsoidShape,
    r: &Vector3<f64>,
    e_hat: &Vector3<f64>,
) -> Result<RayIntersection> {
    if !((e_hat.norm() - 1.0).abs() <= 1e-12) {
        return Err(Error::InvalidConfig(format!(
            "line-of-sight direction must be unit length, |e| = {}",
            e_hat.norm()
        )));
    }
    let qa = shape.quadratic_form(e_hat);
    let half_b = shape.bilinear(r, e_hat);
    let qc = shape.quadratic_form(r) - 1.0;
    let disc = half_b * half_b - qa * qc;
    let tol = TANGENCY_TOL * (half_b * half_b).max(1.0);

    let (root_count, lambdas) = if disc.abs() <= tol {
        let l = -half_b / qa;
        (1, [l, l])
    } else if disc < 0.0 {
        (0, [f64::NAN; 2])
    } else {
        // Stable form: avoid cancellation between -b and sqrt(disc).
        let q = -(half_b + half_b.signum() * disc.sqrt());
        let (l1, l2) = if q == 0.0 {
            let l = (-qc / qa).sqrt();
            (-l, l)
        } else {
            (q / qa, qc / q)
        };
        (2, [l1.min(l2), l1.max(l2)])
    };
    Ok(RayIntersection {
        root_count,
        lambdas,
        discriminant: disc,
    })
}

/// Horizon cone `A r r^T A - (r^T A r - 1) A` in the planet frame.
pub fn horizon_conic_planet(shape: &EllipsoidShape, r: &Vector3<f64>) -> Result<Conic> {
    let rar = shape.quadratic_form(r);
    if !(rar > 1.0 + OUTSIDE_MARGIN) {
        return Err(Error::NoHorizon(rar));
    }
    let a = shape.matrix();
    let ar = a * r;
    Ok(Conic::from_matrix(&(ar * ar.transpose() - a * (rar - 1.0))))
}

/// Rotates a planet-frame cone into camera coordinates: `R C_P R^T`.
pub fn horizon_conic_camera(c_planet: &Conic, pose: &Pose) -> Conic {
    let r = pose.rotation();
    Conic::from_matrix(&(r * c_planet.matrix() * r.transpose()))
}

/// Elementary right-handed rotation about x.
pub fn rot_x(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// 3-2-1 Euler sequence, `R = R1(θ1) R2(θ2) R3(θ3)`; angles in radians.
/// Each elementary factor is a right-handed rotation, so `(π/2, 0, 0)` maps
/// x̂ to ŷ.
pub fn euler321_to_rotation(theta3: f64, theta2: f64, theta1: f64) -> Matrix3<f64> {
    rot_x(theta1) * rot_y(theta2) * rot_z(theta3)
}
