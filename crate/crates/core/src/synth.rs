//! Synthetic scenes: ground-truth geometry and camera, the imaged horizon
//! they produce, and noisy horizon points for end-to-end tests.
//!
//! Scene files are JSON:
//!
//! ```text
//! {
//!   "body":   {"a_km": .., "b_km": .., "c_km": .., "name": ".."},
//!   "pose":   {"r_P_km": [x, y, z], "q_PC": [w, x, y, z]},
//!   "camera": {"f_mm": .., "mu_x_mm": .., "mu_y_mm": .., "gamma": .., "u0_px": .., "v0_px": ..},
//!   "noise_px": 0.25, "n_points": 500, "arc_deg": 360.0, "seed": 7
//! }
//! ```
//!
//! `pose` may give `euler321_deg: [θ3, θ2, θ1]` instead of `q_PC`. `camera`,
//! `arc_start_deg`, `image_px` and `epoch` are optional.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Point2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibrate::CameraIntrinsics;
use crate::conics::{Arc, Conic, EllipseParams, MIN_POINTS};
use crate::error::{Error, Result};
use crate::geometry::{
    euler321_to_rotation, horizon_conic_camera, horizon_conic_planet, rotation_to_quaternion,
    EllipsoidShape, Pose,
};

/// Maximum attempts before [`random_scene`] gives up.
pub const MAX_REJECTIONS: usize = 1000;

/// Imaged conic of a camera-frame cone: `C' ∝ K^{-T} C K^{-1}`, scaled to
/// unit Frobenius norm with `A + C > 0`.
pub fn project_true_conic(c_camera: &Conic, k: &CameraIntrinsics) -> Conic {
    c_camera.congruence(&k.k_inverse()).normalized()
}

/// Named ellipsoid, semi-axes in km.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Body {
    pub name: String,
    pub a_km: f64,
    pub b_km: f64,
    pub c_km: f64,
}

impl Body {
    pub fn new(name: &str, a_km: f64, b_km: f64, c_km: f64) -> Self {
        Self {
            name: name.to_string(),
            a_km,
            b_km,
            c_km,
        }
    }

    pub fn shape(&self) -> Result<EllipsoidShape> {
        EllipsoidShape::new(self.a_km, self.b_km, self.c_km)
    }
}

/// Best-fit ellipsoids of six Saturnian moons, km.
pub fn saturnian_moons() -> Vec<Body> {
    vec![
        Body::new("Mimas", 415.6, 393.4, 381.2),
        Body::new("Tethys", 1076.8, 1057.4, 1052.6),
        Body::new("Enceladus", 513.2, 502.8, 496.6),
        Body::new("Iapetus", 1492.0, 1492.0, 1424.0),
        Body::new("Rhea", 1532.4, 1525.6, 1524.4),
        Body::new("Dione", 1128.8, 1122.6, 1119.2),
    ]
}

/// Cassini ISS narrow-angle camera focal length, mm.
pub const CASSINI_NAC_F_MM: f64 = 2002.7;
/// Pixel pitch implied by a 0.35° field of view over 1024 pixels, rounded.
pub const CASSINI_NAC_PITCH_MM: f64 = 0.012;
pub const CASSINI_NAC_PP_PX: (f64, f64) = (560.0, 500.0);
pub const CASSINI_NAC_IMAGE_PX: [f64; 2] = [1024.0, 1024.0];

pub fn cassini_nac() -> CameraIntrinsics {
    CameraIntrinsics {
        f_mm: CASSINI_NAC_F_MM,
        mu_x_mm: CASSINI_NAC_PITCH_MM,
        mu_y_mm: CASSINI_NAC_PITCH_MM,
        gamma: 0.0,
        u0_px: CASSINI_NAC_PP_PX.0,
        v0_px: CASSINI_NAC_PP_PX.1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct PoseSpec {
    pub r_P_km: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_PC: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub euler321_deg: Option<[f64; 3]>,
}

impl PoseSpec {
    pub fn pose(&self) -> Result<Pose> {
        let r = Vector3::from(self.r_P_km);
        match (self.q_PC, self.euler321_deg) {
            (Some(q), None) => Pose::from_quaternion(r, q),
            (None, Some([t3, t2, t1])) => Pose::new(
                r,
                euler321_to_rotation(t3.to_radians(), t2.to_radians(), t1.to_radians()),
            ),
            _ => Err(Error::InvalidPose(
                "pose needs exactly one of q_PC or euler321_deg".into(),
            )),
        }
    }
}

/// One synthetic observation setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub body: Body,
    pub pose: PoseSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraIntrinsics>,
    pub noise_px: f64,
    pub n_points: usize,
    pub arc_deg: f64,
    #[serde(default)]
    pub arc_start_deg: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_px: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<String>,
}

impl Scene {
    pub fn arc(&self) -> Arc {
        Arc::from_degrees(self.arc_start_deg, self.arc_deg)
    }

    /// Horizon cone in camera coordinates.
    pub fn reference_conic(&self) -> Result<Conic> {
        let shape = self.body.shape()?;
        let pose = self.pose.pose()?;
        let c_planet = horizon_conic_planet(&shape, pose.position())?;
        Ok(horizon_conic_camera(&c_planet, &pose))
    }

    /// Noise-free imaged horizon under the scene's camera, checked to be a
    /// real ellipse in front of the camera (and inside `image_px` if given).
    pub fn true_image_conic(&self) -> Result<Conic> {
        let camera = self
            .camera
            .ok_or_else(|| Error::SceneRejected("scene has no camera truth".into()))?;
        camera.validate()?;
        let pose = self.pose.pose()?;
        let towards_body = pose.rotation() * -pose.position();
        if !(towards_body.z > 0.0) {
            return Err(Error::SceneRejected("body is behind the camera".into()));
        }
        let c_img = project_true_conic(&self.reference_conic()?, &camera);
        let params = c_img
            .ellipse_params()
            .map_err(|_| Error::SceneRejected("horizon does not image as an ellipse".into()))?;
        if let Some([w, h]) = self.image_px {
            let (s, c) = params.orientation.sin_cos();
            let (a, b) = (params.semi_major, params.semi_minor);
            let half_w = (a * a * c * c + b * b * s * s).sqrt();
            let half_h = (a * a * s * s + b * b * c * c).sqrt();
            let p = params.center;
            if p.x - half_w < 0.0 || p.x + half_w > w || p.y - half_h < 0.0 || p.y + half_h > h {
                return Err(Error::SceneRejected(
                    "imaged horizon leaves the image".into(),
                ));
            }
        }
        Ok(c_img)
    }
}

/// Horizon points and the reference cone they should be calibrated against.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub points: Vec<Point2<f64>>,
    pub c_reference: Conic,
    pub body: String,
    pub epoch: String,
}

/// Sidecar JSON written next to a points CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct Sidecar {
    /// Row-major 3x3 camera-frame horizon cone.
    pub C_reference: [[f64; 3]; 3],
    pub body: String,
    pub epoch: String,
}

impl Observation {
    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            C_reference: self.c_reference.to_rows(),
            body: self.body.clone(),
            epoch: self.epoch.clone(),
        }
    }
}

impl Sidecar {
    pub fn reference_conic(&self) -> Conic {
        Conic::from_rows(&self.C_reference)
    }
}

/// Samples the true imaged horizon and perturbs each coordinate with
/// i.i.d. Gaussian noise drawn from the scene seed.
pub fn generate_observation(scene: &Scene) -> Result<Observation> {
    if scene.n_points < MIN_POINTS {
        return Err(Error::InsufficientPoints {
            got: scene.n_points,
            need: MIN_POINTS,
        });
    }
    if !(scene.noise_px >= 0.0) || !scene.noise_px.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "noise_px = {} must be non-negative",
            scene.noise_px
        )));
    }
    let c_img = scene.true_image_conic()?;
    let params = c_img.ellipse_params()?;
    let mut points = params.sample_points(scene.n_points, scene.arc())?;
    if scene.noise_px > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
        let normal = Normal::new(0.0, scene.noise_px).expect("validated sigma");
        for p in &mut points {
            p.x += normal.sample(&mut rng);
            p.y += normal.sample(&mut rng);
        }
    }
    Ok(Observation {
        points,
        c_reference: scene.reference_conic()?,
        body: scene.body.name.clone(),
        epoch: scene.epoch.clone().unwrap_or_default(),
    })
}

/// Closed interval for uniform sampling; `lo == hi` is a constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.lo <= self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "{what}: empty range [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodySource {
    /// Pick uniformly from a list.
    Catalog(Vec<Body>),
    /// Random triaxial body with `a >= b >= c` and `a / c <= max_axis_ratio`.
    Random {
        semi_major_km: Range,
        max_axis_ratio: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceRange {
    Km(Range),
    /// Multiples of the largest semi-axis.
    SemiAxes(Range),
    /// Distance giving the bounding sphere this apparent radius, pixels.
    ApparentRadiusPx(Range),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRanges {
    /// `f / μx`, pixels.
    pub focal_px: Range,
    /// `μx / μy`.
    pub aspect: Range,
    pub mu_x_mm: Range,
    pub gamma_px: Range,
    pub u0_px: Range,
    pub v0_px: Range,
}

impl CameraRanges {
    pub fn fixed(k: &CameraIntrinsics) -> Self {
        Self {
            focal_px: Range::fixed(k.d_x()),
            aspect: Range::fixed(k.mu_x_mm / k.mu_y_mm),
            mu_x_mm: Range::fixed(k.mu_x_mm),
            gamma_px: Range::fixed(k.gamma),
            u0_px: Range::fixed(k.u0_px),
            v0_px: Range::fixed(k.v0_px),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CameraIntrinsics {
        let focal_px = self.focal_px.sample(rng);
        let mu_x = self.mu_x_mm.sample(rng);
        let aspect = self.aspect.sample(rng);
        CameraIntrinsics {
            f_mm: focal_px * mu_x,
            mu_x_mm: mu_x,
            mu_y_mm: mu_x / aspect,
            gamma: self.gamma_px.sample(rng),
            u0_px: self.u0_px.sample(rng),
            v0_px: self.v0_px.sample(rng),
        }
    }
}

/// Ranges from which [`random_scene`] draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub bodies: BodySource,
    pub distance: DistanceRange,
    /// Angle between boresight and body center, degrees. The upper end is
    /// clamped to the ellipse-preserving limit `90° - asin(R_max / d)`.
    pub off_nadir_deg: Range,
    pub camera: CameraRanges,
    /// Exact camera used instead of `camera` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_exact: Option<CameraIntrinsics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_px: Option<[f64; 2]>,
    pub noise_px: f64,
    pub n_points: usize,
    pub arc_deg: f64,
}

impl SceneConfig {
    /// Cassini NAC looking at the six Saturnian moons, horizon fully inside
    /// the 1024x1024 frame.
    pub fn cassini_nac() -> Self {
        let k = cassini_nac();
        Self {
            bodies: BodySource::Catalog(saturnian_moons()),
            distance: DistanceRange::ApparentRadiusPx(Range::new(80.0, 300.0)),
            off_nadir_deg: Range::new(0.0, 0.2),
            camera: CameraRanges::fixed(&k),
            camera_exact: Some(k),
            image_px: Some(CASSINI_NAC_IMAGE_PX),
            noise_px: 0.25,
            n_points: 500,
            arc_deg: 360.0,
        }
    }

    /// Wide range of bodies, geometry and cameras (no image bounds).
    pub fn generic() -> Self {
        Self {
            bodies: BodySource::Random {
                semi_major_km: Range::new(100.0, 3000.0),
                max_axis_ratio: 1.5,
            },
            distance: DistanceRange::SemiAxes(Range::new(1.5, 20.0)),
            off_nadir_deg: Range::new(0.0, 90.0),
            camera: CameraRanges {
                focal_px: Range::new(500.0, 5000.0),
                aspect: Range::new(0.9, 1.1),
                mu_x_mm: Range::new(0.005, 0.02),
                gamma_px: Range::new(-2.0, 2.0),
                u0_px: Range::new(200.0, 800.0),
                v0_px: Range::new(200.0, 800.0),
            },
            camera_exact: None,
            image_px: None,
            noise_px: 0.0,
            n_points: 200,
            arc_deg: 360.0,
        }
    }

    fn validate(&self) -> Result<()> {
        match &self.bodies {
            BodySource::Catalog(list) => {
                if list.is_empty() {
                    return Err(Error::InvalidConfig("empty body catalog".into()));
                }
                for b in list {
                    b.shape()?;
                }
            }
            BodySource::Random {
                semi_major_km,
                max_axis_ratio,
            } => {
                semi_major_km.validate("semi_major_km")?;
                if !(semi_major_km.lo > 0.0) || !(*max_axis_ratio >= 1.0) {
                    return Err(Error::InvalidConfig(
                        "semi-axes must be positive, axis ratio >= 1".into(),
                    ));
                }
            }
        }
        let d = match self.distance {
            DistanceRange::Km(r)
            | DistanceRange::SemiAxes(r)
            | DistanceRange::ApparentRadiusPx(r) => r,
        };
        d.validate("distance")?;
        if !(d.lo > 0.0) {
            return Err(Error::InvalidConfig(
                "distance range must be positive".into(),
            ));
        }
        if let DistanceRange::SemiAxes(r) = self.distance {
            if !(r.lo > 1.0) {
                return Err(Error::InvalidConfig(
                    "distance must exceed the largest semi-axis".into(),
                ));
            }
        }
        self.off_nadir_deg.validate("off_nadir_deg")?;
        let c = &self.camera;
        for (name, r) in [
            ("focal_px", c.focal_px),
            ("aspect", c.aspect),
            ("mu_x_mm", c.mu_x_mm),
            ("gamma_px", c.gamma_px),
            ("u0_px", c.u0_px),
            ("v0_px", c.v0_px),
        ] {
            r.validate(name)?;
        }
        if !(c.focal_px.lo > 0.0 && c.aspect.lo > 0.0 && c.mu_x_mm.lo > 0.0) {
            return Err(Error::InvalidConfig(
                "camera scales must be positive".into(),
            ));
        }
        if self.n_points < MIN_POINTS {
            return Err(Error::InsufficientPoints {
                got: self.n_points,
                need: MIN_POINTS,
            });
        }
        if !(self.noise_px >= 0.0) {
            return Err(Error::InvalidConfig("noise_px must be non-negative".into()));
        }
        Ok(())
    }
}

/// Uniform rotation from a normalized 4-vector of standard normals.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return crate::geometry::quaternion_to_rotation(q.map(|x| x / n))
                .expect("unit quaternion");
        }
    }
}

fn random_body<R: Rng + ?Sized>(rng: &mut R, source: &BodySource) -> Body {
    match source {
        BodySource::Catalog(list) => list[rng.random_range(0..list.len())].clone(),
        BodySource::Random {
            semi_major_km,
            max_axis_ratio,
        } => {
            let a = semi_major_km.sample(rng);
            let c = a / rng.random_range(1.0..=*max_axis_ratio);
            let b = rng.random_range(c..=a);
            Body::new("random", a, b, c)
        }
    }
}

fn try_scene<R: Rng + ?Sized>(rng: &mut R, config: &SceneConfig) -> Result<Scene> {
    let body = random_body(rng, &config.bodies);
    let radius = body.shape()?.max_semi_axis();
    let camera = match config.camera_exact {
        Some(k) => k,
        None => config.camera.sample(rng),
    };
    let distance = match config.distance {
        DistanceRange::Km(r) => r.sample(rng),
        DistanceRange::SemiAxes(r) => r.sample(rng) * radius,
        DistanceRange::ApparentRadiusPx(r) => {
            let half_angle = (r.sample(rng) / camera.d_x()).atan();
            radius / half_angle.sin()
        }
    };
    if !(distance > radius) {
        return Err(Error::SceneRejected(
            "observer inside the bounding sphere".into(),
        ));
    }

    // Observer direction uniform on the sphere.
    let dir = Vector3::from_fn(|_, _| StandardNormal.sample(rng)).normalize();
    let position = dir * distance;
    let to_body = -dir;

    let limit = 0.5 * PI - (radius / distance).asin();
    let hi = config.off_nadir_deg.hi.to_radians().min(limit);
    let lo = config.off_nadir_deg.lo.to_radians();
    if lo > hi {
        return Err(Error::SceneRejected(
            "off-nadir range beyond the ellipse limit".into(),
        ));
    }
    let off_nadir = if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    };

    // Re-aim a uniform random attitude so the boresight sits off_nadir away
    // from the body direction.
    let r0 = random_rotation(rng);
    let x0 = r0.row(0).transpose();
    let y0 = r0.row(1).transpose();
    let perp = (y0 - to_body * to_body.dot(&y0)).normalize();
    let boresight = to_body * off_nadir.cos() + perp * off_nadir.sin();
    let x_axis = (x0 - boresight * boresight.dot(&x0)).normalize();
    let y_axis = boresight.cross(&x_axis);
    let rotation = Matrix3::from_rows(&[
        x_axis.transpose(),
        y_axis.transpose(),
        boresight.transpose(),
    ]);

    let scene = Scene {
        body,
        pose: PoseSpec {
            r_P_km: position.into(),
            q_PC: Some(rotation_to_quaternion(&rotation)),
            euler321_deg: None,
        },
        camera: Some(camera),
        noise_px: config.noise_px,
        n_points: config.n_points,
        arc_deg: config.arc_deg,
        arc_start_deg: 0.0,
        seed: rng.random(),
        image_px: config.image_px,
        epoch: None,
    };
    scene.true_image_conic()?;
    Ok(scene)
}

/// Draws a scene whose horizon images as an ellipse (inside the image when
/// bounds are configured), retrying up to [`MAX_REJECTIONS`] times.
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut last = None;
    for _ in 0..MAX_REJECTIONS {
        match try_scene(rng, config) {
            Ok(scene) => return Ok(scene),
            Err(e @ (Error::SceneRejected(_) | Error::NoHorizon(_) | Error::InvalidPose(_))) => {
                last = Some(e)
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::ConfigInfeasible(format!(
        "no acceptable scene after {MAX_REJECTIONS} attempts (last: {})",
        last.map(|e| e.to_string()).unwrap_or_default()
    )))
}

/// Deterministic per-index generator for scene `index` of a run seeded with `seed`.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Ellipse parameters of a scene's true imaged horizon.
pub fn true_ellipse(scene: &Scene) -> Result<EllipseParams> {
    scene.true_image_conic()?.ellipse_params()
}
