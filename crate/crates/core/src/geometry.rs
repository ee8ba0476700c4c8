//! Rigid transforms, pinhole cameras and the camera samplers used to
//! perturb viewpoints.
//!
//! Camera frames follow the usual vision convention: `x` right, `y` down,
//! `z` along the optical axis. Extrinsics are camera-to-world.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomStream;

/// Point every camera aims at.
pub const WORKSPACE_CENTER: [f64; 3] = [0.0, 0.0, 0.0];

const ORTHO_DRIFT: f64 = 1e-9;

/// Serializes as 16 floats: the row-major 4×4 homogeneous matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<f64>", try_from = "Vec<f64>")]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut pose = Self {
            rotation,
            translation,
        };
        pose.renormalize();
        pose
    }

    pub fn translate(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    pub fn rot_z(angle: f64) -> Self {
        Self {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), angle).matrix(),
            translation: Vector3::zeros(),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Self {
        let mut pose = Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        };
        pose.renormalize();
        pose
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }

    /// Projects the rotation back onto SO(3) when accumulated drift exceeds
    /// the tolerance.
    fn renormalize(&mut self) {
        if self.orthonormality_error() <= ORTHO_DRIFT {
            return;
        }
        let svd = self.rotation.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        self.rotation = r;
    }

    /// Row-major 4×4 homogeneous matrix.
    pub fn to_matrix16(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_matrix16(m: &[f64]) -> Result<Self> {
        if m.len() != 16 {
            return Err(Error::Shape(format!("pose needs 16 values, got {}", m.len())));
        }
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::InvalidInput("pose bottom row must be 0 0 0 1".into()));
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        let pose = Self {
            rotation,
            translation,
        };
        if pose.orthonormality_error() > 1e-6 || rotation.determinant() < 0.0 {
            return Err(Error::InvalidInput("pose rotation is not orthonormal".into()));
        }
        Ok(pose)
    }

    pub fn approx_eq(&self, other: &Pose, tol: f64) -> bool {
        (self.rotation - other.rotation).amax() <= tol
            && (self.translation - other.translation).amax() <= tol
    }
}

impl From<Pose> for Vec<f64> {
    fn from(p: Pose) -> Self {
        p.to_matrix16().to_vec()
    }
}

impl TryFrom<Vec<f64>> for Pose {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Pose::from_matrix16(&v)
    }
}

/// `inverse(e_k) ∘ e_l`: the pose of view `l` expressed in view `k`.
pub fn relative_pose(e_k: &Pose, e_l: &Pose) -> Pose {
    e_k.inverse().compose(e_l)
}

/// Per-scene translation scale: mean distance of camera positions from
/// their centroid.
pub fn translation_scale(extrinsics: &[Pose]) -> Result<f64> {
    if extrinsics.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "translation scale needs at least 2 poses, got {}",
            extrinsics.len()
        )));
    }
    let n = extrinsics.len() as f64;
    let centroid = extrinsics
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.translation)
        / n;
    let z = extrinsics
        .iter()
        .map(|p| (p.translation - centroid).norm())
        .sum::<f64>()
        / n;
    if z < 1e-9 {
        return Err(Error::DegenerateScene(z));
    }
    Ok(z)
}

/// Regression target for a relative pose: flattened rotation (row-major)
/// followed by the translation divided by the scene scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseTarget(pub [f64; 12]);

impl PoseTarget {
    pub fn rotation_block(&self) -> Matrix3<f64> {
        let v = &self.0;
        Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8])
    }

    pub fn translation_block(&self) -> Vector3<f64> {
        Vector3::new(self.0[9], self.0[10], self.0[11])
    }
}

pub fn pose_target(rel: &Pose, z: f64) -> Result<PoseTarget> {
    if !(z > 0.0) {
        return Err(Error::InvalidInput(format!("scale must be positive, got {z}")));
    }
    let mut out = [0.0; 12];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = rel.rotation[(r, c)];
        }
    }
    for i in 0..3 {
        out[9 + i] = rel.translation[i] / z;
    }
    Ok(PoseTarget(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub extrinsics: Pose,
    pub fov_y: f64,
    pub width: u32,
    pub height: u32,
}

/// A world point projected into normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Camera {
    pub fn new(extrinsics: Pose, fov_y: f64, width: u32, height: u32) -> Result<Self> {
        if !(fov_y > 0.0 && fov_y < std::f64::consts::PI) {
            return Err(Error::InvalidInput(format!("fov {fov_y} outside (0, π)")));
        }
        if width < 8 || height < 8 {
            return Err(Error::InvalidInput(format!(
                "image size {width}x{height} below 8x8"
            )));
        }
        Ok(Self {
            extrinsics,
            fov_y,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target` with world-z up and no roll.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, fov_y: f64, width: u32, height: u32) -> Result<Self> {
        Self::new(look_at_pose(eye, target)?, fov_y, width, height)
    }

    /// Camera on a sphere around the workspace center.
    pub fn orbit(azimuth: f64, elevation: f64, radius: f64, fov_y: f64, width: u32, height: u32) -> Result<Self> {
        let c = center();
        let eye = c + radius
            * Vector3::new(
                elevation.cos() * azimuth.cos(),
                elevation.cos() * azimuth.sin(),
                elevation.sin(),
            );
        Self::look_at(eye, c, fov_y, width, height)
    }

    pub fn position(&self) -> Vector3<f64> {
        self.extrinsics.translation
    }

    /// Focal length in pixels (vertical field of view).
    pub fn focal_px(&self) -> f64 {
        self.height as f64 / (2.0 * (self.fov_y / 2.0).tan())
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Projection> {
        let pc = self.extrinsics.inverse().transform_point(p);
        let depth = pc[2];
        if depth <= 1e-6 {
            return Err(Error::BehindCamera(depth));
        }
        let f = self.focal_px();
        Ok(Projection {
            u: 0.5 + f * pc[0] / depth / self.width as f64,
            v: 0.5 + f * pc[1] / depth / self.height as f64,
            depth,
        })
    }

    /// World-space ray direction through pixel center `(px, py)`.
    pub fn ray_direction(&self, px: f64, py: f64) -> Vector3<f64> {
        let f = self.focal_px();
        let x = (px - self.width as f64 / 2.0) / f;
        let y = (py - self.height as f64 / 2.0) / f;
        (self.extrinsics.rotation * Vector3::new(x, y, 1.0)).normalize()
    }

    /// Spherical coordinates of the camera position around the workspace
    /// center: (azimuth, elevation, radius).
    pub fn spherical(&self) -> (f64, f64, f64) {
        let d = self.position() - center();
        let radius = d.norm();
        (d[1].atan2(d[0]), (d[2] / radius).asin(), radius)
    }
}

fn center() -> Vector3<f64> {
    Vector3::from(WORKSPACE_CENTER)
}

pub fn look_at_pose(eye: Vector3<f64>, target: Vector3<f64>) -> Result<Pose> {
    let forward = target - eye;
    if forward.norm() < 1e-9 {
        return Err(Error::InvalidInput("camera eye coincides with target".into()));
    }
    let forward = forward.normalize();
    let up = Vector3::z();
    let right = forward.cross(&up);
    if right.norm() < 1e-6 {
        return Err(Error::InvalidInput("camera looks straight along the up axis".into()));
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_columns(&[right, down, forward]);
    Ok(Pose::new(rotation, eye))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PerturbationRegime {
    Nominal,
    Rot30,
    Rot60Translate,
    UniformHemisphere,
}

impl PerturbationRegime {
    pub const ALL: [PerturbationRegime; 4] = [
        PerturbationRegime::Nominal,
        PerturbationRegime::Rot30,
        PerturbationRegime::Rot60Translate,
        PerturbationRegime::UniformHemisphere,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Nominal => "nominal",
            Self::Rot30 => "rot30",
            Self::Rot60Translate => "rot60_translate",
            Self::UniformHemisphere => "uniform",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }
}

pub const HEMISPHERE_ELEVATION: (f64, f64) = (15.0, 80.0);
pub const HEMISPHERE_RADIUS: (f64, f64) = (1.5, 2.6);
pub const LATERAL_OFFSET: f64 = 0.3;

/// Rotates the base camera about the vertical axis through the workspace
/// center. Radius and elevation are preserved.
pub fn rotate_azimuth(base: &Camera, delta: f64) -> Camera {
    let c = center();
    let spin = Pose::translate(c[0], c[1], c[2])
        .compose(&Pose::rot_z(delta))
        .compose(&Pose::translate(-c[0], -c[1], -c[2]));
    Camera {
        extrinsics: spin.compose(&base.extrinsics),
        ..*base
    }
}

pub fn sample_camera(rng: &mut RandomStream, regime: PerturbationRegime, base: &Camera) -> Camera {
    let sign = |rng: &mut RandomStream| if rng.random::<bool>() { 1.0 } else { -1.0 };
    match regime {
        PerturbationRegime::Nominal => *base,
        PerturbationRegime::Rot30 => rotate_azimuth(base, sign(rng) * 30f64.to_radians()),
        PerturbationRegime::Rot60Translate => {
            let mut cam = rotate_azimuth(base, sign(rng) * 60f64.to_radians());
            let right: Vector3<f64> = cam.extrinsics.rotation.column(0).into();
            cam.extrinsics.translation += sign(rng) * LATERAL_OFFSET * right;
            cam
        }
        PerturbationRegime::UniformHemisphere => {
            let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
            let (lo, hi) = HEMISPHERE_ELEVATION;
            let elevation = rng.random_range(lo.to_radians()..=hi.to_radians());
            let radius = rng.random_range(HEMISPHERE_RADIUS.0..=HEMISPHERE_RADIUS.1);
            Camera::orbit(azimuth, elevation, radius, base.fov_y, base.width, base.height)
                .expect("hemisphere cameras are never degenerate")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn naive_matmul(a: &Matrix3<f64>, b: &Matrix3<f64>) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                for k in 0..3 {
                    *cell += a[(i, k)] * b[(k, j)];
                }
            }
        }
        out
    }

    fn base_camera() -> Camera {
        Camera::orbit(0.0, 45f64.to_radians(), 2.2, 60f64.to_radians(), 48, 48).unwrap()
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            -PI..PI,
            -1.5f64..1.5,
            -PI..PI,
            prop::array::uniform3(-3.0f64..3.0),
        )
            .prop_map(|(r, p, y, t)| {
                let rot = Rotation3::from_euler_angles(r, p, y);
                Pose::new(*rot.matrix(), Vector3::from(t))
            })
    }

    #[test]
    fn compose_identity() {
        let id = Pose::identity();
        assert!(id.compose(&id).approx_eq(&id, 0.0));
    }

    #[test]
    fn compose_rot_z_matches_matrix_product() {
        let r90 = Pose::rot_z(PI / 2.0);
        let got = r90.compose(&r90);
        let want = naive_matmul(&r90.rotation, &r90.rotation);
        for i in 0..3 {
            for j in 0..3 {
                assert!((got.rotation[(i, j)] - want[i][j]).abs() < 1e-12);
            }
        }
        // and the product really is a half turn
        assert!(got.approx_eq(&Pose::rot_z(PI), 1e-12));
    }

    #[test]
    fn relative_pose_examples() {
        let p = Pose::new(*Rotation3::from_euler_angles(0.1, 0.2, 0.3).matrix(), Vector3::new(1.0, 2.0, 3.0));
        assert!(relative_pose(&p, &p).approx_eq(&Pose::identity(), 1e-12));
        let t = Pose::translate(1.0, 0.0, 0.0);
        assert!(relative_pose(&Pose::identity(), &t).approx_eq(&t, 0.0));
        let rel = relative_pose(&Pose::rot_z(30f64.to_radians()), &Pose::rot_z(90f64.to_radians()));
        // oracle: R30ᵀ · R90 by explicit products
        let a = Pose::rot_z(30f64.to_radians()).rotation.transpose();
        let want = naive_matmul(&a, &Pose::rot_z(90f64.to_radians()).rotation);
        for i in 0..3 {
            for j in 0..3 {
                assert!((rel.rotation[(i, j)] - want[i][j]).abs() < 1e-12);
            }
        }
        assert!(rel.approx_eq(&Pose::rot_z(60f64.to_radians()), 1e-12));
    }

    #[test]
    fn translation_scale_examples() {
        let d = 1.7;
        let ring: Vec<Pose> = (0..4)
            .map(|k| {
                let a = k as f64 * PI / 2.0;
                Pose::translate(3.0 + d * a.cos(), -1.0 + d * a.sin(), 0.5)
            })
            .collect();
        assert!((translation_scale(&ring).unwrap() - d).abs() < 1e-9);

        let three = [
            Pose::translate(1.0, 0.0, 0.0),
            Pose::translate(-1.0, 0.0, 0.0),
            Pose::translate(0.0, 0.0, 0.0),
        ];
        assert!((translation_scale(&three).unwrap() - 2.0 / 3.0).abs() < 1e-12);

        let same = [Pose::translate(1.0, 1.0, 1.0); 3];
        assert!(matches!(translation_scale(&same), Err(Error::DegenerateScene(_))));
        assert!(matches!(translation_scale(&same[..1]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pose_target_examples() {
        let t = pose_target(&Pose::identity(), 1.0).unwrap();
        assert_eq!(t.0, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);

        let t = pose_target(&Pose::translate(2.0, 0.0, 0.0), 2.0).unwrap();
        assert_eq!(t.translation_block(), Vector3::new(1.0, 0.0, 0.0));

        let rel = Pose::rot_z(PI / 2.0).compose(&Pose::translate(0.0, 1.0, 0.0));
        let t = pose_target(&rel, 0.5).unwrap();
        assert!((t.rotation_block() - Pose::rot_z(PI / 2.0).rotation).amax() < 1e-12);
        // translation of rotZ(90)·translate(0,1,0) is rotZ(90)·(0,1,0) = (-1,0,0)
        assert!((t.translation_block() - Vector3::new(-2.0, 0.0, 0.0)).amax() < 1e-12);

        assert!(pose_target(&Pose::identity(), 0.0).is_err());
        assert!(pose_target(&Pose::identity(), -1.0).is_err());
    }

    #[test]
    fn project_examples() {
        let cam = Camera::look_at(Vector3::new(0.0, -3.0, 0.0), Vector3::zeros(), 60f64.to_radians(), 64, 48).unwrap();
        let p = cam.project(&Vector3::new(0.0, 5.0, 0.0)).unwrap();
        assert!((p.u - 0.5).abs() < 1e-12 && (p.v - 0.5).abs() < 1e-12);
        assert!((p.depth - 8.0).abs() < 1e-12);

        assert!(matches!(cam.project(&Vector3::new(0.0, -4.0, 0.0)), Err(Error::BehindCamera(_))));
        assert!(cam.project(&Vector3::new(0.0, -3.0, 0.0)).is_err());

        // lateral offset d at depth z: u = 0.5 + d / (2 z tan(θ/2)) · h/w
        let (d, z, theta) = (0.4, 3.0, 60f64.to_radians());
        let p = cam.project(&Vector3::new(d, 0.0, 0.0)).unwrap();
        let want = 0.5 + d / (2.0 * z * (theta / 2.0).tan()) * (48.0 / 64.0);
        assert!((p.u - want).abs() < 1e-12);
        assert!((p.v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn camera_validation() {
        assert!(Camera::new(Pose::identity(), 0.0, 48, 48).is_err());
        assert!(Camera::new(Pose::identity(), PI, 48, 48).is_err());
        assert!(Camera::new(Pose::identity(), 1.0, 7, 48).is_err());
        assert!(Camera::new(Pose::identity(), 1.0, 8, 8).is_ok());
    }

    #[test]
    fn sample_camera_regimes() {
        let base = base_camera();
        let mut rng = stream(3);
        assert_eq!(sample_camera(&mut rng, PerturbationRegime::Nominal, &base), base);
        let r0 = (base.position() - center()).norm();
        for _ in 0..50 {
            let cam = sample_camera(&mut rng, PerturbationRegime::Rot30, &base);
            assert!(((cam.position() - center()).norm() - r0).abs() < 1e-9);
            let (az, _, _) = cam.spherical();
            assert!((az.abs() - 30f64.to_radians()).abs() < 1e-9);
            // still aimed at the center
            let p = cam.project(&center()).unwrap();
            assert!((p.u - 0.5).abs() < 1e-9 && (p.v - 0.5).abs() < 1e-9);

            let cam = sample_camera(&mut rng, PerturbationRegime::Rot60Translate, &base);
            let rotated_only = rotate_azimuth(&base, cam.spherical().0.signum() * 60f64.to_radians());
            let offset = (cam.position() - rotated_only.position()).norm();
            assert!(offset <= LATERAL_OFFSET + 1e-9);
            assert!(cam.extrinsics.orthonormality_error() < 1e-9);
        }
        for _ in 0..500 {
            let cam = sample_camera(&mut rng, PerturbationRegime::UniformHemisphere, &base);
            let (_, el, r) = cam.spherical();
            assert!(el >= 15f64.to_radians() - 1e-9 && el <= 80f64.to_radians() + 1e-9);
            assert!((HEMISPHERE_RADIUS.0 - 1e-9..=HEMISPHERE_RADIUS.1 + 1e-9).contains(&r));
            let p = cam.project(&center()).unwrap();
            assert!((p.u - 0.5).abs() < 1e-9 && (p.v - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn hemisphere_azimuth_is_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let base = base_camera();
        let mut rng = stream(11);
        let n = 10_000;
        let mut bins = [0usize; 12];
        for _ in 0..n {
            let cam = sample_camera(&mut rng, PerturbationRegime::UniformHemisphere, &base);
            let az = cam.spherical().0.rem_euclid(std::f64::consts::TAU);
            bins[((az / std::f64::consts::TAU * 12.0) as usize).min(11)] += 1;
        }
        let expected = n as f64 / 12.0;
        let chi2: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(11.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2}, p {p}");
    }

    #[test]
    fn matrix16_roundtrip() {
        let p = Pose::new(*Rotation3::from_euler_angles(0.3, -0.2, 1.1).matrix(), Vector3::new(0.5, -2.0, 1.0));
        let m = p.to_matrix16();
        assert_eq!(Pose::from_matrix16(&m).unwrap(), p);
        assert!(Pose::from_matrix16(&m[..12]).is_err());
    }

    proptest! {
        #[test]
        fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(l.approx_eq(&r, 1e-8));
        }

        #[test]
        fn inverse_cancels(a in arb_pose()) {
            prop_assert!(a.compose(&a.inverse()).approx_eq(&Pose::identity(), 1e-9));
            prop_assert!(relative_pose(&a, &a).approx_eq(&Pose::identity(), 1e-9));
            prop_assert!(a.orthonormality_error() <= 1e-9);
        }

        #[test]
        fn scale_invariant_under_rigid_motion(
            motion in arb_pose(),
            pts in prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), 2..8),
        ) {
            let poses: Vec<Pose> = pts.iter().map(|t| Pose::translate(t[0], t[1], t[2])).collect();
            if let Ok(z) = translation_scale(&poses) {
                let moved: Vec<Pose> = poses.iter().map(|p| motion.compose(p)).collect();
                let z2 = translation_scale(&moved).unwrap();
                prop_assert!((z - z2).abs() < 1e-9);
            }
        }

        #[test]
        fn pose_target_rotation_block_orthonormal(a in arb_pose(), b in arb_pose(), z in 0.1f64..5.0) {
            let t = pose_target(&relative_pose(&a, &b), z).unwrap();
            let r = t.rotation_block();
            prop_assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-6);
        }
    }
}
