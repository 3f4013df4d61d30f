//! Pinhole camera model, rigid poses and two-view epipolar algebra.
//!
//! Pixel coordinates are continuous, origin at the top-left, `u` to the right
//! and `v` downward. Integer coordinates sit at pixel centers. A [`Pose`]
//! maps source-camera coordinates into target-camera coordinates:
//! `X_t = R * X_s + t`.

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Smallest admissible camera-frame depth for projection.
pub const DEFAULT_Z_MIN: f64 = 1e-6;

const ROTATION_TOL: f64 = 1e-9;
const MIN_BASELINE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn homogeneous(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, 1.0)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn identity() -> Self {
        Self {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|x| x.is_finite());
        if !all_finite {
            return Err(Error::invalid("intrinsics must be finite"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Closed-form inverse of the upper-triangular calibration matrix.
    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

impl<'de> Deserialize<'de> for Intrinsics {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            fx: f64,
            fy: f64,
            cx: f64,
            cy: f64,
        }
        let raw = Raw::deserialize(deserializer)?;
        Intrinsics::new(raw.fx, raw.fy, raw.cx, raw.cy).map_err(serde::de::Error::custom)
    }
}

/// Rigid transform from the source camera frame to the target camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().all(|x| x.is_finite()) || !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("pose entries must be finite"));
        }
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        let worst = gram.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if worst > ROTATION_TOL {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (max |R^T R - I| = {worst:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::invalid(format!(
                "rotation determinant must be 1, got {det}"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation of `angle` radians about `axis` followed by translation `t`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, t: Vector3<f64>) -> Result<Self> {
        if axis.norm() == 0.0 {
            if angle == 0.0 {
                return Ok(Self::from_translation(t));
            }
            return Err(Error::invalid("rotation axis must be non-zero"));
        }
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self::new(*rot.matrix(), t)
    }

    /// Parses a row-major 4x4 homogeneous matrix.
    pub fn from_homogeneous(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            return Err(Error::invalid(format!(
                "homogeneous pose needs 16 numbers, got {}",
                values.len()
            )));
        }
        let m = Matrix4::from_row_slice(values);
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid("last row of a homogeneous pose must be [0, 0, 0, 1]"));
        }
        let r = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::new(r, t)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Returns `other ∘ self`.
    pub fn then(&self, other: &Pose) -> Self {
        Self {
            rotation: other.rotation * self.rotation,
            translation: other.rotation * self.translation + other.translation,
        }
    }

    /// The same rotation with translation multiplied by `factor`.
    pub fn scaled_translation(&self, factor: f64) -> Self {
        Self {
            rotation: self.rotation,
            translation: self.translation * factor,
        }
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }
}

#[derive(Serialize, Deserialize)]
struct PoseJson {
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PoseRepr {
    Split(PoseJson),
    Homogeneous(Vec<f64>),
    Wrapped { matrix: Vec<f64> },
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        PoseJson {
            r: self.rotation_row_major(),
            t: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let pose = match PoseRepr::deserialize(deserializer)? {
            PoseRepr::Split(p) => Pose::new(
                Matrix3::from_row_slice(&p.r),
                Vector3::new(p.t[0], p.t[1], p.t[2]),
            ),
            PoseRepr::Homogeneous(m) | PoseRepr::Wrapped { matrix: m } => Pose::from_homogeneous(&m),
        };
        pose.map_err(serde::de::Error::custom)
    }
}

/// A 3x3 fundamental matrix, defined up to scale. `p_t^T F p_s = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix(Matrix3<f64>);

impl FundamentalMatrix {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("fundamental matrix must be finite"));
        }
        if m.iter().all(|&x| x == 0.0) {
            return Err(Error::invalid("fundamental matrix is all zero"));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.0 * factor)
    }

    pub fn singular_values(&self) -> Vector3<f64> {
        let mut s = self.0.svd(false, false).singular_values;
        s.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
        s
    }

    pub fn row_major(&self) -> [f64; 9] {
        let m = &self.0;
        std::array::from_fn(|i| m[(i / 3, i % 3)])
    }
}

impl Serialize for FundamentalMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.row_major().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for FundamentalMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let v = <[f64; 9]>::deserialize(deserializer)?;
        FundamentalMatrix::new(Matrix3::from_row_slice(&v)).map_err(serde::de::Error::custom)
    }
}

/// Lifts a pixel with known depth into the camera frame: `depth * K^-1 (u, v, 1)`.
pub fn backproject(p: Pixel, depth: f64, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(depth.is_finite() && depth > 0.0) {
        return Err(Error::invalid(format!("depth must be positive and finite, got {depth}")));
    }
    // Written out rather than via inverse_matrix() so Z is exactly `depth`.
    Ok(Vector3::new(
        depth * (p.u - k.cx) / k.fx,
        depth * (p.v - k.cy) / k.fy,
        depth,
    ))
}

pub fn transform_point(p: &Vector3<f64>, pose: &Pose) -> Vector3<f64> {
    pose.apply(p)
}

pub fn project(p: &Vector3<f64>, k: &Intrinsics) -> Result<Pixel> {
    project_with_z_min(p, k, DEFAULT_Z_MIN)
}

pub fn project_with_z_min(p: &Vector3<f64>, k: &Intrinsics, z_min: f64) -> Result<Pixel> {
    if !(p.z > z_min) {
        return Err(Error::BehindCamera { z: p.z });
    }
    Ok(Pixel::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// Cross-product matrix: `skew(t) * x == t.cross(x)`.
pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// `F = K^-T [t]x R K^-1` for a camera pair sharing intrinsics `k`.
pub fn fundamental_from_pose(k: &Intrinsics, pose: &Pose) -> Result<FundamentalMatrix> {
    let norm = pose.translation().norm();
    if norm < MIN_BASELINE {
        return Err(Error::DegenerateMotion { norm });
    }
    let k_inv = k.inverse_matrix();
    let essential = skew(pose.translation()) * pose.rotation();
    FundamentalMatrix::new(k_inv.transpose() * essential * k_inv)
}

fn point_line_distance(line: &Vector3<f64>, p: &Vector3<f64>, scale: f64) -> Result<f64> {
    let normal = (line.x * line.x + line.y * line.y).sqrt();
    if !(normal > scale * 1e-15) {
        return Err(Error::DegenerateLine);
    }
    Ok(line.dot(p).abs() / normal)
}

/// Distance of `p_t` to the epipolar line `F p_s` in the target image.
pub fn target_epipolar_distance(f: &FundamentalMatrix, p_s: Pixel, p_t: Pixel) -> Result<f64> {
    let m = f.matrix();
    let scale = m.norm();
    point_line_distance(&(m * p_s.homogeneous()), &p_t.homogeneous(), scale)
}

/// Sum of the two point-to-epipolar-line distances (target and source side).
pub fn symmetric_epipolar_distance(f: &FundamentalMatrix, p_s: Pixel, p_t: Pixel) -> Result<f64> {
    let m = f.matrix();
    let scale = m.norm();
    let hs = p_s.homogeneous();
    let ht = p_t.homogeneous();
    let d_t = point_line_distance(&(m * hs), &ht, scale)?;
    let d_s = point_line_distance(&(m.transpose() * ht), &hs, scale)?;
    Ok(d_t + d_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let t = Vector3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
        Pose::from_axis_angle(axis, rng.random_range(0.0..0.3), t).unwrap()
    }

    fn random_intrinsics(rng: &mut impl Rng) -> Intrinsics {
        Intrinsics::new(
            rng.random_range(100.0..800.0),
            rng.random_range(100.0..800.0),
            rng.random_range(100.0..400.0),
            rng.random_range(100.0..400.0),
        )
        .unwrap()
    }

    #[test]
    fn backproject_examples() {
        let p = backproject(Pixel::new(2.0, 3.0), 4.0, &Intrinsics::identity()).unwrap();
        assert_eq!(p, Vector3::new(8.0, 12.0, 4.0));

        let k = Intrinsics::new(100.0, 100.0, 320.0, 240.0).unwrap();
        let p = backproject(Pixel::new(320.0, 240.0), 50.0, &k).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 50.0));
    }

    #[test]
    fn backproject_matches_matrix_inverse() {
        let k = Intrinsics::new(200.0, 150.0, 10.0, 20.0).unwrap();
        let p = backproject(Pixel::new(210.0, 170.0), 2.0, &k).unwrap();
        let oracle = k.matrix().try_inverse().unwrap() * Vector3::new(210.0, 170.0, 1.0) * 2.0;
        assert_abs_diff_eq!(p, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(p, Vector3::new(2.0, 2.0, 2.0), epsilon = 1e-12);
    }

    #[test]
    fn backproject_rejects_bad_depth() {
        let k = Intrinsics::identity();
        for d in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                backproject(Pixel::new(0.0, 0.0), d, &k),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn transform_examples() {
        let p = Vector3::new(0.3, -2.0, 5.0);
        assert_eq!(transform_point(&p, &Pose::identity()), p);
        let shift = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(
            transform_point(&Vector3::new(0.0, 0.0, 1.0), &shift),
            Vector3::new(1.0, 0.0, 1.0)
        );
        let rz = Pose::from_axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2, Vector3::zeros())
            .unwrap();
        assert_abs_diff_eq!(
            transform_point(&Vector3::new(1.0, 0.0, 0.0), &rz),
            Vector3::new(0.0, 1.0, 0.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn project_examples() {
        let px = project(&Vector3::new(8.0, 12.0, 4.0), &Intrinsics::identity()).unwrap();
        assert_eq!(px, Pixel::new(2.0, 3.0));
        assert!(matches!(
            project(&Vector3::new(1.0, 1.0, 0.0), &Intrinsics::identity()),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn skew_definition() {
        let s = skew(&Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(s, Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0));
    }

    #[test]
    fn skew_identities_for_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let t = Vector3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            );
            let x = Vector3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            );
            let s = skew(&t);
            assert_eq!(s.transpose(), -s);
            assert_abs_diff_eq!(s * t, Vector3::zeros(), epsilon = 1e-12);
            assert_abs_diff_eq!(s * x, t.cross(&x), epsilon = 1e-12);
        }
    }

    #[test]
    fn fundamental_for_pure_x_translation() {
        let pose = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let f = fundamental_from_pose(&Intrinsics::identity(), &pose).unwrap();
        assert_eq!(
            *f.matrix(),
            Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)
        );
        // Same scanline: P = (0, 0, 1) seen at (0, 0), shifted by one unit it lands on v = 0.
        let ps = Pixel::new(0.0, 0.0);
        let pt = Pixel::new(5.0, 0.0);
        let residual = pt.homogeneous().dot(&(f.matrix() * ps.homogeneous()));
        assert_eq!(residual, 0.0);
    }

    #[test]
    fn fundamental_rejects_pure_rotation() {
        let pose = Pose::from_axis_angle(Vector3::y(), 0.1, Vector3::zeros()).unwrap();
        assert!(matches!(
            fundamental_from_pose(&Intrinsics::identity(), &pose),
            Err(Error::DegenerateMotion { .. })
        ));
    }

    #[test]
    fn epipolar_constraint_from_projection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let k = random_intrinsics(&mut rng);
            let pose = random_pose(&mut rng);
            let f = fundamental_from_pose(&k, &pose).unwrap();
            let fm = f.matrix() / f.matrix().norm();
            for _ in 0..20 {
                let p = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(2.0..6.0),
                );
                let ps = project(&p, &k).unwrap();
                let pt = project(&pose.apply(&p), &k).unwrap();
                let r = pt.homogeneous().dot(&(fm * ps.homogeneous()));
                assert!(r.abs() < 1e-9, "residual {r}");
                let d = symmetric_epipolar_distance(&f, ps, pt).unwrap();
                assert!(d < 1e-9, "distance {d}");
            }
        }
    }

    #[test]
    fn fundamental_has_rank_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let k = random_intrinsics(&mut rng);
            let pose = random_pose(&mut rng);
            if pose.translation().norm() < 1e-3 {
                continue;
            }
            let s = fundamental_from_pose(&k, &pose).unwrap().singular_values();
            assert!(s[2] < 1e-9 * s[0], "singular values {s:?}");
            assert!(s[1] > 1e-9 * s[0]);
        }
    }

    #[test]
    fn symmetric_distance_hand_example() {
        let f = FundamentalMatrix::new(Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0))
            .unwrap();
        let d = symmetric_epipolar_distance(&f, Pixel::new(0.0, 0.0), Pixel::new(0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(d, 2.0, epsilon = 1e-15);
        let d2 = symmetric_epipolar_distance(&f.scaled(2.0).unwrap(), Pixel::new(0.0, 0.0), Pixel::new(0.0, 1.0))
            .unwrap();
        assert_abs_diff_eq!(d2, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_line_is_reported() {
        // F p_s = (0, 0, c) whenever p_s is the epipole direction.
        let f = FundamentalMatrix::new(Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0))
            .unwrap();
        assert!(matches!(
            symmetric_epipolar_distance(&f, Pixel::new(1.0, 2.0), Pixel::new(3.0, 4.0)),
            Err(Error::DegenerateLine)
        ));
    }

    #[test]
    fn pose_json_round_trip_and_homogeneous() {
        let pose = Pose::from_axis_angle(Vector3::new(0.2, 1.0, -0.3), 0.4, Vector3::new(1.0, 2.0, 3.0))
            .unwrap();
        let s = serde_json::to_string(&pose).unwrap();
        let back: Pose = serde_json::from_str(&s).unwrap();
        assert_eq!(back, pose);

        let h = "[1,0,0,0.5, 0,1,0,0, 0,0,1,-2, 0,0,0,1]";
        let p: Pose = serde_json::from_str(h).unwrap();
        assert_eq!(*p.translation(), Vector3::new(0.5, 0.0, -2.0));
        let wrapped: Pose = serde_json::from_str(&format!("{{\"matrix\": {h}}}")).unwrap();
        assert_eq!(wrapped, p);

        let bad = r#"{"R":[1,0,0,0,1,0,0,0,2],"t":[0,0,0]}"#;
        assert!(serde_json::from_str::<Pose>(bad).is_err());
    }

    #[test]
    fn intrinsics_json() {
        let k: Intrinsics = serde_json::from_str(r#"{"fx":500,"fy":510,"cx":320,"cy":240}"#).unwrap();
        assert_eq!(k, Intrinsics::new(500.0, 510.0, 320.0, 240.0).unwrap());
        assert!(serde_json::from_str::<Intrinsics>(r#"{"fx":-5,"fy":510,"cx":320,"cy":240}"#).is_err());
    }

    proptest! {
        #[test]
        fn project_backproject_round_trip(
            u in -500.0f64..1500.0, v in -500.0f64..1500.0, d in 0.01f64..100.0,
            fx in 10.0f64..2000.0, fy in 10.0f64..2000.0, cx in 0.0f64..800.0, cy in 0.0f64..800.0,
        ) {
            let k = Intrinsics::new(fx, fy, cx, cy).unwrap();
            let p = backproject(Pixel::new(u, v), d, &k).unwrap();
            prop_assert_eq!(p.z, d);
            let q = project(&transform_point(&p, &Pose::identity()), &k).unwrap();
            prop_assert!((q.u - u).abs() < 1e-9 && (q.v - v).abs() < 1e-9);
        }
    }
}
