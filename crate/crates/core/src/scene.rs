//! Frame-tagged point clouds, rigid transforms, pinhole cameras and boxes.
//!
//! Camera frames follow the pinhole convention: z forward, x right, y down.
//! Everything is computed in `f64`.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

/// Identifies the convention written into interchange headers.
pub const CAMERA_CONVENTION: &str = "z_forward_x_right_y_down";

const UNIT_QUATERNION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordFrame {
    Sensor,
    Ego,
    Global,
}

/// Timestamped points in one coordinate frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    timestamps: Vec<f64>,
    frame: CoordFrame,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, timestamps: Vec<f64>, frame: CoordFrame) -> Result<Self> {
        if points.len() != timestamps.len() {
            return Err(Error::DimensionMismatch(points.len(), timestamps.len()));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("point coordinates"));
        }
        if timestamps.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("point timestamps"));
        }
        if timestamps.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::schema(None, "timestamps", "not monotone non-decreasing"));
        }
        Ok(Self {
            points,
            timestamps,
            frame,
        })
    }

    /// All points share one timestamp.
    pub fn from_points(points: Vec<Point3>, timestamp: f64, frame: CoordFrame) -> Result<Self> {
        let timestamps = vec![timestamp; points.len()];
        Self::new(points, timestamps, frame)
    }

    pub fn empty(frame: CoordFrame) -> Self {
        Self {
            points: Vec::new(),
            timestamps: Vec::new(),
            frame,
        }
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn frame(&self) -> CoordFrame {
        self.frame
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points at `indices`, in ascending index order so timestamps stay monotone.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let mut idx = indices.to_vec();
        idx.sort_unstable();
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            timestamps: idx.iter().map(|&i| self.timestamps[i]).collect(),
            frame: self.frame,
        }
    }

    pub(crate) fn into_parts(self) -> (Vec<Point3>, Vec<f64>) {
        (self.points, self.timestamps)
    }
}

/// Proper rigid motion `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTransform", into = "RawTransform")]
pub struct RigidTransform {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTransform {
    /// (w, x, y, z)
    rotation: [f64; 4],
    translation: [f64; 3],
}

impl TryFrom<RawTransform> for RigidTransform {
    type Error = Error;

    fn try_from(raw: RawTransform) -> Result<Self> {
        RigidTransform::new(raw.rotation, raw.translation)
    }
}

impl From<RigidTransform> for RawTransform {
    fn from(t: RigidTransform) -> Self {
        RawTransform {
            rotation: t.quaternion_wxyz(),
            translation: t.translation.into(),
        }
    }
}

impl RigidTransform {
    /// Quaternion given as `(w, x, y, z)`; it must already be unit length.
    pub fn new(wxyz: [f64; 4], translation: [f64; 3]) -> Result<Self> {
        if !wxyz.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite component".into()));
        }
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        let norm = q.norm();
        if (norm - 1.0).abs() > UNIT_QUATERNION_TOL {
            return Err(Error::InvalidTransform(format!("quaternion norm {norm} is not 1")));
        }
        Ok(Self {
            rotation: UnitQuaternion::new_unchecked(q),
            translation: Vector3::from(translation),
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation about +z by `yaw` followed by `translation`.
    pub fn from_yaw(yaw: f64, translation: Point3) -> Self {
        Self {
            rotation: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            translation,
        }
    }

    /// `m` must be a proper rotation matrix (orthonormal, det +1).
    pub fn from_rotation_matrix(m: Matrix3<f64>, translation: Point3) -> Self {
        let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
        Self {
            rotation,
            translation,
        }
    }

    pub fn translation(&self) -> Point3 {
        self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn is_identity(&self) -> bool {
        self.quaternion_wxyz() == [1.0, 0.0, 0.0, 0.0] && self.translation == Vector3::zeros()
    }

    /// `self ∘ inner`: applies `inner` first.
    pub fn compose(&self, inner: &RigidTransform) -> RigidTransform {
        let rotation = UnitQuaternion::new_normalize(*(self.rotation * inner.rotation).quaternion());
        RigidTransform {
            rotation,
            translation: self.rotation * inner.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rotation = self.rotation.inverse();
        RigidTransform {
            rotation,
            translation: -(rotation * self.translation),
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &Point3) -> Point3 {
        self.rotation * v
    }

    /// Heading of the rotated x axis projected on the xy plane.
    pub fn yaw(&self) -> f64 {
        let x = self.rotation * Vector3::x();
        x.y.atan2(x.x)
    }
}

/// Maps every point through `t` and tags the result with `target`.
pub fn transform_points(cloud: &PointCloud, t: &RigidTransform, target: CoordFrame) -> PointCloud {
    if t.is_identity() {
        let mut out = cloud.clone();
        out.frame = target;
        return out;
    }
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply(p)).collect(),
        timestamps: cloud.timestamps.clone(),
        frame: target,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

/// Pinhole camera with zero skew. `extrinsic` maps ego coordinates into the camera frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCalib", into = "RawCalib")]
pub struct CameraCalib {
    pub camera_id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub extrinsic: RigidTransform,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCalib {
    camera_id: String,
    intrinsics: [[f64; 3]; 3],
    extrinsic: RigidTransform,
    width: u32,
    height: u32,
}

impl TryFrom<RawCalib> for CameraCalib {
    type Error = Error;

    fn try_from(raw: RawCalib) -> Result<Self> {
        let k = raw.intrinsics;
        if k[0][1] != 0.0 || k[1][0] != 0.0 || k[2] != [0.0, 0.0, 1.0] {
            return Err(Error::schema(
                None,
                format!("cameras[{}].intrinsics", raw.camera_id),
                "expected [[fx,0,cx],[0,fy,cy],[0,0,1]]",
            ));
        }
        CameraCalib::new(raw.camera_id, k[0][0], k[1][1], k[0][2], k[1][2], raw.width, raw.height, raw.extrinsic)
    }
}

impl From<CameraCalib> for RawCalib {
    fn from(c: CameraCalib) -> Self {
        RawCalib {
            intrinsics: [[c.fx, 0.0, c.cx], [0.0, c.fy, c.cy], [0.0, 0.0, 1.0]],
            camera_id: c.camera_id,
            extrinsic: c.extrinsic,
            width: c.width,
            height: c.height,
        }
    }
}

impl CameraCalib {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        camera_id: impl Into<String>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        extrinsic: RigidTransform,
    ) -> Result<Self> {
        let camera_id = camera_id.into();
        let field = |name: &str| format!("cameras[{camera_id}].{name}");
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::schema(None, field("intrinsics"), "focal lengths must be positive"));
        }
        if !(cx > 0.0 && cx < width as f64) || !(cy > 0.0 && cy < height as f64) {
            return Err(Error::schema(None, field("intrinsics"), "principal point outside the image"));
        }
        Ok(Self {
            camera_id,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            extrinsic,
        })
    }

    /// Ego-frame point to pixel, `None` when behind the camera.
    pub fn project_ego(&self, p_ego: &Point3) -> Option<Pixel> {
        project_point(&self.extrinsic.apply(p_ego), self)
    }

    /// Azimuth of the optical axis in the ego frame.
    pub fn optical_azimuth(&self) -> f64 {
        let forward = self.extrinsic.inverse().rotate(&Vector3::z());
        forward.y.atan2(forward.x)
    }
}

/// Pinhole projection of a camera-frame point; `None` signals `z ≤ 0`.
pub fn project_point(p_cam: &Point3, calib: &CameraCalib) -> Option<Pixel> {
    if p_cam.z <= 0.0 {
        return None;
    }
    Some(Pixel {
        u: calib.fx * p_cam.x / p_cam.z + calib.cx,
        v: calib.fy * p_cam.y / p_cam.z + calib.cy,
    })
}

/// Wraps an angle into `(−π, π]`.
pub fn normalize_yaw(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::NonFinite("yaw"));
    }
    let mut r = theta.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    // rem_euclid can round up to exactly TAU
    if r <= -PI {
        r += TAU;
    }
    Ok(r)
}

pub(crate) fn wrap_yaw(theta: f64) -> f64 {
    normalize_yaw(theta).unwrap_or(0.0)
}

/// Yaw-only oriented box. `size` is (length, width, height) with length along `yaw`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub center: Point3,
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: Vec2,
    pub frame: CoordFrame,
}

impl Box3D {
    pub fn new(center: Point3, size: [f64; 3], yaw: f64, velocity: Vec2, frame: CoordFrame) -> Result<Self> {
        if !center.iter().chain(size.iter()).chain(velocity.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("box"));
        }
        if size.iter().any(|&s| s <= 0.0) {
            return Err(Error::DegenerateGeometry("box extents must be positive"));
        }
        Ok(Self {
            center,
            size,
            yaw: normalize_yaw(yaw)?,
            velocity,
            frame,
        })
    }

    pub fn length(&self) -> f64 {
        self.size[0]
    }

    pub fn width(&self) -> f64 {
        self.size[1]
    }

    pub fn height(&self) -> f64 {
        self.size[2]
    }

    pub fn length_axis(&self) -> Vec2 {
        Vec2::new(self.yaw.cos(), self.yaw.sin())
    }

    pub fn width_axis(&self) -> Vec2 {
        Vec2::new(-self.yaw.sin(), self.yaw.cos())
    }

    pub fn center_xy(&self) -> Vec2 {
        self.center.xy()
    }

    /// Footprint corners, counter-clockwise starting at front-left.
    pub fn corners_xy(&self) -> [Vec2; 4] {
        let c = self.center_xy();
        let l = self.length_axis() * (self.length() / 2.0);
        let w = self.width_axis() * (self.width() / 2.0);
        [c + l + w, c - l + w, c - l - w, c + l - w]
    }

    pub fn corners(&self) -> [Point3; 8] {
        let xy = self.corners_xy();
        let z0 = self.center.z - self.height() / 2.0;
        let z1 = self.center.z + self.height() / 2.0;
        let mut out = [Point3::zeros(); 8];
        for (i, c) in xy.iter().enumerate() {
            out[i] = Point3::new(c.x, c.y, z0);
            out[i + 4] = Point3::new(c.x, c.y, z1);
        }
        out
    }

    /// True when `p` lies inside the box grown by `skin` on every face.
    pub fn contains(&self, p: &Point3, skin: f64) -> bool {
        let d = p.xy() - self.center_xy();
        let along = d.dot(&self.length_axis()).abs();
        let across = d.dot(&self.width_axis()).abs();
        along <= self.length() / 2.0 + skin
            && across <= self.width() / 2.0 + skin
            && (p.z - self.center.z).abs() <= self.height() / 2.0 + skin
    }

    /// Re-expresses the box through a rigid transform; yaw and velocity pick up its heading.
    pub fn transformed(&self, t: &RigidTransform, target: CoordFrame) -> Box3D {
        let dyaw = t.yaw();
        let (s, c) = dyaw.sin_cos();
        let v = self.velocity;
        Box3D {
            center: t.apply(&self.center),
            size: self.size,
            yaw: wrap_yaw(self.yaw + dyaw),
            velocity: Vec2::new(c * v.x - s * v.y, s * v.x + c * v.y),
            frame: target,
        }
    }
}

/// Per-frame metadata. `ego_pose` maps ego coordinates to global.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameContext {
    pub frame_index: usize,
    pub timestamp: f64,
    pub ego_pose: RigidTransform,
    pub cameras: Vec<CameraCalib>,
}

impl FrameContext {
    pub fn camera(&self, id: &str) -> Option<&CameraCalib> {
        self.cameras.iter().find(|c| c.camera_id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn calib() -> CameraCalib {
        CameraCalib::new("cam", 500.0, 500.0, 320.0, 240.0, 640, 480, RigidTransform::identity()).unwrap()
    }

    fn cloud(points: Vec<Point3>) -> PointCloud {
        PointCloud::from_points(points, 0.0, CoordFrame::Ego).unwrap()
    }

    #[test]
    fn identity_is_bitwise() {
        let c = cloud(vec![Point3::new(-0.0, 1.5e-300, 3.25), Point3::new(7.0, -2.0, 0.1)]);
        let out = transform_points(&c, &RigidTransform::identity(), CoordFrame::Ego);
        for (a, b) in c.points().iter().zip(out.points()) {
            for k in 0..3 {
                assert_eq!(a[k].to_bits(), b[k].to_bits());
            }
        }
    }

    #[test]
    fn pure_translation() {
        let t = RigidTransform::new([1.0, 0.0, 0.0, 0.0], [1.0, 2.0, 3.0]).unwrap();
        let out = transform_points(&cloud(vec![Point3::zeros()]), &t, CoordFrame::Global);
        assert_eq!(out.points()[0], Point3::new(1.0, 2.0, 3.0));
        assert_eq!(out.frame(), CoordFrame::Global);
    }

    #[test]
    fn quarter_turn_yaw() {
        let t = RigidTransform::from_yaw(PI / 2.0, Point3::zeros());
        let p = t.apply(&Point3::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(p, Point3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        let err = RigidTransform::new([1.0, 0.1, 0.0, 0.0], [0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::InvalidTransform(_)));
    }

    #[test]
    fn projection_examples() {
        let c = calib();
        assert_eq!(project_point(&Point3::new(0.0, 0.0, 5.0), &c), Some(Pixel { u: 320.0, v: 240.0 }));
        assert_eq!(project_point(&Point3::new(0.0, 0.0, -1.0), &c), None);
        assert_eq!(project_point(&Point3::new(1.0, 0.0, 2.0), &c), Some(Pixel { u: 570.0, v: 240.0 }));
    }

    #[test]
    fn yaw_normalization() {
        assert_eq!(normalize_yaw(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(normalize_yaw(3.0 * PI).unwrap(), PI, epsilon = 1e-12);
        assert_eq!(normalize_yaw(-PI).unwrap(), PI);
        assert_eq!(normalize_yaw(PI).unwrap(), PI);
        assert!(normalize_yaw(f64::NAN).is_err());
        assert!(normalize_yaw(f64::INFINITY).is_err());
    }

    #[test]
    fn calib_validation() {
        let t = RigidTransform::identity();
        assert!(CameraCalib::new("c", 0.0, 1.0, 10.0, 10.0, 20, 20, t).is_err());
        assert!(CameraCalib::new("c", 1.0, 1.0, 20.0, 10.0, 20, 20, t).is_err());
        assert!(CameraCalib::new("c", 1.0, 1.0, 10.0, 10.0, 20, 20, t).is_ok());
    }

    #[test]
    fn non_monotone_timestamps_rejected() {
        let pts = vec![Point3::zeros(), Point3::zeros()];
        assert!(PointCloud::new(pts, vec![1.0, 0.5], CoordFrame::Sensor).is_err());
    }

    #[test]
    fn calib_json_roundtrip() {
        let c = CameraCalib::new(
            "front",
            400.0,
            410.0,
            320.0,
            180.0,
            640,
            360,
            RigidTransform::from_yaw(0.3, Point3::new(1.0, 0.0, 1.5)),
        )
        .unwrap();
        let s = serde_json::to_string(&c).unwrap();
        let back: CameraCalib = serde_json::from_str(&s).unwrap();
        assert_eq!(back.camera_id, "front");
        assert_abs_diff_eq!(back.extrinsic.yaw(), 0.3, epsilon = 1e-12);
    }

    fn arb_transform() -> impl Strategy<Value = RigidTransform> {
        (
            prop::array::uniform4(-1.0f64..1.0),
            prop::array::uniform3(-50.0f64..50.0),
        )
            .prop_filter_map("zero quaternion", |(q, t)| {
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                (n > 1e-3).then(|| RigidTransform::new(q.map(|v| v / n), t).unwrap())
            })
    }

    fn arb_points() -> impl Strategy<Value = Vec<Point3>> {
        prop::collection::vec(prop::array::uniform3(-100.0f64..100.0).prop_map(Point3::from), 1..40)
    }

    proptest! {
        #[test]
        fn inverse_recovers_cloud(t in arb_transform(), pts in arb_points()) {
            let c = cloud(pts);
            let there = transform_points(&c, &t, CoordFrame::Global);
            let back = transform_points(&there, &t.inverse(), CoordFrame::Ego);
            for (a, b) in c.points().iter().zip(back.points()) {
                prop_assert!((a - b).amax() < 1e-9);
            }
        }

        #[test]
        fn composition_matches_sequential(t1 in arb_transform(), t2 in arb_transform(), pts in arb_points()) {
            let c = cloud(pts);
            let once = transform_points(&c, &t2.compose(&t1), CoordFrame::Global);
            let twice = transform_points(&transform_points(&c, &t1, CoordFrame::Global), &t2, CoordFrame::Global);
            for (a, b) in once.points().iter().zip(twice.points()) {
                prop_assert!((a - b).amax() < 1e-9);
            }
        }

        #[test]
        fn projection_is_ray_invariant(
            x in -5.0f64..5.0, y in -5.0f64..5.0, z in 0.1f64..50.0, scale in 0.01f64..100.0
        ) {
            let c = calib();
            let p = Point3::new(x, y, z);
            let a = project_point(&p, &c).unwrap();
            let b = project_point(&(p * scale), &c).unwrap();
            prop_assert!((a.u - b.u).abs() < 1e-9 && (a.v - b.v).abs() < 1e-9);
        }

        #[test]
        fn normalized_yaw_in_range(theta in -1e4f64..1e4) {
            let r = normalize_yaw(theta).unwrap();
            prop_assert!(r > -PI && r <= PI);
            let k = ((theta - r) / TAU).round();
            prop_assert!((theta - r - k * TAU).abs() < 1e-9);
        }
    }
}
