//! Deterministic synthetic scenes with known ground truth.
//!
//! Objects are boxes on a (possibly sloped) ground plane. Lidar points are laid
//! on an object-attached grid over the faces that look towards the sensor, so a
//! rigidly moving object produces rigidly moving points. Camera detections are
//! filled hulls of the projected boxes, resolved near-to-far so the nearer
//! object keeps contested pixels.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{FrameDetections, Scene};
use crate::mask::{Detection2D, MaskGrid, RleMask};
use crate::refine::ClassSizePrior;
use crate::results::{ResultBox, ResultFrame, Results, ResultsHeader, ResultsSource};
use crate::scene::{wrap_yaw, Box3D, CameraCalib, CoordFrame, FrameContext, Point3, PointCloud, RigidTransform, Vec2};

/// Camera-frame depth below which box geometry is clipped before projection.
const NEAR_PLANE: f64 = 0.1;
/// Lidar returns closer than this (planar) are dropped.
const BLIND_RADIUS: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgoSpec {
    /// Global (x, y) at t = 0.
    pub position: [f64; 2],
    pub yaw: f64,
    /// Global planar velocity, m/s.
    pub velocity: [f64; 2],
}

impl Default for EgoSpec {
    fn default() -> Self {
        Self {
            position: [0.0, 0.0],
            yaw: 0.0,
            velocity: [0.0, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundSpec {
    /// dz/dx and dz/dy of the global ground plane.
    pub slope: [f64; 2],
    /// Sensor range in meters; ground and objects beyond it are not sampled.
    pub extent: f64,
    /// points per square meter
    pub density: f64,
}

impl Default for GroundSpec {
    fn default() -> Self {
        Self {
            slope: [0.0, 0.0],
            extent: 40.0,
            density: 2.0,
        }
    }
}

/// A vertical patch kept a fixed distance behind its object along the sensor ray.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WallSpec {
    /// Center-to-center distance behind the object, meters.
    pub distance: f64,
    pub width: f64,
    pub height: f64,
    /// points per square meter
    pub density: f64,
}

impl Default for WallSpec {
    fn default() -> Self {
        Self {
            distance: 6.0,
            width: 2.5,
            height: 1.5,
            density: 40.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub class_name: String,
    /// Global (x, y) of the box center at t = 0.
    pub position: [f64; 2],
    #[serde(default)]
    pub yaw: f64,
    /// (length, width, height); the class mean when absent.
    #[serde(default)]
    pub size: Option<[f64; 3]>,
    #[serde(default)]
    pub velocity: [f64; 2],
    /// points per square meter of visible surface
    #[serde(default = "default_surface_density")]
    pub surface_density: f64,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default)]
    pub wall: Option<WallSpec>,
}

fn default_surface_density() -> f64 {
    60.0
}

fn default_confidence() -> f64 {
    0.9
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Isotropic Gaussian jitter on lidar points, meters.
    pub point_jitter: f64,
    /// Per-component Gaussian jitter on embeddings before renormalization.
    pub embedding_jitter: f64,
    /// Square erosion radius applied to rendered masks, pixels.
    pub mask_erosion: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub scene_id: String,
    pub seed: u64,
    pub frames: usize,
    /// seconds between frames
    pub dt: f64,
    pub ego: EgoSpec,
    pub ground: GroundSpec,
    /// Lidar mounting height above the ego origin.
    pub lidar_height: f64,
    /// Camera rig; the default six-camera ring when absent.
    pub cameras: Option<Vec<CameraCalib>>,
    pub objects: Vec<ObjectSpec>,
    pub noise: NoiseSpec,
    pub embedding_dim: usize,
    /// Detections with fewer mask pixels are not emitted.
    pub min_mask_pixels: u64,
    /// Ground-truth boxes need at least this many lidar points in their frame.
    pub min_gt_points: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            scene_id: "synthetic".into(),
            seed: 0,
            frames: 10,
            dt: 0.5,
            ego: EgoSpec::default(),
            ground: GroundSpec::default(),
            lidar_height: 1.8,
            cameras: None,
            objects: Vec::new(),
            noise: NoiseSpec::default(),
            embedding_dim: 32,
            min_mask_pixels: 20,
            min_gt_points: 5,
        }
    }
}

impl SceneSpec {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.frames == 0 || !(self.dt > 0.0) {
            return bad("frames must be positive and dt > 0".into());
        }
        if !(self.ground.density > 0.0 && self.ground.extent > 0.0) {
            return bad("ground density and extent must be positive".into());
        }
        if self.noise.point_jitter < 0.0 || self.noise.embedding_jitter < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        let pairs = self.embedding_dim * self.embedding_dim.saturating_sub(1) / 2;
        if self.objects.len() > pairs {
            return bad(format!(
                "embedding_dim {} supports at most {pairs} distinct instances",
                self.embedding_dim
            ));
        }
        let priors = ClassSizePrior::default();
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.surface_density > 0.0) || !(0.0..=1.0).contains(&o.confidence) {
                return bad(format!("objects[{i}]: surface_density > 0 and confidence in [0,1] required"));
            }
            match o.size {
                Some(s) if s.iter().any(|v| !(*v > 0.0)) => return bad(format!("objects[{i}]: size must be positive")),
                None if priors.get(&o.class_name).is_none() => {
                    return bad(format!("objects[{i}]: no default size for class {}", o.class_name))
                }
                _ => {}
            }
            if let Some(w) = &o.wall {
                if !(w.width > 0.0 && w.height > 0.0 && w.density > 0.0 && w.distance > 0.0) {
                    return bad(format!("objects[{i}].wall: dimensions and density must be positive"));
                }
            }
        }
        Ok(())
    }

    fn object_size(&self, o: &ObjectSpec) -> [f64; 3] {
        o.size
            .or_else(|| ClassSizePrior::default().get(&o.class_name).map(|p| p.mean))
            .expect("validated size")
    }
}

/// Six 640×360 cameras, 60° apart with 70° horizontal field of view, 1.5 m up.
pub fn default_camera_rig() -> Vec<CameraCalib> {
    let names = [
        ("cam_front", 0.0),
        ("cam_front_left", 60.0),
        ("cam_back_left", 120.0),
        ("cam_back", 180.0),
        ("cam_back_right", -120.0),
        ("cam_front_right", -60.0),
    ];
    let (w, h) = (640u32, 360u32);
    let f = (w as f64 / 2.0) / 35f64.to_radians().tan();
    names
        .iter()
        .map(|&(id, az_deg): &(&str, f64)| {
            let (s, c) = az_deg.to_radians().sin_cos();
            // rows: camera right, down, forward expressed in ego axes
            let r = nalgebra::Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0);
            let t = -(r * Point3::new(0.0, 0.0, 1.5));
            CameraCalib::new(id, f, f, w as f64 / 2.0, h as f64 / 2.0, w, h, RigidTransform::from_rotation_matrix(r, t))
                .expect("valid rig")
        })
        .collect()
}

/// Ground-truth object in one frame, ego coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct GtObject {
    pub instance_id: usize,
    pub class_name: String,
    pub bbox: Box3D,
    pub n_points: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub frames: Vec<Vec<GtObject>>,
}

impl GroundTruth {
    pub fn to_results(&self, scene: &Scene) -> Results {
        Results {
            header: ResultsHeader::new(&scene.scene_id, ResultsSource::GroundTruth, None),
            frames: self
                .frames
                .iter()
                .zip(&scene.frames)
                .map(|(objs, f)| ResultFrame {
                    frame_index: f.frame_index,
                    timestamp: f.timestamp,
                    boxes: objs
                        .iter()
                        .map(|o| ResultBox::from_box(&o.bbox, &o.class_name, 1.0, o.instance_id))
                        .collect(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub scene: Scene,
    pub ground_truth: GroundTruth,
}

/// Base embedding of an instance: `(e_a + e_b)/√2` for the instance's index
/// pair `(a, b)`, so distinct instances have dot product 0 or 1/2.
fn base_embedding(instance_id: usize, dim: usize) -> Vec<f64> {
    let mut k = instance_id;
    let mut a = 0;
    while k >= dim - 1 - a {
        k -= dim - 1 - a;
        a += 1;
    }
    let b = a + 1 + k;
    let mut e = vec![0.0; dim];
    e[a] = std::f64::consts::FRAC_1_SQRT_2;
    e[b] = std::f64::consts::FRAC_1_SQRT_2;
    e
}

/// Unit appearance vector for an instance: its base vector plus Gaussian
/// jitter `sigma` per component, renormalized. For `sigma ≤ 0.05` at dimension
/// 32 same-instance similarity stays far above the 1/2 cross-instance ceiling.
pub fn synth_embedding(instance_id: usize, dim: usize, sigma: f64, seed: u64) -> Vec<f64> {
    let mut e = base_embedding(instance_id, dim);
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        e.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    e.iter_mut().for_each(|v| *v /= n);
    e
}

fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Box edges as corner index pairs (see `Box3D::corners`).
const BOX_EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

fn hull_grid(b: &Box3D, calib: &CameraCalib) -> MaskGrid {
    let mut grid = MaskGrid::new(calib.height, calib.width);
    let cam: Vec<Point3> = b.corners().iter().map(|c| calib.extrinsic.apply(c)).collect();
    let mut solid: Vec<Point3> = cam.iter().filter(|p| p.z >= NEAR_PLANE).copied().collect();
    if solid.is_empty() {
        return grid;
    }
    for &(i, j) in &BOX_EDGES {
        let (a, c) = (cam[i], cam[j]);
        if (a.z < NEAR_PLANE) != (c.z < NEAR_PLANE) {
            let t = (NEAR_PLANE - a.z) / (c.z - a.z);
            solid.push(a + (c - a) * t);
        }
    }
    let projected: Vec<(f64, f64)> = solid
        .iter()
        .map(|p| (calib.fx * p.x / p.z + calib.cx, calib.fy * p.y / p.z + calib.cy))
        .collect();
    let hull = convex_hull(projected);
    if hull.len() < 3 {
        return grid;
    }
    let (w, h) = (calib.width as f64, calib.height as f64);
    let min_u = hull.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).max(0.0);
    let max_u = hull.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).min(w);
    let min_v = hull.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).max(0.0);
    let max_v = hull.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).min(h);
    if min_u >= max_u || min_v >= max_v {
        return grid;
    }
    let n = hull.len();
    for x in min_u.floor() as u32..(max_u.ceil() as u32).min(calib.width) {
        for y in min_v.floor() as u32..(max_v.ceil() as u32).min(calib.height) {
            // conservative: any pixel the hull touches is set, so points on
            // the silhouette edge (e.g. a roof seen edge-on) stay inside
            let (pu, pv) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = (0..n).all(|k| {
                let (a, c) = (hull[k], hull[(k + 1) % n]);
                let (du, dv) = (c.0 - a.0, c.1 - a.1);
                du * (pv - a.1) - dv * (pu - a.0) >= -0.5 * (du.abs() + dv.abs())
            });
            if inside {
                grid.set(x, y, true);
            }
        }
    }
    grid
}

fn erode(grid: &MaskGrid, radius: u32) -> MaskGrid {
    if radius == 0 {
        return grid.clone();
    }
    let (w, h) = (grid.width(), grid.height());
    let r = radius as i64;
    let mut out = MaskGrid::new(h, w);
    for (x, y) in grid.iter_set() {
        let keep = (-r..=r).all(|dx| {
            (-r..=r).all(|dy| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 && grid.get(nx as u32, ny as u32)
            })
        });
        if keep {
            out.set(x, y, true);
        }
    }
    out
}

/// Filled hull of the projected box (ego frame) clipped to the image, eroded
/// by `erosion` pixels. Geometry behind the near plane is clipped away.
pub fn render_mask(b: &Box3D, calib: &CameraCalib, erosion: u32) -> RleMask {
    erode(&hull_grid(b, calib), erosion).encode()
}

fn mask_bbox(grid: &MaskGrid) -> Option<[f64; 4]> {
    let mut bounds: Option<[u32; 4]> = None;
    for (x, y) in grid.iter_set() {
        let b = bounds.get_or_insert([x, y, x, y]);
        b[0] = b[0].min(x);
        b[1] = b[1].min(y);
        b[2] = b[2].max(x);
        b[3] = b[3].max(y);
    }
    bounds.map(|[x0, y0, x1, y1]| [x0 as f64, y0 as f64, x1 as f64 + 1.0, y1 as f64 + 1.0])
}

struct Sampler<'a> {
    spec: &'a SceneSpec,
}

impl Sampler<'_> {
    fn ground_z(&self, x: f64, y: f64) -> f64 {
        self.spec.ground.slope[0] * x + self.spec.ground.slope[1] * y
    }

    fn ego_pose(&self, t: f64) -> RigidTransform {
        let e = &self.spec.ego;
        let (x, y) = (e.position[0] + e.velocity[0] * t, e.position[1] + e.velocity[1] * t);
        RigidTransform::from_yaw(e.yaw, Point3::new(x, y, self.ground_z(x, y)))
    }

    fn object_box(&self, o: &ObjectSpec, t: f64) -> Box3D {
        let size = self.spec.object_size(o);
        let (x, y) = (o.position[0] + o.velocity[0] * t, o.position[1] + o.velocity[1] * t);
        Box3D::new(
            Point3::new(x, y, self.ground_z(x, y) + size[2] / 2.0),
            size,
            o.yaw,
            Vec2::from(o.velocity),
            CoordFrame::Global,
        )
        .expect("validated box")
    }

    /// Object-attached grid over the faces whose outward normal points at `sensor`.
    fn box_surface(&self, b: &Box3D, density: f64, sensor: &Point3) -> Vec<Point3> {
        let [l, w, h] = b.size;
        let bottom = b.center.z - h / 2.0;
        let (ax, ay) = (b.length_axis(), b.width_axis());
        let to_global = |u: f64, v: f64, z: f64| {
            let xy = b.center_xy() + ax * u + ay * v;
            Point3::new(xy.x, xy.y, bottom + z)
        };
        let step = 1.0 / density.sqrt();
        let grid = |extent: f64| {
            let n = (extent / step).ceil().max(1.0) as usize;
            (0..n).map(move |i| -extent / 2.0 + (i as f64 + 0.5) * extent / n as f64)
        };
        let mut out = Vec::new();
        // (outward normal, face center, parametrization)
        let sides: [(Vec2, f64, f64, bool); 4] = [(ax, l / 2.0, w, true), (-ax, -l / 2.0, w, true), (ay, w / 2.0, l, false), (-ay, -w / 2.0, l, false)];
        for (normal, offset, span, across) in sides {
            let center = b.center_xy() + normal * offset.abs();
            let to_sensor = sensor.xy() - center;
            if normal.dot(&to_sensor) <= 0.0 {
                continue;
            }
            for s in grid(span) {
                for z in grid(h) {
                    let z = z + h / 2.0;
                    out.push(if across { to_global(offset, s, z) } else { to_global(s, offset, z) });
                }
            }
        }
        if sensor.z > bottom + h {
            for u in grid(l) {
                for v in grid(w) {
                    out.push(to_global(u, v, h));
                }
            }
        }
        out
    }

    fn wall_surface(&self, b: &Box3D, wall: &WallSpec, sensor: &Point3) -> Vec<Point3> {
        let ray = b.center_xy() - sensor.xy();
        let dir = if ray.norm() > 1e-9 { ray.normalize() } else { Vec2::new(1.0, 0.0) };
        let across = Vec2::new(-dir.y, dir.x);
        let center = b.center_xy() + dir * wall.distance;
        let base = self.ground_z(center.x, center.y);
        let step = 1.0 / wall.density.sqrt();
        let nu = (wall.width / step).ceil().max(1.0) as usize;
        let nz = (wall.height / step).ceil().max(1.0) as usize;
        let mut out = Vec::with_capacity(nu * nz);
        for i in 0..nu {
            let s = -wall.width / 2.0 + (i as f64 + 0.5) * wall.width / nu as f64;
            for k in 0..nz {
                let z = (k as f64 + 0.5) * wall.height / nz as f64;
                let xy = center + across * s;
                out.push(Point3::new(xy.x, xy.y, base + z));
            }
        }
        out
    }

    fn ground_points(&self, ego_xy: Vec2, boxes: &[Box3D]) -> Vec<Point3> {
        let step = 1.0 / self.spec.ground.density.sqrt();
        let extent = self.spec.ground.extent;
        let (i0, i1) = (((ego_xy.x - extent) / step).floor() as i64, ((ego_xy.x + extent) / step).ceil() as i64);
        let (j0, j1) = (((ego_xy.y - extent) / step).floor() as i64, ((ego_xy.y + extent) / step).ceil() as i64);
        let mut out = Vec::new();
        for i in i0..=i1 {
            for j in j0..=j1 {
                let (x, y) = (i as f64 * step, j as f64 * step);
                let r = (Vec2::new(x, y) - ego_xy).norm();
                if !(BLIND_RADIUS..=extent).contains(&r) {
                    continue;
                }
                let p = Point3::new(x, y, self.ground_z(x, y));
                if boxes.iter().any(|b| b.contains(&Point3::new(x, y, b.center.z), 0.05)) {
                    continue;
                }
                out.push(p);
            }
        }
        out
    }
}

fn frame_stream(seed: u64, frame: usize, salt: u64) -> u64 {
    seed ^ (frame as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Builds the scene and its ground truth from a spec.
pub fn generate(spec: &SceneSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let sampler = Sampler { spec };
    let cameras = spec.cameras.clone().unwrap_or_else(default_camera_rig);
    let lidar_extrinsic = RigidTransform::from_yaw(0.0, Point3::new(0.0, 0.0, spec.lidar_height));
    let jitter = (spec.noise.point_jitter > 0.0).then(|| Normal::new(0.0, spec.noise.point_jitter).expect("finite jitter"));

    let mut frames = Vec::with_capacity(spec.frames);
    let mut sweeps = Vec::with_capacity(spec.frames);
    let mut detections = Vec::with_capacity(spec.frames);
    let mut gt_frames = Vec::with_capacity(spec.frames);
    for f in 0..spec.frames {
        let t = f as f64 * spec.dt;
        let ego_pose = sampler.ego_pose(t);
        let ego_inv = ego_pose.inverse();
        let sensor_from_global = lidar_extrinsic.inverse().compose(&ego_inv);
        let lidar_global = ego_pose.apply(&lidar_extrinsic.translation());
        let ego_xy = ego_pose.translation().xy();
        let in_range = |p: &Point3| (p.xy() - ego_xy).norm() <= spec.ground.extent;

        let boxes: Vec<Box3D> = spec.objects.iter().map(|o| sampler.object_box(o, t)).collect();
        let mut global_points = sampler.ground_points(ego_xy, &boxes);
        let mut object_counts = Vec::with_capacity(boxes.len());
        for b in &boxes {
            let pts: Vec<Point3> = sampler
                .box_surface(b, spec.objects[object_counts.len()].surface_density, &lidar_global)
                .into_iter()
                .filter(in_range)
                .collect();
            object_counts.push(pts.len());
            global_points.extend(pts);
        }
        for (o, b) in spec.objects.iter().zip(&boxes) {
            if let Some(wall) = &o.wall {
                global_points.extend(sampler.wall_surface(b, wall, &lidar_global).into_iter().filter(in_range));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(frame_stream(spec.seed, f, 1));
        let points: Vec<Point3> = global_points
            .iter()
            .map(|p| {
                let mut q = sensor_from_global.apply(p);
                if let Some(n) = &jitter {
                    q += Point3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
                }
                // stored as f32 on disk
                q.map(|v| v as f32 as f64)
            })
            .collect();
        sweeps.push(PointCloud::from_points(points, t, CoordFrame::Sensor)?);

        let ego_boxes: Vec<Box3D> = boxes.iter().map(|b| b.transformed(&ego_inv, CoordFrame::Ego)).collect();
        let mut frame_dets: FrameDetections = BTreeMap::new();
        for (c, cam) in cameras.iter().enumerate() {
            let cam_center = cam.extrinsic.inverse().translation();
            let mut order: Vec<usize> = (0..ego_boxes.len()).collect();
            order.sort_by(|&a, &b| {
                let da = (ego_boxes[a].center - cam_center).norm();
                let db = (ego_boxes[b].center - cam_center).norm();
                da.total_cmp(&db).then(a.cmp(&b))
            });
            let mut occupied = MaskGrid::new(cam.height, cam.width);
            let mut visible: Vec<(usize, MaskGrid)> = Vec::new();
            for k in order {
                let hull = hull_grid(&ego_boxes[k], cam);
                let mut own = MaskGrid::new(cam.height, cam.width);
                for (x, y) in hull.iter_set() {
                    if !occupied.get(x, y) {
                        own.set(x, y, true);
                    }
                    occupied.set(x, y, true);
                }
                visible.push((k, erode(&own, spec.noise.mask_erosion)));
            }
            visible.sort_by_key(|(k, _)| *k);
            let dets: Vec<Detection2D> = visible
                .into_iter()
                .filter(|(_, m)| m.count() >= spec.min_mask_pixels.max(1))
                .map(|(k, m)| {
                    let o = &spec.objects[k];
                    Detection2D {
                        camera_id: cam.camera_id.clone(),
                        class_name: o.class_name.clone(),
                        confidence: o.confidence,
                        bbox2d: mask_bbox(&m).expect("non-empty mask"),
                        mask: m.encode(),
                        embedding: synth_embedding(
                            k,
                            spec.embedding_dim,
                            spec.noise.embedding_jitter,
                            frame_stream(spec.seed, f, 2 + (c * spec.objects.len() + k) as u64),
                        ),
                    }
                })
                .collect();
            frame_dets.insert(cam.camera_id.clone(), dets);
        }
        detections.push(frame_dets);

        gt_frames.push(
            ego_boxes
                .iter()
                .enumerate()
                .filter(|(k, _)| object_counts[*k] >= spec.min_gt_points)
                .map(|(k, b)| GtObject {
                    instance_id: k,
                    class_name: spec.objects[k].class_name.clone(),
                    bbox: *b,
                    n_points: object_counts[k],
                })
                .collect(),
        );
        frames.push(FrameContext {
            frame_index: f,
            timestamp: t,
            ego_pose,
            cameras: cameras.clone(),
        });
    }
    let scene = Scene {
        scene_id: spec.scene_id.clone(),
        embedding_dim: spec.embedding_dim,
        lidar_extrinsic,
        frames,
        sweeps,
        detections,
    };
    scene.validate()?;
    Ok(SynthOutput {
        scene,
        ground_truth: GroundTruth { frames: gt_frames },
    })
}

fn object(class: &str, position: [f64; 2], yaw: f64, speed: f64) -> ObjectSpec {
    ObjectSpec {
        class_name: class.into(),
        position,
        yaw: wrap_yaw(yaw),
        size: None,
        velocity: [speed * yaw.cos(), speed * yaw.sin()],
        surface_density: default_surface_density(),
        confidence: default_confidence(),
        wall: None,
    }
}

/// Ten objects of three classes around a slowly moving ego, no noise.
pub fn clean_scene_spec() -> SceneSpec {
    let objects = vec![
        object("car", [12.0, 3.0], 0.9, 0.0),
        object("car", [-15.0, 6.0], 0.0, 4.0),
        object("car", [4.0, -14.0], 0.3, 0.0),
        object("car", [25.0, -6.0], PI, 5.0),
        object("pedestrian", [8.0, 9.0], 0.2, 0.0),
        object("pedestrian", [-5.0, -10.0], PI / 2.0, 1.4),
        object("pedestrian", [-10.0, -3.0], 1.0, 0.0),
        object("bicycle", [10.0, 16.0], PI, 4.0),
        object("bicycle", [-8.0, 12.0], -0.4, 0.0),
        object("car", [-18.0, -12.0], 2.2, 0.0),
    ];
    SceneSpec {
        scene_id: "clean".into(),
        seed: 11,
        frames: 10,
        dt: 0.25,
        ego: EgoSpec {
            velocity: [2.0, 0.0],
            ..EgoSpec::default()
        },
        objects,
        ..SceneSpec::default()
    }
}

/// The clean layout with point jitter, embedding jitter, eroded masks and a
/// background wall behind every object.
pub fn noisy_scene_spec() -> SceneSpec {
    let mut spec = clean_scene_spec();
    spec.scene_id = "noisy".into();
    spec.seed = 12;
    spec.noise = NoiseSpec {
        point_jitter: 0.03,
        embedding_jitter: 0.05,
        mask_erosion: 1,
    };
    for o in &mut spec.objects {
        o.wall = Some(WallSpec::default());
    }
    spec
}

/// One car crossing in front of a static ego at `speed` m/s.
pub fn single_mover_spec(speed: f64) -> SceneSpec {
    SceneSpec {
        scene_id: format!("mover_{speed}"),
        seed: 3,
        frames: 6,
        dt: 0.25,
        objects: vec![object("car", [12.0, -3.0], PI / 2.0 - 0.6, speed)],
        ..SceneSpec::default()
    }
}
