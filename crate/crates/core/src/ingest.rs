//! Scene directories on disk and multi-sweep aggregation.
//!
//! Layout (binary data little-endian):
//!
//! ```text
//! <scene>/manifest.json
//! <scene>/sweeps/<frame>.bin              f32 records (x, y, z, timestamp offset), sensor frame
//! <scene>/detections/<frame>/<camera>.json
//! ```
//!
//! `<frame>` is the frame index zero-padded to six digits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Detection2D, RleMask};
use crate::scene::{
    transform_points, CameraCalib, CoordFrame, FrameContext, Point3, PointCloud, RigidTransform, CAMERA_CONVENTION,
};

pub const FORMAT_VERSION: u32 = 1;
pub const EGO_CONVENTION: &str = "x_forward_y_left_z_up";
pub const DEFAULT_SWEEPS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Convention {
    pub camera: String,
    pub ego: String,
    pub quaternion: String,
}

impl Default for Convention {
    fn default() -> Self {
        Self {
            camera: CAMERA_CONVENTION.into(),
            ego: EGO_CONVENTION.into(),
            quaternion: "wxyz".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFrame {
    pub index: usize,
    pub timestamp: f64,
    /// global ← ego
    pub ego_pose: RigidTransform,
    pub cameras: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub scene_id: String,
    pub convention: Convention,
    pub embedding_dim: usize,
    /// ego ← lidar
    pub lidar_extrinsic: RigidTransform,
    pub cameras: Vec<CameraCalib>,
    pub frames: Vec<ManifestFrame>,
}

/// One entry of `detections/<frame>/<camera>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub class_name: String,
    pub confidence: f64,
    pub bbox2d: [f64; 4],
    pub mask_rle: RleMask,
    pub embedding: Vec<f64>,
}

impl DetectionRecord {
    pub fn into_detection(self, camera_id: &str) -> Detection2D {
        Detection2D {
            camera_id: camera_id.to_string(),
            class_name: self.class_name,
            confidence: self.confidence,
            bbox2d: self.bbox2d,
            mask: self.mask_rle,
            embedding: self.embedding,
        }
    }

    pub fn from_detection(det: &Detection2D) -> Self {
        Self {
            class_name: det.class_name.clone(),
            confidence: det.confidence,
            bbox2d: det.bbox2d,
            mask_rle: det.mask.clone(),
            embedding: det.embedding.clone(),
        }
    }
}

/// Per-frame detections keyed by camera id.
pub type FrameDetections = BTreeMap<String, Vec<Detection2D>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub embedding_dim: usize,
    /// ego ← lidar
    pub lidar_extrinsic: RigidTransform,
    pub frames: Vec<FrameContext>,
    /// One sweep per frame, sensor frame.
    pub sweeps: Vec<PointCloud>,
    pub detections: Vec<FrameDetections>,
}

impl Scene {
    /// Checks every invariant that `load_scene` enforces on disk data.
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::schema(None, "frames", "scene has no frames"));
        }
        if self.sweeps.len() != self.frames.len() || self.detections.len() != self.frames.len() {
            return Err(Error::schema(None, "sweeps", "one sweep and one detection set per frame required"));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.frame_index != i {
                return Err(Error::schema(Some(i), "index", format!("expected {i}, found {}", f.frame_index)));
            }
            if !f.timestamp.is_finite() {
                return Err(Error::schema(Some(i), "timestamp", "not finite"));
            }
            if i > 0 && f.timestamp <= self.frames[i - 1].timestamp {
                return Err(Error::schema(Some(i), "timestamp", "timestamps must strictly increase"));
            }
            if self.sweeps[i].frame() != CoordFrame::Sensor {
                return Err(Error::schema(Some(i), "sweep", "sweeps must be in the sensor frame"));
            }
            for (cam_id, dets) in &self.detections[i] {
                let Some(cam) = f.camera(cam_id) else {
                    return Err(Error::schema(Some(i), "detections", format!("unknown camera_id {cam_id:?}")));
                };
                for (k, det) in dets.iter().enumerate() {
                    if det.camera_id != *cam_id {
                        return Err(Error::schema(Some(i), format!("detections/{cam_id}[{k}]"), "camera_id mismatch"));
                    }
                    det.validate(cam.width, cam.height, self.embedding_dim)
                        .map_err(|m| Error::schema(Some(i), format!("detections/{cam_id}[{k}]"), m))?;
                }
            }
        }
        Ok(())
    }

    pub fn cameras(&self) -> Vec<CameraCalib> {
        let mut seen = BTreeMap::new();
        for f in &self.frames {
            for c in &f.cameras {
                seen.entry(c.camera_id.clone()).or_insert_with(|| c.clone());
            }
        }
        seen.into_values().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOptions {
    /// Detections below this confidence are dropped while loading.
    pub confidence_floor: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { confidence_floor: 0.3 }
    }
}

fn frame_name(index: usize) -> String {
    format!("{index:06}")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn read_sweep(path: &Path, frame: usize, timestamp: f64) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(Error::schema(Some(frame), "sweep", format!("{} bytes is not a multiple of 16", bytes.len())));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut stamps = Vec::with_capacity(bytes.len() / 16);
    for rec in bytes.chunks_exact(16) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4-byte slice")) as f64;
        points.push(Point3::new(f(0), f(1), f(2)));
        stamps.push(timestamp + f(3));
    }
    PointCloud::new(points, stamps, CoordFrame::Sensor).map_err(|e| Error::schema(Some(frame), "sweep", e.to_string()))
}

fn write_sweep(path: &Path, cloud: &PointCloud, timestamp: f64) -> Result<()> {
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for (p, t) in cloud.points().iter().zip(cloud.timestamps()) {
        for v in [p.x, p.y, p.z, t - timestamp] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads and validates a scene directory.
pub fn load_scene(dir: &Path, opts: &LoadOptions) -> Result<Scene> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::schema(None, "format_version", format!("unsupported version {}", manifest.format_version)));
    }
    if manifest.convention.camera != CAMERA_CONVENTION {
        return Err(Error::schema(
            None,
            "convention.camera",
            format!("expected {CAMERA_CONVENTION:?}, found {:?}", manifest.convention.camera),
        ));
    }
    let mut calib = BTreeMap::new();
    for c in &manifest.cameras {
        if calib.insert(c.camera_id.clone(), c.clone()).is_some() {
            return Err(Error::schema(None, "cameras", format!("duplicate camera_id {:?}", c.camera_id)));
        }
    }
    if manifest.frames.is_empty() {
        return Err(Error::schema(None, "frames", "scene has no frames"));
    }

    let mut frames = Vec::new();
    let mut sweeps = Vec::new();
    let mut detections = Vec::new();
    for (i, mf) in manifest.frames.iter().enumerate() {
        if mf.index != i {
            return Err(Error::schema(Some(i), "index", format!("expected {i}, found {}", mf.index)));
        }
        let mut cameras = Vec::new();
        for id in &mf.cameras {
            let cam = calib
                .get(id)
                .ok_or_else(|| Error::schema(Some(i), "cameras", format!("camera_id {id:?} has no calibration")))?;
            cameras.push(cam.clone());
        }
        let name = frame_name(i);
        sweeps.push(read_sweep(&dir.join("sweeps").join(format!("{name}.bin")), i, mf.timestamp)?);

        let det_dir = dir.join("detections").join(&name);
        if let Ok(entries) = fs::read_dir(&det_dir) {
            for entry in entries.flatten() {
                let path = entry.path();
                if path.extension().is_some_and(|e| e == "json") {
                    let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
                    if !mf.cameras.contains(&stem) {
                        return Err(Error::schema(Some(i), "detections", format!("unknown camera_id {stem:?}")));
                    }
                }
            }
        }
        let mut per_camera = BTreeMap::new();
        for cam in &cameras {
            let records: Vec<DetectionRecord> = read_json(&det_dir.join(format!("{}.json", cam.camera_id)))?;
            let dets: Vec<Detection2D> = records
                .into_iter()
                .filter(|r| r.confidence >= opts.confidence_floor)
                .map(|r| r.into_detection(&cam.camera_id))
                .collect();
            per_camera.insert(cam.camera_id.clone(), dets);
        }
        detections.push(per_camera);
        frames.push(FrameContext {
            frame_index: i,
            timestamp: mf.timestamp,
            ego_pose: mf.ego_pose,
            cameras,
        });
    }
    let scene = Scene {
        scene_id: manifest.scene_id,
        embedding_dim: manifest.embedding_dim,
        lidar_extrinsic: manifest.lidar_extrinsic,
        frames,
        sweeps,
        detections,
    };
    scene.validate()?;
    Ok(scene)
}

/// Writes `scene` in the interchange layout. Point data is stored as `f32`.
pub fn write_scene(scene: &Scene, dir: &Path) -> Result<()> {
    scene.validate()?;
    let mkdir = |p: &PathBuf| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        scene_id: scene.scene_id.clone(),
        convention: Convention::default(),
        embedding_dim: scene.embedding_dim,
        lidar_extrinsic: scene.lidar_extrinsic,
        cameras: scene.cameras(),
        frames: scene
            .frames
            .iter()
            .map(|f| ManifestFrame {
                index: f.frame_index,
                timestamp: f.timestamp,
                ego_pose: f.ego_pose,
                cameras: f.cameras.iter().map(|c| c.camera_id.clone()).collect(),
            })
            .collect(),
    };
    mkdir(&dir.to_path_buf())?;
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;

    let sweep_dir = dir.join("sweeps");
    mkdir(&sweep_dir)?;
    for (f, cloud) in scene.frames.iter().zip(&scene.sweeps) {
        write_sweep(&sweep_dir.join(format!("{}.bin", frame_name(f.frame_index))), cloud, f.timestamp)?;
    }
    for (f, dets) in scene.frames.iter().zip(&scene.detections) {
        let det_dir = dir.join("detections").join(frame_name(f.frame_index));
        mkdir(&det_dir)?;
        for cam in &f.cameras {
            let records: Vec<DetectionRecord> = dets
                .get(&cam.camera_id)
                .map(|v| v.iter().map(DetectionRecord::from_detection).collect())
                .unwrap_or_default();
            let path = det_dir.join(format!("{}.json", cam.camera_id));
            let text = serde_json::to_string(&records).expect("detections serialize");
            fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

/// Up to `k` consecutive sweeps ending at a reference frame, in that frame's ego coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepAggregate {
    pub reference_frame_index: usize,
    pub cloud: PointCloud,
    /// Frame index each point came from.
    pub source_sweep: Vec<usize>,
}

impl SweepAggregate {
    /// Indices of points that came from the reference sweep itself.
    pub fn reference_indices(&self) -> Vec<usize> {
        self.source_sweep
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == self.reference_frame_index)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Merges sweeps `ref_idx-k+1 ..= ref_idx` (clipped at the scene start) into
/// the reference ego frame via sensor → ego_i → global → ego_ref.
pub fn aggregate_sweeps(scene: &Scene, ref_idx: usize, k: usize) -> Result<SweepAggregate> {
    if ref_idx >= scene.frames.len() {
        return Err(Error::InvalidArgument(format!(
            "reference frame {ref_idx} out of range for {} frames",
            scene.frames.len()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("sweep count must be at least 1".into()));
    }
    let ego_ref_inv = scene.frames[ref_idx].ego_pose.inverse();
    let first = (ref_idx + 1).saturating_sub(k);
    let mut points = Vec::new();
    let mut stamps = Vec::new();
    let mut source = Vec::new();
    for i in first..=ref_idx {
        let to_ref = ego_ref_inv.compose(&scene.frames[i].ego_pose).compose(&scene.lidar_extrinsic);
        let moved = transform_points(&scene.sweeps[i], &to_ref, CoordFrame::Ego);
        let n = moved.len();
        let (p, t) = moved.into_parts();
        points.extend(p);
        stamps.extend(t);
        source.extend(std::iter::repeat_n(i, n));
    }
    // sweeps are visited oldest first, so timestamps stay sorted
    let cloud = PointCloud::new(points, stamps, CoordFrame::Ego)?;
    Ok(SweepAggregate {
        reference_frame_index: ref_idx,
        cloud,
        source_sweep: source,
    })
}

/// Camera ids in a scene, in azimuth order around the ego vehicle.
pub fn cameras_by_azimuth(cameras: &[CameraCalib]) -> Vec<String> {
    let mut v: Vec<(f64, String)> = cameras.iter().map(|c| (c.optical_azimuth(), c.camera_id.clone())).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    v.into_iter().map(|(_, id)| id).collect()
}

/// Unordered pairs of cameras that are neighbours in azimuth order (cyclic).
pub fn adjacent_cameras(cameras: &[CameraCalib]) -> BTreeSet<(String, String)> {
    let order = cameras_by_azimuth(cameras);
    let n = order.len();
    let mut out = BTreeSet::new();
    if n < 2 {
        return out;
    }
    for i in 0..n {
        let (a, b) = (&order[i], &order[(i + 1) % n]);
        if a != b {
            out.insert(if a < b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_points(points.iter().map(|p| Point3::from(*p)).collect(), 0.0, CoordFrame::Sensor).unwrap()
    }

    fn scene_with_poses(poses: Vec<RigidTransform>, sweeps: Vec<PointCloud>) -> Scene {
        let n = poses.len();
        Scene {
            scene_id: "t".into(),
            embedding_dim: 4,
            lidar_extrinsic: RigidTransform::identity(),
            frames: poses
                .into_iter()
                .enumerate()
                .map(|(i, ego_pose)| FrameContext {
                    frame_index: i,
                    timestamp: i as f64 * 0.5,
                    ego_pose,
                    cameras: vec![],
                })
                .collect(),
            sweeps,
            detections: vec![BTreeMap::new(); n],
        }
    }

    #[test]
    fn single_sweep_is_reference() {
        let lidar = RigidTransform::from_yaw(0.1, Point3::new(0.5, 0.0, 1.8));
        let mut s = scene_with_poses(
            vec![RigidTransform::identity(), RigidTransform::from_yaw(0.3, Point3::new(4.0, 1.0, 0.0))],
            vec![cloud(&[[1.0, 2.0, 3.0]]), cloud(&[[5.0, 0.0, -1.0], [2.0, 2.0, 0.0]])],
        );
        s.lidar_extrinsic = lidar;
        let agg = aggregate_sweeps(&s, 1, 1).unwrap();
        assert_eq!(agg.cloud.len(), 2);
        assert_abs_diff_eq!(agg.cloud.points()[0], lidar.apply(&Point3::new(5.0, 0.0, -1.0)), epsilon = 1e-12);
        assert_eq!(agg.source_sweep, vec![1, 1]);
    }

    #[test]
    fn static_ego_duplicates_points() {
        let wall = [[10.0, -1.0, 1.0], [10.0, 1.0, 1.0]];
        let s = scene_with_poses(vec![RigidTransform::identity(); 2], vec![cloud(&wall), cloud(&wall)]);
        let agg = aggregate_sweeps(&s, 1, 5).unwrap();
        assert_eq!(agg.cloud.len(), 4);
        assert_abs_diff_eq!(agg.cloud.points()[0], agg.cloud.points()[2], epsilon = 1e-9);
        assert_abs_diff_eq!(agg.cloud.points()[1], agg.cloud.points()[3], epsilon = 1e-9);
    }

    #[test]
    fn moving_ego_aligns_static_point() {
        // static point at global (10,0,0); ego at x=0 then x=1
        let poses = vec![
            RigidTransform::identity(),
            RigidTransform::from_yaw(0.0, Point3::new(1.0, 0.0, 0.0)),
        ];
        let s = scene_with_poses(poses, vec![cloud(&[[10.0, 0.0, 0.0]]), cloud(&[[9.0, 0.0, 0.0]])]);
        let agg = aggregate_sweeps(&s, 1, 5).unwrap();
        assert_abs_diff_eq!(agg.cloud.points()[0], Point3::new(9.0, 0.0, 0.0), epsilon = 1e-9);
        assert_abs_diff_eq!(agg.cloud.points()[1], Point3::new(9.0, 0.0, 0.0), epsilon = 1e-9);
    }

    #[test]
    fn counts_add_up_and_start_is_clipped() {
        let sweeps = vec![cloud(&[[1.0, 0.0, 0.0]; 3]), cloud(&[[1.0, 0.0, 0.0]; 5]), cloud(&[[1.0, 0.0, 0.0]; 7])];
        let s = scene_with_poses(vec![RigidTransform::identity(); 3], sweeps);
        assert_eq!(aggregate_sweeps(&s, 2, 5).unwrap().cloud.len(), 15);
        assert_eq!(aggregate_sweeps(&s, 2, 2).unwrap().cloud.len(), 12);
        assert_eq!(aggregate_sweeps(&s, 0, 5).unwrap().cloud.len(), 3);
        assert!(aggregate_sweeps(&s, 3, 5).is_err());
        assert!(aggregate_sweeps(&s, 0, 0).is_err());
    }

    #[test]
    fn aggregation_is_translation_equivariant() {
        let poses = vec![
            RigidTransform::from_yaw(0.2, Point3::new(3.0, 1.0, 0.0)),
            RigidTransform::from_yaw(0.25, Point3::new(4.0, 1.5, 0.1)),
            RigidTransform::from_yaw(0.4, Point3::new(5.5, 2.5, 0.0)),
        ];
        let sweeps = vec![
            cloud(&[[1.0, 2.0, 0.5], [-3.0, 4.0, 1.0]]),
            cloud(&[[7.0, -2.0, 0.0]]),
            cloud(&[[0.5, 0.5, 0.5], [9.0, 9.0, 1.0]]),
        ];
        let offset = RigidTransform::from_yaw(0.0, Point3::new(1234.5, -987.25, 12.0));
        let shifted: Vec<_> = poses.iter().map(|p| offset.compose(p)).collect();
        let a = aggregate_sweeps(&scene_with_poses(poses, sweeps.clone()), 2, 3).unwrap();
        let b = aggregate_sweeps(&scene_with_poses(shifted, sweeps), 2, 3).unwrap();
        for (p, q) in a.cloud.points().iter().zip(b.cloud.points()) {
            assert!((p - q).amax() < 1e-9);
        }
    }

    #[test]
    fn adjacency_is_cyclic() {
        let cam = |id: &str, yaw: f64| {
            let ego_from_cam = RigidTransform::from_rotation_matrix(
                nalgebra::Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0),
                Point3::zeros(),
            );
            let pose = RigidTransform::from_yaw(yaw, Point3::zeros()).compose(&ego_from_cam);
            CameraCalib::new(id, 100.0, 100.0, 50.0, 50.0, 100, 100, pose.inverse()).unwrap()
        };
        let cams = vec![cam("front", 0.0), cam("left", 2.0), cam("back", 3.1), cam("right", -2.0)];
        assert_abs_diff_eq!(cams[1].optical_azimuth(), 2.0, epsilon = 1e-9);
        assert_eq!(cameras_by_azimuth(&cams), vec!["right", "front", "left", "back"]);
        let adj = adjacent_cameras(&cams);
        assert!(adj.contains(&("front".into(), "right".into())));
        assert!(adj.contains(&("back".into(), "right".into())));
        assert!(!adj.contains(&("back".into(), "front".into())));
    }
}
