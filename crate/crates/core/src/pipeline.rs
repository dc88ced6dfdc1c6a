//! End-to-end labeling: ground removal, mask NMS, association, denoising, box
//! fitting, multi-camera merging, tracking and box refinement.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::cluster::{associate, build_proposal, denoise, ClassWidthPrior, DenoiseConfig, ObjectProposal};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, DYNAMIC_CLASSES};
use crate::fusion::{build_tracks, merge_multicamera, TrackingConfig};
use crate::ground::{remove_ground, GroundConfig};
use crate::ingest::{adjacent_cameras, aggregate_sweeps, load_scene, LoadOptions, Scene, DEFAULT_SWEEPS};
use crate::mask::{mask_nms, MaskNmsConfig};
use crate::refine::{inflate_box, orient_by_motion, static_yaw_fallback, ClassSizePrior, MovingReference, StaticYawConfig};
use crate::results::{ResultBox, ResultFrame, Results, ResultsHeader, ResultsSource};
use crate::scene::{CoordFrame, RigidTransform, Vec2};

/// Optional stages. With a stage off its input passes through unchanged:
/// raw clusters without denoising, no merging, zero velocities and no heading
/// from motion without tracking, no inflation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub denoise: bool,
    pub multicam_merge: bool,
    pub tracking: bool,
    pub inflation: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self::all(true)
    }
}

impl StageToggles {
    pub fn all(on: bool) -> Self {
        Self {
            denoise: on,
            multicam_merge: on,
            tracking: on,
            inflation: on,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub results: String,
    pub report_json: String,
    pub report_csv: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            results: "results.json".into(),
            report_json: "report.json".into(),
            report_csv: "report.csv".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Sweeps aggregated per frame, the reference sweep included.
    pub sweeps: usize,
    /// Associate only points of the reference sweep with masks. Ground removal
    /// still sees the full aggregate.
    pub associate_reference_only: bool,
    /// Clusters smaller than this after denoising are dropped.
    pub min_cluster_points: usize,
    /// Detection classes the pipeline accepts.
    pub classes: Vec<String>,
    pub stages: StageToggles,
    pub ground: GroundConfig,
    pub nms: MaskNmsConfig,
    pub class_widths: ClassWidthPrior,
    pub denoise: DenoiseConfig,
    pub size_priors: ClassSizePrior,
    pub tracking: TrackingConfig,
    pub static_yaw: StaticYawConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sweeps: DEFAULT_SWEEPS,
            associate_reference_only: false,
            min_cluster_points: 3,
            classes: DYNAMIC_CLASSES.iter().map(|c| c.to_string()).collect(),
            stages: StageToggles::default(),
            ground: GroundConfig::default(),
            nms: MaskNmsConfig::default(),
            class_widths: ClassWidthPrior::default(),
            denoise: DenoiseConfig::default(),
            size_priors: ClassSizePrior::default(),
            tracking: TrackingConfig::default(),
            static_yaw: StaticYawConfig::default(),
            eval: EvalConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sweeps == 0 {
            return Err(Error::Config("sweeps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.nms.conf_floor) || !(self.nms.ioa_threshold > 0.0 && self.nms.ioa_threshold <= 1.0) {
            return Err(Error::Config("nms.conf_floor must lie in [0,1] and nms.ioa_threshold in (0,1]".into()));
        }
        if self.denoise.min_pts == 0 || !(self.denoise.default_eps > 0.0) {
            return Err(Error::Config("denoise.min_pts and denoise.default_eps must be positive".into()));
        }
        if !(self.static_yaw.square_ratio >= 1.0 && self.static_yaw.radius > 0.0) {
            return Err(Error::Config("static_yaw.square_ratio >= 1 and static_yaw.radius > 0 required".into()));
        }
        self.ground.validate()?;
        self.class_widths.validate()?;
        self.size_priors.validate()?;
        self.tracking.validate()?;
        self.eval.validate()
    }

    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            path: origin.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, path)
    }

    /// Applies a `dotted.key=value` override. The value is read as JSON and
    /// falls back to a plain string; the key must already exist.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = match slot {
                Value::Object(map) => map.get_mut(part),
                Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| Error::Config(format!("unknown configuration key {key:?}")))?;
        }
        *slot = value;
        let updated: Self =
            serde_json::from_value(tree).map_err(|e| Error::Config(format!("override {key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Pretty JSON with every default spelled out.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Hex SHA-256 of the compact canonical form.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(compact.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn proposal_key(p: &ObjectProposal) -> (&[usize], &BTreeSet<String>) {
    (&p.point_indices, &p.source_cameras)
}

/// Object proposals of one frame in its ego frame.
pub fn frame_proposals(
    scene: &Scene,
    frame: usize,
    cfg: &PipelineConfig,
    adjacency: &BTreeSet<(String, String)>,
) -> Result<Vec<ObjectProposal>> {
    let agg = aggregate_sweeps(scene, frame, cfg.sweeps)?;
    let mut candidates = remove_ground(&agg.cloud, &cfg.ground);
    if cfg.associate_reference_only {
        candidates.retain(|&i| agg.source_sweep[i] == frame);
    }
    let all_points = agg.cloud.points();
    let points: Vec<_> = candidates.iter().map(|&i| all_points[i]).collect();

    let mut proposals = Vec::new();
    for cam in &scene.frames[frame].cameras {
        let Some(dets) = scene.detections[frame].get(&cam.camera_id) else {
            continue;
        };
        let wanted: Vec<_> = dets.iter().filter(|d| cfg.classes.contains(&d.class_name)).cloned().collect();
        let kept = mask_nms(&wanted, &cfg.nms)?;
        for cluster in associate(&points, cam, &kept) {
            let det = &kept[cluster.detection];
            let cluster_points: Vec<_> = cluster.point_indices.iter().map(|&i| points[i]).collect();
            let selected: Vec<usize> = if cfg.stages.denoise {
                denoise(&cluster_points, &det.class_name, &cfg.class_widths, &cfg.denoise)
            } else {
                (0..cluster_points.len()).collect()
            };
            if selected.len() < cfg.min_cluster_points.max(1) {
                continue;
            }
            let indices = selected.iter().map(|&k| candidates[cluster.point_indices[k]]).collect();
            let pts = selected.iter().map(|&k| cluster_points[k]).collect();
            proposals.push(build_proposal(indices, pts, det, cam.width)?);
        }
    }
    if cfg.stages.multicam_merge {
        merge_multicamera(&proposals, adjacency, &cfg.class_widths, cfg.denoise.default_eps)
    } else {
        proposals.sort_by(|a, b| proposal_key(a).cmp(&proposal_key(b)));
        Ok(proposals)
    }
}

fn to_global(p: &ObjectProposal, pose: &RigidTransform) -> ObjectProposal {
    ObjectProposal {
        points: p.points.iter().map(|q| pose.apply(q)).collect(),
        bbox: p.bbox.transformed(pose, CoordFrame::Global),
        ..p.clone()
    }
}

/// Runs every stage over a loaded scene. Frames are processed in parallel on
/// the current rayon pool; the output does not depend on its size.
pub fn label_scene(scene: &Scene, cfg: &PipelineConfig) -> Result<Results> {
    cfg.validate()?;
    let adjacency = adjacent_cameras(&scene.cameras());
    let per_frame: Vec<Vec<ObjectProposal>> = (0..scene.frames.len())
        .into_par_iter()
        .map(|f| frame_proposals(scene, f, cfg, &adjacency))
        .collect::<Result<_>>()?;

    let global: Vec<(f64, Vec<ObjectProposal>)> = per_frame
        .iter()
        .zip(&scene.frames)
        .map(|(props, f)| (f.timestamp, props.iter().map(|p| to_global(p, &f.ego_pose)).collect()))
        .collect();

    let (velocities, track_ids) = if cfg.stages.tracking {
        let out = build_tracks(&global, &cfg.tracking)?;
        (out.velocities, out.track_ids)
    } else {
        let mut next = 0;
        let ids = global
            .iter()
            .map(|(_, props)| {
                let ids: Vec<usize> = (next..next + props.len()).collect();
                next += props.len();
                ids
            })
            .collect();
        (global.iter().map(|(_, p)| vec![Vec2::zeros(); p.len()]).collect(), ids)
    };

    let thr = cfg.tracking.moving_threshold;
    let mut frames = Vec::with_capacity(global.len());
    for (f, (_, props)) in global.iter().enumerate() {
        let ctx = &scene.frames[f];
        let mut boxes: Vec<_> = props
            .iter()
            .zip(&velocities[f])
            .map(|(p, v)| {
                let mut b = p.bbox;
                b.velocity = *v;
                if cfg.stages.tracking {
                    b = orient_by_motion(&b, *v, thr);
                }
                b
            })
            .collect();
        if cfg.stages.tracking {
            let moving: Vec<MovingReference<'_>> = props
                .iter()
                .zip(&boxes)
                .filter(|(_, b)| b.velocity.norm() > thr)
                .map(|(p, b)| MovingReference {
                    class_name: &p.class_name,
                    center_xy: b.center_xy(),
                    yaw: b.yaw,
                })
                .collect();
            for (p, b) in props.iter().zip(boxes.iter_mut()) {
                if b.velocity.norm() <= thr {
                    *b = static_yaw_fallback(b, &p.class_name, &moving, &cfg.static_yaw);
                }
            }
        }
        let ego_xy = ctx.ego_pose.translation().xy();
        let to_ego = ctx.ego_pose.inverse();
        let mut out: Vec<ResultBox> = props
            .iter()
            .zip(boxes)
            .zip(&track_ids[f])
            .map(|((p, b), &id)| {
                let b = if cfg.stages.inflation {
                    inflate_box(&b, &p.class_name, &cfg.size_priors, ego_xy)
                } else {
                    b
                };
                ResultBox::from_box(&b.transformed(&to_ego, CoordFrame::Ego), &p.class_name, p.confidence, id)
            })
            .collect();
        out.sort_by_key(|b| b.track_id);
        frames.push(ResultFrame {
            frame_index: ctx.frame_index,
            timestamp: ctx.timestamp,
            boxes: out,
        });
    }
    Ok(Results {
        header: ResultsHeader::new(&scene.scene_id, ResultsSource::Pipeline, Some(cfg.hash())),
        frames,
    })
}

/// Loads a scene directory and labels it.
pub fn run_label(scene_dir: &Path, cfg: &PipelineConfig) -> Result<Results> {
    cfg.validate()?;
    let scene = load_scene(
        scene_dir,
        &LoadOptions {
            confidence_floor: cfg.nms.conf_floor,
        },
    )?;
    label_scene(&scene, cfg)
}
