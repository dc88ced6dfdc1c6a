//! Per-frame box lists as written by `label` and by the synthetic generator.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalBox;
use crate::scene::{Box3D, CoordFrame, Point3, Vec2};

pub const RESULTS_FORMAT: &str = "autolabel-results";
pub const RESULTS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultsSource {
    Pipeline,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsHeader {
    pub format: String,
    pub version: u32,
    pub scene_id: String,
    pub source: ResultsSource,
    /// Hex SHA-256 of the canonical configuration that produced the file.
    pub config_hash: Option<String>,
    /// Boxes are in the ego frame of their own frame.
    pub coordinate_frame: CoordFrame,
}

impl ResultsHeader {
    pub fn new(scene_id: &str, source: ResultsSource, config_hash: Option<String>) -> Self {
        Self {
            format: RESULTS_FORMAT.into(),
            version: RESULTS_VERSION,
            scene_id: scene_id.into(),
            source,
            config_hash,
            coordinate_frame: CoordFrame::Ego,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultBox {
    pub center: [f64; 3],
    /// (length, width, height)
    pub size: [f64; 3],
    pub yaw: f64,
    /// Planar velocity in ego axes, m/s.
    pub velocity: [f64; 2],
    pub class_name: String,
    pub confidence: f64,
    pub track_id: usize,
}

impl ResultBox {
    pub fn from_box(b: &Box3D, class_name: &str, confidence: f64, track_id: usize) -> Self {
        Self {
            center: [b.center.x, b.center.y, b.center.z],
            size: b.size,
            yaw: b.yaw,
            velocity: [b.velocity.x, b.velocity.y],
            class_name: class_name.into(),
            confidence,
            track_id,
        }
    }

    pub fn to_box(&self) -> Result<Box3D> {
        Box3D::new(
            Point3::from(self.center),
            self.size,
            self.yaw,
            Vec2::from(self.velocity),
            CoordFrame::Ego,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultFrame {
    pub frame_index: usize,
    pub timestamp: f64,
    pub boxes: Vec<ResultBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Results {
    pub header: ResultsHeader,
    pub frames: Vec<ResultFrame>,
}

impl Results {
    pub fn frame(&self, frame_index: usize) -> Option<&ResultFrame> {
        self.frames.iter().find(|f| f.frame_index == frame_index)
    }

    pub fn to_eval_boxes(&self) -> Result<Vec<EvalBox>> {
        let mut out = Vec::new();
        for f in &self.frames {
            for b in &f.boxes {
                let bbox = b
                    .to_box()
                    .map_err(|e| Error::schema(Some(f.frame_index), "boxes", e.to_string()))?;
                out.push(EvalBox {
                    frame: f.frame_index,
                    bbox,
                    class_name: b.class_name.clone(),
                    confidence: b.confidence,
                });
            }
        }
        Ok(out)
    }

    /// Canonical text form: pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize") + "\n"
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let results: Results = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if results.header.format != RESULTS_FORMAT || results.header.version != RESULTS_VERSION {
            return Err(Error::schema(
                None,
                "header",
                format!(
                    "expected {RESULTS_FORMAT} version {RESULTS_VERSION}, got {} version {}",
                    results.header.format, results.header.version
                ),
            ));
        }
        results.to_eval_boxes()?;
        Ok(results)
    }
}
