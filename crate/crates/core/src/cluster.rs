//! Mask association, DBSCAN denoising and L-shape box fitting.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Detection2D;
use crate::scene::{wrap_yaw, Box3D, CameraCalib, CoordFrame, Point3, Vec2};

/// Dimensions below this are clamped, so single points and lines still give boxes.
pub const MIN_EXTENT: f64 = 0.05;

/// Fraction of the image width on either side that counts as the border band.
pub const BORDER_BAND: f64 = 0.15;

pub const NOISE: i32 = -1;

/// A denoised object hypothesis flowing through merging, tracking and refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectProposal {
    /// Indices into the frame's ground-filtered aggregate, ascending.
    pub point_indices: Vec<usize>,
    /// Points matching `point_indices`, in the frame the box is expressed in.
    pub points: Vec<Point3>,
    pub class_name: String,
    pub confidence: f64,
    pub embedding: Vec<f64>,
    pub bbox: Box3D,
    pub source_cameras: BTreeSet<String>,
    pub border_flag: bool,
}

/// Average object width per class, used as the DBSCAN radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassWidthPrior(pub BTreeMap<String, f64>);

impl Default for ClassWidthPrior {
    fn default() -> Self {
        let table = [
            ("car", 1.9),
            ("truck", 2.5),
            ("bus", 2.9),
            ("trailer", 2.9),
            ("construction_vehicle", 2.8),
            ("pedestrian", 0.7),
            ("motorcycle", 0.8),
            ("bicycle", 0.6),
        ];
        Self(table.iter().map(|(k, v)| (k.to_string(), *v)).collect())
    }
}

impl ClassWidthPrior {
    pub fn get(&self, class_name: &str) -> Option<f64> {
        self.0.get(class_name).copied()
    }

    pub fn validate(&self) -> Result<()> {
        match self.0.iter().find(|(_, &w)| !(w > 0.0)) {
            Some((k, w)) => Err(Error::Config(format!("class width for {k} must be positive, got {w}"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseConfig {
    pub min_pts: usize,
    /// Radius for classes missing from the width table.
    pub default_eps: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            min_pts: 3,
            default_eps: 1.0,
        }
    }
}

/// Points of one detection, as indices into the associated cloud.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawCluster {
    pub detection: usize,
    pub point_indices: Vec<usize>,
}

/// Assigns each point to the detection whose mask contains its projection.
///
/// Masks must be pairwise disjoint (the output of mask NMS), which makes the
/// assignment unique. Clusters come out in detection order.
pub fn associate(points_ego: &[Point3], cam: &CameraCalib, dets: &[Detection2D]) -> Vec<RawCluster> {
    if dets.is_empty() {
        return Vec::new();
    }
    let (w, h) = (cam.width, cam.height);
    // label image: detection index + 1, 0 for background
    let mut labels = vec![0u32; (w * h) as usize];
    for (k, det) in dets.iter().enumerate() {
        if det.mask.size() != (h, w) {
            continue;
        }
        for (x, y) in det.mask.decode().iter_set() {
            let o = (x * h + y) as usize;
            if labels[o] == 0 {
                labels[o] = k as u32 + 1;
            }
        }
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); dets.len()];
    for (i, p) in points_ego.iter().enumerate() {
        let Some(px) = cam.project_ego(p) else {
            continue;
        };
        if !(px.u >= 0.0 && px.v >= 0.0 && px.u < w as f64 && px.v < h as f64) {
            continue;
        }
        let o = (px.u.floor() as u32 * h + px.v.floor() as u32) as usize;
        if let Some(k) = labels[o].checked_sub(1) {
            members[k as usize].push(i);
        }
    }
    members
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(detection, point_indices)| RawCluster {
            detection,
            point_indices,
        })
        .collect()
}

/// Uniform grid over the plane with cell size `eps`; neighbours of a point lie
/// in its cell or the eight around it.
struct Grid<'a> {
    points: &'a [Vec2],
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl<'a> Grid<'a> {
    fn new(points: &'a [Vec2], cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { points, cell, cells }
    }

    fn key(p: &Vec2, cell: f64) -> (i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
    }

    fn neighbours(&self, i: usize, eps_sq: f64, out: &mut Vec<usize>) {
        out.clear();
        let p = self.points[i];
        let (cx, cy) = Self::key(&p, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bucket) = self.cells.get(&(cx + dx, cy + dy)) {
                    out.extend(bucket.iter().copied().filter(|&j| {
                        let d = self.points[j] - p;
                        d.x * d.x + d.y * d.y <= eps_sq
                    }));
                }
            }
        }
        out.sort_unstable();
    }
}

/// Density-based clustering in the plane.
///
/// A point is core when at least `min_pts` points (itself included) lie within
/// `eps`. Clusters are numbered in scan order; a border point joins the first
/// cluster that reaches it. Noise is labelled [`NOISE`].
pub fn dbscan(points: &[Vec2], eps: f64, min_pts: usize) -> Vec<i32> {
    let n = points.len();
    let mut labels = vec![None::<i32>; n];
    if n == 0 {
        return Vec::new();
    }
    let eps_sq = eps * eps;
    let grid = Grid::new(points, eps.max(f64::MIN_POSITIVE));
    let mut neigh = Vec::new();
    let mut inner = Vec::new();
    let mut next_cluster = 0;
    for i in 0..n {
        if labels[i].is_some() {
            continue;
        }
        grid.neighbours(i, eps_sq, &mut neigh);
        if neigh.len() < min_pts {
            labels[i] = Some(NOISE);
            continue;
        }
        let cluster = next_cluster;
        next_cluster += 1;
        labels[i] = Some(cluster);
        let mut queue: VecDeque<usize> = neigh.iter().copied().filter(|&j| j != i).collect();
        while let Some(j) = queue.pop_front() {
            match labels[j] {
                Some(NOISE) => {
                    // border point first seen as noise
                    labels[j] = Some(cluster);
                    continue;
                }
                Some(_) => continue,
                None => labels[j] = Some(cluster),
            }
            grid.neighbours(j, eps_sq, &mut inner);
            if inner.len() >= min_pts {
                queue.extend(inner.iter().copied().filter(|&k| matches!(labels[k], None | Some(NOISE))));
            }
        }
    }
    labels.into_iter().map(|l| l.unwrap_or(NOISE)).collect()
}

/// Keeps the largest DBSCAN component of a cluster in the XY plane.
///
/// Returns indices into `points`. Equal-sized components are ranked by mean
/// planar range to the ego origin (nearest wins). When every point is noise the
/// whole cluster is returned.
pub fn denoise(points: &[Point3], class_name: &str, priors: &ClassWidthPrior, cfg: &DenoiseConfig) -> Vec<usize> {
    if points.is_empty() {
        return Vec::new();
    }
    let eps = priors.get(class_name).unwrap_or(cfg.default_eps);
    let xy: Vec<Vec2> = points.iter().map(|p| p.xy()).collect();
    let labels = dbscan(&xy, eps, cfg.min_pts.max(1));
    let mut groups: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l != NOISE {
            groups.entry(l).or_default().push(i);
        }
    }
    let mean_range = |idx: &[usize]| idx.iter().map(|&i| xy[i].norm()).sum::<f64>() / idx.len() as f64;
    groups
        .into_values()
        .max_by(|a, b| {
            a.len()
                .cmp(&b.len())
                .then_with(|| mean_range(b).total_cmp(&mean_range(a)))
        })
        .unwrap_or_else(|| (0..points.len()).collect())
}

/// Planar rectangle from L-shape fitting. `length ≥ width`, `yaw` along the length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LShape {
    pub yaw: f64,
    pub center: Vec2,
    pub length: f64,
    pub width: f64,
}

pub(crate) const CLOSENESS_FLOOR: f64 = 1e-3;

/// Closeness score of heading `theta`: every point contributes the inverse of
/// its distance to the nearest rectangle edge, floored at 1 mm.
pub(crate) fn closeness_score(points: &[Vec2], theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    let proj = |p: &Vec2| (c * p.x + s * p.y, -s * p.x + c * p.y);
    let (mut min1, mut max1, mut min2, mut max2) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        let (a, b) = proj(p);
        min1 = min1.min(a);
        max1 = max1.max(a);
        min2 = min2.min(b);
        max2 = max2.max(b);
    }
    points
        .iter()
        .map(|p| {
            let (a, b) = proj(p);
            let d1 = (max1 - a).min(a - min1);
            let d2 = (max2 - b).min(b - min2);
            1.0 / d1.min(d2).max(CLOSENESS_FLOOR)
        })
        .sum()
}

fn rectangle_at(points: &[Vec2], theta: f64) -> LShape {
    let e1 = Vec2::new(theta.cos(), theta.sin());
    let e2 = Vec2::new(-theta.sin(), theta.cos());
    let (mut min1, mut max1, mut min2, mut max2) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        let (a, b) = (p.dot(&e1), p.dot(&e2));
        min1 = min1.min(a);
        max1 = max1.max(a);
        min2 = min2.min(b);
        max2 = max2.max(b);
    }
    let center = e1 * ((min1 + max1) / 2.0) + e2 * ((min2 + max2) / 2.0);
    let ext1 = (max1 - min1).max(MIN_EXTENT);
    let ext2 = (max2 - min2).max(MIN_EXTENT);
    if ext1 >= ext2 {
        LShape {
            yaw: wrap_yaw(theta),
            center,
            length: ext1,
            width: ext2,
        }
    } else {
        LShape {
            yaw: wrap_yaw(theta + FRAC_PI_2),
            center,
            length: ext2,
            width: ext1,
        }
    }
}

/// Fits an oriented rectangle by searching headings in [0°, 90°) at 1° steps.
pub fn lshape_fit(points: &[Vec2]) -> Result<LShape> {
    let Some(first) = points.first() else {
        return Err(Error::DegenerateGeometry("no points to fit"));
    };
    if points.iter().all(|p| (p - first).norm() < 1e-12) {
        return Err(Error::DegenerateGeometry("all points coincide"));
    }
    let mut best = (0.0, f64::MIN);
    for step in 0..90 {
        let theta = (step as f64).to_radians();
        let score = closeness_score(points, theta);
        if score > best.1 {
            best = (theta, score);
        }
    }
    Ok(rectangle_at(points, best.0))
}

/// XY rectangle from [`lshape_fit`], vertical extent from the point heights.
/// Coincident points give a minimum-size box at the point.
pub fn fit_box(points: &[Point3], frame: CoordFrame) -> Result<Box3D> {
    let Some(first) = points.first() else {
        return Err(Error::EmptyCloud);
    };
    let xy: Vec<Vec2> = points.iter().map(|p| p.xy()).collect();
    let rect = match lshape_fit(&xy) {
        Ok(r) => r,
        Err(Error::DegenerateGeometry(_)) => LShape {
            yaw: 0.0,
            center: first.xy(),
            length: MIN_EXTENT,
            width: MIN_EXTENT,
        },
        Err(e) => return Err(e),
    };
    let (zmin, zmax) = points
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.z), hi.max(p.z)));
    Box3D::new(
        Point3::new(rect.center.x, rect.center.y, (zmin + zmax) / 2.0),
        [rect.length, rect.width, (zmax - zmin).max(MIN_EXTENT)],
        rect.yaw,
        Vec2::zeros(),
        frame,
    )
}

/// True when the 2D box reaches into the leftmost or rightmost border band.
pub fn touches_border(bbox2d: &[f64; 4], image_width: u32) -> bool {
    let band = BORDER_BAND * image_width as f64;
    bbox2d[0] < band || bbox2d[2] > image_width as f64 - band
}

/// Builds a proposal from the retained points of one detection.
///
/// `point_indices` index the frame's ground-filtered cloud and must match `points`.
pub fn build_proposal(
    point_indices: Vec<usize>,
    points: Vec<Point3>,
    det: &Detection2D,
    image_width: u32,
) -> Result<ObjectProposal> {
    let bbox = fit_box(&points, CoordFrame::Ego)?;
    Ok(ObjectProposal {
        point_indices,
        points,
        class_name: det.class_name.clone(),
        confidence: det.confidence,
        embedding: det.embedding.clone(),
        bbox,
        source_cameras: BTreeSet::from([det.camera_id.clone()]),
        border_flag: touches_border(&det.bbox2d, image_width),
    })
}
