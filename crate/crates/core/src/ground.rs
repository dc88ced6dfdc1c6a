//! Ground and sky removal with a global RANSAC plane refined per azimuth sector.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Point3, PointCloud};

/// Plane `{p : normal·p + d = 0}` with an upward unit normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub normal: Point3,
    pub d: f64,
    pub inlier_count: usize,
}

impl Plane {
    pub fn signed_distance(&self, p: &Point3) -> f64 {
        self.normal.dot(p) + self.d
    }

    /// `z = 0` seen from above.
    pub fn horizontal() -> Self {
        Self {
            normal: Point3::z(),
            d: 0.0,
            inlier_count: 0,
        }
    }
}

/// Which side of `max_height` is discarded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeightGate {
    /// Drop points higher than `max_height` above the local plane (sky removal).
    DropAbove,
    /// Drop points lower than `max_height`.
    DropBelow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundConfig {
    pub ground_threshold: f64,
    pub max_range: f64,
    pub max_height: f64,
    pub height_gate: HeightGate,
    pub n_sectors: usize,
    pub ransac_iters: usize,
    pub ransac_inlier_tol: f64,
    pub rng_seed: u64,
    /// Sectors with fewer points fall back to the global plane.
    pub sector_min_support: usize,
    /// Sector planes tilted further than this from the global plane are rejected.
    pub max_sector_tilt_deg: f64,
}

impl Default for GroundConfig {
    fn default() -> Self {
        Self {
            ground_threshold: 0.30,
            max_range: 40.0,
            max_height: 4.0,
            height_gate: HeightGate::DropAbove,
            n_sectors: 8,
            ransac_iters: 200,
            ransac_inlier_tol: 0.10,
            rng_seed: 0,
            sector_min_support: 50,
            max_sector_tilt_deg: 10.0,
        }
    }
}

impl GroundConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ground_threshold", self.ground_threshold),
            ("max_range", self.max_range),
            ("max_height", self.max_height),
            ("ransac_inlier_tol", self.ransac_inlier_tol),
            ("max_sector_tilt_deg", self.max_sector_tilt_deg),
        ];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Config(format!("ground.{k} must be positive, got {v}")));
        }
        if self.n_sectors == 0 || self.ransac_iters == 0 {
            return Err(Error::Config("ground.n_sectors and ground.ransac_iters must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_not_collinear(points: &[Point3]) -> Result<()> {
    if points.len() < 3 {
        return Err(Error::DegenerateGeometry("plane fit needs at least 3 points"));
    }
    let p0 = points[0];
    let far = points
        .iter()
        .max_by(|a, b| (*a - p0).norm_squared().total_cmp(&(*b - p0).norm_squared()))
        .copied()
        .unwrap_or(p0);
    let axis = far - p0;
    let scale = axis.norm_squared();
    let spread = points
        .iter()
        .map(|p| (p - p0).cross(&axis).norm_squared())
        .fold(0.0, f64::max);
    if scale == 0.0 || spread <= 1e-24 * scale * scale {
        return Err(Error::DegenerateGeometry("points are collinear"));
    }
    Ok(())
}

fn canonical(normal: Point3, d: f64) -> (Point3, f64) {
    if normal.z < 0.0 {
        (-normal, -d)
    } else {
        (normal, d)
    }
}

/// Least-squares plane through `points` (smallest principal axis of their scatter).
fn least_squares_plane(points: &[Point3]) -> Option<(Point3, f64)> {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Point3>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let q = p - centroid;
        cov += q * q.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let k = eig.eigenvalues.imin();
    let normal = eig.eigenvectors.column(k).into_owned();
    let norm = normal.norm();
    if !(norm > 0.0) {
        return None;
    }
    let normal = normal / norm;
    Some(canonical(normal, -normal.dot(&centroid)))
}

fn count_inliers(points: &[Point3], normal: &Point3, d: f64, tol: f64) -> usize {
    points.iter().filter(|p| (normal.dot(p) + d).abs() <= tol).count()
}

fn ransac_with_rng(points: &[Point3], iters: usize, tol: f64, rng: &mut ChaCha8Rng) -> Result<Plane> {
    check_not_collinear(points)?;
    let n = points.len();
    let mut best: Option<(Point3, f64, usize)> = None;
    for _ in 0..iters {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let mut k = rng.random_range(0..n - 2);
        for taken in [i.min(j), i.max(j)] {
            if k >= taken {
                k += 1;
            }
        }
        let (a, b, c) = (points[i], points[j], points[k]);
        let cross = (b - a).cross(&(c - a));
        let len = cross.norm();
        if len < 1e-12 {
            continue;
        }
        let normal = cross / len;
        let d = -normal.dot(&a);
        let count = count_inliers(points, &normal, d, tol);
        if best.is_none_or(|(_, _, c)| count > c) {
            best = Some((normal, d, count));
        }
    }
    let Some((normal, d, _)) = best else {
        return Err(Error::DegenerateGeometry("no non-degenerate RANSAC sample"));
    };
    let inliers: Vec<Point3> = points
        .iter()
        .filter(|p| (normal.dot(p) + d).abs() <= tol)
        .copied()
        .collect();
    let (normal, d) = match least_squares_plane(&inliers) {
        Some(refit) if inliers.len() >= 3 => refit,
        _ => canonical(normal, d),
    };
    Ok(Plane {
        normal,
        d,
        inlier_count: count_inliers(points, &normal, d, tol),
    })
}

/// RANSAC plane over random 3-point hypotheses, refit by least squares on the
/// inliers of the best hypothesis. Deterministic for a fixed `seed`.
pub fn fit_plane_ransac(points: &[Point3], iters: usize, tol: f64, seed: u64) -> Result<Plane> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ransac_with_rng(points, iters, tol, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlaneSource {
    Sector,
    GlobalFallback,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundModel {
    pub global: Plane,
    pub sectors: Vec<(Plane, PlaneSource)>,
}

pub fn sector_of(p: &Point3, n_sectors: usize) -> usize {
    let az = p.y.atan2(p.x) + PI;
    ((az / TAU * n_sectors as f64) as usize).min(n_sectors - 1)
}

/// Global plane plus one plane per azimuth sector around the ego origin.
///
/// Sector `s` draws from RANSAC stream `s + 1` of the root seed so sector
/// fits are independent of evaluation order. Without a usable global fit the
/// ego `z = 0` plane is assumed.
pub fn fit_ground_model(points: &[Point3], cfg: &GroundConfig) -> GroundModel {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let global = ransac_with_rng(points, cfg.ransac_iters, cfg.ransac_inlier_tol, &mut rng)
        .unwrap_or_else(|_| Plane::horizontal());
    let mut buckets: Vec<Vec<Point3>> = vec![Vec::new(); cfg.n_sectors];
    for p in points {
        buckets[sector_of(p, cfg.n_sectors)].push(*p);
    }
    let max_tilt = cfg.max_sector_tilt_deg.to_radians();
    let sectors = buckets
        .iter()
        .enumerate()
        .map(|(s, bucket)| {
            if bucket.len() < cfg.sector_min_support {
                return (global, PlaneSource::GlobalFallback);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            rng.set_stream(s as u64 + 1);
            match ransac_with_rng(bucket, cfg.ransac_iters, cfg.ransac_inlier_tol, &mut rng) {
                Ok(plane) if plane.normal.dot(&global.normal).clamp(-1.0, 1.0).acos() <= max_tilt => {
                    (plane, PlaneSource::Sector)
                }
                _ => (global, PlaneSource::GlobalFallback),
            }
        })
        .collect();
    GroundModel { global, sectors }
}

/// Indices of points that survive ground, sub-ground, range and height gates.
pub fn remove_ground(cloud: &PointCloud, cfg: &GroundConfig) -> Vec<usize> {
    if cloud.is_empty() {
        return Vec::new();
    }
    let model = fit_ground_model(cloud.points(), cfg);
    classify(cloud.points(), &model, cfg)
}

/// Applies the gates of [`remove_ground`] against a fitted model.
pub fn classify(points: &[Point3], model: &GroundModel, cfg: &GroundConfig) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let (plane, _) = &model.sectors[sector_of(p, cfg.n_sectors)];
            let h = plane.signed_distance(p);
            let sky = match cfg.height_gate {
                HeightGate::DropAbove => h > cfg.max_height,
                HeightGate::DropBelow => h < cfg.max_height,
            };
            h >= cfg.ground_threshold && p.xy().norm() <= cfg.max_range && !sky
        })
        .map(|(i, _)| i)
        .collect()
}
