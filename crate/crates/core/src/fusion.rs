//! Multi-camera merging, appearance-based frame matching and ICP velocities.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use kdtree::distance::squared_euclidean;
use kdtree::KdTree;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{fit_box, ClassWidthPrior, ObjectProposal};
use crate::error::{Error, Result};
use crate::scene::{Point3, Vec2};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    /// m/s; gates frame-to-frame displacement.
    pub max_speed: f64,
    pub similarity_floor: f64,
    pub icp_max_iters: usize,
    /// meters
    pub icp_tol: f64,
    /// m/s
    pub moving_threshold: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            max_speed: 15.0,
            similarity_floor: 0.3,
            icp_max_iters: 50,
            icp_tol: 1e-4,
            moving_threshold: 0.5,
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_speed > 0.0 && self.icp_tol > 0.0 && self.moving_threshold > 0.0) || self.icp_max_iters == 0 {
            return Err(Error::Config("tracking parameters must be positive".into()));
        }
        if !(-1.0..=1.0).contains(&self.similarity_floor) {
            return Err(Error::Config("tracking.similarity_floor must lie in [-1, 1]".into()));
        }
        Ok(())
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// Component-wise mean, rescaled to unit length (left as the mean if it vanishes).
pub fn average_embedding(embeddings: &[&[f64]]) -> Vec<f64> {
    let Some(first) = embeddings.first() else {
        return Vec::new();
    };
    let mut sum = vec![0.0; first.len()];
    for e in embeddings {
        for (s, v) in sum.iter_mut().zip(e.iter()) {
            *s += v;
        }
    }
    let n = embeddings.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        sum.iter_mut().for_each(|s| *s /= norm);
    }
    sum
}

fn shares_points(a: &[usize], b: &[usize]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => return true,
        }
    }
    false
}

fn on_adjacent_cameras(a: &ObjectProposal, b: &ObjectProposal, adjacency: &BTreeSet<(String, String)>) -> bool {
    a.source_cameras.iter().any(|ca| {
        b.source_cameras.iter().any(|cb| {
            let key = if ca < cb { (ca.clone(), cb.clone()) } else { (cb.clone(), ca.clone()) };
            adjacency.contains(&key)
        })
    })
}

/// Canonical order so merging does not depend on input order.
fn proposal_order(a: &ObjectProposal, b: &ObjectProposal) -> Ordering {
    a.point_indices
        .cmp(&b.point_indices)
        .then_with(|| a.source_cameras.cmp(&b.source_cameras))
        .then_with(|| a.class_name.cmp(&b.class_name))
        .then_with(|| a.confidence.total_cmp(&b.confidence))
        .then_with(|| {
            a.embedding
                .iter()
                .zip(&b.embedding)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut k = i;
    while parent[k] != r {
        let next = parent[k];
        parent[k] = r;
        k = next;
    }
    r
}

/// Merges same-class proposals of one frame that share lidar points, or that
/// both touch the border band of adjacent cameras with centers closer than the
/// class width. Groups are connected components of that relation.
pub fn merge_multicamera(
    proposals: &[ObjectProposal],
    adjacency: &BTreeSet<(String, String)>,
    widths: &ClassWidthPrior,
    default_width: f64,
) -> Result<Vec<ObjectProposal>> {
    let mut sorted: Vec<&ObjectProposal> = proposals.iter().collect();
    sorted.sort_by(|a, b| proposal_order(a, b));
    let n = sorted.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (sorted[i], sorted[j]);
            if a.class_name != b.class_name {
                continue;
            }
            let shared = shares_points(&a.point_indices, &b.point_indices);
            let border = a.border_flag
                && b.border_flag
                && on_adjacent_cameras(a, b, adjacency)
                && (a.bbox.center_xy() - b.bbox.center_xy()).norm()
                    <= widths.get(&a.class_name).unwrap_or(default_width);
            if shared || border {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups
        .into_values()
        .map(|members| {
            if members.len() == 1 {
                return Ok(sorted[members[0]].clone());
            }
            let group: Vec<&ObjectProposal> = members.iter().map(|&i| sorted[i]).collect();
            merge_group(&group)
        })
        .collect()
}

fn merge_group(group: &[&ObjectProposal]) -> Result<ObjectProposal> {
    let mut by_index: BTreeMap<usize, Point3> = BTreeMap::new();
    for p in group {
        for (&i, q) in p.point_indices.iter().zip(&p.points) {
            by_index.entry(i).or_insert(*q);
        }
    }
    let (point_indices, points): (Vec<usize>, Vec<Point3>) = by_index.into_iter().unzip();
    let frame = group[0].bbox.frame;
    let embeddings: Vec<&[f64]> = group.iter().map(|p| p.embedding.as_slice()).collect();
    Ok(ObjectProposal {
        bbox: fit_box(&points, frame)?,
        point_indices,
        points,
        class_name: group[0].class_name.clone(),
        confidence: group.iter().map(|p| p.confidence).sum::<f64>() / group.len() as f64,
        embedding: average_embedding(&embeddings),
        source_cameras: group.iter().flat_map(|p| p.source_cameras.iter().cloned()).collect(),
        border_flag: group.iter().any(|p| p.border_flag),
    })
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    similarity: f64,
    distance: f64,
    other: usize,
}

impl Candidate {
    /// Higher similarity, then shorter distance, then lower index.
    fn beats(&self, other: &Candidate) -> bool {
        match self.similarity.total_cmp(&other.similarity) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => match self.distance.total_cmp(&other.distance) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => self.other < other.other,
            },
        }
    }
}

/// Mutual-best appearance matching between consecutive frames.
///
/// A candidate pair shares the class, moved at most `max_speed · dt` and has
/// similarity at least `similarity_floor`. Pairs are returned by ascending
/// `prev` index.
pub fn match_frames(
    prev: &[ObjectProposal],
    next: &[ObjectProposal],
    dt: f64,
    cfg: &TrackingConfig,
) -> Result<Vec<(usize, usize)>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("frame interval must be positive, got {dt}")));
    }
    let gate = cfg.max_speed * dt;
    let mut best_next: Vec<Option<Candidate>> = vec![None; prev.len()];
    let mut best_prev: Vec<Option<Candidate>> = vec![None; next.len()];
    for (i, a) in prev.iter().enumerate() {
        for (j, b) in next.iter().enumerate() {
            if a.class_name != b.class_name {
                continue;
            }
            let distance = (a.bbox.center_xy() - b.bbox.center_xy()).norm();
            if distance > gate {
                continue;
            }
            let similarity = cosine_similarity(&a.embedding, &b.embedding)?;
            if similarity < cfg.similarity_floor {
                continue;
            }
            let fwd = Candidate {
                similarity,
                distance,
                other: j,
            };
            if best_next[i].is_none_or(|c| fwd.beats(&c)) {
                best_next[i] = Some(fwd);
            }
            let bwd = Candidate {
                similarity,
                distance,
                other: i,
            };
            if best_prev[j].is_none_or(|c| bwd.beats(&c)) {
                best_prev[j] = Some(bwd);
            }
        }
    }
    Ok(best_next
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            let j = c.as_ref()?.other;
            (best_prev[j].as_ref()?.other == i).then_some((i, j))
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult {
    pub translation: Point3,
    pub iterations: usize,
    /// Mean nearest-neighbour distance at the start and after every accepted step.
    pub mean_distances: Vec<f64>,
}

fn centroid(points: &[Point3]) -> Point3 {
    points.iter().sum::<Point3>() / points.len() as f64
}

struct NearestIndex<'a> {
    tree: KdTree<f64, usize, [f64; 3]>,
    points: &'a [Point3],
}

impl<'a> NearestIndex<'a> {
    fn new(points: &'a [Point3]) -> Self {
        let mut tree = KdTree::with_capacity(3, points.len());
        for (i, p) in points.iter().enumerate() {
            tree.add([p.x, p.y, p.z], i).expect("finite point");
        }
        Self { tree, points }
    }

    fn nearest(&self, q: &Point3) -> &Point3 {
        let found = self.tree.nearest(&[q.x, q.y, q.z], 1, &squared_euclidean).expect("finite query");
        &self.points[*found[0].1]
    }

    /// (mean distance, mean residual vector) of `src + t` against the index.
    fn residuals(&self, src: &[Point3], t: &Point3) -> (f64, Point3) {
        let mut dist = 0.0;
        let mut delta = Point3::zeros();
        for p in src {
            let q = p + t;
            let r = self.nearest(&q) - q;
            dist += r.norm();
            delta += r;
        }
        let n = src.len() as f64;
        (dist / n, delta / n)
    }
}

/// Translation-only ICP from `src` onto `dst`.
///
/// Starts from the centroid difference, then repeatedly moves by the mean
/// nearest-neighbour residual. A step that would increase the mean distance
/// ends the iteration, as does a step shorter than `icp_tol`.
pub fn icp_translation(src: &[Point3], dst: &[Point3], cfg: &TrackingConfig) -> Result<IcpResult> {
    if src.is_empty() || dst.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let index = NearestIndex::new(dst);
    let mut t = centroid(dst) - centroid(src);
    let (mut err, mut delta) = index.residuals(src, &t);
    let mut mean_distances = vec![err];
    let mut iterations = 0;
    while iterations < cfg.icp_max_iters && delta.norm() >= cfg.icp_tol {
        let candidate = t + delta;
        let (next_err, next_delta) = index.residuals(src, &candidate);
        if next_err > err {
            break;
        }
        t = candidate;
        err = next_err;
        delta = next_delta;
        iterations += 1;
        mean_distances.push(err);
    }
    Ok(IcpResult {
        translation: t,
        iterations,
        mean_distances,
    })
}

/// One object followed through consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub track_id: usize,
    /// (frame, proposal index), frames strictly increasing.
    pub members: Vec<(usize, usize)>,
    /// Reported planar velocity per member, m/s.
    pub velocities: Vec<Vec2>,
    /// Similarity of each link between consecutive members.
    pub link_similarities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    pub prev: usize,
    pub next: usize,
    pub similarity: f64,
    pub velocity: Vec2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingOutput {
    pub tracks: Vec<Track>,
    /// Track id per frame per proposal.
    pub track_ids: Vec<Vec<usize>>,
    /// Velocity per frame per proposal.
    pub velocities: Vec<Vec<Vec2>>,
}

/// Matches one pair of consecutive frames and estimates link velocities.
pub fn link_frames(
    prev: &[ObjectProposal],
    next: &[ObjectProposal],
    dt: f64,
    cfg: &TrackingConfig,
) -> Result<Vec<Link>> {
    let pairs = match_frames(prev, next, dt, cfg)?;
    let gate = cfg.max_speed * dt;
    pairs
        .into_iter()
        .map(|(i, j)| {
            let (a, b) = (&prev[i], &next[j]);
            let shift = icp_translation(&a.points, &b.points, cfg)?.translation.xy();
            // the gate bounds center motion; fall back to it when ICP overshoots
            let shift = if shift.norm() <= gate {
                shift
            } else {
                b.bbox.center_xy() - a.bbox.center_xy()
            };
            Ok(Link {
                prev: i,
                next: j,
                similarity: cosine_similarity(&a.embedding, &b.embedding)?,
                velocity: shift / dt,
            })
        })
        .collect()
}

/// Chains frame-to-frame matches into tracks with ICP velocities.
///
/// `frames` holds `(timestamp, proposals)` in temporal order, all proposals in
/// one fixed (global) frame. Track ids follow first appearance.
pub fn build_tracks(frames: &[(f64, Vec<ObjectProposal>)], cfg: &TrackingConfig) -> Result<TrackingOutput> {
    let links: Vec<Vec<Link>> = frames
        .par_windows(2)
        .map(|w| link_frames(&w[0].1, &w[1].1, w[1].0 - w[0].0, cfg))
        .collect::<Result<_>>()?;

    let mut track_ids: Vec<Vec<usize>> = Vec::with_capacity(frames.len());
    let mut tracks: Vec<Track> = Vec::new();
    for (f, (_, proposals)) in frames.iter().enumerate() {
        let incoming: BTreeMap<usize, &Link> = if f == 0 {
            BTreeMap::new()
        } else {
            links[f - 1].iter().map(|l| (l.next, l)).collect()
        };
        let ids: Vec<usize> = (0..proposals.len())
            .map(|p| match incoming.get(&p) {
                Some(link) => {
                    let id = track_ids[f - 1][link.prev];
                    let t = &mut tracks[id];
                    t.members.push((f, p));
                    t.velocities.push(link.velocity);
                    t.link_similarities.push(link.similarity);
                    id
                }
                None => {
                    let id = tracks.len();
                    let head_velocity = links
                        .get(f)
                        .and_then(|ls| ls.iter().find(|l| l.prev == p))
                        .map(|l| l.velocity)
                        .unwrap_or_else(Vec2::zeros);
                    tracks.push(Track {
                        track_id: id,
                        members: vec![(f, p)],
                        velocities: vec![head_velocity],
                        link_similarities: Vec::new(),
                    });
                    id
                }
            })
            .collect();
        track_ids.push(ids);
    }

    let mut velocities: Vec<Vec<Vec2>> = frames.iter().map(|(_, p)| vec![Vec2::zeros(); p.len()]).collect();
    for t in &tracks {
        for (&(f, p), v) in t.members.iter().zip(&t.velocities) {
            velocities[f][p] = *v;
        }
    }
    Ok(TrackingOutput {
        tracks,
        track_ids,
        velocities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Box3D, CoordFrame};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn proposal(class: &str, center: (f64, f64), embedding: Vec<f64>, indices: Vec<usize>, camera: &str) -> ObjectProposal {
        let points: Vec<Point3> = indices
            .iter()
            .map(|&i| Point3::new(center.0 + 0.1 * (i % 7) as f64, center.1 + 0.1 * (i % 5) as f64, 0.5))
            .collect();
        ObjectProposal {
            point_indices: indices,
            points,
            class_name: class.into(),
            confidence: 0.8,
            embedding,
            bbox: Box3D::new(
                Point3::new(center.0, center.1, 0.5),
                [1.0, 1.0, 1.0],
                0.0,
                Vec2::zeros(),
                CoordFrame::Global,
            )
            .unwrap(),
            source_cameras: BTreeSet::from([camera.to_string()]),
            border_flag: false,
        }
    }

    #[test]
    fn cosine_examples() {
        let a = unit(&[1.0, 2.0, 3.0]);
        assert_abs_diff_eq!(cosine_similarity(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(cosine_similarity(&a, &neg).unwrap(), -1.0, epsilon = 1e-12);
        assert!(matches!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(Error::DimensionMismatch(1, 2))));
    }

    #[test]
    fn merge_shared_points() {
        let e = unit(&[1.0, 1.0]);
        let a = proposal("car", (10.0, 0.0), e.clone(), vec![1, 2, 3], "front");
        let b = proposal("car", (10.2, 0.0), e.clone(), vec![3, 4], "left");
        let out = merge_multicamera(&[a, b], &BTreeSet::new(), &ClassWidthPrior::default(), 1.0).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].point_indices, vec![1, 2, 3, 4]);
        assert_eq!(out[0].source_cameras.len(), 2);
        for (x, y) in out[0].embedding.iter().zip(&e) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn merge_requires_same_class() {
        let e = unit(&[1.0, 1.0]);
        let a = proposal("car", (10.0, 0.0), e.clone(), vec![1, 2, 3], "front");
        let b = proposal("truck", (10.0, 0.0), e, vec![1, 2, 3], "left");
        let out = merge_multicamera(&[a, b], &BTreeSet::new(), &ClassWidthPrior::default(), 1.0).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn merge_border_adjacency() {
        let e = unit(&[1.0, 0.0]);
        let mut a = proposal("car", (10.0, 5.0), e.clone(), vec![1, 2], "front");
        let mut b = proposal("car", (10.0, 6.5), e.clone(), vec![7, 8], "left");
        a.border_flag = true;
        b.border_flag = true;
        let adj = BTreeSet::from([("front".to_string(), "left".to_string())]);
        let widths = ClassWidthPrior::default();
        assert_eq!(merge_multicamera(&[a.clone(), b.clone()], &adj, &widths, 1.0).unwrap().len(), 1);
        assert_eq!(merge_multicamera(&[a.clone(), b.clone()], &BTreeSet::new(), &widths, 1.0).unwrap().len(), 2);
        b.bbox.center.y = 8.0;
        assert_eq!(merge_multicamera(&[a, b], &adj, &widths, 1.0).unwrap().len(), 2);
    }

    #[test]
    fn match_single_pair_and_gate() {
        let cfg = TrackingConfig::default();
        let e = unit(&[1.0, 0.2]);
        let a = proposal("car", (0.0, 0.0), e.clone(), vec![0], "c");
        let b = proposal("car", (3.0, 0.0), e.clone(), vec![0], "c");
        assert_eq!(match_frames(std::slice::from_ref(&a), &[b], 0.5, &cfg).unwrap(), vec![(0, 0)]);
        let far = proposal("car", (15.0 * 0.5 + 1e-6, 0.0), e, vec![0], "c");
        assert!(match_frames(std::slice::from_ref(&a), &[far], 0.5, &cfg).unwrap().is_empty());
        assert!(match_frames(std::slice::from_ref(&a), std::slice::from_ref(&a), 0.0, &cfg).is_err());
    }

    #[test]
    fn mutual_best_example() {
        // unit embeddings realizing similarities [[0.9, 0.8], [0.85, 0.7]]
        let sims = [[0.9, 0.8], [0.85, 0.7]];
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let prev_e = [vec![1.0, 0.0, 0.0], vec![h, h, 0.0]];
        let next_e: Vec<Vec<f64>> = (0..2)
            .map(|j| {
                let x: f64 = sims[0][j];
                let y = sims[1][j] / h - x;
                vec![x, y, (1.0 - x * x - y * y).sqrt()]
            })
            .collect();
        for (i, pe) in prev_e.iter().enumerate() {
            for (j, ne) in next_e.iter().enumerate() {
                assert_abs_diff_eq!(cosine_similarity(pe, ne).unwrap(), sims[i][j], epsilon = 1e-12);
            }
        }
        let prev: Vec<_> = prev_e.iter().map(|e| proposal("car", (0.0, 0.0), e.clone(), vec![0], "c")).collect();
        let next: Vec<_> = next_e.iter().map(|e| proposal("car", (1.0, 0.0), e.clone(), vec![0], "c")).collect();
        assert_eq!(match_frames(&prev, &next, 0.5, &TrackingConfig::default()).unwrap(), vec![(0, 0)]);
    }

    #[test]
    fn icp_examples() {
        let cfg = TrackingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src: Vec<Point3> = (0..200)
            .map(|_| Point3::new(rng.random_range(0.0..4.0), rng.random_range(0.0..2.0), rng.random_range(0.0..1.5)))
            .collect();
        let shift = Point3::new(1.0, 0.5, 0.0);
        let mut dst: Vec<Point3> = src.iter().map(|p| p + shift).collect();
        dst.reverse();
        let r = icp_translation(&src, &dst, &cfg).unwrap();
        assert!((r.translation - shift).norm() < 1e-3);
        let same = icp_translation(&src, &src, &cfg).unwrap();
        assert!(same.translation.norm() < cfg.icp_tol);
        let one = icp_translation(&[Point3::new(1.0, 2.0, 3.0)], &[Point3::new(4.5, -1.0, 3.25)], &cfg).unwrap();
        assert_eq!(one.translation, Point3::new(3.5, -3.0, 0.25));
        assert!(matches!(icp_translation(&[], &src, &cfg), Err(Error::EmptyCloud)));
    }

    #[test]
    fn icp_partial_overlap_is_monotone() {
        let cfg = TrackingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let face: Vec<Point3> = (0..300)
            .map(|_| Point3::new(rng.random_range(0.0..4.0), 0.0, rng.random_range(0.3..1.5)))
            .collect();
        let side: Vec<Point3> = (0..60)
            .map(|_| Point3::new(0.0, rng.random_range(0.0..1.8), rng.random_range(0.3..1.5)))
            .collect();
        let shift = Point3::new(1.2, 0.3, 0.0);
        let src = face.clone();
        let dst: Vec<Point3> = face.iter().chain(&side).map(|p| p + shift).collect();
        let r = icp_translation(&src, &dst, &cfg).unwrap();
        assert!(r.mean_distances.windows(2).all(|w| w[1] <= w[0]));
        assert!((r.translation - shift).norm() < 0.1, "{:?}", r.translation);
    }

    fn moving_frames(speed: f64, n: usize, dt: f64) -> Vec<(f64, Vec<ObjectProposal>)> {
        let e = unit(&[0.3, 0.9, 0.1]);
        (0..n)
            .map(|f| {
                let x = 5.0 + speed * dt * f as f64;
                (f as f64 * dt, vec![proposal("car", (x, 2.0), e.clone(), (0..35).collect(), "c")])
            })
            .collect()
    }

    #[test]
    fn static_object_single_track() {
        let out = build_tracks(&moving_frames(0.0, 3, 0.5), &TrackingConfig::default()).unwrap();
        assert_eq!(out.tracks.len(), 1);
        assert_eq!(out.tracks[0].members, vec![(0, 0), (1, 0), (2, 0)]);
        assert!(out.velocities.iter().flatten().all(|v| v.norm() < 0.05));
    }

    #[test]
    fn constant_velocity_object() {
        let out = build_tracks(&moving_frames(4.0, 4, 0.5), &TrackingConfig::default()).unwrap();
        assert_eq!(out.tracks.len(), 1);
        for v in out.velocities.iter().flatten() {
            assert!((v.norm() - 4.0).abs() < 0.1);
        }
    }

    #[test]
    fn singleton_track() {
        let frames = vec![
            (0.0, vec![proposal("car", (5.0, 0.0), unit(&[1.0, 0.0]), vec![1], "c")]),
            (0.5, vec![]),
        ];
        let out = build_tracks(&frames, &TrackingConfig::default()).unwrap();
        assert_eq!(out.tracks.len(), 1);
        assert_eq!(out.velocities[0][0], Vec2::zeros());
        assert_eq!(out.track_ids, vec![vec![0], vec![]]);
    }

    fn arb_frame(class_count: usize) -> impl Strategy<Value = Vec<ObjectProposal>> {
        prop::collection::vec(
            (0..class_count, -10.0f64..10.0, -10.0f64..10.0, prop::array::uniform3(-1.0f64..1.0)),
            0..7,
        )
        .prop_map(|items| {
            items
                .into_iter()
                .filter(|(_, _, _, e)| e.iter().any(|v| v.abs() > 1e-3))
                .map(|(c, x, y, e)| proposal(["car", "pedestrian"][c], (x, y), unit(&e), vec![0], "c"))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn matching_is_mutual_best_and_symmetric(prev in arb_frame(2), next in arb_frame(2)) {
            let cfg = TrackingConfig::default();
            let dt = 0.5;
            let pairs = match_frames(&prev, &next, dt, &cfg).unwrap();
            let mut used_prev = BTreeSet::new();
            let mut used_next = BTreeSet::new();
            for &(i, j) in &pairs {
                prop_assert!(used_prev.insert(i) && used_next.insert(j));
            }
            // brute-force mutual-best check
            let gated = |i: usize, j: usize| {
                let (a, b) = (&prev[i], &next[j]);
                a.class_name == b.class_name
                    && (a.bbox.center_xy() - b.bbox.center_xy()).norm() <= cfg.max_speed * dt
                    && cosine_similarity(&a.embedding, &b.embedding).unwrap() >= cfg.similarity_floor
            };
            let sim = |i: usize, j: usize| cosine_similarity(&prev[i].embedding, &next[j].embedding).unwrap();
            for &(i, j) in &pairs {
                prop_assert!(gated(i, j));
                prop_assert!((0..next.len()).filter(|&k| gated(i, k)).all(|k| sim(i, k) <= sim(i, j)));
                prop_assert!((0..prev.len()).filter(|&k| gated(k, j)).all(|k| sim(k, j) <= sim(i, j)));
            }
            let mut swapped: Vec<(usize, usize)> = match_frames(&next, &prev, dt, &cfg)
                .unwrap()
                .into_iter()
                .map(|(a, b)| (b, a))
                .collect();
            swapped.sort();
            prop_assert_eq!(swapped, pairs);
        }

        #[test]
        fn merge_is_order_independent(frame in arb_frame(2), seed in any::<u64>()) {
            // give proposals overlapping index ranges so some merge
            let props: Vec<ObjectProposal> = frame
                .into_iter()
                .enumerate()
                .map(|(k, mut p)| {
                    p.point_indices = (k * 3..k * 3 + 5).collect();
                    p.points = p.point_indices.iter().map(|&i| Point3::new(i as f64 * 0.1, (i % 3) as f64, 0.4)).collect();
                    p
                })
                .collect();
            let mut shuffled = props.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.random_range(0..=i));
            }
            let widths = ClassWidthPrior::default();
            let a = merge_multicamera(&props, &BTreeSet::new(), &widths, 1.0).unwrap();
            let b = merge_multicamera(&shuffled, &BTreeSet::new(), &widths, 1.0).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn icp_error_never_increases(
            pts in prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 5..80),
            extra in prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 0..20),
            shift in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let src: Vec<Point3> = pts.iter().map(|p| Point3::from(*p)).collect();
            let shift = Point3::from(shift);
            let dst: Vec<Point3> = src.iter().map(|p| p + shift).chain(extra.iter().map(|p| Point3::from(*p))).collect();
            let r = icp_translation(&src, &dst, &TrackingConfig::default()).unwrap();
            prop_assert!(r.mean_distances.windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn track_speeds_respect_gate(speed in 0.0f64..30.0) {
            let cfg = TrackingConfig::default();
            let out = build_tracks(&moving_frames(speed, 3, 0.5), &cfg).unwrap();
            for v in out.velocities.iter().flatten() {
                prop_assert!(v.norm() <= cfg.max_speed + 1e-9);
            }
        }
    }
}
