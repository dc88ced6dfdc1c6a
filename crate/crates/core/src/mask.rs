//! Run-length encoded instance masks and mask-based suppression.
//!
//! Runs are column-major and start with a run of zeros, the COCO convention.
//! The compact `counts` string uses the COCO character encoding.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRle", into = "RawRle")]
pub struct RleMask {
    height: u32,
    width: u32,
    counts: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawCounts {
    Compressed(String),
    Plain(Vec<u32>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRle {
    counts: RawCounts,
    /// (height, width)
    size: [u32; 2],
}

impl TryFrom<RawRle> for RleMask {
    type Error = Error;

    fn try_from(raw: RawRle) -> Result<Self> {
        let counts = match raw.counts {
            RawCounts::Compressed(s) => counts_from_string(&s)?,
            RawCounts::Plain(v) => v,
        };
        RleMask::new(raw.size[0], raw.size[1], counts)
    }
}

impl From<RleMask> for RawRle {
    fn from(m: RleMask) -> Self {
        RawRle {
            counts: RawCounts::Compressed(counts_to_string(&m.counts)),
            size: [m.height, m.width],
        }
    }
}

impl RleMask {
    pub fn new(height: u32, width: u32, counts: Vec<u32>) -> Result<Self> {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        let expected = height as u64 * width as u64;
        if total != expected {
            return Err(Error::MalformedMask(format!(
                "run lengths sum to {total}, expected {height}x{width}={expected}"
            )));
        }
        Ok(Self { height, width, counts })
    }

    pub fn empty(height: u32, width: u32) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            counts: if n == 0 { Vec::new() } else { vec![n] },
        }
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    /// (height, width)
    pub fn size(&self) -> (u32, u32) {
        (self.height, self.width)
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    pub fn decode(&self) -> MaskGrid {
        let mut data = Vec::with_capacity((self.height * self.width) as usize);
        for (i, &run) in self.counts.iter().enumerate() {
            data.extend(std::iter::repeat_n(i % 2 == 1, run as usize));
        }
        MaskGrid {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Whether pixel `(floor(u), floor(v))` is set; out-of-image pixels are not.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let Some(offset) = pixel_offset(self.height, self.width, u, v) else {
            return false;
        };
        let mut start = 0u64;
        for (i, &run) in self.counts.iter().enumerate() {
            let end = start + run as u64;
            if offset < end {
                return i % 2 == 1;
            }
            start = end;
        }
        false
    }

    /// Pixel count of `self ∩ other`, computed on the runs directly.
    pub fn intersection_area(&self, other: &RleMask) -> Result<u64> {
        self.check_size(other)?;
        let mut a = RunCursor::new(&self.counts);
        let mut b = RunCursor::new(&other.counts);
        let mut area = 0u64;
        while let (Some((va, la)), Some((vb, lb))) = (a.peek(), b.peek()) {
            let step = la.min(lb);
            if va && vb {
                area += step;
            }
            a.advance(step);
            b.advance(step);
        }
        Ok(area)
    }

    fn check_size(&self, other: &RleMask) -> Result<()> {
        if self.size() != other.size() {
            return Err(Error::MaskSizeMismatch {
                a: self.size(),
                b: other.size(),
            });
        }
        Ok(())
    }
}

struct RunCursor<'a> {
    counts: &'a [u32],
    index: usize,
    left: u64,
}

impl<'a> RunCursor<'a> {
    fn new(counts: &'a [u32]) -> Self {
        let mut c = Self {
            counts,
            index: 0,
            left: counts.first().copied().unwrap_or(0) as u64,
        };
        c.skip_empty();
        c
    }

    fn skip_empty(&mut self) {
        while self.left == 0 && self.index < self.counts.len() {
            self.index += 1;
            self.left = self.counts.get(self.index).copied().unwrap_or(0) as u64;
        }
    }

    fn peek(&self) -> Option<(bool, u64)> {
        (self.index < self.counts.len()).then_some((self.index % 2 == 1, self.left))
    }

    fn advance(&mut self, n: u64) {
        self.left -= n;
        self.skip_empty();
    }
}

fn pixel_offset(height: u32, width: u32, u: f64, v: f64) -> Option<u64> {
    if !(u.is_finite() && v.is_finite()) {
        return None;
    }
    let (x, y) = (u.floor(), v.floor());
    if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
        return None;
    }
    Some(x as u64 * height as u64 + y as u64)
}

/// Dense binary mask, column-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGrid {
    height: u32,
    width: u32,
    data: Vec<bool>,
}

impl MaskGrid {
    pub fn new(height: u32, width: u32) -> Self {
        Self {
            height,
            width,
            data: vec![false; (height * width) as usize],
        }
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        (x * self.height + y) as usize
    }

    /// `x` is the column, `y` the row.
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[self.offset(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let o = self.offset(x, y);
        self.data[o] = value;
    }

    pub fn count(&self) -> u64 {
        self.data.iter().filter(|&&b| b).count() as u64
    }

    /// Set pixels as `(x, y)` in storage order.
    pub fn iter_set(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let h = self.height;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| ((i as u32) / h, (i as u32) % h))
    }

    pub fn encode(&self) -> RleMask {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in &self.data {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        if self.data.is_empty() {
            counts.clear();
        }
        RleMask {
            height: self.height,
            width: self.width,
            counts,
        }
    }

    pub(crate) fn data(&self) -> &[bool] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }
}

/// COCO compact string encoding of run lengths.
pub fn counts_to_string(counts: &[u32]) -> String {
    let mut out = String::new();
    for (i, &c) in counts.iter().enumerate() {
        let mut x = c as i64;
        if i > 2 {
            x -= counts[i - 2] as i64;
        }
        loop {
            let mut ch = x & 0x1f;
            x >>= 5;
            let more = if ch & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                ch |= 0x20;
            }
            out.push((ch as u8 + 48) as char);
            if !more {
                break;
            }
        }
    }
    out
}

pub fn counts_from_string(s: &str) -> Result<Vec<u32>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let Some(&b) = bytes.get(p) else {
                return Err(Error::MalformedMask("truncated counts string".into()));
            };
            if !(48..48 + 64).contains(&b) || k > 12 {
                return Err(Error::MalformedMask(format!("invalid counts character {:?}", b as char)));
            }
            let c = (b - 48) as i64;
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        let m = counts.len();
        if m > 2 {
            x += counts[m - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| u32::try_from(c).map_err(|_| Error::MalformedMask(format!("run length {c} out of range"))))
        .collect()
}

/// One instance from an image-space open-vocabulary detector.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection2D {
    pub camera_id: String,
    pub class_name: String,
    pub confidence: f64,
    /// (x0, y0, x1, y1) in pixels
    pub bbox2d: [f64; 4],
    pub mask: RleMask,
    /// Unit-norm appearance embedding.
    pub embedding: Vec<f64>,
}

impl Detection2D {
    /// Checks the record against its camera image and the declared embedding dimension.
    pub fn validate(&self, width: u32, height: u32, embedding_dim: usize) -> std::result::Result<(), String> {
        let [x0, y0, x1, y1] = self.bbox2d;
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence {} outside [0,1]", self.confidence));
        }
        if !(x0 < x1 && y0 < y1) {
            return Err("bbox2d must satisfy x0<x1 and y0<y1".into());
        }
        if x0 < 0.0 || y0 < 0.0 || x1 > width as f64 || y1 > height as f64 {
            return Err("bbox2d outside the image".into());
        }
        if self.mask.size() != (height, width) {
            return Err(format!(
                "mask size {:?} differs from image size {:?}",
                self.mask.size(),
                (height, width)
            ));
        }
        if self.embedding.len() != embedding_dim {
            return Err(format!(
                "embedding dimension {} differs from declared {}",
                self.embedding.len(),
                embedding_dim
            ));
        }
        let norm = self.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(format!("embedding norm {norm} is not 1"));
        }
        Ok(())
    }
}

/// `|a ∩ b| / |a|`, zero for an empty `a`.
pub fn ioa(a: &RleMask, b: &RleMask) -> Result<f64> {
    let inter = a.intersection_area(b)?;
    let area = a.area();
    Ok(if area == 0 { 0.0 } else { inter as f64 / area as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskNmsConfig {
    pub ioa_threshold: f64,
    pub conf_floor: f64,
}

impl Default for MaskNmsConfig {
    fn default() -> Self {
        Self {
            ioa_threshold: 0.5,
            conf_floor: 0.3,
        }
    }
}

/// Mask suppression for the detections of one image.
///
/// Detections under `conf_floor` are dropped. The rest are visited by
/// descending confidence (ties by input order); each is compared against the
/// union of masks already kept and suppressed when its IoA exceeds
/// `ioa_threshold`, otherwise kept with that union cut out of its mask.
pub fn mask_nms(dets: &[Detection2D], cfg: &MaskNmsConfig) -> Result<Vec<Detection2D>> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].confidence >= cfg.conf_floor)
        .collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let Some(&first) = order.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = dets[first].mask.size();
    let mut union = MaskGrid::new(h, w);
    let mut kept = Vec::new();
    for i in order {
        let det = &dets[i];
        if det.mask.size() != (h, w) {
            return Err(Error::MaskSizeMismatch {
                a: (h, w),
                b: det.mask.size(),
            });
        }
        let mut grid = det.mask.decode();
        let area = grid.count();
        let overlap = grid
            .data()
            .iter()
            .zip(union.data())
            .filter(|(&a, &u)| a && u)
            .count() as u64;
        let ratio = if area == 0 { 0.0 } else { overlap as f64 / area as f64 };
        if ratio > cfg.ioa_threshold {
            continue;
        }
        for (m, u) in grid.data_mut().iter_mut().zip(union.data_mut()) {
            if *m {
                if *u {
                    *m = false;
                } else {
                    *u = true;
                }
            }
        }
        let mut out = det.clone();
        if overlap > 0 {
            out.mask = grid.encode();
        }
        kept.push(out);
    }
    Ok(kept)
}
