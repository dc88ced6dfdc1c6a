//! Final box conditioning: heading from motion, inflation to class sizes, and
//! the static-object yaw fallback.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_4, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{wrap_yaw, Box3D, Vec2};

/// Minimum plausible dimension as a fraction of the class mean.
pub const DEFAULT_MIN_RATIO: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSizePrior")]
pub struct SizePrior {
    /// (length, width, height) in meters.
    pub mean: [f64; 3],
    pub min: [f64; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSizePrior {
    mean: [f64; 3],
    #[serde(default)]
    min: Option<[f64; 3]>,
}

impl TryFrom<RawSizePrior> for SizePrior {
    type Error = String;

    fn try_from(raw: RawSizePrior) -> std::result::Result<Self, String> {
        let prior = match raw.min {
            Some(min) => SizePrior { mean: raw.mean, min },
            None => SizePrior::from_mean(raw.mean, DEFAULT_MIN_RATIO),
        };
        prior.check()?;
        Ok(prior)
    }
}

impl SizePrior {
    pub fn from_mean(mean: [f64; 3], min_ratio: f64) -> Self {
        Self {
            mean,
            min: mean.map(|m| m * min_ratio),
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        for k in 0..3 {
            if !(self.min[k] > 0.0 && self.mean[k] >= self.min[k] && self.mean[k].is_finite()) {
                return Err(format!("size prior needs mean >= min > 0, got {:?} / {:?}", self.mean, self.min));
            }
        }
        Ok(())
    }
}

/// Per-class size priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassSizePrior(pub BTreeMap<String, SizePrior>);

impl Default for ClassSizePrior {
    fn default() -> Self {
        let table = [
            ("car", [4.6, 1.9, 1.7]),
            ("truck", [7.0, 2.5, 2.8]),
            ("bus", [11.0, 2.9, 3.5]),
            ("trailer", [12.0, 2.9, 3.8]),
            ("construction_vehicle", [6.5, 2.8, 3.2]),
            ("pedestrian", [0.7, 0.7, 1.7]),
            ("motorcycle", [2.1, 0.8, 1.4]),
            ("bicycle", [1.7, 0.6, 1.3]),
        ];
        Self(
            table
                .into_iter()
                .map(|(c, m)| (c.to_string(), SizePrior::from_mean(m, DEFAULT_MIN_RATIO)))
                .collect(),
        )
    }
}

impl ClassSizePrior {
    pub fn get(&self, class_name: &str) -> Option<&SizePrior> {
        self.0.get(class_name)
    }

    pub fn validate(&self) -> Result<()> {
        for (class, prior) in &self.0 {
            prior.check().map_err(|m| Error::Config(format!("size prior for {class}: {m}")))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaticYawConfig {
    pub enabled: bool,
    /// Boxes with length/width below this are treated as near-square.
    pub square_ratio: f64,
    /// meters
    pub radius: f64,
}

impl Default for StaticYawConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            square_ratio: 1.2,
            radius: 10.0,
        }
    }
}

/// Unsigned angle between two headings taken mod π, in [0, π/2].
pub fn axial_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

/// Points a moving box along its motion.
///
/// Above the threshold the yaw becomes the motion heading. When that turns the
/// box by more than 45° (mod π) the length and width labels are exchanged, so
/// the footprint stays where the points are while the length axis follows the
/// motion.
pub fn orient_by_motion(b: &Box3D, velocity: Vec2, moving_threshold: f64) -> Box3D {
    if velocity.norm() <= moving_threshold {
        return *b;
    }
    let yaw = wrap_yaw(velocity.y.atan2(velocity.x));
    let mut out = *b;
    if axial_difference(b.yaw, yaw) > FRAC_PI_4 {
        out.size.swap(0, 1);
    }
    out.yaw = yaw;
    out
}

/// Grows undersized dimensions to the class mean, keeping the face nearest the
/// ego fixed. Height keeps the bottom face instead.
pub fn inflate_box(b: &Box3D, class_name: &str, priors: &ClassSizePrior, ego_xy: Vec2) -> Box3D {
    let Some(prior) = priors.get(class_name) else {
        return *b;
    };
    let mut out = *b;
    let outward = b.center_xy() - ego_xy;
    for (k, axis) in [b.length_axis(), b.width_axis()].into_iter().enumerate() {
        if b.size[k] >= prior.min[k] {
            continue;
        }
        let grow = prior.mean[k] - b.size[k];
        let sign = if outward.dot(&axis) < 0.0 { -1.0 } else { 1.0 };
        let shift = axis * (sign * grow / 2.0);
        out.center.x += shift.x;
        out.center.y += shift.y;
        out.size[k] = prior.mean[k];
    }
    if b.size[2] < prior.min[2] {
        out.center.z += (prior.mean[2] - b.size[2]) / 2.0;
        out.size[2] = prior.mean[2];
    }
    out
}

/// Mean heading of a set of yaws treated mod π (doubled-angle average).
pub fn axial_mean(yaws: &[f64]) -> Option<f64> {
    let (s, c) = yaws
        .iter()
        .fold((0.0, 0.0), |(s, c), y| (s + (2.0 * y).sin(), c + (2.0 * y).cos()));
    if yaws.is_empty() || s.hypot(c) < 1e-9 {
        return None;
    }
    Some(wrap_yaw(s.atan2(c) / 2.0))
}

/// A moving box used as a heading reference for static near-square boxes.
#[derive(Clone, Debug)]
pub struct MovingReference<'a> {
    pub class_name: &'a str,
    pub center_xy: Vec2,
    pub yaw: f64,
}

/// Static boxes keep their fitted yaw unless they are near-square, in which case
/// they take the dominant heading of same-class moving boxes within `radius`.
pub fn static_yaw_fallback(b: &Box3D, class_name: &str, moving: &[MovingReference<'_>], cfg: &StaticYawConfig) -> Box3D {
    if !cfg.enabled || b.length() >= cfg.square_ratio * b.width() {
        return *b;
    }
    let yaws: Vec<f64> = moving
        .iter()
        .filter(|m| m.class_name == class_name && (m.center_xy - b.center_xy()).norm() <= cfg.radius)
        .map(|m| m.yaw)
        .collect();
    let Some(yaw) = axial_mean(&yaws) else {
        return *b;
    };
    let mut out = *b;
    out.yaw = yaw;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{CoordFrame, Point3};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;
    use proptest::prelude::*;

    fn bx(center: (f64, f64, f64), size: [f64; 3], yaw: f64) -> Box3D {
        Box3D::new(Point3::new(center.0, center.1, center.2), size, yaw, Vec2::zeros(), CoordFrame::Ego).unwrap()
    }

    #[test]
    fn orient_examples() {
        let b = bx((10.0, 0.0, 0.8), [4.0, 2.0, 1.6], 0.7);
        assert_eq!(orient_by_motion(&b, Vec2::new(0.4, 0.0), 0.5), b);
        assert_eq!(orient_by_motion(&b, Vec2::new(0.5, 0.0), 0.5), b);
        assert_eq!(orient_by_motion(&b, Vec2::new(3.0, 0.0), 0.5).yaw, 0.0);

        let b = bx((10.0, 0.0, 0.8), [4.0, 2.0, 1.6], 0.0);
        let o = orient_by_motion(&b, Vec2::new(0.0, 2.0), 0.5);
        assert_abs_diff_eq!(o.yaw, FRAC_PI_2, epsilon = 1e-12);
        assert_eq!(o.size, [2.0, 4.0, 1.6]);
        // same footprint
        let mut a = b.corners_xy().map(|c| (c.x, c.y));
        let mut c = o.corners_xy().map(|c| (c.x, c.y));
        a.sort_by(|p, q| p.partial_cmp(q).unwrap());
        c.sort_by(|p, q| p.partial_cmp(q).unwrap());
        for (p, q) in a.iter().zip(&c) {
            assert_abs_diff_eq!(p.0, q.0, epsilon = 1e-9);
            assert_abs_diff_eq!(p.1, q.1, epsilon = 1e-9);
        }
        // reversing the heading never swaps
        let back = orient_by_motion(&b, Vec2::new(-3.0, 0.0), 0.5);
        assert_eq!(back.size, b.size);
        assert_abs_diff_eq!(back.yaw, PI, epsilon = 1e-12);
    }

    #[test]
    fn inflation_examples() {
        let priors = ClassSizePrior::default();
        let big = bx((10.0, 0.0, 0.85), [4.6, 1.9, 1.7], 0.0);
        assert_eq!(inflate_box(&big, "car", &priors, Vec2::zeros()), big);

        // thin car straight ahead, facing across the line of sight
        let thin = bx((10.0, 0.0, 0.85), [4.6, 0.3, 1.7], FRAC_PI_2);
        let out = inflate_box(&thin, "car", &priors, Vec2::zeros());
        assert_abs_diff_eq!(out.width(), 1.9, epsilon = 1e-12);
        assert_abs_diff_eq!(out.center.x, 10.8, epsilon = 1e-9);
        assert_abs_diff_eq!(out.center.y, 0.0, epsilon = 1e-9);

        let flat = bx((10.0, 0.0, 0.1), [4.6, 1.9, 0.2], 0.0);
        let out = inflate_box(&flat, "car", &priors, Vec2::zeros());
        assert_abs_diff_eq!(out.height(), 1.7, epsilon = 1e-12);
        assert_abs_diff_eq!(out.center.z, 0.1 + 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(out.center.z - out.height() / 2.0, 0.0, epsilon = 1e-12);

        let tiny = bx((3.0, 4.0, 0.1), [0.1, 0.1, 0.2], 0.3);
        assert_eq!(inflate_box(&tiny, "unicycle", &priors, Vec2::zeros()), tiny);
    }

    #[test]
    fn prior_parsing() {
        let p: ClassSizePrior = serde_json::from_str(r#"{"car": {"mean": [4.0, 2.0, 1.5]}}"#).unwrap();
        assert_abs_diff_eq!(p.get("car").unwrap().min[1], 1.2, epsilon = 1e-12);
        assert!(serde_json::from_str::<ClassSizePrior>(r#"{"car": {"mean": [4.0, 2.0, 1.5], "min": [5.0, 1.0, 1.0]}}"#).is_err());
        assert!(ClassSizePrior::default().validate().is_ok());
    }

    #[test]
    fn static_fallback_snaps_square_boxes_only() {
        let cfg = StaticYawConfig::default();
        let refs = [
            MovingReference { class_name: "car", center_xy: Vec2::new(5.0, 0.0), yaw: 0.5 },
            MovingReference { class_name: "car", center_xy: Vec2::new(6.0, 0.0), yaw: 0.5 - PI },
            MovingReference { class_name: "car", center_xy: Vec2::new(50.0, 0.0), yaw: 2.0 },
            MovingReference { class_name: "truck", center_xy: Vec2::new(5.0, 1.0), yaw: 1.0 },
        ];
        let square = bx((4.0, 0.0, 0.8), [2.0, 1.9, 1.6], 0.1);
        assert_abs_diff_eq!(static_yaw_fallback(&square, "car", &refs, &cfg).yaw, 0.5, epsilon = 1e-9);
        let long = bx((4.0, 0.0, 0.8), [4.0, 1.9, 1.6], 0.1);
        assert_eq!(static_yaw_fallback(&long, "car", &refs, &cfg), long);
        assert_eq!(static_yaw_fallback(&square, "bicycle", &refs, &cfg), square);
        let off = StaticYawConfig { enabled: false, ..cfg };
        assert_eq!(static_yaw_fallback(&square, "car", &refs, &off), square);
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (
            -30.0f64..30.0,
            -30.0f64..30.0,
            0.0f64..2.0,
            prop::array::uniform3(0.05f64..6.0),
            -3.1f64..3.1,
        )
            .prop_map(|(x, y, z, s, yaw)| bx((x, y, z), s, yaw))
    }

    proptest! {
        #[test]
        fn inflation_invariants(b in arb_box(), class in prop::sample::select(vec!["car", "pedestrian", "bus"]),
                                ego in prop::array::uniform2(-3.0f64..3.0)) {
            let priors = ClassSizePrior::default();
            let ego = Vec2::new(ego[0], ego[1]);
            let out = inflate_box(&b, class, &priors, ego);
            for k in 0..3 {
                prop_assert!(out.size[k] >= b.size[k]);
            }
            prop_assert_eq!(inflate_box(&out, class, &priors, ego), out);
            // near face along each inflated horizontal axis is unchanged
            for (k, axis) in [b.length_axis(), b.width_axis()].into_iter().enumerate() {
                if out.size[k] == b.size[k] {
                    continue;
                }
                let face = |x: &Box3D| {
                    let c = x.center_xy().dot(&axis);
                    let e = ego.dot(&axis);
                    let (lo, hi) = (c - x.size[k] / 2.0, c + x.size[k] / 2.0);
                    if (c - e) < 0.0 { hi } else { lo }
                };
                prop_assert!((face(&out) - face(&b)).abs() < 1e-9);
            }
            prop_assert!((out.center.z - out.size[2] / 2.0 - (b.center.z - b.size[2] / 2.0)).abs() < 1e-9);
        }

        #[test]
        fn slow_motion_is_identity(b in arb_box(), v in prop::array::uniform2(-0.35f64..0.35)) {
            prop_assert_eq!(orient_by_motion(&b, Vec2::new(v[0], v[1]), 0.5), b);
        }

        #[test]
        fn fast_motion_sets_heading(b in arb_box(), angle in -3.1f64..3.1, speed in 0.51f64..20.0) {
            let v = Vec2::new(angle.cos(), angle.sin()) * speed;
            let out = orient_by_motion(&b, v, 0.5);
            prop_assert!(axial_difference(out.yaw, angle) < 1e-9 && (out.yaw - angle).abs() < 1e-9);
        }
    }
}
