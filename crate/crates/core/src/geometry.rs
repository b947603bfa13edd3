//! Bounding-box arithmetic: overlap, the relative-action maps between boxes,
//! context enlargement and patch cropping.
//!
//! Actions are relative to the previous box: translations are measured in
//! units of its width/height and size changes as fractions of it. Applying an
//! action and inferring one are inverse maps as long as the inferred action
//! lies inside `[-1, 1]^4`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Frame, Patch};

/// Minimum width/height after applying an action.
pub const MIN_SIDE: f64 = 1.0;

/// Axis-aligned box: top-left corner plus size, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Finite with strictly positive size.
    pub fn is_valid(&self) -> bool {
        self.is_finite() && self.w > 0.0 && self.h > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate box {self:?}")))
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    /// Euclidean distance between the two box centers.
    pub fn center_distance(&self, other: &BoundingBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        (ax - bx).hypot(ay - by)
    }
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

/// Relative box motion `[dx, dy, dw, dh]`, each component in `[-1, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Action {
    pub const ZERO: Action = Action::new(0.0, 0.0, 0.0, 0.0);

    pub const fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Self { dx, dy, dw, dh }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    /// Component-wise clamp into `[-1, 1]`.
    pub fn clamped(&self) -> Self {
        Self::from_array(self.to_array().map(|v| v.clamp(-1.0, 1.0)))
    }

    pub fn in_range(&self) -> bool {
        self.to_array().iter().all(|v| (-1.0..=1.0).contains(v))
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

/// [`iou`] for boxes already known to be valid.
pub(crate) fn iou_unchecked(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Moves `prev` by a relative action; resulting sides are floored at [`MIN_SIDE`].
pub fn apply_action(action: &Action, prev: &BoundingBox) -> BoundingBox {
    BoundingBox {
        x: prev.x + action.dx * prev.w,
        y: prev.y + action.dy * prev.h,
        w: (prev.w + action.dw * prev.w).max(MIN_SIDE),
        h: (prev.h + action.dh * prev.h).max(MIN_SIDE),
    }
}

/// Action that moves `prev` onto `target` before clamping into `[-1, 1]^4`.
pub fn infer_action_raw(target: &BoundingBox, prev: &BoundingBox) -> Action {
    Action {
        dx: (target.x - prev.x) / prev.w,
        dy: (target.y - prev.y) / prev.h,
        dw: (target.w - prev.w) / prev.w,
        dh: (target.h - prev.h) / prev.h,
    }
}

/// Action that moves `prev` onto `target`, clamped into the action space.
pub fn infer_action(target: &BoundingBox, prev: &BoundingBox) -> Action {
    infer_action_raw(target, prev).clamped()
}

/// Box with the same center as `b` and both sides scaled by `factor`.
pub fn context_region(b: &BoundingBox, factor: f64) -> BoundingBox {
    let (cx, cy) = b.center();
    BoundingBox::from_center(cx, cy, b.w * factor, b.h * factor)
}

/// Bilinearly resamples `region` of `frame` into an `out_size = (width, height)` patch.
///
/// Output pixel `(i, j)` samples the frame at the pixel-center-aligned point
/// `(x + (j + 0.5) w / W - 0.5, y + (i + 0.5) h / H - 0.5)`. Frame pixels
/// outside the image read as zero.
pub fn crop_patch(frame: &Frame, region: &BoundingBox, out_size: (usize, usize)) -> Result<Patch> {
    region.validate()?;
    let (out_w, out_h) = out_size;
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid("patch size must be non-zero"));
    }
    let mut patch = Patch::zeros(out_w, out_h);
    let sx_step = region.w / out_w as f64;
    let sy_step = region.h / out_h as f64;
    let plane = out_w * out_h;
    let data = patch.data_mut();
    for i in 0..out_h {
        let sy = region.y + (i as f64 + 0.5) * sy_step - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        let y0 = y0 as i64;
        for j in 0..out_w {
            let sx = region.x + (j as f64 + 0.5) * sx_step - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            let x0 = x0 as i64;
            for c in 0..Patch::CHANNELS {
                let top = (1.0 - fx) * frame.channel_or_zero(x0, y0, c)
                    + fx * frame.channel_or_zero(x0 + 1, y0, c);
                let bottom = (1.0 - fx) * frame.channel_or_zero(x0, y0 + 1, c)
                    + fx * frame.channel_or_zero(x0 + 1, y0 + 1, c);
                data[c * plane + i * out_w + j] = (1.0 - fy) * top + fy * bottom;
            }
        }
    }
    Ok(patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Counts unit cells covered by each integer-aligned box on a grid.
    fn raster_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
        let inside = |r: [i64; 4], px: i64, py: i64| {
            px >= r[0] && px < r[0] + r[2] && py >= r[1] && py < r[1] + r[3]
        };
        let (mut inter, mut union) = (0u64, 0u64);
        let lo = a[0].min(b[0]).min(a[1]).min(b[1]);
        let hi = (a[0] + a[2]).max(b[0] + b[2]).max(a[1] + a[3]).max(b[1] + b[3]);
        for py in lo..hi {
            for px in lo..hi {
                let (ia, ib) = (inside(a, px, py), inside(b, px, py));
                if ia && ib {
                    inter += 1;
                }
                if ia || ib {
                    union += 1;
                }
            }
        }
        inter as f64 / union as f64
    }

    fn bb(v: [f64; 4]) -> BoundingBox {
        BoundingBox::from(v)
    }

    #[test]
    fn iou_examples() {
        let b = bb([3.0, 4.0, 7.5, 2.25]);
        assert_eq!(iou(&b, &b).unwrap(), 1.0);
        assert_eq!(
            iou(&bb([0.0, 0.0, 10.0, 10.0]), &bb([20.0, 20.0, 5.0, 5.0])).unwrap(),
            0.0
        );
        let v = iou(&bb([0.0, 0.0, 10.0, 10.0]), &bb([5.0, 0.0, 10.0, 10.0])).unwrap();
        let oracle = raster_iou([0, 0, 10, 10], [5, 0, 10, 10]);
        assert!((oracle - 1.0 / 3.0).abs() < 1e-12);
        assert!((v - 0.33333).abs() < 1e-5);
    }

    #[test]
    fn iou_rejects_degenerate() {
        let ok = bb([0.0, 0.0, 1.0, 1.0]);
        assert!(iou(&bb([0.0, 0.0, 0.0, 1.0]), &ok).is_err());
        assert!(iou(&ok, &bb([0.0, 0.0, 1.0, -2.0])).is_err());
        assert!(iou(&ok, &bb([f64::NAN, 0.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn apply_action_examples() {
        let b = bb([4.0, -2.0, 13.0, 9.0]);
        assert_eq!(apply_action(&Action::ZERO, &b), b);
        let out = apply_action(&Action::new(0.1, 0.2, 0.5, -0.2), &bb([10.0, 10.0, 20.0, 10.0]));
        for (got, want) in out.to_array().iter().zip([12.0, 12.0, 30.0, 8.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(
            apply_action(&Action::new(0.0, 0.0, -1.0, -1.0), &bb([0.0, 0.0, 10.0, 10.0])),
            bb([0.0, 0.0, 1.0, 1.0])
        );
    }

    #[test]
    fn infer_action_examples() {
        let b = bb([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(infer_action(&b, &b), Action::ZERO);
        let a = infer_action(&bb([12.0, 12.0, 30.0, 8.0]), &bb([10.0, 10.0, 20.0, 10.0]));
        for (got, want) in a.to_array().iter().zip([0.1, 0.2, 0.5, -0.2]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(
            infer_action(&bb([20.0, 0.0, 10.0, 10.0]), &bb([0.0, 0.0, 10.0, 10.0])),
            Action::new(1.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn context_region_examples() {
        let b = bb([0.0, 0.0, 10.0, 10.0]);
        assert_eq!(context_region(&b, 1.0), b);
        assert_eq!(context_region(&b, 1.5), bb([-2.5, -2.5, 15.0, 15.0]));
        // Center (7, 6) is kept, so the top edge lands at 6 - 4 / 2 = 4.
        assert_eq!(context_region(&bb([5.0, 5.0, 4.0, 2.0]), 2.0), bb([3.0, 4.0, 8.0, 4.0]));
    }

    #[test]
    fn crop_uniform_and_outside() {
        let frame = Frame::filled(20, 16, [128, 128, 128]).unwrap();
        let p = crop_patch(&frame, &bb([2.3, 3.1, 9.7, 6.2]), (8, 6)).unwrap();
        assert!(p.data().iter().all(|&v| (v - 128.0).abs() < 1e-9));
        let p = crop_patch(&frame, &bb([100.0, 100.0, 10.0, 10.0]), (8, 8)).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
        assert!(crop_patch(&frame, &bb([0.0, 0.0, 0.0, 5.0]), (8, 8)).is_err());
    }

    /// Tent-filter oracle: each output sample is the sum over every frame pixel
    /// weighted by the separable triangle kernel around the sample point.
    fn tent_sample(frame: &Frame, region: &BoundingBox, out: (usize, usize)) -> Vec<f64> {
        let mut v = vec![0.0; out.0 * out.1 * 3];
        for c in 0..3 {
            for i in 0..out.1 {
                for j in 0..out.0 {
                    let sx = region.x + (j as f64 + 0.5) * region.w / out.0 as f64 - 0.5;
                    let sy = region.y + (i as f64 + 0.5) * region.h / out.1 as f64 - 0.5;
                    let mut acc = 0.0;
                    for py in 0..frame.height() {
                        for px in 0..frame.width() {
                            let wx = (1.0 - (sx - px as f64).abs()).max(0.0);
                            let wy = (1.0 - (sy - py as f64).abs()).max(0.0);
                            acc += wx * wy * frame.pixel(px, py)[c] as f64;
                        }
                    }
                    v[(c * out.1 + i) * out.0 + j] = acc;
                }
            }
        }
        v
    }

    #[test]
    fn crop_half_outside_matches_tent_oracle() {
        let frame = Frame::filled(16, 16, [200, 100, 50]).unwrap();
        let region = bb([-8.0, 0.0, 16.0, 16.0]);
        let p = crop_patch(&frame, &region, (16, 16)).unwrap();
        let oracle = tent_sample(&frame, &region, (16, 16));
        for (a, b) in p.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
        // Left half is padding, right half is the frame; column 7 blends the edge.
        for i in 0..16 {
            for j in 0..7 {
                assert_eq!(p.get(0, i, j), 0.0);
            }
            for j in 8..16 {
                assert_eq!(p.get(0, i, j), 200.0);
            }
        }
    }

    #[test]
    fn crop_textured_matches_tent_oracle() {
        let data: Vec<u8> = (0..12 * 10 * 3).map(|i| ((i * 37) % 251) as u8).collect();
        let frame = Frame::new(12, 10, data).unwrap();
        for region in [bb([-3.3, 2.7, 9.1, 11.4]), bb([5.5, -1.25, 10.0, 4.0])] {
            let p = crop_patch(&frame, &region, (7, 5)).unwrap();
            let oracle = tent_sample(&frame, &region, (7, 5));
            for (a, b) in p.data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    fn box_strategy() -> impl Strategy<Value = BoundingBox> {
        (-100.0..100.0f64, -100.0..100.0f64, 1.0..80.0f64, 1.0..80.0f64)
            .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn round_trip_in_range(prev in box_strategy(), a in prop::array::uniform4(-1.0..1.0f64)) {
            // Targets reachable by an in-range action with sides above the floor.
            let mut a = Action::from_array(a);
            a.dw = a.dw.max(-0.9);
            a.dh = a.dh.max(-0.9);
            let target = apply_action(&a, &prev);
            prop_assume!(target.w > MIN_SIDE && target.h > MIN_SIDE);
            let back = apply_action(&infer_action(&target, &prev), &prev);
            for (u, v) in back.to_array().iter().zip(target.to_array()) {
                prop_assert!((u - v).abs() <= 1e-9);
            }
        }

        #[test]
        fn inferred_actions_are_clamped(a in box_strategy(), b in box_strategy()) {
            prop_assert!(infer_action(&a, &b).in_range());
        }

        #[test]
        fn iou_symmetric_and_bounded(a in box_strategy(), b in box_strategy()) {
            let u = iou(&a, &b).unwrap();
            let v = iou(&b, &a).unwrap();
            prop_assert_eq!(u, v);
            prop_assert!((0.0..=1.0).contains(&u));
        }

        #[test]
        fn iou_matches_raster(
            ax in 0i64..90, ay in 0i64..90, aw in 1i64..40, ah in 1i64..40,
            bx in 0i64..90, by in 0i64..90, bw in 1i64..40, bh in 1i64..40,
        ) {
            let ra = [ax, ay, aw.min(100 - ax), ah.min(100 - ay)];
            let rb = [bx, by, bw.min(100 - bx), bh.min(100 - by)];
            let to_box = |r: [i64; 4]| BoundingBox::new(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64);
            let v = iou(&to_box(ra), &to_box(rb)).unwrap();
            prop_assert!((v - raster_iou(ra, rb)).abs() < 1e-3);
        }

        #[test]
        fn context_preserves_center(b in box_strategy(), c in 0.1..4.0f64) {
            let r = context_region(&b, c);
            let (cx, cy) = b.center();
            let (rx, ry) = r.center();
            prop_assert!((cx - rx).abs() < 1e-9 && (cy - ry).abs() < 1e-9);
            prop_assert!((r.area() - c * c * b.area()).abs() <= 1e-9 * r.area().max(1.0));
        }
    }
}
