//! Label algebra: turning context probabilities into training targets.
//!
//! A [`LabelField`] is a per-pixel probability vector over classes, stored
//! channel-major. The pipeline is: softmax the generator output into context
//! probabilities, splice them into the ground-truth one-hot labels on
//! background pixels, then blend with the hard far-field background label
//! under a soft dilated mask. Every step preserves the per-pixel simplex.

use crate::error::{Error, Result};
use crate::geometry::{Mask, SoftMask};
use crate::ndtensor::Tensor;

/// Per-pixel class probabilities (or logits), channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelField {
    classes: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl LabelField {
    pub fn new(classes: usize, h: usize, w: usize) -> Self {
        LabelField {
            classes,
            h,
            w,
            data: vec![0.0; classes * h * w],
        }
    }

    pub fn from_fn(classes: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut lf = LabelField::new(classes, h, w);
        for c in 0..classes {
            for y in 0..h {
                for x in 0..w {
                    lf.set(c, y, x, f(c, y, x));
                }
            }
        }
        lf
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, cls: usize, y: usize, x: usize) -> f64 {
        self.data[(cls * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, cls: usize, y: usize, x: usize, v: f64) {
        self.data[(cls * self.h + y) * self.w + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn argmax_class(&self, y: usize, x: usize) -> usize {
        let mut best = 0;
        let mut bv = self.get(0, y, x);
        for c in 1..self.classes {
            let v = self.get(c, y, x);
            if v > bv {
                bv = v;
                best = c;
            }
        }
        best
    }

    pub fn crop(&self, y0: usize, x0: usize, size: usize) -> LabelField {
        LabelField::from_fn(self.classes, size, size, |c, y, x| self.get(c, y0 + y, x0 + x))
    }

    /// As a [1, C, H, W] tensor; the layouts coincide, so this is a copy.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.classes, self.h, self.w], self.data.clone()).unwrap()
    }

    pub fn from_tensor_slice(classes: usize, h: usize, w: usize, data: &[f64]) -> Result<LabelField> {
        if data.len() != classes * h * w {
            return Err(Error::shape(
                "LabelField::from_tensor_slice",
                format!("{} values for {classes}x{h}x{w}", data.len()),
            ));
        }
        Ok(LabelField {
            classes,
            h,
            w,
            data: data.to_vec(),
        })
    }
}

/// Stacks equally shaped fields into one [N, C, H, W] batch tensor.
pub fn stack_to_batch(fields: &[&LabelField]) -> Result<Tensor> {
    let Some(first) = fields.first() else {
        return Err(Error::invalid("cannot stack an empty field list"));
    };
    let (c, h, w) = (first.classes, first.h, first.w);
    let mut data = Vec::with_capacity(fields.len() * c * h * w);
    for f in fields {
        if f.classes != c || f.h != h || f.w != w {
            return Err(Error::shape(
                "stack_to_batch",
                format!(
                    "field {}x{}x{} differs from first {c}x{h}x{w}",
                    f.classes, f.h, f.w
                ),
            ));
        }
        data.extend_from_slice(&f.data);
    }
    Tensor::new(vec![fields.len(), c, h, w], data)
}

/// One-hot field (ROI, background) from a binary mask.
pub fn binary_onehot(roi: &Mask) -> LabelField {
    LabelField::from_fn(2, roi.height(), roi.width(), |c, y, x| {
        let fg = roi.get(y, x);
        if (c == 0) == fg {
            1.0
        } else {
            0.0
        }
    })
}

/// Softmax over classes with per-pixel max subtraction. Input is a field of
/// logits with t >= 2 channels.
pub fn context_probability(logits: &LabelField) -> Result<LabelField> {
    let t = logits.classes();
    if t < 2 {
        return Err(Error::invalid(format!(
            "context probability needs at least 2 classes, got {t}"
        )));
    }
    let mut out = LabelField::new(t, logits.h, logits.w);
    for y in 0..logits.h {
        for x in 0..logits.w {
            let mut mx = f64::NEG_INFINITY;
            for c in 0..t {
                mx = mx.max(logits.get(c, y, x));
            }
            let mut denom = 0.0;
            for c in 0..t {
                let e = (logits.get(c, y, x) - mx).exp();
                out.set(c, y, x, e);
                denom += e;
            }
            for c in 0..t {
                out.set(c, y, x, out.get(c, y, x) / denom);
            }
        }
    }
    Ok(out)
}

/// Splices t-class context probabilities into a binary task: channel 0 is
/// the ROI indicator, channels 1..=t carry q on background pixels and zero
/// on ROI pixels.
pub fn aggregate_binary(roi: &Mask, q: &LabelField) -> Result<LabelField> {
    if q.height() != roi.height() || q.width() != roi.width() {
        return Err(Error::shape(
            "aggregate_binary",
            format!(
                "mask {}x{} vs q {}x{}",
                roi.height(),
                roi.width(),
                q.height(),
                q.width()
            ),
        ));
    }
    let t = q.classes();
    let mut out = LabelField::new(t + 1, roi.height(), roi.width());
    for y in 0..roi.height() {
        for x in 0..roi.width() {
            if roi.get(y, x) {
                out.set(0, y, x, 1.0);
            } else {
                for j in 0..t {
                    out.set(j + 1, y, x, q.get(j, y, x));
                }
            }
        }
    }
    Ok(out)
}

/// Multi-class form: the first c-1 foreground channels of the one-hot `y`
/// pass through, the background channel's mass is split across the t
/// context channels by q. Output has (c-1)+t channels.
pub fn aggregate_multiclass(y: &LabelField, q: &LabelField) -> Result<LabelField> {
    let c = y.classes();
    if c < 2 {
        return Err(Error::invalid(format!("aggregate wants c >= 2 classes, got {c}")));
    }
    if y.height() != q.height() || y.width() != q.width() {
        return Err(Error::shape(
            "aggregate_multiclass",
            format!("y {}x{} vs q {}x{}", y.height(), y.width(), q.height(), q.width()),
        ));
    }
    for yy in 0..y.height() {
        for xx in 0..y.width() {
            let mut ones = 0;
            for cls in 0..c {
                let v = y.get(cls, yy, xx);
                if v == 1.0 {
                    ones += 1;
                } else if v != 0.0 {
                    return Err(Error::invalid(format!(
                        "aggregate_multiclass wants hard one-hot labels, found {v} at ({yy},{xx})"
                    )));
                }
            }
            if ones != 1 {
                return Err(Error::invalid(format!(
                    "aggregate_multiclass wants one-hot labels, found {ones} ones at ({yy},{xx})"
                )));
            }
        }
    }
    let t = q.classes();
    let mut out = LabelField::new(c - 1 + t, y.height(), y.width());
    for yy in 0..y.height() {
        for xx in 0..y.width() {
            for cls in 0..c - 1 {
                out.set(cls, yy, xx, y.get(cls, yy, xx));
            }
            let bg = y.get(c - 1, yy, xx);
            for j in 0..t {
                out.set(c - 1 + j, yy, xx, bg * q.get(j, yy, xx));
            }
        }
    }
    Ok(out)
}

/// Hard far-field background label: one-hot on the first context channel.
/// Length (c-1)+t, the 1 sits at index c-1.
pub fn background_hard_label(c: usize, t: usize) -> Vec<f64> {
    let mut b = vec![0.0; c - 1 + t];
    b[c - 1] = 1.0;
    b
}

/// Blend of an aggregated label with the hard background label under a soft
/// mask: out = M * label + (1 - M) * b, per pixel.
pub fn distance_constrained_label(
    label: &LabelField,
    mask: &SoftMask,
    c: usize,
) -> Result<LabelField> {
    if label.height() != mask.height() || label.width() != mask.width() {
        return Err(Error::shape(
            "distance_constrained_label",
            format!(
                "label {}x{} vs mask {}x{}",
                label.height(),
                label.width(),
                mask.height(),
                mask.width()
            ),
        ));
    }
    let k = label.classes();
    let t = k + 1 - c;
    if c < 2 || k < c {
        return Err(Error::invalid(format!(
            "distance_constrained_label: {k} channels cannot hold c={c} task classes"
        )));
    }
    let b = background_hard_label(c, t);
    let mut out = LabelField::new(k, label.height(), label.width());
    for y in 0..label.height() {
        for x in 0..label.width() {
            let m = mask.get(y, x);
            for cls in 0..k {
                out.set(cls, y, x, m * label.get(cls, y, x) + (1.0 - m) * b[cls]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{distance_map, soft_dilated_mask};
    use crate::rng::SeedStream;

    fn random_simplex_field(s: &mut SeedStream, t: usize, h: usize, w: usize) -> LabelField {
        let logits = LabelField::from_fn(t, h, w, |_, _, _| s.uniform_in(-5.0, 5.0));
        context_probability(&logits).unwrap()
    }

    #[test]
    fn softmax_is_stable_under_huge_logits() {
        let logits = LabelField::from_fn(3, 1, 2, |c, _, x| {
            if x == 0 {
                1e5 + c as f64
            } else {
                -1e5 - c as f64
            }
        });
        let q = context_probability(&logits).unwrap();
        for y in 0..1 {
            for x in 0..2 {
                let total: f64 = (0..3).map(|c| q.get(c, y, x)).sum();
                assert!((total - 1.0).abs() < 1e-12);
                for c in 0..3 {
                    assert!(q.get(c, y, x).is_finite());
                }
            }
        }
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let logits = LabelField::from_fn(4, 2, 2, |_, _, _| 1.7);
        let q = context_probability(&logits).unwrap();
        for c in 0..4 {
            assert!((q.get(c, 0, 0) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn single_class_context_is_rejected() {
        let logits = LabelField::new(1, 2, 2);
        assert!(context_probability(&logits).is_err());
    }

    #[test]
    fn aggregate_binary_hand_case() {
        // 2x2: ROI at (0,0). q uses dyadic values so equality is exact.
        let mut roi = Mask::new(2, 2);
        roi.set(0, 0, true);
        let qvals = [[0.25, 0.625], [0.875, 0.5]];
        let q = LabelField::from_fn(2, 2, 2, |c, y, x| {
            if c == 0 {
                qvals[y][x]
            } else {
                1.0 - qvals[y][x]
            }
        });
        let out = aggregate_binary(&roi, &q).unwrap();
        assert_eq!(out.classes(), 3);
        assert_eq!(
            [out.get(0, 0, 0), out.get(1, 0, 0), out.get(2, 0, 0)],
            [1.0, 0.0, 0.0]
        );
        assert_eq!(
            [out.get(0, 0, 1), out.get(1, 0, 1), out.get(2, 0, 1)],
            [0.0, 0.625, 0.375]
        );
        assert_eq!(
            [out.get(0, 1, 0), out.get(1, 1, 0), out.get(2, 1, 0)],
            [0.0, 0.875, 0.125]
        );
    }

    #[test]
    fn aggregate_binary_preserves_background_mass() {
        let mut s = SeedStream::new(40);
        let roi = Mask::from_fn(6, 6, |y, x| (y + x) % 3 == 0);
        let q = random_simplex_field(&mut s, 3, 6, 6);
        let out = aggregate_binary(&roi, &q).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let ctx_mass: f64 = (1..4).map(|c| out.get(c, y, x)).sum();
                let want = if roi.get(y, x) { 0.0 } else { 1.0 };
                assert!((ctx_mass - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_multiclass_with_two_classes_matches_binary() {
        let mut s = SeedStream::new(41);
        let roi = Mask::from_fn(5, 7, |y, x| y == 2 && x > 3);
        let y_onehot = binary_onehot(&roi);
        let q = random_simplex_field(&mut s, 2, 5, 7);
        let a = aggregate_binary(&roi, &q).unwrap();
        let b = aggregate_multiclass(&y_onehot, &q).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aggregate_multiclass_three_classes() {
        // One pixel per class. c=3, t=2 -> 4 output channels.
        let y = LabelField::from_fn(3, 1, 3, |c, _, x| if c == x { 1.0 } else { 0.0 });
        let q = LabelField::from_fn(2, 1, 3, |c, _, _| if c == 0 { 0.7 } else { 0.3 });
        let out = aggregate_multiclass(&y, &q).unwrap();
        assert_eq!(out.classes(), 4);
        // Pixel 0: class 0 foreground.
        assert_eq!(
            (0..4).map(|c| out.get(c, 0, 0)).collect::<Vec<_>>(),
            vec![1.0, 0.0, 0.0, 0.0]
        );
        // Pixel 2: background, mass split by q.
        assert_eq!(
            (0..4).map(|c| out.get(c, 0, 2)).collect::<Vec<_>>(),
            vec![0.0, 0.0, 0.7, 0.3]
        );
    }

    #[test]
    fn aggregate_multiclass_rejects_soft_labels() {
        let y = LabelField::from_fn(2, 1, 1, |c, _, _| if c == 0 { 0.6 } else { 0.4 });
        let q = LabelField::from_fn(2, 1, 1, |_, _, _| 0.5);
        assert!(aggregate_multiclass(&y, &q).is_err());
    }

    #[test]
    fn background_label_is_one_hot_on_first_context_channel() {
        assert_eq!(background_hard_label(2, 2), vec![0.0, 1.0, 0.0]);
        assert_eq!(background_hard_label(2, 4), vec![0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(background_hard_label(3, 2), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn blend_hand_case() {
        // M=0.6, label=(0.5,0.3,0.2), b=(0,1,0) -> (0.3, 0.58, 0.12).
        let label = LabelField::from_fn(3, 1, 1, |c, _, _| [0.5, 0.3, 0.2][c]);
        let sm = crate::geometry::SoftMask::from_values(1, 1, vec![0.6]).unwrap();
        let out = distance_constrained_label(&label, &sm, 2).unwrap();
        assert!((out.get(0, 0, 0) - 0.3).abs() < 1e-15);
        assert!((out.get(1, 0, 0) - 0.58).abs() < 1e-15);
        assert!((out.get(2, 0, 0) - 0.12).abs() < 1e-15);
        // M=0 collapses to the hard background label.
        let zero = crate::geometry::SoftMask::zeros(1, 1);
        let far = distance_constrained_label(&label, &zero, 2).unwrap();
        assert_eq!(
            (0..3).map(|c| far.get(c, 0, 0)).collect::<Vec<_>>(),
            vec![0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn blend_interpolates_between_label_and_background() {
        let mut roi = Mask::new(1, 64);
        roi.set(0, 0, true);
        let df = distance_map(&roi).unwrap();
        let sm = soft_dilated_mask(&df, 10.0, 7.0).unwrap();
        let label = LabelField::from_fn(3, 1, 64, |c, _, _| [0.5, 0.3, 0.2][c]);
        let out = distance_constrained_label(&label, &sm, 2).unwrap();
        for x in 0..64 {
            let m = sm.get(0, x);
            let want = [0.5 * m, 0.3 * m + (1.0 - m), 0.2 * m];
            for c in 0..3 {
                assert!((out.get(c, 0, x) - want[c]).abs() < 1e-15);
            }
        }
        // Near field (d < m): label passes through unchanged.
        assert_eq!(out.get(0, 0, 5), 0.5);
        // Far field: collapses toward b.
        assert!(out.get(1, 0, 63) > 0.99);
    }

    #[test]
    fn pipeline_preserves_simplex_on_random_fields() {
        let mut s = SeedStream::new(42);
        for trial in 0..50 {
            let t = 2 + s.index(3);
            let roi = Mask::from_fn(8, 8, |_, _| s.uniform() < 0.2);
            let logits = LabelField::from_fn(t, 8, 8, |_, _, _| s.uniform_in(-6.0, 6.0));
            let q = context_probability(&logits).unwrap();
            let agg = aggregate_binary(&roi, &q).unwrap();
            let sm = match distance_map(&roi) {
                Some(df) => soft_dilated_mask(&df, 3.0, 2.0).unwrap(),
                None => crate::geometry::SoftMask::zeros(8, 8),
            };
            let out = distance_constrained_label(&agg, &sm, 2).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    let total: f64 = (0..out.classes()).map(|c| out.get(c, y, x)).sum();
                    assert!((total - 1.0).abs() < 1e-12, "trial {trial} at ({y},{x}): {total}");
                    for c in 0..out.classes() {
                        let v = out.get(c, y, x);
                        assert!((-1e-12..=1.0 + 1e-12).contains(&v));
                    }
                }
            }
        }
    }

    #[test]
    fn roi_pixels_keep_their_label_because_distance_is_zero() {
        // The chain: d = 0 on ROI, so M = 1 there, so the blend leaves ROI
        // pixels exactly at their aggregated value.
        let roi = Mask::from_fn(9, 9, |y, x| (3..6).contains(&y) && (3..6).contains(&x));
        let df = distance_map(&roi).unwrap();
        let sm = soft_dilated_mask(&df, 2.0, 1.5).unwrap();
        let mut s = SeedStream::new(4);
        let q = random_simplex_field(&mut s, 2, 9, 9);
        let agg = aggregate_binary(&roi, &q).unwrap();
        let out = distance_constrained_label(&agg, &sm, 2).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                if roi.get(y, x) {
                    assert_eq!(df.d2(y, x), 0.0);
                    assert_eq!(sm.get(y, x), 1.0);
                    for c in 0..3 {
                        assert_eq!(out.get(c, y, x), agg.get(c, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn tensor_roundtrip_keeps_layout() {
        let mut s = SeedStream::new(77);
        let lf = random_simplex_field(&mut s, 3, 4, 5);
        let t = lf.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 4, 5]);
        let back = LabelField::from_tensor_slice(3, 4, 5, t.data()).unwrap();
        assert_eq!(back, lf);
        assert_eq!(t.data()[t.idx4(0, 2, 1, 3)], lf.get(2, 1, 3));
    }
}
