//! Training-target assembly: foreground channel from the ground-truth blob,
//! context channels from a label source, blended toward the far-background
//! one-hot outside the soft distance band.
//!
//! Two equivalent builders exist on purpose. The field one produces plain
//! tensors and is shared by every segmenter update and every baseline, so a
//! frozen generator and a static source follow the same bytes. The graph one
//! keeps the generator's softmax inside the tape, which the outer-gradient
//! probes need.

use crate::error::{Error, Result};
use crate::geometry::{distance_map, soft_dilated_mask, Mask, SoftMask};
use crate::labeling::{
    aggregate_binary, background_hard_label, context_probability, distance_constrained_label,
    stack_to_batch, LabelField,
};
use crate::ndtensor::{Graph, NodeId, Tensor};

/// Everything target assembly needs to know about one patch.
pub struct PatchView<'a> {
    /// Foreground ground truth inside the patch.
    pub roi: &'a Mask,
    /// Soft distance mask of the source image, cropped to the patch. `None`
    /// when the source image contains no foreground at all; such patches are
    /// labeled far-background everywhere.
    pub soft: Option<&'a SoftMask>,
}

/// b everywhere: the far-background one-hot over 1 + t channels.
fn far_background_field(t: usize, h: usize, w: usize) -> LabelField {
    let b = background_hard_label(2, t);
    LabelField::from_fn(1 + t, h, w, |cls, _, _| b[cls])
}

/// Assemble the per-patch target field from already-normalized context
/// probabilities (`q`, t channels over the patch).
pub fn target_field(patch: &PatchView, q: &LabelField, t: usize) -> Result<LabelField> {
    if t < 2 {
        return Err(Error::invalid(format!("need at least 2 context classes, got {t}")));
    }
    if q.classes() != t {
        return Err(Error::shape("target_field", format!("q has {} channels, want {t}", q.classes())));
    }
    let (h, w) = (patch.roi.height(), patch.roi.width());
    let soft = match patch.soft {
        None => return Ok(far_background_field(t, h, w)),
        Some(s) => s,
    };
    if soft.height() != h || soft.width() != w || q.height() != h || q.width() != w {
        return Err(Error::shape("target_field", "patch pieces disagree on size"));
    }
    let agg = aggregate_binary(patch.roi, q)?;
    distance_constrained_label(&agg, soft, 2)
}

/// Foreground-only two-channel target, for training without any context
/// source.
pub fn plain_binary_field(roi: &Mask) -> LabelField {
    crate::labeling::binary_onehot(roi)
}

/// Stack per-patch target fields into a [N, C, H, W] tensor leaf.
pub fn stack_fields(fields: &[LabelField]) -> Result<Tensor> {
    let refs: Vec<&LabelField> = fields.iter().collect();
    stack_to_batch(&refs)
}

/// Context probabilities from raw generator logits for one patch.
pub fn logits_to_q(logits: &LabelField) -> Result<LabelField> {
    context_probability(logits)
}

/// Per-sample soft-mask batch tensor [N, 1, H, W]; empty-source patches
/// contribute all zeros, which routes every pixel to b in the blend.
pub fn soft_mask_batch(patches: &[PatchView], h: usize, w: usize) -> Result<Tensor> {
    let n = patches.len();
    let mut t = Tensor::zeros(vec![n, 1, h, w]);
    for (i, p) in patches.iter().enumerate() {
        if let Some(s) = p.soft {
            if s.height() != h || s.width() != w {
                return Err(Error::shape("soft_mask_batch", "soft mask size mismatch"));
            }
            let base = i * h * w;
            t.data_mut()[base..base + h * w].copy_from_slice(s.data());
        }
    }
    Ok(t)
}

/// Foreground batch tensor [N, 1, H, W] of 0/1 values.
pub fn roi_batch(patches: &[PatchView], h: usize, w: usize) -> Result<Tensor> {
    let n = patches.len();
    let mut t = Tensor::zeros(vec![n, 1, h, w]);
    for (i, p) in patches.iter().enumerate() {
        if p.roi.height() != h || p.roi.width() != w {
            return Err(Error::shape("roi_batch", "roi size mismatch"));
        }
        let base = i * h * w;
        for (j, &v) in p.roi.data().iter().enumerate() {
            t.data_mut()[base + j] = if v { 1.0 } else { 0.0 };
        }
    }
    Ok(t)
}

/// Graph-level twin of `target_field` over a whole batch. `gen_logits` is
/// [N, t, H, W] and stays differentiable; `roi` and `soft` are [N, 1, H, W]
/// constants (soft already zeroed for empty-source patches). Returns the
/// [N, 1 + t, H, W] target node.
pub fn target_graph(
    g: &mut Graph,
    gen_logits: NodeId,
    roi: NodeId,
    soft: NodeId,
) -> Result<NodeId> {
    let lshape = g.value(gen_logits).shape().to_vec();
    if lshape.len() != 4 || lshape[1] < 2 {
        return Err(Error::shape("target_graph", format!("logits shape {lshape:?}")));
    }
    let (n, t, h, w) = (lshape[0], lshape[1], lshape[2], lshape[3]);
    for (what, node) in [("roi", roi), ("soft", soft)] {
        let s = g.value(node).shape();
        if s != [n, 1, h, w] {
            return Err(Error::shape("target_graph", format!("{what} shape {s:?}, want [{n}, 1, {h}, {w}]")));
        }
    }

    let q = g.softmax_channels(gen_logits)?;
    // context channels carry q only off the foreground
    let bg = g.one_minus(roi);
    let bg_t = g.tile_channels(bg, t)?;
    let ctx = g.mul(q, bg_t)?;
    let tilde = g.concat_channels(&[roi, ctx])?;

    // far-background one-hot b at channel index 1
    let mut b = Tensor::zeros(vec![n, 1 + t, h, w]);
    for i in 0..n {
        let base = (i * (1 + t) + 1) * h * w;
        b.data_mut()[base..base + h * w].fill(1.0);
    }
    let b = g.leaf(b);

    let m = g.tile_channels(soft, 1 + t)?;
    let keep = g.mul(m, tilde)?;
    let inv = g.one_minus(m);
    let fill = g.mul(inv, b)?;
    g.add(keep, fill)
}

/// Patch pieces plus q fields -> stacked target tensor, the field-level
/// batch path.
pub fn target_batch(patches: &[PatchView], qs: &[LabelField], t: usize) -> Result<Tensor> {
    if patches.len() != qs.len() {
        return Err(Error::invalid("one q field per patch"));
    }
    let fields: Vec<LabelField> = patches
        .iter()
        .zip(qs)
        .map(|(p, q)| target_field(p, q, t))
        .collect::<Result<_>>()?;
    stack_fields(&fields)
}

/// Soft distance mask for a whole case; `None` when the foreground is empty.
pub fn case_soft_mask(roi: &Mask, m: f64, tau: f64) -> Result<Option<SoftMask>> {
    let df = match distance_map(roi) {
        None => return Ok(None),
        Some(df) => df,
    };
    Ok(Some(soft_dilated_mask(&df, m, tau)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn disk_mask(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Mask {
        Mask::from_fn(h, w, |y, x| {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            (dy * dy + dx * dx).sqrt() <= r
        })
    }

    fn soft_of(roi: &Mask, m: f64, tau: f64) -> SoftMask {
        case_soft_mask(roi, m, tau).unwrap().unwrap()
    }

    fn uniform_q(t: usize, h: usize, w: usize) -> LabelField {
        LabelField::from_fn(t, h, w, |_, _, _| 1.0 / t as f64)
    }

    #[test]
    fn all_foreground_patch_gets_pure_channel_one() {
        let roi = Mask::from_fn(6, 6, |_, _| true);
        let soft = soft_of(&roi, 3.0, 2.0);
        let f = target_field(&PatchView { roi: &roi, soft: Some(&soft) }, &uniform_q(2, 6, 6), 2).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(f.get(0, y, x), 1.0);
                assert_eq!(f.get(1, y, x), 0.0);
                assert_eq!(f.get(2, y, x), 0.0);
            }
        }
    }

    #[test]
    fn constant_logits_share_band_mass_equally() {
        let roi = disk_mask(16, 16, 8.0, 8.0, 2.0);
        let soft = soft_of(&roi, 3.0, 2.0);
        let logits = LabelField::from_fn(3, 16, 16, |_, _, _| 0.7);
        let q = logits_to_q(&logits).unwrap();
        let f = target_field(&PatchView { roi: &roi, soft: Some(&soft) }, &q, 3).unwrap();
        let df = distance_map(&roi).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                if roi.get(y, x) {
                    continue;
                }
                if df.dist(y, x) < 3.0 {
                    for c in 1..4 {
                        assert!((f.get(c, y, x) - 1.0 / 3.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_source_patch_is_far_background_everywhere() {
        let roi = Mask::new(8, 8);
        let f = target_field(&PatchView { roi: &roi, soft: None }, &uniform_q(2, 8, 8), 2).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(f.get(0, y, x), 0.0);
                assert_eq!(f.get(1, y, x), 1.0);
                assert_eq!(f.get(2, y, x), 0.0);
            }
        }
    }

    #[test]
    fn hand_built_pixel_values() {
        // single foreground pixel at (1,1) in 4x4, m=1, tau=1, t=2,
        // q = (0.75, 0.25) everywhere
        let roi = Mask::from_fn(4, 4, |y, x| y == 1 && x == 1);
        let soft = soft_of(&roi, 1.0, 1.0);
        let q = LabelField::from_fn(2, 4, 4, |c, _, _| if c == 0 { 0.75 } else { 0.25 });
        let f = target_field(&PatchView { roi: &roi, soft: Some(&soft) }, &q, 2).unwrap();

        // on the blob
        assert_eq!(f.get(0, 1, 1), 1.0);
        // distance 1 from the blob: M = 1, context splits 0.75/0.25
        assert!((f.get(1, 1, 2) - 0.75).abs() < 1e-12);
        assert!((f.get(2, 1, 2) - 0.25).abs() < 1e-12);
        // distance 2: M = exp(-1)
        let m = (-1.0f64).exp();
        assert!((f.get(1, 1, 3) - (m * 0.75 + (1.0 - m))).abs() < 1e-12);
        assert!((f.get(2, 1, 3) - m * 0.25).abs() < 1e-12);
        // far corner: distance sqrt(8) ~ 2.83, still exp((1-d)/1) mass
        let d = (8.0f64).sqrt();
        let mfar = ((1.0 - d) / 1.0).exp();
        assert!((f.get(1, 3, 3) - (mfar * 0.75 + (1.0 - mfar))).abs() < 1e-12);
    }

    #[test]
    fn graph_and_field_paths_agree() {
        let s = SeedStream::new(77);
        for round in 0..4 {
            let rs = s.child(&format!("round_{round}"));
            let (h, w, t) = (8, 8, 2 + round % 2);
            let mut roi_masks = Vec::new();
            let mut patches_logits = Vec::new();
            for i in 0..3 {
                let mut cs = rs.child(&format!("case_{i}"));
                let empty = i == 2;
                let roi = if empty {
                    Mask::new(h, w)
                } else {
                    let cy = cs.uniform_in(2.0, 6.0);
                    let cx = cs.uniform_in(2.0, 6.0);
                    disk_mask(h, w, cy, cx, 1.6)
                };
                let logits = LabelField::from_fn(t, h, w, |_, _, _| cs.normal());
                roi_masks.push(roi);
                patches_logits.push(logits);
            }
            let softs: Vec<Option<SoftMask>> =
                roi_masks.iter().map(|r| case_soft_mask(r, 3.0, 2.0).unwrap()).collect();
            let patches: Vec<PatchView> = roi_masks
                .iter()
                .zip(&softs)
                .map(|(r, s)| PatchView { roi: r, soft: s.as_ref() })
                .collect();

            let qs: Vec<LabelField> =
                patches_logits.iter().map(|l| logits_to_q(l).unwrap()).collect();
            let field = target_batch(&patches, &qs, t).unwrap();

            let mut logit_t = Tensor::zeros(vec![3, t, h, w]);
            for (i, l) in patches_logits.iter().enumerate() {
                let base = i * t * h * w;
                logit_t.data_mut()[base..base + t * h * w].copy_from_slice(l.data());
            }
            let mut g = Graph::new();
            let ln = g.leaf(logit_t);
            let rn = {
                let rt = roi_batch(&patches, h, w).unwrap();
                g.leaf(rt)
            };
            let sn = {
                let st = soft_mask_batch(&patches, h, w).unwrap();
                g.leaf(st)
            };
            let out = target_graph(&mut g, ln, rn, sn).unwrap();
            let got = g.value(out);
            assert_eq!(got.shape(), field.shape());
            for (a, b) in got.data().iter().zip(field.data()) {
                assert!((a - b).abs() < 1e-12, "graph {a} vs field {b}");
            }
        }
    }

    #[test]
    fn channel_mass_sums_to_one() {
        let roi = disk_mask(12, 12, 5.0, 6.0, 2.2);
        let soft = soft_of(&roi, 2.0, 3.0);
        let mut s = SeedStream::new(5);
        let logits = LabelField::from_fn(3, 12, 12, |_, _, _| s.normal() * 2.0);
        let q = logits_to_q(&logits).unwrap();
        let f = target_field(&PatchView { roi: &roi, soft: Some(&soft) }, &q, 3).unwrap();
        for y in 0..12 {
            for x in 0..12 {
                let sum: f64 = (0..4).map(|c| f.get(c, y, x)).sum();
                assert!((sum - 1.0).abs() < 1e-9);
                for c in 0..4 {
                    assert!(f.get(c, y, x) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn graph_targets_carry_generator_gradient() {
        // a loss on the targets must move the generator logits
        let roi = disk_mask(8, 8, 4.0, 4.0, 1.5);
        let soft = soft_of(&roi, 3.0, 2.0);
        let patch = PatchView { roi: &roi, soft: Some(&soft) };
        let mut g = Graph::new();
        let logits = g.param("gen.logits", Tensor::zeros(vec![1, 2, 8, 8]), true).unwrap();
        let rn = {
            let t = roi_batch(std::slice::from_ref(&patch), 8, 8).unwrap();
            g.leaf(t)
        };
        let sn = {
            let t = soft_mask_batch(std::slice::from_ref(&patch), 8, 8).unwrap();
            g.leaf(t)
        };
        let tgt = target_graph(&mut g, logits, rn, sn).unwrap();
        let ch1 = g.slice_channels(tgt, 1, 2).unwrap();
        let loss = g.mean(ch1);
        let grads = g.backward(loss).unwrap();
        let lg = grads.get("gen.logits").unwrap();
        let norm: f64 = lg.data().iter().map(|v| v * v).sum::<f64>();
        assert!(norm > 0.0, "generator gradient vanished");
    }

    /// Scalar re-implementation on an 8x8 case, computed with independent
    /// arithmetic (no LabelField helpers).
    #[test]
    fn independent_scalar_recomputation() {
        let roi = Mask::from_fn(8, 8, |y, x| (3..=4).contains(&y) && (3..=4).contains(&x));
        let (m, tau, t) = (2.0, 1.5, 2);
        let soft = soft_of(&roi, m, tau);
        let logits = LabelField::from_fn(t, 8, 8, |c, y, x| (c * 17 + y * 3 + x) as f64 * 0.05);
        let q = logits_to_q(&logits).unwrap();
        let f = target_field(&PatchView { roi: &roi, soft: Some(&soft) }, &q, t).unwrap();

        for y in 0..8 {
            for x in 0..8 {
                // nearest squared distance to the 2x2 block, brute force
                let mut d2 = f64::INFINITY;
                for by in 3..=4 {
                    for bx in 3..=4 {
                        let dy = y as f64 - by as f64;
                        let dx = x as f64 - bx as f64;
                        d2 = d2.min(dy * dy + dx * dx);
                    }
                }
                let d = d2.sqrt();
                let mask = if d < m { 1.0 } else { ((m - d) / tau).exp() };
                let z0 = (y * 3 + x) as f64 * 0.05;
                let z1 = (17 + y * 3 + x) as f64 * 0.05;
                let mx = z0.max(z1);
                let e0 = (z0 - mx).exp();
                let e1 = (z1 - mx).exp();
                let (q0, q1) = (e0 / (e0 + e1), e1 / (e0 + e1));
                let fg = if roi.get(y, x) { 1.0 } else { 0.0 };
                let want = [
                    mask * fg,
                    mask * q0 * (1.0 - fg) + (1.0 - mask),
                    mask * q1 * (1.0 - fg),
                ];
                for c in 0..3 {
                    assert!(
                        (f.get(c, y, x) - want[c]).abs() < 1e-12,
                        "({y},{x}) ch{c}: {} vs {}",
                        f.get(c, y, x),
                        want[c]
                    );
                }
            }
        }
    }
}
