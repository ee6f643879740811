//! Evaluation: overlap metrics with documented edge conventions, the 95th
//! percentile symmetric surface distance, connected-component
//! post-processing, logit export, and per-class intensity histograms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{distance_map, Mask};
use crate::ndtensor::Tensor;
use crate::nets::SegNetwork;
use crate::rng::SeedStream;
use crate::synthdata::Case;

/// Pixel-level confusion counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<Confusion> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::shape(
            "confusion",
            format!(
                "pred {}x{} vs gt {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ),
        ));
    }
    let mut c = Confusion { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for (p, g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// 2tp / (2tp + fp + fn). Empty ground truth: 1 if the prediction is empty
/// too, else 0.
pub fn dsc(c: &Confusion) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        return 1.0;
    }
    if c.tp + c.fn_ == 0 {
        return 0.0;
    }
    2.0 * c.tp as f64 / den as f64
}

/// tp / (tp + fn); 1 when the ground truth is empty (nothing to find).
pub fn sen(c: &Confusion) -> f64 {
    if c.tp + c.fn_ == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    }
}

/// tp / (tp + fp); 1 when the prediction is empty (nothing claimed).
pub fn prc(c: &Confusion) -> f64 {
    if c.tp + c.fp == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    }
}

/// Boundary pixels: mask pixels with some 8-neighbor outside the mask.
/// Pixels on the image edge count as boundary (the outside is background).
pub fn boundary(mask: &Mask) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    Mask::from_fn(h, w, |y, x| {
        if !mask.get(y, x) {
            return false;
        }
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dy == 0 && dx == 0 {
                    continue;
                }
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    return true;
                }
                if !mask.get(ny as usize, nx as usize) {
                    return true;
                }
            }
        }
        false
    })
}

fn percentile_linear(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
}

/// 95th percentile (linear interpolation) of the pooled symmetric
/// surface-to-surface nearest distances between the two masks' boundaries.
/// If either mask is empty there is no surface: returns the image diagonal
/// and sets the degenerate flag.
pub fn hd95(pred: &Mask, gt: &Mask) -> Result<(f64, bool)> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::shape("hd95", "mask sizes differ"));
    }
    let (h, w) = (pred.height(), pred.width());
    if pred.is_empty_mask() || gt.is_empty_mask() {
        let diag = ((h * h + w * w) as f64).sqrt();
        return Ok((diag, true));
    }
    let bp = boundary(pred);
    let bg = boundary(gt);
    let dp = distance_map(&bp).expect("non-empty mask has a boundary");
    let dg = distance_map(&bg).expect("non-empty mask has a boundary");

    let mut dists = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if bp.get(y, x) {
                dists.push(dg.dist(y, x));
            }
            if bg.get(y, x) {
                dists.push(dp.dist(y, x));
            }
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((percentile_linear(&dists, 95.0), false))
}

/// Keeps only the largest 8-connected component; ties go to the component
/// whose first pixel in row-major scan order comes first. Empty input stays
/// empty.
pub fn largest_component(mask: &Mask) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    let mut label = vec![usize::MAX; h * w];
    let mut sizes: Vec<(usize, usize)> = Vec::new(); // (size, first scan index)
    for start in 0..h * w {
        if !mask.data()[start] || label[start] != usize::MAX {
            continue;
        }
        let comp = sizes.len();
        let mut queue = vec![start];
        label[start] = comp;
        let mut size = 0usize;
        while let Some(i) = queue.pop() {
            size += 1;
            let (y, x) = (i / w, i % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.data()[j] && label[j] == usize::MAX {
                        label[j] = comp;
                        queue.push(j);
                    }
                }
            }
        }
        sizes.push((size, start));
    }
    if sizes.is_empty() {
        return mask.clone();
    }
    let best = sizes
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| (a.0, std::cmp::Reverse(a.1)).cmp(&(b.0, std::cmp::Reverse(b.1))))
        .map(|(i, _)| i)
        .unwrap();
    Mask::from_fn(h, w, |y, x| label[y * w + x] == best)
}

/// Full per-case record as one metrics CSV row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub case_id: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub dsc: f64,
    pub sen: f64,
    pub prc: f64,
    pub hd95: f64,
    pub hd95_degenerate: bool,
}

pub fn evaluate_case(case_id: &str, pred: &Mask, gt: &Mask) -> Result<MetricsRecord> {
    let c = confusion(pred, gt)?;
    let (hd, degenerate) = hd95(pred, gt)?;
    Ok(MetricsRecord {
        case_id: case_id.to_string(),
        tp: c.tp,
        fp: c.fp,
        fn_: c.fn_,
        tn: c.tn,
        dsc: dsc(&c),
        sen: sen(&c),
        prc: prc(&c),
        hd95: hd,
        hd95_degenerate: degenerate,
    })
}

/// Decision rule shared by evaluation and logit export: a pixel is ROI iff
/// its first logit strictly exceeds every other channel (ties go to
/// background).
pub fn decide_roi(z1: f64, z_rest_max: f64) -> bool {
    z1 > z_rest_max
}

fn logit_planes(logits: &Tensor) -> Result<(usize, usize, usize)> {
    match logits.shape() {
        [1, k, h, w] if *k >= 2 => Ok((*k, *h, *w)),
        s => Err(Error::shape("prediction", format!("want [1,K>=2,H,W], got {s:?}"))),
    }
}

/// Predicted ROI mask for one full image.
pub fn predict_case(net: &SegNetwork, image: &Tensor) -> Result<Mask> {
    let batched = Tensor::new(
        {
            let mut s = image.shape().to_vec();
            s.insert(0, 1);
            s
        },
        image.data().to_vec(),
    )?;
    let logits = net.forward(&batched)?;
    let (k, h, w) = logit_planes(&logits)?;
    Ok(Mask::from_fn(h, w, |y, x| {
        let z1 = logits.data()[logits.idx4(0, 0, y, x)];
        let rest = (1..k)
            .map(|c| logits.data()[logits.idx4(0, c, y, x)])
            .fold(f64::NEG_INFINITY, f64::max);
        decide_roi(z1, rest)
    }))
}

/// One sampled pixel's logit projection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogitRow {
    pub case: usize,
    pub y: usize,
    pub x: usize,
    /// 1 for ground-truth ROI pixels, 0 for background.
    pub class_label: u8,
    pub z1: f64,
    pub z_rest_max: f64,
}

/// Samples `n_samples` pixels, half from ROI pixels and half from
/// background (pooled uniformly across cases), and records each pixel's
/// (z1, max of the other channels) projection.
pub fn export_logits(
    net: &SegNetwork,
    cases: &[Case],
    n_samples: usize,
    rng: &mut SeedStream,
) -> Result<Vec<LogitRow>> {
    let mut roi_px = Vec::new();
    let mut bg_px = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        for y in 0..case.roi_mask.height() {
            for x in 0..case.roi_mask.width() {
                if case.roi_mask.get(y, x) {
                    roi_px.push((i, y, x));
                } else {
                    bg_px.push((i, y, x));
                }
            }
        }
    }
    if roi_px.is_empty() || bg_px.is_empty() {
        return Err(Error::invalid("need both ROI and background pixels to sample"));
    }
    let logits: Vec<Tensor> = cases
        .iter()
        .map(|c| {
            let mut s = c.image.shape().to_vec();
            s.insert(0, 1);
            let batched = Tensor::new(s, c.image.data().to_vec())?;
            net.forward(&batched)
        })
        .collect::<Result<Vec<_>>>()?;

    let n_roi = n_samples / 2;
    let mut rows = Vec::with_capacity(n_samples);
    for j in 0..n_samples {
        let (pool, label) = if j < n_roi { (&roi_px, 1u8) } else { (&bg_px, 0u8) };
        let (case, y, x) = pool[rng.index(pool.len())];
        let t = &logits[case];
        let (k, _, _) = logit_planes(t)?;
        let z1 = t.data()[t.idx4(0, 0, y, x)];
        let z_rest_max = (1..k)
            .map(|c| t.data()[t.idx4(0, c, y, x)])
            .fold(f64::NEG_INFINITY, f64::max);
        rows.push(LogitRow { case, y, x, class_label: label, z1, z_rest_max });
    }
    Ok(rows)
}

/// Per-class normalized intensity histograms over argmax(labels).
#[derive(Debug, Clone)]
pub struct IntensityHistogram {
    pub lo: f64,
    pub hi: f64,
    /// counts[class][bin], each class normalized to sum 1 (empty class: 0s).
    pub counts: Vec<Vec<f64>>,
}

pub fn intensity_histogram(
    image: &Tensor,
    labels: &crate::labeling::LabelField,
    bins: usize,
) -> Result<IntensityHistogram> {
    if bins == 0 {
        return Err(Error::invalid("bins must be >= 1"));
    }
    let [_, h, w] = image.shape() else {
        return Err(Error::shape("intensity_histogram", "image must be [1,H,W]"));
    };
    if labels.height() != *h || labels.width() != *w {
        return Err(Error::shape("intensity_histogram", "label field size differs"));
    }
    let lo = image.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = image.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let classes = labels.classes();
    let mut raw = vec![vec![0usize; bins]; classes];
    for y in 0..*h {
        for x in 0..*w {
            let v = image.data()[y * w + x];
            let b = if hi > lo {
                (((v - lo) / (hi - lo)) * bins as f64).min(bins as f64 - 1.0) as usize
            } else {
                0
            };
            raw[labels.argmax_class(y, x)][b] += 1;
        }
    }
    let counts = raw
        .into_iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            if total == 0 {
                vec![0.0; bins]
            } else {
                row.into_iter().map(|c| c as f64 / total as f64).collect()
            }
        })
        .collect();
    Ok(IntensityHistogram { lo, hi, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::LabelField;

    fn mask_of(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        Mask::from_fn(h, w, |y, x| rows[y].as_bytes()[x] == b'#')
    }

    fn random_mask(s: &mut SeedStream, h: usize, w: usize, p: f64) -> Mask {
        Mask::from_fn(h, w, |_, _| s.uniform() < p)
    }

    #[test]
    fn confusion_hand_cases() {
        let a = mask_of(&["##.", "...", "..."]);
        let same = confusion(&a, &a).unwrap();
        assert_eq!((same.fp, same.fn_), (0, 0));

        let b = Mask::from_fn(3, 3, |y, x| !a.get(y, x));
        let opp = confusion(&b, &a).unwrap();
        assert_eq!((opp.tp, opp.tn), (0, 0));

        let pred = mask_of(&["##.", "...", "..."]);
        let gt = mask_of(&[".#.", "#..", "..."]);
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (1, 1, 1));
        assert_eq!(dsc(&c), 0.5);
    }

    #[test]
    fn empty_mask_conventions() {
        let empty = Mask::new(3, 3);
        let some = mask_of(&["#..", "...", "..."]);
        assert_eq!(dsc(&confusion(&empty, &empty).unwrap()), 1.0);
        assert_eq!(dsc(&confusion(&some, &empty).unwrap()), 0.0);
        assert_eq!(sen(&confusion(&some, &empty).unwrap()), 1.0);
        assert_eq!(prc(&confusion(&empty, &some).unwrap()), 1.0);
    }

    #[test]
    fn dsc_is_harmonic_combination() {
        let mut s = SeedStream::new(31);
        for trial in 0..100 {
            let p = match trial % 10 {
                0 => 0.0,
                1 => 1.0,
                _ => s.uniform(),
            };
            let pred = random_mask(&mut s, 12, 12, p);
            let q = s.uniform();
            let gt = random_mask(&mut s, 12, 12, q);
            let c = confusion(&pred, &gt).unwrap();
            let (d, se, pr) = (dsc(&c), sen(&c), prc(&c));
            let harmonic = if se + pr == 0.0 { 0.0 } else { 2.0 * se * pr / (se + pr) };
            assert!((d - harmonic).abs() <= 1e-12, "trial {trial}: {d} vs {harmonic}");
        }
    }

    #[test]
    fn hd95_identity_and_hand_distance() {
        let blob = mask_of(&["....", ".##.", ".##.", "...."]);
        let (d, flag) = hd95(&blob, &blob).unwrap();
        assert_eq!(d, 0.0);
        assert!(!flag);

        let mut a = Mask::new(8, 8);
        a.set(1, 1, true);
        let mut b = Mask::new(8, 8);
        b.set(4, 5, true); // 3-4-5 triangle
        let (d, _) = hd95(&a, &b).unwrap();
        assert_eq!(d, 5.0);
    }

    #[test]
    fn hd95_empty_sentinel_and_symmetry() {
        let empty = Mask::new(6, 8);
        let some = Mask::from_fn(6, 8, |y, x| y == 2 && x == 3);
        let (d, flag) = hd95(&empty, &some).unwrap();
        assert!(flag);
        assert_eq!(d, (36.0f64 + 64.0).sqrt());

        let mut s = SeedStream::new(8);
        for _ in 0..10 {
            let a = random_mask(&mut s, 10, 10, 0.3);
            let b = random_mask(&mut s, 10, 10, 0.3);
            if a.is_empty_mask() || b.is_empty_mask() {
                continue;
            }
            assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
        }
    }

    /// Brute-force O(n^2) oracle: nearest pairwise distances between the two
    /// boundary pixel sets, pooled both ways, 95th percentile interpolated.
    fn hd95_oracle(pred: &Mask, gt: &Mask) -> f64 {
        let surf = |m: &Mask| {
            let b = boundary(m);
            let mut px = Vec::new();
            for y in 0..m.height() {
                for x in 0..m.width() {
                    if b.get(y, x) {
                        px.push((y as f64, x as f64));
                    }
                }
            }
            px
        };
        let (sp, sg) = (surf(pred), surf(gt));
        let mut dists = Vec::new();
        for &(y, x) in &sp {
            let d2 = sg
                .iter()
                .map(|&(gy, gx)| (y - gy).powi(2) + (x - gx).powi(2))
                .fold(f64::INFINITY, f64::min);
            dists.push(d2.sqrt());
        }
        for &(y, x) in &sg {
            let d2 = sp
                .iter()
                .map(|&(py, px_)| (y - py).powi(2) + (x - px_).powi(2))
                .fold(f64::INFINITY, f64::min);
            dists.push(d2.sqrt());
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        percentile_linear(&dists, 95.0)
    }

    #[test]
    fn hd95_matches_quadratic_oracle_exactly() {
        let mut s = SeedStream::new(44);
        let mut compared = 0;
        while compared < 30 {
            let a = random_mask(&mut s, 16, 16, 0.25);
            let b = random_mask(&mut s, 16, 16, 0.25);
            if a.is_empty_mask() || b.is_empty_mask() {
                continue;
            }
            let (fast, _) = hd95(&a, &b).unwrap();
            assert_eq!(fast, hd95_oracle(&a, &b));
            compared += 1;
        }
    }

    #[test]
    fn largest_component_cases() {
        let single = mask_of(&["....", ".##.", ".##.", "...."]);
        assert_eq!(largest_component(&single).data(), single.data());

        let two = mask_of(&["##...", "##...", ".....", "...##", "...#."]);
        let kept = largest_component(&two);
        assert_eq!(kept.count(), 4);
        assert!(kept.get(0, 0) && !kept.get(3, 3));

        let empty = Mask::new(4, 4);
        assert!(largest_component(&empty).is_empty_mask());

        // equal sizes: the component seen first in scan order wins
        let tie = mask_of(&[".#..#", ".#..#", "....."]);
        let kept = largest_component(&tie);
        assert!(kept.get(0, 1) && !kept.get(0, 4));
    }

    #[test]
    fn postprocess_never_increases_fp_or_tp() {
        let mut s = SeedStream::new(71);
        for _ in 0..100 {
            let density = s.uniform() * 0.5;
            let pred = random_mask(&mut s, 14, 14, density);
            let gt = random_mask(&mut s, 14, 14, 0.2);
            let before = confusion(&pred, &gt).unwrap();
            let after = confusion(&largest_component(&pred), &gt).unwrap();
            assert!(after.fp <= before.fp);
            assert!(after.tp <= before.tp);
        }
    }

    #[test]
    fn percentile_interpolates_linearly() {
        let v = [0.0, 1.0, 2.0, 3.0];
        assert!((percentile_linear(&v, 95.0) - 2.85).abs() < 1e-12);
        assert_eq!(percentile_linear(&v, 0.0), 0.0);
        assert_eq!(percentile_linear(&v, 100.0), 3.0);
        assert_eq!(percentile_linear(&[7.0], 95.0), 7.0);
    }

    #[test]
    fn logit_rows_reproduce_predictions() {
        use crate::nets::{build_net, NetConfig};
        use crate::synthdata::{generate_task, TaskSpec};

        let spec = TaskSpec { n_train: 3, n_test: 0, seed: 12, ..TaskSpec::default() };
        let (cases, _) = generate_task(&spec).unwrap();
        let cfg = NetConfig { in_channels: 1, base_width: 4, depth: 2, out_channels: 3, seed: 2 };
        let net = build_net(&cfg, "net").unwrap();

        let mut rng = SeedStream::new(99);
        let rows = export_logits(&net, &cases, 200, &mut rng).unwrap();
        assert_eq!(rows.len(), 200);
        assert_eq!(rows.iter().filter(|r| r.class_label == 1).count(), 100);

        let preds: Vec<Mask> = cases
            .iter()
            .map(|c| predict_case(&net, &c.image).unwrap())
            .collect();
        for r in &rows {
            assert_eq!(
                decide_roi(r.z1, r.z_rest_max),
                preds[r.case].get(r.y, r.x),
                "row at case {} ({},{})",
                r.case,
                r.y,
                r.x
            );
        }
    }

    #[test]
    fn histogram_basics() {
        let img = Tensor::new(vec![1, 2, 2], vec![0.5; 4]).unwrap();
        let labels = LabelField::from_fn(2, 2, 2, |c, _, _| if c == 0 { 1.0 } else { 0.0 });
        let h = intensity_histogram(&img, &labels, 8).unwrap();
        assert_eq!(h.counts[0][0], 1.0);
        assert!(h.counts[0][1..].iter().all(|&v| v == 0.0));
        assert!(h.counts[1].iter().all(|&v| v == 0.0));

        let img2 = Tensor::new(vec![1, 1, 4], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let labels2 = LabelField::from_fn(2, 1, 4, |c, _, x| {
            if (x < 2) == (c == 0) {
                1.0
            } else {
                0.0
            }
        });
        let h2 = intensity_histogram(&img2, &labels2, 2).unwrap();
        assert_eq!(h2.counts[0], vec![0.5, 0.5]);
        assert_eq!(h2.counts[1], vec![0.5, 0.5]);
        for row in &h2.counts {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
