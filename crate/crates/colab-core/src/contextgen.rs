//! Non-learned context label sources: intensity clustering, distance bands,
//! and anatomy masks. All of them emit [`LabelField`]s with `t` channels that
//! feed the same aggregation path as the learned generator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{distance_map, soft_dilated_mask, Mask};
use crate::labeling::LabelField;
use crate::ndtensor::Tensor;
use crate::rng::SeedStream;

/// Which label source a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextArm {
    None,
    Kmeans,
    Dilated,
    Oracle,
    Colab,
}

impl ContextArm {
    pub fn as_str(self) -> &'static str {
        match self {
            ContextArm::None => "none",
            ContextArm::Kmeans => "kmeans",
            ContextArm::Dilated => "dilated",
            ContextArm::Oracle => "oracle",
            ContextArm::Colab => "colab",
        }
    }
}

impl std::str::FromStr for ContextArm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ContextArm::None),
            "kmeans" => Ok(ContextArm::Kmeans),
            "dilated" => Ok(ContextArm::Dilated),
            "oracle" => Ok(ContextArm::Oracle),
            "colab" => Ok(ContextArm::Colab),
            other => Err(Error::invalid(format!(
                "unknown arm {other:?}; expected none|kmeans|dilated|oracle|colab"
            ))),
        }
    }
}

impl std::fmt::Display for ContextArm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Summary of a clustering run: final centroids (ascending), total
/// within-cluster SSE, the number of clusters actually used, the SSE after
/// each Lloyd iteration of the winning restart, and any downgrade warning.
#[derive(Debug, Clone)]
pub struct KmeansInfo {
    pub centroids: Vec<f64>,
    pub sse: f64,
    pub effective_t: usize,
    pub sse_trace: Vec<f64>,
    pub warning: Option<String>,
}

const KMEANS_RESTARTS: usize = 50;
const LLOYD_MAX_ITERS: usize = 200;

/// Clusters pixel intensities pooled over every image (restricted to
/// `region_masks`) into `t` groups and labels each pixel of each image with a
/// hard one-hot assignment to its nearest centroid. Pixels outside the region
/// mask join the cluster of the lowest-intensity centroid. Channels are
/// ordered by ascending centroid.
///
/// Runs Lloyd's algorithm on the sorted pooled values with 50 seeded
/// restarts and keeps the lowest-SSE solution. If the pooled values have
/// fewer than `t` distinct intensities, `t` is reduced to that count and a
/// warning is recorded in the returned info.
pub fn kmeans_context(
    images: &[Tensor],
    region_masks: &[Mask],
    t: usize,
    seed: u64,
) -> Result<(Vec<LabelField>, KmeansInfo)> {
    if t < 2 {
        return Err(Error::invalid(format!("kmeans needs t >= 2, got {t}")));
    }
    if images.len() != region_masks.len() {
        return Err(Error::invalid(format!(
            "{} images but {} region masks",
            images.len(),
            region_masks.len()
        )));
    }

    let mut pooled = Vec::new();
    for (img, region) in images.iter().zip(region_masks) {
        let (h, w) = image_dims(img)?;
        if region.height() != h || region.width() != w {
            return Err(Error::invalid(format!(
                "region mask {}x{} does not match image {}x{}",
                region.height(), region.width(), h, w
            )));
        }
        for y in 0..h {
            for x in 0..w {
                if region.get(y, x) {
                    pooled.push(img.data()[y * w + x]);
                }
            }
        }
    }
    if pooled.is_empty() {
        return Err(Error::invalid("all region masks are empty; nothing to cluster"));
    }
    pooled.sort_by(|a, b| a.partial_cmp(b).expect("intensities must be finite"));

    let mut distinct = 1usize;
    for i in 1..pooled.len() {
        if pooled[i] != pooled[i - 1] {
            distinct += 1;
        }
    }
    let (effective_t, warning) = if distinct < t {
        (
            distinct,
            Some(format!(
                "only {distinct} distinct intensities; reducing t from {t} to {distinct}"
            )),
        )
    } else {
        (t, None)
    };

    let sums = PrefixSums::new(&pooled);
    let stream = SeedStream::new(seed).child("kmeans");
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut r = stream.child(&format!("restart_{restart}"));
        let init = kmeans_plus_plus(&pooled, effective_t, &mut r);
        let (centroids, sse, trace) = lloyd_sorted(&pooled, &sums, init);
        if best.as_ref().map_or(true, |(b, _, _)| sse < *b) {
            best = Some((sse, centroids, trace));
        }
    }
    let (sse, centroids, sse_trace) = best.expect("at least one restart ran");

    let boundaries: Vec<f64> = centroids
        .windows(2)
        .map(|p| 0.5 * (p[0] + p[1]))
        .collect();
    let fields = images
        .iter()
        .zip(region_masks)
        .map(|(img, region)| {
            let (h, w) = image_dims(img)?;
            Ok(LabelField::from_fn(effective_t, h, w, |cls, y, x| {
                let assigned = if region.get(y, x) {
                    let v = img.data()[y * w + x];
                    boundaries.partition_point(|b| *b < v)
                } else {
                    0
                };
                if cls == assigned {
                    1.0
                } else {
                    0.0
                }
            }))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok((
        fields,
        KmeansInfo {
            centroids,
            sse,
            effective_t,
            sse_trace,
            warning,
        },
    ))
}

fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    let s = img.shape();
    match s {
        [1, h, w] => Ok((*h, *w)),
        _ => Err(Error::invalid(format!(
            "expected image shape [1,H,W], got {s:?}"
        ))),
    }
}

struct PrefixSums {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl PrefixSums {
    fn new(sorted: &[f64]) -> Self {
        let mut sum = Vec::with_capacity(sorted.len() + 1);
        let mut sum_sq = Vec::with_capacity(sorted.len() + 1);
        sum.push(0.0);
        sum_sq.push(0.0);
        for &v in sorted {
            sum.push(sum.last().unwrap() + v);
            sum_sq.push(sum_sq.last().unwrap() + v * v);
        }
        PrefixSums { sum, sum_sq }
    }

    /// Within-cluster SSE of `sorted[i..j]` around its own mean.
    fn cost(&self, i: usize, j: usize) -> f64 {
        if j <= i {
            return 0.0;
        }
        let n = (j - i) as f64;
        let s = self.sum[j] - self.sum[i];
        let sq = self.sum_sq[j] - self.sum_sq[i];
        (sq - s * s / n).max(0.0)
    }

    fn mean(&self, i: usize, j: usize) -> f64 {
        (self.sum[j] - self.sum[i]) / (j - i) as f64
    }
}

/// Seeding by squared-distance weighting; duplicates get zero weight so all
/// picks are distinct values (possible because t <= distinct count).
fn kmeans_plus_plus(sorted: &[f64], t: usize, rng: &mut SeedStream) -> Vec<f64> {
    let n = sorted.len();
    let mut chosen = Vec::with_capacity(t);
    chosen.push(sorted[rng.index(n)]);
    let mut d2: Vec<f64> = sorted
        .iter()
        .map(|v| (v - chosen[0]) * (v - chosen[0]))
        .collect();
    while chosen.len() < t {
        let total: f64 = d2.iter().sum();
        let r = rng.uniform_in(0.0, total);
        let mut acc = 0.0;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            acc += w;
            if r < acc {
                pick = i;
                break;
            }
        }
        let c = sorted[pick];
        chosen.push(c);
        for (i, &v) in sorted.iter().enumerate() {
            let dist = (v - c) * (v - c);
            if dist < d2[i] {
                d2[i] = dist;
            }
        }
    }
    chosen.sort_by(|a, b| a.partial_cmp(b).unwrap());
    chosen
}

/// Lloyd iterations on sorted data. Cluster boundaries are centroid
/// midpoints, so each cluster is a contiguous range found by binary search.
/// Returns (centroids ascending, SSE, per-iteration SSE trace).
fn lloyd_sorted(
    sorted: &[f64],
    sums: &PrefixSums,
    mut centroids: Vec<f64>,
) -> (Vec<f64>, f64, Vec<f64>) {
    let n = sorted.len();
    let t = centroids.len();
    let mut trace = Vec::new();
    let mut sse = f64::INFINITY;
    for _ in 0..LLOYD_MAX_ITERS {
        let mut cuts = Vec::with_capacity(t + 1);
        cuts.push(0);
        for k in 0..t - 1 {
            let b = 0.5 * (centroids[k] + centroids[k + 1]);
            let lo = *cuts.last().unwrap();
            cuts.push(lo + sorted[lo..].partition_point(|v| *v < b));
        }
        cuts.push(n);

        let mut next = centroids.clone();
        let mut cur_sse = 0.0;
        for k in 0..t {
            let (i, j) = (cuts[k], cuts[k + 1]);
            if j > i {
                next[k] = sums.mean(i, j);
                cur_sse += sums.cost(i, j);
            }
        }
        trace.push(cur_sse);
        sse = cur_sse;
        if next == centroids {
            break;
        }
        centroids = next;
    }
    (centroids, sse, trace)
}

/// Two-channel soft context from ROI distance alone: q = (1 - M, M) where M
/// is the soft dilated mask. An empty ROI gives M = 0 everywhere, i.e.
/// q = (1, 0).
pub fn dilated_mask_context(roi_mask: &Mask, m: f64, tau: f64) -> Result<LabelField> {
    let (h, w) = (roi_mask.height(), roi_mask.width());
    match distance_map(roi_mask) {
        Some(df) => {
            let soft = soft_dilated_mask(&df, m, tau)?;
            Ok(LabelField::from_fn(2, h, w, |cls, y, x| {
                let mv = soft.get(y, x);
                if cls == 0 {
                    1.0 - mv
                } else {
                    mv
                }
            }))
        }
        None => {
            if m < 0.0 || tau <= 0.0 {
                return Err(Error::invalid(format!(
                    "need margin >= 0 and tau > 0, got margin={m}, tau={tau}"
                )));
            }
            Ok(LabelField::from_fn(
                2,
                h,
                w,
                |cls, _, _| if cls == 0 { 1.0 } else { 0.0 },
            ))
        }
    }
}

/// Hard two-class context from the anatomy mask: class 0 is organ minus ROI,
/// class 1 is everything else. ROI pixels land in class 1 but aggregation
/// overwrites them with the ROI label, so only the non-ROI partition matters.
/// Returns a warning if the ROI escapes the organ.
pub fn oracle_context(organ_mask: &Mask, roi_mask: &Mask) -> Result<(LabelField, Option<String>)> {
    if organ_mask.height() != roi_mask.height() || organ_mask.width() != roi_mask.width() {
        return Err(Error::invalid(format!(
            "organ mask {}x{} does not match roi mask {}x{}",
            organ_mask.height(), organ_mask.width(), roi_mask.height(), roi_mask.width()
        )));
    }
    let (h, w) = (organ_mask.height(), organ_mask.width());
    let mut escaped = 0usize;
    for y in 0..h {
        for x in 0..w {
            if roi_mask.get(y, x) && !organ_mask.get(y, x) {
                escaped += 1;
            }
        }
    }
    let warning = if escaped > 0 {
        Some(format!(
            "{escaped} roi pixels outside the organ mask; using set difference"
        ))
    } else {
        None
    };
    let field = LabelField::from_fn(2, h, w, |cls, y, x| {
        let in_diff = organ_mask.get(y, x) && !roi_mask.get(y, x);
        let assigned = if in_diff { 0 } else { 1 };
        if cls == assigned {
            1.0
        } else {
            0.0
        }
    });
    Ok((field, warning))
}
