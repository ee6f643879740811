//! Deterministic 2D segmentation benchmark: an elliptical organ containing a
//! bright ROI blob, plus bright distractor blobs outside the organ at the
//! same intensity as the ROI. A plain intensity rule cannot tell ROI from
//! distractor, so improvements must come from spatial context.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{distance_map, Mask};
use crate::io::{read_tensor, write_tensor};
use crate::ndtensor::Tensor;
use crate::rng::SeedStream;

const MAX_REJECTIONS: usize = 1000;

/// Generation parameters. Ranges are inclusive low, exclusive high.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub image_size: usize,
    /// Organ ellipse semi-axis range in pixels.
    pub organ_semiaxis: (f64, f64),
    /// ROI blob radius range in pixels.
    pub roi_radius: (f64, f64),
    /// Distractor blob radius range in pixels.
    pub distractor_radius: (f64, f64),
    /// Distractors per image, inclusive range.
    pub distractor_count: (usize, usize),
    /// Distance band (from the ROI center) where distractor centers land.
    pub distractor_band: (f64, f64),
    /// Width of an organ-intensity ring painted around each distractor, so
    /// its local appearance matches the ROI sitting on organ tissue and
    /// only wider context separates them. 0 disables the ring (and files
    /// written before this knob existed read back as 0).
    #[serde(default)]
    pub distractor_halo: f64,
    pub mu_background: f64,
    pub mu_organ: f64,
    pub mu_roi: f64,
    pub mu_distractor: f64,
    pub noise_sigma: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Extra test cases with no ROI at all.
    #[serde(default)]
    pub n_test_empty: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            image_size: 64,
            organ_semiaxis: (11.0, 17.0),
            roi_radius: (2.5, 4.0),
            distractor_radius: (2.0, 3.5),
            distractor_count: (2, 4),
            distractor_band: (8.0, 22.0),
            distractor_halo: 3.0,
            mu_background: 0.0,
            mu_organ: 0.35,
            mu_roi: 0.75,
            mu_distractor: 0.75,
            noise_sigma: 0.05,
            n_train: 24,
            n_test: 12,
            n_test_empty: 0,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size as f64;
        if self.image_size < 16 {
            return Err(Error::invalid("image_size must be at least 16"));
        }
        if self.organ_semiaxis.0 <= 0.0 || self.organ_semiaxis.1 > s / 2.0 {
            return Err(Error::invalid("organ semi-axes must fit the image"));
        }
        if self.roi_radius.0 <= 0.0 || self.roi_radius.1 >= self.organ_semiaxis.0 {
            return Err(Error::invalid("roi radius must be positive and below the organ size"));
        }
        if self.mu_roi == self.mu_background {
            return Err(Error::invalid("mu_roi must differ from mu_background"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise_sigma must be non-negative"));
        }
        if self.distractor_count.0 > self.distractor_count.1 {
            return Err(Error::invalid("distractor_count range is inverted"));
        }
        if !self.distractor_halo.is_finite() || self.distractor_halo < 0.0 {
            return Err(Error::invalid("distractor_halo must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One image with its ROI ground truth and the organ (anatomy) mask.
#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    pub image: Tensor,
    pub roi_mask: Mask,
    pub organ_mask: Mask,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (sin, cos) = self.theta.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        (u / self.a) * (u / self.a) + (v / self.b) * (v / self.b) <= 1.0
    }
}

fn disk_fits(cy: f64, cx: f64, r: f64, size: usize, inside: &Ellipse, want_inside: bool) -> bool {
    let pad = r + 1.0;
    if cy - pad < 0.0 || cx - pad < 0.0 || cy + pad >= size as f64 || cx + pad >= size as f64 {
        return false;
    }
    let y0 = (cy - pad).floor() as usize;
    let y1 = (cy + pad).ceil() as usize;
    let x0 = (cx - pad).floor() as usize;
    let x1 = (cx + pad).ceil() as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            if d2 <= pad * pad && inside.contains(y as f64, x as f64) != want_inside {
                return false;
            }
        }
    }
    true
}

fn gen_case(spec: &TaskSpec, stream: &mut SeedStream, id: String, with_roi: bool) -> Result<Case> {
    let size = spec.image_size;
    let sf = size as f64;

    let organ = {
        let jitter = sf / 10.0;
        Ellipse {
            cy: sf / 2.0 + stream.uniform_in(-jitter, jitter),
            cx: sf / 2.0 + stream.uniform_in(-jitter, jitter),
            a: stream.uniform_in(spec.organ_semiaxis.0, spec.organ_semiaxis.1),
            b: stream.uniform_in(spec.organ_semiaxis.0, spec.organ_semiaxis.1),
            theta: stream.uniform_in(0.0, std::f64::consts::PI),
        }
    };
    let organ_mask = Mask::from_fn(size, size, |y, x| organ.contains(y as f64, x as f64));

    let (roi_mask, roi_center) = if with_roi {
        let r = stream.uniform_in(spec.roi_radius.0, spec.roi_radius.1);
        let mut placed = None;
        for _ in 0..MAX_REJECTIONS {
            // bias the blob toward the organ boundary so nearby outside
            // pixels exist within the soft-mask band
            let frac = stream.uniform_in(0.35, 0.75);
            let ang = stream.uniform_in(0.0, std::f64::consts::TAU);
            let (sin, cos) = organ.theta.sin_cos();
            let u = frac * organ.a * ang.cos();
            let v = frac * organ.b * ang.sin();
            let cy = organ.cy + u * sin + v * cos;
            let cx = organ.cx + u * cos - v * sin;
            if disk_fits(cy, cx, r, size, &organ, true) {
                placed = Some((cy, cx));
                break;
            }
        }
        let Some((cy, cx)) = placed else {
            return Err(Error::invalid(format!(
                "{id}: no ROI placement found after {MAX_REJECTIONS} tries"
            )));
        };
        let mask = Mask::from_fn(size, size, |y, x| {
            (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r
        });
        if mask.is_empty_mask() {
            return Err(Error::invalid(format!("{id}: roi radius {r} covers no pixel")));
        }
        (mask, (cy, cx))
    } else {
        (Mask::new(size, size), (organ.cy, organ.cx))
    };

    let n_distr = {
        let (lo, hi) = spec.distractor_count;
        lo + stream.index(hi - lo + 1)
    };
    let mut distractor_mask = Mask::new(size, size);
    let mut halo_mask = Mask::new(size, size);
    for k in 0..n_distr {
        let r = stream.uniform_in(spec.distractor_radius.0, spec.distractor_radius.1);
        let mut placed = false;
        for _ in 0..MAX_REJECTIONS {
            let dist = stream.uniform_in(spec.distractor_band.0, spec.distractor_band.1);
            let ang = stream.uniform_in(0.0, std::f64::consts::TAU);
            let cy = roi_center.0 + dist * ang.sin();
            let cx = roi_center.1 + dist * ang.cos();
            if disk_fits(cy, cx, r, size, &organ, false) {
                let rh = r + spec.distractor_halo;
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        if d2 <= r * r {
                            distractor_mask.set(y, x, true);
                        } else if d2 <= rh * rh {
                            halo_mask.set(y, x, true);
                        }
                    }
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid(format!(
                "{id}: no placement for distractor {k} after {MAX_REJECTIONS} tries"
            )));
        }
    }

    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mu = if roi_mask.get(y, x) {
                spec.mu_roi
            } else if distractor_mask.get(y, x) {
                spec.mu_distractor
            } else if organ_mask.get(y, x) || halo_mask.get(y, x) {
                spec.mu_organ
            } else {
                spec.mu_background
            };
            data.push(mu + spec.noise_sigma * stream.normal());
        }
    }
    Ok(Case {
        id,
        image: Tensor::new(vec![1, size, size], data)?,
        roi_mask,
        organ_mask,
    })
}

/// Deterministic train/test generation. Every train case and every regular
/// test case has a non-empty ROI; `n_test_empty` extra test cases have none.
pub fn generate_task(spec: &TaskSpec) -> Result<(Vec<Case>, Vec<Case>)> {
    spec.validate()?;
    let root = SeedStream::new(spec.seed);
    let mut train = Vec::with_capacity(spec.n_train);
    for i in 0..spec.n_train {
        let id = format!("train_{i:04}");
        let mut s = root.clone().child("train").child(&id);
        train.push(gen_case(spec, &mut s, id, true)?);
    }
    let mut test = Vec::with_capacity(spec.n_test + spec.n_test_empty);
    for i in 0..spec.n_test {
        let id = format!("test_{i:04}");
        let mut s = root.clone().child("test").child(&id);
        test.push(gen_case(spec, &mut s, id, true)?);
    }
    for i in 0..spec.n_test_empty {
        let id = format!("test_empty_{i:04}");
        let mut s = root.clone().child("test_empty").child(&id);
        test.push(gen_case(spec, &mut s, id, false)?);
    }
    Ok((train, test))
}

/// One crop assignment: which case, the window origin, and whether the draw
/// came from the ROI-targeting half of the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub case: usize,
    pub y0: usize,
    pub x0: usize,
    pub roi_targeted: bool,
}

/// Draws crop windows: the first ceil(roi_fraction * n) of each batch are
/// centered on pixels within `margin` of a ROI (uniform over qualifying
/// pixels of a uniformly chosen ROI-bearing case), the rest uniform over all
/// cases and positions. Windows are clamped to the image.
pub struct PatchSampler {
    patch: usize,
    image_size: usize,
    near_roi: Vec<(usize, Vec<(usize, usize)>)>,
    n_cases: usize,
}

impl PatchSampler {
    pub fn new(cases: &[Case], patch: usize, margin: f64) -> Result<PatchSampler> {
        let Some(first) = cases.first() else {
            return Err(Error::invalid("no cases to sample from"));
        };
        let image_size = first.roi_mask.height();
        if patch == 0 || patch > image_size {
            return Err(Error::invalid(format!(
                "patch size {patch} must be in 1..={image_size}"
            )));
        }
        let mut near_roi = Vec::new();
        for (i, case) in cases.iter().enumerate() {
            if let Some(df) = distance_map(&case.roi_mask) {
                let mut px = Vec::new();
                for y in 0..image_size {
                    for x in 0..image_size {
                        if df.dist(y, x) <= margin {
                            px.push((y, x));
                        }
                    }
                }
                near_roi.push((i, px));
            }
        }
        Ok(PatchSampler {
            patch,
            image_size,
            near_roi,
            n_cases: cases.len(),
        })
    }

    fn origin_for_center(&self, cy: usize, cx: usize) -> (usize, usize) {
        let half = self.patch / 2;
        let max0 = self.image_size - self.patch;
        (cy.saturating_sub(half).min(max0), cx.saturating_sub(half).min(max0))
    }

    pub fn sample_batch(
        &self,
        batch_size: usize,
        roi_fraction: f64,
        rng: &mut SeedStream,
    ) -> Result<Vec<Patch>> {
        if !(0.0..=1.0).contains(&roi_fraction) {
            return Err(Error::invalid("roi_fraction must be in [0, 1]"));
        }
        let n_roi = (roi_fraction * batch_size as f64).ceil() as usize;
        if n_roi > 0 && self.near_roi.is_empty() {
            return Err(Error::invalid("no case has a ROI to target"));
        }
        let mut out = Vec::with_capacity(batch_size);
        for i in 0..batch_size {
            if i < n_roi {
                let (case, pixels) = &self.near_roi[rng.index(self.near_roi.len())];
                let (cy, cx) = pixels[rng.index(pixels.len())];
                let (y0, x0) = self.origin_for_center(cy, cx);
                out.push(Patch { case: *case, y0, x0, roi_targeted: true });
            } else {
                let case = rng.index(self.n_cases);
                let max0 = self.image_size - self.patch + 1;
                out.push(Patch {
                    case,
                    y0: rng.index(max0),
                    x0: rng.index(max0),
                    roi_targeted: false,
                });
            }
        }
        Ok(out)
    }
}

fn case_paths(dir: &Path, id: &str) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join(format!("{id}.ten")),
        dir.join(format!("{id}_roi.pgm")),
        dir.join(format!("{id}_organ.pgm")),
    )
}

/// Writes `spec.json` plus per-case image/mask files under `dir`.
pub fn save_dataset(dir: &Path, spec: &TaskSpec, train: &[Case], test: &[Case]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let spec_json = serde_json::to_string_pretty(spec)
        .map_err(|e| Error::format(dir.join("spec.json").display().to_string(), e.to_string()))?;
    fs::write(dir.join("spec.json"), spec_json.as_bytes())
        .map_err(|e| Error::io(dir.join("spec.json").display().to_string(), e))?;
    for case in train.iter().chain(test) {
        let (img, roi, organ) = case_paths(dir, &case.id);
        write_tensor(&img, &case.image)?;
        case.roi_mask.write_pgm(&roi)?;
        case.organ_mask.write_pgm(&organ)?;
    }
    Ok(())
}

/// Reads a dataset directory written by [`save_dataset`]. Case membership
/// and order are reconstructed from the spec's counts and id scheme.
pub fn load_dataset(dir: &Path) -> Result<(TaskSpec, Vec<Case>, Vec<Case>)> {
    let spec_path = dir.join("spec.json");
    let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(spec_path.display().to_string(), e))?;
    let spec: TaskSpec =
        serde_json::from_str(&text).map_err(|e| Error::format(spec_path.display().to_string(), e.to_string()))?;

    let load = |id: String| -> Result<Case> {
        let (img, roi, organ) = case_paths(dir, &id);
        Ok(Case {
            image: read_tensor(&img)?,
            roi_mask: Mask::read_pgm(&roi)?,
            organ_mask: Mask::read_pgm(&organ)?,
            id,
        })
    };
    let mut train = Vec::with_capacity(spec.n_train);
    for i in 0..spec.n_train {
        train.push(load(format!("train_{i:04}"))?);
    }
    let mut test = Vec::with_capacity(spec.n_test + spec.n_test_empty);
    for i in 0..spec.n_test {
        test.push(load(format!("test_{i:04}"))?);
    }
    for i in 0..spec.n_test_empty {
        test.push(load(format!("test_empty_{i:04}"))?);
    }
    Ok((spec, train, test))
}
