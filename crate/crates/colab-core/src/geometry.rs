//! Binary masks, exact Euclidean distance transforms, soft dilated masks.
//!
//! The distance transform is the two-pass separable lower-envelope algorithm
//! on squared distances. Squared distances are sums of two integer squares
//! and therefore exact in f64, so results can be compared against a brute
//! force scan with `==`, not a tolerance.

use crate::error::{Error, Result};
use crate::io;
use std::path::Path;

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Mask::new(h, w);
        for y in 0..h {
            for x in 0..w {
                m.data[y * w + x] = f(y, x);
            }
        }
        m
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::invalid(format!(
                "mask data {} for {h}x{w}",
                data.len()
            )));
        }
        Ok(Mask { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        !self.data.iter().any(|v| *v)
    }

    pub fn crop(&self, y0: usize, x0: usize, size: usize) -> Mask {
        Mask::from_fn(size, size, |y, x| self.get(y0 + y, x0 + x))
    }

    /// Intersection emptiness, for containment checks.
    pub fn intersects(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).any(|(a, b)| *a && *b)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let px: Vec<u8> = self.data.iter().map(|v| if *v { 255 } else { 0 }).collect();
        io::write_pgm(path, self.w, self.h, &px)
    }

    pub fn read_pgm(path: &Path) -> Result<Mask> {
        let (w, h, px) = io::read_pgm(path)?;
        Ok(Mask {
            h,
            w,
            data: px.iter().map(|v| *v != 0).collect(),
        })
    }
}

/// Exact Euclidean distances to the nearest foreground pixel, stored
/// squared. Zero on foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    h: usize,
    w: usize,
    d2: Vec<f64>,
}

impl DistanceField {
    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Squared distance; exact.
    #[inline]
    pub fn d2(&self, y: usize, x: usize) -> f64 {
        self.d2[y * self.w + x]
    }

    /// Euclidean distance.
    #[inline]
    pub fn dist(&self, y: usize, x: usize) -> f64 {
        self.d2[y * self.w + x].sqrt()
    }

    pub fn d2_data(&self) -> &[f64] {
        &self.d2
    }

    pub fn crop(&self, y0: usize, x0: usize, size: usize) -> DistanceField {
        let mut d2 = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                d2.push(self.d2(y0 + y, x0 + x));
            }
        }
        DistanceField { h: size, w: size, d2 }
    }
}

/// Distance transform of `mask`. `None` when the mask has no foreground,
/// so callers can apply their all-background convention instead of
/// propagating infinities.
pub fn distance_map(mask: &Mask) -> Option<DistanceField> {
    if mask.is_empty_mask() {
        return None;
    }
    let (h, w) = (mask.h, mask.w);

    // Pass 1: per-column distance to the nearest foreground pixel in that
    // column (two linear sweeps), squared. Columns without foreground stay
    // at infinity.
    let mut g = vec![f64::INFINITY; h * w];
    let big = (h + w + 1) as i64;
    for x in 0..w {
        let mut dist = big;
        for y in 0..h {
            if mask.get(y, x) {
                dist = 0;
            } else if dist < big {
                dist += 1;
            }
            if dist < big {
                g[y * w + x] = (dist * dist) as f64;
            }
        }
        dist = big;
        for y in (0..h).rev() {
            if mask.get(y, x) {
                dist = 0;
            } else if dist < big {
                dist += 1;
            }
            if dist < big {
                let v = (dist * dist) as f64;
                if v < g[y * w + x] {
                    g[y * w + x] = v;
                }
            }
        }
    }

    // Pass 2: 1D lower-envelope transform along each row.
    let mut d2 = vec![0.0; h * w];
    let mut locs = vec![0usize; w + 1];
    let mut bounds = vec![0.0f64; w + 2];
    for y in 0..h {
        let row = &g[y * w..(y + 1) * w];
        dt1d(row, &mut d2[y * w..(y + 1) * w], &mut locs, &mut bounds);
    }
    Some(DistanceField { h, w, d2 })
}

/// 1D squared-distance transform: out[q] = min_p (q-p)^2 + f[p].
/// Parabolas at infinite f are skipped; the caller guarantees at least one
/// finite entry.
fn dt1d(f: &[f64], out: &mut [f64], locs: &mut [usize], bounds: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !started {
            locs[0] = q;
            bounds[0] = f64::NEG_INFINITY;
            bounds[1] = f64::INFINITY;
            started = true;
            continue;
        }
        let mut s = intersect(f, locs[k], q);
        while s <= bounds[k] {
            k -= 1;
            s = intersect(f, locs[k], q);
        }
        k += 1;
        locs[k] = q;
        bounds[k] = s;
        bounds[k + 1] = f64::INFINITY;
    }
    debug_assert!(started, "dt1d needs at least one finite parabola");
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while bounds[j + 1] < q as f64 {
            j += 1;
        }
        let p = locs[j] as f64;
        let dq = q as f64 - p;
        *o = dq * dq + f[locs[j]];
    }
}

/// Horizontal intersection of the parabolas rooted at p and q (p < q).
fn intersect(f: &[f64], p: usize, q: usize) -> f64 {
    let (pf, qf) = (p as f64, q as f64);
    ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf)
}

/// Per-pixel soft mask values in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl SoftMask {
    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.v[y * self.w + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.v
    }

    /// All-zero mask of the same extent; the convention for images without
    /// any foreground (the blended label collapses to the hard background
    /// label everywhere).
    pub fn zeros(h: usize, w: usize) -> SoftMask {
        SoftMask {
            h,
            w,
            v: vec![0.0; h * w],
        }
    }

    pub fn from_values(h: usize, w: usize, v: Vec<f64>) -> Result<SoftMask> {
        if v.len() != h * w {
            return Err(Error::invalid(format!("soft mask data {} for {h}x{w}", v.len())));
        }
        if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::invalid("soft mask values must lie in [0, 1]"));
        }
        Ok(SoftMask { h, w, v })
    }

    pub fn crop(&self, y0: usize, x0: usize, size: usize) -> SoftMask {
        let mut v = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                v.push(self.get(y0 + y, x0 + x));
            }
        }
        SoftMask { h: size, w: size, v }
    }
}

/// Soft dilated mask: 1 inside the band (d < m), exponential falloff
/// exp((m - d) / tau) outside. Continuous at the band edge.
pub fn soft_dilated_mask(df: &DistanceField, m: f64, tau: f64) -> Result<SoftMask> {
    if !(m >= 0.0) || !(tau > 0.0) {
        return Err(Error::invalid(format!("soft mask wants m >= 0, tau > 0; got m={m}, tau={tau}")));
    }
    let v = df
        .d2
        .iter()
        .map(|d2| {
            let d = d2.sqrt();
            if d < m {
                1.0
            } else {
                ((m - d) / tau).exp()
            }
        })
        .collect();
    Ok(SoftMask { h: df.h, w: df.w, v })
}
