//! Difference-of-Gaussians keypoints with 128-d gradient histogram
//! descriptors, on images that wrap around horizontally.
//!
//! Every horizontal access is taken modulo the image width, so a 360° range
//! image has no left/right seam. Vertical borders are clamped.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::EqualizedImage;

pub const DESCRIPTOR_LEN: usize = 128;
const DESCRIPTOR_GRID: usize = 4;
const DESCRIPTOR_BINS: usize = 8;
const ORIENTATION_BINS: usize = 36;
const MIN_IMAGE_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorParams {
    pub octaves: usize,
    pub scales_per_octave: usize,
    /// Blur of the first scale of every octave.
    pub sigma: f64,
    /// Blur already present in the input image.
    pub assumed_blur: f64,
    /// Minimum |DoG| at the refined extremum, for intensities in [0, 1].
    pub contrast_threshold: f64,
    /// Principal-curvature ratio above which edge-like extrema are dropped.
    pub edge_ratio: f64,
    pub max_refine_steps: usize,
    /// Secondary orientation peaks at or above this fraction of the
    /// dominant one spawn extra keypoints.
    pub orientation_peak_ratio: f64,
    pub descriptor_clamp: f64,
    /// Treat columns cyclically (360° images).
    pub wrap_columns: bool,
    /// Double the image (bilinear) before building the pyramid, adding a
    /// finer octave.
    pub upsample: bool,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            octaves: 3,
            scales_per_octave: 3,
            sigma: 1.6,
            assumed_blur: 0.5,
            contrast_threshold: 0.03,
            edge_ratio: 10.0,
            max_refine_steps: 5,
            orientation_peak_ratio: 0.8,
            descriptor_clamp: 0.2,
            wrap_columns: true,
            upsample: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    /// Sub-pixel position in input image coordinates.
    pub row: f64,
    pub col: f64,
    /// Blur scale in input image pixels.
    pub scale: f64,
    pub orientation: f64,
    pub octave: usize,
    pub response: f64,
    pub descriptor: [f32; DESCRIPTOR_LEN],
}

impl Keypoint {
    /// Integer pixel nearest to the sub-pixel position, wrapped horizontally.
    pub fn pixel(&self, height: usize, width: usize) -> (usize, usize) {
        let row = (self.row.round().max(0.0) as usize).min(height - 1);
        let col = (self.col.round() as i64).rem_euclid(width as i64) as usize;
        (row, col)
    }
}

#[derive(Debug, Clone)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f32>,
    wrap: bool,
}

impl Plane {
    fn new(h: usize, w: usize, wrap: bool) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w],
            wrap,
        }
    }

    #[inline]
    fn at(&self, r: isize, c: isize) -> f32 {
        let r = r.clamp(0, self.h as isize - 1) as usize;
        let c = if self.wrap {
            c.rem_euclid(self.w as isize) as usize
        } else {
            c.clamp(0, self.w as isize - 1) as usize
        };
        self.data[r * self.w + c]
    }

    #[inline]
    fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.w + c]
    }

    fn blur(&self, sigma: f64) -> Plane {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil().max(1.0) as isize;
        let mut kernel: Vec<f32> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
            .collect();
        let sum: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= sum);

        let mut tmp = Plane::new(self.h, self.w, self.wrap);
        for r in 0..self.h {
            for c in 0..self.w {
                let mut acc = 0.0f32;
                for (j, k) in kernel.iter().enumerate() {
                    acc += k * self.at(r as isize, c as isize + j as isize - radius);
                }
                tmp.data[r * self.w + c] = acc;
            }
        }
        let mut out = Plane::new(self.h, self.w, self.wrap);
        for r in 0..self.h {
            for c in 0..self.w {
                let mut acc = 0.0f32;
                for (j, k) in kernel.iter().enumerate() {
                    acc += k * tmp.at(r as isize + j as isize - radius, c as isize);
                }
                out.data[r * self.w + c] = acc;
            }
        }
        out
    }

    fn upsample(&self) -> Plane {
        let (h, w) = (self.h * 2, self.w * 2);
        let mut out = Plane::new(h, w, self.wrap);
        for r in 0..h {
            let y = r as f64 / 2.0;
            let (r0, fy) = (y.floor() as isize, (y - y.floor()) as f32);
            for c in 0..w {
                let x = c as f64 / 2.0;
                let (c0, fx) = (x.floor() as isize, (x - x.floor()) as f32);
                let top = self.at(r0, c0) * (1.0 - fx) + self.at(r0, c0 + 1) * fx;
                let bottom = self.at(r0 + 1, c0) * (1.0 - fx) + self.at(r0 + 1, c0 + 1) * fx;
                out.data[r * w + c] = top * (1.0 - fy) + bottom * fy;
            }
        }
        out
    }

    fn downsample(&self) -> Plane {
        let h = self.h.div_ceil(2);
        let w = self.w.div_ceil(2);
        let mut out = Plane::new(h, w, self.wrap);
        for r in 0..h {
            for c in 0..w {
                out.data[r * w + c] = self.get(2 * r, 2 * c);
            }
        }
        out
    }

    fn sub(&self, other: &Plane) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
            wrap: self.wrap,
        }
    }

    /// Gradient magnitude and angle (radians, `atan2(d/drow, d/dcol)`).
    #[inline]
    fn gradient(&self, r: isize, c: isize) -> (f64, f64) {
        let dx = (self.at(r, c + 1) - self.at(r, c - 1)) as f64;
        let dy = (self.at(r + 1, c) - self.at(r - 1, c)) as f64;
        ((dx * dx + dy * dy).sqrt(), dy.atan2(dx))
    }
}

struct Octave {
    gaussians: Vec<Plane>,
    dogs: Vec<Plane>,
}

/// Detects keypoints and computes their descriptors.
pub fn detect_and_describe(
    image: &EqualizedImage,
    params: &DetectorParams,
) -> Result<Vec<Keypoint>> {
    if image.height < MIN_IMAGE_SIZE || image.width < MIN_IMAGE_SIZE {
        return Err(Error::InvalidInput(format!(
            "image {}x{} is smaller than {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}",
            image.height, image.width
        )));
    }
    if params.scales_per_octave == 0 || params.octaves == 0 {
        return Err(Error::Config(
            "detector needs at least one octave and scale".into(),
        ));
    }
    let mut base = Plane::new(image.height, image.width, params.wrap_columns);
    for (d, &g) in base.data.iter_mut().zip(&image.gray) {
        *d = g as f32 / 255.0;
    }
    let (base, first_factor) = if params.upsample {
        (base.upsample(), 0.5)
    } else {
        (base, 1.0)
    };
    let octaves = build_pyramid(base, params);
    let mut keypoints = Vec::new();
    for (o, octave) in octaves.iter().enumerate() {
        let scale = Scale {
            octave: o,
            factor: first_factor * (1usize << o) as f64,
        };
        find_extrema(scale, octave, params, &mut keypoints);
    }
    Ok(keypoints)
}

fn build_pyramid(base: Plane, params: &DetectorParams) -> Vec<Octave> {
    let s = params.scales_per_octave;
    let k = 2f64.powf(1.0 / s as f64);
    let present = params.assumed_blur * if params.upsample { 2.0 } else { 1.0 };
    let initial = (params.sigma.powi(2) - present.powi(2)).max(0.01).sqrt();
    let increments: Vec<f64> = (1..s + 3)
        .map(|i| {
            let prev = params.sigma * k.powi(i as i32 - 1);
            let total = prev * k;
            (total * total - prev * prev).sqrt()
        })
        .collect();

    let mut octaves = Vec::with_capacity(params.octaves);
    let mut first = base.blur(initial);
    for _ in 0..params.octaves {
        if first.h < 3 || first.w < 3 {
            break;
        }
        let mut gaussians = Vec::with_capacity(s + 3);
        gaussians.push(first.clone());
        for inc in &increments {
            let next = gaussians.last().unwrap().blur(*inc);
            gaussians.push(next);
        }
        let dogs = gaussians.windows(2).map(|w| w[1].sub(&w[0])).collect();
        first = gaussians[s].downsample();
        octaves.push(Octave { gaussians, dogs });
    }
    octaves
}

/// Octave index and its pixel size in input-image pixels.
#[derive(Clone, Copy)]
struct Scale {
    octave: usize,
    factor: f64,
}

fn find_extrema(o: Scale, octave: &Octave, params: &DetectorParams, out: &mut Vec<Keypoint>) {
    let s = params.scales_per_octave;
    let dogs = &octave.dogs;
    let (h, w) = (dogs[0].h, dogs[0].w);
    let prefilter = (0.5 * params.contrast_threshold) as f32;
    let (c_lo, c_hi) = if params.wrap_columns {
        (0, w)
    } else {
        (1, w.saturating_sub(1))
    };
    for layer in 1..=s {
        let cur = &dogs[layer];
        for r in 1..h.saturating_sub(1) {
            for c in c_lo..c_hi {
                let v = cur.get(r, c);
                if v.abs() <= prefilter {
                    continue;
                }
                if !is_extremum(dogs, layer, r, c, v) {
                    continue;
                }
                if let Some(kp) = refine(octave, layer, r, c, params) {
                    describe_all(o, octave, kp, params, out);
                }
            }
        }
    }
}

fn is_extremum(dogs: &[Plane], layer: usize, r: usize, c: usize, v: f32) -> bool {
    let (r, c) = (r as isize, c as isize);
    let is_max = v > 0.0;
    for d in &dogs[layer - 1..=layer + 1] {
        for dr in -1..=1 {
            for dc in -1..=1 {
                let n = d.at(r + dr, c + dc);
                if std::ptr::eq(d, &dogs[layer]) && dr == 0 && dc == 0 {
                    continue;
                }
                if (is_max && n >= v) || (!is_max && n <= v) {
                    return false;
                }
            }
        }
    }
    true
}

/// Extremum located in octave coordinates, before orientation assignment.
struct Candidate {
    row: f64,
    col: f64,
    layer: usize,
    layer_offset: f64,
    response: f64,
}

fn refine(
    octave: &Octave,
    layer: usize,
    r: usize,
    c: usize,
    params: &DetectorParams,
) -> Option<Candidate> {
    let dogs = &octave.dogs;
    let s = params.scales_per_octave;
    let (h, w) = (dogs[0].h as isize, dogs[0].w as isize);
    let (mut layer, mut r, mut c) = (layer as isize, r as isize, c as isize);
    for _ in 0..params.max_refine_steps {
        let d = |l: isize, dr: isize, dc: isize| dogs[l as usize].at(r + dr, c + dc) as f64;
        let v = d(layer, 0, 0);
        let grad = nalgebra::Vector3::new(
            0.5 * (d(layer, 0, 1) - d(layer, 0, -1)),
            0.5 * (d(layer, 1, 0) - d(layer, -1, 0)),
            0.5 * (d(layer + 1, 0, 0) - d(layer - 1, 0, 0)),
        );
        let dxx = d(layer, 0, 1) + d(layer, 0, -1) - 2.0 * v;
        let dyy = d(layer, 1, 0) + d(layer, -1, 0) - 2.0 * v;
        let dss = d(layer + 1, 0, 0) + d(layer - 1, 0, 0) - 2.0 * v;
        let dxy = 0.25 * (d(layer, 1, 1) - d(layer, 1, -1) - d(layer, -1, 1) + d(layer, -1, -1));
        let dxs = 0.25
            * (d(layer + 1, 0, 1) - d(layer + 1, 0, -1) - d(layer - 1, 0, 1) + d(layer - 1, 0, -1));
        let dys = 0.25
            * (d(layer + 1, 1, 0) - d(layer + 1, -1, 0) - d(layer - 1, 1, 0) + d(layer - 1, -1, 0));
        let hess = nalgebra::Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        let offset = -(hess.try_inverse()? * grad);
        if offset.iter().all(|x| x.abs() < 0.5) {
            let response = v + 0.5 * grad.dot(&offset);
            if response.abs() < params.contrast_threshold {
                return None;
            }
            let tr = dxx + dyy;
            let det = dxx * dyy - dxy * dxy;
            let er = params.edge_ratio;
            if det <= 0.0 || tr * tr * er >= (er + 1.0).powi(2) * det {
                return None;
            }
            let mut col = c as f64 + offset[0];
            if params.wrap_columns {
                col = col.rem_euclid(w as f64);
            }
            return Some(Candidate {
                row: r as f64 + offset[1],
                col,
                layer: layer as usize,
                layer_offset: offset[2],
                response,
            });
        }
        c += offset[0].round() as isize;
        r += offset[1].round() as isize;
        layer += offset[2].round() as isize;
        if layer < 1 || layer > s as isize || r < 1 || r >= h - 1 {
            return None;
        }
        if !params.wrap_columns && (c < 1 || c >= w - 1) {
            return None;
        }
        if params.wrap_columns {
            c = c.rem_euclid(w);
        }
    }
    None
}

fn describe_all(
    o: Scale,
    octave: &Octave,
    cand: Candidate,
    params: &DetectorParams,
    out: &mut Vec<Keypoint>,
) {
    let s = params.scales_per_octave as f64;
    let octave_sigma = params.sigma * 2f64.powf((cand.layer as f64 + cand.layer_offset) / s);
    let g = &octave.gaussians[cand.layer];
    let factor = o.factor;
    for orientation in orientations(g, &cand, octave_sigma, params) {
        let Some(descriptor) = descriptor(g, &cand, octave_sigma, orientation, params) else {
            continue;
        };
        let width = (g.w as f64) * factor;
        let mut col = cand.col * factor;
        if params.wrap_columns {
            col = col.rem_euclid(width);
        }
        out.push(Keypoint {
            row: cand.row * factor,
            col,
            scale: octave_sigma * factor,
            orientation,
            octave: o.octave,
            response: cand.response,
            descriptor,
        });
    }
}

fn orientations(g: &Plane, cand: &Candidate, sigma: f64, params: &DetectorParams) -> Vec<f64> {
    let weight_sigma = 1.5 * sigma;
    let radius = (3.0 * weight_sigma).round() as isize;
    let (r0, c0) = (cand.row.round() as isize, cand.col.round() as isize);
    let mut hist = [0.0f64; ORIENTATION_BINS];
    let denom = 2.0 * weight_sigma * weight_sigma;
    for dr in -radius..=radius {
        let r = r0 + dr;
        if r <= 0 || r >= g.h as isize - 1 {
            continue;
        }
        for dc in -radius..=radius {
            if !g.wrap {
                let c = c0 + dc;
                if c <= 0 || c >= g.w as isize - 1 {
                    continue;
                }
            }
            let (mag, ang) = g.gradient(r, c0 + dc);
            let weight = (-((dr * dr + dc * dc) as f64) / denom).exp();
            let bin = ((ORIENTATION_BINS as f64 * (ang + PI) / (2.0 * PI)).round() as usize)
                % ORIENTATION_BINS;
            hist[bin] += weight * mag;
        }
    }
    let n = ORIENTATION_BINS;
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            (hist[(i + n - 2) % n] + hist[(i + 2) % n]) / 16.0
                + (hist[(i + n - 1) % n] + hist[(i + 1) % n]) * 4.0 / 16.0
                + hist[i] * 6.0 / 16.0
        })
        .collect();
    let max = smooth.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for i in 0..n {
        let (l, v, r) = (smooth[(i + n - 1) % n], smooth[i], smooth[(i + 1) % n]);
        if v > l && v > r && v >= params.orientation_peak_ratio * max {
            let shift = 0.5 * (l - r) / (l - 2.0 * v + r);
            let bin = (i as f64 + shift).rem_euclid(n as f64);
            out.push(bin * 2.0 * PI / n as f64 - PI);
        }
    }
    out
}

fn descriptor(
    g: &Plane,
    cand: &Candidate,
    sigma: f64,
    orientation: f64,
    params: &DetectorParams,
) -> Option<[f32; DESCRIPTOR_LEN]> {
    let d = DESCRIPTOR_GRID;
    let nb = DESCRIPTOR_BINS;
    let hist_width = 3.0 * sigma;
    let radius = (hist_width * std::f64::consts::SQRT_2 * (d as f64 + 1.0) * 0.5).round() as isize;
    let (cos_t, sin_t) = (
        orientation.cos() / hist_width,
        orientation.sin() / hist_width,
    );
    let (r0, c0) = (cand.row.round() as isize, cand.col.round() as isize);
    let exp_scale = -1.0 / (d as f64 * d as f64 * 0.5);
    let mut hist = vec![0.0f64; (d + 2) * (d + 2) * (nb + 2)];
    let idx = |rb: usize, cb: usize, ob: usize| (rb * (d + 2) + cb) * (nb + 2) + ob;

    for i in -radius..=radius {
        for j in -radius..=radius {
            // Rotate the sample offset into the keypoint frame, in bin units.
            let c_rot = j as f64 * cos_t + i as f64 * sin_t;
            let r_rot = -(j as f64) * sin_t + i as f64 * cos_t;
            let rbin = r_rot + d as f64 / 2.0 - 0.5;
            let cbin = c_rot + d as f64 / 2.0 - 0.5;
            if rbin <= -1.0 || rbin >= d as f64 || cbin <= -1.0 || cbin >= d as f64 {
                continue;
            }
            let r = r0 + i;
            let c = c0 + j;
            if r <= 0 || r >= g.h as isize - 1 {
                continue;
            }
            if !g.wrap && (c <= 0 || c >= g.w as isize - 1) {
                continue;
            }
            let (mag, ang) = g.gradient(r, c);
            let weight = ((c_rot * c_rot + r_rot * r_rot) * exp_scale).exp();
            let mut obin = (ang - orientation) * nb as f64 / (2.0 * PI);
            obin = obin.rem_euclid(nb as f64);
            let value = mag * weight;

            let (r_f, c_f, o_f) = (rbin.floor(), cbin.floor(), obin.floor());
            let (dr, dc, dobin) = (rbin - r_f, cbin - c_f, obin - o_f);
            let (ri, ci, oi) = ((r_f + 1.0) as usize, (c_f + 1.0) as usize, o_f as usize);
            for (rr, wr) in [(0, 1.0 - dr), (1, dr)] {
                for (cc, wc) in [(0, 1.0 - dc), (1, dc)] {
                    for (oo, wo) in [(0, 1.0 - dobin), (1, dobin)] {
                        hist[idx(ri + rr, ci + cc, oi + oo)] += value * wr * wc * wo;
                    }
                }
            }
        }
    }

    let mut desc = [0.0f64; DESCRIPTOR_LEN];
    for rb in 0..d {
        for cb in 0..d {
            for ob in 0..nb + 2 {
                let v = hist[idx(rb + 1, cb + 1, ob)];
                desc[(rb * d + cb) * nb + ob % nb] += v;
            }
        }
    }
    let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        return None;
    }
    let clamp = params.descriptor_clamp * norm;
    desc.iter_mut().for_each(|v| *v = v.min(clamp));
    let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = [0.0f32; DESCRIPTOR_LEN];
    for (o, v) in out.iter_mut().zip(&desc) {
        *o = (v / norm) as f32;
    }
    Some(out)
}
