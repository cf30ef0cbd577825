//! Spherical range images: projection, exact back-projection through the
//! pixel index map, nearest-valid-pixel depth completion and histogram
//! equalization.
//!
//! Pixel layout: row 0 is the top of the image. With
//! `top_row_max_elevation` set (the default) the top row holds the highest
//! elevation; the row counted from the bottom is
//! `floor((elevation − fov_min) / Δα)`. Column `c` covers azimuths
//! `[−π + c·Δβ, −π + (c+1)·Δβ)` with azimuth `atan2(y, x)`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{write_atomic, write_atomic_str};
use crate::pointcloud::PointCloud;

mod degrees {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(v.to_degrees())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        f64::deserialize(d).map(f64::to_radians)
    }
}

/// Image geometry. Angles are stored in radians and written to config
/// files in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    pub height: usize,
    pub width: usize,
    #[serde(rename = "fov_down_deg", with = "degrees")]
    pub fov_min: f64,
    #[serde(rename = "fov_up_deg", with = "degrees")]
    pub fov_max: f64,
    pub max_range: f64,
    pub top_row_max_elevation: bool,
    /// Depth bins used to build the equalization histogram.
    pub equalization_bins: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 1024,
            fov_min: (-24.8f64).to_radians(),
            fov_max: 2.0f64.to_radians(),
            max_range: 80.0,
            top_row_max_elevation: true,
            equalization_bins: 1 << 16,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if !(self.fov_min < self.fov_max) || self.fov_min < -PI / 2.0 || self.fov_max > PI / 2.0 {
            return Err(Error::Config(format!(
                "vertical field of view [{}, {}] rad is empty or out of range",
                self.fov_min, self.fov_max
            )));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::Config("max_range must be positive".into()));
        }
        if self.equalization_bins < 2 {
            return Err(Error::Config("equalization_bins must be at least 2".into()));
        }
        Ok(())
    }

    /// Vertical angular resolution Δα.
    pub fn vertical_resolution(&self) -> f64 {
        (self.fov_max - self.fov_min) / self.height as f64
    }

    /// Horizontal angular resolution Δβ.
    pub fn horizontal_resolution(&self) -> f64 {
        2.0 * PI / self.width as f64
    }

    /// Elevation of the center of `row`.
    pub fn row_elevation(&self, row: usize) -> f64 {
        let from_bottom = if self.top_row_max_elevation {
            self.height - 1 - row
        } else {
            row
        };
        self.fov_min + (from_bottom as f64 + 0.5) * self.vertical_resolution()
    }

    /// Azimuth of the center of `col`.
    pub fn col_azimuth(&self, col: usize) -> f64 {
        -PI + (col as f64 + 0.5) * self.horizontal_resolution()
    }

    /// Pixel hit by `p`, or `None` when `p` is outside the vertical field of
    /// view, at the origin, or non-finite.
    pub fn pixel_of(&self, p: &Vector3<f64>) -> Option<(usize, usize)> {
        let r = p.norm();
        if !(r > 0.0) || !r.is_finite() {
            return None;
        }
        let elevation = (p[2] / r).clamp(-1.0, 1.0).asin();
        if elevation < self.fov_min || elevation > self.fov_max {
            return None;
        }
        let from_bottom = (((elevation - self.fov_min) / self.vertical_resolution()).floor()
            as usize)
            .min(self.height - 1);
        let row = if self.top_row_max_elevation {
            self.height - 1 - from_bottom
        } else {
            from_bottom
        };
        let azimuth = p[1].atan2(p[0]);
        let col = (((azimuth + PI) / self.horizontal_resolution())
            .floor()
            .max(0.0) as usize)
            .min(self.width - 1);
        Some((row, col))
    }
}

/// Range image with the index of the source point behind every valid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalImage {
    pub height: usize,
    pub width: usize,
    /// Row-major ranges in meters; 0 on void pixels.
    pub depth: Vec<f64>,
    pub index_map: Vec<Option<u32>>,
    /// Points that fell outside the vertical field of view or had zero range.
    pub dropped: usize,
}

impl SphericalImage {
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.index_map[row * self.width + col].is_some()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.index_map.iter().map(Option::is_some).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.index_map.iter().filter(|i| i.is_some()).count()
    }

    /// Writes `row,col,index` for every valid pixel.
    pub fn index_map_csv(&self) -> String {
        let mut out = String::from("row,col,index\n");
        for (i, idx) in self.index_map.iter().enumerate() {
            if let Some(idx) = idx {
                let _ = writeln!(out, "{},{},{}", i / self.width, i % self.width, idx);
            }
        }
        out
    }
}

/// Projects `cloud` onto the spherical grid. The nearest point wins a pixel.
pub fn project(cloud: &PointCloud, cfg: &ProjectionConfig) -> Result<SphericalImage> {
    cfg.validate()?;
    let n = cfg.height * cfg.width;
    let mut depth = vec![0.0; n];
    let mut index_map: Vec<Option<u32>> = vec![None; n];
    let mut dropped = 0;
    for (i, p) in cloud.points.iter().enumerate() {
        let Some((row, col)) = cfg.pixel_of(p) else {
            dropped += 1;
            continue;
        };
        let k = row * cfg.width + col;
        let r = p.norm();
        if index_map[k].is_none() || r < depth[k] {
            depth[k] = r;
            index_map[k] = Some(i as u32);
        }
    }
    Ok(SphericalImage {
        height: cfg.height,
        width: cfg.width,
        depth,
        index_map,
        dropped,
    })
}

/// The stored source point behind `(row, col)`; `None` on void pixels, which
/// is how completion-only ("fake") matches get rejected.
pub fn back_project(
    image: &SphericalImage,
    pixel: (usize, usize),
    cloud: &PointCloud,
) -> Option<Vector3<f64>> {
    let (row, col) = pixel;
    if row >= image.height || col >= image.width {
        return None;
    }
    image.index_map[row * image.width + col].map(|i| cloud.points[i as usize])
}

/// Depth image with every pixel filled, plus the validity mask from before
/// completion.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletedImage {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f64>,
    pub original_valid: Vec<bool>,
}

impl CompletedImage {
    pub fn was_valid(&self, row: usize, col: usize) -> bool {
        self.original_valid[row * self.width + col]
    }
}

pub fn depth_completion(image: &SphericalImage) -> Result<CompletedImage> {
    let valid = image.valid_mask();
    let depth = fill_nearest_valid(image.height, image.width, &image.depth, &valid)?;
    Ok(CompletedImage {
        height: image.height,
        width: image.width,
        depth,
        original_valid: valid,
    })
}

/// Replaces every invalid cell by the value of its nearest valid cell under
/// Euclidean pixel distance; ties go to the smallest row-major index.
///
/// Two passes: the nearest valid cell within each column, then a per-row
/// outward scan over columns that stops once the horizontal offset alone
/// exceeds the best distance found.
pub fn fill_nearest_valid(
    height: usize,
    width: usize,
    values: &[f64],
    valid: &[bool],
) -> Result<Vec<f64>> {
    assert_eq!(values.len(), height * width);
    assert_eq!(valid.len(), height * width);
    if !valid.iter().any(|&v| v) {
        return Err(Error::AllVoid);
    }
    // Per column: row of the nearest valid cell to each row (upper one on ties).
    const NONE: usize = usize::MAX;
    let mut nearest_row = vec![NONE; height * width];
    for c in 0..width {
        let mut last = NONE;
        for r in 0..height {
            if valid[r * width + c] {
                last = r;
            }
            nearest_row[r * width + c] = last;
        }
        let mut next = NONE;
        for r in (0..height).rev() {
            if valid[r * width + c] {
                next = r;
            }
            let k = r * width + c;
            let up = nearest_row[k];
            if next != NONE && (up == NONE || next - r < r - up) {
                nearest_row[k] = next;
            }
        }
    }
    let vdist2 = |r: usize, c: usize| -> Option<(usize, usize)> {
        let nr = nearest_row[r * width + c];
        (nr != NONE).then(|| {
            let d = nr.abs_diff(r);
            (d * d, nr)
        })
    };

    let mut out = values.to_vec();
    for r in 0..height {
        for c in 0..width {
            let k = r * width + c;
            if valid[k] {
                continue;
            }
            // (squared distance, row-major index of the source)
            let mut best: Option<(usize, usize)> = None;
            let consider = |cc: usize, best: &mut Option<(usize, usize)>| {
                if let Some((dv, nr)) = vdist2(r, cc) {
                    let dh = cc.abs_diff(c);
                    let cand = (dv + dh * dh, nr * width + cc);
                    if best.is_none_or(|b| cand < b) {
                        *best = Some(cand);
                    }
                }
            };
            consider(c, &mut best);
            for off in 1..width {
                if let Some((d, _)) = best {
                    if off * off > d {
                        break;
                    }
                }
                if off <= c {
                    consider(c - off, &mut best);
                }
                if c + off < width {
                    consider(c + off, &mut best);
                }
            }
            let (_, src) = best.expect("at least one valid pixel exists");
            out[k] = values[src];
        }
    }
    Ok(out)
}

/// 8-bit contrast-equalized depth image used for keypoint detection.
#[derive(Debug, Clone, PartialEq)]
pub struct EqualizedImage {
    pub height: usize,
    pub width: usize,
    pub gray: Vec<u8>,
}

impl EqualizedImage {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.gray[row * self.width + col]
    }
}

/// Cumulative-distribution equalization of the completed depth.
///
/// Depths are clamped to `[0, max_range]` and binned into
/// `cfg.equalization_bins` levels; a pixel in bin `v` maps to
/// `floor(256 · #{pixels in bins < v} / N)`. The map is monotone in depth.
pub fn histogram_equalize(image: &CompletedImage, cfg: &ProjectionConfig) -> EqualizedImage {
    let bins = cfg.equalization_bins.max(2);
    let n = image.depth.len();
    let scale = bins as f64 / cfg.max_range;
    let bin_of = |d: f64| -> usize {
        let d = if d.is_finite() {
            d.clamp(0.0, cfg.max_range)
        } else {
            cfg.max_range
        };
        ((d * scale) as usize).min(bins - 1)
    };
    let quantized: Vec<usize> = image.depth.iter().map(|&d| bin_of(d)).collect();
    let mut hist = vec![0usize; bins];
    for &q in &quantized {
        hist[q] += 1;
    }
    let mut below = vec![0usize; bins];
    let mut acc = 0usize;
    for (b, &h) in hist.iter().enumerate() {
        below[b] = acc;
        acc += h;
    }
    let gray = quantized
        .iter()
        .map(|&q| ((256 * below[q]) / n.max(1)).min(255) as u8)
        .collect();
    EqualizedImage {
        height: image.height,
        width: image.width,
        gray,
    }
}

fn pgm_bytes(height: usize, width: usize, pixels: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

/// Binary PGM of the raw range image, linear in depth over `[0, max_range]`.
pub fn depth_to_pgm(image: &SphericalImage, cfg: &ProjectionConfig) -> Vec<u8> {
    pgm_bytes(
        image.height,
        image.width,
        image
            .depth
            .iter()
            .map(|&d| (d.clamp(0.0, cfg.max_range) / cfg.max_range * 255.0).round() as u8),
    )
}

pub fn equalized_to_pgm(image: &EqualizedImage) -> Vec<u8> {
    pgm_bytes(image.height, image.width, image.gray.iter().copied())
}

pub fn write_pgm(path: &Path, pgm: &[u8]) -> Result<()> {
    write_atomic(path, pgm)
}

pub fn write_index_map_csv(path: &Path, image: &SphericalImage) -> Result<()> {
    write_atomic_str(path, &image.index_map_csv())
}
