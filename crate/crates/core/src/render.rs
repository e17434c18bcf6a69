//! Rendering of a fitted field into a planar image, evaluation metrics and
//! image/raw exports.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UnfoldError};
use crate::field::{jacobian_from_stencil, jacobian_stencil, NeuralField};
use crate::volume::{Volume, WorldPoint};

/// Relevant-area radius around the targets, mm.
pub const RELEVANT_RADIUS_MM: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub pixel_spacing_mm: f64,
    /// Intensity mapped to 0 and 65535 in the 16-bit export.
    pub window: [f64; 2],
    pub emit_coordinate_map: bool,
    pub emit_distortion_map: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            pixel_spacing_mm: 0.5,
            window: [0.0, 400.0],
            emit_coordinate_map: true,
            emit_distortion_map: true,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_spacing_mm > 0.0) || !self.pixel_spacing_mm.is_finite() {
            return Err(UnfoldError::InvalidArgument("pixel spacing must be positive".into()));
        }
        if !(self.window[0] < self.window[1]) {
            return Err(UnfoldError::InvalidArgument("window low must be below high".into()));
        }
        Ok(())
    }
}

/// Rendered image, row-major with `v` along rows and `u` along columns.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldResult {
    pub width: usize,
    pub height: usize,
    pub pixel_spacing_mm: f64,
    /// Physical plane extent `(Lu, Lv)` in mm.
    pub plane_mm: [f64; 2],
    pub intensity: Vec<f64>,
    pub coords: Vec<WorldPoint>,
    /// Per-pixel max `|d|` over incident neighbor pairs, mm.
    pub distortion: Vec<f64>,
}

/// Image size for a plane of `plane_mm` at spacing `delta`.
pub fn image_dims(plane_mm: [f64; 2], delta: f64) -> (usize, usize) {
    let n = |l: f64| ((l / delta - 1e-9).ceil() as usize).max(1);
    (n(plane_mm[0]), n(plane_mm[1]))
}

/// Normalized plane coordinate of pixel `(i, j)`. The grid is centered on
/// the plane with neighbors exactly `delta` mm apart.
pub fn pixel_u(i: usize, j: usize, dims: (usize, usize), plane_mm: [f64; 2], delta: f64) -> Vector2<f64> {
    Vector2::new(
        0.5 + (i as f64 + 0.5 - dims.0 as f64 / 2.0) * delta / plane_mm[0],
        0.5 + (j as f64 + 0.5 - dims.1 as f64 / 2.0) * delta / plane_mm[1],
    )
}

impl UnfoldResult {
    /// Result from hand-made coordinates; intensity is zero.
    pub fn from_coords(width: usize, height: usize, pixel_spacing_mm: f64, coords: Vec<WorldPoint>) -> Result<Self> {
        if coords.len() != width * height || width == 0 || height == 0 {
            return Err(UnfoldError::InvalidArgument(
                "coordinate count does not match image size".into(),
            ));
        }
        let mut r = UnfoldResult {
            width,
            height,
            pixel_spacing_mm,
            plane_mm: [width as f64 * pixel_spacing_mm, height as f64 * pixel_spacing_mm],
            intensity: vec![0.0; coords.len()],
            distortion: Vec::new(),
            coords,
        };
        r.distortion = r.distortion_map();
        Ok(r)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    pub fn pixel_u(&self, i: usize, j: usize) -> Vector2<f64> {
        pixel_u(i, j, (self.width, self.height), self.plane_mm, self.pixel_spacing_mm)
    }

    /// Signed `|x̂_a - x̂_b| - delta` for every horizontal then every vertical
    /// neighbor pair, with the pixel indices of both ends.
    pub fn neighbor_pairs(&self) -> Vec<(usize, usize, f64)> {
        let (w, h) = (self.width, self.height);
        let mut out = Vec::with_capacity(2 * w * h);
        let d = |a: usize, b: usize| (self.coords[a] - self.coords[b]).norm() - self.pixel_spacing_mm;
        for j in 0..h {
            for i in 0..w.saturating_sub(1) {
                let (a, b) = (self.index(i, j), self.index(i + 1, j));
                out.push((a, b, d(a, b)));
            }
        }
        for j in 0..h.saturating_sub(1) {
            for i in 0..w {
                let (a, b) = (self.index(i, j), self.index(i, j + 1));
                out.push((a, b, d(a, b)));
            }
        }
        out
    }

    fn distortion_map(&self) -> Vec<f64> {
        let mut map = vec![0.0f64; self.len()];
        for (a, b, d) in self.neighbor_pairs() {
            map[a] = map[a].max(d.abs());
            map[b] = map[b].max(d.abs());
        }
        map
    }
}

/// Evaluates the field on the pixel grid and reads out the volume.
pub fn render(field: &NeuralField, volume: &Volume, cfg: &RenderConfig) -> Result<UnfoldResult> {
    cfg.validate()?;
    let frame = field.frame();
    let plane = frame.plane_scale();
    let plane_mm = [plane.x, plane.y];
    let delta = cfg.pixel_spacing_mm;
    let (w, h) = image_dims(plane_mm, delta);
    let lifted: Vec<WorldPoint> = (0..w * h)
        .map(|p| frame.lift(pixel_u(p % w, p / w, (w, h), plane_mm, delta)))
        .collect();
    let disp = field.displacements(&lifted);
    let coords: Vec<WorldPoint> = lifted.iter().zip(&disp).map(|(x, d)| x + d).collect();
    if coords.iter().any(|c| !c.iter().all(|v| v.is_finite())) {
        return Err(UnfoldError::NonFiniteParameter { layer: 0 });
    }
    let intensity = coords.par_iter().map(|x| volume.sample(x)).collect();
    let mut r = UnfoldResult {
        width: w,
        height: h,
        pixel_spacing_mm: delta,
        plane_mm,
        intensity,
        coords,
        distortion: Vec::new(),
    };
    r.distortion = r.distortion_map();
    Ok(r)
}

/// Distance from every point to its nearest target, brute force.
pub fn nearest_target_distances(points: &[WorldPoint], targets: &[WorldPoint]) -> Vec<f64> {
    points
        .par_iter()
        .map(|p| {
            targets
                .iter()
                .map(|t| (p - t).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    pub std_dev: f64,
}

/// Max, mean, median and population standard deviation.
pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary::default();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    Summary {
        max: sorted[m - 1],
        mean,
        median,
        std_dev: var.sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistortionStats {
    pub summary: Summary,
    pub relevant_pairs: usize,
    pub relevant_pixel_count: usize,
    /// Pixels whose readout lies within the radius of a target.
    pub relevant: Vec<bool>,
}

/// Statistics of `|d|` over neighbor pairs with either end within `radius_mm`
/// of a target.
pub fn distortion_stats(result: &UnfoldResult, targets: &[WorldPoint], radius_mm: f64) -> Result<DistortionStats> {
    let near = nearest_target_distances(&result.coords, targets);
    let relevant: Vec<bool> = near.iter().map(|&d| d <= radius_mm).collect();
    let relevant_pixel_count = relevant.iter().filter(|&&r| r).count();
    if relevant_pixel_count == 0 {
        return Err(UnfoldError::TargetNotCovered);
    }
    let values: Vec<f64> = result
        .neighbor_pairs()
        .into_iter()
        .filter(|&(a, b, _)| relevant[a] || relevant[b])
        .map(|(_, _, d)| d.abs())
        .collect();
    Ok(DistortionStats {
        summary: summarize(&values),
        relevant_pairs: values.len(),
        relevant_pixel_count,
        relevant,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceStats {
    pub summary: Summary,
    /// Distance of each target to its nearest rendered coordinate, input order.
    pub per_target: Vec<f64>,
}

pub fn distance_stats(result: &UnfoldResult, targets: &[WorldPoint]) -> DistanceStats {
    let per_target = nearest_target_distances(targets, &result.coords);
    DistanceStats {
        summary: summarize(&per_target),
        per_target,
    }
}

/// Area in cm² of pixels whose readout lies inside the mask.
pub fn mask_coverage(result: &UnfoldResult, mask: &Volume) -> Result<f64> {
    if !mask.is_binary() {
        return Err(UnfoldError::NonBinaryMask);
    }
    let count = result.coords.par_iter().filter(|x| mask.sample(x) >= 0.5).count();
    Ok(result.pixel_spacing_mm.powi(2) * count as f64 / 100.0)
}

/// `det J` of `x + f(x)` at the undeformed position of every selected pixel.
pub fn pixel_jacobian_determinants(
    field: &NeuralField,
    result: &UnfoldResult,
    select: &[bool],
    step: f64,
) -> Vec<f64> {
    let frame = field.frame();
    let pts: Vec<WorldPoint> = (0..result.len())
        .filter(|&p| select[p])
        .map(|p| frame.lift(result.pixel_u(p % result.width, p / result.width)))
        .collect();
    let stencil = jacobian_stencil(&pts, step);
    let d = field.displacements(&stencil);
    d.chunks(6).map(|c| jacobian_from_stencil(c, step).determinant()).collect()
}

/// Pixel pairs at least `min_plane_mm` apart in the image whose readouts lie
/// within `max_world_mm` of each other.
pub fn coincidence_violations(result: &UnfoldResult, min_plane_mm: f64, max_world_mm: f64) -> usize {
    let cell = max_world_mm.max(1e-9);
    let key = |x: &WorldPoint| {
        (
            (x.x / cell).floor() as i64,
            (x.y / cell).floor() as i64,
            (x.z / cell).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (p, x) in result.coords.iter().enumerate() {
        grid.entry(key(x)).or_default().push(p);
    }
    let delta = result.pixel_spacing_mm;
    let w = result.width;
    let far = |a: usize, b: usize| {
        let di = (a % w) as f64 - (b % w) as f64;
        let dj = (a / w) as f64 - (b / w) as f64;
        delta * (di * di + dj * dj).sqrt() >= min_plane_mm
    };
    (0..result.len())
        .into_par_iter()
        .map(|a| {
            let xa = &result.coords[a];
            let (ci, cj, ck) = key(xa);
            let mut n = 0;
            for di in -1..=1 {
                for dj in -1..=1 {
                    for dk in -1..=1 {
                        if let Some(list) = grid.get(&(ci + di, cj + dj, ck + dk)) {
                            n += list
                                .iter()
                                .filter(|&&b| b > a && (result.coords[b] - xa).norm() <= max_world_mm && far(a, b))
                                .count();
                        }
                    }
                }
            }
            n
        })
        .sum()
}

/// Metric names follow the rows of the evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub distortion_max: f64,
    pub distortion_mean: f64,
    pub distortion_median: f64,
    pub distortion_std_dev: f64,
    pub distance_mean: f64,
    pub distance_median: f64,
    pub distance_std_dev: f64,
    pub relevant_pixel_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_coverage_cm2: Option<f64>,
}

pub fn compute_metrics(
    result: &UnfoldResult,
    targets: &[WorldPoint],
    radius_mm: f64,
    mask: Option<&Volume>,
) -> Result<MetricsRecord> {
    let d = distortion_stats(result, targets, radius_mm)?;
    let t = distance_stats(result, targets);
    Ok(MetricsRecord {
        distortion_max: d.summary.max,
        distortion_mean: d.summary.mean,
        distortion_median: d.summary.median,
        distortion_std_dev: d.summary.std_dev,
        distance_mean: t.summary.mean,
        distance_median: t.summary.median,
        distance_std_dev: t.summary.std_dev,
        relevant_pixel_count: d.relevant_pixel_count,
        mask_coverage_cm2: mask.map(|m| mask_coverage(result, m)).transpose()?,
    })
}

impl MetricsRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| UnfoldError::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| UnfoldError::io(path, e))
    }
}

/// Linear windowing to 16 bits with half-up rounding.
pub fn window_u16(value: f64, window: [f64; 2]) -> u16 {
    let t = ((value - window[0]) / (window[1] - window[0])).clamp(0.0, 1.0);
    (t * 65535.0 + 0.5).floor() as u16
}

/// Binary 16-bit PGM, big-endian samples.
pub fn pgm16_bytes(result: &UnfoldResult, window: [f64; 2]) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", result.width, result.height).into_bytes();
    out.reserve(2 * result.len());
    for v in &result.intensity {
        out.extend_from_slice(&window_u16(*v, window).to_be_bytes());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub dims: Vec<usize>,
    pub role: String,
    pub dtype: String,
    pub data: String,
}

/// Writes `<dir>/<role>.raw` (little-endian f32) and `<dir>/<role>.json`.
pub fn write_raw_f32(dir: &Path, role: &str, dims: Vec<usize>, values: impl Iterator<Item = f64>) -> Result<()> {
    let raw_name = format!("{role}.raw");
    let raw_path = dir.join(&raw_name);
    let bytes: Vec<u8> = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
    std::fs::write(&raw_path, bytes).map_err(|e| UnfoldError::io(&raw_path, e))?;
    let sidecar = RawSidecar {
        dims,
        role: role.into(),
        dtype: "f32le".into(),
        data: raw_name,
    };
    let json_path = dir.join(format!("{role}.json"));
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| UnfoldError::json(&json_path, e))?;
    std::fs::write(&json_path, text + "\n").map_err(|e| UnfoldError::io(&json_path, e))
}

/// Writes `unfolded.pgm`, the raw intensity and the optional maps into `dir`.
pub fn write_outputs(result: &UnfoldResult, dir: &Path, cfg: &RenderConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| UnfoldError::io(dir, e))?;
    let pgm = dir.join("unfolded.pgm");
    let mut f = std::fs::File::create(&pgm).map_err(|e| UnfoldError::io(&pgm, e))?;
    f.write_all(&pgm16_bytes(result, cfg.window))
        .map_err(|e| UnfoldError::io(&pgm, e))?;
    let (h, w) = (result.height, result.width);
    write_raw_f32(dir, "intensity", vec![h, w], result.intensity.iter().copied())?;
    if cfg.emit_coordinate_map {
        write_raw_f32(dir, "coords", vec![h, w, 3], result.coords.iter().flat_map(|c| [c.x, c.y, c.z]))?;
    }
    if cfg.emit_distortion_map {
        write_raw_f32(dir, "distortion", vec![h, w], result.distortion.iter().copied())?;
    }
    Ok(())
}
