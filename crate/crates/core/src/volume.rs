//! Volumetric scalar grids in world (mm) coordinates.
//!
//! Voxel `(i, j, k)` has its center at `origin + (i, j, k) * spacing`. Data is
//! stored x-fastest, then y, then z. Sampling is trilinear inside the hull of
//! voxel centers and returns the background value outside of it.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UnfoldError};

/// A point in world coordinates, in mm.
pub type WorldPoint = Vector3<f64>;

/// What a volume's voxel values mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    Intensity,
    Mask,
    Weight,
}

/// Shape and placement of a voxel grid, without data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
}

impl GridSpec {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], origin_mm: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&n| n < 2) {
            return Err(UnfoldError::InvalidVolume(format!(
                "all dims must be >= 2, got {dims:?}"
            )));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(UnfoldError::InvalidVolume(format!(
                "spacing must be positive, got {spacing_mm:?}"
            )));
        }
        if origin_mm.iter().any(|o| !o.is_finite()) {
            return Err(UnfoldError::InvalidVolume("origin must be finite".into()));
        }
        Ok(GridSpec {
            dims,
            spacing_mm,
            origin_mm,
        })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn world_of(&self, i: usize, j: usize, k: usize) -> WorldPoint {
        WorldPoint::new(
            self.origin_mm[0] + i as f64 * self.spacing_mm[0],
            self.origin_mm[1] + j as f64 * self.spacing_mm[1],
            self.origin_mm[2] + k as f64 * self.spacing_mm[2],
        )
    }

    /// Fractional voxel index of a world point.
    #[inline]
    pub fn continuous_index(&self, p: &WorldPoint) -> [f64; 3] {
        [
            (p.x - self.origin_mm[0]) / self.spacing_mm[0],
            (p.y - self.origin_mm[1]) / self.spacing_mm[1],
            (p.z - self.origin_mm[2]) / self.spacing_mm[2],
        ]
    }

    /// World position of the last voxel center.
    pub fn max_corner(&self) -> WorldPoint {
        self.world_of(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1)
    }

    #[inline]
    fn in_hull(&self, q: &[f64; 3]) -> bool {
        (0..3).all(|a| q[a] >= 0.0 && q[a] <= (self.dims[a] - 1) as f64)
    }
}

/// A scalar volume. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: GridSpec,
    data: Vec<f64>,
    kind: VolumeKind,
    background: f64,
}

impl Volume {
    pub fn new(grid: GridSpec, data: Vec<f64>, kind: VolumeKind) -> Result<Self> {
        let grid = GridSpec::new(grid.dims, grid.spacing_mm, grid.origin_mm)?;
        if data.len() != grid.len() {
            return Err(UnfoldError::InvalidVolume(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        if kind == VolumeKind::Mask && data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(UnfoldError::NonBinaryMask);
        }
        Ok(Volume {
            grid,
            data,
            kind,
            background: 0.0,
        })
    }

    /// Builds a volume by evaluating `f` at every voxel center.
    pub fn from_fn(
        grid: GridSpec,
        kind: VolumeKind,
        mut f: impl FnMut(WorldPoint) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    data.push(f(grid.world_of(i, j, k)));
                }
            }
        }
        Volume::new(grid, data, kind)
    }

    pub fn with_background(mut self, background: f64) -> Self {
        self.background = background;
        self
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn background(&self) -> f64 {
        self.background
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.linear_index(i, j, k)]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Locates the interpolation cell: lower corner index and fractional offsets.
    #[inline]
    fn cell(&self, q: &[f64; 3]) -> ([usize; 3], [f64; 3]) {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let hi = self.grid.dims[a] - 2;
            let i0 = (q[a].floor().max(0.0) as usize).min(hi);
            base[a] = i0;
            frac[a] = q[a] - i0 as f64;
        }
        (base, frac)
    }

    #[inline]
    fn corners(&self, base: [usize; 3]) -> [f64; 8] {
        let [i, j, k] = base;
        [
            self.get(i, j, k),
            self.get(i + 1, j, k),
            self.get(i, j + 1, k),
            self.get(i + 1, j + 1, k),
            self.get(i, j, k + 1),
            self.get(i + 1, j, k + 1),
            self.get(i, j + 1, k + 1),
            self.get(i + 1, j + 1, k + 1),
        ]
    }

    /// Trilinear interpolation at `p`; background outside the voxel-center hull.
    pub fn sample(&self, p: &WorldPoint) -> f64 {
        let q = self.grid.continuous_index(p);
        if !self.grid.in_hull(&q) {
            return self.background;
        }
        let (base, [fx, fy, fz]) = self.cell(&q);
        let c = self.corners(base);
        let c00 = c[0] + fx * (c[1] - c[0]);
        let c10 = c[2] + fx * (c[3] - c[2]);
        let c01 = c[4] + fx * (c[5] - c[4]);
        let c11 = c[6] + fx * (c[7] - c[6]);
        let c0 = c00 + fy * (c10 - c00);
        let c1 = c01 + fy * (c11 - c01);
        c0 + fz * (c1 - c0)
    }

    /// Analytic spatial gradient of the trilinear interpolant, in value/mm.
    /// Zero outside the voxel-center hull.
    pub fn gradient(&self, p: &WorldPoint) -> Vector3<f64> {
        self.sample_with_gradient(p).1
    }

    /// Value and gradient in one pass.
    pub fn sample_with_gradient(&self, p: &WorldPoint) -> (f64, Vector3<f64>) {
        let q = self.grid.continuous_index(p);
        if !self.grid.in_hull(&q) {
            return (self.background, Vector3::zeros());
        }
        let (base, [fx, fy, fz]) = self.cell(&q);
        let c = self.corners(base);
        let c00 = c[0] + fx * (c[1] - c[0]);
        let c10 = c[2] + fx * (c[3] - c[2]);
        let c01 = c[4] + fx * (c[5] - c[4]);
        let c11 = c[6] + fx * (c[7] - c[6]);
        let c0 = c00 + fy * (c10 - c00);
        let c1 = c01 + fy * (c11 - c01);
        let value = c0 + fz * (c1 - c0);

        let dz = c1 - c0;
        let dy = (1.0 - fz) * (c10 - c00) + fz * (c11 - c01);
        let dx0 = (1.0 - fy) * (c[1] - c[0]) + fy * (c[3] - c[2]);
        let dx1 = (1.0 - fy) * (c[5] - c[4]) + fy * (c[7] - c[6]);
        let dx = (1.0 - fz) * dx0 + fz * dx1;
        let s = self.grid.spacing_mm;
        (value, Vector3::new(dx / s[0], dy / s[1], dz / s[2]))
    }

    pub fn load(sidecar: &Path, kind: VolumeKind) -> Result<Self> {
        let text = fs::read_to_string(sidecar).map_err(|e| UnfoldError::io(sidecar, e))?;
        let header: VolumeHeader =
            serde_json::from_str(&text).map_err(|e| UnfoldError::json(sidecar, e))?;
        if header.dtype != "f32le" {
            return Err(UnfoldError::Parse {
                path: sidecar.to_path_buf(),
                line: 1,
                message: format!("unsupported dtype `{}`", header.dtype),
            });
        }
        let raw_path = sidecar
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&header.data);
        let bytes = fs::read(&raw_path).map_err(|e| UnfoldError::io(&raw_path, e))?;
        let grid = GridSpec::new(header.dims, header.spacing_mm, header.origin_mm)?;
        if bytes.len() != grid.len() * 4 {
            return Err(UnfoldError::Parse {
                path: raw_path,
                line: 0,
                message: format!(
                    "expected {} bytes for dims {:?}, found {}",
                    grid.len() * 4,
                    grid.dims,
                    bytes.len()
                ),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Volume::new(grid, data, kind)
    }

    /// Writes `<stem>.json` and `<stem>.raw` next to each other.
    pub fn save(&self, sidecar: &Path) -> Result<()> {
        let raw_name = sidecar
            .with_extension("raw")
            .file_name()
            .map(PathBuf::from)
            .ok_or_else(|| UnfoldError::InvalidArgument("sidecar path has no file name".into()))?;
        let raw_path = sidecar.with_extension("raw");
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(&raw_path, bytes).map_err(|e| UnfoldError::io(&raw_path, e))?;
        let header = VolumeHeader {
            dims: self.grid.dims,
            spacing_mm: self.grid.spacing_mm,
            origin_mm: self.grid.origin_mm,
            dtype: "f32le".into(),
            data: raw_name.to_string_lossy().into_owned(),
        };
        let text = serde_json::to_string_pretty(&header).map_err(|e| UnfoldError::json(sidecar, e))?;
        fs::write(sidecar, text).map_err(|e| UnfoldError::io(sidecar, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    dtype: String,
    data: String,
}

/// Marks the voxel nearest to each point.
pub fn rasterize_points(points: &[WorldPoint], grid: &GridSpec) -> Result<Volume> {
    let mut data = vec![0.0; grid.len()];
    for (index, p) in points.iter().enumerate() {
        let q = grid.continuous_index(p);
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = q[a].round();
            if !r.is_finite() || r < 0.0 || r > (grid.dims[a] - 1) as f64 {
                return Err(UnfoldError::TargetOutsideGrid {
                    index,
                    x: p.x,
                    y: p.y,
                    z: p.z,
                });
            }
            idx[a] = r as usize;
        }
        data[grid.linear_index(idx[0], idx[1], idx[2])] = 1.0;
    }
    Volume::new(*grid, data, VolumeKind::Mask)
}

/// Exact Euclidean distance transform in mm to the nearest foreground voxel
/// center, by separable lower envelopes of parabolas along each axis.
pub fn edt(mask: &Volume) -> Result<Volume> {
    let grid = *mask.grid();
    if !mask.data().iter().any(|&v| v != 0.0) {
        return Err(UnfoldError::EmptyMask);
    }
    let mut sq: Vec<f64> = mask
        .data()
        .iter()
        .map(|&v| if v != 0.0 { 0.0 } else { f64::INFINITY })
        .collect();
    let [nx, ny, nz] = grid.dims;
    let longest = nx.max(ny).max(nz);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut scratch = EnvelopeScratch::new(longest);

    for axis in 0..3 {
        let n = grid.dims[axis];
        let spacing = grid.spacing_mm[axis];
        let (stride, outer): (usize, Vec<usize>) = match axis {
            0 => (
                1,
                (0..nz)
                    .flat_map(|k| (0..ny).map(move |j| grid.linear_index(0, j, k)))
                    .collect(),
            ),
            1 => (
                nx,
                (0..nz)
                    .flat_map(|k| (0..nx).map(move |i| grid.linear_index(i, 0, k)))
                    .collect(),
            ),
            _ => (
                nx * ny,
                (0..ny)
                    .flat_map(|j| (0..nx).map(move |i| grid.linear_index(i, j, 0)))
                    .collect(),
            ),
        };
        for start in outer {
            for t in 0..n {
                line[t] = sq[start + t * stride];
            }
            lower_envelope(&line[..n], spacing, &mut out[..n], &mut scratch);
            for t in 0..n {
                sq[start + t * stride] = out[t];
            }
        }
    }
    let data = sq.into_iter().map(f64::sqrt).collect();
    Volume::new(grid, data, VolumeKind::Weight)
}

struct EnvelopeScratch {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl EnvelopeScratch {
    fn new(n: usize) -> Self {
        EnvelopeScratch {
            sites: vec![0; n],
            bounds: vec![0.0; n + 1],
        }
    }
}

/// 1D squared-distance transform: `out[p] = min_q (spacing*(p-q))^2 + f[q]`.
fn lower_envelope(f: &[f64], spacing: f64, out: &mut [f64], scratch: &mut EnvelopeScratch) {
    let n = f.len();
    let pos = |i: usize| i as f64 * spacing;
    let sites = &mut scratch.sites;
    let bounds = &mut scratch.bounds;

    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                sites[0] = q;
                bounds[0] = f64::NEG_INFINITY;
                bounds[1] = f64::INFINITY;
                break;
            }
            let v = sites[k as usize];
            let (pq, pv) = (pos(q), pos(v));
            let s = ((f[q] + pq * pq) - (f[v] + pv * pv)) / (2.0 * (pq - pv));
            if s <= bounds[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            sites[k as usize] = q;
            bounds[k as usize] = s;
            bounds[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (p, o) in out.iter_mut().enumerate() {
        let x = pos(p);
        while bounds[j + 1] < x {
            j += 1;
        }
        let q = sites[j];
        let d = (p as f64 - q as f64) * spacing;
        *o = d * d + f[q];
    }
}

/// Importance weights from a distance map:
/// `(|min(dist - alpha, 0)| + beta) / (alpha + beta)`.
pub fn importance_volume(dist: &Volume, alpha: f64, beta: f64) -> Result<Volume> {
    if !(alpha > 0.0) || !(beta >= 0.0) {
        return Err(UnfoldError::InvalidArgument(format!(
            "importance weighting needs alpha > 0 and beta >= 0 (alpha={alpha}, beta={beta})"
        )));
    }
    let data = dist
        .data()
        .iter()
        .map(|&e| importance_weight(e, alpha, beta))
        .collect();
    Ok(Volume::new(*dist.grid(), data, VolumeKind::Weight)?.with_background(beta / (alpha + beta)))
}

#[inline]
pub fn importance_weight(dist: f64, alpha: f64, beta: f64) -> f64 {
    ((dist - alpha).min(0.0).abs() + beta) / (alpha + beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize, spacing: [f64; 3]) -> GridSpec {
        GridSpec::new([n, n, n], spacing, [-3.0, 1.0, 2.5]).unwrap()
    }

    #[test]
    fn constant_volume_samples_constant() {
        let g = grid(5, [1.0, 2.0, 0.5]);
        let v = Volume::from_fn(g, VolumeKind::Intensity, |_| 7.0).unwrap();
        let p = g.world_of(1, 2, 3) + WorldPoint::new(0.3, 0.7, 0.1);
        assert_eq!(v.sample(&p), 7.0);
        assert_eq!(v.gradient(&p), Vector3::zeros());
    }

    #[test]
    fn trilinear_polynomial_reproduced_at_half_index() {
        let g = grid(4, [1.5, 1.0, 2.0]);
        let (a, b, c, d) = (1.0, 2.0, -3.0, 0.5);
        let mut data = vec![0.0; g.len()];
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    data[g.linear_index(i, j, k)] = a + b * i as f64 + c * j as f64 + d * k as f64;
                }
            }
        }
        let v = Volume::new(g, data, VolumeKind::Intensity).unwrap();
        let p = g.world_of(0, 0, 0) + WorldPoint::new(0.75, 0.5, 1.0);
        assert!((v.sample(&p) - (a + 0.5 * (b + c + d))).abs() < 1e-12);
    }

    #[test]
    fn ramp_gradient_respects_spacing() {
        let g = GridSpec::new([6, 4, 4], [2.0, 1.0, 1.0], [0.0; 3]).unwrap();
        let v = Volume::from_fn(g, VolumeKind::Intensity, |p| p.x / 2.0).unwrap();
        let grad = v.gradient(&WorldPoint::new(3.3, 1.2, 2.7));
        assert!((grad - Vector3::new(0.5, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn outside_hull_is_background_with_zero_gradient() {
        let g = grid(4, [1.0; 3]);
        let v = Volume::from_fn(g, VolumeKind::Intensity, |p| p.x)
            .unwrap()
            .with_background(-1.0);
        let p = g.world_of(3, 1, 1) + WorldPoint::new(1e-9, 0.0, 0.0);
        assert_eq!(v.sample(&p), -1.0);
        assert_eq!(v.gradient(&p), Vector3::zeros());
        // the hull boundary itself is inside
        assert!((v.sample(&g.world_of(3, 1, 1)) - g.world_of(3, 1, 1).x).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = grid(8, [1.0, 0.7, 1.3]);
        let v = Volume::from_fn(g, VolumeKind::Intensity, |_| rng.gen_range(-5.0..5.0)).unwrap();
        let h = 1e-5;
        for _ in 0..100 {
            let p = g.world_of(0, 0, 0)
                + WorldPoint::new(
                    rng.gen_range(0.5..6.5) * 1.0,
                    rng.gen_range(0.5..6.5) * 0.7,
                    rng.gen_range(0.5..6.5) * 1.3,
                );
            let q = g.continuous_index(&p);
            // FD across a cell face is not differentiable
            if q.iter().any(|c| (c - c.round()).abs() < 1e-4) {
                continue;
            }
            let grad = v.gradient(&p);
            for a in 0..3 {
                let mut e = WorldPoint::zeros();
                e[a] = h;
                let fd = (v.sample(&(p + e)) - v.sample(&(p - e))) / (2.0 * h);
                assert!((fd - grad[a]).abs() < 1e-6, "axis {a}: fd {fd} vs {}", grad[a]);
            }
        }
    }

    #[test]
    fn rasterize_single_and_duplicate_points() {
        let g = grid(6, [1.0; 3]);
        let p = g.world_of(2, 3, 4);
        let m = rasterize_points(&[p], &g).unwrap();
        assert_eq!(m.data().iter().sum::<f64>(), 1.0);
        assert_eq!(m.get(2, 3, 4), 1.0);
        let m2 = rasterize_points(&[p, p + WorldPoint::new(0.2, -0.1, 0.3)], &g).unwrap();
        assert_eq!(m2.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn rasterize_rejects_outside_point() {
        let g = grid(6, [1.0; 3]);
        let bad = g.world_of(5, 5, 5) + WorldPoint::new(0.6, 0.0, 0.0);
        match rasterize_points(&[g.world_of(0, 0, 0), bad], &g) {
            Err(UnfoldError::TargetOutsideGrid { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn edt_three_four_five() {
        let g = GridSpec::new([6, 6, 2], [1.0; 3], [0.0; 3]).unwrap();
        let m = rasterize_points(&[g.world_of(0, 0, 0)], &g).unwrap();
        let d = edt(&m).unwrap();
        assert_eq!(d.get(3, 4, 0), 5.0);
    }

    #[test]
    fn edt_full_and_empty_masks() {
        let g = grid(4, [1.0; 3]);
        let full = Volume::from_fn(g, VolumeKind::Mask, |_| 1.0).unwrap();
        assert!(edt(&full).unwrap().data().iter().all(|&v| v == 0.0));
        let empty = Volume::from_fn(g, VolumeKind::Mask, |_| 0.0).unwrap();
        assert!(matches!(edt(&empty), Err(UnfoldError::EmptyMask)));
    }

    #[test]
    fn edt_anisotropic_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = GridSpec::new([9, 7, 8], [0.8, 1.7, 1.1], [0.0; 3]).unwrap();
        let m = Volume::from_fn(g, VolumeKind::Mask, |_| {
            if rng.gen_bool(0.03) {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let d = edt(&m).unwrap();
        let fg: Vec<WorldPoint> = (0..g.len())
            .filter(|&l| m.data()[l] == 1.0)
            .map(|l| {
                let i = l % 9;
                let j = (l / 9) % 7;
                let k = l / 63;
                g.world_of(i, j, k)
            })
            .collect();
        for k in 0..8 {
            for j in 0..7 {
                for i in 0..9 {
                    let p = g.world_of(i, j, k);
                    let best = fg.iter().map(|f| (f - p).norm()).fold(f64::INFINITY, f64::min);
                    assert!((d.get(i, j, k) - best).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn importance_formula_values() {
        assert_eq!(importance_weight(0.0, 30.0, 0.1), 1.0);
        assert!((importance_weight(50.0, 30.0, 0.1) - 0.1 / 30.1).abs() < 1e-15);
        assert!((importance_weight(15.0, 30.0, 0.1) - 15.1 / 30.1).abs() < 1e-15);
        assert!((importance_weight(15.0, 30.0, 0.1) - 0.50166).abs() < 1e-5);
    }

    #[test]
    fn importance_rejects_bad_parameters() {
        let g = grid(3, [1.0; 3]);
        let d = Volume::from_fn(g, VolumeKind::Weight, |_| 1.0).unwrap();
        assert!(importance_volume(&d, 0.0, 0.1).is_err());
        assert!(importance_volume(&d, 10.0, -0.1).is_err());
    }

    #[test]
    fn mask_must_be_binary() {
        let g = grid(3, [1.0; 3]);
        assert!(matches!(
            Volume::from_fn(g, VolumeKind::Mask, |_| 0.5),
            Err(UnfoldError::NonBinaryMask)
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridSpec::new([3, 4, 5], [1.0, 0.5, 2.0], [1.0, -2.0, 0.0]).unwrap();
        let v = Volume::from_fn(g, VolumeKind::Intensity, |p| p.x + 2.0 * p.y - p.z).unwrap();
        let path = dir.path().join("vol.json");
        v.save(&path).unwrap();
        let raw = std::fs::read(dir.path().join("vol.raw")).unwrap();
        assert_eq!(raw.len(), 60 * 4);
        assert_eq!(&raw[..4], &(v.data()[0] as f32).to_le_bytes());
        let back = Volume::load(&path, VolumeKind::Intensity).unwrap();
        assert_eq!(back.dims(), [3, 4, 5]);
        for (a, b) in back.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        let header: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(header["dtype"], "f32le");
        assert_eq!(header["data"], "vol.raw");
    }

    proptest::proptest! {
        #[test]
        fn importance_monotone_and_bounded(d1 in 0.0f64..100.0, d2 in 0.0f64..100.0,
                                           alpha in 0.5f64..50.0, beta in 0.0f64..1.0) {
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            let a = importance_weight(lo, alpha, beta);
            let b = importance_weight(hi, alpha, beta);
            proptest::prop_assert!(a >= b);
            proptest::prop_assert!(b >= beta / (alpha + beta) && a <= 1.0);
            if beta > 0.0 { proptest::prop_assert!(b > 0.0); }
        }
    }
}
