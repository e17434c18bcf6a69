//! Synthetic tube phantoms with analytic centerlines.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UnfoldError};
use crate::geometry::TargetSet;
use crate::volume::{GridSpec, Volume, VolumeKind, WorldPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    PlanarSine,
    Helix,
    BifurcationY,
    Ring,
    OrganEllipsoid,
}

impl std::str::FromStr for PhantomKind {
    type Err = UnfoldError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| UnfoldError::InvalidArgument(format!("unknown phantom kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub tube_radius_mm: f64,
    pub tube_intensity: f64,
    pub background: f64,
    pub noise_sigma: f64,
    pub centerline_samples: usize,
    pub helix_radius_mm: f64,
    pub helix_pitch_mm: f64,
    pub helix_turns: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            kind: PhantomKind::Helix,
            dims: [128, 128, 128],
            spacing_mm: [1.0; 3],
            tube_radius_mm: 2.0,
            tube_intensity: 300.0,
            background: 0.0,
            noise_sigma: 0.0,
            centerline_samples: 200,
            helix_radius_mm: 20.0,
            helix_pitch_mm: 40.0,
            helix_turns: 1.5,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn new(kind: PhantomKind) -> Self {
        PhantomSpec {
            kind,
            ..PhantomSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let max_spacing = self.spacing_mm.iter().copied().fold(0.0, f64::max);
        if !(self.tube_radius_mm >= max_spacing) {
            return Err(UnfoldError::InvalidArgument(
                "tube radius must be at least the voxel spacing".into(),
            ));
        }
        if self.centerline_samples < 50 {
            return Err(UnfoldError::InvalidArgument(
                "centerline_samples must be >= 50".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(UnfoldError::InvalidArgument("noise_sigma must be >= 0".into()));
        }
        GridSpec::new(self.dims, self.spacing_mm, [0.0; 3]).map(|_| ())
    }

    fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.dims, self.spacing_mm, [0.0; 3])
    }

    /// World position of the central voxel.
    fn center(&self) -> Result<WorldPoint> {
        Ok(self.grid()?.world_of(self.dims[0] / 2, self.dims[1] / 2, self.dims[2] / 2))
    }

    fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.dims[a] as f64 * self.spacing_mm[a])
    }
}

/// Ellipsoid of the organ phantom, offset from the centerline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: &WorldPoint) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

type CurveFn = Box<dyn Fn(f64) -> WorldPoint>;

struct Branch {
    f: CurveFn,
    closed: bool,
}

impl Branch {
    fn open(f: impl Fn(f64) -> WorldPoint + 'static) -> Self {
        Branch { f: Box::new(f), closed: false }
    }

    /// Dense parameter table with cumulative arc length.
    fn arc_table(&self, step: f64) -> (Vec<f64>, Vec<f64>) {
        let mut n = 64;
        loop {
            let ts: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
            let pts: Vec<_> = ts.iter().map(|&t| (self.f)(t)).collect();
            let max_chord = pts.windows(2).map(|w| (w[1] - w[0]).norm()).fold(0.0, f64::max);
            if max_chord <= step || n >= 1 << 22 {
                let mut s = vec![0.0];
                for w in pts.windows(2) {
                    s.push(s.last().unwrap() + (w[1] - w[0]).norm());
                }
                return (ts, s);
            }
            n *= 2;
        }
    }

    fn length(&self, step: f64) -> f64 {
        *self.arc_table(step).1.last().unwrap()
    }

    /// `n` parameters equally spaced in arc length; closed curves skip the
    /// duplicate end point.
    fn arc_params(&self, n: usize, skip_first: bool, step: f64) -> Vec<f64> {
        let (ts, s) = self.arc_table(step);
        let total = *s.last().unwrap();
        let slots = if self.closed { n } else if skip_first { n } else { n - 1 };
        let first = usize::from(skip_first && !self.closed);
        (first..first + n)
            .map(|k| {
                let target = total * k as f64 / slots.max(1) as f64;
                let i = s.partition_point(|&v| v < target).clamp(1, s.len() - 1);
                let span = s[i] - s[i - 1];
                let w = if span > 0.0 { (target - s[i - 1]) / span } else { 0.0 };
                if k == 0 {
                    0.0
                } else {
                    ts[i - 1] + w * (ts[i] - ts[i - 1])
                }
            })
            .collect()
    }
}

fn curve_branches(spec: &PhantomSpec) -> Result<Vec<Branch>> {
    let c = spec.center()?;
    let ext = spec.extent();
    let branches = match spec.kind {
        PhantomKind::PlanarSine | PhantomKind::OrganEllipsoid => {
            let half = if spec.kind == PhantomKind::PlanarSine { 0.3 } else { 0.25 } * ext[0];
            let amp = 0.08 * ext[1];
            vec![Branch::open(move |t| {
                let x = -half + 2.0 * half * t;
                c + WorldPoint::new(x, amp * (TAU * x / half).sin(), 0.0)
            })]
        }
        PhantomKind::Helix => {
            let (r, pitch, turns) = (spec.helix_radius_mm, spec.helix_pitch_mm, spec.helix_turns);
            vec![Branch::open(move |t| {
                let a = TAU * turns * t;
                c + WorldPoint::new(r * a.cos(), r * a.sin(), pitch * turns * (t - 0.5))
            })]
        }
        PhantomKind::Ring => {
            let r = 0.25 * ext[0].min(ext[1]);
            vec![Branch {
                f: Box::new(move |t| {
                    let a = TAU * t;
                    c + WorldPoint::new(r * a.cos(), r * a.sin(), 0.1 * r * (2.0 * a).sin())
                }),
                closed: true,
            }]
        }
        PhantomKind::BifurcationY => {
            let s = 0.27 * ext[1];
            let start = c + WorldPoint::new(0.0, -s, 0.0);
            let quad = move |ctrl: WorldPoint, end: WorldPoint| {
                move |t: f64| c * (1.0 - t).powi(2) + ctrl * (2.0 * t * (1.0 - t)) + end * t * t
            };
            vec![
                Branch::open(move |t| start + (c - start) * t),
                Branch::open(quad(c + WorldPoint::new(0.0, 0.4 * s, 0.0), c + WorldPoint::new(-0.7 * s, 0.85 * s, 0.25 * s))),
                Branch::open(quad(c + WorldPoint::new(0.0, 0.4 * s, 0.0), c + WorldPoint::new(0.7 * s, 0.85 * s, -0.25 * s))),
            ]
        }
    };
    Ok(branches)
}

fn organ_ellipsoid(spec: &PhantomSpec) -> Result<Ellipsoid> {
    let c = spec.center()?;
    let ext = spec.extent();
    // flat organ beyond the vessel's end, lying just off the vessel plane
    let semi_axes = [0.09 * ext[0], 0.11 * ext[1], 0.03 * ext[2]];
    Ok(Ellipsoid {
        center: [c.x + 0.37 * ext[0], c.y, c.z + 0.8 * semi_axes[2]],
        semi_axes,
    })
}

/// Generated phantom volume, targets and optional organ mask.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub volume: Volume,
    pub targets: TargetSet,
    pub mask: Option<Volume>,
    pub ellipsoid: Option<Ellipsoid>,
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let grid = spec.grid()?;
    let branches = curve_branches(spec)?;
    let step = spec.spacing_mm.iter().copied().fold(f64::INFINITY, f64::min) / 4.0;

    let lengths: Vec<f64> = branches.iter().map(|b| b.length(step)).collect();
    let total: f64 = lengths.iter().sum();
    let n = spec.centerline_samples;
    let mut counts: Vec<usize> = lengths.iter().map(|l| ((n as f64) * l / total).round() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let last = counts.len() - 1;
    counts[last] = (counts[last] + n).saturating_sub(assigned);

    let mut targets = Vec::with_capacity(n);
    let mut polyline: Vec<Vec<WorldPoint>> = Vec::new();
    for (b, (branch, &count)) in branches.iter().zip(&counts).enumerate() {
        let params = branch.arc_params(count, b > 0, step);
        targets.extend(params.iter().map(|&t| (branch.f)(t)));
        // dense vertices including every target and the branch ends
        let mut knots = params.clone();
        knots.insert(0, 0.0);
        knots.push(1.0);
        knots.sort_by(f64::total_cmp);
        knots.dedup();
        let mut line = Vec::new();
        for w in knots.windows(2) {
            let (a, e) = ((branch.f)(w[0]), (branch.f)(w[1]));
            let pieces = (((e - a).norm() / step).ceil() as usize).max(1) * 2;
            for k in 0..pieces {
                line.push((branch.f)(w[0] + (w[1] - w[0]) * k as f64 / pieces as f64));
            }
        }
        line.push((branch.f)(1.0));
        polyline.push(line);
    }

    let margin = 2.0 * spec.tube_radius_mm;
    let hi = grid.max_corner();
    let lo = WorldPoint::from(grid.origin_mm);
    for line in &polyline {
        for p in line {
            if (0..3).any(|a| p[a] - lo[a] < margin || hi[a] - p[a] < margin) {
                return Err(UnfoldError::CurveOutsideVolume(format!(
                    "point ({:.2}, {:.2}, {:.2}) mm is within {margin} mm of the boundary",
                    p.x, p.y, p.z
                )));
            }
        }
    }

    let sigma = spec.tube_radius_mm / 2.0;
    let cutoff = 6.0 * sigma;
    let mut dist2 = vec![f64::INFINITY; grid.len()];
    for line in &polyline {
        for seg in line.windows(2) {
            splat_segment(&grid, seg[0], seg[1], cutoff, &mut dist2);
        }
    }
    let amp = spec.tube_intensity - spec.background;
    let mut data: Vec<f64> = dist2
        .iter()
        .map(|&d2| spec.background + if d2.is_finite() { amp * (-d2 / (2.0 * sigma * sigma)).exp() } else { 0.0 })
        .collect();
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
        data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let volume = Volume::new(grid, data, VolumeKind::Intensity)?.with_background(spec.background);

    let (mask, ellipsoid) = if spec.kind == PhantomKind::OrganEllipsoid {
        let e = organ_ellipsoid(spec)?;
        for a in 0..3 {
            if e.center[a] - e.semi_axes[a] < lo[a] || e.center[a] + e.semi_axes[a] > hi[a] {
                return Err(UnfoldError::CurveOutsideVolume("organ ellipsoid leaves the volume".into()));
            }
        }
        let m = Volume::from_fn(grid, VolumeKind::Mask, |p| f64::from(u8::from(e.contains(&p))))?;
        (Some(m), Some(e))
    } else {
        (None, None)
    };

    Ok(Phantom {
        spec: spec.clone(),
        volume,
        targets: TargetSet::new(targets)?,
        mask,
        ellipsoid,
    })
}

fn splat_segment(grid: &GridSpec, a: WorldPoint, b: WorldPoint, cutoff: f64, dist2: &mut [f64]) {
    let lo_w = a.inf(&b).add_scalar(-cutoff);
    let hi_w = a.sup(&b).add_scalar(cutoff);
    let lo_i = grid.continuous_index(&lo_w);
    let hi_i = grid.continuous_index(&hi_w);
    let range = |ax: usize| {
        let l = lo_i[ax].ceil().max(0.0) as usize;
        let h = (hi_i[ax].floor() as i64).min(grid.dims[ax] as i64 - 1);
        (l, h)
    };
    let (ri, rj, rk) = (range(0), range(1), range(2));
    let ab = b - a;
    let len2 = ab.norm_squared();
    let c2 = cutoff * cutoff;
    for k in rk.0 as i64..=rk.1 {
        for j in rj.0 as i64..=rj.1 {
            for i in ri.0 as i64..=ri.1 {
                let (i, j, k) = (i as usize, j as usize, k as usize);
                let p = grid.world_of(i, j, k);
                let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let d2 = (p - (a + ab * t)).norm_squared();
                if d2 <= c2 {
                    let idx = grid.linear_index(i, j, k);
                    if d2 < dist2[idx] {
                        dist2[idx] = d2;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: PhantomSpec,
    pub volume: PathBuf,
    pub targets: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ellipsoid: Option<Ellipsoid>,
}

impl Phantom {
    /// Writes `volume.json/.raw`, `targets.csv`, optional `mask.json/.raw`
    /// and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        std::fs::create_dir_all(dir).map_err(|e| UnfoldError::io(dir, e))?;
        self.volume.save(&dir.join("volume.json"))?;
        self.targets.save_csv(&dir.join("targets.csv"))?;
        let mask = match &self.mask {
            Some(m) => {
                m.save(&dir.join("mask.json"))?;
                Some(PathBuf::from("mask.json"))
            }
            None => None,
        };
        let manifest = Manifest {
            spec: self.spec.clone(),
            volume: "volume.json".into(),
            targets: "targets.csv".into(),
            mask,
            ellipsoid: self.ellipsoid,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| UnfoldError::json(&path, e))?;
        std::fs::write(&path, text + "\n").map_err(|e| UnfoldError::io(&path, e))?;
        Ok(manifest)
    }
}

/// Removes one contiguous run of `round(fraction * N)` targets at a seeded
/// position. Returns `(kept, removed)`.
pub fn drop_segment(targets: &TargetSet, fraction: f64, seed: u64) -> Result<(TargetSet, TargetSet)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(UnfoldError::InvalidArgument("fraction must lie in (0, 1)".into()));
    }
    let n = targets.len();
    let count = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.gen_range(0..=n - count);
    let pts = targets.points();
    let removed = pts[start..start + count].to_vec();
    let kept = pts[..start].iter().chain(&pts[start + count..]).copied().collect();
    Ok((TargetSet::new(kept)?, TargetSet::new(removed)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::fit_plane_frame;
    use nalgebra::{Matrix3, SymmetricEigen};

    fn small(kind: PhantomKind) -> PhantomSpec {
        PhantomSpec {
            kind,
            dims: [64, 64, 64],
            centerline_samples: 80,
            helix_radius_mm: 10.0,
            helix_pitch_mm: 20.0,
            ..PhantomSpec::default()
        }
    }

    fn eigenvalues(pts: &[WorldPoint]) -> [f64; 3] {
        let n = pts.len() as f64;
        let mean = pts.iter().sum::<WorldPoint>() / n;
        let cov = pts.iter().fold(Matrix3::zeros(), |acc, p| acc + (p - mean) * (p - mean).transpose()) / n;
        let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        [ev[0], ev[1], ev[2]]
    }

    #[test]
    fn helix_peak_and_counts() {
        let spec = PhantomSpec::new(PhantomKind::Helix);
        let ph = generate(&spec).unwrap();
        assert_eq!(ph.targets.len(), 200);
        // first target sits on a voxel center
        let t0 = ph.targets.points()[0];
        assert_eq!(t0, WorldPoint::new(84.0, 64.0, 34.0));
        assert!((ph.volume.get(84, 64, 34) - 300.0).abs() < 1e-9);
        for t in ph.targets.points() {
            assert!(ph.volume.sample(t) > 150.0);
        }
        let ev = eigenvalues(ph.targets.points());
        assert!(ev[2] > 0.05 * ev[0]);
    }

    #[test]
    fn centerline_intensity_exact_at_voxel_hits() {
        let ph = generate(&small(PhantomKind::Helix)).unwrap();
        let g = ph.volume.grid();
        let mut hits = 0;
        for t in ph.targets.points() {
            let q = g.continuous_index(t);
            if q.iter().all(|c| (c - c.round()).abs() < 1e-12) {
                let v = ph.volume.get(q[0].round() as usize, q[1].round() as usize, q[2].round() as usize);
                assert!((v - 300.0).abs() < 1e-6);
                hits += 1;
            }
        }
        assert!(hits >= 1);
    }

    #[test]
    fn planar_sine_is_coplanar_and_identity_hits() {
        let ph = generate(&PhantomSpec::new(PhantomKind::PlanarSine)).unwrap();
        let z0 = ph.targets.points()[0].z;
        assert!(ph.targets.points().iter().all(|p| p.z == z0));
        let frame = fit_plane_frame(&ph.targets, 2.0).unwrap();
        for t in ph.targets.points() {
            assert!((frame.lift(frame.project(t)) - t).norm() < 1e-9);
        }
    }

    #[test]
    fn ring_and_bifurcation_construct() {
        let ring = generate(&PhantomSpec::new(PhantomKind::Ring)).unwrap();
        assert_eq!(ring.targets.len(), 200);
        let p = ring.targets.points();
        // closed: last sample is not a duplicate of the first
        assert!((p[0] - p[199]).norm() > 0.5);
        let gap = (p[0] - p[1]).norm();
        assert!(((p[199] - p[0]).norm() - gap).abs() < 0.05 * gap);
        let bif = generate(&PhantomSpec::new(PhantomKind::BifurcationY)).unwrap();
        assert_eq!(bif.targets.len(), 200);
        let pts = bif.targets.points();
        for (a, b) in pts.iter().zip(pts.iter().skip(1)) {
            assert!((a - b).norm() > 1e-6);
        }
    }

    #[test]
    fn targets_keep_margin() {
        for kind in [
            PhantomKind::PlanarSine,
            PhantomKind::Helix,
            PhantomKind::BifurcationY,
            PhantomKind::Ring,
            PhantomKind::OrganEllipsoid,
        ] {
            let ph = generate(&PhantomSpec::new(kind)).unwrap();
            let hi = ph.volume.grid().max_corner();
            for t in ph.targets.points() {
                for a in 0..3 {
                    assert!(t[a] >= 4.0 && hi[a] - t[a] >= 4.0, "{kind:?}");
                }
            }
        }
    }

    #[test]
    fn organ_mask_matches_ellipsoid() {
        let ph = generate(&PhantomSpec::new(PhantomKind::OrganEllipsoid)).unwrap();
        let mask = ph.mask.as_ref().unwrap();
        let e = ph.ellipsoid.unwrap();
        assert!(mask.is_binary());
        let g = *mask.grid();
        let mut count = 0;
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                for i in 0..g.dims[0] {
                    let inside = e.contains(&g.world_of(i, j, k));
                    assert_eq!(mask.get(i, j, k) == 1.0, inside);
                    count += usize::from(inside);
                }
            }
        }
        assert!(count > 1000);
        for t in ph.targets.points() {
            assert!(!e.contains(t));
        }
    }

    #[test]
    fn curve_outside_volume_errors() {
        let spec = PhantomSpec { helix_radius_mm: 70.0, ..PhantomSpec::default() };
        assert!(matches!(generate(&spec), Err(UnfoldError::CurveOutsideVolume(_))));
        let bad = PhantomSpec { centerline_samples: 10, ..PhantomSpec::default() };
        assert!(generate(&bad).is_err());
        let thin = PhantomSpec { tube_radius_mm: 0.5, ..PhantomSpec::default() };
        assert!(generate(&thin).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let spec = PhantomSpec { noise_sigma: 5.0, seed: 3, ..small(PhantomKind::Helix) };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.volume.data(), b.volume.data());
        let c = generate(&PhantomSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(a.volume.data(), c.volume.data());
    }

    #[test]
    fn drop_segment_contiguous_split() {
        let pts: Vec<_> = (0..500).map(|i| WorldPoint::new(i as f64, 0.0, 0.0)).collect();
        let t = TargetSet::new(pts.clone()).unwrap();
        let (kept, removed) = drop_segment(&t, 0.2, 9).unwrap();
        assert_eq!(removed.len(), 100);
        assert_eq!(kept.len(), 400);
        let r = removed.points();
        assert!(r.windows(2).all(|w| w[1].x - w[0].x == 1.0));
        let mut all: Vec<f64> = kept.points().iter().chain(r).map(|p| p.x).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, pts.iter().map(|p| p.x).collect::<Vec<_>>());
        let again = drop_segment(&t, 0.2, 9).unwrap();
        assert_eq!(again.1.points(), r);
        assert!(drop_segment(&t, 1.0, 0).is_err());
    }

    #[test]
    fn save_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let ph = generate(&small(PhantomKind::OrganEllipsoid)).unwrap();
        let m = ph.save(dir.path()).unwrap();
        assert_eq!(m.mask.as_deref(), Some(Path::new("mask.json")));
        let back = Volume::load(&dir.path().join("volume.json"), VolumeKind::Intensity).unwrap();
        assert_eq!(back.dims(), [64, 64, 64]);
        let t = TargetSet::load_csv(&dir.path().join("targets.csv")).unwrap();
        assert_eq!(t.len(), 80);
        let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(text.contains("organ_ellipsoid"));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn drop_segment_partitions(n in 50usize..400, frac in 0.05f64..0.95, seed in 0u64..1000) {
            let pts: Vec<_> = (0..n).map(|i| WorldPoint::new(i as f64, 1.0, 2.0)).collect();
            let t = TargetSet::new(pts).unwrap();
            let (kept, removed) = drop_segment(&t, frac, seed).unwrap();
            proptest::prop_assert_eq!(kept.len() + removed.len(), n);
            proptest::prop_assert_eq!(removed.len(), (frac * n as f64).round() as usize);
            let r = removed.points();
            proptest::prop_assert!(r.windows(2).all(|w| w[1].x - w[0].x == 1.0));
        }
    }
}
