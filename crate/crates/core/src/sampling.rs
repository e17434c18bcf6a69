//! Batch generation: importance maps over the unit square, point sampling and
//! multi-scale pair construction.

use std::f64::consts::TAU;

use nalgebra::Vector2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UnfoldError};
use crate::field::NeuralField;
use crate::geometry::PlaneFrame;
use crate::volume::Volume;

/// Second points are kept within this margin around the unit square.
pub const PAIR_DOMAIN: (f64, f64) = (-0.25, 1.25);
pub const PAIR_ATTEMPTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Uniform,
    Importance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub scheme: Scheme,
    pub pairs_per_epoch: usize,
    pub delta_min: f64,
    pub delta_max: f64,
    pub map_resolution: [usize; 2],
    pub map_refresh_epochs: usize,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            scheme: Scheme::Importance,
            pairs_per_epoch: 50_000,
            delta_min: 0.5,
            delta_max: 40.0,
            map_resolution: [64, 64],
            map_refresh_epochs: 100,
            alpha: 30.0,
            beta: 0.1,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(UnfoldError::InvalidArgument(m.to_string()));
        if !(self.delta_min > 0.0 && self.delta_min <= self.delta_max) || !self.delta_max.is_finite() {
            return bad("need 0 < delta_min <= delta_max");
        }
        if self.pairs_per_epoch < 1 {
            return bad("pairs_per_epoch must be >= 1");
        }
        if self.map_resolution.iter().any(|&r| r < 8) {
            return bad("map_resolution must be >= 8 per axis");
        }
        if self.map_refresh_epochs < 1 {
            return bad("map_refresh_epochs must be >= 1");
        }
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return bad("alpha and beta must be positive");
        }
        Ok(())
    }
}

/// Cell weights over `[0,1]^2`, `res[0]` columns along u by `res[1]` rows along v.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    res: [usize; 2],
    values: Vec<f64>,
    cdf: Vec<f64>,
    pub epoch_built: usize,
}

impl ImportanceMap {
    pub fn new(res: [usize; 2], values: Vec<f64>, epoch_built: usize) -> Result<Self> {
        if res[0] == 0 || res[1] == 0 || values.len() != res[0] * res[1] {
            return Err(UnfoldError::InvalidArgument(
                "importance map shape does not match its values".into(),
            ));
        }
        if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(UnfoldError::InvalidArgument(
                "importance map entries must be positive and finite".into(),
            ));
        }
        let mut cdf = Vec::with_capacity(values.len());
        let mut acc = 0.0;
        for v in &values {
            acc += v;
            cdf.push(acc);
        }
        for c in &mut cdf {
            *c /= acc;
        }
        Ok(ImportanceMap {
            res,
            values,
            cdf,
            epoch_built,
        })
    }

    pub fn resolution(&self) -> [usize; 2] {
        self.res
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.res[0] + i]
    }

    /// Center of cell `(i, j)` in normalized plane coordinates.
    pub fn cell_center(res: [usize; 2], i: usize, j: usize) -> Vector2<f64> {
        Vector2::new(
            (i as f64 + 0.5) / res[0] as f64,
            (j as f64 + 0.5) / res[1] as f64,
        )
    }

    /// Normalized probability of each cell.
    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.values.iter().sum();
        self.values.iter().map(|v| v / total).collect()
    }

    fn draw_cell(&self, r: f64) -> usize {
        let idx = self.cdf.partition_point(|&c| c <= r);
        idx.min(self.cdf.len() - 1)
    }
}

/// Pushes the cell centers through the current field and reads `v_e`
/// at the deformed positions.
pub fn build_importance_map(
    field: &NeuralField,
    v_e: &Volume,
    res: [usize; 2],
    epoch: usize,
) -> Result<ImportanceMap> {
    let frame = field.frame();
    let lifted: Vec<_> = (0..res[1])
        .flat_map(|j| (0..res[0]).map(move |i| (i, j)))
        .map(|(i, j)| frame.lift(ImportanceMap::cell_center(res, i, j)))
        .collect();
    let disp = field.displacements(&lifted);
    let values = lifted
        .iter()
        .zip(&disp)
        .map(|(x, d)| v_e.sample(&(x + d)))
        .collect();
    ImportanceMap::new(res, values, epoch)
}

/// Importance scheme when `map` is given, uniform over `[0,1]^2` otherwise.
pub fn sample_points<R: Rng>(map: Option<&ImportanceMap>, n: usize, rng: &mut R) -> Vec<Vector2<f64>> {
    match map {
        None => (0..n)
            .map(|_| Vector2::new(rng.gen::<f64>(), rng.gen::<f64>()))
            .collect(),
        Some(m) => (0..n)
            .map(|_| {
                let cell = m.draw_cell(rng.gen::<f64>());
                let (i, j) = (cell % m.res[0], cell / m.res[0]);
                Vector2::new(
                    (i as f64 + rng.gen::<f64>()) / m.res[0] as f64,
                    (j as f64 + rng.gen::<f64>()) / m.res[1] as f64,
                )
            })
            .collect(),
    }
}

/// Planar geometry of one epoch's pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairGeometry {
    pub u1: Vec<Vector2<f64>>,
    pub u2: Vec<Vector2<f64>>,
    /// Realized planar distance in mm.
    pub pair_mm: Vec<f64>,
    pub clamped: Vec<bool>,
}

impl PairGeometry {
    pub fn len(&self) -> usize {
        self.u1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u1.is_empty()
    }
}

fn in_pair_domain(u: &Vector2<f64>) -> bool {
    let (lo, hi) = PAIR_DOMAIN;
    u.iter().all(|c| (lo..=hi).contains(c))
}

/// Attaches a second point at a random angle and a random physical distance
/// in `[delta_min, delta_max]` to every point.
pub fn make_pairs<R: Rng>(
    points: &[Vector2<f64>],
    frame: &PlaneFrame,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> PairGeometry {
    let scale = frame.plane_scale();
    let mut out = PairGeometry {
        u1: points.to_vec(),
        u2: Vec::with_capacity(points.len()),
        pair_mm: Vec::with_capacity(points.len()),
        clamped: Vec::with_capacity(points.len()),
    };
    for u1 in points {
        let delta = if cfg.delta_min == cfg.delta_max {
            cfg.delta_min
        } else {
            rng.gen_range(cfg.delta_min..=cfg.delta_max)
        };
        let mut u2 = *u1;
        let mut ok = false;
        // only the angle is redrawn, so unclamped distances stay uniform
        for _ in 0..PAIR_ATTEMPTS {
            let theta = rng.gen_range(0.0..TAU);
            u2 = u1 + Vector2::new(
                delta * theta.cos() / scale.x,
                delta * theta.sin() / scale.y,
            );
            if in_pair_domain(&u2) {
                ok = true;
                break;
            }
        }
        if !ok {
            let (lo, hi) = PAIR_DOMAIN;
            u2 = u2.map(|c| c.clamp(lo, hi));
        }
        out.pair_mm.push((u2 - u1).component_mul(&scale).norm());
        out.u2.push(u2);
        out.clamped.push(!ok);
    }
    out
}

/// Seeded sampler owned by one fitting loop.
#[derive(Debug, Clone)]
pub struct Sampler {
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Sampler { cfg, rng })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    /// One epoch of pairs. The map is ignored under the uniform scheme.
    pub fn epoch(&mut self, frame: &PlaneFrame, map: Option<&ImportanceMap>) -> PairGeometry {
        let map = match self.cfg.scheme {
            Scheme::Importance => map,
            Scheme::Uniform => None,
        };
        let pts = sample_points(map, self.cfg.pairs_per_epoch, &mut self.rng);
        make_pairs(&pts, frame, &self.cfg, &mut self.rng)
    }
}
