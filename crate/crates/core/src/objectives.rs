//! Loss terms and their gradients with respect to deformed positions.
//!
//! * target: mean over targets of the squared distance to the closest sample
//! * distortion: weighted squared difference between 3D pair distance and
//!   the pair's planar distance in mm
//! * image: intensity sink well or mask coverage, read out trilinearly
//! * jacobian: determinant-based ablation regularizers on `x + f(x)`

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UnfoldError};
use crate::field::{jacobian_from_stencil, jacobian_stencil, FieldParams, NeuralField};
use crate::volume::{Volume, VolumeKind, WorldPoint};

/// Below this 3D pair distance (mm) the distance gradient direction is zeroed.
pub const COINCIDENT_MM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_t: f64,
    pub w_d: f64,
    pub w_im: f64,
    /// Weight of the optional Jacobian ablation regularizer.
    pub w_j: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_t: 2.0,
            w_d: 1.0,
            w_im: 0.0,
            w_j: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_t, self.w_d, self.w_im, self.w_j];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(UnfoldError::InvalidArgument(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(UnfoldError::InvalidArgument(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Unweighted loss values for one parameter state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub target: f64,
    pub distortion: f64,
    pub image: f64,
    pub jacobian: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        [self.target, self.distortion, self.image, self.jacobian]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn total_loss(weights: &LossWeights, parts: &LossParts) -> f64 {
    // inactive terms may be unevaluated; never let them leak in
    let term = |w: f64, v: f64| if w == 0.0 { 0.0 } else { w * v };
    term(weights.w_t, parts.target)
        + term(weights.w_d, parts.distortion)
        + term(weights.w_im, parts.image)
        + term(weights.w_j, parts.jacobian)
}

#[derive(Debug, Clone)]
pub struct TargetLoss {
    pub value: f64,
    /// dL/dx̂ per sample; nonzero only at argmin samples.
    pub grads: Vec<Vector3<f64>>,
    /// Closest sample per target (smallest index on ties).
    pub argmin: Vec<usize>,
}

/// `L = 1/N * sum_n min_s |x̂_s - t_n|^2` with exact nearest samples.
pub fn target_loss(targets: &[WorldPoint], samples: &[WorldPoint]) -> Result<TargetLoss> {
    if samples.is_empty() {
        return Err(UnfoldError::EmptyBatch);
    }
    let n = targets.len();
    if n == 0 {
        return Ok(TargetLoss {
            value: 0.0,
            grads: vec![Vector3::zeros(); samples.len()],
            argmin: Vec::new(),
        });
    }
    let xs: Vec<f64> = samples.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = samples.iter().map(|p| p.y).collect();
    let zs: Vec<f64> = samples.iter().map(|p| p.z).collect();
    let nearest: Vec<(usize, f64)> = targets
        .par_iter()
        .map(|t| {
            let mut best = f64::INFINITY;
            let mut arg = 0;
            for s in 0..xs.len() {
                let dx = xs[s] - t.x;
                let dy = ys[s] - t.y;
                let dz = zs[s] - t.z;
                let d = dx * dx + dy * dy + dz * dz;
                if d < best {
                    best = d;
                    arg = s;
                }
            }
            (arg, best)
        })
        .collect();
    let inv_n = 1.0 / n as f64;
    let mut grads = vec![Vector3::zeros(); samples.len()];
    let mut value = 0.0;
    let mut argmin = Vec::with_capacity(n);
    for (t, &(s, d2)) in targets.iter().zip(&nearest) {
        value += d2;
        grads[s] += (samples[s] - t) * (2.0 * inv_n);
        argmin.push(s);
    }
    Ok(TargetLoss {
        value: value * inv_n,
        grads,
        argmin,
    })
}

/// Jointly generated point pairs for one epoch.
#[derive(Debug, Clone, Default)]
pub struct PairBatch {
    pub u1: Vec<Vector2<f64>>,
    pub u2: Vec<Vector2<f64>>,
    pub x1: Vec<WorldPoint>,
    pub x2: Vec<WorldPoint>,
    pub xh1: Vec<WorldPoint>,
    pub xh2: Vec<WorldPoint>,
    /// Planar pair distance in mm.
    pub pair_mm: Vec<f64>,
    pub w_s: Vec<f64>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pair_mm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_mm.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct DistortionLoss {
    pub value: f64,
    pub grads1: Vec<Vector3<f64>>,
    pub grads2: Vec<Vector3<f64>>,
}

/// `L = 1/S * sum_s w_s (|x̂1 - x̂2| - pair_mm)^2`.
pub fn distortion_loss(batch: &PairBatch) -> DistortionLoss {
    let s = batch.len();
    if s == 0 {
        return DistortionLoss {
            value: 0.0,
            grads1: Vec::new(),
            grads2: Vec::new(),
        };
    }
    let inv_s = 1.0 / s as f64;
    let mut value = 0.0;
    let mut grads1 = Vec::with_capacity(s);
    let mut grads2 = Vec::with_capacity(s);
    for i in 0..s {
        let diff = batch.xh1[i] - batch.xh2[i];
        let dist = diff.norm();
        let err = dist - batch.pair_mm[i];
        let w = batch.w_s[i];
        value += w * err * err;
        let g = if dist < COINCIDENT_MM {
            Vector3::zeros()
        } else {
            diff * (2.0 * w * err * inv_s / dist)
        };
        grads1.push(g);
        grads2.push(-g);
    }
    DistortionLoss {
        value: value * inv_s,
        grads1,
        grads2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageLossMode {
    None,
    Sink,
    MaskCoverage,
}

/// Image-based loss bound to its readout volume.
#[derive(Debug, Clone, Copy)]
pub struct ImageLoss<'a> {
    pub mode: ImageLossMode,
    pub volume: &'a Volume,
    /// Center of the sink well (mean target intensity).
    pub v_mean: f64,
    pub k: f64,
    pub l: f64,
}

impl<'a> ImageLoss<'a> {
    pub fn sink(volume: &'a Volume, v_mean: f64, k: f64, l: f64) -> Result<Self> {
        let spec = ImageLoss {
            mode: ImageLossMode::Sink,
            volume,
            v_mean,
            k,
            l,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mask_coverage(volume: &'a Volume) -> Result<Self> {
        let spec = ImageLoss {
            mode: ImageLossMode::MaskCoverage,
            volume,
            v_mean: 1.0,
            k: 0.0,
            l: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            ImageLossMode::None => Err(UnfoldError::InvalidArgument(
                "image loss mode is `none`".into(),
            )),
            ImageLossMode::Sink if self.volume.kind() == VolumeKind::Mask => {
                Err(UnfoldError::InvalidArgument(
                    "sink loss needs an intensity volume".into(),
                ))
            }
            ImageLossMode::MaskCoverage if !self.volume.is_binary() => {
                Err(UnfoldError::NonBinaryMask)
            }
            _ => Ok(()),
        }
    }

    /// Sink well value and derivative with respect to intensity.
    pub fn sink_weight(&self, intensity: f64) -> (f64, f64) {
        sink_well(intensity, self.v_mean, self.k, self.l)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-sigmoid well: near zero within `l` of `v_mean`, near one outside.
/// Returns `(h, dh/dI)`.
pub fn sink_well(intensity: f64, v_mean: f64, k: f64, l: f64) -> (f64, f64) {
    let a = sigmoid(k * (intensity - v_mean - l));
    let b = sigmoid(-k * (intensity - v_mean + l));
    (a + b, k * a * (1.0 - a) - k * b * (1.0 - b))
}

#[derive(Debug, Clone)]
pub struct ImageLossValue {
    pub value: f64,
    pub grads: Vec<Vector3<f64>>,
}

/// Mean image loss over deformed samples.
pub fn image_loss(spec: &ImageLoss<'_>, samples: &[WorldPoint]) -> Result<ImageLossValue> {
    spec.validate()?;
    if samples.is_empty() {
        return Err(UnfoldError::EmptyBatch);
    }
    let inv_s = 1.0 / samples.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(samples.len());
    for p in samples {
        let (v, grad_v) = spec.volume.sample_with_gradient(p);
        let (h, dh) = match spec.mode {
            ImageLossMode::Sink => spec.sink_weight(v),
            ImageLossMode::MaskCoverage => (1.0 - v, -1.0),
            ImageLossMode::None => unreachable!("validated above"),
        };
        value += h;
        grads.push(grad_v * (dh * inv_s));
    }
    Ok(ImageLossValue {
        value: value * inv_s,
        grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JacobianVariant {
    /// `sum_x |1 - det J(x)|`
    J1,
    /// `1/S sum_x relu(-det J(x))`
    J2,
}

#[derive(Debug, Clone)]
pub struct JacobianReg {
    pub value: f64,
    pub grads: FieldParams,
    pub determinants: Vec<f64>,
}

/// Determinant regularizer over `points`, with the Jacobian of `x + f(x)` taken
/// by central differences and differentiated through the stencil.
pub fn jacobian_reg(
    field: &NeuralField,
    points: &[WorldPoint],
    variant: JacobianVariant,
    step: f64,
) -> JacobianReg {
    let s = points.len();
    if s == 0 {
        return JacobianReg {
            value: 0.0,
            grads: field.params.zeros_like(),
            determinants: Vec::new(),
        };
    }
    let stencil = jacobian_stencil(points, step);
    let fwd = field.forward_batch(&stencil);
    let mut upstream = vec![Vector3::zeros(); stencil.len()];
    let mut value = 0.0;
    let mut determinants = Vec::with_capacity(s);
    for p in 0..s {
        let d = &fwd.displacements[6 * p..6 * p + 6];
        let j = jacobian_from_stencil(d, step);
        let det = j.determinant();
        determinants.push(det);
        let dl_ddet = match variant {
            JacobianVariant::J1 => {
                value += (1.0 - det).abs();
                -signum0(1.0 - det)
            }
            JacobianVariant::J2 => {
                value += (-det).max(0.0) / s as f64;
                if det < 0.0 {
                    -1.0 / s as f64
                } else {
                    0.0
                }
            }
        };
        if dl_ddet == 0.0 {
            continue;
        }
        let cof = cofactor(&j);
        // J[i][k] = delta_ik + (f_i(x + h e_k) - f_i(x - h e_k)) / 2h
        for k in 0..3 {
            for i in 0..3 {
                let g = dl_ddet * cof[(i, k)] / (2.0 * step);
                upstream[6 * p + 2 * k][i] += g;
                upstream[6 * p + 2 * k + 1][i] -= g;
            }
        }
    }
    let (grads, _) = field.backward_batch(&fwd, &upstream, false);
    JacobianReg {
        value,
        grads,
        determinants,
    }
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Cofactor matrix, i.e. d det(J) / dJ.
pub fn cofactor(j: &Matrix3<f64>) -> Matrix3<f64> {
    let m = |r: usize, c: usize| j[(r, c)];
    Matrix3::new(
        m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1),
        m(1, 2) * m(2, 0) - m(1, 0) * m(2, 2),
        m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0),
        m(0, 2) * m(2, 1) - m(0, 1) * m(2, 2),
        m(0, 0) * m(2, 2) - m(0, 2) * m(2, 0),
        m(0, 1) * m(2, 0) - m(0, 0) * m(2, 1),
        m(0, 1) * m(1, 2) - m(0, 2) * m(1, 1),
        m(0, 2) * m(1, 0) - m(0, 0) * m(1, 2),
        m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldConfig, FieldParams};
    use crate::geometry::{fit_plane_frame, TargetSet};
    use crate::volume::GridSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<WorldPoint> {
        (0..n)
            .map(|_| {
                WorldPoint::new(
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                )
            })
            .collect()
    }

    #[test]
    fn target_loss_simple_cases() {
        let samples = vec![WorldPoint::new(0.0, 0.0, 0.0), WorldPoint::new(5.0, 0.0, 0.0)];
        let hit = target_loss(&samples, &samples).unwrap();
        assert_eq!(hit.value, 0.0);
        let t = vec![WorldPoint::new(0.0, 2.0, 0.0)];
        let one = target_loss(&t, &samples).unwrap();
        assert_eq!(one.value, 4.0);
        assert_eq!(one.argmin, vec![0]);
        assert_eq!(one.grads[0], Vector3::new(0.0, -4.0, 0.0));
        assert!(matches!(target_loss(&t, &[]), Err(UnfoldError::EmptyBatch)));
    }

    #[test]
    fn target_loss_tie_breaks_to_smallest_index() {
        let samples = vec![WorldPoint::new(1.0, 0.0, 0.0), WorldPoint::new(-1.0, 0.0, 0.0)];
        let r = target_loss(&[WorldPoint::zeros()], &samples).unwrap();
        assert_eq!(r.argmin, vec![0]);
    }

    #[test]
    fn target_loss_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let targets = rand_points(&mut rng, 20, 10.0);
        let samples = rand_points(&mut rng, 200, 10.0);
        let r = target_loss(&targets, &samples).unwrap();
        let mut total = 0.0;
        for (n, t) in targets.iter().enumerate() {
            let mut best = (usize::MAX, f64::INFINITY);
            for (s, x) in samples.iter().enumerate() {
                let d = (x - t).norm_squared();
                if d < best.1 {
                    best = (s, d);
                }
            }
            assert_eq!(r.argmin[n], best.0);
            total += best.1;
        }
        assert!((r.value - total / 20.0).abs() < 1e-12);
    }

    fn batch_from(xh1: Vec<WorldPoint>, xh2: Vec<WorldPoint>, pair_mm: Vec<f64>, w_s: Vec<f64>) -> PairBatch {
        PairBatch {
            xh1,
            xh2,
            pair_mm,
            w_s,
            ..PairBatch::default()
        }
    }

    #[test]
    fn distortion_single_pair() {
        let b = batch_from(
            vec![WorldPoint::zeros()],
            vec![WorldPoint::new(3.0, 0.0, 0.0)],
            vec![1.0],
            vec![1.0],
        );
        let d = distortion_loss(&b);
        assert_eq!(d.value, 4.0);
        assert_eq!(d.grads1[0], Vector3::new(-4.0, 0.0, 0.0));
        assert_eq!(d.grads2[0], Vector3::new(4.0, 0.0, 0.0));
    }

    #[test]
    fn distortion_coincident_guard() {
        let p = WorldPoint::new(1.0, 1.0, 1.0);
        let d = distortion_loss(&batch_from(vec![p], vec![p], vec![2.0], vec![1.0]));
        assert_eq!(d.value, 4.0);
        assert_eq!(d.grads1[0], Vector3::zeros());
    }

    #[test]
    fn distortion_matches_recomputation_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 30;
        let xh1 = rand_points(&mut rng, n, 5.0);
        let xh2 = rand_points(&mut rng, n, 5.0);
        let pair: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..8.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let b = batch_from(xh1.clone(), xh2.clone(), pair.clone(), w.clone());
        let d = distortion_loss(&b);
        let oracle = |a: &[WorldPoint], c: &[WorldPoint]| -> f64 {
            (0..n)
                .map(|i| w[i] * ((a[i] - c[i]).norm() - pair[i]).powi(2))
                .sum::<f64>()
                / n as f64
        };
        assert!((d.value - oracle(&xh1, &xh2)).abs() < 1e-12);
        let h = 1e-6;
        for i in 0..n {
            for a in 0..3 {
                let mut p = xh1.clone();
                p[i][a] += h;
                let mut m = xh1.clone();
                m[i][a] -= h;
                let fd = (oracle(&p, &xh2) - oracle(&m, &xh2)) / (2.0 * h);
                let g = d.grads1[i][a];
                assert!((fd - g).abs() / fd.abs().max(g.abs()).max(1e-3) < 1e-6);
            }
        }
    }

    #[test]
    fn sink_well_center_value_and_symmetry() {
        let (h, dh) = sink_well(300.0, 300.0, 0.06, 200.0);
        assert!((h - 2.0 / (1.0 + 12f64.exp())).abs() < 1e-15);
        assert!((h - 1.229e-5).abs() < 1e-8);
        assert!(dh.abs() < 1e-15);
        for t in [0.0, 10.0, 150.0, 199.0, 250.0, 1e3] {
            let a = sink_well(300.0 + t, 300.0, 0.06, 200.0).0;
            let b = sink_well(300.0 - t, 300.0, 0.06, 200.0).0;
            assert!((a - b).abs() < 1e-12);
        }
        assert!(sink_well(0.0, 300.0, 0.06, 200.0).0 > 0.99);
    }

    fn ramp_volume() -> Volume {
        let g = GridSpec::new([20, 20, 20], [1.0, 1.5, 1.0], [0.0; 3]).unwrap();
        Volume::from_fn(g, VolumeKind::Intensity, |p| {
            250.0 + 8.0 * (p.x - 10.0) + 3.0 * p.y - 2.0 * p.z
        })
        .unwrap()
    }

    #[test]
    fn sink_gradient_matches_fd() {
        let vol = ramp_volume();
        let spec = ImageLoss::sink(&vol, 300.0, 0.06, 200.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let samples: Vec<_> = (0..40)
            .map(|_| WorldPoint::new(rng.gen_range(1.2..17.8), rng.gen_range(1.2..26.8), rng.gen_range(1.2..17.8)))
            .collect();
        let r = image_loss(&spec, &samples).unwrap();
        let h = 1e-5;
        for (i, p) in samples.iter().enumerate() {
            let q = vol.grid().continuous_index(p);
            if q.iter().any(|c| (c - c.round()).abs() < 1e-3) {
                continue;
            }
            for a in 0..3 {
                let mut e = Vector3::zeros();
                e[a] = h;
                let lp = image_loss(&spec, &[p + e]).unwrap().value;
                let lm = image_loss(&spec, &[p - e]).unwrap().value;
                let fd = (lp - lm) / (2.0 * h) / samples.len() as f64;
                let g = r.grads[i][a];
                assert!((fd - g).abs() / fd.abs().max(g.abs()).max(1e-9) < 1e-5, "{fd} vs {g}");
            }
        }
    }

    #[test]
    fn mask_loss_inside_is_zero_and_rejects_nonbinary() {
        let g = GridSpec::new([6, 6, 6], [1.0; 3], [0.0; 3]).unwrap();
        let mask = Volume::from_fn(g, VolumeKind::Mask, |_| 1.0).unwrap();
        let spec = ImageLoss::mask_coverage(&mask).unwrap();
        let r = image_loss(&spec, &[WorldPoint::new(2.5, 2.5, 2.5), WorldPoint::new(1.0, 4.0, 3.3)]).unwrap();
        assert_eq!(r.value, 0.0);
        let weights = Volume::from_fn(g, VolumeKind::Weight, |p| p.x / 10.0).unwrap();
        assert!(matches!(
            ImageLoss::mask_coverage(&weights),
            Err(UnfoldError::NonBinaryMask)
        ));
        assert!(ImageLoss::sink(&mask, 1.0, 0.06, 200.0).is_err());
    }

    #[test]
    fn total_loss_is_linear_combination() {
        let w = LossWeights::default();
        assert_eq!((w.w_t, w.w_d, w.w_im), (2.0, 1.0, 0.0));
        let parts = LossParts {
            target: 0.5,
            distortion: 0.3,
            image: 99.0,
            jacobian: 0.0,
        };
        assert!((total_loss(&w, &parts) - 1.3).abs() < 1e-15);
        let w2 = LossWeights { w_im: 1e-3, ..w };
        assert!((total_loss(&w2, &parts) - (1.3 + 0.099)).abs() < 1e-12);
        assert!(LossWeights { w_t: 0.0, w_d: 0.0, w_im: 0.0, w_j: 0.0 }.validate().is_err());
    }

    fn frame() -> crate::geometry::PlaneFrame {
        let pts: Vec<_> = (0..20)
            .map(|i| WorldPoint::new(i as f64 * 3.0, (i as f64 * 0.7).sin() * 10.0, (i as f64 * 0.3).cos() * 4.0))
            .collect();
        fit_plane_frame(&TargetSet::new(pts).unwrap(), 2.0).unwrap()
    }

    /// Network realizing f(x) = M (x - t_mean) exactly via paired leaky units.
    fn linear_field(m: Matrix3<f64>) -> NeuralField {
        let cfg = FieldConfig {
            hidden_layers: 1,
            hidden_width: 6,
            n_frequencies: 0,
            ..FieldConfig::default()
        };
        let fr = frame();
        let slope = cfg.leaky_slope;
        let mut p = FieldParams::zeros(&cfg);
        for k in 0..3 {
            p.layers[0].weights[(2 * k, k)] = 1.0;
            p.layers[0].weights[(2 * k + 1, k)] = -1.0;
        }
        // (leaky(v) - leaky(-v)) / (1 + slope) = v; f = M * c * R v
        let out = m * fr.axes * fr.c / (1.0 + slope);
        for i in 0..3 {
            for k in 0..3 {
                p.layers[1].weights[(i, 2 * k)] = out[(i, k)];
                p.layers[1].weights[(i, 2 * k + 1)] = -out[(i, k)];
            }
        }
        NeuralField::with_params(cfg, fr, p).unwrap()
    }

    #[test]
    fn jacobian_reg_closed_forms() {
        let pts: Vec<_> = (0..7).map(|i| WorldPoint::new(i as f64 * 4.0, 3.0, -1.0)).collect();
        let zero_cfg = FieldConfig::default();
        let zero = NeuralField::with_params(zero_cfg.clone(), frame(), FieldParams::zeros(&zero_cfg)).unwrap();
        assert!(jacobian_reg(&zero, &pts, JacobianVariant::J1, 1e-2).value.abs() < 1e-9);
        assert_eq!(jacobian_reg(&zero, &pts, JacobianVariant::J2, 1e-2).value, 0.0);

        let scale = linear_field(Matrix3::identity());
        let j1 = jacobian_reg(&scale, &pts, JacobianVariant::J1, 1e-2);
        assert!(j1.determinants.iter().all(|d| (d - 8.0).abs() < 1e-8));
        assert!((j1.value - 7.0 * pts.len() as f64).abs() < 1e-7);
        assert_eq!(jacobian_reg(&scale, &pts, JacobianVariant::J2, 1e-2).value, 0.0);

        let n = frame().normal();
        let reflect = linear_field(-2.0 * n * n.transpose());
        let j2 = jacobian_reg(&reflect, &pts, JacobianVariant::J2, 1e-2);
        assert!(j2.determinants.iter().all(|d| (d + 1.0).abs() < 1e-8));
        // averaged: relu(-det) = 1 per point
        assert!((j2.value - 1.0).abs() < 1e-8);
    }

    #[test]
    fn jacobian_reg_gradient_matches_fd() {
        let cfg = FieldConfig {
            hidden_width: 8,
            seed: 3,
            ..FieldConfig::default()
        };
        let mut field = NeuralField::new(cfg, frame()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let last = field.params.layers.len() - 1;
        field.params.layers[last].weights.iter_mut().for_each(|w| *w = rng.gen_range(-40.0..40.0));
        let pts: Vec<_> = (0..12)
            .map(|_| WorldPoint::new(rng.gen_range(0.0..57.0), rng.gen_range(-10.0..10.0), rng.gen_range(-4.0..4.0)))
            .collect();
        for variant in [JacobianVariant::J1, JacobianVariant::J2] {
            let r = jacobian_reg(&field, &pts, variant, 1e-2);
            let flat = field.params.to_flat();
            let g = r.grads.to_flat();
            let h = 1e-6;
            let mut checked = 0;
            for i in (0..flat.len()).step_by(23) {
                let eval = |delta: f64| {
                    let mut f = field.clone();
                    let mut p = flat.clone();
                    p[i] += delta;
                    f.params.set_flat(&p);
                    jacobian_reg(&f, &pts, variant, 1e-2).value
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-2);
                assert!(err < 1e-4, "{variant:?} param {i}: {fd} vs {}", g[i]);
                checked += 1;
            }
            assert!(checked > 10);
        }
    }

    proptest::proptest! {
        #[test]
        fn target_loss_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut targets = rand_points(&mut rng, 8, 4.0);
            let mut samples = rand_points(&mut rng, 30, 4.0);
            let a = target_loss(&targets, &samples).unwrap().value;
            targets.reverse();
            samples.rotate_left(7);
            let b = target_loss(&targets, &samples).unwrap().value;
            proptest::prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn distortion_zero_iff_isometric(len in 0.5f64..40.0, dx in -1.0f64..1.0, dy in -1.0f64..1.0, dz in 0.01f64..1.0) {
            let dir = Vector3::new(dx, dy, dz).normalize();
            let p = WorldPoint::new(1.0, 2.0, 3.0);
            let iso = batch_from(vec![p], vec![p + dir * len], vec![len], vec![0.7]);
            proptest::prop_assert!(distortion_loss(&iso).value < 1e-20);
            let off = batch_from(vec![p], vec![p + dir * (len * 1.01)], vec![len], vec![0.7]);
            proptest::prop_assert!(distortion_loss(&off).value > 0.0);
        }

        #[test]
        fn total_loss_linear(a in 0.0f64..5.0, b in 0.0f64..5.0, c in 0.0f64..5.0, s in 0.0f64..3.0) {
            let w = LossWeights { w_t: 2.0, w_d: 1.0, w_im: 0.5, w_j: 0.0 };
            let p = LossParts { target: a, distortion: b, image: c, jacobian: 0.0 };
            let q = LossParts { target: a * s, distortion: b * s, image: c * s, jacobian: 0.0 };
            proptest::prop_assert!((total_loss(&w, &q) - s * total_loss(&w, &p)).abs() < 1e-9);
        }
    }
}
