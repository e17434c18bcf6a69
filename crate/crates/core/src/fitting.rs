//! SGD-with-momentum fitting loop, flat configuration and the probe-drift
//! stopping rule.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UnfoldError};
use crate::field::{FieldConfig, FieldParams, NeuralField};
use crate::geometry::{fit_plane_frame, PlaneFrame, TargetSet};
use crate::objectives::{
    distortion_loss, image_loss, jacobian_reg, target_loss, total_loss, ImageLoss, ImageLossMode,
    JacobianVariant, LossParts, LossWeights, PairBatch,
};
use crate::sampling::{build_importance_map, ImportanceMap, PairGeometry, Sampler, SamplerConfig, Scheme};
use crate::volume::{edt, importance_volume, rasterize_points, Volume, WorldPoint};

/// Deterministic sub-seed for stream `stream` of a master seed (splitmix64).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_FIELD: u64 = 0;
const STREAM_SAMPLER: u64 = 1;
const STREAM_PROBES: u64 = 2;

/// Flat fitting configuration; every key is also a config-file key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,

    pub w_t: f64,
    pub w_d: f64,
    pub w_im: f64,
    pub w_j: f64,
    pub jacobian_variant: JacobianVariant,
    /// Number of first-of-pair points the Jacobian regularizer is evaluated on.
    pub jacobian_points: usize,
    pub jacobian_step: f64,

    pub scheme: Scheme,
    pub pairs_per_epoch: usize,
    pub delta_min: f64,
    pub delta_max: f64,
    pub map_resolution: [usize; 2],
    pub map_refresh_epochs: usize,
    pub alpha: f64,
    pub beta: f64,
    pub use_ws_weighting: bool,

    pub image_loss: ImageLossMode,
    pub sink_k: f64,
    pub sink_l: f64,
    /// Sink well center; mean intensity at the targets when unset.
    pub v_mean: Option<f64>,

    #[serde(rename = "stop_G", alias = "stop_g")]
    pub stop_g: usize,
    /// Drift threshold in mm; `0.05 * stop_G` when unset.
    pub stop_epsilon: Option<f64>,
    pub stop_gap: usize,
    /// Halt at the first stop signal instead of only recording it.
    pub early_stop: bool,
    pub grad_clip: bool,
    pub grad_clip_norm: f64,
    pub checkpoint_every: usize,

    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub n_frequencies: usize,
    pub leaky_slope: f64,
    /// Input normalization in mm; taken from the plane frame when 0.
    pub c: f64,
    pub margin_factor: f64,

    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        let s = SamplerConfig::default();
        let f = FieldConfig::default();
        let w = LossWeights::default();
        FitConfig {
            epochs: 5000,
            learning_rate: 2e-4,
            momentum: 0.9,
            w_t: w.w_t,
            w_d: w.w_d,
            w_im: w.w_im,
            w_j: w.w_j,
            jacobian_variant: JacobianVariant::J2,
            jacobian_points: 512,
            jacobian_step: 1e-2,
            scheme: s.scheme,
            pairs_per_epoch: s.pairs_per_epoch,
            delta_min: s.delta_min,
            delta_max: s.delta_max,
            map_resolution: s.map_resolution,
            map_refresh_epochs: s.map_refresh_epochs,
            alpha: s.alpha,
            beta: s.beta,
            use_ws_weighting: true,
            image_loss: ImageLossMode::None,
            sink_k: 0.06,
            sink_l: 200.0,
            v_mean: None,
            stop_g: 512,
            stop_epsilon: None,
            stop_gap: 100,
            early_stop: false,
            grad_clip: false,
            grad_clip_norm: 1e3,
            checkpoint_every: 500,
            hidden_layers: f.hidden_layers,
            hidden_width: f.hidden_width,
            n_frequencies: f.n_frequencies,
            leaky_slope: f.leaky_slope,
            c: f.c,
            margin_factor: 2.0,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            w_t: self.w_t,
            w_d: self.w_d,
            w_im: self.w_im,
            w_j: self.w_j,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            scheme: self.scheme,
            pairs_per_epoch: self.pairs_per_epoch,
            delta_min: self.delta_min,
            delta_max: self.delta_max,
            map_resolution: self.map_resolution,
            map_refresh_epochs: self.map_refresh_epochs,
            alpha: self.alpha,
            beta: self.beta,
            seed: derive_seed(self.seed, STREAM_SAMPLER),
        }
    }

    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            hidden_layers: self.hidden_layers,
            hidden_width: self.hidden_width,
            n_frequencies: self.n_frequencies,
            leaky_slope: self.leaky_slope,
            c: self.c,
            seed: derive_seed(self.seed, STREAM_FIELD),
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.stop_epsilon.unwrap_or(0.05 * self.stop_g as f64)
    }

    /// Copy with every optional default filled in.
    pub fn resolved(&self) -> FitConfig {
        FitConfig {
            stop_epsilon: Some(self.epsilon()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(UnfoldError::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        if self.epochs < 1 {
            return bad("epochs", "must be >= 1");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate", "must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if self.stop_gap < 1 || self.stop_g < 1 {
            return bad("stop_gap", "stop_gap and stop_G must be >= 1");
        }
        if !(self.epsilon() > 0.0) {
            return bad("stop_epsilon", "must be positive");
        }
        if self.checkpoint_every < 1 {
            return bad("checkpoint_every", "must be >= 1");
        }
        if !(self.margin_factor > 0.0) {
            return bad("margin_factor", "must be positive");
        }
        if !(self.jacobian_step > 0.0) {
            return bad("jacobian_step", "must be positive");
        }
        if self.w_im > 0.0 && self.image_loss == ImageLossMode::None {
            return bad("image_loss", "w_im > 0 needs image_loss = sink or mask_coverage");
        }
        self.weights().validate()?;
        self.sampler_config().validate()?;
        self.field_config().validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| UnfoldError::Config {
            key: "<file>".into(),
            message: e.to_string(),
        })?;
        let mut cfg = FitConfig::default();
        for (key, value) in table {
            cfg.set_value(&key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| UnfoldError::io(path, e))?;
        FitConfig::from_toml_str(&text).map_err(|e| match e {
            UnfoldError::Config { key, message } => UnfoldError::Config {
                key,
                message: format!("{message} (in {})", path.display()),
            },
            other => other,
        })
    }

    /// Applies `key=value`. Dotted prefixes such as `sampler.alpha` are accepted.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| UnfoldError::Config {
            key: assignment.into(),
            message: "expected key=value".into(),
        })?;
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        self.set_value(key.trim(), value)
    }

    fn set_value(&mut self, key: &str, value: toml::Value) -> Result<()> {
        let key = match key.rsplit('.').next().unwrap_or(key) {
            "stop_g" => "stop_G",
            k => k,
        };
        let value = match (key, value) {
            ("map_resolution", toml::Value::Integer(n)) => {
                toml::Value::Array(vec![toml::Value::Integer(n), toml::Value::Integer(n)])
            }
            (k, toml::Value::Integer(n)) if FLOAT_KEYS.contains(&k) => toml::Value::Float(n as f64),
            (_, v) => v,
        };
        let mut table = toml::Table::try_from(&*self).expect("config serializes");
        if !table.contains_key(key) && !OPTIONAL_KEYS.contains(&key) {
            return Err(UnfoldError::Config {
                key: key.into(),
                message: "unknown key".into(),
            });
        }
        table.insert(key.to_string(), value);
        *self = table.try_into().map_err(|e: toml::de::Error| UnfoldError::Config {
            key: key.into(),
            message: e.message().to_string(),
        })?;
        Ok(())
    }
}

const FLOAT_KEYS: &[&str] = &[
    "learning_rate", "momentum", "w_t", "w_d", "w_im", "w_j", "jacobian_step", "delta_min",
    "delta_max", "alpha", "beta", "sink_k", "sink_l", "v_mean", "stop_epsilon", "grad_clip_norm",
    "leaky_slope", "c", "margin_factor",
];
const OPTIONAL_KEYS: &[&str] = &["v_mean", "stop_epsilon"];

/// Loss definition for one batch, independent of the optimizer state.
#[derive(Debug, Clone, Copy)]
pub struct BatchObjective<'a> {
    pub targets: &'a [WorldPoint],
    pub weights: LossWeights,
    pub image: Option<ImageLoss<'a>>,
    /// Pair weights `w_s` are read here at the deformed endpoints when set.
    pub v_e: Option<&'a Volume>,
    pub jacobian: Option<(JacobianVariant, usize, f64)>,
}

/// Loss parts, weighted total and parameter gradient for one batch.
#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    pub parts: LossParts,
    pub total: f64,
    pub grads: FieldParams,
    pub batch: PairBatch,
}

impl<'a> BatchObjective<'a> {
    /// Lifts and deforms the pair geometry and fills the pair weights.
    pub fn assemble(&self, field: &NeuralField, geom: &PairGeometry) -> PairBatch {
        let frame = field.frame();
        let x1: Vec<_> = geom.u1.iter().map(|u| frame.lift(*u)).collect();
        let x2: Vec<_> = geom.u2.iter().map(|u| frame.lift(*u)).collect();
        let d1 = field.displacements(&x1);
        let d2 = field.displacements(&x2);
        self.batch_from(geom, x1, x2, &d1, &d2)
    }

    fn batch_from(
        &self,
        geom: &PairGeometry,
        x1: Vec<WorldPoint>,
        x2: Vec<WorldPoint>,
        d1: &[Vector3<f64>],
        d2: &[Vector3<f64>],
    ) -> PairBatch {
        let xh1: Vec<_> = x1.iter().zip(d1).map(|(x, d)| x + d).collect();
        let xh2: Vec<_> = x2.iter().zip(d2).map(|(x, d)| x + d).collect();
        let w_s = match self.v_e {
            Some(ve) => xh1
                .iter()
                .zip(&xh2)
                .map(|(a, b)| 0.5 * (ve.sample(a) + ve.sample(b)))
                .collect(),
            None => vec![1.0; xh1.len()],
        };
        PairBatch {
            u1: geom.u1.clone(),
            u2: geom.u2.clone(),
            x1,
            x2,
            xh1,
            xh2,
            pair_mm: geom.pair_mm.clone(),
            w_s,
        }
    }

    /// Loss parts only, with pair weights recomputed from `field`.
    pub fn value(&self, field: &NeuralField, geom: &PairGeometry) -> Result<LossParts> {
        let batch = self.assemble(field, geom);
        self.value_of(field, &batch)
    }

    /// Loss parts on a batch whose pair weights are held fixed.
    pub fn value_of(&self, field: &NeuralField, batch: &PairBatch) -> Result<LossParts> {
        let d1 = field.displacements(&batch.x1);
        let d2 = field.displacements(&batch.x2);
        let mut b = batch.clone();
        for i in 0..b.len() {
            b.xh1[i] = b.x1[i] + d1[i];
            b.xh2[i] = b.x2[i] + d2[i];
        }
        let w = &self.weights;
        let mut parts = LossParts::default();
        if w.w_t > 0.0 {
            parts.target = target_loss(self.targets, &b.xh1)?.value;
        }
        if w.w_d > 0.0 {
            parts.distortion = distortion_loss(&b).value;
        }
        if let (true, Some(img)) = (w.w_im > 0.0, &self.image) {
            parts.image = image_loss(img, &b.xh1)?.value;
        }
        if let (true, Some((variant, n, step))) = (w.w_j > 0.0, self.jacobian) {
            let n = n.min(b.len());
            parts.jacobian = jacobian_reg(field, &b.x1[..n], variant, step).value;
        }
        Ok(parts)
    }

    /// Full forward and backward pass. Pair weights act as constants.
    pub fn evaluate(&self, field: &NeuralField, geom: &PairGeometry) -> Result<BatchEvaluation> {
        if geom.is_empty() {
            return Err(UnfoldError::EmptyBatch);
        }
        let frame = field.frame();
        let s = geom.len();
        let mut xs: Vec<WorldPoint> = Vec::with_capacity(2 * s);
        xs.extend(geom.u1.iter().map(|u| frame.lift(*u)));
        xs.extend(geom.u2.iter().map(|u| frame.lift(*u)));
        let fwd = field.forward_batch(&xs);
        let x2 = xs.split_off(s);
        let batch = self.batch_from(geom, xs, x2, &fwd.displacements[..s], &fwd.displacements[s..]);

        let w = self.weights;
        let mut parts = LossParts::default();
        let mut upstream = vec![Vector3::zeros(); 2 * s];
        if w.w_t > 0.0 {
            let t = target_loss(self.targets, &batch.xh1)?;
            parts.target = t.value;
            for (u, g) in upstream.iter_mut().zip(&t.grads) {
                *u += g * w.w_t;
            }
        }
        if w.w_d > 0.0 {
            let d = distortion_loss(&batch);
            parts.distortion = d.value;
            for i in 0..s {
                upstream[i] += d.grads1[i] * w.w_d;
                upstream[s + i] += d.grads2[i] * w.w_d;
            }
        }
        if w.w_im > 0.0 {
            let img = self.image.as_ref().ok_or_else(|| {
                UnfoldError::InvalidArgument("w_im > 0 without an image loss".into())
            })?;
            let r = image_loss(img, &batch.xh1)?;
            parts.image = r.value;
            for (u, g) in upstream.iter_mut().zip(&r.grads) {
                *u += g * w.w_im;
            }
        }
        let (mut grads, _) = field.backward_batch(&fwd, &upstream, false);
        if let (true, Some((variant, n, step))) = (w.w_j > 0.0, self.jacobian) {
            let n = n.min(s);
            let j = jacobian_reg(field, &batch.x1[..n], variant, step);
            parts.jacobian = j.value;
            grads.add_scaled(&j.grads, w.w_j);
        }
        Ok(BatchEvaluation {
            total: total_loss(&w, &parts),
            parts,
            grads,
            batch,
        })
    }
}

/// Sum of probe displacement changes between two parameter states.
pub fn probe_drift(now: &[Vector3<f64>], then: &[Vector3<f64>]) -> f64 {
    now.iter().zip(then).map(|(a, b)| (a - b).norm()).sum()
}

/// True when the summed probe movement between two states is below `epsilon`.
pub fn stopping_check(now: &NeuralField, then: &NeuralField, probes: &[WorldPoint], epsilon: f64) -> bool {
    probe_drift(&now.displacements(probes), &then.displacements(probes)) < epsilon
}

/// `n` seeded probe points, uniform over the plane.
pub fn probe_points(frame: &PlaneFrame, n: usize, seed: u64) -> Vec<WorldPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| frame.lift(Vector2::new(rng.gen::<f64>(), rng.gen::<f64>())))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs_run: usize,
    pub loss_target: Vec<f64>,
    pub loss_distortion: Vec<f64>,
    pub loss_image: Vec<f64>,
    pub loss_jacobian: Vec<f64>,
    pub loss_total: Vec<f64>,
    /// First epoch count at which the drift criterion held.
    pub stop_epoch: Option<usize>,
    /// `(epoch, drift_mm)` at every stop check.
    pub drift: Vec<(usize, f64)>,
    pub wall_time_s: f64,
    pub checkpoints: Vec<PathBuf>,
}

impl FitReport {
    fn push(&mut self, parts: &LossParts, total: f64) {
        self.loss_target.push(parts.target);
        self.loss_distortion.push(parts.distortion);
        self.loss_image.push(parts.image);
        self.loss_jacobian.push(parts.jacobian);
        self.loss_total.push(total);
        self.epochs_run += 1;
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| UnfoldError::json(path, e))?;
        std::fs::write(path, text).map_err(|e| UnfoldError::io(path, e))
    }
}

/// Resumable fitting state. `fit` runs one to completion.
pub struct Fitter<'a> {
    cfg: FitConfig,
    volume: &'a Volume,
    targets: &'a TargetSet,
    mask: Option<&'a Volume>,
    v_e: Option<Volume>,
    v_mean: f64,
    field: NeuralField,
    velocity: FieldParams,
    sampler: Sampler,
    map: Option<ImportanceMap>,
    probes: Vec<WorldPoint>,
    probe_then: Vec<Vector3<f64>>,
    epoch: usize,
    report: FitReport,
    checkpoint_dir: Option<PathBuf>,
}

impl<'a> Fitter<'a> {
    pub fn new(cfg: FitConfig, volume: &'a Volume, targets: &'a TargetSet, mask: Option<&'a Volume>) -> Result<Self> {
        let frame = fit_plane_frame(targets, cfg.margin_factor)?;
        Fitter::with_frame(cfg, volume, targets, mask, frame)
    }

    /// Uses a given plane frame instead of fitting one to the targets.
    pub fn with_frame(
        cfg: FitConfig,
        volume: &'a Volume,
        targets: &'a TargetSet,
        mask: Option<&'a Volume>,
        frame: PlaneFrame,
    ) -> Result<Self> {
        cfg.validate()?;
        if targets.is_empty() {
            return Err(UnfoldError::DegenerateTarget("no target points".into()));
        }
        let target_mask = rasterize_points(targets.points(), volume.grid())?;
        let needs_ve = cfg.use_ws_weighting || cfg.scheme == Scheme::Importance;
        let v_e = if needs_ve {
            Some(importance_volume(&edt(&target_mask)?, cfg.alpha, cfg.beta)?)
        } else {
            None
        };
        let v_mean = cfg.v_mean.unwrap_or_else(|| {
            targets.points().iter().map(|t| volume.sample(t)).sum::<f64>() / targets.len() as f64
        });
        if cfg.image_loss == ImageLossMode::MaskCoverage && mask.is_none() {
            return Err(UnfoldError::InvalidArgument(
                "mask_coverage loss needs a mask volume".into(),
            ));
        }
        let field = NeuralField::new(cfg.field_config(), frame)?;
        let probes = probe_points(field.frame(), cfg.stop_g, derive_seed(cfg.seed, STREAM_PROBES));
        let probe_then = field.displacements(&probes);
        let fitter = Fitter {
            velocity: field.params.zeros_like(),
            sampler: Sampler::new(cfg.sampler_config())?,
            cfg,
            volume,
            targets,
            mask,
            v_e,
            v_mean,
            field,
            map: None,
            probes,
            probe_then,
            epoch: 0,
            report: FitReport::default(),
            checkpoint_dir: None,
        };
        // fail early on a bad image setup rather than mid-run
        fitter.objective()?;
        Ok(fitter)
    }

    /// Writes periodic checkpoints into `dir`.
    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &FitConfig {
        &self.cfg
    }

    pub fn field(&self) -> &NeuralField {
        &self.field
    }

    pub fn report(&self) -> &FitReport {
        &self.report
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn v_mean(&self) -> f64 {
        self.v_mean
    }

    pub fn importance_volume(&self) -> Option<&Volume> {
        self.v_e.as_ref()
    }

    pub fn probes(&self) -> &[WorldPoint] {
        &self.probes
    }

    pub fn objective(&self) -> Result<BatchObjective<'_>> {
        let image = match self.cfg.image_loss {
            ImageLossMode::None => None,
            ImageLossMode::Sink => Some(ImageLoss::sink(
                self.volume,
                self.v_mean,
                self.cfg.sink_k,
                self.cfg.sink_l,
            )?),
            ImageLossMode::MaskCoverage => Some(ImageLoss::mask_coverage(
                self.mask.expect("checked at construction"),
            )?),
        };
        Ok(BatchObjective {
            targets: self.targets.points(),
            weights: self.cfg.weights(),
            image,
            v_e: if self.cfg.use_ws_weighting { self.v_e.as_ref() } else { None },
            jacobian: Some((self.cfg.jacobian_variant, self.cfg.jacobian_points, self.cfg.jacobian_step)),
        })
    }

    /// One epoch: sample, evaluate, update. Returns the loss parts before the update.
    pub fn step(&mut self) -> Result<LossParts> {
        let refresh = self.cfg.scheme == Scheme::Importance
            && self.epoch % self.cfg.map_refresh_epochs == 0;
        if refresh {
            let ve = self.v_e.as_ref().expect("built for importance sampling");
            self.map = Some(build_importance_map(&self.field, ve, self.cfg.map_resolution, self.epoch)?);
        }
        let geom = self.sampler.epoch(self.field.frame(), self.map.as_ref());
        let eval = self.objective()?.evaluate(&self.field, &geom)?;
        let mut grads = eval.grads;
        let max_grad = grads.max_abs();
        if !eval.parts.is_finite() || !eval.total.is_finite() || !max_grad.is_finite() {
            return Err(UnfoldError::NonFiniteLoss {
                epoch: self.epoch,
                target: eval.parts.target,
                distortion: eval.parts.distortion,
                image: eval.parts.image,
                jacobian: eval.parts.jacobian,
                max_grad,
            });
        }
        if self.cfg.grad_clip {
            let norm = grads.norm();
            if norm > self.cfg.grad_clip_norm {
                grads.scale(self.cfg.grad_clip_norm / norm);
            }
        }
        self.velocity.scale(self.cfg.momentum);
        self.velocity.add_scaled(&grads, 1.0);
        self.field.params.add_scaled(&self.velocity, -self.cfg.learning_rate);
        if let Some(layer) = self.field.params.first_non_finite_layer() {
            return Err(UnfoldError::NonFiniteParameter { layer });
        }
        self.report.push(&eval.parts, eval.total);
        self.epoch += 1;

        if self.epoch % self.cfg.stop_gap == 0 {
            let now = self.field.displacements(&self.probes);
            let drift = probe_drift(&now, &self.probe_then);
            self.report.drift.push((self.epoch, drift));
            self.probe_then = now;
            if drift < self.cfg.epsilon() && self.report.stop_epoch.is_none() {
                self.report.stop_epoch = Some(self.epoch);
                self.checkpoint("stop")?;
            }
        }
        if self.epoch % self.cfg.checkpoint_every == 0 {
            self.checkpoint(&format!("{:05}", self.epoch))?;
        }
        Ok(eval.parts)
    }

    fn checkpoint(&mut self, tag: &str) -> Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| UnfoldError::io(dir, e))?;
            let path = dir.join(format!("checkpoint_{tag}.json"));
            self.field.save_checkpoint(&path)?;
            self.report.checkpoints.push(path);
        }
        Ok(())
    }

    /// Runs `n` more epochs regardless of the configured total or stop signal.
    pub fn run_epochs(&mut self, n: usize) -> Result<()> {
        let start = Instant::now();
        for _ in 0..n {
            self.step()?;
        }
        self.report.wall_time_s += start.elapsed().as_secs_f64();
        Ok(())
    }

    /// Runs up to the configured epoch count, halting at the stop signal
    /// when `early_stop` is set.
    pub fn run(&mut self) -> Result<()> {
        let start = Instant::now();
        while self.epoch < self.cfg.epochs {
            if self.cfg.early_stop && self.report.stop_epoch.is_some() {
                break;
            }
            self.step()?;
        }
        self.report.wall_time_s += start.elapsed().as_secs_f64();
        Ok(())
    }

    pub fn finish(self) -> (NeuralField, FitReport) {
        (self.field, self.report)
    }
}

/// One arm of an ablation comparison: a name and the overrides applied on
/// top of the base configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationArm {
    pub name: &'static str,
    pub overrides: &'static [&'static str],
}

pub const ABLATION_PRESETS: [&str; 3] = ["regularizer", "importance_map", "sampler"];

/// Comparison grid for a named ablation preset.
pub fn ablation_preset(name: &str) -> Option<&'static [AblationArm]> {
    const REGULARIZER: &[AblationArm] = &[
        AblationArm { name: "multiscale", overrides: &[] },
        AblationArm { name: "small_only", overrides: &["delta_min=0.5", "delta_max=0.5"] },
        AblationArm { name: "large_only", overrides: &["delta_min=50", "delta_max=50"] },
        AblationArm {
            name: "jacobian_J1",
            overrides: &["w_d=0", "w_j=1", "jacobian_variant=j1"],
        },
        AblationArm {
            name: "jacobian_J2",
            overrides: &["w_d=0", "w_j=1", "jacobian_variant=j2"],
        },
    ];
    const IMPORTANCE_MAP: &[AblationArm] = &[
        AblationArm { name: "none", overrides: &["use_ws_weighting=false"] },
        AblationArm { name: "weak", overrides: &["alpha=30", "beta=0.1"] },
        AblationArm { name: "strict", overrides: &["alpha=10", "beta=0.1"] },
    ];
    const SAMPLER: &[AblationArm] = &[
        AblationArm { name: "uniform", overrides: &["scheme=uniform"] },
        AblationArm { name: "importance", overrides: &["scheme=importance"] },
    ];
    match name {
        "regularizer" => Some(REGULARIZER),
        "importance_map" => Some(IMPORTANCE_MAP),
        "sampler" => Some(SAMPLER),
        _ => None,
    }
}

/// Fits a field from the PCA initialization.
pub fn fit(
    volume: &Volume,
    targets: &TargetSet,
    mask: Option<&Volume>,
    cfg: &FitConfig,
) -> Result<(NeuralField, FitReport)> {
    let mut fitter = Fitter::new(cfg.clone(), volume, targets, mask)?;
    fitter.run()?;
    Ok(fitter.finish())
}
