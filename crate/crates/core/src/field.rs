//! The deformation field: a frequency embedding followed by a LeakyReLU MLP
//! that maps a 3D point to a 3D displacement in mm.
//!
//! Inputs are expressed in the target's principal basis and divided by the
//! normalization constant `c` before embedding. Each normalized component `v`
//! contributes `[v, sin(2^0 pi v), cos(2^0 pi v), sin(2^1 pi v), ...]`.
//!
//! Batched passes are split into fixed-size chunks that may run on separate
//! workers; per-chunk gradients are always summed in chunk order, so results
//! do not depend on the number of threads.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use nalgebra::{Matrix3, Vector3};
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UnfoldError};
use crate::geometry::PlaneFrame;
use crate::volume::WorldPoint;

/// Points per work unit in batched passes.
pub const CHUNK: usize = 256;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub n_frequencies: usize,
    pub leaky_slope: f64,
    /// Input normalization in mm. Zero means "take it from the plane frame".
    pub c: f64,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            hidden_layers: 3,
            hidden_width: 128,
            n_frequencies: 3,
            leaky_slope: 0.01,
            c: 0.0,
            seed: 0,
        }
    }
}

impl FieldConfig {
    pub fn input_dim(&self) -> usize {
        3 * (1 + 2 * self.n_frequencies)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers < 1 || self.hidden_width < 1 {
            return Err(UnfoldError::InvalidArgument(
                "field needs at least one hidden layer of width >= 1".into(),
            ));
        }
        if !(self.leaky_slope >= 0.0) || !(self.c >= 0.0) {
            return Err(UnfoldError::InvalidArgument(
                "leaky_slope and c must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim();
        for _ in 0..self.hidden_layers {
            shapes.push((fan_in, self.hidden_width));
            fan_in = self.hidden_width;
        }
        shapes.push((fan_in, 3));
        shapes
    }
}

/// One affine layer; `weights` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// All network parameters. The flat view orders layers input to output,
/// each as row-major weights followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub layers: Vec<Layer>,
}

impl FieldParams {
    pub fn zeros(cfg: &FieldConfig) -> Self {
        FieldParams {
            layers: cfg
                .layer_shapes()
                .into_iter()
                .map(|(fan_in, fan_out)| Layer {
                    weights: Array2::zeros((fan_out, fan_in)),
                    bias: Array1::zeros(fan_out),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        FieldParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "flat parameter length mismatch");
        let mut it = flat.iter();
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = *it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = *it.next().unwrap());
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &FieldParams, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.scaled_add(scale, &b.weights);
            a.bias.scaled_add(scale, &b.bias);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.mapv_inplace(|w| w * factor);
            l.bias.mapv_inplace(|b| b * factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.weights.iter().map(|w| w * w).sum::<f64>() + l.bias.iter().map(|b| b * b).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Index of the first layer holding a non-finite value.
    pub fn first_non_finite_layer(&self) -> Option<usize> {
        self.layers.iter().position(|l| {
            !l.weights.iter().all(|w| w.is_finite()) || !l.bias.iter().all(|b| b.is_finite())
        })
    }
}

/// Maps world points to network features.
#[derive(Debug, Clone)]
pub struct Embedder {
    rot_t: Matrix3<f64>,
    center: WorldPoint,
    inv_c: f64,
    freqs: Vec<f64>,
}

impl Embedder {
    pub fn new(frame: &PlaneFrame, n_frequencies: usize) -> Self {
        Embedder {
            rot_t: frame.axes.transpose(),
            center: frame.t_mean,
            inv_c: 1.0 / frame.c,
            freqs: (0..n_frequencies)
                .map(|j| (1u64 << j) as f64 * PI)
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        3 * (1 + 2 * self.freqs.len())
    }

    /// Normalized principal-basis coordinates.
    #[inline]
    pub fn normalize(&self, x: &WorldPoint) -> Vector3<f64> {
        self.rot_t * (x - self.center) * self.inv_c
    }

    pub fn embed_into(&self, x: &WorldPoint, out: &mut [f64]) {
        let v = self.normalize(x);
        let per = 1 + 2 * self.freqs.len();
        for k in 0..3 {
            let row = &mut out[k * per..(k + 1) * per];
            row[0] = v[k];
            for (j, w) in self.freqs.iter().enumerate() {
                let (s, c) = (w * v[k]).sin_cos();
                row[1 + 2 * j] = s;
                row[2 + 2 * j] = c;
            }
        }
    }

    pub fn embed(&self, x: &WorldPoint) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.embed_into(x, &mut out);
        out
    }

    /// Pulls a feature-space gradient back to world coordinates.
    fn pull_back(&self, x: &WorldPoint, grad_features: &[f64]) -> Vector3<f64> {
        let v = self.normalize(x);
        let per = 1 + 2 * self.freqs.len();
        let mut dv = Vector3::zeros();
        for k in 0..3 {
            let g = &grad_features[k * per..(k + 1) * per];
            let mut acc = g[0];
            for (j, w) in self.freqs.iter().enumerate() {
                let (s, c) = (w * v[k]).sin_cos();
                acc += w * (c * g[1 + 2 * j] - s * g[2 + 2 * j]);
            }
            dv[k] = acc;
        }
        // v = R^T (x - t) / c  =>  dL/dx = R dL/dv / c
        self.rot_t.transpose() * dv * self.inv_c
    }
}

/// Activations kept from a forward pass over one chunk.
#[derive(Debug, Clone)]
pub struct ChunkCache {
    features: Array2<f64>,
    hidden: Vec<Array2<f64>>,
}

/// Outputs and caches of a batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub displacements: Vec<Vector3<f64>>,
    chunks: Vec<ChunkCache>,
    inputs: Vec<WorldPoint>,
}

/// Embedding plus MLP, bound to the plane frame that defines its input basis.
#[derive(Debug, Clone)]
pub struct NeuralField {
    config: FieldConfig,
    frame: PlaneFrame,
    embedder: Embedder,
    pub params: FieldParams,
}

impl NeuralField {
    /// Creates a field with freshly initialized parameters.
    pub fn new(config: FieldConfig, frame: PlaneFrame) -> Result<Self> {
        let params = init_params(&config)?;
        Self::with_params(config, frame, params)
    }

    pub fn with_params(mut config: FieldConfig, frame: PlaneFrame, params: FieldParams) -> Result<Self> {
        config.validate()?;
        let frame = if config.c > 0.0 {
            frame.with_c(config.c)?
        } else {
            frame
        };
        config.c = frame.c;
        let expected = config.layer_shapes();
        let shapes_ok = params.layers.len() == expected.len()
            && params
                .layers
                .iter()
                .zip(&expected)
                .all(|(l, &(i, o))| l.weights.dim() == (o, i) && l.bias.len() == o);
        if !shapes_ok {
            return Err(UnfoldError::InvalidArgument(
                "parameter shapes do not match the field config".into(),
            ));
        }
        let embedder = Embedder::new(&frame, config.n_frequencies);
        Ok(NeuralField {
            config,
            frame,
            embedder,
            params,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn frame(&self) -> &PlaneFrame {
        &self.frame
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    /// Displacement at a single point. Fails on non-finite parameters.
    pub fn forward(&self, x: &WorldPoint) -> Result<Vector3<f64>> {
        if let Some(layer) = self.params.first_non_finite_layer() {
            return Err(UnfoldError::NonFiniteParameter { layer });
        }
        Ok(self.displacement(x))
    }

    /// Displacement at a single point, unchecked.
    pub fn displacement(&self, x: &WorldPoint) -> Vector3<f64> {
        let mut a = Array1::from(self.embedder.embed(x));
        let last = self.params.layers.len() - 1;
        for (l, layer) in self.params.layers.iter().enumerate() {
            let mut z = layer.weights.dot(&a) + &layer.bias;
            if l < last {
                let slope = self.config.leaky_slope;
                z.mapv_inplace(|v| if v > 0.0 { v } else { slope * v });
            }
            a = z;
        }
        Vector3::new(a[0], a[1], a[2])
    }

    /// Deformed position `x + f(x)`.
    pub fn deform(&self, x: &WorldPoint) -> WorldPoint {
        x + self.displacement(x)
    }

    /// Displacements for many points, without keeping activations.
    pub fn displacements(&self, xs: &[WorldPoint]) -> Vec<Vector3<f64>> {
        xs.par_chunks(CHUNK)
            .map(|chunk| {
                let (out, _) = self.forward_chunk(chunk, false);
                rows_to_vectors(out.view())
            })
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    }

    pub fn forward_batch(&self, xs: &[WorldPoint]) -> BatchForward {
        let results: Vec<(Array2<f64>, Option<ChunkCache>)> = xs
            .par_chunks(CHUNK)
            .map(|chunk| self.forward_chunk(chunk, true))
            .collect();
        let mut displacements = Vec::with_capacity(xs.len());
        let mut chunks = Vec::with_capacity(results.len());
        for (out, cache) in results {
            displacements.extend(rows_to_vectors(out.view()));
            chunks.push(cache.expect("cache requested"));
        }
        BatchForward {
            displacements,
            chunks,
            inputs: xs.to_vec(),
        }
    }

    fn forward_chunk(&self, xs: &[WorldPoint], keep: bool) -> (Array2<f64>, Option<ChunkCache>) {
        let dim = self.embedder.dim();
        let mut features = Array2::<f64>::zeros((xs.len(), dim));
        for (x, mut row) in xs.iter().zip(features.rows_mut()) {
            self.embedder
                .embed_into(x, row.as_slice_mut().expect("standard layout"));
        }
        let slope = self.config.leaky_slope;
        let last = self.params.layers.len() - 1;
        let mut hidden = Vec::with_capacity(last);
        let mut out = None;
        for (l, layer) in self.params.layers.iter().enumerate() {
            let input = if l == 0 { &features } else { &hidden[l - 1] };
            let mut z = input.dot(&layer.weights.t());
            z += &layer.bias;
            if l < last {
                z.mapv_inplace(|v| if v > 0.0 { v } else { slope * v });
                hidden.push(z);
            } else {
                out = Some(z);
            }
        }
        let cache = keep.then(|| ChunkCache { features, hidden });
        (out.expect("at least one layer"), cache)
    }

    /// Reverse-mode pass. `upstream[i]` is dL/d(displacement of point i).
    /// Returns parameter gradients and, if requested, dL/dx per point
    /// (through the embedding; the identity part of `x + f(x)` is not included).
    pub fn backward_batch(
        &self,
        fwd: &BatchForward,
        upstream: &[Vector3<f64>],
        input_grads: bool,
    ) -> (FieldParams, Option<Vec<Vector3<f64>>>) {
        assert_eq!(upstream.len(), fwd.displacements.len());
        let parts: Vec<(FieldParams, Option<Vec<Vector3<f64>>>)> = fwd
            .chunks
            .par_iter()
            .zip(upstream.par_chunks(CHUNK))
            .zip(fwd.inputs.par_chunks(CHUNK))
            .map(|((cache, up), xs)| self.backward_chunk(cache, up, xs, input_grads))
            .collect();
        let mut grads = self.params.zeros_like();
        let mut xgrads = input_grads.then(|| Vec::with_capacity(upstream.len()));
        for (g, xg) in parts {
            grads.add_scaled(&g, 1.0);
            if let (Some(all), Some(xg)) = (xgrads.as_mut(), xg) {
                all.extend(xg);
            }
        }
        (grads, xgrads)
    }

    fn backward_chunk(
        &self,
        cache: &ChunkCache,
        upstream: &[Vector3<f64>],
        xs: &[WorldPoint],
        input_grads: bool,
    ) -> (FieldParams, Option<Vec<Vector3<f64>>>) {
        let n = upstream.len();
        let slope = self.config.leaky_slope;
        let mut g = Array2::<f64>::zeros((n, 3));
        for (mut row, u) in g.rows_mut().into_iter().zip(upstream) {
            row[0] = u.x;
            row[1] = u.y;
            row[2] = u.z;
        }
        let mut grads = self.params.zeros_like();
        for l in (0..self.params.layers.len()).rev() {
            let input = if l == 0 {
                &cache.features
            } else {
                &cache.hidden[l - 1]
            };
            let gl = &mut grads.layers[l];
            gl.weights = g.t().dot(input);
            gl.bias = g.sum_axis(Axis(0));
            if l == 0 && !input_grads {
                break;
            }
            let mut prev = g.dot(&self.params.layers[l].weights);
            if l > 0 {
                Zip::from(&mut prev).and(input).for_each(|gp, &a| {
                    if a <= 0.0 {
                        *gp *= slope;
                    }
                });
            }
            g = prev;
        }
        let xg = input_grads.then(|| {
            xs.iter()
                .zip(g.rows())
                .map(|(x, row)| {
                    self.embedder
                        .pull_back(x, row.as_slice().expect("standard layout"))
                })
                .collect()
        });
        (grads, xg)
    }

    /// Central finite-difference Jacobian of `g(x) = x + f(x)`.
    pub fn jacobian_fd(&self, x: &WorldPoint, step: f64) -> Matrix3<f64> {
        let stencil = jacobian_stencil(std::slice::from_ref(x), step);
        let d = self.displacements(&stencil);
        jacobian_from_stencil(&d[..6], step)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let text = self.checkpoint_json()?;
        fs::write(path, text).map_err(|e| UnfoldError::io(path, e))
    }

    pub fn checkpoint_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            frame: FrameRecord::from(&self.frame),
            layers: self
                .params
                .layers
                .iter()
                .map(|l| LayerRecord {
                    rows: l.weights.nrows(),
                    cols: l.weights.ncols(),
                    weights: encode_f64(l.weights.iter().copied()),
                    bias: encode_f64(l.bias.iter().copied()),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&ckpt).map_err(|e| UnfoldError::json("<checkpoint>", e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| UnfoldError::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| UnfoldError::json(path, e))?;
        let bad = |message: String| UnfoldError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message,
        };
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {}",
                ckpt.format_version
            )));
        }
        let mut layers = Vec::with_capacity(ckpt.layers.len());
        for (i, rec) in ckpt.layers.iter().enumerate() {
            let w = decode_f64(&rec.weights).map_err(|m| bad(format!("layer {i}: {m}")))?;
            let b = decode_f64(&rec.bias).map_err(|m| bad(format!("layer {i}: {m}")))?;
            if w.len() != rec.rows * rec.cols || b.len() != rec.rows {
                return Err(bad(format!("layer {i}: array sizes do not match shape")));
            }
            layers.push(Layer {
                weights: Array2::from_shape_vec((rec.rows, rec.cols), w)
                    .map_err(|e| bad(e.to_string()))?,
                bias: Array1::from(b),
            });
        }
        let frame = ckpt.frame.into_frame();
        NeuralField::with_params(ckpt.config, frame, FieldParams { layers })
    }
}

fn rows_to_vectors(m: ArrayView2<f64>) -> Vec<Vector3<f64>> {
    m.rows()
        .into_iter()
        .map(|r| Vector3::new(r[0], r[1], r[2]))
        .collect()
}

/// The six points `x +- step * e_k`, k = 0..3, per input point
/// (ordered `+e0, -e0, +e1, -e1, +e2, -e2`).
pub fn jacobian_stencil(xs: &[WorldPoint], step: f64) -> Vec<WorldPoint> {
    let mut out = Vec::with_capacity(xs.len() * 6);
    for x in xs {
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = step;
            out.push(x + e);
            out.push(x - e);
        }
    }
    out
}

/// Jacobian of `x + f(x)` from the six stencil displacements of one point.
pub fn jacobian_from_stencil(d: &[Vector3<f64>], step: f64) -> Matrix3<f64> {
    let mut j = Matrix3::identity();
    for k in 0..3 {
        let col = (d[2 * k] - d[2 * k + 1]) / (2.0 * step);
        for i in 0..3 {
            j[(i, k)] += col[i];
        }
    }
    j
}

/// He-uniform hidden layers from the seeded generator; zero output layer so the
/// initial field is the identity map.
pub fn init_params(cfg: &FieldConfig) -> Result<FieldParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = FieldParams::zeros(cfg);
    let last = params.layers.len() - 1;
    let gain = (2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope)).sqrt();
    for layer in &mut params.layers[..last] {
        let fan_in = layer.weights.ncols() as f64;
        let bound = gain * (3.0 / fan_in).sqrt();
        layer
            .weights
            .iter_mut()
            .for_each(|w| *w = rng.gen_range(-bound..bound));
        let bias_bound = 1.0 / fan_in.sqrt();
        layer
            .bias
            .iter_mut()
            .for_each(|b| *b = rng.gen_range(-bias_bound..bias_bound));
    }
    Ok(params)
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: FieldConfig,
    frame: FrameRecord,
    layers: Vec<LayerRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerRecord {
    rows: usize,
    cols: usize,
    /// Base64 of little-endian f64, row-major.
    weights: String,
    bias: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameRecord {
    /// `A`, row-major 3x2.
    a: [[f64; 2]; 3],
    h_diagonal: [f64; 3],
    t_mean: [f64; 3],
    c: f64,
    margin_factor: f64,
    collinear: bool,
}

impl From<&PlaneFrame> for FrameRecord {
    fn from(f: &PlaneFrame) -> Self {
        let mut a = [[0.0; 2]; 3];
        for (r, row) in a.iter_mut().enumerate() {
            row[0] = f.axes[(r, 0)];
            row[1] = f.axes[(r, 1)];
        }
        FrameRecord {
            a,
            h_diagonal: [f.scale.x, f.scale.y, f.scale.z],
            t_mean: [f.t_mean.x, f.t_mean.y, f.t_mean.z],
            c: f.c,
            margin_factor: f.margin_factor,
            collinear: f.collinear,
        }
    }
}

impl FrameRecord {
    fn into_frame(self) -> PlaneFrame {
        let first = Vector3::new(self.a[0][0], self.a[1][0], self.a[2][0]);
        let second = Vector3::new(self.a[0][1], self.a[1][1], self.a[2][1]);
        let third = first.cross(&second).normalize();
        PlaneFrame {
            axes: Matrix3::from_columns(&[first, second, third]),
            scale: Vector3::from(self.h_diagonal),
            t_mean: Vector3::from(self.t_mean),
            c: self.c,
            margin_factor: self.margin_factor,
            collinear: self.collinear,
        }
    }
}

fn encode_f64(values: impl Iterator<Item = f64>) -> String {
    let bytes: Vec<u8> = values.flat_map(f64::to_le_bytes).collect();
    B64.encode(bytes)
}

fn decode_f64(text: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = B64.decode(text).map_err(|e| e.to_string())?;
    if bytes.len() % 8 != 0 {
        return Err("byte length is not a multiple of 8".into());
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{fit_plane_frame, TargetSet};
    use rand::Rng;

    fn frame() -> PlaneFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let pts = (0..40)
            .map(|_| {
                WorldPoint::new(
                    rng.gen_range(10.0..90.0),
                    rng.gen_range(20.0..50.0),
                    rng.gen_range(0.0..15.0),
                )
            })
            .collect();
        fit_plane_frame(&TargetSet::new(pts).unwrap(), 2.0).unwrap()
    }

    fn small_cfg(width: usize, seed: u64) -> FieldConfig {
        FieldConfig {
            hidden_width: width,
            seed,
            ..FieldConfig::default()
        }
    }

    fn random_field(width: usize, seed: u64) -> NeuralField {
        let cfg = small_cfg(width, seed);
        let mut params = init_params(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let last = params.layers.len() - 1;
        params.layers[last]
            .weights
            .iter_mut()
            .for_each(|w| *w = rng.gen_range(-2.0..2.0));
        params.layers[last]
            .bias
            .iter_mut()
            .for_each(|b| *b = rng.gen_range(-1.0..1.0));
        NeuralField::with_params(cfg, frame(), params).unwrap()
    }

    /// Naive scalar forward pass, independent of the batched GEMM path.
    fn naive_forward(field: &NeuralField, x: &WorldPoint) -> Vector3<f64> {
        let f = field.frame();
        let d = x - f.t_mean;
        let mut feats = Vec::new();
        for k in 0..3 {
            let v = f.axes.column(k).dot(&d) / f.c;
            feats.push(v);
            for j in 0..field.config().n_frequencies {
                let w = 2f64.powi(j as i32) * PI;
                feats.push((w * v).sin());
                feats.push((w * v).cos());
            }
        }
        let mut a = feats;
        let last = field.params.layers.len() - 1;
        for (l, layer) in field.params.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.bias.len()];
            for o in 0..next.len() {
                let mut s = layer.bias[o];
                for i in 0..a.len() {
                    s += layer.weights[(o, i)] * a[i];
                }
                next[o] = if l < last && s <= 0.0 { s * field.config().leaky_slope } else { s };
            }
            a = next;
        }
        Vector3::new(a[0], a[1], a[2])
    }

    #[test]
    fn embedding_at_center() {
        let f = frame();
        let e = Embedder::new(&f, 3);
        let v = e.embed(&f.t_mean);
        assert_eq!(v.len(), 21);
        for k in 0..3 {
            assert_eq!(&v[k * 7..k * 7 + 7], &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        }
        let e0 = Embedder::new(&f, 0);
        let x = f.t_mean + Vector3::new(3.0, -2.0, 1.0);
        let v0 = e0.embed(&x);
        assert_eq!(v0.len(), 3);
        assert!((Vector3::from_column_slice(&v0) - e0.normalize(&x)).norm() < 1e-15);
    }

    #[test]
    fn embedding_matches_componentwise_oracle() {
        let f = frame();
        let e = Embedder::new(&f, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = WorldPoint::new(rng.gen_range(-50.0..150.0), rng.gen_range(-50.0..150.0), rng.gen_range(-50.0..150.0));
            let got = e.embed(&x);
            let d = x - f.t_mean;
            for k in 0..3 {
                let v = (f.axes[(0, k)] * d.x + f.axes[(1, k)] * d.y + f.axes[(2, k)] * d.z) / f.c;
                assert!((got[k * 7] - v).abs() < 1e-12);
                for j in 0..3 {
                    let w = PI * [1.0, 2.0, 4.0][j];
                    assert!((got[k * 7 + 1 + 2 * j] - (w * v).sin()).abs() < 1e-12);
                    assert!((got[k * 7 + 2 + 2 * j] - (w * v).cos()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_network_has_zero_displacement_and_identity_jacobian() {
        let cfg = FieldConfig::default();
        let field = NeuralField::with_params(cfg.clone(), frame(), FieldParams::zeros(&cfg)).unwrap();
        let x = WorldPoint::new(12.0, 30.0, 4.0);
        assert_eq!(field.forward(&x).unwrap(), Vector3::zeros());
        let j = field.jacobian_fd(&x, 1e-2);
        assert!((j - Matrix3::identity()).norm() < 1e-10);
        assert!((j.determinant() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn init_is_identity_and_deterministic() {
        let a = NeuralField::new(small_cfg(32, 7), frame()).unwrap();
        let b = NeuralField::new(small_cfg(32, 7), frame()).unwrap();
        let c = NeuralField::new(small_cfg(32, 8), frame()).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params.layers[0].weights, c.params.layers[0].weights);
        let xs: Vec<_> = (0..10).map(|i| WorldPoint::new(i as f64, 2.0 * i as f64, 5.0)).collect();
        assert!(a.displacements(&xs).iter().all(|d| *d == Vector3::zeros()));
    }

    #[test]
    fn tiny_network_closed_form() {
        let cfg = FieldConfig {
            hidden_layers: 1,
            hidden_width: 1,
            n_frequencies: 0,
            ..FieldConfig::default()
        };
        let f = frame();
        let mut p = FieldParams::zeros(&cfg);
        p.layers[0].weights[(0, 0)] = 2.0;
        p.layers[0].bias[0] = -0.5;
        p.layers[1].weights[(2, 0)] = 3.0;
        p.layers[1].bias[1] = 1.0;
        let field = NeuralField::with_params(cfg, f.clone(), p).unwrap();
        // along the first principal axis, v0 = s / c
        let s = 0.75 * f.c;
        let x = f.t_mean + f.axes.column(0) * s;
        let h = 2.0 * 0.75 - 0.5; // = 1.0 > 0
        let d = field.forward(&x).unwrap();
        assert!((d - Vector3::new(0.0, 1.0, 3.0 * h)).norm() < 1e-12);
        let x_neg = f.t_mean - f.axes.column(0) * s;
        let h_neg = 0.01 * (-1.5 - 0.5);
        let d = field.forward(&x_neg).unwrap();
        assert!((d - Vector3::new(0.0, 1.0, 3.0 * h_neg)).norm() < 1e-12);
    }

    #[test]
    fn batched_forward_matches_naive_chain() {
        let field = random_field(16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<_> = (0..600)
            .map(|_| WorldPoint::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0), rng.gen_range(0.0..30.0)))
            .collect();
        let batched = field.displacements(&xs);
        let fwd = field.forward_batch(&xs);
        for (i, x) in xs.iter().enumerate() {
            let naive = naive_forward(&field, x);
            assert!((batched[i] - naive).norm() < 1e-12);
            assert_eq!(batched[i], fwd.displacements[i]);
            assert!((field.displacement(x) - naive).norm() < 1e-12);
        }
    }

    #[test]
    fn non_finite_parameters_rejected() {
        let mut field = random_field(4, 1);
        field.params.layers[1].bias[0] = f64::NAN;
        assert!(matches!(
            field.forward(&WorldPoint::zeros()),
            Err(UnfoldError::NonFiniteParameter { layer: 1 })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let field = random_field(8, 4);
        let xs = vec![WorldPoint::new(20.0, 30.0, 5.0); 5];
        let fwd = field.forward_batch(&xs);
        let (g, xg) = field.backward_batch(&fwd, &vec![Vector3::zeros(); 5], true);
        assert_eq!(g.max_abs(), 0.0);
        assert!(xg.unwrap().iter().all(|v| *v == Vector3::zeros()));
    }

    #[test]
    fn zero_network_has_zero_input_gradient() {
        let cfg = small_cfg(8, 0);
        let field = NeuralField::with_params(cfg.clone(), frame(), FieldParams::zeros(&cfg)).unwrap();
        let xs = vec![WorldPoint::new(20.0, 30.0, 5.0)];
        let fwd = field.forward_batch(&xs);
        let (_, xg) = field.backward_batch(&fwd, &[Vector3::new(1.0, -2.0, 0.5)], true);
        assert_eq!(xg.unwrap()[0], Vector3::zeros());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..4 {
            let field = random_field(16, 10 + trial);
            let xs: Vec<_> = (0..3)
                .map(|_| WorldPoint::new(rng.gen_range(10.0..90.0), rng.gen_range(20.0..50.0), rng.gen_range(0.0..15.0)))
                .collect();
            let up: Vec<_> = (0..3)
                .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let probe = |f: &NeuralField| -> f64 {
                xs.iter().zip(&up).map(|(x, u)| f.displacement(x).dot(u)).sum()
            };
            let fwd = field.forward_batch(&xs);
            let (g, _) = field.backward_batch(&fwd, &up, false);
            let flat = field.params.to_flat();
            let gflat = g.to_flat();
            let h = 1e-5;
            for _ in 0..60 {
                let i = rng.gen_range(0..flat.len());
                let mut plus = field.clone();
                let mut p = flat.clone();
                p[i] += h;
                plus.params.set_flat(&p);
                let mut minus = field.clone();
                p[i] -= 2.0 * h;
                minus.params.set_flat(&p);
                let fd = (probe(&plus) - probe(&minus)) / (2.0 * h);
                let err = (fd - gflat[i]).abs() / fd.abs().max(gflat[i].abs()).max(1e-3);
                assert!(err < 1e-6, "param {i}: fd {fd} vs {}", gflat[i]);
            }
        }
    }

    #[test]
    fn input_gradients_match_fd_jacobian() {
        let field = random_field(16, 21);
        let x = WorldPoint::new(40.0, 35.0, 7.0);
        let j = field.jacobian_fd(&x, 1e-4);
        for row in 0..3 {
            let mut up = Vector3::zeros();
            up[row] = 1.0;
            let fwd = field.forward_batch(std::slice::from_ref(&x));
            let (_, xg) = field.backward_batch(&fwd, &[up], true);
            let grad = xg.unwrap()[0];
            for col in 0..3 {
                let expected = j[(row, col)] - if row == col { 1.0 } else { 0.0 };
                assert!((grad[col] - expected).abs() < 1e-6, "({row},{col}) {} vs {expected}", grad[col]);
            }
        }
    }

    #[test]
    fn translation_network_has_identity_jacobian() {
        let cfg = small_cfg(4, 0);
        let mut p = FieldParams::zeros(&cfg);
        p.layers.last_mut().unwrap().bias[0] = 5.0;
        let field = NeuralField::with_params(cfg, frame(), p).unwrap();
        let j = field.jacobian_fd(&WorldPoint::new(1.0, 2.0, 3.0), 1e-2);
        assert!((j - Matrix3::identity()).norm() < 1e-10);
    }

    #[test]
    fn forward_is_thread_count_independent() {
        let field = random_field(32, 9);
        let xs: Vec<_> = (0..1000).map(|i| WorldPoint::new(i as f64 * 0.1, 30.0, 2.0)).collect();
        let up: Vec<_> = (0..1000).map(|i| Vector3::new(1.0, (i as f64).sin(), 0.3)).collect();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let fwd = field.forward_batch(&xs);
                field.backward_batch(&fwd, &up, false).0.to_flat()
            })
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let field = random_field(8, 5);
        let path = dir.path().join("ckpt.json");
        field.save_checkpoint(&path).unwrap();
        let back = NeuralField::load_checkpoint(&path).unwrap();
        assert_eq!(back.params, field.params);
        assert_eq!(back.frame(), field.frame());
        assert_eq!(back.config(), field.config());
        assert_eq!(back.checkpoint_json().unwrap(), field.checkpoint_json().unwrap());
    }
}
