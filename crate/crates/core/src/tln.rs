//! Temporal linear network with a softmax allocation head.
//!
//! Each layer applies, in order: a learnable per-time-step scaling, an affine
//! feature map, a learnable per-feature scaling, an affine temporal map that
//! changes the sequence length, and a zero-padded same-length convolution
//! along time. There is no nonlinearity anywhere except the softmax that
//! turns the final length-T sequence into an allocation curve, so exact
//! reverse-mode gradients are derived layer by layer instead of through a
//! general autodiff tape.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::marketdata::FeatureWindow;
use crate::objectives::{AllocationCurve, LossKind, VolumeNormalization};
use crate::{Error, Result};

/// Shape signature of one layer: `(S_in, F_in) → (S_out, F_out)` with a
/// temporal convolution kernel of the given width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub seq_in: usize,
    pub seq_out: usize,
    pub features_in: usize,
    pub features_out: usize,
    pub kernel: usize,
}

/// Architecture of a TLN: input `(S, F)`, output length `T`, and the layer
/// chain connecting them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlnSpec {
    pub lookback: usize,
    pub features: usize,
    pub horizon: usize,
    pub layers: Vec<LayerSpec>,
}

impl TlnSpec {
    /// The default two-layer configuration: `S → 32` time steps and `F → 8`
    /// features with a width-3 kernel, then down to `(T, 1)` with a width-1
    /// kernel.
    pub fn default_two_layer(lookback: usize, features: usize, horizon: usize) -> Self {
        Self {
            lookback,
            features,
            horizon,
            layers: vec![
                LayerSpec {
                    seq_in: lookback,
                    seq_out: 32,
                    features_in: features,
                    features_out: 8,
                    kernel: 3,
                },
                LayerSpec {
                    seq_in: 32,
                    seq_out: horizon,
                    features_in: 8,
                    features_out: 1,
                    kernel: 1,
                },
            ],
        }
    }

    /// Builds a chain from `(seq_out, features_out, kernel)` stage sizes; the
    /// final stage is appended automatically as `(horizon, 1, 1)` if absent.
    pub fn from_stages(
        lookback: usize,
        features: usize,
        horizon: usize,
        stages: &[(usize, usize, usize)],
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let (mut s_in, mut f_in) = (lookback, features);
        for &(s_out, f_out, kernel) in stages {
            layers.push(LayerSpec {
                seq_in: s_in,
                seq_out: s_out,
                features_in: f_in,
                features_out: f_out,
                kernel,
            });
            s_in = s_out;
            f_in = f_out;
        }
        if layers
            .last()
            .map_or(true, |l| l.seq_out != horizon || l.features_out != 1)
        {
            layers.push(LayerSpec {
                seq_in: s_in,
                seq_out: horizon,
                features_in: f_in,
                features_out: 1,
                kernel: 1,
            });
        }
        let spec = Self {
            lookback,
            features,
            horizon,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.features == 0 || self.horizon == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        let (mut s, mut f) = (self.lookback, self.features);
        for (i, l) in self.layers.iter().enumerate() {
            if l.seq_in != s || l.features_in != f {
                return Err(Error::Config(format!(
                    "layer {i} expects input ({}, {}), chain provides ({s}, {f})",
                    l.seq_in, l.features_in
                )));
            }
            if l.seq_out == 0 || l.features_out == 0 || l.kernel == 0 {
                return Err(Error::Config(format!("layer {i} has a zero dimension")));
            }
            s = l.seq_out;
            f = l.features_out;
        }
        if s != self.horizon || f != 1 {
            return Err(Error::Config(format!(
                "last layer must emit ({}, 1), got ({s}, {f})",
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Learnable tensors of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TlnLayerParams {
    /// Per-time-step input scaling, length `S_in`.
    pub k: Array1<f64>,
    /// Feature map `F_in × F_out` and its bias.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    /// Per-feature output scaling, length `F_out`.
    pub fscale: Array1<f64>,
    /// Temporal map `S_in × S_out` and its bias.
    pub tmap: Array2<f64>,
    pub c: Array1<f64>,
    /// Convolution kernel `kernel × F_out` and its bias.
    pub conv: Array2<f64>,
    pub d: Array1<f64>,
}

impl TlnLayerParams {
    fn zeros(spec: &LayerSpec) -> Self {
        Self {
            k: Array1::zeros(spec.seq_in),
            w: Array2::zeros((spec.features_in, spec.features_out)),
            b: Array1::zeros(spec.features_out),
            fscale: Array1::zeros(spec.features_out),
            tmap: Array2::zeros((spec.seq_in, spec.seq_out)),
            c: Array1::zeros(spec.seq_out),
            conv: Array2::zeros((spec.kernel, spec.features_out)),
            d: Array1::zeros(spec.features_out),
        }
    }

    fn param_count(&self) -> usize {
        self.k.len()
            + self.w.len()
            + self.b.len()
            + self.fscale.len()
            + self.tmap.len()
            + self.c.len()
            + self.conv.len()
            + self.d.len()
    }

    /// All tensors as flat slices, in declared order
    /// (K, W, b, F, T, c, C, d). This is the checkpoint blob order and the
    /// order optimizers walk parameters in.
    pub fn tensor_slices(&self) -> [&[f64]; 8] {
        [
            self.k.as_slice().expect("standard layout"),
            self.w.as_slice().expect("standard layout"),
            self.b.as_slice().expect("standard layout"),
            self.fscale.as_slice().expect("standard layout"),
            self.tmap.as_slice().expect("standard layout"),
            self.c.as_slice().expect("standard layout"),
            self.conv.as_slice().expect("standard layout"),
            self.d.as_slice().expect("standard layout"),
        ]
    }

    /// Mutable variant of [`Self::tensor_slices`].
    pub fn tensor_slices_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.k.as_slice_mut().expect("standard layout"),
            self.w.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("standard layout"),
            self.fscale.as_slice_mut().expect("standard layout"),
            self.tmap.as_slice_mut().expect("standard layout"),
            self.c.as_slice_mut().expect("standard layout"),
            self.conv.as_slice_mut().expect("standard layout"),
            self.d.as_slice_mut().expect("standard layout"),
        ]
    }

    fn all_finite(&self) -> bool {
        self.tensor_slices()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// A TLN with its architecture and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TlnModel {
    pub spec: TlnSpec,
    pub layers: Vec<TlnLayerParams>,
    pub seed: u64,
}

/// Deterministic initialization: scalings start at one, biases at zero, and
/// the maps draw uniformly from `±sqrt(1/fan_in)`.
pub fn init(spec: &TlnSpec, seed: u64) -> Result<TlnModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        let mut p = TlnLayerParams::zeros(l);
        p.k.fill(1.0);
        p.fscale.fill(1.0);
        let mut fill = |m: &mut Array2<f64>, fan_in: usize| {
            let bound = (1.0 / fan_in as f64).sqrt();
            for v in m.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        };
        fill(&mut p.w, l.features_in);
        fill(&mut p.tmap, l.seq_in);
        fill(&mut p.conv, l.kernel);
        layers.push(p);
    }
    Ok(TlnModel {
        spec: spec.clone(),
        layers,
        seed,
    })
}

/// Forward outputs: raw logits and the softmax allocation, both `B×T`.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Array2<f64>,
    pub allocation: Array2<f64>,
}

/// Intermediates one layer keeps for the backward pass.
struct LayerCache {
    x_in: Array3<f64>,
    x_scaled: Array3<f64>,
    y: Array3<f64>,
    z: Array3<f64>,
    z_hat: Array3<f64>,
}

/// Loss value plus gradients for every parameter.
#[derive(Debug)]
pub struct BackwardPass {
    pub loss: f64,
    pub grads: Vec<TlnLayerParams>,
    /// Windows skipped because their market VWAP (or volume target) is
    /// undefined; the batch mean is over the remaining windows.
    pub skipped: usize,
}

impl TlnModel {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Parameter count of the flattened linear regression on the same
    /// shapes: `S·F·T + T`.
    pub fn flattened_regression_param_count(&self) -> usize {
        self.spec.lookback * self.spec.features * self.spec.horizon + self.spec.horizon
    }

    fn check_batch(&self, batch: &Array3<f64>) -> Result<()> {
        let (_, s, f) = batch.dim();
        if s != self.spec.lookback || f != self.spec.features {
            return Err(Error::Dimension(format!(
                "batch is {s}×{f} per sample, model expects {}×{}",
                self.spec.lookback, self.spec.features
            )));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("batch contains non-finite values".into()));
        }
        Ok(())
    }

    /// Runs the layer cascade and the softmax head.
    pub fn forward(&self, batch: &Array3<f64>) -> Result<Forward> {
        let (_, forward) = self.forward_impl(batch, false)?;
        Ok(forward)
    }

    fn forward_impl(&self, batch: &Array3<f64>, keep: bool) -> Result<(Vec<LayerCache>, Forward)> {
        self.check_batch(batch)?;
        let mut caches = Vec::new();
        let mut x = batch.clone();
        for (i, (params, lspec)) in self.layers.iter().zip(&self.spec.layers).enumerate() {
            let (out, cache) = layer_forward(params, lspec, x);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite activation after layer {i}"
                )));
            }
            x = out;
            if keep {
                caches.push(cache);
            }
        }
        // final feature axis has width 1: squeeze to B×T logits
        let (batch_size, t, _) = x.dim();
        let logits = x
            .into_shape_with_order((batch_size, t))
            .expect("final feature width is 1");
        let mut allocation = Array2::zeros((batch_size, t));
        for (mut arow, lrow) in allocation.rows_mut().into_iter().zip(logits.rows()) {
            crate::objectives::softmax_into(
                lrow.as_slice().expect("standard layout"),
                arow.as_slice_mut().expect("standard layout"),
            );
        }
        Ok((caches, Forward { logits, allocation }))
    }

    /// Allocation for a single lookback matrix.
    pub fn allocate(&self, x: &ArrayView2<f64>) -> Result<AllocationCurve> {
        let (s, f) = x.dim();
        let batch = x
            .to_owned()
            .into_shape_with_order((1, s, f))
            .expect("reshape of owned array");
        let fwd = self.forward(&batch)?;
        AllocationCurve::new(fwd.allocation.row(0).to_vec())
    }

    /// Mean loss over the batch and exact gradients for every parameter.
    ///
    /// The absolute loss takes subgradient 0 at `r = 0`.
    pub fn backward(
        &self,
        batch: &Array3<f64>,
        windows: &[&FeatureWindow],
        loss: LossKind,
    ) -> Result<BackwardPass> {
        let b = batch.dim().0;
        if windows.len() != b {
            return Err(Error::Dimension(format!(
                "batch has {b} samples but {} windows were supplied",
                windows.len()
            )));
        }
        let (caches, fwd) = self.forward_impl(batch, true)?;
        let t = self.spec.horizon;

        // Head: per-row loss and dL/dlogits, skipping undefined windows.
        let mut row_grads = Array2::<f64>::zeros((b, t));
        let mut losses = vec![None; b];
        let mut used = 0usize;
        for (i, w) in windows.iter().enumerate() {
            let q = fwd.allocation.row(i);
            let q = q.as_slice().expect("standard layout");
            match per_window_loss_grad(q, w, loss)? {
                Some((l, g)) => {
                    losses[i] = Some(l);
                    row_grads.row_mut(i).assign(&Array1::from_vec(g));
                    used += 1;
                }
                None => {}
            }
        }
        if used == 0 {
            return Err(Error::UndefinedVwap);
        }
        let scale = 1.0 / used as f64;
        let loss_value = losses.iter().flatten().sum::<f64>() * scale;

        // dL/dlogits via softmax: q ⊙ (g − ⟨g, q⟩)
        let mut dlogits = Array2::<f64>::zeros((b, t));
        for i in 0..b {
            if losses[i].is_none() {
                continue;
            }
            let q = fwd.allocation.row(i);
            let g = row_grads.row(i);
            let dot: f64 = q.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            for j in 0..t {
                dlogits[(i, j)] = scale * q[j] * (g[j] - dot);
            }
        }

        // Backward through the layer cascade.
        let mut grads: Vec<TlnLayerParams> = self
            .spec
            .layers
            .iter()
            .map(TlnLayerParams::zeros)
            .collect();
        let mut grad_out = dlogits
            .into_shape_with_order((b, t, 1))
            .expect("reshape of owned array");
        for i in (0..self.layers.len()).rev() {
            let (layer_grads, grad_in) = layer_backward(
                &self.layers[i],
                &self.spec.layers[i],
                &caches[i],
                &grad_out,
            );
            grads[i] = layer_grads;
            grad_out = grad_in;
        }
        Ok(BackwardPass {
            loss: loss_value,
            grads,
            skipped: b - used,
        })
    }

    // -- checkpoint serialization -------------------------------------------

    /// Writes a newline-terminated JSON header followed by all parameters as
    /// a flat little-endian f64 blob in declared layer order.
    pub fn save(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = BufWriter::new(file);
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            spec: self.spec.clone(),
            seed: self.seed,
            param_count: self.param_count(),
            meta: meta.clone(),
        };
        serde_json::to_writer(&mut out, &header).map_err(|e| Error::Data(e.to_string()))?;
        out.write_all(b"\n")?;
        for layer in &self.layers {
            for tensor in layer.tensor_slices() {
                for v in tensor {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(TlnModel, serde_json::Value)> {
        let file = std::fs::File::open(path)?;
        let mut reader = BufReader::new(file);
        let mut header_line = String::new();
        reader.read_line(&mut header_line)?;
        let header: CheckpointHeader = serde_json::from_str(header_line.trim_end())
            .map_err(|e| Error::Data(format!("bad checkpoint header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!(
                "unsupported checkpoint format '{}'",
                header.format
            )));
        }
        header.spec.validate()?;
        let mut model = init(&header.spec, header.seed)?;
        let mut blob = Vec::new();
        reader.read_to_end(&mut blob)?;
        if blob.len() != header.param_count * 8 {
            return Err(Error::Data(format!(
                "checkpoint blob holds {} bytes, expected {}",
                blob.len(),
                header.param_count * 8
            )));
        }
        let mut offset = 0usize;
        for layer in model.layers.iter_mut() {
            for tensor in layer.tensor_slices_mut() {
                for v in tensor {
                    let bytes: [u8; 8] = blob[offset..offset + 8].try_into().unwrap();
                    *v = f64::from_le_bytes(bytes);
                    offset += 8;
                }
            }
        }
        if model.layers.iter().any(|l| !l.all_finite()) {
            return Err(Error::Data("checkpoint contains non-finite parameters".into()));
        }
        Ok((model, header.meta))
    }
}

const CHECKPOINT_FORMAT: &str = "tln-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    spec: TlnSpec,
    seed: u64,
    param_count: usize,
    meta: serde_json::Value,
}

/// Per-window loss and its gradient w.r.t. the allocation; `None` when the
/// window's objective is undefined (skipped upstream).
fn per_window_loss_grad(
    q: &[f64],
    window: &FeatureWindow,
    loss: LossKind,
) -> Result<Option<(f64, Vec<f64>)>> {
    let t = q.len();
    if window.horizon() != t {
        return Err(Error::Dimension(format!(
            "window horizon {} does not match model output {t}",
            window.horizon()
        )));
    }
    match loss {
        LossKind::Absolute | LossKind::Quadratic => {
            let total: f64 = window.horizon_volumes.iter().sum();
            if total <= 0.0 {
                return Ok(None);
            }
            let mvwap: f64 = window
                .horizon_volumes
                .iter()
                .zip(&window.horizon_prices)
                .map(|(v, p)| v * p)
                .sum::<f64>()
                / total;
            let achieved: f64 = q
                .iter()
                .zip(&window.horizon_prices)
                .map(|(q, p)| q * p)
                .sum();
            let r = achieved / mvwap - 1.0;
            let (l, dr) = match loss {
                LossKind::Absolute => (r.abs(), if r == 0.0 { 0.0 } else { r.signum() }),
                LossKind::Quadratic => (r * r, 2.0 * r),
                LossKind::Volume(_) => unreachable!(),
            };
            let g: Vec<f64> = window.horizon_prices.iter().map(|p| dr * p / mvwap).collect();
            Ok(Some((l, g)))
        }
        LossKind::Volume(norm) => {
            let denom = match norm {
                VolumeNormalization::Horizon => window.horizon_volume_sum(),
                VolumeNormalization::Lookback => window.lookback_volume_sum,
            };
            if denom <= 0.0 {
                return Ok(None);
            }
            let mut l = 0.0;
            let mut g = Vec::with_capacity(t);
            for (qi, v) in q.iter().zip(&window.horizon_volumes) {
                let diff = qi - v / denom;
                l += diff * diff;
                g.push(2.0 * diff);
            }
            Ok(Some((l, g)))
        }
    }
}

/// Reshapes a matrix (possibly F-ordered, e.g. a `dot` against a transposed
/// view) into a standard-layout 3-d array.
fn reshape3(a: Array2<f64>, dims: (usize, usize, usize)) -> Array3<f64> {
    let a = if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    };
    a.into_shape_with_order(dims)
        .expect("element count matches target shape")
}

fn layer_forward(
    params: &TlnLayerParams,
    spec: &LayerSpec,
    x_in: Array3<f64>,
) -> (Array3<f64>, LayerCache) {
    let (b, s1, f1) = x_in.dim();
    let (s2, f2) = (spec.seq_out, spec.features_out);

    // temporal scaling: X̃[b,s,f] = K[s]·X[b,s,f]
    let k_col = params.k.view().into_shape_with_order((1, s1, 1)).unwrap();
    let x_scaled = &x_in * &k_col;

    // feature map: Y = X̃ W + b, applied per time step
    let x2 = x_scaled
        .view()
        .into_shape_with_order((b * s1, f1))
        .expect("standard layout");
    let mut y2 = x2.dot(&params.w);
    y2 += &params.b;
    let y = reshape3(y2, (b, s1, f2));

    // feature scaling: Z = F ⊙ Y
    let f_row = params.fscale.view().into_shape_with_order((1, 1, f2)).unwrap();
    let z = &y * &f_row;

    // temporal map per feature channel: Ẑ[b,s',f] = Σ_s T[s,s']·Z[b,s,f] + c[s']
    let z_perm = z
        .view()
        .permuted_axes([0, 2, 1])
        .as_standard_layout()
        .into_owned();
    let z_mat = z_perm.into_shape_with_order((b * f2, s1)).unwrap();
    let zh_mat = z_mat.dot(&params.tmap); // (B·F2) × S2
    let zh_perm = reshape3(zh_mat, (b, f2, s2));
    let mut z_hat = zh_perm
        .view()
        .permuted_axes([0, 2, 1])
        .as_standard_layout()
        .into_owned();
    let c_col = params.c.view().into_shape_with_order((1, s2, 1)).unwrap();
    z_hat += &c_col;

    // zero-padded same-length temporal convolution:
    // out[b,t,f] = Σ_k C[k,f]·Ẑ[b,t+k,f] + d[f]
    let mut out = Array3::<f64>::zeros((b, s2, f2));
    for kk in 0..spec.kernel.min(s2) {
        let ck = params.conv.row(kk);
        let ck = ck.view().into_shape_with_order((1, 1, f2)).unwrap();
        let src = z_hat.slice(s![.., kk.., ..]);
        let mut dst = out.slice_mut(s![.., ..s2 - kk, ..]);
        dst += &(&src * &ck);
    }
    let d_row = params.d.view().into_shape_with_order((1, 1, f2)).unwrap();
    out += &d_row;

    (
        out,
        LayerCache {
            x_in,
            x_scaled,
            y,
            z,
            z_hat,
        },
    )
}

fn layer_backward(
    params: &TlnLayerParams,
    spec: &LayerSpec,
    cache: &LayerCache,
    grad_out: &Array3<f64>,
) -> (TlnLayerParams, Array3<f64>) {
    let (b, s1, f1) = cache.x_in.dim();
    let (s2, f2) = (spec.seq_out, spec.features_out);
    let mut g = TlnLayerParams::zeros(spec);

    // conv backward
    g.d.assign(&grad_out.sum_axis(Axis(0)).sum_axis(Axis(0)));
    let mut d_z_hat = Array3::<f64>::zeros((b, s2, f2));
    for kk in 0..spec.kernel.min(s2) {
        let go = grad_out.slice(s![.., ..s2 - kk, ..]);
        let zh = cache.z_hat.slice(s![.., kk.., ..]);
        // dC[k,f] = Σ_{b,t} dOut[b,t,f]·Ẑ[b,t+k,f]
        let prod = &go * &zh;
        g.conv
            .row_mut(kk)
            .assign(&prod.sum_axis(Axis(0)).sum_axis(Axis(0)));
        // dẐ[b,t+k,f] += C[k,f]·dOut[b,t,f]
        let ck = params.conv.row(kk);
        let ck = ck.view().into_shape_with_order((1, 1, f2)).unwrap();
        let mut dst = d_z_hat.slice_mut(s![.., kk.., ..]);
        dst += &(&go * &ck);
    }

    // temporal map backward
    g.c.assign(&d_z_hat.sum_axis(Axis(2)).sum_axis(Axis(0)));
    let z_perm = cache
        .z
        .view()
        .permuted_axes([0, 2, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * f2, s1))
        .unwrap();
    let dzh_perm = d_z_hat
        .view()
        .permuted_axes([0, 2, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * f2, s2))
        .unwrap();
    g.tmap.assign(&z_perm.t().dot(&dzh_perm));
    let dz_mat = dzh_perm.dot(&params.tmap.t()); // (B·F2) × S1
    let d_z = reshape3(dz_mat, (b, f2, s1))
        .permuted_axes([0, 2, 1])
        .as_standard_layout()
        .into_owned();

    // feature scaling backward
    let prod = &cache.y * &d_z;
    g.fscale
        .assign(&prod.sum_axis(Axis(0)).sum_axis(Axis(0)));
    let f_row = params.fscale.view().into_shape_with_order((1, 1, f2)).unwrap();
    let d_y = &d_z * &f_row;

    // feature map backward
    let dy2 = d_y
        .view()
        .into_shape_with_order((b * s1, f2))
        .expect("standard layout");
    g.b.assign(&dy2.sum_axis(Axis(0)));
    let x2 = cache
        .x_scaled
        .view()
        .into_shape_with_order((b * s1, f1))
        .expect("standard layout");
    g.w.assign(&x2.t().dot(&dy2));
    let dxs2 = dy2.dot(&params.w.t());
    let d_x_scaled = reshape3(dxs2, (b, s1, f1));

    // temporal scaling backward
    let prod = &cache.x_in * &d_x_scaled;
    g.k.assign(&prod.sum_axis(Axis(2)).sum_axis(Axis(0)));
    let k_col = params.k.view().into_shape_with_order((1, s1, 1)).unwrap();
    let d_x_in = &d_x_scaled * &k_col;

    (g, d_x_in)
}

/// Stacks window lookback matrices into a `B×S×F` batch.
pub fn batch_from_windows(windows: &[&FeatureWindow]) -> Result<Array3<f64>> {
    if windows.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let (s, f) = (windows[0].x.nrows(), windows[0].x.ncols());
    let mut batch = Array3::zeros((windows.len(), s, f));
    for (i, w) in windows.iter().enumerate() {
        if w.x.dim() != (s, f) {
            return Err(Error::Dimension("windows disagree on lookback shape".into()));
        }
        batch.slice_mut(s![i, .., ..]).assign(&w.x);
    }
    Ok(batch)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::objectives::tests::window;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    /// Reference evaluator: every layer equation applied with explicit loops,
    /// independent of the vectorized path.
    pub(crate) fn naive_forward(model: &TlnModel, batch: &Array3<f64>) -> (Array2<f64>, Array2<f64>) {
        let b = batch.dim().0;
        let mut x = batch.clone();
        for (params, spec) in model.layers.iter().zip(&model.spec.layers) {
            let (s1, f1, s2, f2) = (spec.seq_in, spec.features_in, spec.seq_out, spec.features_out);
            let mut xt = Array3::<f64>::zeros((b, s1, f1));
            for bi in 0..b {
                for si in 0..s1 {
                    for fi in 0..f1 {
                        xt[(bi, si, fi)] = params.k[si] * x[(bi, si, fi)];
                    }
                }
            }
            let mut y = Array3::<f64>::zeros((b, s1, f2));
            for bi in 0..b {
                for si in 0..s1 {
                    for fo in 0..f2 {
                        let mut acc = params.b[fo];
                        for fi in 0..f1 {
                            acc += xt[(bi, si, fi)] * params.w[(fi, fo)];
                        }
                        y[(bi, si, fo)] = acc;
                    }
                }
            }
            let mut z = Array3::<f64>::zeros((b, s1, f2));
            for bi in 0..b {
                for si in 0..s1 {
                    for fo in 0..f2 {
                        z[(bi, si, fo)] = params.fscale[fo] * y[(bi, si, fo)];
                    }
                }
            }
            let mut zh = Array3::<f64>::zeros((b, s2, f2));
            for bi in 0..b {
                for so in 0..s2 {
                    for fo in 0..f2 {
                        let mut acc = params.c[so];
                        for si in 0..s1 {
                            acc += params.tmap[(si, so)] * z[(bi, si, fo)];
                        }
                        zh[(bi, so, fo)] = acc;
                    }
                }
            }
            let mut out = Array3::<f64>::zeros((b, s2, f2));
            for bi in 0..b {
                for t in 0..s2 {
                    for fo in 0..f2 {
                        let mut acc = params.d[fo];
                        for kk in 0..spec.kernel {
                            if t + kk < s2 {
                                acc += params.conv[(kk, fo)] * zh[(bi, t + kk, fo)];
                            }
                        }
                        out[(bi, t, fo)] = acc;
                    }
                }
            }
            x = out;
        }
        let t = model.spec.horizon;
        let mut logits = Array2::<f64>::zeros((b, t));
        let mut allocation = Array2::<f64>::zeros((b, t));
        for bi in 0..b {
            for ti in 0..t {
                logits[(bi, ti)] = x[(bi, ti, 0)];
            }
            let denom: f64 = (0..t).map(|ti| logits[(bi, ti)].exp()).sum();
            for ti in 0..t {
                allocation[(bi, ti)] = logits[(bi, ti)].exp() / denom;
            }
        }
        (logits, allocation)
    }

    pub(crate) fn random_batch(b: usize, s: usize, f: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut batch = Array3::zeros((b, s, f));
        for v in batch.iter_mut() {
            *v = rng.random_range(-1.5..1.5);
        }
        batch
    }

    fn small_spec() -> TlnSpec {
        TlnSpec::from_stages(5, 3, 4, &[(4, 2, 2)]).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = TlnSpec {
            lookback: 5,
            features: 1,
            horizon: 5,
            layers: vec![LayerSpec {
                seq_in: 5,
                seq_out: 5,
                features_in: 1,
                features_out: 1,
                kernel: 1,
            }],
        };
        let mut model = init(&spec, 0).unwrap();
        let p = &mut model.layers[0];
        p.w[(0, 0)] = 1.0;
        p.tmap.assign(&Array2::eye(5));
        p.conv[(0, 0)] = 1.0;
        let batch = random_batch(2, 5, 1, 1);
        let fwd = model.forward(&batch).unwrap();
        for bi in 0..2 {
            for si in 0..5 {
                assert_abs_diff_eq!(fwd.logits[(bi, si)], batch[(bi, si, 0)], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn zero_input_with_zero_biases_gives_uniform_allocation() {
        let spec = small_spec();
        let model = init(&spec, 3).unwrap();
        let batch = Array3::zeros((2, 5, 3));
        let fwd = model.forward(&batch).unwrap();
        for row in fwd.allocation.rows() {
            for v in row {
                assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn fresh_model_allocations_lie_in_open_unit_interval() {
        let model = init(&small_spec(), 5).unwrap();
        let batch = random_batch(4, 5, 3, 6);
        let fwd = model.forward(&batch).unwrap();
        for v in fwd.allocation.iter() {
            assert!(*v > 0.0 && *v < 1.0);
        }
        for row in fwd.allocation.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn forward_matches_naive_equation_evaluator() {
        for seed in 0..10u64 {
            let spec = TlnSpec::from_stages(6, 3, 4, &[(5, 4, 3)]).unwrap();
            let mut model = init(&spec, seed).unwrap();
            // randomize every tensor, not only the maps
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            for layer in model.layers.iter_mut() {
                for tensor in layer.tensor_slices_mut() {
                    for v in tensor {
                        *v = rng.random_range(-0.9..0.9);
                    }
                }
            }
            let batch = random_batch(2, 6, 3, seed + 100);
            let fwd = model.forward(&batch).unwrap();
            let (naive_logits, naive_alloc) = naive_forward(&model, &batch);
            let max_diff = fwd
                .logits
                .iter()
                .zip(naive_logits.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_diff < 1e-10, "logit mismatch {max_diff}");
            let max_alloc = fwd
                .allocation
                .iter()
                .zip(naive_alloc.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_alloc < 1e-10, "allocation mismatch {max_alloc}");
        }
    }

    /// Central finite differences over every parameter.
    pub(crate) fn max_gradient_rel_error(
        model: &TlnModel,
        batch: &Array3<f64>,
        windows: &[&FeatureWindow],
        loss: LossKind,
        eps: f64,
    ) -> f64 {
        let analytic = model.backward(batch, windows, loss).unwrap();
        let mut worst: f64 = 0.0;
        let mut probe = model.clone();
        for li in 0..model.layers.len() {
            for ti in 0..8 {
                let len = model.layers[li].tensor_slices()[ti].len();
                for idx in 0..len {
                    let orig = model.layers[li].tensor_slices()[ti][idx];
                    probe.layers[li].tensor_slices_mut()[ti][idx] = orig + eps;
                    let up = probe.backward(batch, windows, loss).unwrap().loss;
                    probe.layers[li].tensor_slices_mut()[ti][idx] = orig - eps;
                    let down = probe.backward(batch, windows, loss).unwrap().loss;
                    probe.layers[li].tensor_slices_mut()[ti][idx] = orig;
                    let fd = (up - down) / (2.0 * eps);
                    let an = analytic.grads[li].tensor_slices()[ti][idx];
                    let rel = (an - fd).abs() / (1.0 + an.abs().max(fd.abs()));
                    worst = worst.max(rel);
                }
            }
        }
        worst
    }

    fn gradient_windows(n: usize, t: usize, seed: u64) -> Vec<FeatureWindow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let vols: Vec<f64> = (0..t).map(|_| rng.random_range(0.2..2.0)).collect();
                let prices: Vec<f64> = (0..t).map(|_| rng.random_range(90.0..110.0)).collect();
                window(&vols, &prices)
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let spec = small_spec();
        for (i, loss) in [
            LossKind::Absolute,
            LossKind::Quadratic,
            LossKind::Volume(VolumeNormalization::Horizon),
            LossKind::Volume(VolumeNormalization::Lookback),
        ]
        .into_iter()
        .enumerate()
        {
            let model = init(&spec, 20 + i as u64).unwrap();
            let windows = gradient_windows(3, 4, 30 + i as u64);
            let refs: Vec<&FeatureWindow> = windows.iter().collect();
            let batch = random_batch(3, 5, 3, 40 + i as u64);
            let err = max_gradient_rel_error(&model, &batch, &refs, loss, 1e-5);
            assert!(err < 1e-5, "{loss:?}: relative error {err}");
        }
    }

    #[test]
    fn logit_gradients_sum_to_zero_per_row() {
        // The final conv bias d (width 1) accumulates the per-row logit
        // gradient sums, which vanish by softmax shift invariance.
        let model = init(&small_spec(), 7).unwrap();
        let windows = gradient_windows(4, 4, 8);
        let refs: Vec<&FeatureWindow> = windows.iter().collect();
        let batch = random_batch(4, 5, 3, 9);
        for loss in [LossKind::Absolute, LossKind::Quadratic] {
            let pass = model.backward(&batch, &refs, loss).unwrap();
            let d_grad = &pass.grads.last().unwrap().d;
            assert!(d_grad[0].abs() < 1e-12, "sum over logit grads {}", d_grad[0]);
        }
    }

    #[test]
    fn quadratic_loss_zero_at_market_curve_model() {
        // Zero inputs and zero-initialized biases give a uniform allocation;
        // equal horizon volumes make the market curve uniform too.
        let model = init(&small_spec(), 11).unwrap();
        let windows: Vec<FeatureWindow> = (0..3)
            .map(|_| window(&[1.0, 1.0, 1.0, 1.0], &[100.0, 102.0, 98.0, 101.0]))
            .collect();
        let refs: Vec<&FeatureWindow> = windows.iter().collect();
        let batch = Array3::zeros((3, 5, 3));
        let pass = model.backward(&batch, &refs, LossKind::Quadratic).unwrap();
        assert_abs_diff_eq!(pass.loss, 0.0, epsilon = 1e-24);
        for g in &pass.grads {
            for tensor in g.tensor_slices() {
                for v in tensor {
                    assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-18);
                }
            }
        }
    }

    #[test]
    fn backward_loss_equals_objectives_mean() {
        let model = init(&small_spec(), 13).unwrap();
        let windows = gradient_windows(5, 4, 14);
        let refs: Vec<&FeatureWindow> = windows.iter().collect();
        let batch = random_batch(5, 5, 3, 15);
        for loss in [
            LossKind::Absolute,
            LossKind::Quadratic,
            LossKind::Volume(VolumeNormalization::Horizon),
        ] {
            let pass = model.backward(&batch, &refs, loss).unwrap();
            let fwd = model.forward(&batch).unwrap();
            let mut total = 0.0;
            for (i, w) in windows.iter().enumerate() {
                let q = AllocationCurve::new(fwd.allocation.row(i).to_vec()).unwrap();
                total += crate::objectives::window_loss(&q, w, loss).unwrap();
            }
            assert_abs_diff_eq!(pass.loss, total / windows.len() as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn undefined_windows_are_skipped_and_counted() {
        let model = init(&small_spec(), 17).unwrap();
        let good = window(&[1.0, 2.0, 3.0, 4.0], &[100.0, 101.0, 99.0, 100.0]);
        let dead = window(&[0.0, 0.0, 0.0, 0.0], &[100.0, 100.0, 100.0, 100.0]);
        let refs = vec![&good, &dead];
        let batch = random_batch(2, 5, 3, 18);
        let pass = model.backward(&batch, &refs, LossKind::Absolute).unwrap();
        assert_eq!(pass.skipped, 1);
        let solo = model
            .backward(&batch.slice(s![0..1, .., ..]).to_owned(), &[&good], LossKind::Absolute)
            .unwrap();
        assert_abs_diff_eq!(pass.loss, solo.loss, epsilon = 1e-15);
    }

    #[test]
    fn param_count_examples() {
        // single scalar layer: eight scalars
        let spec = TlnSpec {
            lookback: 1,
            features: 1,
            horizon: 1,
            layers: vec![LayerSpec {
                seq_in: 1,
                seq_out: 1,
                features_in: 1,
                features_out: 1,
                kernel: 1,
            }],
        };
        assert_eq!(init(&spec, 0).unwrap().param_count(), 8);

        // default two-layer config on the paper's shapes
        let spec = TlnSpec::default_two_layer(120, 33, 12);
        let model = init(&spec, 0).unwrap();
        let per_layer: usize = model.layers.iter().map(|l| l.param_count()).sum();
        assert_eq!(model.param_count(), per_layer);
        assert_eq!(model.flattened_regression_param_count(), 120 * 33 * 12 + 12);
        assert!(model.param_count() < model.flattened_regression_param_count());
        assert_eq!(model.param_count(), 4744);
    }

    #[test]
    fn init_is_seed_deterministic_and_seed_sensitive() {
        let spec = small_spec();
        let a = init(&spec, 42).unwrap();
        let b = init(&spec, 42).unwrap();
        assert_eq!(a, b);
        let mut distinct = std::collections::HashSet::new();
        for seed in 0..30u64 {
            let m = init(&spec, seed).unwrap();
            distinct.insert(format!("{:?}", m.layers[0].w));
        }
        assert_eq!(distinct.len(), 30);
    }

    #[test]
    fn allocation_invariant_to_logit_shift() {
        let mut shifted = init(&small_spec(), 23).unwrap();
        let base = shifted.clone();
        shifted.layers.last_mut().unwrap().d[0] += 5.0;
        let batch = random_batch(3, 5, 3, 24);
        let a = base.forward(&batch).unwrap().allocation;
        let b = shifted.forward(&batch).unwrap().allocation;
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn kernel_wider_than_sequence_still_yields_b_by_t() {
        let spec = TlnSpec::from_stages(6, 2, 3, &[(3, 2, 5)]).unwrap();
        let model = init(&spec, 29).unwrap();
        let batch = random_batch(2, 6, 2, 30);
        let fwd = model.forward(&batch).unwrap();
        assert_eq!(fwd.allocation.dim(), (2, 3));
        for row in fwd.allocation.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_parameters_and_meta() {
        let model = init(&small_spec(), 31).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tln");
        let meta = serde_json::json!({"loss": "absolute", "epochs": 7});
        model.save(&path, &meta).unwrap();
        let (loaded, loaded_meta) = TlnModel::load(&path).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(loaded_meta, meta);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let model = init(&small_spec(), 33).unwrap();
        let batch = random_batch(2, 6, 3, 34); // wrong lookback
        assert!(matches!(
            model.forward(&batch).unwrap_err(),
            Error::Dimension(_)
        ));
    }
}
