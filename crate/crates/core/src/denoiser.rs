//! x0-prediction denoisers: the exact posterior mean under an isotropic
//! Gaussian-mixture prior, and a small fully connected network trained with
//! the squared-error reconstruction loss.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_noise, DiffusionSchedule};
use crate::io::{f32_le_bytes, parse_f32_le, read_file, write_atomic};
use crate::par::{map_range, Parallelism};
use crate::tsdf::TsdfVolume;
use crate::{Error, Result, Vec3};

/// Encoding width per scalar: 16 sines followed by 16 cosines.
pub const PE_DIMS: usize = 32;
const PE_FREQS: usize = PE_DIMS / 2;

/// Sinusoidal encoding of one scalar. Angular frequencies are geometric
/// from 1 down to 1e-4 (wavelengths 2π to 2π·10⁴).
pub fn positional_encoding(x: f64) -> [f64; PE_DIMS] {
    let mut out = [0.0; PE_DIMS];
    for i in 0..PE_FREQS {
        let w = 1e4f64.powf(-(i as f64) / (PE_FREQS - 1) as f64);
        out[i] = (w * x).sin();
        out[PE_FREQS + i] = (w * x).cos();
    }
    out
}

/// `PE(ḡ) ++ PE(c̄) ++ context`, each coordinate encoded separately.
pub fn encode_conditioning(goal: &Vec3, contact: &Vec3, context: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * PE_DIMS + context.len());
    for p in [goal, contact] {
        for a in 0..3 {
            out.extend(positional_encoding(p[a]));
        }
    }
    out.extend_from_slice(context);
    out
}

/// Everything a denoiser sees at step `k`.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a> {
    pub tau_k: &'a [Vec3],
    /// Per-waypoint spatial feature (one TSDF value per waypoint).
    pub feature: &'a [f64],
    pub k: usize,
    pub conditioning: &'a [f64],
}

impl DenoiserInput<'_> {
    pub fn step_encoding(&self) -> [f64; PE_DIMS] {
        positional_encoding(self.k as f64)
    }
}

pub trait Denoiser: Sync {
    /// Trajectory length the denoiser was built for.
    fn horizon(&self) -> usize;

    /// Estimate of the clean trajectory.
    fn denoise(&self, input: &DenoiserInput, schedule: &DiffusionSchedule) -> Result<Vec<Vec3>>;

    /// Vector-Jacobian product of [`denoise`](Self::denoise) with respect to
    /// `tau_k` and `feature`. `None` when the denoiser cannot differentiate
    /// its inputs.
    fn input_vjp(
        &self,
        _input: &DenoiserInput,
        _schedule: &DiffusionSchedule,
        _upstream: &[Vec3],
    ) -> Option<Result<(Vec<Vec3>, Vec<f64>)>> {
        None
    }
}

// ---------------------------------------------------------------------------
// Gaussian mixture prior
// ---------------------------------------------------------------------------

/// Mixture of isotropic Gaussians over trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmPrior {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<Vec3>>,
    pub variances: Vec<f64>,
}

/// Per-component quantities of the posterior `p(τ⁰ | τ^k)`.
struct Posterior {
    resp: Vec<f64>,
    means: Vec<Vec<Vec3>>,
    vars: Vec<f64>,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<Vec3>>, variances: Vec<f64>) -> Result<Self> {
        let n = weights.len();
        if n == 0 || means.len() != n || variances.len() != n {
            return Err(Error::DimensionMismatch(
                "mixture needs matching nonempty weights, means, variances".into(),
            ));
        }
        let h = means[0].len();
        if h == 0 || means.iter().any(|m| m.len() != h) {
            return Err(Error::DimensionMismatch(
                "all component means need the same nonzero horizon".into(),
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidConfig(
                "mixture weights must be a probability vector".into(),
            ));
        }
        if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig(
                "mixture variances must be positive".into(),
            ));
        }
        Ok(GmmPrior {
            weights,
            means,
            variances,
        })
    }

    pub fn single(mean: Vec<Vec3>, variance: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    /// Straight line from `start` to `end` with `h` waypoints.
    pub fn straight_line(start: &Vec3, end: &Vec3, h: usize, variance: f64) -> Result<Self> {
        if h < 2 {
            return Err(Error::InvalidConfig("horizon must be at least 2".into()));
        }
        let mean = (0..h)
            .map(|i| start.lerp(end, i as f64 / (h - 1) as f64))
            .collect();
        Self::single(mean, variance)
    }

    fn posterior(
        &self,
        tau_k: &[Vec3],
        k: usize,
        schedule: &DiffusionSchedule,
    ) -> Result<Posterior> {
        if tau_k.len() != self.means[0].len() {
            return Err(Error::HorizonMismatch {
                expected: self.means[0].len(),
                got: tau_k.len(),
            });
        }
        let ab = schedule.alpha_bar_checked(k)?;
        let sab = ab.sqrt();
        let dim = (3 * tau_k.len()) as f64;
        let mut logr = Vec::with_capacity(self.weights.len());
        let mut means = Vec::with_capacity(self.weights.len());
        let mut vars = Vec::with_capacity(self.weights.len());
        for ((w, m), s2) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            let v = ab * s2 + (1.0 - ab);
            let d2: f64 = tau_k
                .iter()
                .zip(m)
                .map(|(t, mu)| (t - sab * mu).norm_squared())
                .sum();
            logr.push(w.ln() - 0.5 * dim * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * d2 / v);
            means.push(
                tau_k
                    .iter()
                    .zip(m)
                    .map(|(t, mu)| (sab * s2 * t + (1.0 - ab) * mu) / v)
                    .collect(),
            );
            vars.push(s2 * (1.0 - ab) / v);
        }
        let max = logr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::NumericalUnderflow(
                "every mixture component has zero likelihood".into(),
            ));
        }
        let mut resp: Vec<f64> = logr.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = resp.iter().sum();
        resp.iter_mut().for_each(|r| *r /= z);
        Ok(Posterior { resp, means, vars })
    }

    /// Responsibilities of each component given `τ^k`.
    pub fn responsibilities(
        &self,
        tau_k: &[Vec3],
        k: usize,
        schedule: &DiffusionSchedule,
    ) -> Result<Vec<f64>> {
        Ok(self.posterior(tau_k, k, schedule)?.resp)
    }

    /// `E[τ⁰ | τ^k]`.
    pub fn analytic_denoise(
        &self,
        tau_k: &[Vec3],
        k: usize,
        schedule: &DiffusionSchedule,
    ) -> Result<Vec<Vec3>> {
        let post = self.posterior(tau_k, k, schedule)?;
        let mut out = vec![Vec3::zeros(); tau_k.len()];
        for (r, m) in post.resp.iter().zip(&post.means) {
            for (o, mi) in out.iter_mut().zip(m) {
                *o += *r * mi;
            }
        }
        Ok(out)
    }
}

impl Denoiser for GmmPrior {
    fn horizon(&self) -> usize {
        self.means[0].len()
    }

    fn denoise(&self, input: &DenoiserInput, schedule: &DiffusionSchedule) -> Result<Vec<Vec3>> {
        self.analytic_denoise(input.tau_k, input.k, schedule)
    }

    /// The Jacobian of the posterior mean is `√ᾱ/(1−ᾱ) · Cov[τ⁰ | τ^k]`
    /// (symmetric), so the product is a covariance-vector product.
    fn input_vjp(
        &self,
        input: &DenoiserInput,
        schedule: &DiffusionSchedule,
        upstream: &[Vec3],
    ) -> Option<Result<(Vec<Vec3>, Vec<f64>)>> {
        let run = || -> Result<(Vec<Vec3>, Vec<f64>)> {
            let post = self.posterior(input.tau_k, input.k, schedule)?;
            let ab = schedule.alpha_bar_checked(input.k)?;
            let h = input.tau_k.len();
            let dot = |a: &[Vec3], b: &[Vec3]| a.iter().zip(b).map(|(x, y)| x.dot(y)).sum::<f64>();
            let mut mean = vec![Vec3::zeros(); h];
            let mut cov_g = vec![Vec3::zeros(); h];
            for ((r, m), v) in post.resp.iter().zip(&post.means).zip(&post.vars) {
                let mg = dot(m, upstream);
                for i in 0..h {
                    mean[i] += *r * m[i];
                    cov_g[i] += *r * (*v * upstream[i] + m[i] * mg);
                }
            }
            let meang = dot(&mean, upstream);
            let scale = ab.sqrt() / (1.0 - ab);
            let g = (0..h)
                .map(|i| scale * (cov_g[i] - mean[i] * meang))
                .collect();
            Ok((g, vec![0.0; h]))
        };
        Some(run())
    }
}

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

/// Fully connected layer `y = W x + b` with `W` of shape `n_out × n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Dense {
    pub fn n_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.w.nrows()
    }

    /// Columns of `x` are examples.
    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.w * x;
        for mut col in z.column_iter_mut() {
            col += &self.b;
        }
        z
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Per-coordinate affine map between data units and network units:
/// `network = (data − shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Coordinates whose spread is below this keep unit scale.
const MIN_SCALE: f64 = 1e-8;

impl Standardizer {
    pub fn identity(n: usize) -> Self {
        Standardizer {
            shift: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Mean and standard deviation of every coordinate over `rows`.
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let n = rows.first().map_or(0, Vec::len);
        let m = rows.len().max(1) as f64;
        let mut shift = vec![0.0; n];
        for r in rows {
            shift.iter_mut().zip(r).for_each(|(s, v)| *s += v / m);
        }
        let mut var = vec![0.0; n];
        for r in rows {
            for ((v, x), s) in var.iter_mut().zip(r).zip(&shift) {
                *v += (x - s).powi(2) / m;
            }
        }
        let scale = var
            .into_iter()
            .map(|v| if v.sqrt() > MIN_SCALE { v.sqrt() } else { 1.0 })
            .collect();
        Standardizer { shift, scale }
    }

    pub fn len(&self) -> usize {
        self.shift.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shift.is_empty()
    }

    fn to_network(&self, x: &mut DMatrix<f64>) {
        for mut col in x.column_iter_mut() {
            for ((v, s), c) in col.iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = (*v - s) / c;
            }
        }
    }

    fn to_data(&self, y: &mut DMatrix<f64>) {
        for mut col in y.column_iter_mut() {
            for ((v, s), c) in col.iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = *v * c + s;
            }
        }
    }

    /// Rescales a gradient between the two unit systems: `∂/∂data` ↔
    /// `∂/∂network` differ by the per-coordinate scale.
    fn scale_rows(&self, g: &mut DMatrix<f64>, inverse: bool) {
        for mut col in g.column_iter_mut() {
            for (v, c) in col.iter_mut().zip(&self.scale) {
                if inverse {
                    *v /= c;
                } else {
                    *v *= c;
                }
            }
        }
    }
}

/// Feed-forward x0 predictor over the flattened
/// `(τ^k, f^k, PE(k), conditioning)` vector. Inputs and outputs pass through
/// fixed standardizers; hidden layers use SiLU and the output layer is linear
/// with `3H` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    pub horizon: usize,
    pub cond_dim: usize,
    pub widths: Vec<usize>,
    pub layers: Vec<Dense>,
    pub input_norm: Standardizer,
    pub output_norm: Standardizer,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    widths: Vec<usize>,
    pe_dims: usize,
    horizon: usize,
    c_m: usize,
    cond_dim: usize,
    input_norm: Option<Standardizer>,
    output_norm: Option<Standardizer>,
}

/// Intermediate values from a forward pass, kept for backpropagation.
/// Columns are examples.
pub struct ForwardCache {
    /// Input to each layer (network units).
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<DMatrix<f64>>,
}

pub const DEFAULT_WIDTHS: [usize; 2] = [256, 256];

impl MlpDenoiser {
    pub fn input_dim(horizon: usize, cond_dim: usize) -> usize {
        3 * horizon + horizon + PE_DIMS + cond_dim
    }

    /// Every parameter zero, identity standardizers.
    pub fn zeros(horizon: usize, cond_dim: usize, widths: &[usize]) -> Self {
        let n_in = Self::input_dim(horizon, cond_dim);
        let mut dims = vec![n_in];
        dims.extend_from_slice(widths);
        dims.push(3 * horizon);
        let layers = dims
            .windows(2)
            .map(|d| Dense {
                w: DMatrix::zeros(d[1], d[0]),
                b: DVector::zeros(d[1]),
            })
            .collect();
        MlpDenoiser {
            horizon,
            cond_dim,
            widths: widths.to_vec(),
            layers,
            input_norm: Standardizer::identity(n_in),
            output_norm: Standardizer::identity(3 * horizon),
        }
    }

    /// Seeded uniform Glorot initialization, zero biases.
    pub fn new(horizon: usize, cond_dim: usize, widths: &[usize], seed: u64) -> Self {
        let mut net = Self::zeros(horizon, cond_dim, widths);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut net.layers {
            let (n_out, n_in) = (l.n_out(), l.n_in());
            let a = (6.0 / (n_in + n_out) as f64).sqrt();
            let w: Vec<f64> = (0..n_in * n_out).map(|_| rng.random_range(-a..a)).collect();
            l.w = DMatrix::from_row_slice(n_out, n_in, &w);
        }
        net
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Trainable parameters in declared order: per layer, weights (row-major)
    /// then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            for r in l.w.row_iter() {
                p.extend(r.iter());
            }
            p.extend(l.b.iter());
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters, expected {}",
                p.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let (n_out, n_in) = (l.n_out(), l.n_in());
            l.w = DMatrix::from_row_slice(n_out, n_in, &p[off..off + n_out * n_in]);
            off += n_out * n_in;
            l.b.copy_from_slice(&p[off..off + n_out]);
            off += n_out;
        }
        Ok(())
    }

    /// Flattened network input in data units.
    pub fn input_vector(&self, input: &DenoiserInput) -> Result<Vec<f64>> {
        if input.tau_k.len() != self.horizon {
            return Err(Error::HorizonMismatch {
                expected: self.horizon,
                got: input.tau_k.len(),
            });
        }
        if input.feature.len() != self.horizon || input.conditioning.len() != self.cond_dim {
            return Err(Error::DimensionMismatch(format!(
                "feature {} / conditioning {} vs expected {} / {}",
                input.feature.len(),
                input.conditioning.len(),
                self.horizon,
                self.cond_dim
            )));
        }
        let mut x = Vec::with_capacity(Self::input_dim(self.horizon, self.cond_dim));
        for t in input.tau_k {
            x.extend_from_slice(t.as_slice());
        }
        x.extend_from_slice(input.feature);
        x.extend(input.step_encoding());
        x.extend_from_slice(input.conditioning);
        Ok(x)
    }

    /// Forward pass over the columns of `x` (data units in and out).
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, ForwardCache) {
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len() - 1),
        };
        let mut h = x.clone();
        self.input_norm.to_network(&mut h);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.forward(&h);
            cache.inputs.push(h);
            if i == last {
                self.output_norm.to_data(&mut z);
                return (z, cache);
            }
            h = z.map(silu);
            cache.pre.push(z);
        }
        unreachable!("network has at least one layer")
    }

    /// Backpropagates `dy` (gradient w.r.t. the outputs, data units). Parameter
    /// gradients are added into `grad` (declared order); returns the gradient
    /// w.r.t. the inputs in data units.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        dy: &DMatrix<f64>,
        mut grad: Option<&mut [f64]>,
    ) -> DMatrix<f64> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.w.len() + l.b.len();
        }
        let mut d = dy.clone();
        self.output_norm.scale_rows(&mut d, false);
        for (i, l) in self.layers.iter().enumerate().rev() {
            if let Some(g) = grad.as_deref_mut() {
                let gw = &d * cache.inputs[i].transpose();
                let n_in = l.n_in();
                let gl = &mut g[offsets[i]..offsets[i] + l.w.len() + l.b.len()];
                for o in 0..l.n_out() {
                    for (a, v) in gl[o * n_in..(o + 1) * n_in].iter_mut().zip(gw.row(o).iter()) {
                        *a += v;
                    }
                }
                for (a, r) in gl[l.w.len()..].iter_mut().zip(d.row_iter()) {
                    *a += r.sum();
                }
            }
            let mut dx = l.w.tr_mul(&d);
            if i > 0 {
                dx.zip_apply(&cache.pre[i - 1], |v, z| *v *= silu_grad(z));
            }
            d = dx;
        }
        self.input_norm.scale_rows(&mut d, true);
        d
    }

    pub fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, ForwardCache) {
        let (y, cache) = self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x));
        (y.as_slice().to_vec(), cache)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).0
    }

    /// Single-example [`backward_batch`](Self::backward_batch).
    pub fn backward(&self, cache: &ForwardCache, dy: &[f64], grad: Option<&mut [f64]>) -> Vec<f64> {
        let dy = DMatrix::from_column_slice(dy.len(), 1, dy);
        self.backward_batch(cache, &dy, grad).as_slice().to_vec()
    }

    fn unflatten(&self, y: &[f64]) -> Vec<Vec3> {
        y.chunks_exact(3)
            .map(|c| Vec3::new(c[0], c[1], c[2]))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ModelHeader {
            widths: self.widths.clone(),
            pe_dims: PE_DIMS,
            horizon: self.horizon,
            c_m: 1,
            cond_dim: self.cond_dim,
            input_norm: Some(self.input_norm.clone()),
            output_norm: Some(self.output_norm.clone()),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.extend(f32_le_bytes(self.params().into_iter().map(|p| p as f32)));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::ModelFormat("missing header line".into()))?;
        let h: ModelHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::ModelFormat(format!("bad header: {e}")))?;
        if h.pe_dims != PE_DIMS || h.c_m != 1 || h.horizon == 0 {
            return Err(Error::ModelFormat(format!(
                "unsupported layout: pe_dims {}, c_m {}, horizon {}",
                h.pe_dims, h.c_m, h.horizon
            )));
        }
        let mut net = Self::zeros(h.horizon, h.cond_dim, &h.widths);
        let body = &bytes[nl + 1..];
        if body.len() != 4 * net.param_count() {
            return Err(Error::ModelFormat(format!(
                "expected {} parameter bytes, got {}",
                4 * net.param_count(),
                body.len()
            )));
        }
        let p: Vec<f64> = parse_f32_le(body).into_iter().map(f64::from).collect();
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::ModelFormat("non-finite parameter".into()));
        }
        net.set_params(&p)?;
        for (norm, dim, slot) in [
            (h.input_norm, net.input_norm.len(), &mut net.input_norm),
            (h.output_norm, net.output_norm.len(), &mut net.output_norm),
        ] {
            if let Some(n) = norm {
                if n.shift.len() != dim || n.scale.len() != dim || n.scale.iter().any(|s| !(*s > 0.0)) {
                    return Err(Error::ModelFormat("bad standardizer".into()));
                }
                *slot = n;
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

impl Denoiser for MlpDenoiser {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn denoise(&self, input: &DenoiserInput, _schedule: &DiffusionSchedule) -> Result<Vec<Vec3>> {
        let x = self.input_vector(input)?;
        Ok(self.unflatten(&self.forward(&x)))
    }

    fn input_vjp(
        &self,
        input: &DenoiserInput,
        _schedule: &DiffusionSchedule,
        upstream: &[Vec3],
    ) -> Option<Result<(Vec<Vec3>, Vec<f64>)>> {
        let run = || -> Result<(Vec<Vec3>, Vec<f64>)> {
            let x = self.input_vector(input)?;
            let (_, cache) = self.forward_cached(&x);
            let dy: Vec<f64> = upstream.iter().flat_map(|g| [g.x, g.y, g.z]).collect();
            let dx = self.backward(&cache, &dy, None);
            let h = self.horizon;
            Ok((self.unflatten(&dx[..3 * h]), dx[3 * h..4 * h].to_vec()))
        };
        Some(run())
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Per-waypoint spatial feature: the volume's value at each waypoint, or +1
/// (free space) without a volume.
pub fn spatial_features(tau: &[Vec3], volume: Option<&TsdfVolume>) -> Vec<f64> {
    match volume {
        Some(v) => tau.iter().map(|p| v.query(p)).collect(),
        None => vec![1.0; tau.len()],
    }
}

/// One supervised trajectory with its encoded conditioning.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub trajectory: Vec<Vec3>,
    pub conditioning: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fit the input/output standardizers to the dataset before training.
    pub normalize: bool,
    pub parallelism: Parallelism,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 2000,
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 8,
            seed: 0,
            normalize: true,
            parallelism: Parallelism::default(),
        }
    }
}

/// Minibatch loss after every update step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
}

impl TrainReport {
    /// Median of the first and last `frac` of the loss curve.
    pub fn head_tail_medians(&self, frac: f64) -> (f64, f64) {
        let n = self.loss_curve.len();
        let m = ((n as f64 * frac).ceil() as usize).clamp(1, n.max(1));
        (
            median(&self.loss_curve[..m]),
            median(&self.loss_curve[n - m..]),
        )
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Noised draws used to fit the input standardizer.
const NORM_DRAWS: usize = 8;

/// Examples per matrix pass; minibatch chunks are reduced in order, so the
/// result does not depend on the thread count.
const CHUNK: usize = 8;

/// Standardizers from the dataset: outputs from the clean trajectories,
/// inputs from noised copies at uniformly drawn steps.
pub fn fit_normalization(
    net: &mut MlpDenoiser,
    data: &[TrainingExample],
    schedule: &DiffusionSchedule,
    volume: Option<&TsdfVolume>,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5ca1e);
    let mut inputs = Vec::with_capacity(data.len() * NORM_DRAWS);
    for ex in data {
        for _ in 0..NORM_DRAWS {
            let k = rng.random_range(1..=schedule.steps());
            let (tau_k, _) = forward_noise(&ex.trajectory, k, schedule, &mut rng)?;
            let feature = spatial_features(&tau_k, volume);
            inputs.push(net.input_vector(&DenoiserInput {
                tau_k: &tau_k,
                feature: &feature,
                k,
                conditioning: &ex.conditioning,
            })?);
        }
    }
    let outputs: Vec<Vec<f64>> = data
        .iter()
        .map(|ex| ex.trajectory.iter().flat_map(|t| [t.x, t.y, t.z]).collect())
        .collect();
    net.input_norm = Standardizer::fit(&inputs);
    net.output_norm = Standardizer::fit(&outputs);
    Ok(())
}

/// Summed loss `Σ ‖τ̂ − τ̄⁰‖²` over the columns of `x`/`target`; parameter
/// gradients are added into `grad`.
fn batch_loss_gradient(
    net: &MlpDenoiser,
    x: &DMatrix<f64>,
    target: &DMatrix<f64>,
    grad: &mut [f64],
) -> f64 {
    let (y, cache) = net.forward_batch(x);
    let r = y - target;
    let loss = r.norm_squared();
    net.backward_batch(&cache, &(r * 2.0), Some(grad));
    loss
}

/// Train with minibatch SGD + momentum on the x0 reconstruction loss. Each
/// example is noised at a uniformly drawn step `k`; with a volume the
/// spatial feature is queried at the noised waypoints, as during sampling.
pub fn mlp_train(
    net: &mut MlpDenoiser,
    data: &[TrainingExample],
    schedule: &DiffusionSchedule,
    volume: Option<&TsdfVolume>,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if opts.batch_size == 0 || !(opts.lr >= 0.0) || !(0.0..1.0).contains(&opts.momentum) {
        return Err(Error::InvalidConfig(
            "batch size must be positive, lr >= 0, momentum in [0, 1)".into(),
        ));
    }
    for ex in data {
        if ex.trajectory.len() != net.horizon {
            return Err(Error::HorizonMismatch {
                expected: net.horizon,
                got: ex.trajectory.len(),
            });
        }
        if ex.conditioning.len() != net.cond_dim {
            return Err(Error::DimensionMismatch(format!(
                "conditioning {} vs expected {}",
                ex.conditioning.len(),
                net.cond_dim
            )));
        }
    }
    if opts.normalize {
        fit_normalization(net, data, schedule, volume, opts.seed)?;
    }
    let n_in = MlpDenoiser::input_dim(net.horizon, net.cond_dim);
    let n_out = 3 * net.horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = net.params();
    let mut velocity = vec![0.0; params.len()];
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _ in 0..opts.epochs {
        // Fisher-Yates with the training RNG
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(opts.batch_size) {
            let mut xs = Vec::with_capacity(batch.len() * n_in);
            let mut ts = Vec::with_capacity(batch.len() * n_out);
            for &i in batch {
                let ex = &data[i];
                let k = rng.random_range(1..=schedule.steps());
                let (tau_k, _) = forward_noise(&ex.trajectory, k, schedule, &mut rng)?;
                let feature = spatial_features(&tau_k, volume);
                xs.extend(net.input_vector(&DenoiserInput {
                    tau_k: &tau_k,
                    feature: &feature,
                    k,
                    conditioning: &ex.conditioning,
                })?);
                ts.extend(ex.trajectory.iter().flat_map(|t| [t.x, t.y, t.z]));
            }
            let n_chunks = batch.len().div_ceil(CHUNK);
            let net_ref = &*net;
            let results = map_range(n_chunks, opts.parallelism, |c| {
                let lo = c * CHUNK;
                let hi = ((c + 1) * CHUNK).min(batch.len());
                let x = DMatrix::from_column_slice(n_in, hi - lo, &xs[lo * n_in..hi * n_in]);
                let t = DMatrix::from_column_slice(n_out, hi - lo, &ts[lo * n_out..hi * n_out]);
                let mut g = vec![0.0; params.len()];
                let l = batch_loss_gradient(net_ref, &x, &t, &mut g);
                (l, g)
            });
            let mut loss = 0.0;
            let mut grad = vec![0.0; params.len()];
            for (l, g) in results {
                loss += l;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            let inv = 1.0 / batch.len() as f64;
            loss *= inv;
            if !loss.is_finite() {
                return Err(Error::DivergedTraining(step));
            }
            curve.push(loss);
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = opts.momentum * *v + g * inv;
                *p -= opts.lr * *v;
            }
            net.set_params(&params)?;
            step += 1;
        }
    }
    Ok(TrainReport { loss_curve: curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};

    fn sched() -> DiffusionSchedule {
        DiffusionSchedule::default()
    }

    #[test]
    fn encoding_layout() {
        let pe = positional_encoding(0.0);
        assert!(pe[..16].iter().all(|v| *v == 0.0));
        assert!(pe[16..].iter().all(|v| *v == 1.0));
        let pe = positional_encoding(2.0);
        assert!((pe[0] - 2f64.sin()).abs() < 1e-15);
        assert!((pe[15] - (2e-4f64).sin()).abs() < 1e-15);
        let c = encode_conditioning(&Vec3::new(1.0, 2.0, 3.0), &Vec3::zeros(), &[7.0]);
        assert_eq!(c.len(), 6 * PE_DIMS + 1);
        assert_eq!(c[6 * PE_DIMS], 7.0);
    }

    #[test]
    fn single_component_limits() {
        let m = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.5, 0.0)];
        let tau = vec![Vec3::new(0.3, -0.2, 0.1), Vec3::new(0.0, 1.0, 2.0)];
        // almost no noise: prediction is the observation
        let nearly_clean = make_schedule(1, 1e-12, 1e-12, ScheduleKind::Linear).unwrap();
        let p = GmmPrior::single(m.clone(), 0.5).unwrap();
        let x = p.analytic_denoise(&tau, 1, &nearly_clean).unwrap();
        for (a, b) in x.iter().zip(&tau) {
            assert!((a - b / (1.0 - 1e-12f64).sqrt()).norm() < 1e-9);
        }
        // point prior: prediction is the mean
        let p = GmmPrior::single(m.clone(), 1e-14).unwrap();
        let x = p.analytic_denoise(&tau, 50, &sched()).unwrap();
        for (a, b) in x.iter().zip(&m) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    /// E[x0 | xk] for a 1-D two-component mixture by dense quadrature.
    fn quadrature(prior: &GmmPrior, xk: f64, ab: f64) -> f64 {
        let (lo, hi, n) = (-12.0, 12.0, 400_000);
        let dx = (hi - lo) / n as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..=n {
            let x0 = lo + i as f64 * dx;
            let mut p0 = 0.0;
            for ((w, m), v) in prior.weights.iter().zip(&prior.means).zip(&prior.variances) {
                p0 += w * (-(x0 - m[0].x).powi(2) / (2.0 * v)).exp()
                    / (2.0 * std::f64::consts::PI * v).sqrt();
            }
            let lik = (-(xk - ab.sqrt() * x0).powi(2) / (2.0 * (1.0 - ab))).exp();
            let wgt = if i == 0 || i == n { 0.5 } else { 1.0 };
            num += wgt * x0 * p0 * lik;
            den += wgt * p0 * lik;
        }
        num / den
    }

    #[test]
    fn two_components_match_quadrature() {
        // only the x coordinate is informative: y, z means are 0 and observed at 0
        let prior = GmmPrior::new(
            vec![0.3, 0.7],
            vec![
                vec![Vec3::new(-1.5, 0.0, 0.0)],
                vec![Vec3::new(2.0, 0.0, 0.0)],
            ],
            vec![0.4, 0.9],
        )
        .unwrap();
        let s = sched();
        for &k in &[5usize, 20, 60] {
            let ab = s.alpha_bar(k);
            for &xk in &[-1.0, 0.2, 1.7] {
                // y/z observations at 0 contribute identical factors to both
                // components only when the variances match, so compare the
                // full 3-D posterior against a 1-D quadrature with the same
                // per-component y/z evidence folded into the weights.
                let tau = vec![Vec3::new(xk, 0.0, 0.0)];
                let got = prior.analytic_denoise(&tau, k, &s).unwrap()[0].x;
                let mut w2 = prior.weights.clone();
                for (j, v) in prior.variances.iter().enumerate() {
                    let var = ab * v + 1.0 - ab;
                    w2[j] *= 1.0 / (2.0 * std::f64::consts::PI * var); // y and z factors
                }
                let z: f64 = w2.iter().sum();
                let folded = GmmPrior {
                    weights: w2.iter().map(|w| w / z).collect(),
                    ..prior.clone()
                };
                let want = quadrature(&folded, xk, ab);
                assert!((got - want).abs() < 1e-6, "k {k} xk {xk}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn responsibilities_sum_and_permute() {
        let a = vec![Vec3::new(0.0, 0.0, 1.0); 3];
        let b = vec![Vec3::new(0.5, 0.0, 1.0); 3];
        let c = vec![Vec3::new(0.0, -0.5, 1.0); 3];
        let p1 = GmmPrior::new(
            vec![0.2, 0.5, 0.3],
            vec![a.clone(), b.clone(), c.clone()],
            vec![0.1, 0.2, 0.3],
        )
        .unwrap();
        let p2 = GmmPrior::new(vec![0.3, 0.2, 0.5], vec![c, a, b], vec![0.3, 0.1, 0.2]).unwrap();
        let tau = vec![
            Vec3::new(0.1, 0.2, 0.3),
            Vec3::new(0.0, 0.0, 0.5),
            Vec3::new(-0.2, 0.1, 0.9),
        ];
        let s = sched();
        let r1 = p1.responsibilities(&tau, 30, &s).unwrap();
        let r2 = p2.responsibilities(&tau, 30, &s).unwrap();
        assert!((r1.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(
            (r1[0] - r2[1]).abs() < 1e-12
                && (r1[1] - r2[2]).abs() < 1e-12
                && (r1[2] - r2[0]).abs() < 1e-12
        );
        let x1 = p1.analytic_denoise(&tau, 30, &s).unwrap();
        let x2 = p2.analytic_denoise(&tau, 30, &s).unwrap();
        for (a, b) in x1.iter().zip(&x2) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn far_observation_does_not_underflow() {
        let p = GmmPrior::new(
            vec![0.5, 0.5],
            vec![vec![Vec3::zeros()], vec![Vec3::x()]],
            vec![1e-6, 1e-6],
        )
        .unwrap();
        let tau = [Vec3::new(1e4, 0.0, 0.0)];
        let x = p.analytic_denoise(&tau, 1, &sched()).unwrap();
        assert!(x[0].iter().all(|v| v.is_finite()));
        let r = p.responsibilities(&tau, 1, &sched()).unwrap();
        assert_eq!(r, vec![0.0, 1.0]);
    }

    #[test]
    fn gmm_vjp_matches_finite_differences() {
        let p = GmmPrior::new(
            vec![0.4, 0.6],
            vec![
                vec![Vec3::new(0.0, 0.1, 1.0), Vec3::new(0.2, 0.0, 1.1)],
                vec![Vec3::new(-0.3, 0.2, 0.9), Vec3::new(0.1, -0.1, 1.3)],
            ],
            vec![0.05, 0.2],
        )
        .unwrap();
        let s = sched();
        let tau = vec![Vec3::new(0.1, 0.0, 0.7), Vec3::new(-0.1, 0.3, 0.8)];
        let up = vec![Vec3::new(0.3, -1.0, 0.5), Vec3::new(2.0, 0.1, -0.4)];
        for &k in &[3usize, 15, 40] {
            let inp = DenoiserInput {
                tau_k: &tau,
                feature: &[1.0, 1.0],
                k,
                conditioning: &[],
            };
            let (g, _) = p.input_vjp(&inp, &s, &up).unwrap().unwrap();
            let f = |t: &[Vec3]| -> f64 {
                p.analytic_denoise(t, k, &s)
                    .unwrap()
                    .iter()
                    .zip(&up)
                    .map(|(a, b)| a.dot(b))
                    .sum()
            };
            for h in 0..2 {
                for a in 0..3 {
                    let eps = 1e-6;
                    let mut tp = tau.clone();
                    let mut tm = tau.clone();
                    tp[h][a] += eps;
                    tm[h][a] -= eps;
                    let fd = (f(&tp) - f(&tm)) / (2.0 * eps);
                    assert!(
                        (fd - g[h][a]).abs() < 1e-6 * fd.abs().max(1.0),
                        "k {k}: {fd} vs {}",
                        g[h][a]
                    );
                }
            }
        }
    }

    fn tiny_input(h: usize, cond: usize) -> (Vec<Vec3>, Vec<f64>, Vec<f64>) {
        let tau = (0..h)
            .map(|i| Vec3::new(0.1 * i as f64, -0.05 * i as f64, 1.0 + 0.02 * i as f64))
            .collect();
        let feat = (0..h).map(|i| 0.5 - 0.1 * i as f64).collect();
        let c = (0..cond).map(|i| (i as f64 * 0.37).sin()).collect();
        (tau, feat, c)
    }

    #[test]
    fn zero_network_outputs_zero_and_forward_is_deterministic() {
        let (tau, feat, c) = tiny_input(4, 5);
        let inp = DenoiserInput {
            tau_k: &tau,
            feature: &feat,
            k: 7,
            conditioning: &c,
        };
        let z = MlpDenoiser::zeros(4, 5, &[8, 8]);
        assert!(z
            .denoise(&inp, &sched())
            .unwrap()
            .iter()
            .all(|v| *v == Vec3::zeros()));
        let a = MlpDenoiser::new(4, 5, &[8, 8], 11);
        let b = MlpDenoiser::new(4, 5, &[8, 8], 11);
        assert_eq!(
            a.denoise(&inp, &sched()).unwrap(),
            b.denoise(&inp, &sched()).unwrap()
        );
        let bad = DenoiserInput {
            tau_k: &tau[..3],
            ..inp
        };
        assert!(matches!(
            a.denoise(&bad, &sched()),
            Err(Error::HorizonMismatch { .. })
        ));
        let bad = DenoiserInput {
            conditioning: &c[..2],
            ..inp
        };
        assert!(matches!(
            a.denoise(&bad, &sched()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    /// A network with nonzero biases and non-trivial standardizers, so every
    /// code path is exercised.
    fn busy_net(h: usize, cond: usize, seed: u64) -> MlpDenoiser {
        let mut net = MlpDenoiser::new(h, cond, &[8, 8], seed);
        let mut p = net.params();
        for (i, v) in p.iter_mut().enumerate() {
            *v += 0.01 * ((i as f64) * 0.7).cos();
        }
        net.set_params(&p).unwrap();
        let n_in = net.input_norm.len();
        net.input_norm.shift = (0..n_in).map(|i| 0.1 * (i as f64).sin()).collect();
        net.input_norm.scale = (0..n_in).map(|i| 0.5 + 0.01 * i as f64).collect();
        net.output_norm.shift = (0..3 * h).map(|i| 0.2 * i as f64).collect();
        net.output_norm.scale = (0..3 * h).map(|i| 0.3 + 0.1 * i as f64).collect();
        net
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let (h, cond) = (3, 4);
        let net = busy_net(h, cond, 5);
        let n_in = MlpDenoiser::input_dim(h, cond);
        let x = DMatrix::from_fn(n_in, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
        let t = DMatrix::from_fn(3 * h, 3, |i, j| ((i + 5 * j) as f64 * 0.11).cos());
        let p = net.params();
        let mut g = vec![0.0; p.len()];
        batch_loss_gradient(&net, &x, &t, &mut g);
        let loss_at = |q: &[f64]| {
            let mut n2 = net.clone();
            n2.set_params(q).unwrap();
            batch_loss_gradient(&n2, &x, &t, &mut vec![0.0; q.len()])
        };
        let mut worst: f64 = 0.0;
        for i in 0..p.len() {
            let eps = 1e-6;
            let mut qp = p.clone();
            let mut qm = p.clone();
            qp[i] += eps;
            qm[i] -= eps;
            let fd = (loss_at(&qp) - loss_at(&qm)) / (2.0 * eps);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
        // batched and per-example passes agree
        let (yb, _) = net.forward_batch(&x);
        for j in 0..3 {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            let y = net.forward(&col);
            for (a, b) in y.iter().zip(yb.column(j).iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn standardizer_fit() {
        let rows = vec![vec![1.0, 5.0], vec![3.0, 5.0]];
        let s = Standardizer::fit(&rows);
        assert_eq!(s.shift, vec![2.0, 5.0]);
        assert_eq!(s.scale, vec![1.0, 1.0]);
        let rows = vec![vec![0.0], vec![4.0]];
        assert_eq!(Standardizer::fit(&rows).scale, vec![2.0]);
    }

    #[test]
    fn input_jacobian_matches_finite_differences() {
        let (tau, feat, c) = tiny_input(3, 4);
        let net = busy_net(3, 4, 6);
        let up: Vec<Vec3> = (0..3)
            .map(|i| Vec3::new(1.0, -0.5 * i as f64, 0.25))
            .collect();
        let s = sched();
        let inp = DenoiserInput {
            tau_k: &tau,
            feature: &feat,
            k: 4,
            conditioning: &c,
        };
        let (gt, gf) = net.input_vjp(&inp, &s, &up).unwrap().unwrap();
        let f = |t: &[Vec3], fe: &[f64]| -> f64 {
            let i = DenoiserInput {
                tau_k: t,
                feature: fe,
                k: 4,
                conditioning: &c,
            };
            net.denoise(&i, &s)
                .unwrap()
                .iter()
                .zip(&up)
                .map(|(a, b)| a.dot(b))
                .sum()
        };
        let eps = 1e-6;
        for h in 0..3 {
            for a in 0..3 {
                let (mut tp, mut tm) = (tau.clone(), tau.clone());
                tp[h][a] += eps;
                tm[h][a] -= eps;
                let fd = (f(&tp, &feat) - f(&tm, &feat)) / (2.0 * eps);
                assert!((fd - gt[h][a]).abs() < 1e-4 * fd.abs().max(1e-3));
            }
            let (mut fp, mut fm) = (feat.clone(), feat.clone());
            fp[h] += eps;
            fm[h] -= eps;
            let fd = (f(&tau, &fp) - f(&tau, &fm)) / (2.0 * eps);
            assert!((fd - gf[h]).abs() < 1e-4 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let traj: Vec<Vec3> = (0..4)
            .map(|i| Vec3::new(0.0, 0.0, 1.0 + 0.1 * i as f64))
            .collect();
        let data = vec![TrainingExample {
            trajectory: traj,
            conditioning: vec![0.0; 2],
        }];
        let mut net = MlpDenoiser::new(4, 2, &[8], 1);
        let before = net.clone();
        let opts = TrainOptions {
            epochs: 20,
            lr: 0.0,
            batch_size: 1,
            ..Default::default()
        };
        let rep = mlp_train(&mut net, &data, &sched(), None, &opts).unwrap();
        assert_eq!(net.params(), before.params());
        assert_eq!(rep.loss_curve.len(), 20);
        assert!(matches!(
            mlp_train(&mut net, &[], &sched(), None, &opts),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn constant_trajectory_is_learned() {
        let traj: Vec<Vec3> = (0..4)
            .map(|i| Vec3::new(0.05 * i as f64, 0.0, 1.0 + 0.1 * i as f64))
            .collect();
        let data = vec![TrainingExample {
            trajectory: traj,
            conditioning: vec![0.0; 2],
        }];
        let mut net = MlpDenoiser::new(4, 2, &[32, 32], 2);
        let opts = TrainOptions {
            epochs: 1500,
            batch_size: 1,
            seed: 3,
            ..Default::default()
        };
        let rep = mlp_train(&mut net, &data, &sched(), None, &opts).unwrap();
        let (head, tail) = rep.head_tail_medians(0.1);
        assert!(
            tail < 0.01 * rep.loss_curve[0],
            "loss {} -> {tail} (head median {head})",
            rep.loss_curve[0]
        );
    }

    #[test]
    fn model_bytes_round_trip() {
        let mut net = MlpDenoiser::new(4, 3, &[8, 6], 7);
        net.input_norm.shift[2] = 0.123456789012345;
        net.output_norm.scale[1] = 0.3;
        let back = MlpDenoiser::from_bytes(&net.to_bytes()).unwrap();
        assert_eq!(back.widths, net.widths);
        assert_eq!(back.input_norm, net.input_norm);
        assert_eq!(back.output_norm, net.output_norm);
        for (a, b) in back.params().iter().zip(net.params()) {
            assert_eq!(*a, b as f32 as f64);
        }
        assert!(matches!(
            MlpDenoiser::from_bytes(b"nope"),
            Err(Error::ModelFormat(_))
        ));
    }
}
