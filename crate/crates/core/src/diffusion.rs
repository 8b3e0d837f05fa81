//! DDPM schedule, closed-form forward noising, the x0-parameterized reverse
//! step, reconstruction guidance, batch sampling and cost ranking.
//!
//! Steps are 1-based: `k = 1..=K`, with `ᾱ_0 = 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::costs::{cost_total, CostReport, GuidanceConfig};
use crate::denoiser::{spatial_features, Denoiser, DenoiserInput};
use crate::par::{try_map_range, Parallelism};
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    Linear,
    /// Squared-cosine `ᾱ` (offset 0.008), with β clipped into
    /// `[beta_start, beta_end]`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    /// Index `k - 1` holds step `k`.
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Posterior variance `β_k (1 − ᾱ_{k−1}) / (1 − ᾱ_k)`; zero at `k = 1`.
    pub sigma2: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.2;

impl Default for DiffusionSchedule {
    fn default() -> Self {
        make_schedule(
            DEFAULT_STEPS,
            DEFAULT_BETA_START,
            DEFAULT_BETA_END,
            ScheduleKind::Linear,
        )
        .expect("default schedule is valid")
    }
}

pub fn make_schedule(
    k: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<DiffusionSchedule> {
    if k == 0 {
        return Err(Error::BadScheduleParams("K must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::BadScheduleParams(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..k)
            .map(|i| {
                if k == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (k - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| {
                ((t / k as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2)
            };
            (1..=k)
                .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(beta_start, beta_end))
                .collect()
        }
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(k);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let sigma2 = (0..k)
        .map(|i| {
            if i == 0 {
                0.0
            } else {
                beta[i] * (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i])
            }
        })
        .collect();
    Ok(DiffusionSchedule {
        kind,
        beta,
        alpha,
        alpha_bar,
        sigma2,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(Error::BadStepIndex {
                k,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// `ᾱ_k` for `k` in `0..=K` (`ᾱ_0 = 1`). Panics outside that range.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bar[k - 1]
        }
    }

    pub fn alpha_bar_checked(&self, k: usize) -> Result<f64> {
        self.check(k)?;
        Ok(self.alpha_bar(k))
    }

    pub fn sigma2_at(&self, k: usize) -> Result<f64> {
        self.check(k)?;
        Ok(self.sigma2[k - 1])
    }

    /// Coefficients `(c_x0, c_tau)` of the posterior mean
    /// `μ = c_x0 · x0 + c_tau · τ^k`.
    pub fn posterior_coefficients(&self, k: usize) -> Result<(f64, f64)> {
        self.check(k)?;
        if k == 1 {
            // ᾱ_0 = 1: the mean is the clean estimate itself
            return Ok((1.0, 0.0));
        }
        let ab = self.alpha_bar(k);
        let ab_prev = self.alpha_bar(k - 1);
        let beta = self.beta[k - 1];
        let alpha = self.alpha[k - 1];
        Ok((
            ab_prev.sqrt() * beta / (1.0 - ab),
            alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab),
        ))
    }
}

fn normal3<R: Rng>(rng: &mut R) -> Vec3 {
    Vec3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    )
}

/// `τ^k = √ᾱ_k τ⁰ + √(1 − ᾱ_k) ε`; returns `(τ^k, ε)`.
pub fn forward_noise<R: Rng>(
    tau0: &[Vec3],
    k: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let ab = schedule.alpha_bar_checked(k)?;
    let eps: Vec<Vec3> = tau0.iter().map(|_| normal3(rng)).collect();
    let tau = tau0
        .iter()
        .zip(&eps)
        .map(|(t, e)| ab.sqrt() * t + (1.0 - ab).sqrt() * e)
        .collect();
    Ok((tau, eps))
}

/// One step of `q(τ^k | τ^{k−1})`: `√α_k τ^{k−1} + √β_k ε`.
pub fn forward_step<R: Rng>(
    tau_prev: &[Vec3],
    k: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Vec<Vec3>> {
    schedule.check(k)?;
    let (a, b) = (schedule.alpha[k - 1], schedule.beta[k - 1]);
    Ok(tau_prev
        .iter()
        .map(|t| a.sqrt() * t + b.sqrt() * normal3(rng))
        .collect())
}

/// Sample `τ^{k−1}` from the posterior around the mean built from `x0_pred`.
/// No noise is drawn at `k = 1`.
pub fn posterior_step<R: Rng>(
    tau_k: &[Vec3],
    x0_pred: &[Vec3],
    k: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Vec<Vec3>> {
    let (c0, ck) = schedule.posterior_coefficients(k)?;
    if tau_k.len() != x0_pred.len() {
        return Err(Error::HorizonMismatch {
            expected: tau_k.len(),
            got: x0_pred.len(),
        });
    }
    let mean = x0_pred.iter().zip(tau_k).map(|(x, t)| c0 * x + ck * t);
    if k == 1 {
        return Ok(mean.collect());
    }
    let sd = schedule.sigma2[k - 1].sqrt();
    Ok(mean.map(|m| m + sd * normal3(rng)).collect())
}

/// Reconstruction guidance: `τ⁰ = τ̄⁰ − Σ_k · gradient`. The first waypoint
/// is never modified.
pub fn guide(
    x0_pred: &[Vec3],
    gradient: &[Vec3],
    k: usize,
    schedule: &DiffusionSchedule,
) -> Result<Vec<Vec3>> {
    if gradient.len() != x0_pred.len() {
        return Err(Error::HorizonMismatch {
            expected: x0_pred.len(),
            got: gradient.len(),
        });
    }
    let s = schedule.sigma2_at(k)?;
    Ok(guide_scaled(x0_pred, gradient, s))
}

fn guide_scaled(x0_pred: &[Vec3], gradient: &[Vec3], s: f64) -> Vec<Vec3> {
    let mut out = x0_pred.to_vec();
    for (o, g) in out.iter_mut().zip(gradient).skip(1) {
        *o -= s * g;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GuideMode {
    /// Cost gradient at the clean estimate (identity Jacobian).
    #[default]
    Direct,
    /// Cost gradient chained through the denoiser's input Jacobian when
    /// available (falls back to `Direct` otherwise).
    ThroughDenoiser,
}

#[derive(Debug, Clone)]
pub struct SamplerOptions {
    pub horizon: usize,
    pub mode: GuideMode,
    /// Guidance updates per denoising step.
    pub g_steps: usize,
    /// Step halvings allowed when a guidance update would raise the cost.
    pub max_halvings: usize,
    pub parallelism: Parallelism,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions {
            horizon: 16,
            mode: GuideMode::Direct,
            g_steps: 1,
            max_halvings: 30,
            parallelism: Parallelism::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub trajectories: Vec<Vec<Vec3>>,
    pub costs: Vec<CostReport>,
    pub seeds: Vec<u64>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Per-chain seeds derived from the batch seed.
pub fn chain_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}

/// Guidance at step `k`. Each update is `τ⁰ ← τ⁰ − Σ_k ∇J`; if it would
/// raise the cost the step is halved until it does not (the unmodified
/// estimate is kept if no halving helps).
fn apply_guidance(
    denoiser: &dyn Denoiser,
    input: &DenoiserInput,
    x0: Vec<Vec3>,
    cfg: &GuidanceConfig,
    schedule: &DiffusionSchedule,
    opts: &SamplerOptions,
) -> Result<Vec<Vec3>> {
    let sigma = schedule.sigma2_at(input.k)?;
    if sigma == 0.0 {
        return Ok(x0);
    }
    let mut tau0 = x0;
    for _ in 0..opts.g_steps {
        let rep = cost_total(&tau0, cfg)?;
        if rep.gradient.iter().all(|g| *g == Vec3::zeros()) {
            break;
        }
        let grad = match opts.mode {
            GuideMode::Direct => rep.gradient,
            GuideMode::ThroughDenoiser => {
                match denoiser.input_vjp(input, schedule, &rep.gradient) {
                    None => rep.gradient,
                    Some(r) => {
                        let (mut g, gf) = r?;
                        // the spatial feature also depends on τ^k through the volume
                        if let Some(v) = cfg.volume {
                            for ((gi, t), f) in g.iter_mut().zip(input.tau_k).zip(&gf) {
                                *gi += *f * v.query_gradient(t);
                            }
                        }
                        g
                    }
                }
            }
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = guide_scaled(&tau0, &grad, t * sigma);
            if cost_total(&cand, cfg)?.total <= rep.total {
                accepted = Some(cand);
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some(c) => tau0 = c,
            None => break,
        }
    }
    Ok(tau0)
}

/// Run one reverse chain from `τ^K ~ N(0, I)`.
pub fn sample_chain(
    denoiser: &dyn Denoiser,
    conditioning: &[f64],
    cfg: &GuidanceConfig,
    schedule: &DiffusionSchedule,
    seed: u64,
    opts: &SamplerOptions,
) -> Result<Vec<Vec3>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tau: Vec<Vec3> = (0..opts.horizon).map(|_| normal3(&mut rng)).collect();
    for k in (1..=schedule.steps()).rev() {
        let feature = spatial_features(&tau, cfg.volume);
        let input = DenoiserInput {
            tau_k: &tau,
            feature: &feature,
            k,
            conditioning,
        };
        let x0 = denoiser.denoise(&input, schedule)?;
        let x0 = apply_guidance(denoiser, &input, x0, cfg, schedule, opts)?;
        tau = posterior_step(&tau, &x0, k, schedule, &mut rng)?;
    }
    Ok(tau)
}

/// Draw `n` independent chains with guidance from `cfg`, then score each
/// final trajectory with `eval` (defaults to `cfg`).
pub fn guided_sample(
    denoiser: &dyn Denoiser,
    conditioning: &[f64],
    cfg: &GuidanceConfig,
    eval: Option<&GuidanceConfig>,
    schedule: &DiffusionSchedule,
    n: usize,
    seed: u64,
    opts: &SamplerOptions,
) -> Result<SampleBatch> {
    if denoiser.horizon() != opts.horizon {
        return Err(Error::HorizonMismatch {
            expected: opts.horizon,
            got: denoiser.horizon(),
        });
    }
    if opts.horizon < 2 {
        return Err(Error::InvalidConfig("horizon must be at least 2".into()));
    }
    cfg.validate()?;
    let eval = eval.unwrap_or(cfg);
    eval.validate()?;
    let seeds = chain_seeds(seed, n);
    let out = try_map_range(
        n,
        opts.parallelism,
        |i| -> Result<(Vec<Vec3>, CostReport)> {
            let tau = sample_chain(denoiser, conditioning, cfg, schedule, seeds[i], opts)?;
            let rep = cost_total(&tau, eval)?;
            Ok((tau, rep))
        },
    )?;
    let (trajectories, costs) = out.into_iter().unzip();
    Ok(SampleBatch {
        trajectories,
        costs,
        seeds,
    })
}

/// Indices sorted by ascending total cost (stable; NaN last).
pub fn rank_by_cost(batch: &SampleBatch) -> Result<Vec<usize>> {
    if batch.costs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut idx: Vec<usize> = (0..batch.costs.len()).collect();
    idx.sort_by(|&a, &b| batch.costs[a].total.total_cmp(&batch.costs[b].total));
    Ok(idx)
}
