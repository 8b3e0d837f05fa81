//! Metric scale recovery and cross-view depth-consistency refinement.
//!
//! Poses are world-from-camera in scale-unaware SfM units; depth maps are
//! metric. A per-frame scale `s_i` maps metric camera points into SfM units
//! (`X / s_i`). The reference frame's pose and scale are held fixed.

use nalgebra::{Matrix3, SMatrix, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::ingest::{bilinear_cell, DepthMap, SceneBundle};
use crate::par::{map_range, Parallelism};
use crate::{Error, Pose, Result, Twist, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleSolution {
    pub s_g: f64,
    /// Mean squared depth error at the optimum (m²).
    pub residual: f64,
    pub inlier_count: usize,
}

/// Closed-form least-squares global scale between predicted metric depth and
/// SfM landmark depth over static, valid observations.
pub fn solve_global_scale(scene: &SceneBundle) -> Result<ScaleSolution> {
    let mut pairs = Vec::new();
    for l in &scene.landmarks {
        for o in &l.observations {
            let frame = &scene.frames[o.frame];
            if !scene.static_masks[o.frame].support_all(o.pixel.x, o.pixel.y) {
                continue;
            }
            let Some(pred) = frame.depth.sample(o.pixel.x, o.pixel.y) else {
                continue;
            };
            let d = frame.pose_init.inverse().transform_point(&l.position).z;
            if d > 0.0 && d.is_finite() {
                pairs.push((pred, d));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoValidObservations);
    }
    let num: f64 = pairs.iter().map(|(p, d)| p * d).sum();
    let den: f64 = pairs.iter().map(|(_, d)| d * d).sum();
    let s_g = num / den;
    if !(s_g > 0.0) || !s_g.is_finite() {
        return Err(Error::NonPositiveScale);
    }
    let residual = pairs
        .iter()
        .map(|(p, d)| (p - s_g * d).powi(2))
        .sum::<f64>()
        / pairs.len() as f64;
    Ok(ScaleSolution {
        s_g,
        residual,
        inlier_count: pairs.len(),
    })
}

/// Frame whose landmarks are most often co-observed by other frames; ties go
/// to the lowest index.
pub fn select_reference_frame(scene: &SceneBundle) -> usize {
    let mut counts = vec![0usize; scene.frames.len()];
    let mut seen = Vec::new();
    for l in &scene.landmarks {
        seen.clear();
        seen.extend(l.observations.iter().map(|o| o.frame));
        seen.sort_unstable();
        seen.dedup();
        if seen.len() >= 2 {
            for &f in &seen {
                counts[f] += 1;
            }
        }
    }
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Pixel in frame `k` seen by pixel `u_i` of frame `i`, given per-frame
/// scales and poses. `None` when the warped point is behind camera `k`,
/// outside its image, or lands on invalid depth.
pub fn projective_correspondence(
    scene: &SceneBundle,
    i: usize,
    k: usize,
    u_i: Vector2<f64>,
    scales: &[f64],
    poses: &[Pose],
) -> Option<Vector2<f64>> {
    let fi = &scene.frames[i];
    let d = fi.depth.nearest(u_i.x, u_i.y)?;
    let x = fi.intrinsics.backproject_unchecked(u_i.x, u_i.y, d);
    let p = warp(&x, scales[i], &poses[i], &poses[k]);
    let fk = &scene.frames[k];
    let uk = fk.intrinsics.project(&p).ok()?;
    if !fk.intrinsics.contains(uk.x, uk.y) {
        return None;
    }
    fk.depth.sample(uk.x, uk.y)?;
    Some(uk)
}

/// Metric point of camera `i` expressed in camera `k`, in SfM units.
#[inline]
fn warp(x_metric: &Vec3, s_i: f64, pose_i: &Pose, pose_k: &Pose) -> Vec3 {
    let w = pose_i.transform_point(&(x_metric / s_i));
    pose_k.rotation.inverse() * (w - pose_k.translation)
}

/// Descent direction used by [`refine_poses_scales`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Descent {
    /// Negative gradient, step scaled by the pair count.
    Gradient,
    /// Negative gradient preconditioned by the Gauss-Newton normal matrix.
    #[default]
    GaussNewton,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineOptions {
    pub descent: Descent,
    /// Correspondence re-association rounds.
    pub max_outer: usize,
    /// Descent iterations per association round.
    pub max_inner: usize,
    /// Initial step, applied to the per-pair mean gradient.
    pub step_size: f64,
    /// Step multiplier after an accepted step (1.0 keeps the step fixed).
    pub step_growth: f64,
    pub max_halvings: usize,
    /// Relative energy change below which a loop stops.
    pub tolerance: f64,
    /// Source pixel decimation.
    pub stride: usize,
    /// Reject a pair when warped and observed depth differ by more than this
    /// fraction.
    pub occlusion_tol: f64,
    /// Reject a pair whose target interpolation cell is not locally planar in
    /// inverse depth (relative second difference above this); `None` disables.
    pub planarity_tol: Option<f64>,
    /// Optional Huber threshold on the residual norm (SfM units).
    pub huber: Option<f64>,
    pub recompute_correspondences: bool,
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            descent: Descent::GaussNewton,
            max_outer: 20,
            max_inner: 300,
            step_size: 0.1,
            step_growth: 1.5,
            max_halvings: 40,
            tolerance: 1e-10,
            stride: 4,
            occlusion_tol: 0.10,
            planarity_tol: Some(1e-4),
            huber: None,
            recompute_correspondences: true,
            parallelism: Parallelism::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementResult {
    pub poses: Vec<Pose>,
    pub scales: Vec<f64>,
    pub reference_index: usize,
    pub energy_trace: Vec<f64>,
    pub pair_count: usize,
}

impl RefinementResult {
    pub fn final_energy(&self) -> f64 {
        self.energy_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// One correspondence of the frozen pair set: a metric source point of frame
/// `i` at integer pixel `pixel`. Its target in frame `k` follows the warp
/// through the interpolated reference depth; `fallback` (the target at
/// association time, SfM units) is used only if the warp leaves valid depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub pixel: (usize, usize),
    pub source: Vec3,
    pub fallback: Vec3,
}

/// Frozen pair sets for every non-reference frame.
#[derive(Debug, Clone)]
pub struct FrozenPairs {
    pub reference: usize,
    pub per_frame: Vec<Vec<Pair>>,
}

impl FrozenPairs {
    pub fn len(&self) -> usize {
        self.per_frame.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reference-frame data needed to evaluate pair residuals.
#[derive(Debug, Clone, Copy)]
pub struct Reference<'a> {
    pub depth: &'a DepthMap,
    pub intrinsics: &'a crate::Intrinsics,
    pub pose: Pose,
    pub scale: f64,
    pub huber: Option<f64>,
}

impl<'a> Reference<'a> {
    pub fn new(
        scene: &'a SceneBundle,
        k: usize,
        pose: Pose,
        scale: f64,
        huber: Option<f64>,
    ) -> Self {
        Reference {
            depth: &scene.frames[k].depth,
            intrinsics: &scene.frames[k].intrinsics,
            pose,
            scale,
            huber,
        }
    }
}

fn locally_planar(depth: &DepthMap, u: f64, v: f64, tol: f64) -> bool {
    let Some((x0, y0, _, _)) = bilinear_cell(u, v, depth.width, depth.height) else {
        return false;
    };
    if x0 == 0 || y0 == 0 || x0 + 2 >= depth.width || y0 + 2 >= depth.height {
        return false;
    }
    let inv = |x: usize, y: usize| 1.0 / depth.at(x, y);
    let scale = inv(x0, y0).abs();
    if !scale.is_finite() {
        return false;
    }
    let limit = tol * scale;
    for y in y0 - 1..=y0 + 2 {
        for x in x0..=x0 + 1 {
            if !((inv(x - 1, y) - 2.0 * inv(x, y) + inv(x + 1, y)).abs() <= limit) {
                return false;
            }
        }
    }
    for x in x0 - 1..=x0 + 2 {
        for y in y0..=y0 + 1 {
            if !((inv(x, y - 1) - 2.0 * inv(x, y) + inv(x, y + 1)).abs() <= limit) {
                return false;
            }
        }
    }
    let mixed = inv(x0, y0) - inv(x0 + 1, y0) - inv(x0, y0 + 1) + inv(x0 + 1, y0 + 1);
    mixed.abs() <= limit
}

/// Check one source pixel against the gates (reference static mask over the
/// interpolation support, valid depth, occlusion, planarity) and return its
/// current target in SfM units.
fn associate(
    scene: &SceneBundle,
    k: usize,
    source: &Vec3,
    s_i: f64,
    pose_i: &Pose,
    pose_k: &Pose,
    s_k: f64,
    opts: &RefineOptions,
) -> Option<Vec3> {
    let fk = &scene.frames[k];
    let kk = &fk.intrinsics;
    let p = warp(source, s_i, pose_i, pose_k);
    let uk = kk.project(&p).ok()?;
    if !kk.contains(uk.x, uk.y) || !scene.static_masks[k].support_all(uk.x, uk.y) {
        return None;
    }
    let dk = fk.depth.sample(uk.x, uk.y)?;
    if (p.z * s_k - dk).abs() > opts.occlusion_tol * dk {
        return None;
    }
    if let Some(tol) = opts.planarity_tol {
        if !locally_planar(&fk.depth, uk.x, uk.y, tol) {
            return None;
        }
    }
    Some(kk.backproject_unchecked(uk.x, uk.y, dk) / s_k)
}

/// Build masked, occlusion-checked pairs against reference frame `k`.
pub fn build_pairs(
    scene: &SceneBundle,
    k: usize,
    poses: &[Pose],
    scales: &[f64],
    opts: &RefineOptions,
) -> FrozenPairs {
    let stride = opts.stride.max(1);
    let per_frame = map_range(scene.frames.len(), opts.parallelism, |i| {
        if i == k {
            return Vec::new();
        }
        let fi = &scene.frames[i];
        let mut pairs = Vec::new();
        for y in (0..fi.intrinsics.height).step_by(stride) {
            for x in (0..fi.intrinsics.width).step_by(stride) {
                if !scene.static_masks[i].at(x, y) {
                    continue;
                }
                let d = fi.depth.at(x, y);
                if !(d.is_finite() && d > 0.0) {
                    continue;
                }
                let source = fi.intrinsics.backproject_unchecked(x as f64, y as f64, d);
                if let Some(fallback) = associate(
                    scene, k, &source, scales[i], &poses[i], &poses[k], scales[k], opts,
                ) {
                    pairs.push(Pair {
                        pixel: (x, y),
                        source,
                        fallback,
                    });
                }
            }
        }
        pairs
    });
    FrozenPairs {
        reference: k,
        per_frame,
    }
}

#[inline]
fn huber_weight(r: f64, delta: Option<f64>) -> (f64, f64) {
    // (rho(r), d rho / d(r^2)) with rho(r) = r^2 inside the threshold
    match delta {
        Some(d) if r > d => (2.0 * d * r - d * d, d / r),
        _ => (r * r, 1.0),
    }
}

/// Residual of one pair at camera-`k` point `p` (SfM units) and, when the
/// target follows the interpolated depth, the gradient of `c = D(pi(p)) /
/// (s_k p_z)` with respect to `p`. The residual is `p - c p`.
#[inline]
fn residual(p: &Vec3, pair: &Pair, r: &Reference) -> (Vec3, Option<(f64, Vec3)>) {
    let k = r.intrinsics;
    if p.z > 1e-9 {
        let u = k.fx * p.x / p.z + k.cx;
        let v = k.fy * p.y / p.z + k.cy;
        if let Some((d, dd_du, dd_dv)) = r.depth.sample_with_gradient(u, v) {
            let c = d / (r.scale * p.z);
            // d u / d p and d v / d p
            let du = Vec3::new(k.fx / p.z, 0.0, -k.fx * p.x / (p.z * p.z));
            let dv = Vec3::new(0.0, k.fy / p.z, -k.fy * p.y / (p.z * p.z));
            let grad_d = du * dd_du + dv * dd_dv;
            let grad_c = (grad_d / p.z - Vec3::new(0.0, 0.0, d / (p.z * p.z))) / r.scale;
            return (p * (1.0 - c), Some((c, grad_c)));
        }
    }
    (p - pair.fallback, None)
}

/// Reference-image pixel a pair's source point warps to, if it lands in
/// front of the reference camera.
pub fn warped_pixel(
    pair: &Pair,
    pose_i: &Pose,
    log_scale: f64,
    reference: &Reference,
) -> Option<(f64, f64)> {
    let p = warp(&pair.source, log_scale.exp(), pose_i, &reference.pose);
    let k = reference.intrinsics;
    (p.z > 1e-9).then(|| (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// Energy of one frame's pairs.
pub fn frame_energy(pairs: &[Pair], pose_i: &Pose, log_scale: f64, reference: &Reference) -> f64 {
    let inv_s = (-log_scale).exp();
    pairs
        .iter()
        .map(|pair| {
            let p = warp(&pair.source, 1.0 / inv_s, pose_i, &reference.pose);
            let (r, _) = residual(&p, pair, reference);
            huber_weight(r.norm(), reference.huber).0
        })
        .sum()
}

/// Energy and gradient with respect to a left twist increment of `pose_i`
/// (rotation, translation) and the log-scale, in that order.
pub fn frame_gradient(
    pairs: &[Pair],
    pose_i: &Pose,
    log_scale: f64,
    reference: &Reference,
) -> (f64, [f64; 7]) {
    let inv_s = (-log_scale).exp();
    let rk = reference.pose.rotation;
    let rk_inv = rk.inverse();
    let mut e = 0.0;
    let mut g_rot = Vector3::zeros();
    let mut g_tr = Vector3::zeros();
    let mut g_ls = 0.0;
    for pair in pairs {
        let rq = pose_i.rotation * (pair.source * inv_s);
        let w = rq + pose_i.translation;
        let p = rk_inv * (w - reference.pose.translation);
        let (r, follow) = residual(&p, pair, reference);
        let (rho, wt) = huber_weight(r.norm(), reference.huber);
        e += rho;
        let g_p = match follow {
            Some((c, grad_c)) => (r * (1.0 - c) - grad_c * p.dot(&r)) * (2.0 * wt),
            None => r * (2.0 * wt),
        };
        let a = rk * g_p;
        g_tr += a;
        g_rot += w.cross(&a);
        g_ls -= a.dot(&rq);
    }
    (e, [g_rot.x, g_rot.y, g_rot.z, g_tr.x, g_tr.y, g_tr.z, g_ls])
}

type Mat7 = SMatrix<f64, 7, 7>;
type Vec7 = SVector<f64, 7>;

/// Energy, gradient and Gauss-Newton normal matrix `J^T W J` for one frame.
fn frame_normal_equations(
    pairs: &[Pair],
    pose_i: &Pose,
    log_scale: f64,
    reference: &Reference,
) -> (f64, Vec7, Mat7) {
    let inv_s = (-log_scale).exp();
    let rk = reference.pose.rotation;
    let rk_inv = rk.inverse();
    let rk_inv_m = rk_inv.to_rotation_matrix().into_inner();
    let mut e = 0.0;
    let mut g = Vec7::zeros();
    let mut h = Mat7::zeros();
    for pair in pairs {
        let rq = pose_i.rotation * (pair.source * inv_s);
        let w = rq + pose_i.translation;
        let p = rk_inv * (w - reference.pose.translation);
        let (r, follow) = residual(&p, pair, reference);
        let (rho, wt) = huber_weight(r.norm(), reference.huber);
        e += rho;
        let dr_dp = match follow {
            Some((c, grad_c)) => Matrix3::identity() * (1.0 - c) - p * grad_c.transpose(),
            None => Matrix3::identity(),
        };
        let a = dr_dp * rk_inv_m;
        let mut j = SMatrix::<f64, 3, 7>::zeros();
        j.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(-a * crate::geom::skew(&w)));
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&a);
        j.fixed_view_mut::<3, 1>(0, 6).copy_from(&(-a * rq));
        let jt = j.transpose();
        g += jt * r * (2.0 * wt);
        h += jt * j * wt;
    }
    (e, g, h)
}

/// Apply a left twist increment and log-scale step.
pub fn apply_step(pose: &Pose, log_scale: f64, delta: &[f64; 7]) -> (Pose, f64) {
    let xi = Twist([delta[0], delta[1], delta[2], delta[3], delta[4], delta[5]]);
    (Pose::exp(&xi).compose(pose), log_scale + delta[6])
}

struct FrameState {
    pose: Pose,
    log_scale: f64,
    step: f64,
    energy: f64,
    stalled: bool,
}

/// Gradient descent on the depth-consistency energy over all poses and
/// log-scales except the reference frame's.
pub fn refine_poses_scales(
    scene: &SceneBundle,
    s_g: f64,
    opts: &RefineOptions,
) -> Result<RefinementResult> {
    let n = scene.frames.len();
    if n < 2 {
        return Err(Error::EmptyOverlap);
    }
    let k = select_reference_frame(scene);
    let mut poses: Vec<Pose> = scene.frames.iter().map(|f| f.pose_init).collect();
    let mut log_scales = vec![s_g.ln(); n];
    let scales_of = |ls: &[f64]| -> Vec<f64> {
        ls.iter()
            .enumerate()
            .map(|(i, l)| if i == k { s_g } else { l.exp() })
            .collect()
    };
    let reference = Reference::new(scene, k, poses[k], s_g, opts.huber);

    let mut pairs = build_pairs(scene, k, &poses, &scales_of(&log_scales), opts);
    if pairs.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    let total = |pairs: &FrozenPairs, poses: &[Pose], ls: &[f64]| -> f64 {
        map_range(n, opts.parallelism, |i| {
            frame_energy(&pairs.per_frame[i], &poses[i], ls[i], &reference)
        })
        .iter()
        .sum()
    };
    let mut energy = total(&pairs, &poses, &log_scales);
    if !energy.is_finite() {
        return Err(Error::DivergedOptimization(0));
    }
    // One entry per outer iteration: the energy at the current parameters
    // with freshly associated correspondences.
    let mut trace = vec![energy];
    for _ in 0..opts.max_outer.max(1) {
        let mut states: Vec<FrameState> = (0..n)
            .map(|i| FrameState {
                pose: poses[i],
                log_scale: log_scales[i],
                step: opts.step_size,
                energy: frame_energy(&pairs.per_frame[i], &poses[i], log_scales[i], &reference),
                stalled: i == k || pairs.per_frame[i].is_empty(),
            })
            .collect();
        for _ in 0..opts.max_inner {
            let updated = map_range(n, opts.parallelism, |i| {
                let s = &states[i];
                if s.stalled {
                    return Ok((s.pose, s.log_scale, s.step, s.energy, true));
                }
                descend_frame(&pairs.per_frame[i], s, &reference, opts)
            });
            let mut e_prev = 0.0;
            let mut e_new = 0.0;
            for (s, u) in states.iter_mut().zip(updated) {
                let (pose, ls, step, energy, stalled) = u?;
                e_prev += s.energy;
                *s = FrameState {
                    pose,
                    log_scale: ls,
                    step,
                    energy,
                    stalled,
                };
                e_new += energy;
            }
            if states.iter().all(|s| s.stalled) || e_prev - e_new <= opts.tolerance * e_prev {
                break;
            }
        }
        let cand_poses: Vec<Pose> = states.iter().map(|s| s.pose).collect();
        let cand_ls: Vec<f64> = states.iter().map(|s| s.log_scale).collect();
        let (cand_pairs, e_cand) = if opts.recompute_correspondences {
            let fresh = build_pairs(scene, k, &cand_poses, &scales_of(&cand_ls), opts);
            let e = total(&fresh, &cand_poses, &cand_ls);
            (fresh, e)
        } else {
            let e = states.iter().map(|s| s.energy).sum();
            (pairs.clone(), e)
        };
        // a round that raises the re-associated energy is discarded
        if cand_pairs.is_empty() || !(e_cand <= energy) {
            break;
        }
        let converged = energy - e_cand <= opts.tolerance * energy;
        poses = cand_poses;
        log_scales = cand_ls;
        pairs = cand_pairs;
        energy = e_cand;
        trace.push(energy);
        if converged || !opts.recompute_correspondences {
            break;
        }
    }

    Ok(RefinementResult {
        poses,
        scales: scales_of(&log_scales),
        reference_index: k,
        energy_trace: trace,
        pair_count: pairs.len(),
    })
}

type StepOutcome = Result<(Pose, f64, f64, f64, bool)>;

/// One backtracking gradient step for a single frame. The returned energy
/// never exceeds the input energy.
fn descend_frame(
    pairs: &[Pair],
    s: &FrameState,
    reference: &Reference,
    opts: &RefineOptions,
) -> StepOutcome {
    let (e, dir, mut step) = match opts.descent {
        Descent::Gradient => {
            let (e, g) = frame_gradient(pairs, &s.pose, s.log_scale, reference);
            let norm = 1.0 / pairs.len() as f64;
            (e, g.map(|x| -norm * x), s.step)
        }
        Descent::GaussNewton => {
            let (e, g, mut h) = frame_normal_equations(pairs, &s.pose, s.log_scale, reference);
            let damping = 1e-9 * (0..7).map(|i| h[(i, i)]).fold(0.0, f64::max).max(1e-300);
            for i in 0..7 {
                h[(i, i)] += damping;
            }
            let d = match h.cholesky() {
                Some(ch) => ch.solve(&(-g * 0.5)),
                None => -g / pairs.len() as f64,
            };
            (e, [d[0], d[1], d[2], d[3], d[4], d[5], d[6]], 1.0)
        }
    };
    for _ in 0..=opts.max_halvings {
        let delta = dir.map(|x| step * x);
        let (pose, ls) = apply_step(&s.pose, s.log_scale, &delta);
        let e_try = frame_energy(pairs, &pose, ls, reference);
        if e_try.is_nan() {
            step *= 0.5;
            continue;
        }
        if e_try <= e {
            let stalled = e - e_try <= 1e-15 * e.max(1e-300);
            let next = match opts.descent {
                Descent::Gradient => step * opts.step_growth,
                Descent::GaussNewton => 1.0,
            };
            return Ok((pose, ls, next, e_try, stalled));
        }
        step *= 0.5;
    }
    if !e.is_finite() {
        return Err(Error::DivergedOptimization(opts.max_halvings));
    }
    // no decrease at any step length: stationary to working precision
    Ok((s.pose, s.log_scale, s.step, s.energy, true))
}
