//! Analytic-vs-central-difference checks for every hand-derived gradient.
//!
//! Each target draws seeded evaluation points away from known kinks (TSDF
//! cell faces, the zero crossing of the penetration term, nearest-goal and
//! sign ties) and reports the worst relative error
//! `|g_a - g_fd| / max(|g_a|, |g_fd|, floor)` over gradient vectors.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costs::{cost_collide, cost_goal, cost_normal};
use crate::denoiser::MlpDenoiser;
use crate::ingest::{synth_scene, HandMotion, SynthConfig};
use crate::metric::{
    apply_step, build_pairs, frame_energy, frame_gradient, select_reference_frame, warped_pixel,
    Reference, RefineOptions,
};
use crate::tsdf::TsdfVolume;
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Eq2,
    Goal,
    Collide,
    Normal,
    Trilinear,
    Mlp,
}

impl Target {
    pub const ALL: [Target; 6] = [
        Target::Eq2,
        Target::Goal,
        Target::Collide,
        Target::Normal,
        Target::Trilinear,
        Target::Mlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::Eq2 => "eq2",
            Target::Goal => "goal",
            Target::Collide => "collide",
            Target::Normal => "normal",
            Target::Trilinear => "trilinear",
            Target::Mlp => "mlp",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTarget(s.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub points: usize,
    pub eps: f64,
    pub tolerance: f64,
    /// Scale this target's analytic gradient by 1.01 (negative control).
    pub inject_fault: Option<Target>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            points: 100,
            eps: 1e-6,
            tolerance: 1e-4,
            inject_fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub target: Target,
    pub points: usize,
    pub worst_rel_err: f64,
    pub passed: bool,
}

pub fn all_passed(reports: &[TargetReport]) -> bool {
    reports.iter().all(|r| r.passed)
}

/// Runs the requested targets in order.
pub fn gradcheck(targets: &[Target], opts: &GradcheckOptions) -> Result<Vec<TargetReport>> {
    if targets.is_empty() {
        return Err(Error::InvalidConfig("no gradcheck targets".into()));
    }
    targets
        .iter()
        .map(|&t| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                opts.seed ^ (t as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            );
            let fault = if opts.inject_fault == Some(t) {
                1.01
            } else {
                1.0
            };
            let errs = match t {
                Target::Eq2 => check_eq2(&mut rng, opts, fault)?,
                Target::Goal => check_goal(&mut rng, opts, fault)?,
                Target::Collide => check_collide(&mut rng, opts, fault)?,
                Target::Normal => check_normal(&mut rng, opts, fault)?,
                Target::Trilinear => check_trilinear(&mut rng, opts, fault),
                Target::Mlp => check_mlp(&mut rng, opts, fault),
            };
            let worst = errs.iter().copied().fold(0.0, f64::max);
            Ok(TargetReport {
                target: t,
                points: errs.len(),
                worst_rel_err: worst,
                passed: worst < opts.tolerance,
            })
        })
        .collect()
}

pub fn rel_err(analytic: &[f64], fd: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(fd).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(fd)).max(floor)
}

/// Central differences of `f` over every coordinate of `x`.
fn central<F: FnMut(&[f64]) -> f64>(x: &[f64], eps: f64, mut f: F) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            buf[i] = x[i] + eps;
            let p = f(&buf);
            buf[i] = x[i] - eps;
            let m = f(&buf);
            buf[i] = x[i];
            (p - m) / (2.0 * eps)
        })
        .collect()
}

fn flatten(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn unflatten(v: &[f64]) -> Vec<Vec3> {
    v.chunks_exact(3)
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect()
}

fn rand_vec(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-r..r),
        rng.random_range(-r..r),
        rng.random_range(-r..r),
    )
}

/// Checks trajectory costs over the free waypoints (the start is fixed).
fn traj_check<F>(traj: &[Vec3], grad: &[Vec3], eps: f64, fault: f64, cost: F) -> Result<f64>
where
    F: Fn(&[Vec3]) -> Result<f64>,
{
    let x = flatten(&traj[1..]);
    let analytic: Vec<f64> = flatten(&grad[1..]).iter().map(|g| g * fault).collect();
    let mut failure = None;
    let fd = central(&x, eps, |y| {
        let mut t = vec![traj[0]];
        t.extend(unflatten(y));
        cost(&t).unwrap_or_else(|e| {
            failure = Some(e);
            f64::NAN
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(rel_err(&analytic, &fd, 1e-8))
}

/// Distance (pixels) kept between a warped pixel and the interpolation cell
/// faces; finite-difference steps move pixels by well under 1e-3.
const PIXEL_MARGIN: f64 = 1e-2;

fn check_eq2(rng: &mut ChaCha8Rng, opts: &GradcheckOptions, fault: f64) -> Result<Vec<f64>> {
    let cfg = SynthConfig {
        frames: 4,
        landmarks: 30,
        hand: HandMotion::None,
        rotation_perturbation_deg: 1.0,
        translation_perturbation_m: 0.01,
        ..Default::default()
    };
    let (scene, gt) = synth_scene(&cfg, opts.seed)?;
    let poses: Vec<_> = scene.frames.iter().map(|f| f.pose_init).collect();
    let scales = vec![gt.scale; poses.len()];
    let ropts = RefineOptions::default();
    let k = select_reference_frame(&scene);
    let pairs = build_pairs(&scene, k, &poses, &scales, &ropts);
    let reference = Reference::new(&scene, k, poses[k], gt.scale, None);
    let others: Vec<usize> = (0..poses.len())
        .filter(|&i| i != k && !pairs.per_frame[i].is_empty())
        .collect();
    if others.is_empty() {
        return Err(Error::NoValidObservations);
    }
    let mut errs = Vec::with_capacity(opts.points);
    for _ in 0..opts.points {
        let i = others[rng.random_range(0..others.len())];
        let mut d = [0.0; 7];
        for (j, v) in d.iter_mut().enumerate() {
            *v = rng.random_range(-1.0..1.0) * if j < 6 { 0.004 } else { 0.01 };
        }
        let (pose, ls) = apply_step(&poses[i], gt.scale.ln(), &d);
        // the energy is piecewise smooth in the warped pixel: keep pairs that
        // sample valid depth well inside one interpolation cell
        let p: Vec<_> = pairs.per_frame[i]
            .iter()
            .filter(|pair| {
                warped_pixel(pair, &pose, ls, &reference).is_some_and(|(u, v)| {
                    let inside = |c: f64| (c - c.round()).abs() > PIXEL_MARGIN;
                    inside(u) && inside(v) && reference.depth.sample_with_gradient(u, v).is_some()
                })
            })
            .copied()
            .collect();
        let p = &p[..];
        let (_, g) = frame_gradient(p, &pose, ls, &reference);
        let analytic: Vec<f64> = g.iter().map(|v| v * fault).collect();
        let fd = central(&[0.0; 7], opts.eps, |x| {
            let (pp, lp) = apply_step(&pose, ls, &x.try_into().expect("7 coordinates"));
            frame_energy(p, &pp, lp, &reference)
        });
        errs.push(rel_err(&analytic, &fd, 1e-8));
    }
    Ok(errs)
}

fn check_goal(rng: &mut ChaCha8Rng, opts: &GradcheckOptions, fault: f64) -> Result<Vec<f64>> {
    let mut errs = Vec::with_capacity(opts.points);
    while errs.len() < opts.points {
        let traj: Vec<Vec3> = (0..8).map(|_| rand_vec(rng, 0.5)).collect();
        let goals: Vec<Vec3> = (0..5).map(|_| rand_vec(rng, 0.5)).collect();
        // skip near-ties between the two nearest goals
        let mut d: Vec<f64> = goals.iter().map(|g| (g - traj[7]).norm_squared()).collect();
        d.sort_by(f64::total_cmp);
        if d[1] - d[0] < 1e-3 {
            continue;
        }
        let (_, grad) = cost_goal(&traj, &goals)?;
        errs.push(traj_check(&traj, &grad, opts.eps, fault, |t| {
            Ok(cost_goal(t, &goals)?.0)
        })?);
    }
    Ok(errs)
}

/// Distance of a point's grid coordinates from the nearest cell face.
fn face_margin(vol: &TsdfVolume, p: &Vec3) -> f64 {
    let g = (p - vol.origin) / vol.voxel_size;
    g.iter()
        .map(|c| (c - c.round()).abs())
        .fold(f64::INFINITY, f64::min)
}

fn check_collide(rng: &mut ChaCha8Rng, opts: &GradcheckOptions, fault: f64) -> Result<Vec<f64>> {
    let vol = TsdfVolume::from_sdf(Vec3::repeat(-0.4), 0.02, [41, 41, 41], 0.1, |p| {
        p.norm() - 0.15
    })?;
    let margin = 100.0 * opts.eps / vol.voxel_size;
    let mut errs = Vec::with_capacity(opts.points);
    while errs.len() < opts.points {
        let agent: Vec<Vec3> = (0..6).map(|_| rand_vec(rng, 0.03)).collect();
        let start = rand_vec(rng, 0.1) + Vec3::new(0.0, 0.0, -0.3);
        let mut traj = vec![start];
        traj.extend((0..5).map(|_| rand_vec(rng, 0.2)));
        let smooth = traj[1..].iter().all(|t| {
            agent.iter().all(|a| {
                let q = a + t - start;
                face_margin(&vol, &q) > margin && vol.query(&q).abs() > 1e-4
            })
        });
        let (j, grad) = cost_collide(&traj, &agent, &vol)?;
        if !smooth || j == 0.0 {
            continue;
        }
        errs.push(traj_check(&traj, &grad, opts.eps, fault, |t| {
            Ok(cost_collide(t, &agent, &vol)?.0)
        })?);
    }
    Ok(errs)
}

fn check_normal(rng: &mut ChaCha8Rng, opts: &GradcheckOptions, fault: f64) -> Result<Vec<f64>> {
    let mut errs = Vec::with_capacity(opts.points);
    while errs.len() < opts.points {
        let n = rand_vec(rng, 1.0);
        if n.norm() < 0.1 {
            continue;
        }
        let n = n.normalize();
        let traj: Vec<Vec3> = (0..6).map(|_| rand_vec(rng, 0.3)).collect();
        let ok = traj[1..].iter().all(|t| {
            let v = t - traj[0];
            v.norm() > 0.02 && (v.normalize().dot(&n)).abs() > 1e-3
        });
        if !ok {
            continue;
        }
        let (_, grad) = cost_normal(&traj, &n)?;
        errs.push(traj_check(&traj, &grad, opts.eps, fault, |t| {
            Ok(cost_normal(t, &n)?.0)
        })?);
    }
    Ok(errs)
}

fn check_trilinear(rng: &mut ChaCha8Rng, opts: &GradcheckOptions, fault: f64) -> Vec<f64> {
    let vs = 0.05;
    let mut vol = TsdfVolume::new(Vec3::zeros(), vs, [8, 7, 6], 0.1).expect("valid grid");
    for v in vol.values.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let margin = 100.0 * opts.eps / vs;
    let hi = [7.0 * vs, 6.0 * vs, 5.0 * vs];
    let mut errs = Vec::with_capacity(opts.points);
    while errs.len() < opts.points {
        let p = Vec3::new(
            rng.random_range(0.0..hi[0]),
            rng.random_range(0.0..hi[1]),
            rng.random_range(0.0..hi[2]),
        );
        if face_margin(&vol, &p) <= margin {
            continue;
        }
        let analytic: Vec<f64> = vol.query_gradient(&p).iter().map(|g| g * fault).collect();
        let fd = central(p.as_slice(), opts.eps, |x| {
            vol.query(&Vec3::new(x[0], x[1], x[2]))
        });
        errs.push(rel_err(&analytic, &fd, 1e-8));
    }
    errs
}

/// Parameter and input gradients of `dy · f(x)` on a small network.
fn check_mlp(rng: &mut ChaCha8Rng, opts: &GradcheckOptions, fault: f64) -> Vec<f64> {
    let (h, cond) = (4, 6);
    let mut net = MlpDenoiser::new(h, cond, &[8, 8], rng.random());
    let params = net.params();
    let n_in = MlpDenoiser::input_dim(h, cond);
    let mut errs = Vec::with_capacity(opts.points);
    for _ in 0..opts.points {
        let x: Vec<f64> = (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dy: Vec<f64> = (0..3 * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dot = |y: Vec<f64>| y.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>();
        let (_, cache) = net.forward_cached(&x);
        let mut gp = vec![0.0; params.len()];
        let gx = net.backward(&cache, &dy, Some(&mut gp));
        let mut analytic = gp;
        analytic.extend(gx);
        analytic.iter_mut().for_each(|g| *g *= fault);
        let mut fd = central(&params, opts.eps, |p| {
            net.set_params(p).expect("same shape");
            dot(net.forward(&x))
        });
        net.set_params(&params).expect("same shape");
        fd.extend(central(&x, opts.eps, |xx| dot(net.forward(xx))));
        errs.push(rel_err(&analytic, &fd, 1e-8));
    }
    errs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_targets() {
        for t in Target::ALL {
            assert_eq!(t.name().parse::<Target>().unwrap(), t);
        }
        assert!(matches!(
            "foo".parse::<Target>(),
            Err(Error::UnknownTarget(_))
        ));
    }

    #[test]
    fn all_targets_pass_on_few_points() {
        let opts = GradcheckOptions {
            points: 10,
            ..Default::default()
        };
        let r = gradcheck(&Target::ALL, &opts).unwrap();
        for t in &r {
            assert!(t.passed, "{} worst {}", t.target, t.worst_rel_err);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        for t in Target::ALL {
            let opts = GradcheckOptions {
                points: 3,
                inject_fault: Some(t),
                ..Default::default()
            };
            let r = gradcheck(&[t], &opts).unwrap();
            assert!(!r[0].passed, "{t}");
            assert!(r[0].worst_rel_err > 1e-3);
        }
    }

    #[test]
    fn rel_err_definition() {
        assert_eq!(rel_err(&[1.0, 0.0], &[1.0, 0.0], 1e-8), 0.0);
        assert!((rel_err(&[2.0, 0.0], &[1.0, 0.0], 1e-8) - 0.5).abs() < 1e-15);
        assert_eq!(rel_err(&[0.0], &[0.0], 1e-8), 0.0);
        assert!(gradcheck(&[], &GradcheckOptions::default()).is_err());
    }
}
