//! Test-time guidance costs over a trajectory of waypoints, each returned with
//! its analytic gradient with respect to every waypoint.
//!
//! The first waypoint is the fixed start of the interaction and never
//! receives a gradient in [`cost_total`].

use serde::{Deserialize, Serialize};

use crate::tsdf::TsdfVolume;
use crate::{Error, Result, Vec3};

/// Weights and scene data for [`cost_total`].
#[derive(Debug, Clone, Copy)]
pub struct GuidanceConfig<'a> {
    pub lambda_g: f64,
    pub lambda_c: f64,
    pub lambda_n: f64,
    pub goals: &'a [Vec3],
    /// Agent surface samples positioned at the start of the trajectory.
    pub agent_points: &'a [Vec3],
    pub normal: Vec3,
    pub volume: Option<&'a TsdfVolume>,
}

pub const DEFAULT_LAMBDA_G: f64 = 1.0;
pub const DEFAULT_LAMBDA_C: f64 = 1.0;
pub const DEFAULT_LAMBDA_N: f64 = 0.1;

impl<'a> GuidanceConfig<'a> {
    /// All weights zero: guidance disabled.
    pub fn none() -> Self {
        GuidanceConfig {
            lambda_g: 0.0,
            lambda_c: 0.0,
            lambda_n: 0.0,
            goals: &[],
            agent_points: &[],
            normal: Vec3::z(),
            volume: None,
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.lambda_g == 0.0 && self.lambda_c == 0.0 && self.lambda_n == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, l) in [
            ("lambda_g", self.lambda_g),
            ("lambda_c", self.lambda_c),
            ("lambda_n", self.lambda_n),
        ] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a non-negative finite number, got {l}"
                )));
            }
        }
        if self.lambda_g > 0.0 && self.goals.is_empty() {
            return Err(Error::EmptyGoals);
        }
        if self.lambda_c > 0.0 {
            if self.agent_points.is_empty() {
                return Err(Error::EmptyAgentPoints);
            }
            if self.volume.is_none() {
                return Err(Error::InvalidConfig(
                    "collision guidance needs a volume".into(),
                ));
            }
        }
        if self.lambda_n > 0.0 && (self.normal.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "normal must be unit length, |n| = {}",
                self.normal.norm()
            )));
        }
        Ok(())
    }

    /// Same configuration with every weight multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        GuidanceConfig {
            lambda_g: self.lambda_g * c,
            lambda_c: self.lambda_c * c,
            lambda_n: self.lambda_n * c,
            ..*self
        }
    }
}

/// Unweighted term values, weighted total and the total gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub total: f64,
    pub goal: f64,
    pub collide: f64,
    pub normal: f64,
    pub gradient: Vec<Vec3>,
}

impl CostReport {
    pub fn zero(h: usize) -> Self {
        CostReport {
            total: 0.0,
            goal: 0.0,
            collide: 0.0,
            normal: 0.0,
            gradient: vec![Vec3::zeros(); h],
        }
    }
}

/// Squared distance from the endpoint to the nearest goal (lowest index on
/// ties) and the index of that goal.
pub fn nearest_goal(end: &Vec3, goals: &[Vec3]) -> Result<(f64, usize)> {
    let mut best = (f64::INFINITY, 0);
    for (n, g) in goals.iter().enumerate() {
        let d2 = (g - end).norm_squared();
        if d2 < best.0 {
            best = (d2, n);
        }
    }
    if goals.is_empty() {
        return Err(Error::EmptyGoals);
    }
    Ok(best)
}

/// `min_n |g_n - τ_H|²`; gradient only at the endpoint.
pub fn cost_goal(traj: &[Vec3], goals: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
    let h = check_traj(traj)?;
    let end = traj[h - 1];
    let (j, n) = nearest_goal(&end, goals)?;
    let mut grad = vec![Vec3::zeros(); h];
    grad[h - 1] = 2.0 * (end - goals[n]);
    Ok((j, grad))
}

/// Mean penetration of the agent points carried along the trajectory:
/// `1/((H-1) N_p) Σ_{h>1, i} -min(U[p_i + τ_h - τ_1], 0)`.
/// The start waypoint's gradient is left at zero.
pub fn cost_collide(
    traj: &[Vec3],
    agent_points: &[Vec3],
    vol: &TsdfVolume,
) -> Result<(f64, Vec<Vec3>)> {
    let h = check_traj(traj)?;
    if agent_points.is_empty() {
        return Err(Error::EmptyAgentPoints);
    }
    let norm = 1.0 / ((h - 1) * agent_points.len()) as f64;
    let mut j = 0.0;
    let mut grad = vec![Vec3::zeros(); h];
    for (t, g) in traj.iter().zip(grad.iter_mut()).skip(1) {
        let shift = t - traj[0];
        for p in agent_points {
            let (u, du) = vol.query_with_gradient(&(p + shift));
            if u < 0.0 {
                j -= u;
                *g -= du;
            }
        }
        *g *= norm;
    }
    Ok((j * norm, grad))
}

/// Mean over waypoints `h > 1` of `min_{s=±1} |d_h - s n|²`, with `d_h` the
/// unit direction from the start to waypoint `h`. The sign is chosen per
/// waypoint (`+1` on ties). The start waypoint's gradient is left at zero.
pub fn cost_normal(traj: &[Vec3], normal: &Vec3) -> Result<(f64, Vec<Vec3>)> {
    let h = check_traj(traj)?;
    let inv_h = 1.0 / (h - 1) as f64;
    let mut j = 0.0;
    let mut grad = vec![Vec3::zeros(); h];
    for (idx, t) in traj.iter().enumerate().skip(1) {
        let v = t - traj[0];
        let len = v.norm();
        if !(len > 1e-9) {
            return Err(Error::DegenerateSegment(idx));
        }
        let d = v / len;
        let s = if d.dot(normal) >= 0.0 { 1.0 } else { -1.0 };
        let r = d - s * normal;
        j += r.norm_squared();
        // d/dv of v/|v| is (I - d dᵀ)/|v|
        grad[idx] = (2.0 * inv_h / len) * (r - d * d.dot(&r));
    }
    Ok((j * inv_h, grad))
}

/// Weighted sum of the enabled terms. Zero-weight terms are not evaluated
/// and report 0; the start waypoint's gradient is always zero.
pub fn cost_total(traj: &[Vec3], cfg: &GuidanceConfig) -> Result<CostReport> {
    cfg.validate()?;
    let h = check_traj(traj)?;
    let mut rep = CostReport::zero(h);
    let mut add = |lambda: f64, grad: Vec<Vec3>| {
        for (a, g) in rep.gradient.iter_mut().zip(grad) {
            *a += lambda * g;
        }
    };
    if cfg.lambda_g > 0.0 {
        let (j, g) = cost_goal(traj, cfg.goals)?;
        rep.goal = j;
        add(cfg.lambda_g, g);
    }
    if cfg.lambda_c > 0.0 {
        let vol = cfg
            .volume
            .ok_or_else(|| Error::InvalidConfig("collision guidance needs a volume".into()))?;
        let (j, g) = cost_collide(traj, cfg.agent_points, vol)?;
        rep.collide = j;
        add(cfg.lambda_c, g);
    }
    if cfg.lambda_n > 0.0 {
        let (j, g) = cost_normal(traj, &cfg.normal)?;
        rep.normal = j;
        add(cfg.lambda_n, g);
    }
    rep.gradient[0] = Vec3::zeros();
    rep.total = cfg.lambda_g * rep.goal + cfg.lambda_c * rep.collide + cfg.lambda_n * rep.normal;
    Ok(rep)
}

fn check_traj(traj: &[Vec3]) -> Result<usize> {
    if traj.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "trajectory needs at least 2 waypoints, got {}",
            traj.len()
        )));
    }
    Ok(traj.len())
}

/// Gripper primitive used to sample agent points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GripperShape {
    /// Axis-aligned box with the given half extents (meters).
    Box { half_extents: [f64; 3] },
    /// Union of spheres at offsets from the center.
    Spheres { offsets: Vec<[f64; 3]>, radius: f64 },
}

impl Default for GripperShape {
    fn default() -> Self {
        GripperShape::Box {
            half_extents: [0.02, 0.02, 0.02],
        }
    }
}

/// `n` deterministic points on the surface of `shape` centered at `center`.
/// Directions follow a Fibonacci lattice on the unit sphere.
pub fn gripper_points(center: &Vec3, shape: &GripperShape, n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let dirs = (0..n).map(|i| {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - y * y).sqrt();
        let phi = golden * i as f64;
        Vec3::new(r * phi.cos(), y, r * phi.sin())
    });
    match shape {
        GripperShape::Box { half_extents: h } => dirs
            .map(|d| {
                let m = (0..3).map(|a| d[a].abs() / h[a]).fold(0.0, f64::max);
                center + d / m
            })
            .collect(),
        GripperShape::Spheres { offsets, radius } => dirs
            .enumerate()
            .map(|(i, d)| {
                let o = offsets
                    .get(i % offsets.len().max(1))
                    .copied()
                    .unwrap_or([0.0; 3]);
                center + Vec3::from(o) + d * *radius
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    fn random_traj(rng: &mut ChaCha8Rng, h: usize) -> Vec<Vec3> {
        (0..h)
            .map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.3..0.3)))
            .collect()
    }

    /// Smooth obstacle: a ball of radius 0.15 at the origin.
    fn ball_volume() -> TsdfVolume {
        TsdfVolume::from_sdf(Vec3::repeat(-0.4), 0.02, [41, 41, 41], 0.1, |p| {
            p.norm() - 0.15
        })
        .unwrap()
    }

    fn fd_check<F>(traj: &[Vec3], grad: &[Vec3], f: F, eps: f64, tol: f64)
    where
        F: Fn(&[Vec3]) -> f64,
    {
        // the start is fixed: its gradient is zero by construction
        assert_eq!(grad[0], Vec3::zeros());
        for h in 1..traj.len() {
            for a in 0..3 {
                let mut p = traj.to_vec();
                let mut m = traj.to_vec();
                p[h][a] += eps;
                m[h][a] -= eps;
                let fd = (f(&p) - f(&m)) / (2.0 * eps);
                let g = grad[h][a];
                assert!(
                    (fd - g).abs() <= tol * fd.abs().max(g.abs()).max(1e-3),
                    "waypoint {h} axis {a}: fd {fd} vs {g}"
                );
            }
        }
    }

    #[test]
    fn goal_examples() {
        let (j, g) = cost_goal(
            &[v(0.0, 0.0, 0.0), v(0.0, 0.0, 1.0)],
            &[v(1.0, 1.0, 1.0), v(0.0, 0.0, 1.0)],
        )
        .unwrap();
        assert_eq!(j, 0.0);
        assert!(g.iter().all(|x| *x == Vec3::zeros()));
        let (j, g) = cost_goal(
            &[v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0)],
            &[v(0.0, 0.0, 0.0), v(3.0, 0.0, 0.0)],
        )
        .unwrap();
        assert_eq!(j, 1.0);
        assert_eq!(g[1], v(2.0, 0.0, 0.0));
        assert_eq!(g[0], Vec3::zeros());
        // equidistant goals: lowest index wins
        let (j, n) =
            nearest_goal(&v(0.0, 0.0, 0.0), &[v(1.0, 0.0, 0.0), v(-1.0, 0.0, 0.0)]).unwrap();
        assert_eq!((j, n), (1.0, 0));
        assert!(matches!(
            cost_goal(&[v(0., 0., 0.), v(1., 0., 0.)], &[]),
            Err(Error::EmptyGoals)
        ));
    }

    #[test]
    fn goal_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let traj = random_traj(&mut rng, 8);
        let mut goals = random_traj(&mut rng, 6);
        let (j0, _) = cost_goal(&traj, &goals).unwrap();
        goals.reverse();
        goals.swap(1, 4);
        assert_eq!(cost_goal(&traj, &goals).unwrap().0, j0);
    }

    #[test]
    fn collide_examples() {
        let free = TsdfVolume::new(Vec3::repeat(-1.0), 0.1, [21, 21, 21], 0.1).unwrap();
        let traj = [v(0.0, 0.0, 0.0), v(0.1, 0.0, 0.0), v(0.2, 0.0, 0.0)];
        let (j, g) = cost_collide(&traj, &[v(0.0, 0.0, 0.0)], &free).unwrap();
        assert_eq!(j, 0.0);
        assert!(g.iter().all(|x| *x == Vec3::zeros()));
        let mut neg = free.clone();
        neg.values.iter_mut().for_each(|x| *x = -0.1);
        let (j, _) = cost_collide(&traj[..2], &[v(0.0, 0.0, 0.0)], &neg).unwrap();
        assert!((j - 0.1).abs() < 1e-7);
        assert!(matches!(
            cost_collide(&traj, &[], &free),
            Err(Error::EmptyAgentPoints)
        ));
    }

    #[test]
    fn collide_gradient_matches_finite_differences() {
        let vol = ball_volume();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let agents = gripper_points(&v(0.0, 0.0, -0.25), &GripperShape::default(), 8);
        let mut checked = 0;
        while checked < 20 {
            let traj = random_traj(&mut rng, 6);
            // skip configurations with queries near a cell face or the zero level
            let near_kink = traj.iter().skip(1).any(|t| {
                agents.iter().any(|p| {
                    let q = p + t - traj[0];
                    let g = (q - vol.origin) / vol.voxel_size;
                    let face = (0..3).any(|a| (g[a] - g[a].round()).abs() < 1e-3);
                    face || vol.query(&q).abs() < 1e-4
                })
            });
            if near_kink {
                continue;
            }
            let (j, g) = cost_collide(&traj, &agents, &vol).unwrap();
            if j == 0.0 {
                continue;
            }
            fd_check(
                &traj[..],
                &g,
                |t| cost_collide(t, &agents, &vol).unwrap().0,
                1e-6,
                1e-4,
            );
            checked += 1;
        }
    }

    #[test]
    fn normal_examples() {
        let n = v(0.0, 0.0, 1.0);
        let along: Vec<Vec3> = (0..5).map(|i| n * i as f64 * 0.1).collect();
        assert!(cost_normal(&along, &n).unwrap().0 < 1e-15);
        let against: Vec<Vec3> = (0..5).map(|i| -n * i as f64 * 0.1).collect();
        assert!(cost_normal(&against, &n).unwrap().0 < 1e-15);
        let ortho = [
            v(0.0, 0.0, 0.0),
            v(1.0, 0.0, 0.0),
            v(0.0, 2.0, 0.0),
            v(1.0, 1.0, 0.0),
        ];
        assert!((cost_normal(&ortho, &n).unwrap().0 - 2.0).abs() < 1e-12);
        let degenerate = [v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 0.0, 0.0)];
        assert!(matches!(
            cost_normal(&degenerate, &n),
            Err(Error::DegenerateSegment(2))
        ));
    }

    #[test]
    fn normal_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = v(0.3, -0.4, 0.5).normalize();
        for _ in 0..50 {
            let traj = random_traj(&mut rng, 7);
            // avoid the sign switch plane and very short segments
            if traj.iter().skip(1).any(|t| {
                let d = t - traj[0];
                d.norm() < 0.05 || (d.normalize().dot(&n)).abs() < 1e-3
            }) {
                continue;
            }
            let (_, g) = cost_normal(&traj, &n).unwrap();
            fd_check(&traj, &g[..], |t| cost_normal(t, &n).unwrap().0, 1e-6, 1e-4);
        }
    }

    #[test]
    fn goal_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let traj = random_traj(&mut rng, 5);
            let goals = random_traj(&mut rng, 4);
            let (_, g) = cost_goal(&traj, &goals).unwrap();
            fd_check(&traj, &g, |t| cost_goal(t, &goals).unwrap().0, 1e-6, 1e-4);
        }
    }

    #[test]
    fn total_combines_terms() {
        let vol = ball_volume();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let traj = random_traj(&mut rng, 8);
        let goals = random_traj(&mut rng, 3);
        let agents = gripper_points(&traj[0], &GripperShape::default(), 32);
        let cfg = GuidanceConfig {
            lambda_g: 1.0,
            lambda_c: 2.0,
            lambda_n: 0.1,
            goals: &goals,
            agent_points: &agents,
            normal: Vec3::x(),
            volume: Some(&vol),
        };
        let r = cost_total(&traj, &cfg).unwrap();
        assert!((r.total - (r.goal + 2.0 * r.collide + 0.1 * r.normal)).abs() < 1e-9);
        assert_eq!(r.gradient[0], Vec3::zeros());
        assert!(r.goal >= 0.0 && r.collide >= 0.0 && r.normal >= 0.0);

        let none = cost_total(&traj, &GuidanceConfig::none()).unwrap();
        assert_eq!(none, CostReport::zero(8));

        let goal_only = GuidanceConfig {
            lambda_g: 1.0,
            goals: &goals,
            ..GuidanceConfig::none()
        };
        let r = cost_total(&traj, &goal_only).unwrap();
        assert_eq!(r.total, cost_goal(&traj, &goals).unwrap().0);
        assert_eq!(r.collide, 0.0);
        assert_eq!(r.normal, 0.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let traj = [v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0)];
        let bad_normal = GuidanceConfig {
            lambda_n: 1.0,
            normal: v(0.0, 0.0, 2.0),
            ..GuidanceConfig::none()
        };
        assert!(matches!(
            cost_total(&traj, &bad_normal),
            Err(Error::InvalidConfig(_))
        ));
        let neg = GuidanceConfig {
            lambda_g: -1.0,
            ..GuidanceConfig::none()
        };
        assert!(matches!(
            cost_total(&traj, &neg),
            Err(Error::InvalidConfig(_))
        ));
        let no_goals = GuidanceConfig {
            lambda_g: 1.0,
            ..GuidanceConfig::none()
        };
        assert!(matches!(
            cost_total(&traj, &no_goals),
            Err(Error::EmptyGoals)
        ));
    }

    #[test]
    fn gripper_points_on_primitive() {
        let c = v(0.1, 0.2, 0.3);
        let pts = gripper_points(
            &c,
            &GripperShape::Box {
                half_extents: [0.01, 0.02, 0.03],
            },
            32,
        );
        assert_eq!(pts.len(), 32);
        for p in &pts {
            let d = p - c;
            let m = (d.x.abs() / 0.01)
                .max(d.y.abs() / 0.02)
                .max(d.z.abs() / 0.03);
            assert!((m - 1.0).abs() < 1e-12);
        }
        let sph = GripperShape::Spheres {
            offsets: vec![[0.0, 0.0, 0.0], [0.0, 0.05, 0.0]],
            radius: 0.01,
        };
        let pts = gripper_points(&c, &sph, 10);
        for (i, p) in pts.iter().enumerate() {
            let o = if i % 2 == 0 { c } else { c + v(0.0, 0.05, 0.0) };
            assert!(((p - o).norm() - 0.01).abs() < 1e-12);
        }
        assert_eq!(pts, gripper_points(&c, &sph, 10));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn vec3() -> impl Strategy<Value = Vec3> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Rescaling every weight by c scales total and gradient by c and
        /// leaves the cost ordering of a trajectory set unchanged.
        #[test]
        fn weight_rescaling(
            trajs in prop::collection::vec(prop::collection::vec(vec3(), 6), 10),
            goals in prop::collection::vec(vec3(), 1..4),
            c in 0.01..100.0f64,
        ) {
            let vol = TsdfVolume::from_sdf(Vec3::repeat(-1.2), 0.1, [25, 25, 25], 0.2, |p| p.norm() - 0.4).unwrap();
            let agents = gripper_points(&Vec3::zeros(), &GripperShape::default(), 8);
            let cfg = GuidanceConfig {
                lambda_g: 1.0, lambda_c: 1.0, lambda_n: 0.1,
                goals: &goals, agent_points: &agents, normal: Vec3::y(), volume: Some(&vol),
            };
            let scaled = cfg.scaled(c);
            let mut base = Vec::new();
            let mut resc = Vec::new();
            for t in &trajs {
                let (Ok(a), Ok(b)) = (cost_total(t, &cfg), cost_total(t, &scaled)) else { continue };
                prop_assert!((b.total - c * a.total).abs() <= 1e-9 * (1.0 + b.total.abs()));
                for (ga, gb) in a.gradient.iter().zip(&b.gradient) {
                    prop_assert!((gb - ga * c).norm() <= 1e-9 * (1.0 + gb.norm()));
                }
                base.push(a.total);
                resc.push(b.total);
            }
            let order = |v: &[f64]| {
                let mut idx: Vec<usize> = (0..v.len()).collect();
                idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
                idx
            };
            let (oa, ob) = (order(&base), order(&resc));
            // ordering may only differ between entries equal up to rounding
            for (i, j) in oa.iter().zip(&ob) {
                prop_assert!((base[*i] - base[*j]).abs() <= 1e-12 * (1.0 + base[*i].abs()));
            }
        }
    }
}
