//! Affordance labels from a metric-calibrated scene: the hand trajectory,
//! contact and goal points, heatmap supervision, the coarse losses and
//! heatmap-to-3D lifting. All 3D outputs are metric, in the first camera's
//! frame.

use std::collections::BTreeMap;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{DepthMap, SceneBundle};
use crate::metric::RefinementResult;
use crate::{Error, Intrinsics, Result, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory {
    pub waypoints: Vec<Vec3>,
}

impl Trajectory {
    pub fn new(waypoints: Vec<Vec3>) -> Result<Self> {
        if waypoints.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "trajectory needs at least 2 waypoints, got {}",
                waypoints.len()
            )));
        }
        if waypoints.iter().any(|w| !w.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidConfig(
                "trajectory has non-finite coordinates".into(),
            ));
        }
        Ok(Trajectory { waypoints })
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    /// `h` waypoints evenly spaced by arc length along the polyline.
    pub fn resample(&self, h: usize) -> Result<Trajectory> {
        if h < 2 {
            return Err(Error::InvalidConfig("horizon must be at least 2".into()));
        }
        let w = &self.waypoints;
        let mut cum = vec![0.0];
        for s in w.windows(2) {
            cum.push(cum.last().unwrap() + (s[1] - s[0]).norm());
        }
        let total = *cum.last().unwrap();
        if !(total > 0.0) {
            return Trajectory::new(vec![w[0]; h]);
        }
        let mut out = Vec::with_capacity(h);
        let mut seg = 0;
        for i in 0..h {
            let target = total * i as f64 / (h - 1) as f64;
            while seg + 2 < cum.len() && cum[seg + 1] < target {
                seg += 1;
            }
            let len = cum[seg + 1] - cum[seg];
            let t = if len > 0.0 {
                ((target - cum[seg]) / len).clamp(0.0, 1.0)
            } else {
                0.0
            };
            out.push(w[seg].lerp(&w[seg + 1], t));
        }
        Trajectory::new(out)
    }
}

/// One training/evaluation label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffordanceSample {
    pub instruction: String,
    pub contact: Vec<Vec3>,
    pub goal: Vec<Vec3>,
    pub trajectory: Vec<Vec3>,
}

/// Hand pixels of frame `i` with valid depth: pixel coordinates and depth.
fn hand_pixels(scene: &SceneBundle, i: usize) -> Result<Vec<(f64, f64, f64)>> {
    let f = &scene.frames[i];
    let m = &f.hand_mask;
    if m.count() == 0 {
        return Err(Error::EmptyHandMask(i));
    }
    let mut out = Vec::new();
    for y in 0..m.height {
        for x in 0..m.width {
            if m.at(x, y) {
                let d = f.depth.at(x, y);
                if d.is_finite() && d > 0.0 {
                    out.push((x as f64, y as f64, d));
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::NoValidHandDepth(i));
    }
    Ok(out)
}

/// Maps metric points in camera `i` to metric points in camera 0.
fn to_first_camera(refined: &RefinementResult, i: usize) -> impl Fn(&Vec3) -> Vec3 + '_ {
    let rel = refined.poses[0].inverse().compose(&refined.poses[i]);
    let (s0, si) = (refined.scales[0], refined.scales[i]);
    move |p| rel.transform_point(&(p / si)) * s0
}

fn check_refined(scene: &SceneBundle, refined: &RefinementResult) -> Result<()> {
    if refined.poses.len() != scene.frames.len() || refined.scales.len() != scene.frames.len() {
        return Err(Error::DimensionMismatch(format!(
            "refinement has {} poses / {} scales for {} frames",
            refined.poses.len(),
            refined.scales.len(),
            scene.frames.len()
        )));
    }
    Ok(())
}

/// Per-frame hand center (centroid pixel at the median hand depth) in the
/// first camera's frame, ordered by frame.
pub fn extract_trajectory(scene: &SceneBundle, refined: &RefinementResult) -> Result<Trajectory> {
    check_refined(scene, refined)?;
    let mut out = Vec::with_capacity(scene.frames.len());
    for (i, f) in scene.frames.iter().enumerate() {
        let px = hand_pixels(scene, i)?;
        let n = px.len() as f64;
        let cu = px.iter().map(|p| p.0).sum::<f64>() / n;
        let cv = px.iter().map(|p| p.1).sum::<f64>() / n;
        let d = median(px.iter().map(|p| p.2).collect());
        let c = f.intrinsics.backproject(&Vector2::new(cu, cv), d)?;
        out.push(to_first_camera(refined, i)(&c));
    }
    Trajectory::new(out)
}

pub const DEFAULT_VOXEL: f64 = 0.01;

/// Contact points from the first frame's hand pixels and goal points from
/// the last frame's, both in the first camera's frame and downsampled with
/// [`voxel_downsample`].
pub fn extract_contact_goal(
    scene: &SceneBundle,
    refined: &RefinementResult,
    n_contact: usize,
    n_goal: usize,
    voxel: f64,
) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    check_refined(scene, refined)?;
    let last = scene.frames.len() - 1;
    let cloud = |i: usize| -> Result<Vec<Vec3>> {
        let k = &scene.frames[i].intrinsics;
        let map = to_first_camera(refined, i);
        hand_pixels(scene, i)?
            .into_iter()
            .map(|(u, v, d)| Ok(map(&k.backproject(&Vector2::new(u, v), d)?)))
            .collect()
    };
    let contact = voxel_downsample(&cloud(0)?, voxel, n_contact)?;
    let goal = voxel_downsample(&cloud(last)?, voxel, n_goal)?;
    Ok((contact, goal))
}

/// Voxel-grid downsampling: one representative per occupied cell (the point
/// nearest the cell centroid), cells visited in index order, then farthest
/// point sampling down to `n` starting from the representative nearest the
/// overall centroid. Returns `min(n, cells)` points.
pub fn voxel_downsample(points: &[Vec3], voxel: f64, n: usize) -> Result<Vec<Vec3>> {
    if !(voxel > 0.0) {
        return Err(Error::InvalidConfig("voxel size must be positive".into()));
    }
    if points.is_empty() || n == 0 {
        return Ok(Vec::new());
    }
    let mut cells: BTreeMap<(i64, i64, i64), Vec<Vec3>> = BTreeMap::new();
    for p in points {
        let key = (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        );
        cells.entry(key).or_default().push(*p);
    }
    let reps: Vec<Vec3> = cells
        .values()
        .map(|pts| {
            let c = pts.iter().sum::<Vec3>() / pts.len() as f64;
            nearest(pts, &c).1
        })
        .collect();
    let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
    let first = nearest(&reps, &centroid).0;
    let m = n.min(reps.len());
    let mut chosen = vec![first];
    let mut dist: Vec<f64> = reps
        .iter()
        .map(|r| (r - reps[first]).norm_squared())
        .collect();
    while chosen.len() < m {
        let mut best = 0;
        for (i, d) in dist.iter().enumerate() {
            if *d > dist[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (d, r) in dist.iter_mut().zip(&reps) {
            *d = d.min((r - reps[best]).norm_squared());
        }
    }
    Ok(chosen.into_iter().map(|i| reps[i]).collect())
}

/// Index and value of the point nearest `c` (lowest index on ties).
fn nearest(pts: &[Vec3], c: &Vec3) -> (usize, Vec3) {
    let mut best = (0, f64::INFINITY);
    for (i, p) in pts.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    (best.0, pts[best.0])
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-pixel probability image, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub grid: Vec<f64>,
    /// Goal depth in meters (goal heatmaps only).
    pub goal_depth: Option<f64>,
}

impl Heatmap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.grid[y * self.width + x]
    }
}

pub const DEFAULT_SIGMA_PX: f64 = 8.0;

/// Equal-weight isotropic Gaussian per projected point, normalized so the
/// maximum is 1. `goal_depth` is the median depth of the visible points.
pub fn fit_heatmap(points: &[Vec3], k: &Intrinsics, sigma_px: f64) -> Result<Heatmap> {
    if !(sigma_px > 0.0) {
        return Err(Error::InvalidConfig("sigma must be positive".into()));
    }
    let mut proj = Vec::new();
    let mut depths = Vec::new();
    for p in points {
        if p.z > 0.0 {
            let uv = Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy);
            if k.contains(uv.x, uv.y) {
                proj.push(uv);
                depths.push(p.z);
            }
        }
    }
    if proj.is_empty() {
        return Err(Error::NoVisiblePoints);
    }
    let inv = 1.0 / (2.0 * sigma_px * sigma_px);
    let mut grid = vec![0.0; k.width * k.height];
    for y in 0..k.height {
        for x in 0..k.width {
            grid[y * k.width + x] = proj
                .iter()
                .map(|uv| (-((x as f64 - uv.x).powi(2) + (y as f64 - uv.y).powi(2)) * inv).exp())
                .sum();
        }
    }
    let max = grid.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::NoVisiblePoints);
    }
    grid.iter_mut().for_each(|g| *g /= max);
    Ok(Heatmap {
        width: k.width,
        height: k.height,
        grid,
        goal_depth: Some(median(depths)),
    })
}

/// Losses of the coarse predictors. The auxiliary vector-field term is not
/// modeled; `vector_field_omitted` flags that it is reported as zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseLosses {
    pub goal: f64,
    pub contact: f64,
    pub goal_bce: f64,
    pub goal_depth: f64,
    pub vector_field: f64,
    pub vector_field_omitted: bool,
}

const BCE_EPS: f64 = 1e-7;

/// Mean per-pixel binary cross-entropy. Logarithm arguments are clamped to
/// `[1e-7, 1]`, so a prediction equal to a binary target scores exactly 0.
pub fn bce(pred: &Heatmap, gt: &Heatmap) -> Result<f64> {
    if pred.width != gt.width || pred.height != gt.height || pred.grid.len() != gt.grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "heatmaps {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let n = pred.grid.len() as f64;
    let sum: f64 = pred
        .grid
        .iter()
        .zip(&gt.grid)
        .map(|(&p, &y)| {
            let mut l = 0.0;
            if y != 0.0 {
                l -= y * p.max(BCE_EPS).ln();
            }
            if y != 1.0 {
                l -= (1.0 - y) * (1.0 - p).max(BCE_EPS).ln();
            }
            l
        })
        .sum();
    Ok(sum / n)
}

/// `L_g = BCE(goal) + λ_d (D̂_g − D_g)²` and `L_c = BCE(contact)`.
pub fn coarse_losses(
    pred_goal: &Heatmap,
    gt_goal: &Heatmap,
    pred_contact: &Heatmap,
    gt_contact: &Heatmap,
    lambda_d: f64,
) -> Result<CoarseLosses> {
    let goal_bce = bce(pred_goal, gt_goal)?;
    let contact = bce(pred_contact, gt_contact)?;
    let goal_depth = match (pred_goal.goal_depth, gt_goal.goal_depth) {
        (Some(a), Some(b)) => (a - b).powi(2),
        _ => {
            return Err(Error::InvalidConfig(
                "goal heatmaps need a goal depth".into(),
            ))
        }
    };
    Ok(CoarseLosses {
        goal: goal_bce + lambda_d * goal_depth,
        contact,
        goal_bce,
        goal_depth,
        vector_field: 0.0,
        vector_field_omitted: true,
    })
}

/// Where lifted pixels get their depth.
#[derive(Debug, Clone, Copy)]
pub enum DepthSource<'a> {
    /// Per-pixel depth (contact points lie on observed surfaces).
    Map(&'a DepthMap),
    /// A single predicted depth (goal points lie in free space).
    Constant(f64),
}

/// Top-`n` pixels at or above `threshold` with valid depth, back-projected.
/// Ties in heatmap value keep row-major order. Returns points with their
/// heatmap scores.
pub fn lift_heatmap_to_points(
    h: &Heatmap,
    depth: DepthSource,
    k: &Intrinsics,
    n: usize,
    threshold: f64,
) -> Result<Vec<(Vec3, f64)>> {
    let depth_at = |x: usize, y: usize| -> Option<f64> {
        let d = match depth {
            DepthSource::Map(m) => m.at(x, y),
            DepthSource::Constant(d) => d,
        };
        (d.is_finite() && d > 0.0).then_some(d)
    };
    let mut cand: Vec<(usize, f64, f64)> = Vec::new();
    for y in 0..h.height {
        for x in 0..h.width {
            let v = h.at(x, y);
            if v >= threshold {
                if let Some(d) = depth_at(x, y) {
                    cand.push((y * h.width + x, v, d));
                }
            }
        }
    }
    if cand.is_empty() {
        return Err(Error::NothingAboveThreshold);
    }
    cand.sort_by(|a, b| b.1.total_cmp(&a.1));
    cand.truncate(n);
    cand.into_iter()
        .map(|(i, v, d)| {
            let px = Vector2::new((i % h.width) as f64, (i / h.width) as f64);
            Ok((k.backproject(&px, d)?, v))
        })
        .collect()
}

/// Seeded arc-shaped interaction samples for training and evaluating the
/// trajectory denoiser. Each trajectory leaves a contact region, bulges
/// sideways and reaches a goal region 0.2–0.35 m away; contact and goal
/// points are small clusters around the true start and end.
pub fn synth_arc_samples(n: usize, horizon: usize, seed: u64) -> Result<Vec<AffordanceSample>> {
    if horizon < 2 {
        return Err(Error::InvalidConfig("horizon must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let start = Vec3::new(u(-0.15, 0.15), u(-0.1, 0.1), u(1.1, 1.3));
        let yaw = u(0.0, std::f64::consts::TAU);
        let pitch = u(-0.4, 0.4);
        let dir = Vec3::new(yaw.cos() * pitch.cos(), pitch.sin(), yaw.sin() * pitch.cos() * 0.5).normalize();
        let end = start + dir * u(0.2, 0.35);
        let side = dir.cross(&Vec3::z()).try_normalize(1e-9).unwrap_or_else(Vec3::x);
        let bulge = side * u(-0.08, 0.08) - Vec3::z() * u(0.0, 0.05);
        let trajectory: Vec<Vec3> = (0..horizon)
            .map(|h| {
                let t = h as f64 / (horizon - 1) as f64;
                start.lerp(&end, t) + bulge * (4.0 * t * (1.0 - t))
            })
            .collect();
        let mut cluster = |c: Vec3| -> Vec<Vec3> {
            let pts: Vec<Vec3> = (0..8).map(|_| Vec3::new(u(-0.01, 0.01), u(-0.01, 0.01), u(-0.01, 0.01))).collect();
            // centered so the cluster mean is exactly `c`
            let m = pts.iter().sum::<Vec3>() / 8.0;
            pts.into_iter().map(|p| c + p - m).collect()
        };
        let contact = cluster(start);
        let goal = cluster(end);
        out.push(AffordanceSample { instruction: "move the object along an arc".into(), contact, goal, trajectory });
    }
    Ok(out)
}

/// Mean of a point set (`None` if empty).
pub fn centroid(points: &[Vec3]) -> Option<Vec3> {
    (!points.is_empty()).then(|| points.iter().sum::<Vec3>() / points.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{synth_scene, HandMotion, SynthConfig};
    use crate::metric::RefinementResult;

    fn truth_refinement(gt: &crate::ingest::GroundTruth) -> RefinementResult {
        RefinementResult {
            poses: gt.poses_wc.clone(),
            scales: gt.frame_scales.clone(),
            reference_index: 0,
            energy_trace: vec![0.0],
            pair_count: 0,
        }
    }

    fn cfg(hand: HandMotion) -> SynthConfig {
        SynthConfig {
            frames: 6,
            landmarks: 30,
            hand,
            ..Default::default()
        }
    }

    #[test]
    fn line_motion_is_collinear_and_endpoints_match() {
        let (b, gt) = synth_scene(&cfg(HandMotion::Line), 1).unwrap();
        let t = extract_trajectory(&b, &truth_refinement(&gt)).unwrap();
        assert_eq!(t.len(), 6);
        let (s, e) = (t.waypoints[0], t.waypoints[5]);
        let dir = (e - s).normalize();
        for w in &t.waypoints {
            let off = (w - s) - dir * (w - s).dot(&dir);
            assert!(off.norm() < 1e-3, "off-line by {}", off.norm());
        }
        assert!((s - gt.hand_trajectory[0]).norm() < 1e-3);
        assert!((e - gt.hand_trajectory[5]).norm() < 1e-3);
    }

    #[test]
    fn static_hand_gives_constant_waypoints() {
        let (b, gt) = synth_scene(&cfg(HandMotion::Static), 2).unwrap();
        let t = extract_trajectory(&b, &truth_refinement(&gt)).unwrap();
        // the hand is re-rendered from each viewpoint, so pixel quantization
        // moves the centroid slightly; the true center is fixed
        for w in &t.waypoints {
            assert!((w - gt.hand_trajectory[0]).norm() < 1e-3);
        }
        // identical frames reproduce identical waypoints exactly
        let mut b2 = b.clone();
        for i in 1..b2.frames.len() {
            b2.frames[i] = b2.frames[0].clone();
        }
        let mut r = truth_refinement(&gt);
        r.poses = vec![gt.poses_wc[0]; 6];
        let t = extract_trajectory(&b2, &r).unwrap();
        for w in &t.waypoints {
            assert!((w - t.waypoints[0]).norm() < 1e-6);
        }
    }

    #[test]
    fn empty_hand_mask_is_reported() {
        let (mut b, gt) = synth_scene(&cfg(HandMotion::Arc), 3).unwrap();
        b.frames[2]
            .hand_mask
            .data
            .iter_mut()
            .for_each(|m| *m = false);
        assert!(matches!(
            extract_trajectory(&b, &truth_refinement(&gt)),
            Err(Error::EmptyHandMask(2))
        ));
    }

    #[test]
    fn contact_and_goal_points_near_blob() {
        let (b, gt) = synth_scene(&cfg(HandMotion::Arc), 4).unwrap();
        let r = truth_refinement(&gt);
        let (c, g) = extract_contact_goal(&b, &r, 16, 16, DEFAULT_VOXEL).unwrap();
        assert!(!c.is_empty() && c.len() <= 16);
        let tol = gt.hand_radius + DEFAULT_VOXEL * 3f64.sqrt();
        assert!(c.iter().all(|p| (p - gt.hand_trajectory[0]).norm() < tol));
        assert!(g.iter().all(|p| (p - gt.hand_trajectory[5]).norm() < tol));
        let (c1, _) = extract_contact_goal(&b, &r, 1, 1, DEFAULT_VOXEL).unwrap();
        assert_eq!(c1.len(), 1);
        assert_eq!(c1[0], c[0]);
        assert_eq!(
            extract_contact_goal(&b, &r, 16, 16, DEFAULT_VOXEL).unwrap(),
            (c, g)
        );
    }

    #[test]
    fn downsample_rules() {
        let pts: Vec<Vec3> = (0..50)
            .map(|i| Vec3::new(0.003 * i as f64, 0.0, 1.0))
            .collect();
        let all = voxel_downsample(&pts, 0.01, 1000).unwrap();
        // 0..0.147 m spans 15 one-centimeter cells
        assert_eq!(all.len(), 15);
        let one = voxel_downsample(&pts, 0.01, 1).unwrap();
        let centroid = pts.iter().sum::<Vec3>() / 50.0;
        assert!(all
            .iter()
            .all(|p| (p - centroid).norm() >= (one[0] - centroid).norm()));
        // identical clouds give identical samples
        let same = voxel_downsample(&pts, 0.01, 1).unwrap();
        assert!((same[0] - one[0]).norm() < 0.01);
    }

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 31.5, 23.5, 64, 48).unwrap()
    }

    #[test]
    fn heatmap_single_and_symmetric() {
        let p = Vec3::new(0.1, -0.05, 1.0);
        let h = fit_heatmap(&[p], &k(), 4.0).unwrap();
        let (u0, v0) = (31.5 + 10.0, 23.5 - 5.0);
        // the maximum is at the projected point: 41.5 rounds to pixels 41 and 42
        let max = h.grid.iter().copied().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        assert!((h.at(41, 18) - h.at(42, 18)).abs() < 1e-12);
        let _ = (u0, v0);
        // two points mirrored about the image center (u → w-1-u)
        let a = Vec3::new(0.12, 0.03, 1.0);
        let b = Vec3::new(-0.12, 0.03, 1.0);
        let h = fit_heatmap(&[a, b], &k(), 5.0).unwrap();
        for y in 0..48 {
            for x in 0..64 {
                assert!((h.at(x, y) - h.at(63 - x, y)).abs() < 1e-6);
            }
        }
        assert!(matches!(
            fit_heatmap(&[Vec3::new(0.0, 0.0, -1.0)], &k(), 4.0),
            Err(Error::NoVisiblePoints)
        ));
    }

    #[test]
    fn heatmap_at_pixel_center_has_unique_max() {
        let p = Vec3::new((10.0 - 31.5) / 100.0, (20.0 - 23.5) / 100.0, 1.0);
        let h = fit_heatmap(&[p], &k(), 4.0).unwrap();
        assert_eq!(h.at(10, 20), 1.0);
        assert_eq!(h.grid.iter().filter(|v| **v == 1.0).count(), 1);
    }

    fn binary(vals: &[f64], depth: f64) -> Heatmap {
        Heatmap {
            width: vals.len(),
            height: 1,
            grid: vals.to_vec(),
            goal_depth: Some(depth),
        }
    }

    #[test]
    fn loss_identities() {
        let gt = binary(&[0.0, 1.0, 1.0, 0.0], 0.8);
        let l = coarse_losses(&gt, &gt, &gt, &gt, 1.0).unwrap();
        assert_eq!((l.goal, l.contact), (0.0, 0.0));
        assert!(l.vector_field_omitted && l.vector_field == 0.0);
        let half = binary(&[0.5; 4], 0.8);
        let zeros = binary(&[0.0; 4], 0.8);
        assert!((bce(&half, &zeros).unwrap() - 2f64.ln()).abs() < 1e-9);
        let far = binary(&[0.0, 1.0, 1.0, 0.0], 1.0);
        let l = coarse_losses(&far, &gt, &gt, &gt, 1.0).unwrap();
        assert!((l.goal - 0.04).abs() < 1e-12);
        // BCE is positive away from the target
        let off = binary(&[0.1, 0.9, 0.8, 0.05], 0.8);
        assert!(bce(&off, &gt).unwrap() > 0.0);
        assert!(matches!(
            bce(&binary(&[0.0; 3], 0.0), &gt),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn lifting() {
        let mut h = Heatmap {
            width: 64,
            height: 48,
            grid: vec![0.0; 64 * 48],
            goal_depth: None,
        };
        // a delta at the principal point needs integer coordinates: use an odd-free K
        let kk = Intrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap();
        h.grid[24 * 64 + 32] = 1.0;
        let pts = lift_heatmap_to_points(&h, DepthSource::Constant(1.0), &kk, 1, 0.5).unwrap();
        assert_eq!(pts.len(), 1);
        assert!((pts[0].0 - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
        assert!(matches!(
            lift_heatmap_to_points(&h, DepthSource::Constant(1.0), &kk, 1, 1.1),
            Err(Error::NothingAboveThreshold)
        ));
        // round trip through a fitted heatmap
        let p = Vec3::new(0.07, -0.04, 0.9);
        let fitted = fit_heatmap(&[p], &kk, 6.0).unwrap();
        let d = fitted.goal_depth.unwrap();
        let back = lift_heatmap_to_points(&fitted, DepthSource::Constant(d), &kk, 1, 0.0).unwrap();
        let reproj = kk.project(&back[0].0).unwrap() - kk.project(&p).unwrap();
        assert!(reproj.norm() <= 1.0);
        // ties keep row-major order
        let mut t = Heatmap {
            width: 4,
            height: 2,
            grid: vec![0.5; 8],
            goal_depth: None,
        };
        t.grid[6] = 0.7;
        let k4 = Intrinsics::new(10.0, 10.0, 1.5, 0.5, 4, 2).unwrap();
        let pts = lift_heatmap_to_points(&t, DepthSource::Constant(1.0), &k4, 3, 0.1).unwrap();
        let px: Vec<Vector2<f64>> = pts.iter().map(|(p, _)| k4.project(p).unwrap()).collect();
        assert!((px[0] - Vector2::new(2.0, 1.0)).norm() < 1e-9);
        assert!((px[1] - Vector2::new(0.0, 0.0)).norm() < 1e-9);
        assert!((px[2] - Vector2::new(1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn arc_samples_are_seeded_and_anchored() {
        let a = synth_arc_samples(5, 16, 3).unwrap();
        assert_eq!(a, synth_arc_samples(5, 16, 3).unwrap());
        for s in &a {
            assert_eq!(s.trajectory.len(), 16);
            assert!((centroid(&s.contact).unwrap() - s.trajectory[0]).norm() < 1e-12);
            assert!((centroid(&s.goal).unwrap() - s.trajectory[15]).norm() < 1e-12);
            let d = (s.trajectory[15] - s.trajectory[0]).norm();
            assert!((0.2..0.35).contains(&d));
        }
    }

    #[test]
    fn resample_by_arc_length() {
        let t = Trajectory::new(vec![Vec3::zeros(), Vec3::x(), Vec3::new(1.0, 1.0, 0.0)]).unwrap();
        let r = t.resample(5).unwrap();
        assert_eq!(r.len(), 5);
        assert!((r.waypoints[2] - Vec3::x()).norm() < 1e-12);
        assert!((r.waypoints[4] - Vec3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
    }
}
