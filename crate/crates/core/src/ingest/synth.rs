//! Synthetic ground-truth scenes.
//!
//! A small room (floor, back wall, left wall) with a box-shaped object is
//! rendered by ray casting from cameras on a smooth arc. Depth is metric;
//! poses and landmarks are expressed in scale-unaware units (metric divided
//! by the true global scale), mimicking an SfM reconstruction. An optional
//! hand blob (a camera-facing disc at the blob center's depth) moves along a
//! smooth path and defines the hand masks.

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};

use super::{DepthMap, FrameObservation, Landmark, Mask, Observation, SceneBundle};
use crate::geom::look_at;
use crate::par::{map_range, Parallelism};
use crate::{Error, Intrinsics, Pose, Result, Vec3};

const FLOOR_Y: f64 = 0.40;
const BACK_Z: f64 = 2.4;
const LEFT_X: f64 = -0.8;
const BOX_MIN: [f64; 3] = [-0.12, 0.16, 1.35];
const BOX_MAX: [f64; 3] = [0.12, 0.40, 1.60];
const CRATE_MIN: [f64; 3] = [0.35, 0.05, 1.90];
const CRATE_MAX: [f64; 3] = [0.65, 0.40, 2.20];
const LOOK_TARGET: [f64; 3] = [0.0, 0.15, 1.5];
const ARC_RADIUS: f64 = 1.5;

const HAND_START: [f64; 3] = [0.0, 0.22, 1.32];
const HAND_CONTROL: [f64; 3] = [0.14, 0.10, 1.24];
const HAND_END: [f64; 3] = [0.26, 0.14, 1.20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandMotion {
    None,
    Static,
    Line,
    Arc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub frames: usize,
    pub landmarks: usize,
    /// True global scale: metric = scale * SfM units.
    pub scale: f64,
    /// Standard deviation of multiplicative depth noise.
    pub depth_noise: f64,
    pub rotation_perturbation_deg: f64,
    pub translation_perturbation_m: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Total angular sweep of the camera arc.
    pub arc_degrees: f64,
    pub hand: HandMotion,
    pub hand_radius: f64,
    /// Rigid transform applied to the whole world (poses and landmarks).
    pub world_transform: Pose,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 16,
            landmarks: 200,
            scale: 2.0,
            depth_noise: 0.0,
            rotation_perturbation_deg: 0.0,
            translation_perturbation_m: 0.0,
            width: 320,
            height: 240,
            focal: 300.0,
            arc_degrees: 24.0,
            hand: HandMotion::Arc,
            hand_radius: 0.035,
            world_transform: Pose::identity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// True world-from-camera poses in SfM units.
    pub poses_wc: Vec<Pose>,
    pub scale: f64,
    pub frame_scales: Vec<f64>,
    /// Hand blob centers in the first camera's frame, meters. Empty when the
    /// config has no hand.
    pub hand_trajectory: Vec<Vec3>,
    pub hand_radius: f64,
    /// Outward normal of the object face the hand starts in front of, in the
    /// first camera's frame.
    pub contact_normal: Vec3,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Surface {
    Floor,
    Back,
    Left,
    Crate(u8),
    Object(u8),
}

struct Hit {
    t: f64,
    surface: Surface,
}

fn ray_box(o: &Vec3, d: &Vec3, lo_c: [f64; 3], hi_c: [f64; 3]) -> Option<(f64, u8)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut face = 0u8;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < lo_c[a] || o[a] > hi_c[a] {
                return None;
            }
            continue;
        }
        let t1 = (lo_c[a] - o[a]) / d[a];
        let t2 = (hi_c[a] - o[a]) / d[a];
        let (lo, hi, f) = if t1 < t2 {
            (t1, t2, 2 * a as u8)
        } else {
            (t2, t1, 2 * a as u8 + 1)
        };
        if lo > t_near {
            t_near = lo;
            face = f;
        }
        t_far = t_far.min(hi);
    }
    (t_near <= t_far && t_near > 0.0).then_some((t_near, face))
}

/// First static-scene hit of the ray `o + t d`; with `d.z_cam = 1` the ray
/// parameter equals camera depth.
fn cast(o: &Vec3, d: &Vec3) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |t: f64, surface: Surface| {
        if t > 0.0 && best.as_ref().is_none_or(|b| t < b.t) {
            best = Some(Hit { t, surface });
        }
    };
    if d.y > 1e-12 {
        consider((FLOOR_Y - o.y) / d.y, Surface::Floor);
    }
    if d.z > 1e-12 {
        consider((BACK_Z - o.z) / d.z, Surface::Back);
    }
    if d.x < -1e-12 {
        consider((LEFT_X - o.x) / d.x, Surface::Left);
    }
    if let Some((t, f)) = ray_box(o, d, BOX_MIN, BOX_MAX) {
        consider(t, Surface::Object(f));
    }
    if let Some((t, f)) = ray_box(o, d, CRATE_MIN, CRATE_MAX) {
        consider(t, Surface::Crate(f));
    }
    best
}

fn camera_ray(k: &Intrinsics, pose: &Pose, u: f64, v: f64) -> (Vec3, Vec3) {
    let dc = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    (pose.translation, pose.rotation * dc)
}

fn hand_center(motion: HandMotion, t: f64) -> Option<Vec3> {
    let s = Vec3::from(HAND_START);
    let c = Vec3::from(HAND_CONTROL);
    let e = Vec3::from(HAND_END);
    match motion {
        HandMotion::None => None,
        HandMotion::Static => Some(s),
        HandMotion::Line => Some(s + (e - s) * t),
        HandMotion::Arc => Some(s * (1.0 - t).powi(2) + c * (2.0 * t * (1.0 - t)) + e * (t * t)),
    }
}

/// Metric canonical-frame camera poses on the arc.
fn canonical_cameras(cfg: &SynthConfig) -> Vec<Pose> {
    let target = Vec3::from(LOOK_TARGET);
    (0..cfg.frames)
        .map(|i| {
            let a = if cfg.frames > 1 {
                i as f64 / (cfg.frames - 1) as f64
            } else {
                0.0
            };
            let phi = (a - 0.5) * cfg.arc_degrees.to_radians();
            let eye = Vec3::new(
                ARC_RADIUS * phi.sin(),
                -0.25 + 0.04 * (2.0 * phi).sin(),
                ARC_RADIUS * (1.0 - phi.cos()),
            );
            look_at(&eye, &target, &Vec3::new(0.0, 1.0, 0.0))
        })
        .collect()
}

struct Rendered {
    depth: Vec<f64>,
    surface: Vec<Option<Surface>>,
    hand: Vec<bool>,
}

fn render(k: &Intrinsics, cam: &Pose, hand: Option<(Vec3, f64)>) -> Rendered {
    let n = k.pixel_count();
    let mut depth = vec![f64::NAN; n];
    let mut surface = vec![None; n];
    let mut hand_mask = vec![false; n];
    let hand_cam = hand.and_then(|(c, r)| {
        let hc = cam.inverse().transform_point(&c);
        (hc.z > 1e-6).then(|| {
            let uv = k.project(&hc).expect("positive depth");
            (uv, k.fx * r / hc.z, hc.z)
        })
    });
    for y in 0..k.height {
        for x in 0..k.width {
            let i = y * k.width + x;
            let (o, d) = camera_ray(k, cam, x as f64, y as f64);
            if let Some(h) = cast(&o, &d) {
                depth[i] = h.t;
                surface[i] = Some(h.surface);
            }
            if let Some((uv, rad, z)) = hand_cam {
                let du = x as f64 - uv.x;
                let dv = y as f64 - uv.y;
                if du * du + dv * dv <= rad * rad && !(depth[i] <= z) {
                    depth[i] = z;
                    hand_mask[i] = true;
                }
            }
        }
    }
    Rendered {
        depth,
        surface,
        hand: hand_mask,
    }
}

fn sample_landmark(rng: &mut ChaCha8Rng) -> (Vec3, Surface) {
    let pick: f64 = rng.random();
    if pick < 0.45 {
        (
            Vec3::new(
                rng.random_range(-0.8..1.4),
                rng.random_range(-0.9..FLOOR_Y),
                BACK_Z,
            ),
            Surface::Back,
        )
    } else if pick < 0.8 {
        (
            Vec3::new(
                rng.random_range(-0.8..1.4),
                FLOOR_Y,
                rng.random_range(0.6..BACK_Z),
            ),
            Surface::Floor,
        )
    } else {
        (
            Vec3::new(
                LEFT_X,
                rng.random_range(-0.9..FLOOR_Y),
                rng.random_range(0.5..BACK_Z),
            ),
            Surface::Left,
        )
    }
}

/// Generate a bundle and its ground truth. Deterministic in `(cfg, seed)`.
pub fn synth_scene(cfg: &SynthConfig, seed: u64) -> Result<(SceneBundle, GroundTruth)> {
    if cfg.frames < 2 {
        return Err(Error::DegenerateConfig("need at least 2 frames".into()));
    }
    if cfg.landmarks < 8 {
        return Err(Error::DegenerateConfig("need at least 8 landmarks".into()));
    }
    if !(cfg.scale > 0.0) || !(cfg.depth_noise >= 0.0) || !(cfg.hand_radius > 0.0) {
        return Err(Error::DegenerateConfig(
            "scale, hand radius must be positive; noise non-negative".into(),
        ));
    }
    if cfg.rotation_perturbation_deg < 0.0 || cfg.translation_perturbation_m < 0.0 {
        return Err(Error::DegenerateConfig(
            "perturbation magnitudes must be non-negative".into(),
        ));
    }
    if !(cfg.arc_degrees.abs() > 1e-9) {
        return Err(Error::DegenerateConfig(
            "all cameras coincide (zero arc)".into(),
        ));
    }
    if cfg.width < 8 || cfg.height < 8 || !(cfg.focal > 0.0) {
        return Err(Error::DegenerateConfig(
            "image too small or focal not positive".into(),
        ));
    }
    let k = Intrinsics::new(
        cfg.focal,
        cfg.focal,
        (cfg.width as f64 - 1.0) / 2.0,
        (cfg.height as f64 - 1.0) / 2.0,
        cfg.width,
        cfg.height,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cams = canonical_cameras(cfg);
    let hand_path: Vec<Option<Vec3>> = (0..cfg.frames)
        .map(|i| hand_center(cfg.hand, i as f64 / (cfg.frames - 1) as f64))
        .collect();

    let renders = map_range(cfg.frames, Parallelism::Parallel, |i| {
        render(&k, &cams[i], hand_path[i].map(|c| (c, cfg.hand_radius)))
    });

    // landmarks on the static planes, observed wherever they are visible
    let mut landmarks = Vec::with_capacity(cfg.landmarks);
    let mut attempts = 0usize;
    while landmarks.len() < cfg.landmarks {
        attempts += 1;
        if attempts > 200 * cfg.landmarks {
            return Err(Error::DegenerateConfig(format!(
                "only {} of {} landmarks are co-visible",
                landmarks.len(),
                cfg.landmarks
            )));
        }
        let (p, surf) = sample_landmark(&mut rng);
        let mut obs = Vec::new();
        for (fi, cam) in cams.iter().enumerate() {
            let pc = cam.inverse().transform_point(&p);
            if pc.z <= 1e-6 {
                continue;
            }
            let uv = k.project(&pc)?;
            if uv.x < 0.5
                || uv.y < 0.5
                || uv.x > k.width as f64 - 1.5
                || uv.y > k.height as f64 - 1.5
            {
                continue;
            }
            let (o, d) = camera_ray(&k, cam, uv.x, uv.y);
            match cast(&o, &d) {
                Some(h) if h.surface == surf && (h.t - pc.z).abs() <= 1e-9 * pc.z => {}
                _ => continue,
            }
            let (x0, y0) = (uv.x.floor() as usize, uv.y.floor() as usize);
            let r = &renders[fi];
            let support_ok = [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)]
                .iter()
                .all(|&(x, y)| {
                    let i = y * k.width + x;
                    r.surface[i] == Some(surf) && !r.hand[i]
                });
            if support_ok {
                obs.push((fi, uv));
            }
        }
        if obs.len() >= 2 {
            landmarks.push((p, obs));
        }
    }

    let w = cfg.world_transform;
    let s = cfg.scale;
    let to_sfm = |pose: &Pose| {
        let m = w.compose(pose);
        Pose::new(m.rotation, m.translation / s)
    };
    let poses_true: Vec<Pose> = cams.iter().map(to_sfm).collect();

    let mut frames = Vec::with_capacity(cfg.frames);
    for (i, r) in renders.into_iter().enumerate() {
        let mut depth = r.depth;
        if cfg.depth_noise > 0.0 {
            for d in depth.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *d *= 1.0 + cfg.depth_noise * n;
            }
        }
        let object: Vec<bool> = r
            .surface
            .iter()
            .zip(&r.hand)
            .map(|(s, &h)| !h && matches!(s, Some(Surface::Object(_))))
            .collect();
        let mut pose_init = poses_true[i];
        if cfg.rotation_perturbation_deg > 0.0 || cfg.translation_perturbation_m > 0.0 {
            let axis: [f64; 3] = UnitSphere.sample(&mut rng);
            let dir: [f64; 3] = UnitSphere.sample(&mut rng);
            let dr = UnitQuaternion::from_scaled_axis(
                Vec3::from(axis) * cfg.rotation_perturbation_deg.to_radians(),
            );
            let dt = Vec3::from(dir) * (cfg.translation_perturbation_m / s);
            pose_init = pose_init.compose(&Pose::new(dr, Vector3::zeros()));
            pose_init.translation += pose_init.rotation * dt;
        }
        frames.push(FrameObservation {
            index: i,
            depth: DepthMap::new(k.width, k.height, depth)?,
            hand_mask: Mask {
                width: k.width,
                height: k.height,
                data: r.hand,
            },
            object_mask: Mask {
                width: k.width,
                height: k.height,
                data: object,
            },
            pose_init,
            intrinsics: k,
        });
    }

    let landmarks = landmarks
        .into_iter()
        .enumerate()
        .map(|(id, (p, obs))| Landmark {
            id: id as u64,
            position: w.transform_point(&p) / s,
            observations: obs
                .into_iter()
                .map(|(frame, uv)| Observation {
                    frame,
                    pixel: Vector2::new(uv.x, uv.y),
                })
                .collect(),
        })
        .collect();

    let cam0_inv = cams[0].inverse();
    let hand_trajectory = hand_path
        .iter()
        .filter_map(|c| c.map(|c| cam0_inv.transform_point(&c)))
        .collect();
    let gt = GroundTruth {
        poses_wc: poses_true,
        scale: s,
        frame_scales: vec![s; cfg.frames],
        hand_trajectory,
        hand_radius: cfg.hand_radius,
        contact_normal: cam0_inv.rotation * Vec3::new(0.0, 0.0, -1.0),
    };
    Ok((SceneBundle::new(frames, landmarks)?, gt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            frames: 4,
            landmarks: 40,
            width: 96,
            height: 72,
            focal: 90.0,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let cfg = SynthConfig {
            depth_noise: 0.01,
            rotation_perturbation_deg: 1.0,
            ..small()
        };
        let (a, ga) = synth_scene(&cfg, 3).unwrap();
        let (b, gb) = synth_scene(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        let (c, _) = synth_scene(&cfg, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn depth_at_landmark_pixels_is_scaled_landmark_depth() {
        let cfg = small();
        let (b, gt) = synth_scene(&cfg, 1).unwrap();
        let mut checked = 0;
        for l in &b.landmarks {
            for o in &l.observations {
                let f = &b.frames[o.frame];
                let d = f.pose_init.inverse().transform_point(&l.position).z;
                let got = f.depth.sample(o.pixel.x, o.pixel.y).unwrap();
                assert!(
                    (got - gt.scale * d).abs() <= 1e-10 * got,
                    "{got} vs {}",
                    gt.scale * d
                );
                checked += 1;
            }
        }
        assert!(checked >= 80);
    }

    #[test]
    fn hand_mask_present_and_object_masked() {
        let (b, gt) = synth_scene(&small(), 0).unwrap();
        assert_eq!(gt.hand_trajectory.len(), 4);
        for f in &b.frames {
            assert!(f.hand_mask.count() > 10);
            assert!(f.object_mask.count() > 10);
            assert!(f
                .hand_mask
                .data
                .iter()
                .zip(&f.object_mask.data)
                .all(|(h, o)| !(h & o)));
        }
    }

    #[test]
    fn degenerate_configs() {
        assert!(matches!(
            synth_scene(
                &SynthConfig {
                    frames: 1,
                    ..small()
                },
                0
            ),
            Err(Error::DegenerateConfig(_))
        ));
        assert!(matches!(
            synth_scene(
                &SynthConfig {
                    arc_degrees: 0.0,
                    ..small()
                },
                0
            ),
            Err(Error::DegenerateConfig(_))
        ));
        assert!(matches!(
            synth_scene(
                &SynthConfig {
                    landmarks: 3,
                    ..small()
                },
                0
            ),
            Err(Error::DegenerateConfig(_))
        ));
    }
}
