//! Video-side pipeline on synthetic scenes: scale, refinement, extraction,
//! fusion, and the on-disk round trip between them.

use affordkit::afford::{extract_contact_goal, extract_trajectory};
use affordkit::ingest::{load_scene, synth_scene, write_scene, HandMotion, SynthConfig};
use affordkit::metric::{refine_poses_scales, solve_global_scale, RefineOptions, RefinementResult};
use affordkit::tsdf::TsdfVolume;
use affordkit::Parallelism;

fn small(hand: HandMotion) -> SynthConfig {
    SynthConfig {
        frames: 6,
        landmarks: 60,
        hand,
        ..Default::default()
    }
}

fn truth(gt: &affordkit::ingest::GroundTruth) -> RefinementResult {
    RefinementResult {
        poses: gt.poses_wc.clone(),
        scales: gt.frame_scales.clone(),
        reference_index: 0,
        energy_trace: vec![0.0],
        pair_count: 0,
    }
}

#[test]
fn scene_survives_disk_round_trip() {
    let (scene, _) = synth_scene(&small(HandMotion::Arc), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_scene(&scene, dir.path()).unwrap();
    let back = load_scene(&manifest).unwrap();
    assert_eq!(back.frames.len(), scene.frames.len());
    let a = solve_global_scale(&scene).unwrap().s_g;
    let b = solve_global_scale(&back).unwrap().s_g;
    // depth is stored as f32
    assert!((a - b).abs() < 1e-5 * a, "{a} vs {b}");
}

#[test]
fn refinement_recovers_small_perturbation() {
    let cfg = SynthConfig {
        rotation_perturbation_deg: 0.5,
        translation_perturbation_m: 0.005,
        ..small(HandMotion::Arc)
    };
    let (scene, gt) = synth_scene(&cfg, 2).unwrap();
    let s = solve_global_scale(&scene).unwrap();
    // solved from the perturbed initial poses, so only approximately
    assert!((s.s_g - gt.scale).abs() < 1e-2 * gt.scale, "{}", s.s_g);
    let r = refine_poses_scales(&scene, s.s_g, &RefineOptions::default()).unwrap();
    assert!(r.energy_trace.windows(2).all(|w| w[1] <= w[0]));
    let k = r.reference_index;
    assert_eq!(r.scales[k], s.s_g);
    for i in 0..scene.frames.len() {
        let rel = r.poses[k].inverse().compose(&r.poses[i]);
        let relg = gt.poses_wc[k].inverse().compose(&gt.poses_wc[i]);
        let err = relg.inverse().compose(&rel);
        assert!(err.angle().to_degrees() < 0.1, "frame {i}: {}", err.angle().to_degrees());
        let t = (rel.translation - relg.translation).norm() * gt.scale;
        assert!(t < 2e-3, "frame {i}: {t}");
    }
}

#[test]
fn sequential_and_parallel_refinement_agree() {
    let cfg = SynthConfig {
        frames: 4,
        rotation_perturbation_deg: 0.5,
        translation_perturbation_m: 0.005,
        ..small(HandMotion::None)
    };
    let (scene, gt) = synth_scene(&cfg, 4).unwrap();
    let run = |p| {
        let opts = RefineOptions { parallelism: p, max_outer: 2, ..Default::default() };
        refine_poses_scales(&scene, gt.scale, &opts).unwrap()
    };
    let a = run(Parallelism::Sequential);
    let b = run(Parallelism::Parallel);
    assert_eq!(a.energy_trace, b.energy_trace);
    assert_eq!(a.poses, b.poses);
}

#[test]
fn extraction_follows_the_hand() {
    let (scene, gt) = synth_scene(&small(HandMotion::Arc), 5).unwrap();
    let r = truth(&gt);
    let traj = extract_trajectory(&scene, &r).unwrap();
    assert_eq!(traj.waypoints.len(), gt.hand_trajectory.len());
    for (a, b) in traj.waypoints.iter().zip(&gt.hand_trajectory) {
        assert!((a - b).norm() < 1e-3, "{a:?} vs {b:?}");
    }
    let (contact, goal) = extract_contact_goal(&scene, &r, 8, 8, 0.01).unwrap();
    assert!(!contact.is_empty() && !goal.is_empty());
}

#[test]
fn fused_volume_has_a_surface_near_the_contact() {
    let (scene, gt) = synth_scene(&small(HandMotion::None), 6).unwrap();
    let f = &scene.frames[0];
    let id = affordkit::Pose::identity();
    let mut vol = TsdfVolume::from_frustum(&f.intrinsics, &id, 0.3, 2.5, 0.02, 0.06).unwrap();
    for (i, fr) in scene.frames.iter().enumerate() {
        let rel = gt.poses_wc[0].inverse().compose(&gt.poses_wc[i]);
        let pose = affordkit::Pose::new(rel.rotation, rel.translation * gt.scale);
        vol.fuse_frame(&fr.depth, &fr.intrinsics, &pose, Parallelism::default())
            .unwrap();
    }
    // the object face sits 3 cm behind the hand start, along the normal
    let (_, with_hand) = synth_scene(&small(HandMotion::Arc), 6).unwrap();
    let probe = with_hand.hand_trajectory[0] - with_hand.contact_normal * 0.03;
    assert!(vol.query(&probe).abs() < 0.5, "{}", vol.query(&probe));
    let n = vol.mean_normal(&[probe]).unwrap();
    assert!(n.dot(&gt.contact_normal) > 0.9, "{n:?}");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.tsdf");
    vol.save(&path).unwrap();
    let back = TsdfVolume::load(&path).unwrap();
    assert_eq!(back.query(&probe), vol.query(&probe));
}
