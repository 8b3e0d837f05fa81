use std::path::{Path, PathBuf};

use affordkit::afford::{
    centroid, extract_contact_goal, extract_trajectory, synth_arc_samples, AffordanceSample,
    Trajectory,
};
use affordkit::costs::{gripper_points, CostReport, GripperShape, GuidanceConfig};
use affordkit::denoiser::{
    encode_conditioning, Denoiser, GmmPrior, MlpDenoiser, TrainOptions, TrainingExample,
};
use affordkit::diffusion::{
    guided_sample, rank_by_cost, DiffusionSchedule, GuideMode, SampleBatch, SamplerOptions,
};
use affordkit::gradcheck::{all_passed, gradcheck, GradcheckOptions, Target};
use affordkit::ingest::{load_scene, synth_scene, write_scene, DepthMap, HandMotion, SynthConfig};
use affordkit::io::{read_json, write_json_atomic};
use affordkit::metric::{refine_poses_scales, solve_global_scale, Descent, RefineOptions, RefinementResult, ScaleSolution};
use affordkit::par::{configure_threads, Parallelism};
use affordkit::ply::export_ply;
use affordkit::tsdf::TsdfVolume;
use affordkit::{denoiser, Error, Pose, Vec3};
use serde::{Deserialize, Serialize};

use crate::{Cli, Command, HandArg, ModeArg};

pub enum Failure {
    /// Bad invocation: exit 2 with the synopsis.
    Usage(String),
    /// Library error: exit 1.
    Domain(Error),
    /// A check ran and failed: exit 1.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

type Res = std::result::Result<(), Failure>;

struct Log {
    level: i32,
}

impl Log {
    fn info(&self, msg: impl AsRef<str>) {
        if self.level >= 1 {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn debug(&self, msg: impl AsRef<str>) {
        if self.level >= 2 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// Generated batch on disk: trajectories, unweighted term costs under the
/// scoring weights, and the settings that produced them.
#[derive(Debug, Serialize, Deserialize)]
pub struct BatchFile {
    pub guided: bool,
    pub lambda_g: f64,
    pub lambda_c: f64,
    pub lambda_n: f64,
    pub seed: u64,
    pub goals: Vec<Vec3>,
    pub trajectories: Vec<Vec<Vec3>>,
    pub costs: Vec<TermCosts>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TermCosts {
    pub total: f64,
    pub goal: f64,
    pub collide: f64,
    pub normal: f64,
}

#[derive(Debug, Serialize)]
struct RankFile {
    order: Vec<usize>,
    costs: Vec<TermCosts>,
}

pub fn run(cli: &Cli) -> Res {
    let log = Log {
        level: if cli.quiet { 0 } else { 1 + cli.verbose as i32 },
    };
    let threads = match std::env::var("AFFORDKIT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Failure::Usage(format!("AFFORDKIT_THREADS must be a count, got `{v}`")))?,
        Err(_) => 0,
    };
    let par = configure_threads(threads);
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed, &log),
        Command::CalibrateScale(a) => calibrate(a, &log),
        Command::RefinePoses(a) => refine(a, par, &log),
        Command::ExtractAffordance(a) => extract(a, &log),
        Command::FuseTsdf(a) => fuse(a, par, &log),
        Command::TrainDenoiser(a) => train(a, cli.seed, par, &log),
        Command::Generate(a) => generate(a, cli.seed, par, &log),
        Command::Rank(a) => rank(a),
        Command::Gradcheck(a) => grad(a, cli.seed, &log),
    }
}

fn sample_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("sample_{i:04}.json"))
}

fn synth(a: &crate::SynthArgs, seed: u64, log: &Log) -> Res {
    let cfg = SynthConfig {
        frames: a.frames,
        landmarks: a.landmarks,
        scale: a.scale,
        depth_noise: a.depth_noise,
        rotation_perturbation_deg: a.rot_perturb,
        translation_perturbation_m: a.trans_perturb,
        hand: match a.hand {
            HandArg::None => HandMotion::None,
            HandArg::Static => HandMotion::Static,
            HandArg::Line => HandMotion::Line,
            HandArg::Arc => HandMotion::Arc,
        },
        ..SynthConfig::default()
    };
    let (scene, gt) = synth_scene(&cfg, seed)?;
    let manifest = write_scene(&scene, &a.out)?;
    write_json_atomic(&a.out.join("ground_truth.json"), &gt)?;
    if a.samples > 0 {
        let dir = a.out.join("samples");
        std::fs::create_dir_all(&dir).map_err(Error::from)?;
        // the arc family is centered at (0, 0, 1.2); move it onto this scene's
        // hand start so the demonstrations cover the scene
        let shift = gt
            .hand_trajectory
            .first()
            .map_or(Vec3::zeros(), |h| h - Vec3::new(0.0, 0.0, 1.2));
        for (i, mut s) in synth_arc_samples(a.samples, 16, seed)?.into_iter().enumerate() {
            for p in s.contact.iter_mut().chain(&mut s.goal).chain(&mut s.trajectory) {
                *p += shift;
            }
            write_json_atomic(&sample_path(&dir, i), &s)?;
        }
    }
    log.info(format!(
        "wrote {} frames, {} landmarks to {}",
        scene.frames.len(),
        scene.landmarks.len(),
        manifest.display()
    ));
    Ok(())
}

fn calibrate(a: &crate::CalibrateArgs, log: &Log) -> Res {
    let scene = load_scene(&a.manifest)?;
    let sol = solve_global_scale(&scene)?;
    write_json_atomic(&a.out, &sol)?;
    log.info(format!(
        "s_g = {:.6} from {} observations (mean sq. residual {:.3e})",
        sol.s_g, sol.inlier_count, sol.residual
    ));
    Ok(())
}

fn refine(a: &crate::RefineArgs, par: Parallelism, log: &Log) -> Res {
    let scene = load_scene(&a.manifest)?;
    let sol: ScaleSolution = read_json(&a.scale)?;
    let opts = RefineOptions {
        descent: if a.plain_gradient {
            Descent::Gradient
        } else {
            Descent::GaussNewton
        },
        max_outer: a.max_outer,
        max_inner: a.max_inner,
        stride: a.stride,
        parallelism: par,
        ..RefineOptions::default()
    };
    let res = refine_poses_scales(&scene, sol.s_g, &opts)?;
    write_json_atomic(&a.out, &res)?;
    log.info(format!(
        "reference frame {}, {} pairs, energy {:.3e} -> {:.3e} over {} iterations",
        res.reference_index,
        res.pair_count,
        res.energy_trace.first().copied().unwrap_or(f64::NAN),
        res.final_energy(),
        res.energy_trace.len()
    ));
    Ok(())
}

fn extract(a: &crate::ExtractArgs, log: &Log) -> Res {
    let scene = load_scene(&a.manifest)?;
    let refined: RefinementResult = read_json(&a.refined)?;
    let traj = extract_trajectory(&scene, &refined)?;
    let (contact, goal) = extract_contact_goal(&scene, &refined, a.n_contact, a.n_goal, a.voxel)?;
    let sample = AffordanceSample {
        instruction: a.instruction.clone(),
        contact,
        goal,
        trajectory: traj.waypoints,
    };
    write_json_atomic(&a.out, &sample)?;
    if let Some(p) = &a.ply {
        let points: Vec<Vec3> = sample.contact.iter().chain(&sample.goal).copied().collect();
        export_ply(&points, std::slice::from_ref(&sample.trajectory), None, p)?;
    }
    log.info(format!(
        "{} waypoints, {} contact and {} goal points",
        sample.trajectory.len(),
        sample.contact.len(),
        sample.goal.len()
    ));
    Ok(())
}

/// Frame `i`'s camera expressed in the first camera's metric frame: the pose
/// and the factor its metric depth must be multiplied by.
fn first_camera_pose(refined: &RefinementResult, i: usize) -> (Pose, f64) {
    let rel = refined.poses[0].inverse().compose(&refined.poses[i]);
    let s0 = refined.scales[0];
    (
        Pose::new(rel.rotation, rel.translation * s0),
        s0 / refined.scales[i],
    )
}

fn fuse(a: &crate::FuseArgs, par: Parallelism, log: &Log) -> Res {
    let scene = load_scene(&a.manifest)?;
    let refined: Option<RefinementResult> = a.refined.as_deref().map(read_json).transpose()?;
    if let Some(r) = &refined {
        if r.poses.len() != scene.frames.len() || r.scales.len() != scene.frames.len() {
            return Err(Error::DimensionMismatch(format!(
                "refinement has {} poses for {} frames",
                r.poses.len(),
                scene.frames.len()
            ))
            .into());
        }
    }
    let k = *scene.intrinsics();
    let mut vol = TsdfVolume::from_frustum(&k, &Pose::identity(), a.near, a.far, a.voxel, a.truncation)?;
    let frames = match (a.frame.is_empty(), &refined) {
        (false, _) => a.frame.clone(),
        (true, Some(_)) => (0..scene.frames.len()).collect(),
        (true, None) => vec![0],
    };
    for &i in &frames {
        let f = scene
            .frames
            .get(i)
            .ok_or_else(|| Failure::Usage(format!("frame {i} out of range (scene has {})", scene.frames.len())))?;
        let (pose, factor) = match (&refined, i) {
            (Some(r), _) => first_camera_pose(r, i),
            (None, 0) => (Pose::identity(), 1.0),
            (None, _) => return Err(Failure::Usage("frames other than 0 need --refined".into())),
        };
        let data = f
            .depth
            .data
            .iter()
            .zip(&f.hand_mask.data)
            .map(|(&d, &hand)| if hand { f64::NAN } else { d * factor })
            .collect();
        let depth = DepthMap::new(k.width, k.height, data)?;
        vol.fuse_frame(&depth, &k, &pose, par)?;
        log.debug(format!("fused frame {i}"));
    }
    vol.save(&a.out)?;
    log.info(format!(
        "volume {:?} voxels of {} m, truncation {} m",
        vol.dims, vol.voxel_size, vol.truncation
    ));
    Ok(())
}

/// Sorted `*.json` files of a directory.
fn json_files(dir: &Path) -> std::result::Result<Vec<PathBuf>, Failure> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()).into());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(Error::from)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

fn conditioning_of(sample: &AffordanceSample) -> std::result::Result<Vec<f64>, Failure> {
    let goal = centroid(&sample.goal).ok_or(Error::EmptyGoals)?;
    let contact = centroid(&sample.contact)
        .ok_or_else(|| Error::InvalidConfig("sample has no contact points".into()))?;
    Ok(encode_conditioning(&goal, &contact, &[]))
}

fn train(a: &crate::TrainArgs, seed: u64, par: Parallelism, log: &Log) -> Res {
    let mut data = Vec::new();
    for p in json_files(&a.data)? {
        let s: AffordanceSample = read_json(&p)?;
        let traj = Trajectory::new(s.trajectory.clone())?.resample(a.horizon)?;
        data.push(TrainingExample {
            trajectory: traj.waypoints,
            conditioning: conditioning_of(&s)?,
        });
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    let volume = a.volume.as_deref().map(TsdfVolume::load).transpose()?;
    let cond_dim = data[0].conditioning.len();
    let mut net = MlpDenoiser::new(a.horizon, cond_dim, &a.widths, seed);
    let opts = TrainOptions {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed,
        parallelism: par,
        ..TrainOptions::default()
    };
    let report = denoiser::mlp_train(&mut net, &data, &DiffusionSchedule::default(), volume.as_ref(), &opts)?;
    net.save(&a.out)?;
    if let Some(p) = &a.report {
        write_json_atomic(p, &report)?;
    }
    let (head, tail) = report.head_tail_medians(0.1);
    log.info(format!(
        "{} examples, {} updates, loss median {:.4e} -> {:.4e}",
        data.len(),
        report.loss_curve.len(),
        head,
        tail
    ));
    Ok(())
}

fn generate(a: &crate::GenerateArgs, seed: u64, par: Parallelism, log: &Log) -> Res {
    let sample: AffordanceSample = read_json(&a.sample)?;
    let volume = a.volume.as_deref().map(TsdfVolume::load).transpose()?;
    let contact = centroid(&sample.contact)
        .ok_or_else(|| Error::InvalidConfig("sample has no contact points".into()))?;
    if sample.goal.is_empty() {
        return Err(Error::EmptyGoals.into());
    }

    let model: Box<dyn Denoiser> = match &a.model {
        Some(p) => Box::new(MlpDenoiser::load(p)?),
        None => {
            let end = *sample
                .trajectory
                .last()
                .ok_or_else(|| Error::InvalidConfig("sample has no trajectory".into()))?;
            Box::new(GmmPrior::straight_line(&contact, &end, a.horizon, a.prior_variance)?)
        }
    };
    let conditioning = if a.model.is_some() {
        conditioning_of(&sample)?
    } else {
        Vec::new()
    };

    // the contact normal orients both the normal term and the gripper standoff
    let normal = match &volume {
        Some(v) => v.mean_normal(&sample.contact).ok(),
        None => None,
    };
    if normal.is_none() && a.lambda_n != 0.0 {
        return Err(Error::InvalidConfig("normal guidance needs a volume with a surface at the contact".into()).into());
    }
    let normal = normal.unwrap_or_else(Vec3::z);
    let agent = gripper_points(
        &(contact + normal * a.gripper_standoff),
        &GripperShape::default(),
        a.agent_points,
    );
    let score = GuidanceConfig {
        lambda_g: a.lambda_g,
        lambda_c: if volume.is_some() { a.lambda_c } else { 0.0 },
        lambda_n: a.lambda_n,
        goals: &sample.goal,
        agent_points: &agent,
        normal,
        volume: volume.as_ref(),
    };
    if volume.is_none() && a.lambda_c != 0.0 {
        log.info("no volume: collision term disabled");
    }
    let cfg = if a.no_guidance {
        GuidanceConfig::none()
    } else {
        score
    };
    let opts = SamplerOptions {
        horizon: a.horizon,
        mode: match a.mode {
            ModeArg::Direct => GuideMode::Direct,
            ModeArg::ThroughDenoiser => GuideMode::ThroughDenoiser,
        },
        g_steps: a.g_steps,
        parallelism: par,
        ..SamplerOptions::default()
    };
    let batch = guided_sample(
        model.as_ref(),
        &conditioning,
        &cfg,
        Some(&score),
        &DiffusionSchedule::default(),
        a.n,
        seed,
        &opts,
    )?;
    let costs: Vec<TermCosts> = batch.costs.iter().map(term_costs).collect();
    let file = BatchFile {
        guided: !a.no_guidance,
        lambda_g: score.lambda_g,
        lambda_c: score.lambda_c,
        lambda_n: score.lambda_n,
        seed,
        goals: sample.goal.clone(),
        trajectories: batch.trajectories,
        costs,
        seeds: batch.seeds,
    };
    write_json_atomic(&a.out, &file)?;
    if let Some(p) = &a.ply {
        let totals: Vec<f64> = file.costs.iter().map(|c| c.total).collect();
        export_ply(&sample.goal, &file.trajectories, Some(&totals), p)?;
    }
    log.info(format!(
        "{} trajectories ({}), mean total cost {:.4e}",
        file.trajectories.len(),
        if file.guided { "guided" } else { "unguided" },
        file.costs.iter().map(|c| c.total).sum::<f64>() / file.costs.len().max(1) as f64
    ));
    Ok(())
}

fn term_costs(c: &CostReport) -> TermCosts {
    TermCosts {
        total: c.total,
        goal: c.goal,
        collide: c.collide,
        normal: c.normal,
    }
}

fn rank(a: &crate::RankArgs) -> Res {
    let file: BatchFile = read_json(&a.batch)?;
    if file.costs.len() != file.trajectories.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} costs for {} trajectories",
            file.costs.len(),
            file.trajectories.len()
        ))
        .into());
    }
    let batch = SampleBatch {
        trajectories: Vec::new(),
        costs: file
            .costs
            .iter()
            .map(|c| CostReport {
                total: c.total,
                goal: c.goal,
                collide: c.collide,
                normal: c.normal,
                gradient: Vec::new(),
            })
            .collect(),
        seeds: Vec::new(),
    };
    let order = rank_by_cost(&batch)?;
    println!("rank\tindex\ttotal\tgoal\tcollide\tnormal");
    for (r, &i) in order.iter().enumerate() {
        let c = file.costs[i];
        println!(
            "{r}\t{i}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}",
            c.total, c.goal, c.collide, c.normal
        );
    }
    if let Some(p) = &a.out {
        let costs = order.iter().map(|&i| file.costs[i]).collect();
        write_json_atomic(p, &RankFile { order: order.clone(), costs })?;
    }
    if let Some(p) = &a.ply {
        let points = match &a.sample {
            Some(s) => {
                let s: AffordanceSample = read_json(s)?;
                s.contact.into_iter().chain(s.goal).collect()
            }
            None => Vec::new(),
        };
        let totals: Vec<f64> = file.costs.iter().map(|c| c.total).collect();
        export_ply(&points, &file.trajectories, Some(&totals), p)?;
    }
    Ok(())
}

fn grad(a: &crate::GradcheckArgs, seed: u64, log: &Log) -> Res {
    let names: Vec<&str> = a
        .targets
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        return Err(Failure::Usage("--targets needs at least one target".into()));
    }
    let targets = names
        .iter()
        .map(|s| s.parse::<Target>())
        .collect::<affordkit::Result<Vec<_>>>()?;
    let inject_fault = a.inject_fault.as_deref().map(str::parse::<Target>).transpose()?;
    let opts = GradcheckOptions {
        seed,
        points: a.points,
        inject_fault,
        ..GradcheckOptions::default()
    };
    let reports = gradcheck(&targets, &opts)?;
    for r in &reports {
        println!(
            "{:<10} {:>4} points  worst rel err {:.3e}  {}",
            r.target.name(),
            r.points,
            r.worst_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(p) = &a.out {
        write_json_atomic(p, &reports)?;
    }
    if all_passed(&reports) {
        log.debug("all gradients agree");
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check failed (tolerance {:e})",
            opts.tolerance
        )))
    }
}
