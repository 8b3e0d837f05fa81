//! Scene bundles: per-frame depth, hand/object masks and SfM poses, plus the
//! sparse landmarks. Loaded from a JSON manifest or produced by [`synth`].

pub mod synth;

use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::io::{
    f32_le_bytes, parse_f32_le, parse_pgm, pgm_bytes, read_file, read_json, write_atomic,
    write_json_atomic,
};
use crate::{Error, Intrinsics, Pose, Result, Vec3};

pub use synth::{synth_scene, GroundTruth, HandMotion, SynthConfig};

/// Dense metric depth, row-major. `NaN` marks invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "depth has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(DepthMap {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Depth at the nearest pixel, `None` when out of bounds or invalid.
    pub fn nearest(&self, u: f64, v: f64) -> Option<f64> {
        let x = u.round();
        let y = v.round();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        valid_depth(self.at(x as usize, y as usize))
    }

    /// Depth at a continuous pixel, interpolating inverse depth bilinearly
    /// over the four surrounding pixel centers (exact on planar surfaces).
    /// `None` unless all four neighbors hold valid depth.
    pub fn sample(&self, u: f64, v: f64) -> Option<f64> {
        let (x0, y0, ax, ay) = bilinear_cell(u, v, self.width, self.height)?;
        if ax == 0.0 && ay == 0.0 {
            return valid_depth(self.at(x0, y0));
        }
        let d00 = valid_depth(self.at(x0, y0))?;
        let d10 = valid_depth(self.at(x0 + 1, y0))?;
        let d01 = valid_depth(self.at(x0, y0 + 1))?;
        let d11 = valid_depth(self.at(x0 + 1, y0 + 1))?;
        let inv = (1.0 - ay) * ((1.0 - ax) / d00 + ax / d10) + ay * ((1.0 - ax) / d01 + ax / d11);
        Some(1.0 / inv)
    }

    /// Inverse-depth bilinear sample and its pixel gradient `(d, dd/du, dd/dv)`.
    /// The gradient is that of the cell containing `(u, v)`.
    pub fn sample_with_gradient(&self, u: f64, v: f64) -> Option<(f64, f64, f64)> {
        let (x0, y0, ax, ay) = bilinear_cell(u, v, self.width, self.height)?;
        let i00 = 1.0 / valid_depth(self.at(x0, y0))?;
        let i10 = 1.0 / valid_depth(self.at(x0 + 1, y0))?;
        let i01 = 1.0 / valid_depth(self.at(x0, y0 + 1))?;
        let i11 = 1.0 / valid_depth(self.at(x0 + 1, y0 + 1))?;
        let inv = (1.0 - ay) * ((1.0 - ax) * i00 + ax * i10) + ay * ((1.0 - ax) * i01 + ax * i11);
        let di_du = (1.0 - ay) * (i10 - i00) + ay * (i11 - i01);
        let di_dv = (1.0 - ax) * (i01 - i00) + ax * (i11 - i10);
        let d = 1.0 / inv;
        Some((d, -d * d * di_du, -d * d * di_dv))
    }
}

#[inline]
fn valid_depth(d: f64) -> Option<f64> {
    (d.is_finite() && d > 0.0).then_some(d)
}

/// Top-left support pixel and fractional offsets of a continuous pixel.
#[inline]
pub(crate) fn bilinear_cell(
    u: f64,
    v: f64,
    w: usize,
    h: usize,
) -> Option<(usize, usize, f64, f64)> {
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) || w < 2 || h < 2 {
        return None;
    }
    let x0 = (u.floor() as usize).min(w - 2);
    let y0 = (v.floor() as usize).min(h - 2);
    Some((x0, y0, u - x0 as f64, v - y0 as f64))
}

/// Binary mask, row-major, `true` = masked.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    /// `true` if every pixel of the bilinear support of `(u, v)` is set.
    pub fn support_all(&self, u: f64, v: f64) -> bool {
        match bilinear_cell(u, v, self.width, self.height) {
            Some((x0, y0, ax, ay)) => {
                let x1 = if ax > 0.0 { x0 + 1 } else { x0 };
                let y1 = if ay > 0.0 { y0 + 1 } else { y0 };
                self.at(x0, y0) && self.at(x1, y0) && self.at(x0, y1) && self.at(x1, y1)
            }
            None => false,
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&m| if m { 255 } else { 0 }).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub index: usize,
    pub depth: DepthMap,
    pub hand_mask: Mask,
    pub object_mask: Mask,
    pub pose_init: Pose,
    pub intrinsics: Intrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame: usize,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub id: u64,
    /// World frame, scale-unaware SfM units.
    pub position: Vec3,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub frames: Vec<FrameObservation>,
    pub landmarks: Vec<Landmark>,
    /// Complement of hand ∪ object, per frame.
    pub static_masks: Vec<Mask>,
}

impl SceneBundle {
    /// Build a bundle, validating dimensions and landmark observations and
    /// deriving the static masks.
    pub fn new(frames: Vec<FrameObservation>, landmarks: Vec<Landmark>) -> Result<Self> {
        for f in &frames {
            f.intrinsics.validate()?;
            let (w, h) = (f.intrinsics.width, f.intrinsics.height);
            for (what, fw, fh) in [
                ("depth", f.depth.width, f.depth.height),
                ("hand mask", f.hand_mask.width, f.hand_mask.height),
                ("object mask", f.object_mask.width, f.object_mask.height),
            ] {
                if fw != w || fh != h {
                    return Err(Error::DimensionMismatch(format!(
                        "frame {}: {what} is {fw}x{fh}, intrinsics are {w}x{h}",
                        f.index
                    )));
                }
            }
            if f.depth.data.iter().any(|d| *d < 0.0) {
                return Err(Error::DimensionMismatch(format!(
                    "frame {}: negative depth",
                    f.index
                )));
            }
        }
        for l in &landmarks {
            if l.observations.len() < 2 {
                return Err(Error::ManifestParse(format!(
                    "landmark {} has {} observations, need at least 2",
                    l.id,
                    l.observations.len()
                )));
            }
            for o in &l.observations {
                let f = frames.get(o.frame).ok_or_else(|| {
                    Error::ManifestParse(format!(
                        "landmark {} observed in unknown frame {}",
                        l.id, o.frame
                    ))
                })?;
                if !f.intrinsics.contains(o.pixel.x, o.pixel.y) {
                    return Err(Error::BadLandmarkObservation {
                        landmark: l.id,
                        frame: o.frame,
                        u: o.pixel.x,
                        v: o.pixel.y,
                    });
                }
            }
        }
        let static_masks = frames
            .iter()
            .map(|f| Mask {
                width: f.hand_mask.width,
                height: f.hand_mask.height,
                data: f
                    .hand_mask
                    .data
                    .iter()
                    .zip(&f.object_mask.data)
                    .map(|(&h, &o)| !(h || o))
                    .collect(),
            })
            .collect();
        Ok(SceneBundle {
            frames,
            landmarks,
            static_masks,
        })
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.frames[0].intrinsics
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFrame {
    index: usize,
    depth_path: String,
    hand_mask_path: String,
    object_mask_path: String,
    pose_wc: Pose,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    intrinsics: Intrinsics,
    frames: Vec<ManifestFrame>,
    landmarks_path: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LandmarkRecord {
    id: u64,
    xyz: [f64; 3],
    obs: Vec<[f64; 3]>,
}

fn load_mask(path: &Path, w: usize, h: usize) -> Result<Mask> {
    let bytes = read_file(path)?;
    let (mw, mh, px) =
        parse_pgm(&bytes).map_err(|e| Error::ManifestParse(format!("{}: {e}", path.display())))?;
    if (mw, mh) != (w, h) {
        return Err(Error::DimensionMismatch(format!(
            "{}: mask is {mw}x{mh}, expected {w}x{h}",
            path.display()
        )));
    }
    Ok(Mask {
        width: w,
        height: h,
        data: px.into_iter().map(|b| b != 0).collect(),
    })
}

/// Load a bundle from `manifest.json`; referenced paths are relative to the
/// manifest's directory.
pub fn load_scene(manifest_path: &Path) -> Result<SceneBundle> {
    let bytes = read_file(manifest_path)?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::ManifestParse(e.to_string()))?;
    let base = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let k = manifest.intrinsics;
    k.validate()?;
    let (w, h) = (k.width, k.height);

    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (pos, mf) in manifest.frames.iter().enumerate() {
        if mf.index != pos {
            return Err(Error::ManifestParse(format!(
                "frame at position {pos} has index {}; frames must be listed in order",
                mf.index
            )));
        }
        let depth_path = base.join(&mf.depth_path);
        let raw = read_file(&depth_path)?;
        if raw.len() != w * h * 4 {
            return Err(Error::DimensionMismatch(format!(
                "{}: {} bytes, expected {}",
                depth_path.display(),
                raw.len(),
                w * h * 4
            )));
        }
        let depth = DepthMap::new(
            w,
            h,
            parse_f32_le(&raw).into_iter().map(f64::from).collect(),
        )?;
        frames.push(FrameObservation {
            index: mf.index,
            depth,
            hand_mask: load_mask(&base.join(&mf.hand_mask_path), w, h)?,
            object_mask: load_mask(&base.join(&mf.object_mask_path), w, h)?,
            pose_init: mf.pose_wc,
            intrinsics: k,
        });
    }

    let records: Vec<LandmarkRecord> =
        read_json(&base.join(&manifest.landmarks_path)).map_err(|e| match e {
            Error::Json(j) => Error::ManifestParse(format!("landmarks: {j}")),
            other => other,
        })?;
    let landmarks = records
        .into_iter()
        .map(|r| Landmark {
            id: r.id,
            position: Vec3::from(r.xyz),
            observations: r
                .obs
                .into_iter()
                .map(|o| Observation {
                    frame: o[0] as usize,
                    pixel: Vector2::new(o[1], o[2]),
                })
                .collect(),
        })
        .collect();
    SceneBundle::new(frames, landmarks)
}

/// Write a bundle under `dir` and return the manifest path. Depth is stored
/// as float32, so a written-then-loaded bundle carries float32-rounded depth.
pub fn write_scene(bundle: &SceneBundle, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let k = *bundle.intrinsics();
    let mut mframes = Vec::with_capacity(bundle.frames.len());
    for f in &bundle.frames {
        let depth_path = format!("frame_{:03}_depth.f32", f.index);
        let hand_path = format!("frame_{:03}_hand.pgm", f.index);
        let obj_path = format!("frame_{:03}_object.pgm", f.index);
        write_atomic(
            &dir.join(&depth_path),
            &f32_le_bytes(f.depth.data.iter().map(|&d| d as f32)),
        )?;
        write_atomic(
            &dir.join(&hand_path),
            &pgm_bytes(k.width, k.height, &f.hand_mask.to_bytes()),
        )?;
        write_atomic(
            &dir.join(&obj_path),
            &pgm_bytes(k.width, k.height, &f.object_mask.to_bytes()),
        )?;
        mframes.push(ManifestFrame {
            index: f.index,
            depth_path,
            hand_mask_path: hand_path,
            object_mask_path: obj_path,
            pose_wc: f.pose_init,
        });
    }
    let records: Vec<LandmarkRecord> = bundle
        .landmarks
        .iter()
        .map(|l| LandmarkRecord {
            id: l.id,
            xyz: [l.position.x, l.position.y, l.position.z],
            obs: l
                .observations
                .iter()
                .map(|o| [o.frame as f64, o.pixel.x, o.pixel.y])
                .collect(),
        })
        .collect();
    write_json_atomic(&dir.join("landmarks.json"), &records)?;
    let manifest = Manifest {
        intrinsics: k,
        frames: mframes,
        landmarks_path: "landmarks.json".into(),
    };
    let path = dir.join("manifest.json");
    write_json_atomic(&path, &manifest)?;
    Ok(path)
}
