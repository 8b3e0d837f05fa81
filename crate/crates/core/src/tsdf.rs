//! Truncated signed distance volume: projective fusion of depth frames and
//! trilinear queries with analytic gradients.
//!
//! Values are distances divided by the truncation, clamped to [-1, 1],
//! negative behind surfaces. Unobserved voxels hold +1 (free space).
//! Voxel `(i, j, k)` is centered at `origin + voxel_size * (i, j, k)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ingest::DepthMap;
use crate::io::{f32_le_bytes, parse_f32_le, read_file, write_atomic};
use crate::par::{map_range, Parallelism};
use crate::{Error, Intrinsics, Pose, Result, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    pub origin: Vec3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub truncation: f64,
    /// x fastest, then y, then z.
    pub values: Vec<f32>,
    pub weights: Vec<f32>,
}

/// Grid coordinates within 1e-9 of an integer are treated as exact so that
/// voxel centers reproduce their stored value.
#[inline]
fn snap(g: f64) -> f64 {
    let r = g.round();
    if (g - r).abs() < 1e-9 {
        r
    } else {
        g
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    origin: [f64; 3],
    voxel_size: f64,
    dims: [usize; 3],
    truncation: f64,
}

impl TsdfVolume {
    /// Empty (all free, unobserved) volume.
    pub fn new(origin: Vec3, voxel_size: f64, dims: [usize; 3], truncation: f64) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidConfig(format!(
                "volume dims must be >= 2 per axis, got {dims:?}"
            )));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite())
            || !(truncation > 0.0 && truncation.is_finite())
        {
            return Err(Error::InvalidConfig(
                "voxel size and truncation must be positive".into(),
            ));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(TsdfVolume {
            origin,
            voxel_size,
            dims,
            truncation,
            values: vec![1.0; n],
            weights: vec![0.0; n],
        })
    }

    /// Grid covering the view frustum of a camera between `near` and `far`
    /// meters, padded by one truncation distance.
    pub fn from_frustum(
        k: &Intrinsics,
        pose_wc: &Pose,
        near: f64,
        far: f64,
        voxel_size: f64,
        truncation: f64,
    ) -> Result<Self> {
        if !(near > 0.0 && far > near) {
            return Err(Error::InvalidConfig(format!(
                "bad depth range [{near}, {far}]"
            )));
        }
        let (w, h) = ((k.width - 1) as f64, (k.height - 1) as f64);
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &(u, v) in &[(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)] {
            for &d in &[near, far] {
                let p = pose_wc.transform_point(&k.backproject_unchecked(u, v, d));
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
        lo -= Vec3::repeat(truncation);
        hi += Vec3::repeat(truncation);
        let ext = hi - lo;
        let dims = [0, 1, 2].map(|a| (ext[a] / voxel_size).ceil() as usize + 1);
        Self::new(lo, voxel_size, dims, truncation)
    }

    /// Volume filled from a signed distance function (meters), all voxels
    /// marked observed.
    pub fn from_sdf<F>(
        origin: Vec3,
        voxel_size: f64,
        dims: [usize; 3],
        truncation: f64,
        sdf: F,
    ) -> Result<Self>
    where
        F: Fn(&Vec3) -> f64,
    {
        let mut vol = Self::new(origin, voxel_size, dims, truncation)?;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let i = vol.index(x, y, z);
                    let c = vol.center(x, y, z);
                    vol.values[i] = (sdf(&c) / truncation).clamp(-1.0, 1.0) as f32;
                    vol.weights[i] = 1.0;
                }
            }
        }
        Ok(vol)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.origin + Vec3::new(x as f64, y as f64, z as f64) * self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Integrate one depth frame. Invalid (NaN / non-positive) depth pixels
    /// and voxels outside the frustum are left untouched.
    pub fn fuse_frame(
        &mut self,
        depth: &DepthMap,
        k: &Intrinsics,
        pose_wc: &Pose,
        par: Parallelism,
    ) -> Result<()> {
        if depth.width != k.width || depth.height != k.height {
            return Err(Error::DimensionMismatch(format!(
                "depth {}x{} vs intrinsics {}x{}",
                depth.width, depth.height, k.width, k.height
            )));
        }
        let cw = pose_wc.inverse();
        let [nx, ny, nz] = self.dims;
        let slice = nx * ny;
        let this = &*self;
        let updates: Vec<Vec<(f32, f32)>> = map_range(nz, par, |z| {
            let mut out = Vec::with_capacity(slice);
            for y in 0..ny {
                for x in 0..nx {
                    let i = this.index(x, y, z);
                    let (v0, w0) = (this.values[i], this.weights[i]);
                    let p = cw.transform_point(&this.center(x, y, z));
                    let upd = (p.z > 0.0)
                        .then(|| (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
                        .and_then(|(u, v)| depth.nearest(u, v))
                        .filter(|&d| p.z <= d + this.truncation)
                        .map(|d| {
                            let sdf = ((d - p.z) / this.truncation).clamp(-1.0, 1.0);
                            let w = w0 as f64;
                            (((w * v0 as f64 + sdf) / (w + 1.0)) as f32, w0 + 1.0)
                        });
                    out.push(upd.unwrap_or((v0, w0)));
                }
            }
            out
        });
        for (z, slab) in updates.into_iter().enumerate() {
            for (j, (v, w)) in slab.into_iter().enumerate() {
                self.values[z * slice + j] = v;
                self.weights[z * slice + j] = w;
            }
        }
        Ok(())
    }

    /// Cell containing `p`: lower corner index and fractional offsets.
    /// `None` outside the grid.
    #[inline]
    fn cell(&self, p: &Vec3) -> Option<([usize; 3], [f64; 3])> {
        let mut i0 = [0usize; 3];
        let mut f = [0.0; 3];
        for a in 0..3 {
            let g = snap((p[a] - self.origin[a]) / self.voxel_size);
            let max = (self.dims[a] - 1) as f64;
            if !(g >= 0.0 && g <= max) {
                return None;
            }
            let c = (g.floor() as usize).min(self.dims[a] - 2);
            i0[a] = c;
            f[a] = g - c as f64;
        }
        Some((i0, f))
    }

    #[inline]
    fn corners(&self, i0: [usize; 3]) -> [f64; 8] {
        let mut c = [0.0; 8];
        for (n, v) in c.iter_mut().enumerate() {
            let (dx, dy, dz) = (n & 1, (n >> 1) & 1, (n >> 2) & 1);
            *v = self.values[self.index(i0[0] + dx, i0[1] + dy, i0[2] + dz)] as f64;
        }
        c
    }

    /// Trilinear interpolation of the stored values; +1 outside the grid.
    pub fn query(&self, p: &Vec3) -> f64 {
        let Some((i0, [fx, fy, fz])) = self.cell(p) else {
            return 1.0;
        };
        let c = self.corners(i0);
        let mut acc = 0.0;
        for (n, v) in c.iter().enumerate() {
            let wx = if n & 1 == 1 { fx } else { 1.0 - fx };
            let wy = if n & 2 == 2 { fy } else { 1.0 - fy };
            let wz = if n & 4 == 4 { fz } else { 1.0 - fz };
            acc += wx * wy * wz * v;
        }
        acc
    }

    /// Gradient of [`query`](Self::query) per meter; zero outside the grid.
    pub fn query_gradient(&self, p: &Vec3) -> Vec3 {
        self.query_with_gradient(p).1
    }

    pub fn query_with_gradient(&self, p: &Vec3) -> (f64, Vec3) {
        let Some((i0, f)) = self.cell(p) else {
            return (1.0, Vec3::zeros());
        };
        let c = self.corners(i0);
        let mut val = 0.0;
        let mut g = Vec3::zeros();
        for (n, v) in c.iter().enumerate() {
            let bit = [n & 1 == 1, n & 2 == 2, n & 4 == 4];
            let w = [0, 1, 2].map(|a| if bit[a] { f[a] } else { 1.0 - f[a] });
            let dw = bit.map(|b| if b { 1.0 } else { -1.0 });
            val += w[0] * w[1] * w[2] * v;
            g.x += dw[0] * w[1] * w[2] * v;
            g.y += w[0] * dw[1] * w[2] * v;
            g.z += w[0] * w[1] * dw[2] * v;
        }
        (val, g / self.voxel_size)
    }

    /// Unit normal (direction of increasing distance) at `p`.
    pub fn surface_normal_at(&self, p: &Vec3) -> Result<Vec3> {
        let g = self.query_gradient(p);
        let n = g.norm();
        if !(n > 1e-9) {
            return Err(Error::DegenerateNormal);
        }
        Ok(g / n)
    }

    /// Normalized mean of the per-point normals.
    pub fn mean_normal(&self, points: &[Vec3]) -> Result<Vec3> {
        let mut acc = Vec3::zeros();
        for p in points {
            acc += self.surface_normal_at(p)?;
        }
        let n = acc.norm();
        if !(n > 1e-9) {
            return Err(Error::DegenerateNormal);
        }
        Ok(acc / n)
    }

    /// Header line (JSON) followed by little-endian f32 values, then weights.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            origin: [self.origin.x, self.origin.y, self.origin.z],
            voxel_size: self.voxel_size,
            dims: self.dims,
            truncation: self.truncation,
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.extend(f32_le_bytes(self.values.iter().copied()));
        out.extend(f32_le_bytes(self.weights.iter().copied()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::VolumeFormat("missing header line".into()))?;
        let h: Header = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::VolumeFormat(format!("bad header: {e}")))?;
        let mut vol = Self::new(Vec3::from(h.origin), h.voxel_size, h.dims, h.truncation)
            .map_err(|e| Error::VolumeFormat(e.to_string()))?;
        let body = &bytes[nl + 1..];
        let n = vol.len();
        if body.len() != 8 * n {
            return Err(Error::VolumeFormat(format!(
                "expected {} payload bytes, got {}",
                8 * n,
                body.len()
            )));
        }
        vol.values = parse_f32_le(&body[..4 * n]);
        vol.weights = parse_f32_le(&body[4 * n..]);
        if vol.values.iter().any(|v| !(-1.0..=1.0).contains(v))
            || vol.weights.iter().any(|w| !(*w >= 0.0))
        {
            return Err(Error::VolumeFormat(
                "values outside [-1, 1] or negative weights".into(),
            ));
        }
        Ok(vol)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
