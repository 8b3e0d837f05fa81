//! ASCII PLY export of points and trajectory polylines for inspection.
//! Trajectories can carry a cost; vertices are then shaded gray by cost
//! rank, darker for lower cost.

use std::fmt::Write as _;
use std::path::Path;

use crate::{io, Error, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlyVertex {
    pub position: Vec3,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlyMesh {
    pub vertices: Vec<PlyVertex>,
    pub edges: Vec<(usize, usize)>,
}

const POINT_COLOR: [u8; 3] = [220, 60, 40];
const TRAJ_COLOR: [u8; 3] = [40, 110, 220];

/// Gray levels by ascending cost rank: the cheapest is 0, the most expensive
/// 200 (kept off white so it stays visible on light backgrounds).
pub fn rank_shades(costs: &[f64]) -> Vec<u8> {
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]));
    let mut out = vec![0u8; costs.len()];
    let denom = costs.len().saturating_sub(1).max(1) as f64;
    for (rank, &i) in order.iter().enumerate() {
        out[i] = (200.0 * rank as f64 / denom).round() as u8;
    }
    out
}

/// Builds the vertex/edge lists: `points` first, then each trajectory's
/// waypoints joined by consecutive edges.
pub fn build_mesh(
    points: &[Vec3],
    trajectories: &[Vec<Vec3>],
    costs: Option<&[f64]>,
) -> Result<PlyMesh> {
    if points.is_empty() && trajectories.iter().all(|t| t.is_empty()) {
        return Err(Error::InvalidConfig("nothing to export".into()));
    }
    if let Some(c) = costs {
        if c.len() != trajectories.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} costs for {} trajectories",
                c.len(),
                trajectories.len()
            )));
        }
    }
    let shades = costs.map(rank_shades);
    let mut mesh = PlyMesh::default();
    for p in points {
        mesh.vertices.push(PlyVertex {
            position: *p,
            color: POINT_COLOR,
        });
    }
    for (t, traj) in trajectories.iter().enumerate() {
        let color = shades.as_ref().map_or(TRAJ_COLOR, |s| [s[t]; 3]);
        let base = mesh.vertices.len();
        for w in traj {
            mesh.vertices.push(PlyVertex {
                position: *w,
                color,
            });
        }
        for i in 1..traj.len() {
            mesh.edges.push((base + i - 1, base + i));
        }
    }
    Ok(mesh)
}

pub fn to_ascii(mesh: &PlyMesh) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\ncomment affordkit export\n");
    let _ = writeln!(s, "element vertex {}", mesh.vertices.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    let _ = writeln!(s, "element edge {}", mesh.edges.len());
    s.push_str("property int vertex1\nproperty int vertex2\nend_header\n");
    for v in &mesh.vertices {
        let p = v.position.map(|c| c as f32);
        let _ = writeln!(
            s,
            "{:?} {:?} {:?} {} {} {}",
            p.x, p.y, p.z, v.color[0], v.color[1], v.color[2]
        );
    }
    for (a, b) in &mesh.edges {
        let _ = writeln!(s, "{a} {b}");
    }
    s
}

pub fn export_ply(
    points: &[Vec3],
    trajectories: &[Vec<Vec3>],
    costs: Option<&[f64]>,
    path: &Path,
) -> Result<()> {
    let mesh = build_mesh(points, trajectories, costs)?;
    io::write_atomic(path, to_ascii(&mesh).as_bytes())
}

/// Parses the subset of ASCII PLY written by [`to_ascii`].
pub fn parse_ascii(text: &str) -> Result<PlyMesh> {
    let bad = |m: &str| Error::InvalidConfig(format!("malformed PLY: {m}"));
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing magic"));
    }
    let (mut nv, mut ne) = (0usize, 0usize);
    for line in lines.by_ref() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["end_header"] => break,
            ["element", "vertex", n] => nv = n.parse().map_err(|_| bad("vertex count"))?,
            ["element", "edge", n] => ne = n.parse().map_err(|_| bad("edge count"))?,
            ["format", fmt, _] if *fmt != "ascii" => return Err(bad("not ascii")),
            _ => {}
        }
    }
    let mut mesh = PlyMesh::default();
    for _ in 0..nv {
        let f: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("truncated vertices"))?
            .split_whitespace()
            .collect();
        if f.len() != 6 {
            return Err(bad("vertex arity"));
        }
        let c = |i: usize| f[i].parse::<f64>().map_err(|_| bad("coordinate"));
        let u = |i: usize| f[i].parse::<u8>().map_err(|_| bad("color"));
        mesh.vertices.push(PlyVertex {
            position: Vec3::new(c(0)?, c(1)?, c(2)?),
            color: [u(3)?, u(4)?, u(5)?],
        });
    }
    for _ in 0..ne {
        let f: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad("truncated edges"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("edge index")))
            .collect::<Result<_>>()?;
        if f.len() != 2 || f[0] >= nv || f[1] >= nv {
            return Err(bad("edge"));
        }
        mesh.edges.push((f[0], f[1]));
    }
    Ok(mesh)
}
