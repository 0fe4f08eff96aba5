//! Marching-cubes extraction over sparse TSDF lattices and mesh serialisation.
//!
//! Cells are polygonised face by face: on every cube face the inside corners
//! (value below the iso level) are walked counter-clockwise about the outward
//! normal and each inside run contributes one segment from the crossing where
//! the walk enters it to the crossing where it leaves. Faces with two diagonal
//! inside corners are resolved with the bilinear saddle value, so neighbouring
//! cells always agree. Segments chain into closed loops that are fanned into
//! triangles whose normals point toward positive values.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Corner offsets, `x` fastest.
pub const CORNERS: [[i32; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

pub const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Corner cycles, counter-clockwise about each face's outward normal.
const FACES: [[usize; 4]; 6] = [
    [0, 4, 7, 3],
    [1, 2, 6, 5],
    [0, 1, 5, 4],
    [3, 7, 6, 2],
    [0, 3, 2, 1],
    [4, 5, 6, 7],
];

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|&[p, q]| (p == a && q == b) || (p == b && q == a))
        .expect("face corners are adjacent")
}

/// Triangles of one cell as edge-index triples.
pub fn polygonize_cell(values: &[f64; 8], iso: f64, out: &mut Vec<[usize; 3]>) {
    let inside = values.map(|v| v < iso);
    let mut next = [usize::MAX; 12];
    let mut any = false;
    for face in FACES {
        let n_in = face.iter().filter(|&&c| inside[c]).count();
        if n_in == 0 || n_in == 4 {
            continue;
        }
        // crossings in cycle order: (edge, entering)
        let mut crossings = [(0usize, false); 4];
        let mut n = 0;
        for i in 0..4 {
            let (a, b) = (face[i], face[(i + 1) % 4]);
            if inside[a] != inside[b] {
                crossings[n] = (edge_between(a, b), inside[b]);
                n += 1;
            }
        }
        any = true;
        if n == 2 {
            let (enter, exit) = if crossings[0].1 {
                (crossings[0].0, crossings[1].0)
            } else {
                (crossings[1].0, crossings[0].0)
            };
            next[enter] = exit;
        } else {
            let [a, b, c, d] = face.map(|k| values[k] - iso);
            let saddle = (a * c - b * d) / (a + c - b - d);
            let connected = saddle < 0.0;
            for i in 0..4 {
                if crossings[i].1 {
                    let j = if connected { (i + 3) % 4 } else { (i + 1) % 4 };
                    next[crossings[i].0] = crossings[j].0;
                }
            }
        }
    }
    if !any {
        return;
    }
    let mut used = [false; 12];
    for start in 0..12 {
        if next[start] == usize::MAX || used[start] {
            continue;
        }
        let mut loop_edges = Vec::with_capacity(12);
        let mut e = start;
        while !used[e] {
            used[e] = true;
            loop_edges.push(e);
            e = next[e];
        }
        for i in 1..loop_edges.len().saturating_sub(1) {
            out.push([loop_edges[0], loop_edges[i], loop_edges[i + 1]]);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f32; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        if self.triangles.iter().flatten().any(|&i| i >= n) {
            return Err(Error::InvalidInput("triangle index out of range".into()));
        }
        if self.vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite vertex".into()));
        }
        Ok(())
    }

    fn undirected_edges(&self) -> HashMap<(u32, u32), usize> {
        let mut edges = HashMap::new();
        for t in &self.triangles {
            for i in 0..3 {
                let (a, b) = (t[i], t[(i + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        edges
    }

    /// `V - E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let used: BTreeSet<u32> = self.triangles.iter().flatten().copied().collect();
        used.len() as i64 - self.undirected_edges().len() as i64 + self.triangles.len() as i64
    }

    /// Every edge is shared by exactly two triangles that traverse it in opposite directions.
    pub fn is_closed_oriented(&self) -> bool {
        let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &self.triangles {
            for i in 0..3 {
                *directed.entry((t[i], t[(i + 1) % 3])).or_insert(0) += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    pub fn triangle_normal(&self, t: usize) -> [f64; 3] {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize].map(|x| x as f64));
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ]
    }
}

/// How cells touching voxels missing from the sparse volume are handled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbsentPolicy {
    /// Missing voxels read as `+1` (empty space).
    Empty,
    /// Cells with any missing corner produce no triangles.
    Skip,
}

pub const WELD_TOLERANCE: f64 = 1e-7;

/// Sparse TSDF lattice: world lattice coordinate to value, centres at `(c + 0.5) * voxel_size`.
pub trait TsdfLookup: Sync {
    fn value(&self, coord: &[i32; 3]) -> Option<f32>;
}

impl TsdfLookup for HashMap<[i32; 3], f32> {
    fn value(&self, coord: &[i32; 3]) -> Option<f32> {
        self.get(coord).copied()
    }
}

impl TsdfLookup for crate::global_fusion::GlobalLevel {
    fn value(&self, coord: &[i32; 3]) -> Option<f32> {
        self.tsdf(coord)
    }
}

pub fn marching_cubes(
    volume: &impl TsdfLookup,
    coords: &[[i32; 3]],
    voxel_size: f64,
    iso: f64,
    policy: AbsentPolicy,
) -> TriangleMesh {
    let mut cells: Vec<[i32; 3]> = coords
        .iter()
        .flat_map(|c| CORNERS.iter().map(move |o| [c[0] - o[0], c[1] - o[1], c[2] - o[2]]))
        .collect();
    cells.sort_unstable_by_key(|c| [c[2], c[1], c[0]]);
    cells.dedup();

    type EdgeKey = ([i32; 3], u8);
    type CellTris = Vec<[(EdgeKey, [f64; 3]); 3]>;
    let per_cell: Vec<CellTris> = cells
        .par_iter()
        .map(|cell| {
            let mut values = [0.0f64; 8];
            for (k, o) in CORNERS.iter().enumerate() {
                let c = [cell[0] + o[0], cell[1] + o[1], cell[2] + o[2]];
                match (volume.value(&c), policy) {
                    (Some(v), _) => values[k] = v as f64,
                    (None, AbsentPolicy::Empty) => values[k] = 1.0,
                    (None, AbsentPolicy::Skip) => return Vec::new(),
                }
            }
            let mut tris = Vec::new();
            polygonize_cell(&values, iso, &mut tris);
            let vertex = |e: usize| -> (EdgeKey, [f64; 3]) {
                let [a, b] = EDGES[e];
                let (lo, hi) = if CORNERS[a] <= CORNERS[b] { (a, b) } else { (b, a) };
                let axis = (0..3).find(|&i| CORNERS[lo][i] != CORNERS[hi][i]).unwrap();
                let base = [0, 1, 2].map(|i| cell[i] + CORNERS[lo][i]);
                let t = (iso - values[lo]) / (values[hi] - values[lo]);
                let mut p = base.map(|x| (x as f64 + 0.5) * voxel_size);
                p[axis] += t * voxel_size;
                ((base, axis as u8), p)
            };
            tris.into_iter().map(|t| t.map(vertex)).collect()
        })
        .collect();

    let mut by_edge: HashMap<EdgeKey, u32> = HashMap::new();
    let mut weld: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut triangles = Vec::new();
    let cell_key = |p: &[f64; 3]| p.map(|x| (x / WELD_TOLERANCE).floor() as i64);
    for tri in per_cell.into_iter().flatten() {
        let ids = tri.map(|(key, p)| {
            *by_edge.entry(key).or_insert_with(|| {
                let k = cell_key(&p);
                for dz in -1..=1 {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            if let Some(list) = weld.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                                for &i in list {
                                    let q = vertices[i as usize];
                                    let d2: f64 = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum();
                                    if d2 <= WELD_TOLERANCE * WELD_TOLERANCE {
                                        return i;
                                    }
                                }
                            }
                        }
                    }
                }
                let id = vertices.len() as u32;
                vertices.push(p);
                weld.entry(k).or_default().push(id);
                id
            })
        });
        if ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2] {
            triangles.push(ids);
        }
    }
    TriangleMesh {
        vertices: vertices.into_iter().map(|p| p.map(|x| x as f32)).collect(),
        triangles,
    }
}

fn ply_header(vertices: usize, faces: usize) -> String {
    let mut h = String::new();
    let _ = write!(
        h,
        "ply\nformat binary_little_endian 1.0\nelement vertex {vertices}\nproperty float x\nproperty float y\nproperty float z\nelement face {faces}\nproperty list uchar int vertex_indices\nend_header\n"
    );
    h
}

pub fn ply_bytes(mesh: &TriangleMesh) -> Vec<u8> {
    let mut buf = ply_header(mesh.vertices.len(), mesh.triangles.len()).into_bytes();
    buf.reserve(mesh.vertices.len() * 12 + mesh.triangles.len() * 13);
    for v in &mesh.vertices {
        v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    }
    for t in &mesh.triangles {
        buf.push(3);
        t.iter().for_each(|&i| buf.extend_from_slice(&(i as i32).to_le_bytes()));
    }
    buf
}

pub fn export_ply(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    std::fs::write(path, ply_bytes(mesh)).map_err(|e| Error::io(path, e))
}

/// Parses the binary PLY layout written by [`export_ply`].
pub fn parse_ply(bytes: &[u8]) -> Result<TriangleMesh> {
    let bad = |m: String| Error::format("PLY", m);
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("missing end_header".into()))?
        + marker.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|e| bad(e.to_string()))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing ply magic".into()));
    }
    let mut nv = None;
    let mut nf = None;
    let mut props = Vec::new();
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => return Err(bad(format!("unsupported format {other}"))),
            ["element", "vertex", n] => nv = Some(n.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            ["element", "face", n] => nf = Some(n.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            ["property", "float", name] => props.push(*name),
            ["property", "list", "uchar", "int", _] => {}
            ["comment", ..] | ["end_header"] | [] => {}
            _ => return Err(bad(format!("unsupported header line `{line}`"))),
        }
    }
    if props != ["x", "y", "z"] {
        return Err(bad("expected float x, y, z vertex properties".into()));
    }
    let (nv, nf) = (nv.unwrap_or(0), nf.unwrap_or(0));
    let body = &bytes[end..];
    if body.len() < nv * 12 {
        return Err(bad("truncated vertex block".into()));
    }
    let f = |o: usize| f32::from_le_bytes(body[o..o + 4].try_into().unwrap());
    let vertices: Vec<[f32; 3]> = (0..nv).map(|i| [f(12 * i), f(12 * i + 4), f(12 * i + 8)]).collect();
    let mut pos = nv * 12;
    let mut triangles = Vec::with_capacity(nf);
    for _ in 0..nf {
        if body.get(pos) != Some(&3) || body.len() < pos + 13 {
            return Err(bad("faces must be triangles".into()));
        }
        let idx = |k: usize| i32::from_le_bytes(body[pos + 1 + 4 * k..pos + 5 + 4 * k].try_into().unwrap());
        let t = [idx(0), idx(1), idx(2)];
        if t.iter().any(|&i| i < 0 || i as usize >= nv) {
            return Err(bad("face index out of range".into()));
        }
        triangles.push(t.map(|i| i as u32));
        pos += 13;
    }
    Ok(TriangleMesh { vertices, triangles })
}

pub fn read_ply(path: &Path) -> Result<TriangleMesh> {
    parse_ply(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn export_obj(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    for v in &mesh.vertices {
        writeln!(f, "v {} {} {}", v[0], v[1], v[2]).map_err(io)?;
    }
    for t in &mesh.triangles {
        writeln!(f, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).map_err(io)?;
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_volume(radius: f64, vs: f64, center: [f64; 3], band: bool) -> (HashMap<[i32; 3], f32>, Vec<[i32; 3]>) {
        let lambda = 3.0 * vs;
        let n = ((radius + 2.0 * lambda) / vs).ceil() as i32 + 1;
        let mut map = HashMap::new();
        let mut coords = Vec::new();
        for z in -n..n {
            for y in -n..n {
                for x in -n..n {
                    let c = [x, y, z];
                    let p = c.map(|i| (i as f64 + 0.5) * vs);
                    let d = ((0..3).map(|a| (p[a] - center[a]).powi(2)).sum::<f64>()).sqrt() - radius;
                    if !band || d.abs() < lambda {
                        map.insert(c, (d / lambda).clamp(-1.0, 1.0) as f32);
                        coords.push(c);
                    }
                }
            }
        }
        (map, coords)
    }

    #[test]
    fn single_corner_case() {
        let mut values = [1.0; 8];
        values[0] = -1.0;
        let mut tris = Vec::new();
        polygonize_cell(&values, 0.0, &mut tris);
        assert_eq!(tris, vec![[0, 3, 8]]);
        let map: HashMap<[i32; 3], f32> = CORNERS
            .iter()
            .enumerate()
            .map(|(k, c)| (*c, values[k] as f32))
            .collect();
        let mesh = marching_cubes(&map, &CORNERS, 1.0, 0.0, AbsentPolicy::Empty);
        // the lone cell among all candidates that straddles corner 0
        assert!(!mesh.triangles.is_empty());
        let mesh = marching_cubes(&map, &CORNERS, 1.0, 0.0, AbsentPolicy::Skip);
        assert_eq!(mesh.triangles.len(), 1);
        let n = mesh.triangle_normal(0);
        assert!(n[0] > 0.0 && (n[0] - n[1]).abs() < 1e-6 && (n[0] - n[2]).abs() < 1e-6);
    }

    #[test]
    fn all_positive_is_empty() {
        let map: HashMap<[i32; 3], f32> = CORNERS.iter().map(|c| (*c, 0.5)).collect();
        assert!(marching_cubes(&map, &CORNERS, 0.1, 0.0, AbsentPolicy::Empty).is_empty());
        assert!(marching_cubes(&HashMap::new(), &[], 0.1, 0.0, AbsentPolicy::Empty).is_empty());
    }

    #[test]
    fn sphere_is_closed_and_accurate() {
        let center = [0.013, -0.021, 0.007];
        let (map, coords) = sphere_volume(0.5, 0.04, center, false);
        let mesh = marching_cubes(&map, &coords, 0.04, 0.0, AbsentPolicy::Empty);
        mesh.validate().unwrap();
        assert!(mesh.is_closed_oriented());
        assert_eq!(mesh.euler_characteristic(), 2);
        for v in &mesh.vertices {
            let r = ((0..3).map(|a| (v[a] as f64 - center[a]).powi(2)).sum::<f64>()).sqrt();
            assert!((r - 0.5).abs() < 0.02, "{r}");
        }
        for t in 0..mesh.triangles.len() {
            let n = mesh.triangle_normal(t);
            let a = mesh.vertices[mesh.triangles[t][0] as usize];
            let out: f64 = (0..3).map(|k| n[k] * (a[k] as f64 - center[k])).sum();
            assert!(out > 0.0);
        }
        // a narrow band reads as hollow under the +1 rule; skipping its border cells recovers the dense result
        let (band, band_coords) = sphere_volume(0.5, 0.04, center, true);
        assert_eq!(
            marching_cubes(&band, &band_coords, 0.04, 0.0, AbsentPolicy::Empty).euler_characteristic(),
            4
        );
        assert_eq!(marching_cubes(&band, &band_coords, 0.04, 0.0, AbsentPolicy::Skip), mesh);
    }

    #[test]
    fn negation_flips_orientation() {
        let (map, coords) = sphere_volume(0.3, 0.05, [0.01, 0.02, 0.03], true);
        let neg: HashMap<[i32; 3], f32> = map.iter().map(|(k, v)| (*k, -v)).collect();
        let a = marching_cubes(&map, &coords, 0.05, 0.0, AbsentPolicy::Skip);
        let b = marching_cubes(&neg, &coords, 0.05, 0.0, AbsentPolicy::Skip);
        let canon = |m: &TriangleMesh, flip: bool| {
            let mut v: Vec<[[u32; 3]; 3]> = m
                .triangles
                .iter()
                .map(|t| {
                    let t = if flip { [t[0], t[2], t[1]] } else { *t };
                    let p = t.map(|i| m.vertices[i as usize].map(f32::to_bits));
                    let r = (0..3).min_by_key(|&i| p[i]).unwrap();
                    [p[r], p[(r + 1) % 3], p[(r + 2) % 3]]
                })
                .collect();
            v.sort();
            v
        };
        assert!(!a.is_empty());
        assert_eq!(canon(&a, false), canon(&b, true));
    }

    #[test]
    fn ply_layout_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ply");
        let tri = TriangleMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.1]],
            triangles: vec![[0, 1, 2]],
        };
        export_ply(&tri, &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(len, ply_header(3, 1).len() + 3 * 12 + 13);
        assert_eq!(read_ply(&path).unwrap(), tri);
        let empty = TriangleMesh::default();
        export_ply(&empty, &path).unwrap();
        assert_eq!(read_ply(&path).unwrap(), empty);
        assert!(parse_ply(b"ply\nformat ascii 1.0\nend_header\n").is_err());
    }
}
