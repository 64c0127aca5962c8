//! Two-dimensional triangulations with explicit, outward-oriented boundary edges.
//!
//! Meshes are immutable once built. Every constructor (generator or loader)
//! runs [`MeshGeometry::validate`], so a `MeshGeometry` in hand always has
//! positively oriented triangles and a closed boundary cycle.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest accepted disk refinement level (16·4^10 ≈ 1.7e7 triangles).
pub const MAX_DISK_REFINEMENT: u32 = 10;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("triangle {triangle} is not counter-clockwise (signed area {area:e})")]
    Orientation { triangle: usize, area: f64 },
    #[error("topology check failed: {0}")]
    Topology(String),
    #[error("invalid mesh parameters: {0}")]
    InvalidParameter(String),
    #[error("refinement level {level} exceeds the memory guard ({max})")]
    Resource { level: u32, max: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DomainTag {
    Disk { radius: f64 },
    Rectangle { width: f64, height: f64 },
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshGeometry {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<[usize; 2]>,
    boundary_vertices: Vec<usize>,
    domain: DomainTag,
}

impl MeshGeometry {
    /// Builds a mesh from raw arrays and validates every invariant.
    pub fn new(
        vertices: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        boundary_edges: Vec<[usize; 2]>,
        domain: DomainTag,
    ) -> Result<Self, MeshError> {
        let boundary_vertices: BTreeSet<usize> = boundary_edges.iter().flat_map(|e| e.iter().copied()).collect();
        let mesh = Self {
            vertices,
            triangles,
            boundary_edges,
            boundary_vertices: boundary_vertices.into_iter().collect(),
            domain,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[[usize; 2]] {
        &self.boundary_edges
    }

    /// Sorted indices of the vertices on ∂Ω.
    pub fn boundary_vertices(&self) -> &[usize] {
        &self.boundary_vertices
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        self.boundary_vertices.binary_search(&v).is_ok()
    }

    /// Signed area of triangle `t` (positive for counter-clockwise).
    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        signed_area(self.vertices[a], self.vertices[b], self.vertices[c])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.signed_area(t)).sum()
    }

    pub fn edge_length(&self, [a, b]: [usize; 2]) -> f64 {
        let (p, q) = (self.vertices[a], self.vertices[b]);
        (q[0] - p[0]).hypot(q[1] - p[1])
    }

    pub fn perimeter(&self) -> f64 {
        self.boundary_edges.iter().map(|&e| self.edge_length(e)).sum()
    }

    pub fn max_edge_length(&self) -> f64 {
        self.triangles
            .iter()
            .flat_map(|&[a, b, c]| [[a, b], [b, c], [c, a]])
            .map(|e| self.edge_length(e))
            .fold(0.0, f64::max)
    }

    /// Short identifier used in run metadata.
    pub fn describe(&self) -> String {
        let kind = match self.domain {
            DomainTag::Disk { radius } => format!("disk(r={radius})"),
            DomainTag::Rectangle { width, height } => format!("rect({width}x{height})"),
            DomainTag::External => "external".to_string(),
        };
        format!("{kind}:nv={}:nt={}:nb={}", self.vertices.len(), self.triangles.len(), self.boundary_edges.len())
    }

    /// Checks orientation, edge multiplicities and closure of the boundary cycle.
    pub fn validate(&self) -> Result<(), MeshError> {
        let nv = self.vertices.len();
        if nv < 3 || self.triangles.is_empty() {
            return Err(MeshError::Topology("mesh needs at least one triangle".into()));
        }
        if let Some(v) = self.vertices.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(MeshError::Topology(format!("vertex {v} has a non-finite coordinate")));
        }
        let mut used = vec![false; nv];
        for (t, tri) in self.triangles.iter().enumerate() {
            for &v in tri {
                if v >= nv {
                    return Err(MeshError::Topology(format!("triangle {t} references vertex {v} out of range")));
                }
                used[v] = true;
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(MeshError::Topology(format!("triangle {t} repeats a vertex")));
            }
            let area = self.signed_area(t);
            if !(area > 0.0) {
                return Err(MeshError::Orientation { triangle: t, area });
            }
        }
        if let Some(v) = used.iter().position(|&u| !u) {
            return Err(MeshError::Topology(format!("vertex {v} belongs to no triangle")));
        }

        // directed triangle edges; an undirected edge is interior iff both
        // directions occur, boundary iff exactly one does
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for (t, &[a, b, c]) in self.triangles.iter().enumerate() {
            for e in [(a, b), (b, c), (c, a)] {
                if directed.insert(e, t).is_some() {
                    return Err(MeshError::Topology(format!(
                        "directed edge {}->{} appears in more than one triangle",
                        e.0, e.1
                    )));
                }
            }
        }
        let mut open: BTreeSet<(usize, usize)> =
            directed.keys().filter(|&&(a, b)| !directed.contains_key(&(b, a))).copied().collect();

        for (k, &[a, b]) in self.boundary_edges.iter().enumerate() {
            if a >= nv || b >= nv {
                return Err(MeshError::Topology(format!("boundary edge {k} references a vertex out of range")));
            }
            if !open.remove(&(a, b)) {
                let reason = if directed.contains_key(&(b, a)) && !directed.contains_key(&(a, b)) {
                    "is oriented inward"
                } else if directed.contains_key(&(a, b)) {
                    "is an interior edge or listed twice"
                } else {
                    "is dangling (belongs to no triangle)"
                };
                return Err(MeshError::Topology(format!("boundary edge {k} ({a}->{b}) {reason}")));
            }
        }
        if let Some(&(a, b)) = open.iter().next() {
            return Err(MeshError::Topology(format!(
                "edge {a}->{b} lies on one triangle only but is not listed as a boundary edge"
            )));
        }

        let mut outgoing = vec![0u8; nv];
        let mut incoming = vec![0u8; nv];
        for &[a, b] in &self.boundary_edges {
            outgoing[a] += 1;
            incoming[b] += 1;
        }
        for &v in &self.boundary_vertices {
            if outgoing[v] != 1 || incoming[v] != 1 {
                return Err(MeshError::Topology(format!(
                    "boundary vertex {v} has {} outgoing and {} incoming boundary edges",
                    outgoing[v], incoming[v]
                )));
            }
        }
        Ok(())
    }

    /// Serializes to the `mesh2d` text format. Coordinates use the shortest
    /// representation that parses back to the identical `f64`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mesh2d {} {} {}", self.vertices.len(), self.triangles.len(), self.boundary_edges.len());
        for [x, y] in &self.vertices {
            let _ = writeln!(out, "v {x:?} {y:?}");
        }
        for [i, j, k] in &self.triangles {
            let _ = writeln!(out, "t {i} {j} {k}");
        }
        for [i, j] in &self.boundary_edges {
            let _ = writeln!(out, "b {i} {j}");
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MeshError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Parses the `mesh2d` text format (`#` starts a comment).
    pub fn from_text(text: &str) -> Result<Self, MeshError> {
        let mut header: Option<(usize, usize, usize)> = None;
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        let mut boundary = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut tokens = content.split_whitespace();
            let tag = tokens.next().unwrap_or_default();
            let fields: Vec<&str> = tokens.collect();
            let perr = |message: String| MeshError::Parse { line, message };
            match (tag, header) {
                ("mesh2d", None) => {
                    let n = parse_indices::<3>(&fields).map_err(perr)?;
                    header = Some((n[0], n[1], n[2]));
                }
                ("mesh2d", Some(_)) => return Err(perr("duplicate header".into())),
                (_, None) => return Err(perr("expected header `mesh2d <nv> <nt> <nb>`".into())),
                ("v", Some(_)) => {
                    if fields.len() != 2 {
                        return Err(perr(format!("vertex needs 2 coordinates, got {}", fields.len())));
                    }
                    let x = fields[0].parse::<f64>().map_err(|e| perr(format!("bad x: {e}")))?;
                    let y = fields[1].parse::<f64>().map_err(|e| perr(format!("bad y: {e}")))?;
                    vertices.push([x, y]);
                }
                ("t", Some(_)) => triangles.push(parse_indices::<3>(&fields).map_err(perr)?),
                ("b", Some(_)) => boundary.push(parse_indices::<2>(&fields).map_err(perr)?),
                (other, Some(_)) => return Err(perr(format!("unknown record `{other}`"))),
            }
        }
        let (nv, nt, nb) = header.ok_or(MeshError::Parse { line: 0, message: "missing header".into() })?;
        let total = text.lines().count();
        if vertices.len() != nv || triangles.len() != nt || boundary.len() != nb {
            return Err(MeshError::Parse {
                line: total,
                message: format!(
                    "header declares {nv}/{nt}/{nb} records, found {}/{}/{}",
                    vertices.len(),
                    triangles.len(),
                    boundary.len()
                ),
            });
        }
        Self::new(vertices, triangles, boundary, DomainTag::External)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MeshError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    /// Returns the same mesh with vertices renumbered so that old vertex `v`
    /// becomes `perm[v]`.
    pub fn renumbered(&self, perm: &[usize]) -> Result<Self, MeshError> {
        let nv = self.vertices.len();
        if perm.len() != nv || perm.iter().collect::<BTreeSet<_>>().len() != nv || perm.iter().any(|&p| p >= nv) {
            return Err(MeshError::InvalidParameter("renumbering is not a permutation".into()));
        }
        let mut vertices = vec![[0.0; 2]; nv];
        for (old, &new) in perm.iter().enumerate() {
            vertices[new] = self.vertices[old];
        }
        let triangles = self.triangles.iter().map(|t| t.map(|v| perm[v])).collect();
        let boundary = self.boundary_edges.iter().map(|e| e.map(|v| perm[v])).collect();
        Self::new(vertices, triangles, boundary, self.domain)
    }
}

fn parse_indices<const K: usize>(fields: &[&str]) -> Result<[usize; K], String> {
    if fields.len() != K {
        return Err(format!("expected {K} integers, got {}", fields.len()));
    }
    let mut out = [0usize; K];
    for (slot, f) in out.iter_mut().zip(fields) {
        *slot = f.parse().map_err(|e| format!("bad index `{f}`: {e}"))?;
    }
    Ok(out)
}

fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

/// Disk of the given radius: a 16-triangle fan around the centre refined
/// `refinement` times by edge-midpoint subdivision, with new boundary
/// midpoints projected onto the circle.
pub fn generate_disk_mesh(radius: f64, refinement: u32) -> Result<MeshGeometry, MeshError> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(MeshError::InvalidParameter(format!("radius must be positive, got {radius}")));
    }
    if refinement > MAX_DISK_REFINEMENT {
        return Err(MeshError::Resource { level: refinement, max: MAX_DISK_REFINEMENT });
    }
    const FAN: usize = 16;
    let mut vertices = vec![[0.0, 0.0]];
    for k in 0..FAN {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / FAN as f64;
        vertices.push([radius * theta.cos(), radius * theta.sin()]);
    }
    let mut triangles: Vec<[usize; 3]> = (0..FAN).map(|k| [0, 1 + k, 1 + (k + 1) % FAN]).collect();
    let mut boundary: Vec<[usize; 2]> = (0..FAN).map(|k| [1 + k, 1 + (k + 1) % FAN]).collect();

    for _ in 0..refinement {
        let on_boundary: BTreeSet<(usize, usize)> = boundary.iter().map(|&[a, b]| (a.min(b), a.max(b))).collect();
        let mut midpoint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut mid = |a: usize, b: usize, vertices: &mut Vec<[f64; 2]>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoint.entry(key).or_insert_with(|| {
                let (p, q) = (vertices[a], vertices[b]);
                let mut m = [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])];
                if on_boundary.contains(&key) {
                    let scale = radius / m[0].hypot(m[1]);
                    m = [m[0] * scale, m[1] * scale];
                }
                vertices.push(m);
                vertices.len() - 1
            })
        };
        let mut refined = Vec::with_capacity(4 * triangles.len());
        for &[a, b, c] in &triangles {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            refined.extend([[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
        }
        triangles = refined;
        boundary = boundary
            .iter()
            .flat_map(|&[a, b]| {
                let m = mid(a, b, &mut vertices);
                [[a, m], [m, b]]
            })
            .collect();
    }
    MeshGeometry::new(vertices, triangles, boundary, DomainTag::Disk { radius })
}

/// Structured `nx × ny` grid on `[0, w] × [0, h]`, each cell split along
/// its lower-left to upper-right diagonal.
pub fn generate_rectangle_mesh(w: f64, h: f64, nx: usize, ny: usize) -> Result<MeshGeometry, MeshError> {
    if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
        return Err(MeshError::InvalidParameter(format!("sides must be positive, got {w} x {h}")));
    }
    if nx == 0 || ny == 0 {
        return Err(MeshError::InvalidParameter("nx and ny must be positive".into()));
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push([w * i as f64 / nx as f64, h * j as f64 / ny as f64]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    let mut boundary = Vec::with_capacity(2 * (nx + ny));
    boundary.extend((0..nx).map(|i| [id(i, 0), id(i + 1, 0)]));
    boundary.extend((0..ny).map(|j| [id(nx, j), id(nx, j + 1)]));
    boundary.extend((0..nx).rev().map(|i| [id(i + 1, ny), id(i, ny)]));
    boundary.extend((0..ny).rev().map(|j| [id(0, j + 1), id(0, j)]));
    MeshGeometry::new(vertices, triangles, boundary, DomainTag::Rectangle { width: w, height: h })
}

/// Loads a mesh file in the `mesh2d` text format.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<MeshGeometry, MeshError> {
    MeshGeometry::load(path)
}
