//! Triangulated polygonal domains with Dirichlet/Neumann edge tagging.
//!
//! A node lying on the closure of any Dirichlet edge is a Dirichlet node. Meshes
//! are immutable once built, and per-element geometry (area, basis gradients,
//! centroid) is cached at construction.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryTag {
    Dirichlet,
    Neumann,
}

impl BoundaryTag {
    fn symbol(self) -> &'static str {
        match self {
            BoundaryTag::Dirichlet => "D",
            BoundaryTag::Neumann => "N",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundaryEdge {
    pub nodes: [usize; 2],
    pub tag: BoundaryTag,
}

/// Tags for the four sides of a rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideTags {
    pub left: BoundaryTag,
    pub right: BoundaryTag,
    pub bottom: BoundaryTag,
    pub top: BoundaryTag,
}

impl SideTags {
    pub fn all(tag: BoundaryTag) -> Self {
        SideTags {
            left: tag,
            right: tag,
            bottom: tag,
            top: tag,
        }
    }

    pub fn dirichlet_left() -> Self {
        SideTags {
            left: BoundaryTag::Dirichlet,
            ..SideTags::all(BoundaryTag::Neumann)
        }
    }

    fn any_dirichlet(&self) -> bool {
        [self.left, self.right, self.bottom, self.top].contains(&BoundaryTag::Dirichlet)
    }
}

/// Cached geometry of one triangle.
#[derive(Clone, Copy, Debug)]
pub struct ElementGeometry {
    pub area: f64,
    /// Gradients of the three barycentric basis functions.
    pub grads: [[f64; 2]; 3],
    pub centroid: Point,
}

/// A single broken mesh invariant.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NodeIndexOutOfRange { triangle: usize, index: usize },
    NonPositiveArea { triangle: usize, area: f64 },
    EdgeIndexOutOfRange { edge: [usize; 2] },
    EdgeNotOnBoundary { edge: [usize; 2], triangles: usize },
    UntaggedBoundaryEdge { edge: [usize; 2] },
    MultiplyTaggedEdge { edge: [usize; 2], count: usize },
    EmptyDirichletSet,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NodeIndexOutOfRange { triangle, index } => {
                write!(f, "triangle {triangle} references missing node {index}")
            }
            Violation::NonPositiveArea { triangle, area } => {
                write!(f, "triangle {triangle} has non-positive signed area {area:e}")
            }
            Violation::EdgeIndexOutOfRange { edge } => {
                write!(f, "boundary edge {:?} references a missing node", edge)
            }
            Violation::EdgeNotOnBoundary { edge, triangles } => write!(
                f,
                "tagged edge {:?} belongs to {triangles} triangles (expected exactly 1)",
                edge
            ),
            Violation::UntaggedBoundaryEdge { edge } => {
                write!(f, "boundary edge {:?} carries no tag", edge)
            }
            Violation::MultiplyTaggedEdge { edge, count } => {
                write!(f, "boundary edge {:?} is tagged {count} times", edge)
            }
            Violation::EmptyDirichletSet => write!(f, "empty Dirichlet set (Gamma_D must be nonempty)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mesh {
    nodes: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<BoundaryEdge>,
    dirichlet: Vec<bool>,
    geometry: Vec<ElementGeometry>,
    lumped_mass: Vec<f64>,
}

fn edge_key(a: usize, b: usize) -> [usize; 2] {
    if a < b {
        [a, b]
    } else {
        [b, a]
    }
}

fn signed_area(p: Point, q: Point, r: Point) -> f64 {
    0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]))
}

fn element_geometry(p: [Point; 3]) -> ElementGeometry {
    let area = signed_area(p[0], p[1], p[2]);
    let two_a = 2.0 * area;
    let mut grads = [[0.0; 2]; 3];
    for (i, g) in grads.iter_mut().enumerate() {
        let j = (i + 1) % 3;
        let k = (i + 2) % 3;
        *g = [(p[j][1] - p[k][1]) / two_a, (p[k][0] - p[j][0]) / two_a];
    }
    let centroid = [
        (p[0][0] + p[1][0] + p[2][0]) / 3.0,
        (p[0][1] + p[1][1] + p[2][1]) / 3.0,
    ];
    ElementGeometry {
        area,
        grads,
        centroid,
    }
}

impl Mesh {
    /// Builds a mesh and checks every invariant.
    pub fn new(
        nodes: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        boundary_edges: Vec<BoundaryEdge>,
    ) -> Result<Self> {
        let mesh = Self::from_parts_unchecked(nodes, triangles, boundary_edges);
        let violations = validate_mesh(&mesh);
        if violations.is_empty() {
            Ok(mesh)
        } else {
            let msg = violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; ");
            Err(Error::Mesh(msg))
        }
    }

    /// Builds a mesh without validation. Out-of-range indices are tolerated
    /// (their geometry is zeroed) so that `validate_mesh` can report them.
    pub fn from_parts_unchecked(
        nodes: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        boundary_edges: Vec<BoundaryEdge>,
    ) -> Self {
        let n = nodes.len();
        let mut dirichlet = vec![false; n];
        for e in &boundary_edges {
            if e.tag == BoundaryTag::Dirichlet {
                for &v in &e.nodes {
                    if v < n {
                        dirichlet[v] = true;
                    }
                }
            }
        }
        let mut lumped_mass = vec![0.0; n];
        let geometry = triangles
            .iter()
            .map(|t| {
                if t.iter().any(|&v| v >= n) {
                    return ElementGeometry {
                        area: 0.0,
                        grads: [[0.0; 2]; 3],
                        centroid: [0.0; 2],
                    };
                }
                let g = element_geometry([nodes[t[0]], nodes[t[1]], nodes[t[2]]]);
                for &v in t {
                    lumped_mass[v] += g.area / 3.0;
                }
                g
            })
            .collect();
        Mesh {
            nodes,
            triangles,
            boundary_edges,
            dirichlet,
            geometry,
            lumped_mass,
        }
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_dirichlet(&self, node: usize) -> bool {
        self.dirichlet[node]
    }

    pub fn dirichlet_mask(&self) -> &[bool] {
        &self.dirichlet
    }

    pub fn dirichlet_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.dirichlet[i]).collect()
    }

    pub fn free_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| !self.dirichlet[i]).collect()
    }

    pub fn geometry(&self, triangle: usize) -> &ElementGeometry {
        &self.geometry[triangle]
    }

    pub fn elements(&self) -> impl Iterator<Item = (&[usize; 3], &ElementGeometry)> {
        self.triangles.iter().zip(self.geometry.iter())
    }

    /// Row sums of the consistent mass matrix (one third of each adjacent area).
    pub fn lumped_mass(&self) -> &[f64] {
        &self.lumped_mass
    }

    pub fn area(&self) -> f64 {
        self.geometry.iter().map(|g| g.area).sum()
    }

    /// Longest edge over all triangles.
    pub fn max_edge_length(&self) -> f64 {
        let mut h: f64 = 0.0;
        for t in &self.triangles {
            for i in 0..3 {
                let a = self.nodes[t[i]];
                let b = self.nodes[t[(i + 1) % 3]];
                h = h.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
        }
        h
    }

    /// Largest interior angle (radians) over all triangles.
    pub fn max_angle(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for t in &self.triangles {
            for i in 0..3 {
                let o = self.nodes[t[i]];
                let a = self.nodes[t[(i + 1) % 3]];
                let b = self.nodes[t[(i + 2) % 3]];
                let u = [a[0] - o[0], a[1] - o[1]];
                let v = [b[0] - o[0], b[1] - o[1]];
                let cos = (u[0] * v[0] + u[1] * v[1])
                    / ((u[0].hypot(u[1])) * (v[0].hypot(v[1])));
                worst = worst.max(cos.clamp(-1.0, 1.0).acos());
            }
        }
        worst
    }

    /// Interpolates nodal values at a triangle centroid.
    pub fn centroid_value(&self, triangle: usize, values: &[f64]) -> f64 {
        let t = &self.triangles[triangle];
        (values[t[0]] + values[t[1]] + values[t[2]]) / 3.0
    }

    /// Writes the plain-text mesh format (see `docs/formats.md`).
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.nodes.len())?;
        for p in &self.nodes {
            writeln!(w, "{:?} {:?}", p[0], p[1])?;
        }
        writeln!(w, "{}", self.triangles.len())?;
        for t in &self.triangles {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        writeln!(w, "{}", self.boundary_edges.len())?;
        for e in &self.boundary_edges {
            writeln!(w, "{} {} {}", e.nodes[0], e.nodes[1], e.tag.symbol())?;
        }
        Ok(())
    }

    /// Parses the plain-text mesh format and validates the result.
    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = Vec::new();
        for line in r.lines() {
            let line = line?;
            let body = line.split('#').next().unwrap_or("").trim().to_string();
            if !body.is_empty() {
                lines.push(body);
            }
        }
        let mut it = lines.into_iter().enumerate();
        let mut next = |what: &str| {
            it.next()
                .ok_or_else(|| Error::Mesh(format!("unexpected end of file while reading {what}")))
        };
        let parse_count = |(ln, s): (usize, String), what: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| Error::Mesh(format!("line {}: expected {what} count, got `{s}`", ln + 1)))
        };

        let n = parse_count(next("node count")?, "node")?;
        let mut nodes = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, s) = next("node coordinates")?;
            let v: Vec<f64> = s
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Mesh(format!("line {}: bad coordinates `{s}`", ln + 1)))?;
            if v.len() != 2 {
                return Err(Error::Mesh(format!("line {}: expected `x y`", ln + 1)));
            }
            nodes.push([v[0], v[1]]);
        }

        let m = parse_count(next("triangle count")?, "triangle")?;
        let mut triangles = Vec::with_capacity(m);
        for _ in 0..m {
            let (ln, s) = next("triangle")?;
            let v: Vec<usize> = s
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Mesh(format!("line {}: bad triangle `{s}`", ln + 1)))?;
            if v.len() != 3 {
                return Err(Error::Mesh(format!("line {}: expected `i j k`", ln + 1)));
            }
            triangles.push([v[0], v[1], v[2]]);
        }

        let b = parse_count(next("boundary edge count")?, "boundary edge")?;
        let mut edges = Vec::with_capacity(b);
        for _ in 0..b {
            let (ln, s) = next("boundary edge")?;
            let parts: Vec<&str> = s.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Mesh(format!("line {}: expected `i j tag`", ln + 1)));
            }
            let idx = |p: &str| {
                p.parse::<usize>()
                    .map_err(|_| Error::Mesh(format!("line {}: bad node index `{p}`", ln + 1)))
            };
            let tag = match parts[2] {
                "D" | "d" | "dirichlet" => BoundaryTag::Dirichlet,
                "N" | "n" | "neumann" => BoundaryTag::Neumann,
                other => {
                    return Err(Error::Mesh(format!(
                        "line {}: unknown boundary tag `{other}` (use D or N)",
                        ln + 1
                    )))
                }
            };
            edges.push(BoundaryEdge {
                nodes: [idx(parts[0])?, idx(parts[1])?],
                tag,
            });
        }
        Mesh::new(nodes, triangles, edges)
    }
}

/// Right-triangle mesh of `[0,lx] x [0,ly]` with `2 nx ny` triangles.
///
/// Each cell is split along its lower-left to upper-right diagonal, so every
/// triangle has one right angle and no obtuse angle.
pub fn build_structured_mesh(nx: usize, ny: usize, lx: f64, ly: f64, sides: SideTags) -> Result<Mesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::Mesh("nx and ny must be at least 1".into()));
    }
    if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
        return Err(Error::Mesh("lx and ly must be positive and finite".into()));
    }
    if !sides.any_dirichlet() {
        return Err(Error::Mesh(
            "all sides are Neumann: the Dirichlet part of the boundary must be nonempty".into(),
        ));
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            nodes.push([lx * i as f64 / nx as f64, ly * j as f64 / ny as f64]);
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
    let mut edges = Vec::with_capacity(2 * (nx + ny));
    for i in 0..nx {
        edges.push(BoundaryEdge {
            nodes: [id(i, 0), id(i + 1, 0)],
            tag: sides.bottom,
        });
        edges.push(BoundaryEdge {
            nodes: [id(i + 1, ny), id(i, ny)],
            tag: sides.top,
        });
    }
    for j in 0..ny {
        edges.push(BoundaryEdge {
            nodes: [id(nx, j), id(nx, j + 1)],
            tag: sides.right,
        });
        edges.push(BoundaryEdge {
            nodes: [id(0, j + 1), id(0, j)],
            tag: sides.left,
        });
    }
    Mesh::new(nodes, triangles, edges)
}

/// Lists every broken mesh invariant; empty iff the mesh is valid.
pub fn validate_mesh(m: &Mesh) -> Vec<Violation> {
    let n = m.nodes.len();
    let mut out = Vec::new();
    let mut edge_count: BTreeMap<[usize; 2], usize> = BTreeMap::new();
    for (ti, t) in m.triangles.iter().enumerate() {
        if let Some(&bad) = t.iter().find(|&&v| v >= n) {
            out.push(Violation::NodeIndexOutOfRange {
                triangle: ti,
                index: bad,
            });
            continue;
        }
        let area = signed_area(m.nodes[t[0]], m.nodes[t[1]], m.nodes[t[2]]);
        if area <= 0.0 || !area.is_finite() {
            out.push(Violation::NonPositiveArea { triangle: ti, area });
        }
        for i in 0..3 {
            *edge_count.entry(edge_key(t[i], t[(i + 1) % 3])).or_default() += 1;
        }
    }

    let mut tag_count: BTreeMap<[usize; 2], usize> = BTreeMap::new();
    for e in &m.boundary_edges {
        if e.nodes.iter().any(|&v| v >= n) {
            out.push(Violation::EdgeIndexOutOfRange { edge: e.nodes });
            continue;
        }
        let key = edge_key(e.nodes[0], e.nodes[1]);
        *tag_count.entry(key).or_default() += 1;
        let owners = edge_count.get(&key).copied().unwrap_or(0);
        if owners != 1 {
            out.push(Violation::EdgeNotOnBoundary {
                edge: e.nodes,
                triangles: owners,
            });
        }
    }
    for (key, &owners) in &edge_count {
        if owners == 1 {
            match tag_count.get(key).copied().unwrap_or(0) {
                0 => out.push(Violation::UntaggedBoundaryEdge { edge: *key }),
                1 => {}
                count => out.push(Violation::MultiplyTaggedEdge { edge: *key, count }),
            }
        }
    }
    if !m.dirichlet.iter().any(|&d| d) {
        out.push(Violation::EmptyDirichletSet);
    }
    out
}
