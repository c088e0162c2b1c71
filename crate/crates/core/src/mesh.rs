//! Triangulated surface geometry.
//!
//! [`TriMesh`] holds vertex positions and triangle faces and is validated on
//! construction. [`Adjacency`] stores the 1-ring of every vertex (neighbors
//! sharing an edge), the edge lengths to those neighbors and the mean ring
//! radius, which is what the mesh Laplacian in [`crate::ops`] is built from.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

/// A validated triangle mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Point>,
    faces: Vec<[usize; 3]>,
    is_closed: bool,
}

impl TriMesh {
    /// Builds a mesh, rejecting out-of-range indices and degenerate faces.
    pub fn new(vertices: Vec<Point>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if vertices.is_empty() || faces.is_empty() {
            return Err(Error::InvalidMesh("mesh needs vertices and faces".into()));
        }
        if let Some(v) = vertices.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh(format!("vertex {v} is not finite")));
        }
        let n = vertices.len();
        let mut edge_use: HashMap<(usize, usize), usize> = HashMap::new();
        for (f, tri) in faces.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {f} references vertex {bad}, mesh has {n}"
                )));
            }
            let [a, b, c] = *tri;
            if a == b || b == c || a == c {
                return Err(Error::DegenerateGeometry(format!("face {f} repeats a vertex: {tri:?}")));
            }
            let e1 = vertices[b] - vertices[a];
            let e2 = vertices[c] - vertices[a];
            let area2 = e1.cross(&e2).norm();
            let scale = e1.norm_squared().max(e2.norm_squared());
            if !(area2 > 1e-14 * scale) {
                return Err(Error::DegenerateGeometry(format!("face {f} has zero area")));
            }
            for (p, q) in [(a, b), (b, c), (c, a)] {
                *edge_use.entry((p.min(q), p.max(q))).or_default() += 1;
            }
        }
        let is_closed = edge_use.values().all(|&c| c == 2);
        Ok(Self {
            vertices,
            faces,
            is_closed,
        })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn is_closed(&self) -> bool {
        self.is_closed
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Unique undirected edges, each as `(low, high)`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let set: BTreeSet<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|&[a, b, c]| [(a, b), (b, c), (c, a)])
            .map(|(p, q)| (p.min(q), p.max(q)))
            .collect();
        set.into_iter().collect()
    }

    /// Vertex centroid.
    pub fn centroid(&self) -> Point {
        self.vertices.iter().sum::<Point>() / self.vertices.len() as f64
    }

    /// Largest distance from the centroid to any vertex.
    pub fn bounding_radius(&self) -> f64 {
        let c = self.centroid();
        self.vertices.iter().map(|p| (p - c).norm()).fold(0.0, f64::max)
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounding_box(&self) -> (Point, Point) {
        let mut lo = Point::repeat(f64::INFINITY);
        let mut hi = Point::repeat(f64::NEG_INFINITY);
        for p in &self.vertices {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }
}

/// Per-vertex 1-ring neighborhoods.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
    lengths: Vec<Vec<f64>>,
    ring_radius: Vec<f64>,
}

impl Adjacency {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Sorted neighbor indices of vertex `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Edge lengths `d_ij`, aligned with [`Adjacency::neighbors`].
    pub fn lengths(&self, i: usize) -> &[f64] {
        &self.lengths[i]
    }

    /// Mean distance from vertex `i` to its neighbors.
    pub fn ring_radius(&self, i: usize) -> f64 {
        self.ring_radius[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Breadth-first hop distance from `source` to every vertex
    /// (`usize::MAX` for unreachable vertices).
    pub fn graph_distances(&self, source: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.len()];
        let mut queue = std::collections::VecDeque::new();
        dist[source] = 0;
        queue.push_back(source);
        while let Some(i) = queue.pop_front() {
            for &j in &self.neighbors[i] {
                if dist[j] == usize::MAX {
                    dist[j] = dist[i] + 1;
                    queue.push_back(j);
                }
            }
        }
        dist
    }
}

/// Collects the 1-ring of every vertex from the face list.
pub fn build_adjacency(mesh: &TriMesh) -> Result<Adjacency> {
    let n = mesh.vertex_count();
    let mut sets = vec![BTreeSet::new(); n];
    for &[a, b, c] in mesh.faces() {
        for (p, q) in [(a, b), (b, c), (c, a)] {
            sets[p].insert(q);
            sets[q].insert(p);
        }
    }
    let mut neighbors = Vec::with_capacity(n);
    let mut lengths = Vec::with_capacity(n);
    let mut ring_radius = Vec::with_capacity(n);
    for (i, set) in sets.into_iter().enumerate() {
        if set.is_empty() {
            return Err(Error::IsolatedVertex(i));
        }
        let nb: Vec<usize> = set.into_iter().collect();
        let d: Vec<f64> = nb
            .iter()
            .map(|&j| (mesh.vertices[j] - mesh.vertices[i]).norm())
            .collect();
        ring_radius.push(d.iter().sum::<f64>() / d.len() as f64);
        neighbors.push(nb);
        lengths.push(d);
    }
    Ok(Adjacency {
        neighbors,
        lengths,
        ring_radius,
    })
}

/// Subdivided icosahedron projected onto a sphere of the given radius.
///
/// Vertex count is `10 * 4^s + 2`; faces are oriented counter-clockwise when
/// seen from outside.
pub fn icosphere(subdivisions: u32, radius: f64) -> Result<TriMesh> {
    if subdivisions > 6 {
        return Err(Error::InvalidConfig(format!(
            "icosphere subdivisions must be <= 6, got {subdivisions}"
        )));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "icosphere radius must be positive, got {radius}"
        )));
    }
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Point> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Point::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Point>| -> usize {
            *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }

    for v in &mut verts {
        *v *= radius;
    }
    TriMesh::new(verts, faces)
}

/// Regular tetrahedron with the given edge length, centered at the origin.
pub fn regular_tetrahedron(edge: f64) -> TriMesh {
    let s = edge / (2.0 * 2f64.sqrt());
    let v = vec![
        Point::new(s, s, s),
        Point::new(s, -s, -s),
        Point::new(-s, s, -s),
        Point::new(-s, -s, s),
    ];
    TriMesh::new(v, vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]]).expect("regular tetrahedron is a valid mesh")
}

/// Area-weighted vertex normals, normalized to unit length.
pub fn vertex_normals(mesh: &TriMesh) -> Result<Vec<Point>> {
    let mut acc = vec![Point::zeros(); mesh.vertex_count()];
    for &[a, b, c] in mesh.faces() {
        let v = mesh.vertices();
        // |cross| is twice the face area, so this is the area weighting.
        let n = (v[b] - v[a]).cross(&(v[c] - v[a]));
        acc[a] += n;
        acc[b] += n;
        acc[c] += n;
    }
    acc.into_iter()
        .enumerate()
        .map(|(i, n)| {
            let len = n.norm();
            if len > 0.0 && len.is_finite() {
                Ok(n / len)
            } else {
                Err(Error::DegenerateGeometry(format!("normal at vertex {i} vanishes")))
            }
        })
        .collect()
}

/// Formats a value with 9 significant digits in scientific notation.
pub(crate) fn fmt_sig9(x: f64) -> String {
    format!("{x:.8e}")
}

/// Writes the mesh as ASCII OFF.
pub fn save_off(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_off_string(mesh)).map_err(|e| Error::io(path, e))
}

pub fn to_off_string(mesh: &TriMesh) -> String {
    let mut out = String::new();
    out.push_str("OFF\n");
    let _ = writeln!(
        out,
        "{} {} {}",
        mesh.vertex_count(),
        mesh.faces.len(),
        mesh.edges().len()
    );
    for p in &mesh.vertices {
        let _ = writeln!(out, "{} {} {}", fmt_sig9(p.x), fmt_sig9(p.y), fmt_sig9(p.z));
    }
    for &[a, b, c] in &mesh.faces {
        let _ = writeln!(out, "3 {a} {b} {c}");
    }
    out
}

pub fn load_off(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_off(&text)
}

/// Parses ASCII OFF text. Blank lines and `#` comments are skipped.
pub fn parse_off(text: &str) -> Result<TriMesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (line, header) = lines.next().ok_or(Error::OffHeader { line: 1 })?;
    // Some writers put the counts on the header line itself.
    let rest = match header.strip_prefix("OFF") {
        Some(rest) if rest.is_empty() || rest.starts_with(char::is_whitespace) => rest.trim(),
        _ => return Err(Error::OffHeader { line }),
    };
    let (count_line, counts) = if rest.is_empty() {
        lines.next().ok_or(Error::OffSyntax {
            line,
            message: "missing counts line".into(),
        })?
    } else {
        (line, rest)
    };
    let nums = parse_usizes(counts, count_line)?;
    if nums.len() < 2 {
        return Err(Error::OffSyntax {
            line: count_line,
            message: "counts line needs at least V and F".into(),
        });
    }
    let (nv, nf) = (nums[0], nums[1]);

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (line, l) = lines.next().ok_or(Error::OffSyntax {
            line: count_line,
            message: format!("expected {nv} vertices"),
        })?;
        let coords: Vec<f64> = l
            .split_whitespace()
            .take(3)
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::OffSyntax {
                line,
                message: format!("bad coordinate: {e}"),
            })?;
        if coords.len() != 3 {
            return Err(Error::OffSyntax {
                line,
                message: "vertex needs three coordinates".into(),
            });
        }
        vertices.push(Point::new(coords[0], coords[1], coords[2]));
    }

    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (line, l) = lines.next().ok_or(Error::OffSyntax {
            line: count_line,
            message: format!("expected {nf} faces"),
        })?;
        let nums = parse_usizes(l, line)?;
        let arity = *nums.first().ok_or(Error::OffSyntax {
            line,
            message: "empty face".into(),
        })?;
        if arity != 3 {
            return Err(Error::OffNonTriangularFace { line, arity });
        }
        if nums.len() < 4 {
            return Err(Error::OffSyntax {
                line,
                message: "face lists fewer than three indices".into(),
            });
        }
        let tri = [nums[1], nums[2], nums[3]];
        if let Some(&index) = tri.iter().find(|&&i| i >= nv) {
            return Err(Error::OffIndexOutOfRange {
                line,
                index,
                vertex_count: nv,
            });
        }
        faces.push(tri);
    }
    TriMesh::new(vertices, faces)
}

fn parse_usizes(s: &str, line: usize) -> Result<Vec<usize>> {
    s.split_whitespace()
        .map(|t| {
            t.parse::<usize>().map_err(|e| Error::OffSyntax {
                line,
                message: format!("bad integer {t:?}: {e}"),
            })
        })
        .collect()
}
