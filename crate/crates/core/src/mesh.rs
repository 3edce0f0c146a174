//! Conforming triangulations refined by newest-vertex bisection.
//!
//! Triangles are stored counter-clockwise with the peak first, so local edge 0
//! (opposite the peak) is the refinement edge. Every element carries an
//! [`ElemKey`] naming its position in the bisection forest rooted at the
//! initial mesh; keys identify elements across meshes of the same family.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

pub type Point = [f64; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("unknown domain descriptor `{0}`")]
    UnknownDomain(String),
    #[error("element id {id} out of range (mesh has {len} elements)")]
    ElementOutOfRange { id: usize, len: usize },
    #[error("edge id {id} out of range (mesh has {len} edges)")]
    EdgeOutOfRange { id: usize, len: usize },
    #[error("bisection count b must be at least 1")]
    InvalidBisectionCount,
    #[error("element {0} has non-positive signed area")]
    Degenerate(usize),
    #[error("mesh is not conforming: {0}")]
    NonConforming(String),
    #[error("meshes do not share the same initial triangulation")]
    DifferentRoots,
    #[error("mesh is not a refinement of the given coarse mesh")]
    NotNested,
    #[error("bisection depth limit exceeded")]
    TooDeep,
    #[error("mesh parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Built-in initial triangulations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    UnitSquare,
    LShape,
    Checkerboard,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::UnitSquare => "unit_square",
            Domain::LShape => "lshape",
            Domain::Checkerboard => "checkerboard",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = MeshError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unit_square" | "square" => Ok(Domain::UnitSquare),
            "lshape" | "l_shape" => Ok(Domain::LShape),
            "checkerboard" => Ok(Domain::Checkerboard),
            other => Err(MeshError::UnknownDomain(other.to_string())),
        }
    }
}

const MAX_DEPTH: u8 = 127;

/// Position of an element in the bisection forest: root triangle plus the
/// sequence of child slots taken from it (bit `i` is the slot at depth `i+1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ElemKey {
    root: u32,
    depth: u8,
    path: u128,
}

impl ElemKey {
    pub fn root(root: u32) -> Self {
        ElemKey {
            root,
            depth: 0,
            path: 0,
        }
    }

    pub fn root_id(&self) -> usize {
        self.root as usize
    }

    /// Bisection depth below the root (the element's generation).
    pub fn depth(&self) -> u32 {
        u32::from(self.depth)
    }

    pub fn child(&self, slot: u8) -> Result<Self, MeshError> {
        if self.depth >= MAX_DEPTH {
            return Err(MeshError::TooDeep);
        }
        Ok(ElemKey {
            root: self.root,
            depth: self.depth + 1,
            path: self.path | (u128::from(slot & 1) << self.depth),
        })
    }

    pub fn parent(&self) -> Option<Self> {
        if self.depth == 0 {
            return None;
        }
        let depth = self.depth - 1;
        Some(ElemKey {
            root: self.root,
            depth,
            path: self.path & ((1u128 << depth) - 1),
        })
    }

    /// Slot taken at the last bisection (0 or 1); `None` for a root.
    pub fn slot(&self) -> Option<u8> {
        (self.depth > 0).then(|| ((self.path >> (self.depth - 1)) & 1) as u8)
    }

    pub fn is_ancestor_of(&self, other: &ElemKey) -> bool {
        self.root == other.root
            && self.depth <= other.depth
            && (other.path & ((1u128 << self.depth) - 1)) == self.path
    }

    /// `root.slots`, with `-` for an empty path.
    pub fn label(&self) -> String {
        let mut s = format!("{}.", self.root);
        if self.depth == 0 {
            s.push('-');
        }
        for i in 0..self.depth {
            s.push(if (self.path >> i) & 1 == 1 { '1' } else { '0' });
        }
        s
    }

    pub fn parse_label(label: &str) -> Option<Self> {
        let (root, path) = label.split_once('.')?;
        let mut key = ElemKey::root(root.parse().ok()?);
        if path != "-" {
            for c in path.chars() {
                key = key
                    .child(match c {
                        '0' => 0,
                        '1' => 1,
                        _ => return None,
                    })
                    .ok()?;
            }
        }
        Some(key)
    }
}

/// Geometry of the initial triangulation, used to decide whether two meshes
/// belong to the same refinement family.
#[derive(Debug, Clone, PartialEq)]
pub struct RootMesh {
    pub triangles: Vec<[Point; 3]>,
}

impl RootMesh {
    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(signed_area).sum()
    }

    /// Edges used by exactly one root triangle.
    fn boundary_segments(&self) -> Vec<[Point; 2]> {
        let mut count: HashMap<[u64; 4], (usize, [Point; 2])> = HashMap::new();
        for t in &self.triangles {
            for j in 0..3 {
                let (p, q) = (t[(j + 1) % 3], t[(j + 2) % 3]);
                let (p, q) = if (p[0], p[1]) < (q[0], q[1]) { (p, q) } else { (q, p) };
                let key = [p[0].to_bits(), p[1].to_bits(), q[0].to_bits(), q[1].to_bits()];
                count.entry(key).or_insert((0, [p, q])).0 += 1;
            }
        }
        let mut segs: Vec<_> = count.into_values().filter(|(c, _)| *c == 1).map(|(_, s)| s).collect();
        segs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        segs
    }
}

/// One side of an edge: the element, the local edge index, and +1 when the
/// edge's global normal points out of that element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Incidence {
    pub elem: usize,
    pub local: u8,
    pub sign: f64,
}

/// Edge with endpoints in ascending index order. The global tangent runs from
/// `vertices[0]` to `vertices[1]`; the normal is the tangent rotated by -90
/// degrees. `plus` is the element the normal leaves, `minus` the one it enters.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRecord {
    pub vertices: [usize; 2],
    pub plus: Option<Incidence>,
    pub minus: Option<Incidence>,
}

impl EdgeRecord {
    pub fn is_boundary(&self) -> bool {
        self.plus.is_none() || self.minus.is_none()
    }

    pub fn incidences(&self) -> impl Iterator<Item = Incidence> + '_ {
        self.plus.iter().chain(self.minus.iter()).copied()
    }
}

#[derive(Debug, Clone)]
pub struct ElementGeometry {
    pub vertices: [Point; 3],
    pub area: f64,
    /// Estimator weight `|T|^{1/2}`.
    pub h: f64,
    /// Diameter (longest edge), used for shape-regularity audits.
    pub diam: f64,
    /// Local edge `j` is opposite vertex `j`.
    pub edge_lengths: [f64; 3],
    /// Global unit tangents of the three edges.
    pub tangents: [Point; 3],
    /// Global unit normals of the three edges.
    pub normals: [Point; 3],
    /// +1 where the global normal is outward for this element.
    pub signs: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    keys: Vec<ElemKey>,
    edges: Vec<EdgeRecord>,
    elem_edges: Vec<[usize; 3]>,
    roots: Arc<RootMesh>,
}

/// Output of [`Mesh::refine`].
#[derive(Debug, Clone)]
pub struct RefineResult {
    pub mesh: Mesh,
    /// Coarse element ids that were bisected (ascending).
    pub refined_set: Vec<usize>,
    pub marked_count: usize,
    /// For every fine element, the coarse element containing it.
    pub parent: Vec<usize>,
}

fn signed_area(t: &[Point; 3]) -> f64 {
    let (a, b, c) = (t[0], t[1], t[2]);
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
}

fn dist(p: Point, q: Point) -> f64 {
    (q[0] - p[0]).hypot(q[1] - p[1])
}

impl Mesh {
    /// Builds a mesh from raw parts, deriving the edge table.
    pub fn from_parts(
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        keys: Vec<ElemKey>,
        roots: Arc<RootMesh>,
    ) -> Result<Self, MeshError> {
        assert_eq!(triangles.len(), keys.len());
        let mut edges: Vec<EdgeRecord> = Vec::with_capacity(triangles.len() * 3 / 2 + 2);
        let mut elem_edges = Vec::with_capacity(triangles.len());
        let mut index: HashMap<(usize, usize), usize> = HashMap::with_capacity(triangles.len() * 2);
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                if v >= vertices.len() {
                    return Err(MeshError::NonConforming(format!(
                        "element {t} references missing vertex {v}"
                    )));
                }
            }
            let geo = [vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]];
            if signed_area(&geo) <= 0.0 {
                return Err(MeshError::Degenerate(t));
            }
            let mut ids = [0; 3];
            for j in 0..3 {
                let (p, q) = (tri[(j + 1) % 3], tri[(j + 2) % 3]);
                let sign = if p < q { 1.0 } else { -1.0 };
                let key = (p.min(q), p.max(q));
                let inc = Incidence {
                    elem: t,
                    local: j as u8,
                    sign,
                };
                let id = *index.entry(key).or_insert_with(|| {
                    edges.push(EdgeRecord {
                        vertices: [key.0, key.1],
                        plus: None,
                        minus: None,
                    });
                    edges.len() - 1
                });
                let slot = if sign > 0.0 {
                    &mut edges[id].plus
                } else {
                    &mut edges[id].minus
                };
                if slot.is_some() {
                    return Err(MeshError::NonConforming(format!(
                        "edge ({}, {}) has overlapping elements",
                        key.0, key.1
                    )));
                }
                *slot = Some(inc);
                ids[j] = id;
            }
            elem_edges.push(ids);
        }
        Ok(Mesh {
            vertices,
            triangles,
            keys,
            edges,
            elem_edges,
            roots,
        })
    }

    /// Initial triangulation of a built-in domain. The refinement-edge
    /// labeling is checked to be compatible by refining every element twice.
    pub fn create_initial(domain: Domain) -> Result<Self, MeshError> {
        let (vertices, triangles): (Vec<Point>, Vec<[usize; 3]>) = match domain {
            Domain::UnitSquare => (
                vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
                vec![[1, 2, 0], [3, 0, 2]],
            ),
            Domain::LShape => (
                vec![
                    [0.0, 0.0],
                    [1.0, 0.0],
                    [1.0, 1.0],
                    [0.0, 1.0],
                    [-1.0, 1.0],
                    [-1.0, 0.0],
                    [-1.0, -1.0],
                    [0.0, -1.0],
                ],
                vec![[1, 2, 0], [3, 0, 2], [3, 4, 0], [5, 0, 4], [5, 6, 0], [7, 0, 6]],
            ),
            Domain::Checkerboard => {
                let v = |i: usize, j: usize| j * 3 + i;
                let mut verts = Vec::new();
                for j in 0..3 {
                    for i in 0..3 {
                        verts.push([i as f64 * 0.5, j as f64 * 0.5]);
                    }
                }
                let mut tris = Vec::new();
                for j in 0..2 {
                    for i in 0..2 {
                        tris.push([v(i + 1, j), v(i + 1, j + 1), v(i, j)]);
                        tris.push([v(i, j + 1), v(i, j), v(i + 1, j + 1)]);
                    }
                }
                (verts, tris)
            }
        };
        let roots = Arc::new(RootMesh {
            triangles: triangles
                .iter()
                .map(|t| [vertices[t[0]], vertices[t[1]], vertices[t[2]]])
                .collect(),
        });
        let keys = (0..triangles.len() as u32).map(ElemKey::root).collect();
        let mesh = Mesh::from_parts(vertices, triangles, keys, roots)?;
        mesh.check_conformity()?;
        for e in 0..mesh.n_elements() {
            mesh.refine(&[e], 2)?.mesh.check_conformity()?;
        }
        Ok(mesh)
    }

    pub fn n_elements(&self) -> usize {
        self.triangles.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn keys(&self) -> &[ElemKey] {
        &self.keys
    }

    pub fn key(&self, elem: usize) -> ElemKey {
        self.keys[elem]
    }

    pub fn edges(&self) -> &[EdgeRecord] {
        &self.edges
    }

    pub fn edge(&self, id: usize) -> Result<&EdgeRecord, MeshError> {
        self.edges.get(id).ok_or(MeshError::EdgeOutOfRange {
            id,
            len: self.edges.len(),
        })
    }

    /// Global edge ids of an element; entry `j` is opposite local vertex `j`.
    pub fn element_edges(&self, elem: usize) -> [usize; 3] {
        self.elem_edges[elem]
    }

    pub fn roots(&self) -> &RootMesh {
        &self.roots
    }

    pub fn generation(&self, elem: usize) -> u32 {
        self.keys[elem].depth()
    }

    pub fn corners(&self, elem: usize) -> [Point; 3] {
        let t = self.triangles[elem];
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    pub fn area(&self, elem: usize) -> f64 {
        signed_area(&self.corners(elem))
    }

    /// Estimator mesh weight `h_T = |T|^{1/2}`.
    pub fn h(&self, elem: usize) -> f64 {
        self.area(elem).sqrt()
    }

    pub fn edge_endpoints(&self, edge: usize) -> [Point; 2] {
        let [a, b] = self.edges[edge].vertices;
        [self.vertices[a], self.vertices[b]]
    }

    pub fn edge_length(&self, edge: usize) -> f64 {
        let [a, b] = self.edge_endpoints(edge);
        dist(a, b)
    }

    /// Unit tangent and unit normal (`tangent = normal` rotated +90 degrees).
    pub fn edge_frame(&self, edge: usize) -> (Point, Point) {
        let [a, b] = self.edge_endpoints(edge);
        let len = dist(a, b);
        let t = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        (t, [t[1], -t[0]])
    }

    /// Orientation signs of an element's edges relative to the global normals.
    pub fn signs(&self, elem: usize) -> [f64; 3] {
        let t = self.triangles[elem];
        std::array::from_fn(|j| {
            if t[(j + 1) % 3] < t[(j + 2) % 3] {
                1.0
            } else {
                -1.0
            }
        })
    }

    pub fn check_element(&self, elem: usize) -> Result<(), MeshError> {
        if elem >= self.n_elements() {
            return Err(MeshError::ElementOutOfRange {
                id: elem,
                len: self.n_elements(),
            });
        }
        Ok(())
    }

    pub fn geometry(&self, elem: usize) -> Result<ElementGeometry, MeshError> {
        self.check_element(elem)?;
        let vertices = self.corners(elem);
        let area = signed_area(&vertices);
        let ids = self.elem_edges[elem];
        let mut edge_lengths = [0.0; 3];
        let mut tangents = [[0.0; 2]; 3];
        let mut normals = [[0.0; 2]; 3];
        for j in 0..3 {
            edge_lengths[j] = self.edge_length(ids[j]);
            let (t, n) = self.edge_frame(ids[j]);
            tangents[j] = t;
            normals[j] = n;
        }
        Ok(ElementGeometry {
            vertices,
            area,
            h: area.sqrt(),
            diam: edge_lengths.iter().copied().fold(0.0, f64::max),
            edge_lengths,
            tangents,
            normals,
            signs: self.signs(elem),
        })
    }

    /// Elements sharing an edge with `elem` (the patch without `elem` itself).
    pub fn patch(&self, elem: usize) -> Result<Vec<usize>, MeshError> {
        self.check_element(elem)?;
        let mut out: Vec<usize> = self.elem_edges[elem]
            .iter()
            .flat_map(|&e| self.edges[e].incidences())
            .map(|inc| inc.elem)
            .filter(|&t| t != elem)
            .collect();
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    /// Elements containing the edge (one or two).
    pub fn edge_patch(&self, edge: usize) -> Result<Vec<usize>, MeshError> {
        Ok(self.edge(edge)?.incidences().map(|i| i.elem).collect())
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_elements()).map(|t| self.area(t)).sum()
    }

    /// Largest `max(diam^2/|T|, |T|/diam^2)` over the mesh.
    pub fn shape_constant(&self) -> f64 {
        (0..self.n_elements())
            .map(|t| {
                let g = self.geometry(t).expect("valid id");
                let r = g.diam * g.diam / g.area;
                r.max(1.0 / r)
            })
            .fold(0.0, f64::max)
    }

    /// Audits conformity: edges carry at most one element per side (enforced
    /// at construction), every single-sided edge lies on the boundary of the
    /// initial triangulation, and the elements tile the domain.
    pub fn check_conformity(&self) -> Result<(), MeshError> {
        let segments = self.roots.boundary_segments();
        for (id, e) in self.edges.iter().enumerate() {
            if !e.is_boundary() {
                continue;
            }
            let [p, q] = self.edge_endpoints(id);
            let on_boundary = segments.iter().any(|s| point_on_segment(p, s) && point_on_segment(q, s));
            if !on_boundary {
                return Err(MeshError::NonConforming(format!(
                    "edge {id} ({p:?}-{q:?}) has one element but is interior (hanging node)"
                )));
            }
        }
        let (area, root) = (self.total_area(), self.roots.area());
        if (area - root).abs() > 1e-12 * root.abs().max(1.0) {
            return Err(MeshError::NonConforming(format!(
                "elements cover area {area}, domain area {root}"
            )));
        }
        Ok(())
    }

    pub fn same_family(&self, other: &Mesh) -> bool {
        Arc::ptr_eq(&self.roots, &other.roots) || *self.roots == *other.roots
    }

    /// For every element of `self`, the element of `coarse` containing it.
    pub fn ancestor_map(&self, coarse: &Mesh) -> Result<Vec<usize>, MeshError> {
        if !self.same_family(coarse) {
            return Err(MeshError::DifferentRoots);
        }
        let lookup: HashMap<ElemKey, usize> = coarse.keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        self.keys
            .iter()
            .map(|k| {
                let mut cur = Some(*k);
                while let Some(c) = cur {
                    if let Some(&i) = lookup.get(&c) {
                        return Ok(i);
                    }
                    cur = c.parent();
                }
                Err(MeshError::NotNested)
            })
            .collect()
    }

    /// Bisects every element in `marked` at least `b` times and closes the
    /// result to a conforming mesh.
    pub fn refine(&self, marked: &[usize], b: u32) -> Result<RefineResult, MeshError> {
        if b == 0 {
            return Err(MeshError::InvalidBisectionCount);
        }
        for &m in marked {
            self.check_element(m)?;
        }
        let mut is_marked = vec![false; self.n_elements()];
        for &m in marked {
            is_marked[m] = true;
        }
        let marked_count = is_marked.iter().filter(|&&m| m).count();
        let mut mesh = self.clone();
        let mut parent: Vec<usize> = (0..self.n_elements()).collect();
        for round in 0..b {
            let targets: Vec<usize> = (0..mesh.n_elements())
                .filter(|&t| {
                    let p = parent[t];
                    is_marked[p] && mesh.keys[t].depth() - self.keys[p].depth() <= round
                })
                .collect();
            if targets.is_empty() {
                break;
            }
            let (next, map) = mesh.bisect_with_closure(&targets)?;
            parent = map.iter().map(|&m| parent[m]).collect();
            mesh = next;
        }
        let mut refined = vec![false; self.n_elements()];
        for (t, &p) in parent.iter().enumerate() {
            if mesh.keys[t] != self.keys[p] {
                refined[p] = true;
            }
        }
        Ok(RefineResult {
            refined_set: (0..self.n_elements()).filter(|&t| refined[t]).collect(),
            marked_count,
            parent,
            mesh,
        })
    }

    /// Bisects every element `b` times.
    pub fn refine_uniform(&self, b: u32) -> Result<Mesh, MeshError> {
        let all: Vec<usize> = (0..self.n_elements()).collect();
        Ok(self.refine(&all, b)?.mesh)
    }

    /// One round of bisection: every target is bisected once and the
    /// refinement edges required for conformity are added by closure. Returns
    /// the new mesh and the fine-to-coarse element map.
    fn bisect_with_closure(&self, targets: &[usize]) -> Result<(Mesh, Vec<usize>), MeshError> {
        let mut marked_edge = vec![false; self.n_edges()];
        let mut stack = Vec::new();
        for &t in targets {
            let e = self.elem_edges[t][0];
            if !marked_edge[e] {
                marked_edge[e] = true;
                stack.push(e);
            }
        }
        // Any element with a marked edge must also have its refinement edge marked.
        while let Some(e) = stack.pop() {
            for inc in self.edges[e].incidences() {
                let re = self.elem_edges[inc.elem][0];
                if !marked_edge[re] {
                    marked_edge[re] = true;
                    stack.push(re);
                }
            }
        }

        let mut vertices = self.vertices.clone();
        let mut midpoint: Vec<Option<usize>> = vec![None; self.n_edges()];
        let mut triangles = Vec::with_capacity(self.n_elements() * 2);
        let mut keys = Vec::with_capacity(self.n_elements() * 2);
        let mut map = Vec::with_capacity(self.n_elements() * 2);
        let mut work: Vec<([usize; 3], [Option<usize>; 3], ElemKey)> = Vec::new();
        for t in 0..self.n_elements() {
            let ids = self.elem_edges[t];
            work.push((self.triangles[t], [Some(ids[0]), Some(ids[1]), Some(ids[2])], self.keys[t]));
            while let Some((tri, eids, key)) = work.pop() {
                match eids[0] {
                    Some(e) if marked_edge[e] => {
                        let m = *midpoint[e].get_or_insert_with(|| {
                            let [p, q] = self.edge_endpoints(e);
                            vertices.push([0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]);
                            vertices.len() - 1
                        });
                        let [a, b, c] = tri;
                        // Pushed in reverse so slot 0 is emitted first.
                        work.push(([m, c, a], [eids[1], None, None], key.child(1)?));
                        work.push(([m, a, b], [eids[2], None, None], key.child(0)?));
                    }
                    _ => {
                        triangles.push(tri);
                        keys.push(key);
                        map.push(t);
                    }
                }
            }
        }
        let mesh = Mesh::from_parts(vertices, triangles, keys, Arc::clone(&self.roots))?;
        Ok((mesh, map))
    }

    /// Smallest common conforming refinement of two meshes of the same family.
    pub fn overlay(&self, other: &Mesh) -> Result<Mesh, MeshError> {
        if !self.same_family(other) {
            return Err(MeshError::DifferentRoots);
        }
        let mut interior: HashSet<ElemKey> = HashSet::new();
        for k in self.keys.iter().chain(other.keys.iter()) {
            let mut cur = k.parent();
            while let Some(p) = cur {
                if !interior.insert(p) {
                    break;
                }
                cur = p.parent();
            }
        }
        let (mut vertices, root_tris) = root_vertices(&self.roots);
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut triangles = Vec::new();
        let mut keys = Vec::new();
        for (r, tri) in root_tris.into_iter().enumerate() {
            let mut work = vec![(tri, ElemKey::root(r as u32))];
            while let Some((tri, key)) = work.pop() {
                if interior.contains(&key) {
                    let [a, b, c] = tri;
                    let m = *midpoint.entry((b.min(c), b.max(c))).or_insert_with(|| {
                        let (p, q) = (vertices[b.min(c)], vertices[b.max(c)]);
                        vertices.push([0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]);
                        vertices.len() - 1
                    });
                    work.push(([m, c, a], key.child(1)?));
                    work.push(([m, a, b], key.child(0)?));
                } else {
                    triangles.push(tri);
                    keys.push(key);
                }
            }
        }
        let mesh = Mesh::from_parts(vertices, triangles, keys, Arc::clone(&self.roots))?;
        mesh.check_conformity()?;
        Ok(mesh)
    }

    /// Element keys in ascending order, for comparing meshes up to numbering.
    pub fn sorted_keys(&self) -> Vec<ElemKey> {
        let mut k = self.keys.clone();
        k.sort_unstable();
        k
    }

    /// Plain-text serialization (`amfem-mesh v1`).
    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::with_capacity(64 * (self.n_vertices() + self.n_elements()));
        s.push_str("amfem-mesh v1\n");
        let _ = writeln!(s, "{}", self.n_vertices());
        for v in &self.vertices {
            let _ = writeln!(s, "{:?} {:?}", v[0], v[1]);
        }
        let _ = writeln!(s, "{}", self.n_elements());
        for (t, k) in self.triangles.iter().zip(&self.keys) {
            let _ = writeln!(s, "{} {} {} {} {}", t[0], t[1], t[2], k.label(), k.depth());
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Mesh, MeshError> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, &str), MeshError> {
            lines.next().map(|(i, l)| (i + 1, l)).ok_or(MeshError::Parse {
                line: 0,
                msg: format!("unexpected end of input, expected {what}"),
            })
        };
        let perr = |line: usize, msg: &str| MeshError::Parse {
            line,
            msg: msg.to_string(),
        };
        let (ln, header) = next("header")?;
        if header.trim() != "amfem-mesh v1" {
            return Err(perr(ln, "missing `amfem-mesh v1` header"));
        }
        let (ln, nv) = next("vertex count")?;
        let nv: usize = nv.trim().parse().map_err(|_| perr(ln, "bad vertex count"))?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (ln, l) = next("vertex")?;
            let xy: Vec<f64> = l
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| perr(ln, "bad coordinate"))?;
            if xy.len() != 2 {
                return Err(perr(ln, "expected two coordinates"));
            }
            vertices.push([xy[0], xy[1]]);
        }
        let (ln, nt) = next("triangle count")?;
        let nt: usize = nt.trim().parse().map_err(|_| perr(ln, "bad triangle count"))?;
        let mut triangles = Vec::with_capacity(nt);
        let mut keys = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (ln, l) = next("triangle")?;
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 5 {
                return Err(perr(ln, "expected `a b c label generation`"));
            }
            let mut tri = [0usize; 3];
            for j in 0..3 {
                tri[j] = f[j].parse().map_err(|_| perr(ln, "bad vertex index"))?;
                if tri[j] >= nv {
                    return Err(perr(ln, "vertex index out of range"));
                }
            }
            let key = ElemKey::parse_label(f[3]).ok_or_else(|| perr(ln, "bad element label"))?;
            let gen: u32 = f[4].parse().map_err(|_| perr(ln, "bad generation"))?;
            if gen != key.depth() {
                return Err(perr(ln, "generation does not match label"));
            }
            triangles.push(tri);
            keys.push(key);
        }
        let roots = reconstruct_roots(&vertices, &triangles, &keys)?;
        Mesh::from_parts(vertices, triangles, keys, Arc::new(roots))
    }
}

fn point_on_segment(p: Point, s: &[Point; 2]) -> bool {
    let (a, b) = (s[0], s[1]);
    let len2 = (b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2);
    let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    if cross.abs() > 1e-12 * len2 {
        return false;
    }
    let t = ((p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1])) / len2;
    (-1e-12..=1.0 + 1e-12).contains(&t)
}

/// Deduplicated vertex list and index triangles of the root triangulation.
fn root_vertices(roots: &RootMesh) -> (Vec<Point>, Vec<[usize; 3]>) {
    let mut vertices: Vec<Point> = Vec::new();
    let mut index: HashMap<[u64; 2], usize> = HashMap::new();
    let tris = roots
        .triangles
        .iter()
        .map(|t| {
            std::array::from_fn(|j| {
                let p = t[j];
                *index.entry([p[0].to_bits(), p[1].to_bits()]).or_insert_with(|| {
                    vertices.push(p);
                    vertices.len() - 1
                })
            })
        })
        .collect();
    (vertices, tris)
}

/// Rebuilds the initial triangulation from the leaves of a bisection forest by
/// merging sibling pairs: children `(m, a, b)` and `(m, c, a)` came from `(a, b, c)`.
fn reconstruct_roots(
    vertices: &[Point],
    triangles: &[[usize; 3]],
    keys: &[ElemKey],
) -> Result<RootMesh, MeshError> {
    let mut nodes: HashMap<ElemKey, [usize; 3]> = keys.iter().copied().zip(triangles.iter().copied()).collect();
    if nodes.len() != keys.len() {
        return Err(MeshError::NonConforming("duplicate element labels".into()));
    }
    let max_depth = keys.iter().map(|k| k.depth()).max().unwrap_or(0);
    for depth in (1..=max_depth).rev() {
        let level: Vec<ElemKey> = nodes.keys().filter(|k| k.depth() == depth).copied().collect();
        for k in level {
            if k.slot() != Some(0) {
                continue;
            }
            let sib = k.parent().and_then(|p| p.child(1).ok()).expect("depth > 0");
            let (c0, c1) = match (nodes.get(&k), nodes.get(&sib)) {
                (Some(a), Some(b)) => (*a, *b),
                _ => return Err(MeshError::NonConforming(format!("element {} has no sibling", k.label()))),
            };
            let parent = k.parent().expect("depth > 0");
            if nodes.insert(parent, [c0[1], c0[2], c1[1]]).is_some() {
                return Err(MeshError::NonConforming(format!("overlapping element {}", parent.label())));
            }
            nodes.remove(&k);
            nodes.remove(&sib);
        }
        if nodes.keys().any(|k| k.depth() == depth) {
            return Err(MeshError::NonConforming("incomplete bisection forest".into()));
        }
    }
    let mut roots: Vec<(u32, [usize; 3])> = nodes.into_iter().map(|(k, t)| (k.root, t)).collect();
    roots.sort_unstable_by_key(|r| r.0);
    if roots.iter().enumerate().any(|(i, r)| r.0 as usize != i) {
        return Err(MeshError::NonConforming("root ids are not contiguous".into()));
    }
    Ok(RootMesh {
        triangles: roots
            .into_iter()
            .map(|(_, t)| [vertices[t[0]], vertices[t[1]], vertices[t[2]]])
            .collect(),
    })
}
