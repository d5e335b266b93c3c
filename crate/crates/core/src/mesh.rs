//! Conforming quadrilateral and triangular partitions with (possibly curved)
//! isoparametric element maps, edge classification and crease flags.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{LdgError, Result};
use crate::reference::{LagrangeBasis, QuadratureRule, Shape};

/// Classification of an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeKind {
    Interior,
    Dirichlet,
    Free,
}

impl EdgeKind {
    /// Interior and Dirichlet edges carry jumps and averages.
    pub fn is_active(self) -> bool {
        !matches!(self, EdgeKind::Free)
    }
}

/// Which boundary edges are clamped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundarySelector {
    None,
    Left,
    Right,
    Bottom,
    Top,
    All,
}

impl BoundarySelector {
    /// Decide from the edge midpoint and outward normal, relative to the mesh bounding box.
    pub fn matches(self, mid: [f64; 2], normal: [f64; 2], bbox: [f64; 4]) -> bool {
        let tol = 1e-9 * (1.0 + (bbox[1] - bbox[0]).abs() + (bbox[3] - bbox[2]).abs());
        match self {
            BoundarySelector::None => false,
            BoundarySelector::All => true,
            BoundarySelector::Left => (mid[0] - bbox[0]).abs() < tol && normal[0] < -0.5,
            BoundarySelector::Right => (mid[0] - bbox[1]).abs() < tol && normal[0] > 0.5,
            BoundarySelector::Bottom => (mid[1] - bbox[2]).abs() < tol && normal[1] < -0.5,
            BoundarySelector::Top => (mid[1] - bbox[3]).abs() < tol && normal[1] > 0.5,
        }
    }
}

/// One edge of the skeleton.
///
/// `elements[0]` is the "minus" side: the lower element index for interior
/// edges, the only element for boundary edges. The stored normal points away
/// from the minus side (outward on the boundary).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Edge {
    pub vertices: [usize; 2],
    pub elements: [usize; 2],
    pub local: [usize; 2],
    pub num_elements: usize,
    pub normal: [f64; 2],
    pub kind: EdgeKind,
    pub crease: bool,
    /// Edge diameter h_e.
    pub h: f64,
}

impl Edge {
    pub fn is_boundary(&self) -> bool {
        self.num_elements == 1
    }

    pub fn sides(&self) -> &[usize] {
        &self.elements[..self.num_elements]
    }
}

/// Result of evaluating a geometric map at a reference point.
#[derive(Debug, Clone, Copy)]
pub struct MapEval {
    pub x: [f64; 2],
    /// `jac[i][j] = d x_i / d xhat_j`
    pub jac: [[f64; 2]; 2],
    /// `d2[i][a][b] = d^2 x_i / d xhat_a d xhat_b`
    pub d2: [[[f64; 2]; 2]; 2],
}

impl MapEval {
    pub fn det(&self) -> f64 {
        self.jac[0][0] * self.jac[1][1] - self.jac[0][1] * self.jac[1][0]
    }

    pub fn inverse_jacobian(&self) -> [[f64; 2]; 2] {
        let d = self.det();
        [
            [self.jac[1][1] / d, -self.jac[0][1] / d],
            [-self.jac[1][0] / d, self.jac[0][0] / d],
        ]
    }
}

/// Geometric map of one element: nodal coordinates of a Lagrange map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometricMap {
    pub nodes: Vec<[f64; 2]>,
}

/// A conforming mesh. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Mesh {
    shape: Shape,
    geometry_degree: usize,
    geometry_basis: LagrangeBasis,
    vertices: Vec<[f64; 2]>,
    elements: Vec<Vec<usize>>,
    maps: Vec<GeometricMap>,
    edges: Vec<Edge>,
    element_edges: Vec<Vec<usize>>,
    region: Vec<u32>,
    areas: Vec<f64>,
    diameters: Vec<f64>,
    barycenters: Vec<[f64; 2]>,
}

/// Raw input for [`Mesh::from_parts`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeshParts {
    pub shape: Shape,
    pub geometry_degree: usize,
    pub vertices: Vec<[f64; 2]>,
    /// Counterclockwise vertex indices per element.
    pub elements: Vec<Vec<usize>>,
    pub maps: Vec<GeometricMap>,
    pub region: Vec<u32>,
    /// Sorted vertex pairs of crease edges.
    pub crease_edges: Vec<[usize; 2]>,
    /// Sorted vertex pairs of Dirichlet edges.
    pub dirichlet_edges: Vec<[usize; 2]>,
}

impl Mesh {
    /// Assemble a mesh from elements and maps, building the edge structure.
    pub fn from_parts(parts: MeshParts) -> Result<Mesh> {
        let MeshParts { shape, geometry_degree, vertices, elements, maps, region, crease_edges, dirichlet_edges } = parts;
        if elements.is_empty() {
            return Err(LdgError::InvalidMesh("no elements".into()));
        }
        if maps.len() != elements.len() || region.len() != elements.len() {
            return Err(LdgError::InvalidMesh("per-element arrays have mismatched lengths".into()));
        }
        let geometry_basis = LagrangeBasis::new(shape, geometry_degree);
        for (e, m) in maps.iter().enumerate() {
            if m.nodes.len() != geometry_basis.len() {
                return Err(LdgError::InvalidMesh(format!("element {e}: wrong number of map nodes")));
            }
        }
        let nv = shape.num_vertices();
        let mut lookup: HashMap<[usize; 2], usize> = HashMap::new();
        let mut edges: Vec<Edge> = Vec::new();
        let mut element_edges = vec![vec![usize::MAX; nv]; elements.len()];
        for (e, verts) in elements.iter().enumerate() {
            if verts.len() != nv {
                return Err(LdgError::InvalidMesh(format!("element {e}: expected {nv} vertices")));
            }
            for l in 0..nv {
                let a = verts[l];
                let b = verts[(l + 1) % nv];
                let key = if a < b { [a, b] } else { [b, a] };
                match lookup.get(&key) {
                    Some(&id) => {
                        let edge = &mut edges[id];
                        if edge.num_elements == 2 {
                            return Err(LdgError::InvalidMesh(format!("edge {key:?} shared by more than two elements")));
                        }
                        edge.elements[1] = e;
                        edge.local[1] = l;
                        edge.num_elements = 2;
                        element_edges[e][l] = id;
                    }
                    None => {
                        let id = edges.len();
                        lookup.insert(key, id);
                        edges.push(Edge {
                            vertices: [a, b],
                            elements: [e, usize::MAX],
                            local: [l, usize::MAX],
                            num_elements: 1,
                            normal: [0.0; 2],
                            kind: EdgeKind::Free,
                            crease: false,
                            h: 0.0,
                        });
                        element_edges[e][l] = id;
                    }
                }
            }
        }
        let crease_set: std::collections::HashSet<[usize; 2]> = crease_edges.iter().copied().collect();
        let dirichlet_set: std::collections::HashSet<[usize; 2]> = dirichlet_edges.iter().copied().collect();

        let mut mesh = Mesh {
            shape,
            geometry_degree,
            geometry_basis,
            vertices,
            elements,
            maps,
            edges,
            element_edges,
            region,
            areas: Vec::new(),
            diameters: Vec::new(),
            barycenters: Vec::new(),
        };

        for id in 0..mesh.edges.len() {
            let (minus, lminus) = (mesh.edges[id].elements[0], mesh.edges[id].local[0]);
            let key = {
                let [a, b] = mesh.edges[id].vertices;
                if a < b {
                    [a, b]
                } else {
                    [b, a]
                }
            };
            let normal = mesh.edge_normal_at(minus, lminus, 0.5);
            let p0 = mesh.map(minus, shape.edge_point(lminus, 0.0)).x;
            let p1 = mesh.map(minus, shape.edge_point(lminus, 1.0)).x;
            let edge = &mut mesh.edges[id];
            edge.normal = normal;
            edge.h = ((p1[0] - p0[0]).powi(2) + (p1[1] - p0[1]).powi(2)).sqrt();
            edge.crease = crease_set.contains(&key);
            edge.kind = if edge.num_elements == 2 {
                EdgeKind::Interior
            } else if dirichlet_set.contains(&key) {
                EdgeKind::Dirichlet
            } else {
                EdgeKind::Free
            };
            if edge.crease && edge.num_elements != 2 {
                return Err(LdgError::InvalidMesh(format!("crease edge {key:?} is on the boundary")));
            }
        }

        let rule = QuadratureRule::element(shape, 4);
        let mut areas = Vec::with_capacity(mesh.num_elements());
        let mut barycenters = Vec::with_capacity(mesh.num_elements());
        let mut diameters = Vec::with_capacity(mesh.num_elements());
        for e in 0..mesh.num_elements() {
            let mut area = 0.0;
            for (p, w) in rule.points.iter().zip(&rule.weights) {
                let m = mesh.map(e, *p);
                let det = m.det();
                if det <= 0.0 {
                    return Err(LdgError::InvalidMesh(format!("element {e}: non-positive Jacobian {det:e}")));
                }
                area += w * det;
            }
            areas.push(area);
            barycenters.push(mesh.map(e, shape.barycenter()).x);
            diameters.push(mesh.element_diameter_sampled(e));
        }
        mesh.areas = areas;
        mesh.barycenters = barycenters;
        mesh.diameters = diameters;
        Ok(mesh)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn geometry_degree(&self) -> usize {
        self.geometry_degree
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn element_vertices(&self, e: usize) -> &[usize] {
        &self.elements[e]
    }

    pub fn geometric_map(&self, e: usize) -> &GeometricMap {
        &self.maps[e]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, id: usize) -> &Edge {
        &self.edges[id]
    }

    pub fn element_edges(&self, e: usize) -> &[usize] {
        &self.element_edges[e]
    }

    pub fn region(&self, e: usize) -> u32 {
        self.region[e]
    }

    pub fn has_crease(&self) -> bool {
        self.edges.iter().any(|e| e.crease)
    }

    pub fn has_dirichlet(&self) -> bool {
        self.edges.iter().any(|e| e.kind == EdgeKind::Dirichlet)
    }

    /// Evaluate the geometric map of element `e` at reference point `p`.
    pub fn map(&self, e: usize, p: [f64; 2]) -> MapEval {
        let ev = self.geometry_basis.eval(p);
        let nodes = &self.maps[e].nodes;
        let mut out = MapEval { x: [0.0; 2], jac: [[0.0; 2]; 2], d2: [[[0.0; 2]; 2]; 2] };
        for (i, node) in nodes.iter().enumerate() {
            for c in 0..2 {
                out.x[c] += node[c] * ev.values[i];
                for a in 0..2 {
                    out.jac[c][a] += node[c] * ev.grads[i][a];
                    for b in 0..2 {
                        out.d2[c][a][b] += node[c] * ev.hessians[i][a][b];
                    }
                }
            }
        }
        out
    }

    /// Unit normal of local edge `local` of element `e` at parameter `t`,
    /// pointing out of `e`.
    pub fn edge_normal_at(&self, e: usize, local: usize, t: f64) -> [f64; 2] {
        let v = self.shape.vertices();
        let nv = v.len();
        let dir = [v[(local + 1) % nv][0] - v[local][0], v[(local + 1) % nv][1] - v[local][1]];
        let m = self.map(e, self.shape.edge_point(local, t));
        let tx = m.jac[0][0] * dir[0] + m.jac[0][1] * dir[1];
        let ty = m.jac[1][0] * dir[0] + m.jac[1][1] * dir[1];
        let len = (tx * tx + ty * ty).sqrt();
        [ty / len, -tx / len]
    }

    /// Length of the physical tangent `|d x / dt|` of a local edge at `t`.
    pub fn edge_speed(&self, e: usize, local: usize, t: f64) -> f64 {
        let v = self.shape.vertices();
        let nv = v.len();
        let dir = [v[(local + 1) % nv][0] - v[local][0], v[(local + 1) % nv][1] - v[local][1]];
        let m = self.map(e, self.shape.edge_point(local, t));
        let tx = m.jac[0][0] * dir[0] + m.jac[0][1] * dir[1];
        let ty = m.jac[1][0] * dir[0] + m.jac[1][1] * dir[1];
        (tx * tx + ty * ty).sqrt()
    }

    /// Reference point on element `side` (0 = minus, 1 = plus) of edge `id`
    /// corresponding to the global edge parameter `s` (from `vertices[0]` to `vertices[1]`).
    pub fn edge_reference_point(&self, id: usize, side: usize, s: f64) -> [f64; 2] {
        let l = self.edges[id].local[side];
        self.shape.edge_point(l, self.edge_local_t(id, side, s))
    }

    /// Local edge parameter on element `side` for the global parameter `s`.
    pub fn edge_local_t(&self, id: usize, side: usize, s: f64) -> f64 {
        let edge = &self.edges[id];
        let e = edge.elements[side];
        if self.elements[e][edge.local[side]] == edge.vertices[0] {
            s
        } else {
            1.0 - s
        }
    }

    pub fn area(&self, e: usize) -> f64 {
        self.areas[e]
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn barycenter(&self, e: usize) -> [f64; 2] {
        self.barycenters[e]
    }

    /// Element diameter h_T.
    pub fn diameter(&self, e: usize) -> f64 {
        self.diameters[e]
    }

    /// h = max h_T.
    pub fn h_max(&self) -> f64 {
        self.diameters.iter().cloned().fold(0.0, f64::max)
    }

    /// h_min = min h_T.
    pub fn h_min(&self) -> f64 {
        self.diameters.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    /// Bounding box `[xmin, xmax, ymin, ymax]` of the vertices.
    pub fn bounding_box(&self) -> [f64; 4] {
        let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
        for v in &self.vertices {
            b[0] = b[0].min(v[0]);
            b[1] = b[1].max(v[0]);
            b[2] = b[2].min(v[1]);
            b[3] = b[3].max(v[1]);
        }
        b
    }

    /// Ratio of longest to shortest edge over all elements (shape-regularity diagnostic).
    pub fn max_aspect_ratio(&self) -> f64 {
        (0..self.num_elements())
            .map(|e| {
                let hs: Vec<f64> = self.element_edges[e].iter().map(|&id| self.edges[id].h).collect();
                let mx = hs.iter().cloned().fold(0.0, f64::max);
                let mn = hs.iter().cloned().fold(f64::INFINITY, f64::min);
                mx / mn
            })
            .fold(0.0, f64::max)
    }

    fn element_diameter_sampled(&self, e: usize) -> f64 {
        let samples = if self.geometry_degree == 1 { 1 } else { 8 };
        let mut pts = Vec::new();
        for l in 0..self.shape.num_vertices() {
            for s in 0..samples {
                pts.push(self.map(e, self.shape.edge_point(l, s as f64 / samples as f64)).x);
            }
        }
        let mut d: f64 = 0.0;
        for i in 0..pts.len() {
            for j in (i + 1)..pts.len() {
                d = d.max(((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt());
            }
        }
        d
    }

    /// Check all structural invariants, returning the first violation.
    pub fn validate(&self) -> Result<()> {
        let rule = QuadratureRule::element(self.shape, 5);
        for e in 0..self.num_elements() {
            for p in &rule.points {
                if self.map(e, *p).det() <= 0.0 {
                    return Err(LdgError::InvalidMesh(format!("element {e}: Jacobian not positive")));
                }
            }
        }
        let h = self.h_max();
        for (id, edge) in self.edges.iter().enumerate() {
            let n = (edge.normal[0].powi(2) + edge.normal[1].powi(2)).sqrt();
            if (n - 1.0).abs() > 1e-14 {
                return Err(LdgError::InvalidMesh(format!("edge {id}: normal not unit ({n})")));
            }
            if edge.h > h * (1.0 + 1e-12) {
                return Err(LdgError::InvalidMesh(format!("edge {id}: h_e > h")));
            }
            if edge.num_elements == 2 {
                if edge.elements[0] >= edge.elements[1] {
                    return Err(LdgError::InvalidMesh(format!("edge {id}: minus side is not the lower index")));
                }
                for k in 0..=6 {
                    let s = k as f64 / 6.0;
                    let a = self.map(edge.elements[0], self.edge_reference_point(id, 0, s)).x;
                    let b = self.map(edge.elements[1], self.edge_reference_point(id, 1, s)).x;
                    let d = (a[0] - b[0]).abs().max((a[1] - b[1]).abs());
                    if d > 1e-12 {
                        return Err(LdgError::InvalidMesh(format!("edge {id}: traces differ by {d:e}")));
                    }
                }
                // the normal of the minus side must oppose the plus side's outward normal
                let nm = self.edge_normal_at(edge.elements[0], edge.local[0], 0.5);
                let np = self.edge_normal_at(edge.elements[1], edge.local[1], 0.5);
                if (nm[0] + np[0]).abs() > 1e-10 || (nm[1] + np[1]).abs() > 1e-10 {
                    return Err(LdgError::InvalidMesh(format!("edge {id}: adjacent orientations do not oppose")));
                }
            } else if edge.crease {
                return Err(LdgError::InvalidMesh(format!("edge {id}: crease on boundary")));
            }
        }
        if self.h_min() <= 0.0 {
            return Err(LdgError::InvalidMesh("h_min must be positive".into()));
        }
        Ok(())
    }

    /// Plain-text node/element/edge listing.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# nodes {}", self.vertices.len());
        for (i, v) in self.vertices.iter().enumerate() {
            let _ = writeln!(s, "{i} {:.16e} {:.16e}", v[0], v[1]);
        }
        let _ = writeln!(s, "# elements {}", self.elements.len());
        for (e, verts) in self.elements.iter().enumerate() {
            let list: Vec<String> = verts.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{e} {} region={} area={:.16e}", list.join(" "), self.region[e], self.areas[e]);
        }
        let _ = writeln!(s, "# edges {}", self.edges.len());
        for (i, edge) in self.edges.iter().enumerate() {
            let plus = if edge.num_elements == 2 { edge.elements[1].to_string() } else { "-".into() };
            let _ = writeln!(
                s,
                "{i} {} {} minus={} plus={} kind={:?} crease={} n=({:.16e},{:.16e}) h={:.16e}",
                edge.vertices[0], edge.vertices[1], edge.elements[0], plus, edge.kind, edge.crease,
                edge.normal[0], edge.normal[1], edge.h
            );
        }
        s
    }

    /// Raw parts, sufficient to rebuild an identical mesh.
    pub fn to_parts(&self) -> MeshParts {
        let mut crease_edges = Vec::new();
        let mut dirichlet_edges = Vec::new();
        for edge in &self.edges {
            let [a, b] = edge.vertices;
            let key = if a < b { [a, b] } else { [b, a] };
            if edge.crease {
                crease_edges.push(key);
            }
            if edge.kind == EdgeKind::Dirichlet {
                dirichlet_edges.push(key);
            }
        }
        MeshParts {
            shape: self.shape,
            geometry_degree: self.geometry_degree,
            vertices: self.vertices.clone(),
            elements: self.elements.clone(),
            maps: self.maps.clone(),
            region: self.region.clone(),
            crease_edges,
            dirichlet_edges,
        }
    }
}

fn sorted(a: usize, b: usize) -> [usize; 2] {
    if a < b {
        [a, b]
    } else {
        [b, a]
    }
}

fn check_box(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Result<()> {
    if !(xmin < xmax) || !(ymin < ymax) {
        return Err(LdgError::InvalidMesh(format!("degenerate domain ({xmin},{xmax})x({ymin},{ymax})")));
    }
    Ok(())
}

/// Select the Dirichlet edges of a freshly built mesh by outward normal and midpoint.
fn select_dirichlet(parts: &mut MeshParts, selector: BoundarySelector) -> Result<()> {
    if selector == BoundarySelector::None {
        return Ok(());
    }
    let probe = Mesh::from_parts(MeshParts { dirichlet_edges: Vec::new(), ..parts.clone() })?;
    let bbox = probe.bounding_box();
    for (id, edge) in probe.edges().iter().enumerate() {
        if edge.is_boundary() {
            let mid = probe.map(edge.elements[0], probe.edge_reference_point(id, 0, 0.5)).x;
            if selector.matches(mid, edge.normal, bbox) {
                parts.dirichlet_edges.push(sorted(edge.vertices[0], edge.vertices[1]));
            }
        }
    }
    Ok(())
}

/// Uniform axis-aligned quadrilateral mesh of `(xmin,xmax) x (ymin,ymax)`.
pub fn build_rect_mesh(
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
    nx: usize,
    ny: usize,
    dirichlet: BoundarySelector,
) -> Result<Mesh> {
    check_box(xmin, xmax, ymin, ymax)?;
    if nx == 0 || ny == 0 {
        return Err(LdgError::InvalidMesh("nx and ny must be at least 1".into()));
    }
    let dx = (xmax - xmin) / nx as f64;
    let dy = (ymax - ymin) / ny as f64;
    let vid = |i: usize, j: usize| j * (nx + 1) + i;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            let x = if i == nx { xmax } else { xmin + i as f64 * dx };
            let y = if j == ny { ymax } else { ymin + j as f64 * dy };
            vertices.push([x, y]);
        }
    }
    let mut elements = Vec::with_capacity(nx * ny);
    let mut maps = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1));
            elements.push(vec![a, b, c, d]);
            // Q1 nodes in tensor order
            maps.push(GeometricMap { nodes: vec![vertices[a], vertices[b], vertices[d], vertices[c]] });
        }
    }
    let mut parts = MeshParts {
        shape: Shape::Quad,
        geometry_degree: 1,
        vertices,
        region: vec![0; elements.len()],
        elements,
        maps,
        crease_edges: Vec::new(),
        dirichlet_edges: Vec::new(),
    };
    select_dirichlet(&mut parts, dirichlet)?;
    Mesh::from_parts(parts)
}

/// Uniform triangle mesh: each rectangle cell split along its `(i,j)-(i+1,j+1)` diagonal.
pub fn build_tri_rect_mesh(
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
    nx: usize,
    ny: usize,
    dirichlet: BoundarySelector,
) -> Result<Mesh> {
    check_box(xmin, xmax, ymin, ymax)?;
    if nx == 0 || ny == 0 {
        return Err(LdgError::InvalidMesh("nx and ny must be at least 1".into()));
    }
    let dx = (xmax - xmin) / nx as f64;
    let dy = (ymax - ymin) / ny as f64;
    let vid = |i: usize, j: usize| j * (nx + 1) + i;
    let mut vertices = Vec::new();
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push([xmin + i as f64 * dx, ymin + j as f64 * dy]);
        }
    }
    let mut elements = Vec::new();
    let mut maps = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1));
            for tri in [[a, b, c], [a, c, d]] {
                elements.push(tri.to_vec());
                maps.push(GeometricMap { nodes: tri.iter().map(|&v| vertices[v]).collect() });
            }
        }
    }
    let mut parts = MeshParts {
        shape: Shape::Tri,
        geometry_degree: 1,
        vertices,
        region: vec![0; elements.len()],
        elements,
        maps,
        crease_edges: Vec::new(),
        dirichlet_edges: Vec::new(),
    };
    select_dirichlet(&mut parts, dirichlet)?;
    Mesh::from_parts(parts)
}

/// The quadratic `y = c0 + c1 x + c2 x^2` through three points with distinct abscissae.
pub fn quadratic_through(points: [[f64; 2]; 3]) -> Result<[f64; 3]> {
    let m = nalgebra::Matrix3::from_fn(|r, c| points[r][0].powi(c as i32));
    let rhs = nalgebra::Vector3::new(points[0][1], points[1][1], points[2][1]);
    let lu = m.lu();
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| LdgError::InvalidArgument("crease points must have distinct abscissae".into()))?;
    Ok([sol[0], sol[1], sol[2]])
}

/// Quadrilateral mesh with a biquadratic geometry whose horizontal mesh line
/// `j*` coincides with the parabola through `p0`, `apex`, `p1`.
///
/// Mesh lines below the crease are vertical scalings of the parabola towards
/// `ymin`; lines above interpolate between the parabola and `ymax`. Vertical
/// lines stay straight. Elements below the crease get region 0, above region 1.
pub fn build_crease_mesh(
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
    crease: [[f64; 2]; 3],
    nx: usize,
    ny: usize,
) -> Result<Mesh> {
    check_box(xmin, xmax, ymin, ymax)?;
    if nx == 0 || ny < 2 {
        return Err(LdgError::InvalidMesh("crease mesh needs nx >= 1 and ny >= 2".into()));
    }
    let [p0, p1, apex] = crease;
    let tol = 1e-12 * (xmax - xmin);
    if (p0[0] - xmin).abs() > tol || (p1[0] - xmax).abs() > tol {
        return Err(LdgError::InvalidArgument("crease end points must lie on x = xmin and x = xmax".into()));
    }
    if !(apex[0] > xmin && apex[0] < xmax) {
        return Err(LdgError::InvalidArgument("crease apex must lie strictly between the lateral sides".into()));
    }
    let coef = quadratic_through([p0, apex, p1])?;
    let curve = |x: f64| coef[0] + coef[1] * x + coef[2] * x * x;
    // extreme values on [xmin, xmax]
    let mut extremes = vec![curve(xmin), curve(xmax)];
    if coef[2] != 0.0 {
        let xv = -coef[1] / (2.0 * coef[2]);
        if xv > xmin && xv < xmax {
            extremes.push(curve(xv));
        }
    }
    if extremes.iter().any(|&y| y <= ymin || y >= ymax) {
        return Err(LdgError::InvalidArgument("crease leaves the domain".into()));
    }
    // mean height of the crease over the x-range
    let mean = coef[0]
        + coef[1] * 0.5 * (xmin + xmax)
        + coef[2] * (xmax.powi(3) - xmin.powi(3)) / (3.0 * (xmax - xmin));
    let jstar = (((mean - ymin) / (ymax - ymin)) * ny as f64).round().clamp(1.0, (ny - 1) as f64) as usize;
    let line = |j: usize, x: f64| -> f64 {
        let c = curve(x);
        if j <= jstar {
            ymin + (j as f64 / jstar as f64) * (c - ymin)
        } else {
            c + ((j - jstar) as f64 / (ny - jstar) as f64) * (ymax - c)
        }
    };
    let dx = (xmax - xmin) / nx as f64;
    let xs: Vec<f64> = (0..=nx).map(|i| if i == nx { xmax } else { xmin + i as f64 * dx }).collect();
    let vid = |i: usize, j: usize| j * (nx + 1) + i;
    let mut vertices = Vec::new();
    for j in 0..=ny {
        for &x in &xs {
            vertices.push([x, line(j, x)]);
        }
    }
    let basis = LagrangeBasis::new(Shape::Quad, 2);
    let mut elements = Vec::new();
    let mut maps = Vec::new();
    let mut region = Vec::new();
    let mut crease_edges = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1));
            elements.push(vec![a, b, c, d]);
            let nodes = basis
                .nodes()
                .iter()
                .map(|r| {
                    let x = xs[i] + r[0] * (xs[i + 1] - xs[i]);
                    let x = if r[0] == 0.0 { xs[i] } else if r[0] == 1.0 { xs[i + 1] } else { x };
                    let y = (1.0 - r[1]) * line(j, x) + r[1] * line(j + 1, x);
                    let y = if r[1] == 0.0 { line(j, x) } else if r[1] == 1.0 { line(j + 1, x) } else { y };
                    [x, y]
                })
                .collect();
            maps.push(GeometricMap { nodes });
            region.push(if j < jstar { 0 } else { 1 });
            if j == jstar {
                crease_edges.push(sorted(a, b));
            }
        }
    }
    Mesh::from_parts(MeshParts {
        shape: Shape::Quad,
        geometry_degree: 2,
        vertices,
        elements,
        maps,
        region,
        crease_edges,
        dirichlet_edges: Vec::new(),
    })
}

/// Equilateral triangle with vertices `(0,0)`, `(1,0)`, `(1/2, sqrt(3)/2)`,
/// partitioned into three congruent trapezoids (a pinwheel on the
/// one-third lattice), each subdivided into `n x n` bilinear quadrilaterals.
pub fn build_trapezoid_triangle_mesh(n: usize, dirichlet: BoundarySelector) -> Result<Mesh> {
    if n == 0 {
        return Err(LdgError::InvalidMesh("subdivision must be at least 1".into()));
    }
    let a = [0.0, 0.0];
    let b = [1.0, 0.0];
    let c = [0.5, 3f64.sqrt() / 2.0];
    let lattice = |i: f64, j: f64| -> [f64; 2] {
        [a[0] + i / 3.0 * (b[0] - a[0]) + j / 3.0 * (c[0] - a[0]), a[1] + i / 3.0 * (b[1] - a[1]) + j / 3.0 * (c[1] - a[1])]
    };
    let trapezoids = [
        [lattice(0.0, 0.0), lattice(2.0, 0.0), lattice(1.0, 1.0), lattice(0.0, 1.0)],
        [lattice(3.0, 0.0), lattice(1.0, 2.0), lattice(1.0, 1.0), lattice(2.0, 0.0)],
        [lattice(0.0, 3.0), lattice(0.0, 1.0), lattice(1.0, 1.0), lattice(1.0, 2.0)],
    ];
    let mut vertices: Vec<[f64; 2]> = Vec::new();
    let mut index: HashMap<(i64, i64), usize> = HashMap::new();
    let mut vertex = |p: [f64; 2]| -> usize {
        let key = ((p[0] * 1e9).round() as i64, (p[1] * 1e9).round() as i64);
        *index.entry(key).or_insert_with(|| {
            vertices.push(p);
            vertices.len() - 1
        })
    };
    let mut elements = Vec::new();
    let mut maps = Vec::new();
    for q in &trapezoids {
        let bil = |u: f64, v: f64| -> [f64; 2] {
            let w = [(1.0 - u) * (1.0 - v), u * (1.0 - v), u * v, (1.0 - u) * v];
            [
                w[0] * q[0][0] + w[1] * q[1][0] + w[2] * q[2][0] + w[3] * q[3][0],
                w[0] * q[0][1] + w[1] * q[1][1] + w[2] * q[2][1] + w[3] * q[3][1],
            ]
        };
        let nf = n as f64;
        for j in 0..n {
            for i in 0..n {
                let corners = [
                    bil(i as f64 / nf, j as f64 / nf),
                    bil((i + 1) as f64 / nf, j as f64 / nf),
                    bil((i + 1) as f64 / nf, (j + 1) as f64 / nf),
                    bil(i as f64 / nf, (j + 1) as f64 / nf),
                ];
                let ids: Vec<usize> = corners.iter().map(|p| vertex(*p)).collect();
                elements.push(ids.clone());
                maps.push(GeometricMap { nodes: vec![corners[0], corners[1], corners[3], corners[2]] });
            }
        }
    }
    // use the shared vertex coordinates inside the maps so traces match bitwise
    for (e, ids) in elements.iter().enumerate() {
        maps[e].nodes = vec![vertices[ids[0]], vertices[ids[1]], vertices[ids[3]], vertices[ids[2]]];
    }
    let mut parts = MeshParts {
        shape: Shape::Quad,
        geometry_degree: 1,
        vertices,
        region: vec![0; elements.len()],
        elements,
        maps,
        crease_edges: Vec::new(),
        dirichlet_edges: Vec::new(),
    };
    select_dirichlet(&mut parts, dirichlet)?;
    Mesh::from_parts(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_mesh_counts_and_clamped_side() {
        let m = build_rect_mesh(-5.0, 5.0, -2.0, 2.0, 32, 8, BoundarySelector::Left).unwrap();
        assert_eq!(m.num_elements(), 256);
        let dir: Vec<&Edge> = m.edges().iter().filter(|e| e.kind == EdgeKind::Dirichlet).collect();
        assert_eq!(dir.len(), 8);
        for e in dir {
            assert!((m.vertices()[e.vertices[0]][0] + 5.0).abs() < 1e-14);
            assert_eq!(e.normal, [-1.0, 0.0]);
        }
        m.validate().unwrap();
    }

    #[test]
    fn single_cell_mesh() {
        let m = build_rect_mesh(0.0, 1.0, 0.0, 1.0, 1, 1, BoundarySelector::None).unwrap();
        assert_eq!(m.num_elements(), 1);
        assert_eq!(m.edges().len(), 4);
        assert!(m.edges().iter().all(|e| e.kind == EdgeKind::Free));
        assert_eq!(m.barycenter(0), [0.5, 0.5]);
        assert!((m.area(0) - 1.0).abs() < 1e-15);
        assert!((m.diameter(0) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn two_cell_mesh_has_one_interior_edge_pointing_right() {
        let m = build_rect_mesh(0.0, 2.0, 0.0, 1.0, 2, 1, BoundarySelector::None).unwrap();
        let interior: Vec<&Edge> = m.edges().iter().filter(|e| e.kind == EdgeKind::Interior).collect();
        assert_eq!(interior.len(), 1);
        assert_eq!(interior[0].elements, [0, 1]);
        assert_eq!(interior[0].normal, [1.0, 0.0]);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        assert!(build_rect_mesh(0.0, 0.0, 0.0, 1.0, 1, 1, BoundarySelector::None).is_err());
        assert!(build_rect_mesh(0.0, 1.0, 2.0, 1.0, 1, 1, BoundarySelector::None).is_err());
    }

    #[test]
    fn uniform_diameters_and_refinement() {
        let m = build_rect_mesh(-5.0, 5.0, -2.0, 2.0, 32, 8, BoundarySelector::Left).unwrap();
        let expect = (0.3125f64.powi(2) + 0.5f64.powi(2)).sqrt();
        for e in 0..m.num_elements() {
            assert!((m.diameter(e) - expect).abs() < 1e-14);
        }
        assert!((m.h_min() - expect).abs() < 1e-14);
        let fine = build_rect_mesh(-5.0, 5.0, -2.0, 2.0, 64, 16, BoundarySelector::Left).unwrap();
        let ratio = m.h_min() / fine.h_min();
        assert!((1.99..=2.01).contains(&ratio));
        assert!((m.total_area() - 40.0).abs() < 1e-10);
    }

    #[test]
    fn interior_edges_have_opposite_orientations() {
        let m = build_rect_mesh(0.0, 3.0, 0.0, 2.0, 3, 2, BoundarySelector::All).unwrap();
        for edge in m.edges().iter().filter(|e| e.num_elements == 2) {
            let n0 = m.edge_normal_at(edge.elements[0], edge.local[0], 0.3);
            assert!((n0[0] - edge.normal[0]).abs() < 1e-15 && (n0[1] - edge.normal[1]).abs() < 1e-15);
        }
        m.validate().unwrap();
    }

    #[test]
    fn crease_mesh_traces_the_parabola() {
        let crease = [[0.0, 2.0], [9.6, 2.0], [4.8, 6.0]];
        let m = build_crease_mesh(0.0, 9.6, 0.0, 15.0, crease, 12, 18).unwrap();
        m.validate().unwrap();
        // independent oracle: the parabola through the three points, solved by hand
        // y = 2 + 4 (1 - ((x - 4.8)/4.8)^2)
        let exact = |x: f64| 2.0 + 4.0 * (1.0 - ((x - 4.8) / 4.8).powi(2));
        let creased: Vec<(usize, &Edge)> = m.edges().iter().enumerate().filter(|(_, e)| e.crease).collect();
        assert_eq!(creased.len(), 12);
        for (id, edge) in creased {
            assert_eq!(edge.kind, EdgeKind::Interior);
            for k in 0..=4 {
                let s = k as f64 / 4.0;
                let p = m.map(edge.elements[0], m.edge_reference_point(id, 0, s)).x;
                assert!((p[1] - exact(p[0])).abs() < 1e-12);
            }
            let below = m.region(edge.elements[0]);
            let above = m.region(edge.elements[1]);
            assert_ne!(below, above);
        }
        assert!((m.total_area() - 9.6 * 15.0).abs() < 1e-8);
    }

    #[test]
    fn straight_crease_reduces_to_bilinear() {
        let crease = [[0.0, 1.0], [4.0, 3.0], [2.0, 2.0]];
        let m = build_crease_mesh(0.0, 4.0, 0.0, 5.0, crease, 4, 5).unwrap();
        for e in 0..m.num_elements() {
            for p in [[0.2, 0.3], [0.5, 0.5], [0.9, 0.1]] {
                let ev = m.map(e, p);
                assert!(ev.d2[0][0][0].abs() < 1e-12 && ev.d2[1][0][0].abs() < 1e-12);
                assert!(ev.d2[0][1][1].abs() < 1e-12 && ev.d2[1][1][1].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn smallest_crease_mesh() {
        let crease = [[0.0, 2.0], [9.6, 2.0], [4.8, 6.0]];
        let m = build_crease_mesh(0.0, 9.6, 0.0, 15.0, crease, 2, 2).unwrap();
        let n = m.edges().iter().filter(|e| e.crease).count();
        assert_eq!(n, 2);
        assert!(m.edges().iter().filter(|e| e.crease).all(|e| e.kind == EdgeKind::Interior));
    }

    #[test]
    fn crease_outside_domain_is_rejected() {
        let crease = [[0.0, 2.0], [9.6, 2.0], [4.8, 16.0]];
        assert!(build_crease_mesh(0.0, 9.6, 0.0, 15.0, crease, 4, 4).is_err());
    }

    #[test]
    fn trapezoid_triangle_mesh() {
        let m = build_trapezoid_triangle_mesh(3, BoundarySelector::Bottom).unwrap();
        m.validate().unwrap();
        assert_eq!(m.num_elements(), 27);
        assert!((m.total_area() - 3f64.sqrt() / 4.0).abs() < 1e-12);
        let dir: f64 = m.edges().iter().filter(|e| e.kind == EdgeKind::Dirichlet).map(|e| e.h).sum();
        assert!((dir - 1.0).abs() < 1e-12);
        let boundary = m.edges().iter().filter(|e| e.is_boundary()).count();
        assert_eq!(boundary, 3 * 2 * 3);
    }

    #[test]
    fn triangle_mesh_is_conforming() {
        let m = build_tri_rect_mesh(0.0, 2.0, 0.0, 1.0, 4, 2, BoundarySelector::Left).unwrap();
        m.validate().unwrap();
        assert_eq!(m.num_elements(), 16);
        assert!((m.total_area() - 2.0).abs() < 1e-13);
        assert_eq!(m.edges().iter().filter(|e| e.kind == EdgeKind::Dirichlet).count(), 2);
    }
}
