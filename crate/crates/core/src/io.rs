//! Output formats: legacy ASCII VTK snapshots of the deformed surface and a
//! versioned binary dump of a final state (mesh plus coefficients).

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::energy::isometry_defect;
use crate::error::{LdgError, Result};
use crate::mesh::{GeometricMap, Mesh, MeshParts};
use crate::reference::Shape;
use crate::space::{BoundaryData, DGField, DGSpace};

const MAGIC: &[u8; 8] = b"LDGSTATE";
const VERSION: u32 = 1;

/// Reference nodes of the exported quadratic cell, in VTK ordering:
/// corners first, then edge midpoints.
pub fn vtk_cell_nodes(shape: Shape) -> Vec<[f64; 2]> {
    let mut nodes: Vec<[f64; 2]> = shape.vertices().to_vec();
    for e in 0..shape.num_vertices() {
        nodes.push(shape.edge_point(e, 0.5));
    }
    nodes
}

fn vtk_cell_type(shape: Shape) -> u8 {
    match shape {
        Shape::Quad => 23,
        Shape::Tri => 22,
    }
}

/// Render the deformed surface `y(Omega)` as a legacy ASCII unstructured grid.
///
/// Every element is an independent quadratic cell, so discontinuities of the
/// DG field stay visible. Cell data: isometry defect and region id.
pub fn surface_vtk(y: &DGField, title: &str) -> Result<String> {
    let space = y.space();
    let mesh = space.mesh();
    let nodes = vtk_cell_nodes(mesh.shape());
    let npc = nodes.len();
    let nel = mesh.num_elements();
    let mut out = String::new();
    out.push_str("# vtk DataFile Version 3.0\n");
    let title: String = title.chars().filter(|c| *c != '\n').take(250).collect();
    out.push_str(if title.is_empty() { "ldg surface" } else { &title });
    out.push_str("\nASCII\nDATASET UNSTRUCTURED_GRID\n");
    writeln!(out, "POINTS {} double", nel * npc).unwrap();
    for e in 0..nel {
        for p in &nodes {
            let v = y.eval(e, *p)?.value;
            writeln!(out, "{:.17e} {:.17e} {:.17e}", v[0], v[1], v[2]).unwrap();
        }
    }
    writeln!(out, "CELLS {} {}", nel, nel * (npc + 1)).unwrap();
    for e in 0..nel {
        out.push_str(&npc.to_string());
        for i in 0..npc {
            write!(out, " {}", e * npc + i).unwrap();
        }
        out.push('\n');
    }
    writeln!(out, "CELL_TYPES {nel}").unwrap();
    let ct = vtk_cell_type(mesh.shape());
    for _ in 0..nel {
        writeln!(out, "{ct}").unwrap();
    }
    writeln!(out, "CELL_DATA {nel}").unwrap();
    out.push_str("SCALARS defect double 1\nLOOKUP_TABLE default\n");
    for d in isometry_defect(y) {
        writeln!(out, "{d:.17e}").unwrap();
    }
    out.push_str("SCALARS region_id int 1\nLOOKUP_TABLE default\n");
    for e in 0..nel {
        writeln!(out, "{}", mesh.region(e)).unwrap();
    }
    Ok(out)
}

/// Write [`surface_vtk`] to `path`.
pub fn export_surface(y: &DGField, path: &Path) -> Result<()> {
    let text = surface_vtk(y, "ldg deformed surface")?;
    std::fs::write(path, text)?;
    Ok(())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn point(&mut self, p: [f64; 2]) {
        self.f64(p[0]);
        self.f64(p[1]);
    }
    fn pairs(&mut self, v: &[[usize; 2]]) {
        self.u64(v.len());
        for p in v {
            self.u64(p[0]);
            self.u64(p[1]);
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .data
            .get(self.pos..end)
            .ok_or_else(|| LdgError::StateFormat(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice length"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take()?);
        usize::try_from(v).map_err(|_| LdgError::StateFormat(format!("count {v} too large")))
    }
    /// A length prefix that can be backed by at least `unit` bytes per entry.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()?;
        if n.saturating_mul(unit) > self.data.len() - self.pos {
            return Err(LdgError::StateFormat(format!("length {n} exceeds remaining data")));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
    fn point(&mut self) -> Result<[f64; 2]> {
        Ok([self.f64()?, self.f64()?])
    }
    fn pairs(&mut self) -> Result<Vec<[usize; 2]>> {
        let n = self.len(16)?;
        (0..n).map(|_| Ok([self.u64()?, self.u64()?])).collect()
    }
}

/// Serialize a state: mesh, polynomial degree, whether the clamped data is
/// the identity (flat) embedding, and the coefficients.
pub fn encode_state(y: &DGField) -> Vec<u8> {
    let space = y.space();
    let parts = space.mesh().to_parts();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(match parts.shape {
        Shape::Quad => 0,
        Shape::Tri => 1,
    });
    w.u32(parts.geometry_degree as u32);
    w.u64(parts.vertices.len());
    for v in &parts.vertices {
        w.point(*v);
    }
    w.u64(parts.elements.len());
    for (el, map) in parts.elements.iter().zip(&parts.maps) {
        w.u64(el.len());
        for v in el {
            w.u64(*v);
        }
        w.u64(map.nodes.len());
        for p in &map.nodes {
            w.point(*p);
        }
    }
    for r in &parts.region {
        w.u32(*r);
    }
    w.pairs(&parts.crease_edges);
    w.pairs(&parts.dirichlet_edges);
    w.u32(space.degree() as u32);
    w.u8(u8::from(y.boundary_data().is_some()));
    w.u64(y.coefficients().len());
    for c in y.coefficients() {
        w.f64(*c);
    }
    w.0
}

/// Inverse of [`encode_state`]. Clamped data, when flagged, is restored as the flat embedding.
pub fn decode_state(bytes: &[u8]) -> Result<DGField> {
    let mut r = Reader { data: bytes, pos: 0 };
    if r.take::<8>()? != *MAGIC {
        return Err(LdgError::StateFormat("not a state file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(LdgError::StateFormat(format!("unsupported version {version}")));
    }
    let shape = match r.u8()? {
        0 => Shape::Quad,
        1 => Shape::Tri,
        s => return Err(LdgError::StateFormat(format!("unknown shape tag {s}"))),
    };
    let geometry_degree = r.u32()? as usize;
    let nv = r.len(16)?;
    let vertices = (0..nv).map(|_| r.point()).collect::<Result<Vec<_>>>()?;
    let ne = r.len(16)?;
    let mut elements = Vec::with_capacity(ne);
    let mut maps = Vec::with_capacity(ne);
    for _ in 0..ne {
        let n = r.len(8)?;
        elements.push((0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?);
        let m = r.len(16)?;
        maps.push(GeometricMap { nodes: (0..m).map(|_| r.point()).collect::<Result<Vec<_>>>()? });
    }
    let region = (0..ne).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let crease_edges = r.pairs()?;
    let dirichlet_edges = r.pairs()?;
    let degree = r.u32()? as usize;
    let clamped = r.u8()? != 0;
    let nc = r.len(8)?;
    let coefficients = (0..nc).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(LdgError::StateFormat(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mesh = Mesh::from_parts(MeshParts {
        shape,
        geometry_degree,
        vertices,
        elements,
        maps,
        region,
        crease_edges,
        dirichlet_edges,
    })?;
    let space = Arc::new(DGSpace::new(Arc::new(mesh), degree)?);
    let field = DGField::from_coefficients(space, coefficients)?;
    Ok(if clamped { field.with_boundary_data(BoundaryData::flat()) } else { field })
}

pub fn write_state(y: &DGField, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_state(y))?;
    Ok(())
}

pub fn read_state(path: &Path) -> Result<DGField> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_state(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_rect_mesh, build_trapezoid_triangle_mesh, BoundarySelector};
    use crate::space::{flat_plate, interpolate};

    fn space(nx: usize, ny: usize) -> Arc<DGSpace> {
        let mesh = build_rect_mesh(0.0, 2.0, 0.0, 1.0, nx, ny, BoundarySelector::Left).unwrap();
        Arc::new(DGSpace::new(Arc::new(mesh), 2).unwrap())
    }

    #[test]
    fn flat_export_reproduces_mesh() {
        let s = space(3, 2);
        let y = flat_plate(&s).unwrap();
        let text = surface_vtk(&y, "t").unwrap();
        assert!(text.contains("POINTS 48 double"));
        assert!(text.contains("CELL_TYPES 6"));
        let pts: Vec<[f64; 3]> = text
            .lines()
            .skip_while(|l| !l.starts_with("POINTS"))
            .skip(1)
            .take(48)
            .map(|l| {
                let v: Vec<f64> = l.split_whitespace().map(|t| t.parse().unwrap()).collect();
                [v[0], v[1], v[2]]
            })
            .collect();
        assert!(pts.iter().all(|p| p[2].abs() < 1e-14));
        let x = s.mesh().map(0, [0.5, 0.0]).x;
        assert!((pts[4][0] - x[0]).abs() < 1e-13 && (pts[4][1] - x[1]).abs() < 1e-13);
    }

    #[test]
    fn triangle_cells_use_quadratic_triangle_type() {
        let mesh = build_trapezoid_triangle_mesh(1, BoundarySelector::Bottom).unwrap();
        let s = Arc::new(DGSpace::new(Arc::new(mesh), 2).unwrap());
        let y = flat_plate(&s).unwrap();
        let text = surface_vtk(&y, "").unwrap();
        assert!(text.contains("CELL_TYPES 3\n23\n23\n23\n"));
    }

    #[test]
    fn state_round_trip_is_exact() {
        let s = space(2, 2);
        let y = interpolate(&s, |x| [x[0].sin(), x[1], x[0] * x[1]], Some(BoundaryData::flat())).unwrap();
        let bytes = encode_state(&y);
        let back = decode_state(&bytes).unwrap();
        assert_eq!(back.coefficients(), y.coefficients());
        assert!(back.boundary_data().is_some());
        assert_eq!(encode_state(&back), bytes);
        assert_eq!(surface_vtk(&back, "a").unwrap(), surface_vtk(&y, "a").unwrap());
    }

    #[test]
    fn corrupt_state_rejected() {
        let s = space(1, 1);
        let bytes = encode_state(&flat_plate(&s).unwrap());
        assert!(decode_state(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_state(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode_state(&long).is_err());
    }
}
