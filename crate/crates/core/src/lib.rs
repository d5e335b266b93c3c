//! Local discontinuous Galerkin discretization of isometric bilayer plate
//! bending, with a semi-implicit H^2 gradient flow under linearized isometry
//! constraints.

pub mod energy;
pub mod error;
pub mod flow;
pub mod hessian;
pub mod io;
pub mod linalg;
pub mod mesh;
pub mod oracle;
pub mod reference;
pub mod scenario;
pub mod space;

pub use error::{LdgError, Result};
pub use mesh::{BoundarySelector, Edge, EdgeKind, GeometricMap, Mesh};
pub use reference::Shape;
pub use space::{BoundaryData, DGField, DGSpace};
