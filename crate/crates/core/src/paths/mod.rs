//! Time discretization and the two Brownian backends.

mod ensemble;
mod grid;
mod lattice;

pub use ensemble::{simulate_paths, PathEnsemble, PathView};
pub use grid::TimeGrid;
pub use lattice::{build_lattice, Lattice};
