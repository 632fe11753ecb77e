//! Clustering metrics, density and partition grids, sample dumps and the
//! raster writers used to look at them.

mod clustering;
mod grid;
mod raster;

pub use clustering::{cluster_accuracy, contingency, contingency_sized, ClusterMatch, ContingencyTable};
pub use grid::{density_grid, partition_grid, sample_all, sample_dump, DensityModel, Grid, StackDensity};
pub use raster::{write_pgm, write_ppm, PALETTE};
