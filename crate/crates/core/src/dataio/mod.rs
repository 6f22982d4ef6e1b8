//! Readers and writers for every file the pipeline consumes or produces.

mod container;
mod cube;
mod grid;
mod plots;
mod tables;

pub use container::{load_json, save_json, FORMAT_VERSION};
pub use cube::{read_cube, write_cube, Cube, CubeReader, CubeWriter, MaskCube, ProbabilityCube, MANIFEST};
pub use grid::{quantize, read_grid, write_grid, Grid, GridHeader, GridReader, GridWriter, DEFAULT_NODATA};
pub use plots::{read_plots, write_plots, FeatureValue, PlotRecord, PlotTable};
pub use tables::{
    parse_crosswalk, read_association, read_crosswalk, write_association, write_crosswalk, CrosswalkTable, LandCover,
};
