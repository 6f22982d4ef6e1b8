//! Habitat mapping from georeferenced field plots: spatially blocked
//! cross-validation, imbalance-aware classifier ensembles and rule-based
//! assembly of per-formation probability rasters into one class map.

pub mod dataio;
pub mod ensemble;
pub mod error;
pub mod learners;
pub mod mapassembly;
pub mod preprocess;
pub mod spatialcv;
pub mod synth;
pub mod taxonomy;
pub mod tuneval;

pub use dataio::{
    read_cube, read_grid, read_plots, write_cube, write_grid, CrosswalkTable, Cube, FeatureValue, Grid, GridHeader,
    MaskCube, PlotRecord, PlotTable, ProbabilityCube,
};
pub use ensemble::{build_ensemble, EnsembleManifest, EnsembleModel, Member, Uncertainty, WeightScheme};
pub use error::{Error, Result};
pub use learners::{train, Classifier, Dataset, Family, LossSpec, ModelSpec};
pub use mapassembly::{AssociationMatrix, MaskParams, TopKMap, WallToWall};
pub use preprocess::{FeatureKind, FeatureSchema, FeatureSpec, FittedPipeline};
pub use spatialcv::{build_partition, PartitionParams, SpatialPartition};
pub use taxonomy::{HabitatCode, Taxonomy};
pub use tuneval::{adjusted_ba, evaluate, MetricsReport, SearchSpace};
