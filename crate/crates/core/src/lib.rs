//! Optimal-transport fusion of graph convolutional networks.
//!
//! * [`graph`]: graphs, datasets, fusion batches, synthetic generators
//! * [`model`]: GCN inference, activation capture, model files
//! * [`ot`]: exact, entropic unbalanced and fused Gromov-Wasserstein solvers
//! * [`costs`]: neuron-to-neuron ground costs
//! * [`fusion`]: layer-wise alignment, fusion and the averaging baselines

pub mod costs;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod model;
pub mod ot;

pub use costs::{Aggregation, CostKind, CostSpec, EfdVariant, FgwSettings, StructureKind};
pub use error::{Error, Result};
pub use fusion::{
    ensemble_mae, ensemble_predict, fuse, fuse_with_batch, vanilla_fuse, AlignmentTrace,
    CostNormalization, FusionConfig, LayerTrace, PlanSource, Solver,
};
pub use graph::{
    load_dataset, sample_batch, synthesize_dataset, write_dataset, Dataset, DatasetFormat,
    FusionBatch, GeneratorSpec, Graph, ScalarGraph,
};
pub use model::{
    evaluate_mae, forward, load_model, predict, random_model, save_model, ArchSpec, CapturePoint,
    GcnModel,
};
pub use ot::{CostMatrix, Histogram, SinkhornParams, TransportPlan};
