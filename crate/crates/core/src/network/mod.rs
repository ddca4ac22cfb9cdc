//! The doubly recurrent estimation graph: siamese pyramid encoder, the shared
//! spatio-temporal recurrent cell, recurrence over scales and over time.

mod config;
mod count;
mod layers;
mod model;

pub use config::{ModelConfig, TemporalMode};
pub use count::{count_parameters, ParamCount};
pub use layers::Conv2d;
pub use model::{
    temporal_connect_trflow, CellOutput, Decoder, LevelOutput, OcclusionMap, PairOutput,
    PyramidFeatures, SequenceOutput, StarCellState, StarFlow, TemporalCarry,
};
