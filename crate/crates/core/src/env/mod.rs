//! POMDP assembly: pose-registered observation rendering, uncertainty-driven
//! observation augmentation, the closed-loop grading episode, and dataset
//! export.

mod dataset;
mod episode;
mod obs;

pub use dataset::{export_dataset, DatasetManifest, LegSamples, ManifestEntry};
pub use episode::{
    run_episode, EpisodeConfig, EpisodeResult, EpisodeState, LegEvent, LegRecord,
};
pub use obs::{
    render_observation, sample_observations, AugmentedSample, FrameLabels, Observation,
    ObservationSpec, WaypointAction,
};

use crate::eskf::EskfError;
use crate::geometry::GeometryError;
use crate::terrain::TerrainError;
use std::fmt;

#[derive(Debug)]
pub enum EnvError {
    /// Observation center or episode pose left the map.
    OutOfBounds { x: f64, y: f64 },
    Terrain(TerrainError),
    Fusion(EskfError),
    Geometry(GeometryError),
    Io(std::io::Error),
}

impl fmt::Display for EnvError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvError::OutOfBounds { x, y } => write!(f, "pose ({x:.3}, {y:.3}) outside the map"),
            EnvError::Terrain(e) => write!(f, "{e}"),
            EnvError::Fusion(e) => write!(f, "{e}"),
            EnvError::Geometry(e) => write!(f, "{e}"),
            EnvError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EnvError {}

impl From<TerrainError> for EnvError {
    fn from(e: TerrainError) -> Self {
        EnvError::Terrain(e)
    }
}

impl From<EskfError> for EnvError {
    fn from(e: EskfError) -> Self {
        EnvError::Fusion(e)
    }
}

impl From<GeometryError> for EnvError {
    fn from(e: GeometryError) -> Self {
        EnvError::Geometry(e)
    }
}

impl From<std::io::Error> for EnvError {
    fn from(e: std::io::Error) -> Self {
        EnvError::Io(e)
    }
}
