//! File-based configuration: run settings and simulation specs as TOML,
//! with unknown keys rejected and errors reported by field path.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;
use crate::sim::{SensorRigSpec, TrajectorySpec};

/// Which radar stream a run consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RadarSource {
    /// Raw point clouds through the RANSAC front end.
    #[default]
    Scans,
    /// Precomputed ego-velocity measurements.
    Egovel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub radar_source: RadarSource,
    /// Negate dopplers of ingested point clouds.
    pub flip_doppler: bool,
    /// Run optimizer and navigator on separate threads.
    pub two_workers: bool,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config { path: "<root>".into(), message: e.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub rig: SensorRigSpec,
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        self.trajectory.validate()?;
        self.rig.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config { path: "<root>".into(), message: e.to_string() })
    }
}

/// Parses TOML into `T`; the error names the offending field.
pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Config { path: "<root>".into(), message: e.to_string() })?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config { path, message: e.into_inner().message().trim().to_string() }
    })
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    parse_toml(&std::fs::read_to_string(path)?)
}
