//! Forward models for the three measurement systems.

pub mod fresnel;
pub mod streaking;
pub mod video_cs;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::types::{ForwardModel, SystemId};

pub use fresnel::{FresnelConfig, FresnelModel};
pub use streaking::{StreakingConfig, StreakingModel};
pub use video_cs::{MaskSet, VideoCsConfig, VideoCsModel};

/// Configuration of one physical system, tagged by its id in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "snake_case")]
pub enum PhysicsConfig {
    Streaking(StreakingConfig),
    VideoCs(VideoCsConfig),
    Hologram(FresnelConfig),
}

impl PhysicsConfig {
    pub fn default_for(system: SystemId) -> Self {
        match system {
            SystemId::Streaking => PhysicsConfig::Streaking(StreakingConfig::default()),
            SystemId::VideoCs => PhysicsConfig::VideoCs(VideoCsConfig::default()),
            SystemId::Hologram => PhysicsConfig::Hologram(FresnelConfig::default()),
        }
    }

    pub fn system(&self) -> SystemId {
        match self {
            PhysicsConfig::Streaking(_) => SystemId::Streaking,
            PhysicsConfig::VideoCs(_) => SystemId::VideoCs,
            PhysicsConfig::Hologram(_) => SystemId::Hologram,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PhysicsConfig::Streaking(c) => c.validate(),
            PhysicsConfig::VideoCs(c) => c.validate(),
            PhysicsConfig::Hologram(c) => c.validate(),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn ForwardModel>> {
        Ok(match self {
            PhysicsConfig::Streaking(c) => Arc::new(StreakingModel::new(c.clone())?),
            PhysicsConfig::VideoCs(c) => Arc::new(VideoCsModel::new(c.clone())?),
            PhysicsConfig::Hologram(c) => Arc::new(FresnelModel::new(c.clone())?),
        })
    }
}
