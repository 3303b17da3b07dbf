//! Model persistence.
//!
//! A checkpoint is a JSON document holding the schedule configuration, the
//! transform (kind plus any parameters), the noise-prediction network spec,
//! and its weights, all at f64. Writes go through a temporary file in the
//! destination directory followed by a rename, so a crash mid-save never
//! leaves a truncated checkpoint behind. Loads validate the format version
//! and every dimension before constructing a model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NdmModel;
use crate::nn::{Net, NetSpec};
use crate::num::Real;
use crate::ot::{MonotoneMap, OtModel};
use crate::schedule::ScheduleConfig;
use crate::transform::Transform;

pub const FORMAT_VERSION: u32 = 1;

/// Serializable transform state (configuration plus learned parameters).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TransformState {
    Identity,
    FixedDiagonal { log_scales: Vec<f64> },
    Learnable { net: NetSpec, params: Vec<f64> },
}

impl TransformState {
    pub fn from_transform<T: Real>(transform: &Transform<T>) -> Self {
        match transform {
            Transform::Identity { .. } => TransformState::Identity,
            Transform::FixedDiagonal { log_c } => TransformState::FixedDiagonal {
                log_scales: log_c.iter().map(|c| c.as_f64()).collect(),
            },
            Transform::Learnable { net, params } => TransformState::Learnable {
                net: net.spec.clone(),
                params: params.iter().map(|p| p.as_f64()).collect(),
            },
        }
    }

    pub fn build_transform<T: Real>(&self, dim: usize) -> Result<Transform<T>> {
        let transform = match self {
            TransformState::Identity => Transform::identity(dim),
            TransformState::FixedDiagonal { log_scales } => {
                let scales: Vec<T> = log_scales.iter().map(|&c| T::of(c.exp())).collect();
                Transform::fixed_diagonal(&scales)?
            }
            TransformState::Learnable { net, params } => {
                let net = Net::new(net.clone())?;
                if params.len() != net.param_count() {
                    return Err(Error::Checkpoint(format!(
                        "transform has {} parameters, its spec needs {}",
                        params.len(),
                        net.param_count()
                    )));
                }
                Transform::Learnable { net, params: params.iter().map(|&p| T::of(p)).collect() }
            }
        };
        if transform.dim() != dim {
            return Err(Error::Checkpoint(format!(
                "transform dimension {} does not match recorded dimension {}",
                transform.dim(),
                dim
            )));
        }
        Ok(transform)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Data dimension (redundant with the net spec, kept for validation).
    pub dim: usize,
    pub schedule: ScheduleConfig,
    pub transform: TransformState,
    pub eps_net: NetSpec,
    pub theta: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &NdmModel<T>) -> Self {
        let transform = TransformState::from_transform(model.transform());
        Checkpoint {
            format_version: FORMAT_VERSION,
            dim: model.dim(),
            schedule: model.schedule().config(),
            transform,
            eps_net: model.eps_net().spec.clone(),
            theta: model.theta().iter().map(|p| p.as_f64()).collect(),
        }
    }

    pub fn build_model<T: Real>(&self) -> Result<NdmModel<T>> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (this build reads {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let schedule = self.schedule.build::<T>()?;
        let transform: Transform<T> = self.transform.build_transform(self.dim)?;
        let eps_net = Net::new(self.eps_net.clone())?;
        if self.theta.len() != eps_net.param_count() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} network weights, the spec needs {}",
                self.theta.len(),
                eps_net.param_count()
            )));
        }
        let theta: Vec<T> = self.theta.iter().map(|&p| T::of(p)).collect();
        NdmModel::new(schedule, transform, eps_net, theta)
    }

    /// Atomic save: write to `<name>.tmp` beside the target, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Checkpoint(format!("serialization failed: {e}")))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, json.as_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: parse failed: {e}", path.display())))?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported format version {} (this build reads {FORMAT_VERSION})",
                path.display(),
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }
}

/// Persistence for the transport-restricted model: schedule, transform,
/// and the monotone reverse map's parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtCheckpoint {
    pub format_version: u32,
    pub schedule: ScheduleConfig,
    pub transform: TransformState,
    pub map_units: usize,
    pub map_params: Vec<f64>,
}

impl OtCheckpoint {
    pub fn from_model<T: Real>(model: &OtModel<T>) -> Self {
        OtCheckpoint {
            format_version: FORMAT_VERSION,
            schedule: model.schedule().config(),
            transform: TransformState::from_transform(model.transform()),
            map_units: model.map().units(),
            map_params: model.map().params().iter().map(|p| p.as_f64()).collect(),
        }
    }

    pub fn build_model<T: Real>(&self) -> Result<OtModel<T>> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (this build reads {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let schedule = self.schedule.build::<T>()?;
        let transform: Transform<T> = self.transform.build_transform(1)?;
        let params: Vec<T> = self.map_params.iter().map(|&p| T::of(p)).collect();
        let map = MonotoneMap::from_params(self.map_units, params)?;
        OtModel::new(schedule, transform, map)
    }

    /// Atomic save, as for [`Checkpoint::save`].
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Checkpoint(format!("serialization failed: {e}")))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, json.as_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let ckpt: OtCheckpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: parse failed: {e}", path.display())))?;
        Ok(ckpt)
    }
}
