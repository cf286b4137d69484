//! Signals, measurements and the forward-model interface shared by every
//! physical system.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemId {
    Streaking,
    VideoCs,
    Hologram,
}

impl SystemId {
    pub const ALL: [SystemId; 3] = [SystemId::Streaking, SystemId::VideoCs, SystemId::Hologram];

    pub fn as_str(self) -> &'static str {
        match self {
            SystemId::Streaking => "streaking",
            SystemId::VideoCs => "video_cs",
            SystemId::Hologram => "hologram",
        }
    }
}

impl fmt::Display for SystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "streaking" => Ok(SystemId::Streaking),
            "video_cs" | "video-cs" => Ok(SystemId::VideoCs),
            "hologram" => Ok(SystemId::Hologram),
            other => Err(Error::Config(format!("unknown system id {other:?}"))),
        }
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Shape(format!("invalid native shape {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Shape(format!(
            "shape {shape:?} holds {n} values, got {len}"
        )));
    }
    Ok(())
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Domain(format!("{what} has a non-finite entry at {i}"))),
        None => Ok(()),
    }
}

/// The retrieval target `f`, stored row-major in its native shape.
///
/// Native shapes: streaking `[440]`, video `[n, n, channels, frames]`
/// (axis order y, x, channel, frame), hologram `[n, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalVec {
    system: SystemId,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl SignalVec {
    pub fn new(system: SystemId, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        check_finite(&data, "signal")?;
        Ok(SignalVec {
            system,
            shape,
            data,
        })
    }

    /// Inverse of [`SignalVec::flatten`].
    pub fn unflatten(system: SystemId, shape: &[usize], flat: &[f64]) -> Result<Self> {
        Self::new(system, shape.to_vec(), flat.to_vec())
    }

    pub fn system(&self) -> SystemId {
        self.system
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn flat_len(&self) -> usize {
        self.data.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }
}

/// The observation `g` produced by a forward model.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementVec {
    system: SystemId,
    shape: Vec<usize>,
    data: Vec<f64>,
    nonneg: bool,
}

impl MeasurementVec {
    pub fn new(system: SystemId, shape: Vec<usize>, data: Vec<f64>, nonneg: bool) -> Result<Self> {
        check_shape(&shape, data.len())?;
        check_finite(&data, "measurement")?;
        if nonneg {
            if let Some(i) = data.iter().position(|&v| v < 0.0) {
                return Err(Error::Domain(format!(
                    "measurement flagged non-negative has {} at {i}",
                    data[i]
                )));
            }
        }
        Ok(MeasurementVec {
            system,
            shape,
            data,
            nonneg,
        })
    }

    pub fn system(&self) -> SystemId {
        self.system
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn nonneg(&self) -> bool {
        self.nonneg
    }

    pub fn flat_len(&self) -> usize {
        self.data.len()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }
}

/// Vector-Jacobian product of a forward model at a fixed linearization point.
pub trait Pullback: Send + Sync {
    /// Gradient of `<grad_g, A(f)>` with respect to `f`.
    fn pull(&self, grad_g: &[f64]) -> Vec<f64>;
}

/// A differentiable measurement operator `g = A(f)`.
///
/// Implementations are immutable after construction, so `apply` is pure and
/// may be called concurrently.
pub trait ForwardModel: Send + Sync {
    fn system(&self) -> SystemId;
    fn signal_shape(&self) -> Vec<usize>;
    fn measurement_shape(&self) -> Vec<usize>;
    fn is_linear(&self) -> bool;
    fn nonneg_measurement(&self) -> bool;

    fn apply_flat(&self, f: &[f64]) -> Result<Vec<f64>>;

    /// Forward evaluation plus the pullback at `f`.
    fn linearize(&self, f: &[f64]) -> Result<(Vec<f64>, Box<dyn Pullback>)>;

    /// Transpose of a linear model.
    fn adjoint_flat(&self, _g: &[f64]) -> Result<Vec<f64>> {
        Err(Error::Unsupported(format!(
            "{} forward model has no adjoint",
            self.system()
        )))
    }

    fn signal_len(&self) -> usize {
        self.signal_shape().iter().product()
    }

    fn measurement_len(&self) -> usize {
        self.measurement_shape().iter().product()
    }

    fn apply(&self, f: &SignalVec) -> Result<MeasurementVec> {
        if f.system() != self.system() {
            return Err(Error::SystemMismatch {
                expected: self.system(),
                found: f.system(),
            });
        }
        if f.shape() != self.signal_shape().as_slice() {
            return Err(Error::Shape(format!(
                "{} model expects signal shape {:?}, got {:?}",
                self.system(),
                self.signal_shape(),
                f.shape()
            )));
        }
        let g = self.apply_flat(f.as_flat())?;
        MeasurementVec::new(
            self.system(),
            self.measurement_shape(),
            g,
            self.nonneg_measurement(),
        )
    }

    fn check_signal_len(&self, len: usize) -> Result<()> {
        if len != self.signal_len() {
            return Err(Error::Shape(format!(
                "{} model expects a signal of {} values, got {len}",
                self.system(),
                self.signal_len()
            )));
        }
        Ok(())
    }

    fn check_measurement_len(&self, len: usize) -> Result<()> {
        if len != self.measurement_len() {
            return Err(Error::Shape(format!(
                "{} model expects a measurement of {} values, got {len}",
                self.system(),
                self.measurement_len()
            )));
        }
        Ok(())
    }
}

/// Pullback of a linear model: its adjoint.
pub(crate) struct LinearPullback<F: Fn(&[f64]) -> Vec<f64> + Send + Sync>(pub F);

impl<F: Fn(&[f64]) -> Vec<f64> + Send + Sync> Pullback for LinearPullback<F> {
    fn pull(&self, grad_g: &[f64]) -> Vec<f64> {
        (self.0)(grad_g)
    }
}

/// One `(f, g)` observation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub f: SignalVec,
    pub g: MeasurementVec,
    pub seed: u64,
    pub meta: BTreeMap<String, serde_json::Value>,
}
