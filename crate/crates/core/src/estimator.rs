//! Execution-time estimation matrix, in profile and learning modes.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{FunctionId, FunctionSpec};

pub const DEFAULT_UNIT_CLASS: &str = "container";

/// Machine type an estimate applies to.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitClass(pub String);

impl Default for UnitClass {
    fn default() -> Self {
        UnitClass(DEFAULT_UNIT_CLASS.to_owned())
    }
}

impl fmt::Display for UnitClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorMode {
    #[default]
    Profile,
    Learning,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleCount {
    /// Profile entries: fixed, never updated.
    Profile,
    Observed(u64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean_s: f64,
    pub sample_count: SampleCount,
}

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("no estimate for ({0}, {1})")]
    UnknownEntry(FunctionId, UnitClass),
    #[error("measurement must be > 0, got {0}")]
    NonPositive(f64),
}

/// One row of a configured profile matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileEntry {
    pub function_id: FunctionId,
    #[serde(default)]
    pub unit_class: UnitClass,
    pub mean_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimationMatrix {
    mode: EstimatorMode,
    entries: BTreeMap<(FunctionId, UnitClass), Estimate>,
    cold_defaults: BTreeMap<FunctionId, f64>,
}

impl EstimationMatrix {
    pub fn profile(entries: impl IntoIterator<Item = ProfileEntry>) -> Self {
        let entries = entries
            .into_iter()
            .map(|e| {
                (
                    (e.function_id, e.unit_class),
                    Estimate {
                        mean_s: e.mean_s,
                        sample_count: SampleCount::Profile,
                    },
                )
            })
            .collect();
        EstimationMatrix {
            mode: EstimatorMode::Profile,
            entries,
            cold_defaults: BTreeMap::new(),
        }
    }

    /// Profile matrix holding each function's nominal execution time on the
    /// default unit class.
    pub fn profile_from_specs<'a>(specs: impl IntoIterator<Item = &'a FunctionSpec>) -> Self {
        Self::profile(specs.into_iter().map(|s| ProfileEntry {
            function_id: s.function_id.clone(),
            unit_class: UnitClass::default(),
            mean_s: s.exec_time_s,
        }))
    }

    /// Empty learning matrix. Until a pair is observed its estimate is the
    /// function's nominal execution time.
    pub fn learning<'a>(specs: impl IntoIterator<Item = &'a FunctionSpec>) -> Self {
        EstimationMatrix {
            mode: EstimatorMode::Learning,
            entries: BTreeMap::new(),
            cold_defaults: specs
                .into_iter()
                .map(|s| (s.function_id.clone(), s.exec_time_s))
                .collect(),
        }
    }

    pub fn with_cold_default(mut self, function_id: FunctionId, seconds: f64) -> Self {
        self.cold_defaults.insert(function_id, seconds);
        self
    }

    pub fn mode(&self) -> EstimatorMode {
        self.mode
    }

    pub fn entry(&self, function_id: &FunctionId, unit: &UnitClass) -> Option<Estimate> {
        self.entries.get(&(function_id.clone(), unit.clone())).copied()
    }

    pub fn estimate(&self, function_id: &FunctionId, unit: &UnitClass) -> Result<f64, EstimatorError> {
        if let Some(e) = self.entries.get(&(function_id.clone(), unit.clone())) {
            return Ok(e.mean_s);
        }
        match self.mode {
            EstimatorMode::Learning => self
                .cold_defaults
                .get(function_id)
                .copied()
                .ok_or_else(|| EstimatorError::UnknownEntry(function_id.clone(), unit.clone())),
            EstimatorMode::Profile => Err(EstimatorError::UnknownEntry(function_id.clone(), unit.clone())),
        }
    }

    /// Folds one measured execution into the running mean. A no-op in
    /// profile mode.
    pub fn observe(&mut self, function_id: &FunctionId, unit: &UnitClass, measured_s: f64) -> Result<(), EstimatorError> {
        if !(measured_s > 0.0) || !measured_s.is_finite() {
            return Err(EstimatorError::NonPositive(measured_s));
        }
        if self.mode == EstimatorMode::Profile {
            return Ok(());
        }
        let e = self
            .entries
            .entry((function_id.clone(), unit.clone()))
            .or_insert(Estimate {
                mean_s: 0.0,
                sample_count: SampleCount::Observed(0),
            });
        if let SampleCount::Observed(n) = &mut e.sample_count {
            *n += 1;
            e.mean_s += (measured_s - e.mean_s) / *n as f64;
        }
        Ok(())
    }
}
