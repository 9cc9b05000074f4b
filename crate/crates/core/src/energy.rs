//! Per-inference energy/latency cost model. The trigger is charged on every
//! frame, the CNN only on frames where the gate fired; savings are measured
//! against running the CNN on every frame.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::Trace;

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("trace is empty")]
    EmptyTrace,
    #[error("no traces supplied")]
    NoTraces,
    #[error("cost model values must be positive")]
    NonPositiveCost,
}

/// Per-stage energy (uJ) and latency (us) constants. Defaults are the
/// deployment measurements of the 8-bit CNN and the wake-up trigger on the
/// target MCU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub e_trigger: f64,
    pub e_cnn: f64,
    pub t_trigger: f64,
    pub t_cnn: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            e_trigger: 0.01,
            e_cnn: 1.20,
            t_trigger: 2.96,
            t_cnn: 316.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), EnergyError> {
        let all = [self.e_trigger, self.e_cnn, self.t_trigger, self.t_cnn];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(EnergyError::NonPositiveCost);
        }
        Ok(())
    }
}

/// Aggregated cost of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyReport {
    /// Fraction of frames on which the CNN ran.
    pub invocation_rate: f64,
    /// uJ per frame: e_trigger + rate * e_cnn.
    pub avg_energy: f64,
    /// us per frame: t_trigger + rate * t_cnn.
    pub avg_latency: f64,
    /// 1 - avg_energy / e_cnn, versus the static CNN.
    pub savings_vs_static: f64,
}

/// Cost of running a cascade trace under a cost model.
pub fn estimate(trace: &Trace, cost: &CostModel) -> Result<EnergyReport, EnergyError> {
    cost.validate()?;
    if trace.is_empty() {
        return Err(EnergyError::EmptyTrace);
    }
    let invocation_rate = trace.cnn_invocations() as f64 / trace.len() as f64;
    Ok(report_for_rate(invocation_rate, cost))
}

/// The report a given invocation rate implies; factored out so imposed
/// rates can be evaluated without synthesizing a trace.
pub fn report_for_rate(invocation_rate: f64, cost: &CostModel) -> EnergyReport {
    let avg_energy = cost.e_trigger + invocation_rate * cost.e_cnn;
    let avg_latency = cost.t_trigger + invocation_rate * cost.t_cnn;
    EnergyReport {
        invocation_rate,
        avg_energy,
        avg_latency,
        savings_vs_static: 1.0 - avg_energy / cost.e_cnn,
    }
}

/// Savings per threshold, ordered by threshold.
pub fn savings_curve(
    traces: &BTreeMap<u32, Trace>,
    cost: &CostModel,
) -> Result<Vec<(u32, f64)>, EnergyError> {
    if traces.is_empty() {
        return Err(EnergyError::NoTraces);
    }
    traces
        .iter()
        .map(|(&threshold, trace)| Ok((threshold, estimate(trace, cost)?.savings_vs_static)))
        .collect()
}
