//! Closed-loop records and their CSV / summary output.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::state::{ControlIncrement, ControlInput, VehicleState};

pub const CSV_HEADER: &str = "t,X,Y,phi,V,a,delta,da,ddelta,stage_cost,min_ov_dist,g_max,plan_ms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    /// Planning-frame state at `t`, before the control is applied.
    pub state: VehicleState,
    pub control: ControlInput,
    pub increment: ControlIncrement,
    pub stage_cost: f64,
    pub margins: Vec<f64>,
    pub min_ov_dist: f64,
    pub plan_seconds: f64,
    pub resamples: usize,
    /// Amount removed by clamping the extracted control to its bounds.
    pub clamp_amount: f64,
}

impl TraceRow {
    pub fn g_max(&self) -> f64 {
        self.margins.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceSummary {
    pub steps: usize,
    pub total_cost: f64,
    pub max_violation: f64,
    pub violation_steps: usize,
    pub min_ov_dist: f64,
    pub mean_plan_ms: f64,
    pub p95_plan_ms: f64,
    pub resamples: usize,
    pub final_state: Option<VehicleState>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanTrace {
    pub rows: Vec<TraceRow>,
    /// Planning-frame state after the last applied control.
    pub final_state: Option<VehicleState>,
}

impl PlanTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn summary(&self) -> TraceSummary {
        let mut times: Vec<f64> = self.rows.iter().map(|r| r.plan_seconds * 1e3).collect();
        times.sort_by(f64::total_cmp);
        let mean = if times.is_empty() {
            0.0
        } else {
            times.iter().sum::<f64>() / times.len() as f64
        };
        let p95 = if times.is_empty() {
            0.0
        } else {
            times[((times.len() as f64 * 0.95).ceil() as usize).clamp(1, times.len()) - 1]
        };
        TraceSummary {
            steps: self.rows.len(),
            total_cost: self.rows.iter().map(|r| r.stage_cost).sum(),
            max_violation: self.rows.iter().map(|r| r.g_max().max(0.0)).fold(0.0, f64::max),
            violation_steps: self.rows.iter().filter(|r| r.g_max() > 0.0).count(),
            min_ov_dist: self.rows.iter().map(|r| r.min_ov_dist).fold(f64::INFINITY, f64::min),
            mean_plan_ms: mean,
            p95_plan_ms: p95,
            resamples: self.rows.iter().map(|r| r.resamples).sum(),
            final_state: self.final_state,
        }
    }

    /// CSV text. With `timing == false` the wall-time column is left empty so
    /// that runs can be compared byte for byte.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let s = &r.state;
            write!(
                out,
                "{:.3},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},",
                r.t,
                s.x,
                s.y,
                s.phi,
                s.v,
                r.control.a,
                r.control.delta,
                r.increment.a,
                r.increment.delta,
                r.stage_cost,
                r.min_ov_dist,
                r.g_max()
            )
            .unwrap();
            if timing {
                write!(out, "{:.3}", r.plan_seconds * 1e3).unwrap();
            }
            out.push('\n');
        }
        out
    }
}
