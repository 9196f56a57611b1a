//! Ground-truth vehicle, road geometry, scenarios, constraints and cost.

mod bicycle;
mod constraints;
mod road;
mod scenario;
mod trace;

pub use bicycle::{bicycle_step, generate_training_data, Bicycle, ExcitationConfig, DEFAULT_WHEELBASE};
pub use constraints::{
    box_distance, constraint_count, constraint_margins, margins_into, stage_cost, ObstacleSnapshot,
};
pub use road::{wrap_angle, GlobalState, Road, RoadSpec};
pub use scenario::{NominalControl, OvTrack, RefPoint, Scenario, TableRow, Weights};
pub use trace::{PlanTrace, TraceRow, TraceSummary, CSV_HEADER};
