//! Driving scenarios: road, limits, obstacle-vehicle tables, references and
//! cost weights. Positions are in the Frenet planning frame.

use serde::{Deserialize, Serialize};

use super::road::{Road, RoadSpec};
use crate::error::{MpicError, Result};
use crate::state::{VehicleState, CONTROL_DIM, STATE_DIM};
use crate::vsys::BarrierParams;

/// Cost weights as covariance diagonals: a residual `v` costs `v^2 / w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub r: [f64; STATE_DIM],
    pub q_u: [f64; CONTROL_DIM],
    pub q_du: [f64; CONTROL_DIM],
    pub q_eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub t: f64,
    pub state: VehicleState,
}

/// Pre-specified trajectory of one obstacle vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvTrack {
    pub half_extents: [f64; 2],
    pub table: Vec<TableRow>,
}

impl OvTrack {
    /// Integrates a speed profile given by piecewise-constant accelerations
    /// `(start_time, accel)` along a fixed lateral offset.
    pub fn from_profile(
        s0: f64,
        d: f64,
        v0: f64,
        accel: &[(f64, f64)],
        dt: f64,
        end: f64,
        half_extents: [f64; 2],
    ) -> Self {
        let n = (end / dt).ceil() as usize;
        let mut table = Vec::with_capacity(n + 1);
        let (mut s, mut v) = (s0, v0);
        for k in 0..=n {
            let t = k as f64 * dt;
            table.push(TableRow { t, state: VehicleState::new(s, d, 0.0, v) });
            let a = accel
                .iter()
                .rev()
                .find(|(t0, _)| *t0 <= t + 1e-9)
                .map_or(0.0, |p| p.1);
            // exact integration within the step, stopping at rest
            let v_next = (v + a * dt).max(0.0);
            let ds = if a < 0.0 && v + a * dt < 0.0 {
                -v * v / (2.0 * a)
            } else {
                v * dt + 0.5 * a * dt * dt
            };
            s += ds;
            v = v_next;
        }
        OvTrack { half_extents, table }
    }

    pub fn start(&self) -> f64 {
        self.table.first().map_or(0.0, |r| r.t)
    }

    pub fn end(&self) -> f64 {
        self.table.last().map_or(0.0, |r| r.t)
    }

    pub fn state_at(&self, t: f64) -> Result<VehicleState> {
        let (start, end) = (self.start(), self.end());
        let tol = 1e-9;
        if self.table.is_empty() || t < start - tol || t > end + tol {
            return Err(MpicError::OutOfTableRange { t, start, end });
        }
        let t = t.clamp(start, end);
        let i = self.table.partition_point(|r| r.t <= t);
        if i == 0 {
            return Ok(self.table[0].state);
        }
        if i >= self.table.len() {
            return Ok(self.table[self.table.len() - 1].state);
        }
        let (a, b) = (&self.table[i - 1], &self.table[i]);
        if t == a.t {
            return Ok(a.state);
        }
        let w = (t - a.t) / (b.t - a.t);
        let (x, y) = (a.state.to_array(), b.state.to_array());
        Ok(VehicleState::from_array(std::array::from_fn(|k| x[k] + w * (y[k] - x[k]))))
    }
}

/// Time-indexed reference: lateral target and desired speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefPoint {
    pub t: f64,
    pub d: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NominalControl {
    /// `s_t` is the previously applied control.
    #[default]
    Previous,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub dt: f64,
    /// Simulated time in seconds.
    pub duration: f64,
    pub horizon: usize,
    pub wheelbase: f64,
    pub road: RoadSpec,
    /// Number of lanes; the reference line runs along the carriageway centre.
    pub lanes: usize,
    pub lane_width: f64,
    pub boundary_margin: f64,
    pub safety_distance: f64,
    pub u_min: [f64; CONTROL_DIM],
    pub u_max: [f64; CONTROL_DIM],
    pub du_min: [f64; CONTROL_DIM],
    pub du_max: [f64; CONTROL_DIM],
    pub weights: Weights,
    pub barrier: BarrierParams,
    pub inflation: f64,
    pub ev0: VehicleState,
    pub ev_half_extents: [f64; 2],
    pub ovs: Vec<OvTrack>,
    pub reference: Vec<RefPoint>,
    #[serde(default)]
    pub nominal_control: NominalControl,
}

impl Scenario {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let sc: Scenario = serde_json::from_slice(bytes).map_err(|e| MpicError::Parse {
            location: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialises")
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt + 1e-9).floor() as usize
    }

    /// Half-width of the admissible band for the vehicle centre.
    pub fn lateral_bound(&self) -> f64 {
        self.lanes as f64 * self.lane_width / 2.0 - self.boundary_margin
    }

    pub fn road(&self) -> Result<Road> {
        Road::from_spec(&self.road, 2.0 * self.lane_width * self.lanes.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MpicError::InvalidConfig(m));
        if !(self.dt > 0.0) || !(self.duration >= 0.0) || self.horizon == 0 {
            return bad("dt, duration and horizon must be positive".into());
        }
        if self.lanes == 0 || !(self.lane_width / 2.0 - self.boundary_margin > 0.0) {
            return bad("lane width must exceed twice the boundary margin".into());
        }
        if !(self.safety_distance > 0.0) {
            return bad("safety distance must be positive".into());
        }
        for i in 0..CONTROL_DIM {
            if !(self.u_min[i] < self.u_max[i]) || !(self.du_min[i] < self.du_max[i]) {
                return bad(format!("bounds for control {i} are not ordered"));
            }
        }
        let w = &self.weights;
        if w.r.iter().chain(&w.q_u).chain(&w.q_du).chain([&w.q_eps]).any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("weights must be positive".into());
        }
        if !(self.inflation >= 1.0) {
            return bad("inflation must be at least 1".into());
        }
        self.barrier.validate()?;
        if self.reference.is_empty() {
            return bad("reference has no points".into());
        }
        let horizon_end = self.duration + self.horizon as f64 * self.dt;
        for (i, ov) in self.ovs.iter().enumerate() {
            if ov.start() > 1e-9 || ov.end() < horizon_end - 1e-9 {
                return bad(format!(
                    "obstacle {i} table covers [{}, {}] but [0, {horizon_end}] is needed",
                    ov.start(),
                    ov.end()
                ));
            }
        }
        self.road()?;
        Ok(())
    }

    pub fn ov_state(&self, ov_index: usize, t: f64) -> Result<VehicleState> {
        let ov = self.ovs.get(ov_index).ok_or_else(|| {
            MpicError::InvalidConfig(format!("no obstacle vehicle {ov_index}"))
        })?;
        ov.state_at(t)
    }

    fn ref_point(&self, t: f64) -> (f64, f64) {
        let r = &self.reference;
        let i = r.partition_point(|p| p.t <= t);
        if i == 0 {
            return (r[0].d, r[0].v);
        }
        if i >= r.len() {
            let p = r[r.len() - 1];
            return (p.d, p.v);
        }
        let (a, b) = (r[i - 1], r[i]);
        let w = (t - a.t) / (b.t - a.t);
        (a.d + w * (b.d - a.d), a.v + w * (b.v - a.v))
    }

    /// State references `r_t` for `t = t_k, t_k + dt, ..., t_k + H dt`. The
    /// arc-length target advances from `s_k` at the desired speed.
    pub fn reference_horizon(&self, t_k: f64, s_k: f64, h: usize) -> Vec<[f64; STATE_DIM]> {
        let mut out = Vec::with_capacity(h + 1);
        let mut s = s_k;
        let (mut d, mut v) = self.ref_point(t_k);
        out.push([s, d, 0.0, v]);
        for j in 1..=h {
            let t = t_k + j as f64 * self.dt;
            let (d_next, v_next) = self.ref_point(t);
            s += 0.5 * (v + v_next) * self.dt;
            d = d_next;
            v = v_next;
            out.push([s, d, 0.0, v]);
        }
        out
    }

    /// Overtaking on a gently curved two-lane road with two slower vehicles
    /// ahead in the ego lane.
    pub fn overtaking() -> Self {
        let dt = 0.1;
        let (duration, horizon) = (12.0, 40);
        // tables reach well past the default horizon so longer horizons also fit
        let end = duration + 10.0;
        let half = [2.4, 1.0];
        Scenario {
            name: "overtaking".into(),
            dt,
            duration,
            horizon,
            wheelbase: 2.7,
            road: RoadSpec::Arcs {
                start: [0.0, 0.0, 0.0],
                pieces: vec![[80.0, 0.0], [150.0, 1.0 / 600.0], [150.0, -1.0 / 600.0], [300.0, 0.0]],
            },
            lanes: 2,
            lane_width: 3.6,
            boundary_margin: 1.0,
            safety_distance: 1.0,
            u_min: [-6.0, -0.5],
            u_max: [4.0, 0.5],
            du_min: [-1.5, -0.06],
            du_max: [1.5, 0.06],
            weights: Weights {
                r: [400.0, 0.5, 0.05, 1.0],
                q_u: [20.0, 0.5],
                q_du: [0.5, 0.005],
                q_eps: 0.01,
            },
            barrier: BarrierParams { a: 1.0, b: 30.0 },
            inflation: 1.0,
            ev0: VehicleState::new(10.0, -1.8, 0.0, 22.0),
            ev_half_extents: half,
            ovs: vec![
                OvTrack::from_profile(40.0, -1.8, 15.0, &[], dt, end, half),
                OvTrack::from_profile(65.0, -1.8, 15.0, &[], dt, end, half),
            ],
            reference: vec![
                RefPoint { t: 0.0, d: -1.8, v: 25.0 },
                RefPoint { t: 0.5, d: -1.8, v: 25.0 },
                RefPoint { t: 2.5, d: 1.8, v: 25.0 },
                RefPoint { t: 8.0, d: 1.8, v: 25.0 },
                RefPoint { t: 10.0, d: -1.8, v: 25.0 },
            ],
            nominal_control: NominalControl::Previous,
        }
    }

    /// Emergency braking: the lead vehicle brakes to a stop while the
    /// adjacent lane is occupied. The desired speed stays unchanged for 3 s.
    pub fn braking() -> Self {
        let dt = 0.1;
        let (duration, horizon) = (10.0, 40);
        let end = duration + 10.0;
        let half = [2.4, 1.0];
        Scenario {
            name: "braking".into(),
            dt,
            duration,
            horizon,
            wheelbase: 2.7,
            road: RoadSpec::Arcs {
                start: [0.0, 0.0, 0.0],
                pieces: vec![[60.0, 0.0], [120.0, 1.0 / 800.0], [200.0, 0.0]],
            },
            lanes: 2,
            lane_width: 3.6,
            boundary_margin: 1.0,
            safety_distance: 1.0,
            u_min: [-6.0, -0.5],
            u_max: [4.0, 0.5],
            du_min: [-1.5, -0.06],
            du_max: [1.5, 0.06],
            weights: Weights {
                r: [400.0, 0.5, 0.05, 1.0],
                q_u: [20.0, 0.5],
                q_du: [0.5, 0.005],
                q_eps: 0.01,
            },
            barrier: BarrierParams { a: 1.0, b: 30.0 },
            inflation: 1.0,
            ev0: VehicleState::new(0.0, -1.8, 0.0, 20.0),
            ev_half_extents: half,
            ovs: vec![
                OvTrack::from_profile(28.0, -1.8, 20.0, &[(0.5, -4.0)], dt, end, half),
                OvTrack::from_profile(15.0, 1.8, 20.0, &[(0.5, -4.0)], dt, end, half),
            ],
            reference: vec![
                RefPoint { t: 0.0, d: -1.8, v: 20.0 },
                RefPoint { t: 3.0, d: -1.8, v: 20.0 },
                RefPoint { t: 3.0 + 1e-6, d: -1.8, v: 0.0 },
            ],
            nominal_control: NominalControl::Previous,
        }
    }

    pub fn fixture(name: &str) -> Option<Self> {
        match name {
            "overtaking" => Some(Scenario::overtaking()),
            "braking" => Some(Scenario::braking()),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_validate() {
        Scenario::overtaking().validate().unwrap();
        Scenario::braking().validate().unwrap();
    }

    #[test]
    fn json_round_trip() {
        let sc = Scenario::braking();
        let back = Scenario::from_json(sc.to_json().as_bytes()).unwrap();
        assert_eq!(back, sc);
    }

    #[test]
    fn malformed_json_reports_location() {
        let err = Scenario::from_json(b"{\n \"name\": 3 }").unwrap_err();
        assert!(matches!(err, MpicError::Parse { ref location, .. } if location.starts_with("line 2")));
    }

    #[test]
    fn table_lookup() {
        let sc = Scenario::overtaking();
        let row = sc.ovs[0].table[7];
        assert_eq!(sc.ov_state(0, row.t).unwrap(), row.state);
        let a = sc.ov_state(0, 1.0).unwrap();
        let b = sc.ov_state(0, 1.1).unwrap();
        let mid = sc.ov_state(0, 1.05).unwrap();
        assert!((mid.x - 0.5 * (a.x + b.x)).abs() < 1e-12);
        assert!(matches!(sc.ov_state(0, -1.0), Err(MpicError::OutOfTableRange { .. })));
        assert!(matches!(sc.ov_state(0, 1e6), Err(MpicError::OutOfTableRange { .. })));
    }

    #[test]
    fn braking_table_speed_is_nonincreasing() {
        let sc = Scenario::braking();
        let t = &sc.ovs[0].table;
        assert!(t.windows(2).all(|w| w[1].state.v <= w[0].state.v));
        assert_eq!(t.last().unwrap().state.v, 0.0);
        assert!(t.windows(2).all(|w| w[1].state.x >= w[0].state.x));
    }

    #[test]
    fn reference_advances_at_desired_speed() {
        let sc = Scenario::overtaking();
        let r = sc.reference_horizon(0.0, 10.0, 10);
        assert_eq!(r.len(), 11);
        assert!((r[10][0] - 35.0).abs() < 1e-9);
        assert_eq!(r[0][1], -1.8);
    }

    #[test]
    fn invalid_bounds_rejected() {
        let mut sc = Scenario::overtaking();
        sc.u_min[0] = 10.0;
        assert!(sc.validate().is_err());
        let mut sc = Scenario::overtaking();
        sc.boundary_margin = 2.0;
        assert!(sc.validate().is_err());
    }
}
