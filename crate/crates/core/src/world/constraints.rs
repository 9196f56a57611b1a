//! Driving constraints `g_j <= 0` and the quadratic stage cost.

use super::scenario::{Scenario, Weights};
use crate::error::Result;
use crate::state::{CONTROL_DIM, STATE_DIM};

/// Gap between two axis-aligned boxes given by centre and half-extents.
/// Positive is the Euclidean clearance; overlapping boxes give minus the
/// smaller penetration depth so that the value stays continuous.
pub fn box_distance(c1: [f64; 2], h1: [f64; 2], c2: [f64; 2], h2: [f64; 2]) -> f64 {
    let ex = (c1[0] - c2[0]).abs() - (h1[0] + h2[0]);
    let ey = (c1[1] - c2[1]).abs() - (h1[1] + h2[1]);
    if ex > 0.0 || ey > 0.0 {
        ex.max(0.0).hypot(ey.max(0.0))
    } else {
        ex.max(ey)
    }
}

/// Obstacle boxes at one time instant, hoisted out of inner loops.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleSnapshot {
    pub t: f64,
    pub boxes: Vec<([f64; 2], [f64; 2])>,
}

impl ObstacleSnapshot {
    pub fn at(sc: &Scenario, t: f64) -> Result<Self> {
        let mut boxes = Vec::with_capacity(sc.ovs.len());
        for (i, ov) in sc.ovs.iter().enumerate() {
            let s = sc.ov_state(i, t)?;
            boxes.push(([s.x, s.y], ov.half_extents));
        }
        Ok(ObstacleSnapshot { t, boxes })
    }
}

/// Number of constraints for a scenario: one per obstacle, two lateral,
/// four control bounds and four increment bounds.
pub fn constraint_count(sc: &Scenario) -> usize {
    sc.ovs.len() + 2 + 4 + 4
}

/// Fills `out` with the margins in the fixed order described at
/// [`constraint_count`]. Control and increment residuals are ordered
/// `[a_hi, a_lo, delta_hi, delta_lo]`.
pub fn margins_into(
    x: &[f64; STATE_DIM],
    u: &[f64; CONTROL_DIM],
    du: &[f64; CONTROL_DIM],
    sc: &Scenario,
    obstacles: &ObstacleSnapshot,
    out: &mut [f64],
) {
    let mut k = 0;
    for (c, h) in &obstacles.boxes {
        out[k] = sc.safety_distance - box_distance([x[0], x[1]], sc.ev_half_extents, *c, *h);
        k += 1;
    }
    let bound = sc.lateral_bound();
    out[k] = x[1] - bound;
    out[k + 1] = -x[1] - bound;
    k += 2;
    for i in 0..CONTROL_DIM {
        out[k] = u[i] - sc.u_max[i];
        out[k + 1] = sc.u_min[i] - u[i];
        k += 2;
    }
    for i in 0..CONTROL_DIM {
        out[k] = du[i] - sc.du_max[i];
        out[k + 1] = sc.du_min[i] - du[i];
        k += 2;
    }
}

/// Constraint margins at time `t`; negative means satisfied.
pub fn constraint_margins(
    x: &[f64; STATE_DIM],
    u: &[f64; CONTROL_DIM],
    du: &[f64; CONTROL_DIM],
    sc: &Scenario,
    t: f64,
) -> Result<Vec<f64>> {
    let snap = ObstacleSnapshot::at(sc, t)?;
    let mut out = vec![0.0; constraint_count(sc)];
    margins_into(x, u, du, sc, &snap, &mut out);
    Ok(out)
}

/// `|x - r|^2_R + |u - s|^2_Qu + |du|^2_Qdu` with `|v|^2_S = v' S^-1 v` and
/// diagonal weights.
pub fn stage_cost(
    x: &[f64; STATE_DIM],
    u: &[f64; CONTROL_DIM],
    du: &[f64; CONTROL_DIM],
    r: &[f64; STATE_DIM],
    s: &[f64; CONTROL_DIM],
    w: &Weights,
) -> f64 {
    let mut c = 0.0;
    for i in 0..STATE_DIM {
        c += (x[i] - r[i]).powi(2) / w.r[i];
    }
    for i in 0..CONTROL_DIM {
        c += (u[i] - s[i]).powi(2) / w.q_u[i];
        c += du[i].powi(2) / w.q_du[i];
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scenario::OvTrack;
    use proptest::prelude::*;

    fn far_scenario() -> Scenario {
        let mut sc = Scenario::overtaking();
        let end = sc.duration + sc.horizon as f64 * sc.dt + 1.0;
        sc.ovs = vec![
            OvTrack::from_profile(200.0, -1.8, 0.0, &[], sc.dt, end, [2.4, 1.0]),
            OvTrack::from_profile(150.0, 1.8, 0.0, &[], sc.dt, end, [2.4, 1.0]),
        ];
        sc
    }

    #[test]
    fn feasible_at_lane_centre() {
        let sc = far_scenario();
        let g = constraint_margins(&[50.0, -1.8, 0.0, 20.0], &[0.0, 0.0], &[0.0, 0.0], &sc, 0.0).unwrap();
        assert_eq!(g.len(), 12);
        assert!(g.iter().all(|v| *v < 0.0), "{g:?}");
    }

    #[test]
    fn exactly_at_safety_distance() {
        let sc = far_scenario();
        // OV 0 at s = 200, half-lengths 2.4 each, so a 1 m gap puts the EV at 194.2
        let g = constraint_margins(&[194.2, -1.8, 0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], &sc, 0.0).unwrap();
        assert!(g[0].abs() < 1e-9, "{}", g[0]);
    }

    #[test]
    fn hand_geometry() {
        // gap of 3 m along s, half-extents summing to 2 m
        let d = box_distance([0.0, 0.0], [1.0, 1.0], [5.0, 0.0], [1.0, 1.0]);
        assert!((d - 3.0).abs() < 1e-12);
        assert!((1.0 - d + 2.0).abs() < 1e-12);
        let diag = box_distance([0.0, 0.0], [1.0, 1.0], [5.0, 6.0], [1.0, 1.0]);
        assert!((diag - 5.0).abs() < 1e-12);
        let inside = box_distance([0.0, 0.0], [1.0, 1.0], [1.5, 0.2], [1.0, 1.0]);
        assert!((inside + 0.5).abs() < 1e-12);
    }

    #[test]
    fn stage_cost_examples() {
        let w = Weights { r: [4.0, 1.0, 1.0, 1.0], q_u: [1.0; 2], q_du: [1.0; 2], q_eps: 0.01 };
        let x = [2.0, 0.0, 0.0, 0.0];
        assert_eq!(stage_cost(&x, &[0.0; 2], &[0.0; 2], &[0.0; 4], &[0.0; 2], &w), 1.0);
        assert_eq!(stage_cost(&x, &[0.3; 2], &[0.0; 2], &x, &[0.3; 2], &w), 0.0);
        let w = Weights { r: [2.0, 3.0, 5.0, 7.0], q_u: [11.0, 13.0], q_du: [17.0, 19.0], q_eps: 0.01 };
        let (x, r) = ([1.0, -2.0, 0.5, 3.0], [0.5, 1.0, 0.0, 2.0]);
        let (u, s, du) = ([0.2, -0.1], [0.1, 0.1], [0.05, -0.02]);
        let expected = 0.25 / 2.0 + 9.0 / 3.0 + 0.25 / 5.0 + 1.0 / 7.0 + 0.01 / 11.0 + 0.04 / 13.0
            + 0.0025 / 17.0
            + 0.0004 / 19.0;
        assert!((stage_cost(&x, &u, &du, &r, &s, &w) - expected).abs() <= 1e-12);
    }

    proptest! {
        #[test]
        fn stage_cost_nonnegative(v in proptest::collection::vec(-10.0f64..10.0, 16)) {
            let w = Weights { r: [1.0, 2.0, 0.5, 3.0], q_u: [0.7, 0.2], q_du: [0.1, 0.4], q_eps: 0.01 };
            let a = |i: usize| [v[i], v[i + 1], v[i + 2], v[i + 3]];
            let c = stage_cost(&a(0), &[v[4], v[5]], &[v[6], v[7]], &a(8), &[v[12], v[13]], &w);
            prop_assert!(c >= 0.0);
        }

        #[test]
        fn margins_are_continuous(s in 20.0f64..190.0, d in -3.0f64..3.0, a in -5.0f64..5.0) {
            let sc = far_scenario();
            let x = [s, d, 0.1, 10.0];
            let g0 = constraint_margins(&x, &[a, 0.1], &[0.2, 0.01], &sc, 1.0).unwrap();
            let x1 = [s + 1e-6, d - 1e-6, 0.1, 10.0];
            let g1 = constraint_margins(&x1, &[a + 1e-6, 0.1], &[0.2, 0.01 + 1e-6], &sc, 1.0).unwrap();
            for (p, q) in g0.iter().zip(&g1) {
                prop_assert!((p - q).abs() <= 1e-3);
            }
        }
    }
}
