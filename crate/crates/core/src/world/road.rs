//! Road reference line and the Frenet transform.
//!
//! The reference line is a chain of straight and constant-curvature pieces.
//! A polyline is the special case of straight pieces with heading jumps.

use serde::{Deserialize, Serialize};

use crate::error::{MpicError, Result};
use crate::state::VehicleState;

/// A straight (`curvature == 0`) or circular piece of the reference line.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Piece {
    s0: f64,
    length: f64,
    curvature: f64,
    x0: f64,
    y0: f64,
    heading0: f64,
}

impl Piece {
    fn pose(&self, sigma: f64) -> (f64, f64, f64) {
        let k = self.curvature;
        let th = self.heading0 + k * sigma;
        if k.abs() < 1e-12 {
            (
                self.x0 + sigma * self.heading0.cos(),
                self.y0 + sigma * self.heading0.sin(),
                th,
            )
        } else {
            (
                self.x0 + (th.sin() - self.heading0.sin()) / k,
                self.y0 - (th.cos() - self.heading0.cos()) / k,
                th,
            )
        }
    }

    /// Foot point parameter (clamped to the piece) of the projection of `(x, y)`.
    fn project(&self, x: f64, y: f64) -> f64 {
        let k = self.curvature;
        let sigma = if k.abs() < 1e-12 {
            (x - self.x0) * self.heading0.cos() + (y - self.y0) * self.heading0.sin()
        } else {
            let cx = self.x0 - self.heading0.sin() / k;
            let cy = self.y0 + self.heading0.cos() / k;
            let (vx, vy) = (x - cx, y - cy);
            let th = if k > 0.0 {
                vx.atan2(-vy)
            } else {
                (-vx).atan2(vy)
            };
            let mid = 0.5 * self.length;
            wrap_angle(th - self.heading0 - k * mid) / k + mid
        };
        sigma.clamp(0.0, self.length)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Serialized road description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadSpec {
    /// Start pose `[x, y, heading]` followed by `(length, curvature)` pieces.
    Arcs {
        start: [f64; 3],
        pieces: Vec<[f64; 2]>,
    },
    Polyline { points: Vec<[f64; 2]> },
}

/// Global (map frame) pose and speed.
pub type GlobalState = VehicleState;

#[derive(Debug, Clone, PartialEq)]
pub struct Road {
    pieces: Vec<Piece>,
    /// Points farther than this from the reference line are rejected.
    pub lateral_limit: f64,
}

impl Road {
    pub fn from_spec(spec: &RoadSpec, lateral_limit: f64) -> Result<Self> {
        let mut pieces = Vec::new();
        match spec {
            RoadSpec::Arcs { start, pieces: ps } => {
                let (mut x, mut y, mut th) = (start[0], start[1], start[2]);
                let mut s0 = 0.0;
                for (i, p) in ps.iter().enumerate() {
                    let (length, curvature) = (p[0], p[1]);
                    if !(length > 0.0 && length.is_finite() && curvature.is_finite()) {
                        return Err(MpicError::InvalidConfig(format!("road piece {i}: bad length/curvature")));
                    }
                    if (curvature * length).abs() >= std::f64::consts::PI {
                        return Err(MpicError::InvalidConfig(format!(
                            "road piece {i}: turns by pi or more, split it"
                        )));
                    }
                    let piece = Piece { s0, length, curvature, x0: x, y0: y, heading0: th };
                    (x, y, th) = piece.pose(length);
                    s0 += length;
                    pieces.push(piece);
                }
            }
            RoadSpec::Polyline { points } => {
                let mut s0 = 0.0;
                for (i, w) in points.windows(2).enumerate() {
                    let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
                    let length = dx.hypot(dy);
                    if !(length > 0.0 && length.is_finite()) {
                        return Err(MpicError::InvalidConfig(format!("polyline segment {i} is degenerate")));
                    }
                    pieces.push(Piece {
                        s0,
                        length,
                        curvature: 0.0,
                        x0: w[0][0],
                        y0: w[0][1],
                        heading0: dy.atan2(dx),
                    });
                    s0 += length;
                }
            }
        }
        if pieces.is_empty() {
            return Err(MpicError::InvalidConfig("road has no pieces".into()));
        }
        Ok(Road { pieces, lateral_limit })
    }

    pub fn length(&self) -> f64 {
        let p = self.pieces.last().unwrap();
        p.s0 + p.length
    }

    fn piece_at(&self, s: f64) -> &Piece {
        let i = self.pieces.partition_point(|p| p.s0 <= s).saturating_sub(1);
        &self.pieces[i]
    }

    /// Reference-line point and tangent heading at arc length `s`. Outside the
    /// road the end pieces are extended along their tangents.
    pub fn pose_at(&self, s: f64) -> (f64, f64, f64) {
        let p = self.piece_at(s);
        let sigma = s - p.s0;
        if sigma > p.length {
            let (x, y, th) = p.pose(p.length);
            let e = sigma - p.length;
            (x + e * th.cos(), y + e * th.sin(), th)
        } else if sigma < 0.0 {
            let (x, y, th) = p.pose(0.0);
            (x + sigma * th.cos(), y + sigma * th.sin(), th)
        } else {
            p.pose(sigma)
        }
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        self.piece_at(s).curvature
    }

    /// Nearest-point projection. Returns `(s, d, phi - heading(s), v)`.
    pub fn to_frenet(&self, g: &GlobalState) -> Result<VehicleState> {
        let mut best: Option<(f64, f64, f64)> = None;
        for p in &self.pieces {
            let sigma = p.project(g.x, g.y);
            let (fx, fy, _) = p.pose(sigma);
            let dist = (g.x - fx).hypot(g.y - fy);
            if best.map_or(true, |b| dist < b.2) {
                best = Some((p.s0 + sigma, sigma, dist));
            }
        }
        let (s, _, dist) = best.unwrap();
        let (fx, fy, th) = self.pose_at(s);
        let d = -(g.x - fx) * th.sin() + (g.y - fy) * th.cos();
        if dist > self.lateral_limit || (dist - d.abs()).abs() > 1e-6 * (1.0 + dist) {
            return Err(MpicError::OffRoadProjection {
                offset: dist,
                limit: self.lateral_limit,
            });
        }
        Ok(VehicleState::new(s, d, wrap_angle(g.phi - th), g.v))
    }

    pub fn from_frenet(&self, f: &VehicleState) -> GlobalState {
        let (x, y, th) = self.pose_at(f.x);
        VehicleState::new(x - f.y * th.sin(), y + f.y * th.cos(), wrap_angle(f.phi + th), f.v)
    }
}
