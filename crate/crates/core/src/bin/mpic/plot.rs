//! Minimal static SVG line charts.

use std::fmt::Write as _;

use mpic_core::world::{PlanTrace, Road, Scenario};

const W: f64 = 720.0;
const H: f64 = 260.0;
const PAD: f64 = 40.0;

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
    pub colour: &'a str,
    pub dashed: bool,
}

fn bounds(series: &[Series], equal_aspect: bool) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-9 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-9 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    if equal_aspect {
        let sx = (x1 - x0) / (W - 2.0 * PAD);
        let sy = (y1 - y0) / (H - 2.0 * PAD);
        let s = sx.max(sy);
        let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
        x0 = cx - 0.5 * s * (W - 2.0 * PAD);
        x1 = cx + 0.5 * s * (W - 2.0 * PAD);
        y0 = cy - 0.5 * s * (H - 2.0 * PAD);
        y1 = cy + 0.5 * s * (H - 2.0 * PAD);
    }
    (x0, x1, y0, y1)
}

pub fn chart(title: &str, xlabel: &str, series: &[Series], equal_aspect: bool) -> String {
    let (x0, x1, y0, y1) = bounds(series, equal_aspect);
    let px = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="16" text-anchor="middle" font-size="13">{title}</text>"#, W / 2.0).unwrap();
    writeln!(
        s,
        r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    )
    .unwrap();
    writeln!(s, r#"<text x="{PAD}" y="{}">{x0:.1}</text>"#, H - PAD + 14.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{x1:.1}</text>"#, W - PAD, H - PAD + 14.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, W / 2.0, H - 8.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y1:.2}</text>"#, PAD - 4.0, PAD + 4.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y0:.2}</text>"#, PAD - 4.0, H - PAD).unwrap();
    for (i, se) in series.iter().enumerate() {
        let mut d = String::new();
        let mut pen_up = true;
        for &(x, y) in &se.points {
            if !(x.is_finite() && y.is_finite()) {
                pen_up = true;
                continue;
            }
            write!(d, "{}{:.2},{:.2} ", if pen_up { "M" } else { "L" }, px(x), py(y)).unwrap();
            pen_up = false;
        }
        let dash = if se.dashed { r#" stroke-dasharray="5,4""# } else { "" };
        writeln!(s, r#"<path d="{d}" fill="none" stroke="{}" stroke-width="1.5"{dash}/>"#, se.colour).unwrap();
        let ly = PAD + 14.0 + 13.0 * i as f64;
        writeln!(s, r#"<text x="{}" y="{ly}" fill="{}">{}</text>"#, PAD + 6.0, se.colour, se.label).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Overhead view, actuation against bounds, and obstacle distance against
/// the safety margin.
pub fn trace_plots(trace: &PlanTrace, sc: &Scenario, road: &Road) -> Vec<(&'static str, String)> {
    let t: Vec<f64> = trace.rows.iter().map(|r| r.t).collect();
    let t_end = t.last().copied().unwrap_or(0.0);
    let mut overhead = Vec::new();
    let ev: Vec<(f64, f64)> = trace
        .rows
        .iter()
        .map(|r| {
            let g = road.from_frenet(&r.state);
            (g.x, g.y)
        })
        .collect();
    let s_max = trace.rows.iter().map(|r| r.state.x).fold(0.0, f64::max) + 20.0;
    let edge = |d: f64| -> Vec<(f64, f64)> {
        (0..=200)
            .map(|i| {
                let s = s_max * i as f64 / 200.0;
                let (x, y, th) = road.pose_at(s);
                (x - d * th.sin(), y + d * th.cos())
            })
            .collect()
    };
    let half = sc.lanes as f64 * sc.lane_width / 2.0;
    overhead.push(Series { label: "road edge", points: edge(half), colour: "#444", dashed: false });
    overhead.push(Series { label: "", points: edge(-half), colour: "#444", dashed: false });
    overhead.push(Series { label: "ego", points: ev, colour: "#c0392b", dashed: false });
    for (i, ov) in sc.ovs.iter().enumerate() {
        let pts = t
            .iter()
            .filter_map(|&tt| ov.state_at(tt).ok())
            .map(|f| {
                let g = road.from_frenet(&f);
                (g.x, g.y)
            })
            .collect();
        let colour = ["#2471a3", "#229954", "#7d3c98", "#b9770e"][i % 4];
        overhead.push(Series { label: "obstacle", points: pts, colour, dashed: true });
    }

    let line = |pts: Vec<(f64, f64)>, label, colour, dashed| Series { label, points: pts, colour, dashed };
    let flat = |v: f64| vec![(0.0, v), (t_end, v)];
    let accel = vec![
        line(trace.rows.iter().map(|r| (r.t, r.control.a)).collect(), "a [m/s2]", "#c0392b", false),
        line(flat(sc.u_min[0]), "bounds", "#888", true),
        line(flat(sc.u_max[0]), "", "#888", true),
    ];
    let steer = vec![
        line(trace.rows.iter().map(|r| (r.t, r.control.delta)).collect(), "delta [rad]", "#2471a3", false),
        line(flat(sc.u_min[1]), "bounds", "#888", true),
        line(flat(sc.u_max[1]), "", "#888", true),
    ];
    let dist = vec![
        line(trace.rows.iter().map(|r| (r.t, r.min_ov_dist)).collect(), "min obstacle distance [m]", "#229954", false),
        line(flat(sc.safety_distance), "safety margin", "#888", true),
    ];
    vec![
        ("trajectory.svg", chart("Overhead view", "X [m]", &overhead, true)),
        ("acceleration.svg", chart("Acceleration", "t [s]", &accel, false)),
        ("steering.svg", chart("Steering", "t [s]", &steer, false)),
        ("distance.svg", chart("Distance to obstacles", "t [s]", &dist, false)),
    ]
}
