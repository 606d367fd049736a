//! Per-channel scores as CSV and a flat scalp plot.
//!
//! Electrodes are projected orthographically onto the (x, y) plane and
//! scaled so the farthest one lands on the unit circle.

use std::fmt::Write as _;

pub struct Electrode<'a> {
    pub name: &'a str,
    pub position: [f64; 3],
    pub raw: f64,
    pub normalized: f64,
}

/// Unit-disc coordinates, one per electrode.
pub fn project(positions: &[[f64; 3]]) -> Vec<(f64, f64)> {
    let r = positions
        .iter()
        .map(|p| p[0].hypot(p[1]))
        .fold(0.0f64, f64::max);
    let r = if r > 0.0 { r } else { 1.0 };
    positions.iter().map(|p| (p[0] / r, p[1] / r)).collect()
}

pub fn csv(electrodes: &[Electrode]) -> String {
    let proj = project(&electrodes.iter().map(|e| e.position).collect::<Vec<_>>());
    let mut s = String::from("channel,x,y,z,u,v,raw,normalized\n");
    for (e, (u, v)) in electrodes.iter().zip(proj) {
        let [x, y, z] = e.position;
        let _ = writeln!(s, "{},{x},{y},{z},{u:.6},{v:.6},{:.9},{:.6}", e.name, e.raw, e.normalized);
    }
    s
}

/// Blue (0) through white to red (1).
pub fn color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let a = t / 0.5;
        (a, a, 1.0)
    } else {
        let a = (1.0 - t) / 0.5;
        (1.0, a, a)
    };
    let c = |v: f64| (v * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(r), c(g), c(b))
}

pub fn svg(electrodes: &[Electrode]) -> String {
    const SIZE: f64 = 400.0;
    const RADIUS: f64 = 170.0;
    let mid = SIZE / 2.0;
    let proj = project(&electrodes.iter().map(|e| e.position).collect::<Vec<_>>());
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(
        s,
        r##"<circle cx="{mid}" cy="{mid}" r="{}" fill="none" stroke="#333" stroke-width="2"/>"##,
        RADIUS + 12.0
    );
    for (e, (u, v)) in electrodes.iter().zip(proj) {
        let (cx, cy) = (mid + u * RADIUS, mid - v * RADIUS);
        let _ = writeln!(
            s,
            r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="11" fill="{}" stroke="#333"><title>{} {:.6}</title></circle>"##,
            color(e.normalized),
            e.name,
            e.raw
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.2}" y="{:.2}" font-size="9" text-anchor="middle" font-family="sans-serif">{}</text>"#,
            cy + 3.0,
            e.name
        );
    }
    s.push_str("</svg>\n");
    s
}
