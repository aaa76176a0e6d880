//! Minimal SVG emitters for metric tables.

use std::fmt::Write;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Scatter matrix of named columns, one colour per group.
///
/// `points[g]` holds the rows of group `g`, each with one value per column.
pub fn pair_plot(columns: &[String], groups: &[(String, Vec<Vec<f64>>)]) -> String {
    let k = columns.len().max(1);
    let cell = 140.0;
    let pad = 40.0;
    let size = pad + cell * k as f64 + 120.0;
    let ranges: Vec<(f64, f64)> = (0..columns.len())
        .map(|j| range(groups.iter().flat_map(|(_, rows)| rows.iter().map(move |r| r[j]))))
        .collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="10">"#
    );
    for (i, ci) in columns.iter().enumerate() {
        for j in 0..columns.len() {
            let x0 = pad + cell * j as f64;
            let y0 = pad + cell * i as f64;
            let _ = writeln!(
                s,
                r##"<rect x="{x0}" y="{y0}" width="{w}" height="{w}" fill="none" stroke="#999"/>"##,
                w = cell - 6.0
            );
            if i == j {
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                    x0 + cell / 2.0,
                    y0 + cell / 2.0,
                    escape(ci)
                );
                continue;
            }
            let ((xl, xh), (yl, yh)) = (ranges[j], ranges[i]);
            for (g, (_, rows)) in groups.iter().enumerate() {
                for r in rows {
                    let (vx, vy) = (r[j], r[i]);
                    if !(vx.is_finite() && vy.is_finite()) {
                        continue;
                    }
                    let px = x0 + 4.0 + (vx - xl) / (xh - xl) * (cell - 14.0);
                    let py = y0 + cell - 10.0 - (vy - yl) / (yh - yl) * (cell - 14.0);
                    let _ = writeln!(
                        s,
                        r#"<circle cx="{px:.2}" cy="{py:.2}" r="2.5" fill="{}" fill-opacity="0.7"/>"#,
                        PALETTE[g % PALETTE.len()]
                    );
                }
            }
        }
    }
    legend(&mut s, pad + cell * k as f64 + 10.0, pad, groups.iter().map(|(n, _)| n.as_str()));
    s.push_str("</svg>\n");
    s
}

/// Parallel coordinates: one polyline per named line across the axes, each
/// axis scaled to its own range.
pub fn parallel_coordinates(axes: &[String], lines: &[(String, Vec<f64>)]) -> String {
    let n = axes.len().max(2);
    let (width, height, pad) = (120.0 * n as f64 + 160.0, 360.0, 40.0);
    let span = 120.0 * (n - 1) as f64;
    let ranges: Vec<(f64, f64)> = (0..axes.len())
        .map(|j| range(lines.iter().map(|(_, v)| v[j])))
        .collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
    );
    let ax = |j: usize| pad + if axes.len() > 1 { span * j as f64 / (axes.len() - 1) as f64 } else { 0.0 };
    for (j, name) in axes.iter().enumerate() {
        let x = ax(j);
        let _ = writeln!(s, r##"<line x1="{x}" y1="{pad}" x2="{x}" y2="{}" stroke="#444"/>"##, height - pad);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, pad - 12.0, escape(name));
        let (lo, hi) = ranges[j];
        let _ = writeln!(s, r#"<text x="{}" y="{}">{hi:.3}</text>"#, x + 3.0, pad + 8.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{lo:.3}</text>"#, x + 3.0, height - pad);
    }
    for (g, (_, values)) in lines.iter().enumerate() {
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(j, v)| {
                let (lo, hi) = ranges[j];
                let y = height - pad - (v - lo) / (hi - lo) * (height - 2.0 * pad);
                format!("{:.2},{y:.2}", ax(j))
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            pts.join(" "),
            PALETTE[g % PALETTE.len()]
        );
    }
    legend(&mut s, pad + span + 30.0, pad, lines.iter().map(|(n, _)| n.as_str()));
    s.push_str("</svg>\n");
    s
}

fn legend<'a>(s: &mut String, x: f64, y: f64, names: impl Iterator<Item = &'a str>) {
    for (g, name) in names.enumerate() {
        let yy = y + 14.0 * g as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            yy - 9.0,
            PALETTE[g % PALETTE.len()],
            x + 14.0,
            yy,
            escape(name)
        );
    }
}
