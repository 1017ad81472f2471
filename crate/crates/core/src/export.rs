//! Depth-map and table writers: binary PPM (one pixel per patch), SVG with a
//! colour ramp, and CSV grids.
//!
//! PPM maps use grayscale `round(255 · depth / L)`, so deeper tokens are
//! brighter and an unprocessed position (depth 0) is black. SVG maps use a
//! blue (shallow) to red (deep) ramp, see [`ramp`].

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Gray level of a depth in `[0, max_depth]`.
pub fn gray(depth: f64, max_depth: usize) -> u8 {
    let v = (255.0 * depth / max_depth.max(1) as f64).round();
    v.clamp(0.0, 255.0) as u8
}

/// Colour ramp from blue at depth 1 through white at the midpoint to red at
/// `max_depth`.
pub fn ramp(depth: f64, max_depth: usize) -> [u8; 3] {
    let t = if max_depth > 1 {
        ((depth - 1.0) / (max_depth - 1) as f64).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let lerp = |a: f64, b: f64, s: f64| (a + (b - a) * s).round() as u8;
    if t < 0.5 {
        let s = t / 0.5;
        [lerp(49.0, 247.0, s), lerp(54.0, 247.0, s), lerp(149.0, 247.0, s)]
    } else {
        let s = (t - 0.5) / 0.5;
        [lerp(247.0, 165.0, s), lerp(247.0, 0.0, s), lerp(247.0, 38.0, s)]
    }
}

fn check_grid(values: &[f64], grid: usize) -> Result<()> {
    if grid == 0 || values.len() != grid * grid {
        return Err(Error::Shape(format!("{} values for a {grid}x{grid} grid", values.len())));
    }
    Ok(())
}

/// Binary (P6) PPM of a `grid × grid` depth map, one pixel per patch.
pub fn depth_ppm(values: &[f64], grid: usize, max_depth: usize) -> Result<Vec<u8>> {
    check_grid(values, grid)?;
    let mut out = format!("P6\n{grid} {grid}\n255\n").into_bytes();
    for &v in values {
        let g = gray(v, max_depth);
        out.extend([g, g, g]);
    }
    Ok(out)
}

/// SVG depth map with one labelled square per patch and a legend.
pub fn depth_svg(values: &[f64], grid: usize, max_depth: usize, title: &str) -> Result<String> {
    check_grid(values, grid)?;
    let cell = 32;
    let size = grid * cell;
    let legend_h = 28;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{}" viewBox="0 0 {size} {}" font-family="monospace" font-size="11">"#,
        size + legend_h + 16,
        size + legend_h + 16
    );
    let _ = writeln!(s, "<title>{}</title>", escape(title));
    for (i, &v) in values.iter().enumerate() {
        let (r, c) = (i / grid, i % grid);
        let [red, green, blue] = ramp(v, max_depth);
        let _ = writeln!(
            s,
            r##"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="#{red:02x}{green:02x}{blue:02x}"/><text x="{}" y="{}" text-anchor="middle">{v:.1}</text>"##,
            c * cell,
            r * cell,
            c * cell + cell / 2,
            r * cell + cell / 2 + 4
        );
    }
    let y = size + 8;
    let step = size as f64 / max_depth.max(1) as f64;
    for d in 1..=max_depth {
        let [red, green, blue] = ramp(d as f64, max_depth);
        let x = (d - 1) as f64 * step;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.1}" y="{y}" width="{step:.1}" height="12" fill="#{red:02x}{green:02x}{blue:02x}"/><text x="{:.1}" y="{}" text-anchor="middle">{d}</text>"##,
            x + step / 2.0,
            y + 26
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// `grid × grid` values as CSV rows, preceded by a comment naming the unit.
pub fn grid_csv(values: &[f64], grid: usize, unit: &str) -> Result<String> {
    check_grid(values, grid)?;
    let mut s = format!("# {unit}; row-major patch grid, row 0 at the top\n");
    for row in values.chunks(grid) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    Ok(s)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
