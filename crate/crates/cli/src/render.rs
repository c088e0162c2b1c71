//! SVG heatmaps of a field column on a triangle mesh.
//!
//! The mesh is projected orthographically onto the x-y plane, viewed from
//! +z, and faces are painted back to front by mean z. Each face is filled
//! with the mean of its vertex values mapped onto a 256-step colormap over
//! the column's `[min, max]`: step `i` is `rgb(i, 0, 255 - i)`, so the
//! minimum is pure blue and the maximum pure red. A constant column maps
//! every face to step 0.

use std::fmt::Write as _;

use ecgi_core::field::SpatioTemporalField;
use ecgi_core::mesh::TriMesh;

const CANVAS: f64 = 512.0;
const MARGIN: f64 = 8.0;

/// Colormap step of `value` within `[lo, hi]`.
pub fn color_step(value: f64, lo: f64, hi: f64) -> u8 {
    if hi <= lo {
        return 0;
    }
    let s = ((value - lo) / (hi - lo)).clamp(0.0, 1.0);
    (s * 255.0).round() as u8
}

pub fn color(step: u8) -> String {
    format!("rgb({},0,{})", step, 255 - step)
}

pub fn render_svg(mesh: &TriMesh, field: &SpatioTemporalField, time: usize) -> Result<String, String> {
    if field.nodes() != mesh.vertex_count() {
        return Err(format!(
            "field has {} rows but the mesh has {} vertices",
            field.nodes(),
            mesh.vertex_count()
        ));
    }
    if time >= field.times() {
        return Err(format!(
            "time index {time} out of range (field has {} samples)",
            field.times()
        ));
    }
    let column: Vec<f64> = (0..field.nodes()).map(|i| field.get(i, time)).collect();
    let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let verts = mesh.vertices();
    let (min, max) = mesh.bounding_box();
    let span = (max.x - min.x).max(max.y - min.y).max(f64::EPSILON);
    let scale = (CANVAS - 2.0 * MARGIN) / span;
    let project = |i: usize| {
        let p = verts[i];
        (MARGIN + (p.x - min.x) * scale, MARGIN + (max.y - p.y) * scale)
    };

    let mut order: Vec<usize> = (0..mesh.faces().len()).collect();
    let depth = |f: usize| mesh.faces()[f].iter().map(|&i| verts[i].z).sum::<f64>();
    order.sort_by(|&a, &b| depth(a).total_cmp(&depth(b)));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{c}" height="{c}" viewBox="0 0 {c} {c}">"#,
        c = CANVAS
    );
    for f in order {
        let face = mesh.faces()[f];
        let mean = face.iter().map(|&i| column[i]).sum::<f64>() / 3.0;
        let fill = color(color_step(mean, lo, hi));
        let pts: Vec<String> = face
            .iter()
            .map(|&i| {
                let (x, y) = project(i);
                format!("{x:.3},{y:.3}")
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polygon points="{}" fill="{fill}" stroke="{fill}" stroke-width="0.5"/>"#,
            pts.join(" ")
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Distinct fill colors used in an SVG produced by [`render_svg`].
pub fn fill_colors(svg: &str) -> std::collections::BTreeSet<String> {
    svg.split("fill=\"")
        .skip(1)
        .filter_map(|s| s.split('"').next())
        .map(str::to_owned)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ecgi_core::mesh::icosphere;
    use ecgi_core::nalgebra::DMatrix;
    use ecgi_core::ops::TemporalGrid;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(color(color_step(0.0, 0.0, 1.0)), "rgb(0,0,255)");
        assert_eq!(color(color_step(1.0, 0.0, 1.0)), "rgb(255,0,0)");
        assert_eq!(color_step(0.5, 0.0, 1.0), 128);
        assert_eq!(color_step(3.0, 3.0, 3.0), 0);
    }

    #[test]
    fn constant_field_is_single_color() {
        let mesh = icosphere(1, 1.0).unwrap();
        let field =
            SpatioTemporalField::new(DMatrix::from_element(42, 5, 0.7), TemporalGrid::new(1.0, 5).unwrap()).unwrap();
        let svg = render_svg(&mesh, &field, 1).unwrap();
        assert_eq!(fill_colors(&svg).len(), 1);
        assert_eq!(svg.matches("<polygon").count(), 80);
    }

    #[test]
    fn time_out_of_range() {
        let mesh = icosphere(0, 1.0).unwrap();
        let field = SpatioTemporalField::zeros(12, TemporalGrid::new(1.0, 5).unwrap());
        assert!(render_svg(&mesh, &field, 5).unwrap_err().contains("out of range"));
    }
}
