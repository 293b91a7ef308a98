//! Scanline-free triangle rasterization with edge functions.
//!
//! Sample points are pixel centers `(x + 0.5, y + 0.5)`. Shared edges are
//! resolved with a top-left style ownership rule evaluated on canonically
//! ordered edge endpoints, so the edge function of a shared edge is exactly
//! antisymmetric and every sample on it belongs to exactly one triangle.

pub type P2 = [f64; 2];

#[inline]
fn edge_raw(a: P2, b: P2, p: P2) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

#[inline]
fn edge(a: P2, b: P2, p: P2) -> f64 {
    if (a[0], a[1]) <= (b[0], b[1]) {
        edge_raw(a, b, p)
    } else {
        -edge_raw(b, a, p)
    }
}

#[inline]
fn owns(a: P2, b: P2) -> bool {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    dy > 0.0 || (dy == 0.0 && dx < 0.0)
}

#[inline]
fn inside(w: f64, a: P2, b: P2) -> bool {
    w > 0.0 || (w == 0.0 && owns(a, b))
}

/// Visits every pixel center covered by the triangle, passing barycentric
/// weights for the vertices in their original order.
///
/// Returns `false` without visiting anything when the triangle has zero area.
pub fn rasterize_triangle(
    pts: [P2; 3],
    width: usize,
    height: usize,
    mut visit: impl FnMut(usize, usize, [f32; 3]),
) -> bool {
    let area = edge(pts[0], pts[1], pts[2]);
    if area == 0.0 || !area.is_finite() {
        return false;
    }
    // Positive orientation; `order` maps oriented slots back to input vertices.
    let order = if area > 0.0 { [0, 1, 2] } else { [0, 2, 1] };
    let p = [pts[order[0]], pts[order[1]], pts[order[2]]];

    let min_x = p.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
    let max_x = p.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max);
    let min_y = p.iter().map(|v| v[1]).fold(f64::INFINITY, f64::min);
    let max_y = p.iter().map(|v| v[1]).fold(f64::NEG_INFINITY, f64::max);
    let x0 = ((min_x - 0.5).floor().max(0.0)) as usize;
    let y0 = ((min_y - 0.5).floor().max(0.0)) as usize;
    let x1 = ((max_x - 0.5).ceil().min(width as f64 - 1.0)).max(-1.0);
    let y1 = ((max_y - 0.5).ceil().min(height as f64 - 1.0)).max(-1.0);
    if x1 < 0.0 || y1 < 0.0 {
        return true;
    }
    let (x1, y1) = (x1 as usize, y1 as usize);

    for y in y0..=y1 {
        for x in x0..=x1 {
            let s = [x as f64 + 0.5, y as f64 + 0.5];
            let w0 = edge(p[1], p[2], s);
            let w1 = edge(p[2], p[0], s);
            let w2 = edge(p[0], p[1], s);
            if inside(w0, p[1], p[2]) && inside(w1, p[2], p[0]) && inside(w2, p[0], p[1]) {
                let sum = w0 + w1 + w2;
                let mut lam = [0f32; 3];
                lam[order[0]] = (w0 / sum) as f32;
                lam[order[1]] = (w1 / sum) as f32;
                lam[order[2]] = (w2 / sum) as f32;
                visit(x, y, lam);
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_edge_samples_counted_once() {
        // Two triangles forming a square whose diagonal passes through centers.
        let a = [0.0, 0.0];
        let b = [4.0, 0.0];
        let c = [4.0, 4.0];
        let d = [0.0, 4.0];
        let mut hits = vec![0u32; 16];
        for tri in [[a, b, c], [a, c, d]] {
            rasterize_triangle(tri, 4, 4, |x, y, _| hits[y * 4 + x] += 1);
        }
        assert!(hits.iter().all(|&h| h == 1), "{hits:?}");
    }

    #[test]
    fn barycentrics_sum_to_one_and_follow_input_order() {
        let tri = [[0.0, 0.0], [0.0, 8.0], [8.0, 0.0]];
        let mut n = 0;
        rasterize_triangle(tri, 8, 8, |x, y, l| {
            n += 1;
            assert!((l.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            // vertex 2 sits at x = 8
            let px = l[1] * 0.0 + l[2] * 8.0;
            assert!((px - (x as f32 + 0.5)).abs() < 1e-5);
            let py = l[1] * 8.0;
            assert!((py - (y as f32 + 0.5)).abs() < 1e-5);
        });
        assert!(n > 0);
    }

    #[test]
    fn degenerate_triangle_reports_false() {
        let tri = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        assert!(!rasterize_triangle(tri, 4, 4, |_, _, _| panic!("visited")));
    }
}
