use super::*;
use crate::geomesh::math::norm;

fn asset(kind: PrimitiveKind, spec: &str, seed: u64) -> TexturedAsset {
    make_primitive(kind, &spec.parse().unwrap(), seed, 64).unwrap()
}

fn rig() -> CameraRig {
    CameraRig::standard(32, 32)
}

/// Mean absolute error over texels where `mask` is set.
fn masked_mae(a: &Grid, b: &Grid, mask: &Grid) -> (f64, usize) {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for y in 0..a.h {
        for x in 0..a.w {
            if mask.get(y, x, 0) == 0.0 {
                continue;
            }
            for c in 0..a.c {
                sum += (a.get(y, x, c) - b.get(y, x, c)).abs() as f64;
            }
            n += 1;
        }
    }
    (sum / (n * a.c).max(1) as f64, n)
}

#[test]
fn identical_inputs_give_bit_identical_assets() {
    let a = asset(PrimitiveKind::UvSphere, "gradient:red:blue", 1);
    let b = asset(PrimitiveKind::UvSphere, "gradient:red:blue", 1);
    assert_eq!(a, b);
    let c = asset(PrimitiveKind::UvSphere, "gradient:red:blue", 2);
    assert_ne!(a, c);
}

/// Independent strict point-in-triangle count per texel center.
fn double_covered_texels(a: &TexturedAsset) -> usize {
    let (h, w) = a.atlas_size();
    let mut count = vec![0u32; h * w];
    for uv in &a.uv_coords {
        let p: Vec<[f64; 2]> = uv
            .iter()
            .map(|t| [t[0] as f64 * w as f64, t[1] as f64 * h as f64])
            .collect();
        let det = (p[1][1] - p[2][1]) * (p[0][0] - p[2][0]) + (p[2][0] - p[1][0]) * (p[0][1] - p[2][1]);
        if det == 0.0 {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x as f64 + 0.5, y as f64 + 0.5);
                let l0 = ((p[1][1] - p[2][1]) * (sx - p[2][0]) + (p[2][0] - p[1][0]) * (sy - p[2][1])) / det;
                let l1 = ((p[2][1] - p[0][1]) * (sx - p[2][0]) + (p[0][0] - p[2][0]) * (sy - p[2][1])) / det;
                let l2 = 1.0 - l0 - l1;
                if l0 > 1e-9 && l1 > 1e-9 && l2 > 1e-9 {
                    count[y * w + x] += 1;
                }
            }
        }
    }
    count.iter().filter(|&&c| c > 1).count()
}

#[test]
fn uv_atlases_have_no_double_coverage() {
    assert_eq!(double_covered_texels(&asset(PrimitiveKind::Torus, "stripes:green:yellow", 7)), 0);
    assert_eq!(double_covered_texels(&asset(PrimitiveKind::Cube, "stripes:green:yellow", 7)), 0);
    assert_eq!(double_covered_texels(&asset(PrimitiveKind::UvSphere, "stripes:green:yellow", 7)), 0);
}

#[test]
fn uv_raster_covers_each_texel_once() {
    // The fill rule assigns every texel to at most one face.
    let a = asset(PrimitiveKind::Torus, "stripes:green:yellow", 7);
    let (h, w) = a.atlas_size();
    let mut hits = vec![0u32; h * w];
    for uv in &a.uv_coords {
        let pts = uv.map(|t| [t[0] as f64 * w as f64, t[1] as f64 * h as f64]);
        raster::rasterize_triangle(pts, w, h, |x, y, _| hits[y * w + x] += 1);
    }
    assert!(hits.iter().all(|&c| c <= 1));
    // The torus chart is a full rectangle: interior texels are all covered.
    assert!(hits.iter().filter(|&&c| c == 1).count() > 3000);
}

#[test]
fn cube_front_center_pixel_hits_front_plane() {
    let a = asset(PrimitiveKind::Cube, "gradient:red:blue", 3);
    let rig = rig();
    let (views, _) = rasterize_views(&a, &rig);
    let front = &views[0];
    let z_plane = a.vertices.iter().map(|v| v[2]).fold(f32::MIN, f32::max);
    let (cx, cy) = (16usize, 16usize);
    assert_eq!(front.validity.get(cy, cx, 0), 1.0);

    // Analytic ray through the pixel center, intersected with z = z_plane.
    let cam = rig.cameras[0];
    let e = rig.extent;
    let sx = -e + (cx as f32 + 0.5) * 2.0 * e / 32.0;
    let sy = e - (cy as f32 + 0.5) * 2.0 * e / 32.0;
    let o = [
        sx * cam.right[0] + sy * cam.up[0],
        sx * cam.right[1] + sy * cam.up[1],
        sx * cam.right[2] + sy * cam.up[2],
    ];
    let s = (z_plane - o[2]) / cam.forward[2];
    let hit = [o[0] + s * cam.forward[0], o[1] + s * cam.forward[1], o[2] + s * cam.forward[2]];

    let half_texel = e / 32.0;
    let p = front.position.px(cy, cx);
    assert!((p[2] - z_plane).abs() <= half_texel);
    for k in 0..3 {
        assert!((p[k] - hit[k]).abs() < 1e-4, "axis {k}: {} vs {}", p[k], hit[k]);
    }
    assert_eq!(front.normal.px(cy, cx), &[0.0, 0.0, 1.0]);
}

#[test]
fn validity_matches_depth_test_and_background_is_zero() {
    let rig = rig();
    for kind in PrimitiveKind::ALL {
        let a = asset(kind, "voronoi:red:green:blue", 5);
        let (views, diag) = rasterize_views(&a, &rig);
        assert_eq!(views.len(), 4);
        assert!(diag.backface_culled > 0);
        for v in &views {
            for y in 0..32 {
                for x in 0..32 {
                    let valid = v.validity.get(y, x, 0);
                    assert_eq!(valid == 1.0, v.depth.get(y, x, 0) < rig.far());
                    if valid == 1.0 {
                        assert!((norm(v.normal.px(y, x).try_into().unwrap()) - 1.0).abs() < 1e-4);
                    } else {
                        for g in [&v.position, &v.normal, &v.albedo, &v.shaded] {
                            assert!(g.px(y, x).iter().all(|&c| c == 0.0));
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn sphere_normals_face_camera_and_match_analytic() {
    let a = asset(PrimitiveKind::UvSphere, "gradient:red:blue", 4);
    let rig = rig();
    // Semi-axes of the ellipsoid from the extreme vertices.
    let axes: Vec<f32> = (0..3)
        .map(|k| a.vertices.iter().map(|v| v[k].abs()).fold(0.0, f32::max))
        .collect();
    let (views, _) = rasterize_views(&a, &rig);
    let mut worst = 0f32;
    let mut checked = 0;
    for (vi, v) in views.iter().enumerate() {
        let f = rig.cameras[vi].forward;
        for y in 0..32 {
            for x in 0..32 {
                if v.validity.get(y, x, 0) == 0.0 {
                    continue;
                }
                let p = v.position.px(y, x);
                let analytic = normalize([
                    p[0] / (axes[0] * axes[0]),
                    p[1] / (axes[1] * axes[1]),
                    p[2] / (axes[2] * axes[2]),
                ]);
                assert!(dot(analytic, f) < 0.0, "analytic normal faces away at view {vi} ({x},{y})");
                let n = v.normal.px(y, x);
                let n = [n[0], n[1], n[2]];
                assert!(dot(n, f) < 0.0, "rendered normal faces away at view {vi} ({x},{y})");
                worst = worst.max(norm(sub(n, analytic)));
                checked += 1;
            }
        }
    }
    assert!(checked > 600, "checked {checked}");
    // Tessellation error of a 24×12 sphere.
    assert!(worst < 0.15, "worst normal deviation {worst}");
}

/// Least-squares affine fit `pos ≈ A·[x, y, 1]` over one chart's texels.
fn affine_residual(samples: &[([f64; 2], [f64; 3])]) -> f64 {
    let mut ata = [[0f64; 3]; 3];
    let mut atb = [[0f64; 3]; 3];
    for (xy, p) in samples {
        let row = [xy[0], xy[1], 1.0];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
                atb[i][j] += row[i] * p[j];
            }
        }
    }
    // Gauss-Jordan on the 3×3 normal equations, three right-hand sides.
    let mut m = ata;
    let mut r = atb;
    for col in 0..3 {
        let piv = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
        m.swap(col, piv);
        r.swap(col, piv);
        let d = m[col][col];
        for j in 0..3 {
            m[col][j] /= d;
            r[col][j] /= d;
        }
        for row in 0..3 {
            if row != col {
                let f = m[row][col];
                for j in 0..3 {
                    m[row][j] -= f * m[col][j];
                    r[row][j] -= f * r[col][j];
                }
            }
        }
    }
    samples
        .iter()
        .map(|(xy, p)| {
            let row = [xy[0], xy[1], 1.0];
            (0..3)
                .map(|k| {
                    let fit: f64 = (0..3).map(|i| row[i] * r[i][k]).sum();
                    (fit - p[k]).abs()
                })
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

#[test]
fn cube_chart_positions_are_affine_in_texel_coordinates() {
    let a = asset(PrimitiveKind::Cube, "checker:white:black", 0);
    let (uv, _) = rasterize_uv(&a);
    // First chart: columns 0..21, rows 0..32 of the 64×64 atlas.
    let mut samples = Vec::new();
    for y in 0..32 {
        for x in 0..21 {
            if uv.validity.get(y, x, 0) == 1.0 {
                let p = uv.position.px(y, x);
                samples.push(([x as f64, y as f64], [p[0] as f64, p[1] as f64, p[2] as f64]));
            }
        }
    }
    assert!(samples.len() > 200);
    let res = affine_residual(&samples);
    assert!(res < 1e-4, "affine residual {res}");
}

#[test]
fn uncovered_texels_are_zero_and_sphere_normals_unit() {
    let a = asset(PrimitiveKind::UvSphere, "stripes:red:blue", 2);
    let (uv, _) = rasterize_uv(&a);
    assert_eq!(uv.validity.get(0, 0, 0), 0.0);
    assert!(uv.position.px(0, 0).iter().chain(uv.normal.px(0, 0)).all(|&c| c == 0.0));
    let mut total = 0f64;
    let mut n = 0;
    for y in 0..64 {
        for x in 0..64 {
            if uv.validity.get(y, x, 0) == 1.0 {
                total += norm(uv.normal.px(y, x).try_into().unwrap()) as f64;
                n += 1;
            } else {
                assert!(uv.position.px(y, x).iter().all(|&c| c == 0.0));
            }
        }
    }
    assert!(((total / n as f64) - 1.0).abs() < 1e-4);
}

#[test]
fn rasterization_is_deterministic() {
    let a = asset(PrimitiveKind::Torus, "voronoi:red:white", 9);
    let r = rig();
    assert_eq!(rasterize_views(&a, &r).0, rasterize_views(&a, &r).0);
    assert_eq!(rasterize_uv(&a).0, rasterize_uv(&a).0);
}

#[test]
fn lambertian_endpoints_and_bounds() {
    let l = normalize([0.2, 0.9, -0.3]);
    let albedo = Grid::from_vec(1, 2, 3, vec![0.5, 0.2, 0.9, 1.0, 0.4, 0.0]).unwrap();
    let valid = Grid::filled(1, 2, 1, 1.0);
    let parallel = Grid::from_vec(1, 2, 3, [l, l].concat()).unwrap();
    let out = shade_lambertian(&albedo, &parallel, &valid, l).unwrap();
    for (o, a) in out.data.iter().zip(&albedo.data) {
        assert!((o - a).abs() < 1e-6);
    }
    let perp = normalize(cross(l, [1.0, 0.0, 0.0]));
    let perp = Grid::from_vec(1, 2, 3, [perp, perp].concat()).unwrap();
    let out = shade_lambertian(&albedo, &perp, &valid, l).unwrap();
    for (o, a) in out.data.iter().zip(&albedo.data) {
        assert!((o - 0.3 * a).abs() < 1e-6);
    }
    assert!(shade_lambertian(&albedo, &perp, &valid, [1.0, 1.0, 0.0]).is_err());
}

#[test]
fn lambertian_stays_between_ambient_and_albedo() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let (h, w) = (24, 24);
    let mut albedo = Grid::zeros(h, w, 3);
    let mut normal = Grid::zeros(h, w, 3);
    let mut valid = Grid::zeros(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let n = normalize([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            normal.px_mut(y, x).copy_from_slice(&n);
            for c in 0..3 {
                albedo.set(y, x, c, rng.random());
            }
            valid.set(y, x, 0, if rng.random::<f32>() < 0.8 { 1.0 } else { 0.0 });
        }
    }
    let l = normalize([0.3, -0.5, 0.8]);
    let out = shade_lambertian(&albedo, &normal, &valid, l).unwrap();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let (o, a) = (out.get(y, x, c), albedo.get(y, x, c));
                if valid.get(y, x, 0) == 1.0 {
                    assert!(o >= 0.3 * a - 1e-6 && o <= a + 1e-6);
                } else {
                    assert_eq!(o, 0.0);
                }
            }
        }
    }
}

fn bake(a: &TexturedAsset, rig: &CameraRig, shaded: bool) -> (Grid, Grid, UvGeometryMaps) {
    let (views, _) = rasterize_views(a, rig);
    let (uv, _) = rasterize_uv(a);
    let rgb: Vec<Grid> = views
        .iter()
        .map(|v| if shaded { v.shaded.clone() } else { v.albedo.clone() })
        .collect();
    let (baked, cov) = bake_views_to_uv(&views, &rgb, &uv, rig, &BakeConfig::default()).unwrap();
    (baked, cov, uv)
}

#[test]
fn baking_shaded_cube_views_matches_shaded_atlas() {
    let rig = rig();
    let a = asset(PrimitiveKind::Cube, "gradient:red:blue", 0);
    let (baked, cov, uv) = bake(&a, &rig, true);
    let reference = shade_lambertian(&a.albedo_atlas, &uv.normal, &uv.validity, rig.light_dir).unwrap();
    let (mae, n) = masked_mae(&baked, &reference, &cov);
    assert!(n > 500, "covered texels {n}");
    assert!(mae < 0.05, "mae {mae}");
}

#[test]
fn baking_reconstructs_albedo_on_covered_texels() {
    let rig = rig();
    for (kind, spec, seed) in [
        (PrimitiveKind::Cube, "stripes:red:blue", 1),
        (PrimitiveKind::UvSphere, "gradient:green:yellow:purple", 2),
        (PrimitiveKind::Torus, "voronoi:orange:cyan", 3),
    ] {
        let a = asset(kind, spec, seed);
        let (baked, cov, _) = bake(&a, &rig, false);
        let (mae, n) = masked_mae(&baked, &a.albedo_atlas, &cov);
        assert!(n > 300, "{kind}: covered {n}");
        assert!(mae < 0.05, "{kind} {spec}: mae {mae}");
    }
}

#[test]
fn covered_texels_agree_with_view_positions() {
    let rig = rig();
    for kind in PrimitiveKind::ALL {
        let a = asset(kind, "gradient:red:blue", 6);
        let (views, _) = rasterize_views(&a, &rig);
        let (uv, _) = rasterize_uv(&a);
        // World size of one texel: sqrt(surface area / covered texels).
        let area: f32 = a
            .faces
            .iter()
            .map(|f| {
                let p = f.map(|i| a.vertices[i as usize]);
                0.5 * norm(cross(sub(p[1], p[0]), sub(p[2], p[0])))
            })
            .sum();
        let texels = uv.validity.data.iter().filter(|&&v| v == 1.0).count();
        // The coarser of the two sampling grids sets the tolerance unit.
        let pixel = 2.0 * rig.extent / rig.width as f32;
        let texel = (area / texels as f32).sqrt().max(pixel);
        let cfg = BakeConfig::default();
        let mut worst = 0f32;
        for y in 0..64 {
            for x in 0..64 {
                if uv.validity.get(y, x, 0) == 0.0 {
                    continue;
                }
                let p: Vec3 = uv.position.px(y, x).try_into().unwrap();
                let n: Vec3 = uv.normal.px(y, x).try_into().unwrap();
                for (vi, v) in views.iter().enumerate() {
                    if dot(n, rig.cameras[vi].forward) >= -cfg.min_facing {
                        continue;
                    }
                    let (px, py, _) = rig.project(vi, p);
                    let (ix, iy) = (px as usize, py as usize);
                    if px < 0.0 || py < 0.0 || ix >= 32 || iy >= 32 || v.validity.get(iy, ix, 0) == 0.0 {
                        continue;
                    }
                    let q: Vec3 = v.position.px(iy, ix).try_into().unwrap();
                    let m: Vec3 = v.normal.px(iy, ix).try_into().unwrap();
                    if !on_visible_surface(p, q, m, rig.cameras[vi].forward, cfg.depth_eps) {
                        continue;
                    }
                    // A pixel's footprint on the surface stretches by 1/|n·f|.
                    let stretch = 1.0 / dot(n, rig.cameras[vi].forward).abs();
                    worst = worst.max(norm(sub(p, q)) / stretch);
                }
            }
        }
        assert!(worst <= 2.0 * texel, "{kind}: {worst} vs texel {texel}");
    }
}

#[test]
fn back_facing_texels_get_no_coverage() {
    let rig = rig();
    let a = asset(PrimitiveKind::Cube, "gradient:red:blue", 0);
    let (views, _) = rasterize_views(&a, &rig);
    let (uv, _) = rasterize_uv(&a);
    // Only the front view; the -z face never faces it.
    let (_, cov) =
        bake_views_to_uv(&views[..1], &[views[0].albedo.clone()], &uv, &rig, &BakeConfig::default()).unwrap();
    for y in 0..64 {
        for x in 0..64 {
            let n = uv.normal.px(y, x);
            if uv.validity.get(y, x, 0) == 1.0 && n[2] < -0.5 {
                assert_eq!(cov.get(y, x, 0), 0.0);
            }
        }
    }
}

#[test]
fn baking_a_repeated_view_equals_single_view() {
    let base = rig();
    let a = asset(PrimitiveKind::Torus, "stripes:red:white", 8);
    let (views, _) = rasterize_views(&a, &base);
    let (uv, _) = rasterize_uv(&a);
    let single_rig = CameraRig {
        cameras: vec![base.cameras[1]],
        ..base.clone()
    };
    let quad_rig = CameraRig {
        cameras: vec![base.cameras[1]; 4],
        ..base.clone()
    };
    let cfg = BakeConfig::default();
    let one = bake_views_to_uv(&views[1..2], &[views[1].albedo.clone()], &uv, &single_rig, &cfg).unwrap();
    let four = bake_views_to_uv(
        &vec![views[1].clone(); 4],
        &vec![views[1].albedo.clone(); 4],
        &uv,
        &quad_rig,
        &cfg,
    )
    .unwrap();
    assert_eq!(one.1, four.1);
    for (x, y) in one.0.data.iter().zip(&four.0.data) {
        assert!((x - y).abs() <= 1e-6);
    }
}
