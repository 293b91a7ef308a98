//! Procedural assets, software rasterization in view and UV space,
//! Lambertian shading, and the back-projection baking oracle.

pub mod math;
pub mod primitives;
pub mod raster;
pub mod store;
pub mod texture;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use math::{cross, dot, lerp3, normalize, sub, Vec3};
use raster::rasterize_triangle;

pub use primitives::{make_primitive, PrimitiveKind};
pub use texture::{TextureFamily, TextureSpec};

/// A triangle mesh with a per-corner UV atlas and its ground-truth albedo.
#[derive(Debug, Clone, PartialEq)]
pub struct TexturedAsset {
    pub kind: PrimitiveKind,
    pub vertices: Vec<Vec3>,
    /// Per-vertex unit shading normals.
    pub normals: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// UV coordinates for each face corner.
    pub uv_coords: Vec<[[f32; 2]; 3]>,
    pub albedo_atlas: Grid,
    /// Class string used as the text condition, e.g. `checker:red:blue`.
    pub label: String,
    pub seed: u64,
}

impl TexturedAsset {
    /// Checks the structural invariants (index range, UV range, position range).
    pub fn validate(&self) -> Result<()> {
        if self.normals.len() != self.vertices.len() {
            return Err(Error::data("normals and vertices differ in length"));
        }
        if self.uv_coords.len() != self.faces.len() {
            return Err(Error::data("uv_coords must hold one triple per face"));
        }
        if self.albedo_atlas.c != 3 {
            return Err(Error::data("albedo atlas must be RGB"));
        }
        let nv = self.vertices.len() as u32;
        if self.faces.iter().flatten().any(|&i| i >= nv) {
            return Err(Error::data("face index out of range"));
        }
        if self
            .uv_coords
            .iter()
            .flatten()
            .flatten()
            .any(|&c| !(0.0..=1.0).contains(&c))
        {
            return Err(Error::data("uv coordinate outside [0,1]"));
        }
        if self.vertices.iter().flatten().any(|&c| !(-1.0..=1.0).contains(&c)) {
            return Err(Error::data("vertex outside [-1,1]^3"));
        }
        Ok(())
    }

    pub fn atlas_size(&self) -> (usize, usize) {
        (self.albedo_atlas.h, self.albedo_atlas.w)
    }
}

/// Orthographic camera looking at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub azimuth_deg: f32,
    pub elevation_deg: f32,
    pub right: Vec3,
    pub up: Vec3,
    /// Viewing direction, from the camera into the scene.
    pub forward: Vec3,
}

impl Camera {
    pub fn orbit(azimuth_deg: f32, elevation_deg: f32) -> Self {
        let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let eye = [e.cos() * a.sin(), e.sin(), e.cos() * a.cos()];
        let forward = [-eye[0], -eye[1], -eye[2]];
        let right = normalize(cross(forward, [0.0, 1.0, 0.0]));
        let up = cross(right, forward);
        Camera {
            azimuth_deg,
            elevation_deg,
            right,
            up,
            forward,
        }
    }
}

/// The fixed four-view rig plus a directional light.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
    /// Half-width of the orthographic frustum in world units.
    pub extent: f32,
    pub height: usize,
    pub width: usize,
    pub light_dir: Vec3,
}

pub const VIEW_AZIMUTHS: [f32; 4] = [0.0, 90.0, 180.0, 270.0];
pub const VIEW_ELEVATION: f32 = 20.0;

impl CameraRig {
    pub fn standard(height: usize, width: usize) -> Self {
        CameraRig {
            cameras: VIEW_AZIMUTHS
                .iter()
                .map(|&a| Camera::orbit(a, VIEW_ELEVATION))
                .collect(),
            extent: 3f32.sqrt(),
            height,
            width,
            light_dir: normalize([0.4, 0.8, 0.45]),
        }
    }

    /// Continuous pixel coordinates `(x, y)` and depth of a world point.
    /// Depth is zero at the near plane and grows along the view direction.
    #[inline]
    pub fn project(&self, view: usize, p: Vec3) -> (f64, f64, f32) {
        let cam = &self.cameras[view];
        let sx = dot(p, cam.right) as f64;
        let sy = dot(p, cam.up) as f64;
        let e = self.extent as f64;
        let px = (sx + e) / (2.0 * e) * self.width as f64;
        let py = (e - sy) / (2.0 * e) * self.height as f64;
        (px, py, dot(p, cam.forward) + self.extent)
    }

    /// Depth of the far plane; cleared depth buffers hold this value.
    pub fn far(&self) -> f32 {
        2.0 * self.extent
    }
}

/// Per-view geometry and appearance buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBuffers {
    pub position: Grid,
    pub normal: Grid,
    pub validity: Grid,
    pub albedo: Grid,
    pub shaded: Grid,
    /// Depth buffer; pixels without surface hold [`CameraRig::far`].
    pub depth: Grid,
}

/// UV-domain geometry: world position and normal per covered texel.
#[derive(Debug, Clone, PartialEq)]
pub struct UvGeometryMaps {
    pub position: Grid,
    pub normal: Grid,
    pub validity: Grid,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterDiagnostics {
    pub degenerate_skipped: usize,
    pub backface_culled: usize,
}

#[inline]
fn sample_nearest(atlas: &Grid, uv: [f32; 2]) -> [f32; 3] {
    let x = ((uv[0] * atlas.w as f32) as isize).clamp(0, atlas.w as isize - 1) as usize;
    let y = ((uv[1] * atlas.h as f32) as isize).clamp(0, atlas.h as isize - 1) as usize;
    let p = atlas.px(y, x);
    [p[0], p[1], p[2]]
}

/// Renders position, normal, validity, albedo and shaded buffers for every
/// camera of the rig using a depth test and back-face culling.
pub fn rasterize_views(asset: &TexturedAsset, rig: &CameraRig) -> (Vec<ViewBuffers>, RasterDiagnostics) {
    let mut diag = RasterDiagnostics::default();
    let (h, w) = (rig.height, rig.width);
    let far = rig.far();
    let mut out = Vec::with_capacity(rig.cameras.len());
    for (vi, cam) in rig.cameras.iter().enumerate() {
        let mut position = Grid::zeros(h, w, 3);
        let mut normal = Grid::zeros(h, w, 3);
        let mut validity = Grid::zeros(h, w, 1);
        let mut albedo = Grid::zeros(h, w, 3);
        let mut depth = Grid::filled(h, w, 1, far);
        for (fi, face) in asset.faces.iter().enumerate() {
            let p = face.map(|i| asset.vertices[i as usize]);
            let ng = cross(sub(p[1], p[0]), sub(p[2], p[0]));
            if dot(ng, ng) == 0.0 {
                diag.degenerate_skipped += 1;
                continue;
            }
            if dot(ng, cam.forward) >= 0.0 {
                diag.backface_culled += 1;
                continue;
            }
            let proj = p.map(|q| rig.project(vi, q));
            let n = face.map(|i| asset.normals[i as usize]);
            let uv = asset.uv_coords[fi];
            let drawn = rasterize_triangle(proj.map(|(x, y, _)| [x, y]), w, h, |x, y, l| {
                let z = proj[0].2 * l[0] + proj[1].2 * l[1] + proj[2].2 * l[2];
                if z >= depth.get(y, x, 0) {
                    return;
                }
                depth.set(y, x, 0, z);
                let pos = lerp3(p[0], p[1], p[2], l);
                let nrm = normalize(lerp3(n[0], n[1], n[2], l));
                let t = [
                    uv[0][0] * l[0] + uv[1][0] * l[1] + uv[2][0] * l[2],
                    uv[0][1] * l[0] + uv[1][1] * l[1] + uv[2][1] * l[2],
                ];
                let a = sample_nearest(&asset.albedo_atlas, t);
                position.px_mut(y, x).copy_from_slice(&pos);
                normal.px_mut(y, x).copy_from_slice(&nrm);
                albedo.px_mut(y, x).copy_from_slice(&a);
                validity.set(y, x, 0, 1.0);
            });
            if !drawn {
                diag.degenerate_skipped += 1;
            }
        }
        let shaded = shade_lambertian(&albedo, &normal, &validity, rig.light_dir)
            .expect("rig light direction is unit length");
        out.push(ViewBuffers {
            position,
            normal,
            validity,
            albedo,
            shaded,
            depth,
        });
    }
    (out, diag)
}

/// Rasterizes every face into the atlas domain, interpolating world position
/// and normal. Texels not covered by a face stay zero.
pub fn rasterize_uv(asset: &TexturedAsset) -> (UvGeometryMaps, RasterDiagnostics) {
    let (h, w) = asset.atlas_size();
    let mut diag = RasterDiagnostics::default();
    let mut position = Grid::zeros(h, w, 3);
    let mut normal = Grid::zeros(h, w, 3);
    let mut validity = Grid::zeros(h, w, 1);
    for (fi, face) in asset.faces.iter().enumerate() {
        let p = face.map(|i| asset.vertices[i as usize]);
        let n = face.map(|i| asset.normals[i as usize]);
        let uv = asset.uv_coords[fi];
        let pts = uv.map(|t| [t[0] as f64 * w as f64, t[1] as f64 * h as f64]);
        let drawn = rasterize_triangle(pts, w, h, |x, y, l| {
            position.px_mut(y, x).copy_from_slice(&lerp3(p[0], p[1], p[2], l));
            normal
                .px_mut(y, x)
                .copy_from_slice(&normalize(lerp3(n[0], n[1], n[2], l)));
            validity.set(y, x, 0, 1.0);
        });
        if !drawn {
            diag.degenerate_skipped += 1;
        }
    }
    (
        UvGeometryMaps {
            position,
            normal,
            validity,
        },
        diag,
    )
}

pub const AMBIENT: f32 = 0.3;
pub const DIFFUSE: f32 = 0.7;

/// `albedo · (0.3 + 0.7·max(0, n·l))` on valid pixels, zero elsewhere.
pub fn shade_lambertian(albedo: &Grid, normal: &Grid, validity: &Grid, light_dir: Vec3) -> Result<Grid> {
    if (dot(light_dir, light_dir).sqrt() - 1.0).abs() > 1e-4 {
        return Err(Error::param("light_dir", "must be a unit vector"));
    }
    if albedo.c != 3 || normal.c != 3 || validity.c != 1 {
        return Err(Error::shape("shade_lambertian expects RGB albedo, 3-ch normal, 1-ch validity"));
    }
    if (albedo.h, albedo.w) != (normal.h, normal.w) || (albedo.h, albedo.w) != (validity.h, validity.w) {
        return Err(Error::shape("shade_lambertian: buffer sizes differ"));
    }
    let mut out = Grid::zeros(albedo.h, albedo.w, 3);
    for y in 0..albedo.h {
        for x in 0..albedo.w {
            if validity.get(y, x, 0) == 0.0 {
                continue;
            }
            let n = normal.px(y, x);
            let k = AMBIENT + DIFFUSE * dot([n[0], n[1], n[2]], light_dir).max(0.0);
            let a = albedo.px(y, x);
            out.px_mut(y, x).copy_from_slice(&[a[0] * k, a[1] * k, a[2] * k]);
        }
    }
    Ok(out)
}

/// Visibility thresholds for [`bake_views_to_uv`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BakeConfig {
    /// Maximum depth difference (world units) along the view ray between a
    /// texel and the surface recorded at the pixel it projects to.
    pub depth_eps: f32,
    /// A view is usable only where `n · view_dir < -min_facing`.
    pub min_facing: f32,
}

impl Default for BakeConfig {
    fn default() -> Self {
        BakeConfig {
            depth_eps: 1e-2,
            min_facing: 0.2,
        }
    }
}

/// Depth test against the surface seen at a pixel.
///
/// The pixel stores one surface point `q` with normal `m`. The depth of that
/// surface along the ray through `p` is extrapolated from the tangent plane at
/// `q`, so flat surfaces compare exactly regardless of where `p` falls inside
/// the pixel footprint.
#[inline]
pub fn on_visible_surface(p: Vec3, q: Vec3, m: Vec3, forward: Vec3, eps: f32) -> bool {
    let facing = dot(forward, m);
    if facing > -1e-3 {
        return false;
    }
    let along = dot(sub(q, p), m) / facing;
    along.abs() <= eps
}

/// Back-projects view colors onto the atlas.
///
/// Each valid texel is projected into every view; a view contributes when the
/// pixel is valid, the texel's normal faces the camera, and the texel passes
/// [`on_visible_surface`] within `depth_eps`. Accepted samples are
/// averaged. Returns the baked RGB atlas and a binary coverage grid.
pub fn bake_views_to_uv(
    views: &[ViewBuffers],
    rgb: &[Grid],
    uvgeo: &UvGeometryMaps,
    rig: &CameraRig,
    cfg: &BakeConfig,
) -> Result<(Grid, Grid)> {
    if views.len() != rgb.len() || views.len() > rig.cameras.len() {
        return Err(Error::shape(format!(
            "bake: {} views, {} rgb grids, {} cameras",
            views.len(),
            rgb.len(),
            rig.cameras.len()
        )));
    }
    for (v, c) in views.iter().zip(rgb) {
        if (c.h, c.w, c.c) != (v.validity.h, v.validity.w, 3) {
            return Err(Error::shape("bake: rgb grid does not match its view buffers"));
        }
    }
    let (h, w) = (uvgeo.validity.h, uvgeo.validity.w);
    let mut baked = Grid::zeros(h, w, 3);
    let mut coverage = Grid::zeros(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            if uvgeo.validity.get(y, x, 0) == 0.0 {
                continue;
            }
            let p = uvgeo.position.px(y, x);
            let p = [p[0], p[1], p[2]];
            let n = uvgeo.normal.px(y, x);
            let n = [n[0], n[1], n[2]];
            let mut acc = [0f32; 3];
            let mut hits = 0u32;
            for (vi, (view, color)) in views.iter().zip(rgb).enumerate() {
                // Views are matched to cameras by index.
                let cam = &rig.cameras[vi];
                if dot(n, cam.forward) >= -cfg.min_facing {
                    continue;
                }
                let (px, py, _) = rig.project(vi, p);
                if px < 0.0 || py < 0.0 {
                    continue;
                }
                let (ix, iy) = (px as usize, py as usize);
                if ix >= view.validity.w || iy >= view.validity.h || view.validity.get(iy, ix, 0) == 0.0 {
                    continue;
                }
                let q = view.position.px(iy, ix);
                let m = view.normal.px(iy, ix);
                if !on_visible_surface(p, [q[0], q[1], q[2]], [m[0], m[1], m[2]], cam.forward, cfg.depth_eps) {
                    continue;
                }
                let c = color.px(iy, ix);
                acc[0] += c[0];
                acc[1] += c[1];
                acc[2] += c[2];
                hits += 1;
            }
            if hits > 0 {
                let k = 1.0 / hits as f32;
                baked.px_mut(y, x).copy_from_slice(&[acc[0] * k, acc[1] * k, acc[2] * k]);
                coverage.set(y, x, 0, 1.0);
            }
        }
    }
    Ok((baked, coverage))
}

#[cfg(test)]
mod tests;
