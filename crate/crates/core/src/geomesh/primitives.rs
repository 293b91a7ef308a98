//! Procedural primitives with hand-laid UV atlases.

use std::f32::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::math::{cross, dot, normalize, sub, Vec3};
use super::texture::{TexturePattern, TextureSpec};
use super::TexturedAsset;
use crate::error::{Error, Result};
use crate::grid::{quantize_u8, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Cube,
    UvSphere,
    Torus,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 3] = [PrimitiveKind::Cube, PrimitiveKind::UvSphere, PrimitiveKind::Torus];

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Cube => "cube",
            PrimitiveKind::UvSphere => "uvsphere",
            PrimitiveKind::Torus => "torus",
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cube" => Ok(PrimitiveKind::Cube),
            "uvsphere" | "sphere" => Ok(PrimitiveKind::UvSphere),
            "torus" => Ok(PrimitiveKind::Torus),
            other => Err(Error::param(
                "kind",
                format!("unknown primitive `{other}` (expected cube, uvsphere, torus)"),
            )),
        }
    }
}

/// Axis-aligned UV rectangle owned by one chart of the atlas.
#[derive(Debug, Clone, Copy)]
struct Island {
    u0: f32,
    v0: f32,
    u1: f32,
    v1: f32,
}

impl Island {
    fn map(&self, s: f32, t: f32) -> [f32; 2] {
        [self.u0 + s * (self.u1 - self.u0), self.v0 + t * (self.v1 - self.v0)]
    }

    fn local(&self, u: f32, v: f32) -> (f32, f32) {
        ((u - self.u0) / (self.u1 - self.u0), (v - self.v0) / (self.v1 - self.v0))
    }
}

#[derive(Default)]
struct MeshBuilder {
    vertices: Vec<Vec3>,
    normals: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    uvs: Vec<[[f32; 2]; 3]>,
}

impl MeshBuilder {
    fn vertex(&mut self, p: Vec3, n: Vec3) -> u32 {
        self.vertices.push(p);
        self.normals.push(normalize(n));
        (self.vertices.len() - 1) as u32
    }

    /// Adds a triangle wound counter-clockwise around its outward normal.
    /// Zero-area triangles (sphere poles) are dropped.
    fn tri(&mut self, idx: [u32; 3], uv: [[f32; 2]; 3]) {
        let p = idx.map(|i| self.vertices[i as usize]);
        let ng = cross(sub(p[1], p[0]), sub(p[2], p[0]));
        if dot(ng, ng) < 1e-14 {
            return;
        }
        let avg_n = [0, 1, 2].iter().fold([0.0; 3], |acc, &k| {
            let n = self.normals[idx[k] as usize];
            [acc[0] + n[0], acc[1] + n[1], acc[2] + n[2]]
        });
        if dot(ng, avg_n) >= 0.0 {
            self.faces.push(idx);
            self.uvs.push(uv);
        } else {
            self.faces.push([idx[0], idx[2], idx[1]]);
            self.uvs.push([uv[0], uv[2], uv[1]]);
        }
    }

    /// Tessellates a `(s, t) ∈ [0,1]²` parametric surface over one island.
    fn param_grid(
        &mut self,
        island: Island,
        segs_s: usize,
        segs_t: usize,
        surf: impl Fn(f32, f32) -> (Vec3, Vec3),
    ) {
        let base = self.vertices.len() as u32;
        for j in 0..=segs_t {
            for i in 0..=segs_s {
                let (p, n) = surf(i as f32 / segs_s as f32, j as f32 / segs_t as f32);
                self.vertex(p, n);
            }
        }
        let id = |i: usize, j: usize| base + (j * (segs_s + 1) + i) as u32;
        let uv = |i: usize, j: usize| island.map(i as f32 / segs_s as f32, j as f32 / segs_t as f32);
        for j in 0..segs_t {
            for i in 0..segs_s {
                self.tri(
                    [id(i, j), id(i + 1, j), id(i + 1, j + 1)],
                    [uv(i, j), uv(i + 1, j), uv(i + 1, j + 1)],
                );
                self.tri(
                    [id(i, j), id(i + 1, j + 1), id(i, j + 1)],
                    [uv(i, j), uv(i + 1, j + 1), uv(i, j + 1)],
                );
            }
        }
    }
}

fn cube_islands() -> Vec<Island> {
    // 3×2 grid of square charts, 18/64 of the atlas wide, with ≥3-texel gutters.
    let side = 18.0 / 64.0;
    let mut out = Vec::new();
    for row in 0..2 {
        for col in 0..3 {
            let u0 = col as f32 / 3.0 + 1.67 / 64.0;
            let v0 = row as f32 * 0.5 + 7.0 / 64.0;
            out.push(Island {
                u0,
                v0,
                u1: u0 + side,
                v1: v0 + side,
            });
        }
    }
    out
}

fn full_island() -> Island {
    let m = 2.0 / 64.0;
    Island {
        u0: m,
        v0: m,
        u1: 1.0 - m,
        v1: 1.0 - m,
    }
}

/// Per-axis scale drawn from the seed; keeps every asset inside `[-1, 1]³`.
fn seed_scale(seed: u64) -> Vec3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5ca1e);
    [
        rng.random_range(0.8..=1.0),
        rng.random_range(0.8..=1.0),
        rng.random_range(0.8..=1.0),
    ]
}

/// Builds a deterministic textured primitive.
///
/// `atlas` is the side length of the square albedo atlas in texels.
pub fn make_primitive(kind: PrimitiveKind, texture: &TextureSpec, seed: u64, atlas: usize) -> Result<TexturedAsset> {
    if atlas < 16 {
        return Err(Error::param("atlas", format!("atlas side {atlas} below minimum 16")));
    }
    let sc = seed_scale(seed);
    let xf = |p: Vec3, n: Vec3| -> (Vec3, Vec3) {
        (
            [p[0] * sc[0], p[1] * sc[1], p[2] * sc[2]],
            normalize([n[0] / sc[0], n[1] / sc[1], n[2] / sc[2]]),
        )
    };

    let mut mb = MeshBuilder::default();
    let mut face_island = Vec::new();
    let islands = match kind {
        PrimitiveKind::Cube => {
            let islands = cube_islands();
            // (normal, a, b) with a × b = normal
            let frames: [(Vec3, Vec3, Vec3); 6] = [
                ([1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]),
                ([-1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]),
                ([0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]),
                ([0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
                ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
                ([0.0, 0.0, -1.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
            ];
            for (k, (n, a, b)) in frames.iter().enumerate() {
                let before = mb.faces.len();
                // t grows downward in the atlas while b points up on the face.
                mb.param_grid(islands[k], 1, 1, |s, t| {
                    let (ca, cb) = (2.0 * s - 1.0, 1.0 - 2.0 * t);
                    let p = [
                        n[0] + ca * a[0] + cb * b[0],
                        n[1] + ca * a[1] + cb * b[1],
                        n[2] + ca * a[2] + cb * b[2],
                    ];
                    xf(p, *n)
                });
                face_island.extend(std::iter::repeat_n(k, mb.faces.len() - before));
            }
            islands
        }
        PrimitiveKind::UvSphere => {
            let island = full_island();
            mb.param_grid(island, 24, 12, |s, t| {
                let (phi, theta) = (2.0 * PI * s, PI * t);
                let p = [theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin()];
                xf(p, p)
            });
            face_island.resize(mb.faces.len(), 0);
            vec![island]
        }
        PrimitiveKind::Torus => {
            let island = full_island();
            let (major, minor) = (0.7f32, 0.28f32);
            mb.param_grid(island, 32, 12, |s, t| {
                let (phi, psi) = (2.0 * PI * s, 2.0 * PI * t);
                let ring = major + minor * psi.cos();
                let p = [ring * phi.cos(), minor * psi.sin(), ring * phi.sin()];
                let n = [psi.cos() * phi.cos(), psi.sin(), psi.cos() * phi.sin()];
                xf(p, n)
            });
            face_island.resize(mb.faces.len(), 0);
            vec![island]
        }
    };

    let pattern = TexturePattern::new(texture, seed, islands.len());
    let albedo_atlas = bake_albedo(&islands, &pattern, atlas);

    let asset = TexturedAsset {
        kind,
        vertices: mb.vertices,
        normals: mb.normals,
        faces: mb.faces,
        uv_coords: mb.uvs,
        albedo_atlas,
        label: texture.to_string(),
        seed,
    };
    debug_assert_eq!(face_island.len(), asset.faces.len());
    Ok(asset)
}

/// Evaluates the pattern on every texel whose center lies within one texel of
/// an island, so nearest-texel lookups near chart borders stay inside the
/// texture. Values are quantized to 8 bits to match the PNG store.
fn bake_albedo(islands: &[Island], pattern: &TexturePattern, size: usize) -> Grid {
    let mut g = Grid::zeros(size, size, 3);
    let pad = 1.0 / size as f32;
    for y in 0..size {
        for x in 0..size {
            let u = (x as f32 + 0.5) / size as f32;
            let v = (y as f32 + 0.5) / size as f32;
            let hit = islands.iter().enumerate().find(|(_, is)| {
                u >= is.u0 - pad && u <= is.u1 + pad && v >= is.v0 - pad && v <= is.v1 + pad
            });
            if let Some((k, is)) = hit {
                let (s, t) = is.local(u, v);
                let c = pattern.eval(k, s, t);
                for (ch, v) in c.into_iter().enumerate() {
                    g.set(y, x, ch, quantize_u8(v) as f32 / 255.0);
                }
            }
        }
    }
    g
}
