//! Procedural texture descriptors (`family:color:color[:color]`) and their
//! evaluation in island-local coordinates.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TextureFamily {
    Checker,
    Stripes,
    Gradient,
    Voronoi,
}

impl TextureFamily {
    pub fn name(self) -> &'static str {
        match self {
            TextureFamily::Checker => "checker",
            TextureFamily::Stripes => "stripes",
            TextureFamily::Gradient => "gradient",
            TextureFamily::Voronoi => "voronoi",
        }
    }
}

impl FromStr for TextureFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checker" => Ok(TextureFamily::Checker),
            "stripes" => Ok(TextureFamily::Stripes),
            "gradient" => Ok(TextureFamily::Gradient),
            "voronoi" | "voronoi-noise" => Ok(TextureFamily::Voronoi),
            other => Err(Error::param(
                "texture_spec",
                format!("unknown texture family `{other}` (expected checker, stripes, gradient, voronoi)"),
            )),
        }
    }
}

pub const NAMED_COLORS: &[(&str, [f32; 3])] = &[
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.75, 0.2]),
    ("blue", [0.15, 0.25, 0.9]),
    ("yellow", [0.95, 0.85, 0.1]),
    ("cyan", [0.1, 0.8, 0.85]),
    ("magenta", [0.85, 0.15, 0.75]),
    ("orange", [0.95, 0.55, 0.1]),
    ("purple", [0.5, 0.2, 0.7]),
    ("gray", [0.5, 0.5, 0.5]),
    ("brown", [0.55, 0.35, 0.2]),
];

pub fn named_color(name: &str) -> Result<[f32; 3]> {
    NAMED_COLORS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| *c)
        .ok_or_else(|| Error::param("texture_spec", format!("unknown color `{name}`")))
}

/// A parsed texture descriptor such as `checker:white:black`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureSpec {
    pub family: TextureFamily,
    pub color_names: Vec<String>,
    pub colors: Vec<[f32; 3]>,
}

impl FromStr for TextureSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let family: TextureFamily = parts.next().unwrap_or("").parse()?;
        let color_names: Vec<String> = parts.map(str::to_string).collect();
        if !(2..=3).contains(&color_names.len()) {
            return Err(Error::param(
                "texture_spec",
                format!("`{s}` needs 2 or 3 colors, got {}", color_names.len()),
            ));
        }
        let colors = color_names
            .iter()
            .map(|n| named_color(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(TextureSpec {
            family,
            color_names,
            colors,
        })
    }
}

impl fmt::Display for TextureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.family.name())?;
        for c in &self.color_names {
            write!(f, ":{c}")?;
        }
        Ok(())
    }
}

pub const CHECKER_CELLS: usize = 8;
pub const STRIPE_COUNT: usize = 3;
pub const VORONOI_SITES: usize = 5;

/// Seed-dependent parameters of a texture, fixed per asset and island.
#[derive(Debug, Clone)]
pub struct TexturePattern {
    spec: TextureSpec,
    stripes_vertical: bool,
    gradient_dir: u8,
    sites: Vec<Vec<[f32; 2]>>,
}

impl TexturePattern {
    pub fn new(spec: &TextureSpec, seed: u64, islands: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_u64);
        let stripes_vertical = rng.random::<bool>();
        let gradient_dir = rng.random_range(0..4u8);
        let sites = (0..islands)
            .map(|_| {
                (0..VORONOI_SITES)
                    .map(|_| [rng.random::<f32>(), rng.random::<f32>()])
                    .collect()
            })
            .collect();
        Self {
            spec: spec.clone(),
            stripes_vertical,
            gradient_dir,
            sites,
        }
    }

    /// Albedo at island-local coordinates `(s, t) ∈ [0,1]²`.
    pub fn eval(&self, island: usize, s: f32, t: f32) -> [f32; 3] {
        let s = s.clamp(0.0, 1.0);
        let t = t.clamp(0.0, 1.0);
        let colors = &self.spec.colors;
        let n = colors.len();
        let cell = |v: f32, k: usize| ((v * k as f32) as usize).min(k - 1);
        match self.spec.family {
            TextureFamily::Checker => {
                let i = cell(s, CHECKER_CELLS) + cell(t, CHECKER_CELLS);
                colors[i % n]
            }
            TextureFamily::Stripes => {
                let v = if self.stripes_vertical { s } else { t };
                colors[cell(v, STRIPE_COUNT) % n]
            }
            TextureFamily::Gradient => {
                let v = match self.gradient_dir {
                    0 => s,
                    1 => t,
                    2 => 1.0 - s,
                    _ => 1.0 - t,
                };
                let x = v * (n - 1) as f32;
                let i = (x as usize).min(n - 2);
                let f = x - i as f32;
                let (a, b) = (colors[i], colors[i + 1]);
                [
                    a[0] + (b[0] - a[0]) * f,
                    a[1] + (b[1] - a[1]) * f,
                    a[2] + (b[2] - a[2]) * f,
                ]
            }
            TextureFamily::Voronoi => {
                let sites = &self.sites[island % self.sites.len()];
                let nearest = sites
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, (p[0] - s).powi(2) + (p[1] - t).powi(2)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                colors[nearest % n]
            }
        }
    }
}
