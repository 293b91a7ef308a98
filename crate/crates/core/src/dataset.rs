//! Procedural dataset generation, split manifests, and per-asset training
//! tensors.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geomesh::texture::NAMED_COLORS;
use crate::geomesh::{
    make_primitive, rasterize_uv, rasterize_views, store, CameraRig, PrimitiveKind, TextureFamily, TextureSpec,
    TexturedAsset, UvGeometryMaps, ViewBuffers,
};
use crate::grid::Grid;
use crate::muvnet::GeoConditioning;

/// One entry of a texture list: a full spec, or a bare family whose colors
/// are drawn per asset.
#[derive(Debug, Clone, PartialEq)]
pub enum TextureChoice {
    Fixed(TextureSpec),
    Family(TextureFamily),
}

impl FromStr for TextureChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.contains(':') {
            Ok(TextureChoice::Fixed(s.parse()?))
        } else {
            Ok(TextureChoice::Family(s.parse()?))
        }
    }
}

impl TextureChoice {
    fn resolve(&self, rng: &mut impl Rng) -> TextureSpec {
        match self {
            TextureChoice::Fixed(s) => s.clone(),
            TextureChoice::Family(f) => {
                let picked: Vec<&str> = NAMED_COLORS.choose_multiple(rng, 2).map(|(n, _)| *n).collect();
                format!("{}:{}:{}", f.name(), picked[0], picked[1])
                    .parse()
                    .expect("palette colors are valid")
            }
        }
    }
}

pub fn parse_list<T: FromStr<Err = Error>>(s: &str) -> Result<Vec<T>> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(T::from_str).collect()
}

/// Deterministically generates `count` assets.
pub fn generate_assets(
    count: usize,
    seed: u64,
    kinds: &[PrimitiveKind],
    textures: &[TextureChoice],
    atlas: usize,
) -> Result<Vec<TexturedAsset>> {
    if kinds.is_empty() {
        return Err(Error::param("kinds", "empty list"));
    }
    if textures.is_empty() {
        return Err(Error::param("textures", "empty list"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let kind = *kinds.choose(&mut rng).expect("non-empty");
            let spec = textures.choose(&mut rng).expect("non-empty").resolve(&mut rng);
            let asset_seed = rng.random::<u32>() as u64;
            make_primitive(kind, &spec, asset_seed, atlas)
        })
        .collect()
}

/// Fractions of the dataset assigned to the texture pool, the
/// multi-view-only pool and held-out evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train_tex: f64,
    pub train_mv: f64,
    pub eval: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train_tex: 0.6,
            train_mv: 0.25,
            eval: 0.15,
        }
    }
}

impl SplitRatios {
    /// `(tex, mv, eval)` sizes. The multi-view and eval counts are rounded to
    /// nearest (ties up); the texture pool takes the remainder.
    pub fn counts(&self, n: usize) -> Result<(usize, usize, usize)> {
        let sum = self.train_tex + self.train_mv + self.eval;
        if (sum - 1.0).abs() > 1e-9 || [self.train_tex, self.train_mv, self.eval].iter().any(|&r| r < 0.0) {
            return Err(Error::param("split", format!("ratios must be non-negative and sum to 1 (got {sum})")));
        }
        let mv = (n as f64 * self.train_mv).round() as usize;
        let ev = (n as f64 * self.eval).round() as usize;
        let tex = n.checked_sub(mv + ev).ok_or_else(|| Error::param("split", "rounded pools exceed the count"))?;
        Ok((tex, mv, ev))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub mv_size: usize,
    pub uv_size: usize,
    pub train_tex: Vec<String>,
    pub train_mv: Vec<String>,
    pub eval: Vec<String>,
    /// Sorted class strings of every asset; indices are label ids.
    pub labels: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn build(names: &[String], assets: &[TexturedAsset], ratios: SplitRatios, seed: u64, mv_size: usize) -> Result<Self> {
        let (tex, mv, _) = ratios.counts(names.len())?;
        let labels: BTreeSet<String> = assets.iter().map(|a| a.label.clone()).collect();
        let uv_size = assets.first().map_or(2 * mv_size, |a| a.albedo_atlas.h);
        Ok(Manifest {
            seed,
            mv_size,
            uv_size,
            train_tex: names[..tex].to_vec(),
            train_mv: names[tex..tex + mv].to_vec(),
            eval: names[tex + mv..].to_vec(),
            labels: labels.into_iter().collect(),
        })
    }

    pub fn label_id(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::data(format!("label `{label}` not in manifest")))
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        match name {
            "train-tex" => Ok(&self.train_tex),
            "train-mv" => Ok(&self.train_mv),
            "eval" => Ok(&self.eval),
            other => Err(Error::param("split", format!("unknown split `{other}` (train-tex | train-mv | eval)"))),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::data(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }
}

/// Writes `count` assets (with render caches) and a manifest into `dir`.
pub fn write_dataset(
    dir: &Path,
    count: usize,
    seed: u64,
    kinds: &[PrimitiveKind],
    textures: &[TextureChoice],
    mv_size: usize,
    ratios: SplitRatios,
) -> Result<Manifest> {
    let assets = generate_assets(count, seed, kinds, textures, 2 * mv_size)?;
    let rig = CameraRig::standard(mv_size, mv_size);
    let names: Vec<String> = (0..count).map(|i| format!("asset_{i:04}")).collect();
    for (name, asset) in names.iter().zip(&assets) {
        let d = dir.join(name);
        store::save_asset(asset, &d)?;
        let (views, uvgeo) = store::render_all(asset, &rig);
        store::write_render_cache(&d, &views, &uvgeo)?;
    }
    let manifest = Manifest::build(&names, &assets, ratios, seed, mv_size)?;
    manifest.save(dir)?;
    Ok(manifest)
}

/// An asset with its renders converted to model inputs. Image frames are in
/// `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub name: String,
    pub asset: TexturedAsset,
    pub label: usize,
    pub rig: CameraRig,
    pub views: Vec<ViewBuffers>,
    pub uvgeo: UvGeometryMaps,
    pub geo: GeoConditioning,
    pub mv_albedo: Vec<Grid>,
    pub mv_shaded: Vec<Grid>,
    pub uv_albedo: Grid,
}

impl Prepared {
    pub fn new(name: impl Into<String>, asset: TexturedAsset, label: usize, mv_size: usize) -> Result<Self> {
        let rig = CameraRig::standard(mv_size, mv_size);
        let (views, _) = rasterize_views(&asset, &rig);
        let (uvgeo, _) = rasterize_uv(&asset);
        let geo = GeoConditioning::new(&views, &uvgeo)?;
        Ok(Prepared {
            name: name.into(),
            label,
            mv_albedo: views.iter().map(|v| v.albedo.to_signed()).collect(),
            mv_shaded: views.iter().map(|v| v.shaded.to_signed()).collect(),
            uv_albedo: asset.albedo_atlas.to_signed(),
            asset,
            rig,
            views,
            uvgeo,
            geo,
        })
    }

    /// Prepares every named asset under `dir` using the manifest's labels.
    pub fn load_split(dir: &Path, manifest: &Manifest, names: &[String]) -> Result<Vec<Prepared>> {
        names
            .iter()
            .map(|n| {
                let asset = store::load_asset(&dir.join(n))?;
                let label = manifest.label_id(&asset.label)?;
                Prepared::new(n.clone(), asset, label, manifest.mv_size)
            })
            .collect()
    }
}

/// Class vocabulary from in-memory assets, in sorted order.
pub fn label_vocab(assets: &[TexturedAsset]) -> Vec<String> {
    let set: BTreeSet<String> = assets.iter().map(|a| a.label.clone()).collect();
    set.into_iter().collect()
}

/// Prepares in-memory assets against a vocabulary.
pub fn prepare_all(assets: &[TexturedAsset], vocab: &[String], mv_size: usize) -> Result<Vec<Prepared>> {
    assets
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let label = vocab
                .iter()
                .position(|l| *l == a.label)
                .ok_or_else(|| Error::data(format!("label `{}` not in vocabulary", a.label)))?;
            Prepared::new(format!("asset_{i:04}"), a.clone(), label, mv_size)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_follow_ratios() {
        assert_eq!(SplitRatios::default().counts(16).unwrap(), (10, 4, 2));
        assert_eq!(SplitRatios::default().counts(100).unwrap(), (60, 25, 15));
        assert_eq!(SplitRatios::default().counts(1).unwrap(), (1, 0, 0));
        let bad = SplitRatios {
            train_tex: 0.5,
            train_mv: 0.25,
            eval: 0.15,
        };
        assert!(bad.counts(10).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_respects_lists() {
        let kinds = [PrimitiveKind::Torus];
        let tex = parse_list::<TextureChoice>("stripes, gradient:red:blue").unwrap();
        let a = generate_assets(6, 3, &kinds, &tex, 64).unwrap();
        let b = generate_assets(6, 3, &kinds, &tex, 64).unwrap();
        assert_eq!(a, b);
        for x in &a {
            assert_eq!(x.kind, PrimitiveKind::Torus);
            assert!(x.label.starts_with("stripes:") || x.label == "gradient:red:blue");
        }
        assert!(parse_list::<TextureChoice>("plaid").is_err());
    }

    #[test]
    fn prepared_frames_are_signed() {
        let a = generate_assets(1, 0, &[PrimitiveKind::Cube], &[TextureChoice::Family(TextureFamily::Gradient)], 64).unwrap();
        let vocab = label_vocab(&a);
        let p = &prepare_all(&a, &vocab, 32).unwrap()[0];
        assert_eq!(p.geo.frames.len(), 5);
        assert_eq!(p.uv_albedo.shape(), (64, 64, 3));
        assert!(p.mv_albedo.iter().all(|g| g.data.iter().all(|&v| (-1.0..=1.0).contains(&v))));
        assert_eq!(p.uv_albedo, a[0].albedo_atlas.to_signed());
    }
}
