//! Asset directories on disk.
//!
//! ```text
//! <asset>/mesh.txt     v  x y z nx ny nz          (one per vertex)
//!                      f  i j k u0 v0 u1 v1 u2 v2 (one per face)
//! <asset>/albedo.png   8-bit RGB atlas
//! <asset>/meta.txt     key=value: kind, label, seed
//! <asset>/cache/       rendered buffers (.grid) and previews (.png)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{rasterize_uv, CameraRig, TexturedAsset, UvGeometryMaps, ViewBuffers};
use crate::error::{Error, Result};
use crate::grid::Grid;

pub fn save_asset(asset: &TexturedAsset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut mesh = String::new();
    for (p, n) in asset.vertices.iter().zip(&asset.normals) {
        writeln!(mesh, "v {} {} {} {} {} {}", p[0], p[1], p[2], n[0], n[1], n[2]).unwrap();
    }
    for (f, uv) in asset.faces.iter().zip(&asset.uv_coords) {
        writeln!(
            mesh,
            "f {} {} {} {} {} {} {} {} {}",
            f[0], f[1], f[2], uv[0][0], uv[0][1], uv[1][0], uv[1][1], uv[2][0], uv[2][1]
        )
        .unwrap();
    }
    fs::write(dir.join("mesh.txt"), mesh)?;
    asset.albedo_atlas.write_png(dir.join("albedo.png"))?;
    let meta = format!("kind={}\nlabel={}\nseed={}\n", asset.kind, asset.label, asset.seed);
    fs::write(dir.join("meta.txt"), meta)?;
    Ok(())
}

pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::data(format!("line {}: expected key=value", ln + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse_nums<T: std::str::FromStr>(fields: &[&str], ln: usize) -> Result<Vec<T>> {
    fields
        .iter()
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| Error::data(format!("mesh.txt line {ln}: bad number `{s}`")))
        })
        .collect()
}

pub fn load_asset(dir: &Path) -> Result<TexturedAsset> {
    let meta_text = fs::read_to_string(dir.join("meta.txt"))
        .map_err(|e| Error::data(format!("{}: {e}", dir.join("meta.txt").display())))?;
    let meta = parse_key_values(&meta_text)?;
    let get = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::data(format!("{}: meta.txt lacks `{k}`", dir.display())))
    };
    let kind = get("kind")?.parse()?;
    let label = get("label")?;
    let seed = get("seed")?
        .parse()
        .map_err(|_| Error::data("meta.txt: seed is not an integer"))?;

    let mesh = fs::read_to_string(dir.join("mesh.txt"))
        .map_err(|e| Error::data(format!("{}: {e}", dir.join("mesh.txt").display())))?;
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut faces = Vec::new();
    let mut uv_coords = Vec::new();
    for (ln, line) in mesh.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.first() {
            Some(&"v") if fields.len() == 7 => {
                let x: Vec<f32> = parse_nums(&fields[1..], ln + 1)?;
                vertices.push([x[0], x[1], x[2]]);
                normals.push([x[3], x[4], x[5]]);
            }
            Some(&"f") if fields.len() == 10 => {
                let idx: Vec<u32> = parse_nums(&fields[1..4], ln + 1)?;
                let uv: Vec<f32> = parse_nums(&fields[4..], ln + 1)?;
                faces.push([idx[0], idx[1], idx[2]]);
                uv_coords.push([[uv[0], uv[1]], [uv[2], uv[3]], [uv[4], uv[5]]]);
            }
            None => {}
            _ => return Err(Error::data(format!("mesh.txt line {}: malformed record", ln + 1))),
        }
    }
    let albedo_atlas = Grid::read_png(dir.join("albedo.png"))?;
    let asset = TexturedAsset {
        kind,
        vertices,
        normals,
        faces,
        uv_coords,
        albedo_atlas,
        label,
        seed,
    };
    asset.validate()?;
    Ok(asset)
}

/// Writes raw `.grid` caches and PNG previews of rendered buffers.
pub fn write_render_cache(dir: &Path, views: &[ViewBuffers], uvgeo: &UvGeometryMaps) -> Result<()> {
    let cache = dir.join("cache");
    fs::create_dir_all(&cache)?;
    for (i, v) in views.iter().enumerate() {
        let geo = Grid::concat_channels(&[&v.position, &v.normal, &v.validity])?;
        geo.write_raw(cache.join(format!("view{i}_geo.grid")))?;
        v.albedo.write_raw(cache.join(format!("view{i}_albedo.grid")))?;
        v.shaded.write_raw(cache.join(format!("view{i}_shaded.grid")))?;
        v.depth.write_raw(cache.join(format!("view{i}_depth.grid")))?;
        v.albedo.write_png(cache.join(format!("view{i}_albedo.png")))?;
        v.shaded.write_png(cache.join(format!("view{i}_shaded.png")))?;
        v.normal.map(|c| c * 0.5 + 0.5).write_png(cache.join(format!("view{i}_normal.png")))?;
    }
    let uv = Grid::concat_channels(&[&uvgeo.position, &uvgeo.normal, &uvgeo.validity])?;
    uv.write_raw(cache.join("uv_geo.grid"))?;
    uvgeo.normal.map(|c| c * 0.5 + 0.5).write_png(cache.join("uv_normal.png"))?;
    Ok(())
}

/// Convenience for callers that need both domains at once.
pub fn render_all(asset: &TexturedAsset, rig: &CameraRig) -> (Vec<ViewBuffers>, UvGeometryMaps) {
    let (views, _) = super::rasterize_views(asset, rig);
    let (uv, _) = rasterize_uv(asset);
    (views, uv)
}
