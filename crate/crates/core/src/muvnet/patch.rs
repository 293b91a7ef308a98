//! Spatial patch rearrangement between `H×W×C` grids and token rows.
//!
//! Token order is row-major over the patch grid; each token row holds its
//! `p×p×C` pixels in row-major, channel-last order.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::Real;

pub fn patch_grid(h: usize, w: usize, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(Error::shape(format!("{h}x{w} frame is not divisible by patch {patch}")));
    }
    Ok((h / patch, w / patch))
}

/// `H×W×C` grid to `(H/p·W/p) × (p·p·C)` rows.
pub fn patchify<R: Real>(g: &Grid, patch: usize) -> Result<Vec<R>> {
    let (gh, gw) = patch_grid(g.h, g.w, patch)?;
    let c = g.c;
    let mut out = Vec::with_capacity(g.data.len());
    for ty in 0..gh {
        for tx in 0..gw {
            for py in 0..patch {
                let row = ty * patch + py;
                let start = (row * g.w + tx * patch) * c;
                out.extend(g.data[start..start + patch * c].iter().map(|&v| R::from_f32(v)));
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<R: Real>(tokens: &[R], h: usize, w: usize, c: usize, patch: usize) -> Result<Grid> {
    let (gh, gw) = patch_grid(h, w, patch)?;
    let width = patch * patch * c;
    if tokens.len() != gh * gw * width {
        return Err(Error::shape(format!(
            "{} token values do not fill a {h}x{w}x{c} frame",
            tokens.len()
        )));
    }
    let mut g = Grid::zeros(h, w, c);
    for (t, tok) in tokens.chunks_exact(width).enumerate() {
        let (ty, tx) = (t / gw, t % gw);
        for py in 0..patch {
            let start = ((ty * patch + py) * w + tx * patch) * c;
            for (d, &s) in g.data[start..start + patch * c]
                .iter_mut()
                .zip(&tok[py * patch * c..(py + 1) * patch * c])
            {
                *d = s.to_f32();
            }
        }
    }
    Ok(g)
}
