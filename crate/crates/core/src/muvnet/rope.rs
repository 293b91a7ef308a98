//! Factorized three-axis rotary embedding.
//!
//! A head of width `d` is split into `d/2` complex pairs, a third each for the
//! time, row and column axes. Multi-view tokens take time indices `0..F`; the
//! UV frame takes the next index. Both domains index rows and columns from 0
//! at their own resolution, so the finer UV grid reuses the same frequencies
//! and simply reaches larger indices.

use crate::error::{Error, Result};
use crate::nn::Real;

pub const ROPE_THETA: f64 = 10000.0;

/// Per-token rotation angles, `half = head_dim/2` angles per row.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    pub half: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

/// Inverse frequencies of one axis: `θ^(−2j/(2·d_part))` for `j < d_part`.
pub fn axis_frequencies(d_part: usize) -> Vec<f64> {
    let d_axis = 2 * d_part;
    (0..d_part).map(|j| ROPE_THETA.powf(-((2 * j) as f64) / d_axis as f64)).collect()
}

pub fn check_head_dim(head_dim: usize) -> Result<usize> {
    if head_dim == 0 || !head_dim.is_multiple_of(6) {
        return Err(Error::param("head_dim", format!("{head_dim} is not a positive multiple of 6")));
    }
    Ok(head_dim / 6)
}

/// Angles for a single `(time, row, col)` position.
pub fn position_angles(pos: [usize; 3], head_dim: usize) -> Result<Vec<f64>> {
    let d_part = check_head_dim(head_dim)?;
    let freqs = axis_frequencies(d_part);
    Ok(pos.iter().flat_map(|&p| freqs.iter().map(move |f| p as f64 * f)).collect())
}

impl RopeTable {
    pub fn rows(&self) -> usize {
        self.cos.len() / self.half
    }

    fn push_angles(&mut self, angles: &[f64]) {
        for &a in angles {
            self.cos.push(a.cos());
            self.sin.push(a.sin());
        }
    }

    pub fn concat(parts: &[&RopeTable]) -> RopeTable {
        let half = parts.first().map_or(0, |p| p.half);
        let mut t = RopeTable {
            half,
            cos: Vec::new(),
            sin: Vec::new(),
        };
        for p in parts {
            assert_eq!(p.half, half);
            t.cos.extend_from_slice(&p.cos);
            t.sin.extend_from_slice(&p.sin);
        }
        t
    }

    pub fn slice(&self, start: usize, len: usize) -> RopeTable {
        let r = start * self.half..(start + len) * self.half;
        RopeTable {
            half: self.half,
            cos: self.cos[r.clone()].to_vec(),
            sin: self.sin[r].to_vec(),
        }
    }

    /// Rotates each head of each row of `x` (`rows × heads·head_dim`) by the
    /// row's angles; `inverse` applies the transpose rotation.
    pub fn apply<R: Real>(&self, x: &mut [R], width: usize, inverse: bool) {
        let hd = 2 * self.half;
        assert_eq!(width % hd, 0);
        assert_eq!(x.len() / width, self.rows());
        for (r, row) in x.chunks_exact_mut(width).enumerate() {
            let cs = &self.cos[r * self.half..(r + 1) * self.half];
            let sn = &self.sin[r * self.half..(r + 1) * self.half];
            for head in row.chunks_exact_mut(hd) {
                for (j, pair) in head.chunks_exact_mut(2).enumerate() {
                    let c = R::from_f64(cs[j]);
                    let s = if inverse { -R::from_f64(sn[j]) } else { R::from_f64(sn[j]) };
                    let (a, b) = (pair[0], pair[1]);
                    pair[0] = a * c - b * s;
                    pair[1] = a * s + b * c;
                }
            }
        }
    }
}

/// Rotary table for `mv_shape = (frames, rows, cols)` followed by
/// `uv_shape`; multi-view rows come first, frame-major then row-major.
pub fn rope_3d(mv_shape: (usize, usize, usize), uv_shape: (usize, usize, usize), head_dim: usize) -> Result<RopeTable> {
    let d_part = check_head_dim(head_dim)?;
    let freqs = axis_frequencies(d_part);
    let mut table = RopeTable {
        half: 3 * d_part,
        cos: Vec::new(),
        sin: Vec::new(),
    };
    let mut angles = Vec::with_capacity(3 * d_part);
    let mut emit = |t0: usize, (f, h, w): (usize, usize, usize), table: &mut RopeTable| {
        for t in t0..t0 + f {
            for r in 0..h {
                for c in 0..w {
                    angles.clear();
                    for p in [t, r, c] {
                        angles.extend(freqs.iter().map(|fr| p as f64 * fr));
                    }
                    table.push_angles(&angles);
                }
            }
        }
    };
    emit(0, mv_shape, &mut table);
    emit(mv_shape.0, uv_shape, &mut table);
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_count_and_origin() {
        let t = rope_3d((4, 8, 8), (1, 16, 16), 48).unwrap();
        assert_eq!(t.rows(), 512);
        assert_eq!(t.half, 24);
        assert!(t.cos[..24].iter().all(|&c| c == 1.0));
        assert!(t.sin[..24].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn rejects_bad_head_dim() {
        assert!(rope_3d((4, 8, 8), (1, 16, 16), 50).is_err());
        assert!(rope_3d((4, 8, 8), (1, 16, 16), 0).is_err());
    }

    #[test]
    fn inverse_undoes_rotation() {
        let t = rope_3d((1, 2, 2), (1, 4, 4), 12).unwrap();
        let orig: Vec<f64> = (0..t.rows() * 24).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut x = orig.clone();
        t.apply(&mut x, 24, false);
        t.apply(&mut x, 24, true);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
