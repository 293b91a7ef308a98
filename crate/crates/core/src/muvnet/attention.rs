//! Multi-head attention with rotary queries/keys and an additive geometry
//! embedding applied after the rotation.
//!
//! ```text
//! Q = xq·Wq + bq     K = xe·Wk + bk     V = xe·Wv + bv
//! Q' = rot(Q) + gq   K' = rot(K) + ge
//! out = concat_h softmax(Q'_h K'_hᵀ / √d_h) V_h · Wo + bo
//! ```
//!
//! Values carry neither rotation nor geometry.

use crate::error::{Error, Result};
use crate::nn::{self, gemm, linear, Real, View, ViewMut};

use super::rope::RopeTable;

#[derive(Debug, Clone, Copy)]
pub struct AttnWeights<'a, R> {
    pub wq: &'a [R],
    pub bq: &'a [R],
    pub wk: &'a [R],
    pub bk: &'a [R],
    pub wv: &'a [R],
    pub bv: &'a [R],
    pub wo: &'a [R],
    pub bo: &'a [R],
}

#[derive(Debug, Clone)]
pub struct AttnCache<R> {
    nq: usize,
    ne: usize,
    qr: Vec<R>,
    kr: Vec<R>,
    v: Vec<R>,
    p: Vec<R>,
    o: Vec<R>,
}

#[derive(Debug, Clone)]
pub struct AttnGrads<R> {
    pub wq: Vec<R>,
    pub bq: Vec<R>,
    pub wk: Vec<R>,
    pub bk: Vec<R>,
    pub wv: Vec<R>,
    pub bv: Vec<R>,
    pub wo: Vec<R>,
    pub bo: Vec<R>,
    pub xq: Vec<R>,
    pub xe: Vec<R>,
    /// Gradient reaching the geometry embeddings (also the post-rotation
    /// query/key gradients).
    pub gq: Vec<R>,
    pub ge: Vec<R>,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnShape {
    pub dim: usize,
    pub heads: usize,
}

impl AttnShape {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[allow(clippy::too_many_arguments)]
pub fn attention_forward<R: Real>(
    xq: &[R],
    xe: &[R],
    geo_q: Option<&[R]>,
    geo_e: Option<&[R]>,
    rope_q: &RopeTable,
    rope_e: &RopeTable,
    w: &AttnWeights<R>,
    shape: AttnShape,
) -> Result<(Vec<R>, AttnCache<R>)> {
    let AttnShape { dim, heads } = shape;
    let hd = shape.head_dim();
    let nq = xq.len() / dim;
    let ne = xe.len() / dim;
    if xq.len() != nq * dim || xe.len() != ne * dim {
        return Err(Error::shape("token rows are not a multiple of the model width"));
    }
    if rope_q.rows() != nq || rope_e.rows() != ne || 2 * rope_q.half != hd {
        return Err(Error::shape("rotary table does not cover the token grids"));
    }
    for (g, n, what) in [(geo_q, nq, "query"), (geo_e, ne, "key")] {
        if let Some(g) = g {
            if g.len() != n * dim {
                return Err(Error::shape(format!("{what} geometry embedding has {} values, expected {}", g.len(), n * dim)));
            }
        }
    }

    let mut qr = linear(xq, nq, w.wq, Some(w.bq), dim, dim);
    let mut kr = linear(xe, ne, w.wk, Some(w.bk), dim, dim);
    let v = linear(xe, ne, w.wv, Some(w.bv), dim, dim);
    rope_q.apply(&mut qr, dim, false);
    rope_e.apply(&mut kr, dim, false);
    if let Some(g) = geo_q {
        nn::add_assign(&mut qr, g);
    }
    if let Some(g) = geo_e {
        nn::add_assign(&mut kr, g);
    }

    let scale = R::from_f64(1.0 / (hd as f64).sqrt());
    let mut p = vec![R::zero(); heads * nq * ne];
    let mut o = vec![R::zero(); nq * dim];
    for h in 0..heads {
        let ph = &mut p[h * nq * ne..(h + 1) * nq * ne];
        gemm(
            scale,
            View::new(&qr, nq, dim).cols(h * hd, hd),
            View::new(&kr, ne, dim).cols(h * hd, hd).t(),
            R::zero(),
            ViewMut::new(ph, nq, ne),
        );
        nn::softmax_rows(ph, ne);
        gemm(
            R::one(),
            View::new(ph, nq, ne),
            View::new(&v, ne, dim).cols(h * hd, hd),
            R::zero(),
            ViewMut::new(&mut o, nq, dim).cols(h * hd, hd),
        );
    }
    let out = linear(&o, nq, w.wo, Some(w.bo), dim, dim);
    Ok((
        out,
        AttnCache {
            nq,
            ne,
            qr,
            kr,
            v,
            p,
            o,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<R: Real>(
    dout: &[R],
    xq: &[R],
    xe: &[R],
    rope_q: &RopeTable,
    rope_e: &RopeTable,
    w: &AttnWeights<R>,
    cache: &AttnCache<R>,
    shape: AttnShape,
) -> AttnGrads<R> {
    let AttnShape { dim, heads } = shape;
    let hd = shape.head_dim();
    let (nq, ne) = (cache.nq, cache.ne);
    let z = |n: usize| vec![R::zero(); n];
    let mut g = AttnGrads {
        wq: z(dim * dim),
        bq: z(dim),
        wk: z(dim * dim),
        bk: z(dim),
        wv: z(dim * dim),
        bv: z(dim),
        wo: z(dim * dim),
        bo: z(dim),
        xq: z(nq * dim),
        xe: z(ne * dim),
        gq: z(nq * dim),
        ge: z(ne * dim),
    };

    nn::linear_grad_w(&cache.o, dout, nq, dim, dim, &mut g.wo);
    nn::linear_grad_b(dout, dim, &mut g.bo);
    let mut d_o = z(nq * dim);
    nn::linear_grad_x(dout, nq, w.wo, dim, dim, &mut d_o);

    let scale = R::from_f64(1.0 / (hd as f64).sqrt());
    let mut dv = z(ne * dim);
    let mut dp = z(nq * ne);
    for h in 0..heads {
        let ph = &cache.p[h * nq * ne..(h + 1) * nq * ne];
        gemm(
            R::one(),
            View::new(&d_o, nq, dim).cols(h * hd, hd),
            View::new(&cache.v, ne, dim).cols(h * hd, hd).t(),
            R::zero(),
            ViewMut::new(&mut dp, nq, ne),
        );
        gemm(
            R::one(),
            View::new(ph, nq, ne).t(),
            View::new(&d_o, nq, dim).cols(h * hd, hd),
            R::zero(),
            ViewMut::new(&mut dv, ne, dim).cols(h * hd, hd),
        );
        // dS = P ∘ (dP − rowsum(dP ∘ P)); the score scale is folded into the
        // products below.
        for (dr, pr) in dp.chunks_exact_mut(ne).zip(ph.chunks_exact(ne)) {
            let dot = dr.iter().zip(pr).fold(R::zero(), |a, (&d, &p)| a + d * p);
            for (d, &p) in dr.iter_mut().zip(pr) {
                *d = p * (*d - dot);
            }
        }
        gemm(
            scale,
            View::new(&dp, nq, ne),
            View::new(&cache.kr, ne, dim).cols(h * hd, hd),
            R::zero(),
            ViewMut::new(&mut g.gq, nq, dim).cols(h * hd, hd),
        );
        gemm(
            scale,
            View::new(&dp, nq, ne).t(),
            View::new(&cache.qr, nq, dim).cols(h * hd, hd),
            R::zero(),
            ViewMut::new(&mut g.ge, ne, dim).cols(h * hd, hd),
        );
    }

    let mut dq = g.gq.clone();
    let mut dk = g.ge.clone();
    rope_q.apply(&mut dq, dim, true);
    rope_e.apply(&mut dk, dim, true);

    nn::linear_grad_w(xq, &dq, nq, dim, dim, &mut g.wq);
    nn::linear_grad_b(&dq, dim, &mut g.bq);
    nn::linear_grad_x(&dq, nq, w.wq, dim, dim, &mut g.xq);
    nn::linear_grad_w(xe, &dk, ne, dim, dim, &mut g.wk);
    nn::linear_grad_b(&dk, dim, &mut g.bk);
    nn::linear_grad_x(&dk, ne, w.wk, dim, dim, &mut g.xe);
    nn::linear_grad_w(xe, &dv, ne, dim, dim, &mut g.wv);
    nn::linear_grad_b(&dv, dim, &mut g.bv);
    nn::linear_grad_x(&dv, ne, w.wv, dim, dim, &mut g.xe);
    g
}

/// Forward-only convenience wrapper.
#[allow(clippy::too_many_arguments)]
pub fn geo_attention<R: Real>(
    xq: &[R],
    xe: &[R],
    geo_q: &[R],
    geo_e: &[R],
    rope_q: &RopeTable,
    rope_e: &RopeTable,
    w: &AttnWeights<R>,
    shape: AttnShape,
) -> Result<Vec<R>> {
    attention_forward(xq, xe, Some(geo_q), Some(geo_e), rope_q, rope_e, w, shape).map(|(o, _)| o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::muvnet::rope::rope_3d;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Owned {
        v: Vec<Vec<f64>>,
    }

    impl Owned {
        fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
            let v = (0..8)
                .map(|i| {
                    let n = if i % 2 == 0 { dim * dim } else { dim };
                    (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
                })
                .collect();
            Owned { v }
        }
        fn weights(&self) -> AttnWeights<'_, f64> {
            AttnWeights {
                wq: &self.v[0],
                bq: &self.v[1],
                wk: &self.v[2],
                bk: &self.v[3],
                wv: &self.v[4],
                bv: &self.v[5],
                wo: &self.v[6],
                bo: &self.v[7],
            }
        }
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn backward_matches_difference_quotient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = AttnShape { dim: 12, heads: 2 };
        let rope = rope_3d((1, 1, 3), (1, 2, 2), 6).unwrap();
        let (rq, re) = (rope.slice(3, 4), rope.clone());
        let mut own = Owned::new(12, &mut rng);
        let xq = rand_vec(4 * 12, &mut rng);
        let xe = rand_vec(7 * 12, &mut rng);
        let gq = rand_vec(4 * 12, &mut rng);
        let ge = rand_vec(7 * 12, &mut rng);
        let probe = rand_vec(4 * 12, &mut rng);
        let loss = |own: &Owned, xq: &[f64], xe: &[f64], gq: &[f64], ge: &[f64]| -> f64 {
            let (o, _) = attention_forward(xq, xe, Some(gq), Some(ge), &rq, &re, &own.weights(), shape).unwrap();
            o.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = attention_forward(&xq, &xe, Some(&gq), Some(&ge), &rq, &re, &own.weights(), shape).unwrap();
        let g = attention_backward(&probe, &xq, &xe, &rq, &re, &own.weights(), &cache, shape);
        let eps = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * eps);
            assert!((fd - analytic).abs() < 1e-6 * (1.0 + fd.abs()), "fd {fd} vs {analytic}");
        };
        let grads = [&g.wq, &g.bq, &g.wk, &g.bk, &g.wv, &g.bv, &g.wo, &g.bo];
        for (k, gk) in grads.iter().enumerate() {
            for i in [0, gk.len() / 2, gk.len() - 1] {
                own.v[k][i] += eps;
                let p = loss(&own, &xq, &xe, &gq, &ge);
                own.v[k][i] -= 2.0 * eps;
                let m = loss(&own, &xq, &xe, &gq, &ge);
                own.v[k][i] += eps;
                check(gk[i], p, m);
            }
        }
        for i in 0..xe.len() {
            let mut x = xe.clone();
            x[i] += eps;
            let p = loss(&own, &xq, &x, &gq, &ge);
            x[i] -= 2.0 * eps;
            let m = loss(&own, &xq, &x, &gq, &ge);
            check(g.xe[i], p, m);
            let mut x = ge.clone();
            x[i] += eps;
            let p = loss(&own, &xq, &xe, &gq, &x);
            x[i] -= 2.0 * eps;
            let m = loss(&own, &xq, &xe, &gq, &x);
            check(g.ge[i], p, m);
        }
        for i in 0..xq.len() {
            let mut x = xq.clone();
            x[i] += eps;
            let p = loss(&own, &x, &xe, &gq, &ge);
            x[i] -= 2.0 * eps;
            let m = loss(&own, &x, &xe, &gq, &ge);
            check(g.xq[i], p, m);
            let mut x = gq.clone();
            x[i] += eps;
            let p = loss(&own, &xq, &xe, &x, &ge);
            x[i] -= 2.0 * eps;
            let m = loss(&own, &xq, &xe, &x, &ge);
            check(g.gq[i], p, m);
        }
    }

    #[test]
    fn single_key_returns_its_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = AttnShape { dim: 6, heads: 1 };
        let rope = rope_3d((1, 1, 3), (1, 1, 1), 6).unwrap();
        let own = Owned::new(6, &mut rng);
        let w = own.weights();
        let xq = rand_vec(18, &mut rng);
        let xe = rand_vec(6, &mut rng);
        let (rq, re) = (rope.slice(0, 3), rope.slice(3, 1));
        let a = geo_attention(&xq, &xe, &rand_vec(18, &mut rng), &rand_vec(6, &mut rng), &rq, &re, &w, shape).unwrap();
        let b = geo_attention(&xq, &xe, &[0.0; 18], &[0.0; 6], &rq, &re, &w, shape).unwrap();
        let v = linear(&xe, 1, w.wv, Some(w.bv), 6, 6);
        let want = linear(&v, 1, w.wo, Some(w.bo), 6, 6);
        for r in 0..3 {
            for c in 0..6 {
                assert!((a[r * 6 + c] - want[c]).abs() < 1e-12);
                assert!((b[r * 6 + c] - want[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_misaligned_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = AttnShape { dim: 6, heads: 1 };
        let rope = rope_3d((1, 1, 2), (1, 1, 1), 6).unwrap();
        let own = Owned::new(6, &mut rng);
        let x = rand_vec(12, &mut rng);
        let r = geo_attention(&x, &x, &[0.0; 6], &[0.0; 12], &rope.slice(0, 2), &rope.slice(0, 2), &own.weights(), shape);
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
