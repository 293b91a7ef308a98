//! Minimal dense-layer toolkit with hand-written backward passes.
//!
//! Everything is generic over [`Real`] so the same code trains in `f32` and
//! runs gradient checks in `f64`. Matrices are row-major slices; products go
//! through `matrixmultiply` with explicit strides, which lets attention work
//! on per-head column blocks without copying.

use std::fmt::Debug;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

pub trait Real: num_traits::Float + Default + Debug + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn to_f32(self) -> f32;

    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn to_f32(self) -> f32 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided read-only matrix view.
#[derive(Clone, Copy, Debug)]
pub struct View<'a, R> {
    data: &'a [R],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, R> View<'a, R> {
    pub fn new(data: &'a [R], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "view {rows}x{cols} over {} elements", data.len());
        View {
            data,
            off: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    pub fn cols(self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols);
        View {
            off: self.off + start * self.cs,
            cols: len,
            ..self
        }
    }

    pub fn rows(self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.rows);
        View {
            off: self.off + start * self.rs,
            rows: len,
            ..self
        }
    }
}

/// Strided mutable matrix view.
#[derive(Debug)]
pub struct ViewMut<'a, R> {
    data: &'a mut [R],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, R> ViewMut<'a, R> {
    pub fn new(data: &'a mut [R], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "view {rows}x{cols} over {} elements", data.len());
        ViewMut {
            data,
            off: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn cols(self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols);
        ViewMut {
            off: self.off + start * self.cs,
            cols: len,
            ..self
        }
    }

    pub fn rows(self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.rows);
        ViewMut {
            off: self.off + start * self.rs,
            rows: len,
            ..self
        }
    }
}

fn last_index(off: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    off + (rows - 1) * rs + (cols - 1) * cs
}

/// `C ← alpha·A·B + beta·C`. With `beta = 0` the previous contents of `C`
/// are ignored.
pub fn gemm<R: Real>(alpha: R, a: View<R>, b: View<R>, beta: R, c: ViewMut<R>) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(b.rows, k, "inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "output shape");
    if m == 0 || n == 0 {
        return;
    }
    assert!(last_index(c.off, m, n, c.rs, c.cs) < c.data.len());
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c.data[c.off + i * c.rs + j * c.cs];
                *v = if beta == R::zero() { R::zero() } else { *v * beta };
            }
        }
        return;
    }
    assert!(last_index(a.off, m, k, a.rs, a.cs) < a.data.len());
    assert!(last_index(b.off, k, n, b.rs, b.cs) < b.data.len());
    // SAFETY: every index reached by the strides was bounds-checked above and
    // `c` is uniquely borrowed.
    unsafe {
        R::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// Row-major `m×n` product of row-major `a (m×k)` and `b (k×n)`.
pub fn matmul<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut c = vec![R::zero(); m * n];
    gemm(R::one(), View::new(a, m, k), View::new(b, k, n), R::zero(), ViewMut::new(&mut c, m, n));
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    MvBase,
    MvLora,
    UvFull,
    Shared,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::MvBase, Group::MvLora, Group::UvFull, Group::Shared];

    pub fn name(self) -> &'static str {
        match self {
            Group::MvBase => "mv_base",
            Group::MvLora => "mv_lora",
            Group::UvFull => "uv_full",
            Group::Shared => "shared",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Normal(f64),
    /// Glorot uniform for a `[fan_in, fan_out]` matrix.
    Xavier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<R> {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: Vec<R>,
}

pub type Pid = usize;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<R> {
    pub params: Vec<Param<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn add(&mut self, name: impl Into<String>, group: Group, shape: &[usize], init: Init, rng: &mut impl Rng) -> Pid {
        let len: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![R::zero(); len],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("positive std");
                (0..len).map(|_| R::from_f64(d.sample(rng))).collect()
            }
            Init::Xavier => {
                let (fi, fo) = (shape[0], shape[1..].iter().product::<usize>());
                let bound = (6.0 / (fi + fo) as f64).sqrt();
                let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..len).map(|_| R::from_f64(d.sample(rng))).collect()
            }
        };
        self.params.push(Param {
            name: name.into(),
            group,
            shape: shape.to_vec(),
            data,
        });
        self.params.len() - 1
    }

    pub fn get(&self, id: Pid) -> &[R] {
        &self.params[id].data
    }

    pub fn get_mut(&mut self, id: Pid) -> &mut [R] {
        &mut self.params[id].data
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Vec<Vec<R>> {
        self.params.iter().map(|p| vec![R::zero(); p.data.len()]).collect()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&x| S::from_f64(x.to_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn find(&self, name: &str) -> Option<Pid> {
        self.params.iter().position(|p| p.name == name)
    }
}

/// `y = x·W + b` for `x: n×din`, `W: din×dout`.
pub fn linear<R: Real>(x: &[R], n: usize, w: &[R], b: Option<&[R]>, din: usize, dout: usize) -> Vec<R> {
    let mut y = vec![R::zero(); n * dout];
    let beta = match b {
        Some(b) => {
            for row in y.chunks_exact_mut(dout) {
                row.copy_from_slice(b);
            }
            R::one()
        }
        None => R::zero(),
    };
    gemm(R::one(), View::new(x, n, din), View::new(w, din, dout), beta, ViewMut::new(&mut y, n, dout));
    y
}

/// Accumulates `dW += xᵀ·dy`.
pub fn linear_grad_w<R: Real>(x: &[R], dy: &[R], n: usize, din: usize, dout: usize, dw: &mut [R]) {
    gemm(R::one(), View::new(x, n, din).t(), View::new(dy, n, dout), R::one(), ViewMut::new(dw, din, dout));
}

/// Accumulates `db += Σ_rows dy`.
pub fn linear_grad_b<R: Real>(dy: &[R], dout: usize, db: &mut [R]) {
    for row in dy.chunks_exact(dout) {
        for (g, &d) in db.iter_mut().zip(row) {
            *g = *g + d;
        }
    }
}

/// Accumulates `dx += dy·Wᵀ`.
pub fn linear_grad_x<R: Real>(dy: &[R], n: usize, w: &[R], din: usize, dout: usize, dx: &mut [R]) {
    gemm(R::one(), View::new(dy, n, dout), View::new(w, din, dout).t(), R::one(), ViewMut::new(dx, n, din));
}

pub const LN_EPS: f64 = 1e-6;

/// Affine-free layer norm over rows; returns the normalized rows and their
/// reciprocal standard deviations.
pub fn layernorm<R: Real>(x: &[R], d: usize) -> (Vec<R>, Vec<R>) {
    let mut y = vec![R::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / d);
    let inv_d = R::from_f64(1.0 / d as f64);
    let eps = R::from_f64(LN_EPS);
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let mean = xr.iter().fold(R::zero(), |a, &v| a + v) * inv_d;
        let var = xr.iter().fold(R::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let r = (var + eps).sqrt().recip();
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    (y, rstd)
}

/// Accumulates the layer-norm input gradient given normalized rows `xhat`.
pub fn layernorm_backward<R: Real>(xhat: &[R], rstd: &[R], dy: &[R], d: usize, dx: &mut [R]) {
    let inv_d = R::from_f64(1.0 / d as f64);
    for (((xh, g), o), &r) in xhat
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(rstd)
    {
        let mean_g = g.iter().fold(R::zero(), |a, &v| a + v) * inv_d;
        let mean_gx = g.iter().zip(xh).fold(R::zero(), |a, (&gv, &xv)| a + gv * xv) * inv_d;
        for ((o, &gv), &xv) in o.iter_mut().zip(g).zip(xh) {
            *o = *o + r * (gv - mean_g - xv * mean_gx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<R: Real>(x: R) -> R {
    let c = R::from_f64(GELU_C);
    let a = R::from_f64(GELU_A);
    let half = R::from_f64(0.5);
    half * x * (R::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<R: Real>(x: R) -> R {
    let c = R::from_f64(GELU_C);
    let a = R::from_f64(GELU_A);
    let half = R::from_f64(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    let dinner = c * (R::one() + R::from_f64(3.0) * a * x * x);
    half * (R::one() + th) + half * x * (R::one() - th * th) * dinner
}

pub fn silu<R: Real>(x: R) -> R {
    x / (R::one() + (-x).exp())
}

pub fn silu_grad<R: Real>(x: R) -> R {
    let s = R::one() / (R::one() + (-x).exp());
    s * (R::one() + x * (R::one() - s))
}

/// In-place row softmax.
pub fn softmax_rows<R: Real>(x: &mut [R], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let m = row.iter().fold(R::neg_infinity(), |a, &v| a.max(v));
        let mut s = R::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        let inv = s.recip();
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

pub fn add_assign<R: Real>(dst: &mut [R], src: &[R]) {
    assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Standard sinusoidal embedding of a scalar, `[cos(x·f_i) …, sin(x·f_i) …]`.
pub fn sinusoid<R: Real>(x: f64, dim: usize) -> Vec<R> {
    let half = dim / 2;
    let mut out = vec![R::zero(); dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = R::from_f64((x * f).cos());
        out[half + i] = R::from_f64((x * f).sin());
    }
    out
}
