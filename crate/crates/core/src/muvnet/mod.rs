//! Two-branch transformer over multi-view and UV tokens.
//!
//! Each block runs two streams side by side. The multi-view stream attends
//! only among multi-view tokens. The UV stream's queries are the UV tokens
//! and its keys/values are the block's multi-view input followed by the UV
//! tokens. Conditioning (timestep and class label) is computed per frame and
//! enters through adaptive scale/shift/gate modulation. Geometry features are
//! projected per layer and added to rotated queries and keys.
//!
//! Weight matrices are stored `[in, out]` so a layer is `y = x·W + b`. LoRA
//! factors follow the same convention: `A: [in, rank]`, `B: [rank, out]`,
//! and the adapted weight is `W + (alpha/rank)·A·B`.

pub mod attention;
pub mod patch;
pub mod rope;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geomesh::{UvGeometryMaps, ViewBuffers};
use crate::grid::Grid;
use crate::nn::{self, gelu, gelu_grad, linear, silu, silu_grad, Group, Init, ParamStore, Pid, Real};
use crate::seqspace::{NUM_FRAMES, NUM_VIEWS, UV_FRAME};

use attention::{attention_backward, attention_forward, AttnCache, AttnShape, AttnWeights};
use rope::{rope_3d, RopeTable};

pub const RGB: usize = 3;
pub const GEO_CHANNELS: usize = 7;

/// Architecture switches used for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Geometry embeddings are not added to queries and keys.
    NoGeo,
    /// One stream with the multi-view weights over all tokens.
    NoDecoupling,
    /// Multi-view frames are dropped; only the UV stream runs.
    UvOnly,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGeo => "no-geo",
            Variant::NoDecoupling => "no-decoupling",
            Variant::UvOnly => "uv-only",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no-geo" => Ok(Variant::NoGeo),
            "no-decoupling" => Ok(Variant::NoDecoupling),
            "uv-only" => Ok(Variant::UvOnly),
            other => Err(Error::param(
                "variant",
                format!("unknown variant `{other}` (full | no-geo | no-decoupling | uv-only)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Multi-view frame side length in pixels.
    pub mv_size: usize,
    /// UV atlas side length in texels.
    pub uv_size: usize,
    pub label_vocab: usize,
    pub mlp_ratio: usize,
    /// Width of the sinusoidal timestep features.
    pub freq_dim: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch: 4,
            dim: 192,
            heads: 4,
            depth: 6,
            lora_rank: 8,
            lora_alpha: 16.0,
            mv_size: 32,
            uv_size: 64,
            label_vocab: 1,
            mlp_ratio: 4,
            freq_dim: 256,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let p = |name: &str, reason: String| Err(Error::param(name, reason));
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return p("dim", format!("{} is not divisible by {} heads", self.dim, self.heads));
        }
        rope::check_head_dim(self.head_dim())?;
        if self.depth == 0 {
            return p("depth", "must be at least 1".into());
        }
        if self.lora_rank == 0 {
            return p("lora_rank", "must be at least 1".into());
        }
        if self.uv_size != 2 * self.mv_size {
            return p("uv_size", format!("must be twice mv_size ({})", 2 * self.mv_size));
        }
        if self.patch == 0 || !self.mv_size.is_multiple_of(self.patch) {
            return p("patch", format!("{} does not divide mv_size {}", self.patch, self.mv_size));
        }
        if self.label_vocab == 0 {
            return p("label_vocab", "must be at least 1".into());
        }
        if self.freq_dim < 2 || !self.freq_dim.is_multiple_of(2) {
            return p("freq_dim", "must be a positive even number".into());
        }
        if self.mlp_ratio == 0 {
            return p("mlp_ratio", "must be at least 1".into());
        }
        Ok(())
    }

    pub fn mv_side_tokens(&self) -> usize {
        self.mv_size / self.patch
    }

    pub fn uv_side_tokens(&self) -> usize {
        self.uv_size / self.patch
    }

    pub fn mv_tokens_per_frame(&self) -> usize {
        self.mv_side_tokens().pow(2)
    }

    pub fn mv_tokens(&self) -> usize {
        NUM_VIEWS * self.mv_tokens_per_frame()
    }

    pub fn uv_tokens(&self) -> usize {
        self.uv_side_tokens().pow(2)
    }

    pub fn patch_width(&self) -> usize {
        self.patch * self.patch * RGB
    }

    pub fn geo_width(&self) -> usize {
        self.patch * self.patch * GEO_CHANNELS
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

/// Per-pixel geometry for all five frame slots: position (3), normal (3) and
/// validity (1) channels.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoConditioning {
    pub frames: Vec<Grid>,
}

impl GeoConditioning {
    pub fn new(views: &[ViewBuffers], uv: &UvGeometryMaps) -> Result<Self> {
        if views.len() != NUM_VIEWS {
            return Err(Error::shape(format!("expected {NUM_VIEWS} views, got {}", views.len())));
        }
        let mut frames = Vec::with_capacity(NUM_FRAMES);
        for v in views {
            frames.push(Grid::concat_channels(&[&v.position, &v.normal, &v.validity])?);
        }
        frames.push(Grid::concat_channels(&[&uv.position, &uv.normal, &uv.validity])?);
        Ok(GeoConditioning { frames })
    }
}

/// One model evaluation's inputs.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub frames: &'a [Grid],
    pub timesteps: [f32; NUM_FRAMES],
    pub geo: &'a GeoConditioning,
    pub label: usize,
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: Pid,
    b: Option<Pid>,
}

#[derive(Debug, Clone)]
struct BranchIds {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
    ff1: Lin,
    ff2: Lin,
    modulation: Lin,
    geo: Pid,
    /// `(A, B)` per adapted projection in q, k, v, o order.
    lora: Option<[(Pid, Pid); 4]>,
}

#[derive(Debug, Clone)]
struct HeadIds {
    modulation: Lin,
    out: Lin,
}

#[derive(Debug, Clone)]
struct Ids {
    mv_embed: Lin,
    uv_embed: Lin,
    label: Pid,
    t1: Lin,
    t2: Lin,
    blocks: Vec<(BranchIds, BranchIds)>,
    mv_head: HeadIds,
    uv_head: HeadIds,
}

/// Parameter layout plus precomputed rotary tables. Weights live in a
/// separate [`ParamStore`] so the same model drives `f32` training and `f64`
/// checks.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    ids: Ids,
    rope_mv: RopeTable,
    rope_uv: RopeTable,
    rope_all: RopeTable,
    frame_mv: Vec<usize>,
    frame_uv: Vec<usize>,
    frame_all: Vec<usize>,
}

struct Builder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn lin(&mut self, name: &str, group: Group, din: usize, dout: usize, bias: bool, init: Init) -> Lin {
        let w = self.store.add(format!("{name}.w"), group, &[din, dout], init, self.rng);
        let b = bias.then(|| self.store.add(format!("{name}.b"), group, &[dout], Init::Zeros, self.rng));
        Lin { w, b }
    }

    fn copy_lin(&mut self, src: Lin, name: &str, group: Group) -> Lin {
        let copy = |s: &mut ParamStore<f32>, id: Pid, suffix: &str| {
            let mut p = s.params[id].clone();
            p.name = format!("{name}.{suffix}");
            p.group = group;
            s.params.push(p);
            s.params.len() - 1
        };
        Lin {
            w: copy(self.store, src.w, "w"),
            b: src.b.map(|b| copy(self.store, b, "b")),
        }
    }
}

impl Model {
    /// Builds the layout and a freshly initialized parameter store.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<(Model, ParamStore<f32>)> {
        cfg.validate()?;
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let d = cfg.dim;
        let std = Init::Normal(0.02);
        let mv_embed = b.lin("mv_embed", Group::Shared, cfg.patch_width(), d, true, Init::Xavier);
        let uv_embed = b.lin("uv_embed", Group::Shared, cfg.patch_width(), d, true, Init::Xavier);
        let label = b.store.add("label_embed", Group::Shared, &[cfg.label_vocab, d], std, b.rng);
        let t1 = b.lin("time.0", Group::Shared, cfg.freq_dim, d, true, std);
        let t2 = b.lin("time.1", Group::Shared, d, d, true, std);

        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let name = |s: &str| format!("blocks.{l}.mv.{s}");
            let q = b.lin(&name("q"), Group::MvBase, d, d, true, Init::Xavier);
            let k = b.lin(&name("k"), Group::MvBase, d, d, true, Init::Xavier);
            let v = b.lin(&name("v"), Group::MvBase, d, d, true, Init::Xavier);
            let o = b.lin(&name("o"), Group::MvBase, d, d, true, Init::Xavier);
            let hidden = cfg.mlp_ratio * d;
            let ff1 = b.lin(&name("ff1"), Group::MvBase, d, hidden, true, Init::Xavier);
            let ff2 = b.lin(&name("ff2"), Group::MvBase, hidden, d, true, Init::Xavier);
            let modulation = b.lin(&name("mod"), Group::MvBase, d, 6 * d, true, Init::Zeros);
            // The geometry projection has no counterpart in a pretrained
            // backbone, so it trains alongside the adapters.
            let geo = b.lin(&name("geo"), Group::MvLora, cfg.geo_width(), d, false, std).w;
            let mut lora = [(0, 0); 4];
            for (slot, proj) in lora.iter_mut().zip(["q", "k", "v", "o"]) {
                let a = b.store.add(
                    format!("blocks.{l}.mv.lora_{proj}.a"),
                    Group::MvLora,
                    &[d, cfg.lora_rank],
                    Init::Normal(1.0 / (d as f64).sqrt()),
                    b.rng,
                );
                let bb = b.store.add(
                    format!("blocks.{l}.mv.lora_{proj}.b"),
                    Group::MvLora,
                    &[cfg.lora_rank, d],
                    Init::Zeros,
                    b.rng,
                );
                *slot = (a, bb);
            }
            let mv = BranchIds {
                q,
                k,
                v,
                o,
                ff1,
                ff2,
                modulation,
                geo,
                lora: Some(lora),
            };
            let uname = |s: &str| format!("blocks.{l}.uv.{s}");
            let g = Group::UvFull;
            let uv = BranchIds {
                q: b.copy_lin(q, &uname("q"), g),
                k: b.copy_lin(k, &uname("k"), g),
                v: b.copy_lin(v, &uname("v"), g),
                o: b.copy_lin(o, &uname("o"), g),
                ff1: b.copy_lin(ff1, &uname("ff1"), g),
                ff2: b.copy_lin(ff2, &uname("ff2"), g),
                modulation: b.copy_lin(modulation, &uname("mod"), g),
                geo: b.copy_lin(Lin { w: geo, b: None }, &uname("geo"), g).w,
                lora: None,
            };
            blocks.push((mv, uv));
        }
        let pw = cfg.patch_width();
        let mv_head = HeadIds {
            modulation: b.lin("mv_head.mod", Group::MvBase, d, 2 * d, true, Init::Zeros),
            out: b.lin("mv_head.out", Group::MvBase, d, pw, true, Init::Zeros),
        };
        let uv_head = HeadIds {
            modulation: b.lin("uv_head.mod", Group::UvFull, d, 2 * d, true, Init::Zeros),
            out: b.lin("uv_head.out", Group::UvFull, d, pw, true, Init::Zeros),
        };
        let ids = Ids {
            mv_embed,
            uv_embed,
            label,
            t1,
            t2,
            blocks,
            mv_head,
            uv_head,
        };
        Ok((Model::from_ids(cfg, ids)?, store))
    }

    fn from_ids(cfg: ModelConfig, ids: Ids) -> Result<Model> {
        let (ms, us) = (cfg.mv_side_tokens(), cfg.uv_side_tokens());
        let rope_all = rope_3d((NUM_VIEWS, ms, ms), (1, us, us), cfg.head_dim())?;
        let n_mv = cfg.mv_tokens();
        let frame_mv: Vec<usize> = (0..n_mv).map(|i| i / cfg.mv_tokens_per_frame()).collect();
        let frame_uv = vec![UV_FRAME; cfg.uv_tokens()];
        let frame_all = [frame_mv.clone(), frame_uv.clone()].concat();
        Ok(Model {
            rope_mv: rope_all.slice(0, n_mv),
            rope_uv: rope_all.slice(n_mv, cfg.uv_tokens()),
            rope_all,
            frame_mv,
            frame_uv,
            frame_all,
            cfg,
            ids,
        })
    }

    pub fn rope(&self) -> &RopeTable {
        &self.rope_all
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let c = &self.cfg;
        if input.frames.len() != NUM_FRAMES || input.geo.frames.len() != NUM_FRAMES {
            return Err(Error::shape(format!("model expects {NUM_FRAMES} frames and geometry maps")));
        }
        for (i, (f, g)) in input.frames.iter().zip(&input.geo.frames).enumerate() {
            let s = if i == UV_FRAME { c.uv_size } else { c.mv_size };
            if f.shape() != (s, s, RGB) {
                return Err(Error::shape(format!("frame {i} is {:?}, expected ({s}, {s}, {RGB})", f.shape())));
            }
            if g.shape() != (s, s, GEO_CHANNELS) {
                return Err(Error::shape(format!(
                    "geometry {i} is {:?}, expected ({s}, {s}, {GEO_CHANNELS})",
                    g.shape()
                )));
            }
        }
        if input.label >= c.label_vocab {
            return Err(Error::param("label", format!("{} outside vocabulary of {}", input.label, c.label_vocab)));
        }
        Ok(())
    }

    /// Velocity prediction as five grids shaped like the input frames. The
    /// multi-view predictions are zero for the UV-only variant.
    pub fn predict<R: Real>(&self, params: &ParamStore<R>, input: &ModelInput) -> Result<Vec<Grid>> {
        let (tokens, _) = self.forward(params, input)?;
        let c = &self.cfg;
        tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let s = if i == UV_FRAME { c.uv_size } else { c.mv_size };
                patch::unpatchify(t, s, s, RGB, c.patch)
            })
            .collect()
    }

    /// Patchified frames in the layout [`Model::forward`] returns.
    pub fn frame_tokens<R: Real>(&self, frames: &[Grid]) -> Result<Vec<Vec<R>>> {
        frames.iter().map(|f| patch::patchify(f, self.cfg.patch)).collect()
    }

    /// Returns per-frame predictions as patch rows plus the activations the
    /// backward pass needs.
    pub fn forward<R: Real>(&self, params: &ParamStore<R>, input: &ModelInput) -> Result<(Vec<Vec<R>>, ForwardCache<R>)> {
        self.check_input(input)?;
        let c = &self.cfg;
        let d = c.dim;
        let variant = c.variant;
        let (n_mv, n_uv) = (c.mv_tokens(), c.uv_tokens());
        let has_mv = variant != Variant::UvOnly;
        let use_geo = variant != Variant::NoGeo;

        let mut mv_patches = Vec::with_capacity(n_mv * c.patch_width());
        let mut geo_mv = Vec::with_capacity(n_mv * c.geo_width());
        for f in 0..NUM_VIEWS {
            mv_patches.extend(patch::patchify::<R>(&input.frames[f], c.patch)?);
            geo_mv.extend(patch::patchify::<R>(&input.geo.frames[f], c.patch)?);
        }
        let uv_patches = patch::patchify::<R>(&input.frames[UV_FRAME], c.patch)?;
        let geo_uv = patch::patchify::<R>(&input.geo.frames[UV_FRAME], c.patch)?;
        let geo_all = [geo_mv.clone(), geo_uv.clone()].concat();

        // Per-frame conditioning vector.
        let mut freq = Vec::with_capacity(NUM_FRAMES * c.freq_dim);
        for &t in &input.timesteps {
            freq.extend(nn::sinusoid::<R>(1000.0 * t as f64, c.freq_dim));
        }
        let t_pre = self.lin_fwd(params, self.ids.t1, &freq, NUM_FRAMES, c.freq_dim, d);
        let t_act: Vec<R> = t_pre.iter().map(|&x| silu(x)).collect();
        let mut cond = self.lin_fwd(params, self.ids.t2, &t_act, NUM_FRAMES, d, d);
        let lab = &params.get(self.ids.label)[input.label * d..(input.label + 1) * d];
        for row in cond.chunks_exact_mut(d) {
            nn::add_assign(row, lab);
        }
        let s: Vec<R> = cond.iter().map(|&x| silu(x)).collect();

        let mut x_mv = if has_mv {
            self.lin_fwd(params, self.ids.mv_embed, &mv_patches, n_mv, c.patch_width(), d)
        } else {
            Vec::new()
        };
        let mut x_uv = self.lin_fwd(params, self.ids.uv_embed, &uv_patches, n_uv, c.patch_width(), d);

        let mut blocks = Vec::with_capacity(c.depth);
        for (mv_ids, uv_ids) in &self.ids.blocks {
            let bc = match variant {
                Variant::Full | Variant::NoGeo => {
                    let gm = use_geo.then_some(geo_mv.as_slice());
                    let ga = use_geo.then_some(geo_all.as_slice());
                    let (mv_out, mv_cache) =
                        self.branch_forward(params, mv_ids, &x_mv, 0, &self.frame_mv, gm, &self.rope_mv, &self.rope_mv, &s)?;
                    let all = [x_mv.as_slice(), x_uv.as_slice()].concat();
                    let (uv_out, uv_cache) =
                        self.branch_forward(params, uv_ids, &all, n_mv, &self.frame_all, ga, &self.rope_uv, &self.rope_all, &s)?;
                    x_mv = mv_out;
                    x_uv = uv_out;
                    BlockCache {
                        mv: Some(mv_cache),
                        uv: Some(uv_cache),
                    }
                }
                Variant::NoDecoupling => {
                    let all = [x_mv.as_slice(), x_uv.as_slice()].concat();
                    let (out, cache) = self.branch_forward(
                        params,
                        mv_ids,
                        &all,
                        0,
                        &self.frame_all,
                        Some(&geo_all),
                        &self.rope_all,
                        &self.rope_all,
                        &s,
                    )?;
                    x_mv = out[..n_mv * d].to_vec();
                    x_uv = out[n_mv * d..].to_vec();
                    BlockCache {
                        mv: Some(cache),
                        uv: None,
                    }
                }
                Variant::UvOnly => {
                    let (out, cache) = self.branch_forward(
                        params,
                        uv_ids,
                        &x_uv,
                        0,
                        &self.frame_uv,
                        Some(&geo_uv),
                        &self.rope_uv,
                        &self.rope_uv,
                        &s,
                    )?;
                    x_uv = out;
                    BlockCache { mv: None, uv: Some(cache) }
                }
            };
            blocks.push(bc);
        }

        let mut outputs = Vec::with_capacity(NUM_FRAMES);
        let per = c.mv_tokens_per_frame() * c.patch_width();
        let mv_head = if has_mv {
            let (y, hc) = self.head_forward(params, &self.ids.mv_head, &x_mv, &self.frame_mv, &s);
            outputs.extend(y.chunks_exact(per).map(|ch| ch.to_vec()));
            Some(hc)
        } else {
            outputs.extend((0..NUM_VIEWS).map(|_| vec![R::zero(); per]));
            None
        };
        let (y, uv_head) = self.head_forward(params, &self.ids.uv_head, &x_uv, &self.frame_uv, &s);
        outputs.push(y);

        Ok((
            outputs,
            ForwardCache {
                mv_patches,
                uv_patches,
                geo_mv,
                geo_uv,
                geo_all,
                freq,
                t_pre,
                t_act,
                cond,
                s,
                label: input.label,
                blocks,
                mv_head,
                uv_head,
            },
        ))
    }

    /// Accumulates parameter gradients given `∂loss/∂output` in the layout
    /// returned by [`Model::forward`].
    pub fn backward<R: Real>(
        &self,
        params: &ParamStore<R>,
        cache: &ForwardCache<R>,
        d_out: &[Vec<R>],
        grads: &mut [Vec<R>],
    ) -> Result<()> {
        let c = &self.cfg;
        let d = c.dim;
        let (n_mv, n_uv) = (c.mv_tokens(), c.uv_tokens());
        if d_out.len() != NUM_FRAMES {
            return Err(Error::shape("output gradient must cover five frames"));
        }
        let mut ds = vec![R::zero(); NUM_FRAMES * d];

        let mut dx_mv = match &cache.mv_head {
            Some(hc) => {
                let dy: Vec<R> = d_out[..NUM_VIEWS].concat();
                self.head_backward(params, &self.ids.mv_head, hc, &dy, &self.frame_mv, &cache.s, grads, &mut ds)
            }
            None => Vec::new(),
        };
        let mut dx_uv = self.head_backward(
            params,
            &self.ids.uv_head,
            &cache.uv_head,
            &d_out[UV_FRAME],
            &self.frame_uv,
            &cache.s,
            grads,
            &mut ds,
        );

        for ((mv_ids, uv_ids), bc) in self.ids.blocks.iter().zip(&cache.blocks).rev() {
            match c.variant {
                Variant::Full | Variant::NoGeo => {
                    let use_geo = c.variant != Variant::NoGeo;
                    let gm = use_geo.then_some(cache.geo_mv.as_slice());
                    let ga = use_geo.then_some(cache.geo_all.as_slice());
                    let mvc = bc.mv.as_ref().expect("multi-view cache");
                    let uvc = bc.uv.as_ref().expect("uv cache");
                    let d_all = self.branch_backward(
                        params, uv_ids, uvc, &dx_uv, n_mv, &self.frame_all, ga, &self.rope_uv, &self.rope_all, &cache.s, grads,
                        &mut ds,
                    );
                    let mut d_mv = self.branch_backward(
                        params, mv_ids, mvc, &dx_mv, 0, &self.frame_mv, gm, &self.rope_mv, &self.rope_mv, &cache.s, grads, &mut ds,
                    );
                    nn::add_assign(&mut d_mv, &d_all[..n_mv * d]);
                    dx_mv = d_mv;
                    dx_uv = d_all[n_mv * d..].to_vec();
                }
                Variant::NoDecoupling => {
                    let bcache = bc.mv.as_ref().expect("joint cache");
                    let dout = [dx_mv.as_slice(), dx_uv.as_slice()].concat();
                    let d_all = self.branch_backward(
                        params,
                        mv_ids,
                        bcache,
                        &dout,
                        0,
                        &self.frame_all,
                        Some(&cache.geo_all),
                        &self.rope_all,
                        &self.rope_all,
                        &cache.s,
                        grads,
                        &mut ds,
                    );
                    dx_mv = d_all[..n_mv * d].to_vec();
                    dx_uv = d_all[n_mv * d..].to_vec();
                }
                Variant::UvOnly => {
                    let bcache = bc.uv.as_ref().expect("uv cache");
                    dx_uv = self.branch_backward(
                        params,
                        uv_ids,
                        bcache,
                        &dx_uv,
                        0,
                        &self.frame_uv,
                        Some(&cache.geo_uv),
                        &self.rope_uv,
                        &self.rope_uv,
                        &cache.s,
                        grads,
                        &mut ds,
                    );
                }
            }
        }

        let pw = c.patch_width();
        if cache.mv_head.is_some() {
            self.lin_bwd(params, self.ids.mv_embed, &cache.mv_patches, &dx_mv, n_mv, pw, d, grads, None);
        }
        self.lin_bwd(params, self.ids.uv_embed, &cache.uv_patches, &dx_uv, n_uv, pw, d, grads, None);

        // Conditioning path.
        let dcond: Vec<R> = ds.iter().zip(&cache.cond).map(|(&g, &x)| g * silu_grad(x)).collect();
        {
            let lab = &mut grads[self.ids.label][cache.label * d..(cache.label + 1) * d];
            for row in dcond.chunks_exact(d) {
                nn::add_assign(lab, row);
            }
        }
        let mut dt_act = vec![R::zero(); NUM_FRAMES * d];
        self.lin_bwd(params, self.ids.t2, &cache.t_act, &dcond, NUM_FRAMES, d, d, grads, Some(&mut dt_act));
        let dt_pre: Vec<R> = dt_act.iter().zip(&cache.t_pre).map(|(&g, &x)| g * silu_grad(x)).collect();
        self.lin_bwd(params, self.ids.t1, &cache.freq, &dt_pre, NUM_FRAMES, c.freq_dim, d, grads, None);
        Ok(())
    }

    fn lin_fwd<R: Real>(&self, params: &ParamStore<R>, l: Lin, x: &[R], n: usize, din: usize, dout: usize) -> Vec<R> {
        linear(x, n, params.get(l.w), l.b.map(|b| params.get(b)), din, dout)
    }

    #[allow(clippy::too_many_arguments)]
    fn lin_bwd<R: Real>(
        &self,
        params: &ParamStore<R>,
        l: Lin,
        x: &[R],
        dy: &[R],
        n: usize,
        din: usize,
        dout: usize,
        grads: &mut [Vec<R>],
        dx: Option<&mut [R]>,
    ) {
        nn::linear_grad_w(x, dy, n, din, dout, &mut grads[l.w]);
        if let Some(b) = l.b {
            nn::linear_grad_b(dy, dout, &mut grads[b]);
        }
        if let Some(dx) = dx {
            nn::linear_grad_x(dy, n, params.get(l.w), din, dout, dx);
        }
    }

    /// Adapted projection weight `W + scale·A·B`, or `W` itself without
    /// adapters.
    fn effective<R: Real>(&self, params: &ParamStore<R>, w: Pid, lora: Option<(Pid, Pid)>) -> Vec<R> {
        let d = self.cfg.dim;
        let mut out = params.get(w).to_vec();
        if let Some((a, b)) = lora {
            nn::gemm(
                R::from_f64(self.cfg.lora_scale()),
                nn::View::new(params.get(a), d, self.cfg.lora_rank),
                nn::View::new(params.get(b), self.cfg.lora_rank, d),
                R::one(),
                nn::ViewMut::new(&mut out, d, d),
            );
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn branch_forward<R: Real>(
        &self,
        params: &ParamStore<R>,
        ids: &BranchIds,
        x_all: &[R],
        n_ctx: usize,
        frames: &[usize],
        geo: Option<&[R]>,
        rope_q: &RopeTable,
        rope_e: &RopeTable,
        s: &[R],
    ) -> Result<(Vec<R>, BranchCache<R>)> {
        let c = &self.cfg;
        let d = c.dim;
        let n_all = x_all.len() / d;
        let n_own = n_all - n_ctx;
        let hidden = c.mlp_ratio * d;
        let modv = self.lin_fwd(params, ids.modulation, s, NUM_FRAMES, d, 6 * d);

        let (xhat1, rstd1) = nn::layernorm(x_all, d);
        let h1 = modulate(&xhat1, frames, &modv, d, 6, 0, 1);

        let lora = |i: usize| ids.lora.map(|l| l[i]);
        let w_eff = [
            self.effective(params, ids.q.w, lora(0)),
            self.effective(params, ids.k.w, lora(1)),
            self.effective(params, ids.v.w, lora(2)),
            self.effective(params, ids.o.w, lora(3)),
        ];
        let g_all = geo.map(|g| linear(g, n_all, params.get(ids.geo), None, c.geo_width(), d));
        let weights = AttnWeights {
            wq: &w_eff[0],
            bq: params.get(ids.q.b.expect("bias")),
            wk: &w_eff[1],
            bk: params.get(ids.k.b.expect("bias")),
            wv: &w_eff[2],
            bv: params.get(ids.v.b.expect("bias")),
            wo: &w_eff[3],
            bo: params.get(ids.o.b.expect("bias")),
        };
        let shape = AttnShape { dim: d, heads: c.heads };
        let (attn, attn_cache) = attention_forward(
            &h1[n_ctx * d..],
            &h1,
            g_all.as_ref().map(|g| &g[n_ctx * d..]),
            g_all.as_deref(),
            rope_q,
            rope_e,
            &weights,
            shape,
        )?;

        let own_frames = &frames[n_ctx..];
        let mut x1 = x_all[n_ctx * d..].to_vec();
        for (r, (row, arow)) in x1.chunks_exact_mut(d).zip(attn.chunks_exact(d)).enumerate() {
            let gate = &modv[own_frames[r] * 6 * d + 2 * d..][..d];
            for ((x, &a), &g) in row.iter_mut().zip(arow).zip(gate) {
                *x = *x + g * a;
            }
        }
        let (xhat2, rstd2) = nn::layernorm(&x1, d);
        let h2 = modulate(&xhat2, own_frames, &modv, d, 6, 3, 4);
        let u = self.lin_fwd(params, ids.ff1, &h2, n_own, d, hidden);
        let act: Vec<R> = u.iter().map(|&v| gelu(v)).collect();
        let ff = self.lin_fwd(params, ids.ff2, &act, n_own, hidden, d);
        let mut out = x1;
        for (r, (row, frow)) in out.chunks_exact_mut(d).zip(ff.chunks_exact(d)).enumerate() {
            let gate = &modv[own_frames[r] * 6 * d + 5 * d..][..d];
            for ((x, &f), &g) in row.iter_mut().zip(frow).zip(gate) {
                *x = *x + g * f;
            }
        }
        Ok((
            out,
            BranchCache {
                modv,
                xhat1,
                rstd1,
                h1,
                w_eff,
                attn_cache,
                attn,
                xhat2,
                rstd2,
                h2,
                u,
                act,
                ff,
            },
        ))
    }

    /// Returns `∂loss/∂x_all` (context rows first) and accumulates parameter
    /// and conditioning gradients.
    #[allow(clippy::too_many_arguments)]
    fn branch_backward<R: Real>(
        &self,
        params: &ParamStore<R>,
        ids: &BranchIds,
        bc: &BranchCache<R>,
        dout: &[R],
        n_ctx: usize,
        frames: &[usize],
        geo: Option<&[R]>,
        rope_q: &RopeTable,
        rope_e: &RopeTable,
        s: &[R],
        grads: &mut [Vec<R>],
        ds: &mut [R],
    ) -> Vec<R> {
        let c = &self.cfg;
        let d = c.dim;
        let hidden = c.mlp_ratio * d;
        let n_own = dout.len() / d;
        let n_all = n_ctx + n_own;
        let own_frames = &frames[n_ctx..];
        let mw = 6 * d;
        let mut dmod = vec![R::zero(); NUM_FRAMES * mw];

        // Feed-forward half.
        let mut dx1 = dout.to_vec();
        let mut dff = vec![R::zero(); n_own * d];
        for r in 0..n_own {
            let f = own_frames[r];
            for j in 0..d {
                let g = dout[r * d + j];
                dmod[f * mw + 5 * d + j] = dmod[f * mw + 5 * d + j] + g * bc.ff[r * d + j];
                dff[r * d + j] = g * bc.modv[f * mw + 5 * d + j];
            }
        }
        let mut dact = vec![R::zero(); n_own * hidden];
        self.lin_bwd(params, ids.ff2, &bc.act, &dff, n_own, hidden, d, grads, Some(&mut dact));
        let du: Vec<R> = dact.iter().zip(&bc.u).map(|(&g, &u)| g * gelu_grad(u)).collect();
        let mut dh2 = vec![R::zero(); n_own * d];
        self.lin_bwd(params, ids.ff1, &bc.h2, &du, n_own, d, hidden, grads, Some(&mut dh2));
        let dxhat2 = modulate_backward(&dh2, &bc.xhat2, own_frames, &bc.modv, &mut dmod, d, 6, 3, 4);
        nn::layernorm_backward(&bc.xhat2, &bc.rstd2, &dxhat2, d, &mut dx1);

        // Attention half.
        let mut dattn = vec![R::zero(); n_own * d];
        for r in 0..n_own {
            let f = own_frames[r];
            for j in 0..d {
                let g = dx1[r * d + j];
                dmod[f * mw + 2 * d + j] = dmod[f * mw + 2 * d + j] + g * bc.attn[r * d + j];
                dattn[r * d + j] = g * bc.modv[f * mw + 2 * d + j];
            }
        }
        let weights = AttnWeights {
            wq: &bc.w_eff[0],
            bq: params.get(ids.q.b.expect("bias")),
            wk: &bc.w_eff[1],
            bk: params.get(ids.k.b.expect("bias")),
            wv: &bc.w_eff[2],
            bv: params.get(ids.v.b.expect("bias")),
            wo: &bc.w_eff[3],
            bo: params.get(ids.o.b.expect("bias")),
        };
        let shape = AttnShape { dim: d, heads: c.heads };
        let ag = attention_backward(&dattn, &bc.h1[n_ctx * d..], &bc.h1, rope_q, rope_e, &weights, &bc.attn_cache, shape);

        let proj = [(ids.q, &ag.wq, &ag.bq), (ids.k, &ag.wk, &ag.bk), (ids.v, &ag.wv, &ag.bv), (ids.o, &ag.wo, &ag.bo)];
        for (i, (l, gw, gb)) in proj.into_iter().enumerate() {
            nn::add_assign(&mut grads[l.w], gw);
            nn::add_assign(&mut grads[l.b.expect("bias")], gb);
            if let Some(lora) = ids.lora {
                let (a, b) = lora[i];
                let scale = R::from_f64(c.lora_scale());
                let r = c.lora_rank;
                // dA = s·dW·Bᵀ, dB = s·Aᵀ·dW.
                nn::gemm(
                    scale,
                    nn::View::new(gw, d, d),
                    nn::View::new(params.get(b), r, d).t(),
                    R::one(),
                    nn::ViewMut::new(&mut grads[a], d, r),
                );
                nn::gemm(
                    scale,
                    nn::View::new(params.get(a), d, r).t(),
                    nn::View::new(gw, d, d),
                    R::one(),
                    nn::ViewMut::new(&mut grads[b], r, d),
                );
            }
        }
        if let Some(g) = geo {
            let mut dg = ag.ge.clone();
            nn::add_assign(&mut dg[n_ctx * d..], &ag.gq);
            nn::linear_grad_w(g, &dg, n_all, c.geo_width(), d, &mut grads[ids.geo]);
        }

        let mut dh1 = ag.xe;
        nn::add_assign(&mut dh1[n_ctx * d..], &ag.xq);
        let dxhat1 = modulate_backward(&dh1, &bc.xhat1, frames, &bc.modv, &mut dmod, d, 6, 0, 1);
        let mut dx_all = vec![R::zero(); n_all * d];
        nn::layernorm_backward(&bc.xhat1, &bc.rstd1, &dxhat1, d, &mut dx_all);
        nn::add_assign(&mut dx_all[n_ctx * d..], &dx1);

        self.lin_bwd(params, ids.modulation, s, &dmod, NUM_FRAMES, d, mw, grads, Some(ds));
        dx_all
    }

    fn head_forward<R: Real>(&self, params: &ParamStore<R>, ids: &HeadIds, x: &[R], frames: &[usize], s: &[R]) -> (Vec<R>, HeadCache<R>) {
        let d = self.cfg.dim;
        let n = x.len() / d;
        let modv = self.lin_fwd(params, ids.modulation, s, NUM_FRAMES, d, 2 * d);
        let (xhat, rstd) = nn::layernorm(x, d);
        let h = modulate(&xhat, frames, &modv, d, 2, 0, 1);
        let y = self.lin_fwd(params, ids.out, &h, n, d, self.cfg.patch_width());
        (y, HeadCache { modv, xhat, rstd, h })
    }

    #[allow(clippy::too_many_arguments)]
    fn head_backward<R: Real>(
        &self,
        params: &ParamStore<R>,
        ids: &HeadIds,
        hc: &HeadCache<R>,
        dy: &[R],
        frames: &[usize],
        s: &[R],
        grads: &mut [Vec<R>],
        ds: &mut [R],
    ) -> Vec<R> {
        let d = self.cfg.dim;
        let pw = self.cfg.patch_width();
        let n = dy.len() / pw;
        let mut dh = vec![R::zero(); n * d];
        self.lin_bwd(params, ids.out, &hc.h, dy, n, d, pw, grads, Some(&mut dh));
        let mut dmod = vec![R::zero(); NUM_FRAMES * 2 * d];
        let dxhat = modulate_backward(&dh, &hc.xhat, frames, &hc.modv, &mut dmod, d, 2, 0, 1);
        let mut dx = vec![R::zero(); n * d];
        nn::layernorm_backward(&hc.xhat, &hc.rstd, &dxhat, d, &mut dx);
        self.lin_bwd(params, ids.modulation, s, &dmod, NUM_FRAMES, d, 2 * d, grads, Some(ds));
        dx
    }

    /// The same layout with the multi-view adapters detached.
    pub fn without_lora(&self) -> Model {
        let mut m = self.clone();
        for (mv, _) in &mut m.ids.blocks {
            mv.lora = None;
        }
        m
    }

    /// `(A, B)` parameter ids of every multi-view adapter.
    pub fn lora_ids(&self) -> Vec<(Pid, Pid)> {
        self.ids.blocks.iter().flat_map(|(mv, _)| mv.lora.into_iter().flatten()).collect()
    }
}

/// `h = xhat·(1 + scale_f) + shift_f` where the modulation row of frame `f`
/// holds `chunks` blocks of width `d`.
fn modulate<R: Real>(xhat: &[R], frames: &[usize], modv: &[R], d: usize, chunks: usize, shift: usize, scale: usize) -> Vec<R> {
    let mut h = vec![R::zero(); xhat.len()];
    for (r, (hr, xr)) in h.chunks_exact_mut(d).zip(xhat.chunks_exact(d)).enumerate() {
        let m = &modv[frames[r] * chunks * d..][..chunks * d];
        let (sh, sc) = (&m[shift * d..][..d], &m[scale * d..][..d]);
        for j in 0..d {
            hr[j] = xr[j] * (R::one() + sc[j]) + sh[j];
        }
    }
    h
}

#[allow(clippy::too_many_arguments)]
fn modulate_backward<R: Real>(
    dh: &[R],
    xhat: &[R],
    frames: &[usize],
    modv: &[R],
    dmod: &mut [R],
    d: usize,
    chunks: usize,
    shift: usize,
    scale: usize,
) -> Vec<R> {
    let mut dx = vec![R::zero(); dh.len()];
    for (r, ((dxr, dr), xr)) in dx.chunks_exact_mut(d).zip(dh.chunks_exact(d)).zip(xhat.chunks_exact(d)).enumerate() {
        let base = frames[r] * chunks * d;
        for j in 0..d {
            let sc = modv[base + scale * d + j];
            dxr[j] = dr[j] * (R::one() + sc);
            dmod[base + shift * d + j] = dmod[base + shift * d + j] + dr[j];
            dmod[base + scale * d + j] = dmod[base + scale * d + j] + dr[j] * xr[j];
        }
    }
    dx
}

#[derive(Debug, Clone)]
struct BranchCache<R> {
    modv: Vec<R>,
    xhat1: Vec<R>,
    rstd1: Vec<R>,
    h1: Vec<R>,
    w_eff: [Vec<R>; 4],
    attn_cache: AttnCache<R>,
    attn: Vec<R>,
    xhat2: Vec<R>,
    rstd2: Vec<R>,
    h2: Vec<R>,
    u: Vec<R>,
    act: Vec<R>,
    ff: Vec<R>,
}

#[derive(Debug, Clone)]
struct BlockCache<R> {
    mv: Option<BranchCache<R>>,
    uv: Option<BranchCache<R>>,
}

#[derive(Debug, Clone)]
struct HeadCache<R> {
    modv: Vec<R>,
    xhat: Vec<R>,
    rstd: Vec<R>,
    h: Vec<R>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<R> {
    mv_patches: Vec<R>,
    uv_patches: Vec<R>,
    geo_mv: Vec<R>,
    geo_uv: Vec<R>,
    geo_all: Vec<R>,
    freq: Vec<R>,
    t_pre: Vec<R>,
    t_act: Vec<R>,
    cond: Vec<R>,
    s: Vec<R>,
    label: usize,
    blocks: Vec<BlockCache<R>>,
    mv_head: Option<HeadCache<R>>,
    uv_head: HeadCache<R>,
}

#[cfg(test)]
mod tests;
