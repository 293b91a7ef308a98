//! Multi-task rectified-flow training.
//!
//! Each step draws `batch_size × accumulation` examples. An example picks a
//! task, an asset from that task's pool, a conditioning view, one flow time
//! for all denoising frames, and fresh Gaussian noise. Gradients are averaged
//! over the examples and applied with AdamW under a linear-warmup/cosine
//! schedule, followed by a power-profile EMA update.

pub mod checkpoint;

use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Prepared;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::muvnet::{Model, ModelConfig, ModelInput, Variant};
use crate::nn::{Group, ParamStore};
use crate::seqspace::{
    flow_loss_and_grad, frame_roles, noise_sequence, velocity_target, FrameRole, FrameSequence, ScheduleConfig, Task,
    TaskSpec, NUM_FRAMES, NUM_VIEWS, UV_FRAME,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Every parameter group trains.
    Scratch,
    /// The multi-view base weights stay frozen.
    Finetune,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Scratch => "scratch",
            TrainMode::Finetune => "finetune",
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(TrainMode::Scratch),
            "finetune" => Ok(TrainMode::Finetune),
            other => Err(Error::param("mode", format!("unknown mode `{other}` (scratch | finetune)"))),
        }
    }
}

/// How training assets are assigned to the two tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixPreset {
    /// img2tex on the textured pool only.
    ThreeDOnly,
    /// The textured pool split 3:2 between img2tex and geo2mv.
    Split3d,
    /// img2tex on the textured pool, geo2mv on the multi-view-only pool.
    Hybrid,
}

impl MixPreset {
    pub fn name(self) -> &'static str {
        match self {
            MixPreset::ThreeDOnly => "3d-only",
            MixPreset::Split3d => "split-3d",
            MixPreset::Hybrid => "hybrid",
        }
    }
}

impl FromStr for MixPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "3d-only" => Ok(MixPreset::ThreeDOnly),
            "split-3d" => Ok(MixPreset::Split3d),
            "hybrid" => Ok(MixPreset::Hybrid),
            other => Err(Error::param("mix", format!("unknown preset `{other}` (3d-only | split-3d | hybrid)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup: u64,
    pub steps: u64,
    /// Relative standard deviation of the power-profile EMA.
    pub ema_std: f64,
    pub batch_size: usize,
    pub accumulation: usize,
    pub p_img2tex: f64,
    pub p_geo2mv: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// 1: img2tex only. 2: mixed tasks.
    pub stage: u8,
    pub mix: MixPreset,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            warmup: 200,
            steps: 5000,
            ema_std: 0.05,
            batch_size: 1,
            accumulation: 1,
            p_img2tex: 0.6,
            p_geo2mv: 0.4,
            seed: 0,
            mode: TrainMode::Scratch,
            stage: 2,
            mix: MixPreset::Hybrid,
            grad_clip: 0.0,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let p = |n: &str, r: &str| Err(Error::param(n, r));
        if (self.p_img2tex + self.p_geo2mv - 1.0).abs() > 1e-9 || self.p_img2tex < 0.0 || self.p_geo2mv < 0.0 {
            return p("task_mix", "probabilities must be non-negative and sum to 1");
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return p("lr", "must be positive");
        }
        if self.batch_size == 0 || self.accumulation == 0 {
            return p("batch_size", "batch size and accumulation must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return p("betas", "must lie in [0, 1)");
        }
        if self.ema_std.is_nan() || self.ema_std < 0.0 {
            return p("ema_std", "must be non-negative");
        }
        if !matches!(self.stage, 1 | 2) {
            return p("stage", "must be 1 or 2");
        }
        self.schedule.validate()
    }

    /// Probability of drawing img2tex after applying the stage.
    pub fn effective_p_img2tex(&self, variant: Variant) -> f64 {
        if self.stage == 1 || variant == Variant::UvOnly || self.mix == MixPreset::ThreeDOnly {
            1.0
        } else {
            self.p_img2tex
        }
    }

    /// Learning rate for 1-based `step`: linear warmup to `lr` over
    /// `warmup` steps, then half-cosine decay to zero at `steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step <= self.warmup {
            return self.lr * step as f64 / self.warmup.max(1) as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Asset indices available to each task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainPools {
    pub tex: Vec<usize>,
    pub mv: Vec<usize>,
}

impl TrainPools {
    /// `textured` assets carry UV ground truth; `mv_only` assets contribute
    /// renders only.
    pub fn from_preset(preset: MixPreset, textured: &[usize], mv_only: &[usize]) -> Result<Self> {
        let pools = match preset {
            MixPreset::ThreeDOnly => TrainPools {
                tex: textured.to_vec(),
                mv: Vec::new(),
            },
            MixPreset::Split3d => {
                let n_tex = (textured.len() * 3).div_ceil(5);
                TrainPools {
                    tex: textured[..n_tex].to_vec(),
                    mv: textured[n_tex..].to_vec(),
                }
            }
            MixPreset::Hybrid => TrainPools {
                tex: textured.to_vec(),
                mv: mv_only.to_vec(),
            },
        };
        if pools.tex.is_empty() {
            return Err(Error::data(format!("{} preset leaves the img2tex pool empty", preset.name())));
        }
        Ok(pools)
    }
}

/// Chooses a task with probability `p_img2tex` for img2tex.
pub fn draw_task(p_img2tex: f64, rng: &mut impl Rng) -> Task {
    if rng.random::<f64>() < p_img2tex {
        Task::Img2Tex
    } else {
        Task::Geo2Mv
    }
}

/// Unit-normal noise grids shaped like `frames`.
pub fn gaussian_like(frames: &[Grid], rng: &mut impl Rng) -> Vec<Grid> {
    frames
        .iter()
        .map(|f| Grid {
            data: (0..f.data.len()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect(),
            ..f.clone()
        })
        .collect()
}

/// Roles after applying architecture variants: without multi-view frames
/// every view slot is nonsense.
pub fn variant_roles(roles: [FrameRole; NUM_FRAMES], variant: Variant) -> [FrameRole; NUM_FRAMES] {
    let mut r = roles;
    if variant == Variant::UvOnly {
        r[..NUM_VIEWS].fill(FrameRole::NF);
    }
    r
}

/// One training example.
#[derive(Debug, Clone)]
pub struct Example {
    pub asset: usize,
    pub task: TaskSpec,
    pub roles: [FrameRole; NUM_FRAMES],
    pub t_df: f32,
    pub clean: Vec<Grid>,
    pub noise: Vec<Grid>,
    pub seq: FrameSequence,
    pub target: Vec<Grid>,
    pub label: usize,
}

/// Clean frames for a task: albedo views and atlas for img2tex, shaded views
/// and an empty UV slot for geo2mv.
pub fn clean_frames(asset: &Prepared, task: Task) -> Vec<Grid> {
    let mut frames = match task {
        Task::Img2Tex => asset.mv_albedo.clone(),
        Task::Geo2Mv => asset.mv_shaded.clone(),
    };
    frames.push(match task {
        Task::Img2Tex => asset.uv_albedo.clone(),
        Task::Geo2Mv => Grid::zeros(asset.uv_albedo.h, asset.uv_albedo.w, asset.uv_albedo.c),
    });
    frames
}

pub fn build_example(
    data: &[Prepared],
    pools: &TrainPools,
    p_img2tex: f64,
    variant: Variant,
    sched: &ScheduleConfig,
    rng: &mut impl Rng,
) -> Result<Example> {
    let task = draw_task(p_img2tex, rng);
    let pool = match task {
        Task::Img2Tex => &pools.tex,
        Task::Geo2Mv => &pools.mv,
    };
    if pool.is_empty() {
        return Err(Error::data(format!("no assets available for {task}")));
    }
    let asset = pool[rng.random_range(0..pool.len())];
    let a = data
        .get(asset)
        .ok_or_else(|| Error::data(format!("pool index {asset} outside dataset of {}", data.len())))?;
    let spec = match task {
        Task::Img2Tex => TaskSpec::img2tex(rng.random_range(0..NUM_VIEWS)),
        Task::Geo2Mv => TaskSpec::geo2mv(),
    };
    let roles = variant_roles(frame_roles(&spec)?, variant);
    let t_df = sched.shift_t(rng.random::<f64>()) as f32;
    let clean = clean_frames(a, task);
    let noise = gaussian_like(&clean, rng);
    let seq = noise_sequence(&clean, roles, t_df, &noise, sched)?;
    let target = velocity_target(&clean, &noise)?;
    Ok(Example {
        asset,
        task: spec,
        roles,
        t_df,
        clean,
        noise,
        seq,
        target,
        label: a.label,
    })
}

/// Loss of one example and, when `grads` is given, accumulation of
/// `scale · ∂loss/∂θ` into it.
pub fn example_loss(
    model: &Model,
    params: &ParamStore<f32>,
    data: &[Prepared],
    ex: &Example,
    weighting: crate::seqspace::LossWeighting,
    grads: Option<(&mut [Vec<f32>], f32)>,
) -> Result<f64> {
    let input = ModelInput {
        frames: &ex.seq.frames,
        timesteps: ex.seq.timesteps,
        geo: &data[ex.asset].geo,
        label: ex.label,
    };
    let (out, cache) = model.forward(params, &input)?;
    let target: Vec<Vec<f32>> = model.frame_tokens(&ex.target)?;
    let p: Vec<&[f32]> = out.iter().map(|v| v.as_slice()).collect();
    let t: Vec<&[f32]> = target.iter().map(|v| v.as_slice()).collect();
    let mut dout = vec![Vec::new(); NUM_FRAMES];
    let want = grads.is_some();
    let loss = flow_loss_and_grad(&p, &t, &ex.roles, ex.t_df as f64, weighting, want.then_some(&mut dout[..]));
    if let Some((g, scale)) = grads {
        if loss.is_finite() {
            for f in dout.iter_mut() {
                f.iter_mut().for_each(|v| *v *= scale);
            }
            model.backward(params, &cache, &dout, g)?;
        }
    }
    Ok(loss as f64)
}

/// `γ` of the power-function EMA profile with relative standard deviation
/// `sigma_rel`, the positive root of
/// `(γ+1) / ((γ+2)²(γ+3)) = σ²`.
pub fn ema_gamma(sigma_rel: f64) -> f64 {
    let t = 1.0 / (sigma_rel * sigma_rel);
    let f = |g: f64| ((g + 7.0) * g + 16.0 - t) * g + 12.0 - t;
    let (mut lo, mut hi) = (0.0f64, t.max(1.0));
    if f(lo) >= 0.0 {
        return 0.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// EMA decay at 1-based `step`: `β = (1 − 1/step)^(γ+1)`. The average then
/// weights the parameter trajectory by `τ^γ`. A zero `sigma_rel` gives `β = 0`
/// (no averaging).
pub fn ema_beta(sigma_rel: f64, step: u64) -> f64 {
    if sigma_rel <= 0.0 || step <= 1 {
        return 0.0;
    }
    (1.0 - 1.0 / step as f64).powf(ema_gamma(sigma_rel) + 1.0)
}

/// `ema ← ema + (1 − β)(θ − ema)`.
pub fn ema_update(ema: &mut ParamStore<f32>, params: &ParamStore<f32>, beta: f64) {
    let k = (1.0 - beta) as f32;
    for (e, p) in ema.params.iter_mut().zip(&params.params) {
        for (ev, &pv) in e.data.iter_mut().zip(&p.data) {
            *ev += k * (pv - *ev);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        AdamState {
            m: params.zero_grads(),
            v: params.zero_grads(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tasks: Vec<String>,
}

pub struct Trainer {
    pub model: Model,
    pub params: ParamStore<f32>,
    pub ema: ParamStore<f32>,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub labels: Vec<String>,
    frozen: Vec<bool>,
}

impl Trainer {
    /// Fine-tune mode requires `init` weights; scratch mode initializes from
    /// `cfg.seed` when none are given.
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, init: Option<ParamStore<f32>>, labels: Vec<String>) -> Result<Self> {
        cfg.validate()?;
        if model_cfg.label_vocab != labels.len().max(1) {
            return Err(Error::param(
                "label_vocab",
                format!("model expects {} labels, dataset has {}", model_cfg.label_vocab, labels.len()),
            ));
        }
        let (model, fresh) = Model::new(model_cfg, cfg.seed)?;
        let params = match (cfg.mode, init) {
            (TrainMode::Finetune, None) => {
                return Err(Error::param("mode", "finetune needs a base checkpoint"));
            }
            (_, Some(p)) => {
                checkpoint::check_layout(&fresh, &p)?;
                p
            }
            (TrainMode::Scratch, None) => fresh,
        };
        let frozen = params
            .params
            .iter()
            .map(|p| cfg.mode == TrainMode::Finetune && p.group == Group::MvBase)
            .collect();
        Ok(Trainer {
            ema: params.clone(),
            adam: AdamState::new(&params),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a),
            model,
            params,
            cfg,
            step: 0,
            labels,
            frozen,
        })
    }

    pub fn is_frozen(&self, pid: usize) -> bool {
        self.frozen[pid]
    }

    /// Gradients of one step without applying them, frozen groups zeroed.
    pub fn compute_grads(&mut self, data: &[Prepared], pools: &TrainPools) -> Result<(f64, Vec<Vec<f32>>, Vec<Task>)> {
        let n = self.cfg.batch_size * self.cfg.accumulation;
        let p = self.cfg.effective_p_img2tex(self.model.cfg.variant);
        let mut grads = self.params.zero_grads();
        let mut total = 0.0;
        let mut tasks = Vec::with_capacity(n);
        let scale = 1.0 / n as f32;
        for _ in 0..n {
            let ex = build_example(data, pools, p, self.model.cfg.variant, &self.cfg.schedule, &mut self.rng)?;
            let loss = example_loss(
                &self.model,
                &self.params,
                data,
                &ex,
                self.cfg.schedule.weighting,
                Some((&mut grads, scale)),
            )?;
            total += loss;
            tasks.push(ex.task.task);
        }
        for (g, &frozen) in grads.iter_mut().zip(&self.frozen) {
            if frozen {
                g.fill(0.0);
            }
        }
        Ok((total / n as f64, grads, tasks))
    }

    pub fn train_step(&mut self, data: &[Prepared], pools: &TrainPools) -> Result<StepStats> {
        let (loss, mut grads, tasks) = self.compute_grads(data, pools)?;
        let norm = grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Numerical(format!(
                "step {}: loss {loss}, gradient norm {norm}; weights left unchanged",
                self.step + 1
            )));
        }
        if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            let k = (self.cfg.grad_clip / norm) as f32;
            grads.iter_mut().flatten().for_each(|g| *g *= k);
        }
        self.step += 1;
        let lr = self.cfg.lr_at(self.step);
        self.adamw(&grads, lr);
        let beta = ema_beta(self.cfg.ema_std, self.step);
        ema_update(&mut self.ema, &self.params, beta);
        Ok(StepStats {
            step: self.step,
            loss,
            lr,
            grad_norm: norm,
            tasks: tasks.iter().map(|t| t.name().to_string()).collect(),
        })
    }

    fn adamw(&mut self, grads: &[Vec<f32>], lr: f64) {
        let c = &self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2_sqrt = (1.0 / bc2.sqrt()) as f32;
        let eps = c.adam_eps as f32;
        for (pid, p) in self.params.params.iter_mut().enumerate() {
            if self.frozen[pid] {
                continue;
            }
            let decay = if p.shape.len() >= 2 { (1.0 - lr * c.weight_decay) as f32 } else { 1.0 };
            let (m, v) = (&mut self.adam.m[pid], &mut self.adam.v[pid]);
            for i in 0..p.data.len() {
                let g = grads[pid][i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let denom = v[i].sqrt() * inv_bc2_sqrt + eps;
                p.data[i] = p.data[i] * decay - step_size * m[i] / denom;
            }
        }
    }

    /// Runs until `cfg.steps`, appending one JSON line per step to `log`.
    /// `on_step` is called after every step (used for periodic checkpoints).
    pub fn run(
        &mut self,
        data: &[Prepared],
        pools: &TrainPools,
        log: &mut dyn Write,
        mut on_step: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.cfg.steps {
            let stats = self.train_step(data, pools)?;
            let line = serde_json::to_string(&stats).map_err(|e| Error::data(e.to_string()))?;
            writeln!(log, "{line}")?;
            on_step(self)?;
        }
        log.flush()?;
        Ok(())
    }

    /// Euclidean gradient norm per parameter group.
    pub fn group_norms(&self, grads: &[Vec<f32>]) -> Vec<(Group, f64)> {
        Group::ALL
            .iter()
            .map(|&g| {
                let s: f64 = self
                    .params
                    .params
                    .iter()
                    .zip(grads)
                    .filter(|(p, _)| p.group == g)
                    .flat_map(|(_, gr)| gr.iter())
                    .map(|&x| (x as f64) * (x as f64))
                    .sum();
                (g, s.sqrt())
            })
            .collect()
    }
}

/// Clean UV frame of an example, for inspection in tests.
pub fn uv_target(ex: &Example) -> &Grid {
    &ex.clean[UV_FRAME]
}
