//! Flow-matching sequence machinery.
//!
//! A sequence holds five frames: four multi-view images followed by the UV
//! atlas. Each frame carries a role that fixes its noise level. Time follows
//! the rectified-flow convention where `t = 1` is clean data and `t = 0` is
//! pure Gaussian noise:
//!
//! ```text
//! x_t = t · x_1 + (1 − t) · x_0        v = x_1 − x_0
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::Real;

pub const NUM_VIEWS: usize = 4;
pub const NUM_FRAMES: usize = NUM_VIEWS + 1;
pub const UV_FRAME: usize = NUM_VIEWS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameRole {
    /// Denoising frame: noised at the sampled level, supervised.
    DF,
    /// Conditioning frame: known content at the minimal noise level.
    CF,
    /// Nonsense frame: irrelevant to the task, pure noise.
    NF,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    Img2Tex,
    Geo2Mv,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Img2Tex => "img2tex",
            Task::Geo2Mv => "geo2mv",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "img2tex" => Ok(Task::Img2Tex),
            "geo2mv" => Ok(Task::Geo2Mv),
            other => Err(Error::param("task", format!("unknown task `{other}` (img2tex | geo2mv)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    /// Index of the conditioning view; only meaningful for img2tex.
    pub cf_view_index: usize,
}

impl TaskSpec {
    pub fn img2tex(cf_view_index: usize) -> Self {
        TaskSpec {
            task: Task::Img2Tex,
            cf_view_index,
        }
    }

    pub fn geo2mv() -> Self {
        TaskSpec {
            task: Task::Geo2Mv,
            cf_view_index: 0,
        }
    }
}

/// Frame roles for a task instance.
pub fn frame_roles(spec: &TaskSpec) -> Result<[FrameRole; NUM_FRAMES]> {
    match spec.task {
        Task::Img2Tex => {
            if spec.cf_view_index >= NUM_VIEWS {
                return Err(Error::param(
                    "cf_view_index",
                    format!("{} outside 0..{}", spec.cf_view_index, NUM_VIEWS - 1),
                ));
            }
            let mut roles = [FrameRole::DF; NUM_FRAMES];
            roles[spec.cf_view_index] = FrameRole::CF;
            Ok(roles)
        }
        Task::Geo2Mv => {
            let mut roles = [FrameRole::DF; NUM_FRAMES];
            roles[UV_FRAME] = FrameRole::NF;
            Ok(roles)
        }
    }
}

pub const K_MAX: u32 = 1000;

/// Discrete noise level `k ∈ [0, 1000]` to flow time `t = 1 − k/1000`.
pub fn k_to_t(k: u32) -> Result<f32> {
    if k > K_MAX {
        return Err(Error::param("k", format!("{k} outside 0..={K_MAX}")));
    }
    Ok(1.0 - k as f32 / K_MAX as f32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossWeighting {
    /// `w(t) = 1`.
    Uniform,
    /// `w(t) = 4·t·(1 − t)`: peaks at 1 for `t = 0.5`, zero at both ends.
    Bump,
}

impl LossWeighting {
    pub fn weight(self, t: f64) -> f64 {
        match self {
            LossWeighting::Uniform => 1.0,
            LossWeighting::Bump => 4.0 * t * (1.0 - t),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossWeighting::Uniform => "uniform",
            LossWeighting::Bump => "bump",
        }
    }
}

impl FromStr for LossWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(LossWeighting::Uniform),
            "bump" => Ok(LossWeighting::Bump),
            other => Err(Error::param("loss_weighting", format!("unknown weighting `{other}`"))),
        }
    }
}

/// Noise-level constants shared by training and sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Level for conditioning frames (out of 1000).
    pub k_min: u32,
    /// Level for nonsense frames (out of 1000).
    pub k_max: u32,
    pub weighting: LossWeighting,
    /// Flow shift `s`; 1 disables it.
    pub shift: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            k_min: 15,
            k_max: 1000,
            weighting: LossWeighting::Bump,
            shift: 1.0,
        }
    }
}

impl ScheduleConfig {
    pub fn t_for(&self, role: FrameRole, t_df: f32) -> f32 {
        match role {
            FrameRole::DF => t_df,
            FrameRole::CF => 1.0 - self.k_min.min(K_MAX) as f32 / K_MAX as f32,
            FrameRole::NF => 1.0 - self.k_max.min(K_MAX) as f32 / K_MAX as f32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        k_to_t(self.k_min)?;
        k_to_t(self.k_max)?;
        if !(self.shift > 0.0 && self.shift.is_finite()) {
            return Err(Error::param("shift", "must be positive"));
        }
        Ok(())
    }

    /// Applies the flow shift to a time value.
    ///
    /// The shift acts on the noise level `σ = 1 − t` as
    /// `σ' = s·σ / (1 + (s − 1)·σ)`, so `s > 1` spends more of the schedule
    /// at high noise. Both endpoints are fixed points.
    pub fn shift_t(&self, t: f64) -> f64 {
        let s = self.shift;
        let sigma = 1.0 - t;
        1.0 - s * sigma / (1.0 + (s - 1.0) * sigma)
    }
}

/// Five frames plus their roles and per-frame times.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Grid>,
    pub roles: [FrameRole; NUM_FRAMES],
    pub timesteps: [f32; NUM_FRAMES],
}

impl FrameSequence {
    pub fn mv(&self) -> &[Grid] {
        &self.frames[..NUM_VIEWS]
    }

    pub fn uv(&self) -> &Grid {
        &self.frames[UV_FRAME]
    }
}

/// `(height, width, channels)` of a frame.
pub type FrameShape = (usize, usize, usize);

/// Checks the 4 × MV + 1 × UV layout and returns `(mv_shape, uv_shape)`.
pub fn check_layout(frames: &[Grid]) -> Result<(FrameShape, FrameShape)> {
    if frames.len() != NUM_FRAMES {
        return Err(Error::shape(format!("expected {NUM_FRAMES} frames, got {}", frames.len())));
    }
    let mv = frames[0].shape();
    if frames[1..NUM_VIEWS].iter().any(|f| f.shape() != mv) {
        return Err(Error::shape("multi-view frames differ in shape"));
    }
    Ok((mv, frames[UV_FRAME].shape()))
}

fn check_pair(a: &[Grid], b: &[Grid], what: &str) -> Result<()> {
    check_layout(a)?;
    check_layout(b)?;
    for (x, y) in a.iter().zip(b) {
        x.check_same_shape(y, what)?;
    }
    Ok(())
}

/// Noises each frame at the time its role assigns.
pub fn noise_sequence(
    clean: &[Grid],
    roles: [FrameRole; NUM_FRAMES],
    t_df: f32,
    noise: &[Grid],
    sched: &ScheduleConfig,
) -> Result<FrameSequence> {
    check_pair(clean, noise, "noise_sequence")?;
    if !(0.0..=1.0).contains(&t_df) {
        return Err(Error::param("t_df", format!("{t_df} outside [0,1]")));
    }
    let timesteps = roles.map(|r| sched.t_for(r, t_df));
    let frames = clean
        .iter()
        .zip(noise)
        .zip(timesteps)
        .map(|((c, n), t)| {
            let data = c.data.iter().zip(&n.data).map(|(&c, &n)| t * c + (1.0 - t) * n).collect();
            Grid { data, ..c.clone() }
        })
        .collect();
    Ok(FrameSequence {
        frames,
        roles,
        timesteps,
    })
}

/// Per-frame velocity target `clean − noise`.
pub fn velocity_target(clean: &[Grid], noise: &[Grid]) -> Result<Vec<Grid>> {
    check_pair(clean, noise, "velocity_target")?;
    Ok(clean
        .iter()
        .zip(noise)
        .map(|(c, n)| Grid {
            data: c.data.iter().zip(&n.data).map(|(a, b)| a - b).collect(),
            ..c.clone()
        })
        .collect())
}

/// Weighted mean squared error over denoising-frame elements.
pub fn flow_loss(
    pred: &[Grid],
    target: &[Grid],
    roles: [FrameRole; NUM_FRAMES],
    t_df: f32,
    weighting: LossWeighting,
) -> Result<f64> {
    check_pair(pred, target, "flow_loss")?;
    let p: Vec<&[f32]> = pred.iter().map(|g| g.data.as_slice()).collect();
    let t: Vec<&[f32]> = target.iter().map(|g| g.data.as_slice()).collect();
    Ok(flow_loss_and_grad(&p, &t, &roles, t_df as f64, weighting, None).to_f64())
}

/// Loss over flat frame buffers; fills `grad` (same layout as `pred`) with
/// `∂loss/∂pred` when given. Frames without a DF role get zero gradient.
pub fn flow_loss_and_grad<R: Real>(
    pred: &[&[R]],
    target: &[&[R]],
    roles: &[FrameRole],
    t_df: f64,
    weighting: LossWeighting,
    mut grad: Option<&mut [Vec<R>]>,
) -> R {
    let n: usize = pred
        .iter()
        .zip(roles)
        .filter(|(_, r)| **r == FrameRole::DF)
        .map(|(p, _)| p.len())
        .sum();
    let w = weighting.weight(t_df);
    if let Some(g) = grad.as_deref_mut() {
        for (gf, p) in g.iter_mut().zip(pred) {
            gf.clear();
            gf.resize(p.len(), R::zero());
        }
    }
    if n == 0 {
        return R::zero();
    }
    let scale = w / n as f64;
    let mut sum = 0.0f64;
    for (f, ((p, t), role)) in pred.iter().zip(target).zip(roles).enumerate() {
        if *role != FrameRole::DF {
            continue;
        }
        for (i, (&a, &b)) in p.iter().zip(t.iter()).enumerate() {
            let d = a.to_f64() - b.to_f64();
            sum += d * d;
            if let Some(g) = grad.as_deref_mut() {
                g[f][i] = R::from_f64(2.0 * d * scale);
            }
        }
    }
    R::from_f64(sum * scale)
}
