//! Euler integration of the learned velocity field, texture application and
//! evaluation metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Prepared;
use crate::error::{Error, Result};
use crate::geomesh::{bake_views_to_uv, BakeConfig, CameraRig, TexturedAsset, UvGeometryMaps, ViewBuffers};
use crate::grid::Grid;
use crate::muvnet::{GeoConditioning, Model, ModelInput, RGB};
use crate::nn::ParamStore;
use crate::seqspace::{frame_roles, FrameRole, FrameSequence, ScheduleConfig, Task, TaskSpec, NUM_FRAMES, NUM_VIEWS, UV_FRAME};
use crate::trainer::variant_roles;

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
    pub task: Task,
    pub cf_view_index: usize,
    pub seed: u64,
    /// Warp the uniform time grid with the schedule's flow shift.
    pub shifted_grid: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 30,
            task: Task::Img2Tex,
            cf_view_index: 0,
            seed: 0,
            shifted_grid: false,
        }
    }
}

impl SampleConfig {
    pub fn task_spec(&self) -> TaskSpec {
        match self.task {
            Task::Img2Tex => TaskSpec::img2tex(self.cf_view_index),
            Task::Geo2Mv => TaskSpec::geo2mv(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::param("steps", "must be at least 1"));
        }
        frame_roles(&self.task_spec()).map(|_| ())
    }
}

/// `steps + 1` increasing times from 0 to 1.
pub fn time_grid(steps: usize, sched: &ScheduleConfig, shifted: bool) -> Vec<f64> {
    (0..=steps)
        .map(|i| {
            let t = i as f64 / steps as f64;
            if shifted {
                sched.shift_t(t)
            } else {
                t
            }
        })
        .collect()
}

/// Seeded unit-normal noise for four views and the atlas.
pub fn initial_noise(mv_size: usize, uv_size: usize, seed: u64) -> Vec<Grid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..NUM_FRAMES)
        .map(|f| {
            let s = if f == UV_FRAME { uv_size } else { mv_size };
            let data = (0..s * s * RGB).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            Grid::from_vec(s, s, RGB, data).expect("sized buffer")
        })
        .collect()
}

/// Integrates `velocity` from t = 0 to 1 over `grid`.
///
/// Denoising frames start at `noise` and advance by `Δt · v`; their state is
/// kept in f64. A conditioning frame is fixed at its noised value
/// `t_cf · cond + (1 − t_cf) · noise` and its predicted velocity is ignored;
/// nonsense frames stay pure noise. Returned denoising frames are clamped to
/// `[-1, 1]`.
pub fn euler_integrate(
    roles: [FrameRole; NUM_FRAMES],
    noise: &[Grid],
    cond: Option<&[Grid]>,
    grid: &[f64],
    sched: &ScheduleConfig,
    mut velocity: impl FnMut(&[Grid], [f32; NUM_FRAMES]) -> Result<Vec<Grid>>,
) -> Result<FrameSequence> {
    if noise.len() != NUM_FRAMES {
        return Err(Error::shape(format!("expected {NUM_FRAMES} noise frames, got {}", noise.len())));
    }
    if grid.len() < 2 || grid.windows(2).any(|w| w[1] < w[0]) || grid[0] != 0.0 || grid[grid.len() - 1] != 1.0 {
        return Err(Error::param("grid", "time grid must rise monotonically from 0 to 1"));
    }
    let t_cf = sched.t_for(FrameRole::CF, 0.0);
    let mut state: Vec<Vec<f64>> = noise.iter().map(|g| g.data.iter().map(|&v| v as f64).collect()).collect();
    let mut frames: Vec<Grid> = noise.to_vec();
    for (f, role) in roles.iter().enumerate() {
        if *role == FrameRole::CF {
            let c = cond
                .and_then(|c| c.get(f))
                .ok_or_else(|| Error::param("cond", format!("conditioning frame {f} not supplied")))?;
            c.check_same_shape(&noise[f], "conditioning frame")?;
            frames[f].data = c.data.iter().zip(&noise[f].data).map(|(&c, &n)| t_cf * c + (1.0 - t_cf) * n).collect();
        }
    }
    for w in grid.windows(2) {
        let (t, dt) = (w[0], w[1] - w[0]);
        let timesteps = roles.map(|r| sched.t_for(r, t as f32));
        let v = velocity(&frames, timesteps)?;
        if v.len() != NUM_FRAMES {
            return Err(Error::shape(format!("velocity returned {} frames", v.len())));
        }
        for f in 0..NUM_FRAMES {
            if roles[f] != FrameRole::DF {
                continue;
            }
            v[f].check_same_shape(&frames[f], "velocity frame")?;
            for ((s, x), &u) in state[f].iter_mut().zip(frames[f].data.iter_mut()).zip(&v[f].data) {
                *s += dt * u as f64;
                *x = *s as f32;
            }
        }
    }
    for f in 0..NUM_FRAMES {
        if roles[f] == FrameRole::DF {
            frames[f].data = state[f].iter().map(|&s| s.clamp(-1.0, 1.0) as f32).collect();
        }
    }
    Ok(FrameSequence {
        frames,
        roles,
        timesteps: roles.map(|r| sched.t_for(r, 1.0)),
    })
}

/// Samples a frame sequence from the model. For img2tex `cond_view` is the
/// clean conditioning image in `[-1, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn euler_sample(
    model: &Model,
    params: &ParamStore<f32>,
    geo: &GeoConditioning,
    label: usize,
    cond_view: Option<&Grid>,
    cfg: &SampleConfig,
    sched: &ScheduleConfig,
) -> Result<FrameSequence> {
    cfg.validate()?;
    let roles = variant_roles(frame_roles(&cfg.task_spec())?, model.cfg.variant);
    let noise = initial_noise(model.cfg.mv_size, model.cfg.uv_size, cfg.seed);
    let mut cond = None;
    if roles.contains(&FrameRole::CF) {
        let c = cond_view.ok_or_else(|| Error::param("cond", "img2tex needs a conditioning view"))?;
        let mut frames: Vec<Grid> = noise.iter().map(|n| Grid::zeros(n.h, n.w, n.c)).collect();
        frames[cfg.cf_view_index] = c.clone();
        cond = Some(frames);
    }
    let grid = time_grid(cfg.steps, sched, cfg.shifted_grid);
    euler_integrate(roles, &noise, cond.as_deref(), &grid, sched, |frames, timesteps| {
        model.predict(
            params,
            &ModelInput {
                frames,
                timesteps,
                geo,
                label,
            },
        )
    })
}

/// Samples for a prepared asset, conditioning on its clean albedo view.
pub fn sample_asset(
    model: &Model,
    params: &ParamStore<f32>,
    asset: &Prepared,
    cfg: &SampleConfig,
    sched: &ScheduleConfig,
) -> Result<FrameSequence> {
    let cond = match cfg.task {
        Task::Img2Tex => Some(
            asset
                .mv_albedo
                .get(cfg.cf_view_index)
                .ok_or_else(|| Error::param("cf_view_index", format!("{} outside 0..{NUM_VIEWS}", cfg.cf_view_index)))?,
        ),
        Task::Geo2Mv => None,
    };
    euler_sample(model, params, &asset.geo, asset.label, cond, cfg, sched)
}

/// PSNR in dB between `[0, 1]` images over pixels where `mask` is nonzero,
/// capped at [`PSNR_CAP`].
pub fn masked_psnr(pred: &Grid, truth: &Grid, mask: &Grid) -> Result<f64> {
    pred.check_same_shape(truth, "psnr")?;
    if (mask.h, mask.w, mask.c) != (truth.h, truth.w, 1) {
        return Err(Error::shape("psnr mask must be single-channel at image size"));
    }
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (i, &m) in mask.data.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for ch in 0..truth.c {
            let d = (pred.data[i * truth.c + ch] - truth.data[i * truth.c + ch]) as f64;
            sum += d * d;
        }
        n += truth.c;
    }
    if n == 0 {
        return Err(Error::data("no valid pixels to score"));
    }
    let mse = sum / n as f64;
    Ok(if mse <= 0.0 { PSNR_CAP } else { (-10.0 * mse.log10()).min(PSNR_CAP) })
}

/// Mean absolute error over pixels where `mask` is nonzero; `None` if the
/// mask is empty.
pub fn masked_mae(a: &Grid, b: &Grid, mask: &Grid) -> Result<Option<f64>> {
    a.check_same_shape(b, "mae")?;
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (i, &m) in mask.data.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for ch in 0..a.c {
            sum += (a.data[i * a.c + ch] - b.data[i * a.c + ch]).abs() as f64;
        }
        n += a.c;
    }
    Ok((n > 0).then(|| sum / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Atlas PSNR over valid texels; absent when the atlas was not generated.
    pub uv_psnr: Option<f64>,
    /// Mean abs difference between the generated views baked to UV and the
    /// generated atlas, over covered texels.
    pub consistency_mae: Option<f64>,
    /// Fraction of valid texels seen by at least one view.
    pub coverage_frac: f64,
    /// PSNR of each generated view; `None` for views that were not generated.
    pub per_view_psnr: Vec<Option<f64>>,
}

/// Scores a generated sequence against the asset it was sampled for.
///
/// The conditioning view is scored and baked using the clean input image,
/// since the sampler only ever sees its noised form.
pub fn evaluate(asset: &Prepared, generated: &FrameSequence, bake: &BakeConfig) -> Result<EvalReport> {
    evaluate_parts(
        &asset.views,
        &asset.uvgeo,
        &asset.rig,
        &asset.asset.albedo_atlas,
        &asset.mv_albedo,
        &asset.mv_shaded,
        generated,
        bake,
    )
}

#[allow(clippy::too_many_arguments)]
fn evaluate_parts(
    views: &[ViewBuffers],
    uvgeo: &UvGeometryMaps,
    rig: &CameraRig,
    atlas: &Grid,
    mv_albedo: &[Grid],
    mv_shaded: &[Grid],
    generated: &FrameSequence,
    bake: &BakeConfig,
) -> Result<EvalReport> {
    if uvgeo.validity.data.iter().all(|&v| v == 0.0) {
        return Err(Error::data("asset has no valid texels"));
    }
    let roles = generated.roles;
    let uv_generated = roles[UV_FRAME] == FrameRole::DF;
    // geo2mv leaves the atlas slot empty and renders shaded views.
    let view_truth = if uv_generated || roles.contains(&FrameRole::CF) { mv_albedo } else { mv_shaded };
    let mut mv_unit = Vec::with_capacity(NUM_VIEWS);
    let mut per_view_psnr = Vec::with_capacity(NUM_VIEWS);
    for v in 0..NUM_VIEWS {
        let truth = view_truth[v].to_unit();
        match roles[v] {
            FrameRole::DF => {
                let g = generated.frames[v].to_unit();
                per_view_psnr.push(Some(masked_psnr(&g, &truth, &views[v].validity)?));
                mv_unit.push(Some(g));
            }
            FrameRole::CF => {
                per_view_psnr.push(None);
                mv_unit.push(Some(truth));
            }
            FrameRole::NF => {
                per_view_psnr.push(None);
                mv_unit.push(None);
            }
        }
    }
    let have_views = mv_unit.iter().all(Option::is_some);
    let (baked, coverage) = if have_views {
        let rgb: Vec<Grid> = mv_unit.into_iter().map(|g| g.expect("checked")).collect();
        bake_views_to_uv(views, &rgb, uvgeo, rig, bake)?
    } else {
        bake_views_to_uv(views, &views.iter().map(|v| v.albedo.clone()).collect::<Vec<_>>(), uvgeo, rig, bake)?
    };
    let valid = uvgeo.validity.data.iter().filter(|&&v| v != 0.0).count();
    let covered = coverage.data.iter().filter(|&&v| v != 0.0).count();
    let (uv_psnr, consistency_mae) = if uv_generated {
        let uv = generated.frames[UV_FRAME].to_unit();
        let psnr = masked_psnr(&uv, atlas, &uvgeo.validity)?;
        let mae = if have_views { masked_mae(&baked, &uv, &coverage)? } else { None };
        (Some(psnr), mae)
    } else {
        (None, None)
    };
    Ok(EvalReport {
        uv_psnr,
        consistency_mae,
        coverage_frac: covered as f64 / valid as f64,
        per_view_psnr,
    })
}

/// Replaces the asset's albedo with `atlas` (values in `[0, 1]`).
pub fn apply_texture(asset: &TexturedAsset, atlas: &Grid) -> Result<TexturedAsset> {
    let (h, w, c) = asset.albedo_atlas.shape();
    if atlas.shape() != (h, w, c) {
        return Err(Error::shape(format!(
            "atlas {:?} does not match the asset's {:?}",
            atlas.shape(),
            (h, w, c)
        )));
    }
    Ok(TexturedAsset {
        albedo_atlas: atlas.clone(),
        ..asset.clone()
    })
}

/// Atlas in `[0, 1]` from a generated `[-1, 1]` frame.
pub fn decode_frame(frame: &Grid) -> Grid {
    frame.map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 0.5).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_assets, label_vocab, prepare_all, TextureChoice};
    use crate::geomesh::{rasterize_uv, rasterize_views, PrimitiveKind, TextureFamily};
    use crate::muvnet::Variant;

    fn clean_sequence(seed: u64) -> Vec<Grid> {
        initial_noise(8, 16, seed).into_iter().map(|g| g.map(|v| v.tanh())).collect()
    }

    #[test]
    fn oracle_field_recovers_clean_frames() {
        let clean = clean_sequence(1);
        let noise = initial_noise(8, 16, 2);
        let sched = ScheduleConfig::default();
        let roles = [FrameRole::DF; NUM_FRAMES];
        for steps in [1, 5, 30] {
            for shifted in [false, true] {
                let sched = ScheduleConfig { shift: 3.0, ..sched };
                let grid = time_grid(steps, &sched, shifted);
                let out = euler_integrate(roles, &noise, None, &grid, &sched, |_, _| {
                    Ok(clean
                        .iter()
                        .zip(&noise)
                        .map(|(c, n)| Grid {
                            data: c.data.iter().zip(&n.data).map(|(a, b)| a - b).collect(),
                            ..c.clone()
                        })
                        .collect())
                })
                .unwrap();
                for (o, c) in out.frames.iter().zip(&clean) {
                    let mse = o.data.iter().zip(&c.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>()
                        / c.data.len() as f64;
                    assert!(mse < 1e-10, "steps {steps}: mse {mse}");
                }
            }
        }
    }

    #[test]
    fn conditioning_frame_is_pinned_and_nonsense_kept() {
        let noise = initial_noise(8, 16, 3);
        let cond = clean_sequence(4);
        let sched = ScheduleConfig::default();
        let roles = frame_roles(&TaskSpec::img2tex(2)).unwrap();
        let grid = time_grid(4, &sched, false);
        let mut seen = Vec::new();
        let out = euler_integrate(roles, &noise, Some(&cond), &grid, &sched, |frames, ts| {
            seen.push((frames[2].clone(), ts));
            Ok(frames.iter().map(|f| f.map(|_| 7.0)).collect())
        })
        .unwrap();
        let t_cf = sched.t_for(FrameRole::CF, 0.0);
        let pinned: Vec<f32> = cond[2].data.iter().zip(&noise[2].data).map(|(&c, &n)| t_cf * c + (1.0 - t_cf) * n).collect();
        assert_eq!(out.frames[2].data, pinned);
        assert!(seen.iter().all(|(f, ts)| f.data == pinned && ts[2] == t_cf));
        assert!(out.frames[UV_FRAME].data.iter().all(|&v| v == 1.0));

        let geo_roles = frame_roles(&TaskSpec::geo2mv()).unwrap();
        let out = euler_integrate(geo_roles, &noise, None, &grid, &sched, |f, _| Ok(f.to_vec())).unwrap();
        assert_eq!(out.frames[UV_FRAME], noise[UV_FRAME]);
        assert!(euler_integrate(roles, &noise, None, &grid, &sched, |f, _| Ok(f.to_vec())).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = crate::muvnet::ModelConfig {
            dim: 24,
            heads: 1,
            depth: 1,
            mv_size: 16,
            uv_size: 32,
            freq_dim: 16,
            ..Default::default()
        };
        let (model, params) = Model::new(cfg, 0).unwrap();
        let assets = generate_assets(1, 0, &[PrimitiveKind::Cube], &[TextureChoice::Family(TextureFamily::Gradient)], 32).unwrap();
        let p = &prepare_all(&assets, &label_vocab(&assets), 16).unwrap()[0];
        let sc = SampleConfig {
            steps: 3,
            seed: 9,
            ..Default::default()
        };
        let sched = ScheduleConfig::default();
        let a = sample_asset(&model, &params, p, &sc, &sched).unwrap();
        let b = sample_asset(&model, &params, p, &sc, &sched).unwrap();
        assert_eq!(a, b);
        assert!(euler_sample(&model, &params, &p.geo, 0, None, &sc, &sched).is_err());
        let bad = SampleConfig { cf_view_index: 5, ..sc };
        assert!(sample_asset(&model, &params, p, &bad, &sched).is_err());
    }

    #[test]
    fn gray_against_checker_scores_six_db() {
        let truth = Grid::from_vec(4, 4, 3, (0..48).map(|i| ((i / 3 + i / 12) % 2) as f32).collect()).unwrap();
        let gray = Grid::filled(4, 4, 3, 0.5);
        let mask = Grid::filled(4, 4, 1, 1.0);
        let p = masked_psnr(&gray, &truth, &mask).unwrap();
        assert!((p - 10.0 * 4f64.log10()).abs() < 1e-9);
        assert!((p - 6.02).abs() < 0.01);
        assert_eq!(masked_psnr(&truth, &truth, &mask).unwrap(), PSNR_CAP);
        assert!(masked_psnr(&gray, &truth, &Grid::zeros(4, 4, 1)).is_err());
    }

    fn ground_truth_sequence(p: &Prepared, roles: [FrameRole; NUM_FRAMES]) -> FrameSequence {
        let mut frames = p.mv_albedo.clone();
        frames.push(p.uv_albedo.clone());
        FrameSequence {
            frames,
            roles,
            timesteps: [1.0; NUM_FRAMES],
        }
    }

    #[test]
    fn ground_truth_scores_cap_and_is_consistent() {
        let assets = generate_assets(
            3,
            5,
            &PrimitiveKind::ALL,
            &[TextureChoice::Family(TextureFamily::Gradient), TextureChoice::Family(TextureFamily::Stripes)],
            64,
        )
        .unwrap();
        for p in prepare_all(&assets, &label_vocab(&assets), 32).unwrap() {
            let r = evaluate(&p, &ground_truth_sequence(&p, frame_roles(&TaskSpec::img2tex(1)).unwrap()), &BakeConfig::default())
                .unwrap();
            assert_eq!(r.uv_psnr, Some(PSNR_CAP));
            assert!(r.consistency_mae.unwrap() < 0.05, "{r:?}");
            assert!((0.0..=1.0).contains(&r.coverage_frac));
            assert_eq!(r.per_view_psnr[1], None);
            assert!(r.per_view_psnr.iter().flatten().all(|&v| v == PSNR_CAP));
        }
    }

    #[test]
    fn geo2mv_has_no_atlas_metrics() {
        let assets = generate_assets(1, 0, &[PrimitiveKind::UvSphere], &[TextureChoice::Family(TextureFamily::Gradient)], 64).unwrap();
        let p = &prepare_all(&assets, &label_vocab(&assets), 32).unwrap()[0];
        let mut seq = ground_truth_sequence(p, frame_roles(&TaskSpec::geo2mv()).unwrap());
        seq.frames[..NUM_VIEWS].clone_from_slice(&p.mv_shaded);
        let r = evaluate(p, &seq, &BakeConfig::default()).unwrap();
        assert_eq!(r.uv_psnr, None);
        assert_eq!(r.consistency_mae, None);
        assert!(r.per_view_psnr.iter().all(|v| *v == Some(PSNR_CAP)));
    }

    #[test]
    fn texture_application_identities() {
        let assets = generate_assets(1, 2, &[PrimitiveKind::Torus], &[TextureChoice::Family(TextureFamily::Voronoi)], 64).unwrap();
        let a = &assets[0];
        let rig = CameraRig::standard(32, 32);
        let same = apply_texture(a, &a.albedo_atlas).unwrap();
        let (v0, _) = rasterize_views(a, &rig);
        let (v1, _) = rasterize_views(&same, &rig);
        for (x, y) in v0.iter().zip(&v1) {
            assert_eq!(x.albedo, y.albedo);
        }
        let zeros = apply_texture(a, &Grid::zeros(64, 64, 3)).unwrap();
        assert_eq!(rasterize_uv(&zeros).0, rasterize_uv(a).0);
        let (vz, _) = rasterize_views(&zeros, &rig);
        assert!(vz.iter().all(|v| v.shaded.data.iter().all(|&x| x == 0.0)));
        assert!(apply_texture(a, &Grid::zeros(32, 32, 3)).is_err());
    }

    #[test]
    fn decode_clamps_to_unit_range() {
        let g = Grid::from_vec(1, 2, 1, vec![-3.0, 0.0]).unwrap();
        assert_eq!(decode_frame(&g).data, vec![0.0, 0.5]);
    }

    #[test]
    fn uv_only_roles_drop_views() {
        let r = variant_roles(frame_roles(&TaskSpec::img2tex(0)).unwrap(), Variant::UvOnly);
        assert_eq!(r, [FrameRole::NF, FrameRole::NF, FrameRole::NF, FrameRole::NF, FrameRole::DF]);
    }
}
