use super::*;
use crate::seqspace::{flow_loss_and_grad, frame_roles, LossWeighting, TaskSpec};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        patch: 4,
        dim: 24,
        heads: 1,
        depth: 1,
        lora_rank: 2,
        lora_alpha: 4.0,
        mv_size: 8,
        uv_size: 16,
        label_vocab: 3,
        mlp_ratio: 2,
        freq_dim: 16,
        variant,
    }
}

fn random_grid(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Grid {
    Grid::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_input(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (Vec<Grid>, GeoConditioning) {
    let mut frames = Vec::new();
    let mut geo = Vec::new();
    for f in 0..NUM_FRAMES {
        let s = if f == UV_FRAME { cfg.uv_size } else { cfg.mv_size };
        frames.push(random_grid(s, s, RGB, rng));
        geo.push(random_grid(s, s, GEO_CHANNELS, rng));
    }
    (frames, GeoConditioning { frames: geo })
}

/// Randomizes every parameter, including zero-initialized ones, so that all
/// paths carry signal.
fn perturb<R: Real>(store: &mut ParamStore<R>, std: f64, rng: &mut ChaCha8Rng) {
    let n = Normal::new(0.0, std).unwrap();
    for p in &mut store.params {
        for v in &mut p.data {
            *v = *v + R::from_f64(n.sample(rng));
        }
    }
}

#[test]
fn default_config_counts() {
    let cfg = ModelConfig::default();
    cfg.validate().unwrap();
    assert_eq!(cfg.mv_tokens(), 256);
    assert_eq!(cfg.uv_tokens(), 256);
    assert_eq!(cfg.head_dim(), 48);
    let bad = ModelConfig {
        uv_size: 48,
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn output_shapes_and_determinism() {
    let cfg = ModelConfig {
        depth: 2,
        dim: 48,
        heads: 2,
        ..ModelConfig::default()
    };
    let (model, mut params) = Model::new(cfg.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    perturb(&mut params, 0.05, &mut rng);
    let (frames, geo) = random_input(&cfg, &mut rng);
    let input = ModelInput {
        frames: &frames,
        timesteps: [0.3, 0.985, 0.3, 0.3, 0.3],
        geo: &geo,
        label: 0,
    };
    let a = model.predict(&params, &input).unwrap();
    let b = model.predict(&params, &input).unwrap();
    assert_eq!(a, b);
    for (i, g) in a.iter().enumerate() {
        let s = if i == UV_FRAME { 64 } else { 32 };
        assert_eq!(g.shape(), (s, s, 3));
    }
}

#[test]
fn rejects_bad_inputs() {
    let cfg = tiny(Variant::Full);
    let (model, params) = Model::new(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut frames, geo) = random_input(&cfg, &mut rng);
    let input = ModelInput {
        frames: &frames,
        timesteps: [0.5; 5],
        geo: &geo,
        label: 3,
    };
    assert!(model.predict(&params, &input).is_err());
    frames[UV_FRAME] = Grid::zeros(8, 8, 3);
    let input = ModelInput {
        frames: &frames,
        timesteps: [0.5; 5],
        geo: &geo,
        label: 0,
    };
    assert!(matches!(model.predict(&params, &input), Err(Error::Shape(_))));
}

#[test]
fn zero_lora_matches_base_exactly() {
    let cfg = tiny(Variant::Full);
    let (model, mut params) = Model::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    perturb(&mut params, 0.2, &mut rng);
    for (_, b) in model.lora_ids() {
        params.get_mut(b).fill(0.0);
    }
    let (frames, geo) = random_input(&cfg, &mut rng);
    let input = ModelInput {
        frames: &frames,
        timesteps: [0.985, 0.4, 0.4, 0.4, 0.4],
        geo: &geo,
        label: 1,
    };
    let with = model.predict(&params, &input).unwrap();
    let without = model.without_lora().predict(&params, &input).unwrap();
    assert_eq!(with, without);

    let (_, b) = model.lora_ids()[0];
    params.get_mut(b)[0] = 0.5;
    let changed = model.predict(&params, &input).unwrap();
    assert_ne!(changed[0], without[0]);
}

#[test]
fn multi_view_outputs_ignore_uv_frame() {
    let cfg = tiny(Variant::Full);
    let (model, mut params) = Model::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    perturb(&mut params, 0.2, &mut rng);
    let (mut frames, mut geo) = random_input(&cfg, &mut rng);
    let run = |frames: &[Grid], geo: &GeoConditioning| {
        model
            .predict(
                &params,
                &ModelInput {
                    frames,
                    timesteps: [0.2; 5],
                    geo,
                    label: 2,
                },
            )
            .unwrap()
    };
    let a = run(&frames, &geo);
    frames[UV_FRAME] = random_grid(16, 16, 3, &mut rng);
    geo.frames[UV_FRAME] = random_grid(16, 16, GEO_CHANNELS, &mut rng);
    let b = run(&frames, &geo);
    assert_eq!(a[..NUM_VIEWS], b[..NUM_VIEWS]);
    assert_ne!(a[UV_FRAME], b[UV_FRAME]);

    // Changing one multi-view pixel reaches the UV stream.
    frames[2].data[5] += 0.5;
    let c = run(&frames, &geo);
    let diff = c[UV_FRAME].data.iter().zip(&b[UV_FRAME].data).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
    assert!(diff > 1e-6, "uv output unchanged ({diff})");
}

#[test]
fn joint_variant_lets_multi_view_read_uv() {
    let cfg = tiny(Variant::NoDecoupling);
    let (model, mut params) = Model::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    perturb(&mut params, 0.2, &mut rng);
    let (mut frames, geo) = random_input(&cfg, &mut rng);
    let run = |frames: &[Grid]| {
        model
            .predict(
                &params,
                &ModelInput {
                    frames,
                    timesteps: [0.2; 5],
                    geo: &geo,
                    label: 0,
                },
            )
            .unwrap()
    };
    let a = run(&frames);
    frames[UV_FRAME] = random_grid(16, 16, 3, &mut rng);
    assert_ne!(a[0], run(&frames)[0]);
}

#[test]
fn uv_only_variant_emits_zero_multi_view() {
    let cfg = tiny(Variant::UvOnly);
    let (model, mut params) = Model::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    perturb(&mut params, 0.2, &mut rng);
    let (frames, geo) = random_input(&cfg, &mut rng);
    let out = model
        .predict(
            &params,
            &ModelInput {
                frames: &frames,
                timesteps: [0.0, 0.0, 0.0, 0.0, 0.5],
                geo: &geo,
                label: 0,
            },
        )
        .unwrap();
    assert!(out[..NUM_VIEWS].iter().all(|g| g.data.iter().all(|&v| v == 0.0)));
    assert!(out[UV_FRAME].data.iter().any(|&v| v != 0.0));
}

/// Loss and its analytic gradient for a fixed target in `f64`.
fn loss_and_grads(
    model: &Model,
    params: &ParamStore<f64>,
    input: &ModelInput,
    target: &[Vec<f64>],
    want_grads: bool,
) -> (f64, Vec<Vec<f64>>) {
    let roles = frame_roles(&TaskSpec::img2tex(1)).unwrap();
    let (out, cache) = model.forward(params, input).unwrap();
    let p: Vec<&[f64]> = out.iter().map(|v| v.as_slice()).collect();
    let t: Vec<&[f64]> = target.iter().map(|v| v.as_slice()).collect();
    let mut dout = vec![Vec::new(); NUM_FRAMES];
    let loss = flow_loss_and_grad(&p, &t, &roles, 0.4, LossWeighting::Bump, Some(&mut dout));
    let mut grads = params.zero_grads();
    if want_grads {
        model.backward(params, &cache, &dout, &mut grads).unwrap();
    }
    (loss, grads)
}

fn gradient_check(variant: Variant, seed: u64) {
    let cfg = tiny(variant);
    let (model, params) = Model::new(cfg.clone(), seed).unwrap();
    let mut params = params.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    perturb(&mut params, 0.2, &mut rng);
    let (frames, geo) = random_input(&cfg, &mut rng);
    let input = ModelInput {
        frames: &frames,
        timesteps: [0.4, 0.985, 0.4, 0.4, 0.4],
        geo: &geo,
        label: 1,
    };
    let target: Vec<Vec<f64>> = model.frame_tokens(&frames).unwrap();
    let (_, grads) = loss_and_grads(&model, &params, &input, &target, true);
    let eps = 1e-3;
    let mut worst = 0.0f64;
    for (pid, p) in params.params.clone().iter().enumerate() {
        for _ in 0..2 {
            let i = rng.random_range(0..p.data.len());
            let orig = params.params[pid].data[i];
            params.params[pid].data[i] = orig + eps;
            let hi = loss_and_grads(&model, &params, &input, &target, false).0;
            params.params[pid].data[i] = orig - eps;
            let lo = loss_and_grads(&model, &params, &input, &target, false).0;
            params.params[pid].data[i] = orig;
            let fd = (hi - lo) / (2.0 * eps);
            let a = grads[pid][i];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
            worst = worst.max(rel);
            assert!(rel < 0.02, "{} [{i}]: analytic {a} vs numeric {fd}", p.name);
        }
    }
    assert!(worst < 0.02);
}

#[test]
fn gradients_match_finite_differences_full() {
    gradient_check(Variant::Full, 11);
}

#[test]
fn gradients_match_finite_differences_variants() {
    gradient_check(Variant::NoGeo, 12);
    gradient_check(Variant::NoDecoupling, 13);
    gradient_check(Variant::UvOnly, 14);
}

/// Straightforward per-head rotary attention without geometry.
fn reference_attention(
    xq: &[f64],
    xe: &[f64],
    rq: &RopeTable,
    re: &RopeTable,
    w: &AttnWeights<f64>,
    dim: usize,
    heads: usize,
) -> Vec<f64> {
    let hd = dim / heads;
    let proj = |x: &[f64], wm: &[f64], b: &[f64]| -> Vec<Vec<f64>> {
        x.chunks(dim)
            .map(|row| (0..dim).map(|o| b[o] + (0..dim).map(|i| row[i] * wm[i * dim + o]).sum::<f64>()).collect())
            .collect()
    };
    let rotate = |rows: &mut Vec<Vec<f64>>, t: &RopeTable| {
        for (r, row) in rows.iter_mut().enumerate() {
            for h in 0..heads {
                for j in 0..hd / 2 {
                    let (c, s) = (t.cos[r * t.half + j], t.sin[r * t.half + j]);
                    let (a, b) = (row[h * hd + 2 * j], row[h * hd + 2 * j + 1]);
                    row[h * hd + 2 * j] = a * c - b * s;
                    row[h * hd + 2 * j + 1] = a * s + b * c;
                }
            }
        }
    };
    let mut q = proj(xq, w.wq, w.bq);
    let mut k = proj(xe, w.wk, w.bk);
    let v = proj(xe, w.wv, w.bv);
    rotate(&mut q, rq);
    rotate(&mut k, re);
    let mut o = vec![vec![0.0; dim]; q.len()];
    for h in 0..heads {
        for (qi, qr) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kr| (0..hd).map(|j| qr[h * hd + j] * kr[h * hd + j]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (ki, ek) in e.iter().enumerate() {
                for j in 0..hd {
                    o[qi][h * hd + j] += ek / z * v[ki][h * hd + j];
                }
            }
        }
    }
    let flat: Vec<f64> = o.concat();
    proj(&flat, w.wo, w.bo).concat()
}

struct AttnParams(Vec<Vec<f64>>);

impl AttnParams {
    fn random(dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = Normal::new(0.0, std).unwrap();
        AttnParams(
            (0..8)
                .map(|i| {
                    let len = if i % 2 == 0 { dim * dim } else { dim };
                    (0..len).map(|_| n.sample(rng)).collect()
                })
                .collect(),
        )
    }
    fn w(&self) -> AttnWeights<'_, f64> {
        let v = &self.0;
        AttnWeights {
            wq: &v[0],
            bq: &v[1],
            wk: &v[2],
            bk: &v[3],
            wv: &v[4],
            bv: &v[5],
            wo: &v[6],
            bo: &v[7],
        }
    }
}

#[test]
fn zero_geometry_equals_plain_rotary_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let dim = 48;
    let shape = AttnShape { dim, heads: 4 };
    let rope = rope_3d((4, 2, 2), (1, 4, 4), 12).unwrap();
    let ap = AttnParams::random(dim, 0.15, &mut rng);
    let xe: Vec<f64> = (0..rope.rows() * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let xq = xe[16 * dim..].to_vec();
    let rq = rope.slice(16, 16);
    let zq = vec![0.0; xq.len()];
    let ze = vec![0.0; xe.len()];
    let got = attention::geo_attention(&xq, &xe, &zq, &ze, &rq, &rope, &ap.w(), shape).unwrap();
    let want = reference_attention(&xq, &xe, &rq, &rope, &ap.w(), dim, 4);
    let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn matching_geometry_attracts_attention() {
    // With zero projections Q' and K' are exactly the geometry embeddings.
    let dim = 6;
    let shape = AttnShape { dim, heads: 1 };
    let rope = rope_3d((1, 1, 1), (1, 1, 2), 6).unwrap();
    let zero_m = vec![0.0; dim * dim];
    let zero_b = vec![0.0; dim];
    let mut eye = vec![0.0; dim * dim];
    for i in 0..dim {
        eye[i * dim + i] = 1.0;
    }
    let w = AttnWeights {
        wq: &zero_m,
        bq: &zero_b,
        wk: &zero_m,
        bk: &zero_b,
        wv: &eye,
        bv: &zero_b,
        wo: &eye,
        bo: &zero_b,
    };
    let xq = vec![0.0; dim];
    let mut xe = vec![0.0; 2 * dim];
    xe[0] = 1.0;
    xe[dim + 1] = 1.0;
    let temp = 2.0;
    let gq = vec![temp, 0.0, 0.0, 0.0, 0.0, 0.0];
    let ge = [gq.clone(), vec![0.0, temp, 0.0, 0.0, 0.0, 0.0]].concat();
    let out = attention::geo_attention(&xq, &xe, &gq, &ge, &rope.slice(0, 1), &rope.slice(1, 2), &w, shape).unwrap();
    let s = temp * temp / (dim as f64).sqrt();
    let want = s.exp() / (s.exp() + 1.0);
    assert!((out[0] - want).abs() < 1e-12);
    assert!(out[0] > 0.5);
    assert!((out[0] + out[1] - 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_is_permutation_equivariant(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 12;
        let shape = AttnShape { dim, heads: 2 };
        let rope = rope_3d((1, 2, 2), (1, 2, 4), 6).unwrap();
        let n = rope.rows();
        let ap = AttnParams::random(dim, 0.3, &mut rng);
        let x: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = attention::geo_attention(&x, &x, &g, &g, &rope, &rope, &ap.w(), shape).unwrap();

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permute = |v: &[f64], w: usize| perm.iter().flat_map(|&i| v[i * w..(i + 1) * w].to_vec()).collect::<Vec<f64>>();
        let prope = RopeTable { half: rope.half, cos: permute(&rope.cos, rope.half), sin: permute(&rope.sin, rope.half) };
        let px = permute(&x, dim);
        let pg = permute(&g, dim);
        let out = attention::geo_attention(&px, &px, &pg, &pg, &prope, &prope, &ap.w(), shape).unwrap();
        let want = permute(&base, dim);
        for (a, b) in out.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
