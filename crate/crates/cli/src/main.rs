//! `uvseq`: dataset generation, training, inference and evaluation.

mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use uvseq::dataset::{parse_list, write_dataset, Manifest, Prepared, SplitRatios, TextureChoice};
use uvseq::geomesh::{rasterize_views, store, BakeConfig, CameraRig, PrimitiveKind};
use uvseq::muvnet::{ModelConfig, Variant};
use uvseq::sampler::{apply_texture, decode_frame, evaluate, sample_asset, EvalReport};
use uvseq::seqspace::{FrameRole, FrameSequence, Task, NUM_FRAMES, NUM_VIEWS, UV_FRAME};
use uvseq::trainer::checkpoint::Checkpoint;
use uvseq::trainer::{MixPreset, TrainMode, TrainPools, Trainer};
use uvseq::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "uvseq", version, about = "Joint multi-view and UV texture generation")]
struct Cli {
    /// Root that every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural assets, render caches and a split manifest.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Sample textures for one asset.
    Infer(InferArgs),
    /// Sample and score every asset of a split.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated primitive kinds.
    #[arg(long, default_value = "cube,uvsphere,torus")]
    kinds: String,
    /// Comma-separated texture families or full `family:color:color` specs.
    #[arg(long, default_value = "gradient,stripes,voronoi,checker")]
    textures: String,
    /// Multi-view render size; atlases are twice as large.
    #[arg(long, default_value_t = 32)]
    mv_size: usize,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    stage: Option<u8>,
    #[arg(long)]
    mode: Option<String>,
    /// Continue from a checkpoint with its optimizer and RNG state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Initial weights (the checkpoint's EMA), e.g. a stage-1 run.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Task mix: 3d-only, split-3d or hybrid.
    #[arg(long)]
    preset: Option<String>,
    /// Architecture variant: full, no-geo, no-decoupling or uv-only.
    #[arg(long)]
    variant: Option<String>,
    /// Extra `key=value` settings applied last.
    #[arg(long = "set")]
    set: Vec<String>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    asset: PathBuf,
    #[arg(long, default_value = "img2tex")]
    task: String,
    #[arg(long, default_value_t = 0)]
    cond_view: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory holding the manifest.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long, default_value = "eval")]
    split: String,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    steps: usize,
    #[arg(long, default_value = "img2tex")]
    task: String,
    /// Score ground-truth frames instead of samples.
    #[arg(long, hide = true)]
    inject_ground_truth: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::InvalidParameter { .. }) => 2,
        Some(Error::Numerical(_)) => 4,
        Some(_) => 3,
        None => 3,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let root = cli.workdir;
    match cli.cmd {
        Command::GenData(a) => gen_data(&root, a),
        Command::Train(a) => train(&root, a),
        Command::Infer(a) => infer(&root, a),
        Command::Eval(a) => eval(&root, a),
    }
}

fn gen_data(root: &Path, a: GenDataArgs) -> anyhow::Result<()> {
    let out = root.join(&a.out);
    let kinds: Vec<PrimitiveKind> = parse_list(&a.kinds)?;
    let textures: Vec<TextureChoice> = parse_list(&a.textures)?;
    if out.exists() && fs::read_dir(&out)?.next().is_some() {
        if !a.force {
            return Err(Error::param("out", format!("{} is not empty (use --force)", out.display())).into());
        }
        fs::remove_dir_all(&out)?;
    }
    fs::create_dir_all(&out)?;
    let m = write_dataset(&out, a.count, a.seed, &kinds, &textures, a.mv_size, SplitRatios::default())?;
    println!(
        "wrote {} assets to {} (train-tex {}, train-mv {}, eval {})",
        a.count,
        out.display(),
        m.train_tex.len(),
        m.train_mv.len(),
        m.eval.len()
    );
    Ok(())
}

fn model_for(cfg: &RunConfig, manifest: &Manifest) -> ModelConfig {
    ModelConfig {
        mv_size: manifest.mv_size,
        uv_size: manifest.uv_size,
        label_vocab: manifest.labels.len().max(1),
        ..cfg.model.clone()
    }
}

fn train(root: &Path, a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &a.config {
        let path = root.join(path);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    if let Some(s) = a.stage {
        cfg.train.stage = s;
    }
    if let Some(m) = &a.mode {
        cfg.train.mode = m.parse()?;
    }
    if let Some(p) = &a.preset {
        cfg.train.mix = p.parse()?;
    }
    if let Some(v) = &a.variant {
        cfg.model.variant = v.parse()?;
    }
    cfg.apply_overrides(&a.set)?;
    cfg.train.validate()?;

    let data_dir = root.join(&cfg.data.dir);
    let manifest = Manifest::load(&data_dir)?;
    let model_cfg = model_for(&cfg, &manifest);
    model_cfg.validate()?;
    if cfg.train.mode == TrainMode::Finetune && a.init.is_none() && a.resume.is_none() {
        return Err(Error::param("mode", "finetune needs a base checkpoint (--init)").into());
    }

    let mut trainer = if let Some(path) = &a.resume {
        let ckpt = Checkpoint::load(&root.join(path))?;
        ckpt.check_model(&model_cfg)?;
        Trainer::resume(ckpt, Some(cfg.train.clone()))?
    } else {
        let init = match &a.init {
            Some(path) => {
                let ckpt = Checkpoint::load(&root.join(path))?;
                ckpt.check_model(&model_cfg)?;
                Some(ckpt.ema)
            }
            None => None,
        };
        Trainer::new(model_cfg, cfg.train.clone(), init, manifest.labels.clone())?
    };

    let tex = Prepared::load_split(&data_dir, &manifest, &manifest.train_tex)?;
    let mv = if cfg.train.mix == MixPreset::Hybrid {
        Prepared::load_split(&data_dir, &manifest, &manifest.train_mv)?
    } else {
        Vec::new()
    };
    let n_tex = tex.len();
    let data: Vec<Prepared> = tex.into_iter().chain(mv).collect();
    let tex_ids: Vec<usize> = (0..n_tex).collect();
    let mv_ids: Vec<usize> = (n_tex..data.len()).collect();
    let pools = TrainPools::from_preset(cfg.train.mix, &tex_ids, &mv_ids)?;

    let run_dir = root.join(&cfg.data.run_dir);
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join("config.txt"), cfg.to_text())?;
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(run_dir.join("metrics.jsonl"))?;
    let mut log = BufWriter::new(log_file);
    let every = cfg.data.checkpoint_every;
    let ckpt_dir = run_dir.clone();
    trainer.run(&data, &pools, &mut log, |t| {
        if every > 0 && t.step % every == 0 {
            t.checkpoint().save(&ckpt_dir.join(format!("ckpt_{:06}.bin", t.step)))?;
        }
        Ok(())
    })?;
    log.flush()?;
    trainer.checkpoint().save(&run_dir.join("last.bin"))?;
    println!("trained {} steps; checkpoint at {}", trainer.step, run_dir.join("last.bin").display());
    Ok(())
}

fn load_model(root: &Path, ckpt: &Path, task: Task) -> anyhow::Result<(uvseq::muvnet::Model, Checkpoint)> {
    let ckpt = Checkpoint::load(&root.join(ckpt))?;
    if ckpt.model.variant == Variant::UvOnly && task == Task::Geo2Mv {
        return Err(Error::param("task", "a uv-only model cannot generate views").into());
    }
    let (model, _) = uvseq::muvnet::Model::new(ckpt.model.clone(), 0)?;
    Ok((model, ckpt))
}

fn prepare_for(ckpt: &Checkpoint, name: &str, asset: uvseq::geomesh::TexturedAsset) -> anyhow::Result<Prepared> {
    let m = &ckpt.model;
    if asset.albedo_atlas.h != m.uv_size || asset.albedo_atlas.w != m.uv_size {
        return Err(Error::data(format!(
            "asset atlas is {}x{}, model expects {}x{}",
            asset.albedo_atlas.h, asset.albedo_atlas.w, m.uv_size, m.uv_size
        ))
        .into());
    }
    let label = match ckpt.labels.iter().position(|l| *l == asset.label) {
        Some(i) => i,
        None => {
            eprintln!("warning: label `{}` unseen in training, using label 0", asset.label);
            0
        }
    };
    Ok(Prepared::new(name, asset, label, m.mv_size)?)
}

fn sample_config(task: &str, cond_view: usize, seed: u64, steps: usize) -> anyhow::Result<uvseq::sampler::SampleConfig> {
    let task: Task = task.parse()?;
    if cond_view >= NUM_VIEWS {
        return Err(Error::param("cond-view", format!("{cond_view} outside 0..{}", NUM_VIEWS - 1)).into());
    }
    let sc = uvseq::sampler::SampleConfig {
        steps,
        task,
        cf_view_index: cond_view,
        seed,
        shifted_grid: false,
    };
    sc.validate()?;
    Ok(sc)
}

fn infer(root: &Path, a: InferArgs) -> anyhow::Result<()> {
    let sc = sample_config(&a.task, a.cond_view, a.seed, a.steps)?;
    let (model, ckpt) = load_model(root, &a.ckpt, sc.task)?;
    let asset = store::load_asset(&root.join(&a.asset))?;
    let p = prepare_for(&ckpt, "asset", asset)?;
    let seq = sample_asset(&model, &ckpt.ema, &p, &sc, &ckpt.train.schedule)?;
    let report = evaluate(&p, &seq, &BakeConfig::default())?;

    let out = root.join(&a.out);
    fs::create_dir_all(&out)?;
    for v in 0..NUM_VIEWS {
        let img = match seq.roles[v] {
            FrameRole::DF => decode_frame(&seq.frames[v]),
            FrameRole::CF => p.mv_albedo[v].to_unit(),
            FrameRole::NF => continue,
        };
        img.write_png(out.join(format!("view_{v}.png")))?;
    }
    if seq.roles[UV_FRAME] == FrameRole::DF {
        let atlas = decode_frame(&seq.frames[UV_FRAME]);
        atlas.write_png(out.join("uv.png"))?;
        let textured = apply_texture(&p.asset, &atlas)?;
        let dir = out.join("textured");
        store::save_asset(&textured, &dir)?;
        let (views, _) = rasterize_views(&textured, &CameraRig::standard(4 * ckpt.model.mv_size, 4 * ckpt.model.mv_size));
        for (i, v) in views.iter().enumerate() {
            v.shaded.write_png(dir.join(format!("preview_{i}.png")))?;
        }
    }
    fs::write(out.join("report.json"), report_json(&report)? + "\n")?;
    println!("wrote samples to {}", out.display());
    Ok(())
}

fn report_json(r: &EvalReport) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(r)?)
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn ground_truth(p: &Prepared, roles: [FrameRole; NUM_FRAMES]) -> FrameSequence {
    let uv_task = roles[UV_FRAME] == FrameRole::DF;
    let mut frames = if uv_task || roles.contains(&FrameRole::CF) {
        p.mv_albedo.clone()
    } else {
        p.mv_shaded.clone()
    };
    frames.push(p.uv_albedo.clone());
    FrameSequence {
        frames,
        roles,
        timesteps: [1.0; NUM_FRAMES],
    }
}

fn eval(root: &Path, a: EvalArgs) -> anyhow::Result<()> {
    let task: Task = a.task.parse()?;
    let (model, ckpt) = load_model(root, &a.ckpt, task)?;
    let data_dir = root.join(&a.data);
    let manifest = Manifest::load(&data_dir)?;
    let names = manifest.split(&a.split)?;
    if names.is_empty() {
        return Err(Error::data(format!("split `{}` is empty", a.split)).into());
    }
    let mut reports = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let asset = store::load_asset(&data_dir.join(name))?;
        let p = prepare_for(&ckpt, name, asset)?;
        let sc = sample_config(&a.task, i % NUM_VIEWS, a.seed + i as u64, a.steps)?;
        let seq = if a.inject_ground_truth {
            let roles = uvseq::trainer::variant_roles(uvseq::seqspace::frame_roles(&sc.task_spec())?, model.cfg.variant);
            ground_truth(&p, roles)
        } else {
            sample_asset(&model, &ckpt.ema, &p, &sc, &ckpt.train.schedule)?
        };
        reports.push(evaluate(&p, &seq, &BakeConfig::default())?);
    }
    let per_view: Vec<Value> = (0..NUM_VIEWS)
        .map(|v| json!(mean(reports.iter().filter_map(|r| r.per_view_psnr[v]))))
        .collect();
    let mut obj = Map::new();
    obj.insert("uv_psnr".into(), json!(mean(reports.iter().filter_map(|r| r.uv_psnr))));
    obj.insert("consistency_mae".into(), json!(mean(reports.iter().filter_map(|r| r.consistency_mae))));
    obj.insert("coverage_frac".into(), json!(mean(reports.iter().map(|r| r.coverage_frac))));
    obj.insert("per_view_psnr".into(), Value::Array(per_view));
    obj.insert("n_assets".into(), json!(reports.len()));
    let out = root.join(&a.out);
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(&Value::Object(obj))?;
    fs::write(&out, text + "\n")?;
    println!("scored {} assets; report at {}", reports.len(), out.display());
    Ok(())
}
