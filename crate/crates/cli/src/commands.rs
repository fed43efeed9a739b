use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use roadbev::ablation::{self, AblationRow, Variant};
use roadbev::autodiff::{checkpoint, ParamStore};
use roadbev::config::RunConfig;
use roadbev::elevation_grid::generate_gt;
use roadbev::heads::ModelKind;
use roadbev::io;
use roadbev::metrics::{DistanceProfile, MetricReport};
use roadbev::seeds::substream;
use roadbev::synthetic::{make_dataset_range, sample_point_cloud};
use roadbev::training::{log_to_csv, Frame, Pipeline};
use serde_json::{json, Map, Value};

use crate::plot::{plot_map, plot_profiles, residual, Scale};
use crate::{Cli, Command, GlobalArgs, KindArg, ModeArg, ReductionArg, SweepArg, VolumeArg};

pub const CHECKPOINT_FILE: &str = "checkpoint.rbck";
const TRAIN_SPLIT: &str = "train";
const HELDOUT_SPLIT: &str = "heldout";

pub fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.global.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global().context("building the thread pool")?;
    }
    let cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::GenScene { n_train, n_heldout, density, noise } => gen_scene(&cfg, n_train, n_heldout, density, noise),
        Command::GenLabels { cloud, output } => gen_labels(&cfg, &cloud, output),
        Command::Train { data } => train(&cfg, data.as_deref()),
        Command::Eval { checkpoint, data } => eval(&cfg, &checkpoint, data.as_deref()),
        Command::Ablate { sweep, variants, data } => ablate(&cfg, sweep, variants.as_deref(), data.as_deref()),
        Command::Plot { evals, frame } => plot(&cfg, &evals, frame),
    }
}

/// Base profile, then the config file, then command-line overrides.
fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let base = if g.toy { RunConfig::toy(ModelKind::Mono) } else { RunConfig::default() };
    let mut cfg = match &g.config {
        Some(p) => {
            let text = io::read_text(p)?;
            RunConfig::from_json_over(&base, &text).with_context(|| format!("reading {}", p.display()))?
        }
        None => base,
    };
    let mut top = Map::new();
    let mut model = Map::new();
    if let Some(s) = g.seed {
        top.insert("seed".into(), json!(s));
    }
    if let Some(o) = &g.out {
        top.insert("output_dir".into(), json!(o));
    }
    if let Some(k) = g.kind {
        model.insert("kind".into(), json!(match k {
            KindArg::Mono => "mono",
            KindArg::Stereo => "stereo",
        }));
    }
    if let Some(r) = g.loss_reduction {
        model.insert("loss_reduction".into(), json!(match r {
            ReductionArg::Sum => "sum",
            ReductionArg::Mean => "mean",
        }));
    }
    if let Some(v) = g.volume {
        model.insert("volume_mode".into(), json!(match v {
            VolumeArg::Multiply => "multiply",
            VolumeArg::Subtract => "subtract",
        }));
    }
    if let Some(m) = g.mode {
        model.insert("sample_mode".into(), json!(match m {
            ModeArg::Nearest => "nearest",
            ModeArg::Bilinear => "bilinear",
        }));
    }
    if !model.is_empty() {
        top.insert("model".into(), Value::Object(model));
    }
    if !top.is_empty() {
        cfg = cfg.overlay(Value::Object(top))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the output directory with the resolved config and version stamp.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.output_dir.clone();
    io::write_text(&out.join("config.json"), &cfg.to_json())?;
    io::write_text(&out.join("VERSION"), &format!("{}\n", roadbev::VERSION))?;
    Ok(out)
}

fn data_root(cfg: &RunConfig, data: Option<&Path>) -> Option<PathBuf> {
    data.map(Path::to_path_buf).or_else(|| cfg.dataset.dir.clone())
}

/// `root/<split>` when present, else `root` itself.
fn split_dir(root: &Path, split: &str) -> PathBuf {
    let sub = root.join(split);
    if sub.is_dir() {
        sub
    } else {
        root.to_path_buf()
    }
}

fn stereo(cfg: &RunConfig) -> bool {
    cfg.model.kind == ModelKind::Stereo
}

fn synthetic_frames(cfg: &RunConfig, start: usize, count: usize) -> Result<Vec<Frame>> {
    let mut spec = cfg.dataset.synthetic.clone();
    spec.stereo &= stereo(cfg);
    log::info!("rendering {count} synthetic scenes");
    let samples = make_dataset_range(start, count, &cfg.grid, &cfg.rig, &spec, cfg.seed)?;
    Ok(samples.iter().map(Frame::from).collect())
}

fn train_frames(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<Frame>> {
    match data_root(cfg, data) {
        Some(root) => Ok(io::load_frame_dirs(&split_dir(&root, TRAIN_SPLIT), &cfg.rig, &cfg.grid, stereo(cfg))?),
        None => synthetic_frames(cfg, 0, cfg.dataset.n_train),
    }
}

fn heldout_frames(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<Frame>> {
    match data_root(cfg, data) {
        Some(root) => Ok(io::load_frame_dirs(&split_dir(&root, HELDOUT_SPLIT), &cfg.rig, &cfg.grid, stereo(cfg))?),
        None => synthetic_frames(cfg, cfg.dataset.n_train, cfg.dataset.n_heldout),
    }
}

fn gen_scene(cfg: &RunConfig, n_train: Option<usize>, n_heldout: Option<usize>, density: f64, noise: f64) -> Result<()> {
    let out = prepare_out(cfg)?;
    let n_train = n_train.unwrap_or(cfg.dataset.n_train);
    let n_heldout = n_heldout.unwrap_or(cfg.dataset.n_heldout);
    let mut nonconverged = 0;
    for (split, start, count) in [(TRAIN_SPLIT, 0, n_train), (HELDOUT_SPLIT, n_train, n_heldout)] {
        let samples = make_dataset_range(start, count, &cfg.grid, &cfg.rig, &cfg.dataset.synthetic, cfg.seed)?;
        for (k, s) in samples.iter().enumerate() {
            let mut rng = substream(cfg.seed, "cloud", (start + k) as u64);
            let cloud = sample_point_cloud(&s.scene.height, &cfg.grid, density, noise, &mut rng)?;
            io::write_sample_dir(&out.join(split).join(format!("{k:04}")), s, &cloud, &cfg.grid)?;
            nonconverged += s.nonconverged;
        }
    }
    log::info!("{} frames written to {}", n_train + n_heldout, out.display());
    if nonconverged > 0 {
        log::warn!("{nonconverged} rays needed the bracketing fallback");
    }
    Ok(())
}

fn gen_labels(cfg: &RunConfig, cloud: &Path, output: Option<PathBuf>) -> Result<()> {
    let out = prepare_out(cfg)?;
    let points = io::read_cloud(cloud)?;
    let map = generate_gt(&points, &cfg.grid)?;
    let path = output.unwrap_or_else(|| out.join(io::GT_FILE));
    io::write_elevation(&path, &map, &cfg.grid)?;
    println!("{} of {} cells valid -> {}", map.valid_count(), cfg.grid.cells(), path.display());
    Ok(())
}

fn epoch_metrics_csv(rows: &[(usize, MetricReport)]) -> String {
    let mut s = String::from("epoch,abs_err_cm,rmse_cm,frac_gt_half,n_valid\n");
    for (e, r) in rows {
        s.push_str(&format!("{e},{},{},{},{}\n", r.abs_err_cm, r.rmse_cm, r.frac_gt_half, r.n_valid));
    }
    s
}

fn train(cfg: &RunConfig, data: Option<&Path>) -> Result<()> {
    let out = prepare_out(cfg)?;
    let pipe = Pipeline::new(cfg)?;
    let train = pipe.prepare_all(&train_frames(cfg, data)?)?;
    let has_heldout = data_root(cfg, data).is_some() || cfg.dataset.n_heldout > 0;
    let eval = if has_heldout { pipe.prepare_all(&heldout_frames(cfg, data)?)? } else { Vec::new() };
    let eval_set = if eval.is_empty() { &train } else { &eval };
    let every = cfg.training.checkpoint_every;
    let meta = cfg.to_json();
    let mut per_epoch = Vec::new();
    let result = pipe.train(&train, |epoch, params| {
        let report = pipe.evaluate(params, eval_set)?.report;
        log::info!("epoch {epoch}: abs_err {:.4} cm, rmse {:.4} cm", report.abs_err_cm, report.rmse_cm);
        per_epoch.push((epoch, report));
        if every > 0 && (epoch + 1) % every == 0 {
            checkpoint::save(&out.join(format!("checkpoint_epoch{:03}.rbck", epoch + 1)), params, &meta)?;
        }
        Ok(())
    })?;
    checkpoint::save(&out.join(CHECKPOINT_FILE), &result.params, &meta)?;
    io::write_text(&out.join("train_log.csv"), &log_to_csv(&result.log)?)?;
    io::write_text(&out.join("epoch_metrics.csv"), &epoch_metrics_csv(&per_epoch))?;
    let mut timing = String::from("epoch,wall_s\n");
    for (e, t) in result.epoch_wall_s.iter().enumerate() {
        timing.push_str(&format!("{e},{t:.3}\n"));
    }
    io::write_text(&out.join("timing.csv"), &timing)?;
    if let Some((_, last)) = per_epoch.last() {
        println!("trained {} epochs: abs_err {:.4} cm, rmse {:.4} cm", per_epoch.len(), last.abs_err_cm, last.rmse_cm);
    }
    Ok(())
}

/// Every tensor the configured model expects must be present with the same
/// shape, and nothing else.
fn check_params(expected: &ParamStore<f32>, loaded: &ParamStore<f32>) -> roadbev::Result<()> {
    let have: HashMap<&str, &[usize]> = loaded.iter().map(|(n, t)| (n, t.shape())).collect();
    for (name, t) in expected.iter() {
        match have.get(name) {
            None => return Err(roadbev::Error::Contract(format!("checkpoint lacks parameter `{name}`"))),
            Some(s) if *s != t.shape() => {
                return Err(roadbev::Error::Contract(format!(
                    "parameter `{name}` has shape {s:?} in the checkpoint, the config expects {:?}",
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = loaded.names().find(|n| expected.names().all(|m| m != *n)) {
        return Err(roadbev::Error::Contract(format!("checkpoint has unexpected parameter `{extra}`")));
    }
    Ok(())
}

fn eval(cfg: &RunConfig, ckpt: &Path, data: Option<&Path>) -> Result<()> {
    let (params, meta) = checkpoint::load(ckpt)?;
    let pipe = Pipeline::new(cfg)?;
    check_params(&pipe.init_params(), &params).with_context(|| format!("loading {}", ckpt.display()))?;
    if let Ok(trained) = serde_json::from_str::<RunConfig>(&meta) {
        if trained.grid != cfg.grid || trained.bins != cfg.bins || trained.voxel != cfg.voxel {
            log::warn!("grid, bins or voxel settings differ from the checkpoint's training run");
        }
    }
    let out = prepare_out(cfg)?;
    let frames = pipe.prepare_all(&heldout_frames(cfg, data)?)?;
    if frames.is_empty() {
        bail!("no evaluation frames");
    }
    let ev = pipe.evaluate(&params, &frames)?;
    io::write_text(&out.join("metrics.json"), &serde_json::to_string_pretty(&ev.report)?)?;
    io::write_text(&out.join("profile.csv"), &ev.profile.to_csv())?;
    for (k, (pred, f)) in ev.predictions.iter().zip(&frames).enumerate() {
        io::write_elevation(&out.join("predictions").join(format!("{k:04}.rbev")), pred, &cfg.grid)?;
        io::write_elevation(&out.join("gt").join(format!("{k:04}.rbev")), &f.gt, &cfg.grid)?;
    }
    let r = &ev.report;
    println!(
        "abs_err {:.4} cm, rmse {:.4} cm, >0.5 cm {:.4}, {} cells, {:.3} s/frame",
        r.abs_err_cm, r.rmse_cm, r.frac_gt_half, r.n_valid, r.wall_s_per_frame
    );
    Ok(())
}

fn read_variants(path: &Path) -> Result<Vec<Variant>> {
    let doc: Value = serde_json::from_str(&io::read_text(path)?).with_context(|| format!("parsing {}", path.display()))?;
    let items = doc.as_array().with_context(|| format!("{}: expected a JSON list", path.display()))?;
    items
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let id = v.get("id").and_then(Value::as_str).with_context(|| format!("variant {k} needs a string `id`"))?;
            let overlay = v.get("overlay").cloned().unwrap_or_else(|| json!({}));
            Ok(Variant { id: id.to_string(), overlay })
        })
        .collect()
}

fn ablate(cfg: &RunConfig, sweep: Option<SweepArg>, variants: Option<&Path>, data: Option<&Path>) -> Result<()> {
    let variants = match (sweep, variants) {
        (_, Some(p)) => read_variants(p)?,
        (Some(SweepArg::ClassInterval), None) => ablation::class_interval_sweep(),
        (Some(SweepArg::VoxelResolution), None) => ablation::voxel_resolution_sweep(),
        (Some(SweepArg::FeatureVolume), None) => ablation::feature_volume_sweep(),
        (None, None) => bail!("give --sweep or --variants"),
    };
    let out = prepare_out(cfg)?;
    // Stereo variants need right images whatever the base kind.
    let mut frame_cfg = cfg.clone();
    if variants.iter().any(|v| v.overlay.pointer("/model/kind") == Some(&json!("stereo"))) {
        frame_cfg.model.kind = ModelKind::Stereo;
    }
    let train = train_frames(&frame_cfg, data)?;
    let eval = heldout_frames(&frame_cfg, data)?;
    let parallel = rayon::current_num_threads() > 1;
    let rows: Vec<AblationRow> = ablation::run_ablation(cfg, &variants, &train, &eval, parallel);
    io::write_text(&out.join("ablation.csv"), &ablation::rows_to_csv(&rows)?)?;
    for r in &rows {
        match r.abs_err_cm {
            Some(a) => println!("{}: abs_err {a:.4} cm", r.variant_id),
            None => println!("{}: {}", r.variant_id, r.status),
        }
    }
    Ok(())
}

fn plot(cfg: &RunConfig, evals: &[(String, PathBuf)], frame: usize) -> Result<()> {
    let out = prepare_out(cfg)?;
    let series = evals
        .iter()
        .map(|(label, dir)| {
            let text = io::read_text(&dir.join("profile.csv"))?;
            Ok((label.clone(), DistanceProfile::from_csv(&text)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let first = &evals[0].1;
    let name = format!("{frame:04}.rbev");
    let (gt, grid) = io::read_elevation(&first.join("gt").join(&name))?;
    let (pred, _) = io::read_elevation(&first.join("predictions").join(&name))?;
    plot_profiles(&out.join("profile.png"), &series, &grid)?;
    let scale = Scale::fit(&gt);
    plot_map(&out.join(format!("gt_{frame:04}.png")), &gt, &grid, "ground truth (cm)", scale)?;
    plot_map(&out.join(format!("pred_{frame:04}.png")), &pred, &grid, "prediction (cm)", scale)?;
    let res = residual(&gt, &pred)?;
    plot_map(&out.join(format!("residual_{frame:04}.png")), &res, &grid, "gt - prediction (cm)", Scale::symmetric(&res))?;
    println!("plots written to {}", out.display());
    Ok(())
}
