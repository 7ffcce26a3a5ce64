//! Command-line driver for the trajectory-fusion pipeline. Every command
//! reads the same TOML configuration (all keys optional); recordings are
//! directories of binary frame records plus a ground-truth text file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bevtraj::config::AppConfig;
use bevtraj::harness::eval::evaluate_ap;
use bevtraj::harness::io::{
    read_detections, read_frame_record, write_detections, write_frame_record, write_track_log,
};
use bevtraj::harness::scenario::{generate_frame, ScenarioSpec};
use bevtraj::memory::FrameRecord;
use bevtraj::pipeline::{
    ablate_frames, batch_infer, load_checkpoint, run_tracker, save_checkpoint, train_on_scenarios,
    Model,
};

#[derive(Parser)]
#[command(name = "bevtraj", version, about = "Multi-frame BEV detection by trajectory-guided fusion")]
struct Cli {
    /// TOML configuration file; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic recording: frame records plus ground truth.
    Gen(GenArgs),
    /// Run the tracker over a recording and write its track log.
    Track(TrackArgs),
    /// Train on generated scenarios and write a checkpoint.
    Train(TrainArgs),
    /// Detect objects over a recording with a trained checkpoint.
    Infer(InferArgs),
    /// Score detections against ground truth (40-point average precision).
    Eval(EvalArgs),
    /// Sweep the fusion window length and report mAP at each setting.
    AblateFrames(AblateArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for `frame_NNNN.m3fr` and `gt.txt`.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Scenario seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Override the configured frame count.
    #[arg(long)]
    frames: Option<u64>,
}

#[derive(Args)]
struct TrackArgs {
    /// Recording directory produced by `gen`.
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    /// Track log destination (tab-separated text).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Checkpoint destination.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Parameter initialization seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Override the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the configured scenario count.
    #[arg(long)]
    scenarios: Option<usize>,
    /// Write per-epoch mean loss as CSV.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Recording directory produced by `gen`.
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    /// Checkpoint from `train`.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Detections destination (text, one row per box).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Override the configured fusion window length.
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Detections file from `infer`.
    #[arg(long, value_name = "FILE")]
    dets: PathBuf,
    /// Ground-truth file from `gen`.
    #[arg(long, value_name = "FILE")]
    gt: PathBuf,
    /// Override the configured region ("eaa" or "roi").
    #[arg(long)]
    region: Option<String>,
    /// Write per-class AP as CSV.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Checkpoint from `train`.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Comma-separated window lengths; default 1..=configured window.
    #[arg(long, value_delimiter = ',')]
    windows: Vec<usize>,
    /// Override the configured region ("eaa" or "roi").
    #[arg(long)]
    region: Option<String>,
    /// Write the sweep as CSV.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    match cli.cmd {
        Cmd::Gen(a) => gen(&cfg, &a),
        Cmd::Track(a) => track(&cfg, &a),
        Cmd::Train(a) => train(&cfg, &a),
        Cmd::Infer(a) => infer(&cfg, &a),
        Cmd::Eval(a) => eval(&cfg, &a),
        Cmd::AblateFrames(a) => ablate(&cfg, &a),
    }
}

fn scenario_for(cfg: &AppConfig, seed: u64, frames: Option<u64>) -> Result<ScenarioSpec> {
    let grid = cfg.grid_spec()?;
    Ok(ScenarioSpec::random(
        seed,
        grid,
        frames.unwrap_or(cfg.scenario.frames),
        cfg.noise(),
        cfg.model.global_channels,
        cfg.model.local_channels,
    )?)
}

fn gen(cfg: &AppConfig, a: &GenArgs) -> Result<()> {
    let spec = scenario_for(cfg, a.seed, a.frames)?;
    std::fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))?;
    let mut gts = Vec::with_capacity(spec.frames as usize);
    let mut objects = 0usize;
    for t in 0..spec.frames {
        let (rec, truth) = generate_frame(&spec, t)?;
        write_frame_record(&a.out.join(format!("frame_{t:04}.m3fr")), &rec)?;
        objects = objects.max(truth.gts.len());
        gts.push(truth.gts);
    }
    write_detections(&a.out.join("gt.txt"), &gts)?;
    println!(
        "wrote {} frames ({} objects at peak) to {}",
        spec.frames,
        objects,
        a.out.display()
    );
    Ok(())
}

fn read_recording(dir: &Path) -> Result<Vec<Arc<FrameRecord>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "m3fr"))
        .collect();
    if paths.is_empty() {
        bail!("no .m3fr frame records under {}", dir.display());
    }
    paths.sort();
    let mut records = Vec::with_capacity(paths.len());
    for p in paths {
        records.push(Arc::new(read_frame_record(&p)?));
    }
    for pair in records.windows(2) {
        if pair[1].frame_id <= pair[0].frame_id {
            bail!("frame ids are not strictly increasing in {}", dir.display());
        }
    }
    Ok(records)
}

fn track(cfg: &AppConfig, a: &TrackArgs) -> Result<()> {
    let records = read_recording(&a.input)?;
    let snaps = run_tracker(&records, &cfg.tracker)?;
    let tracks = {
        let mut ids: Vec<u64> = snaps.iter().map(|s| s.track_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    };
    write_track_log(&a.out, &snaps)?;
    println!(
        "{} frames -> {} snapshots over {} tracks -> {}",
        records.len(),
        snaps.len(),
        tracks,
        a.out.display()
    );
    Ok(())
}

fn train(cfg: &AppConfig, a: &TrainArgs) -> Result<()> {
    let model_cfg = cfg.model_config()?;
    let mut tc = cfg.train_config();
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    let count = a.scenarios.unwrap_or(cfg.train.scenarios);
    let mut scenarios = Vec::with_capacity(count);
    for i in 0..count {
        scenarios.push(scenario_for(cfg, cfg.train.seed + i as u64, None)?);
    }
    let mut model = Model::new(model_cfg, a.seed)?;
    let stats = train_on_scenarios(&mut model, &cfg.tracker, &scenarios, &tc)?;
    for (i, loss) in stats.epoch_loss.iter().enumerate() {
        println!("epoch {:>3}  mean loss {loss:.6}", i + 1);
    }
    save_checkpoint(&a.out, &model.params)?;
    println!("checkpoint -> {}", a.out.display());
    if let Some(csv) = &a.csv {
        let mut text = String::from("epoch,loss\n");
        for (i, loss) in stats.epoch_loss.iter().enumerate() {
            text.push_str(&format!("{},{loss}\n", i + 1));
        }
        std::fs::write(csv, text).with_context(|| format!("writing {}", csv.display()))?;
    }
    Ok(())
}

fn infer(cfg: &AppConfig, a: &InferArgs) -> Result<()> {
    let records = read_recording(&a.input)?;
    let mut model = Model::new(cfg.model_config()?, 0)?;
    load_checkpoint(&a.checkpoint, &mut model.params)?;
    let window = a.window.unwrap_or(model.cfg.window);
    let dets = batch_infer(&mut model, &cfg.tracker, &records, window)?;
    let total: usize = dets.iter().map(Vec::len).sum();
    write_detections(&a.out, &dets)?;
    println!(
        "{} detections over {} frames (window {window}) -> {}",
        total,
        records.len(),
        a.out.display()
    );
    Ok(())
}

fn region_for(cfg: &AppConfig, flag: &Option<String>) -> Result<bevtraj::harness::eval::EvalRegion> {
    let mut cfg = cfg.clone();
    if let Some(r) = flag {
        cfg.eval.region = r.clone();
    }
    Ok(cfg.eval_region()?)
}

fn class_names(cfg: &AppConfig) -> Vec<String> {
    cfg.model.anchors.classes.iter().map(|c| c.name.clone()).collect()
}

fn print_ap_table(names: &[String], report: &bevtraj::harness::eval::ApReport) {
    println!("{:<12} {:>8}", "class", "AP");
    for (i, ap) in report.per_class.iter().enumerate() {
        let name = names.get(i).map(String::as_str).unwrap_or("?");
        match ap {
            Some(v) => println!("{name:<12} {v:>8.4}"),
            None => println!("{name:<12} {:>8}", "-"),
        }
    }
    println!("{:<12} {:>8.4}", "mAP", report.map);
}

fn eval(cfg: &AppConfig, a: &EvalArgs) -> Result<()> {
    let mut dets = read_detections(&a.dets)?;
    let mut gts = read_detections(&a.gt)?;
    let frames = dets.len().max(gts.len());
    dets.resize(frames, Vec::new());
    gts.resize(frames, Vec::new());
    let region = region_for(cfg, &a.region)?;
    let thr = cfg.eval_iou()?;
    let report = evaluate_ap(&dets, &gts, &thr, &region)?;
    let names = class_names(cfg);
    print_ap_table(&names, &report);
    if let Some(csv) = &a.csv {
        let mut text = String::from("class,ap\n");
        for (i, ap) in report.per_class.iter().enumerate() {
            let name = names.get(i).map(String::as_str).unwrap_or("?");
            match ap {
                Some(v) => text.push_str(&format!("{name},{v}\n")),
                None => text.push_str(&format!("{name},\n")),
            }
        }
        text.push_str(&format!("map,{}\n", report.map));
        std::fs::write(csv, text).with_context(|| format!("writing {}", csv.display()))?;
    }
    Ok(())
}

fn ablate(cfg: &AppConfig, a: &AblateArgs) -> Result<()> {
    let mut model = Model::new(cfg.model_config()?, 0)?;
    load_checkpoint(&a.checkpoint, &mut model.params)?;
    let windows: Vec<usize> = if a.windows.is_empty() {
        (1..=model.cfg.window).collect()
    } else {
        a.windows.clone()
    };
    if windows.contains(&0) {
        bail!("window lengths must be at least 1");
    }
    let mut scenarios = Vec::with_capacity(cfg.eval.scenarios);
    for i in 0..cfg.eval.scenarios {
        scenarios.push(scenario_for(cfg, cfg.eval.seed + i as u64, None)?);
    }
    let region = region_for(cfg, &a.region)?;
    let rows = ablate_frames(&mut model, &cfg.tracker, &scenarios, &windows, &region)?;
    println!("{:>7} {:>8}", "window", "mAP");
    for (n, map) in &rows {
        println!("{n:>7} {map:>8.4}");
    }
    if let Some(csv) = &a.csv {
        let mut text = String::from("window,map\n");
        for (n, map) in &rows {
            text.push_str(&format!("{n},{map}\n"));
        }
        std::fs::write(csv, text).with_context(|| format!("writing {}", csv.display()))?;
    }
    Ok(())
}
