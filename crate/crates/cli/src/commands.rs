//! Subcommand implementations. Each writes a resolved-config snapshot next
//! to its outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use posekit_core::geom::corners_from_extent;
use posekit_core::pipeline::run_backend;
use posekit_core::{CameraIntrinsics, HeatmapStack};

use crate::config::RunConfig;
use crate::dataset::{self, split_seed, Split, SPLITS};
use crate::eval::{self, GroupingKind, Models, ScoringKind};
use crate::npk;
use crate::sweep;
use crate::train::{self, TrainPaths};

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    /// `key=value` overrides applied after the config file.
    pub set: Vec<String>,
    pub out: PathBuf,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("override {kv:?} is not key=value"))?;
            cfg.set(k, v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn prepare(&self, snapshot: &str) -> Result<RunConfig> {
        let cfg = self.resolve()?;
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        cfg.write_snapshot(&self.out.join(snapshot))?;
        Ok(cfg)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn split_gt(split: &Split) -> Result<Vec<[posekit_core::Vec2; posekit_core::NUM_CHANNELS]>> {
    split.records.iter().map(|r| r.gt_projections()).collect()
}

/// Generates the train/val/test splits and prints the baseline FPS on the
/// test split.
pub fn cmd_datagen(c: &Common) -> Result<()> {
    let cfg = c.prepare("config.txt")?;
    let sizes = [cfg.data.train, cfg.data.val, cfg.data.test];
    for (name, n) in SPLITS.iter().zip(sizes) {
        let t = Instant::now();
        dataset::write_split(&c.out.join(name), &cfg.scenario, split_seed(cfg.seed, name)?, n)?;
        println!("{name}: {n} scenes in {:.1} s", t.elapsed().as_secs_f64());
    }
    let test = Split::open(&c.out.join("test"))?;
    if !test.is_empty() {
        let fps = sweep::fps_of(None, &test.stacks()?, &split_gt(&test)?)?;
        println!("baseline max grouping FPS on test: {fps:.2} per hundred channels");
    }
    Ok(())
}

/// Checks every split of a dataset; errors if any problem is found.
pub fn cmd_validate(c: &Common, data: &Path) -> Result<()> {
    let cfg = c.resolve()?;
    let mut total = 0;
    for name in SPLITS {
        let dir = data.join(name);
        if !dir.exists() {
            continue;
        }
        let split = Split::open(&dir)?;
        let problems = dataset::validate_split(&split, &cfg.scenario)?;
        for p in &problems {
            println!("{name}: {p}");
        }
        println!("{name}: {} scenes, {} problems", split.len(), problems.len());
        total += problems.len();
    }
    ensure!(total == 0, "dataset has {total} problems");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TrainKind {
    Pgm,
    Corrnet,
}

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub kind: TrainKind,
    pub data: PathBuf,
    pub resume: bool,
    pub sweep: bool,
}

pub fn cmd_train(c: &Common, o: &TrainOpts) -> Result<()> {
    let report = |s: &str| println!("{s}");
    let train_split = Split::open(&o.data.join("train"))?;
    let val_dir = o.data.join("val");
    let val_split = if val_dir.exists() { Some(Split::open(&val_dir)?) } else { None };
    match (o.kind, o.sweep) {
        (TrainKind::Pgm, true) => {
            let cfg = c.prepare("sweep_config.txt")?;
            let plan = sweep::sweep_plan(&cfg);
            let limit = plan.iter().map(|e| e.samples).max().unwrap_or(0);
            let limit = if plan.iter().any(|e| e.samples == 0) { 0 } else { limit };
            let samples = train::pgm_samples(&train_split, &cfg, limit)?;
            let test = Split::open(&o.data.join("test"))?;
            let (rows, _) = sweep::run_sweep(&cfg, &plan, &samples, &test.stacks()?, &split_gt(&test)?, |r| {
                println!("{:<20} samples {:>6} epochs {:>3} FPS {:.2}", r.name, r.samples, r.epochs, r.fps)
            })?;
            write(&c.out.join("sweep_fps.csv"), &sweep::sweep_csv(&rows))?;
        }
        (TrainKind::Pgm, false) => {
            let cfg = c.prepare("pgm_config.txt")?;
            let train = train::pgm_samples(&train_split, &cfg, cfg.pgm_samples)?;
            let val = match &val_split {
                Some(s) => train::pgm_samples(s, &cfg, 0)?,
                None => Vec::new(),
            };
            let (_, s) = train::train_pgm(&cfg, &train, &val, &TrainPaths::new(&c.out, "pgm"), o.resume, report)?;
            println!("final train loss {}, validation loss {}", s.train_loss, s.val_loss);
        }
        (TrainKind::Corrnet, true) => bail!("--sweep applies to the grouping network only"),
        (TrainKind::Corrnet, false) => {
            let cfg = c.prepare("corrnet_config.txt")?;
            let train = train::corrnet_samples(&train_split, cfg.corrnet_samples)?;
            let val = match &val_split {
                Some(s) => train::corrnet_samples(s, 0)?,
                None => Vec::new(),
            };
            let (_, s) =
                train::train_corrnet(&cfg, &train, &val, &TrainPaths::new(&c.out, "corrnet"), o.resume, report)?;
            println!("final train loss {}, validation loss {}", s.train_loss, s.val_loss);
        }
    }
    Ok(())
}

/// Loads the networks the requested combinations need from `dir`.
pub fn load_models(dir: &Path, need_pgm: bool, need_corrnet: bool) -> Result<Models> {
    let load = |name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        ensure!(p.exists(), "missing model: {} not found", p.display());
        Ok(p)
    };
    Ok(Models {
        pgm: if need_pgm { Some(npk::load_pgm(&load("pgm.npk")?)?) } else { None },
        corrnet: if need_corrnet { Some(npk::load_corrnet(&load("corrnet.npk")?)?) } else { None },
    })
}

#[derive(Debug, Clone)]
pub struct EvalOpts {
    pub data: PathBuf,
    pub models: Option<PathBuf>,
    pub grouping: Option<GroupingKind>,
    pub scoring: Option<ScoringKind>,
}

/// Evaluates the selected grouping × scoring combinations on the test
/// split.
pub fn cmd_eval(c: &Common, o: &EvalOpts) -> Result<()> {
    let cfg = c.prepare("eval_config.txt")?;
    let groupings: Vec<GroupingKind> = match o.grouping {
        Some(g) => vec![g],
        None => vec![GroupingKind::Max, GroupingKind::Pgm],
    };
    let scorings: Vec<ScoringKind> = match o.scoring {
        Some(s) => vec![s],
        None => vec![ScoringKind::Ransac, ScoringKind::Corrnet],
    };
    let models = load_models(
        o.models.as_deref().unwrap_or(&c.out),
        groupings.contains(&GroupingKind::Pgm),
        scorings.contains(&ScoringKind::Corrnet),
    )?;
    let test = Split::open(&o.data.join("test"))?;
    let stacks = test.stacks()?;
    let gt = split_gt(&test)?;
    let params = cfg.pipeline_params();
    let (mut scenes, mut summary, mut curve) = (
        eval::SCENES_HEADER.to_string(),
        eval::SUMMARY_HEADER.to_string(),
        eval::CURVE_HEADER.to_string(),
    );
    println!(
        "{:<5} {:<8} {:>7} {:>8} {:>8} {:>8} {:>8}  mean ms (group/pool/score/solve/total)",
        "group", "score", "FPS", "2D@5px", "ADD", "AUC", "failed"
    );
    for g in &groupings {
        for s in &scorings {
            let outcomes = eval::evaluate(&test.records, &stacks, &models, *g, *s, &params)?;
            let sum = eval::summarize(*g, *s, &outcomes, &gt)?;
            let t = eval::mean_timings(&outcomes);
            println!(
                "{:<5} {:<8} {:>7.2} {:>8.4} {:>8.4} {:>8.4} {:>8}  {:.2}/{:.2}/{:.2}/{:.2}/{:.2}",
                g.name(),
                s.name(),
                sum.fps,
                sum.report.accuracy_2d,
                sum.report.accuracy_add,
                sum.report.auc_add,
                sum.failures,
                t.grouping_ms,
                t.pool_ms,
                t.scoring_ms,
                t.solve_ms,
                t.total_ms
            );
            scenes += &eval::scenes_csv_rows(*g, *s, &outcomes);
            summary += &eval::summary_csv_row(&sum);
            curve += &eval::curve_csv_rows(&sum);
        }
    }
    write(&c.out.join("eval_scenes.csv"), &scenes)?;
    write(&c.out.join("eval_summary.csv"), &summary)?;
    write(&c.out.join("eval_curve.csv"), &curve)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PoseOpts {
    pub stack: PathBuf,
    pub intrinsics: [f64; 4],
    pub extent: [f64; 3],
    pub models: Option<PathBuf>,
    pub grouping: GroupingKind,
    pub scoring: ScoringKind,
}

/// Estimates the pose of one stack and prints it.
pub fn cmd_pose(c: &Common, o: &PoseOpts) -> Result<()> {
    let cfg = c.resolve()?;
    let f = fs::File::open(&o.stack).with_context(|| format!("opening {}", o.stack.display()))?;
    let stack = HeatmapStack::read_from(std::io::BufReader::new(f))
        .with_context(|| format!("reading {}", o.stack.display()))?;
    let [fx, fy, cx, cy] = o.intrinsics;
    let k = CameraIntrinsics::new(fx, fy, cx, cy)?;
    let corners = corners_from_extent(o.extent[0], o.extent[1], o.extent[2])?;
    let models = load_models(
        o.models.as_deref().unwrap_or(&c.out),
        o.grouping == GroupingKind::Pgm,
        o.scoring == ScoringKind::Corrnet,
    )?;
    let g = match (&models.pgm, o.grouping) {
        (Some(m), GroupingKind::Pgm) => posekit_core::pipeline::Grouping::Pgm(m),
        _ => posekit_core::pipeline::Grouping::Max,
    };
    let s = match (&models.corrnet, o.scoring) {
        (Some(m), ScoringKind::Corrnet) => posekit_core::pipeline::Scoring::CorrNet(m),
        _ => posekit_core::pipeline::Scoring::Ransac,
    };
    let est = run_backend(&stack, &k, &corners, g, s, &cfg.pipeline_params())?;
    let r = est.pose.rotation;
    let t = est.pose.translation;
    for row in 0..3 {
        println!("R{row} {} {} {}", r[(row, 0)], r[(row, 1)], r[(row, 2)]);
    }
    println!("t {} {} {}", t.x, t.y, t.z);
    println!("mean_reprojection_px {}", est.mean_error_px);
    let tm = est.diagnostics.timings;
    println!(
        "timings_ms grouping {} pool {} scoring {} solve {} total {}",
        tm.grouping_ms, tm.pool_ms, tm.scoring_ms, tm.solve_ms, tm.total_ms
    );
    if est.diagnostics.fallback {
        println!("note: too few predicted inliers, RANSAC fallback used");
    }
    if est.diagnostics.pool_warning {
        println!("note: some channels had too few candidates and were resampled");
    }
    Ok(())
}
