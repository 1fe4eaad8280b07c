use std::path::Path;
use std::process::{Command, Output};

use posekit_cli::commands::{self, Common, EvalOpts, TrainKind, TrainOpts};
use posekit_cli::config::RunConfig;
use posekit_cli::dataset::Split;
use posekit_cli::eval::{self, GroupingKind, Models, ScoringKind};
use posekit_cli::npk;
use posekit_cli::train::{self, TrainPaths};
use posekit_core::datagen::gt_stack;
use posekit_core::geom::corners_from_extent;
use posekit_core::{project, CameraIntrinsics, Pose, Vec2, Vec3};

const SMALL: &str = "\
data.train = 24
data.val = 6
data.test = 12
pg.hidden = 32
pg.resolution = 16,16
pg.epochs = 2
pg.batch = 8
pg.samples = 0
cn.width = 16
cn.blocks = 1
cn.epochs = 2
cn.warmup = 1
cn.samples = 0
";

fn posekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posekit"))
        .args(args)
        .env_remove("POSEKIT_THREADS")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn common(dir: &Path, cfg: &Path, set: &[&str]) -> Common {
    Common {
        config: Some(cfg.to_path_buf()),
        seed: Some(7),
        set: set.iter().map(|s| s.to_string()).collect(),
        out: dir.to_path_buf(),
    }
}

fn small_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("small.cfg");
    std::fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn datagen_is_reproducible_and_valid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "data.train = 100\n");
    let cfg = cfg.to_str().unwrap();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let text = ok(&posekit(&["--config", cfg, "--seed", "7", "--out", out.to_str().unwrap(), "datagen"]));
        assert!(text.contains("train: 100 scenes"), "{text}");
        assert!(text.contains("baseline max grouping FPS"), "{text}");
    }
    let a = read_tree(&tmp.path().join("a"));
    assert_eq!(a, read_tree(&tmp.path().join("b")));
    let split = Split::open(&tmp.path().join("a/train")).unwrap();
    assert_eq!(split.len(), 100);
    let manifest = std::fs::read_to_string(tmp.path().join("a/train/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 101);
    let out = tmp.path().join("a");
    let text = ok(&posekit(&["--config", cfg, "--seed", "7", "--out", out.to_str().unwrap(), "validate"]));
    assert!(text.contains("train: 100 scenes, 0 problems"), "{text}");
    let snapshot = RunConfig::load(&out.join("config.txt")).unwrap();
    assert_eq!(snapshot.seed, 7);
    assert_eq!(snapshot.data.train, 100);
}

#[test]
fn unknown_config_key_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "pg.hiden = 3\n");
    let out = posekit(&["--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "datagen"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key `pg.hiden`"));
}

#[test]
fn thread_env_is_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let out = Command::new(env!("CARGO_BIN_EXE_posekit"))
        .args(["--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "datagen"])
        .env("POSEKIT_THREADS", "many")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("POSEKIT_THREADS"));
    let out = Command::new(env!("CARGO_BIN_EXE_posekit"))
        .args(["--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "datagen"])
        .env("POSEKIT_THREADS", "2")
        .output()
        .unwrap();
    ok(&out);
}

#[test]
fn trained_models_round_trip_and_resume_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = small_config(tmp.path(), "");
    let data = tmp.path().join("data");
    commands::cmd_datagen(&common(&data, &cfg_path, &[])).unwrap();
    let cfg = common(&data, &cfg_path, &[]).resolve().unwrap();
    let split = Split::open(&data.join("train")).unwrap();
    let samples = train::pgm_samples(&split, &cfg, 0).unwrap();

    // in-memory model vs the one loaded from disk
    let full = tmp.path().join("full");
    std::fs::create_dir_all(&full).unwrap();
    let (model, summary) = train::train_pgm(&cfg, &samples, &[], &TrainPaths::new(&full, "pgm"), false, |_| {}).unwrap();
    assert_eq!(summary.epochs, 2);
    let loaded = npk::load_pgm(&full.join("pgm.npk")).unwrap();
    let test = Split::open(&data.join("test")).unwrap();
    let stacks = test.stacks().unwrap();
    let params = cfg.pipeline_params();
    let run = |m| {
        let models = Models { pgm: Some(m), corrnet: None };
        eval::evaluate(&test.records, &stacks, &models, GroupingKind::Pgm, ScoringKind::Ransac, &params).unwrap()
    };
    let (a, b) = (run(model), run(loaded));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.errors, x.selection), (y.errors, y.selection));
    }
    let curve = std::fs::read_to_string(full.join("pgm_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 2, "{curve}");

    // one epoch, then resume to two: same bytes as training straight through
    let part = tmp.path().join("part");
    std::fs::create_dir_all(&part).unwrap();
    let mut one = cfg.clone();
    one.pgm_train.epochs = 1;
    train::train_pgm(&one, &samples, &[], &TrainPaths::new(&part, "pgm"), false, |_| {}).unwrap();
    train::train_pgm(&cfg, &samples, &[], &TrainPaths::new(&part, "pgm"), true, |_| {}).unwrap();
    for f in ["pgm.npk", "pgm.ckpt", "pgm_curve.csv"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(part.join(f)).unwrap(), "{f}");
    }

    // resuming under a different learning rate is refused
    let mut other = cfg.clone();
    other.pgm_train.learning_rate = 0.5;
    other.pgm_train.epochs = 3;
    assert!(train::train_pgm(&other, &samples, &[], &TrainPaths::new(&part, "pgm"), true, |_| {}).is_err());
}

#[test]
fn corrnet_resume_matches_straight_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = small_config(tmp.path(), "cn.epochs = 3\n");
    let data = tmp.path().join("data");
    commands::cmd_datagen(&common(&data, &cfg_path, &[])).unwrap();
    let cfg = common(&data, &cfg_path, &[]).resolve().unwrap();
    let samples = train::corrnet_samples(&Split::open(&data.join("train")).unwrap(), 0).unwrap();
    let val = train::corrnet_samples(&Split::open(&data.join("val")).unwrap(), 0).unwrap();
    let (full, part) = (tmp.path().join("full"), tmp.path().join("part"));
    for d in [&full, &part] {
        std::fs::create_dir_all(d).unwrap();
    }
    train::train_corrnet(&cfg, &samples, &val, &TrainPaths::new(&full, "corrnet"), false, |_| {}).unwrap();
    let mut two = cfg.clone();
    two.corrnet_train.epochs = 2;
    train::train_corrnet(&two, &samples, &val, &TrainPaths::new(&part, "corrnet"), false, |_| {}).unwrap();
    let (_, s) = train::train_corrnet(&cfg, &samples, &val, &TrainPaths::new(&part, "corrnet"), true, |_| {}).unwrap();
    assert!(s.val_loss.is_finite());
    for f in ["corrnet.npk", "corrnet_curve.csv"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(part.join(f)).unwrap(), "{f}");
    }
    let curve = std::fs::read_to_string(full.join("corrnet_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
}

#[test]
fn clean_split_is_solved_by_every_combination() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = "scene.max_decoys = 0\nscene.occlusion_prob = 0\npool.noise_sigma = 0,0\npool.outlier_fraction = 0,0\n";
    let cfg_path = small_config(tmp.path(), clean);
    let dir = tmp.path().join("run");
    let c = common(&dir, &cfg_path, &[]);
    commands::cmd_datagen(&c).unwrap();
    for kind in [TrainKind::Pgm, TrainKind::Corrnet] {
        let o = TrainOpts {
            kind,
            data: dir.clone(),
            resume: false,
            sweep: false,
        };
        commands::cmd_train(&c, &o).unwrap();
    }
    let opts = EvalOpts {
        data: dir.clone(),
        models: None,
        grouping: None,
        scoring: None,
    };
    commands::cmd_eval(&c, &opts).unwrap();
    let summary = std::fs::read_to_string(dir.join("eval_summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 4, "{summary}");
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[4], "1", "2D accuracy of {}+{}: {row}", f[0], f[1]);
    }
    let curve = std::fs::read_to_string(dir.join("eval_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 4 * 51);
    let scenes = std::fs::read_to_string(dir.join("eval_scenes.csv")).unwrap();
    assert_eq!(scenes.lines().count(), 1 + 4 * 12);

    // the ablation flags restrict the grid
    let only = EvalOpts {
        grouping: Some(GroupingKind::Max),
        scoring: Some(ScoringKind::Corrnet),
        ..opts
    };
    commands::cmd_eval(&c, &only).unwrap();
    let summary = std::fs::read_to_string(dir.join("eval_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    assert!(summary.lines().nth(1).unwrap().starts_with("max,corrnet,"));
}

#[test]
fn eval_without_models_reports_missing_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let dir = tmp.path().join("run");
    let d = dir.to_str().unwrap();
    ok(&posekit(&["--config", cfg.to_str().unwrap(), "--out", d, "datagen"]));
    let out = posekit(&["--config", cfg.to_str().unwrap(), "--out", d, "eval"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing model"));
    let text = ok(&posekit(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        d,
        "eval",
        "--grouping",
        "max",
        "--scoring",
        "ransac",
    ]));
    assert!(text.contains("max   ransac"), "{text}");
}

/// Box and camera chosen so every corner projects onto an integer pixel.
fn integer_scene(dir: &Path) -> (std::path::PathBuf, Pose) {
    let k = CameraIntrinsics::new(480.0, 480.0, 80.0, 80.0).unwrap();
    let corners = corners_from_extent(0.2, 0.1, 0.4).unwrap();
    let pose = Pose::from_translation(Vec3::new(0.0, 0.0, 1.0));
    let pts: [Vec2; 8] = std::array::from_fn(|i| project(&k, &pose, &corners.corner(i)).unwrap());
    for p in &pts {
        assert_eq!(p.x, p.x.round());
        assert_eq!(p.y, p.y.round());
    }
    let path = dir.join("gt.hms");
    gt_stack(&pts, 160, 160, 2.0).write_to(std::fs::File::create(&path).unwrap()).unwrap();
    (path, pose)
}

fn pose_args<'a>(stack: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "--out",
        out,
        "--set",
        "backend.radius=0",
        "pose",
        "--stack",
        stack,
        "--intrinsics",
        "480,480,80,80",
        "--extent",
        "0.2,0.1,0.4",
        "--grouping",
        "max",
        "--scoring",
        "ransac",
    ]
}

#[test]
fn pose_on_gt_stack_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let (stack, pose) = integer_scene(tmp.path());
    let text = ok(&posekit(&pose_args(stack.to_str().unwrap(), tmp.path().to_str().unwrap())));
    let nums = |prefix: &str| -> Vec<f64> {
        let line = text.lines().find(|l| l.starts_with(prefix)).unwrap();
        line.split_whitespace().filter_map(|w| w.parse().ok()).collect()
    };
    let t = nums("t ");
    assert!((Vec3::new(t[0], t[1], t[2]) - pose.translation).norm() < 1e-9, "{text}");
    for r in 0..3 {
        let row = nums(&format!("R{r} "));
        // the prefix digit parses too
        let row = &row[row.len() - 3..];
        for c in 0..3 {
            assert!((row[c] - pose.rotation[(r, c)]).abs() < 1e-9, "{text}");
        }
    }
    assert!(nums("mean_reprojection_px")[0] < 1e-6);
    // stage timings add up to the total within 10%
    let tm = nums("timings_ms");
    let (sum, total) = (tm[0] + tm[1] + tm[2] + tm[3], tm[4]);
    assert!(sum <= total * 1.0001 && sum >= 0.9 * total, "{tm:?}");
}

#[test]
fn pose_rejects_corrupted_stack() {
    let tmp = tempfile::tempdir().unwrap();
    let (stack, _) = integer_scene(tmp.path());
    let mut bytes = std::fs::read(&stack).unwrap();
    bytes[..4].copy_from_slice(b"HMS0");
    std::fs::write(&stack, bytes).unwrap();
    let out = posekit(&pose_args(stack.to_str().unwrap(), tmp.path().to_str().unwrap()));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn pose_fails_with_nonzero_exit_on_empty_stack() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("empty.hms");
    posekit_core::HeatmapStack::zeros(32, 32).write_to(std::fs::File::create(&path).unwrap()).unwrap();
    let out = posekit(&pose_args(path.to_str().unwrap(), tmp.path().to_str().unwrap()));
    assert!(!out.status.success());
}
