//! On-disk datasets: per split a CSV manifest, one `HMS1` stack per scene
//! and a CSV dump of the labeled hypothesis pools.
//!
//! ```text
//! <out>/config.txt
//! <out>/<split>/manifest.csv
//! <out>/<split>/pools.csv
//! <out>/<split>/stacks/<id>.hms
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! loaded dataset is bit-identical to the generated one.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use posekit_core::datagen::{generate_scene, label, LabeledPool, LabeledScene, ScenarioParams};
use posekit_core::geom::{corners_from_extent, CornerSet};
use posekit_core::rng::derive_seed;
use posekit_core::{project, CameraIntrinsics, Correspondence2D3D, HeatmapStack, Pose, Vec2, Vec3, NUM_CHANNELS};
use rayon::prelude::*;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Scenes generated and written per parallel batch; bounds peak memory.
const WRITE_CHUNK: usize = 256;

/// Seed of a split, derived from the run seed and the split's position.
pub fn split_seed(seed: u64, split: &str) -> Result<u64> {
    let i = SPLITS
        .iter()
        .position(|s| *s == split)
        .with_context(|| format!("unknown split `{split}`"))?;
    Ok(derive_seed(seed, 0xDA7A, i as u64))
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: u64,
    pub seed: u64,
    pub pose: Pose,
    pub k: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    pub extent: [f64; 3],
    pub file: String,
}

impl SceneRecord {
    pub fn corners(&self) -> Result<CornerSet> {
        Ok(corners_from_extent(self.extent[0], self.extent[1], self.extent[2])?)
    }

    pub fn gt_projections(&self) -> Result<[Vec2; NUM_CHANNELS]> {
        let corners = self.corners()?;
        let mut out = [Vec2::zeros(); NUM_CHANNELS];
        for (c, o) in out.iter_mut().enumerate() {
            *o = project(&self.k, &self.pose, &corners.corner(c))?;
        }
        Ok(out)
    }
}

const MANIFEST_HEADER: [&str; 24] = [
    "scene_id", "seed", "r00", "r01", "r02", "tx", "r10", "r11", "r12", "ty", "r20", "r21", "r22", "tz", "fx", "fy",
    "cx", "cy", "width", "height", "dx", "dy", "dz", "file",
];

const POOL_HEADER: [&str; 9] = ["scene_id", "idx", "channel", "u", "v", "x", "y", "z", "label"];

/// A split directory opened for reading.
#[derive(Debug, Clone)]
pub struct Split {
    pub dir: PathBuf,
    pub records: Vec<SceneRecord>,
}

fn manifest_row(r: &SceneRecord) -> Vec<String> {
    let mut row = vec![r.id.to_string(), r.seed.to_string()];
    row.extend(r.pose.to_row_major().iter().map(f64::to_string));
    row.extend([r.k.fx, r.k.fy, r.k.cx, r.k.cy].iter().map(f64::to_string));
    row.push(r.width.to_string());
    row.push(r.height.to_string());
    row.extend(r.extent.iter().map(f64::to_string));
    row.push(r.file.clone());
    row
}

fn parse_manifest_row(row: &csv::StringRecord) -> Result<SceneRecord> {
    ensure!(row.len() == 24, "manifest row has {} fields, expected 24", row.len());
    let f = |i: usize| -> Result<f64> {
        row[i].parse().with_context(|| format!("bad number {:?} in column {}", &row[i], MANIFEST_HEADER[i]))
    };
    let mut pose = [0.0; 12];
    for (j, p) in pose.iter_mut().enumerate() {
        *p = f(2 + j)?;
    }
    Ok(SceneRecord {
        id: row[0].parse().context("bad scene_id")?,
        seed: row[1].parse().context("bad seed")?,
        pose: Pose::from_row_major(&pose)?,
        k: CameraIntrinsics::new(f(14)?, f(15)?, f(16)?, f(17)?)?,
        width: row[18].parse().context("bad width")?,
        height: row[19].parse().context("bad height")?,
        extent: [f(20)?, f(21)?, f(22)?],
        file: row[23].to_string(),
    })
}

fn stack_name(id: u64) -> String {
    format!("stacks/{id:06}.hms")
}

fn record_of(scene: &LabeledScene, params: &ScenarioParams, seed: u64, id: u64) -> SceneRecord {
    SceneRecord {
        id,
        seed,
        pose: scene.pose,
        k: scene.k,
        width: params.width,
        height: params.height,
        extent: scene.corners.extent(),
        file: stack_name(id),
    }
}

fn pool_rows(w: &mut csv::Writer<BufWriter<File>>, id: u64, pool: &LabeledPool) -> Result<()> {
    for (i, c) in pool.corrs.iter().enumerate() {
        w.write_record([
            id.to_string(),
            i.to_string(),
            pool.channels[i].to_string(),
            c.image.x.to_string(),
            c.image.y.to_string(),
            c.object.x.to_string(),
            c.object.y.to_string(),
            c.object.z.to_string(),
            u8::from(pool.labels[i]).to_string(),
        ])?;
    }
    Ok(())
}

/// Generates `n` scenes from `seed` into `dir`. Scenes are produced in
/// parallel and written in id order.
pub fn write_split(dir: &Path, params: &ScenarioParams, seed: u64, n: usize) -> Result<()> {
    fs::create_dir_all(dir.join("stacks")).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = csv::Writer::from_path(dir.join("manifest.csv"))?;
    manifest.write_record(MANIFEST_HEADER)?;
    let mut pools = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("pools.csv"))?));
    pools.write_record(POOL_HEADER)?;
    let ids: Vec<u64> = (0..n as u64).collect();
    for chunk in ids.chunks(WRITE_CHUNK) {
        let scenes = chunk
            .par_iter()
            .map(|id| generate_scene(params, seed, *id))
            .collect::<posekit_core::Result<Vec<_>>>()?;
        for (id, scene) in chunk.iter().zip(&scenes) {
            let rec = record_of(scene, params, seed, *id);
            let mut w = BufWriter::new(File::create(dir.join(&rec.file))?);
            scene.merged.write_to(&mut w)?;
            w.flush()?;
            manifest.write_record(manifest_row(&rec))?;
            pool_rows(&mut pools, *id, &scene.pool)?;
        }
    }
    manifest.flush()?;
    pools.flush()?;
    Ok(())
}

impl Split {
    pub fn open(dir: &Path) -> Result<Split> {
        let path = dir.join("manifest.csv");
        let mut r = csv::Reader::from_path(&path).with_context(|| format!("opening {}", path.display()))?;
        ensure!(
            r.headers()?.iter().eq(MANIFEST_HEADER.iter().copied()),
            "{} has an unexpected header",
            path.display()
        );
        let mut records = Vec::new();
        for (i, row) in r.records().enumerate() {
            let rec = parse_manifest_row(&row?).with_context(|| format!("{} row {}", path.display(), i + 1))?;
            records.push(rec);
        }
        Ok(Split {
            dir: dir.to_path_buf(),
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn stack(&self, i: usize) -> Result<HeatmapStack> {
        let path = self.dir.join(&self.records[i].file);
        let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        HeatmapStack::read_from(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
    }

    /// All stacks, loaded in parallel, in manifest order.
    pub fn stacks(&self) -> Result<Vec<HeatmapStack>> {
        (0..self.len()).into_par_iter().map(|i| self.stack(i)).collect()
    }

    /// Pools in manifest order.
    pub fn pools(&self) -> Result<Vec<LabeledPool>> {
        let path = self.dir.join("pools.csv");
        let mut r = csv::Reader::from_path(&path).with_context(|| format!("opening {}", path.display()))?;
        ensure!(
            r.headers()?.iter().eq(POOL_HEADER.iter().copied()),
            "{} has an unexpected header",
            path.display()
        );
        let index: std::collections::HashMap<u64, usize> =
            self.records.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
        let mut out: Vec<LabeledPool> = self
            .records
            .iter()
            .map(|_| LabeledPool {
                corrs: Vec::new(),
                labels: Vec::new(),
                channels: Vec::new(),
            })
            .collect();
        for (line, row) in r.records().enumerate() {
            let row = row?;
            let ctx = || format!("{} row {}", path.display(), line + 1);
            ensure!(row.len() == POOL_HEADER.len(), "{}: wrong field count", ctx());
            let num = |i: usize| -> Result<f64> { row[i].parse::<f64>().with_context(ctx) };
            let id: u64 = row[0].parse().with_context(ctx)?;
            let slot = *index.get(&id).with_context(|| format!("{}: scene {id} not in manifest", ctx()))?;
            let pool = &mut out[slot];
            let idx: usize = row[1].parse().with_context(ctx)?;
            ensure!(idx == pool.corrs.len(), "{}: pool rows out of order", ctx());
            let channel: usize = row[2].parse().with_context(ctx)?;
            ensure!(channel < NUM_CHANNELS, "{}: channel {channel} out of range", ctx());
            pool.corrs.push(Correspondence2D3D::new(
                Vec2::new(num(3)?, num(4)?),
                Vec3::new(num(5)?, num(6)?, num(7)?),
            ));
            pool.channels.push(channel);
            pool.labels.push(match &row[8] {
                "1" => true,
                "0" => false,
                other => bail!("{}: bad label {other:?}", ctx()),
            });
        }
        Ok(out)
    }
}

/// Problems found by [`validate_split`], one line each.
pub fn validate_split(split: &Split, params: &ScenarioParams) -> Result<Vec<String>> {
    let mut problems = Vec::new();
    let pools = split.pools()?;
    let mut ids = std::collections::HashSet::new();
    for (i, rec) in split.records.iter().enumerate() {
        let tag = format!("scene {}", rec.id);
        if !ids.insert(rec.id) {
            problems.push(format!("{tag}: duplicate id"));
        }
        let stack = match split.stack(i) {
            Ok(s) => s,
            Err(e) => {
                problems.push(format!("{tag}: {e:#}"));
                continue;
            }
        };
        if (stack.width(), stack.height()) != (rec.width, rec.height) {
            problems.push(format!("{tag}: stack size differs from manifest"));
        }
        for c in 0..NUM_CHANNELS {
            let m = stack.channel_max(c);
            if m > 0.0 && (m - 1.0).abs() > 1e-6 {
                problems.push(format!("{tag}: channel {c} maximum {m} is not 1"));
            }
        }
        let corners = rec.corners()?;
        for c in corners.corners() {
            let cam = rec.pose.transform(c);
            if cam.z <= 0.0 {
                problems.push(format!("{tag}: corner behind the camera"));
                continue;
            }
            let p = project(&rec.k, &rec.pose, c)?;
            if !(0.0..rec.width as f64).contains(&p.x) || !(0.0..rec.height as f64).contains(&p.y) {
                problems.push(format!("{tag}: corner projects outside the image"));
            }
        }
        let pool = &pools[i];
        if pool.len() != NUM_CHANNELS * params.pool.per_channel {
            problems.push(format!("{tag}: pool has {} hypotheses", pool.len()));
        }
        let wrong = pool
            .corrs
            .iter()
            .zip(&pool.labels)
            .filter(|(c, l)| label(&rec.k, &rec.pose, c) != **l)
            .count();
        if wrong > 0 {
            problems.push(format!("{tag}: {wrong} pool labels disagree with the inlier rule"));
        }
        // The manifest seed regenerates the scene exactly.
        let regen = generate_scene(params, rec.seed, rec.id)?;
        if regen.merged != stack || regen.pose != rec.pose || regen.pool.corrs != pool.corrs {
            problems.push(format!("{tag}: does not match regeneration from its seed"));
        }
    }
    Ok(problems)
}
