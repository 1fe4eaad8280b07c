//! Line-oriented `key = value` run configuration.
//!
//! Every key has a default; a config file only lists what it changes.
//! Unknown keys are rejected so that a typo cannot silently fall back to a
//! default. [`RunConfig::snapshot`] renders every key and is written next to
//! every output so a run can be repeated from its own directory.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use posekit_core::corrnet::{CorrNetConfig, CorrNetTrainParams};
use posekit_core::datagen::{PoolVariant, ScenarioParams};
use posekit_core::pgm::{PgmConfig, PgmTrainParams};
use posekit_core::pipeline::PipelineParams;

/// Scene counts per dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Budget for the non-headline grouping networks of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepBudget {
    pub train: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: ScenarioParams,
    pub data: DataSizes,
    pub pgm: PgmConfig,
    pub pgm_train: PgmTrainParams,
    /// Training scenes used for the grouping network, from the start of
    /// the train split; 0 uses the whole split.
    pub pgm_samples: usize,
    pub sweep: SweepBudget,
    pub corrnet: CorrNetConfig,
    pub corrnet_train: CorrNetTrainParams,
    pub corrnet_samples: usize,
    pub pipeline: PipelineParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            scenario: ScenarioParams::default(),
            data: DataSizes {
                train: 20_000,
                val: 500,
                test: 2_000,
            },
            pgm: PgmConfig::default(),
            pgm_train: PgmTrainParams {
                epochs: 5,
                ..PgmTrainParams::default()
            },
            pgm_samples: 2_000,
            sweep: SweepBudget {
                train: 1_000,
                epochs: 4,
            },
            corrnet: CorrNetConfig::default(),
            corrnet_train: CorrNetTrainParams {
                epochs: 6,
                ..CorrNetTrainParams::default()
            },
            corrnet_samples: 1_000,
            pipeline: PipelineParams::default(),
        }
    }
}

trait ConfigValue: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(u64, usize, f64, f32, bool);

fn split_list<T: ConfigValue>(s: &str, n: usize) -> Option<Vec<T>> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != n {
        return None;
    }
    parts.into_iter().map(T::parse).collect()
}

impl<T: ConfigValue + Copy> ConfigValue for (T, T) {
    fn parse(s: &str) -> Option<Self> {
        split_list::<T>(s, 2).map(|v| (v[0], v[1]))
    }
    fn render(&self) -> String {
        format!("{},{}", self.0.render(), self.1.render())
    }
}

impl ConfigValue for [f64; 3] {
    fn parse(s: &str) -> Option<Self> {
        split_list::<f64>(s, 3).map(|v| [v[0], v[1], v[2]])
    }
    fn render(&self) -> String {
        format!("{},{},{}", self[0], self[1], self[2])
    }
}

impl ConfigValue for PoolVariant {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "consistent" => Some(PoolVariant::Consistent),
            "independent" => Some(PoolVariant::Independent),
            _ => None,
        }
    }
    fn render(&self) -> String {
        match self {
            PoolVariant::Consistent => "consistent",
            PoolVariant::Independent => "independent",
        }
        .into()
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+;)*) => {
        /// Every recognized key, in snapshot order.
        pub const KEYS: &[&str] = &[$($key),*];

        fn set_key(c: &mut RunConfig, key: &str, value: &str) -> Result<()> {
            match key {
                $($key => {
                    c.$($field).+ = ConfigValue::parse(value)
                        .with_context(|| format!("bad value {value:?} for `{key}`"))?;
                })*
                _ => bail!("unknown config key `{key}`"),
            }
            Ok(())
        }

        fn get_key(c: &RunConfig, key: &str) -> Option<String> {
            match key {
                $($key => Some(c.$($field).+.render()),)*
                _ => None,
            }
        }
    };
}

keys! {
    "seed" => seed;
    "scene.width" => scenario.width;
    "scene.height" => scenario.height;
    "scene.fx" => scenario.fx;
    "scene.fy" => scenario.fy;
    "scene.cx" => scenario.cx;
    "scene.cy" => scenario.cy;
    "scene.extent" => scenario.extent;
    "scene.radius" => scenario.radius;
    "scene.roll" => scenario.roll;
    "scene.margin_px" => scenario.margin_px;
    "scene.gt_sigma" => scenario.gt_sigma;
    "scene.gt_confidence" => scenario.gt_confidence;
    "scene.max_decoys" => scenario.max_decoys;
    "scene.decoy_confidence" => scenario.decoy_confidence;
    "scene.decoy_min_distance" => scenario.decoy_min_distance;
    "scene.occlusion_prob" => scenario.occlusion_prob;
    "pool.per_channel" => scenario.pool.per_channel;
    "pool.noise_sigma" => scenario.pool.noise_sigma;
    "pool.outlier_fraction" => scenario.pool.outlier_fraction;
    "pool.displacement_prob" => scenario.pool.displacement_prob;
    "pool.displacement_min_distance" => scenario.pool.displacement_min_distance;
    "pool.variant" => scenario.pool.variant;
    "data.train" => data.train;
    "data.val" => data.val;
    "data.test" => data.test;
    "pg.layers" => pgm.layers;
    "pg.hidden" => pgm.hidden;
    "pg.shortcut" => pgm.shortcut;
    "pg.dropout" => pgm.dropout;
    "pg.resolution" => pgm.resolution;
    "pg.epochs" => pgm_train.epochs;
    "pg.batch" => pgm_train.batch_size;
    "pg.lr" => pgm_train.learning_rate;
    "pg.samples" => pgm_samples;
    "sweep.train" => sweep.train;
    "sweep.epochs" => sweep.epochs;
    "cn.width" => corrnet.width;
    "cn.blocks" => corrnet.blocks;
    "cn.epochs" => corrnet_train.epochs;
    "cn.batch" => corrnet_train.batch_size;
    "cn.lr" => corrnet_train.learning_rate;
    "cn.alpha" => corrnet_train.alpha;
    "cn.beta" => corrnet_train.beta;
    "cn.warmup" => corrnet_train.geo_warmup_epochs;
    "cn.samples" => corrnet_samples;
    "backend.radius" => pipeline.sampling.radius;
    "backend.per_channel" => pipeline.sampling.per_channel;
    "backend.floor" => pipeline.sampling.confidence_floor;
    "backend.filter_radius" => pipeline.filter_radius;
    "ransac.iterations" => pipeline.ransac.iterations;
    "ransac.threshold" => pipeline.ransac.inlier_threshold_px;
}

impl RunConfig {
    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        set_key(self, key.trim(), value.trim())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        get_key(self, key)
    }

    /// Apply every line of a config text on top of `self`. Blank lines and
    /// `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected `key = value`, got {raw:?}", i + 1))?;
            self.set(k, v).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        RunConfig::from_text(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.pgm.validate()?;
        self.pipeline.sampling.validate()?;
        if self.corrnet.width == 0 {
            bail!("cn.width must be positive");
        }
        if self.pgm_train.batch_size == 0 || self.corrnet_train.batch_size == 0 {
            bail!("batch sizes must be positive");
        }
        if self.pipeline.ransac.iterations == 0 {
            bail!("ransac.iterations must be positive");
        }
        Ok(())
    }

    /// Every key with its resolved value.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", get_key(self, k).expect("listed key"));
        }
        out
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.snapshot())
            .with_context(|| format!("writing config snapshot {}", path.display()))
    }

    /// Training parameters for the grouping network, seeded from the run seed.
    pub fn pgm_train_params(&self) -> PgmTrainParams {
        PgmTrainParams {
            seed: posekit_core::rng::derive_seed(self.seed, 0x96, 0),
            ..self.pgm_train
        }
    }

    pub fn corrnet_train_params(&self) -> CorrNetTrainParams {
        CorrNetTrainParams {
            seed: posekit_core::rng::derive_seed(self.seed, 0xC4, 0),
            ..self.corrnet_train
        }
    }

    /// Pipeline parameters seeded from the run seed.
    pub fn pipeline_params(&self) -> PipelineParams {
        PipelineParams {
            seed: posekit_core::rng::derive_seed(self.seed, 0xE7, 0),
            ..self.pipeline
        }
    }
}
