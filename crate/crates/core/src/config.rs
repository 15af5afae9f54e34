//! Run configuration: a sectioned `key = value` file layered over defaults, with
//! command-line overrides applied last. Unknown sections and keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ini::Ini;

use crate::backbone::PoolMode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pillar::GridConfig;
use crate::scene::SceneSpec;
use crate::targets::DEFAULT_MAX_DETS;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub scene_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneSpec,
    /// Number of scenes written by `gen` and used for training.
    pub n_scenes: usize,
    pub model_seed: u64,
    pub score_thresh: f64,
    pub max_dets: usize,
    /// Residual bound for the equivariance audit.
    pub tolerance: f64,
    pub sweep_step_deg: f64,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths { scene_dir: "scenes".into(), checkpoint: "model.ckpt".into(), out_dir: "out".into() },
            model: ModelConfig::smoke(),
            train: TrainConfig::default(),
            scene: SceneSpec::default(),
            n_scenes: 8,
            model_seed: 7,
            score_thresh: 0.1,
            max_dets: DEFAULT_MAX_DETS,
            tolerance: 1e-5,
            sweep_step_deg: 10.0,
            jobs: 1,
        }
    }
}

/// Every accepted `section.key`, in dump order.
pub const KEYS: &[&str] = &[
    "paths.scene_dir",
    "paths.checkpoint",
    "paths.out_dir",
    "grid.half_extent",
    "grid.pillar_size",
    "grid.z_min",
    "grid.z_max",
    "encoder.rbf_count",
    "encoder.rbf_max",
    "encoder.hidden",
    "encoder.rounds",
    "backbone.widths",
    "backbone.kernel_size",
    "backbone.equivariant",
    "backbone.pool",
    "head.hidden",
    "head.n_classes",
    "train.steps",
    "train.lr",
    "train.momentum",
    "train.clip_norm",
    "train.n_scenes",
    "train.model_seed",
    "scene.seed",
    "scene.n_boxes_min",
    "scene.n_boxes_max",
    "scene.class_weights",
    "scene.size_jitter",
    "scene.point_density",
    "scene.clutter_density",
    "scene.noise_sigma",
    "scene.min_gap",
    "eval.score_thresh",
    "eval.max_dets",
    "audit.tolerance",
    "audit.sweep_step_deg",
    "run.jobs",
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
    let items = v.split(',').map(|s| parse::<T>(key, s)).collect::<Result<Vec<T>>>()?;
    let n = items.len();
    items.try_into().map_err(|_| Error::Config(format!("{key}: expected {N} comma-separated values, got {n}")))
}

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    /// Sets one `section.key` from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let g = m.grid;
        let regrid = |half: f64, ps: f64, z: (f64, f64)| GridConfig::centered(half, ps, z).map_err(|e| Error::Config(format!("{key}: {e}")));
        match key {
            "paths.scene_dir" => self.paths.scene_dir = v.trim().into(),
            "paths.checkpoint" => self.paths.checkpoint = v.trim().into(),
            "paths.out_dir" => self.paths.out_dir = v.trim().into(),
            "grid.half_extent" => m.grid = regrid(parse(key, v)?, g.pillar_size, g.z_range)?,
            "grid.pillar_size" => m.grid = regrid(g.x_range.1, parse(key, v)?, g.z_range)?,
            "grid.z_min" => m.grid = regrid(g.x_range.1, g.pillar_size, (parse(key, v)?, g.z_range.1))?,
            "grid.z_max" => m.grid = regrid(g.x_range.1, g.pillar_size, (g.z_range.0, parse(key, v)?))?,
            "encoder.rbf_count" => m.rbf_count = parse(key, v)?,
            "encoder.rbf_max" => m.rbf_max = parse(key, v)?,
            "encoder.hidden" => m.encoder_hidden = parse(key, v)?,
            "encoder.rounds" => m.encoder_rounds = parse(key, v)?,
            "backbone.widths" => m.backbone.widths = parse_list(key, v)?,
            "backbone.kernel_size" => m.backbone.kernel_size = parse(key, v)?,
            "backbone.equivariant" => m.backbone.equivariant = parse(key, v)?,
            "backbone.pool" => {
                m.backbone.pool = match v.trim() {
                    "max" => PoolMode::Max,
                    "mean" => PoolMode::Mean,
                    other => return Err(Error::Config(format!("{key}: expected max or mean, got {other:?}"))),
                }
            }
            "head.hidden" => m.head_hidden = parse(key, v)?,
            "head.n_classes" => m.n_classes = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.momentum" => self.train.momentum = parse(key, v)?,
            "train.clip_norm" => self.train.clip_norm = parse(key, v)?,
            "train.n_scenes" => self.n_scenes = parse(key, v)?,
            "train.model_seed" => self.model_seed = parse(key, v)?,
            "scene.seed" => self.scene.seed = parse(key, v)?,
            "scene.n_boxes_min" => self.scene.n_boxes.0 = parse(key, v)?,
            "scene.n_boxes_max" => self.scene.n_boxes.1 = parse(key, v)?,
            "scene.class_weights" => self.scene.class_weights = parse_list(key, v)?,
            "scene.size_jitter" => self.scene.size_jitter = parse(key, v)?,
            "scene.point_density" => self.scene.point_density = parse(key, v)?,
            "scene.clutter_density" => self.scene.clutter_density = parse(key, v)?,
            "scene.noise_sigma" => self.scene.noise_sigma = parse(key, v)?,
            "scene.min_gap" => self.scene.min_gap = parse(key, v)?,
            "eval.score_thresh" => self.score_thresh = parse(key, v)?,
            "eval.max_dets" => self.max_dets = parse(key, v)?,
            "audit.tolerance" => self.tolerance = parse(key, v)?,
            "audit.sweep_step_deg" => self.sweep_step_deg = parse(key, v)?,
            "run.jobs" => self.jobs = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Text form of one key, as accepted by [`set`](Self::set).
    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let list = |v: &[String]| v.join(", ");
        Some(match key {
            "paths.scene_dir" => self.paths.scene_dir.display().to_string(),
            "paths.checkpoint" => self.paths.checkpoint.display().to_string(),
            "paths.out_dir" => self.paths.out_dir.display().to_string(),
            "grid.half_extent" => fmt_f(m.grid.x_range.1),
            "grid.pillar_size" => fmt_f(m.grid.pillar_size),
            "grid.z_min" => fmt_f(m.grid.z_range.0),
            "grid.z_max" => fmt_f(m.grid.z_range.1),
            "encoder.rbf_count" => m.rbf_count.to_string(),
            "encoder.rbf_max" => fmt_f(m.rbf_max),
            "encoder.hidden" => m.encoder_hidden.to_string(),
            "encoder.rounds" => m.encoder_rounds.to_string(),
            "backbone.widths" => list(&m.backbone.widths.map(|w| w.to_string())),
            "backbone.kernel_size" => m.backbone.kernel_size.to_string(),
            "backbone.equivariant" => m.backbone.equivariant.to_string(),
            "backbone.pool" => match m.backbone.pool {
                PoolMode::Max => "max".into(),
                PoolMode::Mean => "mean".into(),
            },
            "head.hidden" => m.head_hidden.to_string(),
            "head.n_classes" => m.n_classes.to_string(),
            "train.steps" => self.train.steps.to_string(),
            "train.lr" => fmt_f(self.train.lr),
            "train.momentum" => fmt_f(self.train.momentum),
            "train.clip_norm" => fmt_f(self.train.clip_norm),
            "train.n_scenes" => self.n_scenes.to_string(),
            "train.model_seed" => self.model_seed.to_string(),
            "scene.seed" => self.scene.seed.to_string(),
            "scene.n_boxes_min" => self.scene.n_boxes.0.to_string(),
            "scene.n_boxes_max" => self.scene.n_boxes.1.to_string(),
            "scene.class_weights" => list(&self.scene.class_weights.map(fmt_f)),
            "scene.size_jitter" => fmt_f(self.scene.size_jitter),
            "scene.point_density" => fmt_f(self.scene.point_density),
            "scene.clutter_density" => fmt_f(self.scene.clutter_density),
            "scene.noise_sigma" => fmt_f(self.scene.noise_sigma),
            "scene.min_gap" => fmt_f(self.scene.min_gap),
            "eval.score_thresh" => fmt_f(self.score_thresh),
            "eval.max_dets" => self.max_dets.to_string(),
            "audit.tolerance" => fmt_f(self.tolerance),
            "audit.sweep_step_deg" => fmt_f(self.sweep_step_deg),
            "run.jobs" => self.jobs.to_string(),
            _ => return None,
        })
    }

    /// Applies every entry of a config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(Error::Config(format!("key {k:?} outside any section")));
                }
                continue;
            };
            for (k, v) in props.iter() {
                self.set(&format!("{section}.{k}"), v)?;
            }
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(&std::fs::read_to_string(path)?)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        if self.n_scenes == 0 || self.jobs == 0 {
            return Err(Error::Config("train.n_scenes and run.jobs must be positive".into()));
        }
        if !(self.sweep_step_deg > 0.0) || !(self.tolerance > 0.0) {
            return Err(Error::Config("audit.sweep_step_deg and audit.tolerance must be positive".into()));
        }
        Ok(())
    }

    /// Full configuration in the file format, every key present.
    pub fn dump(&self) -> String {
        self.dump_sections(|_| true)
    }

    /// Only the sections that define the network, as stored in checkpoints.
    pub fn dump_model(&self) -> String {
        self.dump_sections(|s| matches!(s, "grid" | "encoder" | "backbone" | "head"))
    }

    fn dump_sections(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut out = String::new();
        let mut current = "";
        for key in KEYS {
            let (section, name) = key.split_once('.').expect("dotted key");
            if !keep(section) {
                continue;
            }
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = section;
            }
            let _ = writeln!(out, "{name} = {}", self.get(key).expect("listed key"));
        }
        out
    }
}
