use std::path::{Path, PathBuf};
use std::process::ExitCode;

use eqbev::audit::audit;
use eqbev::config::RunConfig;
use eqbev::error::{Error, Result};
use eqbev::io::{
    format_detections, list_scenes, load_checkpoint, parse_detections, read_scene, save_checkpoint, to_fixed_json, write_report,
    write_scene,
};
use eqbev::metrics::{evaluate, NdsMode};
use eqbev::model::Detector;
use eqbev::plot::{bev_svg, heatmap_pgm};
use eqbev::scene::{generate_scene, Scene, SceneSpec};
use eqbev::train::{format_loss_log, train, TrainingSet};
use rayon::prelude::*;

use crate::{Cli, Cmd, Common};

/// Defaults, then the config file, then flags.
pub fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &c.config {
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
    }
    for kv in &c.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = c.seed {
        cfg.scene.seed = seed;
        cfg.model_seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.paths.out_dir = out.clone();
    }
    if let Some(jobs) = c.jobs {
        cfg.jobs = jobs;
    }
    if let Some(dir) = &c.scenes {
        cfg.paths.scene_dir = dir.clone();
    }
    if let Some(ckpt) = &c.checkpoint {
        cfg.paths.checkpoint = ckpt.clone();
    }
    Ok(cfg)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| Error::Config(e.to_string()))
}

fn load_scenes(dir: &Path, limit: Option<usize>) -> Result<Vec<(String, Scene)>> {
    let mut stems = list_scenes(dir)?;
    if stems.is_empty() {
        return Err(Error::Invalid(format!("no scene bundles in {}", dir.display())));
    }
    if let Some(n) = limit {
        stems.truncate(n);
    }
    stems.into_iter().map(|s| read_scene(dir, &s).map(|sc| (s, sc))).collect()
}

fn load_model(cfg: &RunConfig) -> Result<Detector> {
    load_checkpoint(&std::fs::read(&cfg.paths.checkpoint)?)
}

fn scene_stem(i: usize) -> String {
    format!("scene_{i:04}")
}

pub fn run(cli: &Cli) -> Result<ExitCode> {
    let mut cfg = resolve_config(&cli.common)?;
    match &cli.cmd {
        Cmd::Gen { n } => {
            if let Some(n) = n {
                cfg.n_scenes = *n;
            }
        }
        Cmd::Train { steps: Some(s) } => cfg.train.steps = *s,
        Cmd::Audit { random: true, plain: true, .. } => cfg.model.backbone.equivariant = false,
        _ => {}
    }
    if let Cmd::Audit { tolerance: Some(t), .. } = &cli.cmd {
        cfg.tolerance = *t;
    }
    cfg.validate()?;
    let out = cfg.paths.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.ini"), cfg.dump())?;
    let pool = pool(cfg.jobs)?;

    match &cli.cmd {
        Cmd::Gen { .. } => {
            let grid = cfg.model.grid;
            let scenes = pool.install(|| {
                (0..cfg.n_scenes)
                    .into_par_iter()
                    .map(|i| generate_scene(&SceneSpec { seed: cfg.scene.seed.wrapping_add(i as u64), ..cfg.scene.clone() }, &grid))
                    .collect::<Result<Vec<_>>>()
            })?;
            for (i, s) in scenes.iter().enumerate() {
                write_scene(&out, &scene_stem(i), s)?;
            }
            log::info!("wrote {} scenes to {}", scenes.len(), out.display());
        }
        Cmd::Train { .. } => {
            let scenes: Vec<Scene> = load_scenes(&cfg.paths.scene_dir, Some(cfg.n_scenes))?.into_iter().map(|(_, s)| s).collect();
            let mut model = Detector::new(&cfg.model, cfg.model_seed)?;
            let set = TrainingSet::new(&scenes, &model)?;
            let every = (cfg.train.steps / 20).max(1);
            let log = train(&mut model, &set, &cfg.train, |step, l| {
                if step % every == 0 || step + 1 == cfg.train.steps {
                    log::info!("step {step} loss {:.5} (heatmap {:.5})", l.total, l.heatmap);
                }
            })?;
            std::fs::write(out.join("model.ckpt"), save_checkpoint(&model))?;
            std::fs::write(out.join("loss.log"), format_loss_log(&log))?;
            log::info!("trained {} steps on {} scenes; checkpoint in {}", log.len(), scenes.len(), out.display());
        }
        Cmd::Detect => {
            let model = load_model(&cfg)?;
            let scenes = load_scenes(&cfg.paths.scene_dir, None)?;
            let dets = pool.install(|| {
                scenes.par_iter().map(|(_, s)| model.detect(&s.cloud, cfg.max_dets, cfg.score_thresh)).collect::<Result<Vec<_>>>()
            })?;
            for ((stem, _), d) in scenes.iter().zip(&dets) {
                std::fs::write(out.join(format!("{stem}.det.json")), format_detections(d))?;
            }
            log::info!("wrote detections for {} scenes to {}", scenes.len(), out.display());
        }
        Cmd::Eval { dets } => {
            let scenes = load_scenes(&cfg.paths.scene_dir, None)?;
            let preds = scenes
                .iter()
                .map(|(stem, _)| {
                    let p: PathBuf = dets.join(format!("{stem}.det.json"));
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))?;
                    parse_detections(&text)
                })
                .collect::<Result<Vec<_>>>()?;
            let gts: Vec<_> = scenes.iter().map(|(_, s)| s.gt.clone()).collect();
            let report = evaluate(&preds, &gts, cfg.model.n_classes, NdsMode::Reduced)?;
            write_report(&out, "eval", &report)?;
            print!("{}", report.table());
        }
        Cmd::Audit { random, .. } => {
            let model = if *random { Detector::new(&cfg.model, cfg.model_seed)? } else { load_model(&cfg)? };
            let scenes: Vec<Scene> = if cfg.paths.scene_dir.is_dir() {
                load_scenes(&cfg.paths.scene_dir, Some(cfg.n_scenes))?.into_iter().map(|(_, s)| s).collect()
            } else {
                (0..cfg.n_scenes)
                    .map(|i| generate_scene(&SceneSpec { seed: cfg.scene.seed.wrapping_add(i as u64), ..cfg.scene.clone() }, &model.cfg.grid))
                    .collect::<Result<_>>()?
            };
            let report = audit(&model, &scenes, cfg.tolerance, cfg.sweep_step_deg, cfg.max_dets, cfg.score_thresh)?;
            std::fs::write(out.join("audit.json"), to_fixed_json(&report)?)?;
            std::fs::write(out.join("audit.txt"), report.table())?;
            print!("{}", report.table());
            if !report.passed {
                return Ok(ExitCode::from(2));
            }
        }
        Cmd::Plot { scene, dets } => {
            let sc = read_scene(&cfg.paths.scene_dir, scene)?;
            let boxes = match dets {
                Some(d) => parse_detections(&std::fs::read_to_string(d.join(format!("{scene}.det.json")))?)?,
                None => Vec::new(),
            };
            let mut grid = cfg.model.grid;
            if cfg.paths.checkpoint.is_file() {
                let model = load_model(&cfg)?;
                grid = model.cfg.grid;
                let heat = model.predict(&sc.cloud)?.heatmap;
                for c in 0..heat.dim(1) {
                    std::fs::write(out.join(format!("{scene}.heat{c}.pgm")), heatmap_pgm(&heat, 0, c)?)?;
                }
            }
            std::fs::write(out.join(format!("{scene}.svg")), bev_svg(&sc.cloud, &sc.gt, &boxes, &grid))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
