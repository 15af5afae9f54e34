//! Full-batch training with momentum SGD.

use crate::backbone::BnMode;
use crate::boxes::OrientedBox;
use crate::error::{Error, Result};
use crate::model::{Detector, PreparedScene};
use crate::params::Parameterized;
use crate::scene::Scene;
use crate::targets::{detection_loss_with_grad, render_targets, LossBreakdown, TargetMaps};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm cap; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 0.02, momentum: 0.9, clip_norm: 5.0 }
    }
}

/// Fixed scenes with their pillars and targets, prepared once.
pub struct TrainingSet {
    pub scenes: Vec<PreparedScene>,
    pub gt: Vec<Vec<OrientedBox>>,
    pub targets: TargetMaps,
}

impl TrainingSet {
    pub fn new(scenes: &[Scene], model: &Detector) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Invalid("empty training set".into()));
        }
        let grid = &model.cfg.grid;
        let targets = TargetMaps::stack(
            &scenes.iter().map(|s| render_targets(&s.gt, grid, model.cfg.n_classes)).collect::<Vec<_>>(),
        )?;
        Ok(Self {
            scenes: scenes.iter().map(|s| PreparedScene::new(s.cloud.clone(), grid)).collect(),
            gt: scenes.iter().map(|s| s.gt.clone()).collect(),
            targets,
        })
    }
}

/// Momentum buffer over the flattened parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    pub velocity: Vec<f64>,
    pub momentum: f64,
}

impl Momentum {
    pub fn new(model: &Detector, momentum: f64) -> Self {
        Self { velocity: vec![0.0; model.num_params()], momentum }
    }
}

/// Forward, loss, backward, clipped momentum update. Returns the loss before the update.
pub fn train_step(model: &mut Detector, opt: &mut Momentum, set: &TrainingSet, lr: f64, clip_norm: f64) -> Result<LossBreakdown> {
    let refs: Vec<&PreparedScene> = set.scenes.iter().collect();
    let (out, cache) = model.forward(&refs, BnMode::Train)?;
    let (loss, grad) = detection_loss_with_grad(&out, &set.targets)?;
    let mut grads = model.zeros_like();
    model.backward(&refs, &cache, &grad, &mut grads)?;
    let mut g = grads.flatten();
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm at loss {loss:?}")));
    }
    if clip_norm > 0.0 && norm > clip_norm {
        let k = clip_norm / norm;
        g.iter_mut().for_each(|v| *v *= k);
    }
    let mut w = model.flatten();
    for ((wi, vi), gi) in w.iter_mut().zip(opt.velocity.iter_mut()).zip(&g) {
        *vi = opt.momentum * *vi + gi;
        *wi -= lr * *vi;
    }
    model.load_flat(&w);
    model.backbone.update_running_stats(&cache.backbone);
    Ok(loss)
}

/// Runs `cfg.steps` steps; `on_step(step, loss)` sees every loss.
pub fn train(
    model: &mut Detector,
    set: &TrainingSet,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<Vec<LossBreakdown>> {
    let mut opt = Momentum::new(model, cfg.momentum);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let loss = train_step(model, &mut opt, set, cfg.lr, cfg.clip_norm)?;
        on_step(step, &loss);
        log.push(loss);
    }
    Ok(log)
}

/// One line per step: `step total heatmap offset size yaw z`, shortest round-trip decimals.
pub fn format_loss_log(log: &[LossBreakdown]) -> String {
    let mut s = String::from("# step total heatmap offset size yaw z\n");
    for (i, l) in log.iter().enumerate() {
        s.push_str(&format!("{i} {:?} {:?} {:?} {:?} {:?} {:?}\n", l.total, l.heatmap, l.offset, l.size, l.yaw, l.z));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::backbone::BackboneConfig;
    use crate::pillar::GridConfig;
    use crate::scene::{generate_scene, SceneSpec};

    fn tiny() -> (Detector, TrainingSet) {
        let cfg = ModelConfig {
            grid: GridConfig::centered(4.25, 0.5, (-3.0, 3.0)).unwrap(),
            rbf_count: 6,
            encoder_hidden: 4,
            backbone: BackboneConfig { in_channels: 4, widths: [2, 2, 2], ..Default::default() },
            head_hidden: 2,
            ..Default::default()
        };
        let model = Detector::new(&cfg, 1).unwrap();
        let spec = SceneSpec { n_boxes: (1, 2), class_weights: [0.0, 1.0, 1.0], ..Default::default() };
        let scenes: Vec<Scene> = (0..2).map(|s| generate_scene(&SceneSpec { seed: s, ..spec.clone() }, &cfg.grid).unwrap()).collect();
        let set = TrainingSet::new(&scenes, &model).unwrap();
        (model, set)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut model, set) = tiny();
        let before = model.flatten();
        let mut opt = Momentum::new(&model, 0.9);
        train_step(&mut model, &mut opt, &set, 0.0, 5.0).unwrap();
        assert_eq!(model.flatten(), before);
    }

    #[test]
    fn a_step_reduces_loss() {
        let (mut model, set) = tiny();
        let mut opt = Momentum::new(&model, 0.0);
        let l0 = train_step(&mut model, &mut opt, &set, 0.01, 0.0).unwrap();
        let l1 = train_step(&mut model, &mut opt, &set, 0.0, 0.0).unwrap();
        assert!(l1.total < l0.total, "{l0:?} -> {l1:?}");
    }

    #[test]
    fn seeded_runs_are_identical() {
        let cfg = TrainConfig { steps: 3, ..Default::default() };
        let (mut a, set) = tiny();
        let (mut b, _) = tiny();
        let la = train(&mut a, &set, &cfg, |_, _| {}).unwrap();
        let lb = train(&mut b, &set, &cfg, |_, _| {}).unwrap();
        assert_eq!(format_loss_log(&la), format_loss_log(&lb));
        assert_eq!(a, b);
    }
}
