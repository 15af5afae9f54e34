//! Equivariance audit: commuting-diagram residuals per backbone layer, for the head and
//! end to end, plus the rotation sweep of detection quality over scene headings.

use std::fmt::Write as _;

use serde::Serialize;

use crate::backbone::{group_pool_with, BnMode, LiftedFeature};
use crate::error::Result;
use crate::group::{rotate_p4, rotate_planar, RotationC4};
use crate::head::HeadOutput;
use crate::metrics::{evaluate, NdsMode};
use crate::model::{Detector, PreparedScene};
use crate::rng::Rng;
use crate::scene::{exact_cos_sin, rotate_scene, Scene};
use crate::tensor::GridTensor;
use crate::backbone::BLOCK_NAMES;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Residual {
    pub name: String,
    /// Grid rotation index `r` of the generator action.
    pub r: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub heading_deg: f64,
    pub map: f64,
    /// Mean over classes of AP at the 2 m threshold.
    pub ap_2m: f64,
    pub maoe: f64,
    pub mate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub equivariant: bool,
    pub tolerance: f64,
    pub residuals: Vec<Residual>,
    pub max_residual: f64,
    pub passed: bool,
    pub sweep: Vec<SweepRow>,
    pub sweep_aoe_mean: f64,
    pub sweep_aoe_std: f64,
}

/// Group action on a feature map: planar rotation, plus the cyclic slice shift when `p4`.
fn act(x: &GridTensor, r: RotationC4, p4: bool) -> Result<GridTensor> {
    if p4 {
        Ok(LiftedFeature::new(rotate_p4(&LiftedFeature::from_planar(x.clone())?.tensor, r)?)?.into_planar())
    } else {
        rotate_planar(x, r)
    }
}

/// Head outputs as they should read after the grid rotation `r`: maps rotate, and the
/// offset and heading vectors turn by the matching scene angle.
pub fn rotate_head_output(out: &HeadOutput, r: RotationC4) -> Result<HeadOutput> {
    let (c, s) = exact_cos_sin(r.scene_angle());
    let turn = |t: &GridTensor, f: &dyn Fn(f64, f64) -> (f64, f64)| -> Result<GridTensor> {
        let mut t = rotate_planar(t, r)?;
        let plane = t.dim(2) * t.dim(3);
        let d = t.data_mut();
        for b in 0..d.len() / (2 * plane) {
            for p in 0..plane {
                let (i, j) = (2 * b * plane + p, (2 * b + 1) * plane + p);
                (d[i], d[j]) = f(d[i], d[j]);
            }
        }
        Ok(t)
    };
    Ok(HeadOutput {
        heat_logits: rotate_planar(&out.heat_logits, r)?,
        heatmap: rotate_planar(&out.heatmap, r)?,
        offset: turn(&out.offset, &|x, y| (0.5 + (x - 0.5) * c - (y - 0.5) * s, 0.5 + (x - 0.5) * s + (y - 0.5) * c))?,
        size_log: rotate_planar(&out.size_log, r)?,
        yaw_vec: turn(&out.yaw_vec, &|sn, cs| (sn * c + cs * s, cs * c - sn * s))?,
        z_center: rotate_planar(&out.z_center, r)?,
    })
}

fn output_residual(a: &HeadOutput, b: &HeadOutput) -> Result<f64> {
    let cat = |o: &HeadOutput| GridTensor::concat(&[&o.heat_logits, &o.offset, &o.size_log, &o.yaw_vec, &o.z_center], 1);
    cat(a)?.rel_residual(&cat(b)?)
}

/// Commuting-diagram residuals `|f(g x) - g f(x)| / |g f(x)|` for every backbone block,
/// the group pool, the head and the full detector on `scenes`, for each `r` in C4.
pub fn equivariance_residuals(model: &Detector, scenes: &[&PreparedScene], seed: u64) -> Result<Vec<Residual>> {
    let eq = model.cfg.equivariant();
    let mut rng = Rng::new(seed);
    let (x, _) = model.encode(scenes)?;
    let noise = GridTensor::from_fn(x.shape(), |_| 0.1 * rng.normal());
    let x = x.zip_map(&noise, |a, b| a + b)?;
    let (stacked, cache) = model.backbone.features(&x, BnMode::Train)?;
    let mut out = Vec::new();
    for r in RotationC4::all() {
        let mut push = |name: &str, residual: f64| out.push(Residual { name: name.into(), r: r.index(), residual });
        for (i, (block, c)) in model.backbone.blocks.iter().zip(&cache.blocks).enumerate() {
            let p4_in = eq && i > 0;
            let (base, _) = block.forward(&c.input, BnMode::Train)?;
            let (rot, _) = block.forward(&act(&c.input, r, p4_in)?, BnMode::Train)?;
            push(BLOCK_NAMES[i], rot.rel_residual(&act(&base, r, eq)?)?);
        }
        if eq {
            let pool = |t: &GridTensor| -> Result<GridTensor> { Ok(group_pool_with(&LiftedFeature::from_planar(t.clone())?, model.cfg.backbone.pool)) };
            push("group_pool", pool(&act(&stacked, r, true)?)?.rel_residual(&rotate_planar(&pool(&stacked)?, r)?)?);
        }
        let (head_base, _) = model.head.forward(&stacked)?;
        let (head_rot, _) = model.head.forward(&act(&stacked, r, eq)?)?;
        push("head", output_residual(&head_rot, &rotate_head_output(&head_base, r)?)?);

        let pivot = model.cfg.grid.center();
        let rotated: Vec<PreparedScene> = scenes
            .iter()
            .map(|s| {
                let sc = Scene { cloud: s.cloud.clone(), gt: Vec::new() };
                PreparedScene::new(rotate_scene(&sc, r.scene_angle(), pivot).cloud, &model.cfg.grid)
            })
            .collect();
        let (base, _) = model.forward(scenes, BnMode::Eval)?;
        let (rot, _) = model.forward(&rotated.iter().collect::<Vec<_>>(), BnMode::Eval)?;
        push("end_to_end", output_residual(&rot, &rotate_head_output(&base, r)?)?);
    }
    Ok(out)
}

/// Detection quality on `scenes` rotated about the grid center to headings
/// `0, step, 2 step, ... < 360` degrees.
pub fn rotation_sweep(model: &Detector, scenes: &[Scene], step_deg: f64, max_dets: usize, score_thresh: f64) -> Result<Vec<SweepRow>> {
    let n = (360.0 / step_deg).ceil() as usize;
    let pivot = model.cfg.grid.center();
    let mut rows = Vec::with_capacity(n);
    for k in 0..n {
        let heading_deg = k as f64 * step_deg;
        let rotated: Vec<Scene> = scenes.iter().map(|s| rotate_scene(s, heading_deg.to_radians(), pivot)).collect();
        let preds = rotated.iter().map(|s| model.detect(&s.cloud, max_dets, score_thresh)).collect::<Result<Vec<_>>>()?;
        let gts: Vec<_> = rotated.iter().map(|s| s.gt.clone()).collect();
        let rep = evaluate(&preds, &gts, model.cfg.n_classes, NdsMode::Reduced)?;
        let ap_2m = if rep.classes.is_empty() { 0.0 } else { rep.classes.iter().map(|c| c.ap_at[2]).sum::<f64>() / rep.classes.len() as f64 };
        rows.push(SweepRow { heading_deg, map: rep.map, ap_2m, maoe: rep.maoe, mate: rep.mate });
    }
    Ok(rows)
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

pub fn audit(model: &Detector, scenes: &[Scene], tolerance: f64, step_deg: f64, max_dets: usize, score_thresh: f64) -> Result<AuditReport> {
    let prepared: Vec<PreparedScene> = scenes.iter().map(|s| PreparedScene::new(s.cloud.clone(), &model.cfg.grid)).collect();
    let residuals = equivariance_residuals(model, &prepared.iter().collect::<Vec<_>>(), 0)?;
    let max_residual = residuals.iter().map(|r| r.residual).fold(0.0, f64::max);
    let sweep = rotation_sweep(model, scenes, step_deg, max_dets, score_thresh)?;
    let (sweep_aoe_mean, sweep_aoe_std) = mean_std(&sweep.iter().map(|r| r.maoe).collect::<Vec<_>>());
    Ok(AuditReport {
        equivariant: model.cfg.equivariant(),
        tolerance,
        passed: max_residual <= tolerance,
        max_residual,
        residuals,
        sweep,
        sweep_aoe_mean,
        sweep_aoe_std,
    })
}

impl AuditReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:>12} {:>12} {:>12} {:>12}\n", "layer", "r=0", "r=1", "r=2", "r=3");
        let mut names: Vec<&str> = Vec::new();
        for r in &self.residuals {
            if !names.contains(&r.name.as_str()) {
                names.push(&r.name);
            }
        }
        for name in names {
            let _ = write!(s, "{name:<12}");
            for r in 0..4 {
                let v = self.residuals.iter().find(|x| x.name == name && x.r == r).map_or(f64::NAN, |x| x.residual);
                let _ = write!(s, " {v:>12.3e}");
            }
            s.push('\n');
        }
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "max residual {:.3e} (tolerance {:.1e}): {verdict}\n", self.max_residual, self.tolerance);
        let _ = writeln!(s, "{:>8} {:>7} {:>7} {:>7} {:>7}", "heading", "mAP", "AP@2", "mAOE", "mATE");
        for row in &self.sweep {
            let _ = writeln!(s, "{:>8.1} {:>7.4} {:>7.4} {:>7.4} {:>7.4}", row.heading_deg, row.map, row.ap_2m, row.maoe, row.mate);
        }
        let _ = writeln!(s, "sweep mAOE mean {:.4} std {:.4}", self.sweep_aoe_mean, self.sweep_aoe_std);
        s
    }
}
