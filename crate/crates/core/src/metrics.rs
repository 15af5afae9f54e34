//! Center-distance detection metrics: AP at BEV distance thresholds, true-positive errors
//! (translation, scale, orientation), and the composite detection score.

use std::f64::consts::TAU;

use serde::Serialize;

use crate::boxes::OrientedBox;
use crate::error::{Error, Result};
use crate::scene::CLASS_NAMES;

/// Matching thresholds in meters.
pub const DIST_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold at which true-positive errors are measured.
pub const TP_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// `(prediction, ground truth, BEV center distance)` in matching order.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Prediction indices by descending score; equal scores keep their input order.
pub fn score_order(preds: &[OrientedBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    order
}

/// Greedy matching: predictions by descending score each take the nearest unmatched ground
/// truth within `threshold_m` (ties to the lower index). Classes are not checked.
pub fn match_detections(preds: &[OrientedBox], gts: &[OrientedBox], threshold_m: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut res = MatchResult::default();
    for i in score_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let d = preds[i].bev_distance(g);
            if d <= threshold_m && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        match best {
            Some((j, d)) => {
                taken[j] = true;
                res.pairs.push((i, j, d));
            }
            None => res.unmatched_preds.push(i),
        }
    }
    res.unmatched_gts = (0..gts.len()).filter(|j| !taken[*j]).collect();
    res
}

/// Area under the envelope of the precision-recall curve of a ranked list of hits.
pub fn ap_from_ranked(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return f64::NAN;
    }
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // envelope: best precision at this recall or beyond
    for k in (0..curve.len().saturating_sub(1)).rev() {
        curve[k].1 = curve[k].1.max(curve[k + 1].1);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in curve {
        area += (r - prev_recall) * p;
        prev_recall = r;
    }
    area
}

/// AP of one list of same-class predictions against its ground truths; `None` without ground truths.
pub fn average_precision(preds: &[OrientedBox], gts: &[OrientedBox], threshold_m: f64) -> Option<f64> {
    average_precision_multi(&[(preds, gts)], threshold_m)
}

/// AP over several scenes: matching is per scene, ranking is global by score.
pub fn average_precision_multi(scenes: &[(&[OrientedBox], &[OrientedBox])], threshold_m: f64) -> Option<f64> {
    let n_gt: usize = scenes.iter().map(|(_, g)| g.len()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (s, (preds, gts)) in scenes.iter().enumerate() {
        let m = match_detections(preds, gts, threshold_m);
        ranked.extend(m.pairs.iter().map(|&(i, _, _)| (preds[i].score, s, i, true)));
        ranked.extend(m.unmatched_preds.iter().map(|&i| (preds[i].score, s, i, false)));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let hits: Vec<bool> = ranked.iter().map(|r| r.3).collect();
    Some(ap_from_ranked(&hits, n_gt))
}

/// Smallest absolute angle between two headings, in `[0, pi]`.
pub fn orientation_error(pred_yaw: f64, gt_yaw: f64) -> f64 {
    let d = (pred_yaw - gt_yaw).rem_euclid(TAU);
    d.min(TAU - d)
}

/// `1 - prod_k min(s_p, s_g) / max(s_p, s_g)` over `(w, l, h)`.
pub fn scale_error(p: &OrientedBox, g: &OrientedBox) -> f64 {
    1.0 - (0..3).map(|k| p.size[k].min(g.size[k]) / p.size[k].max(g.size[k])).product::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TpMetrics {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    /// Number of matched pairs; zero means the errors are the worst-case placeholder 1.0.
    pub matches: usize,
}

/// Mean errors over matched pairs given as `(prediction, ground truth)` boxes.
pub fn tp_metrics(pairs: &[(&OrientedBox, &OrientedBox)]) -> TpMetrics {
    if pairs.is_empty() {
        return TpMetrics { ate: 1.0, ase: 1.0, aoe: 1.0, matches: 0 };
    }
    let n = pairs.len() as f64;
    TpMetrics {
        ate: pairs.iter().map(|(p, g)| p.bev_distance(g)).sum::<f64>() / n,
        ase: pairs.iter().map(|(p, g)| scale_error(p, g)).sum::<f64>() / n,
        aoe: pairs.iter().map(|(p, g)| orientation_error(p.yaw, g.yaw)).sum::<f64>() / n,
        matches: pairs.len(),
    }
}

/// `(5 mAP + sum (1 - min(1, mTP))) / (5 + n)`; with the five standard error terms this
/// is the usual `1/10` normalisation.
pub fn nds(map: f64, mtps: &[f64]) -> Result<f64> {
    if !(0.0..=1.0).contains(&map) {
        return Err(Error::Invalid(format!("mAP {map} outside [0, 1]")));
    }
    if let Some(bad) = mtps.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Invalid(format!("true-positive error {bad} must be >= 0")));
    }
    let tp: f64 = mtps.iter().map(|v| 1.0 - v.min(1.0)).sum();
    Ok((5.0 * map + tp) / (5.0 + mtps.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NdsMode {
    /// Translation, scale and orientation errors only.
    #[default]
    Reduced,
    /// Five error terms; velocity and attribute errors are not modelled and count as 1.0.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    pub n_gt: usize,
    pub n_pred: usize,
    /// AP at each of [`DIST_THRESHOLDS`].
    pub ap_at: [f64; 4],
    pub ap: f64,
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub tp_matches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub nds: f64,
}

fn class_name(c: usize) -> String {
    CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string())
}

/// Evaluates per-scene predictions against per-scene ground truths. Classes without
/// ground truth are left out of every mean.
pub fn evaluate(preds: &[Vec<OrientedBox>], gts: &[Vec<OrientedBox>], n_classes: usize, mode: NdsMode) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::Invalid(format!("{} prediction sets for {} scenes", preds.len(), gts.len())));
    }
    let by_class = |sets: &[Vec<OrientedBox>], c: usize| -> Vec<Vec<OrientedBox>> {
        sets.iter().map(|s| s.iter().filter(|b| b.class_id == c).copied().collect()).collect()
    };
    let mut classes = Vec::new();
    for c in 0..n_classes {
        let (p, g) = (by_class(preds, c), by_class(gts, c));
        let n_gt: usize = g.iter().map(Vec::len).sum();
        if n_gt == 0 {
            continue;
        }
        let scenes: Vec<(&[OrientedBox], &[OrientedBox])> = p.iter().zip(&g).map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
        let ap_at = DIST_THRESHOLDS.map(|t| average_precision_multi(&scenes, t).expect("class has ground truth"));
        let mut pairs = Vec::new();
        for (ps, gs) in &scenes {
            for (i, j, _) in match_detections(ps, gs, TP_THRESHOLD).pairs {
                pairs.push((&ps[i], &gs[j]));
            }
        }
        let tp = tp_metrics(&pairs);
        classes.push(ClassReport {
            class_id: c,
            name: class_name(c),
            n_gt,
            n_pred: p.iter().map(Vec::len).sum(),
            ap: ap_at.iter().sum::<f64>() / 4.0,
            ap_at,
            ate: tp.ate,
            ase: tp.ase,
            aoe: tp.aoe,
            tp_matches: tp.matches,
        });
    }
    let mean = |f: fn(&ClassReport) -> f64| {
        if classes.is_empty() {
            0.0
        } else {
            classes.iter().map(f).sum::<f64>() / classes.len() as f64
        }
    };
    let (map, mate, mase, maoe) = (mean(|c| c.ap), mean(|c| c.ate), mean(|c| c.ase), mean(|c| c.aoe));
    let mut mtps = vec![mate, mase, maoe];
    if mode == NdsMode::Full {
        mtps.extend([1.0, 1.0]);
    }
    let nds = nds(map, &mtps)?;
    Ok(EvalReport { classes, map, mate, mase, maoe, nds })
}

impl EvalReport {
    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>5} {:>5} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
            "class", "n_gt", "n_det", "AP@0.5", "AP@1", "AP@2", "AP@4", "AP", "ATE", "ASE", "AOE"
        );
        for c in &self.classes {
            s.push_str(&format!(
                "{:<12} {:>5} {:>5} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}\n",
                c.name, c.n_gt, c.n_pred, c.ap_at[0], c.ap_at[1], c.ap_at[2], c.ap_at[3], c.ap, c.ate, c.ase, c.aoe
            ));
        }
        s.push_str(&format!(
            "mAP {:.4}  mATE {:.4}  mASE {:.4}  mAOE {:.4}  NDS {:.4}\n",
            self.map, self.mate, self.mase, self.maoe, self.nds
        ));
        s
    }
}
