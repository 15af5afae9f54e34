//! Training targets for the center head, the detection loss, and box decoding.

use crate::boxes::{wrap_angle, OrientedBox};
use crate::error::{shape_err, Result};
use crate::head::{HeadGrad, HeadOutput};
use crate::pillar::GridConfig;
use crate::tensor::GridTensor;

/// Penalty-reduced focal loss exponents.
pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
/// Heatmap probabilities are clamped into `[EPS, 1 - EPS]` inside the loss.
pub const HEAT_EPS: f64 = 1e-4;
pub const HEATMAP_WEIGHT: f64 = 1.0;
pub const REGRESSION_WEIGHT: f64 = 0.25;

/// Dense targets laid out like [`HeadOutput`], plus a foreground mask `[B, 1, Y, X]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    pub heatmap: GridTensor,
    pub offset: GridTensor,
    pub size_log: GridTensor,
    pub yaw_vec: GridTensor,
    pub z_center: GridTensor,
    pub mask: GridTensor,
    /// Boxes left out because their center fell outside the grid.
    pub skipped: usize,
}

impl TargetMaps {
    /// Concatenates single-scene targets along the batch axis.
    pub fn stack(items: &[TargetMaps]) -> Result<Self> {
        let cat = |f: fn(&TargetMaps) -> &GridTensor| GridTensor::concat(&items.iter().map(f).collect::<Vec<_>>(), 0);
        Ok(Self {
            heatmap: cat(|t| &t.heatmap)?,
            offset: cat(|t| &t.offset)?,
            size_log: cat(|t| &t.size_log)?,
            yaw_vec: cat(|t| &t.yaw_vec)?,
            z_center: cat(|t| &t.z_center)?,
            mask: cat(|t| &t.mask)?,
            skipped: items.iter().map(|t| t.skipped).sum(),
        })
    }
}

/// Splat radius in cells for a box: half its smaller footprint side, at least one cell.
pub fn splat_radius(b: &OrientedBox, pillar_size: f64) -> usize {
    ((0.5 * b.size[0].min(b.size[1]) / pillar_size).round() as usize).max(1)
}

/// Renders targets for one scene (`B = 1`).
pub fn render_targets(gt: &[OrientedBox], cfg: &GridConfig, n_classes: usize) -> TargetMaps {
    let n = cfg.grid_cells;
    let mut t = TargetMaps {
        heatmap: GridTensor::zeros(&[1, n_classes, n, n]),
        offset: GridTensor::zeros(&[1, 2, n, n]),
        size_log: GridTensor::zeros(&[1, 3, n, n]),
        yaw_vec: GridTensor::zeros(&[1, 2, n, n]),
        z_center: GridTensor::zeros(&[1, 1, n, n]),
        mask: GridTensor::zeros(&[1, 1, n, n]),
        skipped: 0,
    };
    for b in gt {
        let cell = cfg.cell_of(b.center[0], b.center[1]);
        let Some((row, col)) = cell.filter(|_| b.class_id < n_classes) else {
            t.skipped += 1;
            continue;
        };
        let radius = splat_radius(b, cfg.pillar_size) as i64;
        let sigma = radius as f64 / 3.0;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (r, c) = (row as i64 + dy, col as i64 + dx);
                if r < 0 || c < 0 || r >= n as i64 || c >= n as i64 {
                    continue;
                }
                let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                let idx = [0, b.class_id, r as usize, c as usize];
                if v > t.heatmap.get(&idx) {
                    t.heatmap.set(&idx, v);
                }
            }
        }
        let fx = (b.center[0] - cfg.x_range.0) / cfg.pillar_size - col as f64;
        let fy = (b.center[1] - cfg.y_range.0) / cfg.pillar_size - row as f64;
        t.offset.set(&[0, 0, row, col], fx);
        t.offset.set(&[0, 1, row, col], fy);
        for k in 0..3 {
            t.size_log.set(&[0, k, row, col], b.size[k].ln());
        }
        t.yaw_vec.set(&[0, 0, row, col], b.yaw.sin());
        t.yaw_vec.set(&[0, 1, row, col], b.yaw.cos());
        t.z_center.set(&[0, 0, row, col], b.center[2]);
        t.mask.set(&[0, 0, row, col], 1.0);
    }
    if t.skipped > 0 {
        log::warn!("{} ground-truth boxes outside the grid were skipped", t.skipped);
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub heatmap: f64,
    pub offset: f64,
    pub size: f64,
    pub yaw: f64,
    pub z: f64,
    pub n_pos: usize,
}

/// Focal term of one cell and its derivative with respect to the cell's logit.
fn focal(p_raw: f64, y: f64) -> (f64, f64) {
    let p = p_raw.clamp(HEAT_EPS, 1.0 - HEAT_EPS);
    let clamped = p != p_raw;
    let (a, b) = (FOCAL_ALPHA, FOCAL_BETA);
    let (loss, dldp) = if y == 1.0 {
        let l = -(1.0 - p).powi(a) * p.ln();
        let d = a as f64 * (1.0 - p).powi(a - 1) * p.ln() - (1.0 - p).powi(a) / p;
        (l, d)
    } else {
        let w = (1.0 - y).powi(b);
        let l = -w * p.powi(a) * (1.0 - p).ln();
        let d = -w * (a as f64 * p.powi(a - 1) * (1.0 - p).ln() - p.powi(a) / (1.0 - p));
        (l, d)
    };
    (loss, if clamped { 0.0 } else { dldp * p * (1.0 - p) })
}

fn check_same(a: &GridTensor, b: &GridTensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{what}: prediction {:?} vs target {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Masked L1 of a `[B, C, Y, X]` map and its gradient, summed over channels and cells.
fn masked_l1(pred: &GridTensor, tgt: &GridTensor, mask: &GridTensor) -> (f64, GridTensor) {
    let (b, c, plane) = (pred.dim(0), pred.dim(1), pred.dim(2) * pred.dim(3));
    let mut grad = GridTensor::zeros(pred.shape());
    let mut sum = 0.0;
    for bi in 0..b {
        let m = &mask.data()[bi * plane..(bi + 1) * plane];
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            for p in 0..plane {
                if m[p] > 0.0 {
                    let d = pred.data()[base + p] - tgt.data()[base + p];
                    sum += d.abs();
                    grad.data_mut()[base + p] = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    (sum, grad)
}

/// Loss and its gradient with respect to the head outputs.
pub fn detection_loss_with_grad(out: &HeadOutput, tgt: &TargetMaps) -> Result<(LossBreakdown, HeadGrad)> {
    check_same(&out.heatmap, &tgt.heatmap, "heatmap")?;
    check_same(&out.offset, &tgt.offset, "offset")?;
    check_same(&out.size_log, &tgt.size_log, "size")?;
    check_same(&out.yaw_vec, &tgt.yaw_vec, "yaw")?;
    check_same(&out.z_center, &tgt.z_center, "z")?;
    let n_pos = tgt.heatmap.data().iter().filter(|v| **v == 1.0).count();
    let n_fg = tgt.mask.data().iter().filter(|v| **v > 0.0).count();
    let norm_pos = n_pos.max(1) as f64;

    let mut heat_grad = GridTensor::zeros(out.heat_logits.shape());
    let mut heat = 0.0;
    for (i, (&p, &y)) in out.heatmap.data().iter().zip(tgt.heatmap.data()).enumerate() {
        let (l, d) = focal(p, y);
        heat += l;
        heat_grad.data_mut()[i] = HEATMAP_WEIGHT * d / norm_pos;
    }
    heat /= norm_pos;

    let norm_fg = n_fg.max(1) as f64;
    let reg = |pred: &GridTensor, t: &GridTensor| {
        let (s, mut g) = masked_l1(pred, t, &tgt.mask);
        g.scale(REGRESSION_WEIGHT / norm_fg);
        (s / norm_fg, g)
    };
    let (offset, g_off) = reg(&out.offset, &tgt.offset);
    let (size, g_size) = reg(&out.size_log, &tgt.size_log);
    let (yaw, g_yaw) = reg(&out.yaw_vec, &tgt.yaw_vec);
    let (z, g_z) = reg(&out.z_center, &tgt.z_center);
    let total = HEATMAP_WEIGHT * heat + REGRESSION_WEIGHT * (offset + size + yaw + z);
    if !total.is_finite() {
        return Err(crate::error::Error::NonFinite(format!(
            "loss: heatmap {heat}, offset {offset}, size {size}, yaw {yaw}, z {z}"
        )));
    }
    let breakdown = LossBreakdown { total, heatmap: heat, offset, size, yaw, z, n_pos };
    let grad = HeadGrad { heat_logits: heat_grad, offset: g_off, size_log: g_size, yaw_vec: g_yaw, z_center: g_z };
    Ok((breakdown, grad))
}

/// Pieces of the loss that are only piecewise smooth: heatmap clamping and the sign of
/// every foreground regression residual.
pub fn loss_kink_pattern(out: &HeadOutput, tgt: &TargetMaps) -> Vec<bool> {
    let mut v: Vec<bool> = out.heatmap.data().iter().map(|p| *p < HEAT_EPS || *p > 1.0 - HEAT_EPS).collect();
    let plane = tgt.mask.dim(2) * tgt.mask.dim(3);
    for (pred, t) in [(&out.offset, &tgt.offset), (&out.size_log, &tgt.size_log), (&out.yaw_vec, &tgt.yaw_vec), (&out.z_center, &tgt.z_center)] {
        for (i, (a, b)) in pred.data().iter().zip(t.data()).enumerate() {
            let (bi, cell) = (i / (pred.dim(1) * plane), i % plane);
            if tgt.mask.data()[bi * plane + cell] > 0.0 {
                v.push(a > b);
            }
        }
    }
    v
}

pub fn detection_loss(out: &HeadOutput, tgt: &TargetMaps) -> Result<LossBreakdown> {
    Ok(detection_loss_with_grad(out, tgt)?.0)
}

/// Detections of batch item `b`: 3x3 heatmap peaks above `score_thresh`, best `max_dets`
/// first (ties by class, row, column).
pub fn decode_item(out: &HeadOutput, b: usize, cfg: &GridConfig, max_dets: usize, score_thresh: f64) -> Vec<OrientedBox> {
    decode_item_cells(out, b, cfg, max_dets, score_thresh).into_iter().map(|(_, d)| d).collect()
}

/// [`decode_item`] with the `(row, col)` peak cell of every detection.
pub fn decode_item_cells(
    out: &HeadOutput,
    b: usize,
    cfg: &GridConfig,
    max_dets: usize,
    score_thresh: f64,
) -> Vec<((usize, usize), OrientedBox)> {
    let (n_cls, h, w) = (out.heatmap.dim(1), out.heatmap.dim(2), out.heatmap.dim(3));
    let heat = |c: usize, r: usize, col: usize| out.heatmap.get(&[b, c, r, col]);
    let mut peaks = Vec::new();
    for c in 0..n_cls {
        for r in 0..h {
            for col in 0..w {
                let v = heat(c, r, col);
                if !(v > score_thresh) {
                    continue;
                }
                let is_peak = (r.saturating_sub(1)..(r + 2).min(h))
                    .all(|rr| (col.saturating_sub(1)..(col + 2).min(w)).all(|cc| heat(c, rr, cc) <= v));
                if is_peak {
                    peaks.push((v, c, r, col));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    peaks
        .into_iter()
        .filter_map(|(score, c, r, col)| {
            let (dx, dy) = (out.offset.get(&[b, 0, r, col]), out.offset.get(&[b, 1, r, col]));
            let x = cfg.x_range.0 + (col as f64 + dx) * cfg.pillar_size;
            let y = cfg.y_range.0 + (r as f64 + dy) * cfg.pillar_size;
            let z = out.z_center.get(&[b, 0, r, col]);
            let size = [0, 1, 2].map(|k| out.size_log.get(&[b, k, r, col]).clamp(-20.0, 20.0).exp());
            let yaw = wrap_angle(out.yaw_vec.get(&[b, 0, r, col]).atan2(out.yaw_vec.get(&[b, 1, r, col])));
            OrientedBox::new([x, y, z], size, yaw, c, score).ok().map(|d| ((r, col), d))
        })
        .take(max_dets)
        .collect()
}

/// Detections of the first batch item.
pub fn decode(out: &HeadOutput, cfg: &GridConfig, max_dets: usize, score_thresh: f64) -> Vec<OrientedBox> {
    decode_item(out, 0, cfg, max_dets, score_thresh)
}

/// Default cap on detections per scene.
pub const DEFAULT_MAX_DETS: usize = 20;

/// Head outputs equal to the targets: logits are inverse sigmoids of the clamped heatmap.
pub fn perfect_output(t: &TargetMaps) -> HeadOutput {
    let heatmap = t.heatmap.map(|v| v.clamp(HEAT_EPS, 1.0 - HEAT_EPS));
    HeadOutput {
        heat_logits: heatmap.map(|p| (p / (1.0 - p)).ln()),
        heatmap,
        offset: t.offset.clone(),
        size_log: t.size_log.clone(),
        yaw_vec: t.yaw_vec.clone(),
        z_center: t.z_center.clone(),
    }
}
