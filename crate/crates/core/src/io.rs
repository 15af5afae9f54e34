//! On-disk formats: point clouds, detections, scene bundles, checkpoints and evaluation reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::boxes::OrientedBox;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::Detector;
use crate::params::Parameterized;
use crate::pillar::{Point, PointCloud};
use crate::scene::Scene;

/// `x y z intensity` per line with 9 significant digits.
pub fn format_point_cloud(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 64);
    for p in &cloud.points {
        let _ = writeln!(s, "{:.8e} {:.8e} {:.8e} {:.8e}", p.x, p.y, p.z, p.intensity);
    }
    s
}

/// Reads `x y z intensity` lines; blank lines and `#` comments are skipped.
pub fn parse_point_cloud(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let v = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number {t:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        let [x, y, z, intensity] = v[..] else {
            return Err(err(format!("expected 4 fields, got {}", v.len())));
        };
        let p = Point::new(x, y, z, intensity);
        if !p.is_finite() {
            return Err(err("non-finite coordinate".into()));
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
    pub class_id: usize,
    pub score: f64,
}

impl From<&OrientedBox> for DetectionRecord {
    fn from(b: &OrientedBox) -> Self {
        let [x, y, z] = b.center;
        let [w, l, h] = b.size;
        Self { x, y, z, w, l, h, yaw: b.yaw, class_id: b.class_id, score: b.score }
    }
}

impl DetectionRecord {
    pub fn to_box(&self) -> Result<OrientedBox> {
        OrientedBox::new([self.x, self.y, self.z], [self.w, self.l, self.h], self.yaw, self.class_id, self.score)
    }
}

/// Fixed six-decimal text; values that round to zero print without a sign.
fn fmt6(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

fn write_value(v: &Value, indent: usize, out: &mut String) {
    let pad = "  ".repeat(indent);
    let scalar = |v: &Value| !matches!(v, Value::Array(_) | Value::Object(_));
    match v {
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => out.push_str(&u.to_string()),
            (None, Some(i)) => out.push_str(&i.to_string()),
            _ => out.push_str(&fmt6(n.as_f64().expect("json number"))),
        },
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) if items.iter().all(scalar) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_value(item, indent, out);
            }
            out.push(']');
        }
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&pad);
                out.push_str("  ");
                write_value(item, indent + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad);
            out.push(']');
        }
        Value::Object(map) if map.values().all(scalar) => {
            out.push('{');
            for (i, (k, item)) in map.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                let _ = write!(out, "{}: ", Value::String(k.clone()));
                write_value(item, indent, out);
            }
            out.push('}');
        }
        Value::Object(map) => {
            out.push_str("{\n");
            for (i, (k, item)) in map.iter().enumerate() {
                let _ = write!(out, "{pad}  {}: ", Value::String(k.clone()));
                write_value(item, indent + 1, out);
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad);
            out.push('}');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// JSON text with every float printed to six decimals.
pub fn to_fixed_json<T: Serialize>(v: &T) -> Result<String> {
    let value = serde_json::to_value(v).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut out = String::new();
    write_value(&value, 0, &mut out);
    out.push('\n');
    Ok(out)
}

/// Detections sorted by descending score, then ascending x, then y.
pub fn format_detections(boxes: &[OrientedBox]) -> String {
    let mut recs: Vec<DetectionRecord> = boxes.iter().map(DetectionRecord::from).collect();
    recs.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.x.total_cmp(&b.x)).then(a.y.total_cmp(&b.y)));
    to_fixed_json(&recs).expect("records serialize")
}

pub fn parse_detections(text: &str) -> Result<Vec<OrientedBox>> {
    let recs: Vec<DetectionRecord> = serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })?;
    recs.iter().map(DetectionRecord::to_box).collect()
}

/// Point-cloud and ground-truth paths of scene `stem` inside `dir`.
pub fn scene_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.pts")), dir.join(format!("{stem}.gt.json")))
}

/// Writes the scene bundle; ground truth scores are stored as 1.0.
pub fn write_scene(dir: &Path, stem: &str, scene: &Scene) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (pts, gt) = scene_paths(dir, stem);
    std::fs::write(pts, format_point_cloud(&scene.cloud))?;
    let gt_boxes: Vec<OrientedBox> = scene.gt.iter().map(|b| OrientedBox { score: 1.0, ..*b }).collect();
    std::fs::write(gt, format_detections(&gt_boxes))?;
    Ok(())
}

pub fn read_scene(dir: &Path, stem: &str) -> Result<Scene> {
    let (pts, gt) = scene_paths(dir, stem);
    Ok(Scene { cloud: parse_point_cloud(&std::fs::read_to_string(pts)?)?, gt: parse_detections(&std::fs::read_to_string(gt)?)? })
}

/// Stems of all scene bundles in `dir`, sorted.
pub fn list_scenes(dir: &Path) -> Result<Vec<String>> {
    let mut stems: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".pts")).map(str::to_string))
        .collect();
    stems.sort();
    Ok(stems)
}

const CKPT_MAGIC: &str = "eqbev-checkpoint 1";

/// Text manifest (model configuration, then `param|buffer name shape offset` lines, then
/// `end <bytes>`) followed by little-endian f32 values.
pub fn save_checkpoint(model: &Detector) -> Vec<u8> {
    let run = RunConfig { model: model.cfg.clone(), ..RunConfig::default() };
    let mut manifest = format!("{CKPT_MAGIC}\n{}", run.dump_model());
    let mut data: Vec<u8> = Vec::new();
    let mut push = |kind: &str, name: &str, shape: &[usize], values: &[f64], manifest: &mut String| {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(manifest, "{kind} {name} {} {}", dims.join("x"), data.len());
        for v in values {
            data.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    };
    model.visit(&mut |name, t| push("param", name, t.shape(), t.data(), &mut manifest));
    model.visit_buffers(&mut |name, v| push("buffer", name, &[v.len()], v, &mut manifest));
    let _ = writeln!(manifest, "end {}", data.len());
    let mut out = manifest.into_bytes();
    out.extend_from_slice(&data);
    out
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Detector> {
    let mut at = 0;
    let mut lines: Vec<(usize, &str)> = Vec::new();
    let mut total = None;
    for no in 1.. {
        let rest = &bytes[at..];
        let end = rest.iter().position(|b| *b == b'\n').ok_or(Error::Parse { line: no, msg: "truncated manifest".into() })?;
        let line = std::str::from_utf8(&rest[..end]).map_err(|_| Error::Parse { line: no, msg: "manifest is not UTF-8".into() })?;
        at += end + 1;
        if let Some(n) = line.strip_prefix("end ") {
            total = Some(n.parse::<usize>().map_err(|_| Error::Parse { line: no, msg: "bad byte count".into() })?);
            break;
        }
        lines.push((no, line));
    }
    let data = &bytes[at..];
    if Some(data.len()) != total {
        return Err(Error::Invalid(format!("checkpoint holds {} data bytes, manifest says {total:?}", data.len())));
    }
    if lines.first().map(|l| l.1) != Some(CKPT_MAGIC) {
        return Err(Error::Parse { line: 1, msg: format!("expected {CKPT_MAGIC:?}") });
    }
    let split = lines.iter().position(|(_, l)| l.starts_with("param ") || l.starts_with("buffer ")).unwrap_or(lines.len());
    let cfg_text: String = lines[1..split].iter().map(|(_, l)| format!("{l}\n")).collect();
    let mut run = RunConfig::default();
    run.apply_text(&cfg_text)?;
    let mut model = Detector::new(&run.model, 0)?;

    let mut entries = lines[split..].iter().map(|&(no, l)| {
        let f: Vec<&str> = l.split(' ').collect();
        let bad = |msg: &str| Error::Parse { line: no, msg: msg.into() };
        if f.len() != 4 {
            return Err(bad("expected `kind name shape offset`"));
        }
        let shape = f[2].split('x').map(|d| d.parse::<usize>().map_err(|_| bad("bad shape"))).collect::<Result<Vec<_>>>()?;
        let offset = f[3].parse::<usize>().map_err(|_| bad("bad offset"))?;
        Ok((f[0].to_string(), f[1].to_string(), shape, offset))
    });
    let mut fill = |kind: &str, name: &str, shape: &[usize], dst: &mut [f64]| -> Result<()> {
        let (k, n, s, off) = entries.next().ok_or_else(|| Error::Invalid(format!("checkpoint lacks {name}")))??;
        if k != kind || n != name || s != shape {
            return Err(Error::Invalid(format!("checkpoint entry {k} {n} {s:?} where {kind} {name} {shape:?} was expected")));
        }
        let src = data.get(off..off + 4 * dst.len()).ok_or_else(|| Error::Invalid(format!("{name} runs past the data")))?;
        for (d, c) in dst.iter_mut().zip(src.chunks_exact(4)) {
            *d = f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64;
        }
        Ok(())
    };
    let mut status = Ok(());
    model.visit_mut(&mut |name, t| {
        if status.is_ok() {
            let shape = t.shape().to_vec();
            status = fill("param", name, &shape, t.data_mut());
        }
    });
    model.visit_buffers_mut(&mut |name, v| {
        if status.is_ok() {
            status = fill("buffer", name, &[v.len()], v);
        }
    });
    status?;
    if entries.next().is_some() {
        return Err(Error::Invalid("checkpoint has entries the model does not".into()));
    }
    Ok(model)
}

/// Writes `<stem>.json` and `<stem>.txt` for an evaluation report.
pub fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{stem}.json")), to_fixed_json(report)?)?;
    std::fs::write(dir.join(format!("{stem}.txt")), report.table())?;
    Ok(())
}
