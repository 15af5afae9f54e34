//! Browser bindings for the static demo page in `www/`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use eqbev::audit::equivariance_residuals;
use eqbev::boxes::OrientedBox;
use eqbev::model::{Detector, ModelConfig, PreparedScene};
use eqbev::scene::{generate_scene, rotate_scene, Scene, SceneSpec};

#[derive(Serialize)]
struct SceneView {
    half_extent: f64,
    /// `[x, y, intensity]` per point.
    points: Vec<[f64; 3]>,
    boxes: Vec<BoxView>,
}

#[derive(Serialize)]
struct BoxView {
    corners: [(f64, f64); 4],
    center: (f64, f64),
    yaw: f64,
    class_id: usize,
}

impl From<&OrientedBox> for BoxView {
    fn from(b: &OrientedBox) -> Self {
        Self { corners: b.corners_bev(), center: (b.center[0], b.center[1]), yaw: b.yaw, class_id: b.class_id }
    }
}

#[derive(Serialize)]
struct ResidualRow {
    layer: String,
    r: usize,
    residual: f64,
}

/// One synthetic scene and two randomly initialised detectors, equivariant and plain.
#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
    equivariant: Detector,
    plain: Detector,
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(scene_seed: u32, model_seed: u32) -> Result<Demo, JsError> {
        let cfg = ModelConfig::smoke();
        let scene = generate_scene(&SceneSpec { seed: scene_seed.into(), ..Default::default() }, &cfg.grid).map_err(js_err)?;
        Ok(Self {
            scene,
            equivariant: Detector::new(&cfg, model_seed.into()).map_err(js_err)?,
            plain: Detector::new(&cfg.plain(), model_seed.into()).map_err(js_err)?,
        })
    }

    #[wasm_bindgen(getter)]
    pub fn grid_cells(&self) -> usize {
        self.equivariant.cfg.grid.grid_cells
    }

    fn rotated(&self, angle_deg: f64) -> Scene {
        rotate_scene(&self.scene, angle_deg.to_radians(), self.equivariant.cfg.grid.center())
    }

    /// The scene turned counter-clockwise by `angle_deg` about the grid center, as JSON.
    pub fn scene_json(&self, angle_deg: f64) -> String {
        let s = self.rotated(angle_deg);
        let view = SceneView {
            half_extent: self.equivariant.cfg.grid.x_range.1,
            points: s.cloud.points.iter().map(|p| [p.x, p.y, p.intensity]).collect(),
            boxes: s.gt.iter().map(BoxView::from).collect(),
        };
        serde_json::to_string(&view).expect("scene view serializes")
    }

    /// Class-max heat logits of the rotated scene, min-max scaled to `[0, 1]`, row-major with
    /// the first row at the largest `y`.
    pub fn heatmap(&self, angle_deg: f64, equivariant: bool) -> Result<Vec<f64>, JsError> {
        let model = if equivariant { &self.equivariant } else { &self.plain };
        let out = model.predict(&self.rotated(angle_deg).cloud).map_err(js_err)?;
        let logits = &out.heat_logits;
        let (c, n) = (logits.dim(1), logits.dim(2));
        let mut v = Vec::with_capacity(n * n);
        for row in (0..n).rev() {
            for col in 0..n {
                v.push((0..c).map(|k| logits.get(&[0, k, row, col])).fold(f64::NEG_INFINITY, f64::max));
            }
        }
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        Ok(v.into_iter().map(|x| (x - lo) / span).collect())
    }

    /// Commuting-diagram residuals per layer and rotation, as JSON rows.
    pub fn residuals_json(&self, equivariant: bool) -> Result<String, JsError> {
        let model = if equivariant { &self.equivariant } else { &self.plain };
        let prepared = PreparedScene::new(self.scene.cloud.clone(), &model.cfg.grid);
        let rows: Vec<ResidualRow> = equivariance_residuals(model, &[&prepared], 0)
            .map_err(js_err)?
            .into_iter()
            .map(|r| ResidualRow { layer: r.name, r: r.r, residual: r.residual })
            .collect();
        Ok(serde_json::to_string(&rows).expect("rows serialize"))
    }
}
