//! The full detector: pillar encoder, backbone and head, with a backward pass through all three.

use std::collections::BTreeMap;

use crate::backbone::{Backbone, BackboneCache, BackboneConfig, BnMode};
use crate::boxes::OrientedBox;
use crate::encoder::{encode_grid, encode_pillar_backward, EncoderWeights, PillarCache, RBFSpec};
use crate::error::{Error, Result};
use crate::head::{Head, HeadCache, HeadConfig, HeadGrad, HeadOutput};
use crate::params::Parameterized;
use crate::pillar::{gather_from, pillarize, scatter_into, GridConfig, PillarGrid, PointCloud};
use crate::rng::Rng;
use crate::targets::decode_item;
use crate::tensor::GridTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub grid: GridConfig,
    pub rbf_count: usize,
    pub rbf_max: f64,
    pub encoder_hidden: usize,
    pub encoder_rounds: usize,
    /// `in_channels` is the pillar feature width.
    pub backbone: BackboneConfig,
    pub head_hidden: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            rbf_count: 16,
            rbf_max: 2.5,
            encoder_hidden: 16,
            encoder_rounds: 2,
            backbone: BackboneConfig::default(),
            head_hidden: 16,
            n_classes: 3,
        }
    }
}

impl ModelConfig {
    /// Small model on the 33-cell grid for CPU training runs.
    pub fn smoke() -> Self {
        Self {
            grid: GridConfig::coarse(),
            encoder_hidden: 8,
            backbone: BackboneConfig { in_channels: 8, widths: [8, 8, 8], ..Default::default() },
            head_hidden: 8,
            ..Default::default()
        }
    }

    /// Tiny model on a 9 x 9 grid, small enough for full finite-difference checks.
    pub fn micro(equivariant: bool) -> Self {
        Self {
            grid: GridConfig::centered(2.25, 0.5, (-3.0, 3.0)).expect("micro grid is valid"),
            rbf_count: 4,
            rbf_max: 2.0,
            encoder_hidden: 3,
            encoder_rounds: 2,
            backbone: BackboneConfig { in_channels: 2, widths: [1, 2, 2], kernel_size: 3, equivariant, ..Default::default() },
            head_hidden: 2,
            n_classes: 2,
        }
    }

    /// Same model with plain convolutions of matched parameter count.
    pub fn plain(&self) -> Self {
        let mut c = self.clone();
        c.backbone.equivariant = false;
        c
    }

    pub fn equivariant(&self) -> bool {
        self.backbone.equivariant
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.backbone.validate()?;
        self.backbone.check_extent(self.grid.grid_cells)?;
        if self.encoder_hidden == 0 || self.head_hidden == 0 || self.n_classes == 0 {
            return Err(Error::Config("encoder_hidden, head_hidden and n_classes must be positive".into()));
        }
        RBFSpec::evenly_spaced(self.rbf_count, self.rbf_max)?;
        Ok(())
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            in_channels: self.backbone.out_channels(),
            hidden: self.head_hidden,
            n_classes: self.n_classes,
            kernel_size: self.backbone.kernel_size,
            equivariant: self.backbone.equivariant,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub rbf: RBFSpec,
    pub encoder: EncoderWeights,
    pub backbone: Backbone,
    pub head: Head,
}

/// A scene prepared for the network: its cloud and pillar assignment.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub cloud: PointCloud,
    pub pillars: PillarGrid,
}

impl PreparedScene {
    pub fn new(cloud: PointCloud, grid: &GridConfig) -> Self {
        let pillars = pillarize(&cloud, grid);
        Self { cloud, pillars }
    }
}

pub struct ForwardCache {
    pillars: Vec<BTreeMap<(usize, usize), PillarCache>>,
    pub backbone: BackboneCache,
    head: HeadCache,
}

impl ForwardCache {
    /// Activation pattern of every ReLU in the network.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut v = Vec::new();
        self.backbone.relu_pattern(&mut v);
        self.head.relu_pattern(&mut v);
        v
    }
}

impl Detector {
    /// Deterministic initialisation; each component draws from its own stream of `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rbf = RBFSpec::evenly_spaced(cfg.rbf_count, cfg.rbf_max)?;
        let encoder = EncoderWeights::random(
            cfg.rbf_count,
            cfg.encoder_hidden,
            cfg.backbone.in_channels,
            cfg.encoder_rounds,
            &mut Rng::derived(seed, 1),
        );
        let backbone = Backbone::random(&cfg.backbone, &mut Rng::derived(seed, 2))?;
        let head = Head::random(&cfg.head_config(), &mut Rng::derived(seed, 3))?;
        Ok(Self { cfg: cfg.clone(), rbf, encoder, backbone, head })
    }

    /// Pseudo feature map `[B, beta, N, N]` of a batch, with the encoder caches.
    pub fn encode(&self, scenes: &[&PreparedScene]) -> Result<(GridTensor, Vec<BTreeMap<(usize, usize), PillarCache>>)> {
        let n = self.cfg.grid.grid_cells;
        let mut bev = GridTensor::zeros(&[scenes.len(), self.cfg.backbone.in_channels, n, n]);
        let mut caches = Vec::with_capacity(scenes.len());
        for (b, s) in scenes.iter().enumerate() {
            let enc = encode_grid(&s.cloud, &s.pillars, &self.encoder, &self.rbf)?;
            scatter_into(&mut bev, b, &s.pillars, &enc.features)?;
            caches.push(enc.caches);
        }
        Ok((bev, caches))
    }

    pub fn forward(&self, scenes: &[&PreparedScene], mode: BnMode) -> Result<(HeadOutput, ForwardCache)> {
        let (bev, pillars) = self.encode(scenes)?;
        let (feats, backbone) = self.backbone.features(&bev, mode)?;
        let (out, head) = self.head.forward(&feats)?;
        Ok((out, ForwardCache { pillars, backbone, head }))
    }

    /// Accumulates parameter gradients into `grads`.
    pub fn backward(&self, scenes: &[&PreparedScene], cache: &ForwardCache, grad: &HeadGrad, grads: &mut Detector) -> Result<()> {
        let g_feats = self.head.backward(&cache.head, grad, &mut grads.head)?;
        let g_bev = self.backbone.backward(&cache.backbone, &g_feats, &mut grads.backbone)?;
        for (b, (s, pc)) in scenes.iter().zip(&cache.pillars).enumerate() {
            for (key, g) in gather_from(&g_bev, b, &s.pillars) {
                encode_pillar_backward(&pc[&key], &self.encoder, &g, &mut grads.encoder);
            }
        }
        Ok(())
    }

    /// Runs the network on one cloud with running batch-norm statistics.
    pub fn predict(&self, cloud: &PointCloud) -> Result<HeadOutput> {
        let scene = PreparedScene::new(cloud.clone(), &self.cfg.grid);
        Ok(self.forward(&[&scene], BnMode::Eval)?.0)
    }

    pub fn detect(&self, cloud: &PointCloud, max_dets: usize, score_thresh: f64) -> Result<Vec<OrientedBox>> {
        let out = self.predict(cloud)?;
        Ok(decode_item(&out, 0, &self.cfg.grid, max_dets, score_thresh))
    }

    /// Visits batch-norm running statistics.
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.backbone.visit_buffers(&mut |n, v| f(&format!("backbone.{n}"), v));
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.backbone.visit_buffers_mut(&mut |n, v| f(&format!("backbone.{n}"), v));
    }
}

impl Parameterized for Detector {
    fn visit(&self, f: &mut dyn FnMut(&str, &GridTensor)) {
        self.encoder.visit(&mut |n, t| f(&format!("encoder.{n}"), t));
        self.backbone.visit(&mut |n, t| f(&format!("backbone.{n}"), t));
        self.head.visit(&mut |n, t| f(&format!("head.{n}"), t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut GridTensor)) {
        self.encoder.visit_mut(&mut |n, t| f(&format!("encoder.{n}"), t));
        self.backbone.visit_mut(&mut |n, t| f(&format!("backbone.{n}"), t));
        self.head.visit_mut(&mut |n, t| f(&format!("head.{n}"), t));
    }
}
