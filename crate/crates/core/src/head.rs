//! Center-based detection head.
//!
//! On P4 features the head stays equivariant up to its readouts: scalar outputs
//! (heatmap logits, log sizes, height) average their four orientation slices, and
//! vector outputs (offset, heading) combine the slices of one channel with the unit
//! vector each slice points along. Under a grid rotation the slices shift by one step
//! and the vectors rotate with them, so a rotated input yields rotated boxes.

use crate::backbone::{Tying, TiedConv};
use crate::conv::ConvSpec;
use crate::error::{shape_err, Result};
use crate::params::Parameterized;
use crate::rng::Rng;
use crate::tensor::GridTensor;

/// World direction `(x, y)` of orientation slice `s`.
pub const SLICE_DIRECTIONS: [(f64, f64); 4] = [(1.0, 0.0), (0.0, -1.0), (-1.0, 0.0), (0.0, 1.0)];

/// Logit giving an initial heatmap of about 0.1.
pub const HEAT_PRIOR_LOGIT: f64 = -2.19;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    /// Base channels of the backbone features.
    pub in_channels: usize,
    /// Base channels of the two shared layers; doubled for the plain ablation.
    pub hidden: usize,
    pub n_classes: usize,
    pub kernel_size: usize,
    pub equivariant: bool,
}

impl HeadConfig {
    fn group(&self) -> usize {
        if self.equivariant {
            4
        } else {
            1
        }
    }

    fn hidden_base(&self) -> usize {
        if self.equivariant {
            self.hidden
        } else {
            2 * self.hidden
        }
    }

    /// Base output channels of each branch, in [`BRANCH_NAMES`] order.
    fn branch_channels(&self) -> [usize; 5] {
        let v = if self.equivariant { 1 } else { 2 };
        [self.n_classes, 3, 1, v, v]
    }
}

pub const BRANCH_NAMES: [&str; 5] = ["heat", "size", "z", "offset", "yaw"];

/// Convolution plus a bias shared by the orientation slices of a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasedConv {
    pub conv: TiedConv,
    pub bias: GridTensor,
}

impl BiasedConv {
    fn forward(&self, x: &GridTensor, group: usize) -> Result<GridTensor> {
        let mut y = self.conv.forward(x)?;
        let c = y.dim(1);
        let plane = y.dim(2) * y.dim(3);
        for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
            let b = self.bias.data()[(i % c) / group];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(y)
    }

    fn backward(&self, x: &GridTensor, g: &GridTensor, group: usize, grads: &mut BiasedConv) -> Result<GridTensor> {
        let c = g.dim(1);
        let plane = g.dim(2) * g.dim(3);
        for (i, chunk) in g.data().chunks(plane).enumerate() {
            grads.bias.data_mut()[(i % c) / group] += chunk.iter().sum::<f64>();
        }
        let (gx, gw) = self.conv.backward(x, g)?;
        grads.conv.weight.add_assign(&gw)?;
        Ok(gx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub cfg: HeadConfig,
    pub shared: [BiasedConv; 2],
    pub branches: Vec<BiasedConv>,
}

/// Per-cell predictions, all `[B, C, Y, X]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub heat_logits: GridTensor,
    /// Sigmoid of the logits.
    pub heatmap: GridTensor,
    /// Sub-cell center `(dx, dy)` in cell units from the cell's lower corner.
    pub offset: GridTensor,
    pub size_log: GridTensor,
    /// `(sin, cos)` of the heading, unnormalized.
    pub yaw_vec: GridTensor,
    pub z_center: GridTensor,
}

/// Loss gradients with respect to the head outputs (heatmap by its logits).
#[derive(Debug, Clone)]
pub struct HeadGrad {
    pub heat_logits: GridTensor,
    pub offset: GridTensor,
    pub size_log: GridTensor,
    pub yaw_vec: GridTensor,
    pub z_center: GridTensor,
}

pub struct HeadCache {
    input: GridTensor,
    h1: GridTensor,
    h2: GridTensor,
}

impl HeadCache {
    /// Which ReLU units are active, in a fixed order.
    pub fn relu_pattern(&self, out: &mut Vec<bool>) {
        out.extend(self.h1.data().iter().chain(self.h2.data()).map(|v| *v > 0.0));
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn scalar_readout(x: &GridTensor) -> GridTensor {
    let (b, c4, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let plane = h * w;
    let mut out = GridTensor::zeros(&[b, c4 / 4, h, w]);
    for (src, dst) in x.data().chunks(4 * plane).zip(out.data_mut().chunks_mut(plane)) {
        for p in 0..plane {
            dst[p] = (src[p] + src[plane + p] + src[2 * plane + p] + src[3 * plane + p]) / 4.0;
        }
    }
    out
}

fn scalar_readout_backward(g: &GridTensor) -> GridTensor {
    let (b, c, h, w) = (g.dim(0), g.dim(1), g.dim(2), g.dim(3));
    let plane = h * w;
    let mut out = GridTensor::zeros(&[b, 4 * c, h, w]);
    for (src, dst) in g.data().chunks(plane).zip(out.data_mut().chunks_mut(4 * plane)) {
        for s in 0..4 {
            for p in 0..plane {
                dst[s * plane + p] = src[p] / 4.0;
            }
        }
    }
    out
}

/// `[B, 4, Y, X]` slices to the world vector `[B, 2, Y, X]` as `(x, y)`.
fn vector_readout(x: &GridTensor) -> GridTensor {
    let (b, h, w) = (x.dim(0), x.dim(2), x.dim(3));
    let plane = h * w;
    let mut out = GridTensor::zeros(&[b, 2, h, w]);
    for (src, dst) in x.data().chunks(4 * plane).zip(out.data_mut().chunks_mut(2 * plane)) {
        for p in 0..plane {
            let (mut vx, mut vy) = (0.0, 0.0);
            for (s, (ex, ey)) in SLICE_DIRECTIONS.iter().enumerate() {
                vx += src[s * plane + p] * ex;
                vy += src[s * plane + p] * ey;
            }
            dst[p] = vx;
            dst[plane + p] = vy;
        }
    }
    out
}

fn vector_readout_backward(g: &GridTensor) -> GridTensor {
    let (b, h, w) = (g.dim(0), g.dim(2), g.dim(3));
    let plane = h * w;
    let mut out = GridTensor::zeros(&[b, 4, h, w]);
    for (src, dst) in g.data().chunks(2 * plane).zip(out.data_mut().chunks_mut(4 * plane)) {
        for (s, (ex, ey)) in SLICE_DIRECTIONS.iter().enumerate() {
            for p in 0..plane {
                dst[s * plane + p] = src[p] * ex + src[plane + p] * ey;
            }
        }
    }
    out
}

/// Swaps the two channels of a `[B, 2, Y, X]` map.
fn swap_pair(x: &GridTensor) -> GridTensor {
    let plane = x.dim(2) * x.dim(3);
    let mut out = x.clone();
    for (src, dst) in x.data().chunks(2 * plane).zip(out.data_mut().chunks_mut(2 * plane)) {
        dst[..plane].copy_from_slice(&src[plane..]);
        dst[plane..].copy_from_slice(&src[..plane]);
    }
    out
}

impl Head {
    pub fn random(cfg: &HeadConfig, rng: &mut Rng) -> Result<Self> {
        let k = cfg.kernel_size;
        let (first, rest) = if cfg.equivariant { (Tying::Group, Tying::Group) } else { (Tying::Plain, Tying::Plain) };
        let hb = cfg.hidden_base();
        let layer = |tying: Tying, spec: ConvSpec, rng: &mut Rng| BiasedConv {
            conv: TiedConv::random(tying, spec, rng),
            bias: GridTensor::zeros(&[spec.out_channels]),
        };
        let shared = [
            layer(first, ConvSpec::same(cfg.in_channels, hb, k, 1)?, rng),
            layer(rest, ConvSpec::same(hb, hb, k, 1)?, rng),
        ];
        let mut branches = Vec::with_capacity(5);
        for (i, &c) in cfg.branch_channels().iter().enumerate() {
            let mut b = layer(rest, ConvSpec::same(hb, c, 1, 1)?, rng);
            // regression branches start small so early boxes stay near their priors
            let scale = if i == 0 { 1.0 } else { 0.1 };
            b.conv.weight.scale(scale);
            if i == 0 {
                b.bias.data_mut().fill(HEAT_PRIOR_LOGIT);
            }
            branches.push(b);
        }
        Ok(Self { cfg: cfg.clone(), shared, branches })
    }

    pub fn forward(&self, features: &GridTensor) -> Result<(HeadOutput, HeadCache)> {
        let g = self.cfg.group();
        if features.rank() != 4 || features.dim(1) != g * self.cfg.in_channels {
            return shape_err(format!("head expects {} channels, got {:?}", g * self.cfg.in_channels, features.shape()));
        }
        let h1 = self.shared[0].forward(features, g)?.map(|v| v.max(0.0));
        let h2 = self.shared[1].forward(&h1, g)?.map(|v| v.max(0.0));
        let raw: Vec<GridTensor> = self.branches.iter().map(|b| b.forward(&h2, g)).collect::<Result<_>>()?;
        let (heat_logits, size_log, z_center, offset_v, yaw_xy) = if self.cfg.equivariant {
            (
                scalar_readout(&raw[0]),
                scalar_readout(&raw[1]),
                scalar_readout(&raw[2]),
                vector_readout(&raw[3]),
                vector_readout(&raw[4]),
            )
        } else {
            (raw[0].clone(), raw[1].clone(), raw[2].clone(), raw[3].clone(), swap_pair(&raw[4]))
        };
        let out = HeadOutput {
            heatmap: heat_logits.map(sigmoid),
            heat_logits,
            offset: offset_v.map(|v| v + 0.5),
            size_log,
            // (vx, vy) = (cos, sin) becomes (sin, cos)
            yaw_vec: if self.cfg.equivariant { swap_pair(&yaw_xy) } else { raw[4].clone() },
            z_center,
        };
        Ok((out, HeadCache { input: features.clone(), h1, h2 }))
    }

    /// Gradient with respect to the head input; parameter gradients accumulate into `grads`.
    pub fn backward(&self, cache: &HeadCache, grad: &HeadGrad, grads: &mut Head) -> Result<GridTensor> {
        let g = self.cfg.group();
        let raw_grads = if self.cfg.equivariant {
            [
                scalar_readout_backward(&grad.heat_logits),
                scalar_readout_backward(&grad.size_log),
                scalar_readout_backward(&grad.z_center),
                vector_readout_backward(&grad.offset),
                vector_readout_backward(&swap_pair(&grad.yaw_vec)),
            ]
        } else {
            [
                grad.heat_logits.clone(),
                grad.size_log.clone(),
                grad.z_center.clone(),
                grad.offset.clone(),
                grad.yaw_vec.clone(),
            ]
        };
        let mut gh2 = GridTensor::zeros(cache.h2.shape());
        for ((b, gb), rg) in self.branches.iter().zip(grads.branches.iter_mut()).zip(&raw_grads) {
            gh2.add_assign(&b.backward(&cache.h2, rg, g, gb)?)?;
        }
        let gh2 = cache.h2.zip_map(&gh2, |y, d| if y > 0.0 { d } else { 0.0 })?;
        let gh1 = self.shared[1].backward(&cache.h1, &gh2, g, &mut grads.shared[1])?;
        let gh1 = cache.h1.zip_map(&gh1, |y, d| if y > 0.0 { d } else { 0.0 })?;
        self.shared[0].backward(&cache.input, &gh1, g, &mut grads.shared[0])
    }
}

impl Parameterized for Head {
    fn visit(&self, f: &mut dyn FnMut(&str, &GridTensor)) {
        for (i, l) in self.shared.iter().enumerate() {
            f(&format!("shared{i}.weight"), &l.conv.weight);
            f(&format!("shared{i}.bias"), &l.bias);
        }
        for (name, l) in BRANCH_NAMES.iter().zip(&self.branches) {
            f(&format!("{name}.weight"), &l.conv.weight);
            f(&format!("{name}.bias"), &l.bias);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut GridTensor)) {
        for (i, l) in self.shared.iter_mut().enumerate() {
            f(&format!("shared{i}.weight"), &mut l.conv.weight);
            f(&format!("shared{i}.bias"), &mut l.bias);
        }
        for (name, l) in BRANCH_NAMES.iter().zip(self.branches.iter_mut()) {
            f(&format!("{name}.weight"), &mut l.conv.weight);
            f(&format!("{name}.bias"), &mut l.bias);
        }
    }
}

/// Runs the head on backbone features.
pub fn head_forward(features: &GridTensor, head: &Head) -> Result<HeadOutput> {
    Ok(head.forward(features)?.0)
}
