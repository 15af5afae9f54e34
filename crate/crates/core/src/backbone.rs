//! P4 group-convolutional BEV backbone.
//!
//! A P4 feature `[B, C, 4, Y, X]` is stored contiguously, so it is also a planar map
//! `[B, 4C, Y, X]` with channel index `c * 4 + s`. Lifting and group convolutions are
//! evaluated as one planar convolution whose kernel is assembled from rotated copies of
//! the learned weights:
//!
//! ```text
//! lifting:  big[c'*4 + s, c]        = rot_s(w[c', c])
//! group:    big[c'*4 + s, c*4 + s'] = rot_s(w[c', c, (s' - s) mod 4])
//! ```
//!
//! The same assembly serves transposed group convolutions, which are adjoints of
//! equivariant maps and therefore equivariant themselves. Kernel gradients are folded
//! back through the transpose of the assembly.
//!
//! Strided layers commute exactly with grid rotations when every extent is odd, so grids
//! are sized `N = 4k + 1`: a stride-2 layer maps `N` to `(N + 1) / 2` and the matching
//! transposed layer maps it back.

use crate::conv::{conv2d, conv2d_backward, conv2d_transpose, conv2d_transpose_backward, ConvSpec};
use crate::error::{shape_err, Error, Result};
use crate::group::{rotate_plane, RotationC4};
use crate::params::{normal_tensor, Parameterized};
use crate::rng::Rng;
use crate::tensor::GridTensor;

/// Features over P4: `[B, C, 4, Y, X]` with `Y == X`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedFeature {
    pub tensor: GridTensor,
}

impl LiftedFeature {
    pub fn new(tensor: GridTensor) -> Result<Self> {
        if tensor.rank() != 5 || tensor.dim(2) != 4 {
            return shape_err(format!("P4 feature must be [B,C,4,Y,X], got {:?}", tensor.shape()));
        }
        if tensor.dim(3) != tensor.dim(4) {
            return Err(Error::NonSquare(tensor.dim(3), tensor.dim(4)));
        }
        Ok(Self { tensor })
    }

    /// View `[B, 4C, Y, X]` with channel index `c * 4 + s`.
    pub fn into_planar(self) -> GridTensor {
        let s = self.tensor.shape().to_vec();
        self.tensor.reshape(&[s[0], s[1] * 4, s[3], s[4]]).expect("same length")
    }

    pub fn from_planar(x: GridTensor) -> Result<Self> {
        if x.rank() != 4 || !x.dim(1).is_multiple_of(4) {
            return shape_err(format!("planar view {:?} has no group axis", x.shape()));
        }
        let s = x.shape().to_vec();
        Self::new(x.reshape(&[s[0], s[1] / 4, 4, s[2], s[3]])?)
    }

    pub fn channels(&self) -> usize {
        self.tensor.dim(1)
    }
}

/// How learned weights become a planar kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tying {
    Plain,
    Lifting,
    Group,
}

impl Tying {
    /// `(in, out)` multipliers from base to planar channel counts.
    fn multipliers(self) -> (usize, usize) {
        match self {
            Tying::Plain => (1, 1),
            Tying::Lifting => (1, 4),
            Tying::Group => (4, 4),
        }
    }

    /// Shape of the learned weight for a base spec.
    pub fn weight_shape(self, spec: &ConvSpec) -> Vec<usize> {
        let [a, b, k, _] = spec.kernel_shape();
        match self {
            Tying::Group => vec![a, b, 4, k, k],
            _ => vec![a, b, k, k],
        }
    }

    /// Planar spec over effective channel counts.
    pub fn planar_spec(self, spec: &ConvSpec) -> ConvSpec {
        let (mi, mo) = self.multipliers();
        ConvSpec { in_channels: spec.in_channels * mi, out_channels: spec.out_channels * mo, ..*spec }
    }

    /// Assembles the planar kernel. `w` is indexed `[a, b, ..]` where `a` is the
    /// forward-conv output axis; for transposed specs the roles of in/out swap with it.
    pub fn expand(self, w: &GridTensor) -> GridTensor {
        let (a_n, b_n, k) = (w.dim(0), w.dim(1), w.dim(w.rank() - 1));
        let kk = k * k;
        match self {
            Tying::Plain => w.clone(),
            Tying::Lifting => {
                let mut big = GridTensor::zeros(&[a_n * 4, b_n, k, k]);
                let (src, dst) = (w.data(), big.data_mut());
                for a in 0..a_n {
                    for s in 0..4 {
                        for b in 0..b_n {
                            let from = (a * b_n + b) * kk;
                            let to = ((a * 4 + s) * b_n + b) * kk;
                            rotate_plane(&src[from..from + kk], &mut dst[to..to + kk], k, RotationC4::new(s as i64));
                        }
                    }
                }
                big
            }
            Tying::Group => {
                let mut big = GridTensor::zeros(&[a_n * 4, b_n * 4, k, k]);
                let (src, dst) = (w.data(), big.data_mut());
                for a in 0..a_n {
                    for s in 0..4 {
                        for b in 0..b_n {
                            for s2 in 0..4 {
                                let d = (s2 + 4 - s) % 4;
                                let from = ((a * b_n + b) * 4 + d) * kk;
                                let to = ((a * 4 + s) * b_n * 4 + b * 4 + s2) * kk;
                                rotate_plane(&src[from..from + kk], &mut dst[to..to + kk], k, RotationC4::new(s as i64));
                            }
                        }
                    }
                }
                big
            }
        }
    }

    /// Transpose of [`expand`](Self::expand): gradient of the learned weight from the
    /// gradient of the planar kernel.
    pub fn fold(self, g_big: &GridTensor, weight_shape: &[usize]) -> GridTensor {
        let (a_n, b_n, k) = (weight_shape[0], weight_shape[1], *weight_shape.last().unwrap());
        let kk = k * k;
        let mut g = GridTensor::zeros(weight_shape);
        let mut tmp = vec![0.0; kk];
        match self {
            Tying::Plain => return g_big.clone(),
            Tying::Lifting => {
                let (src, dst) = (g_big.data(), g.data_mut());
                for a in 0..a_n {
                    for s in 0..4 {
                        for b in 0..b_n {
                            let from = ((a * 4 + s) * b_n + b) * kk;
                            rotate_plane(&src[from..from + kk], &mut tmp, k, RotationC4::new(s as i64).inverse());
                            let to = (a * b_n + b) * kk;
                            dst[to..to + kk].iter_mut().zip(&tmp).for_each(|(d, v)| *d += v);
                        }
                    }
                }
            }
            Tying::Group => {
                let (src, dst) = (g_big.data(), g.data_mut());
                for a in 0..a_n {
                    for s in 0..4 {
                        for b in 0..b_n {
                            for s2 in 0..4 {
                                let d = (s2 + 4 - s) % 4;
                                let from = ((a * 4 + s) * b_n * 4 + b * 4 + s2) * kk;
                                rotate_plane(&src[from..from + kk], &mut tmp, k, RotationC4::new(s as i64).inverse());
                                let to = ((a * b_n + b) * 4 + d) * kk;
                                dst[to..to + kk].iter_mut().zip(&tmp).for_each(|(d, v)| *d += v);
                            }
                        }
                    }
                }
            }
        }
        g
    }
}

/// A convolution (or transposed convolution) with tied weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TiedConv {
    pub tying: Tying,
    /// Spec over base channel counts.
    pub spec: ConvSpec,
    pub weight: GridTensor,
}

impl TiedConv {
    pub fn new(tying: Tying, spec: ConvSpec, weight: GridTensor) -> Result<Self> {
        if tying == Tying::Lifting && spec.transposed {
            return Err(Error::Config("lifting convolution has no transposed form".into()));
        }
        if weight.shape() != tying.weight_shape(&spec) {
            return shape_err(format!("{tying:?} weight {:?}, expected {:?}", weight.shape(), tying.weight_shape(&spec)));
        }
        Ok(Self { tying, spec, weight })
    }

    /// He-style initialisation over the effective fan-in.
    pub fn random(tying: Tying, spec: ConvSpec, rng: &mut Rng) -> Self {
        let fan_in = tying.planar_spec(&spec).in_channels * spec.kernel_size * spec.kernel_size;
        let fan_in = if spec.transposed {
            // each output sums over ~K^2 / s^2 taps of every input channel
            fan_in / (spec.stride * spec.stride)
        } else {
            fan_in
        };
        let w = normal_tensor(&tying.weight_shape(&spec), (2.0 / fan_in.max(1) as f64).sqrt(), rng);
        Self { tying, spec, weight: w }
    }

    pub fn forward(&self, x: &GridTensor) -> Result<GridTensor> {
        let big = self.tying.expand(&self.weight);
        let ps = self.tying.planar_spec(&self.spec);
        if self.spec.transposed {
            conv2d_transpose(x, &big, &ps)
        } else {
            conv2d(x, &big, &ps)
        }
    }

    /// `(grad_input, grad_weight)`.
    pub fn backward(&self, x: &GridTensor, grad_out: &GridTensor) -> Result<(GridTensor, GridTensor)> {
        let big = self.tying.expand(&self.weight);
        let ps = self.tying.planar_spec(&self.spec);
        let (gx, gbig) = if self.spec.transposed {
            conv2d_transpose_backward(x, &big, &ps, grad_out)?
        } else {
            conv2d_backward(x, &big, &ps, grad_out)?
        };
        Ok((gx, self.tying.fold(&gbig, self.weight.shape())))
    }
}

/// Lifts a planar map onto P4: slice `s` is `conv2d(x, rotate_kernel(base, s))`.
pub fn lifting_conv(x: &GridTensor, base_kernel: &GridTensor, spec: &ConvSpec) -> Result<LiftedFeature> {
    square(x)?;
    let out = TiedConv::new(Tying::Lifting, *spec, base_kernel.clone())?.forward(x)?;
    LiftedFeature::from_planar(out)
}

/// Group convolution over P4 with kernel `[C', C, 4, K, K]`.
pub fn group_conv(x: &LiftedFeature, kernel: &GridTensor, spec: &ConvSpec) -> Result<LiftedFeature> {
    if spec.transposed {
        return Err(Error::Config("use group_conv_transpose for transposed specs".into()));
    }
    group_apply(x, kernel, spec)
}

/// Adjoint of [`group_conv`]; kernel `[C_in, C_out, 4, K, K]`.
pub fn group_conv_transpose(x: &LiftedFeature, kernel: &GridTensor, spec: &ConvSpec) -> Result<LiftedFeature> {
    group_apply(x, kernel, &spec.transposed())
}

fn group_apply(x: &LiftedFeature, kernel: &GridTensor, spec: &ConvSpec) -> Result<LiftedFeature> {
    if kernel.rank() != 5 || kernel.dim(2) != 4 {
        return shape_err(format!("group kernel must be [.., .., 4, K, K], got {:?}", kernel.shape()));
    }
    let out = TiedConv::new(Tying::Group, *spec, kernel.clone())?.forward(&x.clone().into_planar())?;
    LiftedFeature::from_planar(out)
}

fn square(x: &GridTensor) -> Result<()> {
    if x.rank() != 4 {
        return shape_err(format!("planar map must be [B,C,Y,X], got {:?}", x.shape()));
    }
    if x.dim(2) != x.dim(3) {
        return Err(Error::NonSquare(x.dim(2), x.dim(3)));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch-norm state. Statistics of channel `c` pool every element of the `group`
/// consecutive planar channels `c*group .. (c+1)*group`, so a P4 channel shares one
/// mean and variance across its four orientations.
#[derive(Debug, Clone, PartialEq)]
pub struct BNState {
    pub group: usize,
    pub scale: GridTensor,
    pub shift: GridTensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BNState {
    pub fn new(channels: usize, group: usize) -> Self {
        Self {
            group,
            scale: GridTensor::full(&[channels], 1.0),
            shift: GridTensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

/// Intermediates of one batch-norm application.
#[derive(Debug, Clone)]
pub struct BnCache {
    mode: BnMode,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance, for the running estimate.
    pub batch_var: Vec<f64>,
}

/// Batch norm over a planar view `[B, C*group, Y, X]`; does not touch running statistics.
pub fn batch_norm_planar(x: &GridTensor, st: &BNState, mode: BnMode) -> Result<(GridTensor, BnCache)> {
    let c = st.channels();
    if x.rank() != 4 || x.dim(1) != c * st.group {
        return shape_err(format!("batch norm over {c}x{} channels, input {:?}", st.group, x.shape()));
    }
    x.check_finite("batch norm input")?;
    let (b, plane) = (x.dim(0), x.dim(2) * x.dim(3));
    let chunk = st.group * plane;
    let count = b * chunk;
    let block = |bi: usize, ci: usize| {
        let start = (bi * c + ci) * chunk;
        start..start + chunk
    };
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let mut unbiased = vec![0.0; c];
    match mode {
        BnMode::Train => {
            if count < 2 {
                return Err(Error::Invalid("batch norm needs at least 2 samples per channel in train mode".into()));
            }
            for ci in 0..c {
                let m = (0..b).map(|bi| x.data()[block(bi, ci)].iter().sum::<f64>()).sum::<f64>() / count as f64;
                let ss: f64 = (0..b)
                    .map(|bi| x.data()[block(bi, ci)].iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                    .sum();
                mean[ci] = m;
                var[ci] = ss / count as f64;
                unbiased[ci] = ss / (count - 1) as f64;
            }
        }
        BnMode::Eval => {
            mean.copy_from_slice(&st.running_mean);
            var.copy_from_slice(&st.running_var);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + st.eps).sqrt()).collect();
    let mut normalized = vec![0.0; x.len()];
    let mut out = GridTensor::zeros(x.shape());
    for bi in 0..b {
        for ci in 0..c {
            let (g, h) = (st.scale.data()[ci], st.shift.data()[ci]);
            for i in block(bi, ci) {
                let n = (x.data()[i] - mean[ci]) * inv_std[ci];
                normalized[i] = n;
                out.data_mut()[i] = g * n + h;
            }
        }
    }
    Ok((out, BnCache { mode, normalized, inv_std, batch_mean: mean, batch_var: unbiased }))
}

/// `(grad_input, grad_scale, grad_shift)`.
pub fn batch_norm_planar_backward(
    cache: &BnCache,
    st: &BNState,
    grad_out: &GridTensor,
) -> (GridTensor, Vec<f64>, Vec<f64>) {
    let c = st.channels();
    let (b, plane) = (grad_out.dim(0), grad_out.dim(2) * grad_out.dim(3));
    let chunk = st.group * plane;
    let count = (b * chunk) as f64;
    let block = |bi: usize, ci: usize| {
        let start = (bi * c + ci) * chunk;
        start..start + chunk
    };
    let g = grad_out.data();
    let mut gscale = vec![0.0; c];
    let mut gshift = vec![0.0; c];
    for ci in 0..c {
        for bi in 0..b {
            for i in block(bi, ci) {
                gshift[ci] += g[i];
                gscale[ci] += g[i] * cache.normalized[i];
            }
        }
    }
    let mut gx = GridTensor::zeros(grad_out.shape());
    for ci in 0..c {
        let k = st.scale.data()[ci] * cache.inv_std[ci];
        let (mg, mgn) = (gshift[ci] / count, gscale[ci] / count);
        for bi in 0..b {
            for i in block(bi, ci) {
                gx.data_mut()[i] = match cache.mode {
                    BnMode::Train => k * (g[i] - mg - cache.normalized[i] * mgn),
                    BnMode::Eval => k * g[i],
                };
            }
        }
    }
    (gx, gscale, gshift)
}

impl BNState {
    /// Folds batch statistics into the running estimates.
    pub fn update_running(&mut self, cache: &BnCache) {
        let m = self.momentum;
        for ci in 0..self.channels() {
            self.running_mean[ci] = (1.0 - m) * self.running_mean[ci] + m * cache.batch_mean[ci];
            self.running_var[ci] = (1.0 - m) * self.running_var[ci] + m * cache.batch_var[ci];
        }
    }
}

/// Batch norm of a P4 feature with statistics shared by the four orientations of a channel.
pub fn equivariant_batch_norm(x: &LiftedFeature, state: &mut BNState, mode: BnMode) -> Result<LiftedFeature> {
    assert_eq!(state.group, 4, "P4 batch norm must pool statistics over the group axis");
    if x.channels() != state.channels() {
        return shape_err(format!("{} channels vs batch norm over {}", x.channels(), state.channels()));
    }
    let (out, cache) = batch_norm_planar(&x.clone().into_planar(), state, mode)?;
    if mode == BnMode::Train {
        state.update_running(&cache);
    }
    LiftedFeature::from_planar(out)
}

pub fn relu(x: &GridTensor) -> GridTensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_p4(x: &LiftedFeature) -> LiftedFeature {
    LiftedFeature { tensor: relu(&x.tensor) }
}

/// Gradient of ReLU given its output.
pub fn relu_backward(out: &GridTensor, grad: &GridTensor) -> GridTensor {
    out.zip_map(grad, |y, g| if y > 0.0 { g } else { 0.0 }).expect("same shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolMode {
    #[default]
    Max,
    Mean,
}

/// Reduction over the group axis: `[B, C, 4, Y, X] -> [B, C, Y, X]`.
pub fn group_pool_with(x: &LiftedFeature, mode: PoolMode) -> GridTensor {
    let s = x.tensor.shape();
    let (outer, plane) = (s[0] * s[1], s[3] * s[4]);
    let mut out = GridTensor::zeros(&[s[0], s[1], s[3], s[4]]);
    for (src, dst) in x.tensor.data().chunks(4 * plane).zip(out.data_mut().chunks_mut(plane)).take(outer) {
        for (p, d) in dst.iter_mut().enumerate() {
            let v = [src[p], src[plane + p], src[2 * plane + p], src[3 * plane + p]];
            *d = match mode {
                PoolMode::Max => v[0].max(v[1]).max(v[2]).max(v[3]),
                PoolMode::Mean => (v[0] + v[1] + v[2] + v[3]) / 4.0,
            };
        }
    }
    out
}

/// Elementwise maximum over the group axis.
pub fn group_pool(x: &LiftedFeature) -> GridTensor {
    group_pool_with(x, PoolMode::Max)
}

/// Gradient of [`group_pool_with`]; max routes to the first maximal slice.
pub fn group_pool_backward(x: &LiftedFeature, grad: &GridTensor, mode: PoolMode) -> LiftedFeature {
    let s = x.tensor.shape();
    let plane = s[3] * s[4];
    let mut gx = GridTensor::zeros(s);
    for ((src, g), dst) in x.tensor.data().chunks(4 * plane).zip(grad.data().chunks(plane)).zip(gx.data_mut().chunks_mut(4 * plane)) {
        for p in 0..plane {
            match mode {
                PoolMode::Max => {
                    let mut best = 0;
                    for k in 1..4 {
                        if src[k * plane + p] > src[best * plane + p] {
                            best = k;
                        }
                    }
                    dst[best * plane + p] = g[p];
                }
                PoolMode::Mean => (0..4).for_each(|k| dst[k * plane + p] = g[p] / 4.0),
            }
        }
    }
    LiftedFeature { tensor: gx }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Input (pillar feature) channels.
    pub in_channels: usize,
    /// Base widths of the stride-1, 2 and 4 stages. Group channels in equivariant mode;
    /// the plain ablation uses twice as many planar channels.
    pub widths: [usize; 3],
    pub kernel_size: usize,
    pub equivariant: bool,
    pub pool: PoolMode,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { in_channels: 32, widths: [32, 64, 128], kernel_size: 3, equivariant: true, pool: PoolMode::Max }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::EvenKernel(self.kernel_size));
        }
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::Config(format!("backbone widths must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Grid extents must be `4k + 1` so both stride-2 stages commute with rotation.
    pub fn check_extent(&self, n: usize) -> Result<()> {
        if n < 5 || n % 4 != 1 {
            return Err(Error::Config(format!("grid extent {n} must be 4k + 1 with k >= 1")));
        }
        Ok(())
    }

    /// Planar channels per base channel in the backbone output.
    pub fn group_size(&self) -> usize {
        if self.equivariant {
            4
        } else {
            1
        }
    }

    fn width(&self, i: usize) -> usize {
        if self.equivariant {
            self.widths[i]
        } else {
            2 * self.widths[i]
        }
    }

    /// Base channels of the stacked output (before pooling).
    pub fn out_channels(&self) -> usize {
        (0..3).map(|i| self.width(i)).sum()
    }
}

/// Convolution, batch norm and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub conv: TiedConv,
    pub bn: BNState,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    pub input: GridTensor,
    bn: BnCache,
    output: GridTensor,
}

impl Block {
    /// Conv, batch norm, ReLU.
    pub fn forward(&self, x: &GridTensor, mode: BnMode) -> Result<(GridTensor, BlockCache)> {
        let pre = self.conv.forward(x)?;
        let (normed, bn) = batch_norm_planar(&pre, &self.bn, mode)?;
        let output = relu(&normed);
        Ok((output.clone(), BlockCache { input: x.clone(), bn, output }))
    }

    fn backward(&self, cache: &BlockCache, grad: &GridTensor, grads: &mut Block) -> Result<GridTensor> {
        let g = relu_backward(&cache.output, grad);
        let (g, gs, gh) = batch_norm_planar_backward(&cache.bn, &self.bn, &g);
        add_slice(grads.bn.scale.data_mut(), &gs);
        add_slice(grads.bn.shift.data_mut(), &gh);
        let (gx, gw) = self.conv.backward(&cache.input, &g)?;
        grads.conv.weight.add_assign(&gw)?;
        Ok(gx)
    }
}

fn add_slice(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

pub const BLOCK_NAMES: [&str; 7] = ["lift", "stage1", "stage2", "stage3", "up2", "up3a", "up3b"];

/// Backbone parameters; block order follows [`BLOCK_NAMES`].
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub blocks: Vec<Block>,
}

pub struct BackboneCache {
    pub blocks: Vec<BlockCache>,
    split: [usize; 3],
}

impl BackboneCache {
    pub fn bn_caches(&self) -> impl Iterator<Item = &BnCache> {
        self.blocks.iter().map(|b| &b.bn)
    }

    /// Which ReLU units are active, in a fixed order.
    pub fn relu_pattern(&self, out: &mut Vec<bool>) {
        for b in &self.blocks {
            out.extend(b.output.data().iter().map(|v| *v > 0.0));
        }
    }
}

impl Backbone {
    pub fn random(cfg: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel_size;
        let (w1, w2, w3) = (cfg.width(0), cfg.width(1), cfg.width(2));
        let (first, rest) = if cfg.equivariant { (Tying::Lifting, Tying::Group) } else { (Tying::Plain, Tying::Plain) };
        let specs = [
            (first, ConvSpec::same(cfg.in_channels, w1, k, 1)?),
            (rest, ConvSpec::same(w1, w1, k, 1)?),
            (rest, ConvSpec::same(w1, w2, k, 2)?),
            (rest, ConvSpec::same(w2, w3, k, 2)?),
            (rest, ConvSpec::same(w2, w2, k, 2)?.transposed()),
            (rest, ConvSpec::same(w3, w3, k, 2)?.transposed()),
            (rest, ConvSpec::same(w3, w3, k, 2)?.transposed()),
        ];
        let blocks = specs
            .into_iter()
            .map(|(t, s)| Block { conv: TiedConv::random(t, s, rng), bn: BNState::new(s.out_channels, cfg.group_size()) })
            .collect();
        Ok(Self { cfg: cfg.clone(), blocks })
    }

    /// Stacked full-resolution features `[B, G * out_channels, Y, X]` before any pooling,
    /// `G = 4` for the equivariant backbone.
    pub fn features(&self, x: &GridTensor, mode: BnMode) -> Result<(GridTensor, BackboneCache)> {
        square(x)?;
        self.cfg.check_extent(x.dim(2))?;
        if x.dim(1) != self.cfg.in_channels {
            return shape_err(format!("backbone expects {} input channels, got {}", self.cfg.in_channels, x.dim(1)));
        }
        let mut caches = Vec::with_capacity(7);
        let mut run = |i: usize, input: &GridTensor| -> Result<GridTensor> {
            let (y, c) = self.blocks[i].forward(input, mode)?;
            caches.push(c);
            Ok(y)
        };
        let f0 = run(0, x)?;
        let f1 = run(1, &f0)?;
        let f2 = run(2, &f1)?;
        let f3 = run(3, &f2)?;
        let u2 = run(4, &f2)?;
        let u3a = run(5, &f3)?;
        let u3 = run(6, &u3a)?;
        let split = [f1.dim(1), u2.dim(1), u3.dim(1)];
        let out = GridTensor::concat(&[&f1, &u2, &u3], 1)?;
        Ok((out, BackboneCache { blocks: caches, split }))
    }

    /// Gradient with respect to the backbone input; parameter gradients accumulate into `grads`.
    pub fn backward(&self, cache: &BackboneCache, grad: &GridTensor, grads: &mut Backbone) -> Result<GridTensor> {
        let parts = grad.split(1, &cache.split)?;
        let (g1, gu2, gu3) = (&parts[0], &parts[1], &parts[2]);
        let c = &cache.blocks;
        let g3a = self.blocks[6].backward(&c[6], gu3, &mut grads.blocks[6])?;
        let g3 = self.blocks[5].backward(&c[5], &g3a, &mut grads.blocks[5])?;
        let mut g2 = self.blocks[4].backward(&c[4], gu2, &mut grads.blocks[4])?;
        g2.add_assign(&self.blocks[3].backward(&c[3], &g3, &mut grads.blocks[3])?)?;
        let mut g1 = g1.clone();
        g1.add_assign(&self.blocks[2].backward(&c[2], &g2, &mut grads.blocks[2])?)?;
        let g0 = self.blocks[1].backward(&c[1], &g1, &mut grads.blocks[1])?;
        self.blocks[0].backward(&c[0], &g0, &mut grads.blocks[0])
    }

    pub fn update_running_stats(&mut self, cache: &BackboneCache) {
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            b.bn.update_running(&c.bn);
        }
    }

    /// Visits batch-norm running statistics (state that is saved but not trained).
    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        for (name, b) in BLOCK_NAMES.iter().zip(&mut self.blocks) {
            f(&format!("{name}.bn.running_mean"), &mut b.bn.running_mean);
            f(&format!("{name}.bn.running_var"), &mut b.bn.running_var);
        }
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (name, b) in BLOCK_NAMES.iter().zip(&self.blocks) {
            f(&format!("{name}.bn.running_mean"), &b.bn.running_mean);
            f(&format!("{name}.bn.running_var"), &b.bn.running_var);
        }
    }
}

impl Parameterized for Backbone {
    fn visit(&self, f: &mut dyn FnMut(&str, &GridTensor)) {
        for (name, b) in BLOCK_NAMES.iter().zip(&self.blocks) {
            f(&format!("{name}.weight"), &b.conv.weight);
            f(&format!("{name}.bn.scale"), &b.bn.scale);
            f(&format!("{name}.bn.shift"), &b.bn.shift);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut GridTensor)) {
        for (name, b) in BLOCK_NAMES.iter().zip(&mut self.blocks) {
            f(&format!("{name}.weight"), &mut b.conv.weight);
            f(&format!("{name}.bn.scale"), &mut b.bn.scale);
            f(&format!("{name}.bn.shift"), &mut b.bn.shift);
        }
    }
}

/// Planar BEV features: group-pooled stacked features for the equivariant backbone,
/// the stacked features themselves for the plain ablation.
pub fn backbone_forward(x: &GridTensor, net: &Backbone, mode: BnMode) -> Result<GridTensor> {
    let (f, _) = net.features(x, mode)?;
    if net.cfg.equivariant {
        Ok(group_pool_with(&LiftedFeature::from_planar(f)?, net.cfg.pool))
    } else {
        Ok(f)
    }
}
