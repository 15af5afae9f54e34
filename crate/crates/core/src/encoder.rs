//! Pillar encoder: directional message passing on the complete graph of each pillar.
//!
//! Every edge message starts from an RBF embedding of the 3D distance between its two
//! endpoints. Round `l` updates the message on edge `j -> i` from the messages arriving
//! at `j` from every other point `z` (excluding `i`):
//!
//! ```text
//! m0[j->i]   = W rbf(|u_j - u_i|) + b + u_src I_j + u_dst I_i
//! agg[j->i]  = sum_{z != i, j} A [m[z->j] ; rbf(j,i)] + c
//! m'[j->i]   = tanh(U [m[j->i] ; agg[j->i]] + d)
//! feature    = O (sum over edges of the last messages) + o
//! ```
//!
//! Coordinates enter only through pairwise distances, so the feature is unchanged by any
//! rigid motion of the pillar's points. Points are put into a canonical order first, which
//! makes the result bit-identical under permutation.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::conv::{affine_backward, affine_into};
use crate::error::{Error, Result};
use crate::params::{normal_tensor, Parameterized};
use crate::pillar::{PillarGrid, Point, PointCloud, MAX_POINTS_PER_PILLAR};
use crate::rng::Rng;
use crate::tensor::GridTensor;

/// Gaussian radial basis on a distance: `phi_k(d) = exp(-gamma (d - c_k)^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RBFSpec {
    pub centers: Vec<f64>,
    pub gamma: f64,
}

impl RBFSpec {
    /// `count` centers evenly spaced over `[0, d_max]`, width set by the spacing.
    pub fn evenly_spaced(count: usize, d_max: f64) -> Result<Self> {
        if count < 2 || !(d_max > 0.0) {
            return Err(Error::Config(format!("rbf needs >= 2 centers and d_max > 0, got {count}, {d_max}")));
        }
        let step = d_max / (count - 1) as f64;
        Ok(Self { centers: (0..count).map(|k| k as f64 * step).collect(), gamma: 1.0 / (step * step) })
    }

    pub fn width(&self) -> usize {
        self.centers.len()
    }
}

impl Default for RBFSpec {
    fn default() -> Self {
        Self::evenly_spaced(16, 2.5).expect("valid rbf")
    }
}

pub fn rbf_embed(d: f64, spec: &RBFSpec) -> Result<Vec<f64>> {
    if !(d >= 0.0) {
        return Err(Error::Invalid(format!("distance must be >= 0, got {d}")));
    }
    Ok(spec.centers.iter().map(|c| (-spec.gamma * (d - c) * (d - c)).exp()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub hidden: usize,
    pub out_dim: usize,
    /// `[H, K]`, `[H]`: distance filter for the initial message.
    pub init_w: GridTensor,
    pub init_b: GridTensor,
    /// `[H]` intensity terms of the source and destination point.
    pub init_src: GridTensor,
    pub init_dst: GridTensor,
    /// Per round: aggregation `[H, H + K]`, `[H]` and update `[H, 2H]`, `[H]`.
    pub agg_w: Vec<GridTensor>,
    pub agg_b: Vec<GridTensor>,
    pub upd_w: Vec<GridTensor>,
    pub upd_b: Vec<GridTensor>,
    /// `[H]` state of an edgeless pillar, plus its intensity term.
    pub lone_state: GridTensor,
    pub lone_intensity: GridTensor,
    /// `[beta, H]`, `[beta]`.
    pub out_w: GridTensor,
    pub out_b: GridTensor,
}

impl EncoderWeights {
    pub fn random(rbf_width: usize, hidden: usize, out_dim: usize, rounds: usize, rng: &mut Rng) -> Self {
        let (k, h) = (rbf_width, hidden);
        let std_of = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        Self {
            hidden,
            out_dim,
            init_w: normal_tensor(&[h, k], std_of(k), rng),
            init_b: GridTensor::zeros(&[h]),
            init_src: normal_tensor(&[h], 0.5, rng),
            init_dst: normal_tensor(&[h], 0.5, rng),
            agg_w: (0..rounds).map(|_| normal_tensor(&[h, h + k], std_of(h + k) * 0.5, rng)).collect(),
            agg_b: (0..rounds).map(|_| GridTensor::zeros(&[h])).collect(),
            upd_w: (0..rounds).map(|_| normal_tensor(&[h, 2 * h], std_of(2 * h), rng)).collect(),
            upd_b: (0..rounds).map(|_| GridTensor::zeros(&[h])).collect(),
            lone_state: normal_tensor(&[h], 0.5, rng),
            lone_intensity: normal_tensor(&[h], 0.5, rng),
            out_w: normal_tensor(&[out_dim, h], std_of(h), rng),
            out_b: GridTensor::zeros(&[out_dim]),
        }
    }

    pub fn rounds(&self) -> usize {
        self.agg_w.len()
    }

    pub fn rbf_width(&self) -> usize {
        self.init_w.dim(1)
    }
}

impl Parameterized for EncoderWeights {
    fn visit(&self, f: &mut dyn FnMut(&str, &GridTensor)) {
        f("init_w", &self.init_w);
        f("init_b", &self.init_b);
        f("init_src", &self.init_src);
        f("init_dst", &self.init_dst);
        for l in 0..self.rounds() {
            f(&format!("agg{l}_w"), &self.agg_w[l]);
            f(&format!("agg{l}_b"), &self.agg_b[l]);
            f(&format!("upd{l}_w"), &self.upd_w[l]);
            f(&format!("upd{l}_b"), &self.upd_b[l]);
        }
        f("lone_state", &self.lone_state);
        f("lone_intensity", &self.lone_intensity);
        f("out_w", &self.out_w);
        f("out_b", &self.out_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut GridTensor)) {
        f("init_w", &mut self.init_w);
        f("init_b", &mut self.init_b);
        f("init_src", &mut self.init_src);
        f("init_dst", &mut self.init_dst);
        for l in 0..self.agg_w.len() {
            f(&format!("agg{l}_w"), &mut self.agg_w[l]);
            f(&format!("agg{l}_b"), &mut self.agg_b[l]);
            f(&format!("upd{l}_w"), &mut self.upd_w[l]);
            f(&format!("upd{l}_b"), &mut self.upd_b[l]);
        }
        f("lone_state", &mut self.lone_state);
        f("lone_intensity", &mut self.lone_intensity);
        f("out_w", &mut self.out_w);
        f("out_b", &mut self.out_b);
    }
}

/// Forward intermediates of one pillar.
#[derive(Debug, Clone)]
pub struct PillarCache {
    n: usize,
    intensity: Vec<f64>,
    /// `rbf[j * n + i]`, symmetric.
    rbf: Vec<Vec<f64>>,
    /// `messages[l][j * n + i]` for `l = 0..=L`; diagonal entries unused.
    messages: Vec<Vec<Vec<f64>>>,
    /// Aggregation inputs `[q ; (n-2) rbf]` and outputs per round and edge.
    agg_in: Vec<Vec<Vec<f64>>>,
    agg_out: Vec<Vec<Vec<f64>>>,
    pooled: Vec<f64>,
}

fn canonical_order(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| {
        [a.x, a.y, a.z, a.intensity]
            .iter()
            .zip([b.x, b.y, b.z, b.intensity].iter())
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    pts
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

/// Feature vector of one pillar.
pub fn encode_pillar(points: &[Point], weights: &EncoderWeights, spec: &RBFSpec) -> Result<Vec<f64>> {
    Ok(encode_pillar_cached(points, weights, spec)?.0)
}

pub fn encode_pillar_cached(
    points: &[Point],
    weights: &EncoderWeights,
    spec: &RBFSpec,
) -> Result<(Vec<f64>, PillarCache)> {
    if points.is_empty() || points.len() > MAX_POINTS_PER_PILLAR {
        return Err(Error::Invalid(format!("pillar with {} points", points.len())));
    }
    if spec.width() != weights.rbf_width() {
        return Err(Error::Shape(format!("rbf width {} vs encoder {}", spec.width(), weights.rbf_width())));
    }
    let pts = canonical_order(points);
    let n = pts.len();
    let h = weights.hidden;
    let intensity: Vec<f64> = pts.iter().map(|p| p.intensity).collect();
    let mut out = vec![0.0; weights.out_dim];

    if n == 1 {
        let state: Vec<f64> = weights
            .lone_state
            .data()
            .iter()
            .zip(weights.lone_intensity.data())
            .map(|(s, w)| s + w * intensity[0])
            .collect();
        affine_into(weights.out_w.data(), weights.out_b.data(), &state, &mut out);
        let cache = PillarCache {
            n,
            intensity,
            rbf: vec![],
            messages: vec![],
            agg_in: vec![],
            agg_out: vec![],
            pooled: state,
        };
        return Ok((out, cache));
    }

    let mut rbf = vec![Vec::new(); n * n];
    for j in 0..n {
        for i in (j + 1)..n {
            let (a, b) = (&pts[j], &pts[i]);
            let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt();
            let e = rbf_embed(d, spec)?;
            rbf[i * n + j] = e.clone();
            rbf[j * n + i] = e;
        }
    }

    let mut m0 = vec![vec![0.0; h]; n * n];
    for j in 0..n {
        for i in 0..n {
            if i == j {
                continue;
            }
            let e = j * n + i;
            affine_into(weights.init_w.data(), weights.init_b.data(), &rbf[e], &mut m0[e]);
            for (k, v) in m0[e].iter_mut().enumerate() {
                *v += weights.init_src.data()[k] * intensity[j] + weights.init_dst.data()[k] * intensity[i];
            }
        }
    }

    let mut messages = vec![m0];
    let mut agg_in_all = Vec::new();
    let mut agg_out_all = Vec::new();
    let scale = (n - 2) as f64;
    for l in 0..weights.rounds() {
        let cur = &messages[l];
        // incoming[j] = sum over z != j of m[z -> j]
        let mut incoming = vec![vec![0.0; h]; n];
        for (j, inc) in incoming.iter_mut().enumerate() {
            for z in 0..n {
                if z != j {
                    add_into(inc, &cur[z * n + j]);
                }
            }
        }
        let bias: Vec<f64> = weights.agg_b[l].data().iter().map(|c| scale * c).collect();
        let mut agg_in = vec![Vec::new(); n * n];
        let mut agg_out = vec![Vec::new(); n * n];
        let mut next = vec![vec![0.0; h]; n * n];
        let mut cat = vec![0.0; 2 * h];
        for j in 0..n {
            for i in 0..n {
                if i == j {
                    continue;
                }
                let e = j * n + i;
                let mut input: Vec<f64> = incoming[j].iter().zip(&cur[i * n + j]).map(|(a, b)| a - b).collect();
                input.extend(rbf[e].iter().map(|v| scale * v));
                let mut a = vec![0.0; h];
                affine_into(weights.agg_w[l].data(), &bias, &input, &mut a);
                cat[..h].copy_from_slice(&cur[e]);
                cat[h..].copy_from_slice(&a);
                affine_into(weights.upd_w[l].data(), weights.upd_b[l].data(), &cat, &mut next[e]);
                next[e].iter_mut().for_each(|v| *v = v.tanh());
                agg_in[e] = input;
                agg_out[e] = a;
            }
        }
        agg_in_all.push(agg_in);
        agg_out_all.push(agg_out);
        messages.push(next);
    }

    let last = messages.last().unwrap();
    let mut pooled = vec![0.0; h];
    for j in 0..n {
        for i in 0..n {
            if i != j {
                add_into(&mut pooled, &last[j * n + i]);
            }
        }
    }
    affine_into(weights.out_w.data(), weights.out_b.data(), &pooled, &mut out);
    let cache = PillarCache { n, intensity, rbf, messages, agg_in: agg_in_all, agg_out: agg_out_all, pooled };
    Ok((out, cache))
}

/// Accumulates into `grads` the gradient of `<g_out, encode_pillar(..)>` with respect to the weights.
pub fn encode_pillar_backward(cache: &PillarCache, weights: &EncoderWeights, g_out: &[f64], grads: &mut EncoderWeights) {
    let (n, h) = (cache.n, weights.hidden);
    let mut g_pooled = vec![0.0; h];
    affine_backward(
        weights.out_w.data(),
        &cache.pooled,
        g_out,
        &mut g_pooled,
        grads.out_w.data_mut(),
        grads.out_b.data_mut(),
    );
    if n == 1 {
        let i0 = cache.intensity[0];
        for k in 0..h {
            grads.lone_state.data_mut()[k] += g_pooled[k];
            grads.lone_intensity.data_mut()[k] += g_pooled[k] * i0;
        }
        return;
    }

    let scale = (n - 2) as f64;
    let mut g_cur: Vec<Vec<f64>> = (0..n * n).map(|e| if e / n == e % n { vec![] } else { g_pooled.clone() }).collect();
    for l in (0..weights.rounds()).rev() {
        let cur = &cache.messages[l];
        let next = &cache.messages[l + 1];
        let mut g_prev = vec![vec![0.0; h]; n * n];
        let mut g_q = vec![vec![0.0; h]; n * n];
        let mut cat = vec![0.0; 2 * h];
        let mut g_agg_b = vec![0.0; h];
        for j in 0..n {
            for i in 0..n {
                if i == j {
                    continue;
                }
                let e = j * n + i;
                let gz: Vec<f64> = g_cur[e].iter().zip(&next[e]).map(|(g, m)| g * (1.0 - m * m)).collect();
                cat[..h].copy_from_slice(&cur[e]);
                cat[h..].copy_from_slice(&cache.agg_out[l][e]);
                let mut g_cat = vec![0.0; 2 * h];
                affine_backward(
                    weights.upd_w[l].data(),
                    &cat,
                    &gz,
                    &mut g_cat,
                    grads.upd_w[l].data_mut(),
                    grads.upd_b[l].data_mut(),
                );
                add_into(&mut g_prev[e], &g_cat[..h]);
                let input = &cache.agg_in[l][e];
                let mut g_input = vec![0.0; input.len()];
                affine_backward(
                    weights.agg_w[l].data(),
                    input,
                    &g_cat[h..],
                    &mut g_input,
                    grads.agg_w[l].data_mut(),
                    &mut g_agg_b,
                );
                g_q[e].copy_from_slice(&g_input[..h]);
            }
        }
        for (g, acc) in grads.agg_b[l].data_mut().iter_mut().zip(&g_agg_b) {
            *g += scale * acc;
        }
        // q[j->i] = incoming[j] - m[i->j]; route back onto m[z->j] for z != i, j
        for j in 0..n {
            let mut total = vec![0.0; h];
            for i in 0..n {
                if i != j {
                    add_into(&mut total, &g_q[j * n + i]);
                }
            }
            for z in 0..n {
                if z == j {
                    continue;
                }
                let dst = &mut g_prev[z * n + j];
                for k in 0..h {
                    dst[k] += total[k] - g_q[j * n + z][k];
                }
            }
        }
        g_cur = g_prev;
    }

    for j in 0..n {
        for i in 0..n {
            if i == j {
                continue;
            }
            let e = j * n + i;
            let g = &g_cur[e];
            let mut scratch = vec![0.0; cache.rbf[e].len()];
            affine_backward(
                weights.init_w.data(),
                &cache.rbf[e],
                g,
                &mut scratch,
                grads.init_w.data_mut(),
                grads.init_b.data_mut(),
            );
            for k in 0..h {
                grads.init_src.data_mut()[k] += g[k] * cache.intensity[j];
                grads.init_dst.data_mut()[k] += g[k] * cache.intensity[i];
            }
        }
    }
}

/// Encoded features of every occupied cell, with the caches needed for backward.
pub struct EncodedGrid {
    pub features: BTreeMap<(usize, usize), Vec<f64>>,
    pub caches: BTreeMap<(usize, usize), PillarCache>,
}

pub fn encode_grid(cloud: &PointCloud, grid: &PillarGrid, weights: &EncoderWeights, spec: &RBFSpec) -> Result<EncodedGrid> {
    let mut features = BTreeMap::new();
    let mut caches = BTreeMap::new();
    for (&key, pillar) in &grid.cells {
        let pts: Vec<Point> = pillar.indices.iter().map(|&i| cloud.points[i]).collect();
        let (f, c) = encode_pillar_cached(&pts, weights, spec)?;
        features.insert(key, f);
        caches.insert(key, c);
    }
    Ok(EncodedGrid { features, caches })
}
