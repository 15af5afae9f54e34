//! Central-difference verification of hand-written backward passes.

use crate::rng::Rng;

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Differentiable {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
}

/// Adapter turning a pair of closures into a [`Differentiable`].
pub struct FnPair<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<V, G> Differentiable for FnPair<V, G>
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (self.gradient)(x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub rel_tol: f64,
    /// Lower bound of the relative-error denominator, so vanishing gradients compare absolutely.
    pub abs_floor: f64,
    /// Above this many coordinates a seeded random subset of this size is checked.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, rel_tol: 1e-4, abs_floor: 1e-6, max_coords: 10_000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates left out because a kink lies within `eps` of them.
    pub skipped: usize,
    pub passed: bool,
}

pub fn grad_check(f: &impl Differentiable, point: &[f64], cfg: &GradCheckConfig) -> GradCheckReport {
    check(f, point, cfg, None)
}

/// Gradient check for piecewise-smooth functions. `pattern` reports which smooth piece a
/// point lies on (for example the sign of every ReLU input); a coordinate whose pattern
/// differs between `x - eps` and `x + eps` straddles a kink, where central differences are
/// meaningless, and is skipped and counted instead of compared.
pub fn grad_check_piecewise(
    f: &impl Differentiable,
    pattern: &dyn Fn(&[f64]) -> Vec<bool>,
    point: &[f64],
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    check(f, point, cfg, Some(pattern))
}

fn check(
    f: &impl Differentiable,
    point: &[f64],
    cfg: &GradCheckConfig,
    pattern: Option<&dyn Fn(&[f64]) -> Vec<bool>>,
) -> GradCheckReport {
    assert!((1e-7..=1e-3).contains(&cfg.eps), "eps {} outside [1e-7, 1e-3]", cfg.eps);
    let analytic = f.gradient(point);
    assert_eq!(analytic.len(), point.len(), "gradient length");
    let coords = coordinates(point.len(), cfg);
    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst_index: 0,
        checked: 0,
        skipped: 0,
        passed: true,
    };
    let mut x = point.to_vec();
    for &i in &coords {
        let orig = x[i];
        x[i] = orig + cfg.eps;
        let up = f.value(&x);
        let kink_up = pattern.map(|p| p(&x));
        x[i] = orig - cfg.eps;
        let down = f.value(&x);
        let kink_down = pattern.map(|p| p(&x));
        x[i] = orig;
        if kink_up != kink_down {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        let numeric = (up - down) / (2.0 * cfg.eps);
        let a = analytic[i];
        if !numeric.is_finite() || !a.is_finite() {
            return GradCheckReport {
                max_abs_err: f64::INFINITY,
                max_rel_err: f64::INFINITY,
                worst_index: i,
                passed: false,
                ..report
            };
        }
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(cfg.abs_floor);
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    report.passed = report.max_rel_err <= cfg.rel_tol;
    report
}

fn coordinates(n: usize, cfg: &GradCheckConfig) -> Vec<usize> {
    if n <= cfg.max_coords {
        return (0..n).collect();
    }
    let mut rng = Rng::new(cfg.seed);
    let mut all: Vec<usize> = (0..n).collect();
    for i in 0..cfg.max_coords {
        let j = i + rng.below(n - i);
        all.swap(i, j);
    }
    let mut picked = all[..cfg.max_coords].to_vec();
    picked.sort_unstable();
    picked
}
