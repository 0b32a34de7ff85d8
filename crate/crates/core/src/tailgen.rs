//! Latent tail sampling and surrogate anomalies.
//!
//! The tail of `N(0, I_d)` with mass `p_tail` is the set `{z : ‖z‖² ≥ Q}`
//! with `Q` the chi-square upper quantile: density level sets of the
//! standard normal are spheres, so this is the lowest-density region holding
//! exactly that mass.

use crate::flows::FlowStack;
use crate::ndmath::{chi2_tail_quantile, survival_inverse, RngState};
use crate::{Error, Mat, Result};

/// Below this tail mass rejection sampling gets too slow and the radial
/// sampler takes over.
pub const REJECTION_MIN_P: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailSpec {
    p_tail: f64,
    dim: usize,
    threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TailSampler {
    /// Chosen from `p_tail`.
    Auto,
    Rejection,
    Radial,
}

impl TailSpec {
    pub fn new(p_tail: f64, dim: usize) -> Result<Self> {
        let threshold = chi2_tail_quantile(p_tail, dim)?;
        Ok(Self { p_tail, dim, threshold })
    }

    pub fn p_tail(&self) -> f64 {
        self.p_tail
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Squared-norm threshold `Q`.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.iter().map(|v| v * v).sum::<f64>() >= self.threshold
    }
}

/// `n` draws from `N(0, I_d)` conditioned on `‖z‖² ≥ Q`.
pub fn sample_tail_latents(spec: &TailSpec, n: usize, rng: &mut RngState) -> Mat {
    sample_tail_latents_with(spec, n, TailSampler::Auto, rng)
}

pub fn sample_tail_latents_with(spec: &TailSpec, n: usize, sampler: TailSampler, rng: &mut RngState) -> Mat {
    let sampler = match sampler {
        TailSampler::Auto if spec.p_tail >= REJECTION_MIN_P => TailSampler::Rejection,
        TailSampler::Auto => TailSampler::Radial,
        s => s,
    };
    let d = spec.dim;
    let mut out = Mat::zeros((n, d));
    let mut buf = vec![0.0; d];
    for mut row in out.rows_mut() {
        match sampler {
            TailSampler::Rejection => loop {
                buf.iter_mut().for_each(|v| *v = rng.std_normal());
                if spec.contains(&buf) {
                    break;
                }
            },
            TailSampler::Radial => radial_draw(spec, rng, &mut buf),
            TailSampler::Auto => unreachable!(),
        }
        row.iter_mut().zip(&buf).for_each(|(dst, v)| *dst = *v);
    }
    out
}

/// Uniform direction times a radius whose square follows the chi-square law
/// truncated to `[Q, ∞)`, by inverting the survival function.
fn radial_draw(spec: &TailSpec, rng: &mut RngState, buf: &mut [f64]) {
    let d = spec.dim;
    loop {
        buf.iter_mut().for_each(|v| *v = rng.std_normal());
        let norm = buf.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let target = rng.uniform_open0() * spec.p_tail;
        let q = if target >= 1.0 { 0.0 } else { survival_inverse(target, d) }.max(spec.threshold);
        let r = q.sqrt();
        buf.iter_mut().for_each(|v| *v *= r / norm);
        // rounding in the rescale can land a hair inside the sphere
        if spec.contains(buf) {
            return;
        }
    }
}

/// Surrogate anomalies `f(z̃)` for tail latents `z̃`.
pub fn gen_surrogates(stack: &FlowStack, spec: &TailSpec, n: usize, rng: &mut RngState) -> Result<Mat> {
    if stack.dim() != spec.dim {
        return Err(Error::Shape(format!("flow dim {} vs tail dim {}", stack.dim(), spec.dim)));
    }
    stack.sample(&sample_tail_latents(spec, n, rng))
}

/// One-sample Kolmogorov–Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}
