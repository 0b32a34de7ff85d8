//! Monotone rational-quadratic spline on `[-B, B]` (identity outside).
//!
//! A spline is built from `3K − 1` unconstrained values: `K` width logits,
//! `K` height logits and `K − 1` interior derivative pre-activations. Widths
//! and heights are softmaxes scaled to `2B`; interior derivatives are
//! `softplus(r) / softplus(0)` so that all-zero raw values give unit
//! derivatives, and the two boundary derivatives are fixed at 1.
//!
//! Within bin `k`, with `ξ = (x − x_k)/w`, `s = h/w` and `θ = ξ(1 − ξ)`:
//!
//! ```text
//! y      = y_k + h·(s·ξ² + δ_k·θ) / D,        D = s + (δ_{k+1} + δ_k − 2s)·θ
//! dy/dx  = s²·M / D²,                         M = s + (δ_{k+1} − s)·ξ² + (δ_k − s)·(1 − ξ)²
//! ```
//!
//! `M` is the usual numerator `δ_{k+1}ξ² + 2sθ + δ_k(1−ξ)²` rearranged so the
//! identity spline (`δ = s = 1`) has a log-derivative of exactly zero.

use crate::gradnet::{sigmoid, softplus};

/// Sensitivities of a bin evaluation with respect to its local quantities.
#[derive(Clone, Copy, Debug, Default)]
struct LocalGrad {
    x: f64,
    xk: f64,
    w: f64,
    yk: f64,
    h: f64,
    d0: f64,
    d1: f64,
}

impl LocalGrad {
    fn combine(a: LocalGrad, ca: f64, b: LocalGrad, cb: f64) -> LocalGrad {
        LocalGrad {
            x: ca * a.x + cb * b.x,
            xk: ca * a.xk + cb * b.xk,
            w: ca * a.w + cb * b.w,
            yk: ca * a.yk + cb * b.yk,
            h: ca * a.h + cb * b.h,
            d0: ca * a.d0 + cb * b.d0,
            d1: ca * a.d1 + cb * b.d1,
        }
    }
}

/// Quantities of one bin.
#[derive(Clone, Copy, Debug)]
struct Bin {
    xk: f64,
    w: f64,
    yk: f64,
    h: f64,
    d0: f64,
    d1: f64,
}

impl Bin {
    /// A bin whose map is exactly `y = x`. Evaluating the rational form there
    /// would reconstruct `x` as `x_k + w·ξ` and lose an ulp.
    fn is_identity(&self) -> bool {
        self.h == self.w && self.yk == self.xk && self.d0 == 1.0 && self.d1 == 1.0
    }

    /// `(y, ln dy/dx)` at relative position `xi`.
    fn eval(&self, xi: f64) -> (f64, f64) {
        let s = self.h / self.w;
        let theta = xi * (1.0 - xi);
        let denom = s + (self.d1 + self.d0 - 2.0 * s) * theta;
        let p = s * xi * xi + self.d0 * theta;
        let om = 1.0 - xi;
        let m = s + (self.d1 - s) * xi * xi + (self.d0 - s) * om * om;
        let y = self.yk + self.h * p / denom;
        let logdet = 2.0 * s.ln() + m.ln() - 2.0 * denom.ln();
        (y, logdet)
    }

    /// Reverse-mode sensitivities of `gy·y + gl·logdet` at input `x`.
    fn adjoint(&self, x: f64, gy: f64, gl: f64) -> LocalGrad {
        let Bin { xk, w, h, d0, d1, .. } = *self;
        let xi = (x - xk) / w;
        let s = h / w;
        let theta = xi * (1.0 - xi);
        let c = d1 + d0 - 2.0 * s;
        let denom = s + c * theta;
        let p = s * xi * xi + d0 * theta;
        let om = 1.0 - xi;
        let m = s + (d1 - s) * xi * xi + (d0 - s) * om * om;

        let mut g = LocalGrad {
            yk: gy,
            h: gy * p / denom,
            ..LocalGrad::default()
        };
        let g_p = gy * h / denom;
        let g_d = -gy * h * p / (denom * denom) - 2.0 * gl / denom;
        let g_m = gl / m;
        let mut g_s = 2.0 * gl / s;
        let mut g_xi = 0.0;
        let mut g_theta = 0.0;

        // M
        g_s += g_m * (1.0 - xi * xi - om * om);
        g.d1 += g_m * xi * xi;
        g.d0 += g_m * om * om;
        g_xi += g_m * (2.0 * (d1 - s) * xi - 2.0 * (d0 - s) * om);
        // P
        g_s += g_p * xi * xi;
        g_xi += g_p * 2.0 * s * xi;
        g.d0 += g_p * theta;
        g_theta += g_p * d0;
        // D
        g_s += g_d * (1.0 - 2.0 * theta);
        g.d1 += g_d * theta;
        g.d0 += g_d * theta;
        g_theta += g_d * c;
        // θ
        g_xi += g_theta * (1.0 - 2.0 * xi);
        // s = h / w
        g.h += g_s / w;
        g.w -= g_s * h / (w * w);
        // ξ = (x − x_k) / w
        g.x = g_xi / w;
        g.xk = -g_xi / w;
        g.w -= g_xi * xi / w;
        g
    }
}

/// A spline instantiated from raw conditioner outputs.
#[derive(Clone, Debug)]
pub(crate) struct Spline {
    bound: f64,
    knots_x: Vec<f64>,
    knots_y: Vec<f64>,
    derivs: Vec<f64>,
    widths: Vec<f64>,
    heights: Vec<f64>,
}

fn softmax_scaled(raw: &[f64], total: f64) -> Vec<f64> {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|r| (r - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| total * v / sum).collect()
}

fn knots(sizes: &[f64], bound: f64) -> Vec<f64> {
    let k = sizes.len();
    let mut out = Vec::with_capacity(k + 1);
    out.push(-bound);
    let mut acc = -bound;
    for s in &sizes[..k - 1] {
        acc += s;
        out.push(acc);
    }
    out.push(bound);
    out
}

/// Number of raw values a spline with `bins` bins consumes.
pub(crate) fn raw_len(bins: usize) -> usize {
    3 * bins - 1
}

impl Spline {
    pub(crate) fn from_raw(raw: &[f64], bins: usize, bound: f64) -> Self {
        debug_assert_eq!(raw.len(), raw_len(bins));
        let widths = softmax_scaled(&raw[..bins], 2.0 * bound);
        let heights = softmax_scaled(&raw[bins..2 * bins], 2.0 * bound);
        let unit = softplus(0.0);
        let mut derivs = Vec::with_capacity(bins + 1);
        derivs.push(1.0);
        derivs.extend(raw[2 * bins..].iter().map(|&r| softplus(r) / unit));
        derivs.push(1.0);
        Self {
            bound,
            knots_x: knots(&widths, bound),
            knots_y: knots(&heights, bound),
            derivs,
            widths,
            heights,
        }
    }

    fn bins(&self) -> usize {
        self.widths.len()
    }

    fn inside(&self, v: f64) -> bool {
        v >= -self.bound && v <= self.bound
    }

    fn search(knots: &[f64], v: f64) -> usize {
        let k = knots.len() - 1;
        knots[1..k].partition_point(|&t| t <= v)
    }

    fn bin(&self, k: usize) -> Bin {
        Bin {
            xk: self.knots_x[k],
            w: self.knots_x[k + 1] - self.knots_x[k],
            yk: self.knots_y[k],
            h: self.knots_y[k + 1] - self.knots_y[k],
            d0: self.derivs[k],
            d1: self.derivs[k + 1],
        }
    }

    pub(crate) fn forward(&self, x: f64) -> (f64, f64) {
        if !self.inside(x) {
            return (x, 0.0);
        }
        let b = self.bin(Self::search(&self.knots_x, x));
        if b.is_identity() {
            return (x, 0.0);
        }
        b.eval((x - b.xk) / b.w)
    }

    pub(crate) fn inverse(&self, y: f64) -> (f64, f64) {
        if !self.inside(y) {
            return (y, 0.0);
        }
        let b = self.bin(Self::search(&self.knots_y, y));
        if b.is_identity() {
            return (y, 0.0);
        }
        let xi = Self::solve(&b, y);
        let (_, logdet) = b.eval(xi);
        (b.xk + xi * b.w, -logdet)
    }

    /// In-bin root of the rational-quadratic equation, written in the
    /// cancellation-free form `ξ = 2c / (−b − √(b² − 4ac))`.
    fn solve(b: &Bin, y: f64) -> f64 {
        let s = b.h / b.w;
        let dy = y - b.yk;
        let c2 = b.d1 + b.d0 - 2.0 * s;
        let qa = b.h * (s - b.d0) + dy * c2;
        let qb = b.h * b.d0 - dy * c2;
        let qc = -s * dy;
        let disc = (qb * qb - 4.0 * qa * qc).max(0.0);
        let denom = -qb - disc.sqrt();
        let xi = if denom == 0.0 { 0.0 } else { 2.0 * qc / denom };
        xi.clamp(0.0, 1.0)
    }

    /// Backward through [`Spline::forward`]: accumulates `∂/∂raw` of
    /// `gy·y + gl·logdet` into `graw` and returns `∂/∂x`.
    pub(crate) fn forward_adjoint(&self, x: f64, gy: f64, gl: f64, raw: &[f64], graw: &mut [f64]) -> f64 {
        if !self.inside(x) {
            return gy;
        }
        let k = Self::search(&self.knots_x, x);
        let g = self.bin(k).adjoint(x, gy, gl);
        self.scatter(k, &g, raw, graw);
        g.x
    }

    /// Backward through [`Spline::inverse`] evaluated at `y`, given upstream
    /// `gx` on the recovered input and `gl` on the inverse log-det.
    pub(crate) fn inverse_adjoint(&self, y: f64, gx: f64, gl: f64, raw: &[f64], graw: &mut [f64]) -> f64 {
        if !self.inside(y) {
            return gx;
        }
        let k = Self::search(&self.knots_y, y);
        let b = self.bin(k);
        let xi = Self::solve(&b, y);
        let x = b.xk + xi * b.w;
        let (_, logdet) = b.eval(xi);
        // x(y) solves f(x) = y; logdet_inv = −L(x).
        let d_y = b.adjoint(x, 1.0, 0.0);
        let d_l = b.adjoint(x, 0.0, 1.0);
        let gx_total = gx - gl * d_l.x;
        let inv_fprime = (-logdet).exp();
        let local = LocalGrad::combine(d_y, -gx_total * inv_fprime, d_l, -gl);
        self.scatter(k, &local, raw, graw);
        gx_total * inv_fprime
    }

    /// Map local sensitivities of bin `k` back to the raw parameters.
    fn scatter(&self, k: usize, g: &LocalGrad, raw: &[f64], graw: &mut [f64]) {
        let bins = self.bins();
        let mut g_kx = vec![0.0; bins + 1];
        let mut g_ky = vec![0.0; bins + 1];
        g_kx[k] += g.xk - g.w;
        g_kx[k + 1] += g.w;
        g_ky[k] += g.yk - g.h;
        g_ky[k + 1] += g.h;
        Self::knots_to_raw(&g_kx, &self.widths, &mut graw[..bins]);
        Self::knots_to_raw(&g_ky, &self.heights, &mut graw[bins..2 * bins]);
        let unit = softplus(0.0);
        if k >= 1 {
            graw[2 * bins + k - 1] += g.d0 * sigmoid(raw[2 * bins + k - 1]) / unit;
        }
        if k + 1 < bins {
            graw[2 * bins + k] += g.d1 * sigmoid(raw[2 * bins + k]) / unit;
        }
    }

    /// Interior knot `m` is `−B + Σ_{j<m} size_j`; sizes are a scaled softmax.
    fn knots_to_raw(g_knots: &[f64], sizes: &[f64], graw: &mut [f64]) {
        let bins = sizes.len();
        let mut g_size = vec![0.0; bins];
        // suffix sums over interior knots 1..bins-1
        let mut acc = 0.0;
        for j in (0..bins - 1).rev() {
            acc += g_knots[j + 1];
            g_size[j] = acc;
        }
        let total: f64 = sizes.iter().sum();
        let dot: f64 = g_size.iter().zip(sizes).map(|(g, s)| g * s).sum();
        for j in 0..bins {
            graw[j] += sizes[j] * g_size[j] - sizes[j] / total * dot;
        }
    }
}
