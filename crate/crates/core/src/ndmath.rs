//! Numeric substrate: seeded RNG, standard-normal helpers, the chi-square
//! tail quantile and a central-difference Jacobian.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::{Error, Mat, Result};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Seeded pseudo-random state.
///
/// Backed by ChaCha8, a counter-based generator whose output stream is fixed
/// by its specification, so a given seed yields the same sequence on every
/// platform. Normal variates come from Box–Muller; both outputs of each
/// transform are used, the second one is cached in `spare`.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

/// SplitMix64 finalizer (Steele, Lea, Flood 2014 constants).
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child generator identified by `stream`. Depends only on
    /// this state's seed and `stream`, never on how much has been consumed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(stream.wrapping_add(1))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`.
    pub fn uniform_open0(&mut self) -> f64 {
        1.0 - self.uniform()
    }

    /// Uniform integer in `0..n` (multiply-shift; bias below 2^-64·n).
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn std_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open0();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

/// Log-density of `N(0, I_d)` at `z`.
pub fn std_normal_logpdf(z: &[f64]) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::InvalidArgument("std_normal_logpdf: empty point".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("std_normal_logpdf input".into()));
    }
    Ok(std_normal_logpdf_unchecked(z))
}

#[inline]
pub(crate) fn std_normal_logpdf_unchecked(z: &[f64]) -> f64 {
    let sq: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * z.len() as f64 * LN_2PI - 0.5 * sq
}

/// `n × d` matrix of i.i.d. standard-normal draws, filled row-major.
pub fn sample_std_normal(n: usize, d: usize, rng: &mut RngState) -> Mat {
    Array2::from_shape_simple_fn((n, d), || rng.std_normal())
}

/// `ln Γ(x)` for `x > 0`, Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * LN_2PI + (x + 0.5) * t.ln() - t + acc.ln()
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 10_000;

/// Regularized lower incomplete gamma `P(a, x)` by its power series.
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut del = 1.0 / a;
    let mut sum = del;
    for _ in 0..GAMMA_MAX_ITER {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Regularized upper incomplete gamma `Q(a, x)` by modified Lentz continued fraction.
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Regularized upper incomplete gamma `Q(a, x) = Γ(a, x) / Γ(a)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x < a {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_cf(a, x)
    }
}

/// `P(‖Z‖² ≥ q)` for `Z ~ N(0, I_d)`.
pub fn chi2_survival(q: f64, d: usize) -> f64 {
    gamma_q(0.5 * d as f64, 0.5 * q)
}

/// Squared-norm threshold `Q` with `P(‖Z‖² ≥ Q) = p_tail` in `d` dimensions.
///
/// Bisection on [`chi2_survival`] to an absolute tolerance of `1e-10`.
pub fn chi2_tail_quantile(p_tail: f64, d: usize) -> Result<f64> {
    if d == 0 {
        return Err(Error::InvalidArgument("chi2_tail_quantile: d must be >= 1".into()));
    }
    if p_tail.is_nan() || p_tail <= 0.0 || p_tail > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "tail probability must lie in (0, 1], got {p_tail}"
        )));
    }
    if p_tail == 1.0 {
        return Ok(0.0);
    }
    Ok(survival_inverse(p_tail, d))
}

/// Inverse of the chi-square survival function; `target` in (0, 1).
pub(crate) fn survival_inverse(target: f64, d: usize) -> f64 {
    let mut lo = 0.0;
    let mut hi = (d as f64).max(1.0);
    while chi2_survival(hi, d) > target {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if chi2_survival(mid, d) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Central-difference Jacobian of `f` at `z`: entry `(i, j)` is `∂f_i/∂z_j`.
pub fn finite_diff_jacobian<F>(f: F, z: &[f64], h: f64) -> Result<Array2<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {h}")));
    }
    let d = z.len();
    let mut point = z.to_vec();
    let mut jac: Option<Array2<f64>> = None;
    for j in 0..d {
        point[j] = z[j] + h;
        let plus = f(&point)?;
        point[j] = z[j] - h;
        let minus = f(&point)?;
        point[j] = z[j];
        if plus.len() != minus.len() {
            return Err(Error::Shape("finite_diff_jacobian: output length changed".into()));
        }
        let jac = jac.get_or_insert_with(|| Array2::zeros((plus.len(), d)));
        for (i, (p, m)) in plus.iter().zip(&minus).enumerate() {
            if !p.is_finite() || !m.is_finite() {
                return Err(Error::NonFinite("finite_diff_jacobian output".into()));
            }
            jac[[i, j]] = (p - m) / (2.0 * h);
        }
    }
    Ok(jac.unwrap_or_else(|| Array2::zeros((0, 0))))
}

/// Determinant by LU with partial pivoting (small test-sized matrices).
pub fn determinant(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "determinant of a non-square matrix");
    let mut a = m.clone();
    let mut det = 1.0;
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| a[[i, k]].abs().total_cmp(&a[[j, k]].abs()))
            .unwrap();
        if a[[p, k]] == 0.0 {
            return 0.0;
        }
        if p != k {
            for c in 0..n {
                a.swap([k, c], [p, c]);
            }
            det = -det;
        }
        det *= a[[k, k]];
        for i in k + 1..n {
            let f = a[[i, k]] / a[[k, k]];
            for c in k..n {
                a[[i, c]] -= f * a[[k, c]];
            }
        }
    }
    det
}
