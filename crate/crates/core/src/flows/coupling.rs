use ndarray::Array2;

use super::spline::{raw_len, Spline};
use crate::gradnet::{Activation, Mlp, MlpTape};
use crate::ndmath::RngState;
use crate::{Error, Mat, Result, Vector};

/// Split of the coordinates into a passive (conditioning, copied through)
/// set and an active (transformed) set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CouplingMask {
    dim: usize,
    passive: Vec<usize>,
    active: Vec<usize>,
}

impl CouplingMask {
    pub fn new(dim: usize, mut passive: Vec<usize>) -> Result<Self> {
        passive.sort_unstable();
        passive.dedup();
        if passive.iter().any(|&p| p >= dim) {
            return Err(Error::InvalidArgument(format!("passive index out of range for dim {dim}")));
        }
        let active: Vec<usize> = (0..dim).filter(|i| passive.binary_search(i).is_err()).collect();
        if passive.is_empty() || active.is_empty() {
            return Err(Error::InvalidArgument(
                "a coupling mask needs at least one passive and one active coordinate".into(),
            ));
        }
        Ok(Self { dim, passive, active })
    }

    /// Passive set = coordinates whose index has the given parity.
    pub fn alternating(dim: usize, parity: usize) -> Result<Self> {
        Self::new(dim, (0..dim).filter(|i| i % 2 == parity % 2).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn passive(&self) -> &[usize] {
        &self.passive
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    fn gather_passive(&self, m: &Mat) -> Mat {
        Array2::from_shape_fn((m.nrows(), self.passive.len()), |(i, j)| m[[i, self.passive[j]]])
    }

    fn scatter_add_passive(&self, dst: &mut Mat, g: &Mat) {
        for (j, &c) in self.passive.iter().enumerate() {
            let mut col = dst.column_mut(c);
            col += &g.column(j);
        }
    }
}

/// Cached values of a taped coupling pass.
#[derive(Clone, Debug)]
pub struct CouplingTape {
    /// Layer input (z for forward, x for inverse).
    input: Mat,
    /// Layer output.
    output: Mat,
    /// Raw conditioner output.
    cond_out: Mat,
    cond_tape: MlpTape,
}

#[derive(Clone, Debug)]
pub(crate) enum LayerTape {
    Coupling(CouplingTape),
    Permutation,
}

fn conditioner(mask: &CouplingMask, hidden: &[usize], act: Activation, outputs: usize, rng: &mut RngState) -> Result<Mlp> {
    let mut widths = Vec::with_capacity(hidden.len() + 2);
    widths.push(mask.passive.len());
    widths.extend_from_slice(hidden);
    widths.push(outputs);
    let mut net = Mlp::new(&widths, act, rng)?;
    net.zero_output_layer();
    Ok(net)
}

fn run_conditioner(net: &Mlp, mask: &CouplingMask, input: &Mat) -> Result<(Mat, MlpTape)> {
    let (out, tape) = net.forward_taped(&mask.gather_passive(input))?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("coupling conditioner output".into()));
    }
    Ok((out, tape))
}

/// Affine coupling `x_a = z_a·exp(s) + t`, `(s_raw, t) = NN(z_p)`, with the
/// soft clamp `s = s_max·tanh(s_raw/s_max)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineCoupling {
    pub(crate) mask: CouplingMask,
    pub(crate) conditioner: Mlp,
    pub(crate) s_max: f64,
}

impl AffineCoupling {
    pub fn new(mask: CouplingMask, hidden: &[usize], act: Activation, s_max: f64, rng: &mut RngState) -> Result<Self> {
        let k = mask.active.len();
        let conditioner = conditioner(&mask, hidden, act, 2 * k, rng)?;
        Ok(Self { mask, conditioner, s_max })
    }

    pub fn from_parts(mask: CouplingMask, conditioner: Mlp, s_max: f64) -> Result<Self> {
        if conditioner.input_dim() != mask.passive.len() || conditioner.output_dim() != 2 * mask.active.len() {
            return Err(Error::Shape("affine conditioner does not fit the mask".into()));
        }
        Ok(Self { mask, conditioner, s_max })
    }

    pub fn mask(&self) -> &CouplingMask {
        &self.mask
    }

    pub fn conditioner(&self) -> &Mlp {
        &self.conditioner
    }

    pub fn conditioner_mut(&mut self) -> &mut Mlp {
        &mut self.conditioner
    }

    #[inline]
    fn scale(&self, raw: f64) -> f64 {
        self.s_max * (raw / self.s_max).tanh()
    }

    #[inline]
    fn scale_grad(&self, raw: f64) -> f64 {
        let t = (raw / self.s_max).tanh();
        1.0 - t * t
    }

    pub(crate) fn forward_taped(&self, z: &Mat) -> Result<(Mat, Vector, LayerTape)> {
        let (h, cond_tape) = run_conditioner(&self.conditioner, &self.mask, z)?;
        let k = self.mask.active.len();
        let mut x = z.clone();
        let mut logdet = Vector::zeros(z.nrows());
        for i in 0..z.nrows() {
            for (j, &a) in self.mask.active.iter().enumerate() {
                let s = self.scale(h[[i, j]]);
                x[[i, a]] = z[[i, a]] * s.exp() + h[[i, k + j]];
                logdet[i] += s;
            }
        }
        let tape = CouplingTape { input: z.clone(), output: x.clone(), cond_out: h, cond_tape };
        Ok((x, logdet, LayerTape::Coupling(tape)))
    }

    pub(crate) fn inverse_taped(&self, x: &Mat) -> Result<(Mat, Vector, LayerTape)> {
        let (h, cond_tape) = run_conditioner(&self.conditioner, &self.mask, x)?;
        let k = self.mask.active.len();
        let mut z = x.clone();
        let mut logdet = Vector::zeros(x.nrows());
        for i in 0..x.nrows() {
            for (j, &a) in self.mask.active.iter().enumerate() {
                let s = self.scale(h[[i, j]]);
                z[[i, a]] = (x[[i, a]] - h[[i, k + j]]) * (-s).exp();
                logdet[i] -= s;
            }
        }
        let tape = CouplingTape { input: x.clone(), output: z.clone(), cond_out: h, cond_tape };
        Ok((z, logdet, LayerTape::Coupling(tape)))
    }

    pub(crate) fn backward_forward(&self, t: &CouplingTape, gx: &Mat, glogdet: &Vector) -> Result<(Mat, Vec<f64>)> {
        let k = self.mask.active.len();
        let z = &t.input;
        let mut gz = gx.clone();
        let mut gh = Mat::zeros(t.cond_out.dim());
        for i in 0..z.nrows() {
            for (j, &a) in self.mask.active.iter().enumerate() {
                let raw = t.cond_out[[i, j]];
                let es = self.scale(raw).exp();
                let gxa = gx[[i, a]];
                gz[[i, a]] = gxa * es;
                let gs = gxa * z[[i, a]] * es + glogdet[i];
                gh[[i, j]] = gs * self.scale_grad(raw);
                gh[[i, k + j]] = gxa;
            }
        }
        let (gp, gin) = self.conditioner.backward(&t.cond_tape, &gh)?;
        self.mask.scatter_add_passive(&mut gz, &gin);
        Ok((gz, gp))
    }

    pub(crate) fn backward_inverse(&self, t: &CouplingTape, gz: &Mat, glogdet: &Vector) -> Result<(Mat, Vec<f64>)> {
        let k = self.mask.active.len();
        let z = &t.output;
        let mut gx = gz.clone();
        let mut gh = Mat::zeros(t.cond_out.dim());
        for i in 0..z.nrows() {
            for (j, &a) in self.mask.active.iter().enumerate() {
                let raw = t.cond_out[[i, j]];
                let inv = (-self.scale(raw)).exp();
                let gza = gz[[i, a]];
                gx[[i, a]] = gza * inv;
                // z_a = (x_a − t)·e^{−s}; logdet_inv = −Σ s
                let gs = -gza * z[[i, a]] - glogdet[i];
                gh[[i, j]] = gs * self.scale_grad(raw);
                gh[[i, k + j]] = -gza * inv;
            }
        }
        let (gp, gin) = self.conditioner.backward(&t.cond_tape, &gh)?;
        self.mask.scatter_add_passive(&mut gx, &gin);
        Ok((gx, gp))
    }
}

/// Rational-quadratic spline coupling: each active coordinate goes through
/// its own monotone spline whose `3K − 1` parameters come from `NN(z_p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RqsCoupling {
    pub(crate) mask: CouplingMask,
    pub(crate) conditioner: Mlp,
    pub(crate) bins: usize,
    pub(crate) bound: f64,
}

impl RqsCoupling {
    pub fn new(
        mask: CouplingMask,
        hidden: &[usize],
        act: Activation,
        bins: usize,
        bound: f64,
        rng: &mut RngState,
    ) -> Result<Self> {
        let outputs = mask.active.len() * raw_len(bins);
        let conditioner = conditioner(&mask, hidden, act, outputs, rng)?;
        Ok(Self { mask, conditioner, bins, bound })
    }

    pub fn from_parts(mask: CouplingMask, conditioner: Mlp, bins: usize, bound: f64) -> Result<Self> {
        if bins < 2 || !(bound > 0.0) {
            return Err(Error::InvalidArgument("spline needs bins >= 2 and bound > 0".into()));
        }
        if conditioner.input_dim() != mask.passive.len()
            || conditioner.output_dim() != mask.active.len() * raw_len(bins)
        {
            return Err(Error::Shape("spline conditioner does not fit the mask".into()));
        }
        Ok(Self { mask, conditioner, bins, bound })
    }

    pub fn mask(&self) -> &CouplingMask {
        &self.mask
    }

    pub fn conditioner(&self) -> &Mlp {
        &self.conditioner
    }

    pub fn conditioner_mut(&mut self) -> &mut Mlp {
        &mut self.conditioner
    }

    fn spline<'a>(&self, h: &'a Mat, i: usize, j: usize) -> (Spline, &'a [f64]) {
        let r = raw_len(self.bins);
        let row = h.row(i).to_slice().expect("row-major conditioner output");
        let raw = &row[j * r..(j + 1) * r];
        (Spline::from_raw(raw, self.bins, self.bound), raw)
    }

    fn apply(&self, input: &Mat, inverse: bool) -> Result<(Mat, Vector, LayerTape)> {
        let (h, cond_tape) = run_conditioner(&self.conditioner, &self.mask, input)?;
        let mut out = input.clone();
        let mut logdet = Vector::zeros(input.nrows());
        for i in 0..input.nrows() {
            for (j, &a) in self.mask.active.iter().enumerate() {
                let (sp, _) = self.spline(&h, i, j);
                let (v, l) = if inverse { sp.inverse(input[[i, a]]) } else { sp.forward(input[[i, a]]) };
                debug_assert!(l.is_finite(), "spline derivative must stay positive");
                out[[i, a]] = v;
                logdet[i] += l;
            }
        }
        let tape = CouplingTape { input: input.clone(), output: out.clone(), cond_out: h, cond_tape };
        Ok((out, logdet, LayerTape::Coupling(tape)))
    }

    pub(crate) fn forward_taped(&self, z: &Mat) -> Result<(Mat, Vector, LayerTape)> {
        self.apply(z, false)
    }

    pub(crate) fn inverse_taped(&self, x: &Mat) -> Result<(Mat, Vector, LayerTape)> {
        self.apply(x, true)
    }

    fn backward(&self, t: &CouplingTape, g_out: &Mat, glogdet: &Vector, inverse: bool) -> Result<(Mat, Vec<f64>)> {
        let r = raw_len(self.bins);
        let mut g_in = g_out.clone();
        let mut gh = Mat::zeros(t.cond_out.dim());
        for i in 0..t.input.nrows() {
            for (j, &a) in self.mask.active.iter().enumerate() {
                let (sp, raw) = self.spline(&t.cond_out, i, j);
                let mut graw = vec![0.0; r];
                let v = t.input[[i, a]];
                g_in[[i, a]] = if inverse {
                    sp.inverse_adjoint(v, g_out[[i, a]], glogdet[i], raw, &mut graw)
                } else {
                    sp.forward_adjoint(v, g_out[[i, a]], glogdet[i], raw, &mut graw)
                };
                for (dst, g) in gh.row_mut(i).iter_mut().skip(j * r).zip(graw) {
                    *dst += g;
                }
            }
        }
        let (gp, gin) = self.conditioner.backward(&t.cond_tape, &gh)?;
        self.mask.scatter_add_passive(&mut g_in, &gin);
        Ok((g_in, gp))
    }

    pub(crate) fn backward_forward(&self, t: &CouplingTape, gx: &Mat, glogdet: &Vector) -> Result<(Mat, Vec<f64>)> {
        self.backward(t, gx, glogdet, false)
    }

    pub(crate) fn backward_inverse(&self, t: &CouplingTape, gz: &Mat, glogdet: &Vector) -> Result<(Mat, Vec<f64>)> {
        self.backward(t, gz, glogdet, true)
    }
}

/// Coordinate permutation `x_i = z_{perm[i]}`; volume preserving.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    perm: Vec<usize>,
}

impl Permutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation")));
            }
        }
        Ok(Self { perm })
    }

    pub fn reverse(dim: usize) -> Self {
        Self { perm: (0..dim).rev().collect() }
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub(crate) fn forward_taped(&self, z: &Mat) -> (Mat, Vector, LayerTape) {
        let x = Array2::from_shape_fn(z.dim(), |(i, c)| z[[i, self.perm[c]]]);
        (x, Vector::zeros(z.nrows()), LayerTape::Permutation)
    }

    pub(crate) fn inverse_taped(&self, x: &Mat) -> (Mat, Vector, LayerTape) {
        let mut z = Mat::zeros(x.dim());
        for (c, &p) in self.perm.iter().enumerate() {
            z.column_mut(p).assign(&x.column(c));
        }
        (z, Vector::zeros(x.nrows()), LayerTape::Permutation)
    }

    pub(crate) fn backward_forward(&self, gx: &Mat) -> Mat {
        self.inverse_taped(gx).0
    }

    pub(crate) fn backward_inverse(&self, gz: &Mat) -> Mat {
        self.forward_taped(gz).0
    }
}
