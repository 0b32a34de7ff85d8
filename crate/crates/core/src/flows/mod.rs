//! Invertible layers with analytic log-det Jacobians and their composition.
//!
//! Direction convention: `forward` maps base-space points `z` to data space
//! `x = f(z)` and returns `ln|det ∂f/∂z|`; `inverse` maps `x` back and returns
//! `ln|det ∂f⁻¹/∂x|`. The data log-density is
//! `log p(x) = log N(f⁻¹(x); 0, I) + Σ_layers ln|det ∂f_i⁻¹|`.
//!
//! Every layer also exposes taped variants of both directions together with
//! reverse-mode passes, which the trainers use to differentiate the
//! likelihood (inverse direction) and the Jacobian penalty (forward
//! direction) with respect to the conditioner weights.

mod coupling;
mod spline;

use ndarray::{concatenate, Axis};
use serde::{Deserialize, Serialize};

pub use coupling::{AffineCoupling, CouplingMask, Permutation, RqsCoupling};
pub(crate) use coupling::LayerTape;

use crate::gradnet::{Activation, LayerShape, Mlp};
use crate::ndmath::{std_normal_logpdf_unchecked, RngState};
use crate::{par, Error, Mat, Result, Vector};

/// Rows per work item when large batches are split across threads.
const ROW_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub enum FlowLayer {
    Affine(AffineCoupling),
    Rqs(RqsCoupling),
    Permutation(Permutation),
}

impl FlowLayer {
    pub fn dim(&self) -> usize {
        match self {
            FlowLayer::Affine(l) => l.mask.dim(),
            FlowLayer::Rqs(l) => l.mask.dim(),
            FlowLayer::Permutation(p) => p.dim(),
        }
    }

    pub fn forward(&self, z: &Mat) -> Result<(Mat, Vector)> {
        self.forward_taped(z).map(|(x, l, _)| (x, l))
    }

    pub fn inverse(&self, x: &Mat) -> Result<(Mat, Vector)> {
        self.inverse_taped(x).map(|(z, l, _)| (z, l))
    }

    pub(crate) fn forward_taped(&self, z: &Mat) -> Result<(Mat, Vector, LayerTape)> {
        self.check(z)?;
        match self {
            FlowLayer::Affine(l) => l.forward_taped(z),
            FlowLayer::Rqs(l) => l.forward_taped(z),
            FlowLayer::Permutation(p) => Ok(p.forward_taped(z)),
        }
    }

    pub(crate) fn inverse_taped(&self, x: &Mat) -> Result<(Mat, Vector, LayerTape)> {
        self.check(x)?;
        match self {
            FlowLayer::Affine(l) => l.inverse_taped(x),
            FlowLayer::Rqs(l) => l.inverse_taped(x),
            FlowLayer::Permutation(p) => Ok(p.inverse_taped(x)),
        }
    }

    /// Given `∂L/∂x` and `∂L/∂logdet` for a taped forward pass, returns
    /// `(∂L/∂z, ∂L/∂params)`.
    pub(crate) fn backward_forward(&self, tape: &LayerTape, gx: &Mat, glogdet: &Vector) -> Result<(Mat, Vec<f64>)> {
        match (self, tape) {
            (FlowLayer::Affine(l), LayerTape::Coupling(t)) => l.backward_forward(t, gx, glogdet),
            (FlowLayer::Rqs(l), LayerTape::Coupling(t)) => l.backward_forward(t, gx, glogdet),
            (FlowLayer::Permutation(p), LayerTape::Permutation) => Ok((p.backward_forward(gx), Vec::new())),
            _ => Err(Error::Shape("tape does not belong to this layer".into())),
        }
    }

    /// Given `∂L/∂z` and `∂L/∂logdet_inverse` for a taped inverse pass,
    /// returns `(∂L/∂x, ∂L/∂params)`.
    pub(crate) fn backward_inverse(&self, tape: &LayerTape, gz: &Mat, glogdet: &Vector) -> Result<(Mat, Vec<f64>)> {
        match (self, tape) {
            (FlowLayer::Affine(l), LayerTape::Coupling(t)) => l.backward_inverse(t, gz, glogdet),
            (FlowLayer::Rqs(l), LayerTape::Coupling(t)) => l.backward_inverse(t, gz, glogdet),
            (FlowLayer::Permutation(p), LayerTape::Permutation) => Ok((p.backward_inverse(gz), Vec::new())),
            _ => Err(Error::Shape("tape does not belong to this layer".into())),
        }
    }

    fn check(&self, m: &Mat) -> Result<()> {
        if m.ncols() != self.dim() {
            return Err(Error::Shape(format!("layer has dim {}, input has {} columns", self.dim(), m.ncols())));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow layer input".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> &[f64] {
        match self {
            FlowLayer::Affine(l) => l.conditioner.params(),
            FlowLayer::Rqs(l) => l.conditioner.params(),
            FlowLayer::Permutation(_) => &[],
        }
    }

    fn params_mut(&mut self) -> &mut [f64] {
        match self {
            FlowLayer::Affine(l) => l.conditioner.params_mut(),
            FlowLayer::Rqs(l) => l.conditioner.params_mut(),
            FlowLayer::Permutation(_) => &mut [],
        }
    }

    fn descriptor(&self) -> LayerDescriptor {
        match self {
            FlowLayer::Affine(l) => LayerDescriptor::Affine {
                passive: l.mask.passive().to_vec(),
                conditioner: l.conditioner.layers().to_vec(),
                s_max: l.s_max,
            },
            FlowLayer::Rqs(l) => LayerDescriptor::Rqs {
                passive: l.mask.passive().to_vec(),
                conditioner: l.conditioner.layers().to_vec(),
                bins: l.bins,
                bound: l.bound,
            },
            FlowLayer::Permutation(p) => LayerDescriptor::Permutation { perm: p.perm().to_vec() },
        }
    }
}

/// Serializable description of one layer's architecture (no weights).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerDescriptor {
    Affine {
        passive: Vec<usize>,
        conditioner: Vec<LayerShape>,
        s_max: f64,
    },
    Rqs {
        passive: Vec<usize>,
        conditioner: Vec<LayerShape>,
        bins: usize,
        bound: f64,
    },
    Permutation {
        perm: Vec<usize>,
    },
}

/// Architecture of a whole stack; together with the flat parameter vector
/// it reconstructs a [`FlowStack`] exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackDescriptor {
    pub dim: usize,
    pub layers: Vec<LayerDescriptor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingKind {
    Affine,
    Rqs,
}

impl std::str::FromStr for CouplingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affine" => Ok(CouplingKind::Affine),
            "rqs" | "spline" => Ok(CouplingKind::Rqs),
            other => Err(Error::InvalidArgument(format!("unknown coupling kind '{other}'"))),
        }
    }
}

/// High-level architecture choice used to build fresh stacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSpec {
    pub kind: CouplingKind,
    /// Number of coupling layers; masks alternate even/odd coordinates.
    pub layers: usize,
    /// Hidden widths of each conditioner.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Affine log-scale clamp.
    pub s_max: f64,
    /// Spline bins.
    pub bins: usize,
    /// Spline half-width.
    pub bound: f64,
}

impl Default for FlowSpec {
    fn default() -> Self {
        Self {
            kind: CouplingKind::Rqs,
            layers: 6,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            s_max: 3.0,
            bins: 8,
            bound: 4.0,
        }
    }
}

impl FlowSpec {
    /// Build a stack whose conditioners have zero output layers, i.e. the
    /// identity map. One-dimensional data admits no coupling split, so the
    /// result is then an empty (identity) stack.
    pub fn build(&self, dim: usize, rng: &mut RngState) -> Result<FlowStack> {
        if dim == 0 {
            return Err(Error::InvalidArgument("flow dimension must be >= 1".into()));
        }
        if self.layers == 0 {
            return Err(Error::InvalidArgument("flow needs at least one coupling layer".into()));
        }
        if self.kind == CouplingKind::Rqs && (self.bins < 2 || !(self.bound > 0.0)) {
            return Err(Error::InvalidArgument("spline needs bins >= 2 and bound > 0".into()));
        }
        if self.kind == CouplingKind::Affine && !(self.s_max > 0.0) {
            return Err(Error::InvalidArgument("s_max must be > 0".into()));
        }
        let mut stack = FlowStack::identity(dim);
        if dim == 1 {
            return Ok(stack);
        }
        for i in 0..self.layers {
            let mask = CouplingMask::alternating(dim, i % 2)?;
            let layer = match self.kind {
                CouplingKind::Affine => FlowLayer::Affine(AffineCoupling::new(mask, &self.hidden, self.activation, self.s_max, rng)?),
                CouplingKind::Rqs => FlowLayer::Rqs(RqsCoupling::new(mask, &self.hidden, self.activation, self.bins, self.bound, rng)?),
            };
            stack.push(layer)?;
        }
        Ok(stack)
    }
}

/// Composition `f = f_N ∘ … ∘ f_1` of invertible layers.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowStack {
    dim: usize,
    layers: Vec<FlowLayer>,
}

/// Per-layer tapes of a taped stack pass, in layer order.
#[derive(Clone, Debug)]
pub struct StackTape {
    layers: Vec<LayerTape>,
}

impl FlowStack {
    pub fn identity(dim: usize) -> Self {
        Self { dim, layers: Vec::new() }
    }

    pub fn push(&mut self, layer: FlowLayer) -> Result<()> {
        if layer.dim() != self.dim {
            return Err(Error::Shape(format!("layer dim {} does not match stack dim {}", layer.dim(), self.dim)));
        }
        self.layers.push(layer);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    fn check(&self, m: &Mat) -> Result<()> {
        if m.ncols() != self.dim {
            return Err(Error::Shape(format!("stack has dim {}, input has {} columns", self.dim, m.ncols())));
        }
        Ok(())
    }

    /// `x = f(z)` and `ln|det ∂f/∂z|` per row.
    pub fn forward(&self, z: &Mat) -> Result<(Mat, Vector)> {
        self.check(z)?;
        self.chunked(z, |c| self.forward_taped(c).map(|(x, l, _)| (x, l)))
    }

    /// `z = f⁻¹(x)` and `ln|det ∂f⁻¹/∂x|` per row.
    pub fn inverse(&self, x: &Mat) -> Result<(Mat, Vector)> {
        self.check(x)?;
        self.chunked(x, |c| self.inverse_taped(c).map(|(z, l, _)| (z, l)))
    }

    /// Exact data log-density by change of variables.
    pub fn log_prob(&self, x: &Mat) -> Result<Vector> {
        let (z, logdet) = self.inverse(x)?;
        let out: Vector = z
            .rows()
            .into_iter()
            .zip(logdet.iter())
            .map(|(row, l)| std_normal_logpdf_unchecked(row.as_slice().expect("row-major")) + l)
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stack log-probability".into()));
        }
        Ok(out)
    }

    /// Push base-space points through the flow.
    pub fn sample(&self, z: &Mat) -> Result<Mat> {
        self.forward(z).map(|(x, _)| x)
    }

    fn chunked<F>(&self, m: &Mat, f: F) -> Result<(Mat, Vector)>
    where
        F: Fn(&Mat) -> Result<(Mat, Vector)> + Sync + Send,
    {
        if m.nrows() <= ROW_CHUNK {
            return f(m);
        }
        let parts = par::map_chunks(m.nrows(), ROW_CHUNK, |r| f(&m.slice(ndarray::s![r, ..]).to_owned()));
        let parts: Vec<(Mat, Vector)> = parts.into_iter().collect::<Result<_>>()?;
        let mats: Vec<_> = parts.iter().map(|(a, _)| a.view()).collect();
        let vecs: Vec<_> = parts.iter().map(|(_, b)| b.view()).collect();
        Ok((
            concatenate(Axis(0), &mats).expect("chunk shapes"),
            concatenate(Axis(0), &vecs).expect("chunk shapes"),
        ))
    }

    pub fn forward_taped(&self, z: &Mat) -> Result<(Mat, Vector, StackTape)> {
        self.check(z)?;
        let mut cur = z.clone();
        let mut logdet = Vector::zeros(z.nrows());
        let mut tapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, l, t) = layer.forward_taped(&cur)?;
            logdet += &l;
            tapes.push(t);
            cur = next;
        }
        Ok((cur, logdet, StackTape { layers: tapes }))
    }

    pub fn inverse_taped(&self, x: &Mat) -> Result<(Mat, Vector, StackTape)> {
        self.check(x)?;
        let mut cur = x.clone();
        let mut logdet = Vector::zeros(x.nrows());
        let mut tapes = Vec::with_capacity(self.layers.len());
        for layer in self.layers.iter().rev() {
            let (next, l, t) = layer.inverse_taped(&cur)?;
            logdet += &l;
            tapes.push(t);
            cur = next;
        }
        tapes.reverse();
        Ok((cur, logdet, StackTape { layers: tapes }))
    }

    /// Reverse pass through a taped forward run. Every layer's log-det feeds
    /// the total, so each receives the same `glogdet`.
    /// Returns `(∂L/∂z, ∂L/∂params)` with parameters in [`FlowStack::params`] order.
    pub fn backward_forward(&self, tape: &StackTape, gx: &Mat, glogdet: &Vector) -> Result<(Mat, Vec<f64>)> {
        self.check_tape(tape)?;
        let mut g = gx.clone();
        let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (gz, gp) = layer.backward_forward(&tape.layers[i], &g, glogdet)?;
            per_layer[i] = gp;
            g = gz;
        }
        Ok((g, per_layer.concat()))
    }

    /// Reverse pass through a taped inverse run.
    /// Returns `(∂L/∂x, ∂L/∂params)`.
    pub fn backward_inverse(&self, tape: &StackTape, gz: &Mat, glogdet: &Vector) -> Result<(Mat, Vec<f64>)> {
        self.check_tape(tape)?;
        let mut g = gz.clone();
        let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate() {
            let (gx, gp) = layer.backward_inverse(&tape.layers[i], &g, glogdet)?;
            per_layer[i] = gp;
            g = gx;
        }
        Ok((g, per_layer.concat()))
    }

    fn check_tape(&self, tape: &StackTape) -> Result<()> {
        if tape.layers.len() != self.layers.len() {
            return Err(Error::Shape("tape was recorded by a different stack".into()));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.params().len()).sum()
    }

    /// All conditioner parameters, concatenated in layer order.
    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.params().iter().copied()).collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.n_params(), params.len())));
        }
        let mut off = 0;
        for layer in &mut self.layers {
            let dst = layer.params_mut();
            dst.copy_from_slice(&params[off..off + dst.len()]);
            off += dst.len();
        }
        Ok(())
    }

    /// Add uniform noise in `±scale` to every parameter.
    pub fn perturb_params(&mut self, scale: f64, rng: &mut RngState) {
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                *p += scale * (2.0 * rng.uniform() - 1.0);
            }
        }
    }

    pub fn descriptor(&self) -> StackDescriptor {
        StackDescriptor {
            dim: self.dim,
            layers: self.layers.iter().map(FlowLayer::descriptor).collect(),
        }
    }

    pub fn from_descriptor(desc: &StackDescriptor, params: &[f64]) -> Result<Self> {
        let mut stack = FlowStack::identity(desc.dim);
        let mut off = 0;
        let mut take = |shapes: &[LayerShape]| -> Result<Mlp> {
            let n: usize = shapes.iter().map(|l| l.inputs * l.outputs + l.outputs).sum();
            if off + n > params.len() {
                return Err(Error::ModelFormat("parameter array shorter than the architecture needs".into()));
            }
            let mlp = Mlp::from_parts(shapes.to_vec(), params[off..off + n].to_vec())?;
            off += n;
            Ok(mlp)
        };
        for ld in &desc.layers {
            let layer = match ld {
                LayerDescriptor::Affine { passive, conditioner, s_max } => {
                    let mask = CouplingMask::new(desc.dim, passive.clone())?;
                    FlowLayer::Affine(AffineCoupling::from_parts(mask, take(conditioner)?, *s_max)?)
                }
                LayerDescriptor::Rqs { passive, conditioner, bins, bound } => {
                    let mask = CouplingMask::new(desc.dim, passive.clone())?;
                    FlowLayer::Rqs(RqsCoupling::from_parts(mask, take(conditioner)?, *bins, *bound)?)
                }
                LayerDescriptor::Permutation { perm } => FlowLayer::Permutation(Permutation::new(perm.clone())?),
            };
            stack.push(layer)?;
        }
        if off != params.len() {
            return Err(Error::ModelFormat(format!(
                "architecture uses {off} parameters but the array holds {}",
                params.len()
            )));
        }
        Ok(stack)
    }
}

#[cfg(test)]
mod tests;
