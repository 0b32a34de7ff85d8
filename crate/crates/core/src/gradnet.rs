//! Dense feed-forward networks with exact reverse-mode gradients, the fused
//! sigmoid/BCE loss and the Adam/AdamW optimizers.
//!
//! Parameters of a network live in one flat `Vec<f64>`; layer `l` occupies a
//! weight block `W_l` (`inputs × outputs`, row-major) followed by its bias.
//! The forward pass is `h_{l+1} = act_l(h_l · W_l + b_l)`, batched over rows.
//! Gradients are returned in the same flat layout, which is also the layout
//! the optimizer and the model file use.

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use crate::ndmath::RngState;
use crate::{Error, Mat, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Softplus,
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative expressed through the pre-activation value.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Softplus => sigmoid(pre),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn n_params(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// Feed-forward network of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<LayerShape>,
    params: Vec<f64>,
}

/// Activations cached by [`Mlp::forward_taped`] for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpTape {
    /// Input to each layer.
    inputs: Vec<Mat>,
    /// Pre-activation output of each layer.
    pre: Vec<Mat>,
}

impl Mlp {
    /// Network with the given layer widths (`widths[0]` is the input dim),
    /// `hidden` activation between layers and an identity output layer.
    /// Weights are Glorot-uniform in `±√(6/(fan_in+fan_out))`, biases zero.
    pub fn new(widths: &[usize], hidden: Activation, rng: &mut RngState) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument("an Mlp needs at least input and output widths".into()));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("zero layer width in {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers: Vec<LayerShape> = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerShape {
                inputs: w[0],
                outputs: w[1],
                activation: if i + 1 == n { Activation::Identity } else { hidden },
            })
            .collect();
        let mut params = Vec::with_capacity(layers.iter().map(LayerShape::n_params).sum());
        for l in &layers {
            let limit = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            params.extend((0..l.inputs * l.outputs).map(|_| (2.0 * rng.uniform() - 1.0) * limit));
            params.extend(std::iter::repeat_n(0.0, l.outputs));
        }
        Ok(Self { layers, params })
    }

    /// Rebuild from explicit layers and a flat parameter vector.
    pub fn from_parts(layers: Vec<LayerShape>, params: Vec<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("empty layer list".into()));
        }
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::Shape(format!(
                    "layer widths do not chain: {} -> {}",
                    w[0].outputs, w[1].inputs
                )));
            }
        }
        let expected: usize = layers.iter().map(LayerShape::n_params).sum();
        if params.len() != expected {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, layers need {expected}",
                params.len()
            )));
        }
        Ok(Self { layers, params })
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Zero the weights and bias of the output layer, so the network outputs 0.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers[self.layers.len() - 1].n_params();
        let n = self.params.len();
        self.params[n - last..].fill(0.0);
    }

    fn layer_views(&self, idx: usize, offset: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let l = self.layers[idx];
        let nw = l.inputs * l.outputs;
        let w = ArrayView2::from_shape((l.inputs, l.outputs), &self.params[offset..offset + nw])
            .expect("layer block shape");
        let b = ArrayView1::from(&self.params[offset + nw..offset + nw + l.outputs]);
        (w, b)
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} input columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut offset = 0;
        for (i, l) in self.layers.iter().enumerate() {
            let (w, b) = self.layer_views(i, offset);
            let mut z = h.dot(&w);
            z += &b;
            let act = l.activation;
            if act != Activation::Identity {
                z.mapv_inplace(|v| act.apply(v));
            }
            h = z;
            offset += l.n_params();
        }
        Ok(h)
    }

    /// Forward pass that records what [`Mlp::backward`] needs.
    pub fn forward_taped(&self, x: &Mat) -> Result<(Mat, MlpTape)> {
        self.check_input(x)?;
        let mut tape = MlpTape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        let mut offset = 0;
        for (i, l) in self.layers.iter().enumerate() {
            let (w, b) = self.layer_views(i, offset);
            let mut z = h.dot(&w);
            z += &b;
            let act = l.activation;
            let out = if act == Activation::Identity {
                z.clone()
            } else {
                z.mapv(|v| act.apply(v))
            };
            tape.inputs.push(h);
            tape.pre.push(z);
            h = out;
            offset += l.n_params();
        }
        Ok((h, tape))
    }

    /// Reverse pass. `upstream` is `∂L/∂output` for the batch the tape was
    /// recorded on. Returns `(∂L/∂params, ∂L/∂input)`.
    pub fn backward(&self, tape: &MlpTape, upstream: &Mat) -> Result<(Vec<f64>, Mat)> {
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::Shape("tape was recorded by a different network".into()));
        }
        let n = tape.inputs[0].nrows();
        if upstream.dim() != (n, self.output_dim()) {
            return Err(Error::Shape(format!(
                "upstream gradient is {:?}, expected ({n}, {})",
                upstream.dim(),
                self.output_dim()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut offsets: Vec<usize> = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for l in &self.layers {
            offsets.push(acc);
            acc += l.n_params();
        }
        let mut g = upstream.clone();
        for i in (0..self.layers.len()).rev() {
            let l = self.layers[i];
            if l.activation != Activation::Identity {
                ndarray::Zip::from(&mut g)
                    .and(&tape.pre[i])
                    .for_each(|gv, &p| *gv *= l.activation.derivative(p));
            }
            let off = offsets[i];
            let nw = l.inputs * l.outputs;
            {
                let (gw_slice, gb_slice) = grads[off..off + nw + l.outputs].split_at_mut(nw);
                let mut gw = ArrayViewMut2::from_shape((l.inputs, l.outputs), gw_slice)
                    .expect("gradient block shape");
                ndarray::linalg::general_mat_mul(1.0, &tape.inputs[i].t(), &g, 0.0, &mut gw);
                for (dst, s) in gb_slice.iter_mut().zip(g.sum_axis(Axis(0))) {
                    *dst = s;
                }
            }
            let (w, _) = self.layer_views(i, off);
            g = g.dot(&w.t());
        }
        Ok((grads, g))
    }
}

/// Binary cross-entropy from a logit via log-sum-exp:
/// `max(l, 0) − l·y + ln(1 + e^{−|l|})`. Returns `(loss, ∂loss/∂l)`.
#[inline]
pub fn bce_with_logits(logit: f64, target: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - target)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    /// Adam with the usual defaults.
    pub fn adam() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    /// AdamW with the usual defaults (decoupled decay 0.01).
    pub fn adamw() -> Self {
        Self {
            weight_decay: 0.01,
            ..Self::adam()
        }
    }
}

/// Moment accumulators for one flat parameter vector.
#[derive(Clone, Debug)]
pub struct OptState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam step with decoupled weight decay
    /// `p ← p·(1 − lr·wd)` applied before the Adam delta.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i}")));
        }
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            if c.weight_decay != 0.0 {
                *p *= decay;
            }
            *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a floor on the denominator so that near-zero
/// gradients are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Compare `analytic` against central differences of `loss` around `params`.
pub fn grad_check<F>(params: &[f64], analytic: &[f64], loss: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::Shape("grad_check: params and gradient differ in length".into()));
    }
    let mut p = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: params.len(),
    };
    for i in 0..params.len() {
        p[i] = params[i] + h;
        let up = loss(&p)?;
        p[i] = params[i] - h;
        let down = loss(&p)?;
        p[i] = params[i];
        let numeric = (up - down) / (2.0 * h);
        let e = rel_err(analytic[i], numeric);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Mean of per-row BCE losses; helper for tests and the classifier.
pub fn mean_bce(logits: &Mat, target: f64) -> f64 {
    let n = logits.nrows().max(1) as f64;
    logits.iter().map(|&l| bce_with_logits(l, target).0).sum::<f64>() / n
}

/// Shape-checked `n × d` matrix from row-major data.
pub fn mat_from_rows(n: usize, d: usize, data: Vec<f64>) -> Result<Mat> {
    Array2::from_shape_vec((n, d), data).map_err(|e| Error::Shape(e.to_string()))
}
