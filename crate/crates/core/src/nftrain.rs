//! Likelihood training of a [`FlowStack`] on normal samples with the
//! Jacobian penalty
//!
//! ```text
//! minimize   NLL(θ) + λ(step) · L_J(θ),     L_J = E_{z~N(0,I)} (ln|det ∂f/∂z|)²
//! ```
//!
//! The penalty is a Monte-Carlo mean over fresh base-space draws each step,
//! so it covers the whole latent space rather than only the data's latents.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::flows::FlowStack;
use crate::gradnet::{AdamConfig, OptState};
use crate::ndmath::{sample_std_normal, RngState, LN_2PI};
use crate::{Error, Mat, Result, Vector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NfTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_max: f64,
    /// Fraction of all steps over which λ ramps linearly from 0 to `lambda_max`.
    pub ramp_fraction: f64,
    /// Base-space draws per step for the penalty; `None` uses the batch size.
    pub reg_samples: Option<usize>,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for NfTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 100,
            lambda_max: 1.0,
            ramp_fraction: 0.3,
            reg_samples: None,
            optimizer: AdamConfig::adam(),
            seed: 0,
        }
    }
}

impl NfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.epochs == 0 {
            bad.push("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1");
        }
        if !(self.lambda_max >= 0.0) || !self.lambda_max.is_finite() {
            bad.push("lambda_max must be a finite value >= 0");
        }
        if !(0.0..=1.0).contains(&self.ramp_fraction) {
            bad.push("ramp_fraction must lie in [0, 1]");
        }
        if self.reg_samples == Some(0) {
            bad.push("reg_samples must be >= 1");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(bad.join("; ")))
        }
    }

    fn reg_count(&self) -> usize {
        self.reg_samples.unwrap_or(self.batch_size)
    }
}

/// Per-epoch diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub nll: f64,
    pub l_j: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    /// CSV with header `epoch,nll,l_j,lambda`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,nll,l_j,lambda")?;
        for r in &self.records {
            writeln!(w, "{},{},{},{}", r.epoch, r.nll, r.l_j, r.lambda)?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Mean negative log-likelihood of the batch and its parameter gradient.
pub fn nll_loss_grad(stack: &FlowStack, x: &Mat) -> Result<(f64, Vec<f64>)> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (z, logdet, tape) = stack.inverse_taped(x)?;
    let d = x.ncols() as f64;
    let sq: Vector = z.rows().into_iter().map(|r| r.dot(&r)).collect();
    // −log p(x) = d/2·ln2π + ‖z‖²/2 − logdet_inv
    let loss = (0.5 * d * LN_2PI * n as f64 + 0.5 * sq.sum() - logdet.sum()) / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("negative log-likelihood".into()));
    }
    let inv_n = 1.0 / n as f64;
    let gz = z.mapv(|v| v * inv_n);
    let gl = Vector::from_elem(n, -inv_n);
    let (_, grads) = stack.backward_inverse(&tape, &gz, &gl)?;
    Ok((loss, grads))
}

/// Mean negative log-likelihood of the batch.
pub fn nll_loss(stack: &FlowStack, x: &Mat) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let lp = stack.log_prob(x)?;
    Ok(-lp.mean().expect("nonempty"))
}

/// Penalty value on given base-space points: mean of `(ln|det ∂f/∂z|)²`.
pub fn jac_reg_on(stack: &FlowStack, z: &Mat) -> Result<f64> {
    if z.nrows() == 0 {
        return Err(Error::InvalidArgument("empty latent batch".into()));
    }
    let (_, logdet) = stack.forward(z)?;
    Ok(logdet.mapv(|l| l * l).mean().expect("nonempty"))
}

/// Penalty value and gradient on given base-space points.
pub fn jac_reg_grad_on(stack: &FlowStack, z: &Mat) -> Result<(f64, Vec<f64>)> {
    let m = z.nrows();
    if m == 0 {
        return Err(Error::InvalidArgument("empty latent batch".into()));
    }
    let (x, logdet, tape) = stack.forward_taped(z)?;
    let value = logdet.mapv(|l| l * l).sum() / m as f64;
    let gl = logdet.mapv(|l| 2.0 * l / m as f64);
    let (_, grads) = stack.backward_forward(&tape, &Mat::zeros(x.dim()), &gl)?;
    Ok((value, grads))
}

/// Monte-Carlo penalty over `m` fresh base-space draws.
pub fn jac_reg(stack: &FlowStack, m: usize, rng: &mut RngState) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidArgument("jac_reg needs m >= 1".into()));
    }
    jac_reg_on(stack, &sample_std_normal(m, stack.dim(), rng))
}

/// Linear ramp `λ_max · min(1, step / (ramp_fraction · total_steps))`.
pub fn lambda_at(step: usize, total_steps: usize, config: &NfTrainConfig) -> f64 {
    let ramp = config.ramp_fraction * total_steps as f64;
    if ramp <= 0.0 {
        return config.lambda_max;
    }
    config.lambda_max * (step as f64 / ramp).min(1.0)
}

/// Optimizer steps in a run: `epochs · ⌈n / batch⌉`.
pub fn total_steps(n: usize, config: &NfTrainConfig) -> usize {
    config.epochs * n.div_ceil(config.batch_size)
}

/// Reject columns with zero spread; they cannot be standardized.
pub(crate) fn check_not_degenerate(data: &Mat) -> Result<()> {
    for (j, col) in data.columns().into_iter().enumerate() {
        let first = col[0];
        if col.iter().all(|&v| v == first) {
            return Err(Error::Data(format!("feature {j} is constant")));
        }
    }
    Ok(())
}

/// Fit `stack` to `normal_data` (expected standardized). Minibatches are
/// drawn by reshuffling every epoch; the last batch may be short.
pub fn train_flow(normal_data: &Mat, mut stack: FlowStack, config: &NfTrainConfig) -> Result<(FlowStack, TrainTrace)> {
    config.validate()?;
    let n = normal_data.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("no normal samples to train on".into()));
    }
    if normal_data.ncols() != stack.dim() {
        return Err(Error::Shape(format!(
            "data has {} features, flow has dim {}",
            normal_data.ncols(),
            stack.dim()
        )));
    }
    if n > 1 {
        check_not_degenerate(normal_data)?;
    }
    let root = RngState::new(config.seed);
    let mut shuffle_rng = root.fork(1);
    let mut reg_rng = root.fork(2);
    let mut opt = OptState::new(stack.n_params(), config.optimizer);
    let total = total_steps(n, config);
    let mut params = stack.params();
    let mut trace = TrainTrace::default();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let order = shuffle_rng.permutation(n);
        let (mut nll_sum, mut lj_sum, mut batches) = (0.0, 0.0, 0usize);
        let mut lambda = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = normal_data.select(ndarray::Axis(0), chunk);
            lambda = lambda_at(step, total, config);
            let diverged = |what: &str| Error::Diverged { epoch: epoch + 1, step, what: what.to_string() };

            let (nll, mut grads) = nll_loss_grad(&stack, &batch).map_err(|e| diverged(&e.to_string()))?;
            let z = sample_std_normal(config.reg_count(), stack.dim(), &mut reg_rng);
            let l_j = if lambda > 0.0 {
                let (v, g) = jac_reg_grad_on(&stack, &z).map_err(|e| diverged(&e.to_string()))?;
                for (a, b) in grads.iter_mut().zip(g) {
                    *a += lambda * b;
                }
                v
            } else {
                jac_reg_on(&stack, &z).map_err(|e| diverged(&e.to_string()))?
            };
            if !nll.is_finite() || !l_j.is_finite() {
                return Err(diverged("non-finite loss"));
            }
            opt.step(&mut params, &grads).map_err(|e| diverged(&e.to_string()))?;
            stack.set_params(&params)?;
            nll_sum += nll;
            lj_sum += l_j;
            batches += 1;
            step += 1;
        }
        trace.records.push(EpochRecord {
            epoch: epoch + 1,
            nll: nll_sum / batches as f64,
            l_j: lj_sum / batches as f64,
            lambda,
        });
    }
    Ok((stack, trace))
}
