//! Gradient-inversion probe: reconstruct one training input from the gradients a
//! client would reveal on the exchanged layers, and score it by PSNR.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{self, Batch, LayeredParams, MlpSpec, Regularizer};
use crate::rng;

/// What the attacker holds: the parameter vector it differentiates through, the
/// ids of the layers whose gradients it saw, those gradients, and the label.
#[derive(Clone, Debug)]
pub struct AttackObservation {
    pub params: LayeredParams<f64>,
    pub shared: Vec<String>,
    pub observed_grads: LayeredParams<f64>,
    pub true_label: usize,
}

impl AttackObservation {
    /// Gradients of the cross-entropy of `(x, y)` under `victim`, restricted to
    /// `shared`. `attacker_params` is what the attacker differentiates through;
    /// pass `victim` itself for the full-knowledge setting.
    pub fn observe(
        victim: &LayeredParams<f64>,
        attacker_params: LayeredParams<f64>,
        shared: &[String],
        x: &[f64],
        y: usize,
    ) -> Result<Self> {
        victim.ensure_congruent(&attacker_params)?;
        if shared.is_empty() {
            return Err(Error::contract("attack needs at least one shared layer"));
        }
        let full = single_grads(victim, x, y)?;
        let observed_grads = restrict(&full, shared)?;
        Ok(Self { params: attacker_params, shared: shared.to_vec(), observed_grads, true_label: y })
    }

    pub fn input_dim(&self) -> usize {
        self.params.layers()[0].tensor.shape()[0]
    }
}

/// The victim's parameters with every layer outside `shared` re-drawn from an
/// independent initialization, for an attacker that never saw those layers.
pub fn blind_unshared(victim: &LayeredParams<f64>, shared: &[String], seed: u64) -> Result<LayeredParams<f64>> {
    let arch = MlpSpec::infer(victim)?;
    let mut out = victim.clone();
    for (i, layer) in out.layers_mut().iter_mut().enumerate() {
        if !shared.contains(&layer.id) {
            layer.tensor = arch.init_unit(i, rng::derive_seed(seed, "attacker-init", 0));
        }
    }
    Ok(out)
}

fn single_grads(model: &LayeredParams<f64>, x: &[f64], y: usize) -> Result<LayeredParams<f64>> {
    let batch = Batch::new(Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap(), vec![y])?;
    Ok(nn::loss_and_grad(model, &batch, &Regularizer::none())?.1)
}

fn restrict(grads: &LayeredParams<f64>, shared: &[String]) -> Result<LayeredParams<f64>> {
    let mut layers = Vec::with_capacity(shared.len());
    for id in shared {
        let i = grads
            .index_of(id)
            .ok_or_else(|| Error::contract(format!("shared layer `{id}` is not in the model")))?;
        layers.push(grads.layers()[i].clone());
    }
    LayeredParams::new(layers)
}

/// `L_D(x̃) = Σ_shared ‖∇ L(x) − ∇ L(x̃)‖²`.
pub fn gradient_distance(obs: &AttackObservation, x: &[f64]) -> Result<f64> {
    let g = single_grads(&obs.params, x, obs.true_label)?;
    let mut s = 0.0;
    for target in obs.observed_grads.layers() {
        let mine = g.get(&target.id).unwrap();
        s += mine.iter().zip(target.tensor.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(s)
}

#[derive(Clone, Debug, Serialize)]
pub struct ReconState {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub loss: f64,
    /// `L_D` before each step.
    pub trace: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct AttackConfig {
    pub steps: usize,
    pub lr: f64,
    pub fd_step: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 0.1, fd_step: 1e-5 }
    }
}

/// iDLG-style reconstruction from a uniform random start in `[0, 1]`.
pub fn idlg_reconstruct(obs: &AttackObservation, cfg: &AttackConfig, seed: u64) -> Result<ReconState> {
    let mut r = rng::stream(seed, "idlg-init", 0);
    let x0: Vec<f64> = (0..obs.input_dim()).map(|_| r.random_range(0.0..1.0)).collect();
    reconstruct_from(obs, x0, cfg)
}

/// Adam on `L_D` with central-difference gradients; `x̃` is clamped to `[0, 1]`
/// after every step and the best iterate is returned.
pub fn reconstruct_from(obs: &AttackObservation, x0: Vec<f64>, cfg: &AttackConfig) -> Result<ReconState> {
    if cfg.steps == 0 {
        return Err(Error::contract("attack needs at least one step"));
    }
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let n = x0.len();
    let mut x = Array1::from(x0).mapv(|v| v.clamp(0.0, 1.0));
    let mut m = Array1::<f64>::zeros(n);
    let mut v = Array1::<f64>::zeros(n);
    let mut best = (f64::INFINITY, x.to_vec());
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut iterations = 0;
    for t in 1..=cfg.steps {
        let loss = gradient_distance(obs, x.as_slice().unwrap())?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("L_D at iteration {t}")));
        }
        trace.push(loss);
        if loss < best.0 {
            best = (loss, x.to_vec());
        }
        if loss == 0.0 {
            break;
        }
        let mut grad = Array1::<f64>::zeros(n);
        for j in 0..n {
            let keep = x[j];
            x[j] = keep + cfg.fd_step;
            let up = gradient_distance(obs, x.as_slice().unwrap())?;
            x[j] = keep - cfg.fd_step;
            let down = gradient_distance(obs, x.as_slice().unwrap())?;
            x[j] = keep;
            grad[j] = (up - down) / (2.0 * cfg.fd_step);
        }
        m = b1 * &m + (1.0 - b1) * &grad;
        v = b2 * &v + (1.0 - b2) * &grad.mapv(|g| g * g);
        let mhat = &m / (1.0 - b1.powi(t as i32));
        let vhat = &v / (1.0 - b2.powi(t as i32));
        x = (&x - &(cfg.lr * &mhat / &(vhat.mapv(f64::sqrt) + eps))).mapv(|v| v.clamp(0.0, 1.0));
        iterations = t;
    }
    let last = gradient_distance(obs, x.as_slice().unwrap())?;
    trace.push(last);
    if last < best.0 {
        best = (last, x.to_vec());
    }
    Ok(ReconState { x: best.1, iterations, loss: best.0, trace })
}

/// `10 · log10(1 / MSE)` for signals in `[0, 1]`, capped at 100 dB.
pub fn psnr(original: &[f64], recon: &[f64]) -> Result<f64> {
    if original.len() != recon.len() || original.is_empty() {
        return Err(Error::contract(format!("psnr of lengths {} and {}", original.len(), recon.len())));
    }
    let mse = original.iter().zip(recon).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / original.len() as f64;
    if mse == 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(100.0))
}
