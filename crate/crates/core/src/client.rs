//! Local smooth updating with the two regularizers, then learnGene condensation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::genecraft::{self, ElasticMask, GeneOrigin, LearnGene};
use crate::nn::{self, Batch, LayeredParams, LossParts, OptState, ParamMask, Regularizer};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_gen: f64,
    pub lambda_elg: f64,
    pub epsilon: f64,
    pub gamma: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Rank layers by reversed score, selecting the least-drifting layers last.
    pub invert_scores: bool,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lambda_gen: 0.5,
            lambda_elg: 0.05,
            epsilon: 0.5,
            gamma: 2,
            lr: 0.01,
            momentum: 0.9,
            invert_scores: false,
        }
    }
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lambda_gen >= 0.0 && self.lambda_elg >= 0.0) {
            return Err(Error::Config("regularizer weights must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config("epsilon must lie in [0, 1]".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("need lr > 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }

    /// Same settings with both regularizers switched off.
    pub fn plain(&self) -> Self {
        Self { lambda_gen: 0.0, lambda_elg: 0.0, ..self.clone() }
    }
}

/// One participant's mutable state between rounds.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: usize,
    pub cluster_id: usize,
    pub model: LayeredParams,
    /// Model at the start of the most recent local update.
    pub previous_model: LayeredParams,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub opt_state: OptState,
    pub is_agnostic: bool,
}

impl ClientState {
    pub fn new(
        client_id: usize,
        cluster_id: usize,
        model: LayeredParams,
        train: Vec<usize>,
        test: Vec<usize>,
        cfg: &LocalConfig,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::contract(format!("client {client_id} has no training samples")));
        }
        let opt_state = OptState::new(&model, cfg.lr as f32, cfg.momentum as f32)?;
        Ok(Self {
            client_id,
            cluster_id,
            previous_model: model.clone(),
            model,
            train,
            test,
            opt_state,
            is_agnostic: false,
        })
    }

    pub fn test_accuracy(&self, data: &Dataset) -> Result<f64> {
        if self.test.is_empty() {
            return Ok(0.0);
        }
        nn::accuracy(&self.model, &data.batch(&self.test))
    }
}

/// What one local update produced besides the new model.
#[derive(Clone, Debug, Serialize)]
pub struct LocalReport {
    /// Full-shard loss before training and after every epoch.
    pub epoch_losses: Vec<LossParts<f64>>,
    pub gamma: usize,
    pub gene_layers: Vec<String>,
    pub keep_local: usize,
}

/// Plain or regularized minibatch SGD over the client's training indices.
///
/// Each batch takes a step on `L_cls + λ₁·L_gen`, then (if `λ₂ > 0`) a step on
/// `λ₂·L_elg`; both share `opt`. Returns full-shard losses per epoch.
pub fn train_epochs(
    model: &mut LayeredParams,
    opt: &mut OptState,
    data: &Dataset,
    train: &[usize],
    cfg: &LocalConfig,
    anchor: Option<&LayeredParams>,
    elastic: Option<&ParamMask>,
    seed: u64,
) -> Result<Vec<LossParts<f64>>> {
    let reg = Regularizer {
        lambda_gen: if anchor.is_some() { cfg.lambda_gen as f32 } else { 0.0 },
        lambda_elg: if anchor.is_some() && elastic.is_some() { cfg.lambda_elg as f32 } else { 0.0 },
        anchor,
        elastic,
    };
    let step_a = Regularizer { lambda_elg: 0.0, ..reg };
    let full = data.batch::<f32>(train);
    let mut losses = vec![widen(nn::loss_and_grad(model, &full, &reg)?.0)];
    let mut r = rng::rng_from(seed);
    let mut order = train.to_vec();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Batch = data.batch(chunk);
            let (_, g) = nn::loss_and_grad(model, &batch, &step_a)?;
            nn::sgd_step(model, &g, opt)?;
            if reg.lambda_elg != 0.0 {
                let (_, g) = nn::elastic_grad(model, anchor.unwrap(), elastic.unwrap(), reg.lambda_elg)?;
                nn::sgd_step(model, &g, opt)?;
            }
        }
        losses.push(widen(nn::loss_and_grad(model, &full, &reg)?.0));
    }
    Ok(losses)
}

fn widen(p: LossParts<f32>) -> LossParts<f64> {
    LossParts { cls: p.cls.into(), gen: p.gen.into(), elg: p.elg.into(), total: p.total.into() }
}

/// Fisher-masked local training against the cluster model `cluster`, followed by
/// extraction of the top-γ learnGene. The client's own model is trained; `cluster`
/// is only the regularization reference.
pub fn local_update(
    mut state: ClientState,
    cluster: &LayeredParams,
    data: &Dataset,
    cfg: &LocalConfig,
    round: usize,
    seed: u64,
) -> Result<(ClientState, LearnGene, LocalReport)> {
    let ctx = |e: Error| e.in_client(state.client_id, round);
    state.model.ensure_congruent(cluster).map_err(ctx)?;
    state.previous_model = state.model.clone();
    state.opt_state = OptState::new(&state.model, cfg.lr as f32, cfg.momentum as f32).map_err(ctx)?;

    let fisher = genecraft::fisher_diag(&state.previous_model, &[data.batch(&state.train)]).map_err(ctx)?;
    let fhat = genecraft::normalize_fisher(&fisher).map_err(ctx)?;
    let ElasticMask { keep_local, .. } = genecraft::elastic_mask(&fhat, cfg.epsilon).map_err(ctx)?;

    let epoch_losses = train_epochs(
        &mut state.model,
        &mut state.opt_state,
        data,
        &state.train,
        cfg,
        Some(cluster),
        Some(&keep_local),
        seed,
    )
    .map_err(ctx)?;

    let mut scores = genecraft::layer_scores(&state.model, &state.previous_model).map_err(ctx)?;
    if cfg.invert_scores {
        scores = scores.inverted();
    }
    let origin = GeneOrigin { owner: state.client_id, round };
    let gene = genecraft::select_learngene(&state.model, &scores, cfg.gamma, origin).map_err(ctx)?;
    let report = LocalReport {
        epoch_losses,
        gamma: gene.gamma(),
        gene_layers: gene.layer_ids(),
        keep_local: keep_local.count(),
    };
    Ok((state, gene, report))
}

/// Unregularized local training, used by the baselines.
pub fn plain_update(mut state: ClientState, data: &Dataset, cfg: &LocalConfig, round: usize, seed: u64) -> Result<(ClientState, LocalReport)> {
    let ctx = |e: Error| e.in_client(state.client_id, round);
    state.previous_model = state.model.clone();
    state.opt_state = OptState::new(&state.model, cfg.lr as f32, cfg.momentum as f32).map_err(ctx)?;
    let epoch_losses =
        train_epochs(&mut state.model, &mut state.opt_state, data, &state.train, cfg, None, None, seed).map_err(ctx)?;
    let report = LocalReport { epoch_losses, gamma: 0, gene_layers: Vec::new(), keep_local: 0 };
    Ok((state, report))
}
