//! Autoencoder trained in tandem with a linear latent timestep operator.
//!
//! For a pair `(u_t, u_t1)` the encoder gives latents `v_t, v_t1`, the
//! decoder gives reconstructions, and the operator predicts `M v_t`. The
//! reconstruction loss is the MSE of the reconstructions; the operator loss is
//! `alpha * MSE(M v_t, v_t1)`. During the first `operator_delay_epochs` only
//! the reconstruction loss trains and `M` stays frozen at the identity. After
//! that the operator loss backpropagates into `M` and into the encoder
//! through both latent paths.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph_repr::Dataset;
use crate::neural::linalg::{matmul_nn, matmul_nt, matmul_tn};
use crate::neural::{
    mse, mse_grad, Activation, AdamConfig, AdamState, Checkpoint, ForwardCache, GradientBundle,
    Matrix, Mlp, NeuralError,
};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("checkpoint does not describe an operator autoencoder: {0}")]
    Checkpoint(String),
}

/// Which pair members the reconstruction loss covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    /// Mean of the `t` and `t + 1` reconstruction errors.
    #[default]
    Both,
    /// Only the `t` element.
    First,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// ReLU on the encoder's output layer.
    pub latent_relu: bool,
}

impl ModelSpec {
    pub fn new(input_dim: usize, latent_dim: usize) -> Self {
        Self {
            input_dim,
            latent_dim,
            hidden_dim: hidden_width(input_dim, latent_dim),
            latent_relu: true,
        }
    }
}

/// Mean of input and latent widths, halves rounded up.
pub fn hidden_width(input_dim: usize, latent_dim: usize) -> usize {
    (input_dim + latent_dim).div_ceil(2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorAEModel {
    pub spec: ModelSpec,
    pub encoder: Mlp,
    pub decoder: Mlp,
    /// `latent x latent`; acts on column latents, so row latents map to `v M^T`.
    pub operator: Matrix,
}

pub fn build_model(input_dim: usize, latent_dim: usize, seed: u64) -> OperatorAEModel {
    build_model_with(ModelSpec::new(input_dim, latent_dim), seed)
}

pub fn build_model_with(spec: ModelSpec, seed: u64) -> OperatorAEModel {
    assert!(spec.input_dim >= 1 && spec.latent_dim >= 1 && spec.hidden_dim >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent_act = if spec.latent_relu {
        Activation::Relu
    } else {
        Activation::Identity
    };
    let encoder = Mlp::random(
        &[spec.input_dim, spec.hidden_dim, spec.latent_dim],
        &[Activation::Relu, latent_act],
        &mut rng,
    )
    .expect("encoder widths chain");
    let decoder = Mlp::random(
        &[spec.latent_dim, spec.hidden_dim, spec.input_dim],
        &[Activation::Relu, Activation::Sigmoid],
        &mut rng,
    )
    .expect("decoder widths chain");
    OperatorAEModel {
        spec,
        encoder,
        decoder,
        operator: Matrix::identity(spec.latent_dim),
    }
}

impl OperatorAEModel {
    pub fn encode(&self, u: &Matrix) -> Result<Matrix, NeuralError> {
        self.encoder.infer(u)
    }

    pub fn decode(&self, v: &Matrix) -> Result<Matrix, NeuralError> {
        self.decoder.infer(v)
    }

    /// `M v` for every row latent.
    pub fn advance(&self, v: &Matrix) -> Result<Matrix, NeuralError> {
        if v.cols() != self.spec.latent_dim {
            return Err(NeuralError::Shape(format!(
                "latent width {} but operator is {}x{}",
                v.cols(),
                self.spec.latent_dim,
                self.spec.latent_dim
            )));
        }
        Ok(matmul_nt(v, &self.operator))
    }

    /// `decode(M^steps encode(u))`.
    pub fn predict_next(&self, u: &Matrix, steps: usize) -> Result<Matrix, NeuralError> {
        assert!(steps >= 1, "predict_next needs at least one step");
        let mut v = self.encode(u)?;
        for _ in 0..steps {
            v = self.advance(&v)?;
        }
        self.decode(&v)
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        Checkpoint {
            meta: serde_json::json!({ "spec": self.spec, "extra": extra }),
            networks: vec![
                ("encoder".into(), self.encoder.clone()),
                ("decoder".into(), self.decoder.clone()),
            ],
            matrices: vec![("operator".into(), self.operator.clone())],
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TrainError> {
        let bad = |m: &str| TrainError::Checkpoint(m.to_string());
        let spec: ModelSpec = serde_json::from_value(ck.meta["spec"].clone())
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let encoder = ck.network("encoder").ok_or_else(|| bad("no encoder"))?.clone();
        let decoder = ck.network("decoder").ok_or_else(|| bad("no decoder"))?.clone();
        let operator = ck.matrix("operator").ok_or_else(|| bad("no operator"))?.clone();
        if encoder.input_dim() != spec.input_dim
            || encoder.output_dim() != spec.latent_dim
            || decoder.input_dim() != spec.latent_dim
            || decoder.output_dim() != spec.input_dim
            || operator.shape() != (spec.latent_dim, spec.latent_dim)
        {
            return Err(bad("network shapes disagree with the spec"));
        }
        Ok(Self {
            spec,
            encoder,
            decoder,
            operator,
        })
    }
}

// ---------------------------------------------------------------------------
// Forward pass and losses

/// Everything produced by one forward pass over a batch of pairs.
#[derive(Debug, Clone)]
pub struct PairActivations {
    pub v_t: Matrix,
    pub v_t1: Matrix,
    pub u_hat_t: Matrix,
    pub u_hat_t1: Matrix,
    pub mv_t: Matrix,
    /// Encoder and decoder run once on `[t; t+1]` stacked row-wise.
    enc_cache: ForwardCache,
    dec_cache: ForwardCache,
    stacked_latent: Matrix,
}

pub fn forward_pair(
    model: &OperatorAEModel,
    u_t: &Matrix,
    u_t1: &Matrix,
) -> Result<PairActivations, NeuralError> {
    if u_t.shape() != u_t1.shape() {
        return Err(NeuralError::Shape(format!(
            "pair halves {:?} and {:?}",
            u_t.shape(),
            u_t1.shape()
        )));
    }
    let b = u_t.rows();
    let (latent, enc_cache) = model.encoder.forward(&u_t.vstack(u_t1))?;
    let (recon, dec_cache) = model.decoder.forward(&latent)?;
    let v_t = latent.slice_rows(0, b);
    let mv_t = model.advance(&v_t)?;
    Ok(PairActivations {
        v_t,
        v_t1: latent.slice_rows(b, 2 * b),
        u_hat_t: recon.slice_rows(0, b),
        u_hat_t1: recon.slice_rows(b, 2 * b),
        mv_t,
        enc_cache,
        dec_cache,
        stacked_latent: latent,
    })
}

pub fn loss_recon(
    u_hat_t: &Matrix,
    u_t: &Matrix,
    u_hat_t1: &Matrix,
    u_t1: &Matrix,
) -> Result<f64, NeuralError> {
    Ok(0.5 * (mse(u_hat_t, u_t)? + mse(u_hat_t1, u_t1)?))
}

pub fn loss_op(mv_t: &Matrix, v_t1: &Matrix, alpha: f64) -> Result<f64, NeuralError> {
    Ok(alpha * mse(mv_t, v_t1)?)
}

fn recon_loss_for(
    target: ReconTarget,
    acts: &PairActivations,
    u_t: &Matrix,
    u_t1: &Matrix,
) -> Result<f64, NeuralError> {
    match target {
        ReconTarget::Both => loss_recon(&acts.u_hat_t, u_t, &acts.u_hat_t1, u_t1),
        ReconTarget::First => mse(&acts.u_hat_t, u_t),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairGradients {
    pub encoder: GradientBundle,
    pub decoder: GradientBundle,
    /// Zero while the operator is inactive.
    pub operator: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLosses {
    pub recon: f64,
    /// `alpha * MSE(M v_t, v_t1)`, reported whether or not it is trained.
    pub operator: f64,
}

/// Losses and exact gradients of `L_AE (+ L_OP when operator_active)`.
pub fn pair_gradients(
    model: &OperatorAEModel,
    u_t: &Matrix,
    u_t1: &Matrix,
    alpha: f64,
    recon: ReconTarget,
    operator_active: bool,
) -> Result<(PairLosses, PairGradients), NeuralError> {
    let acts = forward_pair(model, u_t, u_t1)?;
    let b = u_t.rows();
    let losses = PairLosses {
        recon: recon_loss_for(recon, &acts, u_t, u_t1)?,
        operator: loss_op(&acts.mv_t, &acts.v_t1, alpha)?,
    };

    let d_recon = match recon {
        // 0.5 * (mse_t + mse_t1) has the same gradient as one mse over the stack.
        ReconTarget::Both => {
            let stacked_u = u_t.vstack(u_t1);
            mse_grad(acts.dec_cache.output(), &stacked_u, 1.0)?
        }
        ReconTarget::First => {
            let g = mse_grad(&acts.u_hat_t, u_t, 1.0)?;
            g.vstack(&Matrix::zeros(b, u_t.cols()))
        }
    };
    let decoder = model.decoder.backward(&acts.dec_cache, &d_recon)?;
    let mut d_latent = decoder.input.clone();

    let d = model.spec.latent_dim;
    let operator = if operator_active {
        let d_pred = mse_grad(&acts.mv_t, &acts.v_t1, alpha)?;
        let d_op = matmul_tn(&d_pred, &acts.v_t);
        let d_vt = matmul_nn(&d_pred, &model.operator);
        for r in 0..b {
            for (g, x) in d_latent.row_mut(r).iter_mut().zip(d_vt.row(r)) {
                *g += x;
            }
            for (g, x) in d_latent.row_mut(b + r).iter_mut().zip(d_pred.row(r)) {
                *g -= x;
            }
        }
        d_op
    } else {
        Matrix::zeros(d, d)
    };
    debug_assert_eq!(d_latent.shape(), acts.stacked_latent.shape());
    let encoder = model.encoder.backward(&acts.enc_cache, &d_latent)?;
    Ok((
        losses,
        PairGradients {
            encoder,
            decoder,
            operator,
        },
    ))
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub alpha: f64,
    pub operator_delay_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub rng_seed: u64,
    pub latent_dim: usize,
    #[serde(default)]
    pub recon_target: ReconTarget,
    #[serde(default = "default_true")]
    pub latent_relu: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            alpha: 20.0,
            operator_delay_epochs: 50,
            batch_size: 64,
            epochs: 1500,
            rng_seed: 0,
            latent_dim: 16,
            recon_target: ReconTarget::Both,
            latent_relu: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.latent_dim == 0 {
            return bad("batch_size, epochs and latent_dim must be positive");
        }
        if self.operator_delay_epochs >= self.epochs {
            return bad("operator delay must be shorter than the run");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn model_spec(&self, input_dim: usize) -> ModelSpec {
        ModelSpec {
            latent_relu: self.latent_relu,
            ..ModelSpec::new(input_dim, self.latent_dim)
        }
    }

    /// Seed used for weight initialization; batch order uses separate streams.
    pub fn init_seed(&self) -> u64 {
        self.rng_seed
    }
}

/// Epoch-mean losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub loss_ae: f64,
    pub loss_op: f64,
    pub alpha_scaled_ae: f64,
}

/// Pair matrices in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub u_t: Matrix,
    pub u_t1: Matrix,
}

impl TrainingData {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let t: Vec<&[f64]> = ds.pairs.iter().map(|p| p.u_t.as_slice()).collect();
        let t1: Vec<&[f64]> = ds.pairs.iter().map(|p| p.u_t1.as_slice()).collect();
        Self {
            u_t: Matrix::from_rows(&t),
            u_t1: Matrix::from_rows(&t1),
        }
    }

    pub fn len(&self) -> usize {
        self.u_t.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.u_t.rows() == 0
    }

    fn gather(src: &Matrix, rows: &[usize]) -> Matrix {
        let cols = src.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(src.row(r));
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn batch(&self, rows: &[usize]) -> (Matrix, Matrix) {
        (Self::gather(&self.u_t, rows), Self::gather(&self.u_t1, rows))
    }
}

/// Shuffled mini-batch index lists for one epoch. Depends only on the seed,
/// the epoch index and the dataset size.
pub fn epoch_batches(seed: u64, epoch: usize, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Adam states for the autoencoder and for the operator.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub autoencoder: AdamState,
    pub operator: AdamState,
}

impl Optimizers {
    pub fn new(model: &OperatorAEModel, cfg: AdamConfig) -> Self {
        let mut shapes: Vec<&[f64]> = model.encoder.params();
        shapes.extend(model.decoder.params());
        Self {
            autoencoder: AdamState::for_params(cfg, &shapes),
            operator: AdamState::for_params(cfg, &[model.operator.as_slice()]),
        }
    }
}

fn diverged(epoch: usize, batch: usize, detail: impl Into<String>) -> TrainError {
    TrainError::Diverged {
        epoch,
        batch,
        detail: detail.into(),
    }
}

/// One pass over the data: one Adam step per mini-batch.
pub fn train_epoch(
    model: &mut OperatorAEModel,
    data: &TrainingData,
    cfg: &TrainConfig,
    epoch: usize,
    opt: &mut Optimizers,
) -> Result<LossRecord, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let operator_active = epoch >= cfg.operator_delay_epochs;
    let batches = epoch_batches(cfg.rng_seed, epoch, data.len(), cfg.batch_size);
    let mut sum_ae = Vec::with_capacity(batches.len());
    let mut sum_op = Vec::with_capacity(batches.len());
    for (bi, rows) in batches.iter().enumerate() {
        let (u_t, u_t1) = data.batch(rows);
        let (losses, grads) =
            pair_gradients(model, &u_t, &u_t1, cfg.alpha, cfg.recon_target, operator_active)?;
        if !losses.recon.is_finite() || !losses.operator.is_finite() {
            return Err(diverged(
                epoch,
                bi,
                format!("loss_ae={} loss_op={}", losses.recon, losses.operator),
            ));
        }
        let mut g = grads.encoder.slices();
        g.extend(grads.decoder.slices());
        {
            let mut p = model.encoder.params_mut();
            p.extend(model.decoder.params_mut());
            opt.autoencoder
                .update(&mut p, &g)
                .map_err(|e| diverged(epoch, bi, e.to_string()))?;
        }
        if operator_active {
            opt.operator
                .update(&mut [model.operator.as_mut_slice()], &[grads.operator.as_slice()])
                .map_err(|e| diverged(epoch, bi, e.to_string()))?;
        }
        sum_ae.push(losses.recon);
        sum_op.push(losses.operator);
    }
    let n = batches.len() as f64;
    let loss_ae = sum_ae.iter().sum::<f64>() / n;
    let loss_op = sum_op.iter().sum::<f64>() / n;
    Ok(LossRecord {
        epoch,
        loss_ae,
        loss_op,
        alpha_scaled_ae: cfg.alpha * loss_ae,
    })
}

/// Owns the model and optimizer state across epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: OperatorAEModel,
    pub config: TrainConfig,
    pub optimizers: Optimizers,
    pub history: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(input_dim: usize, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let model = build_model_with(config.model_spec(input_dim), config.init_seed());
        let optimizers = Optimizers::new(&model, config.adam());
        Ok(Self {
            model,
            config,
            optimizers,
            history: Vec::new(),
        })
    }

    pub fn next_epoch(&self) -> usize {
        self.history.len()
    }

    pub fn step_epoch(&mut self, data: &TrainingData) -> Result<LossRecord, TrainError> {
        let epoch = self.next_epoch();
        let rec = train_epoch(&mut self.model, data, &self.config, epoch, &mut self.optimizers)?;
        self.history.push(rec);
        Ok(rec)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(
        &mut self,
        data: &TrainingData,
        mut on_epoch: impl FnMut(&LossRecord),
    ) -> Result<&[LossRecord], TrainError> {
        while self.next_epoch() < self.config.epochs {
            let rec = self.step_epoch(data)?;
            on_epoch(&rec);
        }
        Ok(&self.history)
    }
}
