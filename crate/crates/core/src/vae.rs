//! Variational and plain autoencoders between the 46-feature state space and
//! a 30-dimensional latent space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{StateVector, N_FEATURES};
use crate::error::{domain, Result};
use crate::learner::{
    fit, Activation, Checkpoint, Dense, FitHistory, Mlp, NodeId, OptimizerConfig, ParamStore, Tape, TrainSchedule, Trainable,
};

pub const LATENT_DIM: usize = 30;
pub const HIDDEN_DIMS: [usize; 2] = [40, 35];

pub type LatentState = Vec<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoencoderKind {
    /// Gaussian encoder sampled by reparameterization.
    Vae,
    /// Deterministic bottleneck.
    Ae,
}

impl AutoencoderKind {
    pub fn model_kind(self) -> &'static str {
        match self {
            AutoencoderKind::Vae => "vae",
            AutoencoderKind::Ae => "ae",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub kind: AutoencoderKind,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    /// Weight of the KL term (β); ignored by the plain autoencoder.
    pub kl_weight: f64,
    pub init_seed: u64,
}

impl AutoencoderConfig {
    pub fn vae() -> Self {
        Self {
            kind: AutoencoderKind::Vae,
            input_dim: N_FEATURES,
            hidden: HIDDEN_DIMS.to_vec(),
            latent_dim: LATENT_DIM,
            kl_weight: 0.0,
            init_seed: 0,
        }
    }

    pub fn ae() -> Self {
        Self { kind: AutoencoderKind::Ae, ..Self::vae() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub z: LatentState,
    pub mu: Vec<f64>,
    /// Zero for the plain autoencoder.
    pub sigma: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeLoss {
    pub total: f64,
    pub recon_mse: f64,
    pub kl: f64,
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    config: AutoencoderConfig,
    store: ParamStore,
    encoder: Mlp,
    head: Dense,
    decoder: Mlp,
}

/// Closed-form `KL(N(mu, diag(sigma^2)) || N(0, I))`.
pub fn gaussian_kl(mu: &[f64], sigma: &[f64]) -> f64 {
    0.5 * mu.iter().zip(sigma).map(|(m, s)| m * m + s * s - 1.0 - (s * s).ln()).sum::<f64>()
}

impl Autoencoder {
    pub fn new(config: AutoencoderConfig) -> Result<Self> {
        if config.input_dim == 0 || config.latent_dim == 0 || !(config.kl_weight >= 0.0) {
            return domain(format!("invalid autoencoder config {config:?}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let mut enc_dims = vec![config.input_dim];
        enc_dims.extend(&config.hidden);
        let encoder = Mlp::new(&mut store, "encoder", &enc_dims, Activation::ReLU, Activation::ReLU, &mut rng)?;
        let head_out = match config.kind {
            AutoencoderKind::Vae => 2 * config.latent_dim,
            AutoencoderKind::Ae => config.latent_dim,
        };
        let last_hidden = *enc_dims.last().expect("non-empty dims");
        let head = Dense::new(&mut store, "encoder.head", last_hidden, head_out, Activation::Linear, &mut rng)?;
        let mut dec_dims = vec![config.latent_dim];
        dec_dims.extend(config.hidden.iter().rev());
        dec_dims.push(config.input_dim);
        let decoder = Mlp::new(&mut store, "decoder", &dec_dims, Activation::ReLU, Activation::Linear, &mut rng)?;
        Ok(Self { config, store, encoder, head, decoder })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn kind(&self) -> AutoencoderKind {
        self.config.kind
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn decoder_output_layer(&self) -> &Dense {
        self.decoder.output_layer()
    }

    fn check_input(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.config.input_dim {
            return domain(format!("state has length {}, expected {}", s.len(), self.config.input_dim));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return domain("state contains non-finite values");
        }
        Ok(())
    }

    /// Records `(mu, log_sigma)`; `log_sigma` is `None` for the plain autoencoder.
    fn record_encoder(&self, store: &ParamStore, tape: &mut Tape, x: NodeId) -> Result<(NodeId, Option<NodeId>)> {
        let h = self.encoder.forward(tape, store, x)?;
        let out = self.head.forward(tape, store, h)?;
        let d = self.config.latent_dim;
        match self.config.kind {
            AutoencoderKind::Vae => Ok((tape.slice(out, 0, d)?, Some(tape.slice(out, d, d)?))),
            AutoencoderKind::Ae => Ok((out, None)),
        }
    }

    /// Records the loss for one state with explicit noise `eps`; returns
    /// `(total, recon_mse, kl)` nodes (`kl` absent for the plain autoencoder).
    pub fn record_loss_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        state: &[f64],
        eps: &[f64],
    ) -> Result<(NodeId, NodeId, Option<NodeId>)> {
        self.check_input(state)?;
        let x = tape.leaf(state.to_vec());
        let (mu, log_sigma) = self.record_encoder(store, tape, x)?;
        let (z, kl) = match log_sigma {
            Some(ls) => {
                let sigma = tape.exp(ls);
                let e = tape.leaf(eps.to_vec());
                let noise = tape.mul(sigma, e)?;
                let z = tape.add(mu, noise)?;
                (z, Some(tape.gaussian_kl(mu, ls)?))
            }
            None => (mu, None),
        };
        let recon = self.decoder.forward(tape, store, z)?;
        let mse = tape.mse(recon, state)?;
        let total = match kl {
            Some(kl) if self.config.kl_weight != 0.0 => {
                let weighted = tape.scale(kl, self.config.kl_weight);
                tape.add(mse, weighted)?
            }
            _ => mse,
        };
        Ok((total, mse, kl))
    }

    fn sample_eps<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.config.kind {
            AutoencoderKind::Vae => (0..self.config.latent_dim).map(|_| rng.sample(StandardNormal)).collect(),
            AutoencoderKind::Ae => Vec::new(),
        }
    }

    /// Encodes with the reparameterization `z = mu + sigma * eps`.
    pub fn encode_with_noise(&self, s: &[f64], eps: &[f64]) -> Result<Encoding> {
        self.check_input(s)?;
        let mut tape = Tape::new();
        let x = tape.leaf(s.to_vec());
        let (mu, ls) = self.record_encoder(&self.store, &mut tape, x)?;
        let mu = tape.value(mu).to_vec();
        match ls {
            Some(ls) => {
                if eps.len() != mu.len() {
                    return domain(format!("noise has length {}, expected {}", eps.len(), mu.len()));
                }
                let sigma: Vec<f64> = tape.value(ls).iter().map(|v| v.exp()).collect();
                let z = mu.iter().zip(&sigma).zip(eps).map(|((m, s), e)| m + s * e).collect();
                Ok(Encoding { z, mu, sigma })
            }
            None => Ok(Encoding { z: mu.clone(), sigma: vec![0.0; mu.len()], mu }),
        }
    }

    pub fn encode<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R) -> Result<Encoding> {
        let eps = self.sample_eps(rng);
        self.encode_with_noise(s, &eps)
    }

    /// Deterministic encoding: the posterior mean (or the bottleneck for the plain autoencoder).
    pub fn encode_mean(&self, s: &[f64]) -> Result<LatentState> {
        self.check_input(s)?;
        let mut tape = Tape::new();
        let x = tape.leaf(s.to_vec());
        let (mu, _) = self.record_encoder(&self.store, &mut tape, x)?;
        Ok(tape.value(mu).to_vec())
    }

    pub fn decode(&self, z: &[f64]) -> Result<StateVector> {
        if z.len() != self.config.latent_dim {
            return domain(format!("latent has length {}, expected {}", z.len(), self.config.latent_dim));
        }
        let out = self.decoder.apply(&self.store, z)?;
        if self.config.input_dim == N_FEATURES {
            StateVector::new(out)
        } else {
            domain("decode into a StateVector requires a 46-feature model; use decode_raw")
        }
    }

    /// Decoder output without the 46-feature check.
    pub fn decode_raw(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.decoder.apply(&self.store, z)
    }

    pub fn reconstruct(&self, s: &[f64]) -> Result<Vec<f64>> {
        let z = self.encode_mean(s)?;
        self.decode_raw(&z)
    }

    /// Batch loss with fresh reparameterization noise.
    pub fn vae_loss<R: Rng + ?Sized>(&self, batch: &[Vec<f64>], rng: &mut R) -> Result<VaeLoss> {
        if batch.is_empty() {
            return domain("empty batch");
        }
        let mut recon = 0.0;
        let mut kl = 0.0;
        let mut tape = Tape::new();
        for s in batch {
            tape.clear();
            let eps = self.sample_eps(rng);
            let (_, m, k) = self.record_loss_with(&self.store, &mut tape, s, &eps)?;
            recon += tape.scalar(m);
            kl += k.map(|k| tape.scalar(k)).unwrap_or(0.0);
        }
        let n = batch.len() as f64;
        let (recon_mse, kl) = (recon / n, kl / n);
        let beta = match self.config.kind {
            AutoencoderKind::Vae => self.config.kl_weight,
            AutoencoderKind::Ae => 0.0,
        };
        let total = if beta == 0.0 { recon_mse } else { recon_mse + beta * kl };
        Ok(VaeLoss { total, recon_mse, kl })
    }

    /// Mean squared reconstruction error of the deterministic encode/decode path.
    pub fn reconstruction_mse(&self, states: &[Vec<f64>]) -> Result<f64> {
        if states.is_empty() {
            return domain("no states to reconstruct");
        }
        let mut total = 0.0;
        for s in states {
            let r = self.reconstruct(s)?;
            total += r.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s.len() as f64;
        }
        Ok(total / states.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_store(self.config.kind.model_kind(), serde_json::to_value(&self.config)?, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(&["vae", "ae"])?;
        let config: AutoencoderConfig = ck.hyperparams()?;
        if config.kind.model_kind() != ck.model_kind {
            return domain("checkpoint model_kind disagrees with its hyperparameters");
        }
        let mut model = Self::new(config)?;
        ck.restore_into(&mut model.store)?;
        Ok(model)
    }
}

impl Trainable for Autoencoder {
    type Sample = Vec<f64>;

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn record_loss(&self, tape: &mut Tape, sample: &Vec<f64>, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        let eps = self.sample_eps(rng);
        Ok(self.record_loss_with(&self.store, tape, sample, &eps)?.0)
    }

    fn validation_metric(&self, samples: &[Vec<f64>]) -> Result<f64> {
        self.reconstruction_mse(samples)
    }
}

/// Trains an autoencoder on normalized states with early stopping on
/// held-out reconstruction MSE.
pub fn train_autoencoder(
    config: AutoencoderConfig,
    train: &[Vec<f64>],
    val: &[Vec<f64>],
    schedule: &TrainSchedule,
    optimizer: OptimizerConfig,
) -> Result<(Autoencoder, FitHistory)> {
    let mut model = Autoencoder::new(config)?;
    let history = fit(&mut model, train, val, schedule, optimizer)?;
    Ok((model, history))
}
