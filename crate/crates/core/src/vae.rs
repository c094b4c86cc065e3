//! Sequence VAE over whole trajectories, used to synthesize nearby
//! motions.
//!
//! The encoder and decoder are MLPs over the flattened learnable channels
//! (`T + 1` poses times 10 values, positions re-centered and scaled). The
//! decoder restores timestamps `k / T` and clamps the gripper.

use ebmdmo_autograd::nn::Mlp;
use ebmdmo_autograd::{clip_grad_norm, Adam, Bound, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::motion::{Trajectory, ACTION_DIM};
use crate::{cast, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconReduction {
    /// Sum of squared errors over a trajectory's channels.
    Sum,
    /// Mean of squared errors over a trajectory's channels.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub latent: usize,
    pub hidden: usize,
    pub beta: f64,
    pub recon: ReconReduction,
    pub horizon: usize,
    pub pose_center: [f32; 3],
    pub pose_scale: f32,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent: 16,
            hidden: 256,
            beta: 1e-3,
            recon: ReconReduction::Sum,
            horizon: 15,
            pose_center: [0.0, 0.0, 0.8],
            pose_scale: 5.0,
            lr: 1e-3,
            steps: 3000,
            batch: 32,
            seed: 0,
            log_every: 100,
        }
    }
}

impl VaeConfig {
    fn input_dim(&self) -> usize {
        (self.horizon + 1) * ACTION_DIM
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.hidden == 0 || self.horizon == 0 || self.batch == 0 {
            return Err(Error::InvalidConfig("vae sizes must be positive".into()));
        }
        if !(self.beta >= 0.0) || !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("vae beta must be >= 0 and lr > 0".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDist<T = f32> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
}

impl<T: Scalar> LatentDist<T> {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `KL(N(mu, sigma) || N(0, I))`.
    pub fn kl(&self) -> f64 {
        self.mu
            .iter()
            .zip(&self.sigma)
            .map(|(&m, &s)| {
                let (m, s) = (m.to_f64().unwrap_or(f64::NAN), s.to_f64().unwrap_or(f64::NAN));
                0.5 * (m * m + s * s - 1.0 - (s * s).ln())
            })
            .sum()
    }
}

/// Reparameterized draw `mu + sigma * eps`.
pub fn sample<T: Scalar, R: Rng + ?Sized>(dist: &LatentDist<T>, rng: &mut R) -> Vec<T> {
    dist.mu
        .iter()
        .zip(&dist.sigma)
        .map(|(&m, &s)| {
            let e: f64 = rng.sample(StandardNormal);
            m + s * cast(e)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Vae<T: Scalar = f32> {
    pub config: VaeConfig,
    pub params: ParamStore<T>,
    enc: Mlp,
    dec: Mlp,
}

/// One logged training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VaeLogRow {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

impl<T: Scalar> Vae<T> {
    pub fn new(config: VaeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let n = config.input_dim();
        let (h, d) = (config.hidden, config.latent);
        let enc = Mlp::new(&mut params, "vae.enc", &[n, h, h, 2 * d], false, &mut rng);
        let dec = Mlp::new(&mut params, "vae.dec", &[d, h, h, n], false, &mut rng);
        Ok(Self { config, params, enc, dec })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent
    }

    /// Normalized learnable channels of one trajectory, `[1, (T+1) * 10]`.
    pub fn features(&self, traj: &Trajectory<T>) -> Result<Vec<T>> {
        let n = self.config.horizon + 1;
        if traj.len() != n {
            return Err(Error::ShapeMismatch(format!("trajectory has {} poses, vae expects {n}", traj.len())));
        }
        let scale: T = cast(self.config.pose_scale as f64);
        let mut out = Vec::with_capacity(n * ACTION_DIM);
        for p in traj.poses() {
            let f = p.flatten();
            for c in 0..3 {
                out.push((f[c] - cast(self.config.pose_center[c] as f64)) * scale);
            }
            out.extend_from_slice(&f[3..ACTION_DIM]);
        }
        Ok(out)
    }

    /// `(mu, half_log_var)`, each `[B, d]`.
    pub fn encode_tape(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> (Var, Var) {
        let h = self.enc.forward(tape, p, x);
        let d = self.config.latent;
        (tape.slice_cols(h, 0, d), tape.slice_cols(h, d, d))
    }

    /// Decoder output `[B, (T+1) * 10]` in the normalized feature space.
    pub fn decode_features(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Var {
        self.dec.forward(tape, p, z)
    }

    /// Decoder output `[B, (T+1) * 10]` in physical units (positions in
    /// meters), gripper unclamped.
    pub fn decode_raw(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Var {
        let y = self.decode_features(tape, p, z);
        let b = tape.shape(y)[0];
        let n = self.config.horizon + 1;
        let rows = tape.reshape(y, &[b * n, ACTION_DIM]);
        let pos = tape.slice_cols(rows, 0, 3);
        let pos = tape.scale(pos, cast(1.0 / self.config.pose_scale as f64));
        let center = tape.constant(Tensor::from_vec(&[3], self.config.pose_center.iter().map(|&c| cast(c as f64)).collect()));
        let pos = tape.add_bias(pos, center);
        let rest = tape.slice_cols(rows, 3, ACTION_DIM - 3);
        let rows = tape.concat_cols(&[pos, rest]);
        tape.reshape(rows, &[b, n * ACTION_DIM])
    }

    /// Decoded poses `[T+1, 11]` for a single latent `[1, d]`: gripper
    /// clamped, timestamps `k / T`.
    pub fn decode_tape(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Var {
        let n = self.config.horizon + 1;
        let raw = self.decode_raw(tape, p, z);
        let rows = tape.reshape(raw, &[n, ACTION_DIM]);
        let xr = tape.slice_cols(rows, 0, ACTION_DIM - 1);
        let s = tape.slice_cols(rows, ACTION_DIM - 1, 1);
        let s = tape.clamp(s, T::zero(), T::one());
        let ts = tape.constant(Tensor::from_vec(&[n, 1], (0..n).map(|k| cast(k as f64 / (n - 1) as f64)).collect()));
        tape.concat_cols(&[xr, s, ts])
    }

    pub fn encode(&self, traj: &Trajectory<T>) -> Result<LatentDist<T>> {
        let x = self.features(traj)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vae input".into()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(Tensor::from_vec(&[1, x.len()], x));
        let (mu, hlv) = self.encode_tape(&mut tape, &p, xv);
        let sigma = tape.value(hlv).data().iter().map(|v| v.exp()).collect();
        Ok(LatentDist { mu: tape.value(mu).data().to_vec(), sigma })
    }

    pub fn decode(&self, z: &[T]) -> Result<Trajectory<T>> {
        if z.len() != self.config.latent {
            return Err(Error::ShapeMismatch(format!("latent has {} values, expected {}", z.len(), self.config.latent)));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let zv = tape.constant(Tensor::from_vec(&[1, z.len()], z.to_vec()));
        let out = self.decode_tape(&mut tape, &p, zv);
        Ok(Trajectory::from_flat(tape.value(out).data()))
    }

    /// `decode(sample(encode(P)))`.
    pub fn perturb<R: Rng + ?Sized>(&self, traj: &Trajectory<T>, rng: &mut R) -> Result<Trajectory<T>> {
        let dist = self.encode(traj)?;
        self.decode(&sample(&dist, rng))
    }

    /// `decode(mu + scale * sigma * eps)`; `scale = 1` draws the same
    /// values as [`Vae::perturb`] for the same rng state.
    pub fn perturb_scaled<R: Rng + ?Sized>(&self, traj: &Trajectory<T>, scale: f64, rng: &mut R) -> Result<Trajectory<T>> {
        let mut dist = self.encode(traj)?;
        let k: T = cast(scale);
        dist.sigma.iter_mut().for_each(|s| *s = *s * k);
        self.decode(&sample(&dist, rng))
    }

    pub fn reconstruct(&self, traj: &Trajectory<T>) -> Result<Trajectory<T>> {
        self.decode(&self.encode(traj)?.mu)
    }

    /// Negative ELBO of a batch `[B, (T+1) * 10]` of normalized features
    /// with fixed noise `eps` `[B, d]`. Returns `(loss, recon, kl)`; the
    /// squared error is taken in the normalized space, every channel
    /// weighted equally.
    pub fn elbo(&self, tape: &mut Tape<T>, p: &Bound, x: &Tensor<T>, eps: &Tensor<T>) -> (Var, Var, Var) {
        let b = x.shape()[0];
        let xv = tape.constant(x.clone());
        let (mu, hlv) = self.encode_tape(tape, p, xv);
        let sigma = tape.exp(hlv);
        let ev = tape.constant(eps.clone());
        let noise = tape.mul(sigma, ev);
        let z = tape.add(mu, noise);
        let y = self.decode_features(tape, p, z);
        let diff = tape.sub(y, xv);
        let sq = tape.square(diff);
        let total = tape.sum(sq);
        let per = match self.config.recon {
            ReconReduction::Sum => 1.0 / b as f64,
            ReconReduction::Mean => 1.0 / (b * self.config.input_dim()) as f64,
        };
        let recon = tape.scale(total, cast(per));
        // 0.5 * sum(mu^2 + sigma^2 - 1 - 2 hlv), averaged over the batch.
        let mu2 = tape.square(mu);
        let s2 = tape.square(sigma);
        let two_h = tape.scale(hlv, cast(2.0));
        let a = tape.add(mu2, s2);
        let a = tape.sub(a, two_h);
        let a = tape.add_scalar(a, -T::one());
        let ksum = tape.sum(a);
        let kl = tape.scale(ksum, cast(0.5 / b as f64));
        let weighted = tape.scale(kl, cast(self.config.beta));
        let loss = tape.add(recon, weighted);
        (loss, recon, kl)
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({ "config": self.config, "latent": self.config.latent, "beta": self.config.beta })
    }
}

impl Vae<f32> {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(path, "vae", self.meta(), &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("vae")?;
        let config: VaeConfig = serde_json::from_value(ck.header.meta["config"].clone())?;
        let mut vae = Self::new(config)?;
        ck.fill(&mut vae.params)?;
        Ok(vae)
    }
}

/// Mean over trajectories of the VAE reconstruction position error.
pub fn reconstruction_error(vae: &Vae<f32>, motions: &[Trajectory<f32>]) -> Result<f64> {
    let mut total = 0.0;
    for m in motions {
        total += crate::motion::distance(m, &vae.reconstruct(m)?)? as f64;
    }
    Ok(total / motions.len().max(1) as f64)
}

/// Fits the VAE with Adam on random minibatches; `log` receives a row
/// every `log_every` steps and after the last.
pub fn train_vae(motions: &[Trajectory<f32>], config: VaeConfig, mut log: impl FnMut(&VaeLogRow)) -> Result<Vae<f32>> {
    if motions.len() < 2 {
        return Err(Error::InvalidConfig("vae training needs at least 2 motions".into()));
    }
    let mut vae = Vae::<f32>::new(config.clone())?;
    let feats: Vec<Vec<f32>> = motions.iter().map(|m| vae.features(m)).collect::<Result<_>>()?;
    let dim = config.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let mut adam = Adam::new(&vae.params, config.lr);
    for step in 0..config.steps {
        let b = config.batch.min(motions.len());
        let idx = rand::seq::index::sample(&mut rng, motions.len(), b);
        let mut x = Vec::with_capacity(b * dim);
        for i in idx.iter() {
            x.extend_from_slice(&feats[i]);
        }
        let x = Tensor::from_vec(&[b, dim], x);
        let eps = Tensor::from_vec(
            &[b, config.latent],
            (0..b * config.latent).map(|_| rng.sample::<f32, _>(StandardNormal)).collect(),
        );
        let mut tape = Tape::new();
        let p = vae.params.bind(&mut tape, true);
        let (loss, recon, kl) = vae.elbo(&mut tape, &p, &x, &eps);
        let l = tape.value(loss).item() as f64;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: l });
        }
        let grads = tape.backward(loss);
        let mut g = p.collect(&tape, &grads);
        clip_grad_norm(&mut g, 10.0);
        adam.step(&mut vae.params, &g);
        if (config.log_every > 0 && step % config.log_every == 0) || step + 1 == config.steps {
            log(&VaeLogRow {
                step,
                loss: l,
                recon: tape.value(recon).item() as f64,
                kl: tape.value(kl).item() as f64,
            });
        }
    }
    Ok(vae)
}
