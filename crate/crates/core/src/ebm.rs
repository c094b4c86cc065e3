//! Energy model `E(I, P)`: lower energy means the motion is more
//! consistent with the image. The head is an MLP on the mean output token.

use std::path::Path;

use ebmdmo_autograd::nn::Mlp;
use ebmdmo_autograd::{clip_grad_norm, cosine_lr, sum_grads, Adam, Bound, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::dataset::Episode;
use crate::encoder::{poses_tensor, Encoder, EncoderConfig, MacCount};
use crate::error::{Error, Result};
use crate::motion::{Camera, Trajectory};
use crate::scene::Image;
use crate::vae::Vae;
use crate::{cast, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EbmModelConfig {
    pub encoder: EncoderConfig,
    pub head_hidden: usize,
    pub seed: u64,
}

impl Default for EbmModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), head_hidden: 64, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct EnergyModel<T: Scalar = f32> {
    pub config: EbmModelConfig,
    pub encoder: Encoder,
    head: Mlp,
    pub params: ParamStore<T>,
}

impl<T: Scalar> EnergyModel<T> {
    pub fn new(config: EbmModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, "ebm.enc", config.encoder.clone(), &mut rng)?;
        let d = config.encoder.d_model;
        let head = Mlp::new(&mut params, "ebm.head", &[d, config.head_hidden, 1], false, &mut rng);
        Ok(Self { config, encoder, head, params })
    }

    /// Sets the last head layer to zero weights and bias `b`, making the
    /// energy the constant `b`.
    pub fn set_constant_head(&mut self, b: T) {
        let last = self.head.layers.last().expect("head has layers");
        self.params.get_mut(last.w).data_mut().iter_mut().for_each(|v| *v = T::zero());
        self.params.get_mut(last.b).data_mut()[0] = b;
    }

    /// `F` for one image, computed without gradients.
    pub fn feature_map(&self, img: &Image) -> Result<Tensor<T>> {
        let x = self.encoder.image_tensor::<T>(img)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x);
        let f = self.encoder.image_features(&mut tape, &p, xv);
        Ok(tape.value(f).clone())
    }

    /// Scalar energy `[1]` of poses `[N, 11]` against `F` on the tape.
    pub fn energy_tape(&self, tape: &mut Tape<T>, p: &Bound, fmap: Var, poses: Var, cam: &Camera) -> Var {
        let v = self.encoder.encode(tape, p, fmap, poses, cam);
        let m = tape.mean_rows(v);
        let e = self.head.forward(tape, p, m);
        tape.reshape(e, &[1])
    }

    fn check_motion(&self, traj: &Trajectory<T>) -> Result<()> {
        if traj.is_empty() {
            return Err(Error::ShapeMismatch("empty trajectory".into()));
        }
        if !traj.is_finite() {
            return Err(Error::NonFinite("motion".into()));
        }
        Ok(())
    }

    /// Energy of one motion against a precomputed `F`.
    pub fn energy_with_map(&self, fmap: &Tensor<T>, traj: &Trajectory<T>, cam: &Camera) -> Result<T> {
        self.check_motion(traj)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let f = tape.constant(fmap.clone());
        let x = tape.constant(poses_tensor(traj));
        let e = self.energy_tape(&mut tape, &p, f, x, cam);
        let v = tape.value(e).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("energy".into()));
        }
        Ok(v)
    }

    pub fn energy(&self, img: &Image, traj: &Trajectory<T>, cam: &Camera) -> Result<T> {
        let f = self.feature_map(img)?;
        self.energy_with_map(&f, traj, cam)
    }

    /// Energies of many motions sharing one `F`; output order follows input.
    pub fn energy_batch(&self, img: &Image, motions: &[Trajectory<T>], cam: &Camera) -> Result<Vec<T>> {
        if motions.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let f = self.feature_map(img)?;
        self.energy_batch_with_map(&f, motions, cam)
    }

    pub fn energy_batch_with_map(&self, fmap: &Tensor<T>, motions: &[Trajectory<T>], cam: &Camera) -> Result<Vec<T>> {
        motions.par_iter().map(|m| self.energy_with_map(fmap, m, cam)).collect()
    }

    /// Energy and its gradient with respect to the flattened poses.
    pub fn energy_grad(&self, fmap: &Tensor<T>, traj: &Trajectory<T>, cam: &Camera) -> Result<(T, Vec<T>)> {
        self.check_motion(traj)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let f = tape.constant(fmap.clone());
        let x = tape.input(poses_tensor(traj));
        let e = self.energy_tape(&mut tape, &p, f, x, cam);
        let v = tape.value(e).item();
        let mut g = tape.backward(e);
        let grad = g.take(x).map(Tensor::into_data).unwrap_or_else(|| vec![T::zero(); traj.len() * 11]);
        Ok((v, grad))
    }

    pub fn macs(&self, n_poses: usize) -> MacCount {
        let mut m = self.encoder.macs(n_poses);
        m.per_candidate += self.head.macs(1) + (self.config.encoder.tokens(n_poses) * self.config.encoder.d_model) as u64;
        m
    }
}

impl EnergyModel<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "config": self.config, "variant": self.config.encoder.variant });
        checkpoint::save(path, "ebm", meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("ebm")?;
        let config: EbmModelConfig = serde_json::from_value(ck.header.meta["config"].clone())?;
        let mut m = Self::new(config)?;
        ck.fill(&mut m.params)?;
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// `-log softmax(-E)` of the positive within its group.
    SoftmaxContrastive,
    /// `E_pos - mean(E_neg) + lambda * (E_pos^2 + mean(E_neg^2))`.
    RawEnergy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EbmTrainConfig {
    pub k_data: usize,
    pub k_vae: usize,
    pub include_self_vae_negative: bool,
    pub loss_mode: LossMode,
    /// Energy regularization weight for [`LossMode::RawEnergy`].
    pub lambda: f64,
    pub lr: f64,
    /// Cosine decay target as a fraction of `lr`; 1 keeps the rate constant.
    pub lr_final_frac: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub log_every: usize,
}

impl Default for EbmTrainConfig {
    fn default() -> Self {
        Self {
            k_data: 4,
            k_vae: 4,
            include_self_vae_negative: false,
            loss_mode: LossMode::SoftmaxContrastive,
            lambda: 1e-3,
            lr: 1e-3,
            lr_final_frac: 0.05,
            steps: 600,
            batch: 8,
            seed: 0,
            grad_clip: 5.0,
            log_every: 50,
        }
    }
}

impl EbmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_data + self.k_vae == 0 {
            return Err(Error::InvalidConfig("at least one negative per positive is required".into()));
        }
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("batch and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Group loss for energies `[1 + K]`, positive first.
pub fn contrastive_loss<T: Scalar>(tape: &mut Tape<T>, energies: Var, mode: LossMode, lambda: f64) -> Var {
    let n = tape.shape(energies)[0];
    match mode {
        LossMode::SoftmaxContrastive => {
            let pos = tape.index(energies, 0);
            let neg = tape.scale(energies, -T::one());
            let lse = tape.logsumexp(neg);
            tape.add(pos, lse)
        }
        LossMode::RawEnergy => {
            let pos = tape.index(energies, 0);
            let e2 = tape.reshape(energies, &[1, n]);
            let negs = tape.slice_cols(e2, 1, n - 1);
            let neg_mean = tape.mean(negs);
            let sq = tape.square(negs);
            let neg_sq = tape.mean(sq);
            let pos_sq = tape.square(pos);
            let reg = tape.add(pos_sq, neg_sq);
            let reg = tape.scale(reg, cast(lambda));
            let d = tape.sub(pos, neg_mean);
            tape.add(d, reg)
        }
    }
}

/// Negatives chosen for one positive.
#[derive(Clone, Debug)]
struct Group<T: Scalar> {
    image: Tensor<T>,
    motions: Vec<Trajectory<T>>,
    camera: Camera,
}

fn draw_groups<R: Rng>(
    model: &EnergyModel<f32>,
    episodes: &[Episode],
    batch: &[usize],
    vae: Option<&Vae<f32>>,
    cfg: &EbmTrainConfig,
    rng: &mut R,
) -> Result<Vec<Group<f32>>> {
    let n = episodes.len();
    let mut groups = Vec::with_capacity(batch.len());
    for &i in batch {
        let others = |rng: &mut R, k: usize, allow_self: bool| -> Vec<usize> {
            let pool: Vec<usize> = (0..n).filter(|&j| allow_self || j != i).collect();
            let k = k.min(pool.len());
            rand::seq::index::sample(rng, pool.len(), k).into_iter().map(|t| pool[t]).collect()
        };
        let mut motions = vec![episodes[i].expert.clone()];
        for j in others(rng, cfg.k_data, false) {
            motions.push(episodes[j].expert.clone());
        }
        if cfg.k_vae > 0 {
            let vae = vae.ok_or_else(|| Error::InvalidConfig("k_vae > 0 needs a trained vae".into()))?;
            for j in others(rng, cfg.k_vae, cfg.include_self_vae_negative) {
                motions.push(vae.perturb(&episodes[j].expert, rng)?);
            }
        }
        groups.push(Group {
            image: model.encoder.image_tensor(&episodes[i].image)?,
            motions,
            camera: episodes[i].camera,
        });
    }
    Ok(groups)
}

/// Loss and gradients of one positive's group.
fn group_loss<T: Scalar>(model: &EnergyModel<T>, g: &Group<T>, cfg: &EbmTrainConfig) -> (f64, Vec<Tensor<T>>) {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true);
    let img = tape.constant(g.image.clone());
    let f = model.encoder.image_features(&mut tape, &p, img);
    let es: Vec<Var> = g
        .motions
        .iter()
        .map(|m| {
            let x = tape.constant(poses_tensor(m));
            model.energy_tape(&mut tape, &p, f, x, &g.camera)
        })
        .collect();
    let energies = tape.concat(&es);
    let loss = contrastive_loss(&mut tape, energies, cfg.loss_mode, cfg.lambda);
    let l = tape.value(loss).item().to_f64().unwrap_or(f64::NAN);
    let grads = tape.backward(loss);
    (l, p.collect(&tape, &grads))
}

/// Contrastive loss and parameter gradients for one image; `motions[0]` is
/// the positive, the rest are negatives.
pub fn group_loss_and_grads<T: Scalar>(
    model: &EnergyModel<T>,
    img: &Image,
    motions: &[Trajectory<T>],
    cam: &Camera,
    cfg: &EbmTrainConfig,
) -> Result<(f64, Vec<Tensor<T>>)> {
    if motions.len() < 2 {
        return Err(Error::InvalidConfig("a group needs a positive and at least one negative".into()));
    }
    let g = Group { image: model.encoder.image_tensor(img)?, motions: motions.to_vec(), camera: *cam };
    Ok(group_loss(model, &g, cfg))
}

/// Mean loss and summed-then-averaged gradients over groups, reduced in
/// index order.
fn batch_gradients<T: Scalar>(model: &EnergyModel<T>, groups: &[Group<T>], cfg: &EbmTrainConfig) -> (f64, Vec<Tensor<T>>) {
    let parts: Vec<(f64, Vec<Tensor<T>>)> = groups.par_iter().map(|g| group_loss(model, g, cfg)).collect();
    let b = groups.len() as f64;
    let loss = parts.iter().map(|p| p.0).sum::<f64>() / b;
    let mut grads = sum_grads(parts.into_iter().map(|p| p.1)).expect("non-empty batch");
    let inv: T = cast(1.0 / b);
    grads.iter_mut().for_each(|g| g.scale_assign(inv));
    (loss, grads)
}

/// One Adam update on a batch of positives; returns the mean loss.
pub fn ebm_training_step<R: Rng>(
    model: &mut EnergyModel<f32>,
    adam: &mut Adam<f32>,
    episodes: &[Episode],
    batch: &[usize],
    vae: Option<&Vae<f32>>,
    cfg: &EbmTrainConfig,
    step: usize,
    rng: &mut R,
) -> Result<f64> {
    if cfg.k_data > 0 && episodes.len() < 2 {
        return Err(Error::InvalidConfig("mismatched negatives need at least 2 episodes".into()));
    }
    let groups = draw_groups(model, episodes, batch, vae, cfg, rng)?;
    let (loss, mut grads) = batch_gradients(model, &groups, cfg);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step, loss });
    }
    if cfg.grad_clip > 0.0 {
        clip_grad_norm(&mut grads, cfg.grad_clip);
    }
    adam.step(&mut model.params, &grads);
    Ok(loss)
}

/// Held-out ranking: for each episode, the fraction of sampled other
/// motions whose energy exceeds the matched motion's.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankReport {
    /// Fraction of episodes whose matched motion beats at least
    /// `threshold` of the sampled motions.
    pub pass_rate: f64,
    pub mean_beaten: f64,
    pub threshold: f64,
    pub per_episode: Vec<f64>,
}

pub fn rank_metric(
    model: &EnergyModel<f32>,
    episodes: &[Episode],
    pool: &[Trajectory<f32>],
    n_mismatched: usize,
    threshold: f64,
    seed: u64,
) -> Result<RankReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_episode = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let k = n_mismatched.min(pool.len());
        let idx = rand::seq::index::sample(&mut rng, pool.len(), k);
        let mut motions = vec![ep.expert.clone()];
        motions.extend(idx.iter().map(|j| pool[j].clone()));
        let e = model.energy_batch(&ep.image, &motions, &ep.camera)?;
        let beaten = e[1..].iter().filter(|&&x| x > e[0]).count();
        per_episode.push(beaten as f64 / k.max(1) as f64);
    }
    let n = per_episode.len().max(1) as f64;
    Ok(RankReport {
        pass_rate: per_episode.iter().filter(|&&b| b >= threshold).count() as f64 / n,
        mean_beaten: per_episode.iter().sum::<f64>() / n,
        threshold,
        per_episode,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EbmLogRow {
    pub step: usize,
    pub loss: f64,
    /// Held-out pass rate, when an evaluation split was supplied.
    pub rank: Option<f64>,
}

/// Held-out episodes and training motions for periodic rank logging.
pub struct RankProbe<'a> {
    pub episodes: &'a [Episode],
    pub pool: &'a [Trajectory<f32>],
}

pub fn train_ebm(
    episodes: &[Episode],
    vae: Option<&Vae<f32>>,
    model_cfg: EbmModelConfig,
    cfg: &EbmTrainConfig,
    probe: Option<RankProbe<'_>>,
    mut log: impl FnMut(&EbmLogRow),
) -> Result<EnergyModel<f32>> {
    cfg.validate()?;
    if episodes.len() < 2 {
        return Err(Error::InvalidConfig("ebm training needs at least 2 episodes".into()));
    }
    let mut model = EnergyModel::<f32>::new(model_cfg)?;
    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xeb_0001);
    for step in 0..cfg.steps {
        let b = cfg.batch.min(episodes.len());
        let batch: Vec<usize> = rand::seq::index::sample(&mut rng, episodes.len(), b).into_vec();
        adam.lr = cosine_lr(cfg.lr, cfg.lr_final_frac, step, cfg.steps);
        let loss = ebm_training_step(&mut model, &mut adam, episodes, &batch, vae, cfg, step, &mut rng)?;
        let last = step + 1 == cfg.steps;
        if (cfg.log_every > 0 && step % cfg.log_every == 0) || last {
            let rank = match &probe {
                Some(p) if last || step % (cfg.log_every * 4).max(1) == 0 => {
                    Some(rank_metric(&model, p.episodes, p.pool, 100, 0.95, cfg.seed)?.pass_rate)
                }
                _ => None,
            };
            log(&EbmLogRow { step, loss, rank });
        }
    }
    Ok(model)
}
