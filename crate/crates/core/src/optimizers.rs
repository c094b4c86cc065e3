//! Gradient-based motion optimizers: Langevin dynamics and plain gradient
//! descent in pose space, and Langevin dynamics in the VAE latent space.

use ebmdmo_autograd::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ebm::EnergyModel;
use crate::encoder::poses_tensor;
use crate::error::{Error, Result};
use crate::motion::{Camera, Trajectory, ACTION_DIM, POSE_DIM};
use crate::vae::Vae;
use crate::{cast, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Langevin,
    Gd,
    LatentLangevin,
    Dmo,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Langevin => "langevin",
            Self::Gd => "gd",
            Self::LatentLangevin => "latent-langevin",
            Self::Dmo => "dmo",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Langevin, Self::Gd, Self::LatentLangevin, Self::Dmo]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown optimizer {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub step_size: f64,
    pub iterations: usize,
    /// Multiplier on the `sqrt(2 * step_size)` Langevin noise.
    pub noise_scale: f64,
    /// Weight of the `|z|^2 / 2` latent prior.
    pub prior_weight: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self::dmo()
    }
}

impl OptimizerSpec {
    pub fn dmo() -> Self {
        Self { kind: OptimizerKind::Dmo, step_size: 1.0, iterations: 1, noise_scale: 0.0, prior_weight: 0.0 }
    }

    pub fn langevin() -> Self {
        Self { kind: OptimizerKind::Langevin, step_size: 1e-3, iterations: 100, noise_scale: 1.0, prior_weight: 0.0 }
    }

    pub fn gd() -> Self {
        Self { kind: OptimizerKind::Gd, noise_scale: 0.0, ..Self::langevin() }
    }

    /// Latent Langevin with the larger step.
    pub fn vaebm_l() -> Self {
        Self { kind: OptimizerKind::LatentLangevin, step_size: 1e-2, iterations: 100, noise_scale: 1.0, prior_weight: 1.0 }
    }

    /// Latent Langevin with the smaller step.
    pub fn vaebm_s() -> Self {
        Self { step_size: 1e-3, ..Self::vaebm_l() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || self.iterations == 0 {
            return Err(Error::InvalidConfig("step_size must be positive and iterations at least 1".into()));
        }
        if !(self.noise_scale >= 0.0) || !(self.prior_weight >= 0.0) {
            return Err(Error::InvalidConfig("noise_scale and prior_weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A differentiable energy over poses `[N, 11]`.
pub trait MotionEnergy<T: Scalar>: Sync {
    /// Scalar `[1]` energy recorded on `tape`.
    fn energy_on(&self, tape: &mut Tape<T>, poses: Var) -> Var;
}

/// The energy model with its feature map for one image fixed.
pub struct MappedEnergy<'a, T: Scalar> {
    pub model: &'a EnergyModel<T>,
    pub fmap: &'a Tensor<T>,
    pub camera: Camera,
}

impl<T: Scalar> MotionEnergy<T> for MappedEnergy<'_, T> {
    fn energy_on(&self, tape: &mut Tape<T>, poses: Var) -> Var {
        let p = self.model.params.bind(tape, false);
        let f = tape.constant(self.fmap.clone());
        self.model.energy_tape(tape, &p, f, poses, &self.camera)
    }
}

/// `|flatten(P) - c|^2`.
pub struct QuadraticEnergy<T> {
    pub center: Vec<T>,
}

impl<T: Scalar> MotionEnergy<T> for QuadraticEnergy<T> {
    fn energy_on(&self, tape: &mut Tape<T>, poses: Var) -> Var {
        let shape = tape.shape(poses).to_vec();
        let c = tape.constant(Tensor::from_vec(&shape, self.center.clone()));
        let d = tape.sub(poses, c);
        let sq = tape.square(d);
        tape.sum(sq)
    }
}

/// A flat energy `E = c`, whose gradient is zero everywhere.
pub struct ConstantEnergy<T>(pub T);

impl<T: Scalar> MotionEnergy<T> for ConstantEnergy<T> {
    fn energy_on(&self, tape: &mut Tape<T>, _poses: Var) -> Var {
        tape.constant(Tensor::scalar(self.0))
    }
}

/// Energy and its gradient over the flattened poses.
pub fn energy_grad<T: Scalar, E: MotionEnergy<T> + ?Sized>(energy: &E, traj: &Trajectory<T>) -> (T, Vec<T>) {
    let mut tape = Tape::new();
    let x = tape.input(poses_tensor(traj));
    let e = energy.energy_on(&mut tape, x);
    let v = tape.value(e).item();
    let mut g = tape.backward(e);
    let grad = g.take(x).map(Tensor::into_data).unwrap_or_else(|| vec![T::zero(); traj.len() * POSE_DIM]);
    (v, grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeOutcome<T: Scalar> {
    /// Final iterate, or the last finite one after divergence.
    pub trajectory: Trajectory<T>,
    /// Iteration at which a non-finite energy, gradient or iterate appeared.
    pub diverged_at: Option<usize>,
}

fn pose_space<T: Scalar, E: MotionEnergy<T> + ?Sized, R: Rng + ?Sized>(
    energy: &E,
    start: &Trajectory<T>,
    spec: &OptimizerSpec,
    noise: f64,
    rng: &mut R,
) -> Result<OptimizeOutcome<T>> {
    spec.validate()?;
    if !start.is_finite() {
        return Err(Error::NonFinite("optimizer start".into()));
    }
    let eta: T = cast(spec.step_size);
    let sigma: T = cast(noise * (2.0 * spec.step_size).sqrt());
    let mut cur = start.clone();
    for k in 0..spec.iterations {
        let (e, g) = energy_grad(energy, &cur);
        if !e.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Ok(OptimizeOutcome { trajectory: cur, diverged_at: Some(k) });
        }
        let mut flat = cur.flatten();
        for (i, v) in flat.iter_mut().enumerate() {
            let c = i % POSE_DIM;
            if c == ACTION_DIM {
                continue;
            }
            *v = *v - eta * g[i];
            if noise > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                *v = *v + sigma * cast(z);
            }
            if c == ACTION_DIM - 1 {
                *v = v.max(T::zero()).min(T::one());
            }
        }
        let next = Trajectory::from_flat(&flat);
        if !next.is_finite() {
            return Ok(OptimizeOutcome { trajectory: cur, diverged_at: Some(k) });
        }
        cur = next;
    }
    Ok(OptimizeOutcome { trajectory: cur, diverged_at: None })
}

/// `P <- P - eta * grad E + noise_scale * sqrt(2 eta) * eps` on the ten
/// non-timestamp channels, clamping the gripper each step.
pub fn langevin_optimize<T: Scalar, E: MotionEnergy<T> + ?Sized, R: Rng + ?Sized>(
    energy: &E,
    start: &Trajectory<T>,
    spec: &OptimizerSpec,
    rng: &mut R,
) -> Result<OptimizeOutcome<T>> {
    pose_space(energy, start, spec, spec.noise_scale, rng)
}

/// Noise-free descent; identical to Langevin with `noise_scale = 0`.
pub fn gd_optimize<T: Scalar, E: MotionEnergy<T> + ?Sized>(energy: &E, start: &Trajectory<T>, spec: &OptimizerSpec) -> Result<OptimizeOutcome<T>> {
    // No noise is drawn, so this generator is never advanced.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    pose_space(energy, start, spec, 0.0, &mut rng)
}

/// Langevin dynamics on `z` for `E(decode(z)) + prior_weight * |z|^2 / 2`,
/// starting from the posterior mean of `start`.
pub fn latent_langevin_optimize<T: Scalar, E: MotionEnergy<T> + ?Sized, R: Rng + ?Sized>(
    energy: &E,
    vae: &Vae<T>,
    start: &Trajectory<T>,
    spec: &OptimizerSpec,
    rng: &mut R,
) -> Result<OptimizeOutcome<T>> {
    spec.validate()?;
    let mut z = vae.encode(start)?.mu;
    let d = z.len();
    let eta: T = cast(spec.step_size);
    let sigma: T = cast(spec.noise_scale * (2.0 * spec.step_size).sqrt());
    let w: T = cast(0.5 * spec.prior_weight);
    let mut diverged_at = None;
    for k in 0..spec.iterations {
        let mut tape = Tape::new();
        let p = vae.params.bind(&mut tape, false);
        let zv = tape.input(Tensor::from_vec(&[1, d], z.clone()));
        let poses = vae.decode_tape(&mut tape, &p, zv);
        let e = energy.energy_on(&mut tape, poses);
        let sq = tape.square(zv);
        let prior = tape.sum(sq);
        let prior = tape.scale(prior, w);
        let total = tape.add(e, prior);
        let ok = tape.value(total).item().is_finite();
        let g = tape.backward(total).take(zv).map(Tensor::into_data).unwrap_or_else(|| vec![T::zero(); d]);
        if !ok || g.iter().any(|v| !v.is_finite()) {
            diverged_at = Some(k);
            break;
        }
        let next: Vec<T> = z
            .iter()
            .zip(&g)
            .map(|(&zi, &gi)| {
                let mut v = zi - eta * gi;
                if spec.noise_scale > 0.0 {
                    let n: f64 = rng.sample(StandardNormal);
                    v = v + sigma * cast(n);
                }
                v
            })
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            diverged_at = Some(k);
            break;
        }
        z = next;
    }
    Ok(OptimizeOutcome { trajectory: vae.decode(&z)?, diverged_at })
}
