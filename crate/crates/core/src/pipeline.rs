//! Retrieve, refine, rerank: score every training motion against the image,
//! refine the `n` lowest-energy ones, and return the refined motion with the
//! lowest energy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::splitmix64;
use crate::dmo::MotionRefiner;
use crate::ebm::EnergyModel;
use crate::error::{Error, Result};
use crate::motion::{Camera, Trajectory};
use crate::optimizers::{gd_optimize, langevin_optimize, latent_langevin_optimize, MappedEnergy, OptimizerKind, OptimizerSpec};
use crate::scene::Image;
use crate::vae::Vae;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictionConfig {
    /// Candidates kept after retrieval.
    pub n: usize,
    /// Refinement rounds; 0 skips refinement. Gradient baselines run their
    /// own iteration budget once for any positive value.
    pub rounds: usize,
    pub optimizer: OptimizerSpec,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self { n: 8, rounds: 1, optimizer: OptimizerSpec::dmo() }
    }
}

impl PredictionConfig {
    pub fn validate(&self, n_motions: usize) -> Result<()> {
        if n_motions == 0 {
            return Err(Error::EmptyDataset);
        }
        if self.n == 0 || self.n > n_motions {
            return Err(Error::InvalidConfig(format!("n = {} must lie in 1..={n_motions}", self.n)));
        }
        if self.optimizer.kind != OptimizerKind::Dmo {
            self.optimizer.validate()?;
        }
        Ok(())
    }
}

/// The trained models a prediction may draw on.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub ebm: &'a EnergyModel<f32>,
    pub dmo: Option<&'a MotionRefiner<f32>>,
    pub vae: Option<&'a Vae<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Index of the source motion in the retrieval pool.
    pub id: usize,
    pub initial_energy: f32,
    pub final_energy: f32,
    pub trajectory: Trajectory<f32>,
    /// Set when a gradient optimizer hit a non-finite value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diverged_at: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub best: Trajectory<f32>,
    pub best_energy: f32,
    /// Position of the winner in `candidates`.
    pub best_index: usize,
    /// In retrieval order.
    pub candidates: Vec<Candidate>,
}

/// The `n` lowest energies as `(id, energy)`, ascending, ties by lower id.
pub fn top_n<T: PartialOrd + Copy>(energies: &[T], n: usize) -> Result<Vec<(usize, T)>> {
    if energies.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut idx: Vec<usize> = (0..energies.len()).collect();
    idx.sort_by(|&a, &b| {
        energies[a].partial_cmp(&energies[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    Ok(idx.into_iter().take(n.min(energies.len())).map(|i| (i, energies[i])).collect())
}

/// Lowest-energy position; ties go to the lower position.
pub fn argmin_energy(energies: &[f32]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &e) in energies.iter().enumerate() {
        match best {
            Some(b) if !(e < energies[b]) => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn retrieve_candidates(
    model: &EnergyModel<f32>,
    img: &Image,
    motions: &[Trajectory<f32>],
    n: usize,
    cam: &Camera,
) -> Result<Vec<(usize, f32)>> {
    let energies = model.energy_batch(img, motions, cam)?;
    top_n(&energies, n)
}

/// Per-candidate generator seed; independent of evaluation order.
fn candidate_seed(seed: u64, id: usize) -> u64 {
    splitmix64(splitmix64(seed) ^ id as u64)
}

pub fn predict(
    models: Models<'_>,
    img: &Image,
    motions: &[Trajectory<f32>],
    cfg: &PredictionConfig,
    cam: &Camera,
    seed: u64,
) -> Result<PredictionResult> {
    cfg.validate(motions.len())?;
    let ebm = models.ebm;
    let fmap = ebm.feature_map(img)?;
    let energies = ebm.energy_batch_with_map(&fmap, motions, cam)?;
    let picked = top_n(&energies, cfg.n)?;

    type Refined = (Trajectory<f32>, Option<usize>);
    let refined: Vec<Refined> = if cfg.rounds == 0 {
        picked.iter().map(|&(id, _)| (motions[id].clone(), None)).collect()
    } else {
        let spec = cfg.optimizer;
        match spec.kind {
            OptimizerKind::Dmo => {
                let dmo = models.dmo.ok_or_else(|| Error::InvalidConfig("the dmo optimizer needs a refiner checkpoint".into()))?;
                let dmap = dmo.feature_map(img)?;
                picked
                    .par_iter()
                    .map(|&(id, _)| {
                        let outs = dmo.refine_recurrent_with_map(&dmap, &motions[id], cfg.rounds, cam)?;
                        Ok((outs.into_iter().last().expect("rounds >= 1"), None))
                    })
                    .collect::<Result<_>>()?
            }
            kind => {
                let energy = MappedEnergy { model: ebm, fmap: &fmap, camera: *cam };
                if kind == OptimizerKind::LatentLangevin && models.vae.is_none() {
                    return Err(Error::InvalidConfig("latent langevin needs a vae checkpoint".into()));
                }
                picked
                    .par_iter()
                    .map(|&(id, _)| {
                        let mut rng = ChaCha8Rng::seed_from_u64(candidate_seed(seed, id));
                        let out = match kind {
                            OptimizerKind::Langevin => langevin_optimize(&energy, &motions[id], &spec, &mut rng)?,
                            OptimizerKind::Gd => gd_optimize(&energy, &motions[id], &spec)?,
                            _ => latent_langevin_optimize(&energy, models.vae.expect("checked"), &motions[id], &spec, &mut rng)?,
                        };
                        Ok((out.trajectory, out.diverged_at))
                    })
                    .collect::<Result<_>>()?
            }
        }
    };

    let finals: Vec<f32> = if cfg.rounds == 0 {
        picked.iter().map(|p| p.1).collect()
    } else {
        let trajs: Vec<Trajectory<f32>> = refined.iter().map(|r| r.0.clone()).collect();
        ebm.energy_batch_with_map(&fmap, &trajs, cam)?
    };
    let best_index = argmin_energy(&finals).expect("n >= 1");
    let candidates: Vec<Candidate> = picked
        .iter()
        .zip(refined)
        .zip(&finals)
        .map(|((&(id, e0), (trajectory, diverged_at)), &e1)| Candidate {
            id,
            initial_energy: e0,
            final_energy: e1,
            trajectory,
            diverged_at,
        })
        .collect();
    Ok(PredictionResult {
        best: candidates[best_index].trajectory.clone(),
        best_energy: finals[best_index],
        best_index,
        candidates,
    })
}
