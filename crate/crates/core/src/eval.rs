//! Success-rate evaluation over test scenes, n/R sweeps, encoder ablations
//! and analytic cost accounting.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::dataset::{splitmix64, Dataset, Episode, Manifest};
use crate::dmo::{train_dmo, DmoModelConfig, DmoTrainConfig, MotionRefiner};
use crate::ebm::{train_ebm, EbmModelConfig, EbmTrainConfig, EnergyModel};
use crate::encoder::EncoderVariant;
use crate::error::{Error, Result};
use crate::motion::Trajectory;
use crate::pipeline::{predict, Models, PredictionConfig};
use crate::scene::{check_success, FailureReason, Geometry, TaskId};
use crate::vae::Vae;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub task: TaskId,
    pub n: usize,
    pub rounds: usize,
    pub optimizer: String,
    pub episodes: usize,
    pub successes: usize,
    /// `successes / episodes`.
    pub success_rate: f64,
    /// Mean energy of the returned motions, when a model scored them.
    pub mean_final_energy: Option<f64>,
    pub failures: BTreeMap<String, usize>,
    /// Reported only; never feeds into any other field.
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub seed: u64,
    pub checkpoint_hashes: BTreeMap<String, String>,
    pub manifest_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub metadata: EvalMeta,
}

impl EvalReport {
    /// Metrics only, one line per row: the timing column is left out so
    /// reruns compare byte-for-byte.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("label,task,n,rounds,optimizer,episodes,successes,success_rate,mean_final_energy\n");
        for r in &self.rows {
            let e = r.mean_final_energy.map(|v| format!("{v:.9e}")).unwrap_or_default();
            s += &format!(
                "{},{},{},{},{},{},{},{:.6},{}\n",
                r.label,
                r.task.name(),
                r.n,
                r.rounds,
                r.optimizer,
                r.episodes,
                r.successes,
                r.success_rate,
                e
            );
        }
        s
    }

    pub fn row(&self, label: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

pub fn manifest_hash(m: &Manifest) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(m)?))
}

fn failure_name(f: FailureReason) -> &'static str {
    match f {
        FailureReason::None => "none",
        FailureReason::MissedTarget => "missed-target",
        FailureReason::WrongGripperState => "wrong-gripper-state",
        FailureReason::OutOfBounds => "out-of-bounds",
        FailureReason::DroppedEarly => "dropped-early",
    }
}

/// Row metadata for [`evaluate_with`].
#[derive(Clone, Debug)]
pub struct RowSpec {
    pub label: String,
    pub task: TaskId,
    pub n: usize,
    pub rounds: usize,
    pub optimizer: String,
}

/// Scores any per-episode predictor with the success oracle. The predictor
/// returns a motion and optionally its energy.
pub fn evaluate_with(
    episodes: &[Episode],
    geom: &Geometry,
    spec: RowSpec,
    mut predictor: impl FnMut(usize, &Episode) -> Result<(Trajectory<f32>, Option<f32>)>,
) -> Result<EvalRow> {
    if episodes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let t0 = Instant::now();
    let mut successes = 0;
    let mut failures = BTreeMap::new();
    let mut energy_sum = 0.0;
    let mut energies = 0usize;
    for (i, ep) in episodes.iter().enumerate() {
        let (traj, e) = predictor(i, ep)?;
        let rep = check_success(&ep.scene, &traj, geom);
        if rep.success {
            successes += 1;
        } else {
            *failures.entry(failure_name(rep.failure_reason).to_string()).or_insert(0) += 1;
        }
        if let Some(e) = e {
            energy_sum += e as f64;
            energies += 1;
        }
    }
    Ok(EvalRow {
        label: spec.label,
        task: spec.task,
        n: spec.n,
        rounds: spec.rounds,
        optimizer: spec.optimizer,
        episodes: episodes.len(),
        successes,
        success_rate: successes as f64 / episodes.len() as f64,
        mean_final_energy: (energies > 0).then(|| energy_sum / energies as f64),
        failures,
        wall_time_s: t0.elapsed().as_secs_f64(),
    })
}

/// Seed for episode `i`'s prediction; independent of the other episodes.
pub fn episode_prediction_seed(seed: u64, i: usize) -> u64 {
    splitmix64(seed ^ splitmix64(i as u64))
}

/// Full pipeline on every test episode, retrieving from the training
/// motions.
pub fn evaluate(models: Models<'_>, ds: &Dataset, cfg: &PredictionConfig, seed: u64, label: &str) -> Result<EvalRow> {
    let pool = ds.train_motions();
    let spec = RowSpec {
        label: label.to_string(),
        task: ds.manifest.task,
        n: cfg.n,
        rounds: cfg.rounds,
        optimizer: cfg.optimizer.kind.name().to_string(),
    };
    evaluate_with(&ds.test, ds.geometry(), spec, |i, ep| {
        let r = predict(models, &ep.image, &pool, cfg, &ep.camera, episode_prediction_seed(seed, i))?;
        Ok((r.best, Some(r.best_energy)))
    })
}

/// One row per `(n, R)` pair, labelled `n{n}-r{R}`.
pub fn sweep(
    models: Models<'_>,
    ds: &Dataset,
    base: &PredictionConfig,
    n_values: &[usize],
    r_values: &[usize],
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::with_capacity(n_values.len() * r_values.len());
    for &n in n_values {
        for &rounds in r_values {
            let cfg = PredictionConfig { n, rounds, ..*base };
            rows.push(evaluate(models, ds, &cfg, seed, &format!("n{n}-r{rounds}"))?);
        }
    }
    Ok(rows)
}

/// Training recipe shared by every variant of an ablation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRecipe {
    pub ebm_model: EbmModelConfig,
    pub ebm: EbmTrainConfig,
    pub dmo_model: DmoModelConfig,
    pub dmo: DmoTrainConfig,
}

/// Trains an energy model and refiner per encoder variant under one recipe
/// and evaluates each; rows are labelled by variant name.
pub fn ablate_encoders(
    ds: &Dataset,
    vae: &Vae<f32>,
    variants: &[EncoderVariant],
    recipe: &TrainRecipe,
    cfg: &PredictionConfig,
    seed: u64,
    mut on_trained: impl FnMut(EncoderVariant, &EnergyModel<f32>, &MotionRefiner<f32>) -> Result<()>,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for &v in variants {
        let mut em = recipe.ebm_model.clone();
        em.encoder.variant = v;
        let ebm = train_ebm(&ds.train, Some(vae), em, &recipe.ebm, None, |_| {})?;
        let mut dm = recipe.dmo_model.clone();
        dm.encoder.variant = v;
        let dmo = train_dmo(&ds.train, vae, dm, &recipe.dmo, |_| {})?;
        on_trained(v, &ebm, &dmo)?;
        let models = Models { ebm: &ebm, dmo: Some(&dmo), vae: Some(vae) };
        rows.push(evaluate(models, ds, cfg, seed, v.name())?);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub model: String,
    pub variant: String,
    pub parameters: usize,
    /// Image-side work done once per image.
    pub shared_macs: u64,
    /// Work per scored or refined candidate once `F` is reused.
    pub per_candidate_macs: u64,
    pub candidates: usize,
    /// `shared + per_candidate * candidates`.
    pub total_macs: u64,
    /// Cost when `F` is recomputed for every candidate.
    pub total_without_reuse: u64,
}

fn cost_row(model: &str, variant: EncoderVariant, parameters: usize, shared: u64, per: u64, candidates: usize) -> CostRow {
    let c = candidates as u64;
    CostRow {
        model: model.into(),
        variant: variant.name().into(),
        parameters,
        shared_macs: shared,
        per_candidate_macs: per,
        candidates,
        total_macs: shared + per * c,
        total_without_reuse: (shared + per) * c,
    }
}

pub fn cost_report(ebm: &EnergyModel<f32>, dmo: Option<&MotionRefiner<f32>>, horizon: usize, candidates: usize) -> Vec<CostRow> {
    let n = horizon + 1;
    let m = ebm.macs(n);
    let mut rows = vec![cost_row("ebm", ebm.config.encoder.variant, ebm.params.num_elements(), m.shared, m.per_candidate, candidates)];
    if let Some(d) = dmo {
        let m = d.macs(n);
        rows.push(cost_row("dmo", d.config.encoder.variant, d.params.num_elements(), m.shared, m.per_candidate, candidates));
    }
    rows
}
