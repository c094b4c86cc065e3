use ebmdmo_core::dataset::{generate, load, save, Dataset};
use ebmdmo_core::dmo::{DmoModelConfig, MotionRefiner};
use ebmdmo_core::ebm::{EbmModelConfig, EnergyModel};
use ebmdmo_core::optimizers::OptimizerSpec;
use ebmdmo_core::pipeline::{predict, top_n, Models, PredictionConfig};
use ebmdmo_core::scene::{check_success, Geometry, TaskId};
use ebmdmo_core::vae::{Vae, VaeConfig};

fn small(task: TaskId) -> Dataset {
    generate(task, 12, 3, 5, 15, Geometry::default_camera(), Geometry::default()).unwrap()
}

fn cfg(n: usize, rounds: usize, optimizer: OptimizerSpec) -> PredictionConfig {
    PredictionConfig { n, rounds, optimizer }
}

#[test]
fn zero_rounds_returns_the_lowest_energy_retrieval() {
    let ds = small(TaskId::Reach);
    let ebm = EnergyModel::<f32>::new(EbmModelConfig::default()).unwrap();
    let pool = ds.train_motions();
    let ep = &ds.test[0];
    let r = predict(Models { ebm: &ebm, dmo: None, vae: None }, &ep.image, &pool, &cfg(4, 0, OptimizerSpec::dmo()), &ep.camera, 0).unwrap();
    let energies = ebm.energy_batch(&ep.image, &pool, &ep.camera).unwrap();
    let want = top_n(&energies, 4).unwrap();
    assert_eq!(r.candidates.iter().map(|c| c.id).collect::<Vec<_>>(), want.iter().map(|w| w.0).collect::<Vec<_>>());
    for c in &r.candidates {
        assert_eq!(c.trajectory, pool[c.id]);
        assert_eq!(c.initial_energy, c.final_energy);
    }
    assert_eq!(r.best, pool[want[0].0]);
    assert_eq!(r.best_energy, want[0].1);
}

#[test]
fn fresh_refiner_is_the_identity_inside_the_pipeline() {
    let ds = small(TaskId::PickPlace);
    let ebm = EnergyModel::<f32>::new(EbmModelConfig::default()).unwrap();
    let dmo = MotionRefiner::<f32>::new(DmoModelConfig::default()).unwrap();
    let pool = ds.train_motions();
    let ep = &ds.test[1];
    let models = Models { ebm: &ebm, dmo: Some(&dmo), vae: None };
    let base = predict(models, &ep.image, &pool, &cfg(3, 0, OptimizerSpec::dmo()), &ep.camera, 0).unwrap();
    let refined = predict(models, &ep.image, &pool, &cfg(3, 4, OptimizerSpec::dmo()), &ep.camera, 0).unwrap();
    assert_eq!(base, refined);
}

#[test]
fn image_features_are_computed_once_per_prediction() {
    let ds = small(TaskId::Reach);
    let ebm = EnergyModel::<f32>::new(EbmModelConfig::default()).unwrap();
    let pool = ds.train_motions();
    let ep = &ds.test[0];
    for spec in [OptimizerSpec::dmo(), OptimizerSpec { iterations: 3, ..OptimizerSpec::langevin() }] {
        let dmo = MotionRefiner::<f32>::new(DmoModelConfig::default()).unwrap();
        let before = ebm.encoder.feature_map_count();
        predict(Models { ebm: &ebm, dmo: Some(&dmo), vae: None }, &ep.image, &pool, &cfg(5, 1, spec), &ep.camera, 0).unwrap();
        assert_eq!(ebm.encoder.feature_map_count() - before, 1, "{:?}", spec.kind);
    }
}

#[test]
fn baselines_are_seeded_and_finite() {
    let ds = small(TaskId::PushButton);
    let ebm = EnergyModel::<f32>::new(EbmModelConfig::default()).unwrap();
    let vae = Vae::<f32>::new(VaeConfig::default()).unwrap();
    let pool = ds.train_motions();
    let ep = &ds.test[2];
    let models = Models { ebm: &ebm, dmo: None, vae: Some(&vae) };
    for spec in [
        OptimizerSpec { iterations: 5, ..OptimizerSpec::langevin() },
        OptimizerSpec { iterations: 5, ..OptimizerSpec::vaebm_l() },
    ] {
        let c = cfg(3, 1, spec);
        let a = predict(models, &ep.image, &pool, &c, &ep.camera, 9).unwrap();
        let b = predict(models, &ep.image, &pool, &c, &ep.camera, 9).unwrap();
        let other = predict(models, &ep.image, &pool, &c, &ep.camera, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.best, other.best);
        assert!(a.candidates.iter().all(|c| c.trajectory.is_finite() && c.trajectory.is_valid(16)));
    }
    let gd = cfg(3, 1, OptimizerSpec { iterations: 5, ..OptimizerSpec::gd() });
    assert_eq!(
        predict(models, &ep.image, &pool, &gd, &ep.camera, 1).unwrap(),
        predict(models, &ep.image, &pool, &gd, &ep.camera, 2).unwrap()
    );
}

#[test]
fn missing_models_and_bad_sizes_are_rejected() {
    let ds = small(TaskId::Reach);
    let ebm = EnergyModel::<f32>::new(EbmModelConfig::default()).unwrap();
    let pool = ds.train_motions();
    let ep = &ds.test[0];
    let models = Models { ebm: &ebm, dmo: None, vae: None };
    assert!(predict(models, &ep.image, &pool, &cfg(2, 1, OptimizerSpec::dmo()), &ep.camera, 0).is_err());
    assert!(predict(models, &ep.image, &pool, &cfg(2, 1, OptimizerSpec::vaebm_l()), &ep.camera, 0).is_err());
    assert!(predict(models, &ep.image, &pool, &cfg(13, 0, OptimizerSpec::dmo()), &ep.camera, 0).is_err());
    assert!(predict(models, &ep.image, &[], &cfg(1, 0, OptimizerSpec::dmo()), &ep.camera, 0).is_err());
}

#[test]
fn dataset_roundtrips_and_experts_succeed() {
    let ds = small(TaskId::PickPlace);
    let dir = tempfile::tempdir().unwrap();
    save(&ds, dir.path()).unwrap();
    let back = load(dir.path()).unwrap();
    assert_eq!(back.manifest, ds.manifest);
    for (a, b) in back.train.iter().chain(&back.test).zip(ds.train.iter().chain(&ds.test)) {
        assert_eq!(a.expert, b.expert);
        assert_eq!(a.scene, b.scene);
        assert!(check_success(&a.scene, &a.expert, back.geometry()).success);
    }
}
