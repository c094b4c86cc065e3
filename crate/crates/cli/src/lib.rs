//! `ebmdmo` command-line driver. Exit codes: 0 success, 2 usage or invalid
//! configuration, 3 missing or unreadable inputs, 4 numerical failure.

pub mod config;
pub mod render;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ebmdmo_core::checkpoint::{file_hash, Checkpoint};
use ebmdmo_core::dataset::{self, write_png_rgb, Dataset};
use ebmdmo_core::dmo::{contraction, train_dmo, MotionRefiner};
use ebmdmo_core::ebm::{rank_metric, train_ebm, EnergyModel, LossMode, RankProbe};
use ebmdmo_core::encoder::EncoderVariant;
use ebmdmo_core::eval::{self, manifest_hash, EvalMeta, EvalReport, EvalRow, TrainRecipe};
use ebmdmo_core::optimizers::OptimizerKind;
use ebmdmo_core::pipeline::{predict, Models};
use ebmdmo_core::scene::TaskId;
use ebmdmo_core::vae::{reconstruction_error, train_vae, Vae};
use ebmdmo_core::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "ebmdmo", version, about = "Image-conditioned motion prediction with an energy model and a learned refiner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic task dataset.
    GenData(GenDataArgs),
    /// Train the motion VAE.
    TrainVae(TrainVaeArgs),
    /// Train the energy model.
    TrainEbm(TrainEbmArgs),
    /// Train the learned refiner.
    TrainDmo(TrainDmoArgs),
    /// Predict a motion for one test episode.
    Predict(PredictArgs),
    /// Success rate over the test split.
    Evaluate(EvaluateArgs),
    /// Success rates over a grid of candidate counts and rounds.
    Sweep(SweepArgs),
    /// Train and evaluate one model pair per encoder variant.
    Ablate(AblateArgs),
    /// Parameter and multiply-accumulate counts.
    Cost(CostArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    task: Option<TaskId>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainVaeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainEbmArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// VAE checkpoint; required whenever VAE negatives are drawn.
    #[arg(long)]
    vae: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_data: Option<usize>,
    #[arg(long)]
    k_vae: Option<usize>,
    #[arg(long)]
    variant: Option<EncoderVariant>,
    #[arg(long, value_parser = parse_loss_mode)]
    loss_mode: Option<LossMode>,
}

#[derive(Args, Debug)]
struct TrainDmoArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vae: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    r_train: Option<usize>,
    #[arg(long)]
    variant: Option<EncoderVariant>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ebm: PathBuf,
    #[arg(long)]
    dmo: Option<PathBuf>,
    #[arg(long)]
    vae: Option<PathBuf>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    models: ModelArgs,
    /// Index into the test split.
    #[arg(long, default_value_t = 0)]
    episode: usize,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long = "R")]
    rounds: Option<usize>,
    /// Also write a PNG overlay of the prediction.
    #[arg(long)]
    render: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    models: ModelArgs,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long = "R")]
    rounds: Option<usize>,
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    models: ModelArgs,
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    #[arg(long = "R", value_delimiter = ',')]
    rounds: Vec<usize>,
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vae: PathBuf,
    #[arg(long, value_delimiter = ',')]
    variants: Vec<EncoderVariant>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct CostArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ebm: PathBuf,
    #[arg(long)]
    dmo: Option<PathBuf>,
    /// Candidate count for the totals.
    #[arg(long, default_value_t = 8)]
    candidates: usize,
    #[arg(long, default_value_t = 15)]
    horizon: usize,
}

fn parse_loss_mode(s: &str) -> std::result::Result<LossMode, String> {
    match s {
        "softmax-contrastive" => Ok(LossMode::SoftmaxContrastive),
        "raw-energy" | "raw" => Ok(LossMode::RawEnergy),
        _ => Err(format!("unknown loss mode {s:?} (softmax-contrastive, raw-energy)")),
    }
}

/// Stable exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::ShapeMismatch(_) | Error::LengthMismatch(..) | Error::TooShort(_) => EXIT_USAGE,
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
        _ => EXIT_INPUT,
    }
}

/// Parses `args` (including the program name) and runs one command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    init_threads();
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("EBMDMO_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // A second initialization in the same process is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::TrainVae(a) => cmd_train_vae(a),
        Command::TrainEbm(a) => cmd_train_ebm(a),
        Command::TrainDmo(a) => cmd_train_dmo(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Cost(a) => cmd_cost(a),
    }
}

#[derive(Serialize)]
struct Echo<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a RunConfig,
}

/// Creates `out` and writes the resolved configuration into it.
fn prepare_out(out: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let echo = Echo { tool: "ebmdmo", version: env!("CARGO_PKG_VERSION"), command, config: cfg };
    fs::write(out.join(format!("{command}.config.json")), serde_json::to_string_pretty(&echo)?)?;
    Ok(())
}

fn load_data(dir: &Path) -> Result<Dataset> {
    if !dir.join("manifest.json").exists() {
        return Err(Error::Dataset(format!("no dataset at {}", dir.display())));
    }
    dataset::load(dir)
}

fn require(path: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    path.cloned().ok_or_else(|| Error::Checkpoint(format!("--{what} checkpoint is required")))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    let d = &mut cfg.dataset;
    d.task = a.task.unwrap_or(d.task);
    d.train = a.train.unwrap_or(d.train);
    d.test = a.test.unwrap_or(d.test);
    d.seed = a.seed.unwrap_or(d.seed);
    prepare_out(&a.common.out, "gen-data", &cfg)?;
    let d = &cfg.dataset;
    let ds = dataset::gen_dataset(d.task, d.train, d.test, d.seed, &a.common.out)?;
    println!(
        "wrote {} dataset to {}: {} train, {} test, seed {}",
        d.task.name(),
        a.common.out.display(),
        ds.train.len(),
        ds.test.len(),
        d.seed
    );
    Ok(())
}

fn cmd_train_vae(a: TrainVaeArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    cfg.vae.steps = a.steps.unwrap_or(cfg.vae.steps);
    cfg.vae.seed = a.seed.unwrap_or(cfg.vae.seed);
    let ds = load_data(&a.data)?;
    cfg.vae.horizon = ds.manifest.horizon;
    prepare_out(&a.common.out, "train-vae", &cfg)?;
    let motions = ds.train_motions();
    let mut log = String::from("step,loss,recon,kl\n");
    let vae = train_vae(&motions, cfg.vae.clone(), |r| {
        let _ = writeln!(log, "{},{:.9e},{:.9e},{:.9e}", r.step, r.loss, r.recon, r.kl);
    })?;
    let ckpt = a.common.out.join("vae.ckpt");
    vae.save(&ckpt)?;
    fs::write(a.common.out.join("vae_log.csv"), log)?;
    let rec = reconstruction_error(&vae, &motions)?;
    println!("vae saved to {}; train reconstruction error {rec:.5} m", ckpt.display());
    Ok(())
}

fn load_vae(path: &Path) -> Result<Vae<f32>> {
    Vae::load(path)
}

fn cmd_train_ebm(a: TrainEbmArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    let t = &mut cfg.ebm.train;
    t.steps = a.steps.unwrap_or(t.steps);
    t.seed = a.seed.unwrap_or(t.seed);
    t.k_data = a.k_data.unwrap_or(t.k_data);
    t.k_vae = a.k_vae.unwrap_or(t.k_vae);
    t.loss_mode = a.loss_mode.unwrap_or(t.loss_mode);
    if let Some(v) = a.variant {
        cfg.ebm.model.encoder.variant = v;
    }
    let vae = if cfg.ebm.train.k_vae > 0 { Some(load_vae(&require(a.vae.as_ref(), "vae")?)?) } else { None };
    let ds = load_data(&a.data)?;
    prepare_out(&a.common.out, "train-ebm", &cfg)?;
    let pool = ds.train_motions();
    let mut log = String::from("step,loss,rank\n");
    let model = train_ebm(
        &ds.train,
        vae.as_ref(),
        cfg.ebm.model.clone(),
        &cfg.ebm.train,
        Some(RankProbe { episodes: &ds.test, pool: &pool }),
        |r| {
            let rank = r.rank.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(log, "{},{:.9e},{rank}", r.step, r.loss);
        },
    )?;
    let ckpt = a.common.out.join("ebm.ckpt");
    model.save(&ckpt)?;
    fs::write(a.common.out.join("ebm_log.csv"), log)?;
    let rank = rank_metric(&model, &ds.test, &pool, 100, 0.95, cfg.eval.seed)?;
    fs::write(a.common.out.join("ebm_rank.json"), serde_json::to_string_pretty(&rank)?)?;
    println!(
        "energy model saved to {}; held-out rank pass rate {:.3} (mean beaten {:.3})",
        ckpt.display(),
        rank.pass_rate,
        rank.mean_beaten
    );
    Ok(())
}

fn cmd_train_dmo(a: TrainDmoArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    let t = &mut cfg.dmo.train;
    t.steps = a.steps.unwrap_or(t.steps);
    t.seed = a.seed.unwrap_or(t.seed);
    t.r_train = a.r_train.unwrap_or(t.r_train);
    if let Some(v) = a.variant {
        cfg.dmo.model.encoder.variant = v;
    }
    let vae = load_vae(&require(a.vae.as_ref(), "vae")?)?;
    let ds = load_data(&a.data)?;
    prepare_out(&a.common.out, "train-dmo", &cfg)?;
    let mut log = String::from("step,loss\n");
    let model = train_dmo(&ds.train, &vae, cfg.dmo.model.clone(), &cfg.dmo.train, |r| {
        let _ = writeln!(log, "{},{:.9e}", r.step, r.loss);
    })?;
    let ckpt = a.common.out.join("dmo.ckpt");
    model.save(&ckpt)?;
    fs::write(a.common.out.join("dmo_log.csv"), log)?;
    let c = contraction(&model, &ds.test, &vae, cfg.eval.seed)?;
    fs::write(a.common.out.join("dmo_contraction.json"), serde_json::to_string_pretty(&c)?)?;
    println!(
        "refiner saved to {}; held-out contraction {:.1}% ({:.0}% improved)",
        ckpt.display(),
        100.0 * c.mean_reduction,
        100.0 * c.improved_fraction
    );
    Ok(())
}

/// Models and metadata resolved from the shared model flags.
struct Loaded {
    cfg: RunConfig,
    ds: Dataset,
    ebm: EnergyModel<f32>,
    dmo: Option<MotionRefiner<f32>>,
    vae: Option<Vae<f32>>,
    meta: EvalMeta,
}

impl Loaded {
    fn models(&self) -> Models<'_> {
        Models { ebm: &self.ebm, dmo: self.dmo.as_ref(), vae: self.vae.as_ref() }
    }
}

fn load_models(m: &ModelArgs, cfg: RunConfig) -> Result<Loaded> {
    let mut cfg = cfg;
    cfg.optimizer = cfg.optimizer_for(m.optimizer);
    cfg.eval.seed = m.seed.unwrap_or(cfg.eval.seed);
    let ds = load_data(&m.data)?;
    let ebm = EnergyModel::load(&m.ebm)?;
    let mut hashes = std::collections::BTreeMap::new();
    hashes.insert("ebm".to_string(), file_hash(&m.ebm)?);
    let dmo = match (&m.dmo, cfg.optimizer.kind) {
        (Some(p), _) => {
            hashes.insert("dmo".to_string(), file_hash(p)?);
            Some(MotionRefiner::load(p)?)
        }
        (None, OptimizerKind::Dmo) => return Err(Error::Checkpoint("--dmo checkpoint is required for the dmo optimizer".into())),
        (None, _) => None,
    };
    let vae = match (&m.vae, cfg.optimizer.kind) {
        (Some(p), _) => {
            hashes.insert("vae".to_string(), file_hash(p)?);
            Some(Vae::load(p)?)
        }
        (None, OptimizerKind::LatentLangevin) => return Err(Error::Checkpoint("--vae checkpoint is required for latent langevin".into())),
        (None, _) => None,
    };
    let meta = EvalMeta { seed: cfg.eval.seed, checkpoint_hashes: hashes, manifest_hash: manifest_hash(&ds.manifest)? };
    Ok(Loaded { cfg, ds, ebm, dmo, vae, meta })
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    cfg.prediction.n = a.n.unwrap_or(cfg.prediction.n);
    cfg.prediction.rounds = a.rounds.unwrap_or(cfg.prediction.rounds);
    let l = load_models(&a.models, cfg)?;
    prepare_out(&a.common.out, "predict", &l.cfg)?;
    let ep = l
        .ds
        .test
        .get(a.episode)
        .ok_or_else(|| Error::InvalidConfig(format!("episode {} is outside the {} test episodes", a.episode, l.ds.test.len())))?;
    let pcfg = l.cfg.prediction_config(l.cfg.optimizer);
    let pool = l.ds.train_motions();
    let seed = eval::episode_prediction_seed(l.cfg.eval.seed, a.episode);
    let result = predict(l.models(), &ep.image, &pool, &pcfg, &ep.camera, seed)?;
    let stem = format!("prediction_{}_ep{}_s{}", l.ds.manifest.task.name(), a.episode, l.cfg.eval.seed);
    fs::write(a.common.out.join(format!("{stem}.json")), serde_json::to_string_pretty(&result)?)?;
    let ok = ebmdmo_core::scene::check_success(&ep.scene, &result.best, l.ds.geometry());
    if a.render {
        let c = render::overlay(&ep.image, &result.best, &ep.camera, Some(result.best_energy));
        write_png_rgb(&a.common.out.join(format!("{stem}.png")), c.width, c.height, &c.rgb)?;
    }
    println!(
        "episode {}: best candidate {} (source {}), energy {:.4}, success {}",
        a.episode, result.best_index, result.candidates[result.best_index].id, result.best_energy, ok.success
    );
    Ok(())
}

fn write_report(out: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    fs::write(out.join(format!("{stem}.json")), serde_json::to_string_pretty(report)?)?;
    fs::write(out.join(format!("{stem}.csv")), report.metrics_csv())?;
    Ok(())
}

fn print_rows(rows: &[EvalRow]) {
    println!("{:<24} {:>4} {:>3} {:>16} {:>8} {:>8}", "label", "n", "R", "optimizer", "success", "time_s");
    for r in rows {
        println!("{:<24} {:>4} {:>3} {:>16} {:>8.3} {:>8.1}", r.label, r.n, r.rounds, r.optimizer, r.success_rate, r.wall_time_s);
    }
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    cfg.prediction.n = a.n.unwrap_or(cfg.prediction.n);
    cfg.prediction.rounds = a.rounds.unwrap_or(cfg.prediction.rounds);
    let l = load_models(&a.models, cfg)?;
    prepare_out(&a.common.out, "evaluate", &l.cfg)?;
    let pcfg = l.cfg.prediction_config(l.cfg.optimizer);
    let label = a.label.unwrap_or_else(|| pcfg.optimizer.kind.name().to_string());
    let row = eval::evaluate(l.models(), &l.ds, &pcfg, l.cfg.eval.seed, &label)?;
    let report = EvalReport { rows: vec![row], metadata: l.meta.clone() };
    write_report(&a.common.out, &format!("eval_{}_{label}_s{}", l.ds.manifest.task.name(), l.cfg.eval.seed), &report)?;
    print_rows(&report.rows);
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    if !a.n.is_empty() {
        cfg.eval.n_values = a.n.clone();
    }
    if !a.rounds.is_empty() {
        cfg.eval.r_values = a.rounds.clone();
    }
    let l = load_models(&a.models, cfg)?;
    prepare_out(&a.common.out, "sweep", &l.cfg)?;
    let n_pool = l.ds.train.len();
    if let Some(&bad) = l.cfg.eval.n_values.iter().find(|&&n| n == 0 || n > n_pool) {
        return Err(Error::InvalidConfig(format!("n = {bad} must lie in 1..={n_pool}")));
    }
    let base = l.cfg.prediction_config(l.cfg.optimizer);
    let rows = eval::sweep(l.models(), &l.ds, &base, &l.cfg.eval.n_values, &l.cfg.eval.r_values, l.cfg.eval.seed)?;
    let report = EvalReport { rows, metadata: l.meta.clone() };
    let label = a.label.unwrap_or_else(|| base.optimizer.kind.name().to_string());
    write_report(&a.common.out, &format!("sweep_{}_{label}_s{}", l.ds.manifest.task.name(), l.cfg.eval.seed), &report)?;
    print_rows(&report.rows);
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    if !a.variants.is_empty() {
        cfg.eval.variants = a.variants.clone();
    }
    cfg.eval.seed = a.seed.unwrap_or(cfg.eval.seed);
    let vae = load_vae(&a.vae)?;
    let ds = load_data(&a.data)?;
    prepare_out(&a.common.out, "ablate", &cfg)?;
    let recipe = TrainRecipe {
        ebm_model: cfg.ebm.model.clone(),
        ebm: cfg.ebm.train.clone(),
        dmo_model: cfg.dmo.model.clone(),
        dmo: cfg.dmo.train.clone(),
    };
    let pcfg = cfg.prediction_config(ebmdmo_core::optimizers::OptimizerSpec::dmo());
    let mut hashes = std::collections::BTreeMap::new();
    hashes.insert("vae".to_string(), file_hash(&a.vae)?);
    let out = a.common.out.clone();
    let rows = eval::ablate_encoders(&ds, &vae, &cfg.eval.variants, &recipe, &pcfg, cfg.eval.seed, |v, ebm, dmo| {
        let dir = out.join(v.name());
        let (pe, pd) = (dir.join("ebm.ckpt"), dir.join("dmo.ckpt"));
        ebm.save(&pe)?;
        dmo.save(&pd)?;
        hashes.insert(format!("{}.ebm", v.name()), file_hash(&pe)?);
        hashes.insert(format!("{}.dmo", v.name()), file_hash(&pd)?);
        Ok(())
    })?;
    let report = EvalReport { rows, metadata: EvalMeta { seed: cfg.eval.seed, checkpoint_hashes: hashes, manifest_hash: manifest_hash(&ds.manifest)? } };
    write_report(&a.common.out, &format!("ablate_{}_encoders_s{}", ds.manifest.task.name(), cfg.eval.seed), &report)?;
    print_rows(&report.rows);
    Ok(())
}

fn cmd_cost(a: CostArgs) -> Result<()> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    prepare_out(&a.common.out, "cost", &cfg)?;
    let ebm = EnergyModel::load(&a.ebm)?;
    let dmo = a.dmo.as_deref().map(MotionRefiner::load).transpose()?;
    let rows = eval::cost_report(&ebm, dmo.as_ref(), a.horizon, a.candidates);
    // Cross-check the parameter counts against the raw checkpoint arrays.
    let mut files = vec![Checkpoint::load(&a.ebm)?.num_parameters()];
    if let Some(p) = &a.dmo {
        files.push(Checkpoint::load(p)?.num_parameters());
    }
    for (r, n) in rows.iter().zip(&files) {
        if r.parameters != *n {
            return Err(Error::Checkpoint(format!("{}: model has {} parameters, file has {n}", r.model, r.parameters)));
        }
    }
    let mut csv = String::from("model,variant,parameters,shared_macs,per_candidate_macs,candidates,total_macs,total_without_reuse\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.model, r.variant, r.parameters, r.shared_macs, r.per_candidate_macs, r.candidates, r.total_macs, r.total_without_reuse
        );
    }
    let variant = rows[0].variant.clone();
    fs::write(a.common.out.join(format!("cost_{variant}.json")), serde_json::to_string_pretty(&rows)?)?;
    fs::write(a.common.out.join(format!("cost_{variant}.csv")), &csv)?;
    print!("{csv}");
    Ok(())
}
