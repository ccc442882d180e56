use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lcmuse_core::dataset::{self, Acceleration, DataConfig, Dataset, Split};
use lcmuse_core::energy::EnergyModel;
use lcmuse_core::experiment::{self, ExperimentConfig, ModelConfig};
use lcmuse_core::mri::{MaskKind, SenseConfig};
use lcmuse_core::solver::SolverConfig;
use lcmuse_core::training::TrainConfig;
use lcmuse_core::verify::VerifyConfig;
use lcmuse_core::{Error, Result};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "lcmuse", version, about = "Locally convex learned priors for multi-coil MRI reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-coil dataset.
    GenData(GenData),
    /// Train an energy model on the training split of a dataset.
    Train(Train),
    /// Reconstruct a split with SENSE initialization and MM.
    Reconstruct(Reconstruct),
    /// Reconstruct the test split and run every verification probe.
    Verify(Verify),
    /// Render tables and CSVs from a finished experiment directory.
    Report(ReportArgs),
    /// Run the whole experiment from one config file.
    Run(Run),
}

#[derive(Args)]
struct GenData {
    /// Training images.
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    val: usize,
    #[arg(long, default_value_t = 16)]
    test: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 2.0)]
    accel: f64,
    #[arg(long, default_value = "1d")]
    mask: MaskKind,
    #[arg(long, default_value_t = 0.01)]
    eta: f64,
    #[arg(long, default_value_t = 4)]
    coils: usize,
    #[arg(long, default_value_t = 0.08)]
    center_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    /// Training configuration (JSON, same fields as the `train` section).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Network configuration (JSON, same fields as the `model` section).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; `history.csv` is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Reconstruct {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Noise level of the data term; defaults to the dataset's.
    #[arg(long)]
    eta: Option<f64>,
    /// Solver configuration (JSON, same fields as the `solver` section).
    #[arg(long)]
    solver: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Verify {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Verification configuration (JSON, same fields as the `verify` section).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    solver: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    dir: PathBuf,
}

#[derive(Args)]
struct Run {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) | Error::MissingArtifacts(_) => 2,
        Error::Numerical(_) | Error::Shape { .. } | Error::NonScalarRoot(_) => 3,
        Error::Verification(_) | Error::Integrity(_) => 4,
        _ => 1,
    }
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn parent_dir(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => experiment::validate_output_dir(p),
        _ => Ok(()),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown split `{s}`; expected train, val or test")))
}

fn load_model(path: &Path) -> Result<(EnergyModel<f64>, lcmuse_core::energy::CheckpointHeader)> {
    if !path.is_file() {
        return Err(Error::MissingArtifacts(vec![path.to_path_buf()]));
    }
    EnergyModel::<f64>::load(path)
}

fn solver_for(path: Option<&Path>, data: &Dataset<f64>, eta: Option<f64>) -> Result<SolverConfig> {
    let mut cfg: SolverConfig = read_json(path)?;
    if path.is_none() {
        cfg.eta = data.meta.eta;
    }
    if let Some(eta) = eta {
        cfg.eta = eta;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(a: GenData) -> Result<()> {
    let cfg = DataConfig {
        size: a.size,
        n_train: a.n,
        n_val: a.val,
        n_test: a.test,
        coils: a.coils,
        eta: a.eta,
        center_fraction: a.center_fraction,
        accelerations: vec![Acceleration {
            factor: a.accel,
            mask: a.mask,
        }],
    };
    cfg.validate()?;
    experiment::validate_output_dir(&a.out)?;
    let data = dataset::generate::<f64>(&cfg, 0, a.seed)?;
    dataset::save(&data, &a.out)?;
    println!("wrote {} cases to {}", data.cases.len(), a.out.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut cfg: TrainConfig = read_json(a.config.as_deref())?;
    let model: ModelConfig = read_json(a.model.as_deref())?;
    cfg.validate()?;
    model.validate()?;
    parent_dir(&a.out)?;
    let data = dataset::load::<f64>(&a.data)?;
    if cfg.delta.is_none() {
        let delta = experiment::select_delta(&data, &SenseConfig::default())?;
        log::info!("δ from SENSE deviation: {delta:.6}");
        cfg.delta = Some(delta);
    }
    if let Some(p) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
    }
    let trained = experiment::train_model(
        &model,
        &cfg,
        &data.images(Split::Train),
        &data.images(Split::Val),
        &a.out,
    )?;
    println!("wrote {} (hash {})", a.out.display(), trained.hash());
    Ok(())
}

fn reconstruct(a: Reconstruct) -> Result<()> {
    let split = parse_split(&a.split)?;
    experiment::validate_output_dir(&a.out)?;
    let (model, header) = load_model(&a.ckpt)?;
    let data = dataset::load::<f64>(&a.data)?;
    let solver = solver_for(a.solver.as_deref(), &data, a.eta)?;
    let recons = experiment::reconstruct(
        &model,
        &data,
        split,
        &SenseConfig::default(),
        &solver,
        header.meta.m,
        Some(&a.out),
    )?;
    for r in &recons {
        println!(
            "{}: {} iterations, objective {:.6e}, stationarity {:.3e}",
            r.case, r.record.iterations, r.record.final_objective, r.record.final_stationarity
        );
    }
    Ok(())
}

fn verify(a: Verify) -> Result<()> {
    let cfg: VerifyConfig = read_json(a.config.as_deref())?;
    cfg.validate()?;
    parent_dir(&a.report)?;
    let (model, header) = load_model(&a.ckpt)?;
    let data = dataset::load::<f64>(&a.data)?;
    let solver = solver_for(a.solver.as_deref(), &data, None)?;
    let m = header.meta.m;
    let recons = experiment::reconstruct(&model, &data, Split::Test, &SenseConfig::default(), &solver, m, None)?;
    let report =
        experiment::verify_reconstructions(&model, &data, &recons, header.meta.delta, m, &solver, &cfg, a.seed)?;
    write_json(&a.report, &report)?;
    for r in &report.records {
        println!(
            "{:<22} {:>12.6e} (threshold {:.6e}) {}",
            r.lemma,
            r.measured,
            r.threshold,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    if !report.all_pass() {
        let failed: Vec<&str> = report.records.iter().filter(|r| !r.pass).map(|r| r.lemma.as_str()).collect();
        return Err(Error::Verification(failed.join(", ")));
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let r = experiment::report(&a.dir)?;
    print!("{}", r.text);
    for f in &r.files {
        log::info!("wrote {}", f.display());
    }
    Ok(())
}

fn run(a: Run) -> Result<()> {
    let text = fs::read_to_string(&a.config).map_err(|e| Error::Config(format!("{}: {e}", a.config.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(o) = a.output {
        cfg.output = o;
    }
    let out = experiment::run_experiment(&cfg)?;
    print!("{}", out.summary);
    if !out.report.all_pass() {
        let failed: Vec<&str> = out.report.records.iter().filter(|r| !r.pass).map(|r| r.lemma.as_str()).collect();
        return Err(Error::Verification(failed.join(", ")));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Verify(a) => verify(a),
        Command::Report(a) => report(a),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
