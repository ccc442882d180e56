//! End-to-end experiment: data, training, reconstruction, verification
//! and the summary table, plus the `report` renderer over a finished run.
//!
//! Output directory of a run:
//!
//! ```text
//! config.json         resolved configuration
//! data/<accel>/       one dataset per acceleration
//! model.ckpt          trained parameters (+ model.ckpt.json)
//! history.csv         training history
//! recon/<accel>/      x* and SENSE tensors plus per-case JSON
//! convergence.csv     solver histories of every test reconstruction
//! metrics.csv         PSNR/SSIM per test case and method
//! verification.json   verification report
//! summary.md          mean ± std table
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{self, DataConfig, Dataset, Split};
use crate::energy::{Activation, CheckpointMeta, EnergyModel, Init, NetworkSpec};
use crate::error::{Error, Result};
use crate::lcmt;
use crate::mri::{delta_from_sense, sense_init, SenseCase, SenseConfig};
use crate::scalar::{Precision, Real};
use crate::solver::{self, MMState, SolverConfig};
use crate::tensor::Tensor;
use crate::training::{self, TrainConfig};
use crate::verify::{self, SolvedCase, VerificationReport, VerifyConfig};

/// Architecture and initialization of the energy network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub network: NetworkSpec,
    pub sigma_f: f64,
    pub init: Init,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            network: NetworkSpec {
                channels: 8,
                activation: Activation::Elu,
                ..NetworkSpec::default()
            },
            sigma_f: 0.1,
            init: Init::ScaledIdentity {
                t_gain: 0.5,
                jitter: 0.1,
            },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if !(self.sigma_f > 0.0 && self.sigma_f.is_finite()) {
            return Err(Error::Config(format!("model.sigma_f must be positive, got {}", self.sigma_f)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub sense: SenseConfig,
    pub train: TrainConfig,
    pub solver: SolverConfig,
    pub verify: VerifyConfig,
    pub seed: u64,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            sense: SenseConfig::default(),
            train: TrainConfig::default(),
            solver: SolverConfig::default(),
            verify: VerifyConfig::default(),
            seed: 0,
            output: PathBuf::from("runs/desk"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg = Self::from_json(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section and the output path without touching the disk.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.solver.validate()?;
        self.verify.validate()?;
        if !(self.sense.lambda >= 0.0) || !(self.sense.cg_tol > 0.0) {
            return Err(Error::Config("sense.lambda must be ≥ 0 and sense.cg_tol positive".into()));
        }
        validate_output_dir(&self.output)
    }
}

/// The output may exist only as a directory, and its nearest existing
/// ancestor must be a directory.
pub fn validate_output_dir(path: &Path) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::Config("output directory is empty".into()));
    }
    if path.exists() {
        if !path.is_dir() {
            return Err(Error::Config(format!("output {} exists and is not a directory", path.display())));
        }
        return Ok(());
    }
    let mut ancestor = path.parent();
    while let Some(a) = ancestor {
        if a.as_os_str().is_empty() {
            return Ok(());
        }
        if a.exists() {
            if a.is_dir() {
                return Ok(());
            }
            return Err(Error::Config(format!("{} is not a directory", a.display())));
        }
        ancestor = a.parent();
    }
    Ok(())
}

fn stage<R>(name: &'static str, r: Result<R>) -> Result<R> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name,
            source: Box::new(e),
        },
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// δ as the worst SENSE deviation over the training split.
pub fn select_delta<T: Real>(data: &Dataset<T>, sense: &SenseConfig) -> Result<f64> {
    let cases: Vec<SenseCase<'_, T>> = data
        .split(Split::Train)
        .map(|c| SenseCase {
            op: &c.op,
            image: &c.image,
            measurement: &c.kspace,
        })
        .collect();
    delta_from_sense(&cases, sense)
}

fn train_in<T: Real>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    images: &[Tensor<f64>],
    heldout: &[Tensor<f64>],
) -> Result<(EnergyModel<f64>, Vec<training::EpochRecord>)> {
    let init = EnergyModel::<T>::init(model.network.clone(), model.sigma_f, model.init, cfg.seed)?;
    let cast = |v: &[Tensor<f64>]| v.iter().map(Tensor::cast::<T>).collect::<Vec<_>>();
    let out = training::train(init, &cast(images), &cast(heldout), cfg, |r, _| {
        log::info!(
            "epoch {:>3}  dsm {:.4e}  penalty {:.3e}  max ratio {:.4}  m' {:.4}  λ {}  violations {:.3}",
            r.epoch,
            r.dsm,
            r.penalty,
            r.max_ratio,
            r.m_prime,
            r.lambda,
            r.violation_rate
        );
        Ok(())
    })?;
    Ok((out.model.cast(), out.history))
}

/// Trains a model in the configured precision; `cfg.delta` must be set.
/// Writes the checkpoint and `history.csv` next to it.
pub fn train_model(
    model: &ModelConfig,
    cfg: &TrainConfig,
    images: &[Tensor<f64>],
    heldout: &[Tensor<f64>],
    checkpoint: &Path,
) -> Result<EnergyModel<f64>> {
    let delta = cfg
        .delta
        .ok_or_else(|| Error::Config("train.delta must be resolved before training".into()))?;
    let (trained, history) = match cfg.precision {
        Precision::F32 => train_in::<f32>(model, cfg, images, heldout)?,
        Precision::F64 => train_in::<f64>(model, cfg, images, heldout)?,
    };
    let meta = CheckpointMeta {
        m: cfg.m,
        delta,
        l: cfg.l(),
        epochs: cfg.epochs,
        seed: cfg.seed,
    };
    trained.save(checkpoint, &meta)?;
    training::write_history(&checkpoint.with_file_name("history.csv"), &history)?;
    Ok(trained)
}

/// Per-case solver summary written next to the reconstruction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case: String,
    pub acceleration: String,
    pub iterations: usize,
    pub converged: bool,
    pub final_objective: f64,
    pub final_map_objective: f64,
    pub final_stationarity: f64,
    pub max_increase: f64,
    pub cg_failures: usize,
    pub sense_iterations: usize,
    pub sense_converged: bool,
}

/// One test reconstruction kept in memory.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub case: String,
    pub sense: Tensor<f64>,
    pub x_star: Tensor<f64>,
    pub state: MMState<f64>,
    pub record: CaseRecord,
}

/// SENSE followed by MM on every case of `split`. With `out` set, writes
/// `<case>.lcmt`, `<case>-sense.lcmt` and `<case>.json` there.
pub fn reconstruct(
    model: &EnergyModel<f64>,
    data: &Dataset<f64>,
    split: Split,
    sense: &SenseConfig,
    solver_cfg: &SolverConfig,
    m: f64,
    out: Option<&Path>,
) -> Result<Vec<Reconstruction>> {
    let label = data.meta.acceleration.label();
    let cases: Vec<_> = data.split(split).collect();
    let solved = crate::par::map_slice(&cases, |_, c| -> Result<Reconstruction> {
        let init = sense_init(&c.op, &c.kspace, sense)?;
        if !init.converged {
            log::warn!("SENSE for {} stopped at residual {:.2e}", c.name, init.relative_residual);
        }
        let (x_star, state) = solver::solve(model, &c.op, &c.kspace, &init.x, solver_cfg, m)?;
        let record = CaseRecord {
            case: c.name.clone(),
            acceleration: label.clone(),
            iterations: state.iterations,
            converged: state.converged,
            final_objective: state.final_objective(),
            final_map_objective: state.map_objective.last().copied().unwrap_or(f64::NAN),
            final_stationarity: state.final_stationarity(),
            max_increase: state.max_increase(),
            cg_failures: state.cg_failures,
            sense_iterations: init.iterations,
            sense_converged: init.converged,
        };
        Ok(Reconstruction {
            case: c.name.clone(),
            sense: init.x,
            x_star,
            state,
            record,
        })
    });
    let solved = solved.into_iter().collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out {
        create_dir(dir)?;
        for r in &solved {
            lcmt::save(&dir.join(format!("{}.lcmt", r.case)), &r.x_star)?;
            lcmt::save(&dir.join(format!("{}-sense.lcmt", r.case)), &r.sense)?;
            let json = serde_json::to_string_pretty(&r.record)? + "\n";
            write_text(&dir.join(format!("{}.json", r.case)), &json)?;
        }
    }
    Ok(solved)
}

/// Held-out ball centres: validation images first, then test images.
pub fn heldout_centers(data: &Dataset<f64>) -> Vec<Tensor<f64>> {
    let mut v = data.images(Split::Val);
    v.extend(data.images(Split::Test));
    v
}

#[allow(clippy::too_many_arguments)]
pub fn verify_reconstructions(
    model: &EnergyModel<f64>,
    data: &Dataset<f64>,
    recons: &[Reconstruction],
    delta: f64,
    m: f64,
    solver_cfg: &SolverConfig,
    cfg: &VerifyConfig,
    seed: u64,
) -> Result<VerificationReport> {
    let test: Vec<_> = data.split(Split::Test).collect();
    if test.len() != recons.len() {
        return Err(Error::InvalidArgument(format!(
            "{} reconstructions for {} test cases",
            recons.len(),
            test.len()
        )));
    }
    let cases: Vec<SolvedCase<'_, f64>> = test
        .iter()
        .zip(recons)
        .map(|(c, r)| SolvedCase {
            op: &c.op,
            measurement: &c.kspace,
            x_star: &r.x_star,
            objective: &r.state.objective,
            stationarity: &r.state.stationarity,
        })
        .collect();
    verify::verify_model(
        model,
        &heldout_centers(data),
        &cases,
        delta,
        m,
        solver_cfg,
        cfg,
        seed,
        &model.hash(),
    )
}

pub const METHODS: [&str; 2] = ["sense", "lcmuse"];

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub acceleration: String,
    pub case: String,
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn metric_rows(data: &Dataset<f64>, recons: &[Reconstruction]) -> Result<Vec<MetricRow>> {
    let label = data.meta.acceleration.label();
    let mut rows = Vec::new();
    for (c, r) in data.split(Split::Test).zip(recons) {
        for (method, x) in METHODS.iter().zip([&r.sense, &r.x_star]) {
            rows.push(MetricRow {
                acceleration: label.clone(),
                case: c.name.clone(),
                method: method.to_string(),
                psnr: verify::psnr(&c.image, x)?,
                ssim: verify::ssim(&c.image, x)?,
            });
        }
    }
    Ok(rows)
}

/// Mean and sample standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Mean ± std of one metric for one acceleration and method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub acceleration: String,
    pub method: String,
    pub cases: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

pub fn summarize(rows: &[MetricRow]) -> Vec<SummaryEntry> {
    let mut accels: Vec<&str> = Vec::new();
    for r in rows {
        if !accels.contains(&r.acceleration.as_str()) {
            accels.push(&r.acceleration);
        }
    }
    let mut out = Vec::new();
    for a in accels {
        for method in METHODS {
            let sel: Vec<&MetricRow> = rows.iter().filter(|r| r.acceleration == a && r.method == method).collect();
            if sel.is_empty() {
                continue;
            }
            let (pm, ps) = mean_std(&sel.iter().map(|r| r.psnr).collect::<Vec<_>>());
            let (sm, ss) = mean_std(&sel.iter().map(|r| r.ssim).collect::<Vec<_>>());
            out.push(SummaryEntry {
                acceleration: a.to_string(),
                method: method.to_string(),
                cases: sel.len(),
                psnr_mean: pm,
                psnr_std: ps,
                ssim_mean: sm,
                ssim_std: ss,
            });
        }
    }
    out
}

/// Markdown table of the summary. Contains no timings or paths, so equal
/// inputs give equal bytes.
pub fn render_summary(header: &str, entries: &[SummaryEntry]) -> String {
    let mut s = String::new();
    writeln!(s, "{header}").unwrap();
    writeln!(s).unwrap();
    writeln!(s, "| acceleration | method | n | PSNR (dB) | SSIM |").unwrap();
    writeln!(s, "|---|---|---|---|---|").unwrap();
    for e in entries {
        writeln!(
            s,
            "| {} | {} | {} | {:.3} ± {:.3} | {:.4} ± {:.4} |",
            e.acceleration, e.method, e.cases, e.psnr_mean, e.psnr_std, e.ssim_mean, e.ssim_std
        )
        .unwrap();
    }
    s
}

fn summary_header(cfg: &DataConfig, delta: f64) -> String {
    let accels: Vec<String> = cfg.accelerations.iter().map(|a| a.label()).collect();
    format!(
        "# Reconstruction summary\n\n\
         {n}x{n} phantoms, {c} coils, {tr}/{va}/{te} train/val/test, η = {eta}, δ = {delta:.4}, \
         accelerations {accels}. The 2D setting uses 4x because higher factors leave too \
         little k-space at this size.",
        n = cfg.size,
        c = cfg.coils,
        tr = cfg.n_train,
        va = cfg.n_val,
        te = cfg.n_test,
        eta = cfg.eta,
        accels = accels.join(", ")
    )
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io {
            path: path.to_path_buf(),
            source: io,
        },
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn read_csv<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<S>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// One solver iteration in `convergence.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub acceleration: String,
    pub case: String,
    pub iteration: usize,
    pub objective: f64,
    pub map_objective: f64,
    pub stationarity: f64,
}

pub fn convergence_rows(label: &str, recons: &[Reconstruction]) -> Vec<ConvergenceRow> {
    let mut rows = Vec::new();
    for r in recons {
        for (k, ((f, g), s)) in r
            .state
            .objective
            .iter()
            .zip(&r.state.map_objective)
            .zip(&r.state.stationarity)
            .enumerate()
        {
            rows.push(ConvergenceRow {
                acceleration: label.to_string(),
                case: r.case.clone(),
                iteration: k,
                objective: *f,
                map_objective: *g,
                stationarity: *s,
            });
        }
    }
    rows
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub delta: f64,
    pub summary: String,
    pub entries: Vec<SummaryEntry>,
    pub metrics: Vec<MetricRow>,
    pub report: VerificationReport,
    /// Reconstructions per acceleration, in configuration order.
    pub reconstructions: Vec<Vec<Reconstruction>>,
    pub model: EnergyModel<f64>,
}

/// Runs every stage. Verification failures do not stop the run; they are
/// in `report` for the caller to act on. Any other failure is wrapped in
/// [`Error::Stage`] and leaves the artifacts written so far on disk.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    stage("config", cfg.validate())?;
    let out = cfg.output.clone();
    stage("config", create_dir(&out))?;
    stage(
        "config",
        serde_json::to_string_pretty(cfg)
            .map_err(Error::from)
            .and_then(|j| write_text(&out.join("config.json"), &(j + "\n"))),
    )?;

    let datasets: Vec<Dataset<f64>> = stage("gen-data", (|| {
        let mut v = Vec::new();
        for k in 0..cfg.data.accelerations.len() {
            let d = dataset::generate::<f64>(&cfg.data, k, cfg.seed)?;
            dataset::save(&d, &out.join("data").join(d.meta.acceleration.label()))?;
            v.push(d);
        }
        Ok(v)
    })())?;
    let primary = &datasets[0];

    let delta = match cfg.train.delta {
        Some(d) => d,
        None => stage("delta", select_delta(primary, &cfg.sense))?,
    };
    log::info!("δ = {delta:.6}");
    let train_cfg = TrainConfig {
        delta: Some(delta),
        ..cfg.train.clone()
    };
    let model = stage(
        "train",
        train_model(
            &cfg.model,
            &train_cfg,
            &primary.images(Split::Train),
            &primary.images(Split::Val),
            &out.join("model.ckpt"),
        ),
    )?;

    let mut reconstructions = Vec::new();
    let mut metrics = Vec::new();
    let mut convergence = Vec::new();
    for d in &datasets {
        let label = d.meta.acceleration.label();
        let recons = stage(
            "reconstruct",
            reconstruct(
                &model,
                d,
                Split::Test,
                &cfg.sense,
                &cfg.solver,
                cfg.train.m,
                Some(&out.join("recon").join(&label)),
            ),
        )?;
        metrics.extend(stage("metrics", metric_rows(d, &recons))?);
        convergence.extend(convergence_rows(&label, &recons));
        reconstructions.push(recons);
    }
    stage("reconstruct", write_csv(&out.join("convergence.csv"), &convergence))?;
    stage("metrics", write_csv(&out.join("metrics.csv"), &metrics))?;

    let report = stage(
        "verify",
        verify_reconstructions(
            &model,
            primary,
            &reconstructions[0],
            delta,
            cfg.train.m,
            &cfg.solver,
            &cfg.verify,
            cfg.seed,
        ),
    )?;
    stage(
        "verify",
        serde_json::to_string_pretty(&report)
            .map_err(Error::from)
            .and_then(|j| write_text(&out.join("verification.json"), &(j + "\n"))),
    )?;

    let entries = summarize(&metrics);
    let summary = render_summary(&summary_header(&cfg.data, delta), &entries);
    stage("summary", write_text(&out.join("summary.md"), &summary))?;
    Ok(ExperimentOutcome {
        delta,
        summary,
        entries,
        metrics,
        report,
        reconstructions,
        model,
    })
}

/// Files [`report`] reads from a run directory.
pub const REPORT_INPUTS: [&str; 4] = ["metrics.csv", "verification.json", "convergence.csv", "history.csv"];

/// Rendered report of a finished run.
#[derive(Clone, Debug)]
pub struct Report {
    pub text: String,
    pub files: Vec<PathBuf>,
}

/// Renders the metric table and the pass/fail matrix of `dir` and writes
/// plot-ready CSVs to `dir/report/`.
pub fn report(dir: &Path) -> Result<Report> {
    let missing: Vec<PathBuf> = REPORT_INPUTS
        .iter()
        .map(|f| dir.join(f))
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let metrics: Vec<MetricRow> = read_csv(&dir.join("metrics.csv"))?;
    let convergence: Vec<ConvergenceRow> = read_csv(&dir.join("convergence.csv"))?;
    let history: Vec<training::EpochRecord> = read_csv(&dir.join("history.csv"))?;
    let path = dir.join("verification.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    let verification: VerificationReport = serde_json::from_str(&text)?;
    verification.check_integrity()?;

    let out = dir.join("report");
    create_dir(&out)?;
    let mut files = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    for r in &metrics {
        if !labels.contains(&r.acceleration) {
            labels.push(r.acceleration.clone());
        }
    }
    for label in &labels {
        let rows: Vec<&MetricRow> = metrics.iter().filter(|r| &r.acceleration == label).collect();
        let p = out.join(format!("metrics-{label}.csv"));
        write_csv(&p, &rows)?;
        files.push(p);
        let conv: Vec<&ConvergenceRow> = convergence.iter().filter(|r| &r.acceleration == label).collect();
        let p = out.join(format!("convergence-{label}.csv"));
        write_csv(&p, &conv)?;
        files.push(p);
    }
    let p = out.join("lemmas.csv");
    write_csv(&p, &verification.records)?;
    files.push(p);
    let p = out.join("training.csv");
    write_csv(&p, &history)?;
    files.push(p);

    let mut s = render_summary("# Reconstruction metrics", &summarize(&metrics));
    writeln!(s).unwrap();
    writeln!(s, "| check | samples | measured | threshold | pass |").unwrap();
    writeln!(s, "|---|---|---|---|---|").unwrap();
    for r in &verification.records {
        let op = match r.comparison {
            verify::Comparison::AtLeast => "≥",
            verify::Comparison::AtMost => "≤",
        };
        writeln!(
            s,
            "| {} | {} | {:.6e} | {op} {:.6e} | {} |",
            r.lemma,
            r.samples,
            r.measured,
            r.threshold,
            if r.pass { "pass" } else { "FAIL" }
        )
        .unwrap();
    }
    if let Some(last) = history.last() {
        writeln!(
            s,
            "\ntraining: {} epochs, final dsm {:.4e}, max ratio {:.4}, m' {:.4}, λ {}",
            last.epoch + 1,
            last.dsm,
            last.max_ratio,
            last.m_prime,
            last.lambda
        )
        .unwrap();
    }
    let p = out.join("summary.md");
    write_text(&p, &s)?;
    files.push(p);
    Ok(Report { text: s, files })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Acceleration;
    use crate::mri::MaskKind;

    fn tiny(output: PathBuf) -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig {
                size: 16,
                n_train: 2,
                n_val: 1,
                n_test: 2,
                ..DataConfig::default()
            },
            model: ModelConfig {
                network: NetworkSpec {
                    layers: 2,
                    channels: 4,
                    ..ModelConfig::default().network
                },
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 2,
                batch_size: 2,
                ascent_steps: 2,
                heldout_pairs: 4,
                ..TrainConfig::default()
            },
            solver: SolverConfig {
                max_iterations: 5,
                ..SolverConfig::default()
            },
            verify: VerifyConfig {
                balls: 2,
                pairs: 10,
                lipschitz_steps: 3,
                uniqueness_inits: 2,
                robustness_trials: 1,
                ..VerifyConfig::default()
            },
            seed: 3,
            output,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn unknown_keys_and_bad_paths_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"seed": 1, "sead": 2}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"lamda": 2}}"#).is_err());
        let ok = ExperimentConfig::from_json(r#"{"seed": 1, "data": {"size": 16}}"#).unwrap();
        assert_eq!(ok.data.size, 16);
        assert_eq!(ok.data.n_train, 64);

        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        fs::write(&file, "x").unwrap();
        let cfg = ExperimentConfig {
            output: file.clone(),
            ..ExperimentConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ExperimentConfig {
            output: file.join("below"),
            ..ExperimentConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(validate_output_dir(&dir.path().join("a/b/c")).is_ok());
    }

    #[test]
    fn full_sampling_sense_hits_the_cap() {
        let cfg = DataConfig {
            size: 16,
            n_train: 1,
            n_val: 0,
            n_test: 3,
            eta: 0.0,
            accelerations: vec![Acceleration {
                factor: 1.0,
                mask: MaskKind::OneD,
            }],
            ..DataConfig::default()
        };
        let data: Dataset<f64> = dataset::generate(&cfg, 0, 1).unwrap();
        let sense = SenseConfig {
            lambda: 0.0,
            ..SenseConfig::default()
        };
        for c in data.split(Split::Test) {
            let x = sense_init(&c.op, &c.kspace, &sense).unwrap().x;
            assert_eq!(verify::psnr(&c.image, &x).unwrap(), verify::PSNR_CAP);
        }
    }

    #[test]
    fn summary_statistics() {
        let rows: Vec<MetricRow> = [(1.0, 0.5), (3.0, 0.7)]
            .iter()
            .enumerate()
            .map(|(i, &(p, s))| MetricRow {
                acceleration: "2x-1d".into(),
                case: format!("test_{i:03}"),
                method: "sense".into(),
                psnr: p,
                ssim: s,
            })
            .collect();
        let e = summarize(&rows);
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].psnr_mean, 2.0);
        assert!((e[0].psnr_std - 2f64.sqrt()).abs() < 1e-15);
        assert!((e[0].ssim_mean - 0.6).abs() < 1e-15);
        let table = render_summary("# t", &e);
        assert!(table.contains("| 2x-1d | sense | 2 | 2.000 ± 1.414 | 0.6000 ± 0.1414 |"));
    }

    #[test]
    fn tiny_run_produces_every_artifact_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path().join("run"));
        let out = run_experiment(&cfg).unwrap();
        // 2 methods × 2 metrics × 2 accelerations
        assert_eq!(out.entries.len(), 4);
        assert_eq!(out.metrics.len(), 2 * 2 * 2);
        for f in REPORT_INPUTS.iter().chain(&["summary.md", "model.ckpt", "config.json"]) {
            assert!(cfg.output.join(f).is_file(), "{f}");
        }
        assert!(cfg.output.join("recon/2x-1d/test_001.json").is_file());
        assert_eq!(
            fs::read_to_string(cfg.output.join("summary.md")).unwrap(),
            out.summary
        );

        let rep = report(&cfg.output).unwrap();
        let rows: Vec<MetricRow> = read_csv(&cfg.output.join("report/metrics-2x-1d.csv")).unwrap();
        assert_eq!(rows.len(), cfg.data.n_test * METHODS.len());
        assert!(rep.text.contains("local_monotonicity"));

        // a pass flag that disagrees with its measured constant
        let path = cfg.output.join("verification.json");
        let mut v: VerificationReport = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        v.records[0].pass = !v.records[0].pass;
        fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        assert!(matches!(report(&cfg.output), Err(Error::Integrity(_))));
    }

    #[test]
    fn report_on_empty_directory_lists_everything() {
        let dir = tempfile::tempdir().unwrap();
        match report(dir.path()) {
            Err(Error::MissingArtifacts(v)) => assert_eq!(v.len(), REPORT_INPUTS.len()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stage_failures_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path().join("run"));
        cfg.train.delta = Some(0.5);
        cfg.train.learning_rate = 1e6;
        cfg.train.sigma_max = 1e6;
        match run_experiment(&cfg) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "train"),
            other => panic!("unexpected {:?}", other.map(|o| o.summary)),
        }
        assert!(cfg.output.join("data/2x-1d/meta.json").is_file());
    }
}
