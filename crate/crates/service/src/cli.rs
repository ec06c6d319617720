//! Command-line entry points. Failures print one JSON object on stderr.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use recovery_core::data::{filter_patients, load_patients, to_dataset, FeatureSpec, PatientRecord};
use recovery_core::evaluate::{
    average_shape_prior, cross_validate, default_grid, fit_average_shape, grid_search_cv, kfold_split, write_loss_csv,
    AverageShape, AverageValue, MedianByClass, ModelPredictor, Predictor, TimewiseRegression, TruthOracle,
};
use recovery_core::model::{self, HyperConfig, PatientParams};
use recovery_core::sampler::SamplerConfig;
use recovery_core::simulate::{simulate_study, StudySpec, RHAT_THRESHOLD};
use serde_json::json;

use crate::api::{predict, ApiError, PredictionRequest};
use crate::posterior::{write_fit, FitReport, LoadedPosterior};
use crate::server::{serve, AppState};

pub const EXIT_ERROR: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
/// `fit` finished and wrote its outputs, but some R-hat is at or above the
/// threshold.
pub const EXIT_RHAT: i32 = 3;

pub const PATIENTS_FILE: &str = "patients.csv";
pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Parser)]
#[command(name = "recovery", version, about = "Fit and query Bayesian recovery-curve models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic study (patients.csv, observations.csv, truth.json).
    Simulate {
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Noise patients added after the N model patients.
        #[arg(long, default_value_t = 0)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the model and write samples.ndjson and summary.json.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Cross-validate the model against the baselines.
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// Also run the hyperparameter sensitivity grid.
        #[arg(long)]
        grid: bool,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Print posterior-predictive quantiles for one profile as JSON.
    Predict {
        #[arg(long)]
        posterior: PathBuf,
        #[arg(long)]
        age: Option<f64>,
        #[arg(long)]
        age_bin: Option<usize>,
        #[arg(long)]
        init_bin: Option<usize>,
        #[arg(long = "pre-treatment", alias = "s")]
        pre_treatment: f64,
        /// Comma-separated months.
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        quantiles: Option<Vec<f64>>,
        /// Include the observation layer.
        #[arg(long)]
        noise: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve /health, /classes, /predict and /reload.
    Serve {
        #[arg(long)]
        posterior: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Debug, Clone, Args)]
pub struct SamplerArgs {
    /// Hyperparameter TOML file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    #[arg(long, default_value_t = 2500)]
    warmup: usize,
    #[arg(long, default_value_t = 2500)]
    keep: usize,
}

impl SamplerArgs {
    fn hyper(&self) -> Result<HyperConfig, CliError> {
        match &self.config {
            Some(p) => HyperConfig::load(p).map_err(|e| CliError::new("config", e)),
            None => Ok(HyperConfig::default()),
        }
    }

    fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            n_chains: self.chains,
            n_warmup: self.warmup,
            n_keep: self.keep,
            seed: self.seed,
            ..Default::default()
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn new(kind: &'static str, e: impl ToString) -> Self {
        Self { kind, message: e.to_string() }
    }

    pub fn to_json(&self) -> String {
        json!({ "error": self.kind, "message": self.message }).to_string()
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::new("io", format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::new("io", e))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn create(path: &Path) -> Result<fs::File, CliError> {
    fs::File::create(path).map_err(io_err(path))
}

/// Loads and filters the two-file dataset in `dir`; the removal report goes
/// to `out/removed.csv`.
fn load_filtered(dir: &Path, out: &Path) -> Result<(Vec<PatientRecord>, BTreeMap<String, usize>), CliError> {
    let (records, _) = load_patients(dir.join(PATIENTS_FILE), dir.join(OBSERVATIONS_FILE), true)
        .map_err(|e| CliError::new("data", e))?;
    let outcome = filter_patients(&records);
    fs::create_dir_all(out).map_err(io_err(out))?;
    outcome.write_report(create(&out.join("removed.csv"))?).map_err(|e| CliError::new("io", e))?;
    if outcome.kept.is_empty() {
        return Err(CliError::new("data", "no patients left after filtering"));
    }
    let removed = outcome.counts().into_iter().map(|(r, n)| (r.as_str().to_string(), n)).collect();
    Ok((outcome.kept, removed))
}

fn simulate(n: usize, m: usize, seed: u64, out: &Path) -> Result<i32, CliError> {
    let spec = StudySpec { n_noise: m, ..StudySpec::standard(n, seed) };
    let study = simulate_study(&spec).map_err(|e| CliError::new("simulate", e))?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    recovery_core::data::write_patients(
        &study.records,
        create(&out.join(PATIENTS_FILE))?,
        create(&out.join(OBSERVATIONS_FILE))?,
    )
    .map_err(|e| CliError::new("io", e))?;
    write_json(&out.join(TRUTH_FILE), &study.truth)?;
    println!("{}", json!({ "patients": study.records.len(), "out": out }));
    Ok(0)
}

fn fit(data: &Path, out: &Path, args: &SamplerArgs) -> Result<i32, CliError> {
    let (records, removed) = load_filtered(data, out)?;
    let features = FeatureSpec::fit(&records).map_err(|e| CliError::new("data", e))?;
    let (dataset, n_clipped) = to_dataset(&records, &features).map_err(|e| CliError::new("data", e))?;
    let config = args.hyper()?;
    let mu = if config.has_average_shape() {
        None
    } else {
        Some(average_shape_prior(fit_average_shape(&records).map_err(|e| CliError::new("data", e))?))
    };
    let hyper = config.resolve(mu).map_err(|e| CliError::new("config", e))?;
    let sampler = args.sampler();
    let samples = model::fit(&dataset, &hyper, &sampler, false).map_err(|e| CliError::new("fit", e))?;
    let mut report = FitReport::new(&samples, hyper, features, sampler);
    report.n_patients = records.len();
    report.n_clipped = n_clipped;
    report.removed = removed;
    write_fit(out, &samples, &mut report).map_err(|e| CliError::new("io", e))?;
    println!("{}", json!({ "fit_id": report.fit_id, "max_rhat": report.max_rhat, "patients": report.n_patients }));
    let worst = crate::posterior::max_rhat(&samples);
    if worst.is_some_and(|r| !(r < RHAT_THRESHOLD)) {
        eprintln!(
            "{}",
            json!({ "warning": "rhat", "max_rhat": report.max_rhat, "threshold": RHAT_THRESHOLD, "fit_id": report.fit_id })
        );
        return Ok(EXIT_RHAT);
    }
    Ok(0)
}

fn cv(data: &Path, out: &Path, folds: usize, grid: bool, args: &SamplerArgs) -> Result<i32, CliError> {
    let (records, _) = load_filtered(data, out)?;
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let split = kfold_split(&ids, folds, args.seed).map_err(|e| CliError::new("cv", e))?;
    let hyper = args.hyper()?;
    let mut predictors: Vec<Box<dyn Predictor>> = vec![
        Box::new(AverageValue { scaled: false }),
        Box::new(AverageValue { scaled: true }),
        Box::new(TimewiseRegression { scaled: false }),
        Box::new(TimewiseRegression { scaled: true }),
        Box::new(MedianByClass::new(&records).map_err(|e| CliError::new("cv", e))?),
        Box::new(AverageShape),
        Box::new(ModelPredictor { hyper: hyper.clone(), config: args.sampler() }),
    ];
    let truth_path = data.join(TRUTH_FILE);
    if truth_path.exists() {
        let text = fs::read_to_string(&truth_path).map_err(io_err(&truth_path))?;
        let truth: BTreeMap<String, PatientParams> =
            serde_json::from_str(&text).map_err(|e| CliError::new("data", format!("{}: {e}", truth_path.display())))?;
        if ids.iter().all(|id| truth.contains_key(id)) {
            predictors.push(Box::new(TruthOracle { truth }));
        }
    }
    let mut curves = Vec::new();
    let mut summary = serde_json::Map::new();
    for p in &predictors {
        let preds = cross_validate(p.as_ref(), &split, &records, args.seed).map_err(|e| CliError::new("cv", e))?;
        let curve = preds.loss_curve(p.label(), &records);
        let worst =
            preds.fold_rhat.iter().flatten().copied().fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))));
        summary.insert(
            p.label(),
            json!({ "pooled": curve.pooled(), "pooled_from_36": curve.pooled_from(36), "max_rhat": worst }),
        );
        curves.push(curve);
    }
    write_loss_csv(&curves, create(&out.join("losses.csv"))?).map_err(|e| CliError::new("io", e))?;
    let mut result = json!({ "folds": folds, "patients": records.len(), "models": summary });
    if grid {
        let g = grid_search_cv(&default_grid(), &args.sampler(), &split, &records, args.seed)
            .map_err(|e| CliError::new("cv", e))?;
        g.write_sensitivity_csv(create(&out.join("sensitivity.csv"))?).map_err(|e| CliError::new("io", e))?;
        result["best_hyper"] = json!(g.best_hyper());
    }
    write_json(&out.join("cv_summary.json"), &result)?;
    println!("{}", json!({ "out": out, "patients": records.len() }));
    Ok(0)
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Simulate { n, m, seed, out } => simulate(n, m, seed, &out),
        Command::Fit { data, out, sampler } => fit(&data, &out, &sampler),
        Command::Cv { data, out, folds, grid, sampler } => cv(&data, &out, folds, grid, &sampler),
        Command::Predict { posterior, age, age_bin, init_bin, pre_treatment, times, quantiles, noise, seed, out } => {
            let loaded = LoadedPosterior::load(&posterior).map_err(|e| CliError::new("posterior", e))?;
            let req = PredictionRequest {
                age,
                age_bin,
                init_bin,
                pre_treatment,
                times,
                quantiles,
                observation_noise: noise,
                seed,
                draw_sample: None,
            };
            let resp = match predict(&loaded, &req) {
                Ok(r) => r,
                Err(ApiError::Invalid(errors)) => {
                    let message = errors.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>();
                    return Err(CliError::new("request", message.join("; ")));
                }
                Err(ApiError::Internal(m)) => return Err(CliError::new("predict", m)),
            };
            match out {
                Some(path) => write_json(&path, &resp)?,
                None => {
                    let line = serde_json::to_string(&resp).map_err(|e| CliError::new("io", e))?;
                    writeln!(std::io::stdout(), "{line}").map_err(|e| CliError::new("io", e))?;
                }
            }
            Ok(0)
        }
        Command::Serve { posterior, port } => {
            let state = Arc::new(AppState::new(posterior));
            state.reload().map_err(|e| CliError::new("posterior", e))?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::new("io", e))?;
            rt.block_on(serve(state, port)).map_err(|e| CliError::new("io", e))?;
            Ok(0)
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            eprintln!("{}", CliError::new("usage", e.to_string().trim()).to_json());
            return EXIT_USAGE;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.to_json());
            EXIT_ERROR
        }
    }
}
