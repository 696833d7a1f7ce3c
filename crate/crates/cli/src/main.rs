use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use causal_icc::estimator::EstimatorError;
use causal_icc::eval::{
    self, fit_model, load_csv, load_csv_split, load_feature_matrix, pfi, ColumnSpec, ComparisonReport, CsvSchema,
    Dataset, EvalError, PfiMetric, Ranking, Task,
};
use causal_icc::graph::{CausalGraph, GraphFile};
use causal_icc::icc::{icc_shapley, icc_topological, normalize_and_clamp, AttributionReport, IccConfig, IccError};
use causal_icc::predictor::{Loss, Mlp, Predictor, PredictorError, TrainConfig};
use causal_icc::rng::derive_seed;
use causal_icc::sampler::{PointSource, Scramble};
use causal_icc::scm::{Scm, ScmError};
use causal_icc::scm_learn::{fit_anm, fit_quality, split_rows, FitOptions, LearnError, RegressorKind};
use causal_icc::sobol::SobolError;
use causal_icc_cli::checks::{self, CheckId, CheckOptions, CheckResult};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Intrinsic causal contributions of input features to a trained predictor.
#[derive(Parser)]
#[command(name = "icc", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Seed for every random choice of the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
    /// Output file, or directory for `generate`.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train/test CSVs, graph JSON and ground-truth SCM JSON.
    Generate {
        #[arg(long, default_value_t = eval::DEFAULT_TRAIN_ROWS)]
        n_train: usize,
        #[arg(long, default_value_t = eval::DEFAULT_TEST_ROWS)]
        n_test: usize,
    },
    /// Train the MLP and write its weights as JSON.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Defaults to 3e-4 for regression and 1e-3 for binary tasks.
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Hidden layer widths.
        #[arg(long, value_delimiter = ',', default_values_t = [256, 256])]
        hidden: Vec<usize>,
    },
    /// Fit an additive-noise SCM to data on a known graph.
    FitScm {
        /// Feature CSV; columns named after the graph nodes.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        /// Integer-valued columns, dequantized before fitting.
        #[arg(long, value_delimiter = ',')]
        integer: Vec<String>,
        #[arg(long, value_enum, default_value_t = RegressorArg::Ridge)]
        regressor: RegressorArg,
        #[arg(long, default_value_t = 2)]
        degree: u32,
        #[arg(long, default_value_t = 1e-6)]
        lambda: f64,
        /// Share of rows held out for the fit diagnostics.
        #[arg(long, default_value_t = 0.2)]
        holdout: f64,
    },
    /// Attribute the model output to the features' noise terms.
    Icc {
        #[arg(long)]
        model: PathBuf,
        /// Ground-truth SCM JSON.
        #[arg(long, required_unless_present = "fit_anm", conflicts_with = "fit_anm")]
        scm: Option<PathBuf>,
        /// Learn the SCM from `--data` on `--graph` instead of loading one.
        #[arg(long, requires_all = ["graph", "data"])]
        fit_anm: bool,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = MethodArg::Topo)]
        method: MethodArg,
        /// Rows per estimation block; powers of two suit the Sobol sampler.
        #[arg(long, default_value_t = 4096)]
        batch_size: usize,
        #[arg(long, value_enum, default_value_t = SamplerArg::Owen)]
        sampler: SamplerArg,
        #[arg(long, default_value_t = causal_icc::graph::DEFAULT_ORDERING_CAP)]
        ordering_budget: usize,
        #[arg(long, default_value_t = causal_icc::icc::DEFAULT_PERMUTATIONS)]
        subset_budget: usize,
        /// Zero negative values before normalizing.
        #[arg(long)]
        clamp: bool,
    },
    /// Compare Shapley ICC with quadrature Sobol-Shapley values on test functions.
    SobolCheck {
        #[arg(long, value_enum, default_value_t = FunctionArg::All)]
        function: FunctionArg,
        #[arg(long, default_value_t = causal_icc::sobol::DEFAULT_NODES)]
        nodes: usize,
        #[arg(long, default_value_t = 4096)]
        batch_size: usize,
        #[arg(long, default_value_t = 10)]
        replicates: usize,
    },
    /// Run the property checks; exit 1 if any fails.
    Verify {
        /// Run only these checks.
        #[arg(long, value_enum, value_delimiter = ',')]
        only: Vec<CheckId>,
        /// Replace every Monte Carlo tolerance.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// PGU curves of attribution rankings against PFI and random rankings.
    Pgu {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        /// Attribution report JSON or `{"order": [names]}`; repeatable.
        #[arg(long)]
        ranking: Vec<PathBuf>,
        /// PFI shuffles per feature; 0 skips PFI.
        #[arg(long, default_value_t = 5)]
        pfi_repeats: usize,
        #[arg(long, default_value_t = 20)]
        random: usize,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Training CSV, or the only CSV when `--test` is absent.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Held-out share when `--test` is absent.
    #[arg(long, default_value_t = 0.3)]
    test_fraction: f64,
    #[arg(long, default_value = "Y")]
    target: String,
    /// Integer-valued feature columns, dequantized on load.
    #[arg(long, value_delimiter = ',')]
    integer: Vec<String>,
    #[arg(long, value_enum, default_value_t = TaskArg::Regression)]
    task: TaskArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Regression,
    Binary,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegressorArg {
    Ridge,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Topo,
    Shapley,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    /// Owen-scrambled Sobol points.
    Owen,
    /// Sobol points with a random digital shift.
    Shift,
    /// Unscrambled Sobol points.
    Sobol,
    /// Pseudorandom points.
    Pseudo,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum FunctionArg {
    All,
    Additive,
    Interaction,
    Ishigami,
}

/// Errors with a fixed exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Checks(usize),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Checks(n) => write!(f, "{n} check(s) failed"),
        }
    }
}

impl std::error::Error for Failure {}

const EXIT_CHECK: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => EXIT_USAGE,
                Failure::Checks(_) => EXIT_CHECK,
            };
        }
        let code = if let Some(e) = cause.downcast_ref::<EvalError>() {
            Some(eval_code(e))
        } else if let Some(e) = cause.downcast_ref::<IccError>() {
            Some(icc_code(e))
        } else if let Some(e) = cause.downcast_ref::<EstimatorError>() {
            Some(estimator_code(e))
        } else if let Some(e) = cause.downcast_ref::<LearnError>() {
            Some(learn_code(e))
        } else if let Some(e) = cause.downcast_ref::<PredictorError>() {
            Some(predictor_code(e))
        } else if let Some(e) = cause.downcast_ref::<ScmError>() {
            Some(scm_code(e))
        } else if let Some(e) = cause.downcast_ref::<SobolError>() {
            Some(match e {
                SobolError::QuadratureFailure(_) | SobolError::ZeroTotalVariance => EXIT_NUMERIC,
                _ => EXIT_USAGE,
            })
        } else if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            Some(EXIT_IO)
        } else {
            None
        };
        if let Some(c) = code {
            return c;
        }
    }
    EXIT_USAGE
}

fn predictor_code(e: &PredictorError) -> u8 {
    match e {
        PredictorError::NonFiniteLoss { .. } => EXIT_NUMERIC,
        PredictorError::Io(_) | PredictorError::Parse(_) => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn scm_code(e: &ScmError) -> u8 {
    match e {
        ScmError::NonFiniteValue(_) => EXIT_NUMERIC,
        ScmError::Io(_) | ScmError::Parse(_) => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn estimator_code(e: &EstimatorError) -> u8 {
    match e {
        EstimatorError::DegenerateVariance { .. } | EstimatorError::NonFiniteOutput => EXIT_NUMERIC,
        EstimatorError::Scm(e) => scm_code(e),
        EstimatorError::Predictor(e) => predictor_code(e),
        _ => EXIT_USAGE,
    }
}

fn icc_code(e: &IccError) -> u8 {
    match e {
        IccError::AllZero { .. } => EXIT_NUMERIC,
        IccError::Estimator(e) => estimator_code(e),
        IccError::Io(_) | IccError::Serialize(_) => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn learn_code(e: &LearnError) -> u8 {
    match e {
        LearnError::SingularFit { .. } => EXIT_NUMERIC,
        LearnError::Scm(e) => scm_code(e),
        LearnError::Predictor(e) => predictor_code(e),
        _ => EXIT_USAGE,
    }
}

fn eval_code(e: &EvalError) -> u8 {
    match e {
        EvalError::Parse(_) | EvalError::MissingColumn(_) | EvalError::NonNumeric { .. } | EvalError::Io(_) => EXIT_IO,
        EvalError::Scm(e) => scm_code(e),
        EvalError::Predictor(e) => predictor_code(e),
        _ => EXIT_USAGE,
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Failure::Usage(msg.into()).into()
}

fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Generate { n_train, n_test } => cmd_generate(g, *n_train, *n_test),
        Command::Train {
            data,
            epochs,
            batch_size,
            learning_rate,
            hidden,
        } => cmd_train(g, data, *epochs, *batch_size, *learning_rate, hidden),
        Command::FitScm {
            data,
            graph,
            integer,
            regressor,
            degree,
            lambda,
            holdout,
        } => {
            let kind = match regressor {
                RegressorArg::Ridge => RegressorKind::Ridge {
                    degree: *degree,
                    lambda: *lambda,
                },
                RegressorArg::Mlp => RegressorKind::small_mlp(),
            };
            cmd_fit_scm(g, data, graph, integer, kind, *holdout)
        }
        Command::Icc {
            model,
            scm,
            fit_anm,
            graph,
            data,
            method,
            batch_size,
            sampler,
            ordering_budget,
            subset_budget,
            clamp,
        } => {
            let source = match sampler {
                SamplerArg::Owen => PointSource::Sobol {
                    scramble: Scramble::Owen,
                    seed: g.seed,
                },
                SamplerArg::Shift => PointSource::Sobol {
                    scramble: Scramble::DigitalShift,
                    seed: g.seed,
                },
                SamplerArg::Sobol => PointSource::Sobol {
                    scramble: Scramble::None,
                    seed: g.seed,
                },
                SamplerArg::Pseudo => PointSource::Pseudo { seed: g.seed },
            };
            let cfg = IccConfig {
                batch_size: *batch_size,
                source,
                ordering_budget: *ordering_budget,
                subset_budget: *subset_budget,
            };
            let scm_source = match (scm, fit_anm) {
                (Some(path), false) => ScmSource::File(path),
                (None, true) => ScmSource::Fit {
                    graph: graph.as_deref().ok_or_else(|| usage("--fit-anm needs --graph"))?,
                    data: data.as_deref().ok_or_else(|| usage("--fit-anm needs --data"))?,
                },
                _ => return Err(usage("pass exactly one of --scm and --fit-anm")),
            };
            cmd_icc(g, model, scm_source, *method, &cfg, *clamp)
        }
        Command::SobolCheck {
            function,
            nodes,
            batch_size,
            replicates,
        } => cmd_sobol_check(g, *function, *nodes, *batch_size, *replicates),
        Command::Verify { only, tolerance } => cmd_verify(g, only, *tolerance),
        Command::Pgu {
            data,
            model,
            ranking,
            pfi_repeats,
            random,
        } => cmd_pgu(g, data, model, ranking, *pfi_repeats, *random),
    }
}

/// Refuses to replace an existing file unless `--force`.
fn check_writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!("{} exists; pass --force to overwrite", path.display()),
        )
        .into());
    }
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn output_or(g: &Global, default: &str) -> PathBuf {
    g.output.clone().unwrap_or_else(|| PathBuf::from(default))
}

/// JSON at `path` and CSV next to it.
fn json_and_csv_paths(path: &Path) -> Result<(PathBuf, PathBuf)> {
    let csv = path.with_extension("csv");
    if csv == path {
        return Err(usage("--output must not end in .csv; the CSV is written next to the JSON"));
    }
    Ok((path.to_path_buf(), csv))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn load_graph(path: &Path) -> Result<CausalGraph> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: GraphFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    CausalGraph::try_from(&file).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<Mlp<f64>> {
    Mlp::load_weights(path).with_context(|| format!("loading model {}", path.display()))
}

fn cmd_generate(g: &Global, n_train: usize, n_test: usize) -> Result<()> {
    let dir = output_or(g, "data");
    let (ds, scm) = eval::generate_synthetic(n_train, n_test, g.seed)?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let files = ["train.csv", "test.csv", "graph.json", "scm.json"].map(|f| dir.join(f));
    for f in &files {
        check_writable(f, g.force)?;
    }
    let mut train = Vec::new();
    ds.write_csv(ds.train_indices(), "Y", &mut train)?;
    let mut test = Vec::new();
    ds.write_csv(ds.test_indices(), "Y", &mut test)?;
    write_file(&files[0], train)?;
    write_file(&files[1], test)?;
    write_file(&files[2], to_json(&GraphFile::from(scm.graph()))?)?;
    write_file(&files[3], to_json(&scm.to_file())?)?;
    println!("wrote {} training and {} test rows to {}", n_train, n_test, dir.display());
    Ok(())
}

fn load_dataset(args: &DataArgs, seed: u64) -> Result<Dataset<f64>> {
    let task = match args.task {
        TaskArg::Regression => Task::Regression,
        TaskArg::Binary => Task::Binary,
    };
    let schema = CsvSchema::from_header(&args.data, &args.target, &args.integer, task)
        .with_context(|| format!("reading {}", args.data.display()))?;
    match &args.test {
        Some(test) => load_csv_split(&args.data, test, &schema, None, seed),
        None => load_csv(&args.data, &schema, None, args.test_fraction, seed),
    }
    .context("loading data")
}

fn cmd_train(
    g: &Global,
    data: &DataArgs,
    epochs: usize,
    batch_size: usize,
    learning_rate: Option<f64>,
    hidden: &[usize],
) -> Result<()> {
    let out = output_or(g, "model.json");
    check_writable(&out, g.force)?;
    let ds = load_dataset(data, g.seed)?;
    let base = match ds.task() {
        Task::Regression => TrainConfig::default(),
        Task::Binary => TrainConfig::classification(),
    };
    let cfg = TrainConfig {
        epochs,
        batch_size,
        learning_rate: learning_rate.unwrap_or(base.learning_rate),
        hidden: hidden.to_vec(),
        seed: g.seed,
        ..base
    };
    if cfg.loss == Loss::CrossEntropy && ds.y().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(usage("binary task needs 0/1 targets"));
    }
    let fit = fit_model(&ds, &cfg)?;
    fit.model.save_weights(&out).with_context(|| format!("writing {}", out.display()))?;
    println!("train rmse {}", fit.train_rmse);
    println!("test rmse {}", fit.test_rmse);
    if let Some(acc) = fit.test_accuracy {
        println!("test accuracy {acc}");
    }
    Ok(())
}

fn graph_columns(graph: &CausalGraph, integer: &[String]) -> Result<Vec<ColumnSpec>> {
    if let Some(unknown) = integer.iter().find(|n| graph.index_of(n).is_none()) {
        return Err(usage(format!("--integer column {unknown:?} is not a graph node")));
    }
    Ok(graph
        .names()
        .iter()
        .map(|n| ColumnSpec {
            name: n.clone(),
            integer: integer.contains(n),
        })
        .collect())
}

fn cmd_fit_scm(g: &Global, data: &Path, graph: &Path, integer: &[String], kind: RegressorKind, holdout: f64) -> Result<()> {
    let out = output_or(g, "scm_fitted.json");
    check_writable(&out, g.force)?;
    if !(0.0..1.0).contains(&holdout) {
        return Err(usage("--holdout must lie in [0, 1)"));
    }
    let graph = load_graph(graph)?;
    let x = load_feature_matrix(data, &graph_columns(&graph, integer)?, g.seed)
        .with_context(|| format!("reading {}", data.display()))?;
    let (train, test) = split_rows(x.view(), holdout, g.seed);
    let opts = FitOptions {
        regressor: kind,
        seed: g.seed,
        ..FitOptions::default()
    };
    let fit = fit_anm(train.view(), &graph, &opts)?;
    if test.nrows() > 0 {
        let quality = fit_quality(&fit, test.view(), g.seed)?;
        println!("node,train_r2,holdout_r2,dependence,marginal_distance,flagged");
        for (n, q) in fit.nodes().iter().zip(&quality.nodes) {
            println!(
                "{},{},{},{},{},{}",
                n.node, n.r2, q.holdout_r2, q.dependence, q.marginal_distance, q.flagged
            );
        }
        if !quality.flagged().is_empty() {
            eprintln!("warning: residuals depend on parents for some nodes; the additive-noise fit is doubtful there");
        }
    }
    write_file(&out, to_json(&fit.scm().to_file())?)?;
    Ok(())
}

enum ScmSource<'a> {
    File(&'a Path),
    Fit { graph: &'a Path, data: &'a Path },
}

fn cmd_icc(g: &Global, model: &Path, scm: ScmSource<'_>, method: MethodArg, cfg: &IccConfig, clamp: bool) -> Result<()> {
    let (json_path, csv_path) = json_and_csv_paths(&output_or(g, "icc_report.json"))?;
    check_writable(&json_path, g.force)?;
    check_writable(&csv_path, g.force)?;
    if !cfg.batch_size.is_power_of_two() {
        eprintln!("warning: batch size {} is not a power of two", cfg.batch_size);
    }
    let model = load_model(model)?;
    let scm = match scm {
        ScmSource::File(path) => Scm::<f64>::load(path).with_context(|| format!("loading {}", path.display()))?,
        ScmSource::Fit { graph, data } => {
            let graph = load_graph(graph)?;
            let x = load_feature_matrix(data, &graph_columns(&graph, &[])?, g.seed)
                .with_context(|| format!("reading {}", data.display()))?;
            fit_anm(
                x.view(),
                &graph,
                &FitOptions {
                    seed: g.seed,
                    ..FitOptions::default()
                },
            )?
            .into_scm()
        }
    };
    if scm.len() != model.n_features() {
        return Err(usage(format!(
            "SCM has {} features, model reads {}",
            scm.len(),
            model.n_features()
        )));
    }
    let raw = match method {
        MethodArg::Topo => icc_topological(&scm, &model, cfg)?,
        MethodArg::Shapley => icc_shapley(&scm, &model, cfg)?,
    };
    let report = normalize_and_clamp(&raw, clamp)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_file(&json_path, report.to_json()? + "\n")?;
    write_file(&csv_path, csv)?;
    for f in &report.features {
        println!("{}\t{}\t{}", f.name, f.icc_raw, f.icc_normalized.unwrap_or(f64::NAN));
    }
    println!("efficiency residual {}", report.efficiency_residual);
    Ok(())
}

fn cmd_sobol_check(g: &Global, function: FunctionArg, nodes: usize, batch_size: usize, replicates: usize) -> Result<()> {
    use causal_icc::sobol::{TestFunction, ISHIGAMI};
    if replicates < 2 {
        return Err(usage("--replicates must be at least 2 to form a standard error"));
    }
    let functions: Vec<TestFunction> = [
        (FunctionArg::Additive, TestFunction::Additive),
        (FunctionArg::Interaction, TestFunction::Interaction),
        (FunctionArg::Ishigami, ISHIGAMI),
    ]
    .into_iter()
    .filter(|(a, _)| function == FunctionArg::All || function == *a)
    .map(|(_, f)| f)
    .collect();
    let mut measurements = Vec::new();
    for (k, f) in functions.iter().enumerate() {
        measurements.extend(checks::sobol_comparison(
            *f,
            nodes,
            batch_size,
            replicates,
            derive_seed(g.seed, k as u64),
        )?);
    }
    let result = CheckResult {
        check: CheckId::SobolEquivalence,
        measurements,
    };
    report_checks(g, &[result])
}

fn cmd_verify(g: &Global, only: &[CheckId], tolerance: Option<f64>) -> Result<()> {
    if let Some(t) = tolerance {
        if t.is_nan() || t < 0.0 {
            return Err(usage("--tolerance must be non-negative"));
        }
    }
    let selected: Vec<CheckId> = if only.is_empty() {
        CheckId::ALL.to_vec()
    } else {
        let mut v = only.to_vec();
        v.sort();
        v.dedup();
        v
    };
    let opts = CheckOptions {
        seed: g.seed,
        tolerance,
    };
    let results = selected
        .iter()
        .map(|&c| checks::run(c, &opts).with_context(|| format!("check {c}")))
        .collect::<Result<Vec<_>>>()?;
    report_checks(g, &results)
}

fn report_checks(g: &Global, results: &[CheckResult]) -> Result<()> {
    if let Some(out) = &g.output {
        check_writable(out, g.force)?;
    }
    for r in results {
        for m in &r.measurements {
            println!(
                "{} {}: {} = {} ({} {})",
                if m.passed() { "PASS" } else { "FAIL" },
                r.check,
                m.label,
                m.observed,
                if m.inclusive { "<=" } else { "<" },
                m.tolerance
            );
        }
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} of {} checks passed", results.len() - failed, results.len());
    if let Some(out) = &g.output {
        write_file(out, to_json(&results)?)?;
    }
    if failed > 0 {
        return Err(Failure::Checks(failed).into());
    }
    Ok(())
}

fn read_ranking(path: &Path, names: &[String]) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if value.get("features").is_some() {
        let report = AttributionReport::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
        let all = report.names();
        return Ok(report.ranking().into_iter().map(|i| all[i].to_owned()).collect());
    }
    match value.get("order") {
        Some(serde_json::Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_owned)
                    .ok_or_else(|| anyhow!("{}: order entries must be feature names", path.display()))
            })
            .collect(),
        _ => bail!(
            "{}: expected an attribution report or {{\"order\": [...]}} over {:?}",
            path.display(),
            names
        ),
    }
}

fn cmd_pgu(g: &Global, data: &DataArgs, model: &Path, rankings: &[PathBuf], pfi_repeats: usize, random: usize) -> Result<()> {
    let (json_path, csv_path) = json_and_csv_paths(&output_or(g, "pgu.json"))?;
    check_writable(&json_path, g.force)?;
    check_writable(&csv_path, g.force)?;
    let ds = load_dataset(data, g.seed)?;
    let model = load_model(model)?;
    if model.n_features() != ds.n_features() {
        return Err(usage(format!(
            "model reads {} features, data has {}",
            model.n_features(),
            ds.n_features()
        )));
    }
    let test_x = ds.test_x();
    let mut methods: BTreeMap<String, usize> = BTreeMap::new();
    let mut list = Vec::new();
    for path in rankings {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("ranking").to_owned();
        let n = methods.entry(stem.clone()).or_insert(0);
        *n += 1;
        let method = if *n == 1 { stem } else { format!("{stem}-{n}") };
        let order = read_ranking(path, ds.names())?;
        list.push(Ranking::from_names(method, &order, ds.names()).map_err(|e| usage(e.to_string()))?);
    }
    if pfi_repeats > 0 {
        let metric = match ds.task() {
            Task::Regression => PfiMetric::Rmse,
            Task::Binary => PfiMetric::F1Score,
        };
        let r = pfi(&model, test_x.view(), &ds.test_y(), metric, pfi_repeats, derive_seed(g.seed, checks::PFI_STREAM))?;
        list.push(r.ranking);
    }
    let report = ComparisonReport::build(
        &model,
        test_x.view(),
        &ds.baseline(),
        ds.names(),
        &list,
        random,
        derive_seed(g.seed, checks::RANDOM_RANKING_STREAM),
    )?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_file(&json_path, report.to_json() + "\n")?;
    write_file(&csv_path, csv)?;
    for (method, curve) in &report.pgu {
        println!("{method}\taggregate {}", curve.aggregate);
    }
    if let Some(r) = &report.random {
        println!("random ({}):\tmean aggregate {}", r.count, r.mean_aggregate);
    }
    Ok(())
}
