use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use kernel_surrogate::cli_io::{
    self, dataset_sha256, load_model, parse_kernel, read_matrix, save_model, write_matrix_csv,
    GridRange, ModelFile, RunConfig, TrainingMetadata,
};
use kernel_surrogate::inverse::{estimate_batch, Bounds, OptimizerSettings};
use kernel_surrogate::selection::{
    k_fold_cv, split_dataset, test_errors, validate, ErrorKind, GridPoint, Method, ParameterGrid,
    SelectionOptions, SplitSizes, SplitSpec, Trainer,
};
use kernel_surrogate::synthetic;
use kernel_surrogate::vkoga::{greedy_run, GreedyConfig};
use kernel_surrogate::{Dataset, Error, OutputScaler};

#[derive(Parser)]
#[command(name = "ksurr", version, about = "Sparse kernel surrogate models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model with fixed hyperparameters on the whole dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 1e-10)]
        lambda: f64,
        #[arg(long, default_value_t = 1e-6)]
        epsilon: f64,
    },
    /// Split, select hyperparameters by k-fold cross validation (or on a
    /// validation split), retrain and report test errors.
    Cv {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grids: Grids,
    },
    /// Evaluate a saved model on the inputs of a CSV file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// d input columns, optionally followed by q truth columns.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        header: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Estimate the inputs that produce given outputs.
    Estimate {
        #[arg(long)]
        model: PathBuf,
        /// q target columns, or d true inputs followed by q targets.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        header: bool,
        /// Relative noise level added to every target.
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated initial guess; zero by default.
        #[arg(long, allow_hyphen_values = true)]
        x0: Option<String>,
        /// Comma-separated lower box bounds, used together with --upper.
        #[arg(long, allow_hyphen_values = true)]
        lower: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        upper: Option<String>,
        #[arg(long, default_value_t = 5000)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-8)]
        grad_tol: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a greedy fit and export its selection trace.
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
    },
    /// Write the synthetic reference dataset as CSV.
    Generate {
        #[arg(long, default_value_t = synthetic::DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = synthetic::DEFAULT_SAMPLES)]
        n: usize,
        #[arg(long, default_value = "synthetic.csv")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use the synthetic reference dataset; row 0 (the origin) is pinned
    /// into training unless --pin is given.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    header: bool,
    /// interp, vkoga-p, vkoga-f, vkoga-fp or svr.
    #[arg(long)]
    method: Option<String>,
    /// gaussian, wendland0, wendland2, brownian-bridge or poly:a:p.
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tol_p: Option<f64>,
    #[arg(long)]
    tol_f: Option<f64>,
    #[arg(long)]
    tol_kkt: Option<f64>,
    #[arg(long)]
    max_points: Option<usize>,
    #[arg(long)]
    svr_max_iter: Option<usize>,
    /// Leave wall-clock timings out of every artifact.
    #[arg(long)]
    no_timings: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Grids {
    /// vmin:vmax:count, logarithmically spaced, or a single value.
    #[arg(long)]
    gamma_grid: Option<GridRange>,
    #[arg(long)]
    lambda_grid: Option<GridRange>,
    #[arg(long)]
    eps_grid: Option<GridRange>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    test_count: Option<usize>,
    /// Hold out this fraction for single-split validation instead of k-fold.
    #[arg(long)]
    validation_fraction: Option<f64>,
    /// Row index forced into the training set; repeatable.
    #[arg(long = "pin")]
    pinned: Vec<usize>,
    /// max or rmse.
    #[arg(long)]
    error: Option<String>,
    /// Repetitions of the test-set evaluation behind the online timing.
    #[arg(long)]
    online_repetitions: Option<usize>,
}

impl Common {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_toml_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone().into();
                }
            )*};
        }
        take!(
            method,
            kernel,
            seed,
            tol_p,
            tol_f,
            tol_kkt,
            svr_max_iter,
            out
        );
        if self.data.is_some() {
            cfg.data = self.data.clone();
        }
        if self.d.is_some() {
            cfg.d = self.d;
        }
        if self.q.is_some() {
            cfg.q = self.q;
        }
        if self.max_points.is_some() {
            cfg.max_points = self.max_points;
        }
        cfg.synthetic |= self.synthetic;
        cfg.header |= self.header;
        cfg.timings &= !self.no_timings;
        Ok(cfg)
    }
}

fn load_data(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    if cfg.synthetic {
        return Ok(synthetic::spine_like(synthetic::DEFAULT_SEED));
    }
    let Some(path) = &cfg.data else {
        bail!(Error::InvalidParameter(
            "either --data or --synthetic is required".into()
        ));
    };
    let (Some(d), Some(q)) = (cfg.d, cfg.q) else {
        bail!(Error::InvalidParameter(
            "--d and --q are required with --data".into()
        ));
    };
    cli_io::load_csv(path, d, q, cfg.header).with_context(|| format!("reading {}", path.display()))
}

fn trainer(cfg: &RunConfig) -> anyhow::Result<Trainer> {
    let method: Method = cfg.method.parse()?;
    let mut t = Trainer::new(method, parse_kernel(&cfg.kernel)?);
    t.tol_p = cfg.tol_p;
    t.tol_f = cfg.tol_f;
    t.tol_kkt = cfg.tol_kkt;
    t.max_points = cfg.max_points.unwrap_or(usize::MAX);
    t.svr_max_iter = cfg.svr_max_iter;
    t.svr_final_max_iter = cfg
        .svr_max_iter
        .max(kernel_surrogate::svr::DEFAULT_MAX_ITER);
    Ok(t)
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(common: &Common, gamma: f64, lambda: f64, epsilon: f64) -> anyhow::Result<()> {
    let cfg = common.resolve()?;
    let data = load_data(&cfg)?;
    let mut t = trainer(&cfg)?;
    t.svr_final_max_iter = cfg.svr_max_iter;
    let scaler = OutputScaler::fit(&data.outputs);
    let scaled = data.with_outputs(scaler.scale(&data.outputs)?)?;
    let point = GridPoint {
        gamma,
        lambda,
        epsilon: (t.method == Method::Svr).then_some(epsilon),
    };
    let started = Instant::now();
    let mut fitted = t.fit(&scaled, &point)?;
    let offline = started.elapsed().as_secs_f64();
    fitted.model.output_scaler = Some(scaler);
    let meta = TrainingMetadata {
        seed: None,
        dataset_sha256: Some(dataset_sha256(&data)),
        hyperparameters: point,
        n_centers: fitted.model.n_centers(),
        offline_seconds: cfg.timings.then_some(offline),
    };
    create_dir(&cfg.out)?;
    let path = cfg.out.join("model.json");
    save_model(
        &path,
        &ModelFile::new(&fitted.model, t.method, point.epsilon, meta),
    )?;
    println!(
        "wrote {} (N = {})",
        path.display(),
        fitted.model.n_centers()
    );
    Ok(())
}

fn cmd_cv(common: &Common, grids: &Grids) -> anyhow::Result<()> {
    let mut cfg = common.resolve()?;
    if let Some(g) = &grids.gamma_grid {
        cfg.gamma_grid = g.clone();
    }
    if let Some(g) = &grids.lambda_grid {
        cfg.lambda_grid = g.clone();
    }
    if let Some(g) = &grids.eps_grid {
        cfg.eps_grid = g.clone();
    }
    if let Some(k) = grids.k {
        cfg.k = k;
    }
    if let Some(f) = grids.test_fraction {
        cfg.test_fraction = f;
    }
    if let Some(f) = grids.validation_fraction {
        cfg.validation_fraction = f;
    }
    if grids.test_count.is_some() {
        cfg.test_count = grids.test_count;
    }
    if !grids.pinned.is_empty() {
        cfg.pinned = grids.pinned.clone();
    }
    if let Some(e) = &grids.error {
        cfg.error = e.clone();
    }
    if let Some(r) = grids.online_repetitions {
        cfg.online_repetitions = r;
    }
    if cfg.synthetic && cfg.pinned.is_empty() {
        cfg.pinned = vec![0];
    }

    let data = load_data(&cfg)?;
    let t = trainer(&cfg)?;
    let grid = ParameterGrid {
        gamma: cfg.gamma_grid.values()?,
        lambda: cfg.lambda_grid.values()?,
        epsilon: (t.method == Method::Svr)
            .then(|| cfg.eps_grid.values())
            .transpose()?,
    };
    let n = data.len();
    let sizes = match cfg.test_count {
        Some(test) => {
            let validation = (cfg.validation_fraction * n as f64).round() as usize;
            SplitSizes::Counts {
                train: n.checked_sub(test + validation).ok_or_else(|| {
                    Error::InvalidParameter("test and validation exceed the dataset".into())
                })?,
                validation,
                test,
            }
        }
        None => SplitSizes::Fractions {
            validation: cfg.validation_fraction,
            test: cfg.test_fraction,
        },
    };
    let spec = SplitSpec {
        seed: cfg.seed,
        sizes,
        pinned: cfg.pinned.clone(),
    };
    let split = split_dataset(&data, &spec)?;
    let options = SelectionOptions {
        kind: cfg.error.parse::<ErrorKind>()?,
        timings: cfg.timings,
        online_repetitions: cfg.online_repetitions,
        ..SelectionOptions::default()
    };
    let sel = match &split.validation {
        Some(v) => validate(&grid, &t, &split.train, v, split.test.as_ref(), &options)?,
        None => k_fold_cv(
            &grid,
            &t,
            &split.train,
            split.test.as_ref(),
            cfg.k,
            &options,
        )?,
    };

    create_dir(&cfg.out)?;
    write_json(&cfg.out.join("report.json"), &sel.report)?;
    let meta = TrainingMetadata {
        seed: Some(cfg.seed),
        dataset_sha256: Some(dataset_sha256(&data)),
        hyperparameters: sel.report.selected,
        n_centers: sel.report.n_centers,
        offline_seconds: sel.report.timings.map(|t| t.offline_seconds),
    };
    let model = ModelFile::new(&sel.model, t.method, sel.report.selected.epsilon, meta);
    save_model(&cfg.out.join("model.json"), &model)?;
    let r = &sel.report;
    print!(
        "selected gamma = {:e}, lambda = {:e}",
        r.selected.gamma, r.selected.lambda
    );
    if let Some(e) = r.selected.epsilon {
        print!(", epsilon = {e:e}");
    }
    println!(", N = {}", r.n_centers);
    if let Some(e) = &r.test_errors {
        println!(
            "test: E_max = {:e}, E_RMSE = {:e}, E_max_rel = {}",
            e.max,
            e.rmse,
            e.max_rel.map_or("n/a".into(), |v| format!("{v:e}"))
        );
    }
    println!("wrote {}", cfg.out.display());
    Ok(())
}

fn load_surrogate(path: &Path) -> anyhow::Result<(ModelFile, kernel_surrogate::Surrogate)> {
    let file = load_model(path).with_context(|| format!("reading {}", path.display()))?;
    let model = file.surrogate()?;
    Ok((file, model))
}

fn cmd_predict(model: &Path, data: &Path, header: bool, out: &Path) -> anyhow::Result<()> {
    let (_, m) = load_surrogate(model)?;
    let (d, q) = (m.input_dim(), m.output_dim());
    let table = read_matrix(fs::File::open(data)?, None, header)?;
    let with_truth = match table.ncols() {
        w if w == d => false,
        w if w == d + q => true,
        w => bail!(Error::Csv {
            line: 1,
            message: format!("expected {d} or {} columns, found {w}", d + q)
        }),
    };
    let inputs = table.columns(0, d).into_owned();
    let pred = m.evaluate(&inputs)?;
    create_dir(out)?;
    let names: Vec<String> = (1..=q).map(|j| format!("y{j}")).collect();
    write_matrix_csv(&out.join("predictions.csv"), &names, &pred)?;
    if with_truth {
        let truth = table.columns(d, q).into_owned();
        let errors = test_errors(&pred, &truth)?;
        write_json(&out.join("errors.json"), &errors)?;
        let pairs = DMatrix::from_fn(truth.nrows(), 2, |i, j| {
            if j == 0 {
                truth.row(i).norm()
            } else {
                (pred.row(i) - truth.row(i)).norm()
            }
        });
        write_matrix_csv(
            &out.join("error_vs_magnitude.csv"),
            &["output_norm".into(), "abs_error".into()],
            &pairs,
        )?;
        println!(
            "E_max = {:e}, E_RMSE = {:e}, E_max_rel = {}",
            errors.max,
            errors.rmse,
            errors.max_rel.map_or("n/a".into(), |v| format!("{v:e}"))
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn parse_list(s: &str, d: usize, name: &str) -> anyhow::Result<Vec<f64>> {
    let v = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| {
            Error::InvalidParameter(format!("--{name} is not a comma-separated list of numbers"))
        })?;
    if v.len() != d {
        bail!(Error::DimensionMismatch {
            expected: d,
            found: v.len()
        });
    }
    Ok(v)
}

#[allow(clippy::too_many_arguments)]
fn cmd_estimate(
    model: &Path,
    data: &Path,
    header: bool,
    eta: f64,
    seed: u64,
    x0: Option<&str>,
    bounds: (Option<&str>, Option<&str>),
    settings: OptimizerSettings,
    out: &Path,
) -> anyhow::Result<()> {
    let (_, m) = load_surrogate(model)?;
    let (d, q) = (m.input_dim(), m.output_dim());
    let table = read_matrix(fs::File::open(data)?, None, header)?;
    let (truth, targets) = match table.ncols() {
        w if w == q => (None, table.clone()),
        w if w == d + q => (
            Some(table.columns(0, d).into_owned()),
            table.columns(d, q).into_owned(),
        ),
        w => bail!(Error::Csv {
            line: 1,
            message: format!("expected {q} or {} columns, found {w}", d + q)
        }),
    };
    let x0 = match x0 {
        Some(s) => parse_list(s, d, "x0")?,
        None => vec![0.0; d],
    };
    let bounds = match bounds {
        (Some(lo), Some(hi)) => Some(Bounds::new(
            parse_list(lo, d, "lower")?,
            parse_list(hi, d, "upper")?,
        )?),
        (None, None) => None,
        _ => bail!(Error::InvalidParameter(
            "--lower and --upper go together".into()
        )),
    };
    let records = estimate_batch(
        &m,
        &targets,
        truth.as_ref(),
        &x0,
        eta,
        seed,
        bounds.as_ref(),
        &settings,
    )?;
    create_dir(out)?;
    let path = out.join("estimates.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec![
        "target_norm".to_string(),
        "input_error".into(),
        "final_cost".into(),
        "iterations".into(),
        "converged".into(),
    ];
    header.extend((1..=d).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for r in &records {
        let mut row = vec![
            r.target_norm.to_string(),
            r.input_error.map_or(String::new(), |v| v.to_string()),
            r.final_cost.to_string(),
            r.iterations.to_string(),
            (r.converged as u8).to_string(),
        ];
        row.extend(r.estimate.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    let worst = records.iter().map(|r| r.final_cost).fold(0.0, f64::max);
    println!(
        "{} targets, largest final cost {worst:e}; wrote {}",
        records.len(),
        path.display()
    );
    Ok(())
}

fn cmd_trace(common: &Common, gamma: f64, lambda: f64) -> anyhow::Result<()> {
    let cfg = common.resolve()?;
    let data = load_data(&cfg)?;
    let t = trainer(&cfg)?;
    let Method::Vkoga { rule } = t.method else {
        bail!(Error::InvalidParameter(
            "trace needs a vkoga-* method".into()
        ));
    };
    let scaled = data.with_outputs(OutputScaler::fit(&data.outputs).scale(&data.outputs)?)?;
    let config = GreedyConfig {
        rule,
        tol_p: cfg.tol_p,
        tol_f: cfg.tol_f,
        max_points: cfg.max_points.unwrap_or(usize::MAX),
        lambda,
    };
    let (_, trace) = greedy_run(&scaled, &t.kernel(gamma)?, &config)?;
    create_dir(&cfg.out)?;
    let path = cfg.out.join("trace.csv");
    fs::write(&path, trace.to_csv())?;
    println!(
        "{} points, stopped on {:?}; wrote {}",
        trace.entries.len(),
        trace.termination,
        path.display()
    );
    Ok(())
}

fn cmd_generate(seed: u64, n: usize, out: &Path) -> anyhow::Result<()> {
    if n == 0 {
        bail!(Error::InvalidParameter("n must be at least 1".into()));
    }
    let data = synthetic::BumpMap::new(seed, synthetic::DEFAULT_BUMPS).sample(n, seed);
    cli_io::write_dataset_csv(out, &data)?;
    println!("wrote {} ({} rows, d = 3, q = 3, header)", out.display(), n);
    Ok(())
}

/// Failure class and exit code of an error chain. Usage errors exit with 2
/// through clap.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io(_) => ("i/o", 3),
                Error::Csv { .. }
                | Error::Schema(_)
                | Error::Json(_)
                | Error::FormatVersion { .. } => ("parse", 4),
                Error::NotConverged(_)
                | Error::SingularSystem { .. }
                | Error::DegeneratePivot { .. } => ("convergence", 5),
                _ => ("config", 6),
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some()
            || cause.downcast_ref::<csv::Error>().is_some()
        {
            return ("i/o", 3);
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return ("parse", 4);
        }
    }
    ("error", 1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train {
            common,
            gamma,
            lambda,
            epsilon,
        } => cmd_train(common, *gamma, *lambda, *epsilon),
        Command::Cv { common, grids } => cmd_cv(common, grids),
        Command::Predict {
            model,
            data,
            header,
            out,
        } => cmd_predict(model, data, *header, out),
        Command::Estimate {
            model,
            data,
            header,
            eta,
            seed,
            x0,
            lower,
            upper,
            max_iter,
            grad_tol,
            out,
        } => cmd_estimate(
            model,
            data,
            *header,
            *eta,
            *seed,
            x0.as_deref(),
            (lower.as_deref(), upper.as_deref()),
            OptimizerSettings {
                max_iter: *max_iter,
                grad_tol: *grad_tol,
                ..OptimizerSettings::default()
            },
            out,
        ),
        Command::Trace {
            common,
            gamma,
            lambda,
        } => cmd_trace(common, *gamma, *lambda),
        Command::Generate { seed, n, out } => cmd_generate(*seed, *n, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (class, code) = classify(&e);
            eprintln!(
                "ksurr: {class} error: {}",
                format!("{e:#}").replace('\n', " ")
            );
            ExitCode::from(code)
        }
    }
}
