use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use adrf::estimators::fit_methods;
use adrf::fsw::{median_distance, pairwise_distances};
use adrf::io::{fmt_num, read_curves, write_curves};
use adrf::simlab::{run_benchmark_with_progress, true_slope};
use adrf::tuning::{select_tuning_with, CvData};
use adrf::{
    adrf_eval, ate, generate, load_dataset, read_fit, write_dataset, write_fit, AdrfError, BandwidthGrid,
    BenchmarkConfig, CvConfig, DatasetFiles, Folds, Method, ModelId, RhoFamily, SimModel,
};
use clap::{Args, Parser, Subcommand};

type CliResult<T> = Result<T, AdrfError>;

#[derive(Parser)]
#[command(name = "adrf", version, about = "Average dose-response functional estimation for functional treatments")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "ADRF_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulated dataset and write it to files.
    Simulate(SimulateArgs),
    /// Fit one estimator and write the fit.
    Estimate(EstimateArgs),
    /// Print the cross-validation loss table and the selected tuning.
    Cv(CvArgs),
    /// Evaluate a saved fit at each curve of a functional file.
    Adrf(AdrfArgs),
    /// Treatment effect between paired curves under a saved fit.
    Ate(AteArgs),
    /// Monte Carlo benchmark over the simulation designs.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation design: i, ii, iii or iv.
    #[arg(long, default_value = "i")]
    model: ModelId,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Grid points on [0, 1].
    #[arg(long, default_value_t = 101)]
    grid_len: usize,
    /// Output functional file (grid row, then one curve per row).
    #[arg(long)]
    curves: PathBuf,
    /// Output tabular file (covariates and outcome, with header).
    #[arg(long)]
    table: PathBuf,
    /// Optionally write the true slope as a one-curve functional file.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Draw covariates independently of the treatment.
    #[arg(long)]
    unconfounded: bool,
    /// Turn off covariate and outcome noise.
    #[arg(long)]
    noiseless: bool,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Functional file: grid row, then one curve per row.
    #[arg(long)]
    curves: PathBuf,
    /// Tabular file with header, one subject per row.
    #[arg(long)]
    table: PathBuf,
    /// Outcome column name.
    #[arg(long, default_value = "y")]
    outcome: String,
    /// Covariate column names (default: every other column).
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
}

impl DataArgs {
    fn load(&self) -> CliResult<adrf::Dataset64> {
        load_dataset(&DatasetFiles {
            functional: self.curves.clone(),
            tabular: self.table.clone(),
            outcome: self.outcome.clone(),
            covariates: self.covariates.clone(),
        })
    }
}

#[derive(Args, Clone)]
struct CvOptions {
    /// Number of folds.
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Seed of the fold assignment.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bandwidth multipliers of the median pairwise curve distance.
    #[arg(long, value_delimiter = ',', conflicts_with = "h_grid")]
    h_mult: Option<Vec<f64>>,
    /// Absolute bandwidth candidates.
    #[arg(long, value_delimiter = ',')]
    h_grid: Option<Vec<f64>>,
    /// Sieve size candidates (default p+1, 2p+1, 3p+1).
    #[arg(long, value_delimiter = ',')]
    k_grid: Option<Vec<usize>>,
    /// Truncation candidates.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
    q_grid: Vec<usize>,
    /// Dual family: et, el or cu.
    #[arg(long, default_value = "et")]
    rho: RhoFamily,
}

impl CvOptions {
    fn config(&self) -> CvConfig<f64> {
        let mut c = CvConfig {
            folds: self.folds,
            k_grid: self.k_grid.clone(),
            q_grid: self.q_grid.clone(),
            seed: self.seed,
            rho: self.rho,
            ..CvConfig::default()
        };
        if let Some(h) = &self.h_grid {
            c.h_grid = BandwidthGrid::Absolute(h.clone());
        } else if let Some(m) = &self.h_mult {
            c.h_grid = BandwidthGrid::MedianMultiples(m.clone());
        }
        c
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// naive, fsw, or or dr.
    #[arg(long, default_value = "fsw")]
    method: Method,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    /// Select (h, k, q) by cross-validation instead of explicit values.
    #[arg(long, conflicts_with_all = ["h", "k", "q"])]
    cv: bool,
    #[command(flatten)]
    cv_options: CvOptions,
    /// Output fit file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Criterion: fsw, or, dr or naive.
    #[arg(long, default_value = "fsw")]
    method: Method,
    #[command(flatten)]
    cv_options: CvOptions,
}

#[derive(Args)]
struct AdrfArgs {
    /// Fit file written by `estimate`.
    #[arg(long)]
    fit: PathBuf,
    /// Functional file of treatment curves on the fit's grid.
    #[arg(long)]
    curves: PathBuf,
}

#[derive(Args)]
struct AteArgs {
    #[arg(long)]
    fit: PathBuf,
    /// Functional file of z1 curves.
    #[arg(long)]
    z1: PathBuf,
    /// Functional file of z2 curves (one curve is paired with every z1).
    #[arg(long)]
    z2: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long, value_delimiter = ',', default_value = "i,ii,iii,iv")]
    models: Vec<ModelId>,
    #[arg(long, value_delimiter = ',', default_value = "200,500")]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "fsw,or,dr,naive")]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 200)]
    reps: usize,
    /// Base seed; replication r uses seed + r.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print a progress line per finished replication to stderr.
    #[arg(long)]
    progress: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads;
    match run(cli, threads) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.category());
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli, threads: Option<usize>) -> CliResult<()> {
    if let Some(t) = threads {
        if t == 0 {
            return Err(AdrfError::Parameter("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| AdrfError::Parameter(e.to_string()))?;
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Simulate(a) => simulate(a, &mut out),
        Command::Estimate(a) => estimate(a, &mut out),
        Command::Cv(a) => cv(a, &mut out),
        Command::Adrf(a) => adrf_cmd(a, &mut out),
        Command::Ate(a) => ate_cmd(a, &mut out),
        Command::Benchmark(a) => benchmark(a, &mut out),
    }
}

fn simulate(a: SimulateArgs, out: &mut impl Write) -> CliResult<()> {
    let mut model = SimModel::new(a.model, a.n, a.seed);
    model.grid_len = a.grid_len;
    if a.unconfounded {
        model = model.unconfounded();
    }
    if a.noiseless {
        model = model.noiseless();
    }
    let sim = generate(&model)?;
    write_dataset(&sim.dataset, &a.curves, &a.table)?;
    if let Some(path) = &a.truth {
        write_curves(path, &[true_slope(sim.dataset.grid())])?;
    }
    writeln!(
        out,
        "simulated model {} with n = {}, seed = {}, p = {}",
        a.model,
        a.n,
        a.seed,
        sim.dataset.p()
    )?;
    Ok(())
}

fn estimate(a: EstimateArgs, out: &mut impl Write) -> CliResult<()> {
    let data = a.data.load()?;
    let distances = pairwise_distances(data.curves())?;
    let (h, k, q) = if a.cv {
        let config = a.cv_options.config();
        let folds = Folds::new(data.n(), config.folds, config.seed)?;
        let q_max = config.q_grid.iter().copied().max().unwrap_or(1);
        let cv = CvData::with_distances(&data, folds, q_max, distances.clone())?;
        let criterion = if a.method == Method::Dr { Method::Dr } else if a.method.needs_weights() { Method::Fsw } else { a.method };
        let t = select_tuning_with(&cv, &config, criterion)?;
        (t.h, t.k, t.q)
    } else {
        let q = a.q.ok_or(AdrfError::Parameter("--q is required unless --cv is given".into()))?;
        (a.h, a.k, q)
    };
    let (h, k) = if a.method.needs_weights() {
        (
            h.ok_or(AdrfError::Parameter(format!("method {} needs --h (or --cv)", a.method)))?,
            k.ok_or(AdrfError::Parameter(format!("method {} needs --k (or --cv)", a.method)))?,
        )
    } else {
        (h.unwrap_or(median_distance(&distances)), k.unwrap_or(1))
    };
    let bundle = fit_methods(&data, &distances, &[a.method], q, h, k, a.cv_options.rho)?;
    let fit = &bundle.fits[&a.method];
    write_fit(fit, &a.out)?;
    write!(out, "method={} q={} intercept={}", fit.method, q, fmt_num(fit.intercept))?;
    if let (Some(h), Some(k)) = (fit.tuning.h, fit.tuning.k) {
        write!(out, " h={} k={}", fmt_num(h), k)?;
    }
    if let Some(theta) = &fit.theta {
        let t: Vec<String> = theta.iter().map(|&v| fmt_num(v)).collect();
        write!(out, " theta={}", t.join(","))?;
    }
    if let Some(w) = &bundle.weights {
        write!(out, " clipped_weights={}", w.clipped_count())?;
    }
    writeln!(out)?;
    Ok(())
}

fn cv(a: CvArgs, out: &mut impl Write) -> CliResult<()> {
    let data = a.data.load()?;
    let config = a.cv_options.config();
    let result = adrf::select_tuning(&data, &config, a.method)?;
    writeln!(out, "h,k,q,loss")?;
    for e in &result.table {
        writeln!(out, "{e}")?;
    }
    let h = result.h.map_or("-".into(), fmt_num);
    let k = result.k.map_or("-".into(), |k| k.to_string());
    writeln!(out, "# selected h={h} k={k} q={} loss={}", result.q, fmt_num(result.loss))?;
    Ok(())
}

fn adrf_cmd(a: AdrfArgs, out: &mut impl Write) -> CliResult<()> {
    let fit = read_fit::<f64>(&a.fit)?;
    let curves = read_curves::<f64>(&a.curves)?;
    for z in &curves {
        writeln!(out, "{}", fmt_num(adrf_eval(&fit, z)?))?;
    }
    Ok(())
}

fn ate_cmd(a: AteArgs, out: &mut impl Write) -> CliResult<()> {
    let fit = read_fit::<f64>(&a.fit)?;
    let z1 = read_curves::<f64>(&a.z1)?;
    let z2 = read_curves::<f64>(&a.z2)?;
    if z2.len() != 1 && z2.len() != z1.len() {
        return Err(AdrfError::Alignment {
            expected: z1.len(),
            found: z2.len(),
        });
    }
    for (i, c1) in z1.iter().enumerate() {
        let c2 = &z2[if z2.len() == 1 { 0 } else { i }];
        writeln!(out, "{}", fmt_num(ate(&fit, c1, c2)?))?;
    }
    Ok(())
}

fn benchmark(a: BenchmarkArgs, out: &mut impl Write) -> CliResult<()> {
    let config = BenchmarkConfig {
        models: a.models,
        sizes: a.sizes,
        methods: a.methods,
        replications: a.reps,
        base_seed: a.seed,
        cv: CvConfig {
            folds: a.folds,
            ..CvConfig::default()
        },
        ..BenchmarkConfig::default()
    };
    let progress = a.progress;
    let report = run_benchmark_with_progress(&config, |m, n, r| {
        if progress {
            eprintln!("model {m} n {n} replication {r} done");
        }
    })?;
    let text = report.to_string();
    out.write_all(text.as_bytes())?;
    if let Some(path) = &a.out {
        std::fs::write(path, &text)?;
    }
    Ok(())
}
