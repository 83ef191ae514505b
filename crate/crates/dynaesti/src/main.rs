//! Command-line front end: curve fitting, synthetic data, EM estimation,
//! metric reports, and the dynamic-vs-static hold-out comparison.
//!
//! Exit codes: 0 success (warnings land in the output files), 1 usage
//! error, 2 data error, 3 numerical failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use dynaesti::em::{self, BandwidthPolicy, EmConfig, Mode};
use dynaesti::error::Error;
use dynaesti::evaluate::{experiment_report, SampledFunction};
use dynaesti::formats::{self, EmissionSpec, FORMAT_VERSIONS};
use dynaesti::irf::{IrfFamily, ItemModel};
use dynaesti::records::ResponseRecord;
use dynaesti::simulate::{self, SynthConfig};

use curvfife::curve::{default_candidates, fit, select_bandwidth, CurveDistribution};
use curvfife::emissions::EmissionTriplet;
use curvfife::grafting::IterationControl;
use curvfife::kernel::KernelParams;
use curvfife::transform::Transform;

#[derive(Parser)]
#[command(
    name = "dynaesti",
    disable_version_flag = true,
    about = "Continuous-time ability curves and item response functions from sparse responses"
)]
struct Cli {
    /// Print the library and file-format versions.
    #[arg(long, short = 'V', global = true)]
    version: bool,

    /// Worker threads (default: DYNAESTI_WORKERS or all cores). Results do
    /// not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a curve distribution to an emissions file.
    FitCurve(FitCurveArgs),
    /// Generate synthetic ability curves, items, and responses.
    Simulate(SimulateArgs),
    /// Run the EM estimation over a long-format response file.
    Estimate(EstimateArgs),
    /// Compare estimated curves and items against a truth bundle.
    Evaluate(EvaluateArgs),
    /// Dynamic-vs-static hold-out likelihood comparison for one subject.
    Holdout(HoldoutArgs),
}

#[derive(Args)]
struct FitCurveArgs {
    /// Emissions CSV with header `time,kind,payload`.
    #[arg(long)]
    emissions: PathBuf,
    /// Item-parameter JSON, required when `irf:` emissions are present.
    #[arg(long)]
    items: Option<PathBuf>,
    /// Output directory for curve.csv and fit.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Transform for bernoulli emissions and output bands.
    #[arg(long, default_value = "probit")]
    transform: String,
    /// Fix the bandwidth, bypassing cross validation.
    #[arg(long)]
    h: Option<f64>,
    /// Folds for bandwidth selection.
    #[arg(long, default_value_t = 5)]
    cv_k: usize,
    /// Candidate bandwidths: `auto` or a comma-separated list.
    #[arg(long, default_value = "auto")]
    h_grid: String,
    /// Seed for the cross-validation shuffle (required unless --h is set).
    #[arg(long)]
    seed: Option<u64>,
    /// Diagonal jitter of the covariance matrix.
    #[arg(long, default_value_t = curvfife::kernel::DEFAULT_JITTER)]
    epsilon: f64,
    /// Rows of the output grid.
    #[arg(long, default_value_t = 201)]
    grid_points: usize,
    #[arg(long)]
    grid_start: Option<f64>,
    #[arg(long)]
    grid_end: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    students: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Generator bandwidth.
    #[arg(long)]
    gen_h: Option<f64>,
    /// Generator amplitude.
    #[arg(long)]
    gen_s: Option<f64>,
    #[arg(long)]
    grid_points: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SimulateFileConfig {
    students: Option<usize>,
    items: Option<usize>,
    seed: Option<u64>,
    gen_h: Option<f64>,
    gen_s: Option<f64>,
    grid_points: Option<usize>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Response CSV with header `student,item,time,response`.
    #[arg(long)]
    responses: PathBuf,
    /// IRF family: 3pl, probit3pl, or golf.
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Classical static abilities instead of curves.
    #[arg(long, default_value_t = false)]
    r#static: bool,
    /// Fix the bandwidth for every student, bypassing cross validation.
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    cv_k: Option<usize>,
    /// `auto` or a comma-separated candidate list.
    #[arg(long)]
    h_grid: Option<String>,
    /// Re-run bandwidth selection every round instead of freezing round 1.
    #[arg(long, default_value_t = false)]
    cv_each_round: bool,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    em_tol: Option<f64>,
    /// Gauss-Hermite nodes for the M-step expectations.
    #[arg(long)]
    quad: Option<usize>,
    /// Points of the reported ability grid.
    #[arg(long)]
    ability_grid: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Occurrence threshold for stroke clipping (golf).
    #[arg(long)]
    min_stroke_count: Option<usize>,
    /// JSON config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct EstimateFileConfig {
    family: Option<String>,
    seed: Option<u64>,
    r#static: Option<bool>,
    h: Option<f64>,
    cv_k: Option<usize>,
    h_grid: Option<String>,
    cv_each_round: Option<bool>,
    rounds: Option<usize>,
    em_tol: Option<f64>,
    quad: Option<usize>,
    ability_grid: Option<usize>,
    epsilon: Option<f64>,
    min_stroke_count: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Truth bundle from `simulate`.
    #[arg(long)]
    truth: PathBuf,
    /// Estimated item parameters.
    #[arg(long)]
    items: PathBuf,
    /// Estimated ability curves.
    #[arg(long)]
    abilities: PathBuf,
    /// Where to write the JSON report (text always prints to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.6)]
    threshold: f64,
}

#[derive(Args)]
struct HoldoutArgs {
    #[arg(long)]
    responses: PathBuf,
    /// Student id to evaluate.
    #[arg(long)]
    subject: String,
    /// Fixed item parameters both schemes use.
    #[arg(long)]
    items: PathBuf,
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    /// Fixed bandwidth for the dynamic fits (cross-validated otherwise).
    #[arg(long)]
    h: Option<f64>,
    #[arg(long, default_value_t = 5)]
    cv_k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap help/--help still prints normally
            if e.use_stderr() {
                eprint!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    if cli.version {
        println!(
            "dynaesti {} (curvfife {}; formats: {})",
            env!("CARGO_PKG_VERSION"),
            env!("CARGO_PKG_VERSION"),
            FORMAT_VERSIONS
        );
        return;
    }
    let workers = cli.workers.or_else(|| {
        std::env::var("DYNAESTI_WORKERS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = workers {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required; see --help");
        std::process::exit(1);
    };
    let result = match command {
        Command::FitCurve(args) => cmd_fit_curve(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Holdout(args) => cmd_holdout(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) => 1,
        Error::RejectionExhausted { .. } => 3,
        Error::Curve(c) => match c {
            curvfife::Error::SingularCovariance { .. }
            | curvfife::Error::EmissionIncompatible
            | curvfife::Error::DegenerateTilted
            | curvfife::Error::NonFinite(_) => 3,
            _ => 2,
        },
        _ => 2,
    }
}

fn parse_transform(name: &str) -> Result<Transform, Error> {
    match name {
        "identity" => Ok(Transform::Identity),
        "probit" => Ok(Transform::Probit),
        other => Err(Error::InvalidConfig(format!(
            "unknown transform '{other}' (expected identity or probit)"
        ))),
    }
}

fn parse_family(name: &str) -> Result<IrfFamily, Error> {
    IrfFamily::parse(name).map_err(|_| {
        Error::InvalidConfig(format!(
            "unknown IRF family '{name}'; supported families: 3pl, probit3pl, golf"
        ))
    })
}

fn parse_h_grid(spec: &str) -> Result<Option<Vec<f64>>, Error> {
    if spec == "auto" {
        return Ok(None);
    }
    let values: Result<Vec<f64>, _> = spec.split(',').map(|s| s.trim().parse()).collect();
    match values {
        Ok(v) if !v.is_empty() => Ok(Some(v)),
        _ => Err(Error::InvalidConfig(format!(
            "bad bandwidth grid '{spec}' (expected 'auto' or comma-separated numbers)"
        ))),
    }
}

fn ensure_out_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

/// Binds parsed emission rows to log-density functions, resolving `irf:`
/// rows against the item bank.
fn build_emissions(
    specs: &[EmissionSpec],
    transform: &Transform,
    items: Option<&[(String, ItemModel)]>,
) -> Result<Vec<EmissionTriplet>, Error> {
    specs
        .iter()
        .map(|spec| match spec {
            EmissionSpec::Bernoulli { time, yes } => {
                Ok(EmissionTriplet::bernoulli(*time, *yes, transform))
            }
            EmissionSpec::Gaussian { time, mean, std } => {
                Ok(EmissionTriplet::gaussian(*time, *mean, *std))
            }
            EmissionSpec::Irf {
                time,
                family,
                item,
                response,
            } => {
                let bank = items.ok_or_else(|| {
                    Error::InvalidConfig(
                        "emissions reference items; pass --items <items.json>".into(),
                    )
                })?;
                let (_, model) = bank
                    .iter()
                    .find(|(id, _)| id == item)
                    .ok_or_else(|| Error::UnknownItem(item.clone()))?;
                if model.family() != *family {
                    return Err(Error::FamilyMismatch(
                        family.to_string(),
                        model.family().to_string(),
                    ));
                }
                Ok(em::fitted_emission(model, *response, *time))
            }
        })
        .collect()
}

fn cmd_fit_curve(args: FitCurveArgs) -> Result<(), Error> {
    let transform = parse_transform(&args.transform)?;
    let specs = formats::read_emissions(&args.emissions)?;
    if specs.is_empty() {
        return Err(Error::NoRecords);
    }
    let bank = match &args.items {
        Some(path) => Some(formats::read_items(path)?),
        None => None,
    };
    let emissions = build_emissions(&specs, &transform, bank.as_deref())?;

    let params_of = |h: f64| KernelParams::new(h, 1.0, args.epsilon).map_err(Error::Curve);
    let ctrl = IterationControl::default();

    let (bandwidth, cv_json) = match args.h {
        Some(h) => (h, None),
        None => {
            let seed = args.seed.ok_or_else(|| {
                Error::InvalidConfig("--seed is required when cross validation runs".into())
            })?;
            let candidates = parse_h_grid(&args.h_grid)?
                .unwrap_or_else(|| default_candidates(&emissions));
            let sel = select_bandwidth(
                &emissions,
                &candidates,
                args.cv_k,
                &params_of(candidates[0])?,
                &ctrl,
                seed,
            )?;
            let cv = formats::CvJson {
                k: args.cv_k,
                seed,
                candidates: sel.scores.iter().map(|s| s.0).collect(),
                scores: sel.scores.iter().map(|s| s.1).collect(),
            };
            (sel.chosen, Some(cv))
        }
    };

    let dist = fit(&emissions, &params_of(bandwidth)?, transform, &ctrl)?;
    ensure_out_dir(&args.out_dir)?;
    write_curve_csv(&args.out_dir.join("curve.csv"), &dist, &args)?;

    let fit_json = formats::FitJson {
        bandwidth,
        jitter: args.epsilon,
        transform: dist.transform().name().to_string(),
        converged: dist.converged(),
        iterations: dist.iterations(),
        warning: (!dist.converged()).then(|| {
            format!(
                "grafting stopped after {} productive iterations without reaching tolerance",
                dist.iterations()
            )
        }),
        emission_times: dist.emission_times().to_vec(),
        factor_means: dist.factors().means.iter().copied().collect(),
        factor_variances: dist.factors().variances.iter().copied().collect(),
        bandwidth_selection: cv_json,
    };
    formats::write_json(&args.out_dir.join("fit.json"), &fit_json)
}

fn write_curve_csv(
    path: &Path,
    dist: &CurveDistribution,
    args: &FitCurveArgs,
) -> Result<(), Error> {
    let times = dist.emission_times();
    let lo = args
        .grid_start
        .unwrap_or_else(|| times.iter().cloned().fold(f64::INFINITY, f64::min));
    let hi = args
        .grid_end
        .unwrap_or_else(|| times.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let n = args.grid_points.max(1);
    let grid: Vec<f64> = if n == 1 || lo == hi {
        vec![lo]
    } else {
        (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
    };
    let bands = dist.marginals(&grid)?;
    let file = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(["time", "median", "lower70", "upper70"])
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    for b in bands {
        w.write_record(&[
            format!("{}", b.time),
            format!("{}", b.median),
            format!("{}", b.lower70),
            format!("{}", b.upper70),
        ])
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Error> {
    let file: SimulateFileConfig = match &args.config {
        Some(path) => formats::read_json(path)?,
        None => SimulateFileConfig::default(),
    };
    let students = args
        .students
        .or(file.students)
        .ok_or_else(|| Error::InvalidConfig("--students (or config) is required".into()))?;
    let items = args
        .items
        .or(file.items)
        .ok_or_else(|| Error::InvalidConfig("--items (or config) is required".into()))?;
    let seed = args
        .seed
        .or(file.seed)
        .ok_or_else(|| Error::InvalidConfig("--seed (or config) is required".into()))?;
    let config = SynthConfig {
        gen_bandwidth: args.gen_h.or(file.gen_h).unwrap_or(0.19),
        gen_amplitude: args.gen_s.or(file.gen_s).unwrap_or(0.6),
        grid_points: args.grid_points.or(file.grid_points).unwrap_or(1001),
        ..SynthConfig::new(students, items, seed)
    };

    let curves = simulate::sample_curves(&config)?;
    let bank = simulate::sample_items(&config);
    let times = simulate::uniform_times(config.m_items);
    let records = simulate::sample_responses(&curves, &bank, &times, config.seed)?;

    ensure_out_dir(&args.out_dir)?;
    formats::write_responses(&args.out_dir.join("responses.csv"), &records)?;
    let truth = formats::TruthBundle {
        grid: curves.grid.clone(),
        curves: curves
            .curves
            .iter()
            .enumerate()
            .map(|(i, values)| formats::TruthCurve {
                student: simulate::student_id(i),
                values: values.clone(),
            })
            .collect(),
        items: bank
            .iter()
            .map(|(id, m)| formats::item_to_record(id, m))
            .collect(),
        generator: formats::GeneratorInfo {
            n_students: config.n_students,
            m_items: config.m_items,
            gen_bandwidth: config.gen_bandwidth,
            gen_amplitude: config.gen_amplitude,
            grid_points: config.grid_points,
            seed: config.seed,
        },
    };
    formats::write_json(&args.out_dir.join("truth.json"), &truth)
}

fn bandwidth_policy(
    h: Option<f64>,
    cv_k: Option<usize>,
    h_grid: Option<&str>,
    each_round: bool,
) -> Result<BandwidthPolicy, Error> {
    if let Some(h) = h {
        return Ok(BandwidthPolicy::Fixed(h));
    }
    let candidates = match h_grid {
        Some(spec) => parse_h_grid(spec)?,
        None => None,
    };
    let k = cv_k.unwrap_or(5);
    Ok(if each_round {
        BandwidthPolicy::SelectEachRound { candidates, k }
    } else {
        BandwidthPolicy::SelectOnce { candidates, k }
    })
}

fn cmd_estimate(args: EstimateArgs) -> Result<(), Error> {
    let file: EstimateFileConfig = match &args.config {
        Some(path) => formats::read_json(path)?,
        None => EstimateFileConfig::default(),
    };
    let family_name = args
        .family
        .clone()
        .or(file.family)
        .ok_or_else(|| Error::InvalidConfig("--family (or config) is required".into()))?;
    let family = parse_family(&family_name)?;
    let seed = args
        .seed
        .or(file.seed)
        .ok_or_else(|| Error::InvalidConfig("--seed (or config) is required".into()))?;

    let mut config = EmConfig::new(family, seed);
    config.mode = if args.r#static || file.r#static.unwrap_or(false) {
        Mode::Static
    } else {
        Mode::Dynamic
    };
    config.bandwidth = bandwidth_policy(
        args.h.or(file.h),
        args.cv_k.or(file.cv_k),
        args.h_grid.as_deref().or(file.h_grid.as_deref()),
        args.cv_each_round || file.cv_each_round.unwrap_or(false),
    )?;
    if let Some(r) = args.rounds.or(file.rounds) {
        config.em_max_rounds = r;
    }
    if let Some(t) = args.em_tol.or(file.em_tol) {
        config.em_tol = t;
    }
    if let Some(q) = args.quad.or(file.quad) {
        config.quadrature_points = q;
    }
    if let Some(g) = args.ability_grid.or(file.ability_grid) {
        config.ability_grid_points = g;
    }
    if let Some(e) = args.epsilon.or(file.epsilon) {
        config.jitter = e;
        config.fit = IterationControl::default();
    }
    if let Some(m) = args.min_stroke_count.or(file.min_stroke_count) {
        config.min_stroke_count = m;
    }

    let records = formats::read_responses(&args.responses)?;
    let outcome = em::run_em(&records, &config)?;

    ensure_out_dir(&args.out_dir)?;
    formats::write_items(&args.out_dir.join("items.json"), &outcome.items)?;
    formats::write_abilities(&args.out_dir.join("abilities.csv"), &outcome.abilities)?;
    let diag = formats::DiagnosticsJson {
        family: family.to_string(),
        mode: match config.mode {
            Mode::Dynamic => "dynamic".into(),
            Mode::Static => "static".into(),
        },
        seed,
        rounds: outcome.diagnostics.rounds,
        converged: outcome.diagnostics.converged,
        expected_loglik: outcome.diagnostics.expected_loglik.clone(),
        bandwidths: outcome.diagnostics.bandwidths.clone(),
        warnings: outcome.diagnostics.warnings.clone(),
    };
    formats::write_json(&args.out_dir.join("diagnostics.json"), &diag)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), Error> {
    let truth: formats::TruthBundle = formats::read_json(&args.truth)?;
    let est_items = formats::read_items(&args.items)?;
    let est_medians = formats::read_ability_medians(&args.abilities)?;

    let true_curves: Vec<(String, SampledFunction)> = truth
        .curves
        .iter()
        .map(|c| {
            Ok((
                c.student.clone(),
                SampledFunction::new(truth.grid.clone(), c.values.clone())?,
            ))
        })
        .collect::<Result<_, Error>>()?;
    let est_curves: Vec<(String, SampledFunction)> = est_medians
        .into_iter()
        .map(|(student, points)| {
            let grid: Vec<f64> = points.iter().map(|p| p.0).collect();
            let values: Vec<f64> = points.iter().map(|p| p.1).collect();
            Ok((student, SampledFunction::new(grid, values)?))
        })
        .collect::<Result<_, Error>>()?;
    let true_items: Vec<(String, ItemModel)> = truth
        .items
        .iter()
        .map(formats::record_to_item)
        .collect::<Result<_, Error>>()?;

    let report = experiment_report(
        &true_curves,
        &est_curves,
        &true_items,
        &est_items,
        args.threshold,
    )?;
    print!("{}", report.to_text());
    if let Some(out) = &args.out {
        formats::write_json(out, &report)?;
    }
    Ok(())
}

fn cmd_holdout(args: HoldoutArgs) -> Result<(), Error> {
    let family_name = args
        .family
        .clone()
        .ok_or_else(|| Error::InvalidConfig("--family is required".into()))?;
    let family = parse_family(&family_name)?;
    let seed = args
        .seed
        .ok_or_else(|| Error::InvalidConfig("--seed is required".into()))?;
    let items = formats::read_items(&args.items)?;
    let records: Vec<ResponseRecord> = formats::read_responses(&args.responses)?
        .into_iter()
        .filter(|r| r.student == args.subject)
        .collect();
    if records.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no responses for subject '{}'",
            args.subject
        )));
    }

    let mut config = EmConfig::new(family, seed);
    config.bandwidth = bandwidth_policy(args.h, Some(args.cv_k), None, false)?;
    let report = em::holdout_compare(&records, &items, &config, args.runs, seed)?;

    #[derive(serde::Serialize)]
    struct HoldoutJson {
        subject: String,
        runs: usize,
        ratio: f64,
        mean_log_dynamic: f64,
        mean_log_static: f64,
        per_run: Vec<RunJson>,
    }
    #[derive(serde::Serialize)]
    struct RunJson {
        log_dynamic: f64,
        log_static: f64,
    }
    let json = HoldoutJson {
        subject: args.subject.clone(),
        runs: args.runs,
        ratio: report.ratio,
        mean_log_dynamic: report.mean_log_dynamic,
        mean_log_static: report.mean_log_static,
        per_run: report
            .runs
            .iter()
            .map(|r| RunJson {
                log_dynamic: r.log_dynamic,
                log_static: r.log_static,
            })
            .collect(),
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&json).expect("serializable report")
    );
    if let Some(out) = &args.out {
        formats::write_json(out, &json)?;
    }
    Ok(())
}
