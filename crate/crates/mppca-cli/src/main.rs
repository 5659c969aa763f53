//! Process-monitoring pipeline on the command line: train a PPCA-mixture
//! model on normal operating data, score new samples against KDE-calibrated
//! thresholds, and report alarm quality.
//!
//! Exit codes: 0 = ran with no alarms, 2 = ran and alarms fired, 1 = error.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use mppca::io::{read_csv, read_model, standardize, write_csv, write_model, ModelArtifact};
use mppca::missing::{em_fit_missing, monitor_missing, MaskedSample};
use mppca::mixture::{
    em_fit, select_k, select_k_by_delta, KChoice, QChoice, SelectionReport, TrainingConfig,
    TrainingReport,
};
use mppca::monitoring::{evaluate, fit_thresholds, DetectionMode, StatisticMode};
use mppca::synth::{generate, ScenarioSpec};

#[derive(Parser)]
#[command(name = "mppca", version, about = "PPCA-mixture process monitoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model on normal operating data and write a model file.
    Train(TrainArgs),
    /// Scan a range of component counts and report the entropy criterion.
    SelectK(SelectKArgs),
    /// Recompute alarm thresholds of an existing model at a new confidence.
    Threshold(ThresholdArgs),
    /// Score a sample stream against a model; writes per-sample statistics.
    Monitor(MonitorArgs),
    /// Compare an alarm sequence with fault labels (MAR / FAR).
    Evaluate(EvaluateArgs),
    /// Generate synthetic train/test streams from a scenario file.
    Simulate(SimulateArgs),
    /// Render monitoring charts (SVG) from a statistics file.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CliStatistic {
    /// T2 in the posterior metric, SPE in the noise metric.
    PosteriorNormalized,
    /// Literal score form with the unnormalized latent projection.
    Literal,
}

impl From<CliStatistic> for StatisticMode {
    fn from(v: CliStatistic) -> Self {
        match v {
            CliStatistic::PosteriorNormalized => StatisticMode::PosteriorNormalized,
            CliStatistic::Literal => StatisticMode::Literal,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CliDetection {
    /// Alarm when T2 or SPE exceeds its threshold.
    Dual,
    /// Alarm on the composite Tc2 statistic (default).
    Combined,
}

impl From<CliDetection> for DetectionMode {
    fn from(v: CliDetection) -> Self {
        match v {
            CliDetection::Dual => DetectionMode::Dual,
            CliDetection::Combined => DetectionMode::Combined,
        }
    }
}

#[derive(Args)]
struct ModelChoiceArgs {
    /// Fixed number of local models.
    #[arg(long, conflicts_with = "k_range")]
    k: Option<usize>,
    /// Inclusive K range to scan with the entropy criterion, e.g. 1 4.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    k_range: Option<Vec<usize>>,
    /// Fixed latent dimension.
    #[arg(long, conflicts_with = "contribution_rate")]
    q: Option<usize>,
    /// Pick q as the smallest dimension reaching this cumulative
    /// eigenvalue fraction.
    #[arg(long)]
    contribution_rate: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    max_iterations: usize,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    /// Independent EM runs; the best final log-likelihood wins.
    #[arg(long, default_value_t = 1)]
    restarts: usize,
}

impl ModelChoiceArgs {
    fn config(&self, allow_range: bool) -> Result<TrainingConfig> {
        let k = match (&self.k, &self.k_range) {
            (Some(k), None) => KChoice::Fixed(*k),
            (None, Some(r)) => {
                if !allow_range {
                    bail!("--k-range is only valid with select-k; use --k here");
                }
                KChoice::Range(r[0], r[1])
            }
            (None, None) => {
                if allow_range {
                    KChoice::Range(1, 5)
                } else {
                    bail!("one of --k or --k-range is required")
                }
            }
            (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
        };
        let q = match (self.q, self.contribution_rate) {
            (Some(q), None) => QChoice::Fixed(q),
            (None, Some(rate)) => QChoice::ContributionRate(rate),
            (None, None) => QChoice::ContributionRate(0.85),
            (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
        };
        Ok(TrainingConfig {
            k,
            q,
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            seed: self.seed,
            restarts: self.restarts,
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training CSV of normal operating data.
    #[arg(long)]
    data: PathBuf,
    /// Output model file (JSON).
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    model: ModelChoiceArgs,
    /// Threshold confidence level.
    #[arg(long, default_value_t = 0.99)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = CliStatistic::PosteriorNormalized)]
    statistic: CliStatistic,
    #[arg(long, value_enum, default_value_t = CliDetection::Combined)]
    mode: CliDetection,
    /// Center and scale columns before fitting (recorded in the model).
    #[arg(long)]
    standardize: bool,
}

#[derive(Args)]
struct SelectKArgs {
    #[arg(long)]
    data: PathBuf,
    /// Optionally write the model chosen by the argmin rule.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    model: ModelChoiceArgs,
    #[arg(long, default_value_t = 0.99)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = CliStatistic::PosteriorNormalized)]
    statistic: CliStatistic,
    #[arg(long, value_enum, default_value_t = CliDetection::Combined)]
    mode: CliDetection,
    #[arg(long)]
    standardize: bool,
}

#[derive(Args)]
struct ThresholdArgs {
    /// Existing model file.
    #[arg(long)]
    model: PathBuf,
    /// Training CSV to re-estimate statistic distributions from.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    alpha: f64,
    /// Output model file; defaults to overwriting the input.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct MonitorArgs {
    #[arg(long)]
    model: PathBuf,
    /// Test CSV; empty cells are treated as missing and imputed.
    #[arg(long)]
    data: PathBuf,
    /// Per-sample statistics CSV.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Statistics CSV from `monitor` (uses its `alarm` column), or any CSV
    /// with an `alarm` column.
    #[arg(long)]
    alarms: PathBuf,
    /// CSV with a `fault` label column, one row per monitored sample.
    #[arg(long)]
    labels: PathBuf,
    /// Optional JSON report output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario description (JSON).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    test_out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Statistics CSV from `monitor`.
    #[arg(long)]
    stats: PathBuf,
    /// Directory for chart SVGs and plotted-series CSVs.
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => run_train(a),
        Command::SelectK(a) => run_select_k(a),
        Command::Threshold(a) => run_threshold(a),
        Command::Monitor(a) => run_monitor(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Report(a) => run_report(a),
    };
    match outcome {
        Ok(alarms_fired) => {
            if alarms_fired {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Load a CSV and optionally standardize it; returns the complete-data
/// matrix when every cell is observed, plus the masked rows otherwise.
struct LoadedData {
    rows: Vec<MaskedSample>,
    complete: Option<DMatrix<f64>>,
    standardization: Option<mppca::io::Standardization>,
}

fn load_training(path: &PathBuf, do_standardize: bool) -> Result<LoadedData> {
    let raw = read_csv(path, true).with_context(|| format!("reading {}", path.display()))?;
    if raw.n() == 0 {
        bail!("{} contains no data rows", path.display());
    }
    let (data, standardization) = if do_standardize {
        let (ds, record) = standardize(&raw)?;
        (ds, Some(record))
    } else {
        (raw, None)
    };
    let complete = data.is_complete().then(|| data.to_matrix()).transpose()?;
    Ok(LoadedData {
        rows: data.rows,
        complete,
        standardization,
    })
}

fn fit_report(loaded: &LoadedData, config: &TrainingConfig) -> Result<TrainingReport> {
    match &loaded.complete {
        Some(m) => Ok(em_fit(m, config)?),
        None => Ok(em_fit_missing(&loaded.rows, config)?),
    }
}

fn print_h_table(selection: &SelectionReport) {
    println!("{:>4}  {:>14}  {:>14}", "K", "H", "log-likelihood");
    for c in &selection.candidates {
        match &c.outcome {
            Ok(r) => println!(
                "{:>4}  {:>14.6}  {:>14.4}",
                c.k,
                r.h_value,
                r.log_likelihood_trace.last().unwrap()
            ),
            Err(e) => println!("{:>4}  failed: {e}", c.k),
        }
    }
}

fn finish_artifact(
    report: &TrainingReport,
    loaded: &LoadedData,
    alpha: f64,
    statistic: StatisticMode,
    detection: DetectionMode,
    config: TrainingConfig,
    output: &PathBuf,
) -> Result<()> {
    // Thresholds come from the training statistics; impute first if the
    // training stream itself had gaps.
    let train_matrix = match &loaded.complete {
        Some(m) => m.clone(),
        None => mppca::missing::impute_all(&report.params, &loaded.rows)?,
    };
    let thresholds = fit_thresholds(&report.params, &train_matrix, alpha, statistic)?;
    let artifact = ModelArtifact::new(
        &report.params,
        thresholds,
        statistic,
        detection,
        loaded.standardization.clone(),
        config,
    );
    write_model(&artifact, output)?;
    println!(
        "final log-likelihood {:.4} after {} iterations; model written to {}",
        report.log_likelihood_trace.last().unwrap(),
        report.iterations_used,
        output.display()
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<bool> {
    let config = a.model.config(false)?;
    let loaded = load_training(&a.data, a.standardize)?;
    let report = fit_report(&loaded, &config).with_context(|| {
        format!("EM training failed (replay with --seed {})", config.seed)
    })?;
    println!(
        "K={} q={} H={:.6}",
        report.params.k(),
        report.params.q(),
        report.h_value
    );
    finish_artifact(
        &report,
        &loaded,
        a.alpha,
        a.statistic.into(),
        a.mode.into(),
        config,
        &a.output,
    )?;
    Ok(false)
}

fn run_select_k(a: SelectKArgs) -> Result<bool> {
    let config = a.model.config(true)?;
    let loaded = load_training(&a.data, a.standardize)?;
    let data = match &loaded.complete {
        Some(m) => m.clone(),
        None => bail!("select-k needs fully observed training data"),
    };
    let selection = select_k(&data, &config)
        .with_context(|| format!("EM training failed (replay with --seed {})", config.seed))?;
    print_h_table(&selection);
    println!("argmin-H choice: K={}", selection.best_k);
    if let Some(k) = select_k_by_delta(&selection, None) {
        println!("plateau-rule choice: K={k}");
    }
    if let Some(output) = &a.output {
        let report = selection
            .candidates
            .iter()
            .find(|c| c.k == selection.best_k)
            .and_then(|c| c.outcome.as_ref().ok())
            .expect("best K always has a successful fit");
        let chosen_config = TrainingConfig {
            k: KChoice::Fixed(selection.best_k),
            ..config
        };
        finish_artifact(
            report,
            &loaded,
            a.alpha,
            a.statistic.into(),
            a.mode.into(),
            chosen_config,
            output,
        )?;
    }
    Ok(false)
}

fn run_threshold(a: ThresholdArgs) -> Result<bool> {
    let mut artifact = read_model(&a.model)?;
    let mixture = artifact.mixture()?;
    let raw = read_csv(&a.data, true)?;
    let data = match &artifact.standardization {
        Some(record) => {
            let rows = raw
                .rows
                .iter()
                .map(|r| record.apply(r))
                .collect::<mppca::Result<Vec<_>>>()?;
            rows_to_matrix(&mixture, &rows)?
        }
        None => rows_to_matrix(&mixture, &raw.rows)?,
    };
    artifact.thresholds = fit_thresholds(&mixture, &data, a.alpha, artifact.statistic_mode)?;
    let out = a.output.unwrap_or(a.model);
    write_model(&artifact, &out)?;
    println!(
        "thresholds at alpha={}: T2 {:.6} SPE {:.6} Tc2 {:.6} -> {}",
        a.alpha,
        artifact.thresholds.j_t2,
        artifact.thresholds.j_spe,
        artifact.thresholds.j_tc2,
        out.display()
    );
    Ok(false)
}

fn rows_to_matrix(
    mixture: &mppca::MixtureParams,
    rows: &[MaskedSample],
) -> Result<DMatrix<f64>> {
    if rows.iter().all(|r| r.is_complete()) {
        let mut m = DMatrix::zeros(rows.len(), mixture.d());
        for (i, r) in rows.iter().enumerate() {
            m.set_row(i, &r.values().transpose());
        }
        Ok(m)
    } else {
        Ok(mppca::missing::impute_all(mixture, rows)?)
    }
}

fn run_monitor(a: MonitorArgs) -> Result<bool> {
    let artifact = read_model(&a.model)?;
    let mixture = artifact.mixture()?;
    let raw = read_csv(&a.data, true)?;
    if raw.n() == 0 {
        bail!("{} contains no samples", a.data.display());
    }
    if raw.d() != mixture.d() {
        bail!(
            "model expects {} variables but {} has {}",
            mixture.d(),
            a.data.display(),
            raw.d()
        );
    }
    let th = &artifact.thresholds;
    let mut out = String::from("sample,t2,spe,tc2,j_t2,j_spe,j_tc2,alarm\n");
    let mut any_alarm = false;
    for (i, row) in raw.rows.iter().enumerate() {
        let sample = match &artifact.standardization {
            Some(record) => record.apply(row)?,
            None => row.clone(),
        };
        let (g, decision) = monitor_missing(
            &mixture,
            th,
            &sample,
            artifact.statistic_mode,
            artifact.detection_mode,
        )?;
        any_alarm |= decision.alarm;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            i,
            g.t2,
            g.spe,
            g.tc2,
            th.j_t2,
            th.j_spe,
            th.j_tc2,
            u8::from(decision.alarm)
        )?;
    }
    std::fs::write(&a.output, out)?;
    println!(
        "{} samples scored, alarms {}; statistics written to {}",
        raw.n(),
        if any_alarm { "fired" } else { "none" },
        a.output.display()
    );
    Ok(any_alarm)
}

/// Pull one named 0/1 column out of a headed CSV.
fn read_flag_column(path: &PathBuf, name: &str) -> Result<Vec<bool>> {
    let mut reader = csv_reader(path)?;
    let headers = reader.headers()?.clone();
    let idx = headers
        .iter()
        .position(|h| h.trim() == name)
        .with_context(|| format!("{} has no `{name}` column", path.display()))?;
    let mut flags = Vec::new();
    for record in reader.records() {
        let record = record?;
        let field = record.get(idx).unwrap_or("").trim();
        flags.push(match field {
            "1" | "true" => true,
            "0" | "false" => false,
            other => bail!("{}: `{other}` is not a 0/1 flag", path.display()),
        });
    }
    Ok(flags)
}

fn csv_reader(path: &PathBuf) -> Result<csv::Reader<std::fs::File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?)
}

fn run_evaluate(a: EvaluateArgs) -> Result<bool> {
    let alarms = read_flag_column(&a.alarms, "alarm")?;
    let labels = read_flag_column(&a.labels, "fault")?;
    let report = evaluate(&alarms, &labels)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".into(), |p| format!("{p:.4}%"));
    println!("MAR {}  FAR {}", fmt(report.mar), fmt(report.far));
    println!(
        "detected {}  missed {}  false alarms {}  true negatives {}",
        report.detected_faults, report.missed_faults, report.false_alarms, report.true_negatives
    );
    if let Some(out) = &a.output {
        std::fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(false)
}

fn run_simulate(a: SimulateArgs) -> Result<bool> {
    let text = std::fs::read_to_string(&a.spec)
        .with_context(|| format!("reading {}", a.spec.display()))?;
    let spec = ScenarioSpec::from_json(&text)?;
    let (train, test) = generate(&spec)?;
    write_csv(&train, &a.train_out)?;
    write_csv(&test, &a.test_out)?;
    println!(
        "wrote {} training and {} test samples (fault onset {})",
        train.n(),
        test.n(),
        spec.fault.onset
    );
    Ok(false)
}

// ---- chart rendering ----

struct Series {
    values: Vec<f64>,
    threshold: f64,
}

fn read_stats(path: &PathBuf) -> Result<Vec<(String, Series)>> {
    let mut reader = csv_reader(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .with_context(|| format!("{} has no `{name}` column", path.display()))
    };
    let spec = [
        ("t2", col("t2")?, col("j_t2")?),
        ("spe", col("spe")?, col("j_spe")?),
        ("tc2", col("tc2")?, col("j_tc2")?),
    ];
    let mut series: Vec<(String, Series)> = spec
        .iter()
        .map(|(name, _, _)| {
            (
                name.to_string(),
                Series {
                    values: Vec::new(),
                    threshold: f64::NAN,
                },
            )
        })
        .collect();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for (s, (_, v_idx, j_idx)) in series.iter_mut().zip(&spec) {
            let parse = |idx: usize| -> Result<f64> {
                record
                    .get(idx)
                    .unwrap_or("")
                    .trim()
                    .parse::<f64>()
                    .with_context(|| format!("row {} of {}", row + 2, path.display()))
            };
            s.1.values.push(parse(*v_idx)?);
            s.1.threshold = parse(*j_idx)?;
        }
    }
    if series[0].1.values.is_empty() {
        bail!("{} contains no statistics rows", path.display());
    }
    Ok(series)
}

const CHART_W: f64 = 800.0;
const CHART_H: f64 = 300.0;
const MARGIN: f64 = 40.0;

fn render_chart(name: &str, s: &Series) -> String {
    let n = s.values.len();
    let y_max = s
        .values
        .iter()
        .copied()
        .fold(s.threshold, f64::max)
        .max(1e-12);
    let x = |i: usize| MARGIN + (CHART_W - 2.0 * MARGIN) * i as f64 / (n.max(2) - 1) as f64;
    let y = |v: f64| CHART_H - MARGIN - (CHART_H - 2.0 * MARGIN) * (v.max(0.0) / y_max);
    let points: Vec<String> = s
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
        .collect();
    let jy = y(s.threshold);
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\">\n",
            "<title>{name} monitoring chart</title>\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1\" points=\"{points}\"/>\n",
            "<line class=\"threshold\" x1=\"{x0:.2}\" y1=\"{jy:.2}\" x2=\"{x1:.2}\" y2=\"{jy:.2}\" ",
            "stroke=\"crimson\" stroke-dasharray=\"6 3\"/>\n",
            "<text x=\"{x0:.2}\" y=\"{ty:.2}\" font-size=\"12\" fill=\"crimson\">threshold {j}</text>\n",
            "</svg>\n"
        ),
        w = CHART_W,
        h = CHART_H,
        name = name,
        points = points.join(" "),
        x0 = MARGIN,
        x1 = CHART_W - MARGIN,
        jy = jy,
        ty = jy - 6.0,
        j = s.threshold,
    )
}

fn run_report(a: ReportArgs) -> Result<bool> {
    let series = read_stats(&a.stats)?;
    std::fs::create_dir_all(&a.out_dir)?;
    for (name, s) in &series {
        let svg = render_chart(name, s);
        std::fs::write(a.out_dir.join(format!("{name}.svg")), svg)?;
        let mut csv_out = format!("sample,{name},threshold\n");
        for (i, v) in s.values.iter().enumerate() {
            writeln!(csv_out, "{i},{v},{}", s.threshold)?;
        }
        std::fs::write(a.out_dir.join(format!("{name}.csv")), csv_out)?;
    }
    println!(
        "wrote {} charts to {}",
        series.len(),
        a.out_dir.display()
    );
    Ok(false)
}
