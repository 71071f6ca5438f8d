use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use twodpsm::io::{
    read_observations_csv, read_results_csv, write_balance_csv, write_matched_csv, write_results_csv,
};
use twodpsm::model::{validate_quad, QuadIssue};
use twodpsm::protocol::pair_labels;
use twodpsm::simulator::run_study;
use twodpsm::{
    balance_report, diff_in_means_did, partition, regression_did, run_1d, run_2dpsm, Error, Estimate,
    PerformanceRecord, RunConfig, ScenarioId, SchemeTag,
};

#[derive(Parser)]
#[command(name = "twodpsm", version, about = "Two-dimensional propensity score matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Monte Carlo study and write a results CSV.
    Simulate {
        /// Scenario id such as B2, a comma-separated list, or `all`.
        #[arg(long, default_value = "all")]
        scenario: String,
        /// Scheme tag (naive, 1d, 2d-1, 2d-2, 2d-3), a comma-separated list, or `all`.
        #[arg(long, default_value = "all")]
        scheme: String,
        /// Overrides the replication count from the config.
        #[arg(long)]
        replications: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// JSON run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Worker threads; defaults to the config value, then to all cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Match an observation CSV and write the surviving rows.
    Match {
        #[arg(long)]
        input: PathBuf,
        /// 1d, 2d-1, 2d-2 or 2d-3.
        #[arg(long, default_value = "2d-2")]
        scheme: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write a balance CSV for the matched groups.
        #[arg(long)]
        balance: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Estimate the treatment effect from an observation or matched CSV.
    Estimate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = EstimatorKind::Diff)]
        estimator: EstimatorKind,
        /// Output JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a results CSV as tables grouped by scheme.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorKind {
    /// Difference in group means.
    Diff,
    /// OLS with the covariates as controls.
    Regression,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

/// An error together with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_)
            | Error::Schema { .. }
            | Error::Io(_)
            | Error::DuplicateId(_)
            | Error::RaggedCovariates { .. }
            | Error::DimensionMismatch { .. }
            | Error::EmptyGroup(_)
            | Error::SchemeMismatch(_) => 2,
            _ => 3,
        };
        Self { code, message: e.to_string() }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::input(format!("{}: {e}", path.display()))
}

type CmdResult = Result<(), Failure>;

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).map_err(|e| io_failure(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_failure(p, e))?;
            RunConfig::from_json(&text).map_err(|e| Failure::input(format!("{}: {e}", p.display())))
        }
    }
}

fn parse_list<T, F>(raw: &str, all: Vec<T>, parse: F) -> Result<Vec<T>, Failure>
where
    F: Fn(&str) -> twodpsm::Result<T>,
    T: PartialEq,
{
    if raw.eq_ignore_ascii_case("all") {
        return Ok(all);
    }
    let mut out = Vec::new();
    for part in raw.split(',').map(str::trim) {
        let item = parse(part)?;
        if !out.contains(&item) {
            out.push(item);
        }
    }
    Ok(out)
}

fn simulate(
    scenario: &str,
    scheme: &str,
    replications: Option<usize>,
    seed: u64,
    out: &Path,
    config: Option<&Path>,
    threads: Option<usize>,
) -> CmdResult {
    let mut config = load_config(config)?;
    if let Some(r) = replications {
        config.dgp.replications = r;
    }
    config.threads = threads.or(config.threads);
    config.validate()?;
    let scenarios = parse_list(scenario, ScenarioId::all(), str::parse)?;
    let schemes = parse_list(scheme, SchemeTag::ALL.to_vec(), str::parse)?;
    let settings = config.matching();
    let run = || run_study(&scenarios, &schemes, &config.dgp, &settings, seed);
    let records = match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Failure::input(e.to_string()))?
            .install(run)?,
        None => run()?,
    };
    let mut w = create(out)?;
    write_results_csv(&mut w, &records)?;
    w.flush().map_err(|e| io_failure(out, e))?;
    Ok(())
}

fn describe_issues(issues: &[QuadIssue]) -> String {
    let empty: Vec<String> = issues
        .iter()
        .filter_map(|i| match i {
            QuadIssue::EmptyGroup(g) => Some(g.to_string()),
            _ => None,
        })
        .collect();
    let mut parts = Vec::new();
    if !empty.is_empty() {
        parts.push(format!("empty group {}", empty.join("/")));
    }
    parts.extend(issues.iter().filter(|i| !matches!(i, QuadIssue::EmptyGroup(_))).map(|i| i.to_string()));
    parts.join("; ")
}

fn run_match(
    input: &Path,
    scheme: &str,
    seed: u64,
    out: &Path,
    balance: Option<&Path>,
    config: Option<&Path>,
) -> CmdResult {
    let config = load_config(config)?;
    let tag: SchemeTag = scheme.parse()?;
    if tag == SchemeTag::Naive {
        return Err(Failure::input("scheme naive does not match; use `estimate` on the raw file"));
    }
    let table = read_observations_csv(open(input)?)?;
    let quad = partition(&table.observations)?;
    let issues = validate_quad(&quad);
    if !issues.is_empty() {
        return Err(Failure::input(describe_issues(&issues)));
    }
    let protocol = config.matching().protocol(tag, seed);
    let (groups, pairs) = if tag == SchemeTag::OneD {
        let m = run_1d(&quad, &protocol)?;
        (m.groups, m.pairs)
    } else {
        let m = run_2dpsm(&quad, &protocol)?;
        (m.groups, m.pairs)
    };
    let report = match balance {
        Some(_) => Some(balance_report(&groups, config.balance_threshold)?),
        None => None,
    };
    let labels = pair_labels(&groups, &pairs);
    let mut w = create(out)?;
    write_matched_csv(&mut w, &groups, &labels)?;
    w.flush().map_err(|e| io_failure(out, e))?;
    if let (Some(path), Some(report)) = (balance, report) {
        let mut w = create(path)?;
        write_balance_csv(&mut w, &report)?;
        w.flush().map_err(|e| io_failure(path, e))?;
    }
    Ok(())
}

fn estimate(input: &Path, estimator: EstimatorKind, out: Option<&Path>) -> CmdResult {
    let table = read_observations_csv(open(input)?)?;
    let quad = partition(&table.observations)?;
    let issues = validate_quad(&quad);
    if !issues.is_empty() {
        return Err(Failure::input(describe_issues(&issues)));
    }
    let est: Estimate = match estimator {
        EstimatorKind::Diff => diff_in_means_did(&quad)?,
        EstimatorKind::Regression => regression_did(&quad.into_observations())?,
    };
    let json = serde_json::to_string_pretty(&est).expect("estimate serializes");
    match out {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{json}").and_then(|_| w.flush()).map_err(|e| io_failure(path, e))?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn fmt_cell(v: f64, completed: bool) -> String {
    if completed && v.is_finite() {
        format!("{v:.2}")
    } else {
        "NA".to_string()
    }
}

fn markdown(records: &[PerformanceRecord]) -> String {
    let mut s = String::new();
    let mut schemes: Vec<SchemeTag> = records.iter().map(|r| r.scheme).collect();
    schemes.dedup();
    for (i, scheme) in schemes.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        let _ = writeln!(s, "### {scheme}\n");
        s.push_str("| Scenario | Matched Sample Size | Estimated Treatment Effect | SD of Estimated TE | Bias Ratio | RMSE | Coverage Rates of 95% CI |\n");
        s.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
        for r in records.iter().filter(|r| r.scheme == *scheme) {
            let size = if r.completed && r.matched_size.is_finite() {
                format!("{:.0}", r.matched_size)
            } else {
                "NA".to_string()
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.scenario,
                size,
                fmt_cell(r.mean_estimate, r.completed),
                fmt_cell(r.sd, r.completed),
                fmt_cell(r.bias_ratio, r.completed),
                fmt_cell(r.rmse, r.completed),
                fmt_cell(r.coverage, r.completed),
            );
        }
    }
    s
}

fn report(input: &Path, format: Format) -> CmdResult {
    let mut records = read_results_csv(open(input)?)?;
    if records.is_empty() {
        return Err(Failure::input(format!("{}: no result rows", input.display())));
    }
    records.sort_by_key(|r| (r.scheme, r.scenario));
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let written = match format {
        Format::Markdown => out.write_all(markdown(&records).as_bytes()).map_err(Error::from),
        Format::Csv => write_results_csv(&mut out, &records),
    };
    written?;
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Simulate { scenario, scheme, replications, seed, out, config, threads } => {
            simulate(&scenario, &scheme, replications, seed, &out, config.as_deref(), threads)
        }
        Command::Match { input, scheme, seed, out, balance, config } => {
            run_match(&input, &scheme, seed, &out, balance.as_deref(), config.as_deref())
        }
        Command::Estimate { input, estimator, out } => estimate(&input, estimator, out.as_deref()),
        Command::Report { input, format } => report(&input, format),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("twodpsm: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
