use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use panel_causal::estimators::{estimate, fit_propensity};
use panel_causal::inference::{
    backward_eliminate, balance_check, cluster_bootstrap, dr_specification_test, relative_effect, EliminationTarget,
};
use panel_causal::panel::{load_csv, write_csv, write_csv_path};
use panel_causal::simlab::{generate_replicate, render_table, run_study, EstimatorSuite, Scenario, ScenarioId};
use panel_causal::{
    ColumnMapping, EffectEstimate, Error, Estimand, EstimatorOptions, LinkFunction, Method, ModelSpec, PanelDataset,
    RandomEffect, Term, Warning,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "panel-causal", version, about = "Treatment effect estimation for two-period panel data")]
struct Cli {
    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Worker threads for bootstrap and study runs (default: all cores).
    #[arg(long, global = true, env = "PANEL_CAUSAL_THREADS")]
    threads: Option<usize>,
    /// Write the primary output here instead of stdout.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one dataset from a study scenario and write it as CSV.
    Simulate(SimulateArgs),
    /// Point estimates of the ATE and ATT.
    Estimate(EstimateArgs),
    /// Cluster bootstrap standard error and percentile interval.
    Bootstrap(BootstrapArgs),
    /// Propensity balance check, doubly robust specification tests and backward elimination.
    Diagnose(DiagnoseArgs),
    /// Monte Carlo bias / variance / MSE study.
    Study(StudyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    #[value(name = "HOM", alias = "hom")]
    Hom,
    #[value(name = "HOM_TI", alias = "hom_ti")]
    HomTi,
    #[value(name = "HET", alias = "het")]
    Het,
    #[value(name = "HET_TI", alias = "het_ti")]
    HetTi,
    #[value(name = "RANDCOEF", alias = "randcoef")]
    RandCoef,
    #[value(name = "RANDCOEF_TI", alias = "randcoef_ti")]
    RandCoefTi,
}

impl From<ScenarioArg> for ScenarioId {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Hom => ScenarioId::Hom,
            ScenarioArg::HomTi => ScenarioId::HomTi,
            ScenarioArg::Het => ScenarioId::Het,
            ScenarioArg::HetTi => ScenarioId::HetTi,
            ScenarioArg::RandCoef => ScenarioId::RandCoef,
            ScenarioArg::RandCoefTi => ScenarioId::RandCoefTi,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    All,
    Or,
    Glmm,
    Ipw,
    Did,
    Ipwdid,
    Drglmm,
}

impl MethodArg {
    fn methods(self) -> Vec<Method> {
        match self {
            MethodArg::All => Method::ALL.to_vec(),
            MethodArg::Or => vec![Method::Or],
            MethodArg::Glmm => vec![Method::Glmm],
            MethodArg::Ipw => vec![Method::Ipw],
            MethodArg::Did => vec![Method::Did],
            MethodArg::Ipwdid => vec![Method::IpwDid],
            MethodArg::Drglmm => vec![Method::DrGlmm],
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EstimandArg {
    Ate,
    Att,
    Both,
}

impl EstimandArg {
    fn estimands(self) -> Vec<Estimand> {
        match self {
            EstimandArg::Ate => vec![Estimand::Ate],
            EstimandArg::Att => vec![Estimand::Att],
            EstimandArg::Both => vec![Estimand::Ate, Estimand::Att],
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RandomEffectArg {
    UnitIntercept,
    None,
}

impl From<RandomEffectArg> for RandomEffect {
    fn from(r: RandomEffectArg) -> Self {
        match r {
            RandomEffectArg::UnitIntercept => RandomEffect::UnitIntercept,
            RandomEffectArg::None => RandomEffect::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LinkArg {
    Identity,
    Logit,
}

#[derive(Args)]
struct DataArgs {
    /// Long-format panel CSV, one row per unit and period.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "unit_id")]
    unit_col: String,
    #[arg(long, default_value = "time")]
    time_col: String,
    #[arg(long, default_value = "treat")]
    treat_col: String,
    #[arg(long, default_value = "y")]
    response_col: String,
    /// Covariates expected to be constant across periods (comma separated).
    #[arg(long, value_delimiter = ',')]
    time_invariant: Vec<String>,
}

impl DataArgs {
    fn load(&self) -> Result<(PanelDataset, Vec<Warning>), Error> {
        let mapping = ColumnMapping {
            unit: self.unit_col.clone(),
            time: self.time_col.clone(),
            treat: self.treat_col.clone(),
            response: self.response_col.clone(),
            covariates: None,
            time_invariant: self.time_invariant.clone(),
        };
        load_csv(&self.input, &mapping).map_err(|e| match e {
            Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("--input {}: {io}", self.input.display()))),
            other => other,
        })
    }
}

#[derive(Args)]
struct SpecArgs {
    /// JSON model specification: {"outcome": [...], "ps": [...], "random_effect": "unit_intercept"}.
    #[arg(long, conflicts_with_all = ["covariates", "ps_covariates"])]
    spec: Option<PathBuf>,
    /// Outcome main effects when no spec file is given (default: every covariate).
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Propensity covariates when no spec file is given (default: every covariate).
    #[arg(long, value_delimiter = ',')]
    ps_covariates: Vec<String>,
    /// Random-effect structure of the outcome model when no spec file is given.
    #[arg(long, value_enum, default_value_t = RandomEffectArg::UnitIntercept)]
    random_effect: RandomEffectArg,
}

impl SpecArgs {
    fn resolve(&self, data: &PanelDataset) -> Result<ModelSpec, Error> {
        let spec = match &self.spec {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|io| {
                    Error::Io(std::io::Error::new(io.kind(), format!("--spec {}: {io}", path.display())))
                })?;
                ModelSpec::from_json(&text)?
            }
            None => {
                let all = data.covariate_names().to_vec();
                let cov = if self.covariates.is_empty() { all.clone() } else { self.covariates.clone() };
                let ps = if self.ps_covariates.is_empty() { all } else { self.ps_covariates.clone() };
                ModelSpec { random_effect: self.random_effect.into(), ..ModelSpec::main_effects(&cov, &ps) }
            }
        };
        spec.validate(data)?;
        Ok(spec)
    }
}

#[derive(Args)]
struct EstimatorArgs {
    /// Propensity quantile bins for DRGLMM (2..=10).
    #[arg(long, default_value_t = 5)]
    bins: usize,
    /// Starting Gauss-Hermite order for non-identity links.
    #[arg(long, default_value_t = 20)]
    quadrature_order: usize,
    /// Inverse link used when averaging counterfactual predictions.
    #[arg(long, value_enum, default_value_t = LinkArg::Identity)]
    link: LinkArg,
}

impl EstimatorArgs {
    fn options(&self) -> Result<EstimatorOptions, Error> {
        if !(2..=10).contains(&self.bins) {
            return Err(Error::InvalidBinCount(self.bins));
        }
        if self.quadrature_order == 0 {
            return Err(Error::InvalidQuadratureOrder);
        }
        let link = match self.link {
            LinkArg::Identity => LinkFunction::Identity,
            LinkArg::Logit => LinkFunction::Logit,
        };
        Ok(EstimatorOptions { bins: self.bins, quadrature_order: self.quadrature_order, link, ..Default::default() })
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    scenario: ScenarioArg,
    /// Number of units.
    #[arg(long, default_value_t = 250)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Replicate index within the seed.
    #[arg(long, default_value_t = 0)]
    replicate: u64,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    spec: SpecArgs,
    #[command(flatten)]
    est: EstimatorArgs,
    #[arg(long, value_enum, default_value_t = MethodArg::All)]
    method: MethodArg,
    #[arg(long, value_enum, default_value_t = EstimandArg::Both)]
    estimand: EstimandArg,
}

#[derive(Args)]
struct BootstrapArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    spec: SpecArgs,
    #[command(flatten)]
    est: EstimatorArgs,
    #[arg(long, value_enum, default_value_t = MethodArg::Glmm)]
    method: MethodArg,
    #[arg(long, value_enum, default_value_t = EstimandArg::Both)]
    estimand: EstimandArg,
    /// Bootstrap replicates.
    #[arg(long = "B", default_value_t = 400)]
    b: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    spec: SpecArgs,
    #[command(flatten)]
    est: EstimatorArgs,
    #[arg(long, value_enum, default_value_t = EstimandArg::Both)]
    estimand: EstimandArg,
    /// Bootstrap replicates for the specification tests.
    #[arg(long = "B", default_value_t = 200)]
    b: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Significance level for backward elimination.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long, value_enum)]
    scenario: ScenarioArg,
    /// Sample sizes (comma separated), one column block each.
    #[arg(long, value_delimiter = ',', default_value = "250")]
    n: Vec<usize>,
    /// Monte Carlo replicates per sample size.
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = EstimandArg::Both)]
    estimand: EstimandArg,
    /// Random-effect structure of every outcome model in the suite.
    #[arg(long, value_enum, default_value_t = RandomEffectArg::UnitIntercept)]
    random_effect: RandomEffectArg,
    #[command(flatten)]
    est: EstimatorArgs,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn report_warnings(warnings: &[Warning]) {
    let mut seen: Vec<String> = Vec::new();
    for w in warnings {
        let text = w.to_string();
        if !seen.contains(&text) {
            eprintln!("WARNING: {text}");
            seen.push(text);
        }
    }
}

fn csv_line(fields: &[String]) -> String {
    fields.join(",") + "\n"
}

fn aligned(header: &[&str], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> =
        (0..header.len()).map(|j| rows.iter().map(|r| r[j].len()).chain([header[j].len()]).max().unwrap_or(0)).collect();
    let mut out = String::new();
    let mut line = |fields: Vec<&str>| {
        let cells: Vec<String> = fields.iter().zip(&widths).map(|(f, w)| format!("{f:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec());
    for r in rows {
        line(r.iter().map(String::as_str).collect());
    }
    out
}

fn table(format: Format, header: &[&str], rows: Vec<Vec<String>>, text_rows: Vec<Vec<String>>) -> String {
    match format {
        Format::Csv => {
            let mut out = csv_line(&header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
            for r in &rows {
                out.push_str(&csv_line(r));
            }
            out
        }
        _ => aligned(header, &text_rows),
    }
}

fn json_text(value: &serde_json::Value) -> String {
    serde_json::to_string_pretty(value).expect("json value serializes") + "\n"
}

/// Always CSV, whatever `--format` says; with `--output` the file is written
/// here and nothing goes to stdout.
fn simulate(args: &SimulateArgs, output: Option<&PathBuf>) -> Result<String, Error> {
    if args.n < 2 {
        return Err(invalid(format!("--n must be at least 2, got {}", args.n)));
    }
    let data = generate_replicate(&Scenario::new(args.scenario.into(), args.n), args.seed, args.replicate)?;
    if let Some(path) = output {
        write_csv_path(&data, path)?;
        return Ok(String::new());
    }
    let mut buf = Vec::new();
    write_csv(&data, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

fn estimate_cmd(args: &EstimateArgs, format: Format) -> Result<String, Error> {
    let opts = args.est.options()?;
    let (data, mut warnings) = args.data.load()?;
    let spec = args.spec.resolve(&data)?;
    let wanted = args.estimand.estimands();
    let mut results: Vec<EffectEstimate> = Vec::new();
    for method in args.method.methods() {
        if args.method != MethodArg::All && wanted.iter().all(|&e| !method.supports(e)) {
            return Err(Error::UnsupportedEstimand { method: method.to_string(), estimand: wanted[0].to_string() });
        }
        for e in estimate(&data, &spec, method, &opts)? {
            if wanted.contains(&e.estimand) {
                results.push(e);
            }
        }
    }
    for e in &results {
        warnings.extend(e.warnings.iter().cloned());
    }
    report_warnings(&warnings);
    let rel: Vec<f64> = results.iter().map(|e| relative_effect(e.value, &data)).collect();
    if format == Format::Json {
        let rows: Vec<_> = results
            .iter()
            .zip(&rel)
            .map(|(e, r)| {
                json!({"method": e.method, "estimand": e.estimand, "value": e.value,
                       "relative_effect_pct": r, "components": e.components, "warnings": e.warnings})
            })
            .collect();
        return Ok(json_text(&json!(rows)));
    }
    let header = ["method", "estimand", "estimate", "relative_pct"];
    let csv = results
        .iter()
        .zip(&rel)
        .map(|(e, r)| vec![e.method.to_string(), e.estimand.to_string(), format!("{}", e.value), format!("{r}")])
        .collect();
    let text = results
        .iter()
        .zip(&rel)
        .map(|(e, r)| vec![e.method.to_string(), e.estimand.to_string(), format!("{:.4}", e.value), format!("{r:.2}")])
        .collect();
    Ok(table(format, &header, csv, text))
}

fn bootstrap_cmd(args: &BootstrapArgs, format: Format) -> Result<String, Error> {
    if args.b < 2 {
        return Err(invalid(format!("--B must be at least 2, got {}", args.b)));
    }
    let opts = args.est.options()?;
    let (data, mut warnings) = args.data.load()?;
    let spec = args.spec.resolve(&data)?;
    let mut rows = Vec::new();
    for method in args.method.methods() {
        for estimand in args.estimand.estimands() {
            if !method.supports(estimand) {
                if args.method == MethodArg::All || args.estimand == EstimandArg::Both {
                    continue;
                }
                return Err(Error::UnsupportedEstimand { method: method.to_string(), estimand: estimand.to_string() });
            }
            let res = cluster_bootstrap(&data, &spec, method, estimand, &opts, args.b, args.seed)?;
            warnings.extend(res.warnings.iter().cloned());
            rows.push((method, estimand, res));
        }
    }
    report_warnings(&warnings);
    if format == Format::Json {
        let out: Vec<_> = rows.iter().map(|(m, e, r)| json!({"method": m, "estimand": e, "bootstrap": r})).collect();
        return Ok(json_text(&json!(out)));
    }
    let header = ["method", "estimand", "estimate", "se", "ci_lower", "ci_upper", "B", "failed"];
    let fmt = |full: bool| -> Vec<Vec<String>> {
        rows.iter()
            .map(|(m, e, r)| {
                let num = |x: f64| if full { format!("{x}") } else { format!("{x:.4}") };
                vec![
                    m.to_string(),
                    e.to_string(),
                    num(r.point),
                    num(r.se),
                    num(r.ci_lower),
                    num(r.ci_upper),
                    r.b.to_string(),
                    r.n_failed.to_string(),
                ]
            })
            .collect()
    };
    Ok(table(format, &header, fmt(true), fmt(false)))
}

fn diagnose_cmd(args: &DiagnoseArgs, format: Format) -> Result<String, Error> {
    if args.b < 2 {
        return Err(invalid(format!("--B must be at least 2, got {}", args.b)));
    }
    if !(args.alpha > 0.0 && args.alpha <= 1.0) {
        return Err(invalid(format!("--alpha must be in (0, 1], got {}", args.alpha)));
    }
    let opts = args.est.options()?;
    let (data, mut warnings) = args.data.load()?;
    let spec = args.spec.resolve(&data)?;
    let ps = fit_propensity(&data, &spec.ps_terms, &opts.irls)?;
    warnings.extend(ps.warnings.iter().cloned());
    let balance = balance_check(&data, &spec.ps_terms, &ps.fitted_ps, &opts.irls)?;
    let mut tests = Vec::new();
    for estimand in args.estimand.estimands() {
        let t = dr_specification_test(&data, &spec, estimand, &opts, args.b, args.seed)?;
        warnings.extend(t.warnings.iter().cloned());
        tests.push(t);
    }
    let elim_ps = backward_eliminate(&data, &spec, EliminationTarget::Propensity, args.alpha, &opts)?;
    let elim_or = backward_eliminate(&data, &spec, EliminationTarget::Outcome, args.alpha, &opts)?;
    warnings.extend(elim_ps.warnings.iter().chain(&elim_or.warnings).cloned());
    report_warnings(&warnings);

    let terms = |t: &[Term]| t.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    if format == Format::Json {
        return Ok(json_text(&json!({
            "propensity": {"terms": terms(&spec.ps_terms), "coefficients": ps.alpha_hat, "std_errors": ps.std_errors,
                           "converged": ps.converged, "iterations": ps.n_iter},
            "balance": balance,
            "specification_tests": tests,
            "elimination": {"propensity": elim_ps, "outcome": elim_or},
        })));
    }
    let csv = format == Format::Csv;
    let num = |x: f64| if csv { format!("{x}") } else { format!("{x:.4}") };
    let mut rows: Vec<Vec<String>> = Vec::new();
    for (i, t) in spec.ps_terms.iter().enumerate() {
        rows.push(vec!["propensity".into(), format!("coef[{t}]"), num(ps.alpha_hat[i]), format!("se={}", num(ps.std_errors[i]))]);
    }
    rows.push(vec!["balance".into(), "r2_ps_only".into(), num(balance.r2_ps_only), String::new()]);
    rows.push(vec!["balance".into(), "r2_with_covariates".into(), num(balance.r2_with_covariates), String::new()]);
    rows.push(vec!["balance".into(), "balanced".into(), balance.balanced.to_string(), String::new()]);
    for t in &tests {
        let verdict = |r: bool| if r { "reject" } else { "accept" }.to_string();
        rows.push(vec!["dr_test".into(), format!("z_ps[{}]", t.estimand), num(t.z_ps), verdict(t.reject_ps)]);
        rows.push(vec!["dr_test".into(), format!("z_or[{}]", t.estimand), num(t.z_or), verdict(t.reject_or)]);
    }
    for (name, res) in [("eliminate_ps", &elim_ps), ("eliminate_outcome", &elim_or)] {
        for s in &res.steps {
            rows.push(vec![name.into(), format!("drop[{}]", s.dropped), num(s.p_value), String::new()]);
        }
        let kept = match name {
            "eliminate_ps" => terms(&res.spec.ps_terms),
            _ => terms(&res.spec.outcome_terms),
        };
        rows.push(vec![name.into(), "kept".into(), kept.join(" "), String::new()]);
    }
    let header = ["section", "item", "value", "note"];
    Ok(table(format, &header, rows.clone(), rows))
}

fn study_cmd(args: &StudyArgs, format: Format) -> Result<String, Error> {
    if args.reps < 2 {
        return Err(invalid(format!("--reps must be at least 2, got {}", args.reps)));
    }
    if let Some(&n) = args.n.iter().find(|&&n| n < 2) {
        return Err(invalid(format!("--n must be at least 2, got {n}")));
    }
    let opts = args.est.options()?;
    let id: ScenarioId = args.scenario.into();
    let suite = EstimatorSuite::standard(id).with_random_effect(args.random_effect.into());
    let results = args
        .n
        .iter()
        .map(|&n| run_study(&Scenario::new(id, n), &suite, args.reps, args.seed, &opts))
        .collect::<Result<Vec<_>, _>>()?;
    report_warnings(&results.iter().flat_map(|r| r.warnings.iter().cloned()).collect::<Vec<_>>());
    let tables: Vec<_> = args.estimand.estimands().into_iter().map(|e| render_table(&results, e)).collect();
    Ok(match format {
        Format::Json => json_text(&json!({"studies": results, "tables": tables})),
        Format::Csv => {
            let mut out = String::new();
            for (i, t) in tables.iter().enumerate() {
                let csv = t.to_csv();
                let body = if i == 0 { csv.as_str() } else { csv.split_once('\n').map_or("", |x| x.1) };
                out.push_str(body);
            }
            out
        }
        Format::Text => {
            let truth = results[0].truth;
            let mut out = format!(
                "scenario {id}, R={}, seed {}; true ATE {:.4}, true ATT {:.4}\n",
                args.reps, args.seed, truth.ate, truth.att
            );
            for t in &tables {
                let _ = write!(out, "\n{}", t.to_text());
            }
            out
        }
    })
}

fn run(cli: &Cli) -> Result<String, Error> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(invalid("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| invalid(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Simulate(a) => simulate(a, cli.output.as_ref()),
        Command::Estimate(a) => estimate_cmd(a, cli.format),
        Command::Bootstrap(a) => bootstrap_cmd(a, cli.format),
        Command::Diagnose(a) => diagnose_cmd(a, cli.format),
        Command::Study(a) => study_cmd(a, cli.format),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let msg = msg.trim().strip_prefix("error: ").unwrap_or(msg.trim());
            eprintln!("ERROR:InvalidArgument: {msg}");
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(text) => {
            let written = match (&cli.output, &cli.command) {
                (_, Command::Simulate(_)) | (None, _) => {
                    print!("{text}");
                    Ok(())
                }
                (Some(path), _) => std::fs::write(path, text),
            };
            if let Err(e) = written {
                eprintln!("ERROR:Io: {e}");
                return ExitCode::from(1);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ERROR:{}: {e}", e.kind());
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
