//! Command-line front end. Each subcommand reads one JSON config, writes
//! CSV/JSON artifacts into the output directory and returns an exit code.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::acceptance::{run_all, run_criterion, DEFAULT_SEED};
use crate::error::{Error, Result};
use crate::locop::{build_localization_matrix_with, cohen_field, husimi_field, top_eigenvalue};
use crate::opstft::{moyal_defect, opstft_field, HermiteOperator, LambdaEntry, PolyradialWindow, WindowKind, WindowSpec};
use crate::output::{fmt_f64, to_json, write_csv};
use crate::phasespace::{nyquist_density, DomainMask, DomainSpec, GridSpec, PhaseGrid, DEFAULT_SUBDIVISION};
use crate::recovery::{certificate, solve, ProblemSpec, SolverConfig, CERTIFICATE_RADII};
use crate::sieve::{
    faber_krahn_bound, kernel_sup_integral, max_nyquist_bound, rfk_bound, theorem1_bound, theorem2_bound, BoundMethod,
    KernelNorm, SieveBound, Theorem2Form, OP_RANK_LIMIT,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_STRICT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "qsieve", version, about = "Quantum large sieve bounds, localization spectra and operator recovery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON configuration of the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Grid half-width override.
    #[arg(long = "grid-L", global = true)]
    pub grid_l: Option<f64>,
    /// Grid spacing override.
    #[arg(long = "grid-h", global = true)]
    pub grid_h: Option<f64>,
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Exit with status 4 when a recovery certificate fails.
    #[arg(long, global = true)]
    pub strict: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Table of concentration bounds for one domain and window.
    Bounds,
    /// Maximum Nyquist density over a sweep of radii.
    Nyquist,
    /// Spectrum of the mixed-state localization operator.
    Locop,
    /// HS-norm, Husimi and Cohen fields plus the binary field dump.
    Fields,
    /// Solves a recovery problem end to end.
    Recover,
    /// Runs the acceptance checks.
    Reproduce {
        /// Run a single criterion.
        #[arg(long)]
        only: Option<usize>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsConfig {
    omega: DomainSpec,
    #[serde(default)]
    gamma: Option<WindowSpec>,
    #[serde(default)]
    radii: Option<Vec<f64>>,
    /// Faber-Krahn exponent.
    #[serde(default = "default_p")]
    p: f64,
    /// Theorem 1 parameters α with N = 1.
    #[serde(default = "default_alphas")]
    alphas: Vec<f64>,
}

fn default_p() -> f64 {
    2.0
}

fn default_alphas() -> Vec<f64> {
    vec![5.0, 6.0, 8.0]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NyquistConfig {
    omega: DomainSpec,
    #[serde(default)]
    radii: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LocopConfig {
    omega: DomainSpec,
    #[serde(default)]
    gamma: Option<WindowSpec>,
    #[serde(rename = "M", default = "default_m")]
    m: usize,
    #[serde(default = "default_subdivision")]
    subdivision: usize,
}

fn default_m() -> usize {
    24
}

fn default_subdivision() -> usize {
    DEFAULT_SUBDIVISION
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldsConfig {
    #[serde(default)]
    grid: Option<GridSpec>,
    #[serde(default)]
    gamma: Option<WindowSpec>,
    rho: RhoSpec,
    /// Function for the Cohen field, as Hermite coefficients.
    #[serde(default)]
    f: Option<Vec<LambdaEntry>>,
}

/// `{"coeff":[[[re,im],..],..]}` or `{"random":{"m","rank","positive"}}`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
enum RhoSpec {
    Coeff(Vec<Vec<LambdaEntry>>),
    Random {
        m: usize,
        rank: usize,
        #[serde(default)]
        positive: bool,
    },
}

fn entry(e: &LambdaEntry) -> Complex64 {
    match *e {
        LambdaEntry::Real(x) => Complex64::new(x, 0.0),
        LambdaEntry::Complex([a, b]) => Complex64::new(a, b),
    }
}

impl RhoSpec {
    fn build(&self, seed: u64) -> Result<HermiteOperator> {
        match self {
            RhoSpec::Coeff(rows) => {
                let m = rows.len();
                if m == 0 || rows.iter().any(|r| r.len() != m) {
                    return Err(Error::InvalidConfig("rho.coeff must be a non-empty square matrix".into()));
                }
                HermiteOperator::new(DMatrix::from_fn(m, m, |i, j| entry(&rows[i][j])))
            }
            &RhoSpec::Random { m, rank, positive } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                if positive {
                    HermiteOperator::random_positive(m, rank, &mut rng)
                } else {
                    HermiteOperator::random(m, rank, &mut rng)
                }
            }
        }
    }
}

/// Table row of the `bounds` command.
#[derive(Debug, Serialize)]
struct BoundRow {
    #[serde(rename = "R")]
    r: Option<f64>,
    #[serde(flatten)]
    bound: SieveBound,
}

#[derive(Debug, Serialize)]
struct Skipped {
    method: String,
    #[serde(rename = "R")]
    r: Option<f64>,
    reason: String,
}

/// Parses the command line, runs it and reports errors as JSON on stderr.
pub fn main_with(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            let doc = json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{doc}");
            exit_code(&e)
        }
    }
}

/// Exit status for a module error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::OutOfWindow { .. } | Error::Io(_) => EXIT_INVALID,
        _ => EXIT_NUMERIC,
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    fs::create_dir_all(&cli.out)
        .map_err(|e| Error::Io(format!("cannot create output directory {}: {e}", cli.out.display())))?;
    match &cli.command {
        Command::Bounds => bounds(cli),
        Command::Nyquist => nyquist(cli),
        Command::Locop => locop(cli),
        Command::Fields => fields(cli),
        Command::Recover => recover(cli),
        Command::Reproduce { only } => reproduce(cli, *only),
    }
}

fn config_path(cli: &Cli) -> Result<&Path> {
    cli.config
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("--config <path> is required".into()))
}

fn read_config<T: DeserializeOwned>(cli: &Cli) -> Result<T> {
    let path = config_path(cli)?;
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Applies `--grid-L` / `--grid-h` on top of `base`.
fn grid_override(cli: &Cli, base: Option<PhaseGrid>) -> Result<Option<PhaseGrid>> {
    if cli.grid_l.is_none() && cli.grid_h.is_none() {
        return Ok(base);
    }
    let base = base.unwrap_or_default();
    let grid = PhaseGrid::new(
        cli.grid_l.unwrap_or(base.half_width()),
        cli.grid_h.unwrap_or(base.spacing()),
    )
    .map_err(|e| Error::InvalidConfig(format!("grid override: {e}")))?;
    Ok(Some(grid))
}

fn build_mask(cli: &Cli, spec: &DomainSpec) -> Result<DomainMask> {
    let grid = grid_override(cli, Some(spec.grid()?))?;
    spec.build(grid)
}

fn build_window(spec: &Option<WindowSpec>) -> Result<PolyradialWindow> {
    match spec {
        Some(s) => s.build(),
        None => Ok(PolyradialWindow::gaussian()),
    }
}

fn create(cli: &Cli, name: &str) -> Result<BufWriter<File>> {
    let path = cli.out.join(name);
    let f = File::create(&path).map_err(|e| Error::Io(format!("cannot create {}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize + ?Sized>(cli: &Cli, name: &str, value: &T) -> Result<()> {
    let mut w = create(cli, name)?;
    writeln!(w, "{}", to_json(value)?)?;
    w.flush()?;
    Ok(())
}

fn bounds(cli: &Cli) -> Result<i32> {
    let cfg: BoundsConfig = read_config(cli)?;
    let mask = build_mask(cli, &cfg.omega)?;
    let gamma = build_window(&cfg.gamma)?;
    let radii = cfg.radii.clone().unwrap_or_else(|| CERTIFICATE_RADII.to_vec());
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut push = |method: &str, r: Option<f64>, res: Result<SieveBound>| match res {
        Ok(bound) => rows.push(BoundRow { r, bound }),
        Err(e) => skipped.push(Skipped {
            method: method.to_string(),
            r,
            reason: e.to_string(),
        }),
    };

    let thermal_a = match gamma.kind() {
        WindowKind::Thermal { a } => Some(a),
        _ if gamma.is_gaussian() => Some(0.0),
        _ => None,
    };
    if gamma.is_gaussian() {
        push("FaberKrahn", None, faber_krahn_bound(mask.measure(), cfg.p));
    }
    for &r in &radii {
        if !(r > 0.0) {
            return Err(Error::InvalidConfig(format!("radius {r} must be positive")));
        }
        if gamma.is_gaussian() {
            push("RFK", Some(r), nyquist_density(&mask, r).and_then(|nu| rfk_bound(nu.value, r)));
        }
        if thermal_a.map_or(true, |a| a == 0.0) {
            push("MaxNyquist", Some(r), max_nyquist_bound(&mask, &gamma, r).map(|m| m.bound));
        }
    }
    for &alpha in &cfg.alphas {
        let r = (alpha / PI).sqrt();
        push(
            "Theorem1",
            Some(r),
            nyquist_density(&mask, r).and_then(|nu| theorem1_bound(nu.value, 1, alpha)),
        );
    }
    if let Some(a) = thermal_a {
        push("Theorem2Kernel", None, theorem2_bound(&mask, a, Theorem2Form::KernelSup));
        push("Theorem2Closed", None, theorem2_bound(&mask, a, Theorem2Form::Closed));
    }
    let norm = if gamma.max_index() <= OP_RANK_LIMIT {
        KernelNorm::Op
    } else {
        KernelNorm::HS
    };
    push(
        "KernelSup",
        None,
        kernel_sup_integral(&mask, &gamma, norm)
            .and_then(|v| SieveBound::new(BoundMethod::KernelSup, v, json!({ "norm": norm }))),
    );

    let mut w = create(cli, "bounds.csv")?;
    writeln!(w, "method,R,value,certificate")?;
    for row in &rows {
        let r = row.r.map(fmt_f64).unwrap_or_default();
        writeln!(
            w,
            "{:?},{},{},{}",
            row.bound.method,
            r,
            fmt_f64(row.bound.value),
            row.bound.certificate
        )?;
    }
    w.flush()?;
    let best = rows
        .iter()
        .map(|r| r.bound.value)
        .fold(f64::INFINITY, f64::min);
    write_json(
        cli,
        "bounds.json",
        &json!({
            "measure": mask.measure(),
            "window": gamma.kind(),
            "rows": rows,
            "skipped": skipped,
            "best": if best.is_finite() { Value::from(best) } else { Value::Null },
        }),
    )?;
    Ok(EXIT_OK)
}

fn nyquist(cli: &Cli) -> Result<i32> {
    let cfg: NyquistConfig = read_config(cli)?;
    let mask = build_mask(cli, &cfg.omega)?;
    let radii = cfg
        .radii
        .clone()
        .unwrap_or_else(|| (1..=30).map(|k| k as f64 / 10.0).collect());
    let reports = radii
        .iter()
        .map(|&r| nyquist_density(&mask, r))
        .collect::<Result<Vec<_>>>()?;
    let w = create(cli, "nyquist.csv")?;
    write_csv(
        w,
        &["R", "nu", "argmax_x", "argmax_y", "error_bar"],
        reports
            .iter()
            .map(|n| vec![n.radius, n.value, n.argmax_center.0, n.argmax_center.1, n.error_bar]),
    )?;
    Ok(EXIT_OK)
}

fn locop(cli: &Cli) -> Result<i32> {
    let cfg: LocopConfig = read_config(cli)?;
    let mask = build_mask(cli, &cfg.omega)?;
    let gamma = build_window(&cfg.gamma)?;
    let a = build_localization_matrix_with(&mask, &gamma, cfg.m, cfg.subdivision)?;
    let spectrum = a.spectrum();
    let (lambda1, _) = top_eigenvalue(&a);
    let mut w = create(cli, "spectrum.csv")?;
    a.write_spectrum_csv(&mut w)?;
    w.flush()?;
    write_json(
        cli,
        "locop.json",
        &json!({
            "M": cfg.m,
            "window": gamma.kind(),
            "omega_measure": a.omega_measure(),
            "trace": a.trace(),
            "lambda1": lambda1,
            "spectrum": spectrum,
        }),
    )?;
    Ok(EXIT_OK)
}

fn fields(cli: &Cli) -> Result<i32> {
    let cfg: FieldsConfig = read_config(cli)?;
    let base = match &cfg.grid {
        Some(g) => g.build()?,
        None => PhaseGrid::default(),
    };
    let grid = grid_override(cli, Some(base))?.unwrap_or(base);
    let gamma = build_window(&cfg.gamma)?;
    let rho = cfg.rho.build(cli.seed)?;

    let field = opstft_field(&gamma, &rho, grid)?;
    let mut w = create(cli, "hs_norm.csv")?;
    field.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(cli, "field.bin")?;
    field.write_binary(&mut w)?;
    w.flush()?;

    let mut summary = json!({
        "grid": { "L": grid.half_width(), "h": grid.spacing(), "n": grid.n() },
        "rows": field.rows(),
        "cols": field.cols(),
        "moyal_defect": moyal_defect(&field, &gamma, &rho)?,
    });
    if rho.is_positive() {
        let hus = husimi_field(&rho, grid)?;
        let mut w = create(cli, "husimi.csv")?;
        hus.write_csv(&mut w)?;
        w.flush()?;
        summary["husimi_integral"] = json!(hus.integral());
        summary["husimi_min"] = json!(hus.min());
    }
    if let Some(f) = &cfg.f {
        let f: Vec<Complex64> = f.iter().map(entry).collect();
        let cohen = cohen_field(&gamma, &f, grid)?;
        let mut w = create(cli, "cohen.csv")?;
        cohen.write_csv(&mut w)?;
        w.flush()?;
        summary["cohen_integral"] = json!(cohen.integral());
    }
    write_json(cli, "fields.json", &summary)?;
    Ok(EXIT_OK)
}

fn recover(cli: &Cli) -> Result<i32> {
    let spec: ProblemSpec = read_config(cli)?;
    let grid = grid_override(cli, Some(spec.omega.grid()?))?;
    let base = config_path(cli)?.parent().unwrap_or(Path::new("."));
    let problem = spec.build(base, grid)?;
    let report = solve(&problem, &SolverConfig::default())?;
    let cert = certificate(&problem)?;
    write_json(cli, "report.json", &json!({ "report": report, "certificate": cert }))?;
    Ok(if !report.converged {
        EXIT_NUMERIC
    } else if cli.strict && !report.certified {
        EXIT_STRICT
    } else {
        EXIT_OK
    })
}

fn reproduce(cli: &Cli, only: Option<usize>) -> Result<i32> {
    let results = match only {
        Some(id) => vec![run_criterion(id, cli.seed)
            .ok_or_else(|| Error::InvalidConfig(format!("no acceptance criterion {id}")))?],
        None => run_all(cli.seed),
    };
    for r in &results {
        println!("{}", r.line());
    }
    write_json(cli, "acceptance.json", &results)?;
    Ok(if results.iter().all(|r| r.passed) {
        EXIT_OK
    } else {
        EXIT_NUMERIC
    })
}
