//! Command-line front end: config loading, presets and output files.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::analysis::asymptotic_mse;
use crate::channel::{DistanceRule, SystemConfig};
use crate::harness::{run_monte_carlo, theoretical_cfo_mse, DoaMode, MetricRow, MetricsTable, Scenario, Scheme, SnrMode};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run failed: {0}")]
    Runtime(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::Io { .. } => 3,
        }
    }
}

fn cfg_err<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Config(msg.into()))
}

/// A parsed config plus the set of keys the user gave explicitly.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub scenario: Scenario,
    pub explicit: BTreeSet<String>,
}

const SYSTEM_KEYS: &[(&str, &[&str])] = &[
    ("n", &["subcarriers"]),
    ("n_cp", &["cp_len"]),
    ("m", &["antennas"]),
    ("k", &["users"]),
    ("l", &["taps"]),
    ("p", &["rays"]),
    ("theta_as", &["angular_spread"]),
    ("chi", &[]),
    ("phi_max", &[]),
    ("snr_db", &[]),
    ("m_fft", &["fft_size"]),
    ("t_h", &["qualify_threshold"]),
    ("rho_th", &["critical_threshold"]),
    ("g", &["guard"]),
    ("iterations", &[]),
    ("seed", &[]),
    ("pdp", &[]),
    ("signal_power", &[]),
    ("n_s", &["short_training_len"]),
    ("first_data_block", &[]),
    ("distance_rule", &[]),
    ("refine_passes", &[]),
];

const SCENARIO_KEYS: &[(&str, &[&str])] = &[
    ("name", &[]),
    ("doas", &[]),
    ("doa_mode", &[]),
    ("snr_points", &["snr"]),
    ("trials", &[]),
    ("schemes", &[]),
    ("data_blocks", &[]),
    ("snr_mode", &[]),
];

fn canonical_key(raw: &str) -> Option<&'static str> {
    let k = raw.trim().to_ascii_lowercase();
    SYSTEM_KEYS
        .iter()
        .chain(SCENARIO_KEYS)
        .find(|(name, aliases)| *name == k || aliases.contains(&k.as_str()))
        .map(|(name, _)| *name)
}

/// Angle in radians from a number (degrees) or a string with a
/// `deg`/`rad`/`°` suffix.
pub fn parse_angle(key: &str, v: &Value) -> Result<f64, CliError> {
    match v {
        Value::Number(n) => Ok(n.as_f64().unwrap_or(f64::NAN).to_radians()),
        Value::String(s) => {
            let s = s.trim();
            let (num, scale) = if let Some(x) = s.strip_suffix("deg").or_else(|| s.strip_suffix('°')) {
                (x, PI / 180.0)
            } else if let Some(x) = s.strip_suffix("rad") {
                (x, 1.0)
            } else {
                (s, PI / 180.0)
            };
            num.trim()
                .parse::<f64>()
                .map(|x| x * scale)
                .or_else(|_| cfg_err(format!("{key}: cannot parse angle '{s}'")))
        }
        _ => cfg_err(format!("{key}: expected an angle, got {v}")),
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64, CliError> {
    match v {
        Value::Number(n) => n.as_f64().ok_or(()).or_else(|_| cfg_err(format!("{key}: not a number"))),
        Value::String(s) => s.trim().parse().or_else(|_| cfg_err(format!("{key}: cannot parse number '{s}'"))),
        _ => cfg_err(format!("{key}: expected a number, got {v}")),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize, CliError> {
    let x = as_f64(key, v)?;
    if x < 0.0 || x.fract() != 0.0 || !x.is_finite() {
        return cfg_err(format!("{key}: expected a non-negative integer, got {x}"));
    }
    Ok(x as usize)
}

fn as_list(v: &Value) -> Vec<Value> {
    match v {
        Value::Array(a) => a.clone(),
        Value::String(s) => s
            .trim_matches(|c| c == '[' || c == ']')
            .split(',')
            .map(|x| x.trim())
            .filter(|x| !x.is_empty())
            .map(|x| Value::String(x.to_string()))
            .collect(),
        other => vec![other.clone()],
    }
}

fn as_str(key: &str, v: &Value) -> Result<String, CliError> {
    match v {
        Value::String(s) => Ok(s.trim().to_string()),
        _ => cfg_err(format!("{key}: expected a string, got {v}")),
    }
}

/// Parse the text of a config file (JSON object or `key = value` lines).
pub fn parse_config(text: &str) -> Result<LoadedConfig, CliError> {
    let entries = if text.trim_start().starts_with('{') {
        let v: Value = serde_json::from_str(text).or_else(|e| cfg_err(format!("invalid JSON: {e}")))?;
        let Value::Object(map) = v else { return cfg_err("top level must be an object") };
        map.into_iter().collect::<Vec<_>>()
    } else {
        let mut out = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return cfg_err(format!("line {}: expected key = value", no + 1));
            };
            let v = v.trim();
            let value = serde_json::from_str::<Value>(v).unwrap_or_else(|_| Value::String(v.to_string()));
            out.push((k.trim().to_string(), value));
        }
        out
    };
    let mut map: BTreeMap<&'static str, Value> = BTreeMap::new();
    for (k, v) in entries {
        let Some(key) = canonical_key(&k) else { return cfg_err(format!("unknown key '{k}'")) };
        if map.insert(key, v).is_some() {
            return cfg_err(format!("{key}: given more than once"));
        }
    }
    build_scenario(&map)
}

fn build_scenario(map: &BTreeMap<&'static str, Value>) -> Result<LoadedConfig, CliError> {
    let mut cfg = SystemConfig::default();
    let get = |k: &str| map.get(k);
    if let Some(v) = get("l") {
        cfg.taps = as_usize("l", v)?;
        cfg.pdp = vec![1.0 / cfg.taps.max(1) as f64; cfg.taps];
    }
    for (key, _) in SYSTEM_KEYS {
        let Some(v) = get(key) else { continue };
        match *key {
            "n" => cfg.subcarriers = as_usize(key, v)?,
            "n_cp" => cfg.cp_len = as_usize(key, v)?,
            "m" => cfg.antennas = as_usize(key, v)?,
            "k" => cfg.users = as_usize(key, v)?,
            "l" => {}
            "p" => cfg.rays = as_usize(key, v)?,
            "theta_as" => cfg.angular_spread = parse_angle(key, v)?,
            "chi" => cfg.chi = as_f64(key, v)?,
            "phi_max" => cfg.phi_max = as_f64(key, v)?,
            "snr_db" => cfg.snr_db = as_f64(key, v)?,
            "m_fft" => cfg.fft_size = as_usize(key, v)?,
            "t_h" => cfg.qualify_threshold = as_f64(key, v)?,
            "rho_th" => cfg.critical_threshold = as_f64(key, v)?,
            "g" => cfg.guard = parse_angle(key, v)?,
            "iterations" => cfg.iterations = as_usize(key, v)?,
            "seed" => cfg.seed = as_f64(key, v).and_then(|x| if x >= 0.0 && x.fract() == 0.0 { Ok(x as u64) } else { cfg_err("seed: expected a non-negative integer") })?,
            "pdp" => cfg.pdp = as_list(v).iter().map(|x| as_f64(key, x)).collect::<Result<_, _>>()?,
            "signal_power" => cfg.signal_power = as_f64(key, v)?,
            "n_s" => cfg.short_training_len = as_usize(key, v)?,
            "first_data_block" => cfg.first_data_block = as_usize(key, v)?,
            "distance_rule" => {
                cfg.distance_rule = match as_str(key, v)?.to_ascii_lowercase().as_str() {
                    "max" => DistanceRule::Max,
                    "min" => DistanceRule::Min,
                    other => return cfg_err(format!("distance_rule: expected max or min, got '{other}'")),
                }
            }
            "refine_passes" => cfg.refine_passes = as_usize(key, v)?,
            _ => unreachable!("key table out of sync"),
        }
    }
    cfg.validate().map_err(CliError::Config)?;

    let name = get("name").map(|v| as_str("name", v)).transpose()?.unwrap_or_else(|| "default".into());
    let mut sc = Scenario::new(&name, cfg);
    if let Some(v) = get("doas") {
        let d = as_list(v).iter().map(|x| parse_angle("doas", x)).collect::<Result<Vec<_>, _>>()?;
        sc.doa_mode = DoaMode::Fixed(d);
    }
    if let Some(v) = get("doa_mode") {
        match as_str("doa_mode", v)?.to_ascii_lowercase().replace('-', "_").as_str() {
            "fixed" => {}
            "random_sectors" => sc.doa_mode = DoaMode::RandomSectors,
            other => return cfg_err(format!("doa_mode: expected fixed or random_sectors, got '{other}'")),
        }
    }
    if let Some(v) = get("snr_points") {
        sc.snr_points = as_list(v).iter().map(|x| as_f64("snr_points", x)).collect::<Result<_, _>>()?;
    }
    if let Some(v) = get("trials") {
        sc.trials = as_usize("trials", v)?;
    }
    if let Some(v) = get("schemes") {
        sc.schemes = parse_schemes(&as_list(v))?;
    }
    if let Some(v) = get("data_blocks") {
        sc.data_blocks = as_usize("data_blocks", v)?;
    }
    if let Some(v) = get("snr_mode") {
        sc.snr_mode = match as_str("snr_mode", v)?.to_ascii_lowercase().replace('-', "_").as_str() {
            "per_antenna" => SnrMode::PerAntenna,
            "overall" => SnrMode::Overall,
            other => return cfg_err(format!("snr_mode: expected per_antenna or overall, got '{other}'")),
        };
    }
    if sc.data_blocks == 0 {
        return cfg_err("data_blocks: must be at least 1");
    }
    sc.validate().map_err(|e| CliError::Config(e.to_string().trim_start_matches("invalid scenario: ").to_string()))?;
    Ok(LoadedConfig { scenario: sc, explicit: map.keys().map(|k| k.to_string()).collect() })
}

fn parse_schemes(items: &[Value]) -> Result<Vec<Scheme>, CliError> {
    let mut out = Vec::new();
    for it in items {
        let s = match it {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let scheme: Scheme = s.parse().map_err(|e: String| CliError::Config(format!("schemes: {e}")))?;
        if !out.contains(&scheme) {
            out.push(scheme);
        }
    }
    if out.is_empty() {
        return cfg_err("schemes: empty list");
    }
    Ok(out)
}

pub fn load_config(path: Option<&Path>) -> Result<LoadedConfig, CliError> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config(&text)
}

/// Flat JSON form accepted by [`parse_config`]. Angles are written in radians.
pub fn scenario_to_json(sc: &Scenario) -> Value {
    let c = &sc.cfg;
    let rad = |x: f64| Value::String(format!("{x:?}rad"));
    let mut m = Map::new();
    m.insert("name".into(), sc.name.clone().into());
    m.insert("n".into(), c.subcarriers.into());
    m.insert("n_cp".into(), c.cp_len.into());
    m.insert("m".into(), c.antennas.into());
    m.insert("k".into(), c.users.into());
    m.insert("l".into(), c.taps.into());
    m.insert("p".into(), c.rays.into());
    m.insert("theta_as".into(), rad(c.angular_spread));
    m.insert("chi".into(), c.chi.into());
    m.insert("phi_max".into(), c.phi_max.into());
    m.insert("snr_db".into(), c.snr_db.into());
    m.insert("m_fft".into(), c.fft_size.into());
    m.insert("t_h".into(), c.qualify_threshold.into());
    m.insert("rho_th".into(), c.critical_threshold.into());
    m.insert("g".into(), rad(c.guard));
    m.insert("iterations".into(), c.iterations.into());
    m.insert("seed".into(), c.seed.into());
    m.insert("pdp".into(), c.pdp.clone().into());
    m.insert("signal_power".into(), c.signal_power.into());
    m.insert("n_s".into(), c.short_training_len.into());
    m.insert("first_data_block".into(), c.first_data_block.into());
    m.insert("distance_rule".into(), serde_json::to_value(c.distance_rule).unwrap_or(Value::Null));
    m.insert("refine_passes".into(), c.refine_passes.into());
    match &sc.doa_mode {
        DoaMode::Fixed(d) => {
            m.insert("doas".into(), Value::Array(d.iter().map(|&x| rad(x)).collect()));
        }
        DoaMode::RandomSectors => {
            m.insert("doa_mode".into(), "random_sectors".into());
        }
    }
    m.insert("snr_points".into(), sc.snr_points.clone().into());
    m.insert("trials".into(), sc.trials.into());
    m.insert("schemes".into(), Value::Array(sc.schemes.iter().map(|s| s.name().into()).collect()));
    m.insert("data_blocks".into(), sc.data_blocks.into());
    m.insert("snr_mode".into(), serde_json::to_value(sc.snr_mode).unwrap_or(Value::Null));
    Value::Object(m)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub timestamp: u64,
    pub version: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "beamsync", version, about = "Multiuser CFO estimation and beamforming simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo run of the configured scenario.
    Simulate(RunArgs),
    /// SNR sweep over the standard comparison schemes.
    Sweep(RunArgs),
    /// Per-iteration CFO MSE of FS-BEAM.
    Converge(RunArgs),
    /// Closed-form CFO MSE curves.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Comma-separated SNR points in dB.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub snr: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also render SVG line charts.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub schemes: Option<Vec<String>>,
    /// Worker threads, or `auto`.
    #[arg(long)]
    pub threads: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Array sizes, one curve each.
    #[arg(long, value_delimiter = ',')]
    pub antennas: Option<Vec<usize>>,
    /// Training draws averaged per user for the exact curve.
    #[arg(long, default_value_t = 8)]
    pub draws: usize,
}

fn parse_threads(arg: Option<&str>) -> Result<Option<usize>, CliError> {
    let env = std::env::var("BEAMSYNC_THREADS").ok();
    let Some(s) = arg.map(str::to_string).or(env) else { return Ok(None) };
    let s = s.trim();
    if s.eq_ignore_ascii_case("auto") || s.is_empty() {
        return Ok(None);
    }
    match s.parse::<usize>() {
        Ok(0) | Err(_) => cfg_err(format!("threads: expected a positive integer or 'auto', got '{s}'")),
        Ok(n) => Ok(Some(n)),
    }
}

fn resolve(common: &CommonArgs) -> Result<LoadedConfig, CliError> {
    let mut lc = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        lc.scenario.cfg.seed = s;
        lc.explicit.insert("seed".into());
    }
    if let Some(snr) = &common.snr {
        if snr.is_empty() || snr.iter().any(|x| !x.is_finite()) {
            return cfg_err("snr: expected a list of finite dB values");
        }
        lc.scenario.snr_points = snr.clone();
        lc.explicit.insert("snr_points".into());
    }
    Ok(lc)
}

fn apply_run_args(lc: &mut LoadedConfig, args: &RunArgs) -> Result<(), CliError> {
    if let Some(t) = args.trials {
        if t == 0 {
            return cfg_err("trials: must be at least 1");
        }
        lc.scenario.trials = t;
        lc.explicit.insert("trials".into());
    }
    if let Some(s) = &args.schemes {
        lc.scenario.schemes = parse_schemes(&s.iter().map(|x| Value::String(x.clone())).collect::<Vec<_>>())?;
        lc.explicit.insert("schemes".into());
    }
    Ok(())
}

pub const SWEEP_SCHEMES: [Scheme; 6] = [
    Scheme::FsBeam,
    Scheme::FsBeamUg,
    Scheme::SyncPerfectZf,
    Scheme::SyncChestZf,
    Scheme::FsTimeDivI,
    Scheme::FsTimeDivII,
];

/// Run a parsed command line. Returns the written paths.
pub fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    match cli.command {
        Command::Simulate(args) => {
            let mut lc = resolve(&args.common)?;
            apply_run_args(&mut lc, &args)?;
            if !lc.explicit.contains("snr_points") {
                lc.scenario.snr_points = vec![lc.scenario.cfg.snr_db];
            }
            execute("simulate", lc.scenario, &args, false)
        }
        Command::Sweep(args) => {
            let mut lc = resolve(&args.common)?;
            apply_run_args(&mut lc, &args)?;
            if !lc.explicit.contains("snr_points") {
                lc.scenario.snr_points = vec![-5.0, 0.0, 5.0, 10.0, 15.0, 20.0];
            }
            if !lc.explicit.contains("schemes") {
                lc.scenario.schemes = SWEEP_SCHEMES.to_vec();
            }
            execute("sweep", lc.scenario, &args, false)
        }
        Command::Converge(args) => {
            let mut lc = resolve(&args.common)?;
            apply_run_args(&mut lc, &args)?;
            if !lc.explicit.contains("snr_points") {
                lc.scenario.snr_points = vec![0.0, 10.0, 20.0];
            }
            if !lc.explicit.contains("schemes") {
                lc.scenario.schemes = vec![Scheme::FsBeam];
            }
            execute("converge", lc.scenario, &args, true)
        }
        Command::Analyze(args) => analyze(args),
    }
}

fn execute(command: &str, scenario: Scenario, args: &RunArgs, iterations: bool) -> Result<Vec<PathBuf>, CliError> {
    scenario.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let threads = parse_threads(args.threads.as_deref())?;
    let seed = scenario.cfg.seed;
    let sc = scenario.clone();
    let outcome = std::panic::catch_unwind(move || run_monte_carlo(&sc, seed, threads, iterations));
    let (mut table, _) = match outcome {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => return Err(CliError::Runtime(e.to_string())),
        Err(_) => return Err(CliError::Runtime("a scheme panicked".into())),
    };
    if iterations {
        table.rows.retain(|r| r.metric.starts_with("cfo_mse_iter_"));
    }
    if let Some(bad) = table.rows.iter().find(|r| !r.value.is_finite()) {
        return Err(CliError::Runtime(format!("{} produced a non-finite {}", bad.scheme, bad.metric)));
    }
    let axis = if iterations { Axis::Iteration } else { Axis::Snr };
    write_outputs(command, &scenario, seed, threads, &table, &args.common, axis)
}

fn analyze(args: AnalyzeArgs) -> Result<Vec<PathBuf>, CliError> {
    let lc = resolve(&args.common)?;
    let base = lc.scenario;
    let snrs = if lc.explicit.contains("snr_points") { base.snr_points.clone() } else { vec![-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0] };
    let sizes = args.antennas.clone().unwrap_or_else(|| vec![base.cfg.antennas]);
    let mut table = MetricsTable::default();
    for &m in &sizes {
        let mut sc = base.clone();
        sc.cfg.antennas = m;
        sc.cfg.fft_size = sc.cfg.fft_size.max(m.next_power_of_two());
        sc.name = format!("m{m}");
        sc.validate().map_err(|e| CliError::Config(e.to_string()))?;
        for &snr in &snrs {
            let n2 = sc.noise_variance(snr);
            let row = |scheme: &str, value: f64| MetricRow {
                scenario: sc.name.clone(),
                scheme: scheme.into(),
                snr_db: snr,
                metric: "cfo_mse".into(),
                value,
                ci95: 0.0,
                trials: 0,
            };
            if let Some(v) = theoretical_cfo_mse(&sc, snr, args.draws, sc.cfg.seed) {
                table.rows.push(row("theory", v));
            }
            table.rows.push(row("asymptotic", asymptotic_mse(sc.cfg.signal_power, n2, m, sc.cfg.subcarriers)));
        }
    }
    write_outputs("analyze", &base, base.cfg.seed, None, &table, &args.common, Axis::Snr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    Snr,
    Iteration,
}

pub fn csv_string(table: &MetricsTable) -> String {
    let mut s = String::from("scenario,scheme,snr_db,metric,value,ci95,trials\n");
    for r in &table.rows {
        let _ = writeln!(s, "{},{},{},{},{:.8e},{:.8e},{}", r.scenario, r.scheme, r.snr_db, r.metric, r.value, r.ci95, r.trials);
    }
    s
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

/// Per-curve `x value ci95` series.
fn curves(table: &MetricsTable, axis: Axis) -> BTreeMap<String, Vec<(f64, f64, f64)>> {
    let mut out: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for r in &table.rows {
        let (key, x) = match axis {
            Axis::Snr => (format!("{}_{}_{}", r.scenario, r.scheme, r.metric), r.snr_db),
            Axis::Iteration => {
                let it = r.metric.trim_start_matches("cfo_mse_iter_").parse::<f64>().unwrap_or(f64::NAN);
                (format!("{}_{}_snr{}", r.scenario, r.scheme, r.snr_db), it)
            }
        };
        out.entry(key).or_default().push((x, r.value, r.ci95));
    }
    for v in out.values_mut() {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

fn write_outputs(command: &str, sc: &Scenario, seed: u64, threads: Option<usize>, table: &MetricsTable, common: &CommonArgs, axis: Axis) -> Result<Vec<PathBuf>, CliError> {
    let dir = &common.out;
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.display().to_string(), source })?;
    let mut written = Vec::new();
    let main = match common.format {
        Format::Csv => (dir.join("results.csv"), csv_string(table)),
        Format::Json => (dir.join("results.json"), serde_json::to_string_pretty(table).unwrap_or_default()),
    };
    write_file(&main.0, &main.1)?;
    written.push(main.0);
    let xlabel = match axis {
        Axis::Snr => "snr_db",
        Axis::Iteration => "iteration",
    };
    let series = curves(table, axis);
    for (name, pts) in &series {
        let mut s = format!("# {xlabel} value ci95\n");
        for (x, v, c) in pts {
            let _ = writeln!(s, "{x} {v:.8e} {c:.8e}");
        }
        let p = dir.join(format!("{name}.dat"));
        write_file(&p, &s)?;
        written.push(p);
    }
    if common.svg {
        let by_metric = series.iter().fold(BTreeMap::<String, Vec<(&String, &Vec<(f64, f64, f64)>)>>::new(), |mut acc, (k, v)| {
            let metric = if axis == Axis::Snr { k.rsplit_once("_cfo_mse").map(|_| "cfo_mse").unwrap_or("ser") } else { "convergence" };
            acc.entry(metric.to_string()).or_default().push((k, v));
            acc
        });
        for (metric, lines) in by_metric {
            let p = dir.join(format!("{metric}.svg"));
            write_file(&p, &svg_chart(&metric, xlabel, &lines))?;
            written.push(p);
        }
    }
    let manifest_path = dir.join("manifest.json");
    let mut outputs: Vec<String> = written.iter().map(|p| p.display().to_string()).collect();
    outputs.push(manifest_path.display().to_string());
    let manifest = RunManifest {
        command: command.into(),
        config: scenario_to_json(sc),
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        threads,
        outputs,
    };
    write_file(&manifest_path, &serde_json::to_string_pretty(&manifest).unwrap_or_default())?;
    written.push(manifest_path);
    Ok(written)
}

/// Log-y line chart.
fn svg_chart(title: &str, xlabel: &str, lines: &[(&String, &Vec<(f64, f64, f64)>)]) -> String {
    let (w, h, pad) = (720.0, 480.0, 60.0);
    let pts: Vec<(f64, f64)> = lines.iter().flat_map(|(_, v)| v.iter().filter(|p| p.1 > 0.0).map(|p| (p.0, p.1.log10()))).collect();
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let _ = writeln!(s, "<text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{title}</text>", w / 2.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{xlabel}</text>", w / 2.0, h - 12.0);
    if pts.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let (x0, x1) = pts.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (y0, y1) = pts.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    let (y0, y1) = (y0.floor(), y1.ceil().max(y0.floor() + 1.0));
    let sx = |x: f64| pad + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let _ = writeln!(s, "<rect x=\"{pad}\" y=\"{pad}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>", w - 2.0 * pad, h - 2.0 * pad);
    let mut e = y0 as i32;
    while e <= y1 as i32 {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">1e{e}</text>", pad - 4.0, sy(e as f64) + 3.0);
        e += 1;
    }
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"];
    for (i, (name, v)) in lines.iter().enumerate() {
        let color = palette[i % palette.len()];
        let path: Vec<String> = v.iter().filter(|p| p.1 > 0.0).map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1.log10()))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", path.join(" "));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"{color}\">{name}</text>", w - pad + 4.0 - 200.0, pad + 14.0 * (i as f64 + 1.0));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let lc = parse_config("").unwrap();
        let c = &lc.scenario.cfg;
        assert_eq!((c.subcarriers, c.antennas, c.taps, c.cp_len, c.fft_size, c.iterations), (64, 128, 10, 9, 256, 5));
        assert!((c.angular_spread - 5f64.to_radians()).abs() < 1e-15);
        assert!((c.guard - 25f64.to_radians()).abs() < 1e-12);
        assert_eq!(c.qualify_threshold, 10.0);
        assert!((c.critical_threshold - 2.0 / 3.0).abs() < 1e-15);
        assert!(lc.explicit.is_empty());
    }

    #[test]
    fn short_cp_rejected_with_key() {
        let err = parse_config("n_cp = 5\nl = 10").unwrap_err();
        assert!(matches!(&err, CliError::Config(m) if m.starts_with("n_cp")), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn angle_units() {
        let lc = parse_config("theta_as = 5deg").unwrap();
        assert!((lc.scenario.cfg.angular_spread - 0.0873).abs() < 1e-4);
        let lc = parse_config(r#"{"theta_as": "0.1rad", "g": 30}"#).unwrap();
        assert_eq!(lc.scenario.cfg.angular_spread, 0.1);
        assert!((lc.scenario.cfg.guard - PI / 6.0).abs() < 1e-15);
        assert!(parse_config("theta_as = fivedeg").is_err());
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        assert!(matches!(parse_config("bogus = 1"), Err(CliError::Config(m)) if m.contains("bogus")));
        assert!(parse_config("m = 64\nantennas = 64").is_err());
        assert!(parse_config(r#"{"schemes": ["fs_beam", "rmce"]}"#).is_err());
    }

    #[test]
    fn taps_change_resets_pdp() {
        let lc = parse_config("l = 4\nn_cp = 3").unwrap();
        assert_eq!(lc.scenario.cfg.pdp, vec![0.25; 4]);
    }

    #[test]
    fn json_round_trip() {
        let text = "k = 2\ndoas = 40, 100\nsnr = [0, 10]\nschemes = fs_beam, sync_perfect_zf\nphi_max = 0.1\ndistance_rule = min\nsnr_mode = overall";
        let a = parse_config(text).unwrap().scenario;
        let b = parse_config(&scenario_to_json(&a).to_string()).unwrap().scenario;
        assert_eq!(a, b);
        assert_eq!(a.snr_points, vec![0.0, 10.0]);
        assert_eq!(a.schemes, vec![Scheme::FsBeam, Scheme::SyncPerfectZf]);
        let mut r = a.clone();
        r.doa_mode = DoaMode::RandomSectors;
        assert_eq!(parse_config(&scenario_to_json(&r).to_string()).unwrap().scenario, r);
    }

    #[test]
    fn doa_count_must_match_users() {
        assert!(parse_config("k = 3\ndoas = 40, 100").is_err());
    }

    #[test]
    fn csv_uses_nine_significant_digits() {
        let table = MetricsTable {
            rows: vec![MetricRow {
                scenario: "s".into(),
                scheme: "fs_beam".into(),
                snr_db: 10.0,
                metric: "cfo_mse".into(),
                value: 1.0 / 3.0,
                ci95: 0.0,
                trials: 3,
            }],
        };
        let s = csv_string(&table);
        assert_eq!(s, "scenario,scheme,snr_db,metric,value,ci95,trials\ns,fs_beam,10,cfo_mse,3.33333333e-1,0.00000000e0,3\n");
    }

    #[test]
    fn threads_argument() {
        assert_eq!(parse_threads(Some("auto")).unwrap(), None);
        assert_eq!(parse_threads(Some("3")).unwrap(), Some(3));
        assert!(parse_threads(Some("0")).is_err());
        assert!(parse_threads(Some("many")).is_err());
    }
}
