//! Run configuration: a TOML file with `[input]` or `[synthetic]`, plus
//! optional `[analysis]`, `[binning]` and `[output]` sections. Every omitted
//! key resolves to a documented default, and [`PipelineConfig::to_toml`]
//! echoes the fully resolved form.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use toml::{Table, Value};
use windstate::timeseries::DEFAULT_SAMPLE_INTERVAL;
use windstate::{BinningConfig, Complex64, FarmScenario, LagSet, PowerCurve};

use crate::error::CliError;

pub const DEFAULT_LAGS: usize = 12;
pub const DEFAULT_Q_MAX: usize = 10;
pub const DEFAULT_TAU_MAX: usize = 10;
/// One day of 10-minute samples.
pub const DEFAULT_TAU_CAP: usize = 144;
pub const DEFAULT_PROFILE_MODES: usize = 3;
pub const DEFAULT_HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub enum InputSource {
    Files {
        velocity: PathBuf,
        power: PathBuf,
        allow_gaps: bool,
        sample_interval: f64,
    },
    Synthetic(FarmScenario),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub lags: LagSet,
    pub q_range: Vec<usize>,
    pub tau_range: Vec<usize>,
    pub tau_cap: usize,
    /// Number of leading modes written to the mode-profile export.
    pub profile_modes: usize,
    /// Grid cell whose joint density is exported.
    pub density_q: usize,
    pub density_tau: usize,
    pub histogram_bins: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub cache: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub source: InputSource,
    pub analysis: AnalysisConfig,
    pub binning: BinningConfig,
    pub output: OutputConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub no_cache: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    input: Option<RawInput>,
    synthetic: Option<RawSynthetic>,
    #[serde(default)]
    analysis: RawAnalysis,
    #[serde(default)]
    binning: RawBinning,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInput {
    velocity: Option<PathBuf>,
    power: Option<PathBuf>,
    allow_gaps: Option<bool>,
    sample_interval: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSynthetic {
    n_turbines: Option<usize>,
    n_steps: Option<usize>,
    seed: Option<u64>,
    correlation_length: Option<f64>,
    mean_wind: Option<[f64; 2]>,
    ou_theta: Option<f64>,
    ou_sigma: Option<f64>,
    cut_in: Option<f64>,
    rated_speed: Option<f64>,
    rated_power: Option<f64>,
    sample_interval: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnalysis {
    lags: Option<RangeSpec>,
    q_range: Option<RangeSpec>,
    tau_range: Option<RangeSpec>,
    tau_cap: Option<usize>,
    profile_modes: Option<usize>,
    density_q: Option<usize>,
    density_tau: Option<usize>,
    histogram_bins: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBinning {
    n_state_bins: Option<usize>,
    n_return_bins: Option<usize>,
    min_samples_per_bin: Option<u64>,
    state_range: Option<[f64; 2]>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    cache: Option<bool>,
}

/// Either an explicit list or an inclusive `"a..b"` range.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RangeSpec {
    List(Vec<usize>),
    Text(String),
}

impl RangeSpec {
    fn resolve(&self, key: &str) -> Result<Vec<usize>, String> {
        match self {
            RangeSpec::List(v) => Ok(v.clone()),
            RangeSpec::Text(s) => {
                let bad = || format!("{key}: expected \"a..b\" or a list, got \"{s}\"");
                let (a, b) = s.split_once("..").ok_or_else(bad)?;
                let a: usize = a.trim().parse().map_err(|_| bad())?;
                let b: usize = b.trim().parse().map_err(|_| bad())?;
                Ok((a..=b).collect())
            }
        }
    }
}

/// Reads and validates a config file. Relative paths inside the file are
/// resolved against its directory.
pub fn validate_config(path: impl AsRef<Path>) -> Result<PipelineConfig, CliError> {
    validate_config_with(path, &Overrides::default())
}

pub fn validate_config_with(
    path: impl AsRef<Path>,
    overrides: &Overrides,
) -> Result<PipelineConfig, CliError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base, overrides).map_err(CliError::Config)
}

/// Parses config text, collecting every violation rather than stopping at
/// the first.
pub fn parse_config(
    text: &str,
    base: &Path,
    overrides: &Overrides,
) -> Result<PipelineConfig, Vec<String>> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| vec![e.message().to_string()])?;
    let mut errors = Vec::new();

    let source = match (&raw.input, &raw.synthetic) {
        (Some(input), Some(_)) => {
            errors.push("exactly one input source: set [input] or [synthetic]".to_string());
            resolve_input(input, base, &mut errors);
            None
        }
        (None, None) => {
            errors.push("exactly one input source: set [input] or [synthetic]".to_string());
            None
        }
        (Some(input), None) => resolve_input(input, base, &mut errors),
        (None, Some(syn)) => Some(InputSource::Synthetic(resolve_synthetic(syn, &mut errors))),
    };
    if let Some(InputSource::Synthetic(scn)) = &source {
        if let Some(seed) = overrides.seed.filter(|&s| s > i64::MAX as u64) {
            errors.push(format!("seed {seed} exceeds the largest accepted seed {}", i64::MAX));
        } else if scn.seed > i64::MAX as u64 {
            errors.push(format!("synthetic: seed exceeds {}", i64::MAX));
        }
    }
    let source = match (source, overrides.seed) {
        (Some(InputSource::Synthetic(mut scn)), Some(seed)) => {
            scn.seed = seed;
            Some(InputSource::Synthetic(scn))
        }
        (Some(InputSource::Files { .. }), Some(_)) => {
            errors.push("--seed requires a [synthetic] scenario".to_string());
            None
        }
        (s, _) => s,
    };

    let analysis = resolve_analysis(&raw.analysis, &mut errors);
    let binning = resolve_binning(&raw.binning, &mut errors);
    let output = OutputConfig {
        dir: overrides
            .out
            .clone()
            .unwrap_or_else(|| base.join(raw.output.dir.as_deref().unwrap_or(Path::new("out")))),
        cache: raw.output.cache.unwrap_or(true) && !overrides.no_cache,
    };

    if let (Some(InputSource::Synthetic(scn)), Some(a)) = (&source, &analysis) {
        if 2 * a.lags.max_lag() >= scn.n_steps {
            errors.push(format!(
                "largest lag {} needs more than {} steps",
                a.lags.max_lag(),
                2 * a.lags.max_lag()
            ));
        }
    }

    match (source, analysis, binning) {
        (Some(source), Some(analysis), Some(binning)) if errors.is_empty() => Ok(PipelineConfig {
            source,
            analysis,
            binning,
            output,
        }),
        _ => Err(errors),
    }
}

fn message(e: windstate::Error) -> String {
    match e {
        windstate::Error::Argument(m) => m,
        other => other.to_string(),
    }
}

fn resolve_input(input: &RawInput, base: &Path, errors: &mut Vec<String>) -> Option<InputSource> {
    let mut file = |key: &str, p: &Option<PathBuf>| match p {
        None => {
            errors.push(format!("input.{key} is required"));
            None
        }
        Some(p) => {
            let full = base.join(p);
            if full.is_file() {
                Some(full)
            } else {
                errors.push(format!("input.{key}: file not found: {}", full.display()));
                None
            }
        }
    };
    let velocity = file("velocity", &input.velocity);
    let power = file("power", &input.power);
    let sample_interval = input.sample_interval.unwrap_or(DEFAULT_SAMPLE_INTERVAL);
    if !(sample_interval > 0.0 && sample_interval.is_finite()) {
        errors.push("input.sample_interval must be positive".to_string());
    }
    Some(InputSource::Files {
        velocity: velocity?,
        power: power?,
        allow_gaps: input.allow_gaps.unwrap_or(false),
        sample_interval,
    })
}

fn resolve_synthetic(raw: &RawSynthetic, errors: &mut Vec<String>) -> FarmScenario {
    let d = FarmScenario::default();
    let pc = PowerCurve::default();
    let scn = FarmScenario {
        n_turbines: raw.n_turbines.unwrap_or(d.n_turbines),
        n_steps: raw.n_steps.unwrap_or(d.n_steps),
        seed: raw.seed.unwrap_or(d.seed),
        correlation_length: raw.correlation_length.unwrap_or(d.correlation_length),
        mean_wind: raw
            .mean_wind
            .map_or(d.mean_wind, |[re, im]| Complex64::new(re, im)),
        ou_theta: raw.ou_theta.unwrap_or(d.ou_theta),
        ou_sigma: raw.ou_sigma.unwrap_or(d.ou_sigma),
        power_curve: PowerCurve {
            cut_in: raw.cut_in.unwrap_or(pc.cut_in),
            rated_speed: raw.rated_speed.unwrap_or(pc.rated_speed),
            rated_power: raw.rated_power.unwrap_or(pc.rated_power),
        },
        sample_interval: raw.sample_interval.unwrap_or(d.sample_interval),
    };
    if let Err(e) = scn.validate() {
        errors.extend(message(e).split("; ").map(|m| format!("synthetic: {m}")));
    }
    scn
}

fn range(
    spec: &Option<RangeSpec>,
    key: &str,
    default: Vec<usize>,
    errors: &mut Vec<String>,
) -> Vec<usize> {
    let mut v = match spec.as_ref().map(|s| s.resolve(key)) {
        None => default,
        Some(Ok(v)) => v,
        Some(Err(e)) => {
            errors.push(e);
            return Vec::new();
        }
    };
    if v.is_empty() {
        errors.push(format!("{key} must be non-empty"));
    }
    v.sort_unstable();
    v.dedup();
    v
}

fn resolve_analysis(raw: &RawAnalysis, errors: &mut Vec<String>) -> Option<AnalysisConfig> {
    let before = errors.len();
    let lag_values = match raw.lags.as_ref().map(|s| s.resolve("lags")) {
        None => (0..=DEFAULT_LAGS).collect(),
        Some(Ok(v)) => v,
        Some(Err(e)) => {
            errors.push(e);
            Vec::new()
        }
    };
    let lags = match LagSet::new(lag_values) {
        Ok(l) => Some(l),
        Err(e) => {
            errors.push(format!("lags: {}", message(e)));
            None
        }
    };
    let q_range = range(&raw.q_range, "q_range", (1..=DEFAULT_Q_MAX).collect(), errors);
    let tau_range = range(&raw.tau_range, "tau_range", (1..=DEFAULT_TAU_MAX).collect(), errors);
    let tau_cap = raw.tau_cap.unwrap_or(DEFAULT_TAU_CAP);
    if q_range.first() == Some(&0) {
        errors.push("q_range: orders start at 1".to_string());
    }
    if tau_range.first() == Some(&0) {
        errors.push("tau_range: horizons start at 1".to_string());
    }
    if let Some(&t) = tau_range.last() {
        if t > tau_cap {
            errors.push(format!("tau_range: {t} exceeds tau_cap {tau_cap}"));
        }
    }
    let density_q = raw.density_q.or(q_range.first().copied()).unwrap_or(1);
    let density_tau = raw.density_tau.or(tau_range.first().copied()).unwrap_or(1);
    if !q_range.is_empty() && !q_range.contains(&density_q) {
        errors.push(format!("density_q {density_q} is not in q_range"));
    }
    if !tau_range.is_empty() && !tau_range.contains(&density_tau) {
        errors.push(format!("density_tau {density_tau} is not in tau_range"));
    }
    let histogram_bins = raw.histogram_bins.unwrap_or(DEFAULT_HISTOGRAM_BINS);
    if histogram_bins == 0 {
        errors.push("histogram_bins must be at least 1".to_string());
    }
    if errors.len() > before {
        return None;
    }
    Some(AnalysisConfig {
        lags: lags?,
        q_range,
        tau_range,
        tau_cap,
        profile_modes: raw.profile_modes.unwrap_or(DEFAULT_PROFILE_MODES),
        density_q,
        density_tau,
        histogram_bins,
    })
}

fn resolve_binning(raw: &RawBinning, errors: &mut Vec<String>) -> Option<BinningConfig> {
    let d = BinningConfig::default();
    let cfg = BinningConfig {
        n_state_bins: raw.n_state_bins.unwrap_or(d.n_state_bins),
        n_return_bins: raw.n_return_bins.unwrap_or(d.n_return_bins),
        min_samples_per_bin: raw.min_samples_per_bin.unwrap_or(d.min_samples_per_bin),
        state_range: raw.state_range.map(|[lo, hi]| (lo, hi)),
    };
    match cfg.validate() {
        Ok(()) => Some(cfg),
        Err(e) => {
            errors.push(format!("binning: {}", message(e)));
            None
        }
    }
}

fn ints(v: &[usize]) -> Value {
    Value::Array(v.iter().map(|&x| Value::Integer(x as i64)).collect())
}

impl PipelineConfig {
    /// Fully resolved config as TOML, defaults included. Input paths and
    /// the output section are left out unless `with_locations` is set, so
    /// that the portable form depends only on what affects results.
    pub fn to_toml_table(&self, with_locations: bool) -> Table {
        let mut root = Table::new();
        match &self.source {
            InputSource::Files {
                velocity,
                power,
                allow_gaps,
                sample_interval,
            } => {
                let mut t = Table::new();
                if with_locations {
                    t.insert("velocity".into(), velocity.display().to_string().into());
                    t.insert("power".into(), power.display().to_string().into());
                }
                t.insert("allow_gaps".into(), (*allow_gaps).into());
                t.insert("sample_interval".into(), (*sample_interval).into());
                root.insert("input".into(), t.into());
            }
            InputSource::Synthetic(s) => {
                let mut t = Table::new();
                t.insert("n_turbines".into(), (s.n_turbines as i64).into());
                t.insert("n_steps".into(), (s.n_steps as i64).into());
                t.insert("seed".into(), (s.seed as i64).into());
                t.insert("correlation_length".into(), s.correlation_length.into());
                t.insert(
                    "mean_wind".into(),
                    Value::Array(vec![s.mean_wind.re.into(), s.mean_wind.im.into()]),
                );
                t.insert("ou_theta".into(), s.ou_theta.into());
                t.insert("ou_sigma".into(), s.ou_sigma.into());
                t.insert("cut_in".into(), s.power_curve.cut_in.into());
                t.insert("rated_speed".into(), s.power_curve.rated_speed.into());
                t.insert("rated_power".into(), s.power_curve.rated_power.into());
                t.insert("sample_interval".into(), s.sample_interval.into());
                root.insert("synthetic".into(), t.into());
            }
        }

        let a = &self.analysis;
        let mut t = Table::new();
        t.insert("lags".into(), ints(a.lags.lags()));
        t.insert("q_range".into(), ints(&a.q_range));
        t.insert("tau_range".into(), ints(&a.tau_range));
        t.insert("tau_cap".into(), (a.tau_cap as i64).into());
        t.insert("profile_modes".into(), (a.profile_modes as i64).into());
        t.insert("density_q".into(), (a.density_q as i64).into());
        t.insert("density_tau".into(), (a.density_tau as i64).into());
        t.insert("histogram_bins".into(), (a.histogram_bins as i64).into());
        root.insert("analysis".into(), t.into());

        let b = &self.binning;
        let mut t = Table::new();
        t.insert("n_state_bins".into(), (b.n_state_bins as i64).into());
        t.insert("n_return_bins".into(), (b.n_return_bins as i64).into());
        t.insert("min_samples_per_bin".into(), (b.min_samples_per_bin as i64).into());
        if let Some((lo, hi)) = b.state_range {
            t.insert("state_range".into(), Value::Array(vec![lo.into(), hi.into()]));
        }
        root.insert("binning".into(), t.into());

        if with_locations {
            let mut t = Table::new();
            t.insert("dir".into(), self.output.dir.display().to_string().into());
            t.insert("cache".into(), self.output.cache.into());
            root.insert("output".into(), t.into());
        }
        root
    }

    pub fn to_toml(&self, with_locations: bool) -> String {
        toml::to_string(&self.to_toml_table(with_locations)).expect("config tables serialize")
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self.source, InputSource::Synthetic(_))
    }
}
