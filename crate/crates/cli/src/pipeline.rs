//! Stage orchestration, on-disk cache and run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use windstate::export;
use windstate::timeseries::{
    load_power_series, load_velocity_field, write_power_series, write_velocity_field, PowerIngest,
    VelocityIngest,
};
use windstate::{
    assemble_master, build_table_from_states, compute_states, decompose, generate,
    optimize_policy, state_summary, structure_report, LagSet, MasterMatrix, Modes, OptimalPolicy,
    PowerSeries, SpectralBasis, StructureReport, VelocityField,
};

use crate::config::{InputSource, PipelineConfig};
use crate::error::CliError;

pub const ARTIFACT_VERSION: &str = concat!("windstate ", env!("CARGO_PKG_VERSION"));
const CACHE_FORMAT: &str = "cache-1";

pub const STRUCTURE_FILE: &str = "structure.json";
pub const SPECTRUM_FILE: &str = "spectrum.csv";
pub const PROFILE_FILE: &str = "mode_profiles.csv";
pub const STATE_FILE: &str = "state.csv";
pub const HISTOGRAM_FILE: &str = "state_histogram.csv";
pub const DENSITY_FILE: &str = "joint_density.csv";
pub const TABLE_FILE: &str = "risk_return.csv";
pub const POLICY_FILE: &str = "policy.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const INCOMPLETE_FILE: &str = "INCOMPLETE";
pub const CACHE_DIR: &str = "cache";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Analyze,
    Spectrum,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Analyze => "analyze",
            Command::Spectrum => "spectrum",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    fn of(name: &str, bytes: &[u8]) -> Self {
        Self {
            name: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub n_turbines: usize,
    pub n_steps: usize,
    pub master_dim: usize,
    pub retained_modes: usize,
    /// `(q, explained fraction)` for each order in the q range.
    pub explained_variance: Vec<(usize, f64)>,
    pub toeplitz_warning: bool,
    pub covered_state_bins: Option<usize>,
    pub excluded_state_bins: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub artifact_version: String,
    pub command: String,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
    pub summary: RunSummary,
    /// Hash of version, command, config and input hashes.
    pub manifest_sha256: String,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub cache_hit: bool,
}

/// Figures written to the structure report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureDoc {
    pub n_turbines: usize,
    pub lags: Vec<usize>,
    pub max_abs_entry: f64,
    pub hermitian_abs: f64,
    pub hermitian_rel: f64,
    pub pre_symmetrization_abs: f64,
    pub pre_symmetrization_rel: f64,
    pub toeplitz_abs: f64,
    pub toeplitz_rel: f64,
    pub toeplitz_warning: bool,
    pub spectral: Option<SpectralDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralDoc {
    pub retained_modes: usize,
    pub worst_residual: f64,
    pub residual_scale: f64,
    pub worst_orthonormality: f64,
    /// Only present when every mode is retained.
    pub reconstruction_max_abs: Option<f64>,
}

impl StructureDoc {
    fn new(n_turbines: usize, lags: &LagSet, r: &StructureReport) -> Self {
        Self {
            n_turbines,
            lags: lags.lags().to_vec(),
            max_abs_entry: r.max_abs_entry,
            hermitian_abs: r.hermitian_abs,
            hermitian_rel: r.hermitian_rel,
            pre_symmetrization_abs: r.pre_symmetrization_abs,
            pre_symmetrization_rel: r.pre_symmetrization_rel,
            toeplitz_abs: r.toeplitz_abs,
            toeplitz_rel: r.toeplitz_rel,
            toeplitz_warning: r.toeplitz_warning(),
            spectral: None,
        }
    }
}

fn spectral_doc(basis: &SpectralBasis, master: &MasterMatrix) -> SpectralDoc {
    let checks = basis.check_against(master.entries());
    let reconstruction_max_abs = (basis.n_retained() == basis.dim()).then(|| {
        (basis.reconstruct() - master.entries())
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    });
    SpectralDoc {
        retained_modes: basis.n_retained(),
        worst_residual: checks.worst_residual,
        residual_scale: checks.residual_scale,
        worst_orthonormality: checks.worst_orthonormality,
        reconstruction_max_abs,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn stage<T>(name: &'static str, r: windstate::Result<T>) -> Result<T, CliError> {
    r.map_err(|source| CliError::Stage {
        stage: name,
        source,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

struct Loaded {
    field: VelocityField,
    power: PowerSeries,
    inputs: Vec<FileDigest>,
}

fn load(cfg: &PipelineConfig) -> Result<Loaded, CliError> {
    match &cfg.source {
        InputSource::Files {
            velocity,
            power,
            allow_gaps,
            sample_interval,
        } => {
            let inputs = vec![
                FileDigest::of(&file_name(velocity), &read_bytes(velocity)?),
                FileDigest::of(&file_name(power), &read_bytes(power)?),
            ];
            let field = stage(
                "load",
                load_velocity_field(
                    velocity,
                    &VelocityIngest {
                        allow_gaps: *allow_gaps,
                        sample_interval: Some(*sample_interval),
                        ..Default::default()
                    },
                ),
            )?;
            let power = stage(
                "load",
                load_power_series(
                    power,
                    &PowerIngest {
                        expected_len: Some(field.n_steps()),
                        allow_gaps: *allow_gaps,
                    },
                ),
            )?;
            info!(
                "loaded {} turbines x {} steps from {}",
                field.n_turbines(),
                field.n_steps(),
                velocity.display()
            );
            Ok(Loaded {
                field,
                power,
                inputs,
            })
        }
        InputSource::Synthetic(scn) => {
            let (field, power) = stage("generate", generate(scn))?;
            info!(
                "generated {} turbines x {} steps (seed {})",
                scn.n_turbines, scn.n_steps, scn.seed
            );
            Ok(Loaded {
                field,
                power,
                inputs: Vec::new(),
            })
        }
    }
}

/// Tracks files written by one run so a failure can withdraw them.
struct OutputRun {
    dir: PathBuf,
    written: Vec<String>,
}

impl OutputRun {
    fn begin(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        for stale in [MANIFEST_FILE, INCOMPLETE_FILE] {
            let p = dir.join(stale);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| CliError::io(&p, e))?;
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    fn digests(&self) -> Result<Vec<FileDigest>, CliError> {
        self.written
            .iter()
            .map(|n| Ok(FileDigest::of(n, &read_bytes(&self.dir.join(n))?)))
            .collect()
    }

    fn abort(&self, err: &CliError) {
        for n in &self.written {
            let _ = fs::remove_file(self.dir.join(n));
        }
        let stage = match err {
            CliError::Stage { stage, .. } => stage,
            _ => "output",
        };
        let _ = fs::write(
            self.dir.join(INCOMPLETE_FILE),
            format!("stage: {stage}\nerror: {err}\n"),
        );
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Master matrix, basis and structure figures, computed or read from cache.
struct SpectralStage {
    master: MasterMatrix,
    basis: SpectralBasis,
    structure: StructureDoc,
    cache_hit: bool,
}

fn cache_key(cfg: &PipelineConfig, inputs: &[FileDigest], n_modes: usize) -> String {
    let mut source = cfg.to_toml_table(false);
    source.remove("analysis");
    source.remove("binning");
    let mut h = Sha256::new();
    h.update(ARTIFACT_VERSION.as_bytes());
    h.update(CACHE_FORMAT.as_bytes());
    h.update(toml::to_string(&source).expect("config tables serialize").as_bytes());
    for d in inputs {
        h.update(d.sha256.as_bytes());
    }
    h.update(format!("{:?};{n_modes}", cfg.analysis.lags.lags()).as_bytes());
    hex::encode(h.finalize())
}

fn spectral_stage(
    cfg: &PipelineConfig,
    data: &Loaded,
    n_modes: usize,
) -> Result<SpectralStage, CliError> {
    let lags = &cfg.analysis.lags;
    let nw = data.field.n_turbines();
    let cache = cfg.output.cache.then(|| {
        let key = cache_key(cfg, &data.inputs, n_modes);
        let dir = cfg.output.dir.join(CACHE_DIR);
        (dir.join(format!("{key}.master.bin")), dir.join(format!("{key}.basis.bin")), dir.join(format!("{key}.structure.json")), dir)
    });

    if let Some((m_path, b_path, s_path, _)) = &cache {
        if m_path.is_file() && b_path.is_file() && s_path.is_file() {
            let cached = (|| -> Result<_, CliError> {
                let master = stage("cache", MasterMatrix::read_dump(m_path, nw, lags.clone()))?;
                let basis = stage("cache", SpectralBasis::read_dump(b_path, nw, lags.clone()))?;
                let structure: StructureDoc = serde_json::from_slice(&read_bytes(s_path)?)
                    .map_err(|e| CliError::Check(format!("{}: {e}", s_path.display())))?;
                Ok((master, basis, structure))
            })();
            match cached {
                Ok((master, basis, structure)) => {
                    info!("covariance and spectral stages restored from cache");
                    return Ok(SpectralStage {
                        master,
                        basis,
                        structure,
                        cache_hit: true,
                    });
                }
                Err(e) => warn!("ignoring unreadable cache entry: {e}"),
            }
        }
    }

    info!("assembling {0}x{0} master matrix", nw * lags.len());
    let master = stage("covariance", assemble_master(&data.field, lags))?;
    let report = stage("covariance", structure_report(&data.field, lags, &master))?;
    let structure = StructureDoc::new(nw, lags, &report);
    if !report.is_hermitian() {
        return Err(CliError::Stage {
            stage: "covariance",
            source: windstate::Error::Numerical {
                message: "master matrix is not Hermitian".into(),
                worst: report.hermitian_rel,
            },
        });
    }
    if report.toeplitz_warning() {
        warn!(
            "block-Toeplitz deviation {:.3e} relative (finite-sample window effect)",
            report.toeplitz_rel
        );
    }
    let basis = stage("spectral", decompose(&master, Modes::Count(n_modes)))?;

    if let Some((m_path, b_path, s_path, dir)) = &cache {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        stage("cache", master.write_dump(m_path))?;
        stage("cache", basis.write_dump(b_path))?;
        write_json(s_path, &structure)?;
    }
    Ok(SpectralStage {
        master,
        basis,
        structure,
        cache_hit: false,
    })
}

/// Runs `analyze` or `spectrum` into the configured output directory. On
/// failure the files written so far are removed and an `INCOMPLETE` marker
/// records the failing stage.
pub fn run_pipeline(cfg: &PipelineConfig, command: Command) -> Result<RunOutcome, CliError> {
    let mut out = OutputRun::begin(&cfg.output.dir)?;
    let result = run_stages(cfg, command, &mut out);
    if let Err(e) = &result {
        out.abort(e);
    }
    result
}

fn run_stages(
    cfg: &PipelineConfig,
    command: Command,
    out: &mut OutputRun,
) -> Result<RunOutcome, CliError> {
    let a = &cfg.analysis;
    let data = load(cfg)?;
    let dim = data.field.n_turbines() * a.lags.len();
    let q_top = a.q_range.last().copied().unwrap_or(1);
    let n_modes = q_top.max(a.profile_modes).clamp(1, dim.max(1));
    if q_top > dim {
        return Err(CliError::Stage {
            stage: "spectral",
            source: windstate::Error::Argument(format!(
                "q_range reaches {q_top} but the master matrix has only {dim} modes"
            )),
        });
    }

    let spec = spectral_stage(cfg, &data, n_modes)?;
    let mut structure = spec.structure.clone();
    structure.spectral = Some(spectral_doc(&spec.basis, &spec.master));
    write_json(&out.path(STRUCTURE_FILE), &structure)?;
    stage("export", export::write_spectrum(out.path(SPECTRUM_FILE), &spec.basis))?;
    stage(
        "export",
        export::write_mode_profiles(out.path(PROFILE_FILE), &spec.basis, a.profile_modes),
    )?;

    let mut summary = RunSummary {
        n_turbines: data.field.n_turbines(),
        n_steps: data.field.n_steps(),
        master_dim: dim,
        retained_modes: spec.basis.n_retained(),
        explained_variance: a
            .q_range
            .iter()
            .map(|&q| (q, spec.basis.explained_fractions()[q - 1]))
            .collect(),
        toeplitz_warning: structure.toeplitz_warning,
        covered_state_bins: None,
        excluded_state_bins: None,
    };

    if command == Command::Analyze {
        let states = stage(
            "state",
            compute_states(&data.field, &spec.basis, &a.lags, &a.q_range),
        )?;
        stage("export", export::write_states(out.path(STATE_FILE), &states))?;
        let summaries = a
            .q_range
            .iter()
            .map(|&q| state_summary(&states, q, a.histogram_bins))
            .collect::<windstate::Result<Vec<_>>>();
        let summaries = stage("state", summaries)?;
        stage(
            "export",
            export::write_state_histograms(out.path(HISTOGRAM_FILE), &summaries),
        )?;

        let (table, cells) = stage(
            "risk-return",
            build_table_from_states(&states, &data.power, &a.tau_range, &cfg.binning),
        )?;
        let qi = a.q_range.iter().position(|&q| q == a.density_q).unwrap_or(0);
        let ti = a.tau_range.iter().position(|&t| t == a.density_tau).unwrap_or(0);
        let cell = &cells[qi * a.tau_range.len() + ti];
        stage("export", export::write_density(out.path(DENSITY_FILE), &cell.density))?;
        stage("export", export::write_table(out.path(TABLE_FILE), &table))?;

        let policy = optimize_policy(&table);
        stage("export", export::write_policy(out.path(POLICY_FILE), &policy))?;
        summary.covered_state_bins = Some(policy.covered().count());
        summary.excluded_state_bins = Some(policy.excluded_bins().len());
    }

    let manifest = build_manifest(cfg, command, data.inputs, out.digests()?, summary);
    write_json(&cfg.output.dir.join(MANIFEST_FILE), &manifest)?;
    info!("wrote {} artifacts to {}", manifest.artifacts.len(), cfg.output.dir.display());
    Ok(RunOutcome {
        manifest,
        cache_hit: spec.cache_hit,
    })
}

fn build_manifest(
    cfg: &PipelineConfig,
    command: Command,
    inputs: Vec<FileDigest>,
    artifacts: Vec<FileDigest>,
    summary: RunSummary,
) -> Manifest {
    let config_text = cfg.to_toml(false);
    let config_sha256 = sha256_hex(config_text.as_bytes());
    let mut h = Sha256::new();
    h.update(ARTIFACT_VERSION.as_bytes());
    h.update([0]);
    h.update(command.name().as_bytes());
    h.update([0]);
    h.update(config_sha256.as_bytes());
    for d in &inputs {
        h.update([0]);
        h.update(d.sha256.as_bytes());
    }
    Manifest {
        artifact_version: ARTIFACT_VERSION.to_string(),
        command: command.name().to_string(),
        config_sha256,
        config: serde_json::to_value(cfg.to_toml_table(false)).expect("toml converts to json"),
        inputs,
        artifacts,
        summary,
        manifest_sha256: hex::encode(h.finalize()),
    }
}

/// Structure and spectral invariants without writing any artifact.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub structure: StructureDoc,
    pub failures: Vec<String>,
}

pub fn verify(cfg: &PipelineConfig) -> Result<VerifyReport, CliError> {
    let data = load(cfg)?;
    let lags = &cfg.analysis.lags;
    let master = stage("covariance", assemble_master(&data.field, lags))?;
    let report = stage("covariance", structure_report(&data.field, lags, &master))?;
    let mut structure = StructureDoc::new(data.field.n_turbines(), lags, &report);
    let mut failures = Vec::new();
    if !report.is_hermitian() {
        failures.push(format!("Hermitian deviation {:.3e}", report.hermitian_rel));
    }
    if report.pre_symmetrization_rel > windstate::covariance::HERMITIAN_TOLERANCE {
        failures.push(format!(
            "pre-symmetrization deviation {:.3e}",
            report.pre_symmetrization_rel
        ));
    }
    match decompose(&master, Modes::All) {
        Ok(basis) => {
            let doc = spectral_doc(&basis, &master);
            let tol = windstate::spectral::RESIDUAL_TOLERANCE;
            if let Some(r) = doc.reconstruction_max_abs {
                if r > tol * doc.residual_scale.max(f64::MIN_POSITIVE) {
                    failures.push(format!("reconstruction error {r:.3e}"));
                }
            }
            structure.spectral = Some(doc);
        }
        Err(e @ windstate::Error::Numerical { .. }) => failures.push(e.to_string()),
        Err(e) => return Err(CliError::Stage { stage: "spectral", source: e }),
    }
    Ok(VerifyReport {
        structure,
        failures,
    })
}

/// Recomputes the policy from a table previously written to `dir`.
pub fn policy_from_table(dir: &Path) -> Result<OptimalPolicy, CliError> {
    let table = stage("policy", export::read_table(dir.join(TABLE_FILE)))?;
    let policy = optimize_policy(&table);
    stage("export", export::write_policy(dir.join(POLICY_FILE), &policy))?;
    Ok(policy)
}

/// Writes the synthetic scenario's data as the ingestible CSV pair.
pub fn generate_data(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<FileDigest>, CliError> {
    let InputSource::Synthetic(scn) = &cfg.source else {
        return Err(CliError::Config(vec![
            "generate requires a [synthetic] scenario".to_string(),
        ]));
    };
    let (field, power) = stage("generate", generate(scn))?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let v = dir.join("velocity.csv");
    let p = dir.join("power.csv");
    stage("export", write_velocity_field(&v, &field))?;
    stage("export", write_power_series(&p, &power))?;
    Ok(vec![
        FileDigest::of("velocity.csv", &read_bytes(&v)?),
        FileDigest::of("power.csv", &read_bytes(&p)?),
    ])
}
