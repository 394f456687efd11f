//! Command-line front end driven by TOML run files.
//!
//! Every block of a run file rejects unknown keys. Failures are reported on
//! stderr as a single JSON object; configuration and input errors exit with
//! status 2, failures while running exit with status 1.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::estimate::{
    extrapolate, extrapolate_ensemble, horizon_rows, property_expectation, read_series_csv, virial_ratio,
    write_rows_csv, EstimateError, Extrapolation, FitModel, HorizonRow, PropertyEstimate,
};
use crate::quantities::{
    apply_offset, dissociation_energy, hydrogen_atom_reduced_mass_energy, ionization_potential, to_hartree,
    to_wavenumber, EnergyValue, Offset, OffsetValue, QuantityError, Unit, HYDROGEN_ATOM_ENERGY,
};
use crate::system::{presets, Configuration, HarmonicWell, Mode, Particle, Scaling, SystemError, SystemSpec};
use crate::trial::{
    derivative_check, lambda_t_estimate, AtomicProductTrial, CorrelatedExponentialTrial, CorrelatedTerm,
    DerivativeReport, GaussianTrial, SamplerBudget, TrialFunction,
};
use crate::walk::{run_ensemble_with, RunOptions, Start, WalkError, WalkParams, DEFAULT_BURN_IN};
use crate::Hamiltonian;

/// Version of the JSON documents written by this module.
pub const SCHEMA_VERSION: u32 = 1;

const DEFAULT_LAMBDA_WALKERS: usize = 200;
const DEFAULT_LAMBDA_TIME: f64 = 10.0;
const DEFAULT_N_MAX: u32 = 4;
/// Pairs closer than this are skipped when drawing `check-trial` points.
const CHECK_MIN_DISTANCE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{message}")]
    Config { key: Option<String>, message: String },
    #[error("{0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Quantity(#[from] QuantityError),
    #[error(transparent)]
    Walk(#[from] WalkError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn config(key: &str, message: impl ToString) -> Self {
        CliError::Config {
            key: Some(key.to_string()),
            message: message.to_string(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Input(_) => "input",
            CliError::Io { .. } => "io",
            CliError::Quantity(_) => "quantity",
            CliError::Walk(_) => "walk",
            CliError::Estimate(_) => "estimate",
            CliError::Runtime(_) => "runtime",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } | CliError::Input(_) | CliError::Quantity(_) => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> Value {
        let key = match self {
            CliError::Config { key, .. } => key.clone(),
            _ => None,
        };
        json!({ "error": { "kind": self.kind(), "key": key, "message": self.to_string() } })
    }
}

fn io_error(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_input(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Seed for an auxiliary random stream: SHA-256 of the user seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

// ---------------------------------------------------------------------------
// Run file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub system: SystemConfig,
    #[serde(default)]
    pub trial: TrialConfig,
    pub walk: WalkConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub offsets: Option<OffsetConfig>,
    #[serde(default)]
    pub scan: Option<ScanConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    HydrogenAtom,
    H2Ion,
    H2,
}

/// Exactly one of `preset`, `particles` or `harmonic`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub particles: Option<Vec<ParticleConfig>>,
    #[serde(default)]
    pub harmonic: Option<HarmonicConfig>,
    /// Defaults to `bo` for presets, and for particle lists to `bo` exactly
    /// when some particle has a position.
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub scaling: Option<Scaling>,
    #[serde(default)]
    pub reference_mass: Option<f64>,
    /// Bohr; places the two clamped particles on the z axis.
    #[serde(default)]
    pub bond_length: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleConfig {
    pub label: String,
    /// Electron masses.
    pub mass: f64,
    pub charge: f64,
    /// Clamps the particle here (bohr).
    #[serde(default)]
    pub position: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarmonicConfig {
    pub dim: usize,
    #[serde(default = "one")]
    pub omega: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrialForm {
    /// Plain Feynman-Kac walk without drift.
    #[default]
    None,
    Gaussian,
    AtomicProduct,
    Correlated,
}

/// Particles are referenced by label. Electrons default to the negatively
/// charged free particles and nuclei to the positively charged ones.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    #[serde(default)]
    pub form: TrialForm,
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Gaussian support; all free particles when absent.
    #[serde(default)]
    pub particles: Option<Vec<String>>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub symmetrized: Option<bool>,
    #[serde(default)]
    pub electrons: Option<Vec<String>>,
    #[serde(default)]
    pub nuclei: Option<Vec<String>>,
    #[serde(default)]
    pub terms: Vec<CorrelatedTerm>,
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub chi: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub symmetrize_electrons: Option<bool>,
    #[serde(default)]
    pub symmetrize_nuclei: Option<bool>,
    #[serde(default)]
    pub n_max: Option<u32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartKind {
    /// Burn in from `initial` (or a system guess) under the drifted walk.
    #[default]
    Sample,
    /// Every path starts at `initial`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkConfig {
    /// Steps per unit time.
    pub n: u32,
    pub horizons: Vec<f64>,
    /// Defaults to the last horizon.
    #[serde(default)]
    pub t_max: Option<f64>,
    pub n_rep: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fixed trial energy; sampled from the trial when absent.
    #[serde(default)]
    pub lambda_t: Option<f64>,
    /// Added to the trial energy, fixed or sampled.
    #[serde(default)]
    pub lambda_shift: f64,
    #[serde(default)]
    pub lambda_walkers: Option<usize>,
    #[serde(default)]
    pub lambda_time: Option<f64>,
    #[serde(default)]
    pub start: StartKind,
    #[serde(default)]
    pub burn_in: Option<f64>,
    /// Physical coordinates (bohr) of the free particles, three per particle.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    #[serde(default)]
    pub max_retries: Option<u32>,
    #[serde(default)]
    pub max_abort_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default)]
    pub model: FitModel,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Output directory; `--out-dir` takes precedence.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// File stem; defaults to `name`, then to the run file's stem.
    #[serde(default)]
    pub stem: Option<String>,
    /// Per-horizon CSV path, relative to the output directory.
    #[serde(default)]
    pub csv: Option<PathBuf>,
    /// Summary path, relative to the output directory.
    #[serde(default)]
    pub json: Option<PathBuf>,
    /// Keeps a per-path checkpoint next to the outputs and resumes from it.
    #[serde(default)]
    pub checkpoint: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetConfig {
    pub value: f64,
    #[serde(default)]
    pub sigma: f64,
    pub unit: Unit,
    pub citation: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    #[serde(default)]
    pub bond_lengths: Vec<f64>,
}

/// Parses a run file, naming the offending key on failure.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let de = toml::Deserializer::parse(text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start.min(text.len())].lines().count().max(1));
        CliError::Config {
            key: None,
            message: match line {
                Some(l) => format!("line {l}: {}", e.message()),
                None => e.message().to_string(),
            },
        }
    })?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        CliError::Config {
            key: (key != ".").then_some(key),
            message: e.inner().message().to_string(),
        }
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    parse_config(&read_input(path)?)
}

// ---------------------------------------------------------------------------
// Building the pieces
// ---------------------------------------------------------------------------

/// A system the CLI can run.
#[derive(Debug, Clone, PartialEq)]
pub enum SystemModel {
    Coulomb(SystemSpec),
    Harmonic(HarmonicWell),
}

impl SystemModel {
    pub fn spec(&self) -> Option<&SystemSpec> {
        match self {
            SystemModel::Coulomb(s) => Some(s),
            SystemModel::Harmonic(_) => None,
        }
    }

    /// Walk coordinates of a physical free-particle configuration.
    pub fn walk_coordinates(&self, physical: &[f64]) -> Configuration {
        match self {
            SystemModel::Coulomb(s) => s.to_walk_coordinates(physical),
            SystemModel::Harmonic(_) => Configuration(physical.to_vec()),
        }
    }
}

impl Hamiltonian for SystemModel {
    fn dim(&self) -> usize {
        match self {
            SystemModel::Coulomb(s) => Hamiltonian::dim(s),
            SystemModel::Harmonic(h) => h.dim(),
        }
    }

    fn n_coords(&self) -> usize {
        match self {
            SystemModel::Coulomb(s) => s.n_coords(),
            SystemModel::Harmonic(h) => h.n_coords(),
        }
    }

    fn walk_scales(&self) -> Vec<f64> {
        match self {
            SystemModel::Coulomb(s) => Hamiltonian::walk_scales(s),
            SystemModel::Harmonic(h) => h.walk_scales(),
        }
    }

    fn coordinate_map(&self) -> Vec<(usize, f64)> {
        match self {
            SystemModel::Coulomb(s) => s.coordinate_map(),
            SystemModel::Harmonic(h) => h.coordinate_map(),
        }
    }

    fn to_physical(&self, walk: &[f64], out: &mut [f64]) {
        match self {
            SystemModel::Coulomb(s) => s.to_physical(walk, out),
            SystemModel::Harmonic(h) => h.to_physical(walk, out),
        }
    }

    fn potential_at(&self, physical: &[f64]) -> Result<f64, SystemError> {
        match self {
            SystemModel::Coulomb(s) => s.potential_at(physical),
            SystemModel::Harmonic(h) => h.potential_at(physical),
        }
    }

    fn initial_guess(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        match self {
            SystemModel::Coulomb(s) => s.initial_guess(rng),
            SystemModel::Harmonic(h) => h.initial_guess(rng),
        }
    }
}

impl SystemConfig {
    pub fn build(&self) -> Result<SystemModel, CliError> {
        let sources = [self.preset.is_some(), self.particles.is_some(), self.harmonic.is_some()];
        if sources.iter().filter(|&&s| s).count() != 1 {
            return Err(CliError::config(
                "system",
                "exactly one of `preset`, `particles` or `harmonic` is required",
            ));
        }
        if let Some(h) = &self.harmonic {
            if h.dim == 0 || !(h.omega > 0.0 && h.omega.is_finite()) {
                return Err(CliError::config("system.harmonic", "needs dim > 0 and omega > 0"));
            }
            for (key, set) in [
                ("system.mode", self.mode.is_some()),
                ("system.scaling", self.scaling.is_some()),
                ("system.reference_mass", self.reference_mass.is_some()),
                ("system.bond_length", self.bond_length.is_some()),
            ] {
                if set {
                    return Err(CliError::config(key, "not applicable to a harmonic system"));
                }
            }
            return Ok(SystemModel::Harmonic(HarmonicWell::new(h.dim, h.omega)));
        }
        let scaling = self.scaling.unwrap_or(Scaling::Physical);
        let mut spec = if let Some(preset) = self.preset {
            let mode = self.mode.unwrap_or(Mode::BornOppenheimer);
            let spec = match (preset, mode) {
                (Preset::HydrogenAtom, Mode::BornOppenheimer) => presets::hydrogen_atom_bo(),
                (Preset::H2Ion, Mode::BornOppenheimer) => presets::h2_ion_bo(1.0),
                (Preset::H2, Mode::BornOppenheimer) => presets::h2_bo(1.0),
                (Preset::HydrogenAtom, Mode::NonBornOppenheimer) => presets::hydrogen_atom_nbo(scaling),
                (Preset::H2Ion, Mode::NonBornOppenheimer) => presets::h2_ion_nbo(scaling),
                (Preset::H2, Mode::NonBornOppenheimer) => presets::h2_nbo(scaling),
            };
            let molecule = preset != Preset::HydrogenAtom;
            if mode == Mode::BornOppenheimer && molecule && self.bond_length.is_none() {
                return Err(CliError::config("system.bond_length", "required for a clamped-nuclei molecule"));
            }
            spec.with_scaling(scaling)
        } else {
            let list = self.particles.as_deref().unwrap_or_default();
            let particles: Vec<Particle> = list
                .iter()
                .map(|p| match p.position {
                    Some(at) => Particle::clamped(p.label.clone(), p.mass, p.charge, at),
                    None => Particle::free(p.label.clone(), p.mass, p.charge),
                })
                .collect();
            let mode = self.mode.unwrap_or(if particles.iter().any(Particle::is_clamped) {
                Mode::BornOppenheimer
            } else {
                Mode::NonBornOppenheimer
            });
            SystemSpec::new(particles, mode, scaling, 1.0).map_err(|e| CliError::config("system.particles", e))?
        };
        if let Some(m) = self.reference_mass {
            spec = SystemSpec::new(spec.particles().to_vec(), spec.mode(), spec.scaling(), m)
                .map_err(|e| CliError::config("system.reference_mass", e))?;
        }
        if let Some(r) = self.bond_length {
            spec = spec
                .with_bond_length(r)
                .map_err(|e| CliError::config("system.bond_length", e))?;
        }
        Ok(SystemModel::Coulomb(spec))
    }
}

impl TrialConfig {
    fn labels(&self, spec: &SystemSpec, key: &str, labels: &[String]) -> Result<Vec<usize>, CliError> {
        labels
            .iter()
            .map(|l| {
                spec.index_of(l)
                    .ok_or_else(|| CliError::config(&format!("trial.{key}"), format!("no particle labelled {l:?}")))
            })
            .collect()
    }

    fn electrons(&self, spec: &SystemSpec) -> Result<Vec<usize>, CliError> {
        match &self.electrons {
            Some(l) => self.labels(spec, "electrons", l),
            None => Ok(spec
                .free_particles()
                .iter()
                .copied()
                .filter(|&i| spec.particles()[i].charge < 0.0)
                .collect()),
        }
    }

    fn nuclei(&self, spec: &SystemSpec) -> Result<Vec<usize>, CliError> {
        match &self.nuclei {
            Some(l) => self.labels(spec, "nuclei", l),
            None => Ok((0..spec.particles().len())
                .filter(|&i| spec.particles()[i].charge > 0.0)
                .collect()),
        }
    }

    pub fn build(&self, model: &SystemModel) -> Result<Option<Box<dyn TrialFunction>>, CliError> {
        let need = |v: Option<f64>, key: &str| {
            v.ok_or_else(|| CliError::config(&format!("trial.{key}"), format!("required for form {:?}", self.form)))
        };
        let invalid = |e: crate::trial::TrialError| CliError::config("trial", e);
        let coulomb = || {
            model
                .spec()
                .ok_or_else(|| CliError::config("trial.form", "needs a Coulomb system"))
        };
        Ok(match self.form {
            TrialForm::None => None,
            TrialForm::Gaussian => {
                let sigma = need(self.sigma, "sigma")?;
                let t = match (model, &self.particles) {
                    (SystemModel::Harmonic(_), None) => GaussianTrial::new(sigma),
                    (SystemModel::Harmonic(_), Some(_)) => {
                        return Err(CliError::config("trial.particles", "not applicable to a harmonic system"))
                    }
                    (SystemModel::Coulomb(spec), Some(l)) => {
                        GaussianTrial::over_particles(sigma, &self.labels(spec, "particles", l)?)
                    }
                    (SystemModel::Coulomb(spec), None) => GaussianTrial::over_particles(sigma, spec.free_particles()),
                };
                Some(Box::new(t.map_err(invalid)?))
            }
            TrialForm::AtomicProduct => {
                let spec = coulomb()?;
                let t = AtomicProductTrial::new(
                    need(self.alpha, "alpha")?,
                    self.electrons(spec)?,
                    self.nuclei(spec)?,
                    self.symmetrized.unwrap_or(false),
                )
                .map_err(invalid)?;
                Some(Box::new(t))
            }
            TrialForm::Correlated => {
                let spec = coulomb()?;
                let t = CorrelatedExponentialTrial::new(
                    self.electrons(spec)?,
                    self.nuclei(spec)?,
                    self.terms.clone(),
                    need(self.c, "c")?,
                    need(self.chi, "chi")?,
                    self.delta.unwrap_or(0.0),
                    self.symmetrize_electrons.unwrap_or(false),
                    self.symmetrize_nuclei.unwrap_or(false),
                    self.n_max.unwrap_or(DEFAULT_N_MAX),
                )
                .map_err(invalid)?;
                Some(Box::new(t))
            }
        })
    }
}

impl WalkConfig {
    fn initial(&self, model: &SystemModel) -> Result<Option<Configuration>, CliError> {
        let Some(x) = &self.initial else {
            return Ok(None);
        };
        if x.len() != model.dim() {
            return Err(CliError::config(
                "walk.initial",
                format!("has {} coordinates, expected {}", x.len(), model.dim()),
            ));
        }
        Ok(Some(model.walk_coordinates(x)))
    }

    pub fn params(&self, model: &SystemModel) -> Result<WalkParams, CliError> {
        let initial = self.initial(model)?;
        let start = match self.start {
            StartKind::Sample => Start::SampleFromTrial {
                burn_in: self.burn_in.unwrap_or(DEFAULT_BURN_IN),
                initial,
            },
            StartKind::Fixed => {
                if self.burn_in.is_some() {
                    return Err(CliError::config("walk.burn_in", "not used with a fixed start"));
                }
                Start::Fixed(initial.ok_or_else(|| CliError::config("walk.initial", "required for a fixed start"))?)
            }
        };
        let mut p = WalkParams::new(self.n, self.horizons.clone(), self.n_rep, self.seed).with_start(start);
        if let Some(t) = self.t_max {
            p.t_max = t;
        }
        if let Some(r) = self.max_retries {
            p.max_retries = r;
        }
        if let Some(f) = self.max_abort_fraction {
            p.max_abort_fraction = f;
        }
        p.validate().map_err(|e| CliError::config("walk", e))?;
        Ok(p)
    }

    fn budget(&self) -> SamplerBudget {
        SamplerBudget {
            walkers: self.lambda_walkers.unwrap_or(DEFAULT_LAMBDA_WALKERS),
            steps_per_unit: self.n,
            burn_in: self.burn_in.unwrap_or(DEFAULT_BURN_IN),
            sample_time: self.lambda_time.unwrap_or(DEFAULT_LAMBDA_TIME),
            seed: derive_seed(self.seed, "lambda-t"),
            max_stderr: f64::INFINITY,
        }
    }
}

/// System, trial and walk parameters of a run file.
#[derive(Debug)]
pub struct Prepared {
    pub model: SystemModel,
    pub trial: Option<Box<dyn TrialFunction>>,
    pub params: WalkParams,
}

pub fn prepare(config: &RunConfig) -> Result<Prepared, CliError> {
    let model = config.system.build()?;
    let trial = config.trial.build(&model)?;
    let params = config.walk.params(&model)?;
    if config.walk.lambda_walkers.is_some_and(|w| w < 2) {
        return Err(CliError::config("walk.lambda_walkers", "needs at least 2 walkers"));
    }
    if let Some(o) = &config.offsets {
        if !o.value.is_finite() || !(o.sigma >= 0.0) {
            return Err(CliError::config("offsets", "value must be finite and sigma non-negative"));
        }
    }
    Ok(Prepared { model, trial, params })
}

// ---------------------------------------------------------------------------
// Run
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub n_rep: u64,
    pub aborted: u64,
    pub singular_hits: u64,
}

/// JSON summary of one run. `config` is the effective run file, seed
/// included, and reproduces every number when run again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub program: String,
    pub config: RunConfig,
    pub seed: u64,
    /// `None` for a harmonic system.
    pub mode: Option<Mode>,
    pub walk_dim: usize,
    pub trial: Option<TrialSummary>,
    pub lambda_t: f64,
    /// Standard error of a sampled trial energy.
    pub lambda_t_sigma: Option<f64>,
    pub horizons: Vec<HorizonRow>,
    pub fit: Extrapolation,
    pub energy: EnergyValue,
    /// Endpoint averages at the last horizon.
    pub properties: BTreeMap<String, PropertyEstimate>,
    /// `−⟨V⟩/⟨T⟩` from the last-horizon `⟨V⟩` and `E∞`; Coulomb systems only.
    pub virial_ratio: Option<f64>,
    pub offset: Option<OffsetValue>,
    pub counters: Counters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub name: String,
    pub parameters: BTreeMap<String, f64>,
}

fn fingerprint(config: &RunConfig, lambda_t: f64) -> [u8; 32] {
    let mut c = config.clone();
    c.output = OutputConfig::default();
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&c).unwrap_or_default());
    h.update(lambda_t.to_le_bytes());
    h.finalize().into()
}

/// Runs the ensemble described by `config` and reduces it to a summary.
pub fn execute(config: &RunConfig, checkpoint: Option<PathBuf>) -> Result<RunSummary, CliError> {
    let Prepared { model, trial, params } = prepare(config)?;
    let walk = &config.walk;
    let (base, lambda_t_sigma) = match (walk.lambda_t, trial.as_deref()) {
        (Some(l), _) => (l, None),
        (None, None) => (0.0, None),
        (None, Some(t)) => {
            let initial = walk.initial(&model)?;
            let (l, s) = lambda_t_estimate(t, &model, initial.as_ref(), &walk.budget())
                .map_err(|e| CliError::Runtime(format!("trial energy: {e}")))?;
            (l, Some(s))
        }
    };
    let lambda_t = base + walk.lambda_shift;
    let options = RunOptions {
        workers: None,
        checkpoint,
        fingerprint: Some(fingerprint(config, lambda_t)),
    };
    let ens = run_ensemble_with(&model, trial.as_deref(), lambda_t, &params, &options)?;
    let mut rows = horizon_rows(&ens)?;
    let coulomb = model.spec().is_some();
    if !coulomb {
        rows.iter_mut().for_each(|r| r.virial_ratio = None);
    }
    let fit = extrapolate_ensemble(&ens, config.fit.model)?;
    let energy = EnergyValue::hartree(fit.e_inf, fit.sigma);
    let last = ens
        .horizons
        .last()
        .map(|h| h.t)
        .ok_or_else(|| CliError::Runtime("no horizons".into()))?;
    let mut properties = BTreeMap::new();
    for name in &ens.property_names {
        properties.insert(name.clone(), property_expectation(&ens, name, last)?);
    }
    let virial = if coulomb {
        properties
            .get("potential")
            .and_then(|v| virial_ratio(v.value, fit.e_inf).ok())
    } else {
        None
    };
    let offset = match &config.offsets {
        Some(o) => {
            let e = match o.unit {
                Unit::Hartree => energy,
                Unit::Wavenumber => to_wavenumber(energy),
            };
            let off = Offset {
                value: EnergyValue {
                    value: o.value,
                    unit: o.unit,
                    sigma: o.sigma,
                },
                citation: o.citation.clone(),
            };
            Some(apply_offset(e, &off)?)
        }
        None => None,
    };
    Ok(RunSummary {
        schema_version: SCHEMA_VERSION,
        program: format!("gfk {}", env!("CARGO_PKG_VERSION")),
        config: config.clone(),
        seed: walk.seed,
        mode: model.spec().map(SystemSpec::mode),
        walk_dim: model.dim(),
        trial: trial.as_deref().map(|t| TrialSummary {
            name: t.name().to_string(),
            parameters: t.parameters().into_iter().collect(),
        }),
        lambda_t,
        lambda_t_sigma,
        horizons: rows,
        fit,
        energy,
        properties,
        virial_ratio: virial,
        offset,
        counters: Counters {
            n_rep: ens.n_rep,
            aborted: ens.aborted,
            singular_hits: ens.singular_hits,
        },
    })
}

/// Where a run writes its files.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputPaths {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

pub fn output_paths(config: &RunConfig, config_path: &Path, out_dir: Option<&Path>) -> OutputPaths {
    let dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| config.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let stem = config
        .output
        .stem
        .clone()
        .or_else(|| config.name.clone())
        .or_else(|| config_path.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "run".into());
    let pick = |p: &Option<PathBuf>, ext: &str| match p {
        Some(p) => dir.join(p),
        None => dir.join(format!("{stem}.{ext}")),
    };
    OutputPaths {
        csv: pick(&config.output.csv, "csv"),
        json: pick(&config.output.json, "json"),
        checkpoint: config.output.checkpoint.then(|| dir.join(format!("{stem}.ckpt"))),
    }
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(io_error(p)),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io_error(path))
}

fn write_csv(path: &Path, rows: &[HorizonRow]) -> Result<(), CliError> {
    create_parent(path)?;
    let file = fs::File::create(path).map_err(io_error(path))?;
    write_rows_csv(rows, file).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: io::Error::other(e),
    })
}

fn apply_overrides(config: &mut RunConfig, seed: Option<u64>) {
    if let Some(s) = seed {
        config.walk.seed = s;
    }
}

fn cmd_run(path: &Path, seed: Option<u64>, out_dir: Option<&Path>) -> Result<Value, CliError> {
    let mut config = load_config(path)?;
    apply_overrides(&mut config, seed);
    let paths = output_paths(&config, path, out_dir);
    if let Some(c) = &paths.checkpoint {
        create_parent(c)?;
    }
    let summary = execute(&config, paths.checkpoint.clone())?;
    write_csv(&paths.csv, &summary.horizons)?;
    write_json(&paths.json, &summary)?;
    Ok(json!({
        "csv": paths.csv,
        "json": paths.json,
        "energy": summary.energy,
        "fit": { "model": summary.fit.model, "fallback": summary.fit.fallback },
        "counters": summary.counters,
    }))
}

// ---------------------------------------------------------------------------
// Scan
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub r: f64,
    pub summary: Option<RunSummary>,
    pub error: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub schema_version: u32,
    pub program: String,
    pub config: RunConfig,
    pub bond_lengths: Vec<f64>,
    pub points: Vec<ScanPoint>,
}

#[derive(Debug, Serialize)]
struct ScanRow {
    r: f64,
    energy: Option<f64>,
    sigma: Option<f64>,
    lambda_t: Option<f64>,
    fallback: Option<bool>,
    error: Option<String>,
}

/// One run per bond length; a failing length is recorded and the scan goes on.
pub fn scan(config: &RunConfig, bond_lengths: &[f64]) -> Result<ScanSummary, CliError> {
    let Some(&first) = bond_lengths.first() else {
        return Err(CliError::config("scan.bond_lengths", "no bond lengths to scan"));
    };
    if config.system.mode == Some(Mode::NonBornOppenheimer) {
        return Err(CliError::config("system.mode", "a scan needs clamped nuclei"));
    }
    let at = |r: f64| {
        let mut c = config.clone();
        c.system.bond_length = Some(r);
        c
    };
    prepare(&at(first))?;
    let points = bond_lengths
        .iter()
        .map(|&r| match execute(&at(r), None) {
            Ok(s) => ScanPoint {
                r,
                summary: Some(s),
                error: None,
            },
            Err(e) => ScanPoint {
                r,
                summary: None,
                error: Some(e.to_json()["error"].clone()),
            },
        })
        .collect();
    Ok(ScanSummary {
        schema_version: SCHEMA_VERSION,
        program: format!("gfk {}", env!("CARGO_PKG_VERSION")),
        config: config.clone(),
        bond_lengths: bond_lengths.to_vec(),
        points,
    })
}

fn cmd_scan(path: &Path, r: &[f64], seed: Option<u64>, out_dir: Option<&Path>) -> Result<Value, CliError> {
    let mut config = load_config(path)?;
    apply_overrides(&mut config, seed);
    let rs = if r.is_empty() {
        config.scan.clone().unwrap_or_default().bond_lengths
    } else {
        r.to_vec()
    };
    let result = scan(&config, &rs)?;
    let paths = output_paths(&config, path, out_dir);
    let csv_path = paths.csv.with_file_name(format!(
        "{}_scan.csv",
        paths.csv.file_stem().unwrap_or_default().to_string_lossy()
    ));
    let json_path = csv_path.with_extension("json");
    create_parent(&csv_path)?;
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::Io {
        path: csv_path.clone(),
        source: io::Error::other(e),
    })?;
    for p in &result.points {
        let s = p.summary.as_ref();
        let row = ScanRow {
            r: p.r,
            energy: s.map(|s| s.energy.value),
            sigma: s.map(|s| s.energy.sigma),
            lambda_t: s.map(|s| s.lambda_t),
            fallback: s.map(|s| s.fit.fallback),
            error: p.error.as_ref().map(|e| e["message"].as_str().unwrap_or_default().to_string()),
        };
        w.serialize(row).map_err(|e| CliError::Io {
            path: csv_path.clone(),
            source: io::Error::other(e),
        })?;
    }
    w.flush().map_err(io_error(&csv_path))?;
    write_json(&json_path, &result)?;
    let failed = result.points.iter().filter(|p| p.error.is_some()).count();
    if failed == result.points.len() {
        return Err(CliError::Runtime(format!("all {failed} scan points failed")));
    }
    Ok(json!({ "csv": csv_path, "json": json_path, "points": result.points.len(), "failed": failed }))
}

// ---------------------------------------------------------------------------
// Extrapolate, derive, check-trial
// ---------------------------------------------------------------------------

fn cmd_extrapolate(path: &Path, model: FitModel) -> Result<Value, CliError> {
    let text = read_input(path)?;
    let series = read_series_csv(text.as_bytes()).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let fit = extrapolate(&series, model)?;
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "source": path,
        "fit": fit,
        "energy": EnergyValue::hartree(fit.e_inf, fit.sigma),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AtomEnergy {
    /// −0.5 hartree, infinitely heavy nucleus.
    Bohr,
    /// −½·M/(M+1) hartree.
    ReducedMass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OffsetUnit {
    Hartree,
    Wavenumber,
}

impl From<OffsetUnit> for Unit {
    fn from(u: OffsetUnit) -> Unit {
        match u {
            OffsetUnit::Hartree => Unit::Hartree,
            OffsetUnit::Wavenumber => Unit::Wavenumber,
        }
    }
}

/// Inputs of `derive` other than the two summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct DeriveOptions {
    pub method: String,
    pub atom: AtomEnergy,
    pub offset: Option<Offset>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Derived {
    pub hartree: EnergyValue,
    pub wavenumber: EnergyValue,
}

impl From<EnergyValue> for Derived {
    fn from(e: EnergyValue) -> Self {
        Derived {
            hartree: to_hartree(e),
            wavenumber: to_wavenumber(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeriveResult {
    pub schema_version: u32,
    pub method: String,
    pub molecule: EnergyValue,
    pub ion: EnergyValue,
    pub atom: EnergyValue,
    pub atom_source: AtomEnergy,
    pub ionization_potential: Derived,
    /// `2·E(atom) − E(molecule)`.
    pub dissociation_energy: Derived,
    pub dissociation_energy_with_offset: Option<OffsetValue>,
    pub notes: Vec<String>,
}

/// Energy and mode of a run summary.
fn summary_energy(doc: &Value, what: &str) -> Result<(EnergyValue, Option<Mode>), CliError> {
    let e = doc
        .get("energy")
        .ok_or_else(|| CliError::Input(format!("{what} summary: missing field `energy`")))?;
    let energy: EnergyValue = serde_json::from_value(e.clone())
        .map_err(|err| CliError::Input(format!("{what} summary: field `energy`: {err}")))?;
    let mode = doc.get("mode").and_then(|m| serde_json::from_value(m.clone()).ok());
    Ok((energy, mode))
}

pub fn derive(mol: &Value, ion: &Value, opts: &DeriveOptions) -> Result<DeriveResult, CliError> {
    let (m, mol_mode) = summary_energy(mol, "molecule")?;
    let (i, _) = summary_energy(ion, "ion")?;
    let atom = match opts.atom {
        AtomEnergy::Bohr => EnergyValue::hartree(HYDROGEN_ATOM_ENERGY, 0.0),
        AtomEnergy::ReducedMass => EnergyValue::hartree(hydrogen_atom_reduced_mass_energy(), 0.0),
    };
    let ep = ionization_potential(i, m)?;
    let ed = dissociation_energy(atom, m)?;
    let mut notes = Vec::new();
    if opts.atom == AtomEnergy::Bohr && mol_mode == Some(Mode::NonBornOppenheimer) {
        notes.push(
            "atom energy assumes an infinitely heavy nucleus while the molecular energy includes nuclear motion"
                .to_string(),
        );
    }
    let with_offset = match &opts.offset {
        Some(o) => {
            let base = match o.value.unit {
                Unit::Hartree => ed,
                Unit::Wavenumber => to_wavenumber(ed),
            };
            Some(apply_offset(base, o)?)
        }
        None => None,
    };
    Ok(DeriveResult {
        schema_version: SCHEMA_VERSION,
        method: opts.method.clone(),
        molecule: m,
        ion: i,
        atom,
        atom_source: opts.atom,
        ionization_potential: ep.into(),
        dissociation_energy: ed.into(),
        dissociation_energy_with_offset: with_offset,
        notes,
    })
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    serde_json::from_str(&read_input(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Random physical configurations for a derivative check, keeping every
/// pair of particles at least [`CHECK_MIN_DISTANCE`] apart.
pub fn check_points(model: &SystemModel, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut x = vec![0.0; model.n_coords()];
    while out.len() < count {
        let w = model.initial_guess(&mut rng);
        model.to_physical(&w, &mut x);
        let ok = match model {
            SystemModel::Harmonic(_) => true,
            SystemModel::Coulomb(s) => {
                let n = s.particles().len();
                (0..n).all(|i| {
                    (i + 1..n).all(|j| crate::system::distance(&x[3 * i..3 * i + 3], &x[3 * j..3 * j + 3]) > CHECK_MIN_DISTANCE)
                })
            }
        };
        if ok {
            out.push(x.clone());
        }
    }
    out
}

pub fn check_trial(config: &RunConfig, points: usize, tolerance: f64) -> Result<(String, DerivativeReport), CliError> {
    let model = config.system.build()?;
    let trial = config
        .trial
        .build(&model)?
        .ok_or_else(|| CliError::config("trial.form", "no trial function to check"))?;
    let coords: Vec<usize> = model.coordinate_map().iter().map(|m| m.0).collect();
    let pts = check_points(&model, points, derive_seed(config.walk.seed, "check-trial"));
    Ok((trial.name().to_string(), derivative_check(trial.as_ref(), &coords, &pts, tolerance)))
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "gfk", version, about = "Generalized Feynman-Kac ground-state energies of few-body Coulomb systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Seed overriding `walk.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; all cores by default.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory overriding `output.dir`.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one ensemble; writes a per-horizon CSV and a JSON summary.
    Run { config: PathBuf },
    /// Run a clamped-nuclei configuration at several bond lengths.
    Scan {
        config: PathBuf,
        /// Bond lengths in bohr; overrides `scan.bond_lengths`.
        #[arg(long = "r", value_delimiter = ',', num_args = 1..)]
        r: Vec<f64>,
    },
    /// Refit the `t`, `energy`, `sigma` columns of a CSV.
    Extrapolate {
        csv: PathBuf,
        #[arg(long, default_value = "inverse-time")]
        model: FitModel,
    },
    /// Ionization potential and dissociation energy from two run summaries.
    Derive {
        /// Summary of the molecule run.
        #[arg(long)]
        mol: PathBuf,
        /// Summary of the ion run.
        #[arg(long)]
        ion: PathBuf,
        #[arg(long, value_enum, default_value_t = AtomEnergy::Bohr)]
        atom: AtomEnergy,
        /// Offset added to the dissociation energy.
        #[arg(long, allow_hyphen_values = true)]
        offset: Option<f64>,
        #[arg(long, value_enum, default_value_t = OffsetUnit::Wavenumber)]
        offset_unit: OffsetUnit,
        #[arg(long, default_value_t = 0.0)]
        offset_sigma: f64,
        /// Where the offset comes from; required with `--offset`.
        #[arg(long)]
        citation: Option<String>,
        #[arg(long, default_value = "GFK")]
        method: String,
    },
    /// Compare analytic trial derivatives with finite differences.
    CheckTrial {
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
}

fn print(value: &Value) {
    use std::io::Write;
    // a closed pipe downstream is not an error of the run
    let _ = writeln!(io::stdout().lock(), "{}", serde_json::to_string_pretty(value).unwrap_or_default());
}

fn dispatch(cli: &Cli) -> Result<ExitCode, CliError> {
    let out_dir = cli.out_dir.as_deref();
    match &cli.command {
        Command::Run { config } => print(&cmd_run(config, cli.seed, out_dir)?),
        Command::Scan { config, r } => print(&cmd_scan(config, r, cli.seed, out_dir)?),
        Command::Extrapolate { csv, model } => print(&cmd_extrapolate(csv, *model)?),
        Command::Derive {
            mol,
            ion,
            atom,
            offset,
            offset_unit,
            offset_sigma,
            citation,
            method,
        } => {
            let offset = match (offset, citation) {
                (Some(v), Some(c)) => Some(Offset {
                    value: EnergyValue {
                        value: *v,
                        unit: (*offset_unit).into(),
                        sigma: *offset_sigma,
                    },
                    citation: c.clone(),
                }),
                (Some(_), None) => return Err(CliError::config("citation", "an offset needs a citation")),
                (None, _) => None,
            };
            let opts = DeriveOptions {
                method: method.clone(),
                atom: *atom,
                offset,
            };
            let result = derive(&read_json(mol)?, &read_json(ion)?, &opts)?;
            let value = serde_json::to_value(&result).map_err(|e| CliError::Runtime(e.to_string()))?;
            if let Some(dir) = out_dir {
                write_json(&dir.join("derive.json"), &value)?;
            }
            print(&value);
        }
        Command::CheckTrial {
            config,
            points,
            tolerance,
        } => {
            let mut c = load_config(config)?;
            apply_overrides(&mut c, cli.seed);
            let (name, report) = check_trial(&c, *points, *tolerance)?;
            let passed = report.passed();
            print(&json!({
                "schema_version": SCHEMA_VERSION,
                "trial": name,
                "report": report,
                "passed": passed,
            }));
            if !passed {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

pub fn run(cli: &Cli) -> Result<ExitCode, CliError> {
    match cli.workers {
        Some(0) => Err(CliError::config("workers", "needs at least one worker")),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .install(|| dispatch(cli)),
        None => dispatch(cli),
    }
}

/// Entry point of the `gfk` binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
