//! `mirpairs` command-line front end: JSON experiment configs in,
//! deterministic CSV tables and JSON summaries out.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::coincidence::{
    build_histogram, car_power_curve, fit_peak, power_scan_fit, write_car_curve_csv, CarOptions, CoincidenceHistogram,
    ScanPoint, DEFAULT_BIN_WIDTH_PS, DEFAULT_FIT_HALF_WIDTH_PS, DEFAULT_SIDE_PEAKS, DEFAULT_WINDOW_PS, LOW_POWER_LIMIT,
};
use crate::detector::{
    calibration_fit, dcr_vs_bias, discrimination_voltage, sde_vs_bias, spectral_sde, BiasCurveModel, DetectorId,
    DEFAULT_SMOOTHING_WINDOW,
};
use crate::error::Error;
use crate::fwm::{
    nonlinear_parameter, perfect_match_detuning, phase_match_curve, stimulated_fwm_map, tpa_bulk_to_waveguide,
    PhaseMatch, StimulatedFwmSetup,
};
use crate::interference::{
    classical_fringe, fit_visibility, linspace, phase_from_voltage, raw_visibility_bound, simulate_fringe, FringeScan,
    FringeSimulation, PhaseCalibration, ALL_OUTPUTS_RATE_MULTIPLIER, DEFAULT_FRINGE_POINTS,
};
use crate::nlse::{
    inverse_transmission_fit, power_sweep, write_sweep_csv, FreeCarrierOptions, PropagationOptions, SweepRow,
    SECH2_TPA_SHAPE_FACTOR,
};
use crate::pairsource::{
    expected_rates, rate_per_average_power_sq, read_tags_binary, read_tags_csv, simulate_tags, write_tags_binary,
    Channel, DetectorSpec, PairExperiment, PairStatistics, SimulationOptions, SourceSpec, TagStream,
};
use crate::physmodel::{
    cm_per_gw_to_m_per_w, db_per_cm_to_per_m, sech_pulse, ChannelSpec, SampledPulse, TimeGrid, WaveguideSpec,
    DEFAULT_SPAN_FWHM,
};
use crate::retrieval::{
    extract_n2, fit_sech_phase, gerchberg_saxton, N2Options, RetrievalProblem, DEFAULT_FIT_THRESHOLD, DEFAULT_MAX_ITER,
    DEFAULT_TOL,
};
use crate::spectral::{psd_on_grid, WavelengthSample};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(
    name = "mirpairs",
    version,
    about = "Mid-infrared photon-pair source simulation and analysis"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Format of the summary printed on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Worker threads; 0 or unset uses all cores.
    #[arg(long, global = true, env = "MIRPAIRS_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Phase-matching curve and stimulated-FWM idler map.
    Phasematch,
    /// Split-step power sweep: transmission, SPM phase and TPA estimate.
    Propagate,
    /// Power sweep followed by phase retrieval and n₂/α_TPA extraction.
    Retrieve {
        /// Retrieve from a measured spectrum (`wavelength_nm,psd`) instead.
        #[arg(long)]
        spectrum: Option<PathBuf>,
        /// On-chip peak power of the measured spectrum, W.
        #[arg(long, requires = "spectrum")]
        power: Option<f64>,
    },
    /// Photon-pair time tags.
    Pairs {
        #[command(subcommand)]
        action: PairsAction,
    },
    /// Two-source quantum interference fringes.
    Hom {
        #[command(subcommand)]
        action: HomAction,
    },
    /// Detector calibration fit and bias-curve tables.
    Detector {
        /// Calibration table `flux_hz,counts_hz[,counts_err]`; replaces the
        /// config's table.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum PairsAction {
    /// Write one binary tag file per configured power.
    Simulate,
    /// Histograms, CAR curve and ξ from tag files.
    Analyze {
        /// Tag files (binary, or CSV by extension). Defaults to the files
        /// `simulate` writes into --out.
        #[arg(long = "tags")]
        tags: Vec<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum HomAction {
    /// Simulate a fringe scan and fit its visibilities.
    Simulate,
    /// Fit visibilities of a `phase_rad,coincidences,accidentals` table.
    Analyze {
        #[arg(long)]
        scan: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("numerical: {0}")]
    Numerical(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::UnderResolved { .. } | Error::InsufficientData(_) => {
                CliError::Config(e.to_string())
            }
            Error::NonConvergence { .. } | Error::RejectedData(_) => CliError::Numerical(e.to_string()),
            Error::MalformedTags { .. } | Error::Io(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_err<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Config(msg.into()))
}

// ---------------------------------------------------------------- configs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveguideConfig {
    pub width_nm: f64,
    pub height_nm: f64,
    pub sidewall_angle_deg: f64,
    pub length_mm: f64,
    #[serde(rename = "loss_dB_per_cm")]
    pub loss_db_per_cm: f64,
    pub beta2_ps2_per_m: f64,
    #[serde(default)]
    pub beta4_ps4_per_m: f64,
    pub a_eff_um2: f64,
    #[serde(rename = "n2_m2_per_W")]
    pub n2_m2_per_w: f64,
    #[serde(rename = "beta_tpa_cm_per_GW")]
    pub beta_tpa_cm_per_gw: f64,
}

impl WaveguideConfig {
    pub fn to_spec(&self) -> CliResult<WaveguideSpec> {
        let a_eff = self.a_eff_um2 * 1e-12;
        let alpha_tpa = if self.beta_tpa_cm_per_gw == 0.0 {
            0.0
        } else {
            tpa_bulk_to_waveguide(cm_per_gw_to_m_per_w(self.beta_tpa_cm_per_gw), a_eff)?
        };
        let wg = WaveguideSpec {
            width: self.width_nm * 1e-9,
            height: self.height_nm * 1e-9,
            sidewall_angle: self.sidewall_angle_deg,
            length: self.length_mm * 1e-3,
            alpha_lin: db_per_cm_to_per_m(self.loss_db_per_cm),
            beta2: self.beta2_ps2_per_m * 1e-24,
            beta4: self.beta4_ps4_per_m * 1e-48,
            a_eff,
            n2: self.n2_m2_per_w,
            alpha_tpa,
        };
        wg.validate()?;
        Ok(wg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpConfig {
    pub wavelength_nm: f64,
    pub fwhm_ps: f64,
    pub rep_rate_hz: f64,
    #[serde(default)]
    pub grid_samples: Option<usize>,
}

impl PumpConfig {
    pub fn pulse(&self, peak_power: f64) -> CliResult<SampledPulse> {
        let fwhm = self.fwhm_ps * 1e-12;
        if !(fwhm > 0.0) {
            return config_err("pump.fwhm_ps must be positive");
        }
        let grid = match self.grid_samples {
            Some(n) => TimeGrid::new(n, DEFAULT_SPAN_FWHM * fwhm / n.max(1) as f64)?,
            None => TimeGrid::for_pulse(fwhm)?,
        };
        Ok(sech_pulse(
            peak_power,
            fwhm,
            grid,
            self.wavelength_nm * 1e-9,
            self.rep_rate_hz,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    #[serde(rename = "coupler_peak_dB")]
    pub coupler_peak_db: f64,
    pub coupler_center_nm: f64,
    pub coupler_bw3db_nm: f64,
    #[serde(rename = "mono_loss_dB")]
    pub mono_loss_db: f64,
    pub filter_center_nm: f64,
    pub filter_width_nm: f64,
    #[serde(rename = "pump_rejection_dB")]
    pub pump_rejection_db: f64,
    #[serde(rename = "fiber_loss_dB")]
    pub fiber_loss_db: f64,
}

impl ChannelConfig {
    pub fn to_spec(&self) -> CliResult<ChannelSpec> {
        let c = ChannelSpec {
            coupler_peak_db: self.coupler_peak_db,
            coupler_center: self.coupler_center_nm * 1e-9,
            coupler_bw3db: self.coupler_bw3db_nm * 1e-9,
            mono_loss_db: self.mono_loss_db,
            filter_center: self.filter_center_nm * 1e-9,
            filter_width: self.filter_width_nm * 1e-9,
            pump_rejection_db: self.pump_rejection_db,
            fiber_loss_db: self.fiber_loss_db,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasematchConfig {
    pub waveguide: WaveguideConfig,
    pub pump: PumpConfig,
    #[serde(rename = "pump_peak_power_W")]
    pub pump_peak_power_w: f64,
    pub coupler: ChannelConfig,
    #[serde(rename = "seed_power_W")]
    pub seed_power_w: f64,
    pub seed_start_nm: f64,
    pub seed_stop_nm: f64,
    pub seed_count: usize,
    pub axis_start_nm: f64,
    pub axis_stop_nm: f64,
    pub axis_count: usize,
    pub osa_resolution_nm: f64,
    pub detuning_max_rad_s: f64,
    pub detuning_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeCarrierConfig {
    pub enabled: bool,
    #[serde(default = "default_fca")]
    pub fca_cross_section_m2: f64,
    #[serde(default = "default_fcd")]
    pub fcd_coefficient: f64,
}

fn default_fca() -> f64 {
    FreeCarrierOptions::default().fca_cross_section
}

fn default_fcd() -> f64 {
    FreeCarrierOptions::default().fcd_coefficient
}

fn default_steps() -> usize {
    PropagationOptions::default().steps
}

fn default_threshold() -> f64 {
    DEFAULT_FIT_THRESHOLD
}

fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagateConfig {
    pub waveguide: WaveguideConfig,
    pub pump: PumpConfig,
    #[serde(rename = "powers_W")]
    pub powers_w: Vec<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub free_carriers: Option<FreeCarrierConfig>,
    #[serde(default = "default_threshold")]
    pub fit_threshold: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

impl PropagateConfig {
    fn options(&self) -> PropagationOptions {
        let mut opts = PropagationOptions {
            steps: self.steps,
            ..PropagationOptions::default()
        };
        if let Some(fc) = &self.free_carriers {
            opts.free_carriers = FreeCarrierOptions {
                enabled: fc.enabled,
                fca_cross_section: fc.fca_cross_section_m2,
                fcd_coefficient: fc.fcd_coefficient,
            };
        }
        opts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    #[serde(rename = "xi_per_W2")]
    pub xi_per_w2: f64,
    pub rep_rate_hz: f64,
    #[serde(rename = "linear_noise_b_per_W")]
    pub linear_noise_b_per_w: f64,
    pub pulse_duty_cycle: f64,
    #[serde(default)]
    pub statistics: PairStatistics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub sde_plateau: f64,
    #[serde(rename = "bias_uA")]
    pub bias_ua: f64,
    pub jitter_fwhm_ps: f64,
    pub dcr_dark_hz: f64,
    pub bb_rate_hz: f64,
    #[serde(default)]
    pub dead_time_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_bin")]
    pub bin_width_ps: i64,
    #[serde(default = "default_window")]
    pub window_ps: f64,
    #[serde(default = "default_side")]
    pub n_side_peaks: usize,
    #[serde(default = "default_fit_half")]
    pub fit_half_width_ps: f64,
}

fn default_bin() -> i64 {
    DEFAULT_BIN_WIDTH_PS
}

fn default_window() -> f64 {
    DEFAULT_WINDOW_PS
}

fn default_side() -> usize {
    DEFAULT_SIDE_PEAKS
}

fn default_fit_half() -> f64 {
    DEFAULT_FIT_HALF_WIDTH_PS
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            bin_width_ps: DEFAULT_BIN_WIDTH_PS,
            window_ps: DEFAULT_WINDOW_PS,
            n_side_peaks: DEFAULT_SIDE_PEAKS,
            fit_half_width_ps: DEFAULT_FIT_HALF_WIDTH_PS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsConfig {
    pub source: SourceConfig,
    pub channels: [ChannelConfig; 2],
    pub detectors: [DetectorConfig; 2],
    #[serde(rename = "powers_W")]
    pub powers_w: Vec<f64>,
    pub duration_s: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

impl PairsConfig {
    pub fn experiment(&self) -> CliResult<PairExperiment> {
        let s = &self.source;
        let det = |d: &DetectorConfig| DetectorSpec {
            sde_plateau: d.sde_plateau,
            bias_ua: d.bias_ua,
            jitter_fwhm: d.jitter_fwhm_ps * 1e-12,
            dcr_dark: d.dcr_dark_hz,
            bb_rate: d.bb_rate_hz,
            dead_time: d.dead_time_ns * 1e-9,
        };
        let exp = PairExperiment {
            source: SourceSpec {
                xi: s.xi_per_w2,
                rep_rate: s.rep_rate_hz,
                linear_noise_b: s.linear_noise_b_per_w,
                pulse_duty_cycle: s.pulse_duty_cycle,
                statistics: s.statistics,
            },
            channels: [self.channels[0].to_spec()?, self.channels[1].to_spec()?],
            detectors: [det(&self.detectors[0]), det(&self.detectors[1])],
        };
        exp.validate()?;
        Ok(exp)
    }

    fn car_options(&self) -> CarOptions {
        CarOptions {
            window_ps: self.analysis.window_ps,
            n_side_peaks: self.analysis.n_side_peaks,
            ..CarOptions::new(1e12 / self.source.rep_rate_hz)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseModulatorConfig {
    pub slope_rad_per_v2: f64,
    pub offset_rad: f64,
    pub v2_max_v2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomConfig {
    #[serde(default = "default_points")]
    pub phase_points: usize,
    #[serde(default)]
    pub phase_start_rad: f64,
    #[serde(default = "default_phase_stop")]
    pub phase_stop_rad: f64,
    /// Replaces the phase range: phases from evenly spaced V².
    #[serde(default)]
    pub phase_modulator: Option<PhaseModulatorConfig>,
    /// Net coincidence rate at the fringe maximum.
    pub peak_rate_hz: f64,
    pub integration_s: f64,
    /// Absent or null: no accidentals.
    #[serde(default)]
    pub car: Option<f64>,
    pub reflectivity: f64,
    #[serde(default = "default_indistinguishability")]
    pub indistinguishability: f64,
    #[serde(default = "default_side")]
    pub n_side_peaks: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_points() -> usize {
    DEFAULT_FRINGE_POINTS
}

fn default_phase_stop() -> f64 {
    2.0 * std::f64::consts::PI
}

fn default_indistinguishability() -> f64 {
    1.0
}

impl HomConfig {
    fn phases(&self) -> CliResult<Vec<f64>> {
        match &self.phase_modulator {
            None => Ok(linspace(self.phase_start_rad, self.phase_stop_rad, self.phase_points)),
            Some(pm) => {
                let cal = PhaseCalibration {
                    slope: pm.slope_rad_per_v2,
                    offset: pm.offset_rad,
                    slope_err: 0.0,
                    offset_err: 0.0,
                    baseline: 0.5,
                    contrast: 0.5,
                };
                linspace(0.0, pm.v2_max_v2, self.phase_points)
                    .into_iter()
                    .map(|v2| Ok(phase_from_voltage(v2, &cal)?))
                    .collect()
            }
        }
    }

    fn simulation(&self) -> FringeSimulation {
        FringeSimulation {
            pairs_budget: self.peak_rate_hz * self.integration_s,
            car: self.car.unwrap_or(f64::INFINITY),
            reflectivity: self.reflectivity,
            indistinguishability: self.indistinguishability,
            n_side: self.n_side_peaks,
            integration_time: self.integration_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSweepConfig {
    #[serde(rename = "start_uA")]
    pub start_ua: f64,
    #[serde(rename = "stop_uA")]
    pub stop_ua: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasModelConfig {
    pub sde_max: f64,
    #[serde(rename = "i_half_uA")]
    pub i_half_ua: f64,
    #[serde(rename = "i_width_uA")]
    pub i_width_ua: f64,
    pub dcr0_hz: f64,
    #[serde(rename = "i_dcr_uA")]
    pub i_dcr_ua: f64,
    pub bb_floor_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectorLabel {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorCmdConfig {
    /// `flux_hz,counts_hz[,counts_err]`, relative to the config file.
    #[serde(default)]
    pub calibration_csv: Option<PathBuf>,
    #[serde(default)]
    pub detector: Option<DetectorLabel>,
    #[serde(default)]
    pub bias_model: Option<BiasModelConfig>,
    #[serde(default)]
    pub bias_sweep: Option<BiasSweepConfig>,
    /// `wavelength_nm,sde`, relative to the config file.
    #[serde(default)]
    pub spectral_table_csv: Option<PathBuf>,
    #[serde(default)]
    pub query_wavelengths_nm: Vec<f64>,
    #[serde(default = "default_smoothing")]
    pub smoothing_window: usize,
}

fn default_smoothing() -> usize {
    DEFAULT_SMOOTHING_WINDOW
}

/// Parse a config, reporting the key path of the first error.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("at `{path}`: {}", e.into_inner()))
    })
}

fn load_config<T: DeserializeOwned>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return config_err("--config is required");
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

// ------------------------------------------------------------- provenance

struct Ctx {
    out: PathBuf,
    config_hash: String,
    seed: Option<u64>,
}

impl Ctx {
    fn new<C: Serialize>(out: &Path, config: &C, seed: Option<u64>) -> CliResult<Self> {
        std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        let canonical = serde_json::to_vec(config).expect("configs serialise");
        Ok(Self {
            out: out.to_path_buf(),
            config_hash: hex::encode(Sha256::digest(canonical)),
            seed,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn create(&self, name: &str) -> CliResult<BufWriter<File>> {
        let p = self.path(name);
        File::create(&p)
            .map(BufWriter::new)
            .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
    }

    /// CSV file with `#` provenance lines.
    fn csv(&self, name: &str) -> CliResult<BufWriter<File>> {
        let mut f = self.create(name)?;
        writeln!(f, "# mirpairs {VERSION}")?;
        writeln!(f, "# config_sha256={}", self.config_hash)?;
        if let Some(s) = self.seed {
            writeln!(f, "# seed={s}")?;
        }
        Ok(f)
    }

    fn provenance(&self) -> Value {
        json!({
            "tool": "mirpairs",
            "version": VERSION,
            "config_sha256": self.config_hash,
            "seed": self.seed,
        })
    }

    fn summary(&self, name: &str, mut body: Value) -> CliResult<Value> {
        body.as_object_mut()
            .expect("summary is an object")
            .insert("provenance".into(), self.provenance());
        let mut f = self.create(name)?;
        serde_json::to_writer_pretty(&mut f, &body).map_err(|e| CliError::Io(e.to_string()))?;
        writeln!(f)?;
        f.flush()?;
        Ok(body)
    }
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

fn required_seed(flag: Option<u64>, config: Option<u64>) -> CliResult<u64> {
    flag.or(config)
        .ok_or_else(|| CliError::Config("a seed is required (config `seed` or --seed)".into()))
}

// --------------------------------------------------------------- commands

/// Parse arguments, run, and map the outcome to the process exit code.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            let mut stdout = std::io::stdout().lock();
            let _ = print_summary(&summary, cli.format, &mut stdout);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("mirpairs: {e}");
            if let CliError::Numerical(msg) = &e {
                let diag = json!({ "error": msg, "version": VERSION });
                let _ = std::fs::create_dir_all(&cli.out);
                let _ = std::fs::write(cli.out.join("diagnostics.json"), format!("{diag:#}\n"));
            }
            ExitCode::from(e.exit_code())
        }
    }
}

/// Run one command inside a pool of the requested size; returns the
/// summary that was also written to the output directory.
pub fn run(cli: &Cli) -> CliResult<Value> {
    let threads = cli.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli))
}

fn dispatch(cli: &Cli) -> CliResult<Value> {
    let cfg = cli.config.as_deref();
    match &cli.command {
        Command::Phasematch => cmd_phasematch(&load_config(cfg)?, &cli.out),
        Command::Propagate => cmd_propagate(&load_config(cfg)?, &cli.out),
        Command::Retrieve { spectrum: None, .. } => cmd_retrieve(&load_config(cfg)?, &cli.out),
        Command::Retrieve {
            spectrum: Some(path),
            power,
        } => cmd_retrieve_spectrum(&load_config(cfg)?, path, *power, &cli.out),
        Command::Pairs {
            action: PairsAction::Simulate,
        } => cmd_pairs_simulate(&load_config(cfg)?, cli.seed, &cli.out),
        Command::Pairs {
            action: PairsAction::Analyze { tags },
        } => cmd_pairs_analyze(&load_config(cfg)?, tags, &cli.out),
        Command::Hom {
            action: HomAction::Simulate,
        } => cmd_hom_simulate(&load_config(cfg)?, cli.seed, &cli.out),
        Command::Hom {
            action: HomAction::Analyze { scan },
        } => cmd_hom_analyze(scan, &cli.out),
        Command::Detector { csv } => {
            let (config, base) = match cfg {
                Some(p) => (
                    load_config(Some(p))?,
                    p.parent().map(Path::to_path_buf).unwrap_or_default(),
                ),
                None if csv.is_some() => (
                    DetectorCmdConfig {
                        calibration_csv: None,
                        detector: None,
                        bias_model: None,
                        bias_sweep: None,
                        spectral_table_csv: None,
                        query_wavelengths_nm: vec![],
                        smoothing_window: DEFAULT_SMOOTHING_WINDOW,
                    },
                    PathBuf::new(),
                ),
                None => return config_err("detector needs --config or --csv"),
            };
            cmd_detector(&config, &base, csv.as_deref(), &cli.out)
        }
    }
}

pub fn cmd_phasematch(cfg: &PhasematchConfig, out: &Path) -> CliResult<Value> {
    let ctx = Ctx::new(out, cfg, None)?;
    let wg = cfg.waveguide.to_spec()?;
    let coupler = cfg.coupler.to_spec()?;
    let pump = cfg.pump.pulse(cfg.pump_peak_power_w)?;
    let lp = pump.carrier_wavelength;
    if cfg.seed_count == 0 || cfg.axis_count < 2 || cfg.detuning_count == 0 {
        return config_err("seed_count, axis_count and detuning_count must be positive");
    }
    let gamma = nonlinear_parameter(wg.n2, wg.a_eff, lp)?;
    let p = cfg.pump_peak_power_w;

    let detunings = linspace(-cfg.detuning_max_rad_s, cfg.detuning_max_rad_s, cfg.detuning_count);
    let curve = phase_match_curve(&wg, gamma, p, &detunings);
    let mut f = ctx.csv("phasematch_mismatch.csv")?;
    writeln!(f, "detuning_rad_s,dk_total")?;
    for pt in &curve {
        writeln!(f, "{:e},{:e}", pt.delta_omega, pt.dk_total)?;
    }
    f.flush()?;

    let seeds = linspace(cfg.seed_start_nm * 1e-9, cfg.seed_stop_nm * 1e-9, cfg.seed_count);
    let mut setup = StimulatedFwmSetup::with_axis(
        cfg.seed_power_w,
        cfg.axis_start_nm * 1e-9,
        cfg.axis_stop_nm * 1e-9,
        cfg.axis_count,
        cfg.osa_resolution_nm * 1e-9,
    );
    setup.floor_rel = 1e-12;
    let map = stimulated_fwm_map(&wg, &pump, &seeds, &coupler, &setup)?;
    let mut f = ctx.csv("phasematch_idler.csv")?;
    map.write_idler_csv(&mut f, setup.floor_rel)?;
    f.flush()?;
    let mut f = ctx.csv("phasematch_map.csv")?;
    map.write_matrix_csv(&mut f, setup.floor_rel)?;
    f.flush()?;

    let detuning = match perfect_match_detuning(wg.beta2, gamma, p) {
        PhaseMatch::Detuning(d) => json!(d),
        PhaseMatch::NoFiniteSolution => Value::Null,
    };
    ctx.summary(
        "phasematch_summary.json",
        json!({
            "gamma_per_W_m": gamma,
            "l_eff_m": wg.effective_length(),
            "pump_peak_power_W": p,
            "perfect_match_detuning_rad_s": detuning,
            "max_abs_dk_total_per_m": curve.iter().map(|c| c.dk_total.abs()).fold(0.0, f64::max),
            "seeds": map.rows.len(),
        }),
    )
}

struct SweepOutcome {
    rows: Vec<SweepRow>,
    wg: WaveguideSpec,
    gamma: f64,
    alpha_tpa: Value,
    alpha_tpa_value: Option<f64>,
}

fn run_sweep(cfg: &PropagateConfig, ctx: &Ctx) -> CliResult<SweepOutcome> {
    let wg = cfg.waveguide.to_spec()?;
    if cfg.powers_w.is_empty() {
        return config_err("powers_W must not be empty");
    }
    let template = cfg.pump.pulse(1.0)?;
    let gamma = nonlinear_parameter(wg.n2, wg.a_eff, template.carrier_wavelength)?;
    let rows = power_sweep(&wg, &template, &cfg.powers_w, &cfg.options())?;
    let mut f = ctx.csv("propagate_sweep.csv")?;
    write_sweep_csv(&rows, &mut f)?;
    f.flush()?;

    let etas: Vec<f64> = rows.iter().map(|r| r.eta).collect();
    let (alpha_tpa, alpha_tpa_value) =
        match inverse_transmission_fit(&cfg.powers_w, &etas, wg.effective_length(), SECH2_TPA_SHAPE_FACTOR) {
            Ok(est) => (
                json!({
                    "alpha_tpa_per_W_m": est.alpha_tpa,
                    "alpha_tpa_err": est.alpha_tpa_err,
                    "slope": est.slope,
                    "intercept": est.intercept,
                }),
                Some(est.alpha_tpa),
            ),
            Err(e @ (Error::InsufficientData(_) | Error::RejectedData(_))) => {
                (json!({ "unavailable": e.to_string() }), None)
            }
            Err(e) => return Err(e.into()),
        };
    Ok(SweepOutcome {
        rows,
        wg,
        gamma,
        alpha_tpa,
        alpha_tpa_value,
    })
}

pub fn cmd_propagate(cfg: &PropagateConfig, out: &Path) -> CliResult<Value> {
    let ctx = Ctx::new(out, cfg, None)?;
    let s = run_sweep(cfg, &ctx)?;
    let rows: Vec<Value> = s
        .rows
        .iter()
        .map(|r| {
            json!({
                "peak_power_W": r.peak_power,
                "eta": r.eta,
                "phi_nl_rad": r.phi_nl,
                "phi_fc_rad": r.result.phi_fc_max,
                "steps_used": r.result.steps_used,
            })
        })
        .collect();
    ctx.summary(
        "propagate_summary.json",
        json!({
            "gamma_per_W_m": s.gamma,
            "l_eff_m": s.wg.effective_length(),
            "alpha_tpa_injected_per_W_m": s.wg.alpha_tpa,
            "tpa_fit": s.alpha_tpa,
            "rows": rows,
        }),
    )
}

pub fn cmd_retrieve(cfg: &PropagateConfig, out: &Path) -> CliResult<Value> {
    let ctx = Ctx::new(out, cfg, None)?;
    let s = run_sweep(cfg, &ctx)?;
    let retrieved = s
        .rows
        .iter()
        .map(|r| {
            let mut problem = RetrievalProblem::from_pulse(&r.result.pulse_out);
            problem.max_iter = cfg.max_iter;
            problem.tol = cfg.tol;
            let res = gerchberg_saxton(&problem)?;
            let fit = fit_sech_phase(&res.temporal_phase, &problem.temporal_envelope, cfg.fit_threshold)?;
            Ok((r, res, fit))
        })
        .collect::<crate::Result<Vec<_>>>()?;

    let mut f = ctx.csv("retrieve_phases.csv")?;
    writeln!(
        f,
        "peak_power_W,phi_nl_simulated_rad,phi_nl_retrieved_rad,phi_nl_err_rad,residual,iterations"
    )?;
    for (r, res, fit) in &retrieved {
        writeln!(
            f,
            "{},{:.9},{:.9},{:.9},{:e},{}",
            r.peak_power, r.phi_nl, fit.phi_nl, fit.phi_nl_err, res.residual, res.iterations
        )?;
    }
    f.flush()?;
    if let Some((r, res, _)) = retrieved.last() {
        let pulse = &r.result.pulse_out;
        let mut f = ctx.csv("retrieve_temporal_phase.csv")?;
        writeln!(f, "time_ps,envelope_sqrtW,phase_rad")?;
        let n = pulse.envelope.len();
        for (k, (a, ph)) in pulse.envelope.iter().zip(&res.temporal_phase).enumerate() {
            let t = (k as f64 - (n / 2) as f64) * pulse.dt * 1e12;
            writeln!(f, "{t:.6},{:e},{ph:.9}", a.norm())?;
        }
        f.flush()?;
    }

    let points: Vec<(f64, f64)> = retrieved.iter().map(|(r, _, fit)| (r.peak_power, fit.phi_nl)).collect();
    let wavelength = cfg.pump.wavelength_nm * 1e-9;
    let opts = N2Options {
        alpha_tpa: s.alpha_tpa_value.filter(|a| *a > 0.0),
    };
    let n2 = match extract_n2(&points, &s.wg, wavelength, &opts) {
        Ok(est) => json!({
            "n2_m2_per_W": est.plain.n2,
            "n2_err": est.plain.n2_err,
            "gamma_per_W_m": est.plain.gamma,
            "gamma_err": est.plain.gamma_err,
            "n2_with_fc_term_m2_per_W": est.with_fc_term.n2,
            "fc_coefficient_rad_per_W2": finite_or_null(est.fc_coefficient),
            "curved": est.curved,
        }),
        Err(e @ Error::InsufficientData(_)) => json!({ "unavailable": e.to_string() }),
        Err(e) => return Err(e.into()),
    };
    let per_power: Vec<Value> = retrieved
        .iter()
        .map(|(r, res, fit)| {
            json!({
                "peak_power_W": r.peak_power,
                "phi_nl_simulated_rad": r.phi_nl,
                "phi_nl_retrieved_rad": fit.phi_nl,
                "residual": res.residual,
                "converged": res.converged,
                "energy_mismatch": res.energy_mismatch,
            })
        })
        .collect();
    ctx.summary(
        "retrieve_summary.json",
        json!({
            "n2_injected_m2_per_W": s.wg.n2,
            "alpha_tpa_injected_per_W_m": s.wg.alpha_tpa,
            "n2_fit": n2,
            "tpa_fit": s.alpha_tpa,
            "retrievals": per_power,
        }),
    )
}

#[derive(Debug, Deserialize)]
struct SpectrumRow {
    wavelength_nm: f64,
    psd: f64,
}

fn csv_reader(path: &Path) -> CliResult<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(f))
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    csv_reader(path)?
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Retrieval from a measured spectrum: the temporal envelope is the
/// configured sech pulse at `power`.
pub fn cmd_retrieve_spectrum(cfg: &PropagateConfig, path: &Path, power: Option<f64>, out: &Path) -> CliResult<Value> {
    let ctx = Ctx::new(out, cfg, None)?;
    let Some(power) = power else {
        return config_err("--power is required with --spectrum");
    };
    let rows: Vec<SpectrumRow> = read_rows(path)?;
    if rows.len() < 2 {
        return config_err("spectrum needs ≥ 2 rows");
    }
    let pulse = cfg.pump.pulse(power)?;
    let samples: Vec<WavelengthSample> = rows
        .iter()
        .map(|r| WavelengthSample {
            wavelength: r.wavelength_nm * 1e-9,
            psd: r.psd.max(0.0),
        })
        .collect();
    let offsets = pulse.grid().angular_offsets();
    let mut psd = psd_on_grid(&samples, pulse.carrier_wavelength, &offsets);
    // a unitary transform keeps Σ|A|² = Σ|a|²
    let total: f64 = psd.iter().sum();
    if !(total > 0.0) {
        return config_err("spectrum carries no power on the pulse grid");
    }
    let energy_bins: f64 = pulse.envelope.iter().map(|a| a.norm_sqr()).sum();
    psd.iter_mut().for_each(|p| *p *= energy_bins / total);
    let envelope: Vec<f64> = pulse.envelope.iter().map(|a| a.norm()).collect();
    let mut problem = RetrievalProblem::new(psd, envelope, pulse.dt);
    problem.max_iter = cfg.max_iter;
    problem.tol = cfg.tol;
    let res = gerchberg_saxton(&problem)?;
    let fit = fit_sech_phase(&res.temporal_phase, &problem.temporal_envelope, cfg.fit_threshold)?;
    let mut f = ctx.csv("retrieve_temporal_phase.csv")?;
    writeln!(f, "time_ps,envelope_sqrtW,phase_rad")?;
    let m = problem.temporal_envelope.len();
    for (k, (a, ph)) in problem.temporal_envelope.iter().zip(&res.temporal_phase).enumerate() {
        let t = (k as f64 - (m / 2) as f64) * pulse.dt * 1e12;
        writeln!(f, "{t:.6},{a:e},{ph:.9}")?;
    }
    f.flush()?;
    ctx.summary(
        "retrieve_summary.json",
        json!({
            "peak_power_W": power,
            "phi_nl_rad": fit.phi_nl,
            "phi_nl_err": fit.phi_nl_err,
            "residual": res.residual,
            "iterations": res.iterations,
            "converged": res.converged,
            "energy_mismatch": res.energy_mismatch,
        }),
    )
}

fn tag_file_name(k: usize) -> String {
    format!("tags_{k:02}.bin")
}

pub fn cmd_pairs_simulate(cfg: &PairsConfig, seed_flag: Option<u64>, out: &Path) -> CliResult<Value> {
    let seed = required_seed(seed_flag, cfg.seed)?;
    let mut resolved = cfg.clone();
    resolved.seed = Some(seed);
    let ctx = Ctx::new(out, &resolved, Some(seed))?;
    let exp = cfg.experiment()?;
    if cfg.powers_w.is_empty() {
        return config_err("powers_W must not be empty");
    }

    let mut f = ctx.csv("pairs_expected.csv")?;
    writeln!(
        f,
        "peak_power_W,mu,singles_a_hz,singles_b_hz,coincidences_hz,accidentals_hz,car_expected"
    )?;
    let mut files = Vec::new();
    for (k, &p) in cfg.powers_w.iter().enumerate() {
        let e = expected_rates(&exp, p, cfg.analysis.window_ps)?;
        let car = e.coincidences * e.capture_fraction / e.accidentals;
        writeln!(
            f,
            "{p},{:e},{:.6},{:.6},{:.6},{:.6},{}",
            e.mu,
            e.singles_a,
            e.singles_b,
            e.coincidences,
            e.accidentals,
            if car.is_finite() {
                format!("{car:.6}")
            } else {
                "inf".into()
            }
        )?;
        let stream = simulate_tags(
            &exp,
            p,
            cfg.duration_s,
            seed.wrapping_add(k as u64),
            &SimulationOptions::default(),
        )?;
        let name = tag_file_name(k);
        let mut w = ctx.create(&name)?;
        write_tags_binary(&stream, &mut w)?;
        w.flush()?;
        files.push(json!({
            "file": name,
            "peak_power_W": p,
            "seed": stream.header.seed,
            "tags_a": stream.count(Channel::A),
            "tags_b": stream.count(Channel::B),
            "multi_pair_warning": e.multi_pair_warning,
        }));
    }
    f.flush()?;
    ctx.summary(
        "pairs_simulate.json",
        json!({
            "duration_s": cfg.duration_s,
            "eta_a": exp.arm_efficiency(0),
            "eta_b": exp.arm_efficiency(1),
            "files": files,
        }),
    )
}

fn read_tag_file(path: &Path) -> CliResult<TagStream> {
    let f = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let stream = if csv {
        read_tags_csv(BufReader::new(f))
    } else {
        read_tags_binary(&mut BufReader::new(f))
    };
    stream.map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn cmd_pairs_analyze(cfg: &PairsConfig, tags: &[PathBuf], out: &Path) -> CliResult<Value> {
    let ctx = Ctx::new(out, cfg, cfg.seed)?;
    let paths: Vec<PathBuf> = if tags.is_empty() {
        (0..cfg.powers_w.len()).map(|k| ctx.path(&tag_file_name(k))).collect()
    } else {
        tags.to_vec()
    };
    let opts = cfg.car_options();
    let span = opts.required_span();

    let mut hists: Vec<(f64, CoincidenceHistogram)> = Vec::new();
    let mut points = Vec::new();
    let mut singles = Vec::new();
    for (k, path) in paths.iter().enumerate() {
        let stream = read_tag_file(path)?;
        let hist = build_histogram(&stream, cfg.analysis.bin_width_ps, span)?;
        let mut f = ctx.csv(&format!("histogram_{k:02}.csv"))?;
        hist.write_csv(&mut f)?;
        f.flush()?;
        let t = stream.header.duration;
        let (na, nb) = (stream.count(Channel::A), stream.count(Channel::B));
        let peak = if stream.tags.is_empty() {
            Value::Null
        } else {
            match fit_peak(&hist, cfg.analysis.fit_half_width_ps) {
                Ok(pf) => json!({ "fwhm_ps": pf.fwhm, "fwhm_err_ps": pf.fwhm_err, "center_ps": pf.center }),
                Err(_) => Value::Null,
            }
        };
        points.push(json!({
            "file": path.file_name().map(|n| n.to_string_lossy().into_owned()),
            "peak_power_W": stream.header.power,
            "duration_s": t,
            "tags_a": na,
            "tags_b": nb,
            "peak_fit": peak,
        }));
        if t > 0.0 {
            singles.push((stream.header.power, na as f64 / t, nb as f64 / t, t));
            hists.push((stream.header.power, hist));
        }
    }

    let rows: Vec<(f64, &CoincidenceHistogram)> = hists.iter().map(|(p, h)| (*p, h)).collect();
    let curve = car_power_curve(&rows, &opts)?;
    let mut f = ctx.csv("car_curve.csv")?;
    write_car_curve_csv(&curve, &mut f)?;
    f.flush()?;

    let car_rows: Vec<Value> = curve
        .iter()
        .map(|r| {
            json!({
                "peak_power_W": r.power,
                "x_raw": r.car.x_raw,
                "x_acc": r.car.x_acc,
                "car": finite_or_null(r.car.car),
                "car_err": finite_or_null(r.car.car_err),
                "car_infinite": r.car.infinite,
                "raw_hz": r.raw_hz,
                "net_hz": r.net_hz,
                "true_pair_hz": r.true_pair_hz,
            })
        })
        .collect();

    let scan: Vec<ScanPoint> = singles
        .iter()
        .zip(&curve)
        .filter(|((p, ..), _)| *p > 0.0 && *p < LOW_POWER_LIMIT)
        .map(|((p, sa, sb, t), row)| ScanPoint {
            power: *p,
            singles_a: *sa,
            singles_b: *sb,
            net_coincidences: row.net_hz,
            integration_time: *t,
        })
        .collect();
    let xi = match power_scan_fit(&scan, cfg.source.rep_rate_hz) {
        Ok(x) => json!({
            "xi_per_W2": x.xi,
            "xi_err": x.xi_err,
            "rate_per_W2_hz": x.rate_per_w2,
            "rate_per_avg_W2_hz": rate_per_average_power_sq(x.rate_per_w2, cfg.source.pulse_duty_cycle)?,
            "negative_coefficient": x.negative_coefficient,
        }),
        Err(e) => json!({ "unavailable": e.to_string() }),
    };
    ctx.summary(
        "pairs_analyze.json",
        json!({
            "window_ps": opts.window_ps,
            "n_side_peaks": opts.n_side_peaks,
            "period_ps": opts.period_ps,
            "files": points,
            "car_curve": car_rows,
            "xi_estimate": xi,
        }),
    )
}

fn visibility_summary(ctx: &Ctx, scan: &FringeScan, car: Option<f64>, extra: Value) -> CliResult<Value> {
    let raw = fit_visibility(scan, false)?;
    let net = fit_visibility(scan, true)?;
    let mut body = json!({
        "v_raw": raw.visibility,
        "v_raw_err": raw.visibility_err,
        "v_net": net.visibility,
        "v_net_err": net.visibility_err,
        "converged": raw.converged && net.converged,
        "raw_bound": car.map(raw_visibility_bound),
        "all_outputs_rate_multiplier": ALL_OUTPUTS_RATE_MULTIPLIER,
    });
    if let (Value::Object(b), Value::Object(e)) = (&mut body, extra) {
        b.extend(e);
    }
    ctx.summary("hom_visibility.json", body)
}

pub fn cmd_hom_simulate(cfg: &HomConfig, seed_flag: Option<u64>, out: &Path) -> CliResult<Value> {
    let seed = required_seed(seed_flag, cfg.seed)?;
    let mut resolved = cfg.clone();
    resolved.seed = Some(seed);
    let ctx = Ctx::new(out, &resolved, Some(seed))?;
    let phases = cfg.phases()?;
    let sim = cfg.simulation();
    let scan = simulate_fringe(&phases, &sim, seed)?;
    let mut f = ctx.csv("hom_fringe.csv")?;
    writeln!(f, "# n_side={}", scan.n_side)?;
    writeln!(f, "# integration_s={}", scan.integration_time)?;
    scan.write_csv(&mut f)?;
    f.flush()?;
    let mut f = ctx.csv("hom_classical.csv")?;
    writeln!(f, "phase_rad,transmission")?;
    for p in &phases {
        writeln!(f, "{p:.9},{:.9}", classical_fringe(*p))?;
    }
    f.flush()?;
    visibility_summary(
        &ctx,
        &scan,
        cfg.car,
        json!({ "peak_rate_hz": cfg.peak_rate_hz, "phase_points": phases.len() }),
    )
}

#[derive(Debug, Deserialize)]
struct FringeRow {
    phase_rad: f64,
    coincidences: u64,
    accidentals: f64,
}

/// Reads a fringe table; `# n_side=` and `# integration_s=` lines are honoured.
pub fn read_fringe_csv(path: &Path) -> CliResult<FringeScan> {
    let f = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let (mut n_side, mut integration) = (DEFAULT_SIDE_PEAKS, 0.0);
    for line in BufReader::new(f).lines() {
        let line = line?;
        let Some(meta) = line.strip_prefix('#') else { break };
        if let Some((k, v)) = meta.trim().split_once('=') {
            match k {
                "n_side" => n_side = v.parse().map_err(|_| CliError::Config(format!("bad n_side `{v}`")))?,
                "integration_s" => {
                    integration = v
                        .parse()
                        .map_err(|_| CliError::Config(format!("bad integration_s `{v}`")))?
                }
                _ => {}
            }
        }
    }
    let rows: Vec<FringeRow> = read_rows(path)?;
    Ok(FringeScan {
        phases: rows.iter().map(|r| r.phase_rad).collect(),
        coincidences: rows.iter().map(|r| r.coincidences).collect(),
        accidentals: rows.iter().map(|r| r.accidentals).collect(),
        integration_time: integration,
        n_side,
    })
}

pub fn cmd_hom_analyze(scan_path: &Path, out: &Path) -> CliResult<Value> {
    let scan = read_fringe_csv(scan_path)?;
    let bytes = std::fs::read(scan_path).map_err(|e| CliError::Io(format!("{}: {e}", scan_path.display())))?;
    let ctx = Ctx::new(out, &json!({ "scan_sha256": hex::encode(Sha256::digest(bytes)) }), None)?;
    let total_acc: f64 = scan.accidentals.iter().sum();
    let car = if total_acc > 0.0 {
        let peak_net = scan.net().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Some(peak_net / (total_acc / scan.accidentals.len() as f64))
    } else {
        None
    };
    visibility_summary(&ctx, &scan, car, json!({ "phase_points": scan.phases.len() }))
}

#[derive(Debug, Deserialize)]
struct CalibrationRow {
    flux_hz: f64,
    counts_hz: f64,
    #[serde(default)]
    counts_err: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct SpectralRow {
    wavelength_nm: f64,
    sde: f64,
}

pub fn cmd_detector(cfg: &DetectorCmdConfig, base: &Path, csv_flag: Option<&Path>, out: &Path) -> CliResult<Value> {
    let ctx = Ctx::new(out, cfg, None)?;
    let mut body = serde_json::Map::new();

    let calib_path = csv_flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.calibration_csv.as_ref().map(|p| base.join(p)));
    if let Some(path) = calib_path {
        let rows: Vec<CalibrationRow> = read_rows(&path)?;
        let flux: Vec<f64> = rows.iter().map(|r| r.flux_hz).collect();
        let counts: Vec<f64> = rows.iter().map(|r| r.counts_hz).collect();
        let errs: Option<Vec<f64>> = rows.iter().map(|r| r.counts_err).collect();
        let cal = calibration_fit(&flux, &counts, errs.as_deref())?;
        body.insert("sde".into(), json!(cal.sde));
        body.insert("sde_err".into(), json!(cal.sde_err));
        body.insert("sde_ci95".into(), json!([cal.ci95.0, cal.ci95.1]));
        body.insert("intercept_hz".into(), json!(cal.intercept_hz));
        body.insert("intercept_err_hz".into(), json!(cal.intercept_err));
        body.insert("saturating".into(), json!(cal.saturating));
    }

    if let Some(m) = &cfg.bias_model {
        let model = BiasCurveModel {
            sde_max: m.sde_max,
            i_half: m.i_half_ua,
            i_width: m.i_width_ua,
            dcr0: m.dcr0_hz,
            i_dcr: m.i_dcr_ua,
            bb_floor: m.bb_floor_hz,
        };
        model.validate()?;
        let sweep = cfg.bias_sweep.clone().unwrap_or(BiasSweepConfig {
            start_ua: 0.0,
            stop_ua: 12.0,
            count: 25,
        });
        let id = match cfg.detector.unwrap_or(DetectorLabel::A) {
            DetectorLabel::A => DetectorId::A,
            DetectorLabel::B => DetectorId::B,
        };
        let mut f = ctx.csv("detector_bias.csv")?;
        writeln!(f, "bias_uA,sde,dcr_hz,discrimination_mV")?;
        for i in linspace(sweep.start_ua, sweep.stop_ua, sweep.count) {
            let v = discrimination_voltage(id, i)
                .map(|v| format!("{v:.4}"))
                .unwrap_or_default();
            writeln!(
                f,
                "{i:.6},{:.6},{:.6},{v}",
                sde_vs_bias(&model, i)?,
                dcr_vs_bias(&model, i)?
            )?;
        }
        f.flush()?;
    }

    if let Some(table) = &cfg.spectral_table_csv {
        let rows: Vec<SpectralRow> = read_rows(&base.join(table))?;
        let table: Vec<(f64, f64)> = rows.iter().map(|r| (r.wavelength_nm, r.sde)).collect();
        let queries: Vec<Value> = cfg
            .query_wavelengths_nm
            .iter()
            .map(|&l| match spectral_sde(&table, l, cfg.smoothing_window) {
                Ok((v, e)) => Ok(json!({ "wavelength_nm": l, "sde": v, "sde_err": e, "extrapolated": false })),
                Err(Error::InvalidArgument(_)) => {
                    Ok(json!({ "wavelength_nm": l, "sde": null, "sde_err": null, "extrapolated": true }))
                }
                Err(e) => Err(CliError::from(e)),
            })
            .collect::<CliResult<_>>()?;
        body.insert("spectral_queries".into(), Value::Array(queries));
    }
    ctx.summary("detector_summary.json", Value::Object(body))
}

/// Writes the summary as JSON, or as `key,value` lines with nested keys
/// joined by dots.
pub fn print_summary<W: Write>(summary: &Value, format: Format, out: &mut W) -> std::io::Result<()> {
    match format {
        Format::Json => writeln!(out, "{summary:#}"),
        Format::Csv => {
            writeln!(out, "key,value")?;
            let mut lines = Vec::new();
            flatten("", summary, &mut lines);
            for (k, v) in lines {
                writeln!(out, "{k},{v}")?;
            }
            Ok(())
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let key = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match v {
        Value::Object(m) => m.iter().for_each(|(k, v)| flatten(&key(k), v, out)),
        Value::Array(a) => a
            .iter()
            .enumerate()
            .for_each(|(i, v)| flatten(&key(&i.to_string()), v, out)),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected_with_path() {
        let text = r#"{"peak_rate_hz": 5.5, "integration_s": 1, "reflectivity": 0.5, "bogus": 1}"#;
        match parse_config::<HomConfig>(text) {
            Err(CliError::Config(msg)) => assert!(msg.contains("bogus"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let nested = r#"{"waveguide": {"width_nm": "x"}}"#;
        match parse_config::<PropagateConfig>(nested) {
            Err(CliError::Config(msg)) => assert!(msg.contains("waveguide.width_nm"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::from(Error::InvalidArgument("x".into())).exit_code(), 2);
        let nc = Error::NonConvergence {
            steps: 64,
            rel_change: 1.0,
        };
        assert_eq!(CliError::from(nc).exit_code(), 3);
        let bad = Error::MalformedTags {
            offset: 3,
            reason: "x".into(),
        };
        assert_eq!(CliError::from(bad).exit_code(), 4);
    }

    #[test]
    fn seed_required() {
        assert!(required_seed(None, None).is_err());
        assert_eq!(required_seed(Some(3), Some(4)).unwrap(), 3);
        assert_eq!(required_seed(None, Some(4)).unwrap(), 4);
    }

    #[test]
    fn flatten_summary() {
        let v = json!({"a": 1, "b": {"c": [true, "x"]}});
        let mut buf = Vec::new();
        print_summary(&v, Format::Csv, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "key,value\na,1\nb.c.0,true\nb.c.1,x\n");
    }
}
