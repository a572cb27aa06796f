//! Superconducting-nanowire detector response curves and calibration
//! analysis: bias dependence of efficiency and dark counts, readout
//! discrimination levels, flux-calibration fits and smoothed spectral
//! efficiency.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fitters::{linear_least_squares, ErrorScaling, Weights};

/// Two-sided 95 % normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;
/// Bias range over which the discriminator levels are characterised, µA.
pub const DISCRIMINATION_RANGE_UA: (f64, f64) = (0.0, 12.0);
pub const DEFAULT_SMOOTHING_WINDOW: usize = 5;

/// Sigmoid efficiency plateau plus exponential intrinsic dark counts and a
/// black-body floor that follows the efficiency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasCurveModel {
    pub sde_max: f64,
    /// µA
    pub i_half: f64,
    /// µA
    pub i_width: f64,
    /// Hz
    pub dcr0: f64,
    /// µA
    pub i_dcr: f64,
    /// Hz
    pub bb_floor: f64,
}

impl BiasCurveModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sde_max) {
            return invalid("sde_max must lie in [0, 1]");
        }
        if !(self.i_width > 0.0) || !(self.i_dcr > 0.0) {
            return invalid("i_width and i_dcr must be positive");
        }
        if !(self.dcr0 >= 0.0) || !(self.bb_floor >= 0.0) {
            return invalid("dcr0 and bb_floor must be ≥ 0");
        }
        Ok(())
    }
}

fn check_bias(i_bias: f64) -> Result<()> {
    if !(i_bias >= 0.0) || !i_bias.is_finite() {
        return invalid(format!("bias must be ≥ 0 µA, got {i_bias}"));
    }
    Ok(())
}

pub fn sde_vs_bias(model: &BiasCurveModel, i_bias: f64) -> Result<f64> {
    model.validate()?;
    check_bias(i_bias)?;
    Ok(model.sde_max / (1.0 + (-(i_bias - model.i_half) / model.i_width).exp()))
}

pub fn dcr_vs_bias(model: &BiasCurveModel, i_bias: f64) -> Result<f64> {
    let sde = sde_vs_bias(model, i_bias)?;
    let bb = if model.sde_max > 0.0 {
        model.bb_floor * sde / model.sde_max
    } else {
        0.0
    };
    Ok(model.dcr0 * (i_bias / model.i_dcr).exp() + bb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectorId {
    A,
    B,
}

/// Readout discrimination level, mV, as a linear function of bias.
pub fn discrimination_voltage(id: DetectorId, i_bias: f64) -> Result<f64> {
    let (lo, hi) = DISCRIMINATION_RANGE_UA;
    if !(lo..=hi).contains(&i_bias) {
        return invalid(format!("bias {i_bias} µA outside [{lo}, {hi}] µA"));
    }
    let (slope, offset) = match id {
        DetectorId::A => (7.46, 15.0),
        DetectorId::B => (10.84, 20.0),
    };
    Ok(slope * i_bias + offset)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationResult {
    /// Slope of dark-subtracted counts against launched flux.
    pub sde: f64,
    pub sde_err: f64,
    pub ci95: (f64, f64),
    /// Intercept of the unconstrained line, Hz (diagnostic).
    pub intercept_hz: f64,
    pub intercept_err: f64,
    /// Negative curvature beyond 3σ: counts saturate at high flux.
    pub saturating: bool,
}

/// Weighted fit of counts = SDE·flux through the origin.
///
/// `counts_err` gives one-sigma count-rate errors; without it points are
/// weighted equally and the scatter sets the uncertainty.
pub fn calibration_fit(flux: &[f64], counts: &[f64], counts_err: Option<&[f64]>) -> Result<CalibrationResult> {
    if flux.len() != counts.len() || counts_err.is_some_and(|e| e.len() != flux.len()) {
        return invalid("flux, counts and errors differ in length");
    }
    if flux.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "need ≥ 4 flux points, got {}",
            flux.len()
        )));
    }
    if flux.iter().any(|f| !(*f > 0.0)) || counts.iter().any(|c| !c.is_finite()) {
        return invalid("flux must be positive and counts finite");
    }
    let (weights, scaling) = match counts_err {
        Some(e) => (Weights::Sigma(e.to_vec()), ErrorScaling::Absolute),
        None => (Weights::Uniform, ErrorScaling::ReducedChiSquare),
    };
    if counts.iter().all(|c| *c == 0.0) {
        return Ok(CalibrationResult {
            sde: 0.0,
            sde_err: 0.0,
            ci95: (0.0, 0.0),
            intercept_hz: 0.0,
            intercept_err: 0.0,
            saturating: false,
        });
    }
    let origin = linear_least_squares(&[flux.to_vec()], counts, &weights, scaling)?;
    let line = linear_least_squares(&[flux.to_vec(), vec![1.0; flux.len()]], counts, &weights, scaling)?;
    let f2: Vec<f64> = flux.iter().map(|f| f * f).collect();
    let curved = linear_least_squares(&[flux.to_vec(), f2], counts, &weights, scaling)?;
    let (sde, err) = (origin.params[0], origin.param_errs[0]);
    Ok(CalibrationResult {
        sde,
        sde_err: err,
        ci95: (sde - Z95 * err, sde + Z95 * err),
        intercept_hz: line.params[1],
        intercept_err: line.param_errs[1],
        saturating: curved.params[1] < 0.0 && curved.params[1].abs() > 3.0 * curved.param_errs[1],
    })
}

/// Efficiency and its window scatter at `wavelength` from a tabulated
/// spectral response.
///
/// Each node is replaced by the mean of the `window` nodes centred on it
/// (truncated at the table ends), with the standard deviation of those
/// nodes as its error; both are then linearly interpolated.
pub fn spectral_sde(table: &[(f64, f64)], wavelength: f64, window: usize) -> Result<(f64, f64)> {
    if table.len() < 2 {
        return Err(Error::InsufficientData("spectral table needs ≥ 2 rows".into()));
    }
    if window == 0 {
        return invalid("smoothing window must be ≥ 1");
    }
    let mut rows = table.to_vec();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (lo, hi) = (rows[0].0, rows[rows.len() - 1].0);
    if !(lo..=hi).contains(&wavelength) {
        return invalid(format!("wavelength {wavelength} outside table range [{lo}, {hi}]"));
    }
    let half = window / 2;
    let smoothed: Vec<(f64, f64)> = (0..rows.len())
        .map(|i| {
            let a = i.saturating_sub(half);
            let b = (i + window - half).min(rows.len());
            let vals: Vec<f64> = rows[a..b].iter().map(|r| r.1).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (mean, sd)
        })
        .collect();
    let k = rows.partition_point(|r| r.0 < wavelength);
    if k < rows.len() && rows[k].0 == wavelength {
        return Ok(smoothed[k]);
    }
    let (i, j) = (k - 1, k);
    let f = (wavelength - rows[i].0) / (rows[j].0 - rows[i].0);
    let lerp = |a: f64, b: f64| a + f * (b - a);
    Ok((lerp(smoothed[i].0, smoothed[j].0), lerp(smoothed[i].1, smoothed[j].1)))
}
