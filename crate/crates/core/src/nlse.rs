//! Symmetric split-step propagation of a pump pulse through a waveguide
//! with dispersion, linear loss, Kerr self-phase modulation, two-photon
//! absorption and optional free-carrier absorption/dispersion.
//!
//! The nonlinear sub-step is integrated exactly per sample: with
//! dA/dz = (iγ − α_TPA/2)|A|²A the power follows P/(1 + α_TPA·P·h) and the
//! phase (γ/α_TPA)·ln(1 + α_TPA·P·h).

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fitters::{linear_least_squares, ErrorScaling, Weights};
use crate::physmodel::{SampledPulse, WaveguideSpec, HBAR};
use crate::spectral::UnitaryFft;

/// Minimum number of split steps.
pub const MIN_STEPS: usize = 64;

/// Relative energy change between N and 2N steps above which a run is not
/// considered converged.
pub const ENERGY_CONVERGENCE_TOL: f64 = 1e-3;

/// Linear-order TPA shape factor ∫s²dt/∫s dt for a peak-normalised sech²
/// intensity profile s(t). `1/η ≈ 1 + α_TPA·L_eff·κ·P` at low power.
pub const SECH2_TPA_SHAPE_FACTOR: f64 = 2.0 / 3.0;

/// Free-carrier model constants. Off by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeCarrierOptions {
    pub enabled: bool,
    /// Free-carrier absorption cross-section, m².
    pub fca_cross_section: f64,
    /// Ratio of free-carrier index change to absorption, μ in −(σ/2)(1 + iμ)N.
    pub fcd_coefficient: f64,
}

impl Default for FreeCarrierOptions {
    fn default() -> Self {
        Self {
            enabled: false,
            fca_cross_section: 1.45e-21,
            fcd_coefficient: 7.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationOptions {
    pub steps: usize,
    pub free_carriers: FreeCarrierOptions,
    /// Number of step doublings tried before reporting non-convergence.
    pub max_refinements: usize,
}

impl Default for PropagationOptions {
    fn default() -> Self {
        Self {
            steps: 128,
            free_carriers: FreeCarrierOptions::default(),
            max_refinements: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationResult {
    pub pulse_out: SampledPulse,
    /// Output energy over input energy, relative to linear loss alone.
    pub transmission_eta: f64,
    /// Peak Kerr phase, rad.
    pub phi_nl_max: f64,
    /// Peak magnitude of the free-carrier phase, rad (zero when disabled).
    pub phi_fc_max: f64,
    /// Peak magnitude of the combined Kerr and free-carrier phase, rad.
    pub phi_total_max: f64,
    /// Peak free-carrier density, 1/m³.
    pub carrier_density_peak: f64,
    /// Step count of the returned (finer) run.
    pub steps_used: usize,
}

struct Run {
    field: Vec<Complex64>,
    kerr_phase: Vec<f64>,
    fc_phase: Vec<f64>,
    carrier_peak: f64,
}

fn run_split_step(pulse: &SampledPulse, wg: &WaveguideSpec, gamma: f64, steps: usize, fc: &FreeCarrierOptions) -> Run {
    let n = pulse.n_samples();
    let h = wg.length / steps as f64;
    let offsets = pulse.grid().angular_offsets();
    let dispersive = wg.alpha_lin != 0.0 || wg.beta2 != 0.0 || wg.beta4 != 0.0;
    let half: Vec<Complex64> = offsets
        .iter()
        .map(|w| {
            let w2 = w * w;
            let d = Complex64::new(-wg.alpha_lin / 2.0, wg.beta2 / 2.0 * w2 + wg.beta4 / 24.0 * w2 * w2);
            (d * (h / 2.0)).exp()
        })
        .collect();
    let fft = UnitaryFft::new(n);
    let mut scratch = fft.make_scratch();
    let mut a = pulse.envelope.clone();
    let mut kerr = vec![0.0; n];
    let mut fcp = vec![0.0; n];
    let mut carrier_peak: f64 = 0.0;
    let mut density = vec![0.0; n];
    let photon_energy = HBAR * pulse.carrier_angular_frequency();

    let linear = |a: &mut Vec<Complex64>, scratch: &mut Vec<Complex64>| {
        if !dispersive {
            return;
        }
        fft.forward(a, scratch);
        a.iter_mut().zip(&half).for_each(|(x, l)| *x *= l);
        fft.inverse(a, scratch);
    };

    for _ in 0..steps {
        linear(&mut a, &mut scratch);

        if fc.enabled && wg.alpha_tpa > 0.0 {
            // carriers generated by TPA accumulate over the pulse (no recombination
            // on ps time scales)
            let mut acc = 0.0;
            for (d, x) in density.iter_mut().zip(&a) {
                let p = x.norm_sqr();
                acc += wg.alpha_tpa * p * p / (2.0 * photon_energy * wg.a_eff) * pulse.dt;
                *d = acc;
            }
            carrier_peak = carrier_peak.max(acc);
        }

        for k in 0..n {
            let p = a[k].norm_sqr();
            let (amp_scale, phase) = if wg.alpha_tpa > 0.0 {
                let f = 1.0 + wg.alpha_tpa * p * h;
                (f.powf(-0.5), gamma / wg.alpha_tpa * f.ln())
            } else {
                (1.0, gamma * p * h)
            };
            kerr[k] += phase;
            let mut x = a[k] * amp_scale * Complex64::from_polar(1.0, phase);
            if fc.enabled {
                let s = fc.fca_cross_section / 2.0 * density[k] * h;
                let dphi = -s * fc.fcd_coefficient;
                fcp[k] += dphi;
                x *= Complex64::from_polar((-s).exp(), dphi);
            }
            a[k] = x;
        }

        linear(&mut a, &mut scratch);
    }
    Run {
        field: a,
        kerr_phase: kerr,
        fc_phase: fcp,
        carrier_peak,
    }
}

fn energy(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum()
}

/// Propagate `pulse` through `wg` with symmetric split steps.
///
/// The run is repeated at twice the step count; if the output energies
/// differ by more than 0.1 % the step count keeps doubling (up to
/// `max_refinements` times) before [`Error::NonConvergence`] is returned.
pub fn propagate(pulse: &SampledPulse, wg: &WaveguideSpec, opts: &PropagationOptions) -> Result<PropagationResult> {
    wg.validate()?;
    if opts.steps < MIN_STEPS {
        return invalid(format!("at least {MIN_STEPS} steps required, got {}", opts.steps));
    }
    let gamma = crate::fwm::nonlinear_parameter(wg.n2, wg.a_eff, pulse.carrier_wavelength)?;
    let e_in = energy(&pulse.envelope);

    let mut steps = opts.steps;
    let mut coarse = run_split_step(pulse, wg, gamma, steps, &opts.free_carriers);
    let mut refinements = 0;
    loop {
        let fine = run_split_step(pulse, wg, gamma, steps * 2, &opts.free_carriers);
        let (ec, ef) = (energy(&coarse.field), energy(&fine.field));
        let rel = if ef > 0.0 { (ec - ef).abs() / ef } else { 0.0 };
        if rel <= ENERGY_CONVERGENCE_TOL {
            return finish(pulse, wg, e_in, fine, steps * 2);
        }
        refinements += 1;
        if refinements > opts.max_refinements {
            return Err(Error::NonConvergence { steps, rel_change: rel });
        }
        steps *= 2;
        coarse = fine;
    }
}

fn finish(pulse: &SampledPulse, wg: &WaveguideSpec, e_in: f64, run: Run, steps: usize) -> Result<PropagationResult> {
    let e_out = energy(&run.field);
    let eta = if e_in > 0.0 {
        e_out / (e_in * wg.linear_transmission())
    } else {
        1.0
    };
    let phi_nl_max = run.kerr_phase.iter().cloned().fold(0.0, f64::max);
    let phi_fc_max = run.fc_phase.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let phi_total_max = run
        .kerr_phase
        .iter()
        .zip(&run.fc_phase)
        .map(|(a, b)| (a + b).abs())
        .fold(0.0, f64::max);
    let pulse_out = SampledPulse::new(pulse.carrier_wavelength, pulse.rep_rate, pulse.dt, run.field)?;
    Ok(PropagationResult {
        pulse_out,
        transmission_eta: eta,
        phi_nl_max,
        phi_fc_max,
        phi_total_max,
        carrier_density_peak: run.carrier_peak,
        steps_used: steps,
    })
}

/// One row of a power sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub peak_power: f64,
    /// Transmission normalised to the lowest-power row.
    pub eta: f64,
    pub phi_nl: f64,
    pub result: PropagationResult,
}

/// Propagate the template pulse rescaled to each peak power.
///
/// Rows are computed in parallel; each is a pure function of its inputs so
/// the output does not depend on scheduling.
pub fn power_sweep(
    wg: &WaveguideSpec,
    template: &SampledPulse,
    powers: &[f64],
    opts: &PropagationOptions,
) -> Result<Vec<SweepRow>> {
    if powers.is_empty() {
        return invalid("power sweep needs at least one power");
    }
    if powers.windows(2).any(|w| !(w[0] <= w[1])) {
        return invalid("sweep powers must be sorted ascending");
    }
    let results = powers
        .par_iter()
        .map(|&p| propagate(&template.with_peak_power(p)?, wg, opts))
        .collect::<Result<Vec<_>>>()?;
    let eta0 = results[0].transmission_eta;
    Ok(powers
        .iter()
        .zip(results)
        .map(|(&p, r)| SweepRow {
            peak_power: p,
            eta: if eta0 > 0.0 { r.transmission_eta / eta0 } else { 0.0 },
            phi_nl: r.phi_nl_max,
            result: r,
        })
        .collect())
}

/// `peak_power_W,eta,phi_nl_rad`
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "peak_power_W,eta,phi_nl_rad")?;
    for r in rows {
        writeln!(out, "{:.6},{:.9},{:.9}", r.peak_power, r.eta, r.phi_nl)?;
    }
    Ok(())
}

/// α_TPA from a linear fit of inverse transmission against peak power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TpaEstimate {
    pub alpha_tpa: f64,
    pub alpha_tpa_err: f64,
    pub slope: f64,
    pub intercept: f64,
}

/// Fit 1/η = c·(1 + α_TPA·L_eff·κ·P) and return α_TPA.
///
/// Using the slope/intercept ratio makes the estimate independent of any
/// global scaling of the transmissions.
pub fn inverse_transmission_fit(
    powers: &[f64],
    transmissions: &[f64],
    l_eff: f64,
    shape_factor: f64,
) -> Result<TpaEstimate> {
    if powers.len() != transmissions.len() {
        return invalid("powers and transmissions differ in length");
    }
    if powers.len() < 5 {
        return Err(Error::InsufficientData(format!(
            "need at least 5 points, got {}",
            powers.len()
        )));
    }
    if !(l_eff > 0.0) || !(shape_factor > 0.0) {
        return invalid("effective length and shape factor must be positive");
    }
    let mut pts: Vec<(f64, f64)> = powers.iter().cloned().zip(transmissions.iter().cloned()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.iter().any(|(p, t)| !(*p > 0.0) || !(*t > 0.0)) {
        return Err(Error::RejectedData("powers and transmissions must be positive".into()));
    }
    let (pmin, pmax) = (pts[0].0, pts[pts.len() - 1].0);
    if pmax < 5.0 * pmin {
        return Err(Error::InsufficientData(format!(
            "power range {pmin}–{pmax} W spans less than a factor of 5"
        )));
    }
    if pts.windows(2).any(|w| w[1].1 > w[0].1 * (1.0 + 1e-9)) {
        return Err(Error::RejectedData("transmission increases with power".into()));
    }
    let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let y: Vec<f64> = pts.iter().map(|p| 1.0 / p.1).collect();
    let fit = linear_least_squares(
        &[x.clone(), vec![1.0; x.len()]],
        &y,
        &Weights::Uniform,
        ErrorScaling::ReducedChiSquare,
    )?;
    let (slope, intercept) = (fit.params[0], fit.params[1]);
    let ratio = slope / intercept;
    // error propagation for slope/intercept
    let var_ratio = ratio.powi(2)
        * (fit.cov(0, 0) / slope.powi(2).max(1e-300) + fit.cov(1, 1) / intercept.powi(2)
            - 2.0 * fit.cov(0, 1) / (slope * intercept).abs().max(1e-300) * slope.signum());
    let ratio_err = if slope == 0.0 {
        fit.param_errs[0] / intercept
    } else {
        var_ratio.max(0.0).sqrt()
    };
    let k = l_eff * shape_factor;
    Ok(TpaEstimate {
        alpha_tpa: ratio / k,
        alpha_tpa_err: ratio_err / k,
        slope,
        intercept,
    })
}
