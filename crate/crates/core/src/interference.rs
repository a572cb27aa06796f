//! Two-source biphoton interference at a directional coupler: the output
//! state, coincidence fringes, their simulation and visibility fits, and
//! the thermo-optic phase-modulator calibration.

use std::io::Write;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fitters::{dominant_angular_frequency, initial_guess, least_squares, FitOptions, ModelKind, Weights};

/// Monitoring all four output combinations instead of the one measured
/// pair doubles the coincidence rate.
pub const ALL_OUTPUTS_RATE_MULTIPLIER: f64 = 2.0;
/// Phase points in a fringe scan.
pub const DEFAULT_FRINGE_POINTS: usize = 30;

/// Output amplitudes over |1s1i⟩_A|0⟩_B, |0⟩_A|1s1i⟩_B, |1s0i⟩_A|0s1i⟩_B,
/// |0s1i⟩_A|1s0i⟩_B.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiphotonState {
    pub amplitudes: [Complex64; 4],
}

impl BiphotonState {
    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Both photons leave through the same port.
    pub fn bunched_probability(&self) -> f64 {
        self.amplitudes[0].norm_sqr() + self.amplitudes[1].norm_sqr()
    }
}

/// State after the coupler for a pump phase `phi` and coupler power
/// reflectivity `r`.
///
/// The pre-coupler state (e^{−iφ}|1s1i⟩₁ + e^{iφ}|1s1i⟩₂)/√2 is mapped by
/// a₁† → t·a_A† + i√R·a_B†, a₂† → i√R·a_A† + t·a_B† (t = √(1−R)) for both
/// signal and idler; a global phase −i makes the balanced case real.
pub fn biphoton_state(phi: f64, r: f64) -> Result<BiphotonState> {
    if !(0.0..=1.0).contains(&r) {
        return invalid(format!("reflectivity must lie in [0, 1], got {r}"));
    }
    let rr = r.sqrt();
    let t = (1.0 - r).sqrt();
    let em = Complex64::from_polar(1.0, -phi);
    let ep = Complex64::from_polar(1.0, phi);
    let g = Complex64::new(0.0, -1.0) / std::f64::consts::SQRT_2;
    let cross = Complex64::new(std::f64::consts::SQRT_2 * t * rr * phi.cos(), 0.0);
    Ok(BiphotonState {
        amplitudes: [g * (em * t * t - ep * r), g * (ep * t * t - em * r), cross, cross],
    })
}

/// Probability of the monitored coincidence |1s0i⟩_A|0s1i⟩_B.
pub fn coincidence_probability(state: &BiphotonState) -> f64 {
    state.amplitudes[2].norm_sqr()
}

/// Single-photon Mach–Zehnder transmission.
pub fn classical_fringe(phi: f64) -> f64 {
    (1.0 + phi.cos()) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FringeScan {
    pub phases: Vec<f64>,
    pub coincidences: Vec<u64>,
    /// Accidentals estimated per point (mean of side-window counts).
    pub accidentals: Vec<f64>,
    pub integration_time: f64,
    /// Side windows behind each accidental estimate.
    pub n_side: usize,
}

impl FringeScan {
    pub fn validate(&self) -> Result<()> {
        let n = self.phases.len();
        if self.coincidences.len() != n || self.accidentals.len() != n {
            return invalid("fringe scan columns differ in length");
        }
        if self.accidentals.iter().any(|a| !(*a >= 0.0)) {
            return invalid("accidentals must be ≥ 0");
        }
        Ok(())
    }

    pub fn net(&self) -> Vec<f64> {
        self.coincidences
            .iter()
            .zip(&self.accidentals)
            .map(|(c, a)| *c as f64 - a)
            .collect()
    }

    /// `phase_rad,coincidences,accidentals,net`
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "phase_rad,coincidences,accidentals,net")?;
        for (((p, c), a), n) in self
            .phases
            .iter()
            .zip(&self.coincidences)
            .zip(&self.accidentals)
            .zip(self.net())
        {
            writeln!(out, "{p:.9},{c},{a:.6},{n:.6}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FringeSimulation {
    /// Expected net coincidences per point at the fringe maximum of a
    /// balanced coupler.
    pub pairs_budget: f64,
    /// Coincidence-to-accidental ratio at the fringe maximum; infinite for
    /// no accidentals.
    pub car: f64,
    pub reflectivity: f64,
    /// Fraction of pairs that interfere; the rest add a flat background.
    pub indistinguishability: f64,
    pub n_side: usize,
    pub integration_time: f64,
}

impl FringeSimulation {
    pub fn validate(&self) -> Result<()> {
        if !(self.pairs_budget > 0.0) || !self.pairs_budget.is_finite() {
            return invalid("pairs_budget must be positive");
        }
        if !(self.car > 0.0) {
            return invalid("car must be positive");
        }
        if !(0.0..=1.0).contains(&self.indistinguishability) {
            return invalid("indistinguishability must lie in [0, 1]");
        }
        if self.n_side == 0 {
            return invalid("n_side must be ≥ 1");
        }
        if !(self.integration_time > 0.0) {
            return invalid("integration_time must be positive");
        }
        biphoton_state(0.0, self.reflectivity).map(|_| ())
    }

    /// Expected net coincidences at `phi`.
    pub fn net_mean(&self, phi: f64) -> Result<f64> {
        let r = self.reflectivity;
        let coherent = coincidence_probability(&biphoton_state(phi, r)?);
        let incoherent = r * (1.0 - r);
        let m = self.indistinguishability;
        Ok(self.pairs_budget * (m * coherent + (1.0 - m) * incoherent) / 0.5)
    }

    pub fn accidental_mean(&self) -> f64 {
        if self.car.is_finite() {
            self.pairs_budget / self.car
        } else {
            0.0
        }
    }
}

/// Raw visibility ceiling set by accidentals, CAR/(2 + CAR).
pub fn raw_visibility_bound(car: f64) -> f64 {
    if car.is_infinite() {
        1.0
    } else {
        car / (2.0 + car)
    }
}

/// `n` phases evenly spaced over [start, stop].
pub fn linspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![start],
        _ => (0..n)
            .map(|k| start + (stop - start) * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Poisson coincidences and side-window accidentals at each phase. Point
/// `k` draws from ChaCha20 stream `k` of `seed`.
pub fn simulate_fringe(phases: &[f64], sim: &FringeSimulation, seed: u64) -> Result<FringeScan> {
    sim.validate()?;
    let acc = sim.accidental_mean();
    let means = phases.iter().map(|p| sim.net_mean(*p)).collect::<Result<Vec<_>>>()?;
    let draw = |rng: &mut ChaCha20Rng, mean: f64| -> u64 {
        if mean > 0.0 {
            Poisson::new(mean).expect("positive mean").sample(rng) as u64
        } else {
            0
        }
    };
    let points: Vec<(u64, f64)> = means
        .par_iter()
        .enumerate()
        .map(|(k, &net)| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let raw = draw(&mut rng, net + acc);
            let side: u64 = (0..sim.n_side).map(|_| draw(&mut rng, acc)).sum();
            (raw, side as f64 / sim.n_side as f64)
        })
        .collect();
    Ok(FringeScan {
        phases: phases.to_vec(),
        coincidences: points.iter().map(|p| p.0).collect(),
        accidentals: points.iter().map(|p| p.1).collect(),
        integration_time: sim.integration_time,
        n_side: sim.n_side,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VisibilityFit {
    pub visibility: f64,
    pub visibility_err: f64,
    /// Mean level A of A(1 + V·cos(2φ + φ₀)).
    pub amplitude: f64,
    pub phase_offset: f64,
    pub converged: bool,
}

/// Fit X(φ) = A(1 + V·cos(2φ + φ₀)), optionally after subtracting the
/// accidental estimate from every point.
pub fn fit_visibility(scan: &FringeScan, subtract_accidentals: bool) -> Result<VisibilityFit> {
    scan.validate()?;
    let n = scan.phases.len();
    if n < 8 {
        return Err(Error::InsufficientData(format!("need ≥ 8 phase points, got {n}")));
    }
    let (lo, hi) = scan
        .phases
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(*p), b.max(*p)));
    if hi - lo < std::f64::consts::PI * (1.0 - 1e-9) {
        return Err(Error::InsufficientData(
            "scan spans less than one fringe period (π)".into(),
        ));
    }
    let y: Vec<f64> = if subtract_accidentals {
        scan.net()
    } else {
        scan.coincidences.iter().map(|c| *c as f64).collect()
    };
    let n_side = scan.n_side.max(1) as f64;
    let sigma: Vec<f64> = scan
        .coincidences
        .iter()
        .zip(&scan.accidentals)
        .map(|(c, a)| {
            let var = (*c as f64).max(1.0) + if subtract_accidentals { a / n_side } else { 0.0 };
            var.sqrt()
        })
        .collect();
    let model = ModelKind::Fringe { harmonic: 2.0 };
    let guess = initial_guess(model, &scan.phases, &y)?;
    let fit = least_squares(
        &model,
        &scan.phases,
        &y,
        &Weights::Sigma(sigma),
        &guess,
        &FitOptions::default(),
    )?;
    let (a, mut v, mut ph) = (fit.params[0], fit.params[1], fit.params[2]);
    if v < 0.0 {
        v = -v;
        ph += std::f64::consts::PI;
    }
    Ok(VisibilityFit {
        visibility: v,
        visibility_err: fit.param_errs[1],
        amplitude: a,
        phase_offset: ph.rem_euclid(2.0 * std::f64::consts::PI),
        converged: fit.converged,
    })
}

/// φ = slope·V² + offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseCalibration {
    /// rad/V²
    pub slope: f64,
    pub offset: f64,
    pub slope_err: f64,
    pub offset_err: f64,
    /// Fitted baseline c and contrast d of T = c + d·cos(φ).
    pub baseline: f64,
    pub contrast: f64,
}

pub fn phase_from_voltage(v_squared: f64, cal: &PhaseCalibration) -> Result<f64> {
    if !(cal.slope > 0.0) {
        return invalid("calibration slope must be positive");
    }
    Ok(cal.slope * v_squared + cal.offset)
}

/// Fit transmission T(V²) = c + d·cos(a·V² + b) with a, d > 0 and
/// b ∈ (−π, π].
pub fn fit_phase_calibration(v_squared: &[f64], transmission: &[f64]) -> Result<PhaseCalibration> {
    if v_squared.len() != transmission.len() {
        return invalid("voltage and transmission columns differ in length");
    }
    if v_squared.len() < 8 {
        return Err(Error::InsufficientData("need ≥ 8 calibration points".into()));
    }
    let omega = dominant_angular_frequency(v_squared, transmission)?;
    let model = ModelKind::Sinusoid;
    let mut guess = initial_guess(model, v_squared, transmission)?;
    guess[2] = omega;
    let fit = least_squares(
        &model,
        v_squared,
        transmission,
        &Weights::Uniform,
        &guess,
        &FitOptions::scaled(),
    )?;
    if !fit.converged {
        return Err(Error::NonConvergence {
            steps: fit.iterations,
            rel_change: fit.residual_rms,
        });
    }
    let (c, mut d, mut a, mut b) = (fit.params[0], fit.params[1], fit.params[2], fit.params[3]);
    if a < 0.0 {
        a = -a;
        b = -b;
    }
    if d < 0.0 {
        d = -d;
        b += std::f64::consts::PI;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    b = b.rem_euclid(two_pi);
    if b > std::f64::consts::PI {
        b -= two_pi;
    }
    Ok(PhaseCalibration {
        slope: a,
        offset: b,
        slope_err: fit.param_errs[2],
        offset_err: fit.param_errs[3],
        baseline: c,
        contrast: d,
    })
}
