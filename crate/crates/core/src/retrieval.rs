//! Gerchberg–Saxton phase retrieval of a pulse's temporal phase from its
//! power spectrum and temporal envelope, and n₂ extraction from retrieved
//! nonlinear phases.

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::fitters::{linear_least_squares, ErrorScaling, Weights};
use crate::fwm::n2_from_gamma;
use crate::physmodel::{SampledPulse, WaveguideSpec};
use crate::spectral::UnitaryFft;

pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_TOL: f64 = 1e-6;
/// Envelope fraction of peak defining the phase-fit window.
pub const DEFAULT_FIT_THRESHOLD: f64 = 0.05;

/// Chirp amplitudes (rad) of the starting phases ε·|a(t)|²/max.
///
/// For a real, symmetric envelope and spectrum the zero-phase start is a
/// fixed point of the projections, so several chirped starts are tried and
/// the lowest-residual one kept. Zero is included so transform-limited
/// data still converges onto the flat phase.
pub const START_CHIRPS: [f64; 7] = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalProblem {
    /// Power spectral density in FFT bin order on the envelope's grid.
    pub spectrum_psd: Vec<f64>,
    /// |a(t)| on the time grid (centred, sample n/2 at t = 0).
    pub temporal_envelope: Vec<f64>,
    pub dt: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl RetrievalProblem {
    pub fn new(spectrum_psd: Vec<f64>, temporal_envelope: Vec<f64>, dt: f64) -> Self {
        Self {
            spectrum_psd,
            temporal_envelope,
            dt,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }

    /// Spectrum and envelope of a sampled pulse, as a retrieval target.
    pub fn from_pulse(pulse: &SampledPulse) -> Self {
        Self::new(
            crate::spectral::power_spectrum(&pulse.envelope),
            pulse.envelope.iter().map(|a| a.norm()).collect(),
            pulse.dt,
        )
    }

    fn validate(&self) -> Result<()> {
        let n = self.temporal_envelope.len();
        if n < 2 || self.spectrum_psd.len() != n {
            return invalid("spectrum and envelope must have equal length ≥ 2");
        }
        if self
            .spectrum_psd
            .iter()
            .chain(&self.temporal_envelope)
            .any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return invalid("spectrum and envelope must be finite and nonnegative");
        }
        if !(self.tol > 0.0) {
            return invalid("tol must be positive");
        }
        if self.max_iter == 0 {
            return invalid("max_iter must be positive");
        }
        if !(self.dt > 0.0) {
            return invalid("dt must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    /// Unwrapped phase, zero at the envelope peak.
    pub temporal_phase: Vec<f64>,
    pub phi_nl: f64,
    pub phi_nl_err: f64,
    pub iterations: usize,
    /// Final relative RMS mismatch of the spectral amplitude.
    pub residual: f64,
    pub converged: bool,
    /// Spectrum and envelope energies differed by more than 20 %.
    pub energy_mismatch: bool,
    /// Residual at every iteration of the selected start.
    #[serde(skip)]
    pub residual_history: Vec<f64>,
}

struct Run {
    field: Vec<Complex64>,
    history: Vec<f64>,
    converged: bool,
}

fn run_gs(
    fft: &UnitaryFft,
    target_amp: &[f64],
    target_norm: f64,
    env: &[f64],
    start_phase: &[f64],
    max_iter: usize,
    tol: f64,
) -> Run {
    let mut scratch = fft.make_scratch();
    let mut a: Vec<Complex64> = env
        .iter()
        .zip(start_phase)
        .map(|(e, p)| Complex64::from_polar(*e, *p))
        .collect();
    let mut history = Vec::with_capacity(max_iter);
    let mut converged = false;
    let mut buf = a.clone();
    for it in 0..max_iter {
        buf.copy_from_slice(&a);
        fft.forward(&mut buf, &mut scratch);
        let sq: f64 = buf.iter().zip(target_amp).map(|(f, s)| (f.norm() - s).powi(2)).sum();
        let r = (sq / target_norm).sqrt();
        history.push(r);
        if it > 0 {
            let prev = history[it - 1];
            if r < 1e-14 || (prev - r).abs() < tol * prev {
                converged = true;
                break;
            }
        }
        for (f, s) in buf.iter_mut().zip(target_amp) {
            *f = unit(*f) * *s;
        }
        fft.inverse(&mut buf, &mut scratch);
        for ((x, b), e) in a.iter_mut().zip(&buf).zip(env) {
            *x = unit(*b) * *e;
        }
    }
    Run {
        field: a,
        history,
        converged,
    }
}

fn unit(z: Complex64) -> Complex64 {
    let n = z.norm();
    if n > 0.0 {
        z / n
    } else {
        Complex64::new(1.0, 0.0)
    }
}

/// Phase unwrapped outward from `center`.
pub fn unwrap_from(phase: &[f64], center: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    let mut out = phase.to_vec();
    let step = |prev: f64, cur: f64| {
        let mut d = cur - prev;
        d -= 2.0 * PI * (d / (2.0 * PI)).round();
        prev + d
    };
    for k in center + 1..out.len() {
        out[k] = step(out[k - 1], phase[k]);
    }
    for k in (0..center).rev() {
        out[k] = step(out[k + 1], phase[k]);
    }
    out
}

fn peak_index(env: &[f64]) -> usize {
    env.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, v)| if *v > bv { (i, *v) } else { (bi, bv) },
        )
        .0
}

/// Alternating-projection retrieval. Non-convergence within `max_iter` is
/// reported through `converged = false`, not as an error.
pub fn gerchberg_saxton(problem: &RetrievalProblem) -> Result<RetrievalResult> {
    problem.validate()?;
    let env = &problem.temporal_envelope;
    let n = env.len();
    let e_env: f64 = env.iter().map(|e| e * e).sum();
    let e_spec: f64 = problem.spectrum_psd.iter().sum();
    if !(e_env > 0.0) || !(e_spec > 0.0) {
        return invalid("spectrum and envelope must carry nonzero energy");
    }
    let energy_mismatch = (e_spec / e_env - 1.0).abs() > 0.2;
    let scale = (e_env / e_spec).sqrt();
    let amp: Vec<f64> = problem.spectrum_psd.iter().map(|s| s.sqrt() * scale).collect();

    let peak = peak_index(env);
    let emax = env[peak];
    let shape: Vec<f64> = env.iter().map(|e| (e / emax).powi(2)).collect();
    let fft = UnitaryFft::new(n);

    let mut best: Option<Run> = None;
    for eps in START_CHIRPS {
        let start: Vec<f64> = shape.iter().map(|s| eps * s).collect();
        let run = run_gs(&fft, &amp, e_env, env, &start, problem.max_iter, problem.tol);
        let better = match &best {
            None => true,
            Some(b) => run.history.last() < b.history.last(),
        };
        if better {
            best = Some(run);
        }
    }
    let run = best.expect("at least one start");

    let raw: Vec<f64> = run.field.iter().map(|z| z.arg()).collect();
    let mut phase = unwrap_from(&raw, peak);
    let p0 = phase[peak];
    phase.iter_mut().for_each(|p| *p -= p0);

    let mut fit = fit_sech_phase(&phase, env, DEFAULT_FIT_THRESHOLD)?;
    if fit.phi_nl < 0.0 {
        // time-reversed conjugate a*(−t) has the same spectrum and envelope
        let rev: Vec<f64> = (0..n).map(|k| -phase[(n - k) % n]).collect();
        let p0 = rev[peak];
        phase = rev.iter().map(|p| p - p0).collect();
        fit = fit_sech_phase(&phase, env, DEFAULT_FIT_THRESHOLD)?;
    }

    Ok(RetrievalResult {
        temporal_phase: phase,
        phi_nl: fit.phi_nl,
        phi_nl_err: fit.phi_nl_err,
        iterations: run.history.len(),
        residual: *run.history.last().unwrap_or(&0.0),
        converged: run.converged,
        energy_mismatch,
        residual_history: run.history,
    })
}

/// Relative RMS spectral-amplitude mismatch of `envelope·e^{iφ}` against a PSD.
pub fn spectral_residual(envelope: &[f64], phase: &[f64], spectrum_psd: &[f64]) -> f64 {
    let n = envelope.len();
    let fft = UnitaryFft::new(n);
    let mut scratch = fft.make_scratch();
    let mut a: Vec<Complex64> = envelope
        .iter()
        .zip(phase)
        .map(|(e, p)| Complex64::from_polar(*e, *p))
        .collect();
    fft.forward(&mut a, &mut scratch);
    let e_env: f64 = envelope.iter().map(|e| e * e).sum();
    let e_spec: f64 = spectrum_psd.iter().sum();
    let scale = (e_env / e_spec).sqrt();
    let sq: f64 = a
        .iter()
        .zip(spectrum_psd)
        .map(|(f, s)| (f.norm() - s.sqrt() * scale).powi(2))
        .sum();
    (sq / e_env).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseFit {
    pub phi_nl: f64,
    pub phi_nl_err: f64,
    pub offset: f64,
}

/// Fit φ(t) = φ_NL·s(t) + c with s = |a(t)|²/max|a|², which is sech²(t/τ₀)
/// for a sech envelope, over samples where |a| exceeds `threshold`·max.
pub fn fit_sech_phase(phase: &[f64], envelope: &[f64], threshold: f64) -> Result<PhaseFit> {
    if phase.len() != envelope.len() {
        return invalid("phase and envelope differ in length");
    }
    if !(0.0..1.0).contains(&threshold) {
        return invalid("threshold must lie in [0, 1)");
    }
    let emax = envelope.iter().cloned().fold(0.0, f64::max);
    if !(emax > 0.0) {
        return invalid("envelope is zero");
    }
    let (s, y): (Vec<f64>, Vec<f64>) = envelope
        .iter()
        .zip(phase)
        .filter(|(e, _)| **e > threshold * emax)
        .map(|(e, p)| ((e / emax).powi(2), *p))
        .unzip();
    if y.iter().all(|v| *v == 0.0) {
        return Ok(PhaseFit {
            phi_nl: 0.0,
            phi_nl_err: 0.0,
            offset: 0.0,
        });
    }
    if s.len() < 3 {
        return Err(Error::InsufficientData("fewer than 3 samples above threshold".into()));
    }
    let fit = linear_least_squares(
        &[s.clone(), vec![1.0; s.len()]],
        &y,
        &Weights::Uniform,
        ErrorScaling::ReducedChiSquare,
    )?;
    Ok(PhaseFit {
        phi_nl: fit.params[0],
        phi_nl_err: fit.param_errs[0],
        offset: fit.params[1],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct N2Options {
    /// When set, powers are replaced by the TPA-limited effective power
    /// ln(1 + α_TPA·L_eff·P)/(α_TPA·L_eff).
    pub alpha_tpa: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct N2Fit {
    pub gamma: f64,
    pub gamma_err: f64,
    pub n2: f64,
    pub n2_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct N2Estimate {
    /// φ = γ·L_eff·P.
    pub plain: N2Fit,
    /// φ = γ·L_eff·P + c·P², the quadratic term absorbing free-carrier phase.
    pub with_fc_term: N2Fit,
    pub fc_coefficient: f64,
    pub fc_coefficient_err: f64,
    /// Quadratic term exceeds three standard errors.
    pub curved: bool,
}

/// n₂ from (peak power, φ_NL) pairs via φ_NL = γ·L_eff·P through the origin.
pub fn extract_n2(points: &[(f64, f64)], wg: &WaveguideSpec, wavelength: f64, opts: &N2Options) -> Result<N2Estimate> {
    if points.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "need at least 4 (P, φ) points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(p, f)| !(*p > 0.0) || !f.is_finite()) {
        return invalid("powers must be positive and phases finite");
    }
    if !(wg.a_eff > 0.0) || !(wavelength > 0.0) {
        return invalid("effective area and wavelength must be positive");
    }
    let l_eff = wg.effective_length();
    let x: Vec<f64> = points
        .iter()
        .map(|(p, _)| match opts.alpha_tpa {
            Some(a) if a > 0.0 => (a * l_eff * p).ln_1p() / (a * l_eff),
            _ => *p,
        })
        .collect();
    let y: Vec<f64> = points.iter().map(|(_, f)| *f).collect();
    let to_n2 = |slope: f64, err: f64| {
        let gamma = slope / l_eff;
        let gamma_err = err / l_eff;
        N2Fit {
            gamma,
            gamma_err,
            n2: n2_from_gamma(gamma, wg.a_eff, wavelength),
            n2_err: n2_from_gamma(gamma_err, wg.a_eff, wavelength),
        }
    };
    let lin = linear_least_squares(
        std::slice::from_ref(&x),
        &y,
        &Weights::Uniform,
        ErrorScaling::ReducedChiSquare,
    )?;
    let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
    let quad = linear_least_squares(&[x.clone(), x2], &y, &Weights::Uniform, ErrorScaling::ReducedChiSquare)?;
    let (c, c_err) = (quad.params[1], quad.param_errs[1]);
    Ok(N2Estimate {
        plain: to_n2(lin.params[0], lin.param_errs[0]),
        with_fc_term: to_n2(quad.params[0], quad.param_errs[0]),
        fc_coefficient: c,
        fc_coefficient_err: c_err,
        curved: c.abs() > 3.0 * c_err && c != 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physmodel::{db_per_cm_to_per_m, sech_pulse, TimeGrid};
    use crate::spectral::power_spectrum;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn sech_env() -> (Vec<f64>, f64) {
        let fwhm = 4.82e-12;
        let grid = TimeGrid::for_pulse(fwhm).unwrap();
        let p = sech_pulse(1.0, fwhm, grid, 2.0715e-6, 39.4e6).unwrap();
        (p.envelope.iter().map(|a| a.norm()).collect(), grid.dt)
    }

    fn spm_spectrum(env: &[f64], phi: f64) -> Vec<f64> {
        let emax = env.iter().cloned().fold(0.0, f64::max);
        let a: Vec<Complex64> = env
            .iter()
            .map(|e| Complex64::from_polar(*e, phi * (e / emax).powi(2)))
            .collect();
        power_spectrum(&a)
    }

    #[test]
    fn transform_limited_gives_flat_phase() {
        let (env, dt) = sech_env();
        let spec = spm_spectrum(&env, 0.0);
        let r = gerchberg_saxton(&RetrievalProblem::new(spec, env.clone(), dt)).unwrap();
        let emax = env.iter().cloned().fold(0.0, f64::max);
        let max_phase = r
            .temporal_phase
            .iter()
            .zip(&env)
            .filter(|(_, e)| **e > 0.05 * emax)
            .map(|(p, _)| p.abs())
            .fold(0.0, f64::max);
        assert!(max_phase < 0.01, "{max_phase}");
    }

    #[test]
    fn synthetic_spm_round_trip() {
        let (env, dt) = sech_env();
        let spec = spm_spectrum(&env, 2.0);
        let r = gerchberg_saxton(&RetrievalProblem::new(spec.clone(), env.clone(), dt)).unwrap();
        assert!((r.phi_nl / 2.0 - 1.0).abs() < 0.05, "{}", r.phi_nl);
        assert!(r.iterations <= DEFAULT_MAX_ITER);
        // re-simulation reproduces the spectrum to the final residual
        let resid = spectral_residual(&env, &r.temporal_phase, &spec);
        assert!(resid <= r.residual + 1e-9, "{resid} vs {}", r.residual);
        assert!(resid < 0.02);

        let scaled: Vec<f64> = spec.iter().map(|s| s * 100.0).collect();
        let r2 = gerchberg_saxton(&RetrievalProblem::new(scaled, env, dt)).unwrap();
        assert!((r2.phi_nl / r.phi_nl - 1.0).abs() < 0.01);
    }

    #[test]
    fn residual_never_increases() {
        let (env, dt) = sech_env();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let phi = rand::Rng::random_range(&mut rng, 0.2..4.0);
            let spec = spm_spectrum(&env, phi);
            let r = gerchberg_saxton(&RetrievalProblem::new(spec, env.clone(), dt)).unwrap();
            for w in r.residual_history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15, "{} > {}", w[1], w[0]);
            }
        }
    }

    #[test]
    fn energy_mismatch_flagged() {
        let (env, dt) = sech_env();
        let spec: Vec<f64> = spm_spectrum(&env, 1.0);
        let mut p = RetrievalProblem::new(spec.iter().map(|s| s * 2.0).collect(), env.clone(), dt);
        p.max_iter = 20;
        assert!(gerchberg_saxton(&p).unwrap().energy_mismatch);
        p.spectrum_psd = spec;
        assert!(!gerchberg_saxton(&p).unwrap().energy_mismatch);
    }

    #[test]
    fn invalid_problems() {
        let (env, dt) = sech_env();
        assert!(gerchberg_saxton(&RetrievalProblem::new(vec![1.0; 3], env.clone(), dt)).is_err());
        let mut p = RetrievalProblem::new(vec![1.0; env.len()], env.clone(), dt);
        p.tol = 0.0;
        assert!(gerchberg_saxton(&p).is_err());
        let mut bad = env.clone();
        bad[0] = -1.0;
        assert!(gerchberg_saxton(&RetrievalProblem::new(vec![1.0; env.len()], bad, dt)).is_err());
    }

    #[test]
    fn sech_phase_exact() {
        let (env, _) = sech_env();
        let emax = env.iter().cloned().fold(0.0, f64::max);
        let phase: Vec<f64> = env.iter().map(|e| 1.7 * (e / emax).powi(2)).collect();
        let f = fit_sech_phase(&phase, &env, 0.05).unwrap();
        assert!((f.phi_nl - 1.7).abs() < 1e-9);
        let z = fit_sech_phase(&vec![0.0; env.len()], &env, 0.05).unwrap();
        assert_eq!((z.phi_nl, z.phi_nl_err), (0.0, 0.0));
    }

    #[test]
    fn sech_phase_noise_coverage() {
        let (env, _) = sech_env();
        let emax = env.iter().cloned().fold(0.0, f64::max);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut inside = 0;
        for _ in 0..100 {
            let phase: Vec<f64> = env
                .iter()
                .map(|e| 1.0 * (e / emax).powi(2) + noise.sample(&mut rng))
                .collect();
            let f = fit_sech_phase(&phase, &env, 0.05).unwrap();
            if (f.phi_nl - 1.0).abs() <= 3.0 * f.phi_nl_err {
                inside += 1;
            }
        }
        assert!(inside >= 97, "{inside}/100");
    }

    #[test]
    fn sech_phase_threshold_sensitivity() {
        let (env, dt) = sech_env();
        let spec = spm_spectrum(&env, 2.0);
        let r = gerchberg_saxton(&RetrievalProblem::new(spec, env.clone(), dt)).unwrap();
        let a = fit_sech_phase(&r.temporal_phase, &env, 0.05).unwrap().phi_nl;
        let b = fit_sech_phase(&r.temporal_phase, &env, 0.10).unwrap().phi_nl;
        assert!((a / b - 1.0).abs() < 0.02);
    }

    fn reference_wg() -> WaveguideSpec {
        WaveguideSpec {
            width: 510e-9,
            height: 340e-9,
            sidewall_angle: 15.0,
            length: 17.5e-3,
            alpha_lin: db_per_cm_to_per_m(3.2),
            beta2: -0.6e-24,
            beta4: 0.0,
            a_eff: 0.228e-12,
            n2: 15.3e-18,
            alpha_tpa: 24.4,
        }
    }

    #[test]
    fn n2_from_exact_phases() {
        let wg = reference_wg();
        let gamma = crate::fwm::nonlinear_parameter(wg.n2, wg.a_eff, 2.0715e-6).unwrap();
        let l = wg.effective_length();
        let pts: Vec<(f64, f64)> = [0.25, 0.5, 1.0, 1.5, 2.0]
            .iter()
            .map(|p| (*p, (wg.alpha_tpa * l * p).ln_1p() * gamma / wg.alpha_tpa))
            .collect();
        let est = extract_n2(
            &pts,
            &wg,
            2.0715e-6,
            &N2Options {
                alpha_tpa: Some(wg.alpha_tpa),
            },
        )
        .unwrap();
        assert!((est.plain.n2 / wg.n2 - 1.0).abs() < 1e-9);
        assert!(!est.curved);
        let raw = extract_n2(&pts, &wg, 2.0715e-6, &N2Options::default()).unwrap();
        assert!(raw.curved);

        let half = WaveguideSpec {
            a_eff: wg.a_eff / 2.0,
            ..wg
        };
        let h = extract_n2(
            &pts,
            &half,
            2.0715e-6,
            &N2Options {
                alpha_tpa: Some(wg.alpha_tpa),
            },
        )
        .unwrap();
        assert!((h.plain.n2 / est.plain.n2 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn n2_pipeline_through_propagation() {
        use crate::nlse::{power_sweep, PropagationOptions};
        let wg = reference_wg();
        let fwhm = 4.82e-12;
        let template = sech_pulse(1.0, fwhm, TimeGrid::for_pulse(fwhm).unwrap(), 2.0715e-6, 39.4e6).unwrap();
        let powers = [0.25, 0.5, 1.0, 1.5, 2.0];
        let rows = power_sweep(&wg, &template, &powers, &PropagationOptions::default()).unwrap();
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| {
                let res = gerchberg_saxton(&RetrievalProblem::from_pulse(&r.result.pulse_out)).unwrap();
                (r.peak_power, res.phi_nl)
            })
            .collect();
        let est = extract_n2(
            &pts,
            &wg,
            2.0715e-6,
            &N2Options {
                alpha_tpa: Some(wg.alpha_tpa),
            },
        )
        .unwrap();
        assert!((est.plain.n2 / wg.n2 - 1.0).abs() < 0.1, "{est:?}");
    }

    #[test]
    fn n2_zero_gamma() {
        let wg = reference_wg();
        let pts = [(0.5, 0.0), (1.0, 0.0), (1.5, 0.0), (2.0, 0.0)];
        let est = extract_n2(&pts, &wg, 2.0715e-6, &N2Options::default()).unwrap();
        assert!(est.plain.n2.abs() <= 3.0 * est.plain.n2_err);
        assert!(extract_n2(&pts[..3], &wg, 2.0715e-6, &N2Options::default()).is_err());
    }

    #[test]
    fn unwrap_is_continuous() {
        let truth: Vec<f64> = (0..100).map(|k| 0.3 * k as f64 - 10.0).collect();
        let wrapped: Vec<f64> = truth.iter().map(|p| Complex64::from_polar(1.0, *p).arg()).collect();
        let u = unwrap_from(&wrapped, 50);
        let off = u[50] - truth[50];
        for (a, b) in u.iter().zip(&truth) {
            assert!((a - b - off).abs() < 1e-9);
        }
    }
}
