//! Degenerate four-wave-mixing phase matching and the stimulated-FWM
//! spectral map.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::physmodel::{
    angular_frequency, db_to_linear, linear_to_db, wavelength_from_angular, ChannelSpec, SampledPulse, WaveguideSpec,
};

/// Reference wavelength for the relative Rayleigh curve.
pub const RAYLEIGH_REFERENCE_WAVELENGTH: f64 = 1.55e-6;

/// γ = (2π/λ)·n₂/A_eff, in 1/(W·m).
pub fn nonlinear_parameter(n2: f64, a_eff: f64, wavelength: f64) -> Result<f64> {
    if !(a_eff > 0.0) {
        return invalid(format!("effective area must be positive, got {a_eff}"));
    }
    if !(wavelength > 0.0) {
        return invalid(format!("wavelength must be positive, got {wavelength}"));
    }
    Ok(2.0 * std::f64::consts::PI / wavelength * n2 / a_eff)
}

/// n₂ = γ·λ·A_eff/(2π), the inverse of [`nonlinear_parameter`].
pub fn n2_from_gamma(gamma: f64, a_eff: f64, wavelength: f64) -> f64 {
    gamma * wavelength * a_eff / (2.0 * std::f64::consts::PI)
}

/// Waveguided TPA coefficient α_TPA = β_TPA/A_eff (β_TPA in m/W).
pub fn tpa_bulk_to_waveguide(beta_tpa: f64, a_eff: f64) -> Result<f64> {
    if !(a_eff > 0.0) {
        return invalid("effective area must be positive");
    }
    Ok(beta_tpa / a_eff)
}

/// β_TPA = α_TPA·A_eff.
pub fn tpa_waveguide_to_bulk(alpha_tpa: f64, a_eff: f64) -> f64 {
    alpha_tpa * a_eff
}

/// Δk_lin = −β₂Δω² − β₄Δω⁴/12.
pub fn linear_mismatch(beta2: f64, delta_omega: f64) -> f64 {
    -beta2 * delta_omega * delta_omega
}

fn linear_mismatch_with_beta4(wg: &WaveguideSpec, delta_omega: f64) -> f64 {
    let d2 = delta_omega * delta_omega;
    linear_mismatch(wg.beta2, delta_omega) - wg.beta4 * d2 * d2 / 12.0
}

/// Δk = Δk_lin − 2γP.
pub fn total_mismatch(dk_lin: f64, gamma: f64, power: f64) -> f64 {
    dk_lin - 2.0 * gamma * power
}

/// Outcome of solving Δk = 0 for the detuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum PhaseMatch {
    /// Perfect phase matching at this detuning, rad/s.
    Detuning(f64),
    /// β₂ ≥ 0: no finite solution; mismatch stays near zero only close to the pump.
    NoFiniteSolution,
}

/// Detuning Δω* = √(2γP/|β₂|) at which Δk vanishes.
pub fn perfect_match_detuning(beta2: f64, gamma: f64, power: f64) -> PhaseMatch {
    if beta2 >= 0.0 {
        return PhaseMatch::NoFiniteSolution;
    }
    let gp = (gamma * power).max(0.0);
    PhaseMatch::Detuning((2.0 * gp / -beta2).sqrt())
}

/// ω_i = 2ω_p − ω_s.
pub fn idler_frequency(omega_pump: f64, omega_seed: f64) -> f64 {
    2.0 * omega_pump - omega_seed
}

/// Idler wavelength for a pump and seed wavelength.
pub fn idler_wavelength(pump: f64, seed: f64) -> Result<f64> {
    let wi = idler_frequency(angular_frequency(pump)?, angular_frequency(seed)?);
    wavelength_from_angular(wi)
}

/// Phase-matching sample at one detuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseMatchPoint {
    pub delta_omega: f64,
    pub dk_lin: f64,
    pub dk_total: f64,
    /// sinc²(ΔkL/2), normalised to the perfectly matched value.
    pub gain_rel: f64,
}

/// sinc(x) = sin(x)/x.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// Phase-matching curve over a list of detunings.
pub fn phase_match_curve(wg: &WaveguideSpec, gamma: f64, power: f64, detunings: &[f64]) -> Vec<PhaseMatchPoint> {
    detunings
        .iter()
        .map(|&dw| {
            let dk_lin = linear_mismatch_with_beta4(wg, dw);
            let dk_total = total_mismatch(dk_lin, gamma, power);
            let s = sinc(dk_total * wg.length / 2.0);
            PhaseMatchPoint {
                delta_omega: dw,
                dk_lin,
                dk_total,
                gain_rel: s * s,
            }
        })
        .collect()
}

/// Stimulated conversion efficiency P_idler/P_seed = (γPL_eff)²·sinc²(ΔkL/2).
pub fn conversion_efficiency(gamma: f64, power: f64, l_eff: f64, dk: f64, length: f64) -> f64 {
    let s = sinc(dk * length / 2.0);
    (gamma * power * l_eff).powi(2) * s * s
}

/// (1.55 µm/λ)⁴.
pub fn rayleigh_relative(wavelength: f64) -> Result<f64> {
    if !(wavelength > 0.0) {
        return invalid("wavelength must be positive");
    }
    Ok((RAYLEIGH_REFERENCE_WAVELENGTH / wavelength).powi(4))
}

/// Grating-coupler transmission in dB: a parabola in dB (Gaussian in
/// linear units), exactly 3 dB down at ±bw/2 from the centre. Intended for
/// the 1.9–2.3 µm window.
pub fn coupler_transmission(coupler: &ChannelSpec, wavelength: f64) -> f64 {
    let z = (wavelength - coupler.coupler_center) / (coupler.coupler_bw3db / 2.0);
    coupler.coupler_peak_db - 3.0 * z * z
}

/// Inputs for the stimulated-FWM spectral map that are not part of the
/// waveguide or pump.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulatedFwmSetup {
    /// On-chip CW seed power, W.
    pub seed_power: f64,
    /// Spectrum axis, m, increasing.
    pub axis: Vec<f64>,
    /// Lineshape FWHM of each rendered line (OSA resolution), m.
    pub line_width: f64,
    /// Floor added before taking dB, relative to the row maximum.
    pub floor_rel: f64,
}

impl StimulatedFwmSetup {
    /// Uniform axis from `start` to `stop` (inclusive) with `n` points.
    pub fn with_axis(seed_power: f64, start: f64, stop: f64, n: usize, line_width: f64) -> Self {
        let axis = (0..n)
            .map(|k| start + (stop - start) * k as f64 / (n - 1).max(1) as f64)
            .collect();
        Self {
            seed_power,
            axis,
            line_width,
            floor_rel: 1e-12,
        }
    }
}

/// One seed row of the stimulated-FWM map.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FwmRow {
    pub seed_wavelength: f64,
    pub idler_wavelength: f64,
    /// Off-chip idler power relative to the off-chip seed power.
    pub idler_to_seed: f64,
    pub dk_total: f64,
    /// Max-normalised PSD on the setup axis (linear).
    pub spectrum: Vec<f64>,
}

/// Spectral map: rows are seeds, columns are axis bins.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FwmMap {
    pub axis: Vec<f64>,
    pub rows: Vec<FwmRow>,
}

/// Simulated OSA spectra of pump, seed and stimulated idler for each seed
/// wavelength.
///
/// The idler line carries (γPL_eff)²·sinc²(ΔkL/2) of the seed, with the
/// seed coupled in through the grating coupler and every line coupled out
/// through it. Each row is normalised to its own maximum.
pub fn stimulated_fwm_map(
    wg: &WaveguideSpec,
    pump: &SampledPulse,
    seed_wavelengths: &[f64],
    coupler: &ChannelSpec,
    setup: &StimulatedFwmSetup,
) -> Result<FwmMap> {
    wg.validate()?;
    let lp = pump.carrier_wavelength;
    let wp = angular_frequency(lp)?;
    let below = seed_wavelengths.iter().all(|&l| l < lp);
    let above = seed_wavelengths.iter().all(|&l| l > lp);
    if seed_wavelengths.contains(&lp) {
        return invalid("seed at the pump wavelength is degenerate");
    }
    if !(below || above) {
        return invalid("seed wavelengths must all lie on one side of the pump");
    }
    if !(setup.line_width > 0.0) || setup.axis.is_empty() {
        return invalid("spectrum axis and line width must be non-empty/positive");
    }
    let gamma = nonlinear_parameter(wg.n2, wg.a_eff, lp)?;
    let p_peak = pump.peak_power();
    let l_eff = wg.effective_length();
    let t_wg = wg.linear_transmission();

    let rows = seed_wavelengths
        .par_iter()
        .map(|&ls| {
            let ws = angular_frequency(ls)?;
            let wi = idler_frequency(wp, ws);
            let li = wavelength_from_angular(wi)?;
            let dk = total_mismatch(linear_mismatch_with_beta4(wg, ws - wp), gamma, p_peak);
            let eta = conversion_efficiency(gamma, p_peak, l_eff, dk, wg.length);

            let c_in_seed = db_to_linear(coupler_transmission(coupler, ls));
            let c_out = |l: f64| db_to_linear(coupler_transmission(coupler, l));
            let seed_on_chip = setup.seed_power * c_in_seed;
            let seed_out = seed_on_chip * t_wg * c_out(ls);
            let idler_out = seed_on_chip * eta * t_wg * c_out(li);
            let pump_out = p_peak * t_wg * c_out(lp);

            let lines = [(lp, pump_out), (ls, seed_out), (li, idler_out)];
            let mut spectrum: Vec<f64> = setup
                .axis
                .iter()
                .map(|&x| lines.iter().map(|&(c, p)| p * lineshape(x, c, setup.line_width)).sum())
                .collect();
            let max = spectrum.iter().cloned().fold(0.0, f64::max);
            if max > 0.0 {
                spectrum.iter_mut().for_each(|v| *v /= max);
            }
            Ok(FwmRow {
                seed_wavelength: ls,
                idler_wavelength: li,
                idler_to_seed: if seed_out > 0.0 { idler_out / seed_out } else { 0.0 },
                dk_total: dk,
                spectrum,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FwmMap {
        axis: setup.axis.clone(),
        rows,
    })
}

/// Gaussian line of unit peak.
fn lineshape(x: f64, center: f64, fwhm: f64) -> f64 {
    let z = (x - center) / fwhm;
    (-4.0 * std::f64::consts::LN_2 * z * z).exp()
}

impl FwmMap {
    /// Matrix CSV: a header row of axis wavelengths (nm), then one row per
    /// seed of relative PSD in dB.
    pub fn write_matrix_csv<W: Write>(&self, out: &mut W, floor_rel: f64) -> std::io::Result<()> {
        write!(out, "seed_nm")?;
        for l in &self.axis {
            write!(out, ",{:.4}", l * 1e9)?;
        }
        writeln!(out)?;
        for row in &self.rows {
            write!(out, "{:.4}", row.seed_wavelength * 1e9)?;
            for v in &row.spectrum {
                write!(out, ",{:.3}", linear_to_db(v.max(floor_rel)))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// `seed_nm,idler_nm,rel_psd_db` table of the idler line relative to the seed.
    pub fn write_idler_csv<W: Write>(&self, out: &mut W, floor_rel: f64) -> std::io::Result<()> {
        writeln!(out, "seed_nm,idler_nm,rel_psd_db")?;
        for row in &self.rows {
            writeln!(
                out,
                "{:.4},{:.4},{:.3}",
                row.seed_wavelength * 1e9,
                row.idler_wavelength * 1e9,
                linear_to_db(row.idler_to_seed.max(floor_rel))
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physmodel::{db_per_cm_to_per_m, sech_pulse, TimeGrid};
    use approx::assert_relative_eq;

    pub(crate) fn reference_waveguide() -> WaveguideSpec {
        WaveguideSpec {
            width: 510e-9,
            height: 340e-9,
            sidewall_angle: 15.0,
            length: 7.2e-3,
            alpha_lin: db_per_cm_to_per_m(3.2),
            beta2: -0.6e-24,
            beta4: 0.0,
            a_eff: 0.228e-12,
            n2: 15.3e-18,
            alpha_tpa: 24.4,
        }
    }

    fn coupler(bw: f64) -> ChannelSpec {
        ChannelSpec {
            coupler_peak_db: -7.3,
            coupler_center: 2.071e-6,
            coupler_bw3db: bw,
            mono_loss_db: -4.5,
            filter_center: 2.0507e-6,
            filter_width: 1e-9,
            pump_rejection_db: 100.0,
            fiber_loss_db: 0.0,
        }
    }

    #[test]
    fn gamma_from_reported_values() {
        let g = nonlinear_parameter(15.3e-18, 0.228e-12, 2.071e-6).unwrap();
        assert_relative_eq!(g, 203.6, max_relative = 1e-3);
        assert_eq!(nonlinear_parameter(0.0, 0.228e-12, 2.071e-6).unwrap(), 0.0);
        let g2 = nonlinear_parameter(15.3e-18, 0.456e-12, 2.071e-6).unwrap();
        assert_relative_eq!(g2 * 2.0, g, max_relative = 1e-14);
        assert!(nonlinear_parameter(1e-18, 0.0, 2e-6).is_err());
        assert_relative_eq!(n2_from_gamma(g, 0.228e-12, 2.071e-6), 15.3e-18, max_relative = 1e-12);
    }

    #[test]
    fn tpa_conversion() {
        let beta = crate::physmodel::cm_per_gw_to_m_per_w(0.557);
        let a = tpa_bulk_to_waveguide(beta, 0.228e-12).unwrap();
        assert_relative_eq!(a, 24.43, max_relative = 1e-3);
        assert_eq!(tpa_bulk_to_waveguide(0.0, 0.228e-12).unwrap(), 0.0);
        let back = crate::physmodel::m_per_w_to_cm_per_gw(tpa_waveguide_to_bulk(a, 0.228e-12));
        assert_relative_eq!(back, 0.557, max_relative = 1e-14);
    }

    #[test]
    fn mismatch_values() {
        let dw = 2.0 * std::f64::consts::PI * 1.46e12;
        assert_relative_eq!(linear_mismatch(-1e-24, dw), 84.15, max_relative = 1e-3);
        assert_eq!(linear_mismatch(-1e-24, 0.0), 0.0);
        assert_relative_eq!(total_mismatch(0.0, 203.0, 0.32), -129.92, max_relative = 1e-4);
        assert_eq!(total_mismatch(12.5, 203.0, 0.0), 12.5);
        assert_eq!(total_mismatch(2.0 * 203.0 * 0.7, 203.0, 0.7), 0.0);
    }

    #[test]
    fn perfect_match() {
        let PhaseMatch::Detuning(d) = perfect_match_detuning(-0.5e-24, 203.0, 1.0) else {
            panic!()
        };
        assert_relative_eq!(d, 2.8496e13, max_relative = 1e-4);
        let dk = total_mismatch(linear_mismatch(-0.5e-24, d), 203.0, 1.0);
        assert!(dk.abs() <= 1e-9 * 2.0 * 203.0);
        assert_eq!(
            perfect_match_detuning(0.2e-24, 203.0, 1.0),
            PhaseMatch::NoFiniteSolution
        );
        assert_eq!(perfect_match_detuning(0.0, 203.0, 1.0), PhaseMatch::NoFiniteSolution);
        let PhaseMatch::Detuning(small) = perfect_match_detuning(-0.5e-24, 203.0, 1e-12) else {
            panic!()
        };
        assert!(small < 1e-3 * d);
    }

    #[test]
    fn idler_geometry() {
        let li = idler_wavelength(2.0715e-6, 2.050e-6).unwrap();
        // 2.09346 µm, quoted to four decimals as 2.0934
        assert!((li - 2.0934e-6).abs() < 0.1e-9, "{li:e}");
        let wp = angular_frequency(2.0715e-6).unwrap();
        assert_eq!(idler_frequency(wp, wp), wp);
        let back = idler_wavelength(2.0715e-6, li).unwrap();
        assert_relative_eq!(back, 2.050e-6, max_relative = 1e-12);
    }

    #[test]
    fn rayleigh_curve() {
        assert_relative_eq!(rayleigh_relative(1.55e-6).unwrap(), 1.0);
        assert_relative_eq!(rayleigh_relative(2.071e-6).unwrap(), 0.3138, max_relative = 1e-3);
        assert_relative_eq!(rayleigh_relative(3.10e-6).unwrap(), 0.0625, max_relative = 1e-12);
    }

    #[test]
    fn coupler_envelope() {
        let c = coupler(60e-9);
        assert_relative_eq!(coupler_transmission(&c, 2.071e-6), -7.3);
        assert_relative_eq!(coupler_transmission(&c, 2.101e-6), -10.3, epsilon = 1e-9);
        assert!(coupler_transmission(&c, 2.041e-6) >= -10.3 - 1e-9);
        assert!(coupler_transmission(&c, 2.081e-6) > -10.3);
    }

    #[test]
    fn sinc_contrast() {
        let on = conversion_efficiency(203.0, 1.0, 0.005, 0.0, 7.2e-3);
        let dk = 2.0 * std::f64::consts::PI / 7.2e-3;
        let off = conversion_efficiency(203.0, 1.0, 0.005, dk, 7.2e-3);
        assert!(linear_to_db(on) - linear_to_db(off.max(1e-300)) >= 20.0);
    }

    fn pump(power: f64) -> SampledPulse {
        let grid = TimeGrid::for_pulse(5.78e-12).unwrap();
        sech_pulse(power, 5.78e-12, grid, 2.071e-6, 39.4e6).unwrap()
    }

    #[test]
    fn map_idler_locus_spans_sixty_nm() {
        let wg = reference_waveguide();
        let seeds: Vec<f64> = (0..16).map(|k| 2.040e-6 + k as f64 * 2e-9).collect();
        let setup = StimulatedFwmSetup::with_axis(1e-3, 2.02e-6, 2.12e-6, 2001, 0.2e-9);
        let map = stimulated_fwm_map(&wg, &pump(1.0), &seeds, &coupler(60e-9), &setup).unwrap();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for row in &map.rows {
            let ws = angular_frequency(row.seed_wavelength).unwrap();
            let wi = angular_frequency(row.idler_wavelength).unwrap();
            let wp = angular_frequency(2.071e-6).unwrap();
            assert!((ws + wi - 2.0 * wp).abs() <= 1e-12 * wp);
            // the idler bin shows a local maximum well above the floor
            let k = setup.axis.iter().position(|&l| l >= row.idler_wavelength).unwrap();
            let local = row.spectrum[k - 2..=k + 2].iter().cloned().fold(0.0, f64::max);
            assert!(local > 1e-9, "idler missing for seed {:e}", row.seed_wavelength);
            lo = lo.min(row.seed_wavelength);
            hi = hi.max(row.idler_wavelength);
        }
        assert!(hi - lo >= 60e-9);
        // anti-diagonal: idler moves opposite to seed
        assert!(map
            .rows
            .windows(2)
            .all(|w| w[1].idler_wavelength < w[0].idler_wavelength));
    }

    #[test]
    fn map_without_pump_has_no_idler() {
        let wg = reference_waveguide();
        let setup = StimulatedFwmSetup::with_axis(1e-3, 2.02e-6, 2.12e-6, 501, 0.2e-9);
        let map = stimulated_fwm_map(&wg, &pump(0.0), &[2.05e-6], &coupler(60e-9), &setup).unwrap();
        let row = &map.rows[0];
        assert!(linear_to_db(row.idler_to_seed.max(1e-300)) < -100.0);
    }

    #[test]
    fn map_rejects_degenerate_and_two_sided_seeds() {
        let wg = reference_waveguide();
        let setup = StimulatedFwmSetup::with_axis(1e-3, 2.02e-6, 2.12e-6, 101, 0.2e-9);
        let c = coupler(60e-9);
        assert!(stimulated_fwm_map(&wg, &pump(1.0), &[2.071e-6], &c, &setup).is_err());
        assert!(stimulated_fwm_map(&wg, &pump(1.0), &[2.05e-6, 2.09e-6], &c, &setup).is_err());
    }

    #[test]
    fn flat_coupler_seed_idler_symmetry() {
        let wg = reference_waveguide();
        let mut c = coupler(60e-9);
        c.coupler_bw3db = 1.0; // effectively flat
        let setup = StimulatedFwmSetup::with_axis(1e-3, 2.0e-6, 2.15e-6, 11, 0.2e-9);
        let p = pump(2.0);
        let a = stimulated_fwm_map(&wg, &p, &[2.05e-6], &c, &setup).unwrap();
        let li = a.rows[0].idler_wavelength;
        let b = stimulated_fwm_map(&wg, &p, &[li], &c, &setup).unwrap();
        assert_relative_eq!(a.rows[0].idler_to_seed, b.rows[0].idler_to_seed, max_relative = 1e-9);
    }

    proptest::proptest! {
        #[test]
        fn mismatch_linear_in_power(p1 in 0.0f64..10.0, p2 in 0.0f64..10.0, g in 1.0f64..500.0) {
            let d = total_mismatch(5.0, g, p1) - total_mismatch(5.0, g, p2);
            proptest::prop_assert!((d - (-2.0 * g * (p1 - p2))).abs() < 1e-9 * (1.0 + g * 10.0));
        }

        #[test]
        fn rayleigh_decreasing(l in 1e-7f64..1e-5, f in 1.001f64..3.0) {
            proptest::prop_assert!(rayleigh_relative(l).unwrap() > rayleigh_relative(l * f).unwrap());
        }
    }
}
