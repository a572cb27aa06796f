//! Physical types, unit conversions and pulse synthesis shared by the
//! other modules.
//!
//! Everything is SI internally. Decibels and nanometres only show up at
//! the config / CSV boundary.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Reduced Planck constant, J·s.
pub const HBAR: f64 = 1.054_571_817e-34;

/// FWHM of sech²(t/τ₀) in units of τ₀, i.e. 2·ln(1 + √2).
pub const SECH_FWHM_FACTOR: f64 = 1.762_747_174_039_086;

/// Ratio between the FWHM of the intensity autocorrelation of a sech²
/// pulse and the FWHM of the pulse itself.
pub const SECH2_AUTOCORRELATION_FACTOR: f64 = 1.5427;

/// Minimum number of grid samples across a pulse FWHM.
pub const MIN_SAMPLES_PER_FWHM: usize = 8;

/// Default number of samples for pulse grids.
pub const DEFAULT_GRID_SAMPLES: usize = 1 << 12;

/// Default grid span as a multiple of the pulse FWHM.
pub const DEFAULT_SPAN_FWHM: f64 = 32.0;

/// Convert a decibel value to a power transmission fraction.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Convert a power transmission fraction to decibels.
pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Power attenuation coefficient in 1/m from a loss in dB/cm.
pub fn db_per_cm_to_per_m(db_per_cm: f64) -> f64 {
    db_per_cm * 100.0 * std::f64::consts::LN_10 / 10.0
}

/// Bulk TPA coefficient in m/W from cm/GW.
pub fn cm_per_gw_to_m_per_w(x: f64) -> f64 {
    x * 1e-2 / 1e9
}

/// Bulk TPA coefficient in cm/GW from m/W.
pub fn m_per_w_to_cm_per_gw(x: f64) -> f64 {
    x * 1e9 / 1e-2
}

/// Angular frequency ω = 2πc/λ of a vacuum wavelength.
pub fn angular_frequency(wavelength: f64) -> Result<f64> {
    if !(wavelength > 0.0) || !wavelength.is_finite() {
        return invalid(format!("wavelength must be positive, got {wavelength}"));
    }
    Ok(2.0 * std::f64::consts::PI * SPEED_OF_LIGHT / wavelength)
}

/// Inverse of [`angular_frequency`].
pub fn wavelength_from_angular(omega: f64) -> Result<f64> {
    if !(omega > 0.0) || !omega.is_finite() {
        return invalid(format!("angular frequency must be positive, got {omega}"));
    }
    Ok(2.0 * std::f64::consts::PI * SPEED_OF_LIGHT / omega)
}

/// Geometry, dispersion, loss and nonlinearity of one spiral waveguide source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveguideSpec {
    /// m
    pub width: f64,
    /// m
    pub height: f64,
    /// degrees
    pub sidewall_angle: f64,
    /// m
    pub length: f64,
    /// Linear power loss, 1/m.
    pub alpha_lin: f64,
    /// Group-velocity dispersion at the pump, s²/m. Sign is significant.
    pub beta2: f64,
    /// Fourth-order dispersion, s⁴/m. Zero unless explicitly configured.
    #[serde(default)]
    pub beta4: f64,
    /// Effective modal area, m².
    pub a_eff: f64,
    /// Nonlinear refractive index, m²/W.
    pub n2: f64,
    /// Waveguided two-photon absorption coefficient, 1/(W·m).
    pub alpha_tpa: f64,
}

impl WaveguideSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.a_eff > 0.0) {
            return invalid("waveguide effective area must be positive");
        }
        if !(self.length > 0.0) {
            return invalid("waveguide length must be positive");
        }
        if !(self.alpha_lin >= 0.0) {
            return invalid("linear loss must be non-negative");
        }
        if !(self.alpha_tpa >= 0.0) {
            return invalid("TPA coefficient must be non-negative");
        }
        if !self.beta2.is_finite() || !self.beta4.is_finite() || !self.n2.is_finite() {
            return invalid("dispersion and n2 must be finite");
        }
        Ok(())
    }

    /// Effective interaction length (1 − e^(−αL))/α, equal to L without loss.
    pub fn effective_length(&self) -> f64 {
        effective_length(self.alpha_lin, self.length)
    }

    /// Power transmission from linear loss alone.
    pub fn linear_transmission(&self) -> f64 {
        (-self.alpha_lin * self.length).exp()
    }
}

/// (1 − e^(−αL))/α, continuous at α = 0.
pub fn effective_length(alpha: f64, length: f64) -> f64 {
    let al = alpha * length;
    if al.abs() < 1e-8 {
        length * (1.0 - 0.5 * al)
    } else {
        -(-al).exp_m1() / alpha
    }
}

/// Transmission and filtering of one detection arm between chip and detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    /// Grating coupler peak transmission, dB (negative).
    pub coupler_peak_db: f64,
    /// m
    pub coupler_center: f64,
    /// 3-dB bandwidth of the coupler envelope, m.
    pub coupler_bw3db: f64,
    /// Insertion loss of one monochromator, dB (negative). Two are used in series.
    pub mono_loss_db: f64,
    /// m
    pub filter_center: f64,
    /// m
    pub filter_width: f64,
    /// Pump rejection, dB (positive, at least 100).
    pub pump_rejection_db: f64,
    /// Patch-fibre loss between chip and detector fibre, dB (negative).
    pub fiber_loss_db: f64,
}

/// Number of monochromators in series in each detection arm.
pub const MONOCHROMATORS_PER_ARM: i32 = 2;

impl ChannelSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("coupler_peak_db", self.coupler_peak_db),
            ("mono_loss_db", self.mono_loss_db),
            ("fiber_loss_db", self.fiber_loss_db),
        ] {
            if !(v <= 0.0) {
                return invalid(format!("{name} must be ≤ 0 dB, got {v}"));
            }
        }
        if !(self.filter_width > 0.0) {
            return invalid("filter width must be positive");
        }
        if !(self.coupler_bw3db > 0.0) {
            return invalid("coupler bandwidth must be positive");
        }
        if !(self.pump_rejection_db >= 100.0) {
            return invalid(format!(
                "pump rejection must be at least 100 dB, got {}",
                self.pump_rejection_db
            ));
        }
        Ok(())
    }
}

/// Uniform time grid centred on sample `n/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub n_samples: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(n_samples: usize, dt: f64) -> Result<Self> {
        if n_samples < 256 || !n_samples.is_power_of_two() {
            return invalid(format!("grid size must be a power of two ≥ 256, got {n_samples}"));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return invalid(format!("time step must be positive, got {dt}"));
        }
        Ok(Self { n_samples, dt })
    }

    /// Default grid for a pulse: 2¹² samples spanning 32 FWHM.
    pub fn for_pulse(fwhm: f64) -> Result<Self> {
        Self::new(
            DEFAULT_GRID_SAMPLES,
            DEFAULT_SPAN_FWHM * fwhm / DEFAULT_GRID_SAMPLES as f64,
        )
    }

    pub fn time(&self, k: usize) -> f64 {
        (k as f64 - (self.n_samples / 2) as f64) * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_samples).map(|k| self.time(k)).collect()
    }

    /// Angular frequency offsets from the carrier in FFT bin order.
    ///
    /// Bin `k` of a forward transform holds the component at `−2π f_k`,
    /// the e^(+iΔωt) convention used for optical envelopes.
    pub fn angular_offsets(&self) -> Vec<f64> {
        let n = self.n_samples;
        let df = 1.0 / (n as f64 * self.dt);
        (0..n)
            .map(|k| {
                let kk = if k < n / 2 { k as f64 } else { k as f64 - n as f64 };
                -2.0 * std::f64::consts::PI * kk * df
            })
            .collect()
    }
}

/// Complex field envelope on a uniform time grid, in √W.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPulse {
    pub carrier_wavelength: f64,
    pub rep_rate: f64,
    pub dt: f64,
    pub envelope: Vec<Complex64>,
}

impl SampledPulse {
    pub fn new(carrier_wavelength: f64, rep_rate: f64, dt: f64, envelope: Vec<Complex64>) -> Result<Self> {
        TimeGrid::new(envelope.len(), dt)?;
        if !(carrier_wavelength > 0.0) {
            return invalid("carrier wavelength must be positive");
        }
        if !(rep_rate > 0.0) {
            return invalid("repetition rate must be positive");
        }
        if envelope.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
            return invalid("pulse envelope contains non-finite samples");
        }
        Ok(Self {
            carrier_wavelength,
            rep_rate,
            dt,
            envelope,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.envelope.len()
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid {
            n_samples: self.envelope.len(),
            dt: self.dt,
        }
    }

    /// max |a|², W.
    pub fn peak_power(&self) -> f64 {
        self.envelope.iter().map(|a| a.norm_sqr()).fold(0.0, f64::max)
    }

    /// Σ|a|²·dt, J.
    pub fn energy(&self) -> f64 {
        self.envelope.iter().map(|a| a.norm_sqr()).sum::<f64>() * self.dt
    }

    pub fn carrier_angular_frequency(&self) -> f64 {
        2.0 * std::f64::consts::PI * SPEED_OF_LIGHT / self.carrier_wavelength
    }

    /// Copy with the envelope scaled so the peak power equals `peak_power`.
    pub fn with_peak_power(&self, peak_power: f64) -> Result<Self> {
        if !(peak_power >= 0.0) {
            return invalid("peak power must be non-negative");
        }
        let current = self.peak_power();
        let scale = if current > 0.0 {
            (peak_power / current).sqrt()
        } else if peak_power == 0.0 {
            0.0
        } else {
            return invalid("cannot rescale an all-zero pulse");
        };
        let mut out = self.clone();
        out.envelope.iter_mut().for_each(|a| *a *= scale);
        Ok(out)
    }
}

/// Hyperbolic-secant pulse a(t) = √P₀·sech(t/τ₀) with τ₀ = FWHM / 1.7627.
pub fn sech_pulse(
    peak_power: f64,
    duration_fwhm: f64,
    grid: TimeGrid,
    carrier_wavelength: f64,
    rep_rate: f64,
) -> Result<SampledPulse> {
    if !(peak_power >= 0.0) {
        return invalid("peak power must be non-negative");
    }
    if !(duration_fwhm > 0.0) {
        return invalid("pulse duration must be positive");
    }
    if duration_fwhm < MIN_SAMPLES_PER_FWHM as f64 * grid.dt {
        return Err(Error::UnderResolved {
            fwhm: duration_fwhm,
            dt: grid.dt,
            min_samples: MIN_SAMPLES_PER_FWHM,
        });
    }
    let tau0 = duration_fwhm / SECH_FWHM_FACTOR;
    let amp = peak_power.sqrt();
    let envelope = (0..grid.n_samples)
        .map(|k| {
            let x = grid.time(k).abs() / tau0;
            Complex64::new(amp / x.cosh(), 0.0)
        })
        .collect();
    SampledPulse::new(carrier_wavelength, rep_rate, grid.dt, envelope)
}

/// Pulse FWHM from the FWHM of its intensity autocorrelation, assuming sech².
pub fn autocorrelation_fwhm_to_pulse_fwhm(ac_fwhm: f64) -> f64 {
    ac_fwhm / SECH2_AUTOCORRELATION_FACTOR
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn db_conversions() {
        assert_eq!(db_to_linear(0.0), 1.0);
        assert_relative_eq!(db_to_linear(-7.3), 0.186_208_7, max_relative = 1e-6);
        assert!((db_to_linear(-3.01) - 0.5).abs() < 1e-3);
        assert_relative_eq!(linear_to_db(db_to_linear(-4.5)), -4.5, epsilon = 1e-12);
    }

    #[test]
    fn pump_angular_frequency() {
        let w = angular_frequency(2.0715e-6).unwrap();
        assert_relative_eq!(w, 9.0937e14, max_relative = 1e-4);
        let w2 = angular_frequency(4.143e-6).unwrap();
        assert_relative_eq!(w2 * 2.0, w, max_relative = 1e-12);
    }

    #[test]
    fn detuning_matches_reported_frequency_offset() {
        // 20.8 nm from a 2.0715 µm pump corresponds to about 1.46 THz.
        let lp = 2.0715e-6;
        let dw = angular_frequency(lp - 20.8e-9).unwrap() - angular_frequency(lp).unwrap();
        let target = 2.0 * std::f64::consts::PI * 1.46e12;
        assert!((dw / target - 1.0).abs() < 0.02, "Δω = {dw:e}");
    }

    #[test]
    fn angular_frequency_rejects_bad_input() {
        assert!(angular_frequency(0.0).is_err());
        assert!(angular_frequency(-1e-6).is_err());
        assert!(angular_frequency(f64::NAN).is_err());
    }

    #[test]
    fn sech_peak_and_energy() {
        let fwhm = 5.78e-12;
        let grid = TimeGrid::for_pulse(fwhm).unwrap();
        let p = sech_pulse(24.4, fwhm, grid, 2.0715e-6, 39.4e6).unwrap();
        assert_relative_eq!(p.peak_power(), 24.4, max_relative = 1e-12);
        let tau0 = fwhm / SECH_FWHM_FACTOR;
        assert!((p.energy() / (2.0 * 24.4 * tau0) - 1.0).abs() < 5e-3);

        let zero = sech_pulse(0.0, fwhm, grid, 2.0715e-6, 39.4e6).unwrap();
        assert!(zero.envelope.iter().all(|a| a.norm() == 0.0));
    }

    #[test]
    fn sech_rejects_under_resolved_grid() {
        let grid = TimeGrid::new(256, 1e-12).unwrap();
        let err = sech_pulse(1.0, 5e-12, grid, 2e-6, 1e6).unwrap_err();
        assert!(matches!(err, Error::UnderResolved { .. }));
    }

    #[test]
    fn sech_is_symmetric() {
        let grid = TimeGrid::new(1024, 0.05e-12).unwrap();
        let p = sech_pulse(3.0, 4.82e-12, grid, 2e-6, 1e6).unwrap();
        let n = p.n_samples();
        for k in 1..n {
            assert_eq!(p.envelope[k], p.envelope[n - k]);
        }
    }

    #[test]
    fn autocorrelation_factor() {
        assert_relative_eq!(autocorrelation_fwhm_to_pulse_fwhm(1.5427), 1.0);
        assert!((autocorrelation_fwhm_to_pulse_fwhm(7.436e-12) - 4.82e-12).abs() < 0.005e-12);
    }

    #[test]
    fn autocorrelation_round_trip_numerical() {
        // Independent check: numerically autocorrelate a sech² pulse and
        // measure the FWHM by linear interpolation.
        let fwhm = 4.82e-12;
        let grid = TimeGrid::new(2048, fwhm / 40.0).unwrap();
        let p = sech_pulse(1.0, fwhm, grid, 2e-6, 1e6).unwrap();
        let i: Vec<f64> = p.envelope.iter().map(|a| a.norm_sqr()).collect();
        let n = i.len();
        let ac: Vec<f64> = (0..n)
            .map(|shift| (0..n - shift).map(|k| i[k] * i[k + shift]).sum())
            .collect();
        let half = ac[0] / 2.0;
        let k = ac.iter().position(|&v| v < half).unwrap();
        let frac = (ac[k - 1] - half) / (ac[k - 1] - ac[k]);
        let ac_fwhm = 2.0 * (k as f64 - 1.0 + frac) * grid.dt;
        let recovered = autocorrelation_fwhm_to_pulse_fwhm(ac_fwhm);
        assert!((recovered / fwhm - 1.0).abs() < 0.01, "{recovered:e}");
    }

    #[test]
    fn effective_length_limits() {
        assert_relative_eq!(effective_length(0.0, 0.0175), 0.0175);
        let a = db_per_cm_to_per_m(3.2);
        assert_relative_eq!(a, 73.68, max_relative = 1e-3);
        let le = effective_length(a, 0.0175);
        assert_relative_eq!(le, (1.0 - (-a * 0.0175f64).exp()) / a, max_relative = 1e-12);
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(255, 1e-12).is_err());
        assert!(TimeGrid::new(300, 1e-12).is_err());
        assert!(TimeGrid::new(512, 0.0).is_err());
        let g = TimeGrid::new(256, 1.0).unwrap();
        assert_eq!(g.time(128), 0.0);
        assert_eq!(g.time(0), -128.0);
    }

    proptest::proptest! {
        #[test]
        fn db_multiplicative(a in -200.0f64..200.0, b in -200.0f64..200.0) {
            let lhs = db_to_linear(a + b);
            let rhs = db_to_linear(a) * db_to_linear(b);
            proptest::prop_assert!((lhs / rhs - 1.0).abs() < 1e-12);
        }

        #[test]
        fn angular_frequency_decreasing(l in 1e-7f64..1e-4, f in 1.0001f64..10.0) {
            proptest::prop_assert!(angular_frequency(l).unwrap() > angular_frequency(l * f).unwrap());
        }
    }
}
