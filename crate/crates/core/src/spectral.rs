//! Thin FFT wrapper with unitary scaling, shared by the propagation and
//! retrieval code.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::physmodel::{SampledPulse, SPEED_OF_LIGHT};

/// Forward/inverse transform pair of a fixed size, scaled by 1/√N each way
/// so that Σ|a|² = Σ|ã|².
#[derive(Clone)]
pub struct UnitaryFft {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scale: f64,
    scratch_len: usize,
}

impl UnitaryFft {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let scratch_len = forward.get_inplace_scratch_len().max(inverse.get_inplace_scratch_len());
        Self {
            forward,
            inverse,
            scale: 1.0 / (n as f64).sqrt(),
            scratch_len,
        }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn make_scratch(&self) -> Vec<Complex64> {
        vec![Complex64::new(0.0, 0.0); self.scratch_len]
    }

    pub fn forward(&self, buf: &mut [Complex64], scratch: &mut [Complex64]) {
        self.forward.process_with_scratch(buf, scratch);
        buf.iter_mut().for_each(|x| *x *= self.scale);
    }

    pub fn inverse(&self, buf: &mut [Complex64], scratch: &mut [Complex64]) {
        self.inverse.process_with_scratch(buf, scratch);
        buf.iter_mut().for_each(|x| *x *= self.scale);
    }
}

/// |FFT(a)|² in FFT bin order (unitary scaling).
pub fn power_spectrum(envelope: &[Complex64]) -> Vec<f64> {
    let fft = UnitaryFft::new(envelope.len());
    let mut buf = envelope.to_vec();
    let mut scratch = fft.make_scratch();
    fft.forward(&mut buf, &mut scratch);
    buf.iter().map(|x| x.norm_sqr()).collect()
}

/// One sample of a spectrum on a wavelength axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WavelengthSample {
    pub wavelength: f64,
    pub psd: f64,
}

/// Power spectrum of a pulse as (wavelength, PSD per unit wavelength),
/// sorted by increasing wavelength. Bins at non-positive absolute
/// frequency are dropped.
pub fn wavelength_spectrum(pulse: &SampledPulse) -> Vec<WavelengthSample> {
    let psd_omega = power_spectrum(&pulse.envelope);
    let offsets = pulse.grid().angular_offsets();
    let w0 = pulse.carrier_angular_frequency();
    let two_pi_c = 2.0 * std::f64::consts::PI * SPEED_OF_LIGHT;
    let mut out: Vec<WavelengthSample> = offsets
        .iter()
        .zip(&psd_omega)
        .filter(|(dw, _)| w0 + **dw > 0.0)
        .map(|(dw, p)| {
            let lambda = two_pi_c / (w0 + dw);
            WavelengthSample {
                wavelength: lambda,
                psd: p * two_pi_c / (lambda * lambda),
            }
        })
        .collect();
    out.sort_by(|a, b| a.wavelength.total_cmp(&b.wavelength));
    out
}

/// Resample a wavelength-domain spectrum onto the FFT bins of a grid.
///
/// The inverse Jacobian of [`wavelength_spectrum`] is applied and the
/// spectrum is linearly interpolated in wavelength; bins outside the
/// tabulated range are zero.
pub fn psd_on_grid(samples: &[WavelengthSample], carrier_wavelength: f64, offsets: &[f64]) -> Vec<f64> {
    let two_pi_c = 2.0 * std::f64::consts::PI * SPEED_OF_LIGHT;
    let w0 = two_pi_c / carrier_wavelength;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.wavelength.total_cmp(&b.wavelength));
    offsets
        .iter()
        .map(|dw| {
            let w = w0 + dw;
            if w <= 0.0 || sorted.is_empty() {
                return 0.0;
            }
            let lambda = two_pi_c / w;
            let psd_lambda = interpolate(&sorted, lambda);
            psd_lambda * lambda * lambda / two_pi_c
        })
        .collect()
}

fn interpolate(sorted: &[WavelengthSample], lambda: f64) -> f64 {
    let first = sorted[0].wavelength;
    let last = sorted[sorted.len() - 1].wavelength;
    if lambda < first || lambda > last {
        return 0.0;
    }
    let idx = sorted.partition_point(|s| s.wavelength < lambda);
    if idx == 0 {
        return sorted[0].psd;
    }
    if idx >= sorted.len() {
        return sorted[sorted.len() - 1].psd;
    }
    let (a, b) = (sorted[idx - 1], sorted[idx]);
    if b.wavelength == lambda {
        return b.psd;
    }
    let f = (lambda - a.wavelength) / (b.wavelength - a.wavelength);
    a.psd + f * (b.psd - a.psd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physmodel::{sech_pulse, TimeGrid};

    #[test]
    fn unitary_parseval() {
        let grid = TimeGrid::new(512, 0.1e-12).unwrap();
        let p = sech_pulse(2.0, 3e-12, grid, 2.07e-6, 1e6).unwrap();
        let e_t: f64 = p.envelope.iter().map(|a| a.norm_sqr()).sum();
        let e_w: f64 = power_spectrum(&p.envelope).iter().sum();
        assert!((e_t / e_w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wavelength_round_trip_on_bins() {
        let grid = TimeGrid::new(1024, 0.1e-12).unwrap();
        let p = sech_pulse(2.0, 3e-12, grid, 2.07e-6, 1e6).unwrap();
        let spec = wavelength_spectrum(&p);
        let back = psd_on_grid(&spec, p.carrier_wavelength, &grid.angular_offsets());
        let direct = power_spectrum(&p.envelope);
        for (a, b) in back.iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-9 * direct.iter().cloned().fold(0.0, f64::max));
        }
    }
}
