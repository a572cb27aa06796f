//! Coincidence histograms from tag streams, peak fitting, CAR, and the
//! power-scan estimate of the on-chip pair-generation efficiency.

use std::collections::VecDeque;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::fitters::{
    initial_guess, least_squares, linear_least_squares, ErrorScaling, FitOptions, ModelKind, Weights,
};
use crate::pairsource::{Channel, ExpectedRates, TagStream, TimeTag, GAUSS_FWHM_PER_SIGMA};

pub const DEFAULT_BIN_WIDTH_PS: i64 = 4;
/// Full width of the integration window around each peak.
pub const DEFAULT_WINDOW_PS: f64 = 389.0;
/// Side peaks averaged for the accidental estimate (half on each side).
pub const DEFAULT_SIDE_PEAKS: usize = 6;
/// Smallest peak-bin count fitted without rebinning.
pub const MIN_PEAK_COUNTS: f64 = 20.0;
/// Half-width of the region around the zero-delay peak used by the fit, ps.
pub const DEFAULT_FIT_HALF_WIDTH_PS: f64 = 1500.0;
/// Upper power bound of the low-power regime used by the power-scan fit, W.
pub const LOW_POWER_LIMIT: f64 = 0.5;

/// Counts of B-minus-A delays in bins centred on multiples of the bin width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CoincidenceHistogram {
    pub bin_width: i64,
    /// Bins run from −half_bins to +half_bins.
    pub half_bins: i64,
    pub counts: Vec<u64>,
    /// Seconds of data behind the counts (stored as nanoseconds for Eq).
    integration_ns: u64,
}

impl CoincidenceHistogram {
    pub fn empty(bin_width: i64, span: i64, integration_time: f64) -> Result<Self> {
        if bin_width < 1 {
            return invalid("bin width must be at least 1 ps");
        }
        if span < 0 {
            return invalid("span must be ≥ 0");
        }
        if !(integration_time >= 0.0) {
            return invalid("integration time must be ≥ 0");
        }
        let half_bins = (span + bin_width / 2) / bin_width;
        Ok(Self {
            bin_width,
            half_bins,
            counts: vec![0; (2 * half_bins + 1) as usize],
            integration_ns: (integration_time * 1e9).round() as u64,
        })
    }

    pub fn integration_time(&self) -> f64 {
        self.integration_ns as f64 * 1e-9
    }

    /// Bin centres, ps.
    pub fn delays(&self) -> Vec<f64> {
        (-self.half_bins..=self.half_bins)
            .map(|i| (i * self.bin_width) as f64)
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Delays exactly on a bin edge go to the upper bin.
    fn add(&mut self, delay: i64) {
        let idx = (delay + self.bin_width / 2).div_euclid(self.bin_width);
        if idx.abs() <= self.half_bins {
            self.counts[(idx + self.half_bins) as usize] += 1;
        }
    }

    /// Histogram with the delay axis reversed (start and stop exchanged).
    pub fn mirrored(&self) -> Self {
        let mut h = self.clone();
        h.counts.reverse();
        h
    }

    /// Merge `factor` adjacent bins about zero.
    pub fn rebinned(&self, factor: i64) -> Result<Self> {
        if factor < 1 {
            return invalid("rebin factor must be ≥ 1");
        }
        let bw = self.bin_width * factor;
        let span = self.half_bins * self.bin_width;
        let mut out = Self::empty(bw, span, self.integration_time())?;
        for (k, c) in self.counts.iter().enumerate() {
            let d = (k as i64 - self.half_bins) * self.bin_width;
            let idx = (d + bw / 2).div_euclid(bw);
            if idx.abs() <= out.half_bins {
                out.counts[(idx + out.half_bins) as usize] += c;
            }
        }
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "delay_ps,counts")?;
        for (d, c) in self.delays().iter().zip(&self.counts) {
            writeln!(out, "{d},{c}")?;
        }
        Ok(())
    }
}

/// All-pairs histogram of t_B − t_A within ±span.
pub fn build_histogram(stream: &TagStream, bin_width: i64, span: i64) -> Result<CoincidenceHistogram> {
    let mut hist = CoincidenceHistogram::empty(bin_width, span, stream.header.duration)?;
    if !stream.is_sorted() {
        return invalid("tag stream must be sorted");
    }
    let a: Vec<i64> = stream
        .tags
        .iter()
        .filter(|t| t.channel == Channel::A)
        .map(|t| t.t)
        .collect();
    let b: Vec<i64> = stream
        .tags
        .iter()
        .filter(|t| t.channel == Channel::B)
        .map(|t| t.t)
        .collect();
    let template = hist.clone();
    let partial = a
        .par_chunks(1 << 14)
        .map(|chunk| {
            let mut h = template.clone();
            for &ta in chunk {
                let lo = b.partition_point(|&tb| tb < ta - span);
                for &tb in b[lo..].iter().take_while(|&&tb| tb <= ta + span) {
                    h.add(tb - ta);
                }
            }
            h.counts
        })
        .reduce(
            || vec![0; template.counts.len()],
            |mut x, y| {
                x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
                x
            },
        );
    hist.counts = partial;
    Ok(hist)
}

/// Incremental histogram over a time-ordered tag sequence, holding only
/// the tags still within `span` of the newest one.
pub struct HistogramAccumulator {
    hist: CoincidenceHistogram,
    span: i64,
    recent: [VecDeque<i64>; 2],
    last: Option<TimeTag>,
}

impl HistogramAccumulator {
    pub fn new(bin_width: i64, span: i64) -> Result<Self> {
        Ok(Self {
            hist: CoincidenceHistogram::empty(bin_width, span, 0.0)?,
            span,
            recent: [VecDeque::new(), VecDeque::new()],
            last: None,
        })
    }

    pub fn push(&mut self, tag: TimeTag) -> Result<()> {
        if self.last.is_some_and(|l| l > tag) {
            return invalid(format!("tag at {} ps arrived out of order", tag.t));
        }
        self.last = Some(tag);
        let (me, other) = match tag.channel {
            Channel::A => (0, 1),
            Channel::B => (1, 0),
        };
        let q = &mut self.recent[other];
        while q.front().is_some_and(|&t| t < tag.t - self.span) {
            q.pop_front();
        }
        for &t in q.iter() {
            let d = if me == 1 { tag.t - t } else { t - tag.t };
            self.hist.add(d);
        }
        let own = &mut self.recent[me];
        while own.front().is_some_and(|&t| t < tag.t - self.span) {
            own.pop_front();
        }
        own.push_back(tag.t);
        Ok(())
    }

    pub fn push_all(&mut self, tags: &[TimeTag]) -> Result<()> {
        tags.iter().try_for_each(|t| self.push(*t))
    }

    pub fn finish(mut self, integration_time: f64) -> CoincidenceHistogram {
        self.hist.integration_ns = (integration_time * 1e9).round() as u64;
        self.hist
    }
}

/// Gaussian-plus-background fit of the zero-delay peak.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeakFit {
    pub center: f64,
    pub center_err: f64,
    pub sigma: f64,
    pub sigma_err: f64,
    pub amplitude: f64,
    pub amplitude_err: f64,
    pub background: f64,
    pub fwhm: f64,
    pub fwhm_err: f64,
    /// Bin width actually fitted, after any rebinning.
    pub bin_width: f64,
    pub converged: bool,
    pub residual_rms: f64,
}

impl PeakFit {
    /// Integration window spanning `k` fitted standard deviations, ps.
    pub fn window_from_sigmas(&self, k: f64) -> f64 {
        k * self.sigma
    }
}

/// Fit y(x) = A·exp(−(x − x₀)²/2σ²) + c to tabulated data.
///
/// A first pass weights bins by their observed counts; the second weights
/// them by the first-pass model, which keeps sparse tail bins from pulling
/// the width low.
pub fn fit_peak_xy(x: &[f64], y: &[f64], bin_width: f64) -> Result<PeakFit> {
    let model = ModelKind::GaussianBackground;
    let guess = initial_guess(model, x, y)?;
    let first = least_squares(&model, x, y, &Weights::Poisson, &guess, &FitOptions::default())?;
    let [a, x0, s, c] = [first.params[0], first.params[1], first.params[2], first.params[3]];
    let sigmas = x
        .iter()
        .map(|v| (a * (-(v - x0).powi(2) / (2.0 * s * s)).exp() + c).max(1.0).sqrt())
        .collect();
    let fit = least_squares(
        &model,
        x,
        y,
        &Weights::Sigma(sigmas),
        &first.params,
        &FitOptions::default(),
    )?;
    let sigma = fit.params[2].abs();
    Ok(PeakFit {
        center: fit.params[1],
        center_err: fit.param_errs[1],
        sigma,
        sigma_err: fit.param_errs[2],
        amplitude: fit.params[0],
        amplitude_err: fit.param_errs[0],
        background: fit.params[3],
        fwhm: GAUSS_FWHM_PER_SIGMA * sigma,
        fwhm_err: GAUSS_FWHM_PER_SIGMA * fit.param_errs[2],
        bin_width,
        converged: fit.converged,
        residual_rms: fit.residual_rms,
    })
}

/// Fit the peak nearest zero delay. Sparse histograms are rebinned (up to
/// 16×) until the peak bin holds at least 20 counts.
pub fn fit_peak(hist: &CoincidenceHistogram, fit_half_width: f64) -> Result<PeakFit> {
    let mut h = hist.clone();
    let mut factor = 1;
    loop {
        let delays = h.delays();
        let (x, y): (Vec<f64>, Vec<f64>) = delays
            .iter()
            .zip(&h.counts)
            .filter(|(d, _)| d.abs() <= fit_half_width)
            .map(|(d, c)| (*d, *c as f64))
            .unzip();
        let peak = y.iter().cloned().fold(0.0, f64::max);
        if peak >= MIN_PEAK_COUNTS {
            return fit_peak_xy(&x, &y, h.bin_width as f64);
        }
        if factor >= 16 {
            return Err(Error::InsufficientData(format!(
                "peak holds {peak} counts after {factor}× rebinning"
            )));
        }
        factor *= 2;
        h = hist.rebinned(factor)?;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CarOptions {
    /// Full width of each integration window, ps.
    pub window_ps: f64,
    pub n_side_peaks: usize,
    /// Centre of the zero-delay window, ps.
    pub center_ps: f64,
    pub period_ps: f64,
}

impl CarOptions {
    pub fn new(period_ps: f64) -> Self {
        Self {
            window_ps: DEFAULT_WINDOW_PS,
            n_side_peaks: DEFAULT_SIDE_PEAKS,
            center_ps: 0.0,
            period_ps,
        }
    }

    /// Histogram half-span that covers every side window.
    pub fn required_span(&self) -> i64 {
        ((self.n_side_peaks / 2) as f64 * self.period_ps + self.center_ps.abs() + self.window_ps).ceil() as i64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CarResult {
    pub x_raw: f64,
    /// Mean side-window count.
    pub x_acc: f64,
    /// Infinite when no accidentals were seen (see `infinite`).
    pub car: f64,
    pub car_err: f64,
    pub window_ps: f64,
    pub side_counts: Vec<u64>,
    pub infinite: bool,
}

impl CarResult {
    /// Sample variance over mean of the side-window counts (≈ 1 for Poisson).
    pub fn side_dispersion(&self) -> f64 {
        let n = self.side_counts.len() as f64;
        if n < 2.0 || self.x_acc == 0.0 {
            return f64::NAN;
        }
        let var = self
            .side_counts
            .iter()
            .map(|c| (*c as f64 - self.x_acc).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        var / self.x_acc
    }
}

fn window_sum(hist: &CoincidenceHistogram, center: f64, width: f64) -> u64 {
    let (lo, hi) = (center - width / 2.0, center + width / 2.0);
    let bw = hist.bin_width as f64;
    let first = ((lo / bw).ceil() as i64).max(-hist.half_bins);
    let last = ((hi / bw).floor() as i64).min(hist.half_bins);
    (first..=last).map(|i| hist.counts[(i + hist.half_bins) as usize]).sum()
}

/// CAR = (X_raw − X_acc)/X_acc with X_acc the mean over side windows at
/// ±k pulse periods.
pub fn car_from_histogram(hist: &CoincidenceHistogram, opts: &CarOptions) -> Result<CarResult> {
    if !(opts.window_ps > 0.0) {
        return invalid("window must be positive");
    }
    if opts.n_side_peaks < 2 || !opts.n_side_peaks.is_multiple_of(2) {
        return invalid("side peaks must be an even number ≥ 2");
    }
    if !(opts.period_ps > opts.window_ps) {
        return invalid("pulse period must exceed the window");
    }
    let covered = (hist.half_bins * hist.bin_width) as f64;
    let needed = (opts.n_side_peaks / 2) as f64 * opts.period_ps + opts.center_ps.abs() + opts.window_ps / 2.0;
    if covered < needed {
        return invalid(format!("histogram spans ±{covered} ps, side windows need ±{needed} ps"));
    }
    let x_raw = window_sum(hist, opts.center_ps, opts.window_ps) as f64;
    let half = (opts.n_side_peaks / 2) as i64;
    let side_counts: Vec<u64> = (-half..=half)
        .filter(|k| *k != 0)
        .map(|k| window_sum(hist, opts.center_ps + k as f64 * opts.period_ps, opts.window_ps))
        .collect();
    let n = side_counts.len() as f64;
    let x_acc = side_counts.iter().sum::<u64>() as f64 / n;
    let (car, car_err, infinite) = if x_acc > 0.0 {
        let var = x_raw / (x_acc * x_acc) + x_raw * x_raw * (x_acc / n) / x_acc.powi(4);
        ((x_raw - x_acc) / x_acc, var.sqrt(), false)
    } else {
        (f64::INFINITY, f64::INFINITY, true)
    };
    Ok(CarResult {
        x_raw,
        x_acc,
        car,
        car_err,
        window_ps: opts.window_ps,
        side_counts,
        infinite,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CarRow {
    pub power: f64,
    pub car: CarResult,
    pub raw_hz: f64,
    pub net_hz: f64,
    pub true_pair_hz: f64,
}

pub fn car_power_curve(rows: &[(f64, &CoincidenceHistogram)], opts: &CarOptions) -> Result<Vec<CarRow>> {
    rows.iter()
        .map(|(p, h)| {
            let t = h.integration_time();
            if !(t > 0.0) {
                return invalid(format!("histogram at {p} W has no integration time"));
            }
            let car = car_from_histogram(h, opts)?;
            let net = (car.x_raw - car.x_acc) / t;
            Ok(CarRow {
                power: *p,
                raw_hz: car.x_raw / t,
                net_hz: net,
                true_pair_hz: ExpectedRates::true_pair_rate(net),
                car,
            })
        })
        .collect()
}

/// `peak_power_W,car,car_err,raw_hz,net_hz,true_pair_hz`
pub fn write_car_curve_csv<W: Write>(rows: &[CarRow], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "peak_power_W,car,car_err,raw_hz,net_hz,true_pair_hz")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.power, r.car.car, r.car.car_err, r.raw_hz, r.net_hz, r.true_pair_hz
        )?;
    }
    Ok(())
}

/// Rates measured at one pump power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScanPoint {
    pub power: f64,
    pub singles_a: f64,
    pub singles_b: f64,
    pub net_coincidences: f64,
    /// Seconds behind each rate; sets the Poisson weights. Zero means
    /// unweighted.
    pub integration_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadraticFit {
    /// Coefficients of aP² + bP + c.
    pub a: f64,
    pub a_err: f64,
    pub b: f64,
    pub b_err: f64,
    pub c: f64,
    pub c_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct XiEstimate {
    pub singles_a: QuadraticFit,
    pub singles_b: QuadraticFit,
    pub net_a: f64,
    pub net_a_err: f64,
    /// On-chip pairs per second per W², a_C0·a_C1/a_X.
    pub rate_per_w2: f64,
    pub rate_per_w2_err: f64,
    /// Pairs per pulse per W².
    pub xi: f64,
    pub xi_err: f64,
    /// A fitted quadratic coefficient came out negative.
    pub negative_coefficient: bool,
}

fn rate_sigmas(rates: &[f64], t: f64) -> Weights {
    if t > 0.0 {
        Weights::Sigma(rates.iter().map(|r| (r * t).abs().max(1.0).sqrt() / t).collect())
    } else {
        Weights::Uniform
    }
}

/// ξ from quadratic fits of both singles rates and a pure-P² fit of the net
/// coincidence rate; channel efficiencies cancel in a_C0·a_C1/a_X.
pub fn power_scan_fit(points: &[ScanPoint], rep_rate: f64) -> Result<XiEstimate> {
    if points.len() < 5 {
        return Err(Error::InsufficientData(format!(
            "need ≥ 5 power points, got {}",
            points.len()
        )));
    }
    if !(rep_rate > 0.0) {
        return invalid("rep_rate must be positive");
    }
    if let Some(p) = points.iter().find(|p| !(p.power > 0.0 && p.power < LOW_POWER_LIMIT)) {
        return invalid(format!(
            "power {} W outside the low-power regime (0, {LOW_POWER_LIMIT}) W",
            p.power
        ));
    }
    let t = points.iter().map(|p| p.integration_time).fold(f64::INFINITY, f64::min);
    let pw: Vec<f64> = points.iter().map(|p| p.power).collect();
    let p2: Vec<f64> = pw.iter().map(|p| p * p).collect();
    let ones = vec![1.0; pw.len()];
    let scaling = if t > 0.0 {
        ErrorScaling::Absolute
    } else {
        ErrorScaling::ReducedChiSquare
    };
    let quad = |y: Vec<f64>| -> Result<QuadraticFit> {
        let f = linear_least_squares(
            &[p2.clone(), pw.clone(), ones.clone()],
            &y,
            &rate_sigmas(&y, t),
            scaling,
        )?;
        if !f.converged {
            return Err(Error::InsufficientData("singular power-scan fit".into()));
        }
        Ok(QuadraticFit {
            a: f.params[0],
            a_err: f.param_errs[0],
            b: f.params[1],
            b_err: f.param_errs[1],
            c: f.params[2],
            c_err: f.param_errs[2],
        })
    };
    let sa = quad(points.iter().map(|p| p.singles_a).collect())?;
    let sb = quad(points.iter().map(|p| p.singles_b).collect())?;
    let net: Vec<f64> = points.iter().map(|p| p.net_coincidences).collect();
    let nf = linear_least_squares(std::slice::from_ref(&p2), &net, &rate_sigmas(&net, t), scaling)?;
    let (ax, ax_err) = (nf.params[0], nf.param_errs[0]);
    let rate = sa.a * sb.a / ax;
    let rel = ((sa.a_err / sa.a).powi(2) + (sb.a_err / sb.a).powi(2) + (ax_err / ax).powi(2)).sqrt();
    Ok(XiEstimate {
        singles_a: sa,
        singles_b: sb,
        net_a: ax,
        net_a_err: ax_err,
        rate_per_w2: rate,
        rate_per_w2_err: (rate * rel).abs(),
        xi: rate / rep_rate,
        xi_err: (rate * rel / rep_rate).abs(),
        negative_coefficient: sa.a < 0.0 || sb.a < 0.0 || ax < 0.0,
    })
}
