//! Monte-Carlo time tags from a pulsed pair source seen through two lossy,
//! filtered detection arms, the matching closed-form rate model, and the
//! tag-file formats.

use std::io::{BufRead, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::fwm::coupler_transmission;
use crate::physmodel::{db_to_linear, ChannelSpec, MONOCHROMATORS_PER_ARM};

/// Longest simulated acquisition.
pub const MAX_DURATION: f64 = 3600.0;
/// Longest configurable dead time.
pub const MAX_DEAD_TIME: f64 = 100e-9;
/// Pulses per independently seeded generation window.
pub const DEFAULT_WINDOW_PULSES: u64 = 1 << 20;
/// Time of pulse 0, ps. Keeps jittered tags nonnegative.
pub const FIRST_PULSE_PS: i64 = 10_000;
/// Jitter draws are clamped to this many standard deviations.
pub const JITTER_CLAMP_SIGMAS: f64 = 8.0;
/// Mean pairs per pulse above which the rate model's single-pair
/// approximation is flagged.
pub const MULTI_PAIR_WARN_MU: f64 = 0.1;
/// FWHM of a Gaussian over its standard deviation.
pub const GAUSS_FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PairStatistics {
    #[default]
    Poisson,
    Thermal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    /// Pairs per pulse per W² of peak power.
    pub xi: f64,
    pub rep_rate: f64,
    /// Noise photons per pulse per W of peak power in each arm, before
    /// channel losses.
    pub linear_noise_b: f64,
    pub pulse_duty_cycle: f64,
    #[serde(default)]
    pub statistics: PairStatistics,
}

impl SourceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi >= 0.0) || !self.xi.is_finite() {
            return invalid("xi must be finite and ≥ 0");
        }
        if !(self.rep_rate > 0.0) || !self.rep_rate.is_finite() {
            return invalid("rep_rate must be positive");
        }
        if !(self.linear_noise_b >= 0.0) {
            return invalid("linear_noise_b must be ≥ 0");
        }
        if !(self.pulse_duty_cycle > 0.0 && self.pulse_duty_cycle < 1.0) {
            return invalid("pulse_duty_cycle must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn period_ps(&self) -> f64 {
        1e12 / self.rep_rate
    }
}

/// Mean pairs per pulse, µ = ξP².
pub fn pairs_per_pulse(xi: f64, power: f64) -> Result<f64> {
    if !(power >= 0.0) {
        return invalid(format!("peak power must be ≥ 0, got {power}"));
    }
    Ok(xi * power * power)
}

/// ξ from an on-chip rate per W² and the repetition rate.
pub fn xi_from_rate(rate_per_w2: f64, rep_rate: f64) -> f64 {
    rate_per_w2 / rep_rate
}

/// Pair rate per squared average pump power from the rate per squared peak
/// power, dividing by the squared duty cycle.
pub fn rate_per_average_power_sq(rate_per_w2: f64, duty_cycle: f64) -> Result<f64> {
    if !(duty_cycle > 0.0 && duty_cycle <= 1.0) {
        return invalid(format!("duty cycle must lie in (0, 1], got {duty_cycle}"));
    }
    Ok(rate_per_w2 / (duty_cycle * duty_cycle))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    /// System detection efficiency on the bias plateau.
    pub sde_plateau: f64,
    /// Operating bias, µA. Recorded with the run; the detector is assumed to
    /// sit on its plateau.
    pub bias_ua: f64,
    /// Single-detector timing jitter FWHM, s.
    pub jitter_fwhm: f64,
    /// Intrinsic dark count rate, Hz.
    pub dcr_dark: f64,
    /// Black-body background count rate, Hz.
    pub bb_rate: f64,
    #[serde(default)]
    pub dead_time: f64,
}

impl DetectorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sde_plateau) {
            return invalid("sde_plateau must lie in [0, 1]");
        }
        if !(self.jitter_fwhm > 0.0) {
            return invalid("jitter_fwhm must be positive");
        }
        if !(self.dcr_dark >= 0.0) || !(self.bb_rate >= 0.0) {
            return invalid("dark and black-body rates must be ≥ 0");
        }
        if !(0.0..=MAX_DEAD_TIME).contains(&self.dead_time) {
            return invalid(format!("dead_time must lie in [0, {MAX_DEAD_TIME}] s"));
        }
        Ok(())
    }

    pub fn background_rate(&self) -> f64 {
        self.dcr_dark + self.bb_rate
    }

    pub fn jitter_sigma_ps(&self) -> f64 {
        self.jitter_fwhm * 1e12 / GAUSS_FWHM_PER_SIGMA
    }
}

/// Per-detector jitter FWHM when a cross-correlation FWHM is shared equally
/// by two detectors.
pub fn per_detector_jitter(cross_correlation_fwhm: f64) -> f64 {
    cross_correlation_fwhm / std::f64::consts::SQRT_2
}

/// Everything needed to simulate one pump power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairExperiment {
    pub source: SourceSpec,
    /// Arm A receives the signal band, arm B the idler band.
    pub channels: [ChannelSpec; 2],
    pub detectors: [DetectorSpec; 2],
}

impl PairExperiment {
    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        for c in &self.channels {
            c.validate()?;
        }
        for d in &self.detectors {
            d.validate()?;
        }
        Ok(())
    }

    /// Transmission from chip to detector output of arm `i`, excluding the
    /// 1:1 splitter.
    pub fn arm_efficiency(&self, i: usize) -> f64 {
        let c = &self.channels[i];
        let db =
            coupler_transmission(c, c.filter_center) + MONOCHROMATORS_PER_ARM as f64 * c.mono_loss_db + c.fiber_loss_db;
        db_to_linear(db) * self.detectors[i].sde_plateau
    }

    /// SHA-256 of the canonical JSON form.
    pub fn spec_hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("plain data serialises");
        Sha256::digest(bytes).into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Channel {
    A = 0,
    B = 1,
}

impl Channel {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Channel::A),
            1 => Some(Channel::B),
            _ => None,
        }
    }
}

/// Detection event; time in integer picoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeTag {
    pub t: i64,
    pub channel: Channel,
}

/// Provenance carried at the head of a tag file.
#[derive(Debug, Clone, PartialEq)]
pub struct TagHeader {
    pub seed: u64,
    pub power: f64,
    pub duration: f64,
    pub spec_hash: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagStream {
    pub header: TagHeader,
    /// Sorted by (time, channel).
    pub tags: Vec<TimeTag>,
}

impl TagStream {
    pub fn count(&self, ch: Channel) -> usize {
        self.tags.iter().filter(|t| t.channel == ch).count()
    }

    pub fn is_sorted(&self) -> bool {
        self.tags.windows(2).all(|w| w[0] <= w[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationOptions {
    pub window_pulses: u64,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            window_pulses: DEFAULT_WINDOW_PULSES,
        }
    }
}

struct Plan {
    mu: f64,
    p_det: [f64; 2],
    noise_mean: [f64; 2],
    background: [f64; 2],
    sigma_ps: [f64; 2],
    clamp_ps: [f64; 2],
    period_ps: f64,
    n_pulses: u64,
    thermal: bool,
}

impl Plan {
    fn new(exp: &PairExperiment, power: f64, duration: f64) -> Result<Self> {
        exp.validate()?;
        if !(0.0..=MAX_DURATION).contains(&duration) {
            return invalid(format!("duration must lie in [0, {MAX_DURATION}] s"));
        }
        let mu = pairs_per_pulse(exp.source.xi, power)?;
        let eta = [exp.arm_efficiency(0), exp.arm_efficiency(1)];
        let sigma_ps = [exp.detectors[0].jitter_sigma_ps(), exp.detectors[1].jitter_sigma_ps()];
        Ok(Self {
            mu,
            p_det: [eta[0] / 2.0, eta[1] / 2.0],
            noise_mean: [
                exp.source.linear_noise_b * power * eta[0],
                exp.source.linear_noise_b * power * eta[1],
            ],
            background: [exp.detectors[0].background_rate(), exp.detectors[1].background_rate()],
            clamp_ps: [JITTER_CLAMP_SIGMAS * sigma_ps[0], JITTER_CLAMP_SIGMAS * sigma_ps[1]],
            sigma_ps,
            period_ps: exp.source.period_ps(),
            n_pulses: (duration * exp.source.rep_rate).floor() as u64,
            thermal: exp.source.statistics == PairStatistics::Thermal,
        })
    }

    fn pulse_time(&self, k: u64) -> i64 {
        FIRST_PULSE_PS + (k as f64 * self.period_ps).round() as i64
    }

    /// Latest a tag from any later window can precede that window's first pulse.
    fn margin_ps(&self) -> i64 {
        self.clamp_ps[0].max(self.clamp_ps[1]).ceil() as i64 + 1
    }

    fn window(&self, seed: u64, w: u64, window_pulses: u64) -> Vec<TimeTag> {
        let k0 = w * window_pulses;
        let k1 = (k0 + window_pulses).min(self.n_pulses);
        let n = (k1 - k0) as f64;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(w);
        let jitter = [
            Normal::new(0.0, self.sigma_ps[0]).expect("finite sigma"),
            Normal::new(0.0, self.sigma_ps[1]).expect("finite sigma"),
        ];
        let mut tags = Vec::new();
        let emit = |rng: &mut ChaCha20Rng, ch: Channel, k: u64, tags: &mut Vec<TimeTag>| {
            let i = ch.index();
            let j: f64 = jitter[i].sample(rng);
            let j = j.clamp(-self.clamp_ps[i], self.clamp_ps[i]);
            tags.push(TimeTag {
                t: self.pulse_time(k) + j.floor() as i64,
                channel: ch,
            });
        };

        let [pa, pb] = self.p_det;
        if self.mu > 0.0 {
            if self.thermal {
                // geometric skip to each pulse holding at least one pair
                let p_nonzero = self.mu / (1.0 + self.mu);
                let mut k = k0;
                loop {
                    let u: f64 = rng.random();
                    let skip = ((1.0 - u).ln() / (1.0 - p_nonzero).ln()).floor();
                    if !skip.is_finite() || k as f64 + skip >= k1 as f64 {
                        break;
                    }
                    k += skip as u64;
                    let mut pairs = 1;
                    while rng.random::<f64>() < p_nonzero {
                        pairs += 1;
                    }
                    for _ in 0..pairs {
                        if rng.random::<f64>() < pa {
                            emit(&mut rng, Channel::A, k, &mut tags);
                        }
                        if rng.random::<f64>() < pb {
                            emit(&mut rng, Channel::B, k, &mut tags);
                        }
                    }
                    k += 1;
                }
            } else {
                // Poisson thinning: detected-both, A-only and B-only pairs are
                // independent Poisson processes over pulses
                let cats = [
                    (self.mu * pa * pb, true, true),
                    (self.mu * pa * (1.0 - pb), true, false),
                    (self.mu * (1.0 - pa) * pb, false, true),
                ];
                for (mean, a, b) in cats {
                    for _ in 0..poisson(&mut rng, mean * n) {
                        let k = rng.random_range(k0..k1);
                        if a {
                            emit(&mut rng, Channel::A, k, &mut tags);
                        }
                        if b {
                            emit(&mut rng, Channel::B, k, &mut tags);
                        }
                    }
                }
            }
        }
        for ch in [Channel::A, Channel::B] {
            for _ in 0..poisson(&mut rng, self.noise_mean[ch.index()] * n) {
                let k = rng.random_range(k0..k1);
                emit(&mut rng, ch, k, &mut tags);
            }
        }
        let (t0, t1) = (self.pulse_time(k0), self.pulse_time(k1));
        for ch in [Channel::A, Channel::B] {
            let mean = self.background[ch.index()] * (t1 - t0) as f64 * 1e-12;
            for _ in 0..poisson(&mut rng, mean) {
                tags.push(TimeTag {
                    t: rng.random_range(t0..t1),
                    channel: ch,
                });
            }
        }
        tags.sort_unstable();
        tags
    }
}

fn poisson(rng: &mut ChaCha20Rng, mean: f64) -> u64 {
    if mean > 0.0 {
        Poisson::new(mean).expect("positive mean").sample(rng) as u64
    } else {
        0
    }
}

/// Drops tags closer than the dead time to the previous kept tag on the
/// same channel.
struct DeadTimeFilter {
    dead_ps: [i64; 2],
    last: [Option<i64>; 2],
}

impl DeadTimeFilter {
    fn keep(&mut self, tag: &TimeTag) -> bool {
        let i = tag.channel.index();
        if self.dead_ps[i] > 0 {
            if let Some(prev) = self.last[i] {
                if tag.t - prev < self.dead_ps[i] {
                    return false;
                }
            }
        }
        self.last[i] = Some(tag.t);
        true
    }
}

/// Simulate and hand sorted chunks of tags to `sink` in time order.
///
/// Windows are generated in parallel, each from its own ChaCha20 stream
/// selected by window index, and merged sequentially, so the output depends
/// only on the seed and inputs.
pub fn simulate_tags_streaming<F: FnMut(&[TimeTag])>(
    exp: &PairExperiment,
    power: f64,
    duration: f64,
    seed: u64,
    opts: &SimulationOptions,
    mut sink: F,
) -> Result<()> {
    if opts.window_pulses == 0 {
        return invalid("window_pulses must be positive");
    }
    let plan = Plan::new(exp, power, duration)?;
    let n_windows = plan.n_pulses.div_ceil(opts.window_pulses);
    let margin = plan.margin_ps();
    let mut filter = DeadTimeFilter {
        dead_ps: [
            (exp.detectors[0].dead_time * 1e12).round() as i64,
            (exp.detectors[1].dead_time * 1e12).round() as i64,
        ],
        last: [None; 2],
    };
    let mut carry: Vec<TimeTag> = Vec::new();
    const BATCH: u64 = 64;
    let mut w0 = 0;
    while w0 < n_windows {
        let w1 = (w0 + BATCH).min(n_windows);
        let batch: Vec<Vec<TimeTag>> = (w0..w1)
            .into_par_iter()
            .map(|w| plan.window(seed, w, opts.window_pulses))
            .collect();
        for (w, tags) in (w0..w1).zip(batch) {
            let merged = merge_sorted(&carry, &tags);
            let last = w + 1 == n_windows;
            let cut = if last {
                merged.len()
            } else {
                let next_start = plan.pulse_time((w + 1) * opts.window_pulses);
                merged.partition_point(|t| t.t < next_start - margin)
            };
            let out: Vec<TimeTag> = merged[..cut].iter().filter(|t| filter.keep(t)).copied().collect();
            if !out.is_empty() {
                sink(&out);
            }
            carry = merged[cut..].to_vec();
        }
        w0 = w1;
    }
    Ok(())
}

fn merge_sorted(a: &[TimeTag], b: &[TimeTag]) -> Vec<TimeTag> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Simulate a complete tag stream in memory.
pub fn simulate_tags(
    exp: &PairExperiment,
    power: f64,
    duration: f64,
    seed: u64,
    opts: &SimulationOptions,
) -> Result<TagStream> {
    let mut tags = Vec::new();
    simulate_tags_streaming(exp, power, duration, seed, opts, |chunk| tags.extend_from_slice(chunk))?;
    Ok(TagStream {
        header: TagHeader {
            seed,
            power,
            duration,
            spec_hash: exp.spec_hash(),
        },
        tags,
    })
}

/// Closed-form expectations in the single-pair (low µ) limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpectedRates {
    pub mu: f64,
    pub eta_a: f64,
    pub eta_b: f64,
    pub singles_a: f64,
    pub singles_b: f64,
    /// Detected true coincidences, Hz (all delays).
    pub coincidences: f64,
    /// Accidental coincidences inside one window of `window_ps`, Hz.
    pub accidentals: f64,
    /// Fraction of a jitter-broadened peak inside the window.
    pub capture_fraction: f64,
    /// µ ≥ 0.1: multi-pair terms neglected here are no longer small.
    pub multi_pair_warning: bool,
}

impl ExpectedRates {
    /// Pairs generated before the 1:1 splitting, from a net coincidence rate.
    pub fn true_pair_rate(net_coincidence_rate: f64) -> f64 {
        4.0 * net_coincidence_rate
    }
}

pub fn expected_rates(exp: &PairExperiment, power: f64, window_ps: f64) -> Result<ExpectedRates> {
    exp.validate()?;
    if !(window_ps > 0.0) {
        return invalid("window must be positive");
    }
    let mu = pairs_per_pulse(exp.source.xi, power)?;
    let r = exp.source.rep_rate;
    let (ea, eb) = (exp.arm_efficiency(0), exp.arm_efficiency(1));
    let b = exp.source.linear_noise_b;
    let sync_a = r * (mu * ea / 2.0 + b * power * ea);
    let sync_b = r * (mu * eb / 2.0 + b * power * eb);
    let (da, db) = (exp.detectors[0].background_rate(), exp.detectors[1].background_rate());
    let sigma_cc = exp.detectors[0]
        .jitter_sigma_ps()
        .hypot(exp.detectors[1].jitter_sigma_ps());
    let capture = libm::erf(window_ps / (2.0 * std::f64::consts::SQRT_2 * sigma_cc));
    let w = window_ps * 1e-12;
    Ok(ExpectedRates {
        mu,
        eta_a: ea,
        eta_b: eb,
        singles_a: sync_a + da,
        singles_b: sync_b + db,
        coincidences: r * mu * ea * eb / 4.0,
        accidentals: sync_a * sync_b * capture / r + (sync_a * db + da * sync_b + da * db) * w,
        capture_fraction: capture,
        multi_pair_warning: mu >= MULTI_PAIR_WARN_MU,
    })
}

const MAGIC: &[u8; 8] = b"MIRTAGS\0";
pub const TAG_FORMAT_VERSION: u32 = 1;
const HEADER_LEN: u64 = 8 + 4 + 8 + 8 + 8 + 32 + 8;
const RECORD_LEN: u64 = 9;

/// Binary layout, little-endian: magic `MIRTAGS\0`, u32 version, u64 seed,
/// f64 power, f64 duration, 32-byte spec hash, u64 record count, then
/// packed records of (u8 channel, i64 time_ps).
pub fn write_tags_binary<W: Write>(stream: &TagStream, out: &mut W) -> std::io::Result<()> {
    let h = &stream.header;
    out.write_all(MAGIC)?;
    out.write_all(&TAG_FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&h.seed.to_le_bytes())?;
    out.write_all(&h.power.to_le_bytes())?;
    out.write_all(&h.duration.to_le_bytes())?;
    out.write_all(&h.spec_hash)?;
    out.write_all(&(stream.tags.len() as u64).to_le_bytes())?;
    for t in &stream.tags {
        out.write_all(&[t.channel as u8])?;
        out.write_all(&t.t.to_le_bytes())?;
    }
    Ok(())
}

fn malformed<T>(offset: u64, reason: impl Into<String>) -> Result<T> {
    Err(Error::MalformedTags {
        offset,
        reason: reason.into(),
    })
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: u64, what: &str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => return malformed(offset + filled as u64, format!("truncated {what}")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

pub fn read_tags_binary<R: Read>(input: &mut R) -> Result<TagStream> {
    let mut head = [0u8; HEADER_LEN as usize];
    read_exact_at(input, &mut head, 0, "header")?;
    if &head[0..8] != MAGIC {
        return malformed(0, "bad magic");
    }
    let u64_at = |o: usize| u64::from_le_bytes(head[o..o + 8].try_into().unwrap());
    let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
    if version != TAG_FORMAT_VERSION {
        return malformed(8, format!("unsupported version {version}"));
    }
    let header = TagHeader {
        seed: u64_at(12),
        power: f64::from_bits(u64_at(20)),
        duration: f64::from_bits(u64_at(28)),
        spec_hash: head[36..68].try_into().unwrap(),
    };
    let count = u64_at(68);
    let mut tags = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut rec = [0u8; RECORD_LEN as usize];
    let mut prev: Option<TimeTag> = None;
    for i in 0..count {
        let off = HEADER_LEN + i * RECORD_LEN;
        read_exact_at(input, &mut rec, off, "record")?;
        let Some(channel) = Channel::from_u8(rec[0]) else {
            return malformed(off, format!("invalid channel {}", rec[0]));
        };
        let t = i64::from_le_bytes(rec[1..9].try_into().unwrap());
        if t < 0 {
            return malformed(off + 1, "negative time");
        }
        let tag = TimeTag { t, channel };
        if prev.is_some_and(|p| p > tag) {
            return malformed(off, "records out of order");
        }
        prev = Some(tag);
        tags.push(tag);
    }
    let mut extra = [0u8; 1];
    if input.read(&mut extra)? != 0 {
        return malformed(HEADER_LEN + count * RECORD_LEN, "trailing bytes after last record");
    }
    Ok(TagStream { header, tags })
}

/// CSV form: provenance as `#` lines, then `channel,time_ps` rows with
/// channels `A`/`B`.
pub fn write_tags_csv<W: Write>(stream: &TagStream, out: &mut W) -> std::io::Result<()> {
    let h = &stream.header;
    writeln!(out, "# seed={}", h.seed)?;
    writeln!(out, "# power_W={}", h.power)?;
    writeln!(out, "# duration_s={}", h.duration)?;
    writeln!(out, "# spec_sha256={}", hex::encode(h.spec_hash))?;
    writeln!(out, "channel,time_ps")?;
    for t in &stream.tags {
        let c = if t.channel == Channel::A { "A" } else { "B" };
        writeln!(out, "{c},{}", t.t)?;
    }
    Ok(())
}

/// Parses the CSV form. Missing provenance lines default to zero; the
/// reported offset of a bad row is its byte offset in the input.
pub fn read_tags_csv<R: BufRead>(input: R) -> Result<TagStream> {
    let mut header = TagHeader {
        seed: 0,
        power: 0.0,
        duration: 0.0,
        spec_hash: [0; 32],
    };
    let mut tags = Vec::new();
    let mut offset = 0u64;
    let mut seen_columns = false;
    for line in input.split(b'\n') {
        let raw = line?;
        let here = offset;
        offset += raw.len() as u64 + 1;
        let Ok(text) = std::str::from_utf8(&raw) else {
            return malformed(here, "invalid UTF-8");
        };
        let text = text.trim_end_matches('\r');
        if text.is_empty() {
            continue;
        }
        if let Some(meta) = text.strip_prefix('#') {
            if let Some((k, v)) = meta.trim().split_once('=') {
                let bad = || Error::MalformedTags {
                    offset: here,
                    reason: format!("bad value for {k}"),
                };
                match k {
                    "seed" => header.seed = v.parse().map_err(|_| bad())?,
                    "power_W" => header.power = v.parse().map_err(|_| bad())?,
                    "duration_s" => header.duration = v.parse().map_err(|_| bad())?,
                    "spec_sha256" => {
                        let bytes = hex::decode(v).map_err(|_| bad())?;
                        header.spec_hash = bytes.try_into().map_err(|_| bad())?;
                    }
                    _ => {}
                }
            }
            continue;
        }
        if !seen_columns {
            if text != "channel,time_ps" {
                return malformed(here, "expected header `channel,time_ps`");
            }
            seen_columns = true;
            continue;
        }
        let Some((c, t)) = text.split_once(',') else {
            return malformed(here, "expected two fields");
        };
        let channel = match c {
            "A" | "0" => Channel::A,
            "B" | "1" => Channel::B,
            _ => return malformed(here, format!("invalid channel {c:?}")),
        };
        let t: i64 = t.trim().parse().map_err(|_| Error::MalformedTags {
            offset: here,
            reason: format!("invalid time {t:?}"),
        })?;
        if t < 0 {
            return malformed(here, "negative time");
        }
        tags.push(TimeTag { t, channel });
    }
    if !seen_columns {
        return malformed(offset.saturating_sub(1), "missing `channel,time_ps` header");
    }
    tags.sort_unstable();
    Ok(TagStream { header, tags })
}
