//! Simulated acoustic scenes: sources convolved with per-microphone impulse
//! responses plus multichannel noise, with every component kept for oracle
//! masks and reference signals.

use std::f64::consts::PI;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::metrics::{self, FwssnrConfig};
use crate::par;

/// Mono signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

/// Multichannel signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub sample_rate: u32,
    pub channels: Vec<Vec<f64>>,
}

/// Impulse responses indexed `[source][mic]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponses {
    pub sample_rate: u32,
    pub reverberant: Vec<Vec<Vec<f64>>>,
    /// Direct-path (anechoic) responses; define the anechoic components.
    pub direct: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticScene {
    pub sample_rate: u32,
    pub sources: Vec<Signal>,
    pub irs: ImpulseResponses,
    pub noise: Waveform,
}

/// Microphone signals and their additive components.
///
/// `mics[m] = Σ_i reverberant[i][m] + noise[m]`, summed in source order.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub sample_rate: u32,
    pub mics: Vec<Vec<f64>>,
    pub reverberant: Vec<Vec<Vec<f64>>>,
    pub anechoic: Vec<Vec<Vec<f64>>>,
    pub noise: Vec<Vec<f64>>,
}

impl RenderedScene {
    pub fn num_mics(&self) -> usize {
        self.mics.len()
    }

    pub fn num_sources(&self) -> usize {
        self.reverberant.len()
    }

    pub fn len(&self) -> usize {
        self.mics.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Convolved speech components before noise scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneComponents {
    pub sample_rate: u32,
    pub reverberant: Vec<Vec<Vec<f64>>>,
    pub anechoic: Vec<Vec<Vec<f64>>>,
    pub noise: Vec<Vec<f64>>,
}

impl SceneComponents {
    /// Adds the noise at `noise_gain` and forms the microphone signals.
    pub fn mix(&self, noise_gain: f64) -> RenderedScene {
        let noise: Vec<Vec<f64>> = self
            .noise
            .iter()
            .map(|c| c.iter().map(|v| v * noise_gain).collect())
            .collect();
        let mics = noise
            .iter()
            .enumerate()
            .map(|(m, v)| {
                let mut y = self.reverberant[0][m].clone();
                for src in &self.reverberant[1..] {
                    for (a, b) in y.iter_mut().zip(&src[m]) {
                        *a += b;
                    }
                }
                for (a, b) in y.iter_mut().zip(v) {
                    *a += b;
                }
                y
            })
            .collect();
        RenderedScene {
            sample_rate: self.sample_rate,
            mics,
            reverberant: self.reverberant.clone(),
            anechoic: self.anechoic.clone(),
            noise,
        }
    }
}

fn check_rate(expected: u32, found: u32, what: impl Into<String>) -> Result<()> {
    if expected != found {
        return Err(Error::SampleRateMismatch {
            expected,
            found,
            what: what.into(),
        });
    }
    Ok(())
}

impl AcousticScene {
    fn validate(&self) -> Result<(usize, usize, usize)> {
        let sources = self.sources.len();
        if sources == 0 {
            return Err(Error::Empty("scene has no sources".into()));
        }
        for (i, s) in self.sources.iter().enumerate() {
            check_rate(self.sample_rate, s.sample_rate, format!("source {i}"))?;
        }
        check_rate(self.sample_rate, self.irs.sample_rate, "impulse responses")?;
        check_rate(self.sample_rate, self.noise.sample_rate, "noise")?;
        let mics = self.noise.channels.len();
        if mics == 0 {
            return Err(Error::Empty("scene has no microphones".into()));
        }
        for set in [&self.irs.reverberant, &self.irs.direct] {
            if set.len() != sources || set.iter().any(|per_mic| per_mic.len() != mics) {
                return Err(Error::DimensionMismatch(format!(
                    "impulse responses must be {sources} sources x {mics} mics"
                )));
            }
        }
        let len = self.sources.iter().map(|s| s.samples.len()).max().unwrap_or(0);
        for (i, s) in self.sources.iter().enumerate() {
            let longest = self.irs.reverberant[i]
                .iter()
                .chain(&self.irs.direct[i])
                .map(Vec::len)
                .max()
                .unwrap_or(0);
            if longest >= s.samples.len() {
                return Err(Error::SignalTooShort {
                    len: s.samples.len(),
                    needed: longest + 1,
                });
            }
        }
        if self.noise.channels.iter().any(|c| c.len() < len) {
            return Err(Error::SignalTooShort {
                len: self.noise.channels.iter().map(Vec::len).min().unwrap_or(0),
                needed: len,
            });
        }
        Ok((sources, mics, len))
    }

    /// Convolves every source with every impulse response; output length is
    /// the longest source.
    pub fn components(&self) -> Result<SceneComponents> {
        let (sources, mics, len) = self.validate()?;
        let pairs: Vec<(usize, usize)> = (0..sources)
            .flat_map(|i| (0..mics).map(move |m| (i, m)))
            .collect();
        let convolved = par::map_slice(&pairs, |&(i, m)| {
            let s = &self.sources[i].samples;
            (
                fft_convolve(s, &self.irs.reverberant[i][m], len),
                fft_convolve(s, &self.irs.direct[i][m], len),
            )
        });
        let mut reverberant = vec![Vec::with_capacity(mics); sources];
        let mut anechoic = vec![Vec::with_capacity(mics); sources];
        for ((i, _), (r, a)) in pairs.into_iter().zip(convolved) {
            reverberant[i].push(r);
            anechoic[i].push(a);
        }
        let noise = self.noise.channels.iter().map(|c| c[..len].to_vec()).collect();
        Ok(SceneComponents {
            sample_rate: self.sample_rate,
            reverberant,
            anechoic,
            noise,
        })
    }
}

/// Renders the scene with the noise scaled by `noise_gain`.
pub fn render(scene: &AcousticScene, noise_gain: f64) -> Result<RenderedScene> {
    if !(noise_gain >= 0.0 && noise_gain.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise gain {noise_gain} must be finite and >= 0")));
    }
    Ok(scene.components()?.mix(noise_gain))
}

/// Linear convolution `x * h`, truncated (or zero-padded) to `out_len`.
pub fn fft_convolve(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; out_len];
    }
    let full = x.len() + h.len() - 1;
    let n = full.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<C64> = x.iter().map(|&v| C64::new(v, 0.0)).collect();
    a.resize(n, C64::new(0.0, 0.0));
    let mut b: Vec<C64> = h.iter().map(|&v| C64::new(v, 0.0)).collect();
    b.resize(n, C64::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    let scale = 1.0 / n as f64;
    let mut out: Vec<f64> = a.iter().take(full.min(out_len)).map(|z| z.re * scale).collect();
    out.resize(out_len, 0.0);
    out
}

/// Parameters of the built-in synthetic room response: a fractional-delay
/// direct path per microphone followed by an exponentially decaying
/// Gaussian tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticIrConfig {
    /// Reverberation time in seconds; 0 gives anechoic responses.
    pub t60: f64,
    /// Direct-to-reverberant energy ratio in dB.
    pub drr_db: f64,
    /// Delay of the direct path at the array center, in seconds.
    pub base_delay: f64,
    /// Gap between direct path and the start of the tail, in seconds.
    pub tail_onset: f64,
    /// Microphone positions `(x, y)` in meters; `x` points to the right ear.
    pub mic_positions: Vec<[f64; 2]>,
    pub speed_of_sound: f64,
    /// Attenuation of microphones on the far side of the head.
    pub head_shadow_db: f64,
}

impl Default for SyntheticIrConfig {
    fn default() -> Self {
        Self {
            t60: 0.5,
            drr_db: 12.0,
            base_delay: 0.004,
            tail_onset: 0.002,
            mic_positions: binaural_positions(),
            speed_of_sound: 343.0,
            head_shadow_db: 4.0,
        }
    }
}

/// Two behind-the-ear devices with three microphones each.
pub fn binaural_positions() -> Vec<[f64; 2]> {
    let mut p = Vec::with_capacity(6);
    for side in [-1.0, 1.0] {
        for y in [0.0076, 0.0, -0.0076] {
            p.push([side * 0.08, y]);
        }
    }
    p
}

const SINC_HALF: isize = 32;

fn add_fractional_impulse(ir: &mut [f64], delay: f64, gain: f64) {
    let center = delay.floor() as isize;
    let frac = delay - delay.floor();
    for t in -SINC_HALF..=SINC_HALF {
        let n = center + t;
        if n < 0 || n as usize >= ir.len() {
            continue;
        }
        let x = t as f64 - frac;
        let sinc = if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) };
        let w = 0.5 + 0.5 * (PI * x / (SINC_HALF as f64 + 1.0)).cos();
        ir[n as usize] += gain * sinc * w;
    }
}

/// Synthetic responses `(reverberant, direct)` per microphone for a source at
/// `azimuth_deg` (0 = front, positive to the right).
pub fn synthetic_irs(
    cfg: &SyntheticIrConfig,
    azimuth_deg: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if cfg.mic_positions.is_empty() {
        return Err(Error::InvalidConfig("no microphone positions".into()));
    }
    if cfg.t60 < 0.0 || cfg.speed_of_sound <= 0.0 {
        return Err(Error::InvalidConfig("t60 must be >= 0 and speed of sound > 0".into()));
    }
    let fs = sample_rate as f64;
    let theta = azimuth_deg.to_radians();
    let dir = [theta.sin(), theta.cos()];
    let max_offset = cfg
        .mic_positions
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
        .fold(0.0, f64::max)
        / cfg.speed_of_sound
        * fs;
    let direct_center = cfg.base_delay * fs;
    if direct_center < max_offset + SINC_HALF as f64 {
        return Err(Error::InvalidConfig(format!(
            "base delay {} s too short for the array aperture",
            cfg.base_delay
        )));
    }
    let tail_len = (cfg.t60 * fs).ceil() as usize;
    let len = (direct_center + max_offset) as usize + SINC_HALF as usize + 1 + tail_len
        + (cfg.tail_onset * fs) as usize;
    let decay = 3.0 * 10f64.ln() / (cfg.t60.max(1e-9) * fs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut reverberant = Vec::with_capacity(cfg.mic_positions.len());
    let mut direct = Vec::with_capacity(cfg.mic_positions.len());
    for p in &cfg.mic_positions {
        // plane wave: mics closer to the source receive it earlier
        let delay = direct_center - (p[0] * dir[0] + p[1] * dir[1]) / cfg.speed_of_sound * fs;
        let shadowed = p[0] * dir[0] < 0.0;
        let gain = if shadowed {
            10f64.powf(-cfg.head_shadow_db / 20.0 * (p[0] * dir[0]).abs() / 0.08)
        } else {
            1.0
        };
        let mut d = vec![0.0; len];
        add_fractional_impulse(&mut d, delay, gain);
        let mut r = d.clone();
        if tail_len > 0 {
            let onset = (delay + cfg.tail_onset * fs).ceil() as usize;
            let tail: Vec<f64> = (0..tail_len)
                .map(|n| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    g * (-decay * n as f64).exp()
                })
                .collect();
            let tail_energy: f64 = tail.iter().map(|v| v * v).sum();
            let direct_energy: f64 = d.iter().map(|v| v * v).sum();
            let scale = (direct_energy / tail_energy * 10f64.powf(-cfg.drr_db / 10.0)).sqrt();
            for (n, t) in tail.into_iter().enumerate() {
                if onset + n < len {
                    r[onset + n] += scale * t;
                }
            }
        }
        reverberant.push(r);
        direct.push(d);
    }
    Ok((reverberant, direct))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseShape {
    #[default]
    White,
    /// Flat below 500 Hz, falling 6 dB per octave above.
    SpeechShaped,
}

impl NoiseShape {
    /// Target power response at `hz`.
    pub fn power_response(self, hz: f64) -> f64 {
        match self {
            NoiseShape::White => 1.0,
            NoiseShape::SpeechShaped => 1.0 / (1.0 + (hz / 500.0).powi(2)),
        }
    }
}

/// Mutually independent, zero-mean, unit-variance noise channels with the
/// requested long-term spectrum.
pub fn generate_decorrelated_noise(
    channels: usize,
    len: usize,
    shape: NoiseShape,
    sample_rate: u32,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..channels).map(|_| rng.random()).collect();
    par::map_slice(&seeds, |&s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let white: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        let shaped = match shape {
            NoiseShape::White => white,
            _ => shape_spectrum(&white, shape, sample_rate),
        };
        normalize_power(shaped)
    })
}

fn shape_spectrum(x: &[f64], shape: NoiseShape, sample_rate: u32) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut planner = FftPlanner::new();
    let mut buf: Vec<C64> = x.iter().map(|&v| C64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (f, z) in buf.iter_mut().enumerate() {
        let bin = f.min(n - f);
        let hz = bin as f64 * sample_rate as f64 / n as f64;
        *z *= shape.power_response(hz).sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|z| z.re / n as f64).collect()
}

fn normalize_power(mut x: Vec<f64>) -> Vec<f64> {
    let n = x.len().max(1) as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 0.0 {
        let s = 1.0 / var.sqrt();
        for v in &mut x {
            *v = (*v - mean) * s;
        }
    }
    x
}

/// Speech-like test signal: a jittered glottal pulse train (or noise for
/// unvoiced syllables) through three moving formant resonators, with
/// syllabic amplitude modulation and pauses. Deterministic given `seed`.
pub fn synthetic_speech(len: usize, sample_rate: u32, base_f0: f64, seed: u64) -> Vec<f64> {
    let fs = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut out = vec![0.0; len];
    let mut t = (rng.random::<f64>() * 0.2 * fs) as usize;
    let mut since_pause = 0.0;
    let mut resonators = [Resonator::default(); 3];
    let mut tilt = 0.0f64;
    let mut next_pulse = 0.0f64;
    while t < len {
        let dur = ((0.08 + 0.2 * rng.random::<f64>()) * fs) as usize;
        let f0_start = base_f0 * (0.8 + 0.4 * rng.random::<f64>());
        let f0_end = f0_start * (0.8 + 0.4 * rng.random::<f64>());
        let vibrato_hz = 4.0 + 4.0 * rng.random::<f64>();
        let formants: Vec<(f64, f64, f64)> = [(300.0, 550.0, 80.0), (900.0, 1400.0, 110.0), (2300.0, 800.0, 180.0)]
            .iter()
            .map(|&(lo, span, bw)| {
                (
                    lo + span * rng.random::<f64>(),
                    lo + span * rng.random::<f64>(),
                    bw * (0.8 + 0.4 * rng.random::<f64>()),
                )
            })
            .collect();
        let amp = 0.5 + rng.random::<f64>();
        let voiced = rng.random::<f64>() < 0.8;
        next_pulse = next_pulse.max(t as f64);
        for n in 0..dur.min(len - t) {
            let u = n as f64 / dur as f64;
            let env = amp * (PI * u).sin().powi(2);
            let excitation = if voiced {
                let f0 = (f0_start + (f0_end - f0_start) * u)
                    * (1.0 + 0.02 * (2.0 * PI * vibrato_hz * n as f64 / fs).sin());
                let mut e = 0.05 * normal(&mut rng);
                if (t + n) as f64 >= next_pulse {
                    e += 1.0 + 0.1 * normal(&mut rng);
                    next_pulse += fs / f0 * (1.0 + 0.015 * normal(&mut rng));
                }
                // glottal spectral tilt
                tilt = 0.9 * tilt + e;
                tilt
            } else {
                0.3 * normal(&mut rng)
            };
            let mut v = excitation;
            for (r, &(start, end, bw)) in resonators.iter_mut().zip(&formants) {
                v = r.step(v, start + (end - start) * u, bw, fs);
            }
            out[t + n] += env * v;
        }
        t += dur;
        since_pause += dur as f64 / fs;
        let gap = if since_pause > 1.5 + 2.0 * rng.random::<f64>() {
            since_pause = 0.0;
            0.3 + 0.9 * rng.random::<f64>()
        } else {
            0.03 + 0.1 * rng.random::<f64>()
        };
        t += (gap * fs) as usize;
    }
    // lip radiation
    for n in (1..len).rev() {
        out[n] -= out[n - 1];
    }
    let peak = out.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if peak > 0.0 {
        for v in &mut out {
            *v *= 0.5 / peak;
        }
    }
    out
}

/// Two-pole resonator with unit gain at its center frequency.
#[derive(Debug, Clone, Copy, Default)]
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn step(&mut self, x: f64, hz: f64, bandwidth: f64, fs: f64) -> f64 {
        let r = (-PI * bandwidth / fs).exp();
        let theta = 2.0 * PI * hz / fs;
        let a1 = 2.0 * r * theta.cos();
        let a2 = r * r;
        let y = (1.0 - r) * x + a1 * self.y1 - a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Recipe for a synthetic multi-speaker scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneConfig {
    pub sample_rate: u32,
    pub duration_s: f64,
    /// Source directions in degrees, one per speaker.
    pub azimuths: Vec<f64>,
    /// Fundamental frequency of each speaker's voice.
    pub base_f0: Vec<f64>,
    pub ir: SyntheticIrConfig,
    pub noise: NoiseShape,
    /// Pauses in the dry sources are shortened to this many seconds.
    pub max_pause: f64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            duration_s: 30.0,
            azimuths: vec![-45.0, 45.0],
            base_f0: vec![120.0, 200.0],
            ir: SyntheticIrConfig::default(),
            noise: NoiseShape::SpeechShaped,
            max_pause: 0.5,
        }
    }
}

/// Builds a scene of synthetic speech, synthetic room responses and
/// decorrelated noise. Every random draw derives from `seed`.
pub fn synthetic_scene(cfg: &SyntheticSceneConfig, seed: u64) -> Result<AcousticScene> {
    if cfg.azimuths.is_empty() || cfg.azimuths.len() != cfg.base_f0.len() {
        return Err(Error::InvalidConfig(
            "need one base f0 per source direction".into(),
        ));
    }
    if !(cfg.duration_s > 0.0) {
        return Err(Error::InvalidConfig("duration must be > 0".into()));
    }
    let fs = cfg.sample_rate;
    let len = (cfg.duration_s * fs as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sources = Vec::new();
    let mut reverberant = Vec::new();
    let mut direct = Vec::new();
    for (&azimuth, &f0) in cfg.azimuths.iter().zip(&cfg.base_f0) {
        // generate extra material so the shortened source still fills `len`
        let mut dry = shorten_pauses(&synthetic_speech(2 * len, fs, f0, rng.random()), fs, cfg.max_pause)?;
        dry.resize(len, 0.0);
        sources.push(Signal {
            sample_rate: fs,
            samples: dry,
        });
        let (r, d) = synthetic_irs(&cfg.ir, azimuth, fs, rng.random())?;
        reverberant.push(r);
        direct.push(d);
    }
    let noise = generate_decorrelated_noise(
        cfg.ir.mic_positions.len(),
        len,
        cfg.noise,
        fs,
        rng.random(),
    );
    Ok(AcousticScene {
        sample_rate: fs,
        sources,
        irs: ImpulseResponses {
            sample_rate: fs,
            reverberant,
            direct,
        },
        noise: Waveform {
            sample_rate: fs,
            channels: noise,
        },
    })
}

const PAUSE_WINDOW_S: f64 = 0.020;
const PAUSE_THRESHOLD_DB: f64 = 40.0;
const PAUSE_PERCENTILE: f64 = 0.95;
const CROSSFADE_S: f64 = 0.010;

/// Truncates every silent run longer than `max_pause` seconds to exactly
/// `max_pause`, joining the kept halves with a raised-cosine cross-fade.
///
/// A sample is silent when it lies inside some 20 ms window whose RMS is at
/// least 40 dB below the 95th percentile of 20 ms frame RMS values.
pub fn shorten_pauses(signal: &[f64], sample_rate: u32, max_pause: f64) -> Result<Vec<f64>> {
    if !(max_pause > 0.0) {
        return Err(Error::InvalidConfig(format!("max pause {max_pause} must be > 0")));
    }
    if signal.is_empty() {
        return Ok(Vec::new());
    }
    let fs = sample_rate as f64;
    let keep = (max_pause * fs).round() as usize;
    let win = ((PAUSE_WINDOW_S * fs).round() as usize).max(1);
    let fade = ((CROSSFADE_S * fs).round() as usize).min(keep / 2);
    // removing silence raises the percentile threshold, so repeat until
    // nothing changes; every effective pass shortens the signal
    let mut current = signal.to_vec();
    loop {
        let next = shorten_pass(&current, keep, win, fade);
        if next.len() == current.len() {
            return Ok(current);
        }
        current = next;
    }
}

fn shorten_pass(signal: &[f64], keep: usize, win: usize, fade: usize) -> Vec<f64> {
    let silent = silence_mask(signal, win);
    let mut out = Vec::with_capacity(signal.len());
    let mut n = 0;
    while n < signal.len() {
        if !silent[n] {
            out.push(signal[n]);
            n += 1;
            continue;
        }
        let end = silent[n..].iter().position(|s| !s).map_or(signal.len(), |p| n + p);
        let run = &signal[n..end];
        if run.len() <= keep {
            out.extend_from_slice(run);
        } else {
            // keep the head, then fade from the head into the end of the run
            let head = keep - fade;
            out.extend_from_slice(&run[..head]);
            let tail_start = run.len() - fade;
            for i in 0..fade {
                let w = 0.5 - 0.5 * (PI * (i as f64 + 0.5) / fade as f64).cos();
                out.push((1.0 - w) * run[head + i] + w * run[tail_start + i]);
            }
        }
        n = end;
    }
    out
}

fn silence_mask(signal: &[f64], win: usize) -> Vec<bool> {
    let mut frame_rms: Vec<f64> = signal
        .chunks(win)
        .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64).sqrt())
        .collect();
    frame_rms.sort_by(f64::total_cmp);
    let idx = ((frame_rms.len() - 1) as f64 * PAUSE_PERCENTILE).round() as usize;
    let threshold = frame_rms[idx] * 10f64.powf(-PAUSE_THRESHOLD_DB / 20.0);

    let mut prefix = Vec::with_capacity(signal.len() + 1);
    prefix.push(0.0);
    for v in signal {
        prefix.push(prefix.last().unwrap() + v * v);
    }
    // a sample is silent when some quiet window covers it
    let n = signal.len();
    let win = win.min(n);
    let mut cover = vec![0i64; n + 1];
    for start in 0..=n - win {
        let energy = (prefix[start + win] - prefix[start]).max(0.0);
        if (energy / win as f64).sqrt() <= threshold {
            cover[start] += 1;
            cover[start + win] -= 1;
        }
    }
    let mut depth = 0;
    cover[..n]
        .iter()
        .map(|c| {
            depth += c;
            depth > 0
        })
        .collect()
}

/// Outcome of a noise-gain search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseCalibration {
    pub gain: f64,
    pub achieved_db: f64,
    /// The target equals the (practically noiseless) lower gain bound.
    pub at_lower_bound: bool,
}

pub const GAIN_BOUNDS: (f64, f64) = (1e-6, 1e6);
pub const CALIBRATION_TOLERANCE_DB: f64 = 0.1;

/// Finds the noise gain at which `measure(rendered scene)` equals
/// `target_db` within 0.1 dB, by bisection over log-gain.
pub fn calibrate_noise_gain_with(
    components: &SceneComponents,
    target_db: f64,
    measure: impl Fn(&RenderedScene) -> Result<f64>,
) -> Result<NoiseCalibration> {
    if components.noise.iter().all(|c| c.iter().all(|&v| v == 0.0)) {
        return Err(Error::InvalidConfig("noise is identically zero".into()));
    }
    let eval = |g: f64| measure(&components.mix(g));
    let (lo, hi) = GAIN_BOUNDS;
    let at_lo = eval(lo)?;
    let at_hi = eval(hi)?;
    if (at_lo - target_db).abs() <= CALIBRATION_TOLERANCE_DB {
        return Ok(NoiseCalibration {
            gain: lo,
            achieved_db: at_lo,
            at_lower_bound: true,
        });
    }
    if target_db > at_lo || target_db < at_hi - CALIBRATION_TOLERANCE_DB {
        return Err(Error::UnreachableTarget {
            target: target_db,
            lo,
            hi,
            best: at_lo,
            worst: at_hi,
        });
    }
    let (mut a, mut b) = (lo.ln(), hi.ln());
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        let v = eval(mid.exp())?;
        if (v - target_db).abs() <= CALIBRATION_TOLERANCE_DB {
            return Ok(NoiseCalibration {
                gain: mid.exp(),
                achieved_db: v,
                at_lower_bound: false,
            });
        }
        if v > target_db {
            a = mid;
        } else {
            b = mid;
        }
    }
    Err(Error::UnreachableTarget {
        target: target_db,
        lo,
        hi,
        best: at_lo,
        worst: at_hi,
    })
}

/// Noise gain giving `reference_source` an input fwSSNR of `target_db`.
pub fn calibrate_noise_gain(
    scene: &AcousticScene,
    target_db: f64,
    reference_source: usize,
    reference_mic: usize,
    cfg: &FwssnrConfig,
) -> Result<NoiseCalibration> {
    let components = scene.components()?;
    calibrate_noise_gain_with(&components, target_db, |r| {
        metrics::input_fwssnr(r, reference_source, reference_mic, cfg).map(|v| v.value)
    })
}

/// The three acoustic conditions of the evaluation, each with its average
/// input fwSSNR over speakers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    AnechoicNoisy,
    Reverberant,
    ReverberantNoisy,
}

impl Condition {
    pub const ALL: [Condition; 3] = [
        Condition::AnechoicNoisy,
        Condition::Reverberant,
        Condition::ReverberantNoisy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::AnechoicNoisy => "anechoic-noisy",
            Condition::Reverberant => "reverberant",
            Condition::ReverberantNoisy => "reverberant-noisy",
        }
    }

    pub fn target_db(self) -> f64 {
        match self {
            Condition::AnechoicNoisy => 2.9,
            Condition::Reverberant => 3.5,
            Condition::ReverberantNoisy => 0.5,
        }
    }

    pub fn noisy(self) -> bool {
        self != Condition::Reverberant
    }

    /// The scene recipe with this condition's room.
    pub fn scene_config(self, base: &SyntheticSceneConfig) -> SyntheticSceneConfig {
        let mut cfg = base.clone();
        if self == Condition::AnechoicNoisy {
            cfg.ir.t60 = 0.0;
        }
        cfg
    }
}

/// A rendered condition and how its noise level was set.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionScene {
    pub condition: Condition,
    pub scene: AcousticScene,
    pub rendered: RenderedScene,
    pub noise_gain: f64,
    /// Average input fwSSNR over speakers as rendered.
    pub achieved_db: f64,
    /// Same quantity without noise.
    pub noiseless_db: f64,
    pub target_met: bool,
}

/// Input fwSSNR averaged over all speakers.
pub fn mean_input_fwssnr(
    rendered: &RenderedScene,
    reference_mic: usize,
    cfg: &FwssnrConfig,
) -> Result<f64> {
    let n = rendered.num_sources();
    let mut sum = 0.0;
    for i in 0..n {
        sum += metrics::input_fwssnr(rendered, i, reference_mic, cfg)?.value;
    }
    Ok(sum / n as f64)
}

/// Synthesizes `condition` and sets the noise level to its target.
///
/// Noisy conditions must reach the target. The reverberant condition is
/// noise-free by design; noise is added only if reverberation alone leaves
/// the input above the target, otherwise the noiseless scene is kept and
/// `target_met` is false.
pub fn condition_scene(
    base: &SyntheticSceneConfig,
    condition: Condition,
    seed: u64,
    reference_mic: usize,
    metric: &FwssnrConfig,
) -> Result<ConditionScene> {
    let scene = synthetic_scene(&condition.scene_config(base), seed)?;
    let components = scene.components()?;
    let measure = |r: &RenderedScene| mean_input_fwssnr(r, reference_mic, metric);
    let noiseless = components.mix(0.0);
    let noiseless_db = measure(&noiseless)?;
    let target = condition.target_db();
    let (rendered, noise_gain, achieved_db, target_met) =
        if !condition.noisy() && noiseless_db <= target + CALIBRATION_TOLERANCE_DB {
            let met = (noiseless_db - target).abs() <= CALIBRATION_TOLERANCE_DB;
            if !met {
                log::warn!(
                    "{}: noiseless input fwSSNR {noiseless_db:.2} dB is below the {target} dB target",
                    condition.name()
                );
            }
            (noiseless, 0.0, noiseless_db, met)
        } else {
            let cal = calibrate_noise_gain_with(&components, target, measure)?;
            (components.mix(cal.gain), cal.gain, cal.achieved_db, true)
        };
    Ok(ConditionScene {
        condition,
        scene,
        rendered,
        noise_gain,
        achieved_db,
        noiseless_db,
        target_met,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mono(samples: Vec<f64>) -> Signal {
        Signal {
            sample_rate: 16000,
            samples,
        }
    }

    fn impulse(len: usize, at: usize) -> Vec<f64> {
        let mut v = vec![0.0; len];
        v[at] = 1.0;
        v
    }

    fn two_source_scene(mics: usize) -> AcousticScene {
        let s1 = synthetic_speech(8000, 16000, 120.0, 1);
        let s2 = synthetic_speech(8000, 16000, 190.0, 2);
        AcousticScene {
            sample_rate: 16000,
            sources: vec![mono(s1), mono(s2)],
            irs: ImpulseResponses {
                sample_rate: 16000,
                reverberant: vec![vec![impulse(4, 0); mics]; 2],
                direct: vec![vec![impulse(4, 0); mics]; 2],
            },
            noise: Waveform {
                sample_rate: 16000,
                channels: generate_decorrelated_noise(mics, 8000, NoiseShape::White, 16000, 3),
            },
        }
    }

    fn direct_convolution(x: &[f64], h: &[f64], len: usize) -> Vec<f64> {
        (0..len)
            .map(|n| {
                (0..h.len())
                    .filter(|&k| k <= n && n - k < x.len())
                    .map(|k| h[k] * x[n - k])
                    .sum()
            })
            .collect()
    }

    #[test]
    fn identity_irs_sum_sources() {
        let scene = two_source_scene(2);
        let r = render(&scene, 0.0).unwrap();
        for m in 0..2 {
            for n in 0..8000 {
                let expect = scene.sources[0].samples[n] + scene.sources[1].samples[n];
                assert!((r.mics[m][n] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn delayed_impulse_shifts() {
        let mut scene = two_source_scene(1);
        scene.sources.truncate(1);
        scene.irs.reverberant = vec![vec![impulse(30, 25)]];
        scene.irs.direct = vec![vec![impulse(30, 25)]];
        let r = render(&scene, 0.0).unwrap();
        let s = &scene.sources[0].samples;
        for n in 25..8000 {
            assert!((r.reverberant[0][0][n] - s[n - 25]).abs() < 1e-12);
        }
        assert!(r.reverberant[0][0][..25].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn fft_convolution_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..3000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let h: Vec<f64> = (0..700)
            .map(|n| Distribution::<f64>::sample(&StandardNormal, &mut rng) * (-(n as f64) / 150.0).exp())
            .collect();
        let fast = fft_convolve(&x, &h, 3000);
        let slow = direct_convolution(&x, &h, 3000);
        let scale = slow.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn additivity_is_exact() {
        let mut scene = two_source_scene(3);
        let (r, d) = synthetic_irs(
            &SyntheticIrConfig {
                mic_positions: binaural_positions()[..3].to_vec(),
                t60: 0.05,
                ..Default::default()
            },
            30.0,
            16000,
            9,
        )
        .unwrap();
        scene.irs.reverberant = vec![r.clone(), r];
        scene.irs.direct = vec![d.clone(), d];
        let out = render(&scene, 0.7).unwrap();
        for m in 0..3 {
            for n in 0..out.len() {
                let sum = out.reverberant[0][m][n] + out.reverberant[1][m][n] + out.noise[m][n];
                assert_eq!(out.mics[m][n].to_bits(), sum.to_bits());
            }
        }
    }

    #[test]
    fn render_is_linear_in_each_source() {
        let scene = two_source_scene(2);
        let base = render(&scene, 0.0).unwrap();
        let mut scaled = scene.clone();
        for v in &mut scaled.sources[1].samples {
            *v *= 4.0;
        }
        let out = render(&scaled, 0.0).unwrap();
        for m in 0..2 {
            for (a, b) in out.reverberant[1][m].iter().zip(&base.reverberant[1][m]) {
                assert_eq!(a.to_bits(), (4.0 * b).to_bits());
            }
            assert_eq!(out.reverberant[0][m], base.reverberant[0][m]);
        }
    }

    #[test]
    fn rate_mismatch_is_rejected() {
        let mut scene = two_source_scene(2);
        scene.sources[1].sample_rate = 8000;
        assert!(matches!(
            render(&scene, 1.0),
            Err(Error::SampleRateMismatch { found: 8000, .. })
        ));
        let mut scene = two_source_scene(2);
        scene.noise.sample_rate = 44100;
        assert!(matches!(render(&scene, 1.0), Err(Error::SampleRateMismatch { .. })));
    }

    #[test]
    fn pause_shortening_cases() {
        let fs = 16000;
        let speech = synthetic_speech(16000, fs, 150.0, 4);
        // remove the generator's own pauses by using dense noise as "speech"
        let burst: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            (0..16000).map(|_| StandardNormal.sample(&mut rng)).collect()
        };
        assert_eq!(shorten_pauses(&burst, fs, 0.5).unwrap(), burst);

        let mut x = burst.clone();
        x.extend(vec![0.0; 32000]);
        x.extend_from_slice(&burst);
        let y = shorten_pauses(&x, fs, 0.5).unwrap();
        assert_eq!(x.len() - y.len(), 24000);

        let silence = vec![0.0; 48000];
        assert_eq!(shorten_pauses(&silence, fs, 0.5).unwrap().len(), 8000);
        assert!(shorten_pauses(&[], fs, 0.5).unwrap().is_empty());
        assert!(shorten_pauses(&speech, fs, 0.0).is_err());
    }

    #[test]
    fn pause_shortening_is_idempotent() {
        for seed in 0..5 {
            let x = synthetic_speech(64000, 16000, 140.0, seed);
            let once = shorten_pauses(&x, 16000, 0.2).unwrap();
            let twice = shorten_pauses(&once, 16000, 0.2).unwrap();
            assert!(once == twice, "seed {seed}");
        }
    }

    #[test]
    fn white_noise_is_decorrelated_and_zero_mean() {
        let n = generate_decorrelated_noise(2, 160000, NoiseShape::White, 16000, 11);
        let rho: f64 = n[0].iter().zip(&n[1]).map(|(a, b)| a * b).sum::<f64>() / 160000.0;
        assert!(rho.abs() <= 0.05);
        for c in &n {
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            assert!(mean.abs() <= 3.0 / (c.len() as f64).sqrt());
        }
    }

    #[test]
    fn noise_is_seeded() {
        let a = generate_decorrelated_noise(3, 1000, NoiseShape::SpeechShaped, 16000, 1);
        let b = generate_decorrelated_noise(3, 1000, NoiseShape::SpeechShaped, 16000, 1);
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_irs_shape() {
        let cfg = SyntheticIrConfig::default();
        let (rev, dir) = synthetic_irs(&cfg, -45.0, 16000, 1).unwrap();
        assert_eq!(rev.len(), 6);
        let e = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>();
        // left source: left mics are louder than right mics
        assert!(e(&dir[0]) > e(&dir[3]));
        let tail = e(&rev[0]) - e(&dir[0]);
        assert!((10.0 * (e(&dir[0]) / tail).log10() - cfg.drr_db).abs() < 1.0);
        let anechoic = SyntheticIrConfig {
            t60: 0.0,
            ..cfg
        };
        let (rev, dir) = synthetic_irs(&anechoic, 45.0, 16000, 1).unwrap();
        assert_eq!(rev, dir);
    }
}
