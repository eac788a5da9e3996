//! Envelope-correlation auditory attention decoding.
//!
//! A linear backward model maps lagged, z-scored EEG to the attended speech
//! envelope; each trial is assigned to the candidate envelope that correlates
//! best with the reconstruction.

use std::f64::consts::{PI, SQRT_2};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::real_spd_solve;
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub sample_rate: f64,
    pub samples: Vec<f64>,
    #[serde(default)]
    pub source: String,
}

impl Envelope {
    pub fn new(sample_rate: f64, samples: Vec<f64>) -> Self {
        Self {
            sample_rate,
            samples,
            source: String::new(),
        }
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn slice(&self, start: usize, len: usize) -> Envelope {
        Envelope {
            sample_rate: self.sample_rate,
            samples: self.samples[start..start + len].to_vec(),
            source: self.source.clone(),
        }
    }
}

/// EEG recording, one row per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eeg {
    pub sample_rate: f64,
    pub channels: Vec<Vec<f64>>,
}

impl Eeg {
    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if self.channels.is_empty() || n == 0 {
            return Err(Error::Empty("EEG has no samples".into()));
        }
        if self.channels.iter().any(|c| c.len() != n) {
            return Err(Error::DimensionMismatch("EEG channels differ in length".into()));
        }
        Ok(())
    }

    pub fn slice(&self, start: usize, len: usize) -> Eeg {
        Eeg {
            sample_rate: self.sample_rate,
            channels: self
                .channels
                .iter()
                .map(|c| c[start..start + len].to_vec())
                .collect(),
        }
    }

    /// Zero-mean, unit-variance channels; constant channels become zero.
    pub fn zscored(&self) -> Eeg {
        let channels = self
            .channels
            .iter()
            .map(|c| {
                let n = c.len().max(1) as f64;
                let mean = c.iter().sum::<f64>() / n;
                let var = c.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                if var > 0.0 {
                    let s = var.sqrt();
                    c.iter().map(|x| (x - mean) / s).collect()
                } else {
                    vec![0.0; c.len()]
                }
            })
            .collect();
        Eeg {
            sample_rate: self.sample_rate,
            channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AadConfig {
    pub envelope_rate: f64,
    pub cutoff_hz: f64,
    /// Decoder lag span; EEG trails the stimulus.
    pub lag_ms: (f64, f64),
    /// Ridge relative to the mean feature power.
    pub ridge: f64,
    pub trial_s: f64,
}

impl Default for AadConfig {
    fn default() -> Self {
        Self {
            envelope_rate: 64.0,
            cutoff_hz: 8.0,
            lag_ms: (0.0, 250.0),
            ridge: 1e2,
            trial_s: 30.0,
        }
    }
}

/// Second-order Butterworth low-pass, bilinear transform with prewarping.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn butter_lowpass(cutoff: f64, rate: f64) -> Self {
        let k = (PI * cutoff / rate).tan();
        let norm = 1.0 / (1.0 + SQRT_2 * k + k * k);
        let b0 = k * k * norm;
        Self {
            b: [b0, 2.0 * b0, b0],
            a: [2.0 * (k * k - 1.0) * norm, (1.0 - SQRT_2 * k + k * k) * norm],
        }
    }

    /// Transposed direct form II, state initialized to the steady state of `x[0]`.
    fn run(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let mut z2 = (b2 - a2) * x0;
        let mut z1 = (b1 - a1) * x0 + z2;
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + z1;
            z1 = b1 * xin - a1 * y + z2;
            z2 = b2 * xin - a2 * y;
            *v = y;
        }
    }

    /// Forward-backward filtering with odd reflection padding.
    fn filtfilt(&self, x: &[f64], pad: usize) -> Vec<f64> {
        let n = x.len();
        let pad = pad.min(n.saturating_sub(1));
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.run(&mut ext);
        ext.reverse();
        self.run(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Linear interpolation onto a grid of `floor(len * rate_out / rate_in)` points.
fn resample_linear(x: &[f64], rate_in: f64, rate_out: f64) -> Vec<f64> {
    if rate_in == rate_out {
        return x.to_vec();
    }
    let step = rate_in / rate_out;
    let n_out = ((x.len() as f64 / step) + 1e-9).floor().max(1.0) as usize;
    (0..n_out)
        .map(|l| {
            let pos = l as f64 * step;
            let i = pos.floor() as usize;
            if i + 1 >= x.len() {
                return x[x.len() - 1];
            }
            let frac = pos - i as f64;
            x[i] * (1.0 - frac) + x[i + 1] * frac
        })
        .collect()
}

/// Rectify, zero-phase 8 Hz low-pass, resample.
pub fn extract_envelope(signal: &[f64], rate_in: f64, rate_out: f64) -> Result<Envelope> {
    extract_envelope_with(signal, rate_in, rate_out, AadConfig::default().cutoff_hz)
}

pub fn extract_envelope_with(
    signal: &[f64],
    rate_in: f64,
    rate_out: f64,
    cutoff_hz: f64,
) -> Result<Envelope> {
    if signal.is_empty() {
        return Err(Error::Empty("signal for envelope extraction".into()));
    }
    if !(rate_out > 0.0 && rate_out <= rate_in) {
        return Err(Error::InvalidConfig(format!(
            "envelope rate {rate_out} Hz must be in (0, {rate_in}] Hz"
        )));
    }
    if !(cutoff_hz > 0.0 && cutoff_hz < rate_in / 2.0) {
        return Err(Error::InvalidConfig(format!(
            "cutoff {cutoff_hz} Hz must be below Nyquist of {rate_in} Hz"
        )));
    }
    let rectified: Vec<f64> = signal.iter().map(|x| x.abs()).collect();
    let filter = Biquad::butter_lowpass(cutoff_hz, rate_in);
    // a few time constants of the filter
    let pad = (3.0 * rate_in / cutoff_hz).ceil() as usize;
    let smooth = filter.filtfilt(&rectified, pad);
    let samples = resample_linear(&smooth, rate_in, rate_out)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    Ok(Envelope::new(rate_out, samples))
}

/// Spatio-temporal backward model: `ê[t] = Σ_c Σ_τ w[c, τ] eeg_c[t + lag_min + τ]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub channels: usize,
    pub lags: usize,
    pub lag_min: usize,
    pub sample_rate: f64,
    pub lag_range_ms: (f64, f64),
    /// Row-major C × T.
    pub weights: Vec<f64>,
}

impl Decoder {
    pub fn weight(&self, c: usize, tau: usize) -> f64 {
        self.weights[c * self.lags + tau]
    }

    pub fn lag_max(&self) -> usize {
        self.lag_min + self.lags - 1
    }

    /// Samples lost at the end of a reconstruction.
    pub fn valid_len(&self, eeg_len: usize) -> usize {
        eeg_len.saturating_sub(self.lag_max())
    }
}

fn lag_samples(lag_ms: (f64, f64), rate: f64) -> Result<(usize, usize)> {
    let (lo, hi) = lag_ms;
    if !(lo >= 0.0 && hi >= lo) {
        return Err(Error::InvalidConfig(format!(
            "lag range must satisfy 0 <= lo <= hi, got {lo}..{hi} ms"
        )));
    }
    let lo = (lo * rate / 1000.0).round() as usize;
    let hi = (hi * rate / 1000.0).round() as usize;
    Ok((lo, hi - lo + 1))
}

/// One training example: an EEG segment and the envelope it should reconstruct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub eeg: Eeg,
    pub candidates: Vec<Envelope>,
    pub attended: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    pub trial_s: f64,
    pub trials: Vec<Trial>,
}

/// Normal equations of one trial.
#[derive(Debug, Clone)]
struct Gram {
    xtx: Vec<f64>,
    xty: Vec<f64>,
    yty: f64,
    rows: usize,
}

impl Gram {
    fn zeros(n: usize) -> Self {
        Self {
            xtx: vec![0.0; n * n],
            xty: vec![0.0; n],
            yty: 0.0,
            rows: 0,
        }
    }

    fn add(&mut self, other: &Gram, sign: f64) {
        for (a, b) in self.xtx.iter_mut().zip(&other.xtx) {
            *a += sign * b;
        }
        for (a, b) in self.xty.iter_mut().zip(&other.xty) {
            *a += sign * b;
        }
        self.yty += sign * other.yty;
        if sign > 0.0 {
            self.rows += other.rows;
        } else {
            self.rows -= other.rows;
        }
    }
}

fn gram(eeg: &Eeg, target: &[f64], lag_min: usize, lags: usize) -> Result<Gram> {
    eeg.check()?;
    let z = eeg.zscored();
    let c = z.num_channels();
    let n = c * lags;
    let rows = z.len().saturating_sub(lag_min + lags - 1);
    if rows == 0 {
        return Err(Error::SignalTooShort {
            len: z.len(),
            needed: lag_min + lags,
        });
    }
    if target.len() < rows {
        return Err(Error::DimensionMismatch(format!(
            "target of {} samples for {rows} decoder rows",
            target.len()
        )));
    }
    let mut g = Gram::zeros(n);
    let mut x = vec![0.0; n];
    for t in 0..rows {
        for ch in 0..c {
            let row = &z.channels[ch][t + lag_min..t + lag_min + lags];
            x[ch * lags..(ch + 1) * lags].copy_from_slice(row);
        }
        let y = target[t];
        for i in 0..n {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            g.xty[i] += xi * y;
            let r = &mut g.xtx[i * n..i * n + n];
            for j in i..n {
                r[j] += xi * x[j];
            }
        }
        g.yty += y * y;
    }
    for i in 0..n {
        for j in 0..i {
            g.xtx[i * n + j] = g.xtx[j * n + i];
        }
    }
    g.rows = rows;
    Ok(g)
}

fn solve_gram(g: &Gram, ridge: f64) -> Result<Vec<f64>> {
    let n = g.xty.len();
    let power = (0..n).map(|i| g.xtx[i * n + i]).sum::<f64>() / (n as f64 * g.rows.max(1) as f64);
    let lambda = ridge * power;
    let mut a = g.xtx.clone();
    for i in 0..n {
        a[i * n + i] += lambda;
    }
    real_spd_solve(&a, n, &g.xty)
}

fn check_training(eeg_trials: &[Eeg], envelopes: &[Envelope]) -> Result<usize> {
    let Some(first) = eeg_trials.first() else {
        return Err(Error::Empty("no training trials".into()));
    };
    if eeg_trials.len() != envelopes.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} EEG trials for {} envelopes",
            eeg_trials.len(),
            envelopes.len()
        )));
    }
    let c = first.num_channels();
    for (e, env) in eeg_trials.iter().zip(envelopes) {
        if e.num_channels() != c {
            return Err(Error::DimensionMismatch("trials differ in channel count".into()));
        }
        if e.len() != env.len() {
            return Err(Error::DimensionMismatch(format!(
                "EEG of {} samples paired with envelope of {}",
                e.len(),
                env.len()
            )));
        }
        if e.sample_rate != first.sample_rate || env.sample_rate != first.sample_rate {
            return Err(Error::InvalidConfig(format!(
                "trial rates differ: EEG {} Hz, envelope {} Hz, expected {} Hz",
                e.sample_rate, env.sample_rate, first.sample_rate
            )));
        }
    }
    Ok(c)
}

/// Ridge regression of the attended envelope on lagged EEG (each trial z-scored).
///
/// `ridge` is relative to the mean feature power; zero gives plain least squares.
pub fn train_decoder(
    eeg_trials: &[Eeg],
    attended: &[Envelope],
    lag_ms: (f64, f64),
    ridge: f64,
) -> Result<Decoder> {
    let c = check_training(eeg_trials, attended)?;
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidConfig(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    let rate = eeg_trials[0].sample_rate;
    let (lag_min, lags) = lag_samples(lag_ms, rate)?;
    let grams = par::map_range(eeg_trials.len(), |i| {
        gram(&eeg_trials[i], &attended[i].samples, lag_min, lags)
    });
    let mut total = Gram::zeros(c * lags);
    for g in grams {
        total.add(&g?, 1.0);
    }
    let weights = solve_gram(&total, ridge)?;
    Ok(Decoder {
        channels: c,
        lags,
        lag_min,
        sample_rate: rate,
        lag_range_ms: lag_ms,
        weights,
    })
}

/// Residual sum of squares and squared weight norm of `decoder` on the given data.
pub fn training_objective(
    eeg_trials: &[Eeg],
    attended: &[Envelope],
    decoder: &Decoder,
) -> Result<(f64, f64)> {
    check_training(eeg_trials, attended)?;
    let mut rss = 0.0;
    for (e, env) in eeg_trials.iter().zip(attended) {
        let rec = reconstruct_envelope(e, decoder)?;
        rss += rec
            .samples
            .iter()
            .zip(&env.samples)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    let penalty = decoder.weights.iter().map(|w| w * w).sum();
    Ok((rss, penalty))
}

/// Applies the decoder to z-scored EEG over the valid (fully lagged) region.
pub fn reconstruct_envelope(eeg: &Eeg, decoder: &Decoder) -> Result<Envelope> {
    eeg.check()?;
    if eeg.num_channels() != decoder.channels {
        return Err(Error::DimensionMismatch(format!(
            "EEG has {} channels, decoder expects {}",
            eeg.num_channels(),
            decoder.channels
        )));
    }
    let rows = decoder.valid_len(eeg.len());
    if rows == 0 {
        return Err(Error::SignalTooShort {
            len: eeg.len(),
            needed: decoder.lag_max() + 1,
        });
    }
    let z = eeg.zscored();
    let mut out = vec![0.0; rows];
    for (ch, x) in z.channels.iter().enumerate() {
        let w = &decoder.weights[ch * decoder.lags..(ch + 1) * decoder.lags];
        for (t, o) in out.iter_mut().enumerate() {
            let seg = &x[t + decoder.lag_min..t + decoder.lag_min + decoder.lags];
            *o += seg.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(Envelope::new(eeg.sample_rate, out).with_source("reconstructed"))
}

pub fn pearson(a: &Envelope, b: &Envelope) -> Result<f64> {
    pearson_slices(&a.samples, &b.samples)
}

pub fn pearson_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "correlating {} with {} samples",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::SignalTooShort { len: a.len(), needed: 2 });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if !(saa > 0.0) || !(sbb > 0.0) {
        return Err(Error::UndefinedCorrelation("zero-variance envelope".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    /// `None` for candidates whose correlation is undefined.
    pub correlations: Vec<Option<f64>>,
    pub tie: bool,
    pub excluded: Vec<usize>,
}

/// Picks the candidate with maximum Pearson correlation, ties toward the lowest index.
///
/// Candidates longer than the reconstruction are compared over its length.
pub fn select_speaker(references: &[Envelope], reconstructed: &Envelope) -> Result<Selection> {
    if references.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 candidate envelopes, got {}",
            references.len()
        )));
    }
    let n = reconstructed.len();
    let mut correlations = Vec::with_capacity(references.len());
    let mut excluded = Vec::new();
    for (i, r) in references.iter().enumerate() {
        if r.len() < n {
            return Err(Error::DimensionMismatch(format!(
                "candidate {i} has {} samples, reconstruction {n}",
                r.len()
            )));
        }
        match pearson_slices(&r.samples[..n], &reconstructed.samples) {
            Ok(rho) => correlations.push(Some(rho)),
            Err(Error::UndefinedCorrelation(_)) => {
                excluded.push(i);
                correlations.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let mut best: Option<(usize, f64)> = None;
    let mut tie = false;
    for (i, rho) in correlations.iter().enumerate() {
        let Some(rho) = *rho else { continue };
        match best {
            None => best = Some((i, rho)),
            Some((_, b)) if rho > b => {
                best = Some((i, rho));
                tie = false;
            }
            Some((_, b)) if rho == b => tie = true,
            _ => {}
        }
    }
    let Some((index, _)) = best else {
        return Err(Error::UndefinedCorrelation(
            "every candidate envelope has zero variance".into(),
        ));
    };
    if !excluded.is_empty() {
        log::warn!("candidates {excluded:?} excluded: undefined correlation");
    }
    Ok(Selection {
        index,
        correlations,
        tie,
        excluded,
    })
}

/// Per-channel lags (samples) and gains shared by all synthetic EEG channels.
const EEG_LAG_RANGE: (usize, usize) = (2, 10);
const UNATTENDED_LEAK: f64 = 0.3;

/// Synthetic EEG: each channel is a random gain times the attended envelope
/// delayed by a random lag, plus weaker unattended leakage and Gaussian noise
/// (low-passed to the envelope band) at `snr_db` relative to the attended
/// component.
pub fn synthesize_eeg(
    attended: &Envelope,
    unattended: &Envelope,
    channels: usize,
    snr_db: f64,
    seed: u64,
) -> Result<Eeg> {
    if attended.len() != unattended.len() {
        return Err(Error::DimensionMismatch(format!(
            "attended envelope has {} samples, unattended {}",
            attended.len(),
            unattended.len()
        )));
    }
    if channels == 0 || attended.is_empty() {
        return Err(Error::Empty("synthetic EEG needs channels and samples".into()));
    }
    let centered = |e: &Envelope| {
        let m = e.samples.iter().sum::<f64>() / e.len() as f64;
        e.samples.iter().map(|x| x - m).collect::<Vec<f64>>()
    };
    let att = centered(attended);
    let un = centered(unattended);
    let power = att.iter().map(|x| x * x).sum::<f64>() / att.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = att.len();
    let delayed = |x: &[f64], lag: usize, t: usize| if t >= lag { x[t - lag] } else { 0.0 };
    let rows = (0..channels)
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let gain = sign * (0.5 + rng.random::<f64>());
            let leak = UNATTENDED_LEAK * (rng.random::<f64>() * 2.0 - 1.0);
            let lag_a = rng.random_range(EEG_LAG_RANGE.0..=EEG_LAG_RANGE.1);
            let lag_u = rng.random_range(EEG_LAG_RANGE.0..=EEG_LAG_RANGE.1);
            let noise_sd = (gain * gain * power / 10f64.powf(snr_db / 10.0)).sqrt();
            let noise = band_noise(len, attended.sample_rate, &mut rng);
            (0..len)
                .map(|t| {
                    gain * delayed(&att, lag_a, t)
                        + leak * delayed(&un, lag_u, t)
                        + noise_sd * noise[t]
                })
                .collect()
        })
        .collect();
    Ok(Eeg {
        sample_rate: attended.sample_rate,
        channels: rows,
    })
}

/// Unit-variance Gaussian noise confined to the envelope band, so it competes
/// with the stimulus response instead of sitting mostly above it.
fn band_noise(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let cutoff = AadConfig::default().cutoff_hz.min(0.4 * rate);
    let mut x = Biquad::butter_lowpass(cutoff, rate).filtfilt(&white, 0);
    let n = len.max(1) as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        x.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
    x
}

/// Cuts aligned EEG and candidate envelopes into consecutive trials of
/// `trial_s` seconds, dropping any incomplete tail.
pub fn split_trials(
    eeg: &Eeg,
    candidates: &[Envelope],
    attended: usize,
    trial_s: f64,
) -> Result<TrialSet> {
    eeg.check()?;
    if attended >= candidates.len() {
        return Err(Error::InvalidConfig(format!(
            "attended index {attended} out of range for {} candidates",
            candidates.len()
        )));
    }
    for (i, c) in candidates.iter().enumerate() {
        if c.len() != eeg.len() {
            return Err(Error::DimensionMismatch(format!(
                "candidate {i} has {} samples, EEG {}",
                c.len(),
                eeg.len()
            )));
        }
        if c.sample_rate != eeg.sample_rate {
            return Err(Error::InvalidConfig(format!(
                "candidate {i} at {} Hz, EEG at {} Hz",
                c.sample_rate, eeg.sample_rate
            )));
        }
    }
    let per = (trial_s * eeg.sample_rate).round() as usize;
    if per == 0 {
        return Err(Error::InvalidConfig(format!("trial length {trial_s} s is empty")));
    }
    let trials = (0..eeg.len() / per)
        .map(|i| Trial {
            eeg: eeg.slice(i * per, per),
            candidates: candidates.iter().map(|c| c.slice(i * per, per)).collect(),
            attended,
        })
        .collect();
    Ok(TrialSet { trial_s, trials })
}

/// Reconstructs and selects a speaker in every trial with a fixed decoder.
pub fn decode_trials(set: &TrialSet, decoder: &Decoder) -> Result<Vec<Selection>> {
    par::map_slice(&set.trials, |t| {
        let rec = reconstruct_envelope(&t.eeg, decoder)?;
        select_speaker(&t.candidates, &rec)
    })
    .into_iter()
    .collect()
}

/// Leave-one-trial-out decoding: each trial is decoded with a decoder trained
/// on the attended envelopes of all other trials.
pub fn cross_validate(set: &TrialSet, cfg: &AadConfig) -> Result<Vec<Selection>> {
    if set.trials.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "leave-one-out needs at least 2 trials, got {}",
            set.trials.len()
        )));
    }
    let eegs: Vec<Eeg> = set.trials.iter().map(|t| t.eeg.clone()).collect();
    let targets: Vec<Envelope> = set
        .trials
        .iter()
        .map(|t| t.candidates[t.attended].clone())
        .collect();
    let c = check_training(&eegs, &targets)?;
    let rate = eegs[0].sample_rate;
    let (lag_min, lags) = lag_samples(cfg.lag_ms, rate)?;
    let grams: Vec<Gram> = par::map_range(eegs.len(), |i| {
        gram(&eegs[i], &targets[i].samples, lag_min, lags)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut total = Gram::zeros(c * lags);
    for g in &grams {
        total.add(g, 1.0);
    }
    par::map_range(set.trials.len(), |i| {
        let mut rest = total.clone();
        rest.add(&grams[i], -1.0);
        let decoder = Decoder {
            channels: c,
            lags,
            lag_min,
            sample_rate: rate,
            lag_range_ms: cfg.lag_ms,
            weights: solve_gram(&rest, cfg.ridge)?,
        };
        let t = &set.trials[i];
        select_speaker(&t.candidates, &reconstruct_envelope(&t.eeg, &decoder)?)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rng_env(n: usize, seed: u64) -> Envelope {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // smoothed positive noise, roughly envelope-like
        let mut acc = 0.0;
        let s = (0..n)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                acc = 0.8 * acc + g;
                acc.abs()
            })
            .collect();
        Envelope::new(64.0, s)
    }

    fn dominant_hz(x: &[f64], rate: f64) -> f64 {
        let n = x.len();
        let m = x.iter().sum::<f64>() / n as f64;
        let mut best = (0.0, 0.0);
        // 0.05 Hz grid up to 16 Hz
        for i in 1..320 {
            let f = i as f64 * 0.05;
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                let ph = 2.0 * PI * f * t as f64 / rate;
                re += (v - m) * ph.cos();
                im += (v - m) * ph.sin();
            }
            let p = re * re + im * im;
            if p > best.1 {
                best = (f, p);
            }
        }
        best.0
    }

    #[test]
    fn butterworth_dc_gain_and_cutoff() {
        let f = Biquad::butter_lowpass(8.0, 16000.0);
        let dc = (f.b.iter().sum::<f64>()) / (1.0 + f.a[0] + f.a[1]);
        assert!((dc - 1.0).abs() < 1e-9);
        // |H| at cutoff is 1/sqrt(2)
        let w = 2.0 * PI * 8.0 / 16000.0;
        let z = num_complex::Complex64::from_polar(1.0, -w);
        let h = (f.b[0] + f.b[1] * z + f.b[2] * z * z) / (1.0 + f.a[0] * z + f.a[1] * z * z);
        assert!((h.norm() - SQRT_2.recip()).abs() < 1e-6);
    }

    #[test]
    fn zero_signal_gives_zero_envelope() {
        let e = extract_envelope(&vec![0.0; 16000], 16000.0, 64.0).unwrap();
        assert_eq!(e.len(), 64);
        assert!(e.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_signal_rejected() {
        assert!(matches!(extract_envelope(&[], 16000.0, 64.0), Err(Error::Empty(_))));
        assert!(extract_envelope(&[1.0], 64.0, 128.0).is_err());
    }

    #[test]
    fn am_tone_envelope_peaks_at_modulator() {
        let fs = 16000.0;
        let x: Vec<f64> = (0..(8.0 * fs) as usize)
            .map(|n| {
                let t = n as f64 / fs;
                (1.0 + 0.8 * (2.0 * PI * 2.0 * t).sin()) * (2.0 * PI * 500.0 * t).sin()
            })
            .collect();
        let e = extract_envelope(&x, fs, 64.0).unwrap();
        assert_eq!(e.len(), 512);
        assert!((dominant_hz(&e.samples, 64.0) - 2.0).abs() < 0.1);
        assert!(e.samples.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn envelope_is_positively_homogeneous() {
        let fs = 8000.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..16000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e1 = extract_envelope(&x, fs, 64.0).unwrap();
        let x3: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        let e3 = extract_envelope(&x3, fs, 64.0).unwrap();
        let peak = e3.samples.iter().cloned().fold(0.0, f64::max);
        for (a, b) in e1.samples.iter().zip(&e3.samples) {
            assert!((3.0 * a - b).abs() <= 1e-9 * peak);
        }
    }

    #[test]
    fn pearson_basics() {
        let x = rng_env(100, 1);
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg = Envelope::new(64.0, x.samples.iter().map(|v| -v).collect());
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        // hand-computed: means 3 and 4, Sab = 9, Saa = 10, Sbb = 10
        let a = Envelope::new(1.0, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = Envelope::new(1.0, vec![2.0, 4.0, 3.0, 5.0, 6.0]);
        assert!((pearson(&a, &b).unwrap() - 0.9).abs() < 1e-12);
        let flat = Envelope::new(1.0, vec![2.0; 5]);
        assert!(matches!(pearson(&a, &flat), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn select_exact_and_sign() {
        let c: Vec<Envelope> = (0..3).map(|i| rng_env(200, 10 + i)).collect();
        let s = select_speaker(&c, &c[2]).unwrap();
        assert_eq!(s.index, 2);
        assert!((s.correlations[2].unwrap() - 1.0).abs() < 1e-12);

        let x = rng_env(200, 20);
        let neg = Envelope::new(64.0, x.samples.iter().map(|v| -v).collect());
        assert_eq!(select_speaker(&[neg, x.clone()], &x).unwrap().index, 1);
    }

    #[test]
    fn select_tie_and_exclusion() {
        let x = rng_env(50, 4);
        let s = select_speaker(&[x.clone(), x.clone()], &x).unwrap();
        assert_eq!(s.index, 0);
        assert!(s.tie);

        let flat = Envelope::new(64.0, vec![1.0; 50]);
        let s = select_speaker(&[flat.clone(), x.clone()], &x).unwrap();
        assert_eq!(s.index, 1);
        assert_eq!(s.excluded, vec![0]);
        assert_eq!(s.correlations[0], None);
        assert!(select_speaker(&[flat.clone(), flat], &x).is_err());
        assert!(select_speaker(&[x.clone()], &x).is_err());
    }

    #[test]
    fn select_matches_scan() {
        for seed in 0..50 {
            let c: Vec<Envelope> = (0..4).map(|i| rng_env(80, seed * 10 + i)).collect();
            let r = rng_env(80, 1000 + seed);
            let s = select_speaker(&c, &r).unwrap();
            let mut best = 0;
            for i in 1..c.len() {
                if pearson(&c[i], &r).unwrap() > pearson(&c[best], &r).unwrap() {
                    best = i;
                }
            }
            assert_eq!(s.index, best);
        }
    }

    #[test]
    fn lag_conversion() {
        assert_eq!(lag_samples((0.0, 250.0), 64.0).unwrap(), (0, 17));
        assert!(lag_samples((-10.0, 250.0), 64.0).is_err());
    }

    fn white_eeg(c: usize, n: usize, seed: u64) -> Eeg {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Eeg {
            sample_rate: 64.0,
            channels: (0..c)
                .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect(),
        }
    }

    #[test]
    fn planted_identity_reconstructs() {
        let env = rng_env(1000, 5);
        let mut eeg = white_eeg(4, 1000, 6);
        eeg.channels[1] = env.samples.clone();
        for ch in [0, 2, 3] {
            eeg.channels[ch] = vec![0.0; 1000];
        }
        let d = train_decoder(&[eeg.clone()], &[env.clone()], (0.0, 250.0), 1e-9).unwrap();
        let rec = reconstruct_envelope(&eeg, &d).unwrap();
        assert_eq!(rec.len(), 1000 - 16);
        let rho = pearson_slices(&rec.samples, &env.samples[..rec.len()]).unwrap();
        assert!(rho >= 0.999, "rho {rho}");
    }

    #[test]
    fn huge_ridge_shrinks_weights() {
        let env = rng_env(600, 7);
        let eeg = white_eeg(3, 600, 8);
        let d = train_decoder(&[eeg], &[env], (0.0, 100.0), 1e12).unwrap();
        assert!(d.weights.iter().all(|w| w.abs() < 1e-9));
    }

    #[test]
    fn planted_linear_model_recovered() {
        let (c, n) = (4, 4000);
        let eeg = white_eeg(c, n, 9).zscored();
        let (lag_min, lags) = lag_samples((0.0, 250.0), 64.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w: Vec<f64> = (0..c * lags).map(|_| StandardNormal.sample(&mut rng)).collect();
        let rows = n - lag_min - lags + 1;
        let clean: Vec<f64> = (0..rows)
            .map(|t| {
                (0..c)
                    .flat_map(|ch| (0..lags).map(move |tau| (ch, tau)))
                    .map(|(ch, tau)| w[ch * lags + tau] * eeg.channels[ch][t + lag_min + tau])
                    .sum()
            })
            .collect();
        let p = clean.iter().map(|x| x * x).sum::<f64>() / rows as f64;
        let mut target: Vec<f64> = clean
            .iter()
            .map(|x| x + p.sqrt() * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        target.resize(n, 0.0);
        let d = train_decoder(&[eeg], &[Envelope::new(64.0, target)], (0.0, 250.0), 1e-2).unwrap();
        let rho = pearson_slices(&d.weights, &w).unwrap();
        assert!(rho >= 0.9, "rho {rho}");
    }

    #[test]
    fn reconstruction_matches_naive_sum() {
        let eeg = white_eeg(3, 300, 11).zscored();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = Decoder {
            channels: 3,
            lags: 5,
            lag_min: 2,
            sample_rate: 64.0,
            lag_range_ms: (31.25, 93.75),
            weights: (0..15).map(|_| StandardNormal.sample(&mut rng)).collect(),
        };
        let rec = reconstruct_envelope(&eeg, &d).unwrap();
        assert_eq!(rec.len(), 300 - 6);
        for t in 0..rec.len() {
            let mut s = 0.0;
            for c in 0..3 {
                for tau in 0..5 {
                    s += d.weight(c, tau) * eeg.channels[c][t + 2 + tau];
                }
            }
            assert!((rec.samples[t] - s).abs() <= 1e-10 * s.abs().max(1.0));
        }
        let zero = Eeg { sample_rate: 64.0, channels: vec![vec![0.0; 300]; 3] };
        assert!(reconstruct_envelope(&zero, &d).unwrap().samples.iter().all(|&v| v == 0.0));
        let two = white_eeg(2, 300, 1);
        assert!(matches!(reconstruct_envelope(&two, &d), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn decoder_matches_dense_normal_equations() {
        let env = rng_env(400, 13);
        let eeg = white_eeg(2, 400, 14);
        let d = train_decoder(&[eeg.clone()], &[env.clone()], (0.0, 62.5), 0.5).unwrap();
        let z = eeg.zscored();
        let (lags, rows) = (d.lags, 400 - d.lags + 1);
        let x = nalgebra::DMatrix::from_fn(rows, 2 * lags, |t, j| z.channels[j / lags][t + j % lags]);
        let y = nalgebra::DVector::from_fn(rows, |t, _| env.samples[t]);
        let xtx = x.transpose() * &x;
        let power = xtx.trace() / (2 * lags * rows) as f64;
        let a = xtx + nalgebra::DMatrix::identity(2 * lags, 2 * lags) * (0.5 * power);
        let w = a.lu().solve(&(x.transpose() * y)).unwrap();
        for (a, b) in d.weights.iter().zip(w.iter()) {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn ridge_path_is_monotone() {
        let env = rng_env(500, 15);
        let eeg = white_eeg(3, 500, 16);
        let mut last: Option<(f64, f64, f64)> = None;
        for ridge in [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0] {
            let d = train_decoder(&[eeg.clone()], &[env.clone()], (0.0, 125.0), ridge).unwrap();
            let (rss, pen) = training_objective(&[eeg.clone()], &[env.clone()], &d).unwrap();
            let z = eeg.zscored();
            let rows = 500 - d.lags + 1;
            let power = z
                .channels
                .iter()
                .flat_map(|c| (0..d.lags).flat_map(move |tau| c[tau..tau + rows].iter()))
                .map(|v| v * v)
                .sum::<f64>()
                / (3 * d.lags * rows) as f64;
            let lam = ridge * power;
            // the optimal penalized total rises with λ; rss rises, ‖w‖² falls
            let total = rss + lam * pen;
            if let Some((r0, p0, t0)) = last {
                assert!(rss >= r0 * (1.0 - 1e-9));
                assert!(pen <= p0 * (1.0 + 1e-9));
                assert!(total >= t0 * (1.0 - 1e-9));
            }
            last = Some((rss, pen, total));
        }
    }

    #[test]
    fn eeg_is_seeded() {
        let a = rng_env(500, 1);
        let b = rng_env(500, 2);
        let e1 = synthesize_eeg(&a, &b, 4, 0.0, 42).unwrap();
        let e2 = synthesize_eeg(&a, &b, 4, 0.0, 42).unwrap();
        assert_eq!(e1, e2);
        assert_ne!(e1, synthesize_eeg(&a, &b, 4, 0.0, 43).unwrap());
        assert!(synthesize_eeg(&a, &rng_env(10, 1), 4, 0.0, 1).is_err());
    }

    #[test]
    fn split_counts_trials() {
        let n = 20 * 60 * 64;
        let a = rng_env(n, 1);
        let b = rng_env(n, 2);
        let eeg = synthesize_eeg(&a, &b, 2, 0.0, 1).unwrap();
        let set = split_trials(&eeg, &[a, b], 0, 30.0).unwrap();
        assert_eq!(set.trials.len(), 40);
        assert!(set.trials.iter().all(|t| t.eeg.len() == 1920 && t.candidates[1].len() == 1920));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn selection_invariant_to_positive_affine(
            seed in 0u64..10_000,
            scale in 0.01f64..100.0,
            shift in -10.0f64..10.0,
            which in 0usize..3,
        ) {
            let c: Vec<Envelope> = (0..3).map(|i| rng_env(64, seed * 3 + i)).collect();
            let r = rng_env(64, seed + 77_777);
            let base = select_speaker(&c, &r).unwrap();
            let mut moved = c.clone();
            moved[which].samples.iter_mut().for_each(|v| *v = scale * *v + shift);
            let rm = Envelope::new(64.0, r.samples.iter().map(|v| scale * v + shift).collect());
            let s = select_speaker(&moved, &rm).unwrap();
            if !base.tie {
                prop_assert_eq!(s.index, base.index);
            }
        }

        #[test]
        fn pearson_bounded(seed in 0u64..10_000) {
            let a = rng_env(32, seed);
            let b = rng_env(32, seed + 1);
            let r = pearson(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }
}
