//! Frequency-weighted segmental SNR and attention-decoding statistics.
//!
//! fwSSNR here is computed per frame and critical band as
//! `10 log10(Σ_f W_j(f)|X(f)|² / Σ_f W_j(f)|X(f) - X̂(f)|²)`, clamped, weighted
//! by the reference band magnitude raised to a small exponent, averaged over
//! bands and then over speech-active frames.

use std::f64::consts::PI;

use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::scene::RenderedScene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FwssnrConfig {
    pub sample_rate: u32,
    pub frame_ms: f64,
    /// Fractional overlap between frames.
    pub overlap: f64,
    pub bands: usize,
    pub low_hz: f64,
    pub clamp_db: (f64, f64),
    pub weight_exponent: f64,
    /// Frames whose reference energy is further than this below the
    /// utterance peak do not contribute.
    pub activity_range_db: f64,
}

impl Default for FwssnrConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            frame_ms: 32.0,
            overlap: 0.75,
            bands: 25,
            low_hz: 50.0,
            clamp_db: (-10.0, 35.0),
            weight_exponent: 0.2,
            activity_range_db: 35.0,
        }
    }
}

impl FwssnrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clamp_db.0 >= self.clamp_db.1 {
            return Err(Error::InvalidConfig(format!(
                "clamp range {:?} must satisfy lo < hi",
                self.clamp_db
            )));
        }
        if self.bands == 0 {
            return Err(Error::InvalidConfig("at least one band required".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::InvalidConfig(format!("overlap {} not in [0, 1)", self.overlap)));
        }
        if self.frame_length() < 8 {
            return Err(Error::InvalidConfig("frame too short".into()));
        }
        if self.low_hz <= 0.0 || self.low_hz >= self.sample_rate as f64 / 2.0 {
            return Err(Error::InvalidConfig(format!("low edge {} Hz out of range", self.low_hz)));
        }
        Ok(())
    }

    pub fn frame_length(&self) -> usize {
        (self.frame_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop(&self) -> usize {
        ((self.frame_length() as f64 * (1.0 - self.overlap)).round() as usize).max(1)
    }
}

fn bark(hz: f64) -> f64 {
    13.0 * (0.00076 * hz).atan() + 3.5 * (hz / 7500.0).powi(2).atan()
}

/// Gaussian critical-band weights, `bands × bins`, centers evenly spaced in Bark.
fn band_weights(cfg: &FwssnrConfig, nfft: usize) -> Vec<Vec<f64>> {
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let (lo, hi) = (bark(cfg.low_hz), bark(nyquist));
    let width = (hi - lo) / cfg.bands as f64;
    let bins = nfft / 2 + 1;
    (0..cfg.bands)
        .map(|j| {
            let center = lo + (j as f64 + 0.5) * width;
            (0..bins)
                .map(|f| {
                    let hz = f as f64 * cfg.sample_rate as f64 / nfft as f64;
                    if hz < cfg.low_hz {
                        return 0.0;
                    }
                    let d = (bark(hz) - center) / (0.5 * width);
                    (-0.5 * d * d).exp()
                })
                .collect()
        })
        .collect()
}

/// Frequency-weighted segmental SNR of `test` against `reference`, in dB.
pub fn fwssnr(test: &[f64], reference: &[f64], cfg: &FwssnrConfig) -> Result<f64> {
    cfg.validate()?;
    if test.len() != reference.len() {
        return Err(Error::DimensionMismatch(format!(
            "test has {} samples, reference {}",
            test.len(),
            reference.len()
        )));
    }
    let frame = cfg.frame_length();
    let hop = cfg.hop();
    let nfft = frame.next_power_of_two();
    let bins = nfft / 2 + 1;
    let weights = band_weights(cfg, nfft);
    let window: Vec<f64> = (0..frame)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / frame as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(nfft);
    let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];

    let len = reference.len();
    let frames = if len <= frame { 1 } else { (len - frame) / hop + 1 };
    let (lo, hi) = cfg.clamp_db;

    // (reference energy, frame score) per frame
    let mut per_frame: Vec<(f64, Option<f64>)> = Vec::with_capacity(frames);
    let mut xb = vec![C64::new(0.0, 0.0); nfft];
    let mut eb = vec![C64::new(0.0, 0.0); nfft];
    let (mut xp, mut xm, mut ep) = (vec![0.0; bins], vec![0.0; bins], vec![0.0; bins]);
    for k in 0..frames {
        let start = k * hop;
        xb.fill(C64::new(0.0, 0.0));
        eb.fill(C64::new(0.0, 0.0));
        for i in 0..frame.min(len - start) {
            let r = reference[start + i];
            xb[i] = C64::new(r * window[i], 0.0);
            eb[i] = C64::new((test[start + i] - r) * window[i], 0.0);
        }
        fft.process_with_scratch(&mut xb, &mut scratch);
        fft.process_with_scratch(&mut eb, &mut scratch);

        for f in 0..bins {
            xp[f] = xb[f].norm_sqr();
            xm[f] = xb[f].norm();
            ep[f] = eb[f].norm_sqr();
        }
        let mut energy = 0.0;
        let mut num = 0.0;
        let mut den = 0.0;
        for w in &weights {
            let mut ref_pow = 0.0;
            let mut ref_mag = 0.0;
            let mut err_pow = 0.0;
            for f in 0..bins {
                ref_pow += w[f] * xp[f];
                ref_mag += w[f] * xm[f];
                err_pow += w[f] * ep[f];
            }
            energy += ref_pow;
            let snr = if err_pow == 0.0 {
                hi
            } else if ref_pow == 0.0 {
                lo
            } else {
                (10.0 * (ref_pow / err_pow).log10()).clamp(lo, hi)
            };
            let weight = ref_mag.powf(cfg.weight_exponent);
            if ref_mag > 0.0 {
                num += weight * snr;
                den += weight;
            }
        }
        per_frame.push((energy, (den > 0.0).then(|| num / den)));
    }

    let peak = per_frame.iter().map(|p| p.0).fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(Error::SilentReference);
    }
    let floor = peak * 10f64.powf(-cfg.activity_range_db / 10.0);
    let active: Vec<f64> = per_frame
        .iter()
        .filter(|(e, _)| *e >= floor)
        .filter_map(|(_, s)| *s)
        .collect();
    if active.is_empty() {
        return Err(Error::SilentReference);
    }
    Ok(active.iter().sum::<f64>() / active.len() as f64)
}

/// Input fwSSNR of one speaker: the best fwSSNR over all microphones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFwssnr {
    pub value: f64,
    pub best_mic: usize,
    pub per_mic: Vec<f64>,
}

/// Highest fwSSNR among the microphone signals for `speaker`, referenced to
/// the speaker's anechoic component at `reference_mic`.
pub fn input_fwssnr(
    scene: &RenderedScene,
    speaker: usize,
    reference_mic: usize,
    cfg: &FwssnrConfig,
) -> Result<InputFwssnr> {
    let reference = scene
        .anechoic
        .get(speaker)
        .and_then(|s| s.get(reference_mic))
        .ok_or_else(|| {
            Error::DimensionMismatch(format!(
                "no anechoic component for speaker {speaker} at mic {reference_mic}"
            ))
        })?;
    let per_mic = scene
        .mics
        .iter()
        .map(|y| fwssnr(y, reference, cfg))
        .collect::<Result<Vec<f64>>>()?;
    let (best_mic, value) = per_mic
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });
    Ok(InputFwssnr {
        value,
        best_mic,
        per_mic,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutcome {
    pub correct: bool,
    pub tie: bool,
    pub selected_db: f64,
    pub discarded_db: f64,
}

/// A decision is correct iff the selected output scores a strictly higher
/// fwSSNR against the attended reference than the discarded one.
pub fn decode_correct(
    selected: &[f64],
    discarded: &[f64],
    reference: &[f64],
    cfg: &FwssnrConfig,
) -> Result<DecodeOutcome> {
    let selected_db = fwssnr(selected, reference, cfg)?;
    let discarded_db = fwssnr(discarded, reference, cfg)?;
    Ok(DecodeOutcome {
        correct: selected_db > discarded_db,
        tie: selected_db == discarded_db,
        selected_db,
        discarded_db,
    })
}

/// Percentage of correctly decoded trials.
pub fn aad_accuracy(outcomes: &[bool]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Empty("no trials".into()));
    }
    let correct = outcomes.iter().filter(|&&c| c).count();
    Ok(100.0 * correct as f64 / outcomes.len() as f64)
}

/// Smallest accuracy (percent) whose one-sided binomial tail under chance
/// (`p = 0.5`) is at most `alpha`, by exact summation. Returns 100 when no
/// attainable accuracy is significant.
pub fn chance_upper_bound(n_trials: usize, alpha: f64) -> Result<f64> {
    if n_trials == 0 {
        return Err(Error::Empty("no trials".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} not in (0, 1)")));
    }
    let n = n_trials;
    // ln C(n, k) for all k, then pmf = exp(ln C - n ln 2)
    let mut ln_choose = vec![0.0; n + 1];
    for k in 1..=n {
        ln_choose[k] = ln_choose[k - 1] + ((n - k + 1) as f64).ln() - (k as f64).ln();
    }
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut tail = 0.0;
    let mut smallest = n + 1;
    for k in (0..=n).rev() {
        tail += (ln_choose[k] + ln_half_n).exp();
        if tail <= alpha {
            smallest = k;
        } else {
            break;
        }
    }
    Ok(if smallest > n {
        100.0
    } else {
        100.0 * smallest as f64 / n as f64
    })
}

/// Chance-level bounds published alongside the original study, keyed by the
/// number of trials per condition.
pub const PUBLISHED_CHANCE_BOUNDS: [(usize, f64); 2] = [(40, 61.39), (20, 66.19)];
