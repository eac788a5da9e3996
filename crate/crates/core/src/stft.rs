//! Weighted overlap-add STFT for multichannel signals.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    /// Square-root periodic Hann on both analysis and synthesis.
    #[default]
    SqrtHann,
    /// Periodic Hann analysis, rectangular synthesis.
    Hann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub frame_length: usize,
    pub hop: usize,
    pub window: Window,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_length: 512,
            hop: 128,
            window: Window::SqrtHann,
            sample_rate: 16000,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.frame_length / 2 + 1
    }

    /// Center frequency of bin `f` in Hz.
    pub fn bin_frequency(&self, f: usize) -> f64 {
        f as f64 * self.sample_rate as f64 / self.frame_length as f64
    }

    pub fn analysis_window(&self) -> Vec<f64> {
        let hann = periodic_hann(self.frame_length);
        match self.window {
            Window::SqrtHann => hann.iter().map(|w| w.sqrt()).collect(),
            Window::Hann => hann,
        }
    }

    pub fn synthesis_window(&self) -> Vec<f64> {
        match self.window {
            Window::SqrtHann => self.analysis_window(),
            Window::Hann => vec![1.0; self.frame_length],
        }
    }

    /// Constant `Σ_j w_a[n + jH] w_s[n + jH]`; errors if it is not constant.
    pub fn overlap_gain(&self) -> Result<f64> {
        self.validate_shape()?;
        let wa = self.analysis_window();
        let ws = self.synthesis_window();
        let sums: Vec<f64> = (0..self.hop)
            .map(|n| {
                (n..self.frame_length)
                    .step_by(self.hop)
                    .map(|i| wa[i] * ws[i])
                    .sum()
            })
            .collect();
        let g = sums[0];
        if g <= 0.0 || sums.iter().any(|s| (s - g).abs() > 1e-10 * g) {
            return Err(Error::InvalidConfig(format!(
                "{:?} window with frame {} and hop {} violates constant overlap-add",
                self.window, self.frame_length, self.hop
            )));
        }
        Ok(g)
    }

    fn validate_shape(&self) -> Result<()> {
        if self.frame_length < 2 || self.frame_length % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "frame length must be even and >= 2, got {}",
                self.frame_length
            )));
        }
        if self.hop == 0 || self.frame_length % self.hop != 0 {
            return Err(Error::InvalidConfig(format!(
                "hop {} must divide frame length {}",
                self.hop, self.frame_length
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.overlap_gain().map(|_| ())
    }

    /// Frames produced by [`analyze`] for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.frame_length {
            0
        } else {
            (len - self.frame_length) / self.hop + 1
        }
    }
}

fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Complex STFT coefficients `Y[m, k, f]`, stored channel-major then frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelSpectrogram {
    channels: usize,
    frames: usize,
    bins: usize,
    data: Vec<C64>,
}

impl MultichannelSpectrogram {
    pub fn zeros(channels: usize, frames: usize, bins: usize) -> Self {
        Self {
            channels,
            frames,
            bins,
            data: vec![C64::new(0.0, 0.0); channels * frames * bins],
        }
    }

    pub fn from_data(channels: usize, frames: usize, bins: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != channels * frames * bins {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for {channels}x{frames}x{bins}",
                data.len()
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidConfig("spectrogram contains non-finite values".into()));
        }
        Ok(Self {
            channels,
            frames,
            bins,
            data,
        })
    }

    /// Single-channel spectrogram from per-bin frame sequences (`per_bin[f][k]`).
    pub fn from_bins(frames: usize, per_bin: &[Vec<C64>]) -> Result<Self> {
        let bins = per_bin.len();
        if per_bin.iter().any(|b| b.len() != frames) {
            return Err(Error::DimensionMismatch("ragged per-bin outputs".into()));
        }
        let mut s = Self::zeros(1, frames, bins);
        for (f, seq) in per_bin.iter().enumerate() {
            for (k, &z) in seq.iter().enumerate() {
                s.data[k * bins + f] = z;
            }
        }
        Ok(s)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.frames, self.bins)
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    #[inline]
    pub fn get(&self, m: usize, k: usize, f: usize) -> C64 {
        self.data[(m * self.frames + k) * self.bins + f]
    }

    #[inline]
    pub fn set(&mut self, m: usize, k: usize, f: usize, v: C64) {
        self.data[(m * self.frames + k) * self.bins + f] = v;
    }

    /// `K × F` plane of channel `m`.
    pub fn channel(&self, m: usize) -> &[C64] {
        let n = self.frames * self.bins;
        &self.data[m * n..(m + 1) * n]
    }

    /// Observation vector `y_{k,f}` across channels.
    pub fn frame_vector(&self, k: usize, f: usize) -> Vec<C64> {
        (0..self.channels).map(|m| self.get(m, k, f)).collect()
    }

    /// All observation vectors at bin `f`, indexed by frame.
    pub fn bin_vectors(&self, f: usize) -> Vec<Vec<C64>> {
        (0..self.frames).map(|k| self.frame_vector(k, f)).collect()
    }

    /// Selects one channel as a single-channel spectrogram.
    pub fn select_channel(&self, m: usize) -> Self {
        Self {
            channels: 1,
            frames: self.frames,
            bins: self.bins,
            data: self.channel(m).to_vec(),
        }
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }
}

fn check_channels(signal: &[Vec<f64>]) -> Result<usize> {
    let len = signal
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Empty("signal has no channels".into()))?;
    if signal.iter().any(|c| c.len() != len) {
        return Err(Error::DimensionMismatch("channels differ in length".into()));
    }
    Ok(len)
}

fn forward_plan(n: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_forward(n)
}

fn inverse_plan(n: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_inverse(n)
}

/// One-sided STFT of every channel.
pub fn analyze(signal: &[Vec<f64>], cfg: &StftConfig) -> Result<MultichannelSpectrogram> {
    cfg.validate()?;
    let len = check_channels(signal)?;
    if len < cfg.frame_length {
        return Err(Error::SignalTooShort {
            len,
            needed: cfg.frame_length,
        });
    }
    let frames = cfg.frame_count(len);
    let bins = cfg.bins();
    let n = cfg.frame_length;
    let window = cfg.analysis_window();
    let fft = forward_plan(n);

    let planes = par::map_slice(signal, |x| {
        let mut buf = vec![C64::new(0.0, 0.0); n];
        let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        let mut plane = Vec::with_capacity(frames * bins);
        for k in 0..frames {
            let start = k * cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = C64::new(x[start + i] * window[i], 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            plane.extend_from_slice(&buf[..bins]);
        }
        plane
    });
    let data = planes.into_iter().flatten().collect();
    Ok(MultichannelSpectrogram {
        channels: signal.len(),
        frames,
        bins,
        data,
    })
}

/// Overlap-add resynthesis; output length is `(K - 1) * hop + frame_length`.
pub fn synthesize(spec: &MultichannelSpectrogram, cfg: &StftConfig) -> Result<Vec<Vec<f64>>> {
    let gain = cfg.overlap_gain()?;
    if spec.bins != cfg.bins() {
        return Err(Error::DimensionMismatch(format!(
            "spectrogram has {} bins, config expects {}",
            spec.bins,
            cfg.bins()
        )));
    }
    if spec.frames == 0 {
        return Err(Error::Empty("spectrogram has no frames".into()));
    }
    let n = cfg.frame_length;
    let bins = spec.bins;
    let len = (spec.frames - 1) * cfg.hop + n;
    let window = cfg.synthesis_window();
    let ifft = inverse_plan(n);
    // inverse FFT is unnormalized
    let scale = 1.0 / (n as f64 * gain);

    let channels: Vec<usize> = (0..spec.channels).collect();
    Ok(par::map_slice(&channels, |&m| {
        let plane = spec.channel(m);
        let mut out = vec![0.0; len];
        let mut buf = vec![C64::new(0.0, 0.0); n];
        let mut scratch = vec![C64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
        for k in 0..spec.frames {
            let frame = &plane[k * bins..(k + 1) * bins];
            buf[..bins].copy_from_slice(frame);
            // Hermitian extension; DC and Nyquist must be real
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            for f in 1..n / 2 {
                buf[n - f] = frame[f].conj();
            }
            ifft.process_with_scratch(&mut buf, &mut scratch);
            let start = k * cfg.hop;
            for i in 0..n {
                out[start + i] += buf[i].re * window[i] * scale;
            }
        }
        out
    }))
}

/// Zeros prepended by [`analyze_padded`].
pub fn edge_padding(cfg: &StftConfig) -> usize {
    cfg.frame_length - cfg.hop
}

/// STFT of the signal zero-padded so that every original sample is covered
/// by the full set of overlapping frames.
pub fn analyze_padded(signal: &[Vec<f64>], cfg: &StftConfig) -> Result<MultichannelSpectrogram> {
    cfg.validate()?;
    let len = check_channels(signal)?;
    if len == 0 {
        return Err(Error::SignalTooShort { len, needed: 1 });
    }
    let pad = edge_padding(cfg);
    let core = pad + len + pad;
    let padded_len = if core <= cfg.frame_length {
        cfg.frame_length
    } else {
        cfg.frame_length + (core - cfg.frame_length).div_ceil(cfg.hop) * cfg.hop
    };
    let padded: Vec<Vec<f64>> = signal
        .iter()
        .map(|c| {
            let mut v = vec![0.0; padded_len];
            v[pad..pad + len].copy_from_slice(c);
            v
        })
        .collect();
    analyze(&padded, cfg)
}

/// Inverse of [`analyze_padded`], trimmed back to `len` samples.
pub fn synthesize_padded(
    spec: &MultichannelSpectrogram,
    cfg: &StftConfig,
    len: usize,
) -> Result<Vec<Vec<f64>>> {
    let pad = edge_padding(cfg);
    let full = synthesize(spec, cfg)?;
    Ok(full
        .into_iter()
        .map(|c| {
            let mut out = vec![0.0; len];
            let avail = c.len().saturating_sub(pad).min(len);
            out[..avail].copy_from_slice(&c[pad..pad + avail]);
            out
        })
        .collect())
}
