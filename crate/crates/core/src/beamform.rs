//! Per-bin beamformers.
//!
//! The convolutional filters (wMPDR, wLCMP) factor into a multichannel
//! linear-prediction dereverberation stage `d_k = y_k - Gᴴ ỹ_k` followed by an
//! instantaneous beamformer `z_k = qᴴ d_k`, alternating with updates of the
//! per-frame target variance `λ_k`. The conventional filters (MPDR, LCMP,
//! MVDR, LCMV) apply `q` directly to `y_k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    hermitian_solve, hermitian_solve_vec, inner, max_generalized_eigvec, norm, CMatrix, Cholesky,
    HermitianMatrix, C64,
};
use crate::masks::MaskSet;
use crate::par;
use crate::stft::{MultichannelSpectrogram, StftConfig};

/// Constraint Gram matrices above this condition estimate are rejected.
pub const MAX_CONSTRAINT_CONDITION: f64 = 1e12;

/// Largest constraint residual a multi-constraint solve may return.
pub const CONSTRAINT_TOLERANCE: f64 = 1e-8;

/// Filter length used from `from_hz` up to the next band's start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterBand {
    pub from_hz: f64,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvBeamformerConfig {
    /// Prediction delay `b` in frames.
    pub frame_delay: usize,
    pub filter_bands: Vec<FilterBand>,
    pub iterations: usize,
    /// Response toward every interferer in the constrained modes.
    pub delta: f64,
    /// Variance floor relative to the bin's mean frame power.
    pub lambda_floor: f64,
    /// Diagonal loading relative to `trace / dim`, applied on every inversion.
    pub ridge: f64,
    pub reference_mic: usize,
    /// Re-estimate the RETFs from the dereverberated signals on every
    /// iteration; when false they are estimated once, in the first iteration.
    pub refresh_retf: bool,
    /// Replace bins whose solve fails by the reference microphone instead of
    /// failing the whole run.
    pub contain_failures: bool,
}

impl Default for ConvBeamformerConfig {
    fn default() -> Self {
        Self {
            frame_delay: 4,
            filter_bands: vec![
                FilterBand { from_hz: 0.0, length: 20 },
                FilterBand { from_hz: 800.0, length: 16 },
                FilterBand { from_hz: 1500.0, length: 8 },
            ],
            iterations: 10,
            delta: 0.1,
            lambda_floor: 1e-3,
            ridge: 1e-8,
            reference_mic: 0,
            refresh_retf: true,
            contain_failures: true,
        }
    }
}

impl ConvBeamformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.frame_delay < 1 {
            return bad("frame delay must be >= 1".into());
        }
        let Some(first) = self.filter_bands.first() else {
            return bad("no filter bands".into());
        };
        if first.from_hz != 0.0 {
            return bad(format!("first filter band must start at 0 Hz, not {}", first.from_hz));
        }
        for w in self.filter_bands.windows(2) {
            if !(w[1].from_hz > w[0].from_hz) {
                return bad("filter bands must have increasing start frequencies".into());
            }
        }
        if let Some(band) = self.filter_bands.iter().find(|b| b.length <= self.frame_delay) {
            return bad(format!(
                "filter length {} must exceed the frame delay {}",
                band.length, self.frame_delay
            ));
        }
        if self.iterations < 1 {
            return bad("iterations must be >= 1".into());
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be finite and >= 0, got {}", self.delta));
        }
        if !(self.lambda_floor > 0.0 && self.lambda_floor.is_finite()) {
            return bad(format!("lambda floor must be > 0, got {}", self.lambda_floor));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return bad(format!("ridge must be >= 0, got {}", self.ridge));
        }
        Ok(())
    }

    /// Filter length `L_w` for a bin centered at `hz` (bands are half-open).
    pub fn filter_length(&self, hz: f64) -> usize {
        self.filter_bands
            .iter()
            .rev()
            .find(|b| b.from_hz <= hz)
            .unwrap_or(&self.filter_bands[0])
            .length
    }
}

/// Current and delayed observations of one frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedObservation {
    pub frame_delay: usize,
    pub filter_length: usize,
    /// `y_k`, one vector of length M per frame.
    pub current: Vec<Vec<C64>>,
    /// `ỹ_k = [y_{k-b}; …; y_{k-L_w+1}]`, zero where `k - τ < 0`.
    pub delayed: Vec<Vec<C64>>,
}

impl StackedObservation {
    pub fn frames(&self) -> usize {
        self.current.len()
    }

    pub fn channels(&self) -> usize {
        self.current.first().map_or(0, Vec::len)
    }

    pub fn delayed_dim(&self) -> usize {
        self.channels() * (self.filter_length - self.frame_delay)
    }

    /// `ȳ_k = [y_k; ỹ_k]`.
    pub fn full(&self, k: usize) -> Vec<C64> {
        let mut v = self.current[k].clone();
        v.extend_from_slice(&self.delayed[k]);
        v
    }
}

/// Stacks per-frame observation vectors (all of equal length).
pub fn stack_frames(
    frames: &[Vec<C64>],
    frame_delay: usize,
    filter_length: usize,
) -> Result<StackedObservation> {
    if frame_delay < 1 || filter_length <= frame_delay {
        return Err(Error::InvalidConfig(format!(
            "need 1 <= frame delay < filter length, got {frame_delay} and {filter_length}"
        )));
    }
    let Some(first) = frames.first() else {
        return Err(Error::Empty("no frames to stack".into()));
    };
    let m = first.len();
    if frames.iter().any(|f| f.len() != m) {
        return Err(Error::DimensionMismatch("frames differ in channel count".into()));
    }
    let zero = C64::new(0.0, 0.0);
    let delayed = (0..frames.len())
        .map(|k| {
            let mut v = Vec::with_capacity(m * (filter_length - frame_delay));
            for tau in frame_delay..filter_length {
                if k >= tau {
                    v.extend_from_slice(&frames[k - tau]);
                } else {
                    v.extend(std::iter::repeat_n(zero, m));
                }
            }
            v
        })
        .collect();
    Ok(StackedObservation {
        frame_delay,
        filter_length,
        current: frames.to_vec(),
        delayed,
    })
}

/// Stacks bin `bin` of `spec` with the filter length of that bin's band.
pub fn stack_observations(
    spec: &MultichannelSpectrogram,
    bin: usize,
    cfg: &ConvBeamformerConfig,
    stft: &StftConfig,
) -> Result<StackedObservation> {
    cfg.validate()?;
    if bin >= spec.bins() {
        return Err(Error::DimensionMismatch(format!(
            "bin {bin} out of range for {} bins",
            spec.bins()
        )));
    }
    let length = cfg.filter_length(stft.bin_frequency(bin));
    stack_frames(&spec.bin_vectors(bin), cfg.frame_delay, length)
}

/// λ-weighted correlations of one bin.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCorrelations {
    /// `R_ỹ = (1/K) Σ ỹ ỹᴴ / λ`.
    pub delayed: HermitianMatrix,
    /// `P_ỹ = (1/K) Σ ỹ yᴴ / λ`.
    pub cross: CMatrix,
    /// `R̄_ȳ = (1/K) Σ ȳ ȳᴴ / λ`.
    pub stacked: HermitianMatrix,
}

fn check_lambda(obs: &StackedObservation, lambda: &[f64]) -> Result<()> {
    if lambda.len() != obs.frames() {
        return Err(Error::DimensionMismatch(format!(
            "{} variances for {} frames",
            lambda.len(),
            obs.frames()
        )));
    }
    if lambda.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(Error::InvalidConfig("variances must be finite and > 0".into()));
    }
    Ok(())
}

fn frame_weights(lambda: &[f64]) -> Vec<f64> {
    let k = lambda.len() as f64;
    lambda.iter().map(|l| 1.0 / (k * l)).collect()
}

fn delayed_correlations(obs: &StackedObservation, weights: &[f64]) -> (HermitianMatrix, CMatrix) {
    let dim = obs.delayed_dim();
    let m = obs.channels();
    let r = HermitianMatrix::weighted_outer_sum(
        dim,
        obs.delayed.iter().zip(weights).map(|(v, &w)| (v.as_slice(), w)),
    );
    let mut p = CMatrix::zeros(dim, m);
    for ((yt, y), &w) in obs.delayed.iter().zip(&obs.current).zip(weights) {
        for (i, &a) in yt.iter().enumerate() {
            let aw = a * w;
            if aw == C64::new(0.0, 0.0) {
                continue;
            }
            for (j, b) in y.iter().enumerate() {
                p[(i, j)] += aw * b.conj();
            }
        }
    }
    (r, p)
}

pub fn weighted_correlations(obs: &StackedObservation, lambda: &[f64]) -> Result<WeightedCorrelations> {
    check_lambda(obs, lambda)?;
    let weights = frame_weights(lambda);
    let (delayed, cross) = delayed_correlations(obs, &weights);
    let full: Vec<Vec<C64>> = (0..obs.frames()).map(|k| obs.full(k)).collect();
    let stacked = HermitianMatrix::weighted_outer_sum(
        obs.channels() + obs.delayed_dim(),
        full.iter().zip(&weights).map(|(v, &w)| (v.as_slice(), w)),
    );
    Ok(WeightedCorrelations {
        delayed,
        cross,
        stacked,
    })
}

/// `d_k = y_k - Gᴴ ỹ_k` for every frame.
pub fn dereverberate(obs: &StackedObservation, g: &CMatrix) -> Result<Vec<Vec<C64>>> {
    if g.rows() != obs.delayed_dim() || g.cols() != obs.channels() {
        return Err(Error::DimensionMismatch(format!(
            "prediction matrix is {}x{}, expected {}x{}",
            g.rows(),
            g.cols(),
            obs.delayed_dim(),
            obs.channels()
        )));
    }
    obs.current
        .iter()
        .zip(&obs.delayed)
        .map(|(y, yt)| {
            let pred = g.conj_transpose_mul_vec(yt)?;
            Ok(y.iter().zip(pred).map(|(a, b)| a - b).collect())
        })
        .collect()
}

/// Stacked filter `w̄ = [q; -G q]`, so that `w̄ᴴ ȳ_k = qᴴ d_k`.
pub fn stacked_filter(q: &[C64], g: &CMatrix) -> Result<Vec<C64>> {
    let gq = g.mul_vec(q)?;
    let mut w = q.to_vec();
    w.extend(gq.into_iter().map(|v| -v));
    Ok(w)
}

/// Covariance-whitening RETF from target and complement covariances,
/// normalized to 1 at `reference_mic`.
pub fn retf_from_covariances(
    target: &HermitianMatrix,
    complement: &HermitianMatrix,
    reference_mic: usize,
    ridge: f64,
) -> Result<Vec<C64>> {
    if reference_mic >= target.dim() {
        return Err(Error::DimensionMismatch(format!(
            "reference mic {reference_mic} out of range for {} channels",
            target.dim()
        )));
    }
    if !(target.trace() > 0.0) {
        return Err(Error::DegenerateMask("target covariance is zero".into()));
    }
    if !(complement.trace() > 0.0) {
        return Err(Error::DegenerateMask("complement covariance is zero".into()));
    }
    let whitening = complement.loaded(ridge);
    let eig = max_generalized_eigvec(target, &whitening)?;
    let a = whitening.as_matrix().mul_vec(&eig.vector)?;
    let r = a[reference_mic];
    if !(r.norm() > 1e-12 * norm(&a)) {
        return Err(Error::DegenerateMask(
            "relative transfer function vanishes at the reference microphone".into(),
        ));
    }
    Ok(a.into_iter().map(|v| v / r).collect())
}

/// RETF of the source selected by per-frame weights `gamma`.
pub fn estimate_retf(
    frames: &[Vec<C64>],
    gamma: &[f64],
    reference_mic: usize,
    ridge: f64,
) -> Result<Vec<C64>> {
    if frames.len() != gamma.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} mask weights for {} frames",
            gamma.len(),
            frames.len()
        )));
    }
    let Some(first) = frames.first() else {
        return Err(Error::Empty("no frames".into()));
    };
    let m = first.len();
    let sum_t: f64 = gamma.iter().sum();
    let sum_n: f64 = gamma.iter().map(|g| 1.0 - g).sum();
    if !(sum_t > 0.0) {
        return Err(Error::DegenerateMask("target mask is zero in every frame".into()));
    }
    if !(sum_n > 0.0) {
        return Err(Error::DegenerateMask("target mask is one in every frame".into()));
    }
    let target = HermitianMatrix::weighted_outer_sum(
        m,
        frames.iter().zip(gamma).map(|(d, &g)| (d.as_slice(), g / sum_t)),
    );
    let complement = HermitianMatrix::weighted_outer_sum(
        m,
        frames.iter().zip(gamma).map(|(d, &g)| (d.as_slice(), (1.0 - g) / sum_n)),
    );
    retf_from_covariances(&target, &complement, reference_mic, ridge)
}

/// `q = R⁻¹a / (aᴴR⁻¹a)`.
pub fn wmpdr_solve(r: &HermitianMatrix, a: &[C64], ridge: f64) -> Result<Vec<C64>> {
    if !(norm(a) > 0.0) {
        return Err(Error::InvalidConfig("steering vector is zero".into()));
    }
    let x = hermitian_solve_vec(r, a, ridge)?;
    let c = inner(a, &x);
    if !(c.norm() > 0.0) || !c.is_finite() {
        return Err(Error::Singular { index: 0, pivot: c.norm() });
    }
    Ok(x.into_iter().map(|v| v / c).collect())
}

/// Condition estimate of the constraint set from the Cholesky pivots of its
/// column-normalized Gram matrix.
pub fn constraint_condition(columns: &[Vec<C64>]) -> f64 {
    let n = columns.len();
    let gram = CMatrix::from_fn(n, n, |i, j| inner(&columns[i], &columns[j]));
    match HermitianMatrix::from_matrix(gram) {
        Ok(g) => normalized_condition(&g),
        Err(_) => f64::INFINITY,
    }
}

/// Condition estimate of a Hermitian matrix after unit-diagonal scaling.
fn normalized_condition(a: &HermitianMatrix) -> f64 {
    let n = a.dim();
    let m = a.as_matrix();
    let scale: Vec<f64> = (0..n).map(|i| m[(i, i)].re.sqrt()).collect();
    if scale.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return f64::INFINITY;
    }
    let scaled = CMatrix::from_fn(n, n, |i, j| m[(i, j)] / (scale[i] * scale[j]));
    let Ok(scaled) = HermitianMatrix::from_matrix(scaled) else {
        return f64::INFINITY;
    };
    match Cholesky::factor(&scaled) {
        Ok(chol) => {
            let (lo, hi) = chol.pivot_range();
            (hi / lo).powi(2)
        }
        Err(_) => f64::INFINITY,
    }
}

/// `q = R⁻¹C (CᴴR⁻¹C)⁻¹ p` for constraint columns `C = [ā, b̄_1, …]`.
///
/// A single column goes through [`wmpdr_solve`], so an empty interferer set
/// reproduces the wMPDR solution exactly.
pub fn wlcmp_solve(
    r: &HermitianMatrix,
    columns: &[Vec<C64>],
    response: &[C64],
    ridge: f64,
) -> Result<Vec<C64>> {
    let m = r.dim();
    if columns.is_empty() || columns.len() > m {
        return Err(Error::DimensionMismatch(format!(
            "{} constraints for {m} channels",
            columns.len()
        )));
    }
    if response.len() != columns.len() || columns.iter().any(|c| c.len() != m) {
        return Err(Error::DimensionMismatch(
            "constraint columns and responses must conform".into(),
        ));
    }
    if columns.len() == 1 {
        let q = wmpdr_solve(r, &columns[0], ridge)?;
        if response[0] == C64::new(1.0, 0.0) {
            return Ok(q);
        }
        // qᴴa = 1, so scaling by conj(p) gives qᴴa = p
        let p = response[0].conj();
        return Ok(q.into_iter().map(|v| v * p).collect());
    }
    let condition = constraint_condition(columns);
    if !(condition <= MAX_CONSTRAINT_CONDITION) {
        return Err(Error::RankDeficient { condition });
    }
    let c = CMatrix::from_columns(columns)?;
    let x = hermitian_solve(r, &c, ridge)?;
    let gram = HermitianMatrix::from_matrix(c.conj_transpose().matmul(&x)?)?;
    // the whitened constraints can be ill-posed even when C itself is not
    let condition = normalized_condition(&gram);
    if !(condition <= MAX_CONSTRAINT_CONDITION) {
        return Err(Error::RankDeficient { condition });
    }
    // Cᴴq = p with q = X μ  ⇒  (CᴴX) μ = p
    let mu = hermitian_solve_vec(&gram, response, 0.0)?;
    let q = x.mul_vec(&mu)?;
    let scale = response.iter().map(|p| p.norm()).fold(1.0, f64::max);
    if !(constraint_residual(&q, columns, response) <= CONSTRAINT_TOLERANCE * scale) {
        return Err(Error::RankDeficient { condition });
    }
    Ok(q)
}

/// `max_j |c_jᴴ q - p_j|`.
pub fn constraint_residual(q: &[C64], columns: &[Vec<C64>], response: &[C64]) -> f64 {
    columns
        .iter()
        .zip(response)
        .map(|(c, p)| (inner(q, c) - p).norm())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMode {
    Wmpdr,
    Wlcmp,
}

/// Final linear filter of one bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BinFilter {
    pub q: Vec<C64>,
    /// Prediction matrix with its delay and length; absent for
    /// instantaneous filters.
    pub prediction: Option<(CMatrix, usize, usize)>,
}

impl BinFilter {
    fn passthrough(channels: usize, reference_mic: usize) -> Self {
        let mut q = vec![C64::new(0.0, 0.0); channels];
        q[reference_mic] = C64::new(1.0, 0.0);
        Self { q, prediction: None }
    }

    /// Applies the filter to the frames of one bin.
    pub fn apply(&self, frames: &[Vec<C64>]) -> Result<Vec<C64>> {
        match &self.prediction {
            None => Ok(frames.iter().map(|y| inner(&self.q, y)).collect()),
            Some((g, delay, length)) => {
                let obs = stack_frames(frames, *delay, *length)?;
                let d = dereverberate(&obs, g)?;
                Ok(d.iter().map(|v| inner(&self.q, v)).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinFailureRecord {
    pub bin: usize,
    pub error: Error,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    /// `Σ_k (ln λ_k + |z_k|²/λ_k)` after each iteration, summed over the bins
    /// that succeeded.
    pub objective: Vec<f64>,
    /// The same per bin; empty for failed bins and non-iterative filters.
    pub bin_objective: Vec<Vec<f64>>,
    /// Largest constraint residual over all successful bins.
    pub max_constraint_residual: f64,
    pub failed_bins: Vec<BinFailureRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerOutput {
    /// Single-channel output spectrogram.
    pub z: MultichannelSpectrogram,
    pub filters: Vec<BinFilter>,
    pub diagnostics: Diagnostics,
}

impl BeamformerOutput {
    /// Applies the final per-bin filters to another spectrogram of the same
    /// shape, e.g. an oracle component of the mixture.
    pub fn apply_to(&self, spec: &MultichannelSpectrogram) -> Result<MultichannelSpectrogram> {
        if spec.bins() != self.filters.len() || spec.frames() != self.z.frames() {
            return Err(Error::DimensionMismatch(
                "spectrogram shape differs from the beamformer input".into(),
            ));
        }
        let per_bin: Vec<Vec<C64>> = par::map_range(self.filters.len(), |f| {
            self.filters[f].apply(&spec.bin_vectors(f))
        })
        .into_iter()
        .collect::<Result<_>>()?;
        MultichannelSpectrogram::from_bins(spec.frames(), &per_bin)
    }
}

struct BinOutcome {
    z: Vec<C64>,
    filter: BinFilter,
    objective: Vec<f64>,
    residual: f64,
}

fn check_masks(spec: &MultichannelSpectrogram, masks: &MaskSet, sources: &[usize]) -> Result<()> {
    if masks.frames() != spec.frames() || masks.bins() != spec.bins() {
        return Err(Error::DimensionMismatch(format!(
            "masks are {}x{}, spectrogram is {}x{}",
            masks.frames(),
            masks.bins(),
            spec.frames(),
            spec.bins()
        )));
    }
    if let Some(&i) = sources.iter().find(|&&i| i >= masks.sources()) {
        return Err(Error::DimensionMismatch(format!(
            "mask index {i} out of range for {} planes",
            masks.sources()
        )));
    }
    Ok(())
}

fn check_reference(spec: &MultichannelSpectrogram, reference_mic: usize) -> Result<()> {
    if spec.channels() == 0 || spec.frames() == 0 || spec.bins() == 0 {
        return Err(Error::Empty("spectrogram has no data".into()));
    }
    if reference_mic >= spec.channels() {
        return Err(Error::DimensionMismatch(format!(
            "reference mic {reference_mic} out of range for {} channels",
            spec.channels()
        )));
    }
    Ok(())
}

fn assemble(
    spec: &MultichannelSpectrogram,
    outcomes: Vec<std::result::Result<BinOutcome, Error>>,
    reference_mic: usize,
    contain: bool,
) -> Result<BeamformerOutput> {
    let mut diagnostics = Diagnostics::default();
    let mut per_bin = Vec::with_capacity(outcomes.len());
    let mut filters = Vec::with_capacity(outcomes.len());
    for (f, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(o) => {
                if diagnostics.objective.len() < o.objective.len() {
                    diagnostics.objective.resize(o.objective.len(), 0.0);
                }
                for (acc, v) in diagnostics.objective.iter_mut().zip(&o.objective) {
                    *acc += v;
                }
                diagnostics.max_constraint_residual = diagnostics.max_constraint_residual.max(o.residual);
                diagnostics.bin_objective.push(o.objective);
                per_bin.push(o.z);
                filters.push(o.filter);
            }
            Err(error) => {
                if !contain {
                    return Err(error);
                }
                log::warn!("bin {f}: {error}; passing the reference microphone through");
                diagnostics.failed_bins.push(BinFailureRecord { bin: f, error });
                diagnostics.bin_objective.push(Vec::new());
                per_bin.push((0..spec.frames()).map(|k| spec.get(reference_mic, k, f)).collect());
                filters.push(BinFilter::passthrough(spec.channels(), reference_mic));
            }
        }
    }
    Ok(BeamformerOutput {
        z: MultichannelSpectrogram::from_bins(spec.frames(), &per_bin)?,
        filters,
        diagnostics,
    })
}

fn responses(interferers: usize, delta: f64) -> Vec<C64> {
    let mut p = vec![C64::new(1.0, 0.0)];
    p.extend(std::iter::repeat_n(C64::new(delta, 0.0), interferers));
    p
}

fn conv_bin(
    obs: &StackedObservation,
    target: &[f64],
    interferers: &[Vec<f64>],
    cfg: &ConvBeamformerConfig,
    mode: ConvMode,
    bin: usize,
) -> Result<BinOutcome> {
    let frames = obs.frames();
    let m = obs.channels();
    let fail = |iteration: usize| {
        move |e: Error| Error::BinFailure {
            bin,
            iteration,
            source: Box::new(e),
        }
    };
    let power: Vec<f64> = obs
        .current
        .iter()
        .map(|y| y.iter().map(C64::norm_sqr).sum())
        .collect();
    let mean = power.iter().sum::<f64>() / frames as f64;
    let floor = (cfg.lambda_floor * mean).max(f64::MIN_POSITIVE);
    let mut lambda: Vec<f64> = power.iter().map(|p| p.max(floor)).collect();
    let response = match mode {
        ConvMode::Wmpdr => responses(0, cfg.delta),
        ConvMode::Wlcmp => responses(interferers.len(), cfg.delta),
    };

    let mut objective = Vec::with_capacity(cfg.iterations);
    let mut last = None;
    for it in 0..cfg.iterations {
        let weights = frame_weights(&lambda);
        let (r_tilde, p_tilde) = delayed_correlations(obs, &weights);
        let g = hermitian_solve(&r_tilde, &p_tilde, cfg.ridge).map_err(fail(it))?;
        let d = dereverberate(obs, &g).map_err(fail(it))?;

        let columns = match (&last, cfg.refresh_retf) {
            (Some((_, _, _, columns)), false) => Vec::clone(columns),
            _ => {
                let mut columns =
                    vec![estimate_retf(&d, target, cfg.reference_mic, cfg.ridge).map_err(fail(it))?];
                if mode == ConvMode::Wlcmp {
                    for gamma in interferers {
                        columns.push(
                            estimate_retf(&d, gamma, cfg.reference_mic, cfg.ridge).map_err(fail(it))?,
                        );
                    }
                }
                columns
            }
        };
        let r_d = HermitianMatrix::weighted_outer_sum(
            m,
            d.iter().zip(&weights).map(|(v, &w)| (v.as_slice(), w)),
        );
        let q = wlcmp_solve(&r_d, &columns, &response, cfg.ridge).map_err(fail(it))?;

        let z: Vec<C64> = d.iter().map(|v| inner(&q, v)).collect();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(fail(it)(Error::Singular { index: 0, pivot: f64::NAN }));
        }
        lambda = z.iter().map(|v| v.norm_sqr().max(floor)).collect();
        objective.push(
            z.iter()
                .zip(&lambda)
                .map(|(v, l)| l.ln() + v.norm_sqr() / l)
                .sum(),
        );
        last = Some((z, q, g, columns));
    }
    let (z, q, g, columns) = last.expect("at least one iteration");
    Ok(BinOutcome {
        residual: constraint_residual(&q, &columns, &response),
        z,
        filter: BinFilter {
            q,
            prediction: Some((g, obs.frame_delay, obs.filter_length)),
        },
        objective,
    })
}

/// Iterative convolutional beamformer extracting mask plane `target`.
///
/// In [`ConvMode::Wlcmp`] the planes listed in `interferers` add constraints
/// with response `cfg.delta`; [`ConvMode::Wmpdr`] ignores them.
pub fn run_conv_beamformer(
    spec: &MultichannelSpectrogram,
    masks: &MaskSet,
    target: usize,
    interferers: &[usize],
    cfg: &ConvBeamformerConfig,
    stft: &StftConfig,
    mode: ConvMode,
) -> Result<BeamformerOutput> {
    cfg.validate()?;
    check_reference(spec, cfg.reference_mic)?;
    let mut used = vec![target];
    used.extend_from_slice(interferers);
    check_masks(spec, masks, &used)?;
    if stft.bins() != spec.bins() {
        return Err(Error::DimensionMismatch(format!(
            "stft config has {} bins, spectrogram {}",
            stft.bins(),
            spec.bins()
        )));
    }
    let outcomes = par::map_range(spec.bins(), |f| {
        let obs = stack_observations(spec, f, cfg, stft)?;
        let gamma = masks.bin_weights(target, f);
        let others: Vec<Vec<f64>> = interferers.iter().map(|&i| masks.bin_weights(i, f)).collect();
        conv_bin(&obs, &gamma, &others, cfg, mode, f)
    });
    assemble(spec, outcomes, cfg.reference_mic, cfg.contain_failures)
}

fn instantaneous_bin(
    frames: &[Vec<C64>],
    covariance: &HermitianMatrix,
    columns: Vec<Vec<C64>>,
    response: &[C64],
    ridge: f64,
) -> Result<BinOutcome> {
    let q = wlcmp_solve(covariance, &columns, response, ridge)?;
    let z = frames.iter().map(|y| inner(&q, y)).collect();
    Ok(BinOutcome {
        residual: constraint_residual(&q, &columns, response),
        z,
        filter: BinFilter { q, prediction: None },
        objective: Vec::new(),
    })
}

fn sample_covariance(frames: &[Vec<C64>]) -> HermitianMatrix {
    let w = 1.0 / frames.len() as f64;
    HermitianMatrix::weighted_outer_sum(frames[0].len(), frames.iter().map(|y| (y.as_slice(), w)))
}

fn conventional(
    spec: &MultichannelSpectrogram,
    masks: &MaskSet,
    target: usize,
    interferers: &[usize],
    delta: f64,
    cfg: &ConvBeamformerConfig,
) -> Result<BeamformerOutput> {
    cfg.validate()?;
    check_reference(spec, cfg.reference_mic)?;
    let mut used = vec![target];
    used.extend_from_slice(interferers);
    check_masks(spec, masks, &used)?;
    let response = responses(interferers.len(), delta);
    let outcomes = par::map_range(spec.bins(), |f| {
        let frames = spec.bin_vectors(f);
        let wrap = |e: Error| Error::BinFailure {
            bin: f,
            iteration: 0,
            source: Box::new(e),
        };
        let mut columns = Vec::with_capacity(used.len());
        for &i in &used {
            columns.push(
                estimate_retf(&frames, &masks.bin_weights(i, f), cfg.reference_mic, cfg.ridge)
                    .map_err(wrap)?,
            );
        }
        let r_y = sample_covariance(&frames);
        instantaneous_bin(&frames, &r_y, columns, &response, cfg.ridge).map_err(wrap)
    });
    assemble(spec, outcomes, cfg.reference_mic, cfg.contain_failures)
}

/// MPDR beamformer on the unweighted mixture covariance with the RTF
/// estimated from the microphone signals.
pub fn mpdr(
    spec: &MultichannelSpectrogram,
    masks: &MaskSet,
    target: usize,
    cfg: &ConvBeamformerConfig,
) -> Result<BeamformerOutput> {
    conventional(spec, masks, target, &[], 0.0, cfg)
}

/// LCMP beamformer: MPDR plus interferer responses `delta`.
pub fn lcmp(
    spec: &MultichannelSpectrogram,
    masks: &MaskSet,
    target: usize,
    interferers: &[usize],
    delta: f64,
    cfg: &ConvBeamformerConfig,
) -> Result<BeamformerOutput> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidConfig(format!("delta must be finite and >= 0, got {delta}")));
    }
    conventional(spec, masks, target, interferers, delta, cfg)
}

/// MVDR (`delta = None`) or LCMV beamformer with caller-supplied per-bin
/// steering columns `[target, interferers…]` and noise covariances.
pub fn mvdr_lcmv_supplied(
    spec: &MultichannelSpectrogram,
    steering: &[Vec<Vec<C64>>],
    noise_cov: &[HermitianMatrix],
    delta: Option<f64>,
    cfg: &ConvBeamformerConfig,
) -> Result<BeamformerOutput> {
    check_reference(spec, cfg.reference_mic)?;
    let bins = spec.bins();
    if steering.len() != bins || noise_cov.len() != bins {
        return Err(Error::DimensionMismatch(format!(
            "need steering and covariance for each of {bins} bins"
        )));
    }
    if noise_cov.iter().any(|r| r.dim() != spec.channels()) {
        return Err(Error::DimensionMismatch("noise covariance dim differs from channel count".into()));
    }
    if let Some(d) = delta {
        if !(d >= 0.0 && d.is_finite()) {
            return Err(Error::InvalidConfig(format!("delta must be finite and >= 0, got {d}")));
        }
    }
    let outcomes = par::map_range(bins, |f| {
        let columns: Vec<Vec<C64>> = match delta {
            None => steering[f].iter().take(1).cloned().collect(),
            Some(_) => steering[f].clone(),
        };
        if columns.is_empty() {
            return Err(Error::BinFailure {
                bin: f,
                iteration: 0,
                source: Box::new(Error::Empty("no steering vector".into())),
            });
        }
        let response = responses(columns.len() - 1, delta.unwrap_or(0.0));
        instantaneous_bin(&spec.bin_vectors(f), &noise_cov[f], columns, &response, cfg.ridge).map_err(
            |e| Error::BinFailure {
                bin: f,
                iteration: 0,
                source: Box::new(e),
            },
        )
    });
    assemble(spec, outcomes, cfg.reference_mic, cfg.contain_failures)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::tests::random_pd;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cn(rng: &mut ChaCha8Rng) -> C64 {
        C64::new(StandardNormal.sample(rng), StandardNormal.sample(rng))
    }

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<C64> {
        (0..n).map(|_| cn(rng)).collect()
    }

    fn random_frames(k: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<C64>> {
        (0..k).map(|_| random_vec(m, rng)).collect()
    }

    #[test]
    fn default_config_values() {
        let cfg = ConvBeamformerConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.frame_delay, 4);
        assert_eq!(cfg.iterations, 10);
        assert_eq!(cfg.delta, 0.1);
        assert_eq!(cfg.filter_length(0.0), 20);
        assert_eq!(cfg.filter_length(799.9), 20);
        assert_eq!(cfg.filter_length(800.0), 16);
        assert_eq!(cfg.filter_length(1499.0), 16);
        assert_eq!(cfg.filter_length(1500.0), 8);
        assert_eq!(cfg.filter_length(8000.0), 8);
    }

    #[test]
    fn config_rejects_short_filters() {
        let cfg = ConvBeamformerConfig {
            filter_bands: vec![FilterBand { from_hz: 0.0, length: 4 }],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        assert!(stack_frames(&[vec![C64::new(1.0, 0.0)]], 4, 4).is_err());
        for bad in [
            ConvBeamformerConfig { frame_delay: 0, ..Default::default() },
            ConvBeamformerConfig { iterations: 0, ..Default::default() },
            ConvBeamformerConfig { delta: -0.1, ..Default::default() },
            ConvBeamformerConfig { lambda_floor: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn first_frame_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames = random_frames(3, 2, &mut rng);
        let obs = stack_frames(&frames, 4, 8).unwrap();
        let full = obs.full(0);
        assert_eq!(full.len(), 10);
        assert_eq!(&full[..2], frames[0].as_slice());
        assert!(full[2..].iter().all(|v| *v == C64::new(0.0, 0.0)));
    }

    #[test]
    fn stacking_matches_direct_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (m, k, b, l) = (3, 30, 2, 7);
        let frames = random_frames(k, m, &mut rng);
        let obs = stack_frames(&frames, b, l).unwrap();
        for kk in 0..k {
            for (slot, tau) in (b..l).enumerate() {
                for mm in 0..m {
                    let expect = if kk >= tau { frames[kk - tau][mm] } else { C64::new(0.0, 0.0) };
                    assert_eq!(obs.delayed[kk][slot * m + mm], expect);
                }
            }
        }
    }

    #[test]
    fn correlations_match_naive_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames = random_frames(25, 2, &mut rng);
        let obs = stack_frames(&frames, 1, 4).unwrap();
        let lambda: Vec<f64> = (0..25).map(|i| 0.5 + i as f64 * 0.1).collect();
        let wc = weighted_correlations(&obs, &lambda).unwrap();
        let dim = obs.delayed_dim();
        for i in 0..dim {
            for j in 0..dim {
                let mut s = C64::new(0.0, 0.0);
                for k in 0..25 {
                    s += obs.delayed[k][i] * obs.delayed[k][j].conj() / lambda[k];
                }
                assert!((wc.delayed[(i, j)] - s / 25.0).norm() < 1e-12);
            }
            for j in 0..2 {
                let mut s = C64::new(0.0, 0.0);
                for k in 0..25 {
                    s += obs.delayed[k][i] * obs.current[k][j].conj() / lambda[k];
                }
                assert!((wc.cross[(i, j)] - s / 25.0).norm() < 1e-12);
            }
        }
        // stacked correlation contains both blocks
        for i in 0..dim {
            for j in 0..2 {
                assert!((wc.stacked[(2 + i, j)] - wc.cross[(i, j)]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn correlation_homogeneity_and_single_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames = random_frames(12, 2, &mut rng);
        let obs = stack_frames(&frames, 1, 3).unwrap();
        let lambda = vec![1.0; 12];
        let a = weighted_correlations(&obs, &lambda).unwrap();
        let b = weighted_correlations(&obs, &[4.0; 12]).unwrap();
        assert_eq!(a.delayed.scaled(0.25), b.delayed);

        let last = stack_frames(&frames[..1], 1, 2).unwrap();
        let one = weighted_correlations(&last, &[1.0]).unwrap();
        let v = &last.full(0);
        for i in 0..v.len() {
            for j in 0..v.len() {
                assert_eq!(one.stacked[(i, j)], v[i] * v[j].conj());
            }
        }
        assert!(weighted_correlations(&obs, &[0.0; 12]).is_err());
    }

    #[test]
    fn dereverberation_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, k, b, l) = (2, 40, 1, 4);
        let frames = random_frames(k, m, &mut rng);
        let obs = stack_frames(&frames, b, l).unwrap();
        let zero = CMatrix::zeros(obs.delayed_dim(), m);
        assert_eq!(dereverberate(&obs, &zero).unwrap(), frames);

        // planted model y_k = Gᴴ ỹ_k + e_k, built recursively
        let g = CMatrix::from_fn(obs.delayed_dim(), m, |_, _| cn(&mut rng) * 0.1);
        let innov = random_frames(k, m, &mut rng);
        let mut y: Vec<Vec<C64>> = Vec::new();
        for kk in 0..k {
            let partial = {
                let mut with_current = y.clone();
                with_current.push(vec![C64::new(0.0, 0.0); m]);
                stack_frames(&with_current, b, l).unwrap().delayed[kk].clone()
            };
            let pred = g.conj_transpose_mul_vec(&partial).unwrap();
            y.push(pred.iter().zip(&innov[kk]).map(|(a, e)| a + e).collect());
        }
        let d = dereverberate(&stack_frames(&y, b, l).unwrap(), &g).unwrap();
        for (a, e) in d.iter().zip(&innov) {
            for (x, w) in a.iter().zip(e) {
                assert!((x - w).norm() < 1e-12);
            }
        }
        assert!(dereverberate(&obs, &CMatrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn factorization_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frames = random_frames(20, 3, &mut rng);
        let obs = stack_frames(&frames, 2, 5).unwrap();
        let g = CMatrix::from_fn(obs.delayed_dim(), 3, |_, _| cn(&mut rng));
        let q = random_vec(3, &mut rng);
        let w = stacked_filter(&q, &g).unwrap();
        let d = dereverberate(&obs, &g).unwrap();
        for k in 0..20 {
            let lhs = inner(&w, &obs.full(k));
            let rhs = inner(&q, &d[k]);
            assert!((lhs - rhs).norm() <= 1e-10 * (1.0 + rhs.norm()));
        }
    }

    #[test]
    fn retf_planted_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for m in [2, 4, 6] {
            let mut a = random_vec(m, &mut rng);
            let r0 = a[0];
            a.iter_mut().for_each(|v| *v /= r0);
            let target = HermitianMatrix::weighted_outer_sum(m, [(a.as_slice(), 2.5)]);
            let est = retf_from_covariances(&target, &HermitianMatrix::identity(m), 0, 1e-8).unwrap();
            for (x, y) in est.iter().zip(&a) {
                assert!((x - y).norm() < 1e-8 * norm(&a));
            }
        }
    }

    #[test]
    fn retf_mask_errors_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frames = random_frames(50, 3, &mut rng);
        assert!(matches!(estimate_retf(&frames, &[1.0; 50], 0, 1e-8), Err(Error::DegenerateMask(_))));
        assert!(matches!(estimate_retf(&frames, &[0.0; 50], 0, 1e-8), Err(Error::DegenerateMask(_))));
        let gamma: Vec<f64> = (0..50).map(|k| if k % 3 == 0 { 0.9 } else { 0.1 }).collect();
        let a = estimate_retf(&frames, &gamma, 0, 1e-8).unwrap();
        assert_eq!(a[0], C64::new(1.0, 0.0));
        let scaled: Vec<Vec<C64>> = frames.iter().map(|f| f.iter().map(|v| v * 3.7).collect()).collect();
        let b = estimate_retf(&scaled, &gamma, 0, 1e-8).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-9);
        }
    }

    #[test]
    fn wmpdr_closed_forms() {
        let e1 = vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)];
        let q = wmpdr_solve(&HermitianMatrix::identity(2), &e1, 0.0).unwrap();
        assert_eq!(q, e1);
        let r = HermitianMatrix::from_real_diagonal(&[1.0, 4.0]);
        let a = vec![C64::new(1.0, 0.0); 2];
        let q = wmpdr_solve(&r, &a, 0.0).unwrap();
        assert!((q[0] - C64::new(0.8, 0.0)).norm() < 1e-15);
        assert!((q[1] - C64::new(0.2, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn wlcmp_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = random_pd(4, &mut rng);
        let a = random_vec(4, &mut rng);
        let q1 = wmpdr_solve(&r, &a, 1e-8).unwrap();
        let q2 = wlcmp_solve(&r, &[a.clone()], &[C64::new(1.0, 0.0)], 1e-8).unwrap();
        assert_eq!(q1, q2);

        // orthonormal constraints with identity covariance and p = [1, 0]
        let e = |i: usize| {
            let mut v = vec![C64::new(0.0, 0.0); 3];
            v[i] = C64::new(1.0, 0.0);
            v
        };
        let q = wlcmp_solve(
            &HermitianMatrix::identity(3),
            &[e(1), e(2)],
            &[C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
            0.0,
        )
        .unwrap();
        assert_eq!(q, e(1));
    }

    #[test]
    fn parallel_constraints_are_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_vec(4, &mut rng);
        let b: Vec<C64> = a.iter().map(|v| v * C64::new(0.0, 2.0)).collect();
        let r = random_pd(4, &mut rng);
        let err = wlcmp_solve(&r, &[a, b], &[C64::new(1.0, 0.0), C64::new(0.1, 0.0)], 1e-8).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { condition } if condition > 1e12));
    }

    #[test]
    fn matched_filter_for_white_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_vec(3, &mut rng);
        let q = wmpdr_solve(&HermitianMatrix::identity(3), &a, 0.0).unwrap();
        let aa: f64 = a.iter().map(C64::norm_sqr).sum();
        for (x, y) in q.iter().zip(&a) {
            assert!((x - y / aa).norm() < 1e-14);
        }
    }
}
