//! Time-frequency masks: oracle ratio masks, alignment across microphones,
//! averaging, and file ingestion of externally estimated masks.

use std::path::Path;

use crate::error::{Error, Result};
use crate::stft::MultichannelSpectrogram;
use crate::tensor::{Tensor, TensorError};

/// Masks `γ_{i,k,f}` for `I` speakers plus a trailing noise plane.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    frames: usize,
    bins: usize,
    planes: Vec<Vec<f64>>,
}

impl MaskSet {
    pub fn new(frames: usize, bins: usize, planes: Vec<Vec<f64>>) -> Result<Self> {
        if planes.is_empty() {
            return Err(Error::Empty("mask set without planes".into()));
        }
        if planes.iter().any(|p| p.len() != frames * bins) {
            return Err(Error::DimensionMismatch(format!(
                "mask planes must hold {frames}x{bins} values"
            )));
        }
        if let Some(v) = planes.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidConfig(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self {
            frames,
            bins,
            planes,
        })
    }

    /// A set of uniform planes, `value` everywhere.
    pub fn constant(sources: usize, frames: usize, bins: usize, value: f64) -> Result<Self> {
        Self::new(frames, bins, vec![vec![value; frames * bins]; sources])
    }

    pub fn sources(&self) -> usize {
        self.planes.len()
    }

    /// Number of speakers (planes excluding the noise plane).
    pub fn speakers(&self) -> usize {
        self.planes.len() - 1
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn plane(&self, i: usize) -> &[f64] {
        &self.planes[i]
    }

    pub fn planes(&self) -> &[Vec<f64>] {
        &self.planes
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize, f: usize) -> f64 {
        self.planes[i][k * self.bins + f]
    }

    /// Mask of source `i` at bin `f`, indexed by frame.
    pub fn bin_weights(&self, i: usize, f: usize) -> Vec<f64> {
        (0..self.frames).map(|k| self.get(i, k, f)).collect()
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.frames == other.frames && self.bins == other.bins && self.sources() == other.sources()
    }

    /// Reorders planes so that output plane `i` is input plane `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            frames: self.frames,
            bins: self.bins,
            planes: perm.iter().map(|&j| self.planes[j].clone()).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::real(
            vec![self.sources(), self.frames, self.bins],
            self.planes.concat(),
        )
        .expect("consistent shape")
    }
}

/// Ideal ratio masks from the oracle components at microphone `mic`.
///
/// `γ_i = |X_i| / (Σ_j |X_j| + |V|)`, the noise plane takes `|V|` over the same
/// denominator, and silent bins get `1 / (I + 1)` for every source.
pub fn oracle_irm(
    components: &[MultichannelSpectrogram],
    noise: &MultichannelSpectrogram,
    mic: usize,
) -> Result<MaskSet> {
    if components.is_empty() {
        return Err(Error::Empty("no speech components".into()));
    }
    if components.iter().any(|c| !c.same_dims(noise)) {
        return Err(Error::DimensionMismatch(
            "components and noise spectrograms differ in shape".into(),
        ));
    }
    if mic >= noise.channels() {
        return Err(Error::DimensionMismatch(format!(
            "mic {mic} out of range for {} channels",
            noise.channels()
        )));
    }
    let (_, frames, bins) = noise.dims();
    let sources = components.len() + 1;
    let uniform = 1.0 / sources as f64;
    let mut planes = vec![vec![0.0; frames * bins]; sources];
    let noise_plane = noise.channel(mic);
    let comp_planes: Vec<&[_]> = components.iter().map(|c| c.channel(mic)).collect();
    let mut mags = vec![0.0; sources];
    for idx in 0..frames * bins {
        for (i, p) in comp_planes.iter().enumerate() {
            mags[i] = p[idx].norm();
        }
        mags[sources - 1] = noise_plane[idx].norm();
        let total: f64 = mags.iter().sum();
        if total > 0.0 {
            for (plane, &m) in planes.iter_mut().zip(&mags) {
                plane[idx] = m / total;
            }
        } else {
            for plane in planes.iter_mut() {
                plane[idx] = uniform;
            }
        }
    }
    MaskSet::new(frames, bins, planes)
}

/// Mask sets reordered to agree with a reference microphone.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskAlignment {
    pub aligned: Vec<MaskSet>,
    /// `permutations[m][i]` is the input plane of mic `m` placed in slot `i`.
    pub permutations: Vec<Vec<usize>>,
}

/// Resolves the source-permutation ambiguity between microphones by
/// exhaustive least-squares matching against `reference_mic`.
pub fn align_masks(per_mic: &[MaskSet], reference_mic: usize) -> Result<MaskAlignment> {
    let reference = per_mic
        .get(reference_mic)
        .ok_or_else(|| Error::DimensionMismatch(format!("reference mic {reference_mic} missing")))?;
    if per_mic.iter().any(|s| !s.same_shape(reference)) {
        return Err(Error::DimensionMismatch("mask sets differ in shape".into()));
    }
    let n = reference.sources();
    if n > 6 {
        return Err(Error::InvalidConfig(format!(
            "exhaustive alignment supports at most 6 sources, got {n}"
        )));
    }
    let candidates = permutations(n);
    let mut aligned = Vec::with_capacity(per_mic.len());
    let mut perms = Vec::with_capacity(per_mic.len());
    for (m, set) in per_mic.iter().enumerate() {
        if m == reference_mic {
            aligned.push(set.clone());
            perms.push((0..n).collect());
            continue;
        }
        // cost[i][j]: squared distance between reference plane i and plane j
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| squared_distance(reference.plane(i), set.plane(j)))
                    .collect()
            })
            .collect();
        let best = candidates
            .iter()
            .map(|p| (p, p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>()))
            .fold(None::<(&Vec<usize>, f64)>, |acc, (p, c)| match acc {
                Some((_, bc)) if bc <= c => acc,
                _ => Some((p, c)),
            })
            .map(|(p, _)| p.clone())
            .expect("at least one permutation");
        aligned.push(set.permuted(&best));
        perms.push(best);
    }
    Ok(MaskAlignment {
        aligned,
        permutations: perms,
    })
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// All permutations of `0..n` in lexicographic order (identity first).
pub(crate) fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        out.push(p.clone());
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).unwrap();
        p.swap(i - 1, j);
        p[i..].reverse();
    }
}

/// Entrywise mean over microphones.
pub fn average_masks(aligned: &[MaskSet]) -> Result<MaskSet> {
    let first = aligned
        .first()
        .ok_or_else(|| Error::Empty("no mask sets to average".into()))?;
    if aligned.iter().any(|s| !s.same_shape(first)) {
        return Err(Error::DimensionMismatch("mask sets differ in shape".into()));
    }
    let count = aligned.len() as f64;
    let planes = (0..first.sources())
        .map(|i| {
            let mut acc = vec![0.0; first.frames * first.bins];
            for set in aligned {
                for (a, v) in acc.iter_mut().zip(set.plane(i)) {
                    *a += v;
                }
            }
            acc.iter().map(|a| (a / count).clamp(0.0, 1.0)).collect()
        })
        .collect();
    MaskSet::new(first.frames, first.bins, planes)
}

/// A mask set read from disk, with the number of values clamped into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedMasks {
    pub masks: MaskSet,
    pub clamped: usize,
}

/// Stores a mask set as a rank-3 `[sources, frames, bins]` f64 tensor.
pub fn store_masks(set: &MaskSet, path: impl AsRef<Path>) -> Result<()> {
    set.to_tensor().write(path)
}

/// Parses a rank-3 real tensor into a mask set, clamping out-of-range values.
pub fn masks_from_tensor(t: &Tensor) -> Result<LoadedMasks> {
    let [sources, frames, bins] = t.dims[..] else {
        return Err(TensorError::ShapeMismatch {
            expected: vec![0, 0, 0],
            found: t.dims.clone(),
        }
        .into());
    };
    let values = t.to_f64()?;
    let mut clamped = 0;
    let mut planes = Vec::with_capacity(sources);
    for chunk in values.chunks(frames * bins.max(1)).take(sources) {
        let mut plane = Vec::with_capacity(chunk.len());
        for &v in chunk {
            if v.is_nan() {
                return Err(Error::InvalidConfig("NaN in mask file".into()));
            }
            let c = v.clamp(0.0, 1.0);
            if c != v {
                clamped += 1;
            }
            plane.push(c);
        }
        planes.push(plane);
    }
    if clamped > 0 {
        log::warn!("clamped {clamped} mask values into [0, 1]");
    }
    Ok(LoadedMasks {
        masks: MaskSet::new(frames, bins, planes)?,
        clamped,
    })
}

pub fn load_masks(path: impl AsRef<Path>) -> Result<LoadedMasks> {
    masks_from_tensor(&Tensor::read(path)?)
}
