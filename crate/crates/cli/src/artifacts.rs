//! On-disk layout shared by the stages.
//!
//! Every condition gets its own directory under the output root:
//!
//! ```text
//! <condition>/mix.wav            microphone signals, float32
//! <condition>/sources.cbtf       dry sources        [speakers, samples]
//! <condition>/reverberant.cbtf   speech images      [speakers, mics, samples]
//! <condition>/anechoic.cbtf      direct-path images [speakers, mics, samples]
//! <condition>/noise.cbtf         scaled noise       [mics, samples]
//! <condition>/scene.json         SceneMeta
//! <condition>/enhanced_<i>.wav   beamformer output for speaker i
//! <condition>/enhance.json       EnhanceRecord
//! <condition>/decode.json        DecodeRecord
//! report.json, conditions.csv, trials.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use convbeam::aad::Selection;
use convbeam::scene::{Condition, RenderedScene};
use convbeam::tensor::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::error::{CliError, Context, Result};

pub fn condition_dir(root: &Path, c: Condition) -> PathBuf {
    root.join(c.name())
}

pub fn enhanced_path(dir: &Path, speaker: usize) -> PathBuf {
    dir.join(format!("enhanced_{speaker}.wav"))
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            path: path.display().to_string(),
        })
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    require(path)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(path, e))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    t.write(path).context(|| path.display().to_string())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    require(path)?;
    Tensor::read(path).context(|| path.display().to_string())
}

/// Float32 WAV with one channel per row.
pub fn write_wav(path: &Path, sample_rate: u32, channels: &[Vec<f64>]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: channels.len() as u16,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| CliError::io(path, e))?;
    let len = channels.first().map_or(0, Vec::len);
    for t in 0..len {
        for c in channels {
            w.write_sample(c[t] as f32).map_err(|e| CliError::io(path, e))?;
        }
    }
    w.finalize().map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Audio {
    pub sample_rate: u32,
    pub channels: Vec<Vec<f64>>,
    /// `"float32"` or `"pcm16"`; 16-bit input is scaled by 1/32768.
    pub format: String,
}

pub fn read_wav(path: &Path) -> Result<Audio> {
    require(path)?;
    let mut r = hound::WavReader::open(path).map_err(|e| CliError::io(path, e))?;
    let spec = r.spec();
    let n = spec.channels as usize;
    let (flat, format): (Vec<f64>, &str) = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => (
            r.samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| CliError::io(path, e))?,
            "float32",
        ),
        (hound::SampleFormat::Int, 16) => (
            r.samples::<i16>()
                .map(|s| s.map(|v| f64::from(v) / 32768.0))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| CliError::io(path, e))?,
            "pcm16",
        ),
        (f, b) => {
            return Err(CliError::io(path, format!("unsupported WAV sample format {f:?}/{b} bit")))
        }
    };
    let mut channels = vec![Vec::with_capacity(flat.len() / n.max(1)); n];
    for (i, v) in flat.into_iter().enumerate() {
        channels[i % n].push(v);
    }
    Ok(Audio {
        sample_rate: spec.sample_rate,
        channels,
        format: format.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub condition: Condition,
    pub seed: u64,
    pub sample_rate: u32,
    pub samples: usize,
    pub azimuths: Vec<f64>,
    pub t60: f64,
    pub reference_mic: usize,
    pub noise_gain: f64,
    pub target_db: f64,
    pub achieved_db: f64,
    pub noiseless_db: f64,
    pub target_met: bool,
}

fn stack(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn dims_or_err(t: &Tensor, rank: usize, path: &Path) -> Result<Vec<usize>> {
    if t.dims.len() != rank {
        return Err(CliError::io(path, format!("expected a rank-{rank} tensor, found {:?}", t.dims)));
    }
    Ok(t.dims.clone())
}

fn rows(flat: &[f64], len: usize) -> Vec<Vec<f64>> {
    flat.chunks(len.max(1)).map(<[f64]>::to_vec).collect()
}

pub struct SceneFiles {
    pub meta: SceneMeta,
    pub sources: Vec<Vec<f64>>,
    pub rendered: RenderedScene,
    pub mix_format: String,
}

pub fn write_scene(dir: &Path, meta: &SceneMeta, sources: &[Vec<f64>], r: &RenderedScene) -> Result<()> {
    create_dir(dir)?;
    let (speakers, mics, len) = (r.num_sources(), r.num_mics(), r.len());
    write_wav(&dir.join("mix.wav"), r.sample_rate, &r.mics)?;
    let t = |dims: Vec<usize>, data: Vec<f64>| {
        Tensor::real(dims, data).map_err(|e| CliError::io(dir, e))
    };
    write_tensor(&dir.join("sources.cbtf"), &t(vec![speakers, len], stack(sources))?)?;
    let images = |x: &[Vec<Vec<f64>>]| x.iter().flat_map(|s| stack(s)).collect::<Vec<f64>>();
    write_tensor(&dir.join("reverberant.cbtf"), &t(vec![speakers, mics, len], images(&r.reverberant))?)?;
    write_tensor(&dir.join("anechoic.cbtf"), &t(vec![speakers, mics, len], images(&r.anechoic))?)?;
    write_tensor(&dir.join("noise.cbtf"), &t(vec![mics, len], stack(&r.noise))?)?;
    write_json(&dir.join("scene.json"), meta)
}

pub fn read_scene(dir: &Path) -> Result<SceneFiles> {
    let meta: SceneMeta = read_json(&dir.join("scene.json"))?;
    let mix_path = dir.join("mix.wav");
    let mix = read_wav(&mix_path)?;
    if mix.sample_rate != meta.sample_rate {
        return Err(CliError::io(&mix_path, format!("{} Hz, scene is {} Hz", mix.sample_rate, meta.sample_rate)));
    }
    let len = mix.channels.first().map_or(0, Vec::len);
    let mics = mix.channels.len();

    let load = |name: &str, rank: usize| -> Result<(Vec<usize>, Vec<f64>)> {
        let path = dir.join(name);
        let t = read_tensor(&path)?;
        let dims = dims_or_err(&t, rank, &path)?;
        if dims[rank - 1] != len || (rank == 3 && dims[1] != mics) {
            return Err(CliError::io(&path, format!("shape {dims:?} does not match {mics} x {len} mix")));
        }
        Ok((dims, t.to_f64().map_err(|e| CliError::io(&path, e))?))
    };
    let (_, sources) = load("sources.cbtf", 2)?;
    let images = |name: &str| -> Result<Vec<Vec<Vec<f64>>>> {
        let (_, flat) = load(name, 3)?;
        Ok(flat.chunks((mics * len).max(1)).map(|s| rows(s, len)).collect())
    };
    let reverberant = images("reverberant.cbtf")?;
    let anechoic = images("anechoic.cbtf")?;
    let (_, noise) = load("noise.cbtf", 2)?;
    Ok(SceneFiles {
        sources: rows(&sources, len),
        rendered: RenderedScene {
            sample_rate: meta.sample_rate,
            mics: mix.channels,
            reverberant,
            anechoic,
            noise: rows(&noise, len),
        },
        mix_format: mix.format,
        meta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerDiagnostics {
    pub speaker: usize,
    pub interferers: Vec<usize>,
    /// Objective summed over bins after each iteration; empty for
    /// instantaneous beamformers.
    pub objective: Vec<f64>,
    pub max_constraint_residual: f64,
    pub failed_bins: Vec<FailedBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedBin {
    pub bin: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhanceRecord {
    pub condition: Condition,
    pub method: Method,
    pub input_format: String,
    pub speakers: Vec<SpeakerDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub attended: usize,
    pub selection: Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub condition: Condition,
    pub trial_s: f64,
    pub envelope_rate: f64,
    pub eeg: String,
    pub trials: Vec<TrialRecord>,
    pub accuracy: f64,
}
