use std::path::{Path, PathBuf};

use convbeam::aad::AadConfig;
use convbeam::beamform::ConvBeamformerConfig;
use convbeam::metrics::FwssnrConfig;
use convbeam::scene::{Condition, SyntheticSceneConfig};
use convbeam::stft::StftConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Wmpdr,
    Wlcmp,
    Mpdr,
    Lcmp,
    Mvdr,
    Lcmv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    #[default]
    Oracle,
    /// Directory with one `<condition>.cbtf` mask tensor per condition.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub conditions: Vec<Condition>,
    /// When false every condition is rendered without noise.
    pub add_noise: bool,
    pub reference_mic: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            conditions: Condition::ALL.to_vec(),
            add_noise: true,
            reference_mic: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceConfig {
    pub method: Method,
    pub masks: MaskSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticEeg {
    pub channels: usize,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EegSource {
    Synthetic(SyntheticEeg),
    /// Directory with one `<condition>.cbtf` tensor `[channels, samples]`
    /// sampled at the envelope rate.
    File(PathBuf),
}

impl Default for EegSource {
    fn default() -> Self {
        EegSource::Synthetic(SyntheticEeg {
            channels: 8,
            snr_db: 20.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub eeg: EegSource,
    /// Speaker the listener attends to.
    pub attended: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    /// Directory holding the artifacts of earlier stages; defaults to `--out`.
    pub input: Option<PathBuf>,
    pub scene: SyntheticSceneConfig,
    pub simulate: SimulateConfig,
    pub stft: StftConfig,
    pub beamformer: ConvBeamformerConfig,
    pub enhance: EnhanceConfig,
    pub aad: AadConfig,
    pub decode: DecodeConfig,
    pub metrics: FwssnrConfig,
}

impl PipelineConfig {
    /// Parses and validates a TOML config. Relative paths inside it resolve
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| CliError::config(path, e.message()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.input.as_mut() {
            resolve(p);
        }
        if let MaskSource::File(p) = &mut cfg.enhance.masks {
            resolve(p);
        }
        if let EegSource::File(p) = &mut cfg.decode.eeg {
            resolve(p);
        }
        cfg.validate().map_err(|m| CliError::config(path, m))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let fs = self.scene.sample_rate;
        if self.stft.sample_rate != fs || self.metrics.sample_rate != fs {
            return Err(format!(
                "stft ({} Hz) and metrics ({} Hz) must run at the scene rate {fs} Hz",
                self.stft.sample_rate, self.metrics.sample_rate
            ));
        }
        self.stft.validate().map_err(|e| format!("stft: {e}"))?;
        self.beamformer.validate().map_err(|e| format!("beamformer: {e}"))?;
        self.metrics.validate().map_err(|e| format!("metrics: {e}"))?;
        if self.simulate.conditions.is_empty() {
            return Err("simulate.conditions is empty".into());
        }
        let mics = self.scene.ir.mic_positions.len();
        if self.simulate.reference_mic >= mics || self.beamformer.reference_mic >= mics {
            return Err(format!("reference mic out of range for {mics} microphones"));
        }
        if self.decode.attended >= self.scene.azimuths.len() {
            return Err(format!(
                "decode.attended {} out of range for {} speakers",
                self.decode.attended,
                self.scene.azimuths.len()
            ));
        }
        if let EegSource::Synthetic(s) = self.decode.eeg {
            if s.channels == 0 || !s.snr_db.is_finite() {
                return Err("synthetic EEG needs channels > 0 and a finite snr_db".into());
            }
        }
        for dir in [
            match &self.enhance.masks {
                MaskSource::File(p) => Some(p),
                MaskSource::Oracle => None,
            },
            match &self.decode.eeg {
                EegSource::File(p) => Some(p),
                EegSource::Synthetic(_) => None,
            },
        ]
        .into_iter()
        .flatten()
        {
            for c in &self.simulate.conditions {
                let f = dir.join(format!("{}.cbtf", c.name()));
                if !f.is_file() {
                    return Err(format!("referenced file {} does not exist", f.display()));
                }
            }
        }
        Ok(())
    }

    /// The seed, with a command-line override taking precedence.
    pub fn seed(&self, cli: Option<u64>) -> Result<u64> {
        cli.or(self.seed)
            .ok_or_else(|| CliError::config("config", "a seed is required (set `seed` or pass --seed)"))
    }

    pub fn input_dir<'a>(&'a self, out: &'a Path) -> &'a Path {
        self.input.as_deref().unwrap_or(out)
    }
}
