#![allow(dead_code)]

use convbeam::beamform::{BeamformerOutput, ConvBeamformerConfig};
use convbeam::masks::{oracle_irm, MaskSet};
use convbeam::metrics::{fwssnr, input_fwssnr, FwssnrConfig};
use convbeam::scene::{
    calibrate_noise_gain_with, condition_scene, render, synthetic_scene, Condition,
    RenderedScene, SyntheticSceneConfig,
};
use convbeam::stft::{analyze_padded, synthesize_padded, MultichannelSpectrogram, StftConfig};

pub struct Prepared {
    pub rendered: RenderedScene,
    pub stft: StftConfig,
    pub mix: MultichannelSpectrogram,
    /// Reverberant speech components per speaker.
    pub speech: Vec<MultichannelSpectrogram>,
    pub noise: MultichannelSpectrogram,
    pub masks: MaskSet,
    pub beamformer: ConvBeamformerConfig,
    pub metric: FwssnrConfig,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.rendered.len()
    }

    pub fn to_time(&self, spec: &MultichannelSpectrogram) -> Vec<f64> {
        synthesize_padded(spec, &self.stft, self.len()).unwrap().remove(0)
    }

    pub fn input_fwssnr(&self, speaker: usize) -> f64 {
        input_fwssnr(&self.rendered, speaker, 0, &self.metric).unwrap().value
    }

    pub fn output_fwssnr(&self, out: &BeamformerOutput, speaker: usize) -> f64 {
        fwssnr(&self.to_time(&out.z), &self.rendered.anechoic[speaker][0], &self.metric).unwrap()
    }

    pub fn delta_fwssnr(&self, out: &BeamformerOutput, speaker: usize) -> f64 {
        self.output_fwssnr(out, speaker) - self.input_fwssnr(speaker)
    }
}

/// Renders a synthetic scene; with `target_db` the noise is scaled so the
/// input fwSSNR averaged over speakers hits the target, otherwise it is
/// left out.
pub fn prepare(cfg: &SyntheticSceneConfig, seed: u64, target_db: Option<f64>) -> Prepared {
    let scene = synthetic_scene(cfg, seed).unwrap();
    let metric = FwssnrConfig::default();
    let rendered = match target_db {
        None => render(&scene, 0.0).unwrap(),
        Some(t) => {
            let comps = scene.components().unwrap();
            let speakers = cfg.azimuths.len();
            let cal = calibrate_noise_gain_with(&comps, t, |r| {
                let mut s = 0.0;
                for i in 0..speakers {
                    s += input_fwssnr(r, i, 0, &metric)?.value;
                }
                Ok(s / speakers as f64)
            })
            .unwrap();
            comps.mix(cal.gain)
        }
    };
    from_rendered(rendered)
}

/// Renders one of the named evaluation conditions.
pub fn prepare_condition(base: &SyntheticSceneConfig, condition: Condition, seed: u64) -> Prepared {
    let c = condition_scene(base, condition, seed, 0, &FwssnrConfig::default()).unwrap();
    from_rendered(c.rendered)
}

pub fn from_rendered(rendered: RenderedScene) -> Prepared {
    let metric = FwssnrConfig::default();
    let stft = StftConfig::default();
    let mix = analyze_padded(&rendered.mics, &stft).unwrap();
    let speech: Vec<_> = rendered
        .reverberant
        .iter()
        .map(|x| analyze_padded(x, &stft).unwrap())
        .collect();
    let noise = analyze_padded(&rendered.noise, &stft).unwrap();
    let masks = oracle_irm(&speech, &noise, 0).unwrap();
    Prepared {
        rendered,
        stft,
        mix,
        speech,
        noise,
        masks,
        beamformer: ConvBeamformerConfig::default(),
        metric,
    }
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
