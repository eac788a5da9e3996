use std::path::Path;

use convbeam::aad::{cross_validate, extract_envelope_with, split_trials, synthesize_eeg, Eeg, Envelope};
use convbeam::beamform::{
    lcmp, mpdr, mvdr_lcmv_supplied, retf_from_covariances, run_conv_beamformer, BeamformerOutput, ConvMode,
};
use convbeam::linalg::{HermitianMatrix, C64};
use convbeam::masks::{load_masks, oracle_irm, MaskSet};
use convbeam::metrics::{chance_upper_bound, fwssnr, FwssnrConfig};
use convbeam::scene::{condition_scene, mean_input_fwssnr, synthetic_scene, Condition};
use convbeam::stft::{analyze_padded, synthesize_padded, MultichannelSpectrogram};

use crate::artifacts::{
    condition_dir, create_dir, enhanced_path, read_json, read_scene, read_tensor, read_wav, write_json,
    write_scene, write_wav, DecodeRecord, EnhanceRecord, FailedBin, SceneFiles, SceneMeta, SpeakerDiagnostics,
    TrialRecord,
};
use crate::config::{EegSource, MaskSource, Method, PipelineConfig};
use crate::error::{CliError, Context, Result};
use crate::report::{ConditionReport, Decision, Report, SpeakerScore, TrialScore};

const CHANCE_ALPHA: f64 = 0.05;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn simulate(cfg: &PipelineConfig, out: &Path, seed: u64) -> Result<()> {
    let ref_mic = cfg.simulate.reference_mic;
    for &c in &cfg.simulate.conditions {
        let ctx = || format!("simulate {}", c.name());
        let (scene, rendered, noise_gain, achieved_db, noiseless_db, target_met) = if cfg.simulate.add_noise {
            let cs = condition_scene(&cfg.scene, c, seed, ref_mic, &cfg.metrics).context(ctx)?;
            (cs.scene, cs.rendered, cs.noise_gain, cs.achieved_db, cs.noiseless_db, cs.target_met)
        } else {
            let scene = synthetic_scene(&c.scene_config(&cfg.scene), seed).context(ctx)?;
            let rendered = scene.components().context(ctx)?.mix(0.0);
            let db = mean_input_fwssnr(&rendered, ref_mic, &cfg.metrics).context(ctx)?;
            (scene, rendered, 0.0, db, db, false)
        };
        let meta = SceneMeta {
            condition: c,
            seed,
            sample_rate: rendered.sample_rate,
            samples: rendered.len(),
            azimuths: cfg.scene.azimuths.clone(),
            t60: c.scene_config(&cfg.scene).ir.t60,
            reference_mic: ref_mic,
            noise_gain,
            target_db: c.target_db(),
            achieved_db,
            noiseless_db,
            target_met,
        };
        let sources: Vec<Vec<f64>> = scene.sources.into_iter().map(|s| s.samples).collect();
        write_scene(&condition_dir(out, c), &meta, &sources, &rendered)?;
        log::info!("{}: input fwSSNR {achieved_db:.2} dB (target {} dB)", c.name(), c.target_db());
    }
    Ok(())
}

fn load_condition(cfg: &PipelineConfig, root: &Path, c: Condition) -> Result<SceneFiles> {
    let dir = condition_dir(root, c);
    let files = read_scene(&dir)?;
    if files.meta.sample_rate != cfg.scene.sample_rate {
        return Err(CliError::config(
            dir.join("scene.json"),
            format!("scene at {} Hz, config expects {} Hz", files.meta.sample_rate, cfg.scene.sample_rate),
        ));
    }
    Ok(files)
}

fn spectra(cfg: &PipelineConfig, x: &[Vec<f64>], what: &str) -> Result<MultichannelSpectrogram> {
    analyze_padded(x, &cfg.stft).context(|| format!("stft of {what}"))
}

fn covariances(frames_of: impl Fn(usize) -> Vec<Vec<C64>>, bins: usize, channels: usize) -> Vec<HermitianMatrix> {
    (0..bins)
        .map(|f| {
            let frames = frames_of(f);
            let w = 1.0 / frames.len().max(1) as f64;
            HermitianMatrix::weighted_outer_sum(channels, frames.iter().map(|v| (v.as_slice(), w)))
        })
        .collect()
}

fn difference(a: &MultichannelSpectrogram, b: &[&MultichannelSpectrogram]) -> MultichannelSpectrogram {
    let mut data = a.as_slice().to_vec();
    for s in b {
        for (x, y) in data.iter_mut().zip(s.as_slice()) {
            *x -= y;
        }
    }
    let (m, k, f) = a.dims();
    MultichannelSpectrogram::from_data(m, k, f, data).expect("same dims")
}

/// MVDR / LCMV with steering vectors and undesired-signal covariances taken
/// from the oracle direct-path components.
fn supplied(
    cfg: &PipelineConfig,
    mix: &MultichannelSpectrogram,
    anechoic: &[MultichannelSpectrogram],
    target: usize,
    interferers: &[usize],
    lcmv: bool,
) -> Result<BeamformerOutput> {
    let (m, _, bins) = mix.dims();
    let bf = &cfg.beamformer;
    let unit = {
        let mut e = vec![C64::new(0.0, 0.0); m];
        e[bf.reference_mic] = C64::new(1.0, 0.0);
        e
    };
    let steer = |i: usize| -> Vec<Vec<C64>> {
        let own = covariances(|f| anechoic[i].bin_vectors(f), bins, m);
        let rest = covariances(|f| difference(mix, &[&anechoic[i]]).bin_vectors(f), bins, m);
        own.iter()
            .zip(&rest)
            .map(|(a, b)| retf_from_covariances(a, b, bf.reference_mic, bf.ridge).unwrap_or_else(|_| unit.clone()))
            .collect()
    };
    let mut columns = vec![steer(target)];
    let mut removed = vec![&anechoic[target]];
    if lcmv {
        for &j in interferers {
            columns.push(steer(j));
            removed.push(&anechoic[j]);
        }
    }
    let residual = difference(mix, &removed);
    let noise_cov = covariances(|f| residual.bin_vectors(f), bins, m);
    let steering: Vec<Vec<Vec<C64>>> = (0..bins).map(|f| columns.iter().map(|c| c[f].clone()).collect()).collect();
    let delta = lcmv.then_some(bf.delta);
    mvdr_lcmv_supplied(mix, &steering, &noise_cov, delta, bf).context(|| "mvdr/lcmv".into())
}

fn masks_for(cfg: &PipelineConfig, files: &SceneFiles, mix: &MultichannelSpectrogram, c: Condition) -> Result<MaskSet> {
    let masks = match &cfg.enhance.masks {
        MaskSource::Oracle => {
            let speech = files
                .rendered
                .reverberant
                .iter()
                .map(|x| spectra(cfg, x, "speech image"))
                .collect::<Result<Vec<_>>>()?;
            let noise = spectra(cfg, &files.rendered.noise, "noise")?;
            oracle_irm(&speech, &noise, cfg.beamformer.reference_mic).context(|| "oracle masks".into())?
        }
        MaskSource::File(dir) => {
            let path = dir.join(format!("{}.cbtf", c.name()));
            load_masks(&path).context(|| path.display().to_string())?.masks
        }
    };
    if masks.frames() != mix.frames() || masks.bins() != mix.bins() {
        return Err(CliError::config(
            "enhance.masks",
            format!(
                "{}: masks are {} x {}, spectrogram {} x {}",
                c.name(),
                masks.frames(),
                masks.bins(),
                mix.frames(),
                mix.bins()
            ),
        ));
    }
    Ok(masks)
}

pub fn enhance(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let input = cfg.input_dir(out);
    let bf = &cfg.beamformer;
    for &c in &cfg.simulate.conditions {
        let files = load_condition(cfg, input, c)?;
        let len = files.rendered.len();
        let mix = spectra(cfg, &files.rendered.mics, "mixture")?;
        let masks = match cfg.enhance.method {
            Method::Mvdr | Method::Lcmv => None,
            _ => Some(masks_for(cfg, &files, &mix, c)?),
        };
        let anechoic = match cfg.enhance.method {
            Method::Mvdr | Method::Lcmv => files
                .rendered
                .anechoic
                .iter()
                .map(|x| spectra(cfg, x, "direct-path image"))
                .collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };
        let dir = condition_dir(out, c);
        create_dir(&dir)?;
        let speakers = files.rendered.num_sources();
        let mut diagnostics = Vec::with_capacity(speakers);
        for i in 0..speakers {
            let interferers: Vec<usize> = (0..speakers).filter(|&j| j != i).collect();
            let ctx = || format!("enhance {} speaker {i}", c.name());
            let output = match (cfg.enhance.method, &masks) {
                (Method::Wmpdr, Some(m)) => {
                    run_conv_beamformer(&mix, m, i, &[], bf, &cfg.stft, ConvMode::Wmpdr).context(ctx)?
                }
                (Method::Wlcmp, Some(m)) => {
                    run_conv_beamformer(&mix, m, i, &interferers, bf, &cfg.stft, ConvMode::Wlcmp).context(ctx)?
                }
                (Method::Mpdr, Some(m)) => mpdr(&mix, m, i, bf).context(ctx)?,
                (Method::Lcmp, Some(m)) => lcmp(&mix, m, i, &interferers, bf.delta, bf).context(ctx)?,
                (Method::Mvdr, _) => supplied(cfg, &mix, &anechoic, i, &interferers, false)?,
                (Method::Lcmv, _) => supplied(cfg, &mix, &anechoic, i, &interferers, true)?,
                _ => unreachable!("masks are loaded for every mask-driven method"),
            };
            let z = synthesize_padded(&output.z, &cfg.stft, len).context(ctx)?;
            write_wav(&enhanced_path(&dir, i), files.meta.sample_rate, &z)?;
            let d = output.diagnostics;
            diagnostics.push(SpeakerDiagnostics {
                speaker: i,
                interferers,
                objective: d.objective,
                max_constraint_residual: d.max_constraint_residual,
                failed_bins: d
                    .failed_bins
                    .into_iter()
                    .map(|f| FailedBin {
                        bin: f.bin,
                        error: f.error.to_string(),
                    })
                    .collect(),
            });
        }
        write_json(
            &dir.join("enhance.json"),
            &EnhanceRecord {
                condition: c,
                method: cfg.enhance.method,
                input_format: files.mix_format,
                speakers: diagnostics,
            },
        )?;
    }
    Ok(())
}

fn read_enhanced(dir: &Path, speakers: usize, sample_rate: u32) -> Result<Vec<Vec<f64>>> {
    (0..speakers)
        .map(|i| {
            let path = enhanced_path(dir, i);
            let mut a = read_wav(&path)?;
            if a.sample_rate != sample_rate || a.channels.len() != 1 {
                return Err(CliError::io(&path, "expected a mono file at the scene rate"));
            }
            Ok(a.channels.remove(0))
        })
        .collect()
}

fn envelope(cfg: &PipelineConfig, x: &[f64], fs: u32) -> Result<Envelope> {
    extract_envelope_with(x, fs as f64, cfg.aad.envelope_rate, cfg.aad.cutoff_hz)
        .context(|| "envelope extraction".into())
}

pub fn decode(cfg: &PipelineConfig, out: &Path, seed: u64) -> Result<()> {
    let input = cfg.input_dir(out);
    let attended = cfg.decode.attended;
    for (ci, &c) in cfg.simulate.conditions.iter().enumerate() {
        let in_dir = condition_dir(input, c);
        let meta: SceneMeta = read_json(&in_dir.join("scene.json"))?;
        let fs = meta.sample_rate;
        let sources_path = in_dir.join("sources.cbtf");
        let sources = read_tensor(&sources_path)?;
        let speakers = *sources.dims.first().unwrap_or(&0);
        if sources.dims.len() != 2 || attended >= speakers {
            return Err(CliError::io(&sources_path, format!("need [speakers, samples] with speaker {attended}")));
        }
        let enhanced = read_enhanced(&in_dir, speakers, fs)?;
        let mut candidates = enhanced
            .iter()
            .map(|x| envelope(cfg, x, fs))
            .collect::<Result<Vec<_>>>()?;

        let (mut eeg, eeg_name) = match &cfg.decode.eeg {
            EegSource::Synthetic(s) => {
                let dry = sources.to_f64().map_err(|e| CliError::io(&sources_path, e))?;
                let len = sources.dims[1];
                let env = |i: usize| envelope(cfg, &dry[i * len..(i + 1) * len], fs);
                let other = (attended + 1) % speakers;
                let eeg = synthesize_eeg(
                    &env(attended)?,
                    &env(other)?,
                    s.channels,
                    s.snr_db,
                    seed.wrapping_add(ci as u64),
                )
                .context(|| format!("synthetic EEG for {}", c.name()))?;
                (eeg, format!("synthetic {} channels at {} dB", s.channels, s.snr_db))
            }
            EegSource::File(dir) => {
                let path = dir.join(format!("{}.cbtf", c.name()));
                let t = read_tensor(&path)?;
                let [channels, samples] = t.dims[..] else {
                    return Err(CliError::io(&path, "expected [channels, samples]"));
                };
                let flat = t.to_f64().map_err(|e| CliError::io(&path, e))?;
                let rows = if samples == 0 {
                    vec![Vec::new(); channels]
                } else {
                    flat.chunks(samples).map(<[f64]>::to_vec).collect()
                };
                (
                    Eeg {
                        sample_rate: cfg.aad.envelope_rate,
                        channels: rows,
                    },
                    path.display().to_string(),
                )
            }
        };
        let len = candidates.iter().map(Envelope::len).chain([eeg.len()]).min().unwrap_or(0);
        eeg = eeg.slice(0, len);
        for e in candidates.iter_mut() {
            *e = e.slice(0, len);
        }
        let ctx = || format!("decode {}", c.name());
        let set = split_trials(&eeg, &candidates, attended, cfg.aad.trial_s).context(ctx)?;
        let selections = cross_validate(&set, &cfg.aad).context(ctx)?;
        let correct = selections.iter().filter(|s| s.index == attended).count();
        let trials: Vec<TrialRecord> = selections
            .into_iter()
            .enumerate()
            .map(|(trial, selection)| TrialRecord {
                trial,
                attended,
                selection,
            })
            .collect();
        let dir = condition_dir(out, c);
        create_dir(&dir)?;
        write_json(
            &dir.join("decode.json"),
            &DecodeRecord {
                condition: c,
                trial_s: cfg.aad.trial_s,
                envelope_rate: cfg.aad.envelope_rate,
                eeg: eeg_name,
                accuracy: 100.0 * correct as f64 / trials.len() as f64,
                trials,
            },
        )?;
    }
    Ok(())
}

/// Index of the largest value, ties toward the lowest index.
fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

fn decision(output_db: &[f64], input_db: f64, selected: usize) -> Decision {
    let s = output_db[selected];
    Decision {
        selected,
        delta_db: s - input_db,
        correct: output_db.iter().enumerate().all(|(j, &o)| j == selected || s > o),
    }
}

fn segment_scores(
    metric: &FwssnrConfig,
    mics: &[Vec<f64>],
    outputs: &[Vec<f64>],
    reference: &[f64],
    range: std::ops::Range<usize>,
) -> convbeam::Result<(f64, Vec<f64>)> {
    let r = &reference[range.clone()];
    let input = mics
        .iter()
        .map(|y| fwssnr(&y[range.clone()], r, metric))
        .collect::<convbeam::Result<Vec<f64>>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    let out = outputs
        .iter()
        .map(|z| fwssnr(&z[range.clone()], r, metric))
        .collect::<convbeam::Result<Vec<f64>>>()?;
    Ok((input, out))
}

pub fn evaluate(cfg: &PipelineConfig, out: &Path) -> Result<Report> {
    let input = cfg.input_dir(out);
    let metric = &cfg.metrics;
    let mut conditions = Vec::new();
    for &c in &cfg.simulate.conditions {
        let dir = condition_dir(input, c);
        let files = load_condition(cfg, input, c)?;
        let r = &files.rendered;
        let (fs, len, ref_mic) = (files.meta.sample_rate, r.len(), files.meta.reference_mic);
        let outputs = read_enhanced(&dir, r.num_sources(), fs)?;
        let decode_path = dir.join("decode.json");
        let decoded: Option<DecodeRecord> = if decode_path.is_file() {
            Some(read_json(&decode_path)?)
        } else {
            None
        };
        let ctx = || format!("evaluate {}", c.name());

        let mut speakers = Vec::new();
        for (i, z) in outputs.iter().enumerate() {
            let reference = &r.anechoic[i][ref_mic];
            let (input_db, out_db) =
                segment_scores(metric, &r.mics, std::slice::from_ref(z), reference, 0..len).context(ctx)?;
            speakers.push(SpeakerScore {
                speaker: i,
                input_db,
                output_db: out_db[0],
                delta_db: out_db[0] - input_db,
            });
        }

        let trial_s = decoded.as_ref().map_or(cfg.aad.trial_s, |d| d.trial_s);
        let per = ((trial_s * fs as f64).round() as usize).min(len).max(1);
        let count = (len / per).max(1);
        let mut trials = Vec::with_capacity(count);
        for t in 0..count {
            let range = t * per..((t + 1) * per).min(len);
            let est = decoded.as_ref().and_then(|d| d.trials.get(t));
            let attended = est.map_or(cfg.decode.attended, |e| e.attended);
            let reference = &r.anechoic[attended][ref_mic];
            let (input_db, output_db) =
                segment_scores(metric, &r.mics, &outputs, reference, range.clone()).context(ctx)?;
            trials.push(TrialScore {
                trial: t,
                attended,
                start_s: range.start as f64 / fs as f64,
                len_s: range.len() as f64 / fs as f64,
                input_db,
                oracle: decision(&output_db, input_db, argmax(&output_db)),
                estimated: est.map(|e| decision(&output_db, input_db, e.selection.index)),
                output_db,
            });
        }
        let accuracy = |d: Vec<&Decision>| 100.0 * d.iter().filter(|d| d.correct).count() as f64 / d.len() as f64;
        let delta = |d: Vec<&Decision>| mean(&d.iter().map(|d| d.delta_db).collect::<Vec<_>>());
        let oracle: Vec<&Decision> = trials.iter().map(|t| &t.oracle).collect();
        let estimated: Option<Vec<&Decision>> = trials.iter().map(|t| t.estimated.as_ref()).collect();
        conditions.push(ConditionReport {
            condition: c,
            target_db: c.target_db(),
            input_db: mean(&speakers.iter().map(|s| s.input_db).collect::<Vec<_>>()),
            oracle_accuracy: accuracy(oracle.clone()),
            oracle_delta_db: delta(oracle),
            estimated_accuracy: estimated.clone().map(accuracy),
            estimated_delta_db: estimated.map(delta),
            chance_bound: chance_upper_bound(trials.len(), CHANCE_ALPHA).context(ctx)?,
            speakers,
            trials,
        });
    }
    let report = Report {
        method: cfg.enhance.method,
        mean_input_db: mean(&conditions.iter().map(|c| c.input_db).collect::<Vec<_>>()),
        conditions,
    };
    create_dir(out)?;
    crate::artifacts::write_json(&out.join("report.json"), &report)?;
    report.write_tables(out)?;
    Ok(report)
}
