use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use convbeam::scene::{synthetic_speech, Condition};
use convbeam::tensor::Tensor;
use convbeam_cli::artifacts::{
    enhanced_path, read_json, read_scene, read_tensor, write_json, write_tensor, write_wav, DecodeRecord,
    EnhanceRecord, SceneMeta,
};
use convbeam_cli::report::Report;
use tempfile::TempDir;

const BASE: &str = r#"
seed = 5

[scene]
duration_s = 4.0

[simulate]
conditions = ["reverberant"]

[beamformer]
iterations = 2

[aad]
trial_s = 1.0
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_convbeam"))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

fn run(cmd: &str, config: &Path, out: &Path, seed: Option<u64>) -> Output {
    let mut c = bin();
    c.arg(cmd).arg("--config").arg(config).arg("--out").arg(out);
    if let Some(s) = seed {
        c.arg("--seed").arg(s.to_string());
    }
    c.output().unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            v.extend(files(&p));
        } else {
            v.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
        }
    }
    v.sort();
    v
}

fn error_record(o: &Output) -> serde_json::Value {
    assert!(!o.status.success());
    let line = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(line.lines().last().unwrap()).unwrap()
}

#[test]
fn repeated_seed_gives_identical_artifacts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), BASE);
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for out in [&a, &b] {
        ok(run("simulate", &cfg, out, None));
        ok(run("enhance", &cfg, out, None));
    }
    assert_eq!(files(&a), files(&b));
    ok(run("simulate", &cfg, &c, Some(6)));
    let mix = |d: &Path| fs::read(d.join("reverberant/mix.wav")).unwrap();
    assert_ne!(mix(&a), mix(&c));
}

#[test]
fn stages_hand_off_and_report_round_trips() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &format!("{BASE}\n[enhance]\nmethod = \"wlcmp\"\n"));
    let out = tmp.path().join("out");
    for cmd in ["simulate", "enhance", "decode", "evaluate"] {
        ok(run(cmd, &cfg, &out, None));
    }
    let dir = out.join("reverberant");
    let enh: EnhanceRecord = read_json(&dir.join("enhance.json")).unwrap();
    assert_eq!(enh.speakers.len(), 2);
    for s in &enh.speakers {
        assert!(s.max_constraint_residual <= 1e-8, "{}", s.max_constraint_residual);
        assert_eq!(s.objective.len(), 2);
    }
    let dec: DecodeRecord = read_json(&dir.join("decode.json")).unwrap();
    assert_eq!(dec.trials.len(), 4);

    let report = Report::load(&out.join("report.json")).unwrap();
    let text = serde_json::to_string(&report).unwrap();
    assert_eq!(serde_json::from_str::<Report>(&text).unwrap(), report);
    let c = &report.conditions[0];
    assert_eq!(c.trials.len(), dec.trials.len());
    assert!(c.estimated_accuracy.is_some());
    // the oracle picks the best output, so it is wrong only on exact ties
    for t in &c.trials {
        let best = t.output_db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(t.output_db[t.oracle.selected], best);
        let ties = t.output_db.iter().filter(|&&o| o == best).count();
        assert_eq!(t.oracle.correct, ties == 1);
    }
    assert_eq!(c.oracle_accuracy, 100.0);
    assert!(out.join("conditions.csv").is_file() && out.join("trials.csv").is_file());
    let rows = csv::Reader::from_path(out.join("trials.csv")).unwrap().records().count();
    assert_eq!(rows, 4);
}

#[test]
fn twenty_minutes_give_forty_decoded_trials() {
    let tmp = TempDir::new().unwrap();
    let fs_hz = 1000u32;
    let cfg = write_config(
        tmp.path(),
        &format!(
            "seed = 3\n[scene]\nsample_rate = {fs_hz}\n[stft]\nsample_rate = {fs_hz}\n\
             [metrics]\nsample_rate = {fs_hz}\n[simulate]\nconditions = [\"reverberant\"]\n\
             [decode]\nattended = 1\neeg = {{ synthetic = {{ channels = 8, snr_db = 20.0 }} }}\n"
        ),
    );
    let out = tmp.path().join("out");
    let dir = out.join("reverberant");
    fs::create_dir_all(&dir).unwrap();
    let len = 20 * 60 * fs_hz as usize;
    let sources: Vec<Vec<f64>> = [(110.0, 1), (190.0, 2)]
        .iter()
        .map(|&(f0, s)| synthetic_speech(len, fs_hz, f0, s))
        .collect();
    let flat: Vec<f64> = sources.iter().flatten().copied().collect();
    write_tensor(&dir.join("sources.cbtf"), &Tensor::real(vec![2, len], flat).unwrap()).unwrap();
    for (i, s) in sources.iter().enumerate() {
        write_wav(&enhanced_path(&dir, i), fs_hz, std::slice::from_ref(s)).unwrap();
    }
    let meta = SceneMeta {
        condition: Condition::Reverberant,
        seed: 3,
        sample_rate: fs_hz,
        samples: len,
        azimuths: vec![-45.0, 45.0],
        t60: 0.5,
        reference_mic: 0,
        noise_gain: 0.0,
        target_db: 3.5,
        achieved_db: 3.5,
        noiseless_db: 3.5,
        target_met: true,
    };
    write_json(&dir.join("scene.json"), &meta).unwrap();

    ok(run("decode", &cfg, &out, None));
    let dec: DecodeRecord = read_json(&dir.join("decode.json")).unwrap();
    assert_eq!(dec.trials.len(), 40);
    assert!(dec.trials.iter().all(|t| t.selection.index == 1 && t.attended == 1));
    assert_eq!(dec.accuracy, 100.0);
}

#[test]
fn unconstrained_wlcmp_matches_wmpdr_bit_for_bit() {
    let tmp = TempDir::new().unwrap();
    let single = BASE.replace("[scene]\n", "[scene]\nazimuths = [-45.0]\nbase_f0 = [120.0]\n");
    let scene = tmp.path().join("scene");
    ok(run("simulate", &write_config(tmp.path(), &single), &scene, None));
    let with_input = |method: &str| {
        let p = tmp.path().join(format!("{method}.toml"));
        let text = format!("input = {:?}\n{single}\n[enhance]\nmethod = \"{method}\"\n", scene.display().to_string());
        fs::write(&p, text).unwrap();
        let out = tmp.path().join(method);
        ok(run("enhance", &p, &out, None));
        fs::read(enhanced_path(&out.join("reverberant"), 0)).unwrap()
    };
    assert_eq!(with_input("wmpdr"), with_input("wlcmp"));
}

#[test]
fn best_microphone_passthrough_has_zero_improvement() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &BASE.replace("trial_s = 1.0", "trial_s = 4.0"));
    let out = tmp.path().join("out");
    ok(run("simulate", &cfg, &out, None));
    let dir = out.join("reverberant");
    let scene = read_scene(&dir).unwrap();
    let r = &scene.rendered;
    let metric = convbeam::metrics::FwssnrConfig::default();
    for i in 0..2 {
        let best = convbeam::metrics::input_fwssnr(r, i, 0, &metric).unwrap().best_mic;
        write_wav(&enhanced_path(&dir, i), r.sample_rate, &[r.mics[best].clone()]).unwrap();
    }
    ok(run("evaluate", &cfg, &out, None));
    let report = Report::load(&out.join("report.json")).unwrap();
    for s in &report.conditions[0].speakers {
        assert_eq!(s.delta_db, 0.0);
    }
    assert_eq!(report.conditions[0].trials[0].oracle.delta_db, 0.0);
}

#[test]
fn zero_noise_config_writes_silent_noise() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        &BASE.replace("conditions = [\"reverberant\"]", "conditions = [\"reverberant-noisy\"]\nadd_noise = false"),
    );
    let out = tmp.path().join("out");
    ok(run("simulate", &cfg, &out, None));
    let noise = read_tensor(&out.join("reverberant-noisy/noise.cbtf")).unwrap();
    assert!(noise.to_f64().unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn named_conditions_reach_their_targets() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        &BASE.replace(
            "conditions = [\"reverberant\"]",
            "conditions = [\"anechoic-noisy\", \"reverberant\", \"reverberant-noisy\"]",
        ),
    );
    let out = tmp.path().join("out");
    ok(run("simulate", &cfg, &out, None));
    for c in Condition::ALL {
        let meta: SceneMeta = read_json(&out.join(c.name()).join("scene.json")).unwrap();
        assert_eq!(meta.condition, c);
        assert_eq!(meta.target_db, c.target_db());
        if meta.target_met {
            assert!((meta.achieved_db - c.target_db()).abs() <= 0.1, "{c:?}: {}", meta.achieved_db);
        } else {
            assert_eq!(c, Condition::Reverberant);
            assert_eq!(meta.noise_gain, 0.0);
        }
    }
    let anechoic: SceneMeta = read_json(&out.join("anechoic-noisy/scene.json")).unwrap();
    assert_eq!(anechoic.t60, 0.0);
}

#[test]
fn failures_print_a_json_error_record() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");

    let o = run("simulate", &tmp.path().join("absent.toml"), &out, None);
    assert_eq!(error_record(&o)["error"], "io");

    let cfg = write_config(tmp.path(), &BASE.replace("seed = 5", ""));
    let o = run("simulate", &cfg, &out, None);
    let rec = error_record(&o);
    assert_eq!(rec["error"], "config");
    assert!(rec["message"].as_str().unwrap().contains("seed"));

    let cfg = write_config(tmp.path(), BASE);
    let o = run("enhance", &cfg, &out, None);
    let rec = error_record(&o);
    assert_eq!(rec["error"], "missing-artifact");
    assert!(rec["path"].as_str().unwrap().ends_with("scene.json"));

    let cfg = write_config(tmp.path(), &format!("{BASE}\n[enhance]\nmethod = \"gsc\"\n"));
    assert_eq!(error_record(&run("enhance", &cfg, &out, None))["error"], "config");

    let cfg = write_config(tmp.path(), &format!("{BASE}\n[enhance]\nmasks = {{ file = \"nowhere\" }}\n"));
    let rec = error_record(&run("enhance", &cfg, &out, None));
    assert!(rec["message"].as_str().unwrap().contains("does not exist"));
}

#[test]
fn sixteen_bit_mixture_is_accepted() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &format!("{BASE}\n[enhance]\nmethod = \"mpdr\"\n"));
    let out = tmp.path().join("out");
    ok(run("simulate", &cfg, &out, None));
    let path = out.join("reverberant/mix.wav");
    let scene = read_scene(&out.join("reverberant")).unwrap();
    let spec = hound::WavSpec {
        channels: scene.rendered.num_mics() as u16,
        sample_rate: scene.meta.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let peak = scene.rendered.mics.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut w = hound::WavWriter::create(&path, spec).unwrap();
    for t in 0..scene.rendered.len() {
        for c in &scene.rendered.mics {
            w.write_sample((c[t] / peak * 30000.0).round() as i16).unwrap();
        }
    }
    w.finalize().unwrap();
    ok(run("enhance", &cfg, &out, None));
    let rec: EnhanceRecord = read_json(&out.join("reverberant/enhance.json")).unwrap();
    assert_eq!(rec.input_format, "pcm16");
}
