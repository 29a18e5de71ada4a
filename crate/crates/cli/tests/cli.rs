use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use stqe::loss_train::enhance_frame;
use stqe::network::checkpoint;
use stqe::network::{ModelConfig, ModelParams, Widths};
use stqe::pcdata::{read_ply, write_ply, ColorMode, Encoding};
use stqe::{Component, FrameTriplet, PointCloud};
use tempfile::TempDir;

fn stqe(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stqe"))
        .args(args)
        .env("STQE_THREADS", threads)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> &Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&ok(out).stdout).expect("stdout is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A 12×12 patch of surface with a smooth color field; `phase` moves the
/// field and the surface slightly between frames.
fn frame(phase: f64) -> PointCloud {
    let mut geometry = Vec::new();
    let mut attributes = Vec::new();
    for x in 0..12u32 {
        for y in 0..12u32 {
            let (fx, fy) = (f64::from(x), f64::from(y));
            let z = (4.0 + 2.0 * ((fx + phase) / 3.0).sin()).round() as u32;
            geometry.push([x, y, z]);
            let luma = 120.0 + 60.0 * ((fx + 2.0 * phase) / 2.5).sin() * (fy / 3.0).cos() + 7.0 * ((fx * fy + phase) * 1.7).sin();
            attributes.push([luma as f32, (100.0 + 3.0 * fx) as f32, (150.0 - 2.0 * fy + phase) as f32]);
        }
    }
    PointCloud::new(geometry, attributes, 4).unwrap()
}

fn write_frames(dir: &Path, clouds: &[PointCloud]) -> Vec<PathBuf> {
    fs::create_dir_all(dir).unwrap();
    clouds
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let path = dir.join(format!("frame_{i:03}.ply"));
            write_ply(c, &path, Encoding::BinaryLittleEndian, ColorMode::YcbcrFloat).unwrap();
            path
        })
        .collect()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        k: 6,
        widths: Widths { shallow: [4, 6, 6], merge: [8, 8], gnfa: 4, stf: [8, 6, 4] },
        ..Default::default()
    }
}

fn sequence(n: usize) -> Vec<PointCloud> {
    (0..n).map(|i| frame(i as f64 * 0.7)).collect()
}

#[test]
fn help_exits_zero_and_lists_commands() {
    let out = stqe(&["--help"], "0");
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["recolor", "enhance", "train", "eval", "analyze", "knn-check", "describe-checkpoint"] {
        assert!(text.contains(cmd), "missing {cmd} in\n{text}");
    }
}

#[test]
fn unknown_flag_fails() {
    let out = stqe(&["eval", "--no-such-flag"], "0");
    assert!(!out.status.success());
    assert!(!stqe(&["bogus-command"], "0").status.success());
}

#[test]
fn eval_on_identical_dirs_reports_zero_deltas() {
    let tmp = TempDir::new().unwrap();
    let originals = sequence(2);
    write_frames(&tmp.path().join("orig"), &originals);
    let labels = ["r1", "r2", "r3", "r4"];
    for (i, label) in labels.iter().enumerate() {
        let noisy: Vec<PointCloud> = originals
            .iter()
            .map(|c| {
                let attrs = c
                    .attributes()
                    .iter()
                    .enumerate()
                    .map(|(j, a)| {
                        let e = ((j * 7 + i) % 5) as f32 - 2.0;
                        a.map(|v| (v + e * (4 - i) as f32).clamp(0.0, 255.0))
                    })
                    .collect();
                c.with_attributes(attrs).unwrap()
            })
            .collect();
        write_frames(&tmp.path().join("anchor").join(label), &noisy);
    }
    let rates = tmp.path().join("rates.json");
    fs::write(
        &rates,
        r#"{"rates":[{"label":"r1","bpip":0.1},{"label":"r2","bpip":0.2},{"label":"r3","bpip":0.4},{"label":"r4","bpip":0.8}]}"#,
    )
    .unwrap();
    let report_path = tmp.path().join("report.json");
    let anchor = tmp.path().join("anchor");
    ok(&stqe(
        &[
            "eval",
            "--enhanced",
            p(&anchor),
            "--anchor",
            p(&anchor),
            "--original",
            p(&tmp.path().join("orig")),
            "--rates",
            p(&rates),
            "--out",
            p(&report_path),
        ],
        "2",
    ));
    let report: Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["frame_count"], 2);
    let rates = report["rates"].as_array().unwrap();
    assert_eq!(rates.len(), 4);
    for r in rates {
        for c in ["y", "cb", "cr", "ycbcr"] {
            assert_eq!(r["delta"][c].as_f64().unwrap(), 0.0);
            for f in r["frames"].as_array().unwrap() {
                assert_eq!(f["delta"][c].as_f64().unwrap(), 0.0);
            }
        }
    }
    for c in ["y", "cb", "cr", "ycbcr"] {
        assert_eq!(report["bd_rate"][c]["percent"].as_f64(), Some(0.0), "{c}: {}", report["bd_rate"][c]);
    }
}

#[test]
fn eval_rejects_missing_rate_dir() {
    let tmp = TempDir::new().unwrap();
    write_frames(&tmp.path().join("orig"), &sequence(1));
    let rates = tmp.path().join("rates.json");
    fs::write(&rates, r#"{"rates":[{"label":"r1","bpip":0.1}]}"#).unwrap();
    let d = p(tmp.path());
    let out = stqe(&["eval", "--enhanced", d, "--anchor", d, "--original", &format!("{d}/orig"), "--rates", p(&rates)], "0");
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn zero_residual_enhance_reproduces_input_bytes() {
    let tmp = TempDir::new().unwrap();
    let inputs = write_frames(&tmp.path().join("in"), &sequence(3));
    let mut params = ModelParams::init(tiny_model(), Component::Y, 1).unwrap();
    params.get_mut("stf.3.w").unwrap().data_mut().fill(0.0);
    let model = tmp.path().join("zero.stqe");
    checkpoint::save(&params, &model).unwrap();
    let out = tmp.path().join("out");
    ok(&stqe(
        &["enhance", "--model", p(&model), "--input", p(&tmp.path().join("in")), "--out", p(&out), "--component", "y"],
        "0",
    ));
    for input in &inputs {
        let name = input.file_name().unwrap();
        assert_eq!(fs::read(input).unwrap(), fs::read(out.join(name)).unwrap(), "{name:?}");
    }
    let log: Value = serde_json::from_str(&fs::read_to_string(out.join("enhance_log.json")).unwrap()).unwrap();
    let frames = log["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 3);
    assert_eq!((frames[0]["prev"].as_u64(), frames[0]["next"].as_u64()), (Some(1), Some(1)));
    assert_eq!((frames[2]["prev"].as_u64(), frames[2]["next"].as_u64()), (Some(1), Some(1)));
    assert_eq!(frames[1]["components"][0]["residual_max_abs"].as_f64(), Some(0.0));
}

#[test]
fn enhance_matches_library_composition() {
    let tmp = TempDir::new().unwrap();
    let clouds = sequence(3);
    let inputs = write_frames(&tmp.path().join("in"), &clouds);
    let y = ModelParams::init(tiny_model(), Component::Y, 5).unwrap();
    let cr = ModelParams::init(tiny_model(), Component::Cr, 6).unwrap();
    let (my, mcr) = (tmp.path().join("y.stqe"), tmp.path().join("cr.stqe"));
    checkpoint::save(&y, &my).unwrap();
    checkpoint::save(&cr, &mcr).unwrap();
    let out = tmp.path().join("out");
    let frames: Vec<&str> = inputs.iter().map(|x| p(x)).collect();
    let mut args = vec!["enhance", "--model", p(&my), "--model", p(&mcr), "--out", p(&out), "--patch-size", "100", "--frames"];
    args.extend(&frames);
    ok(&stqe(&args, "3"));

    let loaded: Vec<PointCloud> = inputs.iter().map(|x| read_ply(x).unwrap()).collect();
    for (t, (prev, next)) in [(1, 1), (0, 2), (1, 1)].into_iter().enumerate() {
        let triplet = FrameTriplet::new(loaded[prev].clone(), loaded[t].clone(), loaded[next].clone()).unwrap();
        let ey = enhance_frame(&triplet, Component::Y, &y, 100, false).unwrap();
        let ecr = enhance_frame(&triplet, Component::Cr, &cr, 100, false).unwrap();
        let got = read_ply(out.join(inputs[t].file_name().unwrap())).unwrap();
        assert_eq!(got.geometry(), loaded[t].geometry());
        for (i, a) in got.attributes().iter().enumerate() {
            assert_eq!(a[0], ey.cloud.attributes()[i][0]);
            assert_eq!(a[1], loaded[t].attributes()[i][1]);
            assert_eq!(a[2], ecr.cloud.attributes()[i][2]);
        }
        assert_ne!(got.attributes(), loaded[t].attributes());
    }
}

#[test]
fn single_frame_sequence_and_component_mismatch() {
    let tmp = TempDir::new().unwrap();
    let inputs = write_frames(&tmp.path().join("in"), &sequence(1));
    let model = tmp.path().join("cb.stqe");
    checkpoint::save(&ModelParams::init(tiny_model(), Component::Cb, 2).unwrap(), &model).unwrap();
    let out = tmp.path().join("out");
    ok(&stqe(&["enhance", "--model", p(&model), "--frames", p(&inputs[0]), "--out", p(&out)], "0"));
    assert!(out.join("frame_000.ply").exists());
    let bad = stqe(&["enhance", "--model", p(&model), "--frames", p(&inputs[0]), "--out", p(&out), "--component", "Y"], "0");
    assert!(!bad.status.success());
    let clobber = stqe(&["enhance", "--model", p(&model), "--input", p(&tmp.path().join("in")), "--out", p(&tmp.path().join("in"))], "0");
    assert!(!clobber.status.success());
}

fn write_manifest(dir: &Path) -> PathBuf {
    let clean = sequence(4);
    let noisy: Vec<PointCloud> = clean
        .iter()
        .enumerate()
        .map(|(t, c)| {
            let attrs = c
                .attributes()
                .iter()
                .enumerate()
                .map(|(j, a)| a.map(|v| (v + ((j * 13 + t * 5) % 9) as f32 - 4.0).clamp(0.0, 255.0)))
                .collect();
            c.with_attributes(attrs).unwrap()
        })
        .collect();
    let dec = write_frames(&dir.join("decoded"), &noisy);
    let orig = write_frames(&dir.join("original"), &clean);
    let samples: Vec<Value> = (1..3)
        .map(|t| {
            serde_json::json!({
                "prev": format!("decoded/{}", dec[t - 1].file_name().unwrap().to_str().unwrap()),
                "cur": format!("decoded/{}", dec[t].file_name().unwrap().to_str().unwrap()),
                "next": format!("decoded/{}", dec[t + 1].file_name().unwrap().to_str().unwrap()),
                "original": orig[t].to_str().unwrap(),
            })
        })
        .collect();
    let manifest = dir.join("manifest.json");
    fs::write(&manifest, serde_json::json!({"component": "y", "samples": samples}).to_string()).unwrap();
    let config = serde_json::json!({
        "epochs": 2,
        "batch_size": 2,
        "learning_rate": 1e-3,
        "patch_size": 64,
        "model": {"k": 6, "widths": {"shallow": [4, 6, 6], "merge": [8, 8], "gnfa": 4, "stf": [8, 6, 4]}}
    });
    fs::write(dir.join("config.json"), config.to_string()).unwrap();
    manifest
}

fn train_and_enhance(dir: &Path, tag: &str, threads: &str) -> (Vec<u8>, Vec<u8>, Value) {
    let manifest = write_manifest(dir);
    let model = dir.join(format!("{tag}.stqe"));
    let summary = json(&stqe(
        &[
            "train",
            "--manifest",
            p(&manifest),
            "--config",
            p(&dir.join("config.json")),
            "--seed",
            "9",
            "--epochs",
            "3",
            "--out",
            p(&model),
        ],
        threads,
    ));
    assert_eq!(summary["epochs"], 3);
    let log: Value = serde_json::from_str(&fs::read_to_string(dir.join(format!("{tag}.stqe.json"))).unwrap()).unwrap();
    assert_eq!(log["config"]["seed"], 9);
    assert_eq!(log["config"]["patch_size"], 64);
    let out = dir.join(format!("enh_{tag}"));
    ok(&stqe(&["enhance", "--model", p(&model), "--input", p(&dir.join("decoded")), "--out", p(&out)], threads));
    (fs::read(&model).unwrap(), fs::read(out.join("frame_001.ply")).unwrap(), log["history"].clone())
}

#[test]
fn train_and_enhance_are_deterministic() {
    let tmp = TempDir::new().unwrap();
    let a = train_and_enhance(tmp.path(), "a", "0");
    let b = train_and_enhance(tmp.path(), "b", "0");
    let c = train_and_enhance(tmp.path(), "c", "3");
    assert_eq!(a, b);
    assert_eq!(a, c);
    let described = json(&stqe(&["describe-checkpoint", "--model", p(&tmp.path().join("a.stqe"))], "0"));
    assert_eq!(described["component"], "Y");
    assert_eq!(described["file_bytes"].as_u64().unwrap() as usize, a.0.len());
    let count: u64 = described["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["shape"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).product::<u64>())
        .sum();
    assert_eq!(described["param_count"].as_u64(), Some(count));
}

#[test]
fn recolor_knn_check_and_analyze() {
    let tmp = TempDir::new().unwrap();
    let frames = write_frames(tmp.path(), &sequence(2));
    let out = tmp.path().join("virtual.ply");
    let prov = tmp.path().join("prov.txt");
    let summary = json(&stqe(
        &[
            "recolor",
            "--current",
            p(&frames[0]),
            "--reference",
            p(&frames[1]),
            "--out",
            p(&out),
            "--provenance",
            p(&prov),
            "--encoding",
            "ascii",
        ],
        "0",
    ));
    let counts: Vec<u32> = fs::read_to_string(&prov).unwrap().lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(counts.len(), 144);
    assert_eq!(counts.iter().sum::<u32>(), 144);
    assert_eq!(summary["mapped_points"].as_u64().unwrap() as usize, counts.iter().filter(|&&c| c > 0).count());
    assert_eq!(read_ply(&out).unwrap().geometry(), read_ply(&frames[0]).unwrap().geometry());

    let knn = json(&stqe(&["knn-check", "--input", p(&frames[0]), "--k", "20"], "0"));
    assert_eq!(knn["identical"], true);
    assert_eq!(knn["queries"], 144);
    assert!(!stqe(&["knn-check", "--input", p(&frames[0]), "--k", "1000"], "0").status.success());

    let study = json(&stqe(&["analyze", "--input", p(&frames[0]), "--g", "40", "--runs", "2", "--axes", "x,y"], "0"));
    assert_eq!(study["g"], 40);
    let axes = study["axes"].as_array().unwrap();
    assert_eq!(axes.len(), 2);
    assert_eq!(axes[0]["axis"], "x");
    assert_eq!(axes[0]["pairs"].as_array().unwrap().len(), 80);
}
