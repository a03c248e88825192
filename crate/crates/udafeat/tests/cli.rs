use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use udafeat::checkpoint;
use udafeat::config::{ExperimentConfig, SplitCounts};
use udafeat::dataset::{image_path, label_path, Manifest, MANIFEST};
use udafeat::error::{EXIT_CONFIG, EXIT_IO, EXIT_MISMATCH, EXIT_VERIFICATION};
use udafeat::pnm;
use udafeat_core::labels::LabelMap;
use udafeat_core::synth::{DomainShift, SceneSpec, Split};
use udafeat_core::{SegNetConfig, SegNetParams, Tensor};

fn udafeat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_udafeat"))
        .args(args)
        .env("UDAFEAT_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::default();
    cfg.scene.height = 32;
    cfg.scene.width = 32;
    cfg.scene.size_min = 6;
    cfg.scene.size_max = 12;
    cfg.model.input_height = 32;
    cfg.model.input_width = 32;
    cfg.counts = SplitCounts {
        source: 6,
        target: 6,
        val: 3,
    };
    cfg.train.warmup_steps = 12;
    cfg.train.adapt_steps = 12;
    cfg.train.eval_every = 6;
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn generate_is_deterministic_and_honours_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = udafeat(&["generate", "--config", s(&cfg), "--out", s(dir), "--n-source", "10"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(a.join(MANIFEST)).unwrap(), fs::read(b.join(MANIFEST)).unwrap());
    let manifest: Manifest = serde_json::from_slice(&fs::read(a.join(MANIFEST)).unwrap()).unwrap();
    assert_eq!(manifest.counts.source, 10);
    assert_eq!(manifest.counts.target, 6);
    for split in ["source", "target", "val"] {
        for sub in ["images", "labels"] {
            let dir = Path::new(split).join(sub);
            assert_eq!(read_dir_sorted(&a.join(&dir)), read_dir_sorted(&b.join(&dir)));
        }
    }
}

#[test]
fn default_counts_are_documented() {
    let c = ExperimentConfig::default();
    assert_eq!((c.counts.source, c.counts.target, c.counts.val), (500, 500, 100));
    assert_eq!((c.scene.height, c.scene.width), (64, 64));
}

#[test]
fn pipeline_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    assert_eq!(code(&udafeat(&["generate", "--config", s(&cfg), "--out", s(&data)])), 0);
    let mut outputs = Vec::new();
    for run in ["r1", "r2"] {
        let out = tmp.path().join(run);
        let o = udafeat(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let ev = out.join("eval");
        let o = udafeat(&["eval", s(&out.join("best.bin")), "--config", s(&cfg), "--data", s(&data), "--out", s(&ev)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let line = stdout(&o);
        let miou: f64 = line.trim().strip_prefix("miou=").expect("miou line").parse().unwrap();
        assert!((0.0..=1.0).contains(&miou));
        outputs.push((read_dir_sorted(&out), read_dir_sorted(&ev), line));
    }
    assert_eq!(outputs[0], outputs[1]);
    let names: Vec<_> = outputs[0].0.iter().map(|(n, _)| n.as_str()).collect();
    for name in ["best.bin", "config.json", "metrics.csv", "ckpt_000012.bin", "ckpt_000018.bin", "ckpt_000024.bin"] {
        assert!(names.contains(&name), "{name} missing from {names:?}");
    }
}

#[test]
fn ablation_none_trains_on_source_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    assert_eq!(code(&udafeat(&["generate", "--config", s(&cfg), "--out", s(&data)])), 0);
    let out = tmp.path().join("run");
    let o = udafeat(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--ablation", "none"]);
    assert_eq!(code(&o), 0);
    let rows = udafeat::report::parse_metric_log(&fs::read_to_string(out.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 24);
    for r in &rows {
        assert_eq!(r.total, r.ce);
    }
    let o = udafeat(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--ablation", "cl,xx"]);
    assert_eq!(code(&o), EXIT_CONFIG);
}

#[test]
fn eval_is_idempotent_and_diagnose_of_a_checkpoint_with_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    assert_eq!(code(&udafeat(&["generate", "--config", s(&cfg), "--out", s(&data)])), 0);
    let out = tmp.path().join("run");
    assert_eq!(code(&udafeat(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)])), 0);
    let ckpt = out.join("best.bin");
    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    for e in [&e1, &e2] {
        assert_eq!(code(&udafeat(&["eval", s(&ckpt), "--data", s(&data), "--out", s(e)])), 0);
    }
    assert_eq!(read_dir_sorted(&e1), read_dir_sorted(&e2));
    assert_eq!(read_dir_sorted(&e1).len(), 5);

    let d = tmp.path().join("diag");
    let o = udafeat(&["diagnose", s(&ckpt), s(&ckpt), "--data", s(&data), "--out", s(&d)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let hist = fs::read_to_string(d.join("compare_histogram.csv")).unwrap();
    for line in hist.lines().skip(1) {
        assert_eq!(line.rsplit(',').next().unwrap(), "0", "{line}");
    }
    let classes = fs::read_to_string(d.join("compare_classes.csv")).unwrap();
    let header: Vec<&str> = classes.lines().next().unwrap().split(',').collect();
    for line in classes.lines().skip(1) {
        for (h, v) in header.iter().zip(line.split(',')) {
            if h.starts_with("delta") && !v.is_empty() {
                assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{h} in {line}");
            }
        }
    }
}

/// Network that copies RGB into the first three feature channels and labels
/// each feature by its nearest palette colour.
fn oracle_network(palette: &[[f64; 3]]) -> (SegNetConfig, SegNetParams) {
    let cfg = SegNetConfig {
        num_classes: palette.len(),
        input_height: 16,
        input_width: 16,
        ..SegNetConfig::default()
    };
    let shapes = cfg.param_shapes();
    let mut tensors: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
    for layer in 0..4 {
        let shape = &shapes[2 * layer];
        let cin = shape[1];
        let data = tensors[2 * layer].data_mut();
        for c in 0..3 {
            data[(c * cin + c) * 9 + 4] = 1.0;
        }
    }
    let d = cfg.feature_channels;
    for (k, p) in palette.iter().enumerate() {
        for c in 0..3 {
            tensors[8].data_mut()[k * d + c] = 2.0 * p[c];
        }
        tensors[9].data_mut()[k] = -p.iter().map(|v| v * v).sum::<f64>();
    }
    let params = SegNetParams::from_tensors(&cfg, tensors).unwrap();
    (cfg, params)
}

fn write_block_dataset(root: &Path, palette: &[[f64; 3]]) {
    let (h, w) = (16, 16);
    let counts = SplitCounts {
        source: 2,
        target: 2,
        val: 2,
    };
    for (split, n) in [(Split::Source, 2), (Split::Target, 2), (Split::Val, 2)] {
        for i in 0..n {
            let mut labels = vec![0u8; h * w];
            for y in 0..h {
                for x in 0..w {
                    labels[y * w + x] = ((y / 4 + x / 4 + i) % palette.len()) as u8;
                }
            }
            let mut image = vec![0.0; 3 * h * w];
            for (p, &l) in labels.iter().enumerate() {
                for c in 0..3 {
                    image[c * h * w + p] = palette[l as usize][c];
                }
            }
            let img = Tensor::new(&[3, h, w], image).unwrap();
            let lab = LabelMap::new(h, w, labels).unwrap();
            fs::create_dir_all(image_path(root, split, i).parent().unwrap()).unwrap();
            fs::create_dir_all(label_path(root, split, i).parent().unwrap()).unwrap();
            pnm::write_ppm(&image_path(root, split, i), &img).unwrap();
            pnm::write_pgm(&label_path(root, split, i), &lab).unwrap();
        }
    }
    let manifest = Manifest {
        spec: SceneSpec {
            height: h,
            width: w,
            size_min: 4,
            size_max: 8,
            ..SceneSpec::default()
        },
        shift: DomainShift::identity(),
        seed: 0,
        counts,
    };
    fs::write(root.join(MANIFEST), serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
}

#[test]
fn oracle_checkpoint_scores_perfectly() {
    let palette = [
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 1.0],
    ];
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("blocks");
    write_block_dataset(&data, &palette);
    let (cfg, params) = oracle_network(&palette);
    let ckpt = tmp.path().join("oracle.bin");
    checkpoint::save(&ckpt, &cfg, &params).unwrap();
    let o = udafeat(&["eval", s(&ckpt), "--data", s(&data), "--out", s(&tmp.path().join("eval"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).trim(), "miou=1");
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_rule() {
    let o = udafeat(&["gradcheck", "--seed", "3", "--seeds", "2"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.lines().filter(|l| l.starts_with("seed=")).all(|l| l.ends_with(" pass")));
    assert!(out.contains("op=clustering_loss"));
    let o = udafeat(&["gradcheck", "--inject-fault"]);
    assert_eq!(code(&o), EXIT_VERIFICATION);
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&udafeat(&["frobnicate"])), EXIT_CONFIG);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"schema_version": 99}"#).unwrap();
    assert_eq!(code(&udafeat(&["generate", "--config", s(&bad), "--out", s(tmp.path())])), EXIT_CONFIG);
    fs::write(&bad, r#"{"no_such_field": 1}"#).unwrap();
    assert_eq!(code(&udafeat(&["generate", "--config", s(&bad), "--out", s(tmp.path())])), EXIT_CONFIG);
    let missing = tmp.path().join("missing");
    assert_eq!(code(&udafeat(&["train", "--data", s(&missing), "--out", s(tmp.path())])), EXIT_IO);
    assert_eq!(code(&udafeat(&["eval", s(&missing), "--data", s(&missing), "--out", s(tmp.path())])), EXIT_IO);

    // a 32x32 dataset against the default 64x64 network
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    assert_eq!(code(&udafeat(&["generate", "--config", s(&cfg), "--out", s(&data)])), 0);
    let o = udafeat(&["train", "--data", s(&data), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(code(&o), EXIT_MISMATCH);
    let garbage = tmp.path().join("garbage.bin");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&udafeat(&["eval", s(&garbage), "--data", s(&data), "--out", s(tmp.path())])), EXIT_IO);
}
