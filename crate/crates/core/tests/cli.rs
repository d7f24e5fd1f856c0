use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use dyncloud::cli::{run, EXIT_OK, EXIT_PRECONDITION, EXIT_USAGE};
use dyncloud::dataset::load_sequence;
use dyncloud::neural::load_checkpoint;
use dyncloud::sky_image::load_png;
use dyncloud::temporal_engine::xi_step;

const SCENE: &str = r#"{
  "resolution": 32,
  "layers": [{"velocity": [1.5, 0.5], "coverage": 0.6, "base_frequency": 4}],
  "seed": 5
}"#;

const CONFIG: &str = r#"{
  "version": 1,
  "widths": [4, 8, 8],
  "keyframes": 2,
  "substeps": 3,
  "train": {"epochs": 3, "learning_rate": 0.002},
  "train_fraction": 0.7,
  "seed": 9
}"#;

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn dc(args: &[&str]) -> i32 {
    run(std::iter::once("dyncloud").chain(args.iter().copied()))
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        fs::write(root.join("scene.json"), SCENE).unwrap();
        fs::write(root.join("config.json"), CONFIG).unwrap();
        Self { _tmp: tmp, root }
    }

    fn p(&self, rel: &str) -> String {
        s(&self.root.join(rel))
    }

    fn make_data(&self, frames: &str) {
        let code = dc(&["make-synthetic", "--spec", &self.p("scene.json"), "--frames", frames, "--out", &self.p("data")]);
        assert_eq!(code, EXIT_OK);
    }

    fn train(&self, role: &str) -> i32 {
        dc(&[
            "train",
            "--config",
            &self.p("config.json"),
            "--role",
            role,
            "--dataset",
            &self.p("data"),
            "--checkpoints",
            &self.p("ckpt"),
        ])
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn make_synthetic_outputs() {
    let ws = Workspace::new();
    ws.make_data("4");
    let data = ws.root.join("data");
    assert_eq!(fs::read_dir(data.join("frames")).unwrap().count(), 4);
    assert_eq!(fs::read_dir(data.join("flow")).unwrap().count(), 3);
    assert!(data.join("manifest.json").is_file());
    let first = dir_bytes(&data.join("frames"));
    dc(&["make-synthetic", "--spec", &ws.p("scene.json"), "--frames", "4", "--out", &ws.p("again")]);
    assert_eq!(first, dir_bytes(&ws.root.join("again/frames")));

    let static_scene = SCENE.replace("[1.5, 0.5]", "[0.0, 0.0]");
    fs::write(ws.root.join("static.json"), static_scene).unwrap();
    dc(&["make-synthetic", "--spec", &ws.p("static.json"), "--frames", "2", "--out", &ws.p("still")]);
    let still = dir_bytes(&ws.root.join("still/frames"));
    assert_eq!(still.len(), 2);
    assert_eq!(still[0].1, still[1].1);
}

#[test]
fn make_synthetic_usage_errors() {
    let ws = Workspace::new();
    assert_eq!(
        dc(&["make-synthetic", "--spec", &ws.p("scene.json"), "--frames", "0", "--out", &ws.p("x")]),
        EXIT_USAGE
    );
    fs::write(ws.root.join("bad.json"), "{\n  \"resolution\": 32,\n  \"layers\": [,]\n}").unwrap();
    assert_eq!(
        dc(&["make-synthetic", "--spec", &ws.p("bad.json"), "--frames", "2", "--out", &ws.p("x")]),
        EXIT_USAGE
    );
}

#[test]
fn train_preconditions() {
    let ws = Workspace::new();
    assert_eq!(ws.train("flownet"), EXIT_USAGE, "missing dataset");
    ws.make_data("7");
    assert_eq!(ws.train("cloudnet"), EXIT_PRECONDITION, "cloudnet before flownet");
}

#[test]
fn pipeline_end_to_end() {
    let ws = Workspace::new();
    ws.make_data("7");
    assert_eq!(ws.train("flownet"), EXIT_OK);
    assert_eq!(ws.train("cloudnet"), EXIT_OK);
    let ckpt = ws.root.join("ckpt");
    for name in ["flownet.ckpt", "cloudnet.ckpt", "flownet_loss.csv", "cloudnet_loss.csv"] {
        assert!(ckpt.join(name).is_file(), "{name}");
    }
    let csv = fs::read_to_string(ckpt.join("cloudnet_loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    // retraining with the same seed reproduces the checkpoint bytes
    let before = fs::read(ckpt.join("flownet.ckpt")).unwrap();
    assert_eq!(ws.train("flownet"), EXIT_OK);
    assert_eq!(before, fs::read(ckpt.join("flownet.ckpt")).unwrap());

    let input = ws.p("data/frames/000000.png");
    let synth = |out: &str| {
        dc(&[
            "synthesize",
            "--config",
            &ws.p("config.json"),
            "--checkpoints",
            &s(&ckpt),
            "--input",
            &input,
            "--out",
            &ws.p(out),
        ])
    };
    assert_eq!(synth("run1"), EXIT_OK);
    assert_eq!(synth("run2"), EXIT_OK);
    let run1 = dir_bytes(&ws.root.join("run1"));
    assert_eq!(run1, dir_bytes(&ws.root.join("run2")));
    // 2 keyframes x 3 substeps + 1, as PNG and PFM, plus the manifest
    assert_eq!(run1.len(), 7 * 2 + 1);
    assert_eq!(fs::read(&input).unwrap(), fs::read(ws.root.join("run1/frame_000000.png")).unwrap());
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(ws.root.join("run1/manifest.json")).unwrap()).unwrap();
    let kinds: Vec<&str> = manifest["frames"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["kind"].as_str().unwrap())
        .collect();
    assert_eq!(kinds, ["keyframe", "anchor", "anchor", "keyframe", "anchor", "anchor", "keyframe"]);

    // the last keyframe is two direct ξ steps from the input
    let f = load_checkpoint(&ckpt.join("flownet.ckpt")).unwrap();
    let c = load_checkpoint(&ckpt.join("cloudnet.ckpt")).unwrap();
    let img = load_png(Path::new(&input)).unwrap();
    let k1 = xi_step(&f, &c, &img).unwrap().0;
    let k2 = xi_step(&f, &c, &k1).unwrap().0;
    let written = load_png(&ws.root.join("run1/frame_000006.png")).unwrap();
    let direct = dyncloud::sky_image::encode_png_rgb(&k2);
    assert_eq!(direct, dyncloud::sky_image::encode_png_rgb(&written));

    let evaluate = |extra: &[&str]| {
        let (cfg, data, out) = (ws.p("config.json"), ws.p("data"), ws.p("eval"));
        let mut args = vec!["evaluate", "--config", &cfg, "--test", &data, "--out", &out];
        args.extend_from_slice(extra);
        dc(&args)
    };
    assert_eq!(evaluate(&["--perfect-stub"]), EXIT_OK);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(ws.root.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["mse"], 0.0);
    assert_eq!(report["ssim"], 1.0);
    assert!(ws.root.join("eval/report.txt").is_file());
    assert_eq!(evaluate(&["--checkpoints", &s(&ckpt)]), EXIT_OK);
    assert_eq!(evaluate(&["--checkpoints", &ws.p("nowhere")]), EXIT_USAGE);

    // input at the wrong resolution
    let small = dyncloud::sky_image::SkyImage::from_fn(16, |_, _| [0.5; 3]);
    dyncloud::sky_image::save_png(&small, &ws.root.join("small.png")).unwrap();
    let code = dc(&[
        "synthesize",
        "--checkpoints",
        &s(&ckpt),
        "--input",
        &ws.p("small.png"),
        "--out",
        &ws.p("bad"),
        "--substeps",
        "3",
    ]);
    assert_eq!(code, EXIT_PRECONDITION);
}

#[test]
fn histogram_command() {
    let ws = Workspace::new();
    ws.make_data("4");
    let static_scene = SCENE.replace("[1.5, 0.5]", "[0.0, 0.0]");
    fs::write(ws.root.join("static.json"), static_scene).unwrap();
    dc(&["make-synthetic", "--spec", &ws.p("static.json"), "--frames", "4", "--out", &ws.p("still")]);

    let hist = |gen: &str, out: &str| {
        dc(&[
            "histogram",
            "--real",
            &ws.p("data"),
            "--generated",
            &ws.p(gen),
            "--bins",
            "8",
            "--out",
            &ws.p(out),
        ])
    };
    assert_eq!(hist("data", "self.csv"), EXIT_OK);
    let csv = fs::read_to_string(ws.root.join("self.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3 * 8);
    assert!(rows.iter().all(|r| r[3] == r[4]));
    for frame in rows.chunks(8) {
        let sum: f64 = frame.iter().map(|r| r[3]).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    assert_eq!(hist("still", "moving.csv"), EXIT_OK);
    let csv = fs::read_to_string(ws.root.join("moving.csv")).unwrap();
    let diff: f64 = csv
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (v[3] - v[4]).abs()
        })
        .sum();
    assert!(diff > 0.0);

    fs::create_dir_all(ws.root.join("empty")).unwrap();
    assert_eq!(hist("empty", "e.csv"), EXIT_USAGE);
}

#[test]
fn binary_exit_codes_and_home_env() {
    let ws = Workspace::new();
    ws.make_data("7");
    let bin = env!("CARGO_BIN_EXE_dyncloud");
    let status = Command::new(bin)
        .args(["train", "--role", "cloudnet", "--dataset", &ws.p("data")])
        .env("DYNCLOUD_HOME", &ws.root)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_PRECONDITION));
    let status = Command::new(bin)
        .args(["train", "--config", &ws.p("config.json"), "--role", "flownet", "--dataset", &ws.p("data")])
        .env("DYNCLOUD_HOME", &ws.root)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_OK));
    assert!(ws.root.join("checkpoints/flownet.ckpt").is_file());
    let status = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_OK));
    let seq = load_sequence(&ws.root.join("data"), None).unwrap();
    assert_eq!(seq.len(), 7);
}
