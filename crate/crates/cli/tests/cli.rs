use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dams_core::data::{read_feature_file, write_feature_file};
use dams_core::Tensor;

fn dams(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dams")).args(args).env("DAMS_LOG", "error").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dams(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = dams(args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_synth(dir: &Path, seed: &str) {
    ok(&["synth", "--out", p(dir), "--seed", seed, "--train-videos", "8", "--test-videos", "4"]);
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().display().to_string(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_twice_gives_identical_directories() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    small_synth(a.path(), "7");
    small_synth(b.path(), "7");
    let ta = tree(a.path());
    assert!(ta.iter().any(|(n, _)| n == "train.jsonl"));
    assert!(ta.iter().any(|(n, _)| n == "spec.json"));
    assert_eq!(ta, tree(b.path()));
}

#[test]
fn train_eval_score_plot_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let run = root.path().join("run");
    small_synth(&data, "1");
    let log = ok(&[
        "train",
        "--dataset",
        p(&data),
        "--out",
        p(&run),
        "--desk",
        "--iters",
        "12",
        "--validate-every",
        "6",
        "--seed",
        "3",
        "--no-tce",
    ]);
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 12);
    assert!(lines[5].get("val_auc").is_some() && lines[0].get("val_auc").is_none());
    for key in ["iter", "l_pse", "l_cls", "l_trip", "total", "sigma2"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
    assert_eq!(fs::read_to_string(run.join("log.jsonl")).unwrap(), log);
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["ablation"]["use_tce"], false);
    assert_eq!(cfg["model"]["channels"], 16);

    let ck = run.join("checkpoint.json");
    let csv = root.path().join("scores.csv");
    let report: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--checkpoint", p(&ck), "--dataset", p(&data), "--csv", p(&csv)])).unwrap();
    assert!(report["auc"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["per_video"].as_array().unwrap().len(), 4);

    let csv2 = root.path().join("scores2.csv");
    ok(&["score", "--checkpoint", p(&ck), "--dataset", p(&data), "--out", p(&csv2)]);
    let text = fs::read_to_string(&csv2).unwrap();
    assert_eq!(text, fs::read_to_string(&csv).unwrap());
    assert!(text.starts_with("video_id,frame,score,gt\n"));

    let svg_path = root.path().join("plot.svg");
    ok(&["plot", "--scores", p(&csv), "--out", p(&svg_path)]);
    let svg = fs::read_to_string(&svg_path).unwrap();
    let doc = roxmltree::Document::parse(&svg).expect("valid XML");
    let count = |cls: &str| doc.descendants().filter(|n| n.attribute("class") == Some(cls)).count();
    assert_eq!(count("score"), 4);
    assert!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count() == 4);
    assert!(count("gt") >= 1, "anomalous test videos have shaded segments");

    // resuming extends the same run
    let more = ok(&["train", "--dataset", p(&data), "--out", p(&run), "--resume", p(&ck), "--iters", "14"]);
    assert_eq!(more.lines().count(), 2);
    assert_eq!(fs::read_to_string(run.join("log.jsonl")).unwrap().lines().count(), 14);
}

#[test]
fn plot_selects_videos() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("s.csv");
    fs::write(&csv, "video_id,frame,score,gt\na,0,0.1,0\na,1,0.9,1\nb,0,0.2,\n").unwrap();
    let svg = dir.path().join("s.svg");
    ok(&["plot", "--scores", p(&csv), "--out", p(&svg), "--video", "b"]);
    let text = fs::read_to_string(&svg).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    assert_eq!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count(), 1);
    assert_eq!(code(&["plot", "--scores", p(&csv), "--out", p(&svg), "--video", "zz"]).0, 7);
}

#[test]
fn gradcheck_passes_on_every_component() {
    let out = ok(&["gradcheck", "--seeds", "1"]);
    let reports: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(reports.len(), dams_core::gradsuite::COMPONENTS.len());
    assert!(reports.iter().all(|r| r["passed"] == true && r["max_rel_error"].as_f64().unwrap() <= 1e-4));
}

#[test]
fn info_reports_versions() {
    let v: serde_json::Value = serde_json::from_str(&ok(&["info"])).unwrap();
    assert_eq!(v["feature_file"]["magic"], "DAMSFEAT");
    assert_eq!(v["checkpoint"]["format"], "dams-checkpoint");
    assert_eq!(v["config"]["max_iterations"], 5000);
}

#[test]
fn error_categories_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let (c, err) = code(&["train", "--dataset", p(&missing), "--out", p(dir.path())]);
    assert_eq!(c, 4, "{err}");
    assert!(err.starts_with("error[io]"));

    assert_eq!(code(&["train", "--bogus"]).0, 2);

    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"ablation": {"use_amtpm": false}}"#).unwrap();
    let (c, err) = code(&["info", "--config", p(&cfg)]);
    assert_eq!(c, 3, "{err}");

    let data = dir.path().join("data");
    small_synth(&data, "2");
    let feat = fs::read_dir(data.join("features")).unwrap().next().unwrap().unwrap().path();
    let mut bytes = fs::read(&feat).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    fs::write(&feat, bytes).unwrap();
    let (c, err) = code(&["train", "--dataset", p(&data), "--out", p(dir.path()), "--desk", "--iters", "1"]);
    assert_eq!(c, 5, "{err}");
    assert!(err.contains("CRC"));
}

#[test]
fn help_documents_exit_codes() {
    let out = ok(&["--help"]);
    for needle in ["Exit codes", "3  configuration", "5  format", "DAMS_LOG"] {
        assert!(out.contains(needle), "{needle}");
    }
}

#[test]
fn pseudo_writes_probabilities_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames.feat");
    let texts = dir.path().join("texts.feat");
    let classes = dir.path().join("classes.txt");
    // frames 0 and 2 point along the anomaly prompt
    write_feature_file(&frames, &Tensor::new(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.1, 0.0, 1.0]).unwrap()).unwrap();
    write_feature_file(&texts, &Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
    fs::write(&classes, "fighting\n").unwrap();
    let probs = dir.path().join("p.feat");
    let labels = dir.path().join("l.feat");
    ok(&[
        "pseudo",
        "--frames",
        p(&frames),
        "--texts",
        p(&texts),
        "--classes",
        p(&classes),
        "--out",
        p(&probs),
        "--labels-out",
        p(&labels),
    ]);
    let pr = read_feature_file(&probs).unwrap();
    assert_eq!(pr.shape(), &[4]);
    assert!(pr.data()[0] > 0.5 && pr.data()[1] < 0.5);
    assert_eq!(read_feature_file(&labels).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);

    fs::write(&classes, "fighting\nrobbery\n").unwrap();
    let (c, _) =
        code(&["pseudo", "--frames", p(&frames), "--texts", p(&texts), "--classes", p(&classes), "--out", p(&probs)]);
    assert_eq!(c, 7);
}
