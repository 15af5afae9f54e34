use std::path::Path;
use std::process::{Command, Output};

fn eqbev(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eqbev")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let o = eqbev(&["gen", "--n", "3", "--seed", "11", "--out", s(&a)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        snapshots.push(read_dir_sorted(&a));
    }
    assert_eq!(snapshots[0].len(), 3 * 2 + 1);
    assert_eq!(snapshots[0], snapshots[1]);
    let c = tmp.path().join("c");
    eqbev(&["gen", "--n", "3", "--seed", "12", "--out", s(&c)]);
    assert_ne!(read_dir_sorted(&c)[1].1, snapshots[0][1].1);
}

#[test]
fn jobs_do_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    eqbev(&["gen", "--n", "4", "--out", s(&a), "--jobs", "1"]);
    eqbev(&["gen", "--n", "4", "--out", s(&b), "--jobs", "3"]);
    let strip = |v: Vec<(String, Vec<u8>)>| v.into_iter().filter(|(n, _)| n != "config.ini").collect::<Vec<_>>();
    assert_eq!(strip(read_dir_sorted(&a)), strip(read_dir_sorted(&b)));
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let scenes = tmp.path().join("scenes");
    let dets = tmp.path().join("dets");
    let out = tmp.path().join("eval");
    assert_eq!(code(&eqbev(&["gen", "--n", "3", "--out", s(&scenes)])), 0);
    std::fs::create_dir_all(&dets).unwrap();
    for i in 0..3 {
        let stem = format!("scene_{i:04}");
        std::fs::copy(scenes.join(format!("{stem}.gt.json")), dets.join(format!("{stem}.det.json"))).unwrap();
    }
    let o = eqbev(&["eval", "--scenes", s(&scenes), "--dets", s(&dets), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("mAP 1.0000  mATE 0.0000  mASE 0.0000  mAOE 0.0000  NDS 1.0000"), "{table}");
    let json = std::fs::read_to_string(out.join("eval.json")).unwrap();
    assert!(json.contains("\"nds\": 1.000000"), "{json}");
}

#[test]
fn audit_passes_for_equivariant_and_fails_for_plain() {
    let tmp = tempfile::tempdir().unwrap();
    let quick = ["--set", "audit.sweep_step_deg=90", "--set", "train.n_scenes=2"];
    let eq_out = tmp.path().join("eq");
    let mut args = vec!["audit", "--random", "--out", s(&eq_out)];
    args.extend(quick);
    let o = eqbev(&args);
    assert_eq!(code(&o), 0, "{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));

    let plain_out = tmp.path().join("plain");
    let mut args = vec!["audit", "--random", "--plain", "--out", s(&plain_out)];
    args.extend(quick);
    let o = eqbev(&args);
    assert_eq!(code(&o), 2);
    let json = std::fs::read_to_string(plain_out.join("audit.json")).unwrap();
    assert!(json.contains("\"passed\": false"));
}

#[test]
fn train_detect_plot_round() {
    let tmp = tempfile::tempdir().unwrap();
    let scenes = tmp.path().join("scenes");
    let run = tmp.path().join("run");
    let dets = tmp.path().join("dets");
    let plots = tmp.path().join("plots");
    assert_eq!(code(&eqbev(&["gen", "--n", "2", "--out", s(&scenes)])), 0);
    let o = eqbev(&["train", "--steps", "2", "--scenes", s(&scenes), "--out", s(&run), "--set", "train.n_scenes=2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(run.join("loss.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let ckpt = run.join("model.ckpt");
    let o = eqbev(&["detect", "--scenes", s(&scenes), "--checkpoint", s(&ckpt), "--out", s(&dets)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dets.join("scene_0001.det.json").is_file());
    let o = eqbev(&["plot", "--scene", "scene_0000", "--scenes", s(&scenes), "--dets", s(&dets), "--checkpoint", s(&ckpt), "--out", s(&plots)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(plots.join("scene_0000.svg")).unwrap().starts_with("<svg"));
    assert!(std::fs::read(plots.join("scene_0000.heat0.pgm")).unwrap().starts_with(b"P5\n33 33\n255\n"));
}

#[test]
fn config_precedence_and_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.ini");
    std::fs::write(&cfg, "[scene]\nseed = 5\nn_boxes_max = 3\n[train]\nn_scenes = 2\n").unwrap();
    let out = tmp.path().join("g");
    let o = eqbev(&["gen", "--config", s(&cfg), "--seed", "9", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dump = std::fs::read_to_string(out.join("config.ini")).unwrap();
    assert!(dump.contains("seed = 9\n") && dump.contains("n_boxes_max = 3\n") && dump.contains("n_scenes = 2\n"));
    assert_eq!(read_dir_sorted(&out).len(), 2 * 2 + 1);
}

#[test]
fn invalid_input_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.ini");
    std::fs::write(&bad, "[train]\nlearning_rate = 3\n").unwrap();
    assert_eq!(code(&eqbev(&["gen", "--config", s(&bad), "--out", s(tmp.path())])), 1);
    assert_eq!(code(&eqbev(&["gen", "--set", "scene.n_boxes_min=9", "--out", s(tmp.path())])), 1);
    assert_eq!(code(&eqbev(&["detect", "--checkpoint", s(&tmp.path().join("none")), "--out", s(tmp.path())])), 1);
    assert_eq!(code(&eqbev(&["frobnicate"])), 1);
    assert_eq!(code(&eqbev(&["--help"])), 0);
}
