//! End-to-end runs of the command-line front end on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
n_views = 10
resolution = 16
patch_high = 8
patch_low = 4
gt_render_res = 32
fine_res = 32
coarse_res = 8
anchor_res = 8
width = 12
heads = 2
layers = 1
enc_high_heads = 2
head_hidden = 16
gaussians_per_token = 2
views_total = 4
views_max = 3
n_scenes = 2
n_eval_scenes = 1
steps = 2
warmup_steps = 1
eval_views = 2,4
eval_points = 200
log_every = 1
";

fn georecon(args: &[&str], seed: Option<&str>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_georecon"));
    c.args(args).env_remove("GEO_RECON_SEED");
    if let Some(s) = seed {
        c.env("GEO_RECON_SEED", s);
    }
    c.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(o: Output) -> String {
    assert_eq!(code(&o), 0, "stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    assert_eq!(code(&georecon(&[], None)), 1);
    assert_eq!(code(&georecon(&["frobnicate"], None)), 1);
    assert_eq!(code(&georecon(&["train", "--stage", "3", "--data", "x", "--out", "y"], None)), 1);
    assert_eq!(code(&georecon(&["gen-data", "--out", "/tmp/x", "--set", "nonsense=1"], None)), 1);
    assert_eq!(code(&georecon(&["--help"], None)), 0);
    let bad_seed = georecon(&["gen-data", "--out", "/tmp/unused", "--set", "n_scenes=0"], Some("banana"));
    assert_eq!(code(&bad_seed), 1);
}

#[test]
fn missing_files_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = georecon(&["render", "--gaussians", s(&missing), "--poses", s(&missing), "--out", s(dir.path())], None);
    assert_eq!(code(&o), 3);
    let o = georecon(&["eval", "--ckpt2", s(&missing), "--data", s(dir.path()), "--out", s(&dir.path().join("r.jsonl"))], None);
    assert_eq!(code(&o), 3);
}

#[test]
fn gradcheck_passes() {
    let out = ok(georecon(&["gradcheck"], None));
    assert!(out.contains(" 0 failed"), "{out}");
}

#[test]
fn full_cycle_with_env_seed_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let data = root.join("data");
    ok(georecon(&["gen-data", "--out", s(&data), "--config", s(&cfg)], Some("11")));
    let resolved = std::fs::read_to_string(data.join("config.txt")).unwrap();
    assert!(resolved.contains("seed = 11"), "{resolved}");
    // same seed, same bytes
    let again = root.join("again");
    ok(georecon(&["gen-data", "--out", s(&again), "--config", s(&cfg)], Some("11")));
    for f in ["train/scene_0000/view_003_rgb.png", "train/scene_0001/occupancy.occg", "eval/scene_0000/view_000_depth.bin"] {
        assert_eq!(std::fs::read(data.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }

    let run = root.join("run");
    ok(georecon(&["train", "--stage", "1", "--data", s(&data), "--out", s(&run), "--config", s(&cfg)], Some("11")));
    let out = ok(georecon(&["train", "--stage", "2", "--data", s(&data), "--out", s(&run), "--config", s(&cfg)], Some("11")));
    assert!(out.contains("step      2"), "{out}");
    let ck2 = run.join("stage2.ckpt");
    let ck1 = run.join("stage1.ckpt");

    // a resumed run continues from step 2 to the new total
    let more = root.join("more");
    let resumed =
        ok(georecon(&["train", "--stage", "2", "--data", s(&data), "--out", s(&more), "--resume", s(&ck2), "--set", "steps=3"], None));
    assert!(resumed.contains("step      3 ") && !resumed.contains("step      1 "), "{resumed}");
    assert_eq!(code(&georecon(&["train", "--stage", "1", "--data", s(&data), "--out", s(&more), "--resume", s(&ck2)], None)), 1);

    let scene = data.join("eval/scene_0000");
    let rec = root.join("rec");
    ok(georecon(&["infer", "--ckpt2", s(&ck2), "--scene", s(&scene), "--views", "0,3,6", "--out", s(&rec)], None));
    let rec1 = root.join("rec1");
    ok(georecon(
        &[
            "infer",
            "--ckpt2",
            s(&ck2),
            "--ckpt1",
            s(&ck1),
            "--scene",
            s(&scene),
            "--views",
            "0,3,6",
            "--max-tokens",
            "16384",
            "--out",
            s(&rec1),
        ],
        None,
    ));
    assert!(rec.join("gaussians.3dgs").is_file() && rec1.join("occupancy.occg").is_file());
    assert_eq!(code(&georecon(&["infer", "--ckpt2", s(&ck2), "--scene", s(&scene), "--views", "0,99", "--out", s(&rec)], None)), 1);

    let frames = root.join("frames");
    ok(georecon(&["render", "--gaussians", s(&rec.join("gaussians.3dgs")), "--poses", s(&scene), "--out", s(&frames)], None));
    assert!(frames.join("view_009_rgb.png").is_file() && frames.join("view_000_depth.bin").is_file());

    let report = root.join("report.jsonl");
    ok(georecon(&["eval", "--ckpt2", s(&ck2), "--data", s(&data), "--out", s(&report)], None));
    let rows = georecon::losses::read_report(std::io::BufReader::new(std::fs::File::open(&report).unwrap())).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows.iter().map(|r| r.n_input_views).collect::<Vec<_>>(), vec![2, 4]);
}

#[test]
fn diverging_training_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    ok(georecon(&["gen-data", "--out", s(&data), "--config", s(&cfg), "--set", "n_eval_scenes=0"], None));
    let o = georecon(
        &[
            "train",
            "--stage",
            "2",
            "--data",
            s(&data),
            "--out",
            s(&dir.path().join("r")),
            "--config",
            s(&cfg),
            "--set",
            "lr=1e38",
            "--set",
            "steps=6",
            "--set",
            "weight_decay=0",
        ],
        None,
    );
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}
