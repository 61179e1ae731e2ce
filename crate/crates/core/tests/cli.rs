use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
image_size=16
patch_size=4
enc_dim=32
enc_depth=1
enc_heads=2
dec_dim=16
dec_heads=2
dec_spatial_depth=1
dec_temporal_depth=1
batch_size=4
warmup_steps=1
base_lr=0.001
synth_clips=8
synth_length=20
crop=none
probe_clips=24
probe_iterations=50
bc_demos=2
bc_episodes=2
bc_seeds=0
bc_epochs=2
";

fn stp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("STP_STEPS")
        .current_dir(dir)
        .output()
        .expect("spawn stp")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn rows(csv: &str) -> Vec<Vec<f64>> {
    csv.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect()
}

#[test]
fn pretrain_writes_the_run_directory() {
    let dir = setup();
    let o = stp(&["pretrain", "--config", "tiny.cfg", "--steps", "10", "--out-dir", "run", "--lambda-s", "0.5", "--lambda-t", "2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in ["config.echo", "losses.csv", "ckpt.stpc", "report.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let csv = fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,total,spatial,temporal,lr"));
    let r = rows(&csv);
    assert_eq!(r.len(), 10);
    for (i, row) in r.iter().enumerate() {
        assert_eq!(row[0], i as f64);
        assert!((row[1] - (0.5 * row[2] + 2.0 * row[3])).abs() <= 1e-6, "row {i}: {row:?}");
        assert!(row.iter().all(|v| v.is_finite()));
    }
    let echo = fs::read_to_string(run.join("config.echo")).unwrap();
    assert!(echo.contains("steps=10"));
    assert!(!echo.contains("pixel_mean=auto"), "pixel statistics are resolved in the echo");
}

#[test]
fn rerun_gives_an_identical_loss_trace() {
    let dir = setup();
    for out in ["a", "b"] {
        let o = stp(&["pretrain", "--config", "tiny.cfg", "--steps", "6", "--out-dir", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read(dir.path().join("a/losses.csv")).unwrap();
    let b = fs::read(dir.path().join("b/losses.csv")).unwrap();
    assert_eq!(a, b);
    let a = fs::read(dir.path().join("a/ckpt.stpc")).unwrap();
    let b = fs::read(dir.path().join("b/ckpt.stpc")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resume_continues_the_trace() {
    let dir = setup();
    let full = stp(&["pretrain", "--config", "tiny.cfg", "--steps", "6", "--out-dir", "full"], dir.path());
    assert!(full.status.success(), "{}", stderr(&full));
    let o = stp(&["pretrain", "--config", "tiny.cfg", "--steps", "6", "--until", "3", "--out-dir", "part"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(rows(&fs::read_to_string(dir.path().join("part/losses.csv")).unwrap()).len(), 3);
    let o = stp(&["pretrain", "--config", "tiny.cfg", "--steps", "6", "--out-dir", "part", "--resume"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["losses.csv", "ckpt.stpc"] {
        let a = fs::read(dir.path().join("full").join(f)).unwrap();
        let b = fs::read(dir.path().join("part").join(f)).unwrap();
        assert!(a == b, "{f} differs after resume");
    }
}

#[test]
fn resume_refuses_a_different_config() {
    let dir = setup();
    let o = stp(&["pretrain", "--config", "tiny.cfg", "--steps", "2", "--out-dir", "run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = stp(&["pretrain", "--config", "tiny.cfg", "--steps", "4", "--rho-f", "0.9", "--out-dir", "run", "--resume"], dir.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).starts_with("error[checkpoint]"), "{}", stderr(&o));
}

#[test]
fn errors_name_their_category() {
    let dir = setup();
    let cases: &[(&[&str], &str, i32)] = &[
        (&["pretrain", "--no-such-key", "1"], "error[usage]", 2),
        (&["pretrain", "--config", "tiny.cfg", "--rho-c", "1.5", "--out-dir", "x"], "error[", 2),
        (&["pretrain", "--config", "missing.cfg"], "error[io]", 5),
        (&["probe", "--config", "tiny.cfg", "--checkpoint", "missing.stpc"], "error[io]", 5),
        (&["attention", "--config", "tiny.cfg", "--image", "missing.png", "--checkpoint", "missing.stpc"], "error[io]", 5),
    ];
    for (args, prefix, code) in cases {
        let o = stp(args, dir.path());
        let err = stderr(&o);
        assert_eq!(o.status.code(), Some(*code), "{args:?}: {err}");
        assert!(err.starts_with(prefix), "{args:?}: {err}");
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
    }
    fs::write(dir.path().join("bad.cfg"), "not_a_key=1\n").unwrap();
    let o = stp(&["pretrain", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[config]"), "{}", stderr(&o));
}

#[test]
fn env_overrides_the_file_and_flags_override_env() {
    let dir = setup();
    let run = |extra: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_stp"));
        cmd.args(["pretrain", "--config", "tiny.cfg", "--out-dir", "run"]).args(extra).current_dir(dir.path()).env("RUST_LOG", "warn");
        if let Some(v) = env {
            cmd.env("STP_STEPS", v);
        }
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        rows(&fs::read_to_string(dir.path().join("run/losses.csv")).unwrap()).len()
    };
    assert_eq!(run(&["--steps", "2"], None), 2);
    assert_eq!(run(&[], Some("3")), 3);
    assert_eq!(run(&["--steps", "1"], Some("3")), 1);
}

#[test]
fn downstream_commands_report() {
    let dir = setup();
    let o = stp(&["pretrain", "--config", "tiny.cfg", "--steps", "2", "--out-dir", "run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = stp(&["probe", "--config", "tiny.cfg", "--out-dir", "run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("pretrained_test_accuracy=") && out.contains("random_init_test_accuracy="), "{out}");
    let o = stp(&["bc", "--config", "tiny.cfg", "--out-dir", "run", "--baseline"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("pretrained_success[seed=0]=") && out.contains("random_init_success_mean="), "{out}");
    assert!(dir.path().join("run/demos.stpc").exists());
    let report = fs::read_to_string(dir.path().join("run/report.txt")).unwrap();
    for section in ["[pretrain]", "[probe]", "[bc]"] {
        assert!(report.contains(section), "{report}");
    }

    let o = stp(&["synth-data", "--config", "tiny.cfg", "--synth-clips", "2", "--out", "clips"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("clips/manifest.txt").exists());
    let frame = dir.path().join("clips/clip_0000/frame_0000.ppm");
    assert!(frame.exists());
    let o = stp(&["attention", "--config", "tiny.cfg", "--out-dir", "run", "--image", frame.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("run/attention.png").exists());
}

#[test]
fn help_exits_cleanly() {
    let dir = setup();
    let o = stp(&["pretrain", "--help"], dir.path());
    assert!(o.status.success());
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("--base-lr") && out.contains("--resume"), "{out}");
}
