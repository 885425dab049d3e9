use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_breathprint"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with<'a>(rest: &[&'a str]) -> Vec<&'a str> {
    [&["--config", "cfg.toml"][..], rest].concat()
}

const CONFIG: &str = r#"
seed = 3
tasks = ["posture3"]
modes = ["channel0", "all_ordered"]
write_checkpoints = false

[features]
pool = 16

[training]
epochs = 2
batch_size = 8

[synth]
n_speakers = 2
n_instances_per_cell = 3
"#;

#[test]
fn full_command_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("cfg.toml"), CONFIG).unwrap();

    run(dir, &with(&["synth", "--out", "data"]));
    assert_eq!(
        fs::read_to_string(dir.join("data/manifest.txt"))
            .unwrap()
            .lines()
            .count(),
        31
    );

    run(
        dir,
        &with(&[
            "segment",
            "--manifest",
            "data/manifest.txt",
            "--out",
            "segments.csv",
        ]),
    );
    let segments = fs::read_to_string(dir.join("segments.csv")).unwrap();
    assert!(segments.starts_with("recording_path,start_sample,end_sample"));
    assert!(segments.lines().count() > 1);

    run(
        dir,
        &with(&[
            "extract",
            "--manifest",
            "data/manifest.txt",
            "--mode",
            "all_ordered",
            "--out",
            "f.bhf",
        ]),
    );
    assert_eq!(&fs::read(dir.join("f.bhf")).unwrap()[..4], b"BHF1");

    run(
        dir,
        &with(&["adf", "--manifest", "data/manifest.txt", "--out", "adf.txt"]),
    );
    run(
        dir,
        &with(&[
            "adf",
            "--cache",
            "f.bhf",
            "--channel",
            "3",
            "--lag",
            "2",
            "--out",
            "adf_cache.txt",
        ]),
    );
    for f in ["adf.txt", "adf_cache.txt"] {
        let text = fs::read_to_string(dir.join(f)).unwrap();
        assert!(text.starts_with("total,rejected,skipped\n"), "{text}");
    }

    for m in ["1", "2"] {
        let ckpt = format!("m{m}.bhm");
        let hist = format!("m{m}.csv");
        run(
            dir,
            &with(&[
                "train",
                "--cache",
                "f.bhf",
                "--task",
                "posture3",
                "--model",
                m,
                "--out",
                &ckpt,
                "--history",
                &hist,
            ]),
        );
        assert_eq!(&fs::read(dir.join(&ckpt)).unwrap()[..4], b"BHM1");
        assert!(fs::read_to_string(dir.join(&hist))
            .unwrap()
            .starts_with("epoch,split,loss,accuracy"));
    }

    let out = run(
        dir,
        &with(&[
            "eval",
            "--cache",
            "f.bhf",
            "--task",
            "posture3",
            "--checkpoint",
            "m1.bhm",
            "m2.bhm",
            "--out-dir",
            "eval",
        ]),
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("posture3,all_ordered,ensemble,"));
    assert_eq!(
        fs::read_to_string(dir.join("eval/reports.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
}

#[test]
fn experiment_is_reproducible_from_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("cfg.toml"), CONFIG).unwrap();
    run(dir, &["--config", "cfg.toml", "synth", "--out", "data"]);
    for out in ["a", "b"] {
        run(
            dir,
            &[
                "--config",
                "cfg.toml",
                "--seed",
                "9",
                "--deterministic",
                "experiment",
                "--manifest",
                "data/manifest.txt",
                "--out-dir",
                out,
            ],
        );
    }
    let a = fs::read_to_string(dir.join("a/summary.txt")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.join("b/summary.txt")).unwrap());
    assert!(a.contains("[posture3]"));
    assert_eq!(
        fs::read_to_string(dir.join("a/reports.csv")).unwrap(),
        fs::read_to_string(dir.join("b/reports.csv")).unwrap()
    );
}
