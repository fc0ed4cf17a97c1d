use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lalab(args: &[&str], data_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lalab"));
    cmd.args(args).env("RUST_LOG", "warn");
    match data_dir {
        Some(d) => cmd.env("LALAB_DATA_DIR", d),
        None => cmd.env_remove("LALAB_DATA_DIR"),
    };
    cmd.output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const MODEL: &str = r#"
[anchor]
mode = "self_keyframe"
lookahead = 4
d_max = 2

[model]
token_dim = 16
blocks = 1
heads = 2
mlp_ratio = 2
patch = 8
audio_dim = 4
pe_mode = "sinusoidal_distant"
ratio = 4
window = 8
frame_height = 32
frame_width = 32
starting_latents = 1
time_dim = 8
audio_hidden = 8
"#;

#[test]
fn invalid_configs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, format!("steps = 1\nlr = -1.0\nout_dir = \"{}\"\n{MODEL}", dir.path().display())).unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&lalab(&["synth", "--count", "2", "--frames", "24"], Some(&data))), 0);
    let out = lalab(&["train", "--config", cfg.to_str().unwrap()], Some(&data));
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));

    fs::write(&cfg, "steps = \"many\"\n").unwrap();
    assert_eq!(code(&lalab(&["train", "--config", cfg.to_str().unwrap()], Some(&data))), 2);

    fs::write(&cfg, format!("steps = 1\nout_dir = \"{}\"\n{MODEL}", dir.path().display())).unwrap();
    let out = lalab(&["train", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(code(&out), 2, "missing dataset dir");
}

#[test]
fn report_lists_missing_logs() {
    let dir = tempfile::tempdir().unwrap();
    let out = lalab(&["report", "--dir", dir.path().to_str().unwrap()], None);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sweep.jsonl") && err.contains("compare.jsonl") && err.contains("probe.jsonl"), "{err}");
}

#[test]
fn verbs_chain_from_dataset_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    let data = dir.path().join("data");
    assert_eq!(code(&lalab(&["synth", "--count", "3", "--frames", "24", "--seed", "4"], Some(&data))), 0);
    assert!(data.join("manifest.toml").exists());

    fs::write(p("train.toml"), format!("steps = 3\nbatch = 2\nout_dir = \"{}\"\n{MODEL}", p("run"))).unwrap();
    let out = lalab(&["train", "--config", &p("train.toml")], Some(&data));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let again = lalab(&["train", "--config", &p("train.toml")], Some(&data));
    assert!(String::from_utf8_lossy(&again.stdout).starts_with("reused"));
    let ckpt = p("run/model.ckpt");

    fs::write(
        p("rollout.toml"),
        "segments = 2\nwindow = 8\ndenoise_steps = 2\nidentity_seed = 3\naudio_seed = 4\n[anchor]\nmode = \"self_keyframe\"\nlookahead = 8\n",
    )
    .unwrap();
    let out = lalab(&["rollout", "--ckpt", &ckpt, "--config", &p("rollout.toml"), "--out", &p("video")], None);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(p("video/rollout.toml")).unwrap();
    assert!(manifest.contains("anchor_frame_index"));

    let out = lalab(
        &["eval", "--video", &p("video/video.bin"), "--meta", &p("video/rollout.toml"), "--out", &p("video/metrics.jsonl")],
        None,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(p("video/metrics.jsonl")).unwrap().contains("identity_consistency"));

    fs::write(
        p("protocol.toml"),
        "identities = 1\nidentity_seed = 5\naudio_seed = 6\nrollout_seeds = [0]\nsegments = 2\nwindow = 8\ndenoise_steps = 2\nframe_rate = 16\nlookahead = 8\nreference_clips = 3\nreference_frames = 40\ndrift_window_seconds = 0.5\n",
    )
    .unwrap();
    let out = lalab(
        &["sweep", "--ckpt", &ckpt, "--d", "8", "--protocol", &p("protocol.toml"), "--out", &p("exp"), "--check"],
        None,
    );
    assert_eq!(code(&out), 3, "a one-point sweep cannot show a trend");
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL sweep.dynamic"));

    let out = lalab(&["report", "--dir", &p("exp")], None);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let first = fs::read(p("exp/summary.txt")).unwrap();
    lalab(&["report", "--dir", &p("exp")], None);
    assert_eq!(first, fs::read(p("exp/summary.txt")).unwrap());
}
