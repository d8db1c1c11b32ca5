use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "env.vehicle_count = 4\nenv.time_limit = 20\n\
    encoder.patch_size = 16\nencoder.embed_dim = 8\nencoder.stem_channels = 4\nencoder.merge_channels = 8\n\
    encoder.bottleneck_hidden = 8\nencoder.predictor_hidden = 8\n\
    rssm.h_dim = 8\nrssm.z_dim = 4\nrssm.hidden = 8\nagent.hidden = 8\nagent.horizon = 3\n\
    replay.seq_len = 4\nreplay.batch = 2\nschedule.seed_episodes = 2\nschedule.encoder_pretrain_steps = 3\n\
    schedule.encoder_batch = 2\nschedule.world_model_steps = 4\nschedule.updates_per_collect = 2\n\
    schedule.probe_frames = 8\n";

fn drivewm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drivewm")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn train_eval_rollout_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let out = drivewm(&["train", "--config", p(&cfg), "--seed", "3", "--out", p(&run), "--quiet"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("checkpoint.hwck");
    assert!(ckpt.exists());
    let saved = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(saved.contains("seed = 3"));

    let eval = dir.path().join("eval");
    let out = drivewm(&["eval", "--checkpoint", p(&ckpt), "--env", "highway", "--episodes", "2", "--seed", "1", "--out", p(&eval)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(eval.join("report.csv")).unwrap();
    assert!(csv.starts_with("env,metric,mean,std,episodes\n"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean ± std"));

    let frames = dir.path().join("frames");
    let out = drivewm(&["rollout", "--checkpoint", p(&ckpt), "--env", "highway", "--steps", "5", "--dump-frames", p(&frames)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(frames.join("frame_00000.ppm").exists());

    let plots = dir.path().join("plots");
    let out = drivewm(&["plot", "--logs", p(&run), "--out", p(&plots)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(plots.join("train_dyn_loss_VS_step.csv").exists());
}

#[test]
fn errors_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.hwck");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    let out = drivewm(&["eval", "--checkpoint", p(&bogus), "--env", "highway", "--episodes", "1", "--out", p(dir.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("magic"), "{err}");

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "rssm.nonsense = 3\n").unwrap();
    let out = drivewm(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("rssm.nonsense"));
}
