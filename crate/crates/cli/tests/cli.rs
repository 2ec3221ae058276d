use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "width=8",
    "heads=2",
    "layers=1",
    "ffn_width=8",
    "ue_ffn_width=8",
    "rgb_tokens=2",
    "bev_tokens=2",
    "refiner_ffn=8",
    "refiner_blocks=1",
    "train_scenarios=4",
    "eval_scenarios=2",
    "rollout_scenarios=2",
    "steps=12",
    "refiner_steps=6",
    "batch=4",
    "diffusion_steps=10",
    "t_trunc=3",
];

fn mot(args: &[&str], extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mot"));
    cmd.args(args);
    for kv in TINY.iter().chain(extra) {
        cmd.args(["-s", kv]);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mot-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_evaluate() {
    let dir = scratch("pipeline");
    let (data, ck, curve, csv) = (dir.join("train.bin"), dir.join("policy.ck"), dir.join("loss.csv"), dir.join("sweep.csv"));

    let out = ok(&mot(&["synth-data", "desk", "--out", s(&data)], &[]));
    assert!(out.contains("samples = "));
    assert!(data.with_extension("manifest").exists());

    ok(&mot(
        &["train", "desk", "--data", s(&data), "--out", s(&ck), "--loss-csv", s(&curve)],
        &["head=diffusion", "checkpoint_every=6"],
    ));
    let loss = std::fs::read_to_string(&curve).unwrap();
    assert!(loss.starts_with("step,"));
    assert!(loss.contains("# refiner"));
    assert!(ck.with_extension("step6.ck").exists());

    let report = ok(&mot(&["eval-openloop", "desk", "--checkpoint", s(&ck), "--refiner"], &[]));
    assert!(report.contains("l2_m"));
    assert!(report.contains("collision_proxy_pct"));

    let sweep = ok(&mot(&["eval-decision", "desk", "--checkpoint", s(&ck), "--csv", s(&csv)], &[]));
    assert!(sweep.contains("worst L2 increase"));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);

    let rollout = ok(&mot(&["rollout", "desk", "--checkpoint", s(&ck)], &[]));
    assert!(rollout.contains("success"));

    let refused = mot(&["eval-openloop", "desk", "--checkpoint", s(&ck)], &["ffn_width=16"]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("digest mismatch"));
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn bench_latency_emits_the_staircase() {
    let out = ok(&mot(
        &["bench-latency", "desk", "--period", "3", "--mode", "decoupled", "--ue-scale", "2", "--ticks", "7"],
        &[],
    ));
    let mut lines = out.lines();
    assert_eq!(lines.next().unwrap(), "tick,tau,staleness,ae_latency_s,ue_latency_s,digest");
    let taus: Vec<u64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(taus, vec![0, 0, 0, 3, 3, 3, 6]);
}

#[test]
fn gradcheck_and_config_verbs() {
    let out = ok(&mot(&["gradcheck", "desk", "--instances", "1"], &[]));
    assert!(out.contains("action expert"));
    assert!(out.contains("refiner block"));
    let text = ok(&mot(&["config", "desk"], &[]));
    assert!(text.contains("width = 8"));
    let bad = mot(&["config", "desk"], &["bogus=1"]);
    assert!(!bad.status.success());
}
