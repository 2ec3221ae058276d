use mot::action::{forward_coupled, Observation};
use mot::config::RunConfig;
use mot::kv_cache::LayerKvCache;
use mot::numeric::Tape;
use mot::policy::Policy;
use mot::scene::build_dataset;

fn setup() -> (Policy, mot::scene::Sample) {
    let cfg = RunConfig::desk()
        .with_overrides(&["width=16", "heads=2", "layers=2", "ffn_width=16", "ue_ffn_width=16", "rgb_tokens=4", "bev_tokens=4"])
        .unwrap();
    let data = build_dataset(1, 0.0, 9, &cfg.dataset_header(), &cfg.synth_config()).unwrap();
    (Policy::new(&cfg), data.samples[3].clone())
}

#[test]
fn empty_cache_reduces_to_self_attention() {
    let (policy, s) = setup();
    let obs = Observation::new(&s.current_rgb, &s.current_bev, s.ego);
    let empty = LayerKvCache::empty(policy.cfg.layers, policy.cfg.width, 0);
    let joint = policy.ae.predict(&obs, &empty).unwrap();
    let mut tape = Tape::new();
    let out = policy.ae.forward_standalone(&mut tape, &obs).unwrap();
    assert_eq!(&joint.logits, tape.value(out.logits));
    assert_eq!(&joint.trajectory, tape.value(out.trajectory));
}

#[test]
fn cached_pass_equals_joint_recompute() {
    let (policy, s) = setup();
    let obs = Observation::new(&s.current_rgb, &s.current_bev, s.ego);
    let input = policy.understanding_input(s.history(policy.cfg.stale_frames, policy.cfg.history_frames, 0)).unwrap();
    let enc = policy.ue.encode(&input, 0).unwrap();
    let cached = policy.ae.predict(&obs, &enc.cache).unwrap();
    let (coupled, reasoning) = forward_coupled(&policy.ue, &policy.ae, &input, &obs).unwrap();
    assert_eq!(cached, coupled);
    assert_eq!(reasoning, enc.reasoning);
}

#[test]
fn encoding_is_repeatable_and_single_epoch() {
    let (policy, s) = setup();
    let a = policy.encode_sample(&s, 1, 4).unwrap();
    let b = policy.encode_sample(&s, 1, 4).unwrap();
    assert_eq!(a.cache, b.cache);
    assert!(a.cache.is_single_epoch());
    assert_eq!(a.cache.epoch(), 4);
    assert_ne!(a.cache, policy.encode_sample(&s, 0, 4).unwrap().cache);
}

#[test]
fn refiner_leaves_decisions_alone() {
    let (mut policy, s) = setup();
    let planner = |p: &Policy| mot::policy::Planner::plan(p, &s, 0).unwrap();
    policy.use_refiner = false;
    let plain = planner(&policy);
    policy.use_refiner = true;
    let refined = planner(&policy);
    assert_eq!(plain.decisions, refined.decisions);
}
