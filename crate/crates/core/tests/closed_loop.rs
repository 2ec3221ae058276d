use mot::closed_loop::{rollout_closed_loop, scenario_suite, ClosedLoopConfig, Driver, OracleDriver, PolicyDriver, ZeroDriver};
use mot::config::RunConfig;
use mot::policy::Policy;
use mot::scene::{build_dataset, Renderer};
use mot::train::{TrainData, Trainer};

#[test]
fn trained_policy_beats_untrained() {
    let cfg = RunConfig::desk().with_overrides(&["train_scenarios=80", "steps=800", "rollout_scenarios=10"]).unwrap();
    let data = build_dataset(cfg.train_scenarios, cfg.async_fraction, cfg.train_seed, &cfg.dataset_header(), &cfg.synth_config()).unwrap();
    let untrained = Policy::new(&cfg);
    let prepared = TrainData::new(&untrained, &data).unwrap();
    let mut trainer = Trainer::new(untrained.clone());
    trainer.train(&prepared, cfg.steps, |_| {}).unwrap();
    let trained = trainer.policy;

    let renderer = Renderer::new(cfg.render_seed, cfg.width, cfg.rgb_tokens, cfg.bev_tokens);
    let suite = scenario_suite(cfg.rollout_scenarios, cfg.eval_seed, &cfg.synth_config()).unwrap();
    let loop_cfg = ClosedLoopConfig::from_run(&cfg);
    let run = |p: &Policy| {
        rollout_closed_loop(&suite, || Box::new(PolicyDriver::new(p, cfg.ue_period)) as Box<dyn Driver>, &renderer, &loop_cfg).unwrap()
    };
    let before = run(&untrained);
    let after = run(&trained);
    assert!(after.success_rate() > before.success_rate(), "trained {after}\nuntrained {before}");
    assert!(after.mean_completion() > before.mean_completion());
}

#[test]
fn reference_drivers_bracket_the_suite() {
    let cfg = RunConfig::desk();
    let renderer = Renderer::new(cfg.render_seed, cfg.width, cfg.rgb_tokens, cfg.bev_tokens);
    let suite = scenario_suite(8, 21, &cfg.synth_config()).unwrap();
    let loop_cfg = ClosedLoopConfig::from_run(&cfg);
    let oracle = rollout_closed_loop(&suite, || Box::new(OracleDriver), &renderer, &loop_cfg).unwrap();
    let zero = rollout_closed_loop(&suite, || Box::new(ZeroDriver), &renderer, &loop_cfg).unwrap();
    assert!(oracle.success_rate() >= 85.0, "{oracle}");
    assert_eq!(zero.success_rate(), 0.0);
    assert!(zero.mean_completion() < oracle.mean_completion());
    assert_eq!(oracle.to_csv().lines().count(), suite.len() + 1);
}
