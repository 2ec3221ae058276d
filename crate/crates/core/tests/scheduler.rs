use mot::config::{ClockMode, RunConfig};
use mot::kv_cache::KvCell;
use mot::policy::Policy;
use mot::scene::{generate_scenario, Renderer, Scenario};
use mot::scheduler::{run_rollout, ClockConfig, Rollout, TickFeed};

fn small() -> RunConfig {
    RunConfig::desk()
        .with_overrides(&["width=16", "heads=2", "layers=1", "ffn_width=16", "ue_ffn_width=16", "rgb_tokens=4", "bev_tokens=4"])
        .unwrap()
}

fn roll(cfg: &RunConfig, scenario: &Scenario, mode: ClockMode, period: usize, deterministic: bool, ticks: usize) -> Rollout {
    let renderer = Renderer::new(cfg.render_seed, cfg.width, cfg.rgb_tokens, cfg.bev_tokens);
    let feed = TickFeed {
        scenario,
        renderer: &renderer,
        tick_s: cfg.tick_s,
        history_frames: cfg.history_frames,
    };
    let clock = ClockConfig {
        ue_period: period,
        mode,
        tick_s: cfg.tick_s,
        deterministic,
    };
    run_rollout(&feed, &Policy::new(cfg), clock, ticks).unwrap()
}

// Scalar replay of the refresh rule: the epoch only moves on ticks divisible by the period.
fn replay(period: u64, ticks: u64) -> Vec<u64> {
    let mut epoch = 0;
    (0..ticks)
        .map(|t| {
            if t % period == 0 {
                epoch = t;
            }
            epoch
        })
        .collect()
}

#[test]
fn period_one_matches_coupled_digests() {
    let cfg = small();
    for seed in 0..3 {
        let sc = generate_scenario(seed, &cfg.synth_config()).unwrap();
        let a = roll(&cfg, &sc, ClockMode::Coupled, 1, true, 20);
        let b = roll(&cfg, &sc, ClockMode::Decoupled, 1, true, 20);
        let da: Vec<_> = a.reports.iter().map(|r| r.digest.clone()).collect();
        let db: Vec<_> = b.reports.iter().map(|r| r.digest.clone()).collect();
        assert_eq!(da, db);
        assert!(b.reports.iter().all(|r| r.tau == r.t && r.staleness == 0));
    }
}

#[test]
fn period_three_staircase() {
    let cfg = small();
    let sc = generate_scenario(1, &cfg.synth_config()).unwrap();
    let r = roll(&cfg, &sc, ClockMode::Decoupled, 3, true, 9);
    let taus: Vec<u64> = r.reports.iter().map(|x| x.tau).collect();
    assert_eq!(taus, vec![0, 0, 0, 3, 3, 3, 6, 6, 6]);
}

#[test]
fn period_eight_matches_replay() {
    let cfg = small();
    let sc = generate_scenario(2, &cfg.synth_config()).unwrap();
    let r = roll(&cfg, &sc, ClockMode::Decoupled, 8, true, 32);
    let taus: Vec<u64> = r.reports.iter().map(|x| x.tau).collect();
    assert_eq!(taus, replay(8, 32));
    for rep in &r.reports {
        assert_eq!(rep.staleness, rep.t - rep.tau);
        if rep.t % 8 != 0 {
            assert_eq!(rep.ue_latency_s, 0.0);
        }
    }
}

#[test]
fn threaded_reads_never_come_from_the_future() {
    let cfg = small();
    let sc = generate_scenario(3, &cfg.synth_config()).unwrap();
    let r = roll(&cfg, &sc, ClockMode::Decoupled, 4, false, 16);
    assert_eq!(r.reports.len(), 16);
    let mut last = 0;
    for rep in &r.reports {
        assert!(rep.tau <= rep.t);
        assert_eq!(rep.tau % 4, 0);
        assert!(rep.tau >= last);
        last = rep.tau;
    }
}

#[test]
fn csv_columns() {
    let cfg = small();
    let sc = generate_scenario(4, &cfg.synth_config()).unwrap();
    let r = roll(&cfg, &sc, ClockMode::Decoupled, 2, true, 4);
    let csv = r.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "tick,tau,staleness,ae_latency_s,ue_latency_s,digest");
    assert_eq!(lines.count(), 4);
}

#[test]
fn snapshot_for_follows_the_period() {
    let cfg = small();
    let policy = Policy::new(&cfg);
    let sc = generate_scenario(5, &cfg.synth_config()).unwrap();
    let renderer = Renderer::new(cfg.render_seed, cfg.width, cfg.rgb_tokens, cfg.bev_tokens);
    let feed = TickFeed {
        scenario: &sc,
        renderer: &renderer,
        tick_s: cfg.tick_s,
        history_frames: cfg.history_frames,
    };
    let cell = KvCell::new();
    let mut seen = Vec::new();
    for t in 0..9u64 {
        if t % 3 == 0 {
            let input = policy.understanding_input(&feed.frames(t)).unwrap();
            cell.publish(policy.ue.encode(&input, t).unwrap().cache).unwrap();
        }
        seen.push(cell.snapshot_for(t).unwrap().epoch());
    }
    assert_eq!(seen[7], 6);
    assert_eq!(seen[2], 0);
}
