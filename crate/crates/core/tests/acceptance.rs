//! End-to-end acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mot::action::{decision_loss_tokens, trajectory_loss, Observation};
use mot::config::{ClockMode, RunConfig};
use mot::diagnostics::{check_action_expert, check_moa_block};
use mot::kv_cache::{KvCell, LayerKvCache};
use mot::masking::{build_mask, AttentionLayout, Segment, Task, WithinMode};
use mot::metrics::eval_open_loop;
use mot::numeric::gradcheck::GradCheckConfig;
use mot::numeric::Tensor;
use mot::plan::{TrajectorySet, DECISION_TOKENS, SPATIAL_POINTS, TEMPORAL_POINTS, VOCAB};
use mot::policy::Policy;
use mot::refiner::RefinerContext;
use mot::scene::{build_dataset, generate_scenario, Dataset, Renderer};
use mot::scheduler::{bench_config, compute_per_tick, run_rollout, staleness_sweep, ClockConfig, TickFeed};
use mot::train::{RefinerData, RefinerTrainer, TrainData, Trainer};

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;
type Criterion = (usize, &'static str, fn() -> Outcome);

fn report(id: usize, name: &str, started: Instant, outcome: Outcome) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok((pass, detail)) => {
            println!("{} {id:>2} {name}: {detail} ({secs:.1}s)", if pass { "PASS" } else { "FAIL" });
            pass
        }
        Err(e) => {
            println!("FAIL {id:>2} {name}: error: {e} ({secs:.1}s)");
            false
        }
    }
}

// Scalar restatement of the attention rule, evaluated per pair.
fn rule(segments: &[Segment], i: usize, j: usize) -> bool {
    let mut owner = Vec::new();
    for (s, seg) in segments.iter().enumerate() {
        owner.extend(std::iter::repeat_n(s, seg.len));
    }
    let rank = |t: Task| match t {
        Task::Scene | Task::Text => 0,
        Task::Obs => 1,
        Task::Decision => 2,
        Task::PlanTemporal | Task::PlanSpatial => 3,
    };
    let (si, sj) = (&segments[owner[i]], &segments[owner[j]]);
    let (ri, rj) = (rank(si.task), rank(sj.task));
    if rj < ri {
        return true;
    }
    if rj > ri {
        return false;
    }
    // Equal rank: free across segments, lower-triangular inside one causal segment.
    owner[i] != owner[j] || si.mode == WithinMode::Bidirectional || j <= i
}

fn random_layout(rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let order = [Task::Scene, Task::Text, Task::Obs, Task::Decision, Task::PlanTemporal, Task::PlanSpatial];
    let mut segments = Vec::new();
    let mut total = 0;
    for &task in &order {
        if total >= 40 || !rng.random_bool(0.7) {
            continue;
        }
        let len = rng.random_range(0..=(40 - total).min(10));
        total += len;
        let causal = task == Task::Text && rng.random_bool(0.6);
        segments.push(if causal { Segment::causal(task, len) } else { Segment::bidirectional(task, len) });
    }
    if total == 0 {
        segments.push(Segment::bidirectional(Task::Scene, 3));
    }
    segments
}

fn masks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut pairs = 0usize;
    let mut mismatches = 0usize;
    for _ in 0..100 {
        let segments = random_layout(&mut rng);
        let mask = build_mask(&AttentionLayout::new(segments.clone())?);
        let n: usize = segments.iter().map(|s| s.len).sum();
        for i in 0..n {
            for j in 0..n {
                pairs += 1;
                if mask.allowed(i, j) != rule(&segments, i, j) {
                    mismatches += 1;
                }
            }
        }
    }
    Ok((mismatches == 0, format!("100 layouts, {pairs} pairs, {mismatches} mismatches")))
}

fn rollout_config() -> RunConfig {
    RunConfig::desk().with_overrides(&["layers=1", "width=16", "heads=2", "ffn_width=32", "ue_ffn_width=32"]).expect("valid overrides")
}

fn equivalence() -> Outcome {
    let mut equal = 0;
    let mut total = 0;
    for seed in 0..10u64 {
        let mut cfg = rollout_config();
        cfg.ue_seed += seed;
        cfg.ae_seed += seed;
        let policy = Policy::new(&cfg);
        let renderer = Renderer::new(cfg.render_seed, cfg.width, cfg.rgb_tokens, cfg.bev_tokens);
        let scenario = generate_scenario(1000 + seed, &cfg.synth_config())?;
        let feed = TickFeed {
            scenario: &scenario,
            renderer: &renderer,
            tick_s: cfg.tick_s,
            history_frames: cfg.history_frames,
        };
        let clock = |mode| ClockConfig {
            ue_period: 1,
            mode,
            tick_s: cfg.tick_s,
            deterministic: true,
        };
        let coupled = run_rollout(&feed, &policy, clock(ClockMode::Coupled), 50)?;
        let decoupled = run_rollout(&feed, &policy, clock(ClockMode::Decoupled), 50)?;
        for (a, b) in coupled.reports.iter().zip(&decoupled.reports) {
            total += 1;
            equal += usize::from(a.digest == b.digest);
        }
    }
    Ok((equal == total && total == 500, format!("{equal}/{total} tick digests equal")))
}

fn gradients() -> Outcome {
    let cfg = RunConfig::desk().with_overrides(&[
        "width=16",
        "heads=2",
        "layers=2",
        "ffn_width=16",
        "ue_ffn_width=16",
        "rgb_tokens=4",
        "bev_tokens=4",
        "refiner_ffn=16",
    ])?;
    let check = GradCheckConfig::default();
    let mut scalars = 0;
    let mut failures = 0;
    let mut worst = 0.0f64;
    let mut params = BTreeSet::new();
    for instance in 0..5 {
        for r in [check_action_expert(&cfg, instance, &check)?, check_moa_block(&cfg, instance, 0, &check)?] {
            scalars += r.checked;
            failures += r.failures;
            worst = worst.max(r.max_rel_error);
            params.extend(r.parameters);
        }
    }
    let policy = Policy::new(&cfg);
    let ae_total = policy.ae.store().iter().filter(|p| p.trainable).count();
    let ae_checked = params.iter().filter(|p| p.starts_with("ae.")).count();
    let pass = failures == 0 && ae_checked == ae_total;
    Ok((
        pass,
        format!("5 instances, {} parameters ({ae_checked}/{ae_total} AE), {scalars} scalars, max rel error {worst:.2e}", params.len()),
    ))
}

fn loss_identities() -> Outcome {
    let logits = Tensor::<f64>::zeros(DECISION_TOKENS, VOCAB);
    let nll = decision_loss_tokens(&logits, &[0, 1, 2, 3, 4, 5])?;
    let expected = 6.0 * 9f64.ln();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut gt = TrajectorySet {
        temporal: vec![[0.0; 2]; TEMPORAL_POINTS],
        spatial: vec![[0.0; 2]; SPATIAL_POINTS],
    };
    for p in gt.temporal.iter_mut().chain(gt.spatial.iter_mut()) {
        *p = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
    }
    let same = trajectory_loss(&gt, &gt, 0.5)?;
    let mut shifted = gt.clone();
    for p in shifted.temporal.iter_mut() {
        p[0] += 0.5;
        p[1] += 0.5;
    }
    let (lt, ls, combined) = trajectory_loss(&shifted, &gt, 0.5)?;
    let pass = (nll - expected).abs() <= 1e-9
        && same == (0.0, 0.0, 0.0)
        && (lt - 1.0).abs() <= 1e-12
        && ls.abs() <= 1e-12
        && (combined - 1.0).abs() <= 1e-12;
    Ok((pass, format!("NLL {nll:.12} vs {expected:.12}, offset L1 {lt:.15}")))
}

fn stamped(epoch: u64) -> Result<LayerKvCache<f64>, mot::Error> {
    let layout = AttentionLayout::new(vec![Segment::bidirectional(Task::Scene, 3)])?;
    let kv = (0..4)
        .map(|l| {
            let k = Tensor::filled(3, 8, (epoch * 10 + l) as f64);
            (k.clone(), k.scale(-1.0))
        })
        .collect();
    LayerKvCache::new(epoch, 8, layout, kv)
}

fn atomicity() -> Outcome {
    let cell = Arc::new(KvCell::<f64>::new());
    cell.publish(stamped(0)?)?;
    let done = Arc::new(AtomicBool::new(false));
    let readers: Vec<_> = (0..4)
        .map(|_| {
            let (cell, done) = (cell.clone(), done.clone());
            std::thread::spawn(move || {
                let (mut reads, mut mixed, mut backwards, mut last) = (0u64, 0u64, 0u64, 0u64);
                loop {
                    let finished = done.load(Ordering::Acquire);
                    let snap = cell.latest().expect("published");
                    let e = snap.epoch();
                    let consistent = snap.layers().iter().enumerate().all(|(l, layer)| {
                        let want = (e * 10 + l as u64) as f64;
                        layer.epoch == e
                            && layer.keys.data().iter().all(|&v| v == want)
                            && layer.values.data().iter().all(|&v| v == -want)
                    });
                    mixed += u64::from(!consistent);
                    backwards += u64::from(e < last);
                    last = e;
                    reads += 1;
                    if finished {
                        return (reads, mixed, backwards);
                    }
                }
            })
        })
        .collect();
    for epoch in 1..=10_000 {
        cell.publish(stamped(epoch)?)?;
    }
    done.store(true, Ordering::Release);
    let (mut reads, mut mixed, mut backwards) = (0, 0, 0);
    for r in readers {
        let (a, b, c) = r.join().map_err(|_| "reader panicked")?;
        reads += a;
        mixed += b;
        backwards += c;
    }
    let last = cell.current_epoch();
    Ok((
        mixed == 0 && backwards == 0 && last == Some(10_000),
        format!("{reads} reads, {mixed} mixed-epoch, {backwards} epoch regressions"),
    ))
}

fn latency() -> Outcome {
    let base = bench_config(&RunConfig::desk().with_overrides(&["ue_period=8", "deterministic=true"])?);
    let policy = Policy::new(&base);
    let (ue, ae) = compute_per_tick(&policy);
    let ratio = ue as f64 / ae as f64;
    let renderer = Renderer::new(base.render_seed, base.width, base.rgb_tokens, base.bev_tokens);
    let scenario = generate_scenario(77, &base.synth_config())?;
    let feed = TickFeed {
        scenario: &scenario,
        renderer: &renderer,
        tick_s: base.tick_s,
        history_frames: base.history_frames,
    };
    let mut clock = ClockConfig::from_run(&base);
    clock.mode = ClockMode::Decoupled;
    let decoupled = run_rollout(&feed, &policy, clock, 32)?;
    clock.mode = ClockMode::Coupled;
    let coupled = run_rollout(&feed, &policy, clock, 32)?;
    let staircase = decoupled
        .reports
        .iter()
        .all(|r| r.tau == 8 * (r.t / 8) && r.staleness == r.t - 8 * (r.t / 8));
    let (d, c) = (decoupled.mean_tick_latency(), coupled.mean_tick_latency());
    let pass = ratio >= 10.0 && d <= 0.5 * c && staircase;
    Ok((
        pass,
        format!(
            "UE/AE compute {ratio:.1}x, mean tick {:.3} ms decoupled vs {:.3} ms coupled ({:.2}x), staircase {}",
            1e3 * d,
            1e3 * c,
            d / c,
            if staircase { "matches" } else { "differs" }
        ),
    ))
}

fn dataset_protocol() -> Outcome {
    let cfg = RunConfig::desk();
    let header = cfg.dataset_header();
    let synth = cfg.synth_config();
    let data = build_dataset(52, 1.0, 99, &header, &synth)?;
    let n = data.samples.len();
    let only_async = data.samples.iter().all(|s| s.k == 4 || s.k == 5);
    let k4 = data.samples.iter().filter(|s| s.k == 4).count() as f64;
    let sigma = (n as f64 * 0.25).sqrt();
    let balanced = (k4 - n as f64 / 2.0).abs() <= 3.0 * sigma;

    let renderer = Renderer::new(header.render_seed, header.width, header.rgb_tokens, header.bev_tokens);
    let mut consecutive = true;
    for s in &data.samples {
        let scenario = generate_scenario(s.scenario_seed, &synth)?;
        let dt = 1.0 / header.rate_hz;
        let hist = s.history(header.stale_frames, header.history_frames, 0);
        for (i, f) in hist.iter().enumerate() {
            consecutive &= *f == renderer.render_rgb(&scenario, (s.t + i) as f64 * dt);
        }
        consecutive &= s.current_rgb == renderer.render(&scenario, (s.t + s.k) as f64 * dt).0;
    }
    let again = build_dataset(52, 1.0, 99, &header, &synth)?;
    let identical = data.to_bytes()? == again.to_bytes()?;
    Ok((
        n >= 1000 && only_async && balanced && consecutive && identical,
        format!(
            "{n} samples, k=4 {k4} (3 sigma {:.1}), only k in {{4,5}}: {only_async}, consecutive: {consecutive}, byte-identical: {identical}",
            3.0 * sigma
        ),
    ))
}

struct Trained {
    untrained_l2: f64,
    ae: mot::metrics::OpenLoopReport,
    sweep: mot::scheduler::StalenessTable,
    refined: mot::metrics::OpenLoopReport,
    refiner_contracts: (bool, bool),
    steps: usize,
}

fn refiner_contracts(policy: &Policy, data: &Dataset) -> Result<(bool, bool), Box<dyn std::error::Error>> {
    let sample = &data.samples[0];
    let enc = policy.encode_sample(sample, 0, 0)?;
    let obs = Observation::new(&sample.current_rgb, &sample.current_bev, sample.ego);
    let pred = policy.ae.predict(&obs, &enc.cache)?;
    let prior = pred.trajectory_set();
    let ctx = RefinerContext {
        f_bev: obs.bev.clone(),
        h_de: pred.h_de.clone(),
        r_tokens: enc.reasoning.clone(),
        ego: sample.ego,
        ego_history: sample.ego_history,
    };
    let mut quiet = policy.refiner.clone();
    quiet.cfg.sigma_lon = 0.0;
    quiet.cfg.sigma_lat = 0.0;
    let identity = quiet.refine(&prior, &ctx, 0, 11)? == prior;

    let mut gated = policy.refiner.clone();
    for b in 0..policy.cfg.refiner_blocks {
        let id = gated.store().find(&format!("ref.block{b}.gamma")).ok_or("missing gate")?;
        gated.store_mut().get_mut(id).value = Tensor::scalar(0.0);
    }
    let mut other = ctx.clone();
    other.h_de = other.h_de.map(|v| 5.0 - 30.0 * v);
    let t = policy.cfg.t_trunc;
    let invariant = gated.refine(&prior, &ctx, t, 11)? == gated.refine(&prior, &other, t, 11)?;
    Ok((identity, invariant))
}

fn train_pipeline() -> Result<Trained, Box<dyn std::error::Error>> {
    let cfg = RunConfig::desk();
    let (header, synth) = (cfg.dataset_header(), cfg.synth_config());
    let train = build_dataset(cfg.train_scenarios, cfg.async_fraction, cfg.train_seed, &header, &synth)?;
    let test = build_dataset(cfg.eval_scenarios, 0.0, cfg.eval_seed, &header, &synth)?;
    let policy = Policy::new(&cfg);
    let untrained_l2 = eval_open_loop(&test, &policy, 0, cfg.ego_radius)?.l2_avg;
    let data = TrainData::new(&policy, &train)?;
    let mut trainer = Trainer::new(policy);
    trainer.train(&data, cfg.steps, |_| {})?;
    let mut policy = trainer.policy;
    let sweep = staleness_sweep(&test, &policy, &[0, 1, 2], cfg.ego_radius)?;
    let ae = sweep.rows[0].1.clone();

    let rdata = RefinerData::new(&policy, &data)?;
    let mut rt = RefinerTrainer::new(&policy);
    rt.train(&mut policy, &rdata, cfg.refiner_steps, |_| {})?;
    policy.use_refiner = true;
    let refined = eval_open_loop(&test, &policy, 0, cfg.ego_radius)?;
    let refiner_contracts = refiner_contracts(&policy, &test)?;
    Ok(Trained {
        untrained_l2,
        ae,
        sweep,
        refined,
        refiner_contracts,
        steps: cfg.steps,
    })
}

fn main() -> ExitCode {
    println!("acceptance run");
    let mut all = true;
    let quick: [Criterion; 6] = [
        (1, "mask rule", masks),
        (2, "coupled/decoupled equivalence at P=1", equivalence),
        (3, "gradient check", gradients),
        (4, "loss identities", loss_identities),
        (5, "cache atomicity", atomicity),
        (6, "latency structure at P=8", latency),
    ];
    for (id, name, f) in quick {
        let t = Instant::now();
        all &= report(id, name, t, f());
    }

    let t = Instant::now();
    match train_pipeline() {
        Ok(tr) => {
            let (l2_up, joint_drop) = (tr.sweep.worst_l2_increase(), tr.sweep.worst_joint_drop());
            all &= report(
                7,
                "staleness robustness",
                t,
                Ok((
                    l2_up <= 0.10 && joint_drop <= 2.0,
                    format!("worst L2_avg change {:+.2}%, worst joint drop {joint_drop:.2} points", 100.0 * l2_up),
                )),
            );
            let ratio = tr.ae.l2_avg / tr.untrained_l2;
            all &= report(
                8,
                "learnability",
                t,
                Ok((
                    tr.ae.joint[0] >= 90.0 && ratio <= 0.20 && tr.steps <= 2000,
                    format!(
                        "{} steps, joint@1s {:.2}%, L2_avg {:.3} m = {:.1}% of untrained {:.3} m",
                        tr.steps,
                        tr.ae.joint[0],
                        tr.ae.l2_avg,
                        100.0 * ratio,
                        tr.untrained_l2
                    ),
                )),
            );
            let (identity, invariant) = tr.refiner_contracts;
            all &= report(
                9,
                "refiner contracts",
                t,
                Ok((
                    identity && invariant && tr.refined.l2_avg <= tr.ae.l2_avg,
                    format!(
                        "identity {identity}, gate invariance {invariant}, refined L2_avg {:.3} m vs AE {:.3} m",
                        tr.refined.l2_avg, tr.ae.l2_avg
                    ),
                )),
            );
        }
        Err(e) => {
            for (id, name) in [(7, "staleness robustness"), (8, "learnability"), (9, "refiner contracts")] {
                all &= report(id, name, t, Err(e.to_string().into()));
            }
        }
    }
    let t = Instant::now();
    all &= report(10, "dataset protocol", t, dataset_protocol());

    if all {
        println!("all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("some criteria failed");
        ExitCode::FAILURE
    }
}
