//! Fast-slow orchestration: the understanding expert refreshes the shared cache every
//! `ue_period` ticks while the action expert runs on every tick against the latest snapshot.

use std::fmt;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use crate::action::{forward_coupled, AePrediction, Observation};
use crate::config::{ClockMode, RunConfig};
use crate::error::{Error, Result};
use crate::kv_cache::KvCell;
use crate::metrics::{eval_open_loop, OpenLoopReport};
use crate::numeric::param::hex;
use crate::numeric::{Real, Tensor};
use crate::policy::{refine_seed, Plan, Planner, Policy};
use crate::scene::{Dataset, Renderer, Scenario};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClockConfig {
    /// Understanding period P in ticks.
    pub ue_period: usize,
    pub mode: ClockMode,
    /// Virtual tick duration in seconds.
    pub tick_s: f64,
    /// One thread with zero understanding delay; otherwise understanding runs on a worker.
    pub deterministic: bool,
}

impl ClockConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            ue_period: cfg.ue_period,
            mode: cfg.mode,
            tick_s: cfg.tick_s,
            deterministic: cfg.deterministic,
        }
    }

    /// Epoch visible at tick `t` under the deterministic schedule.
    pub fn tau(&self, t: u64) -> u64 {
        match self.mode {
            ClockMode::Coupled => t,
            ClockMode::Decoupled => {
                let p = self.ue_period as u64;
                p * (t / p)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.ue_period == 0 {
            return Err(Error::Config("ue_period must be at least 1".into()));
        }
        if !(self.tick_s > 0.0) {
            return Err(Error::Config("tick_s must be positive".into()));
        }
        Ok(())
    }
}

/// One fast-clock tick. Latencies are wall-clock seconds on the action thread: `ue_latency_s`
/// is understanding work on that thread (refresh ticks, or the cold-start wait), and in coupled
/// mode the single joint pass is reported as `ae_latency_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct TickReport {
    pub t: u64,
    pub tau: u64,
    pub staleness: u64,
    pub ae_latency_s: f64,
    pub ue_latency_s: f64,
    /// sha256 over the decision logits and the final trajectories.
    pub digest: String,
}

impl TickReport {
    pub fn tick_latency_s(&self) -> f64 {
        self.ae_latency_s + self.ue_latency_s
    }
}

#[derive(Clone, Debug, Default)]
pub struct Rollout {
    pub reports: Vec<TickReport>,
    pub plans: Vec<Plan>,
}

impl Rollout {
    pub fn mean_tick_latency(&self) -> f64 {
        let n = self.reports.len().max(1) as f64;
        self.reports.iter().map(TickReport::tick_latency_s).sum::<f64>() / n
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tick,tau,staleness,ae_latency_s,ue_latency_s,digest\n");
        for r in &self.reports {
            out.push_str(&format!(
                "{},{},{},{:.9},{:.9},{}\n",
                r.t, r.tau, r.staleness, r.ae_latency_s, r.ue_latency_s, r.digest
            ));
        }
        out
    }
}

fn output_digest<T: Real>(pred: &AePrediction<T>, plan: &Plan) -> String {
    let mut h = Sha256::new();
    for v in pred.logits.data() {
        h.update(v.to_f64c().to_le_bytes());
    }
    for p in plan.trajectory.temporal.iter().chain(&plan.trajectory.spatial) {
        h.update(p[0].to_le_bytes());
        h.update(p[1].to_le_bytes());
    }
    hex(&h.finalize())
}

/// Renders what the policy sees at each tick of a logged scenario.
pub struct TickFeed<'a> {
    pub scenario: &'a Scenario,
    pub renderer: &'a Renderer,
    pub tick_s: f64,
    pub history_frames: usize,
}

impl TickFeed<'_> {
    fn time(&self, t: i64) -> f64 {
        t.max(0) as f64 * self.tick_s
    }

    /// History RGB grids ending at tick `t`; ticks before zero repeat the first frame.
    pub fn frames(&self, t: u64) -> Vec<Tensor<f32>> {
        let n = self.history_frames as i64;
        (0..n)
            .map(|i| self.renderer.render_rgb(self.scenario, self.time(t as i64 - (n - 1) + i)))
            .collect()
    }

    pub fn observation<T: Real>(&self, t: u64) -> Observation<T> {
        let time = self.time(t as i64);
        let (rgb, bev) = self.renderer.render(self.scenario, time);
        Observation::new(&rgb, &bev, self.scenario.state_at(time).vector())
    }

    /// The four ego states ending at tick `t`, oldest first.
    pub fn ego_history(&self, t: u64) -> [[f64; 3]; 4] {
        let mut out = [[0.0; 3]; 4];
        for (i, h) in out.iter_mut().enumerate() {
            let time = t as f64 * self.tick_s - self.tick_s * (3 - i) as f64;
            *h = self.scenario.state_at(time.max(0.0)).vector();
        }
        out
    }
}

/// Runs `ticks` fast-clock steps over a logged scenario.
pub fn run_rollout<T: Real>(feed: &TickFeed, policy: &Policy<T>, clock: ClockConfig, ticks: usize) -> Result<Rollout> {
    clock.validate()?;
    match (clock.mode, clock.deterministic) {
        (ClockMode::Coupled, _) => run_coupled(feed, policy, ticks),
        (ClockMode::Decoupled, true) => run_deterministic(feed, policy, clock, ticks),
        (ClockMode::Decoupled, false) => run_threaded(feed, policy, clock, ticks),
    }
}

fn run_coupled<T: Real>(feed: &TickFeed, policy: &Policy<T>, ticks: usize) -> Result<Rollout> {
    let mut out = Rollout::default();
    for t in 0..ticks as u64 {
        let input = policy.understanding_input(&feed.frames(t))?;
        let obs = feed.observation::<T>(t);
        let start = Instant::now();
        let (pred, reasoning) = forward_coupled(&policy.ue, &policy.ae, &input, &obs)?;
        let plan = policy.finish(&obs, &pred, &reasoning, &feed.ego_history(t), refine_seed(feed.scenario.seed, t as usize))?;
        let ae = start.elapsed().as_secs_f64();
        out.reports.push(TickReport {
            t,
            tau: t,
            staleness: 0,
            ae_latency_s: ae,
            ue_latency_s: 0.0,
            digest: output_digest(&pred, &plan),
        });
        out.plans.push(plan);
    }
    Ok(out)
}

fn act_on_snapshot<T: Real>(
    feed: &TickFeed,
    policy: &Policy<T>,
    cell: &KvCell<T>,
    t: u64,
    ue_latency_s: f64,
    out: &mut Rollout,
) -> Result<()> {
    let obs = feed.observation::<T>(t);
    let start = Instant::now();
    let snap = cell.snapshot_for(t)?;
    let pred = policy.ae.predict(&obs, &snap)?;
    let plan = policy.finish(&obs, &pred, snap.reasoning(), &feed.ego_history(t), refine_seed(feed.scenario.seed, t as usize))?;
    let ae = start.elapsed().as_secs_f64();
    out.reports.push(TickReport {
        t,
        tau: snap.epoch(),
        staleness: t - snap.epoch(),
        ae_latency_s: ae,
        ue_latency_s,
        digest: output_digest(&pred, &plan),
    });
    out.plans.push(plan);
    Ok(())
}

fn run_deterministic<T: Real>(feed: &TickFeed, policy: &Policy<T>, clock: ClockConfig, ticks: usize) -> Result<Rollout> {
    let cell = KvCell::new();
    let mut out = Rollout::default();
    for t in 0..ticks as u64 {
        let mut ue = 0.0;
        if t % clock.ue_period as u64 == 0 {
            let input = policy.understanding_input(&feed.frames(t))?;
            let start = Instant::now();
            let enc = policy.ue.encode(&input, t)?;
            cell.publish(enc.cache)?;
            ue = start.elapsed().as_secs_f64();
        }
        act_on_snapshot(feed, policy, &cell, t, ue, &mut out)?;
    }
    Ok(out)
}

/// Understanding on a worker thread; a publish becomes visible on the first tick after it
/// completes. The only shared state is the snapshot cell.
fn run_threaded<T: Real>(feed: &TickFeed, policy: &Policy<T>, clock: ClockConfig, ticks: usize) -> Result<Rollout> {
    let cell = KvCell::new();
    let requests: Vec<(u64, Vec<Tensor<f32>>)> = (0..ticks as u64)
        .step_by(clock.ue_period)
        .map(|t| (t, feed.frames(t)))
        .collect();
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(u64, Vec<Tensor<f32>>)>();
        let cell_ref = &cell;
        let worker = scope.spawn(move || -> Result<()> {
            for (t, frames) in rx {
                let enc = policy.ue.encode(&policy.understanding_input(&frames)?, t)?;
                cell_ref.publish(enc.cache)?;
            }
            Ok(())
        });
        let mut out = Rollout::default();
        let mut pending = requests.into_iter().peekable();
        let result = (|| -> Result<()> {
            for t in 0..ticks as u64 {
                if pending.peek().is_some_and(|(rt, _)| *rt == t) {
                    let req = pending.next().expect("peeked");
                    tx.send(req).map_err(|_| Error::Config("understanding worker stopped".into()))?;
                }
                let mut ue = 0.0;
                if cell.current_epoch().is_none() {
                    let start = Instant::now();
                    while cell.current_epoch().is_none() {
                        if worker.is_finished() {
                            return Err(Error::ColdCache);
                        }
                        std::thread::sleep(Duration::from_micros(50));
                    }
                    ue = start.elapsed().as_secs_f64();
                }
                act_on_snapshot(feed, policy, &cell, t, ue, &mut out)?;
            }
            Ok(())
        })();
        drop(tx);
        let worker_result = worker.join().map_err(|_| Error::Config("understanding worker panicked".into()))?;
        result?;
        worker_result?;
        Ok(out)
    })
}

/// Copy of `cfg` with the understanding feed-forward widened by `ue_scale`.
pub fn bench_config(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.ue_ffn_width *= c.ue_scale.max(1);
    c
}

/// Multiply-accumulates of one understanding encode and one action step.
pub fn compute_per_tick<T: Real>(policy: &Policy<T>) -> (u64, u64) {
    let cfg = &policy.cfg;
    let scene = cfg.history_frames * cfg.rgb_tokens;
    let ue = policy.ue.macs(scene, cfg.prompt_len);
    let ae = policy.ae.macs(scene + cfg.prompt_len + cfg.reasoning_len);
    (ue, ae)
}

/// Open-loop metrics at each understanding lag.
#[derive(Clone, Debug, PartialEq)]
pub struct StalenessTable {
    pub rows: Vec<(usize, OpenLoopReport)>,
}

impl StalenessTable {
    fn baseline(&self) -> Option<&OpenLoopReport> {
        self.rows.iter().find(|(o, _)| *o == 0).map(|(_, r)| r)
    }

    /// Largest relative L2_avg increase over offset 0.
    pub fn worst_l2_increase(&self) -> f64 {
        let Some(base) = self.baseline() else { return 0.0 };
        self.rows
            .iter()
            .map(|(_, r)| (r.l2_avg - base.l2_avg) / base.l2_avg)
            .fold(0.0, f64::max)
    }

    /// Largest joint-accuracy drop over offset 0, in points.
    pub fn worst_joint_drop(&self) -> f64 {
        let Some(base) = self.baseline() else { return 0.0 };
        self.rows
            .iter()
            .map(|(_, r)| base.joint_avg - r.joint_avg)
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "offset,l2_1s,l2_2s,l2_3s,l2_avg,collision_avg,lateral_1s,lateral_2s,lateral_avg,longitudinal_1s,longitudinal_2s,longitudinal_avg,joint_1s,joint_2s,joint_avg\n",
        );
        for (o, r) in &self.rows {
            out.push_str(&format!(
                "{o},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.l2[0],
                r.l2[1],
                r.l2[2],
                r.l2_avg,
                r.collision_avg,
                r.lateral[0],
                r.lateral[1],
                r.lateral_avg,
                r.longitudinal[0],
                r.longitudinal[1],
                r.longitudinal_avg,
                r.joint[0],
                r.joint[1],
                r.joint_avg
            ));
        }
        out
    }
}

impl fmt::Display for StalenessTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8}{:>9}{:>9}{:>9}{:>9}{:>10}{:>10}{:>10}",
            "offset", "L2 1s", "L2 2s", "L2 3s", "L2 avg", "lat avg", "lon avg", "joint avg"
        )?;
        for (o, r) in &self.rows {
            writeln!(
                f,
                "{o:<8}{:>9.3}{:>9.3}{:>9.3}{:>9.3}{:>10.2}{:>10.2}{:>10.2}",
                r.l2[0], r.l2[1], r.l2[2], r.l2_avg, r.lateral_avg, r.longitudinal_avg, r.joint_avg
            )?;
        }
        Ok(())
    }
}

/// Evaluates `planner` with the understanding side lagging by each offset (in frames).
pub fn staleness_sweep(dataset: &Dataset, planner: &dyn Planner, offsets: &[usize], ego_radius: f64) -> Result<StalenessTable> {
    let stale = dataset.header.stale_frames;
    let rows = offsets
        .iter()
        .map(|&o| {
            if o > stale {
                return Err(Error::Config(format!("offset {o} exceeds the {stale} stale frames stored per sample")));
            }
            Ok((o, eval_open_loop(dataset, planner, o, ego_radius)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StalenessTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn staircase() {
        let c = ClockConfig {
            ue_period: 3,
            mode: ClockMode::Decoupled,
            tick_s: 0.5,
            deterministic: true,
        };
        let taus: Vec<u64> = (0..9).map(|t| c.tau(t)).collect();
        assert_eq!(taus, [0, 0, 0, 3, 3, 3, 6, 6, 6]);
        assert_eq!(c.tau(7), 6);
        assert_eq!(c.tau(2), 0);
        let coupled = ClockConfig {
            mode: ClockMode::Coupled,
            ..c
        };
        assert_eq!(coupled.tau(7), 7);
    }
}
