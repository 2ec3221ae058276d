//! Closed-loop driving: each tick the planner sees tokens rendered from the ego's actual state,
//! and the first stretch of its timed trajectory is executed under kinematic limits.

use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::action::Observation;
use crate::error::Result;
use crate::kv_cache::LayerKvCache;
use crate::numeric::Tensor;
use crate::plan::{TrajectorySet, ROUTE_SPACING, SPATIAL_POINTS, TEMPORAL_POINTS, WAYPOINT_DT};
use crate::policy::{refine_seed, Policy};
use crate::scene::{features, generate_scenario, EgoState, Renderer, Scenario, SynthConfig};

/// What a driver sees at one tick.
pub struct DriveInput<'a> {
    pub scenario: &'a Scenario,
    pub tick: u64,
    pub time: f64,
    pub state: EgoState,
    /// RGB grids of the last frames, oldest first, ending with the current one.
    pub history: &'a [Tensor<f32>],
    pub rgb: &'a Tensor<f32>,
    pub bev: &'a Tensor<f32>,
    pub ego_history: [[f64; 3]; 4],
}

pub trait Driver {
    fn drive(&mut self, input: &DriveInput) -> Result<TrajectorySet>;
}

/// Scripted positions expressed in the actual ego frame.
pub struct OracleDriver;

impl Driver for OracleDriver {
    fn drive(&mut self, input: &DriveInput) -> Result<TrajectorySet> {
        let sc = input.scenario;
        let now = input.state;
        let temporal = (1..=TEMPORAL_POINTS)
            .map(|m| {
                let s = sc.state_at(input.time + m as f64 * WAYPOINT_DT);
                now.to_ego(s.x, s.y)
            })
            .collect();
        let arc = sc.state_at(input.time).arc;
        let spatial = (1..=SPATIAL_POINTS)
            .map(|n| {
                let (x, y, _) = sc.pose_at_arc(arc + n as f64 * ROUTE_SPACING);
                now.to_ego(x, y)
            })
            .collect();
        Ok(TrajectorySet { temporal, spatial })
    }
}

/// Plans to stay at the origin.
pub struct ZeroDriver;

impl Driver for ZeroDriver {
    fn drive(&mut self, _input: &DriveInput) -> Result<TrajectorySet> {
        Ok(TrajectorySet::zeros())
    }
}

/// The learned policy with understanding refreshed every `period` ticks.
pub struct PolicyDriver<'a> {
    pub policy: &'a Policy,
    pub period: usize,
    cache: Option<LayerKvCache<f64>>,
}

impl<'a> PolicyDriver<'a> {
    pub fn new(policy: &'a Policy, period: usize) -> Self {
        Self {
            policy,
            period: period.max(1),
            cache: None,
        }
    }
}

impl Driver for PolicyDriver<'_> {
    fn drive(&mut self, input: &DriveInput) -> Result<TrajectorySet> {
        if self.cache.is_none() || input.tick.is_multiple_of(self.period as u64) {
            let enc = self.policy.ue.encode(&self.policy.understanding_input(input.history)?, input.tick)?;
            self.cache = Some(enc.cache);
        }
        let cache = self.cache.as_ref().expect("cache set above");
        let obs = Observation::new(input.rgb, input.bev, input.state.vector());
        let pred = self.policy.ae.predict(&obs, cache)?;
        let seed = refine_seed(input.scenario.seed, input.tick as usize);
        Ok(self
            .policy
            .finish(&obs, &pred, cache.reasoning(), &input.ego_history, seed)?
            .trajectory)
    }
}

#[derive(Clone, Debug)]
pub struct ClosedLoopConfig {
    pub tick_s: f64,
    /// Seconds of each plan executed before replanning.
    pub replan_s: f64,
    /// Scripted time whose position is the goal.
    pub goal_time: f64,
    /// Extra seconds allowed beyond `goal_time`.
    pub slack_s: f64,
    pub goal_radius: f64,
    pub ego_radius: f64,
    pub history_frames: usize,
    pub synth: SynthConfig,
}

impl ClosedLoopConfig {
    /// Goal at the scripted position 4 s before the scenario ends, 3 s of slack.
    pub fn from_run(cfg: &crate::config::RunConfig) -> Self {
        Self {
            tick_s: cfg.tick_s,
            replan_s: cfg.replan_s,
            goal_time: (cfg.scenario_duration - 4.0).max(cfg.tick_s),
            slack_s: 3.0,
            goal_radius: 2.5,
            ego_radius: cfg.ego_radius,
            history_frames: cfg.history_frames,
            synth: cfg.synth_config(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioOutcome {
    pub seed: u64,
    pub success: bool,
    pub collided: bool,
    /// Fraction of the route covered, in [0, 1].
    pub completion: f64,
    pub ticks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosedLoopReport {
    pub outcomes: Vec<ScenarioOutcome>,
}

impl ClosedLoopReport {
    /// Percentage of scenarios that reached the goal without contact.
    pub fn success_rate(&self) -> f64 {
        let n = self.outcomes.len().max(1) as f64;
        100.0 * self.outcomes.iter().filter(|o| o.success).count() as f64 / n
    }

    /// Mean route completion as a percentage.
    pub fn mean_completion(&self) -> f64 {
        let n = self.outcomes.len().max(1) as f64;
        100.0 * self.outcomes.iter().map(|o| o.completion).sum::<f64>() / n
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,success,collided,completion,ticks\n");
        for o in &self.outcomes {
            out.push_str(&format!("{},{},{},{},{}\n", o.seed, o.success, o.collided, o.completion, o.ticks));
        }
        out
    }
}

impl fmt::Display for ClosedLoopReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenarios        {}", self.outcomes.len())?;
        writeln!(f, "success rate     {:.1}%", self.success_rate())?;
        writeln!(f, "route completion {:.1}%", self.mean_completion())
    }
}

/// Scripted reference path sampled every 0.1 s, with cumulative arc length.
struct Route {
    points: Vec<(f64, f64)>,
    arc: Vec<f64>,
}

impl Route {
    fn new(sc: &Scenario, until: f64) -> Self {
        let n = (until * 10.0).ceil() as usize;
        let mut points: Vec<(f64, f64)> = Vec::with_capacity(n + 1);
        let mut arc = Vec::with_capacity(n + 1);
        let mut total = 0.0;
        for i in 0..=n {
            let s = sc.state_at(i as f64 / 10.0);
            if let Some(&(px, py)) = points.last() {
                total += ((s.x - px).powi(2) + (s.y - py).powi(2)).sqrt();
            }
            points.push((s.x, s.y));
            arc.push(total);
        }
        Self { points, arc }
    }

    fn length(&self) -> f64 {
        *self.arc.last().unwrap_or(&0.0)
    }

    /// Nearest vertex searched forward from `from`, so loops in the path are not skipped.
    fn project(&self, x: f64, y: f64, from: usize) -> usize {
        let lo = from.saturating_sub(5);
        let hi = (from + 80).min(self.points.len() - 1);
        (lo..=hi)
            .min_by(|&a, &b| {
                let da = (self.points[a].0 - x).powi(2) + (self.points[a].1 - y).powi(2);
                let db = (self.points[b].0 - x).powi(2) + (self.points[b].1 - y).powi(2);
                da.total_cmp(&db)
            })
            .unwrap_or(from)
    }
}

/// Tracks the waypoint `replan_s` ahead for `replan_s` seconds: constant curvature toward the
/// point and the constant acceleration that covers the arc, both clamped to the limits.
pub fn execute(state: &EgoState, target: [f64; 2], duration: f64, synth: &SynthConfig, substeps: usize) -> Vec<EgoState> {
    let (x, y) = (target[0], target[1]);
    let d2 = x * x + y * y;
    let mut kappa = if d2 < 1e-9 { 0.0 } else { 2.0 * y / d2 };
    kappa = kappa.clamp(-synth.max_curvature, synth.max_curvature);
    let arc = if d2 < 1e-9 {
        0.0
    } else if kappa.abs() < 1e-9 {
        x.max(0.0)
    } else {
        let ang = (kappa * x).atan2(1.0 - kappa * y);
        (ang / kappa).max(0.0)
    };
    let v0 = state.speed;
    let accel = (2.0 * (arc - v0 * duration) / (duration * duration)).clamp(-synth.max_decel, synth.max_accel);
    let yaw_max = synth.max_yaw_rate_deg.to_radians();
    let dt = duration / substeps as f64;
    let mut s = *state;
    let mut out = Vec::with_capacity(substeps);
    for _ in 0..substeps {
        let v_next = (s.speed + accel * dt).clamp(0.0, synth.max_speed);
        let v_mid = 0.5 * (s.speed + v_next);
        let k = if v_mid > 1e-9 {
            kappa.clamp(-yaw_max / v_mid, yaw_max / v_mid)
        } else {
            kappa
        };
        let ds = v_mid * dt;
        let h_mid = s.heading + 0.5 * k * ds;
        s.x += ds * h_mid.cos();
        s.y += ds * h_mid.sin();
        s.heading += k * ds;
        s.accel = (v_next - s.speed) / dt;
        s.speed = v_next;
        s.yaw_rate = k * v_next;
        s.arc += ds;
        s.t += dt;
        out.push(s);
    }
    out
}

/// Drives one scenario from its scripted initial state.
pub fn drive_scenario(sc: &Scenario, driver: &mut dyn Driver, renderer: &Renderer, cfg: &ClosedLoopConfig) -> Result<ScenarioOutcome> {
    let route = Route::new(sc, cfg.goal_time);
    let goal = sc.state_at(cfg.goal_time);
    let max_ticks = ((cfg.goal_time + cfg.slack_s) / cfg.tick_s).ceil() as usize;
    let target_index = ((cfg.replan_s / WAYPOINT_DT).round() as usize).clamp(1, TEMPORAL_POINTS) - 1;
    let mut state = sc.state_at(0.0);
    let mut past: Vec<EgoState> = vec![state];
    let mut frames: Vec<Tensor<f32>> = Vec::new();
    let mut progress = 0usize;
    let mut outcome = ScenarioOutcome {
        seed: sc.seed,
        success: false,
        collided: false,
        completion: 0.0,
        ticks: 0,
    };
    for tick in 0..max_ticks {
        let time = tick as f64 * cfg.tick_s;
        let (rgb, bev) = renderer.render_features(&features(sc, time, &state));
        frames.push(rgb.clone());
        let history: Vec<Tensor<f32>> = (0..cfg.history_frames)
            .map(|i| {
                let back = cfg.history_frames - 1 - i;
                frames[frames.len().saturating_sub(1 + back)].clone()
            })
            .collect();
        let mut ego_history = [[0.0; 3]; 4];
        for (i, h) in ego_history.iter_mut().enumerate() {
            *h = past[past.len().saturating_sub(4 - i)].vector();
        }
        let input = DriveInput {
            scenario: sc,
            tick: tick as u64,
            time,
            state,
            history: &history,
            rgb: &rgb,
            bev: &bev,
            ego_history,
        };
        let plan = driver.drive(&input)?;
        let target = plan.temporal.get(target_index).copied().unwrap_or([0.0, 0.0]);
        let target = if target[0].is_finite() && target[1].is_finite() { target } else { [0.0, 0.0] };
        outcome.ticks = tick + 1;
        for s in execute(&state, target, cfg.replan_s, &cfg.synth, 10) {
            if sc
                .obstacles
                .iter()
                .any(|o| ((s.x - o.x).powi(2) + (s.y - o.y).powi(2)).sqrt() < o.radius + cfg.ego_radius)
            {
                outcome.collided = true;
            }
            progress = route.project(s.x, s.y, progress);
            outcome.completion = outcome.completion.max(route.arc[progress] / route.length().max(1e-9));
            if !outcome.collided && ((s.x - goal.x).powi(2) + (s.y - goal.y).powi(2)).sqrt() <= cfg.goal_radius {
                outcome.success = true;
            }
            state = s;
            if outcome.collided || outcome.success {
                break;
            }
        }
        state.t = time + cfg.tick_s;
        past.push(state);
        if outcome.collided || outcome.success {
            break;
        }
    }
    if outcome.success {
        outcome.completion = 1.0;
    }
    Ok(outcome)
}

/// Seeded suite of generated scenarios.
pub fn scenario_suite(n: usize, seed: u64, synth: &SynthConfig) -> Result<Vec<Scenario>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc105_ed10_0b00_0000);
    (0..n).map(|_| generate_scenario(rng.next_u64(), synth)).collect()
}

pub fn rollout_closed_loop<'d>(
    scenarios: &[Scenario],
    mut driver_for: impl FnMut() -> Box<dyn Driver + 'd>,
    renderer: &Renderer,
    cfg: &ClosedLoopConfig,
) -> Result<ClosedLoopReport> {
    let outcomes = scenarios
        .iter()
        .map(|sc| drive_scenario(sc, driver_for().as_mut(), renderer, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClosedLoopReport { outcomes })
}
