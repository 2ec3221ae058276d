//! Scripted ego maneuvers with closed-form kinematics and static obstacles.
//!
//! Each segment holds a constant longitudinal acceleration and a constant path curvature, so the
//! path is parametrised by arc length and positions follow exactly from the travelled distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Generation limits and label thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Frame rate of traces and datasets.
    pub rate_hz: f64,
    /// Scripted time per generated scenario, seconds.
    pub duration: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    pub max_accel: f64,
    pub max_decel: f64,
    pub max_yaw_rate_deg: f64,
    pub max_curvature: f64,
    pub accel_range: (f64, f64),
    pub brake_range: (f64, f64),
    pub stop_decel: f64,
    pub slight_yaw_deg: (f64, f64),
    pub turn_yaw_deg: (f64, f64),
    pub stop_speed: f64,
    pub speed_delta: f64,
    pub straight_deg: f64,
    pub turn_deg: f64,
    pub obstacles: usize,
    pub obstacle_radius: (f64, f64),
    pub ego_radius: f64,
    pub clearance: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rate_hz: 2.0,
            duration: 12.0,
            min_speed: 3.0,
            max_speed: 15.0,
            max_accel: 3.0,
            max_decel: 4.0,
            max_yaw_rate_deg: 35.0,
            max_curvature: 0.25,
            accel_range: (1.2, 2.0),
            brake_range: (1.5, 3.0),
            stop_decel: 2.5,
            slight_yaw_deg: (6.0, 9.0),
            turn_yaw_deg: (22.0, 30.0),
            stop_speed: 0.2,
            speed_delta: 0.5,
            straight_deg: 2.0,
            turn_deg: 10.0,
            obstacles: 3,
            obstacle_radius: (0.5, 1.5),
            ego_radius: 1.0,
            clearance: 0.75,
        }
    }
}

impl SynthConfig {
    pub fn frame_dt(&self) -> f64 {
        1.0 / self.rate_hz
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LonCommand {
    Cruise,
    /// Constant acceleration, m/s².
    Accelerate(f64),
    /// Constant deceleration magnitude, m/s². Must not bring the ego to rest.
    Brake(f64),
    /// Decelerate at the given magnitude until rest, then hold.
    Stop(f64),
}

/// Steering command; the payload is the curvature magnitude in 1/m.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Steer {
    Straight,
    SlightLeft(f64),
    SlightRight(f64),
    TurnLeft(f64),
    TurnRight(f64),
}

impl Steer {
    /// Signed curvature, left positive.
    pub fn curvature(self) -> f64 {
        match self {
            Steer::Straight => 0.0,
            Steer::SlightLeft(k) | Steer::TurnLeft(k) => k,
            Steer::SlightRight(k) | Steer::TurnRight(k) => -k,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Steer::Straight => 0,
            Steer::SlightLeft(_) => 1,
            Steer::SlightRight(_) => 2,
            Steer::TurnLeft(_) => 3,
            Steer::TurnRight(_) => 4,
        }
    }
}

impl LonCommand {
    pub fn index(self) -> usize {
        match self {
            LonCommand::Cruise => 0,
            LonCommand::Accelerate(_) => 1,
            LonCommand::Brake(_) => 2,
            LonCommand::Stop(_) => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Maneuver {
    pub duration: f64,
    pub lon: LonCommand,
    pub steer: Steer,
}

impl Maneuver {
    pub fn cruise(duration: f64) -> Self {
        Self {
            duration,
            lon: LonCommand::Cruise,
            steer: Steer::Straight,
        }
    }

    pub fn new(duration: f64, lon: LonCommand, steer: Steer) -> Self {
        Self { duration, lon, steer }
    }
}

/// Ego state in the world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoState {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    /// Unwrapped heading, radians.
    pub heading: f64,
    pub speed: f64,
    pub accel: f64,
    pub yaw_rate: f64,
    /// Arc length travelled since the start.
    pub arc: f64,
}

impl EgoState {
    /// `(speed, heading, accel)` as fed to the models.
    pub fn vector(&self) -> [f64; 3] {
        [self.speed, self.heading, self.accel]
    }

    /// Expresses a world point in this state's ego frame.
    pub fn to_ego(&self, wx: f64, wy: f64) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (wx - self.x, wy - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obstacle {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

#[derive(Clone, Copy, Debug)]
struct SegmentStart {
    t0: f64,
    x: f64,
    y: f64,
    heading: f64,
    speed: f64,
    arc: f64,
    accel: f64,
    /// Time after `t0` when a stop reaches rest.
    rest_after: f64,
    curvature: f64,
}

impl SegmentStart {
    /// Distance travelled and speed `dt` seconds into the segment.
    fn progress(&self, dt: f64) -> (f64, f64, f64) {
        let moving = dt.min(self.rest_after);
        let v = (self.speed + self.accel * moving).max(0.0);
        let s = self.speed * moving + 0.5 * self.accel * moving * moving;
        let a = if dt < self.rest_after { self.accel } else { 0.0 };
        (s.max(0.0), v, a)
    }

    fn place(&self, s: f64) -> (f64, f64, f64) {
        let k = self.curvature;
        let h = self.heading + k * s;
        if k.abs() < 1e-12 {
            let (sn, cs) = self.heading.sin_cos();
            (self.x + s * cs, self.y + s * sn, h)
        } else {
            (
                self.x + (h.sin() - self.heading.sin()) / k,
                self.y - (h.cos() - self.heading.cos()) / k,
                h,
            )
        }
    }
}

/// One scripted drive: maneuvers, their exact kinematics and the obstacles beside the path.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub seed: u64,
    pub script: Vec<Maneuver>,
    pub obstacles: Vec<Obstacle>,
    pub initial_speed: f64,
    starts: Vec<SegmentStart>,
    end: EgoState,
    rate_hz: f64,
}

impl Scenario {
    /// Validates `script` against the limits in `cfg` and integrates it exactly.
    pub fn from_script(seed: u64, initial_speed: f64, script: Vec<Maneuver>, cfg: &SynthConfig) -> Result<Self> {
        if !(initial_speed >= 0.0 && initial_speed <= cfg.max_speed) {
            return Err(Error::InfeasibleManeuver {
                index: 0,
                reason: format!("initial speed {initial_speed} outside [0, {}]", cfg.max_speed),
            });
        }
        let max_yaw = cfg.max_yaw_rate_deg.to_radians();
        let mut starts = Vec::with_capacity(script.len());
        let (mut t, mut x, mut y, mut heading, mut v, mut arc) = (0.0, 0.0, 0.0, 0.0, initial_speed, 0.0);
        let mut prev: Option<LonCommand> = None;
        for (index, m) in script.iter().enumerate() {
            let fail = |reason: String| Error::InfeasibleManeuver { index, reason };
            if !(m.duration > 0.0 && m.duration.is_finite()) {
                return Err(fail(format!("duration {} must be positive", m.duration)));
            }
            let k = m.steer.curvature();
            if m.steer != Steer::Straight {
                if m.lon != LonCommand::Cruise {
                    return Err(fail("steering is only allowed while cruising".into()));
                }
                if k.abs() > cfg.max_curvature {
                    return Err(fail(format!("curvature {} exceeds {}", k.abs(), cfg.max_curvature)));
                }
                if (k * v).abs() > max_yaw + 1e-12 {
                    return Err(fail(format!(
                        "yaw rate {:.1} deg/s exceeds {}",
                        (k * v).abs().to_degrees(),
                        cfg.max_yaw_rate_deg
                    )));
                }
            }
            let (accel, rest_after) = match m.lon {
                LonCommand::Cruise => (0.0, f64::INFINITY),
                LonCommand::Accelerate(a) => {
                    if matches!(prev, Some(LonCommand::Brake(_))) {
                        return Err(fail("brake cannot be followed directly by acceleration".into()));
                    }
                    if !(a > 0.0 && a <= cfg.max_accel) {
                        return Err(fail(format!("acceleration {a} outside (0, {}]", cfg.max_accel)));
                    }
                    if v + a * m.duration > cfg.max_speed + 1e-9 {
                        return Err(fail(format!(
                            "reaches {:.2} m/s, above the {} m/s limit",
                            v + a * m.duration,
                            cfg.max_speed
                        )));
                    }
                    (a, f64::INFINITY)
                }
                LonCommand::Brake(d) => {
                    if !(d > 0.0 && d <= cfg.max_decel) {
                        return Err(fail(format!("deceleration {d} outside (0, {}]", cfg.max_decel)));
                    }
                    if v - d * m.duration < -1e-9 {
                        return Err(fail("braking would reverse the vehicle; use a stop".into()));
                    }
                    (-d, f64::INFINITY)
                }
                LonCommand::Stop(d) => {
                    if !(d > 0.0 && d <= cfg.max_decel) {
                        return Err(fail(format!("deceleration {d} outside (0, {}]", cfg.max_decel)));
                    }
                    let rest = v / d;
                    if rest > m.duration + 1e-9 {
                        return Err(fail(format!(
                            "needs {rest:.2} s to come to rest but lasts {} s",
                            m.duration
                        )));
                    }
                    (-d, rest)
                }
            };
            let seg = SegmentStart {
                t0: t,
                x,
                y,
                heading,
                speed: v,
                arc,
                accel,
                rest_after,
                curvature: k,
            };
            let (s, v1, _) = seg.progress(m.duration);
            let (x1, y1, h1) = seg.place(s);
            starts.push(seg);
            t += m.duration;
            x = x1;
            y = y1;
            heading = h1;
            v = if matches!(m.lon, LonCommand::Stop(_)) { 0.0 } else { v1 };
            arc += s;
            prev = Some(m.lon);
        }
        let end = EgoState {
            t,
            x,
            y,
            heading,
            speed: v,
            accel: 0.0,
            yaw_rate: 0.0,
            arc,
        };
        Ok(Self {
            seed,
            script,
            obstacles: Vec::new(),
            initial_speed,
            starts,
            end,
            rate_hz: cfg.rate_hz,
        })
    }

    /// Total scripted time.
    pub fn duration(&self) -> f64 {
        self.end.t
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    /// Number of frames at the trace rate, including t=0 and the end.
    pub fn frame_count(&self) -> usize {
        (self.duration() * self.rate_hz + 1e-9).floor() as usize + 1
    }

    fn segment_at(&self, t: f64) -> Option<usize> {
        if t >= self.end.t || self.starts.is_empty() {
            return None;
        }
        Some(self.starts.partition_point(|s| s.t0 <= t).saturating_sub(1))
    }

    /// Exact state at time `t`. Past the script the ego keeps its final speed straight ahead.
    pub fn state_at(&self, t: f64) -> EgoState {
        let t = t.max(0.0);
        match self.segment_at(t) {
            Some(i) => {
                let seg = &self.starts[i];
                let (s, v, a) = seg.progress(t - seg.t0);
                let (x, y, heading) = seg.place(s);
                EgoState {
                    t,
                    x,
                    y,
                    heading,
                    speed: v,
                    accel: a,
                    yaw_rate: seg.curvature * v,
                    arc: seg.arc + s,
                }
            }
            None => {
                let dt = t - self.end.t;
                let s = self.end.speed * dt;
                let (sn, cs) = self.end.heading.sin_cos();
                EgoState {
                    t,
                    x: self.end.x + s * cs,
                    y: self.end.y + s * sn,
                    arc: self.end.arc + s,
                    ..self.end
                }
            }
        }
    }

    /// World position and heading at arc length `s`, extended straight past the script end.
    pub fn pose_at_arc(&self, s: f64) -> (f64, f64, f64) {
        if s >= self.end.arc {
            let extra = s - self.end.arc;
            let (sn, cs) = self.end.heading.sin_cos();
            return (self.end.x + extra * cs, self.end.y + extra * sn, self.end.heading);
        }
        let i = self.starts.partition_point(|seg| seg.arc <= s).saturating_sub(1);
        let seg = &self.starts[i];
        seg.place(s - seg.arc)
    }

    /// Trace sampled at the frame rate.
    pub fn trace(&self) -> Vec<EgoState> {
        (0..self.frame_count())
            .map(|f| self.state_at(f as f64 / self.rate_hz))
            .collect()
    }

    /// Active command at time `t` (cruise straight past the end).
    pub fn command_at(&self, t: f64) -> Maneuver {
        match self.segment_at(t.max(0.0)) {
            Some(i) => self.script[i],
            None => Maneuver::cruise(f64::INFINITY),
        }
    }

    /// Smallest gap between the ego disc and any obstacle along the script, sampled at 20 Hz.
    pub fn min_clearance(&self, ego_radius: f64) -> f64 {
        let n = (self.duration() * 20.0).ceil() as usize;
        let mut best = f64::INFINITY;
        for i in 0..=n {
            let st = self.state_at(i as f64 / 20.0);
            for o in &self.obstacles {
                let d = ((st.x - o.x).powi(2) + (st.y - o.y).powi(2)).sqrt() - o.radius - ego_radius;
                best = best.min(d);
            }
        }
        best
    }
}

fn grid(x: f64) -> f64 {
    (x * 2.0).round() / 2.0
}

fn half_seconds(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let lo2 = (lo * 2.0).round() as u32;
    let hi2 = (hi * 2.0).round() as u32;
    rng.random_range(lo2..=hi2.max(lo2)) as f64 / 2.0
}

/// Deterministic random scenario for `seed`.
pub fn generate_scenario(seed: u64, cfg: &SynthConfig) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce9_a1d0_0000_0000);
    let v0 = rng.random_range(cfg.min_speed + 1.0..cfg.max_speed - 3.0);
    let mut v = v0;
    let mut script = Vec::new();
    let mut total = 0.0;
    let mut prev = LonCommand::Cruise;
    // A little past the nominal duration so label windows near the end stay scripted.
    while total < cfg.duration + 3.0 {
        let m = match prev {
            LonCommand::Accelerate(_) | LonCommand::Brake(_) => cruise_segment(&mut rng, v, cfg),
            LonCommand::Stop(_) => {
                if rng.random_bool(0.5) {
                    Maneuver::new(half_seconds(&mut rng, 1.0, 2.0), LonCommand::Stop(cfg.stop_decel), Steer::Straight)
                } else {
                    let a = rng.random_range(cfg.accel_range.0..cfg.accel_range.1);
                    let d = half_seconds(&mut rng, 2.0, 4.0).min(grid((cfg.max_speed - 1.0) / a)).max(0.5);
                    Maneuver::new(d, LonCommand::Accelerate(a), Steer::Straight)
                }
            }
            LonCommand::Cruise => {
                let r: f64 = rng.random();
                if r < 0.35 {
                    cruise_segment(&mut rng, v, cfg)
                } else if r < 0.6 {
                    let a = rng.random_range(cfg.accel_range.0..cfg.accel_range.1);
                    let room = grid(((cfg.max_speed - 1.0 - v) / a).max(0.0));
                    if room < 1.0 {
                        brake_segment(&mut rng, v, cfg).unwrap_or_else(|| cruise_segment(&mut rng, v, cfg))
                    } else {
                        Maneuver::new(half_seconds(&mut rng, 1.0, room.min(3.0)), LonCommand::Accelerate(a), Steer::Straight)
                    }
                } else if r < 0.85 {
                    brake_segment(&mut rng, v, cfg).unwrap_or_else(|| cruise_segment(&mut rng, v, cfg))
                } else {
                    // Pick a deceleration that brings the ego to rest on the half-second grid.
                    let mut rest = grid(v / cfg.stop_decel).max(1.0);
                    if v / rest > cfg.max_decel {
                        rest = (v / cfg.max_decel * 2.0).ceil() / 2.0;
                    }
                    let hold = half_seconds(&mut rng, 1.0, 2.0);
                    Maneuver::new(rest + hold, LonCommand::Stop(v / rest), Steer::Straight)
                }
            }
        };
        v = match m.lon {
            LonCommand::Cruise => v,
            LonCommand::Accelerate(a) => v + a * m.duration,
            LonCommand::Brake(d) => v - d * m.duration,
            LonCommand::Stop(_) => 0.0,
        };
        total += m.duration;
        prev = m.lon;
        script.push(m);
    }
    let mut scenario = Scenario::from_script(seed, v0, script, cfg)?;
    place_obstacles(&mut scenario, &mut rng, cfg);
    Ok(scenario)
}

fn cruise_segment(rng: &mut ChaCha8Rng, v: f64, cfg: &SynthConfig) -> Maneuver {
    let duration = half_seconds(rng, 1.0, 3.0);
    if v < cfg.min_speed {
        return Maneuver::cruise(duration);
    }
    let r: f64 = rng.random();
    let left = rng.random_bool(0.5);
    let (lo, hi) = if r < 0.4 {
        return Maneuver::cruise(duration);
    } else if r < 0.7 {
        cfg.slight_yaw_deg
    } else {
        cfg.turn_yaw_deg
    };
    let yaw = rng.random_range(lo..hi).to_radians();
    let k = yaw / v;
    if k > cfg.max_curvature {
        return Maneuver::cruise(duration);
    }
    let steer = match (r < 0.7, left) {
        (true, true) => Steer::SlightLeft(k),
        (true, false) => Steer::SlightRight(k),
        (false, true) => Steer::TurnLeft(k),
        (false, false) => Steer::TurnRight(k),
    };
    Maneuver::new(duration, LonCommand::Cruise, steer)
}

fn brake_segment(rng: &mut ChaCha8Rng, v: f64, cfg: &SynthConfig) -> Option<Maneuver> {
    let d = rng.random_range(cfg.brake_range.0..cfg.brake_range.1);
    let room = grid(((v - cfg.min_speed) / d).max(0.0));
    if room < 1.0 {
        return None;
    }
    Some(Maneuver::new(half_seconds(rng, 1.0, room.min(3.0)), LonCommand::Brake(d), Steer::Straight))
}

fn place_obstacles(scenario: &mut Scenario, rng: &mut ChaCha8Rng, cfg: &SynthConfig) {
    for _ in 0..cfg.obstacles {
        for _attempt in 0..20 {
            let t = rng.random_range(1.0..scenario.duration());
            let st = scenario.state_at(t);
            let radius = rng.random_range(cfg.obstacle_radius.0..cfg.obstacle_radius.1);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let offset = cfg.ego_radius + radius + cfg.clearance + rng.random_range(0.5..4.0);
            let (sn, cs) = st.heading.sin_cos();
            let o = Obstacle {
                x: st.x - side * offset * sn,
                y: st.y + side * offset * cs,
                radius,
            };
            scenario.obstacles.push(o);
            if scenario.min_clearance(cfg.ego_radius) >= cfg.clearance {
                break;
            }
            scenario.obstacles.pop();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Forward-Euler replay at 100 Hz using only commands, not the closed form.
    fn fine_replay(sc: &Scenario, until: f64) -> Vec<(f64, f64, f64)> {
        let dt = 0.01;
        let (mut x, mut y, mut h, mut v) = (0.0f64, 0.0f64, 0.0f64, sc.initial_speed);
        let mut out = vec![(0.0, x, y)];
        let steps = (until / dt).round() as usize;
        for i in 0..steps {
            let t = i as f64 * dt;
            let m = sc.command_at(t + 0.5 * dt);
            let a = match m.lon {
                LonCommand::Cruise => 0.0,
                LonCommand::Accelerate(a) => a,
                LonCommand::Brake(d) => -d,
                LonCommand::Stop(d) => {
                    if v > 0.0 {
                        -d
                    } else {
                        0.0
                    }
                }
            };
            // midpoint rule on speed and heading
            let mut v1 = v + a * dt;
            let mut moving_dt = dt;
            if v1 < 0.0 {
                moving_dt = v / -a;
                v1 = 0.0;
            }
            let ds = 0.5 * (v + v1) * moving_dt;
            let k = m.steer.curvature();
            let hm = h + 0.5 * k * ds;
            x += ds * hm.cos();
            y += ds * hm.sin();
            h += k * ds;
            v = v1;
            out.push((t + dt, x, y));
        }
        out
    }

    #[test]
    fn cruise_is_straight() {
        let cfg = SynthConfig::default();
        let sc = Scenario::from_script(0, 10.0, vec![Maneuver::cruise(5.0)], &cfg).unwrap();
        for st in sc.trace() {
            assert_eq!(st.heading, 0.0);
            assert_eq!(st.y, 0.0);
            assert!((st.x - 10.0 * st.t).abs() < 1e-12);
        }
    }

    #[test]
    fn stop_from_rest_is_stationary() {
        let cfg = SynthConfig::default();
        let sc = Scenario::from_script(0, 0.0, vec![Maneuver::new(3.0, LonCommand::Stop(2.0), Steer::Straight)], &cfg)
            .unwrap();
        assert!(sc.trace().iter().all(|s| s.x == 0.0 && s.y == 0.0 && s.speed == 0.0));
    }

    #[test]
    fn closed_form_matches_fine_integration() {
        let cfg = SynthConfig::default();
        for seed in 0..20 {
            let sc = generate_scenario(seed, &cfg).unwrap();
            let fine = fine_replay(&sc, sc.duration());
            for st in sc.trace() {
                let idx = (st.t / 0.01).round() as usize;
                let (_, fx, fy) = fine[idx.min(fine.len() - 1)];
                let err = ((st.x - fx).powi(2) + (st.y - fy).powi(2)).sqrt();
                assert!(err < 1e-3, "seed {seed} t {} err {err}", st.t);
            }
        }
    }

    #[test]
    fn infeasible_segments_are_named() {
        let cfg = SynthConfig::default();
        let script = vec![
            Maneuver::cruise(1.0),
            Maneuver::new(1.0, LonCommand::Brake(2.0), Steer::Straight),
            Maneuver::new(1.0, LonCommand::Accelerate(1.0), Steer::Straight),
        ];
        match Scenario::from_script(0, 8.0, script, &cfg) {
            Err(Error::InfeasibleManeuver { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
        let turn_while_braking = vec![Maneuver::new(1.0, LonCommand::Brake(1.0), Steer::TurnLeft(0.05))];
        assert!(matches!(
            Scenario::from_script(0, 8.0, turn_while_braking, &cfg),
            Err(Error::InfeasibleManeuver { index: 0, .. })
        ));
        let too_tight = vec![Maneuver::new(1.0, LonCommand::Cruise, Steer::TurnLeft(0.2))];
        assert!(Scenario::from_script(0, 10.0, too_tight, &cfg).is_err());
        let reverse = vec![Maneuver::new(3.0, LonCommand::Brake(2.0), Steer::Straight)];
        assert!(Scenario::from_script(0, 4.0, reverse, &cfg).is_err());
    }

    #[test]
    fn generated_scenarios_respect_limits() {
        let cfg = SynthConfig::default();
        let max_dh = cfg.max_yaw_rate_deg.to_radians() * cfg.frame_dt();
        for seed in 0..50 {
            let sc = generate_scenario(seed, &cfg).unwrap();
            assert!(sc.duration() >= cfg.duration);
            let tr = sc.trace();
            for w in tr.windows(2) {
                assert!(w[1].speed >= 0.0 && w[1].speed <= cfg.max_speed + 1e-9);
                assert!((w[1].heading - w[0].heading).abs() <= max_dh + 1e-9);
            }
            assert!(sc.min_clearance(cfg.ego_radius) >= cfg.clearance - 1e-9);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = generate_scenario(42, &cfg).unwrap();
        let b = generate_scenario(42, &cfg).unwrap();
        assert_eq!(a.script, b.script);
        assert_eq!(a.obstacles, b.obstacles);
    }

    #[test]
    fn arc_pose_agrees_with_time_pose() {
        let cfg = SynthConfig::default();
        let sc = generate_scenario(3, &cfg).unwrap();
        for st in sc.trace() {
            let (x, y, h) = sc.pose_at_arc(st.arc);
            assert!((x - st.x).abs() < 1e-9 && (y - st.y).abs() < 1e-9 && (h - st.heading).abs() < 1e-9);
        }
    }
}
