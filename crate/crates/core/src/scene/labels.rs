//! Meta-action labels and ground-truth trajectories derived from traces.

use super::scenario::{EgoState, Scenario, SynthConfig};
use crate::error::{Error, Result};
use crate::plan::{
    Lateral, Longitudinal, MetaActionSequence, TrajectorySet, HORIZONS, ROUTE_SPACING, SPATIAL_POINTS,
    TEMPORAL_POINTS, WAYPOINT_DT,
};

/// Longitudinal label for one horizon interval given its sampled speeds.
pub fn longitudinal_label(speeds: &[f64], cfg: &SynthConfig) -> Longitudinal {
    let peak = speeds.iter().cloned().fold(0.0, f64::max);
    let dv = speeds[speeds.len() - 1] - speeds[0];
    if peak < cfg.stop_speed {
        Longitudinal::Stop
    } else if dv > cfg.speed_delta {
        Longitudinal::Accelerate
    } else if dv < -cfg.speed_delta {
        Longitudinal::Slow
    } else {
        Longitudinal::Keep
    }
}

/// Lateral label for a heading change in radians, left positive.
pub fn lateral_label(dheading: f64, cfg: &SynthConfig) -> Lateral {
    let deg = dheading.to_degrees();
    let mag = deg.abs();
    if mag < cfg.straight_deg {
        Lateral::Straight
    } else if mag <= cfg.turn_deg {
        if deg > 0.0 {
            Lateral::SlightLeft
        } else {
            Lateral::SlightRight
        }
    } else if deg > 0.0 {
        Lateral::TurnLeft
    } else {
        Lateral::TurnRight
    }
}

/// Labels the three one-second horizons that start at frame `t` of a trace sampled at
/// `rate_hz`.
pub fn label_meta_actions(trace: &[EgoState], t: usize, rate_hz: f64, cfg: &SynthConfig) -> Result<MetaActionSequence> {
    let per_second = rate_hz.round() as usize;
    let needed = t + HORIZONS * per_second + 1;
    if trace.len() < needed {
        return Err(Error::TraceTooShort {
            needed,
            available: trace.len(),
        });
    }
    let mut out = MetaActionSequence::uniform(Lateral::Straight, Longitudinal::Keep);
    for h in 0..HORIZONS {
        let a = t + h * per_second;
        let window = &trace[a..=a + per_second];
        let speeds: Vec<f64> = window.iter().map(|s| s.speed).collect();
        out.longitudinal[h] = longitudinal_label(&speeds, cfg);
        out.lateral[h] = lateral_label(window[per_second].heading - window[0].heading, cfg);
    }
    Ok(out)
}

/// Timed waypoints and route points in the ego frame at time `t`.
pub fn ground_truth(scenario: &Scenario, t: f64) -> TrajectorySet {
    let now = scenario.state_at(t);
    let temporal = (1..=TEMPORAL_POINTS)
        .map(|m| {
            let st = scenario.state_at(t + m as f64 * WAYPOINT_DT);
            now.to_ego(st.x, st.y)
        })
        .collect();
    let spatial = (1..=SPATIAL_POINTS)
        .map(|n| {
            let (x, y, _) = scenario.pose_at_arc(now.arc + n as f64 * ROUTE_SPACING);
            now.to_ego(x, y)
        })
        .collect();
    TrajectorySet { temporal, spatial }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::scenario::{LonCommand, Maneuver, Steer};

    fn labels_for(v0: f64, script: Vec<Maneuver>) -> MetaActionSequence {
        let cfg = SynthConfig::default();
        let sc = Scenario::from_script(0, v0, script, &cfg).unwrap();
        label_meta_actions(&sc.trace(), 0, cfg.rate_hz, &cfg).unwrap()
    }

    #[test]
    fn constant_speed_straight() {
        let m = labels_for(10.0, vec![Maneuver::cruise(4.0)]);
        assert_eq!(m, MetaActionSequence::uniform(Lateral::Straight, Longitudinal::Keep));
    }

    #[test]
    fn hard_brake_then_hold() {
        let m = labels_for(
            3.0,
            vec![Maneuver::new(4.0, LonCommand::Stop(3.5), Steer::Straight)],
        );
        assert_eq!(m.longitudinal, [Longitudinal::Slow, Longitudinal::Stop, Longitudinal::Stop]);
        assert_eq!(m.lateral, [Lateral::Straight; 3]);
    }

    #[test]
    fn left_turn_at_fifteen_degrees_per_second() {
        let v = 8.0;
        let k = 15f64.to_radians() / v;
        let m = labels_for(
            v,
            vec![
                Maneuver::new(2.0, LonCommand::Cruise, Steer::TurnLeft(k)),
                Maneuver::cruise(2.0),
            ],
        );
        assert_eq!(m.lateral, [Lateral::TurnLeft, Lateral::TurnLeft, Lateral::Straight]);
    }

    #[test]
    fn short_trace_rejected() {
        let cfg = SynthConfig::default();
        let sc = Scenario::from_script(0, 5.0, vec![Maneuver::cruise(2.0)], &cfg).unwrap();
        assert!(matches!(
            label_meta_actions(&sc.trace(), 0, 2.0, &cfg),
            Err(Error::TraceTooShort { needed: 7, available: 5 })
        ));
    }

    #[test]
    fn straight_ground_truth() {
        let cfg = SynthConfig::default();
        let sc = Scenario::from_script(0, 10.0, vec![Maneuver::cruise(6.0)], &cfg).unwrap();
        let gt = ground_truth(&sc, 1.0);
        assert!((gt.temporal[1][0] - 10.0).abs() < 1e-12);
        assert!((gt.temporal[5][0] - 30.0).abs() < 1e-12);
        assert!((gt.spatial[19][0] - 20.0).abs() < 1e-12);
        assert!(gt.temporal.iter().chain(&gt.spatial).all(|p| p[1].abs() < 1e-12));
    }
}
