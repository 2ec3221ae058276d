//! Open-loop planning metrics: waypoint L2, the inflated-circle collision proxy and
//! per-horizon decision accuracy.

use std::fmt;

use crate::error::Result;
use crate::plan::{TrajectorySet, HORIZONS, WAYPOINT_DT};
use crate::policy::{Plan, Planner};
use crate::scene::{Dataset, Obstacle, Sample};

/// Index of the temporal waypoint nearest `horizon` seconds.
pub fn waypoint_index(horizon: f64) -> usize {
    ((horizon / WAYPOINT_DT).round() as usize).max(1) - 1
}

/// Whether `p` lies inside any obstacle inflated by `ego_radius`.
pub fn collides(p: [f64; 2], obstacles: &[Obstacle], ego_radius: f64) -> bool {
    obstacles.iter().any(|o| {
        let (dx, dy) = (p[0] - o.x, p[1] - o.y);
        (dx * dx + dy * dy).sqrt() < o.radius + ego_radius
    })
}

/// Per-sample scores feeding the report.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    pub l2: [f64; HORIZONS],
    pub collision: [bool; HORIZONS],
    pub lateral: [bool; HORIZONS],
    pub longitudinal: [bool; HORIZONS],
}

pub fn score(plan: &Plan, sample: &Sample, ego_radius: f64) -> SampleScore {
    let mut s = SampleScore {
        l2: [0.0; HORIZONS],
        collision: [false; HORIZONS],
        lateral: [false; HORIZONS],
        longitudinal: [false; HORIZONS],
    };
    let pred: &TrajectorySet = &plan.trajectory;
    let gt = &sample.trajectory;
    for h in 0..HORIZONS {
        let i = waypoint_index((h + 1) as f64);
        let (p, g) = (pred.temporal[i], gt.temporal[i]);
        s.l2[h] = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
        s.collision[h] = pred.temporal[..=i]
            .iter()
            .any(|&q| collides(q, &sample.obstacles, ego_radius));
        s.lateral[h] = plan.decisions.lateral[h] == sample.labels.lateral[h];
        s.longitudinal[h] = plan.decisions.longitudinal[h] == sample.labels.longitudinal[h];
    }
    s
}

/// Averages over a held-out set. Rates and accuracies are percentages.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OpenLoopReport {
    pub samples: usize,
    pub l2: [f64; HORIZONS],
    pub l2_avg: f64,
    /// Collision proxy: a sample counts at horizon h when any waypoint up to h lies inside an
    /// obstacle circle inflated by the ego radius.
    pub collision: [f64; HORIZONS],
    pub collision_avg: f64,
    pub lateral: [f64; HORIZONS],
    pub lateral_avg: f64,
    pub longitudinal: [f64; HORIZONS],
    pub longitudinal_avg: f64,
    pub joint: [f64; HORIZONS],
    pub joint_avg: f64,
}

fn mean3(v: &[f64; HORIZONS]) -> f64 {
    v.iter().sum::<f64>() / HORIZONS as f64
}

impl OpenLoopReport {
    pub fn from_scores(scores: &[SampleScore]) -> Self {
        let n = scores.len().max(1) as f64;
        let mut r = Self {
            samples: scores.len(),
            ..Self::default()
        };
        let pct = |hits: usize| 100.0 * hits as f64 / n;
        for h in 0..HORIZONS {
            let count = |f: &dyn Fn(&SampleScore) -> bool| scores.iter().filter(|s| f(s)).count();
            r.l2[h] = scores.iter().map(|s| s.l2[h]).sum::<f64>() / n;
            r.collision[h] = pct(count(&|s| s.collision[h]));
            r.lateral[h] = pct(count(&|s| s.lateral[h]));
            r.longitudinal[h] = pct(count(&|s| s.longitudinal[h]));
            r.joint[h] = pct(count(&|s| s.lateral[h] && s.longitudinal[h]));
        }
        r.l2_avg = mean3(&r.l2);
        r.collision_avg = mean3(&r.collision);
        r.lateral_avg = mean3(&r.lateral);
        r.longitudinal_avg = mean3(&r.longitudinal);
        r.joint_avg = mean3(&r.joint);
        r
    }

    fn rows(&self) -> [(&'static str, [f64; HORIZONS], f64); 5] {
        [
            ("l2_m", self.l2, self.l2_avg),
            ("collision_proxy_pct", self.collision, self.collision_avg),
            ("lateral_acc_pct", self.lateral, self.lateral_avg),
            ("longitudinal_acc_pct", self.longitudinal, self.longitudinal_avg),
            ("joint_acc_pct", self.joint, self.joint_avg),
        ]
    }

    /// `metric,1s,2s,3s,avg` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,1s,2s,3s,avg\n");
        for (name, v, avg) in self.rows() {
            out.push_str(&format!("{name},{},{},{},{avg}\n", v[0], v[1], v[2]));
        }
        out
    }
}

impl fmt::Display for OpenLoopReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} samples", self.samples)?;
        writeln!(f, "{:<22}{:>9}{:>9}{:>9}{:>9}", "", "1s", "2s", "3s", "avg")?;
        for (name, v, avg) in self.rows() {
            writeln!(f, "{name:<22}{:>9.3}{:>9.3}{:>9.3}{avg:>9.3}", v[0], v[1], v[2])?;
        }
        Ok(())
    }
}

/// Scores every sample of `dataset` with the understanding side lagging by `offset` frames.
pub fn evaluate_scores(dataset: &Dataset, planner: &dyn Planner, offset: usize, ego_radius: f64) -> Result<Vec<SampleScore>> {
    dataset
        .samples
        .iter()
        .map(|s| Ok(score(&planner.plan(s, offset)?, s, ego_radius)))
        .collect()
}

pub fn eval_open_loop(dataset: &Dataset, planner: &dyn Planner, offset: usize, ego_radius: f64) -> Result<OpenLoopReport> {
    Ok(OpenLoopReport::from_scores(&evaluate_scores(dataset, planner, offset, ego_radius)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn waypoint_indices() {
        assert_eq!(waypoint_index(1.0), 1);
        assert_eq!(waypoint_index(2.0), 3);
        assert_eq!(waypoint_index(3.0), 5);
    }

    #[test]
    fn inflated_circle() {
        let o = [Obstacle {
            x: 5.0,
            y: 0.0,
            radius: 1.0,
        }];
        assert!(collides([3.5, 0.0], &o, 1.0));
        assert!(!collides([2.9, 0.0], &o, 1.0));
        assert!(!collides([3.5, 0.0], &o, 0.0));
    }

    #[test]
    fn averages_are_horizon_means() {
        let s = |l: f64, c: bool, a: bool, b: bool| SampleScore {
            l2: [l, 2.0 * l, 3.0 * l],
            collision: [false, c, c],
            lateral: [a; 3],
            longitudinal: [b, true, b],
        };
        let r = OpenLoopReport::from_scores(&[s(1.0, true, true, false), s(2.0, false, true, true)]);
        assert!((r.l2[0] - 1.5).abs() < 1e-12);
        assert!((r.l2_avg - 3.0).abs() < 1e-12);
        assert_eq!(r.collision, [0.0, 50.0, 50.0]);
        assert_eq!(r.joint, [50.0, 100.0, 50.0]);
        assert!((r.joint_avg - 200.0 / 3.0).abs() < 1e-9);
    }
}
