//! Deterministic stand-in for camera and BEV encoders: a fixed random projection of a small
//! world-state feature vector into token grids.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::scenario::{EgoState, LonCommand, Scenario};
use crate::numeric::Tensor;

/// Half-second command slots covering the three-second horizon.
pub const SLOTS: usize = 6;
const SLOT_FEATURES: usize = 4 + 5 + 4;
const NEAREST: usize = 2;
/// Length of the feature vector behind every token.
pub const FEATURES: usize = 3 + SLOTS * SLOT_FEATURES + NEAREST * 4 + 1;

/// Feature vector for ego `state` at time `t` of `scenario`. Commands come from the script;
/// ego kinematics and obstacle geometry come from `state`, which may differ from the script in
/// closed loop.
pub fn features(scenario: &Scenario, t: f64, state: &EgoState) -> Vec<f64> {
    let mut f = Vec::with_capacity(FEATURES);
    f.extend([state.speed / 10.0, state.accel / 2.0, state.yaw_rate / 0.5]);
    for q in 0..SLOTS {
        let t0 = t + 0.5 * q as f64;
        let t1 = t0 + 0.5;
        let m = scenario.command_at(t0 + 0.25);
        let (s0, s1) = (scenario.state_at(t0), scenario.state_at(t1));
        let mut lon = [0.0; 4];
        lon[m.lon.index()] = 1.0;
        let mut lat = [0.0; 5];
        lat[m.steer.index()] = 1.0;
        let accel = match m.lon {
            LonCommand::Cruise => 0.0,
            LonCommand::Accelerate(a) => a,
            LonCommand::Brake(d) => -d,
            LonCommand::Stop(d) => {
                if s0.speed > 0.0 {
                    -d
                } else {
                    0.0
                }
            }
        };
        f.extend(lon);
        f.extend(lat);
        f.extend([
            accel / 2.0,
            m.steer.curvature() * s0.speed / 0.5,
            (s1.speed - s0.speed) / 2.0,
            (s1.heading - s0.heading) / 0.2,
        ]);
    }
    let mut near: Vec<(f64, [f64; 2], f64)> = scenario
        .obstacles
        .iter()
        .map(|o| {
            let p = state.to_ego(o.x, o.y);
            ((p[0] * p[0] + p[1] * p[1]).sqrt(), p, o.radius)
        })
        .collect();
    near.sort_by(|a, b| a.0.total_cmp(&b.0));
    for i in 0..NEAREST {
        match near.get(i) {
            Some(&(_, p, r)) => f.extend([p[0] / 20.0, p[1] / 20.0, r, 1.0]),
            None => f.extend([0.0; 4]),
        }
    }
    f.push(1.0);
    debug_assert_eq!(f.len(), FEATURES);
    f
}

/// Fixed projections from features to RGB and BEV token grids.
#[derive(Clone, Debug)]
pub struct Renderer {
    pub width: usize,
    pub rgb_tokens: usize,
    pub bev_tokens: usize,
    rgb: Tensor<f64>,
    bev: Tensor<f64>,
}

impl Renderer {
    pub fn new(seed: u64, width: usize, rgb_tokens: usize, bev_tokens: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e4d_e700);
        let normal = Normal::new(0.0, 3.0 / (FEATURES as f64).sqrt()).expect("finite std");
        let mut draw = |cols: usize| Tensor::from_fn(FEATURES, cols, |_, _| normal.sample(&mut rng));
        let rgb = draw(rgb_tokens * width);
        let bev = draw(bev_tokens * width);
        Self {
            width,
            rgb_tokens,
            bev_tokens,
            rgb,
            bev,
        }
    }

    fn project(&self, f: &[f64], w: &Tensor<f64>, tokens: usize) -> Tensor<f32> {
        let x = Tensor::from_vec(1, FEATURES, f.to_vec()).expect("feature length");
        let y = x.matmul(w).expect("projection shape");
        Tensor::from_vec(tokens, self.width, y.data().iter().map(|&v| v as f32).collect())
            .expect("token grid")
    }

    /// `(rgb, bev)` token grids for a feature vector.
    pub fn render_features(&self, f: &[f64]) -> (Tensor<f32>, Tensor<f32>) {
        (
            self.project(f, &self.rgb, self.rgb_tokens),
            self.project(f, &self.bev, self.bev_tokens),
        )
    }

    /// Tokens for the scripted state at time `t`.
    pub fn render(&self, scenario: &Scenario, t: f64) -> (Tensor<f32>, Tensor<f32>) {
        let state = scenario.state_at(t);
        self.render_features(&features(scenario, t, &state))
    }

    pub fn render_rgb(&self, scenario: &Scenario, t: f64) -> Tensor<f32> {
        let state = scenario.state_at(t);
        self.project(&features(scenario, t, &state), &self.rgb, self.rgb_tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::scenario::{generate_scenario, Maneuver, Scenario, SynthConfig};

    #[test]
    fn identical_states_identical_tokens() {
        let cfg = SynthConfig::default();
        let sc = generate_scenario(5, &cfg).unwrap();
        let r = Renderer::new(1, 16, 4, 4);
        assert_eq!(r.render(&sc, 2.5), r.render(&sc, 2.5));
        assert_eq!(r.render(&sc, 2.5), Renderer::new(1, 16, 4, 4).render(&sc, 2.5));
    }

    #[test]
    fn speed_alone_changes_tokens() {
        let cfg = SynthConfig::default();
        let r = Renderer::new(1, 16, 4, 4);
        for (va, vb) in [(5.0, 5.01), (0.0, 0.05), (12.0, 14.0)] {
            let a = Scenario::from_script(0, va, vec![Maneuver::cruise(5.0)], &cfg).unwrap();
            let b = Scenario::from_script(0, vb, vec![Maneuver::cruise(5.0)], &cfg).unwrap();
            let (ra, _) = r.render(&a, 0.0);
            let (rb, _) = r.render(&b, 0.0);
            assert!(ra.data().iter().zip(rb.data()).any(|(x, y)| x != y));
        }
    }
}
