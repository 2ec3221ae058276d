//! The assembled driving policy and the planner interface used by evaluation.

use crate::action::{ActionExpert, AePrediction, Observation};
use crate::config::RunConfig;
use crate::error::Result;
use crate::numeric::{Real, Tensor};
use crate::plan::{MetaActionSequence, TrajectorySet};
use crate::refiner::{DiffusionRefiner, RefinerContext};
use crate::scene::Sample;
use crate::understanding::{default_prompt, Encoded, UnderstandingExpert, UnderstandingInput};

/// Decisions and trajectories for one decision frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub decisions: MetaActionSequence,
    pub trajectory: TrajectorySet,
}

/// Anything that maps a dataset sample to a plan. `offset` is how many frames the
/// understanding side lags the action side.
pub trait Planner {
    fn plan(&self, sample: &Sample, offset: usize) -> Result<Plan>;
}

/// Returns the ground truth.
pub struct OraclePlanner;

impl Planner for OraclePlanner {
    fn plan(&self, sample: &Sample, _offset: usize) -> Result<Plan> {
        Ok(Plan {
            decisions: sample.labels,
            trajectory: sample.trajectory.clone(),
        })
    }
}

/// Stays put: every point at the origin, fixed decisions.
pub struct ZeroPlanner;

impl Planner for ZeroPlanner {
    fn plan(&self, _sample: &Sample, _offset: usize) -> Result<Plan> {
        Ok(Plan {
            decisions: MetaActionSequence::uniform(crate::plan::Lateral::Straight, crate::plan::Longitudinal::Stop),
            trajectory: TrajectorySet::zeros(),
        })
    }
}

/// Seed of the refinement noise for one decision frame.
pub fn refine_seed(scenario_seed: u64, frame: usize) -> u64 {
    scenario_seed ^ (frame as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Frozen understanding expert, trained action expert and optional refiner.
#[derive(Clone, Debug)]
pub struct Policy<T: Real = f64> {
    pub cfg: RunConfig,
    pub ue: UnderstandingExpert<T>,
    pub ae: ActionExpert<T>,
    pub refiner: DiffusionRefiner<T>,
    /// Whether inference passes the action expert's trajectories through the refiner.
    pub use_refiner: bool,
}

impl Policy<f64> {
    /// Freshly initialised from the config seeds.
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            ue: UnderstandingExpert::new(cfg.ue_config()),
            ae: ActionExpert::new(cfg.ae_config()),
            refiner: DiffusionRefiner::new(cfg.refiner_config()),
            use_refiner: cfg.head == crate::config::Head::Diffusion,
        }
    }
}

impl<T: Real> Policy<T> {
    pub fn cast<U: Real>(&self) -> Policy<U> {
        Policy {
            cfg: self.cfg.clone(),
            ue: self.ue.cast(),
            ae: self.ae.cast(),
            refiner: self.refiner.cast(),
            use_refiner: self.use_refiner,
        }
    }

    pub fn prompt(&self) -> Vec<usize> {
        default_prompt(self.cfg.prompt_len)
    }

    pub fn understanding_input(&self, frames: &[Tensor<f32>]) -> Result<UnderstandingInput<T>> {
        UnderstandingInput::from_frames(frames, &self.prompt())
    }

    /// Encodes the sample's history frames lagged by `offset`.
    pub fn encode_sample(&self, sample: &Sample, offset: usize, epoch: u64) -> Result<Encoded<T>> {
        let frames = sample.history(self.cfg.stale_frames, self.cfg.history_frames, offset);
        self.ue.encode(&self.understanding_input(frames)?, epoch)
    }

    /// Action expert pass against `encoded`, refined when enabled.
    pub fn act(
        &self,
        obs: &Observation<T>,
        encoded: &Encoded<T>,
        ego_history: &[[f64; 3]; 4],
        seed: u64,
    ) -> Result<(AePrediction<T>, Plan)> {
        let pred = self.ae.predict(obs, &encoded.cache)?;
        let plan = self.finish(obs, &pred, &encoded.reasoning, ego_history, seed)?;
        Ok((pred, plan))
    }

    /// Turns an action-expert prediction into a plan, refining its trajectories if enabled.
    pub fn finish(
        &self,
        obs: &Observation<T>,
        pred: &AePrediction<T>,
        reasoning: &Tensor<T>,
        ego_history: &[[f64; 3]; 4],
        seed: u64,
    ) -> Result<Plan> {
        let decisions = pred.decisions();
        let prior = pred.trajectory_set();
        let trajectory = if self.use_refiner {
            let ctx = RefinerContext {
                f_bev: obs.bev.clone(),
                h_de: pred.h_de.clone(),
                r_tokens: reasoning.clone(),
                ego: obs.ego,
                ego_history: *ego_history,
            };
            self.refiner.refine(&prior, &ctx, self.cfg.t_trunc, seed)?
        } else {
            prior
        };
        Ok(Plan { decisions, trajectory })
    }
}

impl<T: Real> Planner for Policy<T> {
    fn plan(&self, sample: &Sample, offset: usize) -> Result<Plan> {
        let encoded = self.encode_sample(sample, offset, 0)?;
        let obs = Observation::new(&sample.current_rgb, &sample.current_bev, sample.ego);
        let seed = refine_seed(sample.scenario_seed, sample.decision_frame());
        Ok(self.act(&obs, &encoded, &sample.ego_history, seed)?.1)
    }
}
