//! Training loops for the action expert (joint decision and trajectory loss) and for the
//! refiner (L1 clean-trajectory prediction with the action expert frozen).

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, OptimizerState, Precision};
use crate::action::{joint_loss, trajectory_loss_on_tape, Observation};
use crate::error::{Error, Result};
use crate::numeric::optim::{clip_grad_norm, Optimizer};
use crate::numeric::Tape;
use crate::plan::{TrajectorySet, TEMPORAL_POINTS, SPATIAL_POINTS};
use crate::policy::Policy;
use crate::refiner::{draw_noise, RefinerContext};
use crate::scene::Dataset;
use crate::understanding::Encoded;

/// Cached understanding outputs are kept in memory below this many scalars.
const PRECOMPUTE_BUDGET: usize = 32 << 20;

/// Per-sample inputs derived once from a dataset.
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    observations: Vec<Observation<f64>>,
    encoded: Option<Vec<Encoded<f64>>>,
}

impl<'a> TrainData<'a> {
    /// Builds observations and, when they fit the memory budget, the frozen understanding
    /// expert's caches for every sample.
    pub fn new(policy: &Policy, dataset: &'a Dataset) -> Result<Self> {
        let observations = dataset
            .samples
            .iter()
            .map(|s| Observation::new(&s.current_rgb, &s.current_bev, s.ego))
            .collect();
        let cfg = &policy.cfg;
        let rows = cfg.history_frames * cfg.rgb_tokens + cfg.prompt_len + cfg.reasoning_len;
        let per_sample = 2 * cfg.layers * rows * cfg.width;
        let encoded = if per_sample * dataset.samples.len() <= PRECOMPUTE_BUDGET {
            Some(
                dataset
                    .samples
                    .iter()
                    .map(|s| policy.encode_sample(s, 0, 0))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            dataset,
            observations,
            encoded,
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observation(&self, i: usize) -> &Observation<f64> {
        &self.observations[i]
    }

    pub fn encoded(&self, policy: &Policy, i: usize) -> Result<Cow<'_, Encoded<f64>>> {
        match &self.encoded {
            Some(e) => Ok(Cow::Borrowed(&e[i])),
            None => Ok(Cow::Owned(policy.encode_sample(&self.dataset.samples[i], 0, 0)?)),
        }
    }
}

/// Mean loss terms of one optimiser step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub decision: f64,
    pub temporal: f64,
    pub spatial: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,decision,temporal,spatial,total,lr,grad_norm";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.decision, self.temporal, self.spatial, self.total, self.lr, self.grad_norm
        )
    }
}

pub fn loss_curve_csv(records: &[LossRecord]) -> String {
    let mut out = String::from(LossRecord::CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Linear warm-up followed by cosine decay to a tenth of the peak.
pub fn learning_rate(peak: f64, warmup: usize, total: usize, step: usize) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let p = ((step - warmup) as f64 / span).min(1.0);
    peak * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Sample indices of one step; a pure function of `(seed, step)` so resumed runs draw the
/// same batches.
pub fn batch_indices(seed: u64, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0xd134_2543_de82_ef95));
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Action expert training state.
pub struct Trainer {
    pub policy: Policy,
    pub optimizer: Optimizer,
    pub step: usize,
    pub history: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(policy: Policy) -> Self {
        let cfg = &policy.cfg;
        let optimizer = Optimizer::new(cfg.optimizer, cfg.lr, cfg.momentum, policy.ae.store());
        Self {
            policy,
            optimizer,
            step: 0,
            history: Vec::new(),
        }
    }

    /// Continues from a checkpoint. Bit-exact when it holds 64-bit weights and optimiser state.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ck.restore()?);
        if let Some(s) = &ck.ae_optimizer {
            s.apply(&mut t.optimizer)?;
        }
        t.step = ck.step as usize;
        Ok(t)
    }

    pub fn checkpoint(&self, precision: Precision) -> Checkpoint {
        let mut ck = Checkpoint::capture(&self.policy, precision, self.step as u64, 0);
        ck.ae_optimizer = Some(OptimizerState::capture(&self.optimizer));
        ck
    }

    /// One optimiser step over a sampled batch.
    pub fn train_step(&mut self, data: &TrainData) -> Result<LossRecord> {
        if data.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let cfg = self.policy.cfg.clone();
        let idx = batch_indices(cfg.seed, self.step, data.len(), cfg.batch);
        let inv = 1.0 / idx.len() as f64;
        let mut rec = LossRecord {
            step: self.step,
            ..LossRecord::default()
        };
        let weights = cfg.loss_weights();
        self.policy.ae.store_mut().zero_grad();
        for &i in &idx {
            let sample = &data.dataset.samples[i];
            let enc = data.encoded(&self.policy, i)?;
            let mut tape = Tape::new();
            let out = self.policy.ae.forward(&mut tape, data.observation(i), &enc.cache)?;
            let (loss, terms) = joint_loss(&mut tape, &out, &sample.labels, &sample.trajectory, weights)?;
            if !terms.total.is_finite() {
                return Err(Error::NanLoss { step: self.step });
            }
            let loss = tape.scale(loss, inv)?;
            let grads = tape.backward(loss)?;
            self.policy.ae.store_mut().accumulate(&grads);
            rec.decision += terms.decision * inv;
            rec.temporal += terms.temporal * inv;
            rec.spatial += terms.spatial * inv;
            rec.total += terms.total * inv;
        }
        let store = self.policy.ae.store_mut();
        rec.grad_norm = clip_grad_norm(store, cfg.grad_clip);
        if !rec.grad_norm.is_finite() {
            return Err(Error::NanLoss { step: self.step });
        }
        rec.lr = learning_rate(cfg.lr, cfg.warmup, cfg.steps, self.step);
        self.optimizer.lr = rec.lr;
        self.optimizer.step(store);
        self.step += 1;
        self.history.push(rec);
        Ok(rec)
    }

    /// Runs until `until` steps have been taken in total.
    pub fn train(&mut self, data: &TrainData, until: usize, mut on_step: impl FnMut(&LossRecord)) -> Result<()> {
        while self.step < until {
            let rec = self.train_step(data)?;
            on_step(&rec);
        }
        Ok(())
    }
}

/// Frozen action-expert priors and refiner contexts for every sample.
pub struct RefinerData {
    pub priors: Vec<TrajectorySet>,
    pub contexts: Vec<RefinerContext<f64>>,
    pub targets: Vec<TrajectorySet>,
}

impl RefinerData {
    pub fn new(policy: &Policy, data: &TrainData) -> Result<Self> {
        let mut out = Self {
            priors: Vec::with_capacity(data.len()),
            contexts: Vec::with_capacity(data.len()),
            targets: Vec::with_capacity(data.len()),
        };
        for (i, sample) in data.dataset.samples.iter().enumerate() {
            let enc = data.encoded(policy, i)?;
            let obs = data.observation(i);
            let pred = policy.ae.predict(obs, &enc.cache)?;
            out.priors.push(pred.trajectory_set());
            out.contexts.push(RefinerContext {
                f_bev: obs.bev.clone(),
                h_de: pred.h_de,
                r_tokens: enc.reasoning.clone(),
                ego: sample.ego,
                ego_history: sample.ego_history,
            });
            out.targets.push(sample.trajectory.clone());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }
}

/// Refiner training state; the action expert is not touched.
pub struct RefinerTrainer {
    pub optimizer: Optimizer,
    pub step: usize,
    pub history: Vec<LossRecord>,
}

impl RefinerTrainer {
    pub fn new(policy: &Policy) -> Self {
        let cfg = &policy.cfg;
        Self {
            optimizer: Optimizer::new(cfg.optimizer, cfg.refiner_lr, cfg.momentum, policy.refiner.store()),
            step: 0,
            history: Vec::new(),
        }
    }

    /// One step: each sample draws a step `s` in `1..=t_trunc` and noise scaled to that step,
    /// and the refiner predicts the ground truth from the noised prior.
    pub fn train_step(&mut self, policy: &mut Policy, data: &RefinerData) -> Result<LossRecord> {
        if data.is_empty() {
            return Err(Error::Config("empty refiner training set".into()));
        }
        let cfg = policy.cfg.clone();
        let t_trunc = cfg.t_trunc.max(1);
        let idx = batch_indices(cfg.seed ^ 0x5eed_2ef1, self.step, data.len(), cfg.batch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (self.step as u64).wrapping_mul(0xa076_1d64_78bd_642f));
        let inv = 1.0 / idx.len() as f64;
        let mut rec = LossRecord {
            step: self.step,
            ..LossRecord::default()
        };
        policy.refiner.store_mut().zero_grad();
        for &i in &idx {
            let s = rng.random_range(1..=t_trunc);
            let eps = draw_noise(TEMPORAL_POINTS + SPATIAL_POINTS, cfg.sigma_lon, cfg.sigma_lat, &mut rng);
            let noisy = policy.refiner.noisy_input(&data.priors[i], &eps, s, t_trunc);
            let mut tape = Tape::new();
            let xs = tape.constant(noisy.to_tensor())?;
            let x0 = policy.refiner.denoise(&mut tape, xs, s, &data.contexts[i])?;
            let (lt, ls) = trajectory_loss_on_tape(&mut tape, x0, &data.targets[i].to_tensor())?;
            let lsw = tape.scale(ls, cfg.weight_spatial)?;
            let loss = tape.add(lt, lsw)?;
            let total = tape.value(loss).item();
            if !total.is_finite() {
                return Err(Error::NanLoss { step: self.step });
            }
            rec.temporal += tape.value(lt).item() * inv;
            rec.spatial += tape.value(ls).item() * inv;
            rec.total += total * inv;
            let loss = tape.scale(loss, inv)?;
            let grads = tape.backward(loss)?;
            policy.refiner.store_mut().accumulate(&grads);
        }
        let store = policy.refiner.store_mut();
        rec.grad_norm = clip_grad_norm(store, cfg.grad_clip);
        rec.lr = learning_rate(cfg.refiner_lr, cfg.warmup, cfg.refiner_steps, self.step);
        self.optimizer.lr = rec.lr;
        self.optimizer.step(store);
        self.step += 1;
        self.history.push(rec);
        Ok(rec)
    }

    pub fn train(&mut self, policy: &mut Policy, data: &RefinerData, until: usize, mut on_step: impl FnMut(&LossRecord)) -> Result<()> {
        while self.step < until {
            let rec = self.train_step(policy, data)?;
            on_step(&rec);
        }
        Ok(())
    }
}
