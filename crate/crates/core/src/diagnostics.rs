//! Gradient checks of the action expert and the refiner's attention blocks on random instances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::action::{joint_loss, trajectory_loss_on_tape, ActionExpert, Observation};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numeric::gradcheck::{finite_difference_check, GradCheckConfig, GradCheckReport};
use crate::numeric::{Gradients, ParamStore, Tape};
use crate::plan::{SPATIAL_POINTS, TEMPORAL_POINTS};
use crate::policy::Policy;
use crate::refiner::{draw_noise, DiffusionRefiner, RefinerContext};
use crate::scene::{build_dataset, Sample};

/// Scale of the Gaussian jitter added to every weight so zero-initialised paths carry gradient.
const JITTER: f64 = 0.05;

fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, JITTER).expect("finite sigma");
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += normal.sample(rng);
        }
    }
}

/// A policy with instance-specific seeds and jittered weights, plus one sample to score it on.
fn instance(cfg: &RunConfig, instance: u64) -> Result<(Policy, Sample)> {
    let mut cfg = cfg.clone();
    cfg.ae_seed = cfg.ae_seed.wrapping_add(instance.wrapping_mul(7919));
    cfg.refiner_seed = cfg.refiner_seed.wrapping_add(instance.wrapping_mul(104_729));
    let mut policy = Policy::new(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(instance ^ 0x67ad_c4ec);
    jitter(policy.ae.store_mut(), &mut rng);
    jitter(policy.refiner.store_mut(), &mut rng);
    let data = build_dataset(1, 0.5, instance, &cfg.dataset_header(), &cfg.synth_config())?;
    let n = data.samples.len();
    if n == 0 {
        return Err(Error::Config("gradcheck scenario produced no samples".into()));
    }
    let pick = (instance as usize).wrapping_mul(31) % n;
    let sample = data.samples.into_iter().nth(pick).expect("index in range");
    Ok((policy, sample))
}

/// Checks every trainable action-expert parameter through the joint decision and trajectory loss.
pub fn check_action_expert(cfg: &RunConfig, instance_seed: u64, check: &GradCheckConfig) -> Result<GradCheckReport> {
    let (mut policy, sample) = instance(cfg, instance_seed)?;
    let enc = policy.encode_sample(&sample, 0, 0)?;
    let obs = Observation::new(&sample.current_rgb, &sample.current_bev, sample.ego);
    let weights = cfg.loss_weights();
    let loss = |ae: &ActionExpert| -> Result<(f64, Gradients<f64>)> {
        let mut tape = Tape::new();
        let out = ae.forward(&mut tape, &obs, &enc.cache)?;
        let (loss, terms) = joint_loss(&mut tape, &out, &sample.labels, &sample.trajectory, weights)?;
        Ok((terms.total, tape.backward(loss)?))
    };
    let (_, grads) = loss(&policy.ae)?;
    finite_difference_check(&mut policy.ae, |m| m.store_mut(), &grads, check, |m| Ok(loss(m)?.0))
}

/// Checks the parameters of refiner block `block` through the L1 denoising loss.
pub fn check_moa_block(cfg: &RunConfig, instance_seed: u64, block: usize, check: &GradCheckConfig) -> Result<GradCheckReport> {
    let (mut policy, sample) = instance(cfg, instance_seed)?;
    if block >= cfg.refiner_blocks {
        return Err(Error::Config(format!("refiner has {} blocks, asked for block {block}", cfg.refiner_blocks)));
    }
    let enc = policy.encode_sample(&sample, 0, 0)?;
    let obs = Observation::new(&sample.current_rgb, &sample.current_bev, sample.ego);
    let pred = policy.ae.predict(&obs, &enc.cache)?;
    let ctx = RefinerContext {
        f_bev: obs.bev.clone(),
        h_de: pred.h_de.clone(),
        r_tokens: enc.reasoning.clone(),
        ego: sample.ego,
        ego_history: sample.ego_history,
    };
    let t_trunc = cfg.t_trunc.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed ^ 0xb10c);
    let eps = draw_noise(TEMPORAL_POINTS + SPATIAL_POINTS, cfg.sigma_lon, cfg.sigma_lat, &mut rng);
    let noisy = policy.refiner.noisy_input(&pred.trajectory_set(), &eps, t_trunc, t_trunc).to_tensor();
    let target = sample.trajectory.to_tensor();
    let names = policy.refiner.block_parameter_names(block);
    for p in policy.refiner.store_mut().iter_mut() {
        p.trainable = names.contains(&p.name);
    }
    let w_s = cfg.weight_spatial;
    let loss = |r: &DiffusionRefiner| -> Result<(f64, Gradients<f64>)> {
        let mut tape = Tape::new();
        let xs = tape.constant(noisy.clone())?;
        let x0 = r.denoise(&mut tape, xs, t_trunc, &ctx)?;
        let (lt, ls) = trajectory_loss_on_tape(&mut tape, x0, &target)?;
        let ls = tape.scale(ls, w_s)?;
        let total = tape.add(lt, ls)?;
        Ok((tape.value(total).item(), tape.backward(total)?))
    };
    let (_, grads) = loss(&policy.refiner)?;
    finite_difference_check(&mut policy.refiner, |m| m.store_mut(), &grads, check, |m| Ok(loss(m)?.0))
}
