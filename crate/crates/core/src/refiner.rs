//! Diffusion refiner: truncated reverse denoising of perturbed action-expert trajectories
//! through mixture-of-attention blocks with adaptive layer norm conditioning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::action::ego_features;
use crate::error::{Error, Result};
use crate::numeric::{LayerNorm, Linear, Mask, ParamId, ParamStore, Real, Tape, Tensor, Var, LAYERNORM_EPS};
use crate::plan::{TrajectorySet, SPATIAL_POINTS, TEMPORAL_POINTS};

const POINTS: usize = TEMPORAL_POINTS + SPATIAL_POINTS;
const STEP_FEATURES: usize = 16;
const COND_FEATURES: usize = STEP_FEATURES + 3 + 12;

#[derive(Clone, Debug, PartialEq)]
pub struct RefinerConfig {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_width: usize,
    pub diffusion_steps: usize,
    pub t_trunc: usize,
    pub sigma_lon: f64,
    pub sigma_lat: f64,
    pub gamma_init: f64,
    pub traj_scale: f64,
    pub seed: u64,
}

/// Cosine noise schedule; index 0 is the clean end.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    alpha_bar: Vec<f64>,
}

impl Schedule {
    pub fn cosine(steps: usize) -> Self {
        let f = |s: usize| {
            let x = (s as f64 / steps as f64 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0);
        Self {
            alpha_bar: (0..=steps).map(|s| (f(s) / f0).clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn alpha_bar(&self, s: usize) -> f64 {
        self.alpha_bar[s]
    }

    /// Noise scale `sqrt(1 - alpha_bar)`; zero at step 0.
    pub fn rho(&self, s: usize) -> f64 {
        (1.0 - self.alpha_bar[s]).max(0.0).sqrt()
    }
}

/// `(1 + eps) ⊙ tau` with the given per-point noise.
pub fn perturb_with(prior: &TrajectorySet, eps: &[[f64; 2]]) -> TrajectorySet {
    let mut it = eps.iter();
    let mut apply = |p: &[f64; 2]| {
        let e = it.next().copied().unwrap_or([0.0; 2]);
        [(1.0 + e[0]) * p[0], (1.0 + e[1]) * p[1]]
    };
    TrajectorySet {
        temporal: prior.temporal.iter().map(&mut apply).collect(),
        spatial: prior.spatial.iter().map(&mut apply).collect(),
    }
}

/// Per-point multiplicative noise: longitudinal (x) with `sigma_lon`, lateral (y) with
/// `sigma_lat`.
pub fn draw_noise(n: usize, sigma_lon: f64, sigma_lat: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|_| [sigma_lon * std.sample(rng), sigma_lat * std.sample(rng)])
        .collect()
}

/// Seeded multiplicative perturbation of a trajectory prior.
pub fn perturb(prior: &TrajectorySet, sigma_lon: f64, sigma_lat: f64, seed: u64) -> TrajectorySet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = prior.temporal.len() + prior.spatial.len();
    perturb_with(prior, &draw_noise(n, sigma_lon, sigma_lat, &mut rng))
}

/// Conditioning and fusion sources for one refinement.
#[derive(Clone, Debug)]
pub struct RefinerContext<T: Real = f64> {
    pub f_bev: Tensor<T>,
    pub h_de: Tensor<T>,
    pub r_tokens: Tensor<T>,
    pub ego: [f64; 3],
    pub ego_history: [[f64; 3]; 4],
}

#[derive(Clone, Debug)]
struct MoaBlock {
    modulation: Linear,
    query: Linear,
    key_self: Linear,
    value_self: Linear,
    key_bev: Linear,
    value_bev: Linear,
    key_de: Linear,
    value_de: Linear,
    out: Linear,
    gamma: ParamId,
    beta_bev: ParamId,
    beta_reason: ParamId,
    pool_query: ParamId,
    pool_key: Linear,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Clone, Debug)]
pub struct DiffusionRefiner<T: Real = f64> {
    pub cfg: RefinerConfig,
    pub schedule: Schedule,
    store: ParamStore<T>,
    point_embed: Linear,
    point_pos: ParamId,
    cond: Linear,
    blocks: Vec<MoaBlock>,
    final_ln: LayerNorm,
    head: Linear,
}

impl DiffusionRefiner<f64> {
    pub fn new(cfg: RefinerConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.width;
        let point_embed = Linear::new(&mut store, "ref.point_embed", 2, d, true, &mut rng);
        let point_pos = store.add_randn("ref.point_pos", POINTS, d, 1.0, true, &mut rng);
        let cond = Linear::new(&mut store, "ref.cond", COND_FEATURES, d, true, &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|b| {
                let n = |s: &str| format!("ref.block{b}.{s}");
                let mut lin = |s: &str, i: usize, o: usize| Linear::new(&mut store, &n(s), i, o, true, &mut rng);
                let query = lin("query", d, d);
                let key_self = lin("key_self", d, d);
                let value_self = lin("value_self", d, d);
                let key_bev = lin("key_bev", d, d);
                let value_bev = lin("value_bev", d, d);
                let key_de = lin("key_de", d, d);
                let value_de = lin("value_de", d, d);
                let out = lin("out", d, d);
                let pool_key = lin("pool_key", d, d);
                let ffn_in = lin("ffn_in", d, cfg.ffn_width);
                let ffn_out = lin("ffn_out", cfg.ffn_width, d);
                MoaBlock {
                    modulation: Linear::with_std(&mut store, &n("modulation"), d, 6 * d, 0.0, true, &mut rng),
                    query,
                    key_self,
                    value_self,
                    key_bev,
                    value_bev,
                    key_de,
                    value_de,
                    out,
                    gamma: store.add(n("gamma"), Tensor::scalar(cfg.gamma_init), true),
                    beta_bev: store.add(n("beta_bev"), Tensor::scalar(0.0), true),
                    beta_reason: store.add(n("beta_reason"), Tensor::scalar(0.0), true),
                    pool_query: store.add_randn(n("pool_query"), 1, d, 1.0, true, &mut rng),
                    pool_key,
                    ffn_in,
                    ffn_out,
                }
            })
            .collect();
        let final_ln = LayerNorm::new(&mut store, "ref.final_ln", d, true);
        let head = Linear::with_std(&mut store, "ref.head", d, 2, 0.0, true, &mut rng);
        Self {
            schedule: Schedule::cosine(cfg.diffusion_steps),
            cfg,
            store,
            point_embed,
            point_pos,
            cond,
            blocks,
            final_ln,
            head,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }
}

/// Sinusoidal embedding of a diffusion step.
fn step_features(step: usize) -> [f64; STEP_FEATURES] {
    let mut out = [0.0; STEP_FEATURES];
    let half = STEP_FEATURES / 2;
    for k in 0..half {
        let w = (-(1000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (step as f64 * w).sin();
        out[half + k] = (step as f64 * w).cos();
    }
    out
}

/// Raw condition vector: step embedding, ego state and the last four ego states.
pub fn condition_features(step: usize, ego: [f64; 3], history: &[[f64; 3]; 4]) -> Vec<f64> {
    let mut c = Vec::with_capacity(COND_FEATURES);
    c.extend(step_features(step));
    c.extend(ego_features(ego));
    for h in history {
        let dh = h[1] - ego[1];
        c.extend([h[0] / 10.0, dh.sin().atan2(dh.cos()), h[2] / 2.0]);
    }
    c
}

impl<T: Real> DiffusionRefiner<T> {
    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn cast<U: Real>(&self) -> DiffusionRefiner<U> {
        DiffusionRefiner {
            cfg: self.cfg.clone(),
            schedule: self.schedule.clone(),
            store: self.store.cast(),
            point_embed: self.point_embed,
            point_pos: self.point_pos,
            cond: self.cond,
            blocks: self.blocks.clone(),
            final_ln: self.final_ln,
            head: self.head,
        }
    }

    /// Names of the parameters of block `b`.
    pub fn block_parameter_names(&self, b: usize) -> Vec<String> {
        let prefix = format!("ref.block{b}.");
        self.store
            .iter()
            .filter(|p| p.name.starts_with(&prefix))
            .map(|p| p.name.clone())
            .collect()
    }

    fn c(&self, v: f64) -> T {
        T::from_f64c(v)
    }

    /// Conditioning embedding `SiLU(W c + b)` for `step`.
    pub fn condition(&self, tape: &mut Tape<T>, step: usize, ctx: &RefinerContext<T>) -> Result<Var> {
        let raw: Vec<T> = condition_features(step, ctx.ego, &ctx.ego_history)
            .into_iter()
            .map(T::from_f64c)
            .collect();
        let raw = tape.constant(Tensor::from_vec(1, COND_FEATURES, raw)?)?;
        let c = self.cond.forward(tape, &self.store, raw)?;
        tape.silu(c)
    }

    /// Embeds `(M + N) x 2` trajectory points as query tokens.
    pub fn embed_points(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let scaled = tape.scale(x, self.c(1.0 / self.cfg.traj_scale))?;
        let e = self.point_embed.forward(tape, &self.store, scaled)?;
        let pos = tape.param(&self.store, self.point_pos)?;
        tape.add(e, pos)
    }

    /// One mixture-of-attention block. `alpha_override` replaces both residual gates.
    #[allow(clippy::too_many_arguments)]
    pub fn moa_block(
        &self,
        tape: &mut Tape<T>,
        block: usize,
        x: Var,
        f_bev: Var,
        h_de: Var,
        r_tokens: Var,
        c: Var,
        alpha_override: Option<f64>,
    ) -> Result<Var> {
        let b = &self.blocks[block];
        let s = &self.store;
        let d = self.cfg.width;
        for (v, what) in [(x, "moa input"), (f_bev, "bev features"), (h_de, "decision latents"), (r_tokens, "reasoning tokens")] {
            if tape.shape(v).1 != d {
                return Err(Error::Shape {
                    op: what,
                    lhs: tape.shape(v),
                    rhs: (tape.shape(v).0, d),
                });
            }
        }
        let m = b.modulation.forward(tape, s, c)?;
        let chunk = |tape: &mut Tape<T>, i: usize| tape.slice_cols(m, i * d, d);
        let (shift1, scale1, alpha1) = (chunk(tape, 0)?, chunk(tape, 1)?, chunk(tape, 2)?);
        let (shift2, scale2, alpha2) = (chunk(tape, 3)?, chunk(tape, 4)?, chunk(tape, 5)?);
        let eps = self.c(LAYERNORM_EPS);

        let h = tape.normalize(x, eps)?;
        let sc = tape.add_const(scale1, T::one())?;
        let h = tape.mul_row(h, sc)?;
        let h = tape.add_row(h, shift1)?;

        let g = tape.param(s, b.gamma)?;
        let g = tape.tanh(g)?;
        let q = b.query.forward(tape, s, h)?;
        let ks = b.key_self.forward(tape, s, h)?;
        let vs = b.value_self.forward(tape, s, h)?;
        let kb = b.key_bev.forward(tape, s, f_bev)?;
        let vb = b.value_bev.forward(tape, s, f_bev)?;
        let kd = b.key_de.forward(tape, s, h_de)?;
        let vd = b.value_de.forward(tape, s, h_de)?;
        let vd = tape.scale_by(vd, g)?;

        let heads = self.cfg.heads;
        let hd = d / heads;
        let scale = self.c(1.0 / (d as f64).sqrt());
        let n = tape.shape(x).0;
        let keys = tape.shape(ks).0 + tape.shape(kb).0 + tape.shape(kd).0;
        let mask = Mask::new(n, keys, true);
        let mut outs = Vec::with_capacity(heads);
        for hh in 0..heads {
            let cols = |tape: &mut Tape<T>, v: Var| tape.slice_cols(v, hh * hd, hd);
            let qh = cols(tape, q)?;
            let (ksh, kbh, kdh) = (cols(tape, ks)?, cols(tape, kb)?, cols(tape, kd)?);
            let (vsh, vbh, vdh) = (cols(tape, vs)?, cols(tape, vb)?, cols(tape, vd)?);
            let s_self = tape.matmul_nt(qh, ksh)?;
            let s_bev = tape.matmul_nt(qh, kbh)?;
            let s_de = tape.matmul_nt(qh, kdh)?;
            let s_de = tape.scale_by(s_de, g)?;
            let scores = tape.concat_cols(&[s_self, s_bev, s_de])?;
            let scores = tape.scale(scores, scale)?;
            let p = tape.masked_softmax(scores, &mask)?;
            let v = tape.concat_rows(&[vsh, vbh, vdh])?;
            outs.push(tape.matmul(p, v)?);
        }
        let o = tape.concat_cols(&outs)?;
        let o_main = b.out.forward(tape, s, o)?;

        let bb = tape.param(s, b.beta_bev)?;
        let bb = tape.sigmoid(bb)?;
        let r_bev = tape.mean_rows(f_bev)?;
        let r_bev = tape.scale_by(r_bev, bb)?;
        let r_bev = tape.repeat_rows(r_bev, n)?;

        let br = tape.param(s, b.beta_reason)?;
        let br = tape.sigmoid(br)?;
        let pooled = if tape.shape(r_tokens).0 == 0 {
            tape.constant(Tensor::zeros(1, d))?
        } else {
            let pq = tape.param(s, b.pool_query)?;
            let pk = b.pool_key.forward(tape, s, r_tokens)?;
            let ps = tape.matmul_nt(pq, pk)?;
            let ps = tape.scale(ps, scale)?;
            let pm = Mask::new(1, tape.shape(r_tokens).0, true);
            let pp = tape.masked_softmax(ps, &pm)?;
            tape.matmul(pp, r_tokens)?
        };
        let r_reason = tape.scale_by(pooled, br)?;
        let r_reason = tape.repeat_rows(r_reason, n)?;

        let fused = tape.add(o_main, r_bev)?;
        let fused = tape.add(fused, r_reason)?;
        let (a1, a2) = match alpha_override {
            Some(a) => {
                let z = tape.constant(Tensor::filled(1, d, self.c(a)))?;
                (z, z)
            }
            None => (alpha1, alpha2),
        };
        let gated = tape.mul_row(fused, a1)?;
        let x1 = tape.add(x, gated)?;

        let h2 = tape.normalize(x1, eps)?;
        let sc2 = tape.add_const(scale2, T::one())?;
        let h2 = tape.mul_row(h2, sc2)?;
        let h2 = tape.add_row(h2, shift2)?;
        let f = b.ffn_in.forward(tape, s, h2)?;
        let f = tape.silu(f)?;
        let f = b.ffn_out.forward(tape, s, f)?;
        let f = tape.mul_row(f, a2)?;
        tape.add(x1, f)
    }

    /// Clean-trajectory estimate from the noisy points `x_s` at step `step`.
    pub fn denoise(&self, tape: &mut Tape<T>, x_s: Var, step: usize, ctx: &RefinerContext<T>) -> Result<Var> {
        if step > self.schedule.len() {
            return Err(Error::ScheduleRange {
                step,
                len: self.schedule.len(),
            });
        }
        let c = self.condition(tape, step, ctx)?;
        let f_bev = tape.constant(ctx.f_bev.clone())?;
        let h_de = tape.constant(ctx.h_de.clone())?;
        let r = tape.constant(ctx.r_tokens.clone())?;
        let mut x = self.embed_points(tape, x_s)?;
        for b in 0..self.blocks.len() {
            x = self.moa_block(tape, b, x, f_bev, h_de, r, c, None)?;
        }
        let h = self.final_ln.forward(tape, &self.store, x, self.c(LAYERNORM_EPS))?;
        let delta = self.head.forward(tape, &self.store, h)?;
        let delta = tape.scale(delta, self.c(self.cfg.traj_scale))?;
        tape.add(x_s, delta)
    }

    /// Perturbs `prior` with the configured sigmas and runs `t_trunc` deterministic reverse
    /// steps, each predicting the clean trajectory and re-noising toward the next step.
    pub fn refine(&self, prior: &TrajectorySet, ctx: &RefinerContext<T>, t_trunc: usize, seed: u64) -> Result<TrajectorySet> {
        if t_trunc > self.schedule.len() {
            return Err(Error::ScheduleRange {
                step: t_trunc,
                len: self.schedule.len(),
            });
        }
        let start = perturb(prior, self.cfg.sigma_lon, self.cfg.sigma_lat, seed);
        let mut x: Tensor<T> = start.to_tensor();
        for s in (1..=t_trunc).rev() {
            let mut tape = Tape::new();
            let xs = tape.constant(x.clone())?;
            let x0 = self.denoise(&mut tape, xs, s, ctx)?;
            let x0 = tape.value(x0).clone();
            let ratio = self.c(self.schedule.rho(s - 1) / self.schedule.rho(s));
            x = x0.add(&x.sub(&x0)?.scale(ratio))?;
        }
        TrajectorySet::from_tensor(&x, TEMPORAL_POINTS)
    }

    /// Training input at step `s`: the prior with noise scaled by `rho_s / rho_T`.
    pub fn noisy_input(&self, prior: &TrajectorySet, eps: &[[f64; 2]], s: usize, t_trunc: usize) -> TrajectorySet {
        let k = self.schedule.rho(s) / self.schedule.rho(t_trunc.max(1));
        let scaled: Vec<[f64; 2]> = eps.iter().map(|e| [e[0] * k, e[1] * k]).collect();
        perturb_with(prior, &scaled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny() -> DiffusionRefiner<f64> {
        DiffusionRefiner::new(RefinerConfig {
            width: 8,
            heads: 2,
            blocks: 2,
            ffn_width: 16,
            diffusion_steps: 50,
            t_trunc: 8,
            sigma_lon: 0.5,
            sigma_lat: 0.2,
            gamma_init: 0.5,
            traj_scale: 10.0,
            seed: 3,
        })
    }

    fn ctx(seed: u64) -> RefinerContext<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |r: usize| Tensor::from_fn(r, 8, |_, _| rng.random_range(-1.0..1.0));
        RefinerContext {
            f_bev: t(4),
            h_de: t(6),
            r_tokens: t(3),
            ego: [8.0, 0.3, -0.5],
            ego_history: [[7.0, 0.2, 0.0], [7.5, 0.25, 0.1], [7.8, 0.28, 0.0], [8.0, 0.3, -0.5]],
        }
    }

    fn prior() -> TrajectorySet {
        let mut p = TrajectorySet::zeros();
        for (i, q) in p.temporal.iter_mut().enumerate() {
            *q = [4.0 * (i + 1) as f64, 0.1 * i as f64];
        }
        for (i, q) in p.spatial.iter_mut().enumerate() {
            *q = [(i + 1) as f64, 0.05 * i as f64];
        }
        p
    }

    fn randomize(r: &mut DiffusionRefiner<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in r.store_mut().iter_mut() {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::cosine(50);
        assert_eq!(s.len(), 50);
        assert_eq!(s.rho(0), 0.0);
        assert!(s.rho(50) > 0.99);
        for i in 1..=50 {
            assert!(s.rho(i) > s.rho(i - 1));
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let p = prior();
        assert_eq!(perturb(&p, 0.0, 0.0, 99), p);
    }

    #[test]
    fn injected_noise_arithmetic() {
        let p = TrajectorySet {
            temporal: vec![[2.0, 4.0]],
            spatial: vec![],
        };
        let out = perturb_with(&p, &[[0.5, -0.25]]);
        assert_eq!(out.temporal[0], [3.0, 3.0]);
    }

    #[test]
    fn no_op_refinement_returns_prior() {
        let mut r = tiny();
        r.cfg.sigma_lon = 0.0;
        r.cfg.sigma_lat = 0.0;
        assert_eq!(r.refine(&prior(), &ctx(1), 0, 7).unwrap(), prior());
    }

    #[test]
    fn seeded_refinement_is_repeatable() {
        let mut r = tiny();
        randomize(&mut r, 2);
        let a = r.refine(&prior(), &ctx(1), 8, 7).unwrap();
        let b = r.refine(&prior(), &ctx(1), 8, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_outside_schedule() {
        let r = tiny();
        assert!(matches!(r.refine(&prior(), &ctx(1), 51, 0), Err(Error::ScheduleRange { .. })));
    }

    fn block_out(r: &DiffusionRefiner<f64>, c: &RefinerContext<f64>, alpha: Option<f64>) -> (Tensor<f64>, Tensor<f64>) {
        let mut tape = Tape::new();
        let xs = tape.constant(prior().to_tensor()).unwrap();
        let x = r.embed_points(&mut tape, xs).unwrap();
        let cond = r.condition(&mut tape, 4, c).unwrap();
        let fb = tape.constant(c.f_bev.clone()).unwrap();
        let hd = tape.constant(c.h_de.clone()).unwrap();
        let rt = tape.constant(c.r_tokens.clone()).unwrap();
        let y = r.moa_block(&mut tape, 0, x, fb, hd, rt, cond, alpha).unwrap();
        (tape.value(x).clone(), tape.value(y).clone())
    }

    #[test]
    fn closed_gate_ignores_decisions() {
        let mut r = tiny();
        randomize(&mut r, 5);
        for b in 0..2 {
            let id = r.store().find(&format!("ref.block{b}.gamma")).unwrap();
            r.store_mut().get_mut(id).value = Tensor::scalar(0.0);
        }
        let c1 = ctx(1);
        let mut c2 = c1.clone();
        c2.h_de = c2.h_de.map(|v| v * -40.0 + 3.0);
        assert_eq!(block_out(&r, &c1, None).1, block_out(&r, &c2, None).1);
        assert_eq!(r.refine(&prior(), &c1, 8, 3).unwrap(), r.refine(&prior(), &c2, 8, 3).unwrap());
    }

    #[test]
    fn open_gate_reads_decisions() {
        let mut r = tiny();
        randomize(&mut r, 5);
        let c1 = ctx(1);
        let mut c2 = c1.clone();
        c2.h_de = c2.h_de.map(|v| v * -4.0 + 0.3);
        assert_ne!(block_out(&r, &c1, None).1, block_out(&r, &c2, None).1);
    }

    #[test]
    fn zero_alpha_is_residual_identity() {
        let mut r = tiny();
        randomize(&mut r, 6);
        let (x, y) = block_out(&r, &ctx(2), Some(0.0));
        assert_eq!(x, y);
    }

    #[test]
    fn bypass_gates_start_at_half() {
        let r = tiny();
        for b in 0..2 {
            for n in ["beta_bev", "beta_reason"] {
                let id = r.store().find(&format!("ref.block{b}.{n}")).unwrap();
                let beta = r.store().value(id).item();
                assert_eq!(crate::numeric::tape::sigmoid(beta), 0.5);
            }
        }
    }

    #[test]
    fn multiplicative_noise_mean_is_one() {
        let p = TrajectorySet {
            temporal: vec![[3.0, -2.0]],
            spatial: vec![],
        };
        let n = 100_000;
        let (mut sx, mut sy, mut qx, mut qy) = (0.0, 0.0, 0.0, 0.0);
        for seed in 0..n {
            let q = perturb(&p, 0.5, 0.2, seed);
            let (rx, ry) = (q.temporal[0][0] / 3.0, q.temporal[0][1] / -2.0);
            sx += rx;
            sy += ry;
            qx += rx * rx;
            qy += ry * ry;
        }
        let nf = n as f64;
        for (s, q) in [(sx, qx), (sy, qy)] {
            let mean = s / nf;
            let se = ((q / nf - mean * mean) / nf).sqrt();
            assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean} se {se}");
        }
    }
}
