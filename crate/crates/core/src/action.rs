//! Action expert: observation tokens and learned action queries attend the cached
//! understanding keys and values jointly with their own, layer by layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv_cache::LayerKvCache;
use crate::masking::{build_mask, AttentionLayout, Segment, Task};
use crate::numeric::tape::log_softmax_at;
use crate::numeric::{LayerNorm, Linear, Mask, ParamId, ParamStore, Real, Tape, Tensor, TransformerLayer, Var, LAYERNORM_EPS};
use crate::plan::{
    admissible, MetaActionSequence, TrajectorySet, DECISION_TOKENS, SPATIAL_POINTS, TEMPORAL_POINTS, VOCAB,
};
use crate::understanding::{UnderstandingExpert, UnderstandingInput};

/// Learned queries: decision tokens, then timed waypoints, then route points.
pub const QUERIES: usize = DECISION_TOKENS + TEMPORAL_POINTS + SPATIAL_POINTS;

#[derive(Clone, Debug, PartialEq)]
pub struct AeConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub rgb_tokens: usize,
    pub bev_tokens: usize,
    /// Meters per unit of head output.
    pub traj_scale: f64,
    pub seed: u64,
}

/// Current-frame inputs of one fast tick.
#[derive(Clone, Debug)]
pub struct Observation<T: Real = f64> {
    pub rgb: Tensor<T>,
    pub bev: Tensor<T>,
    /// `(speed m/s, heading rad, accel m/s²)`.
    pub ego: [f64; 3],
}

impl<T: Real> Observation<T> {
    pub fn new(rgb: &Tensor<f32>, bev: &Tensor<f32>, ego: [f64; 3]) -> Self {
        Self {
            rgb: rgb.cast(),
            bev: bev.cast(),
            ego,
        }
    }
}

/// Normalised ego vector fed to the ego token.
pub fn ego_features(ego: [f64; 3]) -> [f64; 3] {
    let h = ego[1].sin().atan2(ego[1].cos());
    [ego[0] / 10.0, h / std::f64::consts::PI, ego[2] / 2.0]
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AeOutput {
    /// `J x V` decision logits.
    pub logits: Var,
    /// `(M + N) x 2` trajectory, timed waypoints first, meters.
    pub trajectory: Var,
    /// Final latents at the decision positions.
    pub h_de: Var,
    /// Final latents of every action-side token.
    pub hidden: Var,
}

/// Plain-value result of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AePrediction<T: Real = f64> {
    pub logits: Tensor<T>,
    pub trajectory: Tensor<T>,
    pub h_de: Tensor<T>,
}

impl<T: Real> AePrediction<T> {
    fn read(tape: &Tape<T>, out: &AeOutput) -> Self {
        Self {
            logits: tape.value(out.logits).clone(),
            trajectory: tape.value(out.trajectory).clone(),
            h_de: tape.value(out.h_de).clone(),
        }
    }

    pub fn decisions(&self) -> MetaActionSequence {
        decode_decisions(&self.logits)
    }

    pub fn trajectory_set(&self) -> TrajectorySet {
        TrajectorySet::from_tensor(&self.trajectory, TEMPORAL_POINTS).expect("M + N rows")
    }
}

#[derive(Clone, Debug)]
pub struct ActionExpert<T: Real = f64> {
    pub cfg: AeConfig,
    store: ParamStore<T>,
    rgb_type: ParamId,
    bev_type: ParamId,
    ego: Linear,
    queries: ParamId,
    layers: Vec<TransformerLayer>,
    final_ln: LayerNorm,
    decision_head: Linear,
    temporal_head: Linear,
    spatial_head: Linear,
}

impl ActionExpert<f64> {
    pub fn new(cfg: AeConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.width;
        let rgb_type = store.add_randn("ae.rgb_type", 1, d, 0.1, true, &mut rng);
        let bev_type = store.add_randn("ae.bev_type", 1, d, 0.1, true, &mut rng);
        let ego = Linear::new(&mut store, "ae.ego", 3, d, true, &mut rng);
        let queries = store.add_randn("ae.queries", QUERIES, d, 1.0, true, &mut rng);
        let layers = (0..cfg.layers)
            .map(|l| TransformerLayer::new(&mut store, &format!("ae.layer{l}"), d, cfg.ffn_width, true, &mut rng))
            .collect();
        let final_ln = LayerNorm::new(&mut store, "ae.final_ln", d, true);
        let decision_head = Linear::new(&mut store, "ae.decision_head", d, VOCAB, true, &mut rng);
        let temporal_head = Linear::new(&mut store, "ae.temporal_head", d, 2, true, &mut rng);
        let spatial_head = Linear::new(&mut store, "ae.spatial_head", d, 2, true, &mut rng);
        Self {
            cfg,
            store,
            rgb_type,
            bev_type,
            ego,
            queries,
            layers,
            final_ln,
            decision_head,
            temporal_head,
            spatial_head,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }
}

impl<T: Real> ActionExpert<T> {
    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn cast<U: Real>(&self) -> ActionExpert<U> {
        ActionExpert {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            rgb_type: self.rgb_type,
            bev_type: self.bev_type,
            ego: self.ego,
            queries: self.queries,
            layers: self.layers.clone(),
            final_ln: self.final_ln,
            decision_head: self.decision_head,
            temporal_head: self.temporal_head,
            spatial_head: self.spatial_head,
        }
    }

    pub fn obs_len(&self) -> usize {
        self.cfg.rgb_tokens + self.cfg.bev_tokens + 1
    }

    /// `[Obs | Decision | PlanTemporal | PlanSpatial]`.
    pub fn layout(&self) -> AttentionLayout {
        AttentionLayout::new(vec![
            Segment::bidirectional(Task::Obs, self.obs_len()),
            Segment::bidirectional(Task::Decision, DECISION_TOKENS),
            Segment::bidirectional(Task::PlanTemporal, TEMPORAL_POINTS),
            Segment::bidirectional(Task::PlanSpatial, SPATIAL_POINTS),
        ])
        .expect("action layout is rank-ordered")
    }

    /// Multiply-accumulates of one forward pass against `scene_len` cached tokens.
    pub fn macs(&self, scene_len: usize) -> u64 {
        let n = self.obs_len() + QUERIES;
        let d = self.cfg.width as u64;
        self.cfg.layers as u64 * TransformerLayer::macs(self.cfg.width, self.cfg.ffn_width, n, n + scene_len)
            + n as u64 * d * (VOCAB as u64 + 2)
    }

    fn embed(&self, tape: &mut Tape<T>, obs: &Observation<T>) -> Result<Var> {
        let d = self.cfg.width;
        for (t, rows, what) in [
            (&obs.rgb, self.cfg.rgb_tokens, "rgb tokens"),
            (&obs.bev, self.cfg.bev_tokens, "bev tokens"),
        ] {
            if t.shape() != (rows, d) {
                return Err(Error::Shape {
                    op: what,
                    lhs: t.shape(),
                    rhs: (rows, d),
                });
            }
        }
        let rgb = tape.constant(obs.rgb.clone())?;
        let rt = tape.param(&self.store, self.rgb_type)?;
        let rgb = tape.add_row(rgb, rt)?;
        let bev = tape.constant(obs.bev.clone())?;
        let bt = tape.param(&self.store, self.bev_type)?;
        let bev = tape.add_row(bev, bt)?;
        let e = ego_features(obs.ego).map(T::from_f64c);
        let e = tape.constant(Tensor::from_vec(1, 3, e.to_vec())?)?;
        let ego = self.ego.forward(tape, &self.store, e)?;
        let q = tape.param(&self.store, self.queries)?;
        tape.concat_rows(&[rgb, bev, ego, q])
    }

    fn check_cache(&self, cache: &LayerKvCache<T>) -> Result<()> {
        if cache.layer_count() != self.layers.len() || cache.width() != self.cfg.width {
            return Err(Error::IncompatibleCache(format!(
                "cache has {} layers of width {}, action expert has {} of width {}",
                cache.layer_count(),
                cache.width(),
                self.layers.len(),
                self.cfg.width
            )));
        }
        Ok(())
    }

    fn eps(&self) -> T {
        T::from_f64c(LAYERNORM_EPS)
    }

    fn scale(&self) -> T {
        T::from_f64c(1.0 / (self.cfg.width as f64).sqrt())
    }

    /// Rows of the joint mask that belong to action-side tokens.
    pub fn joint_mask(&self, cache_layout: &AttentionLayout) -> Result<Mask> {
        let joint = cache_layout.concat(&self.layout())?;
        let s = cache_layout.len();
        let n = joint.len();
        Ok(build_mask(&joint).block(s, n - s, 0, n))
    }

    fn read_heads(&self, tape: &mut Tape<T>, x: Var) -> Result<AeOutput> {
        let h = self.final_ln.forward(tape, &self.store, x, self.eps())?;
        let o = self.obs_len();
        let h_de = tape.slice_rows(h, o, DECISION_TOKENS)?;
        let logits = self.decision_head.forward(tape, &self.store, h_de)?;
        let ht = tape.slice_rows(h, o + DECISION_TOKENS, TEMPORAL_POINTS)?;
        let temporal = self.temporal_head.forward(tape, &self.store, ht)?;
        let hs = tape.slice_rows(h, o + DECISION_TOKENS + TEMPORAL_POINTS, SPATIAL_POINTS)?;
        let spatial = self.spatial_head.forward(tape, &self.store, hs)?;
        let traj = tape.concat_rows(&[temporal, spatial])?;
        let trajectory = tape.scale(traj, T::from_f64c(self.cfg.traj_scale))?;
        Ok(AeOutput {
            logits,
            trajectory,
            h_de,
            hidden: h,
        })
    }

    /// Joint attention over `[cache ∥ own]` keys and values in every layer.
    pub fn forward(&self, tape: &mut Tape<T>, obs: &Observation<T>, cache: &LayerKvCache<T>) -> Result<AeOutput> {
        self.check_cache(cache)?;
        let mask = self.joint_mask(cache.layout())?;
        let mut x = self.embed(tape, obs)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let (q, kv) = layer.project(tape, &self.store, x, self.eps())?;
            let cached = cache.layer(l);
            let ck = tape.constant(cached.keys.clone())?;
            let cv = tape.constant(cached.values.clone())?;
            let keys = tape.concat_rows(&[ck, kv.keys])?;
            let values = tape.concat_rows(&[cv, kv.values])?;
            x = layer.finish(tape, &self.store, x, q, keys, values, &mask, self.cfg.heads, self.scale(), self.eps())?;
        }
        self.read_heads(tape, x)
    }

    /// Self-attention only, with no understanding side at all.
    pub fn forward_standalone(&self, tape: &mut Tape<T>, obs: &Observation<T>) -> Result<AeOutput> {
        let mask = build_mask(&self.layout());
        let mut x = self.embed(tape, obs)?;
        for layer in &self.layers {
            let (q, kv) = layer.project(tape, &self.store, x, self.eps())?;
            x = layer.finish(tape, &self.store, x, q, kv.keys, kv.values, &mask, self.cfg.heads, self.scale(), self.eps())?;
        }
        self.read_heads(tape, x)
    }

    pub fn predict(&self, obs: &Observation<T>, cache: &LayerKvCache<T>) -> Result<AePrediction<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, obs, cache)?;
        Ok(AePrediction::read(&tape, &out))
    }
}

/// Runs both experts as one mixture-of-transformers pass: understanding rows use the
/// understanding weights, action rows the action weights, and every layer attends the
/// concatenated keys under the joint mask. Returns the action prediction and reasoning states.
pub fn forward_coupled<T: Real>(
    ue: &UnderstandingExpert<T>,
    ae: &ActionExpert<T>,
    input: &UnderstandingInput<T>,
    obs: &Observation<T>,
) -> Result<(AePrediction<T>, Tensor<T>)> {
    if ue.layers().len() != ae.layers.len() || ue.cfg.width != ae.cfg.width {
        return Err(Error::IncompatibleCache("experts differ in depth or width".into()));
    }
    let mut tape = Tape::new();
    let (mut xu, ue_layout) = ue.embed(&mut tape, input)?;
    let mut xa = ae.embed(&mut tape, obs)?;
    let joint = ue_layout.concat(&ae.layout())?;
    let full = build_mask(&joint);
    let (s, n) = (ue_layout.len(), joint.len());
    let mu = full.block(0, s, 0, n);
    let ma = full.block(s, n - s, 0, n);
    let (eps, scale) = (ae.eps(), ae.scale());
    for (lu, la) in ue.layers().iter().zip(&ae.layers) {
        let (qu, kvu) = lu.project(&mut tape, ue.store(), xu, eps)?;
        let (qa, kva) = la.project(&mut tape, &ae.store, xa, eps)?;
        let keys = tape.concat_rows(&[kvu.keys, kva.keys])?;
        let values = tape.concat_rows(&[kvu.values, kva.values])?;
        xu = lu.finish(&mut tape, ue.store(), xu, qu, keys, values, &mu, ue.cfg.heads, scale, eps)?;
        xa = la.finish(&mut tape, &ae.store, xa, qa, keys, values, &ma, ae.cfg.heads, scale, eps)?;
    }
    let out = ae.read_heads(&mut tape, xa)?;
    let hu = ue.final_norm(&mut tape, xu)?;
    let r = ue.cfg.reasoning_len;
    let reasoning = tape.value(hu).slice_rows(s - r, r)?;
    Ok((AePrediction::read(&tape, &out), reasoning))
}

/// Token-wise negative log-likelihood, each position normalised over all symbols.
pub fn decision_loss<T: Real>(logits: &Tensor<T>, target: &MetaActionSequence) -> Result<f64> {
    decision_loss_tokens(logits, &target.tokens())
}

pub fn decision_loss_tokens<T: Real>(logits: &Tensor<T>, tokens: &[usize]) -> Result<f64> {
    if logits.rows() != tokens.len() {
        return Err(Error::Shape {
            op: "decision_loss",
            lhs: logits.shape(),
            rhs: (tokens.len(), VOCAB),
        });
    }
    let mut total = 0.0;
    for (position, &token) in tokens.iter().enumerate() {
        if token >= logits.cols() {
            return Err(Error::VocabularyRange { position, token });
        }
        total -= log_softmax_at(logits.row(position), token).to_f64c();
    }
    Ok(total)
}

/// `(L_temp, L_spatial, L_temp + lambda·L_spatial)` with per-point L1 distances averaged.
pub fn trajectory_loss(pred: &TrajectorySet, gt: &TrajectorySet, lambda: f64) -> Result<(f64, f64, f64)> {
    if pred.temporal.len() != gt.temporal.len() || pred.spatial.len() != gt.spatial.len() {
        return Err(Error::Shape {
            op: "trajectory_loss",
            lhs: (pred.temporal.len(), pred.spatial.len()),
            rhs: (gt.temporal.len(), gt.spatial.len()),
        });
    }
    let l1 = |a: &[[f64; 2]], b: &[[f64; 2]]| {
        a.iter()
            .zip(b)
            .map(|(p, q)| (p[0] - q[0]).abs() + (p[1] - q[1]).abs())
            .sum::<f64>()
            / a.len().max(1) as f64
    };
    let lt = l1(&pred.temporal, &gt.temporal);
    let ls = l1(&pred.spatial, &gt.spatial);
    Ok((lt, ls, lt + lambda * ls))
}

/// Argmax over each position's admissible symbols; ties go to the lowest index.
pub fn decode_decisions<T: Real>(logits: &Tensor<T>) -> MetaActionSequence {
    let mut tokens = [0usize; DECISION_TOKENS];
    for (p, tok) in tokens.iter_mut().enumerate() {
        let row = logits.row(p);
        let range = admissible(p);
        let mut best = range.start;
        for j in range {
            if row[j] > row[best] {
                best = j;
            }
        }
        *tok = best;
    }
    MetaActionSequence::from_tokens(&tokens).expect("admissible tokens")
}

/// Loss weights of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub decision: f64,
    pub spatial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            decision: 1.0,
            spatial: 0.5,
        }
    }
}

/// Per-term values of one sample's loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub decision: f64,
    pub temporal: f64,
    pub spatial: f64,
    pub total: f64,
}

/// L1 trajectory terms on the tape: `(L_temp, L_spatial)` for a `(M + N) x 2` prediction.
pub fn trajectory_loss_on_tape<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &Tensor<T>) -> Result<(Var, Var)> {
    let g = tape.constant(gt.clone())?;
    let diff = tape.sub(pred, g)?;
    let abs = tape.abs(diff)?;
    let t = tape.slice_rows(abs, 0, TEMPORAL_POINTS)?;
    let t = tape.sum(t)?;
    let lt = tape.scale(t, T::from_f64c(1.0 / TEMPORAL_POINTS as f64))?;
    let s = tape.slice_rows(abs, TEMPORAL_POINTS, SPATIAL_POINTS)?;
    let s = tape.sum(s)?;
    let ls = tape.scale(s, T::from_f64c(1.0 / SPATIAL_POINTS as f64))?;
    Ok((lt, ls))
}

/// Joint decision plus trajectory loss of one forward pass.
pub fn joint_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &AeOutput,
    labels: &MetaActionSequence,
    gt: &TrajectorySet,
    w: LossWeights,
) -> Result<(Var, LossTerms)> {
    let nll = tape.nll(out.logits, &labels.tokens())?;
    let (lt, ls) = trajectory_loss_on_tape(tape, out.trajectory, &gt.to_tensor())?;
    let a = tape.scale(nll, T::from_f64c(w.decision))?;
    let b = tape.scale(ls, T::from_f64c(w.spatial))?;
    let traj = tape.add(lt, b)?;
    let total = tape.add(a, traj)?;
    let terms = LossTerms {
        decision: tape.value(nll).item().to_f64c(),
        temporal: tape.value(lt).item().to_f64c(),
        spatial: tape.value(ls).item().to_f64c(),
        total: tape.value(total).item().to_f64c(),
    };
    Ok((total, terms))
}
