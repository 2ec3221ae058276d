//! Line-oriented `key = value` run configuration covering every tunable default.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::action::{AeConfig, LossWeights};
use crate::error::{Error, Result};
use crate::numeric::optim::OptimizerKind;
use crate::numeric::param::hex;
use crate::refiner::RefinerConfig;
use crate::scene::{DatasetHeader, SynthConfig};
use crate::understanding::UeConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClockMode {
    /// Understanding recomputed inline on every tick.
    Coupled,
    /// Understanding refreshed every `ue_period` ticks through the cache.
    Decoupled,
}

impl FromStr for ClockMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coupled" => Ok(Self::Coupled),
            "decoupled" => Ok(Self::Decoupled),
            other => Err(Error::Config(format!("unknown clock mode {other:?}"))),
        }
    }
}

impl fmt::Display for ClockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Coupled => "coupled",
            Self::Decoupled => "decoupled",
        })
    }
}

/// Trajectory head used at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Mlp,
    Diffusion,
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "diffusion" => Ok(Self::Diffusion),
            other => Err(Error::Config(format!("unknown head {other:?}"))),
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mlp => "mlp",
            Self::Diffusion => "diffusion",
        })
    }
}

/// Text form of one config value.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse().map_err(|e| Error::Config(format!("cannot parse {s:?}: {e}")))
            }

            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, bool, ClockMode, Head, OptimizerKind);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Result<Self> {
        let v: f64 = s.parse().map_err(|e| Error::Config(format!("cannot parse {s:?}: {e}")))?;
        if !v.is_finite() {
            return Err(Error::Config(format!("{s:?} is not finite")));
        }
        Ok(v)
    }

    fn render(&self) -> String {
        format!("{self:?}")
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])+ $key:ident: $ty:ty = $default:expr,)*) => {
        /// Every tunable of a run. Text form is one `key = value` per line; `#` starts a comment.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])+ pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl RunConfig {
            /// `(key, documentation)` for every key, in canonical order.
            pub const KEYS: &'static [(&'static str, &'static str)] = &[
                $((stringify!($key), concat!($($doc),+)),)*
            ];

            /// Sets one key from its text value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
                    })*
                    other => return Err(Error::Config(format!("unknown key {other:?}"))),
                }
                Ok(())
            }

            /// Canonical text with every key documented.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(
                    for line in concat!($($doc),+).lines() {
                        out.push_str("#");
                        out.push_str(line);
                        out.push('\n');
                    }
                    out.push_str(&format!("{} = {}\n", stringify!($key), ConfigValue::render(&self.$key)));
                )*
                out
            }

            fn values(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), ConfigValue::render(&self.$key)),)*]
            }
        }
    };
}

run_config! {
    /// Seed of batch sampling and refiner training noise.
    seed: u64 = 7,
    /// Model width shared by both experts, the refiner and the scene tokens.
    width: usize = 64,
    /// Transformer depth of each expert.
    layers: usize = 4,
    /// Attention heads of each expert.
    heads: usize = 4,
    /// Feed-forward width of the action expert.
    ffn_width: usize = 128,
    /// Feed-forward width of the understanding expert.
    ue_ffn_width: usize = 128,
    /// RGB tokens per frame.
    rgb_tokens: usize = 16,
    /// BEV tokens per frame.
    bev_tokens: usize = 16,
    /// History frames seen by the understanding expert.
    history_frames: usize = 4,
    /// Extra frames kept before the history window for staleness sweeps.
    stale_frames: usize = 2,
    /// Prompt length in text tokens.
    prompt_len: usize = 4,
    /// Text vocabulary size.
    text_vocab: usize = 16,
    /// Reasoning tokens appended after the prompt.
    reasoning_len: usize = 4,
    /// Trajectory output scale in meters.
    traj_scale: f64 = 10.0,
    /// Seed of the frozen understanding expert.
    ue_seed: u64 = 101,
    /// Seed of the action expert initialisation.
    ae_seed: u64 = 202,
    /// Seed of the refiner initialisation.
    refiner_seed: u64 = 303,
    /// Seed of the token renderer.
    render_seed: u64 = 404,
    /// Base frame rate in Hz.
    rate_hz: f64 = 2.0,
    /// Minimum scripted duration of a scenario in seconds.
    scenario_duration: f64 = 12.0,
    /// Speed below which a horizon is labelled stop (m/s).
    stop_speed: f64 = 0.2,
    /// Speed change over a horizon that counts as accelerate or slow (m/s).
    speed_delta: f64 = 0.5,
    /// Heading change below which a horizon is straight (degrees).
    straight_deg: f64 = 2.0,
    /// Heading change above which a horizon is a turn (degrees).
    turn_deg: f64 = 10.0,
    /// Static obstacles per scenario.
    obstacles: usize = 3,
    /// Ego footprint radius used by the collision proxy (m).
    ego_radius: f64 = 1.0,
    /// Scenarios in the training split.
    train_scenarios: usize = 200,
    /// Scenarios in the held-out split.
    eval_scenarios: usize = 50,
    /// Probability that a sample is asynchronous (k in {4, 5}).
    async_fraction: f64 = 0.7,
    /// Seed of the training split.
    train_seed: u64 = 11,
    /// Seed of the held-out split.
    eval_seed: u64 = 12,
    /// Optimiser steps of the action expert.
    steps: usize = 2000,
    /// Samples per step.
    batch: usize = 32,
    /// Optimiser.
    optimizer: OptimizerKind = OptimizerKind::Adam,
    /// Peak learning rate.
    lr: f64 = 2e-3,
    /// Linear warm-up steps.
    warmup: usize = 50,
    /// Momentum, or the first-moment decay for adam.
    momentum: f64 = 0.9,
    /// Global gradient-norm clip; 0 disables.
    grad_clip: f64 = 5.0,
    /// Weight of the decision term.
    weight_decision: f64 = 1.0,
    /// Weight of the spatial route term.
    weight_spatial: f64 = 0.5,
    /// Steps between checkpoints; 0 writes only the final one.
    checkpoint_every: usize = 0,
    /// Refiner attention heads.
    refiner_heads: usize = 2,
    /// Mixture-of-attention blocks.
    refiner_blocks: usize = 2,
    /// Refiner feed-forward width.
    refiner_ffn: usize = 64,
    /// Length of the cosine noise schedule.
    diffusion_steps: usize = 50,
    /// Reverse steps run at inference.
    t_trunc: usize = 8,
    /// Longitudinal multiplicative noise.
    sigma_lon: f64 = 0.5,
    /// Lateral multiplicative noise.
    sigma_lat: f64 = 0.2,
    /// Initial decision gate parameter.
    gamma_init: f64 = 0.5,
    /// Refiner optimiser steps.
    refiner_steps: usize = 2000,
    /// Refiner learning rate.
    refiner_lr: f64 = 2e-3,
    /// Trajectory head used at inference.
    head: Head = Head::Mlp,
    /// Understanding period in ticks.
    ue_period: usize = 8,
    /// Clock mode.
    mode: ClockMode = ClockMode::Decoupled,
    /// Virtual tick duration in seconds.
    tick_s: f64 = 0.5,
    /// Single-threaded schedule with zero understanding delay.
    deterministic: bool = true,
    /// Understanding feed-forward multiplier used by latency benchmarks.
    ue_scale: usize = 48,
    /// Scenarios in the closed-loop suite.
    rollout_scenarios: usize = 20,
    /// Seconds of each plan executed before replanning.
    replan_s: f64 = 0.5,
}

impl RunConfig {
    /// Small dimensions for single-core acceptance runs.
    pub fn desk() -> Self {
        Self {
            width: 32,
            layers: 2,
            heads: 2,
            ffn_width: 64,
            ue_ffn_width: 64,
            rgb_tokens: 8,
            bev_tokens: 8,
            ..Self::default()
        }
    }

    /// Parses `key = value` lines on top of the defaults. Unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            cfg.set(k, v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return err("width must be a positive multiple of heads");
        }
        if self.refiner_heads == 0 || !self.width.is_multiple_of(self.refiner_heads) {
            return err("width must be a positive multiple of refiner_heads");
        }
        if self.layers == 0 || self.ue_period == 0 || self.batch == 0 {
            return err("layers, ue_period and batch must be positive");
        }
        if self.t_trunc > self.diffusion_steps {
            return err("t_trunc exceeds diffusion_steps");
        }
        if self.history_frames != 4 {
            return err("history_frames is fixed at 4");
        }
        if self.sigma_lon < 0.0 || self.sigma_lat < 0.0 {
            return err("noise sigmas must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.async_fraction) {
            return err("async_fraction outside [0, 1]");
        }
        if self.prompt_len >= self.text_vocab {
            return err("prompt_len must be below text_vocab");
        }
        Ok(())
    }

    /// Hex sha256 of the canonical `key = value` lines, comments excluded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.values() {
            h.update(format!("{k} = {v}\n").as_bytes());
        }
        hex(&h.finalize())
    }

    /// Digest over the keys that shape model parameters and data.
    pub fn model_digest(&self) -> String {
        const TRAINING_ONLY: &[&str] = &[
            "steps",
            "batch",
            "optimizer",
            "lr",
            "warmup",
            "momentum",
            "grad_clip",
            "checkpoint_every",
            "refiner_steps",
            "refiner_lr",
            "head",
            "ue_period",
            "mode",
            "tick_s",
            "deterministic",
            "ue_scale",
            "rollout_scenarios",
            "replan_s",
            "async_fraction",
            "t_trunc",
            "sigma_lon",
            "sigma_lat",
        ];
        let mut h = Sha256::new();
        for (k, v) in self.values() {
            if !TRAINING_ONLY.contains(&k) {
                h.update(format!("{k} = {v}\n").as_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn ue_config(&self) -> UeConfig {
        UeConfig {
            width: self.width,
            layers: self.layers,
            heads: self.heads,
            ffn_width: self.ue_ffn_width,
            tokens_per_frame: self.rgb_tokens,
            max_frames: self.history_frames,
            max_prompt: self.prompt_len,
            text_vocab: self.text_vocab,
            reasoning_len: self.reasoning_len,
            seed: self.ue_seed,
        }
    }

    pub fn ae_config(&self) -> AeConfig {
        AeConfig {
            width: self.width,
            layers: self.layers,
            heads: self.heads,
            ffn_width: self.ffn_width,
            rgb_tokens: self.rgb_tokens,
            bev_tokens: self.bev_tokens,
            traj_scale: self.traj_scale,
            seed: self.ae_seed,
        }
    }

    pub fn refiner_config(&self) -> RefinerConfig {
        RefinerConfig {
            width: self.width,
            heads: self.refiner_heads,
            blocks: self.refiner_blocks,
            ffn_width: self.refiner_ffn,
            diffusion_steps: self.diffusion_steps,
            t_trunc: self.t_trunc,
            sigma_lon: self.sigma_lon,
            sigma_lat: self.sigma_lat,
            gamma_init: self.gamma_init,
            traj_scale: self.traj_scale,
            seed: self.refiner_seed,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            rate_hz: self.rate_hz,
            duration: self.scenario_duration,
            stop_speed: self.stop_speed,
            speed_delta: self.speed_delta,
            straight_deg: self.straight_deg,
            turn_deg: self.turn_deg,
            obstacles: self.obstacles,
            ego_radius: self.ego_radius,
            ..SynthConfig::default()
        }
    }

    pub fn dataset_header(&self) -> DatasetHeader {
        DatasetHeader {
            width: self.width,
            rgb_tokens: self.rgb_tokens,
            bev_tokens: self.bev_tokens,
            history_frames: self.history_frames,
            stale_frames: self.stale_frames,
            rate_hz: self.rate_hz,
            render_seed: self.render_seed,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            decision: self.weight_decision,
            spatial: self.weight_spatial,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::desk();
        cfg.lr = 0.1 + 0.2;
        cfg.head = Head::Diffusion;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn every_key_documented() {
        for (k, doc) in RunConfig::KEYS {
            assert!(!doc.trim().is_empty(), "{k}");
        }
        assert_eq!(RunConfig::KEYS.len(), RunConfig::default().values().len());
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::parse("widht = 3"), Err(Error::Config(_))));
        assert!(RunConfig::parse("width = 32\nwidth = 32").is_err());
        assert!(RunConfig::parse("width = 31").is_err());
        assert!(RunConfig::parse("lr = nan").is_err());
    }

    #[test]
    fn comments_and_blanks() {
        let cfg = RunConfig::parse("# a comment\n\nsteps = 5 # trailing\n").unwrap();
        assert_eq!(cfg.steps, 5);
    }

    #[test]
    fn digest_tracks_values() {
        let a = RunConfig::default();
        let b = a.clone().with_overrides(&["steps=3"]).unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.model_digest(), b.model_digest());
        let c = a.clone().with_overrides(&["width=32"]).unwrap();
        assert_ne!(a.model_digest(), c.model_digest());
    }
}
