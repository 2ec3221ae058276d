//! Meta-action vocabulary and trajectory containers shared by the models, the data factory and
//! the metrics.

use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

/// Prediction horizons, one per second.
pub const HORIZONS: usize = 3;
/// Decision tokens: one lateral and one longitudinal token per horizon.
pub const DECISION_TOKENS: usize = 2 * HORIZONS;
/// Symbols in the shared action vocabulary.
pub const VOCAB: usize = 9;
/// Timed waypoints at 0.5 s spacing.
pub const TEMPORAL_POINTS: usize = 6;
/// Route points at 1 m arc spacing.
pub const SPATIAL_POINTS: usize = 20;
pub const WAYPOINT_DT: f64 = 0.5;
pub const ROUTE_SPACING: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Lateral {
    TurnLeft,
    SlightLeft,
    Straight,
    SlightRight,
    TurnRight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Longitudinal {
    Accelerate,
    Slow,
    Keep,
    Stop,
}

impl Lateral {
    pub const ALL: [Lateral; 5] = [
        Lateral::TurnLeft,
        Lateral::SlightLeft,
        Lateral::Straight,
        Lateral::SlightRight,
        Lateral::TurnRight,
    ];

    /// Vocabulary index, 0..5.
    pub fn token(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Lateral::TurnLeft => "turn-left",
            Lateral::SlightLeft => "slight-left",
            Lateral::Straight => "straight",
            Lateral::SlightRight => "slight-right",
            Lateral::TurnRight => "turn-right",
        }
    }
}

impl Longitudinal {
    pub const ALL: [Longitudinal; 4] = [
        Longitudinal::Accelerate,
        Longitudinal::Slow,
        Longitudinal::Keep,
        Longitudinal::Stop,
    ];

    /// Vocabulary index, 5..9.
    pub fn token(self) -> usize {
        5 + self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Longitudinal::Accelerate => "accelerate",
            Longitudinal::Slow => "slow",
            Longitudinal::Keep => "keep",
            Longitudinal::Stop => "stop",
        }
    }
}

/// Lateral and longitudinal command for each of the three horizons.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MetaActionSequence {
    pub lateral: [Lateral; HORIZONS],
    pub longitudinal: [Longitudinal; HORIZONS],
}

impl MetaActionSequence {
    pub fn uniform(lateral: Lateral, longitudinal: Longitudinal) -> Self {
        Self {
            lateral: [lateral; HORIZONS],
            longitudinal: [longitudinal; HORIZONS],
        }
    }

    /// Token order `[lat1, lon1, lat2, lon2, lat3, lon3]`.
    pub fn tokens(&self) -> [usize; DECISION_TOKENS] {
        let mut out = [0; DECISION_TOKENS];
        for h in 0..HORIZONS {
            out[2 * h] = self.lateral[h].token();
            out[2 * h + 1] = self.longitudinal[h].token();
        }
        out
    }

    pub fn from_tokens(tokens: &[usize]) -> Result<Self> {
        if tokens.len() != DECISION_TOKENS {
            return Err(Error::Format(format!(
                "expected {DECISION_TOKENS} decision tokens, got {}",
                tokens.len()
            )));
        }
        let mut lateral = [Lateral::Straight; HORIZONS];
        let mut longitudinal = [Longitudinal::Keep; HORIZONS];
        for h in 0..HORIZONS {
            let (lat, lon) = (tokens[2 * h], tokens[2 * h + 1]);
            lateral[h] = *Lateral::ALL.get(lat).ok_or(Error::VocabularyRange {
                position: 2 * h,
                token: lat,
            })?;
            longitudinal[h] = *lon
                .checked_sub(5)
                .and_then(|i| Longitudinal::ALL.get(i))
                .ok_or(Error::VocabularyRange {
                    position: 2 * h + 1,
                    token: lon,
                })?;
        }
        Ok(Self {
            lateral,
            longitudinal,
        })
    }
}

/// Vocabulary indices a decision position may decode to.
pub fn admissible(position: usize) -> std::ops::Range<usize> {
    if position.is_multiple_of(2) {
        0..5
    } else {
        5..VOCAB
    }
}

/// Timed waypoints and route points in the ego frame (x forward, y left), meters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySet {
    pub temporal: Vec<[f64; 2]>,
    pub spatial: Vec<[f64; 2]>,
}

impl TrajectorySet {
    pub fn zeros() -> Self {
        Self {
            temporal: vec![[0.0; 2]; TEMPORAL_POINTS],
            spatial: vec![[0.0; 2]; SPATIAL_POINTS],
        }
    }

    /// Stacks temporal then spatial points into a `(M+N) x 2` matrix.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let pts: Vec<T> = self
            .temporal
            .iter()
            .chain(&self.spatial)
            .flat_map(|p| [T::from_f64c(p[0]), T::from_f64c(p[1])])
            .collect();
        Tensor::from_vec(self.temporal.len() + self.spatial.len(), 2, pts).expect("two columns")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>, temporal: usize) -> Result<Self> {
        if t.cols() != 2 || t.rows() < temporal {
            return Err(Error::Shape {
                op: "trajectory from tensor",
                lhs: t.shape(),
                rhs: (temporal, 2),
            });
        }
        let pt = |i: usize| [t.get(i, 0).to_f64c(), t.get(i, 1).to_f64c()];
        Ok(Self {
            temporal: (0..temporal).map(pt).collect(),
            spatial: (temporal..t.rows()).map(pt).collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.temporal
            .iter()
            .chain(&self.spatial)
            .all(|p| p[0].is_finite() && p[1].is_finite())
    }
}
