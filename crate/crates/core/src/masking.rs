//! Hybrid attention masks from declarative token layouts.
//!
//! Tasks carry a rank. A token may attend any token of a strictly lower rank, never one of a
//! higher rank, and same-rank tokens attend each other freely except inside a causal segment,
//! where a token only sees itself and earlier positions.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numeric::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Scene,
    Text,
    Obs,
    Decision,
    PlanTemporal,
    PlanSpatial,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Scene,
        Task::Text,
        Task::Obs,
        Task::Decision,
        Task::PlanTemporal,
        Task::PlanSpatial,
    ];

    pub fn rank(self) -> u8 {
        match self {
            Task::Scene | Task::Text => 0,
            Task::Obs => 1,
            Task::Decision => 2,
            Task::PlanTemporal | Task::PlanSpatial => 3,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Task::Scene => "scene",
            Task::Text => "text",
            Task::Obs => "obs",
            Task::Decision => "decision",
            Task::PlanTemporal => "temporal",
            Task::PlanSpatial => "spatial",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WithinMode {
    Bidirectional,
    Causal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub task: Task,
    pub len: usize,
    pub mode: WithinMode,
}

impl Segment {
    pub fn bidirectional(task: Task, len: usize) -> Self {
        Self {
            task,
            len,
            mode: WithinMode::Bidirectional,
        }
    }

    pub fn causal(task: Task, len: usize) -> Self {
        Self {
            task,
            len,
            mode: WithinMode::Causal,
        }
    }
}

/// Ordered segments; ranks never decrease along the sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttentionLayout {
    segments: Vec<Segment>,
}

impl AttentionLayout {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut layout = Self::default();
        for s in segments {
            layout.push(s)?;
        }
        Ok(layout)
    }

    /// Appends a segment, rejecting rank decreases and causal non-text segments.
    pub fn push(&mut self, segment: Segment) -> Result<()> {
        if segment.mode == WithinMode::Causal && segment.task != Task::Text {
            return Err(Error::Layout(format!(
                "only text segments may be causal, got {:?}",
                segment.task
            )));
        }
        if let Some(last) = self.segments.last() {
            if segment.task.rank() < last.task.rank() {
                return Err(Error::Layout(format!(
                    "segment {} ({:?}) has lower rank than the preceding {:?}",
                    self.segments.len(),
                    segment.task,
                    last.task
                )));
            }
        }
        self.segments.push(segment);
        Ok(())
    }

    /// Layout with `other`'s segments appended after this one's.
    pub fn concat(&self, other: &AttentionLayout) -> Result<Self> {
        let mut out = self.clone();
        for &s in &other.segments {
            out.push(s)?;
        }
        Ok(out)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Start offset of every segment.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.segments
            .iter()
            .map(|s| {
                let o = acc;
                acc += s.len;
                o
            })
            .collect()
    }

    /// Offset and length of the first segment with the given task.
    pub fn span(&self, task: Task) -> Option<(usize, usize)> {
        let offsets = self.offsets();
        self.segments
            .iter()
            .zip(offsets)
            .find(|(s, _)| s.task == task)
            .map(|(s, o)| (o, s.len))
    }
}

impl fmt::Display for AttentionLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, s) in self.segments.iter().enumerate() {
            if n > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}:{}", s.task.tag(), s.len)?;
            if s.mode == WithinMode::Causal {
                f.write_str("c")?;
            }
        }
        Ok(())
    }
}

/// Parses `scene:64,text:12c,obs:33` style lists; a trailing `c` marks a causal segment.
impl FromStr for AttentionLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut segments = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (tag, len) = part
                .split_once(':')
                .ok_or_else(|| Error::Layout(format!("segment {part:?} lacks ':'")))?;
            let task = Task::ALL
                .into_iter()
                .find(|t| t.tag() == tag.trim())
                .ok_or_else(|| Error::Layout(format!("unknown segment task {tag:?}")))?;
            let len = len.trim();
            let (digits, mode) = match len.strip_suffix('c') {
                Some(d) => (d, WithinMode::Causal),
                None => (len, WithinMode::Bidirectional),
            };
            let len = digits
                .parse()
                .map_err(|_| Error::Layout(format!("bad segment length {len:?}")))?;
            segments.push(Segment { task, len, mode });
        }
        AttentionLayout::new(segments)
    }
}

/// Dense mask for `layout`, filled block by block over segment pairs.
pub fn build_mask(layout: &AttentionLayout) -> Mask {
    let n = layout.len();
    let mut mask = Mask::new(n, n, false);
    let offsets = layout.offsets();
    for (a, (sa, &oa)) in layout.segments.iter().zip(&offsets).enumerate() {
        for (b, (sb, &ob)) in layout.segments.iter().zip(&offsets).enumerate() {
            let (ra, rb) = (sa.task.rank(), sb.task.rank());
            if rb > ra {
                continue;
            }
            let causal = a == b && sa.mode == WithinMode::Causal;
            for i in 0..sa.len {
                let cols = if causal { i + 1 } else { sb.len };
                for j in 0..cols {
                    mask.set(oa + i, ob + j, true);
                }
            }
        }
    }
    mask
}

/// Pairwise restatement of the attention rule for one `(i, j)`.
pub fn mask_oracle(layout: &AttentionLayout, i: usize, j: usize) -> Result<bool> {
    let len = layout.len();
    if i >= len || j >= len {
        return Err(Error::IndexOutOfRange { i, j, len });
    }
    let locate = |pos: usize| {
        let mut start = 0;
        for (idx, s) in layout.segments.iter().enumerate() {
            if pos < start + s.len {
                return (idx, *s);
            }
            start += s.len;
        }
        unreachable!("position checked against layout length")
    };
    let (si, seg_i) = locate(i);
    let (sj, seg_j) = locate(j);
    let (ri, rj) = (seg_i.task.rank(), seg_j.task.rank());
    Ok(rj < ri
        || (rj == ri
            && (si != sj || seg_i.mode == WithinMode::Bidirectional || j <= i)))
}
