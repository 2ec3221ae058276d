//! Layer-wise key/value snapshots written on the slow clock and read on the fast clock.

use std::io::{Read, Write};
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwapOption;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::masking::AttentionLayout;
use crate::numeric::{Real, Tensor};

/// Keys and values of one layer, stamped with the epoch that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedLayer<T: Real = f64> {
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
    pub epoch: u64,
}

/// Immutable per-layer K/V set of every understanding-side token at one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKvCache<T: Real = f64> {
    layers: Vec<CachedLayer<T>>,
    epoch: u64,
    width: usize,
    layout: AttentionLayout,
    reasoning: Tensor<T>,
}

impl<T: Real> LayerKvCache<T> {
    pub fn new(epoch: u64, width: usize, layout: AttentionLayout, kv: Vec<(Tensor<T>, Tensor<T>)>) -> Result<Self> {
        let layers = kv
            .into_iter()
            .map(|(keys, values)| CachedLayer { keys, values, epoch })
            .collect();
        let cache = Self {
            layers,
            epoch,
            width,
            layout,
            reasoning: Tensor::zeros(0, width),
        };
        cache.validate()?;
        Ok(cache)
    }

    /// Attaches the reasoning-token hidden states produced by the same pass.
    pub fn with_reasoning(mut self, reasoning: Tensor<T>) -> Result<Self> {
        if reasoning.cols() != self.width {
            return Err(Error::Shape {
                op: "reasoning width",
                lhs: reasoning.shape(),
                rhs: (reasoning.rows(), self.width),
            });
        }
        self.reasoning = reasoning;
        Ok(self)
    }

    pub fn reasoning(&self) -> &Tensor<T> {
        &self.reasoning
    }

    /// Cache with no tokens, for running the action side alone.
    pub fn empty(layer_count: usize, width: usize, epoch: u64) -> Self {
        let kv = (0..layer_count)
            .map(|_| (Tensor::zeros(0, width), Tensor::zeros(0, width)))
            .collect();
        Self::new(epoch, width, AttentionLayout::default(), kv).expect("empty cache is consistent")
    }

    /// Checks one epoch across layers and matching K/V shapes.
    pub fn validate(&self) -> Result<()> {
        let s = self.layout.len();
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.epoch != self.epoch {
                return Err(Error::InconsistentSnapshot(format!(
                    "layer {l} carries epoch {} but the snapshot is epoch {}",
                    layer.epoch, self.epoch
                )));
            }
            for t in [&layer.keys, &layer.values] {
                if t.shape() != (s, self.width) {
                    return Err(Error::InconsistentSnapshot(format!(
                        "layer {l} block is {:?}, expected {:?}",
                        t.shape(),
                        (s, self.width)
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn scene_len(&self) -> usize {
        self.layout.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layout(&self) -> &AttentionLayout {
        &self.layout
    }

    pub fn layer(&self, l: usize) -> &CachedLayer<T> {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[CachedLayer<T>] {
        &self.layers
    }

    /// True when every layer carries the snapshot's epoch.
    pub fn is_single_epoch(&self) -> bool {
        self.layers.iter().all(|l| l.epoch == self.epoch)
    }

    pub fn cast<U: Real>(&self) -> LayerKvCache<U> {
        LayerKvCache {
            layers: self
                .layers
                .iter()
                .map(|l| CachedLayer {
                    keys: l.keys.cast(),
                    values: l.values.cast(),
                    epoch: l.epoch,
                })
                .collect(),
            epoch: self.epoch,
            width: self.width,
            layout: self.layout.clone(),
            reasoning: self.reasoning.cast(),
        }
    }

    /// Binary record: epoch u64, L u32, S u32, d u32, then per layer keys and values as
    /// row-major little-endian f64.
    pub fn write_dump(&self, w: &mut impl Write) -> Result<()> {
        w.write_u64::<LittleEndian>(self.epoch)?;
        w.write_u32::<LittleEndian>(self.layers.len() as u32)?;
        w.write_u32::<LittleEndian>(self.scene_len() as u32)?;
        w.write_u32::<LittleEndian>(self.width as u32)?;
        for layer in &self.layers {
            for t in [&layer.keys, &layer.values] {
                for &v in t.data() {
                    w.write_f64::<LittleEndian>(v.to_f64c())?;
                }
            }
        }
        Ok(())
    }

    /// Reads a dump. The layout is not stored, so it comes back as one scene segment.
    pub fn read_dump(r: &mut impl Read) -> Result<Self> {
        let epoch = r.read_u64::<LittleEndian>()?;
        let layers = r.read_u32::<LittleEndian>()? as usize;
        let s = r.read_u32::<LittleEndian>()? as usize;
        let d = r.read_u32::<LittleEndian>()? as usize;
        let mut kv = Vec::with_capacity(layers);
        for _ in 0..layers {
            let mut pair = Vec::with_capacity(2);
            for _ in 0..2 {
                let mut data = Vec::with_capacity(s * d);
                for _ in 0..s * d {
                    data.push(T::from_f64c(r.read_f64::<LittleEndian>()?));
                }
                pair.push(Tensor::from_vec(s, d, data)?);
            }
            let values = pair.pop().expect("two blocks");
            let keys = pair.pop().expect("two blocks");
            kv.push((keys, values));
        }
        let layout = AttentionLayout::new(vec![crate::masking::Segment::bidirectional(
            crate::masking::Task::Scene,
            s,
        )])?;
        Self::new(epoch, d, layout, kv)
    }
}

/// Published-snapshot cell: single writer, any number of wait-free readers.
pub struct KvCell<T: Real = f64> {
    visible: ArcSwapOption<LayerKvCache<T>>,
    writer: Mutex<()>,
}

impl<T: Real> Default for KvCell<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> KvCell<T> {
    pub fn new() -> Self {
        Self {
            visible: ArcSwapOption::empty(),
            writer: Mutex::new(()),
        }
    }

    /// Makes `snapshot` visible. Its epoch must be newer than the current one.
    pub fn publish(&self, snapshot: LayerKvCache<T>) -> Result<()> {
        snapshot.validate()?;
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(current) = self.visible.load().as_ref() {
            if snapshot.epoch <= current.epoch {
                return Err(Error::StalePublish {
                    offered: snapshot.epoch,
                    current: current.epoch,
                });
            }
        }
        self.visible.store(Some(Arc::new(snapshot)));
        Ok(())
    }

    /// Latest published snapshot.
    pub fn latest(&self) -> Result<Arc<LayerKvCache<T>>> {
        self.visible.load_full().ok_or(Error::ColdCache)
    }

    /// Latest snapshot for action step `t`; its epoch never exceeds `t`.
    pub fn snapshot_for(&self, t: u64) -> Result<Arc<LayerKvCache<T>>> {
        let snap = self.latest()?;
        if snap.epoch > t {
            return Err(Error::FutureSnapshot {
                epoch: snap.epoch,
                step: t,
            });
        }
        Ok(snap)
    }

    pub fn current_epoch(&self) -> Option<u64> {
        self.visible.load().as_ref().map(|s| s.epoch)
    }
}
