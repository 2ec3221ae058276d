//! Binary checkpoints: embedded run config and digest, action-expert and refiner weights,
//! optimiser state, and a trailing sha256 over everything before it.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numeric::optim::Optimizer;
use crate::numeric::param::hex;
use crate::numeric::{ParamStore, Tensor};
use crate::policy::Policy;

const MAGIC: &[u8; 4] = b"MOTK";
const VERSION: u32 = 1;

/// Storage precision of weights. `F64` keeps optimiser state and resumes bit-exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Optimiser step count and moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub steps: u64,
    pub first: Vec<Tensor<f64>>,
    pub second: Vec<Tensor<f64>>,
}

impl OptimizerState {
    pub fn capture(opt: &Optimizer) -> Self {
        let (first, second) = opt.state();
        Self {
            steps: opt.steps,
            first: first.to_vec(),
            second: second.to_vec(),
        }
    }

    pub fn apply(&self, opt: &mut Optimizer) -> Result<()> {
        opt.restore(self.steps, self.first.clone(), self.second.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub precision: Precision,
    /// Action-expert steps taken.
    pub step: u64,
    /// Refiner steps taken.
    pub refiner_step: u64,
    pub ae: Vec<(String, Tensor<f64>)>,
    pub refiner: Vec<(String, Tensor<f64>)>,
    pub ae_optimizer: Option<OptimizerState>,
    pub refiner_optimizer: Option<OptimizerState>,
}

fn values(store: &ParamStore<f64>) -> Vec<(String, Tensor<f64>)> {
    store.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
}

impl Checkpoint {
    pub fn capture(policy: &Policy, precision: Precision, step: u64, refiner_step: u64) -> Self {
        Self {
            config: policy.cfg.clone(),
            precision,
            step,
            refiner_step,
            ae: values(policy.ae.store()),
            refiner: values(policy.refiner.store()),
            ae_optimizer: None,
            refiner_optimizer: None,
        }
    }

    /// Rebuilds the policy: seeded construction, then the stored weights.
    pub fn restore(&self) -> Result<Policy> {
        let mut policy = Policy::new(&self.config);
        policy.ae.store_mut().load_values(&self.ae)?;
        policy.refiner.store_mut().load_values(&self.refiner)?;
        Ok(policy)
    }

    /// Refuses a checkpoint whose model-shaping keys differ from `cfg`.
    pub fn check_compatible(&self, cfg: &RunConfig) -> Result<()> {
        let (expected, found) = (cfg.model_digest(), self.config.model_digest());
        if expected != found {
            return Err(Error::DigestMismatch { expected, found });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u8(match self.precision {
            Precision::F32 => 4,
            Precision::F64 => 8,
        })?;
        write_str(&mut w, &self.config.to_text())?;
        write_str(&mut w, &self.config.digest())?;
        w.write_u64::<LittleEndian>(self.step)?;
        w.write_u64::<LittleEndian>(self.refiner_step)?;
        for params in [&self.ae, &self.refiner] {
            w.write_u32::<LittleEndian>(params.len() as u32)?;
            for (name, t) in params {
                write_str(&mut w, name)?;
                write_tensor(&mut w, t, self.precision)?;
            }
        }
        for opt in [&self.ae_optimizer, &self.refiner_optimizer] {
            match (opt, self.precision) {
                (Some(s), Precision::F64) => {
                    w.write_u8(1)?;
                    w.write_u64::<LittleEndian>(s.steps)?;
                    w.write_u32::<LittleEndian>(s.first.len() as u32)?;
                    for t in s.first.iter().chain(&s.second) {
                        write_tensor(&mut w, t, Precision::F64)?;
                    }
                }
                _ => w.write_u8(0)?,
            }
        }
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 + 4 {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = Cursor::new(body);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let precision = match r.read_u8()? {
            4 => Precision::F32,
            8 => Precision::F64,
            p => return Err(Error::Format(format!("unknown precision tag {p}"))),
        };
        let config = RunConfig::parse(&read_str(&mut r)?)?;
        let stored = read_str(&mut r)?;
        if stored != config.digest() {
            return Err(Error::DigestMismatch {
                expected: stored,
                found: config.digest(),
            });
        }
        let step = r.read_u64::<LittleEndian>()?;
        let refiner_step = r.read_u64::<LittleEndian>()?;
        let mut groups = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = r.read_u32::<LittleEndian>()? as usize;
            let mut params = Vec::with_capacity(n);
            for _ in 0..n {
                let name = read_str(&mut r)?;
                params.push((name, read_tensor(&mut r, precision)?));
            }
            groups.push(params);
        }
        let mut opts = Vec::with_capacity(2);
        for _ in 0..2 {
            opts.push(if r.read_u8()? == 1 {
                let steps = r.read_u64::<LittleEndian>()?;
                let n = r.read_u32::<LittleEndian>()? as usize;
                let mut all = Vec::with_capacity(2 * n);
                for _ in 0..2 * n {
                    all.push(read_tensor(&mut r, Precision::F64)?);
                }
                let second = all.split_off(n);
                Some(OptimizerState {
                    steps,
                    first: all,
                    second,
                })
            } else {
                None
            });
        }
        let refiner_optimizer = opts.pop().flatten();
        let ae_optimizer = opts.pop().flatten();
        let refiner = groups.pop().unwrap_or_default();
        let ae = groups.pop().unwrap_or_default();
        Ok(Self {
            config,
            precision,
            step,
            refiner_step,
            ae,
            refiner,
            ae_optimizer,
            refiner_optimizer,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex sha256 of the serialised checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_bytes()?)))
    }
}

fn write_str(w: &mut Vec<u8>, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if n > remaining {
        return Err(Error::Format("string runs past the end".into()));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

fn write_tensor(w: &mut Vec<u8>, t: &Tensor<f64>, p: Precision) -> Result<()> {
    w.write_u32::<LittleEndian>(t.rows() as u32)?;
    w.write_u32::<LittleEndian>(t.cols() as u32)?;
    for &v in t.data() {
        match p {
            Precision::F32 => w.write_f32::<LittleEndian>(v as f32)?,
            Precision::F64 => w.write_f64::<LittleEndian>(v)?,
        }
    }
    Ok(())
}

fn read_tensor(r: &mut Cursor<&[u8]>, p: Precision) -> Result<Tensor<f64>> {
    let rows = r.read_u32::<LittleEndian>()? as usize;
    let cols = r.read_u32::<LittleEndian>()? as usize;
    let width = match p {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let remaining = r.get_ref().len() - r.position() as usize;
    if rows.saturating_mul(cols).saturating_mul(width) > remaining {
        return Err(Error::Format("tensor runs past the end".into()));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(match p {
            Precision::F32 => r.read_f32::<LittleEndian>()? as f64,
            Precision::F64 => r.read_f64::<LittleEndian>()?,
        });
    }
    Tensor::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig::desk().with_overrides(&["width=8", "heads=2", "layers=1", "ffn_width=8", "ue_ffn_width=8", "rgb_tokens=2", "bev_tokens=2", "refiner_ffn=8", "refiner_blocks=1"]).unwrap()
    }

    #[test]
    fn round_trip_f64() {
        let policy = Policy::new(&tiny());
        let mut ck = Checkpoint::capture(&policy, Precision::F64, 3, 0);
        let opt = Optimizer::new(crate::numeric::optim::OptimizerKind::Adam, 1e-3, 0.9, policy.ae.store());
        ck.ae_optimizer = Some(OptimizerState::capture(&opt));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.restore().unwrap().ae.store().digest(), policy.ae.store().digest());
    }

    #[test]
    fn f32_drops_optimizer_state() {
        let policy = Policy::new(&tiny());
        let mut ck = Checkpoint::capture(&policy, Precision::F32, 0, 0);
        let opt = Optimizer::new(crate::numeric::optim::OptimizerKind::Adam, 1e-3, 0.9, policy.ae.store());
        ck.ae_optimizer = Some(OptimizerState::capture(&opt));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert!(back.ae_optimizer.is_none());
        assert_eq!(back.ae.len(), ck.ae.len());
    }

    #[test]
    fn corruption_detected() {
        let policy = Policy::new(&tiny());
        let mut bytes = Checkpoint::capture(&policy, Precision::F32, 0, 0).to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn mismatched_config_refused() {
        let ck = Checkpoint::capture(&Policy::new(&tiny()), Precision::F32, 0, 0);
        assert!(ck.check_compatible(&tiny()).is_ok());
        let other = tiny().with_overrides(&["width=16"]).unwrap();
        assert!(matches!(ck.check_compatible(&other), Err(Error::DigestMismatch { .. })));
    }
}
