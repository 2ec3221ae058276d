//! Multi-frame samples with synchronous (k = 3) and asynchronous (k ∈ {4, 5}) current frames,
//! and their binary file format.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::labels::{ground_truth, label_meta_actions};
use super::render::Renderer;
use super::scenario::{generate_scenario, Obstacle, Scenario, SynthConfig};
use crate::error::{Error, Result};
use crate::numeric::param::hex;
use crate::numeric::Tensor;
use crate::plan::{MetaActionSequence, TrajectorySet, DECISION_TOKENS, HORIZONS, SPATIAL_POINTS, TEMPORAL_POINTS};

const MAGIC: &[u8; 4] = b"VLAD";
const VERSION: u32 = 1;
/// Synchronous current-frame offset.
pub const SYNC_K: usize = 3;

/// Shape parameters shared by every record of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub width: usize,
    pub rgb_tokens: usize,
    pub bev_tokens: usize,
    pub history_frames: usize,
    /// Extra frames kept before the history window for staleness sweeps.
    pub stale_frames: usize,
    pub rate_hz: f64,
    pub render_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub scenario_seed: u64,
    /// Frame index of the first history frame.
    pub t: usize,
    /// Current-frame offset from `t`.
    pub k: usize,
    /// RGB grids for frames `t - stale_frames ..= t + history_frames - 1`.
    pub frames: Vec<Tensor<f32>>,
    pub current_rgb: Tensor<f32>,
    pub current_bev: Tensor<f32>,
    /// `(speed, heading, accel)` at the decision frame `t + k`.
    pub ego: [f64; 3],
    /// `(speed, heading, accel)` at the four frames ending at `t + k`, oldest first.
    pub ego_history: [[f64; 3]; 4],
    pub labels: MetaActionSequence,
    pub trajectory: TrajectorySet,
    /// Obstacles in the ego frame of the decision frame.
    pub obstacles: Vec<Obstacle>,
}

impl Sample {
    /// The four history frames the understanding side sees when lagging by `offset` frames.
    pub fn history(&self, stale_frames: usize, history_frames: usize, offset: usize) -> &[Tensor<f32>] {
        let start = stale_frames - offset.min(stale_frames);
        &self.frames[start..start + history_frames]
    }

    pub fn decision_frame(&self) -> usize {
        self.t + self.k
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub seed: u64,
    pub scenario_seeds: Vec<u64>,
    pub samples: Vec<Sample>,
}

/// Latest first-history frame that still leaves room for `k = 5` and three labelled seconds.
fn window_starts(scenario: &Scenario, header: &DatasetHeader) -> std::ops::RangeInclusive<usize> {
    let per_second = header.rate_hz.round() as usize;
    let frames = (scenario.duration() * header.rate_hz + 1e-9).floor() as usize + 1;
    let tail = 5 + HORIZONS * per_second;
    header.stale_frames..=frames.saturating_sub(tail + 1)
}

/// Renders one sample of `scenario` with history starting at frame `t` and current offset `k`.
pub fn make_sample(
    scenario: &Scenario,
    t: usize,
    k: usize,
    header: &DatasetHeader,
    renderer: &Renderer,
    cfg: &SynthConfig,
) -> Result<Sample> {
    let dt = 1.0 / header.rate_hz;
    let time = |f: usize| f as f64 * dt;
    let frames = (t - header.stale_frames..t + header.history_frames)
        .map(|f| renderer.render_rgb(scenario, time(f)))
        .collect();
    let decision = t + k;
    let (current_rgb, current_bev) = renderer.render(scenario, time(decision));
    let now = scenario.state_at(time(decision));
    let trace = scenario.trace();
    let labels = label_meta_actions(&trace, decision, header.rate_hz, cfg)?;
    let mut ego_history = [[0.0; 3]; 4];
    for (i, h) in ego_history.iter_mut().enumerate() {
        *h = scenario.state_at(time(decision) - dt * (3 - i) as f64).vector();
    }
    let obstacles = scenario
        .obstacles
        .iter()
        .map(|o| {
            let p = now.to_ego(o.x, o.y);
            Obstacle {
                x: p[0],
                y: p[1],
                radius: o.radius,
            }
        })
        .collect();
    Ok(Sample {
        scenario_seed: scenario.seed,
        t,
        k,
        frames,
        current_rgb,
        current_bev,
        ego: now.vector(),
        ego_history,
        labels,
        trajectory: ground_truth(scenario, time(decision)),
        obstacles,
    })
}

/// Generates `n_scenarios` scenarios and every admissible sample window of each. A sample is
/// asynchronous with probability `async_fraction`, drawing k uniformly from {4, 5}.
pub fn build_dataset(
    n_scenarios: usize,
    async_fraction: f64,
    seed: u64,
    header: &DatasetHeader,
    cfg: &SynthConfig,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&async_fraction) {
        return Err(Error::Config(format!("async_fraction {async_fraction} outside [0, 1]")));
    }
    let renderer = Renderer::new(header.render_seed, header.width, header.rgb_tokens, header.bev_tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut scenario_seeds = Vec::with_capacity(n_scenarios);
    for _ in 0..n_scenarios {
        let scenario_seed = rng.next_u64();
        scenario_seeds.push(scenario_seed);
        let scenario = generate_scenario(scenario_seed, cfg)?;
        for t in window_starts(&scenario, header) {
            let k = if rng.random_bool(async_fraction) {
                rng.random_range(4..=5)
            } else {
                SYNC_K
            };
            samples.push(make_sample(&scenario, t, k, header, &renderer, cfg)?);
        }
    }
    Ok(Dataset {
        header: header.clone(),
        seed,
        scenario_seeds,
        samples,
    })
}

fn write_tensor(w: &mut impl Write, t: &Tensor<f32>) -> Result<()> {
    for &v in t.data() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read, rows: usize, cols: usize) -> Result<Tensor<f32>> {
    let mut data = vec![0f32; rows * cols];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    Tensor::from_vec(rows, cols, data)
}

fn write_sample(w: &mut impl Write, s: &Sample) -> Result<()> {
    w.write_u64::<LittleEndian>(s.scenario_seed)?;
    w.write_u32::<LittleEndian>(s.t as u32)?;
    w.write_u8(s.k as u8)?;
    for v in s.ego.iter().chain(s.ego_history.iter().flatten()) {
        w.write_f64::<LittleEndian>(*v)?;
    }
    for tok in s.labels.tokens() {
        w.write_u8(tok as u8)?;
    }
    for p in s.trajectory.temporal.iter().chain(&s.trajectory.spatial) {
        w.write_f64::<LittleEndian>(p[0])?;
        w.write_f64::<LittleEndian>(p[1])?;
    }
    w.write_u32::<LittleEndian>(s.obstacles.len() as u32)?;
    for o in &s.obstacles {
        for v in [o.x, o.y, o.radius] {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    for f in s.frames.iter().chain([&s.current_rgb, &s.current_bev]) {
        write_tensor(w, f)?;
    }
    Ok(())
}

fn read_sample(r: &mut impl Read, h: &DatasetHeader) -> Result<Sample> {
    let scenario_seed = r.read_u64::<LittleEndian>()?;
    let t = r.read_u32::<LittleEndian>()? as usize;
    let k = r.read_u8()? as usize;
    let mut ego = [0.0; 3];
    r.read_f64_into::<LittleEndian>(&mut ego)?;
    let mut ego_history = [[0.0; 3]; 4];
    for e in ego_history.iter_mut() {
        r.read_f64_into::<LittleEndian>(e)?;
    }
    let mut tokens = [0u8; DECISION_TOKENS];
    r.read_exact(&mut tokens)?;
    let tokens: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let labels = MetaActionSequence::from_tokens(&tokens)?;
    let mut pts = vec![0.0; 2 * (TEMPORAL_POINTS + SPATIAL_POINTS)];
    r.read_f64_into::<LittleEndian>(&mut pts)?;
    let pt = |i: usize| [pts[2 * i], pts[2 * i + 1]];
    let trajectory = TrajectorySet {
        temporal: (0..TEMPORAL_POINTS).map(pt).collect(),
        spatial: (TEMPORAL_POINTS..TEMPORAL_POINTS + SPATIAL_POINTS).map(pt).collect(),
    };
    let n_obs = r.read_u32::<LittleEndian>()? as usize;
    let mut obstacles = Vec::with_capacity(n_obs);
    for _ in 0..n_obs {
        let mut v = [0.0; 3];
        r.read_f64_into::<LittleEndian>(&mut v)?;
        obstacles.push(Obstacle {
            x: v[0],
            y: v[1],
            radius: v[2],
        });
    }
    let frames = (0..h.stale_frames + h.history_frames)
        .map(|_| read_tensor(r, h.rgb_tokens, h.width))
        .collect::<Result<Vec<_>>>()?;
    let current_rgb = read_tensor(r, h.rgb_tokens, h.width)?;
    let current_bev = read_tensor(r, h.bev_tokens, h.width)?;
    Ok(Sample {
        scenario_seed,
        t,
        k,
        frames,
        current_rgb,
        current_bev,
        ego,
        ego_history,
        labels,
        trajectory,
        obstacles,
    })
}

impl Dataset {
    /// Refuses a dataset whose token layout differs from the one `cfg` would render.
    pub fn check_compatible(&self, cfg: &crate::config::RunConfig) -> Result<()> {
        let expected = cfg.dataset_header();
        if self.header != expected {
            return Err(Error::DigestMismatch {
                expected: format!("{expected:?}"),
                found: format!("{:?}", self.header),
            });
        }
        Ok(())
    }

    /// Serialises to the binary layout: header, then u32 length-prefixed records.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut body = Vec::new();
        for s in &self.samples {
            let mut rec = Vec::new();
            write_sample(&mut rec, s)?;
            body.write_u32::<LittleEndian>(rec.len() as u32)?;
            body.extend_from_slice(&rec);
        }
        let h = &self.header;
        let mut out = Vec::with_capacity(body.len() + 128);
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION)?;
        for v in [
            h.width,
            TEMPORAL_POINTS,
            SPATIAL_POINTS,
            HORIZONS,
            DECISION_TOKENS,
            h.rgb_tokens,
            h.bev_tokens,
            h.history_frames,
            h.stale_frames,
        ] {
            out.write_u32::<LittleEndian>(v as u32)?;
        }
        out.write_f64::<LittleEndian>(h.rate_hz)?;
        out.write_u64::<LittleEndian>(h.render_seed)?;
        out.write_u64::<LittleEndian>(self.seed)?;
        out.write_u32::<LittleEndian>(self.scenario_seeds.len() as u32)?;
        for &s in &self.scenario_seeds {
            out.write_u64::<LittleEndian>(s)?;
        }
        out.extend_from_slice(&Sha256::digest(&body));
        out.write_u32::<LittleEndian>(self.samples.len() as u32)?;
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("dataset version {version}, expected {VERSION}")));
        }
        let mut dims = [0u32; 9];
        r.read_u32_into::<LittleEndian>(&mut dims)?;
        let [width, m, n, horizons, j, rgb_tokens, bev_tokens, history_frames, stale_frames] = dims.map(|v| v as usize);
        if (m, n, horizons, j) != (TEMPORAL_POINTS, SPATIAL_POINTS, HORIZONS, DECISION_TOKENS) {
            return Err(Error::Format(format!(
                "dataset head sizes M={m} N={n} H={horizons} J={j} do not match this build"
            )));
        }
        let rate_hz = r.read_f64::<LittleEndian>()?;
        let render_seed = r.read_u64::<LittleEndian>()?;
        let seed = r.read_u64::<LittleEndian>()?;
        let n_scen = r.read_u32::<LittleEndian>()? as usize;
        let mut scenario_seeds = vec![0u64; n_scen];
        r.read_u64_into::<LittleEndian>(&mut scenario_seeds)?;
        let mut digest = [0u8; 32];
        r.read_exact(&mut digest)?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        if Sha256::digest(r).as_slice() != digest {
            return Err(Error::Format("dataset body digest mismatch".into()));
        }
        let header = DatasetHeader {
            width,
            rgb_tokens,
            bev_tokens,
            history_frames,
            stale_frames,
            rate_hz,
            render_seed,
        };
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()? as usize;
            if r.len() < len {
                return Err(Error::Format("truncated record".into()));
            }
            let (mut rec, rest) = r.split_at(len);
            samples.push(read_sample(&mut rec, &header)?);
            r = rest;
        }
        Ok(Self {
            header,
            seed,
            scenario_seeds,
            samples,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Hex sha256 of the serialised dataset.
    pub fn digest(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_bytes()?)))
    }

    /// Plain-text summary: seeds, counts, k histogram and label histograms.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        let h = &self.header;
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "scenarios = {}", self.scenario_seeds.len());
        let _ = writeln!(out, "samples = {}", self.samples.len());
        let _ = writeln!(
            out,
            "width = {}\nrgb_tokens = {}\nbev_tokens = {}\nhistory_frames = {}\nstale_frames = {}\nrate_hz = {}",
            h.width, h.rgb_tokens, h.bev_tokens, h.history_frames, h.stale_frames, h.rate_hz
        );
        for k in [3, 4, 5] {
            let _ = writeln!(out, "k{k} = {}", self.samples.iter().filter(|s| s.k == k).count());
        }
        let mut lat = [0usize; 5];
        let mut lon = [0usize; 4];
        for s in &self.samples {
            for hz in 0..HORIZONS {
                lat[s.labels.lateral[hz].token()] += 1;
                lon[s.labels.longitudinal[hz].token() - 5] += 1;
            }
        }
        for (l, c) in crate::plan::Lateral::ALL.iter().zip(lat) {
            let _ = writeln!(out, "lateral.{} = {c}", l.name());
        }
        for (l, c) in crate::plan::Longitudinal::ALL.iter().zip(lon) {
            let _ = writeln!(out, "longitudinal.{} = {c}", l.name());
        }
        for s in &self.scenario_seeds {
            let _ = writeln!(out, "scenario_seed = {s}");
        }
        out
    }
}
