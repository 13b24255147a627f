//! Trajectory dataset file: a 32-byte header (`DRFT`, version, dims, dtype)
//! followed by little-endian f32 data `[N_traj, T, C, H, W]`, plus a JSON
//! sidecar holding the generator config, normalization statistics and splits.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::ns::{simulate_trajectory, NsConfig};
use crate::error::{DriftError, Result};
use crate::grid::Field;

pub const MAGIC: &[u8; 4] = b"DRFT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 32;
pub const DTYPE_F32: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub n_traj: u32,
    pub frames: u32,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub dtype: u32,
}

impl Header {
    pub fn payload_len(&self) -> u64 {
        [self.n_traj, self.frames, self.channels, self.height, self.width]
            .iter()
            .map(|&v| v as u64)
            .product::<u64>()
            * 4
    }

    pub fn frame_len(&self) -> usize {
        (self.channels * self.height * self.width) as usize
    }

    fn encode(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        out[..4].copy_from_slice(MAGIC);
        let vals = [VERSION, self.n_traj, self.frames, self.channels, self.height, self.width, self.dtype];
        for (k, v) in vals.iter().enumerate() {
            out[4 + 4 * k..8 + 4 * k].copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn decode(bytes: &[u8; 32]) -> Result<Self> {
        if &bytes[..4] != MAGIC {
            return Err(DriftError::Format(format!("bad magic {:?}, expected \"DRFT\"", &bytes[..4])));
        }
        let u = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes"));
        if u(0) != VERSION {
            return Err(DriftError::Format(format!("dataset version {} is not supported (expected {VERSION})", u(0))));
        }
        let h = Self {
            n_traj: u(1),
            frames: u(2),
            channels: u(3),
            height: u(4),
            width: u(5),
            dtype: u(6),
        };
        if h.dtype != DTYPE_F32 {
            return Err(DriftError::Format(format!("unsupported dtype code {}", h.dtype)));
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Contiguous 80/10/10 split.
    pub fn standard(n: usize) -> Self {
        let n_train = n * 8 / 10;
        let n_val = n / 10;
        Self {
            train: (0..n_train).collect(),
            val: (n_train..n_train + n_val).collect(),
            test: (n_train + n_val..n).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub ns: NsConfig,
    pub channels: Vec<String>,
    /// Computed on the training split only.
    pub stats: ChannelStats,
    pub splits: Splits,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Streams trajectories into a dataset file.
struct Writer {
    out: BufWriter<File>,
    header: Header,
    train: Vec<bool>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    count: f64,
}

impl Writer {
    fn append(&mut self, index: usize, data: &[f32]) -> Result<()> {
        let fl = self.header.frame_len();
        let plane = (self.header.height * self.header.width) as usize;
        if self.train[index] {
            for frame in data.chunks(fl) {
                for (c, chunk) in frame.chunks(plane).enumerate() {
                    for &v in chunk {
                        self.sum[c] += v as f64;
                        self.sum_sq[c] += (v as f64) * (v as f64);
                    }
                }
                self.count += plane as f64;
            }
        }
        for v in data {
            self.out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Generates `n_traj` trajectories into `path` (plus sidecar). Trajectory `i`
/// is a pure function of `(cfg, i)`, so output is deterministic regardless of
/// the number of worker threads.
pub fn generate_dataset(cfg: &NsConfig, n_traj: usize, path: &Path) -> Result<TrajectoryDataset> {
    cfg.validate()?;
    if n_traj == 0 {
        return Err(DriftError::Config("n_traj must be positive".into()));
    }
    let header = Header {
        n_traj: n_traj as u32,
        frames: cfg.frames as u32,
        channels: cfg.channels() as u32,
        height: cfg.n as u32,
        width: cfg.n as u32,
        dtype: DTYPE_F32,
    };
    let splits = Splits::standard(n_traj);
    let mut train = vec![false; n_traj];
    splits.train.iter().for_each(|&i| train[i] = true);
    let c = cfg.channels();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&header.encode())?;
    let writer = Mutex::new(Writer {
        out,
        header,
        train,
        sum: vec![0.0; c],
        sum_sq: vec![0.0; c],
        count: 0.0,
    });
    let chunk = 8usize;
    for start in (0..n_traj).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n_traj)).collect();
        let trajs = simulate_many(cfg, &idx);
        let mut w = writer.lock().expect("writer lock");
        for (i, t) in idx.iter().zip(trajs) {
            w.append(*i, &t?)?;
        }
    }
    let mut w = writer.into_inner().expect("writer lock");
    w.out.flush()?;
    let count = w.count.max(1.0);
    let mean: Vec<f64> = w.sum.iter().map(|s| s / count).collect();
    let std = w
        .sum_sq
        .iter()
        .zip(&mean)
        .map(|(s2, m)| (s2 / count - m * m).max(0.0).sqrt().max(1e-12))
        .collect();
    let mut names = vec!["u_x".to_string(), "u_y".to_string()];
    if cfg.with_vorticity {
        names.push("vorticity".into());
    }
    let sidecar = Sidecar {
        ns: cfg.clone(),
        channels: names,
        stats: ChannelStats { mean, std },
        splits,
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    TrajectoryDataset::open(path)
}

#[cfg(feature = "parallel")]
fn simulate_many(cfg: &NsConfig, idx: &[usize]) -> Vec<Result<Vec<f32>>> {
    use rayon::prelude::*;
    idx.par_iter().map(|&i| simulate_trajectory(cfg, i as u64)).collect()
}

#[cfg(not(feature = "parallel"))]
fn simulate_many(cfg: &NsConfig, idx: &[usize]) -> Vec<Result<Vec<f32>>> {
    idx.iter().map(|&i| simulate_trajectory(cfg, i as u64)).collect()
}

/// Read handle over a dataset file. Frames are read on demand by seeking.
#[derive(Debug)]
pub struct TrajectoryDataset {
    pub path: PathBuf,
    pub header: Header,
    pub meta: Sidecar,
    file: Mutex<File>,
}

impl TrajectoryDataset {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path)?;
        let len = file.metadata()?.len();
        if len < HEADER_LEN {
            return Err(DriftError::Format(format!("file is {len} bytes, shorter than the header")));
        }
        let mut hb = [0u8; 32];
        file.read_exact(&mut hb)?;
        let header = Header::decode(&hb)?;
        let expected = HEADER_LEN + header.payload_len();
        if len != expected {
            return Err(DriftError::Format(format!(
                "size mismatch: header implies {expected} bytes, file has {len}"
            )));
        }
        let meta: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        if meta.stats.mean.len() != header.channels as usize || meta.stats.std.len() != header.channels as usize {
            return Err(DriftError::Format("sidecar statistics do not match channel count".into()));
        }
        Ok(Self {
            path: path.to_path_buf(),
            header,
            meta,
            file: Mutex::new(file),
        })
    }

    pub fn n_traj(&self) -> usize {
        self.header.n_traj as usize
    }

    pub fn frames(&self) -> usize {
        self.header.frames as usize
    }

    pub fn channels(&self) -> usize {
        self.header.channels as usize
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.header.height as usize, self.header.width as usize)
    }

    pub fn split(&self, s: Split) -> &[usize] {
        match s {
            Split::Train => &self.meta.splits.train,
            Split::Val => &self.meta.splits.val,
            Split::Test => &self.meta.splits.test,
        }
    }

    /// Raw f32 values of frame `t` of trajectory `traj`, `[C, H, W]`.
    pub fn read_frame_raw(&self, traj: usize, t: usize) -> Result<Vec<f32>> {
        if traj >= self.n_traj() || t >= self.frames() {
            return Err(DriftError::Shape(format!(
                "frame ({traj}, {t}) out of range ({} x {})",
                self.n_traj(),
                self.frames()
            )));
        }
        let fl = self.header.frame_len();
        let off = HEADER_LEN + ((traj * self.frames() + t) * fl * 4) as u64;
        let mut buf = vec![0u8; fl * 4];
        {
            let mut f = self.file.lock().expect("file lock");
            f.seek(SeekFrom::Start(off))?;
            f.read_exact(&mut buf)?;
        }
        Ok(buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    /// Raw trajectory `[T, C, H, W]`.
    pub fn read_trajectory_raw(&self, traj: usize) -> Result<Field<f32>> {
        let (h, w) = self.grid();
        let mut data = Vec::with_capacity(self.frames() * self.header.frame_len());
        for t in 0..self.frames() {
            data.extend(self.read_frame_raw(traj, t)?);
        }
        Field::new([self.frames(), self.channels(), h, w], data)
    }

    /// Frame normalized by the training statistics, as `[1, C, H, W]` f64.
    pub fn frame(&self, traj: usize, t: usize) -> Result<Field<f64>> {
        let raw = self.read_frame_raw(traj, t)?;
        let (h, w) = self.grid();
        let plane = h * w;
        let s = &self.meta.stats;
        let data = raw
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let c = k / plane;
                (v as f64 - s.mean[c]) / s.std[c]
            })
            .collect();
        Field::new([1, self.channels(), h, w], data)
    }

    /// `(u_t, u_{t+1}, t / T)` for every step of every trajectory in `split`.
    pub fn pairs(&self, split: Split) -> Vec<(usize, usize)> {
        self.split(split)
            .iter()
            .flat_map(|&tr| (0..self.frames() - 1).map(move |t| (tr, t)))
            .collect()
    }

    pub fn lead_time(&self, t: usize) -> f64 {
        t as f64 / self.frames() as f64
    }

    pub fn pair(&self, traj: usize, t: usize) -> Result<(Field<f64>, Field<f64>, f64)> {
        Ok((self.frame(traj, t)?, self.frame(traj, t + 1)?, self.lead_time(t)))
    }
}
