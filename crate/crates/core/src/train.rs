//! Teacher-forced training, closed-loop rollout evaluation, bandwise spectral
//! errors, the ablation harness and checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_lr, AdamW, AdamWConfig, AdamWState, Tape};
use crate::config::sha256_json;
use crate::datagen::{ChannelStats, Split, Splits, TrajectoryDataset};
use crate::error::{DriftError, Result};
use crate::grid::{half_width, multiplicity, rfft2, wavenumber, Field};
use crate::losses::{freq_weighted_loss_on_tape, rel_lp, FreqWeight};
use crate::model::{DriftNet, ForwardOptions, ModelConfig, Variant};
use crate::params::ParamGrads;
use crate::tensor::Tensor;

/// Source of normalized trajectories, one `[1, C, H, W]` frame at a time.
pub trait Trajectories: Sync {
    fn frames(&self) -> usize;
    fn split(&self, s: Split) -> &[usize];
    fn frame(&self, traj: usize, t: usize) -> Result<Field<f64>>;
    /// Per-channel statistics used to map frames back to physical units.
    fn stats(&self) -> Option<&ChannelStats>;

    /// `(traj, t)` for every one-step pair of the split.
    fn pairs(&self, s: Split) -> Vec<(usize, usize)> {
        let n = self.frames();
        self.split(s)
            .iter()
            .flat_map(|&tr| (0..n.saturating_sub(1)).map(move |t| (tr, t)))
            .collect()
    }

    fn lead_time(&self, t: usize) -> f64 {
        t as f64 / self.frames() as f64
    }
}

impl Trajectories for TrajectoryDataset {
    fn frames(&self) -> usize {
        TrajectoryDataset::frames(self)
    }

    fn split(&self, s: Split) -> &[usize] {
        TrajectoryDataset::split(self, s)
    }

    fn frame(&self, traj: usize, t: usize) -> Result<Field<f64>> {
        TrajectoryDataset::frame(self, traj, t)
    }

    fn stats(&self) -> Option<&ChannelStats> {
        Some(&self.meta.stats)
    }
}

/// Trajectories held in memory, already normalized.
#[derive(Clone, Debug)]
pub struct InMemoryTrajectories {
    /// `trajs[k][t]` is a `[1, C, H, W]` frame.
    pub trajs: Vec<Vec<Field<f64>>>,
    pub splits: Splits,
    pub stats: Option<ChannelStats>,
}

impl InMemoryTrajectories {
    pub fn new(trajs: Vec<Vec<Field<f64>>>, splits: Splits) -> Result<Self> {
        let frames = trajs.first().map_or(0, Vec::len);
        if frames < 2 || trajs.iter().any(|t| t.len() != frames) {
            return Err(DriftError::Shape("trajectories need a common length of at least 2".into()));
        }
        Ok(Self {
            trajs,
            splits,
            stats: None,
        })
    }
}

impl Trajectories for InMemoryTrajectories {
    fn frames(&self) -> usize {
        self.trajs[0].len()
    }

    fn split(&self, s: Split) -> &[usize] {
        match s {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    fn frame(&self, traj: usize, t: usize) -> Result<Field<f64>> {
        self.trajs
            .get(traj)
            .and_then(|tr| tr.get(t))
            .cloned()
            .ok_or_else(|| DriftError::Shape(format!("frame ({traj}, {t}) out of range")))
    }

    fn stats(&self) -> Option<&ChannelStats> {
        self.stats.as_ref()
    }
}

/// Maps a normalized field back to physical units.
pub fn denormalize(f: &Field<f64>, stats: Option<&ChannelStats>) -> Field<f64> {
    let Some(s) = stats else {
        return f.clone();
    };
    let [b, c, h, w] = f.dims();
    let mut data = f.data().to_vec();
    for ib in 0..b {
        for ic in 0..c {
            let off = (ib * c + ic) * h * w;
            for v in &mut data[off..off + h * w] {
                *v = *v * s.std[ic] + s.mean[ic];
            }
        }
    }
    Field::new(f.dims(), data).expect("finite input stays finite")
}

#[cfg(feature = "parallel")]
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate of the cosine schedule as a fraction of `lr`.
    pub lr_floor: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip (0 disables).
    pub clip_norm: f64,
    pub p: u32,
    pub freq: FreqWeight,
    pub seed: u64,
    /// Ablation switch; `no-fwl` forces the frequency weight to zero.
    pub variant: Variant,
    /// Cap on training pairs drawn per epoch.
    pub max_pairs: Option<usize>,
    /// Cap on validation pairs.
    pub max_val_pairs: Option<usize>,
    /// Count bin-wise fusion amplitude violations on every forward pass.
    pub debug_amplitude: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            lr_floor: 0.01,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            p: 1,
            freq: FreqWeight::default(),
            seed: 0,
            variant: Variant::Full,
            max_pairs: None,
            max_val_pairs: None,
            debug_amplitude: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DriftError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number");
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return bad("lr_floor must lie in [0, 1]");
        }
        if self.p == 0 {
            return bad("p must be at least 1");
        }
        if self.freq.lambda < 0.0 || self.clip_norm < 0.0 || self.weight_decay < 0.0 {
            return bad("lambda, clip_norm and weight_decay must be non-negative");
        }
        Ok(())
    }

    /// Frequency weighting actually used by the loss.
    pub fn effective_freq(&self) -> FreqWeight {
        let mut f = self.freq;
        if self.variant == Variant::NoFwl {
            f.lambda = 0.0;
        }
        f
    }

    pub fn hash(&self) -> [u8; 32] {
        sha256_json(self)
    }
}

/// Per-epoch metrics. Losses are on normalized fields, relative L1 errors in
/// physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_rel_l1: f64,
    pub val_loss: f64,
    pub val_rel_l1: f64,
    pub lr: f64,
    pub amplitude_violations: usize,
    pub amplitude_bins: usize,
}

/// Training loss and physical rel-L1 of one sample, plus parameter gradients.
struct SampleOut {
    loss: f64,
    rel_l1: f64,
    grads: ParamGrads,
    amplitude: (usize, usize),
}

fn sample_step(
    model: &DriftNet,
    u: &Field<f64>,
    v: &Field<f64>,
    t: f64,
    cfg: &TrainConfig,
    stats: Option<&ChannelStats>,
) -> Result<SampleOut> {
    let mut tape = Tape::new().with_amplitude_checks(cfg.debug_amplitude);
    let x = tape.constant(Tensor::from(u.clone()));
    let pred = model.forward_on_tape(&model.params, &mut tape, x, &[t], &ForwardOptions::train())?;
    let loss = freq_weighted_loss_on_tape(&mut tape, pred, &Tensor::from(v.clone()), &cfg.effective_freq(), cfg.p)?;
    let value = tape.real(loss)?.data()[0];
    if !value.is_finite() {
        return Err(DriftError::NonFinite("training loss".into()));
    }
    let grads = tape.backward(loss)?.params(&model.params);
    let pf = Field::try_from(tape.real(pred)?.clone())?;
    let rel_l1 = rel_lp(&denormalize(&pf, stats), &denormalize(v, stats), 1)?;
    Ok(SampleOut {
        loss: value,
        rel_l1,
        grads,
        amplitude: tape.amplitude_report(),
    })
}

/// Mean loss and physical rel-L1 over `pairs` in evaluation mode.
pub fn evaluate_pairs(
    model: &DriftNet,
    data: &dyn Trajectories,
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let fw = cfg.effective_freq();
    let outs = par_map(pairs, |&(tr, t)| -> Result<(f64, f64)> {
        let u = data.frame(tr, t)?;
        let v = data.frame(tr, t + 1)?;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from(u));
        let pred = model.forward_on_tape(&model.params, &mut tape, x, &[data.lead_time(t)], &ForwardOptions::eval())?;
        let loss = freq_weighted_loss_on_tape(&mut tape, pred, &Tensor::from(v.clone()), &fw, cfg.p)?;
        let pf = Field::try_from(tape.real(pred)?.clone())?;
        let e = rel_lp(&denormalize(&pf, data.stats()), &denormalize(&v, data.stats()), 1)?;
        Ok((tape.real(loss)?.data()[0], e))
    });
    let (mut l, mut e) = (0.0, 0.0);
    for o in outs {
        let (a, b) = o?;
        l += a;
        e += b;
    }
    let n = pairs.len() as f64;
    Ok((l / n, e / n))
}

/// Mean one-step physical rel-L1 over `pairs` in evaluation mode.
pub fn one_step_rel_l1(model: &DriftNet, data: &dyn Trajectories, pairs: &[(usize, usize)]) -> Result<f64> {
    evaluate_pairs(model, data, pairs, &TrainConfig::default()).map(|(_, e)| e)
}

/// Model, optimizer and progress of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: DriftNet,
    pub optimizer: AdamW,
    /// Number of completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
    pub config_hash: [u8; 32],
}

impl Trainer {
    pub fn new(mut model: DriftNet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.config.variant = config.variant;
        let optimizer = AdamW::new(
            AdamWConfig {
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
            &model.params,
        );
        let config_hash = config.hash();
        Ok(Self {
            model,
            optimizer,
            epoch: 0,
            config,
            config_hash,
        })
    }

    /// Continues from a checkpoint. The variant and optimizer settings come
    /// from `config`; a differing config hash is logged.
    pub fn resume(ck: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut t = Self::new(ck.model, config)?;
        if ck.config_hash != t.config_hash {
            log::warn!("checkpoint was written under a different training config");
        }
        if ck.optimizer.m.len() != t.model.params.flat_len() {
            return Err(DriftError::Format("optimizer state does not match parameter count".into()));
        }
        t.optimizer.state = ck.optimizer;
        t.epoch = ck.epoch;
        Ok(t)
    }

    fn epoch_pairs(&self, data: &dyn Trajectories, epoch: usize) -> Vec<(usize, usize)> {
        let mut pairs = data.pairs(Split::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x7261_696e);
        rng.set_stream(epoch as u64);
        pairs.shuffle(&mut rng);
        if let Some(m) = self.config.max_pairs {
            pairs.truncate(m);
        }
        pairs
    }

    pub fn steps_per_epoch(&self, data: &dyn Trajectories) -> usize {
        let mut n = data.pairs(Split::Train).len();
        if let Some(m) = self.config.max_pairs {
            n = n.min(m);
        }
        n.div_ceil(self.config.batch_size)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config_hash,
            epoch: self.epoch,
            model: self.model.clone(),
            optimizer: self.optimizer.state.clone(),
        }
    }

    /// Runs one epoch. When `last_good` is given and a non-finite loss or
    /// gradient shows up, the state before the failing step is saved there and
    /// `Diverged` is returned.
    pub fn train_epoch(&mut self, data: &dyn Trajectories, last_good: Option<&Path>) -> Result<EpochLog> {
        let cfg = self.config.clone();
        let pairs = self.epoch_pairs(data, self.epoch);
        let total = (self.steps_per_epoch(data) * cfg.epochs.max(1)) as u64;
        let (mut loss_sum, mut rel_sum) = (0.0, 0.0);
        let (mut viol, mut bins) = (0, 0);
        let mut lr = cfg.lr;
        for batch in pairs.chunks(cfg.batch_size) {
            let model = &self.model;
            let outs = par_map(batch, |&(tr, t)| -> Result<SampleOut> {
                let u = data.frame(tr, t)?;
                let v = data.frame(tr, t + 1)?;
                sample_step(model, &u, &v, data.lead_time(t), &cfg, data.stats())
            });
            let mut grads = ParamGrads::zeros_like(&self.model.params);
            let mut failure = None;
            let mut batch_loss = 0.0;
            for o in outs {
                match o {
                    Ok(s) => {
                        for (id, g) in s.grads.iter() {
                            grads.accumulate(id, g);
                        }
                        batch_loss += s.loss;
                        rel_sum += s.rel_l1;
                        viol += s.amplitude.0;
                        bins += s.amplitude.1;
                    }
                    Err(e @ DriftError::NonFinite(_)) => failure = Some(e),
                    Err(e) => return Err(e),
                }
            }
            grads.scale(1.0 / batch.len() as f64);
            if failure.is_some() || !grads.all_finite() {
                if let Some(p) = last_good {
                    save_checkpoint(&self.checkpoint(), p)?;
                }
                return Err(DriftError::Diverged(format!(
                    "non-finite loss or gradient in epoch {} at step {}",
                    self.epoch, self.optimizer.state.step
                )));
            }
            loss_sum += batch_loss;
            if cfg.clip_norm > 0.0 {
                let n = grads.global_norm();
                if n > cfg.clip_norm {
                    grads.scale(cfg.clip_norm / n);
                }
            }
            lr = cosine_lr(cfg.lr, self.optimizer.state.step, total, cfg.lr_floor);
            self.optimizer.step(&mut self.model.params, &grads, lr)?;
        }
        let mut val = data.pairs(Split::Val);
        if let Some(m) = cfg.max_val_pairs {
            val.truncate(m);
        }
        let (val_loss, val_rel_l1) = evaluate_pairs(&self.model, data, &val, &cfg)?;
        self.epoch += 1;
        let n = pairs.len().max(1) as f64;
        Ok(EpochLog {
            epoch: self.epoch,
            train_loss: loss_sum / n,
            train_rel_l1: rel_sum / n,
            val_loss,
            val_rel_l1,
            lr,
            amplitude_violations: viol,
            amplitude_bins: bins,
        })
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn run(&mut self, data: &dyn Trajectories, last_good: Option<&Path>) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < self.config.epochs {
            let log = self.train_epoch(data, last_good)?;
            log::info!(
                "epoch {} train {:.5} val {:.5} val rel-L1 {:.4}",
                log.epoch,
                log.train_loss,
                log.val_loss,
                log.val_rel_l1
            );
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Trains a fresh copy of `model` and returns it with the epoch logs.
pub fn train(model: DriftNet, data: &dyn Trajectories, cfg: &TrainConfig) -> Result<(DriftNet, Vec<EpochLog>)> {
    let mut t = Trainer::new(model, cfg.clone())?;
    let logs = t.run(data, None)?;
    Ok((t.model, logs))
}

/// CSV with columns `epoch,split,loss,rel_l1`.
pub fn metrics_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,split,loss,rel_l1\n");
    for l in logs {
        s += &format!("{},train,{},{}\n", l.epoch, l.train_loss, l.train_rel_l1);
        s += &format!("{},val,{},{}\n", l.epoch, l.val_loss, l.val_rel_l1);
    }
    s
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters, optimizer moments and progress of a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub epoch: usize,
    pub model: DriftNet,
    pub optimizer: AdamWState,
}

fn put_f64s(buf: &mut Vec<u8>, v: &[f64]) {
    buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DriftError::Format("checkpoint is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > self.buf.len() / 8 {
            return Err(DriftError::Format("checkpoint array length is implausible".into()));
        }
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&ck.config_hash);
    buf.extend_from_slice(&(ck.epoch as u64).to_le_bytes());
    let json = serde_json::to_vec(&ck.model.config)?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(ck.model.grid.0 as u32).to_le_bytes());
    buf.extend_from_slice(&(ck.model.grid.1 as u32).to_le_bytes());
    put_f64s(&mut buf, &ck.model.params.to_flat());
    buf.extend_from_slice(&ck.optimizer.step.to_le_bytes());
    put_f64s(&mut buf, &ck.optimizer.m);
    put_f64s(&mut buf, &ck.optimizer.v);
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(DriftError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(DriftError::Format(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let epoch = r.u64()? as usize;
    let jl = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(jl)?)?;
    let (h, w) = (r.u32()? as usize, r.u32()? as usize);
    let flat = r.f64s()?;
    let step = r.u64()?;
    let m = r.f64s()?;
    let v = r.f64s()?;
    if r.pos != bytes.len() {
        return Err(DriftError::Format("trailing bytes after checkpoint".into()));
    }
    let mut model = DriftNet::new(config, h, w, 0)?;
    model.params.set_from_flat(&flat)?;
    if m.len() != flat.len() || v.len() != flat.len() {
        return Err(DriftError::Format("optimizer state does not match parameter count".into()));
    }
    Ok(Checkpoint {
        config_hash,
        epoch,
        model,
        optimizer: AdamWState { step, m, v },
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Ordinary least-squares slope of `y` against `1..=n`; 0 for fewer than two points.
pub fn ols_slope(y: &[f64]) -> f64 {
    let n = y.len();
    if n < 2 {
        return 0.0;
    }
    let xm = (n as f64 + 1.0) / 2.0;
    let ym = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (k, &v) in y.iter().enumerate() {
        let dx = (k + 1) as f64 - xm;
        sxy += dx * (v - ym);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Default radial band edges: `[0,4), [4,8), [8,16), [16, inf)`.
pub const DEFAULT_BAND_EDGES: [f64; 3] = [4.0, 8.0, 16.0];
/// Regularizer of the nRMSE denominator.
pub const NRMSE_EPS: f64 = 1e-12;

fn band_of(k: f64, edges: &[f64]) -> usize {
    edges.iter().take_while(|&&e| k >= e).count()
}

/// `[bands][T]` normalized RMS error per radial wavenumber band. Bands with no
/// bins on this grid are NaN.
pub fn bandwise_nrmse(pred: &[Field<f64>], truth: &[Field<f64>], edges: &[f64]) -> Result<Vec<Vec<f64>>> {
    if pred.len() != truth.len() {
        return Err(DriftError::Shape(format!("{} vs {} steps", pred.len(), truth.len())));
    }
    let nb = edges.len() + 1;
    let mut out = vec![Vec::with_capacity(pred.len()); nb];
    let Some(first) = truth.first() else {
        return Ok(out);
    };
    let [_, _, h, w] = first.dims();
    let wf = half_width(w);
    let bands: Vec<usize> = (0..h * wf).map(|k| band_of(wavenumber(k / wf, k % wf, h), edges)).collect();
    let mut counts = vec![0usize; nb];
    bands.iter().for_each(|&b| counts[b] += 1);
    for (j, &c) in counts.iter().enumerate() {
        if c == 0 {
            log::warn!("band {j} has no bins on a {h}x{w} grid");
        }
    }
    for (p, t) in pred.iter().zip(truth) {
        if p.dims() != t.dims() {
            return Err(DriftError::Shape(format!("{:?} vs {:?}", p.dims(), t.dims())));
        }
        let err = Field::new(p.dims(), p.data().iter().zip(t.data()).map(|(a, b)| a - b).collect())?;
        let (es, ts) = (rfft2(&err), rfft2(t));
        let (mut num, mut den) = (vec![0.0; nb], vec![0.0; nb]);
        for (k, (e, u)) in es.data().iter().zip(ts.data()).enumerate() {
            let bin = k % (h * wf);
            let m = multiplicity(bin % wf, w);
            num[bands[bin]] += m * e.norm_sqr();
            den[bands[bin]] += m * u.norm_sqr();
        }
        for j in 0..nb {
            out[j].push(if counts[j] == 0 {
                f64::NAN
            } else {
                (num[j] / (den[j] + NRMSE_EPS)).sqrt()
            });
        }
    }
    Ok(out)
}

/// Closed-loop rollout summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    /// Mean physical rel-L1 at steps `1..=T`.
    pub per_step: Vec<f64>,
    pub final_error: f64,
    pub mean_error: f64,
    pub slope: f64,
    /// `[bands][T]`.
    pub band_nrmse: Vec<Vec<f64>>,
    pub band_edges: Vec<f64>,
    /// Persistence baseline `rel_l1(u_0, u_t)`.
    pub persistence: Vec<f64>,
    /// First step whose state was non-finite, if any.
    pub failure_step: Option<usize>,
}

impl RolloutReport {
    pub fn from_series(
        per_step: Vec<f64>,
        band_nrmse: Vec<Vec<f64>>,
        band_edges: Vec<f64>,
        persistence: Vec<f64>,
        failure_step: Option<usize>,
    ) -> Self {
        let final_error = per_step.last().copied().unwrap_or(f64::NAN);
        let mean_error = if per_step.is_empty() {
            f64::NAN
        } else {
            per_step.iter().sum::<f64>() / per_step.len() as f64
        };
        Self {
            slope: ols_slope(&per_step),
            per_step,
            final_error,
            mean_error,
            band_nrmse,
            band_edges,
            persistence,
            failure_step,
        }
    }

    /// Slope of the top band's nRMSE series.
    pub fn top_band_slope(&self) -> f64 {
        self.band_nrmse.last().map_or(f64::NAN, |b| ols_slope(b))
    }

    /// Rows `step,e_t,persistence,band_0..band_{J-1}`.
    pub fn to_csv(&self) -> String {
        let nb = self.band_nrmse.len();
        let mut s = String::from("step,e_t,persistence");
        for j in 0..nb {
            s += &format!(",band_{j}");
        }
        s.push('\n');
        for (t, e) in self.per_step.iter().enumerate() {
            s += &format!("{},{},{}", t + 1, e, self.persistence.get(t).copied().unwrap_or(f64::NAN));
            for b in &self.band_nrmse {
                s += &format!(",{}", b.get(t).copied().unwrap_or(f64::NAN));
            }
            s.push('\n');
        }
        s
    }
}

/// Autoregressive predictions `u_1..u_T` from `initial` (frame index `t0`).
/// Stops at the first non-finite state and returns its step.
pub fn rollout(
    model: &DriftNet,
    initial: &Field<f64>,
    t0: usize,
    t_star: usize,
    frames: usize,
    opts: &ForwardOptions,
) -> Result<(Vec<Field<f64>>, Option<usize>)> {
    if t_star == 0 {
        return Err(DriftError::Config("rollout length must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(t_star);
    let mut cur = initial.clone();
    for k in 0..t_star {
        let lead = (t0 + k) as f64 / frames as f64;
        match model.forward(&cur, lead, opts) {
            Ok(next) => {
                cur = next.clone();
                out.push(next);
            }
            Err(DriftError::NonFinite(_)) => return Ok((out, Some(k + 1))),
            Err(e) => return Err(e),
        }
    }
    Ok((out, None))
}

/// Per-trajectory series used to build a report.
struct TrajRollout {
    errors: Vec<f64>,
    persistence: Vec<f64>,
    bands: Vec<Vec<f64>>,
    failure: Option<usize>,
}

fn rollout_one(
    model: &DriftNet,
    data: &dyn Trajectories,
    traj: usize,
    t_star: usize,
    edges: &[f64],
    opts: &ForwardOptions,
) -> Result<TrajRollout> {
    let stats = data.stats();
    let u0 = data.frame(traj, 0)?;
    let (preds, failure) = rollout(model, &u0, 0, t_star, data.frames(), opts)?;
    let truth: Vec<Field<f64>> = (1..=t_star)
        .map(|t| data.frame(traj, t).map(|f| denormalize(&f, stats)))
        .collect::<Result<_>>()?;
    let p0 = denormalize(&u0, stats);
    let preds: Vec<Field<f64>> = preds.iter().map(|p| denormalize(p, stats)).collect();
    let errors = preds
        .iter()
        .zip(&truth)
        .map(|(p, t)| rel_lp(p, t, 1))
        .collect::<Result<Vec<_>>>()?;
    let persistence = truth.iter().map(|t| rel_lp(&p0, t, 1)).collect::<Result<Vec<_>>>()?;
    let bands = bandwise_nrmse(&preds, &truth[..preds.len()], edges)?;
    Ok(TrajRollout {
        errors,
        persistence,
        bands,
        failure,
    })
}

/// Test-mean rollout report over the trajectories of `split`, starting at
/// frame 0. Steps after a failure are averaged over surviving trajectories.
pub fn evaluate_rollouts(
    model: &DriftNet,
    data: &dyn Trajectories,
    split: Split,
    t_star: usize,
    edges: &[f64],
) -> Result<RolloutReport> {
    if t_star == 0 || t_star >= data.frames() {
        return Err(DriftError::Config(format!(
            "rollout length must lie in 1..{} for this dataset",
            data.frames()
        )));
    }
    let trajs = data.split(split).to_vec();
    if trajs.is_empty() {
        return Err(DriftError::Config(format!("split {} is empty", split.name())));
    }
    let opts = ForwardOptions::eval();
    let runs = par_map(&trajs, |&tr| rollout_one(model, data, tr, t_star, edges, &opts))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let nb = edges.len() + 1;
    let mut per_step = Vec::new();
    let mut bands = vec![Vec::new(); nb];
    let mut failure = None;
    for t in 0..t_star {
        let alive: Vec<&TrajRollout> = runs.iter().filter(|r| r.errors.len() > t).collect();
        if alive.is_empty() {
            break;
        }
        let n = alive.len() as f64;
        per_step.push(alive.iter().map(|r| r.errors[t]).sum::<f64>() / n);
        for (j, b) in bands.iter_mut().enumerate() {
            b.push(alive.iter().map(|r| r.bands[j][t]).sum::<f64>() / n);
        }
    }
    for r in &runs {
        if let Some(f) = r.failure {
            failure = Some(failure.map_or(f, |g: usize| g.min(f)));
        }
    }
    let n = runs.len() as f64;
    let persistence = (0..t_star)
        .map(|t| runs.iter().map(|r| r.persistence[t]).sum::<f64>() / n)
        .collect();
    Ok(RolloutReport::from_series(per_step, bands, edges.to_vec(), persistence, failure))
}

/// One trained variant/seed of the ablation study.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub final_rel_l1: f64,
    pub mean_rel_l1: f64,
    pub top_band_slope: f64,
    pub report: RolloutReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationTable {
    pub fn median_final(&self, variant: Variant) -> f64 {
        median(self.rows.iter().filter(|r| r.variant == variant).map(|r| r.final_rel_l1).collect())
    }

    pub fn median_top_slope(&self, variant: Variant) -> f64 {
        median(self.rows.iter().filter(|r| r.variant == variant).map(|r| r.top_band_slope).collect())
    }

    /// Rows `variant,seed,final_rel_l1,mean_rel_l1,top_band_slope`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,final_rel_l1,mean_rel_l1,top_band_slope\n");
        for r in &self.rows {
            s += &format!(
                "{},{},{},{},{}\n",
                r.variant.name(),
                r.seed,
                r.final_rel_l1,
                r.mean_rel_l1,
                r.top_band_slope
            );
        }
        s
    }
}

/// Trains every variant for every seed under the same budget and evaluates
/// closed-loop rollouts of length `t_star` on the test split.
pub fn ablation_suite(
    data: &dyn Trajectories,
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    t_star: usize,
    edges: &[f64],
) -> Result<AblationTable> {
    let (h, w) = {
        let f = data.frame(data.split(Split::Train)[0], 0)?;
        (f.height(), f.width())
    };
    let mut rows = Vec::new();
    for &seed in seeds {
        for &variant in variants {
            let model = DriftNet::new(model_cfg.clone(), h, w, seed)?;
            let cfg = TrainConfig {
                seed,
                variant,
                ..base.clone()
            };
            let (trained, _) = train(model, data, &cfg)?;
            let report = evaluate_rollouts(&trained, data, Split::Test, t_star, edges)?;
            log::info!(
                "{} seed {seed}: final rel-L1 {:.4}, top-band slope {:.5}",
                variant.name(),
                report.final_error,
                report.top_band_slope()
            );
            rows.push(AblationRow {
                variant,
                seed,
                final_rel_l1: report.final_error,
                mean_rel_l1: report.mean_error,
                top_band_slope: report.top_band_slope(),
                report,
            });
        }
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::f64::consts::TAU;

    fn tiny() -> ModelConfig {
        ModelConfig {
            in_channels: 2,
            width: 8,
            levels: 2,
            blocks_per_level: 1,
            bands: 4,
            cond_hidden: 4,
            ..ModelConfig::default()
        }
    }

    /// Smooth random fields advected one cell per frame along columns.
    fn advection(n_traj: usize, frames: usize, n: usize, seed: u64) -> InMemoryTrajectories {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajs = (0..n_traj)
            .map(|_| {
                let modes: Vec<(usize, f64, f64, f64)> = (0..6)
                    .map(|_| {
                        (
                            rng.random_range(0..2),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(0.0..TAU),
                            rng.random_range(1.0..4.0f64).floor(),
                        )
                    })
                    .collect();
                let u0 = Field::from_fn([1, 2, n, n], |_, c, i, j| {
                    modes
                        .iter()
                        .filter(|m| m.0 == c)
                        .map(|&(_, a, ph, k)| a * (TAU * k * (i as f64 + 2.0 * j as f64) / n as f64 + ph).cos())
                        .sum::<f64>()
                        + 0.1
                })
                .unwrap();
                (0..frames).map(|t| u0.roll(0, t)).collect()
            })
            .collect();
        InMemoryTrajectories::new(trajs, Splits::standard(n_traj)).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            lr: 3e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ols_slope_of_a_line() {
        let y: Vec<f64> = (1..=10).map(|t| 0.5 + 0.2 * t as f64).collect();
        assert!((ols_slope(&y) - 0.2).abs() < 1e-14);
        assert_eq!(ols_slope(&[3.0]), 0.0);
        assert_eq!(ols_slope(&[1.0, 1.0, 1.0]), 0.0);
    }

    #[test]
    fn bandwise_error_cases() {
        let n = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let truth: Vec<Field<f64>> = (0..3)
            .map(|_| Field::from_fn([1, 2, n, n], |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap())
            .collect();
        let zero = bandwise_nrmse(&truth, &truth, &DEFAULT_BAND_EDGES).unwrap();
        assert_eq!(zero.len(), 4);
        assert!(zero.iter().flatten().all(|&v| v == 0.0));

        // A mode at |k| = 10 lands in band 2 only.
        let bump = |f: &Field<f64>| {
            Field::new(
                f.dims(),
                f.data()
                    .iter()
                    .enumerate()
                    .map(|(p, v)| v + 0.3 * (TAU * 10.0 * ((p % (n * n)) % n) as f64 / n as f64).sin())
                    .collect(),
            )
            .unwrap()
        };
        let pred: Vec<_> = truth.iter().map(bump).collect();
        let e = bandwise_nrmse(&pred, &truth, &DEFAULT_BAND_EDGES).unwrap();
        for (j, band) in e.iter().enumerate() {
            for &v in band {
                assert_eq!(v > 1e-9, j == 2, "band {j}: {v}");
            }
        }

        // Random pair against a loop over the full (unreduced) spectrum.
        let pred: Vec<Field<f64>> = (0..3)
            .map(|_| Field::from_fn([1, 2, n, n], |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap())
            .collect();
        let got = bandwise_nrmse(&pred, &truth, &DEFAULT_BAND_EDGES).unwrap();
        for t in 0..3 {
            let (mut num, mut den) = ([0.0; 4], [0.0; 4]);
            for c in 0..2 {
                for kr in 0..n {
                    for kc in 0..n {
                        let (mut e, mut u) = (rustfft::num_complex::Complex64::new(0.0, 0.0), rustfft::num_complex::Complex64::new(0.0, 0.0));
                        for i in 0..n {
                            for j in 0..n {
                                let ph = rustfft::num_complex::Complex64::from_polar(
                                    1.0 / (n * n) as f64,
                                    -TAU * ((kr * i) as f64 / n as f64 + (kc * j) as f64 / n as f64),
                                );
                                e += ph * (pred[t].at(0, c, i, j) - truth[t].at(0, c, i, j));
                                u += ph * truth[t].at(0, c, i, j);
                            }
                        }
                        let fr = if kr <= n / 2 { kr as f64 } else { kr as f64 - n as f64 };
                        let fc = if kc <= n / 2 { kc as f64 } else { kc as f64 - n as f64 };
                        let b = band_of((fr * fr + fc * fc).sqrt(), &DEFAULT_BAND_EDGES);
                        num[b] += e.norm_sqr();
                        den[b] += u.norm_sqr();
                    }
                }
            }
            for b in 0..4 {
                let want = (num[b] / (den[b] + NRMSE_EPS)).sqrt();
                assert!((got[b][t] - want).abs() < 1e-5 * want.max(1.0), "band {b} step {t}");
            }
        }
        assert!(bandwise_nrmse(&pred[..2], &truth, &DEFAULT_BAND_EDGES).is_err());
    }

    #[test]
    fn empty_band_is_nan() {
        let f = vec![Field::from_fn([1, 1, 8, 8], |_, _, i, j| (i + j) as f64).unwrap()];
        let e = bandwise_nrmse(&f, &f, &DEFAULT_BAND_EDGES).unwrap();
        assert!(e[3][0].is_nan());
        assert!(!e[0][0].is_nan());
    }

    #[test]
    fn rollout_report_fields() {
        let data = advection(10, 6, 16, 1);
        let model = DriftNet::new(tiny(), 16, 16, 0).unwrap();
        let r = evaluate_rollouts(&model, &data, Split::Test, 4, &DEFAULT_BAND_EDGES).unwrap();
        assert_eq!(r.per_step.len(), 4);
        assert_eq!(r.final_error, *r.per_step.last().unwrap());
        assert_eq!(r.slope, ols_slope(&r.per_step));
        assert_eq!(r.band_nrmse.len(), 4);
        // Persistence baseline against a direct computation.
        let tr = data.split(Split::Test)[0];
        for t in 0..4 {
            let direct = rel_lp(&data.frame(tr, 0).unwrap(), &data.frame(tr, t + 1).unwrap(), 1).unwrap();
            assert!((r.persistence[t] - direct).abs() < 1e-15);
        }
        // One-step rollout equals the one-step validation error.
        let one = evaluate_rollouts(&model, &data, Split::Test, 1, &DEFAULT_BAND_EDGES).unwrap();
        assert_eq!(one.final_error, one.mean_error);
        let pairs: Vec<(usize, usize)> = data.split(Split::Test).iter().map(|&tr| (tr, 0)).collect();
        let val = one_step_rel_l1(&model, &data, &pairs).unwrap();
        assert!((one.final_error - val).abs() < 1e-14);
        assert!(r.to_csv().starts_with("step,e_t,persistence,band_0,band_1,band_2,band_3\n"));
        assert!(evaluate_rollouts(&model, &data, Split::Test, 6, &DEFAULT_BAND_EDGES).is_err());
        assert!(evaluate_rollouts(&model, &data, Split::Test, 0, &DEFAULT_BAND_EDGES).is_err());
    }

    #[test]
    fn rollout_stops_at_non_finite_state() {
        let mut model = DriftNet::new(tiny(), 16, 16, 0).unwrap();
        model.params.set_flat(3, f64::NAN);
        let u = Field::from_fn([1, 2, 16, 16], |_, c, i, j| (c + i * j) as f64 * 0.01).unwrap();
        let (out, fail) = rollout(&model, &u, 0, 5, 10, &ForwardOptions::eval()).unwrap();
        assert!(out.is_empty());
        assert_eq!(fail, Some(1));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = advection(10, 4, 16, 2);
        let model = DriftNet::new(tiny(), 16, 16, 0).unwrap();
        let before = model.params.to_flat();
        let c = TrainConfig { lr: 0.0, epochs: 1, ..cfg() };
        let (trained, logs) = train(model, &data, &c).unwrap();
        assert_eq!(trained.params.to_flat(), before);
        assert_eq!(logs.len(), 1);
    }

    #[test]
    fn no_fwl_equals_zero_lambda() {
        let data = advection(10, 4, 16, 3);
        let model = DriftNet::new(tiny(), 16, 16, 0).unwrap();
        let a = TrainConfig { variant: Variant::NoFwl, epochs: 1, ..cfg() };
        let b = TrainConfig {
            freq: FreqWeight { lambda: 0.0, ..FreqWeight::default() },
            epochs: 1,
            ..cfg()
        };
        let (ma, la) = train(model.clone(), &data, &a).unwrap();
        let (mb, lb) = train(model, &data, &b).unwrap();
        assert_eq!(la[0].train_loss.to_bits(), lb[0].train_loss.to_bits());
        assert_eq!(la[0].val_loss.to_bits(), lb[0].val_loss.to_bits());
        assert_eq!(ma.params.to_flat(), mb.params.to_flat());
    }

    #[test]
    fn training_is_deterministic_and_improves_on_advection() {
        let data = advection(10, 6, 16, 4);
        let model = DriftNet::new(tiny(), 16, 16, 0).unwrap();
        let val = data.pairs(Split::Val);
        let init = one_step_rel_l1(&model, &data, &val).unwrap();
        let c = TrainConfig { epochs: 1, ..cfg() };
        let (m1, l1) = train(model.clone(), &data, &c).unwrap();
        let (m2, l2) = train(model, &data, &c).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(m1.params.to_flat(), m2.params.to_flat());
        let after = one_step_rel_l1(&m1, &data, &val).unwrap();
        assert!(after < init, "val rel-L1 {init} -> {after}");
        let csv = metrics_csv(&l1);
        assert!(csv.starts_with("epoch,split,loss,rel_l1\n1,train,"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ck");
        let data = advection(10, 4, 16, 5);
        let mut t = Trainer::new(DriftNet::new(tiny(), 16, 16, 7).unwrap(), TrainConfig { epochs: 1, ..cfg() }).unwrap();
        t.run(&data, None).unwrap();
        save_checkpoint(&t.checkpoint(), &path).unwrap();
        assert!(!path.with_extension("tmp").exists());
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.epoch, 1);
        assert_eq!(back.config_hash, t.config_hash);
        assert_eq!(back.optimizer, t.optimizer.state);
        let a: Vec<u64> = back.model.params.to_flat().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = t.model.params.to_flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        let u = data.frame(0, 0).unwrap();
        let opts = ForwardOptions::eval();
        assert_eq!(back.model.forward(&u, 0.25, &opts).unwrap(), t.model.forward(&u, 0.25, &opts).unwrap());

        let good = encode_checkpoint(&t.checkpoint()).unwrap();
        let mut bad = good.clone();
        bad[1] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(DriftError::Format(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(DriftError::Format(_))));
        assert!(decode_checkpoint(&good[..good.len() - 1]).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ck");
        let data = advection(10, 4, 16, 6);
        let model = DriftNet::new(tiny(), 16, 16, 1).unwrap();
        let c = cfg();
        let mut full = Trainer::new(model.clone(), c.clone()).unwrap();
        let full_logs = full.run(&data, None).unwrap();

        let mut first = Trainer::new(model, c.clone()).unwrap();
        let l1 = first.train_epoch(&data, None).unwrap();
        save_checkpoint(&first.checkpoint(), &path).unwrap();
        let mut resumed = Trainer::resume(load_checkpoint(&path).unwrap(), c).unwrap();
        let rest = resumed.run(&data, None).unwrap();
        assert_eq!(rest.len(), 1);
        assert_eq!(vec![l1, rest[0].clone()], full_logs);
        assert_eq!(resumed.model.params.to_flat(), full.model.params.to_flat());
        assert_eq!(resumed.optimizer.state, full.optimizer.state);
    }

    #[test]
    fn non_finite_loss_saves_last_good() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("last_good.ck");
        let data = advection(10, 4, 16, 7);
        let mut model = DriftNet::new(tiny(), 16, 16, 0).unwrap();
        model.params.set_flat(3, f64::NAN);
        let mut t = Trainer::new(model, cfg()).unwrap();
        let bits = |v: Vec<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let before = bits(t.model.params.to_flat());
        let r = t.train_epoch(&data, Some(&path));
        assert!(matches!(r, Err(DriftError::Diverged(_))), "{r:?}");
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(bits(ck.model.params.to_flat()), before);
        assert_eq!(ck.optimizer.step, 0);
    }

    #[test]
    fn config_validation_and_denormalize() {
        assert!(TrainConfig { batch_size: 0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..cfg() }.validate().is_err());
        assert!(TrainConfig { p: 0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { lr_floor: 1.5, ..cfg() }.validate().is_err());
        assert_ne!(cfg().hash(), TrainConfig { seed: 1, ..cfg() }.hash());
        let f = Field::from_fn([1, 2, 2, 2], |_, c, _, _| c as f64).unwrap();
        let s = ChannelStats {
            mean: vec![1.0, -1.0],
            std: vec![2.0, 3.0],
        };
        let d = denormalize(&f, Some(&s));
        assert_eq!(d.plane(0, 0), &[1.0; 4]);
        assert_eq!(d.plane(0, 1), &[2.0; 4]);
        assert_eq!(denormalize(&f, None), f);
    }
}
