//! Network assembly: embed, encoder DRIFT blocks with patch merging, decoder
//! ConvNeXt blocks with patch expansion and additive skips, recover.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{DriftError, Result};
use crate::grid::{Field, RowIndexing};
use crate::image::{time_cond_norm, TcnVars};
use crate::params::{normal, uniform, ParamId, ParamKind, ParamStore};
use crate::spectral::{
    spectral_path_on_tape, BandLayout, FeatureMode, GateMode, GateVars, LowMask, Mode, SpectralConfig, SpectralRun,
    SpectralVars,
};
use crate::tensor::Tensor;

/// Architecture variants of the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    /// Spectral path removed (`y_spec = 0`).
    NoLfm,
    /// Gate replaced by the hard low-rectangle indicator.
    NoRg,
    /// Full network trained without the frequency-weighted loss term.
    NoFwl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoLfm, Variant::NoRg, Variant::NoFwl];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLfm => "no-lfm",
            Variant::NoRg => "no-rg",
            Variant::NoFwl => "no-fwl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "full" => Ok(Variant::Full),
            "no-lfm" => Ok(Variant::NoLfm),
            "no-rg" => Ok(Variant::NoRg),
            "no-fwl" => Ok(Variant::NoFwl),
            other => Err(DriftError::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Channel width at full resolution; doubles at every downsample.
    pub width: usize,
    pub levels: usize,
    pub blocks_per_level: usize,
    pub bands: usize,
    pub kernel_size: usize,
    /// Hidden width of the lead-time conditioning net.
    pub cond_hidden: usize,
    pub feature_mode: FeatureMode,
    pub rows: RowIndexing,
    pub spectral_eps: f64,
    pub norm_eps: f64,
    pub layer_scale_init: f64,
    /// Inference-only outer-band taper strength (0 disables).
    pub taper_beta: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            width: 32,
            levels: 3,
            blocks_per_level: 2,
            bands: 8,
            kernel_size: 3,
            cond_hidden: 16,
            feature_mode: FeatureMode::EnergyFraction,
            rows: RowIndexing::Symmetric,
            spectral_eps: 1e-8,
            norm_eps: 1e-5,
            layer_scale_init: 1e-2,
            taper_beta: 0.1,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DriftError::Config(m.to_string()));
        if self.in_channels == 0 || self.width == 0 {
            return bad("in_channels and width must be positive");
        }
        if self.levels == 0 || self.blocks_per_level == 0 {
            return bad("levels and blocks_per_level must be positive");
        }
        if self.bands == 0 {
            return bad("bands must be positive");
        }
        if self.kernel_size % 2 == 0 {
            return bad("kernel_size must be odd");
        }
        if self.cond_hidden == 0 {
            return bad("cond_hidden must be positive");
        }
        if !(0.0..=0.5).contains(&self.taper_beta) {
            return bad("taper_beta must lie in [0, 0.5]");
        }
        Ok(())
    }

    pub fn spectral(&self) -> SpectralConfig {
        SpectralConfig {
            bands: self.bands,
            feature_mode: self.feature_mode,
            eps: self.spectral_eps,
            rows: self.rows,
        }
    }

    pub fn level_width(&self, level: usize) -> usize {
        self.width << level
    }

    /// Grid sides must be divisible by this and stay even at the coarsest level.
    pub fn grid_multiple(&self) -> usize {
        2 << (self.levels - 1)
    }

    fn tcn_count(&self, c: usize) -> usize {
        let h = self.cond_hidden;
        2 * c + 2 * h + 2 * c * h + 2 * c
    }

    fn drift_count(&self, c: usize) -> usize {
        let j = self.bands;
        let k2 = self.kernel_size * self.kernel_size;
        let spectral = 2 + 2 * c * c + 4 * j * j + 3 * j;
        let local = c * k2 + c * c + c;
        spectral + local + self.tcn_count(c) + c
    }

    fn convnext_count(&self, c: usize) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        c * k2 + self.tcn_count(c) + (4 * c * c + 4 * c) + (4 * c * c + c) + c
    }

    /// Exact number of scalar parameters, from the configuration alone.
    pub fn param_count(&self) -> usize {
        let (cin, c0, l, n) = (self.in_channels, self.width, self.levels, self.blocks_per_level);
        let mut total = (c0 * cin + c0) + (cin * c0 + cin);
        for lev in 0..l {
            let c = self.level_width(lev);
            total += n * self.drift_count(c);
            if lev + 1 < l {
                total += 8 * c * c + 2 * c; // down: 4C -> 2C
                total += 8 * c * c + 4 * c; // up: 2C -> 4C
                total += n * self.convnext_count(c);
            }
        }
        total
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TcnIds {
    pub gain: ParamId,
    pub bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DriftIds {
    pub theta: ParamId,
    pub mixer: ParamId,
    pub gate_w1: ParamId,
    pub gate_b1: ParamId,
    pub gate_w2: ParamId,
    pub gate_b2: ParamId,
    pub dw: ParamId,
    pub pw_w: ParamId,
    pub pw_b: ParamId,
    pub norm: TcnIds,
    pub scale: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvNextIds {
    pub dw: ParamId,
    pub norm: TcnIds,
    pub pw1_w: ParamId,
    pub pw1_b: ParamId,
    pub pw2_w: ParamId,
    pub pw2_b: ParamId,
    pub scale: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

/// Parameter handles of the whole network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetIds {
    pub embed: LinearIds,
    pub recover: LinearIds,
    /// `encoder[level][block]`, including the bottom level.
    pub encoder: Vec<Vec<DriftIds>>,
    pub down: Vec<LinearIds>,
    pub up: Vec<LinearIds>,
    /// `decoder[level][block]` for levels `0..L-1`.
    pub decoder: Vec<Vec<ConvNextIds>>,
}

/// Evaluation switches for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Treat gate values as constants.
    pub detach_gate: bool,
    /// Apply the outer-band taper (eval mode only).
    pub taper: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            detach_gate: false,
            taper: false,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            detach_gate: false,
            taper: true,
        }
    }
}

/// A parameterized network.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftNet {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub ids: NetIds,
    /// Grid the gate biases were initialized for.
    pub grid: (usize, usize),
}

fn ortho_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while q.len() < cols {
        let mut v = normal(rng, &[rows], 1.0).into_data();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|a| *a /= n);
            q.push(v);
        }
    }
    q
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
    cfg: &'a ModelConfig,
}

impl Builder<'_> {
    fn add(&mut self, name: String, kind: ParamKind, t: Tensor) -> ParamId {
        self.store.add(name, kind, t)
    }

    fn tcn(&mut self, p: &str, c: usize) -> TcnIds {
        let h = self.cfg.cond_hidden;
        TcnIds {
            gain: self.add(format!("{p}.norm.gain"), ParamKind::NoDecay, Tensor::filled(&[c], 1.0)),
            bias: self.add(format!("{p}.norm.bias"), ParamKind::NoDecay, Tensor::zeros(&[c])),
            w1: {
                let t = normal(self.rng, &[h, 1], 1.0);
                self.add(format!("{p}.norm.cond.w1"), ParamKind::Weight, t)
            },
            b1: {
                let t = uniform(self.rng, &[h], 1.0);
                self.add(format!("{p}.norm.cond.b1"), ParamKind::NoDecay, t)
            },
            w2: self.add(format!("{p}.norm.cond.w2"), ParamKind::Weight, Tensor::zeros(&[2 * c, h])),
            b2: self.add(format!("{p}.norm.cond.b2"), ParamKind::NoDecay, Tensor::zeros(&[2 * c])),
        }
    }

    fn drift(&mut self, p: &str, c: usize, grid: (usize, usize)) -> Result<DriftIds> {
        let j = self.cfg.bands;
        let ks = self.cfg.kernel_size;
        let mask = LowMask::default();
        let layout = BandLayout::new(grid.0, grid.1, j, self.cfg.rows)?;
        let cover = layout.coverage(&mask.indicator(grid.0, grid.1, self.cfg.rows));
        let b2 = Tensor::new(vec![j], cover.iter().map(|&f| if f > 0.5 { 2.0 } else { -2.0 }).collect())?;
        let mut mixer = Tensor::zeros(&[c, c, 2]);
        for i in 0..c {
            mixer.data_mut()[(i * c + i) * 2] = 1.0;
        }
        let theta = self.add(format!("{p}.mask.theta"), ParamKind::StraightThrough, Tensor::zeros(&[2]));
        let mixer = self.add(format!("{p}.mixer"), ParamKind::Weight, mixer);
        let gw1 = normal(self.rng, &[2 * j, j], 1.0 / (j as f64).sqrt());
        let gate_w1 = self.add(format!("{p}.gate.w1"), ParamKind::Weight, gw1);
        let gate_b1 = self.add(format!("{p}.gate.b1"), ParamKind::NoDecay, Tensor::zeros(&[2 * j]));
        let gw2 = normal(self.rng, &[j, 2 * j], 0.01);
        let gate_w2 = self.add(format!("{p}.gate.w2"), ParamKind::Weight, gw2);
        let gate_b2 = self.add(format!("{p}.gate.b2"), ParamKind::NoDecay, b2);
        let dwk = normal(self.rng, &[c, ks, ks], 1.0 / ks as f64);
        let dw = self.add(format!("{p}.local.dw"), ParamKind::Weight, dwk);
        let pw = normal(self.rng, &[c, c], 1.0 / (c as f64).sqrt());
        let pw_w = self.add(format!("{p}.local.pw.w"), ParamKind::Weight, pw);
        let pw_b = self.add(format!("{p}.local.pw.b"), ParamKind::NoDecay, Tensor::zeros(&[c]));
        let norm = self.tcn(p, c);
        let ls = Tensor::filled(&[c], self.cfg.layer_scale_init);
        let scale = self.add(format!("{p}.scale"), ParamKind::NoDecay, ls);
        Ok(DriftIds {
            theta,
            mixer,
            gate_w1,
            gate_b1,
            gate_w2,
            gate_b2,
            dw,
            pw_w,
            pw_b,
            norm,
            scale,
        })
    }

    fn convnext(&mut self, p: &str, c: usize) -> ConvNextIds {
        let ks = self.cfg.kernel_size;
        let dwk = normal(self.rng, &[c, ks, ks], 1.0 / ks as f64);
        let dw = self.add(format!("{p}.dw"), ParamKind::Weight, dwk);
        let norm = self.tcn(p, c);
        let w1 = normal(self.rng, &[4 * c, c], 1.0 / (c as f64).sqrt());
        let pw1_w = self.add(format!("{p}.pw1.w"), ParamKind::Weight, w1);
        let pw1_b = self.add(format!("{p}.pw1.b"), ParamKind::NoDecay, Tensor::zeros(&[4 * c]));
        let w2 = normal(self.rng, &[c, 4 * c], 1.0 / (4.0 * c as f64).sqrt());
        let pw2_w = self.add(format!("{p}.pw2.w"), ParamKind::Weight, w2);
        let pw2_b = self.add(format!("{p}.pw2.b"), ParamKind::NoDecay, Tensor::zeros(&[c]));
        let ls = Tensor::filled(&[c], self.cfg.layer_scale_init);
        let scale = self.add(format!("{p}.scale"), ParamKind::NoDecay, ls);
        ConvNextIds {
            dw,
            norm,
            pw1_w,
            pw1_b,
            pw2_w,
            pw2_b,
            scale,
        }
    }

    fn linear(&mut self, p: &str, out: usize, inp: usize, std: f64) -> LinearIds {
        let w = normal(self.rng, &[out, inp], std);
        LinearIds {
            w: self.add(format!("{p}.w"), ParamKind::Weight, w),
            b: self.add(format!("{p}.b"), ParamKind::NoDecay, Tensor::zeros(&[out])),
        }
    }
}

impl DriftNet {
    /// Seeded initialization for an `h x w` grid, starting close to the
    /// identity map on its input.
    pub fn new(config: ModelConfig, h: usize, w: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let m = config.grid_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(DriftError::Shape(format!(
                "grid {h}x{w} must be divisible by {m} for {} levels",
                config.levels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
            cfg: &config,
        };
        let (cin, c0) = (config.in_channels, config.width);
        let q = ortho_columns(b.rng, c0.max(cin), cin.min(c0));
        // Embed = Q (C0 x Cin), Recover = Q^T; both orthonormal when C0 >= Cin.
        let mut ew = Tensor::zeros(&[c0, cin]);
        let mut rw = Tensor::zeros(&[cin, c0]);
        for (col, v) in q.iter().enumerate() {
            for (row, &x) in v.iter().enumerate() {
                if c0 >= cin {
                    ew.data_mut()[row * cin + col] = x;
                    rw.data_mut()[col * c0 + row] = x;
                } else {
                    ew.data_mut()[col * cin + row] = x;
                    rw.data_mut()[row * c0 + col] = x;
                }
            }
        }
        let embed = LinearIds {
            w: b.add("embed.w".into(), ParamKind::Weight, ew),
            b: b.add("embed.b".into(), ParamKind::NoDecay, Tensor::zeros(&[c0])),
        };
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for lev in 0..config.levels {
            let c = config.level_width(lev);
            let grid = (h >> lev, w >> lev);
            let blocks = (0..config.blocks_per_level)
                .map(|k| b.drift(&format!("enc{lev}.drift{k}"), c, grid))
                .collect::<Result<Vec<_>>>()?;
            encoder.push(blocks);
            if lev + 1 < config.levels {
                down.push(b.linear(&format!("down{lev}"), 2 * c, 4 * c, 1.0 / (4.0 * c as f64).sqrt()));
            }
        }
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for lev in 0..config.levels - 1 {
            let c = config.level_width(lev);
            let std = config.layer_scale_init / (2.0 * c as f64).sqrt();
            up.push(b.linear(&format!("up{lev}"), 4 * c, 2 * c, std));
            decoder.push(
                (0..config.blocks_per_level)
                    .map(|k| b.convnext(&format!("dec{lev}.convnext{k}"), c))
                    .collect(),
            );
        }
        let recover = LinearIds {
            w: b.add("recover.w".into(), ParamKind::Weight, rw),
            b: b.add("recover.b".into(), ParamKind::NoDecay, Tensor::zeros(&[cin])),
        };
        let params = b.store;
        debug_assert_eq!(params.flat_len(), config.param_count());
        Ok(Self {
            config,
            params,
            ids: NetIds {
                embed,
                recover,
                encoder,
                down,
                up,
                decoder,
            },
            grid: (h, w),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.flat_len()
    }

    fn spectral_run(&self, opts: &ForwardOptions) -> SpectralRun {
        let taper = opts.taper && opts.mode == Mode::Eval && self.config.taper_beta > 0.0;
        SpectralRun {
            gate_mode: if self.config.variant == Variant::NoRg {
                GateMode::HardIndicator
            } else {
                GateMode::Learned
            },
            detach_gate: opts.detach_gate,
            taper_beta: taper.then_some(self.config.taper_beta),
            mode: opts.mode,
        }
    }

    fn tcn_vars(tape: &mut Tape, store: &ParamStore, ids: &TcnIds) -> TcnVars {
        TcnVars {
            gain: tape.param(store, ids.gain),
            bias: tape.param(store, ids.bias),
            w1: tape.param(store, ids.w1),
            b1: tape.param(store, ids.b1),
            w2: tape.param(store, ids.w2),
            b2: tape.param(store, ids.b2),
        }
    }

    /// Spectral path handles of a DRIFT block.
    pub fn spectral_vars(tape: &mut Tape, store: &ParamStore, ids: &DriftIds) -> SpectralVars {
        SpectralVars {
            theta: tape.param(store, ids.theta),
            mixer: tape.param(store, ids.mixer),
            gate: GateVars {
                w1: tape.param(store, ids.gate_w1),
                b1: tape.param(store, ids.gate_b1),
                w2: tape.param(store, ids.gate_w2),
                b2: tape.param(store, ids.gate_b2),
            },
        }
    }

    /// `x + scale * Norm(y_spec + y_local, t)`.
    pub fn drift_block_on_tape(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        ids: &DriftIds,
        x: Var,
        t: Var,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let dw = tape.param(store, ids.dw);
        let conv = tape.dwconv(x, dw)?;
        let pw_w = tape.param(store, ids.pw_w);
        let pw_b = tape.param(store, ids.pw_b);
        let lin = tape.pointwise(x, pw_w, Some(pw_b))?;
        let mut inner = tape.add(conv, lin)?;
        if self.config.variant != Variant::NoLfm {
            let sv = Self::spectral_vars(tape, store, ids);
            let tr = spectral_path_on_tape(tape, x, sv, &self.config.spectral(), &self.spectral_run(opts))?;
            inner = tape.add(tr.output, inner)?;
        }
        let nv = Self::tcn_vars(tape, store, &ids.norm);
        let z = time_cond_norm(tape, inner, t, nv, self.config.norm_eps)?;
        let s = tape.param(store, ids.scale);
        let z = tape.channel_scale(z, s)?;
        tape.add(x, z)
    }

    /// `x + scale * pw2(GELU(pw1(Norm(dwconv(x), t))))`.
    pub fn convnext_block_on_tape(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        ids: &ConvNextIds,
        x: Var,
        t: Var,
    ) -> Result<Var> {
        let dw = tape.param(store, ids.dw);
        let y = tape.dwconv(x, dw)?;
        let nv = Self::tcn_vars(tape, store, &ids.norm);
        let y = time_cond_norm(tape, y, t, nv, self.config.norm_eps)?;
        let (w1, b1) = (tape.param(store, ids.pw1_w), tape.param(store, ids.pw1_b));
        let y = tape.pointwise(y, w1, Some(b1))?;
        let y = tape.gelu(y)?;
        let (w2, b2) = (tape.param(store, ids.pw2_w), tape.param(store, ids.pw2_b));
        let y = tape.pointwise(y, w2, Some(b2))?;
        let s = tape.param(store, ids.scale);
        let y = tape.channel_scale(y, s)?;
        tape.add(x, y)
    }

    fn linear_on_tape(tape: &mut Tape, store: &ParamStore, ids: &LinearIds, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(store, ids.w), tape.param(store, ids.b));
        tape.pointwise(x, w, Some(b))
    }

    /// Lead-time node `[B, 1]`.
    pub fn time_input(tape: &mut Tape, t: &[f64]) -> Result<Var> {
        Ok(tape.constant(Tensor::new(vec![t.len(), 1], t.to_vec())?))
    }

    /// Records the full network on `tape` using parameters from `store`.
    /// `t` holds one normalized lead time per sample.
    pub fn forward_on_tape(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: Var,
        t: &[f64],
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let [b, c, h, w] = tape.real(x)?.dims4()?;
        if c != self.config.in_channels {
            return Err(DriftError::Shape(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let m = self.config.grid_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(DriftError::Shape(format!("grid {h}x{w} is not divisible by {m}")));
        }
        if t.len() != b {
            return Err(DriftError::Shape(format!("{} lead times for batch of {b}", t.len())));
        }
        let tv = Self::time_input(tape, t)?;
        let ids = &self.ids;
        let mut hcur = Self::linear_on_tape(tape, store, &ids.embed, x)?;
        let mut skips = Vec::new();
        let levels = self.config.levels;
        for lev in 0..levels {
            for blk in &ids.encoder[lev] {
                hcur = self.drift_block_on_tape(store, tape, blk, hcur, tv, opts)?;
            }
            if lev + 1 < levels {
                skips.push(hcur);
                hcur = tape.pixel_unshuffle(hcur)?;
                hcur = Self::linear_on_tape(tape, store, &ids.down[lev], hcur)?;
            }
        }
        for lev in (0..levels - 1).rev() {
            hcur = Self::linear_on_tape(tape, store, &ids.up[lev], hcur)?;
            hcur = tape.pixel_shuffle(hcur)?;
            hcur = tape.add(hcur, skips[lev])?;
            for blk in &ids.decoder[lev] {
                hcur = self.convnext_block_on_tape(store, tape, blk, hcur, tv)?;
            }
        }
        Self::linear_on_tape(tape, store, &ids.recover, hcur)
    }

    /// One-step prediction for a batch with lead time `t` for every sample.
    pub fn forward(&self, u: &Field<f64>, t: f64, opts: &ForwardOptions) -> Result<Field<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from(u.clone()));
        let y = self.forward_on_tape(&self.params, &mut tape, x, &vec![t; u.batch()], opts)?;
        Field::try_from(tape.real(y)?.clone())
    }

    /// Same network with a different architecture variant (parameters shared).
    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut out = self.clone();
        out.config.variant = variant;
        out
    }

    /// Every DRIFT block handle with its level.
    pub fn drift_blocks(&self) -> Vec<(usize, DriftIds)> {
        self.ids
            .encoder
            .iter()
            .enumerate()
            .flat_map(|(l, v)| v.iter().map(move |b| (l, *b)))
            .collect()
    }

    /// Current low mask of a block.
    pub fn mask_of(&self, ids: &DriftIds) -> LowMask {
        let th = self.params.get(ids.theta).data();
        LowMask::new(th[0], th[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, OpKind};
    use rand::{Rng, SeedableRng};

    fn random_field(seed: u64, dims: [usize; 4]) -> Field<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn micro(width: usize, levels: usize) -> ModelConfig {
        ModelConfig {
            in_channels: 2,
            width,
            levels,
            blocks_per_level: 1,
            bands: 4,
            cond_hidden: 4,
            ..ModelConfig::default()
        }
    }

    /// Moves every trainable parameter to a generic point so no gradient is
    /// accidentally tiny.
    fn jitter(net: &mut DriftNet, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in net.params.ids().collect::<Vec<_>>() {
            if net.params.entry(id).kind == ParamKind::StraightThrough {
                continue;
            }
            for v in net.params.get_mut(id).data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }

    fn zero(net: &mut DriftNet, id: ParamId) {
        net.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn param_count_closed_form() {
        for cfg in [
            ModelConfig::default(),
            micro(4, 2),
            ModelConfig {
                kernel_size: 5,
                levels: 1,
                ..micro(6, 1)
            },
            ModelConfig {
                in_channels: 5,
                width: 3,
                blocks_per_level: 3,
                ..micro(3, 3)
            },
        ] {
            let m = cfg.grid_multiple() * 2;
            let net = DriftNet::new(cfg.clone(), m, m, 0).unwrap();
            assert_eq!(net.param_count(), cfg.param_count());
        }
    }

    #[test]
    fn construction_errors() {
        assert!(DriftNet::new(ModelConfig::default(), 60, 64, 0).is_err());
        assert!(DriftNet::new(ModelConfig { kernel_size: 4, ..micro(4, 2) }, 16, 16, 0).is_err());
        let net = DriftNet::new(micro(4, 2), 16, 16, 0).unwrap();
        let opts = ForwardOptions::train();
        assert!(net.forward(&random_field(0, [1, 3, 16, 16]), 0.0, &opts).is_err());
        assert!(net.forward(&random_field(0, [1, 2, 18, 16]), 0.0, &opts).is_err());
        assert!(Variant::parse("no_rg").unwrap() == Variant::NoRg && Variant::parse("x").is_err());
    }

    #[test]
    fn shape_contract_and_near_identity_at_init() {
        let net = DriftNet::new(ModelConfig::default(), 64, 64, 1).unwrap();
        let u = random_field(2, [1, 2, 64, 64]);
        let y = net.forward(&u, 0.5, &ForwardOptions::train()).unwrap();
        assert_eq!(y.dims(), [1, 2, 64, 64]);
        let rel = dist(y.data(), u.data()) / dist(u.data(), &vec![0.0; u.data().len()]);
        assert!(rel < 0.1, "relative departure from identity {rel}");
    }

    #[test]
    fn deterministic_initialization() {
        let a = DriftNet::new(micro(4, 2), 16, 16, 9).unwrap();
        let b = DriftNet::new(micro(4, 2), 16, 16, 9).unwrap();
        let c = DriftNet::new(micro(4, 2), 16, 16, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params.to_flat(), c.params.to_flat());
    }

    fn run_block(net: &DriftNet, x: &Field<f64>) -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::from(x.clone()));
        let t = DriftNet::time_input(&mut tape, &vec![0.3; x.batch()]).unwrap();
        let ids = net.ids.encoder[0][0];
        let y = net.drift_block_on_tape(&net.params, &mut tape, &ids, xv, t, &ForwardOptions::train()).unwrap();
        tape.real(y).unwrap().data().to_vec()
    }

    #[test]
    fn drift_block_zero_inner_params_is_identity() {
        let mut net = DriftNet::new(ModelConfig { width: 4, ..micro(4, 1) }, 8, 8, 3).unwrap();
        let ids = net.ids.encoder[0][0];
        for id in [ids.mixer, ids.dw, ids.pw_w, ids.pw_b, ids.norm.gain, ids.norm.bias, ids.norm.w2, ids.norm.b2] {
            zero(&mut net, id);
        }
        let x = Field::from_fn([2, 4, 8, 8], |b, c, i, j| ((b + 2 * c + 3 * i + 5 * j) as f64).sin()).unwrap();
        assert!(run_block(&net, &x) == x.data());
    }

    #[test]
    fn blocks_map_zero_to_zero() {
        let net = DriftNet::new(micro(4, 2), 16, 16, 4).unwrap();
        let x = Field::zeros([1, 4, 16, 16]).unwrap();
        assert!(run_block(&net, &x).iter().all(|&v| v == 0.0));
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::from(x));
        let t = DriftNet::time_input(&mut tape, &[0.0]).unwrap();
        let y = net.convnext_block_on_tape(&net.params, &mut tape, &net.ids.decoder[0][0], xv, t).unwrap();
        assert!(tape.real(y).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convnext_zero_output_weights_is_identity() {
        let mut net = DriftNet::new(micro(4, 2), 16, 16, 5).unwrap();
        let ids = net.ids.decoder[0][0];
        zero(&mut net, ids.pw2_w);
        zero(&mut net, ids.pw2_b);
        let x = random_field(6, [1, 4, 16, 16]);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::from(x.clone()));
        let t = DriftNet::time_input(&mut tape, &[0.2]).unwrap();
        let y = net.convnext_block_on_tape(&net.params, &mut tape, &ids, xv, t).unwrap();
        assert!(tape.real(y).unwrap().data() == x.data());
    }

    #[test]
    fn variants_change_the_graph() {
        let net = DriftNet::new(micro(4, 2), 16, 16, 7).unwrap();
        let u = random_field(8, [1, 2, 16, 16]);
        let record = |n: &DriftNet| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from(u.clone()));
            let y = n.forward_on_tape(&n.params, &mut tape, x, &[0.0], &ForwardOptions::train()).unwrap();
            (tape.ops().collect::<Vec<_>>(), tape.real(y).unwrap().data().to_vec())
        };
        let (full_ops, full) = record(&net);
        let (lfm_ops, lfm) = record(&net.with_variant(Variant::NoLfm));
        let (rg_ops, rg) = record(&net.with_variant(Variant::NoRg));
        let (_, fwl) = record(&net.with_variant(Variant::NoFwl));
        assert!(full_ops.contains(&OpKind::Rfft2) && !lfm_ops.contains(&OpKind::Rfft2));
        assert!(full_ops.contains(&OpKind::BandFeatures) && !rg_ops.contains(&OpKind::BandFeatures));
        assert!(rg_ops.contains(&OpKind::Fuse));
        assert_eq!(full, fwl);
        assert_ne!(full, lfm);
        assert_ne!(full, rg);
    }

    #[test]
    fn eval_taper_only_in_eval_mode() {
        let net = DriftNet::new(micro(4, 2), 16, 16, 11).unwrap();
        let u = random_field(12, [1, 2, 16, 16]);
        let tr = net.forward(&u, 0.0, &ForwardOptions::train()).unwrap();
        let ev = net.forward(&u, 0.0, &ForwardOptions::eval()).unwrap();
        let no_taper = net.forward(&u, 0.0, &ForwardOptions { taper: false, ..ForwardOptions::eval() }).unwrap();
        assert_eq!(tr, no_taper);
        assert_ne!(tr, ev);
        let bad = ForwardOptions {
            taper: true,
            ..ForwardOptions::train()
        };
        // The taper flag is ignored outside eval mode.
        assert_eq!(net.forward(&u, 0.0, &bad).unwrap(), tr);
    }

    #[test]
    fn drift_block_gradients_match_finite_differences() {
        let mut net = DriftNet::new(ModelConfig { width: 4, ..micro(4, 1) }, 8, 8, 13).unwrap();
        jitter(&mut net, 16);
        let x = random_field(14, [1, 4, 8, 8]);
        let target = random_field(15, [1, 4, 8, 8]);
        let ids = net.ids.encoder[0][0];
        let report = grad_check(
            &net.params,
            |store, tape| {
                let xv = tape.constant(Tensor::from(x.clone()));
                let t = DriftNet::time_input(tape, &[0.4])?;
                let y = net.drift_block_on_tape(store, tape, &ids, xv, t, &ForwardOptions::train())?;
                tape.rel_lp(y, &Tensor::from(target.clone()), 2)
            },
            1e-5,
            Some(6),
        )
        .unwrap();
        let worst = report.worst().unwrap();
        assert!(worst.max_rel_err < 1e-4, "{} {:.3e}", worst.name, worst.max_rel_err);
    }
}
