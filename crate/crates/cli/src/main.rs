//! `driftnet` command-line driver.
//!
//! Every subcommand reads an optional TOML config, applies flag overrides,
//! writes the resolved config into its output directory and exits with 0 on
//! success, 1 on a failed check and 2 on usage or configuration errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use driftnet::config::{hex, RunConfig};
use driftnet::datagen::{generate_dataset, NsConfig, NsSolver, Split, TrajectoryDataset};
use driftnet::grid::radial_spectrum;
use driftnet::theory::{
    bench_block, fusion_bin_check, gronwall_from_rollouts, lipschitz_report, model_throughput, sobolev_defect_bound,
    LipschitzOptions,
};
use driftnet::train::{
    ablation_suite, denormalize, evaluate_rollouts, load_checkpoint, metrics_csv, rollout, save_checkpoint, Trainer,
    Trajectories,
};
use driftnet::{DriftError, DriftNet, Field, ForwardOptions, Variant};

#[derive(Parser)]
#[command(name = "driftnet", version, about = "Train and evaluate dual-branch spectral neural operators on 2D flows")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set model.width=16` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset file.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate Kolmogorov-flow trajectories into a dataset file.
    GenerateData {
        #[command(flatten)]
        common: Common,
        /// Solver preset: turbulent or smooth.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        n_traj: Option<usize>,
        /// Grid side.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train a model with teacher forcing.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        /// Ablation variant: full, no-lfm, no-rg or no-fwl.
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed epochs without changing the schedule.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Count fusion amplitude violations on every forward pass.
        #[arg(long)]
        debug_amplitude: bool,
    },
    /// Closed-loop rollouts on the test split.
    Rollout {
        #[command(flatten)]
        common: Common,
        /// Checkpoint(s); a second one adds a side-by-side comparison.
        #[arg(long, required = true, num_args = 1..=2)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Radial energy spectra of targets and rollout predictions.
    AnalyzeSpectrum {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Stability diagnostics: per-block gain bounds, fusion amplitude, error envelopes.
    VerifyBounds {
        #[command(flatten)]
        common: Common,
        /// Trained model to check (default: a fresh initialization).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Force every gate value to this number in the fusion check.
        #[arg(long, value_name = "ALPHA")]
        inject_gate_fault: Option<f64>,
        /// Linearization points per block.
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        fusion_bins: Option<usize>,
        /// Grid side for a fresh model.
        #[arg(long, default_value_t = 64)]
        n: usize,
    },
    /// Per-block timing against grid size and full-model throughput.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated grid sides.
        #[arg(long, value_delimiter = ',')]
        grids: Option<Vec<usize>>,
        #[arg(long)]
        iters: Option<usize>,
        /// Grid side for the throughput measurement.
        #[arg(long, default_value_t = 64)]
        n: usize,
    },
    /// Train every ablation variant for several seeds and compare rollouts.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

/// Error carrying the process exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<DriftError> for Failure {
    fn from(e: DriftError) -> Self {
        let code = match &e {
            DriftError::Config(_) | DriftError::Serde(_) | DriftError::Format(_) | DriftError::Io(_) => 2,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

fn check_failed(msg: impl Into<String>) -> Failure {
    Failure { code: 1, msg: msg.into() }
}

type Out<T> = Result<T, Failure>;

fn set_key(root: &mut toml::Table, key: &str, raw: &str) -> Out<()> {
    let value = raw
        .parse::<toml::Value>()
        .ok()
        .or_else(|| toml::from_str::<toml::Table>(&format!("v = {raw}")).ok().and_then(|mut t| t.remove("v")))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| usage(format!("empty key in --set {key}")))?;
    let mut table = root;
    for p in parts {
        table = table
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| usage(format!("--set {key}: {p} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn load_config(common: &Common, edit: impl FnOnce(&mut toml::Table) -> Out<()>) -> Out<RunConfig> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut table: toml::Table = text.parse().map_err(|e| usage(format!("config: {e}")))?;
    if let Some(seed) = common.seed {
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    if let Some(d) = &common.dataset {
        set_key(&mut table, "paths.dataset", &toml::Value::String(d.display().to_string()).to_string())?;
    }
    if let Some(o) = &common.out {
        set_key(&mut table, "paths.out_dir", &toml::Value::String(o.display().to_string()).to_string())?;
    }
    edit(&mut table)?;
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv}")))?;
        set_key(&mut table, k.trim(), v.trim())?;
    }
    // A preset replaces the solver defaults before explicit [ns] keys apply.
    let preset = table
        .get("data")
        .and_then(|d| d.get("preset"))
        .and_then(|p| p.as_str())
        .map(str::to_string);
    let mut cfg: RunConfig = RunConfig::from_toml(&table.to_string())?;
    if let Some(name) = preset {
        let mut ns = toml::Table::try_from(NsConfig::preset(&name)?).map_err(|e| usage(e.to_string()))?;
        if let Some(explicit) = table.get("ns").and_then(|v| v.as_table()) {
            for (k, v) in explicit {
                ns.insert(k.clone(), v.clone());
            }
        }
        cfg.ns = ns.try_into().map_err(|e: toml::de::Error| usage(format!("[ns]: {e}")))?;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn lit<T: ToString>(v: T) -> String {
    v.to_string()
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn write(path: &Path, text: &str) -> Out<()> {
    std::fs::write(path, text).map_err(|e| Failure {
        code: 1,
        msg: format!("cannot write {}: {e}", path.display()),
    })
}

fn open_dataset(cfg: &RunConfig) -> Out<TrajectoryDataset> {
    let p = &cfg.paths.dataset;
    if !p.exists() {
        return Err(usage(format!("dataset {} not found (run generate-data first)", p.display())));
    }
    Ok(TrajectoryDataset::open(p)?)
}

fn prepare_out(cfg: &RunConfig) -> Out<PathBuf> {
    let dir = cfg.paths.out_dir.clone();
    cfg.write_into(&dir)?;
    Ok(dir)
}

fn load_model(path: &Path, cfg: &RunConfig) -> Out<DriftNet> {
    let ck = load_checkpoint(path)?;
    if ck.config_hash != cfg.train.hash() {
        log::warn!(
            "{} was trained under a different config (hash {}); proceeding",
            path.display(),
            &hex(&ck.config_hash)[..12]
        );
    }
    Ok(ck.model)
}

fn rollout_steps(requested: Option<usize>, cfg: &RunConfig, data: &TrajectoryDataset) -> Out<usize> {
    let max = data.frames() - 1;
    let t = requested.or(cfg.rollout.steps).unwrap_or(max);
    if t == 0 || t > max {
        return Err(usage(format!("rollout steps must lie in 1..={max} for this dataset, got {t}")));
    }
    Ok(t)
}

fn pct(x: f64) -> String {
    format!("{:.3}%", 100.0 * x)
}

fn cmd_generate(common: Common, preset: Option<String>, n_traj: Option<usize>, n: Option<usize>, frames: Option<usize>) -> Out<()> {
    let cfg = load_config(&common, |t| {
        if let Some(p) = &preset {
            set_key(t, "data.preset", &quoted(p))?;
        }
        if let Some(v) = n_traj {
            set_key(t, "data.n_traj", &lit(v))?;
        }
        if let Some(v) = n {
            set_key(t, "ns.n", &lit(v))?;
        }
        if let Some(v) = frames {
            set_key(t, "ns.frames", &lit(v))?;
        }
        Ok(())
    })?;
    let out = prepare_out(&cfg)?;
    if let Some(parent) = cfg.paths.dataset.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(DriftError::from)?;
    }
    let t0 = Instant::now();
    let data = generate_dataset(&cfg.ns, cfg.data.n_traj, &cfg.paths.dataset)?;
    let size = std::fs::metadata(&data.path).map_err(DriftError::from)?.len();
    println!(
        "wrote {} ({} trajectories x {} frames, {}x{}, {:.1} MB) in {:.1}s",
        data.path.display(),
        data.n_traj(),
        data.frames(),
        cfg.ns.n,
        cfg.ns.n,
        size as f64 / 1e6,
        t0.elapsed().as_secs_f64()
    );
    // Solver sanity: viscous decay of a shear mode against the exact rate.
    let s = NsSolver::new(cfg.ns.n, cfg.ns.viscosity.max(1e-3), cfg.ns.dt, 0, 0.0);
    let n = cfg.ns.n;
    let w0: Vec<f64> = (0..n * n)
        .map(|p| (2.0 * std::f64::consts::TAU * (p % n) as f64 / n as f64).cos())
        .collect();
    let w = s.inverse(&s.advance(&s.forward(&w0), 100)?);
    let decay = (-s.viscosity * 4.0 * s.dt * 100.0).exp();
    let err = w.iter().zip(&w0).map(|(a, b)| (a - decay * b).abs()).fold(0.0, f64::max);
    println!("solver check: shear-mode decay error {err:.2e}");
    println!("stats: mean {:?} std {:?}", data.meta.stats.mean, data.meta.stats.std);
    println!("config: {}", out.join("config.toml").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    common: Common,
    epochs: Option<usize>,
    ablation: Option<String>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    resume: bool,
    stop_after: Option<usize>,
    debug_amplitude: bool,
) -> Out<()> {
    if let Some(a) = &ablation {
        Variant::parse(a)?;
    }
    let cfg = load_config(&common, |t| {
        if let Some(v) = epochs {
            set_key(t, "train.epochs", &lit(v))?;
        }
        if let Some(a) = &ablation {
            set_key(t, "train.variant", &quoted(Variant::parse(a)?.name()))?;
        }
        if let Some(v) = lr {
            set_key(t, "train.lr", &format!("{v:?}"))?;
        }
        if let Some(v) = batch_size {
            set_key(t, "train.batch_size", &lit(v))?;
        }
        if debug_amplitude {
            set_key(t, "train.debug_amplitude", "true")?;
        }
        Ok(())
    })?;
    let data = open_dataset(&cfg)?;
    let out = prepare_out(&cfg)?;
    let ck_path = out.join("checkpoint.drck");
    let metrics_path = out.join("metrics.csv");
    let mut trainer = if resume {
        if !ck_path.exists() {
            return Err(usage(format!("--resume: {} not found", ck_path.display())));
        }
        Trainer::resume(load_checkpoint(&ck_path)?, cfg.train.clone())?
    } else {
        let (h, w) = data.grid();
        if data.channels() != cfg.model.in_channels {
            return Err(usage(format!(
                "model.in_channels = {} but the dataset has {} channels",
                cfg.model.in_channels,
                data.channels()
            )));
        }
        Trainer::new(DriftNet::new(cfg.model.clone(), h, w, cfg.seed)?, cfg.train.clone())?
    };
    println!(
        "{} parameters, variant {}, {} steps per epoch",
        trainer.model.param_count(),
        cfg.train.variant.name(),
        trainer.steps_per_epoch(&data)
    );
    let mut csv = if resume && metrics_path.exists() {
        std::fs::read_to_string(&metrics_path).map_err(DriftError::from)?
    } else {
        metrics_csv(&[])
    };
    let stop = stop_after.unwrap_or(usize::MAX).min(cfg.train.epochs);
    let last_good = out.join("last_good.drck");
    let (mut viol, mut bins) = (0usize, 0usize);
    while trainer.epoch < stop {
        let log = match trainer.train_epoch(&data, Some(&last_good)) {
            Ok(l) => l,
            Err(e @ DriftError::Diverged(_)) => {
                write(&metrics_path, &csv)?;
                return Err(check_failed(format!("{e}; last good state saved to {}", last_good.display())));
            }
            Err(e) => return Err(e.into()),
        };
        let row = metrics_csv(std::slice::from_ref(&log));
        csv += row.split_once('\n').map_or("", |(_, rows)| rows);
        viol += log.amplitude_violations;
        bins += log.amplitude_bins;
        println!(
            "epoch {:>3}  train loss {:.5}  val loss {:.5}  val rel-L1 {}  lr {:.2e}",
            log.epoch,
            log.train_loss,
            log.val_loss,
            pct(log.val_rel_l1),
            log.lr
        );
        write(&metrics_path, &csv)?;
    }
    save_checkpoint(&trainer.checkpoint(), &ck_path)?;
    write(&metrics_path, &csv)?;
    println!("checkpoint: {} (epoch {})", ck_path.display(), trainer.epoch);
    if cfg.train.debug_amplitude {
        println!("fusion amplitude: {viol} violations over {bins} bins");
        if viol > 0 {
            return Err(check_failed("fusion amplitude violations during training"));
        }
    }
    Ok(())
}

fn cmd_rollout(common: Common, checkpoints: Vec<PathBuf>, steps: Option<usize>) -> Out<()> {
    let cfg = load_config(&common, |_| Ok(()))?;
    let data = open_dataset(&cfg)?;
    let t_star = rollout_steps(steps, &cfg, &data)?;
    let out = prepare_out(&cfg)?;
    let mut reports = Vec::new();
    for (k, p) in checkpoints.iter().enumerate() {
        let model = load_model(p, &cfg)?;
        let r = evaluate_rollouts(&model, &data, Split::Test, t_star, &cfg.rollout.band_edges)?;
        let name = if checkpoints.len() == 1 {
            "rollout.csv".to_string()
        } else {
            format!("rollout_{k}.csv")
        };
        write(&out.join(&name), &r.to_csv())?;
        println!(
            "{}: final rel-L1 {} at step {t_star}, mean {}, slope {:.3e}/step, persistence {}{}",
            p.display(),
            pct(r.final_error),
            pct(r.mean_error),
            r.slope,
            pct(*r.persistence.last().unwrap_or(&f64::NAN)),
            r.failure_step.map(|s| format!(", non-finite from step {s}")).unwrap_or_default()
        );
        reports.push(r);
    }
    if let [a, b] = &reports[..] {
        let mut s = String::from("step,e_a,e_b,persistence\n");
        for t in 0..t_star {
            let g = |v: &Vec<f64>| v.get(t).copied().unwrap_or(f64::NAN);
            s += &format!("{},{},{},{}\n", t + 1, g(&a.per_step), g(&b.per_step), g(&a.persistence));
        }
        write(&out.join("compare.csv"), &s)?;
    }
    println!("wrote rollout CSVs to {}", out.display());
    Ok(())
}

fn mean_spectrum(fields: &[Field<f64>]) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    for f in fields {
        let e = radial_spectrum(f);
        acc.resize(acc.len().max(e.len()), 0.0);
        acc.iter_mut().zip(&e).for_each(|(a, b)| *a += b);
    }
    acc.iter().map(|v| v / fields.len().max(1) as f64).collect()
}

fn cmd_spectrum(common: Common, checkpoint: Option<PathBuf>, steps: Option<usize>) -> Out<()> {
    let cfg = load_config(&common, |_| Ok(()))?;
    let data = open_dataset(&cfg)?;
    let t_star = rollout_steps(steps, &cfg, &data)?;
    let out = prepare_out(&cfg)?;
    let stats = data.stats();
    let trajs = data.split(Split::Test).to_vec();
    let initial: Vec<Field<f64>> = trajs
        .iter()
        .map(|&tr| data.frame(tr, 0).map(|f| denormalize(&f, stats)))
        .collect::<Result<_, _>>()?;
    let truth: Vec<Field<f64>> = trajs
        .iter()
        .map(|&tr| data.frame(tr, t_star).map(|f| denormalize(&f, stats)))
        .collect::<Result<_, _>>()?;
    let mut columns = vec![("initial", mean_spectrum(&initial)), ("target", mean_spectrum(&truth))];
    if let Some(p) = &checkpoint {
        let model = load_model(p, &cfg)?;
        let mut preds = Vec::new();
        for &tr in &trajs {
            let (states, fail) = rollout(&model, &data.frame(tr, 0)?, 0, t_star, data.frames(), &ForwardOptions::eval())?;
            match (fail, states.last()) {
                (None, Some(last)) => preds.push(denormalize(last, stats)),
                _ => log::warn!("trajectory {tr} went non-finite; left out of the spectrum"),
            }
        }
        columns.push(("prediction", mean_spectrum(&preds)));
    }
    let len = columns.iter().map(|c| c.1.len()).max().unwrap_or(0);
    let mut s = String::from("k");
    for (name, _) in &columns {
        s += &format!(",{name}");
    }
    s.push('\n');
    for k in 0..len {
        s += &k.to_string();
        for (_, v) in &columns {
            s += &format!(",{}", v.get(k).copied().unwrap_or(0.0));
        }
        s.push('\n');
    }
    write(&out.join("spectrum.csv"), &s)?;
    let tail = |v: &[f64]| v.iter().skip(len / 2).sum::<f64>() / v.iter().sum::<f64>();
    for (name, v) in &columns {
        println!("{name:>10}: energy {:.4e}, fraction above k={} {:.3e}", v.iter().sum::<f64>(), len / 2, tail(v));
    }
    println!("wrote {}", out.join("spectrum.csv").display());
    Ok(())
}

fn cmd_verify(
    common: Common,
    checkpoint: Option<PathBuf>,
    inject: Option<f64>,
    points: Option<usize>,
    fusion_bins: Option<usize>,
    n: usize,
) -> Out<()> {
    let cfg = load_config(&common, |t| {
        if let Some(v) = points {
            set_key(t, "theory.points", &lit(v))?;
        }
        if let Some(v) = fusion_bins {
            set_key(t, "theory.fusion_bins", &lit(v))?;
        }
        Ok(())
    })?;
    let out = prepare_out(&cfg)?;
    let th = &cfg.theory;
    let model = match &checkpoint {
        Some(p) => load_model(p, &cfg)?,
        None => DriftNet::new(cfg.model.clone(), n, n, cfg.seed)?,
    };
    let mut hard = Vec::new();

    let opts = LipschitzOptions {
        points: th.points,
        iters: th.power_iters,
        tol: th.power_tol,
        seed: cfg.seed,
        ..LipschitzOptions::default()
    };
    let rep = lipschitz_report(&model, &opts, th.a_attn, th.a_mlp)?;
    write(&out.join("lipschitz.csv"), &rep.to_csv())?;
    println!("{:<12} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9}", "block", "sigma_lf", "rho_w", "k_conv", "k_lin", "bound", "measured");
    for b in &rep.blocks {
        let c = &b.components;
        println!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>9.4}{}",
            b.name,
            c.sigma_lf,
            c.rho_w,
            c.k_conv,
            c.k_lin,
            b.bound,
            b.measured_core,
            if b.violation { "  VIOLATION" } else { "" }
        );
    }
    println!(
        "cumulative: prod(1+bound) {:.4e}, prod(1+measured) {:.4e}, reference stack {:.4e}",
        rep.cumulative.bound_product, rep.cumulative.measured_product, rep.cumulative.reference_product
    );
    if !rep.violations().is_empty() {
        hard.push(format!("{} blocks exceed their gain bound", rep.violations().len()));
    }

    let fusion = fusion_bin_check(th.fusion_bins, cfg.seed, inject)?;
    println!(
        "fusion amplitude: {} violations over {} bins{}",
        fusion.violations,
        fusion.bins,
        inject.map(|a| format!(" (gate forced to {a})")).unwrap_or_default()
    );
    if fusion.violations > 0 {
        hard.push(format!("{} fusion bins exceed the larger input magnitude", fusion.violations));
    }

    let mut summary = serde_json::json!({
        "lipschitz": rep,
        "fusion": fusion,
    });
    if cfg.paths.dataset.exists() {
        let data = TrajectoryDataset::open(&cfg.paths.dataset)?;
        if data.grid() == model.grid && data.channels() == model.config.in_channels {
            let steps = rollout_steps(None, &cfg, &data)?;
            let trajs = data.split(Split::Test).to_vec();
            let g = gronwall_from_rollouts(&model, &data, &trajs, steps)?;
            println!(
                "error envelope: K {:.4}, eta {:.4e}, {} violations over {steps} steps",
                g.k_bar,
                g.eta_bar,
                g.violations.len()
            );
            if !g.violations.is_empty() {
                hard.push(format!("closed-loop error exceeds the envelope at steps {:?}", g.violations));
            }
            let opts = ForwardOptions::eval();
            let mut errs = Vec::new();
            for &(tr, t) in data.pairs(Split::Test).iter().take(32) {
                let p = model.forward(&data.frame(tr, t)?, data.lead_time(t), &opts)?;
                let v = data.frame(tr, t + 1)?;
                errs.push(Field::new(p.dims(), p.data().iter().zip(v.data()).map(|(a, b)| a - b).collect())?);
            }
            let sd = sobolev_defect_bound(&errs, th.sobolev_s, th.sobolev_lambda)?;
            println!(
                "sobolev defect (report): measured {:.4e}, bound {:.4e}, holds {}",
                sd.measured, sd.bound, sd.holds
            );
            summary["gronwall"] = serde_json::to_value(&g).map_err(DriftError::from)?;
            summary["sobolev"] = serde_json::to_value(sd).map_err(DriftError::from)?;
        } else {
            log::info!("dataset grid or channels differ from the model; skipping rollout diagnostics");
        }
    }
    write(&out.join("bounds.json"), &serde_json::to_string_pretty(&summary).map_err(DriftError::from)?)?;
    if hard.is_empty() {
        println!("all checks passed");
        Ok(())
    } else {
        Err(check_failed(hard.join("; ")))
    }
}

fn cmd_bench(common: Common, grids: Option<Vec<usize>>, iters: Option<usize>, n: usize) -> Out<()> {
    let cfg = load_config(&common, |t| {
        if let Some(g) = &grids {
            set_key(t, "theory.bench_grids", &format!("{g:?}"))?;
        }
        if let Some(v) = iters {
            set_key(t, "theory.bench_iters", &lit(v))?;
        }
        Ok(())
    })?;
    let out = prepare_out(&cfg)?;
    let th = &cfg.theory;
    let fit = bench_block(&th.bench_grids, th.bench_channels, th.bench_warmup, th.bench_iters, cfg.seed)?;
    write(&out.join("complexity.csv"), &fit.to_csv())?;
    for (g, t) in fit.grids.iter().zip(&fit.seconds) {
        println!("{g:>5}x{g:<5} {:>10.3} ms", t * 1e3);
    }
    println!("log-log fit against HW log HW: exponent {:.3}, R2 {:.4}", fit.exponent, fit.r2);
    let model = DriftNet::new(cfg.model.clone(), n, n, cfg.seed)?;
    let sps = model_throughput(&model, 1, th.bench_iters.min(10), cfg.seed)?;
    println!("parameters: {}", model.param_count());
    println!("throughput at {n}x{n}: {sps:.2} steps/s");
    Ok(())
}

fn cmd_ablate(common: Common, seeds: Vec<u64>, epochs: Option<usize>, steps: Option<usize>) -> Out<()> {
    let cfg = load_config(&common, |t| {
        if let Some(v) = epochs {
            set_key(t, "train.epochs", &lit(v))?;
        }
        Ok(())
    })?;
    let data = open_dataset(&cfg)?;
    let t_star = rollout_steps(steps, &cfg, &data)?;
    let out = prepare_out(&cfg)?;
    let table = ablation_suite(&data, &cfg.model, &cfg.train, &Variant::ALL, &seeds, t_star, &cfg.rollout.band_edges)?;
    write(&out.join("ablation.csv"), &table.to_csv())?;
    println!("{:<8} {:>16} {:>16}", "variant", "median final", "top-band slope");
    for v in Variant::ALL {
        println!("{:<8} {:>16} {:>16.4e}", v.name(), pct(table.median_final(v)), table.median_top_slope(v));
    }
    Ok(())
}

fn run(cli: Cli) -> Out<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    match cli.cmd {
        Cmd::GenerateData {
            common,
            preset,
            n_traj,
            n,
            frames,
        } => cmd_generate(common, preset, n_traj, n, frames),
        Cmd::Train {
            common,
            epochs,
            ablation,
            lr,
            batch_size,
            resume,
            stop_after,
            debug_amplitude,
        } => cmd_train(common, epochs, ablation, lr, batch_size, resume, stop_after, debug_amplitude),
        Cmd::Rollout {
            common,
            checkpoint,
            steps,
        } => cmd_rollout(common, checkpoint, steps),
        Cmd::AnalyzeSpectrum {
            common,
            checkpoint,
            steps,
        } => cmd_spectrum(common, checkpoint, steps),
        Cmd::VerifyBounds {
            common,
            checkpoint,
            inject_gate_fault,
            points,
            fusion_bins,
            n,
        } => cmd_verify(common, checkpoint, inject_gate_fault, points, fusion_bins, n),
        Cmd::Bench {
            common,
            grids,
            iters,
            n,
        } => cmd_bench(common, grids, iters, n),
        Cmd::Ablate {
            common,
            seeds,
            epochs,
            steps,
        } => cmd_ablate(common, seeds, epochs, steps),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
