//! Subcommand implementations behind the `dyskernel` binary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::write_attention_csv;
use crate::autodiff::Tape;
use crate::checkpoint;
use crate::complexity::{crossover_n, sweep, SweepRow};
use crate::config::RunConfig;
use crate::data::{stream_pair, SeedStreams, SyntheticPair, LABELS};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradCheckConfig, GradCheckReport};
use crate::losses::{bidirectional_loss, LossConfig};
use crate::metrics::{dice_score, jacobian_negative_fraction, mean_std, LabelMap};
use crate::network::{warp, ModelConfig, RegistrationModel};
use crate::params::ParamStore;
use crate::pgm::Pgm;
use crate::sampling::BaseWindow;
use crate::tensor::Tensor;
use crate::training::{train_on, StepLog};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const DEFAULT_CHECKPOINT: &str = "model.dysk";
pub const REGISTRATION_FILE: &str = "registration.dysk";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_SUMMARY: &str = "eval_summary.txt";
pub const COMPLEXITY_CSV: &str = "complexity.csv";
pub const BENCH_CSV: &str = "bench.csv";

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| cfg.output_dir.join(DEFAULT_CHECKPOINT))
}

/// A labelled or unlabelled pair read from disk.
#[derive(Clone, Debug)]
pub struct DiskPair {
    pub id: String,
    pub x_a: Tensor,
    pub x_b: Tensor,
    pub seg_a: Option<LabelMap>,
    pub seg_b: Option<LabelMap>,
}

/// Reads every `<id>_a.pgm` / `<id>_b.pgm` pair in `dir`, sorted by id.
/// Label maps `<id>_seg_a.pgm` / `<id>_seg_b.pgm` are optional.
pub fn load_pair_dir(dir: &Path) -> Result<Vec<DiskPair>> {
    let mut ids: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_a.pgm")).map(str::to_string))
        .filter(|id| !id.ends_with("_seg"))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::invalid(format!("no <id>_a.pgm files in {}", dir.display())));
    }
    let opt_labels = |p: PathBuf| -> Result<Option<LabelMap>> {
        if p.exists() {
            Ok(Some(Pgm::read(p)?.to_labels()))
        } else {
            Ok(None)
        }
    };
    ids.into_iter()
        .map(|id| {
            let x_a = Pgm::read(dir.join(format!("{id}_a.pgm")))?.to_image();
            let x_b = Pgm::read(dir.join(format!("{id}_b.pgm")))?.to_image();
            Ok(DiskPair {
                seg_a: opt_labels(dir.join(format!("{id}_seg_a.pgm")))?,
                seg_b: opt_labels(dir.join(format!("{id}_seg_b.pgm")))?,
                id,
                x_a,
                x_b,
            })
        })
        .collect()
}

/// Writes `count` synthetic pairs from the data stream as PGM files (and
/// the true field, when known, as a container).
pub fn cmd_synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = cfg.data_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    ensure_dir(&dir)?;
    let seeds = SeedStreams::new(cfg.seed.unwrap_or(0));
    let mut written = Vec::new();
    for i in 0..cfg.pairs {
        let pair = stream_pair(cfg.family, (cfg.height, cfg.width), cfg.max_disp, seeds.data, i)?;
        let id = format!("{i:04}");
        for (suffix, img) in [("a", &pair.x_a), ("b", &pair.x_b)] {
            let path = dir.join(format!("{id}_{suffix}.pgm"));
            Pgm::from_image(img, u16::MAX)?.write(&path)?;
            written.push(path);
        }
        for (suffix, seg) in [("seg_a", &pair.seg_a), ("seg_b", &pair.seg_b)] {
            let path = dir.join(format!("{id}_{suffix}.pgm"));
            Pgm::from_labels(seg)?.write(&path)?;
            written.push(path);
        }
        if let Some(phi) = &pair.phi_true {
            let path = dir.join(format!("{id}_phi.dysk"));
            checkpoint::save(&path, &[("phi_true".to_string(), phi.clone())])?;
            written.push(path);
        }
    }
    info!("wrote {} pairs to {}", cfg.pairs, dir.display());
    Ok(written)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: Vec<StepLog>,
}

/// Trains on synthetic pairs (or on `data_dir`, reshuffled every epoch) and
/// writes the checkpoint and the per-step CSV log.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let tcfg = cfg.train_config()?;
    ensure_dir(&cfg.output_dir)?;
    let ckpt = checkpoint_path(cfg);
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let log_path = cfg.output_dir.join(TRAIN_LOG);
    let mut log = BufWriter::new(File::create(&log_path)?);
    writeln!(log, "step,loss,sim,smooth")?;
    let seeds = SeedStreams::new(tcfg.seed);
    let disk = cfg.data_dir.as_deref().map(load_pair_dir).transpose()?;
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = usize::MAX;
    let mut steps = Vec::with_capacity(tcfg.steps);
    let result = train_on(
        &tcfg,
        |i| match &disk {
            Some(pairs) => {
                let (epoch, pos) = (i / pairs.len(), i % pairs.len());
                if epoch != order_epoch {
                    order = (0..pairs.len()).collect();
                    order.shuffle(&mut ChaCha8Rng::seed_from_u64(SeedStreams::pair_seed(seeds.shuffle, epoch)));
                    order_epoch = epoch;
                }
                let p = &pairs[order[pos]];
                Ok((p.x_a.clone(), p.x_b.clone()))
            }
            None => {
                let p = stream_pair(tcfg.family, tcfg.size, tcfg.max_disp, seeds.data, i)?;
                Ok((p.x_a, p.x_b))
            }
        },
        |s| {
            writeln!(log, "{},{},{},{}", s.step, s.loss, s.sim, s.smooth)?;
            steps.push(*s);
            Ok(())
        },
    );
    log.flush()?;
    let (_, store) = result?;
    checkpoint::save(&ckpt, &store.to_records())?;
    info!("checkpoint written to {}", ckpt.display());
    Ok(TrainOutcome { checkpoint: ckpt, log: log_path, steps })
}

/// Builds the configured model and loads its weights from the checkpoint.
pub fn load_model(cfg: &RunConfig) -> Result<(RegistrationModel, ParamStore)> {
    let model = RegistrationModel::new(cfg.model()?)?;
    let path = checkpoint_path(cfg);
    if !path.exists() {
        return Err(Error::invalid(format!("checkpoint {} does not exist", path.display())));
    }
    let records = checkpoint::load(&path)?;
    let mut store = model.init_params(0)?;
    store.load_records(&records).map_err(|e| {
        let detail = match e {
            Error::Invalid(m) => m,
            other => other.to_string(),
        };
        Error::invalid(format!("checkpoint {} does not fit the configured model: {detail}", path.display()))
    })?;
    Ok((model, store))
}

#[derive(Debug)]
pub struct RegisterOutcome {
    pub container: PathBuf,
    pub phi_a2b: Tensor,
    pub phi_b2a: Tensor,
    pub x_a2b: Tensor,
    pub x_b2a: Tensor,
}

/// Registers `x_a`/`x_b` (PGM paths, or eval-stream pair 0 when unset).
pub fn cmd_register(cfg: &RunConfig) -> Result<RegisterOutcome> {
    let (model, store) = load_model(cfg)?;
    let (x_a, x_b) = match (&cfg.x_a, &cfg.x_b) {
        (Some(a), Some(b)) => (Pgm::read(a)?.to_image(), Pgm::read(b)?.to_image()),
        (None, None) => {
            let seeds = SeedStreams::new(cfg.seed.unwrap_or(0));
            let p = stream_pair(cfg.family, (cfg.height, cfg.width), cfg.max_disp, seeds.eval, 0)?;
            (p.x_a, p.x_b)
        }
        _ => return Err(Error::invalid("register needs both x_a and x_b, or neither")),
    };
    if x_a.shape() != x_b.shape() {
        return Err(Error::shape(
            "register",
            format!("x_a has shape {:?} but x_b has shape {:?}", x_a.shape(), x_b.shape()),
        ));
    }
    model.check_input(x_a.shape())?;

    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let a = tape.constant(x_a.clone());
    let b = tape.constant(x_b.clone());
    let (fa, fb) = model.forward(&mut tape, &p, a, b)?;
    let wa = warp(&mut tape, a, fa.phi)?;
    let wb = warp(&mut tape, b, fb.phi)?;
    let out = RegisterOutcome {
        container: cfg.output_dir.join(REGISTRATION_FILE),
        phi_a2b: tape.value(fa.phi).clone(),
        phi_b2a: tape.value(fb.phi).clone(),
        x_a2b: tape.value(wa).clone(),
        x_b2a: tape.value(wb).clone(),
    };
    ensure_dir(&cfg.output_dir)?;
    checkpoint::save(
        &out.container,
        &[
            ("phi_a2b".to_string(), out.phi_a2b.clone()),
            ("phi_b2a".to_string(), out.phi_b2a.clone()),
            ("x_a2b".to_string(), out.x_a2b.clone()),
            ("x_b2a".to_string(), out.x_b2a.clone()),
        ],
    )?;
    Pgm::from_image(&out.x_a2b, u16::MAX)?.write(cfg.output_dir.join("x_a2b.pgm"))?;
    Pgm::from_image(&out.x_b2a, u16::MAX)?.write(cfg.output_dir.join("x_b2a.pgm"))?;
    if !cfg.attention_pixels.is_empty() {
        for (t, blk) in fa.blocks.iter().enumerate() {
            let path = cfg.output_dir.join(format!("attention_block{t}.csv"));
            write_attention_csv(BufWriter::new(File::create(&path)?), tape.value(blk.attention), &cfg.attention_pixels)?;
        }
    }
    Ok(out)
}

/// One evaluated pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub dsc_mean: f64,
    pub dsc_per_label: Vec<(u32, Option<f64>)>,
    pub dsc_initial: f64,
    pub jac_neg_pct: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    pub skipped: Vec<String>,
    pub labels: Vec<u32>,
    pub dsc: (f64, f64),
    pub dsc_initial: (f64, f64),
    pub jac_neg_pct: (f64, f64),
}

impl EvalSummary {
    /// Table-style `mean±std` lines: DSC with one decimal, folding with two.
    pub fn report(&self) -> String {
        format!(
            "pairs {} (skipped {})\nDSC initial {:.1}±{:.1}\nDSC {:.1}±{:.1}\n|J|<0 {:.2}±{:.2}\n",
            self.rows.len(),
            self.skipped.len(),
            self.dsc_initial.0,
            self.dsc_initial.1,
            self.dsc.0,
            self.dsc.1,
            self.jac_neg_pct.0,
            self.jac_neg_pct.1
        )
    }
}

struct EvalInput {
    id: String,
    x_a: Tensor,
    x_b: Tensor,
    seg_a: LabelMap,
    seg_b: LabelMap,
}

fn evaluate_one(
    model: &RegistrationModel,
    store: &ParamStore,
    loss: &LossConfig,
    labels: &[u32],
    p: &EvalInput,
) -> Result<EvalRow> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let a = tape.constant(p.x_a.clone());
    let b = tape.constant(p.x_b.clone());
    let (fa, fb) = model.forward(&mut tape, &bound, a, b)?;
    let l = bidirectional_loss(&mut tape, a, b, fa.phi, fb.phi, loss)?;
    let phi = tape.value(fa.phi);
    let after = dice_score(&p.seg_a.warp_nearest(phi)?, &p.seg_b, labels)?;
    let before = dice_score(&p.seg_a, &p.seg_b, labels)?;
    Ok(EvalRow {
        id: p.id.clone(),
        dsc_mean: after.mean,
        dsc_per_label: after.per_label,
        dsc_initial: before.mean,
        jac_neg_pct: jacobian_negative_fraction(phi)?,
        loss: tape.value(l.total).item(),
    })
}

/// Evaluates the checkpoint on held-out synthetic pairs (or `data_dir`)
/// and writes the per-pair CSV plus a mean±std summary. Pairs are scored
/// in parallel and reported in input order.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalSummary> {
    let (model, store) = load_model(cfg)?;
    let mut skipped = Vec::new();
    let (inputs, labels): (Vec<EvalInput>, Vec<u32>) = match &cfg.data_dir {
        None => {
            let seeds = SeedStreams::new(cfg.seed.unwrap_or(0));
            let pairs = (0..cfg.pairs)
                .map(|i| {
                    let SyntheticPair { x_a, x_b, seg_a, seg_b, .. } =
                        stream_pair(cfg.family, (cfg.height, cfg.width), cfg.max_disp, seeds.eval, i)?;
                    Ok(EvalInput { id: format!("{i:04}"), x_a, x_b, seg_a, seg_b })
                })
                .collect::<Result<Vec<_>>>()?;
            (pairs, LABELS.to_vec())
        }
        Some(dir) => {
            let mut inputs = Vec::new();
            for p in load_pair_dir(dir)? {
                match (p.seg_a, p.seg_b) {
                    (Some(seg_a), Some(seg_b)) => {
                        inputs.push(EvalInput { id: p.id, x_a: p.x_a, x_b: p.x_b, seg_a, seg_b })
                    }
                    _ => {
                        warn!("pair {}: label map missing, skipped", p.id);
                        skipped.push(p.id);
                    }
                }
            }
            let mut labels: Vec<u32> = inputs
                .iter()
                .flat_map(|p| p.seg_a.foreground_labels().into_iter().chain(p.seg_b.foreground_labels()))
                .collect();
            labels.sort_unstable();
            labels.dedup();
            (inputs, labels)
        }
    };
    if labels.is_empty() {
        return Err(Error::invalid("no labelled pairs to evaluate"));
    }
    let loss = cfg.loss();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let results: Vec<Result<EvalRow>> =
        pool.install(|| inputs.par_iter().map(|p| evaluate_one(&model, &store, &loss, &labels, p)).collect());
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(r?);
    }
    if rows.is_empty() {
        return Err(Error::invalid("every pair was skipped"));
    }

    ensure_dir(&cfg.output_dir)?;
    let mut csv = BufWriter::new(File::create(cfg.output_dir.join(EVAL_CSV))?);
    let label_cols: Vec<String> = labels.iter().map(|l| format!("dsc_{l}")).collect();
    writeln!(csv, "pair_id,dsc_mean,{},jac_neg_pct,loss", label_cols.join(","))?;
    for r in &rows {
        let per: Vec<String> = r.dsc_per_label.iter().map(|(_, d)| d.map(|v| v.to_string()).unwrap_or_default()).collect();
        writeln!(csv, "{},{},{},{},{}", r.id, r.dsc_mean, per.join(","), r.jac_neg_pct, r.loss)?;
    }
    csv.flush()?;
    let col = |f: fn(&EvalRow) -> f64| mean_std(&rows.iter().map(f).collect::<Vec<_>>());
    let summary = EvalSummary {
        dsc: col(|r| r.dsc_mean),
        dsc_initial: col(|r| r.dsc_initial),
        jac_neg_pct: col(|r| r.jac_neg_pct),
        rows,
        skipped,
        labels,
    };
    fs::write(cfg.output_dir.join(EVAL_SUMMARY), summary.report())?;
    Ok(summary)
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradCheckReport> {
    run_gradcheck(&GradCheckConfig {
        instances: cfg.instances,
        seed: cfg.seed.unwrap_or(0),
        ..GradCheckConfig::default()
    })
}

#[derive(Debug)]
pub struct ComplexityOutcome {
    pub rows: Vec<SweepRow>,
    pub crossover: usize,
    pub csv: PathBuf,
}

pub fn cmd_analyze_complexity(cfg: &RunConfig) -> Result<ComplexityOutcome> {
    let rows = sweep(&cfg.n_values, cfg.alpha, cfg.labels, cfg.form)?;
    let crossover = crossover_n(cfg.alpha, cfg.labels, cfg.form)?;
    ensure_dir(&cfg.output_dir)?;
    let csv = cfg.output_dir.join(COMPLEXITY_CSV);
    let mut out = BufWriter::new(File::create(&csv)?);
    write_sweep_csv(&mut out, &rows)?;
    out.flush()?;
    Ok(ComplexityOutcome { rows, crossover, csv })
}

pub fn write_sweep_csv(mut out: impl Write, rows: &[SweepRow]) -> Result<()> {
    writeln!(out, "N,log10_H,log10_C,R")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.n, r.log10_h, r.log10_c, r.ratio)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub k: usize,
    pub taps: usize,
    pub flops: u64,
    pub params: u64,
    pub wall_ms: f64,
}

/// Analytic cost and median forward time of the model with `k×k` windows.
pub fn bench_kernel(cfg: &RunConfig, k: usize) -> Result<BenchRow> {
    let model = RegistrationModel::new(ModelConfig { window: BaseWindow::square(k)?, ..cfg.model()? })?;
    let cost = model.cost(1, cfg.height, cfg.width);
    let store = model.init_params(cfg.seed.unwrap_or(0))?;
    let seeds = SeedStreams::new(cfg.seed.unwrap_or(0));
    let pair = stream_pair(cfg.family, (cfg.height, cfg.width), cfg.max_disp, seeds.eval, 0)?;
    let mut times: Vec<f64> = (0..cfg.bench_runs)
        .map(|_| {
            let t = Instant::now();
            model.register_pair(&store, &pair.x_a, &pair.x_b)?;
            Ok(t.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<_>>()?;
    times.sort_by(f64::total_cmp);
    Ok(BenchRow { k, taps: k * k, flops: cost.flops, params: cost.params, wall_ms: times[times.len() / 2] })
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let rows = cfg.kernels.iter().map(|&k| bench_kernel(cfg, k)).collect::<Result<Vec<_>>>()?;
    ensure_dir(&cfg.output_dir)?;
    let mut out = BufWriter::new(File::create(cfg.output_dir.join(BENCH_CSV))?);
    writeln!(out, "k,|U|,flops,params,wall_ms")?;
    for r in &rows {
        writeln!(out, "{},{},{},{},{:.3}", r.k, r.taps, r.flops, r.params, r.wall_ms)?;
    }
    out.flush()?;
    Ok(rows)
}
