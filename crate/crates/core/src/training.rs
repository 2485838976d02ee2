//! Training loop and pairwise evaluation on synthetic streams.

use log::{debug, info};

use crate::autodiff::Tape;
use crate::data::{stream_pair, PairFamily, SeedStreams, SyntheticPair, LABELS};
use crate::error::{Error, Result};
use crate::losses::{bidirectional_loss, LossConfig};
use crate::metrics::{dice_score, jacobian_negative_fraction};
use crate::network::{ModelConfig, RegistrationModel};
use crate::params::{AdamW, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: AdamW,
    /// Outer steps; each is one pass over `pairs_per_step` fresh pairs.
    pub steps: usize,
    /// Pairs per step, visited one at a time with one update each.
    pub pairs_per_step: usize,
    pub size: (usize, usize),
    pub family: PairFamily,
    pub max_disp: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: AdamW::default(),
            steps: 200,
            pairs_per_step: 40,
            size: (32, 32),
            family: PairFamily::Elastic,
            max_disp: 3.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub sim: f64,
    pub smooth: f64,
}

/// One optimisation step on a pair; returns the pre-update loss terms.
pub fn train_step(
    model: &RegistrationModel,
    store: &mut ParamStore,
    cfg: &TrainConfig,
    x_a: &Tensor,
    x_b: &Tensor,
    step: usize,
) -> Result<StepLog> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let a = tape.constant(x_a.clone());
    let b = tape.constant(x_b.clone());
    let (fa, fb) = model.forward(&mut tape, &p, a, b)?;
    let l = bidirectional_loss(&mut tape, a, b, fa.phi, fb.phi, &cfg.loss)?;
    let log = StepLog {
        step,
        loss: tape.value(l.total).item(),
        sim: tape.value(l.sim).item(),
        smooth: tape.value(l.smooth).item(),
    };
    if !log.loss.is_finite() {
        return Err(Error::NonFinite { step, value: log.loss });
    }
    tape.backward(l.total)?;
    store.zero_grad();
    store.collect_grads(&tape, &p);
    store.adamw_step(&cfg.optimizer);
    Ok(log)
}

/// Trains a fresh model on the seeded pair stream. `on_step` receives the
/// mean pre-update losses of every step.
pub fn train(cfg: &TrainConfig, mut on_step: impl FnMut(&StepLog)) -> Result<(RegistrationModel, ParamStore)> {
    let data = SeedStreams::new(cfg.seed).data;
    train_on(
        cfg,
        |i| {
            let pair = stream_pair(cfg.family, cfg.size, cfg.max_disp, data, i)?;
            Ok((pair.x_a, pair.x_b))
        },
        |log| {
            on_step(log);
            Ok(())
        },
    )
}

/// Training loop over an arbitrary pair source: update `k` of step `s`
/// uses `pair_at(s·pairs_per_step + k)`.
pub fn train_on(
    cfg: &TrainConfig,
    mut pair_at: impl FnMut(usize) -> Result<(Tensor, Tensor)>,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<(RegistrationModel, ParamStore)> {
    cfg.loss.validate()?;
    if cfg.pairs_per_step == 0 {
        return Err(Error::invalid("pairs_per_step must be at least 1"));
    }
    let model = RegistrationModel::new(cfg.model.clone())?;
    let mut store = model.init_params(SeedStreams::new(cfg.seed).init)?;
    for step in 0..cfg.steps {
        let mut mean = StepLog { step, loss: 0.0, sim: 0.0, smooth: 0.0 };
        for k in 0..cfg.pairs_per_step {
            let (x_a, x_b) = pair_at(step * cfg.pairs_per_step + k)?;
            let log = train_step(&model, &mut store, cfg, &x_a, &x_b, step)?;
            mean.loss += log.loss;
            mean.sim += log.sim;
            mean.smooth += log.smooth;
        }
        let n = cfg.pairs_per_step as f64;
        mean.loss /= n;
        mean.sim /= n;
        mean.smooth /= n;
        debug!("step {} loss {:.6} sim {:.6} smooth {:.6}", step, mean.loss, mean.sim, mean.smooth);
        on_step(&mean)?;
    }
    info!("trained {} steps", cfg.steps);
    Ok((model, store))
}

/// Held-out evaluation pairs, disjoint from the training stream.
pub fn eval_pairs(cfg: &TrainConfig, count: usize) -> Result<Vec<SyntheticPair>> {
    let seeds = SeedStreams::new(cfg.seed);
    (0..count)
        .map(|i| stream_pair(cfg.family, cfg.size, cfg.max_disp, seeds.eval, i))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairMetrics {
    /// Overlap of `seg_a ∘ phi_a2b` with `seg_b`, percent.
    pub dsc_mean: f64,
    pub dsc_per_label: Vec<(u32, Option<f64>)>,
    /// Overlap before registration.
    pub dsc_initial: f64,
    pub jac_neg_pct: f64,
    pub loss: f64,
}

pub fn evaluate_pair(
    model: &RegistrationModel,
    store: &ParamStore,
    loss: &LossConfig,
    pair: &SyntheticPair,
) -> Result<PairMetrics> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let a = tape.constant(pair.x_a.clone());
    let b = tape.constant(pair.x_b.clone());
    let (fa, fb) = model.forward(&mut tape, &p, a, b)?;
    let l = bidirectional_loss(&mut tape, a, b, fa.phi, fb.phi, loss)?;
    let phi = tape.value(fa.phi);
    let warped = pair.seg_a.warp_nearest(phi)?;
    let after = dice_score(&warped, &pair.seg_b, &LABELS)?;
    let before = dice_score(&pair.seg_a, &pair.seg_b, &LABELS)?;
    Ok(PairMetrics {
        dsc_mean: after.mean,
        dsc_per_label: after.per_label,
        dsc_initial: before.mean,
        jac_neg_pct: jacobian_negative_fraction(phi)?,
        loss: tape.value(l.total).item(),
    })
}
