//! Finite-difference checks of every differentiable op and of the full
//! bidirectional training loss.
//!
//! Each op instance is reduced to a scalar by a fixed random cotangent `r`:
//! the analytic side is one vector-Jacobian product seeded with `r`, the
//! numeric side differentiates `Σ r·op(x)` computed outside the tape. No
//! other op participates, so a broken adjoint only fails its own entry.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_grad, OpKind, Tape, Var};
use crate::data::{synthetic_pair, PairKind};
use crate::error::{Error, Result};
use crate::losses::{bidirectional_loss, LossConfig};
use crate::network::{ModelConfig, RegistrationModel};
use crate::ops::ConvGeom;
use crate::params::ParamStore;
use crate::sampling::BaseWindow;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Random instances per op.
    pub instances: usize,
    pub rtol: f64,
    pub atol: f64,
    pub step: f64,
    pub seed: u64,
    /// Relative tolerance of the end-to-end check.
    pub e2e_rtol: f64,
    /// Parameter entries probed by the end-to-end check.
    pub e2e_entries: usize,
    /// Fault injection: scale the adjoint of this op.
    pub corrupt: Option<OpKind>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            instances: 10,
            rtol: 1e-4,
            atol: 1e-6,
            step: 1e-4,
            seed: 0,
            e2e_rtol: 1e-3,
            e2e_entries: 60,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckEntry {
    pub name: String,
    pub instances: usize,
    /// Largest `|analytic − numeric| / |numeric|` over entries whose
    /// numeric value exceeds `atol`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Probes left out because the finite-difference stencil straddled a
    /// kink (leaky-relu sign, clamp boundary or bilinear cell change).
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<CheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn entry(&self, name: &str) -> Option<&CheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>9} {:>7} {:>12} {:>12}  status",
            "op", "checked", "skipped", "max_rel_err", "max_abs_err"
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<24} {:>9} {:>7} {:>12.3e} {:>12.3e}  {}",
                e.name,
                e.instances,
                e.skipped,
                e.max_rel_err,
                e.max_abs_err,
                if e.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Error accumulator with `allclose` semantics.
#[derive(Clone, Copy, Debug)]
struct Compare {
    rtol: f64,
    atol: f64,
    max_rel: f64,
    max_abs: f64,
    ok: bool,
}

impl Compare {
    fn new(rtol: f64, atol: f64) -> Self {
        Compare { rtol, atol, max_rel: 0.0, max_abs: 0.0, ok: true }
    }

    fn push(&mut self, analytic: f64, numeric: f64) {
        let diff = (analytic - numeric).abs();
        if !(diff <= self.atol + self.rtol * numeric.abs()) {
            self.ok = false;
        }
        self.max_abs = self.max_abs.max(diff);
        if numeric.abs() > self.atol {
            self.max_rel = self.max_rel.max(diff / numeric.abs());
        } else if diff.is_nan() {
            self.max_rel = f64::NAN;
        }
    }

    fn push_all(&mut self, analytic: &Tensor, numeric: &Tensor) {
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            self.push(a, n);
        }
    }
}

/// Applies the op under test to leaves holding `inputs`.
type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Instance {
    inputs: Vec<Tensor>,
    build: Build,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Values with `|v| ∈ [lo, hi]` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Coordinate component in `[0, extent-1]` whose fractional part stays
/// clear of the bilinear kinks at integers.
fn off_grid(rng: &mut ChaCha8Rng, extent: usize) -> f64 {
    let cell = rng.gen_range(0..extent - 1) as f64;
    cell + rng.gen_range(0.05..0.95)
}

fn coords(rng: &mut ChaCha8Rng, b: usize, p: usize, ho: usize, wo: usize, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(&[b, p, 2, ho, wo]);
    let plane = ho * wo;
    for bp in 0..b * p {
        for k in 0..plane {
            t.data_mut()[(bp * 2) * plane + k] = off_grid(rng, w);
            t.data_mut()[(bp * 2 + 1) * plane + k] = off_grid(rng, h);
        }
    }
    t
}

fn small_dims(rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(1..=4)).collect()
}

fn instance(kind: OpKind, rng: &mut ChaCha8Rng) -> Instance {
    let unary = |inputs: Vec<Tensor>, f: fn(&mut Tape, Var) -> Var| Instance {
        inputs,
        build: Box::new(move |t, v| Ok(f(t, v[0]))),
    };
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let s = small_dims(rng);
            let a = rand_t(rng, &s, -2.0, 2.0);
            let b = if kind == OpKind::Div { away_from_zero(rng, &s, 0.5, 2.0) } else { rand_t(rng, &s, -2.0, 2.0) };
            Instance {
                inputs: vec![a, b],
                build: Box::new(move |t, v| match kind {
                    OpKind::Add => t.add(v[0], v[1]),
                    OpKind::Sub => t.sub(v[0], v[1]),
                    OpKind::Mul => t.mul(v[0], v[1]),
                    _ => t.div(v[0], v[1]),
                }),
            }
        }
        OpKind::Scale => {
            let k = rng.gen_range(-3.0..3.0);
            let s = small_dims(rng);
            Instance { inputs: vec![rand_t(rng, &s, -2.0, 2.0)], build: Box::new(move |t, v| Ok(t.scale(v[0], k))) }
        }
        OpKind::AddScalar => {
            let k = rng.gen_range(-3.0..3.0);
            let s = small_dims(rng);
            Instance { inputs: vec![rand_t(rng, &s, -2.0, 2.0)], build: Box::new(move |t, v| Ok(t.add_scalar(v[0], k))) }
        }
        OpKind::Exp => {
            let s = small_dims(rng);
            unary(vec![rand_t(rng, &s, -2.0, 2.0)], |t, v| t.exp(v))
        }
        OpKind::Square => {
            let s = small_dims(rng);
            unary(vec![rand_t(rng, &s, -2.0, 2.0)], |t, v| t.square(v))
        }
        OpKind::LeakyRelu => {
            let slope = rng.gen_range(0.01..0.5);
            let s = small_dims(rng);
            Instance {
                inputs: vec![away_from_zero(rng, &s, 0.01, 2.0)],
                build: Box::new(move |t, v| Ok(t.leaky_relu(v[0], slope))),
            }
        }
        OpKind::Sum => {
            let s = small_dims(rng);
            unary(vec![rand_t(rng, &s, -2.0, 2.0)], |t, v| t.sum(v))
        }
        OpKind::Mean => {
            let s = small_dims(rng);
            unary(vec![rand_t(rng, &s, -2.0, 2.0)], |t, v| t.mean(v))
        }
        OpKind::Conv2d => {
            let (b, ci, co) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (kh, kw) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let geom = ConvGeom { stride: rng.gen_range(1..=2), padding: rng.gen_range(0..=1) };
            let (h, w) = (rng.gen_range(kh.max(3)..=6), rng.gen_range(kw.max(3)..=6));
            let with_bias = rng.gen_bool(0.5);
            let mut inputs = vec![rand_t(rng, &[b, ci, h, w], -1.0, 1.0), rand_t(rng, &[co, ci, kh, kw], -1.0, 1.0)];
            if with_bias {
                inputs.push(rand_t(rng, &[co], -1.0, 1.0));
            }
            Instance { inputs, build: Box::new(move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), geom)) }
        }
        OpKind::Softmax => {
            let s = small_dims(rng);
            let axis = rng.gen_range(0..s.len());
            Instance { inputs: vec![rand_t(rng, &s, -3.0, 3.0)], build: Box::new(move |t, v| t.softmax(v[0], axis)) }
        }
        OpKind::ConcatChannels => {
            let (b, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let parts = rng.gen_range(1..=3);
            let inputs = (0..parts)
                .map(|_| {
                    let c = rng.gen_range(1..=3);
                    rand_t(rng, &[b, c, h, w], -1.0, 1.0)
                })
                .collect();
            Instance { inputs, build: Box::new(|t, v| t.concat_channels(v)) }
        }
        OpKind::Reshape => {
            let s = small_dims(rng);
            let n: usize = s.iter().product();
            Instance { inputs: vec![rand_t(rng, &s, -1.0, 1.0)], build: Box::new(move |t, v| t.reshape(v[0], &[n])) }
        }
        OpKind::GridSample => {
            let (b, c, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(2..=5), rng.gen_range(2..=5));
            let (p, ho, wo) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let field = rand_t(rng, &[b, c, h, w], -1.0, 1.0);
            let pts = coords(rng, b, p, ho, wo, h, w);
            Instance { inputs: vec![field, pts], build: Box::new(|t, v| t.grid_sample(v[0], v[1])) }
        }
        OpKind::ClampCoords => {
            let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
            let (b, p, ho, wo) = (1, rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
            // mix of in-box and out-of-box values, all clear of the box edges
            let mut c = coords(rng, b, p, ho, wo, h, w);
            for v in c.data_mut() {
                match rng.gen_range(0..4) {
                    0 => *v = -rng.gen_range(0.1..2.0),
                    1 => *v += (h.max(w) + 1) as f64,
                    _ => {}
                }
            }
            Instance { inputs: vec![c], build: Box::new(move |t, v| t.clamp_coords(v[0], h, w)) }
        }
        OpKind::ScaledDot => {
            let (b, d, hh, u) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=2), rng.gen_range(1..=4));
            let (h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let q = rand_t(rng, &[b, d, hh, h, w], -1.0, 1.0);
            let k = rand_t(rng, &[b, d, hh, u, h, w], -1.0, 1.0);
            Instance { inputs: vec![q, k], build: Box::new(|t, v| t.scaled_dot(v[0], v[1])) }
        }
        OpKind::TapSum => {
            let (b, d, hh, u) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=2), rng.gen_range(1..=4));
            let (h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let wt = rand_t(rng, &[b, hh, u, h, w], 0.0, 1.0);
            let v = rand_t(rng, &[b, d, hh, u, h, w], -1.0, 1.0);
            Instance { inputs: vec![wt, v], build: Box::new(|t, v| t.tap_sum(v[0], v[1])) }
        }
        OpKind::MulChannel => {
            let mut s = small_dims(rng);
            if s.len() < 2 {
                s.push(rng.gen_range(1..=3));
            }
            let x = rand_t(rng, &s, -1.0, 1.0);
            let wv = rand_t(rng, &[s[1]], -2.0, 2.0);
            Instance { inputs: vec![x, wv], build: Box::new(|t, v| t.mul_channel(v[0], v[1])) }
        }
        OpKind::Leaf => unreachable!("leaves have no adjoint"),
    }
}

fn forward(inst: &Instance, inputs: &[Tensor], corrupt: Option<OpKind>) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    if let Some(k) = corrupt {
        tape.corrupt_adjoint(k);
    }
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = (inst.build)(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Runs the suite for one op.
pub fn check_op(kind: OpKind, cfg: &GradCheckConfig) -> Result<CheckEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9E37_79B9 * (OpKind::ALL.iter().position(|&k| k == kind).unwrap_or(0) as u64 + 1)));
    let mut cmp = Compare::new(cfg.rtol, cfg.atol);
    for _ in 0..cfg.instances {
        let inst = instance(kind, &mut rng);
        let (mut tape, vars, out) = forward(&inst, &inst.inputs, cfg.corrupt)?;
        let r = rand_t(&mut rng, tape.shape(out), -1.0, 1.0);
        tape.backward_from(out, r.clone())?;
        for (i, &v) in vars.iter().enumerate() {
            let analytic = tape.grad(v).expect("leaf gradient").clone();
            let numeric = finite_diff_grad(
                |x| {
                    let mut probe = inst.inputs.clone();
                    probe[i] = x.clone();
                    let (t, _, o) = forward(&inst, &probe, None).expect("probe forward");
                    dot(t.value(o), &r)
                },
                &inst.inputs[i],
                cfg.step,
            );
            cmp.push_all(&analytic, &numeric);
        }
    }
    Ok(CheckEntry {
        name: kind.name().to_string(),
        instances: cfg.instances,
        max_rel_err: cmp.max_rel,
        max_abs_err: cmp.max_abs,
        skipped: 0,
        passed: cmp.ok,
    })
}

pub const E2E_NAME: &str = "end-to-end-bireg";

/// Bidirectional loss gradient w.r.t. a sample of model parameters on a
/// 16×16 elastic pair. Layers that start at zero are re-drawn at random so
/// that every path carries gradient.
pub fn check_end_to_end(cfg: &GradCheckConfig) -> Result<CheckEntry> {
    let model = RegistrationModel::new(ModelConfig {
        channels: 8,
        heads: 2,
        window: BaseWindow::square(3)?,
        depth: 2,
    })?;
    let mut store = model.init_params(cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xE2E);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        let v = store.value_mut(name).expect("known parameter");
        if v.data().iter().all(|&x| x == 0.0) {
            for x in v.data_mut() {
                *x = rng.gen_range(-0.1..0.1);
            }
        }
    }
    let pair = synthetic_pair(PairKind::Elastic { max_disp: 2.0 }, (16, 16), cfg.seed)?;
    let loss_cfg = LossConfig::default();
    let eval = |store: &ParamStore, corrupt: Option<OpKind>| -> Result<(Tape, crate::params::Bound, Var)> {
        let mut tape = Tape::new();
        if let Some(k) = corrupt {
            tape.corrupt_adjoint(k);
        }
        let p = store.bind(&mut tape);
        let a = tape.constant(pair.x_a.clone());
        let b = tape.constant(pair.x_b.clone());
        let (fa, fb) = model.forward(&mut tape, &p, a, b)?;
        let l = bidirectional_loss(&mut tape, a, b, fa.phi, fb.phi, &loss_cfg)?;
        Ok((tape, p, l.total))
    };
    let (mut tape, bound, loss) = eval(&store, cfg.corrupt)?;
    tape.backward(loss)?;

    // every parameter tensor gets probed at least once, the rest at random
    let sizes: Vec<usize> = names.iter().map(|n| store.value(n).expect("known").numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut picks: Vec<(usize, usize)> = (0..names.len()).map(|p| (p, rng.gen_range(0..sizes[p]))).collect();
    let extra = cfg.e2e_entries.saturating_sub(picks.len()).min(total);
    for flat in sample(&mut rng, total, extra) {
        let mut rest = flat;
        for (p, &n) in sizes.iter().enumerate() {
            if rest < n {
                picks.push((p, rest));
                break;
            }
            rest -= n;
        }
    }

    let mut cmp = Compare::new(cfg.e2e_rtol, cfg.atol);
    let base = tape.piece_fingerprint();
    let mut skipped = 0;
    let mut probe = store.clone();
    for &(p, idx) in &picks {
        let name = &names[p];
        let analytic = tape.grad(bound.var(name)).expect("parameter gradient").data()[idx];
        let orig = store.value(name).expect("known").data()[idx];
        let mut at = |delta: f64| -> Result<(f64, u64)> {
            probe.value_mut(name).expect("known").data_mut()[idx] = orig + delta;
            let (t, _, l) = eval(&probe, None)?;
            Ok((t.value(l).item(), t.piece_fingerprint()))
        };
        let (fp, kp) = at(cfg.step)?;
        let (fm, km) = at(-cfg.step)?;
        probe.value_mut(name).expect("known").data_mut()[idx] = orig;
        if kp != base || km != base {
            skipped += 1;
            continue;
        }
        cmp.push(analytic, (fp - fm) / (2.0 * cfg.step));
    }
    let checked = picks.len() - skipped;
    Ok(CheckEntry {
        name: E2E_NAME.to_string(),
        instances: checked,
        max_rel_err: cmp.max_rel,
        max_abs_err: cmp.max_abs,
        skipped,
        passed: cmp.ok && checked >= picks.len().div_ceil(2),
    })
}

/// Every op in [`OpKind::ALL`] followed by the end-to-end entry.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.instances == 0 {
        return Err(Error::invalid("gradcheck needs at least one instance per op"));
    }
    if !(cfg.step > 0.0 && cfg.rtol >= 0.0 && cfg.atol >= 0.0) {
        return Err(Error::invalid("gradcheck tolerances and step must be non-negative (step > 0)"));
    }
    let mut entries = OpKind::ALL.iter().map(|&k| check_op(k, cfg)).collect::<Result<Vec<_>>>()?;
    entries.push(check_end_to_end(cfg)?);
    Ok(GradCheckReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compare_uses_allclose_semantics() {
        let mut c = Compare::new(1e-4, 1e-6);
        c.push(1.0 + 5e-5, 1.0);
        c.push(5e-7, 0.0);
        assert!(c.ok);
        c.push(1.001, 1.0);
        assert!(!c.ok);
        assert!((c.max_rel - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn single_op_passes_and_fails_under_corruption() {
        let cfg = GradCheckConfig { instances: 3, ..Default::default() };
        assert!(check_op(OpKind::Mul, &cfg).unwrap().passed);
        let bad = GradCheckConfig { corrupt: Some(OpKind::Mul), ..cfg.clone() };
        assert!(!check_op(OpKind::Mul, &bad).unwrap().passed);
        assert!(check_op(OpKind::Add, &bad).unwrap().passed);
    }

    #[test]
    fn end_to_end_catches_a_broken_adjoint() {
        let cfg = GradCheckConfig { e2e_entries: 30, ..Default::default() };
        let good = check_end_to_end(&cfg).unwrap();
        assert!(good.passed, "{good:?}");
        let bad = check_end_to_end(&GradCheckConfig { corrupt: Some(OpKind::Softmax), ..cfg }).unwrap();
        assert!(!bad.passed);
    }

    #[test]
    fn rejects_degenerate_config() {
        assert!(run_gradcheck(&GradCheckConfig { instances: 0, ..Default::default() }).is_err());
    }
}
