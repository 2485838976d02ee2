//! Dynamic stream block: query/key/value projections, point attention over
//! deformed samples, fusion with channel weights into a per-position
//! kernel, and aggregation of deformed values.

use std::io::Write;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, Init};
use crate::ops::ConvGeom;
use crate::params::{Bound, ParamStore};
use crate::sampling::{deform_window, sample_deformed_kv, BaseWindow, OffsetNet};
use crate::tensor::Tensor;

/// 1×1 projections for queries, keys, values and the output.
#[derive(Clone, Debug)]
pub struct QkvProjection {
    pub q: Conv,
    pub k: Conv,
    pub v: Conv,
    pub out: Conv,
    pub channels: usize,
    pub heads: usize,
}

impl QkvProjection {
    pub fn new(prefix: &str, channels: usize, heads: usize) -> Result<Self> {
        if channels == 0 || heads == 0 || channels % heads != 0 {
            return Err(Error::invalid(format!(
                "channels ({channels}) must be a positive multiple of heads ({heads})"
            )));
        }
        let conv = |n: &str| Conv::new(&format!("{prefix}.{n}"), channels, channels, 1, ConvGeom::default());
        Ok(QkvProjection {
            q: conv("q"),
            k: conv("k"),
            v: conv("v"),
            out: conv("out"),
            channels,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn register(&self, store: &mut ParamStore, init: Init, rng: &mut impl Rng) -> Result<()> {
        for c in [&self.q, &self.k, &self.v, &self.out] {
            c.register(store, init, rng)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        4 * self.q.param_count()
    }

    /// `Q` from `f_a`; `K`, `V` from `f_b`. All B×C×H×W.
    pub fn project(&self, tape: &mut Tape, p: &Bound, f_a: Var, f_b: Var) -> Result<(Var, Var, Var)> {
        let (sa, sb) = (tape.shape(f_a).to_vec(), tape.shape(f_b).to_vec());
        if sa != sb || sa.len() != 4 || sa[1] != self.channels {
            return Err(Error::shape(
                "project_qkv",
                format!("f_a {:?}, f_b {:?}, expected B×{}×H×W", sa, sb, self.channels),
            ));
        }
        let q = self.q.forward(tape, p, f_a)?;
        let k = self.k.forward(tape, p, f_b)?;
        let v = self.v.forward(tape, p, f_b)?;
        Ok((q, k, v))
    }

    /// B×C×… → B×d_head×h×… (channel `c` is head `c % h`, slot `c / h`).
    pub fn head_view(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() < 2 || s[1] != self.channels {
            return Err(Error::shape("reshape-heads", format!("{:?} has no {}-channel axis 1", s, self.channels)));
        }
        let mut shape = vec![s[0], self.head_dim(), self.heads];
        shape.extend_from_slice(&s[2..]);
        tape.reshape(x, &shape)
    }

    /// Inverse of [`head_view`](Self::head_view).
    pub fn merge_heads(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let mut shape = vec![s[0], s[1] * s[2]];
        shape.extend_from_slice(&s[3..]);
        tape.reshape(x, &shape)
    }
}

/// Softmax over taps of `q·k_j / √d_head`. `q` is B×d×h×H×W and `k_m`
/// B×d×h×U×H×W; the result is B×h×U×H×W.
pub fn point_attention(tape: &mut Tape, q: Var, k_m: Var) -> Result<Var> {
    let ks = tape.shape(k_m);
    if ks.len() == 6 && ks[3] == 0 {
        return Err(Error::shape("point_attention", "window has no taps"));
    }
    let logits = tape.scaled_dot(q, k_m)?;
    tape.softmax(logits, 2)
}

/// Per-position kernel made of spatial attention weights and a channel
/// weight vector shared over positions.
#[derive(Clone, Copy, Debug)]
pub struct DynamicKernel {
    /// B×h×U×H×W.
    pub spatial: Var,
    /// C entries.
    pub channel: Var,
}

pub fn fuse_kernel(rho: Var, channel: Var) -> DynamicKernel {
    DynamicKernel { spatial: rho, channel }
}

impl DynamicKernel {
    /// Materialised kernel B×C×U×H×W with
    /// `fused[b,c,j,y,x] = rho[b, c % h, j, y, x] · channel[c]`.
    pub fn fused(&self, tape: &Tape) -> Tensor {
        let rho = tape.value(self.spatial);
        let theta = tape.value(self.channel);
        let s = rho.shape();
        let (b_n, h_n, u_n, plane) = (s[0], s[1], s[2], s[3] * s[4]);
        let c_n = theta.numel();
        let mut out = Tensor::zeros(&[b_n, c_n, u_n, s[3], s[4]]);
        let data = out.data_mut();
        for b in 0..b_n {
            for c in 0..c_n {
                let head = c % h_n;
                for j in 0..u_n {
                    let src = ((b * h_n + head) * u_n + j) * plane;
                    let dst = ((b * c_n + c) * u_n + j) * plane;
                    for s in 0..plane {
                        data[dst + s] = rho.data()[src + s] * theta.data()[c];
                    }
                }
            }
        }
        out
    }
}

/// Weighted sum of deformed values under the dynamic kernel, heads merged
/// back to C channels and passed through the output projection.
/// `v_m` is the head view B×d×h×U×H×W.
pub fn aggregate(
    tape: &mut Tape,
    p: &Bound,
    proj: &QkvProjection,
    kernel: &DynamicKernel,
    v_m: Var,
) -> Result<Var> {
    let (rs, vs) = (tape.shape(kernel.spatial).to_vec(), tape.shape(v_m).to_vec());
    if rs.len() == 5 && vs.len() == 6 && rs[2] != vs[3] {
        return Err(Error::shape(
            "aggregate",
            format!("kernel has {} taps, values have {}", rs[2], vs[3]),
        ));
    }
    let heads = tape.tap_sum(kernel.spatial, v_m)?;
    let merged = proj.merge_heads(tape, heads)?;
    let scaled = tape.mul_channel(merged, kernel.channel)?;
    proj.out.forward(tape, p, scaled)
}

/// Configuration of one block.
#[derive(Clone, Debug)]
pub struct DsbConfig {
    pub channels: usize,
    pub heads: usize,
    pub window: BaseWindow,
}

/// How the projections of a fresh block are initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionInit {
    FanIn,
    Identity,
}

#[derive(Clone, Debug)]
pub struct DsbBlock {
    pub proj: QkvProjection,
    pub offsets: OffsetNet,
    pub channel_weight: String,
    pub window: BaseWindow,
}

/// Everything a block computes on the way to its output.
#[derive(Clone, Copy, Debug)]
pub struct DsbOutput {
    /// B×C×H×W.
    pub features: Var,
    /// B×h×U×H×W.
    pub attention: Var,
    /// B×U×2×H×W.
    pub offsets: Var,
    /// B×U×2×H×W absolute sample coordinates.
    pub coords: Var,
    pub kernel: DynamicKernel,
}

impl DsbBlock {
    pub fn new(prefix: &str, cfg: &DsbConfig) -> Result<Self> {
        if cfg.window.is_empty() {
            return Err(Error::invalid("window has no taps"));
        }
        Ok(DsbBlock {
            proj: QkvProjection::new(&format!("{prefix}.proj"), cfg.channels, cfg.heads)?,
            offsets: OffsetNet::new(&format!("{prefix}.offset"), cfg.channels, cfg.window.len()),
            channel_weight: format!("{prefix}.channel_weight"),
            window: cfg.window.clone(),
        })
    }

    /// Projections per `init`, offset head per [`OffsetNet::register`],
    /// channel weights at one.
    pub fn register(&self, store: &mut ParamStore, init: ProjectionInit, rng: &mut impl Rng) -> Result<()> {
        let init = match init {
            ProjectionInit::FanIn => Init::FanIn,
            ProjectionInit::Identity => Init::Identity,
        };
        self.proj.register(store, init, rng)?;
        self.offsets.register(store, rng)?;
        store.insert(self.channel_weight.clone(), Tensor::ones(&[self.proj.channels]))
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count() + self.offsets.param_count() + self.proj.channels
    }

    /// `f_a` attends to `f_b`: the result is B×C×H×W attention features.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, f_a: Var, f_b: Var) -> Result<DsbOutput> {
        let (q, k, v) = self.proj.project(tape, p, f_a, f_b)?;
        let offsets = self.offsets.predict(tape, p, f_a, f_b)?;
        let coords = deform_window(tape, &self.window, offsets)?;
        let (k_m, v_m) = sample_deformed_kv(tape, k, v, coords)?;
        let qh = self.proj.head_view(tape, q)?;
        let kh = self.proj.head_view(tape, k_m)?;
        let vh = self.proj.head_view(tape, v_m)?;
        let attention = point_attention(tape, qh, kh)?;
        let kernel = fuse_kernel(attention, p.var(&self.channel_weight));
        let features = aggregate(tape, p, &self.proj, &kernel, vh)?;
        Ok(DsbOutput {
            features,
            attention,
            offsets,
            coords,
            kernel,
        })
    }

    /// Analytic multiply-add and parameter counts for a B×C×H×W input.
    pub fn cost(&self, b: usize, h: usize, w: usize) -> BlockCost {
        let c = self.proj.channels as u64;
        let heads = self.proj.heads as u64;
        let u = self.window.len() as u64;
        let pos = (b * h * w) as u64;
        let projections = 4 * self.proj.q.macs(b, h, w);
        let offsets = self.offsets.hidden.macs(b, h, w) + self.offsets.out.macs(b, h, w);
        // bilinear: four taps per sample, for keys and values
        let sampling = 2 * 4 * pos * c * u;
        let logits = pos * c * u;
        let softmax = pos * heads * u;
        let aggregation = pos * c * u;
        let channel_scale = pos * c;
        let attention_path = sampling + logits + softmax + aggregation;
        BlockCost {
            flops: projections + offsets + attention_path + channel_scale,
            attention_flops: attention_path,
            params: self.param_count() as u64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockCost {
    /// Multiply-adds for one forward pass.
    pub flops: u64,
    /// The window-dependent share: sampling, logits, softmax, aggregation.
    pub attention_flops: u64,
    pub params: u64,
}

/// Validates a configuration and returns the block's cost.
pub fn count_flops_params(cfg: &DsbConfig, input_shape: [usize; 4]) -> Result<BlockCost> {
    let [b, c, h, w] = input_shape;
    if c == 0 || b == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!("degenerate input shape {input_shape:?}")));
    }
    if c != cfg.channels {
        return Err(Error::invalid(format!("input has {c} channels, block expects {}", cfg.channels)));
    }
    Ok(DsbBlock::new("dsb", cfg)?.cost(b, h, w))
}

/// Largest deviation of any per-position distribution's sum from one.
pub fn normalization_error(rho: &Tensor) -> f64 {
    let s = rho.shape();
    let (outer, u_n, plane) = (s[0] * s[1], s[2], s[3] * s[4]);
    let mut worst = 0.0f64;
    for o in 0..outer {
        for p in 0..plane {
            let total: f64 = (0..u_n).map(|j| rho.data()[(o * u_n + j) * plane + p]).sum();
            worst = worst.max((total - 1.0).abs());
        }
    }
    worst
}

/// Summary of how concentrated attention is over taps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TapUsage {
    pub taps: usize,
    /// Mean number of taps with weight above the threshold.
    pub mean_above_threshold: f64,
    /// Largest number of taps above the threshold at any position.
    pub max_above_threshold: usize,
    /// Mean of `1 / Σ_j ρ_j²`.
    pub mean_participation: f64,
}

pub fn tap_usage(rho: &Tensor, threshold: f64) -> TapUsage {
    let s = rho.shape();
    let (outer, u_n, plane) = (s[0] * s[1], s[2], s[3] * s[4]);
    let (mut above_sum, mut part_sum, mut max_above) = (0usize, 0.0, 0usize);
    for o in 0..outer {
        for p in 0..plane {
            let ws = (0..u_n).map(|j| rho.data()[(o * u_n + j) * plane + p]);
            let above = ws.clone().filter(|&v| v > threshold).count();
            let sq: f64 = ws.map(|v| v * v).sum();
            above_sum += above;
            max_above = max_above.max(above);
            part_sum += 1.0 / sq;
        }
    }
    let n = (outer * plane) as f64;
    TapUsage {
        taps: u_n,
        mean_above_threshold: above_sum as f64 / n,
        max_above_threshold: max_above,
        mean_participation: part_sum / n,
    }
}

/// Writes attention weights (B×h×U×H×W) for the listed `(y, x)` pixels as
/// CSV with header `b,head,tap,y,x,weight`.
pub fn write_attention_csv(mut out: impl Write, rho: &Tensor, pixels: &[(usize, usize)]) -> Result<()> {
    let s = rho.shape();
    let (b_n, h_n, u_n, hh, ww) = (s[0], s[1], s[2], s[3], s[4]);
    writeln!(out, "b,head,tap,y,x,weight")?;
    for &(y, x) in pixels {
        if y >= hh || x >= ww {
            return Err(Error::invalid(format!("pixel ({y}, {x}) outside {hh}×{ww} attention map")));
        }
    }
    for b in 0..b_n {
        for head in 0..h_n {
            for j in 0..u_n {
                for &(y, x) in pixels {
                    let v = rho.data()[(((b * h_n + head) * u_n + j) * hh + y) * ww + x];
                    writeln!(out, "{b},{head},{j},{y},{x},{v}")?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn block(c: usize, h: usize, window: BaseWindow, init: ProjectionInit, seed: u64) -> (DsbBlock, ParamStore) {
        let cfg = DsbConfig {
            channels: c,
            heads: h,
            window,
        };
        let blk = DsbBlock::new("blk", &cfg).unwrap();
        let mut store = ParamStore::new();
        blk.register(&mut store, init, &mut rng(seed)).unwrap();
        (blk, store)
    }

    #[test]
    fn heads_must_divide_channels() {
        assert!(QkvProjection::new("p", 6, 4).is_err());
        assert!(QkvProjection::new("p", 0, 1).is_err());
        assert!(QkvProjection::new("p", 8, 4).is_ok());
    }

    #[test]
    fn identity_projection_passes_features_through() {
        let (blk, store) = block(4, 2, BaseWindow::square(3).unwrap(), ProjectionInit::Identity, 1);
        let mut r = rng(2);
        let fa = Tensor::uniform(&[1, 4, 5, 5], -1.0, 1.0, &mut r);
        let fb = Tensor::uniform(&[1, 4, 5, 5], -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let (a, b) = (tape.constant(fa.clone()), tape.constant(fb.clone()));
        let (q, k, v) = blk.proj.project(&mut tape, &p, a, b).unwrap();
        assert_eq!(tape.value(q), &fa);
        assert_eq!(tape.value(k), &fb);
        assert_eq!(tape.value(v), &fb);
        let h = blk.proj.head_view(&mut tape, q).unwrap();
        assert_eq!(tape.shape(h), &[1, 2, 2, 5, 5]);
        let back = blk.proj.merge_heads(&mut tape, h).unwrap();
        assert_eq!(tape.value(back), &fa);
    }

    #[test]
    fn zero_moving_features_give_bias_maps() {
        let (blk, mut store) = block(4, 2, BaseWindow::square(3).unwrap(), ProjectionInit::FanIn, 3);
        let bias_k = store.value("blk.proj.k.bias").unwrap().clone();
        *store.value_mut("blk.proj.k.bias").unwrap() = bias_k.clone();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let a = tape.constant(Tensor::ones(&[1, 4, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1, 4, 3, 3]));
        let (_, k, v) = blk.proj.project(&mut tape, &p, a, b).unwrap();
        let bias_v = store.value("blk.proj.v.bias").unwrap();
        for c in 0..4 {
            for s in 0..9 {
                assert_eq!(tape.value(k).data()[c * 9 + s], bias_k.data()[c]);
                assert_eq!(tape.value(v).data()[c * 9 + s], bias_v.data()[c]);
            }
        }
    }

    fn attention_of(q: &[f64], keys: &[&[f64]]) -> Vec<f64> {
        let d = q.len();
        let u = keys.len();
        let mut tape = Tape::new();
        let qt = tape.constant(Tensor::new(vec![1, d, 1, 1, 1], q.to_vec()).unwrap());
        let mut kd = vec![0.0; d * u];
        for (j, k) in keys.iter().enumerate() {
            for i in 0..d {
                kd[i * u + j] = k[i];
            }
        }
        let kt = tape.constant(Tensor::new(vec![1, d, 1, u, 1, 1], kd).unwrap());
        let rho = point_attention(&mut tape, qt, kt).unwrap();
        tape.value(rho).data().to_vec()
    }

    #[test]
    fn equal_keys_give_uniform_weights() {
        let key: &[f64] = &[1.0, 2.0];
        let w = attention_of(&[0.3, -2.0], &[key; 5]);
        for v in w {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn single_tap_gets_all_weight() {
        assert_eq!(attention_of(&[5.0, -1.0], &[&[3.0, 3.0]]), vec![1.0]);
    }

    #[test]
    fn two_tap_example() {
        // standalone scalar softmax of logits (1/√2, 0)
        let l0 = 1.0 / 2f64.sqrt();
        let z = l0.exp() + 1.0;
        let expected = [l0.exp() / z, 1.0 / z];
        let w = attention_of(&[1.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!((w[0] - expected[0]).abs() < 1e-12 && (w[1] - expected[1]).abs() < 1e-12);
        assert!((w[0] - 0.6698).abs() < 1e-4 && (w[1] - 0.3302).abs() < 1e-4);
    }

    #[test]
    fn fused_kernel_with_unit_channels_is_rho() {
        let mut r = rng(9);
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::uniform(&[1, 1, 4, 2, 2], -1.0, 1.0, &mut r));
        let rho = tape.softmax(logits, 2).unwrap();
        let ch = tape.constant(Tensor::ones(&[1]));
        let fused = fuse_kernel(rho, ch).fused(&tape);
        assert_eq!(fused.data(), tape.value(rho).data());
    }

    #[test]
    fn fused_kernel_is_outer_product() {
        let mut r = rng(10);
        let mut tape = Tape::new();
        let rho_t = Tensor::uniform(&[1, 2, 3, 2, 2], 0.0, 1.0, &mut r);
        let theta_t = Tensor::uniform(&[4], -1.0, 1.0, &mut r);
        let rho = tape.constant(rho_t.clone());
        let ch = tape.constant(theta_t.clone());
        let fused = fuse_kernel(rho, ch).fused(&tape);
        for c in 0..4 {
            for j in 0..3 {
                for s in 0..4 {
                    let expected = rho_t.data()[((c % 2) * 3 + j) * 4 + s] * theta_t.data()[c];
                    let got = fused.data()[(c * 3 + j) * 4 + s];
                    assert!((got - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn one_hot_kernel_selects_tap() {
        let mut tape = Tape::new();
        let mut rho_t = Tensor::zeros(&[1, 1, 3, 1, 1]);
        rho_t.data_mut()[1] = 1.0;
        let rho = tape.constant(rho_t);
        let ch = tape.constant(Tensor::new(vec![2], vec![2.0, -1.0]).unwrap());
        let fused = fuse_kernel(rho, ch).fused(&tape);
        assert_eq!(fused.data(), &[0.0, 2.0, 0.0, 0.0, -1.0, 0.0]);
    }

    #[test]
    fn aggregate_matches_loop_nest() {
        let (c, h, u, hw) = (4usize, 2usize, 9usize, 5usize);
        let (blk, store) = block(c, h, BaseWindow::square(3).unwrap(), ProjectionInit::FanIn, 11);
        let mut r = rng(12);
        let vm_t = Tensor::uniform(&[1, c, u, hw, hw], -1.0, 1.0, &mut r);
        let logits_t = Tensor::uniform(&[1, h, u, hw, hw], -2.0, 2.0, &mut r);
        let theta_t = Tensor::uniform(&[c], 0.5, 1.5, &mut r);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let logits = tape.constant(logits_t);
        let rho = tape.softmax(logits, 2).unwrap();
        let theta = tape.constant(theta_t.clone());
        let vm = tape.constant(vm_t.clone());
        let vh = blk.proj.head_view(&mut tape, vm).unwrap();
        let kern = fuse_kernel(rho, theta);
        let out = aggregate(&mut tape, &p, &blk.proj, &kern, vh).unwrap();
        let rho_t = tape.value(rho).clone();

        let wo = store.value("blk.proj.out.weight").unwrap();
        let bo = store.value("blk.proj.out.bias").unwrap();
        let mut expected = vec![0.0; c * hw * hw];
        for y in 0..hw {
            for x in 0..hw {
                let mut a = vec![0.0; c];
                for (ch, acc) in a.iter_mut().enumerate() {
                    for j in 0..u {
                        let wgt = rho_t.data()[(((ch % h) * u + j) * hw + y) * hw + x] * theta_t.data()[ch];
                        *acc += wgt * vm_t.data()[((ch * u + j) * hw + y) * hw + x];
                    }
                }
                for co in 0..c {
                    let mut s = bo.data()[co];
                    for (ci, av) in a.iter().enumerate() {
                        s += wo.data()[co * c + ci] * av;
                    }
                    expected[(co * hw + y) * hw + x] = s;
                }
            }
        }
        for (g, e) in tape.value(out).data().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-10, "{g} vs {e}");
        }
    }

    #[test]
    fn aggregate_rejects_tap_mismatch() {
        let (blk, store) = block(2, 1, BaseWindow::square(3).unwrap(), ProjectionInit::FanIn, 13);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let rho = tape.constant(Tensor::ones(&[1, 1, 4, 2, 2]));
        let theta = tape.constant(Tensor::ones(&[2]));
        let vm = tape.constant(Tensor::ones(&[1, 2, 1, 9, 2, 2]));
        assert!(aggregate(&mut tape, &p, &blk.proj, &fuse_kernel(rho, theta), vm).is_err());
    }

    #[test]
    fn uniform_attention_averages_samples() {
        let mut r = rng(14);
        let (blk, store) = block(2, 1, BaseWindow::square(3).unwrap(), ProjectionInit::Identity, 15);
        let vm_t = Tensor::uniform(&[1, 2, 9, 3, 3], -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let theta = p.var("blk.channel_weight");
        let vm = tape.constant(vm_t.clone());
        // one head of width 2: weights B×1×U×H×W
        let rho1 = tape.constant(Tensor::full(&[1, 1, 9, 3, 3], 1.0 / 9.0));
        let vh = blk.proj.head_view(&mut tape, vm).unwrap();
        let out = aggregate(&mut tape, &p, &blk.proj, &fuse_kernel(rho1, theta), vh).unwrap();
        for c in 0..2 {
            for s in 0..9 {
                let mean: f64 = (0..9).map(|j| vm_t.data()[(c * 9 + j) * 9 + s]).sum::<f64>() / 9.0;
                assert!((tape.value(out).data()[c * 9 + s] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn center_one_hot_passes_values_through() {
        let mut r = rng(16);
        let (blk, store) = block(4, 2, BaseWindow::square(3).unwrap(), ProjectionInit::Identity, 17);
        let fb = Tensor::uniform(&[1, 4, 6, 6], -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let a = tape.constant(Tensor::zeros(&[1, 4, 6, 6]));
        let b = tape.constant(fb.clone());
        let (_, k, v) = blk.proj.project(&mut tape, &p, a, b).unwrap();
        let off = tape.constant(Tensor::zeros(&[1, 9, 2, 6, 6]));
        let coords = deform_window(&mut tape, &blk.window, off).unwrap();
        let (_, vm) = sample_deformed_kv(&mut tape, k, v, coords).unwrap();
        let vh = blk.proj.head_view(&mut tape, vm).unwrap();
        let mut one_hot = Tensor::zeros(&[1, 2, 9, 6, 6]);
        for head in 0..2 {
            for s in 0..36 {
                one_hot.data_mut()[(head * 9 + 4) * 36 + s] = 1.0;
            }
        }
        let rho = tape.constant(one_hot);
        let out = aggregate(&mut tape, &p, &blk.proj, &fuse_kernel(rho, p.var("blk.channel_weight")), vh).unwrap();
        assert_eq!(tape.value(out), &fb);
    }

    #[test]
    fn block_output_shape_matches_input() {
        let (blk, store) = block(4, 2, BaseWindow::cross(1), ProjectionInit::FanIn, 18);
        let mut r = rng(19);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let a = tape.constant(Tensor::uniform(&[2, 4, 5, 7], -1.0, 1.0, &mut r));
        let b = tape.constant(Tensor::uniform(&[2, 4, 5, 7], -1.0, 1.0, &mut r));
        let out = blk.forward(&mut tape, &p, a, b).unwrap();
        assert_eq!(tape.shape(out.features), &[2, 4, 5, 7]);
        assert_eq!(tape.shape(out.attention), &[2, 2, 5, 5, 7]);
        assert!(normalization_error(tape.value(out.attention)) < 1e-12);
    }

    #[test]
    fn doubling_taps_changes_only_offset_output_params() {
        let c9 = DsbConfig {
            channels: 16,
            heads: 4,
            window: BaseWindow::square(3).unwrap(),
        };
        let taps18: Vec<_> = (0..18)
            .map(|i| crate::sampling::Tap {
                dy: (i / 6) as f64 - 1.0,
                dx: (i % 6) as f64 - 2.5,
            })
            .collect();
        let c18 = DsbConfig {
            window: BaseWindow::custom(taps18).unwrap(),
            ..c9.clone()
        };
        let a = count_flops_params(&c9, [1, 16, 8, 8]).unwrap();
        let b = count_flops_params(&c18, [1, 16, 8, 8]).unwrap();
        assert!(b.flops > a.flops);
        // offset output conv: C·2U·9 weights + 2U biases
        let delta = (16 * 2 * 9 * 9 + 2 * 9) as u64;
        assert_eq!(b.params - a.params, delta);
    }

    #[test]
    fn attention_flops_scale_with_taps() {
        let cfg = |w| DsbConfig {
            channels: 16,
            heads: 4,
            window: w,
        };
        let one = count_flops_params(&cfg(BaseWindow::square(1).unwrap()), [1, 16, 8, 8]).unwrap();
        let nine = count_flops_params(&cfg(BaseWindow::square(3).unwrap()), [1, 16, 8, 8]).unwrap();
        assert_eq!(nine.attention_flops, 9 * one.attention_flops);
    }

    #[test]
    fn zero_channels_rejected() {
        let cfg = DsbConfig {
            channels: 0,
            heads: 1,
            window: BaseWindow::square(3).unwrap(),
        };
        assert!(count_flops_params(&cfg, [1, 0, 8, 8]).is_err());
    }

    #[test]
    fn attention_csv_layout() {
        let rho = Tensor::from_fn(&[1, 1, 2, 2, 2], |i| i as f64 / 8.0);
        let mut buf = Vec::new();
        write_attention_csv(&mut buf, &rho, &[(1, 0)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "b,head,tap,y,x,weight\n0,0,0,1,0,0.25\n0,0,1,1,0,0.75\n");
        assert!(write_attention_csv(Vec::new(), &rho, &[(2, 0)]).is_err());
    }

    #[test]
    fn tap_usage_of_uniform_and_one_hot() {
        let uniform = Tensor::full(&[1, 1, 4, 1, 2], 0.25);
        let u = tap_usage(&uniform, 1e-3);
        assert_eq!(u.max_above_threshold, 4);
        assert!((u.mean_participation - 4.0).abs() < 1e-12);
        let one_hot = Tensor::new(vec![1, 1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let o = tap_usage(&one_hot, 1e-3);
        assert_eq!(o.mean_above_threshold, 1.0);
        assert!((o.mean_participation - 1.0).abs() < 1e-12);
    }
}
