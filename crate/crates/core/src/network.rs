//! Symmetric registration model and the differentiable warp.
//!
//! The same parameters serve both directions: `phi_a2b` comes from
//! `(x_a, x_b)` and `phi_b2a` from `(x_b, x_a)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{BlockCost, DsbBlock, DsbConfig, DsbOutput, ProjectionInit};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, Init, LEAKY_SLOPE};
use crate::ops::ConvGeom;
use crate::params::{Bound, ParamStore};
use crate::sampling::BaseWindow;
use crate::tensor::Tensor;

/// Downsampling factor between images and the feature maps.
pub const FLOW_STRIDE: usize = 4;

/// Identity sampling grid `(x, y)` as B×1×2×H×W.
pub fn identity_grid(b: usize, h: usize, w: usize) -> Tensor {
    BaseWindow::square(1).unwrap().lattice(b, h, w)
}

/// Resamples `image` (B×C×H×W) at `(x + φ_x, y + φ_y)`, clamped to the
/// image box. `phi` is B×2×H×W with channel 0 the x displacement.
pub fn warp(tape: &mut Tape, image: Var, phi: Var) -> Result<Var> {
    let is = tape.shape(image).to_vec();
    let ps = tape.shape(phi).to_vec();
    if is.len() != 4 || ps != [is[0], 2, is[2], is[3]] {
        return Err(Error::shape(
            "warp",
            format!("image {:?} needs a B×2×H×W field, got {:?}", is, ps),
        ));
    }
    let (b, c, h, w) = (is[0], is[1], is[2], is[3]);
    let grid = tape.constant(identity_grid(b, h, w));
    let disp = tape.reshape(phi, &[b, 1, 2, h, w])?;
    let raw = tape.add(grid, disp)?;
    let coords = tape.clamp_coords(raw, h, w)?;
    let sampled = tape.grid_sample(image, coords)?;
    tape.reshape(sampled, &[b, c, h, w])
}

/// Bilinear upsampling by an integer factor using half-pixel centres.
pub fn upsample(tape: &mut Tape, x: Var, factor: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h * factor, w * factor);
    let f = factor as f64;
    let mut coords = Tensor::zeros(&[b, 1, 2, ho, wo]);
    let plane = ho * wo;
    for bi in 0..b {
        let base = bi * 2 * plane;
        for y in 0..ho {
            let sy = ((y as f64 + 0.5) / f - 0.5).clamp(0.0, (h - 1) as f64);
            for xx in 0..wo {
                let sx = ((xx as f64 + 0.5) / f - 0.5).clamp(0.0, (w - 1) as f64);
                coords.data_mut()[base + y * wo + xx] = sx;
                coords.data_mut()[base + plane + y * wo + xx] = sy;
            }
        }
    }
    let coords = tape.constant(coords);
    let up = tape.grid_sample(x, coords)?;
    tape.reshape(up, &[b, c, ho, wo])
}

/// Attention-weighted mean of the base tap offsets: B×2h×H×W with the x
/// components of every head first.
pub fn expected_tap_displacement(tape: &mut Tape, window: &BaseWindow, attention: Var) -> Result<Var> {
    let s = tape.shape(attention).to_vec();
    let (b, heads, u, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let per = u * h * w;
    let taps = window.taps();
    let rel = Tensor::from_fn(&[b, 2, heads, u, h, w], |k| {
        let comp = (k / (heads * per)) % 2;
        let tap = &taps[(k / (h * w)) % u];
        if comp == 0 { tap.dx } else { tap.dy }
    });
    let rel = tape.constant(rel);
    let mean = tape.tap_sum(attention, rel)?;
    tape.reshape(mean, &[b, 2 * heads, h, w])
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    pub window: BaseWindow,
    /// Number of alternating blocks.
    pub depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            heads: 4,
            window: BaseWindow::square(3).unwrap(),
            depth: 2,
        }
    }
}

/// Encoder (two stride-2 convolutions), `depth` alternating blocks, and a
/// flow head predicting displacement at quarter resolution.
#[derive(Clone, Debug)]
pub struct RegistrationModel {
    pub config: ModelConfig,
    pub encoder: [Conv; 2],
    pub blocks: Vec<DsbBlock>,
    pub flow_hidden: Conv,
    pub flow_out: Conv,
}

/// Per-direction output of the model.
#[derive(Clone, Debug)]
pub struct DirectionOutput {
    /// B×2×H×W displacement in image pixels.
    pub phi: Var,
    pub blocks: Vec<DsbOutput>,
}

impl RegistrationModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let c = config.channels;
        if c < 2 || c % 2 != 0 {
            return Err(Error::invalid(format!("channels must be even and at least 2, got {c}")));
        }
        if config.depth == 0 {
            return Err(Error::invalid("depth must be at least 1"));
        }
        let down = ConvGeom { stride: 2, padding: 1 };
        let encoder = [
            Conv::new("encoder.conv1", 1, c / 2, 3, down),
            Conv::new("encoder.conv2", c / 2, c, 3, down),
        ];
        let dsb = DsbConfig {
            channels: c,
            heads: config.heads,
            window: config.window.clone(),
        };
        let blocks = (0..config.depth)
            .map(|t| DsbBlock::new(&format!("dsb{t}"), &dsb))
            .collect::<Result<Vec<_>>>()?;
        Ok(RegistrationModel {
            encoder,
            blocks,
            flow_hidden: Conv::new("flow.conv1", 2 * c + 2 * config.heads * config.depth, c, 3, ConvGeom::same(3)),
            flow_out: Conv::new("flow.conv2", c, 2, 3, ConvGeom::same(3)),
            config,
        })
    }

    /// Fresh parameters: fan-in uniform convolutions, zero offset and flow
    /// output layers, unit channel weights.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for conv in &self.encoder {
            conv.register(&mut store, Init::FanIn, &mut rng)?;
        }
        for blk in &self.blocks {
            blk.register(&mut store, ProjectionInit::FanIn, &mut rng)?;
        }
        self.flow_hidden.register(&mut store, Init::FanIn, &mut rng)?;
        self.flow_out.register(&mut store, Init::Zero, &mut rng)?;
        Ok(store)
    }

    pub fn check_input(&self, x: &[usize]) -> Result<()> {
        if x.len() != 4 || x[1] != 1 || x[2] % FLOW_STRIDE != 0 || x[3] % FLOW_STRIDE != 0 || x[2] == 0 || x[3] == 0 {
            return Err(Error::shape(
                "model_forward",
                format!("images must be B×1×H×W with H, W positive multiples of {FLOW_STRIDE}, got {x:?}"),
            ));
        }
        Ok(())
    }

    fn encode(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.encoder {
            h = conv.forward(tape, p, h)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        Ok(h)
    }

    /// Displacement that warps `x_a` onto `x_b`.
    pub fn forward_direction(&self, tape: &mut Tape, p: &Bound, x_a: Var, x_b: Var) -> Result<DirectionOutput> {
        let sa = tape.shape(x_a).to_vec();
        let sb = tape.shape(x_b).to_vec();
        if sa != sb {
            return Err(Error::shape("model_forward", format!("x_a {:?} vs x_b {:?}", sa, sb)));
        }
        self.check_input(&sa)?;
        let mut f_a = self.encode(tape, p, x_a)?;
        let mut f_b = self.encode(tape, p, x_b)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for (t, blk) in self.blocks.iter().enumerate() {
            if t % 2 == 0 {
                let o = blk.forward(tape, p, f_a, f_b)?;
                f_a = tape.add(f_a, o.features)?;
                outs.push(o);
            } else {
                let o = blk.forward(tape, p, f_b, f_a)?;
                f_b = tape.add(f_b, o.features)?;
                outs.push(o);
            }
        }
        let mut parts = vec![f_a, f_b];
        for o in &outs {
            parts.push(expected_tap_displacement(tape, &self.config.window, o.attention)?);
        }
        let fused = tape.concat_channels(&parts)?;
        let h = self.flow_hidden.forward(tape, p, fused)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let low = self.flow_out.forward(tape, p, h)?;
        let up = upsample(tape, low, FLOW_STRIDE)?;
        let phi = tape.scale(up, FLOW_STRIDE as f64);
        Ok(DirectionOutput { phi, blocks: outs })
    }

    /// `(phi_a2b, phi_b2a)` with shared weights.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x_a: Var, x_b: Var) -> Result<(DirectionOutput, DirectionOutput)> {
        let a2b = self.forward_direction(tape, p, x_a, x_b)?;
        let b2a = self.forward_direction(tape, p, x_b, x_a)?;
        Ok((a2b, b2a))
    }

    /// Convenience: both fields as plain tensors.
    pub fn register_pair(&self, store: &ParamStore, x_a: &Tensor, x_b: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let a = tape.constant(x_a.clone());
        let b = tape.constant(x_b.clone());
        let (fa, fb) = self.forward(&mut tape, &p, a, b)?;
        Ok((tape.value(fa.phi).clone(), tape.value(fb.phi).clone()))
    }

    /// Analytic cost of one direction on a B×1×H×W input.
    pub fn cost(&self, b: usize, h: usize, w: usize) -> BlockCost {
        let (h2, w2) = (h / 2, w / 2);
        let (h4, w4) = (h / 4, w / 4);
        let encoder = 2 * (self.encoder[0].macs(b, h, w) + self.encoder[1].macs(b, h2, w2));
        let blocks: Vec<BlockCost> = self.blocks.iter().map(|blk| blk.cost(b, h4, w4)).collect();
        let head = self.flow_hidden.macs(b, h4, w4) + self.flow_out.macs(b, h4, w4);
        // four bilinear taps per upsampled displacement component
        let upsample = (b * h * w * 2 * 4) as u64;
        let params = self.encoder.iter().map(Conv::param_count).sum::<usize>()
            + self.flow_hidden.param_count()
            + self.flow_out.param_count();
        BlockCost {
            flops: encoder + blocks.iter().map(|c| c.flops).sum::<u64>() + head + upsample,
            attention_flops: blocks.iter().map(|c| c.attention_flops).sum(),
            params: params as u64 + blocks.iter().map(|c| c.params).sum::<u64>(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn zero_field_warp_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::uniform(&[2, 3, 5, 6], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let i = tape.constant(img.clone());
        let phi = tape.constant(Tensor::zeros(&[2, 2, 5, 6]));
        let out = warp(&mut tape, i, phi).unwrap();
        assert_eq!(tape.value(out), &img);
    }

    #[test]
    fn unit_x_field_pulls_from_the_right() {
        // output(y, x) = input(y, x + 1): a hot pixel at column 5 appears at column 4.
        let mut img = Tensor::zeros(&[1, 1, 8, 8]);
        img.set4(0, 0, 3, 5, 1.0);
        let mut phi = Tensor::zeros(&[1, 2, 8, 8]);
        for i in 0..64 {
            phi.data_mut()[i] = 1.0;
        }
        let mut tape = Tape::new();
        let i = tape.constant(img);
        let p = tape.constant(phi);
        let out = warp(&mut tape, i, p).unwrap();
        let o = tape.value(out);
        let mut expected = Tensor::zeros(&[1, 1, 8, 8]);
        for y in 0..8 {
            for x in 0..8 {
                let src = (x + 1).min(7);
                if y == 3 && src == 5 {
                    expected.set4(0, 0, y, x, 1.0);
                }
            }
        }
        assert_eq!(o, &expected);
    }

    #[test]
    fn constant_fields_compose() {
        // bilinear images are reproduced exactly by bilinear interpolation
        let img = Tensor::from_fn(&[1, 1, 12, 12], |i| {
            let (y, x) = ((i / 12) as f64, (i % 12) as f64);
            0.2 + 0.03 * x - 0.02 * y + 0.001 * x * y
        });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let (ux, uy, vx, vy): (f64, f64, f64, f64) =
                (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let field = |dx: f64, dy: f64| Tensor::from_fn(&[1, 2, 12, 12], |i| if i < 144 { dx } else { dy });
            let mut tape = Tape::new();
            let im = tape.constant(img.clone());
            let u = tape.constant(field(ux, uy));
            let v = tape.constant(field(vx, vy));
            let uv = tape.constant(field(ux + vx, uy + vy));
            let w1 = warp(&mut tape, im, u).unwrap();
            let two = warp(&mut tape, w1, v).unwrap();
            let one = warp(&mut tape, im, uv).unwrap();
            for y in 3..9 {
                for x in 3..9 {
                    let a = tape.value(two).at4(0, 0, y, x);
                    let b = tape.value(one).at4(0, 0, y, x);
                    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn warp_rejects_bad_field() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let p = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        assert!(warp(&mut tape, i, p).is_err());
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 3, 3], 1.5));
        let up = upsample(&mut tape, x, 4).unwrap();
        assert_eq!(tape.shape(up), &[1, 2, 12, 12]);
        assert!(tape.value(up).data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn zero_head_gives_zero_fields() {
        let model = RegistrationModel::new(ModelConfig::default()).unwrap();
        let store = model.init_params(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut rng);
        let (a, b) = model.register_pair(&store, &x, &x).unwrap();
        assert_eq!(a.shape(), &[1, 2, 16, 16]);
        assert!(a.data().iter().chain(b.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_shapes() {
        let model = RegistrationModel::new(ModelConfig::default()).unwrap();
        let store = model.init_params(3).unwrap();
        let x = Tensor::zeros(&[1, 1, 16, 16]);
        let y = Tensor::zeros(&[1, 1, 16, 20]);
        assert!(model.register_pair(&store, &x, &y).is_err());
        let odd = Tensor::zeros(&[1, 1, 18, 18]);
        assert!(model.register_pair(&store, &odd, &odd).is_err());
    }

    #[test]
    fn cost_params_match_store() {
        let model = RegistrationModel::new(ModelConfig::default()).unwrap();
        let store = model.init_params(0).unwrap();
        assert_eq!(model.cost(1, 32, 32).params as usize, store.count());
    }
}
