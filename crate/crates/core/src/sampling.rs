//! Static sample windows, predicted offsets, deformed windows and
//! bilinear sampling of keys and values.

use std::fmt;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, Init, LEAKY_SLOPE};
use crate::ops::{bilinear_corner, ConvGeom};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// One tap of a window, relative to the centre pixel, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub dy: f64,
    pub dx: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum WindowShape {
    Square(usize),
    /// Plus sign with arms of the given radius (`4r + 1` taps).
    Cross(usize),
    /// Diagonal cross with arms of the given radius (`4r + 1` taps).
    Diagonal(usize),
    Custom,
}

impl fmt::Display for WindowShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WindowShape::Square(k) => write!(f, "square{k}"),
            WindowShape::Cross(r) => write!(f, "cross{}", 4 * r + 1),
            WindowShape::Diagonal(r) => write!(f, "diagonal{}", 4 * r + 1),
            WindowShape::Custom => f.write_str("custom"),
        }
    }
}

/// The static receptive field: a nonempty list of unique relative taps.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseWindow {
    taps: Vec<Tap>,
    shape: WindowShape,
}

impl BaseWindow {
    /// `k`×`k` integer lattice centred on the origin, row-major. `k` must be odd.
    pub fn square(k: usize) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(Error::invalid(format!("square window size must be odd, got {k}")));
        }
        let r = (k / 2) as i64;
        let taps = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| Tap { dy: dy as f64, dx: dx as f64 }))
            .collect();
        Ok(BaseWindow {
            taps,
            shape: WindowShape::Square(k),
        })
    }

    pub fn cross(radius: usize) -> Self {
        let mut taps = vec![Tap { dy: 0.0, dx: 0.0 }];
        for i in 1..=radius as i64 {
            let i = i as f64;
            taps.extend([
                Tap { dy: -i, dx: 0.0 },
                Tap { dy: 0.0, dx: -i },
                Tap { dy: 0.0, dx: i },
                Tap { dy: i, dx: 0.0 },
            ]);
        }
        BaseWindow {
            taps,
            shape: WindowShape::Cross(radius),
        }
    }

    pub fn diagonal(radius: usize) -> Self {
        let mut taps = vec![Tap { dy: 0.0, dx: 0.0 }];
        for i in 1..=radius as i64 {
            let i = i as f64;
            taps.extend([
                Tap { dy: -i, dx: -i },
                Tap { dy: -i, dx: i },
                Tap { dy: i, dx: -i },
                Tap { dy: i, dx: i },
            ]);
        }
        BaseWindow {
            taps,
            shape: WindowShape::Diagonal(radius),
        }
    }

    pub fn custom(taps: Vec<Tap>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::invalid("window must have at least one tap"));
        }
        for (i, a) in taps.iter().enumerate() {
            if !a.dx.is_finite() || !a.dy.is_finite() {
                return Err(Error::invalid(format!("tap {i} is not finite")));
            }
            if taps[..i].iter().any(|b| b == a) {
                return Err(Error::invalid(format!("duplicate tap ({}, {})", a.dy, a.dx)));
            }
        }
        Ok(BaseWindow {
            taps,
            shape: WindowShape::Custom,
        })
    }

    /// Parses `"dy dx"` pairs, one per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut taps = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let nums: Vec<&str> = line.split_whitespace().collect();
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: {s:?} is not a number", n + 1)))
            };
            match nums.as_slice() {
                [dy, dx] => taps.push(Tap {
                    dy: parse(dy)?,
                    dx: parse(dx)?,
                }),
                _ => {
                    return Err(Error::Format(format!(
                        "line {}: expected \"dy dx\", got {line:?}",
                        n + 1
                    )))
                }
            }
        }
        Self::custom(taps)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Named shapes: `squareK`, `crossN` / `diagonalN` with `N = 4r + 1` taps,
    /// or `file:PATH`.
    pub fn from_spec(spec: &str) -> Result<Self> {
        if let Some(path) = spec.strip_prefix("file:") {
            return Self::load(path);
        }
        let num = |prefix: &str| spec.strip_prefix(prefix).and_then(|s| s.parse::<usize>().ok());
        if let Some(k) = num("square") {
            return Self::square(k);
        }
        let arms = |n: usize| {
            if n >= 1 && (n - 1) % 4 == 0 {
                Ok((n - 1) / 4)
            } else {
                Err(Error::invalid(format!("{spec}: tap count must be 4r+1")))
            }
        };
        if let Some(n) = num("cross") {
            return Ok(Self::cross(arms(n)?));
        }
        if let Some(n) = num("diagonal") {
            return Ok(Self::diagonal(arms(n)?));
        }
        Err(Error::invalid(format!("unknown window shape {spec:?}")))
    }

    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn shape(&self) -> &WindowShape {
        &self.shape
    }

    /// Index of the `(0, 0)` tap, if the window has one.
    pub fn center(&self) -> Option<usize> {
        self.taps.iter().position(|t| t.dx == 0.0 && t.dy == 0.0)
    }

    /// Same taps in the order `perm[new] = old`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        BaseWindow {
            taps: perm.iter().map(|&i| self.taps[i]).collect(),
            shape: WindowShape::Custom,
        }
    }

    /// Absolute static coordinates `(x + dx, y + dy)` as B×U×2×H×W, unclamped.
    pub fn lattice(&self, b: usize, h: usize, w: usize) -> Tensor {
        let u_n = self.taps.len();
        let mut t = Tensor::zeros(&[b, u_n, 2, h, w]);
        let plane = h * w;
        let data = t.data_mut();
        for bi in 0..b {
            for (j, tap) in self.taps.iter().enumerate() {
                let base = (bi * u_n + j) * 2 * plane;
                for y in 0..h {
                    for x in 0..w {
                        data[base + y * w + x] = x as f64 + tap.dx;
                        data[base + plane + y * w + x] = y as f64 + tap.dy;
                    }
                }
            }
        }
        t
    }
}

/// The convolutional offset predictor: `[f_a, f_b]` → 3×3 conv (2C→C) →
/// leaky-ReLU → 3×3 conv (C→2|U|), reshaped to B×|U|×2×H×W with component
/// 0 the x offset and 1 the y offset.
#[derive(Clone, Debug)]
pub struct OffsetNet {
    pub hidden: Conv,
    pub out: Conv,
    pub channels: usize,
    pub taps: usize,
}

impl OffsetNet {
    pub fn new(prefix: &str, channels: usize, taps: usize) -> Self {
        OffsetNet {
            hidden: Conv::new(&format!("{prefix}.conv1"), 2 * channels, channels, 3, ConvGeom::same(3)),
            out: Conv::new(&format!("{prefix}.conv2"), channels, 2 * taps, 3, ConvGeom::same(3)),
            channels,
            taps,
        }
    }

    /// Hidden layer from fan-in init, output layer zeroed.
    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.hidden.register(store, Init::FanIn, rng)?;
        self.out.register(store, Init::Zero, rng)
    }

    pub fn param_count(&self) -> usize {
        self.hidden.param_count() + self.out.param_count()
    }

    pub fn predict(&self, tape: &mut Tape, p: &Bound, f_a: Var, f_b: Var) -> Result<Var> {
        let sa = tape.shape(f_a).to_vec();
        let sb = tape.shape(f_b).to_vec();
        if sa != sb || sa.len() != 4 {
            return Err(Error::shape("predict_offsets", format!("f_a {:?} vs f_b {:?}", sa, sb)));
        }
        if 2 * sa[1] != self.hidden.in_ch {
            return Err(Error::shape(
                "predict_offsets",
                format!(
                    "offset net expects {} input channels, [f_a, f_b] has {}",
                    self.hidden.in_ch,
                    2 * sa[1]
                ),
            ));
        }
        let x = tape.concat_channels(&[f_a, f_b])?;
        let h = self.hidden.forward(tape, p, x)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let o = self.out.forward(tape, p, h)?;
        tape.reshape(o, &[sa[0], self.taps, 2, sa[2], sa[3]])
    }
}

/// Absolute, clamped sample coordinates `lattice + offsets`, B×U×2×H×W.
pub fn deform_window(tape: &mut Tape, base: &BaseWindow, offsets: Var) -> Result<Var> {
    let s = tape.shape(offsets).to_vec();
    if s.len() != 5 || s[1] != base.len() || s[2] != 2 {
        return Err(Error::shape(
            "deform_window",
            format!("offsets {:?} must be B×{}×2×H×W", s, base.len()),
        ));
    }
    let lattice = tape.constant(base.lattice(s[0], s[3], s[4]));
    let raw = tape.add(lattice, offsets)?;
    tape.clamp_coords(raw, s[3], s[4])
}

/// Bilinear sampling of `field` (B×C×H×W) at `coords` (B×U×2×Ho×Wo),
/// giving B×C×U×Ho×Wo.
pub fn bilinear_sample(tape: &mut Tape, field: Var, coords: Var) -> Result<Var> {
    tape.grid_sample(field, coords)
}

/// Deformed keys and values sampled at identical coordinates.
pub fn sample_deformed_kv(tape: &mut Tape, k: Var, v: Var, coords: Var) -> Result<(Var, Var)> {
    let (ks, vs) = (tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if ks.len() != 4 || vs.len() != 4 || ks[0] != vs[0] || ks[2..] != vs[2..] {
        return Err(Error::shape(
            "sample_deformed_kv",
            format!("keys {:?} and values {:?} must share B, H, W", ks, vs),
        ));
    }
    Ok((tape.grid_sample(k, coords)?, tape.grid_sample(v, coords)?))
}

/// The four bilinear neighbours of `(x, y)` in a `h`×`w` grid with their
/// weights, as `((row, col), weight)`.
pub fn bilinear_weights(x: f64, y: f64, h: usize, w: usize) -> [((usize, usize), f64); 4] {
    let (x0, x1, fx) = bilinear_corner(x, w);
    let (y0, y1, fy) = bilinear_corner(y, h);
    [
        ((y0, x0), (1.0 - fx) * (1.0 - fy)),
        ((y0, x1), fx * (1.0 - fy)),
        ((y1, x0), (1.0 - fx) * fy),
        ((y1, x1), fx * fy),
    ]
}
