//! Seeded synthetic image pairs with labels and a known generating field.
//!
//! A scene is a smooth background plus a few soft-edged ellipses, each
//! carrying a label. The moving image is the scene resampled through the
//! generating field, so `x_b ≈ warp(x_a, phi_true)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::LabelMap;
use crate::tensor::Tensor;

/// Smallest side accepted by [`synthetic_pair`].
pub const MIN_SIZE: usize = 16;
/// Labels used by the synthetic scenes.
pub const LABELS: [u32; 3] = [1, 2, 3];

/// One step of the splitmix64 generator.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-component seeds derived from the single run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStreams {
    pub init: u64,
    pub data: u64,
    pub shuffle: u64,
    pub eval: u64,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        SeedStreams {
            init: splitmix64(&mut s),
            data: splitmix64(&mut s),
            shuffle: splitmix64(&mut s),
            eval: splitmix64(&mut s),
        }
    }

    /// Seed of the `i`-th pair drawn from `stream`.
    pub fn pair_seed(stream: u64, i: usize) -> u64 {
        let mut s = stream ^ (i as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
        splitmix64(&mut s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PairKind {
    /// Constant displacement `(dx, dy)`.
    Translate { dx: f64, dy: f64 },
    /// Rotation about the image centre.
    Rotate { degrees: f64 },
    /// Smooth random field whose largest displacement is `max_disp` pixels.
    Elastic { max_disp: f64 },
}

/// Kind names accepted on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairFamily {
    Translate,
    Rotate,
    Elastic,
}

impl FromStr for PairFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translate" => Ok(PairFamily::Translate),
            "rotate" => Ok(PairFamily::Rotate),
            "elastic" => Ok(PairFamily::Elastic),
            other => Err(Error::invalid(format!(
                "unknown pair kind '{other}' (expected translate, rotate or elastic)"
            ))),
        }
    }
}

impl fmt::Display for PairFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairFamily::Translate => "translate",
            PairFamily::Rotate => "rotate",
            PairFamily::Elastic => "elastic",
        })
    }
}

impl PairFamily {
    /// Draws the kind's parameters: translations and elastic peaks up to
    /// `max_disp` pixels, rotations up to ±10°.
    pub fn draw(self, max_disp: f64, rng: &mut impl Rng) -> PairKind {
        match self {
            PairFamily::Translate => PairKind::Translate {
                dx: rng.gen_range(-max_disp..=max_disp),
                dy: rng.gen_range(-max_disp..=max_disp),
            },
            PairFamily::Rotate => PairKind::Rotate { degrees: rng.gen_range(-10.0..=10.0) },
            PairFamily::Elastic => PairKind::Elastic { max_disp },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    /// 1×1×H×W.
    pub x_a: Tensor,
    pub x_b: Tensor,
    pub seg_a: LabelMap,
    pub seg_b: LabelMap,
    /// 1×2×H×W field with `x_b ≈ x_a ∘ phi_true`.
    pub phi_true: Option<Tensor>,
}

#[derive(Clone, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
    intensity: f64,
    label: u32,
}

impl Blob {
    /// Normalised elliptic radius: 1 on the boundary.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (u, v) = (x - self.cx, y - self.cy);
        let a = (self.cos * u + self.sin * v) / self.rx;
        let b = (-self.sin * u + self.cos * v) / self.ry;
        (a * a + b * b).sqrt()
    }
}

#[derive(Clone, Debug)]
struct Scene {
    blobs: Vec<Blob>,
    bg: [(f64, f64, f64, f64); 2],
}

impl Scene {
    fn random(h: usize, w: usize, rng: &mut impl Rng) -> Scene {
        let scale = (h.min(w) as f64) / 32.0;
        let intensities = [0.45, 0.7, 0.95];
        let blobs = LABELS
            .iter()
            .zip(intensities)
            .map(|(&label, intensity)| {
                let rx = rng.gen_range(3.0..6.0) * scale;
                let ry = rng.gen_range(3.0..6.0) * scale;
                let margin = rx.max(ry) + 2.0;
                let angle: f64 = rng.gen_range(0.0..PI);
                Blob {
                    cx: rng.gen_range(margin..(w as f64 - 1.0 - margin)),
                    cy: rng.gen_range(margin..(h as f64 - 1.0 - margin)),
                    rx,
                    ry,
                    cos: angle.cos(),
                    sin: angle.sin(),
                    intensity,
                    label,
                }
            })
            .collect();
        let mut wave = || {
            (
                rng.gen_range(-1.5..1.5) * 2.0 * PI / w as f64,
                rng.gen_range(-1.5..1.5) * 2.0 * PI / h as f64,
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.03..0.08),
            )
        };
        let bg = [wave(), wave()];
        Scene { blobs, bg }
    }

    fn intensity(&self, x: f64, y: f64) -> f64 {
        let mut v = 0.2;
        for &(fx, fy, ph, amp) in &self.bg {
            v += amp * (fx * x + fy * y + ph).sin();
        }
        for blob in &self.blobs {
            // about one pixel of soft edge
            let depth = (1.0 - blob.radius(x, y)) * blob.rx.min(blob.ry);
            let m = 1.0 / (1.0 + (-2.5 * depth).exp());
            v = v * (1.0 - m) + blob.intensity * m;
        }
        v
    }

    fn label(&self, x: f64, y: f64) -> u32 {
        self.blobs
            .iter()
            .rev()
            .find(|b| b.radius(x, y) <= 1.0)
            .map_or(0, |b| b.label)
    }
}

fn elastic_field(h: usize, w: usize, max_disp: f64, rng: &mut impl Rng) -> Tensor {
    loop {
        let mut modes = Vec::new();
        for _comp in 0..2 {
            let m: Vec<(f64, f64, f64, f64)> = (0..4)
                .map(|_| {
                    (
                        rng.gen_range(-1.0..1.0) * 2.0 * PI / w as f64,
                        rng.gen_range(-1.0..1.0) * 2.0 * PI / h as f64,
                        rng.gen_range(0.0..2.0 * PI),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            modes.push(m);
        }
        let mut phi = Tensor::from_fn(&[1, 2, h, w], |k| {
            let (c, y, x) = (k / (h * w), (k / w) % h, k % w);
            modes[c]
                .iter()
                .map(|&(fx, fy, ph, a)| a * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum()
        });
        let plane = h * w;
        let peak = (0..plane)
            .map(|i| phi.data()[i].hypot(phi.data()[plane + i]))
            .fold(0.0, f64::max);
        if peak < 1e-6 {
            continue;
        }
        let k = max_disp / peak;
        phi.data_mut().iter_mut().for_each(|v| *v *= k);
        let dets = crate::metrics::jacobian_determinants(&phi).expect("field is at least 16×16");
        if dets.data().iter().all(|&d| d > 0.25) {
            return phi;
        }
    }
}

/// Generates a labelled pair. Sizes below 16×16 are rejected.
pub fn synthetic_pair(kind: PairKind, size: (usize, usize), seed: u64) -> Result<SyntheticPair> {
    let (h, w) = size;
    if h < MIN_SIZE || w < MIN_SIZE {
        return Err(Error::invalid(format!("synthetic pairs need at least {MIN_SIZE}×{MIN_SIZE}, got {h}×{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::random(h, w, &mut rng);
    let phi = match kind {
        PairKind::Translate { dx, dy } => {
            Tensor::from_fn(&[1, 2, h, w], |k| if k < h * w { dx } else { dy })
        }
        PairKind::Rotate { degrees } => {
            let (s, c) = degrees.to_radians().sin_cos();
            let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
            Tensor::from_fn(&[1, 2, h, w], |k| {
                let (comp, y, x) = (k / (h * w), (k / w) % h, k % w);
                let (u, v) = (x as f64 - cx, y as f64 - cy);
                if comp == 0 {
                    c * u - s * v - u
                } else {
                    s * u + c * v - v
                }
            })
        }
        PairKind::Elastic { max_disp } => {
            if !(max_disp.is_finite() && max_disp > 0.0) {
                return Err(Error::invalid(format!("max displacement must be positive, got {max_disp}")));
            }
            elastic_field(h, w, max_disp, &mut rng)
        }
    };
    let plane = h * w;
    let mut x_a = Tensor::zeros(&[1, 1, h, w]);
    let mut x_b = Tensor::zeros(&[1, 1, h, w]);
    let mut seg_a = vec![0u32; plane];
    let mut seg_b = vec![0u32; plane];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (xf, yf) = (x as f64, y as f64);
            let (sx, sy) = (xf + phi.data()[i], yf + phi.data()[plane + i]);
            x_a.data_mut()[i] = scene.intensity(xf, yf);
            seg_a[i] = scene.label(xf, yf);
            x_b.data_mut()[i] = scene.intensity(sx, sy);
            seg_b[i] = scene.label(sx, sy);
        }
    }
    Ok(SyntheticPair {
        x_a,
        x_b,
        seg_a: LabelMap::new(h, w, seg_a)?,
        seg_b: LabelMap::new(h, w, seg_b)?,
        phi_true: Some(phi),
    })
}

/// The `i`-th pair of a seeded stream of `family` pairs.
pub fn stream_pair(family: PairFamily, size: (usize, usize), max_disp: f64, stream: u64, i: usize) -> Result<SyntheticPair> {
    let seed = SeedStreams::pair_seed(stream, i);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_5CE7E);
    let kind = family.draw(max_disp, &mut rng);
    synthetic_pair(kind, size, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{dice_score, jacobian_determinants};

    #[test]
    fn translate_field_is_constant() {
        let p = synthetic_pair(PairKind::Translate { dx: 2.0, dy: 0.0 }, (32, 32), 1).unwrap();
        let phi = p.phi_true.unwrap();
        assert!(phi.data()[..1024].iter().all(|&v| v == 2.0));
        assert!(phi.data()[1024..].iter().all(|&v| v == 0.0));
        // integer shift: x_b(y, x) = x_a(y, x + 2) in the interior
        for y in 0..32 {
            for x in 0..30 {
                assert!((p.x_b.at4(0, 0, y, x) - p.x_a.at4(0, 0, y, x + 2)).abs() < 1e-12);
                assert_eq!(p.seg_b.get(y, x), p.seg_a.get(y, x + 2));
            }
        }
    }

    #[test]
    fn same_seed_same_pair() {
        for kind in [PairKind::Elastic { max_disp: 3.0 }, PairKind::Rotate { degrees: 7.0 }] {
            let a = synthetic_pair(kind, (32, 32), 99).unwrap();
            let b = synthetic_pair(kind, (32, 32), 99).unwrap();
            assert_eq!(a, b);
            let c = synthetic_pair(kind, (32, 32), 100).unwrap();
            assert_ne!(a.x_a, c.x_a);
        }
    }

    #[test]
    fn elastic_fields_fold_nowhere_and_peak_at_max() {
        for seed in 0..40 {
            let p = synthetic_pair(PairKind::Elastic { max_disp: 3.0 }, (32, 32), seed).unwrap();
            let phi = p.phi_true.unwrap();
            let dets = jacobian_determinants(&phi).unwrap();
            assert!(dets.data().iter().all(|&d| d > 0.0), "seed {seed}");
            let peak = (0..1024).map(|i| phi.data()[i].hypot(phi.data()[1024 + i])).fold(0.0, f64::max);
            assert!((peak - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_field_matches_rotation() {
        let p = synthetic_pair(PairKind::Rotate { degrees: 90.0 }, (17, 17), 3).unwrap();
        let phi = p.phi_true.unwrap();
        // centre is fixed, (x, y) = (16, 8) maps to (8, 16)
        assert!(phi.at4(0, 0, 8, 8).abs() < 1e-12 && phi.at4(0, 1, 8, 8).abs() < 1e-12);
        assert!((16.0 + phi.at4(0, 0, 8, 16) - 8.0).abs() < 1e-12);
        assert!((8.0 + phi.at4(0, 1, 8, 16) - 16.0).abs() < 1e-12);
    }

    #[test]
    fn scenes_carry_every_label_and_moderate_overlap() {
        let mut total = 0.0;
        for i in 0..20 {
            let p = stream_pair(PairFamily::Elastic, (32, 32), 3.0, 5, i).unwrap();
            assert_eq!(p.seg_a.foreground_labels(), LABELS.to_vec());
            total += dice_score(&p.seg_a, &p.seg_b, &LABELS).unwrap().mean;
        }
        let mean = total / 20.0;
        assert!(mean > 20.0 && mean < 90.0, "{mean}");
    }

    #[test]
    fn rejects_small_sizes_and_unknown_kinds() {
        assert!(synthetic_pair(PairKind::Elastic { max_disp: 3.0 }, (15, 32), 0).is_err());
        assert!("shear".parse::<PairFamily>().is_err());
        assert_eq!("elastic".parse::<PairFamily>().unwrap(), PairFamily::Elastic);
    }

    #[test]
    fn seed_streams_differ() {
        let s = SeedStreams::new(42);
        assert_eq!(s, SeedStreams::new(42));
        let all = [s.init, s.data, s.shuffle, s.eval];
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(all[i], all[j]);
            }
        }
        assert_ne!(SeedStreams::pair_seed(s.data, 0), SeedStreams::pair_seed(s.data, 1));
    }
}
