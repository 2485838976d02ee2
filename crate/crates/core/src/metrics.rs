//! Evaluation metrics: label overlap and folding of displacement fields.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integer label image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "label_map",
                format!("{} labels for a {height}×{width} map", data.len()),
            ));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }

    /// Distinct non-zero labels in ascending order.
    pub fn foreground_labels(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.data.iter().copied().filter(|&l| l != 0).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Nearest-neighbour resampling at `(x + φ_x, y + φ_y)`, clamped to the
    /// map. `phi` is 1×2×H×W.
    pub fn warp_nearest(&self, phi: &Tensor) -> Result<LabelMap> {
        let (h, w) = (self.height, self.width);
        if phi.shape() != [1, 2, h, w] {
            return Err(Error::shape("warp_labels", format!("labels {h}×{w} vs field {:?}", phi.shape())));
        }
        let mut out = vec![0u32; h * w];
        for y in 0..h {
            for x in 0..w {
                let sx = (x as f64 + phi.at4(0, 0, y, x)).round().clamp(0.0, (w - 1) as f64) as usize;
                let sy = (y as f64 + phi.at4(0, 1, y, x)).round().clamp(0.0, (h - 1) as f64) as usize;
                out[y * w + x] = self.get(sy, sx);
            }
        }
        Ok(LabelMap { height: h, width: w, data: out })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    /// `(label, score)` with `None` for labels absent from both maps.
    pub per_label: Vec<(u32, Option<f64>)>,
    /// Mean over the scored labels, in percent.
    pub mean: f64,
}

/// Per-label `200·|A∩B| / (|A|+|B|)`. Labels absent from both maps are not
/// scored; at least one label must be scored.
pub fn dice_score(a: &LabelMap, b: &LabelMap, labels: &[u32]) -> Result<DiceReport> {
    if labels.is_empty() {
        return Err(Error::invalid("dice needs at least one label"));
    }
    if a.height != b.height || a.width != b.width {
        return Err(Error::shape(
            "dice",
            format!("{}×{} vs {}×{}", a.height, a.width, b.height, b.width),
        ));
    }
    let mut per_label = Vec::with_capacity(labels.len());
    let mut scored = Vec::new();
    for &l in labels {
        let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
        for (&x, &y) in a.data.iter().zip(&b.data) {
            na += (x == l) as usize;
            nb += (y == l) as usize;
            both += (x == l && y == l) as usize;
        }
        if na + nb == 0 {
            per_label.push((l, None));
        } else {
            let d = 200.0 * both as f64 / (na + nb) as f64;
            scored.push(d);
            per_label.push((l, Some(d)));
        }
    }
    if scored.is_empty() {
        return Err(Error::invalid(format!("none of the labels {labels:?} occur in either map")));
    }
    let mean = scored.iter().sum::<f64>() / scored.len() as f64;
    Ok(DiceReport { per_label, mean })
}

/// `det(I + ∇φ)` on interior pixels (central differences), H−2 × W−2 per
/// batch entry. `phi` is B×2×H×W.
pub fn jacobian_determinants(phi: &Tensor) -> Result<Tensor> {
    let s = phi.shape();
    if s.len() != 4 || s[1] != 2 || s[2] < 3 || s[3] < 3 {
        return Err(Error::shape("jacobian", format!("expected B×2×H×W with H, W >= 3, got {s:?}")));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let mut out = Tensor::zeros(&[b, 1, h - 2, w - 2]);
    for bi in 0..b {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let ddx = |c| 0.5 * (phi.at4(bi, c, y, x + 1) - phi.at4(bi, c, y, x - 1));
                let ddy = |c| 0.5 * (phi.at4(bi, c, y + 1, x) - phi.at4(bi, c, y - 1, x));
                let det = (1.0 + ddx(0)) * (1.0 + ddy(1)) - ddy(0) * ddx(1);
                out.set4(bi, 0, y - 1, x - 1, det);
            }
        }
    }
    Ok(out)
}

/// Percentage of interior pixels with `det(I + ∇φ) <= 0`.
pub fn jacobian_negative_fraction(phi: &Tensor) -> Result<f64> {
    let dets = jacobian_determinants(phi)?;
    let folded = dets.data().iter().filter(|&&d| d <= 0.0).count();
    Ok(100.0 * folded as f64 / dets.numel() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, f: impl Fn(usize, usize) -> u32) -> LabelMap {
        LabelMap::new(h, w, (0..h * w).map(|k| f(k / w, k % w)).collect()).unwrap()
    }

    #[test]
    fn dice_identical_and_disjoint() {
        let a = map(4, 4, |y, _| if y < 2 { 1 } else { 2 });
        let r = dice_score(&a, &a, &[1, 2]).unwrap();
        assert_eq!(r.mean, 100.0);
        let b = map(4, 4, |y, _| if y < 2 { 2 } else { 1 });
        assert_eq!(dice_score(&a, &b, &[1, 2]).unwrap().mean, 0.0);
    }

    #[test]
    fn dice_half_overlap() {
        let a = map(2, 4, |_, x| (x < 2) as u32);
        let b = map(2, 4, |_, x| (x >= 1 && x < 3) as u32);
        let r = dice_score(&a, &b, &[1]).unwrap();
        assert!((r.mean - 50.0).abs() < 1e-12);
    }

    #[test]
    fn dice_skips_absent_labels_and_rejects_empty_sets() {
        let a = map(3, 3, |_, _| 1);
        let r = dice_score(&a, &a, &[1, 7]).unwrap();
        assert_eq!(r.per_label, vec![(1, Some(100.0)), (7, None)]);
        assert_eq!(r.mean, 100.0);
        assert!(dice_score(&a, &a, &[]).is_err());
        assert!(dice_score(&a, &a, &[5]).is_err());
        let small = map(2, 3, |_, _| 1);
        assert!(dice_score(&a, &small, &[1]).is_err());
    }

    #[test]
    fn zero_field_has_unit_determinant() {
        let d = jacobian_determinants(&Tensor::zeros(&[1, 2, 5, 6])).unwrap();
        assert_eq!(d.shape(), &[1, 1, 3, 4]);
        assert!(d.data().iter().all(|&v| v == 1.0));
        assert_eq!(jacobian_negative_fraction(&Tensor::zeros(&[1, 2, 5, 6])).unwrap(), 0.0);
    }

    #[test]
    fn reflection_folds_everything() {
        // φ_x = −2x maps x to −x: det = −1 everywhere
        let phi = Tensor::from_fn(&[1, 2, 6, 6], |k| if k < 36 { -2.0 * (k % 6) as f64 } else { 0.0 });
        assert_eq!(jacobian_negative_fraction(&phi).unwrap(), 100.0);
    }

    #[test]
    fn shear_determinant() {
        // φ_x = 0.5·y, φ_y = 0.25·x: det = 1 − 0.125
        let phi = Tensor::from_fn(&[1, 2, 5, 5], |k| {
            let (c, y, x) = (k / 25, (k / 5) % 5, k % 5);
            if c == 0 { 0.5 * y as f64 } else { 0.25 * x as f64 }
        });
        let d = jacobian_determinants(&phi).unwrap();
        assert!(d.data().iter().all(|&v| (v - 0.875).abs() < 1e-14));
    }

    #[test]
    fn jacobian_rejects_small_fields() {
        assert!(jacobian_negative_fraction(&Tensor::zeros(&[1, 2, 2, 5])).is_err());
        assert!(jacobian_negative_fraction(&Tensor::zeros(&[1, 3, 5, 5])).is_err());
    }

    #[test]
    fn nearest_warp_shifts_labels() {
        let a = map(4, 4, |_, x| x as u32);
        let phi = Tensor::from_fn(&[1, 2, 4, 4], |k| if k < 16 { 1.0 } else { 0.0 });
        let out = a.warp_nearest(&phi).unwrap();
        assert_eq!(out.data, map(4, 4, |_, x| (x + 1).min(3) as u32).data);
    }

    #[test]
    fn mean_std_basic() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert!(mean_std(&[]).0.is_nan());
    }
}
