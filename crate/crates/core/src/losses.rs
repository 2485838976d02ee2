//! Similarity, smoothness and the bidirectional registration objective.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::warp;
use crate::ops::ConvGeom;
use crate::tensor::Tensor;

/// Stabiliser in the NCC denominator and the soft Dice ratio.
pub const LOSS_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityKind {
    Mse,
    /// Local normalised cross-correlation over a square window.
    Ncc,
    SoftDice,
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityKind::Mse => "mse",
            SimilarityKind::Ncc => "ncc",
            SimilarityKind::SoftDice => "dice",
        })
    }
}

impl FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(SimilarityKind::Mse),
            "ncc" => Ok(SimilarityKind::Ncc),
            "dice" | "soft-dice" => Ok(SimilarityKind::SoftDice),
            other => Err(Error::invalid(format!("unknown similarity '{other}' (expected mse, ncc or dice)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub similarity: SimilarityKind,
    pub lambda_smooth: f64,
    /// Odd side of the NCC window.
    pub ncc_window: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            similarity: SimilarityKind::Ncc,
            lambda_smooth: 1.0,
            ncc_window: 9,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_smooth.is_finite() && self.lambda_smooth >= 0.0) {
            return Err(Error::invalid(format!("lambda_smooth must be finite and >= 0, got {}", self.lambda_smooth)));
        }
        if self.ncc_window < 3 || self.ncc_window % 2 == 0 {
            return Err(Error::invalid(format!("ncc_window must be odd and >= 3, got {}", self.ncc_window)));
        }
        Ok(())
    }
}

/// One direction: `total = sim + λ·smooth`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub sim: Var,
    pub smooth: Var,
}

/// Both directions plus their sums.
#[derive(Clone, Copy, Debug)]
pub struct BiLoss {
    pub total: Var,
    pub sim: Var,
    pub smooth: Var,
    pub a2b: LossTerms,
    pub b2a: LossTerms,
}

/// Dissimilarity between `fixed` and `moved`, both B×C×H×W. Lower is better.
pub fn similarity_loss(tape: &mut Tape, fixed: Var, moved: Var, cfg: &LossConfig) -> Result<Var> {
    let fs = tape.shape(fixed).to_vec();
    let ms = tape.shape(moved).to_vec();
    if fs != ms || fs.len() != 4 {
        return Err(Error::shape("similarity", format!("fixed {:?} vs moved {:?}", fs, ms)));
    }
    match cfg.similarity {
        SimilarityKind::Mse => {
            let d = tape.sub(fixed, moved)?;
            let d2 = tape.square(d);
            Ok(tape.mean(d2))
        }
        SimilarityKind::SoftDice => {
            let pq = tape.mul(fixed, moved)?;
            let inter = tape.sum(pq);
            let num = tape.scale(inter, 2.0);
            let num = tape.add_scalar(num, LOSS_EPS);
            let sp = tape.sum(fixed);
            let sq = tape.sum(moved);
            let den = tape.add(sp, sq)?;
            let den = tape.add_scalar(den, LOSS_EPS);
            let ratio = tape.div(num, den)?;
            let neg = tape.scale(ratio, -1.0);
            Ok(tape.add_scalar(neg, 1.0))
        }
        SimilarityKind::Ncc => ncc_loss(tape, fixed, moved, cfg.ncc_window),
    }
}

/// `1 − mean(cc)` where `cc = cross² / (var_I·var_J + ε)` over a zero-padded
/// `n×n` window.
fn ncc_loss(tape: &mut Tape, i: Var, j: Var, n: usize) -> Result<Var> {
    if n < 3 || n % 2 == 0 {
        return Err(Error::invalid(format!("ncc_window must be odd and >= 3, got {n}")));
    }
    let s = tape.shape(i).to_vec();
    let flat = [s[0] * s[1], 1, s[2], s[3]];
    let i = tape.reshape(i, &flat)?;
    let j = tape.reshape(j, &flat)?;
    let ii = tape.square(i);
    let jj = tape.square(j);
    let ij = tape.mul(i, j)?;
    let kernel = tape.constant(Tensor::ones(&[1, 1, n, n]));
    let geom = ConvGeom::same(n);
    let box_sum = |tape: &mut Tape, x: Var| tape.conv2d(x, kernel, None, geom);
    let si = box_sum(tape, i)?;
    let sj = box_sum(tape, j)?;
    let sii = box_sum(tape, ii)?;
    let sjj = box_sum(tape, jj)?;
    let sij = box_sum(tape, ij)?;
    let inv_win = 1.0 / (n * n) as f64;

    let centred = |tape: &mut Tape, sab: Var, sa: Var, sb: Var| -> Result<Var> {
        let prod = tape.mul(sa, sb)?;
        let prod = tape.scale(prod, inv_win);
        tape.sub(sab, prod)
    };
    let cross = centred(tape, sij, si, sj)?;
    let var_i = centred(tape, sii, si, si)?;
    let var_j = centred(tape, sjj, sj, sj)?;
    let num = tape.square(cross);
    let den = tape.mul(var_i, var_j)?;
    let den = tape.add_scalar(den, LOSS_EPS);
    let cc = tape.div(num, den)?;
    let m = tape.mean(cc);
    let neg = tape.scale(m, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Mean squared forward difference of a B×2×H×W field, summed over the two
/// components and the two directions. A linear ramp of slope `s` in one
/// component gives `s²`.
pub fn smoothness_loss(tape: &mut Tape, phi: Var) -> Result<Var> {
    let s = tape.shape(phi).to_vec();
    if s.len() != 4 || s[1] != 2 || s[2] < 2 || s[3] < 2 {
        return Err(Error::shape("smoothness", format!("expected B×2×H×W with H, W >= 2, got {:?}", s)));
    }
    let flat = tape.reshape(phi, &[s[0] * 2, 1, s[2], s[3]])?;
    let kx = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![-1.0, 1.0])?);
    let ky = tape.constant(Tensor::new(vec![1, 1, 2, 1], vec![-1.0, 1.0])?);
    let dx = tape.conv2d(flat, kx, None, ConvGeom::default())?;
    let dy = tape.conv2d(flat, ky, None, ConvGeom::default())?;
    let dx2 = tape.square(dx);
    let dy2 = tape.square(dy);
    let mx = tape.mean(dx2);
    let my = tape.mean(dy2);
    let both = tape.add(mx, my)?;
    // the means above run over both components; undo that averaging
    Ok(tape.scale(both, 2.0))
}

/// `sim(fixed, moving∘φ) + λ·smooth(φ)`.
pub fn registration_loss(tape: &mut Tape, fixed: Var, moving: Var, phi: Var, cfg: &LossConfig) -> Result<LossTerms> {
    let moved = warp(tape, moving, phi)?;
    let sim = similarity_loss(tape, fixed, moved, cfg)?;
    let smooth = smoothness_loss(tape, phi)?;
    let weighted = tape.scale(smooth, cfg.lambda_smooth);
    let total = tape.add(sim, weighted)?;
    Ok(LossTerms { total, sim, smooth })
}

/// Symmetric objective: `x_a` warped by `phi_a2b` is compared with `x_b`, and
/// `x_b` warped by `phi_b2a` with `x_a`.
pub fn bidirectional_loss(
    tape: &mut Tape,
    x_a: Var,
    x_b: Var,
    phi_a2b: Var,
    phi_b2a: Var,
    cfg: &LossConfig,
) -> Result<BiLoss> {
    let a2b = registration_loss(tape, x_b, x_a, phi_a2b, cfg)?;
    let b2a = registration_loss(tape, x_a, x_b, phi_b2a, cfg)?;
    Ok(BiLoss {
        total: tape.add(a2b.total, b2a.total)?,
        sim: tape.add(a2b.sim, b2a.sim)?,
        smooth: tape.add(a2b.smooth, b2a.smooth)?,
        a2b,
        b2a,
    })
}

/// Plain-value evaluation of [`bidirectional_loss`]: `(total, sim, smooth)`.
pub fn evaluate_bidirectional(
    x_a: &Tensor,
    x_b: &Tensor,
    phi_a2b: &Tensor,
    phi_b2a: &Tensor,
    cfg: &LossConfig,
) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let a = tape.constant(x_a.clone());
    let b = tape.constant(x_b.clone());
    let p = tape.constant(phi_a2b.clone());
    let q = tape.constant(phi_b2a.clone());
    let l = bidirectional_loss(&mut tape, a, b, p, q, cfg)?;
    Ok((tape.value(l.total).item(), tape.value(l.sim).item(), tape.value(l.smooth).item()))
}
