//! Focal and dual-temperature contrastive losses.
//!
//! Each loss has a plain scalar form, used as a reference, and a fused tape op
//! that computes the value and caches its derivative in one pass.

use serde::{Deserialize, Serialize};

use crate::autodiff::{FusedGrad, Tape, Var};
use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    /// One weight per label.
    pub alpha: Vec<f64>,
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Validation(format!("focal gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if let Some(a) = self.alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::Validation(format!("focal alpha must be positive, got {a}")));
        }
        Ok(())
    }

    /// `alpha_k = N / (2 N_k+)` clipped to `[0.25, 4]`, counted over observed
    /// labels. A label with no positives gets the upper clip.
    pub fn balanced(labels: &[Vec<Option<bool>>], num_labels: usize, gamma: f64) -> Self {
        let alpha = (0..num_labels)
            .map(|k| {
                let (mut n, mut pos) = (0usize, 0usize);
                for row in labels {
                    if let Some(y) = row[k] {
                        n += 1;
                        pos += y as usize;
                    }
                }
                if pos == 0 {
                    4.0
                } else {
                    (n as f64 / (2.0 * pos as f64)).clamp(0.25, 4.0)
                }
            })
            .collect();
        FocalParams { gamma, alpha }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastParams {
    pub tau_alpha: f64,
    pub tau_beta: f64,
}

impl Default for ContrastParams {
    fn default() -> Self {
        ContrastParams {
            tau_alpha: 0.1,
            tau_beta: 0.5,
        }
    }
}

impl ContrastParams {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau_alpha", self.tau_alpha), ("tau_beta", self.tau_beta)] {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Validation(format!("{name} must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// `-alpha [y (1-p)^g log p + (1-y) p^g log(1-p)]` with `p` clamped to
/// `[eps, 1-eps]`.
pub fn focal_loss(p: f64, y: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if y {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -alpha * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// d focal / d p. Zero where the clamp is active.
fn focal_grad(p: f64, y: bool, alpha: f64, gamma: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    let pow_term = |base: f64| if gamma == 0.0 { 0.0 } else { gamma * base.powf(gamma - 1.0) };
    if y {
        -alpha * (-pow_term(1.0 - p) * p.ln() + (1.0 - p).powf(gamma) / p)
    } else {
        -alpha * (pow_term(p) * (1.0 - p).ln() - p.powf(gamma) / (1.0 - p))
    }
}

/// Mean focal loss over observed labels of a probability column. Returns
/// `None` when no label is observed.
pub fn focal_mean(probs: &[f64], labels: &[Option<bool>], alpha: f64, gamma: f64) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&p, y) in probs.iter().zip(labels) {
        if let Some(y) = *y {
            sum += focal_loss(p, y, alpha, gamma);
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Fused mean focal loss on an `N x 1` probability column. Unobserved labels
/// contribute nothing; with no observed label the result is a constant 0.
pub fn focal_on_tape(
    tape: &mut Tape,
    probs: Var,
    labels: &[Option<bool>],
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    let p = tape.value(probs);
    if p.len() != labels.len() {
        return Err(Error::structure(
            "focal",
            format!("{} probabilities for {} labels", p.len(), labels.len()),
        ));
    }
    let n = labels.iter().filter(|y| y.is_some()).count();
    let mut coef = vec![0.0; p.len()];
    let mut value = 0.0;
    if n > 0 {
        for (i, (&pi, y)) in p.iter().zip(labels).enumerate() {
            if let Some(y) = *y {
                value += focal_loss(pi, y, alpha, gamma);
                coef[i] = focal_grad(pi, y, alpha, gamma) / n as f64;
            }
        }
        value /= n as f64;
    }
    tape.fused_scalar(probs, value, FusedGrad::Elementwise(coef))
}

/// Per-anchor contrastive loss for anchor `i`, or `None` when `i` has no
/// same-label peer (or is unlabelled). `reps` are rows of equal width.
pub fn contrastive_anchor(
    reps: &[Vec<f64>],
    labels: &[Option<bool>],
    params: &ContrastParams,
    i: usize,
) -> Option<f64> {
    let yi = labels[i]?;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (mut w_a, mut w_b, mut pos) = (0.0, 0.0, 0.0);
    let mut peers = 0;
    for (j, rj) in reps.iter().enumerate() {
        let Some(yj) = labels[j] else { continue };
        if j == i {
            continue;
        }
        let s = dot(&reps[i], rj);
        let ea = (s / params.tau_alpha).exp();
        w_a += ea;
        w_b += (s / params.tau_beta).exp();
        if yj == yi {
            pos += ea;
            peers += 1;
        }
    }
    if peers == 0 {
        return None;
    }
    Some(-(w_b / w_a) * (pos / w_a).ln())
}

/// Mean over valid anchors; 0 when there are none.
pub fn contrastive_loss(reps: &[Vec<f64>], labels: &[Option<bool>], params: &ContrastParams) -> f64 {
    let vals: Vec<f64> = (0..reps.len())
        .filter_map(|i| contrastive_anchor(reps, labels, params, i))
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Number of anchors that have at least one same-label peer.
pub fn valid_anchor_count(labels: &[Option<bool>]) -> usize {
    let pos = labels.iter().filter(|y| **y == Some(true)).count();
    let neg = labels.iter().filter(|y| **y == Some(false)).count();
    (if pos >= 2 { pos } else { 0 }) + (if neg >= 2 { neg } else { 0 })
}

/// Fused contrastive loss on `N x d` unit rows. The hardness ratio
/// `W_beta / W_alpha` is a constant in the backward pass.
pub fn contrastive_on_tape(
    tape: &mut Tape,
    reps: Var,
    labels: &[Option<bool>],
    params: &ContrastParams,
) -> Result<Var> {
    let (n, d) = tape.shape(reps);
    if n != labels.len() {
        return Err(Error::structure(
            "contrastive",
            format!("{n} representations for {} labels", labels.len()),
        ));
    }
    let r = tape.value(reps);
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s: f64 = r[i * d..(i + 1) * d].iter().zip(&r[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
            sim[i * n + j] = s;
            sim[j * n + i] = s;
        }
    }
    let mut dmat = vec![0.0; n * n];
    let mut anchors: Vec<(usize, f64)> = Vec::new();
    let mut ea = vec![0.0; n];
    for i in 0..n {
        let Some(yi) = labels[i] else { continue };
        let (mut w_a, mut w_b, mut pos, mut peers) = (0.0, 0.0, 0.0, 0);
        for j in 0..n {
            ea[j] = 0.0;
            let Some(yj) = labels[j] else { continue };
            if j == i {
                continue;
            }
            let s = sim[i * n + j];
            ea[j] = (s / params.tau_alpha).exp();
            w_a += ea[j];
            w_b += (s / params.tau_beta).exp();
            if yj == yi {
                pos += ea[j];
                peers += 1;
            }
        }
        if peers == 0 {
            continue;
        }
        let w = w_b / w_a;
        anchors.push((i, -w * (pos / w_a).ln()));
        // d loss_i / d s_ij before the 1/M mean factor.
        for j in 0..n {
            let Some(yj) = labels[j] else { continue };
            if j == i {
                continue;
            }
            let same = if yj == yi { ea[j] / pos } else { 0.0 };
            dmat[i * n + j] = -w / params.tau_alpha * (same - ea[j] / w_a);
        }
    }
    let m = anchors.len();
    let value = if m == 0 {
        0.0
    } else {
        anchors.iter().map(|(_, l)| l).sum::<f64>() / m as f64
    };
    let mut sym = vec![0.0; n * n];
    if m > 0 {
        for i in 0..n {
            for j in 0..n {
                sym[i * n + j] = (dmat[i * n + j] + dmat[j * n + i]) / m as f64;
            }
        }
    }
    tape.fused_scalar(reps, value, FusedGrad::Quadratic(sym))
}
