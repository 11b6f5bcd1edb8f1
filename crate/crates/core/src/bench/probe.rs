//! Logistic-regression probe on the true latent features.

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::metrics::auroc;

/// Fit `sigmoid(w . x + b)` by Newton's method with a small ridge.
pub fn fit_logistic(x: &[Vec<f64>], y: &[bool], ridge: f64, iters: usize) -> Result<Vec<f64>> {
    let n = x.len();
    if n == 0 || n != y.len() {
        return Err(Error::Precondition(format!("logistic fit needs matching rows, got {n} and {}", y.len())));
    }
    let p = x[0].len() + 1;
    let mut w = vec![0.0; p];
    let feat = |i: usize, j: usize| if j + 1 == p { 1.0 } else { x[i][j] };
    for _ in 0..iters {
        let mut grad = vec![0.0; p];
        let mut hess = vec![0.0; p * p];
        for i in 0..n {
            let z: f64 = (0..p).map(|j| w[j] * feat(i, j)).sum();
            let mu = sigmoid(z);
            let r = mu - y[i] as u8 as f64;
            let s = mu * (1.0 - mu);
            for a in 0..p {
                grad[a] += r * feat(i, a);
                for b in 0..=a {
                    hess[a * p + b] += s * feat(i, a) * feat(i, b);
                }
            }
        }
        for a in 0..p {
            grad[a] += ridge * w[a];
            hess[a * p + a] += ridge;
            for b in 0..a {
                hess[b * p + a] = hess[a * p + b];
            }
        }
        let step = cholesky_solve(&hess, &grad, p)
            .ok_or_else(|| Error::Numeric("logistic probe Hessian is not positive definite".into()))?;
        let mut change = 0.0f64;
        for (wi, si) in w.iter_mut().zip(&step) {
            *wi -= si;
            change = change.max(si.abs());
        }
        if change < 1e-10 {
            break;
        }
    }
    Ok(w)
}

fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i * n + k] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k * n + i] * x[k]).sum::<f64>()) / l[i * n + i];
    }
    Some(x)
}

/// Per-label AUROC of a probe fit on the first half of the rows and scored
/// on the second half. Labels lacking both classes in either half are `None`.
pub fn bayes_probe(z: &[Vec<f64>], labels: &[Vec<Option<bool>>]) -> Result<Vec<Option<f64>>> {
    if z.len() != labels.len() || z.len() < 4 {
        return Err(Error::Precondition("probe needs at least 4 aligned rows".into()));
    }
    let half = z.len() / 2;
    let l = labels[0].len();
    (0..l)
        .map(|k| {
            let pick = |range: std::ops::Range<usize>| -> (Vec<Vec<f64>>, Vec<bool>) {
                range
                    .filter_map(|i| labels[i][k].map(|y| (z[i].clone(), y)))
                    .unzip()
            };
            let (xa, ya) = pick(0..half);
            let (xb, yb) = pick(half..z.len());
            let both = |y: &[bool]| y.iter().any(|v| *v) && y.iter().any(|v| !*v);
            if !both(&ya) || !both(&yb) {
                return Ok(None);
            }
            let w = fit_logistic(&xa, &ya, 1e-3, 50)?;
            let scores: Vec<f64> = xb
                .iter()
                .map(|x| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[w.len() - 1])
                .collect();
            Ok(auroc(&scores, &yb))
        })
        .collect()
}

pub fn macro_mean(v: &[Option<f64>]) -> Option<f64> {
    let s: Vec<f64> = v.iter().flatten().copied().collect();
    (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64)
}
