//! Minimum-norm point in the convex hull of task gradients.
//!
//! Frank-Wolfe over the simplex, working on the Gram matrix only. Each
//! iteration takes the better of a toward step and an away step, each with an
//! exact line search, then tries an exact minimization over the affine hull
//! of the current support and keeps it when it stays feasible and lowers the
//! objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinNormSolution {
    pub alpha: Vec<f64>,
    /// `sum_t alpha_t g_t`.
    pub combined: Vec<f64>,
    pub norm_sq: f64,
    /// Final Frank-Wolfe duality gap `|g|^2 - min_t <g_t, g>`.
    pub gap: f64,
    pub iterations: usize,
}

impl MinNormSolution {
    /// `min_t <g_t, combined> - |combined|^2`; the KKT condition holds when
    /// this is at least `-tol`.
    pub fn kkt_margin(&self, gradients: &[Vec<f64>]) -> f64 {
        gradients
            .iter()
            .map(|g| dot(g, &self.combined))
            .fold(f64::INFINITY, f64::min)
            - self.norm_sq
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major `T x T` matrix of pairwise inner products.
pub fn gram(gradients: &[Vec<f64>]) -> Vec<f64> {
    let t = gradients.len();
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in i..t {
            let v = dot(&gradients[i], &gradients[j]);
            m[i * t + j] = v;
            m[j * t + i] = v;
        }
    }
    m
}

pub fn min_norm_solve(gradients: &[Vec<f64>], max_iters: usize, tol: f64) -> Result<MinNormSolution> {
    let t = gradients.len();
    if t == 0 {
        return Err(Error::Precondition("min_norm_solve needs at least one task".into()));
    }
    let dim = gradients[0].len();
    for (k, g) in gradients.iter().enumerate() {
        if g.len() != dim {
            return Err(Error::structure(
                "min_norm_solve",
                format!("task {k} gradient has length {}, task 0 has {dim}", g.len()),
            ));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("task {k} gradient has a non-finite entry at {i}")));
        }
    }
    let m = gram(gradients);
    let (alpha, gap, iterations) = solve_gram(&m, t, max_iters, tol);
    let mut combined = vec![0.0; dim];
    for (a, g) in alpha.iter().zip(gradients) {
        if *a != 0.0 {
            for (c, v) in combined.iter_mut().zip(g) {
                *c += a * v;
            }
        }
    }
    let norm_sq = dot(&combined, &combined);
    Ok(MinNormSolution {
        alpha,
        combined,
        norm_sq,
        gap,
        iterations,
    })
}

fn mat_vec(m: &[f64], t: usize, a: &[f64]) -> Vec<f64> {
    (0..t).map(|i| dot(&m[i * t..(i + 1) * t], a)).collect()
}

/// Returns `(alpha, gap, iterations)`.
pub fn solve_gram(m: &[f64], t: usize, max_iters: usize, tol: f64) -> (Vec<f64>, f64, usize) {
    let mut alpha = vec![1.0 / t as f64; t];
    if t == 1 {
        return (alpha, 0.0, 0);
    }
    let mut iters = 0;
    loop {
        let ma = mat_vec(m, t, &alpha);
        let f = dot(&alpha, &ma);
        let (fw, _) = argmin(&ma);
        let gap = f - ma[fw];
        if gap <= tol || iters >= max_iters {
            return (alpha, gap.max(0.0), iters);
        }
        iters += 1;

        // Away vertex: the active task with the largest <g_t, g>.
        let away = (0..t)
            .filter(|&i| alpha[i] > 0.0)
            .max_by(|&a, &b| ma[a].total_cmp(&ma[b]))
            .expect("alpha has support");
        let away_gap = ma[away] - f;
        if away_gap > gap && alpha[away] < 1.0 {
            // Direction alpha - e_away, step in [0, a/(1-a)].
            let gmax = alpha[away] / (1.0 - alpha[away]);
            let d_ma = f - ma[away];
            let d_m_d = f - 2.0 * ma[away] + m[away * t + away];
            let step = if d_m_d > 0.0 { (-d_ma / d_m_d).clamp(0.0, gmax) } else { gmax };
            for (i, a) in alpha.iter_mut().enumerate() {
                *a *= 1.0 + step;
                if i == away {
                    *a -= step;
                }
            }
            if step == gmax {
                alpha[away] = 0.0;
            }
        } else {
            // Toward e_fw: minimize |(1-s) g + s g_fw|^2 over s in [0,1].
            let den = f - 2.0 * ma[fw] + m[fw * t + fw];
            let step = if den > 0.0 { ((f - ma[fw]) / den).clamp(0.0, 1.0) } else { 1.0 };
            for (i, a) in alpha.iter_mut().enumerate() {
                *a *= 1.0 - step;
                if i == fw {
                    *a += step;
                }
            }
        }
        polish(m, t, &mut alpha);
    }
}

fn argmin(v: &[f64]) -> (usize, f64) {
    let mut best = (0, v[0]);
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < best.1 {
            best = (i, x);
        }
    }
    best
}

/// Minimize over the affine hull of the support: jump there when feasible,
/// otherwise move toward it until a weight hits zero, drop that task and
/// retry.
fn polish(m: &[f64], t: usize, alpha: &mut [f64]) {
    loop {
        let support: Vec<usize> = (0..t).filter(|&i| alpha[i] > 0.0).collect();
        let s = support.len();
        if s < 2 {
            return;
        }
        let Some(beta) = affine_minimizer(m, t, &support) else { return };
        let f_old = dot(alpha, &mat_vec(m, t, alpha));
        let mut cand = vec![0.0; t];
        for (r, &i) in support.iter().enumerate() {
            cand[i] = beta[r];
        }
        if beta.iter().all(|&v| v >= 0.0) {
            let f_new = dot(&cand, &mat_vec(m, t, &cand));
            if f_new <= f_old {
                alpha.copy_from_slice(&cand);
            }
            return;
        }
        // Largest step toward cand that keeps every weight non-negative.
        let mut theta = 1.0;
        let mut blocking = support[0];
        for &i in &support {
            if cand[i] < 0.0 {
                let th = alpha[i] / (alpha[i] - cand[i]);
                if th < theta {
                    theta = th;
                    blocking = i;
                }
            }
        }
        let mut next: Vec<f64> = alpha
            .iter()
            .zip(&cand)
            .map(|(a, c)| (a + theta * (c - a)).max(0.0))
            .collect();
        next[blocking] = 0.0;
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= total);
        if dot(&next, &mat_vec(m, t, &next)) > f_old {
            return;
        }
        alpha.copy_from_slice(&next);
    }
}

/// Solve `[M_SS 1; 1^T 0] [beta; lambda] = [0; 1]`. A tiny ridge keeps the
/// system solvable when more tasks than dimensions make `M_SS` singular;
/// iterated refinement against the exact system then removes its bias.
fn affine_minimizer(m: &[f64], t: usize, support: &[usize]) -> Option<Vec<f64>> {
    let s = support.len();
    let n = s + 1;
    let scale = support.iter().map(|&i| m[i * t + i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut exact = vec![0.0; n * n];
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            exact[r * n + c] = m[i * t + j] / scale;
        }
        exact[r * n + s] = 1.0;
        exact[s * n + r] = 1.0;
    }
    let mut ridged = exact.clone();
    for r in 0..s {
        ridged[r * n + r] += 1e-12;
    }
    let mut rhs = vec![0.0; n];
    rhs[s] = 1.0;
    let mut x = vec![0.0; n];
    for _ in 0..4 {
        let mut resid: Vec<f64> = (0..n)
            .map(|r| rhs[r] - dot(&exact[r * n..(r + 1) * n], &x))
            .collect();
        let dx = solve_linear(&mut ridged.clone(), &mut resid, n)?;
        x.iter_mut().zip(&dx).for_each(|(a, d)| *a += d);
    }
    x[..s].iter().all(|v| v.is_finite()).then(|| x[..s].to_vec())
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve_linear(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[piv * n + col].abs() < 1e-15 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[r * n + k] -= f * a[col * n + k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    Some(x)
}

/// Two-task minimizer of `|a g1 + (1-a) g2|^2` over `a in [0,1]`.
pub fn two_task_closed_form(g1: &[f64], g2: &[f64]) -> f64 {
    let diff: Vec<f64> = g1.iter().zip(g2).map(|(a, b)| a - b).collect();
    let den = dot(&diff, &diff);
    if den == 0.0 {
        return 0.5;
    }
    ((dot(g2, g2) - dot(g1, g2)) / den).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_pair() {
        let s = min_norm_solve(&[vec![1.0, 0.0], vec![0.0, 1.0]], 100, 1e-6).unwrap();
        assert!((s.alpha[0] - 0.5).abs() < 1e-9);
        assert!((s.combined[0] - 0.5).abs() < 1e-9 && (s.combined[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn single_task() {
        let s = min_norm_solve(&[vec![3.0, 4.0]], 100, 1e-6).unwrap();
        assert_eq!(s.alpha, vec![1.0]);
        assert_eq!(s.norm_sq, 25.0);
    }

    /// Dense grid over the segment as an independent oracle.
    #[test]
    fn scaled_pair_against_grid() {
        let g = [vec![2.0, 0.0], vec![0.0, 1.0]];
        let s = min_norm_solve(&g, 100, 1e-6).unwrap();
        let mut best = (0.0, f64::INFINITY);
        for i in 0..=100_000 {
            let a = i as f64 / 100_000.0;
            let v = (2.0 * a).powi(2) + (1.0 - a).powi(2);
            if v < best.1 {
                best = (a, v);
            }
        }
        assert!((s.alpha[0] - best.0).abs() < 1e-5);
        assert!((s.alpha[0] - 0.2).abs() < 1e-9 && (s.alpha[1] - 0.8).abs() < 1e-9);
        assert!((s.combined[0] - 0.4).abs() < 1e-9 && (s.combined[1] - 0.8).abs() < 1e-9);
        assert!((s.norm_sq - 0.8).abs() < 1e-9);
    }

    #[test]
    fn non_finite_row_names_task() {
        match min_norm_solve(&[vec![1.0], vec![f64::NAN]], 10, 1e-6) {
            Err(Error::Numeric(m)) => assert!(m.contains("task 1")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kkt_and_norm_dominance_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let t = rng.random_range(2..=24);
            let d = rng.random_range(10..=200);
            let g: Vec<Vec<f64>> = (0..t)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let s = min_norm_solve(&g, 100, 1e-6).unwrap();
            assert!(s.kkt_margin(&g) >= -1e-6, "margin {}", s.kkt_margin(&g));
            assert!((s.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(s.alpha.iter().all(|&a| a >= 0.0));
            let shortest = g.iter().map(|v| dot(v, v).sqrt()).fold(f64::INFINITY, f64::min);
            assert!(s.norm_sq.sqrt() <= shortest + 1e-6);
        }
    }

    #[test]
    fn duplicate_and_parallel_gradients() {
        let g = vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![2.0, 4.0]];
        let s = min_norm_solve(&g, 100, 1e-6).unwrap();
        assert!(s.kkt_margin(&g) >= -1e-6);
        assert!((s.norm_sq - 5.0).abs() < 1e-6);
    }
}
