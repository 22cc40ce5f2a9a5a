//! Shared fixtures and independent reference implementations for the
//! integration tests. Nothing here calls into the library's numerical
//! routines except to build inputs.

#![allow(dead_code)]

pub mod oracle_checks;

use std::f64::consts::PI;
use std::sync::Arc;

use adrf::{Dataset, FunctionalSample, Grid};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Trapezoid weights on a grid, computed from scratch.
pub fn trapezoid(points: &[f64]) -> Vec<f64> {
    let m = points.len();
    let mut w = vec![0.0; m];
    for i in 0..m - 1 {
        let half = 0.5 * (points[i + 1] - points[i]);
        w[i] += half;
        w[i + 1] += half;
    }
    w
}

pub fn integrate(w: &[f64], f: &[f64], g: &[f64]) -> f64 {
    w.iter().zip(f).zip(g).map(|((&w, &a), &b)| w * a * b).sum()
}

/// Leading eigenpairs by power iteration with deflation on the symmetrized
/// discretized covariance operator.
pub struct PowerFpca {
    pub mean: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// Eigenfunctions as grid values, unit norm under the quadrature.
    pub eigenfunctions: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl PowerFpca {
    pub fn fit(curves: &[Vec<f64>], points: &[f64], q: usize) -> Self {
        let n = curves.len();
        let m = points.len();
        let w = trapezoid(points);
        let mut mean = vec![0.0; m];
        for c in curves {
            for (a, &v) in mean.iter_mut().zip(c) {
                *a += v / n as f64;
            }
        }
        let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
        let mut op = vec![vec![0.0; m]; m];
        for c in curves {
            let d: Vec<f64> = c.iter().zip(&mean).map(|(a, b)| a - b).collect();
            for s in 0..m {
                for t in 0..m {
                    op[s][t] += sw[s] * d[s] * d[t] * sw[t] / n as f64;
                }
            }
        }
        let mut eigenvalues = Vec::new();
        let mut eigenfunctions = Vec::new();
        for j in 0..q {
            let mut v: Vec<f64> = (0..m).map(|t| 1.0 + 0.1 * ((t + j) as f64).sin()).collect();
            let mut lambda = 0.0;
            for _ in 0..5000 {
                let mut next = vec![0.0; m];
                for s in 0..m {
                    next[s] = (0..m).map(|t| op[s][t] * v[t]).sum();
                }
                let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    break;
                }
                for x in &mut next {
                    *x /= norm;
                }
                let change: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                v = next;
                lambda = norm;
                if change < 1e-15 {
                    break;
                }
            }
            for s in 0..m {
                for t in 0..m {
                    op[s][t] -= lambda * v[s] * v[t];
                }
            }
            eigenvalues.push(lambda);
            eigenfunctions.push(v.iter().zip(&sw).map(|(a, b)| a / b).collect());
        }
        PowerFpca {
            mean,
            eigenvalues,
            eigenfunctions,
            weights: w,
        }
    }

    pub fn score(&self, z: &[f64], j: usize) -> f64 {
        let d: Vec<f64> = z.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        integrate(&self.weights, &d, &self.eigenfunctions[j])
    }

    pub fn mean_projection(&self, j: usize) -> f64 {
        integrate(&self.weights, &self.mean, &self.eigenfunctions[j])
    }
}

/// Ordinary least squares through the normal equations, solved by Gaussian
/// elimination with partial pivoting.
pub fn ols(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let k = rows[0].len();
    let mut a = vec![vec![0.0; k + 1]; k];
    for (r, &yi) in rows.iter().zip(y) {
        for i in 0..k {
            for j in 0..k {
                a[i][j] += r[i] * r[j];
            }
            a[i][k] += r[i] * yi;
        }
    }
    solve_linear(a)
}

pub fn solve_linear(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let k = a.len();
    for c in 0..k {
        let p = (c..k).max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap()).unwrap();
        a.swap(c, p);
        for r in c + 1..k {
            let f = a[r][c] / a[c][c];
            for j in c..=k {
                a[r][j] -= f * a[c][j];
            }
        }
    }
    let mut x = vec![0.0; k];
    for r in (0..k).rev() {
        let s: f64 = (r + 1..k).map(|j| a[r][j] * x[j]).sum();
        x[r] = (a[r][k] - s) / a[r][r];
    }
    x
}

/// Exponential-tilting dual maximized by plain gradient ascent with
/// backtracking: `max_eta sum_j w_j rho(eta^T nu_j) - eta^T c`,
/// `rho(v) = -exp(-v - 1)`.
pub fn gradient_ascent_dual(rows: &[Vec<f64>], w: &[f64], c: &[f64], tol: f64) -> Vec<f64> {
    let k = c.len();
    let objective = |eta: &[f64]| -> f64 {
        let mut s = 0.0;
        for (r, &wj) in rows.iter().zip(w) {
            let v: f64 = r.iter().zip(eta).map(|(a, b)| a * b).sum();
            s -= wj * (-v - 1.0).exp();
        }
        s - eta.iter().zip(c).map(|(a, b)| a * b).sum::<f64>()
    };
    let gradient = |eta: &[f64]| -> Vec<f64> {
        let mut g: Vec<f64> = c.iter().map(|v| -v).collect();
        for (r, &wj) in rows.iter().zip(w) {
            let v: f64 = r.iter().zip(eta).map(|(a, b)| a * b).sum();
            let d = wj * (-v - 1.0).exp();
            for (gi, &x) in g.iter_mut().zip(r) {
                *gi += d * x;
            }
        }
        g
    };
    let mut eta = vec![0.0; k];
    eta[0] = -1.0;
    let mut step = 1.0;
    for _ in 0..2_000_000 {
        let g = gradient(&eta);
        let gn = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gn < tol {
            break;
        }
        let f0 = objective(&eta);
        let g2: f64 = g.iter().map(|v| v * v).sum();
        step *= 2.0;
        loop {
            let trial: Vec<f64> = eta.iter().zip(&g).map(|(e, d)| e + step * d).collect();
            if objective(&trial) >= f0 + 0.5 * step * g2 {
                eta = trial;
                break;
            }
            step *= 0.5;
            if step < 1e-300 {
                return eta;
            }
        }
    }
    eta
}

pub fn uniform_points(m: usize) -> Vec<f64> {
    (0..m).map(|i| i as f64 / (m - 1) as f64).collect()
}

pub fn dataset_from(points: &[f64], curves: &[Vec<f64>], x: &[Vec<f64>], y: &[f64]) -> Dataset<f64> {
    let grid = Arc::new(Grid::new(points.to_vec()).unwrap());
    let samples = curves
        .iter()
        .map(|c| FunctionalSample::new(grid.clone(), c.clone()).unwrap())
        .collect();
    let p = x[0].len();
    let xm = DMatrix::from_fn(x.len(), p, |i, j| x[i][j]);
    Dataset::new(samples, xm, y.to_vec()).unwrap()
}

/// A random functional regression instance: curves built from a handful of
/// Fourier terms with decaying scales, confounded covariates and outcome.
pub struct Instance {
    pub points: Vec<f64>,
    pub curves: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Instance {
    pub fn random(seed: u64, n: usize, m: usize, p: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = uniform_points(m);
        let scales = [3.0, 2.0, 1.4, 1.0, 0.6, 0.3];
        let mut curves = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let a: Vec<f64> = scales.iter().map(|s| s * (rng.gen::<f64>() * 2.0 - 1.0)).collect();
            let offset = 0.3 * (rng.gen::<f64>() - 0.5);
            let curve: Vec<f64> = points
                .iter()
                .map(|&t| {
                    offset
                        + a.iter()
                            .enumerate()
                            .map(|(j, &c)| {
                                let m = (j / 2 + 1) as f64;
                                let base = if j % 2 == 0 { (2.0 * PI * m * t).sin() } else { (2.0 * PI * m * t).cos() };
                                c * std::f64::consts::SQRT_2 * base
                            })
                            .sum::<f64>()
                })
                .collect();
            let xi: Vec<f64> = (0..p)
                .map(|j| 0.4 * a[j % 3] / scales[j % 3] + rng.gen::<f64>() * 2.0 - 1.0)
                .collect();
            let yi = 1.0 + 2.0 * a[0] - a[1] + 0.5 * a[2] + xi.iter().sum::<f64>() + 0.5 * (rng.gen::<f64>() - 0.5);
            curves.push(curve);
            x.push(xi);
            y.push(yi);
        }
        Instance { points, curves, x, y }
    }

    pub fn dataset(&self) -> Dataset<f64> {
        dataset_from(&self.points, &self.curves, &self.x, &self.y)
    }
}

/// The handcrafted n = 12 cross-validation instance on a 21-point grid.
pub fn twelve() -> Instance {
    let points = uniform_points(21);
    let a = [2.1, -1.7, 0.9, -0.4, 1.5, -2.3, 0.3, 1.1, -0.8, 2.6, -1.2, 0.6];
    let c = [0.4, -0.2, 0.7, -0.6, 0.1, 0.3, -0.5, 0.2, 0.6, -0.1, -0.3, 0.5];
    let xs = [0.3, -0.8, 0.5, 0.1, -0.4, 0.9, -0.6, 0.2, 0.7, -0.3, 0.4, -0.9];
    let noise = [0.05, -0.11, 0.02, 0.08, -0.04, 0.1, -0.07, 0.03, -0.02, 0.06, -0.09, 0.01];
    let curves = (0..12)
        .map(|i| {
            points
                .iter()
                .map(|&t| a[i] * (2.0 * PI * t).sin() + c[i] * (2.0 * PI * t).cos() + 0.1 * (i as f64 - 5.5) * 0.1)
                .collect()
        })
        .collect();
    let x = xs.iter().map(|&v| vec![v]).collect();
    let y = (0..12).map(|i| 1.0 + 1.5 * a[i] - 0.5 * c[i] + 0.8 * xs[i] + noise[i]).collect();
    Instance { points, curves, x, y }
}

/// Fold assignment used with [`twelve`].
pub fn twelve_folds() -> Vec<usize> {
    vec![0, 1, 1, 0, 0, 1, 1, 0, 1, 0, 0, 1]
}

/// One-component functional fit on a training subset, computed by hand.
struct HandFit {
    fpca: PowerFpca,
    intercept: f64,
    slope: f64,
}

impl HandFit {
    /// `r_j = intercept + slope * (mean_projection + score_j)`.
    fn regress(fpca: PowerFpca, curves: &[&Vec<f64>], r: &[f64]) -> Self {
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let e: f64 = curves.iter().zip(r).map(|(c, &v)| (v - mean) * fpca.score(c, 0)).sum::<f64>() / n;
        let slope = e / fpca.eigenvalues[0];
        let intercept = mean - slope * fpca.mean_projection(0);
        HandFit { fpca, intercept, slope }
    }

    fn predict(&self, z: &[f64]) -> f64 {
        self.intercept + self.slope * (self.fpca.mean_projection(0) + self.fpca.score(z, 0))
    }
}

/// Backfitting written out step by step for `q = 1`, one covariate, using
/// the same stopping rule as the library (sup-norm change below 1e-8 or
/// 50 sweeps).
fn hand_backfit(inst: &Instance, train: &[usize]) -> (HandFit, f64) {
    let curves: Vec<&Vec<f64>> = train.iter().map(|&i| &inst.curves[i]).collect();
    let y: Vec<f64> = train.iter().map(|&i| inst.y[i]).collect();
    let x: Vec<f64> = train.iter().map(|&i| inst.x[i][0]).collect();
    let owned: Vec<Vec<f64>> = curves.iter().map(|c| (*c).clone()).collect();
    let mut fit = HandFit::regress(PowerFpca::fit(&owned, &inst.points, 1), &curves, &y);
    let mut theta = 0.0;
    for _ in 0..50 {
        let resid: Vec<f64> = curves.iter().zip(&y).map(|(c, &v)| v - fit.predict(c)).collect();
        let sxx: f64 = x.iter().map(|v| v * v).sum();
        let sxr: f64 = x.iter().zip(&resid).map(|(a, b)| a * b).sum();
        let next_theta = sxr / sxx;
        let r: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - next_theta * b).collect();
        let next = HandFit::regress(PowerFpca::fit(&owned, &inst.points, 1), &curves, &r);
        let delta = (next_theta - theta)
            .abs()
            .max((next.slope - fit.slope).abs())
            .max((next.intercept - fit.intercept).abs());
        theta = next_theta;
        fit = next;
        if delta < 1e-8 {
            break;
        }
    }
    (fit, theta)
}

fn split(folds: &[usize], l: usize) -> (Vec<usize>, Vec<usize>) {
    let held: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] == l).collect();
    let train: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] != l).collect();
    (held, train)
}

fn fold_count(folds: &[usize]) -> usize {
    folds.iter().copied().max().unwrap() + 1
}

/// Hand-enumerated CV_FSW with `k = 1` (every weight is one) and `q = 1`.
pub fn hand_cv_fsw_k1(inst: &Instance, folds: &[usize]) -> f64 {
    let mut loss = 0.0;
    for l in 0..fold_count(folds) {
        let (held, train) = split(folds, l);
        let owned: Vec<Vec<f64>> = train.iter().map(|&i| inst.curves[i].clone()).collect();
        let curves: Vec<&Vec<f64>> = train.iter().map(|&i| &inst.curves[i]).collect();
        let y: Vec<f64> = train.iter().map(|&i| inst.y[i]).collect();
        let fit = HandFit::regress(PowerFpca::fit(&owned, &inst.points, 1), &curves, &y);
        for &i in &held {
            loss += (inst.y[i] - fit.predict(&inst.curves[i])).powi(2);
        }
    }
    loss
}

/// Hand-enumerated CV_OR with `q = 1`.
pub fn hand_cv_or(inst: &Instance, folds: &[usize]) -> f64 {
    let mut loss = 0.0;
    for l in 0..fold_count(folds) {
        let (held, train) = split(folds, l);
        let (fit, theta) = hand_backfit(inst, &train);
        for &i in &held {
            loss += (inst.y[i] - fit.predict(&inst.curves[i]) - theta * inst.x[i][0]).powi(2);
        }
    }
    loss
}

/// Hand-enumerated CV_DR with `k = 1` (unit weights) and `q = 1`.
pub fn hand_cv_dr_k1(inst: &Instance, folds: &[usize]) -> f64 {
    let mut loss = 0.0;
    for l in 0..fold_count(folds) {
        let (held, train) = split(folds, l);
        let (or_fit, theta) = hand_backfit(inst, &train);
        let train_curves: Vec<&Vec<f64>> = train.iter().map(|&i| &inst.curves[i]).collect();
        let x_bar_train = train.iter().map(|&i| inst.x[i][0]).sum::<f64>() / train.len() as f64;
        let pseudo: Vec<f64> = train
            .iter()
            .map(|&i| {
                let linear = or_fit.predict(&inst.curves[i]);
                inst.y[i] - linear - theta * inst.x[i][0] + linear + theta * x_bar_train
            })
            .collect();
        let owned: Vec<Vec<f64>> = train.iter().map(|&i| inst.curves[i].clone()).collect();
        let dr = HandFit::regress(PowerFpca::fit(&owned, &inst.points, 1), &train_curves, &pseudo);
        let x_bar_held = held.iter().map(|&i| inst.x[i][0]).sum::<f64>() / held.len() as f64;
        for &i in &held {
            let linear = or_fit.predict(&inst.curves[i]);
            let pseudo_i = inst.y[i] - linear - theta * inst.x[i][0] + linear + theta * x_bar_held;
            loss += (pseudo_i - dr.predict(&inst.curves[i])).powi(2);
        }
    }
    loss
}
