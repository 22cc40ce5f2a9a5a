//! Library results compared against the independent implementations in
//! the parent module.

use std::sync::Arc;

use adrf::fsw::{fit_local_weight, median_distance, pairwise_distances};
use adrf::{
    cv_loss_dr, cv_loss_fsw, cv_loss_or, fit_naive, fpca, sieve_design, standardize, Folds, RhoFamily,
};
use nalgebra::DMatrix;

use super::{
    gradient_ascent_dual, hand_cv_dr_k1, hand_cv_fsw_k1, hand_cv_or, integrate, ols, trapezoid, twelve,
    twelve_folds, Instance, PowerFpca,
};

pub type Check = fn() -> Result<String, String>;

pub const ALL: &[(&str, Check)] = &[
    ("fpca_vs_power_iteration", fpca_vs_power_iteration),
    ("regression_vs_normal_equations", regression_vs_normal_equations),
    ("dual_vs_gradient_ascent", dual_vs_gradient_ascent),
    ("cv_fsw_k1_hand_enumeration", cv_fsw_k1_hand_enumeration),
    ("cv_or_hand_enumeration", cv_or_hand_enumeration),
    ("cv_dr_k1_hand_enumeration", cv_dr_k1_hand_enumeration),
    ("cv_fsw_k2_hand_enumeration", cv_fsw_k2_hand_enumeration),
];

fn err(e: adrf::AdrfError) -> String {
    e.to_string()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

pub fn fpca_vs_power_iteration() -> Result<String, String> {
    let inst = Instance::random(11, 60, 41, 1);
    let ds = inst.dataset();
    let q = 4;
    let lib = fpca(ds.curves(), q).map_err(err)?;
    let oracle = PowerFpca::fit(&inst.curves, &inst.points, q);
    let mut worst: f64 = 0.0;
    for j in 0..q {
        worst = worst.max(rel(lib.eigenvalues()[j], oracle.eigenvalues[j]));
        let phi = lib.eigenfunctions()[j].values();
        let sign = integrate(&oracle.weights, phi, &oracle.eigenfunctions[j]).signum();
        for (a, b) in phi.iter().zip(&oracle.eigenfunctions[j]) {
            worst = worst.max((a - sign * b).abs());
        }
        for (i, z) in inst.curves.iter().enumerate() {
            worst = worst.max((lib.scores()[(i, j)] - sign * oracle.score(z, j)).abs());
        }
    }
    if worst < 1e-6 {
        Ok(format!("max discrepancy {worst:.1e}"))
    } else {
        Err(format!("max discrepancy {worst:.1e}"))
    }
}

pub fn regression_vs_normal_equations() -> Result<String, String> {
    let inst = Instance::random(12, 80, 31, 1);
    let ds = inst.dataset();
    let q = 3;
    let model = Arc::new(fpca(ds.curves(), q).map_err(err)?);
    let fit = fit_naive(&ds, &model, q).map_err(err)?;
    // Regress Y on (1, <Z, phi_j>) with the library eigenfunctions.
    let w = trapezoid(&inst.points);
    let rows: Vec<Vec<f64>> = inst
        .curves
        .iter()
        .map(|z| {
            std::iter::once(1.0)
                .chain(model.eigenfunctions().iter().map(|phi| integrate(&w, z, phi.values())))
                .collect()
        })
        .collect();
    let beta = ols(&rows, &inst.y);
    let mut worst = rel(beta[0], fit.intercept);
    for j in 0..q {
        worst = worst.max(rel(beta[j + 1], fit.coefficients[j]));
    }
    if worst < 1e-8 {
        Ok(format!("max discrepancy {worst:.1e}"))
    } else {
        Err(format!("max discrepancy {worst:.1e}"))
    }
}

pub fn dual_vs_gradient_ascent() -> Result<String, String> {
    let inst = Instance::random(13, 50, 21, 1);
    let ds = inst.dataset();
    let (x_st, _) = standardize(ds.covariates()).map_err(err)?;
    let design = sieve_design(&x_st, 3).map_err(err)?;
    let d = pairwise_distances(ds.curves()).map_err(err)?;
    let n = ds.n();
    let med = median_distance(&d);
    let mut worst: f64 = 0.0;
    // A huge bandwidth (every neighbour weighted 1/(n-1)) and a local one.
    for h in [1e6 * med, 0.5 * med] {
        for i in [0, 17, 33, 49] {
            let lib = fit_local_weight(i, &d, &design, h, RhoFamily::ExponentialTilting).map_err(err)?;
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let rows: Vec<Vec<f64>> = others.iter().map(|&j| design.row(j).to_vec()).collect();
            let d2: Vec<f64> = others.iter().map(|&j| d[(i, j)] * d[(i, j)]).collect();
            let d2min = d2.iter().copied().fold(f64::INFINITY, f64::min);
            let k: Vec<f64> = d2.iter().map(|v| (-(v - d2min) / (h * h)).exp()).collect();
            let total: f64 = k.iter().sum();
            let w: Vec<f64> = k.iter().map(|v| v / total).collect();
            let c: Vec<f64> = (0..3)
                .map(|col| rows.iter().map(|r| r[col]).sum::<f64>() / (n - 1) as f64)
                .collect();
            let eta = gradient_ascent_dual(&rows, &w, &c, 1e-12);
            for (a, b) in lib.eta.iter().zip(&eta) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    if worst < 1e-6 {
        Ok(format!("max |eta| discrepancy {worst:.1e}"))
    } else {
        Err(format!("max |eta| discrepancy {worst:.1e}"))
    }
}

fn compare(name: &str, lib: f64, oracle: f64, tol: f64) -> Result<String, String> {
    let r = rel(lib, oracle);
    let msg = format!("{name}: library {lib:.12e}, hand {oracle:.12e}, rel {r:.1e}");
    if r < tol {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn twelve_setup() -> Result<(Instance, adrf::Dataset<f64>, Folds), String> {
    let inst = twelve();
    let ds = inst.dataset();
    let folds = Folds::from_assignment(twelve_folds()).map_err(err)?;
    Ok((inst, ds, folds))
}

pub fn cv_fsw_k1_hand_enumeration() -> Result<String, String> {
    let (inst, ds, folds) = twelve_setup()?;
    let lib = cv_loss_fsw(&ds, 1.0, 1, 1, &folds, RhoFamily::default()).map_err(err)?;
    compare("CV_FSW(k=1, q=1)", lib, hand_cv_fsw_k1(&inst, &twelve_folds()), 1e-10)
}

pub fn cv_or_hand_enumeration() -> Result<String, String> {
    let (inst, ds, folds) = twelve_setup()?;
    let lib = cv_loss_or(&ds, 1, &folds).map_err(err)?;
    compare("CV_OR(q=1)", lib, hand_cv_or(&inst, &twelve_folds()), 1e-10)
}

pub fn cv_dr_k1_hand_enumeration() -> Result<String, String> {
    let (inst, ds, folds) = twelve_setup()?;
    let lib = cv_loss_dr(&ds, 1.0, 1, 1, &folds, RhoFamily::default()).map_err(err)?;
    compare("CV_DR(k=1, q=1)", lib, hand_cv_dr_k1(&inst, &twelve_folds()), 1e-10)
}

/// Stabilized weight at one point: kernel-weighted exponential tilting
/// over `train` with basis `(1, x)` (the sieve span for `k = 2`).
/// `x_centre` is the covariate value at which the fitted weight is read.
fn hand_weight(
    inst: &Instance,
    dist: &DMatrix<f64>,
    centre: usize,
    x_centre: f64,
    train: &[usize],
    h: f64,
    target: &[f64],
) -> f64 {
    let nb: Vec<usize> = train.iter().copied().filter(|&j| j != centre).collect();
    let d2: Vec<f64> = nb.iter().map(|&j| dist[(centre, j)].powi(2)).collect();
    let d2min = d2.iter().copied().fold(f64::INFINITY, f64::min);
    let k: Vec<f64> = d2.iter().map(|v| (-(v - d2min) / (h * h)).exp()).collect();
    let total: f64 = k.iter().sum();
    let w: Vec<f64> = k.iter().map(|v| v / total).collect();
    let rows: Vec<Vec<f64>> = nb.iter().map(|&j| vec![1.0, inst.x[j][0]]).collect();
    let eta = gradient_ascent_dual(&rows, &w, target, 1e-13);
    (-(eta[0] + eta[1] * x_centre) - 1.0).exp()
}

pub fn cv_fsw_k2_hand_enumeration() -> Result<String, String> {
    let (inst, ds, folds) = twelve_setup()?;
    let n = inst.y.len();
    let w = trapezoid(&inst.points);
    let dist = DMatrix::from_fn(n, n, |i, j| {
        let diff: Vec<f64> = inst.curves[i].iter().zip(&inst.curves[j]).map(|(a, b)| a - b).collect();
        integrate(&w, &diff, &diff).sqrt()
    });
    let h = 1.5;
    let assignment = twelve_folds();
    let mut oracle = 0.0;
    for l in 0..2 {
        let held: Vec<usize> = (0..n).filter(|&i| assignment[i] == l).collect();
        let train: Vec<usize> = (0..n).filter(|&i| assignment[i] != l).collect();
        let nt = train.len() as f64;
        let sx: f64 = train.iter().map(|&j| inst.x[j][0]).sum();
        let pi_train: Vec<f64> = train
            .iter()
            .map(|&i| {
                let target = [1.0, (sx - inst.x[i][0]) / (nt - 1.0)];
                hand_weight(&inst, &dist, i, inst.x[i][0], &train, h, &target)
            })
            .collect();
        let owned: Vec<Vec<f64>> = train.iter().map(|&i| inst.curves[i].clone()).collect();
        let pf = PowerFpca::fit(&owned, &inst.points, 1);
        let r: Vec<f64> = train.iter().zip(&pi_train).map(|(&i, p)| inst.y[i] * p).collect();
        let rbar = r.iter().sum::<f64>() / nt;
        let slope = train
            .iter()
            .zip(&r)
            .map(|(&i, v)| (v - rbar) * pf.score(&inst.curves[i], 0))
            .sum::<f64>()
            / nt
            / pf.eigenvalues[0];
        // Held-out covariates are clipped to 1.5 half-ranges around the
        // midpoint of the training range before the sieve is evaluated.
        let lo = train.iter().map(|&j| inst.x[j][0]).fold(f64::INFINITY, f64::min);
        let hi = train.iter().map(|&j| inst.x[j][0]).fold(f64::NEG_INFINITY, f64::max);
        let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        for &i in &held {
            let x = inst.x[i][0].clamp(mid - 1.5 * half, mid + 1.5 * half);
            let pi = hand_weight(&inst, &dist, i, x, &train, h, &[1.0, sx / nt]);
            let pred = rbar + slope * pf.score(&inst.curves[i], 0);
            oracle += (inst.y[i] * pi - pred).powi(2);
        }
    }
    let lib = cv_loss_fsw(&ds, h, 2, 1, &folds, RhoFamily::default()).map_err(err)?;
    compare("CV_FSW(k=2, q=1)", lib, oracle, 1e-6)
}
