//! Lawson–Hanson active-set solver for `min |A x - y|^2` subject to `x >= 0`.
//!
//! The passive-set least-squares subproblems are solved with a thin QR of the
//! active columns.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    /// `max` KKT violation of the dual `w = A^T (y - A x)`, relative to `|A^T y|_inf`.
    pub kkt: f64,
    pub iterations: usize,
}

/// Relative KKT violation of `x` for `min |Ax - y|^2, x >= 0`.
pub fn kkt_residual(a: &DMatrix<f64>, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let w = a.tr_mul(&(y - a * x));
    let scale = a.tr_mul(y).amax().max(f64::MIN_POSITIVE);
    let worst =
        x.iter().zip(w.iter()).map(|(&xj, &wj)| if xj > 0.0 { wj.abs() } else { wj.max(0.0) }).fold(0.0, f64::max);
    worst / scale
}

fn solve_passive(a: &DMatrix<f64>, y: &DVector<f64>, passive: &[usize]) -> Option<DVector<f64>> {
    let sub = a.select_columns(passive);
    let qr = sub.qr();
    let r = qr.r();
    let max_diag = r.diagonal().amax();
    if r.diagonal().iter().any(|v| v.abs() <= 1e-13 * max_diag) {
        return None;
    }
    let qty = qr.q().tr_mul(y);
    r.solve_upper_triangular(&qty)
}

pub fn nnls(a: &DMatrix<f64>, y: &DVector<f64>, tol: f64, max_outer: usize) -> Result<NnlsSolution> {
    let (rows, n) = a.shape();
    if y.len() != rows {
        return Err(Error::DimensionMismatch(format!("design matrix has {rows} rows, data vector {}", y.len())));
    }
    let scale = a.tr_mul(y).amax().max(f64::MIN_POSITIVE);
    let mut x = DVector::<f64>::zeros(n);
    let mut in_passive = vec![false; n];
    let mut passive: Vec<usize> = Vec::new();
    let mut iterations = 0;

    loop {
        let w = a.tr_mul(&(y - a * &x));
        // Candidates that were rejected for numerical reasons in this round.
        let mut skip = vec![false; n];
        let mut entered = false;
        while !entered {
            let cand =
                (0..n).filter(|&j| !in_passive[j] && !skip[j]).fold(None, |best: Option<(usize, f64)>, j| match best {
                    Some((_, bw)) if bw >= w[j] => best,
                    _ => Some((j, w[j])),
                });
            let Some((j, wj)) = cand else { break };
            if wj <= tol * scale {
                break;
            }
            let mut trial = passive.clone();
            trial.push(j);
            match solve_passive(a, y, &trial) {
                Some(z) if z[trial.len() - 1] > 0.0 => {
                    passive = trial;
                    in_passive[j] = true;
                    entered = true;
                }
                _ => skip[j] = true,
            }
        }
        if !entered || iterations >= max_outer {
            break;
        }
        iterations += 1;

        loop {
            let Some(z) = solve_passive(a, y, &passive) else {
                return Err(Error::InvalidInput("NNLS passive set became rank deficient".into()));
            };
            if z.iter().all(|&v| v > 0.0) {
                for (k, &j) in passive.iter().enumerate() {
                    x[j] = z[k];
                }
                break;
            }
            // Step toward z until the first passive variable hits zero.
            let mut alpha = f64::INFINITY;
            for (k, &j) in passive.iter().enumerate() {
                if z[k] <= 0.0 {
                    alpha = alpha.min(x[j] / (x[j] - z[k]));
                }
            }
            for (k, &j) in passive.iter().enumerate() {
                x[j] += alpha * (z[k] - x[j]);
            }
            passive.retain(|&j| {
                let keep = x[j] > 0.0 && x[j] > 1e-15 * x.amax();
                if !keep {
                    x[j] = 0.0;
                    in_passive[j] = false;
                }
                keep
            });
            if passive.is_empty() {
                break;
            }
        }
    }

    let kkt = kkt_residual(a, y, &x);
    Ok(NnlsSolution { x, kkt, iterations })
}
