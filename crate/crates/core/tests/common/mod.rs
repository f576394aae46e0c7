//! Random instances and independent oracles shared by the integration and
//! acceptance tests.
#![allow(dead_code)]

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SecondOrderConeT};
use cmfuot_core::scene::{transfer_for_points, ArrayGeometry, Point3, TransferMatrix};
use cmfuot_core::signalsim::{add_noise_for_snr, empirical_covariance, synthesize_snapshots, CovarianceMatrix};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FREQ: f64 = 4000.0;
pub const SPEED: f64 = 343.0;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sensors scattered over a 1 m square in the plane x = 0.
pub fn random_array(rng: &mut ChaCha8Rng, sensors: usize) -> ArrayGeometry {
    let pts =
        (0..sensors).map(|_| Point3::new(0.0, rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5))).collect();
    ArrayGeometry::new(pts).unwrap()
}

/// Points in the box [1, 3] x [-1, 1] x [-1, 1].
pub fn random_points(rng: &mut ChaCha8Rng, count: usize) -> Vec<Point3> {
    (0..count)
        .map(|_| Point3::new(rng.random_range(1.0..3.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

pub fn random_transfer(seed: u64, sensors: usize, points: usize) -> TransferMatrix {
    let mut r = rng(seed);
    let array = random_array(&mut r, sensors);
    let pts = random_points(&mut r, points);
    transfer_for_points(&array, &pts, FREQ, SPEED).unwrap()
}

/// Empirical covariance of `k` random columns of `g` observed over 64
/// snapshots at 5 dB SNR, so that no exact fit exists.
pub fn noisy_covariance(g: &TransferMatrix, seed: u64, k: usize) -> CovarianceMatrix {
    let mut r = rng(seed ^ 0x5eed);
    let cols: Vec<usize> = (0..k).map(|_| r.random_range(0..g.points())).collect();
    let powers: Vec<f64> = (0..k).map(|_| r.random_range(0.5..1.5)).collect();
    let steering = DMatrix::from_fn(g.sensors(), k, |i, j| g.matrix()[(i, cols[j])]);
    let block = synthesize_snapshots(&steering, &powers, 64, seed).unwrap();
    let noisy = add_noise_for_snr(&block, 5.0, seed).unwrap();
    empirical_covariance(&noisy)
}

/// `sum_m b_m g_m g_m^H`, entry by entry.
pub fn naive_model(g: &TransferMatrix, b: &[f64]) -> DMatrix<Complex64> {
    let n = g.sensors();
    let a = g.matrix();
    DMatrix::from_fn(n, n, |i, j| {
        let mut z = Complex64::new(0.0, 0.0);
        for (m, &bm) in b.iter().enumerate() {
            z += a[(i, m)] * a[(j, m)].conj() * bm;
        }
        z
    })
}

/// `|G diag(b) G^H - S|_F^2` by direct summation over entries.
pub fn naive_objective(g: &TransferMatrix, b: &[f64], sigma: &CovarianceMatrix) -> f64 {
    let r = naive_model(g, b);
    let mut acc = 0.0;
    for i in 0..g.sensors() {
        for j in 0..g.sensors() {
            acc += (r[(i, j)] - sigma.sigma[(i, j)]).norm_sqr();
        }
    }
    acc
}

/// Interior-point solution of `min_{b >= 0} |G diag(b) G^H - S|_F`, posed as
/// a second-order cone program over all real and imaginary matrix entries.
pub fn qp_oracle(g: &TransferMatrix, sigma: &CovarianceMatrix) -> Vec<f64> {
    let n = g.sensors();
    let m = g.points();
    let a = g.matrix();
    let rows = 2 * n * n;
    // Variables [b_0 .. b_{M-1}, t]; minimise t.
    let mut cons = vec![vec![0.0; m + 1]; m + 1 + rows];
    let mut rhs = vec![0.0; m + 1 + rows];
    for k in 0..m {
        cons[k][k] = -1.0;
    }
    cons[m][m] = -1.0;
    let mut r = m + 1;
    for i in 0..n {
        for j in 0..n {
            for part in 0..2 {
                for k in 0..m {
                    let z = a[(i, k)] * a[(j, k)].conj();
                    cons[r][k] = if part == 0 { z.re } else { z.im };
                }
                let s = sigma.sigma[(i, j)];
                rhs[r] = if part == 0 { s.re } else { s.im };
                r += 1;
            }
        }
    }
    let a_mat = CscMatrix::from(&cons);
    let p = CscMatrix::zeros((m + 1, m + 1));
    let mut q = vec![0.0; m + 1];
    q[m] = 1.0;
    let cones = [NonnegativeConeT(m), SecondOrderConeT(rows + 1)];
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_gap_abs(1e-12)
        .tol_gap_rel(1e-12)
        .tol_feas(1e-12)
        .max_iter(500)
        .build()
        .unwrap();
    let mut solver = DefaultSolver::new(&p, &q, &a_mat, &rhs, &cones, settings).unwrap();
    solver.solve();
    solver.solution.x[..m].iter().map(|v| v.max(0.0)).collect()
}

/// Central finite difference of `f` at `x` with step `h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
